//! Run configuration: one TOML file drives every command. Unknown keys are
//! rejected at every level.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{self, CsvSchema, Dataset, ImageTask, SequenceTask};
use crate::error::{Error, Result};
use crate::layers::{build_kws_net, build_resblock_net, KwsConfig, Network, ResNetConfig};
use crate::noise::NoiseSpec;
use crate::train::{GradualSchedule, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSpec {
    Sequence(SequenceTask),
    Image(ImageTask),
    /// Feature CSV with header `label,split,f0,...`. Relative paths resolve
    /// against the config file's directory.
    Csv { path: PathBuf, sample_shape: Vec<usize>, n_classes: usize },
}

impl DataSpec {
    pub fn load(&self, seed: u64, base: &Path) -> Result<Dataset> {
        match self {
            DataSpec::Sequence(t) => data::gen_sequence_classes(t, seed),
            DataSpec::Image(t) => data::gen_image_classes(t, seed),
            DataSpec::Csv { path, sample_shape, n_classes } => {
                let schema = CsvSchema {
                    sample_shape: sample_shape.clone(),
                    n_classes: *n_classes,
                };
                data::load_csv_features(&base.join(path), &schema)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum NetworkSpec {
    Kws(KwsConfig),
    Resnet(ResNetConfig),
}

impl NetworkSpec {
    pub fn build(&self, seed: u64) -> Result<Network> {
        match self {
            NetworkSpec::Kws(c) => build_kws_net(c, seed),
            NetworkSpec::Resnet(c) => build_resblock_net(c, seed),
        }
    }
}

fn default_ladder() -> Vec<[f32; 3]> {
    NoiseSpec::ladder().iter().map(|s| [s.sigma_w, s.sigma_a, s.sigma_mac]).collect()
}

fn default_repetitions() -> usize {
    10
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    /// `[σ_w, σ_a, σ_MAC]` points in percent of the respective LSB.
    #[serde(default = "default_ladder")]
    pub ladder: Vec<[f32; 3]>,
    #[serde(default = "default_repetitions")]
    pub repetitions: usize,
    #[serde(default)]
    pub frozen_weights: bool,
    /// Noise point used by noise-aware training.
    #[serde(default)]
    pub train_point: Option<[f32; 3]>,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig {
            ladder: default_ladder(),
            repetitions: default_repetitions(),
            frozen_weights: false,
            train_point: None,
        }
    }
}

impl NoiseConfig {
    fn spec(&self, p: [f32; 3], seed: u64) -> NoiseSpec {
        NoiseSpec {
            seed,
            repetitions: self.repetitions,
            frozen_weights: self.frozen_weights,
            ..NoiseSpec::new(p[0], p[1], p[2])
        }
    }

    pub fn ladder_specs(&self, seed: u64) -> Vec<NoiseSpec> {
        self.ladder.iter().map(|&p| self.spec(p, seed)).collect()
    }

    pub fn train_spec(&self, seed: u64) -> Option<NoiseSpec> {
        self.train_point.map(|p| self.spec(p, seed))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub name: String,
    pub seed: u64,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    pub data: DataSpec,
    pub network: NetworkSpec,
    pub train: TrainConfig,
    #[serde(default)]
    pub schedule: GradualSchedule,
    #[serde(default)]
    pub noise: NoiseConfig,
}

impl RunConfig {
    /// Parses and validates; errors carry no partial state.
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<(Self, String)> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let cfg = Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        Ok((cfg, text))
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.trim().is_empty() {
            return Err(Error::Config("name must not be empty".into()));
        }
        self.train.validate()?;
        self.schedule.validate()?;
        for p in self.noise.ladder.iter().chain(self.noise.train_point.as_ref()) {
            self.noise.spec(*p, 0).validate()?;
        }
        if self.noise.repetitions == 0 {
            return Err(Error::Config("noise repetitions must be at least 1".into()));
        }
        Ok(())
    }

    /// Training settings with the run seed applied.
    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig { seed, ..self.train.clone() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
name = "toy"
seed = 3

[data]
kind = "sequence"
n_classes = 4
n_samples = 200
length = 32
channels = 8
jitter = 0.5
max_shift = 4
separation = 1.0

[network]
kind = "kws"
in_features = 8
embed = 16
channels = 16
classes = 4
dilations = [1, 2, 4]
frames = 32

[train]
epochs = 2
"#;

    #[test]
    fn parses_minimal() {
        let c = RunConfig::from_toml(MINIMAL).unwrap();
        assert_eq!(c.noise.ladder.len(), 5);
        assert!(c.schedule.stages.is_empty());
    }

    #[test]
    fn rejects_unknown_keys_everywhere() {
        for (from, to) in [("seed = 3", "seed = 3\nsed = 4"), ("frames = 32", "frames = 32\nframe = 3"), ("epochs = 2", "epochs = 2\nepoch = 2"), ("jitter", "jiter")] {
            let bad = MINIMAL.replace(from, to);
            assert!(matches!(RunConfig::from_toml(&bad), Err(Error::Config(_))), "{to}");
        }
    }

    #[test]
    fn seed_is_mandatory() {
        assert!(RunConfig::from_toml(&MINIMAL.replace("seed = 3", "")).is_err());
    }
}
