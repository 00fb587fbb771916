//! Dense f32 tensors, compute kernels and a reverse-mode autodiff tape.

pub mod kernels;
mod tape;

pub use tape::{Grid, NodeId, Tape};

use crate::error::{Error, Result};
use kernels::{Conv1dGeom, Conv2dGeom, DenseGeom};

/// Row-major dense array of 32-bit reals.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
    requires_grad: bool,
    grad: Option<Vec<f32>>,
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f32>) -> Result<Self> {
        let shape = shape.into();
        if shape.contains(&0) {
            return Err(Error::shape("tensor", "shape", format!("zero extent in {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                "tensor",
                "data",
                format!("shape {shape:?} needs {numel} values, got {}", data.len()),
            ));
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Tensor::new(shape, vec![0.0; n]).expect("zeros: positive extents")
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> f32) -> Self {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        Tensor::new(shape, (0..n).map(&mut f).collect()).expect("from_fn: positive extents")
    }

    pub fn scalar(v: f32) -> Self {
        Tensor::new(vec![1], vec![v]).unwrap()
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn with_grad(mut self, on: bool) -> Self {
        self.requires_grad = on;
        self
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
    }

    pub fn grad(&self) -> Option<&[f32]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Option<Vec<f32>>) -> Result<()> {
        if let Some(g) = &grad {
            if g.len() != self.data.len() {
                return Err(Error::shape(
                    "set_grad",
                    "grad",
                    format!("expected {} values, got {}", self.data.len(), g.len()),
                ));
            }
        }
        self.grad = grad;
        Ok(())
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.data.len() || shape.contains(&0) {
            return Err(Error::shape(
                "reshape",
                "shape",
                format!("{:?} -> {:?}", self.shape, shape),
            ));
        }
        self.shape = shape;
        Ok(self)
    }
}

/// Splits an optionally batched input into (batch, per-sample dims).
fn batched<'a>(op: &'static str, t: &'a Tensor, sample_rank: usize) -> Result<(usize, &'a [usize], bool)> {
    let s = t.shape();
    if s.len() == sample_rank {
        Ok((1, s, false))
    } else if s.len() == sample_rank + 1 {
        Ok((s[0], &s[1..], true))
    } else {
        Err(Error::shape(
            op,
            "input rank",
            format!("expected rank {sample_rank} or {}, got {:?}", sample_rank + 1, s),
        ))
    }
}

pub(crate) fn conv1d_geom(op: &'static str, x: &[usize], batch: usize, w: &[usize], dilation: usize, padding: usize) -> Result<Conv1dGeom> {
    if w.len() != 3 {
        return Err(Error::shape(op, "kernel rank", format!("expected [C_out, C_in, K], got {w:?}")));
    }
    if x[0] != w[1] {
        return Err(Error::shape(
            op,
            "input C_in vs kernel C_in",
            format!("{} != {}", x[0], w[1]),
        ));
    }
    if dilation == 0 {
        return Err(Error::shape(op, "dilation", "must be positive"));
    }
    let g = Conv1dGeom {
        batch,
        c_in: x[0],
        len: x[1],
        c_out: w[0],
        taps: w[2],
        dilation,
        padding,
    };
    if g.out_len().is_none() {
        return Err(Error::shape(
            op,
            "L vs dilated kernel span",
            format!("L={} padding={} span={}", x[1], padding, dilation * (w[2] - 1) + 1),
        ));
    }
    Ok(g)
}

pub(crate) fn conv2d_geom(op: &'static str, x: &[usize], batch: usize, w: &[usize], stride: usize, padding: usize) -> Result<Conv2dGeom> {
    if w.len() != 4 {
        return Err(Error::shape(op, "kernel rank", format!("expected [C_out, C_in, Kh, Kw], got {w:?}")));
    }
    if x[0] != w[1] {
        return Err(Error::shape(op, "input C_in vs kernel C_in", format!("{} != {}", x[0], w[1])));
    }
    if stride == 0 {
        return Err(Error::shape(op, "stride", "must be positive"));
    }
    let g = Conv2dGeom {
        batch,
        c_in: x[0],
        h: x[1],
        w: x[2],
        c_out: w[0],
        kh: w[2],
        kw: w[3],
        stride,
        padding,
    };
    if g.out_hw().is_none() {
        return Err(Error::shape(op, "H/W vs kernel", format!("input {x:?}, kernel {w:?}, padding {padding}")));
    }
    Ok(g)
}

/// Cross-correlation of `[C_in, L]` (or `[N, C_in, L]`) with `[C_out, C_in, K]`.
pub fn conv1d(input: &Tensor, kernel: &Tensor, dilation: usize, padding: usize) -> Result<Tensor> {
    let (batch, xs, is_batched) = batched("conv1d", input, 2)?;
    let g = conv1d_geom("conv1d", xs, batch, kernel.shape(), dilation, padding)?;
    let lo = g.out_len().unwrap();
    let mut out = vec![0.0; batch * g.c_out * lo];
    kernels::conv1d_forward(&g, input.data(), kernel.data(), &mut out);
    let shape = if is_batched { vec![batch, g.c_out, lo] } else { vec![g.c_out, lo] };
    Tensor::new(shape, out)
}

/// Zero-padded cross-correlation of `[C_in, H, W]` (or batched) with
/// `[C_out, C_in, Kh, Kw]`.
pub fn conv2d(input: &Tensor, kernel: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let (batch, xs, is_batched) = batched("conv2d", input, 3)?;
    let g = conv2d_geom("conv2d", xs, batch, kernel.shape(), stride, padding)?;
    let (ho, wo) = g.out_hw().unwrap();
    let mut out = vec![0.0; batch * g.c_out * ho * wo];
    kernels::conv2d_forward(&g, input.data(), kernel.data(), &mut out);
    let shape = if is_batched { vec![batch, g.c_out, ho, wo] } else { vec![g.c_out, ho, wo] };
    Tensor::new(shape, out)
}

/// `weights · input + bias` for `input: [N]`, `weights: [M, N]`, `bias: [M]`.
pub fn dense(input: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let ws = weights.shape();
    if ws.len() != 2 || input.shape().len() != 1 {
        return Err(Error::shape("dense", "rank", format!("input {:?}, weights {:?}", input.shape(), ws)));
    }
    if ws[1] != input.numel() {
        return Err(Error::shape("dense", "weights N vs input N", format!("{} != {}", ws[1], input.numel())));
    }
    if bias.shape() != [ws[0]] {
        return Err(Error::shape("dense", "bias M vs weights M", format!("{:?} vs {}", bias.shape(), ws[0])));
    }
    let g = DenseGeom {
        batch: 1,
        n_in: ws[1],
        n_out: ws[0],
        frames: 1,
    };
    let mut out = vec![0.0; ws[0]];
    kernels::dense_forward(&g, input.data(), weights.data(), Some(bias.data()), &mut out);
    Tensor::new(vec![ws[0]], out)
}

/// Per-channel mean over all trailing axes of `[C, ...]`.
pub fn global_avg_pool(input: &Tensor) -> Result<Tensor> {
    let s = input.shape();
    if s.len() < 2 {
        return Err(Error::shape("global_avg_pool", "rank", format!("need [C, ...spatial], got {s:?}")));
    }
    let spatial: usize = s[1..].iter().product();
    let mut out = vec![0.0; s[0]];
    kernels::global_avg_pool(input.data(), s[0], spatial, &mut out);
    Tensor::new(vec![s[0]], out)
}

/// Numerically stable `log softmax`.
pub fn log_softmax(logits: &[f32]) -> Vec<f32> {
    log_softmax_f64(logits).into_iter().map(|v| v as f32).collect()
}

/// `log softmax` evaluated in f64, for losses rounded once at the end.
pub fn log_softmax_f64(logits: &[f32]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let sum: f64 = logits.iter().map(|&z| (z as f64 - max).exp()).sum();
    let lse = max + sum.ln();
    logits.iter().map(|&z| z as f64 - lse).collect()
}

pub fn softmax(logits: &[f32]) -> Vec<f32> {
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let e: Vec<f32> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f32 = e.iter().sum();
    e.into_iter().map(|v| v / sum).collect()
}

pub(crate) fn check_distribution(target: &[f32]) -> Result<()> {
    let sum: f64 = target.iter().map(|&t| t as f64).sum();
    if target.iter().any(|&t| !(t >= 0.0)) || (sum - 1.0).abs() > 1e-6 {
        return Err(Error::Usage(format!(
            "target must be a probability vector (entries >= 0, sum 1 within 1e-6); sum = {sum}"
        )));
    }
    Ok(())
}

/// `−Σ target_k · log softmax(logits)_k` with soft or one-hot targets.
pub fn softmax_cross_entropy(logits: &Tensor, target: &[f32]) -> Result<f32> {
    if logits.shape().len() != 1 || target.len() != logits.numel() {
        return Err(Error::shape(
            "softmax_cross_entropy",
            "K",
            format!("logits {:?} vs target {}", logits.shape(), target.len()),
        ));
    }
    check_distribution(target)?;
    let ls = log_softmax_f64(logits.data());
    Ok(-ls.iter().zip(target).map(|(l, &t)| if t == 0.0 { 0.0 } else { t as f64 * l }).sum::<f64>() as f32)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f32]) -> Tensor {
        Tensor::new(shape.to_vec(), v.to_vec()).unwrap()
    }

    #[test]
    fn shape_invariant_enforced() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![0], vec![]).is_err());
        let mut x = Tensor::zeros(vec![2, 2]);
        assert!(x.set_grad(Some(vec![0.0; 3])).is_err());
        x.set_grad(Some(vec![1.0; 4])).unwrap();
        assert_eq!(x.grad().unwrap(), &[1.0; 4]);
    }

    #[test]
    fn conv1d_identity_and_sum_kernels() {
        let x = t(&[1, 3], &[1.0, 0.0, 0.0]);
        let id = t(&[1, 1, 1], &[1.0]);
        assert_eq!(conv1d(&x, &id, 1, 0).unwrap().data(), &[1.0, 0.0, 0.0]);

        let x = t(&[1, 3], &[1.0, 2.0, 3.0]);
        let sum = t(&[1, 1, 3], &[1.0, 1.0, 1.0]);
        let y = conv1d(&x, &sum, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1]);
        assert_eq!(y.data(), &[6.0]);
    }

    #[test]
    fn conv1d_shape_errors_name_axes() {
        let x = Tensor::zeros(vec![2, 5]);
        let k = Tensor::zeros(vec![1, 3, 3]);
        let err = conv1d(&x, &k, 1, 0).unwrap_err().to_string();
        assert!(err.contains("C_in"), "{err}");
        let k = Tensor::zeros(vec![1, 2, 3]);
        let err = conv1d(&x, &k, 4, 0).unwrap_err().to_string();
        assert!(err.contains("span"), "{err}");
    }

    #[test]
    fn conv2d_small_cases() {
        let x = Tensor::from_fn(vec![1, 2, 2], |_| 1.0);
        let k = t(&[1, 1, 1, 1], &[2.0]);
        let y = conv2d(&x, &k, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 2, 2]);
        assert_eq!(y.data(), &[2.0; 4]);

        let x = Tensor::from_fn(vec![3, 8, 8], |i| i as f32 * 0.1);
        let k = Tensor::zeros(vec![4, 3, 3, 3]);
        let y = conv2d(&x, &k, 2, 1).unwrap();
        assert_eq!(y.shape(), &[4, 4, 4]);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dense_small_cases() {
        let w = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let x = t(&[2], &[1.0, 1.0]);
        let b = t(&[2], &[0.0, 0.0]);
        assert_eq!(dense(&x, &w, &b).unwrap().data(), &[3.0, 7.0]);

        let eye = t(&[3, 3], &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        let x = t(&[3], &[0.5, -2.0, 7.0]);
        assert_eq!(dense(&x, &eye, &Tensor::zeros(vec![3])).unwrap().data(), x.data());
        assert!(dense(&x, &w, &b).is_err());
    }

    #[test]
    fn pooling() {
        let x = t(&[2, 3], &[4.0, 4.0, 4.0, 1.0, 2.0, 3.0]);
        assert_eq!(global_avg_pool(&x).unwrap().data(), &[4.0, 2.0]);
    }

    #[test]
    fn cross_entropy_cases() {
        let l = t(&[2], &[0.3, 0.3]);
        let v = softmax_cross_entropy(&l, &[1.0, 0.0]).unwrap();
        assert!((v - std::f32::consts::LN_2).abs() < 1e-7);
        let l = t(&[2], &[0.0, 80.0]);
        assert!(softmax_cross_entropy(&l, &[0.0, 1.0]).unwrap().abs() < 1e-6);
        assert!(softmax_cross_entropy(&l, &[0.5, 0.6]).is_err());
        assert!(softmax_cross_entropy(&l, &[-0.5, 1.5]).is_err());
    }
}
