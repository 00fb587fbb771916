mod common;

use common::*;
use proptest::prelude::*;
use qnet::archive::{decode_integer, encode_integer, Provenance};
use qnet::data::Split;
use qnet::integer::{
    accumulator_bits, compile_model, compile_thresholds, float_rule, verify_equivalence, ConvGeometry, IntegerLayerPlan, OpCount, Step,
};
use qnet::layers::{attach_quantizers, build_kws_net, replace_bn_relu, KwsConfig, Network};
use qnet::quant::{mac_scale, LowerBound, QuantConfig};
use qnet::tensor::Tensor;

fn plan(weights: Vec<i8>, shape: Vec<usize>, wq: QuantConfig, aq: QuantConfig, oq: QuantConfig) -> IntegerLayerPlan {
    let k = mac_scale(wq.scale(), wq.levels(), aq.scale(), aq.levels());
    let mut p = IntegerLayerPlan {
        name: "conv".into(),
        geometry: ConvGeometry::Conv1d { dilation: 1, padding: 0 },
        weight_shape: shape,
        weights,
        weight_quant: wq,
        input_quant: aq,
        output_quant: oq,
        k,
        thresholds: Default::default(),
        acc_bits: 0,
    };
    let b = p.s_bound();
    let (lo, hi) = oq.code_bounds();
    p.thresholds = compile_thresholds(|s| float_rule(k, &oq, s), -b, b, lo, hi);
    p.acc_bits = accumulator_bits(wq.levels(), aq.levels(), p.fan_in());
    p
}

fn q(bits: u32, lower: LowerBound, s: f32) -> QuantConfig {
    QuantConfig::new(bits, lower, s).unwrap()
}

#[test]
fn hand_traced_ternary_layer() {
    // weights [1, 0, −1]; input codes [3, 1, 2, 5] on a 4-bit unsigned grid
    let p = plan(vec![1, 0, -1], vec![1, 1, 3], q(2, LowerBound::Signed, 0.0), q(4, LowerBound::Unsigned, 0.0), q(4, LowerBound::Signed, 0.0));
    let mut ops = OpCount::default();
    let (shape, codes) = p.apply(&[1, 1, 4], &[3, 1, 2, 5], &mut ops).unwrap();
    assert_eq!(shape, vec![1, 1, 2]);
    // S = 3 − 2 = 1 and 1 − 5 = −4; one accumulator unit is 1/7 = one output LSB
    assert_eq!(codes, vec![1, -4]);
    assert_eq!(ops.muls, 0);
    assert_eq!((ops.adds, ops.subs), (2, 2));
}

#[test]
fn zero_inputs_and_zero_weights_give_constant_codes() {
    let oq = q(4, LowerBound::Unsigned, -0.5);
    let p = plan(vec![1, -1, 0, 1, 1, -1], vec![2, 1, 3], q(2, LowerBound::Signed, 0.2), q(4, LowerBound::Unsigned, 0.1), oq);
    let mut ops = OpCount::default();
    let (_, codes) = p.apply(&[1, 1, 9], &[0; 9], &mut ops).unwrap();
    assert!(codes.iter().all(|&c| c == p.rule(0)));
    let z = plan(vec![0; 6], vec![2, 1, 3], q(2, LowerBound::Signed, 0.2), q(4, LowerBound::Unsigned, 0.1), oq);
    let (_, codes) = z.apply(&[1, 1, 9], &[7, 1, 3, 0, 5, 6, 2, 2, 7], &mut ops).unwrap();
    // round(clip(0, b, 1)·n) = 0
    assert!(codes.iter().all(|&c| c == 0));
}

#[test]
fn unit_slope_thresholds_sit_at_half_integers() {
    // k·n_out/e^{s_out} = 1: code = round(S), so code m starts at S = m − 1/2, i.e. the integer m for m > 0
    let oq = q(4, LowerBound::Signed, 0.0);
    let p = plan(vec![1], vec![1, 1, 1], q(2, LowerBound::Signed, 0.0), q(4, LowerBound::Signed, 0.0), oq);
    assert_eq!(p.thresholds.thresholds, vec![-6, -5, -4, -3, -2, -1, 0, 1, 2, 3, 4, 5, 6, 7]);
    assert_eq!(p.thresholds.lo_code, -7);
}

fn wide_fq_net() -> Network {
    let cfg = KwsConfig {
        in_features: 6,
        embed: 20,
        channels: 45,
        classes: 5,
        dilations: vec![1, 2, 4],
        frames: 30,
        ..KwsConfig::default()
    };
    let net = build_kws_net(&cfg, 9).unwrap();
    let x = Tensor::new(vec![8, 6, 30], randn(&mut rng(3), 8 * 6 * 30)).unwrap();
    let q = attach_quantizers(&net, &x, 2, 4).unwrap();
    replace_bn_relu(&q).unwrap()
}

#[test]
fn fan_in_135_layer_scans_clean() {
    let model = compile_model(&wide_fq_net()).unwrap();
    let wide: Vec<&IntegerLayerPlan> = model.plans().map(|(_, p)| p).filter(|p| p.fan_in() == 135).collect();
    assert!(!wide.is_empty());
    for p in wide {
        assert!(p.is_ternary());
        assert_eq!(p.input_quant.levels(), 7);
        assert_eq!(p.s_bound(), 945);
        assert_eq!(p.acc_bits, 11);
        // every reachable S, against the quantizer definition
        let oq = p.output_quant;
        for s in -945..=945i64 {
            let y = (p.k * s as f64) as f32;
            let u = (y / oq.scale()).clamp(oq.lower.value(), 1.0) * oq.levels() as f32;
            let want = (u.abs().floor() + if u.abs().fract() >= 0.5 { 1.0 } else { 0.0 }).copysign(u) as i32;
            assert_eq!(p.thresholds.bin(s), want, "S = {s}");
        }
        assert!(p.scan().is_empty());
    }
}

#[test]
fn ternary_model_uses_no_multiplications() {
    let net = wide_fq_net();
    let model = compile_model(&net).unwrap();
    let x = Tensor::new(vec![4, 6, 30], randn(&mut rng(4), 4 * 6 * 30)).unwrap();
    let out = model.forward(&x).unwrap();
    assert_eq!(out.ops.muls, 0);
    assert!(out.ops.adds + out.ops.subs > 0);
}

#[test]
fn trained_model_equivalence_and_fault_injection() {
    let data = small_task(21);
    let q24 = quantized(&data, 2, 4, 5);
    let fq = replace_bn_relu(&q24).unwrap();
    let model = compile_model(&fq).unwrap();
    let x = data.batch(&data.indices(Split::Test)).0;
    let report = verify_equivalence(&model, &fq, &x).unwrap();
    assert!(report.ok(), "{report:?}");

    // shift every threshold of one conv layer
    let mut bad = model.clone();
    let (target, name) = bad
        .steps
        .iter()
        .enumerate()
        .filter_map(|(i, s)| match s {
            Step::Conv { plan, .. } => Some((i, plan.name.clone())),
            _ => None,
        })
        .nth(1)
        .unwrap();
    if let Step::Conv { plan, .. } = &mut bad.steps[target] {
        for t in plan.thresholds.thresholds.iter_mut() {
            *t += 3;
        }
    }
    let report = verify_equivalence(&bad, &fq, &x).unwrap();
    assert!(!report.ok());
    let flagged: Vec<&str> = report.layers.iter().filter(|l| l.isolated != 0).map(|l| l.node.as_str()).collect();
    assert_eq!(flagged.len(), 1, "{:?}", report.layers);
    let bad_scans: Vec<&String> = report.scan.iter().filter(|s| s.2 > 0).map(|s| &s.0).collect();
    assert_eq!(bad_scans.len(), 1);
    eprintln!("perturbed conv '{name}', flagged {flagged:?}");

    // archive round trip reproduces inference bit for bit
    let enc = encode_integer(&model, &Provenance::new("FQ24", 5, None)).unwrap();
    let (back, _) = decode_integer(&enc.manifest, &enc.blob).unwrap();
    let (a, b) = (model.forward(&x).unwrap(), back.forward(&x).unwrap());
    assert_eq!(a.logits.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.logits.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn reachable_accumulators_stay_within_bound(
        w in prop::collection::vec(-3i8..=3, 2),
        wbits in 2u32..=3,
        abits in 2u32..=3,
        signed in prop::bool::ANY,
    ) {
        let wq = q(wbits, LowerBound::Signed, 0.0);
        let n_w = wq.levels() as i8;
        let w: Vec<i8> = w.into_iter().map(|v| v.clamp(-n_w, n_w)).collect();
        let aq = q(abits, if signed { LowerBound::Signed } else { LowerBound::Unsigned }, 0.0);
        let p = plan(w, vec![1, 1, 2], wq, aq, q(4, LowerBound::Signed, 0.0));
        let (lo, hi) = aq.code_bounds();
        let mut max = 0i64;
        let mut ops = OpCount::default();
        for a in lo..=hi {
            for b in lo..=hi {
                let (_, acc) = p.accumulate(&[1, 1, 2], &[a, b], &mut ops).unwrap();
                max = max.max(acc[0].abs());
            }
        }
        prop_assert!(max <= p.s_bound());
        prop_assert!((1i64 << (p.acc_bits - 1)) > p.s_bound());
    }

    #[test]
    fn thresholds_reproduce_any_output_grid(s_w in -2.0f32..2.0, s_a in -2.0f32..2.0, s_o in -3.0f32..3.0, obits in 2u32..=6, signed in prop::bool::ANY) {
        let oq = q(obits, if signed { LowerBound::Signed } else { LowerBound::Unsigned }, s_o);
        let p = plan(vec![1, -1, 1, 0, 1, -1, 1, 1, 1], vec![1, 3, 3], q(2, LowerBound::Signed, s_w), q(4, LowerBound::Unsigned, s_a), oq);
        prop_assert!(p.scan().is_empty());
    }
}
