mod common;

use common::{coe_formula, random_trace, rel_close, ORACLE_SHAPE};
use d2h_core::baselines::{
    all_baselines, coe_c_from_means, coe_layer_means, coe_r_from_means, BaselineConfig,
};
use d2h_core::trace::TokenLogitSummary;
use d2h_core::Detector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn coe_matches_arccos_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut checked = 0;
    while checked < 200 {
        let trace = random_trace(&mut rng, &ORACLE_SHAPE, false);
        if !trace.meta.has_embedding_layer {
            continue;
        }
        let means = coe_layer_means(&trace).unwrap();
        let (r, c) = coe_formula(&means, 1e-12);
        assert!((coe_r_from_means(&means, 1e-12) - r).abs() < 1e-6, "coe_r");
        assert!(rel_close(coe_c_from_means(&means, 1e-12), c, 1e-9), "coe_c");
        checked += 1;
    }
}

#[test]
fn coe_c_is_bounded_by_mean_step() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    for _ in 0..100 {
        let trace = random_trace(&mut rng, &ORACLE_SHAPE, false);
        let Ok(means) = coe_layer_means(&trace) else {
            continue;
        };
        let steps: f64 = means
            .windows(2)
            .map(|w| {
                w[0].iter()
                    .zip(&w[1])
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt()
            })
            .sum::<f64>()
            / (means.len() - 1) as f64;
        assert!(coe_c_from_means(&means, 1e-12) <= steps + 1e-12);
    }
}

#[test]
fn logit_baselines_follow_summaries() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let mut trace = random_trace(&mut rng, &ORACLE_SHAPE, false);
    let s = TokenLogitSummary::from_logits(&[0.0, 1.0], 0.7);
    trace.logit_summaries = vec![s; trace.meta.t_gen];
    let b = all_baselines(&trace, &BaselineConfig::default());
    let p = 1.0 / (1.0 + (-1.0f64).exp());
    let pt = 1.0 / (1.0 + (-1.0f64 / 0.7).exp());
    assert!((b.values[&Detector::MaxProb] - p).abs() < 1e-6);
    assert!((b.values[&Detector::Ppl] + p.ln()).abs() < 1e-6);
    assert!((b.values[&Detector::TempScaling] - pt).abs() < 1e-6);
    let energy = -0.7 * ((0.0f64 / 0.7).exp() + (1.0f64 / 0.7).exp()).ln();
    assert!((b.values[&Detector::Energy] - energy).abs() < 1e-6);
    let entropy = -(p * p.ln() + (1.0 - p) * (1.0 - p).ln());
    assert!((b.values[&Detector::Entropy] - entropy).abs() < 1e-6);
}

#[test]
fn temperature_mismatch_is_an_omission() {
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    let trace = random_trace(&mut rng, &ORACLE_SHAPE, false);
    let cfg = BaselineConfig {
        temperature: 1.0,
        ..Default::default()
    };
    let b = all_baselines(&trace, &cfg);
    assert!(!b.values.contains_key(&Detector::TempScaling));
    assert!(b.omitted.iter().any(|(d, _)| *d == Detector::TempScaling));
}
