//! Logit-based and chain-of-embedding baseline scores.
//!
//! The logit baselines read only the per-token [`TokenLogitSummary`] values.
//! The CoE scores follow the trajectory of per-layer mean output-token
//! representations from the embedding output `h_0` to the last layer `h_L`.
//!
//! [`TokenLogitSummary`]: crate::trace::TokenLogitSummary

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::ScoreError;
use crate::record::Detector;
use crate::score::layer_center;
use crate::trace::{Element, Trace};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaselineConfig {
    /// Temperature the trace's `max_prob_temp` summaries must have been taken at.
    pub temperature: f64,
    /// Denominators and norms below this make the affected CoE term 0.
    pub coe_epsilon: f64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig {
            temperature: 0.7,
            coe_epsilon: 1e-12,
        }
    }
}

fn mean_of<S>(trace: &Trace<S>, f: impl Fn(&crate::trace::TokenLogitSummary) -> f64) -> f64 {
    let s = &trace.logit_summaries;
    s.iter().map(f).sum::<f64>() / s.len() as f64
}

/// Mean max softmax probability.
pub fn maxprob<S>(trace: &Trace<S>) -> f64 {
    mean_of(trace, |s| s.max_prob as f64)
}

/// Mean of `-ln(max_prob)`. No exponentiation is applied.
pub fn ppl_score<S>(trace: &Trace<S>) -> Result<f64, ScoreError> {
    if let Some(i) = trace.logit_summaries.iter().position(|s| s.max_prob <= 0.0) {
        return Err(ScoreError::ZeroMaxProb(i));
    }
    Ok(mean_of(trace, |s| -(s.max_prob as f64).ln()))
}

pub fn entropy_score<S>(trace: &Trace<S>) -> f64 {
    mean_of(trace, |s| s.entropy as f64)
}

/// Mean temperature-scaled max probability.
pub fn temp_scaling_score<S>(trace: &Trace<S>, cfg: &BaselineConfig) -> Result<f64, ScoreError> {
    if trace.meta.temperature != cfg.temperature as f32 {
        return Err(ScoreError::TemperatureMismatch {
            trace: trace.meta.temperature,
            config: cfg.temperature,
        });
    }
    Ok(mean_of(trace, |s| s.max_prob_temp as f64))
}

pub fn energy_score<S>(trace: &Trace<S>) -> f64 {
    mean_of(trace, |s| s.energy as f64)
}

/// Mean output-token representation of every stored layer, `h_0..=h_L`.
pub fn coe_layer_means<S: Element>(trace: &Trace<S>) -> Result<Vec<Vec<f64>>, ScoreError> {
    if !trace.meta.has_embedding_layer {
        return Err(ScoreError::MissingEmbeddingLayer);
    }
    Ok(trace.hidden.iter().map(layer_center).collect())
}

fn norm(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Step length `||b - a||`.
fn magnitude(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (y - x) * (y - x))
        .sum::<f64>()
        .sqrt()
}

/// Angle between `a` and `b` in `[0, pi]`, `None` when either is (near) zero.
///
/// Equal to `acos(clamp(cos_sim, -1, 1))`, evaluated as
/// `2 atan2(|u - v|, |u + v|)` on the unit vectors so that parallel inputs
/// give exactly 0 instead of the ~1e-8 that `acos` returns near 1.
fn angle(a: &[f64], b: &[f64], eps: f64) -> Option<f64> {
    let (na, nb) = (norm(a), norm(b));
    if na < eps || nb < eps {
        return None;
    }
    let (mut diff, mut sum) = (0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (u, v) = (x / na, y / nb);
        diff += (u - v) * (u - v);
        sum += (u + v) * (u + v);
    }
    Some(2.0 * diff.sqrt().atan2(sum.sqrt()))
}

/// CoE-R from precomputed layer means.
pub fn coe_r_from_means(means: &[Vec<f64>], eps: f64) -> f64 {
    let steps = means.len() - 1;
    let (first, last) = (&means[0], &means[steps]);
    let m_total = magnitude(first, last);
    let a_total = angle(first, last, eps).filter(|&a| a >= eps);

    let sum: f64 = means
        .windows(2)
        .map(|w| {
            let m_term = if m_total < eps {
                0.0
            } else {
                magnitude(&w[0], &w[1]) / m_total
            };
            let a_term = match (angle(&w[0], &w[1], eps), a_total) {
                (Some(a), Some(total)) => a / total,
                _ => 0.0,
            };
            m_term - a_term
        })
        .sum();
    sum / steps as f64
}

/// CoE-C from precomputed layer means. Steps with an undefined angle
/// contribute along the real axis.
pub fn coe_c_from_means(means: &[Vec<f64>], eps: f64) -> f64 {
    let steps = means.len() - 1;
    let (re, im) = means.windows(2).fold((0.0, 0.0), |(re, im), w| {
        let m = magnitude(&w[0], &w[1]);
        let a = angle(&w[0], &w[1], eps).unwrap_or(0.0);
        (re + m * a.cos(), im + m * a.sin())
    });
    (re / steps as f64).hypot(im / steps as f64)
}

pub fn coe_r<S: Element>(trace: &Trace<S>, cfg: &BaselineConfig) -> Result<f64, ScoreError> {
    Ok(coe_r_from_means(&coe_layer_means(trace)?, cfg.coe_epsilon))
}

pub fn coe_c<S: Element>(trace: &Trace<S>, cfg: &BaselineConfig) -> Result<f64, ScoreError> {
    Ok(coe_c_from_means(&coe_layer_means(trace)?, cfg.coe_epsilon))
}

/// Computes one baseline detector. Non-baseline detectors are rejected.
pub fn baseline<S: Element>(
    detector: Detector,
    trace: &Trace<S>,
    cfg: &BaselineConfig,
) -> Result<f64, ScoreError> {
    match detector {
        Detector::MaxProb => Ok(maxprob(trace)),
        Detector::Ppl => ppl_score(trace),
        Detector::Entropy => Ok(entropy_score(trace)),
        Detector::TempScaling => temp_scaling_score(trace, cfg),
        Detector::Energy => Ok(energy_score(trace)),
        Detector::CoeR => coe_r(trace, cfg),
        Detector::CoeC => coe_c(trace, cfg),
        other => Err(ScoreError::InvalidConfig(format!(
            "{other} is not a baseline"
        ))),
    }
}

/// Baseline values for one trace plus the detectors that could not be computed.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BaselineScores {
    pub values: BTreeMap<Detector, f64>,
    pub omitted: Vec<(Detector, String)>,
}

/// Computes the requested baselines, recording failures as omissions.
pub fn compute_baselines<S: Element>(
    trace: &Trace<S>,
    detectors: &[Detector],
    cfg: &BaselineConfig,
) -> BaselineScores {
    let mut out = BaselineScores::default();
    let means = if detectors
        .iter()
        .any(|d| matches!(d, Detector::CoeR | Detector::CoeC))
    {
        Some(coe_layer_means(trace))
    } else {
        None
    };
    for &det in detectors {
        let value = match (det, &means) {
            (Detector::CoeR, Some(m)) => m
                .as_ref()
                .map(|m| coe_r_from_means(m, cfg.coe_epsilon))
                .map_err(Clone::clone),
            (Detector::CoeC, Some(m)) => m
                .as_ref()
                .map(|m| coe_c_from_means(m, cfg.coe_epsilon))
                .map_err(Clone::clone),
            _ => baseline(det, trace, cfg),
        };
        match value {
            Ok(v) => {
                out.values.insert(det, v);
            }
            Err(e) => out.omitted.push((det, e.to_string())),
        }
    }
    out
}

/// All seven baselines.
pub fn all_baselines<S: Element>(trace: &Trace<S>, cfg: &BaselineConfig) -> BaselineScores {
    compute_baselines(trace, &Detector::BASELINES, cfg)
}
