//! Intra-layer dispersion, attention-guided inter-layer drift, and their
//! batch-normalized fusion into the D²HScore.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::ScoreError;
use crate::record::{Detector, ScoreRecord};
use crate::trace::{Element, Matrix, Trace};

/// Source of the per-token importance used to pick key tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImportanceMode {
    /// Attention received from the final generated token.
    #[default]
    FinalRow,
    /// Attention averaged over every query row.
    ColMean,
}

impl fmt::Display for ImportanceMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ImportanceMode::FinalRow => "final_row",
            ImportanceMode::ColMean => "col_mean",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DriftConfig {
    /// Fraction of generated tokens kept as key tokens, in `(0, 1]`.
    pub k_fraction: f64,
    pub importance_mode: ImportanceMode,
    pub min_key_tokens: usize,
}

impl Default for DriftConfig {
    fn default() -> Self {
        DriftConfig {
            k_fraction: 0.5,
            importance_mode: ImportanceMode::FinalRow,
            min_key_tokens: 1,
        }
    }
}

impl DriftConfig {
    pub fn with_k(k_fraction: f64) -> Self {
        DriftConfig {
            k_fraction,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<(), ScoreError> {
        if !(self.k_fraction > 0.0 && self.k_fraction <= 1.0) {
            return Err(ScoreError::InvalidConfig(format!(
                "k_fraction must be in (0, 1], got {}",
                self.k_fraction
            )));
        }
        if self.min_key_tokens == 0 {
            return Err(ScoreError::InvalidConfig(
                "min_key_tokens must be >= 1".into(),
            ));
        }
        Ok(())
    }

    /// Number of key tokens selected out of `tokens`.
    ///
    /// `max(min_key_tokens, ceil(k * T))`, capped at `T`. The product is
    /// nudged down by 1e-9 before rounding up so that e.g. `0.7 * 10`
    /// (which is `7.000000000000001` in binary floating point) gives 7.
    pub fn key_count(&self, tokens: usize) -> usize {
        let scaled = (self.k_fraction * tokens as f64 - 1e-9).ceil().max(0.0) as usize;
        scaled.max(self.min_key_tokens).min(tokens)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    #[default]
    MinMax,
    ZScore,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub w_dispersion: f64,
    pub w_drift: f64,
    pub normalization: Normalization,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            w_dispersion: 0.5,
            w_drift: 0.5,
            normalization: Normalization::MinMax,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<(), ScoreError> {
        let ok = |w: f64| w.is_finite() && w >= 0.0;
        if !ok(self.w_dispersion) || !ok(self.w_drift) || self.w_dispersion + self.w_drift <= 0.0 {
            return Err(ScoreError::InvalidConfig(format!(
                "fusion weights must be >= 0 with a positive sum, got ({}, {})",
                self.w_dispersion, self.w_drift
            )));
        }
        Ok(())
    }
}

/// Per-dimension mean of the token rows.
pub fn layer_center<S: Element>(layer: &Matrix<S>) -> Vec<f64> {
    let mut acc = vec![0.0f64; layer.cols()];
    for row in layer.iter_rows() {
        for (a, v) in acc.iter_mut().zip(row) {
            *a += v.to_f64();
        }
    }
    let n = layer.rows() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    acc
}

/// Mean Euclidean distance of the token rows to their center.
pub fn layer_dispersion<S: Element>(layer: &Matrix<S>) -> f64 {
    let center = layer_center(layer);
    let total: f64 = layer.iter_rows().map(|row| distance(row, &center)).sum();
    total / layer.rows() as f64
}

fn distance<S: Element>(row: &[S], point: &[f64]) -> f64 {
    row.iter()
        .zip(point)
        .map(|(v, c)| {
            let d = v.to_f64() - c;
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Mean layer dispersion over transformer layers `1..=L`; the embedding
/// layer is not included.
pub fn dispersion_score<S: Element>(trace: &Trace<S>) -> f64 {
    let layers = trace.transformer_layers();
    layers.iter().map(layer_dispersion).sum::<f64>() / layers.len() as f64
}

/// Indices of the `cfg.key_count(T)` most important tokens, ascending.
///
/// Ties go to the lower token index.
pub fn select_key_tokens<S: Element>(importance: &[S], cfg: &DriftConfig) -> Vec<usize> {
    let count = cfg.key_count(importance.len());
    let mut order: Vec<usize> = (0..importance.len()).collect();
    order.sort_by(|&a, &b| {
        importance[b]
            .to_f64()
            .total_cmp(&importance[a].to_f64())
            .then(a.cmp(&b))
    });
    order.truncate(count);
    order.sort_unstable();
    order
}

/// Mean of the selected token rows.
pub fn layer_core_representation<S: Element>(
    layer: &Matrix<S>,
    keys: &[usize],
) -> Result<Vec<f64>, ScoreError> {
    if keys.is_empty() {
        return Err(ScoreError::EmptyKeySet);
    }
    let mut acc = vec![0.0f64; layer.cols()];
    for &k in keys {
        if k >= layer.rows() {
            return Err(ScoreError::KeyOutOfRange {
                index: k,
                tokens: layer.rows(),
            });
        }
        for (a, v) in acc.iter_mut().zip(layer.row(k)) {
            *a += v.to_f64();
        }
    }
    let n = keys.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    Ok(acc)
}

/// Importance vectors for layers `1..=L` under `mode`, if the trace has them.
pub fn importance_vectors<S: Element>(trace: &Trace<S>, mode: ImportanceMode) -> Option<&[Vec<S>]> {
    match mode {
        ImportanceMode::FinalRow => trace.attn_final_row.as_deref(),
        ImportanceMode::ColMean => trace.attn_col_mean.as_deref(),
    }
}

/// Mean L2 step between consecutive layers' key-token representations.
///
/// Each layer picks its own key set from its own attention vector.
pub fn drift_score<S: Element>(trace: &Trace<S>, cfg: &DriftConfig) -> Result<f64, ScoreError> {
    cfg.validate()?;
    let importance = importance_vectors(trace, cfg.importance_mode)
        .ok_or(ScoreError::DriftUnavailable(cfg.importance_mode))?;
    let n_layers = trace.meta.n_layers;
    if n_layers < 2 {
        return Err(ScoreError::SingleLayer);
    }
    let cores = trace
        .transformer_layers()
        .iter()
        .zip(importance)
        .map(|(layer, imp)| layer_core_representation(layer, &select_key_tokens(imp, cfg)))
        .collect::<Result<Vec<_>, _>>()?;
    let total: f64 = cores.windows(2).map(|w| euclidean(&w[1], &w[0])).sum();
    Ok(total / (n_layers - 1) as f64)
}

/// Rescales a batch of values.
///
/// `MinMax` maps to `[0, 1]` (all 0.5 when the batch is constant); `ZScore`
/// subtracts the mean and divides by the population standard deviation (all
/// 0.0 when it is zero).
pub fn normalize_scores(values: &[f64], mode: Normalization) -> Vec<f64> {
    if values.is_empty() {
        return Vec::new();
    }
    match mode {
        Normalization::MinMax => {
            let min = values.iter().copied().fold(f64::INFINITY, f64::min);
            let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if max == min {
                return vec![0.5; values.len()];
            }
            values.iter().map(|v| (v - min) / (max - min)).collect()
        }
        Normalization::ZScore => {
            let n = values.len() as f64;
            let mean = values.iter().sum::<f64>() / n;
            let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let std = var.sqrt();
            if std == 0.0 {
                return vec![0.0; values.len()];
            }
            values.iter().map(|v| (v - mean) / std).collect()
        }
    }
}

/// Raw dispersion and drift for one trace.
pub fn raw_scores<S: Element>(
    trace: &Trace<S>,
    cfg: &DriftConfig,
) -> Result<(f64, f64), ScoreError> {
    Ok((dispersion_score(trace), drift_score(trace, cfg)?))
}

/// Sets the batch-relative `d2h` entry on every record.
///
/// Every record must already carry raw dispersion and drift.
pub fn fuse_batch(records: &mut [ScoreRecord], fusion: &FusionConfig) -> Result<(), ScoreError> {
    fusion.validate()?;
    if records.is_empty() {
        return Err(ScoreError::EmptyBatch);
    }
    let column = |det: Detector| -> Result<Vec<f64>, ScoreError> {
        records
            .iter()
            .map(|r| {
                r.raw(det).ok_or_else(|| {
                    ScoreError::InvalidConfig(format!("record {} lacks {det}", r.trace_id))
                })
            })
            .collect()
    };
    let dispersion = normalize_scores(&column(Detector::Dispersion)?, fusion.normalization);
    let drift = normalize_scores(&column(Detector::Drift)?, fusion.normalization);
    for ((rec, d), r) in records.iter_mut().zip(dispersion).zip(drift) {
        rec.set(Detector::D2h, fusion.w_dispersion * d + fusion.w_drift * r);
    }
    Ok(())
}

/// Dispersion, drift and fused D²HScore for a batch of traces.
pub fn d2h_scores<S: Element>(
    traces: &[Trace<S>],
    drift_cfg: &DriftConfig,
    fusion_cfg: &FusionConfig,
) -> Result<Vec<ScoreRecord>, ScoreError> {
    if traces.is_empty() {
        return Err(ScoreError::EmptyBatch);
    }
    let mut records = traces
        .iter()
        .map(|t| {
            let (dispersion, drift) =
                raw_scores(t, drift_cfg).map_err(|e| e.in_trace(&t.meta.trace_id))?;
            let mut rec = ScoreRecord::new(t.meta.trace_id.clone(), t.meta.label);
            rec.set(Detector::Dispersion, dispersion);
            rec.set(Detector::Drift, drift);
            Ok(rec)
        })
        .collect::<Result<Vec<_>, ScoreError>>()?;
    fuse_batch(&mut records, fusion_cfg)?;
    Ok(records)
}
