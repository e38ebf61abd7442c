//! Per-trace scoring fan-out with a deterministic, ordered merge.

use rayon::prelude::*;

use crate::baselines::{compute_baselines, BaselineConfig};
use crate::error::ScoreError;
use crate::record::{Detector, ScoreRecord};
use crate::score::{fuse_batch, raw_scores, DriftConfig, FusionConfig};
use crate::trace::{Element, Trace};

#[derive(Debug, Clone, PartialEq)]
pub struct ScoringConfig {
    pub drift: DriftConfig,
    pub fusion: FusionConfig,
    pub baselines: Vec<Detector>,
    pub baseline: BaselineConfig,
}

impl Default for ScoringConfig {
    fn default() -> Self {
        ScoringConfig {
            drift: DriftConfig::default(),
            fusion: FusionConfig::default(),
            baselines: Detector::BASELINES.to_vec(),
            baseline: BaselineConfig::default(),
        }
    }
}

/// Raw dispersion, drift and requested baselines for one trace. No `d2h`.
pub fn score_trace<S: Element>(
    trace: &Trace<S>,
    cfg: &ScoringConfig,
) -> Result<ScoreRecord, ScoreError> {
    let (dispersion, drift) =
        raw_scores(trace, &cfg.drift).map_err(|e| e.in_trace(&trace.meta.trace_id))?;
    let mut rec = ScoreRecord::new(trace.meta.trace_id.clone(), trace.meta.label);
    rec.set(Detector::Dispersion, dispersion);
    rec.set(Detector::Drift, drift);
    let baselines = compute_baselines(trace, &cfg.baselines, &cfg.baseline);
    for (det, v) in baselines.values {
        rec.set(det, v);
    }
    rec.omitted = baselines.omitted;
    Ok(rec)
}

/// Applies `f` to every item on `jobs` worker threads, keeping input order.
pub fn map_ordered<I, O, F>(items: &[I], jobs: usize, f: F) -> Vec<O>
where
    I: Sync,
    O: Send,
    F: Fn(&I) -> O + Sync + Send,
{
    if jobs <= 1 {
        return items.iter().map(f).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .expect("thread pool");
    pool.install(|| items.par_iter().map(f).collect())
}

/// Sorts records by trace id (stable) and adds the batch-relative `d2h`.
pub fn finalize_batch(
    records: &mut [ScoreRecord],
    fusion: &FusionConfig,
) -> Result<(), ScoreError> {
    records.sort_by(|a, b| a.trace_id.cmp(&b.trace_id));
    fuse_batch(records, fusion)
}

/// Scores a batch of traces; output is ordered by trace id and independent
/// of `jobs`.
pub fn score_batch<S: Element>(
    traces: &[Trace<S>],
    cfg: &ScoringConfig,
    jobs: usize,
) -> Result<Vec<ScoreRecord>, ScoreError> {
    cfg.drift.validate()?;
    cfg.fusion.validate()?;
    let mut records = map_ordered(traces, jobs, |t| score_trace(t, cfg))
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?;
    finalize_batch(&mut records, &cfg.fusion)?;
    Ok(records)
}
