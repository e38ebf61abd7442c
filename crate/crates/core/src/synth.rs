//! Synthetic traces with controlled dispersion and drift regimes, and the
//! loop-based reference scorer used to cross-check the score engine.
//!
//! The generator only realizes two axes: how widely tokens spread around
//! their layer mean, and how far the layer means travel between layers.
//! Faithful presets have more of both. Randomness comes from ChaCha8 seeded
//! with the regime seed, recorded in each trace's metadata.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::ScoreError;
use crate::record::Label;
use crate::score::{DriftConfig, ImportanceMode};
use crate::trace::{AttnReduction, Element, Matrix, TokenLogitSummary, Trace, TraceMeta};

pub const RNG_ALGORITHM: &str = "chacha8";
/// Seed of the reference separation batch.
pub const DEFAULT_SEED: u64 = 20_251_019;
pub const SYNTH_VOCAB: usize = 32;
pub const SYNTH_TEMPERATURE: f32 = 0.7;
const SYNTH_HEADS: usize = 8;
const SYNTH_PROMPT_LEN: usize = 16;

/// Per-layer jitter relative to `token_spread`, for the most and least
/// attended tokens.
const JITTER_SALIENT: f64 = 0.15;
const JITTER_FILLER: f64 = 1.0;
/// Per-layer perturbation of the token salience before attention.
const SALIENCE_WOBBLE: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SynthLabel {
    Faithful,
    Hallucinated,
}

impl SynthLabel {
    pub fn trace_label(self) -> Label {
        match self {
            SynthLabel::Faithful => Label::Correct,
            SynthLabel::Hallucinated => Label::Hallucinated,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthRegime {
    pub label: SynthLabel,
    /// Standard deviation of the token cloud around its layer mean.
    pub token_spread: f64,
    /// Length of each step of the layer-mean random walk.
    pub layer_step: f64,
    /// Sharpness (>= 1) of the attention distributions.
    pub attn_concentration: f64,
    pub t_gen: usize,
    pub n_layers: usize,
    pub hidden_dim: usize,
    pub seed: u64,
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn unit_vector(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| normal(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Softmax of `beta * logits`, scaled to total `mass`.
fn attention(logits: &[f64], beta: f64, mass: f64) -> Vec<f32> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logits.iter().map(|l| (beta * (l - max)).exp()).collect();
    let total: f64 = w.iter().sum();
    w.iter().map(|x| (mass * x / total) as f32).collect()
}

/// Generates one trace. Deterministic in `regime` (including its seed).
///
/// Stored layer 0 is an embedding-like cloud around the walk's start; layers
/// `1..=L` each advance the walk by `layer_step`. Every token keeps a fixed
/// offset (scale `token_spread`) across layers plus a small per-layer jitter
/// that is larger for rarely attended tokens.
pub fn generate_trace(regime: &SynthRegime) -> Trace<f32> {
    let SynthRegime {
        t_gen,
        n_layers,
        hidden_dim: d,
        ..
    } = *regime;
    assert!(t_gen >= 1 && n_layers >= 1 && d >= 1, "degenerate regime");
    let mut rng = ChaCha8Rng::seed_from_u64(regime.seed);
    let spread = regime.token_spread;

    let salience: Vec<f64> = (0..t_gen).map(|_| normal(&mut rng)).collect();
    // rank quantile in [0, 1], 1 = most salient
    let quantile: Vec<f64> = salience
        .iter()
        .map(|s| {
            let below = salience.iter().filter(|o| *o < s).count();
            if t_gen == 1 {
                1.0
            } else {
                below as f64 / (t_gen - 1) as f64
            }
        })
        .collect();
    let jitter: Vec<f64> = quantile
        .iter()
        .map(|q| spread * (JITTER_FILLER + (JITTER_SALIENT - JITTER_FILLER) * q))
        .collect();
    let offsets: Vec<Vec<f64>> = (0..t_gen)
        .map(|_| (0..d).map(|_| spread * normal(&mut rng)).collect())
        .collect();

    let origin: Vec<f64> = (0..d).map(|_| 2.0 * normal(&mut rng)).collect();
    let mut walk = origin;
    let mut hidden = Vec::with_capacity(n_layers + 1);
    let mut final_row = Vec::with_capacity(n_layers);
    let mut col_mean = Vec::with_capacity(n_layers);

    for layer in 0..=n_layers {
        if layer > 0 {
            let step: Vec<f64> = unit_vector(&mut rng, d)
                .into_iter()
                .map(|u| u * regime.layer_step)
                .collect();
            walk.iter_mut().zip(&step).for_each(|(w, s)| *w += s);
        }
        let mut m = Matrix::<f32>::zeros(t_gen, d);
        for t in 0..t_gen {
            let row = m.row_mut(t);
            for (j, v) in row.iter_mut().enumerate() {
                let noise = if jitter[t] > 0.0 {
                    jitter[t] * normal(&mut rng)
                } else {
                    0.0
                };
                *v = (walk[j] + offsets[t][j] + noise) as f32;
            }
        }
        hidden.push(m);

        if layer > 0 {
            let wobble = |rng: &mut ChaCha8Rng| -> Vec<f64> {
                salience
                    .iter()
                    .map(|s| s + SALIENCE_WOBBLE * normal(rng))
                    .collect()
            };
            let row_logits = wobble(&mut rng);
            let row_mass = rng.random_range(0.3..0.9);
            final_row.push(attention(&row_logits, regime.attn_concentration, row_mass));
            let col_logits = wobble(&mut rng);
            let col_mass = rng.random_range(0.3..0.9);
            col_mean.push(attention(
                &col_logits,
                0.5 * regime.attn_concentration,
                col_mass,
            ));
        }
    }

    // Trace-level confidence, only weakly tied to the label.
    let margin = match regime.label {
        SynthLabel::Faithful => 3.7,
        SynthLabel::Hallucinated => 3.3,
    } + normal(&mut rng);
    let logit_summaries = (0..t_gen)
        .map(|_| {
            let mut logits: Vec<f64> = (0..SYNTH_VOCAB).map(|_| normal(&mut rng)).collect();
            logits[0] += margin + 0.5 * normal(&mut rng);
            TokenLogitSummary::from_logits(&logits, SYNTH_TEMPERATURE as f64)
        })
        .collect();

    let extra = serde_json::json!({
        "generator": "d2h-synth",
        "rng": RNG_ALGORITHM,
        "seed": regime.seed,
        "regime": regime,
    });
    Trace {
        meta: TraceMeta {
            n_layers,
            has_embedding_layer: true,
            t_gen,
            prompt_len: SYNTH_PROMPT_LEN,
            hidden_dim: d,
            n_heads: SYNTH_HEADS,
            vocab_size: SYNTH_VOCAB,
            temperature: SYNTH_TEMPERATURE,
            attn_reduction: AttnReduction::Both,
            trace_id: format!("synth-{:016x}", regime.seed),
            label: Some(regime.label.trace_label()),
        },
        hidden,
        attn_final_row: Some(final_row),
        attn_col_mean: Some(col_mean),
        logit_summaries,
        extra: Some(extra.to_string()),
    }
}

/// Spread and step for one class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassParams {
    pub token_spread: f64,
    pub layer_step: f64,
}

/// Shared settings for labeled batches.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthPreset {
    pub faithful: ClassParams,
    pub hallucinated: ClassParams,
    pub attn_concentration: f64,
    /// Inclusive range of generated-token counts.
    pub t_gen: (usize, usize),
    pub n_layers: usize,
    pub hidden_dim: usize,
    /// Std of the per-trace log-normal factor applied to spread and step.
    pub variation: f64,
}

impl Default for SynthPreset {
    fn default() -> Self {
        SynthPreset {
            faithful: ClassParams {
                token_spread: 1.0,
                layer_step: 1.0,
            },
            hallucinated: ClassParams {
                token_spread: 0.7,
                layer_step: 0.7,
            },
            attn_concentration: 3.0,
            t_gen: (20, 40),
            n_layers: 8,
            hidden_dim: 16,
            variation: 0.15,
        }
    }
}

impl SynthPreset {
    pub fn by_name(name: &str) -> Option<Self> {
        match name {
            "default" => Some(SynthPreset::default()),
            _ => None,
        }
    }

    /// Draws the regime for one trace of class `label`.
    pub fn regime(&self, label: SynthLabel, rng: &mut ChaCha8Rng) -> SynthRegime {
        let class = match label {
            SynthLabel::Faithful => self.faithful,
            SynthLabel::Hallucinated => self.hallucinated,
        };
        let mut factor = || (self.variation * normal(rng)).exp();
        let token_spread = class.token_spread * factor();
        let layer_step = class.layer_step * factor();
        SynthRegime {
            label,
            token_spread,
            layer_step,
            attn_concentration: self.attn_concentration,
            t_gen: rng.random_range(self.t_gen.0..=self.t_gen.1),
            n_layers: self.n_layers,
            hidden_dim: self.hidden_dim,
            seed: rng.random(),
        }
    }
}

/// `n_faithful + n_halluc` traces in a seed-determined interleaved order.
///
/// Trace ids are `synth-NNNNN` in output order.
pub fn generate_labeled_batch(
    n_faithful: usize,
    n_halluc: usize,
    preset: &SynthPreset,
    seed: u64,
) -> Vec<Trace<f32>> {
    assert!(
        n_faithful >= 1 && n_halluc >= 1,
        "both classes need at least one trace"
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels: Vec<SynthLabel> = std::iter::repeat_n(SynthLabel::Faithful, n_faithful)
        .chain(std::iter::repeat_n(SynthLabel::Hallucinated, n_halluc))
        .collect();
    labels.shuffle(&mut rng);
    labels
        .into_iter()
        .enumerate()
        .map(|(i, label)| {
            let mut t = generate_trace(&preset.regime(label, &mut rng));
            t.meta.trace_id = format!("synth-{i:05}");
            t
        })
        .collect()
}

/// Reference scorer: a direct loop transliteration of the dispersion and
/// drift definitions, sharing no code with [`crate::score`].
///
/// Key tokens are chosen by repeated arg-max scans (first index wins ties).
#[allow(clippy::needless_range_loop)]
pub fn oracle_scores<S: Element>(
    trace: &Trace<S>,
    cfg: &DriftConfig,
) -> Result<(f64, f64), ScoreError> {
    let n_layers = trace.meta.n_layers;
    let t_gen = trace.meta.t_gen;
    let d = trace.meta.hidden_dim;
    let first = if trace.meta.has_embedding_layer { 1 } else { 0 };

    let mut dispersion_total = 0.0;
    for l in 0..n_layers {
        let h = &trace.hidden[first + l];
        let mut center = vec![0.0; d];
        for t in 0..t_gen {
            for j in 0..d {
                center[j] += h.get(t, j).to_f64();
            }
        }
        for c in center.iter_mut() {
            *c /= t_gen as f64;
        }
        let mut dist_total = 0.0;
        for t in 0..t_gen {
            let mut sq = 0.0;
            for j in 0..d {
                let diff = h.get(t, j).to_f64() - center[j];
                sq += diff * diff;
            }
            dist_total += sq.sqrt();
        }
        dispersion_total += dist_total / t_gen as f64;
    }
    let dispersion = dispersion_total / n_layers as f64;

    let attn = match cfg.importance_mode {
        ImportanceMode::FinalRow => trace.attn_final_row.as_ref(),
        ImportanceMode::ColMean => trace.attn_col_mean.as_ref(),
    }
    .ok_or(ScoreError::DriftUnavailable(cfg.importance_mode))?;
    if n_layers < 2 {
        return Err(ScoreError::SingleLayer);
    }

    let mut wanted = (cfg.k_fraction * t_gen as f64 - 1e-9).ceil() as usize;
    if wanted < cfg.min_key_tokens {
        wanted = cfg.min_key_tokens;
    }
    if wanted > t_gen {
        wanted = t_gen;
    }

    let mut cores: Vec<Vec<f64>> = Vec::new();
    for l in 0..n_layers {
        let importance = &attn[l];
        let mut taken = vec![false; t_gen];
        for _ in 0..wanted {
            let mut best: Option<usize> = None;
            for t in 0..t_gen {
                if taken[t] {
                    continue;
                }
                match best {
                    None => best = Some(t),
                    Some(b) if importance[t].to_f64() > importance[b].to_f64() => best = Some(t),
                    _ => {}
                }
            }
            taken[best.unwrap()] = true;
        }
        let h = &trace.hidden[first + l];
        let mut core = vec![0.0; d];
        let mut count = 0usize;
        for t in 0..t_gen {
            if taken[t] {
                count += 1;
                for j in 0..d {
                    core[j] += h.get(t, j).to_f64();
                }
            }
        }
        for c in core.iter_mut() {
            *c /= count as f64;
        }
        cores.push(core);
    }
    let mut drift_total = 0.0;
    for l in 0..n_layers - 1 {
        let mut sq = 0.0;
        for j in 0..d {
            let diff = cores[l + 1][j] - cores[l][j];
            sq += diff * diff;
        }
        drift_total += sq.sqrt();
    }
    Ok((dispersion, drift_total / (n_layers - 1) as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::score::{dispersion_score, drift_score};
    use crate::trace::validate_trace;

    fn regime(spread: f64, step: f64) -> SynthRegime {
        SynthRegime {
            label: SynthLabel::Faithful,
            token_spread: spread,
            layer_step: step,
            attn_concentration: 3.0,
            t_gen: 12,
            n_layers: 5,
            hidden_dim: 6,
            seed: 42,
        }
    }

    #[test]
    fn generated_trace_is_valid_and_deterministic() {
        let a = generate_trace(&regime(1.0, 1.0));
        assert!(validate_trace(&a).is_empty(), "{:?}", validate_trace(&a));
        assert_eq!(a, generate_trace(&regime(1.0, 1.0)));
        let other = generate_trace(&SynthRegime {
            seed: 43,
            ..regime(1.0, 1.0)
        });
        assert_ne!(a.hidden, other.hidden);
    }

    #[test]
    fn collapsed_regimes() {
        let collapsed = generate_trace(&regime(0.0, 1.0));
        assert_eq!(dispersion_score(&collapsed), 0.0);
        let stagnant = generate_trace(&regime(0.0, 0.0));
        assert_eq!(
            drift_score(&stagnant, &DriftConfig::default()).unwrap(),
            0.0
        );
        assert_eq!(dispersion_score(&stagnant), 0.0);
    }

    #[test]
    fn extreme_concentration_keeps_attention_finite() {
        for c in [1.0, 10.0, 1e3, 1e6] {
            let t = generate_trace(&SynthRegime {
                attn_concentration: c,
                ..regime(1.0, 1.0)
            });
            for v in t
                .attn_final_row
                .iter()
                .chain(&t.attn_col_mean)
                .flatten()
                .flatten()
            {
                assert!(v.is_finite() && *v >= 0.0);
            }
        }
    }

    #[test]
    fn batch_contract() {
        let b = generate_labeled_batch(1, 1, &SynthPreset::default(), 7);
        assert_eq!(b.len(), 2);
        let labels: Vec<_> = b.iter().map(|t| t.meta.label.unwrap()).collect();
        assert!(labels.contains(&Label::Correct) && labels.contains(&Label::Hallucinated));
        assert_eq!(b, generate_labeled_batch(1, 1, &SynthPreset::default(), 7));
    }

    #[test]
    fn oracle_basic_cases() {
        let t = generate_trace(&regime(0.0, 0.0));
        assert_eq!(
            oracle_scores(&t, &DriftConfig::default()).unwrap(),
            (0.0, 0.0)
        );
        let mut single = generate_trace(&SynthRegime {
            n_layers: 1,
            ..regime(1.0, 1.0)
        });
        single.attn_col_mean = None;
        let col = DriftConfig {
            importance_mode: ImportanceMode::ColMean,
            ..Default::default()
        };
        assert!(matches!(
            oracle_scores(&single, &col),
            Err(ScoreError::DriftUnavailable(_))
        ));
        assert_eq!(
            oracle_scores(&single, &DriftConfig::default()),
            Err(ScoreError::SingleLayer)
        );
    }
}
