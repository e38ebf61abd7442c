//! In-memory model of a generation trace and its structural invariants.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::record::Label;

/// Storage scalar for hidden states and attention.
///
/// Traces read from disk use `f32`; all scoring accumulates in `f64`
/// regardless of the storage type.
pub trait Element: Copy + PartialEq + fmt::Debug + Send + Sync + 'static {
    fn to_f64(self) -> f64;
    fn from_f64(v: f64) -> Self;
}

impl Element for f32 {
    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
}

impl Element for f64 {
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
}

/// Dense row-major matrix, one row per generated token.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<S> {
    rows: usize,
    cols: usize,
    data: Vec<S>,
}

impl<S: Element> Matrix<S> {
    /// Panics if `data.len() != rows * cols`.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<S>) -> Self {
        assert_eq!(
            data.len(),
            rows * cols,
            "matrix data length does not match shape"
        );
        Matrix { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<S>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Matrix {
            rows: rows.len(),
            cols,
            data,
        }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix::from_vec(rows, cols, vec![S::from_f64(0.0); rows * cols])
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[S] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [S] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[S]> + '_ {
        (0..self.rows).map(move |i| self.row(i))
    }

    pub fn get(&self, row: usize, col: usize) -> S {
        self.data[row * self.cols + col]
    }

    pub fn as_slice(&self) -> &[S] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn map<T: Element>(&self, f: impl Fn(S) -> T) -> Matrix<T> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// Which reduced attention vectors a trace carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttnReduction {
    None,
    FinalRow,
    ColMean,
    Both,
}

impl AttnReduction {
    pub fn from_parts(final_row: bool, col_mean: bool) -> Self {
        match (final_row, col_mean) {
            (false, false) => AttnReduction::None,
            (true, false) => AttnReduction::FinalRow,
            (false, true) => AttnReduction::ColMean,
            (true, true) => AttnReduction::Both,
        }
    }

    pub fn has_final_row(self) -> bool {
        matches!(self, AttnReduction::FinalRow | AttnReduction::Both)
    }

    pub fn has_col_mean(self) -> bool {
        matches!(self, AttnReduction::ColMean | AttnReduction::Both)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceMeta {
    /// Transformer layers, `L`.
    pub n_layers: usize,
    /// Whether stored layer 0 is the embedding output (`L + 1` stored layers).
    pub has_embedding_layer: bool,
    /// Generated tokens, `T`.
    pub t_gen: usize,
    /// Prompt tokens. Provenance only; prompt states are never stored.
    pub prompt_len: usize,
    pub hidden_dim: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    /// Temperature used for `max_prob_temp` and `energy` summaries.
    pub temperature: f32,
    pub attn_reduction: AttnReduction,
    pub trace_id: String,
    pub label: Option<Label>,
}

impl TraceMeta {
    /// Number of stored hidden-state matrices.
    pub fn stored_layers(&self) -> usize {
        self.n_layers + usize::from(self.has_embedding_layer)
    }
}

/// Per-token reduction of the full vocabulary logits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TokenLogitSummary {
    /// Max softmax probability at temperature 1.
    pub max_prob: f32,
    /// Max softmax probability at the trace temperature.
    pub max_prob_temp: f32,
    /// Entropy (nats) of the temperature-1 distribution.
    pub entropy: f32,
    /// `-T * logsumexp(z / T)` at the trace temperature.
    pub energy: f32,
}

impl TokenLogitSummary {
    /// Reduces one step's raw logits. Computed in `f64` with max-shifted
    /// log-sum-exp, then narrowed for storage.
    pub fn from_logits(logits: &[f64], temperature: f64) -> Self {
        assert!(!logits.is_empty(), "empty logit vector");
        assert!(temperature > 0.0, "temperature must be positive");
        let z_max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);

        let sum1: f64 = logits.iter().map(|&z| (z - z_max).exp()).sum();
        let lse1 = z_max + sum1.ln();
        let max_prob = 1.0 / sum1;
        let expected_logit: f64 = logits.iter().map(|&z| (z - lse1).exp() * z).sum();
        let entropy = (lse1 - expected_logit).max(0.0);

        let sum_t: f64 = logits
            .iter()
            .map(|&z| ((z - z_max) / temperature).exp())
            .sum();
        let max_prob_temp = 1.0 / sum_t;
        let energy = -z_max - temperature * sum_t.ln();

        TokenLogitSummary {
            max_prob: max_prob as f32,
            max_prob_temp: max_prob_temp as f32,
            entropy: entropy as f32,
            energy: energy as f32,
        }
    }
}

/// One generation's recorded internal state.
#[derive(Debug, Clone, PartialEq)]
pub struct Trace<S = f32> {
    pub meta: TraceMeta,
    /// `stored_layers()` matrices of shape `(t_gen, hidden_dim)`, ascending
    /// layer index; index 0 is the embedding output when present.
    pub hidden: Vec<Matrix<S>>,
    /// Head-averaged attention from the final generated token, one vector per
    /// transformer layer `1..=L`, restricted to generated-token columns.
    pub attn_final_row: Option<Vec<Vec<S>>>,
    /// Head-averaged attention averaged over all query rows, one vector per
    /// transformer layer, restricted to generated-token columns.
    pub attn_col_mean: Option<Vec<Vec<S>>>,
    pub logit_summaries: Vec<TokenLogitSummary>,
    /// Free-form JSON object carried in the metadata string.
    pub extra: Option<String>,
}

impl<S: Element> Trace<S> {
    /// Hidden states of transformer layer `l` in `1..=L`.
    pub fn layer(&self, l: usize) -> &Matrix<S> {
        assert!(
            (1..=self.meta.n_layers).contains(&l),
            "layer {l} out of range"
        );
        let offset = usize::from(self.meta.has_embedding_layer);
        &self.hidden[l - 1 + offset]
    }

    /// Transformer layers `1..=L`, embedding output excluded.
    pub fn transformer_layers(&self) -> &[Matrix<S>] {
        let offset = usize::from(self.meta.has_embedding_layer);
        &self.hidden[offset..]
    }

    pub fn embedding(&self) -> Option<&Matrix<S>> {
        self.meta.has_embedding_layer.then(|| &self.hidden[0])
    }

    /// Converts every stored hidden and attention value.
    pub fn map_values<T: Element>(&self, f: impl Fn(S) -> T + Copy) -> Trace<T> {
        let map_attn = |a: &Option<Vec<Vec<S>>>| {
            a.as_ref().map(|layers| {
                layers
                    .iter()
                    .map(|v| v.iter().map(|&x| f(x)).collect())
                    .collect()
            })
        };
        Trace {
            meta: self.meta.clone(),
            hidden: self.hidden.iter().map(|m| m.map(f)).collect(),
            attn_final_row: map_attn(&self.attn_final_row),
            attn_col_mean: map_attn(&self.attn_col_mean),
            logit_summaries: self.logit_summaries.clone(),
            extra: self.extra.clone(),
        }
    }

    pub fn to_f64(&self) -> Trace<f64> {
        self.map_values(Element::to_f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AttnKind {
    FinalRow,
    ColMean,
}

impl fmt::Display for AttnKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AttnKind::FinalRow => "final_row",
            AttnKind::ColMean => "col_mean",
        })
    }
}

/// One broken invariant found by [`validate_trace`].
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    Meta(String),
    LayerCount {
        expected: usize,
        found: usize,
    },
    HiddenShape {
        layer: usize,
        rows: usize,
        cols: usize,
    },
    NonFiniteHidden {
        layer: usize,
        token: usize,
        dim: usize,
    },
    AttentionPresence {
        kind: AttnKind,
        declared: bool,
    },
    AttentionLayerCount {
        kind: AttnKind,
        expected: usize,
        found: usize,
    },
    AttentionLength {
        kind: AttnKind,
        layer: usize,
        expected: usize,
        found: usize,
    },
    AttentionValue {
        kind: AttnKind,
        layer: usize,
        token: usize,
    },
    SummaryCount {
        expected: usize,
        found: usize,
    },
    SummaryBounds {
        token: usize,
        field: &'static str,
        value: f32,
    },
    Metadata(String),
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::Meta(msg) => write!(f, "invalid metadata field: {msg}"),
            Violation::LayerCount { expected, found } => {
                write!(f, "hidden layer count mismatch: expected {expected}, found {found}")
            }
            Violation::HiddenShape { layer, rows, cols } => {
                write!(f, "hidden shape mismatch at layer {layer}: found ({rows},{cols})")
            }
            Violation::NonFiniteHidden { layer, token, dim } => {
                write!(f, "non-finite hidden state at ({layer},{token},{dim})")
            }
            Violation::AttentionPresence { kind, declared } => {
                if *declared {
                    write!(f, "{kind} attention declared but missing")
                } else {
                    write!(f, "{kind} attention present but not declared")
                }
            }
            Violation::AttentionLayerCount { kind, expected, found } => write!(
                f,
                "{kind} attention layer count mismatch: expected {expected}, found {found}"
            ),
            Violation::AttentionLength { kind, layer, expected, found } => write!(
                f,
                "attention vector length mismatch ({kind}, layer {layer}: expected {expected}, found {found})"
            ),
            Violation::AttentionValue { kind, layer, token } => write!(
                f,
                "negative or non-finite attention ({kind}, layer {layer}, token {token})"
            ),
            Violation::SummaryCount { expected, found } => {
                write!(f, "logit summary count mismatch: expected {expected}, found {found}")
            }
            Violation::SummaryBounds { token, field, value } => {
                write!(f, "logit summary {field} out of bounds at token {token}: {value}")
            }
            Violation::Metadata(msg) => write!(f, "invalid metadata string: {msg}"),
        }
    }
}

const SUMMARY_TOL: f64 = 1e-6;

/// Checks every structural invariant and returns all violations found.
///
/// An empty result means the trace is valid.
pub fn validate_trace<S: Element>(trace: &Trace<S>) -> Vec<Violation> {
    let mut out = Vec::new();
    let meta = &trace.meta;

    for (name, value, min) in [
        ("n_layers", meta.n_layers, 1),
        ("t_gen", meta.t_gen, 1),
        ("hidden_dim", meta.hidden_dim, 1),
        ("n_heads", meta.n_heads, 1),
        ("vocab_size", meta.vocab_size, 2),
    ] {
        if value < min {
            out.push(Violation::Meta(format!(
                "{name} must be >= {min}, got {value}"
            )));
        }
    }
    if !(meta.temperature.is_finite() && meta.temperature > 0.0) {
        out.push(Violation::Meta(format!(
            "temperature must be positive, got {}",
            meta.temperature
        )));
    }
    if meta.trace_id.contains('\n') {
        out.push(Violation::Metadata("trace_id contains a newline".into()));
    }
    if let Some(extra) = &trace.extra {
        match serde_json::from_str::<serde_json::Value>(extra) {
            Ok(serde_json::Value::Object(_)) => {}
            Ok(_) => out.push(Violation::Metadata(
                "extra metadata is not a JSON object".into(),
            )),
            Err(e) => out.push(Violation::Metadata(format!(
                "extra metadata is not JSON: {e}"
            ))),
        }
    }

    let expected_layers = meta.stored_layers();
    if trace.hidden.len() != expected_layers {
        out.push(Violation::LayerCount {
            expected: expected_layers,
            found: trace.hidden.len(),
        });
    }
    for (layer, m) in trace.hidden.iter().enumerate() {
        if m.rows() != meta.t_gen || m.cols() != meta.hidden_dim {
            out.push(Violation::HiddenShape {
                layer,
                rows: m.rows(),
                cols: m.cols(),
            });
            continue;
        }
        for (token, row) in m.iter_rows().enumerate() {
            for (dim, v) in row.iter().enumerate() {
                if !v.to_f64().is_finite() {
                    out.push(Violation::NonFiniteHidden { layer, token, dim });
                }
            }
        }
    }

    for (kind, declared, vectors) in [
        (
            AttnKind::FinalRow,
            meta.attn_reduction.has_final_row(),
            &trace.attn_final_row,
        ),
        (
            AttnKind::ColMean,
            meta.attn_reduction.has_col_mean(),
            &trace.attn_col_mean,
        ),
    ] {
        match (declared, vectors) {
            (true, None) | (false, Some(_)) => {
                out.push(Violation::AttentionPresence { kind, declared });
            }
            (_, Some(layers)) => check_attention(kind, layers, meta, &mut out),
            (false, None) => {}
        }
    }

    if trace.logit_summaries.len() != meta.t_gen {
        out.push(Violation::SummaryCount {
            expected: meta.t_gen,
            found: trace.logit_summaries.len(),
        });
    }
    let floor = if meta.vocab_size > 0 {
        1.0 / meta.vocab_size as f64
    } else {
        0.0
    };
    let ln_vocab = (meta.vocab_size.max(1) as f64).ln();
    for (token, s) in trace.logit_summaries.iter().enumerate() {
        let in_prob_range = |p: f32| {
            p.is_finite() && (p as f64) >= floor - SUMMARY_TOL && (p as f64) <= 1.0 + SUMMARY_TOL
        };
        if !in_prob_range(s.max_prob) {
            out.push(Violation::SummaryBounds {
                token,
                field: "max_prob",
                value: s.max_prob,
            });
        }
        if !in_prob_range(s.max_prob_temp) {
            out.push(Violation::SummaryBounds {
                token,
                field: "max_prob_temp",
                value: s.max_prob_temp,
            });
        }
        let e = s.entropy as f64;
        if !(e.is_finite() && e >= -SUMMARY_TOL && e <= ln_vocab + SUMMARY_TOL) {
            out.push(Violation::SummaryBounds {
                token,
                field: "entropy",
                value: s.entropy,
            });
        }
        if !s.energy.is_finite() {
            out.push(Violation::SummaryBounds {
                token,
                field: "energy",
                value: s.energy,
            });
        }
    }
    out
}

fn check_attention<S: Element>(
    kind: AttnKind,
    layers: &[Vec<S>],
    meta: &TraceMeta,
    out: &mut Vec<Violation>,
) {
    if layers.len() != meta.n_layers {
        out.push(Violation::AttentionLayerCount {
            kind,
            expected: meta.n_layers,
            found: layers.len(),
        });
    }
    for (i, v) in layers.iter().enumerate() {
        let layer = i + 1;
        if v.len() != meta.t_gen {
            out.push(Violation::AttentionLength {
                kind,
                layer,
                expected: meta.t_gen,
                found: v.len(),
            });
        }
        for (token, a) in v.iter().enumerate() {
            let a = a.to_f64();
            if !(a.is_finite() && a >= 0.0) {
                out.push(Violation::AttentionValue { kind, layer, token });
            }
        }
    }
}
