//! Independent reference implementations and random-input builders shared by
//! the integration and acceptance tests. Nothing here calls into the code
//! paths it is used to check.

#![allow(dead_code, clippy::needless_range_loop)]

use d2h_core::trace::{AttnReduction, Matrix, TokenLogitSummary, Trace, TraceMeta};
use d2h_core::Label;
use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(f64::MIN_POSITIVE)
}

pub fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller keeps this independent of rand_distr.
    let u1: f64 = 1.0 - rng.random::<f64>();
    let u2: f64 = rng.random::<f64>();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

pub struct Shape {
    pub max_t: usize,
    pub min_layers: usize,
    pub max_layers: usize,
    pub max_d: usize,
}

pub const ORACLE_SHAPE: Shape = Shape {
    max_t: 32,
    min_layers: 2,
    max_layers: 8,
    max_d: 16,
};

/// Importance vector; with `ties` some entries come from a 3-value grid.
pub fn random_importance(rng: &mut ChaCha8Rng, t: usize, ties: bool) -> Vec<f64> {
    (0..t)
        .map(|_| {
            if ties && rng.random_bool(0.4) {
                [0.05, 0.1, 0.2][rng.random_range(0..3)]
            } else {
                rng.random::<f64>() * 0.3
            }
        })
        .collect()
}

/// A valid random `f64` trace with both attention reductions.
pub fn random_trace(rng: &mut ChaCha8Rng, shape: &Shape, ties: bool) -> Trace<f64> {
    let t_gen = rng.random_range(1..=shape.max_t);
    let n_layers = rng.random_range(shape.min_layers..=shape.max_layers);
    let d = rng.random_range(1..=shape.max_d);
    let embedding = rng.random_bool(0.5);
    let scale = 0.1 + 3.0 * rng.random::<f64>();
    let hidden = (0..n_layers + usize::from(embedding))
        .map(|_| {
            let shift: Vec<f64> = (0..d).map(|_| 2.0 * gauss(rng)).collect();
            let data = (0..t_gen * d)
                .map(|i| shift[i % d] + scale * gauss(rng))
                .collect();
            Matrix::from_vec(t_gen, d, data)
        })
        .collect();
    let final_row = (0..n_layers)
        .map(|_| random_importance(rng, t_gen, ties))
        .collect();
    let col_mean = (0..n_layers)
        .map(|_| random_importance(rng, t_gen, ties))
        .collect();
    let summaries = (0..t_gen)
        .map(|_| {
            let logits: Vec<f64> = (0..8).map(|_| 2.0 * gauss(rng)).collect();
            TokenLogitSummary::from_logits(&logits, 0.7)
        })
        .collect();
    Trace {
        meta: TraceMeta {
            n_layers,
            has_embedding_layer: embedding,
            t_gen,
            prompt_len: rng.random_range(0..50),
            hidden_dim: d,
            n_heads: rng.random_range(1..=8),
            vocab_size: 8,
            temperature: 0.7,
            attn_reduction: AttnReduction::Both,
            trace_id: format!("rand-{}", rng.random::<u32>()),
            label: [
                None,
                Some(Label::Correct),
                Some(Label::Hallucinated),
                Some(Label::Unknown),
            ][rng.random_range(0..4)],
        },
        hidden,
        attn_final_row: Some(final_row),
        attn_col_mean: Some(col_mean),
        logit_summaries: summaries,
        extra: None,
    }
}

/// A valid random `f32` trace with randomized flags, for format tests.
pub fn random_storage_trace(rng: &mut ChaCha8Rng) -> Trace<f32> {
    let mut t = random_trace(
        rng,
        &Shape {
            max_t: 6,
            min_layers: 1,
            max_layers: 4,
            max_d: 5,
        },
        true,
    )
    .map_values(|v| v as f32);
    let final_row = rng.random_bool(0.5);
    let col_mean = rng.random_bool(0.5);
    t.meta.attn_reduction = AttnReduction::from_parts(final_row, col_mean);
    if !final_row {
        t.attn_final_row = None;
    }
    if !col_mean {
        t.attn_col_mean = None;
    }
    t.meta.temperature = [0.7f32, 1.0, 0.25][rng.random_range(0..3)];
    if rng.random_bool(0.3) {
        t.extra = Some(format!(r#"{{"k":{},"s":"ü\n"}}"#, rng.random::<u16>()));
    }
    t
}

// ---------------------------------------------------------------------------
// Metric oracles
// ---------------------------------------------------------------------------

pub fn split(entries: &[(f64, bool)]) -> (Vec<f64>, Vec<f64>) {
    let pos = entries.iter().filter(|e| e.1).map(|e| e.0).collect();
    let neg = entries.iter().filter(|e| !e.1).map(|e| e.0).collect();
    (pos, neg)
}

/// O(|P|·|N|) pairwise AUROC with half credit for ties.
pub fn auroc_pairwise(entries: &[(f64, bool)]) -> f64 {
    let (pos, neg) = split(entries);
    let mut total = 0.0;
    for p in &pos {
        for n in &neg {
            if p > n {
                total += 1.0;
            } else if p == n {
                total += 0.5;
            }
        }
    }
    total / (pos.len() * neg.len()) as f64
}

fn distinct_desc(entries: &[(f64, bool)]) -> Vec<f64> {
    let mut taus: Vec<f64> = entries.iter().map(|e| e.0).collect();
    taus.sort_by(|a, b| b.partial_cmp(a).unwrap());
    taus.dedup();
    taus
}

fn counts_at(entries: &[(f64, bool)], tau: f64) -> (u64, u64) {
    let tp = entries.iter().filter(|e| e.1 && e.0 >= tau).count() as u64;
    let fp = entries.iter().filter(|e| !e.1 && e.0 >= tau).count() as u64;
    (tp, fp)
}

/// Exhaustive threshold sweep for FPR@95.
pub fn fpr95_sweep(entries: &[(f64, bool)]) -> f64 {
    let (pos, neg) = split(entries);
    let p = pos.len() as i64;
    let mut best: Option<(i64, u64, u64)> = None;
    for tau in distinct_desc(entries) {
        let (tp, fp) = counts_at(entries, tau);
        let dist = (20 * tp as i64 - 19 * p).abs();
        let take = match best {
            None => true,
            Some((bd, btp, bfp)) => {
                dist < bd || (dist == bd && (tp > btp || (tp == btp && fp < bfp)))
            }
        };
        if take {
            best = Some((dist, tp, fp));
        }
    }
    best.unwrap().2 as f64 / neg.len() as f64
}

/// Average precision by brute-force counting at every distinct threshold.
pub fn aupr_steps(entries: &[(f64, bool)]) -> f64 {
    let p = entries.iter().filter(|e| e.1).count();
    let mut ap = 0.0;
    let mut prev_tp = 0u64;
    for tau in distinct_desc(entries) {
        let (tp, fp) = counts_at(entries, tau);
        ap += (tp - prev_tp) as f64 / p as f64 * (tp as f64 / (tp + fp) as f64);
        prev_tp = tp;
    }
    ap
}

/// Random labeled set with both classes, sometimes heavy on ties.
pub fn random_labeled(rng: &mut ChaCha8Rng, max_n: usize) -> Vec<(f64, bool)> {
    let n = rng.random_range(2..=max_n);
    let grid = rng.random_bool(0.5);
    let prevalence = 0.1 + 0.8 * rng.random::<f64>();
    let mut entries: Vec<(f64, bool)> = (0..n)
        .map(|_| {
            let positive = rng.random_bool(prevalence);
            let shift = if positive { 0.5 } else { 0.0 };
            let s = if grid {
                rng.random_range(0..10) as f64 / 4.0 + shift
            } else {
                gauss(rng) + shift
            };
            (s, positive)
        })
        .collect();
    entries[0].1 = true;
    entries[1].1 = false;
    entries
}

// ---------------------------------------------------------------------------
// Geometry oracles
// ---------------------------------------------------------------------------

/// Random orthogonal matrix from the QR factorization of a Gaussian matrix.
pub fn random_orthogonal(rng: &mut ChaCha8Rng, d: usize) -> DMatrix<f64> {
    let g = DMatrix::from_fn(d, d, |_, _| gauss(rng));
    g.qr().q()
}

/// CoE-R / CoE-C written straight from the formulas with arccos angles.
pub fn coe_formula(means: &[Vec<f64>], eps: f64) -> (f64, f64) {
    let m = |a: &[f64], b: &[f64]| -> f64 {
        let mut s = 0.0;
        for i in 0..a.len() {
            s += (b[i] - a[i]) * (b[i] - a[i]);
        }
        s.sqrt()
    };
    let a = |x: &[f64], y: &[f64]| -> Option<f64> {
        let (mut dot, mut nx, mut ny) = (0.0, 0.0, 0.0);
        for i in 0..x.len() {
            dot += x[i] * y[i];
            nx += x[i] * x[i];
            ny += y[i] * y[i];
        }
        let (nx, ny) = (nx.sqrt(), ny.sqrt());
        if nx < eps || ny < eps {
            None
        } else {
            Some((dot / (nx * ny)).clamp(-1.0, 1.0).acos())
        }
    };
    let l = means.len() - 1;
    let m_total = m(&means[0], &means[l]);
    let a_total = a(&means[0], &means[l]);
    let (mut r, mut re, mut im) = (0.0, 0.0, 0.0);
    for i in 0..l {
        let mi = m(&means[i], &means[i + 1]);
        let ai = a(&means[i], &means[i + 1]);
        if m_total >= eps {
            r += mi / m_total;
        }
        if let (Some(ai), Some(at)) = (ai, a_total) {
            if at >= eps {
                r -= ai / at;
            }
        }
        let ang = ai.unwrap_or(0.0);
        re += mi * ang.cos();
        im += mi * ang.sin();
    }
    let lf = l as f64;
    (r / lf, ((re / lf).powi(2) + (im / lf).powi(2)).sqrt())
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations, descending.
pub fn jacobi_eigenvalues(mut a: Vec<Vec<f64>>) -> Vec<f64> {
    let n = a.len();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i][j] * a[i][j])
            .sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut ev: Vec<f64> = (0..n).map(|i| a[i][i]).collect();
    ev.sort_by(|x, y| y.partial_cmp(x).unwrap());
    ev
}

/// Sample covariance (denominator n - 1) by explicit loops.
pub fn sample_covariance(rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = rows.len();
    let d = rows[0].len();
    let mut mean = vec![0.0; d];
    for r in rows {
        for j in 0..d {
            mean[j] += r[j];
        }
    }
    for m in mean.iter_mut() {
        *m /= n as f64;
    }
    let mut cov = vec![vec![0.0; d]; d];
    for r in rows {
        for i in 0..d {
            for j in 0..d {
                cov[i][j] += (r[i] - mean[i]) * (r[j] - mean[j]);
            }
        }
    }
    for row in cov.iter_mut() {
        for v in row.iter_mut() {
            *v /= (n - 1) as f64;
        }
    }
    cov
}

/// Total byte size of a `.d2ht` file, counted field by field.
pub fn expected_file_len(trace: &Trace<f32>) -> usize {
    let header = 4 /*magic*/ + 2 /*version*/ + 2 /*flags*/ + 6 * 4 /*dims*/ + 4 /*temp*/ + 1 /*label*/ + 7 /*reserved*/;
    let m = &trace.meta;
    let stored = m.n_layers + usize::from(m.has_embedding_layer);
    let hidden = stored * m.t_gen * m.hidden_dim * 4;
    let attn_vectors =
        usize::from(trace.attn_final_row.is_some()) + usize::from(trace.attn_col_mean.is_some());
    let attn = attn_vectors * m.n_layers * m.t_gen * 4;
    let summaries = m.t_gen * 16;
    let meta_str = m.trace_id.len() + trace.extra.as_ref().map_or(0, |e| 1 + e.len());
    header + hidden + attn + summaries + 4 + meta_str + 4
}

// ---------------------------------------------------------------------------
// Hidden-state transforms
// ---------------------------------------------------------------------------

pub fn map_hidden(trace: &Trace<f64>, f: impl Fn(&[f64]) -> Vec<f64>) -> Trace<f64> {
    let mut out = trace.clone();
    for m in out.hidden.iter_mut() {
        let rows: Vec<Vec<f64>> = m.iter_rows().map(&f).collect();
        *m = Matrix::from_rows(&rows);
    }
    out.meta.hidden_dim = out.hidden[0].cols();
    out
}

pub fn translate(trace: &Trace<f64>, c: &[f64]) -> Trace<f64> {
    map_hidden(trace, |r| r.iter().zip(c).map(|(a, b)| a + b).collect())
}

pub fn rotate(trace: &Trace<f64>, q: &DMatrix<f64>) -> Trace<f64> {
    map_hidden(trace, |r| {
        (0..q.nrows())
            .map(|i| (0..r.len()).map(|j| q[(i, j)] * r[j]).sum())
            .collect()
    })
}

pub fn scale(trace: &Trace<f64>, alpha: f64) -> Trace<f64> {
    map_hidden(trace, |r| r.iter().map(|v| alpha * v).collect())
}

/// Reorders generated tokens: new position `i` holds old token `perm[i]`.
pub fn permute_tokens(trace: &Trace<f64>, perm: &[usize]) -> Trace<f64> {
    let mut out = trace.clone();
    for m in out.hidden.iter_mut() {
        let rows: Vec<Vec<f64>> = perm.iter().map(|&p| m.row(p).to_vec()).collect();
        *m = Matrix::from_rows(&rows);
    }
    let permute = |a: &mut Option<Vec<Vec<f64>>>| {
        if let Some(layers) = a {
            for v in layers.iter_mut() {
                *v = perm.iter().map(|&p| v[p]).collect();
            }
        }
    };
    permute(&mut out.attn_final_row);
    permute(&mut out.attn_col_mean);
    out.logit_summaries = perm.iter().map(|&p| trace.logit_summaries[p]).collect();
    out
}

/// Direct drift with every token treated as a key token.
pub fn centroid_drift(trace: &Trace<f64>) -> f64 {
    let layers = trace.transformer_layers();
    let centroid = |m: &Matrix<f64>| -> Vec<f64> {
        let mut c = vec![0.0; m.cols()];
        for r in m.iter_rows() {
            for (j, v) in r.iter().enumerate() {
                c[j] += v / m.rows() as f64;
            }
        }
        c
    };
    let cs: Vec<Vec<f64>> = layers.iter().map(centroid).collect();
    let mut total = 0.0;
    for w in cs.windows(2) {
        total += w[0]
            .iter()
            .zip(&w[1])
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
    }
    total / (cs.len() - 1) as f64
}
