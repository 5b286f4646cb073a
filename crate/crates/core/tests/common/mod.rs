//! Naive reference implementations used as test oracles, plus small
//! fixtures. Everything here is written with explicit loops and shares no
//! code with the library's numeric paths.

#![allow(dead_code)]

use mcakd::csi_data::CsiTensor;
use mcakd::linalg::Mat;
use mcakd::tokenize_mask::{MaskSet, PatchSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn naive_cos(x: &[f64], y: &[f64]) -> f64 {
    let (mut xy, mut xx, mut yy) = (0.0, 0.0, 0.0);
    for i in 0..x.len() {
        xy += x[i] * y[i];
        xx += x[i] * x[i];
        yy += y[i] * y[i];
    }
    xy / (xx.sqrt() * yy.sqrt())
}

/// `maps[l][h]` is a row-major `seq x seq` matrix as nested rows.
pub type Stack = Vec<Vec<Vec<Vec<f64>>>>;

pub fn naive_attention_side(teacher: &Stack, student: &Stack) -> f64 {
    let mut sum = 0.0;
    let mut n = 0.0;
    for l in 0..teacher.len() {
        for h in 0..teacher[l].len() {
            let mut t = Vec::new();
            let mut s = Vec::new();
            for i in 0..teacher[l][h].len() {
                for j in 0..teacher[l][h][i].len() {
                    t.push(teacher[l][h][i][j]);
                    s.push(student[l][h][i][j]);
                }
            }
            sum += naive_cos(&t, &s);
            n += 1.0;
        }
    }
    1.0 - sum / n
}

pub fn flatten_stack(stack: &Stack) -> Vec<Vec<f64>> {
    let mut out = Vec::new();
    for layer in stack {
        for head in layer {
            out.push(head.iter().flatten().copied().collect());
        }
    }
    out
}

pub fn random_stochastic(r: &mut ChaCha8Rng, seq: usize) -> Vec<Vec<f64>> {
    (0..seq)
        .map(|_| {
            let logits: Vec<f64> = (0..seq).map(|_| r.random_range(-3.0..3.0)).collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|x| (x - m).exp()).collect();
            let z: f64 = e.iter().sum();
            e.iter().map(|x| x / z).collect()
        })
        .collect()
}

pub fn random_stack(r: &mut ChaCha8Rng, layers: usize, heads: usize, seq: usize) -> Stack {
    (0..layers)
        .map(|_| (0..heads).map(|_| random_stochastic(r, seq)).collect())
        .collect()
}

pub fn random_rows(r: &mut ChaCha8Rng, rows: usize, cols: usize) -> Vec<Vec<f64>> {
    (0..rows)
        .map(|_| (0..cols).map(|_| r.random_range(-1.0..1.0)).collect())
        .collect()
}

pub fn to_mat(rows: &[Vec<f64>]) -> Mat<f64> {
    Mat::from_fn(rows.len(), rows[0].len(), |r, c| rows[r][c])
}

pub fn from_mat(m: &Mat<f64>) -> Vec<Vec<f64>> {
    (0..m.rows).map(|r| m.row(r).to_vec()).collect()
}

pub struct NaiveSelection {
    pub scores: Vec<f64>,
    pub indices: Vec<usize>,
    pub filtered: Vec<Vec<f64>>,
    pub attn: Vec<Vec<f64>>,
}

/// Cross attention with explicit loops, head-averaged weights, scores as
/// a double sum, and an insertion sort keyed on (score desc, index asc).
pub fn naive_ca_ks(
    e_t: &[Vec<f64>],
    e_s: &[Vec<f64>],
    wq: &[Vec<f64>],
    wk: &[Vec<f64>],
    wv: &[Vec<f64>],
    heads: usize,
) -> NaiveSelection {
    let seq = e_t.len();
    let d_t = e_t[0].len();
    let d_s = e_s[0].len();
    let d_a = wq[0].len();
    let dh = d_a / heads;
    let proj = |x: &[Vec<f64>], w: &[Vec<f64>]| -> Vec<Vec<f64>> {
        let mut out = vec![vec![0.0; d_a]; seq];
        for i in 0..seq {
            for a in 0..d_a {
                for j in 0..x[i].len() {
                    out[i][a] += x[i][j] * w[j][a];
                }
            }
        }
        out
    };
    let q = proj(e_s, wq);
    let k = proj(e_t, wk);
    let _v = proj(e_t, wv);
    let mut attn = vec![vec![0.0; seq]; seq];
    for h in 0..heads {
        for i in 0..seq {
            let mut logits = vec![0.0; seq];
            for j in 0..seq {
                for a in h * dh..(h + 1) * dh {
                    logits[j] += q[i][a] * k[j][a];
                }
                logits[j] /= (dh as f64).sqrt();
            }
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|x| (x - m).exp()).sum();
            for j in 0..seq {
                attn[i][j] += (logits[j] - m).exp() / z / heads as f64;
            }
        }
    }
    let mut scores = vec![0.0; d_t];
    for d in 0..d_t {
        for l in 0..seq {
            for s in 0..seq {
                scores[d] += attn[l][s] * e_t[s][d];
            }
        }
    }
    let mut order: Vec<usize> = Vec::new();
    for d in 0..d_t {
        let mut pos = order.len();
        while pos > 0 && scores[order[pos - 1]] < scores[d] {
            pos -= 1;
        }
        order.insert(pos, d);
    }
    let indices = order[..d_s].to_vec();
    let filtered = (0..seq)
        .map(|l| indices.iter().map(|&d| e_t[l][d]).collect())
        .collect();
    NaiveSelection {
        scores,
        indices,
        filtered,
        attn,
    }
}

pub fn naive_row_loss(target: &[Vec<f64>], student: &[Vec<f64>]) -> f64 {
    let mut sum = 0.0;
    for l in 0..target.len() {
        sum += naive_cos(&target[l], &student[l]);
    }
    1.0 - sum / target.len() as f64
}

/// Masked MSE by looping over tensor entries and locating each entry's
/// token from its coordinates.
pub fn naive_mse(h_hat: &CsiTensor, h: &CsiTensor, mask: &MaskSet, spec: PatchSpec) -> f64 {
    let (t_len, k_len, n_len) = h.dims();
    let (gk, gn) = (k_len / spec.p_k, n_len / spec.p_n);
    let masked: std::collections::HashSet<usize> = mask.masked_idx.iter().copied().collect();
    let (mut sum, mut count) = (0.0, 0usize);
    for t in 0..t_len {
        for k in 0..k_len {
            for n in 0..n_len {
                let g = ((t / spec.p_t) * gk + k / spec.p_k) * gn + n / spec.p_n;
                if masked.contains(&g) {
                    let d = h.get(t, k, n) - h_hat.get(t, k, n);
                    sum += (d.re as f64).powi(2) + (d.im as f64).powi(2);
                    count += 1;
                }
            }
        }
    }
    sum / count as f64
}

/// Max absolute difference over the larger of the two max magnitudes.
pub fn normwise_rel_err(a: &[f64], b: &[f64]) -> f64 {
    let mut diff: f64 = 0.0;
    let mut scale: f64 = 0.0;
    for i in 0..a.len() {
        diff = diff.max((a[i] - b[i]).abs());
        scale = scale.max(a[i].abs()).max(b[i].abs());
    }
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}
