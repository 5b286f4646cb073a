//! Transformer building blocks with hand-written backward passes.
//!
//! Activations are packed as `[batch * seq, width]` row-major matrices so
//! every projection is a single GEMM over the whole batch; only attention
//! scores are computed per `(sample, head)`.

use crate::linalg::{gemm_into, gemm_view, Mat, Real, View, ViewMut};
use rand::Rng;
use rand_distr::StandardNormal;

pub(crate) const LN_EPS: f64 = 1e-5;
pub(crate) const INIT_STD: f64 = 0.02;

/// Truncated normal at two standard deviations.
pub(crate) fn trunc_normal<S: Real, R: Rng>(rng: &mut R, std: f64) -> S {
    loop {
        let z: f64 = rng.sample(StandardNormal);
        if z.abs() <= 2.0 {
            return S::lit(z * std);
        }
    }
}

/// `y = x W + b`, `W` stored `[in, out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<S> {
    pub w: Mat<S>,
    pub b: Vec<S>,
}

impl<S: Real> Linear<S> {
    pub fn zeros(input: usize, output: usize) -> Self {
        Linear {
            w: Mat::zeros(input, output),
            b: vec![S::zero(); output],
        }
    }

    pub fn init<R: Rng>(input: usize, output: usize, rng: &mut R) -> Self {
        let mut l = Self::zeros(input, output);
        for w in &mut l.w.data {
            *w = trunc_normal(rng, INIT_STD);
        }
        l
    }

    pub fn forward(&self, x: &Mat<S>) -> Mat<S> {
        let mut y = Mat::zeros(x.rows, self.w.cols);
        for r in 0..y.rows {
            y.row_mut(r).copy_from_slice(&self.b);
        }
        gemm_into(S::one(), x, false, &self.w, false, S::one(), &mut y);
        y
    }

    /// Accumulates parameter gradients into `grad` and returns `dL/dx`.
    pub fn backward(&self, x: &Mat<S>, dy: &Mat<S>, grad: &mut Linear<S>) -> Mat<S> {
        self.accumulate(x, dy, grad);
        let mut dx = Mat::zeros(dy.rows, self.w.rows);
        gemm_into(S::one(), dy, false, &self.w, true, S::zero(), &mut dx);
        dx
    }

    /// Parameter gradients only.
    pub fn accumulate(&self, x: &Mat<S>, dy: &Mat<S>, grad: &mut Linear<S>) {
        gemm_into(S::one(), x, true, dy, false, S::one(), &mut grad.w);
        for r in 0..dy.rows {
            for (g, &d) in grad.b.iter_mut().zip(dy.row(r)) {
                *g += d;
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm<S> {
    pub gamma: Vec<S>,
    pub beta: Vec<S>,
}

pub(crate) struct LayerNormCache<S> {
    xhat: Mat<S>,
    rstd: Vec<S>,
}

impl<S: Real> LayerNorm<S> {
    pub fn new(dim: usize) -> Self {
        LayerNorm {
            gamma: vec![S::one(); dim],
            beta: vec![S::zero(); dim],
        }
    }

    pub fn zeros(dim: usize) -> Self {
        LayerNorm {
            gamma: vec![S::zero(); dim],
            beta: vec![S::zero(); dim],
        }
    }

    pub(crate) fn forward(&self, x: &Mat<S>) -> (Mat<S>, LayerNormCache<S>) {
        let d = x.cols;
        let inv_d = S::one() / S::lit(d as f64);
        let eps = S::lit(LN_EPS);
        let mut y = Mat::zeros(x.rows, d);
        let mut xhat = Mat::zeros(x.rows, d);
        let mut rstd = Vec::with_capacity(x.rows);
        for r in 0..x.rows {
            let row = x.row(r);
            let mean = row.iter().copied().sum::<S>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() * inv_d;
            let rs = S::one() / (var + eps).sqrt();
            rstd.push(rs);
            let xh = xhat.row_mut(r);
            for c in 0..d {
                xh[c] = (row[c] - mean) * rs;
            }
            let yr = y.row_mut(r);
            for c in 0..d {
                yr[c] = xhat.data[r * d + c] * self.gamma[c] + self.beta[c];
            }
        }
        (y, LayerNormCache { xhat, rstd })
    }

    pub(crate) fn backward(
        &self,
        cache: &LayerNormCache<S>,
        dy: &Mat<S>,
        grad: &mut LayerNorm<S>,
    ) -> Mat<S> {
        let d = dy.cols;
        let inv_d = S::one() / S::lit(d as f64);
        let mut dx = Mat::zeros(dy.rows, d);
        let mut dxhat = vec![S::zero(); d];
        for r in 0..dy.rows {
            let dyr = dy.row(r);
            let xh = cache.xhat.row(r);
            let mut sum_dxhat = S::zero();
            let mut sum_dxhat_xhat = S::zero();
            for c in 0..d {
                grad.gamma[c] += dyr[c] * xh[c];
                grad.beta[c] += dyr[c];
                dxhat[c] = dyr[c] * self.gamma[c];
                sum_dxhat += dxhat[c];
                sum_dxhat_xhat += dxhat[c] * xh[c];
            }
            let rs = cache.rstd[r];
            let dxr = dx.row_mut(r);
            for c in 0..d {
                dxr[c] = rs * (dxhat[c] - inv_d * sum_dxhat - xh[c] * inv_d * sum_dxhat_xhat);
            }
        }
        dx
    }
}

const GELU_A: f64 = 0.044715;

/// Tanh-approximated GELU.
pub(crate) fn gelu<S: Real>(x: S) -> S {
    let c = S::lit((2.0 / std::f64::consts::PI).sqrt());
    let half = S::lit(0.5);
    half * x * (S::one() + (c * (x + S::lit(GELU_A) * x * x * x)).tanh())
}

pub(crate) fn gelu_grad<S: Real>(x: S) -> S {
    let c = S::lit((2.0 / std::f64::consts::PI).sqrt());
    let half = S::lit(0.5);
    let a = S::lit(GELU_A);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (S::one() + t) + half * x * (S::one() - t * t) * c * (S::one() + S::lit(3.0) * a * x * x)
}

/// Multi-head self-attention over `batch` independent sequences of `seq`
/// tokens each.
#[derive(Clone, Debug, PartialEq)]
pub struct Attention<S> {
    /// Packed `[D, 3D]` projection: Q, K, V column blocks.
    pub qkv: Linear<S>,
    pub proj: Linear<S>,
}

pub(crate) struct AttentionCache<S> {
    input: Mat<S>,
    qkv: Mat<S>,
    concat: Mat<S>,
}

impl<S: Real> Attention<S> {
    /// Returns the projected output, the cache, and the attention
    /// probabilities laid out `[batch][head][seq][seq]`.
    pub(crate) fn forward(
        &self,
        x: &Mat<S>,
        batch: usize,
        seq: usize,
        heads: usize,
    ) -> (Mat<S>, AttentionCache<S>, Vec<S>) {
        let d = x.cols;
        let dh = d / heads;
        let scale = S::one() / S::lit(dh as f64).sqrt();
        let qkv = self.qkv.forward(x);
        let mut probs = vec![S::zero(); batch * heads * seq * seq];
        let mut concat = Mat::<S>::zeros(batch * seq, d);
        let ld = (3 * d) as isize;
        for b in 0..batch {
            let base = b * seq * 3 * d;
            for h in 0..heads {
                let p_off = (b * heads + h) * seq * seq;
                let q = View { ptr: unsafe { qkv.data.as_ptr().add(base + h * dh) }, rs: ld, cs: 1 };
                let kt = View { ptr: unsafe { qkv.data.as_ptr().add(base + d + h * dh) }, rs: 1, cs: ld };
                let v = View { ptr: unsafe { qkv.data.as_ptr().add(base + 2 * d + h * dh) }, rs: ld, cs: 1 };
                let p = &mut probs[p_off..p_off + seq * seq];
                // SAFETY: views stay inside `qkv`, outputs are disjoint buffers.
                unsafe {
                    gemm_view(seq, dh, seq, scale, q, kt, S::zero(), ViewMut { ptr: p.as_mut_ptr(), rs: seq as isize, cs: 1 });
                }
                for row in p.chunks_exact_mut(seq) {
                    crate::linalg::softmax_in_place(row);
                }
                let out = ViewMut { ptr: unsafe { concat.data.as_mut_ptr().add(b * seq * d + h * dh) }, rs: d as isize, cs: 1 };
                unsafe {
                    gemm_view(seq, seq, dh, S::one(), View { ptr: p.as_ptr(), rs: seq as isize, cs: 1 }, v, S::zero(), out);
                }
            }
        }
        let y = self.proj.forward(&concat);
        (
            y,
            AttentionCache {
                input: x.clone(),
                qkv,
                concat,
            },
            probs,
        )
    }

    /// `extra_dprobs` is an external gradient on the attention
    /// probabilities (same layout as returned by `forward`).
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn backward(
        &self,
        cache: &AttentionCache<S>,
        probs: &[S],
        dy: &Mat<S>,
        extra_dprobs: Option<&[S]>,
        batch: usize,
        seq: usize,
        heads: usize,
        grad: &mut Attention<S>,
    ) -> Mat<S> {
        let d = dy.cols;
        let dh = d / heads;
        let scale = S::one() / S::lit(dh as f64).sqrt();
        let dconcat = self.proj.backward(&cache.concat, dy, &mut grad.proj);
        let mut dqkv = Mat::<S>::zeros(batch * seq, 3 * d);
        let ld = (3 * d) as isize;
        let mut dp = vec![S::zero(); seq * seq];
        for b in 0..batch {
            let base = b * seq * 3 * d;
            for h in 0..heads {
                let p_off = (b * heads + h) * seq * seq;
                let p = &probs[p_off..p_off + seq * seq];
                let q = View { ptr: unsafe { cache.qkv.data.as_ptr().add(base + h * dh) }, rs: ld, cs: 1 };
                let k = View { ptr: unsafe { cache.qkv.data.as_ptr().add(base + d + h * dh) }, rs: ld, cs: 1 };
                let vt = View { ptr: unsafe { cache.qkv.data.as_ptr().add(base + 2 * d + h * dh) }, rs: 1, cs: ld };
                let dout = View { ptr: unsafe { dconcat.data.as_ptr().add(b * seq * d + h * dh) }, rs: d as isize, cs: 1 };
                // dP = dO V^T (+ external)
                match extra_dprobs {
                    Some(extra) => dp.copy_from_slice(&extra[p_off..p_off + seq * seq]),
                    None => dp.iter_mut().for_each(|x| *x = S::zero()),
                }
                // SAFETY: all views address regions inside the cached
                // matrices; destinations are disjoint from sources.
                unsafe {
                    gemm_view(seq, dh, seq, S::one(), dout, vt, S::one(), ViewMut { ptr: dp.as_mut_ptr(), rs: seq as isize, cs: 1 });
                    // dV = P^T dO
                    let pt = View { ptr: p.as_ptr(), rs: 1, cs: seq as isize };
                    let dv = ViewMut { ptr: dqkv.data.as_mut_ptr().add(base + 2 * d + h * dh), rs: ld, cs: 1 };
                    gemm_view(seq, seq, dh, S::one(), pt, dout, S::zero(), dv);
                }
                // softmax backward, in place: dS = P * (dP - rowsum(dP * P))
                for r in 0..seq {
                    let pr = &p[r * seq..(r + 1) * seq];
                    let dr = &mut dp[r * seq..(r + 1) * seq];
                    let dotp: S = pr.iter().zip(dr.iter()).map(|(&a, &b)| a * b).sum();
                    for c in 0..seq {
                        dr[c] = pr[c] * (dr[c] - dotp);
                    }
                }
                unsafe {
                    let ds = View { ptr: dp.as_ptr(), rs: seq as isize, cs: 1 };
                    let ds_t = View { ptr: dp.as_ptr(), rs: 1, cs: seq as isize };
                    let dq = ViewMut { ptr: dqkv.data.as_mut_ptr().add(base + h * dh), rs: ld, cs: 1 };
                    gemm_view(seq, seq, dh, scale, ds, k, S::zero(), dq);
                    let dk = ViewMut { ptr: dqkv.data.as_mut_ptr().add(base + d + h * dh), rs: ld, cs: 1 };
                    gemm_view(seq, seq, dh, scale, ds_t, q, S::zero(), dk);
                }
            }
        }
        self.qkv.backward(&cache.input, &dqkv, &mut grad.qkv)
    }
}

/// Pre-norm transformer block: `h = x + Attn(LN1(x))`, `y = h + MLP(LN2(h))`.
#[derive(Clone, Debug, PartialEq)]
pub struct Block<S> {
    pub ln1: LayerNorm<S>,
    pub attn: Attention<S>,
    pub ln2: LayerNorm<S>,
    pub fc1: Linear<S>,
    pub fc2: Linear<S>,
}

pub(crate) struct BlockCache<S> {
    ln1: LayerNormCache<S>,
    attn: AttentionCache<S>,
    ln2: LayerNormCache<S>,
    n2: Mat<S>,
    u: Mat<S>,
    g: Mat<S>,
}

pub(crate) struct BlockOut<S> {
    pub out: Mat<S>,
    /// Residual stream right after the attention sub-layer.
    pub hidden: Mat<S>,
    pub probs: Vec<S>,
    pub cache: BlockCache<S>,
}

impl<S: Real> Block<S> {
    pub fn init<R: Rng>(dim: usize, hidden: usize, rng: &mut R) -> Self {
        Block {
            ln1: LayerNorm::new(dim),
            attn: Attention {
                qkv: Linear::init(dim, 3 * dim, rng),
                proj: Linear::init(dim, dim, rng),
            },
            ln2: LayerNorm::new(dim),
            fc1: Linear::init(dim, hidden, rng),
            fc2: Linear::init(hidden, dim, rng),
        }
    }

    pub fn zeros(dim: usize, hidden: usize) -> Self {
        Block {
            ln1: LayerNorm::zeros(dim),
            attn: Attention {
                qkv: Linear::zeros(dim, 3 * dim),
                proj: Linear::zeros(dim, dim),
            },
            ln2: LayerNorm::zeros(dim),
            fc1: Linear::zeros(dim, hidden),
            fc2: Linear::zeros(hidden, dim),
        }
    }

    pub(crate) fn forward(&self, x: &Mat<S>, batch: usize, seq: usize, heads: usize) -> BlockOut<S> {
        let (n1, ln1) = self.ln1.forward(x);
        let (a, attn, probs) = self.attn.forward(&n1, batch, seq, heads);
        let mut hidden = a;
        hidden.add_assign(x);
        let (n2, ln2) = self.ln2.forward(&hidden);
        let u = self.fc1.forward(&n2);
        let mut g = u.clone();
        for v in &mut g.data {
            *v = gelu(*v);
        }
        let mut out = self.fc2.forward(&g);
        out.add_assign(&hidden);
        BlockOut {
            out,
            hidden,
            probs,
            cache: BlockCache { ln1, attn, ln2, n2, u, g },
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub(crate) fn backward(
        &self,
        cache: &BlockCache<S>,
        probs: &[S],
        dout: &Mat<S>,
        extra_dhidden: Option<&Mat<S>>,
        extra_dprobs: Option<&[S]>,
        batch: usize,
        seq: usize,
        heads: usize,
        grad: &mut Block<S>,
    ) -> Mat<S> {
        let mut dg = self.fc2.backward(&cache.g, dout, &mut grad.fc2);
        for (d, &u) in dg.data.iter_mut().zip(&cache.u.data) {
            *d *= gelu_grad(u);
        }
        let dn2 = self.fc1.backward(&cache.n2, &dg, &mut grad.fc1);
        let mut dh = self.ln2.backward(&cache.ln2, &dn2, &mut grad.ln2);
        dh.add_assign(dout);
        if let Some(extra) = extra_dhidden {
            dh.add_assign(extra);
        }
        let dn1 = self
            .attn
            .backward(&cache.attn, probs, &dh, extra_dprobs, batch, seq, heads, &mut grad.attn);
        let mut dx = self.ln1.backward(&cache.ln1, &dn1, &mut grad.ln1);
        dx.add_assign(&dh);
        dx
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn loss_and_grad(block: &Block<f64>, x: &Mat<f64>, w: &Mat<f64>, batch: usize, seq: usize, heads: usize) -> (f64, Mat<f64>, Block<f64>) {
        let o = block.forward(x, batch, seq, heads);
        let loss: f64 = o.out.data.iter().zip(&w.data).map(|(a, b)| a * b).sum::<f64>()
            + o.probs.iter().enumerate().map(|(i, p)| p * ((i % 7) as f64 - 3.0)).sum::<f64>();
        let dprobs: Vec<f64> = (0..o.probs.len()).map(|i| (i % 7) as f64 - 3.0).collect();
        let mut grad = Block::zeros(x.cols, block.fc1.w.cols);
        let dx = block.backward(&o.cache, &o.probs, w, None, Some(&dprobs), batch, seq, heads, &mut grad);
        (loss, dx, grad)
    }

    #[test]
    fn block_input_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (batch, seq, heads, dim) = (2, 3, 2, 4);
        let mut block = Block::<f64>::init(dim, 8, &mut rng);
        // Larger weights so the check is not dominated by the residual path.
        for w in block.attn.qkv.w.data.iter_mut().chain(block.fc1.w.data.iter_mut()) {
            *w *= 25.0;
        }
        let x = Mat::from_fn(batch * seq, dim, |r, c| ((r * 7 + c * 3) % 5) as f64 * 0.3 - 0.6);
        let w = Mat::from_fn(batch * seq, dim, |r, c| ((r + 2 * c) % 3) as f64 - 1.0);
        let (_, dx, _) = loss_and_grad(&block, &x, &w, batch, seq, heads);
        let h = 1e-6;
        for i in 0..x.data.len() {
            let mut xp = x.clone();
            xp.data[i] += h;
            let mut xm = x.clone();
            xm.data[i] -= h;
            let fp = loss_and_grad(&block, &xp, &w, batch, seq, heads).0;
            let fm = loss_and_grad(&block, &xm, &w, batch, seq, heads).0;
            let num = (fp - fm) / (2.0 * h);
            let err = (num - dx.data[i]).abs() / num.abs().max(dx.data[i].abs()).max(1e-6);
            assert!(err < 1e-6, "x[{i}]: fd {num} vs analytic {}", dx.data[i]);
        }
    }

    #[test]
    fn gelu_derivative() {
        for &x in &[-3.0f64, -0.5, 0.0, 0.7, 2.5] {
            let h = 1e-6;
            let num = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((num - gelu_grad(x)).abs() < 1e-8);
        }
    }
}
