//! Patch tokenization of CSI tensors and the three masking strategies.

use crate::csi_data::CsiTensor;
use crate::error::{Error, Result};
use crate::linalg::{Mat, Real};
use num_complex::Complex32;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Patch extents along `(t, k, n)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchSpec {
    pub p_t: usize,
    pub p_k: usize,
    pub p_n: usize,
}

impl PatchSpec {
    pub fn new(p_t: usize, p_k: usize, p_n: usize) -> Self {
        PatchSpec { p_t, p_k, p_n }
    }

    pub fn volume(&self) -> usize {
        self.p_t * self.p_k * self.p_n
    }

    /// Real features per token: re and im of every entry in the patch.
    pub fn feature_width(&self) -> usize {
        2 * self.volume()
    }
}

/// Token grid induced by a patch spec on concrete tensor dims.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenGrid {
    pub spec: PatchSpec,
    pub dims: (usize, usize, usize),
    /// Tokens along t, k, n.
    pub shape: (usize, usize, usize),
}

impl TokenGrid {
    pub fn new(spec: PatchSpec, dims: (usize, usize, usize)) -> Result<Self> {
        let (t, k, n) = dims;
        if spec.p_t == 0 || spec.p_k == 0 || spec.p_n == 0 {
            return Err(Error::Config("patch extents must be positive".into()));
        }
        if t % spec.p_t != 0 || k % spec.p_k != 0 || n % spec.p_n != 0 {
            return Err(Error::Config(format!(
                "patch ({}, {}, {}) does not divide dims ({t}, {k}, {n})",
                spec.p_t, spec.p_k, spec.p_n
            )));
        }
        let shape = (t / spec.p_t, k / spec.p_k, n / spec.p_n);
        Ok(TokenGrid { spec, dims, shape })
    }

    pub fn num_tokens(&self) -> usize {
        self.shape.0 * self.shape.1 * self.shape.2
    }

    pub fn feature_width(&self) -> usize {
        self.spec.feature_width()
    }

    /// Grid coordinates of token `g` (t-major, then k, then n).
    pub fn coord(&self, g: usize) -> (usize, usize, usize) {
        let (_, gk, gn) = self.shape;
        (g / (gk * gn), (g / gn) % gk, g % gn)
    }

    pub fn token_index(&self, coord: (usize, usize, usize)) -> usize {
        let (_, gk, gn) = self.shape;
        (coord.0 * gk + coord.1) * gn + coord.2
    }

    pub fn coords(&self) -> Vec<(usize, usize, usize)> {
        (0..self.num_tokens()).map(|g| self.coord(g)).collect()
    }

    /// Tensor entry indices covered by token `g`, in the order their
    /// features appear inside the token.
    pub fn entries(&self, g: usize) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        let (ct, ck, cn) = self.coord(g);
        let s = self.spec;
        (0..s.p_t).flat_map(move |dt| {
            (0..s.p_k).flat_map(move |dk| {
                (0..s.p_n).map(move |dn| (ct * s.p_t + dt, ck * s.p_k + dk, cn * s.p_n + dn))
            })
        })
    }
}

/// Patchified tensor: one row of `F` reals per token.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenBatch<S = f32> {
    pub tokens: Mat<S>,
    pub coords: Vec<(usize, usize, usize)>,
}

pub fn patchify<S: Real>(h: &CsiTensor, spec: PatchSpec) -> Result<TokenBatch<S>> {
    let grid = TokenGrid::new(spec, h.dims())?;
    let mut tokens = Mat::zeros(grid.num_tokens(), grid.feature_width());
    patchify_into(h, &grid, &mut tokens.data);
    Ok(TokenBatch {
        tokens,
        coords: grid.coords(),
    })
}

/// Writes the `G x F` token matrix of `h` into `out` (row-major).
pub fn patchify_into<S: Real>(h: &CsiTensor, grid: &TokenGrid, out: &mut [S]) {
    let vol = grid.spec.volume();
    let f = 2 * vol;
    debug_assert_eq!(out.len(), grid.num_tokens() * f);
    for g in 0..grid.num_tokens() {
        let row = &mut out[g * f..(g + 1) * f];
        for (j, (t, k, n)) in grid.entries(g).enumerate() {
            let z = h.get(t, k, n);
            row[j] = S::lit(z.re as f64);
            row[vol + j] = S::lit(z.im as f64);
        }
    }
}

/// Inverse of [`patchify`]; tokens are placed by their recorded coords.
pub fn unpatchify<S: Real>(
    tb: &TokenBatch<S>,
    spec: PatchSpec,
    dims: (usize, usize, usize),
) -> Result<CsiTensor> {
    let grid = TokenGrid::new(spec, dims)?;
    if tb.tokens.rows != tb.coords.len() || tb.tokens.cols != grid.feature_width() {
        return Err(Error::Contract(format!(
            "token batch {}x{} with {} coords does not fit patch of width {}",
            tb.tokens.rows,
            tb.tokens.cols,
            tb.coords.len(),
            grid.feature_width()
        )));
    }
    let mut out = CsiTensor::zeros(dims.0, dims.1, dims.2);
    let vol = spec.volume();
    for (row, &coord) in tb.coords.iter().enumerate() {
        if coord.0 >= grid.shape.0 || coord.1 >= grid.shape.1 || coord.2 >= grid.shape.2 {
            return Err(Error::Contract(format!("token coord {coord:?} outside grid")));
        }
        let g = grid.token_index(coord);
        let feats = tb.tokens.row(row);
        for (j, (t, k, n)) in grid.entries(g).enumerate() {
            out.set(
                t,
                k,
                n,
                Complex32::new(feats[j].f64() as f32, feats[vol + j].f64() as f32),
            );
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskStrategy {
    Random,
    Time,
    Frequency,
}

impl MaskStrategy {
    pub const ALL: [MaskStrategy; 3] = [MaskStrategy::Random, MaskStrategy::Time, MaskStrategy::Frequency];

    pub fn name(self) -> &'static str {
        match self {
            MaskStrategy::Random => "random",
            MaskStrategy::Time => "time",
            MaskStrategy::Frequency => "frequency",
        }
    }
}

/// Masking request: a ratio for random masking, an RB boundary otherwise.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum MaskSpec {
    Random { ratio: f64 },
    /// Mask every time RB at index `>= boundary` (history length `X_T`).
    Time { boundary: usize },
    /// Mask every frequency RB at index `>= boundary` (`X_F`).
    Frequency { boundary: usize },
}

impl MaskSpec {
    pub fn strategy(&self) -> MaskStrategy {
        match self {
            MaskSpec::Random { .. } => MaskStrategy::Random,
            MaskSpec::Time { .. } => MaskStrategy::Time,
            MaskSpec::Frequency { .. } => MaskStrategy::Frequency,
        }
    }

    /// Turns a masking ratio into a request; time/frequency ratios become
    /// the boundary `round((1 - ratio) * len)` snapped down to the patch grid.
    pub fn from_ratio(strategy: MaskStrategy, ratio: f64, grid: &TokenGrid) -> Result<Self> {
        if !(ratio > 0.0 && ratio < 1.0) {
            return Err(Error::Config(format!("mask ratio {ratio} outside (0, 1)")));
        }
        let snap = |len: usize, patch: usize| {
            let x = ((1.0 - ratio) * len as f64).round() as usize;
            (x / patch) * patch
        };
        Ok(match strategy {
            MaskStrategy::Random => MaskSpec::Random { ratio },
            MaskStrategy::Time => MaskSpec::Time {
                boundary: snap(grid.dims.0, grid.spec.p_t),
            },
            MaskStrategy::Frequency => MaskSpec::Frequency {
                boundary: snap(grid.dims.1, grid.spec.p_k),
            },
        })
    }
}

/// Visible/masked partition of the token indices.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskSet {
    pub strategy: MaskStrategy,
    pub ratio: Option<f64>,
    pub boundary: Option<usize>,
    pub visible_idx: Vec<usize>,
    pub masked_idx: Vec<usize>,
}

impl MaskSet {
    pub fn num_tokens(&self) -> usize {
        self.visible_idx.len() + self.masked_idx.len()
    }

    /// Per-token flag, `true` where masked.
    pub fn masked_flags(&self) -> Vec<bool> {
        let mut flags = vec![false; self.num_tokens()];
        for &g in &self.masked_idx {
            flags[g] = true;
        }
        flags
    }

    /// Per-entry flag over the flattened CSI tensor, `true` inside omega.
    pub fn entry_flags(&self, grid: &TokenGrid) -> Vec<bool> {
        let (_, k, n) = grid.dims;
        let mut flags = vec![false; grid.dims.0 * k * n];
        for &g in &self.masked_idx {
            for (ti, ki, ni) in grid.entries(g) {
                flags[(ti * k + ki) * n + ni] = true;
            }
        }
        flags
    }

    /// Number of complex tensor entries in the masked region.
    pub fn masked_entries(&self, grid: &TokenGrid) -> usize {
        self.masked_idx.len() * grid.spec.volume()
    }
}

pub fn make_mask(spec: MaskSpec, grid: &TokenGrid, seed: u64) -> Result<MaskSet> {
    let g_total = grid.num_tokens();
    let (masked_idx, ratio, boundary) = match spec {
        MaskSpec::Random { ratio } => {
            if !(ratio > 0.0 && ratio < 1.0) {
                return Err(Error::Config(format!("mask ratio {ratio} outside (0, 1)")));
            }
            let count = (ratio * g_total as f64).round() as usize;
            if count == 0 || count == g_total {
                return Err(Error::DegenerateMask(format!(
                    "ratio {ratio} over {g_total} tokens masks {count}"
                )));
            }
            let mut order: Vec<usize> = (0..g_total).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let mut masked = order[..count].to_vec();
            masked.sort_unstable();
            (masked, Some(ratio), None)
        }
        MaskSpec::Time { boundary } => {
            let first = axis_boundary(boundary, grid.dims.0, grid.spec.p_t, "time")?;
            let masked = (0..g_total).filter(|&g| grid.coord(g).0 >= first).collect();
            (masked, None, Some(boundary))
        }
        MaskSpec::Frequency { boundary } => {
            let first = axis_boundary(boundary, grid.dims.1, grid.spec.p_k, "frequency")?;
            let masked = (0..g_total).filter(|&g| grid.coord(g).1 >= first).collect();
            (masked, None, Some(boundary))
        }
    };
    let flags = {
        let mut f = vec![false; g_total];
        for &g in &masked_idx {
            f[g] = true;
        }
        f
    };
    let visible_idx = (0..g_total).filter(|&g| !flags[g]).collect();
    Ok(MaskSet {
        strategy: spec.strategy(),
        ratio,
        boundary,
        visible_idx,
        masked_idx,
    })
}

/// First masked token index along an axis, validating the RB boundary.
fn axis_boundary(boundary: usize, len: usize, patch: usize, axis: &str) -> Result<usize> {
    if boundary == 0 || boundary >= len {
        return Err(Error::DegenerateMask(format!(
            "{axis} boundary {boundary} leaves no visible or no masked RBs (axis length {len})"
        )));
    }
    if boundary % patch != 0 {
        return Err(Error::Config(format!(
            "{axis} boundary {boundary} is not a multiple of the patch extent {patch}"
        )));
    }
    Ok(boundary / patch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::csi_data::{generate_channel, ChannelGenConfig};

    fn sample(t: usize, k: usize, nv: usize, nh: usize) -> CsiTensor {
        let cfg = ChannelGenConfig {
            t,
            k,
            n_v: nv,
            n_h_ant: nh,
            ..Default::default()
        };
        generate_channel(&cfg, 5).unwrap()
    }

    #[test]
    fn token_counts() {
        let h = sample(4, 4, 2, 2);
        let tb = patchify::<f32>(&h, PatchSpec::new(1, 1, 1)).unwrap();
        assert_eq!(tb.tokens.shape(), (64, 2));
        let tb = patchify::<f32>(&h, PatchSpec::new(2, 2, 2)).unwrap();
        assert_eq!(tb.tokens.shape(), (8, 16));
        let tb = patchify::<f32>(&h, PatchSpec::new(4, 4, 4)).unwrap();
        assert_eq!(tb.tokens.shape(), (1, 2 * 4 * 4 * 4));
        assert_eq!(unpatchify(&tb, PatchSpec::new(4, 4, 4), h.dims()).unwrap(), h);
        assert!(matches!(
            patchify::<f32>(&h, PatchSpec::new(3, 1, 1)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn round_trip_is_exact() {
        let h = sample(8, 4, 2, 2);
        for spec in [
            PatchSpec::new(1, 1, 1),
            PatchSpec::new(2, 2, 2),
            PatchSpec::new(4, 1, 4),
            PatchSpec::new(8, 4, 1),
        ] {
            let tb = patchify::<f32>(&h, spec).unwrap();
            assert_eq!(unpatchify(&tb, spec, h.dims()).unwrap(), h);
        }
    }

    #[test]
    fn zero_tokens_give_zero_tensor() {
        let spec = PatchSpec::new(2, 2, 1);
        let grid = TokenGrid::new(spec, (4, 4, 2)).unwrap();
        let tb = TokenBatch::<f64> {
            tokens: Mat::zeros(grid.num_tokens(), grid.feature_width()),
            coords: grid.coords(),
        };
        assert_eq!(unpatchify(&tb, spec, (4, 4, 2)).unwrap(), CsiTensor::zeros(4, 4, 2));
    }

    #[test]
    fn permuted_tokens_restore_by_coords() {
        let h = sample(4, 4, 2, 2);
        let spec = PatchSpec::new(2, 1, 2);
        let tb = patchify::<f32>(&h, spec).unwrap();
        let g = tb.coords.len();
        // Reverse token order, carrying coordinates along.
        let mut permuted = TokenBatch {
            tokens: Mat::zeros(g, tb.tokens.cols),
            coords: Vec::new(),
        };
        for (dst, src) in (0..g).rev().enumerate() {
            permuted.tokens.row_mut(dst).copy_from_slice(tb.tokens.row(src));
            permuted.coords.push(tb.coords[src]);
        }
        assert_eq!(unpatchify(&permuted, spec, h.dims()).unwrap(), h);
    }

    #[test]
    fn time_mask_covers_future() {
        let grid = TokenGrid::new(PatchSpec::new(1, 2, 2), (8, 4, 4)).unwrap();
        let m = make_mask(MaskSpec::Time { boundary: 4 }, &grid, 0).unwrap();
        assert_eq!(m.masked_idx.len(), grid.num_tokens() / 2);
        for &g in &m.masked_idx {
            assert!(grid.coord(g).0 >= 4);
        }
        for &g in &m.visible_idx {
            assert!(grid.coord(g).0 < 4);
        }
        let m2 = make_mask(MaskSpec::Time { boundary: 4 }, &grid, 99).unwrap();
        assert_eq!(m, m2);
    }

    #[test]
    fn frequency_mask_covers_upper_band() {
        let grid = TokenGrid::new(PatchSpec::new(2, 1, 2), (4, 8, 4)).unwrap();
        let m = make_mask(MaskSpec::Frequency { boundary: 4 }, &grid, 0).unwrap();
        let flags = m.entry_flags(&grid);
        for t in 0..4 {
            for k in 0..8 {
                for n in 0..4 {
                    assert_eq!(flags[(t * 8 + k) * 4 + n], k >= 4);
                }
            }
        }
    }

    #[test]
    fn random_mask_count_and_seed_dependence() {
        let grid = TokenGrid::new(PatchSpec::new(1, 1, 1), (4, 4, 2)).unwrap();
        assert_eq!(grid.num_tokens(), 32);
        let m = make_mask(MaskSpec::Random { ratio: 0.5 }, &grid, 3).unwrap();
        assert_eq!(m.masked_idx.len(), 16);
        assert_eq!(m, make_mask(MaskSpec::Random { ratio: 0.5 }, &grid, 3).unwrap());
        let distinct = (0..100u64)
            .filter(|&s| {
                make_mask(MaskSpec::Random { ratio: 0.5 }, &grid, s).unwrap()
                    != make_mask(MaskSpec::Random { ratio: 0.5 }, &grid, s + 1000).unwrap()
            })
            .count();
        assert!(distinct >= 99, "only {distinct} of 100 seed pairs differed");
    }

    #[test]
    fn degenerate_masks_are_errors() {
        let grid = TokenGrid::new(PatchSpec::new(1, 1, 1), (4, 4, 1)).unwrap();
        for spec in [
            MaskSpec::Time { boundary: 0 },
            MaskSpec::Time { boundary: 4 },
            MaskSpec::Frequency { boundary: 4 },
            MaskSpec::Random { ratio: 0.01 },
        ] {
            assert!(matches!(make_mask(spec, &grid, 0), Err(Error::DegenerateMask(_))));
        }
    }

    #[test]
    fn ratio_to_boundary() {
        let grid = TokenGrid::new(PatchSpec::new(2, 4, 2), (16, 8, 4)).unwrap();
        assert_eq!(
            MaskSpec::from_ratio(MaskStrategy::Time, 0.5, &grid).unwrap(),
            MaskSpec::Time { boundary: 8 }
        );
        assert_eq!(
            MaskSpec::from_ratio(MaskStrategy::Frequency, 0.5, &grid).unwrap(),
            MaskSpec::Frequency { boundary: 4 }
        );
    }
}
