//! Synthetic spatial-temporal-frequency CSI.
//!
//! Each sample is a sum of `P` propagation paths seen by a half-wavelength
//! uniform planar array:
//!
//! ```text
//! H[t,k,n] = sum_p alpha_p * exp(j2pi(fD_p * t * dt - tau_p * k * df)) * a_n(theta_p, phi_p)
//! a_(v,h)(theta, phi) = exp(j*pi*(v*sin(theta)*sin(phi) + h*cos(theta)))
//! ```
//!
//! with `alpha_p ~ CN(0, 1/P)` so that the expected per-entry power is one.

use crate::error::{Error, Result};
use num_complex::{Complex, Complex32, Complex64};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

pub const DATASET_FORMAT_VERSION: u32 = 1;

/// Complex channel grid indexed `[t, k, n]`, stored t-major then k then n.
#[derive(Clone, Debug, PartialEq)]
pub struct CsiTensor {
    t: usize,
    k: usize,
    n: usize,
    data: Vec<Complex32>,
}

impl CsiTensor {
    pub fn zeros(t: usize, k: usize, n: usize) -> Self {
        CsiTensor {
            t,
            k,
            n,
            data: vec![Complex32::new(0.0, 0.0); t * k * n],
        }
    }

    pub fn from_vec(t: usize, k: usize, n: usize, data: Vec<Complex32>) -> Result<Self> {
        if data.len() != t * k * n {
            return Err(Error::Contract(format!(
                "tensor data has {} entries, dims {t}x{k}x{n} need {}",
                data.len(),
                t * k * n
            )));
        }
        if data.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(Error::DegenerateInput("non-finite CSI entry".into()));
        }
        Ok(CsiTensor { t, k, n, data })
    }

    pub fn from_fn(
        t: usize,
        k: usize,
        n: usize,
        mut f: impl FnMut(usize, usize, usize) -> Complex32,
    ) -> Self {
        let mut data = Vec::with_capacity(t * k * n);
        for ti in 0..t {
            for ki in 0..k {
                for ni in 0..n {
                    data.push(f(ti, ki, ni));
                }
            }
        }
        CsiTensor { t, k, n, data }
    }

    /// `(T, K, N)`.
    pub fn dims(&self) -> (usize, usize, usize) {
        (self.t, self.k, self.n)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, t: usize, k: usize, n: usize) -> usize {
        (t * self.k + k) * self.n + n
    }

    #[inline]
    pub fn get(&self, t: usize, k: usize, n: usize) -> Complex32 {
        self.data[self.index(t, k, n)]
    }

    #[inline]
    pub fn set(&mut self, t: usize, k: usize, n: usize, v: Complex32) {
        let i = self.index(t, k, n);
        self.data[i] = v;
    }

    pub fn data(&self) -> &[Complex32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Complex32] {
        &mut self.data
    }

    /// Squared Frobenius norm accumulated in f64.
    pub fn frobenius_sq(&self) -> f64 {
        self.data
            .iter()
            .map(|z| (z.re as f64).powi(2) + (z.im as f64).powi(2))
            .sum()
    }

    pub fn scaled(&self, factor: f64) -> CsiTensor {
        CsiTensor {
            t: self.t,
            k: self.k,
            n: self.n,
            data: self
                .data
                .iter()
                .map(|z| Complex32::new((z.re as f64 * factor) as f32, (z.im as f64 * factor) as f32))
                .collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|z| z.re.is_finite() && z.im.is_finite())
    }
}

/// Closed interval `[lo, hi]` in radians.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AngleRange {
    pub lo: f64,
    pub hi: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChannelGenConfig {
    /// Time resource blocks.
    pub t: usize,
    /// Frequency resource blocks.
    pub k: usize,
    /// Vertical antennas.
    pub n_v: usize,
    /// Horizontal antennas.
    pub n_h_ant: usize,
    pub num_paths: usize,
    /// Slot duration in seconds.
    pub delta_t: f64,
    /// Resource-block spacing in Hz.
    pub delta_f: f64,
    pub max_doppler: f64,
    pub max_delay: f64,
    pub elevation: AngleRange,
    pub azimuth: AngleRange,
    pub seed: u64,
}

impl Default for ChannelGenConfig {
    fn default() -> Self {
        ChannelGenConfig {
            t: 16,
            k: 8,
            n_v: 2,
            n_h_ant: 2,
            num_paths: 4,
            delta_t: 1e-3,
            delta_f: 180e3,
            max_doppler: 100.0,
            max_delay: 1e-6,
            elevation: AngleRange {
                lo: PI / 6.0,
                hi: 5.0 * PI / 6.0,
            },
            azimuth: AngleRange {
                lo: -PI / 3.0,
                hi: PI / 3.0,
            },
            seed: 0,
        }
    }
}

impl ChannelGenConfig {
    pub fn n(&self) -> usize {
        self.n_v * self.n_h_ant
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("t", self.t),
            ("k", self.k),
            ("n_v", self.n_v),
            ("n_h_ant", self.n_h_ant),
            ("num_paths", self.num_paths),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !(self.delta_t > 0.0 && self.delta_t.is_finite()) {
            return Err(Error::Config("delta_t must be positive".into()));
        }
        if !(self.delta_f > 0.0 && self.delta_f.is_finite()) {
            return Err(Error::Config("delta_f must be positive".into()));
        }
        if !(self.max_doppler >= 0.0 && self.max_doppler * self.delta_t < 0.5) {
            return Err(Error::Config(format!(
                "max_doppler * delta_t = {} must lie in [0, 0.5)",
                self.max_doppler * self.delta_t
            )));
        }
        if !(self.max_delay >= 0.0 && self.max_delay * self.delta_f < 1.0) {
            return Err(Error::Config(format!(
                "max_delay * delta_f = {} must lie in [0, 1)",
                self.max_delay * self.delta_f
            )));
        }
        for (name, r) in [("elevation", self.elevation), ("azimuth", self.azimuth)] {
            if !(r.lo.is_finite() && r.hi.is_finite() && r.lo <= r.hi) {
                return Err(Error::Config(format!("{name} range must satisfy lo <= hi")));
            }
        }
        Ok(())
    }
}

/// One propagation path.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PathParams {
    pub gain: Complex64,
    pub doppler_hz: f64,
    pub delay_s: f64,
    pub elevation: f64,
    pub azimuth: f64,
}

/// UPA steering entry for antenna `(v, h)` at half-wavelength spacing.
pub fn steering(v: usize, h: usize, elevation: f64, azimuth: f64) -> Complex64 {
    let phase = PI * (v as f64 * elevation.sin() * azimuth.sin() + h as f64 * elevation.cos());
    Complex64::from_polar(1.0, phase)
}

/// Draws the random path set for one sample.
pub fn draw_paths(cfg: &ChannelGenConfig, sample_seed: u64) -> Vec<PathParams> {
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed);
    let per_path_std = (0.5 / cfg.num_paths as f64).sqrt();
    (0..cfg.num_paths)
        .map(|_| {
            let re: f64 = rng.sample(StandardNormal);
            let im: f64 = rng.sample(StandardNormal);
            let doppler_angle = rng.random_range(0.0..2.0 * PI);
            let delay_s = if cfg.max_delay > 0.0 {
                rng.random_range(0.0..cfg.max_delay)
            } else {
                0.0
            };
            let elevation = uniform(&mut rng, cfg.elevation);
            let azimuth = uniform(&mut rng, cfg.azimuth);
            PathParams {
                gain: Complex64::new(re * per_path_std, im * per_path_std),
                doppler_hz: cfg.max_doppler * doppler_angle.cos(),
                delay_s,
                elevation,
                azimuth,
            }
        })
        .collect()
}

fn uniform(rng: &mut ChaCha8Rng, r: AngleRange) -> f64 {
    if r.hi > r.lo {
        rng.random_range(r.lo..r.hi)
    } else {
        r.lo
    }
}

/// Evaluates the path sum on the `(T, K, N)` grid of `cfg`.
pub fn synthesize(cfg: &ChannelGenConfig, paths: &[PathParams]) -> CsiTensor {
    let (t_len, k_len, n_len) = (cfg.t, cfg.k, cfg.n());
    let mut acc = vec![Complex64::new(0.0, 0.0); t_len * k_len * n_len];
    for p in paths {
        let array: Vec<Complex64> = (0..cfg.n_v)
            .flat_map(|v| (0..cfg.n_h_ant).map(move |h| (v, h)))
            .map(|(v, h)| p.gain * steering(v, h, p.elevation, p.azimuth))
            .collect();
        for t in 0..t_len {
            for k in 0..k_len {
                let phase = 2.0
                    * PI
                    * (p.doppler_hz * t as f64 * cfg.delta_t - p.delay_s * k as f64 * cfg.delta_f);
                let rot = Complex64::from_polar(1.0, phase);
                let base = (t * k_len + k) * n_len;
                for (n, a) in array.iter().enumerate() {
                    acc[base + n] += rot * a;
                }
            }
        }
    }
    CsiTensor {
        t: t_len,
        k: k_len,
        n: n_len,
        data: acc
            .into_iter()
            .map(|z| Complex::new(z.re as f32, z.im as f32))
            .collect(),
    }
}

/// One synthetic sample; deterministic in `(cfg, sample_seed)`.
pub fn generate_channel(cfg: &ChannelGenConfig, sample_seed: u64) -> Result<CsiTensor> {
    cfg.validate()?;
    Ok(synthesize(cfg, &draw_paths(cfg, sample_seed)))
}

/// Scales `h` to unit average power. Returns the tensor and the divisor.
pub fn normalize(h: &CsiTensor) -> Result<(CsiTensor, f64)> {
    let energy = h.frobenius_sq();
    if !(energy > 0.0) {
        return Err(Error::DegenerateInput(
            "cannot normalize an all-zero tensor".into(),
        ));
    }
    let scale = (energy / h.len() as f64).sqrt();
    Ok((h.scaled(1.0 / scale), scale))
}

pub fn denormalize(h: &CsiTensor, scale: f64) -> CsiTensor {
    h.scaled(scale)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NormalizationMode {
    #[default]
    Global,
    PerSample,
    None,
}

/// Divisors applied at generation time. `Global` holds one entry,
/// `PerSample` one per sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mode: NormalizationMode,
    pub scales: Vec<f64>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    #[serde(default)]
    pub test: usize,
}

impl SplitCounts {
    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub dims: (usize, usize, usize),
    pub samples: Vec<CsiTensor>,
    pub splits: Vec<Split>,
    pub gen_config: Option<ChannelGenConfig>,
    pub seed: u64,
    pub normalization: Option<Normalization>,
    pub config_fingerprint: Option<String>,
}

impl Dataset {
    pub fn new(dims: (usize, usize, usize)) -> Self {
        Dataset {
            dims,
            samples: Vec::new(),
            splits: Vec::new(),
            gen_config: None,
            seed: 0,
            normalization: None,
            config_fingerprint: None,
        }
    }

    pub fn push(&mut self, sample: CsiTensor, split: Split) -> Result<()> {
        if sample.dims() != self.dims {
            return Err(Error::Contract(format!(
                "sample dims {:?} differ from dataset dims {:?}",
                sample.dims(),
                self.dims
            )));
        }
        self.samples.push(sample);
        self.splits.push(split);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        self.splits
            .iter()
            .enumerate()
            .filter(|(_, s)| **s == split)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn split(&self, split: Split) -> Vec<&CsiTensor> {
        self.indices(split).into_iter().map(|i| &self.samples[i]).collect()
    }
}

/// Generates `counts.total()` samples; sample `i` uses the `i`-th draw of a
/// ChaCha8 stream seeded with `cfg.seed` as its sample seed. Samples are
/// assigned train, then val, then test in order.
pub fn generate_dataset(
    cfg: &ChannelGenConfig,
    counts: SplitCounts,
    mode: NormalizationMode,
) -> Result<Dataset> {
    cfg.validate()?;
    let mut ds = Dataset::new((cfg.t, cfg.k, cfg.n()));
    ds.gen_config = Some(cfg.clone());
    ds.seed = cfg.seed;
    let tags = std::iter::repeat_n(Split::Train, counts.train)
        .chain(std::iter::repeat_n(Split::Val, counts.val))
        .chain(std::iter::repeat_n(Split::Test, counts.test));
    let mut seeds = ChaCha8Rng::seed_from_u64(cfg.seed);
    for split in tags {
        ds.push(generate_channel(cfg, seeds.next_u64())?, split)?;
    }
    normalize_dataset(&mut ds, mode)?;
    Ok(ds)
}

pub fn normalize_dataset(ds: &mut Dataset, mode: NormalizationMode) -> Result<()> {
    let scales = match mode {
        NormalizationMode::None => Vec::new(),
        NormalizationMode::PerSample => {
            let mut scales = Vec::with_capacity(ds.len());
            for s in &mut ds.samples {
                let (h, scale) = normalize(s)?;
                *s = h;
                scales.push(scale);
            }
            scales
        }
        NormalizationMode::Global => {
            if ds.is_empty() {
                vec![1.0]
            } else {
                let entries: usize = ds.samples.iter().map(|s| s.len()).sum();
                let energy: f64 = ds.samples.iter().map(|s| s.frobenius_sq()).sum();
                if !(energy > 0.0) {
                    return Err(Error::DegenerateInput("dataset has zero energy".into()));
                }
                let scale = (energy / entries as f64).sqrt();
                for s in &mut ds.samples {
                    *s = s.scaled(1.0 / scale);
                }
                vec![scale]
            }
        }
    };
    ds.normalization = Some(Normalization { mode, scales });
    Ok(())
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Sidecar {
    version: u32,
    #[serde(rename = "T")]
    t: usize,
    #[serde(rename = "K")]
    k: usize,
    #[serde(rename = "N")]
    n: usize,
    count: usize,
    splits: Vec<Split>,
    gen_config: Option<ChannelGenConfig>,
    seed: u64,
    #[serde(default)]
    normalization: Option<Normalization>,
    #[serde(default)]
    config_fingerprint: Option<String>,
}

/// `(payload, sidecar)` paths for a dataset stem such as `out/train`.
pub fn dataset_paths(path: impl AsRef<Path>) -> (PathBuf, PathBuf) {
    let p = path.as_ref();
    (p.with_extension("csi"), p.with_extension("json"))
}

pub fn save_dataset(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let (payload_path, sidecar_path) = dataset_paths(path);
    let (t, k, n) = ds.dims;
    let mut payload = Vec::with_capacity(ds.len() * t * k * n * 8);
    for s in &ds.samples {
        for z in s.data() {
            payload.extend_from_slice(&z.re.to_le_bytes());
            payload.extend_from_slice(&z.im.to_le_bytes());
        }
    }
    let sidecar = Sidecar {
        version: DATASET_FORMAT_VERSION,
        t,
        k,
        n,
        count: ds.len(),
        splits: ds.splits.clone(),
        gen_config: ds.gen_config.clone(),
        seed: ds.seed,
        normalization: ds.normalization.clone(),
        config_fingerprint: ds.config_fingerprint.clone(),
    };
    if let Some(parent) = payload_path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    fs::write(&payload_path, payload).map_err(|e| Error::io(&payload_path, e))?;
    let json = serde_json::to_string_pretty(&sidecar)?;
    fs::write(&sidecar_path, json).map_err(|e| Error::io(&sidecar_path, e))?;
    Ok(())
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let (payload_path, sidecar_path) = dataset_paths(path);
    let text = fs::read_to_string(&sidecar_path).map_err(|e| Error::io(&sidecar_path, e))?;
    let sidecar: Sidecar = serde_json::from_str(&text)
        .map_err(|e| Error::format(json_offset(&text, &e), format!("sidecar: {e}")))?;
    if sidecar.version != DATASET_FORMAT_VERSION {
        return Err(Error::format(
            0,
            format!(
                "sidecar version {} unsupported (expected {DATASET_FORMAT_VERSION})",
                sidecar.version
            ),
        ));
    }
    if sidecar.splits.len() != sidecar.count {
        return Err(Error::format(
            0,
            format!(
                "sidecar lists {} split tags for {} samples",
                sidecar.splits.len(),
                sidecar.count
            ),
        ));
    }
    if let Some(cfg) = &sidecar.gen_config {
        if (cfg.t, cfg.k, cfg.n()) != (sidecar.t, sidecar.k, sidecar.n) {
            return Err(Error::format(
                0,
                format!(
                    "dims {}x{}x{} disagree with generator dims {}x{}x{}",
                    sidecar.t,
                    sidecar.k,
                    sidecar.n,
                    cfg.t,
                    cfg.k,
                    cfg.n()
                ),
            ));
        }
    }
    let payload = fs::read(&payload_path).map_err(|e| Error::io(&payload_path, e))?;
    let per_sample = sidecar.t * sidecar.k * sidecar.n;
    let expected = sidecar.count * per_sample * 8;
    if payload.len() < expected {
        return Err(Error::format(
            payload.len() as u64,
            format!("payload truncated: {} of {expected} bytes", payload.len()),
        ));
    }
    if payload.len() > expected {
        return Err(Error::format(
            expected as u64,
            format!(
                "payload has {} trailing bytes beyond {} samples",
                payload.len() - expected,
                sidecar.count
            ),
        ));
    }
    let mut ds = Dataset::new((sidecar.t, sidecar.k, sidecar.n));
    for (i, chunk) in payload.chunks_exact(per_sample * 8).enumerate() {
        let data: Vec<Complex32> = chunk
            .chunks_exact(8)
            .map(|c| {
                Complex32::new(
                    f32::from_le_bytes(c[0..4].try_into().unwrap()),
                    f32::from_le_bytes(c[4..8].try_into().unwrap()),
                )
            })
            .collect();
        let tensor = CsiTensor::from_vec(sidecar.t, sidecar.k, sidecar.n, data).map_err(|e| {
            Error::format((i * per_sample * 8) as u64, format!("sample {i}: {e}"))
        })?;
        ds.push(tensor, sidecar.splits[i])?;
    }
    ds.gen_config = sidecar.gen_config;
    ds.seed = sidecar.seed;
    ds.normalization = sidecar.normalization;
    ds.config_fingerprint = sidecar.config_fingerprint;
    Ok(ds)
}

fn json_offset(text: &str, e: &serde_json::Error) -> u64 {
    let line = e.line().max(1);
    let before: usize = text.split_inclusive('\n').take(line - 1).map(str::len).sum();
    (before + e.column().saturating_sub(1)) as u64
}
