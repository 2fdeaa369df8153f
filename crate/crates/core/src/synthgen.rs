//! Synthetic pulse-bearing ROI traces and the on-disk dataset format.
//!
//! A dataset directory holds `manifest.json` plus two binary files per
//! sample: the ROI traces (`<id>.stmp`, dims `A x L x 3`) and the noise-free
//! reference pulse (`<id>.ppg.stmp`, dims `1 x L x 1`). Both use the same
//! layout: the bytes `STMP`, a `u32` format version, three `u32` dims, then
//! row-major `f32` values, all little-endian.

use std::collections::HashSet;
use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, IoContext, Result};
use crate::physio::SignalTrace;

pub const MAGIC: &[u8; 4] = b"STMP";
pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.json";

/// Channel weights of the pulse in R, G, B.
pub const CHANNEL_WEIGHTS: [f64; 3] = [0.4, 1.0, 0.6];
const BASELINE: [f64; 3] = [0.62, 0.45, 0.36];
const PHASE_JITTER: f64 = 0.2;
const AMP_RANGE: (f64, f64) = (0.8, 1.2);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WaveSpec {
    pub f0: f64,
    pub harmonic_amps: Vec<f64>,
    pub fs: f64,
    pub n_frames: usize,
    pub noise_sigma: f64,
    pub drift_amp: f64,
    pub drift_freq: f64,
    pub seed: u64,
}

impl WaveSpec {
    /// Noise-free single-harmonic wave, mostly for tests.
    pub fn clean(f0: f64, fs: f64, n_frames: usize) -> Self {
        WaveSpec {
            f0,
            harmonic_amps: vec![1.0],
            fs,
            n_frames,
            noise_sigma: 0.0,
            drift_amp: 0.0,
            drift_freq: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fs > 0.0) {
            return invalid(format!("fs must be positive, got {}", self.fs));
        }
        if self.n_frames == 0 {
            return invalid("n_frames must be positive");
        }
        if self.harmonic_amps.is_empty() {
            return invalid("harmonic_amps is empty");
        }
        if !(0.75..=4.0).contains(&self.f0) {
            return invalid(format!("f0 {} Hz outside [0.75, 4]", self.f0));
        }
        let top = self.f0 * self.harmonic_amps.len() as f64;
        if self.fs <= 2.0 * top {
            return invalid(format!("fs {} Hz does not resolve harmonic at {top} Hz", self.fs));
        }
        if self.noise_sigma < 0.0 || !self.noise_sigma.is_finite() {
            return invalid("noise_sigma must be a finite non-negative number");
        }
        Ok(())
    }
}

/// `sum_h a_h sin(2 pi (h+1) f0 t + phase) + drift + noise`, sampled at `fs`.
pub fn gen_wave(spec: &WaveSpec, phase: f64) -> Result<SignalTrace> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::Invalid(e.to_string()))?;
    let samples = (0..spec.n_frames)
        .map(|i| {
            let t = i as f64 / spec.fs;
            let mut s: f64 = spec
                .harmonic_amps
                .iter()
                .enumerate()
                .map(|(h, a)| a * (2.0 * PI * (h + 1) as f64 * spec.f0 * t + phase).sin())
                .sum();
            s += spec.drift_amp * (2.0 * PI * spec.drift_freq * t).sin();
            if spec.noise_sigma > 0.0 {
                s += noise.sample(&mut rng);
            }
            s
        })
        .collect();
    Ok(SignalTrace::new(samples, spec.fs))
}

/// ROI colour traces, `traces[(roi * n_frames + t) * 3 + c]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SourceClip {
    pub traces: Vec<f64>,
    pub rois: usize,
    pub n_frames: usize,
    pub f0: f64,
    pub fs: f64,
}

impl SourceClip {
    pub fn grid(&self) -> usize {
        grid_side(self.rois).expect("roi count is a perfect square")
    }

    #[inline]
    pub fn at(&self, roi: usize, t: usize, c: usize) -> f64 {
        self.traces[(roi * self.n_frames + t) * 3 + c]
    }

    /// Channel `c` of one ROI as a time series.
    pub fn row(&self, roi: usize, c: usize) -> Vec<f64> {
        (0..self.n_frames).map(|t| self.at(roi, t, c)).collect()
    }

    /// Reorders ROIs so that new ROI `i` is old ROI `perm[i]`.
    pub fn permute_rois(&self, perm: &[usize]) -> SourceClip {
        assert_eq!(perm.len(), self.rois);
        let stride = self.n_frames * 3;
        let mut traces = Vec::with_capacity(self.traces.len());
        for &src in perm {
            traces.extend_from_slice(&self.traces[src * stride..(src + 1) * stride]);
        }
        SourceClip { traces, ..self.clone() }
    }
}

pub fn grid_side(a: usize) -> Option<usize> {
    let g = (a as f64).sqrt().round() as usize;
    (g >= 2 && g * g == a).then_some(g)
}

/// One clip of `a` ROIs: a baseline colour plus a channel-weighted wave with
/// per-ROI phase jitter, amplitude and noise realisation.
pub fn gen_source_clip<R: Rng + ?Sized>(spec: &WaveSpec, a: usize, rng: &mut R) -> Result<SourceClip> {
    if grid_side(a).is_none() {
        return invalid(format!("ROI count {a} is not a square of an integer >= 2"));
    }
    spec.validate()?;
    let l = spec.n_frames;
    let mut traces = vec![0.0; a * l * 3];
    for roi in 0..a {
        let phase = rng.random_range(-PHASE_JITTER..=PHASE_JITTER);
        let amp = rng.random_range(AMP_RANGE.0..=AMP_RANGE.1);
        let wave = gen_wave(&WaveSpec { seed: rng.next_u64(), ..spec.clone() }, phase)?;
        for (t, &s) in wave.samples.iter().enumerate() {
            for c in 0..3 {
                traces[(roi * l + t) * 3 + c] = BASELINE[c] + CHANNEL_WEIGHTS[c] * amp * s;
            }
        }
    }
    Ok(SourceClip { traces, rois: a, n_frames: l, f0: spec.f0, fs: spec.fs })
}

/// Noise-free, drift-free pulse at zero phase: the reference signal.
pub fn reference_pulse(spec: &WaveSpec) -> Result<SignalTrace> {
    gen_wave(&WaveSpec { noise_sigma: 0.0, drift_amp: 0.0, ..spec.clone() }, 0.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub n_samples: usize,
    pub test_fraction: f64,
    pub f0_min: f64,
    pub f0_max: f64,
    pub fs: f64,
    pub n_frames: usize,
    pub rois: usize,
    pub harmonic_amps: Vec<f64>,
    pub noise_sigma: f64,
    pub drift_amp: f64,
    pub drift_freq: f64,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            n_samples: 320,
            test_fraction: 0.2,
            f0_min: 0.8,
            f0_max: 3.0,
            fs: 30.0,
            n_frames: 128,
            rois: 16,
            harmonic_amps: vec![1.0, 0.3],
            noise_sigma: 0.05,
            drift_amp: 0.1,
            drift_freq: 0.1,
            seed: 0,
        }
    }
}

impl DatasetConfig {
    pub fn n_test(&self) -> usize {
        (self.n_samples as f64 * self.test_fraction).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_samples == 0 {
            return invalid("n_samples must be positive");
        }
        if !(0.0..=1.0).contains(&self.test_fraction) {
            return invalid("test_fraction must lie in [0, 1]");
        }
        if !(self.f0_min <= self.f0_max) {
            return invalid("f0_min exceeds f0_max");
        }
        if grid_side(self.rois).is_none() {
            return invalid(format!("rois {} is not a perfect square >= 4", self.rois));
        }
        for f0 in [self.f0_min, self.f0_max] {
            self.wave(f0, 0).validate()?;
        }
        Ok(())
    }

    fn wave(&self, f0: f64, seed: u64) -> WaveSpec {
        WaveSpec {
            f0,
            harmonic_amps: self.harmonic_amps.clone(),
            fs: self.fs,
            n_frames: self.n_frames,
            noise_sigma: self.noise_sigma,
            drift_amp: self.drift_amp,
            drift_freq: self.drift_freq,
            seed,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleEntry {
    pub id: String,
    pub file: String,
    pub ppg_file: String,
    pub f0: f64,
    pub fs: f64,
    pub rois: usize,
    pub n_frames: usize,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub samples: Vec<SampleEntry>,
    pub generator: DatasetConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub entry: SampleEntry,
    pub clip: SourceClip,
    pub ppg: SignalTrace,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> Vec<&Sample> {
        self.samples.iter().filter(|s| s.entry.split == split).collect()
    }
}

fn round_f32(v: Vec<f64>) -> Vec<f64> {
    v.into_iter().map(|x| x as f32 as f64).collect()
}

/// Generates every sample in memory. Values are rounded to `f32` so that the
/// written files reproduce them exactly.
pub fn gen_dataset(cfg: &DatasetConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = cfg.n_samples;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let test: HashSet<usize> = order[..cfg.n_test()].iter().copied().collect();
    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        let f0 = if cfg.f0_min == cfg.f0_max { cfg.f0_min } else { rng.random_range(cfg.f0_min..cfg.f0_max) };
        let mut clip_rng = ChaCha8Rng::seed_from_u64(rng.next_u64());
        let spec = cfg.wave(f0, clip_rng.next_u64());
        let mut clip = gen_source_clip(&spec, cfg.rois, &mut clip_rng)?;
        clip.traces = round_f32(clip.traces);
        let mut ppg = reference_pulse(&spec)?;
        ppg.samples = round_f32(ppg.samples);
        let id = format!("s{i:04}");
        let entry = SampleEntry {
            file: format!("{id}.stmp"),
            ppg_file: format!("{id}.ppg.stmp"),
            id,
            f0,
            fs: cfg.fs,
            rois: cfg.rois,
            n_frames: cfg.n_frames,
            split: if test.contains(&i) { Split::Test } else { Split::Train },
        };
        samples.push(Sample { entry, clip, ppg });
    }
    let manifest = DatasetManifest {
        version: FORMAT_VERSION,
        samples: samples.iter().map(|s| s.entry.clone()).collect(),
        generator: cfg.clone(),
    };
    Ok(Dataset { manifest, samples })
}

/// Writes an array file in the `STMP` layout.
pub fn write_array(path: &Path, dims: [usize; 3], data: &[f64]) -> Result<()> {
    assert_eq!(dims.iter().product::<usize>(), data.len());
    let mut buf = Vec::with_capacity(20 + 4 * data.len());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    for d in dims {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in data {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, buf).at(path)
}

/// Reads an `STMP` array file, returning its dims and values.
pub fn read_array(path: &Path) -> Result<([usize; 3], Vec<f64>)> {
    let bytes = fs::read(path).at(path)?;
    let bad = |msg: String| Error::Format { path: path.to_path_buf(), msg };
    if bytes.len() < 20 || &bytes[..4] != MAGIC {
        return Err(bad("missing STMP header".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
    let version = word(0);
    if version != FORMAT_VERSION {
        return Err(bad(format!("unsupported format version {version}")));
    }
    let dims = [word(1) as usize, word(2) as usize, word(3) as usize];
    let n: usize = dims.iter().product();
    if bytes.len() != 20 + 4 * n {
        return Err(bad(format!("header dims {dims:?} need {} data bytes, file has {}", 4 * n, bytes.len() - 20)));
    }
    let data = bytes[20..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect();
    Ok((dims, data))
}

/// Writes `ds` under `dir`. An existing non-empty directory is refused
/// unless `force` is set.
pub fn write_dataset(dir: &Path, ds: &Dataset, force: bool) -> Result<()> {
    if dir.exists() && fs::read_dir(dir).at(dir)?.next().is_some() && !force {
        return Err(Error::Exists { path: dir.to_path_buf() });
    }
    fs::create_dir_all(dir).at(dir)?;
    for s in &ds.samples {
        let e = &s.entry;
        write_array(&dir.join(&e.file), [e.rois, e.n_frames, 3], &s.clip.traces)?;
        write_array(&dir.join(&e.ppg_file), [1, e.n_frames, 1], &s.ppg.samples)?;
    }
    let path = dir.join(MANIFEST);
    fs::write(&path, serde_json::to_vec_pretty(&ds.manifest)?).at(&path)
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).at(&path)?;
    let m: DatasetManifest =
        serde_json::from_str(&text).map_err(|e| Error::Format { path: path.clone(), msg: e.to_string() })?;
    if m.version != FORMAT_VERSION {
        return Err(Error::Format { path, msg: format!("unsupported manifest version {}", m.version) });
    }
    let mut seen = HashSet::new();
    for s in &m.samples {
        if !seen.insert(&s.id) {
            return Err(Error::Format { path, msg: format!("duplicate sample id {}", s.id) });
        }
    }
    Ok(m)
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let manifest = read_manifest(dir)?;
    let mut samples = Vec::with_capacity(manifest.samples.len());
    for e in &manifest.samples {
        let path: PathBuf = dir.join(&e.file);
        let (dims, traces) = read_array(&path)?;
        if dims != [e.rois, e.n_frames, 3] {
            return Err(Error::Format {
                path,
                msg: format!("dims {dims:?} disagree with manifest ({}, {}, 3)", e.rois, e.n_frames),
            });
        }
        let ppg_path = dir.join(&e.ppg_file);
        let (pdims, ppg) = read_array(&ppg_path)?;
        if pdims != [1, e.n_frames, 1] {
            return Err(Error::Format { path: ppg_path, msg: format!("dims {pdims:?} disagree with manifest") });
        }
        samples.push(Sample {
            entry: e.clone(),
            clip: SourceClip { traces, rois: e.rois, n_frames: e.n_frames, f0: e.f0, fs: e.fs },
            ppg: SignalTrace::new(ppg, e.fs),
        });
    }
    Ok(Dataset { manifest, samples })
}
