//! Spatio-temporal maps and the positive/negative augmentations.
//!
//! A map is `F x F x 3`: row `r` is ROI `r / (F / A)` (rows replicated), column
//! `t` is frame `t`, values are min-max normalised per channel.

use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::synthgen::SourceClip;

/// Exact positive rational frequency multiplier.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Ratio {
    num: u32,
    den: u32,
}

fn gcd(a: u32, b: u32) -> u32 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

impl Ratio {
    pub const ONE: Ratio = Ratio { num: 1, den: 1 };

    pub fn new(num: u32, den: u32) -> Result<Ratio> {
        if num == 0 || den == 0 {
            return invalid(format!("ratio {num}/{den} must be positive"));
        }
        let g = gcd(num, den);
        Ok(Ratio { num: num / g, den: den / g })
    }

    pub fn num(self) -> u32 {
        self.num
    }

    pub fn den(self) -> u32 {
        self.den
    }

    pub fn value(self) -> f64 {
        self.num as f64 / self.den as f64
    }

    /// Canonical literal: `"3/4"`, or `"2"` for integers.
    pub fn literal(self) -> String {
        if self.den == 1 {
            self.num.to_string()
        } else {
            format!("{}/{}", self.num, self.den)
        }
    }
}

impl Ord for Ratio {
    /// By value (fractions are kept reduced, so this agrees with `Eq`).
    fn cmp(&self, other: &Ratio) -> std::cmp::Ordering {
        (self.num as u64 * other.den as u64).cmp(&(other.num as u64 * self.den as u64))
    }
}

impl PartialOrd for Ratio {
    fn partial_cmp(&self, other: &Ratio) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Display for Ratio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.literal())
    }
}

impl FromStr for Ratio {
    type Err = Error;

    fn from_str(s: &str) -> Result<Ratio> {
        let bad = || Error::Invalid(format!("cannot parse ratio {s:?}"));
        match s.trim().split_once('/') {
            Some((n, d)) => Ratio::new(n.trim().parse().map_err(|_| bad())?, d.trim().parse().map_err(|_| bad())?),
            None => Ratio::new(s.trim().parse().map_err(|_| bad())?, 1),
        }
    }
}

impl Serialize for Ratio {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.literal())
    }
}

impl<'de> Deserialize<'de> for Ratio {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Ratio, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// `{1/4, 1/2, 3/4, 5/4, 3/2, 7/4, 2}`.
pub fn default_ratio_bin() -> Vec<Ratio> {
    [(1, 4), (1, 2), (3, 4), (5, 4), (3, 2), (7, 4), (2, 1)]
        .iter()
        .map(|&(n, d)| Ratio::new(n, d).unwrap())
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct StMap {
    /// `pixels[(row * size + col) * 3 + c]`
    pub pixels: Vec<f64>,
    pub size: usize,
    pub rois: usize,
    pub fs: f64,
    pub f_mult: Ratio,
}

impl StMap {
    #[inline]
    pub fn at(&self, row: usize, col: usize, c: usize) -> f64 {
        self.pixels[(row * self.size + col) * 3 + c]
    }

    pub fn rows_per_roi(&self) -> usize {
        self.size / self.rois
    }

    /// Channel `c` of map row `row` as a time series.
    pub fn row(&self, row: usize, c: usize) -> Vec<f64> {
        (0..self.size).map(|t| self.at(row, t, c)).collect()
    }
}

/// Resizes `rois x f x 3` traces to an `f x f x 3` map by row replication and
/// normalises each channel to `[0, 1]` (a constant channel maps to 0.5).
fn to_map(crop: &[f64], rois: usize, f: usize, fs: f64, f_mult: Ratio) -> Result<StMap> {
    if f == 0 || f % rois != 0 {
        return invalid(format!("map size {f} is not a multiple of the ROI count {rois}"));
    }
    let rep = f / rois;
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for (i, &v) in crop.iter().enumerate() {
        if !v.is_finite() {
            return invalid("non-finite value in source traces");
        }
        lo[i % 3] = lo[i % 3].min(v);
        hi[i % 3] = hi[i % 3].max(v);
    }
    let mut pixels = vec![0.0; f * f * 3];
    for row in 0..f {
        let roi = row / rep;
        for t in 0..f {
            for c in 0..3 {
                let v = crop[(roi * f + t) * 3 + c];
                let span = hi[c] - lo[c];
                pixels[(row * f + t) * 3 + c] = if span > 1e-12 { (v - lo[c]) / span } else { 0.5 };
            }
        }
    }
    Ok(StMap { pixels, size: f, rois, fs, f_mult })
}

/// Map of frames `[start, start + f)` of `clip`.
pub fn build_stmap(clip: &SourceClip, start: usize, f: usize) -> Result<StMap> {
    if start + f > clip.n_frames {
        return invalid(format!("crop [{start}, {}) exceeds clip length {}", start + f, clip.n_frames));
    }
    let mut crop = Vec::with_capacity(clip.rois * f * 3);
    for roi in 0..clip.rois {
        let base = (roi * clip.n_frames + start) * 3;
        crop.extend_from_slice(&clip.traces[base..base + f * 3]);
    }
    to_map(&crop, clip.rois, f, clip.fs, Ratio::ONE)
}

/// Centre crop used at evaluation time.
pub fn central_stmap(clip: &SourceClip, f: usize) -> Result<StMap> {
    if f > clip.n_frames {
        return invalid(format!("map size {f} exceeds clip length {}", clip.n_frames));
    }
    build_stmap(clip, (clip.n_frames - f) / 2, f)
}

/// Symmetries of the square ROI grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpatialOp {
    Rot90,
    Rot180,
    Rot270,
    Hflip,
    Vflip,
}

impl SpatialOp {
    pub const ALL: [SpatialOp; 5] =
        [SpatialOp::Rot90, SpatialOp::Rot180, SpatialOp::Rot270, SpatialOp::Hflip, SpatialOp::Vflip];

    /// `perm[i]` is the source ROI moved to grid cell `i` (row-major, side `g`).
    pub fn permutation(self, g: usize) -> Vec<usize> {
        let mut perm = Vec::with_capacity(g * g);
        for i in 0..g {
            for j in 0..g {
                let (si, sj) = match self {
                    SpatialOp::Rot90 => (j, g - 1 - i),
                    SpatialOp::Rot180 => (g - 1 - i, g - 1 - j),
                    SpatialOp::Rot270 => (g - 1 - j, i),
                    SpatialOp::Hflip => (i, g - 1 - j),
                    SpatialOp::Vflip => (g - 1 - i, j),
                };
                perm.push(si * g + sj);
            }
        }
        perm
    }
}

impl FromStr for SpatialOp {
    type Err = Error;

    fn from_str(s: &str) -> Result<SpatialOp> {
        match s {
            "rot90" => Ok(SpatialOp::Rot90),
            "rot180" => Ok(SpatialOp::Rot180),
            "rot270" => Ok(SpatialOp::Rot270),
            "hflip" => Ok(SpatialOp::Hflip),
            "vflip" => Ok(SpatialOp::Vflip),
            _ => invalid(format!("unknown spatial op {s:?}")),
        }
    }
}

/// Applies a grid symmetry to the ROI bands of a map.
pub fn spatial_augment(m: &StMap, op: SpatialOp) -> Result<StMap> {
    let g = crate::synthgen::grid_side(m.rois)
        .ok_or_else(|| Error::Invalid(format!("{} ROIs do not form a square grid", m.rois)))?;
    let perm = op.permutation(g);
    let band = m.rows_per_roi() * m.size * 3;
    let mut pixels = Vec::with_capacity(m.pixels.len());
    for &src in &perm {
        pixels.extend_from_slice(&m.pixels[src * band..(src + 1) * band]);
    }
    Ok(StMap { pixels, ..m.clone() })
}

/// Largest admissible start index for resampling `f` frames at ratio `r`.
pub fn max_resample_start(n_frames: usize, r: Ratio, f: usize) -> Option<usize> {
    let span = r.value() * (f.saturating_sub(1)) as f64;
    let room = (n_frames as f64 - 1.0) - span;
    (room >= -1e-12).then(|| room.max(0.0).floor() as usize)
}

/// Resamples frames at `t_i = start + r i` by linear interpolation, changing
/// the pulse frequency by `r`.
pub fn freq_augment_at(clip: &SourceClip, r: Ratio, f: usize, start: usize) -> Result<StMap> {
    if r == Ratio::ONE {
        return invalid("frequency ratio 1 does not produce a negative");
    }
    if r.value() * clip.f0 >= clip.fs / 2.0 {
        return invalid(format!("ratio {r} moves {} Hz above Nyquist ({} Hz)", clip.f0, clip.fs / 2.0));
    }
    match max_resample_start(clip.n_frames, r, f) {
        None => {
            return invalid(format!("clip of {} frames too short for {f} frames at ratio {r}", clip.n_frames));
        }
        Some(m) if start > m => return invalid(format!("start {start} exceeds {m} for ratio {r}")),
        _ => {}
    }
    let mut crop = Vec::with_capacity(clip.rois * f * 3);
    for roi in 0..clip.rois {
        for i in 0..f {
            let t = start as f64 + r.value() * i as f64;
            let t0 = (t.floor() as usize).min(clip.n_frames - 1);
            let t1 = (t0 + 1).min(clip.n_frames - 1);
            let w = t - t0 as f64;
            for c in 0..3 {
                crop.push((1.0 - w) * clip.at(roi, t0, c) + w * clip.at(roi, t1, c));
            }
        }
    }
    to_map(&crop, clip.rois, f, clip.fs, r)
}

/// [`freq_augment_at`] with a uniformly drawn start index.
pub fn freq_augment<R: Rng + ?Sized>(clip: &SourceClip, r: Ratio, f: usize, rng: &mut R) -> Result<StMap> {
    let hi = max_resample_start(clip.n_frames, r, f)
        .ok_or_else(|| Error::Invalid(format!("clip of {} frames too short for ratio {r}", clip.n_frames)))?;
    freq_augment_at(clip, r, f, rng.random_range(0..=hi))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugSpec {
    pub ratio_bin: Vec<Ratio>,
    pub k_neg: usize,
    pub n_pos: usize,
    pub spatial_ops: Vec<SpatialOp>,
}

impl Default for AugSpec {
    fn default() -> Self {
        AugSpec { ratio_bin: default_ratio_bin(), k_neg: 3, n_pos: 2, spatial_ops: SpatialOp::ALL.to_vec() }
    }
}

impl AugSpec {
    pub fn validate(&self) -> Result<()> {
        if self.ratio_bin.contains(&Ratio::ONE) {
            return invalid("ratio bin must not contain 1");
        }
        let mut sorted = self.ratio_bin.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != self.ratio_bin.len() {
            return invalid("ratio bin has duplicates");
        }
        if self.k_neg == 0 || self.k_neg > self.ratio_bin.len() {
            return invalid(format!("k_neg {} must lie in [1, {}]", self.k_neg, self.ratio_bin.len()));
        }
        if self.n_pos != 2 {
            return invalid(format!("n_pos must be 2, got {}", self.n_pos));
        }
        if self.spatial_ops.len() < self.n_pos {
            return invalid("fewer spatial ops than positives");
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct AugmentedSet {
    pub positives: Vec<StMap>,
    pub negatives: Vec<StMap>,
    pub ratios: Vec<Ratio>,
    /// First frame of the crop shared by the positives.
    pub pos_start: usize,
    pub ops: Vec<SpatialOp>,
}

/// Two positives from one crop under distinct grid symmetries and `k`
/// negatives at distinct ratios drawn without replacement.
pub fn make_augmented_set<R: Rng + ?Sized>(clip: &SourceClip, aug: &AugSpec, f: usize, rng: &mut R) -> Result<AugmentedSet> {
    aug.validate()?;
    if f > clip.n_frames {
        return invalid(format!("map size {f} exceeds clip length {}", clip.n_frames));
    }
    let pos_start = rng.random_range(0..=clip.n_frames - f);
    let base = build_stmap(clip, pos_start, f)?;
    let ops: Vec<SpatialOp> =
        index::sample(rng, aug.spatial_ops.len(), aug.n_pos).into_iter().map(|i| aug.spatial_ops[i]).collect();
    let positives = ops.iter().map(|&op| spatial_augment(&base, op)).collect::<Result<Vec<_>>>()?;
    let ratios: Vec<Ratio> =
        index::sample(rng, aug.ratio_bin.len(), aug.k_neg).into_iter().map(|i| aug.ratio_bin[i]).collect();
    let negatives = ratios.iter().map(|&r| freq_augment(clip, r, f, rng)).collect::<Result<Vec<_>>>()?;
    Ok(AugmentedSet { positives, negatives, ratios, pos_start, ops })
}
