//! Heart rate, beat detection, HRV/respiration features and error metrics.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::spectrum::{band_bins, fft_len, peak_frequency, power_spectrum, HR_BAND};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignalTrace {
    pub samples: Vec<f64>,
    pub fs: f64,
}

impl SignalTrace {
    pub fn new(samples: Vec<f64>, fs: f64) -> Self {
        SignalTrace { samples, fs }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.fs
    }

    fn check(&self, min_len: usize) -> Result<()> {
        if !(self.fs > 0.0) {
            return invalid(format!("sampling rate must be positive, got {}", self.fs));
        }
        if self.samples.len() < min_len {
            return invalid(format!("signal has {} samples, need at least {min_len}", self.samples.len()));
        }
        if self.samples.iter().any(|v| !v.is_finite()) {
            return invalid("signal contains non-finite samples");
        }
        Ok(())
    }
}

pub const MIN_HR_SAMPLES: usize = 32;
pub const HR_FFT_LEN: usize = 4096;

/// Heart rate in BPM from the interpolated spectral peak inside 0.75-4 Hz.
pub fn estimate_hr(y: &SignalTrace) -> Result<f64> {
    y.check(MIN_HR_SAMPLES)?;
    peak_frequency(&y.samples, y.fs, HR_BAND, HR_FFT_LEN)
        .map(|f| 60.0 * f)
        .ok_or_else(|| Error::Invalid("signal has no spectral peak in the heart-rate band".into()))
}

/// Second-order section, direct form I.
#[derive(Clone, Copy, Debug)]
struct Biquad {
    b: [f64; 3],
    a: [f64; 2],
}

impl Biquad {
    // Butterworth (Q = 1/sqrt 2) sections via the bilinear transform.
    fn butter(fc: f64, fs: f64, highpass: bool) -> Biquad {
        let w0 = 2.0 * std::f64::consts::PI * fc / fs;
        let (s, c) = w0.sin_cos();
        let alpha = s / std::f64::consts::SQRT_2;
        let a0 = 1.0 + alpha;
        let b = if highpass {
            [(1.0 + c) / 2.0, -(1.0 + c), (1.0 + c) / 2.0]
        } else {
            [(1.0 - c) / 2.0, 1.0 - c, (1.0 - c) / 2.0]
        };
        Biquad { b: [b[0] / a0, b[1] / a0, b[2] / a0], a: [-2.0 * c / a0, (1.0 - alpha) / a0] }
    }

    fn run(&self, x: &[f64]) -> Vec<f64> {
        let (mut x1, mut x2, mut y1, mut y2) = (0.0, 0.0, 0.0, 0.0);
        // start from the steady state of the first sample to limit the transient
        if let Some(&x0) = x.first() {
            let gain = (self.b[0] + self.b[1] + self.b[2]) / (1.0 + self.a[0] + self.a[1]);
            x1 = x0;
            x2 = x0;
            y1 = gain * x0;
            y2 = gain * x0;
        }
        x.iter()
            .map(|&v| {
                let y = self.b[0] * v + self.b[1] * x1 + self.b[2] * x2 - self.a[0] * y1 - self.a[1] * y2;
                x2 = x1;
                x1 = v;
                y2 = y1;
                y1 = y;
                y
            })
            .collect()
    }
}

/// Zero-phase 0.75-4 Hz band-pass (forward-backward, odd-extended edges).
pub fn bandpass(y: &SignalTrace) -> Result<Vec<f64>> {
    y.check(8)?;
    if HR_BAND.1 >= y.fs / 2.0 {
        return invalid(format!("sampling rate {} Hz too low for the 4 Hz band edge", y.fs));
    }
    let x = &y.samples;
    let n = x.len();
    let pad = (3 * 6).min(n - 1);
    let mut ext = Vec::with_capacity(n + 2 * pad);
    ext.extend((1..=pad).rev().map(|i| 2.0 * x[0] - x[i]));
    ext.extend_from_slice(x);
    ext.extend((1..=pad).map(|i| 2.0 * x[n - 1] - x[n - 1 - i]));
    let sections = [Biquad::butter(HR_BAND.0, y.fs, true), Biquad::butter(HR_BAND.1, y.fs, false)];
    let mut v = ext;
    for _ in 0..2 {
        for s in &sections {
            v = s.run(&v);
        }
        v.reverse();
    }
    Ok(v[pad..pad + n].to_vec())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Peak {
    pub index: usize,
    /// Sub-sample position from a parabola through the peak and its neighbours.
    pub position: f64,
}

const PEAK_WINDOW_S: f64 = 1.0;
const PEAK_MIN_SEP_S: f64 = 0.25;

/// Local maxima of the band-passed signal above a rolling `mean + 0.5 std`
/// threshold, at least 0.25 s apart.
pub fn detect_peaks(y: &SignalTrace) -> Result<Vec<Peak>> {
    let x = bandpass(y)?;
    let n = x.len();
    let half = ((PEAK_WINDOW_S * y.fs / 2.0).round() as usize).max(1);
    // prefix sums for the rolling statistics
    let mut s1 = vec![0.0; n + 1];
    let mut s2 = vec![0.0; n + 1];
    for i in 0..n {
        s1[i + 1] = s1[i] + x[i];
        s2[i + 1] = s2[i] + x[i] * x[i];
    }
    let mut cands: Vec<usize> = Vec::new();
    for i in 1..n.saturating_sub(1) {
        if !(x[i] > x[i - 1] && x[i] >= x[i + 1]) {
            continue;
        }
        let (lo, hi) = (i.saturating_sub(half), (i + half + 1).min(n));
        let m = (hi - lo) as f64;
        let mean = (s1[hi] - s1[lo]) / m;
        let var = ((s2[hi] - s2[lo]) / m - mean * mean).max(0.0);
        if x[i] > mean + 0.5 * var.sqrt() {
            cands.push(i);
        }
    }
    let min_sep = PEAK_MIN_SEP_S * y.fs;
    let mut by_height = cands.clone();
    by_height.sort_by(|&a, &b| x[b].total_cmp(&x[a]).then(a.cmp(&b)));
    let mut kept: Vec<usize> = Vec::new();
    for i in by_height {
        if kept.iter().all(|&k| (k as f64 - i as f64).abs() >= min_sep) {
            kept.push(i);
        }
    }
    kept.sort_unstable();
    let peaks: Vec<Peak> = kept
        .into_iter()
        .map(|i| {
            let (a, b, c) = (x[i - 1], x[i], x[i + 1]);
            let den = a - 2.0 * b + c;
            let shift = if den < 0.0 { (0.5 * (a - c) / den).clamp(-0.5, 0.5) } else { 0.0 };
            Peak { index: i, position: i as f64 + shift }
        })
        .collect();
    if peaks.len() < 2 {
        return invalid(format!("found {} peak(s), need at least 2", peaks.len()));
    }
    Ok(peaks)
}

/// Successive peak gaps in seconds.
pub fn ibi_series(peaks: &[Peak], fs: f64) -> Result<Vec<f64>> {
    if peaks.len() < 2 {
        return invalid("need at least 2 peaks for an inter-beat interval");
    }
    Ok(peaks.windows(2).map(|w| (w[1].position - w[0].position) / fs).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HrvFeatures {
    pub lf_nu: f64,
    pub hf_nu: f64,
    pub lf_hf: f64,
}

pub const TACHO_FS: f64 = 4.0;
pub const LF_BAND: (f64, f64) = (0.04, 0.15);
pub const HF_BAND: (f64, f64) = (0.15, 0.4);
pub const RF_BAND: (f64, f64) = (0.1, 0.5);
pub const MIN_HRV_SECONDS: f64 = 30.0;

/// Tachogram spectrum: `(frequency step, Welch PSD)`.
fn tachogram_psd(ibi: &[f64]) -> Result<(f64, Vec<f64>)> {
    if ibi.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
        return invalid("inter-beat intervals must be positive and finite");
    }
    let total: f64 = ibi.iter().sum();
    if ibi.len() < 3 || total < MIN_HRV_SECONDS {
        return invalid(format!("{total:.1} s of beats, need at least {MIN_HRV_SECONDS} s"));
    }
    // beat i ends at the cumulative time; value is its interval
    let mut times = Vec::with_capacity(ibi.len());
    let mut t = 0.0;
    for &v in ibi {
        t += v;
        times.push(t);
    }
    let n = ((times[times.len() - 1] - times[0]) * TACHO_FS).floor() as usize + 1;
    let mut series = Vec::with_capacity(n);
    let mut j = 0;
    for i in 0..n {
        let ti = times[0] + i as f64 / TACHO_FS;
        while j + 2 < times.len() && times[j + 1] < ti {
            j += 1;
        }
        let w = ((ti - times[j]) / (times[j + 1] - times[j])).clamp(0.0, 1.0);
        series.push(ibi[j] * (1.0 - w) + ibi[j + 1] * w);
    }
    let mean = series.iter().sum::<f64>() / n as f64;
    series.iter_mut().for_each(|v| *v -= mean);
    if series.iter().all(|v| v.abs() <= 1e-12 * mean) {
        return invalid("inter-beat intervals do not vary");
    }
    let seg = n.min(256);
    let step = (seg / 2).max(1);
    let n_fft = fft_len(seg, 2048);
    let hann: Vec<f64> =
        (0..seg).map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / (seg - 1).max(1) as f64).cos()).collect();
    let mut acc = vec![0.0; n_fft / 2 + 1];
    let mut count = 0;
    let mut start = 0;
    while start + seg <= n {
        let chunk: Vec<f64> = series[start..start + seg].iter().zip(&hann).map(|(a, w)| a * w).collect();
        for (a, p) in acc.iter_mut().zip(power_spectrum(&chunk, n_fft)) {
            *a += p;
        }
        count += 1;
        start += step;
    }
    acc.iter_mut().for_each(|a| *a /= count as f64);
    Ok((TACHO_FS / n_fft as f64, acc))
}

fn band_power(psd: &[f64], df: f64, band: (f64, f64), include_hi: bool) -> f64 {
    psd.iter()
        .enumerate()
        .filter(|(k, _)| {
            let f = *k as f64 * df;
            f >= band.0 && (f < band.1 || (include_hi && f <= band.1))
        })
        .map(|(_, p)| p)
        .sum()
}

/// LF (0.04-0.15 Hz) and HF (0.15-0.4 Hz) power of the 4 Hz tachogram, in
/// normalised units.
pub fn hrv_features(ibi: &[f64]) -> Result<HrvFeatures> {
    let (df, psd) = tachogram_psd(ibi)?;
    let lf = band_power(&psd, df, LF_BAND, false);
    let hf = band_power(&psd, df, HF_BAND, true);
    if !(lf + hf > 0.0) {
        return invalid("no tachogram power in the LF and HF bands");
    }
    let lf_nu = lf / (lf + hf);
    let hf_nu = 1.0 - lf_nu;
    let lf_hf = if hf > 0.0 { lf / hf } else { f64::INFINITY };
    Ok(HrvFeatures { lf_nu, hf_nu, lf_hf })
}

/// Respiration frequency: tachogram spectral peak inside 0.1-0.5 Hz.
pub fn estimate_rf(ibi: &[f64]) -> Result<f64> {
    let (df, psd) = tachogram_psd(ibi)?;
    let bins = band_bins(TACHO_FS, (psd.len() - 1) * 2, RF_BAND);
    let k = bins
        .clone()
        .max_by(|&a, &b| psd[a].total_cmp(&psd[b]))
        .ok_or_else(|| Error::Invalid("empty respiration band".into()))?;
    if !(psd[k] > 0.0) {
        return invalid("no tachogram power in the respiration band");
    }
    let shift = if k > 0 && k + 1 < psd.len() {
        let (a, b, c) = (psd[k - 1], psd[k], psd[k + 1]);
        let den = a - 2.0 * b + c;
        if den < 0.0 {
            (0.5 * (a - c) / den).clamp(-0.5, 0.5)
        } else {
            0.0
        }
    } else {
        0.0
    };
    Ok((k as f64 + shift) * df)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlandAltman {
    pub mean_diff: f64,
    pub lower: f64,
    pub upper: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub n: usize,
    pub mae: f64,
    pub rmse: f64,
    /// `None` when either series is constant.
    pub pearson_rho: Option<f64>,
    /// Sample standard deviation of `pred - gt`.
    pub std_err: f64,
    pub bland_altman: BlandAltman,
}

/// Pearson correlation; fails when either input has zero variance.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return invalid(format!("pearson needs two equal series of length >= 2 ({} vs {})", a.len(), b.len()));
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return invalid("pearson correlation undefined for a constant series");
    }
    Ok((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

pub fn metrics(pred: &[f64], gt: &[f64]) -> Result<MetricReport> {
    if pred.len() != gt.len() {
        return invalid(format!("{} predictions for {} references", pred.len(), gt.len()));
    }
    if pred.len() < 2 {
        return invalid("metrics need at least 2 pairs");
    }
    let n = pred.len() as f64;
    let d: Vec<f64> = pred.iter().zip(gt).map(|(p, g)| p - g).collect();
    let mae = d.iter().map(|v| v.abs()).sum::<f64>() / n;
    let rmse = (d.iter().map(|v| v * v).sum::<f64>() / n).sqrt();
    let mean_diff = d.iter().sum::<f64>() / n;
    let std_err = (d.iter().map(|v| (v - mean_diff) * (v - mean_diff)).sum::<f64>() / (n - 1.0)).sqrt();
    Ok(MetricReport {
        n: pred.len(),
        mae,
        rmse: rmse.max(mae),
        pearson_rho: pearson(pred, gt).ok(),
        std_err,
        bland_altman: BlandAltman {
            mean_diff,
            lower: mean_diff - 1.96 * std_err,
            upper: mean_diff + 1.96 * std_err,
        },
    })
}
