//! FFT helpers shared by the data generator checks, the losses and physio.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

/// Physiological band used for HR and the frequency-contrast PSD, in Hz.
pub const HR_BAND: (f64, f64) = (0.75, 4.0);

/// One-sided power `|X_k|^2`, `k = 0..=n_fft/2`, of `x` zero-padded to `n_fft`.
pub fn power_spectrum(x: &[f64], n_fft: usize) -> Vec<f64> {
    assert!(n_fft >= x.len() && n_fft > 0, "n_fft {n_fft} shorter than signal {}", x.len());
    let mut buf: Vec<Complex<f64>> = x.iter().map(|&v| Complex::new(v, 0.0)).collect();
    buf.resize(n_fft, Complex::new(0.0, 0.0));
    FftPlanner::new().plan_fft_forward(n_fft).process(&mut buf);
    buf[..=n_fft / 2].iter().map(|c| c.norm_sqr()).collect()
}

/// Inclusive FFT bin range whose centre frequencies lie inside `band`.
pub fn band_bins(fs: f64, n_fft: usize, band: (f64, f64)) -> std::ops::RangeInclusive<usize> {
    let df = fs / n_fft as f64;
    let lo = (band.0 / df - 1e-9).ceil().max(0.0) as usize;
    let hi = ((band.1 / df + 1e-9).floor() as usize).min(n_fft / 2);
    lo..=hi
}

/// Smallest power of two that is at least `max(n, min)`.
pub fn fft_len(n: usize, min: usize) -> usize {
    n.max(min).next_power_of_two()
}

/// Frequency of the band-limited spectral peak of `x` (mean removed), refined
/// by fitting a parabola through the peak bin and its neighbours.
/// Returns `None` when the band holds no power.
pub fn peak_frequency(x: &[f64], fs: f64, band: (f64, f64), min_fft: usize) -> Option<f64> {
    let mean = x.iter().sum::<f64>() / x.len() as f64;
    let centred: Vec<f64> = x.iter().map(|v| v - mean).collect();
    let n_fft = fft_len(x.len(), min_fft);
    let p = power_spectrum(&centred, n_fft);
    let bins = band_bins(fs, n_fft, band);
    let (lo, hi) = (*bins.start(), *bins.end());
    if lo > hi {
        return None;
    }
    let mut k = lo;
    for j in bins {
        if p[j] > p[k] {
            k = j;
        }
    }
    let total: f64 = p[lo..=hi].iter().sum();
    if !(total > 0.0) || p[k] <= total * 1e-12 {
        return None;
    }
    let mut shift = 0.0;
    if k > 0 && k + 1 < p.len() {
        let (a, b, c) = (p[k - 1], p[k], p[k + 1]);
        let den = a - 2.0 * b + c;
        if den < 0.0 {
            shift = (0.5 * (a - c) / den).clamp(-0.5, 0.5);
        }
    }
    Some((k as f64 + shift) * fs / n_fft as f64)
}
