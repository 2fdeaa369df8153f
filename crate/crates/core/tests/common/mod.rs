//! Independent reference computations shared by the integration tests.
#![allow(dead_code)]

use std::f64::consts::PI;

/// Least-squares power at `f`: variance explained by `a cos + b sin` on top of
/// a free offset (floating-mean periodogram).
pub fn ls_power(x: &[f64], fs: f64, f: f64) -> f64 {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let (mut cc, mut ss, mut cs, mut c1, mut s1, mut yc, mut ys) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
    for (i, v) in x.iter().enumerate() {
        let w = 2.0 * PI * f * i as f64 / fs;
        let (s, c) = w.sin_cos();
        let y = v - mean;
        cc += c * c;
        ss += s * s;
        cs += c * s;
        c1 += c;
        s1 += s;
        yc += y * c;
        ys += y * s;
    }
    // centre the regressors
    let cc = cc - c1 * c1 / n;
    let ss = ss - s1 * s1 / n;
    let cs = cs - c1 * s1 / n;
    let det = cc * ss - cs * cs;
    if det.abs() < 1e-12 {
        return 0.0;
    }
    let a = (ss * yc - cs * ys) / det;
    let b = (cc * ys - cs * yc) / det;
    a * yc + b * ys
}

/// Peak of the least-squares periodogram over `[lo, hi]`, grid search plus
/// golden-section refinement.
pub fn ls_peak(x: &[f64], fs: f64, lo: f64, hi: f64) -> f64 {
    ls_peak_step(x, fs, lo, hi, 0.002)
}

/// As [`ls_peak`] with a coarser grid; `step` must stay well under the main
/// lobe width `fs / len`.
pub fn ls_peak_step(x: &[f64], fs: f64, lo: f64, hi: f64, step: f64) -> f64 {
    let mut best = lo;
    let mut bp = f64::NEG_INFINITY;
    let mut f = lo;
    while f <= hi {
        let p = ls_power(x, fs, f);
        if p > bp {
            bp = p;
            best = f;
        }
        f += step;
    }
    let (mut a, mut b) = ((best - step).max(lo), (best + step).min(hi));
    let g = (5f64.sqrt() - 1.0) / 2.0;
    for _ in 0..60 {
        let c = b - g * (b - a);
        let d = a + g * (b - a);
        if ls_power(x, fs, c) > ls_power(x, fs, d) {
            b = d;
        } else {
            a = c;
        }
    }
    0.5 * (a + b)
}

/// Index of the largest entry.
pub fn argmax(p: &[f64]) -> usize {
    (0..p.len()).fold(0, |b, i| if p[i] > p[b] { i } else { b })
}

/// Plain DFT power `|X_k|^2` of `x` zero-padded to `n`, `k = 0..=n/2`.
pub fn dft_power(x: &[f64], n: usize) -> Vec<f64> {
    (0..=n / 2)
        .map(|k| {
            let (mut re, mut im) = (0.0, 0.0);
            for (i, v) in x.iter().enumerate() {
                let ph = -2.0 * PI * (k * i % n) as f64 / n as f64;
                re += v * ph.cos();
                im += v * ph.sin();
            }
            re * re + im * im
        })
        .collect()
}
