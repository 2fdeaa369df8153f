//! SVG figures for evaluation output.

use std::path::Path;

use plotters::prelude::*;

use crate::error::{Error, Result};

fn plot_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Format { path: path.to_path_buf(), msg: format!("plotting failed: {e}") }
}

fn bounds(v: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = v.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(x), b.max(x)));
    if !lo.is_finite() || !hi.is_finite() {
        return (0.0, 1.0);
    }
    let pad = ((hi - lo) * 0.05).max(1e-6);
    (lo - pad, hi + pad)
}

fn zscore(x: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let s = (x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n).sqrt();
    x.iter().map(|v| if s > 0.0 { (v - m) / s } else { 0.0 }).collect()
}

/// One panel per clip: standardised predicted and reference traces.
pub struct TracePanel<'a> {
    pub id: &'a str,
    pub pred: &'a [f64],
    pub reference: &'a [f64],
}

pub fn trace_overlay(path: &Path, panels: &[TracePanel<'_>], fs: f64) -> Result<()> {
    let h = 160 * panels.len().max(1) as u32;
    let root = SVGBackend::new(path, (800, h)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| plot_err(path, e))?;
    let areas = root.split_evenly((panels.len().max(1), 1));
    for (area, p) in areas.iter().zip(panels) {
        let pred = zscore(p.pred);
        let gt = zscore(p.reference);
        let t_end = pred.len().max(gt.len()) as f64 / fs;
        let (lo, hi) = bounds(pred.iter().chain(&gt).copied());
        let mut chart = ChartBuilder::on(area)
            .caption(p.id, ("sans-serif", 14))
            .margin(6)
            .x_label_area_size(24)
            .y_label_area_size(36)
            .build_cartesian_2d(0.0..t_end, lo..hi)
            .map_err(|e| plot_err(path, e))?;
        chart.configure_mesh().x_desc("s").draw().map_err(|e| plot_err(path, e))?;
        chart
            .draw_series(LineSeries::new(gt.iter().enumerate().map(|(i, &v)| (i as f64 / fs, v)), &BLACK))
            .map_err(|e| plot_err(path, e))?
            .label("reference")
            .legend(|(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], BLACK));
        chart
            .draw_series(LineSeries::new(pred.iter().enumerate().map(|(i, &v)| (i as f64 / fs, v)), &RED))
            .map_err(|e| plot_err(path, e))?
            .label("predicted")
            .legend(|(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], RED));
        chart
            .configure_series_labels()
            .background_style(WHITE.mix(0.8))
            .border_style(BLACK)
            .draw()
            .map_err(|e| plot_err(path, e))?;
    }
    root.present().map_err(|e| plot_err(path, e))
}

/// Mean of each pair against its difference, with the mean and 95% limits.
pub fn bland_altman(path: &Path, pred: &[f64], gt: &[f64], mean_diff: f64, lower: f64, upper: f64) -> Result<()> {
    let pts: Vec<(f64, f64)> = pred.iter().zip(gt).map(|(p, g)| ((p + g) / 2.0, p - g)).collect();
    let (x0, x1) = bounds(pts.iter().map(|p| p.0));
    let (y0, y1) = bounds(pts.iter().map(|p| p.1).chain([lower, upper]));
    let root = SVGBackend::new(path, (640, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| plot_err(path, e))?;
    let mut chart = ChartBuilder::on(&root)
        .caption("Bland-Altman", ("sans-serif", 18))
        .margin(10)
        .x_label_area_size(36)
        .y_label_area_size(48)
        .build_cartesian_2d(x0..x1, y0..y1)
        .map_err(|e| plot_err(path, e))?;
    chart
        .configure_mesh()
        .x_desc("(pred + gt) / 2 [BPM]")
        .y_desc("pred - gt [BPM]")
        .draw()
        .map_err(|e| plot_err(path, e))?;
    chart.draw_series(pts.iter().map(|&p| Circle::new(p, 3, BLUE.filled()))).map_err(|e| plot_err(path, e))?;
    for (y, style) in [(mean_diff, BLACK), (lower, RED), (upper, RED)] {
        chart.draw_series(LineSeries::new([(x0, y), (x1, y)], style)).map_err(|e| plot_err(path, e))?;
    }
    root.present().map_err(|e| plot_err(path, e))
}

/// Predicted against reference heart rate with the identity line.
pub fn scatter(path: &Path, pred: &[f64], gt: &[f64]) -> Result<()> {
    let (lo, hi) = bounds(pred.iter().chain(gt).copied());
    let root = SVGBackend::new(path, (520, 520)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| plot_err(path, e))?;
    let mut chart = ChartBuilder::on(&root)
        .caption("HR", ("sans-serif", 18))
        .margin(10)
        .x_label_area_size(36)
        .y_label_area_size(48)
        .build_cartesian_2d(lo..hi, lo..hi)
        .map_err(|e| plot_err(path, e))?;
    chart.configure_mesh().x_desc("gt [BPM]").y_desc("pred [BPM]").draw().map_err(|e| plot_err(path, e))?;
    chart.draw_series(LineSeries::new([(lo, lo), (hi, hi)], &BLACK)).map_err(|e| plot_err(path, e))?;
    chart
        .draw_series(gt.iter().zip(pred).map(|(&g, &p)| Circle::new((g, p), 3, BLUE.filled())))
        .map_err(|e| plot_err(path, e))?;
    root.present().map_err(|e| plot_err(path, e))
}

/// Per-epoch loss curves.
pub fn loss_curves(path: &Path, series: &[(&str, Vec<f64>)]) -> Result<()> {
    let n = series.iter().map(|s| s.1.len()).max().unwrap_or(0).max(2);
    let (lo, hi) = bounds(series.iter().flat_map(|s| s.1.iter().copied()));
    let root = SVGBackend::new(path, (720, 440)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| plot_err(path, e))?;
    let mut chart = ChartBuilder::on(&root)
        .caption("training losses", ("sans-serif", 18))
        .margin(10)
        .x_label_area_size(36)
        .y_label_area_size(48)
        .build_cartesian_2d(1.0..n as f64, lo..hi)
        .map_err(|e| plot_err(path, e))?;
    chart.configure_mesh().x_desc("epoch").draw().map_err(|e| plot_err(path, e))?;
    for (i, (name, ys)) in series.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        chart
            .draw_series(LineSeries::new(ys.iter().enumerate().map(|(e, &v)| (e as f64 + 1.0, v)), color))
            .map_err(|e| plot_err(path, e))?
            .label(*name)
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(|e| plot_err(path, e))?;
    root.present().map_err(|e| plot_err(path, e))
}
