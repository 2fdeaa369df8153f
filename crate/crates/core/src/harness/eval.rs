//! Heart-rate evaluation of a trained model on a dataset split.

use rppgvl_tape::{Graph, Tensor};
use serde::{Deserialize, Serialize};

use crate::encoders::Model;
use crate::error::{invalid, Error, Result};
use crate::pairs::patchify;
use crate::physio::{estimate_hr, metrics, MetricReport, SignalTrace};
use crate::stmap::central_stmap;
use crate::synthgen::{Dataset, Sample, Split};

const EVAL_CHUNK: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipResult {
    pub id: String,
    pub gt_bpm: f64,
    pub pred_bpm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: Split,
    pub metrics: MetricReport,
    pub clips: Vec<ClipResult>,
}

/// Predicted signals for the central crop of each clip.
pub fn predict_signals(model: &Model<f32>, samples: &[&Sample]) -> Result<Vec<Vec<f64>>> {
    let cfg = &model.net.cfg;
    let (f, p, n, pd) = (cfg.map_size, cfg.patch, cfg.n_patches(), cfg.patch_dim());
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(EVAL_CHUNK) {
        let mut pixels = Vec::with_capacity(chunk.len() * n * pd);
        for s in chunk {
            let m = central_stmap(&s.clip, f)?;
            if m.pixels.len() != f * f * 3 {
                return Err(Error::Shape(format!("sample {} gives a map of size {}", s.entry.id, m.size)));
            }
            pixels.extend(patchify(&m.pixels, f, p));
        }
        let mut g = Graph::new(&model.params);
        let x = g.constant(Tensor::from_f64(&[chunk.len() * n, pd], &pixels));
        let vis = model.net.encode_vision(&mut g, x, chunk.len());
        let y = model.net.rppg(&mut g, vis.cls);
        out.extend(g.value(y).to_f64().chunks(f).map(<[f64]>::to_vec));
    }
    Ok(out)
}

pub fn evaluate_samples(model: &Model<f32>, samples: &[&Sample], split: Split) -> Result<EvalReport> {
    if samples.is_empty() {
        return invalid(format!("{split:?} split is empty"));
    }
    let signals = predict_signals(model, samples)?;
    let mut clips = Vec::with_capacity(samples.len());
    for (s, y) in samples.iter().zip(signals) {
        let pred_bpm = estimate_hr(&SignalTrace::new(y, s.entry.fs))
            .map_err(|e| Error::Invalid(format!("sample {}: {e}", s.entry.id)))?;
        clips.push(ClipResult { id: s.entry.id.clone(), gt_bpm: 60.0 * s.entry.f0, pred_bpm });
    }
    let pred: Vec<f64> = clips.iter().map(|c| c.pred_bpm).collect();
    let gt: Vec<f64> = clips.iter().map(|c| c.gt_bpm).collect();
    Ok(EvalReport { split, metrics: metrics(&pred, &gt)?, clips })
}

pub fn evaluate(model: &Model<f32>, ds: &Dataset, split: Split) -> Result<EvalReport> {
    evaluate_samples(model, &ds.split(split), split)
}
