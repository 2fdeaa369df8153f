//! End-to-end pipelines behind the CLI: synth, train and eval, each writing
//! machine-readable output under one directory.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

use super::checkpoint::{load_model, Checkpoint};
use super::config::TrainConfig;
use super::eval::{evaluate, predict_signals, EvalReport};
use super::plots::{self, TracePanel};
use super::report::{manifest_hash, RunReport};
use super::train::{EpochLog, StepLog, Trainer};
use crate::encoders::Model;
use crate::error::{invalid, Error, IoContext, Result};
use crate::physio::MetricReport;
use crate::synthgen::{gen_dataset, read_dataset, write_dataset, Dataset, DatasetManifest, Split};

pub const RUN_REPORT: &str = "run_report.json";
pub const METRICS: &str = "metrics.json";
pub const TRAIN_LOG: &str = "train_log.csv";
pub const STEP_LOG: &str = "steps.csv";
pub const FINAL_CHECKPOINT: &str = "checkpoint.ckpt";

/// Trace panels drawn in the overlay figure.
const OVERLAY_CLIPS: usize = 4;

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Format { path: path.to_path_buf(), msg: e.to_string() }
}

fn write_json(path: &Path, v: &impl Serialize) -> Result<()> {
    fs::write(path, serde_json::to_vec_pretty(v)?).at(path)
}

fn write_csv<R: Serialize>(path: &Path, rows: impl IntoIterator<Item = R>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().at(path)
}

/// Generates the dataset described by `cfg.data` into `out`.
pub fn synth(cfg: &TrainConfig, out: &Path, force: bool) -> Result<DatasetManifest> {
    let ds = gen_dataset(&cfg.data)?;
    write_dataset(out, &ds, force)?;
    log::info!("wrote {} samples to {}", ds.samples.len(), out.display());
    Ok(ds.manifest)
}

#[derive(Serialize)]
struct LossRow {
    epoch: usize,
    #[serde(rename = "L_r")]
    l_r: f64,
    #[serde(rename = "L_vtc")]
    l_vtc: f64,
    #[serde(rename = "L_fc")]
    l_fc: f64,
    #[serde(rename = "L_fr")]
    l_fr: f64,
    #[serde(rename = "L_pearson")]
    l_pearson: f64,
    total: f64,
}

impl From<&EpochLog> for LossRow {
    fn from(e: &EpochLog) -> Self {
        let l = &e.losses;
        LossRow { epoch: e.epoch, l_r: l.l_r, l_vtc: l.l_vtc, l_fc: l.l_fc, l_fr: l.l_fr, l_pearson: l.l_pearson, total: e.total }
    }
}

#[derive(Serialize)]
struct StepRow {
    step: usize,
    #[serde(rename = "L_r")]
    l_r: f64,
    #[serde(rename = "L_vtc")]
    l_vtc: f64,
    #[serde(rename = "L_fc")]
    l_fc: f64,
    #[serde(rename = "L_fr")]
    l_fr: f64,
    #[serde(rename = "L_pearson")]
    l_pearson: f64,
    total: f64,
}

impl From<&StepLog> for StepRow {
    fn from(s: &StepLog) -> Self {
        let l = &s.losses;
        StepRow { step: s.step, l_r: l.l_r, l_vtc: l.l_vtc, l_fc: l.l_fc, l_fr: l.l_fr, l_pearson: l.l_pearson, total: s.total }
    }
}

/// Options shared by the training entry points.
#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Continue from this checkpoint instead of a fresh model.
    pub resume: Option<PathBuf>,
    /// Skip the train-split evaluation at the end.
    pub test_only: bool,
    /// Skip figures.
    pub no_plots: bool,
}

/// Trains per `cfg` on `ds`, writing logs, checkpoints, metrics and the run
/// report into `out`.
pub fn train(cfg: &TrainConfig, ds: &Dataset, out: &Path, opts: &TrainOptions) -> Result<RunReport> {
    let started = Instant::now();
    fs::create_dir_all(out).at(out)?;
    let mut tr = match &opts.resume {
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            if ck.config()? != *cfg {
                log::warn!("resuming with the config stored in {}", p.display());
            }
            Trainer::resume(&ck, ds)?
        }
        None => Trainer::new(cfg.clone(), ds)?,
    };
    let ckpt_dir = out.join("checkpoints");
    let every = tr.cfg.train.checkpoint_every;
    while tr.epoch < tr.cfg.train.epochs {
        tr.train_epoch(ds)?;
        write_csv(&out.join(TRAIN_LOG), tr.history.iter().map(LossRow::from))?;
        if every > 0 && tr.epoch % every == 0 && tr.epoch < tr.cfg.train.epochs {
            fs::create_dir_all(&ckpt_dir).at(&ckpt_dir)?;
            Checkpoint::from_trainer(&tr).save(&ckpt_dir.join(format!("epoch_{:04}.ckpt", tr.epoch)))?;
        }
    }
    write_csv(&out.join(TRAIN_LOG), tr.history.iter().map(LossRow::from))?;
    write_csv(&out.join(STEP_LOG), tr.steps.iter().map(StepRow::from))?;
    Checkpoint::from_trainer(&tr).save(&out.join(FINAL_CHECKPOINT))?;

    let mut eval = vec![evaluate(&tr.model, ds, Split::Test)?];
    if !opts.test_only {
        eval.push(evaluate(&tr.model, ds, Split::Train)?);
    }
    let metrics: BTreeMap<String, &MetricReport> =
        eval.iter().map(|e| (format!("{:?}", e.split).to_lowercase(), &e.metrics)).collect();
    write_json(&out.join(METRICS), &metrics)?;
    if !opts.no_plots && !tr.history.is_empty() {
        let h = &tr.history;
        let series = [
            ("L_r", h.iter().map(|e| e.losses.l_r).collect()),
            ("L_vtc", h.iter().map(|e| e.losses.l_vtc).collect()),
            ("L_fc", h.iter().map(|e| e.losses.l_fc).collect()),
            ("L_fr", h.iter().map(|e| e.losses.l_fr).collect()),
            ("L_pearson", h.iter().map(|e| e.losses.l_pearson).collect()),
            ("total", h.iter().map(|e| e.total).collect()),
        ];
        plots::loss_curves(&out.join("losses.svg"), &series)?;
    }
    let deterministic = tr.cfg.train.deterministic;
    let report = RunReport {
        config: tr.cfg.clone(),
        manifest_hash: manifest_hash(&ds.manifest),
        epochs: tr.history.clone(),
        eval,
        wall_clock_s: (!deterministic).then(|| started.elapsed().as_secs_f64()),
    };
    fs::write(out.join(RUN_REPORT), report.to_json()).at(&out.join(RUN_REPORT))?;
    Ok(report)
}

/// Reads the dataset named by `cfg` and trains on it.
pub fn train_from_config(cfg: &TrainConfig, out: &Path, opts: &TrainOptions) -> Result<RunReport> {
    let ds = read_dataset(&cfg.dataset)?;
    train(cfg, &ds, out, opts)
}

#[derive(Serialize)]
struct BlandAltmanRow<'a> {
    id: &'a str,
    mean_bpm: f64,
    diff_bpm: f64,
}

#[derive(Serialize)]
struct ScatterRow<'a> {
    id: &'a str,
    gt_bpm: f64,
    pred_bpm: f64,
}

/// Evaluates `model` on one split and writes metrics, per-clip CSVs and figures.
pub fn evaluate_to(model: &Model<f32>, ds: &Dataset, split: Split, out: &Path, plots_on: bool) -> Result<EvalReport> {
    fs::create_dir_all(out).at(out)?;
    let report = evaluate(model, ds, split)?;
    write_json(&out.join(METRICS), &report)?;
    let clips = &report.clips;
    write_csv(
        &out.join("scatter.csv"),
        clips.iter().map(|c| ScatterRow { id: &c.id, gt_bpm: c.gt_bpm, pred_bpm: c.pred_bpm }),
    )?;
    write_csv(
        &out.join("bland_altman.csv"),
        clips.iter().map(|c| BlandAltmanRow {
            id: &c.id,
            mean_bpm: (c.pred_bpm + c.gt_bpm) / 2.0,
            diff_bpm: c.pred_bpm - c.gt_bpm,
        }),
    )?;
    if plots_on {
        let pred: Vec<f64> = clips.iter().map(|c| c.pred_bpm).collect();
        let gt: Vec<f64> = clips.iter().map(|c| c.gt_bpm).collect();
        let ba = &report.metrics.bland_altman;
        plots::bland_altman(&out.join("bland_altman.svg"), &pred, &gt, ba.mean_diff, ba.lower, ba.upper)?;
        plots::scatter(&out.join("scatter.svg"), &pred, &gt)?;

        let samples: Vec<_> = ds.split(split).into_iter().take(OVERLAY_CLIPS).collect();
        let signals = predict_signals(model, &samples)?;
        let f = model.net.cfg.map_size;
        let refs: Vec<&[f64]> = samples
            .iter()
            .map(|s| {
                let start = (s.clip.n_frames - f) / 2;
                &s.ppg.samples[start..start + f]
            })
            .collect();
        let panels: Vec<TracePanel> = samples
            .iter()
            .zip(&signals)
            .zip(&refs)
            .map(|((s, y), r)| TracePanel { id: &s.entry.id, pred: y, reference: r })
            .collect();
        let fs = samples.first().map(|s| s.entry.fs).unwrap_or(30.0);
        plots::trace_overlay(&out.join("traces.svg"), &panels, fs)?;
    }
    Ok(report)
}

/// Loads `checkpoint`, evaluates it on `split` of `dataset` (or the dataset
/// in the checkpoint's config) and writes the artefacts into `out`.
pub fn eval_checkpoint(checkpoint: &Path, dataset: Option<&Path>, split: Split, out: &Path) -> Result<EvalReport> {
    let ck = Checkpoint::load(checkpoint)?;
    let dir = match dataset {
        Some(d) => d.to_path_buf(),
        None => ck.config()?.dataset,
    };
    let ds = read_dataset(&dir)?;
    if ds.split(split).is_empty() {
        return invalid(format!("{split:?} split of {} is empty", dir.display()));
    }
    let model = load_model(&ck, &ds)?;
    evaluate_to(&model, &ds, split, out, true)
}
