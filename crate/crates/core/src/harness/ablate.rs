//! Ablation variants trained from one shared seed and dataset.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::run::{train, TrainOptions};
use crate::error::{invalid, Error, IoContext, Result};
use crate::losses::RankObjective;
use crate::pairs::Template;
use crate::physio::MetricReport;
use crate::synthgen::{Dataset, Split};

pub const MASK_SWEEP: [f64; 5] = [0.4, 0.5, 0.6, 0.7, 0.8];
pub const K_SWEEP: [usize; 6] = [1, 2, 3, 4, 5, 6];

/// One training variant relative to the base config.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Variant {
    Full,
    NoFc,
    NoVtc,
    NoTvr,
    NoFr,
    /// Absolute-ratio regression in place of the pairwise rank loss.
    Afr,
    Template(Template),
    MaskRatio(f64),
    K(usize),
}

impl Variant {
    /// Expands one switch. Sweep names stand for several variants:
    /// `templates`, `mask_sweep` and `k_sweep`.
    pub fn parse_switch(s: &str) -> Result<Vec<Variant>> {
        Ok(match s {
            "templates" => Template::ALL.iter().map(|&t| Variant::Template(t)).collect(),
            "mask_sweep" => MASK_SWEEP.iter().map(|&b| Variant::MaskRatio(b)).collect(),
            "k_sweep" => K_SWEEP.iter().map(|&k| Variant::K(k)).collect(),
            _ => vec![s.parse()?],
        })
    }

    pub fn apply(self, base: &TrainConfig) -> TrainConfig {
        let mut c = base.clone();
        match self {
            Variant::Full => {}
            Variant::NoFc => c.loss.w_fc = 0.0,
            Variant::NoVtc => c.loss.w_vtc = 0.0,
            Variant::NoTvr => c.loss.w_r = 0.0,
            Variant::NoFr => c.loss.w_fr = 0.0,
            Variant::Afr => c.loss.rank_objective = RankObjective::Afr,
            Variant::Template(t) => c.train.template = t,
            Variant::MaskRatio(b) => c.train.mask_ratio = b,
            Variant::K(k) => c.aug.k_neg = k,
        }
        c
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Variant::Full => write!(f, "full"),
            Variant::NoFc => write!(f, "no_fc"),
            Variant::NoVtc => write!(f, "no_vtc"),
            Variant::NoTvr => write!(f, "no_tvr"),
            Variant::NoFr => write!(f, "no_fr"),
            Variant::Afr => write!(f, "afr"),
            Variant::Template(t) => write!(f, "template={}", format!("{t:?}").to_lowercase()),
            Variant::MaskRatio(b) => write!(f, "mask={b}"),
            Variant::K(k) => write!(f, "k={k}"),
        }
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Variant> {
        let bad = || Error::Invalid(format!("unknown ablation switch {s:?}"));
        if let Some((key, val)) = s.split_once('=') {
            return match key {
                "template" => Ok(Variant::Template(val.parse()?)),
                "mask" => {
                    let b: f64 = val.parse().map_err(|_| bad())?;
                    if !(0.0..1.0).contains(&b) {
                        return invalid(format!("mask ratio {b} must lie in [0, 1)"));
                    }
                    Ok(Variant::MaskRatio(b))
                }
                "k" => Ok(Variant::K(val.parse().map_err(|_| bad())?)),
                _ => Err(bad()),
            };
        }
        match s {
            "full" => Ok(Variant::Full),
            "no_fc" => Ok(Variant::NoFc),
            "no_vtc" => Ok(Variant::NoVtc),
            "no_tvr" => Ok(Variant::NoTvr),
            "no_fr" => Ok(Variant::NoFr),
            "afr" => Ok(Variant::Afr),
            _ => Err(bad()),
        }
    }
}

/// Expands a list of switches, rejecting unknown names and duplicates.
pub fn parse_switches<S: AsRef<str>>(switches: &[S]) -> Result<Vec<Variant>> {
    let mut out: Vec<Variant> = Vec::new();
    for s in switches {
        for v in Variant::parse_switch(s.as_ref().trim())? {
            if !out.contains(&v) {
                out.push(v);
            }
        }
    }
    if out.is_empty() {
        return invalid("no ablation switches given");
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub metrics: MetricReport,
}

#[derive(Serialize)]
struct CsvRow<'a> {
    variant: &'a str,
    mae: f64,
    rmse: f64,
    std_err: f64,
    pearson_rho: Option<f64>,
}

/// Trains each variant on `ds` from the same seed, each into
/// `out/<variant>`, and writes `ablation.csv` / `ablation.json` with the
/// test-split metrics.
pub fn ablate(base: &TrainConfig, ds: &Dataset, variants: &[Variant], out: &Path) -> Result<Vec<AblationRow>> {
    std::fs::create_dir_all(out).at(out)?;
    let opts = TrainOptions { resume: None, test_only: true, no_plots: true };
    let mut rows = Vec::new();
    for v in variants {
        let cfg = v.apply(base);
        cfg.validate().map_err(|e| Error::Invalid(format!("variant {v}: {e}")))?;
        log::info!("ablation variant {v}");
        let report = train(&cfg, ds, &out.join(v.to_string().replace('=', "_")), &opts)?;
        let test = report.eval.iter().find(|e| e.split == Split::Test).expect("test split evaluated");
        rows.push(AblationRow { variant: v.to_string(), metrics: test.metrics.clone() });
    }
    let path = out.join("ablation.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| Error::Format { path: path.clone(), msg: e.to_string() })?;
    for r in &rows {
        let m = &r.metrics;
        w.serialize(CsvRow { variant: &r.variant, mae: m.mae, rmse: m.rmse, std_err: m.std_err, pearson_rho: m.pearson_rho })
            .map_err(|e| Error::Format { path: path.clone(), msg: e.to_string() })?;
    }
    w.flush().at(&path)?;
    let json = out.join("ablation.json");
    std::fs::write(&json, serde_json::to_vec_pretty(&rows)?).at(&json)?;
    Ok(rows)
}
