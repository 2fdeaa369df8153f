//! The training loop: augmentation, pair generation, encoding, losses and
//! optimisation, one batched graph per step.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rppgvl_tape::{AdamW, Graph, Real, Tensor, Var};
use serde::{Deserialize, Serialize};

use super::config::{Mode, TrainConfig};
use crate::encoders::{Model, RankInput};
use crate::error::{invalid, Error, Result};
use crate::losses::{
    l_afr, l_fc, l_fr, l_pearson, l_r, l_vtc, loss_total, psd, rank_labels, LossComponents, PsdBasis, RankLabels,
    RankObjective,
};
use crate::pairs::{make_cstmaps, make_prompt, mask_cstmap, patchify, MaskedCStMap, Vocab};
use crate::stmap::{make_augmented_set, Ratio};
use crate::synthgen::{Dataset, Sample, Split};

/// Everything one step needs, built from a batch of anchors.
#[derive(Clone, Debug)]
pub struct Batch {
    pub anchors: usize,
    /// Signals per anchor, `2 + k`.
    pub n_signals: usize,
    /// Patch rows of the STMaps, `(p1, p2, n1, .., nk)` per anchor.
    pub stmap_patches: Vec<f64>,
    /// Patch rows of the contrastive maps, `2k` per anchor.
    pub cstmap_patches: Vec<f64>,
    pub prompts: Vec<Vec<usize>>,
    pub masks: Vec<MaskedCStMap>,
    pub ratios: Vec<Vec<Ratio>>,
    pub labels: Vec<RankLabels>,
    /// `(anchor, reference pulse over the positives' crop)` for labelled anchors.
    pub references: Vec<(usize, Vec<f64>)>,
}

/// Variables of one loss graph.
#[derive(Clone, Copy, Debug, Default)]
pub struct LossVars {
    pub l_r: Option<Var>,
    pub l_vtc: Option<Var>,
    pub l_fc: Option<Var>,
    pub l_fr: Option<Var>,
    pub l_pearson: Option<Var>,
    pub total: Option<Var>,
}

impl LossVars {
    pub fn values<T: Real>(&self, g: &Graph<'_, T>) -> LossComponents {
        let v = |x: Option<Var>| x.map(|x| g.scalar(x)).unwrap_or(0.0);
        LossComponents {
            l_r: v(self.l_r),
            l_vtc: v(self.l_vtc),
            l_fc: v(self.l_fc),
            l_fr: v(self.l_fr),
            l_pearson: v(self.l_pearson),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub losses: LossComponents,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub losses: LossComponents,
    pub total: f64,
}

/// Samples whose reference pulse is used in `semi` mode: the first
/// `round(fraction * n)` train ids in a seeded shuffle.
pub fn labeled_ids(train: &[&Sample], fraction: f64, seed: u64) -> BTreeSet<String> {
    let mut ids: Vec<&str> = train.iter().map(|s| s.entry.id.as_str()).collect();
    ids.sort_unstable();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x1abe_11ed);
    ids.shuffle(&mut rng);
    let n = (fraction * ids.len() as f64).round() as usize;
    ids.into_iter().take(n).map(str::to_string).collect()
}

pub struct Trainer {
    pub cfg: TrainConfig,
    pub model: Model<f32>,
    pub opt: AdamW<f32>,
    pub rng: ChaCha8Rng,
    pub epoch: usize,
    pub step: usize,
    pub vocab: Vocab,
    pub basis: PsdBasis,
    pub fs: f64,
    pub labeled: BTreeSet<String>,
    pub history: Vec<EpochLog>,
    pub steps: Vec<StepLog>,
}

impl Trainer {
    /// Fresh model; all randomness flows from `cfg.train.seed`.
    pub fn new(cfg: TrainConfig, ds: &Dataset) -> Result<Trainer> {
        cfg.validate()?;
        let fs = check_dataset(&cfg, ds)?;
        cfg.loss.validate(fs)?;
        let vocab = Vocab::new(cfg.model.text_len);
        let basis = PsdBasis::from_config(cfg.model.map_size, fs, &cfg.loss)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
        let n_signals = 2 + cfg.aug.k_neg;
        let model = Model::new(&cfg.model, vocab.len(), n_signals, basis.n_bins(), &mut rng)?;
        let mut opt = AdamW::new(cfg.train.lr, cfg.train.weight_decay);
        opt.beta1 = cfg.train.beta1;
        opt.beta2 = cfg.train.beta2;
        opt.eps = cfg.train.eps;
        let labeled = match cfg.train.mode {
            Mode::Ssl => BTreeSet::new(),
            Mode::Semi => labeled_ids(&ds.split(Split::Train), cfg.train.labeled_fraction, cfg.train.seed),
            Mode::Supervised => ds.split(Split::Train).iter().map(|s| s.entry.id.clone()).collect(),
        };
        Ok(Trainer {
            cfg,
            model,
            opt,
            rng,
            epoch: 0,
            step: 0,
            vocab,
            basis,
            fs,
            labeled,
            history: Vec::new(),
            steps: Vec::new(),
        })
    }

    pub fn build_batch(&mut self, samples: &[&Sample]) -> Result<Batch> {
        let cfg = &self.cfg;
        let f = cfg.model.map_size;
        let p = cfg.model.patch;
        let k = cfg.aug.k_neg;
        let supervised = cfg.train.mode == Mode::Supervised;
        let mut b = Batch {
            anchors: samples.len(),
            n_signals: 2 + k,
            stmap_patches: Vec::new(),
            cstmap_patches: Vec::new(),
            prompts: Vec::new(),
            masks: Vec::new(),
            ratios: Vec::new(),
            labels: Vec::new(),
            references: Vec::new(),
        };
        for (a, s) in samples.iter().enumerate() {
            let set = make_augmented_set(&s.clip, &cfg.aug, f, &mut self.rng)?;
            for m in set.positives.iter().chain(&set.negatives) {
                b.stmap_patches.extend(patchify(&m.pixels, f, p));
            }
            if self.labeled.contains(&s.entry.id) {
                let seg = s.ppg.samples[set.pos_start..set.pos_start + f].to_vec();
                b.references.push((a, seg));
            }
            if !supervised {
                let cst = make_cstmaps(&set.positives, &set.negatives, cfg.train.swap_sides)?;
                for c in &cst {
                    b.cstmap_patches.extend(patchify(&c.pixels, f, p));
                    b.prompts.push(make_prompt(c.ratio, cfg.train.template, c.swapped, &self.vocab)?.tokens);
                    b.masks.push(mask_cstmap(c, cfg.train.mask_ratio, p, &mut self.rng)?);
                }
                b.labels.push(rank_labels(&set.ratios)?);
            }
            b.ratios.push(set.ratios);
        }
        Ok(b)
    }

    /// Shuffled train order for one epoch, in whole batches (the last may be short).
    pub fn epoch_order<'d>(&mut self, train: &[&'d Sample]) -> Vec<Vec<&'d Sample>> {
        let mut order: Vec<&Sample> = train.to_vec();
        order.shuffle(&mut self.rng);
        order.chunks(self.cfg.train.batch_size).map(<[_]>::to_vec).collect()
    }

    /// One optimiser step on `batch`; returns the loss components.
    pub fn train_step(&mut self, batch: &Batch) -> Result<(LossComponents, f64)> {
        let step = self.step;
        let (comps, grads) = {
            let mut g = Graph::new(&self.model.params);
            let vars = build_losses(&mut g, &self.model, &self.cfg, &self.basis, batch)?;
            let comps = vars.values(&g);
            loss_total(&comps, &self.cfg.loss, step)?;
            let total = vars.total.ok_or_else(|| Error::Invalid("every loss weight is zero".into()))?;
            g.backward(total);
            (comps, g.into_param_grads())
        };
        let total = loss_total(&comps, &self.cfg.loss, step)?;
        self.model.params.zero_grad();
        self.model.params.accumulate_all(&grads, 1.0);
        if let Some(name) = self.model.params.first_non_finite() {
            return Err(Error::NonFinite { what: format!("gradient of {name}"), step });
        }
        let clip = self.cfg.train.grad_clip;
        if clip > 0.0 {
            let n = self.model.params.grad_norm();
            if n > clip {
                self.model.params.scale_grads((clip / n) as f32);
            }
        }
        self.opt.step(&mut self.model.params);
        if let Some((_, p)) = self.model.params.iter().find(|(_, p)| !p.value.all_finite()) {
            return Err(Error::NonFinite { what: format!("parameter {}", p.name), step });
        }
        self.step += 1;
        self.steps.push(StepLog { step, losses: comps, total });
        Ok((comps, total))
    }

    /// Runs one epoch over the train split and appends its mean losses.
    pub fn train_epoch(&mut self, ds: &Dataset) -> Result<EpochLog> {
        let train = ds.split(Split::Train);
        if train.is_empty() {
            return invalid("train split is empty");
        }
        let batches = self.epoch_order(&train);
        let mut sum = LossComponents::default();
        let mut total = 0.0;
        for samples in &batches {
            let batch = self.build_batch(samples)?;
            let (c, t) = self.train_step(&batch)?;
            sum.l_r += c.l_r;
            sum.l_vtc += c.l_vtc;
            sum.l_fc += c.l_fc;
            sum.l_fr += c.l_fr;
            sum.l_pearson += c.l_pearson;
            total += t;
        }
        let n = batches.len() as f64;
        let losses = LossComponents {
            l_r: sum.l_r / n,
            l_vtc: sum.l_vtc / n,
            l_fc: sum.l_fc / n,
            l_fr: sum.l_fr / n,
            l_pearson: sum.l_pearson / n,
        };
        self.epoch += 1;
        let log = EpochLog { epoch: self.epoch, losses, total: total / n };
        log::info!(
            "epoch {} total {:.4} (L_r {:.4} L_vtc {:.4} L_fc {:.4} L_fr {:.4} L_pearson {:.4})",
            log.epoch,
            log.total,
            losses.l_r,
            losses.l_vtc,
            losses.l_fc,
            losses.l_fr,
            losses.l_pearson
        );
        self.history.push(log.clone());
        Ok(log)
    }
}

/// Checks the dataset against the model config; returns its sampling rate.
pub fn check_dataset(cfg: &TrainConfig, ds: &Dataset) -> Result<f64> {
    let first = ds.samples.first().ok_or_else(|| Error::Invalid("dataset has no samples".into()))?;
    let fs = first.entry.fs;
    for s in &ds.samples {
        if s.entry.fs != fs {
            return invalid(format!("sample {} has fs {} (expected {fs})", s.entry.id, s.entry.fs));
        }
        if s.clip.n_frames < cfg.model.map_size {
            return invalid(format!(
                "sample {} has {} frames, fewer than map_size {}",
                s.entry.id, s.clip.n_frames, cfg.model.map_size
            ));
        }
        if cfg.model.map_size % s.clip.rois != 0 {
            return invalid(format!("map_size {} is not a multiple of {} ROIs", cfg.model.map_size, s.clip.rois));
        }
    }
    Ok(fs)
}

/// Builds every weighted loss term of one batch into `g`.
pub fn build_losses<'p, T: Real>(
    g: &mut Graph<'p, T>,
    model: &Model<T>,
    cfg: &TrainConfig,
    basis: &PsdBasis,
    batch: &Batch,
) -> Result<LossVars> {
    let net = &model.net;
    let lc = &cfg.loss;
    let n = net.cfg.n_patches();
    let pd = net.cfg.patch_dim();
    let b = batch.anchors;
    let ns = batch.n_signals;
    let k = ns - 2;
    let supervised = cfg.train.mode == Mode::Supervised;
    let mut out = LossVars::default();
    let mut terms: Vec<(f64, Var)> = Vec::new();

    let want_pearson = !batch.references.is_empty() && lc.w_pearson > 0.0;
    let want_fc = !supervised && lc.w_fc > 0.0;
    let want_fr = !supervised && lc.w_fr > 0.0;
    let want_vtc = !supervised && lc.w_vtc > 0.0;
    let want_r = !supervised && lc.w_r > 0.0;

    // STMaps (all signals, or only positives when supervised) and contrastive maps share one pass.
    let stmap_rows = if supervised { 2 } else { ns };
    let mut pixels: Vec<f64> = Vec::new();
    if supervised {
        let per = ns * n * pd;
        for a in 0..b {
            pixels.extend_from_slice(&batch.stmap_patches[a * per..a * per + 2 * n * pd]);
        }
    } else {
        pixels.extend_from_slice(&batch.stmap_patches);
    }
    let n_st = b * stmap_rows;
    let n_cst = if want_vtc { batch.masks.len() } else { 0 };
    if want_vtc {
        pixels.extend_from_slice(&batch.cstmap_patches);
    }
    let patches = g.constant(Tensor::from_f64(&[(n_st + n_cst) * n, pd], &pixels));
    let vis = net.encode_vision(g, patches, n_st + n_cst);
    let st_cls = if n_cst > 0 { g.gather_rows(vis.cls, &(0..n_st).collect::<Vec<_>>()) } else { vis.cls };
    let y = net.rppg(g, st_cls);

    if want_fc || want_fr {
        let p = if want_fc || net.cfg.rank_input == RankInput::Psd { Some(psd(g, basis, y)) } else { None };
        if want_fc {
            let v = l_fc(g, p.unwrap(), k, lc.tau2)?;
            out.l_fc = Some(v);
            terms.push((lc.w_fc, v));
        }
        if want_fr {
            let feats = match net.cfg.rank_input {
                RankInput::Raw => y,
                RankInput::Psd => p.unwrap(),
            };
            let scores = net.rank_scores(g, feats)?;
            let v = match lc.rank_objective {
                RankObjective::Pairwise => l_fr(g, scores, &batch.labels)?,
                RankObjective::Afr => l_afr(g, scores, &batch.ratios)?,
            };
            out.l_fr = Some(v);
            terms.push((lc.w_fr, v));
        }
    }

    if want_pearson {
        let mut rows = Vec::new();
        let mut refs = Vec::new();
        for (a, r) in &batch.references {
            for j in 0..2 {
                rows.push(a * stmap_rows + j);
                refs.push(r.clone());
            }
        }
        let ys = g.gather_rows(y, &rows);
        let v = l_pearson(g, ys, &refs)?;
        out.l_pearson = Some(v);
        terms.push((lc.w_pearson, v));
    }

    if want_vtc || want_r {
        // Encode each distinct prompt once.
        let mut uniq: BTreeMap<&[usize], usize> = BTreeMap::new();
        let mut list: Vec<Vec<usize>> = Vec::new();
        let idx: Vec<usize> = batch
            .prompts
            .iter()
            .map(|p| {
                *uniq.entry(p.as_slice()).or_insert_with(|| {
                    list.push(p.clone());
                    list.len() - 1
                })
            })
            .collect();
        let text = net.encode_text(g, &list)?;
        let text_cls = g.gather_rows(text, &idx);

        if want_vtc {
            let cst_cls = g.gather_rows(vis.cls, &(n_st..n_st + n_cst).collect::<Vec<_>>());
            let v = net.project_vision(g, cst_cls);
            let t = net.project_text(g, text_cls);
            let l = l_vtc(g, v, t, 2 * k, lc.tau1, lc.vtc_include_positive, lc.vtc_pooled)?;
            out.l_vtc = Some(l);
            terms.push((lc.w_vtc, l));
        }

        if want_r {
            let maps = batch.masks.len();
            let mut visible = Vec::new();
            for m in &batch.masks {
                for (_, px) in &m.visible_patches {
                    visible.extend_from_slice(px);
                }
            }
            let vis_pos: Vec<Vec<usize>> = batch.masks.iter().map(MaskedCStMap::visible_positions).collect();
            let masked_pos: Vec<Vec<usize>> = batch.masks.iter().map(|m| m.masked_positions.clone()).collect();
            let m = vis_pos[0].len();
            let vin = g.constant(Tensor::from_f64(&[maps * m, pd], &visible));
            let enc = net.encode_vision_masked(g, vin, &vis_pos)?;
            let recon = net.tvr_reconstruct(g, enc, &vis_pos, &masked_pos, text_cls)?;
            let target = g.constant(Tensor::from_f64(&[maps * n, pd], &batch.cstmap_patches));
            let l = if lc.recon_masked_only {
                let rows: Vec<usize> =
                    masked_pos.iter().enumerate().flat_map(|(j, ps)| ps.iter().map(move |&p| j * n + p)).collect();
                if rows.is_empty() {
                    return invalid("masked-only reconstruction with no masked patch");
                }
                let r = g.gather_rows(recon, &rows);
                let t = g.gather_rows(target, &rows);
                l_r(g, r, t)
            } else {
                l_r(g, recon, target)
            };
            out.l_r = Some(l);
            terms.push((lc.w_r, l));
        }
    }

    let mut total: Option<Var> = None;
    for (w, v) in terms {
        let s = g.scale(v, w);
        total = Some(match total {
            Some(t) => g.add(t, s),
            None => s,
        });
    }
    out.total = total;
    Ok(out)
}
