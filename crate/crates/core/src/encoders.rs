//! Toy vision and text transformers, projection heads, the rPPG head and the
//! frequency-rank scorer, built on the `rppgvl-tape` graph.
//!
//! All forward functions are batched: several maps or prompts go through one
//! set of matrix products, with attention restricted to each sequence.

use rand::Rng;
use rppgvl_tape::{AttnSpec, Graph, ParamId, ParamStore, Real, Slot, Var};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::pairs::PAD_ID;
use crate::tvr::TvrIds;

const LN_EPS: f64 = 1e-6;

/// What the rank scorer reads.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RankInput {
    /// Concatenated raw signals.
    #[default]
    Raw,
    /// Concatenated band-limited normalised PSDs.
    Psd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub map_size: usize,
    pub patch: usize,
    pub embed_dim: usize,
    pub sim_dim: usize,
    pub vision_depth: usize,
    pub text_depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub text_len: usize,
    pub init_std: f64,
    pub rank_input: RankInput,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            map_size: 64,
            patch: 8,
            embed_dim: 64,
            sim_dim: 64,
            vision_depth: 4,
            text_depth: 2,
            heads: 4,
            mlp_ratio: 4,
            text_len: crate::pairs::TEXT_LEN,
            init_std: 0.02,
            rank_input: RankInput::Raw,
        }
    }
}

impl ModelConfig {
    pub fn n_patches(&self) -> usize {
        let s = self.map_size / self.patch;
        s * s
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * 3
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.map_size % self.patch != 0 {
            return invalid(format!("patch {} does not divide map size {}", self.patch, self.map_size));
        }
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return invalid(format!("embed_dim {} not divisible by {} heads", self.embed_dim, self.heads));
        }
        if self.embed_dim == 0 || self.sim_dim == 0 || self.mlp_ratio == 0 || self.text_len < 2 {
            return invalid("model dims must be positive (text_len >= 2)");
        }
        Ok(())
    }
}

/// Pre-norm transformer block parameters.
#[derive(Clone, Debug)]
pub struct BlockIds {
    pub ln1: (ParamId, ParamId),
    pub qkv: (ParamId, ParamId),
    pub proj: (ParamId, ParamId),
    pub ln2: (ParamId, ParamId),
    pub fc1: (ParamId, ParamId),
    pub fc2: (ParamId, ParamId),
}

pub(crate) struct Init<'a, T: Real, R: Rng> {
    pub store: &'a mut ParamStore<T>,
    pub rng: &'a mut R,
    pub std: f64,
}

impl<T: Real, R: Rng> Init<'_, T, R> {
    pub fn linear(&mut self, name: &str, cin: usize, cout: usize) -> (ParamId, ParamId) {
        let w = self.store.add_trunc_normal(&format!("{name}.w"), &[cin, cout], self.std, self.rng);
        let b = self.store.add_zeros(&format!("{name}.b"), &[cout]);
        (w, b)
    }

    pub fn norm(&mut self, name: &str, d: usize) -> (ParamId, ParamId) {
        (self.store.add_ones(&format!("{name}.g"), &[d]), self.store.add_zeros(&format!("{name}.b"), &[d]))
    }

    pub fn embedding(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.store.add_embedding(name, shape, self.std, self.rng)
    }

    pub fn block(&mut self, name: &str, d: usize, hidden: usize) -> BlockIds {
        BlockIds {
            ln1: self.norm(&format!("{name}.ln1"), d),
            qkv: self.linear(&format!("{name}.qkv"), d, 3 * d),
            proj: self.linear(&format!("{name}.proj"), d, d),
            ln2: self.norm(&format!("{name}.ln2"), d),
            fc1: self.linear(&format!("{name}.fc1"), d, hidden),
            fc2: self.linear(&format!("{name}.fc2"), hidden, d),
        }
    }
}

#[derive(Clone, Debug)]
pub struct VisionIds {
    pub patch_embed: (ParamId, ParamId),
    pub cls: ParamId,
    /// `[(n_patches + 1), d]`; row 0 belongs to `[CLS]`.
    pub pos: ParamId,
    pub blocks: Vec<BlockIds>,
    pub ln: (ParamId, ParamId),
}

#[derive(Clone, Debug)]
pub struct TextIds {
    pub tok: ParamId,
    pub pos: ParamId,
    pub blocks: Vec<BlockIds>,
    pub ln: (ParamId, ParamId),
}

#[derive(Clone, Debug)]
pub struct HeadIds {
    pub vision_proj: (ParamId, ParamId),
    pub text_proj: (ParamId, ParamId),
    pub rppg: (ParamId, ParamId),
    pub rank: (ParamId, ParamId),
}

/// Parameter handles plus the static shape information needed to run them.
#[derive(Clone, Debug)]
pub struct Net {
    pub cfg: ModelConfig,
    pub vocab_size: usize,
    /// Signals per anchor fed to the rank scorer (2 positives + k negatives).
    pub n_signals: usize,
    /// Features per signal seen by the rank scorer.
    pub rank_features: usize,
    pub vision: VisionIds,
    pub text: TextIds,
    pub heads: HeadIds,
    pub tvr: TvrIds,
}

/// A network together with its parameter values.
#[derive(Clone, Debug)]
pub struct Model<T: Real> {
    pub net: Net,
    pub params: ParamStore<T>,
}

impl<T: Real> Model<T> {
    /// `psd_bins` is the per-signal width of the rank scorer when it reads PSDs.
    pub fn new<R: Rng>(cfg: &ModelConfig, vocab_size: usize, n_signals: usize, psd_bins: usize, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamStore::new();
        let d = cfg.embed_dim;
        let hidden = d * cfg.mlp_ratio;
        let mut init = Init { store: &mut params, rng, std: cfg.init_std };
        let vision = VisionIds {
            patch_embed: init.linear("vision.patch_embed", cfg.patch_dim(), d),
            cls: init.embedding("vision.cls", &[1, d]),
            pos: init.embedding("vision.pos", &[cfg.n_patches() + 1, d]),
            blocks: (0..cfg.vision_depth).map(|i| init.block(&format!("vision.block{i}"), d, hidden)).collect(),
            ln: init.norm("vision.ln", d),
        };
        let text = TextIds {
            tok: init.embedding("text.tok", &[vocab_size, d]),
            pos: init.embedding("text.pos", &[cfg.text_len, d]),
            blocks: (0..cfg.text_depth).map(|i| init.block(&format!("text.block{i}"), d, hidden)).collect(),
            ln: init.norm("text.ln", d),
        };
        let rank_features = match cfg.rank_input {
            RankInput::Raw => cfg.map_size,
            RankInput::Psd => psd_bins,
        };
        let heads = HeadIds {
            vision_proj: init.linear("head.vision_proj", d, cfg.sim_dim),
            text_proj: init.linear("head.text_proj", d, cfg.sim_dim),
            rppg: init.linear("head.rppg", d, cfg.map_size),
            rank: init.linear("head.rank", n_signals * rank_features, n_signals),
        };
        let tvr = TvrIds::new(&mut init, cfg);
        let net = Net { cfg: cfg.clone(), vocab_size, n_signals, rank_features, vision, text, heads, tvr };
        Ok(Model { net, params })
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model { net: self.net.clone(), params: self.params.cast() }
    }
}

pub(crate) fn linear<T: Real>(g: &mut Graph<'_, T>, x: Var, ids: (ParamId, ParamId)) -> Var {
    let (w, b) = (g.param(ids.0), g.param(ids.1));
    g.linear(x, w, Some(b))
}

pub(crate) fn norm<T: Real>(g: &mut Graph<'_, T>, x: Var, ids: (ParamId, ParamId)) -> Var {
    let (w, b) = (g.param(ids.0), g.param(ids.1));
    g.layer_norm(x, w, b, LN_EPS)
}

pub(crate) fn mlp<T: Real>(g: &mut Graph<'_, T>, x: Var, fc1: (ParamId, ParamId), fc2: (ParamId, ParamId)) -> Var {
    let h = linear(g, x, fc1);
    let h = g.gelu(h);
    linear(g, h, fc2)
}

/// Multi-head self-attention over `groups` sequences of `t` rows each.
pub(crate) fn self_attention<T: Real>(
    g: &mut Graph<'_, T>,
    x: Var,
    qkv: (ParamId, ParamId),
    proj: (ParamId, ParamId),
    groups: usize,
    t: usize,
    heads: usize,
    key_mask: Option<&[bool]>,
) -> Var {
    let d = g.shape(x)[1];
    let packed = linear(g, x, qkv);
    let spec = AttnSpec { groups, tq: t, tk: t, heads, dim: d };
    let a = g.attention(
        Slot { var: packed, col: 0 },
        Slot { var: packed, col: d },
        Slot { var: packed, col: 2 * d },
        spec,
        key_mask,
    );
    linear(g, a, proj)
}

/// `x + SA(LN x)` then `x + MLP(LN x)`.
pub(crate) fn block<T: Real>(
    g: &mut Graph<'_, T>,
    ids: &BlockIds,
    x: Var,
    groups: usize,
    t: usize,
    heads: usize,
    key_mask: Option<&[bool]>,
) -> Var {
    let h = norm(g, x, ids.ln1);
    let a = self_attention(g, h, ids.qkv, ids.proj, groups, t, heads, key_mask);
    let x = g.add(x, a);
    let h = norm(g, x, ids.ln2);
    let f = mlp(g, h, ids.fc1, ids.fc2);
    g.add(x, f)
}

/// Rows of every sequence except its first (`[CLS]`) token.
pub(crate) fn drop_first(groups: usize, t: usize) -> Vec<usize> {
    (0..groups).flat_map(|b| (1..t).map(move |i| b * t + i)).collect()
}

pub(crate) fn firsts(groups: usize, t: usize) -> Vec<usize> {
    (0..groups).map(|b| b * t).collect()
}

#[derive(Clone, Copy, Debug)]
pub struct VisionOut {
    /// `[B, d]`
    pub cls: Var,
    /// `[B * n_patches, d]`, row-major patch order per map.
    pub tokens: Var,
}

impl Net {
    pub fn embed_dim(&self) -> usize {
        self.cfg.embed_dim
    }

    fn vision_trunk<T: Real>(&self, g: &mut Graph<'_, T>, x: Var, groups: usize, t: usize) -> Var {
        let mut x = x;
        for b in &self.vision.blocks {
            x = block(g, b, x, groups, t, self.cfg.heads, None);
        }
        norm(g, x, self.vision.ln)
    }

    /// Encodes `B` whole maps given as patch rows `[B * n_patches, patch_dim]`.
    pub fn encode_vision<T: Real>(&self, g: &mut Graph<'_, T>, patches: Var, maps: usize) -> VisionOut {
        let n = self.cfg.n_patches();
        assert_eq!(g.shape(patches)[0], maps * n, "patch rows do not match map count");
        let emb = linear(g, patches, self.vision.patch_embed);
        let cls = g.param(self.vision.cls);
        let cls_rows = g.gather_rows(cls, &vec![0; maps]);
        let all = g.concat_rows(&[cls_rows, emb]);
        let order: Vec<usize> =
            (0..maps).flat_map(|b| std::iter::once(b).chain((0..n).map(move |i| maps + b * n + i))).collect();
        let seq = g.gather_rows(all, &order);
        let pos = g.param(self.vision.pos);
        let x = g.add(seq, pos);
        let out = self.vision_trunk(g, x, maps, n + 1);
        VisionOut { cls: g.gather_rows(out, &firsts(maps, n + 1)), tokens: g.gather_rows(out, &drop_first(maps, n + 1)) }
    }

    /// Encodes only the visible patches `[B * m, patch_dim]` of `B` masked maps,
    /// each with its own positional embedding; `positions[b]` lists the patch
    /// indices of map `b` (all of length `m`). Returns `[B * m, d]`.
    pub fn encode_vision_masked<T: Real>(&self, g: &mut Graph<'_, T>, visible: Var, positions: &[Vec<usize>]) -> Result<Var> {
        let maps = positions.len();
        let m = positions.first().map(Vec::len).unwrap_or(0);
        if m == 0 {
            return invalid("no visible patches to encode");
        }
        if positions.iter().any(|p| p.len() != m) {
            return invalid("maps in one batch must have equal visible counts");
        }
        let n = self.cfg.n_patches();
        if positions.iter().flatten().any(|&i| i >= n) {
            return invalid("patch position out of range");
        }
        assert_eq!(g.shape(visible)[0], maps * m, "visible rows do not match positions");
        let emb = linear(g, visible, self.vision.patch_embed);
        let pos = g.param(self.vision.pos);
        let pos_idx: Vec<usize> = positions.iter().flatten().map(|&i| i + 1).collect();
        let pos_rows = g.gather_rows(pos, &pos_idx);
        let emb = g.add(emb, pos_rows);
        let cls = g.param(self.vision.cls);
        let cls_rows = g.gather_rows(cls, &vec![0; maps]);
        let cls_pos = g.gather_rows(pos, &vec![0; maps]);
        let cls_rows = g.add(cls_rows, cls_pos);
        let all = g.concat_rows(&[cls_rows, emb]);
        let order: Vec<usize> =
            (0..maps).flat_map(|b| std::iter::once(b).chain((0..m).map(move |i| maps + b * m + i))).collect();
        let x = g.gather_rows(all, &order);
        let out = self.vision_trunk(g, x, maps, m + 1);
        Ok(g.gather_rows(out, &drop_first(maps, m + 1)))
    }

    /// Raw `[CLS]` embeddings `[P, d]` of `P` token sequences; padding keys are
    /// masked out of attention.
    pub fn encode_text<T: Real>(&self, g: &mut Graph<'_, T>, prompts: &[Vec<usize>]) -> Result<Var> {
        let t = self.cfg.text_len;
        let mut ids = Vec::with_capacity(prompts.len() * t);
        for p in prompts {
            if p.len() != t {
                return invalid(format!("token sequence of length {} (expected {t})", p.len()));
            }
            if let Some(&bad) = p.iter().find(|&&i| i >= self.vocab_size) {
                return invalid(format!("token id {bad} outside vocabulary of {}", self.vocab_size));
            }
            ids.extend_from_slice(p);
        }
        let mask: Vec<bool> = ids.iter().map(|&i| i != PAD_ID).collect();
        let tok = g.param(self.text.tok);
        let x = g.gather_rows(tok, &ids);
        let pos = g.param(self.text.pos);
        let mut x = g.add(x, pos);
        for b in &self.text.blocks {
            x = block(g, b, x, prompts.len(), t, self.cfg.heads, Some(&mask));
        }
        let x = norm(g, x, self.text.ln);
        Ok(g.gather_rows(x, &firsts(prompts.len(), t)))
    }

    pub fn project_vision<T: Real>(&self, g: &mut Graph<'_, T>, cls: Var) -> Var {
        linear(g, cls, self.heads.vision_proj)
    }

    pub fn project_text<T: Real>(&self, g: &mut Graph<'_, T>, cls: Var) -> Var {
        linear(g, cls, self.heads.text_proj)
    }

    /// `[N, d]` embeddings to `[N, F]` signals.
    pub fn rppg<T: Real>(&self, g: &mut Graph<'_, T>, cls: Var) -> Var {
        linear(g, cls, self.heads.rppg)
    }

    /// Scores `[B, n_signals]` from per-signal features `[B * n_signals, rank_features]`
    /// ordered `(p1, p2, n1, .., nk)` within each anchor.
    pub fn rank_scores<T: Real>(&self, g: &mut Graph<'_, T>, features: Var) -> Result<Var> {
        let rows = g.shape(features)[0];
        let w = g.shape(features)[1];
        if w != self.rank_features || rows % self.n_signals != 0 {
            return invalid(format!(
                "rank scorer expects rows of {} features in groups of {}, got [{rows}, {w}]",
                self.rank_features, self.n_signals
            ));
        }
        let flat = g.reshape(features, &[rows / self.n_signals, self.n_signals * w]);
        Ok(linear(g, flat, self.heads.rank))
    }
}
