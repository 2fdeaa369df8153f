//! Text-guided reconstruction of masked patches.
//!
//! Masked slots are filled with a learned token plus the vision positional
//! embedding of the slot, visible slots with encoder outputs. Each of the
//! three blocks applies self-attention, cross-attention to the prompt's
//! `[CLS]` embedding (a single key/value token, so the attention weight is 1
//! and the update depends on the text only), and an MLP, all pre-norm with
//! residuals. A per-token linear map then produces `p x p x 3` pixels.

use rand::Rng;
use rppgvl_tape::{AttnSpec, Graph, ParamId, Real, Slot, Var};

use crate::encoders::{linear, mlp, norm, self_attention, Init, ModelConfig, Net};
use crate::error::{invalid, Result};

pub const TVR_BLOCKS: usize = 3;

#[derive(Clone, Debug)]
pub struct TvrBlockIds {
    pub ln_sa: (ParamId, ParamId),
    pub sa_qkv: (ParamId, ParamId),
    pub sa_proj: (ParamId, ParamId),
    pub ln_ca: (ParamId, ParamId),
    pub ca_q: (ParamId, ParamId),
    pub ca_kv: (ParamId, ParamId),
    pub ca_proj: (ParamId, ParamId),
    pub ln_ff: (ParamId, ParamId),
    pub fc1: (ParamId, ParamId),
    pub fc2: (ParamId, ParamId),
}

#[derive(Clone, Debug)]
pub struct TvrIds {
    pub mask_token: ParamId,
    pub blocks: Vec<TvrBlockIds>,
    pub out: (ParamId, ParamId),
}

impl TvrIds {
    pub(crate) fn new<T: Real, R: Rng>(init: &mut Init<'_, T, R>, cfg: &ModelConfig) -> TvrIds {
        let d = cfg.embed_dim;
        let hidden = d * cfg.mlp_ratio;
        let mask_token = init.embedding("tvr.mask_token", &[1, d]);
        let blocks = (0..TVR_BLOCKS)
            .map(|i| {
                let n = format!("tvr.block{i}");
                TvrBlockIds {
                    ln_sa: init.norm(&format!("{n}.ln_sa"), d),
                    sa_qkv: init.linear(&format!("{n}.sa_qkv"), d, 3 * d),
                    sa_proj: init.linear(&format!("{n}.sa_proj"), d, d),
                    ln_ca: init.norm(&format!("{n}.ln_ca"), d),
                    ca_q: init.linear(&format!("{n}.ca_q"), d, d),
                    ca_kv: init.linear(&format!("{n}.ca_kv"), d, 2 * d),
                    ca_proj: init.linear(&format!("{n}.ca_proj"), d, d),
                    ln_ff: init.norm(&format!("{n}.ln_ff"), d),
                    fc1: init.linear(&format!("{n}.fc1"), d, hidden),
                    fc2: init.linear(&format!("{n}.fc2"), hidden, d),
                }
            })
            .collect();
        let out = init.linear("tvr.out", d, cfg.patch_dim());
        TvrIds { mask_token, blocks, out }
    }
}

impl Net {
    /// Reconstructs `B` maps as patch rows `[B * n_patches, patch_dim]`.
    ///
    /// `visible` holds `[B * m, d]` encoder outputs in the order of
    /// `visible_pos`; `masked_pos[b]` are the remaining slots of map `b`;
    /// `text_cls` is `[B, d]`.
    pub fn tvr_reconstruct<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        visible: Var,
        visible_pos: &[Vec<usize>],
        masked_pos: &[Vec<usize>],
        text_cls: Var,
    ) -> Result<Var> {
        let maps = visible_pos.len();
        let n = self.cfg.n_patches();
        let d = self.cfg.embed_dim;
        if masked_pos.len() != maps || g.shape(text_cls) != [maps, d] {
            return invalid("visible, masked and text inputs disagree on the number of maps");
        }
        let m = visible_pos.first().map(Vec::len).unwrap_or(0);
        let k = n - m.min(n);
        // slot -> row of `all`, where `all` = [visible rows; mask rows]
        let mut order = vec![usize::MAX; maps * n];
        for b in 0..maps {
            if visible_pos[b].len() != m || masked_pos[b].len() != k {
                return invalid("maps in one batch must have equal visible counts");
            }
            for (j, &p) in visible_pos[b].iter().enumerate() {
                if p >= n || order[b * n + p] != usize::MAX {
                    return invalid(format!("visible position {p} repeated or out of range"));
                }
                order[b * n + p] = b * m + j;
            }
            for (j, &p) in masked_pos[b].iter().enumerate() {
                if p >= n || order[b * n + p] != usize::MAX {
                    return invalid(format!("masked position {p} conflicts with another slot"));
                }
                order[b * n + p] = maps * m + b * k + j;
            }
        }
        let mut parts = Vec::new();
        if m > 0 {
            parts.push(visible);
        }
        if k > 0 {
            let tok = g.param(self.tvr.mask_token);
            let tok_rows = g.gather_rows(tok, &vec![0; maps * k]);
            let pos = g.param(self.vision.pos);
            let pos_idx: Vec<usize> = masked_pos.iter().flatten().map(|&p| p + 1).collect();
            let pos_rows = g.gather_rows(pos, &pos_idx);
            parts.push(g.add(tok_rows, pos_rows));
        }
        let all = g.concat_rows(&parts);
        let mut z = g.gather_rows(all, &order);
        let heads = self.cfg.heads;
        let cross = AttnSpec { groups: maps, tq: n, tk: 1, heads, dim: d };
        for blk in &self.tvr.blocks {
            let h = norm(g, z, blk.ln_sa);
            let sa = self_attention(g, h, blk.sa_qkv, blk.sa_proj, maps, n, heads, None);
            let v_sa = g.add(z, sa);
            let h = norm(g, v_sa, blk.ln_ca);
            let q = linear(g, h, blk.ca_q);
            let kv = linear(g, text_cls, blk.ca_kv);
            let ca = g.attention(q.into(), Slot { var: kv, col: 0 }, Slot { var: kv, col: d }, cross, None);
            let ca = linear(g, ca, blk.ca_proj);
            let v_ca = g.add(v_sa, ca);
            let h = norm(g, v_ca, blk.ln_ff);
            let f = mlp(g, h, blk.fc1, blk.fc2);
            z = g.add(v_ca, f);
        }
        Ok(linear(g, z, self.tvr.out))
    }
}
