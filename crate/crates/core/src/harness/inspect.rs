//! Debug images for one sample: its STMap, the contrastive maps, a mask and
//! the model's reconstruction of the masked map.

use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rppgvl_tape::{Graph, Tensor};

use super::checkpoint::{load_model, Checkpoint};
use super::config::TrainConfig;
use super::train::Trainer;
use crate::encoders::Model;
use crate::error::{Error, IoContext, Result};
use crate::pairs::{make_cstmaps, make_prompt, mask_cstmap, patchify, unpatchify, MaskedCStMap, Vocab};
use crate::stmap::{central_stmap, make_augmented_set};
use crate::synthgen::Dataset;

/// Each map pixel becomes a `SCALE x SCALE` block.
const SCALE: u32 = 4;
const MASK_GREY: f64 = 0.35;

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes an `f x f x 3` map with values in `[0, 1]` as a PNG.
pub fn save_map(path: &Path, pixels: &[f64], f: usize) -> Result<()> {
    let side = f as u32 * SCALE;
    let img = RgbImage::from_fn(side, side, |x, y| {
        let (row, col) = ((y / SCALE) as usize, (x / SCALE) as usize);
        let i = (row * f + col) * 3;
        Rgb([to_u8(pixels[i]), to_u8(pixels[i + 1]), to_u8(pixels[i + 2])])
    });
    img.save(path).map_err(|e| Error::Format { path: path.to_path_buf(), msg: e.to_string() })
}

fn masked_pixels(m: &MaskedCStMap, full: &[f64], f: usize) -> Vec<f64> {
    let p = m.patch;
    let n = f / p;
    let mut px = full.to_vec();
    for &pos in &m.masked_positions {
        let (pr, pc) = (pos / n, pos % n);
        for r in pr * p..(pr + 1) * p {
            for c in pc * p..(pc + 1) * p {
                px[(r * f + c) * 3..(r * f + c) * 3 + 3].fill(MASK_GREY);
            }
        }
    }
    px
}

/// Reconstruction of one masked map, conditioned on `prompt`.
fn reconstruct(model: &Model<f32>, m: &MaskedCStMap, prompt: &[usize]) -> Result<Vec<f64>> {
    let cfg = &model.net.cfg;
    let pd = cfg.patch_dim();
    let vis_pos = vec![m.visible_positions()];
    let masked_pos = vec![m.masked_positions.clone()];
    let visible: Vec<f64> = m.visible_patches.iter().flat_map(|(_, px)| px.iter().copied()).collect();
    let mut g = Graph::new(&model.params);
    let vin = g.constant(Tensor::from_f64(&[vis_pos[0].len(), pd], &visible));
    let enc = model.net.encode_vision_masked(&mut g, vin, &vis_pos)?;
    let text = model.net.encode_text(&mut g, &[prompt.to_vec()])?;
    let recon = model.net.tvr_reconstruct(&mut g, enc, &vis_pos, &masked_pos, text)?;
    Ok(unpatchify(&g.value(recon).to_f64(), cfg.map_size, cfg.patch))
}

/// Writes images for sample `id` into `out` and returns the written paths.
/// Without a checkpoint the reconstruction comes from a freshly initialised model.
pub fn inspect(cfg: &TrainConfig, ds: &Dataset, id: &str, checkpoint: Option<&Path>, out: &Path) -> Result<Vec<PathBuf>> {
    let sample = ds
        .samples
        .iter()
        .find(|s| s.entry.id == id)
        .ok_or_else(|| Error::Invalid(format!("no sample with id {id:?}")))?;
    let model = match checkpoint {
        Some(p) => load_model(&Checkpoint::load(p)?, ds)?,
        None => Trainer::new(cfg.clone(), ds)?.model,
    };
    let mc = &model.net.cfg;
    let f = mc.map_size;
    fs::create_dir_all(out).at(out)?;
    let mut written = Vec::new();
    let mut save = |name: String, px: &[f64]| -> Result<()> {
        let path = out.join(name);
        save_map(&path, px, f)?;
        written.push(path);
        Ok(())
    };

    save("stmap.png".into(), &central_stmap(&sample.clip, f)?.pixels)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    let set = make_augmented_set(&sample.clip, &cfg.aug, f, &mut rng)?;
    let cst = make_cstmaps(&set.positives, &set.negatives, cfg.train.swap_sides)?;
    let vocab = Vocab::new(mc.text_len);
    let mut prompts = String::new();
    for (i, c) in cst.iter().enumerate() {
        save(format!("cstmap_{i}.png"), &c.pixels)?;
        let p = make_prompt(c.ratio, cfg.train.template, c.swapped, &vocab)?;
        prompts.push_str(&format!("cstmap_{i}.png\t{}\n", p.text));
    }
    let first = &cst[0];
    let masked = mask_cstmap(first, cfg.train.mask_ratio, mc.patch, &mut rng)?;
    save("mask.png".into(), &masked_pixels(&masked, &first.pixels, f))?;
    let prompt = make_prompt(first.ratio, cfg.train.template, first.swapped, &vocab)?;
    let recon = reconstruct(&model, &masked, &prompt.tokens)?;
    save("reconstruction.png".into(), &recon)?;
    // visible patches from the input, masked ones from the model
    let mut merged = patchify(&recon, f, mc.patch);
    let pd = mc.patch_dim();
    for (pos, px) in &masked.visible_patches {
        merged[pos * pd..(pos + 1) * pd].copy_from_slice(px);
    }
    save("reconstruction_merged.png".into(), &unpatchify(&merged, f, mc.patch))?;
    let path = out.join("prompts.tsv");
    fs::write(&path, prompts).at(&path)?;
    written.push(path);
    Ok(written)
}
