//! Contrastive maps (positive half beside negative half), their ratio
//! prompts, the closed-vocabulary tokenizer and patch masking.

use std::collections::HashMap;
use std::str::FromStr;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::stmap::{default_ratio_bin, Ratio, StMap};

#[derive(Clone, Debug, PartialEq)]
pub struct CStMap {
    pub pixels: Vec<f64>,
    pub size: usize,
    pub left_mult: Ratio,
    pub right_mult: Ratio,
    /// `right_mult / left_mult`, i.e. the negative's multiplier.
    pub ratio: Ratio,
    /// Negative half placed on the left (side-swap flag).
    pub swapped: bool,
}

impl CStMap {
    #[inline]
    pub fn at(&self, row: usize, col: usize, c: usize) -> f64 {
        self.pixels[(row * self.size + col) * 3 + c]
    }
}

/// Every positive spliced with every negative: the centre `F` columns of the
/// side-by-side pair, i.e. columns `[F/2, F)` of the positive followed by
/// columns `[0, F/2)` of the negative. Output index is `a * k + b` for positive
/// `a` and negative `b`. With `swap` the negative's columns come first.
pub fn make_cstmaps(positives: &[StMap], negatives: &[StMap], swap: bool) -> Result<Vec<CStMap>> {
    let f = positives.first().map(|m| m.size).ok_or_else(|| Error::Invalid("no positives".into()))?;
    if f % 2 != 0 {
        return invalid(format!("map size {f} is odd"));
    }
    for m in positives.iter().chain(negatives) {
        if m.size != f || m.pixels.len() != f * f * 3 {
            return Err(Error::Shape(format!("map of size {} among maps of size {f}", m.size)));
        }
    }
    let h = f / 2;
    let mut out = Vec::with_capacity(positives.len() * negatives.len());
    for p in positives {
        for n in negatives {
            let (left, right) = if swap { (n, p) } else { (p, n) };
            let mut pixels = Vec::with_capacity(f * f * 3);
            for row in 0..f {
                let base = row * f * 3;
                pixels.extend_from_slice(&left.pixels[base + h * 3..base + f * 3]);
                pixels.extend_from_slice(&right.pixels[base..base + h * 3]);
            }
            out.push(CStMap {
                pixels,
                size: f,
                left_mult: left.f_mult,
                right_mult: right.f_mult,
                ratio: n.f_mult,
                swapped: swap,
            });
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Template {
    #[default]
    Default,
    T1,
    T2,
    T3,
}

impl Template {
    pub const ALL: [Template; 4] = [Template::Default, Template::T1, Template::T2, Template::T3];

    fn pattern(self) -> &'static str {
        match self {
            Template::Default => "the frequency of the horizontal color variation on the {a} side is {r} times of that on the {b} side of the image",
            Template::T1 => "the frequency of the horizontal color variation on the {a} side is {r} as high as on the {b} side of the image",
            Template::T2 => "the frequency of horizontal color variation on the {a} side is {r} as great as on the {b} side of the image",
            Template::T3 => "the horizontal color variation on the {a} side is {r} times as fast as on the {b} side of the image",
        }
    }
}

impl FromStr for Template {
    type Err = Error;

    fn from_str(s: &str) -> Result<Template> {
        match s.to_ascii_lowercase().as_str() {
            "default" => Ok(Template::Default),
            "t1" => Ok(Template::T1),
            "t2" => Ok(Template::T2),
            "t3" => Ok(Template::T3),
            _ => invalid(format!("unknown template {s:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PromptText {
    pub text: String,
    pub ratio_literal: String,
    pub tokens: Vec<usize>,
}

/// Describes the side holding the negative relative to the other side.
/// `swapped = false` is the default left-positive layout ("on the right side
/// is r times of that on the left side").
pub fn make_prompt(ratio: Ratio, template: Template, swapped: bool, vocab: &Vocab) -> Result<PromptText> {
    if !default_ratio_bin().contains(&ratio) {
        return invalid(format!("ratio {ratio} has no prompt literal"));
    }
    let (a, b) = if swapped { ("left", "right") } else { ("right", "left") };
    let literal = ratio.literal();
    let text = template.pattern().replace("{a}", a).replace("{b}", b).replace("{r}", &literal);
    let tokens = vocab.tokenize(&text).ids;
    Ok(PromptText { text, ratio_literal: literal, tokens })
}

pub const CLS: &str = "[CLS]";
pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const CLS_ID: usize = 0;
pub const PAD_ID: usize = 1;
pub const UNK_ID: usize = 2;
pub const TEXT_LEN: usize = 32;

#[derive(Clone, Debug, PartialEq)]
pub struct Tokenized {
    pub ids: Vec<usize>,
    pub unknown: usize,
}

/// Word-level vocabulary over every template word and ratio literal.
#[derive(Clone, Debug)]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, usize>,
    max_len: usize,
}

impl Default for Vocab {
    fn default() -> Self {
        Vocab::new(TEXT_LEN)
    }
}

impl Vocab {
    pub fn new(max_len: usize) -> Vocab {
        let mut words: Vec<String> = [CLS, PAD, UNK].iter().map(|s| s.to_string()).collect();
        let mut push = |w: &str| {
            if !words.iter().any(|x| x == w) {
                words.push(w.to_string());
            }
        };
        for t in Template::ALL {
            for w in t.pattern().split_whitespace() {
                match w {
                    "{a}" | "{b}" => {
                        push("left");
                        push("right");
                    }
                    "{r}" => {}
                    _ => push(w),
                }
            }
        }
        for r in default_ratio_bin() {
            push(&r.literal());
        }
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Vocab { words, index, max_len }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    /// Lower-cased whitespace split; `[CLS]` first, then padded or truncated
    /// to the fixed length.
    pub fn tokenize(&self, text: &str) -> Tokenized {
        let mut ids = vec![CLS_ID];
        let mut unknown = 0;
        for w in text.split_whitespace() {
            let w = w.to_lowercase();
            let w = w.trim_matches(|c: char| matches!(c, '.' | ',' | '"'));
            match self.index.get(w) {
                Some(&i) => ids.push(i),
                None => {
                    unknown += 1;
                    ids.push(UNK_ID);
                }
            }
        }
        if unknown > 0 {
            log::warn!("{unknown} unknown word(s) in prompt {text:?}");
        }
        ids.truncate(self.max_len);
        ids.resize(self.max_len, PAD_ID);
        Tokenized { ids, unknown }
    }

    pub fn detokenize(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&i| i != CLS_ID && i != PAD_ID)
            .map(|&i| self.words.get(i).map(String::as_str).unwrap_or(UNK))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Patch `idx` of an `f x f x 3` pixel buffer, laid out `(dy, dx, c)`.
pub fn extract_patch(pixels: &[f64], f: usize, p: usize, idx: usize) -> Vec<f64> {
    let per_row = f / p;
    let (pr, pc) = (idx / per_row, idx % per_row);
    let mut out = Vec::with_capacity(p * p * 3);
    for dy in 0..p {
        let base = ((pr * p + dy) * f + pc * p) * 3;
        out.extend_from_slice(&pixels[base..base + p * 3]);
    }
    out
}

/// All patches of a map, row-major: `(f/p)^2` rows of `p*p*3` values.
pub fn patchify(pixels: &[f64], f: usize, p: usize) -> Vec<f64> {
    let n = (f / p) * (f / p);
    (0..n).flat_map(|i| extract_patch(pixels, f, p, i)).collect()
}

/// Inverse of [`patchify`].
pub fn unpatchify(patches: &[f64], f: usize, p: usize) -> Vec<f64> {
    let per_row = f / p;
    let mut pixels = vec![0.0; f * f * 3];
    for (idx, patch) in patches.chunks(p * p * 3).enumerate() {
        let (pr, pc) = (idx / per_row, idx % per_row);
        for dy in 0..p {
            let base = ((pr * p + dy) * f + pc * p) * 3;
            pixels[base..base + p * 3].copy_from_slice(&patch[dy * p * 3..(dy + 1) * p * 3]);
        }
    }
    pixels
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskedCStMap {
    /// `(position, p*p*3 pixels)`, positions ascending.
    pub visible_patches: Vec<(usize, Vec<f64>)>,
    /// Ascending.
    pub masked_positions: Vec<usize>,
    pub b: f64,
    pub patch: usize,
}

impl MaskedCStMap {
    pub fn visible_positions(&self) -> Vec<usize> {
        self.visible_patches.iter().map(|(i, _)| *i).collect()
    }
}

/// Number of masked patches out of `n` at ratio `b`.
pub fn mask_count(n: usize, b: f64) -> usize {
    (b * n as f64).round() as usize
}

/// Masks a uniformly random subset of exactly `round(b n)` patches.
pub fn mask_cstmap<R: Rng + ?Sized>(m: &CStMap, b: f64, p: usize, rng: &mut R) -> Result<MaskedCStMap> {
    if p == 0 || m.size % p != 0 {
        return invalid(format!("patch size {p} does not divide map size {}", m.size));
    }
    if !(0.0..1.0).contains(&b) {
        return invalid(format!("masking ratio {b} outside [0, 1)"));
    }
    let n = (m.size / p) * (m.size / p);
    let k = mask_count(n, b);
    if k >= n {
        return invalid("masking ratio leaves no visible patch");
    }
    let mut masked = vec![false; n];
    for i in index::sample(rng, n, k) {
        masked[i] = true;
    }
    let masked_positions: Vec<usize> = (0..n).filter(|&i| masked[i]).collect();
    let visible_patches =
        (0..n).filter(|&i| !masked[i]).map(|i| (i, extract_patch(&m.pixels, m.size, p, i))).collect();
    Ok(MaskedCStMap { visible_patches, masked_positions, b, patch: p })
}
