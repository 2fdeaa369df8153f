//! Reconstruction, vision-text contrast, frequency contrast and frequency
//! ranking losses, plus the optional supervised Pearson loss.
//!
//! Each loss is a graph function so gradients flow to the model; the `loss_*`
//! functions evaluate the same code on plain `f64` inputs.

use rppgvl_tape::{Graph, Real, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::spectrum::{band_bins, HR_BAND};
use crate::stmap::Ratio;

/// Objective used for the rank head.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RankObjective {
    /// Pairwise logistic loss over rank labels.
    #[default]
    Pairwise,
    /// Regress the absolute frequency multipliers (ablation only).
    Afr,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub tau1: f64,
    pub tau2: f64,
    pub band: (f64, f64),
    pub n_fft: usize,
    pub w_r: f64,
    pub w_vtc: f64,
    pub w_fc: f64,
    pub w_fr: f64,
    /// Weight of the supervised Pearson term on labelled anchors.
    pub w_pearson: f64,
    /// Keep the matching pair in the vision-text denominators.
    pub vtc_include_positive: bool,
    /// Contrast vision-text pairs across the whole batch instead of per anchor.
    pub vtc_pooled: bool,
    /// Score reconstruction on masked patches only.
    pub recon_masked_only: bool,
    /// Remove each signal's mean before its PSD.
    pub psd_center: bool,
    pub rank_objective: RankObjective,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            tau1: 0.07,
            tau2: 0.08,
            band: HR_BAND,
            n_fft: 512,
            w_r: 1.0,
            w_vtc: 1.0,
            w_fc: 1.0,
            w_fr: 1.0,
            w_pearson: 1.0,
            vtc_include_positive: false,
            vtc_pooled: false,
            recon_masked_only: false,
            psd_center: false,
            rank_objective: RankObjective::Pairwise,
        }
    }
}

impl LossConfig {
    pub fn validate(&self, fs: f64) -> Result<()> {
        if !(self.tau1 > 0.0 && self.tau2 > 0.0) {
            return invalid("temperatures must be positive");
        }
        if !(self.band.0 > 0.0 && self.band.0 < self.band.1 && self.band.1 < fs / 2.0) {
            return invalid(format!("PSD band {:?} must lie inside (0, {})", self.band, fs / 2.0));
        }
        for (name, w) in [("w_r", self.w_r), ("w_vtc", self.w_vtc), ("w_fc", self.w_fc), ("w_fr", self.w_fr)] {
            if !(w >= 0.0 && w.is_finite()) {
                return invalid(format!("{name} must be finite and non-negative"));
            }
        }
        Ok(())
    }
}

/// DFT rows restricted to the band, as `[F, bins]` cosine and sine tables.
#[derive(Clone, Debug)]
pub struct PsdBasis {
    pub len: usize,
    pub fs: f64,
    pub n_fft: usize,
    pub bins: Vec<usize>,
    cos: Vec<f64>,
    sin: Vec<f64>,
}

impl PsdBasis {
    pub fn new(len: usize, fs: f64, n_fft: usize, band: (f64, f64), center: bool) -> Result<PsdBasis> {
        if len == 0 || n_fft < len {
            return invalid(format!("n_fft {n_fft} shorter than signal length {len}"));
        }
        let bins: Vec<usize> = band_bins(fs, n_fft, band).collect();
        if bins.is_empty() {
            return invalid(format!("band {band:?} holds no FFT bin at fs {fs}, n_fft {n_fft}"));
        }
        let nb = bins.len();
        let mut cos = vec![0.0; len * nb];
        let mut sin = vec![0.0; len * nb];
        for n in 0..len {
            for (j, &k) in bins.iter().enumerate() {
                let ph = 2.0 * std::f64::consts::PI * ((k * n) % n_fft) as f64 / n_fft as f64;
                cos[n * nb + j] = ph.cos();
                sin[n * nb + j] = ph.sin();
            }
        }
        if center {
            // fold mean removal into the tables: (I - 11^T / F) C
            for tab in [&mut cos, &mut sin] {
                for j in 0..nb {
                    let mean = (0..len).map(|n| tab[n * nb + j]).sum::<f64>() / len as f64;
                    for n in 0..len {
                        tab[n * nb + j] -= mean;
                    }
                }
            }
        }
        Ok(PsdBasis { len, fs, n_fft, bins, cos, sin })
    }

    pub fn from_config(len: usize, fs: f64, cfg: &LossConfig) -> Result<PsdBasis> {
        PsdBasis::new(len, fs, cfg.n_fft, cfg.band, cfg.psd_center)
    }

    pub fn n_bins(&self) -> usize {
        self.bins.len()
    }

    pub fn freqs(&self) -> Vec<f64> {
        self.bins.iter().map(|&k| k as f64 * self.fs / self.n_fft as f64).collect()
    }
}

/// Band-limited power `[N, bins]` of signals `[N, F]`, each row summing to 1
/// (an all-zero row becomes uniform).
pub fn psd<T: Real>(g: &mut Graph<'_, T>, basis: &PsdBasis, y: Var) -> Var {
    assert_eq!(g.shape(y)[1], basis.len, "signal length does not match PSD basis");
    let nb = basis.n_bins();
    let c = g.constant(Tensor::from_f64(&[basis.len, nb], &basis.cos));
    let s = g.constant(Tensor::from_f64(&[basis.len, nb], &basis.sin));
    let re = g.matmul(y, c);
    let im = g.matmul(y, s);
    let re2 = g.sqr(re);
    let im2 = g.sqr(im);
    let p = g.add(re2, im2);
    let zero_rows = g.value(p).data().chunks(nb).filter(|r| r.iter().all(|v| *v == T::zero())).count();
    if zero_rows > 0 {
        log::warn!("{zero_rows} signal(s) with no in-band power; using a uniform PSD");
    }
    g.row_normalize_sum(p)
}

/// Mean squared error between reconstruction and target, over all entries.
pub fn l_r<T: Real>(g: &mut Graph<'_, T>, recon: Var, target: Var) -> Var {
    let d = g.sub(recon, target);
    let d = g.sqr(d);
    g.mean(d)
}

fn check_rows_nonzero<T: Real>(g: &Graph<'_, T>, v: Var, what: &str) -> Result<()> {
    let t = g.value(v);
    for row in t.data().chunks(t.cols()) {
        if row.iter().all(|x| *x == T::zero()) {
            return invalid(format!("zero-norm {what} embedding: cosine similarity undefined"));
        }
    }
    Ok(())
}

/// Symmetric vision-text contrast over groups of `group` pairs. Row `j` of
/// `vision` matches row `j` of `text`. Denominators run over the other pairs
/// of the same group (or batch when `pooled`), plus pair `j` itself when
/// `include_positive`.
pub fn l_vtc<T: Real>(
    g: &mut Graph<'_, T>,
    vision: Var,
    text: Var,
    group: usize,
    tau: f64,
    include_positive: bool,
    pooled: bool,
) -> Result<Var> {
    let n = g.shape(vision)[0];
    if g.shape(text)[0] != n || group == 0 || n % group != 0 {
        return invalid(format!("{n} vision rows, {} text rows, group {group}", g.shape(text)[0]));
    }
    check_rows_nonzero(g, vision, "vision")?;
    check_rows_nonzero(g, text, "text")?;
    let v = g.l2_normalize_rows(vision);
    let t = g.l2_normalize_rows(text);
    let sim = g.matmul_t(v, false, t, true);
    let logits = g.scale(sim, 1.0 / tau);
    let mut mask = vec![f64::NEG_INFINITY; n * n];
    for j in 0..n {
        for l in 0..n {
            let same = pooled || j / group == l / group;
            if same && (l != j || include_positive) {
                mask[j * n + l] = 0.0;
            }
        }
    }
    if n == 1 && !include_positive {
        return invalid("vision-text contrast needs at least two pairs");
    }
    let mask = g.constant(Tensor::from_f64(&[n, n], &mask));
    let flat = g.reshape(logits, &[n * n, 1]);
    let diag = g.gather_rows(flat, &(0..n).map(|j| j * n + j).collect::<Vec<_>>());
    let diag = g.reshape(diag, &[n]);
    let rows = g.add(logits, mask);
    let den_v = g.row_logsumexp(rows);
    let lt = g.transpose(logits);
    let cols = g.add(lt, mask);
    let den_t = g.row_logsumexp(cols);
    let a = g.sub(den_v, diag);
    let b = g.sub(den_t, diag);
    let s = g.add(a, b);
    Ok(g.mean(s))
}

/// Frequency contrast from PSD rows `[B * (2 + k), bins]` ordered
/// `(p1, p2, n1, .., nk)` per anchor:
/// `log(exp(e(p1,p2)/tau) / sum_i [exp(e(p1,n_i)/tau) + exp(e(p2,n_i)/tau)] + 1)`,
/// evaluated as `softplus(e_pos/tau - logsumexp(e_neg/tau))`, averaged over anchors.
pub fn l_fc<T: Real>(g: &mut Graph<'_, T>, psd: Var, k: usize, tau: f64) -> Result<Var> {
    let rows = g.shape(psd)[0];
    let nb = g.shape(psd)[1];
    let ns = 2 + k;
    if k == 0 || rows % ns != 0 {
        return invalid(format!("{rows} PSD rows are not groups of {ns}"));
    }
    let anchors = rows / ns;
    let (mut lhs, mut rhs) = (Vec::new(), Vec::new());
    for a in 0..anchors {
        let o = a * ns;
        lhs.push(o);
        rhs.push(o + 1);
        for p in 0..2 {
            for i in 0..k {
                lhs.push(o + p);
                rhs.push(o + 2 + i);
            }
        }
    }
    let x = g.gather_rows(psd, &lhs);
    let y = g.gather_rows(psd, &rhs);
    let d = g.sub(x, y);
    let d = g.sqr(d);
    let e = g.row_sum(d);
    let e = g.scale(e, 1.0 / (nb as f64 * tau));
    let per = 1 + 2 * k;
    let e = g.reshape(e, &[anchors * per, 1]);
    let pos = g.gather_rows(e, &(0..anchors).map(|a| a * per).collect::<Vec<_>>());
    let pos = g.reshape(pos, &[anchors]);
    let neg_idx: Vec<usize> = (0..anchors).flat_map(|a| (1..per).map(move |i| a * per + i)).collect();
    let neg = g.gather_rows(e, &neg_idx);
    let neg = g.reshape(neg, &[anchors, 2 * k]);
    let lse = g.row_logsumexp(neg);
    let z = g.sub(pos, lse);
    let l = g.softplus(z);
    Ok(g.mean(l))
}

/// Ratings `l(1..=2+k)` for `(p1, p2, n1, .., nk)`: 1-based positions in the
/// ascending order of `{r_1, .., r_k, 1}`; both positives take the rank of 1.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RankLabels(pub Vec<usize>);

pub fn rank_labels(ratios: &[Ratio]) -> Result<RankLabels> {
    if ratios.is_empty() {
        return invalid("no ratios");
    }
    let mut all: Vec<Ratio> = ratios.to_vec();
    all.push(Ratio::ONE);
    let mut sorted = all.clone();
    sorted.sort();
    if sorted.windows(2).any(|w| w[0] == w[1]) {
        return invalid(format!("tied ratios in {:?}", ratios.iter().map(|r| r.literal()).collect::<Vec<_>>()));
    }
    let rank = |r: Ratio| sorted.iter().position(|&x| x == r).unwrap() + 1;
    let one = rank(Ratio::ONE);
    let mut l = vec![one, one];
    l.extend(ratios.iter().map(|&r| rank(r)));
    Ok(RankLabels(l))
}

/// Ordered pairs `(q, c)` with `l(c) < l(q)`.
pub fn rank_pairs(labels: &RankLabels) -> Vec<(usize, usize)> {
    let l = &labels.0;
    let mut out = Vec::new();
    for q in 0..l.len() {
        for c in 0..l.len() {
            if l[c] < l[q] {
                out.push((q, c));
            }
        }
    }
    out
}

/// Pairwise logistic ranking loss on scores `[B, n]`:
/// mean over anchors and ranked pairs of `log(1 + exp(-(s_q - s_c)))`.
pub fn l_fr<T: Real>(g: &mut Graph<'_, T>, scores: Var, labels: &[RankLabels]) -> Result<Var> {
    let (b, n) = (g.shape(scores)[0], g.shape(scores)[1]);
    if labels.len() != b || labels.iter().any(|l| l.0.len() != n) {
        return invalid("rank labels do not match the score matrix");
    }
    let (mut qi, mut ci) = (Vec::new(), Vec::new());
    let mut per_anchor = None;
    for (a, l) in labels.iter().enumerate() {
        let pairs = rank_pairs(l);
        if *per_anchor.get_or_insert(pairs.len()) != pairs.len() || pairs.is_empty() {
            return invalid("every anchor needs the same non-zero number of ranked pairs");
        }
        for (q, c) in pairs {
            qi.push(a * n + q);
            ci.push(a * n + c);
        }
    }
    let flat = g.reshape(scores, &[b * n, 1]);
    let sq = g.gather_rows(flat, &qi);
    let sc = g.gather_rows(flat, &ci);
    let u = g.sub(sc, sq);
    let phi = g.softplus(u);
    Ok(g.mean(phi))
}

/// Squared error between scores and the multipliers `(1, 1, r_1, .., r_k)`.
pub fn l_afr<T: Real>(g: &mut Graph<'_, T>, scores: Var, ratios: &[Vec<Ratio>]) -> Result<Var> {
    let (b, n) = (g.shape(scores)[0], g.shape(scores)[1]);
    if ratios.len() != b || ratios.iter().any(|r| r.len() + 2 != n) {
        return invalid("ratios do not match the score matrix");
    }
    let target: Vec<f64> =
        ratios.iter().flat_map(|r| [1.0, 1.0].into_iter().chain(r.iter().map(|x| x.value()))).collect();
    let t = g.constant(Tensor::from_f64(&[b, n], &target));
    Ok(l_r(g, scores, t))
}

/// `1 - mean_rows(pearson(y_row, gt_row))` for signals `[N, F]`.
pub fn l_pearson<T: Real>(g: &mut Graph<'_, T>, y: Var, gt: &[Vec<f64>]) -> Result<Var> {
    let (n, f) = (g.shape(y)[0], g.shape(y)[1]);
    if gt.len() != n || gt.iter().any(|r| r.len() != f) || f < 2 {
        return invalid("reference signals do not match predictions");
    }
    let mut center = vec![-1.0 / f as f64; f * f];
    for i in 0..f {
        center[i * f + i] += 1.0;
    }
    let mut gc = Vec::with_capacity(n * f);
    let mut inv_norm = Vec::with_capacity(n);
    for r in gt {
        let m = r.iter().sum::<f64>() / f as f64;
        let c: Vec<f64> = r.iter().map(|v| v - m).collect();
        let nrm = c.iter().map(|v| v * v).sum::<f64>().sqrt();
        if nrm == 0.0 {
            return invalid("constant reference signal");
        }
        inv_norm.push(1.0 / nrm);
        gc.extend(c);
    }
    let cm = g.constant(Tensor::from_f64(&[f, f], &center));
    let yc = g.matmul(y, cm);
    {
        let v = g.value(yc);
        if v.data().chunks(f).any(|r| r.iter().all(|x| *x == T::zero())) {
            return invalid("constant predicted signal");
        }
    }
    let gcv = g.constant(Tensor::from_f64(&[n, f], &gc));
    let prod = g.mul(yc, gcv);
    let num = g.row_sum(prod);
    let sq = g.sqr(yc);
    let ss = g.row_sum(sq);
    let ny = g.sqrt(ss);
    let inv_ny = g.recip(ny);
    let rho = g.mul(num, inv_ny);
    let invg = g.constant(Tensor::from_f64(&[n], &inv_norm));
    let rho = g.mul(rho, invg);
    let m = g.mean(rho);
    let neg = g.neg(m);
    Ok(g.add_scalar(neg, 1.0))
}

/// Named loss terms of one step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub l_r: f64,
    pub l_vtc: f64,
    pub l_fc: f64,
    pub l_fr: f64,
    pub l_pearson: f64,
}

impl LossComponents {
    pub fn named(&self) -> [(&'static str, f64); 5] {
        [("L_r", self.l_r), ("L_vtc", self.l_vtc), ("L_fc", self.l_fc), ("L_fr", self.l_fr), ("L_pearson", self.l_pearson)]
    }
}

/// Weighted sum; a non-finite component is reported by name.
pub fn loss_total(c: &LossComponents, cfg: &LossConfig, step: usize) -> Result<f64> {
    let weights = [cfg.w_r, cfg.w_vtc, cfg.w_fc, cfg.w_fr, cfg.w_pearson];
    let mut total = 0.0;
    for ((name, v), w) in c.named().into_iter().zip(weights) {
        if w == 0.0 {
            continue;
        }
        if !v.is_finite() {
            return Err(Error::NonFinite { what: format!("loss component {name}"), step });
        }
        total += w * v;
    }
    Ok(total)
}

fn rows_tensor(rows: &[Vec<f64>]) -> Result<Tensor<f64>> {
    let c = rows.first().map(Vec::len).unwrap_or(0);
    if rows.is_empty() || c == 0 || rows.iter().any(|r| r.len() != c) {
        return invalid("expected a non-empty list of equal-length rows");
    }
    Ok(Tensor::new(&[rows.len(), c], rows.concat()))
}

/// `(1/n) sum_j mse(original_j, recon_j)`.
pub fn loss_reconstruction(originals: &[Vec<f64>], recons: &[Vec<f64>]) -> Result<f64> {
    if originals.len() != recons.len() {
        return invalid(format!("{} originals vs {} reconstructions", originals.len(), recons.len()));
    }
    let mut g = Graph::<f64>::detached();
    let a = g.constant(rows_tensor(originals)?);
    let b = g.constant(rows_tensor(recons)?);
    if g.shape(a) != g.shape(b) {
        return Err(Error::Shape("reconstruction dims differ from originals".into()));
    }
    let l = l_r(&mut g, b, a);
    Ok(g.scalar(l))
}

/// Vision-text contrast of one anchor's pairs.
pub fn loss_vtc(vision: &[Vec<f64>], text: &[Vec<f64>], tau: f64, include_positive: bool) -> Result<f64> {
    let mut g = Graph::<f64>::detached();
    let v = g.constant(rows_tensor(vision)?);
    let t = g.constant(rows_tensor(text)?);
    let l = l_vtc(&mut g, v, t, vision.len(), tau, include_positive, false)?;
    Ok(g.scalar(l))
}

/// Normalised band-limited PSD of one signal.
pub fn psd_values(y: &[f64], basis: &PsdBasis) -> Vec<f64> {
    let mut g = Graph::<f64>::detached();
    let v = g.constant(Tensor::new(&[1, y.len()], y.to_vec()));
    let p = psd(&mut g, basis, v);
    g.value(p).data().to_vec()
}

/// Frequency contrast for one anchor.
pub fn loss_fc(pos: &[Vec<f64>], neg: &[Vec<f64>], tau: f64, basis: &PsdBasis) -> Result<f64> {
    if pos.len() != 2 {
        return invalid("frequency contrast needs exactly two positives");
    }
    let mut rows = pos.to_vec();
    rows.extend_from_slice(neg);
    let mut g = Graph::<f64>::detached();
    let y = g.constant(rows_tensor(&rows)?);
    let p = psd(&mut g, basis, y);
    let l = l_fc(&mut g, p, neg.len(), tau)?;
    Ok(g.scalar(l))
}

pub fn loss_fr(scores: &[f64], labels: &RankLabels) -> Result<f64> {
    let mut g = Graph::<f64>::detached();
    let s = g.constant(Tensor::new(&[1, scores.len()], scores.to_vec()));
    let l = l_fr(&mut g, s, std::slice::from_ref(labels))?;
    Ok(g.scalar(l))
}

pub fn loss_pearson(y: &[f64], gt: &[f64]) -> Result<f64> {
    let mut g = Graph::<f64>::detached();
    let v = g.constant(Tensor::new(&[1, y.len()], y.to_vec()));
    let l = l_pearson(&mut g, v, &[gt.to_vec()])?;
    Ok(g.scalar(l))
}
