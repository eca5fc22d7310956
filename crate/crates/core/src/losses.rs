//! Training objectives: occupancy prediction loss with SSIM, cost targets and
//! mask sampling, the masked prior loss, the auxiliary imitation loss and their
//! weighted sum.

use diffnet::{Scalar, Tape, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{input_err, CoreError, Result};
use crate::geometry::{poses_from_positions, Rect};
use crate::grid::{occupancy_ratio, GridConfig, OccupancyGrid};

pub const SSIM_C1: f64 = 1e-4;
pub const SSIM_C2: f64 = 9e-4;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_WINDOW: usize = 7;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskBudget {
    /// N = factor × (expert cells at that step), rounded up.
    PerExpertCell(f64),
    Fixed(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub w1: f64,
    pub w2: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub lambda: f64,
    pub mask_budget: MaskBudget,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            w1: 1.0,
            w2: 1.0,
            alpha: 1.0,
            beta: 1.0,
            gamma: 0.5,
            lambda: 1.0,
            mask_budget: MaskBudget::PerExpertCell(4.0),
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.w1, self.w2, self.alpha, self.beta, self.gamma, self.lambda];
        if all.iter().any(|w| !(*w >= 0.0)) {
            return input_err("loss weights must be non-negative");
        }
        match self.mask_budget {
            MaskBudget::PerExpertCell(f) if !(f >= 1.0) => input_err("mask budget factor must be ≥ 1"),
            MaskBudget::Fixed(0) => input_err("mask budget must be ≥ 1"),
            _ => Ok(()),
        }
    }
}

/// Normalized Gaussian window; side `min(7, h, w)` rounded down to odd.
pub fn gaussian_window(h: usize, w: usize) -> (Vec<f64>, usize) {
    let mut k = SSIM_WINDOW.min(h).min(w);
    if k % 2 == 0 {
        k -= 1;
    }
    let c = (k / 2) as f64;
    let g: Vec<f64> = (0..k)
        .map(|i| (-(i as f64 - c).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let mut kern: Vec<f64> = g.iter().flat_map(|a| g.iter().map(move |b| a * b)).collect();
    let total: f64 = kern.iter().sum();
    kern.iter_mut().for_each(|v| *v /= total);
    (kern, k)
}

/// Per-window SSIM map for `(N, C, H, W)` inputs, shape `(N, C, H−k+1, W−k+1)`.
pub fn ssim_map<S: Scalar>(tape: &mut Tape<S>, a: Var, b: Var) -> Result<Var> {
    let shape = tape.shape(a).to_vec();
    if shape != tape.shape(b) || shape.len() != 4 {
        return input_err(format!("ssim shapes {:?} vs {:?}", shape, tape.shape(b)));
    }
    let (kern, k) = gaussian_window(shape[2], shape[3]);
    let kern: Vec<S> = kern.into_iter().map(S::lit).collect();
    let mu_a = tape.blur_valid(a, &kern, k)?;
    let mu_b = tape.blur_valid(b, &kern, k)?;
    let aa = tape.mul(a, a)?;
    let bb = tape.mul(b, b)?;
    let ab = tape.mul(a, b)?;
    let e_aa = tape.blur_valid(aa, &kern, k)?;
    let e_bb = tape.blur_valid(bb, &kern, k)?;
    let e_ab = tape.blur_valid(ab, &kern, k)?;
    let mu_aa = tape.mul(mu_a, mu_a)?;
    let mu_bb = tape.mul(mu_b, mu_b)?;
    let mu_ab = tape.mul(mu_a, mu_b)?;
    let var_a = tape.sub(e_aa, mu_aa)?;
    let var_b = tape.sub(e_bb, mu_bb)?;
    let cov = tape.sub(e_ab, mu_ab)?;

    let two_mu = tape.scale(mu_ab, S::lit(2.0));
    let l_num = tape.add_scalar(two_mu, S::lit(SSIM_C1));
    let two_cov = tape.scale(cov, S::lit(2.0));
    let c_num = tape.add_scalar(two_cov, S::lit(SSIM_C2));
    let mu_sum = tape.add(mu_aa, mu_bb)?;
    let l_den = tape.add_scalar(mu_sum, S::lit(SSIM_C1));
    let var_sum = tape.add(var_a, var_b)?;
    let c_den = tape.add_scalar(var_sum, S::lit(SSIM_C2));
    let num = tape.mul(l_num, c_num)?;
    let den = tape.mul(l_den, c_den)?;
    Ok(tape.div(num, den)?)
}

/// Mean SSIM over all windows of all planes.
pub fn ssim_var<S: Scalar>(tape: &mut Tape<S>, a: Var, b: Var) -> Result<Var> {
    let m = ssim_map(tape, a, b)?;
    Ok(tape.mean(m))
}

/// Single-scale SSIM between two grids.
pub fn ssim<S: Scalar>(a: &OccupancyGrid<S>, b: &OccupancyGrid<S>) -> Result<f64> {
    if a.height() != b.height() || a.width() != b.width() {
        return input_err("ssim grids differ in size");
    }
    let mut tape = Tape::<f64>::new();
    let av = tape.constant(a.cast::<f64>().to_tensor());
    let bv = tape.constant(b.cast::<f64>().to_tensor());
    let s = ssim_var(&mut tape, av, bv)?;
    Ok(tape.value(s).item())
}

/// Loss pieces recorded on the tape.
#[derive(Clone, Copy, Debug)]
pub struct PredLoss {
    pub total: Var,
    /// η-scaled, visibility-masked cross-entropy.
    pub ce: Var,
    /// `Σ_t (1 − SSIM_t)` averaged over the batch, before the γ factor.
    pub dissim: Var,
}

/// Occupancy prediction loss on `(N, T, H, W)` probabilities.
///
/// Each `(example, step)` plane contributes `η/(W·H)·Σ 𝒱 ⊙ H(p, y) + γ·(1 − SSIM)`
/// with η taken from its target; the per-step terms are summed over steps and
/// averaged over the batch.
pub fn pred_loss<S: Scalar>(
    tape: &mut Tape<S>,
    pred: Var,
    target: &Tensor<S>,
    visibility: &Tensor<S>,
    gamma: f64,
) -> Result<PredLoss> {
    let (n, t, h, w) = tape.value(pred).dims4("pred_loss")?;
    if target.shape() != tape.shape(pred) || visibility.shape() != target.shape() {
        return input_err("pred_loss: prediction, target and visibility shapes differ");
    }
    let plane = h * w;
    let mut weight = visibility.clone();
    for (i, chunk) in weight.data_mut().chunks_mut(plane).enumerate() {
        let grid = OccupancyGrid::from_vec(h, w, target.data()[i * plane..(i + 1) * plane].to_vec())?;
        let eta = occupancy_ratio(&grid, S::lit(0.5));
        let s = S::lit(eta / (plane as f64 * n as f64));
        chunk.iter_mut().for_each(|v| *v *= s);
    }
    let ce = tape.bce_sum(pred, target, &weight)?;
    let y = tape.constant(target.clone());
    // Every plane has the same number of windows, so Σ_t (1 − SSIM_t) averaged
    // over the batch is T·(1 − mean SSIM).
    let s = ssim_var(tape, pred, y)?;
    let one_minus = tape.one_minus(s);
    let dissim = tape.scale(one_minus, S::lit(t as f64));
    let g = tape.scale(dissim, S::lit(gamma));
    let total = tape.add(ce, g)?;
    Ok(PredLoss { total, ce, dissim })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CostLabel {
    Low,
    /// Drivable cell occupied at that step.
    HighOccupied,
    HighNonDrivable,
    Unknown,
}

impl CostLabel {
    pub fn is_high(self) -> bool {
        matches!(self, CostLabel::HighOccupied | CostLabel::HighNonDrivable)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CostTarget {
    pub steps: usize,
    pub height: usize,
    pub width: usize,
    pub labels: Vec<CostLabel>,
    pub expert_cells: Vec<Vec<(usize, usize)>>,
}

impl CostTarget {
    pub fn label(&self, k: usize, r: usize, c: usize) -> CostLabel {
        self.labels[(k * self.height + r) * self.width + c]
    }

    pub fn count(&self, k: usize, pred: impl Fn(CostLabel) -> bool) -> usize {
        let n = self.height * self.width;
        self.labels[k * n..(k + 1) * n].iter().filter(|l| pred(**l)).count()
    }
}

/// Expert footprint cells per future step (cell centers inside the ego rectangle).
pub fn expert_cells(
    anchor: (f64, f64),
    positions: &[(f64, f64)],
    footprint: (f64, f64),
    cfg: &GridConfig,
) -> Vec<Vec<(usize, usize)>> {
    poses_from_positions(anchor, positions)
        .iter()
        .map(|p| Rect::at_pose(p, footprint.0, footprint.1).covered_cells(cfg).0)
        .collect()
}

/// Labels every future cell LOW (expert footprint), HIGH (non-drivable, or
/// drivable and occupied) or UNKNOWN. Expert cells take precedence.
///
/// `anchor` is the position preceding `positions[0]`, used for the first heading.
pub fn build_cost_target<S: Scalar>(
    anchor: (f64, f64),
    positions: &[(f64, f64)],
    occupancy: &[OccupancyGrid<S>],
    drivable: &[u8],
    footprint: (f64, f64),
    cfg: &GridConfig,
) -> Result<CostTarget> {
    let (h, w) = (cfg.height, cfg.width);
    if positions.len() != occupancy.len() {
        return input_err(format!("{} expert steps vs {} occupancy grids", positions.len(), occupancy.len()));
    }
    if drivable.len() != h * w || occupancy.iter().any(|g| g.height() != h || g.width() != w) {
        return input_err("cost target inputs do not match the grid config");
    }
    let cells = expert_cells(anchor, positions, footprint, cfg);
    let mut labels = Vec::with_capacity(positions.len() * h * w);
    for (k, occ) in occupancy.iter().enumerate() {
        let start = labels.len();
        for (i, &d) in drivable.iter().enumerate() {
            labels.push(if d == 0 {
                CostLabel::HighNonDrivable
            } else if occ.values()[i] >= S::lit(0.5) {
                CostLabel::HighOccupied
            } else {
                CostLabel::Unknown
            });
        }
        for &(r, c) in &cells[k] {
            labels[start + r * w + c] = CostLabel::Low;
        }
    }
    Ok(CostTarget {
        steps: positions.len(),
        height: h,
        width: w,
        labels,
        expert_cells: cells,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleMask {
    pub steps: usize,
    pub height: usize,
    pub width: usize,
    pub values: Vec<u8>,
    pub ones_count: Vec<usize>,
}

impl SampleMask {
    pub fn total_ones(&self) -> usize {
        self.ones_count.iter().sum()
    }
}

/// Per-step budget for a target under `budget`.
pub fn resolve_budget(budget: MaskBudget, expert_cells: usize) -> usize {
    match budget {
        MaskBudget::PerExpertCell(f) => (f * expert_cells as f64).ceil() as usize,
        MaskBudget::Fixed(n) => n,
    }
}

/// Selects every expert cell plus up to `N − #expert` HIGH cells per step, drawn
/// without replacement; occupied HIGH cells weigh 2, non-drivable ones 1.
pub fn sample_mask<R: Rng + ?Sized>(target: &CostTarget, budget: MaskBudget, rng: &mut R) -> Result<SampleMask> {
    let n = target.height * target.width;
    let mut values = vec![0u8; target.steps * n];
    let mut ones_count = Vec::with_capacity(target.steps);
    for k in 0..target.steps {
        let labels = &target.labels[k * n..(k + 1) * n];
        let out = &mut values[k * n..(k + 1) * n];
        let low: Vec<usize> = (0..n).filter(|&i| labels[i] == CostLabel::Low).collect();
        let budget_k = resolve_budget(budget, low.len());
        if budget_k < low.len() {
            return input_err(format!("mask budget {budget_k} below {} expert cells at step {k}", low.len()));
        }
        for &i in &low {
            out[i] = 1;
        }
        let slots = budget_k - low.len();
        // Weighted sampling without replacement: keep the largest ln(u)/w keys.
        let mut keyed: Vec<(f64, usize)> = (0..n)
            .filter(|&i| labels[i].is_high())
            .map(|i| {
                let wgt = if labels[i] == CostLabel::HighOccupied { 2.0 } else { 1.0 };
                let u: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
                (u.ln() / wgt, i)
            })
            .collect();
        if keyed.len() > slots {
            keyed.select_nth_unstable_by(slots, |a, b| b.0.total_cmp(&a.0));
            keyed.truncate(slots);
        }
        for &(_, i) in &keyed {
            out[i] = 1;
        }
        ones_count.push(low.len() + keyed.len());
    }
    Ok(SampleMask {
        steps: target.steps,
        height: target.height,
        width: target.width,
        values,
        ones_count,
    })
}

/// `(1/(W·H))·Σ_k Σ ℳ ⊙ H(B², C_target)` on `(N, T, H, W)` predictions, averaged over the batch.
pub fn prior_loss<S: Scalar>(tape: &mut Tape<S>, pred: Var, targets: &[CostTarget], masks: &[SampleMask]) -> Result<Var> {
    let (n, t, h, w) = tape.value(pred).dims4("prior_loss")?;
    if targets.len() != n || masks.len() != n {
        return input_err("prior_loss: batch size mismatch");
    }
    let mut label = Tensor::<S>::zeros(&[n, t, h, w]);
    let mut weight = Tensor::<S>::zeros(&[n, t, h, w]);
    let scale = S::lit(1.0 / ((h * w) as f64 * n as f64));
    let plane = t * h * w;
    for (b, (tg, m)) in targets.iter().zip(masks).enumerate() {
        if tg.steps != t || tg.height != h || tg.width != w || m.values.len() != plane {
            return input_err("prior_loss: target shape mismatch");
        }
        let ld = &mut label.data_mut()[b * plane..(b + 1) * plane];
        for (dst, l) in ld.iter_mut().zip(&tg.labels) {
            *dst = if l.is_high() { S::one() } else { S::zero() };
        }
        let wd = &mut weight.data_mut()[b * plane..(b + 1) * plane];
        for (dst, &mv) in wd.iter_mut().zip(&m.values) {
            *dst = if mv != 0 { scale } else { S::zero() };
        }
    }
    Ok(tape.bce_sum(pred, &label, &weight)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AuxTargets {
    /// p*_k ∈ {0, 1}.
    pub labels: Vec<f64>,
    /// ω_k, summing to 1.
    pub weights: Vec<f64>,
    /// s*: T future positions.
    pub expert: Vec<(f64, f64)>,
    /// μ_k: K mean trajectories of T positions.
    pub means: Vec<Vec<(f64, f64)>>,
}

impl AuxTargets {
    pub fn validate(&self) -> Result<()> {
        let k = self.labels.len();
        if k == 0 || self.weights.len() != k || self.means.len() != k {
            return input_err("aux targets: inconsistent K");
        }
        let total: f64 = self.weights.iter().sum();
        if (total - 1.0).abs() > 1e-6 {
            return input_err(format!("mode weights sum to {total}, expected 1"));
        }
        if self.means.iter().any(|m| m.len() != self.expert.len()) {
            return input_err("aux targets: mean length differs from T");
        }
        Ok(())
    }
}

/// `(1/K)·Σ BCE(σ(logit_k), p*_k) + λ·Σ ω_k·MSE(μ_k + s°_k, s*)`, batch-averaged.
///
/// `logits` is `(N, K)`; `offsets` is `(N, K·T·2)` laid out as `[k][t][xy]`.
pub fn aux_loss<S: Scalar>(
    tape: &mut Tape<S>,
    logits: Var,
    offsets: Var,
    targets: &[AuxTargets],
    lambda: f64,
) -> Result<Var> {
    let n = targets.len();
    let ls = tape.shape(logits).to_vec();
    if n == 0 || ls.len() != 2 || ls[0] != n {
        return input_err(format!("aux_loss: logits shape {ls:?} for batch {n}"));
    }
    let k = ls[1];
    let t = targets[0].expert.len();
    if tape.shape(offsets) != [n, k * t * 2] {
        return input_err(format!("aux_loss: offsets shape {:?}, expected [{n}, {}]", tape.shape(offsets), k * t * 2));
    }
    let mut lab = Vec::with_capacity(n * k);
    let mut reg_target = Vec::with_capacity(n * k * t * 2);
    let mut reg_weight = Vec::with_capacity(n * k * t * 2);
    for tg in targets {
        tg.validate()?;
        if tg.labels.len() != k || tg.expert.len() != t {
            return input_err("aux_loss: K or T mismatch between network and targets");
        }
        lab.extend(tg.labels.iter().map(|v| S::lit(*v)));
        for (m, &om) in tg.means.iter().zip(&tg.weights) {
            let wv = S::lit(lambda * om / (t as f64 * 2.0 * n as f64));
            for (mu, s) in m.iter().zip(&tg.expert) {
                reg_target.push(S::lit(s.0 - mu.0));
                reg_target.push(S::lit(s.1 - mu.1));
                reg_weight.push(wv);
                reg_weight.push(wv);
            }
        }
    }
    let lab = Tensor::from_vec(&[n, k], lab)?;
    let cls_w = Tensor::full(&[n, k], S::lit(1.0 / (k as f64 * n as f64)));
    let p = tape.sigmoid(logits);
    let cls = tape.bce_sum(p, &lab, &cls_w)?;
    let reg_target = Tensor::from_vec(&[n, k * t * 2], reg_target)?;
    let reg_weight = Tensor::from_vec(&[n, k * t * 2], reg_weight)?;
    let reg = tape.weighted_sq_err_sum(offsets, &reg_target, &reg_weight)?;
    Ok(tape.add(cls, reg)?)
}

fn finite_or(term: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(CoreError::NonFinite { term: term.to_string() })
    }
}

/// `w1·L_pred + w2·(α·L_p + β·L_aux)`.
pub fn total_loss(pred: f64, prior: f64, aux: f64, w: &LossWeights) -> Result<f64> {
    let pred = finite_or("L_pred", pred)?;
    let prior = finite_or("L_p", prior)?;
    let aux = finite_or("L_aux", aux)?;
    finite_or("L_total", w.w1 * pred + w.w2 * (w.alpha * prior + w.beta * aux))
}

/// Tape version of [`total_loss`]; absent terms contribute nothing.
pub fn total_loss_var<S: Scalar>(
    tape: &mut Tape<S>,
    pred: Option<Var>,
    prior: Var,
    aux: Option<Var>,
    w: &LossWeights,
) -> Result<Var> {
    for (name, v) in [("L_pred", pred), ("L_p", Some(prior)), ("L_aux", aux)] {
        if let Some(v) = v {
            finite_or(name, tape.value(v).item().as_f64())?;
        }
    }
    let mut cme = tape.scale(prior, S::lit(w.alpha));
    if let Some(a) = aux {
        let a = tape.scale(a, S::lit(w.beta));
        cme = tape.add(cme, a)?;
    }
    let mut total = tape.scale(cme, S::lit(w.w2));
    if let Some(p) = pred {
        let p = tape.scale(p, S::lit(w.w1));
        total = tape.add(total, p)?;
    }
    finite_or("L_total", tape.value(total).item().as_f64())?;
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_is_normalized_and_odd() {
        for (h, w) in [(64, 64), (6, 9), (2, 2), (1, 5)] {
            let (k, side) = gaussian_window(h, w);
            assert_eq!(side % 2, 1);
            assert!(side <= h.min(w));
            assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
