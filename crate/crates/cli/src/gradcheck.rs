//! Finite-difference verification of every primitive and loss term.

use diffnet::gradcheck::{check_inputs_with, primitive_suite, FdReport};
use diffnet::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stcm_core::losses::{
    aux_loss, pred_loss, prior_loss, sample_mask, total_loss_var, AuxTargets, CostLabel, CostTarget, LossWeights,
    MaskBudget,
};

/// Relative error bound every check must meet.
pub const TOLERANCE: f64 = 1e-5;

fn uniform(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

fn binary(rng: &mut impl Rng, shape: &[usize], p: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_bool(p) as u8 as f64)
}

fn cost_target(rng: &mut impl Rng, t: usize, h: usize, w: usize) -> CostTarget {
    let labels = (0..t * h * w)
        .map(|_| match rng.random_range(0..4) {
            0 => CostLabel::Low,
            1 => CostLabel::HighOccupied,
            2 => CostLabel::HighNonDrivable,
            _ => CostLabel::Unknown,
        })
        .collect();
    CostTarget {
        steps: t,
        height: h,
        width: w,
        labels,
        expert_cells: vec![vec![]; t],
    }
}

fn to_diff(e: stcm_core::CoreError) -> diffnet::DiffError {
    diffnet::DiffError::Invalid {
        op: "loss",
        detail: e.to_string(),
    }
}

/// `L_pred` (and its SSIM path), `L_p`, `L_aux` and `L_total` on random 16×16 instances.
pub fn loss_suite(seed: u64, probes: usize) -> diffnet::Result<Vec<FdReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, t, h, w, k) = (2, 2, 16, 16, 3);
    let pred = uniform(&mut rng, &[n, t, h, w], 0.05, 0.95);
    let target = binary(&mut rng, &[n, t, h, w], 0.25);
    let vis = binary(&mut rng, &[n, t, h, w], 0.8);
    let targets: Vec<CostTarget> = (0..n).map(|_| cost_target(&mut rng, t, h, w)).collect();
    let masks: Vec<_> = targets
        .iter()
        .map(|tg| sample_mask(tg, MaskBudget::Fixed(300), &mut rng).map_err(to_diff))
        .collect::<diffnet::Result<_>>()?;
    let aux: Vec<AuxTargets> = (0..n)
        .map(|_| {
            let mut wts: Vec<f64> = (0..k).map(|_| rng.random_range(0.1..1.0)).collect();
            let s: f64 = wts.iter().sum();
            wts.iter_mut().for_each(|v| *v /= s);
            let traj = |rng: &mut ChaCha8Rng| -> Vec<(f64, f64)> {
                (0..t).map(|_| (rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0))).collect()
            };
            AuxTargets {
                labels: vec![1.0, 0.0, 1.0],
                weights: wts,
                expert: traj(&mut rng),
                means: (0..k).map(|_| traj(&mut rng)).collect(),
            }
        })
        .collect();
    let logits = uniform(&mut rng, &[n, k], -2.0, 2.0);
    let offsets = uniform(&mut rng, &[n, k * t * 2], -1.0, 1.0);
    let cost = uniform(&mut rng, &[n, t, h, w], 0.05, 0.95);
    let weights = LossWeights {
        w1: 0.7,
        w2: 1.3,
        alpha: 0.9,
        beta: 1.1,
        gamma: 0.5,
        lambda: 0.6,
        mask_budget: MaskBudget::Fixed(300),
    };

    let mut out = Vec::new();
    out.push(check_inputs_with("L_pred", &[pred.clone()], probes, &mut rng, false, |tp, v| {
        Ok(pred_loss(tp, v[0], &target, &vis, weights.gamma).map_err(to_diff)?.total)
    })?);
    out.push(check_inputs_with("L_pred.ssim", &[pred.clone()], probes, &mut rng, false, |tp, v| {
        Ok(pred_loss(tp, v[0], &target, &vis, weights.gamma).map_err(to_diff)?.dissim)
    })?);
    out.push(check_inputs_with("L_p", &[cost.clone()], probes, &mut rng, false, |tp, v| {
        prior_loss(tp, v[0], &targets, &masks).map_err(to_diff)
    })?);
    out.push(check_inputs_with("L_aux", &[logits.clone(), offsets.clone()], probes, &mut rng, false, |tp, v| {
        aux_loss(tp, v[0], v[1], &aux, weights.lambda).map_err(to_diff)
    })?);
    out.push(check_inputs_with("L_total", &[pred, cost, logits, offsets], probes, &mut rng, false, |tp, v| {
        let lp = pred_loss(tp, v[0], &target, &vis, weights.gamma).map_err(to_diff)?.total;
        let pr = prior_loss(tp, v[1], &targets, &masks).map_err(to_diff)?;
        let ax = aux_loss(tp, v[2], v[3], &aux, weights.lambda).map_err(to_diff)?;
        total_loss_var(tp, Some(lp), pr, Some(ax), &weights).map_err(to_diff)
    })?);
    Ok(out)
}

/// Primitives followed by loss terms. `inject_fault` corrupts convolution
/// kernel gradients, which must make the `conv2d` row fail.
pub fn full_suite(seed: u64, probes: usize, inject_fault: bool) -> diffnet::Result<Vec<FdReport>> {
    let mut all = primitive_suite(seed, probes, inject_fault)?;
    all.extend(loss_suite(seed.wrapping_add(1), probes)?);
    Ok(all)
}

/// One line per check: name, probe count, max relative error, verdict.
pub fn format_report(reports: &[FdReport]) -> String {
    let mut s = format!("{:<24} {:>6} {:>12} {:>6}\n", "check", "probes", "max rel err", "ok");
    for r in reports {
        s += &format!(
            "{:<24} {:>6} {:>12.3e} {:>6}\n",
            r.name,
            r.probes,
            r.max_rel_err,
            if r.passes(TOLERANCE) { "PASS" } else { "FAIL" }
        );
    }
    s
}
