use diffnet::gradcheck::check_inputs;
use diffnet::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stcm_core::grid::{GridConfig, OccupancyGrid};
use stcm_core::losses::{
    aux_loss, build_cost_target, pred_loss, prior_loss, sample_mask, ssim, total_loss, total_loss_var, AuxTargets,
    CostLabel, CostTarget, LossWeights, MaskBudget, SampleMask,
};
use stcm_core::CoreError;

const LN2: f64 = std::f64::consts::LN_2;

fn rand_grid(rng: &mut impl Rng, h: usize, w: usize) -> OccupancyGrid<f64> {
    OccupancyGrid::from_vec(h, w, (0..h * w).map(|_| rng.random::<f64>()).collect()).unwrap()
}

fn rand_tensor(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

fn binary_tensor(rng: &mut impl Rng, shape: &[usize], p: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| if rng.random_bool(p) { 1.0 } else { 0.0 })
}

/// SSIM evaluated directly from its definition with explicit window loops.
fn ssim_oracle(a: &[f64], b: &[f64], h: usize, w: usize) -> f64 {
    let mut k = 7.min(h).min(w);
    if k % 2 == 0 {
        k -= 1;
    }
    let c = (k / 2) as f64;
    let mut win = vec![0.0; k * k];
    for i in 0..k {
        for j in 0..k {
            let d2 = (i as f64 - c).powi(2) + (j as f64 - c).powi(2);
            win[i * k + j] = (-d2 / (2.0 * 1.5 * 1.5)).exp();
        }
    }
    let z: f64 = win.iter().sum();
    win.iter_mut().for_each(|v| *v /= z);
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut total = 0.0;
    let mut count = 0;
    for r in 0..=h - k {
        for col in 0..=w - k {
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for i in 0..k {
                for j in 0..k {
                    let g = win[i * k + j];
                    let (x, y) = (a[(r + i) * w + col + j], b[(r + i) * w + col + j]);
                    ma += g * x;
                    mb += g * y;
                    saa += g * x * x;
                    sbb += g * y * y;
                    sab += g * x * y;
                }
            }
            let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
            total += (2.0 * ma * mb + c1) * (2.0 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    total / count as f64
}

fn bce(p: f64, y: f64) -> f64 {
    let q = p.clamp(1e-7, 1.0 - 1e-7);
    -(y * q.ln() + (1.0 - y) * (1.0 - q).ln())
}

#[test]
fn ssim_identity_and_symmetry_on_random_grids() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..100 {
        let a = rand_grid(&mut rng, 16, 16);
        let b = rand_grid(&mut rng, 16, 16);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() <= 1e-9);
        assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() <= 1e-12);
    }
}

#[test]
fn ssim_matches_direct_window_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for (h, w) in [(16, 16), (9, 12), (6, 6), (3, 5)] {
        let a = rand_grid(&mut rng, h, w);
        let b = rand_grid(&mut rng, h, w);
        let got = ssim(&a, &b).unwrap();
        let want = ssim_oracle(a.values(), b.values(), h, w);
        assert!((got - want).abs() < 1e-12, "{h}x{w}: {got} vs {want}");
    }
}

#[test]
fn ssim_of_constant_zero_and_one_grids() {
    let a = OccupancyGrid::<f64>::zeros(8, 8);
    let b = OccupancyGrid::from_vec(8, 8, vec![1.0; 64]).unwrap();
    // Means 0 and 1, no variance: (C1)(C2) / ((1 + C1)(C2)).
    let want = 1e-4 / (1.0 + 1e-4);
    assert!((ssim(&a, &b).unwrap() - want).abs() < 1e-15);
    assert!(ssim(&a, &OccupancyGrid::zeros(8, 9)).is_err());
}

#[test]
fn pred_loss_two_by_two_hand_case() {
    let mut tape = Tape::<f64>::new();
    let p = tape.variable(Tensor::full(&[1, 1, 2, 2], 0.5));
    let target = Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, 0.0, 0.0, 0.0]).unwrap();
    let vis = Tensor::ones(&[1, 1, 2, 2]);
    let l = pred_loss(&mut tape, p, &target, &vis, 0.0).unwrap();
    let eta = 1.0 / 3.0;
    let want = eta / 4.0 * 4.0 * LN2;
    assert!((tape.value(l.ce).item() - want).abs() < 1e-12);
    // γ = 0 leaves only the cross-entropy.
    assert_eq!(tape.value(l.total).item(), tape.value(l.ce).item());
}

#[test]
fn pred_loss_of_a_perfect_prediction_is_negligible() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let target = binary_tensor(&mut rng, &[2, 3, 16, 16], 0.2);
    let clipped = target.map(|v| v.clamp(1e-7, 1.0 - 1e-7));
    let mut tape = Tape::<f64>::new();
    let p = tape.variable(clipped);
    let vis = Tensor::ones(&[2, 3, 16, 16]);
    let l = pred_loss(&mut tape, p, &target, &vis, 0.5).unwrap();
    assert!(tape.value(l.ce).item() < 1e-5);
    assert!(tape.value(l.dissim).item() < 1e-6);
}

#[test]
fn pred_loss_matches_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (n, t, h, w) = (2, 3, 12, 12);
    let pred = rand_tensor(&mut rng, &[n, t, h, w], 0.01, 0.99);
    let target = binary_tensor(&mut rng, &[n, t, h, w], 0.3);
    let vis = binary_tensor(&mut rng, &[n, t, h, w], 0.8);
    let gamma = 0.7;
    let mut tape = Tape::<f64>::new();
    let p = tape.variable(pred.clone());
    let l = pred_loss(&mut tape, p, &target, &vis, gamma).unwrap();

    let plane = h * w;
    let (mut ce, mut ss) = (0.0, 0.0);
    for i in 0..n * t {
        let range = i * plane..(i + 1) * plane;
        let (pp, yy, vv) = (&pred.data()[range.clone()], &target.data()[range.clone()], &vis.data()[range]);
        let occ = yy.iter().filter(|v| **v >= 0.5).count() as f64;
        let eta = occ / (plane as f64 - occ);
        let s: f64 = (0..plane).map(|j| vv[j] * bce(pp[j], yy[j])).sum();
        ce += eta / plane as f64 * s;
        ss += ssim_oracle(pp, yy, h, w);
    }
    // Summed over steps, averaged over the batch.
    ce /= n as f64;
    let want = ce + gamma * ((n * t) as f64 - ss) / n as f64;
    assert!((tape.value(l.total).item() - want).abs() < 1e-10);
}

fn planted_target() -> CostTarget {
    // 1 step, 4×4: row 0 non-drivable, (2,2) occupied, (3,0) expert.
    let mut labels = vec![CostLabel::Unknown; 16];
    for l in labels.iter_mut().take(4) {
        *l = CostLabel::HighNonDrivable;
    }
    labels[2 * 4 + 2] = CostLabel::HighOccupied;
    labels[3 * 4] = CostLabel::Low;
    CostTarget {
        steps: 1,
        height: 4,
        width: 4,
        labels,
        expert_cells: vec![vec![(3, 0)]],
    }
}

#[test]
fn cost_target_labels_follow_precedence() {
    let cfg = GridConfig {
        height: 16,
        width: 16,
        cell_size: 0.5,
        origin_offset: (2.0, 4.0),
        tau: 1,
        horizon: 2,
        dt: 0.2,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let drivable: Vec<u8> = (0..256).map(|i| u8::from(i % 16 < 12 || rng.random_bool(0.3))).collect();
    let mut occ: Vec<OccupancyGrid<f64>> = (0..2)
        .map(|_| OccupancyGrid::from_vec(16, 16, (0..256).map(|_| f64::from(u8::from(rng.random_bool(0.2)))).collect()).unwrap())
        .collect();
    let positions = [(1.0, 0.0), (2.0, 0.0)];
    // An occupied cell under the expert must still be LOW.
    let (er, ec) = cfg.cell_of(1.0, 0.0).unwrap();
    occ[0].set(er, ec, 1.0);
    let tg = build_cost_target((0.0, 0.0), &positions, &occ, &drivable, (2.0, 1.0), &cfg).unwrap();
    assert_eq!(tg.label(0, er, ec), CostLabel::Low);
    for k in 0..2 {
        let expert: std::collections::HashSet<_> = tg.expert_cells[k].iter().copied().collect();
        assert!(!expert.is_empty());
        let mut high = 0;
        for i in 0..256 {
            let (r, c) = (i / 16, i % 16);
            let nd = drivable[i] == 0;
            let oc = occ[k].values()[i] >= 0.5;
            if !expert.contains(&(r, c)) && (nd || oc) {
                high += 1;
            }
            let want = if expert.contains(&(r, c)) {
                CostLabel::Low
            } else if nd {
                CostLabel::HighNonDrivable
            } else if oc {
                CostLabel::HighOccupied
            } else {
                CostLabel::Unknown
            };
            assert_eq!(tg.label(k, r, c), want);
        }
        assert_eq!(tg.count(k, CostLabel::is_high), high);
    }
}

#[test]
fn expert_off_grid_gives_no_low_cells() {
    let cfg = GridConfig::default();
    let occ = vec![OccupancyGrid::<f64>::for_config(&cfg)];
    let drivable = vec![1u8; cfg.cells()];
    let tg = build_cost_target((500.0, 0.0), &[(501.0, 0.0)], &occ, &drivable, (4.5, 2.0), &cfg).unwrap();
    assert_eq!(tg.count(0, |l| l == CostLabel::Low), 0);
}

#[test]
fn exhaustive_budget_covers_every_labeled_cell() {
    let tg = planted_target();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let m = sample_mask(&tg, MaskBudget::Fixed(1 + 5), &mut rng).unwrap();
    for i in 0..16 {
        assert_eq!(m.values[i] == 1, tg.labels[i] != CostLabel::Unknown);
    }
    // A larger budget cannot select UNKNOWN cells.
    let m = sample_mask(&tg, MaskBudget::Fixed(50), &mut rng).unwrap();
    assert_eq!(m.ones_count, vec![6]);
    assert!(sample_mask(&tg, MaskBudget::Fixed(0), &mut rng).is_err());
}

#[test]
fn mask_support_and_budget_over_many_trials() {
    let tg = planted_target();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..10_000 {
        let m = sample_mask(&tg, MaskBudget::Fixed(3), &mut rng).unwrap();
        assert_eq!(m.ones_count, vec![3]);
        assert_eq!(m.values[12], 1);
        for i in 0..16 {
            if tg.labels[i] == CostLabel::Unknown {
                assert_eq!(m.values[i], 0);
            }
        }
    }
}

#[test]
fn occupied_cells_are_drawn_twice_as_often() {
    // One slot, one occupied and one non-drivable candidate: P(occupied) = 2/3.
    let mut labels = vec![CostLabel::Unknown; 4];
    labels[0] = CostLabel::HighOccupied;
    labels[1] = CostLabel::HighNonDrivable;
    let tg = CostTarget {
        steps: 1,
        height: 2,
        width: 2,
        labels,
        expert_cells: vec![vec![]],
    };
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let draws = 100_000;
    let (mut occ, mut nd) = (0usize, 0usize);
    for _ in 0..draws {
        let m = sample_mask(&tg, MaskBudget::Fixed(1), &mut rng).unwrap();
        occ += m.values[0] as usize;
        nd += m.values[1] as usize;
    }
    let ratio = occ as f64 / nd as f64;
    assert!((ratio - 2.0).abs() < 0.2, "ratio {ratio}");
}

#[test]
fn per_expert_cell_budget_scales_with_expert_cells() {
    let tg = planted_target();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let m = sample_mask(&tg, MaskBudget::PerExpertCell(4.0), &mut rng).unwrap();
    assert_eq!(m.ones_count, vec![4]);
}

fn full_mask(tg: &CostTarget) -> SampleMask {
    let values: Vec<u8> = tg.labels.iter().map(|l| u8::from(*l != CostLabel::Unknown)).collect();
    let ones = values.iter().filter(|v| **v == 1).count();
    SampleMask {
        steps: 1,
        height: tg.height,
        width: tg.width,
        values,
        ones_count: vec![ones],
    }
}

#[test]
fn prior_loss_hand_cases() {
    let tg = planted_target();
    let m = full_mask(&tg);
    let mut tape = Tape::<f64>::new();
    let half = tape.variable(Tensor::full(&[1, 1, 4, 4], 0.5));
    let l = prior_loss(&mut tape, half, &[tg.clone()], &[m.clone()]).unwrap();
    assert!((tape.value(l).item() - 6.0 * LN2 / 16.0).abs() < 1e-12);
    let g = tape.backward(l).unwrap();
    let gp = g.get(half).unwrap();
    for i in 0..16 {
        assert_eq!(gp.data()[i] == 0.0, m.values[i] == 0, "cell {i}");
    }

    let exact: Vec<f64> = tg.labels.iter().map(|l| if l.is_high() { 1.0 - 1e-7 } else { 1e-7 }).collect();
    let mut tape = Tape::<f64>::new();
    let p = tape.variable(Tensor::from_vec(&[1, 1, 4, 4], exact).unwrap());
    let l = prior_loss(&mut tape, p, &[tg], &[m]).unwrap();
    assert!(tape.value(l).item() < 1e-5);
}

fn hand_aux() -> AuxTargets {
    AuxTargets {
        labels: vec![1.0, 0.0],
        weights: vec![0.25, 0.75],
        expert: vec![(1.0, 0.0), (2.0, 0.5)],
        means: vec![vec![(1.0, 0.0), (2.0, 0.0)], vec![(0.0, 1.0), (0.0, 2.0)]],
    }
}

#[test]
fn aux_loss_two_mode_hand_case() {
    let tg = hand_aux();
    let logits = [0.3, -1.2];
    let offs = [0.1, 0.2, -0.3, 0.0, 0.5, -0.5, 1.0, 1.0];
    let lambda = 0.8;
    let mut tape = Tape::<f64>::new();
    let lv = tape.variable(Tensor::from_vec(&[1, 2], logits.to_vec()).unwrap());
    let ov = tape.variable(Tensor::from_vec(&[1, 8], offs.to_vec()).unwrap());
    let l = aux_loss(&mut tape, lv, ov, &[tg.clone()], lambda).unwrap();

    let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
    let cls = (bce(sig(0.3), 1.0) + bce(sig(-1.2), 0.0)) / 2.0;
    let mut reg = 0.0;
    for k in 0..2 {
        let mut se = 0.0;
        for t in 0..2 {
            let px = tg.means[k][t].0 + offs[k * 4 + t * 2];
            let py = tg.means[k][t].1 + offs[k * 4 + t * 2 + 1];
            se += (px - tg.expert[t].0).powi(2) + (py - tg.expert[t].1).powi(2);
        }
        reg += tg.weights[k] * se / 4.0;
    }
    assert!((tape.value(l).item() - (cls + lambda * reg)).abs() < 1e-9);
}

#[test]
fn aux_regression_vanishes_on_exact_offsets() {
    let tg = hand_aux();
    let mut offs = Vec::new();
    for m in &tg.means {
        for (mu, s) in m.iter().zip(&tg.expert) {
            offs.push(s.0 - mu.0);
            offs.push(s.1 - mu.1);
        }
    }
    let run = |lambda: f64| {
        let mut tape = Tape::<f64>::new();
        let lv = tape.variable(Tensor::from_vec(&[1, 2], vec![0.4, -0.4]).unwrap());
        let ov = tape.variable(Tensor::from_vec(&[1, 8], offs.clone()).unwrap());
        let l = aux_loss(&mut tape, lv, ov, &[tg.clone()], lambda).unwrap();
        tape.value(l).item()
    };
    assert!((run(0.0) - run(5.0)).abs() < 1e-15);
}

#[test]
fn aux_rejects_unnormalized_weights_and_mismatched_k() {
    let mut tg = hand_aux();
    tg.weights = vec![0.5, 0.6];
    let mut tape = Tape::<f64>::new();
    let lv = tape.variable(Tensor::zeros(&[1, 2]));
    let ov = tape.variable(Tensor::zeros(&[1, 8]));
    assert!(aux_loss(&mut tape, lv, ov, &[tg], 1.0).is_err());
    let lv3 = tape.variable(Tensor::zeros(&[1, 3]));
    assert!(aux_loss(&mut tape, lv3, ov, &[hand_aux()], 1.0).is_err());
}

#[test]
fn total_loss_arithmetic_and_term_naming() {
    let w = LossWeights::default();
    let unit = LossWeights { gamma: 1.0, ..w.clone() };
    assert!((total_loss(0.3, 0.2, 0.5, &unit).unwrap() - 1.0).abs() < 1e-15);
    let no_cme = LossWeights { w2: 0.0, w1: 2.0, ..w.clone() };
    assert_eq!(total_loss(0.3, 0.2, 0.5, &no_cme).unwrap(), 0.6);
    match total_loss(0.3, f64::NAN, 0.5, &w) {
        Err(CoreError::NonFinite { term }) => assert_eq!(term, "L_p"),
        other => panic!("{other:?}"),
    }
    match total_loss(0.3, 0.2, f64::INFINITY, &w) {
        Err(CoreError::NonFinite { term }) => assert_eq!(term, "L_aux"),
        other => panic!("{other:?}"),
    }
    assert!(LossWeights { beta: -1.0, ..w }.validate().is_err());
}

fn random_cost_target(rng: &mut impl Rng, t: usize, h: usize, w: usize) -> CostTarget {
    let labels: Vec<CostLabel> = (0..t * h * w)
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

#[test]
fn loss_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (n, t, h, w) = (2, 2, 16, 16);
    let pred = rand_tensor(&mut rng, &[n, t, h, w], 0.05, 0.95);
    let target = binary_tensor(&mut rng, &[n, t, h, w], 0.25);
    let vis = binary_tensor(&mut rng, &[n, t, h, w], 0.8);
    let targets: Vec<CostTarget> = (0..n).map(|_| random_cost_target(&mut rng, t, h, w)).collect();
    let masks: Vec<SampleMask> = targets
        .iter()
        .map(|tg| sample_mask(tg, MaskBudget::Fixed(300), &mut rng).unwrap())
        .collect();
    let aux: Vec<AuxTargets> = (0..n)
        .map(|_| {
            let mut wts: Vec<f64> = (0..3).map(|_| rng.random_range(0.1..1.0)).collect();
            let s: f64 = wts.iter().sum();
            wts.iter_mut().for_each(|v| *v /= s);
            AuxTargets {
                labels: vec![1.0, 0.0, 1.0],
                weights: wts,
                expert: (0..t).map(|_| (rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0))).collect(),
                means: (0..3)
                    .map(|_| (0..t).map(|_| (rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0))).collect())
                    .collect(),
            }
        })
        .collect();
    let logits = rand_tensor(&mut rng, &[n, 3], -2.0, 2.0);
    let offsets = rand_tensor(&mut rng, &[n, 3 * t * 2], -1.0, 1.0);
    let cost = rand_tensor(&mut rng, &[n, t, h, w], 0.05, 0.95);
    let weights = LossWeights {
        w1: 0.7,
        w2: 1.3,
        alpha: 0.9,
        beta: 1.1,
        gamma: 0.5,
        lambda: 0.6,
        mask_budget: MaskBudget::Fixed(300),
    };

    let reports = [
        check_inputs("L_pred", &[pred.clone()], 24, &mut rng, |tp, v| {
            Ok(pred_loss(tp, v[0], &target, &vis, 0.5).map(|l| l.total).unwrap())
        }),
        check_inputs("L_pred.ssim", &[pred.clone()], 24, &mut rng, |tp, v| {
            Ok(pred_loss(tp, v[0], &target, &vis, 0.5).map(|l| l.dissim).unwrap())
        }),
        check_inputs("L_p", &[cost.clone()], 24, &mut rng, |tp, v| Ok(prior_loss(tp, v[0], &targets, &masks).unwrap())),
        check_inputs("L_aux", &[logits.clone(), offsets.clone()], 24, &mut rng, |tp, v| {
            Ok(aux_loss(tp, v[0], v[1], &aux, 0.6).unwrap())
        }),
        check_inputs(
            "L_total",
            &[pred.clone(), cost.clone(), logits.clone(), offsets.clone()],
            24,
            &mut rng,
            |tp, v| {
                let lp = pred_loss(tp, v[0], &target, &vis, weights.gamma).unwrap().total;
                let pr = prior_loss(tp, v[1], &targets, &masks).unwrap();
                let ax = aux_loss(tp, v[2], v[3], &aux, weights.lambda).unwrap();
                Ok(total_loss_var(tp, Some(lp), pr, Some(ax), &weights).unwrap())
            },
        ),
    ];
    for r in reports {
        let r = r.unwrap();
        assert!(r.passes(1e-5), "{}: {}", r.name, r.max_rel_err);
    }
}

#[test]
fn loss_weights_scale_gradients_linearly() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let (n, t, h, w) = (1, 2, 8, 8);
    let cost = rand_tensor(&mut rng, &[n, t, h, w], 0.05, 0.95);
    let targets = vec![random_cost_target(&mut rng, t, h, w)];
    let masks = vec![sample_mask(&targets[0], MaskBudget::Fixed(40), &mut rng).unwrap()];
    let grad = |alpha: f64| {
        let mut tape = Tape::<f64>::new();
        let v = tape.variable(cost.clone());
        let pr = prior_loss(&mut tape, v, &targets, &masks).unwrap();
        let wts = LossWeights { alpha, ..LossWeights::default() };
        let l = total_loss_var(&mut tape, None, pr, None, &wts).unwrap();
        tape.backward(l).unwrap().get(v).unwrap().clone()
    };
    let (g1, g3) = (grad(1.0), grad(3.0));
    for (a, b) in g1.data().iter().zip(g3.data()) {
        assert!((3.0 * a - b).abs() <= 1e-12 * b.abs().max(1.0));
    }
}
