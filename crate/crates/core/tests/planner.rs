use std::collections::HashSet;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stcm_core::grid::{CostMapStack, GridConfig, OccupancyGrid, Pose2};
use stcm_core::intentions::{hausdorff, IntentionSet};
use stcm_core::planner::{
    arc_length, compare_candidates, cost_of, integrate_path, make_candidate, rank, rasterize_candidate,
    rule_cost_map, sample_candidates, score_all, top_k, top_k_per_cluster, Candidate, CandidateSource, PathShape,
    PlannerConfig, ShapeKind, VelocityProfile,
};

fn shape(kind: ShapeKind, kappa0: f64, kappa_rate: f64) -> PathShape {
    PathShape { kind, kappa0, kappa_rate }
}

fn tiny_cfg() -> GridConfig {
    GridConfig {
        height: 4,
        width: 4,
        cell_size: 1.0,
        origin_offset: (0.0, 0.0),
        tau: 1,
        horizon: 2,
        dt: 0.2,
    }
}

fn at_cell(cfg: &GridConfig, r: usize, c: usize) -> Pose2 {
    let (x, y) = cfg.cell_center(r, c);
    Pose2::new(x, y, 0.0)
}

fn fixed_candidate(poses: Vec<Pose2>, accel: f64, kappa0: f64, footprint: (f64, f64), cfg: &GridConfig) -> Candidate {
    let pc = PlannerConfig { footprint, ..PlannerConfig::default() };
    make_candidate(
        shape(ShapeKind::Arc, kappa0, 0.0),
        VelocityProfile { v0: 1.0, accel },
        poses,
        CandidateSource::Sampler,
        &pc,
        cfg,
    )
}

#[test]
fn straight_line_positions_are_exact() {
    let grid = GridConfig::default();
    let cands = sample_candidates(5.0, &PlannerConfig::default(), &grid).unwrap();
    let c = cands
        .iter()
        .find(|c| c.shape.kind == ShapeKind::Straight && c.profile.accel == 0.0)
        .unwrap();
    for (k, p) in c.poses.iter().enumerate() {
        let want = (k + 1) as f64 * grid.dt * 5.0;
        assert!((p.x - want).abs() <= 1e-9 && p.y.abs() <= 1e-9, "step {k}: {p:?}");
    }
}

#[test]
fn arc_samples_lie_on_the_circle() {
    let stations: Vec<f64> = (1..=40).map(|k| k as f64 * 0.7).collect();
    for kappa in [0.1, -0.1, 0.04] {
        let poses = integrate_path(&Pose2::identity(), &shape(ShapeKind::Arc, kappa, 0.0), &stations, 0.05);
        let r = 1.0 / kappa;
        for p in &poses {
            let d = p.x.hypot(p.y - r);
            assert!((d - r.abs()).abs() < 1e-3, "κ={kappa}: {d}");
        }
    }
}

#[test]
fn degenerate_clothoid_matches_arc() {
    let stations: Vec<f64> = (1..=10).map(|k| k as f64 * 1.3).collect();
    let arc = integrate_path(&Pose2::identity(), &shape(ShapeKind::Arc, 0.1, 0.0), &stations, 0.05);
    let clo = integrate_path(&Pose2::identity(), &shape(ShapeKind::Clothoid, 0.1, 0.0), &stations, 0.05);
    for (a, b) in arc.iter().zip(&clo) {
        assert!((a.x - b.x).abs() <= 1e-6 && (a.y - b.y).abs() <= 1e-6);
    }
}

#[test]
fn clothoid_heading_follows_curvature_rate() {
    let stations = [2.0, 5.0];
    let poses = integrate_path(&Pose2::identity(), &shape(ShapeKind::Clothoid, 0.02, 0.01), &stations, 0.05);
    for (p, s) in poses.iter().zip(stations) {
        assert!((p.heading - (0.02 * s + 0.005 * s * s)).abs() < 1e-12);
    }
}

#[test]
fn candidate_count_matches_the_sampling_grids() {
    let pc = PlannerConfig::default();
    // One straight, six arcs, 7×4 clothoids, times 11 accelerations.
    assert_eq!(pc.candidate_count(), (1 + 6 + 28) * 11);
    let cands = sample_candidates(6.0, &pc, &GridConfig::default()).unwrap();
    assert_eq!(cands.len(), pc.candidate_count());
    assert!(cands.iter().all(|c| c.poses.len() == 10));
    let bad = PlannerConfig { accelerations: vec![], ..pc };
    assert!(sample_candidates(6.0, &bad, &GridConfig::default()).is_err());
}

#[test]
fn velocity_stays_within_bounds() {
    let pc = PlannerConfig::default();
    let grid = GridConfig::default();
    for v0 in [0.0, 3.0, 11.5] {
        for c in sample_candidates(v0, &pc, &grid).unwrap() {
            let mut prev = (0.0, 0.0);
            for p in &c.poses {
                let step = (p.x - prev.0).hypot(p.y - prev.1);
                assert!(step <= pc.speed_limit * grid.dt + 1e-9);
                prev = (p.x, p.y);
            }
        }
    }
    // Stopping holds position.
    assert_eq!(arc_length(2.0, -5.0, 12.0, 1.0), arc_length(2.0, -5.0, 12.0, 2.0));
    assert_eq!(arc_length(11.0, 5.0, 12.0, 2.0), 11.0 * 0.2 + 0.5 * 5.0 * 0.04 + 12.0 * 1.8);
}

proptest! {
    #[test]
    fn quadrature_length_matches_integrated_speed(
        v0 in 0.0f64..12.0, a in -5.0f64..5.0, k0 in -0.1f64..0.1, kr in -0.01f64..0.01,
    ) {
        let stations: Vec<f64> = (1..=10).map(|k| arc_length(v0, a, 12.0, k as f64 * 0.2)).collect();
        let poses = integrate_path(&Pose2::identity(), &shape(ShapeKind::Clothoid, k0, kr), &stations, 0.05);
        // Chords between closely spaced samples approximate arc length.
        let fine: Vec<f64> = (1..=2000).map(|i| stations[9] * i as f64 / 2000.0).collect();
        let dense = integrate_path(&Pose2::identity(), &shape(ShapeKind::Clothoid, k0, kr), &fine, 0.05);
        let mut len = 0.0;
        let mut prev = (0.0, 0.0);
        for p in &dense {
            len += (p.x - prev.0).hypot(p.y - prev.1);
            prev = (p.x, p.y);
        }
        prop_assert!((len - stations[9]).abs() <= 1e-3 * stations[9].max(1e-3));
        prop_assert_eq!(poses.len(), 10);
    }

    #[test]
    fn ranking_is_invariant_under_affine_rescaling(seed in any::<u64>(), scale in 0.05f64..0.5, shift in 0.0f64..0.5) {
        let grid = GridConfig { height: 32, width: 32, origin_offset: (4.0, 8.0), ..GridConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pc = PlannerConfig { off_grid_penalty: 0.0, ..PlannerConfig::default() };
        let vals: Vec<f64> = (0..grid.horizon * 32 * 32).map(|_| rng.random::<f64>()).collect();
        let cm = CostMapStack::from_vec(grid.horizon, 32, 32, vals).unwrap();
        let cm2 = cm.map(|v| scale * v + shift);
        // The shift adds b per covered step, so only fully on-grid candidates are comparable.
        let mut a: Vec<_> = sample_candidates(4.0, &pc, &grid)
            .unwrap()
            .into_iter()
            .filter(|c| c.off_grid.iter().all(|o| !o))
            .collect();
        prop_assert!(a.len() > 10);
        let mut b = a.clone();
        score_all(&mut a, &cm, 0.0).unwrap();
        score_all(&mut b, &cm2, 0.0).unwrap();
        let (ra, rb) = (rank(&a).unwrap(), rank(&b).unwrap());
        // Only compare where costs are separated beyond rounding.
        for w in ra.windows(2) {
            if a[w[1]].cost - a[w[0]].cost > 1e-9 {
                let pa = rb.iter().position(|i| *i == w[0]).unwrap();
                let pb = rb.iter().position(|i| *i == w[1]).unwrap();
                prop_assert!(pa < pb);
            }
        }
    }

    #[test]
    fn cost_is_monotone_in_cell_costs(seed in any::<u64>(), bump in 0.0f64..1.0) {
        // Costs live in [0, 1]; the bump saturates at 1.
        let grid = GridConfig { height: 32, width: 32, origin_offset: (4.0, 8.0), ..GridConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cands = sample_candidates(5.0, &PlannerConfig::default(), &grid).unwrap();
        let vals: Vec<f64> = (0..grid.horizon * 32 * 32).map(|_| rng.random::<f64>()).collect();
        let cm = CostMapStack::from_vec(grid.horizon, 32, 32, vals).unwrap();
        let (k, r, c) = (rng.random_range(0..grid.horizon), rng.random_range(0..32), rng.random_range(0..32));
        let mut raised = cm.clone();
        raised.set(k, r, c, (cm.get(k, r, c) + bump).min(1.0));
        for cand in &cands {
            prop_assert!(cost_of(cand, &raised, 1.0) >= cost_of(cand, &cm, 1.0));
        }
    }
}

#[test]
fn sub_cell_footprint_covers_one_cell() {
    let cfg = GridConfig::default();
    let (cells, off) = rasterize_candidate(&[at_cell(&cfg, 20, 30)], (0.2, 0.2), &cfg);
    assert_eq!(cells[0], vec![(20, 30)]);
    assert!(!off[0]);
}

#[test]
fn off_grid_pose_is_flagged_and_empty() {
    let cfg = GridConfig::default();
    let (cells, off) = rasterize_candidate(&[Pose2::new(200.0, 0.0, 0.0)], (4.5, 2.0), &cfg);
    assert!(cells[0].is_empty());
    assert!(off[0]);
}

#[test]
fn diagonal_footprint_matches_point_sampling() {
    let cfg = GridConfig::default();
    let pose = Pose2::new(3.1, -0.7, std::f64::consts::FRAC_PI_4);
    let (cells, _) = rasterize_candidate(&[pose], (2.0, 1.0), &cfg);
    let got: HashSet<(usize, usize)> = cells[0].iter().copied().collect();
    // Inflated-rectangle oracle evaluated on every cell centre in local coordinates.
    let half = (1.0 + 0.25 * std::f64::consts::SQRT_2, 0.5 + 0.25 * std::f64::consts::SQRT_2);
    let mut want = HashSet::new();
    for r in 0..cfg.height {
        for c in 0..cfg.width {
            let (lx, ly) = pose.to_local(cfg.cell_center(r, c));
            if lx.abs() <= half.0 && ly.abs() <= half.1 {
                want.insert((r, c));
            }
        }
    }
    assert_eq!(got, want);
    // Every cell touched by the true footprint is in the conservative set.
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..10_000 {
        let local = (rng.random_range(-1.0..1.0), rng.random_range(-0.5..0.5));
        let w = pose.to_world(local);
        let cell = cfg.cell_of(w.0, w.1).unwrap();
        assert!(got.contains(&cell), "{cell:?} missing");
    }
}

#[test]
fn hand_cost_on_a_four_by_four_stack() {
    let cfg = tiny_cfg();
    let mut cm = CostMapStack::<f64>::zeros(2, 4, 4);
    cm.set(0, 1, 1, 0.4);
    cm.set(0, 1, 2, 0.8);
    cm.set(1, 2, 2, 0.3);
    cm.set(1, 3, 3, 0.9);
    // Inflated by half a cell diagonal, a 0.2 m square on the (1,1)/(1,2) edge covers both.
    let p0 = Pose2::new(2.0, 1.5, 0.0);
    let p1 = at_cell(&cfg, 2, 2);
    let c = fixed_candidate(vec![p0, p1], 0.0, 0.0, (0.2, 0.2), &cfg);
    assert_eq!(c.cells[0], vec![(1, 1), (1, 2)]);
    assert_eq!(c.cells[1], vec![(2, 2)]);
    assert!((cost_of(&c, &cm, 1.0) - ((0.4 + 0.8) / 2.0 + 0.3)).abs() < 1e-12);
    assert_eq!(cost_of(&c, &CostMapStack::<f64>::zeros(2, 4, 4), 1.0), 0.0);
    let ones = CostMapStack::from_vec(2, 4, 4, vec![1.0; 32]).unwrap();
    assert!((cost_of(&c, &ones, 1.0) - 2.0).abs() < 1e-12);
    // Leaving the grid at one step adds the penalty once.
    let off = fixed_candidate(vec![p0, Pose2::new(40.0, 0.0, 0.0)], 0.0, 0.0, (0.2, 0.2), &cfg);
    assert!((cost_of(&off, &cm, 1.0) - (0.6 + 1.0)).abs() < 1e-12);
}

#[test]
fn ties_prefer_gentle_candidates() {
    let cfg = tiny_cfg();
    let poses = vec![at_cell(&cfg, 1, 1), at_cell(&cfg, 1, 2)];
    let a = fixed_candidate(poses.clone(), 2.0, 0.0, (0.2, 0.2), &cfg);
    let b = fixed_candidate(poses.clone(), 0.0, 0.1, (0.2, 0.2), &cfg);
    let c = fixed_candidate(poses, 0.0, 0.0, (0.2, 0.2), &cfg);
    assert_eq!(rank(&[a.clone(), b.clone(), c.clone()]).unwrap(), vec![2, 1, 0]);
    assert_eq!(top_k(&[a.clone()], 1).unwrap(), vec![0]);
    let mut cheaper = a.clone();
    cheaper.cost = -1.0;
    assert_eq!(compare_candidates(&cheaper, &c), std::cmp::Ordering::Less);
    assert!(rank(&[]).is_err());
}

#[test]
fn top_one_beats_any_zero_cost_candidate() {
    let grid = GridConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..10 {
        let mut cands = sample_candidates(rng.random_range(0.0..10.0), &PlannerConfig::default(), &grid).unwrap();
        let occ: Vec<f64> = (0..grid.cells()).map(|_| f64::from(u8::from(rng.random_bool(0.02)))).collect();
        let cm = CostMapStack::from_vec(grid.horizon, grid.height, grid.width, occ.repeat(grid.horizon)).unwrap();
        score_all(&mut cands, &cm, 1.0).unwrap();
        let best = cands[rank(&cands).unwrap()[0]].cost;
        if let Some(z) = cands.iter().find(|c| c.cost == 0.0) {
            assert!(best <= z.cost);
        }
    }
}

#[test]
fn per_cluster_selection_matches_exhaustive_enumeration() {
    let grid = GridConfig::default();
    let pc = PlannerConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let means: Vec<Vec<(f64, f64)>> = [-0.08, -0.03, 0.0, 0.03, 0.08]
        .iter()
        .map(|k| {
            let st: Vec<f64> = (1..=10).map(|i| 1.2 * i as f64).collect();
            integrate_path(&Pose2::identity(), &shape(ShapeKind::Arc, *k + 1e-6, 0.0), &st, 0.05)
                .iter()
                .map(|p| (p.x, p.y))
                .collect()
        })
        .collect();
    let set = IntentionSet {
        member_counts: vec![1; means.len()],
        means,
        eps: 1.0,
        min_pts: 1,
        membership_eps: 1.0,
    };
    for _ in 0..5 {
        let mut cands = sample_candidates(6.0, &pc, &grid).unwrap();
        let vals: Vec<f64> = (0..grid.horizon * grid.cells()).map(|_| rng.random::<f64>()).collect();
        let cm = CostMapStack::from_vec(grid.horizon, grid.height, grid.width, vals).unwrap();
        score_all(&mut cands, &cm, 1.0).unwrap();
        // Exhaustive: best candidate of every cluster, then the k cheapest clusters.
        let mut best: Vec<Option<usize>> = vec![None; set.len()];
        for (i, c) in cands.iter().enumerate() {
            let d: Vec<f64> = set.means.iter().map(|m| hausdorff(&c.positions(), m).unwrap()).collect();
            let cl = (0..d.len()).fold(0, |b, j| if d[j] < d[b] { j } else { b });
            match best[cl] {
                Some(j) if compare_candidates(&cands[j], c).is_le() => {}
                _ => best[cl] = Some(i),
            }
        }
        let mut picks: Vec<usize> = best.into_iter().flatten().collect();
        picks.sort_by(|&i, &j| compare_candidates(&cands[i], &cands[j]));
        picks.truncate(3);
        let sel = top_k_per_cluster(&cands, 3, &set).unwrap();
        assert_eq!(sel.picks, picks);
        assert!(!sel.shortfall);
        let all = top_k_per_cluster(&cands, 9, &set).unwrap();
        assert!(all.shortfall && all.picks.len() <= set.len());
    }
}

#[test]
fn rule_cost_map_marks_blocked_cells() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let plain = OccupancyGrid::<f32>::zeros(8, 8);
    let open = vec![1u8; 64];
    let cm = rule_cost_map(&plain, &open, 3).unwrap();
    assert!(cm.values().iter().all(|v| *v == 0.0));

    let mut occ = OccupancyGrid::<f32>::zeros(8, 8);
    occ.set(2, 5, 1.0);
    let cm = rule_cost_map(&occ, &open, 3).unwrap();
    for k in 0..3 {
        assert_eq!(cm.get(k, 2, 5), 1.0);
        assert_eq!(cm.step(k).iter().filter(|v| **v == 1.0).count(), 1);
    }

    let occ = OccupancyGrid::<f32>::from_vec(8, 8, (0..64).map(|_| f32::from(u8::from(rng.random_bool(0.2)))).collect()).unwrap();
    let drivable: Vec<u8> = (0..64).map(|_| u8::from(rng.random_bool(0.7))).collect();
    let union = (0..64).filter(|&i| drivable[i] == 0 || occ.values()[i] >= 0.5).count();
    let cm = rule_cost_map(&occ, &drivable, 2).unwrap();
    assert_eq!(cm.steps(), 2);
    for k in 0..2 {
        assert_eq!(cm.step(k).iter().filter(|v| **v == 1.0).count(), union);
    }
    assert!(rule_cost_map(&occ, &drivable[..10], 2).is_err());
}
