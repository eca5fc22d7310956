use stcm_core::grid::{GridConfig, Pose2};
use stcm_core::synth::{
    generate_scenario, lidar_scan, LANE_WIDTH, make_training_example, random_spec, Agent, AgentKind, ExpertMode, MapKind,
    ScenarioSpec,
};

fn spec(seed: u64, kind: MapKind, mode: ExpertMode) -> ScenarioSpec {
    ScenarioSpec::new(seed, kind, mode, &GridConfig::default())
}

fn open_plain_without_agents() -> stcm_core::synth::Scenario {
    let mut s = spec(1, MapKind::OpenPlain, ExpertMode::KeepLane);
    s.agent_count = 0;
    s.ego_speed_range = (0.0, 0.0);
    generate_scenario(&s).unwrap()
}

fn parked(cx: f64, cy: f64, size: f64, steps: usize) -> Agent {
    Agent {
        kind: AgentKind::Vehicle,
        length: size,
        width: size,
        speed: 0.0,
        poses: vec![Pose2::new(cx, cy, 0.0); steps],
    }
}

#[test]
fn identical_specs_give_identical_scenarios() {
    for seed in 0..5 {
        let s = random_spec(seed, &GridConfig::default(), 0.3);
        assert_eq!(generate_scenario(&s).unwrap(), generate_scenario(&s).unwrap());
    }
}

#[test]
fn infeasible_specs_are_rejected() {
    assert!(generate_scenario(&spec(0, MapKind::StraightRoad, ExpertMode::Turn)).is_err());
    let mut one_lane = spec(0, MapKind::StraightRoad, ExpertMode::LaneChangeLeft);
    one_lane.lane_count = 1;
    assert!(generate_scenario(&one_lane).is_err());
    let mut short = spec(0, MapKind::StraightRoad, ExpertMode::KeepLane);
    short.extra_steps = short.horizon - 1;
    assert!(generate_scenario(&short).is_err());
}

#[test]
fn open_plain_without_agents_returns_nothing() {
    let sc = open_plain_without_agents();
    assert!(sc.sensor_frames.iter().all(|f| f.is_empty()));
}

#[test]
fn square_agent_ahead_is_hit_on_its_near_face() {
    let mut sc = open_plain_without_agents();
    let steps = sc.steps();
    sc.agents.push(parked(5.0, 0.0, 2.0, steps));
    let pts = lidar_scan(&sc, 0);
    // Beam 0 points straight ahead.
    let ahead: Vec<_> = pts.iter().filter(|p| p.1.abs() < 1e-9 && p.0 > 0.0).collect();
    assert_eq!(ahead.len(), 1);
    assert!((ahead[0].0 - (5.0 - 1.0)).abs() < 1e-12);
}

#[test]
fn occluded_agent_is_not_returned() {
    let mut sc = open_plain_without_agents();
    let steps = sc.steps();
    sc.agents.push(parked(5.0, 0.0, 2.0, steps));
    sc.agents.push(parked(10.0, 0.0, 2.0, steps));
    let pts = lidar_scan(&sc, 0);
    assert!(pts.iter().all(|p| p.0 < 6.0 + 1e-9));
}

#[test]
fn constant_velocity_agents_advance_linearly() {
    let mut s = spec(7, MapKind::StraightRoad, ExpertMode::KeepLane);
    s.agent_count = 6;
    let sc = generate_scenario(&s).unwrap();
    assert!(!sc.agents.is_empty());
    for a in &sc.agents {
        let p0 = a.poses[0];
        let (sh, ch) = p0.heading.sin_cos();
        for (k, p) in a.poses.iter().enumerate() {
            let t = k as f64 * s.dt;
            assert!((p.x - (p0.x + ch * a.speed * t)).abs() < 1e-9);
            assert!((p.y - (p0.y + sh * a.speed * t)).abs() < 1e-9);
        }
    }
}

#[test]
fn road_without_agents_returns_only_boundary_points() {
    for (kind, seed) in [(MapKind::StraightRoad, 3), (MapKind::CurvedRoad, 4), (MapKind::Intersection, 5)] {
        let mut s = spec(seed, kind, ExpertMode::KeepLane);
        s.agent_count = 0;
        let sc = generate_scenario(&s).unwrap();
        let mut n = 0;
        for (k, frame) in sc.sensor_frames.iter().enumerate() {
            let ego = sc.ego_pose(k);
            for &p in frame {
                let w = ego.to_world(p);
                let d = ((w.0 - ego.x), (w.1 - ego.y));
                let len = (d.0 * d.0 + d.1 * d.1).sqrt();
                let u = (d.0 / len, d.1 / len);
                assert!(sc.road.is_drivable(w.0 - 1e-6 * u.0, w.1 - 1e-6 * u.1));
                assert!(!sc.road.is_drivable(w.0 + 1e-6 * u.0, w.1 + 1e-6 * u.1));
                n += 1;
            }
        }
        assert!(n > 0, "{kind:?} produced no boundary returns");
    }
}

#[test]
fn sensor_points_lie_on_some_surface() {
    for seed in 0..20 {
        let sc = generate_scenario(&random_spec(seed, &GridConfig::default(), 0.5)).unwrap();
        for (k, frame) in sc.sensor_frames.iter().enumerate() {
            let ego = sc.ego_pose(k);
            for &p in frame {
                let w = ego.to_world(p);
                let on_agent = sc.agents.iter().any(|a| {
                    let fp = a.footprint(k);
                    fp.inflated(1e-6).contains(w) && !fp.inflated(-1e-6).contains(w)
                });
                let (a, b) = (
                    sc.road.is_drivable(w.0 - 1e-6 * (w.0 - ego.x), w.1 - 1e-6 * (w.1 - ego.y)),
                    sc.road.is_drivable(w.0 + 1e-6 * (w.0 - ego.x) / p.0.hypot(p.1), w.1 + 1e-6 * (w.1 - ego.y) / p.0.hypot(p.1)),
                );
                assert!(on_agent || (a && !b), "seed {seed} step {k}: stray point {p:?}");
            }
        }
    }
}

#[test]
fn expert_stays_on_road_and_within_speed_bound() {
    for seed in 0..60 {
        let s = random_spec(seed, &GridConfig::default(), 0.3);
        let sc = generate_scenario(&s).unwrap();
        let pos = sc.expert.positions();
        assert_eq!(pos.len(), s.tau + s.horizon);
        for p in &sc.expert.poses {
            assert!(sc.road.is_drivable(p.x, p.y), "seed {seed} mode {:?}", s.expert_mode);
        }
        for w in sc.expert.poses.windows(2) {
            let d = (w[1].x - w[0].x).hypot(w[1].y - w[0].y);
            assert!(d <= s.speed_limit * s.dt * 1.1, "seed {seed}: step {d}");
        }
        // No generated agent touches the expert.
        for a in &sc.agents {
            for k in 0..sc.steps() {
                assert!(!a.footprint(k).overlaps(&sc.expert.footprint(k)));
            }
        }
    }
}

#[test]
fn static_scene_observations_coincide() {
    let cfg = GridConfig::default();
    let mut s = spec(9, MapKind::StraightRoad, ExpertMode::KeepLane);
    s.ego_speed_range = (0.0, 0.0);
    s.agent_speed_range = (0.0, 0.0);
    s.crossing_speed_range = (0.0, 0.0);
    let sc = generate_scenario(&s).unwrap();
    let ex = make_training_example(&sc, &cfg, 8).unwrap();
    for g in &ex.observed[1..] {
        assert_eq!(g, &ex.observed[0]);
    }
    assert!(ex.observed[0].count_at_least(0.5) > 0);
}

#[test]
fn targets_mark_exactly_the_agent_footprints() {
    let cfg = GridConfig::default();
    let mut s = spec(11, MapKind::OpenPlain, ExpertMode::KeepLane);
    s.agent_count = 5;
    s.crossing_bias = 0.0;
    let sc = generate_scenario(&s).unwrap();
    let ex = make_training_example(&sc, &cfg, 8).unwrap();
    let cur = sc.current_pose();
    for (k, target) in ex.targets.iter().enumerate() {
        let step = cfg.tau + k;
        for r in 0..cfg.height {
            for c in 0..cfg.width {
                let p = cur.to_world(cfg.cell_center(r, c));
                // Point-in-convex-polygon via edge cross products.
                let inside = sc.agents.iter().any(|a| {
                    let cs = a.footprint(step).corners();
                    (0..4).all(|i| {
                        let (a0, a1) = (cs[i], cs[(i + 1) % 4]);
                        (a1.0 - a0.0) * (p.1 - a0.1) - (a1.1 - a0.1) * (p.0 - a0.0) >= -1e-12
                    })
                });
                assert_eq!(target.get(r, c) == 1.0, inside, "step {k} cell ({r},{c})");
            }
        }
        assert_eq!(target, &ex.future[k]);
    }
}

#[test]
fn target_occupancy_is_physical() {
    let cfg = GridConfig::default();
    for seed in 0..10 {
        let sc = generate_scenario(&random_spec(seed, &cfg, 0.3)).unwrap();
        let ex = make_training_example(&sc, &cfg, 8).unwrap();
        let cur = sc.current_pose();
        let half = 0.5 * cfg.cell_size;
        for (k, target) in ex.targets.iter().enumerate() {
            for r in 0..cfg.height {
                for c in 0..cfg.width {
                    if target.get(r, c) < 0.5 {
                        continue;
                    }
                    let (x, y) = cfg.cell_center(r, c);
                    let center = cur.to_world((x, y));
                    let in_agent = sc.agents.iter().any(|a| a.footprint(cfg.tau + k).contains(center));
                    let corners = [(-half, -half), (half, -half), (-half, half), (half, half)]
                        .map(|(dx, dy)| cur.to_world((x + dx, y + dy)))
                        .map(|p| sc.road.is_drivable(p.0, p.1));
                    let on_edge = corners.iter().any(|v| *v) && corners.iter().any(|v| !*v);
                    assert!(in_agent || on_edge, "seed {seed}: phantom cell ({r},{c}) at step {k}");
                }
            }
        }
    }
}

#[test]
fn expert_is_at_origin_at_the_current_step() {
    let cfg = GridConfig::default();
    let sc = generate_scenario(&spec(12, MapKind::CurvedRoad, ExpertMode::LaneChangeLeft)).unwrap();
    let ex = make_training_example(&sc, &cfg, 8).unwrap();
    let o = ex.expert[cfg.tau - 1];
    assert!(o.0.abs() < 1e-12 && o.1.abs() < 1e-12);
    assert_eq!(ex.expert.len(), cfg.tau + cfg.horizon);
    assert_eq!(ex.expert_future(cfg.tau).len(), cfg.horizon);
    assert_eq!(ex.semantic.channels, 8);
    assert!(ex.semantic.is_drivable(32, 12));
}

#[test]
fn mismatched_timing_is_rejected() {
    let cfg = GridConfig::default();
    let sc = generate_scenario(&spec(13, MapKind::StraightRoad, ExpertMode::KeepLane)).unwrap();
    let longer = GridConfig { horizon: cfg.horizon + 5, ..cfg };
    assert!(make_training_example(&sc, &longer, 8).is_err());
}

#[test]
fn turns_end_on_the_crossing_road() {
    let mut completed = 0;
    for seed in 0..10 {
        let sc = generate_scenario(&spec(seed, MapKind::Intersection, ExpertMode::Turn)).unwrap();
        let last = sc.expert.poses.last().unwrap();
        assert!(last.heading.abs() <= std::f64::consts::FRAC_PI_2 + 1e-12);
        if (last.heading.abs() - std::f64::consts::FRAC_PI_2).abs() < 1e-9 {
            assert!((last.x - sc.road.cross_x).abs() <= 0.5 * LANE_WIDTH + 1e-9);
            completed += 1;
        }
    }
    assert!(completed > 0);
}
