//! Deterministic synthetic driving scenes: analytic road maps, constant-velocity
//! agents, a 2D range sensor and scripted expert maneuvers.
//!
//! World frame: the expert sits at the origin heading +x at the current step
//! (index `tau − 1`). Lateral offsets `d` are measured left of the ego lane center.

use std::f64::consts::{FRAC_PI_2, PI};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{input_err, Result};
use crate::geometry::{Rect, EGO_LENGTH, EGO_WIDTH};
use crate::grid::{
    compute_visibility, rasterize_points, transform_grid, GridConfig, OccupancyGrid, Pose2, SemanticMap,
    VisibilityMask, VisibilityMethod,
};

pub const LANE_WIDTH: f64 = 3.5;
const ACCEL: f64 = 1.5;
const DECEL: f64 = 2.5;
const RIGHT_TURN_RADIUS: f64 = 6.0;
const LEFT_TURN_RADIUS: f64 = 8.0;
const TURN_SPEED_MAX: f64 = 6.0;
const PLAZA_MARGIN: f64 = 4.0;
const CROSS_ROAD_WIDTH: f64 = 2.0 * LANE_WIDTH;
const LANE_CENTER_TOL: f64 = 0.5;
/// Clearance kept between generated agents and the expert footprint.
const EXPERT_CLEARANCE: f64 = 0.5;
const PLACEMENT_ATTEMPTS: usize = 60;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MapKind {
    StraightRoad,
    CurvedRoad,
    Intersection,
    /// Unbounded drivable plane; used for sensor and target tests.
    OpenPlain,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExpertMode {
    KeepLane,
    Accelerate,
    Decelerate,
    LaneChangeLeft,
    LaneChangeRight,
    Turn,
}

impl ExpertMode {
    pub const ALL: [ExpertMode; 6] = [
        ExpertMode::KeepLane,
        ExpertMode::Accelerate,
        ExpertMode::Decelerate,
        ExpertMode::LaneChangeLeft,
        ExpertMode::LaneChangeRight,
        ExpertMode::Turn,
    ];
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensorConfig {
    pub beams: usize,
    pub range: f64,
}

impl Default for SensorConfig {
    fn default() -> Self {
        SensorConfig { beams: 360, range: 30.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub seed: u64,
    pub map_kind: MapKind,
    pub lane_count: usize,
    pub agent_count: usize,
    /// Lane-following agent speeds, m/s.
    pub agent_speed_range: (f64, f64),
    /// Speeds of agents crossing the ego road, m/s.
    pub crossing_speed_range: (f64, f64),
    pub ego_speed_range: (f64, f64),
    pub expert_mode: ExpertMode,
    pub speed_limit: f64,
    pub tau: usize,
    pub horizon: usize,
    /// Frames simulated past the horizon.
    pub extra_steps: usize,
    pub dt: f64,
    /// Probability that a generated agent is a crosser timed to meet a constant-speed ego.
    pub crossing_bias: f64,
    pub sensor: SensorConfig,
}

impl ScenarioSpec {
    pub fn new(seed: u64, map_kind: MapKind, expert_mode: ExpertMode, grid: &GridConfig) -> Self {
        ScenarioSpec {
            seed,
            map_kind,
            lane_count: 2,
            agent_count: 4,
            agent_speed_range: (2.0, 8.0),
            crossing_speed_range: (1.5, 4.0),
            ego_speed_range: (4.0, 9.0),
            expert_mode,
            speed_limit: 12.0,
            tau: grid.tau,
            horizon: grid.horizon,
            extra_steps: grid.horizon,
            dt: grid.dt,
            crossing_bias: 0.3,
            sensor: SensorConfig::default(),
        }
    }

    pub fn steps(&self) -> usize {
        self.tau + self.horizon + self.extra_steps
    }

    pub fn current_step(&self) -> usize {
        self.tau - 1
    }

    pub fn validate(&self) -> Result<()> {
        let ranges = [self.agent_speed_range, self.crossing_speed_range, self.ego_speed_range];
        if ranges.iter().any(|&(lo, hi)| !(lo >= 0.0 && hi >= lo)) {
            return input_err("speed ranges must be non-negative and ordered");
        }
        if self.tau == 0 || self.horizon == 0 || !(self.dt > 0.0) {
            return input_err("tau, horizon and dt must be positive");
        }
        if self.extra_steps < self.horizon {
            return input_err("need at least `horizon` extra future steps");
        }
        if !(self.speed_limit > 0.0) || self.ego_speed_range.1 > 0.9 * self.speed_limit {
            return input_err("ego speeds must stay below 0.9 × speed_limit");
        }
        if !(0.0..=1.0).contains(&self.crossing_bias) {
            return input_err("crossing_bias must be a probability");
        }
        if self.sensor.beams == 0 || !(self.sensor.range > 0.0) {
            return input_err("sensor needs beams and a positive range");
        }
        let roads = self.map_kind != MapKind::OpenPlain;
        if roads && self.lane_count == 0 {
            return input_err("road maps need at least one lane");
        }
        match self.expert_mode {
            ExpertMode::Turn if self.map_kind != MapKind::Intersection => {
                input_err(format!("turn maneuver needs an intersection, map is {:?}", self.map_kind))
            }
            ExpertMode::LaneChangeLeft | ExpertMode::LaneChangeRight if roads && self.lane_count < 2 => {
                input_err("lane change needs at least two lanes")
            }
            _ => Ok(()),
        }
    }
}

/// Analytic road layout. The reference line is the ego lane center through the origin.
#[derive(Clone, Debug, PartialEq)]
pub struct RoadMap {
    pub kind: MapKind,
    pub lane_count: usize,
    /// Ego lane index counted from the rightmost lane.
    pub ego_lane: usize,
    /// Signed radius of the reference line (positive bends left); infinite when straight.
    pub radius: f64,
    /// x position of the crossing road center (intersection maps).
    pub cross_x: f64,
}

impl RoadMap {
    /// Lateral span `(d_lo, d_hi)` of the paved road.
    pub fn road_span(&self) -> (f64, f64) {
        let lo = -(self.ego_lane as f64) * LANE_WIDTH - 0.5 * LANE_WIDTH;
        let hi = (self.lane_count - 1 - self.ego_lane) as f64 * LANE_WIDTH + 0.5 * LANE_WIDTH;
        (lo, hi)
    }

    pub fn lane_offsets(&self) -> Vec<f64> {
        (0..self.lane_count)
            .map(|i| (i as f64 - self.ego_lane as f64) * LANE_WIDTH)
            .collect()
    }

    fn curved(&self) -> bool {
        self.radius.is_finite()
    }

    /// World pose at arc length `s` along the reference line, shifted by `d`.
    pub fn lane_pose(&self, s: f64, d: f64) -> Pose2 {
        if self.curved() {
            let r = self.radius;
            let phi = s / r;
            let (sp, cp) = phi.sin_cos();
            Pose2::new((r - d) * sp, r - (r - d) * cp, phi)
        } else {
            Pose2::new(s, d, 0.0)
        }
    }

    /// Inverse of [`RoadMap::lane_pose`]: `(s, d)` for a world point.
    pub fn lane_coords(&self, x: f64, y: f64) -> (f64, f64) {
        if self.curved() {
            let r = self.radius;
            let sg = r.signum();
            let rho = (x * x + (y - r) * (y - r)).sqrt();
            let phi = (sg * x).atan2(sg * (r - y));
            (r * phi, r - sg * rho)
        } else {
            (x, y)
        }
    }

    fn in_plaza(&self, x: f64, y: f64, margin: f64) -> bool {
        let (lo, hi) = self.road_span();
        (x - self.cross_x).abs() <= 0.5 * CROSS_ROAD_WIDTH + margin && y >= lo - margin && y <= hi + margin
    }

    pub fn is_drivable(&self, x: f64, y: f64) -> bool {
        match self.kind {
            MapKind::OpenPlain => true,
            MapKind::StraightRoad | MapKind::CurvedRoad => {
                let (_, d) = self.lane_coords(x, y);
                let (lo, hi) = self.road_span();
                d >= lo && d <= hi
            }
            MapKind::Intersection => {
                let (lo, hi) = self.road_span();
                (y >= lo && y <= hi)
                    || (x - self.cross_x).abs() <= 0.5 * CROSS_ROAD_WIDTH
                    || self.in_plaza(x, y, PLAZA_MARGIN)
            }
        }
    }

    pub fn in_intersection(&self, x: f64, y: f64) -> bool {
        self.kind == MapKind::Intersection && self.in_plaza(x, y, PLAZA_MARGIN)
    }

    pub fn near_lane_center(&self, x: f64, y: f64) -> bool {
        match self.kind {
            MapKind::OpenPlain => false,
            _ => {
                let (_, d) = self.lane_coords(x, y);
                let main = self.lane_offsets().iter().any(|o| (d - o).abs() <= LANE_CENTER_TOL);
                let cross = self.kind == MapKind::Intersection
                    && [-0.5, 0.5]
                        .iter()
                        .any(|k| (x - self.cross_x - k * LANE_WIDTH).abs() <= LANE_CENTER_TOL);
                main || cross
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AgentKind {
    Vehicle,
    Crosser,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Agent {
    pub kind: AgentKind,
    pub length: f64,
    pub width: f64,
    pub speed: f64,
    /// World pose per simulated step.
    pub poses: Vec<Pose2>,
}

impl Agent {
    pub fn footprint(&self, step: usize) -> Rect {
        Rect::at_pose(&self.poses[step], self.length, self.width)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExpertTrajectory {
    /// World pose per simulated step.
    pub poses: Vec<Pose2>,
    pub speeds: Vec<f64>,
    /// Scripted maneuver; only for test oracles.
    pub mode: ExpertMode,
    /// Number of leading steps that form s* (τ + T).
    pub len: usize,
}

impl ExpertTrajectory {
    /// s* in world coordinates.
    pub fn positions(&self) -> Vec<(f64, f64)> {
        self.poses[..self.len].iter().map(|p| (p.x, p.y)).collect()
    }

    pub fn footprint(&self, step: usize) -> Rect {
        Rect::at_pose(&self.poses[step], EGO_LENGTH, EGO_WIDTH)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scenario {
    pub spec: ScenarioSpec,
    pub road: RoadMap,
    pub agents: Vec<Agent>,
    pub expert: ExpertTrajectory,
    /// Range returns per step, in the ego frame of that step.
    pub sensor_frames: Vec<Vec<(f64, f64)>>,
}

impl Scenario {
    pub fn steps(&self) -> usize {
        self.spec.steps()
    }

    pub fn ego_pose(&self, step: usize) -> Pose2 {
        self.expert.poses[step]
    }

    pub fn current_pose(&self) -> Pose2 {
        self.ego_pose(self.spec.current_step())
    }

    pub fn current_speed(&self) -> f64 {
        self.expert.speeds[self.spec.current_step()]
    }
}

fn smoothstep5(x: f64) -> (f64, f64) {
    let x = x.clamp(0.0, 1.0);
    let v = x * x * x * (10.0 - 15.0 * x + 6.0 * x * x);
    let dv = 30.0 * x * x * (1.0 - x) * (1.0 - x);
    (v, dv)
}

#[derive(Clone, Copy, Debug)]
enum ExpertPath {
    Lane { shift: f64, length: f64 },
    Turn { left: bool, start: f64 },
}

impl ExpertPath {
    fn pose(&self, road: &RoadMap, u: f64) -> Pose2 {
        match *self {
            ExpertPath::Lane { shift, length } => {
                if shift == 0.0 || u <= 0.0 {
                    return road.lane_pose(u, 0.0);
                }
                let (b, db) = smoothstep5(u / length);
                let base = road.lane_pose(u, shift * b);
                Pose2::new(base.x, base.y, base.heading + (shift * db / length).atan())
            }
            ExpertPath::Turn { left, start } => {
                let (r, sign) = if left { (LEFT_TURN_RADIUS, 1.0) } else { (RIGHT_TURN_RADIUS, -1.0) };
                let arc = FRAC_PI_2 * r;
                if u <= start {
                    Pose2::new(u, 0.0, 0.0)
                } else if u <= start + arc {
                    let th = (u - start) / r;
                    Pose2::new(start + r * th.sin(), sign * (r - r * th.cos()), sign * th)
                } else {
                    Pose2::new(start + r, sign * (r + (u - start - arc)), sign * FRAC_PI_2)
                }
            }
        }
    }
}

/// Distance travelled and speed at time `t` after the current step.
fn travel(mode: ExpertMode, v0: f64, vmax: f64, t: f64) -> (f64, f64) {
    if t <= 0.0 {
        return (v0 * t, v0);
    }
    match mode {
        ExpertMode::Accelerate => {
            let t_cap = ((vmax - v0) / ACCEL).max(0.0);
            if t <= t_cap {
                (v0 * t + 0.5 * ACCEL * t * t, v0 + ACCEL * t)
            } else {
                (v0 * t_cap + 0.5 * ACCEL * t_cap * t_cap + vmax * (t - t_cap), vmax)
            }
        }
        ExpertMode::Decelerate => {
            let t_stop = v0 / DECEL;
            if t <= t_stop {
                (v0 * t - 0.5 * DECEL * t * t, v0 - DECEL * t)
            } else {
                (0.5 * v0 * t_stop, 0.0)
            }
        }
        _ => (v0 * t, v0),
    }
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

fn build_road(spec: &ScenarioSpec, rng: &mut ChaCha8Rng) -> RoadMap {
    let lane_count = spec.lane_count.max(1);
    let ego_lane = match (spec.map_kind, spec.expert_mode) {
        (MapKind::Intersection, ExpertMode::Turn) => 0,
        (_, ExpertMode::LaneChangeLeft) => rng.random_range(0..lane_count - 1),
        (_, ExpertMode::LaneChangeRight) => rng.random_range(1..lane_count),
        _ => rng.random_range(0..lane_count),
    };
    let radius = match spec.map_kind {
        MapKind::CurvedRoad => {
            let r = rng.random_range(40.0..120.0);
            if rng.random_bool(0.5) { r } else { -r }
        }
        _ => f64::INFINITY,
    };
    let cross_x = match (spec.map_kind, spec.expert_mode) {
        (MapKind::Intersection, ExpertMode::Turn) => rng.random_range(8.0..14.0),
        (MapKind::Intersection, _) => rng.random_range(6.0..20.0),
        _ => f64::INFINITY,
    };
    RoadMap {
        kind: spec.map_kind,
        lane_count,
        ego_lane,
        radius,
        cross_x,
    }
}

fn build_expert(spec: &ScenarioSpec, road: &RoadMap, rng: &mut ChaCha8Rng) -> ExpertTrajectory {
    let mut v0 = uniform(rng, spec.ego_speed_range);
    let horizon_time = spec.horizon as f64 * spec.dt;
    let path = match spec.expert_mode {
        ExpertMode::LaneChangeLeft | ExpertMode::LaneChangeRight => {
            let sign = if spec.expert_mode == ExpertMode::LaneChangeLeft { 1.0 } else { -1.0 };
            ExpertPath::Lane {
                shift: sign * LANE_WIDTH,
                length: (v0 * horizon_time).max(1.0),
            }
        }
        ExpertMode::Turn => {
            v0 = v0.min(TURN_SPEED_MAX);
            let left = rng.random_bool(0.5);
            let lane_x = if left { road.cross_x + 0.5 * LANE_WIDTH } else { road.cross_x - 0.5 * LANE_WIDTH };
            let r = if left { LEFT_TURN_RADIUS } else { RIGHT_TURN_RADIUS };
            ExpertPath::Turn { left, start: lane_x - r }
        }
        _ => ExpertPath::Lane { shift: 0.0, length: 1.0 },
    };
    let cur = spec.current_step() as f64;
    let (poses, speeds) = (0..spec.steps())
        .map(|i| {
            let t = (i as f64 - cur) * spec.dt;
            let (u, v) = travel(spec.expert_mode, v0, spec.speed_limit, t);
            (path.pose(road, u), v)
        })
        .unzip();
    ExpertTrajectory {
        poses,
        speeds,
        mode: spec.expert_mode,
        len: spec.tau + spec.horizon,
    }
}

/// Agent moving at constant velocity along a straight line through `at` at time `t_at`.
fn straight_mover(kind: AgentKind, size: (f64, f64), at: Pose2, t_at: f64, speed: f64, spec: &ScenarioSpec) -> Agent {
    let (s, c) = at.heading.sin_cos();
    let poses = (0..spec.steps())
        .map(|i| {
            let dt = i as f64 * spec.dt - t_at;
            Pose2::new(at.x + c * speed * dt, at.y + s * speed * dt, at.heading)
        })
        .collect();
    Agent {
        kind,
        length: size.0,
        width: size.1,
        speed,
        poses,
    }
}

fn lane_vehicle(spec: &ScenarioSpec, road: &RoadMap, rng: &mut ChaCha8Rng) -> Agent {
    let offsets = road.lane_offsets();
    let d = offsets[rng.random_range(0..offsets.len())];
    let s0 = rng.random_range(6.0..35.0);
    let speed = uniform(rng, spec.agent_speed_range);
    let t_cur = spec.current_step() as f64 * spec.dt;
    let poses = (0..spec.steps())
        .map(|i| road.lane_pose(s0 + speed * (i as f64 * spec.dt - t_cur), d))
        .collect();
    Agent {
        kind: AgentKind::Vehicle,
        length: EGO_LENGTH,
        width: EGO_WIDTH,
        speed,
        poses,
    }
}

/// A mover crossing the ego road. `timed` places it in the ego lane exactly when a
/// constant-speed ego would arrive there.
fn crosser(spec: &ScenarioSpec, road: &RoadMap, v0: f64, timed: bool, rng: &mut ChaCha8Rng) -> Agent {
    let cur = spec.current_step();
    let t_cur = cur as f64 * spec.dt;
    let dir = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    if road.kind == MapKind::Intersection {
        let speed = uniform(rng, spec.agent_speed_range);
        // Right-hand traffic: heading +y uses the lane east of the crossing-road center.
        let lane_x = road.cross_x + dir * 0.5 * LANE_WIDTH;
        let t_meet = if timed && v0 > 0.1 {
            t_cur + (lane_x - 0.5 * EGO_LENGTH) / v0 + rng.random_range(0.0..0.5)
        } else {
            rng.random_range(0.0..spec.steps() as f64 * spec.dt)
        };
        let at = Pose2::new(lane_x, 0.0, dir * FRAC_PI_2);
        return straight_mover(AgentKind::Vehicle, (EGO_LENGTH, EGO_WIDTH), at, t_meet, speed, spec);
    }
    let speed = uniform(rng, spec.crossing_speed_range);
    let (s_meet, t_meet) = if timed {
        let k = rng.random_range(1..=spec.horizon) as f64;
        let t = t_cur + k * spec.dt;
        (v0 * k * spec.dt + rng.random_range(0.5 * EGO_LENGTH..0.5 * EGO_LENGTH + 2.0), t)
    } else {
        (
            rng.random_range(5.0..30.0),
            rng.random_range(0.0..spec.steps() as f64 * spec.dt),
        )
    };
    let base = road.lane_pose(s_meet, 0.0);
    let at = Pose2::new(base.x, base.y, base.heading + dir * FRAC_PI_2);
    straight_mover(AgentKind::Crosser, (1.0, 1.0), at, t_meet, speed, spec)
}

fn conflicts(agent: &Agent, expert: &ExpertTrajectory, others: &[Agent]) -> bool {
    (0..agent.poses.len()).any(|i| {
        let fp = agent.footprint(i);
        fp.overlaps(&expert.footprint(i).inflated(EXPERT_CLEARANCE))
            || others.iter().any(|o| fp.overlaps(&o.footprint(i)))
    })
}

/// Builds a scenario; bit-identical for identical specs.
///
/// Agents that cannot be placed without touching the expert or another agent
/// after a bounded number of attempts are dropped.
pub fn generate_scenario(spec: &ScenarioSpec) -> Result<Scenario> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let road = build_road(spec, &mut rng);
    let expert = build_expert(spec, &road, &mut rng);
    let v0 = expert.speeds[spec.current_step()];
    let mut agents: Vec<Agent> = Vec::with_capacity(spec.agent_count);
    for _ in 0..spec.agent_count {
        let timed = rng.random_bool(spec.crossing_bias);
        let mut placed = None;
        for attempt in 0..PLACEMENT_ATTEMPTS {
            let candidate = if timed && attempt < PLACEMENT_ATTEMPTS / 2 {
                crosser(spec, &road, v0, true, &mut rng)
            } else if road.kind != MapKind::OpenPlain && rng.random_bool(0.5) {
                lane_vehicle(spec, &road, &mut rng)
            } else {
                crosser(spec, &road, v0, false, &mut rng)
            };
            if !conflicts(&candidate, &expert, &agents) {
                placed = Some(candidate);
                break;
            }
        }
        agents.extend(placed);
    }
    let mut scenario = Scenario {
        spec: spec.clone(),
        road,
        agents,
        expert,
        sensor_frames: Vec::new(),
    };
    scenario.sensor_frames = (0..spec.steps()).map(|k| lidar_scan(&scenario, k)).collect();
    Ok(scenario)
}

const MARCH_STEP: f64 = 0.1;

/// First range return of each beam from the ego pose at `step`, in that ego frame.
pub fn lidar_scan(scenario: &Scenario, step: usize) -> Vec<(f64, f64)> {
    let ego = scenario.ego_pose(step);
    let sensor = &scenario.spec.sensor;
    let origin = (ego.x, ego.y);
    let mut points = Vec::new();
    for b in 0..sensor.beams {
        let ang = ego.heading + 2.0 * PI * b as f64 / sensor.beams as f64;
        let dir = (ang.cos(), ang.sin());
        let mut best = scenario
            .agents
            .iter()
            .filter_map(|a| a.footprint(step).ray_hit(origin, dir))
            .fold(f64::INFINITY, f64::min);
        if let Some(t) = boundary_hit(&scenario.road, origin, dir, sensor.range.min(best)) {
            best = best.min(t);
        }
        if best <= sensor.range {
            let world = (origin.0 + best * dir.0, origin.1 + best * dir.1);
            points.push(ego.to_local(world));
        }
    }
    points
}

/// Distance to the first point where the ray leaves the drivable area, if within `max_t`.
fn boundary_hit(road: &RoadMap, o: (f64, f64), d: (f64, f64), max_t: f64) -> Option<f64> {
    if road.kind == MapKind::OpenPlain || !max_t.is_finite() {
        return None;
    }
    let at = |t: f64| road.is_drivable(o.0 + t * d.0, o.1 + t * d.1);
    if !at(0.0) {
        return Some(0.0);
    }
    let n = (max_t / MARCH_STEP).ceil() as usize;
    let mut prev = 0.0;
    for i in 1..=n {
        let t = (i as f64 * MARCH_STEP).min(max_t);
        if !at(t) {
            let (mut lo, mut hi) = (prev, t);
            for _ in 0..60 {
                let mid = 0.5 * (lo + hi);
                if at(mid) {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            return Some(hi);
        }
        prev = t;
    }
    None
}

/// Grids and trajectories for one scenario, all in the ego frame of the current step.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingExample {
    pub seed: u64,
    /// Ego speed at the current step, m/s.
    pub ego_speed: f64,
    pub observed: Vec<OccupancyGrid<f32>>,
    pub targets: Vec<OccupancyGrid<f32>>,
    pub semantic: SemanticMap,
    pub visibility: Vec<VisibilityMask>,
    /// s*: τ + T positions; entry τ − 1 is the origin.
    pub expert: Vec<(f64, f64)>,
    /// Agent-only occupancy for the T predicted steps, used for collision checks.
    pub future: Vec<OccupancyGrid<f32>>,
}

impl TrainingExample {
    /// The T future expert positions (steps τ .. τ+T−1).
    pub fn expert_future(&self, tau: usize) -> &[(f64, f64)] {
        &self.expert[tau..]
    }
}

fn agent_cells(scenario: &Scenario, step: usize, frame: &Pose2, cfg: &GridConfig) -> OccupancyGrid<f32> {
    let mut g = OccupancyGrid::for_config(cfg);
    for a in &scenario.agents {
        for (r, c) in a.footprint(step).in_frame(frame).covered_cells(cfg).0 {
            g.set(r, c, 1.0);
        }
    }
    g
}

/// Cells crossed by the drivable-area boundary (corners of mixed drivability).
fn boundary_cells(road: &RoadMap, frame: &Pose2, cfg: &GridConfig) -> Vec<(usize, usize)> {
    if road.kind == MapKind::OpenPlain {
        return Vec::new();
    }
    let (h, w) = (cfg.height, cfg.width);
    let (ox, oy) = cfg.origin_offset;
    let corner: Vec<bool> = (0..=h)
        .flat_map(|r| (0..=w).map(move |c| (r, c)))
        .map(|(r, c)| {
            let p = frame.to_world((c as f64 * cfg.cell_size - ox, r as f64 * cfg.cell_size - oy));
            road.is_drivable(p.0, p.1)
        })
        .collect();
    let mut cells = Vec::new();
    for r in 0..h {
        for c in 0..w {
            let k = [corner[r * (w + 1) + c], corner[r * (w + 1) + c + 1], corner[(r + 1) * (w + 1) + c], corner[(r + 1) * (w + 1) + c + 1]];
            if k.iter().any(|v| *v) && k.iter().any(|v| !*v) {
                cells.push((r, c));
            }
        }
    }
    cells
}

fn semantic_map(road: &RoadMap, frame: &Pose2, cfg: &GridConfig, channels: usize) -> Result<SemanticMap> {
    let mut m = SemanticMap::new(channels, cfg.height, cfg.width)?;
    let n = cfg.cells();
    for r in 0..cfg.height {
        for c in 0..cfg.width {
            let p = frame.to_world(cfg.cell_center(r, c));
            let i = r * cfg.width + c;
            m.data[i] = road.is_drivable(p.0, p.1) as u8;
            if channels > SemanticMap::INTERSECTION {
                m.data[SemanticMap::INTERSECTION * n + i] = road.in_intersection(p.0, p.1) as u8;
            }
            if channels > SemanticMap::LANE_CENTER {
                m.data[SemanticMap::LANE_CENTER * n + i] = road.near_lane_center(p.0, p.1) as u8;
            }
        }
    }
    Ok(m)
}

/// Turns a scenario into network inputs and supervision.
///
/// Observations are the rasterized sensor frames re-projected into the current
/// ego frame. Targets mark agent footprints (cell centers inside the true
/// rectangle) plus the cells crossed by the road boundary.
pub fn make_training_example(scenario: &Scenario, cfg: &GridConfig, map_channels: usize) -> Result<TrainingExample> {
    cfg.validate()?;
    let spec = &scenario.spec;
    if spec.tau != cfg.tau || spec.horizon != cfg.horizon || (spec.dt - cfg.dt).abs() > 1e-12 {
        return input_err("scenario timing does not match grid config");
    }
    if scenario.steps() < cfg.tau + 2 * cfg.horizon {
        return input_err(format!("scenario has {} steps, need {}", scenario.steps(), cfg.tau + 2 * cfg.horizon));
    }
    let cur_pose = scenario.current_pose();
    let observed = (0..cfg.tau)
        .map(|k| {
            let g: OccupancyGrid<f32> = rasterize_points(&scenario.sensor_frames[k], cfg);
            transform_grid(&g, &scenario.ego_pose(k), &cur_pose, cfg)
        })
        .collect();
    let static_cells = boundary_cells(&scenario.road, &cur_pose, cfg);
    let mut targets = Vec::with_capacity(cfg.horizon);
    let mut future = Vec::with_capacity(cfg.horizon);
    let mut visibility = Vec::with_capacity(cfg.horizon);
    let origin = cfg.origin_cell().ok_or_else(|| crate::error::CoreError::Input("ego outside grid".into()))?;
    for k in cfg.tau..cfg.tau + cfg.horizon {
        let agents = agent_cells(scenario, k, &cur_pose, cfg);
        let mut target = agents.clone();
        for &(r, c) in &static_cells {
            target.set(r, c, 1.0);
        }
        let ego = cur_pose.to_local((scenario.ego_pose(k).x, scenario.ego_pose(k).y));
        let sensor_cell = cfg.cell_of(ego.0, ego.1).unwrap_or(origin);
        visibility.push(compute_visibility(&target, sensor_cell, 0.5, VisibilityMethod::Traversal)?);
        targets.push(target);
        future.push(agents);
    }
    let expert = scenario
        .expert
        .positions()
        .into_iter()
        .map(|p| cur_pose.to_local(p))
        .collect();
    Ok(TrainingExample {
        seed: spec.seed,
        ego_speed: scenario.current_speed(),
        observed,
        targets,
        semantic: semantic_map(&scenario.road, &cur_pose, cfg, map_channels)?,
        visibility,
        expert,
        future,
    })
}

/// Draws a varied scenario spec for dataset generation.
pub fn random_spec(seed: u64, grid: &GridConfig, crossing_bias: f64) -> ScenarioSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5eed_5eed_5eed);
    let map_kind = match rng.random_range(0..10) {
        0..=3 => MapKind::StraightRoad,
        4..=6 => MapKind::CurvedRoad,
        _ => MapKind::Intersection,
    };
    let modes: &[ExpertMode] = match map_kind {
        MapKind::Intersection => &ExpertMode::ALL,
        _ => &ExpertMode::ALL[..5],
    };
    let mode = modes[rng.random_range(0..modes.len())];
    let mut spec = ScenarioSpec::new(seed, map_kind, mode, grid);
    spec.lane_count = rng.random_range(2..=3);
    spec.agent_count = rng.random_range(2..=6);
    spec.crossing_bias = crossing_bias;
    spec
}
