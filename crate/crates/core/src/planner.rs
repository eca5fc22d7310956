//! Sampling planner: straight/arc/clothoid paths × constant-acceleration speed
//! profiles, scored by integrating a space-time cost stack over each footprint.

use std::cmp::Ordering;

use diffnet::Scalar;
use serde::{Deserialize, Serialize};

use crate::error::{input_err, Result};
use crate::geometry::{Rect, EGO_LENGTH, EGO_WIDTH};
use crate::grid::{CostMapStack, GridConfig, OccupancyGrid, Pose2};
use crate::intentions::IntentionSet;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ShapeKind {
    Straight,
    Arc,
    Clothoid,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PathShape {
    pub kind: ShapeKind,
    pub kappa0: f64,
    pub kappa_rate: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VelocityProfile {
    pub v0: f64,
    pub accel: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CandidateSource {
    Sampler,
    Imitation,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Candidate {
    pub shape: PathShape,
    pub profile: VelocityProfile,
    /// Poses at `dt, 2·dt, …, T·dt` in the ego frame.
    pub poses: Vec<Pose2>,
    pub cells: Vec<Vec<(usize, usize)>>,
    pub off_grid: Vec<bool>,
    pub cost: f64,
    pub source: CandidateSource,
}

impl Candidate {
    pub fn positions(&self) -> Vec<(f64, f64)> {
        self.poses.iter().map(|p| (p.x, p.y)).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlannerConfig {
    pub curvatures: Vec<f64>,
    pub curvature_rates: Vec<f64>,
    pub accelerations: Vec<f64>,
    pub speed_limit: f64,
    pub kappa_max: f64,
    pub footprint: (f64, f64),
    pub off_grid_penalty: f64,
    /// Upper bound on the quadrature step along the path, meters.
    pub quad_step: f64,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        PlannerConfig {
            curvatures: vec![-0.1, -0.04, -0.015, 0.0, 0.015, 0.04, 0.1],
            curvature_rates: vec![-0.01, -0.004, 0.0, 0.004, 0.01],
            accelerations: (-5..=5).map(|a| a as f64).collect(),
            speed_limit: 12.0,
            kappa_max: 0.2,
            footprint: (EGO_LENGTH, EGO_WIDTH),
            off_grid_penalty: 1.0,
            quad_step: 0.05,
        }
    }
}

impl PlannerConfig {
    /// Distinct path shapes: one straight line, arcs for each non-zero κ₀, and
    /// clothoids for each κ₀ with a non-zero rate.
    pub fn shapes(&self) -> Vec<PathShape> {
        let mut out = vec![PathShape {
            kind: ShapeKind::Straight,
            kappa0: 0.0,
            kappa_rate: 0.0,
        }];
        for &k in self.curvatures.iter().filter(|k| **k != 0.0) {
            out.push(PathShape {
                kind: ShapeKind::Arc,
                kappa0: k,
                kappa_rate: 0.0,
            });
        }
        for &k in &self.curvatures {
            for &r in self.curvature_rates.iter().filter(|r| **r != 0.0) {
                out.push(PathShape {
                    kind: ShapeKind::Clothoid,
                    kappa0: k,
                    kappa_rate: r,
                });
            }
        }
        out
    }

    pub fn candidate_count(&self) -> usize {
        self.shapes().len() * self.accelerations.len()
    }

    fn validate(&self) -> Result<()> {
        if self.curvatures.is_empty() || self.curvature_rates.is_empty() || self.accelerations.is_empty() {
            return input_err("planner sampling grids must be non-empty");
        }
        if self.curvatures.iter().any(|k| k.abs() > self.kappa_max) {
            return input_err(format!("curvature grid exceeds κ_max = {}", self.kappa_max));
        }
        if self.accelerations.iter().any(|a| !(-5.0..=5.0).contains(a)) {
            return input_err("accelerations must lie in [-5, 5] m/s²");
        }
        if !(self.quad_step > 0.0) {
            return input_err("quadrature step must be positive");
        }
        Ok(())
    }
}

/// Arc length travelled by time `t` with `v = clamp(v0 + a·t, 0, vmax)`.
pub fn arc_length(v0: f64, a: f64, vmax: f64, t: f64) -> f64 {
    let v0 = v0.clamp(0.0, vmax);
    if a > 0.0 {
        let tc = (vmax - v0) / a;
        if t <= tc {
            v0 * t + 0.5 * a * t * t
        } else {
            v0 * tc + 0.5 * a * tc * tc + vmax * (t - tc)
        }
    } else if a < 0.0 {
        let ts = v0 / -a;
        if t <= ts {
            v0 * t + 0.5 * a * t * t
        } else {
            0.5 * v0 * ts
        }
    } else {
        v0 * t
    }
}

/// Integrates the path from `start` with Simpson's rule, returning poses at the
/// requested (non-decreasing) arc lengths.
pub fn integrate_path(start: &Pose2, shape: &PathShape, stations: &[f64], max_step: f64) -> Vec<Pose2> {
    let theta = |s: f64| start.heading + shape.kappa0 * s + 0.5 * shape.kappa_rate * s * s;
    let mut out = Vec::with_capacity(stations.len());
    let (mut x, mut y, mut s0) = (start.x, start.y, 0.0);
    for &s1 in stations {
        let len = s1 - s0;
        if len > 0.0 {
            let mut n = (len / max_step).ceil() as usize;
            n += n % 2;
            let h = len / n as f64;
            let (mut sx, mut sy) = (0.0, 0.0);
            for i in 0..=n {
                let wgt = if i == 0 || i == n { 1.0 } else if i % 2 == 1 { 4.0 } else { 2.0 };
                let th = theta(s0 + i as f64 * h);
                sx += wgt * th.cos();
                sy += wgt * th.sin();
            }
            x += sx * h / 3.0;
            y += sy * h / 3.0;
            s0 = s1;
        }
        out.push(Pose2::new(x, y, theta(s0)));
    }
    out
}

/// One candidate per (shape, acceleration) pair, in the ego frame.
pub fn sample_candidates(v0: f64, cfg: &PlannerConfig, grid: &GridConfig) -> Result<Vec<Candidate>> {
    cfg.validate()?;
    let start = Pose2::identity();
    let mut out = Vec::with_capacity(cfg.candidate_count());
    for shape in cfg.shapes() {
        for &a in &cfg.accelerations {
            let stations: Vec<f64> = (1..=grid.horizon)
                .map(|k| arc_length(v0, a, cfg.speed_limit, k as f64 * grid.dt))
                .collect();
            let poses = integrate_path(&start, &shape, &stations, cfg.quad_step);
            out.push(make_candidate(shape, VelocityProfile { v0, accel: a }, poses, CandidateSource::Sampler, cfg, grid));
        }
    }
    Ok(out)
}

pub fn make_candidate(
    shape: PathShape,
    profile: VelocityProfile,
    poses: Vec<Pose2>,
    source: CandidateSource,
    cfg: &PlannerConfig,
    grid: &GridConfig,
) -> Candidate {
    let (cells, off_grid) = rasterize_candidate(&poses, cfg.footprint, grid);
    Candidate {
        shape,
        profile,
        poses,
        cells,
        off_grid,
        cost: 0.0,
        source,
    }
}

/// Per-step footprint cells: centers inside the rectangle inflated by half a
/// cell diagonal. A step is off-grid when that inflated rectangle leaves the grid.
pub fn rasterize_candidate(
    poses: &[Pose2],
    footprint: (f64, f64),
    grid: &GridConfig,
) -> (Vec<Vec<(usize, usize)>>, Vec<bool>) {
    let margin = 0.5 * grid.cell_size * std::f64::consts::SQRT_2;
    poses
        .iter()
        .map(|p| Rect::at_pose(p, footprint.0, footprint.1).inflated(margin).covered_cells(grid))
        .unzip()
}

/// Σ_k mean cost over step-k footprint cells, plus `penalty` for each off-grid step.
pub fn cost_of<S: Scalar>(c: &Candidate, cm: &CostMapStack<S>, penalty: f64) -> f64 {
    let mut total = 0.0;
    for (k, cells) in c.cells.iter().enumerate() {
        if !cells.is_empty() {
            let s: f64 = cells.iter().map(|&(r, col)| cm.get(k, r, col).as_f64()).sum();
            total += s / cells.len() as f64;
        }
        if c.off_grid[k] {
            total += penalty;
        }
    }
    total
}

pub fn score_all<S: Scalar>(cands: &mut [Candidate], cm: &CostMapStack<S>, penalty: f64) -> Result<()> {
    for c in cands.iter() {
        if c.cells.len() != cm.steps() {
            return input_err(format!("candidate has {} steps, cost stack {}", c.cells.len(), cm.steps()));
        }
    }
    for c in cands.iter_mut() {
        c.cost = cost_of(c, cm, penalty);
    }
    Ok(())
}

/// Ascending cost; ties prefer smaller |a|, then smaller |κ₀|, then smaller |κ̇|.
pub fn compare_candidates(a: &Candidate, b: &Candidate) -> Ordering {
    a.cost
        .total_cmp(&b.cost)
        .then(a.profile.accel.abs().total_cmp(&b.profile.accel.abs()))
        .then(a.shape.kappa0.abs().total_cmp(&b.shape.kappa0.abs()))
        .then(a.shape.kappa_rate.abs().total_cmp(&b.shape.kappa_rate.abs()))
}

/// Indices of `cands` in rank order (stable for full ties).
pub fn rank(cands: &[Candidate]) -> Result<Vec<usize>> {
    if cands.is_empty() {
        return input_err("no candidates to rank");
    }
    let mut idx: Vec<usize> = (0..cands.len()).collect();
    idx.sort_by(|&i, &j| compare_candidates(&cands[i], &cands[j]));
    Ok(idx)
}

pub fn top_k(cands: &[Candidate], k: usize) -> Result<Vec<usize>> {
    let mut r = rank(cands)?;
    r.truncate(k);
    Ok(r)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClusterSelection {
    /// Best candidate of each chosen cluster, cheapest cluster first.
    pub picks: Vec<usize>,
    pub clusters: Vec<usize>,
    /// Fewer than `k` clusters had a candidate.
    pub shortfall: bool,
}

/// Cheapest candidate from each of the `k` best distinct intention clusters.
pub fn top_k_per_cluster(cands: &[Candidate], k: usize, intentions: &IntentionSet) -> Result<ClusterSelection> {
    let order = rank(cands)?;
    let mut picks = Vec::new();
    let mut clusters = Vec::new();
    for i in order {
        let cl = intentions.nearest(&cands[i].positions())?;
        if !clusters.contains(&cl) {
            clusters.push(cl);
            picks.push(i);
            if picks.len() == k {
                break;
            }
        }
    }
    Ok(ClusterSelection {
        shortfall: picks.len() < k,
        picks,
        clusters,
    })
}

/// Cluster of each candidate (nearest intention mean by Hausdorff distance).
pub fn cluster_of(c: &Candidate, intentions: &IntentionSet) -> Result<usize> {
    intentions.nearest(&c.positions())
}

/// Static baseline: cost 1 on non-drivable or currently occupied cells, repeated for `t` steps.
pub fn rule_cost_map<S: Scalar>(current: &OccupancyGrid<S>, drivable: &[u8], t: usize) -> Result<CostMapStack<S>> {
    let n = current.height() * current.width();
    if drivable.len() != n {
        return input_err("drivable mask does not match the occupancy grid");
    }
    let plane: Vec<S> = current
        .values()
        .iter()
        .zip(drivable)
        .map(|(&o, &d)| if d == 0 || o >= S::lit(0.5) { S::one() } else { S::zero() })
        .collect();
    CostMapStack::from_vec(t, current.height(), current.width(), plane.repeat(t))
}
