//! Planning and prediction scores: minADE, collision rate, road violation and
//! occupancy-prediction TP/TN/SSIM.

use diffnet::Scalar;
use serde::{Deserialize, Serialize};

use crate::error::{input_err, Result};
use crate::geometry::poses_from_positions;
use crate::grid::{CostMapStack, GridConfig, OccupancyGrid, Pose2};
use crate::intentions::IntentionSet;
use crate::losses::ssim;
use crate::planner::{
    make_candidate, rank, rasterize_candidate, sample_candidates, score_all, top_k_per_cluster, Candidate,
    CandidateSource, PathShape, PlannerConfig, ShapeKind, VelocityProfile,
};
use crate::synth::TrainingExample;

/// Minimum over candidates of the mean pointwise distance to `expert`.
pub fn min_ade(cands: &[Vec<(f64, f64)>], expert: &[(f64, f64)]) -> Result<f64> {
    if cands.is_empty() {
        return input_err("min_ade needs at least one candidate");
    }
    let mut best = f64::INFINITY;
    for c in cands {
        if c.len() != expert.len() {
            return input_err(format!("candidate length {} vs expert {}", c.len(), expert.len()));
        }
        let ade = c
            .iter()
            .zip(expert)
            .map(|(a, b)| (a.0 - b.0).hypot(a.1 - b.1))
            .sum::<f64>()
            / expert.len() as f64;
        best = best.min(ade);
    }
    Ok(best)
}

/// True when the footprint at some step covers a cell occupied in that step's frame.
pub fn collides<S: Scalar>(
    poses: &[Pose2],
    future: &[OccupancyGrid<S>],
    footprint: (f64, f64),
    cfg: &GridConfig,
) -> Result<bool> {
    if future.len() < poses.len() {
        return input_err(format!("{} future frames for {} steps", future.len(), poses.len()));
    }
    let (cells, _) = rasterize_candidate(poses, footprint, cfg);
    Ok(cells
        .iter()
        .zip(future)
        .any(|(cs, g)| cs.iter().any(|&(r, c)| g.get(r, c) >= S::lit(0.5))))
}

/// True when the footprint at some step covers a non-drivable cell.
pub fn violates_road(poses: &[Pose2], drivable: &[u8], footprint: (f64, f64), cfg: &GridConfig) -> Result<bool> {
    if drivable.len() != cfg.cells() {
        return input_err("drivable mask does not match the grid");
    }
    let (cells, _) = rasterize_candidate(poses, footprint, cfg);
    Ok(cells.iter().flatten().any(|&(r, c)| drivable[r * cfg.width + c] == 0))
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct OgmCounts {
    pub occupied: usize,
    pub occupied_hit: usize,
    pub free: usize,
    pub free_hit: usize,
    pub ssim_sum: f64,
    pub frames: usize,
}

impl OgmCounts {
    pub fn merge(&mut self, o: &OgmCounts) {
        self.occupied += o.occupied;
        self.occupied_hit += o.occupied_hit;
        self.free += o.free;
        self.free_hit += o.free_hit;
        self.ssim_sum += o.ssim_sum;
        self.frames += o.frames;
    }

    pub fn scores(&self) -> OgmScores {
        let pct = |a: usize, b: usize| (b > 0).then(|| 100.0 * a as f64 / b as f64);
        OgmScores {
            tp: pct(self.occupied_hit, self.occupied),
            tn: pct(self.free_hit, self.free),
            s100: (self.frames > 0).then(|| 100.0 * self.ssim_sum / self.frames as f64),
        }
    }
}

/// Percentages; TP is absent when no target cell is occupied.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OgmScores {
    pub tp: Option<f64>,
    pub tn: Option<f64>,
    pub s100: Option<f64>,
}

pub fn ogm_counts<S: Scalar>(pred: &[OccupancyGrid<S>], target: &[OccupancyGrid<S>], threshold: S) -> Result<OgmCounts> {
    if pred.len() != target.len() {
        return input_err("prediction and target step counts differ");
    }
    let mut c = OgmCounts::default();
    for (p, t) in pred.iter().zip(target) {
        if p.height() != t.height() || p.width() != t.width() {
            return input_err("prediction and target grids differ in size");
        }
        for (&pv, &tv) in p.values().iter().zip(t.values()) {
            let (po, to) = (pv >= threshold, tv >= S::lit(0.5));
            if to {
                c.occupied += 1;
                c.occupied_hit += po as usize;
            } else {
                c.free += 1;
                c.free_hit += (!po) as usize;
            }
        }
        c.ssim_sum += ssim(p, t)?;
        c.frames += 1;
    }
    Ok(c)
}

pub fn ogm_scores<S: Scalar>(pred: &[OccupancyGrid<S>], target: &[OccupancyGrid<S>], threshold: S) -> Result<OgmScores> {
    Ok(ogm_counts(pred, target, threshold)?.scores())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Selection {
    Top1,
    Top3,
    Top3PerCluster,
}

impl Selection {
    pub fn label(self) -> &'static str {
        match self {
            Selection::Top1 => "1",
            Selection::Top3 => "3",
            Selection::Top3PerCluster => "3c",
        }
    }
}

/// What a cost estimator hands to the planner for one example.
#[derive(Clone, Debug)]
pub struct PlanInputs {
    pub cost: CostMapStack<f32>,
    /// Predicted occupancy for TP/TN/S100, when the estimator produces it.
    pub predicted: Option<Vec<OccupancyGrid<f32>>>,
    /// Extra trajectories (T positions, ego frame) added to the sampled set.
    pub extra: Vec<Vec<(f64, f64)>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalSummary {
    pub examples: usize,
    pub min_ade: f64,
    /// Percent of examples where a selected trajectory collides.
    pub cr: f64,
    /// Percent of examples where a selected trajectory leaves the road.
    pub rv: f64,
    pub ogm: Option<OgmScores>,
}

/// Per-example planning outcome.
#[derive(Clone, Debug, PartialEq)]
pub struct ExampleOutcome {
    pub selected: Vec<Candidate>,
    pub min_ade: f64,
    pub collides: bool,
    pub violates: bool,
}

/// Candidates for one example: the sampled set plus any extra trajectories.
pub fn build_candidates(
    ex: &TrainingExample,
    extra: &[Vec<(f64, f64)>],
    grid: &GridConfig,
    planner: &PlannerConfig,
) -> Result<Vec<Candidate>> {
    let mut cands = sample_candidates(ex.ego_speed, planner, grid)?;
    for traj in extra {
        if traj.len() != grid.horizon {
            return input_err("extra trajectory length differs from the horizon");
        }
        let poses = poses_from_positions((0.0, 0.0), traj);
        let shape = PathShape {
            kind: ShapeKind::Straight,
            kappa0: 0.0,
            kappa_rate: 0.0,
        };
        let profile = VelocityProfile {
            v0: ex.ego_speed,
            accel: 0.0,
        };
        cands.push(make_candidate(shape, profile, poses, CandidateSource::Imitation, planner, grid));
    }
    Ok(cands)
}

pub fn select(cands: &[Candidate], selection: Selection, intentions: Option<&IntentionSet>) -> Result<Vec<usize>> {
    match selection {
        Selection::Top1 => Ok(rank(cands)?.into_iter().take(1).collect()),
        Selection::Top3 => Ok(rank(cands)?.into_iter().take(3).collect()),
        Selection::Top3PerCluster => {
            let Some(set) = intentions else {
                return input_err("per-cluster selection needs an intention set");
            };
            Ok(top_k_per_cluster(cands, 3, set)?.picks)
        }
    }
}

pub fn plan_example(
    ex: &TrainingExample,
    inputs: &PlanInputs,
    grid: &GridConfig,
    planner: &PlannerConfig,
    selection: Selection,
    intentions: Option<&IntentionSet>,
) -> Result<ExampleOutcome> {
    let mut cands = build_candidates(ex, &inputs.extra, grid, planner)?;
    score_all(&mut cands, &inputs.cost, planner.off_grid_penalty)?;
    let picks = select(&cands, selection, intentions)?;
    let selected: Vec<Candidate> = picks.iter().map(|&i| cands[i].clone()).collect();
    let trajs: Vec<Vec<(f64, f64)>> = selected.iter().map(|c| c.positions()).collect();
    let expert = ex.expert_future(grid.tau);
    let mut collides_any = false;
    let mut violates_any = false;
    for c in &selected {
        collides_any |= collides(&c.poses, &ex.future, planner.footprint, grid)?;
        violates_any |= violates_road(&c.poses, ex.semantic.drivable(), planner.footprint, grid)?;
    }
    Ok(ExampleOutcome {
        min_ade: min_ade(&trajs, expert)?,
        selected,
        collides: collides_any,
        violates: violates_any,
    })
}

/// Plans every example with the cost stacks produced by `infer` and aggregates the scores.
pub fn evaluate<F>(
    examples: &[TrainingExample],
    grid: &GridConfig,
    planner: &PlannerConfig,
    selection: Selection,
    intentions: Option<&IntentionSet>,
    mut infer: F,
) -> Result<EvalSummary>
where
    F: FnMut(&TrainingExample) -> Result<PlanInputs>,
{
    if examples.is_empty() {
        return input_err("evaluation needs at least one example");
    }
    let (mut ade, mut cr, mut rv) = (0.0, 0usize, 0usize);
    let mut ogm: Option<OgmCounts> = None;
    for ex in examples {
        let inputs = infer(ex)?;
        let out = plan_example(ex, &inputs, grid, planner, selection, intentions)?;
        ade += out.min_ade;
        cr += out.collides as usize;
        rv += out.violates as usize;
        if let Some(pred) = &inputs.predicted {
            let c = ogm_counts(pred, &ex.targets, 0.5)?;
            ogm.get_or_insert_with(OgmCounts::default).merge(&c);
        }
    }
    let n = examples.len() as f64;
    Ok(EvalSummary {
        examples: examples.len(),
        min_ade: ade / n,
        cr: 100.0 * cr as f64 / n,
        rv: 100.0 * rv as f64 / n,
        ogm: ogm.map(|c| c.scores()),
    })
}
