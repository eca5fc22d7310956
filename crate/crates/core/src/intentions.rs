//! Driving-mode extraction: Hausdorff distance, density clustering of expert
//! trajectories and multi-label mode assignment.

use serde::{Deserialize, Serialize};

use crate::error::{input_err, CoreError, Result};

pub type Trajectory = Vec<(f64, f64)>;

/// Symmetric discrete Hausdorff distance.
pub fn hausdorff(a: &[(f64, f64)], b: &[(f64, f64)]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return input_err("hausdorff of an empty trajectory");
    }
    Ok(directed(a, b).max(directed(b, a)))
}

fn directed(a: &[(f64, f64)], b: &[(f64, f64)]) -> f64 {
    a.iter()
        .map(|p| {
            b.iter()
                .map(|q| (p.0 - q.0).hypot(p.1 - q.1))
                .fold(f64::INFINITY, f64::min)
        })
        .fold(0.0, f64::max)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightMode {
    /// ω_k = d_k / Σ d_j
    Distance,
    /// ω_k = (1/d_k) / Σ (1/d_j)
    InverseDistance,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntentionSet {
    pub means: Vec<Trajectory>,
    pub member_counts: Vec<usize>,
    pub eps: f64,
    pub min_pts: usize,
    /// Membership radius ε_m used for multi-label assignment.
    pub membership_eps: f64,
}

impl IntentionSet {
    pub fn len(&self) -> usize {
        self.means.len()
    }

    pub fn is_empty(&self) -> bool {
        self.means.is_empty()
    }

    pub fn horizon(&self) -> usize {
        self.means.first().map_or(0, |m| m.len())
    }

    /// Index of the mean closest to `traj`.
    pub fn nearest(&self, traj: &[(f64, f64)]) -> Result<usize> {
        let d = self.distances(traj)?;
        Ok(argmin(&d))
    }

    pub fn distances(&self, traj: &[(f64, f64)]) -> Result<Vec<f64>> {
        if self.is_empty() {
            return input_err("empty intention set");
        }
        self.means.iter().map(|m| hausdorff(traj, m)).collect()
    }
}

fn argmin(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::INFINITY), |(bi, bv), (i, &x)| if x < bv { (i, x) } else { (bi, bv) })
        .0
}

const NOISE: usize = usize::MAX;

/// Density-based clustering under the Hausdorff metric.
///
/// Clusters are returned ordered by the end point of their mean (x, then y),
/// so the result does not depend on input order for well-separated data.
pub fn cluster_trajectories(trajs: &[Trajectory], eps: f64, min_pts: usize) -> Result<IntentionSet> {
    if !(eps > 0.0) || min_pts == 0 {
        return input_err("eps must be positive and min_pts at least 1");
    }
    let Some(t) = trajs.first().map(|x| x.len()) else {
        return input_err("no trajectories to cluster");
    };
    if t == 0 || trajs.iter().any(|x| x.len() != t) {
        return input_err("trajectories must share a non-zero length");
    }
    let n = trajs.len();
    let mut dist = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let d = hausdorff(&trajs[i], &trajs[j])?;
            dist[i * n + j] = d;
            dist[j * n + i] = d;
        }
    }
    let dist = &dist;
    let neighbors = move |i: usize| (0..n).filter(move |&j| dist[i * n + j] <= eps);
    let core: Vec<bool> = (0..n).map(|i| neighbors(i).count() >= min_pts).collect();
    let mut label = vec![NOISE; n];
    let mut clusters = 0;
    for start in 0..n {
        if label[start] != NOISE || !core[start] {
            continue;
        }
        label[start] = clusters;
        let mut stack = vec![start];
        while let Some(i) = stack.pop() {
            for j in neighbors(i) {
                if label[j] == NOISE {
                    label[j] = clusters;
                    if core[j] {
                        stack.push(j);
                    }
                }
            }
        }
        clusters += 1;
    }
    if clusters == 0 {
        return Err(CoreError::Config(format!(
            "no clusters with eps={eps} min_pts={min_pts} over {n} trajectories"
        )));
    }
    let mut groups: Vec<(Trajectory, usize)> = (0..clusters)
        .map(|c| {
            let members: Vec<&Trajectory> = (0..n).filter(|&i| label[i] == c).map(|i| &trajs[i]).collect();
            let m = members.len() as f64;
            let mean = (0..t)
                .map(|k| {
                    let (sx, sy) = members.iter().fold((0.0, 0.0), |acc, tr| (acc.0 + tr[k].0, acc.1 + tr[k].1));
                    (sx / m, sy / m)
                })
                .collect();
            (mean, members.len())
        })
        .collect();
    groups.sort_by(|a, b| {
        let (ea, eb) = (a.0[t - 1], b.0[t - 1]);
        ea.0.total_cmp(&eb.0).then(ea.1.total_cmp(&eb.1))
    });
    let (means, member_counts) = groups.into_iter().unzip();
    Ok(IntentionSet {
        means,
        member_counts,
        eps,
        min_pts,
        membership_eps: eps,
    })
}

/// Multi-label intention targets and mode weights for one expert trajectory.
pub fn assign_labels(traj: &[(f64, f64)], set: &IntentionSet, mode: WeightMode) -> Result<(Vec<f64>, Vec<f64>)> {
    let d = set.distances(traj)?;
    let mut labels: Vec<f64> = d.iter().map(|&x| (x <= set.membership_eps) as u8 as f64).collect();
    if labels.iter().all(|l| *l == 0.0) {
        labels[argmin(&d)] = 1.0;
    }
    let weights = match mode {
        WeightMode::Distance => {
            let total: f64 = d.iter().sum();
            if total <= 0.0 {
                vec![1.0 / d.len() as f64; d.len()]
            } else {
                d.iter().map(|x| x / total).collect()
            }
        }
        WeightMode::InverseDistance => {
            if let Some(hit) = d.iter().position(|x| *x < 1e-9) {
                (0..d.len()).map(|i| (i == hit) as u8 as f64).collect()
            } else {
                let inv: Vec<f64> = d.iter().map(|x| 1.0 / x).collect();
                let total: f64 = inv.iter().sum();
                inv.iter().map(|x| x / total).collect()
            }
        }
    };
    Ok((labels, weights))
}
