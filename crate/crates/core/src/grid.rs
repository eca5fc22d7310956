//! Grid types, point rasterization, rigid re-projection and visibility.
//!
//! Cell `(row, col)` covers `x ∈ [col·cs − ox, (col+1)·cs − ox)` and
//! `y ∈ [row·cs − oy, (row+1)·cs − oy)` in the reference frame, where
//! `(ox, oy)` is [`GridConfig::origin_offset`]. `x` points forward, `y` left.

use std::f64::consts::PI;

use diffnet::{Scalar, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{input_err, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridConfig {
    pub height: usize,
    pub width: usize,
    pub cell_size: f64,
    pub origin_offset: (f64, f64),
    pub tau: usize,
    pub horizon: usize,
    pub dt: f64,
}

impl Default for GridConfig {
    /// 64×64 cells of 0.5 m with the ego at cell (32, 12): 25.75 m of view ahead, 6.25 m behind.
    fn default() -> Self {
        GridConfig {
            height: 64,
            width: 64,
            cell_size: 0.5,
            origin_offset: (6.25, 16.25),
            tau: 4,
            horizon: 10,
            dt: 0.2,
        }
    }
}

impl GridConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height < 8 || self.width < 8 {
            return input_err(format!("grid must be at least 8×8, got {}×{}", self.height, self.width));
        }
        if !(self.cell_size > 0.0) || !(self.dt > 0.0) {
            return input_err("cell_size and dt must be positive");
        }
        if self.tau == 0 || self.horizon == 0 {
            return input_err("tau and horizon must be at least 1");
        }
        Ok(())
    }

    pub fn cells(&self) -> usize {
        self.height * self.width
    }

    /// Cell containing a reference-frame point, `None` outside the extent.
    pub fn cell_of(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let c = ((x + self.origin_offset.0) / self.cell_size).floor();
        let r = ((y + self.origin_offset.1) / self.cell_size).floor();
        if c >= 0.0 && r >= 0.0 && (c as usize) < self.width && (r as usize) < self.height {
            Some((r as usize, c as usize))
        } else {
            None
        }
    }

    pub fn cell_center(&self, row: usize, col: usize) -> (f64, f64) {
        (
            (col as f64 + 0.5) * self.cell_size - self.origin_offset.0,
            (row as f64 + 0.5) * self.cell_size - self.origin_offset.1,
        )
    }

    /// Cell holding the reference-frame origin, i.e. the ego position.
    pub fn origin_cell(&self) -> Option<(usize, usize)> {
        self.cell_of(0.0, 0.0)
    }

    /// Reference-frame bounds `(x_min, x_max, y_min, y_max)`.
    pub fn extent(&self) -> (f64, f64, f64, f64) {
        let (ox, oy) = self.origin_offset;
        (
            -ox,
            self.width as f64 * self.cell_size - ox,
            -oy,
            self.height as f64 * self.cell_size - oy,
        )
    }
}

/// Planar pose; heading is kept in (−π, π].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose2 {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
}

pub fn normalize_angle(a: f64) -> f64 {
    let mut a = a % (2.0 * PI);
    if a <= -PI {
        a += 2.0 * PI;
    } else if a > PI {
        a -= 2.0 * PI;
    }
    a
}

impl Pose2 {
    pub fn new(x: f64, y: f64, heading: f64) -> Self {
        Pose2 {
            x,
            y,
            heading: normalize_angle(heading),
        }
    }

    pub fn identity() -> Self {
        Pose2::new(0.0, 0.0, 0.0)
    }

    /// Maps a point from this pose's local frame into the world frame.
    pub fn to_world(&self, p: (f64, f64)) -> (f64, f64) {
        let (s, c) = self.heading.sin_cos();
        (self.x + c * p.0 - s * p.1, self.y + s * p.0 + c * p.1)
    }

    /// Maps a world point into this pose's local frame.
    pub fn to_local(&self, p: (f64, f64)) -> (f64, f64) {
        let (s, c) = self.heading.sin_cos();
        let (dx, dy) = (p.0 - self.x, p.1 - self.y);
        (c * dx + s * dy, -s * dx + c * dy)
    }

    /// Expresses `other` (world) relative to `self`.
    pub fn relative(&self, other: &Pose2) -> Pose2 {
        let (x, y) = self.to_local((other.x, other.y));
        Pose2::new(x, y, other.heading - self.heading)
    }
}

/// Per-cell probabilities over an H×W grid.
#[derive(Clone, Debug, PartialEq)]
pub struct OccupancyGrid<S> {
    height: usize,
    width: usize,
    values: Vec<S>,
}

impl<S: Scalar> OccupancyGrid<S> {
    pub fn zeros(height: usize, width: usize) -> Self {
        OccupancyGrid {
            height,
            width,
            values: vec![S::zero(); height * width],
        }
    }

    pub fn for_config(cfg: &GridConfig) -> Self {
        Self::zeros(cfg.height, cfg.width)
    }

    pub fn from_vec(height: usize, width: usize, values: Vec<S>) -> Result<Self> {
        if values.len() != height * width {
            return input_err(format!("{}×{} grid needs {} values, got {}", height, width, height * width, values.len()));
        }
        if let Some(v) = values.iter().find(|v| !(**v >= S::zero() && **v <= S::one())) {
            return input_err(format!("grid value {v} outside [0, 1]"));
        }
        Ok(OccupancyGrid { height, width, values })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[S] {
        &self.values
    }

    pub fn get(&self, row: usize, col: usize) -> S {
        self.values[row * self.width + col]
    }

    /// Panics when `v` is outside [0, 1].
    pub fn set(&mut self, row: usize, col: usize, v: S) {
        assert!(v >= S::zero() && v <= S::one(), "grid value {v} outside [0, 1]");
        self.values[row * self.width + col] = v;
    }

    pub fn count_at_least(&self, threshold: S) -> usize {
        self.values.iter().filter(|v| **v >= threshold).count()
    }

    pub fn cast<T: Scalar>(&self) -> OccupancyGrid<T> {
        OccupancyGrid {
            height: self.height,
            width: self.width,
            values: self.values.iter().map(|v| T::lit(v.as_f64())).collect(),
        }
    }

    /// `(1, 1, H, W)` tensor view.
    pub fn to_tensor(&self) -> Tensor<S> {
        Tensor::from_vec(&[1, 1, self.height, self.width], self.values.clone()).expect("grid shape")
    }
}

/// T cost maps stacked along the first axis.
#[derive(Clone, Debug, PartialEq)]
pub struct CostMapStack<S> {
    steps: usize,
    height: usize,
    width: usize,
    values: Vec<S>,
}

impl<S: Scalar> CostMapStack<S> {
    pub fn zeros(steps: usize, height: usize, width: usize) -> Self {
        CostMapStack {
            steps,
            height,
            width,
            values: vec![S::zero(); steps * height * width],
        }
    }

    pub fn from_vec(steps: usize, height: usize, width: usize, values: Vec<S>) -> Result<Self> {
        if values.len() != steps * height * width {
            return input_err(format!("{steps}×{height}×{width} stack got {} values", values.len()));
        }
        if let Some(v) = values.iter().find(|v| !(**v >= S::zero() && **v <= S::one())) {
            return input_err(format!("cost value {v} outside [0, 1]"));
        }
        Ok(CostMapStack { steps, height, width, values })
    }

    pub fn from_grids(grids: &[OccupancyGrid<S>]) -> Result<Self> {
        let Some(first) = grids.first() else {
            return input_err("cost stack needs at least one step");
        };
        let (h, w) = (first.height, first.width);
        if grids.iter().any(|g| g.height != h || g.width != w) {
            return input_err("cost stack steps differ in size");
        }
        Ok(CostMapStack {
            steps: grids.len(),
            height: h,
            width: w,
            values: grids.iter().flat_map(|g| g.values.iter().copied()).collect(),
        })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[S] {
        &self.values
    }

    pub fn step(&self, k: usize) -> &[S] {
        let n = self.height * self.width;
        &self.values[k * n..(k + 1) * n]
    }

    pub fn get(&self, k: usize, row: usize, col: usize) -> S {
        self.values[(k * self.height + row) * self.width + col]
    }

    pub fn set(&mut self, k: usize, row: usize, col: usize, v: S) {
        assert!(v >= S::zero() && v <= S::one(), "cost value {v} outside [0, 1]");
        self.values[(k * self.height + row) * self.width + col] = v;
    }

    pub fn grid(&self, k: usize) -> OccupancyGrid<S> {
        OccupancyGrid {
            height: self.height,
            width: self.width,
            values: self.step(k).to_vec(),
        }
    }

    /// Applies `f` to every value, clamping the result into [0, 1].
    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        CostMapStack {
            values: self
                .values
                .iter()
                .map(|v| f(*v).max(S::zero()).min(S::one()))
                .collect(),
            ..self.clone()
        }
    }
}

/// Binary observability mask.
#[derive(Clone, Debug, PartialEq)]
pub struct VisibilityMask {
    pub height: usize,
    pub width: usize,
    pub values: Vec<u8>,
}

impl VisibilityMask {
    pub fn all_visible(height: usize, width: usize) -> Self {
        VisibilityMask {
            height,
            width,
            values: vec![1; height * width],
        }
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.values[row * self.width + col]
    }
}

/// Binary semantic rasters; channel 0 is the drivable area.
#[derive(Clone, Debug, PartialEq)]
pub struct SemanticMap {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl SemanticMap {
    pub const DRIVABLE: usize = 0;
    pub const INTERSECTION: usize = 1;
    pub const LANE_CENTER: usize = 2;

    pub fn new(channels: usize, height: usize, width: usize) -> Result<Self> {
        if channels == 0 {
            return input_err("semantic map needs at least the drivable channel");
        }
        Ok(SemanticMap {
            channels,
            height,
            width,
            data: vec![0; channels * height * width],
        })
    }

    pub fn channel(&self, c: usize) -> &[u8] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [u8] {
        let n = self.height * self.width;
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn drivable(&self) -> &[u8] {
        self.channel(Self::DRIVABLE)
    }

    pub fn is_drivable(&self, row: usize, col: usize) -> bool {
        self.drivable()[row * self.width + col] != 0
    }
}

/// Marks every cell that contains at least one point; points outside the extent are dropped.
pub fn rasterize_points<S: Scalar>(points: &[(f64, f64)], cfg: &GridConfig) -> OccupancyGrid<S> {
    let mut g = OccupancyGrid::for_config(cfg);
    for &(x, y) in points {
        if let Some((r, c)) = cfg.cell_of(x, y) {
            g.values[r * cfg.width + c] = S::one();
        }
    }
    g
}

/// Re-expresses a grid recorded at `from_pose` in the frame of `to_pose`.
///
/// Each output cell center is mapped into the source frame and takes the
/// source cell it falls into; cells that land outside the source become 0.
pub fn transform_grid<S: Scalar>(
    grid: &OccupancyGrid<S>,
    from_pose: &Pose2,
    to_pose: &Pose2,
    cfg: &GridConfig,
) -> OccupancyGrid<S> {
    let mut out = OccupancyGrid::zeros(grid.height, grid.width);
    for r in 0..grid.height {
        for c in 0..grid.width {
            let world = to_pose.to_world(cfg.cell_center(r, c));
            let (sx, sy) = from_pose.to_local(world);
            if let Some((sr, sc)) = cfg.cell_of(sx, sy) {
                out.values[r * grid.width + c] = grid.get(sr, sc);
            }
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum VisibilityMethod {
    /// Exact cell traversal of the segment between cell centers.
    Traversal,
    /// Samples the segment every `step` cells; slower, used as a cross-check.
    DenseRay { step: f64 },
}

/// Occlusion mask seen from `sensor_cell`.
///
/// A cell is visible when the center-to-center ray reaches it without passing
/// through an occupied cell (value ≥ `occ_threshold`) first. The sensor's own
/// cell never blocks.
pub fn compute_visibility<S: Scalar>(
    grid: &OccupancyGrid<S>,
    sensor_cell: (usize, usize),
    occ_threshold: S,
    method: VisibilityMethod,
) -> Result<VisibilityMask> {
    let (h, w) = (grid.height, grid.width);
    if sensor_cell.0 >= h || sensor_cell.1 >= w {
        return input_err(format!("sensor cell {sensor_cell:?} outside {h}×{w} grid"));
    }
    let blocked = |r: usize, c: usize| (r, c) != sensor_cell && grid.get(r, c) >= occ_threshold;
    let mut mask = VisibilityMask::all_visible(h, w);
    for r in 0..h {
        for c in 0..w {
            let visible = match method {
                VisibilityMethod::Traversal => !traversal_blocked(sensor_cell, (r, c), &blocked),
                VisibilityMethod::DenseRay { step } => !dense_ray_blocked(sensor_cell, (r, c), step, &blocked),
            };
            mask.values[r * w + c] = visible as u8;
        }
    }
    Ok(mask)
}

/// Walks the cells crossed by the segment between two cell centers, stopping
/// before `to`. A segment passing exactly through a cell corner steps
/// diagonally and touches neither side cell.
fn traversal_blocked(from: (usize, usize), to: (usize, usize), blocked: &impl Fn(usize, usize) -> bool) -> bool {
    let (r0, c0) = (from.0 as i64, from.1 as i64);
    let (r1, c1) = (to.0 as i64, to.1 as i64);
    let (dr, dc) = ((r1 - r0) as f64, (c1 - c0) as f64);
    let step_r = (r1 - r0).signum();
    let step_c = (c1 - c0).signum();
    // Ray parameter t ∈ [0, 1]; starting at a cell center the first boundary is half a cell away.
    let t_delta_r = if dr != 0.0 { 1.0 / dr.abs() } else { f64::INFINITY };
    let t_delta_c = if dc != 0.0 { 1.0 / dc.abs() } else { f64::INFINITY };
    let mut t_max_r = 0.5 * t_delta_r;
    let mut t_max_c = 0.5 * t_delta_c;
    let (mut r, mut c) = (r0, c0);
    loop {
        if r == r1 && c == c1 {
            return false;
        }
        if (r, c) != (r0, c0) && blocked(r as usize, c as usize) {
            return true;
        }
        let diff = t_max_r - t_max_c;
        if diff.abs() < 1e-12 {
            r += step_r;
            c += step_c;
            t_max_r += t_delta_r;
            t_max_c += t_delta_c;
        } else if diff < 0.0 {
            r += step_r;
            t_max_r += t_delta_r;
        } else {
            c += step_c;
            t_max_c += t_delta_c;
        }
    }
}

fn dense_ray_blocked(
    from: (usize, usize),
    to: (usize, usize),
    step: f64,
    blocked: &impl Fn(usize, usize) -> bool,
) -> bool {
    let (fr, fc) = (from.0 as f64 + 0.5, from.1 as f64 + 0.5);
    let (dr, dc) = (to.0 as f64 - from.0 as f64, to.1 as f64 - from.1 as f64);
    let len = (dr * dr + dc * dc).sqrt();
    let n = (len / step).ceil() as usize;
    for i in 1..n {
        let t = i as f64 / n as f64;
        let (r, c) = ((fr + t * dr).floor() as usize, (fc + t * dc).floor() as usize);
        if (r, c) == to {
            return false;
        }
        if blocked(r, c) {
            return true;
        }
    }
    false
}

/// Default η when every cell is occupied.
pub const OCCUPANCY_RATIO_CAP: f64 = 1.0;

/// Occupied-to-free ratio η; 0 with nothing occupied, `cap` with nothing free.
pub fn occupancy_ratio<S: Scalar>(grid: &OccupancyGrid<S>, threshold: S) -> f64 {
    occupancy_ratio_capped(grid, threshold, OCCUPANCY_RATIO_CAP)
}

pub fn occupancy_ratio_capped<S: Scalar>(grid: &OccupancyGrid<S>, threshold: S, cap: f64) -> f64 {
    let occupied = grid.count_at_least(threshold);
    let free = grid.values.len() - occupied;
    match (occupied, free) {
        (0, _) => 0.0,
        (_, 0) => cap,
        _ => occupied as f64 / free as f64,
    }
}
