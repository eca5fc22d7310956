//! Oriented rectangles: containment, overlap, ray hits and cell coverage.

use crate::grid::{GridConfig, Pose2};

/// Default ego footprint (length × width, meters).
pub const EGO_LENGTH: f64 = 4.5;
pub const EGO_WIDTH: f64 = 2.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rect {
    pub cx: f64,
    pub cy: f64,
    pub heading: f64,
    /// Extent along the heading.
    pub length: f64,
    pub width: f64,
}

impl Rect {
    pub fn at_pose(pose: &Pose2, length: f64, width: f64) -> Self {
        Rect {
            cx: pose.x,
            cy: pose.y,
            heading: pose.heading,
            length,
            width,
        }
    }

    pub fn inflated(&self, margin: f64) -> Self {
        Rect {
            length: self.length + 2.0 * margin,
            width: self.width + 2.0 * margin,
            ..*self
        }
    }

    /// Same rectangle expressed in the local frame of `frame`.
    pub fn in_frame(&self, frame: &Pose2) -> Self {
        let (x, y) = frame.to_local((self.cx, self.cy));
        Rect {
            cx: x,
            cy: y,
            heading: self.heading - frame.heading,
            ..*self
        }
    }

    fn axes(&self) -> [(f64, f64); 2] {
        let (s, c) = self.heading.sin_cos();
        [(c, s), (-s, c)]
    }

    /// Coordinates of `p` along the length and width axes, relative to the center.
    fn local(&self, p: (f64, f64)) -> (f64, f64) {
        let [u, v] = self.axes();
        let (dx, dy) = (p.0 - self.cx, p.1 - self.cy);
        (dx * u.0 + dy * u.1, dx * v.0 + dy * v.1)
    }

    pub fn contains(&self, p: (f64, f64)) -> bool {
        let (a, b) = self.local(p);
        a.abs() <= 0.5 * self.length && b.abs() <= 0.5 * self.width
    }

    pub fn corners(&self) -> [(f64, f64); 4] {
        let [u, v] = self.axes();
        let (hl, hw) = (0.5 * self.length, 0.5 * self.width);
        let at = |a: f64, b: f64| (self.cx + a * u.0 + b * v.0, self.cy + a * u.1 + b * v.1);
        [at(hl, hw), at(-hl, hw), at(-hl, -hw), at(hl, -hw)]
    }

    /// Separating-axis test; touching edges count as overlap.
    pub fn overlaps(&self, other: &Rect) -> bool {
        let (ca, cb) = (self.corners(), other.corners());
        for axis in self.axes().into_iter().chain(other.axes()) {
            let proj = |cs: &[(f64, f64); 4]| {
                cs.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
                    let d = p.0 * axis.0 + p.1 * axis.1;
                    (lo.min(d), hi.max(d))
                })
            };
            let (a0, a1) = proj(&ca);
            let (b0, b1) = proj(&cb);
            if a1 < b0 || b1 < a0 {
                return false;
            }
        }
        true
    }

    /// Smallest `t ≥ 0` with `origin + t·dir` on the boundary (slab method); `dir` need not be unit.
    pub fn ray_hit(&self, origin: (f64, f64), dir: (f64, f64)) -> Option<f64> {
        let [u, v] = self.axes();
        let (o0, o1) = self.local(origin);
        let (d0, d1) = (dir.0 * u.0 + dir.1 * u.1, dir.0 * v.0 + dir.1 * v.1);
        let mut t_in = f64::NEG_INFINITY;
        let mut t_out = f64::INFINITY;
        for (o, d, half) in [(o0, d0, 0.5 * self.length), (o1, d1, 0.5 * self.width)] {
            if d.abs() < 1e-15 {
                if o.abs() > half {
                    return None;
                }
            } else {
                let (t1, t2) = ((-half - o) / d, (half - o) / d);
                t_in = t_in.max(t1.min(t2));
                t_out = t_out.min(t1.max(t2));
            }
        }
        if t_in > t_out || t_out < 0.0 {
            return None;
        }
        Some(if t_in >= 0.0 { t_in } else { t_out })
    }

    /// Cells whose center lies inside the rectangle, plus whether the rectangle leaves the grid.
    pub fn covered_cells(&self, cfg: &GridConfig) -> (Vec<(usize, usize)>, bool) {
        let cs = self.corners();
        let (x0, x1, y0, y1) = cs.iter().fold(
            (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY),
            |(a, b, c, d), p| (a.min(p.0), b.max(p.0), c.min(p.1), d.max(p.1)),
        );
        let (ex0, ex1, ey0, ey1) = cfg.extent();
        let off_grid = x0 < ex0 || x1 > ex1 || y0 < ey0 || y1 > ey1;
        let (ox, oy) = cfg.origin_offset;
        let span = |lo: f64, hi: f64, off: f64, n: usize| {
            let a = ((lo + off) / cfg.cell_size).floor().clamp(0.0, n as f64) as usize;
            let b = (((hi + off) / cfg.cell_size).floor() + 1.0).clamp(0.0, n as f64) as usize;
            (a, b)
        };
        let (c_lo, c_hi) = span(x0, x1, ox, cfg.width);
        let (r_lo, r_hi) = span(y0, y1, oy, cfg.height);
        let mut cells = Vec::new();
        for r in r_lo..r_hi {
            for c in c_lo..c_hi {
                if self.contains(cfg.cell_center(r, c)) {
                    cells.push((r, c));
                }
            }
        }
        (cells, off_grid)
    }
}

/// Poses along a position sequence, heading from the previous point (`anchor`
/// precedes the first). Stationary steps keep the last heading, starting at 0.
pub fn poses_from_positions(anchor: (f64, f64), positions: &[(f64, f64)]) -> Vec<Pose2> {
    let mut prev = anchor;
    let mut heading = 0.0;
    positions
        .iter()
        .map(|&p| {
            let (dx, dy) = (p.0 - prev.0, p.1 - prev.1);
            if dx.hypot(dy) > 1e-6 {
                heading = dy.atan2(dx);
            }
            prev = p;
            Pose2::new(p.0, p.1, heading)
        })
        .collect()
}
