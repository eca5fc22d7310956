//! `GCDS` dataset files.
//!
//! Little-endian. Header: magic, u16 version, u32 H, W, C_map, τ, T, f64 dt,
//! cell size, origin offset x/y, u32 example count. Each example: u64 scenario
//! seed, f64 ego speed, observed grids (τ·H·W f32), targets (T·H·W f32),
//! visibility (T·H·W u8), semantic channels (C_map·H·W u8), expert positions
//! ((τ+T)·2 f32), future agent occupancy (T·H·W u8).

use std::io::{Read, Write};
use std::path::Path;

use stcm_core::grid::{GridConfig, OccupancyGrid, SemanticMap, VisibilityMask};
use stcm_core::synth::TrainingExample;

use crate::error::{input, io_err, CliError, Result};

pub const MAGIC: &[u8; 4] = b"GCDS";
pub const VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub grid: GridConfig,
    pub map_channels: usize,
    pub examples: Vec<TrainingExample>,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u16(&mut self, v: u16) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: usize) {
        self.0.extend_from_slice(&(v as u32).to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f32s(&mut self, v: impl IntoIterator<Item = f32>) {
        for x in v {
            self.0.extend_from_slice(&x.to_le_bytes());
        }
    }
}

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    pub(crate) fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return input(format!("file truncated at byte {}", self.pos));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.bytes(1)?[0])
    }
    pub(crate) fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.bytes(2)?.try_into().unwrap()))
    }
    pub(crate) fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().unwrap()) as usize)
    }
    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }
    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }
    pub(crate) fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        Ok(self
            .bytes(n * 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
    pub(crate) fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

fn check_example(ex: &TrainingExample, grid: &GridConfig, c: usize) -> Result<()> {
    let (h, w) = (grid.height, grid.width);
    let ok = ex.observed.len() == grid.tau
        && ex.targets.len() == grid.horizon
        && ex.future.len() == grid.horizon
        && ex.visibility.len() == grid.horizon
        && ex.expert.len() == grid.tau + grid.horizon
        && (ex.semantic.channels, ex.semantic.height, ex.semantic.width) == (c, h, w)
        && ex.observed.iter().chain(&ex.targets).chain(&ex.future).all(|g| g.height() == h && g.width() == w)
        && ex.visibility.iter().all(|v| v.height == h && v.width == w);
    if ok {
        Ok(())
    } else {
        input(format!("example {} does not match the dataset header", ex.seed))
    }
}

impl Dataset {
    pub fn encode(&self) -> Result<Vec<u8>> {
        let g = &self.grid;
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.u16(VERSION);
        for v in [g.height, g.width, self.map_channels, g.tau, g.horizon] {
            w.u32(v);
        }
        for v in [g.dt, g.cell_size, g.origin_offset.0, g.origin_offset.1] {
            w.f64(v);
        }
        w.u32(self.examples.len());
        for ex in &self.examples {
            check_example(ex, g, self.map_channels)?;
            w.u64(ex.seed);
            w.f64(ex.ego_speed);
            for grid in ex.observed.iter().chain(&ex.targets) {
                w.f32s(grid.values().iter().copied());
            }
            for v in &ex.visibility {
                w.0.extend_from_slice(&v.values);
            }
            w.0.extend_from_slice(&ex.semantic.data);
            w.f32s(ex.expert.iter().flat_map(|p| [p.0 as f32, p.1 as f32]));
            for grid in &ex.future {
                w.0.extend(grid.values().iter().map(|&v| (v >= 0.5) as u8));
            }
        }
        Ok(w.0)
    }

    pub fn decode(buf: &[u8]) -> Result<Self> {
        let mut r = Reader::new(buf);
        if r.bytes(4).ok() != Some(MAGIC.as_slice()) {
            return input("not a GCDS dataset (bad magic)");
        }
        let version = r.u16()?;
        if version != VERSION {
            return input(format!("unsupported dataset version {version}"));
        }
        let (h, w, c, tau, t) = (r.u32()?, r.u32()?, r.u32()?, r.u32()?, r.u32()?);
        let (dt, cell, ox, oy) = (r.f64()?, r.f64()?, r.f64()?, r.f64()?);
        let grid = GridConfig {
            height: h,
            width: w,
            cell_size: cell,
            origin_offset: (ox, oy),
            tau,
            horizon: t,
            dt,
        };
        grid.validate()?;
        if c == 0 {
            return input("dataset declares zero map channels");
        }
        let count = r.u32()?;
        let n = h * w;
        let per_example = 16 + (tau + t) * n * 4 + t * n + c * n + (tau + t) * 8 + t * n;
        if buf.len().saturating_sub(r.pos) != count * per_example {
            return input(format!(
                "dataset declares {count} examples of {per_example} bytes but has {} payload bytes",
                buf.len() - r.pos
            ));
        }
        let mut examples = Vec::with_capacity(count);
        for _ in 0..count {
            let seed = r.u64()?;
            let ego_speed = r.f64()?;
            let mut grids = |k: usize| -> Result<Vec<OccupancyGrid<f32>>> {
                (0..k).map(|_| Ok(OccupancyGrid::from_vec(h, w, r.f32s(n)?)?)).collect()
            };
            let observed = grids(tau)?;
            let targets = grids(t)?;
            let visibility = (0..t)
                .map(|_| {
                    Ok(VisibilityMask {
                        height: h,
                        width: w,
                        values: r.bytes(n)?.to_vec(),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let mut semantic = SemanticMap::new(c, h, w)?;
            semantic.data.copy_from_slice(r.bytes(c * n)?);
            let expert = r.f32s((tau + t) * 2)?.chunks(2).map(|p| (p[0] as f64, p[1] as f64)).collect();
            let future = (0..t)
                .map(|_| Ok(OccupancyGrid::from_vec(h, w, r.bytes(n)?.iter().map(|&b| b as f32).collect())?))
                .collect::<Result<Vec<_>>>()?;
            examples.push(TrainingExample {
                seed,
                ego_speed,
                observed,
                targets,
                semantic,
                visibility,
                expert,
                future,
            });
        }
        debug_assert!(r.done());
        Ok(Dataset {
            grid,
            map_channels: c,
            examples,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.encode()?;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
        let mut f = std::fs::File::create(path).map_err(io_err(path))?;
        f.write_all(&bytes).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut buf))
            .map_err(io_err(path))?;
        Self::decode(&buf).map_err(|e| match e {
            CliError::Input(m) => CliError::Input(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    /// Fails unless the dataset was produced for `grid` and `map_channels`.
    pub fn check_compatible(&self, grid: &GridConfig, map_channels: usize) -> Result<()> {
        let g = &self.grid;
        let same = (g.height, g.width, g.tau, g.horizon) == (grid.height, grid.width, grid.tau, grid.horizon)
            && g.dt == grid.dt
            && g.cell_size == grid.cell_size
            && g.origin_offset == grid.origin_offset
            && self.map_channels == map_channels;
        if same {
            Ok(())
        } else {
            input(format!(
                "dataset grid {}×{} τ={} T={} C={} does not match the configured {}×{} τ={} T={} C={}",
                g.height, g.width, g.tau, g.horizon, self.map_channels, grid.height, grid.width, grid.tau, grid.horizon, map_channels
            ))
        }
    }
}
