//! `CMEC` checkpoints.
//!
//! Little-endian: magic, u16 version, u8 model kind, u64 training step, u32
//! length + resolved run config (TOML), u32 parameter count, then per parameter
//! u32 name length, name bytes, u32 rank, u32 dims, f32 payload.

use std::path::Path;

use diffnet::{Scalar, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use stcm_core::models::{Model, ModelKind};

use crate::config::RunConfig;
use crate::dataset::Reader;
use crate::error::{input, io_err, Result};

pub const MAGIC: &[u8; 4] = b"CMEC";
pub const VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: ModelKind,
    pub step: u64,
    pub config: RunConfig,
    pub params: Vec<(String, Vec<usize>, Vec<f32>)>,
}

fn kind_tag(kind: ModelKind) -> u8 {
    match kind {
        ModelKind::Rcme => 0,
        ModelKind::Mscme => 1,
        ModelKind::MscmeNoPred => 2,
    }
}

fn tag_kind(tag: u8) -> Result<ModelKind> {
    Ok(match tag {
        0 => ModelKind::Rcme,
        1 => ModelKind::Mscme,
        2 => ModelKind::MscmeNoPred,
        t => return input(format!("unknown model kind tag {t}")),
    })
}

impl Checkpoint {
    pub fn from_model<S: Scalar>(model: &Model<S>, step: u64, config: &RunConfig) -> Self {
        let params = model
            .store
            .iter()
            .map(|p| {
                let data = p.value.data().iter().map(|v| v.as_f64() as f32).collect();
                (p.name.clone(), p.value.shape().to_vec(), data)
            })
            .collect();
        let mut config = config.clone();
        config.train.kind = model.kind;
        config.model = model.cfg.clone();
        Checkpoint {
            kind: model.kind,
            step,
            config,
            params,
        }
    }

    /// Rebuilds the model from the stored config and copies the weights in.
    pub fn to_model<S: Scalar>(&self) -> Result<Model<S>> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut model = Model::<S>::new(self.kind, self.config.model.clone(), &mut rng)?;
        if model.store.len() != self.params.len() {
            return input(format!(
                "checkpoint has {} tensors, the configured {} model has {}",
                self.params.len(),
                self.kind.tag(),
                model.store.len()
            ));
        }
        for (p, (name, shape, data)) in model.store.iter_mut().zip(&self.params) {
            if &p.name != name || p.value.shape() != shape.as_slice() {
                return input(format!(
                    "checkpoint tensor {name} {shape:?} does not match model tensor {} {:?}",
                    p.name,
                    p.value.shape()
                ));
            }
            p.value = Tensor::from_vec(shape, data.iter().map(|&v| S::lit(v as f64)).collect())?;
        }
        Ok(model)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(MAGIC);
        b.extend_from_slice(&VERSION.to_le_bytes());
        b.push(kind_tag(self.kind));
        b.extend_from_slice(&self.step.to_le_bytes());
        let cfg = self.config.to_toml();
        b.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
        b.extend_from_slice(cfg.as_bytes());
        b.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, shape, data) in &self.params {
            b.extend_from_slice(&(name.len() as u32).to_le_bytes());
            b.extend_from_slice(name.as_bytes());
            b.extend_from_slice(&(shape.len() as u32).to_le_bytes());
            for &d in shape {
                b.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in data {
                b.extend_from_slice(&v.to_le_bytes());
            }
        }
        b
    }

    pub fn decode(buf: &[u8]) -> Result<Self> {
        let mut r = Reader::new(buf);
        if r.bytes(4).ok() != Some(MAGIC.as_slice()) {
            return input("not a CMEC checkpoint (bad magic)");
        }
        let version = r.u16()?;
        if version != VERSION {
            return input(format!("unsupported checkpoint version {version}"));
        }
        let kind = tag_kind(r.u8()?)?;
        let step = r.u64()?;
        let len = r.u32()?;
        let text = std::str::from_utf8(r.bytes(len)?).map_err(|_| crate::error::CliError::Input("checkpoint config is not UTF-8".into()))?;
        let config = RunConfig::parse(text)?;
        let count = r.u32()?;
        let mut params = Vec::with_capacity(count);
        for _ in 0..count {
            let n = r.u32()?;
            let name = String::from_utf8(r.bytes(n)?.to_vec())
                .map_err(|_| crate::error::CliError::Input("tensor name is not UTF-8".into()))?;
            let rank = r.u32()?;
            let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
            let numel = shape.iter().product();
            params.push((name, shape, r.f32s(numel)?));
        }
        if !r.done() {
            return input("trailing bytes after checkpoint payload");
        }
        Ok(Checkpoint {
            kind,
            step,
            config,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
        std::fs::write(path, self.encode()).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = std::fs::read(path).map_err(io_err(path))?;
        Self::decode(&buf)
    }
}
