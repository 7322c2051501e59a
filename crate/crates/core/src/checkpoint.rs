//! Binary checkpoint container. The layout is described in `docs/checkpoint.md`.

use std::io::{Read, Write};
use std::path::Path;

use crate::config::{model_from_text, model_to_text};
use crate::error::{Error, Result};
use crate::network::{build_model, Model, ModelConfig};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"AIBNCKPT";
pub const FORMAT_VERSION: u32 = 1;

/// First and second Adam moments of one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub name: String,
    pub m: Tensor<f32>,
    pub v: Tensor<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub moments: Vec<Moments>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub format_version: u32,
    pub model: ModelConfig,
    pub stage: u32,
    /// Iterations completed within `stage`.
    pub iteration: u64,
    pub params: Vec<(String, Tensor<f32>)>,
    pub optimizer: Option<OptimizerState>,
}

impl Checkpoint {
    pub fn from_model(model: &Model<f32>, stage: usize, iteration: u64, optimizer: Option<OptimizerState>) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            model: model.cfg.clone(),
            stage: stage as u32,
            iteration,
            params: model
                .store
                .entries()
                .iter()
                .map(|e| (e.name.clone(), e.value.clone()))
                .collect(),
            optimizer,
        }
    }

    /// Rebuilds the model and overwrites every parameter from the checkpoint.
    pub fn to_model(&self) -> Result<Model<f32>> {
        let mut model = build_model::<f32>(&self.model, 0)?;
        if model.store.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} tensors, model expects {}",
                self.params.len(),
                model.store.len()
            )));
        }
        for (name, value) in &self.params {
            let id = model
                .store
                .id(name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown parameter `{name}`")))?;
            model.store.set(id, value.clone())?;
        }
        Ok(model)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, self.format_version);
        put_str(&mut out, &model_to_text(&self.model));
        put_u32(&mut out, self.stage);
        put_u64(&mut out, self.iteration);
        put_u32(&mut out, self.params.len() as u32);
        for (name, t) in &self.params {
            put_str(&mut out, name);
            put_tensor(&mut out, t);
        }
        match &self.optimizer {
            None => out.push(0),
            Some(opt) => {
                out.push(1);
                put_u64(&mut out, opt.step);
                put_u32(&mut out, opt.moments.len() as u32);
                for mo in &opt.moments {
                    put_str(&mut out, &mo.name);
                    put_tensor(&mut out, &mo.m);
                    put_tensor(&mut out, &mo.v);
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let format_version = get_u32(&mut r)?;
        if format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {format_version}")));
        }
        let model = model_from_text(&get_str(&mut r)?)?;
        let stage = get_u32(&mut r)?;
        let iteration = get_u64(&mut r)?;
        let n = get_u32(&mut r)? as usize;
        let mut params = Vec::with_capacity(n);
        for _ in 0..n {
            params.push((get_str(&mut r)?, get_tensor(&mut r)?));
        }
        let mut flag = [0u8; 1];
        read_exact(&mut r, &mut flag)?;
        let optimizer = match flag[0] {
            0 => None,
            1 => {
                let step = get_u64(&mut r)?;
                let n = get_u32(&mut r)? as usize;
                let mut moments = Vec::with_capacity(n);
                for _ in 0..n {
                    moments.push(Moments {
                        name: get_str(&mut r)?,
                        m: get_tensor(&mut r)?,
                        v: get_tensor(&mut r)?,
                    });
                }
                Some(OptimizerState { step, moments })
            }
            f => return Err(Error::Checkpoint(format!("bad optimizer flag {f}"))),
        };
        if !r.is_empty() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", r.len())));
        }
        Ok(Self {
            format_version,
            model,
            stage,
            iteration,
            params,
            optimizer,
        })
    }

    /// Writes through a temporary file so a crash never leaves a torn checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let tmp = path.with_extension("tmp");
        {
            let mut f = std::fs::File::create(&tmp)?;
            f.write_all(&self.to_bytes())?;
            f.sync_all()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingCheckpoint(path.to_path_buf()));
        }
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

fn put_tensor(out: &mut Vec<u8>, t: &Tensor<f32>) {
    put_u32(out, t.shape().len() as u32);
    for &d in t.shape() {
        put_u64(out, d as u64);
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::Checkpoint("unexpected end of file".into()))
}

fn get_u32(r: &mut &[u8]) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn get_u64(r: &mut &[u8]) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn get_str(r: &mut &[u8]) -> Result<String> {
    let n = get_u32(r)? as usize;
    if n > r.len() {
        return Err(Error::Checkpoint("string runs past end of file".into()));
    }
    let mut b = vec![0u8; n];
    read_exact(r, &mut b)?;
    String::from_utf8(b).map_err(|_| Error::Checkpoint("invalid UTF-8 in name".into()))
}

fn get_tensor(r: &mut &[u8]) -> Result<Tensor<f32>> {
    let ndim = get_u32(r)? as usize;
    if ndim > 8 {
        return Err(Error::Checkpoint(format!("implausible rank {ndim}")));
    }
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        shape.push(get_u64(r)? as usize);
    }
    let n: usize = shape.iter().product();
    if n.checked_mul(4).is_none_or(|b| b > r.len()) {
        return Err(Error::Checkpoint("tensor data runs past end of file".into()));
    }
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        let mut b = [0u8; 4];
        read_exact(r, &mut b)?;
        data.push(f32::from_le_bytes(b));
    }
    Tensor::from_vec(&shape, data)
}
