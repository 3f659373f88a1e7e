//! Checkpoint serialization and CSV interchange.
//!
//! Checkpoints are a flat key-value weights file: a versioned header
//! followed by (name, shape, float64 little-endian array) records, enough to
//! rebuild either model family. All numeric CSV output uses Rust's shortest
//! round-trip float formatting, so identical runs produce identical bytes.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{CemError, Result};
use crate::models::{Activation, DenseLayer, Encoder, Model, NPCemModel, PCemModel, Param};
use crate::objectives::TrainLog;
use crate::samplers::TrajectoryRecorder;
use crate::Tensor;

const MAGIC: &[u8; 4] = b"CEMW";
const VERSION: u32 = 1;

fn kind_tag(model: &Model) -> u8 {
    match model {
        Model::Pcem(_) => 0,
        Model::Npcem(_) => 1,
    }
}

fn activation_tag(a: Activation) -> u8 {
    match a {
        Activation::Tanh => 0,
        Activation::Relu => 1,
    }
}

fn activation_from(tag: u8) -> Result<Activation> {
    match tag {
        0 => Ok(Activation::Tanh),
        1 => Ok(Activation::Relu),
        other => Err(CemError::Serialization(format!(
            "unknown activation tag {other}"
        ))),
    }
}

/// Serialize a model to the weights-file byte format.
pub fn model_to_bytes(model: &Model) -> Vec<u8> {
    let (encoder, n_classes) = match model {
        Model::Pcem(m) => (&m.encoder, m.n_classes() as u32),
        Model::Npcem(m) => (&m.encoder, 0u32),
    };
    let params = model.params();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(kind_tag(model));
    out.push(activation_tag(encoder.activation));
    out.extend_from_slice(&(encoder.input_dim as u32).to_le_bytes());
    out.extend_from_slice(&(encoder.feature_dim as u32).to_le_bytes());
    out.extend_from_slice(&n_classes.to_le_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for p in params {
        let name = p.name.as_bytes();
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name);
        out.push(p.tensor.shape.len() as u8);
        for &d in &p.tensor.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &p.tensor.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(CemError::Serialization("truncated weights file".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Deserialize a model from the weights-file byte format.
pub fn model_from_bytes(bytes: &[u8]) -> Result<Model> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(CemError::Serialization("not a weights file".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(CemError::Serialization(format!(
            "unsupported weights file version {version}"
        )));
    }
    let kind = r.u8()?;
    let activation = activation_from(r.u8()?)?;
    let input_dim = r.u32()? as usize;
    let feature_dim = r.u32()? as usize;
    let n_classes = r.u32()? as usize;
    let n_params = r.u32()? as usize;

    let mut params = Vec::with_capacity(n_params);
    for _ in 0..n_params {
        let name_len = r.u16()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|e| CemError::Serialization(e.to_string()))?;
        let ndim = r.u8()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut values = Vec::with_capacity(numel);
        for _ in 0..numel {
            values.push(r.f64()?);
        }
        params.push(Param {
            name,
            tensor: Tensor::new(shape, values)?,
        });
    }
    if r.pos != bytes.len() {
        return Err(CemError::Serialization("trailing bytes in weights file".into()));
    }

    // Rebuild the encoder from the `enc.l{i}.w` / `enc.l{i}.b` records.
    let mut layers = Vec::new();
    for i in 0.. {
        let wname = format!("enc.l{i}.w");
        let bname = format!("enc.l{i}.b");
        let w = params.iter().find(|p| p.name == wname);
        let b = params.iter().find(|p| p.name == bname);
        match (w, b) {
            (Some(w), Some(b)) => layers.push(DenseLayer {
                weight: w.clone(),
                bias: b.clone(),
            }),
            (None, None) => break,
            _ => {
                return Err(CemError::Serialization(format!(
                    "weights file has a dangling layer {i} record"
                )))
            }
        }
    }
    let encoder = Encoder {
        input_dim,
        feature_dim,
        layers,
        activation,
    };
    match kind {
        0 => {
            let w = params
                .iter()
                .find(|p| p.name == "w")
                .ok_or_else(|| CemError::Serialization("missing class weights".into()))?;
            if n_classes != w.tensor.shape[1] {
                return Err(CemError::Serialization("class count mismatch".into()));
            }
            Ok(Model::Pcem(PCemModel::new(encoder, w.tensor.clone())?))
        }
        1 => Ok(Model::Npcem(NPCemModel::new(encoder))),
        other => Err(CemError::Serialization(format!("unknown model kind {other}"))),
    }
}

pub fn save_model(path: &Path, model: &Model) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&model_to_bytes(model))?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<Model> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    model_from_bytes(&bytes)
}

// ── CSV writers ──────────────────────────────────────────────────────────

/// `epoch,loss,reg,natural_acc,robust_acc`
pub fn metrics_to_csv(log: &TrainLog) -> String {
    let mut out = String::from("epoch,loss,reg,natural_acc,robust_acc\n");
    for e in &log.epochs {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            e.epoch, e.loss, e.reg, e.natural_acc, e.robust_acc
        ));
    }
    out
}

/// `chain_id,x1,…,xd[,target]`
pub fn samples_to_csv(states: &Tensor, labels: Option<&[usize]>) -> String {
    let d = states.shape[1];
    let mut out = String::from("chain_id");
    for i in 1..=d {
        out.push_str(&format!(",x{i}"));
    }
    if labels.is_some() {
        out.push_str(",target");
    }
    out.push('\n');
    for i in 0..states.n_rows() {
        out.push_str(&format!("{i}"));
        for v in states.row(i) {
            out.push_str(&format!(",{v}"));
        }
        if let Some(ls) = labels {
            out.push_str(&format!(",{}", ls[i]));
        }
        out.push('\n');
    }
    out
}

/// `step_index,chain_id,x1,…,xd`
pub fn trajectory_to_csv(rec: &TrajectoryRecorder, dim: usize) -> String {
    let mut out = String::from("step_index,chain_id");
    for i in 1..=dim {
        out.push_str(&format!(",x{i}"));
    }
    out.push('\n');
    for (step, chain, coords) in &rec.rows {
        out.push_str(&format!("{step},{chain}"));
        for v in coords {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    out
}
