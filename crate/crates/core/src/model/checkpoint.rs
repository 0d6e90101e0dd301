//! Little-endian checkpoint:
//!
//! ```text
//! "C2PC"  u32 version  u32 config_len  ModelConfig JSON
//! u32 n_params
//! per parameter: u32 name_len  name  u32 rank  u32 dims[rank]  f32 payload
//! u8 has_optimizer
//!   [u64 epoch  u64 step  f64 mu_product  f64 best_val  u64 seed
//!    f32 m[...]  f32 v[...]   (same order and shapes as the parameters)]
//! u32 crc32 of every preceding byte
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::diffmath::Tensor;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"C2PC";
const VERSION: u32 = 1;

/// Optimizer and loop state needed to resume training exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    /// Epochs completed.
    pub epoch: u64,
    /// Optimizer steps taken.
    pub step: u64,
    pub mu_product: f64,
    pub best_val: f64,
    pub seed: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Model,
    pub optimizer: Option<OptimizerState>,
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_f32s(buf: &mut Vec<u8>, t: &Tensor) {
    for &v in t.data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

pub fn write_checkpoint(model: &Model, optimizer: Option<&OptimizerState>, out: &mut impl Write) -> Result<()> {
    let params = model.params();
    let mut buf = Vec::with_capacity(params.scalar_count() * 4 + 4096);
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    put_u32(&mut buf, VERSION);
    let config = serde_json::to_vec(model.config())?;
    put_u32(&mut buf, config.len() as u32);
    buf.extend_from_slice(&config);
    put_u32(&mut buf, params.len() as u32);
    for (name, t) in params.iter() {
        put_u32(&mut buf, name.len() as u32);
        buf.extend_from_slice(name.as_bytes());
        put_u32(&mut buf, t.rank() as u32);
        for &d in t.shape() {
            put_u32(&mut buf, d as u32);
        }
        put_f32s(&mut buf, t);
    }
    match optimizer {
        None => buf.push(0),
        Some(o) => {
            if o.m.len() != params.len() || o.v.len() != params.len() {
                return Err(Error::shape("optimizer moments do not match the parameters"));
            }
            buf.push(1);
            buf.extend_from_slice(&o.epoch.to_le_bytes());
            buf.extend_from_slice(&o.step.to_le_bytes());
            buf.extend_from_slice(&o.mu_product.to_le_bytes());
            buf.extend_from_slice(&o.best_val.to_le_bytes());
            buf.extend_from_slice(&o.seed.to_le_bytes());
            for set in [&o.m, &o.v] {
                for (t, p) in set.iter().zip(params.tensors()) {
                    if t.shape() != p.shape() {
                        return Err(Error::shape("optimizer moment shape mismatch"));
                    }
                    put_f32s(&mut buf, t);
                }
            }
        }
    }
    let crc = crc32fast::hash(&buf);
    put_u32(&mut buf, crc);
    out.write_all(&buf)?;
    Ok(())
}

/// Writes to a temporary sibling and renames, so a crash never leaves a
/// half-written checkpoint behind.
pub fn save_checkpoint(model: &Model, optimizer: Option<&OptimizerState>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    write_checkpoint(model, optimizer, &mut bytes)?;
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, &bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>, expected: Option<&ModelConfig>) -> Result<Checkpoint> {
    read_checkpoint(&fs::read(path)?, expected)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let left = self.bytes.len() - self.pos;
        if n > left {
            return Err(Error::format(
                self.pos as u64,
                format!("truncated {what}: need {n} bytes, {left} left"),
            ));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn tensor(&mut self, shape: &[usize], what: &str) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let at = self.pos as u64;
        let raw = self.take(n.checked_mul(4).ok_or_else(|| Error::format(at, "size overflow"))?, what)?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect();
        Tensor::new(shape, data).map_err(|e| Error::format(at, format!("{what}: {e}")))
    }
}

pub fn read_checkpoint(bytes: &[u8], expected: Option<&ModelConfig>) -> Result<Checkpoint> {
    if bytes.len() < 8 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::format(0, "not a checkpoint (bad magic)"));
    }
    let body = &bytes[..bytes.len() - 4];
    let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }

    let mut r = Reader { bytes: body, pos: 4 };
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::format(4, format!("unsupported checkpoint version {version}")));
    }
    let config_len = r.u32("config length")? as usize;
    let config_at = r.pos as u64;
    let config: ModelConfig = serde_json::from_slice(r.take(config_len, "config")?)
        .map_err(|e| Error::format(config_at, format!("config JSON: {e}")))?;
    if let Some(want) = expected {
        if want != &config {
            return Err(Error::config(format!(
                "checkpoint config {} does not match expected {}",
                serde_json::to_string(&config)?,
                serde_json::to_string(want)?
            )));
        }
    }
    config.validate()?;
    let (template, _) = super::params::build(&config, None);

    let n = r.u32("parameter count")? as usize;
    if n != template.len() {
        return Err(Error::format(
            r.pos as u64 - 4,
            format!("{n} parameters, configuration needs {}", template.len()),
        ));
    }
    let mut tensors = Vec::with_capacity(n);
    for (name, want) in template.iter() {
        let at = r.pos as u64;
        let len = r.u32("name length")? as usize;
        let got = r.take(len, "name")?;
        if got != name.as_bytes() {
            return Err(Error::format(
                at,
                format!("expected parameter {name}, found {}", String::from_utf8_lossy(got)),
            ));
        }
        let rank = r.u32("rank")? as usize;
        let dims = (0..rank)
            .map(|_| r.u32("dims").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        if dims != want.shape() {
            return Err(Error::format(
                at,
                format!("parameter {name}: shape {dims:?}, expected {:?}", want.shape()),
            ));
        }
        tensors.push(r.tensor(&dims, name)?);
    }
    let mut params = template.clone();
    params.replace(tensors)?;
    let model = Model::from_params(config, params)?;

    let flag_at = r.pos as u64;
    let optimizer = match r.take(1, "optimizer flag")?[0] {
        0 => None,
        1 => {
            let epoch = r.u64("epoch")?;
            let step = r.u64("step")?;
            let mu_product = r.f64("mu_product")?;
            let best_val = r.f64("best_val")?;
            let seed = r.u64("seed")?;
            let mut read_set = |what: &str| -> Result<Vec<Tensor>> {
                template
                    .tensors()
                    .iter()
                    .map(|t| r.tensor(t.shape(), what))
                    .collect()
            };
            let m = read_set("first moment")?;
            let v = read_set("second moment")?;
            Some(OptimizerState {
                epoch,
                step,
                mu_product,
                best_val,
                seed,
                m,
                v,
            })
        }
        f => return Err(Error::format(flag_at, format!("bad optimizer flag {f}"))),
    };
    if r.pos != body.len() {
        return Err(Error::format(
            r.pos as u64,
            format!("{} trailing bytes", body.len() - r.pos),
        ));
    }
    Ok(Checkpoint { model, optimizer })
}
