//! The `MLCW` weight file.
//!
//! Little-endian throughout:
//!
//! ```text
//! magic "MLCW" | version u32 | entry count u32
//! entry: name length u32 | UTF-8 name | dtype u8 | rank u8 | dims u32 * rank | payload
//! ```
//!
//! dtype 0 is `f32`, 1 is `f64`, 2 is `u8`. Tensors are stored as `f32`
//! with their logical rank (trailing unit dimensions dropped, at least 1).
//! Two `u8` metadata entries travel with the tensors: `meta.config` holds
//! the model configuration as `key = value` text and `meta.phase` holds the
//! phase code (0 training, 1 inference). Entries ending in `running_mean` or
//! `running_var` are batch-norm buffers; all other tensors are trainable.

use std::collections::HashMap;
use std::path::Path;

use super::{Model, ModelConfig};
use crate::autograd::{ParamKind, ParamStore};
use crate::config::KeyValues;
use crate::error::{io_err, Error, Result};
use crate::nn::Phase;
use crate::tensor::{Shape, Tensor};

pub const MAGIC: &[u8; 4] = b"MLCW";
pub const FORMAT_VERSION: u32 = 1;

const DTYPE_F32: u8 = 0;
const DTYPE_F64: u8 = 1;
const DTYPE_U8: u8 = 2;
const META_CONFIG: &str = "meta.config";
const META_PHASE: &str = "meta.phase";

/// A model's configuration, phase and tensors.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub phase: Phase,
    pub store: ParamStore<f32>,
}

fn is_buffer(name: &str) -> bool {
    name.ends_with("running_mean") || name.ends_with("running_var")
}

fn logical_dims(s: Shape) -> Vec<usize> {
    let mut d = s.dims().to_vec();
    while d.len() > 1 && d[d.len() - 1] == 1 {
        d.pop();
    }
    d
}

fn shape_from_dims(d: &[usize]) -> Result<Shape> {
    if d.is_empty() || d.len() > 4 {
        return Err(Error::Format(format!("tensor rank {} not in 1..=4", d.len())));
    }
    let mut full = [1usize; 4];
    full[..d.len()].copy_from_slice(d);
    Ok(Shape::new(full[0], full[1], full[2], full[3]))
}

fn put_entry(out: &mut Vec<u8>, name: &str, dtype: u8, dims: &[usize]) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(dtype);
    out.push(dims.len() as u8);
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
}

pub fn encode_weights(ck: &Checkpoint) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&((ck.store.len() + 2) as u32).to_le_bytes());
    let cfg = ck.config.to_kv().render();
    put_entry(&mut out, META_CONFIG, DTYPE_U8, &[cfg.len()]);
    out.extend_from_slice(cfg.as_bytes());
    put_entry(&mut out, META_PHASE, DTYPE_U8, &[1]);
    out.push(ck.phase.code());
    for (name, _, t) in ck.store.iter() {
        put_entry(&mut out, name, DTYPE_F32, &logical_dims(t.shape()));
        for &v in t.data() {
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
    fn take(&mut self, n: usize, what: impl FnOnce() -> String) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Truncated { what: what() });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: impl FnOnce() -> String) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u8(&mut self, what: impl FnOnce() -> String) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }
}

pub fn decode_weights(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic = r.take(4, || "magic".into())?;
    if magic != MAGIC {
        return Err(Error::BadMagic {
            found: magic.try_into().unwrap(),
        });
    }
    let version = r.u32(|| "version".into())?;
    if version != FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let count = r.u32(|| "entry count".into())?;
    let mut config = None;
    let mut phase = None;
    let mut store = ParamStore::new();
    for i in 0..count {
        let len = r.u32(|| format!("name length of entry {i}"))? as usize;
        let name = std::str::from_utf8(r.take(len, || format!("name of entry {i}"))?)
            .map_err(|_| Error::Format(format!("entry {i}: name is not UTF-8")))?
            .to_string();
        let dtype = r.u8(|| format!("dtype of {name}"))?;
        let rank = r.u8(|| format!("rank of {name}"))? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u32(|| format!("dims of {name}"))? as usize);
        }
        let numel: usize = dims.iter().product();
        match dtype {
            DTYPE_U8 => {
                let payload = r.take(numel, || format!("payload of {name}"))?;
                match name.as_str() {
                    META_CONFIG => {
                        let text = std::str::from_utf8(payload)
                            .map_err(|_| Error::Format("model config is not UTF-8".into()))?;
                        config = Some(ModelConfig::from_kv(&KeyValues::parse(text)?)?);
                    }
                    META_PHASE => {
                        let code = *payload
                            .first()
                            .ok_or_else(|| Error::Format("empty phase entry".into()))?;
                        phase = Some(Phase::from_code(code)?);
                    }
                    _ => return Err(Error::Format(format!("unexpected byte entry {name:?}"))),
                }
            }
            DTYPE_F32 => {
                let payload = r.take(numel * 4, || format!("payload of {name}"))?;
                let data = payload
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                let t = Tensor::from_vec(shape_from_dims(&dims)?, data)?;
                let kind = if is_buffer(&name) {
                    ParamKind::Buffer
                } else {
                    ParamKind::Trainable
                };
                store
                    .insert(name.clone(), kind, t)
                    .map_err(|_| Error::Format(format!("duplicate entry {name:?}")))?;
            }
            DTYPE_F64 => {
                return Err(Error::Format(format!(
                    "{name}: 64-bit tensors cannot be loaded into a 32-bit model"
                )))
            }
            other => return Err(Error::Format(format!("{name}: unknown dtype tag {other}"))),
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes after the last entry", bytes.len() - r.pos)));
    }
    Ok(Checkpoint {
        config: config.ok_or_else(|| Error::Format("missing meta.config entry".into()))?,
        phase: phase.ok_or_else(|| Error::Format("missing meta.phase entry".into()))?,
        store,
    })
}

/// Writes atomically: a temporary file in the same directory is renamed
/// over `path`.
pub fn save_weights(path: &Path, ck: &Checkpoint) -> Result<()> {
    crate::util::write_atomic(path, &encode_weights(ck))
}

pub fn load_weights(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    decode_weights(&bytes)
}

/// The tensor names and shapes a model holds in `phase`.
pub fn expected_layout(model: &Model, phase: Phase) -> Result<HashMap<String, Shape>> {
    let mut layout: HashMap<String, Shape> = model
        .init(0)?
        .iter()
        .map(|(n, _, t)| (n.to_string(), t.shape()))
        .collect();
    if phase == Phase::Inference {
        for r in model.rec_blocks() {
            for name in [r.dw3.weight_name(), r.dw1.weight_name()] {
                layout.remove(&name);
            }
            for bn in [&r.bn3, &r.bn1] {
                for f in ["weight", "bias", "running_mean", "running_var"] {
                    layout.remove(&bn.field(f));
                }
            }
            layout.insert(r.fused.weight_name(), r.fused.geom.weight_shape());
            layout.insert(r.fused.bias_name(), Shape::vector(1, r.channels));
        }
    }
    Ok(layout)
}

/// Loads weights for `model` in `phase`, rejecting files whose phase,
/// tensor names or shapes differ from what the model expects.
pub fn load_for(path: &Path, model: &Model, phase: Phase) -> Result<ParamStore<f32>> {
    let ck = load_weights(path)?;
    check_compatible(&ck, model, phase)?;
    Ok(ck.store)
}

pub fn check_compatible(ck: &Checkpoint, model: &Model, phase: Phase) -> Result<()> {
    if ck.phase != phase {
        return Err(Error::PhaseMismatch {
            name: path_name(ck),
            found: ck.phase.name().into(),
            expected: phase.name().into(),
        });
    }
    let layout = expected_layout(model, phase)?;
    for (name, _, t) in ck.store.iter() {
        match layout.get(name) {
            None => return Err(Error::Format(format!("unexpected tensor {name:?} for {}", model.config.arch))),
            Some(&s) if s != t.shape() => {
                return Err(Error::ShapeMismatch {
                    name: name.to_string(),
                    found: t.shape().dims().to_vec(),
                    expected: s.dims().to_vec(),
                })
            }
            Some(_) => {}
        }
    }
    if let Some(missing) = layout.keys().find(|k| !ck.store.contains(k)) {
        return Err(Error::Format(format!("missing tensor {missing:?}")));
    }
    Ok(())
}

fn path_name(ck: &Checkpoint) -> String {
    format!("{} weights", ck.config.arch)
}
