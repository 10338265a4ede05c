use std::io::{Read, Write};

use crate::error::{usage, Error, Result};

use super::tensor::fnv_step;
use super::Tensor;

/// Index of a parameter inside its [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone)]
struct Param {
    name: String,
    value: Tensor,
    grad: Tensor,
    velocity: Tensor,
}

/// Named parameters, each paired with a same-shaped gradient and momentum buffer.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    params: Vec<Param>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let shape = value.shape().to_vec();
        self.params.push(Param {
            name: name.into(),
            grad: Tensor::zeros(&shape),
            velocity: Tensor::zeros(&shape),
            value,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].grad
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].grad
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    /// Clears momentum buffers.
    pub fn reset_state(&mut self) {
        for p in &mut self.params {
            p.velocity.fill(0.0);
        }
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Hash of every name and parameter bit pattern.
    pub fn checksum(&self) -> u64 {
        let mut h = 0u64;
        for p in &self.params {
            for b in p.name.bytes() {
                h = fnv_step(h, b as u64);
            }
            h = fnv_step(h, p.value.checksum());
        }
        h
    }

    /// Writes the flat `CLRCKPT1` binary checkpoint.
    pub fn write_checkpoint(&self, mut w: impl Write) -> std::io::Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        for p in &self.params {
            let name = p.name.as_bytes();
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name)?;
            w.write_all(&(p.value.rank() as u32).to_le_bytes())?;
            for &d in p.value.shape() {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            let mut buf = Vec::with_capacity(p.value.len() * 4);
            for v in p.value.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    /// Reads a checkpoint; parameters run until end of input.
    pub fn read_checkpoint(mut r: impl Read) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)
            .map_err(|e| Error::Checkpoint(format!("read failed: {e}")))?;
        let mut cur = Cursor { bytes: &bytes, pos: 0 };
        if cur.take(CHECKPOINT_MAGIC.len())? != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("missing CLRCKPT1 magic".into()));
        }
        let mut set = ParamSet::new();
        while cur.pos < bytes.len() {
            let name_len = cur.u32()? as usize;
            let name = std::str::from_utf8(cur.take(name_len)?)
                .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?
                .to_string();
            let rank = cur.u32()? as usize;
            let shape = (0..rank)
                .map(|_| cur.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let len: usize = shape.iter().product();
            let data = cur
                .take(len * 4)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let value = Tensor::new(shape, data)
                .map_err(|e| Error::Checkpoint(format!("parameter {name}: {e}")))?;
            set.add(name, value);
        }
        Ok(set)
    }

    /// Copies values from `other`, matching by name and shape.
    pub fn load_values(&mut self, other: &ParamSet) -> Result<()> {
        if other.len() != self.len() {
            return usage(format!(
                "checkpoint has {} parameters, model expects {}",
                other.len(),
                self.len()
            ));
        }
        for p in &mut self.params {
            let Some(id) = other.find(&p.name) else {
                return usage(format!("checkpoint lacks parameter {}", p.name));
            };
            let src = other.value(id);
            if src.shape() != p.value.shape() {
                return usage(format!(
                    "parameter {} has shape {:?} in checkpoint, model expects {:?}",
                    p.name,
                    src.shape(),
                    p.value.shape()
                ));
            }
            p.value = src.clone();
        }
        Ok(())
    }
}

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CLRCKPT1";

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint("truncated checkpoint".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// SGD with heavy-ball momentum and L2 weight decay; zeroes gradients afterwards.
///
/// `v ← momentum·v + grad + weight_decay·param`, `param ← param − lr·v`.
pub fn sgd_step(params: &mut ParamSet, lr: f32, momentum: f32, weight_decay: f32) {
    for p in &mut params.params {
        let value = p.value.data_mut();
        let grad = p.grad.data_mut();
        let vel = p.velocity.data_mut();
        for ((x, g), v) in value.iter_mut().zip(grad.iter_mut()).zip(vel.iter_mut()) {
            *v = momentum * *v + *g + weight_decay * *x;
            *x -= lr * *v;
            *g = 0.0;
        }
    }
}
