//! Binary checkpoints.
//!
//! Layout: magic `SFPL`, version `u16`; then for each tensor: name length
//! `u16`, name bytes, rank `u8`, dims `u32` each, values as 32-bit floats.
//! All integers and floats are little-endian.

use super::layer::ParamKind;
use super::model::ModelGraph;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"SFPL";
pub const VERSION: u16 = 1;

/// Size of the value bytes in a checkpoint of `model` (4 bytes per value).
pub fn value_bytes(model: &ModelGraph) -> usize {
    4 * model.param_count()
}

pub fn encode_tensors<'a>(
    tensors: impl IntoIterator<Item = (String, &'a Tensor)>,
) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for (name, t) in tensors {
        let len = u16::try_from(name.len())
            .map_err(|_| Error::Checkpoint(format!("name too long: {name}")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        write_tensor(&mut out, t)?;
    }
    Ok(out)
}

pub(crate) fn write_tensor(out: &mut Vec<u8>, t: &Tensor) -> Result<()> {
    let rank = u8::try_from(t.rank()).map_err(|_| Error::Checkpoint("rank exceeds 255".into()))?;
    out.push(rank);
    for &d in t.shape() {
        let d = u32::try_from(d).map_err(|_| Error::Checkpoint("dimension exceeds u32".into()))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    #[allow(clippy::unnecessary_cast)] // Scalar may be f64
    for &v in t.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(())
}

/// Little-endian reader over a byte slice.
pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub fn bytes(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.buf.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }

    pub fn u8(&mut self) -> Option<u8> {
        self.bytes(1).map(|b| b[0])
    }

    pub fn u16(&mut self) -> Option<u16> {
        self.bytes(2).map(|b| u16::from_le_bytes([b[0], b[1]]))
    }

    pub fn u32(&mut self) -> Option<u32> {
        self.bytes(4)
            .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    /// Reads rank, dims and values. `what` labels errors.
    pub fn tensor(&mut self, err: impl Fn(&str) -> Error) -> Result<Tensor> {
        let rank = self.u8().ok_or_else(|| err("truncated rank"))? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u32().ok_or_else(|| err("truncated dims"))? as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| err("dimension product overflows"))?;
        if numel.checked_mul(4).is_none_or(|n| n > self.remaining()) {
            return Err(err("value count exceeds remaining bytes"));
        }
        let raw = self.bytes(numel * 4).expect("length checked");
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as Scalar)
            .collect();
        Tensor::new(shape, data).map_err(|e| err(&e.to_string()))
    }
}

pub fn decode_tensors(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let err = |m: &str| Error::Checkpoint(m.to_string());
    let mut r = Reader::new(bytes);
    if r.bytes(4) != Some(MAGIC.as_slice()) {
        return Err(err("bad magic"));
    }
    let version = r.u16().ok_or_else(|| err("truncated header"))?;
    if version != VERSION {
        return Err(err(&format!("unsupported version {version}")));
    }
    let mut out = Vec::new();
    while r.remaining() > 0 {
        let len = r.u16().ok_or_else(|| err("truncated name length"))? as usize;
        let name = r.bytes(len).ok_or_else(|| err("truncated name"))?;
        let name = String::from_utf8(name.to_vec()).map_err(|_| err("name is not UTF-8"))?;
        let t = r.tensor(err)?;
        out.push((name, t));
    }
    Ok(out)
}

impl ModelGraph {
    pub fn to_checkpoint(&self) -> Result<Vec<u8>> {
        encode_tensors(self.named_params().map(|(n, _, t)| (n, t)))
    }

    /// Overwrites every parameter from a checkpoint of the same architecture.
    pub fn load_checkpoint(&mut self, bytes: &[u8]) -> Result<()> {
        self.load_checkpoint_filtered(bytes, |_| true)
    }

    /// Overwrites the parameters whose kind passes `keep`. The checkpoint
    /// must still hold exactly this model's tensors.
    pub fn load_checkpoint_filtered(
        &mut self,
        bytes: &[u8],
        keep: impl Fn(ParamKind) -> bool,
    ) -> Result<()> {
        let tensors = decode_tensors(bytes)?;
        let expected = self.named_params().count();
        if tensors.len() != expected {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} tensors, model has {expected}",
                tensors.len()
            )));
        }
        for ((name, kind, slot), (cname, t)) in self.named_params_mut().zip(tensors) {
            if name != cname || slot.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{cname}` {:?} does not match `{name}` {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            if keep(kind) {
                *slot = t;
            }
        }
        Ok(())
    }
}
