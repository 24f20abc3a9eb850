//! Framed binary messages.
//!
//! A frame is `length: u32 BE | msg_type: u8 | payload` where `length`
//! counts payload bytes only. Everything inside the payload is
//! little-endian.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::nn::checkpoint::{decode_tensors, write_tensor, Reader};
use crate::split::{GradientBatch, SmashedBatch};
use crate::tensor::Tensor;

pub const HEADER_LEN: usize = 5;
/// Frames larger than this are rejected before allocation.
pub const MAX_PAYLOAD: usize = 1 << 30;

pub const TYPE_SMASHED: u8 = 0;
pub const TYPE_GRADIENT: u8 = 1;
pub const TYPE_MODEL_UP: u8 = 2;
pub const TYPE_MODEL_DOWN: u8 = 3;
pub const TYPE_CONTROL: u8 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum ControlKind {
    /// Client introduces itself on a stream connection.
    Hello = 0,
    /// Server assigns an id to a connecting client.
    Assign = 1,
    EpochStart = 2,
    /// Server asks for the next smashed batch.
    Pull = 3,
    /// Reply to `Pull` when the shard is used up for this epoch.
    Exhausted = 4,
    /// Server asks for the client's model portion.
    Upload = 5,
    /// Server asks for one local epoch of full-model training.
    TrainLocal = 6,
    Shutdown = 7,
    /// Client could not handle a message; `detail` says why.
    Failed = 8,
    /// Mean local training loss of an epoch, as decimal text in `detail`.
    LocalLoss = 9,
}

impl ControlKind {
    fn from_u8(v: u8) -> Option<Self> {
        use ControlKind::*;
        Some(match v {
            0 => Hello,
            1 => Assign,
            2 => EpochStart,
            3 => Pull,
            4 => Exhausted,
            5 => Upload,
            6 => TrainLocal,
            7 => Shutdown,
            8 => Failed,
            9 => LocalLoss,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Control {
    pub kind: ControlKind,
    pub client_id: u32,
    pub epoch: u32,
    pub detail: String,
}

impl Control {
    pub fn new(kind: ControlKind, client_id: u32, epoch: u32) -> Self {
        Self {
            kind,
            client_id,
            epoch,
            detail: String::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum WireMessage {
    Smashed(SmashedBatch),
    Gradient(GradientBatch),
    /// Client model portion in checkpoint format.
    ModelUp(Vec<u8>),
    /// Global model portion in checkpoint format.
    ModelDown(Vec<u8>),
    Control(Control),
}

impl WireMessage {
    pub fn type_byte(&self) -> u8 {
        match self {
            WireMessage::Smashed(_) => TYPE_SMASHED,
            WireMessage::Gradient(_) => TYPE_GRADIENT,
            WireMessage::ModelUp(_) => TYPE_MODEL_UP,
            WireMessage::ModelDown(_) => TYPE_MODEL_DOWN,
            WireMessage::Control(_) => TYPE_CONTROL,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            WireMessage::Smashed(_) => "smashed",
            WireMessage::Gradient(_) => "gradient",
            WireMessage::ModelUp(_) => "model-up",
            WireMessage::ModelDown(_) => "model-down",
            WireMessage::Control(_) => "control",
        }
    }

    /// Bytes of tensor values (activations, gradients, model parameters)
    /// carried by the message. The rest of the frame is overhead.
    pub fn value_bytes(&self) -> Result<usize> {
        Ok(match self {
            WireMessage::Smashed(sb) => 4 * sb.activations.numel(),
            WireMessage::Gradient(gb) => 4 * gb.grad.numel(),
            WireMessage::ModelUp(b) | WireMessage::ModelDown(b) => {
                4 * decode_tensors(b)?
                    .iter()
                    .map(|(_, t)| t.numel())
                    .sum::<usize>()
            }
            WireMessage::Control(_) => 0,
        })
    }
}

fn put_ids(out: &mut Vec<u8>, ids: [u32; 3]) {
    for id in ids {
        out.extend_from_slice(&id.to_le_bytes());
    }
}

pub fn encode_payload(msg: &WireMessage) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    match msg {
        WireMessage::Smashed(sb) => {
            put_ids(&mut out, [sb.client_id, sb.epoch, sb.batch_seq]);
            out.extend_from_slice(&(sb.labels.len() as u32).to_le_bytes());
            for &l in &sb.labels {
                let l = u16::try_from(l)
                    .map_err(|_| Error::Wire(format!("label {l} does not fit u16")))?;
                out.extend_from_slice(&l.to_le_bytes());
            }
            write_tensor(&mut out, &sb.activations)?;
        }
        WireMessage::Gradient(gb) => {
            put_ids(&mut out, [gb.client_id, gb.epoch, gb.batch_seq]);
            write_tensor(&mut out, &gb.grad)?;
        }
        WireMessage::ModelUp(b) | WireMessage::ModelDown(b) => out.extend_from_slice(b),
        WireMessage::Control(c) => {
            out.push(c.kind as u8);
            out.extend_from_slice(&c.client_id.to_le_bytes());
            out.extend_from_slice(&c.epoch.to_le_bytes());
            let len = u16::try_from(c.detail.len())
                .map_err(|_| Error::Wire("control detail too long".into()))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(c.detail.as_bytes());
        }
    }
    Ok(out)
}

pub fn encode(msg: &WireMessage) -> Result<Vec<u8>> {
    let payload = encode_payload(msg)?;
    if payload.len() > MAX_PAYLOAD {
        return Err(Error::Wire(format!(
            "payload of {} bytes exceeds limit",
            payload.len()
        )));
    }
    let mut frame = Vec::with_capacity(HEADER_LEN + payload.len());
    frame.extend_from_slice(&(payload.len() as u32).to_be_bytes());
    frame.push(msg.type_byte());
    frame.extend_from_slice(&payload);
    Ok(frame)
}

fn werr(m: &str) -> Error {
    Error::Wire(m.to_string())
}

pub fn decode_payload(msg_type: u8, payload: &[u8]) -> Result<WireMessage> {
    let mut r = Reader::new(payload);
    let ids = |r: &mut Reader| -> Result<[u32; 3]> {
        let mut ids = [0; 3];
        for id in &mut ids {
            *id = r.u32().ok_or_else(|| werr("truncated ids"))?;
        }
        Ok(ids)
    };
    let msg = match msg_type {
        TYPE_SMASHED => {
            let [client_id, epoch, batch_seq] = ids(&mut r)?;
            let n = r.u32().ok_or_else(|| werr("truncated label count"))? as usize;
            if n.checked_mul(2).is_none_or(|b| b > r.remaining()) {
                return Err(werr("label count exceeds payload"));
            }
            let labels = (0..n)
                .map(|_| r.u16().expect("length checked") as usize)
                .collect();
            let activations = r.tensor(werr)?;
            WireMessage::Smashed(
                SmashedBatch::new(client_id, epoch, batch_seq, activations, labels)
                    .map_err(|e| Error::Wire(e.to_string()))?,
            )
        }
        TYPE_GRADIENT => {
            let [client_id, epoch, batch_seq] = ids(&mut r)?;
            let grad: Tensor = r.tensor(werr)?;
            WireMessage::Gradient(GradientBatch {
                client_id,
                epoch,
                batch_seq,
                grad,
            })
        }
        TYPE_MODEL_UP | TYPE_MODEL_DOWN => {
            decode_tensors(payload).map_err(|e| Error::Wire(e.to_string()))?;
            let bytes = payload.to_vec();
            r.bytes(payload.len());
            if msg_type == TYPE_MODEL_UP {
                WireMessage::ModelUp(bytes)
            } else {
                WireMessage::ModelDown(bytes)
            }
        }
        TYPE_CONTROL => {
            let kind = r.u8().ok_or_else(|| werr("truncated control"))?;
            let kind = ControlKind::from_u8(kind)
                .ok_or_else(|| Error::Wire(format!("unknown control kind {kind}")))?;
            let client_id = r.u32().ok_or_else(|| werr("truncated control"))?;
            let epoch = r.u32().ok_or_else(|| werr("truncated control"))?;
            let len = r.u16().ok_or_else(|| werr("truncated control"))? as usize;
            let detail = r
                .bytes(len)
                .ok_or_else(|| werr("truncated control detail"))?;
            let detail = String::from_utf8(detail.to_vec())
                .map_err(|_| werr("control detail is not UTF-8"))?;
            WireMessage::Control(Control {
                kind,
                client_id,
                epoch,
                detail,
            })
        }
        other => return Err(Error::Wire(format!("unknown message type {other}"))),
    };
    if r.remaining() != 0 {
        return Err(Error::Wire(format!(
            "{} trailing payload bytes",
            r.remaining()
        )));
    }
    Ok(msg)
}

/// Decodes exactly one frame occupying all of `frame`.
pub fn decode(frame: &[u8]) -> Result<WireMessage> {
    if frame.len() < HEADER_LEN {
        return Err(werr("truncated frame header"));
    }
    let len = u32::from_be_bytes([frame[0], frame[1], frame[2], frame[3]]) as usize;
    let payload = &frame[HEADER_LEN..];
    if payload.len() < len {
        return Err(Error::Wire(format!(
            "truncated frame: declared {len} payload bytes, got {}",
            payload.len()
        )));
    }
    if payload.len() > len {
        return Err(Error::Wire(format!(
            "{} bytes after the frame",
            payload.len() - len
        )));
    }
    decode_payload(frame[4], payload)
}

/// Reads one whole frame from a stream.
pub fn read_frame<R: Read>(r: &mut R) -> Result<Vec<u8>> {
    let mut header = [0u8; HEADER_LEN];
    r.read_exact(&mut header)?;
    let len = u32::from_be_bytes([header[0], header[1], header[2], header[3]]) as usize;
    if len > MAX_PAYLOAD {
        return Err(Error::Wire(format!("frame declares {len} payload bytes")));
    }
    let mut frame = vec![0u8; HEADER_LEN + len];
    frame[..HEADER_LEN].copy_from_slice(&header);
    r.read_exact(&mut frame[HEADER_LEN..])?;
    Ok(frame)
}

pub fn write_frame<W: Write>(w: &mut W, frame: &[u8]) -> Result<()> {
    w.write_all(frame)?;
    w.flush()?;
    Ok(())
}
