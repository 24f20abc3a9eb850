//! CSV (`label,feature,...`) and IDX loaders and writers.

use std::fs;
use std::path::Path;

use super::Dataset;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Parses `label,f1,f2,...` rows. A first row whose label field is not an
/// integer is taken as a header. The class count is `max label + 1`.
pub fn parse_csv(text: &str) -> Result<Dataset> {
    let mut labels = Vec::new();
    let mut values = Vec::new();
    let mut width = None;
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split(',').map(str::trim);
        let label_field = fields.next().unwrap_or_default();
        let label = match label_field.parse::<usize>() {
            Ok(l) => l,
            Err(_) if i == 0 && labels.is_empty() => continue,
            Err(_) => {
                return Err(Error::Data(format!(
                    "line {}: label `{label_field}` is not a class index",
                    i + 1
                )))
            }
        };
        let start = values.len();
        for f in fields {
            let v: f64 = f
                .parse()
                .map_err(|_| Error::Data(format!("line {}: `{f}` is not a number", i + 1)))?;
            if !v.is_finite() {
                return Err(Error::Data(format!("line {}: non-finite value", i + 1)));
            }
            values.push(v as Scalar);
        }
        let w = values.len() - start;
        match width {
            None if w == 0 => return Err(Error::Data(format!("line {}: no features", i + 1))),
            None => width = Some(w),
            Some(expected) if expected != w => {
                return Err(Error::Data(format!(
                    "line {}: {w} features, expected {expected}",
                    i + 1
                )))
            }
            Some(_) => {}
        }
        labels.push(label);
    }
    let width = width.ok_or_else(|| Error::Data("no samples".into()))?;
    let n_classes = labels.iter().max().map_or(0, |m| m + 1);
    Dataset::new(
        Tensor::new(vec![labels.len(), width], values)?,
        labels,
        n_classes,
    )
}

pub fn load_csv(path: &Path) -> Result<Dataset> {
    parse_csv(&fs::read_to_string(path)?)
}

pub fn write_csv(path: &Path, data: &Dataset) -> Result<()> {
    let mut out = String::new();
    for i in 0..data.len() {
        out.push_str(&data.labels[i].to_string());
        for v in data.features.row(i) {
            out.push(',');
            out.push_str(&v.to_string());
        }
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

const TYPE_U8: u8 = 0x08;
const TYPE_F32: u8 = 0x0D;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IdxFormat {
    /// Bytes; values are scaled by 1/255 on read and by 255 on write.
    U8,
    /// Big-endian 32-bit floats, unscaled.
    F32,
}

fn idx_header(bytes: &[u8], what: &str) -> Result<(u8, Vec<usize>, usize)> {
    let err = |m: &str| Error::Data(format!("{what}: {m}"));
    if bytes.len() < 4 || bytes[0] != 0 || bytes[1] != 0 {
        return Err(err("bad magic number"));
    }
    let ty = bytes[2];
    let rank = bytes[3] as usize;
    if rank == 0 {
        return Err(err("zero dimensions"));
    }
    let header = 4 + 4 * rank;
    if bytes.len() < header {
        return Err(err("truncated header"));
    }
    let dims: Vec<usize> = bytes[4..header]
        .chunks_exact(4)
        .map(|c| u32::from_be_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    Ok((ty, dims, header))
}

/// Decodes an image file and a label file in IDX layout. Two-dimensional
/// samples become single-channel `[1, H, W]` images.
pub fn read_idx(images: &[u8], labels: &[u8]) -> Result<Dataset> {
    let (ty, dims, off) = idx_header(images, "images")?;
    let count = dims[0];
    let numel: usize = dims.iter().product();
    let values: Vec<Scalar> = match ty {
        TYPE_U8 => {
            let body = &images[off..];
            if body.len() != numel {
                return Err(Error::Data(format!(
                    "images: {} data bytes, expected {numel}",
                    body.len()
                )));
            }
            body.iter().map(|&b| b as Scalar / 255.0).collect()
        }
        TYPE_F32 => {
            let body = &images[off..];
            if body.len() != numel * 4 {
                return Err(Error::Data(format!(
                    "images: {} data bytes, expected {}",
                    body.len(),
                    numel * 4
                )));
            }
            body.chunks_exact(4)
                .map(|c| f32::from_be_bytes([c[0], c[1], c[2], c[3]]) as Scalar)
                .collect()
        }
        other => {
            return Err(Error::Data(format!(
                "images: unsupported element type {other:#04x}"
            )))
        }
    };
    let (lty, ldims, loff) = idx_header(labels, "labels")?;
    if lty != TYPE_U8 || ldims.len() != 1 {
        return Err(Error::Data(
            "labels: expected a one-dimensional byte array".into(),
        ));
    }
    if labels.len() - loff != ldims[0] {
        return Err(Error::Data("labels: length does not match header".into()));
    }
    if ldims[0] != count {
        return Err(Error::Data(format!(
            "{} labels for {count} images",
            ldims[0]
        )));
    }
    let labels: Vec<usize> = labels[loff..].iter().map(|&b| b as usize).collect();
    let mut shape = vec![count];
    if dims.len() == 3 {
        shape.push(1);
    }
    shape.extend_from_slice(&dims[1..]);
    if shape.len() == 1 {
        shape.push(1);
    }
    let n_classes = labels.iter().max().map_or(0, |m| m + 1);
    Dataset::new(Tensor::new(shape, values)?, labels, n_classes)
}

pub fn load_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    read_idx(&fs::read(images)?, &fs::read(labels)?)
}

/// Encodes a dataset as (images, labels) IDX byte arrays. Single-channel
/// images are written without the channel dimension.
pub fn write_idx(data: &Dataset, format: IdxFormat) -> Result<(Vec<u8>, Vec<u8>)> {
    let mut dims: Vec<usize> = data.features.shape().to_vec();
    if dims.len() == 4 && dims[1] == 1 {
        dims.remove(1);
    }
    let mut images = vec![0, 0, 0, dims.len() as u8];
    images[2] = match format {
        IdxFormat::U8 => TYPE_U8,
        IdxFormat::F32 => TYPE_F32,
    };
    for d in &dims {
        images.extend_from_slice(&(*d as u32).to_be_bytes());
    }
    for &v in data.features.data() {
        match format {
            IdxFormat::U8 => {
                let b = (v as f64 * 255.0).round();
                if !(0.0..=255.0).contains(&b) {
                    return Err(Error::Data(format!("value {v} outside [0, 1]")));
                }
                images.push(b as u8);
            }
            #[allow(clippy::unnecessary_cast)] // Scalar may be f64
            IdxFormat::F32 => images.extend_from_slice(&(v as f32).to_be_bytes()),
        }
    }
    let mut labels = vec![0, 0, TYPE_U8, 1];
    labels.extend_from_slice(&(data.len() as u32).to_be_bytes());
    for &l in &data.labels {
        labels.push(
            u8::try_from(l).map_err(|_| Error::Data(format!("label {l} does not fit a byte")))?,
        );
    }
    Ok((images, labels))
}
