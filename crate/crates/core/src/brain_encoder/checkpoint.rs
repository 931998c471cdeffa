//! Versioned binary checkpoint container.
//!
//! Layout (little-endian): magic `MIRC`, version `u8`, `u32` length of a
//! UTF-8 JSON config echo, the JSON bytes, `u32` array count, then per array
//! `u16` name length, name bytes, `u8` rank, `u32` dims, `f64` payload.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{BrainEncoder, ModelConfig};
use crate::feature_store::TargetNorm;
use crate::params::ParamStore;
use crate::{Error, Result};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"MIRC";
pub const CHECKPOINT_VERSION: u8 = 1;

const NORM_MEAN: &str = "target_norm.mean";
const NORM_STD: &str = "target_norm.std";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    model: ModelConfig,
    #[serde(default)]
    meta: serde_json::Value,
}

/// A trained model plus the target normalization it was trained under.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: BrainEncoder,
    pub target_norm: Option<TargetNorm>,
    /// Free-form run metadata (selected epoch, validation score, seed).
    pub meta: serde_json::Value,
}

impl Checkpoint {
    /// Maps normalized predictions back to target units for `subject`.
    pub fn denormalize(&self, subject: usize, pred: &mut Array2<f64>) {
        if let Some(n) = &self.target_norm {
            for mut row in pred.rows_mut() {
                row *= &n.std.row(subject);
                row += &n.mean.row(subject);
            }
        }
    }
}

fn put_array(buf: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f64]) {
    buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
    buf.push(shape.len() as u8);
    for &d in shape {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &x in data {
        buf.extend_from_slice(&x.to_le_bytes());
    }
}

pub fn write_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let header = Header {
        model: ckpt.model.config.clone(),
        meta: ckpt.meta.clone(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut buf = Vec::with_capacity(16 + json.len() + 8 * ckpt.model.num_parameters());
    buf.extend_from_slice(&CHECKPOINT_MAGIC);
    buf.push(CHECKPOINT_VERSION);
    buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&json);
    let extra = if ckpt.target_norm.is_some() { 2 } else { 0 };
    buf.extend_from_slice(&((ckpt.model.params.len() + extra) as u32).to_le_bytes());
    for p in ckpt.model.params.iter() {
        put_array(&mut buf, &p.name, &p.shape, &p.data);
    }
    if let Some(n) = &ckpt.target_norm {
        let shape = [n.mean.nrows(), n.mean.ncols()];
        put_array(&mut buf, NORM_MEAN, &shape, n.mean.as_standard_layout().as_slice().expect("contiguous"));
        put_array(&mut buf, NORM_STD, &shape, n.std.as_standard_layout().as_slice().expect("contiguous"));
    }
    let tmp = path.with_extension("partial");
    fs::write(&tmp, &buf)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Truncated {
                path: self.path.to_path_buf(),
                expected: self.pos + n,
                found: self.bytes.len(),
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    let mut r = Reader { bytes: &bytes, pos: 0, path };
    let magic: [u8; 4] = r.take(4)?.try_into().expect("4 bytes");
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: CHECKPOINT_MAGIC,
            found: magic,
        });
    }
    let version = r.take(1)?[0];
    if version != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch {
            path: path.to_path_buf(),
            found: version,
            supported: CHECKPOINT_VERSION,
        });
    }
    let json_len = r.u32()?;
    let header: Header = serde_json::from_slice(r.take(json_len)?)?;
    let count = r.u32()?;
    let mut model = BrainEncoder::new(header.model, 0)?;
    let mut loaded = ParamStore::new();
    let mut norm_mean = None;
    let mut norm_std = None;
    for _ in 0..count {
        let name_len = u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes")) as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::invalid("checkpoint array name is not UTF-8"))?
            .to_string();
        let rank = r.take(1)?[0] as usize;
        let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let data: Vec<f64> = r
            .take(8 * n)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        match name.as_str() {
            NORM_MEAN | NORM_STD => {
                if rank != 2 {
                    return Err(Error::shape(format!("{name} must be a matrix")));
                }
                let a = Array2::from_shape_vec((shape[0], shape[1]), data).expect("sized from shape");
                if name == NORM_MEAN {
                    norm_mean = Some(a);
                } else {
                    norm_std = Some(a);
                }
            }
            _ => {
                loaded.add(name, &shape, data);
            }
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::invalid(format!(
            "{}: {} trailing bytes",
            path.display(),
            bytes.len() - r.pos
        )));
    }
    model.params.copy_from(&loaded)?;
    let target_norm = match (norm_mean, norm_std) {
        (Some(mean), Some(std)) => Some(TargetNorm { mean, std }),
        (None, None) => None,
        _ => return Err(Error::invalid("checkpoint holds only half of the target normalization")),
    };
    Ok(Checkpoint {
        model,
        target_norm,
        meta: header.meta,
    })
}
