//! Plain labelled datasets plus the on-disk format shared by the generators.
//!
//! Binary layout (all integers and floats little-endian):
//!
//! ```text
//! magic "MLDS" | u32 format version | u64 header length | header (UTF-8 JSON)
//! then per sample: u64 label | dim x f64 input | family-specific latent record
//! ```
//!
//! The JSON header echoes the generator configuration so a file is
//! self-describing. The text export writes the same information as a
//! tab-separated table for inspection.

use std::io::{Read, Write};

use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{shape, Error, Result};

pub const DATASET_MAGIC: &[u8; 4] = b"MLDS";
pub const DATASET_FORMAT_VERSION: u32 = 1;

/// Inputs (one row per sample) with integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    inputs: Array2<f64>,
    labels: Vec<usize>,
}

impl Dataset {
    pub fn new(inputs: Array2<f64>, labels: Vec<usize>) -> Result<Self> {
        if inputs.nrows() != labels.len() {
            return shape(format!(
                "{} input rows but {} labels",
                inputs.nrows(),
                labels.len()
            ));
        }
        let inputs = if inputs.is_standard_layout() {
            inputs
        } else {
            inputs.as_standard_layout().into_owned()
        };
        Ok(Self { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs.ncols()
    }

    pub fn inputs(&self) -> ArrayView2<'_, f64> {
        self.inputs.view()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn into_parts(self) -> (Array2<f64>, Vec<usize>) {
        (self.inputs, self.labels)
    }

    pub(crate) fn inputs_mut(&mut self) -> &mut Array2<f64> {
        &mut self.inputs
    }

    /// Rows `idx`, in that order.
    pub fn select(&self, idx: &[usize]) -> Dataset {
        Dataset {
            inputs: self.inputs.select(Axis(0), idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Contiguous slice of rows `[start, end)`.
    pub fn slice(&self, start: usize, end: usize) -> Dataset {
        Dataset {
            inputs: self.inputs.slice(ndarray::s![start..end, ..]).to_owned(),
            labels: self.labels[start..end].to_vec(),
        }
    }

    /// Largest label + 1 (0 for an empty dataset).
    pub fn num_classes(&self) -> usize {
        self.labels.iter().max().map_or(0, |m| m + 1)
    }

    pub fn class_counts(&self, classes: usize) -> Vec<usize> {
        let mut counts = vec![0; classes];
        for &y in &self.labels {
            if y < classes {
                counts[y] += 1;
            }
        }
        counts
    }

    /// First non-finite input, reported as a flat row-major index.
    pub fn check_finite(&self) -> Result<()> {
        check_finite("dataset inputs", self.inputs.view())
    }
}

pub(crate) fn check_finite(what: &'static str, x: ArrayView2<'_, f64>) -> Result<()> {
    match x.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(Error::NonFinite { what, index }),
        None => Ok(()),
    }
}

/// Per-sample latent record of a generator family.
pub trait LatentRecord: Sized {
    /// Family tag written into file headers.
    const FAMILY: &'static str;
    fn encode(&self, out: &mut Vec<u8>);
    fn decode(buf: &mut &[u8]) -> Result<Self>;
    /// One-line human readable rendering for text exports.
    fn to_text(&self) -> String;
}

/// Header of a dataset file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub family: String,
    pub format_version: u32,
    pub num_samples: usize,
    pub dim: usize,
    pub seed: u64,
    pub config: serde_json::Value,
}

pub fn write_binary<W: Write, L: LatentRecord>(
    mut w: W,
    header: &DatasetHeader,
    data: &Dataset,
    latents: &[L],
) -> Result<()> {
    if latents.len() != data.len() {
        return shape("latent record count differs from sample count");
    }
    let head = serde_json::to_vec(header)?;
    w.write_all(DATASET_MAGIC)?;
    w.write_all(&DATASET_FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(head.len() as u64).to_le_bytes())?;
    w.write_all(&head)?;
    let mut buf = Vec::with_capacity(8 * (data.dim() + 16));
    for (i, latent) in latents.iter().enumerate() {
        buf.clear();
        buf.extend_from_slice(&(data.labels[i] as u64).to_le_bytes());
        for v in data.inputs.row(i) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        latent.encode(&mut buf);
        w.write_all(&buf)?;
    }
    Ok(())
}

pub fn read_binary<R: Read, L: LatentRecord>(
    mut r: R,
) -> Result<(DatasetHeader, Dataset, Vec<L>)> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let mut buf: &[u8] = &bytes;
    let magic = take(&mut buf, 4)?;
    if magic != DATASET_MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let version = read_u32(&mut buf)?;
    if version != DATASET_FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported format version {version}")));
    }
    let head_len = read_u64(&mut buf)? as usize;
    let header: DatasetHeader = serde_json::from_slice(take(&mut buf, head_len)?)?;
    if header.family != L::FAMILY {
        return Err(Error::Format(format!(
            "file holds a {} dataset, expected {}",
            header.family,
            L::FAMILY
        )));
    }
    let (m, d) = (header.num_samples, header.dim);
    let mut inputs = Array2::zeros((m, d));
    let mut labels = Vec::with_capacity(m);
    let mut latents = Vec::with_capacity(m);
    for i in 0..m {
        labels.push(read_u64(&mut buf)? as usize);
        for j in 0..d {
            inputs[[i, j]] = read_f64(&mut buf)?;
        }
        latents.push(L::decode(&mut buf)?);
    }
    if !buf.is_empty() {
        return Err(Error::Format("trailing bytes after last record".into()));
    }
    Ok((header, Dataset::new(inputs, labels)?, latents))
}

/// Tab-separated export: `#`-prefixed header lines, then
/// `index  label  inputs(comma separated)  latent`.
pub fn write_text<W: Write, L: LatentRecord>(
    mut w: W,
    header: &DatasetHeader,
    data: &Dataset,
    latents: &[L],
) -> Result<()> {
    writeln!(w, "# {}", serde_json::to_string(header)?)?;
    writeln!(w, "# index\tlabel\tinputs\tlatent")?;
    for (i, latent) in latents.iter().enumerate() {
        let row: Vec<String> = data.inputs.row(i).iter().map(|v| format!("{v:?}")).collect();
        writeln!(w, "{i}\t{}\t{}\t{}", data.labels[i], row.join(","), latent.to_text())?;
    }
    Ok(())
}

pub(crate) fn take<'a>(buf: &mut &'a [u8], n: usize) -> Result<&'a [u8]> {
    if buf.len() < n {
        return Err(Error::Format("unexpected end of data".into()));
    }
    let (head, rest) = buf.split_at(n);
    *buf = rest;
    Ok(head)
}

pub(crate) fn read_u32(buf: &mut &[u8]) -> Result<u32> {
    Ok(u32::from_le_bytes(take(buf, 4)?.try_into().unwrap()))
}

pub(crate) fn read_u64(buf: &mut &[u8]) -> Result<u64> {
    Ok(u64::from_le_bytes(take(buf, 8)?.try_into().unwrap()))
}

pub(crate) fn read_i64(buf: &mut &[u8]) -> Result<i64> {
    Ok(i64::from_le_bytes(take(buf, 8)?.try_into().unwrap()))
}

pub(crate) fn read_f64(buf: &mut &[u8]) -> Result<f64> {
    Ok(f64::from_le_bytes(take(buf, 8)?.try_into().unwrap()))
}
