//! Embedding-stream dataset file.
//!
//! ```text
//! magic            8 bytes   "RETAEMB\0"
//! version          u32 LE    1
//! header_len       u32 LE
//! header           header_len bytes of UTF-8 JSON (DatasetHeader)
//! text embeddings  C*K*d f32 LE, class-major (class c, prompt k at row c*K + k)
//! records          num_records times:
//!                    id     u64 LE
//!                    label  i32 LE (-1 when unlabeled)
//!                    views  (N+1)*d f32 LE, original view first
//! ```
//!
//! `payload_bytes` in the header counts everything after the header.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{norm, Embedding};
use crate::pipeline::SampleRecord;
use crate::textspace::PromptSet;

pub const MAGIC: [u8; 8] = *b"RETAEMB\0";
pub const FORMAT_VERSION: u32 = 1;

/// Vectors whose norm deviates from one by more than this are renormalized on read.
const RENORM_TOLERANCE: f64 = 1e-6;
/// Renormalizations larger than this are reported.
const WARN_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetHeader {
    pub dim: usize,
    pub classes: usize,
    pub prompts_per_class: usize,
    /// Augmented views per record (N); each record stores N + 1 views.
    pub views: usize,
    pub class_names: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_texts: Option<Vec<Vec<String>>>,
    pub labels_present: bool,
    pub num_records: u64,
    pub payload_bytes: u64,
}

impl DatasetHeader {
    pub fn record_bytes(&self) -> u64 {
        12 + 4 * ((self.views + 1) * self.dim) as u64
    }

    pub fn text_bytes(&self) -> u64 {
        4 * (self.classes * self.prompts_per_class * self.dim) as u64
    }

    pub fn expected_payload(&self) -> u64 {
        self.text_bytes() + self.num_records * self.record_bytes()
    }

    fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.classes == 0 || self.prompts_per_class == 0 {
            return Err(Error::Dataset("header has a zero dimension".into()));
        }
        if self.class_names.len() != self.classes {
            return Err(Error::HeaderPayloadMismatch(format!(
                "{} class names for {} classes",
                self.class_names.len(),
                self.classes
            )));
        }
        if let Some(texts) = &self.prompt_texts {
            if texts.len() != self.classes || texts.iter().any(|t| t.len() != self.prompts_per_class) {
                return Err(Error::HeaderPayloadMismatch("prompt text table shape".into()));
            }
        }
        if self.payload_bytes != self.expected_payload() {
            return Err(Error::HeaderPayloadMismatch(format!(
                "header declares {} payload bytes but d={}, C={}, K={}, N={}, records={} imply {}",
                self.payload_bytes,
                self.dim,
                self.classes,
                self.prompts_per_class,
                self.views,
                self.num_records,
                self.expected_payload()
            )));
        }
        Ok(())
    }
}

/// Builds a header describing `prompts` and `records`.
pub fn header_for(prompts: &PromptSet, records: &[SampleRecord], class_names: Vec<String>) -> Result<DatasetHeader> {
    let views = records.first().map_or(0, |r| r.views.len().saturating_sub(1));
    let mut header = DatasetHeader {
        dim: prompts.dim(),
        classes: prompts.classes(),
        prompts_per_class: prompts.per_class(),
        views,
        class_names,
        prompt_texts: None,
        labels_present: records.iter().any(|r| r.label.is_some()),
        num_records: records.len() as u64,
        payload_bytes: 0,
    };
    header.payload_bytes = header.expected_payload();
    Ok(header)
}

fn write_vector<W: Write>(out: &mut W, v: &[f64]) -> Result<()> {
    for &x in v {
        out.write_all(&(x as f32).to_le_bytes())?;
    }
    Ok(())
}

/// Writes a complete dataset to `out`.
pub fn write_dataset_to<W: Write>(
    out: &mut W,
    header: &DatasetHeader,
    prompts: &PromptSet,
    records: &[SampleRecord],
) -> Result<()> {
    header.validate()?;
    if prompts.dim() != header.dim
        || prompts.classes() != header.classes
        || prompts.per_class() != header.prompts_per_class
    {
        return Err(Error::HeaderPayloadMismatch("prompt set does not match header".into()));
    }
    if records.len() as u64 != header.num_records {
        return Err(Error::HeaderPayloadMismatch(format!(
            "{} records for header count {}",
            records.len(),
            header.num_records
        )));
    }
    let json = serde_json::to_vec(header).map_err(|e| Error::Dataset(e.to_string()))?;
    out.write_all(&MAGIC)?;
    out.write_all(&FORMAT_VERSION.to_le_bytes())?;
    out.write_all(&(json.len() as u32).to_le_bytes())?;
    out.write_all(&json)?;
    for p in prompts.iter() {
        write_vector(out, p.as_slice())?;
    }
    for r in records {
        if r.views.len() != header.views + 1 {
            return Err(Error::HeaderPayloadMismatch(format!(
                "record {} has {} views, header says {}",
                r.id,
                r.views.len(),
                header.views + 1
            )));
        }
        let label = match r.label {
            Some(l) if l >= header.classes => {
                return Err(Error::InvalidClass {
                    class: l,
                    classes: header.classes,
                })
            }
            Some(l) => l as i32,
            None => -1,
        };
        out.write_all(&r.id.to_le_bytes())?;
        out.write_all(&label.to_le_bytes())?;
        for v in &r.views {
            if v.dim() != header.dim {
                return Err(Error::DimensionMismatch {
                    expected: header.dim,
                    actual: v.dim(),
                });
            }
            write_vector(out, v.as_slice())?;
        }
    }
    Ok(())
}

pub fn write_dataset(path: &Path, header: &DatasetHeader, prompts: &PromptSet, records: &[SampleRecord]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    write_dataset_to(&mut out, header, prompts, records)?;
    out.flush()?;
    Ok(())
}

/// Streaming reader: header and prompts are loaded eagerly, records on demand.
pub struct DatasetReader<R> {
    header: DatasetHeader,
    prompts: PromptSet,
    source: R,
    offset: u64,
    expected_len: u64,
    remaining: u64,
    renormalized: usize,
}

impl DatasetReader<BufReader<File>> {
    pub fn open(path: &Path) -> Result<Self> {
        let file = File::open(path)?;
        let len = file.metadata()?.len();
        Self::new(BufReader::new(file), Some(len), path.to_path_buf())
    }
}

fn read_exact_at<R: Read>(source: &mut R, buf: &mut [u8], offset: u64, expected: u64) -> Result<()> {
    source.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::TruncatedPayload { offset, expected },
        _ => Error::Io(e),
    })
}

impl<R: Read> DatasetReader<R> {
    /// `total_len`, when known, is checked against the header before any
    /// payload is read.
    pub fn new(mut source: R, total_len: Option<u64>, origin: PathBuf) -> Result<Self> {
        let mut prefix = [0u8; 16];
        read_exact_at(&mut source, &mut prefix, 0, 16)?;
        if prefix[..8] != MAGIC {
            return Err(Error::BadMagic { path: origin });
        }
        let version = u32::from_le_bytes(prefix[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let header_len = u32::from_le_bytes(prefix[12..16].try_into().expect("4 bytes")) as u64;
        let mut json = vec![0u8; header_len as usize];
        read_exact_at(&mut source, &mut json, 16, 16 + header_len)?;
        let header: DatasetHeader =
            serde_json::from_slice(&json).map_err(|e| Error::Dataset(format!("header: {e}")))?;
        header.validate()?;

        let payload_start = 16 + header_len;
        let expected_len = payload_start + header.payload_bytes;
        if let Some(len) = total_len {
            if len < expected_len {
                return Err(Error::TruncatedPayload {
                    offset: len,
                    expected: expected_len,
                });
            }
            if len > expected_len {
                return Err(Error::HeaderPayloadMismatch(format!(
                    "{} trailing bytes after declared payload",
                    len - expected_len
                )));
            }
        }

        let mut reader = DatasetReader {
            prompts: PromptSet::new(vec![vec![Embedding::basis(1, 0)]])?,
            remaining: header.num_records,
            header,
            source,
            offset: payload_start,
            expected_len,
            renormalized: 0,
        };
        let (classes, k, dim) = (
            reader.header.classes,
            reader.header.prompts_per_class,
            reader.header.dim,
        );
        let mut per_class = Vec::with_capacity(classes);
        for _ in 0..classes {
            let mut list = Vec::with_capacity(k);
            for _ in 0..k {
                list.push(reader.read_vector(dim)?);
            }
            per_class.push(list);
        }
        reader.prompts = PromptSet::new(per_class)?;
        Ok(reader)
    }

    pub fn header(&self) -> &DatasetHeader {
        &self.header
    }

    pub fn prompts(&self) -> &PromptSet {
        &self.prompts
    }

    /// Vectors renormalized so far.
    pub fn renormalized(&self) -> usize {
        self.renormalized
    }

    fn read_bytes<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        read_exact_at(&mut self.source, &mut buf, self.offset, self.expected_len)?;
        self.offset += N as u64;
        Ok(buf)
    }

    fn read_vector(&mut self, dim: usize) -> Result<Embedding> {
        let start = self.offset;
        let mut raw = vec![0u8; 4 * dim];
        read_exact_at(&mut self.source, &mut raw, self.offset, self.expected_len)?;
        self.offset += raw.len() as u64;
        let values: Vec<f64> = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
            .collect();
        let n = norm(&values);
        if !n.is_finite() || n < crate::numeric::ZERO_NORM {
            return Err(Error::Dataset(format!("zero or non-finite vector at byte {start}")));
        }
        let deviation = (n - 1.0).abs();
        if deviation <= RENORM_TOLERANCE {
            return Ok(Embedding::from_unit(values));
        }
        if deviation > WARN_TOLERANCE {
            log::warn!("vector at byte {start} has norm {n:.6}; renormalized");
        }
        self.renormalized += 1;
        Embedding::normalized(values)
    }

    fn read_record(&mut self) -> Result<SampleRecord> {
        let id = u64::from_le_bytes(self.read_bytes::<8>()?);
        let label = i32::from_le_bytes(self.read_bytes::<4>()?);
        let label = match label {
            -1 => None,
            l if l >= 0 && (l as usize) < self.header.classes => Some(l as usize),
            l => {
                return Err(Error::Dataset(format!("record {id}: label {l} out of range")));
            }
        };
        let dim = self.header.dim;
        let views = (0..=self.header.views)
            .map(|_| self.read_vector(dim))
            .collect::<Result<Vec<_>>>()?;
        Ok(SampleRecord { id, views, label })
    }
}

impl<R: Read> Iterator for DatasetReader<R> {
    type Item = Result<SampleRecord>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.remaining == 0 {
            return None;
        }
        self.remaining -= 1;
        let record = self.read_record();
        if record.is_err() {
            self.remaining = 0;
        }
        Some(record)
    }
}

/// Reads a whole dataset: header, prompts, and the record stream.
pub fn read_dataset(path: &Path) -> Result<DatasetReader<BufReader<File>>> {
    DatasetReader::open(path)
}
