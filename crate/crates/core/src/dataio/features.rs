//! Binary feature file.
//!
//! ```text
//! header (24 bytes): "FFCR" | version u32 | n_samples u32 | d_img u32 | d_txt u32 | n_labels u32
//! record:            clip_id u32 | label_index u32 | d_img x f32 | d_txt x f32
//! ```
//!
//! Everything is little-endian.

use std::fs::File;
use std::io::{BufReader, ErrorKind, Read};
use std::path::Path;

use crate::error::{Error, Result};

pub const FEATURE_MAGIC: &[u8; 4] = b"FFCR";
pub const FEATURE_VERSION: u32 = 1;
pub const HEADER_BYTES: u64 = 24;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeatureFileHeader {
    pub version: u32,
    pub n_samples: u32,
    pub d_img: u32,
    pub d_txt: u32,
    pub n_labels: u32,
}

impl FeatureFileHeader {
    pub fn new(n_samples: u32, d_img: u32, d_txt: u32, n_labels: u32) -> Self {
        Self {
            version: FEATURE_VERSION,
            n_samples,
            d_img,
            d_txt,
            n_labels,
        }
    }

    pub fn record_bytes(&self) -> u64 {
        8 + 4 * (self.d_img as u64 + self.d_txt as u64)
    }

    pub fn file_bytes(&self) -> u64 {
        HEADER_BYTES + self.n_samples as u64 * self.record_bytes()
    }
}

/// One clip: its identifier, label and the two feature vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub clip_id: u32,
    pub label_index: u32,
    pub image_feats: Vec<f32>,
    pub text_feats: Vec<f32>,
}

fn check_record(header: &FeatureFileHeader, r: &SampleRecord) -> Result<()> {
    if r.image_feats.len() != header.d_img as usize {
        return Err(Error::dim(format!("clip {} image features", r.clip_id), header.d_img as usize, r.image_feats.len()));
    }
    if r.text_feats.len() != header.d_txt as usize {
        return Err(Error::dim(format!("clip {} text features", r.clip_id), header.d_txt as usize, r.text_feats.len()));
    }
    if r.label_index >= header.n_labels {
        return Err(Error::Config(format!(
            "clip {} has label {} but the header declares {} labels",
            r.clip_id, r.label_index, header.n_labels
        )));
    }
    if r.image_feats.iter().chain(&r.text_feats).any(|v| !v.is_finite()) {
        return Err(Error::Config(format!("clip {} has non-finite features", r.clip_id)));
    }
    Ok(())
}

pub fn encode_features(header: &FeatureFileHeader, records: &[SampleRecord]) -> Result<Vec<u8>> {
    if header.version != FEATURE_VERSION {
        return Err(Error::Config(format!("cannot write feature version {}", header.version)));
    }
    if records.len() != header.n_samples as usize {
        return Err(Error::dim("feature file records", header.n_samples as usize, records.len()));
    }
    let mut out = Vec::with_capacity(header.file_bytes() as usize);
    out.extend_from_slice(FEATURE_MAGIC);
    for v in [header.version, header.n_samples, header.d_img, header.d_txt, header.n_labels] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for r in records {
        check_record(header, r)?;
        out.extend_from_slice(&r.clip_id.to_le_bytes());
        out.extend_from_slice(&r.label_index.to_le_bytes());
        for v in r.image_feats.iter().chain(&r.text_feats) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Writes a feature file; the file only appears at `path` once complete.
pub fn write_features(path: impl AsRef<Path>, header: &FeatureFileHeader, records: &[SampleRecord]) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_features(header, records)?;
    super::write_atomic(path, &bytes)
}

/// Byte reader that tracks its offset for error reporting.
struct OffsetReader<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> OffsetReader<R> {
    fn fill(&mut self, buf: &mut [u8], what: &str) -> Result<()> {
        match self.inner.read_exact(buf) {
            Ok(()) => {
                self.offset += buf.len() as u64;
                Ok(())
            }
            Err(e) if e.kind() == ErrorKind::UnexpectedEof => Err(Error::Format {
                offset: self.offset,
                reason: format!("truncated file: {what} needs {} bytes", buf.len()),
            }),
            Err(e) => Err(Error::Format {
                offset: self.offset,
                reason: format!("read error in {what}: {e}"),
            }),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let mut b = [0u8; 4];
        self.fill(&mut b, what)?;
        Ok(u32::from_le_bytes(b))
    }

    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let start = self.offset;
        let mut raw = vec![0u8; 4 * n];
        self.fill(&mut raw, what)?;
        let values: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Format {
                offset: start + 4 * i as u64,
                reason: format!("non-finite value in {what}"),
            });
        }
        Ok(values)
    }
}

/// Decodes a feature file from any reader. `size_hint` bounds preallocation.
pub fn decode_features<R: Read>(reader: R, size_hint: Option<u64>) -> Result<(FeatureFileHeader, Vec<SampleRecord>)> {
    let mut r = OffsetReader { inner: reader, offset: 0 };
    let mut magic = [0u8; 4];
    r.fill(&mut magic, "magic")?;
    if &magic != FEATURE_MAGIC {
        return Err(Error::Format { offset: 0, reason: "bad magic, expected \"FFCR\"".into() });
    }
    let version = r.u32("version")?;
    if version != FEATURE_VERSION {
        return Err(Error::Format { offset: 4, reason: format!("unsupported version {version}") });
    }
    let n_samples = r.u32("n_samples")?;
    let d_img = r.u32("d_img")?;
    let d_txt = r.u32("d_txt")?;
    let n_labels = r.u32("n_labels")?;
    if n_labels == 0 && n_samples > 0 {
        return Err(Error::Format { offset: 20, reason: "n_labels is 0 but the file holds samples".into() });
    }
    let header = FeatureFileHeader { version, n_samples, d_img, d_txt, n_labels };

    let fits = size_hint.map_or(n_samples as u64, |len| len.saturating_sub(HEADER_BYTES) / header.record_bytes());
    let mut records = Vec::with_capacity(fits.min(n_samples as u64) as usize);
    for i in 0..n_samples {
        let record_start = r.offset;
        let clip_id = r.u32(&format!("record {i} clip_id"))?;
        let label_index = r.u32(&format!("record {i} label_index"))?;
        if label_index >= n_labels {
            return Err(Error::Format {
                offset: record_start + 4,
                reason: format!("record {i} label {label_index} >= n_labels {n_labels}"),
            });
        }
        let image_feats = r.f32s(d_img as usize, &format!("record {i} image features"))?;
        let text_feats = r.f32s(d_txt as usize, &format!("record {i} text features"))?;
        records.push(SampleRecord { clip_id, label_index, image_feats, text_feats });
    }
    let mut extra = [0u8; 1];
    match r.inner.read(&mut extra) {
        Ok(0) => Ok((header, records)),
        Ok(_) => Err(Error::Format {
            offset: r.offset,
            reason: "trailing bytes after the declared records".into(),
        }),
        Err(e) => Err(Error::Format { offset: r.offset, reason: e.to_string() }),
    }
}

pub fn read_features(path: impl AsRef<Path>) -> Result<(FeatureFileHeader, Vec<SampleRecord>)> {
    let path = path.as_ref();
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let len = f.metadata().ok().map(|m| m.len());
    decode_features(BufReader::new(f), len)
}
