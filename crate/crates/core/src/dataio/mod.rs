//! Feature files, transcript segmentation and the synthetic dataset generator.

pub mod features;
pub mod synth;
pub mod transcript;

use std::collections::HashSet;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use features::{read_features, write_features, FeatureFileHeader, SampleRecord, FEATURE_MAGIC};
pub use synth::{synth_generate, SynthConfig};
pub use transcript::{
    read_manifest, read_transcript, segment_transcript, write_manifest, write_transcript, ClipManifest,
    EventKind, FrameRefs, Segmentation, TranscriptEvent,
};

use crate::error::{Error, Result};
use crate::losses::LabelDistribution;
use crate::numerics::DenseMatrix;

/// A validated set of clips sharing feature dimensions and a label space.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub d_img: usize,
    pub d_txt: usize,
    pub n_labels: usize,
    pub records: Vec<SampleRecord>,
}

impl Dataset {
    pub fn new(d_img: usize, d_txt: usize, n_labels: usize, records: Vec<SampleRecord>) -> Result<Self> {
        let to_u32 = |v: usize| u32::try_from(v).map_err(|_| Error::Config(format!("{v} does not fit in u32")));
        let header = FeatureFileHeader::new(to_u32(records.len())?, to_u32(d_img)?, to_u32(d_txt)?, to_u32(n_labels)?);
        // encoding validates every record against the header
        features::encode_features(&header, &records)?;
        Ok(Self { d_img, d_txt, n_labels, records })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn header(&self) -> FeatureFileHeader {
        FeatureFileHeader::new(self.records.len() as u32, self.d_img as u32, self.d_txt as u32, self.n_labels as u32)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let (h, records) = read_features(path)?;
        Self::new(h.d_img as usize, h.d_txt as usize, h.n_labels as usize, records)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        write_features(path, &self.header(), &self.records)
    }

    pub fn image_matrix(&self, indices: &[usize]) -> DenseMatrix {
        gather(indices, self.d_img, |i| &self.records[i].image_feats)
    }

    pub fn text_matrix(&self, indices: &[usize]) -> DenseMatrix {
        gather(indices, self.d_txt, |i| &self.records[i].text_feats)
    }

    pub fn labels(&self, indices: &[usize]) -> Vec<LabelDistribution> {
        indices
            .iter()
            .map(|&i| {
                LabelDistribution::one_hot(self.records[i].label_index as usize, self.n_labels)
                    .expect("label range validated on construction")
            })
            .collect()
    }

    pub fn all_indices(&self) -> Vec<usize> {
        (0..self.records.len()).collect()
    }

    pub fn label_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_labels];
        for r in &self.records {
            counts[r.label_index as usize] += 1;
        }
        counts
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            d_img: self.d_img,
            d_txt: self.d_txt,
            n_labels: self.n_labels,
            records: indices.iter().map(|&i| self.records[i].clone()).collect(),
        }
    }

    pub fn has_unique_clip_ids(&self) -> bool {
        let mut seen = HashSet::with_capacity(self.records.len());
        self.records.iter().all(|r| seen.insert(r.clip_id))
    }

    /// Stratified split: from each label, `round(fraction * count)` samples (at least
    /// one, and never all of them) go to the held-out side. Returns `(train, held_out)`.
    pub fn split_holdout(&self, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        if !(0.0..1.0).contains(&fraction) {
            return Err(Error::Config(format!("hold-out fraction must lie in [0, 1), got {fraction}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut train = Vec::new();
        let mut held = Vec::new();
        for label in 0..self.n_labels as u32 {
            let mut idx: Vec<usize> = (0..self.records.len()).filter(|&i| self.records[i].label_index == label).collect();
            if idx.is_empty() {
                continue;
            }
            idx.shuffle(&mut rng);
            let k = if fraction == 0.0 || idx.len() < 2 {
                0
            } else {
                ((fraction * idx.len() as f64).round() as usize).clamp(1, idx.len() - 1)
            };
            held.extend_from_slice(&idx[..k]);
            train.extend_from_slice(&idx[k..]);
        }
        train.sort_unstable();
        held.sort_unstable();
        Ok((self.subset(&train), self.subset(&held)))
    }
}

/// Writes `bytes` to a temporary sibling of `path`, then renames it into place so
/// readers never see a partial file.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(match path.extension() {
        Some(ext) => format!("{}.tmp", ext.to_string_lossy()),
        None => "tmp".to_string(),
    });
    let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn gather<'a>(indices: &[usize], width: usize, row: impl Fn(usize) -> &'a Vec<f32>) -> DenseMatrix {
    let mut m = DenseMatrix::zeros(indices.len(), width);
    for (o, &i) in indices.iter().enumerate() {
        for (dst, &src) in m.row_mut(o).iter_mut().zip(row(i)) {
            *dst = src as f64;
        }
    }
    m
}
