//! Binary model file.
//!
//! Layout, all integers `u32` little-endian:
//!
//! ```text
//! "FFCM" | version=1 | d_img | d_txt | d_v | m | n_labels | variant | ablation | hidden_width
//! then every parameter as f64 LE, blocks in order (fusion..., text map, video map,
//! predictor, discriminator), each layer as weights row-major followed by its bias.
//! ```

use std::path::Path;

use super::{canonical_specs, AblationMode, FfacrModel, FusionVariant, ModelDims};
use crate::error::{Error, Result};
use crate::numerics::{MlpParams, Network};

pub const MODEL_MAGIC: &[u8; 4] = b"FFCM";
const VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 9 * 4;

impl FfacrModel {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let specs = canonical_specs(&self.dims, self.variant, self.hidden_width)?;
        let blocks = self.blocks();
        if specs.len() != blocks.len() || specs.iter().zip(&blocks).any(|(s, n)| *s != n.spec) {
            return Err(Error::Config(
                "only models with the default architecture can be serialized".into(),
            ));
        }
        let n_params: usize = blocks.iter().map(|n| n.params.n_params()).sum();
        let mut out = Vec::with_capacity(HEADER_LEN + 8 * n_params);
        out.extend_from_slice(MODEL_MAGIC);
        let d = &self.dims;
        for v in [
            VERSION as usize,
            d.d_img,
            d.d_txt,
            d.d_v,
            d.m,
            d.n_labels,
            self.variant.tag() as usize,
            self.ablation.tag() as usize,
            self.hidden_width,
        ] {
            let v = u32::try_from(v).map_err(|_| Error::Config(format!("{v} does not fit in u32")))?;
            out.extend_from_slice(&v.to_le_bytes());
        }
        for net in blocks {
            for v in net.params.values() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::Format {
                offset: bytes.len() as u64,
                reason: format!("model header needs {HEADER_LEN} bytes, file has {}", bytes.len()),
            });
        }
        if &bytes[..4] != MODEL_MAGIC {
            return Err(Error::Format { offset: 0, reason: "bad magic, expected \"FFCM\"".into() });
        }
        let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
        if word(0) != VERSION {
            return Err(Error::Format { offset: 4, reason: format!("unsupported model version {}", word(0)) });
        }
        let dims = ModelDims {
            d_img: word(1) as usize,
            d_txt: word(2) as usize,
            d_v: word(3) as usize,
            m: word(4) as usize,
            n_labels: word(5) as usize,
        };
        let variant = FusionVariant::from_tag(word(6))
            .ok_or_else(|| Error::Format { offset: 28, reason: format!("unknown fusion tag {}", word(6)) })?;
        let ablation = AblationMode::from_tag(word(7))
            .ok_or_else(|| Error::Format { offset: 32, reason: format!("unknown ablation tag {}", word(7)) })?;
        let hidden_width = word(8) as usize;
        let specs = canonical_specs(&dims, variant, hidden_width)
            .map_err(|e| Error::Format { offset: 8, reason: e.to_string() })?;

        let expected: usize = specs.iter().map(|s| MlpParams::zeros(s).n_params()).sum();
        let body = &bytes[HEADER_LEN..];
        if body.len() != expected * 8 {
            let offset = HEADER_LEN + (body.len().min(expected * 8) / 8) * 8;
            return Err(Error::Format {
                offset: offset as u64,
                reason: format!("model body holds {} bytes, header implies {}", body.len(), expected * 8),
            });
        }
        let mut floats = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap()));
        let mut nets = Vec::with_capacity(specs.len());
        for spec in specs {
            let mut params = MlpParams::zeros(&spec);
            for v in params.values_mut() {
                *v = floats.next().expect("length checked above");
            }
            nets.push(Network::new(spec, params)?);
        }
        FfacrModel::from_blocks(dims, variant, ablation, hidden_width, nets)
    }

    /// Writes the model to `path` via a temporary sibling and an atomic rename.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::dataio::write_atomic(path.as_ref(), &self.to_bytes()?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_model;

    fn model(variant: FusionVariant) -> FfacrModel {
        let dims = ModelDims { d_img: 3, d_txt: 4, d_v: 5, m: 2, n_labels: 3 };
        init_model(dims, variant, 6, 17).unwrap().with_ablation(AblationMode::TextOnly)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        for v in FusionVariant::ALL {
            let m = model(v);
            let bytes = m.to_bytes().unwrap();
            let back = FfacrModel::from_bytes(&bytes).unwrap();
            assert_eq!(back.to_bytes().unwrap(), bytes);
            assert_eq!(back, m);
        }
    }

    #[test]
    fn header_layout() {
        let m = model(FusionVariant::Gated);
        let bytes = m.to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"FFCM");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[28..32].try_into().unwrap()), 2);
        let n_params: usize = m.blocks().iter().map(|n| n.params.n_params()).sum();
        assert_eq!(bytes.len(), 40 + 8 * n_params);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let bytes = model(FusionVariant::Additive).to_bytes().unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(FfacrModel::from_bytes(&bad), Err(Error::Format { offset: 0, .. })));
        let mut bad = bytes.clone();
        bad[4] = 7;
        assert!(matches!(FfacrModel::from_bytes(&bad), Err(Error::Format { offset: 4, .. })));
        let truncated = &bytes[..bytes.len() - 3];
        match FfacrModel::from_bytes(truncated) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset as usize, bytes.len() - 8),
            other => panic!("{other:?}"),
        }
        assert!(FfacrModel::from_bytes(&bytes[..10]).is_err());
    }

    #[test]
    fn save_and_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ffcm");
        let m = model(FusionVariant::ConcatMlp);
        m.save(&path).unwrap();
        assert_eq!(FfacrModel::load(&path).unwrap(), m);
        assert!(!dir.path().join("m.ffcm.tmp").exists());
    }
}
