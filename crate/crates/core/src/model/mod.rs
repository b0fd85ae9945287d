//! The five parameterized functions of the retrieval model: feature fusion, text and
//! video mapping into the common space, the semantic predictor and the modality
//! discriminator.

mod serialize;

use std::fmt;
use std::hash::{Hash, Hasher};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::{
    DenseMatrix, ForwardTrace, HiddenActivation, MlpParams, MlpSpec, Network, OutputActivation,
    LOG_EPS,
};

pub use serialize::MODEL_MAGIC;

/// How image and text features of a clip are combined into one video feature.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FusionVariant {
    /// Two-layer perceptron over the concatenated features.
    ConcatMlp,
    /// `relu(P_img i + P_txt t)`.
    Additive,
    /// `g * P_img i + (1 - g) * P_txt t` with `g = sigmoid(G [i; t])`.
    Gated,
}

impl FusionVariant {
    pub const ALL: [FusionVariant; 3] = [FusionVariant::ConcatMlp, FusionVariant::Additive, FusionVariant::Gated];

    pub fn tag(self) -> u32 {
        match self {
            FusionVariant::ConcatMlp => 0,
            FusionVariant::Additive => 1,
            FusionVariant::Gated => 2,
        }
    }

    pub fn from_tag(tag: u32) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.tag() == tag)
    }
}

impl fmt::Display for FusionVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FusionVariant::ConcatMlp => "concat",
            FusionVariant::Additive => "additive",
            FusionVariant::Gated => "gated",
        })
    }
}

impl FromStr for FusionVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "concat" | "concat_mlp" => Ok(FusionVariant::ConcatMlp),
            "additive" => Ok(FusionVariant::Additive),
            "gated" => Ok(FusionVariant::Gated),
            other => Err(Error::Config(format!("unknown fusion variant {other:?}"))),
        }
    }
}

/// Which clip modalities reach the video path.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum AblationMode {
    #[default]
    Full,
    /// Frames only; the text input of the fusion network is zeroed.
    ImageOnly,
    /// Clip text only; the image input of the fusion network is zeroed.
    TextOnly,
}

impl AblationMode {
    pub fn tag(self) -> u32 {
        match self {
            AblationMode::Full => 0,
            AblationMode::ImageOnly => 1,
            AblationMode::TextOnly => 2,
        }
    }

    pub fn from_tag(tag: u32) -> Option<Self> {
        [AblationMode::Full, AblationMode::ImageOnly, AblationMode::TextOnly]
            .into_iter()
            .find(|v| v.tag() == tag)
    }
}

impl fmt::Display for AblationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AblationMode::Full => "full",
            AblationMode::ImageOnly => "image",
            AblationMode::TextOnly => "text",
        })
    }
}

impl FromStr for AblationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(AblationMode::Full),
            "image" | "image_only" => Ok(AblationMode::ImageOnly),
            "text" | "text_only" => Ok(AblationMode::TextOnly),
            other => Err(Error::Config(format!("unknown ablation mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ModelDims {
    pub d_img: usize,
    pub d_txt: usize,
    /// Width of the fused video feature.
    pub d_v: usize,
    /// Dimension of the common space.
    pub m: usize,
    pub n_labels: usize,
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("d_img", self.d_img),
            ("d_txt", self.d_txt),
            ("d_v", self.d_v),
            ("m", self.m),
            ("n_labels", self.n_labels),
        ];
        for (name, v) in fields {
            if v == 0 {
                return Err(Error::Config(format!("model dimension {name} must be at least 1")));
            }
        }
        Ok(())
    }
}

/// Trace of a fusion forward pass.
#[derive(Debug, Clone)]
pub enum FusionTrace {
    Concat(ForwardTrace),
    Additive {
        image: ForwardTrace,
        text: ForwardTrace,
        summed: DenseMatrix,
    },
    Gated {
        image: ForwardTrace,
        text: ForwardTrace,
        gate: ForwardTrace,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct FfacrModel {
    pub dims: ModelDims,
    pub variant: FusionVariant,
    pub ablation: AblationMode,
    pub hidden_width: usize,
    /// Fusion sub-networks: `[mlp]` for concat, `[image_proj, text_proj]` for additive,
    /// `[image_proj, text_proj, gate]` for gated.
    pub fusion: Vec<Network>,
    pub text_map: Network,
    pub video_map: Network,
    pub predictor: Network,
    pub discriminator: Network,
}

/// Layouts of every network for a given configuration, in block order.
pub(crate) fn canonical_specs(dims: &ModelDims, variant: FusionVariant, hidden_width: usize) -> Result<Vec<MlpSpec>> {
    use HiddenActivation::Relu;
    use OutputActivation::{Linear, Sigmoid, Softmax};
    dims.validate()?;
    if hidden_width == 0 {
        return Err(Error::Config("hidden_width must be at least 1".into()));
    }
    let joint = dims.d_img + dims.d_txt;
    let mut specs = match variant {
        FusionVariant::ConcatMlp => vec![MlpSpec::new(vec![joint, hidden_width, dims.d_v], Relu, Linear)?],
        FusionVariant::Additive => vec![
            MlpSpec::linear(dims.d_img, dims.d_v, Linear)?,
            MlpSpec::linear(dims.d_txt, dims.d_v, Linear)?,
        ],
        FusionVariant::Gated => vec![
            MlpSpec::linear(dims.d_img, dims.d_v, Linear)?,
            MlpSpec::linear(dims.d_txt, dims.d_v, Linear)?,
            MlpSpec::linear(joint, dims.d_v, Sigmoid)?,
        ],
    };
    specs.push(MlpSpec::new(vec![dims.d_txt, hidden_width, dims.m], Relu, Linear)?);
    specs.push(MlpSpec::new(vec![dims.d_v, hidden_width, dims.m], Relu, Linear)?);
    specs.push(MlpSpec::linear(dims.m, dims.n_labels, Softmax)?);
    specs.push(MlpSpec::new(vec![dims.m, dims.m, 1], Relu, Sigmoid)?);
    Ok(specs)
}

/// Randomly initialized model with the default architecture.
pub fn init_model(dims: ModelDims, variant: FusionVariant, hidden_width: usize, seed: u64) -> Result<FfacrModel> {
    let specs = canonical_specs(&dims, variant, hidden_width)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nets: Vec<Network> = specs.into_iter().map(|s| Network::glorot(s, &mut rng)).collect();
    FfacrModel::from_blocks(dims, variant, AblationMode::Full, hidden_width, nets)
}

impl FfacrModel {
    /// Assembles a model from networks given in block order, checking the shape
    /// invariants. Architectures other than the default one are accepted but
    /// cannot be saved.
    pub fn from_blocks(
        dims: ModelDims,
        variant: FusionVariant,
        ablation: AblationMode,
        hidden_width: usize,
        mut nets: Vec<Network>,
    ) -> Result<Self> {
        dims.validate()?;
        let n_fusion = Self::fusion_block_count(variant);
        if nets.len() != n_fusion + 4 {
            return Err(Error::dim("model blocks", n_fusion + 4, nets.len()));
        }
        let discriminator = nets.pop().unwrap();
        let predictor = nets.pop().unwrap();
        let video_map = nets.pop().unwrap();
        let text_map = nets.pop().unwrap();
        let model = Self {
            dims,
            variant,
            ablation,
            hidden_width,
            fusion: nets,
            text_map,
            video_map,
            predictor,
            discriminator,
        };
        model.check_invariants()?;
        Ok(model)
    }

    pub fn with_ablation(mut self, ablation: AblationMode) -> Self {
        self.ablation = ablation;
        self
    }

    pub fn fusion_block_count(variant: FusionVariant) -> usize {
        match variant {
            FusionVariant::ConcatMlp => 1,
            FusionVariant::Additive => 2,
            FusionVariant::Gated => 3,
        }
    }

    pub fn check_invariants(&self) -> Result<()> {
        let d = &self.dims;
        let io = |net: &Network, name: &str, d_in: usize, d_out: usize| -> Result<()> {
            if net.spec.input_dim() != d_in {
                return Err(Error::dim(format!("{name} input"), d_in, net.spec.input_dim()));
            }
            if net.spec.output_dim() != d_out {
                return Err(Error::dim(format!("{name} output"), d_out, net.spec.output_dim()));
            }
            if !net.params.matches(&net.spec) {
                return Err(Error::Config(format!("{name} parameters do not match its layout")));
            }
            Ok(())
        };
        let joint = d.d_img + d.d_txt;
        match (self.variant, self.fusion.as_slice()) {
            (FusionVariant::ConcatMlp, [mlp]) => io(mlp, "fusion mlp", joint, d.d_v)?,
            (FusionVariant::Additive, [pi, pt]) => {
                io(pi, "fusion image projection", d.d_img, d.d_v)?;
                io(pt, "fusion text projection", d.d_txt, d.d_v)?;
            }
            (FusionVariant::Gated, [pi, pt, g]) => {
                io(pi, "fusion image projection", d.d_img, d.d_v)?;
                io(pt, "fusion text projection", d.d_txt, d.d_v)?;
                io(g, "fusion gate", joint, d.d_v)?;
            }
            (v, nets) => {
                return Err(Error::dim(format!("{v} fusion blocks"), Self::fusion_block_count(v), nets.len()))
            }
        }
        io(&self.text_map, "text mapping", d.d_txt, d.m)?;
        io(&self.video_map, "video mapping", d.d_v, d.m)?;
        io(&self.predictor, "semantic predictor", d.m, d.n_labels)?;
        io(&self.discriminator, "discriminator", d.m, 1)?;
        if self.predictor.spec.output_activation != OutputActivation::Softmax {
            return Err(Error::Config("semantic predictor must end in softmax".into()));
        }
        if self.discriminator.spec.output_activation != OutputActivation::Sigmoid {
            return Err(Error::Config("discriminator must end in sigmoid".into()));
        }
        Ok(())
    }

    /// All networks in block order: fusion, text map, video map, predictor, discriminator.
    pub fn blocks(&self) -> Vec<&Network> {
        let mut v: Vec<&Network> = self.fusion.iter().collect();
        v.extend([&self.text_map, &self.video_map, &self.predictor, &self.discriminator]);
        v
    }

    pub fn blocks_mut(&mut self) -> Vec<&mut Network> {
        let mut v: Vec<&mut Network> = self.fusion.iter_mut().collect();
        v.extend([
            &mut self.text_map,
            &mut self.video_map,
            &mut self.predictor,
            &mut self.discriminator,
        ]);
        v
    }

    /// Number of generator blocks (everything except the discriminator).
    pub fn n_generator_blocks(&self) -> usize {
        self.fusion.len() + 3
    }

    pub fn generator_params(&self) -> Vec<MlpParams> {
        let blocks = self.blocks();
        blocks[..blocks.len() - 1].iter().map(|n| n.params.clone()).collect()
    }

    pub fn set_generator_params(&mut self, params: &[MlpParams]) {
        let mut blocks = self.blocks_mut();
        let n = blocks.len() - 1;
        assert_eq!(params.len(), n, "generator block count");
        for (net, p) in blocks[..n].iter_mut().zip(params) {
            net.params = p.clone();
        }
    }

    /// Hash over the exact bit patterns of the given blocks.
    pub fn fingerprint(&self, blocks: std::ops::Range<usize>) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for net in &self.blocks()[blocks] {
            for v in net.params.values() {
                v.to_bits().hash(&mut h);
            }
        }
        h.finish()
    }

    pub fn generator_fingerprint(&self) -> u64 {
        self.fingerprint(0..self.n_generator_blocks())
    }

    pub fn discriminator_fingerprint(&self) -> u64 {
        let n = self.n_generator_blocks();
        self.fingerprint(n..n + 1)
    }

    pub fn is_finite(&self) -> bool {
        self.blocks().iter().all(|n| n.params.is_finite())
    }

    fn masked_inputs(&self, image: &DenseMatrix, text: &DenseMatrix) -> (DenseMatrix, DenseMatrix) {
        match self.ablation {
            AblationMode::Full => (image.clone(), text.clone()),
            AblationMode::ImageOnly => (image.clone(), DenseMatrix::zeros(text.rows(), text.cols())),
            AblationMode::TextOnly => (DenseMatrix::zeros(image.rows(), image.cols()), text.clone()),
        }
    }

    pub fn fuse_forward(&self, image: &DenseMatrix, text: &DenseMatrix) -> Result<(DenseMatrix, FusionTrace)> {
        if image.cols() != self.dims.d_img {
            return Err(Error::dim("image features", self.dims.d_img, image.cols()));
        }
        if text.cols() != self.dims.d_txt {
            return Err(Error::dim("text features", self.dims.d_txt, text.cols()));
        }
        if image.rows() != text.rows() {
            return Err(Error::dim("fusion batch size", image.rows(), text.rows()));
        }
        let (image, text) = self.masked_inputs(image, text);
        match self.fusion.as_slice() {
            [mlp] => {
                let trace = mlp.forward(&image.hconcat(&text)?)?;
                Ok((trace.output().clone(), FusionTrace::Concat(trace)))
            }
            [pi, pt] => {
                let ti = pi.forward(&image)?;
                let tt = pt.forward(&text)?;
                let summed = ti.output().add(tt.output())?;
                let out = summed.map(|v| v.max(0.0));
                Ok((out, FusionTrace::Additive { image: ti, text: tt, summed }))
            }
            [pi, pt, gate] => {
                let ti = pi.forward(&image)?;
                let tt = pt.forward(&text)?;
                let tg = gate.forward(&image.hconcat(&text)?)?;
                let g = tg.output();
                let mut out = ti.output().clone();
                for ((o, &b), &gv) in out.as_mut_slice().iter_mut().zip(tt.output().as_slice()).zip(g.as_slice()) {
                    *o = gv * *o + (1.0 - gv) * b;
                }
                Ok((out, FusionTrace::Gated { image: ti, text: tt, gate: tg }))
            }
            _ => unreachable!("fusion block count checked at construction"),
        }
    }

    /// Parameter gradients of the fusion blocks, given the gradient at the fused output.
    pub fn fuse_backward(&self, trace: &FusionTrace, upstream: &DenseMatrix) -> Result<Vec<MlpParams>> {
        match (trace, self.fusion.as_slice()) {
            (FusionTrace::Concat(t), [mlp]) => Ok(vec![mlp.backward(t, upstream)?.0]),
            (FusionTrace::Additive { image, text, summed }, [pi, pt]) => {
                let mut dz = upstream.clone();
                for (g, &z) in dz.as_mut_slice().iter_mut().zip(summed.as_slice()) {
                    if z <= 0.0 {
                        *g = 0.0;
                    }
                }
                Ok(vec![pi.backward(image, &dz)?.0, pt.backward(text, &dz)?.0])
            }
            (FusionTrace::Gated { image, text, gate }, [pi, pt, gn]) => {
                let g = gate.output();
                let d_img = upstream.hadamard(g)?;
                let d_txt = upstream.zip_map(g, |u, gv| u * (1.0 - gv))?;
                let diff = image.output().sub(text.output())?;
                let d_gate = upstream.hadamard(&diff)?;
                Ok(vec![
                    pi.backward(image, &d_img)?.0,
                    pt.backward(text, &d_txt)?.0,
                    gn.backward(gate, &d_gate)?.0,
                ])
            }
            _ => Err(Error::Config("fusion trace does not match the model's fusion variant".into())),
        }
    }

    /// Fused video features `v = f_F(i, t)`.
    pub fn fuse(&self, image: &DenseMatrix, text: &DenseMatrix) -> Result<DenseMatrix> {
        Ok(self.fuse_forward(image, text)?.0)
    }

    pub fn map_text(&self, text: &DenseMatrix) -> Result<DenseMatrix> {
        self.text_map.apply(text)
    }

    pub fn map_video(&self, fused: &DenseMatrix) -> Result<DenseMatrix> {
        self.video_map.apply(fused)
    }

    /// Video-path embeddings straight from raw clip features.
    pub fn embed_clips(&self, image: &DenseMatrix, text: &DenseMatrix) -> Result<DenseMatrix> {
        self.map_video(&self.fuse(image, text)?)
    }

    /// Per-row label distributions.
    pub fn predict_semantics(&self, embeddings: &DenseMatrix) -> Result<DenseMatrix> {
        self.predictor.apply(embeddings)
    }

    /// Probability that each embedding came from the video path, in `[eps, 1 - eps]`.
    pub fn discriminate(&self, embeddings: &DenseMatrix) -> Result<Vec<f64>> {
        let out = self.discriminator.apply(embeddings)?;
        Ok(out.as_slice().iter().map(|&p| clamp_probability(p)).collect())
    }
}

pub(crate) fn clamp_probability(p: f64) -> f64 {
    p.clamp(LOG_EPS, 1.0 - LOG_EPS)
}
