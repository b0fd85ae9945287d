//! Alternating adversarial training.
//!
//! Each outer iteration shuffles the data into mini-batches. For every mini-batch the
//! generator (fusion, text/video mapping and semantic predictor) takes `k_inner` SGD
//! steps down the gradient of `L_emb - L_adv`, with the gradient of `L_adv` taken
//! through the frozen discriminator. The discriminator then takes one step down
//! `lambda * grad L_adv` (`L_emb` does not depend on it).

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataio::Dataset;
use crate::error::{Error, Result};
use crate::losses::{
    adversarial_loss, embedding_loss, modal_alignment_loss, semantic_loss, similarity_matrix, LabelDistribution,
};
use crate::model::{init_model, FfacrModel, FusionTrace, ModelDims};
use crate::numerics::{DenseMatrix, ForwardTrace, HiddenActivation, MlpParams, Network, LOG_EPS};

pub use crate::model::{AblationMode, FusionVariant};

/// Stop as soon as `L_emb` moves by less than `rel_tol` (relative) over `window`
/// outer iterations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Plateau {
    pub rel_tol: f64,
    pub window: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Convergence {
    pub max_outer: usize,
    pub plateau: Option<Plateau>,
}

impl Default for Convergence {
    fn default() -> Self {
        Self {
            max_outer: 2000,
            plateau: Some(Plateau { rel_tol: 1e-6, window: 100 }),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub alpha: f64,
    pub beta: f64,
    /// Discriminator step scale.
    pub lambda: f64,
    /// Learning rate.
    pub mu: f64,
    /// Generator steps per mini-batch.
    pub k_inner: usize,
    pub batch_size: usize,
    /// Passes over the data; one pass is one outer iteration.
    pub epochs: usize,
    pub seed: u64,
    pub variant: FusionVariant,
    /// Common-space dimension.
    pub m: usize,
    /// Fused video feature width.
    pub fused_dim: usize,
    pub hidden_width: usize,
    pub ablation: AblationMode,
    pub convergence: Convergence,
    /// Skip every generator step. Used as the control run when measuring how much
    /// adversarial training confuses the discriminator.
    pub freeze_generator: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
            lambda: 1.0,
            mu: 0.01,
            k_inner: 3,
            batch_size: 64,
            epochs: 2000,
            seed: 0,
            variant: FusionVariant::Gated,
            m: 16,
            fused_dim: 32,
            hidden_width: 32,
            ablation: AblationMode::Full,
            convergence: Convergence::default(),
            freeze_generator: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.mu > 0.0) || !self.mu.is_finite() {
            return bad(format!("learning rate must be positive, got {}", self.mu));
        }
        if self.k_inner == 0 {
            return bad("k_inner must be at least 1".into());
        }
        if self.batch_size < 2 {
            return bad(format!("batch_size must be at least 2, got {}", self.batch_size));
        }
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("lambda", self.lambda)] {
            if !(v >= 0.0) || !v.is_finite() {
                return bad(format!("{name} must be a non-negative number, got {v}"));
            }
        }
        if self.m == 0 || self.fused_dim == 0 || self.hidden_width == 0 {
            return bad("m, fused_dim and hidden_width must be at least 1".into());
        }
        Ok(())
    }

    pub fn model_dims(&self, dataset: &Dataset) -> ModelDims {
        ModelDims {
            d_img: dataset.d_img,
            d_txt: dataset.d_txt,
            d_v: self.fused_dim,
            m: self.m,
            n_labels: dataset.n_labels,
        }
    }

    /// Untrained model this configuration starts from.
    pub fn initial_model(&self, dataset: &Dataset) -> Result<FfacrModel> {
        Ok(init_model(self.model_dims(dataset), self.variant, self.hidden_width, self.seed)?.with_ablation(self.ablation))
    }
}

/// A mini-batch of clips.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub image: DenseMatrix,
    pub text: DenseMatrix,
    pub labels: Vec<LabelDistribution>,
}

impl Batch {
    pub fn new(image: DenseMatrix, text: DenseMatrix, labels: Vec<LabelDistribution>) -> Result<Self> {
        if image.rows() != text.rows() || labels.len() != text.rows() {
            return Err(Error::dim("batch rows", image.rows(), text.rows().min(labels.len())));
        }
        Ok(Self { image, text, labels })
    }

    pub fn from_dataset(dataset: &Dataset, indices: &[usize]) -> Self {
        Self {
            image: dataset.image_matrix(indices),
            text: dataset.text_matrix(indices),
            labels: dataset.labels(indices),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn permuted(&self, perm: &[usize]) -> Batch {
        Batch {
            image: self.image.select_rows(perm),
            text: self.text.select_rows(perm),
            labels: perm.iter().map(|&i| self.labels[i].clone()).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub l_imd: f64,
    pub l_imi: f64,
    pub l_emb: f64,
    pub l_adv: f64,
}

impl LossBreakdown {
    /// Generator objective `L_emb - L_adv`.
    pub fn objective(&self) -> f64 {
        self.l_emb - self.l_adv
    }
}

/// Forward through the discriminator, returning clamped probabilities and a mask of
/// entries the clamp left untouched (only those carry gradient).
fn discriminator_forward(disc: &Network, embeddings: &DenseMatrix) -> Result<(ForwardTrace, Vec<f64>, Vec<bool>)> {
    let trace = disc.forward(embeddings)?;
    let raw = trace.output().as_slice();
    let mask = raw.iter().map(|&p| (LOG_EPS..=1.0 - LOG_EPS).contains(&p)).collect();
    let probs = raw.iter().map(|&p| p.clamp(LOG_EPS, 1.0 - LOG_EPS)).collect();
    Ok((trace, probs, mask))
}

fn masked(grad: &DenseMatrix, mask: &[bool], scale: f64) -> DenseMatrix {
    let mut g = grad.scale(scale);
    for (v, &keep) in g.as_mut_slice().iter_mut().zip(mask) {
        if !keep {
            *v = 0.0;
        }
    }
    g
}

fn accuracy(d_text: &[f64], d_video: &[f64]) -> f64 {
    let correct = d_text.iter().filter(|&&p| p < 0.5).count() + d_video.iter().filter(|&&p| p >= 0.5).count();
    correct as f64 / (d_text.len() + d_video.len()) as f64
}

/// Loss values of `model` on `batch`, without gradients.
pub fn evaluate_losses(model: &FfacrModel, batch: &Batch, alpha: f64, beta: f64) -> Result<LossBreakdown> {
    let s_text = model.map_text(&batch.text)?;
    let s_video = model.embed_clips(&batch.image, &batch.text)?;
    let p_text = model.predict_semantics(&s_text)?;
    let p_video = model.predict_semantics(&s_video)?;
    let l_imd = semantic_loss(&p_text, &p_video, &batch.labels)?;
    let sim_l = similarity_matrix(&batch.labels)?.matrix;
    let l_imi = modal_alignment_loss(&s_text, &s_video, &sim_l)?.loss;
    let l_emb = embedding_loss(alpha, beta, &l_imd, &l_imi)?;
    let l_adv = adversarial_loss(&model.discriminate(&s_text)?, &model.discriminate(&s_video)?)?;
    Ok(LossBreakdown {
        l_imd: l_imd.value,
        l_imi: l_imi.value,
        l_emb: l_emb.value,
        l_adv: l_adv.value,
    })
}

/// Gradient of `L_emb - L_adv` with respect to every generator block, in
/// [`FfacrModel::generator_params`] order.
pub fn generator_gradients(model: &FfacrModel, batch: &Batch, alpha: f64, beta: f64) -> Result<(LossBreakdown, Vec<MlpParams>)> {
    if batch.len() < 2 {
        return Err(Error::Config(format!("generator step needs at least 2 samples, got {}", batch.len())));
    }
    let (fused, fusion_trace) = model.fuse_forward(&batch.image, &batch.text)?;
    let t_trace = model.text_map.forward(&batch.text)?;
    let v_trace = model.video_map.forward(&fused)?;
    let s_text = t_trace.output();
    let s_video = v_trace.output();

    let pt_trace = model.predictor.forward(s_text)?;
    let pv_trace = model.predictor.forward(s_video)?;
    let l_imd = semantic_loss(pt_trace.output(), pv_trace.output(), &batch.labels)?;

    let sim_l = similarity_matrix(&batch.labels)?.matrix;
    let l_imi = modal_alignment_loss(s_text, s_video, &sim_l)?.loss;
    let l_emb = embedding_loss(alpha, beta, &l_imd, &l_imi)?;

    let (dt_trace, d_text, mask_t) = discriminator_forward(&model.discriminator, s_text)?;
    let (dv_trace, d_video, mask_v) = discriminator_forward(&model.discriminator, s_video)?;
    let l_adv = adversarial_loss(&d_text, &d_video)?;

    // l_emb.grads: [alpha dP_text, alpha dP_video, beta dS_text, beta dS_video]
    let (g_pred_t, mut ds_text) = model.predictor.backward(&pt_trace, &l_emb.grads[0])?;
    let (g_pred_v, mut ds_video) = model.predictor.backward(&pv_trace, &l_emb.grads[1])?;
    ds_text.add_scaled(&l_emb.grads[2], 1.0)?;
    ds_video.add_scaled(&l_emb.grads[3], 1.0)?;

    // the objective subtracts L_adv
    let (_, adv_t) = model.discriminator.backward(&dt_trace, &masked(&l_adv.grads[0], &mask_t, -1.0))?;
    let (_, adv_v) = model.discriminator.backward(&dv_trace, &masked(&l_adv.grads[1], &mask_v, -1.0))?;
    ds_text.add_scaled(&adv_t, 1.0)?;
    ds_video.add_scaled(&adv_v, 1.0)?;

    let (g_text_map, _) = model.text_map.backward(&t_trace, &ds_text)?;
    let (g_video_map, d_fused) = model.video_map.backward(&v_trace, &ds_video)?;
    let mut grads = model.fuse_backward(&fusion_trace, &d_fused)?;

    let mut g_pred = g_pred_t;
    g_pred.add_scaled(&g_pred_v, 1.0);
    grads.extend([g_text_map, g_video_map, g_pred]);

    let losses = LossBreakdown {
        l_imd: l_imd.value,
        l_imi: l_imi.value,
        l_emb: l_emb.value,
        l_adv: l_adv.value,
    };
    Ok((losses, grads))
}

/// `L_adv`, its gradient with respect to the discriminator parameters, and the
/// discriminator's accuracy on the batch.
pub fn discriminator_gradients(model: &FfacrModel, batch: &Batch) -> Result<(f64, MlpParams, f64)> {
    let s_text = model.map_text(&batch.text)?;
    let s_video = model.embed_clips(&batch.image, &batch.text)?;
    let (dt_trace, d_text, mask_t) = discriminator_forward(&model.discriminator, &s_text)?;
    let (dv_trace, d_video, mask_v) = discriminator_forward(&model.discriminator, &s_video)?;
    let l_adv = adversarial_loss(&d_text, &d_video)?;
    let (mut grad, _) = model.discriminator.backward(&dt_trace, &masked(&l_adv.grads[0], &mask_t, 1.0))?;
    let (g_v, _) = model.discriminator.backward(&dv_trace, &masked(&l_adv.grads[1], &mask_v, 1.0))?;
    grad.add_scaled(&g_v, 1.0);
    Ok((l_adv.value, grad, accuracy(&d_text, &d_video)))
}

/// Outcome of one generator step; the losses are measured before the update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeneratorStep {
    pub losses: LossBreakdown,
}

/// Outcome of one discriminator step, measured before the update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiscriminatorStep {
    pub l_adv: f64,
    pub accuracy: f64,
}

/// One SGD step of fusion, mappings and predictor. The discriminator is untouched.
pub fn generator_step(model: &mut FfacrModel, batch: &Batch, config: &TrainConfig, iteration: usize) -> Result<GeneratorStep> {
    let (losses, grads) = generator_gradients(model, batch, config.alpha, config.beta).map_err(|e| diverged(e, iteration))?;
    if !losses.objective().is_finite() {
        return Err(Error::Diverged {
            iteration,
            detail: format!("non-finite generator objective ({losses:?})"),
        });
    }
    let n = model.n_generator_blocks();
    for (net, g) in model.blocks_mut()[..n].iter_mut().zip(&grads) {
        net.params.add_scaled(g, -config.mu);
    }
    if !model.is_finite() {
        return Err(Error::Diverged { iteration, detail: "non-finite generator parameters after update".into() });
    }
    Ok(GeneratorStep { losses })
}

/// One step of the discriminator down `lambda * grad L_adv`. Generator blocks are untouched.
pub fn discriminator_step(model: &mut FfacrModel, batch: &Batch, config: &TrainConfig, iteration: usize) -> Result<DiscriminatorStep> {
    let (l_adv, grad, accuracy) = discriminator_gradients(model, batch).map_err(|e| diverged(e, iteration))?;
    if !l_adv.is_finite() {
        return Err(Error::Diverged { iteration, detail: "non-finite adversarial loss".into() });
    }
    model.discriminator.params.add_scaled(&grad, -config.mu * config.lambda);
    if !model.discriminator.params.is_finite() {
        return Err(Error::Diverged { iteration, detail: "non-finite discriminator parameters after update".into() });
    }
    Ok(DiscriminatorStep { l_adv, accuracy })
}

/// Degenerate embeddings mid-training mean the run has collapsed.
fn diverged(e: Error, iteration: usize) -> Error {
    match e {
        Error::DegenerateEmbedding(detail) | Error::NumericInstability(detail) => Error::Diverged { iteration, detail },
        other => other,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HistoryEntry {
    pub iteration: usize,
    pub l_imd: f64,
    pub l_imi: f64,
    pub l_emb: f64,
    pub l_adv: f64,
    pub disc_acc: f64,
    pub wall_ms: f64,
}

/// Per-outer-iteration means of the losses seen during training. `l_imd`, `l_imi` and
/// `l_emb` come from the generator steps (or from evaluating each batch once when the
/// generator is frozen); `l_adv` and `disc_acc` from the discriminator steps.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainHistory {
    pub entries: Vec<HistoryEntry>,
}

impl TrainHistory {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn last(&self) -> Option<&HistoryEntry> {
        self.entries.last()
    }

    /// CSV with columns `iter,l_imd,l_imi,l_emb,l_adv,disc_acc`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let to_err = |e: csv::Error| Error::Config(format!("writing history csv: {e}"));
        w.write_record(["iter", "l_imd", "l_imi", "l_emb", "l_adv", "disc_acc"]).map_err(to_err)?;
        for e in &self.entries {
            w.write_record([
                e.iteration.to_string(),
                e.l_imd.to_string(),
                e.l_imi.to_string(),
                e.l_emb.to_string(),
                e.l_adv.to_string(),
                e.disc_acc.to_string(),
            ])
            .map_err(to_err)?;
        }
        w.flush().map_err(|e| Error::Config(format!("writing history csv: {e}")))
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(f))
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: FfacrModel,
    pub history: TrainHistory,
}

/// A failed run: the error and the history up to the failure.
#[derive(Debug, thiserror::Error)]
#[error("{error}")]
pub struct TrainError {
    #[source]
    pub error: Error,
    pub history: TrainHistory,
}

impl From<Error> for TrainError {
    fn from(error: Error) -> Self {
        Self { error, history: TrainHistory::default() }
    }
}

/// Seed offset separating the shuffling stream from parameter initialization.
const SHUFFLE_STREAM: u64 = 0x5eed_5eed;

/// Mini-batches of one epoch; a trailing batch with fewer than two samples is dropped.
pub fn epoch_batches(n: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
        .chunks(batch_size)
        .filter(|c| c.len() >= 2)
        .map(<[usize]>::to_vec)
        .collect()
}

pub fn train(dataset: &Dataset, config: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    if dataset.len() < 2 {
        return Err(Error::Config(format!("training needs at least 2 samples, got {}", dataset.len())).into());
    }
    let mut model = config.initial_model(dataset)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ SHUFFLE_STREAM);
    let mut history = TrainHistory::default();
    let outer = config.epochs.min(config.convergence.max_outer);
    let start = Instant::now();

    for iteration in 0..outer {
        let batches = epoch_batches(dataset.len(), config.batch_size, &mut rng);
        let mut gen_sum = LossBreakdown::default();
        let mut gen_count = 0usize;
        let (mut adv_sum, mut acc_sum, mut disc_count) = (0.0, 0.0, 0usize);
        let mut run = || -> Result<()> {
            for idx in &batches {
                let batch = Batch::from_dataset(dataset, idx);
                let mut record = |l: LossBreakdown| {
                    gen_sum.l_imd += l.l_imd;
                    gen_sum.l_imi += l.l_imi;
                    gen_sum.l_emb += l.l_emb;
                    gen_count += 1;
                };
                if config.freeze_generator {
                    record(evaluate_losses(&model, &batch, config.alpha, config.beta).map_err(|e| diverged(e, iteration))?);
                } else {
                    for _ in 0..config.k_inner {
                        record(generator_step(&mut model, &batch, config, iteration)?.losses);
                    }
                }
                let step = discriminator_step(&mut model, &batch, config, iteration)?;
                adv_sum += step.l_adv;
                acc_sum += step.accuracy;
                disc_count += 1;
            }
            Ok(())
        };
        if let Err(error) = run() {
            return Err(TrainError { error, history });
        }
        let g = gen_count.max(1) as f64;
        let d = disc_count.max(1) as f64;
        history.entries.push(HistoryEntry {
            iteration,
            l_imd: gen_sum.l_imd / g,
            l_imi: gen_sum.l_imi / g,
            l_emb: gen_sum.l_emb / g,
            l_adv: adv_sum / d,
            disc_acc: acc_sum / d,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        });
        // a frozen generator keeps L_emb flat by construction
        if let Some(p) = config.convergence.plateau.filter(|_| !config.freeze_generator) {
            if plateaued(&history, p) {
                log::info!("L_emb plateaued after {} outer iterations", iteration + 1);
                break;
            }
        }
    }
    Ok(TrainOutcome { model, history })
}

fn plateaued(history: &TrainHistory, p: Plateau) -> bool {
    let n = history.entries.len();
    if p.window == 0 || n <= p.window {
        return false;
    }
    let now = history.entries[n - 1].l_emb;
    let then = history.entries[n - 1 - p.window].l_emb;
    (now - then).abs() <= p.rel_tol * then.abs().max(1e-12)
}

/// Hash of every rectifier on/off state and every probability clamp the losses pass
/// through on `batch`. Two parameter settings with the same signature lie on the same
/// smooth piece of the objective.
pub fn piece_signature(model: &FfacrModel, batch: &Batch) -> Result<u64> {
    use std::hash::{Hash, Hasher};

    fn rectifiers(net: &Network, trace: &ForwardTrace, h: &mut impl Hasher) {
        if net.spec.hidden_activation == HiddenActivation::Relu {
            let hidden = &trace.pre_activations[..trace.pre_activations.len() - 1];
            for z in hidden.iter().flat_map(|m| m.as_slice()) {
                (*z > 0.0).hash(h);
            }
        }
    }

    fn clamps(values: &[f64], h: &mut impl Hasher) {
        for &p in values {
            (p < LOG_EPS).hash(h);
            (p > 1.0 - LOG_EPS).hash(h);
        }
    }

    let mut h = std::collections::hash_map::DefaultHasher::new();
    let (fused, fusion) = model.fuse_forward(&batch.image, &batch.text)?;
    match &fusion {
        FusionTrace::Concat(t) => rectifiers(&model.fusion[0], t, &mut h),
        FusionTrace::Additive { image, text, summed } => {
            rectifiers(&model.fusion[0], image, &mut h);
            rectifiers(&model.fusion[1], text, &mut h);
            for z in summed.as_slice() {
                (*z > 0.0).hash(&mut h);
            }
        }
        FusionTrace::Gated { image, text, gate } => {
            for (net, t) in model.fusion.iter().zip([image, text, gate]) {
                rectifiers(net, t, &mut h);
            }
        }
    }
    for (net, input) in [(&model.text_map, &batch.text), (&model.video_map, &fused)] {
        let trace = net.forward(input)?;
        rectifiers(net, &trace, &mut h);
        let embeddings = trace.output();
        clamps(model.predict_semantics(embeddings)?.as_slice(), &mut h);
        let d = model.discriminator.forward(embeddings)?;
        rectifiers(&model.discriminator, &d, &mut h);
        clamps(d.output().as_slice(), &mut h);
    }
    Ok(h.finish())
}

/// Fraction of text embeddings classified as text and video embeddings classified as
/// video over the whole dataset.
pub fn discriminator_accuracy(model: &FfacrModel, dataset: &Dataset) -> Result<f64> {
    let idx = dataset.all_indices();
    let s_text = model.map_text(&dataset.text_matrix(&idx))?;
    let s_video = model.embed_clips(&dataset.image_matrix(&idx), &dataset.text_matrix(&idx))?;
    Ok(accuracy(&model.discriminate(&s_text)?, &model.discriminate(&s_video)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{synth_generate, SynthConfig};
    use crate::model::ModelDims;
    use crate::numerics::{finite_diff_check, MlpSpec, OutputActivation};
    use rand::Rng;

    fn small_data(seed: u64) -> Dataset {
        synth_generate(&SynthConfig { n_samples: 24, n_labels: 3, d_img: 4, d_txt: 5, seed, ..Default::default() }).unwrap()
    }

    fn small_config(variant: FusionVariant) -> TrainConfig {
        TrainConfig { variant, m: 3, fused_dim: 4, hidden_width: 5, batch_size: 8, ..Default::default() }
    }

    fn first_batch(ds: &Dataset, n: usize) -> Batch {
        Batch::from_dataset(ds, &(0..n).collect::<Vec<_>>())
    }

    #[test]
    fn piece_signature_tracks_rectifier_states() {
        let ds = small_data(4);
        let model = small_config(FusionVariant::ConcatMlp).initial_model(&ds).unwrap();
        let batch = first_batch(&ds, 6);
        let base = piece_signature(&model, &batch).unwrap();
        assert_eq!(piece_signature(&model.clone(), &batch).unwrap(), base);
        let mut off = model.clone();
        for b in off.discriminator.params.biases[0].iter_mut() {
            *b = -1e6;
        }
        assert_ne!(piece_signature(&off, &batch).unwrap(), base);
    }

    #[test]
    fn config_validation() {
        let ok = TrainConfig::default();
        assert!(ok.validate().is_ok());
        assert!(TrainConfig { mu: 0.0, ..ok.clone() }.validate().is_err());
        assert!(TrainConfig { k_inner: 0, ..ok.clone() }.validate().is_err());
        assert!(TrainConfig { batch_size: 1, ..ok.clone() }.validate().is_err());
        assert!(TrainConfig { lambda: -1.0, ..ok }.validate().is_err());
    }

    #[test]
    fn generator_gradient_passes_finite_differences() {
        for variant in FusionVariant::ALL {
            for seed in 0..3 {
                let ds = small_data(seed);
                let cfg = TrainConfig { seed, alpha: 0.7, beta: 1.3, ..small_config(variant) };
                let model = cfg.initial_model(&ds).unwrap();
                let batch = first_batch(&ds, 6);
                let (_, grads) = generator_gradients(&model, &batch, cfg.alpha, cfg.beta).unwrap();
                let loss = |p: &[MlpParams]| {
                    let mut m = model.clone();
                    m.set_generator_params(p);
                    evaluate_losses(&m, &batch, cfg.alpha, cfg.beta).unwrap().objective()
                };
                let report = finite_diff_check(loss, &model.generator_params(), &grads, 1e-5, 1e-4).unwrap();
                assert!(report.passed(), "{variant} seed {seed}: {report:?}");
            }
        }
    }

    #[test]
    fn zero_learning_rate_leaves_parameters() {
        let ds = small_data(1);
        let cfg = small_config(FusionVariant::Gated);
        let mut model = cfg.initial_model(&ds).unwrap();
        let before = model.clone();
        let batch = first_batch(&ds, 8);
        let zero = TrainConfig { mu: 0.0, ..cfg.clone() };
        let step = generator_step(&mut model, &batch, &zero, 0).unwrap();
        assert_eq!(model, before);
        assert!(step.losses.objective().is_finite());
        let zero_lambda = TrainConfig { lambda: 0.0, ..cfg };
        discriminator_step(&mut model, &batch, &zero_lambda, 0).unwrap();
        assert_eq!(model, before);
    }

    #[test]
    fn pure_adversarial_generator_step_raises_l_adv() {
        for variant in FusionVariant::ALL {
            let ds = small_data(2);
            let cfg = TrainConfig { alpha: 0.0, beta: 0.0, mu: 1e-4, ..small_config(variant) };
            let mut model = cfg.initial_model(&ds).unwrap();
            let batch = first_batch(&ds, 8);
            let before = evaluate_losses(&model, &batch, 0.0, 0.0).unwrap().l_adv;
            generator_step(&mut model, &batch, &cfg, 0).unwrap();
            let after = evaluate_losses(&model, &batch, 0.0, 0.0).unwrap().l_adv;
            assert!(after >= before, "{variant}: {before} -> {after}");
        }
    }

    #[test]
    fn discriminator_step_does_not_raise_l_adv() {
        let ds = small_data(3);
        let cfg = TrainConfig { mu: 1e-4, ..small_config(FusionVariant::Additive) };
        let mut model = cfg.initial_model(&ds).unwrap();
        let batch = first_batch(&ds, 8);
        let before = evaluate_losses(&model, &batch, 1.0, 1.0).unwrap().l_adv;
        discriminator_step(&mut model, &batch, &cfg, 0).unwrap();
        let after = evaluate_losses(&model, &batch, 1.0, 1.0).unwrap().l_adv;
        assert!(after <= before, "{before} -> {after}");
    }

    #[test]
    fn steps_touch_only_their_own_blocks() {
        let ds = small_data(4);
        let cfg = small_config(FusionVariant::ConcatMlp);
        let mut model = cfg.initial_model(&ds).unwrap();
        let batch = first_batch(&ds, 8);
        let (g0, d0) = (model.generator_fingerprint(), model.discriminator_fingerprint());
        for _ in 0..cfg.k_inner {
            generator_step(&mut model, &batch, &cfg, 0).unwrap();
        }
        assert_eq!(model.discriminator_fingerprint(), d0);
        let g1 = model.generator_fingerprint();
        assert_ne!(g1, g0);
        discriminator_step(&mut model, &batch, &cfg, 0).unwrap();
        assert_eq!(model.generator_fingerprint(), g1);
        assert_ne!(model.discriminator_fingerprint(), d0);
    }

    #[test]
    fn gradients_commute_with_batch_permutation() {
        let ds = small_data(5);
        let cfg = small_config(FusionVariant::Gated);
        let model = cfg.initial_model(&ds).unwrap();
        let batch = first_batch(&ds, 7);
        let perm = [4, 2, 6, 0, 1, 5, 3];
        let shuffled = batch.permuted(&perm);
        let (la, ga) = generator_gradients(&model, &batch, 1.0, 1.0).unwrap();
        let (lb, gb) = generator_gradients(&model, &shuffled, 1.0, 1.0).unwrap();
        assert!((la.objective() - lb.objective()).abs() < 1e-12);
        for (a, b) in ga.iter().zip(&gb) {
            for (x, y) in a.values().zip(b.values()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
        let (_, da, _) = discriminator_gradients(&model, &batch).unwrap();
        let (_, db, _) = discriminator_gradients(&model, &shuffled).unwrap();
        for (x, y) in da.values().zip(db.values()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    /// A single linear discriminator `D(s) = sigmoid(w.s + b)`: the BCE gradient is
    /// `(1/n) sum_i [D(t_i) t_i + (D(v_i) - 1) v_i]` for `w`, likewise for `b`.
    #[test]
    fn discriminator_step_matches_hand_bce_gradient() {
        let ds = small_data(6);
        let cfg = small_config(FusionVariant::ConcatMlp);
        let mut model = cfg.initial_model(&ds).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let spec = MlpSpec::linear(3, 1, OutputActivation::Sigmoid).unwrap();
        model.discriminator = Network::glorot(spec, &mut rng);
        model.discriminator.params.biases[0][0] = 0.2;
        let batch = first_batch(&ds, 5);

        let s_text = model.map_text(&batch.text).unwrap();
        let s_video = model.embed_clips(&batch.image, &batch.text).unwrap();
        let w = model.discriminator.params.weights[0].row(0).to_vec();
        let b = 0.2;
        let d = |s: &[f64]| 1.0 / (1.0 + (-(crate::numerics::dot(&w, s) + b)).exp());
        let mut gw = [0.0; 3];
        let mut gb = 0.0;
        for i in 0..5 {
            let (dt, dv) = (d(s_text.row(i)), d(s_video.row(i)));
            for k in 0..3 {
                gw[k] += (dt * s_text[(i, k)] + (dv - 1.0) * s_video[(i, k)]) / 5.0;
            }
            gb += (dt + dv - 1.0) / 5.0;
        }
        let step_cfg = TrainConfig { mu: 0.1, lambda: 2.0, ..cfg };
        discriminator_step(&mut model, &batch, &step_cfg, 0).unwrap();
        for k in 0..3 {
            let expected = w[k] - 0.2 * gw[k];
            assert!((model.discriminator.params.weights[0][(0, k)] - expected).abs() < 1e-12);
        }
        assert!((model.discriminator.params.biases[0][0] - (b - 0.2 * gb)).abs() < 1e-12);
    }

    #[test]
    fn discriminator_learns_separable_modalities() {
        let ds = small_data(7);
        let cfg = TrainConfig { mu: 0.5, ..small_config(FusionVariant::Additive) };
        let mut model = cfg.initial_model(&ds).unwrap();
        // shift the two modalities apart along the first axis
        model.text_map.params.biases[1][0] = 3.0;
        model.video_map.params.biases[1][0] = -3.0;
        let batch = first_batch(&ds, 24);
        let mut acc = 0.0;
        for _ in 0..500 {
            acc = discriminator_step(&mut model, &batch, &cfg, 0).unwrap().accuracy;
        }
        assert!(acc >= 0.95, "accuracy {acc}");
    }

    /// Independent scalar implementation of the generator objective for a model built
    /// from single linear layers (fusion additive; mappings, predictor and
    /// discriminator linear).
    fn oracle_objective(p: &[Vec<f64>], batch: &Batch, alpha: f64, beta: f64) -> f64 {
        // p = [Pi (2x1 + 2), Pt (2x1 + 2), T (2x1 + 2), V (2x2 + 2), C (2x2 + 2), D (1x2 + 1)]
        let lin = |w: &[f64], b: &[f64], x: &[f64]| -> Vec<f64> {
            let d_in = x.len();
            (0..b.len()).map(|o| (0..d_in).map(|k| w[o * d_in + k] * x[k]).sum::<f64>() + b[o]).collect()
        };
        let split = |v: &Vec<f64>, nw: usize| (v[..nw].to_vec(), v[nw..].to_vec());
        let (piw, pib) = split(&p[0], 2);
        let (ptw, ptb) = split(&p[1], 2);
        let (tw, tb) = split(&p[2], 2);
        let (vw, vb) = split(&p[3], 4);
        let (cw, cb) = split(&p[4], 4);
        let (dw, db) = split(&p[5], 2);
        let n = batch.len();
        let mut st = Vec::new();
        let mut sv = Vec::new();
        for i in 0..n {
            let a = lin(&piw, &pib, batch.image.row(i));
            let c = lin(&ptw, &ptb, batch.text.row(i));
            let fused: Vec<f64> = a.iter().zip(&c).map(|(x, y)| (x + y).max(0.0)).collect();
            st.push(lin(&tw, &tb, batch.text.row(i)));
            sv.push(lin(&vw, &vb, &fused));
        }
        let softmax = |z: Vec<f64>| {
            let m = z.iter().cloned().fold(f64::MIN, f64::max);
            let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
            let s: f64 = e.iter().sum();
            e.into_iter().map(|v| v / s).collect::<Vec<_>>()
        };
        let mut l_imd = 0.0;
        for i in 0..n {
            let label = batch.labels[i].values().iter().position(|&y| y == 1.0).unwrap();
            l_imd -= softmax(lin(&cw, &cb, &st[i]))[label].ln() + softmax(lin(&cw, &cb, &sv[i]))[label].ln();
        }
        l_imd /= n as f64;
        let cos = |a: &[f64], b: &[f64]| {
            let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            d / (a.iter().map(|x| x * x).sum::<f64>().sqrt() * b.iter().map(|x| x * x).sum::<f64>().sqrt())
        };
        let mut l_imi = 0.0;
        for i in 0..n {
            for j in 0..n {
                let sl = cos(batch.labels[i].values(), batch.labels[j].values());
                l_imi += (sl - cos(&st[i], &sv[j])).powi(2);
            }
        }
        l_imi /= (n * n) as f64;
        let disc = |s: &[f64]| 1.0 / (1.0 + (-lin(&dw, &db, s)[0]).exp());
        let l_adv = -(0..n).map(|i| (1.0 - disc(&st[i])).ln() + disc(&sv[i]).ln()).sum::<f64>() / n as f64;
        alpha * l_imd + beta * l_imi - l_adv
    }

    #[test]
    fn hand_sized_generator_step_matches_oracle() {
        let dims = ModelDims { d_img: 1, d_txt: 1, d_v: 2, m: 2, n_labels: 2 };
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut lin = |d_in: usize, d_out: usize, out: OutputActivation| {
            let spec = MlpSpec::new(vec![d_in, d_out], HiddenActivation::Relu, out).unwrap();
            let mut net = Network::glorot(spec, &mut rng);
            for b in net.params.biases[0].iter_mut() {
                *b = rng.random_range(0.1..0.5);
            }
            net
        };
        let nets = vec![
            lin(1, 2, OutputActivation::Linear),
            lin(1, 2, OutputActivation::Linear),
            lin(1, 2, OutputActivation::Linear),
            lin(2, 2, OutputActivation::Linear),
            lin(2, 2, OutputActivation::Softmax),
            lin(2, 1, OutputActivation::Sigmoid),
        ];
        let mut model = FfacrModel::from_blocks(dims, FusionVariant::Additive, AblationMode::Full, 2, nets).unwrap();
        let batch = Batch::new(
            DenseMatrix::from_rows(&[[0.8], [-0.3]]).unwrap(),
            DenseMatrix::from_rows(&[[0.5], [1.2]]).unwrap(),
            vec![LabelDistribution::one_hot(0, 2).unwrap(), LabelDistribution::one_hot(1, 2).unwrap()],
        )
        .unwrap();
        let (alpha, beta, mu) = (0.6, 1.4, 0.05);

        let flat = |m: &FfacrModel| -> Vec<Vec<f64>> { m.blocks().iter().map(|n| n.params.values().copied().collect()).collect() };
        let params = flat(&model);
        let base = oracle_objective(&params, &batch, alpha, beta);
        let analytic_value = evaluate_losses(&model, &batch, alpha, beta).unwrap().objective();
        assert!((base - analytic_value).abs() < 1e-12, "{base} vs {analytic_value}");

        // expected update from central differences of the oracle (generator blocks only)
        let h = 1e-6;
        let mut expected = params.clone();
        for b in 0..5 {
            for k in 0..params[b].len() {
                let mut p = params.clone();
                p[b][k] += h;
                let plus = oracle_objective(&p, &batch, alpha, beta);
                p[b][k] -= 2.0 * h;
                let minus = oracle_objective(&p, &batch, alpha, beta);
                expected[b][k] -= mu * (plus - minus) / (2.0 * h);
            }
        }
        let cfg = TrainConfig { alpha, beta, mu, ..Default::default() };
        generator_step(&mut model, &batch, &cfg, 0).unwrap();
        let updated = flat(&model);
        for b in 0..6 {
            for k in 0..params[b].len() {
                assert!((updated[b][k] - expected[b][k]).abs() < 1e-8, "block {b} param {k}: {} vs {}", updated[b][k], expected[b][k]);
            }
        }
        assert_eq!(updated[5], params[5]);
    }

    #[test]
    fn no_epochs_returns_initial_model() {
        let ds = small_data(8);
        let cfg = TrainConfig { epochs: 0, ..small_config(FusionVariant::Gated) };
        let out = train(&ds, &cfg).unwrap();
        assert_eq!(out.model, cfg.initial_model(&ds).unwrap());
        assert!(out.history.is_empty());
    }

    #[test]
    fn training_is_deterministic() {
        let ds = small_data(9);
        let cfg = TrainConfig { epochs: 5, ..small_config(FusionVariant::Gated) };
        let a = train(&ds, &cfg).unwrap();
        let b = train(&ds, &cfg).unwrap();
        assert_eq!(a.model.to_bytes().unwrap(), b.model.to_bytes().unwrap());
        assert_eq!(a.history.len(), 5);
        assert!(a.model.check_invariants().is_ok() && a.model.is_finite());
    }

    #[test]
    fn training_rejects_tiny_datasets() {
        let ds = small_data(10).subset(&[0]);
        assert!(matches!(train(&ds, &TrainConfig::default()).unwrap_err().error, Error::Config(_)));
    }

    #[test]
    fn divergence_is_reported_with_history() {
        let ds = small_data(11);
        let cfg = TrainConfig { mu: 1e200, epochs: 10, ..small_config(FusionVariant::ConcatMlp) };
        let err = train(&ds, &cfg).unwrap_err();
        assert!(matches!(err.error, Error::Diverged { .. }), "{err:?}");
    }

    #[test]
    fn plateau_stops_training_early() {
        let ds = small_data(12);
        let cfg = TrainConfig {
            epochs: 50,
            mu: 1e-12,
            batch_size: 24,
            convergence: Convergence { max_outer: 50, plateau: Some(Plateau { rel_tol: 1e-3, window: 5 }) },
            ..small_config(FusionVariant::Additive)
        };
        let out = train(&ds, &cfg).unwrap();
        assert!(out.history.len() < 50, "{}", out.history.len());
    }

    #[test]
    fn history_csv_columns() {
        let ds = small_data(13);
        let cfg = TrainConfig { epochs: 2, ..small_config(FusionVariant::Additive) };
        let out = train(&ds, &cfg).unwrap();
        let mut buf = Vec::new();
        out.history.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "iter,l_imd,l_imi,l_emb,l_adv,disc_acc");
        assert_eq!(lines.len(), 3);
        assert!(lines[2].starts_with("1,"));
    }

    #[test]
    fn epoch_batches_drop_singletons() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = epoch_batches(9, 4, &mut rng);
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), [4, 4]);
        let b = epoch_batches(10, 4, &mut rng);
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), [4, 4, 2]);
    }
}
