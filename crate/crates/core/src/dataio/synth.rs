use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use super::{Dataset, SampleRecord};
use crate::error::{Error, Result};

/// Parameters of the synthetic clip generator.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub n_samples: usize,
    pub n_labels: usize,
    pub d_img: usize,
    pub d_txt: usize,
    /// Weight of the label prototype in the text features, in `[0, 1]`.
    pub text_signal: f64,
    /// Weight of the label prototype in the image features, in `[0, 1]`.
    pub image_signal: f64,
    /// Standard deviation of the additive Gaussian noise.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_samples: 500,
            n_labels: 10,
            d_img: 32,
            d_txt: 32,
            text_signal: 0.8,
            image_signal: 0.4,
            noise: 0.1,
            seed: 7,
        }
    }
}

fn unit_direction(d: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

fn sample(
    prototype: &[f64],
    signal: f64,
    noise: &Normal<f64>,
    sigma: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<f32> {
    let other = unit_direction(prototype.len(), rng);
    prototype
        .iter()
        .zip(&other)
        .map(|(&p, &o)| {
            let n = if sigma > 0.0 { noise.sample(rng) } else { 0.0 };
            (signal * p + (1.0 - signal) * o + n) as f32
        })
        .collect()
}

/// Generates clips whose features are `signal * prototype(label) + (1 - signal) *
/// random_direction + N(0, noise^2)` per modality. Labels are balanced, so each of them
/// has at least two samples.
pub fn synth_generate(config: &SynthConfig) -> Result<Dataset> {
    let c = config;
    if c.n_labels == 0 || c.d_img == 0 || c.d_txt == 0 {
        return Err(Error::Config("synthetic dims and label count must be at least 1".into()));
    }
    if c.n_samples < 2 * c.n_labels {
        return Err(Error::Config(format!(
            "need at least {} samples for {} labels, got {}",
            2 * c.n_labels,
            c.n_labels,
            c.n_samples
        )));
    }
    for (name, s) in [("text_signal", c.text_signal), ("image_signal", c.image_signal)] {
        if !(0.0..=1.0).contains(&s) {
            return Err(Error::Config(format!("{name} must lie in [0, 1], got {s}")));
        }
    }
    if !(c.noise >= 0.0) || !c.noise.is_finite() {
        return Err(Error::Config(format!("noise must be a non-negative number, got {}", c.noise)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
    let image_protos: Vec<Vec<f64>> = (0..c.n_labels).map(|_| unit_direction(c.d_img, &mut rng)).collect();
    let text_protos: Vec<Vec<f64>> = (0..c.n_labels).map(|_| unit_direction(c.d_txt, &mut rng)).collect();
    let normal = Normal::new(0.0, c.noise.max(f64::MIN_POSITIVE)).expect("validated sigma");

    let mut labels: Vec<usize> = (0..c.n_samples).map(|i| i % c.n_labels).collect();
    labels.shuffle(&mut rng);
    let records = labels
        .into_iter()
        .enumerate()
        .map(|(i, label)| SampleRecord {
            clip_id: i as u32,
            label_index: label as u32,
            image_feats: sample(&image_protos[label], c.image_signal, &normal, c.noise, &mut rng),
            text_feats: sample(&text_protos[label], c.text_signal, &normal, c.noise, &mut rng),
        })
        .collect();
    Dataset::new(c.d_img, c.d_txt, c.n_labels, records)
}
