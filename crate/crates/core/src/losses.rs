//! Training losses with gradients with respect to their direct inputs.
//!
//! * semantic loss: mean cross-entropy of the label predictions from both modalities,
//! * modal alignment loss: mean squared gap between the label similarity matrix and
//!   the cross-modal cosine matrix of the embeddings,
//! * embedding loss: weighted sum of the two,
//! * adversarial loss: binary cross-entropy of the modality discriminator with
//!   text labelled 0 and video labelled 1.

use crate::error::{Error, Result};
use crate::numerics::{clamped_ln, cosine, DenseMatrix, LOG_EPS};

/// Probability vector over semantic labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelDistribution(Vec<f64>);

impl LabelDistribution {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
            return Err(Error::Config(format!("label distribution has a negative entry: {values:?}")));
        }
        let sum: f64 = values.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("label distribution sums to {sum}, not 1")));
        }
        Ok(Self(values))
    }

    pub fn one_hot(index: usize, n_labels: usize) -> Result<Self> {
        if index >= n_labels {
            return Err(Error::Config(format!("label {index} out of range for {n_labels} labels")));
        }
        let mut v = vec![0.0; n_labels];
        v[index] = 1.0;
        Ok(Self(v))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// A loss value with one gradient buffer per differentiable input, in argument order.
#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub grads: Vec<DenseMatrix>,
}

/// Semantic deviation: `-(1/n) sum_i sum_c y_ic (ln p_ic(t_i) + ln p_ic(v_i))`.
///
/// Gradients are with respect to `pred_text` and `pred_video`.
pub fn semantic_loss(pred_text: &DenseMatrix, pred_video: &DenseMatrix, labels: &[LabelDistribution]) -> Result<LossValue> {
    pred_text.check_same_shape(pred_video, "semantic loss predictions")?;
    let n = pred_text.rows();
    if labels.len() != n {
        return Err(Error::dim("semantic loss labels", n, labels.len()));
    }
    if n == 0 {
        return Err(Error::Config("semantic loss over an empty batch".into()));
    }
    let inv_n = 1.0 / n as f64;
    let mut value = 0.0;
    let mut g_text = DenseMatrix::zeros(n, pred_text.cols());
    let mut g_video = DenseMatrix::zeros(n, pred_text.cols());
    for (i, label) in labels.iter().enumerate() {
        if label.len() != pred_text.cols() {
            return Err(Error::dim("label distribution", pred_text.cols(), label.len()));
        }
        for (c, &y) in label.values().iter().enumerate() {
            if y == 0.0 {
                continue;
            }
            let pt = pred_text[(i, c)];
            let pv = pred_video[(i, c)];
            value -= y * (clamped_ln(pt) + clamped_ln(pv));
            if pt > LOG_EPS {
                g_text[(i, c)] = -y * inv_n / pt;
            }
            if pv > LOG_EPS {
                g_video[(i, c)] = -y * inv_n / pv;
            }
        }
    }
    Ok(LossValue {
        value: value * inv_n,
        grads: vec![g_text, g_video],
    })
}

/// Label similarity matrix `Sim_L(i, j) = cos(l_i, l_j)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelSimilarity {
    pub matrix: DenseMatrix,
    /// True when some label vector was all-zero (its entries are 0).
    pub degenerate: bool,
}

pub fn similarity_matrix(labels: &[LabelDistribution]) -> Result<LabelSimilarity> {
    let n = labels.len();
    if n == 0 {
        return Err(Error::Config("similarity matrix of zero labels".into()));
    }
    let width = labels[0].len();
    if let Some(l) = labels.iter().find(|l| l.len() != width) {
        return Err(Error::dim("label distribution", width, l.len()));
    }
    let mut matrix = DenseMatrix::zeros(n, n);
    let mut degenerate = false;
    for i in 0..n {
        for j in i..n {
            let c = cosine(labels[i].values(), labels[j].values());
            degenerate |= c.degenerate;
            matrix[(i, j)] = c.value;
            matrix[(j, i)] = c.value;
        }
    }
    Ok(LabelSimilarity { matrix, degenerate })
}

/// Output of [`modal_alignment_loss`]: the loss and the cross-modal cosine matrix
/// `Sim_S(i, j) = cos(s_text_i, s_video_j)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalAlignment {
    pub loss: LossValue,
    pub sim_s: DenseMatrix,
}

/// Modal deviation: `(1/n^2) sum_ij (Sim_L(i, j) - cos(s_text_i, s_video_j))^2`.
///
/// Gradients are with respect to `s_text` and `s_video`.
pub fn modal_alignment_loss(s_text: &DenseMatrix, s_video: &DenseMatrix, sim_l: &DenseMatrix) -> Result<ModalAlignment> {
    s_text.check_same_shape(s_video, "modal alignment embeddings")?;
    let n = s_text.rows();
    if sim_l.shape() != (n, n) {
        return Err(Error::dim("label similarity matrix", n * n, sim_l.rows() * sim_l.cols()));
    }
    if n == 0 {
        return Err(Error::Config("modal alignment loss over an empty batch".into()));
    }
    let unit = |m: &DenseMatrix, which: &str| -> Result<(DenseMatrix, Vec<f64>)> {
        let mut out = m.clone();
        let mut norms = Vec::with_capacity(n);
        for i in 0..n {
            let norm = crate::numerics::norm(m.row(i));
            if !(norm > 0.0) || !norm.is_finite() {
                return Err(Error::DegenerateEmbedding(format!("{which} embedding row {i} has norm {norm}")));
            }
            out.row_mut(i).iter_mut().for_each(|v| *v /= norm);
            norms.push(norm);
        }
        Ok((out, norms))
    };
    let (u_text, n_text) = unit(s_text, "text")?;
    let (u_video, n_video) = unit(s_video, "video")?;
    let sim_s = u_text.matmul_transposed(&u_video)?;

    let scale = 1.0 / (n * n) as f64;
    let mut value = 0.0;
    // dL/dcos(i, j)
    let mut g_cos = DenseMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let d = sim_l[(i, j)] - sim_s[(i, j)];
            value += d * d;
            g_cos[(i, j)] = -2.0 * d * scale;
        }
    }
    // d cos(a, b) / da = (b_hat - cos * a_hat) / |a|
    let mut g_text = g_cos.matmul(&u_video)?;
    let mut g_video = g_cos.transposed_matmul(&u_text)?;
    for i in 0..n {
        let proj_t: f64 = (0..n).map(|j| g_cos[(i, j)] * sim_s[(i, j)]).sum();
        let proj_v: f64 = (0..n).map(|j| g_cos[(j, i)] * sim_s[(j, i)]).sum();
        for (k, g) in g_text.row_mut(i).iter_mut().enumerate() {
            *g = (*g - proj_t * u_text[(i, k)]) / n_text[i];
        }
        for (k, g) in g_video.row_mut(i).iter_mut().enumerate() {
            *g = (*g - proj_v * u_video[(i, k)]) / n_video[i];
        }
    }
    Ok(ModalAlignment {
        loss: LossValue {
            value: value * scale,
            grads: vec![g_text, g_video],
        },
        sim_s,
    })
}

/// `alpha * L_imd + beta * L_imi`. Gradients: the semantic gradients scaled by `alpha`
/// followed by the alignment gradients scaled by `beta`.
pub fn embedding_loss(alpha: f64, beta: f64, semantic: &LossValue, alignment: &LossValue) -> Result<LossValue> {
    if !(alpha >= 0.0) || !(beta >= 0.0) {
        return Err(Error::Config(format!("loss weights must be non-negative, got alpha={alpha}, beta={beta}")));
    }
    let grads = semantic
        .grads
        .iter()
        .map(|g| g.scale(alpha))
        .chain(alignment.grads.iter().map(|g| g.scale(beta)))
        .collect();
    Ok(LossValue {
        value: alpha * semantic.value + beta * alignment.value,
        grads,
    })
}

/// `-(1/n) sum_i [ln(1 - D(s_text_i)) + ln D(s_video_i)]`.
///
/// Gradients are `n x 1` columns with respect to `d_text` and `d_video`.
pub fn adversarial_loss(d_text: &[f64], d_video: &[f64]) -> Result<LossValue> {
    let n = d_text.len();
    if d_video.len() != n {
        return Err(Error::dim("adversarial loss batch", n, d_video.len()));
    }
    if n == 0 {
        return Err(Error::Config("adversarial loss over an empty batch".into()));
    }
    let inv_n = 1.0 / n as f64;
    let mut value = 0.0;
    let mut g_text = vec![0.0; n];
    let mut g_video = vec![0.0; n];
    for i in 0..n {
        let q = 1.0 - d_text[i];
        let p = d_video[i];
        value -= clamped_ln(q) + clamped_ln(p);
        if q > LOG_EPS {
            g_text[i] = inv_n / q;
        }
        if p > LOG_EPS {
            g_video[i] = -inv_n / p;
        }
    }
    Ok(LossValue {
        value: value * inv_n,
        grads: vec![DenseMatrix::column(&g_text), DenseMatrix::column(&g_video)],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn one_hots(classes: &[usize], n_labels: usize) -> Vec<LabelDistribution> {
        classes.iter().map(|&c| LabelDistribution::one_hot(c, n_labels).unwrap()).collect()
    }

    fn random_matrix(rows: usize, cols: usize, rng: &mut impl Rng) -> DenseMatrix {
        DenseMatrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn random_distributions(rows: usize, cols: usize, rng: &mut impl Rng) -> DenseMatrix {
        crate::numerics::softmax_rows(&random_matrix(rows, cols, rng).scale(2.0))
    }

    /// Central differences of `f` w.r.t. every entry of `x`.
    fn numeric_grad(x: &DenseMatrix, f: impl Fn(&DenseMatrix) -> f64) -> DenseMatrix {
        let h = 1e-5;
        let mut g = DenseMatrix::zeros(x.rows(), x.cols());
        for k in 0..x.as_slice().len() {
            let mut p = x.clone();
            p.as_mut_slice()[k] += h;
            let mut m = x.clone();
            m.as_mut_slice()[k] -= h;
            g.as_mut_slice()[k] = (f(&p) - f(&m)) / (2.0 * h);
        }
        g
    }

    fn assert_grad_close(analytic: &DenseMatrix, numeric: &DenseMatrix) {
        for (a, n) in analytic.as_slice().iter().zip(numeric.as_slice()) {
            assert!((a - n).abs() / n.abs().max(1.0) < 1e-4, "{a} vs {n}");
        }
    }

    #[test]
    fn label_distribution_validation() {
        assert!(LabelDistribution::new(vec![0.5, 0.5]).is_ok());
        assert!(LabelDistribution::new(vec![0.5, 0.6]).is_err());
        assert!(LabelDistribution::new(vec![-0.5, 1.5]).is_err());
        assert!(LabelDistribution::one_hot(3, 3).is_err());
    }

    #[test]
    fn semantic_perfect_prediction_is_zero() {
        let labels = one_hots(&[0, 2, 1], 3);
        let p = DenseMatrix::from_rows(&[[1.0, 0.0, 0.0], [0.0, 0.0, 1.0], [0.0, 1.0, 0.0]]).unwrap();
        let l = semantic_loss(&p, &p, &labels).unwrap();
        assert!(l.value.abs() <= 2.0 * (1.0 - LOG_EPS).ln().abs() + 1e-300);
    }

    #[test]
    fn semantic_uniform_is_two_ln_c() {
        for n in [1, 3, 7] {
            let labels = one_hots(&(0..n).map(|i| i % 4).collect::<Vec<_>>(), 4);
            let p = DenseMatrix::filled(n, 4, 0.25);
            let l = semantic_loss(&p, &p, &labels).unwrap();
            assert!((l.value - 2.772588722239781).abs() < 1e-9);
        }
    }

    #[test]
    fn semantic_single_sample() {
        let labels = one_hots(&[0], 2);
        let pt = DenseMatrix::from_rows(&[[0.5, 0.5]]).unwrap();
        let pv = DenseMatrix::from_rows(&[[0.25, 0.75]]).unwrap();
        let l = semantic_loss(&pt, &pv, &labels).unwrap();
        assert!((l.value - 2.0794415416798357).abs() < 1e-12);
    }

    #[test]
    fn semantic_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let labels = one_hots(&[0, 1, 2, 1], 3);
        let pt = random_distributions(4, 3, &mut rng);
        let pv = random_distributions(4, 3, &mut rng);
        let l = semantic_loss(&pt, &pv, &labels).unwrap();
        assert_grad_close(&l.grads[0], &numeric_grad(&pt, |x| semantic_loss(x, &pv, &labels).unwrap().value));
        assert_grad_close(&l.grads[1], &numeric_grad(&pv, |x| semantic_loss(&pt, x, &labels).unwrap().value));
    }

    /// One-parameter logistic toy: p = softmax([w, 0]), label 0. A gradient step on w
    /// must strictly reduce the loss.
    #[test]
    fn semantic_loss_descends_on_logistic_toy() {
        let labels = one_hots(&[0], 2);
        let eval = |w: f64| {
            let p = crate::numerics::softmax_rows(&DenseMatrix::from_rows(&[[w, 0.0]]).unwrap());
            let l = semantic_loss(&p, &p, &labels).unwrap();
            // chain through softmax: dp0/dw = p0 (1 - p0), dp1/dw = -p0 p1
            let g = (l.grads[0][(0, 0)] + l.grads[1][(0, 0)]) * p[(0, 0)] * (1.0 - p[(0, 0)])
                - (l.grads[0][(0, 1)] + l.grads[1][(0, 1)]) * p[(0, 0)] * p[(0, 1)];
            (l.value, g)
        };
        let mut w = -1.0;
        let (mut prev, _) = eval(w);
        for _ in 0..20 {
            let (_, g) = eval(w);
            w -= 0.5 * g;
            let (now, _) = eval(w);
            assert!(now < prev);
            prev = now;
        }
    }

    #[test]
    fn similarity_matrix_examples() {
        let sim = similarity_matrix(&one_hots(&[0, 1, 0, 2], 3)).unwrap();
        let expected = [
            [1.0, 0.0, 1.0, 0.0],
            [0.0, 1.0, 0.0, 0.0],
            [1.0, 0.0, 1.0, 0.0],
            [0.0, 0.0, 0.0, 1.0],
        ];
        for i in 0..4 {
            assert_eq!(sim.matrix.row(i), &expected[i]);
        }
        assert!(!sim.degenerate);

        let single = similarity_matrix(&one_hots(&[1], 2)).unwrap();
        assert_eq!(single.matrix.as_slice(), &[1.0]);

        let soft = vec![
            LabelDistribution::new(vec![0.5, 0.5, 0.0]).unwrap(),
            LabelDistribution::new(vec![1.0, 0.0, 0.0]).unwrap(),
        ];
        let s = similarity_matrix(&soft).unwrap().matrix;
        assert_eq!(s[(0, 1)], 0.7071067811865475);
        assert_eq!(s[(1, 0)], 0.7071067811865475);
    }

    #[test]
    fn alignment_examples() {
        let st = DenseMatrix::from_rows(&[[1.0, 0.0]]).unwrap();
        let sv = DenseMatrix::from_rows(&[[0.0, 1.0]]).unwrap();
        let l = modal_alignment_loss(&st, &sv, &DenseMatrix::filled(1, 1, 1.0)).unwrap();
        assert_eq!(l.loss.value, 1.0);
        assert_eq!(l.sim_s.as_slice(), &[0.0]);

        // Perfect alignment: class-c embeddings are e_c in both modalities.
        let classes = [0, 1, 1, 2, 0];
        let labels = one_hots(&classes, 3);
        let sim_l = similarity_matrix(&labels).unwrap().matrix;
        let emb = DenseMatrix::from_rows(&classes.iter().map(|&c| {
            let mut v = vec![0.0; 3];
            v[c] = 1.0 + c as f64;
            v
        }).collect::<Vec<_>>()).unwrap();
        let l = modal_alignment_loss(&emb, &emb.scale(3.0), &sim_l).unwrap();
        assert!(l.loss.value < 1e-10);
    }

    #[test]
    fn alignment_rejects_zero_rows() {
        let st = DenseMatrix::from_rows(&[[1.0, 0.0], [0.0, 0.0]]).unwrap();
        let err = modal_alignment_loss(&st, &st, &DenseMatrix::identity(2)).unwrap_err();
        assert!(matches!(err, Error::DegenerateEmbedding(_)));
    }

    #[test]
    fn alignment_gradient_matches_finite_differences() {
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let labels = one_hots(&[0, 1, 0, 2, 1], 3);
            let sim_l = similarity_matrix(&labels).unwrap().matrix;
            let st = random_matrix(5, 4, &mut rng);
            let sv = random_matrix(5, 4, &mut rng);
            let l = modal_alignment_loss(&st, &sv, &sim_l).unwrap().loss;
            assert_grad_close(&l.grads[0], &numeric_grad(&st, |x| modal_alignment_loss(x, &sv, &sim_l).unwrap().loss.value));
            assert_grad_close(&l.grads[1], &numeric_grad(&sv, |x| modal_alignment_loss(&st, x, &sim_l).unwrap().loss.value));
        }
    }

    #[test]
    fn embedding_loss_examples() {
        let a = LossValue { value: 0.5, grads: vec![DenseMatrix::filled(1, 1, 1.0)] };
        let b = LossValue { value: 0.25, grads: vec![DenseMatrix::filled(1, 1, 1.0)] };
        assert_eq!(embedding_loss(0.0, 0.0, &a, &b).unwrap().value, 0.0);
        assert_eq!(embedding_loss(1.0, 0.0, &a, &b).unwrap().value, 0.5);
        let c = embedding_loss(1.0, 2.0, &a, &b).unwrap();
        assert_eq!(c.value, 1.0);
        assert_eq!(c.grads[1].as_slice(), &[2.0]);
        assert!(matches!(embedding_loss(-1.0, 1.0, &a, &b), Err(Error::Config(_))));
    }

    #[test]
    fn adversarial_examples() {
        let half = vec![0.5; 6];
        let l = adversarial_loss(&half, &half).unwrap();
        assert!((l.value - 1.3862943611198906).abs() < 1e-9);
        // at D = 0.5 the loss falls when video outputs rise and text outputs fall
        assert!(l.grads[0].as_slice().iter().all(|&g| g > 0.0));
        assert!(l.grads[1].as_slice().iter().all(|&g| g < 0.0));

        let perfect = adversarial_loss(&[1e-12; 3], &[1.0 - 1e-12; 3]).unwrap();
        assert!(perfect.value < 1e-11);

        let eps = 1e-12;
        let inverted = adversarial_loss(&[1.0 - eps], &[eps]).unwrap();
        assert!((inverted.value - 2.0 * (1e12f64).ln()).abs() < 1e-3, "{}", inverted.value);
    }

    #[test]
    fn adversarial_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let dt: Vec<f64> = (0..6).map(|_| rng.random_range(0.05..0.95)).collect();
        let dv: Vec<f64> = (0..6).map(|_| rng.random_range(0.05..0.95)).collect();
        let l = adversarial_loss(&dt, &dv).unwrap();
        let ct = DenseMatrix::column(&dt);
        let cv = DenseMatrix::column(&dv);
        assert_grad_close(&l.grads[0], &numeric_grad(&ct, |x| adversarial_loss(x.as_slice(), &dv).unwrap().value));
        assert_grad_close(&l.grads[1], &numeric_grad(&cv, |x| adversarial_loss(&dt, x.as_slice()).unwrap().value));
    }

    #[test]
    fn adversarial_is_mean_bce() {
        let dt = [0.2, 0.7, 0.4];
        let dv = [0.9, 0.3, 0.6];
        let bce = |p: f64, y: f64| -(y * p.ln() + (1.0 - y) * (1.0 - p).ln());
        let expected: f64 = dt.iter().map(|&p| bce(p, 0.0)).chain(dv.iter().map(|&p| bce(p, 1.0))).sum::<f64>() / 3.0;
        assert!((adversarial_loss(&dt, &dv).unwrap().value - expected).abs() < 1e-12);
    }

    fn brute_force_alignment(st: &DenseMatrix, sv: &DenseMatrix, sim_l: &DenseMatrix) -> f64 {
        let n = st.rows();
        let mut total = 0.0;
        for i in 0..n {
            for j in 0..n {
                let d = sim_l[(i, j)] - cosine(st.row(i), sv.row(j)).value;
                total += d * d;
            }
        }
        total / (n * n) as f64
    }

    proptest! {
        #[test]
        fn alignment_invariances(seed in 0u64..1000, scales in prop::collection::vec(0.1f64..10.0, 6)) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let labels = one_hots(&[0, 1, 2, 0, 1, 2], 3);
            let sim_l = similarity_matrix(&labels).unwrap().matrix;
            let st = random_matrix(6, 3, &mut rng);
            let sv = random_matrix(6, 3, &mut rng);
            let base = modal_alignment_loss(&st, &sv, &sim_l).unwrap().loss.value;
            prop_assert!(base >= 0.0 && base.is_finite());
            prop_assert!((base - brute_force_alignment(&st, &sv, &sim_l)).abs() < 1e-12);

            let mut scaled = st.clone();
            for (i, s) in scales.iter().enumerate() {
                scaled.row_mut(i).iter_mut().for_each(|v| *v *= s);
            }
            let rescaled = modal_alignment_loss(&scaled, &sv, &sim_l).unwrap().loss.value;
            prop_assert!((rescaled - base).abs() < 1e-12);

            let perm = [3usize, 0, 5, 1, 4, 2];
            let plabels: Vec<_> = perm.iter().map(|&i| labels[i].clone()).collect();
            let psim = similarity_matrix(&plabels).unwrap().matrix;
            let permuted = modal_alignment_loss(&st.select_rows(&perm), &sv.select_rows(&perm), &psim).unwrap().loss.value;
            prop_assert!((permuted - base).abs() < 1e-12);
        }

        #[test]
        fn similarity_matches_pairwise_cosine(rows in prop::collection::vec(prop::collection::vec(0.0f64..1.0, 4), 1..6)) {
            let labels: Vec<_> = rows.iter().filter_map(|r| {
                let s: f64 = r.iter().sum();
                (s > 1e-3).then(|| LabelDistribution::new(r.iter().map(|v| v / s).collect()).ok()).flatten()
            }).collect();
            prop_assume!(!labels.is_empty());
            let sim = similarity_matrix(&labels).unwrap().matrix;
            for i in 0..labels.len() {
                for j in 0..labels.len() {
                    prop_assert_eq!(sim[(i, j)], sim[(j, i)]);
                    prop_assert_eq!(sim[(i, j)], cosine(labels[i].values(), labels[j].values()).value);
                }
            }
        }

        #[test]
        fn losses_are_nonnegative(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let labels = one_hots(&[0, 1, 1, 3], 4);
            let pt = random_distributions(4, 4, &mut rng);
            let pv = random_distributions(4, 4, &mut rng);
            prop_assert!(semantic_loss(&pt, &pv, &labels).unwrap().value >= 0.0);
            let dt: Vec<f64> = (0..4).map(|_| rng.random_range(1e-6..1.0 - 1e-6)).collect();
            let dv: Vec<f64> = (0..4).map(|_| rng.random_range(1e-6..1.0 - 1e-6)).collect();
            let adv = adversarial_loss(&dt, &dv).unwrap().value;
            prop_assert!(adv >= 0.0 && adv.is_finite());
        }
    }
}
