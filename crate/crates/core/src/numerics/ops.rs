use super::matrix::{dot, DenseMatrix};

/// Lower clamp applied to every argument of `ln` and to probabilities near 0 or 1.
pub const LOG_EPS: f64 = 1e-12;

/// `ln(max(x, LOG_EPS))`
pub fn clamped_ln(x: f64) -> f64 {
    x.max(LOG_EPS).ln()
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(logits: &DenseMatrix) -> DenseMatrix {
    let mut out = logits.clone();
    for i in 0..out.rows() {
        softmax_in_place(out.row_mut(i));
    }
    out
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Result of a cosine evaluation. `degenerate` is set when either input is the zero
/// vector, in which case `value` is 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cosine {
    pub value: f64,
    pub degenerate: bool,
}

/// Cosine similarity `a.b / (|a| |b|)`, clamped to [-1, 1].
///
/// Panics if the slices differ in length.
pub fn cosine(a: &[f64], b: &[f64]) -> Cosine {
    assert_eq!(a.len(), b.len(), "cosine of vectors with different lengths");
    let aa = dot(a, a);
    let bb = dot(b, b);
    if aa == 0.0 || bb == 0.0 {
        return Cosine {
            value: 0.0,
            degenerate: true,
        };
    }
    // sqrt(aa * bb) rather than sqrt(aa) * sqrt(bb) so that cos(x, x) is exactly 1.
    let value = (dot(a, b) / (aa * bb).sqrt()).clamp(-1.0, 1.0);
    Cosine {
        value,
        degenerate: false,
    }
}
