use super::mlp::MlpParams;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct BlockReport {
    pub block: usize,
    pub n_params: usize,
    pub max_rel_error: f64,
    /// Parameters whose probe at the full step crossed a kink.
    pub reprobed: usize,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckReport {
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub blocks: Vec<BlockReport>,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.blocks.iter().all(|b| b.passed)
    }
}

/// Compares `analytic` gradients against central differences of `loss` around `params`.
///
/// The error for each parameter is `|analytic - fd| / max(1, |fd|)`; a block passes when
/// its largest error is below `tol`. Every parameter of every block is probed, so keep
/// the networks small.
pub fn finite_diff_check<F>(
    mut loss: F,
    params: &[MlpParams],
    analytic: &[MlpParams],
    h: f64,
    tol: f64,
) -> Result<CheckReport>
where
    F: FnMut(&[MlpParams]) -> f64,
{
    finite_diff_check_piecewise(|p| (loss(p), 0), params, analytic, h, tol)
}

/// Smallest step tried when a probe leaves the current linear piece, as a fraction of `h`.
const MIN_STEP_FRACTION: f64 = 1e-4;

/// [`finite_diff_check`] for piecewise-smooth losses such as rectifier networks.
///
/// `loss` also returns a signature of the piece the point lies on (for example a hash of
/// every rectifier's on/off state). When `x + h` or `x - h` lands on a different piece than
/// `x`, the central difference straddles a kink and says nothing about the derivative, so
/// that parameter is probed again with the step divided by 10 until both points stay on
/// the piece, down to `h * 1e-4`. Re-probed parameters are counted in
/// [`BlockReport::reprobed`].
pub fn finite_diff_check_piecewise<F>(
    mut loss: F,
    params: &[MlpParams],
    analytic: &[MlpParams],
    h: f64,
    tol: f64,
) -> Result<CheckReport>
where
    F: FnMut(&[MlpParams]) -> (f64, u64),
{
    if !(h > 0.0) {
        return Err(Error::Config(format!("finite-difference step must be positive, got {h}")));
    }
    if params.len() != analytic.len() {
        return Err(Error::dim("gradient blocks", params.len(), analytic.len()));
    }
    let mut probe = params.to_vec();
    let (_, base_piece) = loss(&probe);
    let mut blocks = Vec::with_capacity(params.len());
    for (b, grad) in analytic.iter().enumerate() {
        let n = params[b].n_params();
        if grad.n_params() != n {
            return Err(Error::dim(format!("gradient block {b}"), n, grad.n_params()));
        }
        let mut max_err = 0.0f64;
        let mut reprobed = 0;
        for (i, &g) in grad.values().enumerate() {
            let original = *param_mut(&mut probe[b], i);
            let mut step = h;
            let fd = loop {
                *param_mut(&mut probe[b], i) = original + step;
                let (plus, plus_piece) = loss(&probe);
                *param_mut(&mut probe[b], i) = original - step;
                let (minus, minus_piece) = loss(&probe);
                *param_mut(&mut probe[b], i) = original;
                if !plus.is_finite() || !minus.is_finite() {
                    return Err(Error::NumericInstability(format!(
                        "non-finite loss probing block {b} parameter {i}"
                    )));
                }
                let same_piece = plus_piece == base_piece && minus_piece == base_piece;
                if same_piece || step <= h * MIN_STEP_FRACTION {
                    break (plus - minus) / (2.0 * step);
                }
                if step == h {
                    reprobed += 1;
                }
                step /= 10.0;
            };
            max_err = max_err.max((g - fd).abs() / fd.abs().max(1.0));
        }
        blocks.push(BlockReport {
            block: b,
            n_params: n,
            max_rel_error: max_err,
            reprobed,
            passed: max_err < tol,
        });
    }
    Ok(CheckReport {
        max_rel_error: blocks.iter().map(|b| b.max_rel_error).fold(0.0, f64::max),
        tolerance: tol,
        blocks,
    })
}

/// The `i`-th parameter in [`MlpParams::values`] order.
fn param_mut(p: &mut MlpParams, mut i: usize) -> &mut f64 {
    for (w, b) in p.weights.iter_mut().zip(p.biases.iter_mut()) {
        let nw = w.as_slice().len();
        if i < nw {
            return &mut w.as_mut_slice()[i];
        }
        i -= nw;
        if i < b.len() {
            return &mut b[i];
        }
        i -= b.len();
    }
    panic!("parameter index out of range");
}
