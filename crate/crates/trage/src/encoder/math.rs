//! Scalar and row-wise numeric kernels shared by the forward and backward
//! passes.

use super::{s, EncoderError, Scalar};
use ndarray::{Array1, Array2, Axis};
use rand_chacha::ChaCha8Rng;
use rand::Rng;

pub(crate) const LN_EPS: f64 = 1e-5;

/// GELU, tanh approximation:
/// `0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))`.
pub fn gelu<F: Scalar>(x: F) -> F {
    let c: F = s(0.797_884_560_802_865_4); // √(2/π)
    let k: F = s(0.044715);
    let half: F = s(0.5);
    half * x * (F::one() + (c * (x + k * x * x * x)).tanh())
}

/// Derivative of the tanh-approximated GELU.
pub fn dgelu<F: Scalar>(x: F) -> F {
    let c: F = s(0.797_884_560_802_865_4);
    let k: F = s(0.044715);
    let half: F = s(0.5);
    let u = c * (x + k * x * x * x);
    let t = u.tanh();
    let du = c * (F::one() + s::<F>(3.0) * k * x * x);
    half * (F::one() + t) + half * x * (F::one() - t * t) * du
}

/// Per-row layer-norm statistics kept for the backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct LnTrace<F> {
    pub xhat: Array2<F>,
    pub inv_std: Array1<F>,
}

/// Row-wise layer norm `y = gain ⊙ (x − μ)/σ + bias` with biased variance.
pub fn layernorm_fwd<F: Scalar>(
    x: &Array2<F>,
    gain: &Array1<F>,
    bias: &Array1<F>,
) -> (Array2<F>, LnTrace<F>) {
    let d = x.ncols();
    let inv_d = F::one() / s::<F>(d as f64);
    let eps: F = s(LN_EPS);
    let mut xhat = x.clone();
    let mut inv_std = Array1::zeros(x.nrows());
    for (mut row, istd) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
        let mean = row.iter().copied().sum::<F>() * inv_d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() * inv_d;
        let is = F::one() / (var + eps).sqrt();
        row.mapv_inplace(|v| (v - mean) * is);
        *istd = is;
    }
    let mut y = xhat.clone();
    for mut row in y.rows_mut() {
        row.zip_mut_with(gain, |v, &g| *v *= g);
        row.zip_mut_with(bias, |v, &b| *v += b);
    }
    (y, LnTrace { xhat, inv_std })
}

/// Backward of [`layernorm_fwd`]: returns `(dx, dgain, dbias)`.
pub fn layernorm_bwd<F: Scalar>(
    trace: &LnTrace<F>,
    gain: &Array1<F>,
    dy: &Array2<F>,
) -> (Array2<F>, Array1<F>, Array1<F>) {
    let d = trace.xhat.ncols();
    let inv_d = F::one() / s::<F>(d as f64);
    let mut dgain = Array1::zeros(d);
    let mut dbias = Array1::zeros(d);
    let mut dx = Array2::zeros(trace.xhat.raw_dim());
    for ((dy_row, xhat_row), (mut dx_row, &istd)) in dy
        .rows()
        .into_iter()
        .zip(trace.xhat.rows())
        .zip(dx.rows_mut().into_iter().zip(trace.inv_std.iter()))
    {
        // accumulate parameter grads
        for i in 0..d {
            dgain[i] += dy_row[i] * xhat_row[i];
            dbias[i] += dy_row[i];
        }
        // dxhat = dy ⊙ gain; dx = istd·(dxhat − mean(dxhat) − xhat·mean(dxhat⊙xhat))
        let mut mean_dxhat = F::zero();
        let mut mean_dxhat_xhat = F::zero();
        for i in 0..d {
            let dxh = dy_row[i] * gain[i];
            mean_dxhat += dxh;
            mean_dxhat_xhat += dxh * xhat_row[i];
        }
        mean_dxhat *= inv_d;
        mean_dxhat_xhat *= inv_d;
        for i in 0..d {
            let dxh = dy_row[i] * gain[i];
            dx_row[i] = istd * (dxh - mean_dxhat - xhat_row[i] * mean_dxhat_xhat);
        }
    }
    (dx, dgain, dbias)
}

/// Sum + mean negative log-likelihood of a logits matrix at the target
/// column of each row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MlmLoss<F> {
    /// Σ −log softmax(logits)[target] over rows.
    pub sum: F,
    /// `sum / rows`, the per-token form the optimizer minimizes.
    pub mean: F,
    pub count: usize,
}

/// Cross-entropy of explicit logits against target ids, computed with a
/// stable log-sum-exp per row.
pub fn mlm_loss<F: Scalar>(logits: &Array2<F>, targets: &[u32]) -> Result<MlmLoss<F>, EncoderError> {
    if targets.is_empty() || logits.nrows() == 0 {
        return Err(EncoderError::EmptyBatch);
    }
    if logits.nrows() != targets.len() {
        return Err(EncoderError::ShapeMismatch(format!(
            "{} logit rows for {} targets",
            logits.nrows(),
            targets.len()
        )));
    }
    let mut sum = F::zero();
    for (row, &target) in logits.rows().into_iter().zip(targets) {
        let target = target as usize;
        if target >= row.len() {
            return Err(EncoderError::ShapeMismatch(format!(
                "target {target} outside vocabulary of {}",
                row.len()
            )));
        }
        let max = row.iter().copied().fold(F::neg_infinity(), F::max);
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<F>().ln();
        sum += lse - row[target];
    }
    Ok(MlmLoss { sum, mean: sum / s(targets.len() as f64), count: targets.len() })
}

/// Column-wise sum of a matrix, used for bias gradients.
pub fn colsum<F: Scalar>(m: &Array2<F>) -> Array1<F> {
    m.sum_axis(Axis(0))
}

/// Fill a tensor with draws from N(0, std²) truncated at ±2σ
/// (Box–Muller with rejection).
pub fn fill_truncated_normal<F: Scalar>(
    values: impl Iterator<Item = impl std::ops::DerefMut<Target = F>>,
    std: f64,
    rng: &mut ChaCha8Rng,
) {
    for mut v in values {
        let z = loop {
            let u1: f64 = 1.0 - rng.gen::<f64>(); // (0, 1]
            let u2: f64 = rng.gen();
            let z = (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
            if z.abs() <= 2.0 {
                break z;
            }
        };
        *v = s(z * std);
    }
}
