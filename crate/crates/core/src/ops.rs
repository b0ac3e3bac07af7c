//! Small numeric kernels shared by the model, coders and attribution code.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

/// Dot product accumulated in f64.
pub fn dot64(a: ArrayView1<f32>, b: ArrayView1<f32>) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b.iter()).map(|(&x, &y)| x as f64 * y as f64).sum()
}

/// Row-wise LayerNorm. Returns `(normalized, sigma, output)` where
/// `normalized = (x - mean) / sigma` and `output = gain * normalized + bias`.
pub fn layer_norm(
    x: ArrayView2<f32>,
    gain: ArrayView1<f32>,
    bias: ArrayView1<f32>,
    eps: f32,
    frozen_sigma: Option<ArrayView1<f32>>,
) -> (Array2<f32>, Array1<f32>, Array2<f32>) {
    let (rows, d) = x.dim();
    let mut normalized = Array2::<f32>::zeros((rows, d));
    let mut sigma = Array1::<f32>::zeros(rows);
    for (r, row) in x.outer_iter().enumerate() {
        let mean = row.iter().map(|&v| v as f64).sum::<f64>() / d as f64;
        let s = match frozen_sigma {
            Some(f) => f[r] as f64,
            None => {
                let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / d as f64;
                (var + eps as f64).sqrt()
            }
        };
        sigma[r] = s as f32;
        for (o, &v) in normalized.row_mut(r).iter_mut().zip(row.iter()) {
            *o = ((v as f64 - mean) / s) as f32;
        }
    }
    let output = &normalized * &gain + bias;
    (normalized, sigma, output)
}

const SQRT_2_OVER_PI: f32 = 0.797_884_6;

/// GELU, tanh approximation (GPT-2 variant).
pub fn gelu(x: f32) -> f32 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + 0.044715 * x * x * x)).tanh())
}

pub fn gelu_grad(x: f32) -> f32 {
    let inner = SQRT_2_OVER_PI * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let d_inner = SQRT_2_OVER_PI * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner
}

/// In-place causal softmax: row `t` is normalized over columns `0..=t`,
/// later columns are zeroed.
pub fn causal_softmax(x: &mut Array2<f32>) {
    for (t, mut row) in x.axis_iter_mut(Axis(0)).enumerate() {
        let max = row.iter().take(t + 1).cloned().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0f64;
        for (s, v) in row.iter_mut().enumerate() {
            if s <= t {
                *v = (*v - max).exp();
                sum += *v as f64;
            } else {
                *v = 0.0;
            }
        }
        for v in row.iter_mut().take(t + 1) {
            *v = (*v as f64 / sum) as f32;
        }
    }
}

/// Log-softmax of a single logit row, in f64.
pub fn log_softmax(row: ArrayView1<f32>) -> Vec<f64> {
    let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
    let lse = row.iter().map(|&v| (v as f64 - max).exp()).sum::<f64>().ln() + max;
    row.iter().map(|&v| v as f64 - lse).collect()
}

/// Project `v` onto the mean-zero subspace.
pub fn center(v: &mut Array1<f32>) {
    let mean = v.iter().map(|&x| x as f64).sum::<f64>() / v.len().max(1) as f64;
    v.mapv_inplace(|x| (x as f64 - mean) as f32);
}
