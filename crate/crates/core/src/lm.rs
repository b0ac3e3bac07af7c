//! Next-token training for [`ModelParams`] with hand-written backprop.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{forward_with_cache, LnCache, MlpActivation, ModelParams};
use crate::ops::{gelu_grad, log_softmax};

#[derive(Clone, Debug)]
pub struct LmTrainConfig {
    pub steps: usize,
    /// Sequences per step.
    pub batch_size: usize,
    pub learning_rate: f32,
    /// Final learning rate as a fraction of the initial one (linear decay).
    pub final_lr_fraction: f32,
    pub weight_decay: f32,
    pub seed: u64,
}

impl Default for LmTrainConfig {
    fn default() -> Self {
        LmTrainConfig {
            steps: 2000,
            batch_size: 32,
            learning_rate: 3e-3,
            final_lr_fraction: 0.1,
            weight_decay: 0.0,
            seed: 42,
        }
    }
}

/// Mean next-token cross entropy (nats) over positions `1..T`, plus the
/// number of predictions.
pub fn sequence_loss(logits: ArrayView2<f32>, tokens: &[usize]) -> (f64, usize) {
    let mut total = 0.0;
    for t in 0..tokens.len().saturating_sub(1) {
        total -= log_softmax(logits.row(t))[tokens[t + 1]];
    }
    (total, tokens.len().saturating_sub(1))
}

/// A parameter-shaped buffer with every entry zero (LayerNorm gains
/// included).
pub fn zero_grad(config: &crate::model::ModelConfig) -> Result<ModelParams> {
    let mut g = ModelParams::zeros(config)?;
    for t in g.tensors_mut() {
        t.fill(0.0);
    }
    Ok(g)
}

fn ln_backward(
    d_out: &Array2<f32>,
    ln: &LnCache,
    gain: ArrayView1<f32>,
    g_gain: &mut Array1<f32>,
    g_bias: &mut Array1<f32>,
) -> Array2<f32> {
    *g_gain += &(d_out * &ln.normalized).sum_axis(Axis(0));
    *g_bias += &d_out.sum_axis(Axis(0));
    let d_hat = d_out * &gain;
    let d = d_hat.ncols() as f32;
    let mut dx = Array2::zeros(d_hat.dim());
    for (r, (dh, xh)) in d_hat.outer_iter().zip(ln.normalized.outer_iter()).enumerate() {
        let mean_dh = dh.sum() / d;
        let mean_dhx = dh.dot(&xh) / d;
        let inv = 1.0 / ln.sigma[r];
        for ((o, &a), &b) in dx.row_mut(r).iter_mut().zip(dh.iter()).zip(xh.iter()) {
            *o = inv * (a - mean_dh - b * mean_dhx);
        }
    }
    dx
}

/// Summed cross entropy over the sequence and its gradient, each scaled by
/// `scale`.
pub fn loss_and_grad(params: &ModelParams, tokens: &[usize], scale: f32) -> Result<(f64, ModelParams)> {
    let (_, cache) = forward_with_cache(params, tokens)?;
    let cfg = &params.config;
    let n = tokens.len();
    let mut g = zero_grad(cfg)?;

    let mut dlogits = Array2::<f32>::zeros(cache.logits.dim());
    let mut loss = 0.0f64;
    for t in 0..n.saturating_sub(1) {
        let lp = log_softmax(cache.logits.row(t));
        let target = tokens[t + 1];
        loss -= lp[target];
        for (v, d) in dlogits.row_mut(t).iter_mut().enumerate() {
            let p = lp[v].exp() as f32;
            *d = scale * (p - if v == target { 1.0 } else { 0.0 });
        }
    }

    g.w_u = cache.ln_final.output.t().dot(&dlogits);
    let d_final = dlogits.dot(&params.w_u.t());
    let mut dx = ln_backward(
        &d_final,
        &cache.ln_final,
        params.ln_final.gain.view(),
        &mut g.ln_final.gain,
        &mut g.ln_final.bias,
    );

    let inv_sqrt = 1.0 / (cfg.d_head as f32).sqrt();
    for l in (0..cfg.n_layers).rev() {
        let lc = &cache.layers[l];
        let lp = &params.layers[l];
        let gl = &mut g.layers[l];

        // MLP
        let (pre, post) = lc.mlp_hidden.as_ref().expect("plain forward runs the MLP");
        gl.mlp.b_out = dx.sum_axis(Axis(0));
        gl.mlp.w_out = post.t().dot(&dx);
        let mut d_pre = dx.dot(&lp.mlp.w_out.t());
        match cfg.activation {
            MlpActivation::Relu => d_pre.zip_mut_with(pre, |d, &p| {
                if p <= 0.0 {
                    *d = 0.0
                }
            }),
            MlpActivation::Gelu => d_pre.zip_mut_with(pre, |d, &p| *d *= gelu_grad(p)),
        }
        gl.mlp.w_in = lc.mlp_in.t().dot(&d_pre);
        gl.mlp.b_in = d_pre.sum_axis(Axis(0));
        let d_m = d_pre.dot(&lp.mlp.w_in.t());
        let d_mid = &dx + &ln_backward(&d_m, &lc.ln2, lp.ln2.gain.view(), &mut gl.ln2.gain, &mut gl.ln2.bias);

        // attention
        let a = &lc.ln1.output;
        let mut d_a = Array2::<f32>::zeros(a.dim());
        for h in 0..cfg.n_heads {
            let mix = lc.head_mix.index_axis(Axis(0), h);
            let p = lc.pattern.index_axis(Axis(0), h);
            let q = lc.q.index_axis(Axis(0), h);
            let k = lc.k.index_axis(Axis(0), h);
            let v = lc.v.index_axis(Axis(0), h);
            let w_o = lp.attn.w_o.index_axis(Axis(0), h);
            gl.attn.w_o.index_axis_mut(Axis(0), h).assign(&mix.t().dot(&d_mid));
            let d_mix = d_mid.dot(&w_o.t());
            let d_p = d_mix.dot(&v.t());
            let d_v = p.t().dot(&d_mix);
            let mut d_s = Array2::<f32>::zeros((n, n));
            for t in 0..n {
                let row_dot: f32 = (0..=t).map(|s| d_p[[t, s]] * p[[t, s]]).sum();
                for s in 0..=t {
                    d_s[[t, s]] = p[[t, s]] * (d_p[[t, s]] - row_dot) * inv_sqrt;
                }
            }
            let d_q = d_s.dot(&k);
            let d_k = d_s.t().dot(&q);
            let wq = lp.attn.w_q.index_axis(Axis(0), h);
            let wk = lp.attn.w_k.index_axis(Axis(0), h);
            let wv = lp.attn.w_v.index_axis(Axis(0), h);
            gl.attn.w_q.index_axis_mut(Axis(0), h).assign(&a.t().dot(&d_q));
            gl.attn.w_k.index_axis_mut(Axis(0), h).assign(&a.t().dot(&d_k));
            gl.attn.w_v.index_axis_mut(Axis(0), h).assign(&a.t().dot(&d_v));
            d_a += &d_q.dot(&wq.t());
            d_a += &d_k.dot(&wk.t());
            d_a += &d_v.dot(&wv.t());
        }
        dx = &d_mid + &ln_backward(&d_a, &lc.ln1, lp.ln1.gain.view(), &mut gl.ln1.gain, &mut gl.ln1.bias);
    }

    for (t, &tok) in tokens.iter().enumerate() {
        let row = dx.row(t);
        let mut e = g.w_e.row_mut(tok);
        e += &row;
        let mut p = g.w_pos.row_mut(t);
        p += &row;
    }
    if cfg.tied_embeddings {
        let gu = g.w_u.t().to_owned();
        g.w_e += &gu;
        g.w_u.fill(0.0);
    }
    Ok((loss * scale as f64, g))
}

/// Adam state over every tensor of a parameter set.
pub struct Adam {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    t: i32,
}

impl Adam {
    pub fn new(sizes: impl IntoIterator<Item = usize>, beta1: f32, beta2: f32, eps: f32) -> Self {
        let sizes: Vec<usize> = sizes.into_iter().collect();
        Adam {
            beta1,
            beta2,
            eps,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }

    /// One bias-corrected update of `params` given matching `grads`.
    pub fn step(&mut self, params: Vec<&mut [f32]>, grads: Vec<&[f32]>, lr: f32, weight_decay: f32) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for (i, (p, g)) in params.into_iter().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..p.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let update = (m[j] / bc1) / ((v[j] / bc2).sqrt() + self.eps);
                p[j] -= lr * (update + weight_decay * p[j]);
            }
        }
    }
}

fn add_into(acc: &mut ModelParams, other: &ModelParams) {
    let src: Vec<Vec<f32>> = other
        .named_tensors()
        .into_iter()
        .map(|(_, _, s)| s.to_vec())
        .collect();
    for (a, b) in acc.tensors_mut().into_iter().zip(src.iter()) {
        for (x, y) in a.iter_mut().zip(b) {
            *x += y;
        }
    }
}

/// Train on randomly sampled prompts. Returns the mean loss per step.
///
/// Per-sequence gradients are computed in parallel and summed in batch
/// order, so results do not depend on the thread count.
pub fn train_lm(params: &mut ModelParams, prompts: &[Vec<usize>], cfg: &LmTrainConfig) -> Result<Vec<f64>> {
    let usable: Vec<&Vec<usize>> = prompts.iter().filter(|p| p.len() >= 2).collect();
    if usable.is_empty() {
        return Err(Error::Input("no prompt has two or more tokens".into()));
    }
    let sizes: Vec<usize> = params.named_tensors().iter().map(|(_, _, s)| s.len()).collect();
    let mut adam = Adam::new(sizes, 0.9, 0.999, 1e-8);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch: Vec<&Vec<usize>> = (0..cfg.batch_size)
            .map(|_| usable[rng.random_range(0..usable.len())])
            .collect();
        let count: usize = batch.iter().map(|p| p.len() - 1).sum();
        let scale = 1.0 / count as f32;
        let parts: Vec<(f64, ModelParams)> = batch
            .par_iter()
            .map(|p| loss_and_grad(params, p, scale))
            .collect::<Result<_>>()?;
        let mut total = 0.0;
        let mut grad = zero_grad(&params.config)?;
        for (l, g) in &parts {
            total += l;
            add_into(&mut grad, g);
        }
        if !total.is_finite() {
            return Err(Error::Training {
                step,
                message: "non-finite language-model loss".into(),
            });
        }
        losses.push(total);
        let frac = step as f32 / cfg.steps.max(1) as f32;
        let lr = cfg.learning_rate * (1.0 - (1.0 - cfg.final_lr_fraction) * frac);
        let grads: Vec<Vec<f32>> = grad
            .named_tensors()
            .into_iter()
            .map(|(_, _, s)| s.to_vec())
            .collect();
        adam.step(
            params.tensors_mut(),
            grads.iter().map(|g| g.as_slice()).collect(),
            lr,
            cfg.weight_decay,
        );
        if params.config.tied_embeddings {
            params.w_u = params.w_e.t().as_standard_layout().to_owned();
        }
        if step % 200 == 0 {
            log::info!("lm step {step}: loss {total:.4}");
        }
    }
    Ok(losses)
}

/// Mean next-token cross entropy over a set of prompts.
pub fn mean_cross_entropy(params: &ModelParams, prompts: &[Vec<usize>]) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0;
    for p in prompts {
        let (logits, _) = forward_with_cache(params, p)?;
        let (l, c) = sequence_loss(logits.view(), p);
        total += l;
        count += c;
    }
    Ok(total / count.max(1) as f64)
}
