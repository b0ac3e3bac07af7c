//! Activation harvesting, coder training and lambda1 sweeps.

use std::io::Write;
use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::coder::{Coder, CoderKind};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalReport};
use crate::lm::Adam;
use crate::model::{forward_with_cache, ModelParams};

/// Rows per gradient chunk. Chunks are reduced in index order, so results do
/// not depend on the thread count.
const CHUNK: usize = 256;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainConfig {
    pub lambda1: f32,
    pub learning_rate: f32,
    pub batch_size: usize,
    /// Longest prompt prefix harvested.
    pub context_len: usize,
    /// Training examples consumed; the stream is cycled as needed.
    pub total_tokens: usize,
    pub seed: u64,
    pub beta1: f32,
    pub beta2: f32,
    pub adam_eps: f32,
    pub d_features_multiplier: usize,
    /// Visit batches in a seeded random order each epoch instead of stream
    /// order.
    pub shuffle: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda1: 1e-3,
            learning_rate: 2e-5,
            batch_size: 4096,
            context_len: 128,
            total_tokens: 1 << 20,
            seed: 42,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            d_features_multiplier: 32,
            shuffle: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.lambda1 >= 0.0 && self.lambda1.is_finite()) {
            return bad("lambda1 must be finite and nonnegative");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning rate must be positive");
        }
        if self.batch_size == 0 || self.context_len == 0 || self.total_tokens == 0 || self.d_features_multiplier == 0 {
            return bad("batch size, context length, total tokens and multiplier must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.adam_eps <= 0.0 {
            return bad("Adam betas must lie in [0, 1) and eps must be positive");
        }
        Ok(())
    }
}

/// MLP input/output pairs from one layer, in corpus order.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationPairStream {
    pub layer: usize,
    /// Post-LayerNorm MLP inputs, one row per token.
    pub inputs: Array2<f32>,
    pub outputs: Array2<f32>,
    /// (prompt index, token index) of each row.
    pub provenance: Vec<(usize, usize)>,
}

impl ActivationPairStream {
    pub fn len(&self) -> usize {
        self.provenance.len()
    }

    pub fn is_empty(&self) -> bool {
        self.provenance.is_empty()
    }

    /// Column means of the MLP outputs.
    pub fn mean_output(&self) -> Array1<f32> {
        mean_rows(self.outputs.view())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::checkpoint::save_activations(self, path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        crate::checkpoint::load_activations(path)
    }
}

pub(crate) fn mean_rows(x: ArrayView2<f32>) -> Array1<f32> {
    let n = x.nrows().max(1) as f64;
    x.axis_iter(Axis(1))
        .map(|c| (c.iter().map(|&v| v as f64).sum::<f64>() / n) as f32)
        .collect()
}

/// Collect up to `limit` (MLP input, MLP output) pairs at `layer`, prompt by
/// prompt and token by token. Prompts longer than `context_len` are cut.
pub fn harvest(
    params: &ModelParams,
    prompts: &[Vec<usize>],
    layer: usize,
    limit: usize,
    context_len: usize,
) -> Result<ActivationPairStream> {
    if prompts.is_empty() || prompts.iter().all(Vec::is_empty) {
        return Err(Error::Input("cannot harvest from an empty corpus".into()));
    }
    if layer >= params.config.n_layers {
        return Err(Error::Input(format!(
            "layer {layer} out of range ({} layers)",
            params.config.n_layers
        )));
    }
    let ctx = context_len.min(params.config.context_len);
    let d = params.config.d_model;
    let mut inputs = Vec::new();
    let mut outputs = Vec::new();
    let mut provenance = Vec::new();
    let mut next = 0;
    const WAVE: usize = 256;
    while provenance.len() < limit && next < prompts.len() {
        let wave: Vec<(usize, &[usize])> = (next..(next + WAVE).min(prompts.len()))
            .map(|i| (i, &prompts[i][..prompts[i].len().min(ctx)]))
            .filter(|(_, p)| !p.is_empty())
            .collect();
        next += WAVE;
        let caches: Vec<_> = wave
            .par_iter()
            .map(|(_, p)| forward_with_cache(params, p).map(|(_, c)| c))
            .collect::<Result<_>>()?;
        for ((pi, _), cache) in wave.iter().zip(caches) {
            let lc = &cache.layers[layer];
            for t in 0..lc.mlp_in.nrows() {
                if provenance.len() == limit {
                    break;
                }
                inputs.extend(lc.mlp_in.row(t).iter());
                outputs.extend(lc.mlp_out.row(t).iter());
                provenance.push((*pi, t));
            }
        }
    }
    let n = provenance.len();
    Ok(ActivationPairStream {
        layer,
        inputs: Array2::from_shape_vec((n, d), inputs).expect("row-major collection"),
        outputs: Array2::from_shape_vec((n, d), outputs).expect("row-major collection"),
        provenance,
    })
}

/// One row of the training log. `sparsity_l1` is the unweighted mean
/// `|z|_1`; `l0` the mean count of `z_i > 0`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LogRow {
    pub step: usize,
    pub faithfulness: f64,
    pub sparsity_l1: f64,
    pub l0: f64,
}

pub fn write_log_csv(log: &[LogRow], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in log {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

/// Uniform initialization with bound `1/sqrt(fan_in)` for both matrices and
/// zero biases.
pub fn init_coder(kind: CoderKind, layer: usize, d_in: usize, d_out: usize, d_features: usize, seed: u64) -> Result<Coder> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let be = 1.0 / (d_in as f32).sqrt();
    let bd = 1.0 / (d_features as f32).sqrt();
    let w_enc = Array2::from_shape_simple_fn((d_features, d_in), || rng.random_range(-be..be));
    let w_dec = Array2::from_shape_simple_fn((d_out, d_features), || rng.random_range(-bd..bd));
    Coder::new(kind, layer, w_enc, Array1::zeros(d_features), w_dec, Array1::zeros(d_out))
}

struct Grads {
    w_enc: Array2<f32>,
    b_enc: Array1<f32>,
    w_dec: Array2<f32>,
    b_dec: Array1<f32>,
    faithfulness: f64,
    l1: f64,
    l0: f64,
}

/// Gradients of the summed per-example loss over a chunk, each divided by
/// `batch`.
fn chunk_grads(coder: &Coder, x: ArrayView2<f32>, target: ArrayView2<f32>, lambda1: f32, batch: f32) -> Grads {
    let pre = coder.pre_activations(x);
    let z = pre.mapv(|v| v.max(0.0));
    let recon = coder.decode(z.view());
    let err = &recon - &target;
    let faithfulness: f64 = err.iter().map(|&e| (e as f64) * (e as f64)).sum();
    let l1: f64 = z.iter().map(|&v| v as f64).sum();
    let l0 = z.iter().filter(|&&v| v > 0.0).count() as f64;
    let d_recon = err * (2.0 / batch);
    let w_dec = d_recon.t().dot(&z);
    let b_dec = d_recon.sum_axis(Axis(0));
    let mut d_pre = d_recon.dot(&coder.w_dec) + lambda1 / batch;
    d_pre.zip_mut_with(&pre, |d, &p| {
        if p <= 0.0 {
            *d = 0.0
        }
    });
    Grads {
        w_enc: d_pre.t().dot(&x),
        b_enc: d_pre.sum_axis(Axis(0)),
        w_dec,
        b_dec,
        faithfulness,
        l1,
        l0,
    }
}

fn batch_grads(coder: &Coder, x: ArrayView2<f32>, target: ArrayView2<f32>, lambda1: f32) -> Grads {
    let n = x.nrows();
    let parts: Vec<Grads> = (0..n.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let r = c * CHUNK..((c + 1) * CHUNK).min(n);
            chunk_grads(coder, x.slice(s![r.clone(), ..]), target.slice(s![r, ..]), lambda1, n as f32)
        })
        .collect();
    let mut it = parts.into_iter();
    let mut acc = it.next().expect("batch is non-empty");
    for g in it {
        acc.w_enc += &g.w_enc;
        acc.b_enc += &g.b_enc;
        acc.w_dec += &g.w_dec;
        acc.b_dec += &g.b_dec;
        acc.faithfulness += g.faithfulness;
        acc.l1 += g.l1;
        acc.l0 += g.l0;
    }
    acc
}

/// Train a freshly initialized coder of `kind` on the stream. Transcoders map
/// MLP inputs to outputs; SAEs reconstruct MLP outputs.
pub fn train_coder(config: &TrainConfig, stream: &ActivationPairStream, kind: CoderKind) -> Result<(Coder, Vec<LogRow>)> {
    config.validate()?;
    let d = stream.inputs.ncols();
    let init = init_coder(kind, stream.layer, d, d, config.d_features_multiplier * d, config.seed)?;
    train_coder_from(init, config, stream)
}

/// Continue training `coder` on the stream.
pub fn train_coder_from(mut coder: Coder, config: &TrainConfig, stream: &ActivationPairStream) -> Result<(Coder, Vec<LogRow>)> {
    config.validate()?;
    if stream.is_empty() {
        return Err(Error::Input("activation stream is empty".into()));
    }
    coder.w_enc = coder.w_enc.as_standard_layout().into_owned();
    coder.w_dec = coder.w_dec.as_standard_layout().into_owned();
    let (x_all, y_all) = match coder.kind {
        CoderKind::Transcoder => (stream.inputs.view(), stream.outputs.view()),
        CoderKind::Sae => (stream.outputs.view(), stream.outputs.view()),
    };
    if x_all.ncols() != coder.d_in() || y_all.ncols() != coder.d_out() {
        return Err(Error::Config("coder dimensions do not match the stream".into()));
    }
    let n = stream.len();
    let b = config.batch_size.min(n);
    let n_batches = n.div_ceil(b);
    let steps = config.total_tokens.div_ceil(b);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_0ff5e7);
    let mut order: Vec<usize> = (0..n_batches).collect();
    let mut adam = Adam::new(
        [coder.w_enc.len(), coder.b_enc.len(), coder.w_dec.len(), coder.b_dec.len()],
        config.beta1,
        config.beta2,
        config.adam_eps,
    );
    let mut log = Vec::with_capacity(steps);
    for step in 0..steps {
        let pos = step % n_batches;
        if pos == 0 && config.shuffle {
            order.shuffle(&mut rng);
        }
        let k = order[pos];
        let r = k * b..((k + 1) * b).min(n);
        let rows = r.len() as f64;
        let g = batch_grads(
            &coder,
            x_all.slice(s![r.clone(), ..]),
            y_all.slice(s![r, ..]),
            config.lambda1,
        );
        let row = LogRow {
            step,
            faithfulness: g.faithfulness / rows,
            sparsity_l1: g.l1 / rows,
            l0: g.l0 / rows,
        };
        if !(row.faithfulness.is_finite() && row.sparsity_l1.is_finite()) {
            return Err(Error::Training {
                step,
                message: "loss is NaN or infinite".into(),
            });
        }
        log.push(row);
        adam.step(
            vec![
                coder.w_enc.as_slice_mut().expect("standard layout"),
                coder.b_enc.as_slice_mut().expect("standard layout"),
                coder.w_dec.as_slice_mut().expect("standard layout"),
                coder.b_dec.as_slice_mut().expect("standard layout"),
            ],
            vec![
                g.w_enc.as_slice().expect("standard layout"),
                g.b_enc.as_slice().expect("standard layout"),
                g.w_dec.as_slice().expect("standard layout"),
                g.b_dec.as_slice().expect("standard layout"),
            ],
            config.learning_rate,
            0.0,
        );
        if step % 500 == 0 {
            log::debug!(
                "coder step {step}: mse {:.5} l1 {:.3} l0 {:.2}",
                row.faithfulness,
                row.sparsity_l1,
                row.l0
            );
        }
    }
    coder.lambda1 = config.lambda1;
    coder.trained_tokens += (steps * b) as u64;
    Ok((coder, log))
}

/// Outcome of one sweep run; failed runs keep their error message.
#[derive(Clone, Debug)]
pub struct SweepRun {
    pub lambda1: f32,
    pub kind: CoderKind,
    pub outcome: std::result::Result<(Coder, EvalReport), String>,
}

#[derive(Clone, Debug)]
pub struct SweepReport {
    /// Sorted by lambda1, transcoders before SAEs.
    pub runs: Vec<SweepRun>,
    pub ce_original: f64,
    pub ce_mean_ablated: f64,
}

/// Train one coder per (lambda1, kind) and evaluate each on `eval_prompts`.
pub fn sweep(
    base: &TrainConfig,
    lambdas: &[f32],
    stream: &ActivationPairStream,
    kinds: &[CoderKind],
    params: &ModelParams,
    eval_prompts: &[Vec<usize>],
) -> Result<SweepReport> {
    if lambdas.len() < 2 {
        return Err(Error::Usage("a sweep needs at least two lambda1 values".into()));
    }
    if kinds.is_empty() {
        return Err(Error::Usage("a sweep needs at least one coder kind".into()));
    }
    let mut lambdas = lambdas.to_vec();
    lambdas.sort_by(|a, b| a.total_cmp(b));
    let mut kinds = kinds.to_vec();
    kinds.sort_by_key(|k| *k == CoderKind::Sae);
    kinds.dedup();
    let mut runs = Vec::new();
    let mut refs = None;
    for &lambda1 in &lambdas {
        for &kind in &kinds {
            let cfg = TrainConfig {
                lambda1,
                ..base.clone()
            };
            log::info!("sweep: training {} with lambda1 = {lambda1}", kind.as_str());
            let outcome = train_coder(&cfg, stream, kind)
                .and_then(|(coder, _)| evaluate(params, &[&coder], eval_prompts).map(|r| (coder, r)))
                .map_err(|e| e.to_string());
            if let Ok((_, r)) = &outcome {
                refs.get_or_insert((r.ce_original, r.ce_mean_ablated));
            }
            runs.push(SweepRun { lambda1, kind, outcome });
        }
    }
    let (ce_original, ce_mean_ablated) = match refs {
        Some(r) => r,
        None => {
            let mean = stream.mean_output();
            let r = crate::eval::reference_ce(params, stream.layer, &mean, eval_prompts)?;
            (r.0, r.1)
        }
    };
    Ok(SweepReport {
        runs,
        ce_original,
        ce_mean_ablated,
    })
}

#[derive(Serialize)]
struct SweepCsvRow<'a> {
    lambda1: String,
    kind: &'a str,
    mean_l0: String,
    ce_original: f64,
    ce_replaced: String,
    ce_mean_ablated: f64,
}

impl SweepReport {
    /// Columns `lambda1,kind,mean_l0,ce_original,ce_replaced,ce_mean_ablated`:
    /// one row per run (empty metrics when it failed), then an `original`
    /// and a `mean_ablation` reference row.
    pub fn write_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for run in &self.runs {
            let (l0, ce) = match &run.outcome {
                Ok((_, r)) => (r.mean_l0.to_string(), r.ce_replaced.to_string()),
                Err(_) => (String::new(), String::new()),
            };
            w.serialize(SweepCsvRow {
                lambda1: run.lambda1.to_string(),
                kind: run.kind.as_str(),
                mean_l0: l0,
                ce_original: self.ce_original,
                ce_replaced: ce,
                ce_mean_ablated: self.ce_mean_ablated,
            })?;
        }
        for (kind, ce) in [("original", self.ce_original), ("mean_ablation", self.ce_mean_ablated)] {
            w.serialize(SweepCsvRow {
                lambda1: String::new(),
                kind,
                mean_l0: String::new(),
                ce_original: self.ce_original,
                ce_replaced: ce.to_string(),
                ce_mean_ablated: self.ce_mean_ablated,
            })?;
        }
        w.flush()?;
        Ok(())
    }
}
