//! A minimal GPT-style decoder-only transformer with full activation
//! caching.
//!
//! Each block is pre-LN: `x_mid = x_pre + sum_h attn_h(LN1(x_pre))` and
//! `x_next = x_mid + MLP(LN2(x_mid))`. Attention has no biases, so the
//! attention update is exactly the sum of the head outputs. Any block's MLP
//! can be swapped for a coder or ablated when running the model.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, Array3, ArrayView1, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::coder::{Coder, CoderKind};
use crate::error::{Error, Result};
use crate::ops::{causal_softmax, gelu, layer_norm};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MlpActivation {
    Gelu,
    Relu,
}

impl MlpActivation {
    pub fn apply(self, x: f32) -> f32 {
        match self {
            MlpActivation::Gelu => gelu(x),
            MlpActivation::Relu => x.max(0.0),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_head: usize,
    pub d_mlp: usize,
    pub vocab_size: usize,
    pub context_len: usize,
    pub ln_epsilon: f32,
    pub activation: MlpActivation,
    /// When set, the unembedding is kept equal to the transposed token
    /// embedding.
    #[serde(default)]
    pub tied_embeddings: bool,
}

impl ModelConfig {
    /// Small configuration used by the toy experiments.
    pub fn toy(vocab_size: usize) -> Self {
        ModelConfig {
            n_layers: 2,
            n_heads: 4,
            d_model: 32,
            d_head: 8,
            d_mlp: 128,
            vocab_size,
            context_len: 16,
            ln_epsilon: 1e-5,
            activation: MlpActivation::Gelu,
            tied_embeddings: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_model", self.d_model),
            ("d_head", self.d_head),
            ("d_mlp", self.d_mlp),
            ("vocab_size", self.vocab_size),
            ("context_len", self.context_len),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if self.d_model != self.n_heads * self.d_head {
            return Err(Error::Config(format!(
                "d_model ({}) must equal n_heads ({}) x d_head ({})",
                self.d_model, self.n_heads, self.d_head
            )));
        }
        if self.ln_epsilon.is_nan() || self.ln_epsilon <= 0.0 {
            return Err(Error::Config("ln_epsilon must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNormParams {
    pub gain: Array1<f32>,
    pub bias: Array1<f32>,
}

impl LayerNormParams {
    fn identity(d: usize) -> Self {
        LayerNormParams {
            gain: Array1::ones(d),
            bias: Array1::zeros(d),
        }
    }
}

/// Per-head projections. Row-vector convention: `q = x . w_q[h]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams {
    /// `n_heads x d_model x d_head`
    pub w_q: Array3<f32>,
    pub w_k: Array3<f32>,
    pub w_v: Array3<f32>,
    /// `n_heads x d_head x d_model`
    pub w_o: Array3<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpParams {
    /// `d_model x d_mlp`
    pub w_in: Array2<f32>,
    pub b_in: Array1<f32>,
    /// `d_mlp x d_model`
    pub w_out: Array2<f32>,
    pub b_out: Array1<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub ln1: LayerNormParams,
    pub attn: AttentionParams,
    pub ln2: LayerNormParams,
    pub mlp: MlpParams,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    /// `vocab_size x d_model`
    pub w_e: Array2<f32>,
    /// `context_len x d_model`
    pub w_pos: Array2<f32>,
    pub layers: Vec<LayerParams>,
    pub ln_final: LayerNormParams,
    /// `d_model x vocab_size`
    pub w_u: Array2<f32>,
}

impl ModelParams {
    /// All-zero weights with identity LayerNorms.
    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let c = config;
        let layer = LayerParams {
            ln1: LayerNormParams::identity(c.d_model),
            attn: AttentionParams {
                w_q: Array3::zeros((c.n_heads, c.d_model, c.d_head)),
                w_k: Array3::zeros((c.n_heads, c.d_model, c.d_head)),
                w_v: Array3::zeros((c.n_heads, c.d_model, c.d_head)),
                w_o: Array3::zeros((c.n_heads, c.d_head, c.d_model)),
            },
            ln2: LayerNormParams::identity(c.d_model),
            mlp: MlpParams {
                w_in: Array2::zeros((c.d_model, c.d_mlp)),
                b_in: Array1::zeros(c.d_mlp),
                w_out: Array2::zeros((c.d_mlp, c.d_model)),
                b_out: Array1::zeros(c.d_model),
            },
        };
        Ok(ModelParams {
            config: c.clone(),
            w_e: Array2::zeros((c.vocab_size, c.d_model)),
            w_pos: Array2::zeros((c.context_len, c.d_model)),
            layers: vec![layer; c.n_layers],
            ln_final: LayerNormParams::identity(c.d_model),
            w_u: Array2::zeros((c.d_model, c.vocab_size)),
        })
    }

    /// GPT-2 style initialization: N(0, 0.02) everywhere, residual-writing
    /// projections scaled by `1/sqrt(2 n_layers)`.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        let mut p = Self::zeros(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std = 0.02f32;
        let normal = Normal::new(0.0f32, std).expect("valid std");
        let resid = Normal::new(0.0f32, std / (2.0 * config.n_layers as f32).sqrt())
            .expect("valid std");
        let mut fill = |slice: &mut [f32], dist: &Normal<f32>| {
            for v in slice.iter_mut() {
                *v = dist.sample(&mut rng);
            }
        };
        fill(p.w_e.as_slice_mut().unwrap(), &normal);
        fill(p.w_pos.as_slice_mut().unwrap(), &normal);
        for layer in &mut p.layers {
            fill(layer.attn.w_q.as_slice_mut().unwrap(), &normal);
            fill(layer.attn.w_k.as_slice_mut().unwrap(), &normal);
            fill(layer.attn.w_v.as_slice_mut().unwrap(), &normal);
            fill(layer.attn.w_o.as_slice_mut().unwrap(), &resid);
            fill(layer.mlp.w_in.as_slice_mut().unwrap(), &normal);
            fill(layer.mlp.w_out.as_slice_mut().unwrap(), &resid);
        }
        if config.tied_embeddings {
            p.w_u = p.w_e.t().as_standard_layout().to_owned();
        } else {
            fill(p.w_u.as_slice_mut().unwrap(), &normal);
        }
        Ok(p)
    }

    /// Every tensor drawn uniformly at random, LayerNorm gains near one.
    /// Used for oracle tests where zero biases would hide bugs.
    pub fn randomized(config: &ModelConfig, seed: u64) -> Result<Self> {
        use rand::Rng;
        let mut p = Self::zeros(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model as f32;
        let names: Vec<String> = p.named_tensors().into_iter().map(|(n, _, _)| n).collect();
        for (name, slice) in names.iter().zip(p.tensors_mut()) {
            let (center, spread) = if name.ends_with(".gain") {
                (1.0, 0.3)
            } else if name.ends_with("bias") || name.contains(".b_") {
                (0.0, 0.2)
            } else {
                (0.0, 1.0 / d.sqrt())
            };
            for v in slice.iter_mut() {
                *v = center + rng.random_range(-spread..spread) * 1.7;
            }
        }
        if config.tied_embeddings {
            p.w_u = p.w_e.t().as_standard_layout().to_owned();
        }
        Ok(p)
    }

    /// The OV circuit of a head as a `d_model x d_model` matrix acting on
    /// column vectors: `head_out = W_OV . ln1(x_source)` (scaled by the
    /// attention probability).
    pub fn w_ov(&self, layer: usize, head: usize) -> Array2<f32> {
        let attn = &self.layers[layer].attn;
        attn.w_v
            .index_axis(Axis(0), head)
            .dot(&attn.w_o.index_axis(Axis(0), head))
            .reversed_axes()
            .as_standard_layout()
            .to_owned()
    }

    /// `W_OV^T f` without materializing `W_OV`.
    pub fn ov_transpose_apply(&self, layer: usize, head: usize, f: ArrayView1<f32>) -> Array1<f32> {
        let attn = &self.layers[layer].attn;
        let through_o = attn.w_o.index_axis(Axis(0), head).dot(&f);
        attn.w_v.index_axis(Axis(0), head).dot(&through_o)
    }

    /// `W_OV x` without materializing `W_OV`.
    pub fn ov_apply(&self, layer: usize, head: usize, x: ArrayView1<f32>) -> Array1<f32> {
        let attn = &self.layers[layer].attn;
        let v = x.dot(&attn.w_v.index_axis(Axis(0), head));
        v.dot(&attn.w_o.index_axis(Axis(0), head))
    }

    /// Every tensor with its canonical name, in a fixed order.
    pub fn named_tensors(&self) -> Vec<(String, Vec<usize>, &[f32])> {
        let mut out: Vec<(String, Vec<usize>, &[f32])> = Vec::new();
        macro_rules! push {
            ($name:expr, $arr:expr) => {
                out.push((
                    $name,
                    $arr.shape().to_vec(),
                    $arr.as_slice().expect("standard layout"),
                ))
            };
        }
        push!("embed.W_E".to_string(), self.w_e);
        push!("embed.W_pos".to_string(), self.w_pos);
        for (l, layer) in self.layers.iter().enumerate() {
            push!(format!("blocks.{l}.ln1.gain"), layer.ln1.gain);
            push!(format!("blocks.{l}.ln1.bias"), layer.ln1.bias);
            push!(format!("blocks.{l}.attn.W_Q"), layer.attn.w_q);
            push!(format!("blocks.{l}.attn.W_K"), layer.attn.w_k);
            push!(format!("blocks.{l}.attn.W_V"), layer.attn.w_v);
            push!(format!("blocks.{l}.attn.W_O"), layer.attn.w_o);
            push!(format!("blocks.{l}.ln2.gain"), layer.ln2.gain);
            push!(format!("blocks.{l}.ln2.bias"), layer.ln2.bias);
            push!(format!("blocks.{l}.mlp.W_in"), layer.mlp.w_in);
            push!(format!("blocks.{l}.mlp.b_in"), layer.mlp.b_in);
            push!(format!("blocks.{l}.mlp.W_out"), layer.mlp.w_out);
            push!(format!("blocks.{l}.mlp.b_out"), layer.mlp.b_out);
        }
        push!("ln_final.gain".to_string(), self.ln_final.gain);
        push!("ln_final.bias".to_string(), self.ln_final.bias);
        push!("unembed.W_U".to_string(), self.w_u);
        out
    }

    /// Mutable views of every tensor, in the same order as
    /// [`named_tensors`](Self::named_tensors).
    pub fn tensors_mut(&mut self) -> Vec<&mut [f32]> {
        let mut out: Vec<&mut [f32]> = vec![
            self.w_e.as_slice_mut().unwrap(),
            self.w_pos.as_slice_mut().unwrap(),
        ];
        for layer in &mut self.layers {
            out.push(layer.ln1.gain.as_slice_mut().unwrap());
            out.push(layer.ln1.bias.as_slice_mut().unwrap());
            out.push(layer.attn.w_q.as_slice_mut().unwrap());
            out.push(layer.attn.w_k.as_slice_mut().unwrap());
            out.push(layer.attn.w_v.as_slice_mut().unwrap());
            out.push(layer.attn.w_o.as_slice_mut().unwrap());
            out.push(layer.ln2.gain.as_slice_mut().unwrap());
            out.push(layer.ln2.bias.as_slice_mut().unwrap());
            out.push(layer.mlp.w_in.as_slice_mut().unwrap());
            out.push(layer.mlp.b_in.as_slice_mut().unwrap());
            out.push(layer.mlp.w_out.as_slice_mut().unwrap());
            out.push(layer.mlp.b_out.as_slice_mut().unwrap());
        }
        out.push(self.ln_final.gain.as_slice_mut().unwrap());
        out.push(self.ln_final.bias.as_slice_mut().unwrap());
        out.push(self.w_u.as_slice_mut().unwrap());
        out
    }

    /// Residual-stream input at position `t`: token plus positional
    /// embedding.
    pub fn embed(&self, tokens: &[usize]) -> Array2<f32> {
        let d = self.config.d_model;
        let mut x = Array2::zeros((tokens.len(), d));
        for (t, &tok) in tokens.iter().enumerate() {
            let mut row = x.row_mut(t);
            row.assign(&self.w_e.row(tok));
            row += &self.w_pos.row(t);
        }
        x
    }

    pub fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::Input("empty token sequence".into()));
        }
        if tokens.len() > self.config.context_len {
            return Err(Error::Input(format!(
                "sequence length {} exceeds context length {}",
                tokens.len(),
                self.config.context_len
            )));
        }
        if let Some((pos, &tok)) = tokens
            .iter()
            .enumerate()
            .find(|(_, &t)| t >= self.config.vocab_size)
        {
            return Err(Error::Input(format!(
                "token id {tok} at position {pos} is outside the vocabulary ({})",
                self.config.vocab_size
            )));
        }
        Ok(())
    }
}

/// Cached LayerNorm site: `output = gain * normalized + bias` where
/// `normalized = (x - mean) / sigma`. `sigma` is the norm ratio
/// `|x - mean| / |normalized|` for each position.
#[derive(Clone, Debug, PartialEq)]
pub struct LnCache {
    pub normalized: Array2<f32>,
    pub sigma: Array1<f32>,
    pub output: Array2<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerCache {
    /// `x_pre`, `T x d_model`
    pub resid_pre: Array2<f32>,
    pub ln1: LnCache,
    /// `n_heads x T x d_head`
    pub q: Array3<f32>,
    pub k: Array3<f32>,
    pub v: Array3<f32>,
    /// Post-softmax attention probabilities, `n_heads x T(dest) x T(src)`.
    pub pattern: Array3<f32>,
    /// `pattern . v`, `n_heads x T x d_head`
    pub head_mix: Array3<f32>,
    /// Per-head outputs written to the residual stream, `n_heads x T x d_model`.
    pub head_out: Array3<f32>,
    /// `x_mid`
    pub resid_mid: Array2<f32>,
    pub ln2: LnCache,
    /// Input actually fed to the MLP (the LN2 output unless an SAE replaced it).
    pub mlp_in: Array2<f32>,
    /// MLP neuron pre/post activations when the real MLP ran.
    pub mlp_hidden: Option<(Array2<f32>, Array2<f32>)>,
    /// What was added to the residual stream by the MLP slot.
    pub mlp_out: Array2<f32>,
}

/// Every intermediate activation of one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationCache {
    pub tokens: Vec<usize>,
    /// Token plus positional embedding, i.e. `x_pre` of layer 0.
    pub embed: Array2<f32>,
    pub layers: Vec<LayerCache>,
    pub resid_final: Array2<f32>,
    pub ln_final: LnCache,
    /// `T x vocab_size`
    pub logits: Array2<f32>,
}

impl ActivationCache {
    pub fn n_tokens(&self) -> usize {
        self.tokens.len()
    }

    /// Residual stream entering layer `layer` (`x_pre`); `layer == n_layers`
    /// gives the final residual.
    pub fn resid_pre(&self, layer: usize) -> &Array2<f32> {
        if layer == self.layers.len() {
            &self.resid_final
        } else {
            &self.layers[layer].resid_pre
        }
    }
}

/// What to do with an MLP slot during a forward pass.
#[derive(Clone, Debug)]
pub enum MlpOverride<'a> {
    /// Use a transcoder's output instead of the MLP's.
    Coder(&'a Coder),
    /// Transcoder with only the features marked `true` kept.
    MaskedCoder { coder: &'a Coder, keep: &'a [bool] },
    /// Transcoder with one feature's activation shifted by `delta` at one
    /// position.
    PerturbedCoder {
        coder: &'a Coder,
        token: usize,
        feature: usize,
        delta: f32,
    },
    /// Feed the MLP an SAE's reconstruction of its input.
    SaeInput(&'a Coder),
    /// Replace the MLP output by an SAE's reconstruction of it.
    SaeOutput(&'a Coder),
    /// Real MLP with the neurons marked `false` zeroed after the nonlinearity.
    MaskedNeurons(&'a [bool]),
    /// Add a fixed vector (mean ablation).
    Mean(&'a Array1<f32>),
    /// Add nothing.
    Zero,
}

/// Attention patterns and LayerNorm scales captured from a previous run.
/// Running with them held fixed makes the network linear in the residual
/// stream apart from the MLPs/coders.
#[derive(Clone, Debug)]
pub struct FrozenState {
    pub patterns: Vec<Array3<f32>>,
    pub ln_sigma: Vec<(Array1<f32>, Array1<f32>)>,
    pub final_sigma: Array1<f32>,
}

impl FrozenState {
    pub fn from_cache(cache: &ActivationCache) -> Self {
        FrozenState {
            patterns: cache.layers.iter().map(|l| l.pattern.clone()).collect(),
            ln_sigma: cache
                .layers
                .iter()
                .map(|l| (l.ln1.sigma.clone(), l.ln2.sigma.clone()))
                .collect(),
            final_sigma: cache.ln_final.sigma.clone(),
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions<'a> {
    pub overrides: BTreeMap<usize, MlpOverride<'a>>,
    pub frozen: Option<&'a FrozenState>,
}

/// Mean or zero ablation of an MLP slot.
#[derive(Clone, Debug, PartialEq)]
pub enum Ablation {
    Mean(Array1<f32>),
    Zero,
}

/// Plain forward pass that caches every activation.
pub fn forward_with_cache(
    params: &ModelParams,
    tokens: &[usize],
) -> Result<(Array2<f32>, ActivationCache)> {
    let cache = run_with_options(params, tokens, &RunOptions::default())?;
    Ok((cache.logits.clone(), cache))
}

/// Forward pass with some MLPs replaced by transcoders and others ablated.
pub fn run_with_replacements(
    params: &ModelParams,
    tokens: &[usize],
    replacements: &BTreeMap<usize, &Coder>,
    ablations: &BTreeMap<usize, Ablation>,
) -> Result<(Array2<f32>, ActivationCache)> {
    let mut opts = RunOptions::default();
    for (&layer, &coder) in replacements {
        let o = match coder.kind {
            CoderKind::Transcoder => MlpOverride::Coder(coder),
            CoderKind::Sae => MlpOverride::SaeOutput(coder),
        };
        opts.overrides.insert(layer, o);
    }
    for (&layer, ablation) in ablations {
        if opts.overrides.contains_key(&layer) {
            return Err(Error::Config(format!(
                "layer {layer} is both replaced and ablated"
            )));
        }
        let o = match ablation {
            Ablation::Mean(v) => MlpOverride::Mean(v),
            Ablation::Zero => MlpOverride::Zero,
        };
        opts.overrides.insert(layer, o);
    }
    let cache = run_with_options(params, tokens, &opts)?;
    Ok((cache.logits.clone(), cache))
}

fn check_override(params: &ModelParams, layer: usize, o: &MlpOverride) -> Result<()> {
    let d = params.config.d_model;
    if layer >= params.config.n_layers {
        return Err(Error::Config(format!("override for missing layer {layer}")));
    }
    let coder_dims = |c: &Coder, want_kind: CoderKind| -> Result<()> {
        if c.kind != want_kind {
            return Err(Error::Config(format!(
                "layer {layer}: expected a {}, got a {}",
                want_kind.as_str(),
                c.kind.as_str()
            )));
        }
        if c.d_in() != d || c.d_out() != d {
            return Err(Error::Config(format!(
                "layer {layer}: coder maps {} -> {}, model needs {d} -> {d}",
                c.d_in(),
                c.d_out()
            )));
        }
        Ok(())
    };
    match o {
        MlpOverride::Coder(c) | MlpOverride::PerturbedCoder { coder: c, .. } => {
            coder_dims(c, CoderKind::Transcoder)
        }
        MlpOverride::MaskedCoder { coder, keep } => {
            coder_dims(coder, CoderKind::Transcoder)?;
            if keep.len() != coder.d_features() {
                return Err(Error::Config("feature mask length mismatch".into()));
            }
            Ok(())
        }
        MlpOverride::SaeInput(c) | MlpOverride::SaeOutput(c) => coder_dims(c, CoderKind::Sae),
        MlpOverride::MaskedNeurons(keep) => {
            if keep.len() != params.config.d_mlp {
                return Err(Error::Config("neuron mask length mismatch".into()));
            }
            Ok(())
        }
        MlpOverride::Mean(v) => {
            if v.len() != d {
                return Err(Error::Config("mean vector has wrong length".into()));
            }
            Ok(())
        }
        MlpOverride::Zero => Ok(()),
    }
}

fn run_mlp(
    params: &ModelParams,
    layer: usize,
    input: &Array2<f32>,
    neuron_mask: Option<&[bool]>,
) -> (Array2<f32>, Array2<f32>, Array2<f32>) {
    let mlp = &params.layers[layer].mlp;
    let act = params.config.activation;
    let pre = input.dot(&mlp.w_in) + &mlp.b_in;
    let mut post = pre.mapv(|v| act.apply(v));
    if let Some(keep) = neuron_mask {
        for (j, &k) in keep.iter().enumerate() {
            if !k {
                post.column_mut(j).fill(0.0);
            }
        }
    }
    let out = post.dot(&mlp.w_out) + &mlp.b_out;
    (pre, post, out)
}

/// Forward pass under arbitrary MLP overrides and optional frozen state.
pub fn run_with_options(
    params: &ModelParams,
    tokens: &[usize],
    opts: &RunOptions,
) -> Result<ActivationCache> {
    params.check_tokens(tokens)?;
    for (&layer, o) in &opts.overrides {
        check_override(params, layer, o)?;
    }
    let cfg = &params.config;
    let n = tokens.len();
    if let Some(fz) = opts.frozen {
        if fz.patterns.len() != cfg.n_layers
            || fz.final_sigma.len() != n
            || fz.patterns.iter().any(|p| p.dim() != (cfg.n_heads, n, n))
        {
            return Err(Error::Config("frozen state does not match this input".into()));
        }
    }
    let eps = cfg.ln_epsilon;
    let scale = 1.0 / (cfg.d_head as f32).sqrt();
    let embed = params.embed(tokens);
    let mut x = embed.clone();
    let mut layers = Vec::with_capacity(cfg.n_layers);

    for (l, lp) in params.layers.iter().enumerate() {
        let frozen_sigma = opts.frozen.map(|f| &f.ln_sigma[l]);
        let (n1, s1, a) = layer_norm(
            x.view(),
            lp.ln1.gain.view(),
            lp.ln1.bias.view(),
            eps,
            frozen_sigma.map(|s| s.0.view()),
        );
        let mut q = Array3::zeros((cfg.n_heads, n, cfg.d_head));
        let mut k = Array3::zeros((cfg.n_heads, n, cfg.d_head));
        let mut v = Array3::zeros((cfg.n_heads, n, cfg.d_head));
        let mut pattern = Array3::zeros((cfg.n_heads, n, n));
        let mut head_mix = Array3::zeros((cfg.n_heads, n, cfg.d_head));
        let mut head_out = Array3::zeros((cfg.n_heads, n, cfg.d_model));
        let mut attn_out = Array2::<f32>::zeros((n, cfg.d_model));
        for h in 0..cfg.n_heads {
            let qh = a.dot(&lp.attn.w_q.index_axis(Axis(0), h));
            let kh = a.dot(&lp.attn.w_k.index_axis(Axis(0), h));
            let vh = a.dot(&lp.attn.w_v.index_axis(Axis(0), h));
            let ph = match opts.frozen {
                Some(f) => f.patterns[l].index_axis(Axis(0), h).to_owned(),
                None => {
                    let mut scores = qh.dot(&kh.t()) * scale;
                    causal_softmax(&mut scores);
                    scores
                }
            };
            let mix = ph.dot(&vh);
            let out = mix.dot(&lp.attn.w_o.index_axis(Axis(0), h));
            attn_out += &out;
            q.index_axis_mut(Axis(0), h).assign(&qh);
            k.index_axis_mut(Axis(0), h).assign(&kh);
            v.index_axis_mut(Axis(0), h).assign(&vh);
            pattern.index_axis_mut(Axis(0), h).assign(&ph);
            head_mix.index_axis_mut(Axis(0), h).assign(&mix);
            head_out.index_axis_mut(Axis(0), h).assign(&out);
        }
        let resid_pre = x;
        let resid_mid = &resid_pre + &attn_out;

        let (n2, s2, m) = layer_norm(
            resid_mid.view(),
            lp.ln2.gain.view(),
            lp.ln2.bias.view(),
            eps,
            frozen_sigma.map(|s| s.1.view()),
        );
        let ln2 = LnCache {
            normalized: n2,
            sigma: s2,
            output: m,
        };
        let mut mlp_in = ln2.output.clone();
        let mut mlp_hidden = None;
        let mlp_out = match opts.overrides.get(&l) {
            None => {
                let (pre, post, out) = run_mlp(params, l, &mlp_in, None);
                mlp_hidden = Some((pre, post));
                out
            }
            Some(MlpOverride::MaskedNeurons(keep)) => {
                let (pre, post, out) = run_mlp(params, l, &mlp_in, Some(keep));
                mlp_hidden = Some((pre, post));
                out
            }
            Some(MlpOverride::SaeInput(c)) => {
                mlp_in = c.decode(c.encode(mlp_in.view()).view());
                let (pre, post, out) = run_mlp(params, l, &mlp_in, None);
                mlp_hidden = Some((pre, post));
                out
            }
            Some(MlpOverride::SaeOutput(c)) => {
                let (pre, post, out) = run_mlp(params, l, &mlp_in, None);
                mlp_hidden = Some((pre, post));
                c.decode(c.encode(out.view()).view())
            }
            Some(MlpOverride::Coder(c)) => c.decode(c.encode(mlp_in.view()).view()),
            Some(MlpOverride::MaskedCoder { coder, keep }) => {
                let mut z = coder.encode(mlp_in.view());
                for (i, &k) in keep.iter().enumerate() {
                    if !k {
                        z.column_mut(i).fill(0.0);
                    }
                }
                coder.decode(z.view())
            }
            Some(MlpOverride::PerturbedCoder {
                coder,
                token,
                feature,
                delta,
            }) => {
                let mut z = coder.encode(mlp_in.view());
                if *token >= n || *feature >= coder.d_features() {
                    return Err(Error::Input("perturbation index out of range".into()));
                }
                z[[*token, *feature]] += *delta;
                coder.decode(z.view())
            }
            Some(MlpOverride::Mean(v)) => {
                Array2::from_shape_fn((n, cfg.d_model), |(_, j)| v[j])
            }
            Some(MlpOverride::Zero) => Array2::zeros((n, cfg.d_model)),
        };
        x = &resid_mid + &mlp_out;
        layers.push(LayerCache {
            resid_pre,
            ln1: LnCache {
                normalized: n1,
                sigma: s1,
                output: a,
            },
            q,
            k,
            v,
            pattern,
            head_mix,
            head_out,
            resid_mid,
            ln2,
            mlp_in,
            mlp_hidden,
            mlp_out,
        });
    }

    let (nf, sf, of) = layer_norm(
        x.view(),
        params.ln_final.gain.view(),
        params.ln_final.bias.view(),
        eps,
        opts.frozen.map(|f| f.final_sigma.view()),
    );
    let logits = of.dot(&params.w_u);
    Ok(ActivationCache {
        tokens: tokens.to_vec(),
        embed,
        layers,
        resid_final: x,
        ln_final: LnCache {
            normalized: nf,
            sigma: sf,
            output: of,
        },
        logits,
    })
}

/// Slice of the final-position logits, used by task metrics.
pub fn last_logits(cache: &ActivationCache) -> ArrayView1<'_, f32> {
    cache.logits.row(cache.logits.nrows() - 1)
}


#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{rel_close, seeded_params};

    #[test]
    fn rejects_bad_config() {
        let mut c = ModelConfig::toy(10);
        c.d_head = 7;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = ModelConfig::toy(10);
        c.ln_epsilon = 0.0;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::toy(10);
        c.n_layers = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn zero_weights_mean_heads_write_nothing() {
        let mut p = ModelParams::zeros(&ModelConfig::toy(20)).unwrap();
        p.w_e = Array2::from_shape_fn((20, 32), |(i, j)| ((i * 7 + j) % 5) as f32 - 2.0);
        let (_, cache) = forward_with_cache(&p, &[1, 5, 3, 19]).unwrap();
        for l in &cache.layers {
            assert_eq!(l.resid_mid, l.resid_pre);
        }
    }

    #[test]
    fn single_token_pattern_is_one() {
        let p = seeded_params(2, 2, 8, 3);
        let (_, cache) = forward_with_cache(&p, &[4]).unwrap();
        for l in &cache.layers {
            for h in 0..2 {
                assert_eq!(l.pattern[[h, 0, 0]], 1.0);
            }
        }
    }

    #[test]
    fn rejects_bad_tokens() {
        let p = seeded_params(2, 2, 8, 3);
        assert!(matches!(forward_with_cache(&p, &[]), Err(Error::Input(_))));
        let v = p.config.vocab_size;
        assert!(matches!(forward_with_cache(&p, &[0, v]), Err(Error::Input(_))));
        let long = vec![0; p.config.context_len + 1];
        assert!(matches!(forward_with_cache(&p, &long), Err(Error::Input(_))));
    }

    #[test]
    fn w_ov_is_value_times_output() {
        let p = seeded_params(2, 2, 8, 9);
        for l in 0..2 {
            for h in 0..2 {
                let w = p.w_ov(l, h);
                let attn = &p.layers[l].attn;
                for i in 0..8 {
                    for j in 0..8 {
                        let mut acc = 0.0f64;
                        for k in 0..4 {
                            acc += attn.w_v[[h, j, k]] as f64 * attn.w_o[[h, k, i]] as f64;
                        }
                        assert!(rel_close(w[[i, j]] as f64, acc, 1e-5, 1e-7));
                    }
                }
            }
        }
    }

    #[test]
    fn replacement_and_ablation_conflict() {
        let p = seeded_params(2, 2, 8, 3);
        let c = Coder::new(
            CoderKind::Transcoder,
            0,
            Array2::zeros((8, 8)),
            Array1::zeros(8),
            Array2::zeros((8, 8)),
            Array1::zeros(8),
        )
        .unwrap();
        let reps = BTreeMap::from([(0, &c)]);
        let abl = BTreeMap::from([(0, Ablation::Zero)]);
        assert!(matches!(
            run_with_replacements(&p, &[1, 2], &reps, &abl),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn coder_dimension_mismatch() {
        let p = seeded_params(2, 2, 8, 3);
        let c = Coder::new(
            CoderKind::Transcoder,
            0,
            Array2::zeros((8, 4)),
            Array1::zeros(8),
            Array2::zeros((4, 8)),
            Array1::zeros(4),
        )
        .unwrap();
        let reps = BTreeMap::from([(1, &c)]);
        assert!(matches!(
            run_with_replacements(&p, &[1, 2], &reps, &BTreeMap::new()),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn empty_overrides_are_identity() {
        let p = seeded_params(2, 2, 8, 3);
        let (a, _) = forward_with_cache(&p, &[3, 1, 4, 1]).unwrap();
        let (b, _) = run_with_replacements(&p, &[3, 1, 4, 1], &BTreeMap::new(), &BTreeMap::new()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_ablation_of_only_writer_gives_uniform_logits() {
        // Embeddings and attention are zero, so MLP outputs are the only
        // writers to the residual stream.
        let mut p = seeded_params(2, 2, 8, 5);
        p.w_e.fill(0.0);
        p.w_pos.fill(0.0);
        for l in &mut p.layers {
            l.attn.w_o.fill(0.0);
        }
        p.ln_final.bias.fill(0.0);
        let abl = BTreeMap::from([(0, Ablation::Zero), (1, Ablation::Zero)]);
        let (logits, _) = run_with_replacements(&p, &[1, 2, 3], &BTreeMap::new(), &abl).unwrap();
        for row in logits.outer_iter() {
            assert!(row.iter().all(|&v| v == row[0]));
        }
        // Without the ablation the MLP biases make the logits non-uniform.
        let (logits, _) = forward_with_cache(&p, &[1, 2, 3]).unwrap();
        assert!(logits.row(0).iter().any(|&v| v != logits[[0, 0]]));
    }
}
