//! Transcoders and sparse autoencoders.
//!
//! Both share one architecture: a wide ReLU encoder followed by a linear
//! decoder. A transcoder maps an MLP's (post-LayerNorm) input to that MLP's
//! output; an SAE reconstructs its own input.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{MlpActivation, ModelParams};
use crate::ops::dot64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CoderKind {
    Transcoder,
    Sae,
}

impl CoderKind {
    pub fn as_str(self) -> &'static str {
        match self {
            CoderKind::Transcoder => "transcoder",
            CoderKind::Sae => "sae",
        }
    }
}

impl std::str::FromStr for CoderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "transcoder" | "tc" => Ok(CoderKind::Transcoder),
            "sae" => Ok(CoderKind::Sae),
            other => Err(Error::Usage(format!("unknown coder kind `{other}`"))),
        }
    }
}

/// Encoder/decoder weights for one transcoder or SAE.
///
/// Row `i` of `w_enc` is feature `i`'s encoder vector and column `i` of
/// `w_dec` is its decoder vector.
#[derive(Clone, Debug, PartialEq)]
pub struct Coder {
    pub kind: CoderKind,
    pub layer: usize,
    /// `d_features x d_in`
    pub w_enc: Array2<f32>,
    pub b_enc: Array1<f32>,
    /// `d_out x d_features`
    pub w_dec: Array2<f32>,
    pub b_dec: Array1<f32>,
    /// Sparsity coefficient the coder was trained with (metadata only).
    pub lambda1: f32,
    pub trained_tokens: u64,
}

/// Feature activations and reconstruction for one input vector.
#[derive(Clone, Debug, PartialEq)]
pub struct CoderOutput {
    pub z: Array1<f32>,
    pub reconstruction: Array1<f32>,
}

/// Loss components for one example.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub faithfulness: f64,
    pub sparsity: f64,
}

impl Coder {
    pub fn new(
        kind: CoderKind,
        layer: usize,
        w_enc: Array2<f32>,
        b_enc: Array1<f32>,
        w_dec: Array2<f32>,
        b_dec: Array1<f32>,
    ) -> Result<Self> {
        let coder = Coder {
            kind,
            layer,
            w_enc,
            b_enc,
            w_dec,
            b_dec,
            lambda1: 0.0,
            trained_tokens: 0,
        };
        coder.validate()?;
        Ok(coder)
    }

    pub fn validate(&self) -> Result<()> {
        let (f, d_in) = self.w_enc.dim();
        let (d_out, f2) = self.w_dec.dim();
        if f != f2 || self.b_enc.len() != f || self.b_dec.len() != d_out {
            return Err(Error::Config(format!(
                "inconsistent coder shapes: w_enc {:?}, b_enc {}, w_dec {:?}, b_dec {}",
                self.w_enc.dim(),
                self.b_enc.len(),
                self.w_dec.dim(),
                self.b_dec.len()
            )));
        }
        if f < d_in {
            return Err(Error::Config(format!(
                "d_features ({f}) must be at least d_in ({d_in})"
            )));
        }
        if self.kind == CoderKind::Sae && d_in != d_out {
            return Err(Error::Config("an SAE must have d_in == d_out".into()));
        }
        Ok(())
    }

    pub fn d_in(&self) -> usize {
        self.w_enc.ncols()
    }

    pub fn d_out(&self) -> usize {
        self.w_dec.nrows()
    }

    pub fn d_features(&self) -> usize {
        self.w_enc.nrows()
    }

    /// Embed a ReLU MLP layer as a zero-error transcoder with one feature per
    /// neuron.
    pub fn exact_copy(params: &ModelParams, layer: usize) -> Result<Self> {
        if params.config.activation != MlpActivation::Relu {
            return Err(Error::Config(
                "exact-copy transcoders need a ReLU MLP".into(),
            ));
        }
        let mlp = &params
            .layers
            .get(layer)
            .ok_or_else(|| Error::Input(format!("layer {layer} out of range")))?
            .mlp;
        Coder::new(
            CoderKind::Transcoder,
            layer,
            mlp.w_in.t().as_standard_layout().into_owned(),
            mlp.b_in.clone(),
            mlp.w_out.t().as_standard_layout().into_owned(),
            mlp.b_out.clone(),
        )
    }

    /// ReLU pre-activations `W_enc x + b_enc` for a batch of row vectors.
    pub fn pre_activations(&self, x: ArrayView2<f32>) -> Array2<f32> {
        x.dot(&self.w_enc.t()) + &self.b_enc
    }

    /// Feature activations for a batch of row vectors.
    pub fn encode(&self, x: ArrayView2<f32>) -> Array2<f32> {
        self.pre_activations(x).mapv_into(|v| v.max(0.0))
    }

    /// `z W_dec^T + b_dec` for a batch of activation rows.
    pub fn decode(&self, z: ArrayView2<f32>) -> Array2<f32> {
        z.dot(&self.w_dec.t()) + &self.b_dec
    }

    pub fn forward(&self, x: ArrayView1<f32>) -> Result<CoderOutput> {
        if x.len() != self.d_in() {
            return Err(Error::Input(format!(
                "coder input has length {}, expected {}",
                x.len(),
                self.d_in()
            )));
        }
        let z = (self.w_enc.dot(&x) + &self.b_enc).mapv_into(|v| v.max(0.0));
        let reconstruction = self.w_dec.dot(&z) + &self.b_dec;
        Ok(CoderOutput { z, reconstruction })
    }

    /// Per-example loss: squared reconstruction error plus `lambda1 * |z|_1`.
    pub fn loss(
        &self,
        x: ArrayView1<f32>,
        target: ArrayView1<f32>,
        lambda1: f32,
    ) -> Result<LossParts> {
        if lambda1 < 0.0 || !lambda1.is_finite() {
            return Err(Error::Usage(format!("lambda1 must be >= 0, got {lambda1}")));
        }
        if target.len() != self.d_out() {
            return Err(Error::Input(format!(
                "target has length {}, expected {}",
                target.len(),
                self.d_out()
            )));
        }
        if self.kind == CoderKind::Sae && x != target {
            return Err(Error::Usage(
                "an SAE's target must be its own input".into(),
            ));
        }
        let out = self.forward(x)?;
        let faithfulness: f64 = out
            .reconstruction
            .iter()
            .zip(target.iter())
            .map(|(&r, &t)| (t as f64 - r as f64).powi(2))
            .sum();
        let l1: f64 = out.z.iter().map(|&v| v.abs() as f64).sum();
        let sparsity = lambda1 as f64 * l1;
        Ok(LossParts {
            total: faithfulness + sparsity,
            faithfulness,
            sparsity,
        })
    }

    /// Encoder row and decoder column of feature `i`, copied out.
    pub fn feature_vectors(&self, i: usize) -> Result<(Array1<f32>, Array1<f32>)> {
        if i >= self.d_features() {
            return Err(Error::Input(format!(
                "feature {i} out of range (d_features = {})",
                self.d_features()
            )));
        }
        Ok((
            self.w_enc.row(i).to_owned(),
            self.w_dec.column(i).to_owned(),
        ))
    }

    /// Weights-only connection matrix between this coder's decoder and an
    /// upper coder's encoder: entry `(j, i)` is `f_dec(i) . f_enc'(j)`.
    pub fn connections_to(&self, upper: &Coder) -> Result<Array2<f32>> {
        if upper.d_in() != self.d_out() {
            return Err(Error::Config("coder dimensions do not chain".into()));
        }
        Ok(upper.w_enc.dot(&self.w_dec))
    }

    /// Decoder norm of every feature.
    pub fn decoder_norms(&self) -> Array1<f32> {
        self.w_dec
            .axis_iter(Axis(1))
            .map(|c| dot64(c, c).sqrt() as f32)
            .collect()
    }
}
