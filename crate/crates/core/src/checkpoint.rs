//! TCW1 tensor checkpoints.
//!
//! Layout:
//!
//! ```text
//! "TCW1" | u32 LE header length | JSON manifest (space padded) | payload
//! ```
//!
//! The manifest is padded so that the payload starts on a 64-byte boundary.
//! Each tensor entry's `offset` is relative to the payload start and is
//! itself a multiple of 64, so absolute file offsets are aligned too.
//! Payloads are contiguous little-endian f32 in row-major order.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array1, Array2, Array3, ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::coder::{Coder, CoderKind};
use crate::error::{Error, Result};
use crate::trainer::ActivationPairStream;
use crate::model::{
    AttentionParams, LayerNormParams, LayerParams, MlpParams, ModelConfig, ModelParams,
};

pub const MAGIC: &[u8; 4] = b"TCW1";
pub const FORMAT_VERSION: u32 = 1;
const ALIGN: usize = 64;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct TensorEntry {
    pub dtype: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    kind: String,
    #[serde(default)]
    config: Value,
    tensors: BTreeMap<String, TensorEntry>,
    #[serde(flatten)]
    extra: BTreeMap<String, Value>,
}

/// A decoded checkpoint: manifest metadata plus named f32 tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorFile {
    pub kind: String,
    pub config: Value,
    /// Additional top-level manifest fields.
    pub meta: BTreeMap<String, Value>,
    pub tensors: BTreeMap<String, ArrayD<f32>>,
}

fn align_up(n: usize) -> usize {
    n.div_ceil(ALIGN) * ALIGN
}

impl TensorFile {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = BTreeMap::new();
        let mut offset = 0usize;
        for (name, t) in &self.tensors {
            entries.insert(
                name.clone(),
                TensorEntry {
                    dtype: "f32".into(),
                    shape: t.shape().to_vec(),
                    offset,
                },
            );
            offset = align_up(offset + t.len() * 4);
        }
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            kind: self.kind.clone(),
            config: self.config.clone(),
            tensors: entries,
            extra: self.meta.clone(),
        };
        let mut header = serde_json::to_vec(&manifest)?;
        let padded = align_up(8 + header.len()) - 8;
        header.resize(padded, b' ');
        let mut out = Vec::with_capacity(8 + padded + offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        let data_start = out.len();
        for (name, t) in &self.tensors {
            let at = data_start + manifest.tensors[name].offset;
            out.resize(at, 0);
            for v in t.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.resize(data_start + offset, 0);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(Error::format(None, "file shorter than the 8-byte preamble"));
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::format(
                None,
                format!("bad magic {:?}, expected \"TCW1\"", &bytes[..4]),
            ));
        }
        let header_len = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let data_start = 8usize
            .checked_add(header_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| Error::format(None, "truncated manifest"))?;
        let manifest: Manifest = serde_json::from_slice(&bytes[8..data_start])
            .map_err(|e| Error::format(None, format!("invalid manifest: {e}")))?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(Error::format(
                None,
                format!("unsupported format_version {}", manifest.format_version),
            ));
        }
        let mut tensors = BTreeMap::new();
        for (name, entry) in &manifest.tensors {
            if entry.dtype != "f32" {
                return Err(Error::format(Some(name), format!("unsupported dtype {}", entry.dtype)));
            }
            if entry.offset % ALIGN != 0 {
                return Err(Error::format(Some(name), "offset is not 64-byte aligned"));
            }
            let count = entry
                .shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::format(Some(name), "shape overflows"))?;
            let start = data_start + entry.offset;
            let end = count
                .checked_mul(4)
                .and_then(|n| start.checked_add(n))
                .filter(|&e| e <= bytes.len())
                .ok_or_else(|| Error::format(Some(name), "truncated payload"))?;
            let data: Vec<f32> = bytes[start..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let arr = ArrayD::from_shape_vec(IxDyn(&entry.shape), data)
                .map_err(|e| Error::format(Some(name), e.to_string()))?;
            tensors.insert(name.clone(), arr);
        }
        Ok(TensorFile {
            kind: manifest.kind,
            config: manifest.config,
            meta: manifest.extra,
            tensors,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    fn take(&mut self, name: &str, shape: &[usize]) -> Result<ArrayD<f32>> {
        let t = self
            .tensors
            .remove(name)
            .ok_or_else(|| Error::format(Some(name), "missing tensor"))?;
        if t.shape() != shape {
            return Err(Error::format(
                Some(name),
                format!("shape {:?} does not match expected {:?}", t.shape(), shape),
            ));
        }
        Ok(t)
    }

    fn take1(&mut self, name: &str, n: usize) -> Result<Array1<f32>> {
        Ok(self.take(name, &[n])?.into_dimensionality().unwrap())
    }

    fn take2(&mut self, name: &str, r: usize, c: usize) -> Result<Array2<f32>> {
        Ok(self.take(name, &[r, c])?.into_dimensionality().unwrap())
    }

    fn take3(&mut self, name: &str, a: usize, b: usize, c: usize) -> Result<Array3<f32>> {
        Ok(self.take(name, &[a, b, c])?.into_dimensionality().unwrap())
    }

    fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::format(
                None,
                format!("expected a {kind} checkpoint, found kind {:?}", self.kind),
            ));
        }
        Ok(())
    }
}

fn collect_model(params: &ModelParams) -> Result<TensorFile> {
    let tensors = params
        .named_tensors()
        .into_iter()
        .map(|(name, shape, data)| {
            (name, ArrayD::from_shape_vec(IxDyn(&shape), data.to_vec()).expect("consistent shape"))
        })
        .collect();
    Ok(TensorFile {
        kind: "model".into(),
        config: serde_json::to_value(&params.config)?,
        meta: BTreeMap::new(),
        tensors,
    })
}

pub fn model_to_file(params: &ModelParams) -> Result<TensorFile> {
    collect_model(params)
}

pub fn model_from_file(mut file: TensorFile) -> Result<ModelParams> {
    file.expect_kind("model")?;
    let config: ModelConfig = serde_json::from_value(file.config.clone())
        .map_err(|e| Error::format(None, format!("invalid model config: {e}")))?;
    config
        .validate()
        .map_err(|e| Error::format(None, e.to_string()))?;
    let c = &config;
    let w_e = file.take2("embed.W_E", c.vocab_size, c.d_model)?;
    let w_pos = file.take2("embed.W_pos", c.context_len, c.d_model)?;
    let mut layers = Vec::with_capacity(c.n_layers);
    for l in 0..c.n_layers {
        let p = |s: &str| format!("blocks.{l}.{s}");
        layers.push(LayerParams {
            ln1: LayerNormParams {
                gain: file.take1(&p("ln1.gain"), c.d_model)?,
                bias: file.take1(&p("ln1.bias"), c.d_model)?,
            },
            attn: AttentionParams {
                w_q: file.take3(&p("attn.W_Q"), c.n_heads, c.d_model, c.d_head)?,
                w_k: file.take3(&p("attn.W_K"), c.n_heads, c.d_model, c.d_head)?,
                w_v: file.take3(&p("attn.W_V"), c.n_heads, c.d_model, c.d_head)?,
                w_o: file.take3(&p("attn.W_O"), c.n_heads, c.d_head, c.d_model)?,
            },
            ln2: LayerNormParams {
                gain: file.take1(&p("ln2.gain"), c.d_model)?,
                bias: file.take1(&p("ln2.bias"), c.d_model)?,
            },
            mlp: MlpParams {
                w_in: file.take2(&p("mlp.W_in"), c.d_model, c.d_mlp)?,
                b_in: file.take1(&p("mlp.b_in"), c.d_mlp)?,
                w_out: file.take2(&p("mlp.W_out"), c.d_mlp, c.d_model)?,
                b_out: file.take1(&p("mlp.b_out"), c.d_model)?,
            },
        });
    }
    let ln_final = LayerNormParams {
        gain: file.take1("ln_final.gain", c.d_model)?,
        bias: file.take1("ln_final.bias", c.d_model)?,
    };
    let w_u = file.take2("unembed.W_U", c.d_model, c.vocab_size)?;
    if let Some(extra) = file.tensors.keys().next() {
        return Err(Error::format(Some(extra), "unexpected tensor"));
    }
    Ok(ModelParams {
        config,
        w_e,
        w_pos,
        layers,
        ln_final,
        w_u,
    })
}

pub fn coder_to_file(coder: &Coder) -> TensorFile {
    let tensors = BTreeMap::from([
        ("W_enc".to_string(), coder.w_enc.clone().into_dyn()),
        ("b_enc".to_string(), coder.b_enc.clone().into_dyn()),
        ("W_dec".to_string(), coder.w_dec.clone().into_dyn()),
        ("b_dec".to_string(), coder.b_dec.clone().into_dyn()),
    ]);
    let meta = BTreeMap::from([
        ("layer".to_string(), json!(coder.layer)),
        ("coder_kind".to_string(), json!(coder.kind.as_str())),
        ("lambda1".to_string(), json!(coder.lambda1)),
        ("trained_tokens".to_string(), json!(coder.trained_tokens)),
    ]);
    TensorFile {
        kind: "coder".into(),
        config: json!({
            "d_in": coder.d_in(),
            "d_out": coder.d_out(),
            "d_features": coder.d_features(),
        }),
        meta,
        tensors,
    }
}

pub fn coder_from_file(mut file: TensorFile) -> Result<Coder> {
    file.expect_kind("coder")?;
    let dim = |key: &str| -> Result<usize> {
        file.config
            .get(key)
            .and_then(Value::as_u64)
            .map(|v| v as usize)
            .ok_or_else(|| Error::format(None, format!("coder config lacks `{key}`")))
    };
    let (d_in, d_out, f) = (dim("d_in")?, dim("d_out")?, dim("d_features")?);
    let layer = file
        .meta
        .get("layer")
        .and_then(Value::as_u64)
        .ok_or_else(|| Error::format(None, "coder manifest lacks `layer`"))? as usize;
    let kind: CoderKind = file
        .meta
        .get("coder_kind")
        .and_then(Value::as_str)
        .ok_or_else(|| Error::format(None, "coder manifest lacks `coder_kind`"))?
        .parse()
        .map_err(|e: Error| Error::format(None, e.to_string()))?;
    let lambda1 = file.meta.get("lambda1").and_then(Value::as_f64).unwrap_or(0.0) as f32;
    let trained_tokens = file.meta.get("trained_tokens").and_then(Value::as_u64).unwrap_or(0);
    let w_enc = file.take2("W_enc", f, d_in)?;
    let b_enc = file.take1("b_enc", f)?;
    let w_dec = file.take2("W_dec", d_out, f)?;
    let b_dec = file.take1("b_dec", d_out)?;
    let mut coder = Coder::new(kind, layer, w_enc, b_enc, w_dec, b_dec)
        .map_err(|e| Error::format(None, e.to_string()))?;
    coder.lambda1 = lambda1;
    coder.trained_tokens = trained_tokens;
    Ok(coder)
}

pub fn save_model(params: &ModelParams, path: impl AsRef<Path>) -> Result<()> {
    model_to_file(params)?.save(path)
}

pub fn load_model(path: impl AsRef<Path>) -> Result<ModelParams> {
    model_from_file(TensorFile::load(path)?)
}

pub fn save_coder(coder: &Coder, path: impl AsRef<Path>) -> Result<()> {
    coder_to_file(coder).save(path)
}

pub fn load_coder(path: impl AsRef<Path>) -> Result<Coder> {
    coder_from_file(TensorFile::load(path)?)
}

/// Largest index an f32 provenance entry stores exactly.
const MAX_EXACT_INDEX: usize = 1 << 24;

/// Harvested activations as kind `activations`, with provenance stored as
/// an `n x 2` f32 tensor.
pub fn save_activations(stream: &ActivationPairStream, path: impl AsRef<Path>) -> Result<()> {
    let n = stream.len();
    let mut prov = Vec::with_capacity(2 * n);
    for &(p, t) in &stream.provenance {
        if p >= MAX_EXACT_INDEX || t >= MAX_EXACT_INDEX {
            return Err(Error::format(Some("provenance"), "index too large to store exactly"));
        }
        prov.push(p as f32);
        prov.push(t as f32);
    }
    let tensors = BTreeMap::from([
        ("mlp_in".to_string(), stream.inputs.clone().into_dyn()),
        ("mlp_out".to_string(), stream.outputs.clone().into_dyn()),
        (
            "provenance".to_string(),
            ArrayD::from_shape_vec(IxDyn(&[n, 2]), prov).expect("two entries per row"),
        ),
    ]);
    TensorFile {
        kind: "activations".into(),
        config: json!({ "d_model": stream.inputs.ncols(), "rows": n }),
        meta: BTreeMap::from([("layer".to_string(), json!(stream.layer))]),
        tensors,
    }
    .save(path)
}

pub fn load_activations(path: impl AsRef<Path>) -> Result<ActivationPairStream> {
    let mut file = TensorFile::load(path)?;
    file.expect_kind("activations")?;
    let get = |v: &Value, key: &str| -> Result<usize> {
        v.get(key)
            .and_then(Value::as_u64)
            .map(|x| x as usize)
            .ok_or_else(|| Error::format(None, format!("activations manifest lacks `{key}`")))
    };
    let d = get(&file.config, "d_model")?;
    let n = get(&file.config, "rows")?;
    let layer = file
        .meta
        .get("layer")
        .and_then(Value::as_u64)
        .ok_or_else(|| Error::format(None, "activations manifest lacks `layer`"))? as usize;
    let inputs = file.take2("mlp_in", n, d)?;
    let outputs = file.take2("mlp_out", n, d)?;
    let prov = file.take2("provenance", n, 2)?;
    let provenance = prov
        .outer_iter()
        .map(|r| (r[0] as usize, r[1] as usize))
        .collect();
    Ok(ActivationPairStream {
        layer,
        inputs,
        outputs,
        provenance,
    })
}
