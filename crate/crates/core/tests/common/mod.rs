//! Independent reference implementations for integration tests. Nothing
//! here calls the attribution or circuit code; everything is recomputed from
//! raw weights and cached activations in f64.

#![allow(dead_code, clippy::needless_range_loop)]

use std::collections::BTreeMap;

use tc_core::circuits::{NodeKey, NodeKind};
use tc_core::model::{ActivationCache, MlpActivation, ModelConfig, ModelParams};
use tc_core::Coder;

pub fn small_config(n_layers: usize, n_heads: usize, d_model: usize, d_mlp: usize, vocab: usize) -> ModelConfig {
    ModelConfig {
        n_layers,
        n_heads,
        d_model,
        d_head: d_model / n_heads,
        d_mlp,
        vocab_size: vocab,
        context_len: 16,
        ln_epsilon: 1e-5,
        activation: MlpActivation::Relu,
        tied_embeddings: false,
    }
}

fn ln64(x: &[f64], gain: &[f32], bias: &[f32], eps: f64) -> Vec<f64> {
    let d = x.len() as f64;
    let mean = x.iter().sum::<f64>() / d;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d;
    let s = (var + eps).sqrt();
    x.iter()
        .zip(gain.iter().zip(bias))
        .map(|(v, (&g, &b))| (v - mean) / s * g as f64 + b as f64)
        .collect()
}

fn gelu64(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x * x * x)).tanh())
}

/// Straight-line forward pass, no cache, all in f64. Returns logits.
pub fn naive_forward(p: &ModelParams, tokens: &[usize]) -> Vec<Vec<f64>> {
    let c = &p.config;
    let n = tokens.len();
    let mut x: Vec<Vec<f64>> = tokens
        .iter()
        .enumerate()
        .map(|(t, &tok)| (0..c.d_model).map(|j| p.w_e[[tok, j]] as f64 + p.w_pos[[t, j]] as f64).collect())
        .collect();
    let eps = c.ln_epsilon as f64;
    for lp in &p.layers {
        let a: Vec<Vec<f64>> = x
            .iter()
            .map(|r| ln64(r, lp.ln1.gain.as_slice().unwrap(), lp.ln1.bias.as_slice().unwrap(), eps))
            .collect();
        let mut mid = x.clone();
        for h in 0..c.n_heads {
            let proj = |w: &ndarray::Array3<f32>, r: &[f64]| -> Vec<f64> {
                (0..c.d_head).map(|e| (0..c.d_model).map(|j| r[j] * w[[h, j, e]] as f64).sum()).collect()
            };
            let q: Vec<Vec<f64>> = a.iter().map(|r| proj(&lp.attn.w_q, r)).collect();
            let k: Vec<Vec<f64>> = a.iter().map(|r| proj(&lp.attn.w_k, r)).collect();
            let v: Vec<Vec<f64>> = a.iter().map(|r| proj(&lp.attn.w_v, r)).collect();
            for t in 0..n {
                let scores: Vec<f64> = (0..=t)
                    .map(|s| q[t].iter().zip(&k[s]).map(|(a, b)| a * b).sum::<f64>() / (c.d_head as f64).sqrt())
                    .collect();
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                let z: f64 = e.iter().sum();
                for j in 0..c.d_model {
                    let mut acc = 0.0;
                    for s in 0..=t {
                        let vo: f64 = (0..c.d_head).map(|d| v[s][d] * lp.attn.w_o[[h, d, j]] as f64).sum();
                        acc += e[s] / z * vo;
                    }
                    mid[t][j] += acc;
                }
            }
        }
        x = mid
            .iter()
            .map(|r| {
                let m = ln64(r, lp.ln2.gain.as_slice().unwrap(), lp.ln2.bias.as_slice().unwrap(), eps);
                let hidden: Vec<f64> = (0..c.d_mlp)
                    .map(|u| {
                        let pre = (0..c.d_model).map(|j| m[j] * lp.mlp.w_in[[j, u]] as f64).sum::<f64>() + lp.mlp.b_in[u] as f64;
                        match c.activation {
                            MlpActivation::Relu => pre.max(0.0),
                            MlpActivation::Gelu => gelu64(pre),
                        }
                    })
                    .collect();
                (0..c.d_model)
                    .map(|j| r[j] + (0..c.d_mlp).map(|u| hidden[u] * lp.mlp.w_out[[u, j]] as f64).sum::<f64>() + lp.mlp.b_out[j] as f64)
                    .collect()
            })
            .collect();
    }
    x.iter()
        .map(|r| {
            let f = ln64(r, p.ln_final.gain.as_slice().unwrap(), p.ln_final.bias.as_slice().unwrap(), eps);
            (0..c.vocab_size).map(|v| (0..c.d_model).map(|j| f[j] * p.w_u[[j, v]] as f64).sum()).collect()
        })
        .collect()
}

/// A residual read: layer, whether it is post-attention, token.
#[derive(Clone, Copy, Debug)]
pub struct Read {
    pub layer: usize,
    pub mid: bool,
    pub token: usize,
}

#[derive(Clone, Debug)]
pub struct ONode {
    pub key: NodeKey,
    pub attribution: f64,
    /// Residual direction, the site it reads, and the constant term.
    pub dir: Option<(Vec<f64>, Read, f64)>,
}

pub struct Oracle<'a> {
    pub p: &'a ModelParams,
    pub cache: &'a ActivationCache,
    pub coders: &'a [Coder],
}

fn dot(a: &[f64], b: impl IntoIterator<Item = f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn f64s<'b>(v: impl IntoIterator<Item = &'b f32>) -> Vec<f64> {
    v.into_iter().map(|&x| x as f64).collect()
}

impl<'a> Oracle<'a> {
    fn coder(&self, layer: usize) -> &Coder {
        self.coders.iter().find(|c| c.layer == layer).expect("coder for every layer")
    }

    pub fn z(&self, layer: usize, feature: usize, token: usize) -> f64 {
        let c = self.coder(layer);
        let x = self.cache.layers[layer].mlp_in.row(token);
        let pre = dot(&f64s(c.w_enc.row(feature)), x.iter().map(|&v| v as f64)) + c.b_enc[feature] as f64;
        pre
    }

    /// Direction `d` read after a LayerNorm, moved in front of it.
    fn through_ln(&self, d: &[f64], at: Read) -> (Vec<f64>, f64) {
        let lp = &self.p.layers[at.layer];
        let lc = &self.cache.layers[at.layer];
        let (ln, sigma) = if at.mid { (&lp.ln2, lc.ln2.sigma[at.token]) } else { (&lp.ln1, lc.ln1.sigma[at.token]) };
        let g: Vec<f64> = d.iter().zip(ln.gain.iter()).map(|(a, &b)| a * b as f64).collect();
        let mean = g.iter().sum::<f64>() / g.len() as f64;
        let out = g.iter().map(|v| (v - mean) / sigma as f64).collect();
        (out, dot(d, ln.bias.iter().map(|&b| b as f64)))
    }

    fn ln1_out(&self, layer: usize, s: usize) -> Vec<f64> {
        let lp = &self.p.layers[layer];
        let x = f64s(self.cache.layers[layer].resid_pre.row(s));
        let sigma = self.cache.layers[layer].ln1.sigma[s] as f64;
        let mean = x.iter().sum::<f64>() / x.len() as f64;
        x.iter()
            .enumerate()
            .map(|(j, v)| (v - mean) / sigma * lp.ln1.gain[j] as f64 + lp.ln1.bias[j] as f64)
            .collect()
    }

    pub fn root(&self, layer: usize, feature: usize, token: usize) -> ONode {
        let c = self.coder(layer);
        let f_enc = f64s(c.w_enc.row(feature));
        let at = Read { layer, mid: true, token };
        let (d, k) = self.through_ln(&f_enc, at);
        ONode {
            key: NodeKey::feature(layer, feature, token),
            attribution: self.z(layer, feature, token),
            dir: Some((d, at, k + c.b_enc[feature] as f64)),
        }
    }

    pub fn children(&self, node: &ONode) -> Vec<ONode> {
        let Some((d, at, _)) = &node.dir else { return Vec::new() };
        let tau = at.token;
        let mut out = vec![ONode {
            key: NodeKey { layer: 0, token: tau, kind: NodeKind::Embedding, index: 0 },
            attribution: dot(d, self.cache.embed.row(tau).iter().map(|&v| v as f64)),
            dir: None,
        }];
        for l in 0..at.layer {
            let c = self.coder(l);
            for i in 0..c.d_features() {
                let z = self.z(l, i, tau);
                if z <= 0.0 {
                    continue;
                }
                let factor = dot(d, c.w_dec.column(i).iter().map(|&v| v as f64));
                let f_enc: Vec<f64> = c.w_enc.row(i).iter().map(|&v| v as f64 * factor).collect();
                let below = Read { layer: l, mid: true, token: tau };
                let (nd, k) = self.through_ln(&f_enc, below);
                out.push(ONode {
                    key: NodeKey::feature(l, i, tau),
                    attribution: z * factor,
                    dir: Some((nd, below, k + factor * c.b_enc[i] as f64)),
                });
            }
            out.push(ONode {
                key: NodeKey { layer: l, token: tau, kind: NodeKind::Bias, index: 0 },
                attribution: dot(d, c.b_dec.iter().map(|&v| v as f64)),
                dir: None,
            });
        }
        let head_layers = if at.mid { at.layer + 1 } else { at.layer };
        for l in 0..head_layers {
            let attn = &self.p.layers[l].attn;
            let dm = self.p.config.d_model;
            for h in 0..self.p.config.n_heads {
                // back = W_V (W_O d)
                let through_o: Vec<f64> = (0..self.p.config.d_head)
                    .map(|e| (0..dm).map(|k| attn.w_o[[h, e, k]] as f64 * d[k]).sum())
                    .collect();
                let back: Vec<f64> = (0..dm)
                    .map(|j| through_o.iter().enumerate().map(|(e, v)| attn.w_v[[h, j, e]] as f64 * v).sum())
                    .collect();
                for s in 0..=tau {
                    let score = self.cache.layers[l].pattern[[h, tau, s]] as f64;
                    let value = score * dot(&back, self.ln1_out(l, s));
                    let scaled: Vec<f64> = back.iter().map(|v| v * score).collect();
                    let src = Read { layer: l, mid: false, token: s };
                    let (nd, k) = self.through_ln(&scaled, src);
                    out.push(ONode {
                        key: NodeKey::head(l, h, s),
                        attribution: value,
                        dir: Some((nd, src, k)),
                    });
                }
            }
        }
        out
    }

    /// Every path of at most `depth` extensions from the root, keyed by its
    /// node sequence, mapped to the last node's attribution.
    pub fn all_paths(&self, layer: usize, feature: usize, token: usize, depth: usize) -> BTreeMap<Vec<NodeKey>, f64> {
        let mut out = BTreeMap::new();
        let root = self.root(layer, feature, token);
        fn walk(o: &Oracle, node: &ONode, prefix: &mut Vec<NodeKey>, left: usize, out: &mut BTreeMap<Vec<NodeKey>, f64>) {
            prefix.push(node.key);
            out.insert(prefix.clone(), node.attribution);
            if left > 0 {
                for c in o.children(node) {
                    walk(o, &c, prefix, left - 1, out);
                }
            }
            prefix.pop();
        }
        walk(self, &root, &mut Vec::new(), depth, &mut out);
        out
    }

    /// Follow the single best child (largest attribution, smallest key on
    /// ties) for `depth` steps.
    pub fn argmax_chain(&self, layer: usize, feature: usize, token: usize, depth: usize) -> Vec<(NodeKey, f64)> {
        let mut node = self.root(layer, feature, token);
        let mut chain = vec![(node.key, node.attribution)];
        for _ in 0..depth {
            let kids = self.children(&node);
            let Some(best) = kids
                .into_iter()
                .reduce(|a, b| if b.attribution > a.attribution || (b.attribution == a.attribution && b.key < a.key) { b } else { a })
            else {
                break;
            };
            chain.push((best.key, best.attribution));
            node = best;
        }
        chain
    }
}
