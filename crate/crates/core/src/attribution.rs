//! Feature attributions, OV pullbacks, LayerNorm linearization,
//! de-embeddings and direct logit attribution.
//!
//! A [`PulledBackFeature`] is a residual-space direction `d` plus a constant
//! `c` such that the attribution to its origin of any residual state `x` at
//! its site is `d . x + c`. Directions produced by [`pullback_through_feature`]
//! and [`attention_attribution`] live on the post-LayerNorm side of a site;
//! [`apply_ln_scale`] moves them to the residual stream using the cached
//! per-token scale, folding the LayerNorm gain into the direction and its
//! bias into the constant.

use std::io::Write;

use ndarray::{Array1, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::coder::Coder;
use crate::corpus::Vocab;
use crate::error::{Error, Result};
use crate::model::{ActivationCache, LnCache, ModelParams};
use crate::ops::{center, dot64};

/// Feature `feature` of the layer-`layer` coder at token position `token`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FeatureHandle {
    pub layer: usize,
    pub feature: usize,
    pub token: usize,
}

/// Which side of a layer's attention sublayer a residual site is on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// Before attention: read by LayerNorm 1.
    Pre,
    /// After attention: read by LayerNorm 2 and the MLP.
    Mid,
    /// The final residual, read by the final LayerNorm.
    Final,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Site {
    pub layer: usize,
    pub stage: Stage,
    pub token: usize,
}

impl Site {
    pub fn pre(layer: usize, token: usize) -> Self {
        Site { layer, stage: Stage::Pre, token }
    }

    pub fn mid(layer: usize, token: usize) -> Self {
        Site { layer, stage: Stage::Mid, token }
    }

    /// Layers whose MLP output is part of the residual at this site.
    pub fn mlp_layers_below(&self) -> std::ops::Range<usize> {
        0..self.layer
    }

    /// Layers whose attention heads write into the residual at this site.
    pub fn head_layers_below(&self) -> std::ops::Range<usize> {
        match self.stage {
            Stage::Pre => 0..self.layer,
            Stage::Mid => 0..self.layer + 1,
            Stage::Final => 0..self.layer,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Origin {
    Feature(FeatureHandle),
    Head {
        layer: usize,
        head: usize,
        source: usize,
        dest: usize,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct PulledBackFeature {
    pub direction: Array1<f32>,
    pub origin: Origin,
    /// Product of attention scores and inverse LayerNorm scales applied.
    pub scale_applied: f64,
    /// Residual site the direction reads, once LayerNorm has been applied.
    pub site: Option<Site>,
    /// Bias contributions collected along the way.
    pub constant: f64,
}

impl PulledBackFeature {
    /// Attribution to the origin of residual state `x` at the site.
    pub fn attribution(&self, x: ArrayView1<f32>) -> f64 {
        dot64(self.direction.view(), x) + self.constant
    }
}

/// `value = input_dependent_factor * input_invariant_factor`, with the
/// product formed exactly in f64.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Attribution {
    pub value: f64,
    pub input_dependent_factor: f32,
    pub input_invariant_factor: f32,
}

impl Attribution {
    pub fn new(activation: f32, invariant: f32) -> Self {
        Attribution {
            value: activation as f64 * invariant as f64,
            input_dependent_factor: activation,
            input_invariant_factor: invariant,
        }
    }
}

/// Weights-only factor `f_dec . direction`, rounded once to f32.
pub fn invariant_factor(f_dec: ArrayView1<f32>, direction: ArrayView1<f32>) -> f32 {
    dot64(f_dec, direction) as f32
}

fn coder_input<'a>(cache: &'a ActivationCache, coder: &Coder, token: usize) -> Result<ArrayView1<'a, f32>> {
    let lc = cache
        .layers
        .get(coder.layer)
        .ok_or_else(|| Error::Input(format!("coder layer {} not in cache", coder.layer)))?;
    let input = match coder.kind {
        crate::coder::CoderKind::Transcoder => &lc.mlp_in,
        crate::coder::CoderKind::Sae => &lc.mlp_out,
    };
    if token >= input.nrows() {
        return Err(Error::Input(format!("token {token} outside a {}-token cache", input.nrows())));
    }
    Ok(input.row(token))
}

/// Pre-activation `f_enc . x + b_enc` of one feature on the cached input,
/// accumulated in f64.
pub fn feature_preactivation(cache: &ActivationCache, coder: &Coder, feature: usize, token: usize) -> Result<f64> {
    if feature >= coder.d_features() {
        return Err(Error::Input(format!("feature {feature} out of range")));
    }
    let x = coder_input(cache, coder, token)?;
    Ok(dot64(coder.w_enc.row(feature), x) + coder.b_enc[feature] as f64)
}

/// ReLU of [`feature_preactivation`], rounded to f32.
pub fn feature_activation(cache: &ActivationCache, coder: &Coder, feature: usize, token: usize) -> Result<f32> {
    Ok((feature_preactivation(cache, coder, feature, token)? as f32).max(0.0))
}

/// Contribution of `lower` to a direction living at layer `upper_layer` on
/// the same token.
pub fn pair_attribution(
    cache: &ActivationCache,
    lower: FeatureHandle,
    upper_direction: ArrayView1<f32>,
    upper_layer: usize,
    lower_coder: &Coder,
) -> Result<Attribution> {
    if lower.layer >= upper_layer {
        return Err(Error::Usage(format!(
            "lower feature layer {} is not below layer {upper_layer}",
            lower.layer
        )));
    }
    if lower_coder.layer != lower.layer {
        return Err(Error::Usage("coder layer differs from the feature handle".into()));
    }
    if upper_direction.len() != lower_coder.d_out() {
        return Err(Error::Input("direction length differs from the coder output".into()));
    }
    let z = feature_activation(cache, lower_coder, lower.feature, lower.token)?;
    let f = invariant_factor(lower_coder.w_dec.column(lower.feature), upper_direction);
    Ok(Attribution::new(z, f))
}

/// Attribution through head `(layer, head)` from source `s` to destination
/// `t`, and the pulled-back direction `score * W_OV^T u` on the
/// post-LayerNorm source vector.
pub fn attention_attribution(
    params: &ModelParams,
    cache: &ActivationCache,
    layer: usize,
    head: usize,
    source: usize,
    dest: usize,
    upper_direction: ArrayView1<f32>,
) -> Result<(f64, PulledBackFeature)> {
    if source > dest {
        return Err(Error::Input(format!("source {source} comes after destination {dest}")));
    }
    if layer >= params.config.n_layers || head >= params.config.n_heads {
        return Err(Error::Input(format!("head {layer}:{head} out of range")));
    }
    let lc = &cache.layers[layer];
    if dest >= lc.pattern.dim().1 {
        return Err(Error::Input(format!("token {dest} outside the cache")));
    }
    let score = lc.pattern[[head, dest, source]];
    let back = params.ov_transpose_apply(layer, head, upper_direction);
    let value = score as f64 * dot64(back.view(), lc.ln1.output.row(source));
    Ok((
        value,
        PulledBackFeature {
            direction: back * score,
            origin: Origin::Head {
                layer,
                head,
                source,
                dest,
            },
            scale_applied: score as f64,
            site: None,
            constant: 0.0,
        },
    ))
}

/// `(u . f_dec) f_enc`, the direction whose dot with the coder input gives
/// the lower feature's contribution to `u` (minus the encoder-bias term,
/// which goes into the constant).
pub fn pullback_through_feature(lower: FeatureHandle, upper_direction: ArrayView1<f32>, lower_coder: &Coder) -> Result<PulledBackFeature> {
    let (f_enc, f_dec) = lower_coder.feature_vectors(lower.feature)?;
    if upper_direction.len() != f_dec.len() {
        return Err(Error::Input("direction length differs from the coder output".into()));
    }
    let c = invariant_factor(f_dec.view(), upper_direction);
    Ok(PulledBackFeature {
        direction: f_enc * c,
        origin: Origin::Feature(lower),
        scale_applied: 1.0,
        site: None,
        constant: c as f64 * lower_coder.b_enc[lower.feature] as f64,
    })
}

/// Cached LayerNorm, its gain and bias, and the residual it reads.
type LnSite<'a> = (&'a LnCache, ArrayView1<'a, f32>, ArrayView1<'a, f32>, ArrayView1<'a, f32>);

fn ln_at<'a>(params: &'a ModelParams, cache: &'a ActivationCache, site: Site) -> Result<LnSite<'a>> {
    let missing = || Error::Usage(format!("no cached LayerNorm at {site:?}"));
    let (ln, p, resid) = match site.stage {
        Stage::Pre => {
            let lc = cache.layers.get(site.layer).ok_or_else(missing)?;
            let lp = &params.layers[site.layer];
            (&lc.ln1, &lp.ln1, &lc.resid_pre)
        }
        Stage::Mid => {
            let lc = cache.layers.get(site.layer).ok_or_else(missing)?;
            let lp = &params.layers[site.layer];
            (&lc.ln2, &lp.ln2, &lc.resid_mid)
        }
        Stage::Final => (&cache.ln_final, &params.ln_final, &cache.resid_final),
    };
    if site.token >= ln.sigma.len() {
        return Err(missing());
    }
    Ok((ln, p.gain.view(), p.bias.view(), resid.row(site.token)))
}

/// Move a post-LayerNorm direction to the residual stream at `site`:
/// `d' = center(gain * d) / sigma`, constant `+= d . bias`.
pub fn apply_ln_scale(feature: &PulledBackFeature, params: &ModelParams, cache: &ActivationCache, site: Site) -> Result<PulledBackFeature> {
    if feature.site.is_some() {
        return Err(Error::Usage("LayerNorm scale already applied".into()));
    }
    let (ln, gain, bias, resid) = ln_at(params, cache, site)?;
    if resid.iter().all(|&v| v == 0.0) {
        return Err(Error::Input(format!("residual at {site:?} is zero; the norm ratio is undefined")));
    }
    let sigma = ln.sigma[site.token];
    let mut d = &feature.direction * &gain;
    center(&mut d);
    d.mapv_inplace(|v| v / sigma);
    Ok(PulledBackFeature {
        direction: d,
        origin: feature.origin,
        scale_applied: feature.scale_applied / sigma as f64,
        site: Some(site),
        constant: feature.constant + dot64(feature.direction.view(), bias),
    })
}

/// `W_E . direction`: one score per vocabulary token.
pub fn deembed_scores(w_e: ArrayView2<f32>, direction: ArrayView1<f32>) -> Result<Array1<f64>> {
    if w_e.ncols() != direction.len() {
        return Err(Error::Input(format!(
            "direction has length {}, embeddings have width {}",
            direction.len(),
            w_e.ncols()
        )));
    }
    Ok(w_e.outer_iter().map(|row| dot64(row, direction)).collect())
}

/// Indices of the `k` largest scores (clamped to the length), ties by
/// ascending index.
pub fn top_k(scores: &[f64], k: usize) -> Vec<(usize, f64)> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.into_iter().take(k).map(|i| (i, scores[i])).collect()
}

/// Top-`k` de-embedding of a direction.
pub fn deembed(w_e: ArrayView2<f32>, direction: ArrayView1<f32>, k: usize) -> Result<Vec<(usize, f64)>> {
    let s = deembed_scores(w_e, direction)?;
    Ok(top_k(s.as_slice().expect("contiguous"), k))
}

/// Direct logit effect of a residual direction written at `token`: the
/// final LayerNorm linearized at its cached scale, then `W_U`.
pub fn logit_effect(params: &ModelParams, cache: &ActivationCache, token: usize, write: ArrayView1<f32>) -> Result<Array1<f64>> {
    if token >= cache.ln_final.sigma.len() {
        return Err(Error::Input(format!("token {token} outside the cache")));
    }
    let mut v = &write * &params.ln_final.gain;
    center(&mut v);
    let sigma = cache.ln_final.sigma[token] as f64;
    Ok(params
        .w_u
        .columns()
        .into_iter()
        .map(|col| dot64(col, v.view()) / sigma)
        .collect())
}

/// Direct logit attribution of one feature: `z * W_U^T LN(f_dec)`.
pub fn dla(params: &ModelParams, cache: &ActivationCache, coder: &Coder, feature: usize, token: usize) -> Result<Array1<f64>> {
    let z = feature_activation(cache, coder, feature, token)?;
    let (_, f_dec) = coder.feature_vectors(feature)?;
    Ok(logit_effect(params, cache, token, f_dec.view())? * z as f64)
}

/// Rows `rank,token_id,token_text,score`; text is empty without a vocab.
pub fn write_ranked_csv(rows: &[(usize, f64)], vocab: Option<&Vocab>, out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["rank", "token_id", "token_text", "score"])?;
    for (rank, &(id, score)) in rows.iter().enumerate() {
        let text = vocab.and_then(|v| v.token(id)).unwrap_or("");
        w.write_record([(rank + 1).to_string(), id.to_string(), text.to_string(), score.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coder::CoderKind;
    use crate::model::{forward_with_cache, MlpActivation, ModelConfig};
    use crate::testutil::{rel_close, seeded_params};
    use ndarray::{array, Array2, Axis};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (ModelParams, ActivationCache, Coder, Coder) {
        let p = seeded_params(2, 2, 8, 21);
        let (_, cache) = forward_with_cache(&p, &[3, 1, 4, 1, 5]).unwrap();
        (p.clone(), cache, Coder::exact_copy(&p, 0).unwrap(), Coder::exact_copy(&p, 1).unwrap())
    }

    #[test]
    fn inactive_feature_contributes_nothing() {
        let (_, cache, c0, c1) = setup();
        let dir = c1.w_enc.row(0);
        for i in 0..c0.d_features() {
            let z = feature_activation(&cache, &c0, i, 2).unwrap();
            if z == 0.0 {
                let a = pair_attribution(&cache, FeatureHandle { layer: 0, feature: i, token: 2 }, dir, 1, &c0).unwrap();
                assert_eq!(a.value, 0.0);
                return;
            }
        }
        panic!("no inactive feature in fixture");
    }

    #[test]
    fn orthogonal_decoder_contributes_nothing() {
        let (_, cache, mut c0, _) = setup();
        let mut dir = Array1::<f32>::zeros(8);
        dir[0] = 1.0;
        c0.w_dec.column_mut(5).fill(0.0);
        c0.w_dec[[1, 5]] = 2.0;
        let a = pair_attribution(&cache, FeatureHandle { layer: 0, feature: 5, token: 1 }, dir.view(), 1, &c0).unwrap();
        assert_eq!(a.value, 0.0);
    }

    #[test]
    fn layer_order_is_enforced() {
        let (_, cache, _, c1) = setup();
        let dir = Array1::<f32>::ones(8);
        let r = pair_attribution(&cache, FeatureHandle { layer: 1, feature: 0, token: 0 }, dir.view(), 1, &c1);
        assert!(matches!(r, Err(Error::Usage(_))));
    }

    #[test]
    fn factor_is_recovered_exactly() {
        let (_, cache, c0, c1) = setup();
        for i in 0..c0.d_features() {
            let a = pair_attribution(&cache, FeatureHandle { layer: 0, feature: i, token: 3 }, c1.w_enc.row(2), 1, &c0).unwrap();
            assert_eq!(a.value, a.input_dependent_factor as f64 * a.input_invariant_factor as f64);
            if a.input_dependent_factor > 0.0 {
                assert_eq!((a.value / a.input_dependent_factor as f64) as f32, a.input_invariant_factor);
            }
        }
    }

    #[test]
    fn attention_sources_sum_to_head_output() {
        let (p, cache, _, c1) = setup();
        let u = c1.w_enc.row(4);
        for l in 0..2 {
            for h in 0..2 {
                for t in 0..5 {
                    let mut sum = 0.0;
                    for s in 0..=t {
                        sum += attention_attribution(&p, &cache, l, h, s, t, u).unwrap().0;
                    }
                    let direct = dot64(u, cache.layers[l].head_out.index_axis(Axis(0), h).row(t));
                    assert!(rel_close(sum, direct, 1e-5, 1e-6), "{l} {h} {t}: {sum} vs {direct}");
                }
            }
        }
        assert!(attention_attribution(&p, &cache, 0, 0, 3, 2, u).is_err());
    }

    fn identity_ov() -> (ModelParams, ActivationCache) {
        let cfg = ModelConfig {
            n_layers: 1,
            n_heads: 1,
            d_model: 4,
            d_head: 4,
            d_mlp: 4,
            vocab_size: 5,
            context_len: 4,
            ln_epsilon: 1e-5,
            activation: MlpActivation::Relu,
            tied_embeddings: false,
        };
        let mut p = ModelParams::zeros(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        p.w_e.mapv_inplace(|_| rng.random_range(-1.0..1.0));
        p.layers[0].attn.w_v.index_axis_mut(Axis(0), 0).assign(&Array2::eye(4));
        p.layers[0].attn.w_o.index_axis_mut(Axis(0), 0).assign(&Array2::eye(4));
        let (_, cache) = forward_with_cache(&p, &[2]).unwrap();
        (p, cache)
    }

    #[test]
    fn identity_ov_with_unit_score() {
        let (p, cache) = identity_ov();
        let u = array![0.5f32, -1.0, 2.0, 0.25];
        let (v, pb) = attention_attribution(&p, &cache, 0, 0, 0, 0, u.view()).unwrap();
        assert!((v - dot64(u.view(), cache.layers[0].ln1.output.row(0))).abs() < 1e-6);
        assert_eq!(pb.direction, u);
    }

    #[test]
    fn zero_score_gives_zero() {
        let (p, mut cache, _, c1) = setup();
        cache.layers[0].pattern[[1, 3, 1]] = 0.0;
        let (v, pb) = attention_attribution(&p, &cache, 0, 1, 1, 3, c1.w_enc.row(0)).unwrap();
        assert_eq!(v, 0.0);
        assert!(pb.direction.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn pullback_cases() {
        let (_, cache, c0, c1) = setup();
        let mut coder = c0.clone();
        coder.w_enc.row_mut(0).fill(0.0);
        coder.w_enc[[0, 0]] = 1.0;
        coder.w_dec.column_mut(0).fill(0.0);
        coder.w_dec[[0, 0]] = 2.0;
        let mut u = Array1::<f32>::zeros(8);
        u[0] = 1.0;
        let h = FeatureHandle { layer: 0, feature: 0, token: 0 };
        let pb = pullback_through_feature(h, u.view(), &coder).unwrap();
        let mut want = Array1::<f32>::zeros(8);
        want[0] = 2.0;
        assert_eq!(pb.direction, want);
        let mut ortho = Array1::<f32>::zeros(8);
        ortho[1] = 1.0;
        let zero = pullback_through_feature(h, ortho.view(), &coder).unwrap();
        assert!(zero.direction.iter().all(|&x| x == 0.0));

        let u = c1.w_enc.row(1);
        for i in 0..c0.d_features() {
            for t in 0..5 {
                let h = FeatureHandle { layer: 0, feature: i, token: t };
                let a = pair_attribution(&cache, h, u, 1, &c0).unwrap();
                if a.input_dependent_factor > 0.0 {
                    let pb = pullback_through_feature(h, u, &c0).unwrap();
                    let via = pb.attribution(cache.layers[0].mlp_in.row(t));
                    assert!(rel_close(via, a.value, 1e-5, 1e-6), "{via} vs {}", a.value);
                }
            }
        }
    }

    #[test]
    fn ln_linearization_reproduces_values() {
        let (p, cache, c0, c1) = setup();
        let u = c1.w_enc.row(3).to_owned();
        let pb = PulledBackFeature {
            direction: u.clone(),
            origin: Origin::Feature(FeatureHandle { layer: 1, feature: 3, token: 2 }),
            scale_applied: 1.0,
            site: None,
            constant: 0.0,
        };
        let scaled = apply_ln_scale(&pb, &p, &cache, Site::mid(1, 2)).unwrap();
        let via = scaled.attribution(cache.layers[1].resid_mid.row(2));
        let direct = dot64(u.view(), cache.layers[1].mlp_in.row(2));
        assert!(rel_close(via, direct, 1e-5, 1e-6));
        assert!(apply_ln_scale(&scaled, &p, &cache, Site::mid(1, 2)).is_err());
        assert!(apply_ln_scale(&pb, &p, &cache, Site::mid(5, 2)).is_err());
        assert!(apply_ln_scale(&pb, &p, &cache, Site::pre(0, 9)).is_err());
        let _ = c0;
    }

    #[test]
    fn ln_unit_ratio_leaves_centered_direction() {
        let (p, mut cache, _, _) = setup();
        let mut params = p.clone();
        params.layers[0].ln1.gain.fill(1.0);
        cache.layers[0].ln1.sigma[1] = 1.0;
        let mut d = array![1.0f32, -1.0, 2.0, -2.0, 0.5, -0.5, 3.0, -3.0];
        center(&mut d);
        let pb = PulledBackFeature {
            direction: d.clone(),
            origin: Origin::Feature(FeatureHandle { layer: 0, feature: 0, token: 1 }),
            scale_applied: 1.0,
            site: None,
            constant: 0.0,
        };
        assert_eq!(apply_ln_scale(&pb, &params, &cache, Site::pre(0, 1)).unwrap().direction, d);
        cache.layers[0].ln1.sigma[1] = 2.0;
        assert_eq!(apply_ln_scale(&pb, &params, &cache, Site::pre(0, 1)).unwrap().direction, d / 2.0);
    }

    #[test]
    fn ln_scale_matches_finite_differences_off_the_radial_direction() {
        let (p, cache, _, c1) = setup();
        let site = Site::mid(1, 3);
        let u = c1.w_enc.row(0).to_owned();
        let pb = PulledBackFeature {
            direction: u.clone(),
            origin: Origin::Feature(FeatureHandle { layer: 1, feature: 0, token: 3 }),
            scale_applied: 1.0,
            site: None,
            constant: 0.0,
        };
        let scaled = apply_ln_scale(&pb, &p, &cache, site).unwrap();
        let x = cache.layers[1].resid_mid.row(3).to_owned();
        let mut xc = x.clone();
        center(&mut xc);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut y: Array1<f32> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let proj = (dot64(y.view(), xc.view()) / dot64(xc.view(), xc.view())) as f32;
        y = &y - &(&xc * proj);
        let lp = &p.layers[1].ln2;
        let f = |v: &Array1<f32>| -> f64 {
            let (_, _, out) = crate::ops::layer_norm(v.view().insert_axis(Axis(0)), lp.gain.view(), lp.bias.view(), 1e-5, None);
            dot64(u.view(), out.row(0))
        };
        let h = 1e-2f32;
        let fd = (f(&(&x + &(&y * h))) - f(&(&x - &(&y * h)))) / (2.0 * h as f64);
        let lin = dot64(scaled.direction.view(), y.view());
        assert!((fd - lin).abs() <= 0.05 * lin.abs().max(1e-3), "{fd} vs {lin}");
    }

    #[test]
    fn zero_residual_is_rejected() {
        let (p, mut cache, _, _) = setup();
        cache.layers[0].resid_pre.row_mut(0).fill(0.0);
        let pb = PulledBackFeature {
            direction: Array1::ones(8),
            origin: Origin::Feature(FeatureHandle { layer: 0, feature: 0, token: 0 }),
            scale_applied: 1.0,
            site: None,
            constant: 0.0,
        };
        assert!(matches!(apply_ln_scale(&pb, &p, &cache, Site::pre(0, 0)), Err(Error::Input(_))));
    }

    #[test]
    fn deembed_one_hot_and_ties() {
        let w_e = Array2::<f32>::eye(4);
        let d = array![0.5f32, -1.0, 2.0, 0.0];
        assert_eq!(deembed(w_e.view(), d.view(), 4).unwrap(), vec![(2, 2.0), (0, 0.5), (3, 0.0), (1, -1.0)]);
        let zero = Array1::<f32>::zeros(4);
        let top = deembed(w_e.view(), zero.view(), 3).unwrap();
        assert_eq!(top, vec![(0, 0.0), (1, 0.0), (2, 0.0)]);
        assert_eq!(deembed(w_e.view(), d.view(), 99).unwrap().len(), 4);
    }

    #[test]
    fn deembed_matches_brute_force() {
        let p = seeded_params(1, 2, 8, 13);
        let c = Coder::exact_copy(&p, 0).unwrap();
        for i in 0..c.d_features() {
            let s = deembed_scores(p.w_e.view(), c.w_enc.row(i)).unwrap();
            for v in 0..p.config.vocab_size {
                let mut acc = 0.0f64;
                for j in 0..8 {
                    acc += p.w_e[[v, j]] as f64 * c.w_enc[[i, j]] as f64;
                }
                assert!((s[v] - acc).abs() <= 1e-7 * acc.abs().max(1.0));
            }
        }
    }

    #[test]
    fn dla_trivial_cases() {
        let cfg = ModelConfig {
            n_layers: 1,
            n_heads: 1,
            d_model: 4,
            d_head: 4,
            d_mlp: 4,
            vocab_size: 4,
            context_len: 2,
            ln_epsilon: 1e-5,
            activation: MlpActivation::Relu,
            tied_embeddings: false,
        };
        let mut p = ModelParams::zeros(&cfg).unwrap();
        p.w_u = Array2::eye(4);
        p.w_e[[1, 0]] = 1.0;
        let (_, mut cache) = forward_with_cache(&p, &[1]).unwrap();
        cache.ln_final.sigma[0] = 1.0;
        cache.layers[0].mlp_in.row_mut(0).assign(&array![1.0f32, 0.0, 0.0, 0.0]);
        let f_dec = array![0.75f32, -0.25, -0.25, -0.25];
        let mut enc = Array2::<f32>::zeros((4, 4));
        enc[[0, 0]] = 3.0;
        let mut dec = Array2::<f32>::zeros((4, 4));
        dec.column_mut(0).assign(&f_dec);
        let c = Coder::new(CoderKind::Transcoder, 0, enc, Array1::zeros(4), dec, Array1::zeros(4)).unwrap();
        let d = dla(&p, &cache, &c, 0, 0).unwrap();
        assert_eq!(d.to_vec(), vec![2.25, -0.75, -0.75, -0.75]);
        assert!(dla(&p, &cache, &c, 1, 0).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dla_sums_to_mlp_logit_effect() {
        let p = seeded_params(2, 2, 8, 17);
        let c = Coder::exact_copy(&p, 1).unwrap();
        let (_, cache) = forward_with_cache(&p, &[1, 2, 3]).unwrap();
        for t in 0..3 {
            let mut total = logit_effect(&p, &cache, t, c.b_dec.view()).unwrap();
            for i in 0..c.d_features() {
                total += &dla(&p, &cache, &c, i, t).unwrap();
            }
            let direct = logit_effect(&p, &cache, t, cache.layers[1].mlp_out.row(t)).unwrap();
            for (a, b) in total.iter().zip(direct.iter()) {
                assert!(rel_close(*a, *b, 1e-4, 1e-5), "{a} vs {b}");
            }
        }
    }

    #[test]
    fn ranked_csv() {
        let v = Vocab::from_tokens(vec!["a".into(), "b".into()]).unwrap();
        let mut buf = Vec::new();
        write_ranked_csv(&[(1, 2.5), (0, -1.0)], Some(&v), &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "rank,token_id,token_text,score\n1,1,b,2.5\n2,0,a,-1\n");
    }
}
