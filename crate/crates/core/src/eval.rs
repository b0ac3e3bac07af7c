//! Replacement fidelity, sparsity and greater-than task metrics.

use std::collections::BTreeMap;
use std::io::Write;

use ndarray::{Array1, ArrayView1, ArrayView2};
use rayon::prelude::*;
use serde::Serialize;

use crate::attribution::deembed_scores;
use crate::coder::{Coder, CoderKind};
use crate::corpus::{GreaterThanTask, Vocab};
use crate::error::{Error, Result};
use crate::lm::sequence_loss;
use crate::model::{forward_with_cache, last_logits, run_with_options, MlpOverride, ModelParams, RunOptions};
use crate::ops::dot64;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub mean_l0: f64,
    pub ce_original: f64,
    pub ce_replaced: f64,
    pub ce_mean_ablated: f64,
    pub tokens_evaluated: usize,
    /// Whether `ce_original <= ce_replaced <= ce_mean_ablated` held.
    pub ordering_ok: bool,
}

impl EvalReport {
    pub fn write_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.serialize(self)?;
        w.flush()?;
        Ok(())
    }
}

/// Mean over rows of the number of strictly positive entries.
pub fn mean_l0(z: ArrayView2<f32>) -> f64 {
    if z.nrows() == 0 {
        return 0.0;
    }
    z.iter().filter(|&&v| v > 0.0).count() as f64 / z.nrows() as f64
}

/// Summed next-token cross entropy and prediction count, skipping targets
/// equal to `pad`.
fn masked_loss(logits: ArrayView2<f32>, tokens: &[usize], pad: Option<usize>) -> (f64, usize) {
    if pad.is_none() {
        return sequence_loss(logits, tokens);
    }
    let mut total = 0.0;
    let mut count = 0;
    for t in 0..tokens.len().saturating_sub(1) {
        if Some(tokens[t + 1]) == pad {
            continue;
        }
        total -= crate::ops::log_softmax(logits.row(t))[tokens[t + 1]];
        count += 1;
    }
    (total, count)
}

fn overrides_ce(
    params: &ModelParams,
    prompts: &[Vec<usize>],
    overrides: &BTreeMap<usize, MlpOverride>,
    pad: Option<usize>,
    coders: &[&Coder],
) -> Result<(f64, usize, f64, usize)> {
    let parts: Vec<(f64, usize, f64, usize)> = prompts
        .par_iter()
        .map(|p| {
            let cache = run_with_options(
                params,
                p,
                &RunOptions {
                    overrides: overrides.clone(),
                    frozen: None,
                },
            )?;
            let (l, c) = masked_loss(cache.logits.view(), p, pad);
            let mut active = 0.0;
            for coder in coders {
                let input = match coder.kind {
                    CoderKind::Transcoder => &cache.layers[coder.layer].mlp_in,
                    CoderKind::Sae => &cache.layers[coder.layer].mlp_out,
                };
                let z = coder.encode(input.view());
                active += z.iter().filter(|&&v| v > 0.0).count() as f64;
            }
            Ok((l, c, active, p.len()))
        })
        .collect::<Result<_>>()?;
    Ok(parts.iter().fold((0.0, 0, 0.0, 0), |a, b| (a.0 + b.0, a.1 + b.1, a.2 + b.2, a.3 + b.3)))
}

/// Mean MLP output per layer over every token of the corpus.
pub fn mean_mlp_outputs(params: &ModelParams, prompts: &[Vec<usize>]) -> Result<Vec<Array1<f32>>> {
    let caches: Vec<Vec<Array1<f64>>> = prompts
        .par_iter()
        .map(|p| {
            let (_, c) = forward_with_cache(params, p)?;
            Ok(c.layers
                .iter()
                .map(|l| l.mlp_out.sum_axis(ndarray::Axis(0)).mapv(|v| v as f64))
                .collect())
        })
        .collect::<Result<_>>()?;
    let n: usize = prompts.iter().map(Vec::len).sum();
    let d = params.config.d_model;
    let mut sums = vec![Array1::<f64>::zeros(d); params.config.n_layers];
    for per_prompt in &caches {
        for (s, v) in sums.iter_mut().zip(per_prompt) {
            *s += v;
        }
    }
    Ok(sums.into_iter().map(|s| s.mapv(|v| (v / n.max(1) as f64) as f32)).collect())
}

/// CE of the original model and with `layer` mean-ablated to `mean`.
pub fn reference_ce(params: &ModelParams, layer: usize, mean: &Array1<f32>, prompts: &[Vec<usize>]) -> Result<(f64, f64)> {
    let (l0, c0, _, _) = overrides_ce(params, prompts, &BTreeMap::new(), None, &[])?;
    let o = BTreeMap::from([(layer, MlpOverride::Mean(mean))]);
    let (l1, c1, _, _) = overrides_ce(params, prompts, &o, None, &[])?;
    Ok((l0 / c0.max(1) as f64, l1 / c1.max(1) as f64))
}

/// Replace every coder's layer at once and compare against the original and
/// the per-layer mean-ablated model. Means come from the same corpus.
pub fn evaluate(params: &ModelParams, coders: &[&Coder], prompts: &[Vec<usize>]) -> Result<EvalReport> {
    evaluate_masked(params, coders, prompts, None)
}

/// As [`evaluate`], with targets equal to `pad` left out of the CE.
pub fn evaluate_masked(params: &ModelParams, coders: &[&Coder], prompts: &[Vec<usize>], pad: Option<usize>) -> Result<EvalReport> {
    if prompts.is_empty() {
        return Err(Error::Input("evaluation corpus is empty".into()));
    }
    if coders.is_empty() {
        return Err(Error::Usage("evaluate needs at least one coder".into()));
    }
    let means = mean_mlp_outputs(params, prompts)?;
    let mut replaced = BTreeMap::new();
    let mut ablated = BTreeMap::new();
    for c in coders {
        if c.layer >= params.config.n_layers {
            return Err(Error::Config(format!("coder layer {} out of range", c.layer)));
        }
        let o = match c.kind {
            CoderKind::Transcoder => MlpOverride::Coder(c),
            CoderKind::Sae => MlpOverride::SaeOutput(c),
        };
        if replaced.insert(c.layer, o).is_some() {
            return Err(Error::Config(format!("two coders for layer {}", c.layer)));
        }
        ablated.insert(c.layer, MlpOverride::Mean(&means[c.layer]));
    }
    let (lo, co, _, _) = overrides_ce(params, prompts, &BTreeMap::new(), pad, &[])?;
    let (lr, cr, active, tokens) = overrides_ce(params, prompts, &replaced, pad, coders)?;
    let (la, ca, _, _) = overrides_ce(params, prompts, &ablated, pad, &[])?;
    let ce_original = lo / co.max(1) as f64;
    let ce_replaced = lr / cr.max(1) as f64;
    let ce_mean_ablated = la / ca.max(1) as f64;
    Ok(EvalReport {
        mean_l0: active / (tokens as f64 * coders.len() as f64),
        ce_original,
        ce_replaced,
        ce_mean_ablated,
        tokens_evaluated: co,
        ordering_ok: ce_original <= ce_replaced && ce_replaced <= ce_mean_ablated,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ActivatingExample {
    pub prompt: usize,
    pub token: usize,
    pub activation: f32,
    /// Token strings from the start of the prompt up to and including
    /// `token`; absent when redacted.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub text: Option<Vec<String>>,
}

/// Top `k` (prompt, token) sites by the feature's activation on the
/// unmodified model. Ties go to the earlier prompt, then earlier token.
pub fn top_activating(
    params: &ModelParams,
    coder: &Coder,
    feature: usize,
    prompts: &[Vec<usize>],
    k: usize,
    vocab: Option<&Vocab>,
    redact: bool,
) -> Result<Vec<ActivatingExample>> {
    if feature >= coder.d_features() {
        return Err(Error::Input(format!("feature {feature} out of range")));
    }
    if k == 0 {
        return Err(Error::Usage("k must be at least 1".into()));
    }
    let (f_enc, _) = coder.feature_vectors(feature)?;
    let b = coder.b_enc[feature];
    let per_prompt: Vec<Vec<(usize, usize, f32)>> = prompts
        .par_iter()
        .enumerate()
        .map(|(pi, p)| {
            let (_, cache) = forward_with_cache(params, p)?;
            let input = match coder.kind {
                CoderKind::Transcoder => &cache.layers[coder.layer].mlp_in,
                CoderKind::Sae => &cache.layers[coder.layer].mlp_out,
            };
            Ok(input
                .outer_iter()
                .enumerate()
                .filter_map(|(t, x)| {
                    let a = (x.dot(&f_enc) + b).max(0.0);
                    (a > 0.0).then_some((pi, t, a))
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    let mut all: Vec<(usize, usize, f32)> = per_prompt.into_iter().flatten().collect();
    all.sort_by(|a, b| b.2.total_cmp(&a.2).then((a.0, a.1).cmp(&(b.0, b.1))));
    all.truncate(k);
    all.into_iter()
        .map(|(prompt, token, activation)| {
            let text = match (redact, vocab) {
                (false, Some(v)) => Some(
                    prompts[prompt][..=token]
                        .iter()
                        .map(|&id| v.token(id).unwrap_or("?").to_string())
                        .collect(),
                ),
                _ => None,
            };
            Ok(ActivatingExample {
                prompt,
                token,
                activation,
                text,
            })
        })
        .collect()
}

/// Softmax restricted to `year_tokens`, then mass on later years minus mass
/// on the input year and earlier ones.
pub fn probability_difference(logits: ArrayView1<f32>, year_tokens: &[usize], input_year: usize) -> Result<f64> {
    if input_year >= year_tokens.len() {
        return Err(Error::Input(format!(
            "input year index {input_year} not among {} years",
            year_tokens.len()
        )));
    }
    let mut seen = std::collections::HashSet::new();
    if !year_tokens.iter().all(|t| seen.insert(*t)) {
        return Err(Error::Input("year tokens must be distinct".into()));
    }
    if let Some(&bad) = year_tokens.iter().find(|&&t| t >= logits.len()) {
        return Err(Error::Input(format!("year token {bad} outside the logits")));
    }
    let vals: Vec<f64> = year_tokens.iter().map(|&t| logits[t] as f64).collect();
    let max = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = vals.iter().map(|v| (v - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    let pd: f64 = exps
        .iter()
        .enumerate()
        .map(|(j, e)| if j > input_year { e / z } else { -e / z })
        .sum();
    Ok(pd.clamp(-1.0, 1.0))
}

/// Mean probability difference over the task prompts under `overrides`.
pub fn mean_probability_difference(params: &ModelParams, task: &GreaterThanTask, overrides: &BTreeMap<usize, MlpOverride>) -> Result<f64> {
    let pds: Vec<f64> = task
        .prompts
        .par_iter()
        .zip(task.input_years.par_iter())
        .map(|(p, &y)| {
            let cache = run_with_options(
                params,
                p,
                &RunOptions {
                    overrides: overrides.clone(),
                    frozen: None,
                },
            )?;
            probability_difference(last_logits(&cache), &task.year_tokens, y)
        })
        .collect::<Result<_>>()?;
    Ok(pds.iter().sum::<f64>() / pds.len().max(1) as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationUnit {
    TranscoderFeatures,
    MlpNeurons,
}

impl AblationUnit {
    pub fn as_str(self) -> &'static str {
        match self {
            AblationUnit::TranscoderFeatures => "transcoder_features",
            AblationUnit::MlpNeurons => "mlp_neurons",
        }
    }
}

impl std::str::FromStr for AblationUnit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "transcoder_features" | "features" => Ok(AblationUnit::TranscoderFeatures),
            "mlp_neurons" | "neurons" => Ok(AblationUnit::MlpNeurons),
            other => Err(Error::Usage(format!("unknown ablation unit {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationCurve {
    pub unit: AblationUnit,
    pub layer: usize,
    /// `(k, mean probability difference)` for each requested `k`, clamped.
    pub points: Vec<(usize, f64)>,
    /// Unit indices by descending activation variance.
    pub ranking: Vec<usize>,
    pub original: f64,
    /// Full transcoder (features) or unmodified MLP (neurons).
    pub full: f64,
    /// Every unit zeroed.
    pub floor: f64,
}

impl AblationCurve {
    /// Columns `k,prob_diff,unit`.
    pub fn write_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["k", "prob_diff", "unit"])?;
        for (k, pd) in &self.points {
            w.write_record([k.to_string(), pd.to_string(), self.unit.as_str().to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Population variance of each unit's activation at the final position of
/// every task prompt.
pub fn unit_variances(params: &ModelParams, task: &GreaterThanTask, unit: AblationUnit, layer: usize, coder: Option<&Coder>) -> Result<Array1<f64>> {
    let rows: Vec<Array1<f32>> = task
        .prompts
        .par_iter()
        .map(|p| {
            let (_, cache) = forward_with_cache(params, p)?;
            let lc = &cache.layers[layer];
            let last = p.len() - 1;
            Ok(match (unit, coder) {
                (AblationUnit::TranscoderFeatures, Some(c)) => c.encode(lc.mlp_in.slice(ndarray::s![last..=last, ..])).row(0).to_owned(),
                (AblationUnit::MlpNeurons, _) => lc.mlp_hidden.as_ref().expect("plain run").1.row(last).to_owned(),
                (AblationUnit::TranscoderFeatures, None) => unreachable!("checked by caller"),
            })
        })
        .collect::<Result<_>>()?;
    let n = rows.len() as f64;
    let width = rows[0].len();
    let mut var = Array1::zeros(width);
    for j in 0..width {
        let mean = rows.iter().map(|r| r[j] as f64).sum::<f64>() / n;
        var[j] = rows.iter().map(|r| (r[j] as f64 - mean).powi(2)).sum::<f64>() / n;
    }
    Ok(var)
}

/// Keep the `k` highest-variance units of `layer` (zeroing the rest) and
/// measure the task metric, for each `k` in `ks`.
pub fn topk_ablation_curve(
    params: &ModelParams,
    task: &GreaterThanTask,
    unit: AblationUnit,
    layer: usize,
    coder: Option<&Coder>,
    ks: &[usize],
) -> Result<AblationCurve> {
    if layer >= params.config.n_layers {
        return Err(Error::Input(format!("layer {layer} out of range")));
    }
    if ks.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::Usage("ks must be sorted ascending".into()));
    }
    let width = match (unit, coder) {
        (AblationUnit::TranscoderFeatures, Some(c)) => {
            if c.kind != CoderKind::Transcoder || c.layer != layer {
                return Err(Error::Config(format!("need a layer-{layer} transcoder")));
            }
            c.d_features()
        }
        (AblationUnit::TranscoderFeatures, None) => {
            return Err(Error::Usage("feature ablation needs a transcoder".into()))
        }
        (AblationUnit::MlpNeurons, _) => params.config.d_mlp,
    };
    let var = unit_variances(params, task, unit, layer, coder)?;
    let mut ranking: Vec<usize> = (0..width).collect();
    ranking.sort_by(|&a, &b| var[b].total_cmp(&var[a]).then(a.cmp(&b)));

    let run = |keep: &[bool]| -> Result<f64> {
        let o = match (unit, coder) {
            (AblationUnit::TranscoderFeatures, Some(c)) => MlpOverride::MaskedCoder { coder: c, keep },
            _ => MlpOverride::MaskedNeurons(keep),
        };
        mean_probability_difference(params, task, &BTreeMap::from([(layer, o)]))
    };
    let original = mean_probability_difference(params, task, &BTreeMap::new())?;
    let full = match (unit, coder) {
        (AblationUnit::TranscoderFeatures, Some(c)) => {
            mean_probability_difference(params, task, &BTreeMap::from([(layer, MlpOverride::Coder(c))]))?
        }
        _ => original,
    };
    let floor = run(&vec![false; width])?;
    let mut points = Vec::with_capacity(ks.len());
    for &k in ks {
        let k = k.min(width);
        let mut keep = vec![false; width];
        for &i in &ranking[..k] {
            keep[i] = true;
        }
        points.push((k, run(&keep)?));
    }
    Ok(AblationCurve {
        unit,
        layer,
        points,
        ranking,
        original,
        full,
        floor,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct WeightedDeembedding {
    /// `(layer-0 feature, connection weight)`, strongest first.
    pub contributors: Vec<(usize, f64)>,
    /// Per-vocabulary-token weighted de-embedding score.
    pub scores: Vec<f64>,
}

/// Weights-only connection of every lower feature to `upper_dir` through
/// head `(layer, head)`: `f_dec . (W_OV^T upper_dir)`.
pub fn ov_connections(params: &ModelParams, layer: usize, head: usize, upper_dir: ArrayView1<f32>, lower: &Coder) -> Result<Vec<f64>> {
    if layer >= params.config.n_layers || head >= params.config.n_heads {
        return Err(Error::Input(format!("head {layer}:{head} out of range")));
    }
    let back = params.ov_transpose_apply(layer, head, upper_dir);
    Ok((0..lower.d_features())
        .map(|m| dot64(lower.w_dec.column(m), back.view()))
        .collect())
}

/// Sum of the `top_m` most strongly connected lower features' encoder
/// de-embeddings, each weighted by its connection to the upper feature.
pub fn weighted_deembedding_scores(
    params: &ModelParams,
    upper: &Coder,
    upper_feature: usize,
    head: (usize, usize),
    lower: &Coder,
    top_m: usize,
) -> Result<WeightedDeembedding> {
    if top_m == 0 {
        return Err(Error::Usage("top_m must be at least 1".into()));
    }
    let (f_enc, _) = upper.feature_vectors(upper_feature)?;
    let weights = ov_connections(params, head.0, head.1, f_enc.view(), lower)?;
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| weights[b].total_cmp(&weights[a]).then(a.cmp(&b)));
    let contributors: Vec<(usize, f64)> = order.into_iter().take(top_m).map(|m| (m, weights[m])).collect();
    let mut scores = vec![0.0; params.config.vocab_size];
    for &(m, w) in &contributors {
        if w == 0.0 {
            continue;
        }
        let de = deembed_scores(params.w_e.view(), lower.w_enc.row(m))?;
        for (s, d) in scores.iter_mut().zip(de.iter()) {
            *s += w * d;
        }
    }
    Ok(WeightedDeembedding { contributors, scores })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{MlpActivation, ModelConfig};
    use crate::testutil::seeded_params;
    use ndarray::{array, Array2};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn prompts() -> Vec<Vec<usize>> {
        (0..12).map(|i| (0..5).map(|j| (i * 5 + j * 7 + 1) % 11).collect()).collect()
    }

    #[test]
    fn l0_arithmetic() {
        let z = array![[1.0f32, 0.0, 2.0], [0.0, 0.0, 3.0]];
        assert_eq!(mean_l0(z.view()), 1.5);
    }

    #[test]
    fn exact_copy_replacement_preserves_ce() {
        let p = seeded_params(2, 2, 8, 3);
        let c = Coder::exact_copy(&p, 1).unwrap();
        let r = evaluate(&p, &[&c], &prompts()).unwrap();
        assert!((r.ce_replaced - r.ce_original).abs() < 1e-5, "{r:?}");
        assert_eq!(r.tokens_evaluated, 12 * 4);
    }

    #[test]
    fn original_ce_matches_direct_computation() {
        let p = seeded_params(2, 2, 8, 3);
        let c = Coder::exact_copy(&p, 0).unwrap();
        let r = evaluate(&p, &[&c], &prompts()).unwrap();
        let mut total = 0.0;
        let mut n = 0;
        for pr in prompts() {
            let (logits, _) = forward_with_cache(&p, &pr).unwrap();
            for t in 0..pr.len() - 1 {
                total -= crate::ops::log_softmax(logits.row(t))[pr[t + 1]];
                n += 1;
            }
        }
        assert!((r.ce_original - total / n as f64).abs() < 1e-7);
    }

    #[test]
    fn zero_coder_with_mean_bias_equals_mean_ablation() {
        let p = seeded_params(2, 2, 8, 3);
        let means = mean_mlp_outputs(&p, &prompts()).unwrap();
        let mut c = Coder::exact_copy(&p, 1).unwrap();
        c.w_enc.fill(0.0);
        c.b_enc.fill(-1.0);
        c.b_dec = means[1].clone();
        let r = evaluate(&p, &[&c], &prompts()).unwrap();
        assert_eq!(r.ce_replaced, r.ce_mean_ablated);
        assert_eq!(r.mean_l0, 0.0);
    }

    #[test]
    fn pad_targets_are_skipped() {
        let p = seeded_params(2, 2, 8, 3);
        let c = Coder::exact_copy(&p, 1).unwrap();
        let r = evaluate_masked(&p, &[&c], &[vec![2, 3, 1, 1]], Some(1)).unwrap();
        assert_eq!(r.tokens_evaluated, 1);
    }

    #[test]
    fn probability_difference_cases() {
        let years: Vec<usize> = (0..100).collect();
        let uniform = Array1::<f32>::zeros(100);
        assert!(probability_difference(uniform.view(), &years, 49).unwrap().abs() < 1e-12);
        let mut peaked = Array1::<f32>::from_elem(100, -1e4);
        peaked[70] = 0.0;
        assert_eq!(probability_difference(peaked.view(), &years, 10).unwrap(), 1.0);
        assert!(probability_difference(uniform.view(), &years, 100).is_err());
        assert!(probability_difference(uniform.view(), &[1, 1], 0).is_err());
    }

    #[test]
    fn probability_difference_hand_sum_and_reversal() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let logits: Array1<f32> = (0..120).map(|_| rng.random_range(-3.0..3.0)).collect();
        let years: Vec<usize> = (10..110).collect();
        for y in [0, 17, 63, 99] {
            let pd = probability_difference(logits.view(), &years, y).unwrap();
            let e: Vec<f64> = years.iter().map(|&t| (logits[t] as f64).exp()).collect();
            let z: f64 = e.iter().sum();
            let mut hand = 0.0;
            for (j, v) in e.iter().enumerate() {
                hand += if j > y { v / z } else { -v / z };
            }
            assert!((pd - hand).abs() < 1e-9);
            assert!((-1.0..=1.0).contains(&pd));
            let rev: Vec<usize> = years.iter().rev().copied().collect();
            let pd_rev = probability_difference(logits.view(), &rev, 99 - y).unwrap();
            let p_y = e[y] / z;
            assert!((pd_rev + pd + 2.0 * p_y).abs() < 1e-9);
        }
    }

    #[test]
    fn never_active_feature_has_no_examples() {
        let p = seeded_params(2, 2, 8, 3);
        let mut c = Coder::exact_copy(&p, 0).unwrap();
        c.b_enc[2] = -1e6;
        assert!(top_activating(&p, &c, 2, &prompts(), 5, None, false).unwrap().is_empty());
    }

    #[test]
    fn planted_token_feature() {
        let p = seeded_params(1, 2, 8, 5);
        let mut prompts = prompts();
        prompts.push(vec![7, 7, 3]);
        // A transcoder feature reading the post-LN input of layer 0 that fires
        // only where that input matches the cached input at a token-7 site.
        let (_, cache) = forward_with_cache(&p, &[7]).unwrap();
        let target = cache.layers[0].mlp_in.row(0).to_owned();
        let mut c = Coder::exact_copy(&p, 0).unwrap();
        let norm2 = dot64(target.view(), target.view()) as f32;
        c.w_enc.row_mut(0).assign(&target);
        c.b_enc[0] = -0.999 * norm2;
        let ex = top_activating(&p, &c, 0, &prompts, usize::MAX, None, false).unwrap();
        assert!(!ex.is_empty());
        for e in &ex {
            assert_eq!(prompts[e.prompt][e.token], 7);
        }
    }

    #[test]
    fn redaction_hides_text_only() {
        let p = seeded_params(2, 2, 8, 3);
        let c = Coder::exact_copy(&p, 0).unwrap();
        let vocab = Vocab::from_tokens((0..11).map(|i| format!("w{i}")).collect()).unwrap();
        let open = top_activating(&p, &c, 1, &prompts(), 10, Some(&vocab), false).unwrap();
        let hidden = top_activating(&p, &c, 1, &prompts(), 10, Some(&vocab), true).unwrap();
        assert_eq!(open.len(), hidden.len());
        for (a, b) in open.iter().zip(&hidden) {
            assert_eq!((a.prompt, a.token, a.activation), (b.prompt, b.token, b.activation));
            assert!(a.text.is_some());
            assert!(b.text.is_none());
            assert!(!serde_json::to_string(b).unwrap().contains("text"));
        }
    }

    #[test]
    fn all_positive_activations_with_unbounded_k() {
        let p = seeded_params(2, 2, 8, 3);
        let c = Coder::exact_copy(&p, 1).unwrap();
        let ex = top_activating(&p, &c, 3, &prompts(), usize::MAX, None, false).unwrap();
        let mut count = 0;
        for pr in prompts() {
            let (_, cache) = forward_with_cache(&p, &pr).unwrap();
            count += c.encode(cache.layers[1].mlp_in.view()).column(3).iter().filter(|&&v| v > 0.0).count();
        }
        assert_eq!(ex.len(), count);
        assert!(ex.windows(2).all(|w| w[0].activation >= w[1].activation));
    }

    fn small_task(p: &ModelParams) -> GreaterThanTask {
        let v = p.config.vocab_size;
        let years: Vec<usize> = (1..v).collect();
        GreaterThanTask {
            prompts: (0..years.len()).map(|i| vec![0, years[i], 0]).collect(),
            year_tokens: years.clone(),
            input_years: (0..years.len()).collect(),
            yy_position: 1,
        }
    }

    #[test]
    fn ablation_curve_endpoints_and_determinism() {
        let p = seeded_params(2, 2, 8, 8);
        let task = small_task(&p);
        let c = Coder::exact_copy(&p, 1).unwrap();
        let width = c.d_features();
        let ks = [0, 3, 10, width + 5];
        let curve = topk_ablation_curve(&p, &task, AblationUnit::TranscoderFeatures, 1, Some(&c), &ks).unwrap();
        assert_eq!(curve.points.last().unwrap().0, width);
        assert!((curve.points.last().unwrap().1 - curve.full).abs() < 1e-6);
        assert_eq!(curve.points[0].1, curve.floor);
        let zero_coder = {
            let mut z = c.clone();
            z.b_enc.fill(-1e9);
            z
        };
        let floor_direct = mean_probability_difference(&p, &task, &BTreeMap::from([(1, MlpOverride::Coder(&zero_coder))])).unwrap();
        assert_eq!(curve.floor, floor_direct);
        let again = topk_ablation_curve(&p, &task, AblationUnit::TranscoderFeatures, 1, Some(&c), &ks).unwrap();
        assert_eq!(curve, again);
        let neurons = topk_ablation_curve(&p, &task, AblationUnit::MlpNeurons, 1, None, &[0, p.config.d_mlp]).unwrap();
        assert!((neurons.points[1].1 - neurons.original).abs() < 1e-6);
        assert!(topk_ablation_curve(&p, &task, AblationUnit::MlpNeurons, 1, None, &[3, 1]).is_err());
    }

    #[test]
    fn ablation_curve_csv() {
        let curve = AblationCurve {
            unit: AblationUnit::MlpNeurons,
            layer: 0,
            points: vec![(0, -0.5), (4, 0.25)],
            ranking: vec![],
            original: 0.0,
            full: 0.0,
            floor: 0.0,
        };
        let mut buf = Vec::new();
        curve.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "k,prob_diff,unit\n0,-0.5,mlp_neurons\n4,0.25,mlp_neurons\n");
    }

    fn identity_ov_model() -> ModelParams {
        let cfg = ModelConfig {
            n_layers: 2,
            n_heads: 1,
            d_model: 4,
            d_head: 4,
            d_mlp: 4,
            vocab_size: 4,
            context_len: 4,
            ln_epsilon: 1e-5,
            activation: MlpActivation::Relu,
            tied_embeddings: false,
        };
        let mut p = ModelParams::zeros(&cfg).unwrap();
        p.w_e = Array2::eye(4);
        for l in 0..2 {
            p.layers[l].attn.w_v.index_axis_mut(ndarray::Axis(0), 0).assign(&Array2::eye(4));
            p.layers[l].attn.w_o.index_axis_mut(ndarray::Axis(0), 0).assign(&Array2::eye(4));
        }
        p
    }

    #[test]
    fn weighted_deembedding_single_feature() {
        let p = identity_ov_model();
        let lower = Coder::new(
            CoderKind::Transcoder,
            0,
            array![[0.5f32, -1.0, 2.0, 0.0], [0.0, 0.0, 0.0, 1.0], [1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0]],
            Array1::zeros(4),
            Array2::eye(4),
            Array1::zeros(4),
        )
        .unwrap();
        let upper = Coder::new(
            CoderKind::Transcoder,
            1,
            array![[3.0f32, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0], [0.0, 0.0, 0.0, 1.0]],
            Array1::zeros(4),
            Array2::eye(4),
            Array1::zeros(4),
        )
        .unwrap();
        let w = weighted_deembedding_scores(&p, &upper, 0, (1, 0), &lower, 1).unwrap();
        assert_eq!(w.contributors, vec![(0, 3.0)]);
        assert_eq!(w.scores, vec![1.5, -3.0, 6.0, 0.0]);
        let mut dead = upper.clone();
        dead.w_enc.fill(0.0);
        let z = weighted_deembedding_scores(&p, &dead, 0, (1, 0), &lower, 2).unwrap();
        assert!(z.scores.iter().all(|&s| s == 0.0));
    }
}
