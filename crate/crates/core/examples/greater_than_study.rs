//! Greater-than case study on the toy model: transcoder fidelity, top-k
//! zero ablation, a detector feature's attention source, and its
//! weighted de-embedding over years.

mod shared;

use std::collections::BTreeMap;

use tc_core::attribution::{attention_attribution, dla, top_k, FeatureHandle};
use tc_core::circuits::CircuitContext;
use tc_core::corpus::{gen_greater_than, Vocab};
use tc_core::eval::{mean_probability_difference, topk_ablation_curve, weighted_deembedding_scores, AblationUnit};
use tc_core::model::{forward_with_cache, MlpOverride};
use tc_core::Coder;

fn main() {
    let vocab = Vocab::toy();
    let params = shared::toy_model(&vocab);
    let coders = shared::toy_transcoders(&vocab, &params);
    let task = gen_greater_than(&vocab).unwrap();
    let last = params.config.n_layers - 1;

    let base = mean_probability_difference(&params, &task, &BTreeMap::new()).unwrap();
    let mut ov = BTreeMap::new();
    ov.insert(last, MlpOverride::Coder(&coders[last]));
    let spliced = mean_probability_difference(&params, &task, &ov).unwrap();
    println!("probability difference: model {base:.4}, with MLP{last} transcoder {spliced:.4} ({:.1}%)", 100.0 * spliced / base);

    let nf = coders[last].d_features();
    let ks = [0, 1, 5, 10, 20, 50, nf];
    let curve = topk_ablation_curve(&params, &task, AblationUnit::TranscoderFeatures, last, Some(&coders[last]), &ks).unwrap();
    let neurons = topk_ablation_curve(&params, &task, AblationUnit::MlpNeurons, last, None, &[0, 1, 5, 10, 20, 50, params.config.d_mlp]).unwrap();
    println!("top-k features kept -> probability difference (floor {:.4}):", curve.floor);
    for (k, v) in &curve.points {
        println!("  {k:>4}  {v:.4}");
    }
    println!("top-k neurons kept (floor {:.4}):", neurons.floor);
    for (k, v) in &neurons.points {
        println!("  {k:>4}  {v:.4}");
    }

    let detector = curve.ranking[0];
    let end = task.prompts[0].len() - 1;
    let refs: Vec<&Coder> = coders.iter().collect();
    let mut head_scores = vec![0.0f64; params.config.n_heads];
    let mut mean_dla = vec![0.0f64; params.config.vocab_size];
    for prompt in &task.prompts {
        let (_, cache) = forward_with_cache(&params, prompt).unwrap();
        let ctx = CircuitContext::new(&params, &cache, &refs).unwrap();
        let root = ctx.root_node(FeatureHandle { layer: last, feature: detector, token: end }).unwrap();
        let dir = &root.direction.as_ref().unwrap().direction;
        for (h, s) in head_scores.iter_mut().enumerate() {
            *s += attention_attribution(&params, &cache, last, h, task.yy_position, end, dir.view()).unwrap().0 / task.prompts.len() as f64;
        }
        for (m, d) in mean_dla.iter_mut().zip(dla(&params, &cache, &coders[last], detector, end).unwrap()) {
            *m += d / task.prompts.len() as f64;
        }
    }
    let head = (0..head_scores.len()).max_by(|&a, &b| head_scores[a].total_cmp(&head_scores[b])).unwrap();
    println!("detector mlp{last}tc[{detector}]; mean attribution from the start-year position per head: {head_scores:.4?}");

    let w = weighted_deembedding_scores(&params, &coders[last], detector, (last, head), &coders[last - 1], 10).unwrap();
    let top = top_k(&w.scores, 20);
    let years = top.iter().filter(|(t, _)| vocab.is_year(*t)).count();
    let words: Vec<&str> = top.iter().map(|&(t, _)| vocab.token(t).unwrap()).collect();
    println!("weighted de-embedding via head {last}.{head}, top 20 ({years} years): {}", words.join(" "));

    let dla_years: Vec<String> = task.year_tokens.iter().step_by(10).map(|&t| format!("{}:{:+.2}", vocab.token(t).unwrap(), mean_dla[t])).collect();
    println!("mean direct logit effect on every 10th year: {}", dla_years.join(" "));
}
