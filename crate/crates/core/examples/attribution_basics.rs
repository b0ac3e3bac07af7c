//! Feature-to-feature attributions on a random ReLU model whose MLPs are
//! copied exactly into transcoders, so the decomposition closes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tc_core::attribution::{attention_attribution, invariant_factor, pair_attribution, FeatureHandle};
use tc_core::circuits::CircuitContext;
use tc_core::model::{forward_with_cache, MlpActivation};
use tc_core::{Coder, ModelConfig, ModelParams};

fn main() {
    let cfg = ModelConfig { activation: MlpActivation::Relu, ..ModelConfig::toy(64) };
    let params = ModelParams::randomized(&cfg, 1).unwrap();
    let coders: Vec<Coder> = (0..2).map(|l| Coder::exact_copy(&params, l).unwrap()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let prompt: Vec<usize> = (0..10).map(|_| rng.random_range(0..64)).collect();
    let (_, cache) = forward_with_cache(&params, &prompt).unwrap();
    let refs: Vec<&Coder> = coders.iter().collect();
    let ctx = CircuitContext::new(&params, &cache, &refs).unwrap();

    let t = prompt.len() - 1;
    let z1 = ctx.activations(1).unwrap();
    let upper = (0..z1.ncols()).max_by(|&a, &b| z1[[t, a]].total_cmp(&z1[[t, b]])).unwrap();
    println!("root: layer-1 feature {upper} at token {t}, activation {:.4}", z1[[t, upper]]);

    let root = ctx.root_node(FeatureHandle { layer: 1, feature: upper, token: t }).unwrap();
    let children = ctx.candidates(&root).unwrap();
    let mut ranked: Vec<_> = children.iter().collect();
    ranked.sort_by(|a, b| b.attribution.abs().total_cmp(&a.attribution.abs()));
    println!("strongest of {} direct contributors:", children.len());
    for c in ranked.iter().take(8) {
        println!("  {:<18} {:+.5}", c.key.label(), c.attribution);
    }
    let constant = root.direction.as_ref().unwrap().constant;
    let total: f64 = children.iter().map(|c| c.attribution).sum::<f64>() + constant;
    println!("sum of contributors plus constant {total:.6}, pre-activation {:.6}", root.attribution);

    let z0 = ctx.activations(0).unwrap();
    let lower = (0..z0.ncols()).max_by(|&a, &b| z0[[t, a]].total_cmp(&z0[[t, b]])).unwrap();
    let a = pair_attribution(&cache, FeatureHandle { layer: 0, feature: lower, token: t }, coders[1].w_enc.row(upper), 1, &coders[0]).unwrap();
    let factor = invariant_factor(coders[0].w_dec.column(lower), coders[1].w_enc.row(upper));
    println!(
        "layer-0 feature {lower}: activation {:.4} x input-invariant factor {factor:.4} = {:.5}",
        a.input_dependent_factor, a.value
    );

    let (f_enc, _) = coders[1].feature_vectors(upper).unwrap();
    for s in 0..=t {
        let (v, _) = attention_attribution(&params, &cache, 1, 0, s, t, f_enc.view()).unwrap();
        println!("  head 1.0 from source {s}: {v:+.5}");
    }
}
