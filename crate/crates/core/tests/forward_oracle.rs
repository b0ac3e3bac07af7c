mod common;

use common::{naive_forward, small_config};
use tc_core::model::{forward_with_cache, MlpActivation};
use tc_core::ModelParams;

fn max_logit_gap(p: &ModelParams, tokens: &[usize]) -> f64 {
    let (logits, _) = forward_with_cache(p, tokens).unwrap();
    let want = naive_forward(p, tokens);
    let mut worst = 0.0f64;
    for (t, row) in want.iter().enumerate() {
        for (v, w) in row.iter().enumerate() {
            worst = worst.max((logits[[t, v]] as f64 - w).abs());
        }
    }
    worst
}

#[test]
fn relu_forward_matches_naive_f64() {
    let p = ModelParams::randomized(&small_config(2, 2, 8, 16, 10), 3).unwrap();
    let gap = max_logit_gap(&p, &[3, 1, 4]);
    assert!(gap < 1e-5, "max logit gap {gap:e}");
}

#[test]
fn gelu_forward_matches_naive_f64() {
    let mut cfg = small_config(3, 4, 16, 32, 20);
    cfg.activation = MlpActivation::Gelu;
    let p = ModelParams::randomized(&cfg, 4).unwrap();
    let gap = max_logit_gap(&p, &[0, 19, 7, 7, 2, 11, 5, 16]);
    assert!(gap < 1e-5, "max logit gap {gap:e}");
}

#[test]
fn prefix_logits_do_not_see_the_future() {
    let p = ModelParams::randomized(&small_config(2, 2, 8, 16, 10), 5).unwrap();
    let (short, _) = forward_with_cache(&p, &[1, 2, 3]).unwrap();
    let (long, _) = forward_with_cache(&p, &[1, 2, 3, 9, 0]).unwrap();
    for t in 0..3 {
        for v in 0..10 {
            assert!((short[[t, v]] - long[[t, v]]).abs() < 1e-6);
        }
    }
}
