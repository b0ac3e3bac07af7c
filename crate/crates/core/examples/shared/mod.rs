//! Toy model and transcoders shared by the examples, cached in the system
//! temp directory so that later examples skip retraining.

#![allow(dead_code)]

use std::path::PathBuf;

use tc_core::checkpoint::{load_coder, load_model, save_coder, save_model};
use tc_core::corpus::{gen_synthetic_corpus, CorpusDescriptor, Vocab};
use tc_core::lm::{train_lm, LmTrainConfig};
use tc_core::trainer::{harvest, train_coder, TrainConfig};
use tc_core::{Coder, CoderKind, ModelConfig, ModelParams};

pub fn cache_dir() -> PathBuf {
    let dir = std::env::temp_dir().join("tc_examples");
    std::fs::create_dir_all(&dir).expect("temp dir");
    dir
}

pub fn corpus(vocab: &Vocab) -> Vec<Vec<usize>> {
    gen_synthetic_corpus(vocab, &CorpusDescriptor::default(), 1, 200_000).unwrap().prompts
}

pub fn held_out(vocab: &Vocab) -> Vec<Vec<usize>> {
    gen_synthetic_corpus(vocab, &CorpusDescriptor::default(), 2, 20_000).unwrap().prompts
}

/// The 2-layer toy language model, trained on first use.
pub fn toy_model(vocab: &Vocab) -> ModelParams {
    let path = cache_dir().join("toy_model.tcw1");
    if let Ok(p) = load_model(&path) {
        return p;
    }
    println!("training the toy model (about half a minute)...");
    let mut p = ModelParams::init(&ModelConfig::toy(vocab.len()), 0).unwrap();
    train_lm(&mut p, &corpus(vocab), &LmTrainConfig { steps: 2000, seed: 0, ..LmTrainConfig::default() }).unwrap();
    save_model(&p, &path).unwrap();
    p
}

pub fn coder_config(lambda1: f32) -> TrainConfig {
    TrainConfig {
        lambda1,
        learning_rate: 1e-3,
        batch_size: 1024,
        total_tokens: 1 << 20,
        d_features_multiplier: 16,
        ..TrainConfig::default()
    }
}

/// One lambda1 = 1e-3 transcoder per layer, trained on first use.
pub fn toy_transcoders(vocab: &Vocab, p: &ModelParams) -> Vec<Coder> {
    (0..p.config.n_layers)
        .map(|l| {
            let path = cache_dir().join(format!("coder_l{l}.tcw1"));
            if let Ok(c) = load_coder(&path) {
                return c;
            }
            println!("training the layer {l} transcoder...");
            let stream = harvest(p, &corpus(vocab), l, 1 << 17, 128).unwrap();
            let c = train_coder(&coder_config(1e-3), &stream, CoderKind::Transcoder).unwrap().0;
            save_coder(&c, &path).unwrap();
            c
        })
        .collect()
}
