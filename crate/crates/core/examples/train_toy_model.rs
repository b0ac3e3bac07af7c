//! Train the 2-layer toy model on the synthetic date corpus and report its
//! greater-than performance.

mod shared;

use std::collections::BTreeMap;

use tc_core::corpus::{gen_greater_than, Vocab};
use tc_core::eval::mean_probability_difference;
use tc_core::lm::{mean_cross_entropy, train_lm, LmTrainConfig};
use tc_core::{ModelConfig, ModelParams};

fn main() {
    let vocab = Vocab::toy();
    let corpus = shared::corpus(&vocab);
    let mut params = ModelParams::init(&ModelConfig::toy(vocab.len()), 0).unwrap();
    let losses = train_lm(&mut params, &corpus, &LmTrainConfig { steps: 2000, seed: 0, ..LmTrainConfig::default() }).unwrap();
    for (step, loss) in losses.iter().enumerate().step_by(250) {
        println!("step {step:>5}  loss {loss:.4}");
    }
    let held_out = shared::held_out(&vocab);
    println!("held-out cross-entropy {:.4}", mean_cross_entropy(&params, &held_out).unwrap());
    let task = gen_greater_than(&vocab).unwrap();
    let pd = mean_probability_difference(&params, &task, &BTreeMap::new()).unwrap();
    println!("greater-than probability difference {pd:.4} over {} prompts", task.prompts.len());
    let path = shared::cache_dir().join("toy_model.tcw1");
    tc_core::checkpoint::save_model(&params, &path).unwrap();
    println!("saved {}", path.display());
}
