//! Harvest MLP input/output pairs from the toy model, train a transcoder on
//! layer 0 and splice it back in.

mod shared;

use tc_core::corpus::Vocab;
use tc_core::eval::evaluate;
use tc_core::trainer::{harvest, train_coder};
use tc_core::CoderKind;

fn main() {
    let vocab = Vocab::toy();
    let params = shared::toy_model(&vocab);
    let stream = harvest(&params, &shared::corpus(&vocab), 0, 1 << 17, 128).unwrap();
    println!("harvested {} token pairs", stream.len());
    let (coder, log) = train_coder(&shared::coder_config(1e-3), &stream, CoderKind::Transcoder).unwrap();
    for row in log.iter().step_by((log.len() / 8).max(1)) {
        println!("step {:>5}  faithfulness {:.3e}  L0 {:.1}", row.step, row.faithfulness, row.l0);
    }
    let report = evaluate(&params, &[&coder], &shared::held_out(&vocab)).unwrap();
    println!(
        "{} features, held-out L0 {:.1}; CE original {:.4}, with transcoder {:.4}, mean-ablated {:.4}",
        coder.d_features(),
        report.mean_l0,
        report.ce_original,
        report.ce_replaced,
        report.ce_mean_ablated
    );
}
