//! Sparsity/fidelity trade-off: one layer-0 transcoder and SAE per lambda1,
//! written as CSV to stdout.

mod shared;

use tc_core::corpus::Vocab;
use tc_core::trainer::{harvest, sweep};
use tc_core::CoderKind;

fn main() {
    let vocab = Vocab::toy();
    let params = shared::toy_model(&vocab);
    let stream = harvest(&params, &shared::corpus(&vocab), 0, 1 << 17, 128).unwrap();
    let report = sweep(
        &shared::coder_config(0.0),
        &[1e-4, 1e-3, 1e-2],
        &stream,
        &[CoderKind::Transcoder, CoderKind::Sae],
        &params,
        &shared::held_out(&vocab),
    )
    .unwrap();
    report.write_csv(std::io::stdout()).unwrap();
}
