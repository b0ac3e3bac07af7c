//! Top tokens of a few layer-0 transcoder features' encoder de-embeddings.

mod shared;

use tc_core::attribution::deembed;
use tc_core::corpus::Vocab;

fn main() {
    let vocab = Vocab::toy();
    let params = shared::toy_model(&vocab);
    let coders = shared::toy_transcoders(&vocab, &params);
    for feature in [0, 1, 2, 3] {
        let (f_enc, _) = coders[0].feature_vectors(feature).unwrap();
        let top = deembed(params.w_e.view(), f_enc.view(), 8).unwrap();
        let words: Vec<String> = top.iter().map(|&(t, s)| format!("{}({s:.2})", vocab.token(t).unwrap())).collect();
        println!("mlp0tc[{feature}]: {}", words.join(" "));
    }
}
