use std::ffi::OsString;
use std::path::Path;

use serde_json::Value;
use tc_core::attribution::{deembed_scores, FeatureHandle};
use tc_core::checkpoint::{save_coder, save_model};
use tc_core::circuits::{export_graph, greedy_paths, paths_to_graph, CircuitContext, GraphFormat, SearchOptions};
use tc_core::corpus::{gen_greater_than, Vocab};
use tc_core::eval::{topk_ablation_curve, AblationUnit};
use tc_core::model::{forward_with_cache, MlpActivation, ModelConfig};
use tc_core::service::{trace_graph, Session, TraceRequest};
use tc_core::{Coder, ModelParams};

fn tc(args: &[&str]) -> i32 {
    let argv: Vec<OsString> = std::iter::once("tc").chain(args.iter().copied()).map(OsString::from).collect();
    tc_core::cli::main_with_args(argv)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Setup {
    dir: tempfile::TempDir,
    params: ModelParams,
    coders: Vec<Coder>,
    vocab: Vocab,
}

fn setup() -> Setup {
    let vocab = Vocab::toy();
    let cfg = ModelConfig {
        d_model: 16,
        n_heads: 2,
        d_head: 8,
        d_mlp: 32,
        activation: MlpActivation::Relu,
        ..ModelConfig::toy(vocab.len())
    };
    let params = ModelParams::randomized(&cfg, 17).unwrap();
    let coders: Vec<Coder> = (0..2).map(|l| Coder::exact_copy(&params, l).unwrap()).collect();
    let dir = tempfile::tempdir().unwrap();
    save_model(&params, dir.path().join("model.tcw1")).unwrap();
    for (l, c) in coders.iter().enumerate() {
        save_coder(c, dir.path().join(format!("coder_l{l}.tcw1"))).unwrap();
    }
    Setup { dir, params, coders, vocab }
}

#[test]
fn trace_matches_library_and_service() {
    let st = setup();
    let d = st.dir.path();
    let prompts = gen_greater_than(&st.vocab).unwrap().prompts;
    let prompt_id = 3;
    let prompt = &prompts[prompt_id];
    let token = prompt.len() - 1;
    let (_, cache) = forward_with_cache(&st.params, prompt).unwrap();
    let refs: Vec<&Coder> = st.coders.iter().collect();
    let ctx = CircuitContext::new(&st.params, &cache, &refs).unwrap();
    let z = ctx.activations(1).unwrap();
    let feature = (0..z.ncols()).find(|&f| z[[token, f]] > 0.0).expect("an active feature");
    let root = FeatureHandle { layer: 1, feature, token };
    let library = export_graph(
        &paths_to_graph(&greedy_paths(&ctx, root, 3, SearchOptions { beam: Some(4), rank_abs: false }).unwrap()).unwrap(),
        GraphFormat::Json,
    );

    let out = d.join("graph.json");
    let code = tc(&[
        "trace", "--model", s(&d.join("model.tcw1")),
        "--coder", &format!("{},{}", s(&d.join("coder_l0.tcw1")), s(&d.join("coder_l1.tcw1"))),
        "--prompt-id", &prompt_id.to_string(), "--layer", "1", "--feature", &feature.to_string(),
        "--token", &token.to_string(), "--N", "4", "--L", "3", "--out", s(&out),
    ]);
    assert_eq!(code, 0);
    let cli = std::fs::read_to_string(&out).unwrap();
    assert_eq!(cli.trim_end(), library.trim_end());

    let session = Session::new(st.params.clone(), st.coders.clone(), Some(st.vocab.clone()), prompts.clone(), false).unwrap();
    let req = TraceRequest { prompt_id, layer: 1, feature, token, n: 4, l: 3, rank_abs: false, error_nodes: false };
    let api = trace_graph(&session, &req).unwrap();
    let cli_value: Value = serde_json::from_str(&cli).unwrap();
    assert_eq!(api, cli_value);
}

#[test]
fn deembed_csv_matches_brute_force() {
    let st = setup();
    let d = st.dir.path();
    let out = d.join("deembed.csv");
    let code = tc(&["deembed", "--model", s(&d.join("model.tcw1")), "--coder", s(&d.join("coder_l0.tcw1")), "--feature", "5", "--k", "3", "--out", s(&out)]);
    assert_eq!(code, 0);
    let f_enc = st.coders[0].w_enc.row(5);
    let mut want: Vec<(usize, f64)> = (0..st.vocab.len())
        .map(|t| (t, (0..16).map(|j| st.params.w_e[[t, j]] as f64 * f_enc[j] as f64).sum()))
        .collect();
    want.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut reader = csv::Reader::from_path(&out).unwrap();
    let rows: Vec<csv::StringRecord> = reader.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), 3);
    for (row, (tok, score)) in rows.iter().zip(&want) {
        assert_eq!(row[1].parse::<usize>().unwrap(), *tok);
        assert_eq!(&row[2], st.vocab.token(*tok).unwrap());
        assert!((row[3].parse::<f64>().unwrap() - score).abs() < 1e-7);
    }
    let lib = deembed_scores(st.params.w_e.view(), f_enc).unwrap();
    assert!((lib[want[0].0] - want[0].1).abs() < 1e-7);
}

#[test]
fn ablate_csv_matches_library_curve() {
    let st = setup();
    let d = st.dir.path();
    let out = d.join("curve.csv");
    let code = tc(&["ablate", "--model", s(&d.join("model.tcw1")), "--layer", "1", "--coder", s(&d.join("coder_l1.tcw1")), "--ks", "0,4,32", "--out", s(&out)]);
    assert_eq!(code, 0);
    let task = gen_greater_than(&st.vocab).unwrap();
    let curve = topk_ablation_curve(&st.params, &task, AblationUnit::TranscoderFeatures, 1, Some(&st.coders[1]), &[0, 4, 32]).unwrap();
    let mut buf = Vec::new();
    curve.write_csv(&mut buf).unwrap();
    assert_eq!(std::fs::read(&out).unwrap(), buf);
}

#[test]
fn missing_checkpoint_is_a_runtime_failure() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.tcw1");
    assert_eq!(tc(&["deembed", "--model", s(&missing), "--coder", s(&missing), "--feature", "0"]), 2);
}
