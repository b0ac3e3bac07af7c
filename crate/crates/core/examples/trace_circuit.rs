//! Greedy circuit search from the most active last-layer transcoder feature
//! on one greater-than prompt, with error nodes, printed as DOT.

mod shared;

use tc_core::attribution::FeatureHandle;
use tc_core::circuits::{add_error_nodes, export_graph, greedy_paths, paths_to_graph, CircuitContext, GraphFormat, SearchOptions};
use tc_core::corpus::{gen_greater_than, Vocab};
use tc_core::model::forward_with_cache;
use tc_core::Coder;

fn main() {
    let vocab = Vocab::toy();
    let params = shared::toy_model(&vocab);
    let coders = shared::toy_transcoders(&vocab, &params);
    let task = gen_greater_than(&vocab).unwrap();
    let prompt = &task.prompts[0];
    let text: Vec<&str> = prompt.iter().map(|&t| vocab.token(t).unwrap()).collect();
    eprintln!("prompt: {}", text.join(" "));

    let (_, cache) = forward_with_cache(&params, prompt).unwrap();
    let refs: Vec<&Coder> = coders.iter().collect();
    let ctx = CircuitContext::new(&params, &cache, &refs).unwrap();
    let t = prompt.len() - 1;
    let z = ctx.activations(1).unwrap();
    let feature = (0..z.ncols()).max_by(|&a, &b| z[[t, a]].total_cmp(&z[[t, b]])).unwrap();
    let root = FeatureHandle { layer: 1, feature, token: t };

    let paths = greedy_paths(&ctx, root, 3, SearchOptions { beam: Some(5), rank_abs: false }).unwrap();
    let graph = add_error_nodes(&paths_to_graph(&paths).unwrap(), &ctx).unwrap();
    eprintln!("{} paths, {} nodes, {} edges", paths.len(), graph.nodes.len(), graph.edges.len());
    print!("{}", export_graph(&graph, GraphFormat::Dot));
}
