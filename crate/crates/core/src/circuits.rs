//! Greedy computational-path search and path-to-graph merging.
//!
//! Every node carries a [`PulledBackFeature`] reading one residual site, so
//! a node's attribution equals the sum of its candidates' attributions plus
//! the node's constant. Candidates of a node at `(layer, stage, token)`:
//!
//! - the token-plus-position embedding at `token`;
//! - active transcoder features and the decoder-bias node of every lower
//!   layer at `token`;
//! - every `(head, source)` pair of every attention layer writing into the
//!   site (same-layer heads included for post-attention sites).
//!
//! Embedding, bias and error nodes are terminal.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attribution::{
    apply_ln_scale, attention_attribution, feature_activation, feature_preactivation, invariant_factor,
    pullback_through_feature, Attribution, FeatureHandle, Origin, PulledBackFeature, Site,
};
use crate::coder::{Coder, CoderKind};
use crate::error::{Error, Result};
use crate::model::{ActivationCache, ModelParams};
use crate::ops::dot64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeKind {
    TranscoderFeature,
    AttentionHeadSource,
    Embedding,
    Bias,
    Error,
}

impl NodeKind {
    pub fn is_terminal(self) -> bool {
        matches!(self, NodeKind::Embedding | NodeKind::Bias | NodeKind::Error)
    }
}

/// Graph identity of a node. Field order gives the tie-break order
/// `(layer, token, kind, index)`. For heads `token` is the source position
/// and `index` the head; for bias and error nodes `layer` is the MLP layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct NodeKey {
    pub layer: usize,
    pub token: usize,
    pub kind: NodeKind,
    pub index: usize,
}

impl NodeKey {
    pub fn feature(layer: usize, index: usize, token: usize) -> Self {
        NodeKey {
            layer,
            token,
            kind: NodeKind::TranscoderFeature,
            index,
        }
    }

    pub fn head(layer: usize, head: usize, source: usize) -> Self {
        NodeKey {
            layer,
            token: source,
            kind: NodeKind::AttentionHeadSource,
            index: head,
        }
    }

    fn terminal(kind: NodeKind, layer: usize, token: usize) -> Self {
        NodeKey {
            layer,
            token,
            kind,
            index: 0,
        }
    }

    /// Compact label: `mlp{l}tc[{i}]@{t}`, `attn{l}[{h}]@{s}`, `embed@{t}`,
    /// `mlp{l}bias@{t}`, `mlp{l}err@{t}`.
    pub fn label(&self) -> String {
        self.to_string()
    }

    pub fn parse(label: &str) -> Result<Self> {
        let bad = || Error::Input(format!("bad node label {label:?}"));
        let (body, token) = label.rsplit_once('@').ok_or_else(bad)?;
        let token: usize = token.parse().map_err(|_| bad())?;
        if body == "embed" {
            return Ok(NodeKey::terminal(NodeKind::Embedding, 0, token));
        }
        let num = |s: &str| s.parse::<usize>().map_err(|_| bad());
        if let Some(rest) = body.strip_prefix("attn") {
            let (l, h) = rest.strip_suffix(']').and_then(|r| r.split_once('[')).ok_or_else(bad)?;
            return Ok(NodeKey::head(num(l)?, num(h)?, token));
        }
        let rest = body.strip_prefix("mlp").ok_or_else(bad)?;
        if let Some(l) = rest.strip_suffix("bias") {
            return Ok(NodeKey::terminal(NodeKind::Bias, num(l)?, token));
        }
        if let Some(l) = rest.strip_suffix("err") {
            return Ok(NodeKey::terminal(NodeKind::Error, num(l)?, token));
        }
        let (l, i) = rest.strip_suffix(']').and_then(|r| r.split_once("tc[")).ok_or_else(bad)?;
        Ok(NodeKey::feature(num(l)?, num(i)?, token))
    }
}

impl fmt::Display for NodeKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (l, t, i) = (self.layer, self.token, self.index);
        match self.kind {
            NodeKind::TranscoderFeature => write!(f, "mlp{l}tc[{i}]@{t}"),
            NodeKind::AttentionHeadSource => write!(f, "attn{l}[{i}]@{t}"),
            NodeKind::Embedding => write!(f, "embed@{t}"),
            NodeKind::Bias => write!(f, "mlp{l}bias@{t}"),
            NodeKind::Error => write!(f, "mlp{l}err@{t}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PathNode {
    pub key: NodeKey,
    /// Destination position, for head nodes.
    pub dest: Option<usize>,
    pub attribution: f64,
    /// Activation and weights-only factor, for transcoder features.
    pub factors: Option<Attribution>,
    /// The direction this node reads, absent for terminal nodes.
    pub direction: Option<PulledBackFeature>,
    /// False for a root feature whose pre-activation is not positive.
    pub active: bool,
}

/// Nodes ordered from the root down to the earliest node.
#[derive(Clone, Debug, PartialEq)]
pub struct ComputationalPath {
    pub nodes: Vec<PathNode>,
}

impl ComputationalPath {
    pub fn last(&self) -> &PathNode {
        self.nodes.last().expect("paths are never empty")
    }

    pub fn keys(&self) -> Vec<NodeKey> {
        self.nodes.iter().map(|n| n.key).collect()
    }
}

/// A model, one prompt's cache and one transcoder per layer, with every
/// feature activation precomputed.
pub struct CircuitContext<'a> {
    pub params: &'a ModelParams,
    pub cache: &'a ActivationCache,
    coders: Vec<Option<&'a Coder>>,
    /// Per layer, `tokens x d_features` activations.
    z: Vec<Option<Array2<f32>>>,
}

impl<'a> CircuitContext<'a> {
    pub fn new(params: &'a ModelParams, cache: &'a ActivationCache, coders: &[&'a Coder]) -> Result<Self> {
        let n_layers = params.config.n_layers;
        let mut slots: Vec<Option<&Coder>> = vec![None; n_layers];
        for &c in coders {
            if c.kind != CoderKind::Transcoder {
                return Err(Error::Config("circuit analysis needs transcoders".into()));
            }
            if c.layer >= n_layers || c.d_in() != params.config.d_model || c.d_out() != params.config.d_model {
                return Err(Error::Config(format!("transcoder for layer {} does not fit the model", c.layer)));
            }
            if slots[c.layer].replace(c).is_some() {
                return Err(Error::Config(format!("two transcoders for layer {}", c.layer)));
            }
        }
        if cache.layers.len() != n_layers {
            return Err(Error::Config("cache does not match the model".into()));
        }
        let n = cache.n_tokens();
        let z = slots
            .iter()
            .map(|slot| {
                slot.map(|c| {
                    let mut z = Array2::zeros((n, c.d_features()));
                    for t in 0..n {
                        for i in 0..c.d_features() {
                            z[[t, i]] = feature_activation(cache, c, i, t).expect("indices in range");
                        }
                    }
                    z
                })
            })
            .collect();
        Ok(CircuitContext {
            params,
            cache,
            coders: slots,
            z,
        })
    }

    pub fn coder(&self, layer: usize) -> Option<&'a Coder> {
        self.coders.get(layer).copied().flatten()
    }

    pub fn activations(&self, layer: usize) -> Option<&Array2<f32>> {
        self.z.get(layer).and_then(Option::as_ref)
    }

    fn need_coders_below(&self, layer: usize) -> Result<()> {
        for l in 0..layer {
            if self.coders[l].is_none() {
                return Err(Error::Usage(format!("no transcoder for layer {l}, which lies below the root")));
            }
        }
        Ok(())
    }

    /// The root node: its attribution is the feature's pre-activation and it
    /// reads the post-attention residual of its layer.
    pub fn root_node(&self, root: FeatureHandle) -> Result<PathNode> {
        let coder = self
            .coder(root.layer)
            .ok_or_else(|| Error::Input(format!("no transcoder for layer {}", root.layer)))?;
        if root.feature >= coder.d_features() || root.token >= self.cache.n_tokens() {
            return Err(Error::Input(format!("root {root:?} out of range")));
        }
        self.need_coders_below(root.layer)?;
        let pre = feature_preactivation(self.cache, coder, root.feature, root.token)?;
        let (f_enc, _) = coder.feature_vectors(root.feature)?;
        let raw = PulledBackFeature {
            direction: f_enc,
            origin: Origin::Feature(root),
            scale_applied: 1.0,
            site: None,
            constant: coder.b_enc[root.feature] as f64,
        };
        let direction = apply_ln_scale(&raw, self.params, self.cache, Site::mid(root.layer, root.token))?;
        Ok(PathNode {
            key: NodeKey::feature(root.layer, root.feature, root.token),
            dest: None,
            attribution: pre,
            factors: None,
            direction: Some(direction),
            active: pre > 0.0,
        })
    }

    /// Every candidate child of `node`, unsorted. Terminal nodes have none.
    pub fn candidates(&self, node: &PathNode) -> Result<Vec<PathNode>> {
        let Some(dir) = &node.direction else {
            return Ok(Vec::new());
        };
        let site = dir.site.ok_or_else(|| Error::Usage("direction has no residual site".into()))?;
        let d = dir.direction.view();
        let tau = site.token;
        let mut out = Vec::new();
        out.push(terminal(NodeKind::Embedding, 0, tau, dot64(d, self.cache.embed.row(tau))));
        for l in site.mlp_layers_below() {
            let coder = self
                .coder(l)
                .ok_or_else(|| Error::Usage(format!("no transcoder for layer {l}")))?;
            let z = self.activations(l).expect("coder implies activations");
            for i in 0..coder.d_features() {
                let zi = z[[tau, i]];
                if zi <= 0.0 {
                    continue;
                }
                let (_, f_dec) = coder.feature_vectors(i)?;
                let factor = invariant_factor(f_dec.view(), d);
                let handle = FeatureHandle {
                    layer: l,
                    feature: i,
                    token: tau,
                };
                let pb = pullback_through_feature(handle, d, coder)?;
                let direction = apply_ln_scale(&pb, self.params, self.cache, Site::mid(l, tau))?;
                let a = Attribution::new(zi, factor);
                out.push(PathNode {
                    key: NodeKey::feature(l, i, tau),
                    dest: None,
                    attribution: a.value,
                    factors: Some(a),
                    direction: Some(direction),
                    active: true,
                });
            }
            out.push(terminal(NodeKind::Bias, l, tau, dot64(d, coder.b_dec.view())));
        }
        for l in site.head_layers_below() {
            for h in 0..self.params.config.n_heads {
                for s in 0..=tau {
                    let (value, pb) = attention_attribution(self.params, self.cache, l, h, s, tau, d)?;
                    let direction = apply_ln_scale(&pb, self.params, self.cache, Site::pre(l, s))?;
                    out.push(PathNode {
                        key: NodeKey::head(l, h, s),
                        dest: Some(tau),
                        attribution: value,
                        factors: None,
                        direction: Some(direction),
                        active: true,
                    });
                }
            }
        }
        Ok(out)
    }
}

fn terminal(kind: NodeKind, layer: usize, token: usize, attribution: f64) -> PathNode {
    PathNode {
        key: NodeKey::terminal(kind, layer, token),
        dest: None,
        attribution,
        factors: None,
        direction: None,
        active: true,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct SearchOptions {
    /// Beam width; `None` disables pruning.
    pub beam: Option<usize>,
    /// Rank by absolute attribution instead of signed attribution.
    pub rank_abs: bool,
}

fn score(a: f64, rank_abs: bool) -> f64 {
    if rank_abs {
        a.abs()
    } else {
        a
    }
}

/// Descending score, then ascending key.
fn by_rank(a: &PathNode, b: &PathNode, rank_abs: bool) -> std::cmp::Ordering {
    score(b.attribution, rank_abs)
        .total_cmp(&score(a.attribution, rank_abs))
        .then(a.key.cmp(&b.key))
}

/// Greedy path search from `root` for `depth` generations. The output holds
/// the root-only path followed by every generation's surviving paths.
pub fn greedy_paths(ctx: &CircuitContext, root: FeatureHandle, depth: usize, opts: SearchOptions) -> Result<Vec<ComputationalPath>> {
    if depth == 0 {
        return Err(Error::Usage("depth must be at least 1".into()));
    }
    if opts.beam == Some(0) {
        return Err(Error::Usage("beam width must be at least 1".into()));
    }
    let root_node = ctx.root_node(root)?;
    if !root_node.active {
        log::warn!("root {} is inactive on this prompt (pre-activation {})", root_node.key, root_node.attribution);
    }
    let start = ComputationalPath { nodes: vec![root_node] };
    let mut out = vec![start.clone()];
    let mut live = vec![start];
    for _ in 0..depth {
        let extended: Vec<Vec<ComputationalPath>> = live
            .par_iter()
            .map(|path| {
                let mut cands = ctx.candidates(path.last())?;
                cands.sort_by(|a, b| by_rank(a, b, opts.rank_abs));
                if let Some(n) = opts.beam {
                    cands.truncate(n);
                }
                Ok(cands
                    .into_iter()
                    .map(|c| {
                        let mut nodes = path.nodes.clone();
                        nodes.push(c);
                        ComputationalPath { nodes }
                    })
                    .collect())
            })
            .collect::<Result<_>>()?;
        let mut next: Vec<ComputationalPath> = extended.into_iter().flatten().collect();
        next.sort_by(|a, b| by_rank(a.last(), b.last(), opts.rank_abs).then_with(|| a.keys().cmp(&b.keys())));
        if let Some(n) = opts.beam {
            next.truncate(n);
        }
        if next.is_empty() {
            break;
        }
        out.extend(next.iter().cloned());
        live = next;
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeInfo {
    pub attribution: f64,
    pub active: bool,
}

/// Merged paths. Edges are keyed `(child, parent)`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CircuitGraph {
    pub root: Option<NodeKey>,
    pub nodes: BTreeMap<NodeKey, NodeInfo>,
    pub edges: BTreeMap<(NodeKey, NodeKey), f64>,
    /// Constant terms of every expanded prefix, summed per node.
    pub bias_terms: BTreeMap<NodeKey, f64>,
    /// Error-node attributions keyed `(error node, consumer)`.
    pub errors: BTreeMap<(NodeKey, NodeKey), f64>,
    seen: HashSet<Vec<NodeKey>>,
    expanded: HashSet<Vec<NodeKey>>,
    /// Direction of every expanded prefix, for error nodes.
    expansions: Vec<(NodeKey, PulledBackFeature)>,
}

impl CircuitGraph {
    /// Add one path; prefixes already seen contribute nothing.
    pub fn add_path(&mut self, path: &ComputationalPath) -> Result<()> {
        let keys = path.keys();
        let root = keys[0];
        match self.root {
            None => self.root = Some(root),
            Some(r) if r != root => {
                return Err(Error::Usage(format!("path rooted at {root} added to a graph rooted at {r}")));
            }
            _ => {}
        }
        for k in 0..keys.len() {
            let prefix = keys[..=k].to_vec();
            if self.seen.contains(&prefix) {
                continue;
            }
            self.seen.insert(prefix);
            let node = &path.nodes[k];
            if k == 0 {
                self.nodes.insert(
                    node.key,
                    NodeInfo {
                        attribution: node.attribution,
                        active: node.active,
                    },
                );
                continue;
            }
            self.nodes
                .entry(node.key)
                .or_insert(NodeInfo {
                    attribution: 0.0,
                    active: node.active,
                })
                .attribution += node.attribution;
            *self.edges.entry((node.key, keys[k - 1])).or_insert(0.0) += node.attribution;
            if self.expanded.insert(keys[..k].to_vec()) {
                let parent = &path.nodes[k - 1];
                let dir = parent
                    .direction
                    .as_ref()
                    .ok_or_else(|| Error::Usage(format!("terminal node {} has a child", parent.key)))?;
                *self.bias_terms.entry(parent.key).or_insert(0.0) += dir.constant;
                self.expansions.push((parent.key, dir.clone()));
            }
        }
        Ok(())
    }

    /// Nodes with at least one expanded prefix.
    pub fn non_leaf_nodes(&self) -> impl Iterator<Item = &NodeKey> {
        self.bias_terms.keys()
    }

    /// `attribution - incoming edges - incoming errors - bias terms` for every
    /// non-leaf node.
    pub fn conservation_residuals(&self) -> Vec<(NodeKey, f64, f64)> {
        let mut incoming: BTreeMap<NodeKey, f64> = BTreeMap::new();
        for ((_, parent), a) in self.edges.iter().chain(self.errors.iter()) {
            *incoming.entry(*parent).or_insert(0.0) += a;
        }
        self.bias_terms
            .iter()
            .map(|(k, bias)| {
                let a = self.nodes[k].attribution;
                (*k, a, a - incoming.get(k).copied().unwrap_or(0.0) - bias)
            })
            .collect()
    }
}

/// Merge paths sharing one root into a graph.
pub fn paths_to_graph(paths: &[ComputationalPath]) -> Result<CircuitGraph> {
    let mut g = CircuitGraph::default();
    for p in paths {
        g.add_path(p)?;
    }
    Ok(g)
}

/// Attach, for every expanded prefix, one error node per lower MLP layer
/// carrying `direction . (mlp_out - transcoder_out)` at the prefix's token.
pub fn add_error_nodes(graph: &CircuitGraph, ctx: &CircuitContext) -> Result<CircuitGraph> {
    let mut g = graph.clone();
    let n = ctx.cache.n_tokens();
    let mut tc_out: Vec<Option<Array2<f32>>> = Vec::new();
    for l in 0..ctx.params.config.n_layers {
        tc_out.push(match (ctx.coder(l), ctx.activations(l)) {
            (Some(c), Some(z)) => {
                if z.nrows() != n {
                    return Err(Error::Config("cache and context disagree".into()));
                }
                Some(c.decode(z.view()))
            }
            _ => None,
        });
    }
    for (consumer, dir) in &graph.expansions {
        let site = dir.site.ok_or_else(|| Error::Usage("expansion without a site".into()))?;
        if site.token >= n {
            return Err(Error::Config("graph was built from a different cache".into()));
        }
        for l in site.mlp_layers_below() {
            let out = tc_out[l]
                .as_ref()
                .ok_or_else(|| Error::Usage(format!("no transcoder for layer {l}")))?;
            let err = &ctx.cache.layers[l].mlp_out.row(site.token) - &out.row(site.token);
            let value = dot64(dir.direction.view(), err.view());
            let key = NodeKey::terminal(NodeKind::Error, l, site.token);
            g.nodes
                .entry(key)
                .or_insert(NodeInfo {
                    attribution: 0.0,
                    active: true,
                })
                .attribution += value;
            *g.errors.entry((key, *consumer)).or_insert(0.0) += value;
        }
    }
    Ok(g)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GraphFormat {
    Dot,
    Json,
}

impl std::str::FromStr for GraphFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dot" => Ok(GraphFormat::Dot),
            "json" => Ok(GraphFormat::Json),
            other => Err(Error::Usage(format!("unknown graph format {other:?}"))),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct JsonNode {
    id: String,
    kind: NodeKind,
    layer: usize,
    token: usize,
    index: usize,
    attribution: f64,
    active: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bias: Option<f64>,
}

#[derive(Serialize, Deserialize)]
struct JsonEdge {
    src: String,
    dst: String,
    attribution: f64,
}

#[derive(Serialize, Deserialize)]
struct JsonGraph {
    root: Option<String>,
    nodes: Vec<JsonNode>,
    edges: Vec<JsonEdge>,
    errors: Vec<JsonEdge>,
}

/// Serializable view of a graph, as exported to JSON.
pub fn graph_to_json_value(graph: &CircuitGraph) -> serde_json::Value {
    serde_json::to_value(to_json_graph(graph)).expect("graph serializes")
}

fn to_json_graph(g: &CircuitGraph) -> JsonGraph {
    let edge = |((src, dst), a): (&(NodeKey, NodeKey), &f64)| JsonEdge {
        src: src.label(),
        dst: dst.label(),
        attribution: *a,
    };
    JsonGraph {
        root: g.root.map(|r| r.label()),
        nodes: g
            .nodes
            .iter()
            .map(|(k, info)| JsonNode {
                id: k.label(),
                kind: k.kind,
                layer: k.layer,
                token: k.token,
                index: k.index,
                attribution: info.attribution,
                active: info.active,
                bias: g.bias_terms.get(k).copied(),
            })
            .collect(),
        edges: g.edges.iter().map(edge).collect(),
        errors: g.errors.iter().map(edge).collect(),
    }
}

/// Deterministic DOT or JSON rendering; nodes and edges in key order.
pub fn export_graph(graph: &CircuitGraph, format: GraphFormat) -> String {
    match format {
        GraphFormat::Json => {
            let mut s = serde_json::to_string_pretty(&to_json_graph(graph)).expect("graph serializes");
            s.push('\n');
            s
        }
        GraphFormat::Dot => {
            let mut s = String::from("digraph circuit {\n  rankdir=RL;\n");
            for (k, info) in &graph.nodes {
                let shape = if Some(*k) == graph.root { "doublecircle" } else { "box" };
                s.push_str(&format!(
                    "  \"{k}\" [label=\"{k}\\n{}\", shape={shape}];\n",
                    info.attribution
                ));
            }
            for ((src, dst), a) in graph.edges.iter().chain(graph.errors.iter()) {
                s.push_str(&format!("  \"{src}\" -> \"{dst}\" [label=\"{a}\"];\n"));
            }
            s.push_str("}\n");
            s
        }
    }
}

/// Rebuild a graph from its JSON export. Prefix bookkeeping is not stored,
/// so the result can be exported again but not extended.
pub fn parse_graph_json(text: &str) -> Result<CircuitGraph> {
    let j: JsonGraph = serde_json::from_str(text)?;
    let mut g = CircuitGraph {
        root: j.root.as_deref().map(NodeKey::parse).transpose()?,
        ..Default::default()
    };
    for n in j.nodes {
        let key = NodeKey {
            layer: n.layer,
            token: n.token,
            kind: n.kind,
            index: n.index,
        };
        if key.label() != n.id {
            return Err(Error::Input(format!("node id {:?} disagrees with its fields", n.id)));
        }
        g.nodes.insert(
            key,
            NodeInfo {
                attribution: n.attribution,
                active: n.active,
            },
        );
        if let Some(b) = n.bias {
            g.bias_terms.insert(key, b);
        }
    }
    for (list, target) in [(j.edges, &mut g.edges), (j.errors, &mut g.errors)] {
        for e in list {
            target.insert((NodeKey::parse(&e.src)?, NodeKey::parse(&e.dst)?), e.attribution);
        }
    }
    let known: BTreeSet<&NodeKey> = g.nodes.keys().collect();
    if g.edges.keys().chain(g.errors.keys()).any(|(a, b)| !known.contains(a) || !known.contains(b)) {
        return Err(Error::Input("edge endpoint missing from nodes".into()));
    }
    Ok(g)
}
