//! JSON-over-HTTP access to a loaded model, its coders and a prompt set.
//!
//! | route | body |
//! |---|---|
//! | `GET /health` | `{"status":"ok"}` |
//! | `GET /prompts` | `{"prompts":[{"id","n_tokens","tokens"?,"text"?}]}` |
//! | `GET /features/{layer}/{idx}/deembed?k=` | `{"layer","feature","entries":[{"token_id","score","text"?}]}` |
//! | `GET /features/{layer}/{idx}/examples?k=&redact=` | `{"layer","feature","examples":[{"prompt","token","activation","text"?}]}` |
//! | `POST /trace` | `{"trace_id","graph"}`; see [`crate::circuits::export_graph`] |
//! | `GET /trace/{id}` | same as `POST /trace` |
//! | `POST /ablate` | `{"unit","layer","k","prob_diff","original","full","floor"}` |
//! | `GET /invariant_connections?upper_layer=&upper_idx=&via_head=L:H` | `{"contributors":[..],"entries":[..]}` |
//!
//! Errors are `{"error":{"code","message"}}` with status 400, 404, 413 or 500.
//! Blind mode drops every `text` field and the token ids of prompts.

use std::collections::{BTreeMap, HashMap};
use std::net::SocketAddr;
use std::sync::{Arc, Mutex};

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use serde_json::{json, Value};

use crate::attribution::{deembed, FeatureHandle};
use crate::circuits::{add_error_nodes, graph_to_json_value, greedy_paths, paths_to_graph, CircuitContext, SearchOptions};
use crate::coder::{Coder, CoderKind};
use crate::corpus::{gen_greater_than, GreaterThanTask, Vocab};
use crate::error::Error;
use crate::eval::{top_activating, topk_ablation_curve, weighted_deembedding_scores, AblationUnit};
use crate::model::{forward_with_cache, ModelParams};

/// Largest allowed `L * N` for one trace.
pub const TRACE_BUDGET: usize = 512;

pub struct Session {
    pub params: ModelParams,
    /// At most one coder per layer.
    pub coders: BTreeMap<usize, Coder>,
    pub vocab: Option<Vocab>,
    pub prompts: Vec<Vec<usize>>,
    pub blind: bool,
    task: Option<GreaterThanTask>,
    traces: Mutex<(u64, BTreeMap<u64, Value>)>,
}

impl Session {
    pub fn new(params: ModelParams, coders: Vec<Coder>, vocab: Option<Vocab>, prompts: Vec<Vec<usize>>, blind: bool) -> crate::Result<Self> {
        let mut by_layer = BTreeMap::new();
        for c in coders {
            if c.layer >= params.config.n_layers || c.d_in() != params.config.d_model {
                return Err(Error::Config(format!("coder for layer {} does not fit the model", c.layer)));
            }
            let layer = c.layer;
            if by_layer.insert(layer, c).is_some() {
                return Err(Error::Config(format!("two coders for layer {layer}")));
            }
        }
        if let Some(v) = &vocab {
            if v.len() != params.config.vocab_size {
                return Err(Error::Config("vocabulary size differs from the model".into()));
            }
        }
        for p in &prompts {
            params.check_tokens(p)?;
        }
        let task = vocab.as_ref().and_then(|v| gen_greater_than(v).ok());
        Ok(Session {
            params,
            coders: by_layer,
            vocab,
            prompts,
            blind,
            task,
            traces: Mutex::new((0, BTreeMap::new())),
        })
    }

    fn text_vocab(&self, redact: bool) -> Option<&Vocab> {
        if self.blind || redact {
            None
        } else {
            self.vocab.as_ref()
        }
    }

    fn coder(&self, layer: usize) -> Result<&Coder, ApiError> {
        self.coders
            .get(&layer)
            .ok_or_else(|| ApiError::not_found(format!("no coder for layer {layer}")))
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
}

impl ApiError {
    fn bad(code: &'static str, message: impl Into<String>) -> Self {
        ApiError {
            status: StatusCode::BAD_REQUEST,
            code,
            message: message.into(),
        }
    }

    fn not_found(message: impl Into<String>) -> Self {
        ApiError {
            status: StatusCode::NOT_FOUND,
            code: "not_found",
            message: message.into(),
        }
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        match e {
            Error::Input(_) | Error::UnknownToken { .. } => ApiError::bad("invalid_input", e.to_string()),
            Error::Usage(_) | Error::Config(_) => ApiError::bad("invalid_request", e.to_string()),
            other => ApiError {
                status: StatusCode::INTERNAL_SERVER_ERROR,
                code: "internal",
                message: other.to_string(),
            },
        }
    }
}

impl From<JsonRejection> for ApiError {
    fn from(e: JsonRejection) -> Self {
        ApiError::bad("malformed_body", e.body_text())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({"error": {"code": self.code, "message": self.message}}))).into_response()
    }
}

type ApiResult = Result<Json<Value>, ApiError>;
type Shared = Arc<Session>;
type Params = Query<HashMap<String, String>>;

fn query<T: std::str::FromStr>(q: &HashMap<String, String>, key: &str, default: Option<T>) -> Result<T, ApiError> {
    match q.get(key) {
        Some(v) => v
            .parse()
            .map_err(|_| ApiError::bad("malformed_query", format!("bad value {v:?} for {key}"))),
        None => default.ok_or_else(|| ApiError::bad("malformed_query", format!("missing {key}"))),
    }
}

fn path_ids(raw: &(String, String)) -> Result<(usize, usize), ApiError> {
    let parse = |s: &str| s.parse::<usize>().map_err(|_| ApiError::bad("malformed_path", format!("bad id {s:?}")));
    Ok((parse(&raw.0)?, parse(&raw.1)?))
}

pub fn router(session: Session) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/prompts", get(prompts))
        .route("/features/{layer}/{idx}/deembed", get(feature_deembed))
        .route("/features/{layer}/{idx}/examples", get(feature_examples))
        .route("/examples/{layer}/{idx}", get(feature_examples))
        .route("/trace", post(trace))
        .route("/trace/{id}", get(get_trace))
        .route("/ablate", post(ablate))
        .route("/invariant_connections", get(invariant_connections))
        .with_state(Arc::new(session))
}

pub async fn serve(session: Session, addr: SocketAddr) -> crate::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(session)).await?;
    Ok(())
}

async fn health() -> Json<Value> {
    Json(json!({"status": "ok"}))
}

async fn prompts(State(s): State<Shared>) -> ApiResult {
    let list: Vec<Value> = s
        .prompts
        .iter()
        .enumerate()
        .map(|(id, p)| {
            let mut v = json!({"id": id, "n_tokens": p.len()});
            if !s.blind {
                v["tokens"] = json!(p);
                if let Some(vocab) = &s.vocab {
                    v["text"] = json!(p.iter().map(|&t| vocab.token(t).unwrap_or("")).collect::<Vec<_>>());
                }
            }
            v
        })
        .collect();
    Ok(Json(json!({"prompts": list})))
}

fn feature_in_range(s: &Session, layer: usize, feature: usize) -> Result<&Coder, ApiError> {
    let coder = s.coder(layer)?;
    if feature >= coder.d_features() {
        return Err(ApiError::not_found(format!("layer {layer} has no feature {feature}")));
    }
    Ok(coder)
}

async fn feature_deembed(State(s): State<Shared>, Path(raw): Path<(String, String)>, Query(q): Params) -> ApiResult {
    let (layer, feature) = path_ids(&raw)?;
    let k: usize = query(&q, "k", Some(10))?;
    let coder = feature_in_range(&s, layer, feature)?;
    let (f_enc, _) = coder.feature_vectors(feature)?;
    let vocab = s.text_vocab(false);
    let entries: Vec<Value> = deembed(s.params.w_e.view(), f_enc.view(), k)?
        .into_iter()
        .map(|(id, score)| {
            let mut v = json!({"token_id": id, "score": score});
            if let Some(text) = vocab.and_then(|voc| voc.token(id)) {
                v["text"] = json!(text);
            }
            v
        })
        .collect();
    Ok(Json(json!({"layer": layer, "feature": feature, "entries": entries})))
}

async fn feature_examples(State(s): State<Shared>, Path(raw): Path<(String, String)>, Query(q): Params) -> ApiResult {
    let (layer, feature) = path_ids(&raw)?;
    let k: usize = query(&q, "k", Some(10))?;
    let redact: bool = query(&q, "redact", Some(false))?;
    let coder = feature_in_range(&s, layer, feature)?;
    let examples = top_activating(&s.params, coder, feature, &s.prompts, k, s.text_vocab(redact), redact || s.blind)?;
    Ok(Json(json!({"layer": layer, "feature": feature, "examples": examples})))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceRequest {
    pub prompt_id: usize,
    pub layer: usize,
    pub feature: usize,
    pub token: usize,
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(rename = "L")]
    pub l: usize,
    #[serde(default)]
    pub rank_abs: bool,
    #[serde(default)]
    pub error_nodes: bool,
}

/// The library computation behind `POST /trace`.
pub fn trace_graph(s: &Session, req: &TraceRequest) -> Result<Value, ApiError> {
    if req.n == 0 || req.l == 0 {
        return Err(ApiError::bad("invalid_request", "N and L must be at least 1"));
    }
    if req.n.saturating_mul(req.l) > TRACE_BUDGET {
        return Err(ApiError {
            status: StatusCode::PAYLOAD_TOO_LARGE,
            code: "budget_exceeded",
            message: format!("L*N = {} exceeds {TRACE_BUDGET}", req.n * req.l),
        });
    }
    let prompt = s
        .prompts
        .get(req.prompt_id)
        .ok_or_else(|| ApiError::not_found(format!("no prompt {}", req.prompt_id)))?;
    let coders: Vec<&Coder> = s.coders.values().filter(|c| c.kind == CoderKind::Transcoder).collect();
    let (_, cache) = forward_with_cache(&s.params, prompt)?;
    let ctx = CircuitContext::new(&s.params, &cache, &coders)?;
    let root = FeatureHandle {
        layer: req.layer,
        feature: req.feature,
        token: req.token,
    };
    let opts = SearchOptions {
        beam: Some(req.n),
        rank_abs: req.rank_abs,
    };
    let paths = greedy_paths(&ctx, root, req.l, opts)?;
    let mut graph = paths_to_graph(&paths)?;
    if req.error_nodes {
        graph = add_error_nodes(&graph, &ctx)?;
    }
    Ok(graph_to_json_value(&graph))
}

async fn trace(State(s): State<Shared>, body: Result<Json<TraceRequest>, JsonRejection>) -> ApiResult {
    let Json(req) = body?;
    let graph = trace_graph(&s, &req)?;
    let mut store = s.traces.lock().expect("trace store poisoned");
    let id = store.0;
    store.0 += 1;
    let payload = json!({"trace_id": id, "graph": graph});
    store.1.insert(id, payload.clone());
    Ok(Json(payload))
}

async fn get_trace(State(s): State<Shared>, Path(raw): Path<String>) -> ApiResult {
    let id: u64 = raw.parse().map_err(|_| ApiError::bad("malformed_path", format!("bad trace id {raw:?}")))?;
    let store = s.traces.lock().expect("trace store poisoned");
    store
        .1
        .get(&id)
        .cloned()
        .map(Json)
        .ok_or_else(|| ApiError::not_found(format!("no trace {id}")))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct AblateRequest {
    layer: usize,
    unit: String,
    k: usize,
}

async fn ablate(State(s): State<Shared>, body: Result<Json<AblateRequest>, JsonRejection>) -> ApiResult {
    let Json(req) = body?;
    let unit: AblationUnit = req.unit.parse()?;
    let task = s
        .task
        .as_ref()
        .ok_or_else(|| ApiError::bad("no_task", "the session vocabulary has no greater-than task"))?;
    let coder = match unit {
        AblationUnit::TranscoderFeatures => Some(s.coder(req.layer)?),
        AblationUnit::MlpNeurons => None,
    };
    let curve = topk_ablation_curve(&s.params, task, unit, req.layer, coder, &[req.k])?;
    Ok(Json(json!({
        "unit": unit.as_str(),
        "layer": req.layer,
        "k": req.k,
        "prob_diff": curve.points[0].1,
        "original": curve.original,
        "full": curve.full,
        "floor": curve.floor,
    })))
}

async fn invariant_connections(State(s): State<Shared>, Query(q): Params) -> ApiResult {
    let upper_layer: usize = query(&q, "upper_layer", None)?;
    let upper_idx: usize = query(&q, "upper_idx", None)?;
    let via: String = query(&q, "via_head", None)?;
    let (hl, hh) = via
        .split_once(':')
        .and_then(|(l, h)| Some((l.parse::<usize>().ok()?, h.parse::<usize>().ok()?)))
        .ok_or_else(|| ApiError::bad("malformed_query", format!("via_head must be L:H, got {via:?}")))?;
    if hl == 0 {
        return Err(ApiError::bad("invalid_request", "a head in layer 0 has no lower coder"));
    }
    let lower_layer: usize = query(&q, "lower_layer", Some(hl - 1))?;
    let top_m: usize = query(&q, "top_m", Some(10))?;
    let k: usize = query(&q, "k", Some(20))?;
    if lower_layer >= hl || hl > upper_layer {
        return Err(ApiError::bad("invalid_request", "need lower_layer < head layer <= upper_layer"));
    }
    let upper = feature_in_range(&s, upper_layer, upper_idx)?;
    let lower = s.coder(lower_layer)?;
    let w = weighted_deembedding_scores(&s.params, upper, upper_idx, (hl, hh), lower, top_m)?;
    let vocab = s.text_vocab(false);
    let entries: Vec<Value> = crate::attribution::top_k(&w.scores, k)
        .into_iter()
        .map(|(id, score)| {
            let mut v = json!({"token_id": id, "score": score});
            if let Some(text) = vocab.and_then(|voc| voc.token(id)) {
                v["text"] = json!(text);
            }
            v
        })
        .collect();
    let contributors: Vec<Value> = w
        .contributors
        .iter()
        .map(|&(feature, weight)| json!({"feature": feature, "weight": weight}))
        .collect();
    Ok(Json(json!({
        "upper_layer": upper_layer,
        "upper_idx": upper_idx,
        "via_head": [hl, hh],
        "lower_layer": lower_layer,
        "contributors": contributors,
        "entries": entries,
    })))
}
