//! The JSON API in-process: a few requests against the router, then
//! optionally a real server (`cargo run --example serve_api -- 127.0.0.1:8080`).

mod shared;

use axum::body::Body;
use axum::http::Request;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tc_core::attribution::feature_activation;
use tc_core::corpus::{gen_greater_than, Vocab};
use tc_core::model::forward_with_cache;
use tc_core::service::{router, serve, Session};
use tower::ServiceExt;

async fn call(app: &axum::Router, method: &str, uri: &str, body: Option<Value>) -> Value {
    let req = Request::builder().method(method).uri(uri).header("content-type", "application/json");
    let req = req.body(body.map_or_else(Body::empty, |b| Body::from(b.to_string()))).unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let v: Value = serde_json::from_slice(&bytes).unwrap();
    println!("{method} {uri} -> {status}");
    v
}

#[tokio::main]
async fn main() {
    let vocab = Vocab::toy();
    let params = shared::toy_model(&vocab);
    let coders = shared::toy_transcoders(&vocab, &params);
    let prompts = gen_greater_than(&vocab).unwrap().prompts;
    let make = || Session::new(params.clone(), coders.clone(), Some(vocab.clone()), prompts.clone(), false).unwrap();
    let app = router(make());

    call(&app, "GET", "/health", None).await;
    let deembed = call(&app, "GET", "/features/0/3/deembed?k=5", None).await;
    println!("  {deembed}");
    let token = prompts[0].len() - 1;
    let (_, cache) = forward_with_cache(&params, &prompts[0]).unwrap();
    let feature = (0..coders[1].d_features())
        .find(|&f| feature_activation(&cache, &coders[1], f, token).unwrap() > 0.0)
        .expect("an active feature");
    let trace = call(&app, "POST", "/trace", Some(json!({"prompt_id": 0, "layer": 1, "feature": feature, "token": token, "N": 3, "L": 2}))).await;
    let graph = &trace["graph"];
    println!("  trace {}: {} nodes, {} edges", trace["trace_id"], graph["nodes"].as_array().map_or(0, Vec::len), graph["edges"].as_array().map_or(0, Vec::len));
    let over = call(&app, "POST", "/trace", Some(json!({"prompt_id": 0, "layer": 1, "feature": 0, "token": token, "N": 64, "L": 9}))).await;
    println!("  {over}");

    if let Some(addr) = std::env::args().nth(1) {
        println!("serving on {addr}");
        serve(make(), addr.parse().expect("socket address")).await.unwrap();
    }
}
