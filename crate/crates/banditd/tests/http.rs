use std::fs;
use std::path::Path;
use std::sync::Arc;

use axum::body::{to_bytes, Body};
use axum::http::{Request, StatusCode};
use axum::Router;
use banditd::service::{bootstrap, router, Service};
use cmab_core::config::Registry;
use cmab_core::DecisionRecord;
use serde_json::{json, Value};
use tower::ServiceExt;

fn registry(dir: &Path, rules: Value, with_dir_arms: bool) -> Registry {
    let schema = json!({"schema_version": 1, "features": [
        {"name": "device", "kind": "categorical", "categories": ["desktop", "mobile"],
         "coarse_merge": {"desktop": "any", "mobile": "any"}, "other_slot": false}
    ]});
    let arms = if with_dir_arms {
        fs::create_dir_all(dir.join("arms")).unwrap();
        fs::write(
            dir.join("arms/feed.json"),
            json!([{"arm_id": "a", "arm_type": "promo"}, {"arm_id": "b", "arm_type": "promo"}])
                .to_string(),
        )
        .unwrap();
        json!({"dir": "arms"})
    } else {
        json!([{"arm_id": "a", "arm_type": "promo"}, {"arm_id": "b", "arm_type": "promo"}])
    };
    let doc = json!({"instances": [{
        "instance_id": "feed",
        "schema": schema,
        "rules": rules,
        "keyspaces": [{"test_id": "t", "variant_id": "v"}],
        "arms": arms,
    }]});
    let path = dir.join("registry.json");
    fs::write(&path, doc.to_string()).unwrap();
    Registry::load(&path).unwrap()
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(match body {
            Some(v) => Body::from(v.to_string()),
            None => Body::empty(),
        })
        .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = to_bytes(resp.into_body(), 1 << 20).await.unwrap();
    let value = if bytes.is_empty() {
        Value::Null
    } else {
        serde_json::from_slice(&bytes)
            .unwrap_or(Value::String(String::from_utf8_lossy(&bytes).into()))
    };
    (status, value)
}

fn serve_body(session: &str) -> Value {
    json!({"session_id": session, "attributes": {"device": "mobile"}, "test_id": "t", "variant_id": "v"})
}

#[tokio::test]
async fn serve_reward_and_models_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let reg = registry(dir.path(), json!([]), true);
    let state = dir.path().join("state");
    let svc = Arc::new(Service::open(&reg, &state, true).unwrap());
    let app = router(Arc::clone(&svc));

    // no snapshot yet
    let (status, _) = call(&app, "POST", "/v1/feed/serve", Some(serve_body(""))).await;
    assert_eq!(status, StatusCode::SERVICE_UNAVAILABLE);

    bootstrap(&svc, 1_000).unwrap();
    let (status, body) = call(&app, "GET", "/healthz", None).await;
    assert_eq!((status, body), (StatusCode::OK, Value::String("ok".into())));

    let (status, body) = call(&app, "POST", "/v1/feed/serve", Some(serve_body(""))).await;
    assert_eq!(status, StatusCode::OK, "{body}");
    let id = body["decision_id"].as_str().unwrap().to_string();
    assert!(["a", "b"].contains(&body["arm_id"].as_str().unwrap()));

    let (status, _) = call(
        &app,
        "POST",
        "/v1/feed/reward",
        Some(json!({"decision_id": id, "reward": 1.0})),
    )
    .await;
    assert_eq!(status, StatusCode::NO_CONTENT);

    let (status, models) = call(&app, "GET", "/v1/feed/models", None).await;
    assert_eq!(status, StatusCode::OK);
    let v1 = models[0]["model_version"].as_u64().unwrap();
    assert_eq!(models[0]["arms"], json!(["a", "b"]));

    // the next cycle folds the decision in and publishes a newer snapshot
    let outcome = svc.cycle("feed", 2_000).unwrap();
    assert_eq!(outcome.closed[0].2, 1);
    assert!(outcome.errors.is_empty());
    let (_, models) = call(&app, "GET", "/v1/feed/models", None).await;
    assert!(models[0]["model_version"].as_u64().unwrap() > v1);

    svc.flush().unwrap();
    let logged: Vec<DecisionRecord> =
        cmab_core::io::read_jsonl(&state.join("logs/decisions.jsonl")).unwrap();
    assert_eq!(logged.len(), 1);
    assert_eq!(logged[0].decision_id, id);
}

#[tokio::test]
async fn errors_map_to_status_codes() {
    let dir = tempfile::tempdir().unwrap();
    // promo is capped at one in a row, and both arms are promos
    let rules = json!([{"kind": "MaxConsecutive", "arm_type": "promo", "j": 1}]);
    let reg = registry(dir.path(), rules, false);
    let svc = Arc::new(Service::open(&reg, &dir.path().join("state"), true).unwrap());
    bootstrap(&svc, 0).unwrap();
    let app = router(svc);

    let (status, _) = call(&app, "POST", "/v1/nope/serve", Some(serve_body(""))).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, _) = call(&app, "GET", "/v1/nope/models", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);

    let mut other = serve_body("");
    other["variant_id"] = json!("w");
    let (status, _) = call(&app, "POST", "/v1/feed/serve", Some(other)).await;
    assert_eq!(status, StatusCode::NOT_FOUND);

    let (status, body) = call(&app, "POST", "/v1/feed/serve", Some(json!({"oops": 1}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert!(body["error"].is_string());

    let mut bad_value = serve_body("");
    bad_value["attributes"]["device"] = json!(3);
    let (status, _) = call(&app, "POST", "/v1/feed/serve", Some(bad_value)).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);

    let (status, _) = call(
        &app,
        "POST",
        "/v1/feed/reward",
        Some(json!({"decision_id": "x", "reward": "lots"})),
    )
    .await;
    assert_eq!(status, StatusCode::BAD_REQUEST);

    // first card of the feed is fine, the second has nothing eligible
    let (status, _) = call(&app, "POST", "/v1/feed/serve", Some(serve_body("s"))).await;
    assert_eq!(status, StatusCode::OK);
    let (status, body) = call(&app, "POST", "/v1/feed/serve", Some(serve_body("s"))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY, "{body}");
}
