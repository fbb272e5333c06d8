//! The full labeling round trip through the HTTP API.

use std::io::Cursor;
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use chrono::{TimeZone, Utc};
use http_body_util::BodyExt;
use meshqa_core::gltf_io::encode_glb;
use meshqa_core::manifest::read_all;
use meshqa_core::mesh::unit_cube;
use meshqa_core::QualityScore;
use meshqa_service::{router, ManualClock, Service, ServiceConfig, ANNOTATOR_HEADER};
use serde_json::{json, Value};
use tower::ServiceExt;

struct Client {
    app: Router,
}

impl Client {
    async fn call(&self, method: &str, uri: &str, who: Option<&str>, body: Option<Value>) -> (StatusCode, Vec<u8>) {
        let mut req = Request::builder().method(method).uri(uri);
        if let Some(w) = who {
            req = req.header(ANNOTATOR_HEADER, w);
        }
        let req = match body {
            Some(b) => req.header("content-type", "application/json").body(Body::from(b.to_string())),
            None => req.body(Body::empty()),
        }
        .unwrap();
        let resp = self.app.clone().oneshot(req).await.unwrap();
        let status = resp.status();
        (status, resp.into_body().collect().await.unwrap().to_bytes().to_vec())
    }

    async fn json(&self, method: &str, uri: &str, who: Option<&str>, body: Option<Value>) -> (StatusCode, Value) {
        let (s, bytes) = self.call(method, uri, who, body).await;
        let v: Value = serde_json::from_slice(&bytes).unwrap_or_else(|_| panic!("{}", String::from_utf8_lossy(&bytes)));
        assert_eq!(v["schema_version"], 1, "{v}");
        (s, v)
    }
}

fn record(object_id: &str, score: u8, scene: bool) -> Value {
    json!({
        "object_id": object_id,
        "score": score,
        "tags": {"is_transparent": false, "is_scene": scene, "is_single_color": false,
                 "is_multi_object": false, "is_figure": object_id == "o3"},
        "source": "human",
        "annotator_id": null,
        "confidences": null,
        "created_at": "2024-05-01T12:00:00Z",
        "batch_id": null,
    })
}

fn client(config: ServiceConfig) -> Client {
    let clock = Arc::new(ManualClock::new(Utc.with_ymd_and_hms(2024, 5, 1, 9, 0, 0).unwrap()));
    Client { app: router(Arc::new(Service::in_memory(clock, config))) }
}

#[tokio::test]
async fn three_object_batch_round_trip() {
    let c = client(ServiceConfig::default());
    let (s, v) = c
        .json("POST", "/batches", None, Some(json!({"batch_id": "b1", "object_ids": ["o1", "o2", "o3"], "validation_fraction": 1.0})))
        .await;
    assert_eq!(s, StatusCode::CREATED);
    assert_eq!(v["batch"]["state"], "OPEN");

    // annotator A labels everything
    for (i, id) in ["o1", "o2", "o3"].into_iter().enumerate() {
        let (_, v) = c.json("POST", "/batches/b1/tasks/next", Some("A"), None).await;
        assert_eq!(v["assignment"]["object_id"], id);
        assert_eq!(v["assignment"]["role"], "PRIMARY");
        let aid = v["assignment"]["assignment_id"].as_str().unwrap().to_string();
        let (s, v) = c
            .json("POST", "/annotations", Some("A"), Some(json!({"assignment_id": aid, "record": record(id, 2, i == 1)})))
            .await;
        assert_eq!(s, StatusCode::CREATED, "{v}");
    }
    let (_, v) = c.json("POST", "/batches/b1/tasks/next", Some("A"), None).await;
    assert_eq!(v["assignment"], Value::Null);
    assert_eq!(v["batch_state"], "VALIDATING");

    let (s, v) = c.json("POST", "/batches/b1/validate", None, Some(json!({"seed": 7}))).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["assignments"].as_array().unwrap().len(), 3);

    // A may not validate their own work
    let (_, v) = c.json("POST", "/batches/b1/tasks/next", Some("A"), None).await;
    assert_eq!(v["assignment"], Value::Null);

    // B agrees everywhere except is_scene on o2
    for id in ["o1", "o2", "o3"] {
        let (_, v) = c.json("POST", "/batches/b1/tasks/next", Some("B"), None).await;
        assert_eq!(v["assignment"]["object_id"], id);
        assert_eq!(v["assignment"]["role"], "VALIDATOR");
        let aid = v["assignment"]["assignment_id"].as_str().unwrap().to_string();
        let (s, _) =
            c.json("POST", "/annotations", Some("B"), Some(json!({"assignment_id": aid, "record": record(id, 2, false)}))).await;
        assert_eq!(s, StatusCode::CREATED);
    }

    let (s, v) = c.json("GET", "/batches/b1/discrepancies", None, None).await;
    assert_eq!(s, StatusCode::OK);
    let ds = v["discrepancies"].as_array().unwrap();
    assert_eq!(ds.len(), 1, "{v}");
    assert_eq!((ds[0]["object_id"].as_str(), ds[0]["field"].as_str()), (Some("o2"), Some("is_scene")));
    assert_eq!((ds[0]["primary_value"].clone(), ds[0]["validator_value"].clone()), (json!(true), json!(false)));

    // export of a batch with an open discrepancy is refused
    let (s, v) = c.json("GET", "/export?batch=b1&resolved_only=true", None, None).await;
    assert_eq!(s, StatusCode::CONFLICT);
    assert_eq!(v["error"]["code"], "unresolved-discrepancies");
    assert!(v["error"]["message"].as_str().unwrap().contains("o2"));

    let did = ds[0]["discrepancy_id"].as_str().unwrap();
    let (s, v) = c.json("POST", &format!("/discrepancies/{did}/resolve"), None, Some(json!({"value": false}))).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["batch_state"], "CLOSED");
    assert_eq!(v["discrepancy"]["resolution"], json!(false));

    let (s, body) = c.call("GET", "/export?batch=b1&resolved_only=true", None, None).await;
    assert_eq!(s, StatusCode::OK);
    let records = read_all(Cursor::new(&body)).unwrap();
    assert_eq!(records.iter().map(|r| r.object_id.as_str()).collect::<Vec<_>>(), ["o1", "o2", "o3"]);
    assert!(records.iter().all(|r| r.score == QualityScore::High && !r.tags.is_scene));
    assert!(records[2].tags.is_figure);
    assert!(records.iter().all(|r| r.annotator_id.as_deref() == Some("A") && r.batch_id.as_deref() == Some("b1")));
    let (_, again) = c.call("GET", "/export?batch=b1&resolved_only=true", None, None).await;
    assert_eq!(again, body);
}

#[tokio::test]
async fn error_responses_carry_codes() {
    let c = client(ServiceConfig::default());
    let (s, v) = c.json("POST", "/batches", None, Some(json!({"object_ids": []}))).await;
    assert_eq!((s, v["error"]["code"].as_str()), (StatusCode::BAD_REQUEST, Some("invalid-request")));
    let (s, v) = c.json("POST", "/batches", None, Some(json!({"object_ids": ["x", "x"]}))).await;
    assert_eq!((s, v["error"]["code"].as_str()), (StatusCode::BAD_REQUEST, Some("duplicate-object-within-batch")));
    let (s, v) = c.json("POST", "/batches", None, Some(json!({"batch_id": "b", "object_ids": ["x"]}))).await;
    assert_eq!(s, StatusCode::CREATED, "{v}");
    let (s, v) = c.json("POST", "/batches", None, Some(json!({"batch_id": "b", "object_ids": ["y"]}))).await;
    assert_eq!((s, v["error"]["code"].as_str()), (StatusCode::CONFLICT, Some("duplicate-batch-id")));
    let (s, v) = c.json("GET", "/batches/nope", None, None).await;
    assert_eq!((s, v["error"]["code"].as_str()), (StatusCode::NOT_FOUND, Some("unknown-batch")));
    let (s, _) = c.json("POST", "/batches/b/tasks/next", None, None).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let (s, v) = c.json("POST", "/batches/b/validate", None, Some(json!({"seed": 1}))).await;
    assert_eq!((s, v["error"]["code"].as_str()), (StatusCode::CONFLICT, Some("batch-not-ready")));

    let (_, v) = c.json("POST", "/batches/b/tasks/next", Some("A"), None).await;
    let aid = v["assignment"]["assignment_id"].as_str().unwrap().to_string();
    let (s, v) = c
        .json("POST", "/annotations", Some("A"), Some(json!({"assignment_id": aid, "record": record("other", 1, false)})))
        .await;
    assert_eq!((s, v["error"]["code"].as_str()), (StatusCode::UNPROCESSABLE_ENTITY, Some("object-mismatch")));
    let mut bad = record("x", 1, false);
    bad["score"] = json!(9);
    let (s, v) = c.json("POST", "/annotations", Some("A"), Some(json!({"assignment_id": aid, "record": bad}))).await;
    assert_eq!((s, v["error"]["code"].as_str()), (StatusCode::UNPROCESSABLE_ENTITY, Some("schema-violation")));
    let (_, v) = c.json("GET", "/batches/b/annotations/x", None, None).await;
    assert_eq!(v["versions"], json!([]));
}

#[tokio::test]
async fn submitted_record_reads_back() {
    let c = client(ServiceConfig::default());
    c.json("POST", "/batches", None, Some(json!({"batch_id": "b", "object_ids": ["x", "y"]}))).await;
    let (_, v) = c.json("POST", "/batches/b/tasks/next", Some("A"), None).await;
    let aid = v["assignment"]["assignment_id"].as_str().unwrap().to_string();
    let mut r = record("x", 3, true);
    r["note"] = json!({"kept": [1, 2]});
    c.json("POST", "/annotations", Some("A"), Some(json!({"assignment_id": aid, "record": r.clone()}))).await;
    let (_, v) = c.json("GET", "/batches/b/annotations/x", None, None).await;
    let got = &v["versions"][0]["record"];
    r["annotator_id"] = json!("A");
    r["batch_id"] = json!("b");
    assert_eq!(got, &r);
    assert_eq!(v["versions"][0]["version"], 1);
}

#[tokio::test]
async fn serves_model_and_views() {
    let dir = tempfile::tempdir().unwrap();
    let glb = encode_glb(&[&unit_cube("cube")]);
    std::fs::write(dir.path().join("cube.glb"), &glb).unwrap();
    let c = client(ServiceConfig { assets_dir: Some(dir.path().into()), views: 4, view_resolution: (32, 24), ..Default::default() });
    let (s, body) = c.call("GET", "/objects/cube/model.glb", None, None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(body, glb);
    let (s, png) = c.call("GET", "/objects/cube/views/3.png", None, None).await;
    assert_eq!(s, StatusCode::OK);
    assert!(png.starts_with(b"\x89PNG"));
    let (s, _) = c.call("GET", "/objects/cube/views/4.png", None, None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, _) = c.call("GET", "/objects/missing/model.glb", None, None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
}
