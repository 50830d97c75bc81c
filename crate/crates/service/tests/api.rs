use std::path::{Path, PathBuf};

use axum::body::Body;
use axum::http::{header, Request, StatusCode};
use axum::Router;
use base64::Engine;
use http_body_util::BodyExt;
use rcdm::encoders::LabelMap;
use rcdm::trainer::{TrainingSet, Trainer};
use rcdm::{rcde, save_checkpoint, DenoiserConfig, EmbeddingMatrix, Injection, TrainConfig};
use rcdm_service::{router, AppState, ServiceConfig, VectorEcho, VECTOR_HEADER};
use serde_json::{json, Value};
use tower::ServiceExt;

const STEPS: usize = 4;

/// Untrained width-4 model on 3x32x32 images with a fitted pixel_stats encoder.
fn tiny_checkpoint(dir: &Path) -> PathBuf {
    let samples = rcdm::synthdata::sample_dataset(6, 3).unwrap();
    let images = samples.into_iter().map(|s| s.image).collect();
    let cfg = TrainConfig::new(1, 3);
    let data = TrainingSet::prepare(&cfg.conditions, images, 0).unwrap();
    let model = DenoiserConfig {
        base_width: 4,
        depth: 1,
        cond_dim: data.conditions[0].dim(),
        time_embed_dim: 8,
        injection: Injection::AddAfterNorm,
        ..DenoiserConfig::default()
    };
    let mut trainer = Trainer::new(cfg, &model).unwrap();
    let ckpt = trainer.fit(&data, None, |_| {}).unwrap();
    let path = dir.join("tiny.ckpt");
    save_checkpoint(&ckpt, &path).unwrap();
    path
}

fn fixture_matrix(d: usize) -> EmbeddingMatrix {
    let n = 6;
    let values: Vec<f32> = (0..n * d).map(|i| ((i * 7 % 13) as f32 - 6.0) / 4.0).collect();
    let mut labels = LabelMap::new();
    labels.insert("is_red".into(), vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0]);
    EmbeddingMatrix::new(n, d, values, Some(labels), "fixture").unwrap()
}

struct Api {
    app: Router,
    _dir: tempfile::TempDir,
    ckpt: PathBuf,
}

impl Api {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let ckpt = tiny_checkpoint(dir.path());
        let config = ServiceConfig { default_steps: STEPS, ..ServiceConfig::default() };
        Self { app: router(AppState::new(config)), _dir: dir, ckpt }
    }

    async fn call(&self, req: Request<Body>) -> (StatusCode, axum::http::HeaderMap, Vec<u8>) {
        let resp = self.app.clone().oneshot(req).await.unwrap();
        let status = resp.status();
        let headers = resp.headers().clone();
        let body = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
        (status, headers, body)
    }

    async fn get(&self, uri: &str) -> (StatusCode, Value) {
        let (s, _, b) = self.call(Request::get(uri).body(Body::empty()).unwrap()).await;
        (s, serde_json::from_slice(&b).unwrap_or(Value::Null))
    }

    async fn post(&self, uri: &str, body: Value) -> (StatusCode, Value) {
        let (s, _, b) = self.post_raw(uri, body).await;
        (s, serde_json::from_slice(&b).unwrap_or(Value::Null))
    }

    async fn post_raw(&self, uri: &str, body: Value) -> (StatusCode, axum::http::HeaderMap, Vec<u8>) {
        let req = Request::post(uri)
            .header(header::CONTENT_TYPE, "application/json")
            .body(Body::from(body.to_string()))
            .unwrap();
        self.call(req).await
    }

    async fn load(&self) -> Value {
        let (s, v) = self.post("/api/checkpoint", json!({ "path": self.ckpt })).await;
        assert_eq!(s, StatusCode::OK, "{v}");
        v
    }

    async fn upload(&self, m: &EmbeddingMatrix) -> Value {
        let req = Request::post("/api/embeddings").body(Body::from(rcde::to_bytes(m))).unwrap();
        let (s, _, b) = self.call(req).await;
        assert_eq!(s, StatusCode::OK);
        serde_json::from_slice(&b).unwrap()
    }

    async fn reference(&self, body: Value) -> String {
        let (s, v) = self.post("/api/reference", body).await;
        assert_eq!(s, StatusCode::OK, "{v}");
        v["ref_id"].as_str().unwrap().to_string()
    }

    async fn generate(&self, body: Value) -> (Vec<u8>, VectorEcho) {
        let (s, h, b) = self.post_raw("/api/generate", body).await;
        assert_eq!(s, StatusCode::OK, "{}", String::from_utf8_lossy(&b));
        assert_eq!(h[header::CONTENT_TYPE], "image/png");
        let echo = VectorEcho::decode_header(h[VECTOR_HEADER].to_str().unwrap()).unwrap();
        (b, echo)
    }
}

#[tokio::test]
async fn meta_requires_a_checkpoint_then_reports_it() {
    let api = Api::new();
    let (s, v) = api.get("/api/meta").await;
    assert_eq!(s, StatusCode::CONFLICT);
    assert!(v["error"].as_str().unwrap().contains("no checkpoint"));

    api.load().await;
    let (s, v) = api.get("/api/meta").await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["cond_dim"], v["manifest"]["model"]["cond_dim"]);
    assert_eq!(v["cond_dim"], 192);
    assert_eq!(v["samplers"], json!(["ddim", "ddpm"]));
    assert_eq!(v["checkpoint_encoder"], "pixel_stats");

    // Recompute both hashes from the file on disk.
    let bytes = std::fs::read(&api.ckpt).unwrap();
    use sha2::Digest;
    assert_eq!(v["file_sha256"], hex::encode(sha2::Sha256::digest(&bytes)));
    let (manifest, payload) = rcdm::checkpoint::read_manifest(&bytes).unwrap();
    assert_eq!(v["manifest"]["payload_sha256"], json!(manifest.payload_sha256));
    assert_eq!(manifest.payload_sha256, hex::encode(sha2::Sha256::digest(payload)));
}

#[tokio::test]
async fn loading_a_missing_checkpoint_is_a_client_error() {
    let api = Api::new();
    let (s, _) = api.post("/api/checkpoint", json!({ "path": "/nonexistent/x.ckpt" })).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn generation_is_deterministic_and_replayable() {
    let api = Api::new();
    api.load().await;
    let c: Vec<f64> = (0..192).map(|i| (i as f64 * 0.1).sin()).collect();
    let body = json!({ "condition": c, "seed": 7 });
    let (a, echo) = api.generate(body.clone()).await;
    let (b, _) = api.generate(body).await;
    assert_eq!(a, b);
    assert_eq!(echo.values, c);
    assert_eq!((echo.steps, echo.seed), (STEPS, 7));
    let other = api.generate(json!({ "condition": c, "seed": 8 })).await.0;
    assert_ne!(a, other);
    let decoded = rcdm::io::decode_png(&a).unwrap();
    assert_eq!(decoded.shape(), [3, 32, 32]);
}

#[tokio::test]
async fn concurrent_identical_requests_agree() {
    let api = Api::new();
    api.load().await;
    let body = json!({ "condition": vec![0.25; 192], "seed": 3, "sampler": "ddpm" });
    let (r1, r2) = tokio::join!(api.post_raw("/api/generate", body.clone()), api.post_raw("/api/generate", body));
    assert_eq!(r1.0, StatusCode::OK);
    assert_eq!(r1.2, r2.2);
}

#[tokio::test]
async fn op_pipeline_identities_and_replay() {
    let api = Api::new();
    api.load().await;
    let m = fixture_matrix(192);
    let up = api.upload(&m).await;
    let mid = up["matrix_id"].as_str().unwrap();
    let r0 = api.reference(json!({ "matrix_id": mid, "row": 0 })).await;
    let r1 = api.reference(json!({ "matrix_id": mid, "row": 1 })).await;

    let direct = m.row(0).unwrap().values().to_vec();
    let (plain, _) = api.generate(json!({ "condition": direct, "seed": 1 })).await;
    let (empty_ops, _) = api.generate(json!({ "condition": { "ref_id": r0, "ops": [] }, "seed": 1 })).await;
    assert_eq!(plain, empty_ops);

    // alpha weights the reference itself: 1 keeps it, 0 lands on the other one.
    let keep = json!([{ "op": "interpolate", "other_ref": r1, "alpha": 1.0 }]);
    let (interp, _) = api.generate(json!({ "condition": { "ref_id": r0, "ops": keep }, "seed": 1 })).await;
    assert_eq!(interp, plain);
    let to_r1 = json!([{ "op": "interpolate", "other_ref": r1, "alpha": 0.0 }]);
    let (interp, _) = api.generate(json!({ "condition": { "ref_id": r0, "ops": to_r1 }, "seed": 1 })).await;
    let (at_r1, _) = api.generate(json!({ "condition": m.row(1).unwrap().values(), "seed": 1 })).await;
    assert_eq!(interp, at_r1);

    let (s, v) = api.post("/api/directions/pca", json!({ "matrix_id": mid, "K": 2 })).await;
    assert_eq!(s, StatusCode::OK, "{v}");
    let bank = v["bank_id"].as_str().unwrap();
    let ops = json!([
        { "op": "perturb", "lambda": 0.3, "noise_seed": 5 },
        { "op": "pca", "bank_id": bank, "K": 2, "alpha": -25 },
        { "op": "attr", "matrix_id": mid, "attribute": "is_red", "scale": 1, "mode": "diff" },
    ]);
    let (edited, echo) = api.generate(json!({ "condition": { "ref_id": r0, "ops": ops }, "seed": 2 })).await;
    assert!(echo.source.contains("perturb"));
    let (replayed, _) = api.generate(json!({ "condition": echo.values, "seed": 2 })).await;
    assert_eq!(edited, replayed);
}

#[tokio::test]
async fn request_errors_map_to_status_codes() {
    let api = Api::new();
    api.load().await;
    let up = api.upload(&fixture_matrix(192)).await;
    let mid = up["matrix_id"].as_str().unwrap();
    let r0 = api.reference(json!({ "matrix_id": mid, "row": 0 })).await;

    let cases = [
        (json!({ "condition": vec![0.0; 5] }), StatusCode::BAD_REQUEST),
        (json!({ "condition": { "ref_id": "nope", "ops": [] } }), StatusCode::BAD_REQUEST),
        (json!({ "condition": { "ref_id": r0, "ops": [{ "op": "pca", "bank_id": "nope", "K": 1 }] } }), StatusCode::BAD_REQUEST),
        (json!({ "condition": { "ref_id": r0, "ops": [{ "op": "perturb", "lambda": -1.0, "noise_seed": 0 }] } }), StatusCode::UNPROCESSABLE_ENTITY),
        (json!({ "condition": { "ref_id": r0, "ops": [{ "op": "warp", "amount": 2 }] } }), StatusCode::UNPROCESSABLE_ENTITY),
        (json!({ "condition": { "ref_id": r0, "ops": [{ "op": "perturb", "lambda": 0.1 }] } }), StatusCode::UNPROCESSABLE_ENTITY),
        (json!({ "condition": { "ref_id": r0, "ops": [{ "op": "attr", "matrix_id": mid, "attribute": "is_huge" }] } }), StatusCode::UNPROCESSABLE_ENTITY),
    ];
    for (body, expect) in cases {
        let (s, v) = api.post("/api/generate", body.clone()).await;
        assert_eq!(s, expect, "{body} -> {v}");
    }

    let small = api.upload(&fixture_matrix(4)).await;
    let r_small = api.reference(json!({ "matrix_id": small["matrix_id"], "row": 0 })).await;
    let body = json!({ "condition": { "ref_id": r0, "ops": [{ "op": "interpolate", "other_ref": r_small, "alpha": 0.5 }] } });
    assert_eq!(api.post("/api/generate", body).await.0, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn embeddings_round_trip_and_reject_bad_magic() {
    let api = Api::new();
    let m = fixture_matrix(5);
    let up = api.upload(&m).await;
    assert_eq!((up["n"].as_u64(), up["d"].as_u64()), (Some(6), Some(5)));
    assert_eq!(up["attributes"], json!(["is_red"]));
    let id = up["matrix_id"].as_str().unwrap();
    let (s, row) = api.get(&format!("/api/embeddings/{id}/rows/0")).await;
    assert_eq!(s, StatusCode::OK);
    let got: Vec<f32> = serde_json::from_value(row["values"].clone()).unwrap();
    assert_eq!(got, m.row_values(0));
    assert_eq!(row["labels"]["is_red"], 1.0);
    assert_eq!(api.get(&format!("/api/embeddings/{id}/rows/6")).await.0, StatusCode::BAD_REQUEST);

    let mut bytes = rcde::to_bytes(&m);
    bytes[0] = b'X';
    let (s, _, _) = api.call(Request::post("/api/embeddings").body(Body::from(bytes)).unwrap()).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn pca_endpoint_matches_library_fit() {
    let api = Api::new();
    let m = fixture_matrix(5);
    let up = api.upload(&m).await;
    let (s, v) = api.post("/api/directions/pca", json!({ "matrix_id": up["matrix_id"], "K": 3 })).await;
    assert_eq!(s, StatusCode::OK);
    let expect = rcdm::toolkit::fit_pca_directions(&m, 3).unwrap();
    let got: Vec<f64> = serde_json::from_value(v["explained_variances"].clone()).unwrap();
    let want: Vec<f64> = expect.directions.iter().map(|d| d.explained_variance.unwrap()).collect();
    assert_eq!(got, want);
    let (s, bank) = api.get(&format!("/api/directions/{}", v["bank_id"].as_str().unwrap())).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(bank["directions"].as_array().unwrap().len(), 3);
    let (s, _) = api.post("/api/directions/pca", json!({ "matrix_id": up["matrix_id"], "K": 9 })).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
}

#[tokio::test]
async fn image_references_use_the_checkpoint_encoder() {
    let api = Api::new();
    let sample = rcdm::synthdata::sample_dataset(1, 11).unwrap().remove(0);
    let png = rcdm::io::encode_png(&sample.image).unwrap();
    let b64 = base64::engine::general_purpose::STANDARD.encode(&png);
    let (s, _) = api.post("/api/reference", json!({ "image": b64 })).await;
    assert_eq!(s, StatusCode::CONFLICT);

    api.load().await;
    let (s, _) = api.post("/api/reference", json!({ "image": b64, "encoder": "random_projection" })).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let id = api.reference(json!({ "image": b64, "encoder": "pixel_stats" })).await;
    let (_, v) = api.get(&format!("/api/reference/{id}")).await;
    let ckpt = rcdm::load_checkpoint(&api.ckpt).unwrap();
    let decoded = rcdm::io::decode_png(&png).unwrap();
    let expect = ckpt.encoder().unwrap().encode(&decoded).unwrap();
    let got: Vec<f64> = serde_json::from_value(v["values"].clone()).unwrap();
    assert_eq!(got, expect.values());
}

#[tokio::test]
async fn cors_allows_local_origins_only() {
    let api = Api::new();
    let req = |origin: &str| {
        Request::get("/api/meta").header(header::ORIGIN, origin).body(Body::empty()).unwrap()
    };
    let (_, h, _) = api.call(req("http://localhost:5173")).await;
    assert_eq!(h[header::ACCESS_CONTROL_ALLOW_ORIGIN], "http://localhost:5173");
    let (_, h, _) = api.call(req("http://example.com")).await;
    assert!(!h.contains_key(header::ACCESS_CONTROL_ALLOW_ORIGIN));
}

#[tokio::test]
async fn serves_static_ui_files() {
    let ui = tempfile::tempdir().unwrap();
    std::fs::write(ui.path().join("index.html"), "<html></html>").unwrap();
    let app = router(AppState::new(ServiceConfig { ui_dir: Some(ui.path().into()), ..ServiceConfig::default() }));
    let resp = app.clone().oneshot(Request::get("/").body(Body::empty()).unwrap()).await.unwrap();
    assert_eq!(resp.status(), StatusCode::OK);
    assert_eq!(resp.headers()[header::CONTENT_TYPE], "text/html; charset=utf-8");
    let resp = app.oneshot(Request::get("/../secret").body(Body::empty()).unwrap()).await.unwrap();
    assert_eq!(resp.status(), StatusCode::NOT_FOUND);
}
