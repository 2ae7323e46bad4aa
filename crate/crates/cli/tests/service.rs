use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use base64::Engine;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use forge_cli::service::{
    router, AppState, LabelResponse, SessionCreated, LABEL_DIR, PROMPTS_FILE,
};
use forge_core::input_assembly::ModelInput;
use forge_core::io::{
    decode_image_png, encode_image_png, load_manifest, load_mask, read_prompt_rows, rle_decode,
    save_image, Rle,
};
use forge_core::pipeline::PipelineConfig;
use forge_core::prompt_encoding::EnergyMap;
use forge_core::saliency_backend::{
    Backend, BackendKind, ReferenceSegmenterConfig, RemoteConfig, SaliencyBackend,
};
use forge_core::types::{BinaryMask, FloatMap, RasterImage};

const W: usize = 48;
const H: usize = 32;
/// Centers of the 3x3 bright targets.
const TARGETS: [(usize, usize); 2] = [(12, 10), (34, 22)];

fn scene() -> RasterImage {
    let mut data = vec![0.1; W * H];
    for (cx, cy) in TARGETS {
        for y in cy - 1..=cy + 1 {
            for x in cx - 1..=cx + 1 {
                data[y * W + x] = 0.9;
            }
        }
    }
    RasterImage::new(W, H, data).unwrap()
}

fn reference() -> Arc<dyn SaliencyBackend> {
    Arc::new(
        Backend::new(BackendKind::ReferenceLocalContrast(
            ReferenceSegmenterConfig::default(),
        ))
        .unwrap(),
    )
}

struct Fixture {
    dir: tempfile::TempDir,
    app: Router,
}

fn fixture_with(backend: Arc<dyn SaliencyBackend>, ui: Option<&Path>) -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    save_image(&scene(), dir.path().join("scene.png")).unwrap();
    std::fs::write(dir.path().join("prompts.csv"), "image_id,x,y,kind\n").unwrap();
    std::fs::write(
        dir.path().join("manifest.json"),
        r#"{"version": 1, "images": [{"image_id": "scene", "image_path": "scene.png",
            "prompt_source": {"kind": "file", "path": "prompts.csv"}}]}"#,
    )
    .unwrap();
    let manifest = load_manifest(dir.path().join("manifest.json")).unwrap();
    let out = dir.path().join("out");
    let state = Arc::new(AppState::new(
        backend,
        PipelineConfig::default(),
        out,
        Some(manifest),
    ));
    let app = router(state, ui);
    Fixture { dir, app }
}

fn fixture() -> Fixture {
    fixture_with(reference(), None)
}

async fn call(
    app: &Router,
    method: Method,
    uri: &str,
    body: Option<Value>,
) -> (StatusCode, Vec<u8>) {
    let mut req = Request::builder().method(method).uri(uri);
    let body = match body {
        Some(v) => {
            req = req.header("content-type", "application/json");
            Body::from(serde_json::to_vec(&v).unwrap())
        }
        None => Body::empty(),
    };
    let resp = app.clone().oneshot(req.body(body).unwrap()).await.unwrap();
    let status = resp.status();
    let bytes = resp
        .into_body()
        .collect()
        .await
        .unwrap()
        .to_bytes()
        .to_vec();
    (status, bytes)
}

async fn call_json(
    app: &Router,
    method: Method,
    uri: &str,
    body: Option<Value>,
) -> (StatusCode, Value) {
    let (status, bytes) = call(app, method, uri, body).await;
    let v = if bytes.is_empty() {
        Value::Null
    } else {
        serde_json::from_slice(&bytes)
            .unwrap_or_else(|_| Value::String(String::from_utf8_lossy(&bytes).into()))
    };
    (status, v)
}

async fn open(app: &Router) -> SessionCreated {
    let (status, v) = call_json(
        app,
        Method::POST,
        "/v1/sessions",
        Some(json!({"image_id": "scene"})),
    )
    .await;
    assert_eq!(status, StatusCode::CREATED, "{v}");
    serde_json::from_value(v).unwrap()
}

async fn add(app: &Router, sid: &str, x: i64, y: i64) -> (StatusCode, Value) {
    call_json(
        app,
        Method::POST,
        &format!("/v1/sessions/{sid}/prompts"),
        Some(json!({"x": x, "y": y})),
    )
    .await
}

fn decode_label(v: &Value) -> (u64, BinaryMask, LabelResponse) {
    let r: LabelResponse = serde_json::from_value(v.clone()).unwrap();
    (r.revision, rle_decode(&r.label).unwrap(), r)
}

fn target_pixels(i: usize) -> Vec<(usize, usize)> {
    let (cx, cy) = TARGETS[i];
    (cy - 1..=cy + 1)
        .flat_map(|y| (cx - 1..=cx + 1).map(move |x| (x, y)))
        .collect()
}

#[tokio::test]
async fn healthz() {
    let f = fixture();
    let (status, _) = call(&f.app, Method::GET, "/v1/healthz", None).await;
    assert_eq!(status, StatusCode::OK);
}

#[tokio::test]
async fn lists_manifest_images() {
    let f = fixture();
    let (status, v) = call_json(&f.app, Method::GET, "/v1/images", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(v, json!({"images": ["scene"]}));
}

#[tokio::test]
async fn create_from_manifest_and_upload() {
    let f = fixture();
    let s = open(&f.app).await;
    assert_eq!((s.width, s.height, s.revision), (W, H, 0));
    assert_eq!(s.image_id, "scene");

    let b64 = base64::engine::general_purpose::STANDARD.encode(encode_image_png(&scene()));
    let (status, v) = call_json(
        &f.app,
        Method::POST,
        "/v1/sessions",
        Some(json!({"png_base64": b64, "image_id": "mine"})),
    )
    .await;
    assert_eq!(status, StatusCode::CREATED);
    let up: SessionCreated = serde_json::from_value(v).unwrap();
    assert_eq!((up.width, up.height), (W, H));
    assert_eq!(up.image_id, "mine");
    assert_ne!(up.session_id, s.session_id);

    let (status, bytes) = call(
        &f.app,
        Method::GET,
        &format!("/v1/sessions/{}/image.png", up.session_id),
        None,
    )
    .await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(
        decode_image_png(&bytes).unwrap(),
        decode_image_png(&encode_image_png(&scene())).unwrap()
    );
}

#[tokio::test]
async fn create_errors() {
    let f = fixture();
    let (status, _) = call_json(
        &f.app,
        Method::POST,
        "/v1/sessions",
        Some(json!({"image_id": "nope"})),
    )
    .await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, _) = call_json(&f.app, Method::POST, "/v1/sessions", Some(json!({}))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    let (status, _) = call_json(
        &f.app,
        Method::POST,
        "/v1/sessions",
        Some(json!({"png_base64": "!!"})),
    )
    .await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let b64 = base64::engine::general_purpose::STANDARD.encode(b"not a png");
    let (status, _) = call_json(
        &f.app,
        Method::POST,
        "/v1/sessions",
        Some(json!({"png_base64": b64})),
    )
    .await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    let b64 = base64::engine::general_purpose::STANDARD.encode(encode_image_png(&scene()));
    let (status, _) = call_json(
        &f.app,
        Method::POST,
        "/v1/sessions",
        Some(json!({"png_base64": b64, "image_id": "../escape"})),
    )
    .await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn prompt_inside_target_keeps_its_cluster() {
    let f = fixture();
    let s = open(&f.app).await;
    let (status, v) = add(&f.app, &s.session_id, 12, 10).await;
    assert_eq!(status, StatusCode::OK, "{v}");
    let (revision, label, r) = decode_label(&v);
    assert_eq!(revision, 1);
    for (x, y) in target_pixels(0) {
        assert!(label.get(x, y));
    }
    for (x, y) in target_pixels(1) {
        assert!(!label.get(x, y));
    }
    assert_eq!(label.count_ones(), 9);
    let kept: Vec<_> = r.clusters.iter().filter(|c| c.kept).collect();
    assert_eq!(kept.len(), 1);
    assert!(kept[0].bbox.contains(12, 10));
    assert_eq!(kept[0].centroid, (12.0, 10.0));
    assert_eq!(kept[0].prompt, Some(0));
    assert_eq!(r.prompts.len(), 1);

    let (status, bytes) = call(
        &f.app,
        Method::GET,
        &format!("/v1/sessions/{}/label.png", s.session_id),
        None,
    )
    .await;
    assert_eq!(status, StatusCode::OK);
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("l.png");
    std::fs::write(&p, bytes).unwrap();
    assert_eq!(load_mask(&p).unwrap(), label);
}

#[tokio::test]
async fn out_of_bounds_prompt_leaves_state_alone() {
    let f = fixture();
    let s = open(&f.app).await;
    add(&f.app, &s.session_id, 12, 10).await;
    for (x, y) in [(W as i64, 0), (0, H as i64), (-1, 3), (100, 100)] {
        let (status, v) = add(&f.app, &s.session_id, x, y).await;
        assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
        assert_eq!((v["x"].as_i64(), v["y"].as_i64()), (Some(x), Some(y)));
        assert_eq!(v["width"], json!(W));
        assert_eq!(v["height"], json!(H));
    }
    let (_, v) = call_json(
        &f.app,
        Method::GET,
        &format!("/v1/sessions/{}", s.session_id),
        None,
    )
    .await;
    assert_eq!(v["revision"], json!(1));
    assert_eq!(v["prompts"].as_array().unwrap().len(), 1);
}

#[tokio::test]
async fn duplicate_prompt_rejected() {
    let f = fixture();
    let s = open(&f.app).await;
    add(&f.app, &s.session_id, 12, 10).await;
    let (status, _) = add(&f.app, &s.session_id, 12, 10).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
}

#[tokio::test]
async fn undo_restores_empty_label() {
    let f = fixture();
    let s = open(&f.app).await;
    add(&f.app, &s.session_id, 12, 10).await;
    let uri = format!("/v1/sessions/{}/prompts/last", s.session_id);
    let (status, v) = call_json(&f.app, Method::DELETE, &uri, None).await;
    assert_eq!(status, StatusCode::OK);
    let (revision, label, r) = decode_label(&v);
    assert_eq!(revision, 2);
    assert!(label.is_empty());
    assert!(r.prompts.is_empty());
    let (status, _) = call_json(&f.app, Method::DELETE, &uri, None).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn undo_second_prompt_returns_first_label() {
    let f = fixture();
    let s = open(&f.app).await;
    let (_, first) = add(&f.app, &s.session_id, 12, 10).await;
    let (_, both) = add(&f.app, &s.session_id, 34, 22).await;
    assert_eq!(decode_label(&both).1.count_ones(), 18);
    let (_, undone) = call_json(
        &f.app,
        Method::DELETE,
        &format!("/v1/sessions/{}/prompts/last", s.session_id),
        None,
    )
    .await;
    assert_eq!(decode_label(&undone).1, decode_label(&first).1);
    assert_eq!(decode_label(&undone).0, 3);
}

#[tokio::test]
async fn stale_revision_conflicts() {
    let f = fixture();
    let s = open(&f.app).await;
    add(&f.app, &s.session_id, 12, 10).await;
    let (status, v) = call_json(
        &f.app,
        Method::POST,
        &format!("/v1/sessions/{}/prompts", s.session_id),
        Some(json!({"x": 34, "y": 22, "revision": 0})),
    )
    .await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(v["revision"], json!(1));
    let (status, v) = call_json(
        &f.app,
        Method::POST,
        &format!("/v1/sessions/{}/prompts", s.session_id),
        Some(json!({"x": 34, "y": 22, "revision": 1})),
    )
    .await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(v["revision"], json!(2));
}

/// Delays inference so two requests overlap inside the pipeline.
struct Slow(Arc<dyn SaliencyBackend>);

impl SaliencyBackend for Slow {
    fn infer(&self, input: &ModelInput, energy: &EnergyMap) -> forge_core::Result<FloatMap> {
        std::thread::sleep(Duration::from_millis(300));
        self.0.infer(input, energy)
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_mutations_one_wins() {
    let f = fixture_with(Arc::new(Slow(reference())), None);
    let s = open(&f.app).await;
    let (a, b) = tokio::join!(
        add(&f.app, &s.session_id, 12, 10),
        add(&f.app, &s.session_id, 34, 22)
    );
    let mut statuses = [a.0, b.0];
    statuses.sort();
    assert_eq!(statuses, [StatusCode::OK, StatusCode::CONFLICT]);
    let loser = if a.0 == StatusCode::CONFLICT {
        &a.1
    } else {
        &b.1
    };
    assert_eq!(loser["revision"], json!(1));
    let (_, v) = call_json(
        &f.app,
        Method::GET,
        &format!("/v1/sessions/{}", s.session_id),
        None,
    )
    .await;
    assert_eq!(v["revision"], json!(1));
    assert_eq!(v["prompts"].as_array().unwrap().len(), 1);
}

#[tokio::test]
async fn sessions_are_isolated() {
    let f = fixture();
    let a = open(&f.app).await;
    let b = open(&f.app).await;
    add(&f.app, &a.session_id, 12, 10).await;
    add(&f.app, &a.session_id, 34, 22).await;
    let (_, v) = call_json(
        &f.app,
        Method::GET,
        &format!("/v1/sessions/{}", b.session_id),
        None,
    )
    .await;
    assert_eq!(v["revision"], json!(0));
    let rle: Rle = serde_json::from_value(v["label"].clone()).unwrap();
    assert!(rle_decode(&rle).unwrap().is_empty());
}

#[tokio::test]
async fn identical_prompts_identical_labels() {
    let f = fixture();
    let a = open(&f.app).await;
    let b = open(&f.app).await;
    for (x, y) in [(11, 9), (35, 23)] {
        add(&f.app, &a.session_id, x, y).await;
    }
    let mut last = Value::Null;
    for (x, y) in [(11, 9), (35, 23)] {
        last = add(&f.app, &b.session_id, x, y).await.1;
    }
    let (_, la) = call(
        &f.app,
        Method::GET,
        &format!("/v1/sessions/{}/label.png", a.session_id),
        None,
    )
    .await;
    let (_, lb) = call(
        &f.app,
        Method::GET,
        &format!("/v1/sessions/{}/label.png", b.session_id),
        None,
    )
    .await;
    assert_eq!(la, lb);
    assert_eq!(decode_label(&last).1.count_ones(), 18);
}

#[tokio::test]
async fn unknown_session_is_404() {
    let f = fixture();
    for (method, uri, body) in [
        (Method::GET, "/v1/sessions/nope", None),
        (
            Method::POST,
            "/v1/sessions/nope/prompts",
            Some(json!({"x": 1, "y": 1})),
        ),
        (Method::DELETE, "/v1/sessions/nope/prompts/last", None),
        (Method::GET, "/v1/sessions/nope/label.png", None),
        (Method::GET, "/v1/sessions/nope/image.png", None),
        (Method::POST, "/v1/sessions/nope/finalize", None),
    ] {
        let (status, _) = call(&f.app, method, uri, body).await;
        assert_eq!(status, StatusCode::NOT_FOUND, "{uri}");
    }
}

#[tokio::test]
async fn finalize_persists_label_and_prompts() {
    let f = fixture();
    let s = open(&f.app).await;
    add(&f.app, &s.session_id, 12, 10).await;
    let (_, v) = add(&f.app, &s.session_id, 34, 22).await;
    let (_, label, _) = decode_label(&v);
    let uri = format!("/v1/sessions/{}/finalize", s.session_id);
    let (status, done) = call_json(&f.app, Method::POST, &uri, None).await;
    assert_eq!(status, StatusCode::OK, "{done}");
    assert_eq!(done["revision"], json!(2));
    assert_eq!(done["prompts"], json!(2));
    let out = f.dir.path().join("out");
    assert_eq!(
        load_mask(out.join(LABEL_DIR).join("scene.png")).unwrap(),
        label
    );
    let rows = read_prompt_rows(out.join(PROMPTS_FILE)).unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!((rows[1].x, rows[1].y), (34, 22));

    // Refinement followed by a second finalize replaces the earlier rows.
    call_json(
        &f.app,
        Method::DELETE,
        &format!("/v1/sessions/{}/prompts/last", s.session_id),
        None,
    )
    .await;
    call_json(&f.app, Method::POST, &uri, None).await;
    let rows = read_prompt_rows(out.join(PROMPTS_FILE)).unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(
        load_mask(out.join(LABEL_DIR).join("scene.png"))
            .unwrap()
            .count_ones(),
        9
    );
}

#[tokio::test]
async fn empty_session_finalizes() {
    let f = fixture();
    let s = open(&f.app).await;
    let (status, _) = call_json(
        &f.app,
        Method::POST,
        &format!("/v1/sessions/{}/finalize", s.session_id),
        None,
    )
    .await;
    assert_eq!(status, StatusCode::OK);
    let out = f.dir.path().join("out");
    assert!(load_mask(out.join(LABEL_DIR).join("scene.png"))
        .unwrap()
        .is_empty());
    assert!(read_prompt_rows(out.join(PROMPTS_FILE)).unwrap().is_empty());
}

#[tokio::test]
async fn backend_transport_failure_is_502() {
    let mut cfg = RemoteConfig::new("http://127.0.0.1:1");
    cfg.retries = 0;
    cfg.timeout_ms = 2_000;
    let f = fixture_with(
        Arc::new(Backend::new(BackendKind::Remote(cfg)).unwrap()),
        None,
    );
    let s = open(&f.app).await;
    let (status, v) = add(&f.app, &s.session_id, 12, 10).await;
    assert_eq!(status, StatusCode::BAD_GATEWAY);
    assert!(v["detail"].as_str().unwrap().contains("127.0.0.1:1"), "{v}");
    let (_, v) = call_json(
        &f.app,
        Method::GET,
        &format!("/v1/sessions/{}", s.session_id),
        None,
    )
    .await;
    assert_eq!(v["revision"], json!(0));
}

#[tokio::test]
async fn serves_static_ui() {
    let ui = tempfile::tempdir().unwrap();
    std::fs::write(ui.path().join("index.html"), "<p>forge</p>").unwrap();
    let f = fixture_with(reference(), Some(ui.path()));
    let (status, body) = call(&f.app, Method::GET, "/", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body, b"<p>forge</p>");
    let (status, _) = call(&f.app, Method::GET, "/v1/healthz", None).await;
    assert_eq!(status, StatusCode::OK);
}
