use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use http_body_util::BodyExt;
use layerforge_cli::service::{router, GenerateResponse, BODY_LIMIT};
use layerforge_core::canvas::{compose_collage, LayeredCanvas};
use layerforge_core::manifest::{decode_png, manifest_value, serialize_manifest};
use layerforge_core::model::Model;
use layerforge_core::sampler::full_lock_example;
use layerforge_core::synth::{gen_scene, SceneConfig};
use layerforge_core::train::tiny_model_config;
use serde_json::{json, Value};
use tower::ServiceExt;

fn app() -> Router {
    let mut model = Model::init(tiny_model_config(), 3).unwrap();
    model.perturb(0.05, 4);
    router(model, 7, 2)
}

fn canvas(seed: u64) -> LayeredCanvas {
    full_lock_example(&gen_scene(seed, &SceneConfig::default()), seed).canvas
}

async fn call(app: &Router, method: &str, uri: &str, body: Vec<u8>) -> (StatusCode, Value) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(Body::from(body))
        .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let value: Value = serde_json::from_slice(&bytes).unwrap_or_else(|e| panic!("non-JSON response ({e}): {bytes:?}"));
    // A response carries either a payload or an error, never both.
    let is_error = value.get("error").is_some();
    assert_eq!(is_error, !status.is_success(), "{status}: {value}");
    if is_error {
        let keys: Vec<&String> = value.as_object().unwrap().keys().collect();
        assert!(keys.iter().all(|k| *k == "error" || *k == "violations"), "{value}");
    }
    (status, value)
}

fn generate_body(canvas: &LayeredCanvas, steps: usize, seed: u64) -> Vec<u8> {
    serde_json::to_vec(&json!({ "canvas": manifest_value(canvas), "steps": steps, "seed": seed })).unwrap()
}

#[tokio::test]
async fn health_reports_model() {
    let (status, v) = call(&app(), "GET", "/health", vec![]).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(v["status"], "ok");
    assert_eq!(v["model"]["d_model"], 16);
    assert_eq!(v["model"]["step"], 7);
}

#[tokio::test]
async fn validate_returns_canonical_manifest() {
    let c = canvas(1);
    let bytes = serialize_manifest(&c);
    let (status, v) = call(&app(), "POST", "/canvas/validate", bytes.clone()).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(v["violations"], json!([]));
    assert_eq!(serde_json::to_vec(&v["manifest"]).unwrap(), bytes);
}

#[tokio::test]
async fn duplicate_z_order_lists_both_layers() {
    let mut c = canvas(2);
    c.layers[1].z_order = c.layers[0].z_order;
    let (status, v) = call(&app(), "POST", "/canvas/validate", serialize_manifest(&c)).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let layers = &v["violations"][0]["layers"];
    assert_eq!(v["violations"][0]["kind"], "duplicate_z_order");
    assert!(layers.as_array().unwrap().contains(&json!(c.layers[0].id)));
    assert!(layers.as_array().unwrap().contains(&json!(c.layers[1].id)));
}

#[tokio::test]
async fn malformed_manifests_are_client_errors() {
    let app = app();
    let (status, v) = call(&app, "POST", "/canvas/validate", b"{not json".to_vec()).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert!(v["error"].as_str().unwrap().contains("malformed"));

    let mut m = manifest_value(&canvas(3));
    m["layers"][0].as_object_mut().unwrap().remove("locked");
    let (status, v) = call(&app, "POST", "/canvas/validate", serde_json::to_vec(&m).unwrap()).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert!(v["error"].as_str().unwrap().contains("background"), "{v}");
}

#[tokio::test]
async fn oversized_payload_is_413() {
    let body = vec![b' '; BODY_LIMIT + 1];
    let (status, v) = call(&app(), "POST", "/canvas/validate", body).await;
    assert_eq!(status, StatusCode::PAYLOAD_TOO_LARGE);
    assert!(v["error"].is_string());
}

#[tokio::test]
async fn unknown_route_and_method_are_json() {
    let app = app();
    assert_eq!(call(&app, "GET", "/nope", vec![]).await.0, StatusCode::NOT_FOUND);
    assert_eq!(call(&app, "GET", "/generate", vec![]).await.0, StatusCode::METHOD_NOT_ALLOWED);
}

#[tokio::test]
async fn collage_matches_compositor() {
    let c = canvas(4);
    let (status, v) = call(&app(), "POST", "/canvas/collage", serialize_manifest(&c)).await;
    assert_eq!(status, StatusCode::OK);
    let png = B64.decode(v["png"].as_str().unwrap()).unwrap();
    let got = image::DynamicImage::ImageRgba8(decode_png(&png).unwrap()).to_rgb8();
    assert_eq!(got, compose_collage(&c).unwrap());
}

/// Cells whose centre pixel has alpha ≥ 128, counted directly from pixels.
fn expected_tokens(canvas: &LayeredCanvas, patch: u32) -> usize {
    canvas
        .layers
        .iter()
        .map(|l| {
            let (w, h) = (canvas.width / patch, canvas.height / patch);
            (0..h)
                .flat_map(|y| (0..w).map(move |x| (x, y)))
                .filter(|&(x, y)| l.rgba.get_pixel(x * patch + patch / 2, y * patch + patch / 2).0[3] >= 128)
                .count()
        })
        .sum()
}

#[tokio::test]
async fn generate_is_deterministic_and_counts_tokens() {
    let app = app();
    let c = canvas(5);
    let (s1, a) = call(&app, "POST", "/generate", generate_body(&c, 3, 11)).await;
    let (s2, b) = call(&app, "POST", "/generate", generate_body(&c, 3, 11)).await;
    assert_eq!((s1, s2), (StatusCode::OK, StatusCode::OK));
    let a: GenerateResponse = serde_json::from_value(a).unwrap();
    let b: GenerateResponse = serde_json::from_value(b).unwrap();
    assert_eq!(a.png, b.png);
    assert_eq!(a.condition_tokens, a.layers.iter().map(|l| l.tokens).sum::<usize>());
    assert_eq!(a.condition_tokens, expected_tokens(&c, 4));
    assert!(a.layers.iter().all(|l| l.locked));

    let (_, other) = call(&app, "POST", "/generate", generate_body(&c, 3, 12)).await;
    assert_ne!(other["png"], json!(a.png));
}

#[tokio::test]
async fn concurrent_generations_agree() {
    let app = app();
    let c = canvas(6);
    let handles: Vec<_> = (0..4)
        .map(|_| {
            let (app, body) = (app.clone(), generate_body(&c, 2, 1));
            tokio::spawn(async move { call(&app, "POST", "/generate", body).await })
        })
        .collect();
    let mut pngs = Vec::new();
    for h in handles {
        let (status, v) = h.await.unwrap();
        assert_eq!(status, StatusCode::OK);
        pngs.push(v["png"].clone());
    }
    assert!(pngs.windows(2).all(|w| w[0] == w[1]));
}

#[tokio::test]
async fn generate_rejects_bad_requests() {
    let app = app();
    let c = canvas(7);
    assert_eq!(call(&app, "POST", "/generate", generate_body(&c, 0, 0)).await.0, StatusCode::BAD_REQUEST);

    let mut bad_prompt = c.clone();
    bad_prompt.prompt.background_hue = "chartreuse".into();
    let (status, v) = call(&app, "POST", "/generate", generate_body(&bad_prompt, 2, 0)).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert!(v["error"].as_str().unwrap().contains("chartreuse"));

    let mut odd = c.clone();
    odd.width = 30;
    let (status, _) = call(&app, "POST", "/generate", generate_body(&odd, 2, 0)).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);

    let mut dup = c;
    dup.layers[1].z_order = dup.layers[0].z_order;
    let (status, v) = call(&app, "POST", "/generate", generate_body(&dup, 2, 0)).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(v["violations"][0]["kind"], "duplicate_z_order");

    let (status, _) = call(&app, "POST", "/generate", br#"{"steps": 2}"#.to_vec()).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
}
