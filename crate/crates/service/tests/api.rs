use std::path::Path;
use std::sync::Arc;

use axum::body::Body;
use axum::http::{HeaderMap, Request, StatusCode};
use axum::Router;
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use dualarb::checkpoint::save_checkpoint;
use dualarb::dataset::{generate_dataset, read_slice_dims, DatasetSpec};
use dualarb::inference::super_resolve;
use dualarb::model::ModelConfig;
use dualarb::render::{decode_gray_png, gray_png};
use dualarb::trainer::{TrainConfig, TrainState};
use dualarb_service::{router, AppState, Catalog, ModelSnapshot, Roi, RoiRequest, RoiResponse, ServiceConfig};
use tower::ServiceExt;

struct Fixture {
    dir: tempfile::TempDir,
    state: Arc<AppState>,
    app: Router,
}

fn write_model(path: &Path, seed: u64) {
    let mut cfg = TrainConfig::desk();
    cfg.model = ModelConfig::tiny();
    cfg.model.seed = seed;
    save_checkpoint(&TrainState::new(cfg).unwrap(), path).unwrap();
}

fn fixture(with_model: bool) -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let spec = DatasetSpec {
        subjects: 3,
        slices_per_subject: 2,
        dims: (24, 24),
        n_ellipses: 4,
        ..DatasetSpec::default()
    };
    generate_dataset(&dir.path().join("data"), &spec).unwrap();
    let catalog = Catalog::load(&dir.path().join("data"), 2.0).unwrap();
    let state = Arc::new(AppState::new(catalog, ServiceConfig::default()));
    if with_model {
        let ck = dir.path().join("model.ckpt");
        write_model(&ck, 1);
        state.install(ModelSnapshot::load(&ck).unwrap());
    }
    let app = router(state.clone());
    Fixture { dir, state, app }
}

async fn call(app: &Router, req: Request<Body>) -> (StatusCode, HeaderMap, Vec<u8>) {
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let headers = resp.headers().clone();
    let body = axum::body::to_bytes(resp.into_body(), usize::MAX).await.unwrap();
    (status, headers, body.to_vec())
}

fn get(uri: &str) -> Request<Body> {
    Request::get(uri).body(Body::empty()).unwrap()
}

fn post_json(uri: &str, body: &impl serde::Serialize) -> Request<Body> {
    Request::post(uri)
        .header("content-type", "application/json")
        .body(Body::from(serde_json::to_vec(body).unwrap()))
        .unwrap()
}

fn request(roi: Roi, scale: f64) -> RoiRequest {
    RoiRequest {
        volume_id: "sub000".into(),
        slice_id: "00".into(),
        roi,
        scale,
        ref_mode: dualarb::geometry::RefMode::Hr,
        compare: false,
    }
}

const FULL: Roi = Roi {
    x0: 0,
    y0: 0,
    w: 12,
    h: 12,
};

#[tokio::test]
async fn health_and_catalog() {
    let f = fixture(true);
    let (st, _, body) = call(&f.app, get("/api/health")).await;
    assert_eq!(st, StatusCode::OK);
    let v: serde_json::Value = serde_json::from_slice(&body).unwrap();
    assert_eq!(v["model_loaded"], true);
    assert_eq!(v["slices"], 6);

    let (st, _, body) = call(&f.app, get("/api/volumes")).await;
    assert_eq!(st, StatusCode::OK);
    let v: serde_json::Value = serde_json::from_slice(&body).unwrap();
    let vols = v["volumes"].as_array().unwrap();
    assert_eq!(vols.len(), 3);
    let data = f.dir.path().join("data");
    for vol in vols {
        for s in vol["slices"].as_array().unwrap() {
            let rel = format!(
                "slices/{}_{}_tar",
                vol["id"].as_str().unwrap(),
                s["id"].as_str().unwrap()
            );
            let dims = read_slice_dims(&data.join(rel)).unwrap();
            assert_eq!(s["dims"], serde_json::json!([dims.0, dims.1]));
            assert_eq!(s["lr_dims"], serde_json::json!([12, 12]));
        }
    }
}

#[tokio::test]
async fn empty_data_dir_gives_empty_catalog() {
    let dir = tempfile::tempdir().unwrap();
    let state = Arc::new(AppState::new(
        Catalog::load(dir.path(), 2.0).unwrap(),
        ServiceConfig::default(),
    ));
    let (st, _, body) = call(&router(state), get("/api/volumes")).await;
    assert_eq!(st, StatusCode::OK);
    let v: serde_json::Value = serde_json::from_slice(&body).unwrap();
    assert_eq!(v["volumes"], serde_json::json!([]));
}

#[tokio::test]
async fn slice_views_render_at_their_resolution() {
    let f = fixture(false);
    for (view, side) in [("hr", 24), ("ref", 24), ("lr", 12)] {
        let (st, h, body) = call(&f.app, get(&format!("/api/volumes/sub001/slices/01?view={view}"))).await;
        assert_eq!(st, StatusCode::OK, "{view}");
        assert_eq!(h["content-type"], "image/png");
        assert_eq!(decode_gray_png(&body).unwrap().dims(), (side, side));
    }
    assert_eq!(
        call(&f.app, get("/api/volumes/nope/slices/00")).await.0,
        StatusCode::NOT_FOUND
    );
    assert_eq!(
        call(&f.app, get("/api/volumes/sub000/slices/77")).await.0,
        StatusCode::NOT_FOUND
    );
    assert_eq!(
        call(&f.app, get("/api/volumes/sub000/slices/00?view=xray")).await.0,
        StatusCode::UNPROCESSABLE_ENTITY
    );
}

#[tokio::test]
async fn no_model_is_unavailable() {
    let f = fixture(false);
    let (st, _, _) = call(&f.app, post_json("/api/reconstruct", &request(FULL, 2.0))).await;
    assert_eq!(st, StatusCode::SERVICE_UNAVAILABLE);
}

#[tokio::test]
async fn bad_requests_are_rejected() {
    let f = fixture(true);
    let cases = [
        (
            request(
                Roi {
                    x0: 4,
                    y0: 0,
                    w: 9,
                    h: 4,
                },
                2.0,
            ),
            StatusCode::UNPROCESSABLE_ENTITY,
        ),
        (
            request(
                Roi {
                    x0: 0,
                    y0: 0,
                    w: 0,
                    h: 4,
                },
                2.0,
            ),
            StatusCode::UNPROCESSABLE_ENTITY,
        ),
        (request(FULL, 8.5), StatusCode::UNPROCESSABLE_ENTITY),
        (request(FULL, 0.5), StatusCode::UNPROCESSABLE_ENTITY),
        (request(FULL, f64::NAN), StatusCode::UNPROCESSABLE_ENTITY),
        (
            RoiRequest {
                slice_id: "99".into(),
                ..request(FULL, 2.0)
            },
            StatusCode::NOT_FOUND,
        ),
    ];
    for (req, want) in cases {
        let (st, _, body) = call(&f.app, post_json("/api/reconstruct", &req)).await;
        assert_eq!(st, want, "{req:?}");
        let v: serde_json::Value = serde_json::from_slice(&body).unwrap();
        assert!(v["error"].is_string());
    }
    let junk = Request::post("/api/reconstruct")
        .header("content-type", "application/json")
        .body(Body::from("{\"volume_id\": 3}"))
        .unwrap();
    assert_eq!(call(&f.app, junk).await.0, StatusCode::UNPROCESSABLE_ENTITY);
}

#[tokio::test]
async fn full_roi_matches_whole_slice_inference() {
    let f = fixture(true);
    let entry = f.state.catalog.get("sub000", "00").unwrap();
    let snap = f.state.snapshot().unwrap();
    for scale in [1.0, 2.0, 2.5, 3.7] {
        let want = super_resolve(&snap.net, &entry.lr, Some(&entry.reference), scale).unwrap();
        let rec = f.state.reconstruct(&request(FULL, scale)).unwrap();
        assert_eq!(rec.sr, want, "scale {scale}");
        let (st, _, body) = call(&f.app, post_json("/api/reconstruct", &request(FULL, scale))).await;
        assert_eq!(st, StatusCode::OK);
        let resp: RoiResponse = serde_json::from_slice(&body).unwrap();
        assert_eq!((resp.h, resp.w), want.dims());
        assert_eq!(B64.decode(resp.png).unwrap(), gray_png(&want, 0.0, 1.0).unwrap());
    }
}

#[tokio::test]
async fn disjoint_rois_tile_the_full_output() {
    let f = fixture(true);
    let full = f.state.reconstruct(&request(FULL, 2.5)).unwrap().sr;
    assert_eq!(full.dims(), (30, 30));
    let left = f
        .state
        .reconstruct(&request(
            Roi {
                x0: 0,
                y0: 2,
                w: 6,
                h: 8,
            },
            2.5,
        ))
        .unwrap()
        .sr;
    let right = f
        .state
        .reconstruct(&request(
            Roi {
                x0: 6,
                y0: 2,
                w: 6,
                h: 8,
            },
            2.5,
        ))
        .unwrap()
        .sr;
    // rows round(2 * 2.5) = 5 .. round(10 * 2.5) = 25, columns split at 15
    assert_eq!(left, full.crop(5, 0, 20, 15).unwrap());
    assert_eq!(right, full.crop(5, 15, 20, 15).unwrap());
}

#[tokio::test]
async fn repeated_request_is_served_from_cache() {
    let f = fixture(true);
    let req = request(
        Roi {
            x0: 2,
            y0: 3,
            w: 5,
            h: 4,
        },
        3.0,
    );
    let (_, h1, b1) = call(&f.app, post_json("/api/reconstruct", &req)).await;
    let (_, h2, b2) = call(&f.app, post_json("/api/reconstruct", &req)).await;
    assert_eq!(h1["x-feature-cache"], "miss");
    assert_eq!(h2["x-feature-cache"], "hit");
    assert_eq!(b1, b2);
    // nearby slider value quantizes to the same entry
    let near = RoiRequest {
        scale: 3.0 + 0.002,
        ..req.clone()
    };
    let (_, h3, b3) = call(&f.app, post_json("/api/reconstruct", &near)).await;
    assert_eq!(h3["x-feature-cache"], "hit");
    assert_eq!(b3, b1);
    let stats = f.state.cache.stats();
    assert_eq!((stats.hits, stats.misses, stats.entries), (2, 1, 1));
}

#[tokio::test]
async fn compare_attaches_metrics_only_with_ground_truth() {
    let f = fixture(true);
    let mut req = request(FULL, 2.0);
    req.compare = true;
    let (_, _, body) = call(&f.app, post_json("/api/reconstruct", &req)).await;
    let r: RoiResponse = serde_json::from_slice(&body).unwrap();
    assert!(r.psnr.unwrap().is_finite());
    assert!(r.ssim.is_some());
    assert!(r.baseline_psnr.is_some());
    let em = decode_gray_png(&B64.decode(r.error_png.unwrap()).unwrap()).unwrap();
    assert_eq!(em.dims(), (24, 24));

    req.scale = 3.0;
    let (_, _, body) = call(&f.app, post_json("/api/reconstruct", &req)).await;
    let r: RoiResponse = serde_json::from_slice(&body).unwrap();
    assert!(r.psnr.is_none() && r.error_png.is_none());
    assert!(r.baseline_png.is_some());
}

#[tokio::test]
async fn reload_swaps_the_snapshot() {
    let f = fixture(true);
    let before = f.state.snapshot().unwrap();
    let req = request(FULL, 2.0);
    let old = f.state.reconstruct(&req).unwrap().sr;
    write_model(&f.dir.path().join("model.ckpt"), 2);
    let (st, _, body) = call(&f.app, Request::post("/api/reload").body(Body::empty()).unwrap()).await;
    assert_eq!(st, StatusCode::OK);
    let v: serde_json::Value = serde_json::from_slice(&body).unwrap();
    let after = f.state.snapshot().unwrap();
    assert_eq!(v["checkpoint"], after.hash.as_str());
    assert_ne!(before.hash, after.hash);
    // the old snapshot stays usable by whoever still holds it
    let entry = f.state.catalog.get("sub000", "00").unwrap();
    assert_eq!(
        super_resolve(&before.net, &entry.lr, Some(&entry.reference), 2.0).unwrap(),
        old
    );
    let rec = f.state.reconstruct(&req).unwrap();
    assert!(!rec.cache_hit);
    assert_ne!(rec.sr, old);
}
