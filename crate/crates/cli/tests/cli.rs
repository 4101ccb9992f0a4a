use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpStream;
use std::path::Path;
use std::process::{Command, Stdio};

use dualarb::curriculum::CurriculumSchedule;
use dualarb::dataset::{read_slice, DatasetManifest, Split};
use dualarb::model::ModelConfig;
use dualarb::render::{decode_gray_png, gray_png};
use dualarb::trainer::{LogRecord, TrainConfig};
use dualarb_service::{AppState, Catalog, ModelSnapshot, Roi, RoiRequest, ServiceConfig};

fn dualarb(args: &[&str]) -> String {
    let out = Command::new(env!("CARGO_BIN_EXE_dualarb"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "dualarb {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn tiny_config(path: &Path) {
    let mut cfg = TrainConfig::desk();
    cfg.model = ModelConfig::tiny();
    cfg.schedule = CurriculumSchedule::new(1, 1, 1).unwrap();
    cfg.batch_size = 2;
    cfg.lr_patch = 8;
    cfg.steps_per_epoch = Some(2);
    cfg.valid_scales = vec![2.0];
    cfg.valid_pairs = Some(1);
    std::fs::write(path, serde_json::to_string(&cfg).unwrap()).unwrap();
}

fn phantoms(dir: &Path) -> std::path::PathBuf {
    let data = dir.join("data");
    dualarb(&[
        "phantom-gen",
        "--seed",
        "3",
        "--subjects",
        "4",
        "--slices",
        "1",
        "--size",
        "24x24",
        "--out",
        p(&data),
    ]);
    data
}

#[test]
fn phantom_gen_and_degrade_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let data = phantoms(dir.path());
    let total: usize = Split::ALL
        .iter()
        .map(|&s| DatasetManifest::load(&data, s).unwrap().entries.len())
        .sum();
    assert_eq!(total, 4);
    let lr = dir.path().join("lr");
    dualarb(&["degrade", "--in", p(&data), "--scale", "3", "--out", p(&lr)]);
    let m = DatasetManifest::load(&lr, Split::Train).unwrap();
    assert!(m.entries.iter().all(|e| e.dims == [8, 8]));
    let (tar, reference) = m.load_pair(0).unwrap();
    assert_eq!((tar.dims(), reference.dims()), ((8, 8), (8, 8)));
    let mask = decode_gray_png(&std::fs::read(lr.join("mask.png")).unwrap()).unwrap();
    assert_eq!(mask.dims(), (24, 24));
    assert_eq!(mask.data.iter().filter(|&&v| v == 1.0).count(), 64);
}

#[test]
fn train_resume_eval_and_infer() {
    let dir = tempfile::tempdir().unwrap();
    let data = phantoms(dir.path());
    let cfg = dir.path().join("cfg.json");
    tiny_config(&cfg);
    let run = dir.path().join("run");
    dualarb(&[
        "train",
        "--config",
        p(&cfg),
        "--data",
        p(&data),
        "--out",
        p(&run),
        "--epochs",
        "1",
    ]);
    // a changed config is refused, the same config resumes where it stopped
    let status = Command::new(env!("CARGO_BIN_EXE_dualarb"))
        .args([
            "train",
            "--config",
            p(&cfg),
            "--data",
            p(&data),
            "--out",
            p(&run),
            "--strategy",
            "random",
        ])
        .env("RUST_LOG", "off")
        .output()
        .unwrap()
        .status;
    assert!(!status.success());
    dualarb(&["train", "--config", p(&cfg), "--data", p(&data), "--out", p(&run)]);
    let log = std::fs::read_to_string(run.join("train_log.jsonl")).unwrap();
    let steps: Vec<u64> = log
        .lines()
        .map(|l| serde_json::from_str::<LogRecord>(l).unwrap().step)
        .collect();
    assert_eq!(steps, vec![1, 2, 3, 4, 5, 6]);
    let ablated = dir.path().join("ablated");
    dualarb(&[
        "train",
        "--config",
        p(&cfg),
        "--data",
        p(&data),
        "--out",
        p(&ablated),
        "--epochs",
        "1",
        "--no-k-loss",
        "--ablate",
        "w/o-coord",
    ]);
    let log2 = std::fs::read_to_string(ablated.join("train_log.jsonl")).unwrap();
    for l in log2.lines() {
        let r: LogRecord = serde_json::from_str(l).unwrap();
        assert_eq!(r.l_full, r.l_rec);
    }
    for key in [
        "epoch", "step", "stage", "lr", "l_rec", "l_k", "l_full", "s", "ref_mode",
    ] {
        assert!(log.lines().next().unwrap().contains(&format!("\"{key}\"")), "{key}");
    }

    let ckpt = run.join("last.ckpt");
    let json = dir.path().join("report.json");
    let md = dir.path().join("report.md");
    let maps = dir.path().join("maps");
    let out = format!("{},{}", p(&json), p(&md));
    dualarb(&[
        "eval",
        "--ckpt",
        p(&ckpt),
        "--data",
        p(&data),
        "--scales",
        "2,3",
        "--ref",
        "lr",
        "--out",
        &out,
        "--error-maps",
        p(&maps),
    ]);
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&json).unwrap()).unwrap();
    assert_eq!(report["rows"].as_array().unwrap().len(), 2);
    assert_eq!(report["ref_mode"], "lr");
    assert!(std::fs::read_to_string(&md).unwrap().contains("bicubic"));
    assert!(std::fs::read_dir(&maps).unwrap().count() >= 2);

    // infer on an LR slice equals the service's full-slice reconstruction
    let test = DatasetManifest::load(&data, Split::Test).unwrap();
    let e = &test.entries[0];
    let lr = dir.path().join("lr.mrs");
    dualarb(&[
        "degrade",
        "--in",
        p(&data.join(&e.target_path).with_extension("mrs")),
        "--scale",
        "2",
        "--out",
        p(&lr),
    ]);
    let sr_mrs = dir.path().join("sr.mrs");
    let sr_png = dir.path().join("sr.png");
    let reference = data.join(&e.reference_path).with_extension("mrs");
    dualarb(&[
        "infer",
        "--ckpt",
        p(&ckpt),
        "--in",
        p(&lr),
        "--ref",
        p(&reference),
        "--scale",
        "2.5",
        "--out",
        &format!("{},{}", p(&sr_mrs), p(&sr_png)),
    ]);
    let sr = read_slice(&sr_mrs).unwrap().pixels;
    assert_eq!(sr.dims(), (30, 30));

    let state = AppState::new(Catalog::load(&data, 2.0).unwrap(), ServiceConfig::default());
    state.install(ModelSnapshot::load(&ckpt).unwrap());
    let rec = state
        .reconstruct(&RoiRequest {
            volume_id: e.subject_id.clone(),
            slice_id: e.slice_id.clone(),
            roi: Roi {
                x0: 0,
                y0: 0,
                w: 12,
                h: 12,
            },
            scale: 2.5,
            ref_mode: dualarb::geometry::RefMode::Hr,
            compare: false,
        })
        .unwrap();
    assert_eq!(rec.sr, sr);
    assert_eq!(std::fs::read(&sr_png).unwrap(), gray_png(&sr, 0.0, 1.0).unwrap());
}

#[test]
fn serve_answers_health() {
    let dir = tempfile::tempdir().unwrap();
    let data = phantoms(dir.path());
    let cfg = dir.path().join("cfg.json");
    tiny_config(&cfg);
    let run = dir.path().join("run");
    dualarb(&[
        "train",
        "--config",
        p(&cfg),
        "--data",
        p(&data),
        "--out",
        p(&run),
        "--epochs",
        "1",
    ]);
    let mut child = Command::new(env!("CARGO_BIN_EXE_dualarb"))
        .args([
            "serve",
            "--ckpt",
            p(&run.join("last.ckpt")),
            "--data",
            p(&data),
            "--port",
            "0",
        ])
        .env("RUST_LOG", "info")
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    let mut lines = BufReader::new(child.stderr.take().unwrap()).lines();
    let addr = loop {
        let line = lines.next().expect("server exited").unwrap();
        if let Some(a) = line.split("listening on ").nth(1) {
            break a.trim().to_string();
        }
    };
    let mut s = TcpStream::connect(&addr).unwrap();
    write!(
        s,
        "GET /api/health HTTP/1.1\r\nHost: {addr}\r\nConnection: close\r\n\r\n"
    )
    .unwrap();
    let mut resp = String::new();
    s.read_to_string(&mut resp).unwrap();
    child.kill().unwrap();
    let _ = child.wait();
    assert!(resp.starts_with("HTTP/1.1 200"), "{resp}");
    assert!(resp.contains("\"model_loaded\":true"), "{resp}");
}
