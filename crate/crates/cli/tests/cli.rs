use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn ugnn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ugnn"))
        .args(args)
        .env("UGNN_THREADS", "2")
        .output()
        .expect("spawn ugnn")
}

fn ok(args: &[&str]) -> String {
    let out = ugnn(args);
    assert!(
        out.status.success(),
        "ugnn {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const BLOBS: &str = "blobs2d:count=200,sep=4,seed=3";

/// Train a small 2D model once per test that needs it.
fn trained(dir: &Path) -> PathBuf {
    let cfg = dir.join("run.cfg");
    std::fs::write(
        &cfg,
        "model.dims=2,2,2\nmodel.seed=1\ntrain.epochs=20\ntrain.batch_size=32\ntrain.lr=0.01\n",
    )
    .unwrap();
    let ckpt = dir.join("m.ugnn");
    ok(&["train", "--config", s(&cfg), "--data", BLOBS, "--out", s(&ckpt), "--seed", "5"]);
    ckpt
}

#[test]
fn train_writes_checkpoint_manifest_and_history() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = trained(dir.path());
    let manifest = std::fs::read_to_string(dir.path().join("m.ugnn.manifest")).unwrap();
    for key in ["train.epochs=20", "train.seed=5", "choice.crop=", "status=complete", "invariants.pass=true"] {
        assert!(manifest.contains(key), "{key} missing from\n{manifest}");
    }
    let history = std::fs::read_to_string(dir.path().join("m.ugnn.history.csv")).unwrap();
    assert!(history.starts_with("epoch,lr,loss,accuracy,mean_margin\n"));
    assert_eq!(history.lines().count(), 21);

    let eval = ok(&["eval", "--ckpt", s(&ckpt), "--data", BLOBS]);
    let acc: f64 = eval
        .split_whitespace()
        .find_map(|kv| kv.strip_prefix("accuracy="))
        .unwrap()
        .parse()
        .unwrap();
    assert!(acc >= 0.95, "{eval}");
}

#[test]
fn training_is_reproducible_from_the_seed() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let (ca, cb) = (trained(a.path()), trained(b.path()));
    let ha = std::fs::read_to_string(a.path().join("m.ugnn.history.csv")).unwrap();
    let hb = std::fs::read_to_string(b.path().join("m.ugnn.history.csv")).unwrap();
    assert_eq!(ha, hb);
    let cert = |c: &Path| ok(&["certify", "--ckpt", s(c), "--data", BLOBS, "--eps", "0.5"]);
    assert_eq!(cert(&ca), cert(&cb));
}

#[test]
fn certify_at_zero_is_correct_with_nonzero_margin() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = trained(dir.path());
    let csv = ok(&["certify", "--ckpt", s(&ckpt), "--data", BLOBS, "--eps", "0,0.5,1"]);
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "sample_id,label,pred,runner_up,margin,radius,robust@0,robust@0.5,robust@1"
    );
    let mut rows = 0;
    for line in lines {
        let f: Vec<&str> = line.split(',').collect();
        let (label, pred, margin): (usize, usize, f64) = (f[1].parse().unwrap(), f[2].parse().unwrap(), f[4].parse().unwrap());
        assert_eq!(f[4], f[5]);
        let want = label == pred && margin > 0.0;
        assert_eq!(f[6] == "1", want, "{line}");
        // Robustness is monotone in ε.
        assert!(f[6] >= f[7] && f[7] >= f[8], "{line}");
        rows += 1;
    }
    assert_eq!(rows, 200);
}

#[test]
fn curve_is_monotone_and_starts_at_accuracy() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = trained(dir.path());
    let out = dir.path().join("curve.csv");
    ok(&["curve", "--ckpt", s(&ckpt), "--data", BLOBS, "--eps-range", "0:2:9", "--out", s(&out)]);
    let csv = std::fs::read_to_string(&out).unwrap();
    let vals: Vec<(f64, f64)> = csv
        .lines()
        .skip(1)
        .map(|l| {
            let (a, b) = l.split_once(',').unwrap();
            (a.parse().unwrap(), b.parse().unwrap())
        })
        .collect();
    assert_eq!(vals.len(), 9);
    assert!(vals.windows(2).all(|w| w[1].1 <= w[0].1));
    let eval = ok(&["eval", "--ckpt", s(&ckpt), "--data", BLOBS]);
    let acc: f64 = eval
        .split_whitespace()
        .find_map(|kv| kv.strip_prefix("accuracy="))
        .unwrap()
        .parse()
        .unwrap();
    assert!((vals[0].1 - acc).abs() < 1e-9, "{} vs {acc}", vals[0].1);
}

#[test]
fn oracle_bounds_the_margin() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = trained(dir.path());
    for method in ["penalty", "grid2d"] {
        let csv = ok(&["oracle", "--ckpt", s(&ckpt), "--data", BLOBS, "--method", method, "--limit", "20"]);
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "sample_id,margin,map,ratio,converged");
        for line in lines {
            let f: Vec<&str> = line.split(',').collect();
            if f[4] == "1" {
                let ratio: f64 = f[3].parse().unwrap();
                assert!(ratio <= 1.0 + 1e-3, "{method}: {line}");
            }
        }
    }
}

#[test]
fn ring_contour_zero_level_is_the_unit_circle() {
    let csv = ok(&["contour", "--ring", "--grid", "81", "--range", "-2,2"]);
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "x,y,f_l_minus_f_s,k_hat");
    let step = 4.0 / 80.0;
    let mut near = 0;
    for line in lines {
        let f: Vec<f64> = line.split(',').map(|v| v.parse().unwrap()).collect();
        let r = f[0].hypot(f[1]);
        assert!((f[2] - (r - 1.0).abs()).abs() < 1e-12, "{line}");
        assert_eq!(f[3] as usize, usize::from(r < 1.0), "{line}");
        if f[2] < step / 2.0 {
            near += 1;
            assert!((r - 1.0).abs() < step, "{line}");
        }
    }
    assert!(near > 0);
}

#[test]
fn ring_oracle_finds_unit_distance() {
    let csv = ok(&["oracle", "--ring", "--data", "ring2d:count=5,seed=2,gap=0.2", "--method", "grid2d"]);
    for line in csv.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        assert_eq!(f[4], "1", "{line}");
        let ratio: f64 = f[3].parse().unwrap();
        assert!((ratio - 1.0).abs() < 1e-3, "{line}");
    }
}

#[test]
fn verify_fresh_models_exit_zero() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("mlp.cfg");
    std::fs::write(&cfg, "model.dims=2,2\nmodel.classes=2\n").unwrap();
    let ckpt = dir.path().join("mlp.ugnn");
    ok(&["init", "--config", s(&cfg), "--data", "moons2d:count=4", "--out", s(&ckpt)]);
    let report = ok(&["verify", "--ckpt", s(&ckpt), "--samples", "32", "--seed", "1"]);
    assert!(report.contains("verify: PASS"), "{report}");

    let cfg = dir.path().join("conv.cfg");
    std::fs::write(&cfg, "model.arch=conv\nmodel.classes=10\nmodel.seed=7\ntrain.precision=f32\n").unwrap();
    let data = dir.path().join("tiny.bin");
    let mut bytes = Vec::new();
    for i in 0..2u8 {
        bytes.push(i);
        bytes.extend((0..3072).map(|k| (k % 251) as u8));
    }
    std::fs::write(&data, bytes).unwrap();
    let spec = format!("cifar10:path={}", s(&data));
    let ckpt = dir.path().join("conv.ugnn");
    ok(&["init", "--config", s(&cfg), "--data", &spec, "--out", s(&ckpt)]);
    let report = ok(&["verify", "--ckpt", s(&ckpt), "--precision", "f32", "--samples", "8"]);
    assert!(report.contains("verify: PASS"), "{report}");
    assert!(report.contains("spectral"), "{report}");
}

#[test]
fn verify_fails_on_a_tampered_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("mlp.cfg");
    std::fs::write(&cfg, "model.dims=2,2\n").unwrap();
    let ckpt = dir.path().join("mlp.ugnn");
    ok(&["init", "--config", s(&cfg), "--data", "moons2d:count=4", "--out", s(&ckpt)]);
    // Switch the activation to ReLU, which is not gradient norm preserving.
    let bytes = std::fs::read(&ckpt).unwrap();
    let text = String::from_utf8_lossy(&bytes).into_owned();
    assert!(text.contains("activation=maxmin"));
    let patched = {
        let needle = b"activation=maxmin";
        let pos = bytes.windows(needle.len()).position(|w| w == needle).unwrap();
        let mut b = bytes.clone();
        b.splice(pos..pos + needle.len(), b"activation=relu".iter().copied());
        let meta_len = u64::from_le_bytes(b[8..16].try_into().unwrap()) - 2;
        b[8..16].copy_from_slice(&meta_len.to_le_bytes());
        b
    };
    std::fs::write(&ckpt, patched).unwrap();
    let out = ugnn(&["verify", "--ckpt", s(&ckpt), "--samples", "64", "--seed", "3"]);
    assert_eq!(out.status.code(), Some(1), "{}", String::from_utf8_lossy(&out.stdout));
    assert!(String::from_utf8_lossy(&out.stdout).contains("verify: FAIL"));
}

#[test]
fn errors_name_the_offending_field() {
    let out = ugnn(&["eval", "--ckpt", "x", "--data", BLOBS, "--bogus"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--bogus"));

    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("mlp.cfg");
    std::fs::write(&cfg, "model.dims=3,2\n").unwrap();
    let ckpt = dir.path().join("mlp.ugnn");
    let out = ugnn(&["init", "--config", s(&cfg), "--data", BLOBS, "--out", s(&ckpt)]);
    assert_ne!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stderr).contains("model.dims"));

    let bad = ugnn(&["contour", "--ckpt", "/nonexistent/file", "--grid", "3"]);
    assert!(String::from_utf8_lossy(&bad.stderr).contains("--ckpt"));

    let trained = trained(dir.path());
    let img = dir.path().join("img.bin");
    let mut rec = vec![1u8];
    rec.extend(std::iter::repeat_n(0u8, 3072));
    std::fs::write(&img, rec).unwrap();
    let spec = format!("cifar10:path={}", s(&img));
    let out = ugnn(&["eval", "--ckpt", s(&trained), "--data", &spec]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("--data samples have shape [3, 32, 32]"), "{err}");
    let out = ugnn(&["eval", "--ckpt", s(&trained), "--data", "cifar10:path=/nonexistent"]);
    assert!(String::from_utf8_lossy(&out.stderr).contains("--data"));
}
