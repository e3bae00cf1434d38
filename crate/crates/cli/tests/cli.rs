mod common;

use common::{facecap, facecap_ok};
use facecap_core::face_model::{make_toy_model, FaceParams, ToyModelConfig};
use facecap_core::renderer::load_image;

fn read_json<T: serde::de::DeserializeOwned>(path: &std::path::Path) -> T {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn seeded_subcommands_are_reproducible() {
    let bad = common::determinism_failures();
    assert!(bad.is_empty(), "{bad:#?}");
}

#[test]
fn self_target_evaluation_leaves_the_regularizer() {
    let dir = tempfile::tempdir().unwrap();
    for seed in ["1", "2", "3"] {
        facecap_ok(dir.path(), &["sample-params", "--seed", seed, "--out", "p.json"]);
        facecap_ok(dir.path(), &["evaluate", "--params", "p.json", "--target-params", "p.json", "--out", "e.json"]);
        let p: FaceParams = read_json(&dir.path().join("p.json"));
        let report: serde_json::Value = read_json(&dir.path().join("e.json"));
        let reg = 1e-4 * p.psi.iter().map(|x| x * x).sum::<f64>();
        let total = report["total"].as_f64().unwrap();
        assert!((total - reg).abs() < 1e-9, "seed {seed}: {total} vs {reg}");
        assert_eq!(report["terms"]["pho"].as_f64().unwrap(), 0.0);
    }
}

#[test]
fn overlay_marks_projected_landmarks() {
    let dir = tempfile::tempdir().unwrap();
    facecap_ok(dir.path(), &["sample-params", "--seed", "9", "--out", "p.json"]);
    facecap_ok(dir.path(), &["render", "--params", "p.json", "--width", "80", "--height", "64", "--out-dir", "r"]);
    let p: FaceParams = read_json(&dir.path().join("p.json"));
    let model = make_toy_model(&ToyModelConfig::default()).unwrap();
    let mesh = model.evaluate_mesh(&p).unwrap();
    let (w, h) = (80.0, 64.0);
    let [s, tx, ty] = p.camera;
    let expected: Vec<[f64; 2]> = model
        .surface_landmarks(&mesh)
        .iter()
        .map(|v| [(s * v[0] + tx + 1.0) * w / 2.0, (1.0 - (s * v[1] + ty)) * h / 2.0])
        .collect();

    let mut rdr = csv::Reader::from_path(dir.path().join("r/landmarks.csv")).unwrap();
    let rows: Vec<(usize, f64, f64)> = rdr.deserialize().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), expected.len());
    let overlay = load_image(&dir.path().join("r/overlay.png")).unwrap();
    for ((i, x, y), e) in rows.iter().zip(&expected) {
        assert!((x - e[0]).abs() <= 0.5 && (y - e[1]).abs() <= 0.5, "landmark {i}: ({x}, {y}) vs {e:?}");
        let px = overlay.pixel(*x as usize, *y as usize);
        assert_eq!(px, [1.0, 0.0, 1.0], "landmark {i} not marked");
    }
}

#[test]
fn invalid_configuration_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.toml"), "lambda_psi = -1.0\n").unwrap();
    std::fs::write(dir.path().join("typo.toml"), "lamda_emo = 1.0\n").unwrap();
    let cases: &[&[&str]] = &[
        &["demo", "--config", "bad.toml", "--out-dir", "out"],
        &["demo", "--config", "typo.toml", "--out-dir", "out"],
        &["demo", "--lambda-psi", "-1", "--out-dir", "out"],
        &["demo", "--width", "0", "--out-dir", "out"],
        &["train-encoder", "--lr", "-1", "--out-dir", "out"],
        &["train-encoder", "--lambda-pho", "nan", "--out-dir", "out"],
        &["train-mlp", "--data", "missing.csv", "--out-dir", "out"],
        &["gradcheck", "--instances", "0", "--out", "out"],
    ];
    for args in cases {
        let out = facecap(dir.path(), args);
        assert!(!out.status.success(), "{args:?} succeeded");
        assert!(!dir.path().join("out").exists(), "{args:?} wrote output");
    }
}

#[test]
fn zero_tolerance_gradcheck_fails() {
    let dir = tempfile::tempdir().unwrap();
    let out = facecap(dir.path(), &["gradcheck", "--instances", "1", "--tolerance", "0", "--out", "r.json"]);
    assert!(!out.status.success());
    let report: serde_json::Value = read_json(&dir.path().join("r.json"));
    assert_eq!(report["passed"], false);
    assert_eq!(report["sites"].as_array().unwrap().len(), facecap_core::gradcheck::SITES.len());
}

#[test]
fn demo_bundle_is_complete() {
    let dir = tempfile::tempdir().unwrap();
    facecap_ok(dir.path(), &["demo", "--seed", "1", "--out-dir", "d"]);
    for f in ["source.png", "target.png", "retargeted.png", "trace.csv", "summary.json"] {
        assert!(std::fs::metadata(dir.path().join("d").join(f)).unwrap().len() > 0, "{f}");
    }
    let s: serde_json::Value = read_json(&dir.path().join("d/summary.json"));
    assert!(s["final_objective"].as_f64().unwrap() < s["initial_objective"].as_f64().unwrap());
}

#[test]
fn metrics_reads_column_pairs() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("p.csv"), "valence,valence_pred\n0.5,0.4\n-0.5,-0.1\n0.2,-0.3\n").unwrap();
    let out = facecap_ok(dir.path(), &["metrics", "--input", "p.csv"]);
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let rmse = ((0.01 + 0.16 + 0.25) / 3.0f64).sqrt();
    assert!((report["valence"]["rmse"].as_f64().unwrap() - rmse).abs() < 1e-15);
    assert!(report["arousal"].is_null());
    std::fs::write(dir.path().join("q.csv"), "valence\n0.5\n").unwrap();
    assert!(!facecap(dir.path(), &["metrics", "--input", "q.csv"]).status.success());
}
