#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub fn facecap(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_facecap"))
        .args(args)
        .current_dir(dir)
        .env_remove("FACECAP_THREADS")
        .output()
        .expect("spawn facecap")
}

pub fn facecap_ok(dir: &Path, args: &[&str]) -> Output {
    let out = facecap(dir, args);
    assert!(
        out.status.success(),
        "facecap {} failed:\n{}",
        args.join(" "),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

/// Every file under `root`, keyed by relative path.
pub fn snapshot(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for entry in std::fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(root, &path, out);
            } else {
                out.insert(path.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&path).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

/// Each seeded subcommand with the files it writes. Later steps read the
/// outputs of earlier ones, all relative to the working directory.
pub const PIPELINE: &[(&str, &[&str], &[&str])] = &[
    ("make-model", &["make-model", "--seed", "5", "--out", "model.fcm"], &["model.fcm"]),
    ("sample-params", &["sample-params", "--seed", "11", "--out", "src.json"], &["src.json"]),
    (
        "sample-params",
        &["sample-params", "--seed", "12", "--psi-scale", "1.5", "--out", "tgt.json"],
        &["tgt.json"],
    ),
    (
        "render",
        &["render", "--model", "model.fcm", "--params", "src.json", "--out-dir", "render"],
        &["render/render.png", "render/mask.pgm", "render/overlay.png", "render/mesh.obj", "render/landmarks.csv"],
    ),
    (
        "evaluate",
        &["evaluate", "--params", "src.json", "--target-params", "tgt.json", "--out", "eval.json"],
        &["eval.json"],
    ),
    (
        "retarget",
        &[
            "retarget", "--seed", "3", "--source-params", "src.json", "--target-params", "tgt.json", "--init-noise",
            "0.05", "--max-iters", "40", "--out-mesh", "ret.obj", "--out-render", "ret.png", "--trace-csv",
            "ret.csv", "--out-params", "ret.json",
        ],
        &["ret.obj", "ret.png", "ret.csv", "ret.json"],
    ),
    (
        "demo",
        &["demo", "--seed", "1", "--out-dir", "demo"],
        &[
            "demo/source.png", "demo/target.png", "demo/retargeted.png", "demo/source.obj", "demo/target.obj",
            "demo/retargeted.obj", "demo/trace.csv", "demo/summary.json",
        ],
    ),
    (
        "train-encoder",
        &["train-encoder", "--seed", "2", "--n-samples", "24", "--epochs", "2", "--lr", "3e-3", "--out-dir", "enc"],
        &["enc/encoder.json", "enc/trace.csv", "enc/params.csv"],
    ),
    (
        "train-mlp",
        &["train-mlp", "--seed", "4", "--data", "enc/params.csv", "--epochs", "5", "--hidden", "32", "--out-dir", "mlp"],
        &["mlp/out.mlp", "mlp/trace.csv", "mlp/predictions.csv"],
    ),
    ("metrics", &["metrics", "--input", "mlp/predictions.csv", "--out", "metrics.json"], &["metrics.json"]),
    (
        "embed",
        &["embed", "--images", "images.csv", "--manifest", "index.csv", "--vectors", "index.eix"],
        &["index.csv", "index.eix"],
    ),
    (
        "retrieve",
        &[
            "retrieve", "--manifest", "index.csv", "--vectors", "index.eix", "--query-id", "render", "--k", "3",
            "--max-per-group", "2", "--out", "hits.csv",
        ],
        &["hits.csv"],
    ),
    ("gradcheck", &["gradcheck", "--seed", "7", "--instances", "2", "--out", "gradcheck.json"], &["gradcheck.json"]),
];

const IMAGES_CSV: &str = "id,group,path\nrender,a,render/render.png\nsource,b,demo/source.png\n\
target,b,demo/target.png\nretargeted,c,demo/retargeted.png\nret,c,ret.png\n";

/// Runs the pipeline in `dir`; returns the subcommands that failed.
pub fn run_pipeline(dir: &Path) -> Vec<String> {
    std::fs::write(dir.join("images.csv"), IMAGES_CSV).unwrap();
    let mut failed = Vec::new();
    for (name, args, files) in PIPELINE {
        let out = facecap(dir, args);
        if !out.status.success() || files.iter().any(|f| !dir.join(f).is_file()) {
            failed.push(format!("{name}: {}", String::from_utf8_lossy(&out.stderr).trim()));
        }
    }
    failed
}

/// Subcommands whose outputs differ between two runs in fresh directories,
/// or that failed.
pub fn determinism_failures() -> Vec<String> {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let mut bad = run_pipeline(a.path());
    bad.extend(run_pipeline(b.path()));
    if !bad.is_empty() {
        return bad;
    }
    let (sa, sb) = (snapshot(a.path()), snapshot(b.path()));
    for (name, _, files) in PIPELINE {
        for f in *files {
            if sa.get(Path::new(f)) != sb.get(Path::new(f)) {
                bad.push(format!("{name}: {f} differs"));
            }
        }
    }
    if sa.keys().ne(sb.keys()) {
        bad.push("runs wrote different file sets".into());
    }
    bad
}
