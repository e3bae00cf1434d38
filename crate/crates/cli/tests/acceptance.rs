//! Acceptance checks, one PASS/FAIL line each. Exits nonzero if any fails.

mod common;

use std::time::{Duration, Instant};

use facecap_core::emotion_feature::{recognition_loss, AffectLabel, EmotionPrediction, FeatureExtractor, N_EXPRESSIONS};
use facecap_core::face_model::{make_toy_model, FaceModel, FaceParams, ToyModelConfig};
use facecap_core::fitter::{retarget_expression, RetargetProblem, FRAMING_SCALE};
use facecap_core::gradcheck::{run_gradcheck, GradcheckConfig};
use facecap_core::losses::{relative_keypoint_loss, total_loss, LossOptions, LossTarget, LossWeights, PairRole};
use facecap_core::metrics::{ccc, pcc, rmse, sagr};
use facecap_core::param_recognizer::{train_mlp, Mlp, MlpConfig, TrainConfig, TrainSample};
use facecap_core::renderer::{self, Camera, Image, RasterOptions};
use facecap_core::retrieval::{EmbeddingIndex, Entry};
use facecap_core::rng::{substream, Rng};
use facecap_core::Exec;
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};

type Outcome = Result<String, String>;

fn toy() -> FaceModel {
    make_toy_model(&ToyModelConfig::default()).unwrap()
}

fn scene(model: &FaceModel, seed: u64, stream: &str) -> FaceParams {
    let mut rng = substream(seed, stream);
    let mut p = model.zero_params();
    p.beta.iter_mut().for_each(|x| *x = 0.3 * rng.random_range(-1.0..1.0));
    p.alpha.iter_mut().for_each(|x| *x = 0.3 * rng.random_range(-1.0..1.0));
    p.lighting[3..].iter_mut().for_each(|x| *x = 0.2 * rng.random_range(-1.0..1.0));
    p.psi.iter_mut().for_each(|x| *x = rng.random_range(-1.0..1.0));
    p.camera = [FRAMING_SCALE, 0.0, 0.0];
    p
}

fn observe(model: &FaceModel, p: &FaceParams) -> (Image, Vec<[f64; 2]>) {
    let mesh = model.evaluate_mesh(p).unwrap();
    let albedo = model.evaluate_albedo(&p.alpha).unwrap();
    let cam = Camera::new(p.camera, 64, 64).unwrap();
    let opts = RasterOptions { skin_triangles: model.skin_triangles.clone(), exec: Exec::Sequential };
    let r = renderer::rasterize(&mesh, &cam, &albedo.colors, &p.lighting, &opts).unwrap();
    (r.linear_image(), renderer::project(&cam, &model.surface_landmarks(&mesh)))
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let report = run_gradcheck(&GradcheckConfig::default()).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let instances: usize = report.sites.iter().map(|s| s.instances).sum();
    let failed: Vec<_> = report.sites.iter().filter(|s| !s.passed).map(|s| s.site.to_string()).collect();
    let summary = format!("{} sites, {instances} instances, {:.1}s", report.sites.len(), elapsed.as_secs_f64());
    if !failed.is_empty() {
        return Err(format!("{summary}; failing sites {failed:?}"));
    }
    if instances < 100 || elapsed >= Duration::from_secs(120) {
        return Err(summary);
    }
    Ok(summary)
}

// straight-line reference formulas

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn oracle_rmse(y: &[f64], p: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..y.len() {
        s += (y[i] - p[i]) * (y[i] - p[i]);
    }
    (s / y.len() as f64).sqrt()
}

fn oracle_sagr(y: &[f64], p: &[f64]) -> f64 {
    let mut hits = 0.0;
    for i in 0..y.len() {
        if y[i].signum() == p[i].signum() && (y[i] == 0.0) == (p[i] == 0.0) {
            hits += 1.0;
        }
    }
    hits / y.len() as f64
}

/// (population variance of y, of p, covariance)
fn oracle_moments(y: &[f64], p: &[f64]) -> (f64, f64, f64) {
    let (my, mp) = (mean(y), mean(p));
    let n = y.len() as f64;
    let vy = y.iter().map(|a| (a - my).powi(2)).sum::<f64>() / n;
    let vp = p.iter().map(|b| (b - mp).powi(2)).sum::<f64>() / n;
    let c = y.iter().zip(p).map(|(a, b)| (a - my) * (b - mp)).sum::<f64>() / n;
    (vy, vp, c)
}

fn oracle_pcc(y: &[f64], p: &[f64]) -> f64 {
    let (vy, vp, c) = oracle_moments(y, p);
    c / (vy * vp).sqrt()
}

fn oracle_ccc(y: &[f64], p: &[f64]) -> f64 {
    let (vy, vp, c) = oracle_moments(y, p);
    2.0 * c / (vy + vp + (mean(y) - mean(p)).powi(2))
}

fn oracle_recognition(preds: &[EmotionPrediction], labels: &[AffectLabel], mix: [f64; 3]) -> f64 {
    let n = preds.len() as f64;
    let mut ce = 0.0;
    for (p, l) in preds.iter().zip(labels) {
        let z: f64 = p.logits.iter().map(|x| x.exp()).sum();
        ce -= (p.logits[l.class].exp() / z).ln();
    }
    ce /= n;
    let pv: Vec<f64> = preds.iter().map(|p| p.valence).collect();
    let pa: Vec<f64> = preds.iter().map(|p| p.arousal).collect();
    let yv: Vec<f64> = labels.iter().map(|l| l.valence).collect();
    let ya: Vec<f64> = labels.iter().map(|l| l.arousal).collect();
    let mse = oracle_rmse(&yv, &pv).powi(2) + oracle_rmse(&ya, &pa).powi(2);
    let pcc_term = 1.0 - (oracle_pcc(&yv, &pv) + oracle_pcc(&ya, &pa)) / 2.0;
    let ccc_term = 1.0 - (oracle_ccc(&yv, &pv) + oracle_ccc(&ya, &pa)) / 2.0;
    let s = mix[0] + mix[1] + mix[2];
    ce + (mix[0] * mse + mix[1] * pcc_term + mix[2] * ccc_term) / s
}

fn random_signal(rng: &mut Rng, n: usize) -> Vec<f64> {
    // occasional exact zeros exercise the sign convention
    (0..n).map(|_| if rng.random_range(0..10) == 0 { 0.0 } else { rng.random_range(-1.0..1.0) }).collect()
}

fn formula_oracles() -> Outcome {
    let mut rng = substream(2, "acceptance-formulas");
    let tol = 1e-12;
    let mut worst: f64 = 0.0;
    for case in 0..1000 {
        let n = rng.random_range(2..64);
        let y = random_signal(&mut rng, n);
        let p = random_signal(&mut rng, n);
        let checks = [
            ("rmse", rmse(&y, &p).unwrap(), oracle_rmse(&y, &p)),
            ("sagr", sagr(&y, &p).unwrap(), oracle_sagr(&y, &p)),
            ("pcc", pcc(&y, &p).unwrap(), oracle_pcc(&y, &p)),
            ("ccc", ccc(&y, &p).unwrap(), oracle_ccc(&y, &p)),
        ];
        let preds: Vec<EmotionPrediction> = (0..n)
            .map(|i| EmotionPrediction {
                valence: p[i],
                arousal: rng.random_range(-1.0..1.0),
                logits: (0..N_EXPRESSIONS).map(|_| rng.random_range(-3.0..3.0)).collect(),
            })
            .collect();
        let labels: Vec<AffectLabel> = (0..n)
            .map(|i| AffectLabel { valence: y[i], arousal: rng.random_range(-1.0..1.0), class: rng.random_range(0..N_EXPRESSIONS) })
            .collect();
        let mix = [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)];
        let rec = recognition_loss(&preds, &labels, mix[0], mix[1], mix[2]).unwrap().total;
        for (name, got, want) in checks.into_iter().chain([("recognition", rec, oracle_recognition(&preds, &labels, mix))]) {
            let err = (got - want).abs() / want.abs().max(1.0);
            worst = worst.max(err);
            if err > tol {
                return Err(format!("case {case} {name}: {got} vs oracle {want}"));
            }
        }
    }
    Ok(format!("1000 instances, worst error {worst:.1e}"))
}

fn composition() -> Outcome {
    let w = LossWeights::default();
    let defaults = [w.lambda_emo, w.lambda_pho, w.lambda_eye, w.lambda_lc, w.lambda_mc, w.lambda_psi];
    if defaults != [1.0, 2.0, 0.5, 0.5, 0.5, 1e-4] {
        return Err(format!("default weights are {defaults:?}"));
    }
    let (model, fx) = (toy(), FeatureExtractor::reference(1));
    let opts = LossOptions { normalize_photometric: false, exec: Exec::Sequential };
    let mut worst: f64 = 0.0;
    for seed in 0..5 {
        let p = scene(&model, seed, "acceptance-self-render");
        let (image, kp) = observe(&model, &p);
        let target = LossTarget { image: &image, keypoints: &kp, feature: None };
        let r = total_loss(&model, &p, &target, &fx, &w, &opts).map_err(|e| e.to_string())?;
        let reg = 1e-4 * p.psi.iter().map(|x| x * x).sum::<f64>();
        worst = worst.max((r.total - reg).abs());
        if (r.total - reg).abs() > 1e-9 {
            return Err(format!("seed {seed}: total {} vs {reg}", r.total));
        }
    }
    Ok(format!("5 self-rendered instances, worst |total - reg| {worst:.1e}"))
}

fn keypoint_invariance() -> Outcome {
    let model = toy();
    let mut rng = substream(4, "acceptance-keypoints");
    let n = model.landmarks.len();
    let mut worst: f64 = 0.0;
    for case in 0..100 {
        let kp: Vec<[f64; 2]> = (0..n).map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]).collect();
        let lm: Vec<[f64; 3]> = (0..n).map(|_| std::array::from_fn(|_| rng.random_range(-1.0..1.0))).collect();
        let t2: [f64; 2] = std::array::from_fn(|_| rng.random_range(-5.0..5.0));
        let t3: [f64; 3] = std::array::from_fn(|_| rng.random_range(-5.0..5.0));
        let scale = rng.random_range(0.5..2.0);
        let kp_t: Vec<[f64; 2]> = kp.iter().map(|k| [k[0] + t2[0], k[1] + t2[1]]).collect();
        let lm_t: Vec<[f64; 3]> = lm.iter().map(|l| [l[0] + t3[0], l[1] + t3[1], l[2] + t3[2]]).collect();
        for role in [PairRole::EyeClosure, PairRole::MouthClosure, PairRole::LipCorner] {
            let pairs = model.pair_set(role).unwrap();
            let base = relative_keypoint_loss(&kp, &lm, scale, pairs).unwrap().value;
            for (k, l) in [(&kp_t, &lm), (&kp, &lm_t), (&kp_t, &lm_t)] {
                let moved = relative_keypoint_loss(k, l, scale, pairs).unwrap().value;
                worst = worst.max((moved - base).abs());
                if (moved - base).abs() > 1e-10 {
                    return Err(format!("case {case} {role:?}: {base} vs {moved}"));
                }
            }
        }
    }
    Ok(format!("100 instances x 3 pair sets, worst change {worst:.1e}"))
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

fn retarget_recovery() -> Outcome {
    let (model, fx) = (toy(), FeatureExtractor::reference(1));
    let mut recovered = 0;
    let mut notes = Vec::new();
    for seed in 0..10 {
        let p = scene(&model, seed, "acceptance-recovery");
        let (image, _) = observe(&model, &p);
        let feature = fx.extract(&image).unwrap();
        let mut rng = substream(seed, "acceptance-recovery-init");
        let mut problem = RetargetProblem::new(p.clone(), p.clone(), feature);
        problem.init_psi = p.psi.iter().map(|t| t + 0.1 * rng.random_range(-1.0..1.0)).collect();
        let start = Instant::now();
        let res = retarget_expression(&model, &problem, &fx).map_err(|e| format!("seed {seed}: {e}"))?;
        let secs = start.elapsed().as_secs_f64();
        if !res.trace.is_monotone() {
            return Err(format!("seed {seed}: objective trace is not monotone"));
        }
        if secs >= 60.0 {
            return Err(format!("seed {seed}: took {secs:.1}s"));
        }
        let ratio = dist(&problem.init_psi, &p.psi) / dist(&res.psi, &p.psi).max(f64::MIN_POSITIVE);
        if ratio >= 10.0 {
            recovered += 1;
        }
        notes.push(format!("{ratio:.0}x/{secs:.1}s"));
    }
    let summary = format!("{recovered}/10 seeds with >= 10x error reduction [{}]", notes.join(" "));
    if recovered >= 8 {
        Ok(summary)
    } else {
        Err(summary)
    }
}

fn mlp_clusters() -> Outcome {
    // parameter-shaped inputs (identity, expression, jaw) around one center per class
    let dim = 10 + 10 + 3;
    let mut rng = substream(6, "acceptance-clusters");
    let noise = Normal::new(0.0, 0.15).unwrap();
    let mut samples = Vec::new();
    for class in 0..N_EXPRESSIONS {
        let center: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (valence, arousal) = (rng.random_range(-0.8..0.8), rng.random_range(-0.8..0.8));
        for _ in 0..40 {
            let input = center.iter().map(|c| c + noise.sample(&mut rng)).collect();
            samples.push(TrainSample { input, label: AffectLabel { valence, arousal, class } });
        }
    }
    let mlp = Mlp::new(MlpConfig { hidden: 32, ..MlpConfig::new(dim, N_EXPRESSIONS) }, 1).map_err(|e| e.to_string())?;
    let config = TrainConfig { epochs: 200, seed: 3, ..TrainConfig::default() };
    let start = Instant::now();
    let out = train_mlp(mlp, &samples, &config).map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    let acc = out.trace[out.best_epoch].val_accuracy;
    let summary = format!("validation accuracy {:.1}% at epoch {}, {secs:.1}s", 100.0 * acc, out.best_epoch);
    if acc >= 0.95 && secs < 120.0 {
        Ok(summary)
    } else {
        Err(summary)
    }
}

/// Top `cap` per group, merged, then the first `k`.
fn oracle_knn(entries: &[Entry], q: &[f64], k: usize, cap: usize) -> Vec<(String, f64)> {
    let mut groups: std::collections::BTreeMap<&str, Vec<(f64, &str)>> = Default::default();
    for e in entries {
        groups.entry(&e.group).or_default().push((dist(&e.vector, q), &e.id));
    }
    let mut merged = Vec::new();
    for (_, mut members) in groups {
        members.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(b.1)));
        merged.extend(members.into_iter().take(cap));
    }
    merged.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(b.1)));
    merged.into_iter().take(k).map(|(d, id)| (id.to_string(), d)).collect()
}

fn retrieval() -> Outcome {
    let mut queries = 0;
    for seed in 0..4u64 {
        let mut rng = substream(seed, "acceptance-index");
        let dim = 8 + 8 * seed as usize;
        // half the indexes use a coarse integer grid so exact distance ties occur
        let coarse = seed % 2 == 1;
        let draw = |rng: &mut Rng| -> Vec<f64> {
            (0..dim).map(|_| if coarse { rng.random_range(-2..=2) as f64 } else { rng.random_range(-1.0..1.0) }).collect()
        };
        let mut ids: Vec<usize> = (0..10_000).collect();
        ids.shuffle(&mut rng);
        let entries: Vec<Entry> = ids
            .iter()
            .map(|i| Entry { id: format!("e{i:05}"), group: format!("g{}", rng.random_range(0..200)), vector: draw(&mut rng) })
            .collect();
        let index = EmbeddingIndex::from_entries(dim, entries.clone()).map_err(|e| e.to_string())?;
        for _ in 0..10 {
            let q = draw(&mut rng);
            let (k, cap) = (rng.random_range(1..60), rng.random_range(1..4));
            let want = oracle_knn(&entries, &q, k, cap);
            for exec in [Exec::Sequential, Exec::Parallel] {
                let got: Vec<(String, f64)> =
                    index.knn(&q, k, cap, exec).map_err(|e| e.to_string())?.into_iter().map(|n| (n.id, n.distance)).collect();
                if got != want {
                    return Err(format!("seed {seed}, k {k}, cap {cap}, {exec:?}: result differs from brute force"));
                }
            }
            queries += 1;
        }
    }
    Ok(format!("{queries} queries on four 10^4-entry indexes, sequential and parallel"))
}

fn determinism() -> Outcome {
    let bad = common::determinism_failures();
    if bad.is_empty() {
        Ok(format!("{} seeded invocations byte-identical across two runs", common::PIPELINE.len()))
    } else {
        Err(bad.join("; "))
    }
}

fn demo() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let start = Instant::now();
    let out = common::facecap(dir.path(), &["demo", "--seed", "1", "--out-dir", "demo"]);
    let secs = start.elapsed().as_secs_f64();
    if !out.status.success() {
        return Err(String::from_utf8_lossy(&out.stderr).into_owned());
    }
    for f in ["source.png", "target.png", "retargeted.png", "trace.csv", "retargeted.obj", "summary.json"] {
        let len = std::fs::metadata(dir.path().join("demo").join(f)).map(|m| m.len()).unwrap_or(0);
        if len == 0 {
            return Err(format!("{f} missing or empty"));
        }
    }
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("demo/summary.json")).unwrap()).unwrap();
    let (first, last) = (summary["initial_objective"].as_f64().unwrap(), summary["final_objective"].as_f64().unwrap());
    let note = format!("{secs:.1}s, objective {first:.4e} -> {last:.4e}");
    if last < first && secs < 300.0 {
        Ok(note)
    } else {
        Err(note)
    }
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("gradient suite", gradient_suite),
        ("metric and recognition-loss oracles", formula_oracles),
        ("self-render loss composition", composition),
        ("relative keypoint invariance", keypoint_invariance),
        ("retarget recovery", retarget_recovery),
        ("MLP recognizer on parameter clusters", mlp_clusters),
        ("retrieval vs brute force", retrieval),
        ("CLI determinism", determinism),
        ("end-to-end demo", demo),
    ];
    let mut failures = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let outcome = std::panic::catch_unwind(check).unwrap_or_else(|_| Err("panicked".into()));
        match outcome {
            Ok(detail) => println!("PASS {} {name}: {detail}", i + 1),
            Err(detail) => {
                failures += 1;
                println!("FAIL {} {name}: {detail}", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failures} failed", criteria.len() - failures);
    if failures > 0 {
        std::process::exit(1);
    }
}
