use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use clap::Args;
use facecap_core::emotion_feature::{AffectLabel, N_EXPRESSIONS};
use facecap_core::fitter::{
    make_synthetic_dataset, param_rows, read_params_csv, train_expression_encoder, write_param_rows, EncoderConfig,
    EncoderTrainConfig, ExpressionEncoder, SyntheticConfig,
};
use facecap_core::losses::LossWeights;
use facecap_core::metrics::{accuracy, MetricReport, SignalMetrics};
use facecap_core::param_recognizer::{
    argmax, train_mlp as fit_mlp, write_mlp, Mlp, MlpConfig, Mode, TrainConfig, TrainSample, DEFAULT_HIDDEN,
};
use facecap_core::Exec;
use ndarray::Array2;
use serde::Serialize;

use crate::config::{create_dir, pick, write_json, CommonArgs, ModelArgs, RunConfig, SizeArgs, WeightArgs};

fn out_dir(flag: &Option<PathBuf>, config: &RunConfig) -> Result<PathBuf> {
    match flag.clone().or(config.out_dir.clone()) {
        Some(p) => Ok(p),
        None => bail!("--out-dir is required"),
    }
}

fn write_csv_rows<T: Serialize>(rows: &[T], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Args)]
pub struct TrainEncoderArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    size: SizeArgs,
    #[command(flatten)]
    weights: WeightArgs,
    #[arg(long)]
    n_samples: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    hidden: Option<usize>,
    /// Side of the pooling grid the encoder reads.
    #[arg(long)]
    grid: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

pub fn train_encoder(a: TrainEncoderArgs) -> Result<()> {
    let config = RunConfig::load(a.common.config.as_deref())?;
    let out = out_dir(&a.out_dir, &config)?;
    let seed = pick(a.common.seed, config.seed, 0);
    let model = a.model.load_model(&config)?;
    let extractor = a.model.load_extractor(&config)?;
    let defaults = EncoderTrainConfig::default();
    let mut train = EncoderTrainConfig {
        epochs: pick(a.epochs, config.epochs, defaults.epochs),
        batch_size: pick(a.batch_size, config.batch_size, defaults.batch_size),
        seed,
        patience: pick(a.patience, config.patience, defaults.patience),
        weights: a.weights.weights(&config, LossWeights::default())?,
        normalize_photometric: a.weights.normalize(&config),
        ..defaults
    };
    train.adam.lr = pick(a.lr, config.lr, defaults.adam.lr);
    ensure!(train.adam.lr >= 0.0 && train.adam.lr.is_finite(), "learning rate must be >= 0");
    ensure!(train.batch_size > 0 && train.patience > 0, "batch size and patience must be positive");
    let data = SyntheticConfig {
        n_samples: pick(a.n_samples, config.n_samples, 64),
        seed,
        image_size: a.size.size(&config)?,
        ..SyntheticConfig::default()
    };
    ensure!(data.n_samples >= 2, "need at least two samples");
    let enc_config = EncoderConfig {
        grid: pick(a.grid, config.grid, 8),
        hidden: pick(a.hidden, config.hidden, 32),
        n_psi: model.n_psi,
    };
    let encoder = ExpressionEncoder::new(enc_config, seed)?;

    let samples = make_synthetic_dataset(&model, &extractor, &data, Exec::default())?;
    let outcome = train_expression_encoder(&model, encoder, &samples, &extractor, &train)?;
    create_dir(&out)?;
    write_json(&outcome.best, &out.join("encoder.json"))?;
    write_csv_rows(&outcome.trace, &out.join("trace.csv"))?;
    let rows = param_rows(&model, &samples, Some(&outcome.best))?;
    let file = std::fs::File::create(out.join("params.csv")).context("creating params.csv")?;
    write_param_rows(&rows, model.n_beta, model.n_psi, &mut BufWriter::new(file))?;
    let first = outcome.trace[0].val_loss;
    let best = outcome.trace[outcome.best_epoch].val_loss;
    println!("best epoch {}: validation loss {first:.6e} -> {best:.6e}", outcome.best_epoch);
    Ok(())
}

#[derive(Debug, Args)]
pub struct TrainMlpArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Parameter table with labels, as written by train-encoder.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
struct PredictionRow {
    id: String,
    valence: f64,
    valence_pred: f64,
    arousal: f64,
    arousal_pred: f64,
    expression_class: usize,
    expression_class_pred: usize,
}

pub fn train_mlp(a: TrainMlpArgs) -> Result<()> {
    let config = RunConfig::load(a.common.config.as_deref())?;
    let out = out_dir(&a.out_dir, &config)?;
    let seed = pick(a.common.seed, config.seed, 0);
    let defaults = TrainConfig::default();
    let mut train = TrainConfig {
        epochs: pick(a.epochs, config.epochs, defaults.epochs),
        batch_size: pick(a.batch_size, config.batch_size, defaults.batch_size),
        seed,
        ..defaults
    };
    train.adam.lr = pick(a.lr, config.lr, defaults.adam.lr);
    ensure!(train.adam.lr >= 0.0 && train.adam.lr.is_finite(), "learning rate must be >= 0");
    ensure!(train.batch_size > 0, "batch size must be positive");
    let hidden = pick(a.hidden, config.hidden, DEFAULT_HIDDEN);

    let file = std::fs::File::open(&a.data).with_context(|| format!("opening {}", a.data.display()))?;
    let rows = read_params_csv(std::io::BufReader::new(file)).with_context(|| format!("reading {}", a.data.display()))?;
    ensure!(rows.len() >= 2, "need at least two rows in {}", a.data.display());
    let samples: Vec<TrainSample> = rows
        .iter()
        .map(|r| TrainSample {
            input: r.beta.iter().chain(&r.psi).chain(&r.jaw).copied().collect(),
            label: AffectLabel { valence: r.valence, arousal: r.arousal, class: r.expression_class },
        })
        .collect();
    ensure!(
        samples.iter().all(|s| s.label.class < N_EXPRESSIONS),
        "expression_class must be below {N_EXPRESSIONS}"
    );
    let dim = samples[0].input.len();
    let mlp = Mlp::new(MlpConfig { hidden, ..MlpConfig::new(dim, N_EXPRESSIONS) }, seed)?;

    let outcome = fit_mlp(mlp, &samples, &train)?;
    let x = Array2::from_shape_vec((samples.len(), dim), samples.iter().flat_map(|s| s.input.clone()).collect())?;
    let preds = outcome.best.predict(x.view(), Mode::Eval)?;
    let table: Vec<PredictionRow> = rows
        .iter()
        .zip(&preds)
        .map(|(r, p)| PredictionRow {
            id: r.id.clone(),
            valence: r.valence,
            valence_pred: p.valence,
            arousal: r.arousal,
            arousal_pred: p.arousal,
            expression_class: r.expression_class,
            expression_class_pred: argmax(&p.logits),
        })
        .collect();

    create_dir(&out)?;
    let mut w = BufWriter::new(std::fs::File::create(out.join("out.mlp")).context("creating out.mlp")?);
    write_mlp(&outcome.best, &mut w)?;
    drop(w);
    write_csv_rows(&outcome.trace, &out.join("trace.csv"))?;
    write_csv_rows(&table, &out.join("predictions.csv"))?;
    let best = &outcome.trace[outcome.best_epoch];
    println!("best epoch {}: validation loss {:.6e}, accuracy {:.3}", best.epoch, best.val_loss, best.val_accuracy);
    Ok(())
}

#[derive(Debug, Args)]
pub struct MetricsArgs {
    /// CSV with any of the column pairs valence/valence_pred,
    /// arousal/arousal_pred, expression_class/expression_class_pred.
    #[arg(long)]
    input: PathBuf,
    /// JSON report; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn column<T: std::str::FromStr>(records: &[csv::StringRecord], headers: &csv::StringRecord, name: &str) -> Result<Option<Vec<T>>> {
    let Some(i) = headers.iter().position(|h| h == name) else {
        return Ok(None);
    };
    records
        .iter()
        .enumerate()
        .map(|(row, r)| r[i].trim().parse().map_err(|_| anyhow::anyhow!("row {}: bad {name} value {:?}", row + 1, &r[i])))
        .collect::<Result<Vec<T>>>()
        .map(Some)
}

fn pair<T: std::str::FromStr>(records: &[csv::StringRecord], headers: &csv::StringRecord, name: &str) -> Result<Option<(Vec<T>, Vec<T>)>> {
    let pred = format!("{name}_pred");
    match (column(records, headers, name)?, column(records, headers, &pred)?) {
        (Some(y), Some(p)) => Ok(Some((y, p))),
        (None, None) => Ok(None),
        _ => bail!("column {name} needs its partner {pred}"),
    }
}

pub fn metrics(a: MetricsArgs) -> Result<()> {
    let mut rdr = csv::Reader::from_path(&a.input).with_context(|| format!("opening {}", a.input.display()))?;
    let headers = rdr.headers()?.clone();
    let records: Vec<csv::StringRecord> = rdr.records().collect::<std::result::Result<_, _>>()?;
    let signal = |name: &str| -> Result<Option<SignalMetrics>> {
        pair::<f64>(&records, &headers, name)?.map(|(y, p)| SignalMetrics::compute(&y, &p)).transpose().map_err(Into::into)
    };
    let report = MetricReport {
        valence: signal("valence")?,
        arousal: signal("arousal")?,
        accuracy: pair::<usize>(&records, &headers, "expression_class")?.map(|(y, p)| accuracy(&y, &p)).transpose()?,
    };
    ensure!(
        report.valence.is_some() || report.arousal.is_some() || report.accuracy.is_some(),
        "no recognized column pair in {}",
        a.input.display()
    );
    match &a.out {
        Some(path) => write_json(&report, path)?,
        None => println!("{}", serde_json::to_string_pretty(&report)?),
    }
    Ok(())
}
