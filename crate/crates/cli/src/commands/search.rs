use std::path::PathBuf;

use anyhow::{bail, ensure, Context, Result};
use clap::Args;
use facecap_core::renderer::load_image;
use facecap_core::retrieval::{build_index, write_index, EmbeddingIndex, Entry};
use facecap_core::Exec;
use serde::{Deserialize, Serialize};

use crate::config::{pick, CommonArgs, ModelArgs, RunConfig};

#[derive(Debug, Deserialize)]
struct ImageRow {
    id: String,
    group: String,
    path: PathBuf,
}

#[derive(Debug, Args)]
pub struct EmbedArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[command(flatten)]
    model: ModelArgs,
    /// CSV with columns id, group, path; relative paths resolve against its directory.
    #[arg(long)]
    images: PathBuf,
    /// Output manifest CSV (id, group).
    #[arg(long)]
    manifest: PathBuf,
    /// Output vector file.
    #[arg(long)]
    vectors: PathBuf,
}

pub fn embed(a: EmbedArgs) -> Result<()> {
    let config = RunConfig::load(a.common.config.as_deref())?;
    let extractor = a.model.load_extractor(&config)?;
    let base = a.images.parent().map(PathBuf::from).unwrap_or_default();
    let mut rdr = csv::Reader::from_path(&a.images).with_context(|| format!("opening {}", a.images.display()))?;
    let rows: Vec<ImageRow> = rdr.deserialize().collect::<std::result::Result<_, _>>()?;
    ensure!(!rows.is_empty(), "{} lists no images", a.images.display());
    let images = rows
        .iter()
        .map(|r| {
            let path = base.join(&r.path);
            load_image(&path).with_context(|| format!("loading {}", path.display()))
        })
        .collect::<Result<Vec<_>>>()?;
    let features = extractor.extract_batch(&images, Exec::default())?;
    let entries = rows
        .into_iter()
        .zip(features)
        .map(|(r, vector)| Entry { id: r.id, group: r.group, vector })
        .collect();
    let index = EmbeddingIndex::from_entries(extractor.feature_dim(), entries)?;
    write_index(&index, &a.manifest, &a.vectors)?;
    println!("indexed {} images, dimension {}", index.len(), index.dim());
    Ok(())
}

#[derive(Debug, Args)]
pub struct RetrieveArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    vectors: PathBuf,
    /// Query with an indexed entry (the entry itself is excluded from the results).
    #[arg(long, conflicts_with = "query_image")]
    query_id: Option<String>,
    #[arg(long)]
    query_image: Option<PathBuf>,
    #[arg(long)]
    k: Option<usize>,
    /// At most this many results per group.
    #[arg(long)]
    max_per_group: Option<usize>,
    /// Ranked results CSV; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
struct ResultRow<'a> {
    rank: usize,
    id: &'a str,
    group: &'a str,
    distance: f64,
}

pub fn retrieve(a: RetrieveArgs) -> Result<()> {
    let config = RunConfig::load(a.common.config.as_deref())?;
    let k = pick(a.k, config.k, 10);
    let cap = pick(a.max_per_group, config.max_per_group, 1);
    ensure!(k > 0 && cap > 0, "k and max-per-group must be positive");
    let index = build_index(&a.manifest, &a.vectors).context("loading index")?;
    let (query, skip) = match (&a.query_id, &a.query_image) {
        (Some(id), None) => {
            let Some(e) = index.entries().iter().find(|e| &e.id == id) else {
                bail!("no entry with id {id:?}");
            };
            (e.vector.clone(), Some(id.clone()))
        }
        (None, Some(path)) => {
            let extractor = a.model.load_extractor(&config)?;
            let image = load_image(path).with_context(|| format!("loading {}", path.display()))?;
            (extractor.extract(&image)?, None)
        }
        _ => bail!("give exactly one of --query-id and --query-image"),
    };
    let index = match &skip {
        Some(id) => EmbeddingIndex::from_entries(
            index.dim(),
            index.entries().iter().filter(|e| &e.id != id).cloned().collect(),
        )?,
        None => index,
    };
    let hits = index.knn(&query, k, cap, Exec::default())?;

    let sink: Box<dyn std::io::Write> = match &a.out {
        Some(path) => Box::new(std::fs::File::create(path).with_context(|| format!("creating {}", path.display()))?),
        None => Box::new(std::io::stdout()),
    };
    let mut w = csv::Writer::from_writer(sink);
    for (i, h) in hits.iter().enumerate() {
        w.serialize(ResultRow { rank: i + 1, id: &h.id, group: &h.group, distance: h.distance })?;
    }
    w.flush()?;
    Ok(())
}
