//! Exact L2 nearest-neighbor search over emotion embeddings with a per-group cap.
//!
//! Vector files (`EIX1`, little-endian): magic, `u64` count, `u64` dimension,
//! then `count x dim` `f64` values row-major. The CSV manifest (`id,group`)
//! gives the id and group of each row in the same order.

use std::collections::{HashMap, HashSet};
use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;

pub const INDEX_MAGIC: &[u8; 4] = b"EIX1";

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub id: String,
    pub group: String,
    pub vector: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EmbeddingIndex {
    dim: usize,
    entries: Vec<Entry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub id: String,
    pub group: String,
    pub distance: f64,
}

impl EmbeddingIndex {
    pub fn new(dim: usize) -> Self {
        EmbeddingIndex { dim, entries: Vec::new() }
    }

    pub fn from_entries(dim: usize, entries: Vec<Entry>) -> Result<Self> {
        let mut index = EmbeddingIndex::new(dim);
        let mut seen = HashSet::new();
        for e in entries {
            if !seen.insert(e.id.clone()) {
                return Err(Error::Param(format!("duplicate id {:?}", e.id)));
            }
            index.check_vector(&e.vector)?;
            index.entries.push(e);
        }
        Ok(index)
    }

    pub fn insert(&mut self, entry: Entry) -> Result<()> {
        self.check_vector(&entry.vector)?;
        if self.entries.iter().any(|e| e.id == entry.id) {
            return Err(Error::Param(format!("duplicate id {:?}", entry.id)));
        }
        self.entries.push(entry);
        Ok(())
    }

    fn check_vector(&self, v: &[f64]) -> Result<()> {
        if v.len() != self.dim {
            return Err(Error::Param(format!("vector of length {} in a {}-dim index", v.len(), self.dim)));
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric("embedding vector is not finite".into()));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[Entry] {
        &self.entries
    }

    /// The `k` nearest entries, at most `max_per_group` from any one group.
    /// Equal distances are ordered by ascending id.
    pub fn knn(&self, query: &[f64], k: usize, max_per_group: usize, exec: Exec) -> Result<Vec<Neighbor>> {
        if self.entries.is_empty() {
            return Err(Error::Param("index is empty".into()));
        }
        if k == 0 || max_per_group == 0 {
            return Err(Error::Param("k and max_per_group must be at least 1".into()));
        }
        self.check_vector(query)?;
        let dist = exec.map(self.entries.len(), |i| {
            self.entries[i].vector.iter().zip(query).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()
        });
        let mut order: Vec<usize> = (0..self.entries.len()).collect();
        order.sort_by(|&a, &b| dist[a].total_cmp(&dist[b]).then_with(|| self.entries[a].id.cmp(&self.entries[b].id)));
        let mut per_group: HashMap<&str, usize> = HashMap::new();
        let mut out = Vec::with_capacity(k);
        for i in order {
            let e = &self.entries[i];
            let count = per_group.entry(e.group.as_str()).or_insert(0);
            if *count >= max_per_group {
                continue;
            }
            *count += 1;
            out.push(Neighbor { id: e.id.clone(), group: e.group.clone(), distance: dist[i] });
            if out.len() == k {
                break;
            }
        }
        Ok(out)
    }
}

pub fn write_vectors<W: Write>(vectors: &[Vec<f64>], dim: usize, w: &mut W) -> Result<()> {
    w.write_all(INDEX_MAGIC)?;
    w.write_u64::<LE>(vectors.len() as u64)?;
    w.write_u64::<LE>(dim as u64)?;
    for v in vectors {
        if v.len() != dim {
            return Err(Error::Param(format!("vector of length {} in a {dim}-dim file", v.len())));
        }
        for x in v {
            w.write_f64::<LE>(*x)?;
        }
    }
    Ok(())
}

pub fn read_vectors<R: Read>(r: &mut R) -> Result<(usize, Vec<Vec<f64>>)> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != INDEX_MAGIC {
        return Err(Error::Format(format!("bad vector file magic {magic:?}")));
    }
    let n = r.read_u64::<LE>()?;
    let dim = r.read_u64::<LE>()?;
    if n.saturating_mul(dim) > 1 << 32 {
        return Err(Error::Format(format!("{n} x {dim} vectors is too large")));
    }
    let mut out = Vec::with_capacity(n as usize);
    for _ in 0..n {
        let mut v = vec![0.0; dim as usize];
        r.read_f64_into::<LE>(&mut v)?;
        out.push(v);
    }
    Ok((dim as usize, out))
}

#[derive(Debug, Deserialize, Serialize)]
struct ManifestRow {
    id: String,
    group: String,
}

pub fn write_index(index: &EmbeddingIndex, manifest: &Path, vectors: &Path) -> Result<()> {
    let mut csv = csv::Writer::from_path(manifest)?;
    for e in &index.entries {
        csv.serialize(ManifestRow { id: e.id.clone(), group: e.group.clone() })?;
    }
    csv.flush()?;
    let all: Vec<Vec<f64>> = index.entries.iter().map(|e| e.vector.clone()).collect();
    let mut f = std::io::BufWriter::new(std::fs::File::create(vectors)?);
    write_vectors(&all, index.dim, &mut f)?;
    f.flush()?;
    Ok(())
}

pub fn build_index(manifest: &Path, vectors: &Path) -> Result<EmbeddingIndex> {
    let mut reader = csv::Reader::from_path(manifest)?;
    let rows: Vec<ManifestRow> = reader.deserialize().collect::<std::result::Result<_, _>>()?;
    let (dim, vecs) = read_vectors(&mut std::io::BufReader::new(std::fs::File::open(vectors)?))?;
    if rows.len() != vecs.len() {
        return Err(Error::Format(format!("manifest has {} rows but vector file has {}", rows.len(), vecs.len())));
    }
    let entries = rows
        .into_iter()
        .zip(vecs)
        .map(|(r, vector)| Entry { id: r.id, group: r.group, vector })
        .collect();
    EmbeddingIndex::from_entries(dim, entries)
}
