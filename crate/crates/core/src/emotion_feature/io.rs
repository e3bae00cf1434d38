//! `EMF1` extractor weight files and the affect dataset manifest.
//!
//! Weight file layout (little-endian): magic, `u64` input width, input
//! height and layer count, then per layer a `u64` tag followed by its
//! section:
//! - `1` conv: in, out, kernel, stride (`u64`), activation, weights, bias;
//! - `2` avg pool: size (`u64`);
//! - `3` dense: inputs, outputs (`u64`), activation, weights, bias.
//!
//! An activation is a `u64` code (0 identity, 1 tanh, 2 relu, 3 leaky relu)
//! followed by one `f64` slope.

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use super::{Activation, FeatureExtractor, Layer};
use crate::error::{Error, Result};

pub const EXTRACTOR_MAGIC: &[u8; 4] = b"EMF1";
const MAX_WEIGHTS: u64 = 1 << 30;

fn write_activation<W: Write>(w: &mut W, a: Activation) -> Result<()> {
    let (code, slope) = match a {
        Activation::Identity => (0, 0.0),
        Activation::Tanh => (1, 0.0),
        Activation::Relu => (2, 0.0),
        Activation::LeakyRelu(s) => (3, s),
    };
    w.write_u64::<LE>(code)?;
    w.write_f64::<LE>(slope)?;
    Ok(())
}

fn read_activation<R: Read>(r: &mut R) -> Result<Activation> {
    let code = r.read_u64::<LE>()?;
    let slope = r.read_f64::<LE>()?;
    Ok(match code {
        0 => Activation::Identity,
        1 => Activation::Tanh,
        2 => Activation::Relu,
        3 => Activation::LeakyRelu(slope),
        other => return Err(Error::Format(format!("unknown activation code {other}"))),
    })
}

fn write_values<W: Write>(w: &mut W, v: &[f64]) -> Result<()> {
    for x in v {
        w.write_f64::<LE>(*x)?;
    }
    Ok(())
}

fn read_values<R: Read>(r: &mut R, n: u64) -> Result<Vec<f64>> {
    if n > MAX_WEIGHTS {
        return Err(Error::Format(format!("section of {n} values is too large")));
    }
    let mut out = vec![0.0; n as usize];
    r.read_f64_into::<LE>(&mut out)?;
    Ok(out)
}

pub fn write_extractor<W: Write>(fx: &FeatureExtractor, w: &mut W) -> Result<()> {
    fx.validate()?;
    w.write_all(EXTRACTOR_MAGIC)?;
    w.write_u64::<LE>(fx.input_width as u64)?;
    w.write_u64::<LE>(fx.input_height as u64)?;
    w.write_u64::<LE>(fx.layers.len() as u64)?;
    for layer in &fx.layers {
        match layer {
            Layer::Conv2d { in_channels, out_channels, kernel, stride, weights, bias, activation } => {
                w.write_u64::<LE>(1)?;
                for d in [in_channels, out_channels, kernel, stride] {
                    w.write_u64::<LE>(*d as u64)?;
                }
                write_activation(w, *activation)?;
                write_values(w, weights)?;
                write_values(w, bias)?;
            }
            Layer::AvgPool { size } => {
                w.write_u64::<LE>(2)?;
                w.write_u64::<LE>(*size as u64)?;
            }
            Layer::Dense { inputs, outputs, weights, bias, activation } => {
                w.write_u64::<LE>(3)?;
                w.write_u64::<LE>(*inputs as u64)?;
                w.write_u64::<LE>(*outputs as u64)?;
                write_activation(w, *activation)?;
                write_values(w, weights)?;
                write_values(w, bias)?;
            }
        }
    }
    Ok(())
}

pub fn read_extractor<R: Read>(r: &mut R) -> Result<FeatureExtractor> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != EXTRACTOR_MAGIC {
        return Err(Error::Format(format!("bad extractor magic {magic:?}")));
    }
    let width = r.read_u64::<LE>()? as usize;
    let height = r.read_u64::<LE>()? as usize;
    let n_layers = r.read_u64::<LE>()?;
    if n_layers > 1024 {
        return Err(Error::Format(format!("{n_layers} layers is implausible")));
    }
    let mut layers = Vec::new();
    for _ in 0..n_layers {
        let layer = match r.read_u64::<LE>()? {
            1 => {
                let mut d = [0u64; 4];
                for x in &mut d {
                    *x = r.read_u64::<LE>()?;
                }
                let activation = read_activation(r)?;
                let n_w = d[0].saturating_mul(d[1]).saturating_mul(d[2]).saturating_mul(d[2]);
                let weights = read_values(r, n_w)?;
                let bias = read_values(r, d[1])?;
                Layer::Conv2d {
                    in_channels: d[0] as usize,
                    out_channels: d[1] as usize,
                    kernel: d[2] as usize,
                    stride: d[3] as usize,
                    weights,
                    bias,
                    activation,
                }
            }
            2 => Layer::AvgPool { size: r.read_u64::<LE>()? as usize },
            3 => {
                let inputs = r.read_u64::<LE>()?;
                let outputs = r.read_u64::<LE>()?;
                let activation = read_activation(r)?;
                let weights = read_values(r, inputs.saturating_mul(outputs))?;
                let bias = read_values(r, outputs)?;
                Layer::Dense { inputs: inputs as usize, outputs: outputs as usize, weights, bias, activation }
            }
            tag => return Err(Error::Format(format!("unknown layer tag {tag}"))),
        };
        layers.push(layer);
    }
    FeatureExtractor::new(width, height, layers)
}

/// One row of the affect dataset manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub path: String,
    pub valence: f64,
    pub arousal: f64,
    pub expression_class: usize,
}

/// Read a `path,valence,arousal,expression_class` CSV.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>> {
    let mut reader = csv::Reader::from_path(path)?;
    let mut rows = Vec::new();
    for row in reader.deserialize() {
        let row: ManifestRow = row?;
        if !(-1.0..=1.0).contains(&row.valence) || !(-1.0..=1.0).contains(&row.arousal) {
            return Err(Error::Format(format!("{}: valence/arousal outside [-1, 1]", row.path)));
        }
        rows.push(row);
    }
    Ok(rows)
}
