//! `MLP1` checkpoints (little-endian): magic, `u64` input dim, hidden width
//! and class count, `f64` LeakyReLU slope, then the standardization mean and
//! std, the four dense layers (weights row-major `out x in`, then bias) and
//! the three batch norms (gamma, beta, running mean, running variance).

use std::io::{Read, Write};

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use ndarray::{Array1, Array2};

use super::{BatchNorm, Mlp, MlpConfig};
use crate::error::{Error, Result};

pub const MLP_MAGIC: &[u8; 4] = b"MLP1";
const MAX_DIM: u64 = 1 << 20;

fn write_all<'a, W: Write>(w: &mut W, v: impl IntoIterator<Item = &'a f64>) -> Result<()> {
    for x in v {
        w.write_f64::<LE>(*x)?;
    }
    Ok(())
}

fn read_vec<R: Read>(r: &mut R, n: usize) -> Result<Array1<f64>> {
    let mut out = vec![0.0; n];
    r.read_f64_into::<LE>(&mut out)?;
    Ok(Array1::from(out))
}

pub fn write_mlp<W: Write>(mlp: &Mlp, w: &mut W) -> Result<()> {
    mlp.validate()?;
    let c = &mlp.config;
    w.write_all(MLP_MAGIC)?;
    for d in [c.input_dim, c.hidden, c.n_classes] {
        w.write_u64::<LE>(d as u64)?;
    }
    w.write_f64::<LE>(c.leaky_slope)?;
    write_all(w, &mlp.input_mean)?;
    write_all(w, &mlp.input_std)?;
    for (wt, b) in mlp.weights.iter().zip(&mlp.biases) {
        write_all(w, wt.iter())?;
        write_all(w, b)?;
    }
    for n in &mlp.norms {
        for a in [&n.gamma, &n.beta, &n.running_mean, &n.running_var] {
            write_all(w, a)?;
        }
    }
    Ok(())
}

pub fn read_mlp<R: Read>(r: &mut R) -> Result<Mlp> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MLP_MAGIC {
        return Err(Error::Format(format!("bad MLP magic {magic:?}")));
    }
    let mut d = [0u64; 3];
    for x in &mut d {
        *x = r.read_u64::<LE>()?;
        if *x == 0 || *x > MAX_DIM {
            return Err(Error::Format(format!("implausible MLP dimension {x}")));
        }
    }
    let config = MlpConfig {
        input_dim: d[0] as usize,
        hidden: d[1] as usize,
        n_classes: d[2] as usize,
        leaky_slope: r.read_f64::<LE>()?,
    };
    let input_mean = read_vec(r, config.input_dim)?;
    let input_std = read_vec(r, config.input_dim)?;
    let dims = [config.input_dim, config.hidden, config.hidden, config.hidden, config.output_dim()];
    let mut weights = Vec::new();
    let mut biases = Vec::new();
    for l in 0..4 {
        let flat = read_vec(r, dims[l + 1] * dims[l])?;
        weights.push(Array2::from_shape_vec((dims[l + 1], dims[l]), flat.to_vec()).expect("sized"));
        biases.push(read_vec(r, dims[l + 1])?);
    }
    let mut norms = Vec::new();
    for _ in 0..3 {
        norms.push(BatchNorm {
            gamma: read_vec(r, config.hidden)?,
            beta: read_vec(r, config.hidden)?,
            running_mean: read_vec(r, config.hidden)?,
            running_var: read_vec(r, config.hidden)?,
        });
    }
    let mlp = Mlp { config, weights, biases, norms, input_mean, input_std };
    mlp.validate()?;
    Ok(mlp)
}
