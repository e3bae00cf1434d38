//! `FCM1` binary model files.
//!
//! Layout (little-endian): the 4-byte magic, then eleven `u64` dimensions
//! `n_v, n_f, n_beta, n_psi, n_alpha, k, n_landmarks, has_uv, jaw_joint,
//! n_skin (u64::MAX = all triangles), n_pair_sets`, then the arrays in field
//! order as dense row-major `f64` (indices as `u64`):
//! template, faces, identity basis, expression basis, joint positions,
//! skinning weights, albedo mean, albedo basis, landmarks (triangle + 3
//! barycentric weights), uv coords if present, skin triangles if present,
//! and finally each pair set as `role, count, (i, j) * count`.

use std::io::{Read, Write};

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};

use super::{FaceModel, LandmarkEmbedding};
use crate::error::{Error, Result};
use crate::linalg::Vec3;
use crate::losses::{KeypointPairSet, PairRole};

pub const MODEL_MAGIC: &[u8; 4] = b"FCM1";

// Refuse absurd headers before allocating.
const MAX_DIM: u64 = 1 << 28;

fn write_f64s<W: Write>(w: &mut W, values: impl IntoIterator<Item = f64>) -> Result<()> {
    for v in values {
        w.write_f64::<LE>(v)?;
    }
    Ok(())
}

fn read_f64s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f64>> {
    let mut out = vec![0.0; n];
    r.read_f64_into::<LE>(&mut out)?;
    Ok(out)
}

fn read_vec3s<R: Read>(r: &mut R, n: usize) -> Result<Vec<Vec3>> {
    let flat = read_f64s(r, n * 3)?;
    Ok(flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect())
}

fn read_dim<R: Read>(r: &mut R, name: &str) -> Result<usize> {
    let v = r.read_u64::<LE>()?;
    if v > MAX_DIM {
        return Err(Error::Format(format!("dimension {name} = {v} is out of range")));
    }
    Ok(v as usize)
}

fn role_code(role: PairRole) -> u64 {
    match role {
        PairRole::EyeClosure => 0,
        PairRole::MouthClosure => 1,
        PairRole::LipCorner => 2,
        PairRole::Custom => 3,
    }
}

fn role_from_code(code: u64) -> Result<PairRole> {
    Ok(match code {
        0 => PairRole::EyeClosure,
        1 => PairRole::MouthClosure,
        2 => PairRole::LipCorner,
        3 => PairRole::Custom,
        other => return Err(Error::Format(format!("unknown keypoint pair role {other}"))),
    })
}

pub fn write_model<W: Write>(model: &FaceModel, w: &mut W) -> Result<()> {
    model.validate()?;
    w.write_all(MODEL_MAGIC)?;
    let dims = [
        model.n_vertices() as u64,
        model.n_faces() as u64,
        model.n_beta as u64,
        model.n_psi as u64,
        model.n_alpha as u64,
        model.n_joints() as u64,
        model.landmarks.len() as u64,
        model.uv_coords.is_some() as u64,
        model.jaw_joint as u64,
        model.skin_triangles.as_ref().map_or(u64::MAX, |s| s.len() as u64),
        model.keypoint_pairs.len() as u64,
    ];
    for d in dims {
        w.write_u64::<LE>(d)?;
    }
    write_f64s(w, model.template_vertices.iter().flatten().copied())?;
    for f in model.faces.iter().flatten() {
        w.write_u64::<LE>(*f as u64)?;
    }
    write_f64s(w, model.identity_basis.iter().copied())?;
    write_f64s(w, model.expression_basis.iter().copied())?;
    write_f64s(w, model.joint_positions.iter().flatten().copied())?;
    write_f64s(w, model.skinning_weights.iter().copied())?;
    write_f64s(w, model.albedo_mean.iter().flatten().copied())?;
    write_f64s(w, model.albedo_basis.iter().copied())?;
    for lm in &model.landmarks {
        w.write_u64::<LE>(lm.triangle as u64)?;
        write_f64s(w, lm.bary)?;
    }
    if let Some(uv) = &model.uv_coords {
        write_f64s(w, uv.iter().flatten().copied())?;
    }
    if let Some(skin) = &model.skin_triangles {
        for t in skin {
            w.write_u64::<LE>(*t as u64)?;
        }
    }
    for set in &model.keypoint_pairs {
        w.write_u64::<LE>(role_code(set.role))?;
        w.write_u64::<LE>(set.pairs.len() as u64)?;
        for &(i, j) in &set.pairs {
            w.write_u64::<LE>(i as u64)?;
            w.write_u64::<LE>(j as u64)?;
        }
    }
    Ok(())
}

pub fn read_model<R: Read>(r: &mut R) -> Result<FaceModel> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MODEL_MAGIC {
        return Err(Error::Format(format!("bad model magic {magic:?}")));
    }
    let n_v = read_dim(r, "n_v")?;
    let n_f = read_dim(r, "n_f")?;
    let n_beta = read_dim(r, "n_beta")?;
    let n_psi = read_dim(r, "n_psi")?;
    let n_alpha = read_dim(r, "n_alpha")?;
    let k = read_dim(r, "k")?;
    let n_lm = read_dim(r, "n_landmarks")?;
    let has_uv = read_dim(r, "has_uv")?;
    let jaw_joint = read_dim(r, "jaw_joint")?;
    let n_skin = r.read_u64::<LE>()?;
    let n_sets = read_dim(r, "n_pair_sets")?;
    if has_uv > 1 {
        return Err(Error::Format(format!("has_uv flag must be 0 or 1, got {has_uv}")));
    }

    let template_vertices = read_vec3s(r, n_v)?;
    let mut faces = Vec::with_capacity(n_f);
    for _ in 0..n_f {
        let mut tri = [0usize; 3];
        for t in &mut tri {
            *t = r.read_u64::<LE>()? as usize;
        }
        faces.push(tri);
    }
    let identity_basis = read_f64s(r, n_v * 3 * n_beta)?;
    let expression_basis = read_f64s(r, n_v * 3 * n_psi)?;
    let joint_positions = read_vec3s(r, k)?;
    let skinning_weights = read_f64s(r, n_v * k)?;
    let albedo_mean = read_vec3s(r, n_v)?;
    let albedo_basis = read_f64s(r, n_v * 3 * n_alpha)?;
    let mut landmarks = Vec::with_capacity(n_lm);
    for _ in 0..n_lm {
        let triangle = r.read_u64::<LE>()? as usize;
        let b = read_f64s(r, 3)?;
        landmarks.push(LandmarkEmbedding { triangle, bary: [b[0], b[1], b[2]] });
    }
    let uv_coords = if has_uv == 1 {
        Some(read_f64s(r, n_v * 2)?.chunks_exact(2).map(|c| [c[0], c[1]]).collect())
    } else {
        None
    };
    let skin_triangles = if n_skin == u64::MAX {
        None
    } else {
        if n_skin > MAX_DIM {
            return Err(Error::Format(format!("skin triangle count {n_skin} is out of range")));
        }
        let mut skin = Vec::with_capacity(n_skin as usize);
        for _ in 0..n_skin {
            skin.push(r.read_u64::<LE>()? as usize);
        }
        Some(skin)
    };
    let mut keypoint_pairs = Vec::with_capacity(n_sets);
    for _ in 0..n_sets {
        let role = role_from_code(r.read_u64::<LE>()?)?;
        let count = read_dim(r, "pair count")?;
        let mut pairs = Vec::with_capacity(count);
        for _ in 0..count {
            pairs.push((r.read_u64::<LE>()? as usize, r.read_u64::<LE>()? as usize));
        }
        keypoint_pairs.push(KeypointPairSet { role, pairs });
    }

    let model = FaceModel {
        template_vertices,
        faces,
        identity_basis,
        n_beta,
        expression_basis,
        n_psi,
        joint_positions,
        skinning_weights,
        jaw_joint,
        albedo_mean,
        albedo_basis,
        n_alpha,
        landmarks,
        uv_coords,
        skin_triangles,
        keypoint_pairs,
    };
    model.validate()?;
    Ok(model)
}

/// Wavefront OBJ: `v` lines then 1-based `f` lines, no normals or materials.
pub fn write_obj<W: Write>(mesh: &super::Mesh, w: &mut W) -> Result<()> {
    for v in &mesh.vertices {
        writeln!(w, "v {} {} {}", v[0], v[1], v[2])?;
    }
    for f in &mesh.faces {
        writeln!(w, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1)?;
    }
    Ok(())
}
