//! Linear statistical face model: identity and expression blendshapes, a
//! jointed rig deformed by linear blend skinning, a per-vertex albedo model
//! and barycentric surface landmarks.
//!
//! Blendshapes are applied in the rest pose, then skinning. Pose-corrective
//! blendshapes are not modelled.
//!
//! Skinning uses a flat hierarchy: every joint rotates about its own rest
//! position and the global rotation is applied last, about the origin:
//!
//! `v' = R_global * sum_j w_vj * (R_j * (v - p_j) + p_j)`
//!
//! evaluated as `R_global * (v + sum_j w_vj * (R_j - I) * (v - p_j))`, which
//! is the same for weight rows summing to one and reproduces the rest pose
//! exactly at zero rotation.

mod io;
mod toy;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, ensure_len, Error, Result};
use crate::linalg::{self, Mat3, Vec3};
use crate::losses::{KeypointPairSet, PairRole};

pub use io::{read_model, write_model, write_obj, MODEL_MAGIC};
pub use toy::{make_toy_model, ToyModelConfig};

const WEIGHT_TOL: f64 = 1e-9;

/// Surface point given by a triangle and barycentric weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LandmarkEmbedding {
    pub triangle: usize,
    pub bary: [f64; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct FaceModel {
    pub template_vertices: Vec<Vec3>,
    pub faces: Vec<[usize; 3]>,
    /// Row-major `n_v x 3 x n_beta`.
    pub identity_basis: Vec<f64>,
    pub n_beta: usize,
    /// Row-major `n_v x 3 x n_psi`.
    pub expression_basis: Vec<f64>,
    pub n_psi: usize,
    pub joint_positions: Vec<Vec3>,
    /// Row-major `n_v x k`.
    pub skinning_weights: Vec<f64>,
    pub jaw_joint: usize,
    pub albedo_mean: Vec<Vec3>,
    /// Row-major `n_v x 3 x n_alpha`.
    pub albedo_basis: Vec<f64>,
    pub n_alpha: usize,
    pub landmarks: Vec<LandmarkEmbedding>,
    pub uv_coords: Option<Vec<[f64; 2]>>,
    /// Triangles that make up the face-skin region of the render mask; `None` means all.
    pub skin_triangles: Option<Vec<usize>>,
    pub keypoint_pairs: Vec<KeypointPairSet>,
}

/// `(beta, theta, psi, alpha, lighting, camera)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaceParams {
    pub beta: Vec<f64>,
    /// Global rotation first, then one axis-angle triple per joint.
    pub theta: Vec<f64>,
    pub psi: Vec<f64>,
    pub alpha: Vec<f64>,
    /// 9 SH coefficients x RGB, indexed `band * 3 + channel`.
    pub lighting: Vec<f64>,
    /// `(scale, tx, ty)`.
    pub camera: [f64; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mesh {
    pub vertices: Vec<Vec3>,
    pub faces: Vec<[usize; 3]>,
    pub vertex_normals: Vec<Vec3>,
}

/// Gradients with respect to the geometric parameters.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GeometryGrads {
    pub beta: Vec<f64>,
    pub theta: Vec<f64>,
    pub psi: Vec<f64>,
}

/// Intermediate state of a mesh evaluation, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct PosedMesh {
    pub mesh: Mesh,
    rest: Vec<Vec3>,
    global: (Mat3, [Mat3; 3]),
    joints: Vec<(Mat3, [Mat3; 3])>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Albedo {
    pub colors: Vec<Vec3>,
    /// One flag per vertex channel; set where the linear value left `[0, 1]`.
    pub clamped: Vec<[bool; 3]>,
    pub clamp_count: usize,
}

impl FaceModel {
    pub fn n_vertices(&self) -> usize {
        self.template_vertices.len()
    }

    pub fn n_faces(&self) -> usize {
        self.faces.len()
    }

    pub fn n_joints(&self) -> usize {
        self.joint_positions.len()
    }

    pub fn theta_len(&self) -> usize {
        3 * self.n_joints() + 3
    }

    /// Offset of the jaw axis-angle triple inside `theta`.
    pub fn jaw_offset(&self) -> usize {
        3 + 3 * self.jaw_joint
    }

    pub fn pair_set(&self, role: PairRole) -> Option<&KeypointPairSet> {
        self.keypoint_pairs.iter().find(|s| s.role == role)
    }

    pub fn zero_params(&self) -> FaceParams {
        let mut lighting = vec![0.0; 27];
        lighting[0] = 1.0;
        lighting[1] = 1.0;
        lighting[2] = 1.0;
        FaceParams {
            beta: vec![0.0; self.n_beta],
            theta: vec![0.0; self.theta_len()],
            psi: vec![0.0; self.n_psi],
            alpha: vec![0.0; self.n_alpha],
            lighting,
            camera: [1.0, 0.0, 0.0],
        }
    }

    /// Check every structural invariant.
    pub fn validate(&self) -> Result<()> {
        let n_v = self.n_vertices();
        let k = self.n_joints();
        let bad = |m: String| Err(Error::InvalidModel(m));
        if n_v == 0 {
            return bad("model has no vertices".into());
        }
        for (name, len, expected) in [
            ("identity_basis", self.identity_basis.len(), n_v * 3 * self.n_beta),
            ("expression_basis", self.expression_basis.len(), n_v * 3 * self.n_psi),
            ("skinning_weights", self.skinning_weights.len(), n_v * k),
            ("albedo_mean", self.albedo_mean.len(), n_v),
            ("albedo_basis", self.albedo_basis.len(), n_v * 3 * self.n_alpha),
        ] {
            if len != expected {
                return bad(format!("{name} has {len} entries, expected {expected}"));
            }
        }
        if k == 0 || self.jaw_joint >= k {
            return bad(format!("jaw joint {} out of range for {k} joints", self.jaw_joint));
        }
        for (f, tri) in self.faces.iter().enumerate() {
            if tri.iter().any(|&i| i >= n_v) {
                return bad(format!("face {f} references a vertex >= {n_v}"));
            }
        }
        for v in 0..n_v {
            let row = &self.skinning_weights[v * k..(v + 1) * k];
            if row.iter().any(|&w| !(w >= 0.0)) || (row.iter().sum::<f64>() - 1.0).abs() > WEIGHT_TOL {
                return bad(format!("skinning weights of vertex {v} are not a convex combination"));
            }
        }
        for (i, lm) in self.landmarks.iter().enumerate() {
            if lm.triangle >= self.n_faces() {
                return bad(format!("landmark {i} references triangle {}", lm.triangle));
            }
            if lm.bary.iter().any(|&b| !(b >= 0.0)) || (lm.bary.iter().sum::<f64>() - 1.0).abs() > WEIGHT_TOL {
                return bad(format!("landmark {i} barycentric weights are invalid"));
            }
        }
        if let Some(uv) = &self.uv_coords {
            if uv.len() != n_v || uv.iter().flatten().any(|&x| !(0.0..=1.0).contains(&x)) {
                return bad("uv_coords must be n_v pairs in [0, 1]".into());
            }
        }
        if let Some(skin) = &self.skin_triangles {
            if skin.iter().any(|&t| t >= self.n_faces()) {
                return bad("skin triangle index out of range".into());
            }
        }
        if self.albedo_mean.iter().flatten().any(|&a| !(0.0..=1.0).contains(&a)) {
            return bad("albedo_mean must lie in [0, 1]".into());
        }
        for set in &self.keypoint_pairs {
            set.validate(self.landmarks.len())
                .map_err(|e| Error::InvalidModel(e.to_string()))?;
        }
        let flat = self
            .template_vertices
            .iter()
            .flatten()
            .chain(self.joint_positions.iter().flatten())
            .copied()
            .chain(self.identity_basis.iter().copied())
            .chain(self.expression_basis.iter().copied())
            .chain(self.albedo_basis.iter().copied())
            .collect::<Vec<_>>();
        ensure_finite("model arrays", &flat).map_err(|e| Error::InvalidModel(e.to_string()))
    }

    /// Check that `params` matches this model's dimensions and is finite.
    pub fn check_params(&self, params: &FaceParams) -> Result<()> {
        ensure_len("beta", &params.beta, self.n_beta)?;
        ensure_len("theta", &params.theta, self.theta_len())?;
        ensure_len("psi", &params.psi, self.n_psi)?;
        ensure_len("alpha", &params.alpha, self.n_alpha)?;
        ensure_len("lighting", &params.lighting, 27)?;
        for (name, v) in [
            ("beta", &params.beta[..]),
            ("theta", &params.theta[..]),
            ("psi", &params.psi[..]),
            ("alpha", &params.alpha[..]),
            ("lighting", &params.lighting[..]),
            ("camera", &params.camera[..]),
        ] {
            ensure_finite(name, v)?;
        }
        if params.camera[0] <= 0.0 {
            return Err(Error::Param(format!("camera scale must be positive, got {}", params.camera[0])));
        }
        Ok(())
    }

    /// Template plus identity and expression offsets, before skinning.
    fn shaped_rest(&self, beta: &[f64], psi: &[f64]) -> Vec<Vec3> {
        let (nb, np) = (self.n_beta, self.n_psi);
        self.template_vertices
            .iter()
            .enumerate()
            .map(|(v, t)| {
                let mut p = *t;
                for (c, pc) in p.iter_mut().enumerate() {
                    let row = v * 3 + c;
                    let id = &self.identity_basis[row * nb..(row + 1) * nb];
                    let ex = &self.expression_basis[row * np..(row + 1) * np];
                    *pc += id.iter().zip(beta).map(|(b, x)| b * x).sum::<f64>();
                    *pc += ex.iter().zip(psi).map(|(b, x)| b * x).sum::<f64>();
                }
                p
            })
            .collect()
    }

    /// Evaluate the posed mesh and keep what the backward pass needs.
    pub fn pose(&self, params: &FaceParams) -> Result<PosedMesh> {
        self.check_params(params)?;
        let rest = self.shaped_rest(&params.beta, &params.psi);
        let k = self.n_joints();
        let axis = |o: usize| [params.theta[o], params.theta[o + 1], params.theta[o + 2]];
        let global = linalg::rotation_with_jacobian(axis(0));
        let joints: Vec<_> = (0..k)
            .map(|j| linalg::rotation_with_jacobian(axis(3 + 3 * j)))
            .collect();
        let vertices = rest
            .iter()
            .enumerate()
            .map(|(v, &x)| {
                let mut local = x;
                for (j, (r, _)) in joints.iter().enumerate() {
                    let w = self.skinning_weights[v * k + j];
                    if w == 0.0 {
                        continue;
                    }
                    let offset = linalg::sub(x, self.joint_positions[j]);
                    let moved = linalg::sub(linalg::mat_vec(r, offset), offset);
                    local = linalg::add(local, linalg::scale(moved, w));
                }
                linalg::mat_vec(&global.0, local)
            })
            .collect::<Vec<_>>();
        let vertex_normals = vertex_normals(&vertices, &self.faces);
        Ok(PosedMesh {
            mesh: Mesh { vertices, faces: self.faces.clone(), vertex_normals },
            rest,
            global,
            joints,
        })
    }

    pub fn evaluate_mesh(&self, params: &FaceParams) -> Result<Mesh> {
        Ok(self.pose(params)?.mesh)
    }

    /// Pull a gradient on posed vertex positions back to `(beta, theta, psi)`.
    pub fn geometry_vjp(&self, posed: &PosedMesh, grad_vertices: &[Vec3]) -> GeometryGrads {
        let k = self.n_joints();
        let (nb, np) = (self.n_beta, self.n_psi);
        let mut out = GeometryGrads {
            beta: vec![0.0; nb],
            theta: vec![0.0; self.theta_len()],
            psi: vec![0.0; np],
        };
        let (rg, drg) = &posed.global;
        for (v, (&g, &x)) in grad_vertices.iter().zip(&posed.rest).enumerate() {
            if g == [0.0; 3] {
                continue;
            }
            // g pulled through the global rotation
            let gl = linalg::mat_t_vec(rg, g);
            let mut local = x;
            let mut grad_rest = gl;
            for (j, (r, dr)) in posed.joints.iter().enumerate() {
                let w = self.skinning_weights[v * k + j];
                if w == 0.0 {
                    continue;
                }
                let offset = linalg::sub(x, self.joint_positions[j]);
                local = linalg::add(local, linalg::scale(linalg::sub(linalg::mat_vec(r, offset), offset), w));
                grad_rest = linalg::add(grad_rest, linalg::scale(linalg::sub(linalg::mat_t_vec(r, gl), gl), w));
                for (i, dri) in dr.iter().enumerate() {
                    out.theta[3 + 3 * j + i] += w * linalg::dot(gl, linalg::mat_vec(dri, offset));
                }
            }
            for (i, dri) in drg.iter().enumerate() {
                out.theta[i] += linalg::dot(g, linalg::mat_vec(dri, local));
            }
            for (c, &gc) in grad_rest.iter().enumerate() {
                if gc == 0.0 {
                    continue;
                }
                let row = v * 3 + c;
                let id = &self.identity_basis[row * nb..(row + 1) * nb];
                out.beta.iter_mut().zip(id).for_each(|(o, b)| *o += gc * b);
                let ex = &self.expression_basis[row * np..(row + 1) * np];
                out.psi.iter_mut().zip(ex).for_each(|(o, b)| *o += gc * b);
            }
        }
        out
    }

    /// Per-vertex albedo `mean + basis * alpha`, clamped to `[0, 1]`.
    pub fn evaluate_albedo(&self, alpha: &[f64]) -> Result<Albedo> {
        ensure_len("alpha", alpha, self.n_alpha)?;
        ensure_finite("alpha", alpha)?;
        let na = self.n_alpha;
        let mut clamp_count = 0;
        let mut clamped = Vec::with_capacity(self.n_vertices());
        let colors = self
            .albedo_mean
            .iter()
            .enumerate()
            .map(|(v, mean)| {
                let mut flags = [false; 3];
                let mut out = *mean;
                for c in 0..3 {
                    let row = v * 3 + c;
                    let basis = &self.albedo_basis[row * na..(row + 1) * na];
                    let linear = mean[c] + basis.iter().zip(alpha).map(|(b, a)| b * a).sum::<f64>();
                    if !(0.0..=1.0).contains(&linear) {
                        flags[c] = true;
                        clamp_count += 1;
                    }
                    out[c] = linear.clamp(0.0, 1.0);
                }
                clamped.push(flags);
                out
            })
            .collect();
        if clamp_count > 0 {
            log::debug!("albedo clamped in {clamp_count} vertex channels");
        }
        Ok(Albedo { colors, clamped, clamp_count })
    }

    /// Gradient of a loss with respect to `alpha` given its gradient on the
    /// per-vertex albedo. Clamped channels contribute nothing.
    pub fn albedo_vjp(&self, albedo: &Albedo, grad_colors: &[Vec3]) -> Vec<f64> {
        let na = self.n_alpha;
        let mut out = vec![0.0; na];
        for (v, g) in grad_colors.iter().enumerate() {
            for c in 0..3 {
                if albedo.clamped[v][c] || g[c] == 0.0 {
                    continue;
                }
                let row = v * 3 + c;
                let basis = &self.albedo_basis[row * na..(row + 1) * na];
                out.iter_mut().zip(basis).for_each(|(o, b)| *o += g[c] * b);
            }
        }
        out
    }

    /// Landmark positions on the mesh surface.
    pub fn surface_landmarks(&self, mesh: &Mesh) -> Vec<Vec3> {
        self.landmarks
            .iter()
            .map(|lm| {
                let tri = mesh.faces[lm.triangle];
                let mut p = [0.0; 3];
                for (corner, &b) in tri.iter().zip(&lm.bary) {
                    p = linalg::add(p, linalg::scale(mesh.vertices[*corner], b));
                }
                p
            })
            .collect()
    }

    /// Scatter landmark gradients back onto vertices (accumulating into `grad_vertices`).
    pub fn landmarks_vjp(&self, grad_landmarks: &[Vec3], grad_vertices: &mut [Vec3]) {
        for (lm, g) in self.landmarks.iter().zip(grad_landmarks) {
            let tri = self.faces[lm.triangle];
            for (corner, &b) in tri.iter().zip(&lm.bary) {
                let gv = &mut grad_vertices[*corner];
                *gv = linalg::add(*gv, linalg::scale(*g, b));
            }
        }
    }
}

/// Area-weighted unit vertex normals.
///
/// Zero-area triangles contribute nothing; a vertex whose accumulated normal
/// vanishes gets `(0, 0, 1)`.
pub fn vertex_normals(vertices: &[Vec3], faces: &[[usize; 3]]) -> Vec<Vec3> {
    let acc = accumulate_face_normals(vertices, faces);
    let mut fallback = 0usize;
    let normals = acc
        .iter()
        .map(|&n| {
            let len = linalg::norm(n);
            if len > 0.0 {
                linalg::scale(n, 1.0 / len)
            } else {
                fallback += 1;
                [0.0, 0.0, 1.0]
            }
        })
        .collect();
    if fallback > 0 {
        warn!("{fallback} vertices have no area-weighted normal; using (0, 0, 1)");
    }
    normals
}

fn accumulate_face_normals(vertices: &[Vec3], faces: &[[usize; 3]]) -> Vec<Vec3> {
    let mut acc = vec![[0.0; 3]; vertices.len()];
    for &[a, b, c] in faces {
        let n = linalg::cross(
            linalg::sub(vertices[b], vertices[a]),
            linalg::sub(vertices[c], vertices[a]),
        );
        for i in [a, b, c] {
            acc[i] = linalg::add(acc[i], n);
        }
    }
    acc
}

/// Backward pass of [`vertex_normals`]: accumulate into `grad_vertices`.
pub fn vertex_normals_vjp(
    vertices: &[Vec3],
    faces: &[[usize; 3]],
    grad_normals: &[Vec3],
    grad_vertices: &mut [Vec3],
) {
    let acc = accumulate_face_normals(vertices, faces);
    // gradient on the unnormalized accumulated normal
    let grad_acc: Vec<Vec3> = acc
        .iter()
        .zip(grad_normals)
        .map(|(&n, &g)| {
            let len = linalg::norm(n);
            if len == 0.0 {
                return [0.0; 3];
            }
            let u = linalg::scale(n, 1.0 / len);
            linalg::scale(linalg::sub(g, linalg::scale(u, linalg::dot(u, g))), 1.0 / len)
        })
        .collect();
    for &[a, b, c] in faces {
        let g = linalg::add(linalg::add(grad_acc[a], grad_acc[b]), grad_acc[c]);
        if g == [0.0; 3] {
            continue;
        }
        let e1 = linalg::sub(vertices[b], vertices[a]);
        let e2 = linalg::sub(vertices[c], vertices[a]);
        // n = e1 x e2: dn/de1 applied transposed is e2 x g, dn/de2 is g x e1
        let ge1 = linalg::cross(e2, g);
        let ge2 = linalg::cross(g, e1);
        grad_vertices[b] = linalg::add(grad_vertices[b], ge1);
        grad_vertices[c] = linalg::add(grad_vertices[c], ge2);
        grad_vertices[a] = linalg::sub(grad_vertices[a], linalg::add(ge1, ge2));
    }
}
