//! Reverse-mode gradients of the shaded image at a fixed pixel-to-triangle
//! assignment. Visibility changes (silhouettes, occlusion boundaries) are not
//! differentiated.

use super::{pixel_albedo, pixel_normal, sh, Camera, RenderOutput, LIGHTING_LEN};
use crate::error::{Error, Result};
use crate::face_model::{vertex_normals_vjp, Mesh};
use crate::linalg::{self, Vec3};

#[derive(Debug, Clone, PartialEq)]
pub struct RenderGrads {
    pub vertices: Vec<Vec3>,
    pub albedo: Vec<Vec3>,
    pub lighting: Vec<f64>,
    pub scale: f64,
    pub translation: [f64; 2],
}

impl RenderGrads {
    pub fn zeros(n_vertices: usize) -> Self {
        RenderGrads {
            vertices: vec![[0.0; 3]; n_vertices],
            albedo: vec![[0.0; 3]; n_vertices],
            lighting: vec![0.0; LIGHTING_LEN],
            scale: 0.0,
            translation: [0.0; 2],
        }
    }
}

/// Partials of `edge(a, b, p)` with respect to `a`, `b` and `p`.
fn edge_grads(a: [f64; 2], b: [f64; 2], p: [f64; 2]) -> [[f64; 2]; 3] {
    [
        [b[1] - p[1], p[0] - b[0]],
        [p[1] - a[1], -(p[0] - a[0])],
        [-(b[1] - a[1]), b[0] - a[0]],
    ]
}

fn edge(a: [f64; 2], b: [f64; 2], p: [f64; 2]) -> f64 {
    (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0])
}

/// Vector-Jacobian product of `render.linear` with `upstream` (`h x w x 3`).
pub fn render_gradients(
    mesh: &Mesh,
    camera: &Camera,
    albedo: &[Vec3],
    lighting: &[f64],
    render: &RenderOutput,
    upstream: &[f64],
) -> Result<RenderGrads> {
    let (w, h) = (camera.width, camera.height);
    if render.width != w || render.height != h || render.attrib.len() != w * h {
        return Err(Error::Contract("render output does not carry pixel attribution for this camera".into()));
    }
    if upstream.len() != w * h * 3 {
        return Err(Error::Param(format!("upstream has {} values, expected {}", upstream.len(), w * h * 3)));
    }
    let n_v = mesh.vertices.len();
    let mut grads = RenderGrads::zeros(n_v);
    let mut grad_normals = vec![[0.0; 3]; n_v];
    // gradient on pixel-space vertex positions
    let mut grad_screen = vec![[0.0; 2]; n_v];
    let screen: Vec<[f64; 2]> = mesh.vertices.iter().map(|&v| camera.to_pixel(v)).collect();

    for (pix, pa) in render.attrib.iter().enumerate() {
        let Some(pa) = pa else { continue };
        let g = [upstream[pix * 3], upstream[pix * 3 + 1], upstream[pix * 3 + 2]];
        if g == [0.0; 3] {
            continue;
        }
        let face = mesh.faces[pa.triangle];
        let (_, n_unit, n_len) = pixel_normal(mesh, pa);
        let a = pixel_albedo(face, pa.bary, albedo);
        let basis = sh::sh_basis(n_unit);
        let irr = sh::shade(lighting, n_unit);

        let mut grad_bary = [0.0; 3];
        // albedo path
        for (slot, &vi) in face.iter().enumerate() {
            for c in 0..3 {
                let ga = g[c] * irr[c];
                grads.albedo[vi][c] += pa.bary[slot] * ga;
                grad_bary[slot] += ga * albedo[vi][c];
            }
        }
        // lighting and normal path
        let basis_grad = sh::sh_basis_grad(n_unit);
        let mut grad_unit = [0.0; 3];
        for band in 0..sh::SH_BANDS {
            for c in 0..3 {
                let gi = g[c] * a[c];
                grads.lighting[band * 3 + c] += gi * basis[band];
                let coeff = gi * lighting[band * 3 + c];
                grad_unit = linalg::add(grad_unit, linalg::scale(basis_grad[band], coeff));
            }
        }
        if n_len > 0.0 {
            let grad_raw = linalg::scale(
                linalg::sub(grad_unit, linalg::scale(n_unit, linalg::dot(n_unit, grad_unit))),
                1.0 / n_len,
            );
            for (slot, &vi) in face.iter().enumerate() {
                grad_normals[vi] = linalg::add(grad_normals[vi], linalg::scale(grad_raw, pa.bary[slot]));
                grad_bary[slot] += linalg::dot(mesh.vertex_normals[vi], grad_raw);
            }
        }

        // barycentrics b_i = e_i / A with e_0 = edge(v1, v2, p), e_1 = edge(v2, v0, p),
        // e_2 = edge(v0, v1, p) and A = edge(v0, v1, v2)
        let v = face.map(|i| screen[i]);
        let p = [(pix % w) as f64 + 0.5, (pix / w) as f64 + 0.5];
        let area = edge(v[0], v[1], v[2]);
        let grad_area = -(0..3).map(|i| grad_bary[i] * pa.bary[i]).sum::<f64>() / area;
        let mut gv = [[0.0; 2]; 3];
        for (slot, (ia, ib)) in [(1usize, 2usize), (2, 0), (0, 1)].into_iter().enumerate() {
            let ge = grad_bary[slot] / area;
            let d = edge_grads(v[ia], v[ib], p);
            for k in 0..2 {
                gv[ia][k] += ge * d[0][k];
                gv[ib][k] += ge * d[1][k];
            }
        }
        let d = edge_grads(v[0], v[1], v[2]);
        for (slot, ds) in d.iter().enumerate() {
            for k in 0..2 {
                gv[slot][k] += grad_area * ds[k];
            }
        }
        for (slot, &vi) in face.iter().enumerate() {
            grad_screen[vi][0] += gv[slot][0];
            grad_screen[vi][1] += gv[slot][1];
        }
    }

    let (half_w, half_h) = (w as f64 * 0.5, h as f64 * 0.5);
    let s = camera.scale;
    for (vi, gs) in grad_screen.iter().enumerate() {
        if *gs == [0.0; 2] {
            continue;
        }
        let x = mesh.vertices[vi];
        // px = (s x + tx + 1) w/2, py = (1 - s y - ty) h/2
        grads.vertices[vi][0] += gs[0] * s * half_w;
        grads.vertices[vi][1] -= gs[1] * s * half_h;
        grads.scale += gs[0] * x[0] * half_w - gs[1] * x[1] * half_h;
        grads.translation[0] += gs[0] * half_w;
        grads.translation[1] -= gs[1] * half_h;
    }
    vertex_normals_vjp(&mesh.vertices, &mesh.faces, &grad_normals, &mut grads.vertices);
    Ok(grads)
}
