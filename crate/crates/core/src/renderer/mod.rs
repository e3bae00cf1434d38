//! Orthographic rasterizer with SH-lit Lambertian shading.
//!
//! Conventions:
//! - camera-plane coordinates are `s * (x, y) + t`; pixel coordinates map the
//!   camera plane `[-1, 1]^2` onto the image with y pointing down:
//!   `px = (u + 1) * w / 2`, `py = (1 - v) * h / 2`;
//! - pixel `(i, j)` is sampled at its center `(i + 0.5, j + 0.5)`;
//! - smaller z is nearer; equal depth goes to the lower triangle index;
//! - a sample on a shared edge belongs to the triangle for which that edge
//!   is a top or left edge;
//! - no back-face culling.

mod backward;
mod image_io;
mod sh;

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::face_model::Mesh;
use crate::linalg::{self, Vec3};

pub use backward::{render_gradients, RenderGrads};
pub use image_io::{load_image, write_mask_pgm, write_png, write_ppm, Image};
pub use sh::{sh_basis, sh_basis_grad, sh_irradiance, LIGHTING_LEN, SH_BANDS};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Camera {
    pub scale: f64,
    pub translation: [f64; 2],
    pub width: usize,
    pub height: usize,
}

impl Camera {
    pub fn new(params: [f64; 3], width: usize, height: usize) -> Result<Self> {
        let cam = Camera { scale: params[0], translation: [params[1], params[2]], width, height };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0) || !self.scale.is_finite() {
            return Err(Error::Param(format!("camera scale must be positive, got {}", self.scale)));
        }
        if self.translation.iter().any(|t| !t.is_finite()) {
            return Err(Error::Numeric("camera translation is not finite".into()));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::Param(format!(
                "image size must be at least 1x1, got {}x{}",
                self.width, self.height
            )));
        }
        Ok(())
    }

    /// Orthographic projection onto the camera plane.
    pub fn project_point(&self, p: Vec3) -> [f64; 2] {
        [self.scale * p[0] + self.translation[0], self.scale * p[1] + self.translation[1]]
    }

    pub fn plane_to_pixel(&self, q: [f64; 2]) -> [f64; 2] {
        let (w, h) = (self.width as f64, self.height as f64);
        [(q[0] + 1.0) * w * 0.5, (1.0 - q[1]) * h * 0.5]
    }

    pub fn to_pixel(&self, p: Vec3) -> [f64; 2] {
        self.plane_to_pixel(self.project_point(p))
    }
}

/// `s * Pi(p) + t` for every point.
pub fn project(camera: &Camera, points: &[Vec3]) -> Vec<[f64; 2]> {
    points.iter().map(|&p| camera.project_point(p)).collect()
}

pub fn project_to_pixels(camera: &Camera, points: &[Vec3]) -> Vec<[f64; 2]> {
    points.iter().map(|&p| camera.to_pixel(p)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelAttrib {
    pub triangle: usize,
    /// Weights of the triangle's vertices in face order.
    pub bary: [f64; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderOutput {
    pub width: usize,
    pub height: usize,
    /// Shaded color before clamping, `h x w x 3` row-major. Losses read this.
    pub linear: Vec<f64>,
    /// `linear` clamped to `[0, 1]`.
    pub image: Vec<f64>,
    /// Face-skin coverage.
    pub mask: Vec<bool>,
    /// Front-most triangle per pixel, for every covered pixel.
    pub attrib: Vec<Option<PixelAttrib>>,
}

impl RenderOutput {
    pub fn mask_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn to_image(&self) -> Image {
        Image { width: self.width, height: self.height, data: self.image.clone() }
    }

    pub fn linear_image(&self) -> Image {
        Image { width: self.width, height: self.height, data: self.linear.clone() }
    }
}

#[derive(Debug, Clone, Default)]
pub struct RasterOptions {
    /// Triangles counted in the mask; `None` counts every triangle.
    pub skin_triangles: Option<Vec<usize>>,
    pub exec: Exec,
}

/// Screen-space triangle ready for scan conversion.
struct ScreenTri {
    index: usize,
    /// Vertices reordered so the signed area is positive.
    pts: [[f64; 2]; 3],
    z: [f64; 3],
    /// Maps reordered slot to original face corner.
    order: [usize; 3],
    area: f64,
    top_left: [bool; 3],
    y_range: (usize, usize),
    x_range: (usize, usize),
}

fn edge(a: [f64; 2], b: [f64; 2], p: [f64; 2]) -> f64 {
    (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0])
}

fn is_top_left(a: [f64; 2], b: [f64; 2]) -> bool {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    dy < 0.0 || (dy == 0.0 && dx > 0.0)
}

fn setup_triangles(mesh: &Mesh, camera: &Camera) -> Vec<ScreenTri> {
    let screen: Vec<[f64; 2]> = mesh.vertices.iter().map(|&v| camera.to_pixel(v)).collect();
    let (w, h) = (camera.width as f64, camera.height as f64);
    let mut out = Vec::with_capacity(mesh.faces.len());
    for (index, face) in mesh.faces.iter().enumerate() {
        let mut order = [0usize, 1, 2];
        let mut pts = face.map(|i| screen[i]);
        let mut area = edge(pts[0], pts[1], pts[2]);
        if !area.is_finite() || area == 0.0 {
            continue;
        }
        if area < 0.0 {
            pts.swap(1, 2);
            order.swap(1, 2);
            area = -area;
        }
        let z = order.map(|o| mesh.vertices[face[o]][2]);
        let min_x = pts.iter().map(|p| p[0]).fold(f64::INFINITY, f64::min);
        let max_x = pts.iter().map(|p| p[0]).fold(f64::NEG_INFINITY, f64::max);
        let min_y = pts.iter().map(|p| p[1]).fold(f64::INFINITY, f64::min);
        let max_y = pts.iter().map(|p| p[1]).fold(f64::NEG_INFINITY, f64::max);
        if max_x < 0.0 || max_y < 0.0 || min_x > w || min_y > h {
            continue;
        }
        // pixel centers c + 0.5 inside [min, max]
        let lo = |m: f64| (m - 0.5).ceil().max(0.0) as usize;
        let hi = |m: f64, n: f64| ((m - 0.5).floor().min(n - 1.0)).max(-1.0);
        let (x_hi, y_hi) = (hi(max_x, w), hi(max_y, h));
        if x_hi < 0.0 || y_hi < 0.0 {
            continue;
        }
        let x_range = (lo(min_x), x_hi as usize + 1);
        let y_range = (lo(min_y), y_hi as usize + 1);
        if x_range.0 >= x_range.1 || y_range.0 >= y_range.1 {
            continue;
        }
        let top_left = [
            is_top_left(pts[1], pts[2]),
            is_top_left(pts[2], pts[0]),
            is_top_left(pts[0], pts[1]),
        ];
        out.push(ScreenTri { index, pts, z, order, area, top_left, y_range, x_range });
    }
    out
}

/// Visibility pass: front-most triangle and barycentrics per pixel.
pub fn visibility(mesh: &Mesh, camera: &Camera, exec: Exec) -> Result<Vec<Option<PixelAttrib>>> {
    camera.validate()?;
    let (w, h) = (camera.width, camera.height);
    let tris = setup_triangles(mesh, camera);
    let mut rows: Vec<Vec<usize>> = vec![Vec::new(); h];
    for (t, tri) in tris.iter().enumerate() {
        for row in &mut rows[tri.y_range.0..tri.y_range.1] {
            row.push(t);
        }
    }
    let mut attrib: Vec<Option<PixelAttrib>> = vec![None; w * h];
    exec.for_each_chunk(&mut attrib, w, |y, row_out| {
        let mut depth = vec![f64::INFINITY; w];
        let py = y as f64 + 0.5;
        for &t in &rows[y] {
            let tri = &tris[t];
            for x in tri.x_range.0..tri.x_range.1 {
                let p = [x as f64 + 0.5, py];
                let e = [
                    edge(tri.pts[1], tri.pts[2], p),
                    edge(tri.pts[2], tri.pts[0], p),
                    edge(tri.pts[0], tri.pts[1], p),
                ];
                let inside = e
                    .iter()
                    .zip(&tri.top_left)
                    .all(|(&ei, &tl)| ei > 0.0 || (ei == 0.0 && tl));
                if !inside {
                    continue;
                }
                let b = e.map(|ei| ei / tri.area);
                let z = b[0] * tri.z[0] + b[1] * tri.z[1] + b[2] * tri.z[2];
                let current = &mut row_out[x];
                let wins = match current {
                    None => true,
                    Some(prev) => z < depth[x] || (z == depth[x] && tri.index < prev.triangle),
                };
                if wins {
                    let mut bary = [0.0; 3];
                    for slot in 0..3 {
                        bary[tri.order[slot]] = b[slot];
                    }
                    depth[x] = z;
                    *current = Some(PixelAttrib { triangle: tri.index, bary });
                }
            }
        }
    });
    Ok(attrib)
}

/// Interpolated, renormalized shading normal at a pixel.
pub(crate) fn pixel_normal(mesh: &Mesh, pa: &PixelAttrib) -> (Vec3, Vec3, f64) {
    let face = mesh.faces[pa.triangle];
    let mut n = [0.0; 3];
    for (corner, &b) in face.iter().zip(&pa.bary) {
        n = linalg::add(n, linalg::scale(mesh.vertex_normals[*corner], b));
    }
    let len = linalg::norm(n);
    let unit = if len > 0.0 { linalg::scale(n, 1.0 / len) } else { [0.0, 0.0, 1.0] };
    (n, unit, len)
}

pub(crate) fn pixel_albedo(face: [usize; 3], bary: [f64; 3], albedo: &[Vec3]) -> Vec3 {
    let mut a = [0.0; 3];
    for (corner, &b) in face.iter().zip(&bary) {
        a = linalg::add(a, linalg::scale(albedo[*corner], b));
    }
    a
}

/// Render a mesh with per-vertex albedo under SH lighting.
pub fn rasterize(
    mesh: &Mesh,
    camera: &Camera,
    albedo: &[Vec3],
    lighting: &[f64],
    options: &RasterOptions,
) -> Result<RenderOutput> {
    if albedo.len() != mesh.vertices.len() {
        return Err(Error::Param(format!(
            "albedo has {} entries for {} vertices",
            albedo.len(),
            mesh.vertices.len()
        )));
    }
    if lighting.len() != LIGHTING_LEN {
        return Err(Error::Param(format!("lighting must have {LIGHTING_LEN} coefficients")));
    }
    let attrib = visibility(mesh, camera, options.exec)?;
    let (w, h) = (camera.width, camera.height);
    let skin: Option<Vec<bool>> = options.skin_triangles.as_ref().map(|list| {
        let mut flags = vec![false; mesh.faces.len()];
        for &t in list {
            if let Some(f) = flags.get_mut(t) {
                *f = true;
            }
        }
        flags
    });

    let mut linear = vec![0.0; w * h * 3];
    options.exec.for_each_chunk(&mut linear, w * 3, |y, row| {
        for x in 0..w {
            if let Some(pa) = &attrib[y * w + x] {
                let (_, n, _) = pixel_normal(mesh, pa);
                let a = pixel_albedo(mesh.faces[pa.triangle], pa.bary, albedo);
                let irr = sh::shade(lighting, n);
                for c in 0..3 {
                    row[x * 3 + c] = a[c] * irr[c];
                }
            }
        }
    });
    if let Some(i) = linear.iter().position(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("render produced a non-finite value at {i}")));
    }
    let mask = attrib
        .iter()
        .map(|pa| match (pa, &skin) {
            (None, _) => false,
            (Some(_), None) => true,
            (Some(pa), Some(flags)) => flags[pa.triangle],
        })
        .collect();
    let image = linear.iter().map(|v| v.clamp(0.0, 1.0)).collect();
    Ok(RenderOutput { width: w, height: h, linear, image, mask, attrib })
}

#[cfg(test)]
mod tests;
