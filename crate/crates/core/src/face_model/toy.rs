//! Procedural stand-in for a licensed face model asset.
//!
//! The surface is a shallow paraboloid height field on a regular grid, facing
//! the camera along `-z`. Two joints drive it: a neck joint and a jaw joint
//! whose skinning weight ramps in below the mouth line. Blendshape bases are
//! smooth Gaussian bumps; the albedo mean darkens eye and mouth regions so
//! that expression changes are visible in renders.

use rand::Rng as _;

use super::{FaceModel, LandmarkEmbedding};
use crate::error::{Error, Result};
use crate::linalg::{self, Vec3};
use crate::losses::{KeypointPairSet, PairRole};
use crate::rng::{substream, Rng};

pub const NECK_JOINT: usize = 0;
pub const JAW_JOINT: usize = 1;

const EYE_Y: f64 = 0.3;
const MOUTH_Y: f64 = -0.45;
const HALF_WIDTH: f64 = 0.8;

#[derive(Debug, Clone, PartialEq)]
pub struct ToyModelConfig {
    pub seed: u64,
    pub n_vertices: usize,
    /// Keep only the first `n` triangles of the grid triangulation; `None` keeps all.
    pub n_faces: Option<usize>,
    pub n_beta: usize,
    pub n_psi: usize,
    pub n_alpha: usize,
    pub eye_pairs: usize,
    pub mouth_pairs: usize,
    pub lip_corner_pairs: usize,
}

impl Default for ToyModelConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            n_vertices: 512,
            n_faces: None,
            n_beta: 10,
            n_psi: 10,
            n_alpha: 5,
            eye_pairs: 4,
            mouth_pairs: 3,
            lip_corner_pairs: 1,
        }
    }
}

struct Grid {
    cols: usize,
    rows: usize,
}

impl Grid {
    fn new(n_v: usize) -> Self {
        let cols = (n_v as f64).sqrt().ceil() as usize;
        let rows = n_v.div_ceil(cols);
        Grid { cols, rows }
    }

    fn xy(&self, i: usize) -> (f64, f64) {
        let (r, c) = (i / self.cols, i % self.cols);
        let x = -HALF_WIDTH + 2.0 * HALF_WIDTH * c as f64 / (self.cols - 1) as f64;
        let y = 1.0 - 2.0 * r as f64 / (self.rows - 1) as f64;
        (x, y)
    }

    fn triangles(&self, n_v: usize) -> Vec<[usize; 3]> {
        let mut out = Vec::new();
        for r in 0..self.rows - 1 {
            for c in 0..self.cols - 1 {
                let a = r * self.cols + c;
                let (b, d, e) = (a + 1, a + self.cols, a + self.cols + 1);
                if e < n_v {
                    out.push([a, b, d]);
                    out.push([b, e, d]);
                } else if d < n_v {
                    out.push([a, b, d]);
                }
            }
        }
        out
    }
}

fn bump(center: (f64, f64), radius: f64, x: f64, y: f64) -> f64 {
    let d2 = (x - center.0).powi(2) + (y - center.1).powi(2);
    (-d2 / (2.0 * radius * radius)).exp()
}

fn unit_direction(rng: &mut Rng, z_scale: f64) -> Vec3 {
    loop {
        let d = [
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            z_scale * rng.random_range(-1.0..1.0),
        ];
        let n = linalg::norm(d);
        if n > 0.1 {
            return linalg::scale(d, 1.0 / n);
        }
    }
}

/// `n_components` smooth bump fields, row-major `n_v x 3 x n_components`.
fn bump_basis(
    rng: &mut Rng,
    xy: &[(f64, f64)],
    n_components: usize,
    radius: f64,
    amplitude: f64,
    centers: &dyn Fn(&mut Rng, usize) -> (f64, f64),
) -> Vec<f64> {
    let n_v = xy.len();
    let mut basis = vec![0.0; n_v * 3 * n_components];
    for k in 0..n_components {
        let center = centers(rng, k);
        let dir = unit_direction(rng, 0.6);
        for (v, &(x, y)) in xy.iter().enumerate() {
            let w = amplitude * bump(center, radius, x, y);
            for c in 0..3 {
                basis[(v * 3 + c) * n_components + k] = w * dir[c];
            }
        }
    }
    basis
}

fn locate(vertices: &[Vec3], faces: &[[usize; 3]], p: (f64, f64)) -> LandmarkEmbedding {
    let mut best = (f64::INFINITY, 0usize);
    for (t, tri) in faces.iter().enumerate() {
        let [a, b, c] = tri.map(|i| (vertices[i][0], vertices[i][1]));
        let det = (b.0 - a.0) * (c.1 - a.1) - (c.0 - a.0) * (b.1 - a.1);
        if det.abs() < 1e-15 {
            continue;
        }
        let l1 = ((p.0 - a.0) * (c.1 - a.1) - (c.0 - a.0) * (p.1 - a.1)) / det;
        let l2 = ((b.0 - a.0) * (p.1 - a.1) - (p.0 - a.0) * (b.1 - a.1)) / det;
        let l0 = 1.0 - l1 - l2;
        if l0 >= 0.0 && l1 >= 0.0 && l2 >= 0.0 {
            return LandmarkEmbedding { triangle: t, bary: [l0, l1, l2] };
        }
        let cx = (a.0 + b.0 + c.0) / 3.0 - p.0;
        let cy = (a.1 + b.1 + c.1) / 3.0 - p.1;
        let d2 = cx * cx + cy * cy;
        if d2 < best.0 {
            best = (d2, t);
        }
    }
    LandmarkEmbedding { triangle: best.1, bary: [1.0 / 3.0; 3] }
}

/// Deterministic desk-scale face model.
pub fn make_toy_model(config: &ToyModelConfig) -> Result<FaceModel> {
    let n_v = config.n_vertices;
    if n_v < 4 {
        return Err(Error::Param(format!("toy model needs at least 4 vertices, got {n_v}")));
    }
    let grid = Grid::new(n_v);
    let mut faces = grid.triangles(n_v);
    if let Some(n_f) = config.n_faces {
        if n_f == 0 || n_f > faces.len() {
            return Err(Error::Param(format!(
                "requested {n_f} faces but a {n_v}-vertex grid has {}",
                faces.len()
            )));
        }
        faces.truncate(n_f);
    }
    let mut rng = substream(config.seed, "toy-model");
    let xy: Vec<(f64, f64)> = (0..n_v).map(|i| grid.xy(i)).collect();

    let template_vertices: Vec<Vec3> = xy
        .iter()
        .map(|&(x, y)| {
            let jitter = 0.01 * rng.random_range(-1.0..1.0);
            [x, y, 0.35 * (x * x + y * y) - 0.6 + jitter]
        })
        .collect();

    let identity_basis = bump_basis(&mut rng, &xy, config.n_beta, 0.5, 0.08, &|r, _| {
        (r.random_range(-HALF_WIDTH..HALF_WIDTH), r.random_range(-1.0..1.0))
    });
    // expression bumps cluster around the eyes and the mouth
    let expression_basis = bump_basis(&mut rng, &xy, config.n_psi, 0.28, 0.08, &|r, k| {
        let anchor = match k % 3 {
            0 => (0.0, MOUTH_Y),
            1 => (-0.35, EYE_Y),
            _ => (0.35, EYE_Y),
        };
        (anchor.0 + r.random_range(-0.25..0.25), anchor.1 + r.random_range(-0.2..0.2))
    });

    let joint_positions = vec![[0.0, -1.2, 0.2], [0.0, 0.0, 0.3]];
    let k = joint_positions.len();
    let mut skinning_weights = vec![0.0; n_v * k];
    for (v, &(_, y)) in xy.iter().enumerate() {
        // smoothstep from y = -0.1 (neck only) to y = -0.35 (jaw only)
        let s = ((-0.1 - y) / 0.25).clamp(0.0, 1.0);
        let w = s * s * (3.0 - 2.0 * s);
        skinning_weights[v * k + JAW_JOINT] = w;
        skinning_weights[v * k + NECK_JOINT] = 1.0 - w;
    }

    let skin = [0.78, 0.57, 0.47];
    let albedo_mean: Vec<Vec3> = xy
        .iter()
        .map(|&(x, y)| {
            let eyes = bump((-0.35, EYE_Y), 0.1, x, y) + bump((0.35, EYE_Y), 0.1, x, y);
            let mouth = bump((0.0, MOUTH_Y), 0.12, x * 0.5, y);
            let brows = bump((-0.35, EYE_Y + 0.2), 0.07, x, y) + bump((0.35, EYE_Y + 0.2), 0.07, x, y);
            let mut a = skin;
            for (c, ac) in a.iter_mut().enumerate() {
                let lip_tint = [0.05, -0.25, -0.2][c];
                *ac = (*ac * (1.0 - 0.7 * eyes.min(1.0)) * (1.0 - 0.5 * brows.min(1.0))
                    + lip_tint * mouth)
                    .clamp(0.02, 0.98);
            }
            a
        })
        .collect();
    let albedo_basis = bump_basis(&mut rng, &xy, config.n_alpha, 0.6, 0.05, &|r, _| {
        (r.random_range(-HALF_WIDTH..HALF_WIDTH), r.random_range(-1.0..1.0))
    });

    let uv_coords = Some(
        xy.iter()
            .map(|&(x, y)| [(x + HALF_WIDTH) / (2.0 * HALF_WIDTH), (1.0 - y) / 2.0])
            .collect(),
    );

    // keypoint pairs: (upper, lower) or (left, right)
    let mut landmarks = Vec::new();
    let mut push_pair = |a: (f64, f64), b: (f64, f64)| {
        let i = landmarks.len();
        landmarks.push(locate(&template_vertices, &faces, a));
        landmarks.push(locate(&template_vertices, &faces, b));
        (i, i + 1)
    };
    let spread = |i: usize, n: usize, width: f64| {
        if n <= 1 {
            0.0
        } else {
            -width + 2.0 * width * i as f64 / (n - 1) as f64
        }
    };
    let mut eye = Vec::new();
    for p in 0..config.eye_pairs {
        let side = if p % 2 == 0 { -0.35 } else { 0.35 };
        let per_side = config.eye_pairs.div_ceil(2);
        let x = side + spread(p / 2, per_side, 0.08);
        eye.push(push_pair((x, EYE_Y + 0.05), (x, EYE_Y - 0.05)));
    }
    let mut mouth = Vec::new();
    for p in 0..config.mouth_pairs {
        let x = spread(p, config.mouth_pairs, 0.15);
        mouth.push(push_pair((x, MOUTH_Y + 0.06), (x, MOUTH_Y - 0.06)));
    }
    let mut corners = Vec::new();
    for p in 0..config.lip_corner_pairs {
        let dy = spread(p, config.lip_corner_pairs, 0.03);
        corners.push(push_pair((-0.3, MOUTH_Y + dy), (0.3, MOUTH_Y + dy)));
    }
    let keypoint_pairs = vec![
        KeypointPairSet { role: PairRole::EyeClosure, pairs: eye },
        KeypointPairSet { role: PairRole::MouthClosure, pairs: mouth },
        KeypointPairSet { role: PairRole::LipCorner, pairs: corners },
    ];

    let model = FaceModel {
        template_vertices,
        faces,
        identity_basis,
        n_beta: config.n_beta,
        expression_basis,
        n_psi: config.n_psi,
        joint_positions,
        skinning_weights,
        jaw_joint: JAW_JOINT,
        albedo_mean,
        albedo_basis,
        n_alpha: config.n_alpha,
        landmarks,
        uv_coords,
        skin_triangles: None,
        keypoint_pairs,
    };
    model.validate()?;
    Ok(model)
}
