use proptest::prelude::*;
use rand::Rng as _;

use super::*;
use crate::face_model::{make_toy_model, vertex_normals, FaceModel, FaceParams, ToyModelConfig};
use crate::rng::substream;

fn mesh_from(vertices: Vec<Vec3>, faces: Vec<[usize; 3]>) -> Mesh {
    let vertex_normals = vertex_normals(&vertices, &faces);
    Mesh { vertices, faces, vertex_normals }
}

fn flat_lighting(level: f64) -> Vec<f64> {
    let mut l = vec![0.0; LIGHTING_LEN];
    l[..3].fill(level);
    l
}

fn opts(exec: Exec) -> RasterOptions {
    RasterOptions { skin_triangles: None, exec }
}

fn inside_oracle(a: [f64; 2], b: [f64; 2], c: [f64; 2], p: [f64; 2]) -> bool {
    let cross = |o: [f64; 2], u: [f64; 2], q: [f64; 2]| (u[0] - o[0]) * (q[1] - o[1]) - (u[1] - o[1]) * (q[0] - o[0]);
    let (d1, d2, d3) = (cross(a, b, p), cross(b, c, p), cross(c, a, p));
    (d1 > 0.0 && d2 > 0.0 && d3 > 0.0) || (d1 < 0.0 && d2 < 0.0 && d3 < 0.0)
}

#[test]
fn projection_cases() {
    let cam = Camera::new([1.0, 0.0, 0.0], 8, 8).unwrap();
    assert_eq!(cam.project_point([0.5, -0.25, 7.0]), [0.5, -0.25]);
    let cam = Camera::new([2.0, 1.0, 1.0], 8, 8).unwrap();
    assert_eq!(cam.project_point([1.0, 0.0, -3.0]), [3.0, 1.0]);
    assert_eq!(Camera::new([1.0, 0.0, 0.0], 4, 2).unwrap().plane_to_pixel([-1.0, 1.0]), [0.0, 0.0]);
    assert!(Camera::new([0.0, 0.0, 0.0], 8, 8).is_err());
    assert!(Camera::new([1.0, 0.0, 0.0], 0, 8).is_err());
}

proptest! {
    #[test]
    fn projected_offsets_scale_with_s(
        s in 0.1f64..5.0, tx in -3.0f64..3.0, ty in -3.0f64..3.0,
        pts in proptest::collection::vec((-2.0f64..2.0, -2.0f64..2.0, -2.0f64..2.0), 2..12),
    ) {
        let cam = Camera::new([s, tx, ty], 16, 16).unwrap();
        let pts: Vec<Vec3> = pts.into_iter().map(|(x, y, z)| [x, y, z]).collect();
        let q = project(&cam, &pts);
        for i in 0..pts.len() {
            for j in 0..pts.len() {
                for k in 0..2 {
                    let want = s * (pts[i][k] - pts[j][k]);
                    prop_assert!(((q[i][k] - q[j][k]) - want).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn single_triangle_coverage_matches_scan() {
    let mesh = mesh_from(vec![[-0.71, -0.63, 0.0], [0.83, -0.41, 0.0], [0.07, 0.77, 0.0]], vec![[0, 1, 2]]);
    let cam = Camera::new([1.0, 0.0, 0.0], 37, 29).unwrap();
    let albedo = vec![[0.5; 3]; 3];
    let out = rasterize(&mesh, &cam, &albedo, &flat_lighting(1.0), &opts(Exec::Sequential)).unwrap();
    let px = project_to_pixels(&cam, &mesh.vertices);
    let mut covered = 0;
    for y in 0..cam.height {
        for x in 0..cam.width {
            let want = inside_oracle(px[0], px[1], px[2], [x as f64 + 0.5, y as f64 + 0.5]);
            assert_eq!(out.mask[y * cam.width + x], want, "pixel ({x}, {y})");
            assert_eq!(out.attrib[y * cam.width + x].is_some(), want);
            covered += want as usize;
        }
    }
    assert!(covered > 100);
    assert_eq!(out.mask_count(), covered);
}

#[test]
fn empty_mesh_renders_black() {
    let mesh = mesh_from(vec![], vec![]);
    let cam = Camera::new([1.0, 0.0, 0.0], 9, 7).unwrap();
    let out = rasterize(&mesh, &cam, &[], &flat_lighting(1.0), &opts(Exec::default())).unwrap();
    assert!(out.mask.iter().all(|m| !m));
    assert!(out.image.iter().all(|&v| v == 0.0));
}

#[test]
fn nearer_triangle_wins() {
    // two overlapping triangles, the second one nearer on its left half
    let vertices = vec![
        [-0.9, -0.8, 0.5],
        [0.8, -0.7, 0.5],
        [-0.1, 0.9, 0.5],
        [-0.7, -0.9, 0.9],
        [0.9, 0.1, -0.3],
        [-0.8, 0.6, 0.9],
    ];
    let mesh = mesh_from(vertices.clone(), vec![[0, 1, 2], [3, 4, 5]]);
    let cam = Camera::new([1.0, 0.0, 0.0], 40, 40).unwrap();
    let albedo = vec![[0.5; 3]; 6];
    let out = rasterize(&mesh, &cam, &albedo, &flat_lighting(1.0), &opts(Exec::default())).unwrap();
    let px = project_to_pixels(&cam, &vertices);
    let depth = |t: usize, p: [f64; 2]| {
        // plane through the triangle's pixel-space vertices
        let (a, b, c) = (px[3 * t], px[3 * t + 1], px[3 * t + 2]);
        let area = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0]);
        let wa = ((b[0] - p[0]) * (c[1] - p[1]) - (b[1] - p[1]) * (c[0] - p[0])) / area;
        let wb = ((c[0] - p[0]) * (a[1] - p[1]) - (c[1] - p[1]) * (a[0] - p[0])) / area;
        let wc = 1.0 - wa - wb;
        wa * vertices[3 * t][2] + wb * vertices[3 * t + 1][2] + wc * vertices[3 * t + 2][2]
    };
    let mut contested = 0;
    for y in 0..40 {
        for x in 0..40 {
            let p = [x as f64 + 0.5, y as f64 + 0.5];
            let in0 = inside_oracle(px[0], px[1], px[2], p);
            let in1 = inside_oracle(px[3], px[4], px[5], p);
            if in0 && in1 {
                contested += 1;
                let want = if depth(1, p) < depth(0, p) { 1 } else { 0 };
                assert_eq!(out.attrib[y * 40 + x].unwrap().triangle, want, "pixel ({x}, {y})");
            }
        }
    }
    assert!(contested > 50);
}

#[test]
fn equal_depth_goes_to_lower_index() {
    let v = vec![[-0.9, -0.9, 0.2], [0.9, -0.9, 0.2], [0.0, 0.9, 0.2]];
    let mut vertices = v.clone();
    vertices.extend(v);
    let mesh = mesh_from(vertices, vec![[3, 4, 5], [0, 1, 2]]);
    let cam = Camera::new([1.0, 0.0, 0.0], 16, 16).unwrap();
    let out = rasterize(&mesh, &cam, &[[0.5; 3]; 6], &flat_lighting(1.0), &opts(Exec::default())).unwrap();
    assert!(out.attrib.iter().flatten().all(|pa| pa.triangle == 0));
}

#[test]
fn shared_edge_pixels_are_owned_once() {
    // a square split along its diagonal; the diagonal passes through pixel centers
    let vertices = vec![[-0.5, -0.5, 0.0], [0.5, -0.5, 0.0], [0.5, 0.5, 0.0], [-0.5, 0.5, 0.0]];
    let faces = vec![[0, 1, 2], [0, 2, 3]];
    let cam = Camera::new([1.0, 0.0, 0.0], 17, 17).unwrap();
    let vis = visibility(&mesh_from(vertices.clone(), faces.clone()), &cam, Exec::Sequential).unwrap();
    let single = |f: [usize; 3]| visibility(&mesh_from(vertices.clone(), vec![f]), &cam, Exec::Sequential).unwrap();
    let (a, b) = (single(faces[0]), single(faces[1]));
    for i in 0..vis.len() {
        let both = a[i].is_some() as u8 + b[i].is_some() as u8;
        assert!(both <= 1, "pixel {i} drawn by both halves");
        assert_eq!(vis[i].is_some(), both == 1);
    }
}

fn toy_scene() -> (FaceModel, FaceParams, Mesh, Vec<Vec3>, Camera) {
    let model = make_toy_model(&ToyModelConfig { n_vertices: 196, ..Default::default() }).unwrap();
    let mut p = model.zero_params();
    let mut rng = substream(3, "render-scene");
    p.lighting.iter_mut().enumerate().for_each(|(i, l)| {
        *l = if i < 3 { 0.9 } else { 0.3 * rng.random_range(-1.0..1.0) }
    });
    p.psi.iter_mut().for_each(|x| *x = rng.random_range(-1.0..1.0));
    p.camera = [0.9, 0.03, -0.02];
    let mesh = model.evaluate_mesh(&p).unwrap();
    let albedo = model.evaluate_albedo(&p.alpha).unwrap().colors;
    let cam = Camera::new(p.camera, 48, 48).unwrap();
    (model, p, mesh, albedo, cam)
}

#[test]
fn sequential_and_parallel_agree() {
    let (_, p, mesh, albedo, cam) = toy_scene();
    let a = rasterize(&mesh, &cam, &albedo, &p.lighting, &opts(Exec::Sequential)).unwrap();
    let b = rasterize(&mesh, &cam, &albedo, &p.lighting, &opts(Exec::default())).unwrap();
    assert_eq!(a, b);
}

#[test]
fn whole_pixel_translation_shifts_render() {
    let (_, p, mesh, albedo, _) = toy_scene();
    let (w, h) = (64usize, 64usize);
    let base = Camera::new([0.8, 0.0, 0.0], w, h).unwrap();
    let (dx, dy) = (3usize, 2usize);
    // +u moves right, +v moves up (toward smaller rows)
    let shifted = Camera::new([0.8, 2.0 * dx as f64 / w as f64, -2.0 * dy as f64 / h as f64], w, h).unwrap();
    let a = rasterize(&mesh, &base, &albedo, &p.lighting, &opts(Exec::default())).unwrap();
    let b = rasterize(&mesh, &shifted, &albedo, &p.lighting, &opts(Exec::default())).unwrap();
    for y in 0..h - dy {
        for x in 0..w - dx {
            let (i, j) = (y * w + x, (y + dy) * w + x + dx);
            assert_eq!(a.mask[i], b.mask[j]);
            for c in 0..3 {
                assert!((a.linear[i * 3 + c] - b.linear[j * 3 + c]).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn shading_is_linear_in_lighting() {
    let (_, p, mesh, albedo, cam) = toy_scene();
    let mut rng = substream(4, "lighting");
    let l1: Vec<f64> = (0..LIGHTING_LEN).map(|_| rng.random_range(-1.0..1.0)).collect();
    let l2: Vec<f64> = (0..LIGHTING_LEN).map(|_| rng.random_range(-1.0..1.0)).collect();
    let l12: Vec<f64> = l1.iter().zip(&l2).map(|(a, b)| a + b).collect();
    let r = |l: &[f64]| rasterize(&mesh, &cam, &albedo, l, &opts(Exec::default())).unwrap().linear;
    let (a, b, ab) = (r(&l1), r(&l2), r(&l12));
    for i in 0..a.len() {
        assert!((ab[i] - a[i] - b[i]).abs() < 1e-9);
    }
    let _ = p;
}

#[test]
fn mask_follows_skin_subset() {
    let (model, p, mesh, albedo, cam) = toy_scene();
    let skin: Vec<usize> = (0..model.n_faces()).filter(|t| t % 3 == 0).collect();
    let o = RasterOptions { skin_triangles: Some(skin.clone()), exec: Exec::default() };
    let out = rasterize(&mesh, &cam, &albedo, &p.lighting, &o).unwrap();
    for (m, pa) in out.mask.iter().zip(&out.attrib) {
        assert_eq!(*m, pa.map(|pa| skin.contains(&pa.triangle)).unwrap_or(false));
    }
}

fn objective(out: &RenderOutput, upstream: &[f64]) -> f64 {
    out.linear.iter().zip(upstream).map(|(a, b)| a * b).sum()
}

fn random_upstream(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = substream(seed, "render-upstream");
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

#[test]
fn zero_upstream_gives_zero_gradients() {
    let (_, p, mesh, albedo, cam) = toy_scene();
    let out = rasterize(&mesh, &cam, &albedo, &p.lighting, &opts(Exec::default())).unwrap();
    let g = render_gradients(&mesh, &cam, &albedo, &p.lighting, &out, &vec![0.0; out.linear.len()]).unwrap();
    assert_eq!(g, RenderGrads::zeros(mesh.vertices.len()));
}

#[test]
fn lighting_and_albedo_gradients_match_finite_differences() {
    let (_, p, mesh, albedo, cam) = toy_scene();
    let out = rasterize(&mesh, &cam, &albedo, &p.lighting, &opts(Exec::default())).unwrap();
    let up = random_upstream(out.linear.len(), 1);
    let g = render_gradients(&mesh, &cam, &albedo, &p.lighting, &out, &up).unwrap();
    let h = 1e-5;
    for i in 0..LIGHTING_LEN {
        let f = |d: f64| {
            let mut l = p.lighting.clone();
            l[i] += d;
            objective(&rasterize(&mesh, &cam, &albedo, &l, &opts(Exec::default())).unwrap(), &up)
        };
        let fd = (f(h) - f(-h)) / (2.0 * h);
        let err = (fd - g.lighting[i]).abs() / fd.abs().max(g.lighting[i].abs()).max(1e-8);
        assert!(err < 1e-4, "l[{i}]: fd {fd} analytic {}", g.lighting[i]);
    }
    for v in (0..mesh.vertices.len()).step_by(11) {
        for c in 0..3 {
            let f = |d: f64| {
                let mut a = albedo.clone();
                a[v][c] += d;
                objective(&rasterize(&mesh, &cam, &a, &p.lighting, &opts(Exec::default())).unwrap(), &up)
            };
            let fd = (f(h) - f(-h)) / (2.0 * h);
            assert!((fd - g.albedo[v][c]).abs() <= 1e-6 * fd.abs().max(1.0));
        }
    }
}

/// Relative error of vertex/camera gradients, skipping probes that change the
/// pixel-to-triangle assignment.
#[test]
fn geometry_gradients_match_finite_differences() {
    let (_, p, mesh, albedo, cam) = toy_scene();
    let out = rasterize(&mesh, &cam, &albedo, &p.lighting, &opts(Exec::default())).unwrap();
    let up = random_upstream(out.linear.len(), 2);
    let g = render_gradients(&mesh, &cam, &albedo, &p.lighting, &out, &up).unwrap();
    let h = 1e-5;
    let render_at = |m: &Mesh, c: &Camera| rasterize(m, c, &albedo, &p.lighting, &opts(Exec::default())).unwrap();
    let stable = |r: &RenderOutput| r.attrib.iter().zip(&out.attrib).all(|(a, b)| a.map(|x| x.triangle) == b.map(|x| x.triangle));

    let mut checked = 0;
    for v in 0..mesh.vertices.len() {
        let q = cam.to_pixel(mesh.vertices[v]);
        if q[0] < 4.0 || q[1] < 4.0 || q[0] > 44.0 || q[1] > 44.0 {
            continue;
        }
        for c in 0..3 {
            let probe = |d: f64| {
                let mut vs = mesh.vertices.clone();
                vs[v][c] += d;
                render_at(&mesh_from(vs, mesh.faces.clone()), &cam)
            };
            let (rp, rm) = (probe(h), probe(-h));
            if !stable(&rp) || !stable(&rm) {
                continue;
            }
            let fd = (objective(&rp, &up) - objective(&rm, &up)) / (2.0 * h);
            let a = g.vertices[v][c];
            let err = (fd - a).abs() / fd.abs().max(a.abs()).max(1e-6);
            assert!(err < 1e-3, "vertex {v} axis {c}: fd {fd} analytic {a}");
            checked += 1;
        }
    }
    assert!(checked > 100, "only {checked} stable probes");

    let cam_probe = |d: [f64; 3]| {
        let c = Camera::new([cam.scale + d[0], cam.translation[0] + d[1], cam.translation[1] + d[2]], 48, 48).unwrap();
        render_at(&mesh, &c)
    };
    let analytic = [g.scale, g.translation[0], g.translation[1]];
    for (k, &a) in analytic.iter().enumerate() {
        // shrink the probe until no pixel changes triangle
        let fd = [1e-5, 1e-6, 1e-7, 1e-8].into_iter().find_map(|step| {
            let mut d = [0.0; 3];
            d[k] = step;
            let rp = cam_probe(d);
            d[k] = -step;
            let rm = cam_probe(d);
            (stable(&rp) && stable(&rm)).then(|| (objective(&rp, &up) - objective(&rm, &up)) / (2.0 * step))
        });
        let fd = fd.unwrap_or_else(|| panic!("camera probe {k} never kept the assignment"));
        let err = (fd - a).abs() / fd.abs().max(a.abs()).max(1e-6);
        assert!(err < 1e-3, "camera {k}: fd {fd} analytic {a}");
    }
}

#[test]
fn render_errors() {
    let (_, p, mesh, albedo, cam) = toy_scene();
    assert!(rasterize(&mesh, &cam, &albedo[1..], &p.lighting, &opts(Exec::default())).is_err());
    assert!(rasterize(&mesh, &cam, &albedo, &p.lighting[1..], &opts(Exec::default())).is_err());
    let out = rasterize(&mesh, &cam, &albedo, &p.lighting, &opts(Exec::default())).unwrap();
    let other = Camera::new(p.camera, 32, 32).unwrap();
    assert!(render_gradients(&mesh, &other, &albedo, &p.lighting, &out, &vec![0.0; 32 * 32 * 3]).is_err());
}

