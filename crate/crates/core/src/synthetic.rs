//! Procedural meshes and feature fields for tests, benchmarks and demos.

use nalgebra::{Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, Pose};
use crate::onboarding::{Circle, TemplateRecord};
use crate::pipeline::DetectionInput;
use crate::refinement::{sample_bilinear, QueryFeatureMap};
use crate::rendering::{render, Mesh};

/// Axis-aligned cube with half-side `h`, 8 shared vertices, mid-gray.
pub fn cube(h: f64) -> Mesh {
    let v: Vec<Vector3<f64>> = (0..8)
        .map(|i| {
            Vector3::new(
                if i & 1 == 0 { -h } else { h },
                if i & 2 == 0 { -h } else { h },
                if i & 4 == 0 { -h } else { h },
            )
        })
        .collect();
    let quads = [
        [0, 2, 3, 1],
        [4, 5, 7, 6],
        [0, 1, 5, 4],
        [2, 6, 7, 3],
        [0, 4, 6, 2],
        [1, 3, 7, 5],
    ];
    let tris = quads
        .iter()
        .flat_map(|q| [[q[0], q[1], q[2]], [q[0], q[2], q[3]]])
        .collect();
    Mesh::new(v, tris, None).expect("cube is valid")
}

const PALETTE: [[f64; 3]; 8] = [
    [0.9, 0.1, 0.1],
    [0.1, 0.8, 0.2],
    [0.15, 0.25, 0.9],
    [0.95, 0.9, 0.1],
    [0.9, 0.5, 0.05],
    [0.6, 0.1, 0.8],
    [0.05, 0.8, 0.85],
    [0.95, 0.95, 0.95],
];

fn push_box(
    verts: &mut Vec<Vector3<f64>>,
    tris: &mut Vec<[u32; 3]>,
    colors: &mut Vec<Vector3<f64>>,
    center: Vector3<f64>,
    half: Vector3<f64>,
    cells: usize,
    rng: &mut ChaCha8Rng,
) {
    // Each face is a cells×cells grid whose interior nodes are jittered; every
    // triangle gets its own flat color so edges run in many directions.
    for axis in 0..3 {
        for sign in [-1.0, 1.0] {
            let (a, b) = ((axis + 1) % 3, (axis + 2) % 3);
            let n = cells + 1;
            let mut nodes = Vec::with_capacity(n * n);
            for i in 0..n {
                for j in 0..n {
                    let jitter = |k: usize, rng: &mut ChaCha8Rng| {
                        if k == 0 || k == cells {
                            0.0
                        } else {
                            rng.random_range(-0.35..0.35)
                        }
                    };
                    let (fi, fj) = (i as f64 + jitter(i, rng), j as f64 + jitter(j, rng));
                    let mut p = Vector3::zeros();
                    p[axis] = sign * half[axis];
                    p[a] = -half[a] + 2.0 * half[a] * fi / cells as f64;
                    p[b] = -half[b] + 2.0 * half[b] * fj / cells as f64;
                    nodes.push(center + p);
                }
            }
            for i in 0..cells {
                for j in 0..cells {
                    let q = [
                        nodes[i * n + j],
                        nodes[(i + 1) * n + j],
                        nodes[(i + 1) * n + j + 1],
                        nodes[i * n + j + 1],
                    ];
                    for tri in [[q[0], q[1], q[2]], [q[0], q[2], q[3]]] {
                        let color = Vector3::from(PALETTE[rng.random_range(0..PALETTE.len())]);
                        let base = verts.len() as u32;
                        verts.extend(tri);
                        colors.extend([color; 3]);
                        tris.push([base, base + 1, base + 2]);
                    }
                }
            }
        }
    }
}

/// Box with half-extents `(hx, hy, hz)` whose faces carry a random color checker.
pub fn textured_box(hx: f64, hy: f64, hz: f64, cells: usize, seed: u64) -> Mesh {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut v, mut t, mut c) = (Vec::new(), Vec::new(), Vec::new());
    push_box(
        &mut v,
        &mut t,
        &mut c,
        Vector3::zeros(),
        Vector3::new(hx, hy, hz),
        cells,
        &mut rng,
    );
    Mesh::new(v, t, Some(c)).expect("box is valid")
}

/// Asymmetric textured object: a flat box with a smaller box attached off-center,
/// colored by a smooth random field so patch appearance varies gradually.
pub fn asymmetric_object(seed: u64) -> Mesh {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut v, mut t) = (Vec::new(), Vec::new());
    push_grid_box(
        &mut v,
        &mut t,
        Vector3::zeros(),
        Vector3::new(60.0, 40.0, 25.0),
        24,
    );
    push_grid_box(
        &mut v,
        &mut t,
        Vector3::new(30.0, 20.0, 40.0),
        Vector3::new(20.0, 15.0, 15.0),
        10,
    );
    let field = ColorField::random(4, 30.0, 80.0, &mut rng);
    let c = v.iter().map(|p| field.at(p)).collect();
    Mesh::new(v, t, Some(c)).expect("object is valid")
}

/// Box faces as `cells×cells` grids of shared vertices.
fn push_grid_box(
    verts: &mut Vec<Vector3<f64>>,
    tris: &mut Vec<[u32; 3]>,
    center: Vector3<f64>,
    half: Vector3<f64>,
    cells: usize,
) {
    for axis in 0..3 {
        for sign in [-1.0, 1.0] {
            let (a, b) = ((axis + 1) % 3, (axis + 2) % 3);
            let n = cells + 1;
            let base = verts.len() as u32;
            for i in 0..n {
                for j in 0..n {
                    let mut p = Vector3::zeros();
                    p[axis] = sign * half[axis];
                    p[a] = -half[a] + 2.0 * half[a] * i as f64 / cells as f64;
                    p[b] = -half[b] + 2.0 * half[b] * j as f64 / cells as f64;
                    verts.push(center + p);
                }
            }
            let id = |i: usize, j: usize| base + (i * n + j) as u32;
            for i in 0..cells {
                for j in 0..cells {
                    tris.push([id(i, j), id(i + 1, j), id(i + 1, j + 1)]);
                    tris.push([id(i, j), id(i + 1, j + 1), id(i, j + 1)]);
                }
            }
        }
    }
}

/// RGB field made of random 3D plane waves, each channel in [0.1, 0.9].
struct ColorField {
    waves: Vec<(Vector3<f64>, f64, Vector3<f64>)>,
}

impl ColorField {
    fn random(
        count: usize,
        min_wavelength: f64,
        max_wavelength: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let waves = (0..count)
            .map(|_| {
                let dir = Vector3::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                )
                .normalize();
                let wavelength = rng.random_range(min_wavelength..max_wavelength);
                let weights = Vector3::new(
                    rng.random_range(0.0..1.0),
                    rng.random_range(0.0..1.0),
                    rng.random_range(0.0..1.0),
                );
                (
                    dir * std::f64::consts::TAU / wavelength,
                    rng.random_range(0.0..std::f64::consts::TAU),
                    weights,
                )
            })
            .collect();
        Self { waves }
    }

    fn at(&self, p: &Vector3<f64>) -> Vector3<f64> {
        let mut sum = Vector3::zeros();
        let mut norm = Vector3::zeros();
        for (k, phase, w) in &self.waves {
            sum += w * (k.dot(p) + phase).sin();
            norm += w;
        }
        sum.zip_map(&norm, |s, n| 0.5 + 0.4 * s / n.max(1e-12))
    }
}

/// Feature map whose channels are low-frequency plane waves over the grid.
pub fn smooth_feature_map(
    rows: usize,
    cols: usize,
    dim: usize,
    patch_size: usize,
    seed: u64,
) -> QueryFeatureMap {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let waves: Vec<[f64; 3]> = (0..dim)
        .map(|_| {
            let angle = rng.random_range(0.0..std::f64::consts::TAU);
            let freq = rng.random_range(0.25..0.6);
            [
                freq * angle.cos(),
                freq * angle.sin(),
                rng.random_range(0.0..std::f64::consts::TAU),
            ]
        })
        .collect();
    QueryFeatureMap::from_fn(rows, cols, dim, patch_size, |r, c| {
        waves
            .iter()
            .map(|w| (w[0] * c as f64 + w[1] * r as f64 + w[2]).sin())
            .collect()
    })
    .expect("finite map")
}

/// Points drawn uniformly in the box `[-half, half]`.
pub fn random_points(n: usize, half: Vector3<f64>, seed: u64) -> Vec<Vector3<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            Vector3::new(
                rng.random_range(-half.x..half.x),
                rng.random_range(-half.y..half.y),
                rng.random_range(-half.z..half.z),
            )
        })
        .collect()
}

/// Template record whose entries are the map sampled at each point's projection
/// under `pose`. Points projecting outside the grid interior are dropped, so the
/// featuremetric cost vanishes at `pose` (up to f32 storage).
pub fn record_from_map(
    map: &QueryFeatureMap,
    points: &[Vector3<f64>],
    pose: &Pose,
    k: &CameraIntrinsics,
) -> TemplateRecord {
    let mut descriptors = Vec::new();
    let mut kept = Vec::new();
    let mut centers = Vec::new();
    for x in points {
        let Ok(u) = k.project_camera(&pose.transform(x)) else {
            continue;
        };
        let g = map.pixel_to_grid(&u);
        if !(g.x > 0.0
            && g.y > 0.0
            && g.x < (map.cols() - 1) as f64
            && g.y < (map.rows() - 1) as f64)
        {
            continue;
        }
        descriptors.extend(sample_bilinear(map, &g).value.iter().map(|&v| v as f32));
        kept.push([x.x as f32, x.y as f32, x.z as f32]);
        centers.push([u.x as f32, u.y as f32]);
    }
    let c = Vector2::new(k.cx, k.cy);
    TemplateRecord {
        template_id: 0,
        pose: *pose,
        intrinsics: *k,
        descriptors,
        points: kept,
        centers,
        bow: Vec::new(),
        footprint: Circle {
            center: [c.x, c.y],
            radius: k.width.min(k.height) as f64 / 2.0,
        },
        global: None,
    }
}

/// Detection input for `mesh` rendered under `pose`, with the rendered mask.
pub fn render_query(
    mesh: &Mesh,
    pose: &Pose,
    k: &CameraIntrinsics,
    object_id: &str,
) -> Result<DetectionInput> {
    let r = render(mesh, pose, k);
    if r.mask.is_empty() {
        return Err(Error::EmptyRender);
    }
    Ok(DetectionInput {
        image: r.rgb,
        intrinsics: *k,
        object_id: object_id.into(),
        mask: r.mask,
        crop_features: None,
    })
}
