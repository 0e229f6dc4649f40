//! Mesh loading, SO(3) viewpoint sampling and a CPU z-buffer rasterizer.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Matrix3, UnitQuaternion, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{BoundingBox, CameraIntrinsics, Pose};
use crate::raster::{DepthMap, Mask, RgbImage};

const DEFAULT_COLOR: [f64; 3] = [0.5, 0.5, 0.5];

/// Triangle mesh in millimeters with per-vertex colors.
#[derive(Debug, Clone, PartialEq)]
pub struct Mesh {
    vertices: Vec<Vector3<f64>>,
    triangles: Vec<[u32; 3]>,
    colors: Vec<Vector3<f64>>,
    diameter: f64,
}

impl Mesh {
    pub fn new(
        vertices: Vec<Vector3<f64>>,
        triangles: Vec<[u32; 3]>,
        colors: Option<Vec<Vector3<f64>>>,
    ) -> Result<Self> {
        if vertices.is_empty() || triangles.is_empty() {
            return Err(Error::InvalidMesh(
                "mesh needs vertices and triangles".into(),
            ));
        }
        if vertices.iter().any(|v| !v.iter().all(|c| c.is_finite())) {
            return Err(Error::InvalidMesh("non-finite vertex coordinate".into()));
        }
        let n = vertices.len() as u32;
        if let Some(bad) = triangles.iter().find(|t| t.iter().any(|&i| i >= n)) {
            return Err(Error::InvalidMesh(format!(
                "triangle {bad:?} indexes past {n} vertices"
            )));
        }
        let colors = match colors {
            Some(c) if c.len() != vertices.len() => {
                return Err(Error::InvalidMesh(
                    "color count differs from vertex count".into(),
                ))
            }
            Some(c) => c,
            None => vec![Vector3::from(DEFAULT_COLOR); vertices.len()],
        };
        let diameter = compute_diameter(&vertices);
        if !(diameter > 0.0) {
            return Err(Error::InvalidMesh("mesh has zero extent".into()));
        }
        Ok(Self {
            vertices,
            triangles,
            colors,
            diameter,
        })
    }

    pub fn vertices(&self) -> &[Vector3<f64>] {
        &self.vertices
    }

    pub fn triangles(&self) -> &[[u32; 3]] {
        &self.triangles
    }

    pub fn colors(&self) -> &[Vector3<f64>] {
        &self.colors
    }

    /// Largest distance between two vertices.
    pub fn diameter(&self) -> f64 {
        self.diameter
    }

    /// Center of the axis-aligned bounding box.
    pub fn center(&self) -> Vector3<f64> {
        let (lo, hi) = self.bounds();
        (lo + hi) * 0.5
    }

    pub fn bounds(&self) -> (Vector3<f64>, Vector3<f64>) {
        let mut lo = self.vertices[0];
        let mut hi = self.vertices[0];
        for v in &self.vertices {
            lo = lo.inf(v);
            hi = hi.sup(v);
        }
        (lo, hi)
    }

    /// Loads an ASCII PLY or OBJ file, chosen by extension.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase);
        let ctx = path.display().to_string();
        match ext.as_deref() {
            Some("ply") => parse_ply(&text, &ctx),
            Some("obj") => parse_obj(&text, &ctx),
            _ => Err(Error::parse(ctx, "mesh file must end in .ply or .obj")),
        }
    }

    pub fn to_ply_string(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "ply\nformat ascii 1.0");
        let _ = writeln!(s, "element vertex {}", self.vertices.len());
        s.push_str("property float x\nproperty float y\nproperty float z\n");
        s.push_str("property uchar red\nproperty uchar green\nproperty uchar blue\n");
        let _ = writeln!(s, "element face {}", self.triangles.len());
        s.push_str("property list uchar int vertex_indices\nend_header\n");
        for (v, c) in self.vertices.iter().zip(&self.colors) {
            let q = |x: f64| (x.clamp(0.0, 1.0) * 255.0).round() as u8;
            let _ = writeln!(
                s,
                "{} {} {} {} {} {}",
                v.x,
                v.y,
                v.z,
                q(c.x),
                q(c.y),
                q(c.z)
            );
        }
        for t in &self.triangles {
            let _ = writeln!(s, "3 {} {} {}", t[0], t[1], t[2]);
        }
        s
    }

    pub fn save_ply(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_ply_string()).map_err(|e| Error::io(path, e))
    }
}

fn compute_diameter(vertices: &[Vector3<f64>]) -> f64 {
    vertices
        .par_iter()
        .enumerate()
        .map(|(i, a)| {
            vertices[i + 1..]
                .iter()
                .map(|b| (a - b).norm_squared())
                .fold(0.0f64, f64::max)
        })
        .reduce(|| 0.0, f64::max)
        .sqrt()
}

fn fan(indices: &[u32], out: &mut Vec<[u32; 3]>) {
    for i in 1..indices.len().saturating_sub(1) {
        out.push([indices[0], indices[i], indices[i + 1]]);
    }
}

fn parse_ply(text: &str, ctx: &str) -> Result<Mesh> {
    let err = |m: String| Error::parse(ctx, m);
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some("ply") {
        return Err(err("missing 'ply' magic line".into()));
    }
    struct Element {
        name: String,
        count: usize,
        props: Vec<(String, String)>,
        has_list: bool,
    }
    let mut elements: Vec<Element> = Vec::new();
    loop {
        let line = lines
            .next()
            .ok_or_else(|| err("unterminated header".into()))?
            .trim();
        let tok: Vec<&str> = line.split_whitespace().collect();
        match tok.first().copied() {
            Some("format") => {
                if tok.get(1) != Some(&"ascii") {
                    return Err(err("only ASCII PLY is supported".into()));
                }
            }
            Some("element") if tok.len() == 3 => elements.push(Element {
                name: tok[1].to_string(),
                count: tok[2]
                    .parse()
                    .map_err(|_| err(format!("bad element count '{}'", tok[2])))?,
                props: Vec::new(),
                has_list: false,
            }),
            Some("property") => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| err("property before element".into()))?;
                if tok.get(1) == Some(&"list") {
                    el.has_list = true;
                } else if tok.len() == 3 {
                    el.props.push((tok[2].to_string(), tok[1].to_string()));
                }
            }
            Some("end_header") => break,
            _ => {}
        }
    }
    let mut vertices = Vec::new();
    let mut colors = Vec::new();
    let mut any_color = false;
    let mut triangles = Vec::new();
    let mut body = lines.filter(|l| !l.trim().is_empty());
    for el in &elements {
        for _ in 0..el.count {
            let line = body
                .next()
                .ok_or_else(|| err(format!("truncated '{}' element", el.name)))?;
            let vals: Vec<f64> = line
                .split_whitespace()
                .map(|t| {
                    t.parse::<f64>()
                        .map_err(|_| err(format!("bad number '{t}'")))
                })
                .collect::<Result<_>>()?;
            match el.name.as_str() {
                "vertex" => {
                    let get = |name: &str| {
                        el.props
                            .iter()
                            .position(|(n, _)| n == name)
                            .and_then(|i| vals.get(i).map(|v| (*v, el.props[i].1.as_str())))
                    };
                    let (x, y, z) = match (get("x"), get("y"), get("z")) {
                        (Some(x), Some(y), Some(z)) => (x.0, y.0, z.0),
                        _ => return Err(err("vertex lacks x/y/z".into())),
                    };
                    vertices.push(Vector3::new(x, y, z));
                    let mut c = Vector3::from(DEFAULT_COLOR);
                    for (i, name) in ["red", "green", "blue"].iter().enumerate() {
                        if let Some((v, ty)) = get(name) {
                            any_color = true;
                            c[i] = if ty.starts_with("float") || ty == "double" {
                                v
                            } else {
                                v / 255.0
                            };
                        }
                    }
                    colors.push(c);
                }
                "face" if el.has_list => {
                    let n = *vals.first().ok_or_else(|| err("empty face line".into()))? as usize;
                    if vals.len() < n + 1 || n < 3 {
                        return Err(err(format!("bad face line '{line}'")));
                    }
                    let idx: Vec<u32> = vals[1..=n].iter().map(|&v| v as u32).collect();
                    fan(&idx, &mut triangles);
                }
                _ => {}
            }
        }
    }
    Mesh::new(vertices, triangles, any_color.then_some(colors))
}

fn parse_obj(text: &str, ctx: &str) -> Result<Mesh> {
    let err = |m: String| Error::parse(ctx, m);
    let mut vertices = Vec::new();
    let mut colors = Vec::new();
    let mut any_color = false;
    let mut triangles = Vec::new();
    for line in text.lines() {
        let mut tok = line.split_whitespace();
        match tok.next() {
            Some("v") => {
                let vals: Vec<f64> = tok
                    .map(|t| {
                        t.parse::<f64>()
                            .map_err(|_| err(format!("bad number '{t}'")))
                    })
                    .collect::<Result<_>>()?;
                if vals.len() < 3 {
                    return Err(err(format!(
                        "vertex line '{line}' has fewer than 3 coordinates"
                    )));
                }
                vertices.push(Vector3::new(vals[0], vals[1], vals[2]));
                if vals.len() >= 6 {
                    any_color = true;
                    colors.push(Vector3::new(vals[3], vals[4], vals[5]));
                } else {
                    colors.push(Vector3::from(DEFAULT_COLOR));
                }
            }
            Some("f") => {
                let n = vertices.len() as i64;
                let idx: Vec<u32> = tok
                    .map(|t| {
                        let first = t.split('/').next().unwrap_or("");
                        let i: i64 = first
                            .parse()
                            .map_err(|_| err(format!("bad face index '{t}'")))?;
                        let i = if i < 0 { n + i } else { i - 1 };
                        u32::try_from(i).map_err(|_| err(format!("face index '{t}' out of range")))
                    })
                    .collect::<Result<_>>()?;
                if idx.len() < 3 {
                    return Err(err(format!("face '{line}' has fewer than 3 vertices")));
                }
                fan(&idx, &mut triangles);
            }
            _ => {}
        }
    }
    Mesh::new(vertices, triangles, any_color.then_some(colors))
}

/// Deterministic, approximately uniform rotations covering SO(3).
///
/// Super-Fibonacci spiral quaternions, rotated as a whole by a random
/// rotation drawn from `seed` (a global rotation preserves uniformity).
pub fn sample_rotations(n: usize, seed: u64) -> Vec<Matrix3<f64>> {
    const PHI: f64 = std::f64::consts::SQRT_2;
    const PSI: f64 = 1.533_751_168_755_204_3;
    let global = random_rotation(&mut ChaCha8Rng::seed_from_u64(seed));
    let tau = std::f64::consts::TAU;
    (0..n)
        .map(|i| {
            let s = i as f64 + 0.5;
            let r = (s / n as f64).sqrt();
            let big_r = (1.0 - s / n as f64).sqrt();
            let alpha = tau * s / PHI;
            let beta = tau * s / PSI;
            let q = nalgebra::Quaternion::new(
                big_r * beta.cos(),
                r * alpha.sin(),
                r * alpha.cos(),
                big_r * beta.sin(),
            );
            let q = UnitQuaternion::from_quaternion(q);
            global * q.to_rotation_matrix().into_inner()
        })
        .collect()
}

/// Uniform random rotation (Shoemake's subgroup algorithm).
pub fn random_rotation(rng: &mut impl Rng) -> Matrix3<f64> {
    let u1: f64 = rng.random();
    let u2: f64 = rng.random::<f64>() * std::f64::consts::TAU;
    let u3: f64 = rng.random::<f64>() * std::f64::consts::TAU;
    let a = (1.0 - u1).sqrt();
    let b = u1.sqrt();
    let q = nalgebra::Quaternion::new(b * u3.cos(), a * u2.sin(), a * u2.cos(), b * u3.sin());
    UnitQuaternion::from_quaternion(q)
        .to_rotation_matrix()
        .into_inner()
}

/// Output of [`render`].
#[derive(Debug, Clone, PartialEq)]
pub struct Rendering {
    pub rgb: RgbImage,
    pub depth: DepthMap,
    pub mask: Mask,
}

/// Rasterizes `mesh` under `pose` into a `K.width × K.height` raster.
///
/// Flat Lambertian shading with a headlight along the optical axis, black
/// background, perspective-correct depth and color interpolation. Triangles
/// with a vertex at or behind the camera plane are skipped.
pub fn render(mesh: &Mesh, pose: &Pose, k: &CameraIntrinsics) -> Rendering {
    let (w, h) = (k.width as usize, k.height as usize);
    let mut rgb = RgbImage::new(w, h);
    let mut depth = DepthMap::new(w, h);
    let cam: Vec<Vector3<f64>> = mesh.vertices().iter().map(|v| pose.transform(v)).collect();
    let colors = mesh.colors();

    for tri in mesh.triangles() {
        let [ia, ib, ic] = tri.map(|i| i as usize);
        let (pa, pb, pc) = (cam[ia], cam[ib], cam[ic]);
        if pa.z <= 1e-6 || pb.z <= 1e-6 || pc.z <= 1e-6 {
            continue;
        }
        let normal = (pb - pa).cross(&(pc - pa));
        let nn = normal.norm();
        if nn == 0.0 {
            continue;
        }
        let shade = 0.25 + 0.75 * (normal.z / nn).abs();
        let s = |p: &Vector3<f64>| Vector2::new(k.fx * p.x / p.z + k.cx, k.fy * p.y / p.z + k.cy);
        let (sa, sb, sc) = (s(&pa), s(&pb), s(&pc));
        let area = edge(&sa, &sb, &sc);
        if area.abs() < 1e-12 {
            continue;
        }
        let x_lo = ((sa.x.min(sb.x).min(sc.x) - 0.5).ceil().max(0.0)) as i64;
        let x_hi = ((sa.x.max(sb.x).max(sc.x) - 0.5).floor()).min(w as f64 - 1.0) as i64;
        let y_lo = ((sa.y.min(sb.y).min(sc.y) - 0.5).ceil().max(0.0)) as i64;
        let y_hi = ((sa.y.max(sb.y).max(sc.y) - 0.5).floor()).min(h as f64 - 1.0) as i64;
        if x_lo > x_hi || y_lo > y_hi {
            continue;
        }
        let inv = [1.0 / pa.z, 1.0 / pb.z, 1.0 / pc.z];
        let cols = [colors[ia] * shade, colors[ib] * shade, colors[ic] * shade];
        for y in y_lo..=y_hi {
            for x in x_lo..=x_hi {
                let p = Vector2::new(x as f64 + 0.5, y as f64 + 0.5);
                let w0 = edge(&sb, &sc, &p) / area;
                let w1 = edge(&sc, &sa, &p) / area;
                let w2 = edge(&sa, &sb, &p) / area;
                if w0 < 0.0 || w1 < 0.0 || w2 < 0.0 {
                    continue;
                }
                let inv_z = w0 * inv[0] + w1 * inv[1] + w2 * inv[2];
                let z = 1.0 / inv_z;
                let (ux, uy) = (x as usize, y as usize);
                let current = depth.get(ux, uy);
                if current > 0.0 && z >= current {
                    continue;
                }
                depth.set(ux, uy, z);
                let c =
                    (cols[0] * (w0 * inv[0]) + cols[1] * (w1 * inv[1]) + cols[2] * (w2 * inv[2]))
                        * z;
                rgb.set(ux, uy, [c.x as f32, c.y as f32, c.z as f32]);
            }
        }
    }
    let mask = depth.to_mask();
    Rendering { rgb, depth, mask }
}

#[inline]
fn edge(a: &Vector2<f64>, b: &Vector2<f64>, p: &Vector2<f64>) -> f64 {
    (b.x - a.x) * (p.y - a.y) - (b.y - a.y) * (p.x - a.x)
}

/// A rendered RGB-D template.
#[derive(Debug, Clone, PartialEq)]
pub struct TemplateImage {
    pub rgb: RgbImage,
    pub depth: DepthMap,
    pub mask: Mask,
    pub pose: Pose,
    pub intrinsics: CameraIntrinsics,
    pub template_id: u32,
}

/// Intrinsics shared by all S×S templates: focal `2.5·S`, principal point at the center.
pub fn template_intrinsics(size: usize) -> CameraIntrinsics {
    let s = size as f64;
    CameraIntrinsics {
        fx: 2.5 * s,
        fy: 2.5 * s,
        cx: s / 2.0,
        cy: s / 2.0,
        width: size as u32,
        height: size as u32,
    }
}

/// Places the object so that the longer side of its projected box is `delta·S`
/// pixels and the box is centered on the principal point.
pub fn template_pose(
    mesh: &Mesh,
    rotation: &Matrix3<f64>,
    k: &CameraIntrinsics,
    target: f64,
) -> Result<Pose> {
    let center = mesh.center();
    let mut c_cam = Vector3::new(0.0, 0.0, k.fx * mesh.diameter() / target + mesh.diameter());
    for _ in 0..30 {
        let pose = Pose::from_rotation_unchecked(*rotation, c_cam - rotation * center);
        let pts: Vec<Vector2<f64>> = mesh
            .vertices()
            .iter()
            .map(|v| k.project_camera(&pose.transform(v)))
            .collect::<Result<_>>()?;
        let bb = BoundingBox::from_points(&pts).ok_or(Error::EmptyRender)?;
        let bc = bb.center();
        let size_err = bb.longer_side() - target;
        let center_err = (bc.x - k.cx).abs().max((bc.y - k.cy).abs());
        if size_err.abs() < 1e-4 && center_err < 1e-4 {
            return Ok(pose);
        }
        let scale = bb.longer_side() / target;
        c_cam.x -= (bc.x - k.cx) * c_cam.z / k.fx;
        c_cam.y -= (bc.y - k.cy) * c_cam.z / k.fy;
        c_cam *= scale;
    }
    Ok(Pose::from_rotation_unchecked(
        *rotation,
        c_cam - rotation * center,
    ))
}

/// Renders one S×S template at `rotation`.
pub fn render_template(
    mesh: &Mesh,
    rotation: &Matrix3<f64>,
    size: usize,
    delta: f64,
    template_id: u32,
) -> Result<TemplateImage> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "delta must lie in (0,1), got {delta}"
        )));
    }
    let k = template_intrinsics(size);
    let pose = template_pose(mesh, rotation, &k, delta * size as f64)?;
    let r = render(mesh, &pose, &k);
    if r.mask.is_empty() {
        return Err(Error::EmptyRender);
    }
    Ok(TemplateImage {
        rgb: r.rgb,
        depth: r.depth,
        mask: r.mask,
        pose,
        intrinsics: k,
        template_id,
    })
}

/// Lifts pixel `u` at camera depth `depth` back into model space.
pub fn backproject(
    u: &Vector2<f64>,
    depth: f64,
    k: &CameraIntrinsics,
    pose: &Pose,
) -> Result<Vector3<f64>> {
    if !(depth > 0.0) {
        return Err(Error::ZeroDepth);
    }
    let cam = k.unproject(u, depth);
    Ok(pose.rotation().transpose() * (cam - pose.translation()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::project;
    use crate::synthetic;

    fn nearest_neighbor_angles(rots: &[Matrix3<f64>]) -> Vec<f64> {
        rots.par_iter()
            .enumerate()
            .map(|(i, a)| {
                rots.iter()
                    .enumerate()
                    .filter(|(j, _)| *j != i)
                    .map(|(_, b)| crate::geometry::rotation_angle(&(a.transpose() * b)))
                    .fold(f64::INFINITY, f64::min)
            })
            .collect()
    }

    #[test]
    fn single_rotation_is_valid() {
        let r = sample_rotations(1, 0);
        assert_eq!(r.len(), 1);
        assert!(Pose::new(r[0], Vector3::zeros()).is_ok());
    }

    #[test]
    fn rotations_cover_so3_uniformly() {
        for seed in [0u64, 99] {
            let rots = sample_rotations(800, seed);
            assert!(rots.iter().all(|r| Pose::new(*r, Vector3::zeros()).is_ok()));
            let nn = nearest_neighbor_angles(&rots);
            let mean = nn.iter().sum::<f64>() / nn.len() as f64;
            let deg = mean.to_degrees();
            assert!((deg - 25.0).abs() <= 10.0, "mean nn angle {deg}");
        }
        let a = sample_rotations(800, 0);
        let b = sample_rotations(800, 99);
        assert_ne!(a, b);
        assert_eq!(a, sample_rotations(800, 0));
    }

    #[test]
    fn cube_front_face_depth() {
        let mesh = synthetic::cube(50.0);
        let k = CameraIntrinsics::new(500.0, 500.0, 50.0, 50.0, 100, 100).unwrap();
        let d = 800.0;
        let r = render(
            &mesh,
            &Pose::from_translation(Vector3::new(0.0, 0.0, d)),
            &k,
        );
        assert!((r.depth.get(50, 50) - (d - 50.0)).abs() <= 0.5);
        assert!(r.mask.get(50, 50));
        assert!(!r.mask.get(0, 0));
    }

    #[test]
    fn template_bbox_matches_target_and_depth_is_consistent() {
        let mesh = synthetic::textured_box(60.0, 40.0, 25.0, 4, 3);
        for (i, rot) in sample_rotations(20, 5).iter().enumerate() {
            let t = render_template(&mesh, rot, 210, 0.6, i as u32).unwrap();
            let bb = t.mask.bounding_box().unwrap();
            assert!(
                (bb.longer_side() - 126.0).abs() <= 1.0,
                "{}",
                bb.longer_side()
            );
            let tz = t.pose.translation().z;
            for y in 0..210 {
                for x in 0..210 {
                    let d = t.depth.get(x, y);
                    assert_eq!(t.mask.get(x, y), d > 0.0);
                    if d > 0.0 {
                        assert!(d > 0.1 * tz && d < 10.0 * tz);
                    }
                }
            }
        }
    }

    #[test]
    fn rendering_is_deterministic() {
        let mesh = synthetic::textured_box(60.0, 40.0, 25.0, 4, 9);
        let rot = sample_rotations(3, 1)[2];
        let a = render_template(&mesh, &rot, 140, 0.6, 0).unwrap();
        let b = render_template(&mesh, &rot, 140, 0.6, 0).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn backproject_examples() {
        let k = CameraIntrinsics::new(500.0, 500.0, 210.0, 210.0, 420, 420).unwrap();
        let p = backproject(&Vector2::new(210.0, 210.0), 700.0, &k, &Pose::identity()).unwrap();
        assert_eq!(p, Vector3::new(0.0, 0.0, 700.0));
        assert!(matches!(
            backproject(&Vector2::new(1.0, 1.0), 0.0, &k, &Pose::identity()),
            Err(Error::ZeroDepth)
        ));
        let pose = Pose::from_axis_angle(
            Vector3::new(0.4, -0.3, 0.2),
            Vector3::new(10.0, -5.0, 900.0),
        );
        let x = Vector3::new(12.0, -33.0, 20.0);
        let u = project(&x, &pose, &k).unwrap();
        let z = pose.transform(&x).z;
        let back = backproject(&u, z, &k, &pose).unwrap();
        assert!((back - x).norm() < 1e-6);
    }

    fn point_triangle_distance(
        p: &Vector3<f64>,
        a: &Vector3<f64>,
        b: &Vector3<f64>,
        c: &Vector3<f64>,
    ) -> f64 {
        // Brute-force: distance to the plane if the foot is inside, else to the edges.
        let n = (b - a).cross(&(c - a)).normalize();
        let foot = p - n * n.dot(&(p - a));
        let inside = [(a, b), (b, c), (c, a)]
            .iter()
            .all(|(u, v)| (*v - *u).cross(&(foot - *u)).dot(&n) >= -1e-9);
        if inside {
            return (p - foot).norm();
        }
        [(a, b), (b, c), (c, a)]
            .iter()
            .map(|(u, v)| {
                let d = *v - *u;
                let t = ((p - *u).dot(&d) / d.norm_squared()).clamp(0.0, 1.0);
                (p - (*u + d * t)).norm()
            })
            .fold(f64::INFINITY, f64::min)
    }

    #[test]
    fn backprojected_pixels_lie_on_the_surface() {
        let mesh = synthetic::textured_box(60.0, 40.0, 25.0, 3, 2);
        let (lo, hi) = mesh.bounds();
        let rot = sample_rotations(7, 3)[4];
        let t = render_template(&mesh, &rot, 210, 0.6, 0).unwrap();
        let fg: Vec<(usize, usize)> = t.mask.iter_foreground().collect();
        let step = (fg.len() / 500).max(1);
        for &(x, y) in fg.iter().step_by(step) {
            let u = Vector2::new(x as f64 + 0.5, y as f64 + 0.5);
            let p = backproject(&u, t.depth.get(x, y), &t.intrinsics, &t.pose).unwrap();
            for i in 0..3 {
                assert!(p[i] >= lo[i] - 1.0 && p[i] <= hi[i] + 1.0);
            }
            let d = mesh
                .triangles()
                .iter()
                .map(|tr| {
                    let [a, b, c] = tr.map(|i| mesh.vertices()[i as usize]);
                    point_triangle_distance(&p, &a, &b, &c)
                })
                .fold(f64::INFINITY, f64::min);
            assert!(d <= 1.0, "distance {d}");
            let re = project(&p, &t.pose, &t.intrinsics).unwrap();
            assert!((re - u).norm() < 1e-4);
        }
    }

    #[test]
    fn ply_and_obj_parse() {
        let ply = "ply\nformat ascii 1.0\nelement vertex 4\nproperty float x\nproperty float y\nproperty float z\nproperty uchar red\nproperty uchar green\nproperty uchar blue\nelement face 1\nproperty list uchar int vertex_indices\nend_header\n0 0 0 255 0 0\n1 0 0 0 255 0\n1 1 0 0 0 255\n0 1 0 255 255 255\n4 0 1 2 3\n";
        let m = parse_ply(ply, "t").unwrap();
        assert_eq!(m.triangles(), &[[0, 1, 2], [0, 2, 3]]);
        assert_eq!(m.colors()[0], Vector3::new(1.0, 0.0, 0.0));
        assert!((m.diameter() - 2f64.sqrt()).abs() < 1e-12);

        let obj = "# comment\nv 0 0 0\nv 1 0 0\nv 0 1 0 0.2 0.3 0.4\nf 1/1/1 2/2/2 -1\n";
        let m = parse_obj(obj, "t").unwrap();
        assert_eq!(m.triangles(), &[[0, 1, 2]]);
        assert_eq!(m.colors()[2], Vector3::new(0.2, 0.3, 0.4));

        assert!(parse_obj("v 0 0 0\nf 1 2 3\n", "t").is_err());
        assert!(parse_ply("plx\n", "t").is_err());
    }

    #[test]
    fn ply_round_trip_through_file() {
        let mesh = synthetic::cube(20.0);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.ply");
        mesh.save_ply(&p).unwrap();
        let back = Mesh::load(&p).unwrap();
        assert_eq!(back.vertices(), mesh.vertices());
        assert_eq!(back.triangles(), mesh.triangles());
        assert!(matches!(
            Mesh::load(dir.path().join("none.ply")),
            Err(Error::Io { .. })
        ));
    }
}
