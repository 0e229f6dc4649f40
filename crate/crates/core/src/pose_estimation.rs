//! 2D-3D matching against template records, EPnP and RANSAC.

use nalgebra::{DMatrix, DVector, Matrix3, SymmetricEigen, Vector2, Vector3};
use rand::seq::index::sample as sample_indices;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{nearest_rotation, CameraIntrinsics, Pose};
use crate::onboarding::{bounding_circle, sq_dist, ObjectRepresentation, TemplateRecord};
use crate::raster::Mask;
use crate::retrieval::CropDescriptors;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence {
    /// Crop pixel.
    pub image: Vector2<f64>,
    /// Model point in millimeters.
    pub point: Vector3<f64>,
    pub match_distance: f64,
    /// Index of the matched template entry.
    pub entry: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CorrespondenceSet {
    pub items: Vec<Correspondence>,
}

impl CorrespondenceSet {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoseHypothesis {
    /// Pose in the virtual crop camera.
    pub pose: Pose,
    pub template_id: u32,
    pub inlier_count: usize,
    pub inlier_indices: Vec<usize>,
    pub mean_inlier_reproj_error: f64,
}

/// Nearest template entry for every crop descriptor; ties go to the lower entry index.
pub fn match_patches(crop: &CropDescriptors, record: &TemplateRecord) -> Result<CorrespondenceSet> {
    if crop.is_empty() || record.is_empty() {
        return Err(Error::EmptyInput);
    }
    if crop.dim != record.dim() {
        return Err(Error::DimMismatch {
            expected: record.dim(),
            actual: crop.dim,
        });
    }
    let items = (0..crop.len())
        .map(|i| {
            let q = crop.descriptor(i);
            let mut best = (0, f32::INFINITY);
            for j in 0..record.len() {
                let d = sq_dist(q, record.descriptor(j));
                if d < best.1 {
                    best = (j, d);
                }
            }
            let c = crop.centers[i];
            Correspondence {
                image: Vector2::new(c[0], c[1]),
                point: record.point(best.0),
                match_distance: (best.1 as f64).sqrt(),
                entry: best.0,
            }
        })
        .collect();
    Ok(CorrespondenceSet { items })
}

const COLLINEAR_TOL: f64 = 1e-6;
const PLANAR_TOL: f64 = 1e-4;

/// Centroid plus principal axes and their standard deviations, largest first.
fn principal_frame(points: &[Vector3<f64>]) -> (Vector3<f64>, [Vector3<f64>; 3], [f64; 3]) {
    let n = points.len() as f64;
    let c = points.iter().sum::<Vector3<f64>>() / n;
    let mut cov = Matrix3::zeros();
    for p in points {
        let d = p - c;
        cov += d * d.transpose();
    }
    cov /= n;
    let eig = SymmetricEigen::new(cov);
    let mut order = [0, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let axes = order.map(|i| eig.eigenvectors.column(i).into_owned());
    let sd = order.map(|i| eig.eigenvalues[i].max(0.0).sqrt());
    (c, axes, sd)
}

/// True when the points lie within a relative `1e-6` of a common line.
pub fn is_degenerate(points: &[Vector3<f64>]) -> bool {
    if points.len() < 3 {
        return true;
    }
    let (_, _, sd) = principal_frame(points);
    !(sd[0] > 0.0) || sd[1] <= COLLINEAR_TOL * sd[0]
}

/// Rigid alignment `dst ≈ R·src + t` (no scale).
fn align_rigid(src: &[Vector3<f64>], dst: &[Vector3<f64>]) -> Option<Pose> {
    let n = src.len() as f64;
    let cs = src.iter().sum::<Vector3<f64>>() / n;
    let cd = dst.iter().sum::<Vector3<f64>>() / n;
    let mut h = Matrix3::zeros();
    for (s, d) in src.iter().zip(dst) {
        h += (d - cd) * (s - cs).transpose();
    }
    let r = nearest_rotation(&h)?;
    Some(Pose::from_rotation_unchecked(r, cd - r * cs))
}

fn mean_reprojection_error(pose: &Pose, corrs: &[Correspondence], k: &CameraIntrinsics) -> f64 {
    let mut total = 0.0;
    for c in corrs {
        match k.project_camera(&pose.transform(&c.point)) {
            Ok(p) => total += (p - c.image).norm(),
            Err(_) => return f64::INFINITY,
        }
    }
    total / corrs.len() as f64
}

/// Closed-form PnP with control points and null-space betas, polished by Gauss-Newton.
pub fn solve_epnp(corrs: &[Correspondence], k: &CameraIntrinsics) -> Result<Pose> {
    if corrs.len() < 4 {
        return Err(Error::TooFewSamples {
            needed: 4,
            available: corrs.len(),
        });
    }
    let world: Vec<Vector3<f64>> = corrs.iter().map(|c| c.point).collect();
    let (c0, axes, sd) = principal_frame(&world);
    if !(sd[0] > 0.0) || sd[1] <= COLLINEAR_TOL * sd[0] {
        return Err(Error::DegenerateConfiguration);
    }
    let planar = sd[2] <= PLANAR_TOL * sd[0];
    let nc = if planar { 3 } else { 4 };

    let mut controls = vec![c0];
    for a in 0..nc - 1 {
        controls.push(c0 + axes[a] * sd[a]);
    }
    let alphas: Vec<Vec<f64>> = world
        .iter()
        .map(|p| {
            let d = p - c0;
            let mut a = vec![0.0; nc];
            for j in 1..nc {
                a[j] = d.dot(&axes[j - 1]) / sd[j - 1];
            }
            a[0] = 1.0 - a[1..].iter().sum::<f64>();
            a
        })
        .collect();

    let n = corrs.len();
    let mut m = DMatrix::<f64>::zeros(2 * n, 3 * nc);
    for (i, (c, a)) in corrs.iter().zip(&alphas).enumerate() {
        let mx = (c.image.x - k.cx) / k.fx;
        let my = (c.image.y - k.cy) / k.fy;
        for j in 0..nc {
            m[(2 * i, 3 * j)] = a[j];
            m[(2 * i, 3 * j + 2)] = -a[j] * mx;
            m[(2 * i + 1, 3 * j + 1)] = a[j];
            m[(2 * i + 1, 3 * j + 2)] = -a[j] * my;
        }
    }
    let eig = SymmetricEigen::new(m.transpose() * &m);
    let mut order: Vec<usize> = (0..3 * nc).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let null: Vec<DVector<f64>> = order[..nc]
        .iter()
        .map(|&i| eig.eigenvectors.column(i).into_owned())
        .collect();

    let pairs: Vec<(usize, usize)> = (0..nc)
        .flat_map(|i| (i + 1..nc).map(move |j| (i, j)))
        .collect();
    let diff = |v: &DVector<f64>, i: usize, j: usize| -> Vector3<f64> {
        Vector3::new(
            v[3 * i] - v[3 * j],
            v[3 * i + 1] - v[3 * j + 1],
            v[3 * i + 2] - v[3 * j + 2],
        )
    };
    let dv: Vec<Vec<Vector3<f64>>> = pairs
        .iter()
        .map(|&(i, j)| null.iter().map(|v| diff(v, i, j)).collect())
        .collect();
    let rho: Vec<f64> = pairs
        .iter()
        .map(|&(i, j)| (controls[i] - controls[j]).norm_squared())
        .collect();

    // Columns of the linearized distance system are products β_a·β_b, a ≤ b.
    let l_entry = |p: usize, (a, b): (usize, usize)| -> f64 {
        let v = dv[p][a].dot(&dv[p][b]);
        if a == b {
            v
        } else {
            2.0 * v
        }
    };
    let solve_subset = |cols: &[(usize, usize)]| -> Option<Vec<f64>> {
        if cols.len() > pairs.len() {
            return None;
        }
        let l = DMatrix::from_fn(pairs.len(), cols.len(), |p, c| l_entry(p, cols[c]));
        let r = DVector::from_column_slice(&rho);
        let sol = l.svd(true, true).solve(&r, 1e-12).ok()?;
        Some(sol.iter().copied().collect())
    };

    let mut inits: Vec<Vec<f64>> = Vec::new();
    // β_1 with all cross terms β_1·β_a.
    let cols1: Vec<(usize, usize)> = (0..nc).map(|a| (0, a)).collect();
    if let Some(s) = solve_subset(&cols1) {
        let sign = s[0].signum();
        let b1 = s[0].abs().sqrt();
        if b1 > 0.0 {
            let mut beta = vec![0.0; nc];
            beta[0] = b1;
            for a in 1..nc {
                beta[a] = sign * s[a] / b1;
            }
            inits.push(beta);
        }
    }
    // β_1, β_2 only.
    if let Some(s) = solve_subset(&[(0, 0), (0, 1), (1, 1)]) {
        let sign = s[0].signum();
        let b1 = s[0].abs().sqrt();
        let b2 = s[2].abs().sqrt() * if s[1] * sign >= 0.0 { 1.0 } else { -1.0 };
        let mut beta = vec![0.0; nc];
        beta[0] = b1;
        beta[1] = b2;
        inits.push(beta);
    }
    // β_1, β_2, β_3.
    if nc >= 3 {
        if let Some(s) = solve_subset(&[(0, 0), (0, 1), (1, 1), (0, 2), (1, 2)]) {
            let sign = s[0].signum();
            let b1 = s[0].abs().sqrt();
            if b1 > 0.0 {
                let b2 = s[2].abs().sqrt() * if s[1] * sign >= 0.0 { 1.0 } else { -1.0 };
                let mut beta = vec![0.0; nc];
                beta[0] = b1;
                beta[1] = b2;
                beta[2] = sign * s[3] / b1;
                inits.push(beta);
            }
        }
    }

    let mut best: Option<(f64, Pose)> = None;
    for init in inits {
        let beta = gauss_newton_betas(init, &dv, &rho);
        let Some(pose) = pose_from_betas(&beta, &null, &alphas, &world, nc) else {
            continue;
        };
        let err = mean_reprojection_error(&pose, corrs, k);
        if err.is_finite() && best.as_ref().is_none_or(|(e, _)| err < *e) {
            best = Some((err, pose));
        }
    }
    best.map(|(_, p)| p).ok_or(Error::DegenerateConfiguration)
}

fn gauss_newton_betas(mut beta: Vec<f64>, dv: &[Vec<Vector3<f64>>], rho: &[f64]) -> Vec<f64> {
    let n = beta.len();
    let residuals = |beta: &[f64]| -> (DVector<f64>, DMatrix<f64>) {
        let mut r = DVector::zeros(dv.len());
        let mut j = DMatrix::zeros(dv.len(), n);
        for (p, d) in dv.iter().enumerate() {
            let v: Vector3<f64> = d.iter().zip(beta).map(|(x, b)| x * *b).sum();
            r[p] = v.norm_squared() - rho[p];
            for a in 0..n {
                j[(p, a)] = 2.0 * v.dot(&d[a]);
            }
        }
        (r, j)
    };
    let mut cost = residuals(&beta).0.norm_squared();
    for _ in 0..10 {
        let (r, j) = residuals(&beta);
        let Some(step) = j.svd(true, true).solve(&r, 1e-14).ok() else {
            break;
        };
        let cand: Vec<f64> = beta.iter().zip(step.iter()).map(|(b, s)| b - s).collect();
        let c = residuals(&cand).0.norm_squared();
        if !(c < cost) {
            break;
        }
        beta = cand;
        cost = c;
    }
    beta
}

fn pose_from_betas(
    beta: &[f64],
    null: &[DVector<f64>],
    alphas: &[Vec<f64>],
    world: &[Vector3<f64>],
    nc: usize,
) -> Option<Pose> {
    let ctrl: Vec<Vector3<f64>> = (0..nc)
        .map(|j| {
            let mut c = Vector3::zeros();
            for (v, b) in null.iter().zip(beta) {
                c += Vector3::new(v[3 * j], v[3 * j + 1], v[3 * j + 2]) * *b;
            }
            c
        })
        .collect();
    let mut cam: Vec<Vector3<f64>> = alphas
        .iter()
        .map(|a| a.iter().zip(&ctrl).map(|(w, c)| c * *w).sum())
        .collect();
    let mean_z = cam.iter().map(|p| p.z).sum::<f64>();
    if mean_z < 0.0 {
        cam.iter_mut().for_each(|p| *p = -*p);
    }
    if !cam.iter().all(|p| p.iter().all(|v| v.is_finite())) {
        return None;
    }
    align_rigid(world, &cam)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RansacConfig {
    pub max_iters: usize,
    pub inlier_px: f64,
    pub seed: u64,
    pub confidence: f64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self {
            max_iters: 400,
            inlier_px: 10.0,
            seed: 0,
            confidence: 0.99,
        }
    }
}

fn score(
    pose: &Pose,
    corrs: &[Correspondence],
    k: &CameraIntrinsics,
    threshold: f64,
) -> (Vec<usize>, f64) {
    let mut inliers = Vec::new();
    let mut total = 0.0;
    for (i, c) in corrs.iter().enumerate() {
        if let Ok(p) = k.project_camera(&pose.transform(&c.point)) {
            let e = (p - c.image).norm();
            if e < threshold {
                inliers.push(i);
                total += e;
            }
        }
    }
    let mean = if inliers.is_empty() {
        f64::INFINITY
    } else {
        total / inliers.len() as f64
    };
    (inliers, mean)
}

fn better(count: usize, err: f64, best: &Option<(Pose, Vec<usize>, f64)>) -> bool {
    match best {
        None => count > 0,
        Some((_, b, e)) => count > b.len() || (count == b.len() && err < *e),
    }
}

/// RANSAC over minimal 4-point EPnP samples, using random stream 0.
pub fn ransac_pnp(
    corrs: &CorrespondenceSet,
    k: &CameraIntrinsics,
    config: &RansacConfig,
) -> Result<PoseHypothesis> {
    ransac_pnp_stream(corrs, k, config, 0)
}

/// RANSAC drawing samples from the seeded stream `stream` (the template id in
/// coarse estimation), so parallel and serial runs agree.
pub fn ransac_pnp_stream(
    corrs: &CorrespondenceSet,
    k: &CameraIntrinsics,
    config: &RansacConfig,
    stream: u64,
) -> Result<PoseHypothesis> {
    let items = &corrs.items;
    let n = items.len();
    if n < 4 {
        return Err(Error::TooFewSamples {
            needed: 4,
            available: n,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(stream);
    let mut best: Option<(Pose, Vec<usize>, f64)> = None;
    let mut needed = config.max_iters;
    let mut iter = 0;
    while iter < config.max_iters.min(needed) {
        iter += 1;
        let idx = sample_indices(&mut rng, n, 4);
        let sample: Vec<Correspondence> = idx.iter().map(|i| items[i]).collect();
        let pts: Vec<Vector3<f64>> = sample.iter().map(|c| c.point).collect();
        if is_degenerate(&pts) {
            continue;
        }
        let Ok(pose) = solve_epnp(&sample, k) else {
            continue;
        };
        let (inliers, err) = score(&pose, items, k, config.inlier_px);
        if better(inliers.len(), err, &best) {
            let w = inliers.len() as f64 / n as f64;
            needed = adaptive_bound(w, config.confidence).min(config.max_iters);
            best = Some((pose, inliers, err));
        }
    }
    let Some((mut pose, mut inliers, mut err)) = best else {
        return Err(Error::NoModelFound);
    };
    if inliers.len() < 4 {
        return Err(Error::NoModelFound);
    }
    let subset: Vec<Correspondence> = inliers.iter().map(|&i| items[i]).collect();
    if let Ok(refit) = solve_epnp(&subset, k) {
        let (ri, re) = score(&refit, items, k, config.inlier_px);
        if ri.len() >= inliers.len() {
            pose = refit;
            inliers = ri;
            err = re;
        }
    }
    Ok(PoseHypothesis {
        pose,
        template_id: 0,
        inlier_count: inliers.len(),
        inlier_indices: inliers,
        mean_inlier_reproj_error: err,
    })
}

/// Iterations needed to draw one all-inlier 4-sample with the given confidence.
fn adaptive_bound(inlier_ratio: f64, confidence: f64) -> usize {
    let p_good = inlier_ratio.powi(4);
    if p_good >= 1.0 {
        return 1;
    }
    if p_good <= 0.0 {
        return usize::MAX;
    }
    let bound = (1.0 - confidence).ln() / (1.0 - p_good).ln();
    if bound.is_finite() {
        bound.ceil().max(1.0) as usize
    } else {
        usize::MAX
    }
}

/// Orders hypotheses best first: more inliers, then lower mean error, then lower template id.
pub fn rank_hypotheses(hyps: &mut [PoseHypothesis]) {
    hyps.sort_by(|a, b| {
        b.inlier_count
            .cmp(&a.inlier_count)
            .then(
                a.mean_inlier_reproj_error
                    .total_cmp(&b.mean_inlier_reproj_error),
            )
            .then(a.template_id.cmp(&b.template_id))
    });
}

/// Matches and RANSAC against each listed template, best first. Templates
/// without a model are skipped; an empty result means every template failed.
pub fn coarse_hypotheses(
    crop: &CropDescriptors,
    rep: &ObjectRepresentation,
    template_ids: &[u32],
    k_virtual: &CameraIntrinsics,
    config: &RansacConfig,
) -> Vec<PoseHypothesis> {
    let mut hyps: Vec<PoseHypothesis> = template_ids
        .par_iter()
        .filter_map(|&id| {
            let record = rep.template(id)?;
            let corrs = match_patches(crop, record).ok()?;
            let mut h = ransac_pnp_stream(&corrs, k_virtual, config, id as u64).ok()?;
            h.template_id = id;
            Some(h)
        })
        .collect();
    rank_hypotheses(&mut hyps);
    hyps
}

/// Best coarse pose over the `h` templates retrieved for the crop.
pub fn estimate_coarse(
    crop: &CropDescriptors,
    rep: &ObjectRepresentation,
    h: usize,
    k_virtual: &CameraIntrinsics,
    config: &RansacConfig,
) -> Result<PoseHypothesis> {
    let bow = crate::retrieval::bow_of(crop, rep)?;
    let retrieved = crate::retrieval::retrieve(&bow, rep, h);
    let ids: Vec<u32> = retrieved.ids().collect();
    coarse_hypotheses(crop, rep, &ids, k_virtual, config)
        .into_iter()
        .next()
        .ok_or(Error::NoModelFound)
}

/// Baseline pose from the template alone: keeps its rotation and aligns the
/// template's footprint circle with the bounding circle of the crop mask.
pub fn pose_from_top_template(
    record: &TemplateRecord,
    crop_mask: &Mask,
    k_virtual: &CameraIntrinsics,
) -> Result<Pose> {
    let circle = bounding_circle(crop_mask).ok_or(Error::EmptyMask)?;
    if !(circle.radius > 0.0) {
        return Err(Error::EmptyMask);
    }
    let kt = &record.intrinsics;
    let fp = record.footprint;
    let tz = record.pose.translation().z;
    let anchor_t = kt.unproject(&Vector2::new(fp.center[0], fp.center[1]), tz);
    let angular_t = fp.radius / kt.fx;
    let angular_m = circle.radius / k_virtual.fx;
    let scale = angular_t / angular_m;
    let anchor = k_virtual.unproject(
        &Vector2::new(circle.center[0], circle.center[1]),
        tz * scale,
    );
    let t = record.pose.translation() * scale + (anchor - anchor_t * scale);
    Pose::new(*record.pose.rotation(), t)
}
