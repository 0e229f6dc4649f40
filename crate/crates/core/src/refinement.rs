//! Featuremetric pose refinement with a robust loss and Levenberg-Marquardt.
//!
//! Entry descriptors are compared with the query feature map sampled at the
//! entry's projection. Grid coordinates are `pixel / patch_size − 0.5`, so
//! patch centers land on integer grid positions.

use nalgebra::{Matrix2x3, Matrix3, Matrix6, Vector2, Vector3, Vector6};

use crate::error::{Error, Result};
use crate::features::FeatureGrid;
use crate::geometry::{CameraIntrinsics, Pose};
use crate::onboarding::{PcaModel, TemplateRecord};

/// Dense grid of reduced descriptors covering the whole crop.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryFeatureMap {
    rows: usize,
    cols: usize,
    dim: usize,
    patch_size: usize,
    data: Vec<f64>,
}

impl QueryFeatureMap {
    pub fn new(
        rows: usize,
        cols: usize,
        dim: usize,
        patch_size: usize,
        data: Vec<f64>,
    ) -> Result<Self> {
        if rows == 0 || cols == 0 || dim == 0 || patch_size == 0 {
            return Err(Error::SizeMismatch(
                "feature map dimensions must be positive".into(),
            ));
        }
        if data.len() != rows * cols * dim {
            return Err(Error::DimMismatch {
                expected: rows * cols * dim,
                actual: data.len(),
            });
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidConfig(
                "feature map holds non-finite values".into(),
            ));
        }
        Ok(Self {
            rows,
            cols,
            dim,
            patch_size,
            data,
        })
    }

    /// Builds the map by reducing every patch of a raw crop grid.
    pub fn from_grid(grid: &FeatureGrid, pca: &PcaModel) -> Result<Self> {
        if grid.dim() != pca.input_dim() {
            return Err(Error::DimMismatch {
                expected: pca.input_dim(),
                actual: grid.dim(),
            });
        }
        let d = pca.output_dim();
        let mut data = Vec::with_capacity(grid.len() * d);
        let mut buf = vec![0.0f32; d];
        for row in 0..grid.grid_h() {
            for col in 0..grid.grid_w() {
                pca.project_into(grid.descriptor(row, col), &mut buf);
                data.extend(buf.iter().map(|&v| v as f64));
            }
        }
        Self::new(grid.grid_h(), grid.grid_w(), d, grid.patch_size(), data)
    }

    /// Map whose cell `(row, col)` holds `f(row, col)`.
    pub fn from_fn(
        rows: usize,
        cols: usize,
        dim: usize,
        patch_size: usize,
        mut f: impl FnMut(usize, usize) -> Vec<f64>,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(rows * cols * dim);
        for r in 0..rows {
            for c in 0..cols {
                let v = f(r, c);
                if v.len() != dim {
                    return Err(Error::DimMismatch {
                        expected: dim,
                        actual: v.len(),
                    });
                }
                data.extend(v);
            }
        }
        Self::new(rows, cols, dim, patch_size, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn patch_size(&self) -> usize {
        self.patch_size
    }

    pub fn cell(&self, row: usize, col: usize) -> &[f64] {
        let o = (row * self.cols + col) * self.dim;
        &self.data[o..o + self.dim]
    }

    /// Grid coordinate (x = column, y = row) of a crop pixel.
    pub fn pixel_to_grid(&self, u: &Vector2<f64>) -> Vector2<f64> {
        let s = self.patch_size as f64;
        Vector2::new(u.x / s - 0.5, u.y / s - 0.5)
    }
}

/// Bilinearly sampled descriptor with its derivatives along x and y.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub value: Vec<f64>,
    pub dx: Vec<f64>,
    pub dy: Vec<f64>,
}

fn axis(p: f64, n: usize) -> (usize, f64, bool) {
    let max = (n - 1) as f64;
    let clamped = !(0.0..=max).contains(&p);
    let q = if p.is_nan() { 0.0 } else { p.clamp(0.0, max) };
    let i0 = (q.floor() as usize).min(n.saturating_sub(2));
    (i0, q - i0 as f64, clamped || n == 1)
}

/// Bilinear blend at grid point `p` (x = column, y = row), clamped to the grid.
/// Derivatives vanish along clamped axes.
pub fn sample_bilinear(map: &QueryFeatureMap, p: &Vector2<f64>) -> Sample {
    let (x0, fx, cx) = axis(p.x, map.cols);
    let (y0, fy, cy) = axis(p.y, map.rows);
    let x1 = (x0 + 1).min(map.cols - 1);
    let y1 = (y0 + 1).min(map.rows - 1);
    let (f00, f10, f01, f11) = (
        map.cell(y0, x0),
        map.cell(y0, x1),
        map.cell(y1, x0),
        map.cell(y1, x1),
    );
    let d = map.dim;
    let mut s = Sample {
        value: vec![0.0; d],
        dx: vec![0.0; d],
        dy: vec![0.0; d],
    };
    for i in 0..d {
        s.value[i] = (1.0 - fx) * (1.0 - fy) * f00[i]
            + fx * (1.0 - fy) * f10[i]
            + (1.0 - fx) * fy * f01[i]
            + fx * fy * f11[i];
        if !cx {
            s.dx[i] = (1.0 - fy) * (f10[i] - f00[i]) + fy * (f11[i] - f01[i]);
        }
        if !cy {
            s.dy[i] = (1.0 - fx) * (f01[i] - f00[i]) + fx * (f11[i] - f10[i]);
        }
    }
    s
}

/// General robust loss with shape `alpha` and scale `c`.
pub fn barron_rho(z: f64, alpha: f64, c: f64) -> f64 {
    let x = (z / c) * (z / c);
    if alpha == 2.0 {
        0.5 * x
    } else if alpha == 0.0 {
        (0.5 * x).ln_1p()
    } else {
        let b = (alpha - 2.0).abs();
        b / alpha * ((x / b + 1.0).powf(alpha / 2.0) - 1.0)
    }
}

/// Derivative of [`barron_rho`] with respect to `z`.
pub fn barron_rho_derivative(z: f64, alpha: f64, c: f64) -> f64 {
    let x = (z / c) * (z / c);
    let scale = z / (c * c);
    if alpha == 2.0 {
        scale
    } else {
        let b = (alpha - 2.0).abs();
        scale * (x / b + 1.0).powf(alpha / 2.0 - 1.0)
    }
}

/// Supremum of the loss for `alpha < 0`, `None` when unbounded.
pub fn barron_rho_bound(alpha: f64) -> Option<f64> {
    (alpha < 0.0).then(|| (alpha - 2.0).abs() / alpha.abs())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RefinementConfig {
    pub max_iters: usize,
    pub barron_alpha: f64,
    pub barron_c: f64,
    pub initial_damping: f64,
    pub damping_up: f64,
    pub damping_down: f64,
    pub convergence_rel_tol: f64,
}

impl Default for RefinementConfig {
    fn default() -> Self {
        Self {
            max_iters: 30,
            barron_alpha: -5.0,
            barron_c: 0.5,
            initial_damping: 1e-3,
            damping_up: 10.0,
            damping_down: 10.0,
            convergence_rel_tol: 1e-6,
        }
    }
}

impl RefinementConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters < 1 {
            return Err(Error::InvalidConfig(
                "refinement needs at least one iteration".into(),
            ));
        }
        if !(self.barron_c > 0.0) || !self.barron_alpha.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "loss scale must be positive and shape finite (alpha={}, c={})",
                self.barron_alpha, self.barron_c
            )));
        }
        if !(self.initial_damping > 0.0 && self.damping_up > 1.0 && self.damping_down > 1.0) {
            return Err(Error::InvalidConfig(
                "damping must be positive with factors above 1".into(),
            ));
        }
        Ok(())
    }
}

/// Per-entry residual `sqrt(ρ(‖e‖))` and, when requested, its gradient over the
/// local increment `[ω; v]`.
fn entry_residual(
    pose: &Pose,
    record: &TemplateRecord,
    i: usize,
    map: &QueryFeatureMap,
    k: &CameraIntrinsics,
    cfg: &RefinementConfig,
    with_jacobian: bool,
) -> (f64, Vector6<f64>) {
    let (alpha, c) = (cfg.barron_alpha, cfg.barron_c);
    let x = record.point(i);
    let xc = pose.transform(&x);
    let desc = record.descriptor(i);
    if !(xc.z > 1e-9) {
        let rho = barron_rho_bound(alpha).unwrap_or_else(|| {
            let norm = desc
                .iter()
                .map(|&v| (v as f64) * (v as f64))
                .sum::<f64>()
                .sqrt();
            barron_rho(norm, alpha, c)
        });
        return (rho.sqrt(), Vector6::zeros());
    }
    let uv = Vector2::new(k.fx * xc.x / xc.z + k.cx, k.fy * xc.y / xc.z + k.cy);
    let g = map.pixel_to_grid(&uv);
    let s = sample_bilinear(map, &g);
    let e: Vec<f64> = desc
        .iter()
        .zip(&s.value)
        .map(|(&p, q)| p as f64 - q)
        .collect();
    let z = e.iter().map(|v| v * v).sum::<f64>().sqrt();
    let r = barron_rho(z, alpha, c).sqrt();
    if !with_jacobian || z < 1e-12 || r < 1e-150 {
        return (r, Vector6::zeros());
    }
    // dr/dz · (e/z)ᵀ · de/dg with de/dg = −[dx dy].
    let scale = barron_rho_derivative(z, alpha, c) / (2.0 * r * z);
    let mut dr_dg = Vector2::zeros();
    for ((ej, dx), dy) in e.iter().zip(&s.dx).zip(&s.dy) {
        dr_dg.x -= ej * dx;
        dr_dg.y -= ej * dy;
    }
    dr_dg *= scale;
    let iz = 1.0 / xc.z;
    let dpi = Matrix2x3::new(
        k.fx * iz,
        0.0,
        -k.fx * xc.x * iz * iz,
        0.0,
        k.fy * iz,
        -k.fy * xc.y * iz * iz,
    );
    let dr_dxc = dpi.transpose() * dr_dg / map.patch_size as f64;
    // ∂X/∂ω = −R[x]×, ∂X/∂v = R.
    let rot = pose.rotation();
    let d_omega = -(rot * skew(&x)).transpose() * dr_dxc;
    let d_v = rot.transpose() * dr_dxc;
    (
        r,
        Vector6::new(d_omega.x, d_omega.y, d_omega.z, d_v.x, d_v.y, d_v.z),
    )
}

fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// `Σ ρ(‖p_i − F(π(R·x_i + t))‖)` over the record's entries.
pub fn featuremetric_cost(
    pose: &Pose,
    record: &TemplateRecord,
    map: &QueryFeatureMap,
    k: &CameraIntrinsics,
    cfg: &RefinementConfig,
) -> f64 {
    (0..record.len())
        .map(|i| {
            let (r, _) = entry_residual(pose, record, i, map, k, cfg, false);
            r * r
        })
        .sum()
}

/// Residual vector and its Jacobian over the local increment, one row per entry.
pub fn residuals_and_jacobian(
    pose: &Pose,
    record: &TemplateRecord,
    map: &QueryFeatureMap,
    k: &CameraIntrinsics,
    cfg: &RefinementConfig,
) -> (Vec<f64>, Vec<Vector6<f64>>) {
    (0..record.len())
        .map(|i| entry_residual(pose, record, i, map, k, cfg, true))
        .unzip()
}

/// Gradient of [`featuremetric_cost`] over the local increment.
pub fn cost_gradient(
    pose: &Pose,
    record: &TemplateRecord,
    map: &QueryFeatureMap,
    k: &CameraIntrinsics,
    cfg: &RefinementConfig,
) -> Vector6<f64> {
    let (r, j) = residuals_and_jacobian(pose, record, map, k, cfg);
    r.iter().zip(&j).map(|(ri, ji)| ji * (2.0 * ri)).sum()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RefinementResult {
    pub pose: Pose,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub iterations: usize,
}

const MAX_DAMPING: f64 = 1e12;

/// Levenberg-Marquardt with Marquardt diagonal scaling. Only cost-decreasing
/// steps are accepted, so the returned cost never exceeds the initial one.
pub fn refine(
    pose_init: &Pose,
    record: &TemplateRecord,
    map: &QueryFeatureMap,
    k: &CameraIntrinsics,
    cfg: &RefinementConfig,
) -> Result<RefinementResult> {
    cfg.validate()?;
    if record.is_empty() {
        return Err(Error::EmptyDescriptorSet);
    }
    if record.dim() != map.dim() {
        return Err(Error::DimMismatch {
            expected: map.dim(),
            actual: record.dim(),
        });
    }
    let mut pose = *pose_init;
    let initial_cost = featuremetric_cost(&pose, record, map, k, cfg);
    let mut cost = initial_cost;
    let mut lambda = cfg.initial_damping;
    let mut iterations = 0;
    'outer: while iterations < cfg.max_iters && cost > 0.0 {
        iterations += 1;
        let (r, j) = residuals_and_jacobian(&pose, record, map, k, cfg);
        let mut a = Matrix6::<f64>::zeros();
        let mut g = Vector6::<f64>::zeros();
        for (ri, ji) in r.iter().zip(&j) {
            a += ji * ji.transpose();
            g += ji * *ri;
        }
        if g.norm() == 0.0 {
            break;
        }
        loop {
            if lambda > MAX_DAMPING {
                break 'outer;
            }
            let mut damped = a;
            for d in 0..6 {
                damped[(d, d)] += lambda * a[(d, d)].max(1e-12);
            }
            let step = damped
                .cholesky()
                .map(|ch| -ch.solve(&g))
                .filter(|s| s.iter().all(|v| v.is_finite()));
            if let Some(step) = step {
                let cand = pose.perturbed(&[step[0], step[1], step[2], step[3], step[4], step[5]]);
                let c = featuremetric_cost(&cand, record, map, k, cfg);
                if c < cost {
                    let rel = (cost - c) / cost;
                    pose = cand;
                    cost = c;
                    lambda = (lambda / cfg.damping_down).max(1e-12);
                    if rel < cfg.convergence_rel_tol {
                        break 'outer;
                    }
                    break;
                }
            }
            lambda *= cfg.damping_up;
        }
    }
    Ok(RefinementResult {
        pose,
        initial_cost,
        final_cost: cost,
        iterations,
    })
}
