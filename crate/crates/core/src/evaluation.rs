//! Pose-error functions (VSD, MSSD, MSPD) and Average Recall.

use std::path::Path;

use nalgebra::{Matrix3, Matrix4, Rotation3, Unit, Vector2, Vector3};
use rand::seq::index::sample as sample_indices;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, Pose};
use crate::raster::DepthMap;
use crate::rendering::{render, Mesh};

/// Default discretization of continuous symmetries (10° steps).
pub const CONTINUOUS_SYMMETRY_STEPS: usize = 36;

/// Global object symmetries as model-space rigid transforms. Identity comes first.
#[derive(Debug, Clone, PartialEq)]
pub struct SymmetrySet {
    transforms: Vec<Pose>,
}

impl Default for SymmetrySet {
    fn default() -> Self {
        Self::identity()
    }
}

impl SymmetrySet {
    pub fn identity() -> Self {
        Self {
            transforms: vec![Pose::identity()],
        }
    }

    /// Adds the identity when `transforms` lacks it.
    pub fn from_transforms(transforms: impl IntoIterator<Item = Pose>) -> Self {
        let mut set = Self::identity();
        for t in transforms {
            set.push(t);
        }
        set
    }

    fn push(&mut self, t: Pose) {
        let duplicate = self.transforms.iter().any(|s| {
            (s.rotation() - t.rotation()).abs().max() < 1e-12
                && (s.translation() - t.translation()).norm() < 1e-9
        });
        if !duplicate {
            self.transforms.push(t);
        }
    }

    /// Adds `steps − 1` rotations about the line through `offset` along `axis`.
    pub fn add_continuous(
        &mut self,
        axis: Vector3<f64>,
        offset: Vector3<f64>,
        steps: usize,
    ) -> Result<()> {
        if !(axis.norm() > 0.0) || steps == 0 {
            return Err(Error::InvalidConfig(
                "continuous symmetry needs a nonzero axis and steps".into(),
            ));
        }
        let axis = Unit::new_normalize(axis);
        for i in 1..steps {
            let angle = std::f64::consts::TAU * i as f64 / steps as f64;
            let r = Rotation3::from_axis_angle(&axis, angle).into_inner();
            self.push(Pose::from_rotation_unchecked(r, offset - r * offset));
        }
        Ok(())
    }

    pub fn transforms(&self) -> &[Pose] {
        &self.transforms
    }

    pub fn len(&self) -> usize {
        self.transforms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transforms.is_empty()
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text).map_err(|e| match e {
            Error::Parse { message, .. } => Error::parse(path.display().to_string(), message),
            other => other,
        })
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let file: SymmetryFile =
            serde_json::from_str(text).map_err(|e| Error::parse("symmetry file", e))?;
        let mut set = Self::identity();
        for m in &file.transforms {
            let m4 = Matrix4::from_row_slice(m);
            let r: Matrix3<f64> = m4.fixed_view::<3, 3>(0, 0).into_owned();
            let t = Vector3::new(m4[(0, 3)], m4[(1, 3)], m4[(2, 3)]);
            set.push(Pose::new(r, t)?);
        }
        for c in &file.continuous {
            set.add_continuous(
                Vector3::from(c.axis),
                Vector3::from(c.offset),
                c.steps.unwrap_or(CONTINUOUS_SYMMETRY_STEPS),
            )?;
        }
        Ok(set)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct SymmetryFile {
    #[serde(default)]
    transforms: Vec<[f64; 16]>,
    #[serde(default)]
    continuous: Vec<ContinuousSymmetry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ContinuousSymmetry {
    axis: [f64; 3],
    #[serde(default)]
    offset: [f64; 3],
    #[serde(default)]
    steps: Option<usize>,
}

/// Maximum symmetry-aware surface distance in millimeters.
pub fn mssd(est: &Pose, gt: &Pose, vertices: &[Vector3<f64>], sym: &SymmetrySet) -> f64 {
    let moved: Vec<Vector3<f64>> = vertices.iter().map(|x| est.transform(x)).collect();
    sym.transforms()
        .iter()
        .map(|s| {
            vertices
                .iter()
                .zip(&moved)
                .map(|(x, e)| (e - gt.transform(&s.transform(x))).norm())
                .fold(0.0, f64::max)
        })
        .fold(f64::INFINITY, f64::min)
}

/// Maximum symmetry-aware projection distance in pixels.
pub fn mspd(
    est: &Pose,
    gt: &Pose,
    vertices: &[Vector3<f64>],
    sym: &SymmetrySet,
    k: &CameraIntrinsics,
) -> Result<f64> {
    let pe: Vec<Vector2<f64>> = vertices
        .iter()
        .map(|x| k.project_camera(&est.transform(x)))
        .collect::<Result<_>>()?;
    let mut best = f64::INFINITY;
    for s in sym.transforms() {
        let pg: Vec<Vector2<f64>> = vertices
            .iter()
            .map(|x| k.project_camera(&gt.transform(&s.transform(x))))
            .collect::<Result<_>>()?;
        let worst = pe
            .iter()
            .zip(&pg)
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max);
        best = best.min(worst);
    }
    Ok(best)
}

/// Up to `max` mesh vertices drawn without replacement (all of them when fewer).
pub fn subsample_vertices(mesh: &Mesh, max: usize, seed: u64) -> Vec<Vector3<f64>> {
    let v = mesh.vertices();
    if v.len() <= max {
        return v.to_vec();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = sample_indices(&mut rng, v.len(), max).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| v[i]).collect()
}

/// Distance from the camera center to the surface point seen at each pixel (0 = background).
pub fn distance_map(depth: &DepthMap, k: &CameraIntrinsics) -> Vec<f64> {
    let w = depth.width();
    depth
        .values()
        .iter()
        .enumerate()
        .map(|(i, &z)| {
            if z > 0.0 {
                let (x, y) = ((i % w) as f64 + 0.5, (i / w) as f64 + 0.5);
                k.unproject(&Vector2::new(x, y), z).norm()
            } else {
                0.0
            }
        })
        .collect()
}

/// Rendered-surface tolerance behind the scene surface for visibility, in millimeters.
pub const VISIBILITY_DELTA: f64 = 15.0;

fn visibility(dist: &[f64], scene: Option<&[f64]>) -> Vec<bool> {
    match scene {
        None => dist.iter().map(|&d| d > 0.0).collect(),
        Some(s) => dist
            .iter()
            .zip(s)
            .map(|(&d, &sd)| d > 0.0 && (sd <= 0.0 || d - sd <= VISIBILITY_DELTA))
            .collect(),
    }
}

/// Visible surface discrepancy at each misalignment tolerance in `taus` (mm).
pub fn vsd_curve(
    est: &Pose,
    gt: &Pose,
    mesh: &Mesh,
    k: &CameraIntrinsics,
    taus: &[f64],
    scene_depth: Option<&DepthMap>,
) -> Result<Vec<f64>> {
    let d_est = distance_map(&render(mesh, est, k).depth, k);
    let d_gt = distance_map(&render(mesh, gt, k).depth, k);
    let scene = match scene_depth {
        Some(s) => {
            if s.width() != k.width as usize || s.height() != k.height as usize {
                return Err(Error::SizeMismatch(
                    "scene depth differs from the camera size".into(),
                ));
            }
            Some(distance_map(s, k))
        }
        None => None,
    };
    let v_est = visibility(&d_est, scene.as_deref());
    let v_gt = visibility(&d_gt, scene.as_deref());
    let union = v_est.iter().zip(&v_gt).filter(|(a, b)| **a || **b).count();
    if union == 0 {
        return Err(Error::EmptyRender);
    }
    Ok(taus
        .iter()
        .map(|&tau| {
            let matched = (0..d_est.len())
                .filter(|&i| v_est[i] && v_gt[i] && (d_est[i] - d_gt[i]).abs() <= tau)
                .count();
            (union - matched) as f64 / union as f64
        })
        .collect())
}

pub fn vsd(
    est: &Pose,
    gt: &Pose,
    mesh: &Mesh,
    k: &CameraIntrinsics,
    tau: f64,
    scene_depth: Option<&DepthMap>,
) -> Result<f64> {
    Ok(vsd_curve(est, gt, mesh, k, &[tau], scene_depth)?[0])
}

/// Threshold grids of the evaluation protocol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdGrid {
    /// VSD misalignment tolerance as a fraction of the object diameter.
    pub vsd_tau: Vec<f64>,
    /// VSD correctness thresholds on the error fraction.
    pub vsd_theta: Vec<f64>,
    /// MSSD thresholds as a fraction of the object diameter.
    pub mssd: Vec<f64>,
    /// MSPD thresholds in units of `image_width / 640` pixels.
    pub mspd: Vec<f64>,
}

impl Default for ThresholdGrid {
    fn default() -> Self {
        let steps = |scale: f64| (1..=10).map(|i| i as f64 * scale).collect::<Vec<_>>();
        Self {
            vsd_tau: steps(0.05),
            vsd_theta: steps(0.05),
            mssd: steps(0.05),
            mspd: steps(5.0),
        }
    }
}

/// Errors of one annotated instance. Missing estimates carry infinite errors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorRecord {
    pub image_id: String,
    pub object_id: String,
    /// One VSD value per `vsd_tau` entry.
    pub vsd: Vec<f64>,
    pub mssd: f64,
    pub mspd: f64,
    pub diameter: f64,
    pub image_width: u32,
}

impl ErrorRecord {
    pub fn missing(
        image_id: &str,
        object_id: &str,
        diameter: f64,
        image_width: u32,
        grid: &ThresholdGrid,
    ) -> Self {
        Self {
            image_id: image_id.into(),
            object_id: object_id.into(),
            vsd: vec![f64::INFINITY; grid.vsd_tau.len()],
            mssd: f64::INFINITY,
            mspd: f64::INFINITY,
            diameter,
            image_width,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VsdCurvePoint {
    pub tau: f64,
    pub theta: f64,
    pub recall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub threshold: f64,
    pub recall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ARReport {
    pub instances: usize,
    pub vsd_curve: Vec<VsdCurvePoint>,
    pub mssd_curve: Vec<CurvePoint>,
    pub mspd_curve: Vec<CurvePoint>,
    pub ar_vsd: f64,
    pub ar_mssd: f64,
    pub ar_mspd: f64,
    pub ar: f64,
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Recall at every grid threshold (error strictly below it) and the averages.
/// An empty record list yields zero recall everywhere.
pub fn average_recall(records: &[ErrorRecord], grid: &ThresholdGrid) -> ARReport {
    let n = records.len();
    let recall = |hits: usize| if n == 0 { 0.0 } else { hits as f64 / n as f64 };
    let mut vsd_curve = Vec::new();
    for (ti, &tau) in grid.vsd_tau.iter().enumerate() {
        for &theta in &grid.vsd_theta {
            let hits = records
                .iter()
                .filter(|r| r.vsd.get(ti).is_some_and(|&e| e < theta))
                .count();
            vsd_curve.push(VsdCurvePoint {
                tau,
                theta,
                recall: recall(hits),
            });
        }
    }
    let mssd_curve: Vec<CurvePoint> = grid
        .mssd
        .iter()
        .map(|&th| CurvePoint {
            threshold: th,
            recall: recall(records.iter().filter(|r| r.mssd < th * r.diameter).count()),
        })
        .collect();
    let mspd_curve: Vec<CurvePoint> = grid
        .mspd
        .iter()
        .map(|&th| CurvePoint {
            threshold: th,
            recall: recall(
                records
                    .iter()
                    .filter(|r| r.mspd < th * r.image_width as f64 / 640.0)
                    .count(),
            ),
        })
        .collect();
    let ar_vsd = mean(&vsd_curve.iter().map(|p| p.recall).collect::<Vec<_>>());
    let ar_mssd = mean(&mssd_curve.iter().map(|p| p.recall).collect::<Vec<_>>());
    let ar_mspd = mean(&mspd_curve.iter().map(|p| p.recall).collect::<Vec<_>>());
    ARReport {
        instances: n,
        vsd_curve,
        mssd_curve,
        mspd_curve,
        ar_vsd,
        ar_mssd,
        ar_mspd,
        ar: (ar_vsd + ar_mssd + ar_mspd) / 3.0,
    }
}

/// Errors of one estimate against its annotation. Projection failures count as
/// infinite MSPD; VSD uses tolerances `vsd_tau · diameter`.
pub fn evaluate_instance(
    est: &Pose,
    gt: &GroundTruthAnnotation,
    mesh: &Mesh,
    vertices: &[Vector3<f64>],
    sym: &SymmetrySet,
    grid: &ThresholdGrid,
) -> Result<ErrorRecord> {
    let pose_gt = gt.pose()?;
    let k = gt.intrinsics()?;
    let diameter = mesh.diameter();
    let taus: Vec<f64> = grid.vsd_tau.iter().map(|t| t * diameter).collect();
    let vsd = vsd_curve(est, &pose_gt, mesh, &k, &taus, None)?;
    let mspd = match mspd(est, &pose_gt, vertices, sym, &k) {
        Ok(v) => v,
        Err(Error::PointBehindCamera(_)) => f64::INFINITY,
        Err(e) => return Err(e),
    };
    Ok(ErrorRecord {
        image_id: gt.image_id.clone(),
        object_id: gt.object_id.clone(),
        vsd,
        mssd: mssd(est, &pose_gt, vertices, sym),
        mspd,
        diameter,
        image_width: k.width,
    })
}

/// One annotated object instance; `K` fields are flattened into the record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthAnnotation {
    pub image_id: String,
    pub object_id: String,
    #[serde(rename = "R")]
    pub rotation: [f64; 9],
    pub t: [f64; 3],
    #[serde(flatten)]
    pub k: CameraIntrinsics,
    #[serde(default = "full_visibility")]
    pub visibility: f64,
}

fn full_visibility() -> f64 {
    1.0
}

impl GroundTruthAnnotation {
    pub fn new(
        image_id: &str,
        object_id: &str,
        pose: &Pose,
        k: &CameraIntrinsics,
        visibility: f64,
    ) -> Self {
        let rm = pose.to_row_major();
        Self {
            image_id: image_id.into(),
            object_id: object_id.into(),
            rotation: rm[..9].try_into().unwrap(),
            t: rm[9..].try_into().unwrap(),
            k: *k,
            visibility,
        }
    }

    pub fn pose(&self) -> Result<Pose> {
        Pose::orthonormalized(
            Matrix3::from_row_slice(&self.rotation),
            Vector3::from(self.t),
        )
    }

    pub fn intrinsics(&self) -> Result<CameraIntrinsics> {
        self.k.validate()?;
        Ok(self.k)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.visibility) {
            return Err(Error::InvalidConfig(format!(
                "visibility {} outside [0,1]",
                self.visibility
            )));
        }
        self.pose()?;
        self.intrinsics()?;
        Ok(())
    }
}

pub fn load_ground_truth(path: impl AsRef<Path>) -> Result<Vec<GroundTruthAnnotation>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let gts: Vec<GroundTruthAnnotation> =
        serde_json::from_str(&text).map_err(|e| Error::parse(path.display().to_string(), e))?;
    for g in &gts {
        g.validate()?;
    }
    Ok(gts)
}

pub fn save_ground_truth(gts: &[GroundTruthAnnotation], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(gts).expect("serializable");
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}
