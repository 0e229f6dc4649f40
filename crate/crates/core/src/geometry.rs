//! Rigid transforms, pinhole cameras and the virtual-camera perspective crop.

use std::path::Path;

use nalgebra::{Matrix3, Rotation3, Vector2, Vector3, SVD};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{Mask, RgbImage};

const ROTATION_TOLERANCE: f64 = 1e-9;

/// Rigid transform from model space to camera space. Translations are in millimeters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl Pose {
    /// Builds a pose, rejecting matrices that are not proper rotations.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let orth = (rotation * rotation.transpose() - Matrix3::identity())
            .abs()
            .max();
        let det = rotation.determinant();
        if !(orth <= ROTATION_TOLERANCE && (det - 1.0).abs() <= ROTATION_TOLERANCE)
            || !translation.iter().all(|v| v.is_finite())
        {
            return Err(Error::InvalidPose(format!(
                "orthonormality error {orth:.3e}, det {det}"
            )));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    /// Projects `m` onto the closest rotation (in Frobenius norm) before building the pose.
    pub fn orthonormalized(m: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let rotation = nearest_rotation(&m)
            .ok_or_else(|| Error::InvalidPose("matrix cannot be orthonormalized".into()))?;
        Self::new(rotation, translation)
    }

    pub(crate) fn from_rotation_unchecked(
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
    ) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: t,
        }
    }

    /// Rotation given as an axis-angle vector (radians).
    pub fn from_axis_angle(axis_angle: Vector3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation: Rotation3::new(axis_angle).into_inner(),
            translation,
        }
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    #[inline]
    pub fn transform(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * x + self.translation
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    /// Right-composes a local increment `[ω; v]`: `R' = R·Exp(ω)`, `t' = R·v + t`.
    pub fn perturbed(&self, delta: &[f64; 6]) -> Pose {
        let omega = Vector3::new(delta[0], delta[1], delta[2]);
        let v = Vector3::new(delta[3], delta[4], delta[5]);
        Pose {
            rotation: self.rotation * Rotation3::new(omega).into_inner(),
            translation: self.rotation * v + self.translation,
        }
    }

    /// Geodesic distance between the two rotations, in radians.
    pub fn rotation_angle_to(&self, other: &Pose) -> f64 {
        rotation_angle(&(self.rotation.transpose() * other.rotation))
    }

    /// Row-major rotation followed by the translation, the layout used by every file format.
    pub fn to_row_major(&self) -> [f64; 12] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[(0, 0)],
            r[(0, 1)],
            r[(0, 2)],
            r[(1, 0)],
            r[(1, 1)],
            r[(1, 2)],
            r[(2, 0)],
            r[(2, 1)],
            r[(2, 2)],
            t.x,
            t.y,
            t.z,
        ]
    }

    pub fn from_row_major(rotation: &[f64], translation: &[f64]) -> Result<Pose> {
        if rotation.len() != 9 || translation.len() != 3 {
            return Err(Error::InvalidPose(
                "expected 9 rotation and 3 translation values".into(),
            ));
        }
        Pose::new(
            Matrix3::from_row_slice(rotation),
            Vector3::from_column_slice(translation),
        )
    }

    /// Largest deviation from `R·Rᵀ = I` and `det R = 1`.
    pub fn rotation_error(&self) -> f64 {
        let orth = (self.rotation * self.rotation.transpose() - Matrix3::identity())
            .abs()
            .max();
        orth.max((self.rotation.determinant() - 1.0).abs())
    }
}

/// Angle of a rotation matrix, robust near 0 and π.
pub fn rotation_angle(r: &Matrix3<f64>) -> f64 {
    let cos = ((r.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let skew = Vector3::new(
        r[(2, 1)] - r[(1, 2)],
        r[(0, 2)] - r[(2, 0)],
        r[(1, 0)] - r[(0, 1)],
    );
    let sin = 0.5 * skew.norm();
    sin.atan2(cos)
}

/// Closest proper rotation to `m` (polar decomposition via SVD).
pub fn nearest_rotation(m: &Matrix3<f64>) -> Option<Matrix3<f64>> {
    if !m.iter().all(|v| v.is_finite()) {
        return None;
    }
    let svd = SVD::new(*m, true, true);
    let u = svd.u?;
    let v_t = svd.v_t?;
    let mut r = u * v_t;
    if r.determinant() < 0.0 {
        let mut d = Matrix3::identity();
        d[(2, 2)] = -1.0;
        r = u * d * v_t;
    }
    Some(r)
}

/// Pinhole intrinsics. Field names are the on-disk JSON keys.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Result<Self> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0 && self.fx.is_finite() && self.fy.is_finite()) {
            return Err(Error::InvalidIntrinsics(format!(
                "focal lengths must be positive (fx={}, fy={})",
                self.fx, self.fy
            )));
        }
        if !(self.cx.is_finite() && self.cy.is_finite()) {
            return Err(Error::InvalidIntrinsics(
                "non-finite principal point".into(),
            ));
        }
        if self.width < 1 || self.height < 1 {
            return Err(Error::InvalidIntrinsics(
                "image size must be at least 1×1".into(),
            ));
        }
        Ok(())
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    pub fn inverse_matrix(&self) -> Matrix3<f64> {
        Matrix3::new(
            1.0 / self.fx,
            0.0,
            -self.cx / self.fx,
            0.0,
            1.0 / self.fy,
            -self.cy / self.fy,
            0.0,
            0.0,
            1.0,
        )
    }

    /// Projects a camera-space point.
    #[inline]
    pub fn project_camera(&self, p: &Vector3<f64>) -> Result<Vector2<f64>> {
        if p.z <= 0.0 || p.z.is_nan() {
            return Err(Error::PointBehindCamera(p.z));
        }
        Ok(Vector2::new(
            self.fx * p.x / p.z + self.cx,
            self.fy * p.y / p.z + self.cy,
        ))
    }

    /// Camera-space point at depth `z` on the ray through pixel `u`.
    #[inline]
    pub fn unproject(&self, u: &Vector2<f64>, z: f64) -> Vector3<f64> {
        Vector3::new(
            (u.x - self.cx) * z / self.fx,
            (u.y - self.cy) * z / self.fy,
            z,
        )
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let k: CameraIntrinsics =
            serde_json::from_str(&text).map_err(|e| Error::parse(path.display().to_string(), e))?;
        k.validate()?;
        Ok(k)
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).expect("intrinsics serialize");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Projects a model point into the image.
pub fn project(x: &Vector3<f64>, pose: &Pose, k: &CameraIntrinsics) -> Result<Vector2<f64>> {
    k.project_camera(&pose.transform(x))
}

/// Axis-aligned box in continuous pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundingBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BoundingBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Self {
        Self {
            x_min,
            y_min,
            x_max,
            y_max,
        }
    }

    pub fn from_points<'a>(pts: impl IntoIterator<Item = &'a Vector2<f64>>) -> Option<Self> {
        let mut it = pts.into_iter();
        let first = it.next()?;
        let mut bb = BoundingBox::new(first.x, first.y, first.x, first.y);
        for p in it {
            bb.x_min = bb.x_min.min(p.x);
            bb.y_min = bb.y_min.min(p.y);
            bb.x_max = bb.x_max.max(p.x);
            bb.y_max = bb.y_max.max(p.y);
        }
        Some(bb)
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn longer_side(&self) -> f64 {
        self.width().max(self.height())
    }

    pub fn center(&self) -> Vector2<f64> {
        Vector2::new(
            0.5 * (self.x_min + self.x_max),
            0.5 * (self.y_min + self.y_max),
        )
    }

    pub fn corners(&self) -> [Vector2<f64>; 4] {
        [
            Vector2::new(self.x_min, self.y_min),
            Vector2::new(self.x_max, self.y_min),
            Vector2::new(self.x_max, self.y_max),
            Vector2::new(self.x_min, self.y_max),
        ]
    }
}

/// A virtual pinhole camera looking through the center of a detection.
#[derive(Debug, Clone, PartialEq)]
pub struct VirtualCrop {
    pub virtual_intrinsics: CameraIntrinsics,
    /// Maps original-camera coordinates to virtual-camera coordinates.
    pub rotation_to_virtual: Matrix3<f64>,
    /// Original pixels → crop pixels.
    pub homography: Matrix3<f64>,
    homography_inv: Matrix3<f64>,
}

impl VirtualCrop {
    /// Assembles a crop from explicit parts; the homography is taken as given.
    pub fn from_parts(
        virtual_intrinsics: CameraIntrinsics,
        rotation_to_virtual: Matrix3<f64>,
        homography: Matrix3<f64>,
    ) -> Result<Self> {
        let homography_inv = homography
            .try_inverse()
            .ok_or_else(|| Error::InvalidConfig("singular crop homography".into()))?;
        Ok(Self {
            virtual_intrinsics,
            rotation_to_virtual,
            homography,
            homography_inv,
        })
    }

    pub fn size(&self) -> usize {
        self.virtual_intrinsics.width as usize
    }

    pub fn to_crop(&self, p: &Vector2<f64>) -> Option<Vector2<f64>> {
        apply_homography(&self.homography, p)
    }

    pub fn to_original(&self, p: &Vector2<f64>) -> Option<Vector2<f64>> {
        apply_homography(&self.homography_inv, p)
    }
}

fn apply_homography(h: &Matrix3<f64>, p: &Vector2<f64>) -> Option<Vector2<f64>> {
    let q = h * Vector3::new(p.x, p.y, 1.0);
    if q.z <= 0.0 {
        return None;
    }
    Some(Vector2::new(q.x / q.z, q.y / q.z))
}

/// Minimal rotation taking the +z axis onto `ray`.
pub fn rotation_aligning_z(ray: &Vector3<f64>) -> Matrix3<f64> {
    let z = Vector3::z();
    let ray = ray.normalize();
    let cross = z.cross(&ray);
    let s = cross.norm();
    if s == 0.0 {
        return Matrix3::identity();
    }
    let angle = s.atan2(z.dot(&ray));
    Rotation3::new(cross / s * angle).into_inner()
}

/// Builds the S×S virtual camera whose optical axis passes through the box
/// center and in which the box's longer side spans `delta·S` pixels.
pub fn build_virtual_crop(
    k: &CameraIntrinsics,
    bbox: &BoundingBox,
    size: usize,
    delta: f64,
) -> Result<VirtualCrop> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "delta must lie in (0,1), got {delta}"
        )));
    }
    if size == 0 {
        return Err(Error::InvalidConfig("crop size must be positive".into()));
    }
    if !(bbox.width() > 0.0 && bbox.height() > 0.0) {
        return Err(Error::DegenerateBox);
    }
    let k_inv = k.inverse_matrix();
    let c = bbox.center();
    let ray = k_inv * Vector3::new(c.x, c.y, 1.0);
    let to_virtual = rotation_aligning_z(&ray).transpose();

    let mut lo = Vector2::repeat(f64::INFINITY);
    let mut hi = Vector2::repeat(f64::NEG_INFINITY);
    for corner in bbox.corners() {
        let p = to_virtual * k_inv * Vector3::new(corner.x, corner.y, 1.0);
        if p.z <= 0.0 {
            return Err(Error::DegenerateBox);
        }
        let q = Vector2::new(p.x / p.z, p.y / p.z);
        lo = lo.inf(&q);
        hi = hi.sup(&q);
    }
    let extent = (hi.x - lo.x).max(hi.y - lo.y);
    if !(extent > 0.0) {
        return Err(Error::DegenerateBox);
    }
    let focal = delta * size as f64 / extent;
    let half = size as f64 / 2.0;
    let virtual_k = CameraIntrinsics::new(focal, focal, half, half, size as u32, size as u32)?;
    let homography = virtual_k.matrix() * to_virtual * k_inv;
    VirtualCrop::from_parts(virtual_k, to_virtual, homography)
}

/// Bilinear sample at a continuous coordinate, replicating the border.
fn sample_rgb(image: &RgbImage, u: f64, v: f64) -> [f32; 3] {
    let (w, h) = (image.width(), image.height());
    let x = (u - 0.5).clamp(0.0, (w - 1) as f64);
    let y = (v - 0.5).clamp(0.0, (h - 1) as f64);
    let x0 = (x.floor() as usize).min(w.saturating_sub(2));
    let y0 = (y.floor() as usize).min(h.saturating_sub(2));
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let ax = (x - x0 as f64) as f32;
    let ay = (y - y0 as f64) as f32;
    let (p00, p10, p01, p11) = (
        image.get(x0, y0),
        image.get(x1, y0),
        image.get(x0, y1),
        image.get(x1, y1),
    );
    let mut out = [0.0f32; 3];
    for c in 0..3 {
        let top = p00[c] + ax * (p10[c] - p00[c]);
        let bottom = p01[c] + ax * (p11[c] - p01[c]);
        out[c] = top + ay * (bottom - top);
    }
    out
}

/// Resamples `image` into the S×S crop; pixels with no source are black.
pub fn warp_image(image: &RgbImage, crop: &VirtualCrop) -> RgbImage {
    let size = crop.size();
    let (w, h) = (image.width() as f64, image.height() as f64);
    let rows: Vec<Vec<[f32; 3]>> = (0..size)
        .into_par_iter()
        .map(|y| {
            (0..size)
                .map(|x| {
                    let p = Vector2::new(x as f64 + 0.5, y as f64 + 0.5);
                    match crop.to_original(&p) {
                        Some(q) if q.x >= 0.0 && q.y >= 0.0 && q.x < w && q.y < h => {
                            sample_rgb(image, q.x, q.y)
                        }
                        _ => [0.0; 3],
                    }
                })
                .collect()
        })
        .collect();
    RgbImage::from_fn(size, size, |x, y| rows[y][x])
}

/// Nearest-neighbor warp of a mask into the crop; outside is background.
pub fn warp_mask(mask: &Mask, crop: &VirtualCrop) -> Mask {
    let size = crop.size();
    Mask::from_fn(size, size, |x, y| {
        let p = Vector2::new(x as f64 + 0.5, y as f64 + 0.5);
        crop.to_original(&p)
            .is_some_and(|q| mask.contains_point(q.x, q.y))
    })
}

/// Expresses a virtual-camera pose in the original camera frame.
pub fn pose_to_original(pose_virtual: &Pose, crop: &VirtualCrop) -> Pose {
    let back = crop.rotation_to_virtual.transpose();
    Pose::from_rotation_unchecked(
        back * pose_virtual.rotation(),
        back * pose_virtual.translation(),
    )
}

/// Inverse of [`pose_to_original`].
pub fn pose_to_virtual(pose_original: &Pose, crop: &VirtualCrop) -> Pose {
    let r = crop.rotation_to_virtual;
    Pose::from_rotation_unchecked(
        r * pose_original.rotation(),
        r * pose_original.translation(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn k420() -> CameraIntrinsics {
        CameraIntrinsics::new(500.0, 500.0, 210.0, 210.0, 420, 420).unwrap()
    }

    fn random_rotation(rng: &mut impl Rng) -> Matrix3<f64> {
        let aa = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        ) * rng.random_range(0.0..3.0);
        Rotation3::new(aa).into_inner()
    }

    #[test]
    fn project_examples() {
        let k = k420();
        let pose = Pose::from_translation(Vector3::new(0.0, 0.0, 1000.0));
        let p = project(&Vector3::zeros(), &pose, &k).unwrap();
        assert_eq!((p.x, p.y), (210.0, 210.0));
        let p = project(&Vector3::new(100.0, 0.0, 0.0), &pose, &k).unwrap();
        assert!((p.x - 260.0).abs() < 1e-12 && (p.y - 210.0).abs() < 1e-12);
        let behind = Pose::from_translation(Vector3::new(0.0, 0.0, -5.0));
        assert!(matches!(
            project(&Vector3::zeros(), &behind, &k),
            Err(Error::PointBehindCamera(_))
        ));
    }

    #[test]
    fn pose_validation_rejects_non_rotations() {
        let mut m = Matrix3::identity();
        m[(0, 0)] = -1.0;
        assert!(Pose::new(m, Vector3::zeros()).is_err());
        assert!(Pose::new(m * 1.0001, Vector3::zeros()).is_err());
        assert!(Pose::orthonormalized(Matrix3::identity() * 1.001, Vector3::zeros()).is_ok());
    }

    #[test]
    fn intrinsics_reject_bad_focal() {
        assert!(CameraIntrinsics::new(0.0, 1.0, 0.0, 0.0, 10, 10).is_err());
        assert!(CameraIntrinsics::new(1.0, 1.0, 0.0, 0.0, 0, 10).is_err());
    }

    #[test]
    fn centered_bbox_gives_identity_rotation() {
        let k = k420();
        let bb = BoundingBox::new(160.0, 180.0, 260.0, 240.0);
        let crop = build_virtual_crop(&k, &bb, 420, 0.6).unwrap();
        assert_eq!(crop.rotation_to_virtual, Matrix3::identity());
    }

    #[test]
    fn warped_bbox_longer_side_is_delta_s() {
        let k = k420();
        let bb = BoundingBox::new(160.0, 170.0, 260.0, 250.0);
        let crop = build_virtual_crop(&k, &bb, 420, 0.6).unwrap();
        let warped: Vec<_> = bb
            .corners()
            .iter()
            .map(|c| crop.to_crop(c).unwrap())
            .collect();
        let wb = BoundingBox::from_points(&warped).unwrap();
        assert!(
            (wb.longer_side() - 252.0).abs() <= 1.0,
            "{}",
            wb.longer_side()
        );

        // Off-center boxes too.
        let k = CameraIntrinsics::new(600.0, 600.0, 320.0, 240.0, 640, 480).unwrap();
        let bb = BoundingBox::new(20.0, 30.0, 140.0, 110.0);
        let crop = build_virtual_crop(&k, &bb, 420, 0.6).unwrap();
        let warped: Vec<_> = bb
            .corners()
            .iter()
            .map(|c| crop.to_crop(c).unwrap())
            .collect();
        let wb = BoundingBox::from_points(&warped).unwrap();
        assert!(
            (wb.longer_side() - 252.0).abs() <= 1.0,
            "{}",
            wb.longer_side()
        );
        let c = wb.center();
        assert!((c.x - 210.0).abs() < 5.0 && (c.y - 210.0).abs() < 5.0);
    }

    #[test]
    fn homography_consistency_and_determinism() {
        let k = CameraIntrinsics::new(610.0, 605.0, 331.0, 244.0, 640, 480).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let x0 = rng.random_range(0.0..500.0);
            let y0 = rng.random_range(0.0..380.0);
            let bb = BoundingBox::new(
                x0,
                y0,
                x0 + rng.random_range(5.0..140.0),
                y0 + rng.random_range(5.0..100.0),
            );
            let crop = build_virtual_crop(&k, &bb, 420, 0.6).unwrap();
            let expected =
                crop.virtual_intrinsics.matrix() * crop.rotation_to_virtual * k.inverse_matrix();
            let a = crop.homography / crop.homography[(2, 2)];
            let b = expected / expected[(2, 2)];
            assert!((a - b).abs().max() < 1e-9);
            let vk = crop.virtual_intrinsics;
            assert_eq!(
                (vk.width, vk.height, vk.cx, vk.cy),
                (420, 420, 210.0, 210.0)
            );
            let again = build_virtual_crop(&k, &bb, 420, 0.6).unwrap();
            assert_eq!(crop, again);
        }
    }

    #[test]
    fn degenerate_box_rejected() {
        let bb = BoundingBox::new(10.0, 10.0, 10.0, 30.0);
        assert!(matches!(
            build_virtual_crop(&k420(), &bb, 420, 0.6),
            Err(Error::DegenerateBox)
        ));
    }

    #[test]
    fn identity_warp_reproduces_input() {
        let img = RgbImage::from_fn(32, 32, |x, y| {
            [x as f32 / 31.0, y as f32 / 31.0, ((x * y) % 7) as f32 / 7.0]
        });
        let k = CameraIntrinsics::new(30.0, 30.0, 16.0, 16.0, 32, 32).unwrap();
        let crop = VirtualCrop::from_parts(k, Matrix3::identity(), Matrix3::identity()).unwrap();
        let out = warp_image(&img, &crop);
        for (a, b) in img.pixels().iter().zip(out.pixels()) {
            for c in 0..3 {
                assert!((a[c] - b[c]).abs() < 1e-6);
            }
        }
        let mask = Mask::from_fn(32, 32, |x, y| (x + y) % 3 == 0);
        assert_eq!(warp_mask(&mask, &crop), mask);
    }

    #[test]
    fn translation_warp_shifts_and_blacks_out() {
        let img = RgbImage::from_fn(20, 20, |x, y| {
            [0.2 + x as f32 / 40.0, 0.2 + y as f32 / 40.0, 0.5]
        });
        let k = CameraIntrinsics::new(20.0, 20.0, 10.0, 10.0, 20, 20).unwrap();
        let mut h = Matrix3::identity();
        h[(0, 2)] = 3.0;
        let crop = VirtualCrop::from_parts(k, Matrix3::identity(), h).unwrap();
        let out = warp_image(&img, &crop);
        for y in 0..20 {
            for x in 0..20 {
                let px = out.get(x, y);
                if x < 3 {
                    assert_eq!(px, [0.0; 3]);
                } else {
                    let src = img.get(x - 3, y);
                    for c in 0..3 {
                        assert!((px[c] - src[c]).abs() < 1e-5);
                    }
                }
            }
        }
    }

    #[test]
    fn full_frame_mask_covers_source_footprint() {
        let k = CameraIntrinsics::new(300.0, 300.0, 160.0, 120.0, 320, 240).unwrap();
        let bb = BoundingBox::new(200.0, 100.0, 318.0, 238.0);
        let crop = build_virtual_crop(&k, &bb, 100, 0.9).unwrap();
        let full = Mask::from_fn(320, 240, |_, _| true);
        let warped = warp_mask(&full, &crop);
        for y in 0..100 {
            for x in 0..100 {
                let q = crop
                    .to_original(&Vector2::new(x as f64 + 0.5, y as f64 + 0.5))
                    .unwrap();
                let inside = q.x >= 0.0 && q.y >= 0.0 && q.x < 320.0 && q.y < 240.0;
                assert_eq!(warped.get(x, y), inside);
            }
        }
        assert!(warped.count() > 0 && warped.count() < 100 * 100);
    }

    #[test]
    fn circle_area_preserved_under_translation() {
        let circle = Mask::from_fn(200, 200, |x, y| {
            let (dx, dy) = (x as f64 + 0.5 - 90.0, y as f64 + 0.5 - 100.0);
            dx * dx + dy * dy <= 40.0 * 40.0
        });
        let k = CameraIntrinsics::new(200.0, 200.0, 100.0, 100.0, 200, 200).unwrap();
        let mut h = Matrix3::identity();
        h[(0, 2)] = 17.3;
        h[(1, 2)] = -6.6;
        let crop = VirtualCrop::from_parts(k, Matrix3::identity(), h).unwrap();
        let warped = warp_mask(&circle, &crop);
        let (a, b) = (circle.count() as f64, warped.count() as f64);
        assert!((a - b).abs() / a < 0.02);
    }

    #[test]
    fn rotated_virtual_camera_keeps_lines_straight() {
        // A 10° rotation-only virtual camera is a homography, so projected
        // 3D lines must remain collinear in the crop.
        let k = k420();
        let to_virtual = Rotation3::new(Vector3::new(0.0, 10f64.to_radians(), 0.0)).into_inner();
        let h = k.matrix() * to_virtual * k.inverse_matrix();
        let crop = VirtualCrop::from_parts(k, to_virtual, h).unwrap();
        let a = Vector3::new(-80.0, -40.0, 900.0);
        let b = Vector3::new(90.0, 60.0, 1100.0);
        let pts: Vec<Vector2<f64>> = [0.0, 0.37, 1.0]
            .iter()
            .map(|&s| {
                let x = a + (b - a) * s;
                let direct = k.project_camera(&(to_virtual * x)).unwrap();
                let via = crop.to_crop(&k.project_camera(&x).unwrap()).unwrap();
                assert!((direct - via).norm() < 1e-6);
                via
            })
            .collect();
        let d1 = pts[1] - pts[0];
        let d2 = pts[2] - pts[0];
        let dist = (d1.x * d2.y - d1.y * d2.x).abs() / d2.norm();
        assert!(dist < 0.1, "{dist}");
    }

    #[test]
    fn pose_round_trips_and_two_path_projection() {
        let k = CameraIntrinsics::new(612.0, 608.0, 318.0, 243.0, 640, 480).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let x0 = rng.random_range(0.0..540.0);
            let y0 = rng.random_range(0.0..380.0);
            let bb = BoundingBox::new(
                x0,
                y0,
                x0 + rng.random_range(10.0..100.0),
                y0 + rng.random_range(10.0..100.0),
            );
            let crop = build_virtual_crop(&k, &bb, 420, 0.6).unwrap();
            let pose_v = Pose::new(
                random_rotation(&mut rng),
                Vector3::new(
                    rng.random_range(-50.0..50.0),
                    rng.random_range(-50.0..50.0),
                    rng.random_range(600.0..1500.0),
                ),
            )
            .unwrap();
            let pose_o = pose_to_original(&pose_v, &crop);
            assert!(pose_o.rotation_error() < 1e-9);
            let back = pose_to_virtual(&pose_o, &crop);
            assert!((back.rotation() - pose_v.rotation()).abs().max() < 1e-10);
            assert!((back.translation() - pose_v.translation()).abs().max() < 1e-10 * 1500.0);

            let x = Vector3::new(
                rng.random_range(-40.0..40.0),
                rng.random_range(-40.0..40.0),
                rng.random_range(-40.0..40.0),
            );
            let in_crop = project(&x, &pose_v, &crop.virtual_intrinsics).unwrap();
            let via = crop.to_original(&in_crop).unwrap();
            let direct = project(&x, &pose_o, &k).unwrap();
            assert!((via - direct).norm() < 1e-6, "{}", (via - direct).norm());
        }
        let crop = build_virtual_crop(
            &k420(),
            &BoundingBox::new(160.0, 160.0, 260.0, 260.0),
            420,
            0.6,
        )
        .unwrap();
        let p = Pose::from_axis_angle(Vector3::new(0.1, 0.2, 0.3), Vector3::new(1.0, 2.0, 3.0));
        assert_eq!(pose_to_original(&p, &crop), p);
    }

    #[test]
    fn perturbation_composes_on_the_right() {
        let p = Pose::from_axis_angle(Vector3::new(0.3, -0.2, 0.1), Vector3::new(5.0, 6.0, 700.0));
        let d = [0.01, 0.02, -0.03, 1.0, -2.0, 3.0];
        let delta = Pose::from_axis_angle(
            Vector3::new(d[0], d[1], d[2]),
            Vector3::new(d[3], d[4], d[5]),
        );
        let a = p.perturbed(&d);
        let b = p.compose(&delta);
        assert!((a.rotation() - b.rotation()).abs().max() < 1e-12);
        assert!((a.translation() - b.translation()).abs().max() < 1e-9);
        assert!((p.rotation_angle_to(&a) - 0.01f64.hypot(0.02).hypot(0.03)).abs() < 1e-9);
    }
}
