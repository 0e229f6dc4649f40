//! End-to-end inference: mask → virtual crop → features → retrieval →
//! PnP-RANSAC → featuremetric refinement → pose in the original camera.

use std::path::Path;
use std::time::Instant;

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{extract_grid, DescriptorBackend, FeatureGrid};
use crate::geometry::{
    build_virtual_crop, pose_to_original, warp_image, warp_mask, CameraIntrinsics, Pose,
};
use crate::onboarding::{check_grid_geometry, ObjectRepresentation};
use crate::pose_estimation::{coarse_hypotheses, RansacConfig};
use crate::raster::{Mask, RgbImage};
use crate::refinement::{featuremetric_cost, refine, QueryFeatureMap, RefinementConfig};
use crate::rendering::{render, Mesh};
use crate::retrieval::{bow_of, crop_descriptors, retrieve};

/// One object instance to localize.
#[derive(Debug, Clone)]
pub struct DetectionInput {
    pub image: RgbImage,
    pub intrinsics: CameraIntrinsics,
    pub object_id: String,
    pub mask: Mask,
    /// Precomputed raw features of the virtual crop, used instead of the backend.
    pub crop_features: Option<FeatureGrid>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EstimateOptions {
    pub top_templates: usize,
    pub ransac_iters: usize,
    pub inlier_px: f64,
    pub refine: bool,
    pub refinement: RefinementConfig,
    /// Coarse hypotheses refined; the one with the lowest mean entry cost wins.
    pub hypotheses: usize,
    pub seed: u64,
}

impl Default for EstimateOptions {
    fn default() -> Self {
        Self {
            top_templates: 5,
            ransac_iters: 400,
            inlier_px: 10.0,
            refine: true,
            refinement: RefinementConfig::default(),
            hypotheses: 1,
            seed: 0,
        }
    }
}

impl EstimateOptions {
    pub fn validate(&self) -> Result<()> {
        if self.top_templates == 0 || self.hypotheses == 0 || self.ransac_iters == 0 {
            return Err(Error::InvalidConfig(
                "top_templates, hypotheses and ransac_iters must be positive".into(),
            ));
        }
        if !(self.inlier_px > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "inlier threshold must be positive, got {}",
                self.inlier_px
            )));
        }
        self.refinement.validate()
    }

    fn ransac(&self) -> RansacConfig {
        RansacConfig {
            max_iters: self.ransac_iters,
            inlier_px: self.inlier_px,
            seed: self.seed,
            ..RansacConfig::default()
        }
    }
}

/// Wall-clock milliseconds per stage.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StageTimings {
    pub crop_ms: f64,
    pub features_ms: f64,
    pub retrieval_ms: f64,
    pub coarse_ms: f64,
    pub refine_ms: f64,
    pub total_ms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoseEstimate {
    pub object_id: String,
    /// Final pose in the original camera frame.
    pub pose: Pose,
    pub coarse_pose: Pose,
    pub template_id: u32,
    pub inlier_count: usize,
    pub refinement_cost_initial: f64,
    pub refinement_cost_final: f64,
    pub timings: StageTimings,
}

fn ms(since: Instant) -> f64 {
    since.elapsed().as_secs_f64() * 1e3
}

/// Estimates the pose of one detection.
pub fn estimate_pose(
    input: &DetectionInput,
    rep: &ObjectRepresentation,
    backend: &dyn DescriptorBackend,
    options: &EstimateOptions,
) -> Result<PoseEstimate> {
    let start = Instant::now();
    options.validate().map_err(Error::at_stage("options"))?;
    if input.object_id != rep.object_id {
        return Err(Error::at_stage("input")(Error::InvalidConfig(format!(
            "detection is for object {:?} but the representation holds {:?}",
            input.object_id, rep.object_id
        ))));
    }
    if input.mask.width() != input.image.width() || input.mask.height() != input.image.height() {
        return Err(Error::at_stage("input")(Error::SizeMismatch(
            "mask and image sizes differ".into(),
        )));
    }

    let t = Instant::now();
    let stage = Error::at_stage("crop");
    let bbox = input
        .mask
        .bounding_box()
        .ok_or(Error::NoValidPatches)
        .map_err(stage)?;
    let crop = build_virtual_crop(&input.intrinsics, &bbox, rep.config.size, rep.config.delta)
        .map_err(Error::at_stage("crop"))?;
    let crop_mask = warp_mask(&input.mask, &crop);
    let crop_time = ms(t);

    let t = Instant::now();
    let grid = match &input.crop_features {
        Some(g) => g.clone(),
        None => {
            if backend.dim() != rep.backend.dim || backend.patch_size() != rep.backend.patch_size {
                return Err(Error::at_stage("features")(Error::DimMismatch {
                    expected: rep.backend.dim,
                    actual: backend.dim(),
                }));
            }
            let crop_image = warp_image(&input.image, &crop);
            extract_grid(backend, &crop_image).map_err(Error::at_stage("features"))?
        }
    };
    check_grid_geometry(&grid, rep.config.size, rep.config.size)
        .map_err(Error::at_stage("features"))?;
    let crop_desc =
        crop_descriptors(&grid, &crop_mask, &rep.pca).map_err(Error::at_stage("features"))?;
    let features_time = ms(t);

    let t = Instant::now();
    let bow = bow_of(&crop_desc, rep).map_err(Error::at_stage("retrieval"))?;
    let retrieved = retrieve(&bow, rep, options.top_templates);
    let ids: Vec<u32> = retrieved.ids().collect();
    let retrieval_time = ms(t);

    let t = Instant::now();
    let k_virtual = crop.virtual_intrinsics;
    let hyps = coarse_hypotheses(&crop_desc, rep, &ids, &k_virtual, &options.ransac());
    if hyps.is_empty() {
        return Err(Error::at_stage("coarse pose")(Error::NoModelFound));
    }
    let coarse_time = ms(t);

    let t = Instant::now();
    let map = QueryFeatureMap::from_grid(&grid, &rep.pca).map_err(Error::at_stage("refinement"))?;
    let cfg = &options.refinement;
    let record_of = |id: u32| rep.template(id).ok_or(Error::NoModelFound);
    let best = &hyps[0];
    let (pose_v, template_id, inliers, cost0, cost1) = if options.refine {
        let mut chosen = None;
        for h in hyps.iter().take(options.hypotheses) {
            let record = record_of(h.template_id).map_err(Error::at_stage("refinement"))?;
            let r = refine(&h.pose, record, &map, &k_virtual, cfg)
                .map_err(Error::at_stage("refinement"))?;
            let score = r.final_cost / record.len() as f64;
            if chosen.as_ref().is_none_or(|(s, _, _)| score < *s) {
                chosen = Some((score, h, r));
            }
        }
        let (_, h, r) = chosen.expect("at least one hypothesis");
        (
            r.pose,
            h.template_id,
            h.inlier_count,
            r.initial_cost,
            r.final_cost,
        )
    } else {
        let record = record_of(best.template_id).map_err(Error::at_stage("refinement"))?;
        let c = featuremetric_cost(&best.pose, record, &map, &k_virtual, cfg);
        (best.pose, best.template_id, best.inlier_count, c, c)
    };
    let coarse_v = hyps
        .iter()
        .find(|h| h.template_id == template_id)
        .map_or(best.pose, |h| h.pose);
    let refine_time = ms(t);

    Ok(PoseEstimate {
        object_id: rep.object_id.clone(),
        pose: pose_to_original(&pose_v, &crop),
        coarse_pose: pose_to_original(&coarse_v, &crop),
        template_id,
        inlier_count: inliers,
        refinement_cost_initial: cost0,
        refinement_cost_final: cost1,
        timings: StageTimings {
            crop_ms: crop_time,
            features_ms: features_time,
            retrieval_ms: retrieval_time,
            coarse_ms: coarse_time,
            refine_ms: refine_time,
            total_ms: ms(start),
        },
    })
}

/// Estimates every input independently, in input order. Failures are reported
/// per item; `parallel` never changes the poses.
pub fn estimate_batch(
    inputs: &[DetectionInput],
    reps: &[ObjectRepresentation],
    backend: &dyn DescriptorBackend,
    options: &EstimateOptions,
    parallel: bool,
) -> Vec<Result<PoseEstimate>> {
    let one = |input: &DetectionInput| {
        let rep = reps
            .iter()
            .find(|r| r.object_id == input.object_id)
            .ok_or_else(|| {
                Error::at_stage("input")(Error::InvalidConfig(format!(
                    "no representation for object {:?}",
                    input.object_id
                )))
            })?;
        estimate_pose(input, rep, backend, options)
    };
    if parallel {
        inputs.par_iter().map(one).collect()
    } else {
        inputs.iter().map(one).collect()
    }
}

/// On-disk result of one estimate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub image_id: String,
    pub object_id: String,
    #[serde(rename = "R")]
    pub rotation: [f64; 9],
    pub t: [f64; 3],
    /// Inlier count of the selected hypothesis.
    pub score: usize,
    pub template_id: u32,
    #[serde(rename = "coarse_R")]
    pub coarse_rotation: [f64; 9],
    pub coarse_t: [f64; 3],
    pub refinement_cost_initial: f64,
    pub refinement_cost_final: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timings_ms: Option<StageTimings>,
}

fn split(p: &Pose) -> ([f64; 9], [f64; 3]) {
    let rm = p.to_row_major();
    (rm[..9].try_into().unwrap(), rm[9..].try_into().unwrap())
}

impl ResultRecord {
    pub fn from_estimate(image_id: &str, est: &PoseEstimate, with_timings: bool) -> Self {
        let (rotation, t) = split(&est.pose);
        let (coarse_r, coarse_t) = split(&est.coarse_pose);
        Self {
            image_id: image_id.into(),
            object_id: est.object_id.clone(),
            rotation,
            t,
            score: est.inlier_count,
            template_id: est.template_id,
            coarse_rotation: coarse_r,
            coarse_t,
            refinement_cost_initial: est.refinement_cost_initial,
            refinement_cost_final: est.refinement_cost_final,
            timings_ms: with_timings.then_some(est.timings),
        }
    }

    pub fn pose(&self) -> Result<Pose> {
        Pose::orthonormalized(
            Matrix3::from_row_slice(&self.rotation),
            Vector3::from(self.t),
        )
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable") + "\n"
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    /// Reads a single record or a list of records.
    pub fn load_many(path: impl AsRef<Path>) -> Result<Vec<ResultRecord>> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum OneOrMany {
            Many(Vec<ResultRecord>),
            One(Box<ResultRecord>),
        }
        match serde_json::from_str(&text)
            .map_err(|e| Error::parse(path.display().to_string(), e))?
        {
            OneOrMany::Many(v) => Ok(v),
            OneOrMany::One(r) => Ok(vec![*r]),
        }
    }
}

/// Draws the silhouette contour of `mesh` under `pose` over `image`. Returns the
/// overlay and the number of contour pixels.
pub fn draw_contour(
    image: &RgbImage,
    mesh: &Mesh,
    pose: &Pose,
    k: &CameraIntrinsics,
    color: [f32; 3],
) -> Result<(RgbImage, usize)> {
    if let Some(v) = mesh
        .vertices()
        .iter()
        .map(|v| pose.transform(v))
        .find(|p| !(p.z > 0.0))
    {
        return Err(Error::PointBehindCamera(v.z));
    }
    if k.width as usize != image.width() || k.height as usize != image.height() {
        return Err(Error::SizeMismatch(
            "intrinsics size differs from the image".into(),
        ));
    }
    let mask = render(mesh, pose, k).mask;
    let (w, h) = (mask.width(), mask.height());
    let mut out = image.clone();
    let mut count = 0;
    for y in 0..h {
        for x in 0..w {
            if !mask.get(x, y) {
                continue;
            }
            let edge = x == 0
                || y == 0
                || x + 1 == w
                || y + 1 == h
                || !mask.get(x - 1, y)
                || !mask.get(x + 1, y)
                || !mask.get(x, y - 1)
                || !mask.get(x, y + 1);
            if edge {
                out.set(x, y, color);
                count += 1;
            }
        }
    }
    Ok((out, count))
}
