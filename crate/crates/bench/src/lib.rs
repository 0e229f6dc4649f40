//! Seeded fixtures shared by the benchmarks.

use nalgebra::{Vector2, Vector3};
use patchpose::onboarding::onboard_object;
use patchpose::pose_estimation::{Correspondence, CorrespondenceSet};
use patchpose::refinement::QueryFeatureMap;
use patchpose::rendering::random_rotation;
use patchpose::synthetic::{
    asymmetric_object, random_points, record_from_map, render_query, smooth_feature_map,
};
use patchpose::{
    CameraIntrinsics, DetectionInput, GradientHistogramBackend, Mesh, ObjectRepresentation,
    OnboardingConfig, Pose, TemplateRecord,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// 640×480 camera with a 600 px focal length.
pub fn vga_camera() -> CameraIntrinsics {
    CameraIntrinsics::new(600.0, 600.0, 320.0, 240.0, 640, 480).expect("valid intrinsics")
}

/// `n` correspondences of a random pose, a fraction `outliers` of them replaced
/// by uniform image points.
pub fn pnp_problem(n: usize, outliers: f64, seed: u64) -> CorrespondenceSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = vga_camera();
    let truth =
        Pose::new(random_rotation(&mut rng), Vector3::new(10.0, -20.0, 900.0)).expect("rotation");
    let bad = (n as f64 * outliers).round() as usize;
    let items = random_points(n, Vector3::new(100.0, 100.0, 100.0), seed + 1)
        .into_iter()
        .enumerate()
        .map(|(i, point)| {
            let image = if i < bad {
                Vector2::new(rng.random_range(0.0..640.0), rng.random_range(0.0..480.0))
            } else {
                k.project_camera(&truth.transform(&point))
                    .expect("in front of the camera")
            };
            Correspondence {
                image,
                point,
                match_distance: 0.0,
                entry: i,
            }
        })
        .collect();
    CorrespondenceSet { items }
}

/// Feature map and template record for refinement, with the pose they agree on.
pub fn refinement_problem(seed: u64) -> (QueryFeatureMap, TemplateRecord, Pose, CameraIntrinsics) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = CameraIntrinsics::new(500.0, 500.0, 112.0, 112.0, 224, 224).expect("valid intrinsics");
    let map = smooth_feature_map(16, 16, 32, 14, seed);
    let truth =
        Pose::new(random_rotation(&mut rng), Vector3::new(0.0, 0.0, 600.0)).expect("rotation");
    let record = record_from_map(
        &map,
        &random_points(200, Vector3::new(50.0, 50.0, 50.0), seed + 1),
        &truth,
        &k,
    );
    (map, record, truth, k)
}

/// The synthetic asymmetric object onboarded with `templates` templates.
pub fn onboarded_object(templates: usize, words: usize) -> (Mesh, ObjectRepresentation) {
    let mesh = asymmetric_object(7);
    let cfg = OnboardingConfig {
        object_id: "obj".into(),
        templates,
        words,
        ..OnboardingConfig::default()
    };
    let rep =
        onboard_object(&mesh, &cfg, &GradientHistogramBackend::default()).expect("onboarding");
    (mesh, rep)
}

/// A query seen exactly from template `id`'s viewpoint at 650 mm.
pub fn template_query(mesh: &Mesh, rep: &ObjectRepresentation, id: usize) -> DetectionInput {
    let pose = Pose::new(
        *rep.templates[id].pose.rotation(),
        Vector3::new(0.0, 0.0, 650.0),
    )
    .expect("rotation");
    render_query(mesh, &pose, &vga_camera(), &rep.object_id).expect("visible object")
}
