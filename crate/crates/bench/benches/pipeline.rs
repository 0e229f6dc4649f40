use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use patchpose::features::extract_grid;
use patchpose::pipeline::{estimate_pose, EstimateOptions};
use patchpose::pose_estimation::{ransac_pnp, RansacConfig};
use patchpose::refinement::{refine, RefinementConfig};
use patchpose::rendering::{render_template, sample_rotations};
use patchpose::retrieval::{query_bow, retrieve};
use patchpose::GradientHistogramBackend;
use patchpose_bench::{
    onboarded_object, pnp_problem, refinement_problem, template_query, vga_camera,
};

fn stages(c: &mut Criterion) {
    let (mesh, rep) = onboarded_object(64, 512);
    let backend = GradientHistogramBackend::default();
    let rotation = sample_rotations(1, 3)[0];
    let template = render_template(&mesh, &rotation, 420, 0.6, 0).unwrap();
    let grid = extract_grid(&backend, &template.rgb).unwrap();

    c.bench_function("render_template_420", |b| {
        b.iter(|| render_template(&mesh, black_box(&rotation), 420, 0.6, 0).unwrap())
    });
    c.bench_function("extract_grid_420", |b| {
        b.iter(|| extract_grid(&backend, black_box(&template.rgb)).unwrap())
    });
    c.bench_function("retrieval_64_templates", |b| {
        b.iter(|| {
            let bow = query_bow(black_box(&grid), &template.mask, &rep).unwrap();
            retrieve(&bow, &rep, 5)
        })
    });

    let corrs = pnp_problem(100, 0.4, 1);
    let k = vga_camera();
    let ransac = RansacConfig::default();
    c.bench_function("ransac_pnp_100_40pct_outliers", |b| {
        b.iter(|| ransac_pnp(black_box(&corrs), &k, &ransac).unwrap())
    });

    let (map, record, truth, k_crop) = refinement_problem(2);
    let init = truth.perturbed(&[0.05, -0.03, 0.04, 5.0, -5.0, 20.0]);
    let cfg = RefinementConfig::default();
    c.bench_function("refine_200_points", |b| {
        b.iter(|| refine(black_box(&init), &record, &map, &k_crop, &cfg).unwrap())
    });

    let query = template_query(&mesh, &rep, 5);
    let opts = EstimateOptions::default();
    let mut group = c.benchmark_group("end_to_end");
    group.sample_size(20);
    group.bench_function("estimate_pose_64_templates", |b| {
        b.iter(|| estimate_pose(black_box(&query), &rep, &backend, &opts).unwrap())
    });
    group.finish();
}

criterion_group!(benches, stages);
criterion_main!(benches);
