//! Implementations of the subcommands.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::Args;
use patchpose::evaluation::{
    average_recall, evaluate_instance, load_ground_truth, ErrorRecord, SymmetrySet, ThresholdGrid,
};
use patchpose::features::{extract_grid, read_feature_file, write_feature_file};
use patchpose::geometry::{build_virtual_crop, warp_image};
use patchpose::onboarding::{
    load_representation, onboard_object, save_representation, FeatureDirSource,
};
use patchpose::pipeline::{draw_contour, estimate_pose, ResultRecord};
use patchpose::rendering::{render_template, sample_rotations};
use patchpose::{
    CameraIntrinsics, DetectionInput, Error, GradientHistogramBackend, Mask, Mesh, Result, RgbImage,
};
use rayon::prelude::*;

use crate::settings::{ConfigSource, EstimationFlags, OnboardingFlags};

/// Copy of the onboarded mesh kept next to the representation archive.
pub const ARCHIVE_MESH: &str = "mesh.ply";

fn at_stage(stage: &'static str) -> impl FnOnce(Error) -> Error {
    move |e| Error::Stage {
        stage,
        source: Box::new(e),
    }
}

fn io_error(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Args)]
pub struct OnboardArgs {
    /// Object mesh (ASCII PLY or OBJ, millimeters).
    #[arg(long, value_name = "PATH")]
    pub mesh: PathBuf,
    /// Output directory of the representation archive.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Directory of precomputed template features named template_<id>.fpft,
    /// used instead of the built-in descriptor backend.
    #[arg(long, value_name = "DIR")]
    pub features_dir: Option<PathBuf>,
    #[command(flatten)]
    pub source: ConfigSource,
    #[command(flatten)]
    pub flags: OnboardingFlags,
}

pub fn onboard(args: &OnboardArgs) -> Result<()> {
    let cfg = args.source.resolve(|c| args.flags.apply(c))?;
    let mesh = Mesh::load(&args.mesh)?;
    let start = Instant::now();
    let rep = match &args.features_dir {
        Some(dir) => {
            let source = FeatureDirSource::open(dir).map_err(at_stage("onboarding"))?;
            onboard_object(&mesh, &cfg.onboarding(), &source)
        }
        None => onboard_object(
            &mesh,
            &cfg.onboarding(),
            &GradientHistogramBackend::new(cfg.patch_size),
        ),
    }
    .map_err(at_stage("onboarding"))?;
    let elapsed = start.elapsed();
    save_representation(&rep, &args.out)?;
    mesh.save_ply(args.out.join(ARCHIVE_MESH))?;
    println!(
        "onboarded {:?}: {} templates, backend {}, in {:.2} s -> {}",
        rep.object_id,
        rep.templates.len(),
        rep.backend.name,
        elapsed.as_secs_f64(),
        args.out.display()
    );
    Ok(())
}

#[derive(Debug, Args)]
pub struct EstimateArgs {
    /// Representation archive written by `onboard`.
    #[arg(long, value_name = "DIR")]
    pub rep: PathBuf,
    /// Query RGB image (PNG).
    #[arg(long, value_name = "PATH")]
    pub image: PathBuf,
    /// Object segmentation mask (PNG, nonzero is foreground), same size as the image.
    #[arg(long, value_name = "PATH")]
    pub mask: PathBuf,
    /// Camera intrinsics JSON with keys fx, fy, cx, cy, width, height.
    #[arg(long, value_name = "PATH")]
    pub intrinsics: PathBuf,
    /// Precomputed FPFT features of the virtual crop, used instead of the built-in backend.
    #[arg(long, value_name = "PATH")]
    pub feature_file: Option<PathBuf>,
    /// Writes the virtual crop PNG, the input expected by external feature extractors.
    #[arg(long, value_name = "PATH")]
    pub dump_crop: Option<PathBuf>,
    /// Image identifier stored in the result (defaults to the image file stem).
    #[arg(long, value_name = "ID")]
    pub image_id: Option<String>,
    /// Include per-stage timings in the result; they make output bytes vary between runs.
    #[arg(long)]
    pub timings: bool,
    /// Worker threads (defaults to all cores); results do not depend on it.
    #[arg(long, value_name = "N")]
    pub threads: Option<usize>,
    /// Output result JSON.
    #[arg(long, value_name = "PATH")]
    pub out: PathBuf,
    #[command(flatten)]
    pub source: ConfigSource,
    #[command(flatten)]
    pub flags: EstimationFlags,
}

pub fn estimate(args: &EstimateArgs) -> Result<()> {
    let cfg = args.source.resolve(|c| args.flags.apply(c))?;
    if let Some(n) = args.threads {
        set_threads(n)?;
    }
    let rep = load_representation(&args.rep)?;
    let intrinsics = CameraIntrinsics::load_json(&args.intrinsics)?;
    let image = RgbImage::load_png(&args.image)?;
    let mask = Mask::load_png(&args.mask)?;
    let crop_features = args
        .feature_file
        .as_ref()
        .map(read_feature_file)
        .transpose()?;
    if crop_features.is_none() && rep.backend.name != GradientHistogramBackend::NAME {
        return Err(Error::InvalidConfig(format!(
            "representation was built from {} features; pass --feature-file",
            rep.backend.name
        )));
    }
    if let Some(path) = &args.dump_crop {
        let bbox = mask
            .bounding_box()
            .ok_or(Error::EmptyMask)
            .map_err(at_stage("crop"))?;
        let crop = build_virtual_crop(&intrinsics, &bbox, rep.config.size, rep.config.delta)
            .map_err(at_stage("crop"))?;
        warp_image(&image, &crop).save_png(path)?;
    }
    let input = DetectionInput {
        image,
        intrinsics,
        object_id: rep.object_id.clone(),
        mask,
        crop_features,
    };
    let backend = GradientHistogramBackend::new(rep.backend.patch_size);
    let est = estimate_pose(&input, &rep, &backend, &cfg.estimate_options())?;
    let image_id = match &args.image_id {
        Some(id) => id.clone(),
        None => args
            .image
            .file_stem()
            .map_or_else(String::new, |s| s.to_string_lossy().into_owned()),
    };
    ResultRecord::from_estimate(&image_id, &est, args.timings).save(&args.out)?;
    let t = est.pose.translation();
    println!(
        "{image_id}: template {} with {} inliers, t = [{:.1}, {:.1}, {:.1}] mm, cost {:.4} -> {:.4}, {:.0} ms",
        est.template_id,
        est.inlier_count,
        t.x,
        t.y,
        t.z,
        est.refinement_cost_initial,
        est.refinement_cost_final,
        est.timings.total_ms
    );
    Ok(())
}

fn set_threads(n: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::InvalidConfig("--threads must be positive".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Result JSON: one record or a list of records.
    #[arg(long, value_name = "PATH")]
    pub results: PathBuf,
    /// Ground-truth JSON list of annotations.
    #[arg(long, value_name = "PATH")]
    pub gt: PathBuf,
    /// Object mesh used for every annotation.
    #[arg(long, value_name = "PATH")]
    pub mesh: PathBuf,
    /// Symmetry JSON; the object is treated as asymmetric without it.
    #[arg(long, value_name = "PATH")]
    pub symmetries: Option<PathBuf>,
    /// Output report JSON.
    #[arg(long, value_name = "PATH")]
    pub out: PathBuf,
}

pub fn evaluate(args: &EvaluateArgs) -> Result<()> {
    let results = ResultRecord::load_many(&args.results)?;
    let gts = load_ground_truth(&args.gt)?;
    let mesh = Mesh::load(&args.mesh)?;
    let sym = match &args.symmetries {
        Some(path) => SymmetrySet::load_json(path)?,
        None => SymmetrySet::identity(),
    };
    if results.is_empty() {
        log::warn!(
            "{} holds no estimates; every instance counts as missed",
            args.results.display()
        );
    }
    let grid = ThresholdGrid::default();
    let records = gts
        .iter()
        .map(|gt| {
            match results
                .iter()
                .find(|r| r.image_id == gt.image_id && r.object_id == gt.object_id)
            {
                Some(r) => evaluate_instance(&r.pose()?, gt, &mesh, mesh.vertices(), &sym, &grid),
                None => Ok(ErrorRecord::missing(
                    &gt.image_id,
                    &gt.object_id,
                    mesh.diameter(),
                    gt.k.width,
                    &grid,
                )),
            }
        })
        .collect::<Result<Vec<_>>>()
        .map_err(at_stage("evaluation"))?;
    let report = average_recall(&records, &grid);
    let text = serde_json::to_string_pretty(&report).expect("report serializes") + "\n";
    std::fs::write(&args.out, text).map_err(io_error(&args.out))?;
    println!(
        "{} instances: AR {:.4} (VSD {:.4}, MSSD {:.4}, MSPD {:.4})",
        report.instances, report.ar, report.ar_vsd, report.ar_mssd, report.ar_mspd
    );
    Ok(())
}

#[derive(Debug, Args)]
pub struct VisualizeArgs {
    /// Representation archive; its mesh copy is drawn unless --mesh is given.
    #[arg(long, value_name = "DIR")]
    pub rep: PathBuf,
    /// Image to draw on (PNG).
    #[arg(long, value_name = "PATH")]
    pub image: PathBuf,
    /// Camera intrinsics JSON of the image.
    #[arg(long, value_name = "PATH")]
    pub intrinsics: PathBuf,
    /// Result JSON written by `estimate`.
    #[arg(long, value_name = "PATH")]
    pub result: PathBuf,
    /// Record to draw when the result file holds several (defaults to the first).
    #[arg(long, value_name = "ID")]
    pub image_id: Option<String>,
    /// Mesh to draw instead of the archive copy.
    #[arg(long, value_name = "PATH")]
    pub mesh: Option<PathBuf>,
    /// Output overlay PNG.
    #[arg(long, value_name = "PNG")]
    pub out: PathBuf,
}

pub fn visualize(args: &VisualizeArgs) -> Result<()> {
    let mesh_path = args
        .mesh
        .clone()
        .unwrap_or_else(|| args.rep.join(ARCHIVE_MESH));
    let mesh = Mesh::load(&mesh_path)?;
    let records = ResultRecord::load_many(&args.result)?;
    let record = match &args.image_id {
        Some(id) => records.iter().find(|r| &r.image_id == id),
        None => records.first(),
    }
    .ok_or_else(|| {
        Error::InvalidConfig(format!("no matching record in {}", args.result.display()))
    })?;
    let image = RgbImage::load_png(&args.image)?;
    let k = CameraIntrinsics::load_json(&args.intrinsics)?;
    let (overlay, pixels) = draw_contour(&image, &mesh, &record.pose()?, &k, [0.0, 1.0, 0.0])
        .map_err(at_stage("visualize"))?;
    overlay.save_png(&args.out)?;
    println!("drew {pixels} contour pixels -> {}", args.out.display());
    Ok(())
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    /// Object mesh (ASCII PLY or OBJ, millimeters).
    #[arg(long, value_name = "PATH")]
    pub mesh: PathBuf,
    /// Output directory for template_<id>.png and template_<id>_mask.png.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Also write built-in backend features as template_<id>.fpft.
    #[arg(long)]
    pub fpft: bool,
    #[command(flatten)]
    pub source: ConfigSource,
    #[command(flatten)]
    pub flags: OnboardingFlags,
}

/// Renders the templates `onboard` would use, for external feature extractors.
pub fn export_templates(args: &ExportArgs) -> Result<()> {
    let cfg = args.source.resolve(|c| args.flags.apply(c))?;
    let mesh = Mesh::load(&args.mesh)?;
    std::fs::create_dir_all(&args.out).map_err(io_error(&args.out))?;
    let backend = GradientHistogramBackend::new(cfg.patch_size);
    sample_rotations(cfg.templates, cfg.seed)
        .par_iter()
        .enumerate()
        .try_for_each(|(i, rotation)| -> Result<()> {
            let t = render_template(&mesh, rotation, cfg.size, cfg.delta, i as u32)
                .map_err(at_stage("rendering"))?;
            t.rgb.save_png(args.out.join(format!("template_{i}.png")))?;
            t.mask
                .save_png(args.out.join(format!("template_{i}_mask.png")))?;
            if args.fpft {
                let grid = extract_grid(&backend, &t.rgb).map_err(at_stage("features"))?;
                write_feature_file(&grid, args.out.join(format!("template_{i}.fpft")))?;
            }
            Ok(())
        })?;
    println!(
        "wrote {} templates -> {}",
        cfg.templates,
        args.out.display()
    );
    Ok(())
}
