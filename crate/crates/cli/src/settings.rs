//! Run configuration: built-in defaults, an optional TOML file, then flags.

use std::path::PathBuf;

use clap::Args;
use patchpose::{Result, RunConfig};

/// The committed default configuration.
pub const DEFAULT_CONFIG: &str = include_str!("../config/default.toml");

#[derive(Debug, Clone, Default, Args)]
pub struct ConfigSource {
    /// TOML file with pipeline parameters; keys it omits keep their defaults
    /// and flags given on the command line take precedence over it.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Seed for every random choice of the command.
    #[arg(long, value_name = "N")]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct OnboardingFlags {
    /// Object identifier stored in the representation.
    #[arg(long, value_name = "ID")]
    pub object_id: Option<String>,
    /// Number of rendered templates.
    #[arg(long, value_name = "N")]
    pub templates: Option<usize>,
    /// Side of templates and query crops in pixels.
    #[arg(long, value_name = "PX")]
    pub size: Option<usize>,
    /// Fraction of the crop side covered by the object's longer box side.
    #[arg(long, value_name = "F")]
    pub delta: Option<f64>,
    /// Patch side of the built-in descriptor backend in pixels.
    #[arg(long, value_name = "PX")]
    pub patch_size: Option<usize>,
    /// Dimension of PCA-reduced descriptors.
    #[arg(long, value_name = "D")]
    pub pca_dim: Option<usize>,
    /// Number of visual words.
    #[arg(long, value_name = "K")]
    pub words: Option<usize>,
    /// Words each descriptor is softly assigned to.
    #[arg(long, value_name = "N")]
    pub soft_k: Option<usize>,
    /// Width of the soft-assignment kernel.
    #[arg(long, value_name = "S")]
    pub sigma: Option<f64>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct EstimationFlags {
    /// Templates retrieved per query.
    #[arg(long, value_name = "N")]
    pub top_templates: Option<usize>,
    /// RANSAC iterations per retrieved template.
    #[arg(long, value_name = "N")]
    pub ransac_iters: Option<usize>,
    /// RANSAC inlier threshold in crop pixels.
    #[arg(long, value_name = "PX")]
    pub inlier_px: Option<f64>,
    /// Return the coarse PnP pose without featuremetric refinement.
    #[arg(long)]
    pub no_refine: bool,
    /// Maximum Levenberg-Marquardt iterations.
    #[arg(long, value_name = "N")]
    pub refine_iters: Option<usize>,
    /// Shape parameter of the robust loss.
    #[arg(long, value_name = "A", allow_hyphen_values = true)]
    pub barron_alpha: Option<f64>,
    /// Scale parameter of the robust loss.
    #[arg(long, value_name = "C")]
    pub barron_c: Option<f64>,
    /// Coarse hypotheses refined; the lowest final cost wins.
    #[arg(long, value_name = "M")]
    pub hypotheses: Option<usize>,
}

macro_rules! override_fields {
    ($flags:expr, $cfg:expr, $($field:ident),+) => {
        $(if let Some(v) = &$flags.$field {
            $cfg.$field = v.clone();
        })+
    };
}

impl OnboardingFlags {
    pub fn apply(&self, cfg: &mut RunConfig) {
        override_fields!(
            self, cfg, object_id, templates, size, delta, patch_size, pca_dim, words, soft_k, sigma
        );
    }
}

impl EstimationFlags {
    pub fn apply(&self, cfg: &mut RunConfig) {
        override_fields!(
            self,
            cfg,
            top_templates,
            ransac_iters,
            inlier_px,
            refine_iters,
            barron_alpha,
            barron_c,
            hypotheses
        );
        if self.no_refine {
            cfg.refine = false;
        }
    }
}

impl ConfigSource {
    /// Defaults, then the config file, then `flags`; validated last.
    pub fn resolve(&self, flags: impl FnOnce(&mut RunConfig)) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::from_toml_str(DEFAULT_CONFIG)?,
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        flags(&mut cfg);
        cfg.validate()?;
        Ok(cfg)
    }
}
