//! Run-wide parameters shared by onboarding, estimation and the CLI.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::onboarding::OnboardingConfig;
use crate::pipeline::EstimateOptions;
use crate::refinement::RefinementConfig;

/// Every tunable of the pipeline. Unknown keys in a config file are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub object_id: String,
    /// Number of rendered templates.
    pub templates: usize,
    /// Side of templates and query crops in pixels.
    pub size: usize,
    /// Fraction of the crop side covered by the object's longer box side.
    pub delta: f64,
    pub patch_size: usize,
    pub pca_dim: usize,
    pub words: usize,
    pub soft_k: usize,
    pub sigma: f64,
    /// Templates retrieved per query.
    pub top_templates: usize,
    pub ransac_iters: usize,
    pub inlier_px: f64,
    pub refine: bool,
    pub refine_iters: usize,
    pub barron_alpha: f64,
    pub barron_c: f64,
    pub hypotheses: usize,
    pub seed: u64,
    pub pca_max_samples: usize,
    pub kmeans_max_samples: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let onboarding = OnboardingConfig::default();
        let refinement = RefinementConfig::default();
        Self {
            object_id: onboarding.object_id,
            templates: onboarding.templates,
            size: onboarding.size,
            delta: onboarding.delta,
            patch_size: 14,
            pca_dim: onboarding.pca_dim,
            words: onboarding.words,
            soft_k: onboarding.soft_k,
            sigma: onboarding.sigma,
            top_templates: 5,
            ransac_iters: 400,
            inlier_px: 10.0,
            refine: true,
            refine_iters: refinement.max_iters,
            barron_alpha: refinement.barron_alpha,
            barron_c: refinement.barron_c,
            hypotheses: 1,
            seed: onboarding.seed,
            pca_max_samples: onboarding.pca_max_samples,
            kmeans_max_samples: onboarding.kmeans_max_samples,
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::parse("run config", e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: RunConfig =
            toml::from_str(&text).map_err(|e| Error::parse(path.display().to_string(), e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.onboarding().validate()?;
        self.estimate_options().validate()?;
        if self.patch_size == 0 || !self.size.is_multiple_of(self.patch_size) {
            return Err(Error::InvalidConfig(format!(
                "size {} must be a positive multiple of patch_size {}",
                self.size, self.patch_size
            )));
        }
        Ok(())
    }

    pub fn onboarding(&self) -> OnboardingConfig {
        OnboardingConfig {
            object_id: self.object_id.clone(),
            size: self.size,
            delta: self.delta,
            templates: self.templates,
            words: self.words,
            pca_dim: self.pca_dim,
            soft_k: self.soft_k,
            sigma: self.sigma,
            seed: self.seed,
            pca_max_samples: self.pca_max_samples,
            kmeans_max_samples: self.kmeans_max_samples,
        }
    }

    pub fn estimate_options(&self) -> EstimateOptions {
        EstimateOptions {
            top_templates: self.top_templates,
            ransac_iters: self.ransac_iters,
            inlier_px: self.inlier_px,
            refine: self.refine,
            refinement: RefinementConfig {
                max_iters: self.refine_iters,
                barron_alpha: self.barron_alpha,
                barron_c: self.barron_c,
                ..RefinementConfig::default()
            },
            hypotheses: self.hypotheses,
            seed: self.seed,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid_and_match_reference_parameters() {
        let c = RunConfig::default();
        c.validate().unwrap();
        assert_eq!(c.templates, 800);
        assert_eq!(c.size, 420);
        assert_eq!(c.delta, 0.6);
        assert_eq!(c.patch_size, 14);
        assert_eq!(c.pca_dim, 256);
        assert_eq!(c.words, 2048);
        assert_eq!(c.soft_k, 3);
        assert_eq!(c.sigma, 10.0);
        assert_eq!(c.top_templates, 5);
        assert_eq!(c.ransac_iters, 400);
        assert_eq!(c.inlier_px, 10.0);
        assert_eq!(c.refine_iters, 30);
        assert_eq!(c.barron_alpha, -5.0);
        assert_eq!(c.barron_c, 0.5);
    }

    #[test]
    fn toml_round_trip_and_partial_files() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::from_toml_str(&c.to_toml_string()).unwrap(), c);
        let partial = RunConfig::from_toml_str("templates = 64\nwords = 128\n").unwrap();
        assert_eq!(partial.templates, 64);
        assert_eq!(partial.size, 420);
    }

    #[test]
    fn invalid_values_are_rejected() {
        for text in [
            "delta = 1.5",
            "size = 421",
            "soft_k = 0",
            "barron_c = 0.0",
            "bogus = 1",
            "templates = \"x\"",
        ] {
            let err = RunConfig::from_toml_str(text).unwrap_err();
            assert!(err.is_config(), "{text}: {err}");
        }
    }
}
