//! Template-based 6D pose estimation of rigid objects from a single RGB image.
//!
//! An object mesh is onboarded into a compact representation made of
//! 3D-registered patch descriptors and bag-of-words vectors, one per rendered
//! template. At inference, an image crop around a segmentation mask is matched
//! against the templates: the most similar templates are retrieved by tf-idf
//! cosine similarity, 2D-3D correspondences are fitted with EPnP inside
//! RANSAC, and the best pose is refined by featuremetric Levenberg-Marquardt.
//!
//! The main entry points are [`onboarding::onboard_object`] and
//! [`pipeline::estimate_pose`].

// Negated float comparisons are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod error;
pub mod evaluation;
pub mod features;
pub mod geometry;
pub mod onboarding;
pub mod pipeline;
pub mod pose_estimation;
pub mod raster;
pub mod refinement;
pub mod rendering;
pub mod retrieval;
pub mod synthetic;

pub use config::RunConfig;
pub use error::{Error, FeatureFileError, Result};
pub use features::{DescriptorBackend, FeatureGrid, GradientHistogramBackend};
pub use geometry::{BoundingBox, CameraIntrinsics, Pose, VirtualCrop};
pub use onboarding::{ObjectRepresentation, OnboardingConfig, TemplateRecord};
pub use pipeline::{DetectionInput, EstimateOptions, PoseEstimate};
pub use raster::{DepthMap, Mask, RgbImage};
pub use rendering::{Mesh, TemplateImage};
