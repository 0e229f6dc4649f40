//! Template retrieval by tf-idf cosine similarity.

use crate::error::{Error, Result};
use crate::features::FeatureGrid;
use crate::onboarding::{check_grid_geometry, compute_bow, ObjectRepresentation, PcaModel};
use crate::raster::Mask;

/// PCA-reduced descriptors of the crop patches whose center pixel lies in the mask.
#[derive(Debug, Clone, PartialEq)]
pub struct CropDescriptors {
    /// `len × dim`, row-major.
    pub descriptors: Vec<f32>,
    /// Patch centers in crop pixels.
    pub centers: Vec<[f64; 2]>,
    pub dim: usize,
}

impl CropDescriptors {
    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    pub fn descriptor(&self, i: usize) -> &[f32] {
        &self.descriptors[i * self.dim..(i + 1) * self.dim]
    }
}

pub fn crop_descriptors(
    grid: &FeatureGrid,
    mask: &Mask,
    pca: &PcaModel,
) -> Result<CropDescriptors> {
    check_grid_geometry(grid, mask.width(), mask.height())?;
    if grid.dim() != pca.input_dim() {
        return Err(Error::DimMismatch {
            expected: pca.input_dim(),
            actual: grid.dim(),
        });
    }
    let dim = pca.output_dim();
    let mut out = CropDescriptors {
        descriptors: Vec::new(),
        centers: Vec::new(),
        dim,
    };
    let mut buf = vec![0.0f32; dim];
    for row in 0..grid.grid_h() {
        for col in 0..grid.grid_w() {
            let (u, v) = grid.patch_center(row, col);
            if mask.contains_point(u, v) {
                pca.project_into(grid.descriptor(row, col), &mut buf);
                out.descriptors.extend_from_slice(&buf);
                out.centers.push([u, v]);
            }
        }
    }
    if out.is_empty() {
        return Err(Error::NoValidPatches);
    }
    Ok(out)
}

/// Bag-of-words vector of a query crop, built exactly like the template vectors.
pub fn query_bow(grid: &FeatureGrid, mask: &Mask, rep: &ObjectRepresentation) -> Result<Vec<f32>> {
    let crop = crop_descriptors(grid, mask, &rep.pca)?;
    bow_of(&crop, rep)
}

pub(crate) fn bow_of(crop: &CropDescriptors, rep: &ObjectRepresentation) -> Result<Vec<f32>> {
    compute_bow(
        &crop.descriptors,
        &rep.codebook,
        &rep.idf,
        rep.config.soft_k,
        rep.config.sigma,
    )
}

/// Templates ranked by decreasing similarity, ties by increasing id.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalResult {
    pub ranked: Vec<(u32, f64)>,
    pub h: usize,
}

impl RetrievalResult {
    pub fn ids(&self) -> impl Iterator<Item = u32> + '_ {
        self.ranked.iter().map(|&(id, _)| id)
    }
}

/// Cosine similarity; 0 when either vector is zero.
pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let (mut ab, mut aa, mut bb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64, y as f64);
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    if aa == 0.0 || bb == 0.0 {
        0.0
    } else {
        ab / (aa.sqrt() * bb.sqrt())
    }
}

fn rank(mut scored: Vec<(u32, f64)>, h: usize) -> RetrievalResult {
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    scored.truncate(h);
    RetrievalResult { ranked: scored, h }
}

pub fn retrieve(query: &[f32], rep: &ObjectRepresentation, h: usize) -> RetrievalResult {
    let scored = rep
        .templates
        .iter()
        .map(|t| (t.template_id, cosine(query, &t.bow)))
        .collect();
    rank(scored, h.max(1))
}

/// Ranking by the optional per-template global descriptors.
pub fn retrieve_by_global(
    query: &[f32],
    rep: &ObjectRepresentation,
    h: usize,
) -> Result<RetrievalResult> {
    if !rep.has_global_descriptors() {
        return Err(Error::GlobalDescriptorsAbsent);
    }
    let scored = rep
        .templates
        .iter()
        .map(|t| {
            (
                t.template_id,
                cosine(query, t.global.as_deref().unwrap_or_default()),
            )
        })
        .collect();
    Ok(rank(scored, h.max(1)))
}
