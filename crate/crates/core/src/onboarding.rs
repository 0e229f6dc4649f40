//! Object onboarding: PCA reduction, visual-word codebook, tf-idf statistics
//! and the per-template 3D-registered descriptor records.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, Matrix3, SymmetricEigen, Vector2, Vector3};
use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, FeatureFileError, Result};
use crate::features::{read_feature_file, write_feature_file, DescriptorBackend, FeatureGrid};
use crate::geometry::{CameraIntrinsics, Pose};
use crate::raster::Mask;
use crate::rendering::{self, render_template, Mesh, TemplateImage};

pub const ARCHIVE_VERSION: u32 = 1;

#[inline]
pub(crate) fn sq_dist(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Orthonormal projection onto the top principal directions.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaModel {
    mean: Vec<f32>,
    /// `output_dim × input_dim`, row-major.
    basis: Vec<f32>,
    input_dim: usize,
    output_dim: usize,
}

impl PcaModel {
    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    pub fn mean(&self) -> &[f32] {
        &self.mean
    }

    pub fn basis_row(&self, i: usize) -> &[f32] {
        &self.basis[i * self.input_dim..(i + 1) * self.input_dim]
    }

    /// `basis · (raw − mean)`.
    pub fn project(&self, raw: &[f32]) -> Result<Vec<f32>> {
        if raw.len() != self.input_dim {
            return Err(Error::DimMismatch {
                expected: self.input_dim,
                actual: raw.len(),
            });
        }
        let mut out = vec![0.0; self.output_dim];
        self.project_into(raw, &mut out);
        Ok(out)
    }

    pub(crate) fn project_into(&self, raw: &[f32], out: &mut [f32]) {
        for (i, o) in out.iter_mut().enumerate() {
            let row = self.basis_row(i);
            let mut acc = 0.0f64;
            for ((x, m), b) in raw.iter().zip(&self.mean).zip(row) {
                acc += (*x as f64 - *m as f64) * *b as f64;
            }
            *o = acc as f32;
        }
    }

    /// `mean + basisᵀ · reduced`.
    pub fn reconstruct(&self, reduced: &[f32]) -> Vec<f64> {
        let mut out: Vec<f64> = self.mean.iter().map(|&m| m as f64).collect();
        for (i, &y) in reduced.iter().enumerate() {
            for (o, b) in out.iter_mut().zip(self.basis_row(i)) {
                *o += y as f64 * *b as f64;
            }
        }
        out
    }

    fn to_grid(&self) -> FeatureGrid {
        let mut data = self.mean.clone();
        data.extend_from_slice(&self.basis);
        FeatureGrid::new(self.output_dim + 1, 1, self.input_dim, 1, data).expect("finite pca")
    }

    fn from_grid(g: &FeatureGrid) -> Result<Self> {
        if g.grid_w() != 1 || g.grid_h() < 2 {
            return Err(Error::CorruptArchive(
                "pca.fpft must hold mean plus at least one basis row".into(),
            ));
        }
        let r = g.dim();
        Ok(Self {
            mean: g.data()[..r].to_vec(),
            basis: g.data()[r..].to_vec(),
            input_dim: r,
            output_dim: g.grid_h() - 1,
        })
    }
}

/// Principal component analysis of `samples` (row-major, `input_dim` columns).
///
/// Directions are ordered by decreasing variance; each basis vector is signed
/// so that its largest-magnitude coefficient is positive.
pub fn fit_pca(samples: &[f32], input_dim: usize, d: usize) -> Result<PcaModel> {
    if input_dim == 0 || !samples.len().is_multiple_of(input_dim) {
        return Err(Error::DimMismatch {
            expected: input_dim,
            actual: samples.len(),
        });
    }
    if d == 0 || d > input_dim {
        return Err(Error::InvalidConfig(format!(
            "PCA output dimension {d} must lie in 1..={input_dim}"
        )));
    }
    let n = samples.len() / input_dim;
    if n < d + 1 {
        return Err(Error::RankDeficient(d));
    }
    let rows = |i: usize| &samples[i * input_dim..(i + 1) * input_dim];
    let mut mean = vec![0.0f64; input_dim];
    for i in 0..n {
        for (m, &x) in mean.iter_mut().zip(rows(i)) {
            *m += x as f64;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);

    const CHUNK: usize = 2048;
    let partials: Vec<DMatrix<f64>> = (0..n.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let lo = c * CHUNK;
            let hi = (lo + CHUNK).min(n);
            let block =
                DMatrix::from_fn(hi - lo, input_dim, |i, j| rows(lo + i)[j] as f64 - mean[j]);
            block.transpose() * &block
        })
        .collect();
    let mut cov = DMatrix::<f64>::zeros(input_dim, input_dim);
    for p in &partials {
        cov += p;
    }
    cov /= (n - 1) as f64;

    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..input_dim).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .total_cmp(&eig.eigenvalues[a])
            .then(a.cmp(&b))
    });
    let top = eig.eigenvalues[order[0]];
    let last = eig.eigenvalues[order[d - 1]];
    if !(top > 0.0) || last <= 1e-10 * top {
        return Err(Error::RankDeficient(d));
    }
    let mut basis = Vec::with_capacity(d * input_dim);
    for &idx in &order[..d] {
        let col = eig.eigenvectors.column(idx);
        let mut lead = 0;
        for j in 1..input_dim {
            if col[j].abs() > col[lead].abs() {
                lead = j;
            }
        }
        let sign = if col[lead] < 0.0 { -1.0 } else { 1.0 };
        basis.extend(col.iter().map(|&v| (sign * v) as f32));
    }
    Ok(PcaModel {
        mean: mean.iter().map(|&m| m as f32).collect(),
        basis,
        input_dim,
        output_dim: d,
    })
}

/// Visual words: `k` centroids in the reduced descriptor space.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    centroids: Vec<f32>,
    k: usize,
    dim: usize,
}

impl Codebook {
    pub fn new(centroids: Vec<f32>, dim: usize) -> Result<Self> {
        if dim == 0 || centroids.is_empty() || !centroids.len().is_multiple_of(dim) {
            return Err(Error::DimMismatch {
                expected: dim,
                actual: centroids.len(),
            });
        }
        let k = centroids.len() / dim;
        Ok(Self { centroids, k, dim })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn centroid(&self, i: usize) -> &[f32] {
        &self.centroids[i * self.dim..(i + 1) * self.dim]
    }

    fn nearest(&self, x: &[f32]) -> (usize, f32) {
        let mut best = (0, f32::INFINITY);
        for i in 0..self.k {
            let d = sq_dist(x, self.centroid(i));
            if d < best.1 {
                best = (i, d);
            }
        }
        best
    }
}

const KMEANS_MAX_ITERS: usize = 100;
const KMEANS_TOL: f64 = 1e-6;

/// k-means with k-means++ seeding. Deterministic given `seed`.
pub fn fit_codebook(samples: &[f32], dim: usize, k: usize, seed: u64) -> Result<Codebook> {
    if dim == 0 || !samples.len().is_multiple_of(dim) {
        return Err(Error::DimMismatch {
            expected: dim,
            actual: samples.len(),
        });
    }
    let n = samples.len() / dim;
    if k == 0 {
        return Err(Error::InvalidConfig(
            "codebook size must be at least 1".into(),
        ));
    }
    if n < k {
        return Err(Error::TooFewSamples {
            needed: k,
            available: n,
        });
    }
    let row = |i: usize| &samples[i * dim..(i + 1) * dim];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // k-means++ seeding.
    let mut centroids: Vec<f32> = Vec::with_capacity(k * dim);
    let first = rng.random_range(0..n);
    centroids.extend_from_slice(row(first));
    let mut d2: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| sq_dist(row(i), row(first)) as f64)
        .collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        if !(total > 0.0) {
            return Err(Error::TooFewSamples {
                needed: k,
                available: c,
            });
        }
        let target = rng.random::<f64>() * total;
        let mut acc = 0.0;
        let mut pick = n - 1;
        for (i, &w) in d2.iter().enumerate() {
            acc += w;
            if acc > target && w > 0.0 {
                pick = i;
                break;
            }
        }
        if d2[pick] == 0.0 {
            pick = d2.iter().rposition(|&w| w > 0.0).expect("positive total");
        }
        let new = row(pick).to_vec();
        d2.par_iter_mut().enumerate().for_each(|(i, w)| {
            *w = w.min(sq_dist(row(i), &new) as f64);
        });
        centroids.extend_from_slice(&new);
    }

    let mut book = Codebook { centroids, k, dim };
    for _ in 0..KMEANS_MAX_ITERS {
        let assign: Vec<(usize, f32)> = (0..n)
            .into_par_iter()
            .map(|i| book.nearest(row(i)))
            .collect();
        let mut sums = vec![0.0f64; k * dim];
        let mut counts = vec![0usize; k];
        for (i, &(c, _)) in assign.iter().enumerate() {
            counts[c] += 1;
            for (s, &x) in sums[c * dim..(c + 1) * dim].iter_mut().zip(row(i)) {
                *s += x as f64;
            }
        }
        let mut next = vec![0.0f32; k * dim];
        let mut far: Vec<(usize, f32)> = assign
            .iter()
            .enumerate()
            .map(|(i, &(_, d))| (i, d))
            .collect();
        far.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        let mut far = far.into_iter();
        for c in 0..k {
            let dst = &mut next[c * dim..(c + 1) * dim];
            if counts[c] == 0 {
                let (i, _) = far.next().expect("n >= k");
                dst.copy_from_slice(row(i));
            } else {
                for (o, s) in dst.iter_mut().zip(&sums[c * dim..(c + 1) * dim]) {
                    *o = (s / counts[c] as f64) as f32;
                }
            }
        }
        let shift = (0..k)
            .map(|c| sq_dist(&next[c * dim..(c + 1) * dim], book.centroid(c)) as f64)
            .fold(0.0, f64::max)
            .sqrt();
        book.centroids = next;
        if shift < KMEANS_TOL {
            break;
        }
    }
    Ok(book)
}

/// Document counts for the inverse-document-frequency term.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdfStats {
    pub word_doc_counts: Vec<u32>,
    pub template_count: u32,
}

impl IdfStats {
    /// `ln(N / n_i)`, or 0 for a word no template contains.
    pub fn idf(&self, word: usize) -> f64 {
        let ni = self.word_doc_counts[word];
        if ni == 0 {
            0.0
        } else {
            (self.template_count as f64 / ni as f64).ln()
        }
    }
}

/// The `soft_k` nearest words with Gaussian weights `exp(−d²/2σ²)`, nearest first.
pub fn soft_assign(
    descriptor: &[f32],
    codebook: &Codebook,
    soft_k: usize,
    sigma: f64,
) -> Vec<(usize, f64)> {
    let soft_k = soft_k.min(codebook.k()).max(1);
    let mut best: Vec<(usize, f32)> = Vec::with_capacity(soft_k + 1);
    for i in 0..codebook.k() {
        let d = sq_dist(descriptor, codebook.centroid(i));
        if best.len() == soft_k && d >= best[soft_k - 1].1 {
            continue;
        }
        let pos = best.partition_point(|&(_, bd)| bd <= d);
        best.insert(pos, (i, d));
        best.truncate(soft_k);
    }
    let two_sigma2 = 2.0 * sigma * sigma;
    best.into_iter()
        .map(|(i, d)| (i, (-(d as f64) / two_sigma2).exp()))
        .collect()
}

/// Summed soft-assignment weight per word.
pub fn term_frequencies(
    descriptors: &[f32],
    codebook: &Codebook,
    soft_k: usize,
    sigma: f64,
) -> Result<Vec<f64>> {
    let dim = codebook.dim();
    if descriptors.is_empty() {
        return Err(Error::EmptyDescriptorSet);
    }
    if !descriptors.len().is_multiple_of(dim) {
        return Err(Error::DimMismatch {
            expected: dim,
            actual: descriptors.len(),
        });
    }
    let mut tf = vec![0.0f64; codebook.k()];
    for d in descriptors.chunks_exact(dim) {
        for (w, weight) in soft_assign(d, codebook, soft_k, sigma) {
            tf[w] += weight;
        }
    }
    Ok(tf)
}

/// Unnormalized tf-idf weights `b_i = (n_it / n_t) · ln(N / n_i)`.
pub fn tfidf_weights(word_counts: &[f64], idf: &IdfStats) -> Vec<f64> {
    let total: f64 = word_counts.iter().sum();
    word_counts
        .iter()
        .enumerate()
        .map(|(i, &c)| {
            if total > 0.0 && c > 0.0 {
                c / total * idf.idf(i)
            } else {
                0.0
            }
        })
        .collect()
}

/// L2-normalized tf-idf bag-of-words vector (zero when every term vanishes).
pub fn compute_bow(
    descriptors: &[f32],
    codebook: &Codebook,
    idf: &IdfStats,
    soft_k: usize,
    sigma: f64,
) -> Result<Vec<f32>> {
    let tf = term_frequencies(descriptors, codebook, soft_k, sigma)?;
    Ok(normalized(tfidf_weights(&tf, idf)))
}

fn normalized(v: Vec<f64>) -> Vec<f32> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter().map(|x| (x / norm) as f32).collect()
    } else {
        vec![0.0; v.len()]
    }
}

/// Smallest circle centered on a mask's box center that covers every foreground pixel center.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Circle {
    pub center: [f64; 2],
    pub radius: f64,
}

pub fn bounding_circle(mask: &Mask) -> Option<Circle> {
    let bb = mask.bounding_box()?;
    let c = bb.center();
    let radius = mask
        .iter_foreground()
        .map(|(x, y)| (Vector2::new(x as f64 + 0.5, y as f64 + 0.5) - c).norm())
        .fold(0.0, f64::max);
    Some(Circle {
        center: [c.x, c.y],
        radius,
    })
}

/// One stored template: reduced descriptors registered to 3D model points.
#[derive(Debug, Clone, PartialEq)]
pub struct TemplateRecord {
    pub template_id: u32,
    pub pose: Pose,
    pub intrinsics: CameraIntrinsics,
    /// `len × dim` reduced descriptors, row-major.
    pub descriptors: Vec<f32>,
    pub points: Vec<[f32; 3]>,
    pub centers: Vec<[f32; 2]>,
    pub bow: Vec<f32>,
    /// Bounding circle of the template's mask.
    pub footprint: Circle,
    pub global: Option<Vec<f32>>,
}

impl TemplateRecord {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        if self.points.is_empty() {
            0
        } else {
            self.descriptors.len() / self.points.len()
        }
    }

    pub fn descriptor(&self, i: usize) -> &[f32] {
        let d = self.dim();
        &self.descriptors[i * d..(i + 1) * d]
    }

    pub fn point(&self, i: usize) -> Vector3<f64> {
        let p = self.points[i];
        Vector3::new(p[0] as f64, p[1] as f64, p[2] as f64)
    }

    pub fn center(&self, i: usize) -> Vector2<f64> {
        let c = self.centers[i];
        Vector2::new(c[0] as f64, c[1] as f64)
    }
}

/// Rounds a pose through f32 storage to a fixed point of `quantize ∘ orthonormalize`,
/// so that saving and loading reproduces it bit for bit.
pub(crate) fn storable_pose(pose: &Pose) -> Pose {
    let mut q = quantize_pose(pose);
    let mut current = restore_pose(&q);
    for _ in 0..8 {
        let next = quantize_pose(&current);
        if next == q {
            break;
        }
        q = next;
        current = restore_pose(&q);
    }
    current
}

fn quantize_pose(pose: &Pose) -> [f32; 12] {
    pose.to_row_major().map(|v| v as f32)
}

fn restore_pose(v: &[f32; 12]) -> Pose {
    let m = Matrix3::from_fn(|i, j| v[i * 3 + j] as f64);
    let t = Vector3::new(v[9] as f64, v[10] as f64, v[11] as f64);
    Pose::orthonormalized(m, t).unwrap_or_else(|_| Pose::from_translation(t))
}

/// Valid patches of a template: center pixel inside the mask. Returns the raw
/// descriptors, patch centers and backprojected model points.
pub(crate) struct RawEntries {
    pub descriptors: Vec<f32>,
    pub centers: Vec<[f32; 2]>,
    pub points: Vec<[f32; 3]>,
}

/// Camera depth at a continuous pixel coordinate, interpolating inverse depth
/// over the foreground pixels among its four neighbors.
fn depth_at(template: &TemplateImage, u: f64, v: f64) -> Option<f64> {
    let (w, h) = (
        template.depth.width() as i64,
        template.depth.height() as i64,
    );
    let (x, y) = (u - 0.5, v - 0.5);
    let (x0, y0) = (x.floor() as i64, y.floor() as i64);
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    let mut acc = 0.0;
    let mut wsum = 0.0;
    for (dy, wy) in [(0, 1.0 - fy), (1, fy)] {
        for (dx, wx) in [(0, 1.0 - fx), (1, fx)] {
            let (px, py) = (x0 + dx, y0 + dy);
            let wgt = wx * wy;
            if wgt == 0.0 || px < 0 || py < 0 || px >= w || py >= h {
                continue;
            }
            let d = template.depth.get(px as usize, py as usize);
            if d > 0.0 {
                acc += wgt / d;
                wsum += wgt;
            }
        }
    }
    (wsum > 0.0).then(|| wsum / acc)
}

pub(crate) fn valid_template_entries(
    template: &TemplateImage,
    grid: &FeatureGrid,
) -> Result<RawEntries> {
    check_grid_geometry(grid, template.mask.width(), template.mask.height())?;
    let mut out = RawEntries {
        descriptors: Vec::new(),
        centers: Vec::new(),
        points: Vec::new(),
    };
    for row in 0..grid.grid_h() {
        for col in 0..grid.grid_w() {
            let (u, v) = grid.patch_center(row, col);
            if !template.mask.contains_point(u, v) {
                continue;
            }
            let Some(z) = depth_at(template, u, v) else {
                continue;
            };
            let p = rendering::backproject(
                &Vector2::new(u, v),
                z,
                &template.intrinsics,
                &template.pose,
            )?;
            out.descriptors.extend_from_slice(grid.descriptor(row, col));
            out.centers.push([u as f32, v as f32]);
            out.points.push([p.x as f32, p.y as f32, p.z as f32]);
        }
    }
    if out.centers.is_empty() {
        return Err(Error::NoValidPatches);
    }
    Ok(out)
}

pub(crate) fn check_grid_geometry(grid: &FeatureGrid, width: usize, height: usize) -> Result<()> {
    if grid.grid_w() * grid.patch_size() != width || grid.grid_h() * grid.patch_size() != height {
        return Err(Error::SizeMismatch(format!(
            "{}×{} grid of {}px patches does not tile a {width}×{height} image",
            grid.grid_h(),
            grid.grid_w(),
            grid.patch_size()
        )));
    }
    Ok(())
}

fn reduce_all(pca: &PcaModel, raw: &[f32]) -> Vec<f32> {
    let (r, d) = (pca.input_dim(), pca.output_dim());
    let mut out = vec![0.0f32; raw.len() / r * d];
    out.par_chunks_mut(d)
        .zip(raw.par_chunks(r))
        .for_each(|(o, x)| pca.project_into(x, o));
    out
}

/// Builds the stored record of one template from its raw feature grid.
#[allow(clippy::too_many_arguments)]
pub fn build_template_record(
    template: &TemplateImage,
    grid: &FeatureGrid,
    pca: &PcaModel,
    codebook: &Codebook,
    idf: &IdfStats,
    soft_k: usize,
    sigma: f64,
) -> Result<TemplateRecord> {
    if grid.dim() != pca.input_dim() {
        return Err(Error::DimMismatch {
            expected: pca.input_dim(),
            actual: grid.dim(),
        });
    }
    let raw = valid_template_entries(template, grid)?;
    let descriptors = reduce_all(pca, &raw.descriptors);
    let bow = compute_bow(&descriptors, codebook, idf, soft_k, sigma)?;
    Ok(TemplateRecord {
        template_id: template.template_id,
        pose: storable_pose(&template.pose),
        intrinsics: template.intrinsics,
        descriptors,
        points: raw.points,
        centers: raw.centers,
        bow,
        footprint: bounding_circle(&template.mask).ok_or(Error::EmptyRender)?,
        global: grid.global().map(<[f32]>::to_vec),
    })
}

/// Parameters of onboarding; serialized verbatim into the archive manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OnboardingConfig {
    pub object_id: String,
    /// Template and crop side length in pixels.
    pub size: usize,
    pub delta: f64,
    pub templates: usize,
    pub words: usize,
    pub pca_dim: usize,
    pub soft_k: usize,
    pub sigma: f64,
    pub seed: u64,
    pub pca_max_samples: usize,
    pub kmeans_max_samples: usize,
}

impl Default for OnboardingConfig {
    fn default() -> Self {
        Self {
            object_id: "object".into(),
            size: 420,
            delta: 0.6,
            templates: 800,
            words: 2048,
            pca_dim: 256,
            soft_k: 3,
            sigma: 10.0,
            seed: 0,
            pca_max_samples: 200_000,
            kmeans_max_samples: 100_000,
        }
    }
}

impl OnboardingConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.size == 0 {
            return bad("size must be positive".into());
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return bad(format!("delta must lie in (0,1), got {}", self.delta));
        }
        if self.templates == 0 || self.words == 0 || self.pca_dim == 0 || self.soft_k == 0 {
            return bad("templates, words, pca_dim and soft_k must be positive".into());
        }
        if self.soft_k > self.words {
            return bad(format!(
                "soft_k {} exceeds word count {}",
                self.soft_k, self.words
            ));
        }
        if !(self.sigma > 0.0) {
            return bad(format!("sigma must be positive, got {}", self.sigma));
        }
        if self.templates > u32::MAX as usize {
            return bad("too many templates".into());
        }
        Ok(())
    }
}

/// Identity of the descriptor source used during onboarding.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendInfo {
    pub name: String,
    pub dim: usize,
    pub patch_size: usize,
}

/// Where onboarding gets the raw features of each rendered template.
pub trait TemplateFeatureSource: Sync {
    fn info(&self) -> BackendInfo;
    fn template_features(&self, template: &TemplateImage) -> Result<FeatureGrid>;
}

impl<B: DescriptorBackend> TemplateFeatureSource for B {
    fn info(&self) -> BackendInfo {
        BackendInfo {
            name: self.name().to_string(),
            dim: self.dim(),
            patch_size: self.patch_size(),
        }
    }

    fn template_features(&self, template: &TemplateImage) -> Result<FeatureGrid> {
        crate::features::extract_grid(self, &template.rgb)
    }
}

/// Precomputed features stored as `template_<id>.fpft` in a directory.
#[derive(Debug, Clone)]
pub struct FeatureDirSource {
    dir: PathBuf,
    info: BackendInfo,
}

impl FeatureDirSource {
    /// Opens `dir`, taking the descriptor shape from `template_0.fpft`.
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        let first = read_feature_file(dir.join("template_0.fpft"))?;
        Ok(Self {
            info: BackendInfo {
                name: format!("fpft:{}", dir.display()),
                dim: first.dim(),
                patch_size: first.patch_size(),
            },
            dir,
        })
    }
}

impl TemplateFeatureSource for FeatureDirSource {
    fn info(&self) -> BackendInfo {
        self.info.clone()
    }

    fn template_features(&self, template: &TemplateImage) -> Result<FeatureGrid> {
        let g = read_feature_file(
            self.dir
                .join(format!("template_{}.fpft", template.template_id)),
        )?;
        if g.dim() != self.info.dim || g.patch_size() != self.info.patch_size {
            return Err(Error::DimMismatch {
                expected: self.info.dim,
                actual: g.dim(),
            });
        }
        check_grid_geometry(&g, template.rgb.width(), template.rgb.height())?;
        Ok(g)
    }
}

/// Everything stored for one object. Immutable after onboarding.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectRepresentation {
    pub object_id: String,
    pub config: OnboardingConfig,
    pub backend: BackendInfo,
    pub pca: PcaModel,
    pub codebook: Codebook,
    pub idf: IdfStats,
    pub templates: Vec<TemplateRecord>,
    pub mesh_diameter: f64,
}

impl ObjectRepresentation {
    pub fn template(&self, id: u32) -> Option<&TemplateRecord> {
        self.templates.iter().find(|t| t.template_id == id)
    }

    pub fn has_global_descriptors(&self) -> bool {
        !self.templates.is_empty() && self.templates.iter().all(|t| t.global.is_some())
    }
}

struct PendingTemplate {
    template_id: u32,
    pose: Pose,
    intrinsics: CameraIntrinsics,
    raw: RawEntries,
    footprint: Circle,
    global: Option<Vec<f32>>,
}

fn subsample(rows: usize, max: usize, rng: &mut ChaCha8Rng) -> Option<Vec<usize>> {
    (rows > max).then(|| {
        let mut idx = sample_indices(rng, rows, max).into_vec();
        idx.sort_unstable();
        idx
    })
}

fn gather(data: &[f32], dim: usize, idx: Option<&[usize]>) -> Vec<f32> {
    match idx {
        None => data.to_vec(),
        Some(idx) => idx
            .iter()
            .flat_map(|&i| data[i * dim..(i + 1) * dim].iter().copied())
            .collect(),
    }
}

/// Renders templates, fits PCA and the codebook, and builds every record.
pub fn onboard_object(
    mesh: &Mesh,
    config: &OnboardingConfig,
    source: &dyn TemplateFeatureSource,
) -> Result<ObjectRepresentation> {
    config.validate()?;
    let backend = source.info();
    if !config.size.is_multiple_of(backend.patch_size) {
        return Err(Error::InvalidConfig(format!(
            "template size {} is not a multiple of patch size {}",
            config.size, backend.patch_size
        )));
    }
    let pca_dim = config.pca_dim.min(backend.dim);
    if pca_dim < config.pca_dim {
        log::warn!(
            "pca_dim {} exceeds descriptor dimension {}; using {}",
            config.pca_dim,
            backend.dim,
            pca_dim
        );
    }
    let mut config = config.clone();
    config.pca_dim = pca_dim;

    let rotations = rendering::sample_rotations(config.templates, config.seed);
    let pending: Vec<PendingTemplate> = rotations
        .par_iter()
        .enumerate()
        .map(|(i, rot)| -> Result<PendingTemplate> {
            let t = render_template(mesh, rot, config.size, config.delta, i as u32)?;
            let grid = source.template_features(&t)?;
            if grid.dim() != backend.dim {
                return Err(Error::DimMismatch {
                    expected: backend.dim,
                    actual: grid.dim(),
                });
            }
            let raw = valid_template_entries(&t, &grid)?;
            Ok(PendingTemplate {
                template_id: t.template_id,
                pose: storable_pose(&t.pose),
                intrinsics: t.intrinsics,
                raw,
                footprint: bounding_circle(&t.mask).ok_or(Error::EmptyRender)?,
                global: grid.global().map(<[f32]>::to_vec),
            })
        })
        .collect::<Result<_>>()?;

    let r = backend.dim;
    let all_raw: Vec<f32> = pending
        .iter()
        .flat_map(|p| p.raw.descriptors.iter().copied())
        .collect();
    let rows = all_raw.len() / r;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let pca_idx = subsample(rows, config.pca_max_samples, &mut rng);
    let pca = fit_pca(&gather(&all_raw, r, pca_idx.as_deref()), r, pca_dim)?;
    drop(all_raw);

    let reduced: Vec<Vec<f32>> = pending
        .par_iter()
        .map(|p| reduce_all(&pca, &p.raw.descriptors))
        .collect();
    let all_reduced: Vec<f32> = reduced.iter().flatten().copied().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(2));
    let km_idx = subsample(rows, config.kmeans_max_samples, &mut rng);
    let codebook = fit_codebook(
        &gather(&all_reduced, pca_dim, km_idx.as_deref()),
        pca_dim,
        config.words,
        config.seed.wrapping_add(3),
    )?;
    drop(all_reduced);

    let assignments: Vec<Vec<Vec<(usize, f64)>>> = reduced
        .par_iter()
        .map(|descs| {
            descs
                .chunks_exact(pca_dim)
                .map(|d| soft_assign(d, &codebook, config.soft_k, config.sigma))
                .collect()
        })
        .collect();
    let mut word_doc_counts = vec![0u32; codebook.k()];
    for per_template in &assignments {
        let words: BTreeSet<usize> = per_template.iter().flatten().map(|&(w, _)| w).collect();
        for w in words {
            word_doc_counts[w] += 1;
        }
    }
    let idf = IdfStats {
        word_doc_counts,
        template_count: pending.len() as u32,
    };

    let templates: Vec<TemplateRecord> = pending
        .into_par_iter()
        .zip(reduced)
        .zip(assignments)
        .map(|((p, descriptors), assigned)| {
            let mut tf = vec![0.0f64; codebook.k()];
            for (w, weight) in assigned.iter().flatten() {
                tf[*w] += weight;
            }
            TemplateRecord {
                template_id: p.template_id,
                pose: p.pose,
                intrinsics: p.intrinsics,
                descriptors,
                points: p.raw.points,
                centers: p.raw.centers,
                bow: normalized(tfidf_weights(&tf, &idf)),
                footprint: p.footprint,
                global: p.global,
            }
        })
        .collect();

    Ok(ObjectRepresentation {
        object_id: config.object_id.clone(),
        config,
        backend,
        pca,
        codebook,
        idf,
        templates,
        mesh_diameter: mesh.diameter(),
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    object_id: String,
    config: OnboardingConfig,
    backend: BackendInfo,
    mesh_diameter: f64,
    template_count: usize,
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::parse(path.display().to_string(), e))
}

fn encode_templates(rep: &ObjectRepresentation) -> Vec<u8> {
    let mut out = Vec::new();
    let put = |v: f32, out: &mut Vec<u8>| out.extend_from_slice(&v.to_le_bytes());
    for t in &rep.templates {
        out.extend_from_slice(&t.template_id.to_le_bytes());
        for v in t.pose.to_row_major() {
            put(v as f32, &mut out);
        }
        for v in [
            t.intrinsics.fx,
            t.intrinsics.fy,
            t.intrinsics.cx,
            t.intrinsics.cy,
        ] {
            put(v as f32, &mut out);
        }
        out.extend_from_slice(&(t.len() as u32).to_le_bytes());
        for i in 0..t.len() {
            for &v in t.descriptor(i) {
                put(v, &mut out);
            }
            for v in t.points[i] {
                put(v, &mut out);
            }
            for v in t.centers[i] {
                put(v, &mut out);
            }
        }
        for &v in &t.bow {
            put(v, &mut out);
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn u32(&mut self) -> std::result::Result<u32, FeatureFileError> {
        let b = self
            .bytes
            .get(self.pos..self.pos + 4)
            .ok_or(FeatureFileError::TruncatedFile)?;
        self.pos += 4;
        Ok(u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn f32(&mut self) -> std::result::Result<f32, FeatureFileError> {
        self.u32().map(f32::from_bits)
    }

    fn f32s(&mut self, n: usize) -> std::result::Result<Vec<f32>, FeatureFileError> {
        (0..n).map(|_| self.f32()).collect()
    }
}

/// Writes the representation archive into `dir` (created if missing).
pub fn save_representation(rep: &ObjectRepresentation, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = Manifest {
        format_version: ARCHIVE_VERSION,
        object_id: rep.object_id.clone(),
        config: rep.config.clone(),
        backend: rep.backend.clone(),
        mesh_diameter: rep.mesh_diameter,
        template_count: rep.templates.len(),
    };
    write_file(&dir.join("manifest.json"), to_json(&manifest).as_bytes())?;
    write_feature_file(&rep.pca.to_grid(), dir.join("pca.fpft"))?;
    let cb = FeatureGrid::new(
        rep.codebook.k(),
        1,
        rep.codebook.dim(),
        1,
        rep.codebook.centroids.clone(),
    )?;
    write_feature_file(&cb, dir.join("codebook.fpft"))?;
    write_file(&dir.join("idf.json"), to_json(&rep.idf).as_bytes())?;
    write_file(&dir.join("templates.bin"), &encode_templates(rep))?;
    let footprints: Vec<Circle> = rep.templates.iter().map(|t| t.footprint).collect();
    write_file(
        &dir.join("footprints.json"),
        to_json(&footprints).as_bytes(),
    )?;
    let globals = dir.join("globals.fpft");
    if rep.has_global_descriptors() {
        let dim_g = rep.templates[0].global.as_ref().map_or(0, Vec::len);
        let data: Vec<f32> = rep
            .templates
            .iter()
            .flat_map(|t| t.global.clone().unwrap())
            .collect();
        write_feature_file(
            &FeatureGrid::new(rep.templates.len(), 1, dim_g, 1, data)?,
            &globals,
        )?;
    } else if globals.exists() {
        std::fs::remove_file(&globals).map_err(|e| Error::io(&globals, e))?;
    }
    Ok(())
}

fn to_json<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("serializable");
    s.push('\n');
    s
}

/// Reads an archive written by [`save_representation`].
pub fn load_representation(dir: impl AsRef<Path>) -> Result<ObjectRepresentation> {
    let dir = dir.as_ref();
    let manifest_path = dir.join("manifest.json");
    let manifest: Manifest = read_json(&manifest_path)?;
    if manifest.format_version != ARCHIVE_VERSION {
        return Err(Error::FeatureFile {
            path: manifest_path,
            source: FeatureFileError::UnsupportedVersion(manifest.format_version),
        });
    }
    let corrupt = |m: String| Error::CorruptArchive(m);
    let pca = PcaModel::from_grid(&read_feature_file(dir.join("pca.fpft"))?)?;
    let cb = read_feature_file(dir.join("codebook.fpft"))?;
    let codebook = Codebook::new(cb.data().to_vec(), cb.dim())?;
    let idf: IdfStats = read_json(&dir.join("idf.json"))?;
    let footprints: Vec<Circle> = read_json(&dir.join("footprints.json"))?;
    let d = pca.output_dim();
    if codebook.dim() != d
        || idf.word_doc_counts.len() != codebook.k()
        || pca.input_dim() != manifest.backend.dim
    {
        return Err(corrupt("pca, codebook and idf dimensions disagree".into()));
    }
    if footprints.len() != manifest.template_count {
        return Err(corrupt(
            "footprint count differs from template count".into(),
        ));
    }

    let tpath = dir.join("templates.bin");
    let bytes = std::fs::read(&tpath).map_err(|e| Error::io(&tpath, e))?;
    let file_err = |source| Error::FeatureFile {
        path: tpath.clone(),
        source,
    };
    let size = manifest.config.size as u32;
    let mut rd = Reader {
        bytes: &bytes,
        pos: 0,
    };
    let mut templates = Vec::with_capacity(manifest.template_count);
    for footprint in footprints {
        let template_id = rd.u32().map_err(file_err)?;
        let pose_raw: [f32; 12] = rd.f32s(12).map_err(file_err)?.try_into().unwrap();
        let k = rd.f32s(4).map_err(file_err)?;
        let n = rd.u32().map_err(file_err)? as usize;
        if n.saturating_mul((d + 5) * 4) > bytes.len() - rd.pos {
            return Err(file_err(FeatureFileError::TruncatedFile));
        }
        let mut descriptors = Vec::with_capacity(n * d);
        let mut points = Vec::with_capacity(n);
        let mut centers = Vec::with_capacity(n);
        for _ in 0..n {
            descriptors.extend(rd.f32s(d).map_err(file_err)?);
            let p = rd.f32s(3).map_err(file_err)?;
            points.push([p[0], p[1], p[2]]);
            let c = rd.f32s(2).map_err(file_err)?;
            centers.push([c[0], c[1]]);
        }
        let bow = rd.f32s(codebook.k()).map_err(file_err)?;
        let intrinsics = CameraIntrinsics::new(
            k[0] as f64,
            k[1] as f64,
            k[2] as f64,
            k[3] as f64,
            size,
            size,
        )?;
        templates.push(TemplateRecord {
            template_id,
            pose: restore_pose(&pose_raw),
            intrinsics,
            descriptors,
            points,
            centers,
            bow,
            footprint,
            global: None,
        });
    }
    if rd.pos != bytes.len() {
        return Err(file_err(FeatureFileError::TrailingBytes(
            bytes.len() - rd.pos,
        )));
    }
    let gpath = dir.join("globals.fpft");
    if gpath.exists() {
        let g = read_feature_file(&gpath)?;
        if g.grid_h() != templates.len() {
            return Err(corrupt(
                "globals.fpft row count differs from template count".into(),
            ));
        }
        for (i, t) in templates.iter_mut().enumerate() {
            t.global = Some(g.data()[i * g.dim()..(i + 1) * g.dim()].to_vec());
        }
    }
    Ok(ObjectRepresentation {
        object_id: manifest.object_id,
        config: manifest.config,
        backend: manifest.backend,
        pca,
        codebook,
        idf,
        templates,
        mesh_diameter: manifest.mesh_diameter,
    })
}
