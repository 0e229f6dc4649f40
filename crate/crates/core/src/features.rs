//! Patch-descriptor grids, the built-in gradient-histogram backend and the
//! FPFT feature-tensor file format.
//!
//! FPFT layout (little-endian): `"FPFT"`, then u32 `version = 1`, `grid_h`,
//! `grid_w`, `dim`, `patch_size`, `dtype` (0 = f32), `reserved = 0`, followed
//! by `grid_h·grid_w·dim` f32 values in row-major patch order. An optional
//! trailing block `dim_g: u32, dim_g × f32` stores a global descriptor.

use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, FeatureFileError, Result};
use crate::raster::RgbImage;

const MAGIC: &[u8; 4] = b"FPFT";
const VERSION: u32 = 1;
const HEADER_LEN: usize = 32;

/// `grid_h × grid_w` patch descriptors of length `dim`, row-major, top-left first.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid {
    grid_h: usize,
    grid_w: usize,
    dim: usize,
    patch_size: usize,
    data: Vec<f32>,
    global: Option<Vec<f32>>,
}

impl FeatureGrid {
    pub fn new(
        grid_h: usize,
        grid_w: usize,
        dim: usize,
        patch_size: usize,
        data: Vec<f32>,
    ) -> Result<Self> {
        if grid_h * grid_w * dim != data.len() {
            return Err(Error::SizeMismatch(format!(
                "{grid_h}×{grid_w}×{dim} grid needs {} values, got {}",
                grid_h * grid_w * dim,
                data.len()
            )));
        }
        if patch_size < 1 {
            return Err(Error::SizeMismatch("patch size must be at least 1".into()));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::SizeMismatch(
                "feature grid contains NaN or Inf".into(),
            ));
        }
        Ok(Self {
            grid_h,
            grid_w,
            dim,
            patch_size,
            data,
            global: None,
        })
    }

    pub fn with_global(mut self, global: Vec<f32>) -> Result<Self> {
        if !global.iter().all(|v| v.is_finite()) {
            return Err(Error::SizeMismatch(
                "global descriptor contains NaN or Inf".into(),
            ));
        }
        self.global = Some(global);
        Ok(self)
    }

    pub fn grid_h(&self) -> usize {
        self.grid_h
    }

    pub fn grid_w(&self) -> usize {
        self.grid_w
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn patch_size(&self) -> usize {
        self.patch_size
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn global(&self) -> Option<&[f32]> {
        self.global.as_deref()
    }

    pub fn len(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn descriptor(&self, row: usize, col: usize) -> &[f32] {
        let i = (row * self.grid_w + col) * self.dim;
        &self.data[i..i + self.dim]
    }

    /// Continuous pixel coordinate of a patch center.
    pub fn patch_center(&self, row: usize, col: usize) -> (f64, f64) {
        let s = self.patch_size as f64;
        ((col as f64 + 0.5) * s, (row as f64 + 0.5) * s)
    }

    /// Bit-exact FPFT encoding.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.data.len() * 4);
        out.extend_from_slice(MAGIC);
        for v in [
            VERSION,
            self.grid_h as u32,
            self.grid_w as u32,
            self.dim as u32,
            self.patch_size as u32,
            0,
            0,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        if let Some(g) = &self.global {
            out.extend_from_slice(&(g.len() as u32).to_le_bytes());
            for v in g {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, FeatureFileError> {
        use FeatureFileError::*;
        if bytes.len() < 4 {
            return Err(TruncatedFile);
        }
        if &bytes[..4] != MAGIC {
            return Err(BadMagic);
        }
        if bytes.len() < HEADER_LEN {
            return Err(TruncatedFile);
        }
        let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
        let version = word(0);
        if version != VERSION {
            return Err(UnsupportedVersion(version));
        }
        let (grid_h, grid_w, dim, patch_size, dtype) = (
            word(1) as usize,
            word(2) as usize,
            word(3) as usize,
            word(4) as usize,
            word(5),
        );
        if dtype != 0 {
            return Err(DtypeUnsupported(dtype));
        }
        let count = grid_h
            .checked_mul(grid_w)
            .and_then(|v| v.checked_mul(dim))
            .ok_or(TruncatedFile)?;
        let end = count
            .checked_mul(4)
            .and_then(|v| v.checked_add(HEADER_LEN))
            .ok_or(TruncatedFile)?;
        if bytes.len() < end {
            return Err(TruncatedFile);
        }
        let data = read_f32s(&bytes[HEADER_LEN..end]);
        let extra = &bytes[end..];
        let global = if extra.is_empty() {
            None
        } else if extra.len() < 4 {
            return Err(TrailingBytes(extra.len()));
        } else {
            let dim_g = u32::from_le_bytes(extra[..4].try_into().unwrap()) as usize;
            let need = dim_g
                .checked_mul(4)
                .and_then(|v| v.checked_add(4))
                .ok_or(TruncatedFile)?;
            match extra.len().cmp(&need) {
                std::cmp::Ordering::Less => return Err(TruncatedFile),
                std::cmp::Ordering::Greater => return Err(TrailingBytes(extra.len() - need)),
                std::cmp::Ordering::Equal => Some(read_f32s(&extra[4..])),
            }
        };
        let grid = FeatureGrid::new(grid_h, grid_w, dim, patch_size.max(1), data)
            .map_err(|_| TruncatedFile)?;
        Ok(match global {
            Some(g) => grid.with_global(g).map_err(|_| TruncatedFile)?,
            None => grid,
        })
    }
}

fn read_f32s(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect()
}

pub fn write_feature_file(grid: &FeatureGrid, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, grid.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_feature_file(path: impl AsRef<Path>) -> Result<FeatureGrid> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    FeatureGrid::from_bytes(&bytes).map_err(|source| Error::FeatureFile {
        path: path.to_path_buf(),
        source,
    })
}

/// A patch-descriptor extractor.
pub trait DescriptorBackend: Send + Sync {
    fn name(&self) -> &str;
    fn dim(&self) -> usize;
    fn patch_size(&self) -> usize;
    /// One descriptor per non-overlapping patch. Callers go through [`extract_grid`].
    fn extract(&self, image: &RgbImage) -> Result<FeatureGrid>;
}

/// Runs `backend` after checking that the image tiles into whole patches.
pub fn extract_grid(backend: &dyn DescriptorBackend, image: &RgbImage) -> Result<FeatureGrid> {
    let s = backend.patch_size();
    if !image.width().is_multiple_of(s)
        || !image.height().is_multiple_of(s)
        || image.width() == 0
        || image.height() == 0
    {
        return Err(Error::SizeMismatch(format!(
            "{}×{} image does not tile into {s}px patches",
            image.width(),
            image.height()
        )));
    }
    let grid = backend.extract(image)?;
    debug_assert_eq!(grid.grid_w() * s, image.width());
    Ok(grid)
}

const CELLS: usize = 4;
const BINS: usize = 8;
pub const GRADIENT_DESCRIPTOR_DIM: usize = CELLS * CELLS * BINS;

/// Dense 4×4×8 gradient-orientation histograms over non-overlapping patches.
#[derive(Debug, Clone)]
pub struct GradientHistogramBackend {
    patch_size: usize,
}

impl GradientHistogramBackend {
    pub const NAME: &'static str = "gradient-histogram";

    pub fn new(patch_size: usize) -> Self {
        assert!(patch_size >= 2, "patch size must be at least 2");
        Self { patch_size }
    }
}

impl Default for GradientHistogramBackend {
    fn default() -> Self {
        Self::new(14)
    }
}

impl DescriptorBackend for GradientHistogramBackend {
    fn name(&self) -> &str {
        Self::NAME
    }

    fn dim(&self) -> usize {
        GRADIENT_DESCRIPTOR_DIM
    }

    fn patch_size(&self) -> usize {
        self.patch_size
    }

    fn extract(&self, image: &RgbImage) -> Result<FeatureGrid> {
        let s = self.patch_size;
        let (gw, gh) = (image.width() / s, image.height() / s);
        let rows: Vec<Vec<f32>> = (0..gh)
            .into_par_iter()
            .map(|r| {
                let mut out = Vec::with_capacity(gw * GRADIENT_DESCRIPTOR_DIM);
                let mut patch = vec![0.0f32; s * s];
                for c in 0..gw {
                    for y in 0..s {
                        for x in 0..s {
                            patch[y * s + x] = image.luma(c * s + x, r * s + y);
                        }
                    }
                    out.extend(gradient_descriptor(&patch, s));
                }
                out
            })
            .collect();
        FeatureGrid::new(gh, gw, GRADIENT_DESCRIPTOR_DIM, s, rows.concat())
    }
}

/// SIFT-style descriptor of one `s×s` grayscale patch.
///
/// Central-difference gradients with replicate padding at the patch border;
/// magnitudes are trilinearly binned into 4×4 cells × 8 orientations, the
/// histogram is L2-normalized, clipped at 0.2 and renormalized. A patch with
/// no gradient yields the zero vector.
pub fn gradient_descriptor(patch: &[f32], s: usize) -> Vec<f32> {
    assert_eq!(patch.len(), s * s);
    let mut hist = [0.0f64; GRADIENT_DESCRIPTOR_DIM];
    let at = |x: usize, y: usize| patch[y * s + x] as f64;
    let tau = std::f64::consts::TAU;
    for y in 0..s {
        for x in 0..s {
            let gx = 0.5 * (at((x + 1).min(s - 1), y) - at(x.saturating_sub(1), y));
            let gy = 0.5 * (at(x, (y + 1).min(s - 1)) - at(x, y.saturating_sub(1)));
            let mag = gx.hypot(gy);
            if mag == 0.0 {
                continue;
            }
            let mut ori = gy.atan2(gx);
            if ori < 0.0 {
                ori += tau;
            }
            let ob = ori / tau * BINS as f64;
            let o0 = ob.floor();
            let fo = ob - o0;
            let o0 = o0 as usize % BINS;
            let o1 = (o0 + 1) % BINS;

            let cxf = (x as f64 + 0.5) / s as f64 * CELLS as f64 - 0.5;
            let cyf = (y as f64 + 0.5) / s as f64 * CELLS as f64 - 0.5;
            let (cx0, cy0) = (cxf.floor(), cyf.floor());
            let (fx, fy) = (cxf - cx0, cyf - cy0);
            for (dy, wy) in [(0i64, 1.0 - fy), (1, fy)] {
                let cy = cy0 as i64 + dy;
                if !(0..CELLS as i64).contains(&cy) || wy == 0.0 {
                    continue;
                }
                for (dx, wx) in [(0i64, 1.0 - fx), (1, fx)] {
                    let cx = cx0 as i64 + dx;
                    if !(0..CELLS as i64).contains(&cx) || wx == 0.0 {
                        continue;
                    }
                    let base = (cy as usize * CELLS + cx as usize) * BINS;
                    let w = mag * wx * wy;
                    hist[base + o0] += w * (1.0 - fo);
                    hist[base + o1] += w * fo;
                }
            }
        }
    }
    normalize_clip(&mut hist);
    hist.iter().map(|&v| v as f32).collect()
}

fn normalize_clip(h: &mut [f64]) {
    let norm = h.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm < 1e-12 {
        h.iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    h.iter_mut().for_each(|v| *v = (*v / norm).min(0.2));
    let norm = h.iter().map(|v| v * v).sum::<f64>().sqrt();
    h.iter_mut().for_each(|v| *v /= norm);
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(w: usize, h: usize, seed: u64) -> RgbImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        RgbImage::from_fn(w, h, |_, _| [rng.random(), rng.random(), rng.random()])
    }

    #[test]
    fn grid_shape_for_default_crop() {
        let b = GradientHistogramBackend::default();
        let g = extract_grid(&b, &random_image(420, 420, 1)).unwrap();
        assert_eq!(
            (g.grid_h(), g.grid_w(), g.dim(), g.patch_size()),
            (30, 30, 128, 14)
        );
        assert!(matches!(
            extract_grid(&b, &random_image(419, 420, 1)),
            Err(Error::SizeMismatch(_))
        ));
    }

    #[test]
    fn constant_image_gives_zero_descriptors() {
        let b = GradientHistogramBackend::default();
        let img = RgbImage::from_fn(56, 56, |_, _| [0.3, 0.6, 0.2]);
        let g = extract_grid(&b, &img).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn extraction_is_deterministic() {
        let b = GradientHistogramBackend::default();
        let img = random_image(84, 84, 3);
        assert_eq!(
            extract_grid(&b, &img).unwrap(),
            extract_grid(&b, &img).unwrap()
        );
    }

    #[test]
    fn vertical_step_edge_fills_horizontal_bins() {
        let s = 14;
        let patch: Vec<f32> = (0..s * s)
            .map(|i| if i % s < 7 { 0.1 } else { 0.9 })
            .collect();
        let d = gradient_descriptor(&patch, s);
        let total: f32 = d.iter().sum();
        let horizontal: f32 = d
            .iter()
            .enumerate()
            .filter(|(i, _)| i % 8 == 0 || i % 8 == 4)
            .map(|(_, v)| v)
            .sum();
        assert!(horizontal / total > 0.9);
        let norm: f32 = d.iter().map(|v| v * v).sum::<f32>().sqrt();
        assert!((norm - 1.0).abs() < 1e-6);
    }

    #[test]
    fn shift_by_one_patch_shifts_grid() {
        let b = GradientHistogramBackend::default();
        let img = random_image(84, 70, 9);
        let shifted = RgbImage::from_fn(84, 70, |x, y| {
            if x >= 14 {
                img.get(x - 14, y)
            } else {
                [0.0; 3]
            }
        });
        let a = extract_grid(&b, &img).unwrap();
        let s = extract_grid(&b, &shifted).unwrap();
        for r in 0..a.grid_h() {
            for c in 0..a.grid_w() - 1 {
                for (x, y) in a.descriptor(r, c).iter().zip(s.descriptor(r, c + 1)) {
                    assert!((x - y).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn fpft_round_trip_is_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let data: Vec<f32> = (0..30 * 30 * 1024)
            .map(|_| rng.random_range(-5.0..5.0))
            .collect();
        let g = FeatureGrid::new(30, 30, 1024, 14, data).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.fpft");
        write_feature_file(&g, &p).unwrap();
        let back = read_feature_file(&p).unwrap();
        assert_eq!(back, g);
        assert!(back
            .data()
            .iter()
            .zip(g.data())
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn fpft_header_layout() {
        let g = FeatureGrid::new(1, 2, 1, 14, vec![1.0, -2.0]).unwrap();
        let b = g.to_bytes();
        assert_eq!(&b[..4], b"FPFT");
        assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(b[8..12].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(b[12..16].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(b[20..24].try_into().unwrap()), 14);
        assert_eq!(b.len(), 32 + 8);
        assert_eq!(f32::from_le_bytes(b[36..40].try_into().unwrap()), -2.0);
    }

    #[test]
    fn fpft_error_cases() {
        let g = FeatureGrid::new(2, 2, 3, 14, vec![0.5; 12]).unwrap();
        let mut b = g.to_bytes();
        assert_eq!(
            FeatureGrid::from_bytes(&b[..b.len() - 5]),
            Err(FeatureFileError::TruncatedFile)
        );
        assert_eq!(
            FeatureGrid::from_bytes(&b[..10]),
            Err(FeatureFileError::TruncatedFile)
        );
        let mut bad = b.clone();
        bad[0] = b'X';
        assert_eq!(
            FeatureGrid::from_bytes(&bad),
            Err(FeatureFileError::BadMagic)
        );
        let mut bad = b.clone();
        bad[4] = 2;
        assert_eq!(
            FeatureGrid::from_bytes(&bad),
            Err(FeatureFileError::UnsupportedVersion(2))
        );
        let mut bad = b.clone();
        bad[24] = 1;
        assert_eq!(
            FeatureGrid::from_bytes(&bad),
            Err(FeatureFileError::DtypeUnsupported(1))
        );
        b.extend_from_slice(&[1, 2]);
        assert_eq!(
            FeatureGrid::from_bytes(&b),
            Err(FeatureFileError::TrailingBytes(2))
        );

        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.fpft");
        std::fs::write(&p, b"NOPE0000").unwrap();
        assert!(matches!(
            read_feature_file(&p),
            Err(Error::FeatureFile {
                source: FeatureFileError::BadMagic,
                ..
            })
        ));
    }

    #[test]
    fn fpft_global_block() {
        let g = FeatureGrid::new(1, 1, 2, 14, vec![1.0, 2.0])
            .unwrap()
            .with_global(vec![3.0, 4.0, 5.0])
            .unwrap();
        let b = g.to_bytes();
        assert_eq!(b.len(), 32 + 8 + 4 + 12);
        let back = FeatureGrid::from_bytes(&b).unwrap();
        assert_eq!(back.global(), Some(&[3.0f32, 4.0, 5.0][..]));
        assert_eq!(
            FeatureGrid::from_bytes(&b[..b.len() - 4]),
            Err(FeatureFileError::TruncatedFile)
        );
    }

    proptest! {
        #[test]
        fn descriptor_is_unit_or_zero(vals in proptest::collection::vec(0.0f32..1.0, 14 * 14)) {
            let d = gradient_descriptor(&vals, 14);
            let norm: f32 = d.iter().map(|v| v * v).sum::<f32>().sqrt();
            prop_assert!(norm == 0.0 || (norm - 1.0).abs() < 1e-6);
            prop_assert!(d.iter().all(|&v| v >= 0.0));
        }

        #[test]
        fn fpft_round_trip(h in 1usize..5, w in 1usize..5, dim in 1usize..9, seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let data: Vec<f32> = (0..h * w * dim).map(|_| rng.random_range(-1e3..1e3)).collect();
            let g = FeatureGrid::new(h, w, dim, 7, data).unwrap();
            prop_assert_eq!(FeatureGrid::from_bytes(&g.to_bytes()).unwrap(), g);
        }
    }
}
