//! Multi-scale patch planning and descriptor extraction.
//!
//! An image is resized so its longest side is 200 px, covered by square grids
//! whose patch size doubles per level, and every patch is turned into a
//! descriptor by a [`DescriptorExtractor`].

use std::fmt;
use std::path::Path;

use log::warn;
use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::data::{FeatureBag, NormMode, StandardizationStats};
use crate::error::{invalid_input, invalid_param, Error, Result};

/// Longest side after the initial resize.
pub const RESIZE_TARGET: usize = 200;

/// A dense image with interleaved channels and values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return invalid_input(format!("image has a zero dimension ({width}×{height})"));
        }
        if channels != 1 && channels != 3 {
            return invalid_input(format!("unsupported channel count {channels}"));
        }
        if data.len() != width * height * channels {
            return invalid_input(format!(
                "image buffer has {} values, expected {}",
                data.len(),
                width * height * channels
            ));
        }
        Ok(Self { width, height, channels, data })
    }

    pub fn gray_from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> f64) -> Result<Self> {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self::new(width, height, 1, data)
    }

    /// Decodes PNG, PGM or PPM.
    pub fn open(path: &Path) -> Result<Self> {
        let decoded = image::open(path).map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
        if decoded.color().has_color() {
            let rgb = decoded.into_rgb32f();
            let (w, h) = rgb.dimensions();
            Self::new(w as usize, h as usize, 3, rgb.into_raw().into_iter().map(f64::from).collect())
        } else {
            let gray = decoded.to_luma32f();
            let (w, h) = gray.dimensions();
            Self::new(w as usize, h as usize, 1, gray.into_raw().into_iter().map(f64::from).collect())
        }
    }

    /// Writes an 8-bit grayscale or RGB file; the format follows the extension.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        let color = if self.channels == 1 {
            image::ExtendedColorType::L8
        } else {
            image::ExtendedColorType::Rgb8
        };
        image::save_buffer(path, &bytes, self.width as u32, self.height as u32, color)
            .map_err(|e| Error::Image(format!("{}: {e}", path.display())))
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn get(&self, x: usize, y: usize, channel: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + channel]
    }

    /// Luma with Rec. 601 weights; grayscale images are returned as is.
    pub fn to_gray(&self) -> Image {
        if self.channels == 1 {
            return self.clone();
        }
        let data = self
            .data
            .chunks_exact(3)
            .map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
            .collect();
        Image { width: self.width, height: self.height, channels: 1, data }
    }

    pub fn crop(&self, x0: usize, y0: usize, width: usize, height: usize) -> Result<Image> {
        if width == 0 || height == 0 || x0 + width > self.width || y0 + height > self.height {
            return invalid_input(format!(
                "crop {width}×{height}+{x0}+{y0} outside {}×{} image",
                self.width, self.height
            ));
        }
        let mut data = Vec::with_capacity(width * height * self.channels);
        for y in y0..y0 + height {
            let start = (y * self.width + x0) * self.channels;
            data.extend_from_slice(&self.data[start..start + width * self.channels]);
        }
        Ok(Image { width, height, channels: self.channels, data })
    }

    /// Bilinear resampling with pixel-center alignment and edge clamping.
    pub fn resize_bilinear(&self, width: usize, height: usize) -> Result<Image> {
        if width == 0 || height == 0 {
            return invalid_input(format!("cannot resize to {width}×{height}"));
        }
        let taps = |out: usize, src: usize| -> Vec<(usize, usize, f64)> {
            let scale = src as f64 / out as f64;
            (0..out)
                .map(|u| {
                    let s = ((u as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
                    let i0 = s.floor() as usize;
                    let i1 = (i0 + 1).min(src - 1);
                    (i0, i1, s - i0 as f64)
                })
                .collect()
        };
        let xs = taps(width, self.width);
        let ys = taps(height, self.height);
        let ch = self.channels;
        let mut data = Vec::with_capacity(width * height * ch);
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                for c in 0..ch {
                    let top = self.get(x0, y0, c) * (1.0 - fx) + self.get(x1, y0, c) * fx;
                    let bottom = self.get(x0, y1, c) * (1.0 - fx) + self.get(x1, y1, c) * fx;
                    data.push(top * (1.0 - fy) + bottom * fy);
                }
            }
        }
        Ok(Image { width, height, channels: ch, data })
    }

    pub fn pixels(&self) -> &[f64] {
        &self.data
    }
}

/// Aspect-preserving bilinear resize making the longest side equal `target`.
pub fn resize_longest_side(image: &Image, target: usize) -> Result<Image> {
    if target == 0 {
        return invalid_param("resize target must be positive");
    }
    let longest = image.width.max(image.height);
    if longest == target {
        return Ok(image.clone());
    }
    let scale = target as f64 / longest as f64;
    let (w, h) = if image.width >= image.height {
        (target, ((image.height as f64 * scale).round() as usize).max(1))
    } else {
        (((image.width as f64 * scale).round() as usize).max(1), target)
    };
    image.resize_bilinear(w, h)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PatchPlanConfig {
    /// Side of the level-1 patches, in pixels.
    pub min_patch: usize,
    pub levels: usize,
    /// Approximate number of grid patches per image (level 0 not counted).
    pub target_patches: usize,
    pub include_level0: bool,
    /// Scale of the appended `(cx, cy)` columns; 0 disables concatenation.
    pub position_weight: f64,
    pub norm: NormMode,
}

impl Default for PatchPlanConfig {
    fn default() -> Self {
        Self {
            min_patch: 32,
            levels: 3,
            target_patches: 100,
            include_level0: true,
            position_weight: 1.0,
            norm: NormMode::Cap,
        }
    }
}

impl PatchPlanConfig {
    /// Patch side at level `level ≥ 1`.
    pub fn size_at(&self, level: usize) -> usize {
        self.min_patch << (level - 1)
    }
}

/// One rectangle to describe. Grid patches are square; the level-0 patch is
/// the whole image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PatchSpec {
    pub level: usize,
    pub x0: usize,
    pub y0: usize,
    pub width: usize,
    pub height: usize,
    /// Patch center normalized by the image size.
    pub cx: f64,
    pub cy: f64,
}

impl fmt::Display for PatchSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "level {} patch {}×{} at ({}, {})",
            self.level, self.width, self.height, self.x0, self.y0
        )
    }
}

/// Grid positions along one axis of length `len` for patches of side `size`.
fn axis_positions(len: usize, size: usize, stride: usize) -> Vec<usize> {
    let span = len - size;
    let n = span.div_ceil(stride) + 1;
    (0..n).map(|i| (i * stride).min(span)).collect()
}

fn axis_count(len: usize, size: usize, stride: usize) -> usize {
    (len - size).div_ceil(stride) + 1
}

/// Lays one regular grid per level.
///
/// The grid budget is shared equally among the levels still to be planned, so
/// rounding slack of one level is passed on to the next. Each level uses the
/// smallest integer stride whose grid fits the budget; the last row and column
/// are clamped inside the image.
pub fn plan_patches(width: usize, height: usize, config: &PatchPlanConfig) -> Result<Vec<PatchSpec>> {
    if config.min_patch == 0 || config.levels == 0 {
        return invalid_param("min_patch and levels must be positive");
    }
    if width < config.min_patch || height < config.min_patch {
        return invalid_input(format!(
            "{width}×{height} image is smaller than the {} px minimum patch",
            config.min_patch
        ));
    }
    let mut active = Vec::new();
    for level in 1..=config.levels {
        let size = config.size_at(level);
        if size > width || size > height {
            warn!("dropping level {level}: {size} px patches do not fit a {width}×{height} image");
        } else {
            active.push(level);
        }
    }

    let mut specs = Vec::new();
    if config.include_level0 {
        specs.push(PatchSpec { level: 0, x0: 0, y0: 0, width, height, cx: 0.5, cy: 0.5 });
    }
    let mut used = 0usize;
    for (i, &level) in active.iter().enumerate() {
        let size = config.size_at(level);
        let budget = config.target_patches.saturating_sub(used) as f64 / (active.len() - i) as f64;
        let max_stride = (width - size).max(height - size).max(1);
        let stride = (1..=max_stride)
            .find(|&s| (axis_count(width, size, s) * axis_count(height, size, s)) as f64 <= budget);
        let (xs, ys) = match stride {
            Some(s) => (axis_positions(width, size, s), axis_positions(height, size, s)),
            // not even a 2×2 grid fits the budget: one centered patch
            None => (vec![(width - size) / 2], vec![(height - size) / 2]),
        };
        for &y0 in &ys {
            for &x0 in &xs {
                specs.push(PatchSpec {
                    level,
                    x0,
                    y0,
                    width: size,
                    height: size,
                    cx: (x0 as f64 + size as f64 / 2.0) / width as f64,
                    cy: (y0 as f64 + size as f64 / 2.0) / height as f64,
                });
            }
        }
        used += xs.len() * ys.len();
    }
    Ok(specs)
}

/// Turns patch pixels into a fixed-length descriptor.
pub trait DescriptorExtractor: Send + Sync {
    fn name(&self) -> &str;

    /// Output dimension `d_f`.
    fn dim(&self) -> usize;

    fn deterministic(&self) -> bool {
        true
    }

    fn extract(&self, patch: &Image) -> Result<Array1<f64>>;
}

/// Grayscale, bilinear 8×8, row-major, shifted to zero mean.
#[derive(Debug, Clone, Copy, Default)]
pub struct DownsampleExtractor;

impl DownsampleExtractor {
    pub const SIDE: usize = 8;
}

impl DescriptorExtractor for DownsampleExtractor {
    fn name(&self) -> &str {
        "downsample"
    }

    fn dim(&self) -> usize {
        Self::SIDE * Self::SIDE
    }

    fn extract(&self, patch: &Image) -> Result<Array1<f64>> {
        let small = patch.to_gray().resize_bilinear(Self::SIDE, Self::SIDE)?;
        let mut v = Array1::from(small.data);
        let mean = v.mean().unwrap_or(0.0);
        v -= mean;
        Ok(v)
    }
}

/// Grayscale 16×16 thumbnail projected by a seeded Gaussian matrix with
/// entries `N(0, 1/256)`.
#[derive(Debug, Clone)]
pub struct RandProjExtractor {
    /// `256 × d_f`.
    projection: Array2<f64>,
    seed: u64,
}

impl RandProjExtractor {
    pub const SIDE: usize = 16;

    pub fn new(dim: usize, seed: u64) -> Result<Self> {
        if dim == 0 {
            return invalid_param("projection dimension must be at least 1");
        }
        let inputs = Self::SIDE * Self::SIDE;
        let normal = Normal::new(0.0, 1.0 / (inputs as f64).sqrt()).expect("valid sd");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let projection = Array2::from_shape_simple_fn((inputs, dim), || normal.sample(&mut rng));
        Ok(Self { projection, seed })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }
}

impl DescriptorExtractor for RandProjExtractor {
    fn name(&self) -> &str {
        "randproj"
    }

    fn dim(&self) -> usize {
        self.projection.ncols()
    }

    fn extract(&self, patch: &Image) -> Result<Array1<f64>> {
        let small = patch.to_gray().resize_bilinear(Self::SIDE, Self::SIDE)?;
        Ok(Array1::from(small.data).dot(&self.projection))
    }
}

/// Resized image, its patch plan and one raw descriptor row per patch.
pub fn extract_raw(
    image: &Image,
    config: &PatchPlanConfig,
    extractor: &dyn DescriptorExtractor,
) -> Result<(Vec<PatchSpec>, Array2<f64>)> {
    let resized = resize_longest_side(image, RESIZE_TARGET)?;
    let specs = plan_patches(resized.width(), resized.height(), config)?;
    let mut raw = Array2::zeros((specs.len(), extractor.dim()));
    for (spec, mut row) in specs.iter().zip(raw.rows_mut()) {
        let wrap = |e: Error| Error::InvalidInput(format!("extractor '{}' failed on {spec}: {e}", extractor.name()));
        let patch = resized.crop(spec.x0, spec.y0, spec.width, spec.height).map_err(wrap)?;
        let v = extractor.extract(&patch).map_err(wrap)?;
        if v.len() != extractor.dim() {
            return invalid_input(format!(
                "extractor '{}' returned {} values on {spec}, declared {}",
                extractor.name(),
                v.len(),
                extractor.dim()
            ));
        }
        row.assign(&v);
    }
    Ok((specs, raw))
}

/// Standardizes (optionally), normalizes and appends weighted positions.
pub fn finish_bag(
    specs: &[PatchSpec],
    mut raw: Array2<f64>,
    stats: Option<&StandardizationStats>,
    config: &PatchPlanConfig,
) -> Result<FeatureBag> {
    if let Some(stats) = stats {
        for mut row in raw.rows_mut() {
            let z = stats.apply_row(row.view())?;
            row.assign(&z);
        }
    }
    config.norm.apply_rows(&mut raw)?;
    let positions = Array2::from_shape_fn((specs.len(), 2), |(i, j)| if j == 0 { specs[i].cx } else { specs[i].cy });
    let patches = if config.position_weight > 0.0 {
        let scaled = positions.mapv(|v| v * config.position_weight);
        ndarray::concatenate![ndarray::Axis(1), raw, scaled]
    } else {
        raw
    };
    FeatureBag::new(String::new(), None, patches, Some(positions))
}

/// Resize → plan → describe → standardize → normalize → append positions.
pub fn extract_bag(
    image: &Image,
    config: &PatchPlanConfig,
    extractor: &dyn DescriptorExtractor,
    stats: Option<&StandardizationStats>,
) -> Result<FeatureBag> {
    if let Some(stats) = stats {
        if stats.dim() != extractor.dim() {
            return invalid_input(format!(
                "standardization has dimension {}, extractor '{}' produces {}",
                stats.dim(),
                extractor.name(),
                extractor.dim()
            ));
        }
    }
    if config.position_weight < 0.0 || !config.position_weight.is_finite() {
        return invalid_param(format!("position weight must be >= 0, got {}", config.position_weight));
    }
    let (specs, raw) = extract_raw(image, config, extractor)?;
    finish_bag(&specs, raw, stats, config)
}

/// Descriptor dimension of bags produced with `config` and an extractor of
/// dimension `feature_dim`.
pub fn bag_dim(feature_dim: usize, config: &PatchPlanConfig) -> usize {
    if config.position_weight > 0.0 {
        feature_dim + 2
    } else {
        feature_dim
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn random_gray(w: usize, h: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..w * h).map(|_| rng.random_range(0.0..1.0)).collect();
        Image::new(w, h, 1, data).unwrap()
    }

    #[test]
    fn resize_examples() {
        let r = resize_longest_side(&random_gray(400, 300, 0), 200).unwrap();
        assert_eq!((r.width(), r.height()), (200, 150));
        let same = random_gray(200, 120, 1);
        assert_eq!(resize_longest_side(&same, 200).unwrap(), same);
        let r = resize_longest_side(&random_gray(300, 400, 2), 200).unwrap();
        assert_eq!((r.width(), r.height()), (150, 200));
    }

    #[test]
    fn zero_sized_images_are_rejected() {
        assert!(Image::new(0, 10, 1, vec![]).is_err());
        assert!(Image::new(2, 2, 1, vec![0.0; 3]).is_err());
    }

    #[test]
    fn bilinear_identity_and_constant() {
        let img = random_gray(13, 7, 3);
        assert_eq!(img.resize_bilinear(13, 7).unwrap(), img);
        let flat = Image::gray_from_fn(9, 5, |_, _| 0.25).unwrap();
        assert!(flat.resize_bilinear(4, 11).unwrap().pixels().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn plan_for_acceptance_geometry() {
        for target in [100, 400] {
            let cfg = PatchPlanConfig { target_patches: target, include_level0: false, ..Default::default() };
            let specs = plan_patches(200, 200, &cfg).unwrap();
            let n = specs.len() as f64;
            assert!((n - target as f64).abs() <= 0.25 * target as f64, "{n} vs {target}");
            let mut sizes: Vec<usize> = specs.iter().map(|s| s.width).collect();
            sizes.dedup();
            assert_eq!(sizes, vec![32, 64, 128]);
            for level in 1..=3 {
                let count = specs.iter().filter(|s| s.level == level).count() as f64;
                assert!((count - target as f64 / 3.0).abs() <= 0.25 * target as f64 / 3.0 + 1.0);
            }
        }
    }

    #[test]
    fn single_level_exact_tiling() {
        let cfg = PatchPlanConfig { min_patch: 16, levels: 1, target_patches: 16, include_level0: false, ..Default::default() };
        let specs = plan_patches(64, 64, &cfg).unwrap();
        assert_eq!(specs.len(), 16);
        let xs: Vec<usize> = specs.iter().take(4).map(|s| s.x0).collect();
        assert_eq!(xs, vec![0, 16, 32, 48]);
    }

    /// Independent enumeration of the grid rule: positions `i·s` while the
    /// patch fits, plus one clamped row/column when the image edge is not
    /// reached exactly.
    fn enumerate_axis(len: usize, size: usize, stride: usize) -> usize {
        let mut count = 0;
        let mut pos = 0;
        while pos + size <= len {
            count += 1;
            pos += stride;
        }
        if (count - 1) * stride + size < len {
            count += 1;
        }
        count
    }

    #[test]
    fn plan_non_square_matches_enumeration() {
        let cfg = PatchPlanConfig { include_level0: false, ..Default::default() };
        let specs = plan_patches(200, 150, &cfg).unwrap();
        assert!((75..=125).contains(&specs.len()), "{}", specs.len());
        let mut used = 0usize;
        for level in 1..=3 {
            let size = 32 << (level - 1);
            let budget = (100 - used) as f64 / (4 - level) as f64;
            let mut stride = 1;
            while (enumerate_axis(200, size, stride) * enumerate_axis(150, size, stride)) as f64 > budget {
                stride += 1;
            }
            let expected = enumerate_axis(200, size, stride) * enumerate_axis(150, size, stride);
            let got = specs.iter().filter(|s| s.level == level).count();
            assert_eq!(got, expected, "level {level}");
            used += got;
        }
    }

    #[test]
    fn plan_invariants() {
        for (w, h) in [(200, 200), (200, 150), (123, 200), (64, 200), (200, 33)] {
            for target in [10, 100, 400] {
                let cfg = PatchPlanConfig { target_patches: target, ..Default::default() };
                let specs = plan_patches(w, h, &cfg).unwrap();
                assert_eq!(specs[0].level, 0);
                assert_eq!((specs[0].cx, specs[0].cy), (0.5, 0.5));
                for s in &specs {
                    assert!(s.x0 + s.width <= w && s.y0 + s.height <= h);
                    if s.level > 0 {
                        assert_eq!(s.width, 32 << (s.level - 1));
                        assert!(s.width <= w.min(h));
                    }
                    assert!((0.0..=1.0).contains(&s.cx) && (0.0..=1.0).contains(&s.cy));
                }
            }
        }
    }

    #[test]
    fn too_small_image_errors() {
        assert!(matches!(plan_patches(20, 200, &PatchPlanConfig::default()), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn downsample_constant_patch_is_zero() {
        let patch = Image::gray_from_fn(32, 32, |_, _| 0.4).unwrap();
        let v = DownsampleExtractor.extract(&patch).unwrap();
        assert_eq!(v.len(), 64);
        assert!(v.iter().all(|x| x.abs() < 1e-15));
    }

    #[test]
    fn downsample_half_black_half_white_is_antisymmetric() {
        let patch = Image::gray_from_fn(16, 16, |x, _| if x < 8 { 0.0 } else { 1.0 }).unwrap();
        let v = DownsampleExtractor.extract(&patch).unwrap();
        for r in 0..8 {
            for c in 0..8 {
                assert_eq!(v[r * 8 + c], -v[r * 8 + (7 - c)]);
            }
        }
        assert_eq!(v[0], -0.5);
    }

    /// Reference resampler: direct 2-D interpolation from a coordinate map.
    fn reference_downsample(patch: &Image) -> Vec<f64> {
        let (w, h) = (patch.width() as f64, patch.height() as f64);
        let mut out = Vec::new();
        for v in 0..8 {
            for u in 0..8 {
                let sx = ((u as f64 + 0.5) * w / 8.0 - 0.5).max(0.0).min(w - 1.0);
                let sy = ((v as f64 + 0.5) * h / 8.0 - 0.5).max(0.0).min(h - 1.0);
                let (x0, y0) = (sx.floor(), sy.floor());
                let (x1, y1) = ((x0 + 1.0).min(w - 1.0), (y0 + 1.0).min(h - 1.0));
                let (ax, ay) = (sx - x0, sy - y0);
                let p = |x: f64, y: f64| patch.get(x as usize, y as usize, 0);
                let val = p(x0, y0) * (1.0 - ax) * (1.0 - ay)
                    + p(x1, y0) * ax * (1.0 - ay)
                    + p(x0, y1) * (1.0 - ax) * ay
                    + p(x1, y1) * ax * ay;
                out.push(val);
            }
        }
        let mean = out.iter().sum::<f64>() / 64.0;
        out.iter().map(|v| v - mean).collect()
    }

    #[test]
    fn downsample_matches_reference_resampler() {
        for (i, (w, h)) in [(32, 32), (21, 45), (128, 128), (5, 3)].into_iter().enumerate() {
            let patch = random_gray(w, h, 10 + i as u64);
            let got = DownsampleExtractor.extract(&patch).unwrap();
            let want = reference_downsample(&patch);
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn randproj_properties() {
        let ex = RandProjExtractor::new(12, 4).unwrap();
        let zero = Image::gray_from_fn(20, 20, |_, _| 0.0).unwrap();
        assert!(ex.extract(&zero).unwrap().iter().all(|&v| v == 0.0));
        let patch = random_gray(20, 20, 5);
        let a = ex.extract(&patch).unwrap();
        assert_eq!(a, RandProjExtractor::new(12, 4).unwrap().extract(&patch).unwrap());
        let scaled = Image::new(20, 20, 1, patch.pixels().iter().map(|v| v * 0.3).collect()).unwrap();
        let b = ex.extract(&scaled).unwrap();
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x * 0.3 - y).abs() < 1e-6);
        }
        assert!(RandProjExtractor::new(0, 1).is_err());
    }

    #[test]
    fn extract_bag_positions_and_determinism() {
        let img = random_gray(300, 240, 6);
        let cfg = PatchPlanConfig { position_weight: 0.0, ..Default::default() };
        let bag = extract_bag(&img, &cfg, &DownsampleExtractor, None).unwrap();
        assert_eq!(bag.dim(), 64);
        let pos = bag.positions.as_ref().unwrap();
        assert_eq!(pos.nrows(), bag.len());
        assert_eq!((pos[[0, 0]], pos[[0, 1]]), (0.5, 0.5));
        assert_eq!(bag, extract_bag(&img, &cfg, &DownsampleExtractor, None).unwrap());

        let cfg = PatchPlanConfig { position_weight: 2.0, ..Default::default() };
        let bag = extract_bag(&img, &cfg, &DownsampleExtractor, None).unwrap();
        assert_eq!(bag.dim(), 66);
        for row in bag.patches.rows() {
            let feat = row.slice(ndarray::s![..64]);
            assert!(feat.dot(&feat) <= 1.0 + 1e-12);
            assert!((0.0..=2.0).contains(&row[64]) && (0.0..=2.0).contains(&row[65]));
        }
    }

    #[test]
    fn extract_bag_checks_stats_dimension() {
        let img = random_gray(200, 200, 7);
        let stats = StandardizationStats { mean: vec![0.0; 3], std: vec![1.0; 3] };
        assert!(extract_bag(&img, &PatchPlanConfig::default(), &DownsampleExtractor, Some(&stats)).is_err());
    }

    struct Failing;

    impl DescriptorExtractor for Failing {
        fn name(&self) -> &str {
            "failing"
        }
        fn dim(&self) -> usize {
            1
        }
        fn extract(&self, patch: &Image) -> Result<Array1<f64>> {
            if patch.width() == 64 {
                return invalid_input("boom");
            }
            Ok(Array1::zeros(1))
        }
    }

    #[test]
    fn extractor_failure_names_patch() {
        let img = random_gray(200, 200, 8);
        let err = extract_bag(&img, &PatchPlanConfig::default(), &Failing, None).unwrap_err().to_string();
        assert!(err.contains("level 2 patch 64×64"), "{err}");
    }

    #[test]
    fn png_and_pgm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let img = Image::gray_from_fn(10, 6, |x, y| ((x * 3 + y * 5) % 256) as f64 / 255.0).unwrap();
        for name in ["a.png", "a.pgm"] {
            let path = dir.path().join(name);
            img.save(&path).unwrap();
            let back = Image::open(&path).unwrap();
            assert_eq!(back.channels(), 1);
            for (a, b) in back.pixels().iter().zip(img.pixels()) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }
}
