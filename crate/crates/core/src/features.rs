//! Global feature map plus per-box ROI pooling.
//!
//! The feature map is computed once per image by fixed filters (intensity,
//! central-difference gradients and optional box blurs). Per-box features are
//! obtained by max-pooling the map inside the box over a fixed bin grid, so
//! the per-box part never touches the raw image again.
//!
//! Two pooling routes produce identical values: [`roi_pool`] scans the
//! covered cells directly, and [`PoolingIndex`] answers each bin with a
//! constant number of lookups into a 2-D sparse table built once per image.

use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

use crate::boxgeom::{clip_to_image, BBox};
use crate::error::{Error, Result};

/// Single-channel image, row-major, values nominally in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidConfig("image must be non-empty".into()));
        }
        if data.len() != width * height {
            return Err(Error::DimensionMismatch { expected: width * height, actual: data.len() });
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Result<Self> {
        Self::new(width, height, vec![value; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    /// Nearest-neighbour upsampling by an integer factor.
    pub fn upsample(&self, factor: usize) -> GrayImage {
        let (w, h) = (self.width * factor, self.height * factor);
        let mut data = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                data.push(self.get(x / factor, y / factor));
            }
        }
        GrayImage { width: w, height: h, data }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractorConfig {
    /// Radii of extra box-blurred intensity channels appended after the
    /// gradient channels.
    pub blur_radii: Vec<usize>,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        Self { blur_radii: Vec::new() }
    }
}

impl ExtractorConfig {
    pub fn channels(&self) -> usize {
        3 + self.blur_radii.len()
    }
}

/// Dense channel-major feature grid.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    channels: usize,
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(channels: usize, width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        let expected = channels * width * height;
        if data.len() != expected {
            return Err(Error::DimensionMismatch { expected, actual: data.len() });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig("feature map contains non-finite values".into()));
        }
        Ok(Self { channels, width, height, data })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.width * self.height;
        &self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn get(&self, c: usize, x: usize, y: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }
}

/// The fixed "global" network. Counts how often it runs so callers can check
/// that detection computes image features exactly once.
#[derive(Debug, Default)]
pub struct Backbone {
    config: ExtractorConfig,
    invocations: AtomicUsize,
}

impl Backbone {
    pub fn new(config: ExtractorConfig) -> Self {
        Self { config, invocations: AtomicUsize::new(0) }
    }

    pub fn config(&self) -> &ExtractorConfig {
        &self.config
    }

    pub fn invocations(&self) -> usize {
        self.invocations.load(Ordering::Relaxed)
    }

    pub fn compute_global_features(&self, image: &GrayImage) -> FeatureMap {
        self.invocations.fetch_add(1, Ordering::Relaxed);
        compute_global_features(image, &self.config)
    }
}

/// Channel 0: intensity. Channels 1, 2: horizontal and vertical central
/// differences (one-sided at the border). Then one box blur per radius.
pub fn compute_global_features(image: &GrayImage, config: &ExtractorConfig) -> FeatureMap {
    let (w, h) = (image.width, image.height);
    let n = w * h;
    let channels = config.channels();
    let mut data = Vec::with_capacity(channels * n);
    data.extend_from_slice(&image.data);

    for y in 0..h {
        for x in 0..w {
            let (l, r) = (x.saturating_sub(1), (x + 1).min(w - 1));
            let span = (r - l) as f64;
            data.push(if span > 0.0 { (image.get(r, y) - image.get(l, y)) / span } else { 0.0 });
        }
    }
    for y in 0..h {
        let (u, d) = (y.saturating_sub(1), (y + 1).min(h - 1));
        let span = (d - u) as f64;
        for x in 0..w {
            data.push(if span > 0.0 { (image.get(x, d) - image.get(x, u)) / span } else { 0.0 });
        }
    }
    for &radius in &config.blur_radii {
        data.extend(box_blur(image, radius));
    }
    FeatureMap { channels, width: w, height: h, data }
}

/// Mean over the `(2r+1)^2` window, truncated at the border.
fn box_blur(image: &GrayImage, radius: usize) -> Vec<f64> {
    let (w, h) = (image.width, image.height);
    // summed-area table with a zero row/column in front
    let mut sat = vec![0.0; (w + 1) * (h + 1)];
    for y in 0..h {
        let mut row = 0.0;
        for x in 0..w {
            row += image.get(x, y);
            sat[(y + 1) * (w + 1) + x + 1] = sat[y * (w + 1) + x + 1] + row;
        }
    }
    let mut out = Vec::with_capacity(w * h);
    for y in 0..h {
        let (y0, y1) = (y.saturating_sub(radius), (y + radius + 1).min(h));
        for x in 0..w {
            let (x0, x1) = (x.saturating_sub(radius), (x + radius + 1).min(w));
            let s = sat[y1 * (w + 1) + x1] - sat[y0 * (w + 1) + x1] - sat[y1 * (w + 1) + x0]
                + sat[y0 * (w + 1) + x0];
            out.push(s / ((x1 - x0) * (y1 - y0)) as f64);
        }
    }
    out
}

/// Pooled per-box feature, laid out channel-major then bin row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct RoiFeature {
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolMode {
    Max,
    Average,
}

/// Shape of the regressor/classifier input built from a feature map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureConfig {
    pub extractor: ExtractorConfig,
    pub pool_h: usize,
    pub pool_w: usize,
    pub pool_mode: PoolMode,
    /// Append `(cx/W, cy/H, w/W, h/H)` to the pooled vector.
    pub include_geometry: bool,
    /// For each factor, also pool the box scaled by it about its center and
    /// clipped to the image.
    pub context_scales: Vec<f64>,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            extractor: ExtractorConfig::default(),
            pool_h: 6,
            pool_w: 6,
            pool_mode: PoolMode::Max,
            include_geometry: true,
            context_scales: Vec::new(),
        }
    }
}

impl FeatureConfig {
    pub fn pooled_len(&self) -> usize {
        self.extractor.channels() * self.pool_h * self.pool_w * (1 + self.context_scales.len())
    }

    pub fn input_dim(&self) -> usize {
        self.pooled_len() + if self.include_geometry { 4 } else { 0 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.pool_h == 0 || self.pool_w == 0 {
            return Err(Error::InvalidConfig("pool dimensions must be >= 1".into()));
        }
        if self.context_scales.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::InvalidConfig("context scales must be finite and > 0".into()));
        }
        Ok(())
    }

    /// Pooled features of `bbox` (direct route) plus optional geometry.
    pub fn box_input(&self, fm: &FeatureMap, bbox: &BBox) -> Result<Vec<f64>> {
        self.assemble_input(bbox, fm.width(), fm.height(), |b| {
            Ok(pool_with_mode(fm, b, self.pool_h, self.pool_w, self.pool_mode)?.values)
        })
    }

    /// Concatenate the pooled box, its context regions and the geometry,
    /// with `pool` producing the pooled values of one region.
    pub(crate) fn assemble_input(
        &self,
        bbox: &BBox,
        width: usize,
        height: usize,
        mut pool: impl FnMut(&BBox) -> Result<Vec<f64>>,
    ) -> Result<Vec<f64>> {
        let (w, h) = (width as f64, height as f64);
        let mut values = pool(bbox)?;
        for &s in &self.context_scales {
            let ctx = BBox::new(bbox.cx(), bbox.cy(), bbox.w() * s, bbox.h() * s)?;
            values.extend(pool(&clip_to_image(&ctx, w, h, 1.0))?);
        }
        if self.include_geometry {
            values.extend_from_slice(&[bbox.cx() / w, bbox.cy() / h, bbox.w() / w, bbox.h() / h]);
        }
        Ok(values)
    }
}

/// Integer cell window covered by a box, clipped to the map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct CellWindow {
    x0: usize,
    y0: usize,
    w: usize,
    h: usize,
}

fn cell_window(fm_w: usize, fm_h: usize, bbox: &BBox) -> Result<CellWindow> {
    let (x1, y1, x2, y2) = bbox.corners();
    let (wf, hf) = (fm_w as f64, fm_h as f64);
    let (cx1, cx2) = (x1.max(0.0), x2.min(wf));
    let (cy1, cy2) = (y1.max(0.0), y2.min(hf));
    if cx2 <= cx1 || cy2 <= cy1 {
        return Err(Error::BoxOutsideImage { width: fm_w, height: fm_h });
    }
    let x0 = cx1.floor() as usize;
    let y0 = cy1.floor() as usize;
    let xe = (cx2.ceil() as usize).min(fm_w);
    let ye = (cy2.ceil() as usize).min(fm_h);
    Ok(CellWindow { x0, y0, w: xe - x0, h: ye - y0 })
}

/// Bin `i` of `n` over `len` cells spans `[floor(i*len/n), ceil((i+1)*len/n))`.
#[inline]
fn bin_bounds(i: usize, n: usize, len: usize) -> (usize, usize) {
    let start = (i * len) / n;
    let end = ((i + 1) * len).div_ceil(n);
    (start, end.min(len))
}

/// Max-pool the box into a `pool_h x pool_w` grid per channel.
pub fn roi_pool(fm: &FeatureMap, bbox: &BBox, pool_h: usize, pool_w: usize) -> Result<RoiFeature> {
    pool_with_mode(fm, bbox, pool_h, pool_w, PoolMode::Max)
}

pub fn pool_with_mode(
    fm: &FeatureMap,
    bbox: &BBox,
    pool_h: usize,
    pool_w: usize,
    mode: PoolMode,
) -> Result<RoiFeature> {
    if pool_h == 0 || pool_w == 0 {
        return Err(Error::InvalidConfig("pool dimensions must be >= 1".into()));
    }
    let win = cell_window(fm.width, fm.height, bbox)?;
    let mut values = Vec::with_capacity(fm.channels * pool_h * pool_w);
    for c in 0..fm.channels {
        let chan = fm.channel(c);
        for by in 0..pool_h {
            let (ys, ye) = bin_bounds(by, pool_h, win.h);
            for bx in 0..pool_w {
                let (xs, xe) = bin_bounds(bx, pool_w, win.w);
                if ys >= ye || xs >= xe {
                    values.push(0.0);
                    continue;
                }
                let mut acc = match mode {
                    PoolMode::Max => f64::NEG_INFINITY,
                    PoolMode::Average => 0.0,
                };
                for y in (win.y0 + ys)..(win.y0 + ye) {
                    let row = &chan[y * fm.width + win.x0 + xs..y * fm.width + win.x0 + xe];
                    match mode {
                        PoolMode::Max => acc = row.iter().fold(acc, |m, &v| m.max(v)),
                        PoolMode::Average => acc += row.iter().sum::<f64>(),
                    }
                }
                if mode == PoolMode::Average {
                    acc /= ((ye - ys) * (xe - xs)) as f64;
                }
                values.push(acc);
            }
        }
    }
    Ok(RoiFeature { values })
}

/// Range-maximum index over a feature map (2-D sparse table).
///
/// Built once per image; afterwards every pooling bin costs four lookups per
/// channel regardless of the bin's pixel area.
#[derive(Debug, Clone)]
pub struct PoolingIndex {
    channels: usize,
    width: usize,
    height: usize,
    levels_x: usize,
    levels_y: usize,
    /// `table[((ky * levels_x + kx) * channels + c) * width * height + y * width + x]`
    /// holds the max over `[x, x + 2^kx) x [y, y + 2^ky)` (clipped).
    table: Vec<f64>,
}

fn floor_log2(n: usize) -> usize {
    (usize::BITS - 1 - n.leading_zeros()) as usize
}

impl PoolingIndex {
    pub fn build(fm: &FeatureMap) -> Self {
        let (w, h, ch) = (fm.width, fm.height, fm.channels);
        let levels_x = floor_log2(w) + 1;
        let levels_y = floor_log2(h) + 1;
        let plane = w * h;
        let mut table = vec![0.0; levels_x * levels_y * ch * plane];
        let off = |ky: usize, kx: usize, c: usize| ((ky * levels_x + kx) * ch + c) * plane;

        for c in 0..ch {
            let base = off(0, 0, c);
            table[base..base + plane].copy_from_slice(fm.channel(c));
        }
        for ky in 0..levels_y {
            for kx in 0..levels_x {
                if ky == 0 && kx == 0 {
                    continue;
                }
                // extend along x from (ky, kx-1), or along y from (ky-1, 0)
                let (src_ky, src_kx, along_x) = if kx > 0 { (ky, kx - 1, true) } else { (ky - 1, 0, false) };
                let half = 1usize << if along_x { kx - 1 } else { ky - 1 };
                for c in 0..ch {
                    let src = off(src_ky, src_kx, c);
                    let dst = off(ky, kx, c);
                    for y in 0..h {
                        for x in 0..w {
                            let a = table[src + y * w + x];
                            let b = if along_x {
                                if x + half < w { table[src + y * w + x + half] } else { a }
                            } else if y + half < h {
                                table[src + (y + half) * w + x]
                            } else {
                                a
                            };
                            table[dst + y * w + x] = a.max(b);
                        }
                    }
                }
            }
        }
        Self { channels: ch, width: w, height: h, levels_x, levels_y, table }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    fn query(&self, c: usize, x0: usize, x1: usize, y0: usize, y1: usize) -> f64 {
        let kx = floor_log2(x1 - x0);
        let ky = floor_log2(y1 - y0);
        let base = ((ky * self.levels_x + kx) * self.channels + c) * self.width * self.height;
        let xb = x1 - (1 << kx);
        let yb = y1 - (1 << ky);
        let t = &self.table;
        let w = self.width;
        t[base + y0 * w + x0]
            .max(t[base + y0 * w + xb])
            .max(t[base + yb * w + x0])
            .max(t[base + yb * w + xb])
    }

    /// Same values as [`roi_pool`], answered from the index.
    pub fn roi_pool(&self, bbox: &BBox, pool_h: usize, pool_w: usize) -> Result<RoiFeature> {
        if pool_h == 0 || pool_w == 0 {
            return Err(Error::InvalidConfig("pool dimensions must be >= 1".into()));
        }
        debug_assert!(self.levels_y >= 1);
        let win = cell_window(self.width, self.height, bbox)?;
        let mut values = Vec::with_capacity(self.channels * pool_h * pool_w);
        for c in 0..self.channels {
            for by in 0..pool_h {
                let (ys, ye) = bin_bounds(by, pool_h, win.h);
                for bx in 0..pool_w {
                    let (xs, xe) = bin_bounds(bx, pool_w, win.w);
                    if ys >= ye || xs >= xe {
                        values.push(0.0);
                    } else {
                        values.push(self.query(c, win.x0 + xs, win.x0 + xe, win.y0 + ys, win.y0 + ye));
                    }
                }
            }
        }
        Ok(RoiFeature { values })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ramp_4x4() -> FeatureMap {
        FeatureMap::new(1, 4, 4, (1..=16).map(f64::from).collect()).unwrap()
    }

    fn random_map(rng: &mut ChaCha8Rng, ch: usize, w: usize, h: usize) -> FeatureMap {
        FeatureMap::new(ch, w, h, (0..ch * w * h).map(|_| rng.random::<f64>()).collect()).unwrap()
    }

    #[test]
    fn constant_image_has_zero_gradients() {
        let img = GrayImage::filled(7, 5, 0.0).unwrap();
        let fm = compute_global_features(&img, &ExtractorConfig::default());
        assert_eq!(fm.channels(), 3);
        assert!(fm.channel(1).iter().chain(fm.channel(2)).all(|&v| v == 0.0));
    }

    #[test]
    fn unit_ramp_has_unit_horizontal_gradient() {
        let img = GrayImage::new(9, 1, (0..9).map(f64::from).collect()).unwrap();
        let fm = compute_global_features(&img, &ExtractorConfig::default());
        for x in 1..8 {
            assert_eq!(fm.get(1, x, 0), 1.0);
            assert_eq!(fm.get(2, x, 0), 0.0);
        }
    }

    #[test]
    fn blur_of_constant_is_constant() {
        let img = GrayImage::filled(6, 6, 0.25).unwrap();
        let cfg = ExtractorConfig { blur_radii: vec![1, 4] };
        let fm = compute_global_features(&img, &cfg);
        assert_eq!(fm.channels(), 5);
        for c in 3..5 {
            assert!(fm.channel(c).iter().all(|&v| (v - 0.25).abs() < 1e-15));
        }
    }

    #[test]
    fn feature_map_rejects_bad_length() {
        assert!(FeatureMap::new(2, 3, 3, vec![0.0; 17]).is_err());
    }

    #[test]
    fn pool_single_cell() {
        let fm = ramp_4x4();
        let b = BBox::from_corners(1.0, 2.0, 2.0, 3.0).unwrap();
        assert_eq!(roi_pool(&fm, &b, 1, 1).unwrap().values, vec![10.0]);
    }

    #[test]
    fn pool_uniform_map() {
        let fm = FeatureMap::new(2, 10, 8, vec![0.7; 160]).unwrap();
        let b = BBox::from_corners(1.3, 0.2, 9.1, 7.7).unwrap();
        let f = roi_pool(&fm, &b, 6, 6).unwrap();
        assert_eq!(f.values.len(), 72);
        assert!(f.values.iter().all(|&v| v == 0.7));
    }

    #[test]
    fn pool_full_4x4_two_by_two() {
        let fm = ramp_4x4();
        let b = BBox::from_corners(0.0, 0.0, 4.0, 4.0).unwrap();
        assert_eq!(roi_pool(&fm, &b, 2, 2).unwrap().values, vec![6.0, 8.0, 14.0, 16.0]);
    }

    #[test]
    fn pool_outside_is_an_error() {
        let fm = ramp_4x4();
        let b = BBox::from_corners(5.0, 5.0, 6.0, 6.0).unwrap();
        assert!(matches!(roi_pool(&fm, &b, 2, 2), Err(Error::BoxOutsideImage { .. })));
        let touching = BBox::from_corners(4.0, 0.0, 6.0, 2.0).unwrap();
        assert!(roi_pool(&fm, &touching, 2, 2).is_err());
        assert!(roi_pool(&fm, &BBox::from_corners(0.0, 0.0, 1.0, 1.0).unwrap(), 0, 2).is_err());
    }

    #[test]
    fn pooled_length_independent_of_box_size() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let fm = random_map(&mut rng, 3, 40, 30);
        for _ in 0..50 {
            let x1 = rng.random_range(-5.0..35.0);
            let y1 = rng.random_range(-5.0..25.0);
            let b = BBox::from_corners(x1, y1, x1 + rng.random_range(0.2..30.0), y1 + rng.random_range(0.2..30.0))
                .unwrap();
            if let Ok(f) = roi_pool(&fm, &b, 6, 6) {
                assert_eq!(f.values.len(), 3 * 36);
            }
        }
    }

    #[test]
    fn average_pool_of_ramp() {
        let fm = ramp_4x4();
        let b = BBox::from_corners(0.0, 0.0, 4.0, 4.0).unwrap();
        let f = pool_with_mode(&fm, &b, 2, 2, PoolMode::Average).unwrap();
        assert_eq!(f.values, vec![3.5, 5.5, 11.5, 13.5]);
    }

    #[test]
    fn index_matches_direct_pooling() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for &(w, h) in &[(1, 1), (5, 3), (17, 9), (32, 32), (45, 21)] {
            let fm = random_map(&mut rng, 2, w, h);
            let index = PoolingIndex::build(&fm);
            for _ in 0..200 {
                let x1 = rng.random_range(-3.0..w as f64);
                let y1 = rng.random_range(-3.0..h as f64);
                let b = BBox::from_corners(
                    x1,
                    y1,
                    x1 + rng.random_range(0.1..w as f64 + 3.0),
                    y1 + rng.random_range(0.1..h as f64 + 3.0),
                )
                .unwrap();
                let (ph, pw) = (rng.random_range(1..8), rng.random_range(1..8));
                match (roi_pool(&fm, &b, ph, pw), index.roi_pool(&b, ph, pw)) {
                    (Ok(a), Ok(b)) => assert_eq!(a, b),
                    (Err(_), Err(_)) => {}
                    other => panic!("routes disagree: {other:?}"),
                }
            }
        }
    }

    #[test]
    fn backbone_counts_invocations() {
        let backbone = Backbone::new(ExtractorConfig::default());
        let img = GrayImage::filled(4, 4, 0.5).unwrap();
        backbone.compute_global_features(&img);
        backbone.compute_global_features(&img);
        assert_eq!(backbone.invocations(), 2);
    }

    #[test]
    fn nested_boxes_pool_monotonically() {
        // 3x3 bins: half-box bin i covers [4i, 4i+4), which lies inside
        // full-box bin i/2 = [8(i/2), 8(i/2)+8)
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let fm = random_map(&mut rng, 2, 24, 24);
            let full = roi_pool(&fm, &BBox::from_corners(0.0, 0.0, 24.0, 24.0).unwrap(), 3, 3).unwrap();
            let half = roi_pool(&fm, &BBox::from_corners(0.0, 0.0, 12.0, 12.0).unwrap(), 3, 3).unwrap();
            for c in 0..2 {
                for i in 0..3 {
                    for j in 0..3 {
                        let h = half.values[c * 9 + i * 3 + j];
                        let f = full.values[c * 9 + (i / 2) * 3 + j / 2];
                        assert!(f >= h);
                    }
                }
            }
        }
    }
}
