//! Multi-scale spatial pyramid of overlapping boxes.
//!
//! At scale `k` the image is tiled with cells of size `(W/k, H/k)`. With
//! overlap `α` the horizontal and vertical strides are `cell * (1 - α)`.
//! Only boxes that lie completely inside the image are generated.

use serde::{Deserialize, Serialize};

use crate::boxgeom::BBox;
use crate::error::{Error, Result};

/// Absorbs round-off in `(dim - cell) / stride` when the quotient is an
/// exact integer in real arithmetic (e.g. `64 / 6.4`).
const COUNT_EPS: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub scales: Vec<u32>,
    pub overlaps: Vec<f64>,
}

impl GridSpec {
    pub fn new(scales: Vec<u32>, overlaps: Vec<f64>) -> Result<Self> {
        let spec = Self { scales, overlaps };
        spec.validate()?;
        Ok(spec)
    }

    /// Training pyramid: scales `[2, 5, 10]` with overlaps `[0.9, 0.8, 0.7]`.
    pub fn default_train() -> Self {
        Self { scales: vec![2, 5, 10], overlaps: vec![0.9, 0.8, 0.7] }
    }

    /// Test pyramid: scales `[2, 5, 10]` with overlaps `[0.7, 0.5, 0]`.
    pub fn default_test() -> Self {
        Self { scales: vec![2, 5, 10], overlaps: vec![0.7, 0.5, 0.0] }
    }

    pub fn validate(&self) -> Result<()> {
        if self.scales.is_empty() {
            return Err(Error::InvalidGridSpec("no scales".into()));
        }
        if self.scales.len() != self.overlaps.len() {
            return Err(Error::InvalidGridSpec(format!(
                "{} scales but {} overlaps",
                self.scales.len(),
                self.overlaps.len()
            )));
        }
        if let Some(&s) = self.scales.iter().find(|&&s| s == 0) {
            return Err(Error::InvalidGridSpec(format!("scale {s} must be positive")));
        }
        if let Some(&a) = self.overlaps.iter().find(|a| !(0.0..1.0).contains(*a)) {
            return Err(Error::InvalidGridSpec(format!("overlap {a} outside [0, 1)")));
        }
        Ok(())
    }
}

/// Per-axis number of cells for one scale: `floor((dim - cell) / stride) + 1`,
/// or 0 when the cell does not fit.
pub fn axis_count(dim: f64, cell: f64, stride: f64) -> usize {
    if cell > dim + COUNT_EPS {
        return 0;
    }
    ((dim - cell) / stride + COUNT_EPS).max(0.0).floor() as usize + 1
}

/// Generate the initial grid, coarse to fine, row-major within each scale.
pub fn generate_grid(spec: &GridSpec, image_width: f64, image_height: f64) -> Result<Vec<BBox>> {
    spec.validate()?;
    if !(image_width > 0.0 && image_height > 0.0) {
        return Err(Error::InvalidGridSpec(format!(
            "image size {image_width}x{image_height} must be positive"
        )));
    }
    let mut boxes = Vec::new();
    for (&scale, &overlap) in spec.scales.iter().zip(&spec.overlaps) {
        let cell_w = image_width / f64::from(scale);
        let cell_h = image_height / f64::from(scale);
        let stride_x = cell_w * (1.0 - overlap);
        let stride_y = cell_h * (1.0 - overlap);
        let nx = axis_count(image_width, cell_w, stride_x);
        let ny = axis_count(image_height, cell_h, stride_y);
        if nx == 0 || ny == 0 {
            return Err(Error::EmptyGrid { scale, width: image_width, height: image_height });
        }
        boxes.reserve(nx * ny);
        for j in 0..ny {
            let y1 = j as f64 * stride_y;
            for i in 0..nx {
                let x1 = i as f64 * stride_x;
                boxes.push(BBox::new(x1 + 0.5 * cell_w, y1 + 0.5 * cell_h, cell_w, cell_h)?);
            }
        }
    }
    Ok(boxes)
}
