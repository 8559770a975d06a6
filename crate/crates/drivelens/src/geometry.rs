//! Exact box arithmetic and bounding-box-to-patch-grid projection.
//!
//! Boxes are axis-aligned, pixel-unit, origin top-left, x right, y down,
//! max-exclusive. Membership is half-open (`[x_min, x_max) x [y_min, y_max)`)
//! so adjacent boxes never double-claim boundary pixels, and a box that only
//! touches a patch boundary does not mark the patch.

use crate::error::{Error, Result};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

/// Axis-aligned bounding box in pixel units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Self {
        BBox { x_min, y_min, x_max, y_max }
    }

    /// A box is well-formed when min <= max on both axes and all coordinates
    /// are finite. Zero-area boxes are permitted as values.
    pub fn is_well_formed(&self) -> bool {
        self.x_min.is_finite()
            && self.y_min.is_finite()
            && self.x_max.is_finite()
            && self.y_max.is_finite()
            && self.x_min <= self.x_max
            && self.y_min <= self.y_max
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x_min + self.x_max), 0.5 * (self.y_min + self.y_max))
    }

    /// Clip to the frame rectangle `[0,w) x [0,h)` (max-exclusive bounds w, h).
    pub fn clipped(&self, w: f64, h: f64) -> BBox {
        BBox {
            x_min: self.x_min.clamp(0.0, w),
            y_min: self.y_min.clamp(0.0, h),
            x_max: self.x_max.clamp(0.0, w),
            y_max: self.y_max.clamp(0.0, h),
        }
    }

    /// Translate by (dx, dy).
    pub fn shifted(&self, dx: f64, dy: f64) -> BBox {
        BBox {
            x_min: self.x_min + dx,
            y_min: self.y_min + dy,
            x_max: self.x_max + dx,
            y_max: self.y_max + dy,
        }
    }

    /// Intersection area with another box.
    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let w = (self.x_max.min(other.x_max) - self.x_min.max(other.x_min)).max(0.0);
        let h = (self.y_max.min(other.y_max) - self.y_min.max(other.y_min)).max(0.0);
        w * h
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        BBox::new(a[0], a[1], a[2], a[3])
    }
}

/// Intersection over union of two boxes, in `[0, 1]`.
///
/// Returns 0 when the union has zero area (two degenerate boxes).
pub fn iou(a: &BBox, b: &BBox) -> Result<f64> {
    if !a.is_well_formed() || !b.is_well_formed() {
        return Err(Error::shape(format!("malformed box in iou: {a:?} vs {b:?}")));
    }
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return Ok(0.0);
    }
    Ok(inter / union)
}

/// Binary attention grid over non-overlapping image patches.
///
/// `grid[(r, c)]` is 1 when patch (r, c) is overlapped by a significant
/// object box and 0 otherwise. Where a map crosses a serialization boundary
/// it travels as the row-major 0/1 list given by [`PatchAttentionMap::flat`].
#[derive(Debug, Clone, PartialEq)]
pub struct PatchAttentionMap {
    /// Row-major 0/1 grid, shape (rows, cols).
    pub grid: Array2<u8>,
    pub patch_size: usize,
    pub height: usize,
    pub width: usize,
}

impl PatchAttentionMap {
    pub fn rows(&self) -> usize {
        self.grid.nrows()
    }

    pub fn cols(&self) -> usize {
        self.grid.ncols()
    }

    pub fn num_patches(&self) -> usize {
        self.grid.len()
    }

    /// All-ones map: every patch marked significant. Equivalent to no masking.
    pub fn all_ones(height: usize, width: usize, patch_size: usize) -> Result<Self> {
        let mut m = project_to_patch_map(&[], height, width, patch_size)?;
        m.grid.fill(1);
        Ok(m)
    }

    pub fn is_all_ones(&self) -> bool {
        self.grid.iter().all(|&v| v == 1)
    }

    pub fn is_all_zeros(&self) -> bool {
        self.grid.iter().all(|&v| v == 0)
    }

    /// Flattened row-major patch values, matching patch-sequence order.
    pub fn flat(&self) -> Vec<u8> {
        self.grid.iter().copied().collect()
    }
}

/// Project boxes onto the patch grid: a patch is set to 1 iff some box's
/// interior intersects it with positive area. The empty box list yields an
/// all-zero map.
pub fn project_to_patch_map(
    boxes: &[BBox],
    height: usize,
    width: usize,
    patch_size: usize,
) -> Result<PatchAttentionMap> {
    if patch_size == 0 || !height.is_multiple_of(patch_size) || !width.is_multiple_of(patch_size) {
        return Err(Error::shape(format!(
            "frame {width}x{height} not divisible by patch size {patch_size}"
        )));
    }
    let rows = height / patch_size;
    let cols = width / patch_size;
    let mut grid = Array2::<u8>::zeros((rows, cols));
    let p = patch_size as f64;
    for b in boxes {
        if !b.is_well_formed() {
            return Err(Error::shape(format!("malformed box in projection: {b:?}")));
        }
        if b.area() <= 0.0 {
            continue;
        }
        let clipped = b.clipped(width as f64, height as f64);
        if clipped.area() <= 0.0 {
            continue;
        }
        // Positive-area overlap with patch [c*p,(c+1)*p) x [r*p,(r+1)*p):
        // columns floor(x_min/p) .. last column whose start is < x_max.
        let c0 = (clipped.x_min / p).floor() as usize;
        let c1 = col_end_exclusive(clipped.x_max, p, cols);
        let r0 = (clipped.y_min / p).floor() as usize;
        let r1 = col_end_exclusive(clipped.y_max, p, rows);
        for r in r0..r1 {
            for c in c0..c1 {
                grid[(r, c)] = 1;
            }
        }
    }
    Ok(PatchAttentionMap { grid, patch_size, height, width })
}

/// Exclusive end index of cells overlapped with positive measure by an
/// interval ending at `hi` (exclusive), cell size `p`.
fn col_end_exclusive(hi: f64, p: f64, n_cells: usize) -> usize {
    let idx = (hi / p).ceil() as usize;
    // hi exactly on a cell boundary contributes nothing to the next cell.
    let idx = if (hi / p).fract() == 0.0 { (hi / p) as usize } else { idx };
    idx.min(n_cells)
}

/// Horizontal-thirds position phrase for a box center.
///
/// Half-open thirds: `[0, W/3)` is "on the left", `[W/3, 2W/3)` is "ahead",
/// and `[2W/3, W]` is "on the right".
pub fn position_label(b: &BBox, width: f64) -> &'static str {
    let (cx, _) = b.center();
    let third = width / 3.0;
    if cx < third {
        "on the left"
    } else if cx < 2.0 * third {
        "ahead"
    } else {
        "on the right"
    }
}
