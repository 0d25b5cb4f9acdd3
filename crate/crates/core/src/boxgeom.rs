//! Box algebra: anchor-relative delta encoding, IoU, and the flip group
//! acting on images, boxes, deltas and anchor indices.
//!
//! Coordinates are continuous: an image of width `W` spans `[0, W]`, so the
//! mirror of `x` is `W - x`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeomError {
    #[error("non-positive box extent ({w} x {h})")]
    NonPositiveExtent { w: f64, h: f64 },
    #[error("image size {image_size} is not a multiple of stride {stride}")]
    GridMismatch { image_size: usize, stride: usize },
}

/// Axis-aligned box as center and extents, in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxCWH {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BoxCWH {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self { cx, cy, w, h }
    }

    /// Builds a box from corner coordinates `(x1, y1)`-`(x2, y2)`.
    pub fn from_corners(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self {
            cx: 0.5 * (x1 + x2),
            cy: 0.5 * (y1 + y2),
            w: x2 - x1,
            h: y2 - y1,
        }
    }

    pub fn corners(&self) -> (f64, f64, f64, f64) {
        (
            self.cx - 0.5 * self.w,
            self.cy - 0.5 * self.h,
            self.cx + 0.5 * self.w,
            self.cy + 0.5 * self.h,
        )
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }
}

/// Anchor-relative box offsets `[dcx, dcy, dw, dh]`.
#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct DeltaBox {
    pub dcx: f64,
    pub dcy: f64,
    pub dw: f64,
    pub dh: f64,
}

impl DeltaBox {
    pub fn new(dcx: f64, dcy: f64, dw: f64, dh: f64) -> Self {
        Self { dcx, dcy, dw, dh }
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.dcx, self.dcy, self.dw, self.dh]
    }

    pub fn from_slice(v: &[f64]) -> Self {
        Self::new(v[0], v[1], v[2], v[3])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FlipKind {
    Horizontal,
    Vertical,
    Rotate180,
}

impl FlipKind {
    pub const ALL: [FlipKind; 3] = [Self::Horizontal, Self::Vertical, Self::Rotate180];

    /// Whether the flip mirrors the x (width) axis.
    pub fn mirrors_x(self) -> bool {
        matches!(self, Self::Horizontal | Self::Rotate180)
    }

    /// Whether the flip mirrors the y (height) axis.
    pub fn mirrors_y(self) -> bool {
        matches!(self, Self::Vertical | Self::Rotate180)
    }
}

/// `dcx = (box.cx - a.cx) / a.w`, `dcy = (box.cy - a.cy) / a.h`,
/// `dw = ln(box.w / a.w)`, `dh = ln(box.h / a.h)`.
pub fn encode(b: &BoxCWH, anchor: &BoxCWH) -> Result<DeltaBox, GeomError> {
    for bx in [b, anchor] {
        if !(bx.w > 0.0 && bx.h > 0.0) {
            return Err(GeomError::NonPositiveExtent { w: bx.w, h: bx.h });
        }
    }
    Ok(DeltaBox {
        dcx: (b.cx - anchor.cx) / anchor.w,
        dcy: (b.cy - anchor.cy) / anchor.h,
        dw: (b.w / anchor.w).ln(),
        dh: (b.h / anchor.h).ln(),
    })
}

pub fn decode(d: &DeltaBox, anchor: &BoxCWH) -> BoxCWH {
    BoxCWH {
        cx: anchor.cx + d.dcx * anchor.w,
        cy: anchor.cy + d.dcy * anchor.h,
        w: anchor.w * d.dw.exp(),
        h: anchor.h * d.dh.exp(),
    }
}

/// Mirrors a `[C, H, W]` image. Channels are untouched.
pub fn flip_image(image: &Tensor, kind: FlipKind) -> Tensor {
    let shape = image.shape();
    assert_eq!(shape.len(), 3, "flip_image expects [C, H, W]");
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let src = image.data();
    let mut out = vec![0.0; src.len()];
    for ch in 0..c {
        for y in 0..h {
            let sy = if kind.mirrors_y() { h - 1 - y } else { y };
            let dst_row = &mut out[(ch * h + y) * w..][..w];
            let src_row = &src[(ch * h + sy) * w..][..w];
            if kind.mirrors_x() {
                dst_row
                    .iter_mut()
                    .zip(src_row.iter().rev())
                    .for_each(|(d, s)| *d = *s);
            } else {
                dst_row.copy_from_slice(src_row);
            }
        }
    }
    Tensor::new(shape.to_vec(), out).expect("same shape")
}

/// Mirrors a box inside an image of size `(height, width)`.
pub fn flip_box(b: &BoxCWH, kind: FlipKind, (height, width): (f64, f64)) -> BoxCWH {
    BoxCWH {
        cx: if kind.mirrors_x() { width - b.cx } else { b.cx },
        cy: if kind.mirrors_y() { height - b.cy } else { b.cy },
        ..*b
    }
}

/// Sign correction for deltas: the mirrored center offset negates, extents
/// are unchanged.
pub fn flip_delta(d: &DeltaBox, kind: FlipKind) -> DeltaBox {
    DeltaBox {
        dcx: if kind.mirrors_x() { -d.dcx } else { d.dcx },
        dcy: if kind.mirrors_y() { -d.dcy } else { d.dcy },
        ..*d
    }
}

pub fn iou(a: &BoxCWH, b: &BoxCWH) -> f64 {
    let (ax1, ay1, ax2, ay2) = a.corners();
    let (bx1, by1, bx2, by2) = b.corners();
    let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
    let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// Square grid of anchors. Anchor `k = (i * S + j) * A + s` sits at
/// `((j + 0.5) * stride, (i + 0.5) * stride)` with shape `anchor_shapes[s]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnchorGrid {
    pub grid_size: usize,
    pub stride: usize,
    pub anchor_shapes: Vec<(f64, f64)>,
    pub image_size: usize,
}

/// Anchor shapes `(w, h)` in pixels used by the detector.
pub const DEFAULT_ANCHOR_SHAPES: [(f64, f64); 3] = [(12.0, 12.0), (24.0, 24.0), (16.0, 28.0)];
pub const DEFAULT_STRIDE: usize = 8;

impl AnchorGrid {
    pub fn new(
        image_size: usize,
        stride: usize,
        anchor_shapes: Vec<(f64, f64)>,
    ) -> Result<Self, GeomError> {
        if stride == 0 || image_size == 0 || image_size % stride != 0 {
            return Err(GeomError::GridMismatch { image_size, stride });
        }
        Ok(Self {
            grid_size: image_size / stride,
            stride,
            anchor_shapes,
            image_size,
        })
    }

    pub fn standard(image_size: usize) -> Result<Self, GeomError> {
        Self::new(image_size, DEFAULT_STRIDE, DEFAULT_ANCHOR_SHAPES.to_vec())
    }

    pub fn shapes_per_cell(&self) -> usize {
        self.anchor_shapes.len()
    }

    pub fn num_anchors(&self) -> usize {
        self.grid_size * self.grid_size * self.anchor_shapes.len()
    }

    pub fn index(&self, i: usize, j: usize, s: usize) -> usize {
        (i * self.grid_size + j) * self.anchor_shapes.len() + s
    }

    /// `(row, column, shape)` of anchor `k`.
    pub fn cell(&self, k: usize) -> (usize, usize, usize) {
        let a = self.anchor_shapes.len();
        let s = k % a;
        let cell = k / a;
        (cell / self.grid_size, cell % self.grid_size, s)
    }

    pub fn anchor(&self, k: usize) -> BoxCWH {
        let (i, j, s) = self.cell(k);
        let (w, h) = self.anchor_shapes[s];
        BoxCWH {
            cx: (j as f64 + 0.5) * self.stride as f64,
            cy: (i as f64 + 0.5) * self.stride as f64,
            w,
            h,
        }
    }

    pub fn anchors(&self) -> Vec<BoxCWH> {
        (0..self.num_anchors()).map(|k| self.anchor(k)).collect()
    }
}

/// Bijection `k -> k'` between anchor indices of an image and its flip.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AnchorPermutation(Vec<usize>);

impl AnchorPermutation {
    pub fn identity(n: usize) -> Self {
        Self((0..n).collect())
    }

    /// `None` unless `map` is a bijection on `0..map.len()`.
    pub fn from_vec(map: Vec<usize>) -> Option<Self> {
        let p = Self(map);
        p.is_bijection().then_some(p)
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, k: usize) -> usize {
        self.0[k]
    }

    pub fn is_bijection(&self) -> bool {
        let mut seen = vec![false; self.0.len()];
        self.0.iter().all(|&k| k < seen.len() && !std::mem::replace(&mut seen[k], true))
    }

    pub fn is_involution(&self) -> bool {
        self.0.iter().enumerate().all(|(k, &p)| self.0.get(p) == Some(&k))
    }
}

/// Flips mirror grid cells and keep the shape index, since no flip exchanges
/// width and height.
pub fn anchor_permutation(grid: &AnchorGrid, kind: FlipKind) -> AnchorPermutation {
    let s = grid.grid_size;
    let map = (0..grid.num_anchors())
        .map(|k| {
            let (i, j, a) = grid.cell(k);
            let i2 = if kind.mirrors_y() { s - 1 - i } else { i };
            let j2 = if kind.mirrors_x() { s - 1 - j } else { j };
            grid.index(i2, j2, a)
        })
        .collect();
    AnchorPermutation(map)
}
