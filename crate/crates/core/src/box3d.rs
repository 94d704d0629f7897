//! Gravity-aligned oriented 3D boxes: corners, bird's-eye-view footprints,
//! rotated IoU, image-plane projection and oriented NMS.
//!
//! `center` is the bottom-face center (KITTI label convention); the box spans
//! `[center.y - h, center.y]` vertically since y points down. `yaw` is the
//! KITTI `rotation_y`, a rotation about the camera y axis, and the box's
//! local x axis runs along its length.

use alloc::vec::Vec;
use core::f64::consts::PI;

#[allow(unused_imports)]
use num_traits::Float;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{ProjectionMatrix, Vec3};
use crate::polygon::{shoelace, ConvexPolygon};

/// Intersections smaller than this (m²) count as empty.
pub const MIN_INTERSECTION_AREA: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Error)]
pub enum BoxError {
    #[error("box dimensions must be positive, got h={h} w={w} l={l}")]
    NonPositiveSize { h: f64, w: f64, l: f64 },
    #[error("box lies entirely behind the camera")]
    BehindCamera,
    #[error("non-finite box parameter")]
    NonFinite,
}

/// Wraps an angle into `(-π, π]`.
pub fn normalize_angle(a: f64) -> f64 {
    let two_pi = 2.0 * PI;
    let mut r = a - two_pi * ((a + PI) / two_pi).floor();
    if r <= -PI {
        r += two_pi;
    }
    if r > PI {
        r -= two_pi;
    }
    r
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxSize {
    pub h: f64,
    pub w: f64,
    pub l: f64,
}

impl BoxSize {
    pub const fn new(h: f64, w: f64, l: f64) -> Self {
        BoxSize { h, w, l }
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.h, self.w, self.l]
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        BoxSize::new(a[0], a[1], a[2])
    }

    pub fn volume(&self) -> f64 {
        self.h * self.w * self.l
    }

    pub fn bev_diagonal(&self) -> f64 {
        (self.w * self.w + self.l * self.l).sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OrientedBox3D {
    pub center: Vec3,
    pub size: BoxSize,
    pub yaw: f64,
}

impl OrientedBox3D {
    pub fn new(center: Vec3, size: BoxSize, yaw: f64) -> Result<Self, BoxError> {
        if !(center.iter().all(|v| v.is_finite()) && yaw.is_finite()) {
            return Err(BoxError::NonFinite);
        }
        if !(size.h > 0.0 && size.w > 0.0 && size.l > 0.0) {
            return Err(BoxError::NonPositiveSize {
                h: size.h,
                w: size.w,
                l: size.l,
            });
        }
        Ok(OrientedBox3D {
            center,
            size,
            yaw: normalize_angle(yaw),
        })
    }

    pub fn bottom(&self) -> f64 {
        self.center[1]
    }

    pub fn top(&self) -> f64 {
        self.center[1] - self.size.h
    }

    /// Geometric center (halfway up the box).
    pub fn centroid(&self) -> Vec3 {
        [
            self.center[0],
            self.center[1] - 0.5 * self.size.h,
            self.center[2],
        ]
    }

    pub fn volume(&self) -> f64 {
        self.size.volume()
    }

    pub fn translated(&self, d: Vec3) -> Self {
        OrientedBox3D {
            center: [
                self.center[0] + d[0],
                self.center[1] + d[1],
                self.center[2] + d[2],
            ],
            ..*self
        }
    }

    /// Local `(x along length, z along width)` offset to camera-frame `(x, z)`.
    fn local_to_bev(&self, lx: f64, lz: f64) -> [f64; 2] {
        let (s, c) = self.yaw.sin_cos();
        [
            self.center[0] + c * lx + s * lz,
            self.center[2] - s * lx + c * lz,
        ]
    }

    /// Inverse of the footprint transform; used by point-in-box tests.
    pub fn contains(&self, p: &Vec3) -> bool {
        if p[1] > self.bottom() || p[1] < self.top() {
            return false;
        }
        let (s, c) = self.yaw.sin_cos();
        let dx = p[0] - self.center[0];
        let dz = p[2] - self.center[2];
        let lx = c * dx - s * dz;
        let lz = s * dx + c * dz;
        lx.abs() <= 0.5 * self.size.l && lz.abs() <= 0.5 * self.size.w
    }

    /// Footprint in the `(x, z)` plane, counterclockwise, starting at local
    /// `(+l/2, +w/2)`.
    pub fn bev_polygon(&self) -> [[f64; 2]; 4] {
        let hl = 0.5 * self.size.l;
        let hw = 0.5 * self.size.w;
        [
            self.local_to_bev(hl, hw),
            self.local_to_bev(-hl, hw),
            self.local_to_bev(-hl, -hw),
            self.local_to_bev(hl, -hw),
        ]
    }

    /// Bottom face in footprint order, then the top face in the same order.
    pub fn corners(&self) -> [Vec3; 8] {
        let bev = self.bev_polygon();
        let mut out = [[0.0; 3]; 8];
        for (i, p) in bev.iter().enumerate() {
            out[i] = [p[0], self.bottom(), p[1]];
            out[i + 4] = [p[0], self.top(), p[1]];
        }
        out
    }
}

/// Area of a box footprint via the shoelace formula.
pub fn bev_area(b: &OrientedBox3D) -> f64 {
    shoelace(&b.bev_polygon())
}

/// Footprint intersection area in m².
pub fn bev_intersection_area(a: &OrientedBox3D, b: &OrientedBox3D) -> f64 {
    let dx = a.center[0] - b.center[0];
    let dz = a.center[2] - b.center[2];
    let reach = 0.5 * (a.size.bev_diagonal() + b.size.bev_diagonal());
    if dx * dx + dz * dz > reach * reach {
        return 0.0;
    }
    let pa = ConvexPolygon::from_slice(&a.bev_polygon());
    let pb = ConvexPolygon::from_slice(&b.bev_polygon());
    let area = pa.clip(&pb).signed_area();
    if area < MIN_INTERSECTION_AREA {
        0.0
    } else {
        area
    }
}

fn ratio(inter: f64, area_a: f64, area_b: f64) -> f64 {
    if inter <= 0.0 {
        return 0.0;
    }
    let union = area_a + area_b - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Rotated-rectangle IoU of the two footprints.
pub fn iou_bev(a: &OrientedBox3D, b: &OrientedBox3D) -> f64 {
    let inter = bev_intersection_area(a, b);
    ratio(inter, a.size.w * a.size.l, b.size.w * b.size.l)
}

/// Vertical overlap of the two boxes' `[top, bottom]` spans.
pub fn vertical_overlap(a: &OrientedBox3D, b: &OrientedBox3D) -> f64 {
    (a.bottom().min(b.bottom()) - a.top().max(b.top())).max(0.0)
}

/// 3D IoU of two gravity-aligned boxes: footprint intersection times
/// vertical overlap.
pub fn iou_3d(a: &OrientedBox3D, b: &OrientedBox3D) -> f64 {
    let dy = vertical_overlap(a, b);
    if dy <= 0.0 {
        return 0.0;
    }
    let inter = bev_intersection_area(a, b) * dy;
    ratio(inter, a.volume(), b.volume())
}

/// Axis-aligned image region in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Roi2D {
    pub min: [f64; 2],
    pub max: [f64; 2],
}

impl Roi2D {
    pub fn new(min: [f64; 2], max: [f64; 2]) -> Self {
        Roi2D { min, max }
    }

    pub fn width(&self) -> f64 {
        self.max[0] - self.min[0]
    }

    pub fn height(&self) -> f64 {
        self.max[1] - self.min[1]
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> [f64; 2] {
        [
            0.5 * (self.min[0] + self.max[0]),
            0.5 * (self.min[1] + self.max[1]),
        ]
    }

    pub fn scaled(&self, k: f64) -> Roi2D {
        Roi2D::new(
            [self.min[0] * k, self.min[1] * k],
            [self.max[0] * k, self.max[1] * k],
        )
    }

    pub fn clipped(&self, width: f64, height: f64) -> Roi2D {
        let cx = |v: f64| v.clamp(0.0, width);
        let cy = |v: f64| v.clamp(0.0, height);
        Roi2D::new(
            [cx(self.min[0]), cy(self.min[1])],
            [cx(self.max[0]), cy(self.max[1])],
        )
    }

    pub fn iou(&self, other: &Roi2D) -> f64 {
        let iw = self.max[0].min(other.max[0]) - self.min[0].max(other.min[0]);
        let ih = self.max[1].min(other.max[1]) - self.min[1].max(other.min[1]);
        if iw <= 0.0 || ih <= 0.0 {
            return 0.0;
        }
        let inter = iw * ih;
        inter / (self.area() + other.area() - inter)
    }
}

/// Axis-aligned hull of the projected corners, before clipping. Corners at or
/// behind the camera plane are skipped.
pub fn project_box_unclipped(p: &ProjectionMatrix, b: &OrientedBox3D) -> Result<Roi2D, BoxError> {
    let mut min = [f64::INFINITY; 2];
    let mut max = [f64::NEG_INFINITY; 2];
    let mut any = false;
    for c in b.corners().iter() {
        if let Ok(uv) = crate::geometry::project(p, c) {
            any = true;
            for k in 0..2 {
                min[k] = min[k].min(uv[k]);
                max[k] = max[k].max(uv[k]);
            }
        }
    }
    if !any {
        return Err(BoxError::BehindCamera);
    }
    Ok(Roi2D::new(min, max))
}

/// Image-plane RoI of a box, clipped to `(width, height)`.
pub fn project_box(
    p: &ProjectionMatrix,
    b: &OrientedBox3D,
    image_size: (usize, usize),
) -> Result<Roi2D, BoxError> {
    Ok(project_box_unclipped(p, b)?.clipped(image_size.0 as f64, image_size.1 as f64))
}

/// Greedy BEV non-maximum suppression. Returns indices of the kept boxes in
/// descending score order; equal scores keep the lower input index first.
pub fn nms_bev(
    detections: &[(OrientedBox3D, f64)],
    iou_threshold: f64,
    max_keep: usize,
) -> Vec<usize> {
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&a, &b| {
        detections[b]
            .1
            .partial_cmp(&detections[a].1)
            .unwrap_or(core::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut keep: Vec<usize> = Vec::new();
    for idx in order {
        if keep.len() >= max_keep {
            break;
        }
        let cand = &detections[idx].0;
        if keep
            .iter()
            .all(|&k| iou_bev(&detections[k].0, cand) <= iou_threshold)
        {
            keep.push(idx);
        }
    }
    keep
}
