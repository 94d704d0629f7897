//! Front-view objectness grid, the ground-plane 3D anchor pool, and the
//! anchor ↔ ground-truth offset parameterization.

use alloc::string::String;
use alloc::vec::Vec;
use core::f64::consts::{FRAC_PI_2, PI};

#[allow(unused_imports)]
use num_traits::Float;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::box3d::{normalize_angle, BoxError, BoxSize, OrientedBox3D};
use crate::geometry::{in_frustum, project, StereoCalibration};

/// A cell is foreground when a projected object center lies closer than
/// this many cell widths to the cell center.
pub const FOREGROUND_RADIUS_CELLS: f64 = 1.8;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AnchorError {
    #[error("no training samples for class {0:?}")]
    EmptyClass(String),
    #[error("grid stride {stride} does not fit a {width}x{height} image")]
    BadGrid {
        width: usize,
        height: usize,
        stride: usize,
    },
    #[error("anchor lattice interval must be positive")]
    BadInterval,
    #[error(transparent)]
    Box(#[from] BoxError),
}

/// The coarse image grid of the front-view objectness stage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrontViewGrid {
    pub gx: usize,
    pub gy: usize,
    pub cell_w: f64,
    pub cell_h: f64,
}

impl FrontViewGrid {
    /// One cell per pixel of a feature map with the given total stride.
    pub fn for_image(width: usize, height: usize, stride: usize) -> Result<Self, AnchorError> {
        let gx = if stride == 0 { 0 } else { width / stride };
        let gy = if stride == 0 { 0 } else { height / stride };
        if gx == 0 || gy == 0 {
            return Err(AnchorError::BadGrid {
                width,
                height,
                stride,
            });
        }
        Ok(FrontViewGrid {
            gx,
            gy,
            cell_w: width as f64 / gx as f64,
            cell_h: height as f64 / gy as f64,
        })
    }

    pub fn len(&self) -> usize {
        self.gx * self.gy
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn cell_center(&self, row: usize, col: usize) -> [f64; 2] {
        [
            (col as f64 + 0.5) * self.cell_w,
            (row as f64 + 0.5) * self.cell_h,
        ]
    }

    /// `(row, col)` of the cell containing a pixel.
    pub fn cell_of(&self, uv: [f64; 2]) -> Option<(usize, usize)> {
        if !(uv[0] >= 0.0 && uv[1] >= 0.0) {
            return None;
        }
        let col = (uv[0] / self.cell_w).floor() as usize;
        let row = (uv[1] / self.cell_h).floor() as usize;
        (col < self.gx && row < self.gy).then_some((row, col))
    }

    pub fn index(&self, row: usize, col: usize) -> usize {
        row * self.gx + col
    }
}

/// Per-cell values over a [`FrontViewGrid`], row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct CellMap {
    pub gx: usize,
    pub gy: usize,
    pub values: Vec<f64>,
}

impl CellMap {
    pub fn filled(grid: &FrontViewGrid, v: f64) -> Self {
        CellMap {
            gx: grid.gx,
            gy: grid.gy,
            values: alloc::vec![v; grid.len()],
        }
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.gx + col]
    }

    pub fn set(&mut self, row: usize, col: usize, v: f64) {
        self.values[row * self.gx + col] = v;
    }

    pub fn count_at_least(&self, threshold: f64) -> usize {
        self.values.iter().filter(|&&v| v >= threshold).count()
    }
}

/// Binary foreground map: a cell is 1 when the nearest projected box center
/// is closer than 1.8 cell widths to the cell center.
pub fn frontview_targets(
    gts: &[OrientedBox3D],
    calib: &StereoCalibration,
    grid: &FrontViewGrid,
) -> CellMap {
    let centers: Vec<[f64; 2]> = gts
        .iter()
        .filter_map(|b| project(&calib.p_left, &b.centroid()).ok())
        .collect();
    let radius = FOREGROUND_RADIUS_CELLS * grid.cell_w;
    let mut map = CellMap::filled(grid, 0.0);
    for row in 0..grid.gy {
        for col in 0..grid.gx {
            let c = grid.cell_center(row, col);
            let hit = centers.iter().any(|p| {
                let du = p[0] - c[0];
                let dv = p[1] - c[1];
                (du * du + dv * dv).sqrt() < radius
            });
            if hit {
                map.set(row, col, 1.0);
            }
        }
    }
    map
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorPrior {
    pub class_name: String,
    pub mean_size: BoxSize,
}

/// Per-class mean `(h, w, l)` over a stream of `(class, size)` samples, in
/// the order of `classes`.
pub fn compute_prior_sizes<'a, I>(
    samples: I,
    classes: &[&str],
) -> Result<Vec<AnchorPrior>, AnchorError>
where
    I: IntoIterator<Item = (&'a str, BoxSize)>,
{
    let mut sums = alloc::vec![[0.0f64; 3]; classes.len()];
    let mut counts = alloc::vec![0usize; classes.len()];
    for (class, size) in samples {
        if let Some(k) = classes.iter().position(|c| *c == class) {
            sums[k][0] += size.h;
            sums[k][1] += size.w;
            sums[k][2] += size.l;
            counts[k] += 1;
        }
    }
    classes
        .iter()
        .zip(sums.iter().zip(counts.iter()))
        .map(|(name, (s, &n))| {
            if n == 0 {
                return Err(AnchorError::EmptyClass(String::from(*name)));
            }
            let n = n as f64;
            Ok(AnchorPrior {
                class_name: String::from(*name),
                mean_size: BoxSize::new(s[0] / n, s[1] / n, s[2] / n),
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnchorPoolParams {
    /// Lattice spacing on the ground plane, meters.
    pub interval_m: f64,
    /// `(near, far]` depth range of anchor centers, meters.
    pub depth_range: (f64, f64),
    /// Camera-frame y of the ground plane (y points down).
    pub ground_y: f64,
}

impl Default for AnchorPoolParams {
    fn default() -> Self {
        AnchorPoolParams {
            interval_m: 0.25,
            depth_range: (0.5, 70.0),
            ground_y: 1.65,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Anchor {
    pub box3d: OrientedBox3D,
    pub prior_index: usize,
    /// `(row, col)` of the front-view cell containing the projected center.
    pub cell: (usize, usize),
}

/// Lays anchors on the ground-plane lattice `(m·Δ, ground_y, n·Δ)`.
///
/// A lattice point yields anchors for a prior when the anchor's geometric
/// center is inside the frustum and depth range; it then contributes one
/// yaw-0 and one yaw-π/2 anchor. Output order is depth row, lateral
/// position, prior, yaw.
pub fn generate_anchor_pool(
    calib: &StereoCalibration,
    grid: &FrontViewGrid,
    params: &AnchorPoolParams,
    priors: &[AnchorPrior],
) -> Result<Vec<Anchor>, AnchorError> {
    let step = params.interval_m;
    if !(step > 0.0) {
        return Err(AnchorError::BadInterval);
    }
    let (near, far) = params.depth_range;
    let f = calib.focal_px;
    let (cx, _) = calib.principal_point;
    let x_lo = ((0.0 - cx) * far / f).min(0.0) - step;
    let x_hi = ((calib.width() as f64 - cx) * far / f).max(0.0) + step;
    let m_lo = (x_lo / step).floor() as i64;
    let m_hi = (x_hi / step).ceil() as i64;
    let n_lo = ((near / step).floor() as i64).max(0);
    let n_hi = (far / step).ceil() as i64;

    let mut pool = Vec::new();
    for n in n_lo..=n_hi {
        let z = n as f64 * step;
        for m in m_lo..=m_hi {
            let x = m as f64 * step;
            for (pi, prior) in priors.iter().enumerate() {
                let size = prior.mean_size;
                let centroid = [x, params.ground_y - 0.5 * size.h, z];
                if !in_frustum(calib, &centroid, (near, far)) {
                    continue;
                }
                let Some(cell) = project(&calib.p_left, &centroid)
                    .ok()
                    .and_then(|uv| grid.cell_of(uv))
                else {
                    continue;
                };
                for yaw in [0.0, FRAC_PI_2] {
                    pool.push(Anchor {
                        box3d: OrientedBox3D::new([x, params.ground_y, z], size, yaw)?,
                        prior_index: pi,
                        cell,
                    });
                }
            }
        }
    }
    Ok(pool)
}

/// Indices of pool anchors whose cell probability is at least `threshold`.
pub fn select_potential_anchors(
    pool: &[Anchor],
    objectness: &CellMap,
    threshold: f64,
) -> Vec<usize> {
    pool.iter()
        .enumerate()
        .filter(|(_, a)| objectness.get(a.cell.0, a.cell.1) >= threshold)
        .map(|(i, _)| i)
        .collect()
}

/// Regression target of a ground-truth box relative to a reference box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OffsetTarget {
    /// Center offset divided by the reference box's BEV diagonal.
    pub d_center: [f64; 3],
    /// `ln(size_gt / size_ref)` per `(h, w, l)`.
    pub d_size: [f64; 3],
    /// `(cos, sin)` of the yaw relative to the reference yaw.
    pub orientation: [f64; 2],
}

impl OffsetTarget {
    pub const LEN: usize = 8;

    pub fn to_array(&self) -> [f64; 8] {
        [
            self.d_center[0],
            self.d_center[1],
            self.d_center[2],
            self.d_size[0],
            self.d_size[1],
            self.d_size[2],
            self.orientation[0],
            self.orientation[1],
        ]
    }

    pub fn from_slice(v: &[f64]) -> Self {
        OffsetTarget {
            d_center: [v[0], v[1], v[2]],
            d_size: [v[3], v[4], v[5]],
            orientation: [v[6], v[7]],
        }
    }
}

pub fn encode_offsets(anchor: &OrientedBox3D, gt: &OrientedBox3D) -> OffsetTarget {
    let diag = anchor.size.bev_diagonal();
    let mut d_center = [0.0; 3];
    for (k, d) in d_center.iter_mut().enumerate() {
        *d = (gt.center[k] - anchor.center[k]) / diag;
    }
    let sa = anchor.size.to_array();
    let sg = gt.size.to_array();
    let (s, c) = (gt.yaw - anchor.yaw).sin_cos();
    OffsetTarget {
        d_center,
        d_size: [
            (sg[0] / sa[0]).ln(),
            (sg[1] / sa[1]).ln(),
            (sg[2] / sa[2]).ln(),
        ],
        orientation: [c, s],
    }
}

pub fn decode_offsets(anchor: &OrientedBox3D, t: &OffsetTarget) -> Result<OrientedBox3D, BoxError> {
    let diag = anchor.size.bev_diagonal();
    let mut center = [0.0; 3];
    for (k, c) in center.iter_mut().enumerate() {
        *c = anchor.center[k] + t.d_center[k] * diag;
    }
    let sa = anchor.size.to_array();
    let size = BoxSize::new(
        sa[0] * t.d_size[0].exp(),
        sa[1] * t.d_size[1].exp(),
        sa[2] * t.d_size[2].exp(),
    );
    let yaw = anchor.yaw + t.orientation[1].atan2(t.orientation[0]);
    OrientedBox3D::new(center, size, yaw)
}

/// The heading of `gt_yaw` modulo π that lies within a quarter turn of
/// `reference_yaw`. A box and its half-turn describe the same solid, so
/// training targets use this form to keep the local orientation continuous.
pub fn nearest_equivalent_yaw(gt_yaw: f64, reference_yaw: f64) -> f64 {
    let mut d = normalize_angle(gt_yaw - reference_yaw);
    if d > FRAC_PI_2 {
        d -= PI;
    } else if d <= -FRAC_PI_2 {
        d += PI;
    }
    normalize_angle(reference_yaw + d)
}
