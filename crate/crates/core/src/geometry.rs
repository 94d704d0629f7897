//! Pinhole and rectified-stereo camera model.
//!
//! Camera frame: x right, y down, z forward, meters. Image coordinates are
//! pixels with the origin at the top-left image corner.

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Vec3 = [f64; 3];

/// Points closer than this to the camera plane cannot be projected.
pub const MIN_DEPTH: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Error)]
pub enum GeometryError {
    #[error("point depth {0} is not in front of the camera")]
    NonPositiveDepth(f64),
    #[error("projection matrix has a zero depth row")]
    DegenerateProjection,
    #[error("stereo rig is degenerate: baseline {baseline} m, focal {focal} px")]
    DegenerateRig { baseline: f64, focal: f64 },
    #[error("image size must be positive")]
    EmptyImage,
}

/// A 3×4 camera projection matrix mapping homogeneous camera coordinates to
/// homogeneous pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProjectionMatrix {
    rows: [[f64; 4]; 3],
}

impl ProjectionMatrix {
    pub fn new(rows: [[f64; 4]; 3]) -> Result<Self, GeometryError> {
        if rows[2][2] == 0.0 || !rows.iter().flatten().all(|v| v.is_finite()) {
            return Err(GeometryError::DegenerateProjection);
        }
        Ok(ProjectionMatrix { rows })
    }

    /// Rectified pinhole matrix `[f 0 cx tx; 0 f cy 0; 0 0 1 0]`.
    pub fn pinhole(focal: f64, cx: f64, cy: f64, tx: f64) -> Self {
        ProjectionMatrix {
            rows: [
                [focal, 0.0, cx, tx],
                [0.0, focal, cy, 0.0],
                [0.0, 0.0, 1.0, 0.0],
            ],
        }
    }

    pub fn rows(&self) -> &[[f64; 4]; 3] {
        &self.rows
    }

    /// Row-major copy of the twelve entries.
    pub fn to_array(&self) -> [f64; 12] {
        let mut out = [0.0; 12];
        for (i, v) in self.rows.iter().flatten().enumerate() {
            out[i] = *v;
        }
        out
    }

    pub fn from_array(values: [f64; 12]) -> Result<Self, GeometryError> {
        let mut rows = [[0.0; 4]; 3];
        for (i, v) in values.into_iter().enumerate() {
            rows[i / 4][i % 4] = v;
        }
        Self::new(rows)
    }

    /// Multiplies every entry by `k`. Projection is invariant to this.
    pub fn scaled(&self, k: f64) -> Self {
        let mut rows = self.rows;
        rows.iter_mut().flatten().for_each(|v| *v *= k);
        ProjectionMatrix { rows }
    }

    /// Left-multiplies by `diag(sx, sy, 1)`, i.e. rescales the image axes.
    pub fn rescale_image(&self, sx: f64, sy: f64) -> Self {
        let mut rows = self.rows;
        rows[0].iter_mut().for_each(|v| *v *= sx);
        rows[1].iter_mut().for_each(|v| *v *= sy);
        ProjectionMatrix { rows }
    }

    fn homogeneous(&self, p: &Vec3) -> [f64; 3] {
        let mut out = [0.0; 3];
        for (o, r) in out.iter_mut().zip(self.rows.iter()) {
            *o = r[0] * p[0] + r[1] * p[1] + r[2] * p[2] + r[3];
        }
        out
    }

    pub fn project(&self, point: &Vec3) -> Result<[f64; 2], GeometryError> {
        project(self, point)
    }
}

/// Projects a camera-frame point to pixel coordinates.
pub fn project(p: &ProjectionMatrix, point: &Vec3) -> Result<[f64; 2], GeometryError> {
    if point[2] <= MIN_DEPTH {
        return Err(GeometryError::NonPositiveDepth(point[2]));
    }
    let h = p.homogeneous(point);
    if h[2].abs() < 1e-300 {
        return Err(GeometryError::NonPositiveDepth(point[2]));
    }
    Ok([h[0] / h[2], h[1] / h[2]])
}

/// Intrinsics of a synthetic rectified rig.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RigParams {
    pub focal_px: f64,
    pub cx: f64,
    pub cy: f64,
    pub baseline_m: f64,
    pub width: usize,
    pub height: usize,
}

impl RigParams {
    /// Principal point at the image center.
    pub fn centered(focal_px: f64, baseline_m: f64, width: usize, height: usize) -> Self {
        RigParams {
            focal_px,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            baseline_m,
            width,
            height,
        }
    }
}

/// A rectified stereo pair: the right camera sits `baseline_m` to the right
/// of the left one.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StereoCalibration {
    pub p_left: ProjectionMatrix,
    pub p_right: ProjectionMatrix,
    pub focal_px: f64,
    pub principal_point: (f64, f64),
    pub baseline_m: f64,
    /// `(width, height)` in pixels.
    pub image_size: (usize, usize),
}

impl StereoCalibration {
    pub fn from_rig(rig: &RigParams) -> Result<Self, GeometryError> {
        let left = ProjectionMatrix::pinhole(rig.focal_px, rig.cx, rig.cy, 0.0);
        let right =
            ProjectionMatrix::pinhole(rig.focal_px, rig.cx, rig.cy, -rig.focal_px * rig.baseline_m);
        Self::from_matrices(left, right, (rig.width, rig.height))
    }

    /// Derives focal length, principal point and baseline from the left and
    /// right matrices. The baseline is the horizontal translation difference
    /// over the focal length, which reduces to `-p_right[0][3] / f` when the
    /// left camera is the reference frame.
    pub fn from_matrices(
        p_left: ProjectionMatrix,
        p_right: ProjectionMatrix,
        image_size: (usize, usize),
    ) -> Result<Self, GeometryError> {
        if image_size.0 == 0 || image_size.1 == 0 {
            return Err(GeometryError::EmptyImage);
        }
        let l = p_left.rows();
        let r = p_right.rows();
        let focal = l[0][0];
        let baseline = (l[0][3] - r[0][3]) / focal;
        if !(focal > 0.0) || !(baseline > 0.0) {
            return Err(GeometryError::DegenerateRig { baseline, focal });
        }
        Ok(StereoCalibration {
            p_left,
            p_right,
            focal_px: focal,
            principal_point: (l[0][2], l[1][2]),
            baseline_m: baseline,
            image_size,
        })
    }

    pub fn width(&self) -> usize {
        self.image_size.0
    }

    pub fn height(&self) -> usize {
        self.image_size.1
    }

    /// Horizontal disparity `f·b/z` of a point at depth `z`.
    pub fn disparity_at(&self, z: f64) -> f64 {
        self.focal_px * self.baseline_m / z
    }

    /// Depth from disparity, the inverse of [`Self::disparity_at`].
    pub fn depth_from_disparity(&self, disparity: f64) -> f64 {
        self.focal_px * self.baseline_m / disparity
    }

    /// Rescales both cameras to a new image size.
    pub fn resized(&self, width: usize, height: usize) -> Result<Self, GeometryError> {
        let sx = width as f64 / self.image_size.0 as f64;
        let sy = height as f64 / self.image_size.1 as f64;
        Self::from_matrices(
            self.p_left.rescale_image(sx, sy),
            self.p_right.rescale_image(sx, sy),
            (width, height),
        )
    }

    pub fn contains_pixel(&self, uv: [f64; 2]) -> bool {
        uv[0] >= 0.0
            && uv[0] < self.image_size.0 as f64
            && uv[1] >= 0.0
            && uv[1] < self.image_size.1 as f64
    }
}

/// True iff `near < z <= far` and the point projects inside the left image.
pub fn in_frustum(calib: &StereoCalibration, point: &Vec3, depth_range: (f64, f64)) -> bool {
    let z = point[2];
    if !(z > depth_range.0 && z <= depth_range.1) {
        return false;
    }
    match project(&calib.p_left, point) {
        Ok(uv) => calib.contains_pixel(uv),
        Err(_) => false,
    }
}
