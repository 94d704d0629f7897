//! Frames, ground-truth labels, difficulty regimes, and a synthetic stereo
//! scene generator.

use alloc::string::String;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use crate::box3d::BoxSize;
use crate::box3d::{normalize_angle, project_box, BoxError, OrientedBox3D};
use crate::geometry::{GeometryError, StereoCalibration, Vec3};
use crate::tensor::Tensor4;

mod render;
mod scene;

pub use render::{render_view, RenderedView, SceneObject, Shading};
pub use scene::{generate_scene, scene_seed, SceneSpec, YawDistribution};

pub const DONT_CARE: &str = "DontCare";

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DatasetError {
    #[error("image is {got:?} but calibration says {expected:?}")]
    ImageSize {
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("could not place {wanted} objects after {attempts} attempts")]
    PlacementFailure { wanted: usize, attempts: usize },
    #[error("invalid scene spec: {0}")]
    BadSpec(&'static str),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Box(#[from] BoxError),
}

/// One object annotation in KITTI label order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthLabel {
    pub class_name: String,
    pub truncation: f64,
    pub occlusion: u8,
    pub alpha: f64,
    /// `[left, top, right, bottom]` in pixels.
    pub bbox2d: [f64; 4],
    pub size: BoxSize,
    /// Bottom-face center in the left camera frame.
    pub location: Vec3,
    pub rotation_y: f64,
    pub score: Option<f64>,
}

/// Observation angle: yaw relative to the ray through the object.
pub fn observation_angle(location: &Vec3, rotation_y: f64) -> f64 {
    normalize_angle(rotation_y - location[0].atan2(location[2]))
}

impl GroundTruthLabel {
    pub fn is_dont_care(&self) -> bool {
        self.class_name == DONT_CARE
    }

    pub fn to_box(&self) -> Result<OrientedBox3D, BoxError> {
        OrientedBox3D::new(self.location, self.size, self.rotation_y)
    }

    /// Annotation of `b` as seen from the left camera of `calib`.
    pub fn from_box(
        class_name: &str,
        b: &OrientedBox3D,
        calib: &StereoCalibration,
        truncation: f64,
        occlusion: u8,
        score: Option<f64>,
    ) -> Result<Self, BoxError> {
        let roi = project_box(&calib.p_left, b, calib.image_size)?;
        Ok(GroundTruthLabel {
            class_name: class_name.into(),
            truncation,
            occlusion,
            alpha: observation_angle(&b.center, b.yaw),
            bbox2d: [roi.min[0], roi.min[1], roi.max[0], roi.max[1]],
            size: b.size,
            location: b.center,
            rotation_y: b.yaw,
            score,
        })
    }

    pub fn bbox_height(&self) -> f64 {
        self.bbox2d[3] - self.bbox2d[1]
    }
}

/// A calibrated frame. Images are `(1, 3, H, W)` with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameData {
    pub id: String,
    pub left_image: Tensor4,
    pub right_image: Option<Tensor4>,
    pub calib: StereoCalibration,
    pub labels: Vec<GroundTruthLabel>,
}

fn check_image(img: &Tensor4, calib: &StereoCalibration) -> Result<(), DatasetError> {
    let expected = calib.image_size;
    let got = (img.w(), img.h());
    if img.n() != 1 || img.c() != 3 || got != expected {
        return Err(DatasetError::ImageSize { expected, got });
    }
    Ok(())
}

impl FrameData {
    pub fn new(
        id: impl Into<String>,
        left_image: Tensor4,
        right_image: Option<Tensor4>,
        calib: StereoCalibration,
        labels: Vec<GroundTruthLabel>,
    ) -> Result<Self, DatasetError> {
        check_image(&left_image, &calib)?;
        if let Some(r) = &right_image {
            check_image(r, &calib)?;
        }
        Ok(FrameData {
            id: id.into(),
            left_image,
            right_image,
            calib,
            labels,
        })
    }

    pub fn is_stereo(&self) -> bool {
        self.right_image.is_some()
    }

    /// Labels of `class_name`, as boxes; malformed labels are skipped.
    pub fn boxes_of(&self, class_name: &str) -> Vec<OrientedBox3D> {
        self.labels
            .iter()
            .filter(|l| l.class_name == class_name)
            .filter_map(|l| l.to_box().ok())
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Difficulty {
    Easy,
    Moderate,
    Hard,
    Excluded,
}

impl Difficulty {
    pub const REGIMES: [Difficulty; 3] = [Difficulty::Easy, Difficulty::Moderate, Difficulty::Hard];

    pub fn name(self) -> &'static str {
        match self {
            Difficulty::Easy => "easy",
            Difficulty::Moderate => "moderate",
            Difficulty::Hard => "hard",
            Difficulty::Excluded => "excluded",
        }
    }

    /// Whether a label of difficulty `self` is counted when evaluating
    /// `regime`. Regimes are cumulative: hard includes moderate and easy.
    pub fn counts_in(self, regime: Difficulty) -> bool {
        self != Difficulty::Excluded && self <= regime
    }
}

/// KITTI box-height cutoffs refer to 375-pixel-tall images.
pub const REFERENCE_IMAGE_HEIGHT: f64 = 375.0;

/// Per-regime `(min height px, max occlusion, max truncation)` at the
/// reference image height.
pub const DIFFICULTY_LIMITS: [(f64, u8, f64); 3] =
    [(40.0, 0, 0.15), (25.0, 1, 0.30), (25.0, 2, 0.50)];

/// Minimum 2D box height of `regime` for an image `image_height` pixels tall.
pub fn min_height(regime: Difficulty, image_height: usize) -> f64 {
    let k = image_height as f64 / REFERENCE_IMAGE_HEIGHT;
    match regime {
        Difficulty::Easy => DIFFICULTY_LIMITS[0].0 * k,
        Difficulty::Moderate => DIFFICULTY_LIMITS[1].0 * k,
        Difficulty::Hard => DIFFICULTY_LIMITS[2].0 * k,
        Difficulty::Excluded => f64::INFINITY,
    }
}

/// Easiest regime whose height, occlusion and truncation limits the label
/// meets. Height cutoffs scale with the image height.
pub fn difficulty_of(label: &GroundTruthLabel, image_height: usize) -> Difficulty {
    let h = label.bbox_height();
    let k = image_height as f64 / REFERENCE_IMAGE_HEIGHT;
    for (regime, &(min_h, max_occ, max_trunc)) in
        Difficulty::REGIMES.iter().zip(DIFFICULTY_LIMITS.iter())
    {
        if h >= min_h * k && label.occlusion <= max_occ && label.truncation <= max_trunc {
            return *regime;
        }
    }
    Difficulty::Excluded
}

/// Bilinear resize of an image tensor with half-pixel centers.
pub fn resize_image(img: &Tensor4, height: usize, width: usize) -> Tensor4 {
    let (h, w) = (img.h(), img.w());
    if (h, w) == (height, width) {
        return img.clone();
    }
    let axis = |n_out: usize, n_in: usize| -> Vec<(usize, usize, f64)> {
        let s = n_in as f64 / n_out as f64;
        (0..n_out)
            .map(|o| {
                let src = ((o as f64 + 0.5) * s - 0.5).clamp(0.0, (n_in - 1) as f64);
                let i0 = (src.floor() as usize).min(n_in - 1);
                let i1 = (i0 + 1).min(n_in - 1);
                (i0, i1, src - i0 as f64)
            })
            .collect()
    };
    let ty = axis(height, h);
    let tx = axis(width, w);
    let mut out = Tensor4::zeros([img.n(), img.c(), height, width]);
    for p in 0..img.n() * img.c() {
        let src = &img.data()[p * h * w..(p + 1) * h * w];
        let dst = &mut out.data_mut()[p * height * width..(p + 1) * height * width];
        for (i, &(y0, y1, ly)) in ty.iter().enumerate() {
            for (j, &(x0, x1, lx)) in tx.iter().enumerate() {
                let top = src[y0 * w + x0] * (1.0 - lx) + src[y0 * w + x1] * lx;
                let bot = src[y1 * w + x0] * (1.0 - lx) + src[y1 * w + x1] * lx;
                dst[i * width + j] = top * (1.0 - ly) + bot * ly;
            }
        }
    }
    out
}

/// Resizes both views to `(height, width)` and rescales the calibration.
/// 3D labels are unchanged; 2D boxes are scaled with the image.
pub fn resize_frame(
    frame: &FrameData,
    height: usize,
    width: usize,
) -> Result<FrameData, DatasetError> {
    let (w0, h0) = frame.calib.image_size;
    if (w0, h0) == (width, height) {
        return Ok(frame.clone());
    }
    let (sx, sy) = (width as f64 / w0 as f64, height as f64 / h0 as f64);
    let labels = frame
        .labels
        .iter()
        .map(|l| {
            let b = l.bbox2d;
            GroundTruthLabel {
                bbox2d: [b[0] * sx, b[1] * sy, b[2] * sx, b[3] * sy],
                ..l.clone()
            }
        })
        .collect();
    FrameData::new(
        frame.id.clone(),
        resize_image(&frame.left_image, height, width),
        frame
            .right_image
            .as_ref()
            .map(|r| resize_image(r, height, width)),
        frame.calib.resized(width, height)?,
        labels,
    )
}
