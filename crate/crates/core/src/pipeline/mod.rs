//! The three-stage detector: front-view objectness, 3D anchor proposals and
//! proposal refinement, in monocular or stereo form.

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::anchor::{AnchorError, AnchorPoolParams, AnchorPrior};
use crate::box3d::BoxError;
use crate::dataset::DatasetError;
use crate::geometry::GeometryError;
use crate::tensor::TensorError;
use crate::tlnet::FusionMode;

mod model;
mod targets;
mod train;

pub use crate::eval::Detection;
pub use model::{Detector, RpnProposal};
pub use targets::{assign_rpn_targets, AnchorLabel, RpnTarget};
pub use train::{train, IterationRecord, NullObserver, Stage, TrainObserver};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PipelineError {
    #[error("no potential anchors: the front-view map has no cell above the threshold")]
    NoPotentialAnchors,
    #[error("training needs at least one frame")]
    DatasetEmpty,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("stereo detector given a frame without a right image")]
    MissingRightImage,
    #[error("image {width}x{height} is not a multiple of the backbone stride {stride}")]
    ImageStride {
        width: usize,
        height: usize,
        stride: usize,
    },
    #[error("training observer stopped the run: {0}")]
    Observer(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Anchor(#[from] AnchorError),
    #[error(transparent)]
    Box(#[from] BoxError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DetectorMode {
    Mono,
    Stereo,
}

/// Iterations of the four training stages: front view alone, then with
/// the proposal network, then with refinement (all Adam), then an SGD finish.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schedule {
    pub frontview: usize,
    pub rpn: usize,
    pub refine: usize,
    pub sgd: usize,
}

impl Schedule {
    /// The published 20K/40K/60K Adam + 20K SGD schedule.
    pub const FULL: Schedule = Schedule {
        frontview: 20_000,
        rpn: 40_000,
        refine: 60_000,
        sgd: 20_000,
    };

    /// One hundredth of [`Schedule::FULL`].
    pub const DESK: Schedule = Schedule {
        frontview: 200,
        rpn: 400,
        refine: 600,
        sgd: 200,
    };

    pub fn total(&self) -> usize {
        self.frontview + self.rpn + self.refine + self.sgd
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorConfig {
    pub mode: DetectorMode,
    pub fusion: FusionMode,
    /// Treat coherence scores as constants in the backward pass.
    pub detach_scores: bool,
    /// Classes to detect, with their anchor sizes. Empty means "derive from
    /// the training labels": every labelled class, sorted, at its mean size.
    pub priors: Vec<AnchorPrior>,
    pub anchors: AnchorPoolParams,
    /// `(height, width)` frames are resized to; `None` keeps them as is.
    pub input_size: Option<(usize, usize)>,
    /// Pixels enter the backbone as `(v - input_mean) / input_std`.
    pub input_mean: f64,
    pub input_std: f64,
    /// Output channels of the four backbone blocks.
    pub backbone_widths: [usize; 4],
    /// Pyramid level (stride `2^level`) RoI features are cropped from.
    pub roi_level: usize,
    pub rpn_channels: usize,
    pub roi_size: usize,
    pub head_hidden: usize,
    pub frontview_threshold: f64,
    pub rpn_positive_iou: f64,
    pub rpn_negative_iou: f64,
    /// Anchors sampled per training frame for the proposal loss.
    pub rpn_batch: usize,
    pub refine_positive_iou: f64,
    pub rpn_nms_iou: f64,
    pub final_nms_iou: f64,
    pub score_threshold: f64,
    /// Proposals kept after proposal NMS.
    pub top_k: usize,
    pub reg_weight: f64,
    pub smooth_l1_beta: f64,
    pub schedule: Schedule,
    pub learning_rate: f64,
    pub sgd_learning_rate: f64,
    pub l2_decay: f64,
    /// Stop training the front-view head after its own stage.
    pub freeze_frontview: bool,
    /// Emit parameters to the observer every this many iterations (0: never).
    pub checkpoint_every: usize,
    pub seed: u64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            mode: DetectorMode::Stereo,
            fusion: FusionMode::Reweight,
            detach_scores: false,
            priors: Vec::new(),
            anchors: AnchorPoolParams::default(),
            input_size: None,
            input_mean: 0.5,
            input_std: 0.25,
            backbone_widths: [16, 32, 64, 64],
            roi_level: 3,
            rpn_channels: 4,
            roi_size: 7,
            head_hidden: 256,
            frontview_threshold: 0.5,
            rpn_positive_iou: 0.5,
            rpn_negative_iou: 0.35,
            rpn_batch: 64,
            refine_positive_iou: 0.5,
            rpn_nms_iou: 0.8,
            final_nms_iou: 0.1,
            score_threshold: 0.05,
            top_k: 1024,
            reg_weight: 1.0,
            smooth_l1_beta: 1.0 / 9.0,
            schedule: Schedule::DESK,
            learning_rate: 1e-4,
            sgd_learning_rate: 1e-4,
            l2_decay: 5e-3,
            freeze_frontview: false,
            checkpoint_every: 0,
            seed: 0,
        }
    }
}

/// Total stride of the four-block backbone.
pub const BACKBONE_STRIDE: usize = 16;

impl DetectorConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: &str| Err(PipelineError::Config(m.into()));
        if self.top_k == 0 {
            return bad("top_k must be positive");
        }
        if self.backbone_widths.contains(&0) || self.rpn_channels == 0 || self.head_hidden == 0 {
            return bad("layer widths must be positive");
        }
        if !(1..=4).contains(&self.roi_level) {
            return bad("roi_level must be 1..=4");
        }
        if !(self.input_std > 0.0 && self.input_mean.is_finite()) {
            return bad("input_std must be positive");
        }
        if self.roi_size == 0 {
            return bad("roi_size must be positive");
        }
        if !(self.rpn_negative_iou <= self.rpn_positive_iou) {
            return bad("rpn_negative_iou exceeds rpn_positive_iou");
        }
        if !(self.learning_rate > 0.0 && self.sgd_learning_rate > 0.0 && self.l2_decay >= 0.0) {
            return bad("learning rates must be positive and decay non-negative");
        }
        if self
            .priors
            .iter()
            .any(|p| !(p.mean_size.h > 0.0 && p.mean_size.w > 0.0 && p.mean_size.l > 0.0))
        {
            return bad("prior sizes must be positive");
        }
        Ok(())
    }

    pub fn roi_stride(&self) -> usize {
        1 << self.roi_level
    }
}

#[cfg(test)]
mod tests;
