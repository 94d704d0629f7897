//! Stereo 3D object detection by anchor triangulation.
//!
//! The crate is `no_std` (it needs `alloc`) and holds every algorithm of the
//! detector: the pinhole/stereo camera model, oriented 3D boxes with rotated
//! IoU and NMS, the 3D anchor pool, a small reverse-mode autodiff engine, the
//! coherence-reweighted stereo fusion block, the three-stage detector, a
//! synthetic stereo scene renderer and KITTI-style average precision.
//!
//! File formats, directory layouts and the command-line driver live in the
//! `tlnet` companion crate.
#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod anchor;
pub mod box3d;
pub mod dataset;
pub mod eval;
pub mod geometry;
pub mod gradsuite;
pub mod pipeline;
pub mod tensor;
pub mod tlnet;

mod polygon;

pub use anchor::{Anchor, AnchorPrior, FrontViewGrid, OffsetTarget};
pub use box3d::{BoxSize, OrientedBox3D, Roi2D};
pub use geometry::{ProjectionMatrix, StereoCalibration, Vec3};
pub use tensor::Tensor4;
