use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::render::{render_view, SceneObject, Shading};
use super::{DatasetError, FrameData, GroundTruthLabel};
use crate::box3d::{bev_intersection_area, project_box_unclipped, BoxSize, OrientedBox3D};
use crate::geometry::{in_frustum, RigParams, StereoCalibration};
use crate::tensor::name_seed;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum YawDistribution {
    Uniform,
    Fixed(f64),
}

/// Recipe for a family of synthetic stereo frames.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSpec {
    pub seed: u64,
    pub class_name: String,
    /// Inclusive range of objects per frame.
    pub objects: (usize, usize),
    pub mean_size: BoxSize,
    /// Each of `h, w, l` is scaled by `1 + U(−j, j)`.
    pub size_jitter: f64,
    pub yaw: YawDistribution,
    pub x_range: (f64, f64),
    pub z_range: (f64, f64),
    pub ground_y: f64,
    /// Each box's bottom sits at `ground_y + U(−j, j)`.
    pub ground_jitter: f64,
    pub rig: RigParams,
    pub shading: Shading,
    /// Placement attempts per frame before giving up.
    pub max_attempts: usize,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            seed: 0,
            class_name: "Car".into(),
            objects: (2, 5),
            mean_size: BoxSize::new(1.52, 1.63, 3.88),
            size_jitter: 0.1,
            yaw: YawDistribution::Uniform,
            x_range: (-15.0, 15.0),
            z_range: (8.0, 35.0),
            ground_y: 1.65,
            ground_jitter: 0.3,
            rig: RigParams::centered(200.0, 0.54, 320, 96),
            shading: Shading::default(),
            max_attempts: 500,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<(), DatasetError> {
        if self.objects.0 > self.objects.1 {
            return Err(DatasetError::BadSpec("object count range is empty"));
        }
        if !(self.z_range.0 > 0.0 && self.z_range.1 > self.z_range.0) {
            return Err(DatasetError::BadSpec(
                "depth range must be positive and non-empty",
            ));
        }
        if !(self.x_range.1 > self.x_range.0) {
            return Err(DatasetError::BadSpec("lateral range is empty"));
        }
        if !(self.size_jitter >= 0.0 && self.size_jitter < 1.0) || !(self.ground_jitter >= 0.0) {
            return Err(DatasetError::BadSpec("jitter out of range"));
        }
        Ok(())
    }
}

/// Every box corner must be at least this far in front of the cameras.
const MIN_CORNER_DEPTH: f64 = 1.0;

/// Seed of frame `index` of a dataset generated from `base`.
pub fn scene_seed(base: u64, index: usize) -> u64 {
    name_seed(base, &format!("scene/{index}"))
}

fn jitter(rng: &mut ChaCha8Rng, j: f64) -> f64 {
    if j > 0.0 {
        rng.gen_range(-j..j)
    } else {
        0.0
    }
}

fn sample_box(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Option<OrientedBox3D> {
    let m = spec.mean_size;
    let size = BoxSize::new(
        m.h * (1.0 + jitter(rng, spec.size_jitter)),
        m.w * (1.0 + jitter(rng, spec.size_jitter)),
        m.l * (1.0 + jitter(rng, spec.size_jitter)),
    );
    let yaw = match spec.yaw {
        YawDistribution::Uniform => rng.gen_range(-core::f64::consts::PI..core::f64::consts::PI),
        YawDistribution::Fixed(y) => y,
    };
    let x = rng.gen_range(spec.x_range.0..spec.x_range.1);
    let z = rng.gen_range(spec.z_range.0..spec.z_range.1);
    let y = spec.ground_y + jitter(rng, spec.ground_jitter);
    OrientedBox3D::new([x, y, z], size, yaw).ok()
}

/// Renders frame `index` of the dataset described by `spec`.
pub fn generate_scene(spec: &SceneSpec, index: usize) -> Result<FrameData, DatasetError> {
    spec.validate()?;
    let calib = StereoCalibration::from_rig(&spec.rig)?;
    let mut rng = ChaCha8Rng::seed_from_u64(scene_seed(spec.seed, index));
    let wanted = rng.gen_range(spec.objects.0..=spec.objects.1);
    let mut boxes: Vec<OrientedBox3D> = Vec::with_capacity(wanted);
    let mut attempts = 0;
    while boxes.len() < wanted {
        if attempts == spec.max_attempts {
            return Err(DatasetError::PlacementFailure { wanted, attempts });
        }
        attempts += 1;
        let Some(b) = sample_box(spec, &mut rng) else {
            continue;
        };
        let depth_ok = b.corners().iter().all(|c| c[2] > MIN_CORNER_DEPTH);
        if !depth_ok || !in_frustum(&calib, &b.centroid(), (0.0, f64::INFINITY)) {
            continue;
        }
        if boxes.iter().any(|o| bev_intersection_area(o, &b) > 0.0) {
            continue;
        }
        boxes.push(b);
    }

    let objects: Vec<SceneObject> = boxes
        .iter()
        .map(|b| SceneObject {
            box3d: *b,
            albedo: [
                rng.gen_range(0.25..0.95),
                rng.gen_range(0.25..0.95),
                rng.gen_range(0.25..0.95),
            ],
            texture_seed: rng.gen(),
        })
        .collect();

    let size = calib.image_size;
    let left = render_view(&calib.p_left, size, spec.ground_y, &objects, &spec.shading);
    let right = render_view(&calib.p_right, size, spec.ground_y, &objects, &spec.shading);

    let mut labels = Vec::with_capacity(boxes.len());
    for (k, b) in boxes.iter().enumerate() {
        let full = project_box_unclipped(&calib.p_left, b)?;
        let clipped = full.clipped(size.0 as f64, size.1 as f64);
        let truncation = if full.area() > 0.0 {
            (1.0 - clipped.area() / full.area()).clamp(0.0, 1.0)
        } else {
            1.0
        };
        let visible = left.ids.iter().filter(|&&id| id == k as i32).count();
        let total = left.silhouette_px[k];
        let occlusion = if total == 0 {
            3
        } else {
            let hidden = 1.0 - visible as f64 / total as f64;
            if hidden <= 0.0 {
                0
            } else if hidden < 0.3 {
                1
            } else if hidden < 0.7 {
                2
            } else {
                3
            }
        };
        labels.push(GroundTruthLabel::from_box(
            &spec.class_name,
            b,
            &calib,
            truncation,
            occlusion,
            None,
        )?);
    }

    FrameData::new(
        format!("{index:06}"),
        left.image,
        Some(right.image),
        calib,
        labels,
    )
}
