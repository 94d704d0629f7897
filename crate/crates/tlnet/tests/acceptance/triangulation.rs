//! Left/right RoI offsets of projected anchors against the stereo
//! disparity `f·b/z`.

use tlnet_core::anchor::{generate_anchor_pool, AnchorPoolParams, AnchorPrior, FrontViewGrid};
use tlnet_core::box3d::project_box_unclipped;
use tlnet_core::geometry::{project, RigParams};
use tlnet_core::{BoxSize, StereoCalibration};

use crate::Outcome;

const ROI_TOL: f64 = 0.05;
const POINT_TOL: f64 = 1e-6;
const DEPTHS: (f64, f64) = (10.0, 70.0);

fn rigs() -> Vec<(&'static str, RigParams)> {
    vec![
        ("kitti-like", RigParams::centered(721.5377, 0.54, 1242, 375)),
        ("desk", RigParams::centered(200.0, 0.54, 320, 96)),
        ("wide-baseline", RigParams::centered(400.0, 1.2, 640, 192)),
    ]
}

struct Stats {
    anchors: usize,
    worst_roi: f64,
    worst_roi_at: (f64, f64),
    /// Smallest depth beyond which every anchor is within tolerance.
    within_from: f64,
    worst_point: f64,
}

fn measure(calib: &StereoCalibration) -> Stats {
    let grid = FrontViewGrid::for_image(calib.width(), calib.height(), 16).unwrap();
    let priors = [AnchorPrior {
        class_name: "Car".into(),
        mean_size: BoxSize::new(1.52, 1.63, 3.88),
    }];
    let params = AnchorPoolParams {
        interval_m: 1.0,
        depth_range: (DEPTHS.0 - 1e-9, DEPTHS.1),
        ground_y: 1.65,
    };
    let pool = generate_anchor_pool(calib, &grid, &params, &priors).unwrap();
    let mut s = Stats {
        anchors: 0,
        worst_roi: 0.0,
        worst_roi_at: (0.0, 0.0),
        within_from: DEPTHS.0,
        worst_point: 0.0,
    };
    let (w, h) = (calib.width() as f64, calib.height() as f64);
    for a in &pool {
        let b = a.box3d;
        let z = b.centroid()[2];
        let expected = calib.focal_px * calib.baseline_m / z;

        let (pl, pr) = (
            project(&calib.p_left, &b.centroid()).unwrap(),
            project(&calib.p_right, &b.centroid()).unwrap(),
        );
        s.worst_point = s.worst_point.max(((pl[0] - pr[0]) - expected).abs());
        if (pl[1] - pr[1]).abs() > POINT_TOL {
            s.worst_point = f64::INFINITY;
        }

        let (l, r) = (
            project_box_unclipped(&calib.p_left, &b).unwrap(),
            project_box_unclipped(&calib.p_right, &b).unwrap(),
        );
        // Only RoIs entirely inside both images, so clipping plays no part.
        let inside = |q: &tlnet_core::Roi2D| {
            q.min[0] >= 0.0 && q.min[1] >= 0.0 && q.max[0] <= w && q.max[1] <= h
        };
        if !(inside(&l) && inside(&r)) {
            continue;
        }
        s.anchors += 1;
        let offset = l.center()[0] - r.center()[0];
        let err = (offset / expected - 1.0).abs();
        if err > s.worst_roi {
            s.worst_roi = err;
            s.worst_roi_at = (z, b.yaw);
        }
        if err > ROI_TOL {
            s.within_from = s.within_from.max(z + 1.0);
        }
    }
    s
}

pub fn run() -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for (name, rig) in rigs() {
        let calib = StereoCalibration::from_rig(&rig).unwrap();
        let s = measure(&calib);
        let ok = s.anchors > 0 && s.worst_roi <= ROI_TOL && s.worst_point <= POINT_TOL;
        pass &= ok;
        parts.push(format!(
            "{name}: {} anchors, worst RoI offset error {:.1}% (z {:.0} m, yaw {:.2}), within {:.0}% from z >= {:.0} m, point disparity error {:.1e}",
            s.anchors,
            100.0 * s.worst_roi,
            s.worst_roi_at.0,
            s.worst_roi_at.1,
            100.0 * ROI_TOL,
            s.within_from,
            s.worst_point
        ));
    }
    Outcome::new(pass, parts.join("; "))
}
