//! Rotated IoU against a Monte-Carlo volume estimate and closed forms.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tlnet_core::box3d::{bev_intersection_area, iou_3d, iou_bev};
use tlnet_core::{BoxSize, OrientedBox3D};

use crate::Outcome;

const PAIRS: usize = 1000;
const SAMPLES: usize = 1_000_000;
const MC_TOL: f64 = 1e-2;
const CLOSED_TOL: f64 = 5e-3;

/// The box as plain numbers, so the oracle never calls into the library.
struct Solid {
    c: [f64; 3],
    half_l: f64,
    half_w: f64,
    h: f64,
    cos: f64,
    sin: f64,
}

impl Solid {
    fn of(b: &OrientedBox3D) -> Self {
        Solid {
            c: b.center,
            half_l: b.size.l / 2.0,
            half_w: b.size.w / 2.0,
            h: b.size.h,
            cos: b.yaw.cos(),
            sin: b.yaw.sin(),
        }
    }

    /// Rotation about the downward y axis: local x (length) maps to
    /// `(cos, -sin)` in `(x, z)`.
    fn footprint_has(&self, x: f64, z: f64) -> bool {
        let (dx, dz) = (x - self.c[0], z - self.c[2]);
        let along = self.cos * dx - self.sin * dz;
        let across = self.sin * dx + self.cos * dz;
        along.abs() <= self.half_l && across.abs() <= self.half_w
    }

    fn spans(&self, y: f64) -> bool {
        y <= self.c[1] && y >= self.c[1] - self.h
    }

    fn radius(&self) -> f64 {
        self.half_l.hypot(self.half_w)
    }
}

fn random_box(rng: &mut ChaCha8Rng, near: Option<&OrientedBox3D>) -> OrientedBox3D {
    let size = BoxSize::new(
        rng.gen_range(0.5..3.0),
        rng.gen_range(0.5..3.0),
        rng.gen_range(0.5..6.0),
    );
    let c = match near {
        Some(b) => [
            b.center[0] + rng.gen_range(-2.0..2.0),
            b.center[1] + rng.gen_range(-1.0..1.0),
            b.center[2] + rng.gen_range(-2.0..2.0),
        ],
        None => [
            rng.gen_range(-10.0..10.0),
            rng.gen_range(0.0..3.0),
            rng.gen_range(5.0..40.0),
        ],
    };
    OrientedBox3D::new(c, size, rng.gen_range(-3.2..3.2)).unwrap()
}

/// `(iou_bev, iou_3d)` estimated from uniform samples in a region that
/// contains both boxes.
fn monte_carlo(a: &OrientedBox3D, b: &OrientedBox3D, rng: &mut ChaCha8Rng) -> (f64, f64) {
    let (sa, sb) = (Solid::of(a), Solid::of(b));
    let lo = |k: usize| (sa.c[k] - sa.radius()).min(sb.c[k] - sb.radius());
    let hi = |k: usize| (sa.c[k] + sa.radius()).max(sb.c[k] + sb.radius());
    let (x0, x1, z0, z1) = (lo(0), hi(0), lo(2), hi(2));
    let y0 = (sa.c[1] - sa.h).min(sb.c[1] - sb.h);
    let y1 = sa.c[1].max(sb.c[1]);
    let (mut in_a, mut in_b, mut in_both) = (0u64, 0u64, 0u64);
    let (mut va, mut vb, mut v_both) = (0u64, 0u64, 0u64);
    for _ in 0..SAMPLES {
        let x = rng.gen_range(x0..x1);
        let z = rng.gen_range(z0..z1);
        let y = rng.gen_range(y0..y1);
        let (fa, fb) = (sa.footprint_has(x, z), sb.footprint_has(x, z));
        in_a += fa as u64;
        in_b += fb as u64;
        in_both += (fa && fb) as u64;
        let (ga, gb) = (fa && sa.spans(y), fb && sb.spans(y));
        va += ga as u64;
        vb += gb as u64;
        v_both += (ga && gb) as u64;
    }
    let ratio = |i: u64, p: u64, q: u64| {
        if p + q - i == 0 {
            0.0
        } else {
            i as f64 / (p + q - i) as f64
        }
    };
    (ratio(in_both, in_a, in_b), ratio(v_both, va, vb))
}

fn closed_forms() -> Result<(), String> {
    let unit = |x: f64, z: f64, yaw: f64| {
        OrientedBox3D::new([x, 1.0, z], BoxSize::new(1.0, 1.0, 1.0), yaw).unwrap()
    };
    let a = unit(0.0, 10.0, 0.0);
    let mut checks = vec![
        ("identical bev", iou_bev(&a, &a), 1.0),
        ("identical 3d", iou_3d(&a, &a), 1.0),
        // Half-overlapping unit squares: 0.5 / 1.5.
        ("half shift", iou_bev(&a, &unit(0.5, 10.0, 0.0)), 1.0 / 3.0),
        (
            "half shift 3d",
            iou_3d(&a, &unit(0.5, 10.0, 0.0)),
            1.0 / 3.0,
        ),
    ];
    // A unit square and itself turned 45 degrees meet in a regular octagon.
    let r = unit(0.0, 10.0, std::f64::consts::FRAC_PI_4);
    let octagon = 2.0 * (2f64.sqrt() - 1.0);
    checks.push((
        "rotated square area",
        bev_intersection_area(&a, &r),
        octagon,
    ));
    checks.push((
        "rotated square iou",
        iou_bev(&a, &r),
        octagon / (2.0 - octagon),
    ));
    for (name, got, want) in checks {
        if (got - want).abs() > CLOSED_TOL {
            return Err(format!("{name}: {got} vs {want}"));
        }
    }
    Ok(())
}

pub fn run() -> Outcome {
    if let Err(e) = closed_forms() {
        return Outcome::new(false, e);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0x6765_6f6d);
    let (mut worst_bev, mut worst_3d) = (0.0f64, 0.0f64);
    let mut overlapping = 0;
    for _ in 0..PAIRS {
        let a = random_box(&mut rng, None);
        let b = random_box(&mut rng, Some(&a));
        let (mc_bev, mc_3d) = monte_carlo(&a, &b, &mut rng);
        let (bev, v) = (iou_bev(&a, &b), iou_3d(&a, &b));
        overlapping += (v > 0.0) as usize;
        worst_bev = worst_bev.max((bev - mc_bev).abs());
        worst_3d = worst_3d.max((v - mc_3d).abs());
    }
    Outcome::new(
        worst_bev <= MC_TOL && worst_3d <= MC_TOL,
        format!(
            "closed forms exact to {CLOSED_TOL}; {PAIRS} pairs ({overlapping} overlapping in 3D) x {SAMPLES} samples: max |bev - mc| {worst_bev:.2e}, max |3d - mc| {worst_3d:.2e}, tolerance {MC_TOL}"
        ),
    )
}
