//! The evaluator against a brute-force re-implementation that re-matches
//! the detections above every score threshold from scratch.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tlnet_core::box3d::{iou_3d, iou_bev};
use tlnet_core::dataset::{Difficulty, GroundTruthLabel};
use tlnet_core::eval::{
    evaluate, standard_criteria, CriterionKind, Detection, EvalFrame, Interpolation, MatchCriterion,
};
use tlnet_core::{BoxSize, OrientedBox3D};

use crate::Outcome;

const FRAMES: usize = 20;
const IMAGE_HEIGHT: usize = 375;
const TOL: f64 = 1e-12;

struct Frame {
    gts: Vec<GroundTruthLabel>,
    dets: Vec<Detection>,
}

fn label(
    class: &str,
    b: &OrientedBox3D,
    bbox: [f64; 4],
    occlusion: u8,
    truncation: f64,
) -> GroundTruthLabel {
    GroundTruthLabel {
        class_name: class.into(),
        truncation,
        occlusion,
        alpha: 0.0,
        bbox2d: bbox,
        size: b.size,
        location: b.center,
        rotation_y: b.yaw,
        score: None,
    }
}

fn random_bbox(rng: &mut ChaCha8Rng, height: f64) -> [f64; 4] {
    let (u, v) = (rng.gen_range(0.0..1100.0), rng.gen_range(100.0..250.0));
    [u, v, u + 1.5 * height, v + height]
}

fn jittered(rng: &mut ChaCha8Rng, b: &OrientedBox3D, amount: f64) -> OrientedBox3D {
    let c = [
        b.center[0] + amount * rng.gen_range(-1.0..1.0),
        b.center[1] + 0.3 * amount * rng.gen_range(-1.0..1.0),
        b.center[2] + amount * rng.gen_range(-1.0..1.0),
    ];
    let s = b.size;
    let k = |rng: &mut ChaCha8Rng| 1.0 + 0.2 * amount * rng.gen_range(-1.0..1.0);
    let size = BoxSize::new(s.h * k(rng), s.w * k(rng), s.l * k(rng));
    OrientedBox3D::new(c, size, b.yaw + 0.3 * amount * rng.gen_range(-1.0..1.0)).unwrap()
}

fn fixture(seed: u64) -> Vec<Frame> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let classes = ["Car", "Car", "Car", "Car", "Van", "Pedestrian"];
    (0..FRAMES)
        .map(|_| {
            let mut gts = Vec::new();
            let mut dets = Vec::new();
            for _ in 0..rng.gen_range(0..7) {
                let class = classes[rng.gen_range(0..classes.len())];
                let b = OrientedBox3D::new(
                    [
                        rng.gen_range(-15.0..15.0),
                        rng.gen_range(1.4..1.9),
                        rng.gen_range(5.0..50.0),
                    ],
                    BoxSize::new(
                        rng.gen_range(1.3..1.8),
                        rng.gen_range(1.5..1.9),
                        rng.gen_range(3.5..4.5),
                    ),
                    rng.gen_range(-3.1..3.1),
                )
                .unwrap();
                let bbox = {
                    let h = rng.gen_range(15.0..90.0);
                    random_bbox(&mut rng, h)
                };
                gts.push(label(
                    class,
                    &b,
                    bbox,
                    rng.gen_range(0..4),
                    [0.0, 0.0, 0.2, 0.4, 0.6][rng.gen_range(0..5)],
                ));
                // Zero to two detections per object, with varying accuracy.
                for _ in 0..rng.gen_range(0..3) {
                    let mut bb = bbox;
                    bb[3] += rng.gen_range(-10.0..10.0);
                    dets.push(Detection {
                        class_name: if rng.gen_bool(0.9) {
                            class.into()
                        } else {
                            "Car".into()
                        },
                        box3d: {
                            let s = rng.gen_range(0.0..1.5);
                            jittered(&mut rng, &b, s)
                        },
                        // Coarse scores produce ties.
                        score: (rng.gen_range(0.0..1.0f64) * 20.0).round() / 20.0,
                        bbox2d: bb,
                    });
                }
            }
            if rng.gen_bool(0.5) {
                let b = OrientedBox3D::new([0.0, -1.0, -1.0], BoxSize::new(1.0, 1.0, 1.0), 0.0)
                    .unwrap();
                let dc = random_bbox(&mut rng, 40.0);
                let mut l = label("DontCare", &b, dc, 3, -1.0);
                l.location = [-1000.0, -1000.0, -1000.0];
                gts.push(l);
                // A false positive inside the don't-care region.
                let mut bb = dc;
                bb[0] += 2.0;
                dets.push(Detection {
                    class_name: "Car".into(),
                    box3d: OrientedBox3D::new([30.0, 1.6, 60.0], BoxSize::new(1.5, 1.6, 3.9), 0.0)
                        .unwrap(),
                    score: rng.gen_range(0.0..1.0),
                    bbox2d: bb,
                });
            }
            for _ in 0..rng.gen_range(0..3) {
                let b = OrientedBox3D::new(
                    [rng.gen_range(-15.0..15.0), 1.6, rng.gen_range(5.0..50.0)],
                    BoxSize::new(1.5, 1.6, 3.9),
                    rng.gen_range(-3.1..3.1),
                )
                .unwrap();
                dets.push(Detection {
                    class_name: "Car".into(),
                    box3d: b,
                    score: rng.gen_range(0.0..1.0),
                    bbox2d: {
                        let h = rng.gen_range(15.0..90.0);
                        random_bbox(&mut rng, h)
                    },
                });
            }
            Frame { gts, dets }
        })
        .collect()
}

// ---- brute-force reference ----

fn regime_rank(r: Difficulty) -> usize {
    match r {
        Difficulty::Easy => 0,
        Difficulty::Moderate => 1,
        Difficulty::Hard => 2,
        Difficulty::Excluded => 3,
    }
}

/// Easiest regime the label qualifies for (3: none).
fn label_rank(l: &GroundTruthLabel) -> usize {
    let k = IMAGE_HEIGHT as f64 / 375.0;
    let h = l.bbox2d[3] - l.bbox2d[1];
    let limits = [(40.0, 0u8, 0.15), (25.0, 1, 0.30), (25.0, 2, 0.50)];
    limits
        .iter()
        .position(|&(mh, occ, tr)| h >= mh * k && l.occlusion <= occ && l.truncation <= tr)
        .unwrap_or(3)
}

fn min_box_height(r: Difficulty) -> f64 {
    [40.0, 25.0, 25.0][regime_rank(r)] * IMAGE_HEIGHT as f64 / 375.0
}

fn iou_2d(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let w = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let h = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let i = w * h;
    let area = |r: &[f64; 4]| (r[2] - r[0]) * (r[3] - r[1]);
    let u = area(a) + area(b) - i;
    if u > 0.0 {
        i / u
    } else {
        0.0
    }
}

/// Larger is better; `None` when the pair does not match.
fn quality(c: &MatchCriterion, d: &OrientedBox3D, g: &OrientedBox3D) -> Option<f64> {
    let centroid = |b: &OrientedBox3D| [b.center[0], b.center[1] - b.size.h / 2.0, b.center[2]];
    match c.kind {
        CriterionKind::Iou3d => Some(iou_3d(d, g)).filter(|v| *v >= c.threshold),
        CriterionKind::IouBev => Some(iou_bev(d, g)).filter(|v| *v >= c.threshold),
        CriterionKind::Distance | CriterionKind::DistanceBev => {
            let (p, q) = (centroid(d), centroid(g));
            let dy = if c.kind == CriterionKind::Distance {
                p[1] - q[1]
            } else {
                0.0
            };
            let dist = ((p[0] - q[0]).powi(2) + dy.powi(2) + (p[2] - q[2]).powi(2)).sqrt();
            (dist < c.threshold).then_some(-dist)
        }
    }
}

fn sorted_candidates<'a>(f: &'a Frame, class: &str, regime: Difficulty) -> Vec<&'a Detection> {
    let mut v: Vec<&Detection> = f
        .dets
        .iter()
        .filter(|d| d.class_name == class && d.bbox2d[3] - d.bbox2d[1] >= min_box_height(regime))
        .collect();
    let key = |d: &Detection| {
        [
            d.box3d.center[0],
            d.box3d.center[1],
            d.box3d.center[2],
            d.box3d.yaw,
        ]
    };
    v.sort_by(|a, b| {
        b.score.total_cmp(&a.score).then_with(|| {
            let (ka, kb) = (key(a), key(b));
            (0..4)
                .map(|i| ka[i].total_cmp(&kb[i]))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        })
    });
    v
}

/// `(tp, fp)` for one frame, matching only detections scoring at least `t`.
fn count_at(
    f: &Frame,
    class: &str,
    c: &MatchCriterion,
    regime: Difficulty,
    t: f64,
) -> (usize, usize) {
    let neighbor = |o: &str| {
        matches!(
            (class, o),
            ("Car", "Van") | ("Pedestrian", "Person_sitting")
        )
    };
    let mut counted = Vec::new();
    let mut other = Vec::new();
    for g in f.gts.iter().filter(|g| g.class_name != "DontCare") {
        let b = OrientedBox3D::new(g.location, g.size, g.rotation_y).unwrap();
        if g.class_name == class && label_rank(g) <= regime_rank(regime) {
            counted.push(b);
        } else if g.class_name == class || neighbor(&g.class_name) {
            other.push(b);
        }
    }
    let dont_care: Vec<[f64; 4]> = f
        .gts
        .iter()
        .filter(|g| g.class_name == "DontCare")
        .map(|g| g.bbox2d)
        .collect();
    let mut used_c = vec![false; counted.len()];
    let mut used_o = vec![false; other.len()];
    let (mut tp, mut fp) = (0, 0);
    for d in sorted_candidates(f, class, regime)
        .into_iter()
        .filter(|d| d.score >= t)
    {
        let pick = |pool: &[OrientedBox3D], used: &[bool]| {
            let mut best: Option<(usize, f64)> = None;
            for (i, g) in pool.iter().enumerate() {
                if used[i] {
                    continue;
                }
                if let Some(q) = quality(c, &d.box3d, g) {
                    if best.is_none() || q > best.unwrap().1 {
                        best = Some((i, q));
                    }
                }
            }
            best.map(|b| b.0)
        };
        if let Some(i) = pick(&counted, &used_c) {
            used_c[i] = true;
            tp += 1;
        } else if let Some(i) = pick(&other, &used_o) {
            used_o[i] = true;
        } else if !dont_care.iter().any(|r| iou_2d(r, &d.bbox2d) >= 0.5) {
            fp += 1;
        }
    }
    (tp, fp)
}

fn brute_force_ap(
    frames: &[Frame],
    class: &str,
    c: &MatchCriterion,
    regime: Difficulty,
    interp: Interpolation,
) -> f64 {
    let total: usize = frames
        .iter()
        .flat_map(|f| f.gts.iter())
        .filter(|g| g.class_name == class && label_rank(g) <= regime_rank(regime))
        .count();
    if total == 0 {
        return 0.0;
    }
    let mut thresholds: Vec<f64> = frames
        .iter()
        .flat_map(|f| f.dets.iter().map(|d| d.score))
        .collect();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let mut points = Vec::new();
    for &t in &thresholds {
        let (tp, fp) = frames
            .iter()
            .map(|f| count_at(f, class, c, regime, t))
            .fold((0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
        if tp + fp > 0 {
            points.push((tp as f64 / total as f64, tp as f64 / (tp + fp) as f64));
        }
    }
    let levels: Vec<f64> = match interp {
        Interpolation::ElevenPoint => (0..=10).map(|k| k as f64 / 10.0).collect(),
        Interpolation::FortyPoint => (1..=40).map(|k| k as f64 / 40.0).collect(),
    };
    let sum: f64 = levels
        .iter()
        .map(|&r| {
            points
                .iter()
                .filter(|p| p.0 >= r)
                .map(|p| p.1)
                .fold(0.0, f64::max)
        })
        .sum();
    sum / levels.len() as f64
}

fn monotone(get: impl Fn(CriterionKind, f64, Difficulty) -> f64) -> Result<(), String> {
    let ladders = [
        (CriterionKind::Iou3d, [0.7, 0.5, 0.3]),
        (CriterionKind::IouBev, [0.7, 0.5, 0.3]),
        (CriterionKind::Distance, [0.5, 1.0, 2.0]),
    ];
    for (kind, steps) in ladders {
        for regime in Difficulty::REGIMES {
            let v: Vec<f64> = steps.iter().map(|&t| get(kind, t, regime)).collect();
            if !(v[0] <= v[1] && v[1] <= v[2]) {
                return Err(format!("{kind:?} {} not monotone: {v:?}", regime.name()));
            }
        }
    }
    Ok(())
}

pub fn run() -> Outcome {
    let mut worst = 0.0f64;
    let mut checked = 0;
    let mut nonzero = 0;
    for (seed, interp) in [
        (1u64, Interpolation::ElevenPoint),
        (2, Interpolation::FortyPoint),
        (3, Interpolation::ElevenPoint),
    ] {
        let frames = fixture(seed);
        let ev: Vec<EvalFrame<'_>> = frames
            .iter()
            .map(|f| EvalFrame {
                gts: &f.gts,
                dets: &f.dets,
                image_height: IMAGE_HEIGHT,
            })
            .collect();
        let criteria = standard_criteria();
        let report = evaluate(&ev, "Car", &criteria, interp);
        for c in &criteria {
            for regime in Difficulty::REGIMES {
                let got = report.ap(c.kind, c.threshold, regime).unwrap();
                let want = brute_force_ap(&frames, "Car", c, regime, interp);
                worst = worst.max((got - want).abs());
                checked += 1;
                nonzero += (want > 0.0) as usize;
            }
        }
        if let Err(e) = monotone(|k, t, r| report.ap(k, t, r).unwrap()) {
            return Outcome::new(false, format!("fixture {seed}: {e}"));
        }
    }
    Outcome::new(
        worst <= TOL && nonzero > checked / 2,
        format!("{checked} AP values over 3 fixtures of {FRAMES} frames ({nonzero} non-zero), max |eval - brute force| {worst:.1e}, tolerance {TOL}; AP monotone in threshold"),
    )
}
