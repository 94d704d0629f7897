//! Average precision under 3D IoU, BEV IoU and center-distance matching,
//! per difficulty regime, in the style of the KITTI object benchmark.

use alloc::string::String;
use alloc::vec::Vec;
use core::cmp::Ordering;

#[allow(unused_imports)]
use num_traits::Float;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::box3d::{iou_3d, iou_bev, OrientedBox3D, Roi2D};
use crate::dataset::{difficulty_of, min_height, Difficulty, GroundTruthLabel};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("IoU threshold must be in (0, 1], got {0}")]
    BadIou(f64),
    #[error("distance threshold must be positive, got {0}")]
    BadDistance(f64),
}

/// A scored 3D detection with its left-image 2D box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub class_name: String,
    pub box3d: OrientedBox3D,
    pub score: f64,
    /// `[left, top, right, bottom]` pixels.
    pub bbox2d: [f64; 4],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CriterionKind {
    Iou3d,
    IouBev,
    /// Euclidean distance between box centroids, meters.
    Distance,
    /// Distance between centroids in the ground plane only.
    DistanceBev,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchCriterion {
    pub kind: CriterionKind,
    pub threshold: f64,
}

impl MatchCriterion {
    pub fn new(kind: CriterionKind, threshold: f64) -> Result<Self, EvalError> {
        match kind {
            CriterionKind::Iou3d | CriterionKind::IouBev
                if !(threshold > 0.0 && threshold <= 1.0) =>
            {
                Err(EvalError::BadIou(threshold))
            }
            CriterionKind::Distance | CriterionKind::DistanceBev if !(threshold > 0.0) => {
                Err(EvalError::BadDistance(threshold))
            }
            _ => Ok(MatchCriterion { kind, threshold }),
        }
    }

    pub fn name(&self) -> &'static str {
        match self.kind {
            CriterionKind::Iou3d => "iou3d",
            CriterionKind::IouBev => "ioubev",
            CriterionKind::Distance => "loc",
            CriterionKind::DistanceBev => "locbev",
        }
    }

    /// Match quality, larger is better; `None` when the pair does not
    /// satisfy the criterion.
    pub fn quality(&self, det: &OrientedBox3D, gt: &OrientedBox3D) -> Option<f64> {
        match self.kind {
            CriterionKind::Iou3d | CriterionKind::IouBev => {
                let iou = if self.kind == CriterionKind::Iou3d {
                    iou_3d(det, gt)
                } else {
                    iou_bev(det, gt)
                };
                (iou >= self.threshold).then_some(iou)
            }
            CriterionKind::Distance | CriterionKind::DistanceBev => {
                let (a, b) = (det.centroid(), gt.centroid());
                let dy = if self.kind == CriterionKind::Distance {
                    a[1] - b[1]
                } else {
                    0.0
                };
                let d = ((a[0] - b[0]).powi(2) + dy * dy + (a[2] - b[2]).powi(2)).sqrt();
                (d < self.threshold).then_some(-d)
            }
        }
    }
}

/// The nine criteria of the benchmark tables: 3D IoU and BEV IoU at
/// 0.3/0.5/0.7, and 3D center distance under 2/1/0.5 m.
pub fn standard_criteria() -> [MatchCriterion; 9] {
    let c = |kind, threshold| MatchCriterion { kind, threshold };
    [
        c(CriterionKind::Iou3d, 0.3),
        c(CriterionKind::Iou3d, 0.5),
        c(CriterionKind::Iou3d, 0.7),
        c(CriterionKind::IouBev, 0.3),
        c(CriterionKind::IouBev, 0.5),
        c(CriterionKind::IouBev, 0.7),
        c(CriterionKind::Distance, 2.0),
        c(CriterionKind::Distance, 1.0),
        c(CriterionKind::Distance, 0.5),
    ]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Interpolation {
    /// Recall levels 0, 0.1, …, 1.
    ElevenPoint,
    /// Recall levels 1/40, 2/40, …, 1.
    FortyPoint,
}

/// Outcome of one detection after matching.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatchFlag {
    TruePositive,
    FalsePositive,
    /// Matched a don't-care object or region; neither tp nor fp.
    Ignored,
}

/// Classes that are not penalized as false positives for the target class.
fn neighbor_class(target: &str, other: &str) -> bool {
    matches!(
        (target, other),
        ("Car", "Van") | ("Pedestrian", "Person_sitting")
    )
}

/// Descending score; ties broken by box parameters so the result does not
/// depend on input order.
fn det_order(a: &Detection, b: &Detection) -> Ordering {
    b.score.total_cmp(&a.score).then_with(|| {
        let ka = [
            a.box3d.center[0],
            a.box3d.center[1],
            a.box3d.center[2],
            a.box3d.yaw,
        ];
        let kb = [
            b.box3d.center[0],
            b.box3d.center[1],
            b.box3d.center[2],
            b.box3d.yaw,
        ];
        ka.iter()
            .zip(kb.iter())
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(Ordering::Equal)
    })
}

/// Per-frame matching result: `(score, flag)` per considered detection and
/// the number of ground truths counted in the regime.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameMatch {
    pub flags: Vec<(f64, MatchFlag)>,
    pub gt_count: usize,
}

/// Greedy one-to-one matching of one frame's detections of `class_name`.
///
/// Detections are visited by descending score; each takes the best unmatched
/// counted ground truth meeting `criterion`, else the best unmatched
/// ground truth of the class that the regime excludes (the detection is then
/// ignored). Unmatched detections overlapping a `DontCare` box at 2D IoU
/// ≥ 0.5 are ignored, as are detections of a neighboring class's object and
/// detections shorter than the regime's minimum box height.
pub fn match_frame(
    dets: &[Detection],
    gts: &[GroundTruthLabel],
    class_name: &str,
    criterion: &MatchCriterion,
    regime: Difficulty,
    image_height: usize,
) -> FrameMatch {
    let mut counted = Vec::new();
    let mut excluded = Vec::new();
    let mut dont_care = Vec::new();
    for g in gts {
        if g.is_dont_care() {
            dont_care.push(Roi2D::new(
                [g.bbox2d[0], g.bbox2d[1]],
                [g.bbox2d[2], g.bbox2d[3]],
            ));
            continue;
        }
        let Ok(b) = g.to_box() else { continue };
        if g.class_name == class_name {
            if difficulty_of(g, image_height).counts_in(regime) {
                counted.push(b);
            } else {
                excluded.push(b);
            }
        } else if neighbor_class(class_name, &g.class_name) {
            excluded.push(b);
        }
    }
    let min_h = min_height(regime, image_height);
    let mut mine: Vec<&Detection> = dets
        .iter()
        .filter(|d| d.class_name == class_name && d.bbox2d[3] - d.bbox2d[1] >= min_h)
        .collect();
    mine.sort_by(|a, b| det_order(a, b));

    let best = |pool: &[OrientedBox3D], taken: &[bool], d: &OrientedBox3D| -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for (i, g) in pool.iter().enumerate() {
            if taken[i] {
                continue;
            }
            if let Some(q) = criterion.quality(d, g) {
                if best.map_or(true, |(_, bq)| q > bq) {
                    best = Some((i, q));
                }
            }
        }
        best.map(|(i, _)| i)
    };
    let mut taken_c = alloc::vec![false; counted.len()];
    let mut taken_e = alloc::vec![false; excluded.len()];
    let mut flags = Vec::with_capacity(mine.len());
    for d in mine {
        let flag = if let Some(i) = best(&counted, &taken_c, &d.box3d) {
            taken_c[i] = true;
            MatchFlag::TruePositive
        } else if let Some(i) = best(&excluded, &taken_e, &d.box3d) {
            taken_e[i] = true;
            MatchFlag::Ignored
        } else {
            let r = Roi2D::new([d.bbox2d[0], d.bbox2d[1]], [d.bbox2d[2], d.bbox2d[3]]);
            if dont_care.iter().any(|dc| dc.iou(&r) >= 0.5) {
                MatchFlag::Ignored
            } else {
                MatchFlag::FalsePositive
            }
        };
        flags.push((d.score, flag));
    }
    FrameMatch {
        flags,
        gt_count: counted.len(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub threshold: f64,
    pub recall: f64,
    pub precision: f64,
}

/// Recall/precision at every distinct score, by descending threshold, with
/// precision replaced by its running maximum from the right.
pub fn pr_curve(flags: &[(f64, MatchFlag)], total_gt: usize) -> Vec<PrPoint> {
    if total_gt == 0 {
        return Vec::new();
    }
    let mut scored: Vec<(f64, bool)> = flags
        .iter()
        .filter(|(_, f)| *f != MatchFlag::Ignored)
        .map(|&(s, f)| (s, f == MatchFlag::TruePositive))
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut out: Vec<PrPoint> = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < scored.len() {
        let s = scored[i].0;
        while i < scored.len() && scored[i].0 == s {
            if scored[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        out.push(PrPoint {
            threshold: s,
            recall: tp as f64 / total_gt as f64,
            precision: tp as f64 / (tp + fp) as f64,
        });
    }
    for k in (0..out.len().saturating_sub(1)).rev() {
        if out[k + 1].precision > out[k].precision {
            out[k].precision = out[k + 1].precision;
        }
    }
    out
}

/// Mean interpolated precision over the recall levels of `interp`. The
/// interpolated precision at `r` is the best precision at recall ≥ `r`.
pub fn average_precision(curve: &[PrPoint], interp: Interpolation) -> f64 {
    let levels: Vec<f64> = match interp {
        Interpolation::ElevenPoint => (0..=10).map(|k| k as f64 / 10.0).collect(),
        Interpolation::FortyPoint => (1..=40).map(|k| k as f64 / 40.0).collect(),
    };
    let n = levels.len() as f64;
    levels
        .iter()
        .map(|&r| {
            curve
                .iter()
                .filter(|p| p.recall >= r)
                .map(|p| p.precision)
                .fold(0.0, f64::max)
        })
        .sum::<f64>()
        / n
}

/// One frame's inputs to [`evaluate`].
#[derive(Debug, Clone, Copy)]
pub struct EvalFrame<'a> {
    pub gts: &'a [GroundTruthLabel],
    pub dets: &'a [Detection],
    pub image_height: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalEntry {
    pub criterion: MatchCriterion,
    pub regime: Difficulty,
    pub ap: f64,
    pub gt_count: usize,
    pub tp: usize,
    pub fp: usize,
    pub curve: Vec<PrPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub class_name: String,
    pub interpolation: Interpolation,
    pub entries: Vec<EvalEntry>,
}

impl EvalReport {
    pub fn get(&self, criterion: &MatchCriterion, regime: Difficulty) -> Option<&EvalEntry> {
        self.entries
            .iter()
            .find(|e| e.criterion == *criterion && e.regime == regime)
    }

    pub fn ap(&self, kind: CriterionKind, threshold: f64, regime: Difficulty) -> Option<f64> {
        self.get(&MatchCriterion { kind, threshold }, regime)
            .map(|e| e.ap)
    }
}

/// AP for every criterion in `criteria` and every regime.
pub fn evaluate(
    frames: &[EvalFrame<'_>],
    class_name: &str,
    criteria: &[MatchCriterion],
    interp: Interpolation,
) -> EvalReport {
    let mut entries = Vec::with_capacity(criteria.len() * 3);
    for criterion in criteria {
        for regime in Difficulty::REGIMES {
            let mut flags = Vec::new();
            let mut gt_count = 0;
            for f in frames {
                let m = match_frame(f.dets, f.gts, class_name, criterion, regime, f.image_height);
                flags.extend(m.flags);
                gt_count += m.gt_count;
            }
            let curve = pr_curve(&flags, gt_count);
            let tp = flags
                .iter()
                .filter(|f| f.1 == MatchFlag::TruePositive)
                .count();
            let fp = flags
                .iter()
                .filter(|f| f.1 == MatchFlag::FalsePositive)
                .count();
            entries.push(EvalEntry {
                criterion: *criterion,
                regime,
                ap: average_precision(&curve, interp),
                gt_count,
                tp,
                fp,
                curve,
            });
        }
    }
    EvalReport {
        class_name: class_name.into(),
        interpolation: interp,
        entries,
    }
}
