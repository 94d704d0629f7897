use alloc::vec::Vec;

use crate::anchor::{encode_offsets, nearest_equivalent_yaw, OffsetTarget};
use crate::box3d::{iou_bev, OrientedBox3D};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnchorLabel {
    Positive,
    Negative,
    Ignore,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RpnTarget {
    pub label: AnchorLabel,
    /// Best-overlapping ground truth and its BEV IoU.
    pub gt: Option<usize>,
    pub iou: f64,
    /// Regression target, for positives only.
    pub offsets: Option<OffsetTarget>,
}

/// Offsets from `reference` to `gt`, with the ground-truth heading taken
/// modulo π to the representative nearest the reference heading.
pub fn regression_target(reference: &OrientedBox3D, gt: &OrientedBox3D) -> OffsetTarget {
    let canonical = OrientedBox3D {
        yaw: nearest_equivalent_yaw(gt.yaw, reference.yaw),
        ..*gt
    };
    encode_offsets(reference, &canonical)
}

/// Labels anchors by BEV IoU with the ground truth: positive at or above
/// `positive_iou`, negative below `negative_iou`, ignored in between. Each
/// ground truth also makes its best-overlapping anchor positive.
pub fn assign_rpn_targets(
    anchors: &[OrientedBox3D],
    gts: &[OrientedBox3D],
    positive_iou: f64,
    negative_iou: f64,
) -> Vec<RpnTarget> {
    let mut best_for_gt: Vec<(Option<usize>, f64)> = alloc::vec![(None, 0.0); gts.len()];
    let mut out: Vec<RpnTarget> = anchors
        .iter()
        .enumerate()
        .map(|(ai, a)| {
            let mut best: (Option<usize>, f64) = (None, 0.0);
            for (gi, g) in gts.iter().enumerate() {
                let iou = iou_bev(a, g);
                if iou > best.1 {
                    best = (Some(gi), iou);
                }
                if iou > best_for_gt[gi].1 {
                    best_for_gt[gi] = (Some(ai), iou);
                }
            }
            let label = if best.1 >= positive_iou && best.0.is_some() {
                AnchorLabel::Positive
            } else if best.1 < negative_iou {
                AnchorLabel::Negative
            } else {
                AnchorLabel::Ignore
            };
            RpnTarget {
                label,
                gt: best.0,
                iou: best.1,
                offsets: None,
            }
        })
        .collect();
    for (gi, &(ai, iou)) in best_for_gt.iter().enumerate() {
        if let Some(ai) = ai {
            let t = &mut out[ai];
            if t.label != AnchorLabel::Positive {
                *t = RpnTarget {
                    label: AnchorLabel::Positive,
                    gt: Some(gi),
                    iou,
                    offsets: None,
                };
            }
        }
    }
    for (t, a) in out.iter_mut().zip(anchors) {
        if t.label == AnchorLabel::Positive {
            t.offsets = t.gt.map(|gi| regression_target(a, &gts[gi]));
        }
    }
    out
}
