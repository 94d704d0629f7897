use alloc::borrow::Cow;
use alloc::collections::BTreeSet;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::model::Detector;
use super::targets::{assign_rpn_targets, regression_target, AnchorLabel};
use super::{DetectorConfig, PipelineError};
use crate::anchor::{compute_prior_sizes, decode_offsets, frontview_targets, OffsetTarget};
use crate::box3d::{iou_bev, OrientedBox3D};
use crate::dataset::FrameData;
use crate::tensor::{Graph, Optimizer, OptimizerKind, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    FrontView,
    Rpn,
    Refine,
    /// Refinement continued with plain SGD.
    Sgd,
}

impl Stage {
    pub const ALL: [Stage; 4] = [Stage::FrontView, Stage::Rpn, Stage::Refine, Stage::Sgd];

    pub fn name(self) -> &'static str {
        match self {
            Stage::FrontView => "frontview",
            Stage::Rpn => "rpn",
            Stage::Refine => "refine",
            Stage::Sgd => "sgd",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationRecord {
    /// 1-based iteration across all stages.
    pub iter: usize,
    pub stage: Stage,
    pub loss_total: f64,
    pub loss_cls: f64,
    pub loss_reg: f64,
}

/// Hooks called during [`train`]. Returning an error aborts the run.
pub trait TrainObserver {
    fn on_stage(&mut self, _stage: Stage, _first_iter: usize) -> Result<(), PipelineError> {
        Ok(())
    }

    fn on_iteration(&mut self, _record: &IterationRecord) -> Result<(), PipelineError> {
        Ok(())
    }

    /// Called every `checkpoint_every` iterations when that is non-zero.
    fn on_checkpoint(&mut self, _iter: usize, _detector: &Detector) -> Result<(), PipelineError> {
        Ok(())
    }
}

#[derive(Debug, Default, Clone, Copy)]
pub struct NullObserver;

impl TrainObserver for NullObserver {}

/// Anchors near a frame's objects with their fixed targets.
struct FrameCache<'f> {
    frame: Cow<'f, FrameData>,
    gts: Vec<OrientedBox3D>,
    gt_class: Vec<usize>,
    fv_labels: Vec<Option<usize>>,
    /// Pool indices of anchors in foreground cells.
    near: Vec<usize>,
    near_targets: Vec<super::RpnTarget>,
}

/// Priors from the mean size of each class in the training labels, classes
/// in sorted order.
fn derive_priors(config: &mut DetectorConfig, frames: &[FrameData]) -> Result<(), PipelineError> {
    let classes: BTreeSet<&str> = frames
        .iter()
        .flat_map(|f| f.labels.iter())
        .filter(|l| !l.is_dont_care())
        .map(|l| l.class_name.as_str())
        .collect();
    if classes.is_empty() {
        return Err(PipelineError::Config(
            "no labelled objects to derive anchor priors from".into(),
        ));
    }
    let classes: Vec<&str> = classes.into_iter().collect();
    let samples = frames
        .iter()
        .flat_map(|f| f.labels.iter())
        .map(|l| (l.class_name.as_str(), l.size));
    config.priors = compute_prior_sizes(samples, &classes)?;
    Ok(())
}

fn build_cache<'f>(det: &Detector, frame: &'f FrameData) -> Result<FrameCache<'f>, PipelineError> {
    let frame = det.prepare(frame)?;
    let mut gts = Vec::new();
    let mut gt_class = Vec::new();
    for l in &frame.labels {
        if let Some(k) = det
            .priors()
            .iter()
            .position(|p| p.class_name == l.class_name)
        {
            gts.push(l.to_box()?);
            gt_class.push(k);
        }
    }
    let grid = det.grid_for(&frame.calib)?;
    let fv = frontview_targets(&gts, &frame.calib, &grid);
    let fv_labels = fv
        .values
        .iter()
        .map(|&v| Some(usize::from(v > 0.5)))
        .collect();
    let pool = det.anchor_pool(&frame.calib)?;
    let near: Vec<usize> = (0..pool.len())
        .filter(|&i| {
            let (r, c) = pool[i].cell;
            fv.get(r, c) > 0.5
        })
        .collect();
    let boxes: Vec<OrientedBox3D> = near.iter().map(|&i| pool[i].box3d).collect();
    let near_targets = assign_rpn_targets(
        &boxes,
        &gts,
        det.config.rpn_positive_iou,
        det.config.rpn_negative_iou,
    );
    Ok(FrameCache {
        frame,
        gts,
        gt_class,
        fv_labels,
        near,
        near_targets,
    })
}

struct Losses {
    total: Var,
    cls: f64,
    reg: f64,
}

fn flat_offsets(ts: &[Option<OffsetTarget>]) -> (Vec<f64>, Vec<bool>) {
    let mut target = Vec::with_capacity(ts.len() * OffsetTarget::LEN);
    let mut mask = Vec::with_capacity(ts.len());
    for t in ts {
        match t {
            Some(t) => target.extend_from_slice(&t.to_array()),
            None => target.extend_from_slice(&[0.0; OffsetTarget::LEN]),
        }
        mask.push(t.is_some());
    }
    (target, mask)
}

/// Builds one iteration's loss for `stage` on a cached frame.
fn frame_loss(
    det: &Detector,
    g: &mut Graph<'_>,
    cache: &FrameCache<'_>,
    stage: Stage,
    rng: &mut ChaCha8Rng,
) -> Result<Losses, PipelineError> {
    let cfg = &det.config;
    let frame: &FrameData = &cache.frame;
    let feats = det.features(g, frame)?;
    let mut terms: Vec<(Var, f64)> = Vec::new();
    let (mut cls, mut reg) = (0.0, 0.0);

    if stage == Stage::FrontView || !cfg.freeze_frontview {
        let ce = g.softmax_cross_entropy(feats.frontview_logits, &cache.fv_labels)?;
        cls += g.value(ce).item();
        terms.push((ce, 1.0));
    }

    if stage >= Stage::Rpn {
        let pool = det.anchor_pool(&frame.calib)?;
        let half = cfg.rpn_batch / 2;
        let mut pos: Vec<usize> = Vec::new();
        let mut neg: Vec<usize> = Vec::new();
        for (k, t) in cache.near_targets.iter().enumerate() {
            match t.label {
                AnchorLabel::Positive => pos.push(k),
                AnchorLabel::Negative => neg.push(k),
                AnchorLabel::Ignore => {}
            }
        }
        pos.shuffle(rng);
        pos.truncate(half.max(1));
        neg.shuffle(rng);
        let want_neg = cfg.rpn_batch.saturating_sub(pos.len());
        neg.truncate(want_neg / 2);

        let mut boxes: Vec<OrientedBox3D> = Vec::new();
        let mut labels: Vec<Option<usize>> = Vec::new();
        let mut offsets: Vec<Option<OffsetTarget>> = Vec::new();
        for &k in pos.iter().chain(neg.iter()) {
            let t = &cache.near_targets[k];
            boxes.push(pool[cache.near[k]].box3d);
            labels.push(Some(usize::from(t.label == AnchorLabel::Positive)));
            offsets.push(t.offsets);
        }
        // Background from anywhere in the pool keeps empty regions quiet.
        let mut tries = 0;
        while boxes.len() < cfg.rpn_batch && !pool.is_empty() && tries < 4 * cfg.rpn_batch {
            tries += 1;
            let a = pool[rand::Rng::gen_range(rng, 0..pool.len())].box3d;
            if cache
                .gts
                .iter()
                .all(|g| iou_bev(&a, g) < cfg.rpn_negative_iou)
            {
                boxes.push(a);
                labels.push(Some(0));
                offsets.push(None);
            }
        }

        let (keep, lr, rr) = det.rois(&frame.calib, &boxes);
        if !keep.is_empty() {
            let labels: Vec<Option<usize>> = keep.iter().map(|&i| labels[i]).collect();
            let offsets: Vec<Option<OffsetTarget>> = keep.iter().map(|&i| offsets[i]).collect();
            let out = det.head_on(
                g,
                &det.layout.rpn_head,
                feats.left_rpn,
                feats.right_rpn,
                &lr,
                &rr,
            )?;
            let ce = g.softmax_cross_entropy(out.logits, &labels)?;
            cls += g.value(ce).item();
            terms.push((ce, 1.0));
            let (target, mask) = flat_offsets(&offsets);
            if mask.iter().any(|&m| m) {
                let l1 = g.smooth_l1(out.offsets, &target, &mask, cfg.smooth_l1_beta)?;
                reg += cfg.reg_weight * g.value(l1).item();
                terms.push((l1, cfg.reg_weight));
            }

            if stage >= Stage::Refine {
                // Proposals are the current regressed anchors, detached, plus
                // the ground truth itself.
                let raw = g.value(out.offsets).data().to_vec();
                let near_z = cfg.anchors.depth_range.0;
                let mut proposals: Vec<OrientedBox3D> = Vec::new();
                for (j, &bi) in keep.iter().enumerate() {
                    let t = OffsetTarget::from_slice(
                        &raw[j * OffsetTarget::LEN..(j + 1) * OffsetTarget::LEN],
                    );
                    if let Ok(b) = decode_offsets(&boxes[bi], &t) {
                        if b.centroid()[2] > near_z && b.size.to_array().iter().all(|s| *s < 1e3) {
                            proposals.push(b);
                        }
                    }
                }
                proposals.extend_from_slice(&cache.gts);
                let mut labels: Vec<Option<usize>> = Vec::with_capacity(proposals.len());
                let mut targets: Vec<Option<OffsetTarget>> = Vec::with_capacity(proposals.len());
                for p in &proposals {
                    let best = cache
                        .gts
                        .iter()
                        .enumerate()
                        .map(|(gi, g)| (gi, iou_bev(p, g)))
                        .fold(None, |acc: Option<(usize, f64)>, x| match acc {
                            Some(a) if a.1 >= x.1 => Some(a),
                            _ => Some(x),
                        });
                    match best {
                        Some((gi, iou)) if iou >= cfg.refine_positive_iou => {
                            labels.push(Some(cache.gt_class[gi] + 1));
                            targets.push(Some(regression_target(p, &cache.gts[gi])));
                        }
                        Some((_, iou)) if iou >= cfg.rpn_negative_iou => {
                            labels.push(None);
                            targets.push(None);
                        }
                        _ => {
                            labels.push(Some(0));
                            targets.push(None);
                        }
                    }
                }
                let (keep2, lr2, rr2) = det.rois(&frame.calib, &proposals);
                if !keep2.is_empty() {
                    let labels: Vec<Option<usize>> = keep2.iter().map(|&i| labels[i]).collect();
                    let targets: Vec<Option<OffsetTarget>> =
                        keep2.iter().map(|&i| targets[i]).collect();
                    let out = det.head_on(
                        g,
                        &det.layout.refine_head,
                        feats.left,
                        feats.right,
                        &lr2,
                        &rr2,
                    )?;
                    if labels.iter().any(|l| l.is_some()) {
                        let ce = g.softmax_cross_entropy(out.logits, &labels)?;
                        cls += g.value(ce).item();
                        terms.push((ce, 1.0));
                    }
                    let (target, mask) = flat_offsets(&targets);
                    if mask.iter().any(|&m| m) {
                        let l1 = g.smooth_l1(out.offsets, &target, &mask, cfg.smooth_l1_beta)?;
                        reg += cfg.reg_weight * g.value(l1).item();
                        terms.push((l1, cfg.reg_weight));
                    }
                }
            }
        }
    }
    let total = g.weighted_sum(&terms)?;
    Ok(Losses { total, cls, reg })
}

/// Trains a detector through the staged schedule: front view alone, then
/// with proposals, then with refinement under Adam, then a final stretch
/// of SGD. Batch size is one frame; frame order is reshuffled every epoch
/// from `config.seed`.
///
/// When `config.priors` is empty the priors are derived from `frames`.
pub fn train(
    mut config: DetectorConfig,
    frames: &[FrameData],
    observer: &mut dyn TrainObserver,
) -> Result<Detector, PipelineError> {
    if frames.is_empty() {
        return Err(PipelineError::DatasetEmpty);
    }
    if config.priors.is_empty() {
        derive_priors(&mut config, frames)?;
    }
    let mut det = Detector::new(config)?;
    let caches = frames
        .iter()
        .map(|f| build_cache(&det, f))
        .collect::<Result<Vec<_>, _>>()?;

    let cfg = det.config.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7472_6169_6e00);
    let mut order: Vec<usize> = (0..frames.len()).collect();
    let mut cursor = order.len();
    let mut adam = Optimizer::new(OptimizerKind::Adam, cfg.learning_rate, cfg.l2_decay);
    let mut sgd = Optimizer::new(OptimizerKind::Sgd, cfg.sgd_learning_rate, cfg.l2_decay);
    let frontview_ids = [det.layout.frontview.0, det.layout.frontview.1];
    let counts = [
        cfg.schedule.frontview,
        cfg.schedule.rpn,
        cfg.schedule.refine,
        cfg.schedule.sgd,
    ];

    let mut iter = 0usize;
    for (stage, &count) in Stage::ALL.iter().zip(counts.iter()) {
        let stage = *stage;
        if count == 0 {
            continue;
        }
        observer.on_stage(stage, iter + 1)?;
        for _ in 0..count {
            iter += 1;
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let cache = &caches[order[cursor]];
            cursor += 1;

            let (grads, record) = {
                let mut g = Graph::with_params(&det.params);
                let losses = frame_loss(&det, &mut g, cache, stage, &mut rng)?;
                let total = g.value(losses.total).item();
                (
                    g.backward(losses.total),
                    IterationRecord {
                        iter,
                        stage,
                        loss_total: total,
                        loss_cls: losses.cls,
                        loss_reg: losses.reg,
                    },
                )
            };
            det.params.zero_grad();
            let mut active = det.params.accumulate(grads);
            if cfg.freeze_frontview && stage > Stage::FrontView {
                for id in frontview_ids {
                    active[id.index()] = false;
                }
            }
            let opt = if stage == Stage::Sgd {
                &mut sgd
            } else {
                &mut adam
            };
            opt.step_active(&mut det.params, &active);

            observer.on_iteration(&record)?;
            if cfg.checkpoint_every > 0 && iter % cfg.checkpoint_every == 0 {
                observer.on_checkpoint(iter, &det)?;
            }
        }
    }
    Ok(det)
}
