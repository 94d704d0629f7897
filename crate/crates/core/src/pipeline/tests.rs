use super::*;
use crate::anchor::{decode_offsets, AnchorPoolParams, AnchorPrior, OffsetTarget};
use crate::box3d::{iou_3d, iou_bev, BoxSize, OrientedBox3D};
use crate::dataset::{generate_scene, FrameData, SceneSpec};
use crate::tensor::{Graph, Tensor4};
use crate::tlnet::FusionMode;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::FRAC_PI_2;

fn car_prior() -> AnchorPrior {
    AnchorPrior {
        class_name: "Car".into(),
        mean_size: BoxSize::new(1.52, 1.63, 3.88),
    }
}

fn tiny_config(mode: DetectorMode, fusion: FusionMode) -> DetectorConfig {
    DetectorConfig {
        mode,
        fusion,
        priors: vec![car_prior()],
        anchors: AnchorPoolParams {
            interval_m: 0.5,
            depth_range: (5.0, 40.0),
            ground_y: 1.65,
        },
        backbone_widths: [4, 8, 8, 8],
        rpn_channels: 2,
        roi_size: 3,
        head_hidden: 16,
        rpn_batch: 16,
        ..DetectorConfig::default()
    }
}

fn scene(index: usize) -> FrameData {
    let spec = SceneSpec {
        seed: 11,
        objects: (1, 3),
        ..SceneSpec::default()
    };
    generate_scene(&spec, index).unwrap()
}

fn car(x: f64, z: f64, yaw: f64) -> OrientedBox3D {
    OrientedBox3D::new([x, 1.65, z], BoxSize::new(1.5, 2.0, 4.0), yaw).unwrap()
}

#[test]
fn anchor_equal_to_gt_is_positive_with_zero_offsets() {
    let gt = car(1.0, 20.0, 0.3);
    let t = assign_rpn_targets(&[gt], &[gt], 0.5, 0.35);
    assert_eq!(t[0].label, AnchorLabel::Positive);
    let o = t[0].offsets.unwrap().to_array();
    assert!(o[..6].iter().all(|v| v.abs() < 1e-12));
    assert!((o[6] - 1.0).abs() < 1e-12 && o[7].abs() < 1e-12);
}

#[test]
fn distant_anchor_is_negative() {
    let gt = car(0.0, 20.0, 0.0);
    let far = car(100.0, 20.0, 0.0);
    let t = assign_rpn_targets(&[gt, far], &[gt], 0.5, 0.35);
    assert_eq!(t[1].label, AnchorLabel::Negative);
    assert_eq!(t[1].iou, 0.0);
    assert!(t[1].offsets.is_none());
}

#[test]
fn anchor_between_thresholds_is_ignored() {
    // Equal axis-aligned boxes shifted by d across their width (z at yaw 0):
    // IoU = (w-d)/(w+d).
    let w = 2.0;
    let d = w * (1.0 - 0.42) / 1.42;
    let gt = car(0.0, 20.0, 0.0);
    let shifted = car(0.0, 20.0 + d, 0.0);
    assert!((iou_bev(&shifted, &gt) - 0.42).abs() < 1e-9);
    let t = assign_rpn_targets(&[gt, shifted], &[gt], 0.5, 0.35);
    assert_eq!(t[1].label, AnchorLabel::Ignore);
}

#[test]
fn each_gt_forces_its_best_anchor_positive() {
    let gt = car(0.0, 20.0, 0.0);
    let weak = car(0.0, 21.5, 0.0);
    let t = assign_rpn_targets(&[weak, car(50.0, 20.0, 0.0)], &[gt], 0.5, 0.35);
    assert!(t[0].iou < 0.35);
    assert_eq!(t[0].label, AnchorLabel::Positive);
    assert!(t[0].offsets.is_some());
    assert_eq!(t[1].label, AnchorLabel::Negative);
}

#[test]
fn regression_targets_canonicalize_heading() {
    let gt = car(0.0, 20.0, core::f64::consts::PI - 0.1);
    let anchor = car(0.0, 20.0, 0.0);
    let t = assign_rpn_targets(&[anchor], &[gt], 0.5, 0.35)[0]
        .offsets
        .unwrap();
    // The half-turn equivalent of the heading is -0.1.
    assert!(t.orientation[0] > 0.99);
    assert!((t.orientation[1] + 0.1f64.sin()).abs() < 1e-12);
}

#[test]
fn orientation_vector_decodes_to_quarter_turn() {
    let anchor = car(0.0, 20.0, 0.0);
    let t = OffsetTarget {
        d_center: [0.0; 3],
        d_size: [0.0; 3],
        orientation: [0.0, 1.0],
    };
    let b = decode_offsets(&anchor, &t).unwrap();
    assert!((b.yaw - FRAC_PI_2).abs() < 1e-12);
}

#[test]
fn proposals_never_exceed_k() {
    let frame = scene(0);
    let mut cfg = tiny_config(DetectorMode::Stereo, FusionMode::Reweight);
    cfg.frontview_threshold = 0.0;
    let det = Detector::new(cfg.clone()).unwrap();
    let all = det.forward_rpn(&frame).unwrap();
    assert!(all.len() <= 1024);
    assert!(!all.is_empty());

    cfg.top_k = 1_000_000;
    let unbounded = Detector::new(cfg.clone())
        .unwrap()
        .forward_rpn(&frame)
        .unwrap();
    assert!(unbounded.len() >= all.len());
    cfg.top_k = 7;
    let few = Detector::new(cfg.clone())
        .unwrap()
        .forward_rpn(&frame)
        .unwrap();
    assert_eq!(few.len(), 7.min(unbounded.len()));
    assert_eq!(&few[..], &unbounded[..few.len()]);
    for p in &unbounded {
        assert!(p.score >= 0.0 && p.score <= 1.0);
        assert!(p.box3d.size.h > 0.0 && p.box3d.size.w > 0.0 && p.box3d.size.l > 0.0);
    }
}

#[test]
fn no_foreground_cells_is_reported() {
    let mut cfg = tiny_config(DetectorMode::Mono, FusionMode::Add);
    cfg.frontview_threshold = 1.5;
    let det = Detector::new(cfg).unwrap();
    let frame = scene(1);
    assert_eq!(
        det.forward_rpn(&frame),
        Err(PipelineError::NoPotentialAnchors)
    );
    assert_eq!(det.infer(&frame).unwrap(), Vec::new());
}

/// The same frame seen by both cameras of a zero-baseline rig.
fn twin_view(frame: &FrameData) -> FrameData {
    let mut f = frame.clone();
    f.right_image = Some(f.left_image.clone());
    f.calib.p_right = f.calib.p_left;
    f
}

#[test]
fn identical_views_add_fusion_equals_mono_on_doubled_features() {
    let cfg = tiny_config(DetectorMode::Stereo, FusionMode::Add);
    let det = Detector::new(cfg).unwrap();
    let map = Tensor4::from_vec(
        [1, 8, 6, 10],
        (0..480)
            .map(|i| ((i * 37 % 101) as f64 / 50.0) - 1.0)
            .collect(),
    )
    .unwrap();
    let rois = [[0.5, 0.5, 4.0, 3.5], [2.0, 1.0, 9.0, 5.5]];

    let mut g = Graph::with_params(&det.params);
    let x = g.input(map.clone());
    let stereo = det
        .head_on(&mut g, &det.layout.refine_head, x, Some(x), &rois, &rois)
        .unwrap();

    let mut mono = det.clone();
    mono.config.mode = DetectorMode::Mono;
    let doubled =
        Tensor4::from_vec(map.dims(), map.data().iter().map(|v| 2.0 * v).collect()).unwrap();
    let mut h = Graph::with_params(&mono.params);
    let x2 = h.input(doubled);
    let single = mono
        .head_on(&mut h, &mono.layout.refine_head, x2, None, &rois, &[])
        .unwrap();
    for (a, b) in [
        (stereo.logits, single.logits),
        (stereo.offsets, single.offsets),
    ] {
        let (a, b) = (g.value(a), h.value(b));
        for (p, q) in a.data().iter().zip(b.data()) {
            assert!((p - q).abs() <= 1e-12 * (1.0 + q.abs()), "{p} vs {q}");
        }
    }
}

#[test]
fn identical_views_reweight_matches_add() {
    let frame = twin_view(&scene(2));
    let mut add = tiny_config(DetectorMode::Stereo, FusionMode::Add);
    add.frontview_threshold = 0.0;
    let rew = DetectorConfig {
        fusion: FusionMode::Reweight,
        ..add.clone()
    };
    let a = Detector::new(add).unwrap();
    let r = Detector::new(rew).unwrap();
    assert_eq!(a.params, r.params);
    let pa = a.forward_rpn(&frame).unwrap();
    let pr = r.forward_rpn(&frame).unwrap();
    assert_eq!(pa, pr);
    assert_eq!(
        a.forward_refine(&frame, &pa).unwrap(),
        r.forward_refine(&frame, &pr).unwrap()
    );
}

#[test]
fn zero_proposals_give_no_detections() {
    let det = Detector::new(tiny_config(DetectorMode::Stereo, FusionMode::Reweight)).unwrap();
    assert!(det.forward_refine(&scene(0), &[]).unwrap().is_empty());
}

#[test]
fn perfect_refinement_is_a_fixed_point() {
    let mut det = Detector::new(tiny_config(DetectorMode::Stereo, FusionMode::Reweight)).unwrap();
    for p in det.params.iter_mut() {
        if p.name.starts_with("refine.") {
            p.value.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }
    let cls_b = det.params.find("refine.cls.b").unwrap();
    det.params[cls_b].value.data_mut()[1] = 10.0;
    let reg_b = det.params.find("refine.reg.b").unwrap();
    det.params[reg_b].value.data_mut()[6] = 1.0;

    let frame = scene(3);
    let gt = frame.labels[0].to_box().unwrap();
    let proposal = RpnProposal {
        box3d: gt,
        score: 0.9,
        prior_index: 0,
    };
    let dets = det.forward_refine(&frame, &[proposal]).unwrap();
    assert_eq!(dets.len(), 1);
    let b = dets[0].box3d;
    for k in 0..3 {
        assert!((b.center[k] - gt.center[k]).abs() < 1e-12);
    }
    assert_eq!(b.size, gt.size);
    assert!((b.yaw - gt.yaw).abs() < 1e-12);
    assert_eq!(dets[0].class_name, "Car");
    assert!(dets[0].score > 0.99);
}

#[test]
fn blank_image_yields_nothing_confident() {
    let det = Detector::new(tiny_config(DetectorMode::Stereo, FusionMode::Reweight)).unwrap();
    let mut frame = scene(0);
    frame.labels.clear();
    frame.left_image = Tensor4::filled(frame.left_image.dims(), 0.5);
    frame.right_image = Some(frame.left_image.clone());
    let dets = det.infer(&frame).unwrap();
    assert!(dets.iter().all(|d| d.score >= det.config.score_threshold));
    let again = det.infer(&frame).unwrap();
    assert_eq!(dets, again);
}

#[test]
fn mono_and_stereo_share_all_but_the_fused_heads() {
    let names = |mode, fusion| -> Vec<(String, [usize; 4])> {
        Detector::new(tiny_config(mode, fusion))
            .unwrap()
            .params
            .iter()
            .map(|p| (p.name.clone(), p.value.dims()))
            .collect()
    };
    let mono = names(DetectorMode::Mono, FusionMode::Add);
    let concat = names(DetectorMode::Stereo, FusionMode::Concat);
    let reweight = names(DetectorMode::Stereo, FusionMode::Reweight);
    assert_eq!(mono, reweight);
    let mono_names: Vec<&String> = mono.iter().map(|p| &p.0).collect();
    let concat_names: Vec<&String> = concat.iter().map(|p| &p.0).collect();
    assert_eq!(mono_names, concat_names);
    for (m, c) in mono.iter().zip(&concat) {
        let fused = m.0 == "rpn.fc1.w" || m.0 == "refine.fc1.w";
        assert_eq!(m.1 == c.1, !fused, "{}", m.0);
    }
    assert!(mono.iter().any(|p| p.0 == "backbone.conv1.w"));
}

#[test]
fn loading_mismatched_parameters_fails() {
    let mono = Detector::new(tiny_config(DetectorMode::Mono, FusionMode::Add)).unwrap();
    let mut concat = Detector::new(tiny_config(DetectorMode::Stereo, FusionMode::Concat)).unwrap();
    assert!(matches!(
        concat.load_params(mono.params.clone()),
        Err(PipelineError::Tensor(_))
    ));
    let mut stereo =
        Detector::new(tiny_config(DetectorMode::Stereo, FusionMode::Reweight)).unwrap();
    stereo.load_params(mono.params.clone()).unwrap();
}

#[test]
fn input_checks() {
    let det = Detector::new(tiny_config(DetectorMode::Stereo, FusionMode::Reweight)).unwrap();
    let mut mono_frame = scene(0);
    mono_frame.right_image = None;
    assert_eq!(
        det.infer(&mono_frame),
        Err(PipelineError::MissingRightImage)
    );

    let odd = crate::dataset::resize_frame(&scene(0), 90, 320).unwrap();
    assert!(matches!(
        det.infer(&odd),
        Err(PipelineError::ImageStride { .. })
    ));
    let mut resizing = det.clone();
    resizing.config.input_size = Some((96, 320));
    assert_eq!(resizing.infer(&odd).map(|_| ()), Ok(()));

    assert!(matches!(
        train(
            tiny_config(DetectorMode::Mono, FusionMode::Add),
            &[],
            &mut NullObserver
        ),
        Err(PipelineError::DatasetEmpty)
    ));
    let mut cfg = tiny_config(DetectorMode::Mono, FusionMode::Add);
    cfg.priors.clear();
    assert!(matches!(Detector::new(cfg), Err(PipelineError::Config(_))));
}

#[derive(Default)]
struct Log {
    stages: Vec<(Stage, usize)>,
    records: Vec<IterationRecord>,
    checkpoints: Vec<usize>,
}

impl TrainObserver for Log {
    fn on_stage(&mut self, stage: Stage, first_iter: usize) -> Result<(), PipelineError> {
        self.stages.push((stage, first_iter));
        Ok(())
    }
    fn on_iteration(&mut self, r: &IterationRecord) -> Result<(), PipelineError> {
        self.records.push(*r);
        Ok(())
    }
    fn on_checkpoint(&mut self, iter: usize, _: &Detector) -> Result<(), PipelineError> {
        self.checkpoints.push(iter);
        Ok(())
    }
}

fn short_schedule() -> Schedule {
    Schedule {
        frontview: 2,
        rpn: 3,
        refine: 3,
        sgd: 2,
    }
}

#[test]
fn training_is_deterministic_and_logs_stage_boundaries() {
    let frames: Vec<FrameData> = (0..3).map(scene).collect();
    let mut cfg = tiny_config(DetectorMode::Stereo, FusionMode::Reweight);
    cfg.schedule = short_schedule();
    cfg.checkpoint_every = 4;
    cfg.priors.clear();
    let mut log = Log::default();
    let a = train(cfg.clone(), &frames, &mut log).unwrap();
    let b = train(cfg, &frames, &mut NullObserver).unwrap();
    assert_eq!(a.params, b.params);
    assert_eq!(a.config.priors.len(), 1);
    assert_eq!(
        log.stages,
        vec![
            (Stage::FrontView, 1),
            (Stage::Rpn, 3),
            (Stage::Refine, 6),
            (Stage::Sgd, 9)
        ]
    );
    assert_eq!(log.records.len(), 10);
    assert_eq!(log.checkpoints, vec![4, 8]);
    for r in &log.records {
        assert!(r.loss_total.is_finite());
        assert!((r.loss_total - r.loss_cls - r.loss_reg).abs() < 1e-9 * (1.0 + r.loss_total));
    }
    let frame = scene(0);
    assert_eq!(a.infer(&frame).unwrap(), a.infer(&frame).unwrap());
}

#[test]
fn front_view_stage_leaves_heads_untouched() {
    let frames: Vec<FrameData> = (0..2).map(scene).collect();
    let mut cfg = tiny_config(DetectorMode::Mono, FusionMode::Add);
    cfg.schedule = Schedule {
        frontview: 3,
        rpn: 0,
        refine: 0,
        sgd: 0,
    };
    let init = Detector::new(cfg.clone()).unwrap();
    let trained = train(cfg, &frames, &mut NullObserver).unwrap();
    for (p, q) in init.params.iter().zip(trained.params.iter()) {
        // The pyramid and heads only feed the RoI stages.
        let downstream = ["fpn.", "rpn.", "refine."]
            .iter()
            .any(|s| p.name.starts_with(s));
        assert_eq!(p.value == q.value, downstream, "{}", p.name);
    }
}

#[test]
fn frozen_front_view_stays_fixed_after_its_stage() {
    let frames: Vec<FrameData> = (0..2).map(scene).collect();
    let mut cfg = tiny_config(DetectorMode::Mono, FusionMode::Add);
    cfg.freeze_frontview = true;
    cfg.schedule = Schedule {
        frontview: 0,
        rpn: 3,
        refine: 0,
        sgd: 0,
    };
    let init = Detector::new(cfg.clone()).unwrap();
    let trained = train(cfg, &frames, &mut NullObserver).unwrap();
    for name in ["frontview.w", "frontview.b"] {
        let id = init.params.find(name).unwrap();
        assert_eq!(init.params[id].value, trained.params[id].value);
    }
}

fn desk_config() -> DetectorConfig {
    DetectorConfig {
        backbone_widths: [16, 32, 64, 64],
        rpn_channels: 4,
        roi_size: 7,
        head_hidden: 128,
        rpn_batch: 64,
        learning_rate: 1e-3,
        sgd_learning_rate: 1e-3,
        ..tiny_config(DetectorMode::Stereo, FusionMode::Reweight)
    }
}

// The first stage of the desk schedule on ten frames.
#[test]
fn overfits_a_small_set() {
    let frames: Vec<FrameData> = (0..10).map(scene).collect();
    let mut cfg = desk_config();
    cfg.schedule = Schedule {
        frontview: 200,
        rpn: 0,
        refine: 0,
        sgd: 0,
    };
    let mut log = Log::default();
    train(cfg, &frames, &mut log).unwrap();
    let mean = |r: &[IterationRecord]| r.iter().map(|r| r.loss_total).sum::<f64>() / r.len() as f64;
    let first = mean(&log.records[..10]);
    let last = mean(&log.records[190..]);
    assert!(last < 0.2 * first, "loss {first} -> {last}");
}

#[test]
fn recalls_objects_of_a_memorized_frame() {
    let frame = scene(0);
    let mut cfg = desk_config();
    cfg.schedule = Schedule {
        frontview: 100,
        rpn: 200,
        refine: 300,
        sgd: 100,
    };
    let mut log = Log::default();
    let det = train(cfg, core::slice::from_ref(&frame), &mut log).unwrap();
    let dets = det.infer(&frame).unwrap();
    let gts: Vec<OrientedBox3D> = frame.labels.iter().map(|l| l.to_box().unwrap()).collect();
    let hits = gts
        .iter()
        .filter(|g| dets.iter().any(|d| iou_3d(&d.box3d, g) >= 0.5))
        .count();
    assert!(2 * hits >= gts.len(), "{hits} of {} recalled", gts.len());
}

#[test]
fn iou_helpers_agree_on_fixture() {
    let a = car(0.0, 20.0, 0.0);
    assert!((iou_3d(&a, &a) - 1.0).abs() < 1e-12);
}
