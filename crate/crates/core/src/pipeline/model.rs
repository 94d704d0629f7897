use alloc::borrow::Cow;
use alloc::format;
use alloc::rc::Rc;
use alloc::vec::Vec;
use core::cell::RefCell;

#[allow(unused_imports)]
use num_traits::Float;

use super::{DetectorConfig, DetectorMode, PipelineError, BACKBONE_STRIDE};
use crate::anchor::{
    decode_offsets, generate_anchor_pool, select_potential_anchors, Anchor, AnchorPrior, CellMap,
    FrontViewGrid, OffsetTarget,
};
use crate::box3d::{nms_bev, project_box, OrientedBox3D};
use crate::dataset::{resize_frame, FrameData};
use crate::eval::Detection;
use crate::geometry::{ProjectionMatrix, StereoCalibration};
use crate::tensor::{
    add_xavier, softmax_rows, Graph, ParamId, ParamSet, Tensor4, TensorError, Var,
};
use crate::tlnet::{fuse_vars, DetectionHead, HeadOutput};

/// Anchors scored per graph at inference, bounding peak memory.
const INFERENCE_CHUNK: usize = 512;

/// RoIs narrower than this many feature pixels are widened about their center.
const MIN_ROI_EXTENT: f64 = 0.25;

/// A scored, regressed anchor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RpnProposal {
    pub box3d: OrientedBox3D,
    pub score: f64,
    pub prior_index: usize,
}

pub(crate) type Conv = (ParamId, ParamId);

#[derive(Debug, Clone)]
pub(crate) struct Layout {
    pub convs: Vec<Conv>,
    /// Lateral 1×1 projections of blocks `roi_level..4`, finest first.
    pub laterals: Vec<Conv>,
    pub frontview: Conv,
    pub rpn_reduce: Conv,
    pub rpn_head: DetectionHead,
    pub refine_head: DetectionHead,
}

/// Graph nodes of one frame's shared feature maps.
pub(crate) struct Features {
    pub frontview_logits: Var,
    pub left: Var,
    pub right: Option<Var>,
    pub left_rpn: Var,
    pub right_rpn: Option<Var>,
}

/// A monocular or stereo detector and its parameters.
pub struct Detector {
    pub config: DetectorConfig,
    pub params: ParamSet,
    pub(crate) layout: Layout,
    pool_cache: RefCell<Option<(StereoCalibration, Rc<Vec<Anchor>>)>>,
}

impl Clone for Detector {
    fn clone(&self) -> Self {
        Detector {
            config: self.config.clone(),
            params: self.params.clone(),
            layout: self.layout.clone(),
            pool_cache: RefCell::new(None),
        }
    }
}

impl core::fmt::Debug for Detector {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.debug_struct("Detector")
            .field("config", &self.config)
            .field("parameters", &self.params.scalar_count())
            .finish()
    }
}

fn conv_param(
    ps: &mut ParamSet,
    name: &str,
    c_out: usize,
    c_in: usize,
    k: usize,
    seed: u64,
) -> Result<Conv, TensorError> {
    let w = add_xavier(ps, &format!("{name}.w"), [c_out, c_in, k, k], seed)?;
    let b = ps.add(format!("{name}.b"), Tensor4::zeros([1, c_out, 1, 1]));
    Ok((w, b))
}

fn conv(g: &mut Graph<'_>, x: Var, (w, b): Conv, pad: usize) -> Result<Var, TensorError> {
    let (w, b) = (g.param(w), g.param(b));
    g.conv2d(x, w, Some(b), 1, pad)
}

/// Left-image RoI of `b` in feature coordinates of a map with `stride`.
fn feature_roi(
    p: &ProjectionMatrix,
    b: &OrientedBox3D,
    image_size: (usize, usize),
    stride: f64,
) -> Option<[f64; 4]> {
    let r = project_box(p, b, image_size).ok()?;
    let mut roi = [
        r.min[0] / stride,
        r.min[1] / stride,
        r.max[0] / stride,
        r.max[1] / stride,
    ];
    for k in 0..2 {
        let extent = roi[k + 2] - roi[k];
        if extent < MIN_ROI_EXTENT {
            let c = 0.5 * (roi[k + 2] + roi[k]);
            roi[k] = c - 0.5 * MIN_ROI_EXTENT;
            roi[k + 2] = c + 0.5 * MIN_ROI_EXTENT;
        }
    }
    Some(roi)
}

impl Detector {
    /// A freshly initialized detector. `config.priors` must be non-empty.
    pub fn new(config: DetectorConfig) -> Result<Self, PipelineError> {
        config.validate()?;
        if config.priors.is_empty() {
            return Err(PipelineError::Config(
                "at least one anchor prior is required".into(),
            ));
        }
        let seed = config.seed;
        let mut ps = ParamSet::new();
        let widths = config.backbone_widths;
        let mut convs = Vec::with_capacity(4);
        let mut c_in = 3;
        for (k, &w) in widths.iter().enumerate() {
            convs.push(conv_param(
                &mut ps,
                &format!("backbone.conv{}", k + 1),
                w,
                c_in,
                3,
                seed,
            )?);
            c_in = w;
        }
        let top = widths[3];
        let mut laterals = Vec::new();
        for level in config.roi_level..4 {
            laterals.push(conv_param(
                &mut ps,
                &format!("fpn.lateral{level}"),
                top,
                widths[level - 1],
                1,
                seed,
            )?);
        }
        let frontview = conv_param(&mut ps, "frontview", 2, top, 1, seed)?;
        let rpn_reduce = conv_param(&mut ps, "rpn.reduce", config.rpn_channels, top, 1, seed)?;
        let bins = config.roi_size * config.roi_size;
        let fused = |c: usize| match config.mode {
            DetectorMode::Mono => c,
            DetectorMode::Stereo => config.fusion.fused_channels(c),
        };
        let rpn_head = DetectionHead::new(
            &mut ps,
            "rpn",
            fused(config.rpn_channels) * bins,
            config.head_hidden,
            2,
            seed,
        )?;
        let refine_head = DetectionHead::new(
            &mut ps,
            "refine",
            fused(top) * bins,
            config.head_hidden,
            config.priors.len() + 1,
            seed,
        )?;
        Ok(Detector {
            config,
            params: ps,
            layout: Layout {
                convs,
                laterals,
                frontview,
                rpn_reduce,
                rpn_head,
                refine_head,
            },
            pool_cache: RefCell::new(None),
        })
    }

    pub fn priors(&self) -> &[AnchorPrior] {
        &self.config.priors
    }

    /// Replaces the parameters with `params`, which must have exactly this
    /// detector's names and shapes.
    pub fn load_params(&mut self, params: ParamSet) -> Result<(), PipelineError> {
        if params.len() != self.params.len() {
            return Err(PipelineError::Config(format!(
                "checkpoint has {} parameters, model has {}",
                params.len(),
                self.params.len()
            )));
        }
        for (mine, theirs) in self.params.iter().zip(params.iter()) {
            if mine.name != theirs.name || mine.value.dims() != theirs.value.dims() {
                return Err(PipelineError::Tensor(TensorError::ShapeMismatch {
                    op: "load checkpoint",
                    detail: format!(
                        "{} {:?} vs checkpoint {} {:?}",
                        mine.name,
                        mine.value.dims(),
                        theirs.name,
                        theirs.value.dims()
                    ),
                }));
            }
        }
        self.params = params;
        Ok(())
    }

    /// Resizes to the configured input size and checks stride and views.
    pub fn prepare<'f>(&self, frame: &'f FrameData) -> Result<Cow<'f, FrameData>, PipelineError> {
        let frame = match self.config.input_size {
            Some((h, w)) if (w, h) != frame.calib.image_size => {
                Cow::Owned(resize_frame(frame, h, w)?)
            }
            _ => Cow::Borrowed(frame),
        };
        let (width, height) = frame.calib.image_size;
        if width % BACKBONE_STRIDE != 0 || height % BACKBONE_STRIDE != 0 {
            return Err(PipelineError::ImageStride {
                width,
                height,
                stride: BACKBONE_STRIDE,
            });
        }
        if self.config.mode == DetectorMode::Stereo && frame.right_image.is_none() {
            return Err(PipelineError::MissingRightImage);
        }
        Ok(frame)
    }

    pub fn grid_for(&self, calib: &StereoCalibration) -> Result<FrontViewGrid, PipelineError> {
        Ok(FrontViewGrid::for_image(
            calib.width(),
            calib.height(),
            BACKBONE_STRIDE,
        )?)
    }

    /// The anchor pool of a calibration, cached for the last one seen.
    pub fn anchor_pool(&self, calib: &StereoCalibration) -> Result<Rc<Vec<Anchor>>, PipelineError> {
        if let Some((c, pool)) = self.pool_cache.borrow().as_ref() {
            if c == calib {
                return Ok(pool.clone());
            }
        }
        let grid = self.grid_for(calib)?;
        let pool = Rc::new(generate_anchor_pool(
            calib,
            &grid,
            &self.config.anchors,
            &self.config.priors,
        )?);
        *self.pool_cache.borrow_mut() = Some((*calib, pool.clone()));
        Ok(pool)
    }

    fn backbone(&self, g: &mut Graph<'_>, image: &Tensor4) -> Result<(Var, Var), TensorError> {
        let (m, sd) = (self.config.input_mean, self.config.input_std);
        let centered: Vec<f64> = image.data().iter().map(|v| (v - m) / sd).collect();
        let mut x = g.input(Tensor4::from_vec(image.dims(), centered)?);
        let mut blocks = Vec::with_capacity(4);
        for &c in &self.layout.convs {
            x = conv(g, x, c, 1)?;
            x = g.relu(x);
            x = g.maxpool2(x)?;
            blocks.push(x);
        }
        let mut p = blocks[3];
        for (i, &lat) in self.layout.laterals.iter().enumerate().rev() {
            let level = self.config.roi_level + i;
            let up = g.upsample2(p);
            let skip = conv(g, blocks[level - 1], lat, 0)?;
            p = g.add(up, skip)?;
        }
        Ok((blocks[3], p))
    }

    /// Backbone, pyramid, front-view logits and reduced proposal maps for
    /// a prepared frame. Both views share every weight.
    pub(crate) fn features(
        &self,
        g: &mut Graph<'_>,
        frame: &FrameData,
    ) -> Result<Features, PipelineError> {
        let (c4, left) = self.backbone(g, &frame.left_image)?;
        let frontview_logits = conv(g, c4, self.layout.frontview, 0)?;
        let left_rpn = conv(g, left, self.layout.rpn_reduce, 0)?;
        let (right, right_rpn) = match self.config.mode {
            DetectorMode::Mono => (None, None),
            DetectorMode::Stereo => {
                let img = frame
                    .right_image
                    .as_ref()
                    .ok_or(PipelineError::MissingRightImage)?;
                let (_, right) = self.backbone(g, img)?;
                let right_rpn = conv(g, right, self.layout.rpn_reduce, 0)?;
                (Some(right), Some(right_rpn))
            }
        };
        Ok(Features {
            frontview_logits,
            left,
            right,
            left_rpn,
            right_rpn,
        })
    }

    /// RoIs of `boxes` on both views; boxes that do not project are dropped
    /// and their indices omitted from the returned list.
    pub(crate) fn rois(
        &self,
        calib: &StereoCalibration,
        boxes: &[OrientedBox3D],
    ) -> (Vec<usize>, Vec<[f64; 4]>, Vec<[f64; 4]>) {
        let s = self.config.roi_stride() as f64;
        let mut keep = Vec::with_capacity(boxes.len());
        let mut left = Vec::with_capacity(boxes.len());
        let mut right = Vec::with_capacity(boxes.len());
        for (i, b) in boxes.iter().enumerate() {
            let l = feature_roi(&calib.p_left, b, calib.image_size, s);
            let r = feature_roi(&calib.p_right, b, calib.image_size, s);
            if let (Some(l), Some(r)) = (l, r) {
                keep.push(i);
                left.push(l);
                right.push(r);
            }
        }
        (keep, left, right)
    }

    /// Crops RoIs from one or two maps, fuses them in stereo mode and runs
    /// `head`.
    pub(crate) fn head_on(
        &self,
        g: &mut Graph<'_>,
        head: &DetectionHead,
        left_map: Var,
        right_map: Option<Var>,
        left_rois: &[[f64; 4]],
        right_rois: &[[f64; 4]],
    ) -> Result<HeadOutput, TensorError> {
        let s = self.config.roi_size;
        let xl = g.roi_align(left_map, left_rois, s, s)?;
        let x = match (self.config.mode, right_map) {
            (DetectorMode::Stereo, Some(rm)) => {
                let xr = g.roi_align(rm, right_rois, s, s)?;
                fuse_vars(g, xl, xr, self.config.fusion, self.config.detach_scores)?
            }
            _ => xl,
        };
        head.forward(g, x)
    }

    /// Front-view foreground probability per grid cell.
    pub fn frontview_probabilities(&self, frame: &FrameData) -> Result<CellMap, PipelineError> {
        let frame = self.prepare(frame)?;
        let mut g = Graph::with_params(&self.params);
        let f = self.features(&mut g, &frame)?;
        let grid = self.grid_for(&frame.calib)?;
        Ok(self.cell_probabilities(&grid, g.value(f.frontview_logits)))
    }

    fn cell_probabilities(&self, grid: &FrontViewGrid, logits: &Tensor4) -> CellMap {
        let mut map = CellMap::filled(grid, 0.0);
        for row in 0..grid.gy {
            for col in 0..grid.gx {
                let (a, b) = (logits.at(0, 0, row, col), logits.at(0, 1, row, col));
                map.set(row, col, 1.0 / (1.0 + (a - b).exp()));
            }
        }
        map
    }

    /// Scores `boxes` as proposals, in chunks, against detached feature maps.
    fn run_head_chunked(
        &self,
        head: &DetectionHead,
        left_map: &Tensor4,
        right_map: Option<&Tensor4>,
        left_rois: &[[f64; 4]],
        right_rois: &[[f64; 4]],
    ) -> Result<(Vec<Vec<f64>>, Vec<OffsetTarget>), PipelineError> {
        let mut probs = Vec::with_capacity(left_rois.len());
        let mut offsets = Vec::with_capacity(left_rois.len());
        for start in (0..left_rois.len()).step_by(INFERENCE_CHUNK) {
            let end = (start + INFERENCE_CHUNK).min(left_rois.len());
            let mut g = Graph::with_params(&self.params);
            let lm = g.input(left_map.clone());
            let rm = right_map.map(|r| g.input(r.clone()));
            let out = self.head_on(
                &mut g,
                head,
                lm,
                rm,
                &left_rois[start..end],
                &right_rois[start..end],
            )?;
            probs.extend(softmax_rows(g.value(out.logits)));
            offsets.extend(
                g.value(out.offsets)
                    .data()
                    .chunks(OffsetTarget::LEN)
                    .map(OffsetTarget::from_slice),
            );
        }
        Ok((probs, offsets))
    }

    /// Feature maps of a prepared frame, detached from any graph.
    fn feature_values(&self, frame: &FrameData) -> Result<FeatureValues, PipelineError> {
        let mut g = Graph::with_params(&self.params);
        let f = self.features(&mut g, frame)?;
        Ok(FeatureValues {
            frontview_logits: g.value(f.frontview_logits).clone(),
            left: g.value(f.left).clone(),
            right: f.right.map(|v| g.value(v).clone()),
            left_rpn: g.value(f.left_rpn).clone(),
            right_rpn: f.right_rpn.map(|v| g.value(v).clone()),
        })
    }

    fn rpn_from_values(
        &self,
        frame: &FrameData,
        fv: &FeatureValues,
    ) -> Result<Vec<RpnProposal>, PipelineError> {
        let grid = self.grid_for(&frame.calib)?;
        let map = self.cell_probabilities(&grid, &fv.frontview_logits);
        let pool = self.anchor_pool(&frame.calib)?;
        let potential = select_potential_anchors(&pool, &map, self.config.frontview_threshold);
        if potential.is_empty() {
            return Err(PipelineError::NoPotentialAnchors);
        }
        let boxes: Vec<OrientedBox3D> = potential.iter().map(|&i| pool[i].box3d).collect();
        let (keep, lr, rr) = self.rois(&frame.calib, &boxes);
        let (probs, offsets) = self.run_head_chunked(
            &self.layout.rpn_head,
            &fv.left_rpn,
            fv.right_rpn.as_ref(),
            &lr,
            &rr,
        )?;
        let mut scored = Vec::with_capacity(keep.len());
        for (k, &bi) in keep.iter().enumerate() {
            let anchor = &pool[potential[bi]];
            if let Ok(b) = decode_offsets(&anchor.box3d, &offsets[k]) {
                scored.push(RpnProposal {
                    box3d: b,
                    score: probs[k][1],
                    prior_index: anchor.prior_index,
                });
            }
        }
        let pairs: Vec<(OrientedBox3D, f64)> = scored.iter().map(|p| (p.box3d, p.score)).collect();
        let kept = nms_bev(&pairs, self.config.rpn_nms_iou, self.config.top_k);
        Ok(kept.into_iter().map(|i| scored[i]).collect())
    }

    fn refine_from_values(
        &self,
        frame: &FrameData,
        fv: &FeatureValues,
        proposals: &[RpnProposal],
    ) -> Result<Vec<Detection>, PipelineError> {
        let near = self.config.anchors.depth_range.0;
        let boxes: Vec<OrientedBox3D> = proposals
            .iter()
            .map(|p| p.box3d)
            .filter(|b| b.centroid()[2] > near)
            .collect();
        if boxes.is_empty() {
            return Ok(Vec::new());
        }
        let (keep, lr, rr) = self.rois(&frame.calib, &boxes);
        let (probs, offsets) = self.run_head_chunked(
            &self.layout.refine_head,
            &fv.left,
            fv.right.as_ref(),
            &lr,
            &rr,
        )?;
        let mut cands: Vec<(usize, OrientedBox3D, f64)> = Vec::new();
        for (k, &bi) in keep.iter().enumerate() {
            let p = &probs[k];
            let (cls, score) =
                p.iter()
                    .enumerate()
                    .skip(1)
                    .fold((0, f64::NEG_INFINITY), |best, (c, &v)| {
                        if v > best.1 {
                            (c, v)
                        } else {
                            best
                        }
                    });
            if cls == 0 || score < self.config.score_threshold {
                continue;
            }
            if let Ok(b) = decode_offsets(&boxes[bi], &offsets[k]) {
                cands.push((cls - 1, b, score));
            }
        }
        let mut out = Vec::new();
        for (ci, prior) in self.config.priors.iter().enumerate() {
            let mine: Vec<(OrientedBox3D, f64)> = cands
                .iter()
                .filter(|c| c.0 == ci)
                .map(|c| (c.1, c.2))
                .collect();
            for i in nms_bev(&mine, self.config.final_nms_iou, usize::MAX) {
                let (b, score) = mine[i];
                let Ok(r) = project_box(&frame.calib.p_left, &b, frame.calib.image_size) else {
                    continue;
                };
                out.push(Detection {
                    class_name: prior.class_name.clone(),
                    box3d: b,
                    score,
                    bbox2d: [r.min[0], r.min[1], r.max[0], r.max[1]],
                });
            }
        }
        Ok(out)
    }

    /// Front-view filtering, proposal scoring and proposal NMS.
    pub fn forward_rpn(&self, frame: &FrameData) -> Result<Vec<RpnProposal>, PipelineError> {
        let frame = self.prepare(frame)?;
        let fv = self.feature_values(&frame)?;
        self.rpn_from_values(&frame, &fv)
    }

    /// Refinement of `proposals`, final NMS and score threshold.
    pub fn forward_refine(
        &self,
        frame: &FrameData,
        proposals: &[RpnProposal],
    ) -> Result<Vec<Detection>, PipelineError> {
        let frame = self.prepare(frame)?;
        let fv = self.feature_values(&frame)?;
        self.refine_from_values(&frame, &fv, proposals)
    }

    /// Full inference. A frame without front-view foreground yields no
    /// detections.
    pub fn infer(&self, frame: &FrameData) -> Result<Vec<Detection>, PipelineError> {
        let prepared = self.prepare(frame)?;
        let fv = self.feature_values(&prepared)?;
        let proposals = match self.rpn_from_values(&prepared, &fv) {
            Ok(p) => p,
            Err(PipelineError::NoPotentialAnchors) => return Ok(Vec::new()),
            Err(e) => return Err(e),
        };
        let mut dets = self.refine_from_values(&prepared, &fv, &proposals)?;
        if prepared.calib.image_size != frame.calib.image_size {
            let sx = frame.calib.width() as f64 / prepared.calib.width() as f64;
            let sy = frame.calib.height() as f64 / prepared.calib.height() as f64;
            for d in &mut dets {
                let b = d.bbox2d;
                d.bbox2d = [b[0] * sx, b[1] * sy, b[2] * sx, b[3] * sy];
            }
        }
        Ok(dets)
    }
}

struct FeatureValues {
    frontview_logits: Tensor4,
    left: Tensor4,
    right: Option<Tensor4>,
    left_rpn: Tensor4,
    right_rpn: Option<Tensor4>,
}
