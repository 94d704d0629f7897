//! Stereo RoI fusion by per-channel coherence reweighting, the fusion
//! baselines it is compared against, and the fully-connected detection head
//! shared by the proposal and refinement stages.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::tensor::{add_xavier, Graph, ParamId, ParamSet, Tensor4, TensorError, Var};

/// Floor on `‖l‖·‖r‖` in the coherence score. Small enough that only
/// all-zero channels hit it, so identical non-zero channels score exactly 1
/// at any magnitude.
pub const COHERENCE_EPS: f64 = 1e-150;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionMode {
    Concat,
    Add,
    Reweight,
}

impl FusionMode {
    /// Channel count of the fused map for `c` channels per view.
    pub fn fused_channels(self, c: usize) -> usize {
        match self {
            FusionMode::Concat => 2 * c,
            FusionMode::Add | FusionMode::Reweight => c,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            FusionMode::Concat => "concat",
            FusionMode::Add => "add",
            FusionMode::Reweight => "reweight",
        }
    }
}

/// Left and right RoI features cropped from the same 3D anchor.
#[derive(Debug, Clone, PartialEq)]
pub struct RoiFeaturePair {
    pub left: Tensor4,
    pub right: Tensor4,
}

impl RoiFeaturePair {
    pub fn new(left: Tensor4, right: Tensor4) -> Result<Self, TensorError> {
        if left.dims() != right.dims() {
            return Err(TensorError::ShapeMismatch {
                op: "roi pair",
                detail: format!("{:?} vs {:?}", left.dims(), right.dims()),
            });
        }
        Ok(RoiFeaturePair { left, right })
    }

    pub fn swapped(&self) -> Self {
        RoiFeaturePair {
            left: self.right.clone(),
            right: self.left.clone(),
        }
    }
}

/// Per-channel coherence scores of a single RoI pair, each in `[−1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CoherenceVector {
    pub scores: Vec<f64>,
}

pub fn coherence_scores(pair: &RoiFeaturePair) -> CoherenceVector {
    let mut g = Graph::new();
    let l = g.input(pair.left.clone());
    let r = g.input(pair.right.clone());
    let s = g.coherence(l, r, COHERENCE_EPS).expect("pair dims agree");
    CoherenceVector {
        scores: g.value(s).data().to_vec(),
    }
}

/// Scales channel `i` of both sides by `s.scores[i]`.
pub fn reweight(pair: &RoiFeaturePair, s: &CoherenceVector) -> Result<RoiFeaturePair, TensorError> {
    let d = pair.left.dims();
    if s.scores.len() != d[0] * d[1] {
        return Err(TensorError::ShapeMismatch {
            op: "reweight",
            detail: format!("{} scores for {:?}", s.scores.len(), d),
        });
    }
    let mut g = Graph::new();
    let l = g.input(pair.left.clone());
    let r = g.input(pair.right.clone());
    let sv = g.input(Tensor4::from_vec([d[0], d[1], 1, 1], s.scores.clone())?);
    let lr = g.channel_scale(l, sv)?;
    let rr = g.channel_scale(r, sv)?;
    Ok(RoiFeaturePair {
        left: g.value(lr).clone(),
        right: g.value(rr).clone(),
    })
}

pub fn fuse(pair: &RoiFeaturePair, mode: FusionMode) -> Result<Tensor4, TensorError> {
    let mut g = Graph::new();
    let l = g.input(pair.left.clone());
    let r = g.input(pair.right.clone());
    let out = fuse_vars(&mut g, l, r, mode, false)?;
    Ok(g.value(out).clone())
}

/// Graph form of [`fuse`] over batches of RoI pairs. With `detach_scores`
/// the coherence scores are treated as constants in the backward pass.
pub fn fuse_vars(
    g: &mut Graph<'_>,
    left: Var,
    right: Var,
    mode: FusionMode,
    detach_scores: bool,
) -> Result<Var, TensorError> {
    match mode {
        FusionMode::Concat => g.concat(left, right),
        FusionMode::Add => g.add(left, right),
        FusionMode::Reweight => {
            let mut s = g.coherence(left, right, COHERENCE_EPS)?;
            if detach_scores {
                s = g.detach(s);
            }
            let l = g.channel_scale(left, s)?;
            let r = g.channel_scale(right, s)?;
            g.add(l, r)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeadOutput {
    /// `(n, classes, 1, 1)`
    pub logits: Var,
    /// `(n, 8, 1, 1)`: center offset, log-size offset, orientation vector.
    pub offsets: Var,
}

/// FC → ReLU → FC → ReLU, then parallel linear classification and
/// regression layers.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionHead {
    pub prefix: String,
    pub in_features: usize,
    pub hidden: usize,
    pub classes: usize,
    fc1: (ParamId, ParamId),
    fc2: (ParamId, ParamId),
    cls: (ParamId, ParamId),
    reg: (ParamId, ParamId),
}

pub const REG_OUTPUTS: usize = 8;

impl DetectionHead {
    pub fn new(
        params: &mut ParamSet,
        prefix: &str,
        in_features: usize,
        hidden: usize,
        classes: usize,
        seed: u64,
    ) -> Result<Self, TensorError> {
        let mut layer =
            |name: &str, fan_in: usize, out: usize| -> Result<(ParamId, ParamId), TensorError> {
                let w = add_xavier(
                    params,
                    &format!("{prefix}.{name}.w"),
                    [out, fan_in, 1, 1],
                    seed,
                )?;
                let b = params.add(format!("{prefix}.{name}.b"), Tensor4::zeros([1, out, 1, 1]));
                Ok((w, b))
            };
        Ok(DetectionHead {
            prefix: prefix.into(),
            in_features,
            hidden,
            classes,
            fc1: layer("fc1", in_features, hidden)?,
            fc2: layer("fc2", hidden, hidden)?,
            cls: layer("cls", hidden, classes)?,
            reg: layer("reg", hidden, REG_OUTPUTS)?,
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<HeadOutput, TensorError> {
        let item = g.value(x).item_len();
        if item != self.in_features {
            return Err(TensorError::ShapeMismatch {
                op: "detection head",
                detail: format!("{} input features, head expects {}", item, self.in_features),
            });
        }
        let fc = |g: &mut Graph<'_>, x: Var, (w, b): (ParamId, ParamId)| {
            let (w, b) = (g.param(w), g.param(b));
            g.linear(x, w, Some(b))
        };
        let h = fc(g, x, self.fc1)?;
        let h = g.relu(h);
        let h = fc(g, h, self.fc2)?;
        let h = g.relu(h);
        Ok(HeadOutput {
            logits: fc(g, h, self.cls)?,
            offsets: fc(g, h, self.reg)?,
        })
    }

    pub fn param_ids(&self) -> [ParamId; 8] {
        [
            self.fc1.0, self.fc1.1, self.fc2.0, self.fc2.1, self.cls.0, self.cls.1, self.reg.0,
            self.reg.1,
        ]
    }
}
