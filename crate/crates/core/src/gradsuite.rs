//! A randomized finite-difference sweep over every differentiable graph
//! operation and over the fused stereo block feeding a detection head.

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::gradcheck::{gradient_check, GradCheckReport, DEFAULT_STEP};
use crate::tensor::{Graph, ParamSet, Tensor4, TensorError, Var};
use crate::tlnet::{fuse_vars, DetectionHead, FusionMode};

/// Tolerance for single operations.
pub const OP_TOLERANCE: f64 = 1e-5;
/// Tolerance for compositions through the coherence score.
pub const BLOCK_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteCase {
    pub op: &'static str,
    pub report: GradCheckReport,
}

impl SuiteCase {
    pub fn passed(&self) -> bool {
        self.report.passed()
    }
}

fn random(rng: &mut ChaCha8Rng, dims: [usize; 4]) -> Tensor4 {
    let n = dims.iter().product();
    Tensor4::from_vec(dims, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Values bounded away from zero, so ReLU kinks stay out of reach of the
/// finite-difference step.
fn off_zero(rng: &mut ChaCha8Rng, dims: [usize; 4]) -> Tensor4 {
    let n = dims.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.gen_range(0.05..1.0);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor4::from_vec(dims, data).unwrap()
}

/// Distinct values at least 0.01 apart in shuffled order, so max-pool
/// winners never change under perturbation.
fn separated(rng: &mut ChaCha8Rng, dims: [usize; 4]) -> Tensor4 {
    let n: usize = dims.iter().product();
    let mut data: Vec<f64> = (0..n)
        .map(|i| (i as f64 - n as f64 / 2.0) * 0.01 * (1.0 + rng.gen_range(0.0..0.5)))
        .collect();
    for i in (1..n).rev() {
        data.swap(i, rng.gen_range(0..=i));
    }
    Tensor4::from_vec(dims, data).unwrap()
}

fn probe(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn case<F>(op: &'static str, ps: &mut ParamSet, tol: f64, f: F) -> Result<SuiteCase, TensorError>
where
    F: Fn(&mut Graph<'_>) -> Result<Var, TensorError>,
{
    Ok(SuiteCase {
        op,
        report: gradient_check(ps, DEFAULT_STEP, tol, f)?,
    })
}

/// One randomized configuration of every operation, drawn from `seed`.
/// Each case reduces the operation's output to a scalar with a random
/// linear probe.
pub fn run_suite(seed: u64) -> Result<Vec<SuiteCase>, TensorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let c = rng.gen_range(1..4);
    let h = rng.gen_range(2..5);
    let w = rng.gen_range(2..5);

    {
        let c_out = rng.gen_range(1..4);
        let k = if rng.gen_bool(0.5) { 3 } else { 1 };
        let stride = rng.gen_range(1..3);
        let pad = rng.gen_range(0..k.min(2));
        let mut ps = ParamSet::new();
        let x = ps.add("x", random(&mut rng, [1, c, h + 2, w + 2]));
        let wt = ps.add("w", random(&mut rng, [c_out, c, k, k]));
        let b = ps.add("b", random(&mut rng, [1, c_out, 1, 1]));
        let oh = (h + 2 + 2 * pad - k) / stride + 1;
        let ow = (w + 2 + 2 * pad - k) / stride + 1;
        let p = probe(&mut rng, c_out * oh * ow);
        out.push(case("conv2d", &mut ps, OP_TOLERANCE, |g| {
            let (xv, wv, bv) = (g.param(x), g.param(wt), g.param(b));
            let y = g.conv2d(xv, wv, Some(bv), stride, pad)?;
            g.dot_const(y, p.clone())
        })?);
    }
    {
        let mut ps = ParamSet::new();
        let x = ps.add("x", off_zero(&mut rng, [2, c, h, w]));
        let p = probe(&mut rng, 2 * c * h * w);
        out.push(case("relu", &mut ps, OP_TOLERANCE, |g| {
            let xv = g.param(x);
            let y = g.relu(xv);
            g.dot_const(y, p.clone())
        })?);
    }
    {
        let mut ps = ParamSet::new();
        let x = ps.add("x", separated(&mut rng, [1, c, 2 * h, 2 * w]));
        let p = probe(&mut rng, c * h * w);
        out.push(case("maxpool2", &mut ps, OP_TOLERANCE, |g| {
            let xv = g.param(x);
            let y = g.maxpool2(xv)?;
            g.dot_const(y, p.clone())
        })?);
    }
    {
        let mut ps = ParamSet::new();
        let x = ps.add("x", random(&mut rng, [1, c, h, w]));
        let p = probe(&mut rng, 4 * c * h * w);
        out.push(case("upsample2", &mut ps, OP_TOLERANCE, |g| {
            let xv = g.param(x);
            let y = g.upsample2(xv);
            g.dot_const(y, p.clone())
        })?);
    }
    {
        let mut ps = ParamSet::new();
        let a = ps.add("a", random(&mut rng, [2, c, h, w]));
        let b = ps.add("b", random(&mut rng, [2, c, h, w]));
        let p1 = probe(&mut rng, 2 * c * h * w);
        let p2 = probe(&mut rng, 4 * c * h * w);
        out.push(case("add", &mut ps, OP_TOLERANCE, |g| {
            let (av, bv) = (g.param(a), g.param(b));
            let y = g.add(av, bv)?;
            g.dot_const(y, p1.clone())
        })?);
        out.push(case("concat", &mut ps, OP_TOLERANCE, |g| {
            let (av, bv) = (g.param(a), g.param(b));
            let y = g.concat(av, bv)?;
            g.dot_const(y, p2.clone())
        })?);
    }
    {
        let mut ps = ParamSet::new();
        let x = ps.add("x", random(&mut rng, [2, c, h, w]));
        let s = ps.add("s", random(&mut rng, [2, c, 1, 1]));
        let p = probe(&mut rng, 2 * c * h * w);
        out.push(case("channel_scale", &mut ps, OP_TOLERANCE, |g| {
            let (xv, sv) = (g.param(x), g.param(s));
            let y = g.channel_scale(xv, sv)?;
            g.dot_const(y, p.clone())
        })?);
    }
    {
        let mut ps = ParamSet::new();
        let l = ps.add("l", random(&mut rng, [2, c, h, w]));
        let r = ps.add("r", random(&mut rng, [2, c, h, w]));
        let p = probe(&mut rng, 2 * c);
        out.push(case("coherence", &mut ps, OP_TOLERANCE, |g| {
            let (lv, rv) = (g.param(l), g.param(r));
            let y = g.coherence(lv, rv, crate::tlnet::COHERENCE_EPS)?;
            g.dot_const(y, p.clone())
        })?);
    }
    {
        let n_out = rng.gen_range(1..5);
        let mut ps = ParamSet::new();
        let x = ps.add("x", random(&mut rng, [3, c, h, w]));
        let wt = ps.add("w", random(&mut rng, [n_out, c * h * w, 1, 1]));
        let b = ps.add("b", random(&mut rng, [1, n_out, 1, 1]));
        let p = probe(&mut rng, 3 * n_out);
        out.push(case("linear", &mut ps, OP_TOLERANCE, |g| {
            let (xv, wv, bv) = (g.param(x), g.param(wt), g.param(b));
            let y = g.linear(xv, wv, Some(bv))?;
            g.dot_const(y, p.clone())
        })?);
    }
    {
        let (fh, fw) = (h + 3, w + 3);
        let bins = rng.gen_range(1..4);
        let mut ps = ParamSet::new();
        let x = ps.add("x", random(&mut rng, [1, c, fh, fw]));
        let rois: Vec<[f64; 4]> = (0..3)
            .map(|_| {
                let x0 = rng.gen_range(-1.0..fw as f64 - 1.0);
                let y0 = rng.gen_range(-1.0..fh as f64 - 1.0);
                [
                    x0,
                    y0,
                    x0 + rng.gen_range(0.5..3.0),
                    y0 + rng.gen_range(0.5..3.0),
                ]
            })
            .collect();
        let p = probe(&mut rng, 3 * c * bins * bins);
        out.push(case("roi_align", &mut ps, OP_TOLERANCE, |g| {
            let xv = g.param(x);
            let y = g.roi_align(xv, &rois, bins, bins)?;
            g.dot_const(y, p.clone())
        })?);
    }
    {
        let k = rng.gen_range(2..5);
        let n = rng.gen_range(1..4);
        let mut ps = ParamSet::new();
        let logits = ps.add("logits", random(&mut rng, [n, k, 2, 2]));
        let labels: Vec<Option<usize>> = (0..n * 4)
            .map(|i| {
                if i % 3 == 2 {
                    None
                } else {
                    Some(rng.gen_range(0..k))
                }
            })
            .collect();
        out.push(case("softmax_cross_entropy", &mut ps, OP_TOLERANCE, |g| {
            let l = g.param(logits);
            g.softmax_cross_entropy(l, &labels)
        })?);
    }
    {
        let n = rng.gen_range(1..4);
        let mut ps = ParamSet::new();
        let pred = ps.add("pred", random(&mut rng, [n, 8, 1, 1]));
        // residuals kept away from the kink at |r| = beta
        let target: Vec<f64> = ps[pred]
            .value
            .data()
            .to_vec()
            .into_iter()
            .map(|p| {
                let r = if rng.gen_bool(0.5) {
                    rng.gen_range(-0.9..0.9)
                } else {
                    rng.gen_range(1.1..3.0)
                };
                p + r
            })
            .collect();
        let mut mask: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.7)).collect();
        mask[0] = true;
        out.push(case("smooth_l1", &mut ps, OP_TOLERANCE, |g| {
            let p = g.param(pred);
            g.smooth_l1(p, &target, &mask, 1.0)
        })?);
    }
    {
        let mut ps = ParamSet::new();
        let a = ps.add("a", random(&mut rng, [1, 1, 1, 1]));
        let b = ps.add("b", random(&mut rng, [1, 1, 1, 1]));
        let (ka, kb) = (rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0));
        out.push(case("weighted_sum", &mut ps, OP_TOLERANCE, |g| {
            let (av, bv) = (g.param(a), g.param(b));
            g.weighted_sum(&[(av, ka), (bv, kb)])
        })?);
    }
    out.push(block_case(&mut rng, c, h, w)?);
    Ok(out)
}

/// Coherence → reweight → add → detection head → classification and
/// regression losses, differentiated with respect to both RoI crops and all
/// head weights.
fn block_case(
    rng: &mut ChaCha8Rng,
    c: usize,
    h: usize,
    w: usize,
) -> Result<SuiteCase, TensorError> {
    let n = 2;
    let mut ps = ParamSet::new();
    let l = ps.add("left", random(rng, [n, c, h, w]));
    let r = ps.add("right", random(rng, [n, c, h, w]));
    let head = DetectionHead::new(&mut ps, "head", c * h * w, 6, 3, rng.gen())?;
    // Biases move the hidden pre-activations off zero.
    for p in ps.iter_mut().filter(|p| p.name.ends_with(".b")) {
        for v in p.value.data_mut() {
            *v = rng.gen_range(-0.5..0.5);
        }
    }
    let labels = vec![Some(rng.gen_range(0..3)), Some(rng.gen_range(0..3))];
    let target: Vec<f64> = (0..n * 8).map(|_| rng.gen_range(-3.0..3.0)).collect();
    let mask = vec![true, rng.gen_bool(0.5)];
    case(
        "coherence_reweight_add_head",
        &mut ps,
        BLOCK_TOLERANCE,
        |g| {
            let (lv, rv) = (g.param(l), g.param(r));
            let fused = fuse_vars(g, lv, rv, FusionMode::Reweight, false)?;
            let o = head.forward(g, fused)?;
            let ce = g.softmax_cross_entropy(o.logits, &labels)?;
            let sl = g.smooth_l1(o.offsets, &target, &mask, 1.0)?;
            g.weighted_sum(&[(ce, 1.0), (sl, 1.0)])
        },
    )
}
