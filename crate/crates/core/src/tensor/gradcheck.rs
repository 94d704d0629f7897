//! Central finite-difference verification of reverse-mode gradients.

use alloc::string::String;
use alloc::vec::Vec;

use super::{Graph, ParamSet, TensorError, Var};

pub const DEFAULT_STEP: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    /// `max|a − n| / max(max|a|, max|n|)` over the tensor's entries.
    pub rel_err: f64,
    pub max_abs_err: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.params.iter().map(|p| p.rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.rel_err <= self.tolerance)
    }

    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params
            .iter()
            .max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
    }
}

fn evaluate<F>(params: &ParamSet, f: &F) -> Result<f64, TensorError>
where
    F: Fn(&mut Graph<'_>) -> Result<Var, TensorError>,
{
    let mut g = Graph::with_params(params);
    let out = f(&mut g)?;
    Ok(g.value(out).item())
}

/// Compares the backward pass of the scalar built by `f` against central
/// differences with step `h` for every parameter in `params`.
///
/// `params` is perturbed in place and restored before returning.
pub fn gradient_check<F>(
    params: &mut ParamSet,
    h: f64,
    tolerance: f64,
    f: F,
) -> Result<GradCheckReport, TensorError>
where
    F: Fn(&mut Graph<'_>) -> Result<Var, TensorError>,
{
    let analytic: Vec<Vec<f64>> = {
        let mut g = Graph::with_params(params);
        let out = f(&mut g)?;
        let grads = g.backward(out);
        params
            .ids()
            .map(|id| match grads.param(id) {
                Some(t) => t.data().to_vec(),
                None => alloc::vec![0.0; params[id].value.len()],
            })
            .collect()
    };
    let ids: Vec<_> = params.ids().collect();
    let mut report = Vec::with_capacity(ids.len());
    for (id, a) in ids.into_iter().zip(analytic) {
        let mut numeric = Vec::with_capacity(a.len());
        for j in 0..a.len() {
            let orig = params[id].value.data()[j];
            params[id].value.data_mut()[j] = orig + h;
            let up = evaluate(params, &f);
            params[id].value.data_mut()[j] = orig - h;
            let down = evaluate(params, &f);
            params[id].value.data_mut()[j] = orig;
            numeric.push((up? - down?) / (2.0 * h));
        }
        let max_abs_err = a
            .iter()
            .zip(&numeric)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        let scale = a
            .iter()
            .chain(&numeric)
            .map(|v| v.abs())
            .fold(0.0, f64::max);
        let rel_err = if scale > 0.0 {
            max_abs_err / scale
        } else {
            0.0
        };
        report.push(ParamCheck {
            name: params[id].name.clone(),
            rel_err,
            max_abs_err,
        });
    }
    Ok(GradCheckReport {
        params: report,
        tolerance,
    })
}
