//! Central finite-difference verification of analytic gradients.

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Probe at most this many evenly spaced elements per input.
    pub max_probes: Option<usize>,
    /// Denominator floor for the relative error.
    pub floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            max_probes: None,
            floor: 1e-3,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// (input, element) of the worst relative error.
    pub worst: Option<(usize, usize)>,
    pub probes: usize,
}

/// Fixed weights for reducing a non-scalar output to a scalar. Non-uniform so
/// that sum-preserving ops such as softmax still have a non-trivial gradient.
fn reduction_weight(k: usize) -> f64 {
    0.5 + (k as f64 * 0.618_033_988_749_895).fract()
}

fn reduce<'t>(out: Var<'t>) -> Result<Var<'t>> {
    if out.numel() == 1 {
        return Ok(out.sum());
    }
    let w = Tensor::from_fn(&out.shape(), reduction_weight);
    Ok(out.mul_const(&w)?.sum())
}

fn evaluate<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    Ok(reduce(f(&tape, &vars)?)?.item())
}

/// Relative error `|a − n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

pub fn finite_diff_check<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    finite_diff_check_with(
        f,
        inputs,
        GradCheckOptions {
            eps,
            ..GradCheckOptions::default()
        },
    )
}

/// Compares the analytic gradient of `f` (reduced to a scalar by a fixed
/// weighted sum) against central differences `(f(x+ε) − f(x−ε)) / 2ε`.
pub fn finite_diff_check_with<F>(f: F, inputs: &[Tensor], opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let analytic: Vec<Tensor> = {
        let tape = Tape::new();
        let vars: Vec<_> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let root = reduce(f(&tape, &vars)?)?;
        let grads = tape.backward(root)?;
        vars.iter().map(|&v| grads.wrt(v)).collect()
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst: None,
        probes: 0,
    };
    let mut probe = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let n = input.numel();
        let picks: Vec<usize> = match opts.max_probes {
            Some(m) if m < n => (0..m).map(|k| k * n / m).collect(),
            _ => (0..n).collect(),
        };
        for j in picks {
            let x0 = input.data()[j];
            probe[i].data_mut()[j] = x0 + opts.eps;
            let plus = evaluate(&f, &probe)?;
            probe[i].data_mut()[j] = x0 - opts.eps;
            let minus = evaluate(&f, &probe)?;
            probe[i].data_mut()[j] = x0;
            let numeric = (plus - minus) / (2.0 * opts.eps);
            let a = analytic[i].data()[j];
            let rel = relative_error(a, numeric, opts.floor);
            report.probes += 1;
            report.max_abs_error = report.max_abs_error.max((a - numeric).abs());
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                report.worst = Some((i, j));
            }
        }
    }
    Ok(report)
}

/// Like [`finite_diff_check_with`] but differentiates with respect to
/// parameters `ids` of `store`. Every evaluation runs on a fresh copy of the
/// store, so state updated during the forward pass does not leak between probes.
pub fn finite_diff_check_params<F>(store: &ParamStore, ids: &[ParamId], f: F, opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &mut ParamStore) -> Result<Var<'t>>,
{
    let eval = |st: &ParamStore| -> Result<f64> {
        let tape = Tape::new();
        let mut st = st.clone();
        Ok(reduce(f(&tape, &mut st)?)?.item())
    };
    let analytic: Vec<Tensor> = {
        let tape = Tape::new();
        let mut st = store.clone();
        let root = reduce(f(&tape, &mut st)?)?;
        let grads = tape.backward(root)?;
        ids.iter()
            .map(|&id| grads.param(id).cloned().unwrap_or_else(|| Tensor::zeros(store.value(id).shape())))
            .collect()
    };
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst: None,
        probes: 0,
    };
    let mut probe = store.clone();
    for (i, &id) in ids.iter().enumerate() {
        let n = store.value(id).numel();
        let picks: Vec<usize> = match opts.max_probes {
            Some(m) if m < n => (0..m).map(|k| k * n / m).collect(),
            _ => (0..n).collect(),
        };
        for j in picks {
            let x0 = store.value(id).data()[j];
            probe.value_mut(id).data_mut()[j] = x0 + opts.eps;
            let plus = eval(&probe)?;
            probe.value_mut(id).data_mut()[j] = x0 - opts.eps;
            let minus = eval(&probe)?;
            probe.value_mut(id).data_mut()[j] = x0;
            let numeric = (plus - minus) / (2.0 * opts.eps);
            let a = analytic[i].data()[j];
            let rel = relative_error(a, numeric, opts.floor);
            report.probes += 1;
            report.max_abs_error = report.max_abs_error.max((a - numeric).abs());
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                report.worst = Some((i, j));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_op_is_exact_to_rounding() {
        let x = Tensor::from_fn(&[5], |i| i as f64 - 2.0);
        let r = finite_diff_check(|_, v| Ok(v[0].scale(3.0).add_scalar(1.0)), &[x], 1e-5).unwrap();
        assert!(r.max_rel_error < 1e-9, "{r:?}");
        assert_eq!(r.probes, 5);
    }

    #[test]
    fn sigmoid_chain_within_1e6() {
        let x = Tensor::from_fn(&[6], |i| (i as f64 * 0.9).sin() * 2.0);
        let r = finite_diff_check(
            |_, v| Ok(v[0].sigmoid().scale(2.0).sigmoid().exp()),
            &[x],
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
    }

    #[test]
    fn corrupted_gradient_is_detected() {
        let x = Tensor::from_fn(&[4], |i| 0.3 + i as f64);
        let r = finite_diff_check(
            |tape, v| {
                let x = v[0];
                let value = x.value().map(|a| a * a);
                let saved = x.value();
                // claims d(x²)/dx = 3x
                Ok(tape.op(value, &[x], move |g| {
                    vec![g.zip_map(&saved, |g, x| 3.0 * g * x).unwrap()]
                }))
            },
            &[x],
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error > 1e-2, "{r:?}");
    }

    #[test]
    fn probe_limit_is_respected() {
        let x = Tensor::from_fn(&[100], |i| i as f64 * 0.01);
        let r = finite_diff_check_with(
            |_, v| Ok(v[0].square()),
            &[x],
            GradCheckOptions {
                max_probes: Some(7),
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(r.probes, 7);
    }
}
