//! Central finite-difference verification of tape gradients.

use super::layers::Vars;
use super::tape::{Tape, Var};
use super::tensor::ParamSet;
use crate::error::{Error, Result};

/// Gradients smaller than this are compared on an absolute scale.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub analytic: f64,
    pub numeric: f64,
    pub coordinates: usize,
}

/// `|a - n| / max(|a|, |n|, RELATIVE_ERROR_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_ERROR_FLOOR)
}

fn output_value(tape: &Tape, out: Var, what: impl FnOnce() -> String) -> Result<f64> {
    let v = tape.value(out).data()[0];
    if !v.is_finite() {
        return Err(Error::NonFinite(format!("function value {v} at {}", what())));
    }
    Ok(v)
}

/// Compare reverse-mode gradients of the scalar `f` against central
/// differences at every trainable coordinate of `point`.
///
/// `f` is recorded once; each perturbed evaluation re-runs only the nodes
/// downstream of the perturbed parameter, with the same forward code.
pub fn grad_check<F>(f: F, point: &ParamSet, eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &Vars) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::Domain(format!("finite-difference step must be positive, got {eps}")));
    }
    let mut tape = Tape::new();
    let vars = tape.load_params(point);
    let out = f(&mut tape, &vars)?;
    if tape.value(out).numel() != 1 {
        return Err(Error::Shape(format!("grad_check needs a scalar function, got {:?}", tape.value(out).shape())));
    }
    output_value(&tape, out, || "check point".into())?;
    let grads = tape.backward(out)?;
    let analytic = tape.param_grads(&grads, &vars, point);

    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst: None,
        analytic: 0.0,
        numeric: 0.0,
        coordinates: 0,
    };
    for (name, g) in &analytic {
        let leaf = vars[name];
        let mut deps = tape.dependents(leaf);
        deps.retain(|&d| d <= out.index());
        let reaches = deps.last() == Some(&out.index());
        for i in 0..g.numel() {
            let numeric = if reaches {
                let orig = tape.leaf_data_mut(leaf)[i];
                tape.leaf_data_mut(leaf)[i] = orig + eps;
                tape.recompute(&deps)?;
                let plus = output_value(&tape, out, || format!("{name}[{i}] + eps"))?;
                tape.leaf_data_mut(leaf)[i] = orig - eps;
                tape.recompute(&deps)?;
                let minus = output_value(&tape, out, || format!("{name}[{i}] - eps"))?;
                tape.leaf_data_mut(leaf)[i] = orig;
                (plus - minus) / (2.0 * eps)
            } else {
                0.0
            };
            let a = g.data()[i];
            let err = relative_error(a, numeric);
            report.coordinates += 1;
            if err > report.max_relative_error || report.worst.is_none() {
                report.max_relative_error = err;
                report.worst = Some((name.clone(), i));
                report.analytic = a;
                report.numeric = numeric;
            }
        }
        if reaches {
            tape.recompute(&deps)?;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::tensor::Tensor;

    #[test]
    fn square_at_three() {
        let mut p = ParamSet::new();
        p.insert("x", Tensor::scalar(3.0), true).unwrap();
        let r = grad_check(
            |t, v| {
                let x = v["x"];
                t.matmul(x, x)
            },
            &p,
            1e-5,
        )
        .unwrap();
        assert!(r.max_relative_error < 1e-9, "{r:?}");
        assert!((r.analytic - 6.0).abs() < 1e-12);
    }

    #[test]
    fn huber_quadratic_branch() {
        let mut p = ParamSet::new();
        p.insert("pred", Tensor::row(vec![0.5, -3.0]).unwrap(), true).unwrap();
        let r = grad_check(|t, v| t.huber(v["pred"], &[0.0, 0.0], 1.0), &p, 1e-5).unwrap();
        assert!(r.max_relative_error < 1e-6, "{r:?}");
    }

    #[test]
    fn non_finite_reports() {
        let mut p = ParamSet::new();
        p.insert("x", Tensor::scalar(f64::INFINITY), true).unwrap();
        assert!(grad_check(|t, v| t.sum(v["x"]), &p, 1e-5).is_err());
    }
}
