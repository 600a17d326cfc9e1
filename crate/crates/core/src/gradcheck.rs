//! Central-difference verification of analytic gradients.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::{ParamSet, Session};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;
const DENOM_FLOOR: f64 = 1e-8;
/// Denominator floor for whole-model parameter checks. At `h = 1e-5` the
/// central difference of an O(1) loss carries about 1e-11 of round-off, so
/// a 1e-4 relative bound is only resolvable for gradients above ~1e-7.
pub const PARAM_DENOM_FLOOR: f64 = 1e-6;

fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(floor)
}

/// Max over coordinates of `|analytic - numeric| / max(|analytic|, 1e-8)`.
///
/// `f` builds a scalar from `x` on a fresh graph; it is evaluated once with
/// backward and twice per coordinate for the central differences.
pub fn finite_diff_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let eval = |t: &Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.input("x", t.clone());
        let out = f(&mut g, v)?;
        Ok(g.value(out).item())
    };

    let mut g = Graph::new();
    let v = g.input("x", x.clone());
    let out = f(&mut g, v)?;
    let grads = g.backward(out)?;
    let analytic = grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));

    let mut worst = 0.0f64;
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = eval(&probe)?;
        probe.data_mut()[i] = orig - h;
        let minus = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        worst = worst.max(relative_error(analytic.data()[i], numeric, DENOM_FLOOR));
    }
    Ok(worst)
}

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub max_relative_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub coordinates: usize,
    /// Coordinates with `|analytic| < PARAM_DENOM_FLOOR`, judged on absolute error.
    pub floored_coordinates: usize,
}

/// Checks `d loss / d param` for every coordinate of every parameter whose
/// name passes `select`, with error `|a - n| / max(|a|, PARAM_DENOM_FLOOR)`.
/// The loss is rebuilt in evaluation mode each time.
pub fn check_param_gradients<F>(params: &ParamSet, loss: F, h: f64, select: impl Fn(&str) -> bool) -> Result<ParamCheck>
where
    F: Fn(&mut Session) -> Result<Var>,
{
    let eval = |p: &ParamSet| -> Result<f64> {
        let mut s = Session::eval(p);
        let l = loss(&mut s)?;
        Ok(s.graph.value(l).item())
    };

    let analytic = {
        let mut s = Session::eval(params);
        let l = loss(&mut s)?;
        s.param_grads(l)?
    };

    let mut probe = params.clone();
    let mut report = ParamCheck {
        max_relative_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        coordinates: 0,
        floored_coordinates: 0,
    };
    let names: Vec<String> = params.names().filter(|n| select(n)).map(String::from).collect();
    for name in names {
        let n = params.tensor(&name)?.numel();
        for i in 0..n {
            let orig = params.tensor(&name)?.data()[i];
            probe.tensor_mut(&name)?.data_mut()[i] = orig + h;
            let plus = eval(&probe)?;
            probe.tensor_mut(&name)?.data_mut()[i] = orig - h;
            let minus = eval(&probe)?;
            probe.tensor_mut(&name)?.data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic.get(&name).map_or(0.0, |t| t.data()[i]);
            report.coordinates += 1;
            if a.abs() < PARAM_DENOM_FLOOR {
                report.floored_coordinates += 1;
            }
            let err = relative_error(a, numeric, PARAM_DENOM_FLOOR);
            if err > report.max_relative_error {
                report.max_relative_error = err;
                report.worst_param = name.clone();
                report.worst_index = i;
            }
        }
    }
    Ok(report)
}
