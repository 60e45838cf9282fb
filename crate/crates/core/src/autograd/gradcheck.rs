//! Finite-difference verification of tape gradients.

use std::collections::BTreeMap;

use super::{AutogradError, ParameterSet, Tape, Var};

/// Central-difference step. Chosen against `f64` noise: small enough that
/// the O(h²) truncation term vanishes, large enough that cancellation in
/// `f(θ+h) − f(θ−h)` stays well below the comparison tolerance.
pub const FD_STEP: f64 = 1e-5;

/// Outcome of a finite-difference sweep over every parameter element.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub tolerance: f64,
    /// Worst relative error seen per parameter.
    pub per_param: BTreeMap<String, f64>,
    pub max_rel_err: f64,
    pub worst_param: Option<String>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tolerance
    }
}

/// Compares tape gradients of `f` against central differences, element by
/// element, over every parameter in `params`.
///
/// `f` rebuilds the forward graph on the tape it is given and returns the
/// scalar loss. The relative error uses a unit floor —
/// `|a − n| / max(1, |a|, |n|)` — so that near-zero gradients are compared
/// absolutely instead of amplifying finite-difference noise.
pub fn grad_check<F>(
    f: F,
    params: &ParameterSet,
    tolerance: f64,
) -> Result<GradCheckReport, AutogradError>
where
    F: for<'t> Fn(&'t Tape, &BTreeMap<String, Var<'t>>) -> Result<Var<'t>, AutogradError>,
{
    let eval = |p: &ParameterSet| -> Result<f64, AutogradError> {
        let tape = Tape::new();
        let vars = tape.register(p)?;
        let loss = f(&tape, &vars)?;
        Ok(loss.value().item())
    };

    // Analytic gradients once, at the base point.
    let analytic = {
        let tape = Tape::new();
        let vars = tape.register(params)?;
        let loss = f(&tape, &vars)?;
        let grads = tape.backward(loss)?;
        grads.named(&vars)
    };

    let mut work = params.clone();
    let mut per_param = BTreeMap::new();
    let mut max_rel_err = 0.0_f64;
    let mut worst_param = None;
    let names: Vec<String> = params.names().cloned().collect();
    for name in names {
        let mut worst_here = 0.0_f64;
        let len = params.get(&name).expect("known name").len();
        for i in 0..len {
            let base = work.get(&name).expect("known name").data()[i];
            work.get_mut(&name).expect("known name").data_mut()[i] = base + FD_STEP;
            let plus = eval(&work)?;
            work.get_mut(&name).expect("known name").data_mut()[i] = base - FD_STEP;
            let minus = eval(&work)?;
            work.get_mut(&name).expect("known name").data_mut()[i] = base;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let a = analytic.get(&name).expect("known name").data()[i];
            let rel = (a - numeric).abs() / 1.0_f64.max(a.abs()).max(numeric.abs());
            worst_here = worst_here.max(rel);
        }
        if worst_here > max_rel_err {
            max_rel_err = worst_here;
            worst_param = Some(name.clone());
        }
        per_param.insert(name, worst_here);
    }
    Ok(GradCheckReport {
        tolerance,
        per_param,
        max_rel_err,
        worst_param,
    })
}
