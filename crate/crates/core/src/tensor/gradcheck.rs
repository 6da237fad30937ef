//! Central-difference verification of reverse-mode gradients.

use super::tape::{Tape, Var};
use super::ParamStore;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use indexmap::IndexMap;

/// Relative error uses `|a−b| / max(|a|, |b|, FLOOR)`: gradients near zero
/// are compared absolutely so finite-difference noise (≈1e-10 at h=1e-5)
/// cannot dominate the ratio.
const REL_FLOOR: f64 = 1e-3;

/// Worst disagreement for one parameter tensor.
#[derive(Debug, Clone)]
pub struct GradCheckEntry {
    pub name: String,
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Per-tensor comparison of reverse-mode and central-difference gradients.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_err() < self.tol
    }

    /// One line per failing tensor, for test diagnostics.
    pub fn failures(&self) -> String {
        self.entries
            .iter()
            .filter(|e| e.max_rel_err >= self.tol)
            .map(|e| {
                format!(
                    "{}: rel {:.3e} at [{}] (analytic {:.6e}, numeric {:.6e})",
                    e.name, e.max_rel_err, e.worst_index, e.analytic, e.numeric
                )
            })
            .collect::<Vec<_>>()
            .join("\n")
    }
}

/// Run `f`, backpropagate, and collect `d(loss)/d(param)` per store entry.
/// Returns the loss value alongside the gradients.
pub fn analytic_gradients<S, F>(
    f: &mut F,
    params: &ParamStore<S>,
) -> Result<(f64, IndexMap<String, Vec<f64>>)>
where
    S: Scalar,
    F: FnMut(&ParamStore<S>) -> Result<(Tape<S>, Var)>,
{
    let (mut tape, out) = f(params)?;
    let value = tape.scalar_value(out).f64();
    tape.backward(out)?;

    let mut shadow = params.clone();
    shadow.zero_grads();
    tape.accumulate_param_grads(&mut shadow)?;
    let mut grads = IndexMap::new();
    for (name, t) in shadow.iter() {
        let g = t.grad().map(|g| g.iter().map(|v| v.f64()).collect()).unwrap_or_default();
        grads.insert(name.to_string(), g);
    }
    Ok((value, grads))
}

/// Central differences `(f(θ+h) − f(θ−h)) / 2h` for every parameter entry.
pub fn numeric_gradients<S, F>(
    f: &mut F,
    params: &mut ParamStore<S>,
    h: f64,
) -> Result<IndexMap<String, Vec<f64>>>
where
    S: Scalar,
    F: FnMut(&ParamStore<S>) -> Result<(Tape<S>, Var)>,
{
    let names: Vec<String> = params.names().map(str::to_string).collect();
    let mut grads = IndexMap::new();
    for name in names {
        let n = params.get(&name)?.numel();
        let mut g = vec![0.0f64; n];
        for i in 0..n {
            let old = params.get(&name)?.data()[i];
            params.get_mut(&name)?.data_mut()[i] = S::c(old.f64() + h);
            let (tape, out) = f(params)?;
            let plus = tape.scalar_value(out).f64();
            params.get_mut(&name)?.data_mut()[i] = S::c(old.f64() - h);
            let (tape, out) = f(params)?;
            let minus = tape.scalar_value(out).f64();
            params.get_mut(&name)?.data_mut()[i] = old;
            g[i] = (plus - minus) / (2.0 * h);
        }
        grads.insert(name, g);
    }
    Ok(grads)
}

/// Build the per-tensor report from two gradient maps (analytic first).
pub fn compare_gradients(
    analytic: &IndexMap<String, Vec<f64>>,
    numeric: &IndexMap<String, Vec<f64>>,
    tol: f64,
) -> GradCheckReport {
    let mut entries = Vec::new();
    for (name, a) in analytic {
        let n = numeric.get(name).map(Vec::as_slice).unwrap_or(&[]);
        let mut worst = GradCheckEntry {
            name: name.clone(),
            max_rel_err: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        // An untouched tensor yields an empty analytic gradient: all zeros.
        let len = n.len().max(a.len());
        for i in 0..len {
            let av = a.get(i).copied().unwrap_or(0.0);
            let nv = n.get(i).copied().unwrap_or(0.0);
            let rel = (av - nv).abs() / av.abs().max(nv.abs()).max(REL_FLOOR);
            if rel > worst.max_rel_err {
                worst.max_rel_err = rel;
                worst.worst_index = i;
                worst.analytic = av;
                worst.numeric = nv;
            }
        }
        entries.push(worst);
    }
    GradCheckReport { entries, tol }
}

/// Check the reverse-mode gradient of a deterministic scalar computation
/// against central differences over every entry of `params`.
///
/// `f` must rebuild the forward pass from the store on each call. Two
/// evaluations at the same point must agree exactly; any drift is reported as
/// a hard error rather than folded into the tolerance.
pub fn check_gradients<S, F>(
    mut f: F,
    params: &mut ParamStore<S>,
    h: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    S: Scalar,
    F: FnMut(&ParamStore<S>) -> Result<(Tape<S>, Var)>,
{
    if !(1e-6..=1e-4).contains(&h) {
        return Err(Error::Domain(format!("step h={h} outside [1e-6, 1e-4]")));
    }
    let (v0, analytic) = analytic_gradients(&mut f, params)?;
    let (tape, out) = f(params)?;
    let v1 = tape.scalar_value(out).f64();
    if v0 != v1 {
        return Err(Error::NonDeterministic(format!(
            "forward passes disagree: {v0:?} vs {v1:?}"
        )));
    }
    let numeric = numeric_gradients(&mut f, params, h)?;
    Ok(compare_gradients(&analytic, &numeric, tol))
}
