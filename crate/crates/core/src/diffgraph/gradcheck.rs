use super::graph::{Graph, Var};
use super::params::ParamStore;
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Entries checked per parameter tensor; `None` checks every entry.
    pub max_entries_per_tensor: Option<usize>,
    /// Restrict the check to parameters whose name starts with one of these.
    pub prefixes: Option<Vec<String>>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions { step: 1e-5, max_entries_per_tensor: None, prefixes: None }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub entries_checked: usize,
}

fn evenly_spaced(candidates: &[usize], k: usize) -> Vec<usize> {
    if candidates.len() <= k {
        return candidates.to_vec();
    }
    (0..k).map(|i| candidates[i * candidates.len() / k]).collect()
}

/// Compares the tape gradient of `loss` against central differences.
///
/// The relative error of one entry is
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`; the report
/// carries the maximum over every checked entry.
pub fn grad_check<L>(store: &mut ParamStore<f64>, loss: L, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    L: Fn(&mut Graph<'_, f64>) -> Result<Var>,
{
    let grads = {
        let mut g = Graph::new(&*store);
        let v = loss(&mut g)?;
        g.backward(v)?
    };
    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::new(s);
        let v = loss(&mut g)?;
        Ok(g.scalar(v))
    };

    let mut report =
        GradCheckReport { max_rel_error: 0.0, worst_param: String::new(), worst_index: 0, entries_checked: 0 };
    let h = opts.step;
    for id in 0..store.len() {
        let name = store.get(id).name.clone();
        if let Some(prefixes) = &opts.prefixes {
            if !prefixes.iter().any(|p| name.starts_with(p.as_str())) {
                continue;
            }
        }
        let n = store.get(id).tensor.numel();
        let analytic = grads.get(id).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; n]);
        let entries = match opts.max_entries_per_tensor {
            Some(k) if k < n => {
                let nonzero: Vec<usize> = (0..n).filter(|&i| analytic[i] != 0.0).collect();
                let mut picked = evenly_spaced(&nonzero, k.div_ceil(2));
                let all: Vec<usize> = (0..n).collect();
                picked.extend(evenly_spaced(&all, k - picked.len().min(k)));
                picked.sort_unstable();
                picked.dedup();
                picked
            }
            _ => (0..n).collect(),
        };
        for i in entries {
            let orig = store.get(id).tensor.data()[i];
            let wrap = |e: Error| match e {
                Error::NonFinite(op) => Error::NonFinite(format!("{op} while perturbing {name}[{i}]")),
                other => other,
            };
            store.get_mut(id).tensor.data_mut()[i] = orig + h;
            let plus = eval(store).map_err(wrap)?;
            store.get_mut(id).tensor.data_mut()[i] = orig - h;
            let minus = eval(store).map_err(wrap)?;
            store.get_mut(id).tensor.data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            if !numeric.is_finite() {
                return Err(Error::NonFinite(format!("finite difference of {name}[{i}]")));
            }
            let a = analytic[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            report.entries_checked += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst_param = name.clone();
                report.worst_index = i;
            }
        }
    }
    Ok(report)
}
