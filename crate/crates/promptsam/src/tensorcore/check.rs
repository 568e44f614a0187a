//! Central finite-difference gradient verification.

use std::collections::BTreeMap;

use rayon::prelude::*;

use super::graph::TensorData;
use super::{ParamRegistry, Real};

/// Per-parameter outcome of a finite-difference check.
#[derive(Debug, Clone, PartialEq)]
pub enum FdOutcome {
    Checked { max_rel_err: f64 },
    /// Frozen parameters are reported, not silently dropped.
    Skipped,
}

#[derive(Debug, Clone)]
pub struct FdReport {
    pub per_param: BTreeMap<String, FdOutcome>,
}

impl FdReport {
    /// Max relative error over all checked parameters.
    pub fn worst(&self) -> f64 {
        self.per_param
            .values()
            .filter_map(|o| match o {
                FdOutcome::Checked { max_rel_err } => Some(*max_rel_err),
                FdOutcome::Skipped => None,
            })
            .fold(0.0, f64::max)
    }
}

/// Relative error with a small denominator floor so near-zero gradient pairs
/// compare by absolute difference.
fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Compare `analytic` gradients against central differences
/// `(f(p + h e_i) - f(p - h e_i)) / 2h` for every coordinate of every
/// non-frozen parameter. `f` must be a deterministic function of the
/// registry values. Coordinates are evaluated in parallel; each evaluation
/// clones the registry and perturbs one entry.
pub fn finite_diff_check<T: Real>(
    f: &(dyn Fn(&ParamRegistry<T>) -> f64 + Sync),
    params: &ParamRegistry<T>,
    h: f64,
    analytic: &BTreeMap<String, TensorData<T>>,
) -> FdReport {
    let mut per_param = BTreeMap::new();
    for name in params.names() {
        if params.is_frozen(name) {
            per_param.insert(name.to_owned(), FdOutcome::Skipped);
            continue;
        }
        let grad = analytic
            .get(name)
            .unwrap_or_else(|| panic!("no analytic gradient for `{name}`"));
        let numel = params.get(name).unwrap().numel();
        // Chunked so each worker clones the registry once, not per coordinate.
        let chunk = 64;
        let max_rel_err = (0..numel.div_ceil(chunk))
            .into_par_iter()
            .map(|c| {
                let mut probe = params.clone();
                let mut worst = 0.0f64;
                for i in c * chunk..(c * chunk + chunk).min(numel) {
                    let base = probe.get(name).unwrap().data()[i];
                    let mut eval = |delta: f64| {
                        probe.get_mut(name).unwrap().data_mut()[i] =
                            T::from_f64(base.as_f64() + delta);
                        f(&probe)
                    };
                    let fd = (eval(h) - eval(-h)) / (2.0 * h);
                    probe.get_mut(name).unwrap().data_mut()[i] = base;
                    worst = worst.max(rel_err(fd, grad.data()[i].as_f64()));
                }
                worst
            })
            .reduce(|| 0.0, f64::max);
        per_param.insert(name.to_owned(), FdOutcome::Checked { max_rel_err });
    }
    FdReport { per_param }
}
