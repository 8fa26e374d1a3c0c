//! Central finite-difference verification of reverse-mode gradients.

use specret_core::Result;

use crate::graph::{Graph, Var};
use crate::params::ParamStore;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst: String,
    pub n_checked: usize,
}

impl GradCheckReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub h: f64,
    /// Entries per tensor to probe; `None` checks every entry.
    pub max_per_tensor: Option<usize>,
    /// Denominator floor: |a − n| / max(|a|, |n|, floor).
    pub floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            h: 1e-5,
            max_per_tensor: None,
            floor: 1e-6,
        }
    }
}

/// Compares analytic parameter gradients of `f` with central differences.
///
/// `corrupt` perturbs the analytic gradient before comparison; it exists so callers can test
/// that a broken gradient is caught.
pub fn check_gradients<F>(
    store: &ParamStore,
    f: F,
    opts: GradCheckOptions,
    corrupt: Option<f64>,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = f(&mut g, store)?;
    let grads = g.backward_named(loss, Some(store))?;
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let l = f(&mut g, s)?;
        Ok(g.value(l).item())
    };
    let mut work = store.clone();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: String::new(),
        n_checked: 0,
    };
    for (id, name, t) in store.iter() {
        let n = t.len();
        let picks: Vec<usize> = match opts.max_per_tensor {
            Some(k) if k < n => (0..k).map(|i| i * n / k).collect(),
            _ => (0..n).collect(),
        };
        for k in picks {
            let mut analytic = grads.param(id).map_or(0.0, |gt| gt.data[k]);
            if let Some(c) = corrupt {
                analytic += c;
            }
            let orig = t.data[k];
            work.get_mut(id).data[k] = orig + opts.h;
            let fp = eval(&work)?;
            work.get_mut(id).data[k] = orig - opts.h;
            let fm = eval(&work)?;
            work.get_mut(id).data[k] = orig;
            let numeric = (fp - fm) / (2.0 * opts.h);
            let rel =
                (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(opts.floor);
            report.n_checked += 1;
            if rel >= report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = format!("{name}[{k}] analytic {analytic:e} numeric {numeric:e}");
            }
        }
    }
    Ok(report)
}
