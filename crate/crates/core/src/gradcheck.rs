//! Central finite-difference verification of analytic gradients.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::par;
use crate::tensor::ParameterSet;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub h: f64,
    /// Relative-error threshold above which a parameter is flagged.
    pub tol: f64,
    /// Lower bound on the relative-error denominator, so gradients that are
    /// zero up to rounding are compared in absolute terms.
    pub abs_floor: f64,
    /// Check at most this many entries per parameter tensor (sampled without
    /// replacement). `None` checks every entry.
    pub max_entries_per_param: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions { h: 1e-5, tol: 1e-3, abs_floor: 1e-6, max_entries_per_param: None, seed: 0 }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ParamCheck {
    pub name: String,
    pub total_entries: usize,
    pub entries_checked: usize,
    pub max_rel_error: f64,
    pub worst_entry: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub tol: f64,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.max_rel_error < self.tol)
    }

    pub fn flagged(&self) -> Vec<&ParamCheck> {
        self.params.iter().filter(|p| p.max_rel_error >= self.tol).collect()
    }

    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn get(&self, name: &str) -> Option<&ParamCheck> {
        self.params.iter().find(|p| p.name == name)
    }
}

/// `|a - n| / max(|a|, |n|, floor)`, and exactly zero when both gradients are zero.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if diff == 0.0 {
        return 0.0;
    }
    diff / analytic.abs().max(numeric.abs()).max(floor)
}

fn eval_loss<P, F>(params: &P, build_loss: &F) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &P) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let loss = build_loss(&mut g, params)?;
    let v = g.value(loss);
    if v.numel() != 1 {
        return Err(Error::NonScalarLoss(v.shape().to_vec()));
    }
    Ok(v.data()[0])
}

fn perturbed<P: ParameterSet<f64> + Clone>(params: &P, which: usize, entry: usize, delta: f64) -> P {
    let mut p = params.clone();
    let mut idx = 0;
    p.for_each_param_mut(&mut |_, t| {
        if idx == which {
            t.data_mut()[entry] += delta;
        }
        idx += 1;
    });
    p
}

/// Compares reverse-mode gradients of `build_loss` with central differences,
/// parameter by parameter. Runs in double precision.
pub fn finite_difference_check<P, F>(params: &P, build_loss: F, opts: GradCheckOptions) -> Result<GradCheckReport>
where
    P: ParameterSet<f64> + Clone + Sync,
    F: Fn(&mut Graph<f64>, &P) -> Result<NodeId> + Sync,
{
    let mut g = Graph::new();
    let loss = build_loss(&mut g, params)?;
    let grads = g.backward(loss)?;

    let mut meta = Vec::new();
    params.for_each_param(&mut |name, t| meta.push((name.to_string(), t.numel(), t.shape().to_vec())));

    let mut tasks = Vec::new();
    let mut selected = Vec::with_capacity(meta.len());
    for (pi, (_, n, _)) in meta.iter().enumerate() {
        let entries: Vec<usize> = match opts.max_entries_per_param {
            Some(k) if k < *n => {
                let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ (pi as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
                let mut v = rand::seq::index::sample(&mut rng, *n, k).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..*n).collect(),
        };
        tasks.extend(entries.iter().map(|&e| (pi, e)));
        selected.push(entries.len());
    }

    let numeric: Vec<Result<f64>> = par::map(&tasks, |&(pi, e)| {
        let plus = eval_loss(&perturbed(params, pi, e, opts.h), &build_loss)?;
        let minus = eval_loss(&perturbed(params, pi, e, -opts.h), &build_loss)?;
        Ok((plus - minus) / (2.0 * opts.h))
    });

    let mut checks: Vec<ParamCheck> = meta
        .iter()
        .zip(&selected)
        .map(|((name, n, _), &k)| ParamCheck {
            name: name.clone(),
            total_entries: *n,
            entries_checked: k,
            max_rel_error: 0.0,
            worst_entry: 0,
            analytic: 0.0,
            numeric: 0.0,
        })
        .collect();
    let mut seen = vec![false; checks.len()];
    for (&(pi, e), num) in tasks.iter().zip(numeric) {
        let num = num?;
        let name = &meta[pi].0;
        let ana = grads.get(name).map(|t| t.data()[e]).unwrap_or(0.0);
        let err = relative_error(ana, num, opts.abs_floor);
        let c = &mut checks[pi];
        if !seen[pi] || err > c.max_rel_error {
            seen[pi] = true;
            c.max_rel_error = err;
            c.worst_entry = e;
            c.analytic = ana;
            c.numeric = num;
        }
    }
    Ok(GradCheckReport { tol: opts.tol, params: checks })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{NamedParams, Tensor};

    #[test]
    fn quadratic_at_three() {
        let p = NamedParams::new().with("x", Tensor::new(vec![1, 1], vec![3.0]).unwrap());
        let report = finite_difference_check(
            &p,
            |g, p| {
                let x = g.param("x", p.get("x").unwrap().clone());
                g.matmul(x, x)
            },
            GradCheckOptions { h: 1e-4, ..Default::default() },
        )
        .unwrap();
        let c = report.get("x").unwrap();
        assert!((c.analytic - 6.0).abs() < 1e-12);
        assert!(c.max_rel_error < 1e-8, "{}", c.max_rel_error);
        assert!(report.passed());
    }

    #[test]
    fn unused_parameter_reports_zero_error() {
        let p = NamedParams::new()
            .with("x", Tensor::new(vec![1, 1], vec![1.5]).unwrap())
            .with("unused", Tensor::new(vec![1, 2], vec![4.0, -1.0]).unwrap());
        let report = finite_difference_check(
            &p,
            |g, p| {
                let x = g.param("x", p.get("x").unwrap().clone());
                Ok(g.sigmoid(x))
            },
            GradCheckOptions::default(),
        )
        .unwrap();
        let u = report.get("unused").unwrap();
        assert_eq!(u.max_rel_error, 0.0);
        assert_eq!(u.analytic, 0.0);
        assert_eq!(u.numeric, 0.0);
    }

    #[test]
    fn flags_a_wrong_gradient() {
        // Scaling the loss only in the value (not the graph) breaks agreement.
        let p = NamedParams::new().with("x", Tensor::new(vec![1, 1], vec![0.7]).unwrap());
        let report = finite_difference_check(
            &p,
            |g, p| {
                let x = g.param("x", p.get("x").unwrap().clone());
                let s = g.sigmoid(x);
                // a data-dependent constant that the graph treats as fixed
                let k = g.input(Tensor::new(vec![1, 1], vec![p.get("x").unwrap().data()[0]]).unwrap());
                g.matmul(s, k)
            },
            GradCheckOptions::default(),
        )
        .unwrap();
        assert!(!report.passed());
        assert_eq!(report.flagged().len(), 1);
    }

    #[test]
    fn sampling_limits_entries() {
        let p = NamedParams::new().with("w", Tensor::full(&[10, 10], 0.1));
        let report = finite_difference_check(
            &p,
            |g, p| {
                let w = g.param("w", p.get("w").unwrap().clone());
                let s = g.sigmoid(w);
                let m = g.mean_rows(s);
                let ones = g.input(Tensor::full(&[10, 1], 1.0));
                g.matmul(m, ones)
            },
            GradCheckOptions { max_entries_per_param: Some(7), ..Default::default() },
        )
        .unwrap();
        assert_eq!(report.params[0].entries_checked, 7);
        assert!(report.passed());
    }
}
