//! Central-difference gradient checking.
//!
//! Analytic gradients are computed at precision `T`; the numeric reference is
//! always taken in 64-bit so that 32-bit checks measure the error of the
//! analytic path rather than the noise of 32-bit differencing.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, NodeId};
use super::param::ParamStore;
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// A scalar-valued function of the parameters in a store.
pub trait ScalarFunction {
    fn evaluate<T: Real>(&self, graph: &mut Graph<'_, T>) -> Result<NodeId>;
}

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Denominator floor of the relative error, so entries with vanishing
    /// gradient are compared in absolute terms.
    pub floor: f64,
    /// Probe at most this many randomly chosen entries per parameter.
    pub max_entries_per_param: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            floor: 1e-3,
            max_entries_per_param: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index where `max_rel_error` occurred.
    pub worst: Option<(String, usize)>,
    pub entries_checked: usize,
    /// Analytic gradient of every parameter (frozen ones are exactly zero).
    pub analytic: Vec<(String, Tensor<f64>)>,
}

impl GradCheckReport {
    pub fn analytic_grad(&self, name: &str) -> Option<&Tensor<f64>> {
        self.analytic.iter().find(|(n, _)| n == name).map(|(_, g)| g)
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn eval_value<F: ScalarFunction>(f: &F, store: &ParamStore<f64>) -> Result<f64> {
    let mut g = Graph::new(store);
    let root = f.evaluate(&mut g)?;
    let v = g.value(root);
    if v.len() != 1 {
        return Err(Error::Shape("grad_check function must return a scalar".into()));
    }
    Ok(v.data()[0])
}

/// Analytic gradients of `f` at precision `T`, accumulated into a cast store.
pub fn analytic_gradients<T: Real, F: ScalarFunction>(f: &F, params: &ParamStore<f64>) -> Result<ParamStore<T>> {
    let mut store: ParamStore<T> = params.cast();
    store.zero_grads();
    let grads = {
        let mut g = Graph::new(&store);
        let root = f.evaluate(&mut g)?;
        g.backward(root)?;
        g.param_grads()
    };
    super::graph::accumulate_into(&grads, &mut store)?;
    Ok(store)
}

pub fn grad_check<T: Real, F: ScalarFunction>(
    f: &F,
    params: &ParamStore<f64>,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let base = eval_value(f, params)?;
    let again = eval_value(f, params)?;
    if base.to_bits() != again.to_bits() {
        return Err(Error::NonDeterministic(format!(
            "two evaluations at the same point gave {base} and {again}"
        )));
    }

    let analytic_store = analytic_gradients::<T, F>(f, params)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut probe = params.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        entries_checked: 0,
        analytic: Vec::new(),
    };

    for pid in 0..params.len() {
        let p = params.by_index(pid);
        let analytic: Tensor<f64> = analytic_store.by_index(pid).grad.cast();
        report.analytic.push((p.name.clone(), analytic.clone()));
        if !p.trainable {
            continue;
        }
        let n = p.value.len();
        let entries: Vec<usize> = match opts.max_entries_per_param {
            Some(k) if k < n => sample(&mut rng, n, k).into_vec(),
            _ => (0..n).collect(),
        };
        for idx in entries {
            let orig = p.value.data()[idx];
            probe.by_index_mut(pid).value.data_mut()[idx] = orig + opts.eps;
            let plus = eval_value(f, &probe)?;
            probe.by_index_mut(pid).value.data_mut()[idx] = orig - opts.eps;
            let minus = eval_value(f, &probe)?;
            probe.by_index_mut(pid).value.data_mut()[idx] = orig;
            let numeric = (plus - minus) / (2.0 * opts.eps);
            let err = relative_error(analytic.data()[idx], numeric, opts.floor);
            report.entries_checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                if err >= report.max_rel_error {
                    report.worst = Some((p.name.clone(), idx));
                }
            }
        }
    }
    Ok(report)
}
