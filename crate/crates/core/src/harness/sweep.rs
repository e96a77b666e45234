//! λ ablation: one S2 + Water4MU run per value, sharing the base preparation.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;

use crate::error::{Error, Result};
use crate::evalx::{MetricsReport, Scenario};

use super::scenario::{attach_water4mu, evaluate, prepare_base, ScenarioSpec};

/// Spec of the run for one λ value.
pub fn sweep_spec(base: &ScenarioSpec, lambda: f64) -> ScenarioSpec {
    let mut s = base.clone();
    s.scenario = Scenario::S2;
    s.use_water4mu = true;
    s.blo.lambda_diag = lambda;
    s
}

/// Runs every λ in `values` and returns the reports sorted by λ.
/// `threads == 0` uses the available parallelism; the result does not
/// depend on the thread count.
pub fn sweep_lambda(values: &[f64], base: &ScenarioSpec, threads: usize) -> Result<Vec<MetricsReport>> {
    if values.is_empty() {
        return Err(Error::Validation("sweep needs at least one λ".into()));
    }
    let mut lambdas = values.to_vec();
    if lambdas.iter().any(|l| !(l.is_finite() && *l > 0.0)) {
        return Err(Error::Validation("every λ must be finite and > 0".into()));
    }
    lambdas.sort_by(f64::total_cmp);

    let prep_spec = sweep_spec(base, lambdas[0]);
    let prep = prepare_base(&prep_spec)?;
    let threads = match threads {
        0 => thread::available_parallelism().map_or(1, |n| n.get()),
        n => n,
    }
    .min(lambdas.len());

    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<MetricsReport>>>> = Mutex::new((0..lambdas.len()).map(|_| None).collect());
    thread::scope(|scope| {
        for _ in 0..threads {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= lambdas.len() {
                    break;
                }
                let spec = sweep_spec(base, lambdas[i]);
                let out = spec
                    .validate()
                    .and_then(|_| attach_water4mu(&spec, &prep))
                    .and_then(|p| evaluate(&spec, &p))
                    .map(|o| o.report);
                slots.lock().expect("sweep worker panicked")[i] = Some(out);
            });
        }
    });
    slots
        .into_inner()
        .expect("sweep worker panicked")
        .into_iter()
        .map(|r| r.expect("every λ is visited"))
        .collect()
}
