//! Derivative-free minimization over small unconstrained parameter vectors.

use argmin::core::{CostFunction, Executor, State};
use argmin::solver::neldermead::NelderMead;

use crate::error::{Error, Result};

/// Best point found by [`minimize`].
#[derive(Debug, Clone, PartialEq)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub value: f64,
}

struct Objective<F>(F);

impl<F: Fn(&[f64]) -> f64> CostFunction for Objective<F> {
    type Param = Vec<f64>;
    type Output = f64;

    fn cost(&self, p: &Vec<f64>) -> std::result::Result<f64, argmin::core::Error> {
        let v = (self.0)(p);
        // The simplex ordering needs a total order; treat failures as a wall.
        Ok(if v.is_finite() { v } else { f64::MAX })
    }
}

/// Maximum number of simplex rebuilds around the incumbent.
const MAX_RESTARTS: usize = 5;

/// Nelder–Mead from `start`, with the initial simplex offset by `step` along
/// each axis. The simplex is rebuilt around the best point until a restart no
/// longer improves the value by more than `tol`.
pub fn minimize<F>(f: F, start: &[f64], step: &[f64], max_iter: u64, tol: f64) -> Result<Minimum>
where
    F: Fn(&[f64]) -> f64,
{
    assert_eq!(start.len(), step.len());
    let f = &f;
    let mut best = nelder_mead(f, start, step, max_iter, tol)?;
    for _ in 0..MAX_RESTARTS {
        let next = nelder_mead(f, &best.x, step, max_iter, tol)?;
        let improved = next.value < best.value - tol.max(f64::EPSILON * best.value.abs());
        if next.value < best.value {
            best = next;
        }
        if !improved {
            break;
        }
    }
    Ok(best)
}

fn nelder_mead<F>(f: &F, start: &[f64], step: &[f64], max_iter: u64, tol: f64) -> Result<Minimum>
where
    F: Fn(&[f64]) -> f64,
{
    let mut simplex = vec![start.to_vec()];
    for (i, s) in step.iter().enumerate() {
        let mut v = start.to_vec();
        v[i] += s;
        simplex.push(v);
    }
    let solver = NelderMead::new(simplex)
        .with_sd_tolerance(tol)
        .map_err(|e| Error::NumericalFailure(e.to_string()))?;
    let res = Executor::new(Objective(f), solver)
        .configure(|s| s.max_iters(max_iter))
        .run()
        .map_err(|e| Error::NumericalFailure(e.to_string()))?;
    let state = res.state();
    let x = state
        .get_best_param()
        .cloned()
        .ok_or_else(|| Error::NumericalFailure("optimizer produced no iterate".into()))?;
    Ok(Minimum {
        x,
        value: state.get_best_cost(),
    })
}

/// Runs [`minimize`] from each start and keeps the lowest value; earlier
/// starts win ties.
pub fn minimize_multistart<F>(f: F, starts: &[Vec<f64>], step: &[f64], max_iter: u64, tol: f64) -> Result<Minimum>
where
    F: Fn(&[f64]) -> f64,
{
    let mut best: Option<Minimum> = None;
    for s in starts {
        let m = minimize(&f, s, step, max_iter, tol)?;
        if best.as_ref().is_none_or(|b| m.value < b.value) {
            best = Some(m);
        }
    }
    best.ok_or_else(|| Error::NumericalFailure("no optimizer starts".into()))
}
