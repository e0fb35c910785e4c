//! Thin wrapper around the argmin Nelder–Mead solver used for local ascent
//! of sampled suprema.

use argmin::core::{CostFunction, Error as ArgminError, Executor};
use argmin::solver::neldermead::NelderMead;

struct Negated<F> {
    objective: F,
}

impl<F> CostFunction for Negated<F>
where
    F: Fn(&[f64]) -> f64,
{
    type Param = Vec<f64>;
    type Output = f64;

    fn cost(&self, p: &Self::Param) -> Result<f64, ArgminError> {
        let v = (self.objective)(p);
        Ok(if v.is_finite() { -v } else { f64::INFINITY })
    }
}

/// Local maximisation of `objective` starting at `start`, using an axis
/// simplex of edge `step`. Returns the best point and value seen. Never
/// returns a value below `objective(start)`.
pub fn maximize<F>(objective: F, start: &[f64], step: f64, max_iters: u64) -> (Vec<f64>, f64)
where
    F: Fn(&[f64]) -> f64,
{
    let f0 = objective(start);
    let mut simplex = vec![start.to_vec()];
    for i in 0..start.len() {
        let mut p = start.to_vec();
        p[i] += step;
        simplex.push(p);
    }
    let solver = match NelderMead::new(simplex).with_sd_tolerance(1e-14) {
        Ok(s) => s,
        Err(_) => return (start.to_vec(), f0),
    };
    let problem = Negated { objective };
    let run = Executor::new(problem, solver)
        .configure(|state| state.max_iters(max_iters))
        .run();
    match run {
        Ok(res) => {
            let state = res.state();
            match (&state.best_param, state.best_cost) {
                (Some(p), c) if c.is_finite() && -c > f0 => (p.clone(), -c),
                _ => (start.to_vec(), f0),
            }
        }
        Err(_) => (start.to_vec(), f0),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn finds_quadratic_peak() {
        let (p, v) = maximize(|x| -(x[0] - 1.0).powi(2) - (x[1] + 2.0).powi(2), &[0.0, 0.0], 0.5, 500);
        assert!((p[0] - 1.0).abs() < 1e-4 && (p[1] + 2.0).abs() < 1e-4);
        assert!(v > -1e-8);
    }

    #[test]
    fn never_worse_than_start() {
        let (_, v) = maximize(|x| (x[0] * 3.0).sin(), &[0.5], 0.1, 50);
        assert!(v >= (1.5f64).sin());
    }
}
