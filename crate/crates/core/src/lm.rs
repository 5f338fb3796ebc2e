//! Levenberg-Marquardt on real residual vectors.
//!
//! The Jacobian columns are normalized to unit length before each step and the
//! damped step is computed from a thin SVD, so one factorization serves every
//! trial value of the damping factor.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

/// A least-squares problem `min_p ||r(p)||^2`.
pub trait LeastSquaresProblem {
    /// Residuals at `p`, or `None` when the model cannot be evaluated there
    /// (for example a simulation that diverges). A `None` rejects the step.
    fn residuals(&mut self, p: &DVector<f64>) -> Option<DVector<f64>>;

    fn jacobian(&mut self, p: &DVector<f64>) -> Option<DMatrix<f64>>;

    /// Cost on held-out data, used to keep the best-generalizing iterate.
    fn validation_cost(&mut self, _p: &DVector<f64>) -> Option<f64> {
        None
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LmOptions {
    pub lambda_init: f64,
    pub lambda_up: f64,
    pub lambda_down: f64,
    /// Damping beyond this value aborts with the best iterate so far.
    pub lambda_max: f64,
    pub max_iter: usize,
    /// Stop once an accepted step lowers the cost by less than this fraction.
    pub rel_tol: f64,
}

impl Default for LmOptions {
    fn default() -> Self {
        Self {
            lambda_init: 1e-3,
            lambda_up: 10.0,
            lambda_down: 0.1,
            lambda_max: 1e12,
            max_iter: 200,
            rel_tol: 1e-10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Termination {
    /// Relative cost decrease fell below `rel_tol` (or the cost hit zero).
    Converged,
    MaxIterations,
    /// Damping grew past `lambda_max` without finding a decrease.
    LambdaCap,
    /// The starting point could not be evaluated.
    InvalidStart,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iter: usize,
    pub lambda: f64,
    pub cost: f64,
    pub val_cost: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct LmReport {
    pub params: DVector<f64>,
    pub cost: f64,
    pub initial_cost: f64,
    /// One record per accepted step, starting with the initial point (iter 0).
    pub history: Vec<IterationRecord>,
    pub termination: Termination,
    /// Number of residual evaluations, including rejected trials.
    pub evaluations: usize,
}

impl LmReport {
    pub fn accepted_steps(&self) -> usize {
        self.history.len().saturating_sub(1)
    }
}

fn cost_of(r: &DVector<f64>) -> f64 {
    r.norm_squared()
}

/// Runs LM from `p0`. When the problem reports validation costs, the returned
/// parameters are those of the accepted iterate with the lowest validation cost.
pub fn minimize<P: LeastSquaresProblem>(problem: &mut P, p0: DVector<f64>, opts: &LmOptions) -> LmReport {
    let mut evaluations = 1;
    let Some(mut r) = problem.residuals(&p0) else {
        return LmReport {
            params: p0,
            cost: f64::INFINITY,
            initial_cost: f64::INFINITY,
            history: Vec::new(),
            termination: Termination::InvalidStart,
            evaluations,
        };
    };
    let mut p = p0;
    let mut cost = cost_of(&r);
    let initial_cost = cost;
    let mut lambda = opts.lambda_init;
    let val0 = problem.validation_cost(&p);
    let mut history = vec![IterationRecord { iter: 0, lambda, cost, val_cost: val0 }];
    let mut best_val = val0.map(|v| (v, p.clone(), cost));

    if cost == 0.0 {
        return LmReport { params: p, cost, initial_cost, history, termination: Termination::Converged, evaluations };
    }

    let mut termination = Termination::MaxIterations;
    'outer: for iter in 1..=opts.max_iter {
        let Some(jac) = problem.jacobian(&p) else {
            termination = Termination::InvalidStart;
            break;
        };
        let scales: Vec<f64> = jac
            .column_iter()
            .map(|c| {
                let n = c.norm();
                if n > 0.0 && n.is_finite() { n } else { 1.0 }
            })
            .collect();
        let mut jn = jac;
        for (j, s) in scales.iter().enumerate() {
            jn.column_mut(j).scale_mut(1.0 / s);
        }
        let svd = jn.svd(true, true);
        let (Some(u), Some(vt)) = (svd.u.as_ref(), svd.v_t.as_ref()) else {
            termination = Termination::InvalidStart;
            break;
        };
        let g = u.transpose() * &r;
        let sv = &svd.singular_values;

        loop {
            let filtered = DVector::from_iterator(sv.len(), sv.iter().zip(g.iter()).map(|(&s, &gi)| s * gi / (s * s + lambda)));
            let mut step = -(vt.transpose() * filtered);
            for (j, s) in scales.iter().enumerate() {
                step[j] /= s;
            }
            let trial = &p + &step;
            evaluations += 1;
            let trial_r = problem.residuals(&trial).filter(|rr| rr.iter().all(|v| v.is_finite()));
            match trial_r {
                Some(rr) if cost_of(&rr) < cost => {
                    let new_cost = cost_of(&rr);
                    let rel = (cost - new_cost) / cost;
                    p = trial;
                    r = rr;
                    cost = new_cost;
                    lambda = (lambda * opts.lambda_down).max(1e-15);
                    let val = problem.validation_cost(&p);
                    if let Some(v) = val {
                        if best_val.as_ref().is_none_or(|(bv, _, _)| v < *bv) {
                            best_val = Some((v, p.clone(), cost));
                        }
                    }
                    history.push(IterationRecord { iter, lambda, cost, val_cost: val });
                    if rel < opts.rel_tol || cost == 0.0 {
                        termination = Termination::Converged;
                        break 'outer;
                    }
                    break;
                }
                _ => {
                    lambda *= opts.lambda_up;
                    if lambda > opts.lambda_max {
                        termination = Termination::LambdaCap;
                        break 'outer;
                    }
                }
            }
        }
    }

    if let Some((_, bp, bc)) = best_val {
        if bc.is_finite() {
            return LmReport { params: bp, cost: bc, initial_cost, history, termination, evaluations };
        }
    }
    LmReport { params: p, cost, initial_cost, history, termination, evaluations }
}
