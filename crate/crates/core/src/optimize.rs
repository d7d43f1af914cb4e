//! Damped Newton ascent with Armijo backtracking inside a domain box.

use nalgebra::SymmetricEigen;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::linalg::{symmetrize, Matrix, Vector};
use crate::model::DomainBox;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NewtonOptions {
    pub max_iter: usize,
    /// Convergence when `|grad| <= grad_tol * (1 + |f|)`.
    pub grad_tol: f64,
    /// A small gradient only counts when the Newton step is also below
    /// `step_tol * (1 + |x|)`; this rejects objectives whose supremum sits at
    /// infinity.
    pub step_tol: f64,
    pub armijo: f64,
    pub max_halvings: usize,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        Self {
            max_iter: 200,
            grad_tol: 1e-10,
            step_tol: 1e-6,
            armijo: 1e-4,
            max_halvings: 60,
        }
    }
}

/// Value, gradient and Hessian of the objective at a point.
pub struct Evaluation {
    pub value: f64,
    pub grad: Vector,
    pub hess: Matrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NewtonResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
    pub on_boundary: bool,
}

impl NewtonResult {
    pub fn point(&self) -> Vector {
        Vector::from_column_slice(&self.x)
    }
}

/// Ascent direction: Newton step on the negated Hessian, with its spectrum
/// floored when the objective is not locally concave.
fn ascent_direction(grad: &Vector, hess: &Matrix) -> Vector {
    let neg = -symmetrize(hess);
    if let Some(ch) = neg.clone().cholesky() {
        return ch.solve(grad);
    }
    let eig = SymmetricEigen::new(neg);
    let top = eig.eigenvalues.iter().fold(0.0f64, |a, &l| a.max(l.abs())).max(1e-12);
    let floored = eig.eigenvalues.map(|l| l.abs().max(1e-6 * top));
    let inv = Matrix::from_diagonal(&floored.map(|l| 1.0 / l));
    &eig.eigenvectors * inv * eig.eigenvectors.transpose() * grad
}

/// Maximize the objective described by `eval` starting from `init`. Trial
/// points outside the box are never evaluated.
pub fn newton_maximize<F>(
    mut eval: F,
    init: &Vector,
    domain: &DomainBox,
    opts: &NewtonOptions,
) -> Result<NewtonResult>
where
    F: FnMut(&Vector) -> Result<Evaluation>,
{
    domain.check(init)?;
    let mut x = init.clone();
    let mut cur = eval(&x)?;
    let mut iterations = 0;
    let mut converged = false;
    loop {
        let dir = ascent_direction(&cur.grad, &cur.hess);
        if cur.grad.norm() <= opts.grad_tol * (1.0 + cur.value.abs())
            && dir.norm() <= opts.step_tol * (1.0 + x.norm())
        {
            converged = true;
            break;
        }
        if iterations >= opts.max_iter {
            break;
        }
        iterations += 1;
        let slope = cur.grad.dot(&dir);
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..opts.max_halvings {
            let trial = &x + &dir * step;
            if domain.contains(&trial) {
                let next = eval(&trial)?;
                if next.value.is_finite() && next.value >= cur.value + opts.armijo * step * slope {
                    accepted = Some((trial, next));
                    break;
                }
            }
            step *= 0.5;
        }
        match accepted {
            Some((trial, next)) => {
                x = trial;
                cur = next;
            }
            // no ascent possible at machine precision
            None => break,
        }
    }
    let on_boundary = domain.on_boundary(&x, 1e-8);
    Ok(NewtonResult {
        x: x.iter().copied().collect(),
        value: cur.value,
        grad_norm: cur.grad.norm(),
        iterations,
        converged,
        on_boundary,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn maximizes_concave_quadratic_in_one_step() {
        let a = Matrix::from_row_slice(2, 2, &[3.0, 1.0, 1.0, 2.0]);
        let b = Vector::from_vec(vec![1.0, -2.0]);
        let eval = |x: &Vector| {
            Ok(Evaluation {
                value: b.dot(x) - 0.5 * x.dot(&(&a * x)),
                grad: &b - &a * x,
                hess: -a.clone(),
            })
        };
        let r = newton_maximize(eval, &Vector::zeros(2), &DomainBox::symmetric(2, 50.0), &NewtonOptions::default()).unwrap();
        assert!(r.converged);
        assert!(r.iterations <= 2);
        let want = a.clone().cholesky().unwrap().solve(&b);
        assert!((r.point() - want).norm() < 1e-12);
    }

    #[test]
    fn unbounded_objective_runs_into_the_box_without_converging() {
        // f(x) = x, maximizer at infinity
        let eval = |x: &Vector| {
            Ok(Evaluation {
                value: x[0],
                grad: Vector::from_vec(vec![1.0]),
                hess: Matrix::zeros(1, 1),
            })
        };
        let r = newton_maximize(eval, &Vector::zeros(1), &DomainBox::symmetric(1, 5.0), &NewtonOptions::default()).unwrap();
        assert!(!r.converged);
        assert!(r.x[0] <= 5.0);
    }
}
