//! Gauss-Hermite quadrature for expectations over isotropic Gaussian
//! covariates that enter only through two linear indices.

use std::sync::OnceLock;

use nalgebra::SymmetricEigen;

use crate::linalg::{Matrix, Vector};

/// Probabilists' Gauss-Hermite rule: `E f(Z) ~ sum_i w_i f(z_i)`, `Z ~ N(0,1)`.
#[derive(Debug, Clone)]
pub struct GaussHermite {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GaussHermite {
    /// Golub-Welsch construction from the Jacobi matrix of He_n.
    pub fn new(n: usize) -> Self {
        let mut jacobi = Matrix::zeros(n, n);
        for k in 1..n {
            let b = (k as f64).sqrt();
            jacobi[(k, k - 1)] = b;
            jacobi[(k - 1, k)] = b;
        }
        let eig = SymmetricEigen::new(jacobi);
        let mut pairs: Vec<(f64, f64)> = (0..n)
            .map(|i| (eig.eigenvalues[i], eig.eigenvectors[(0, i)].powi(2)))
            .collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        // symmetrize nodes/weights to remove eigensolver round-off
        let mut nodes = vec![0.0; n];
        let mut weights = vec![0.0; n];
        for i in 0..n {
            let j = n - 1 - i;
            nodes[i] = 0.5 * (pairs[i].0 - pairs[j].0);
            weights[i] = 0.5 * (pairs[i].1 + pairs[j].1);
        }
        let total: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= total);
        Self { nodes, weights }
    }

    pub fn expect(&self, f: impl Fn(f64) -> f64) -> f64 {
        self.nodes.iter().zip(&self.weights).map(|(&z, &w)| w * f(z)).sum()
    }
}

pub fn rule_1d() -> &'static GaussHermite {
    static RULE: OnceLock<GaussHermite> = OnceLock::new();
    RULE.get_or_init(|| GaussHermite::new(80))
}

pub fn rule_2d() -> &'static GaussHermite {
    static RULE: OnceLock<GaussHermite> = OnceLock::new();
    RULE.get_or_init(|| GaussHermite::new(48))
}

/// `E f`, `E f x`, `E f x x^T` for `x ~ N(0, scale^2 I_p)`.
#[derive(Debug, Clone)]
pub struct IndexMoments {
    pub e0: f64,
    pub e1: Vector,
    pub e2: Matrix,
}

/// Expectations of `f(a^T x, b^T x)` (and its first two covariate moments)
/// under `x ~ N(0, scale^2 I_p)`. The covariate law is reduced to the plane
/// spanned by `a` and `b`; the orthogonal remainder integrates out exactly.
pub fn index_moments(
    a: &Vector,
    b: &Vector,
    scale: f64,
    with_second: bool,
    f: impl Fn(f64, f64) -> f64,
) -> IndexMoments {
    let p = a.len();
    let mut basis: Vec<Vector> = Vec::with_capacity(2);
    for v in [a, b] {
        let mut r = v.clone();
        for e in &basis {
            r -= e * e.dot(&r);
        }
        let norm = r.norm();
        let ref_norm = v.norm();
        if norm > 1e-12 * ref_norm.max(1e-300) && norm > 0.0 {
            basis.push(r / norm);
        }
    }
    // projections of a and b on the basis, in units of the standard normal
    let coef = |v: &Vector| -> Vec<f64> { basis.iter().map(|e| scale * e.dot(v)).collect() };
    let (ca, cb) = (coef(a), coef(b));
    let k = basis.len();
    let mut m0 = 0.0;
    let mut m1 = [0.0; 2];
    let mut m2 = [[0.0; 2]; 2];
    match k {
        0 => {
            m0 = f(0.0, 0.0);
        }
        1 => {
            let rule = rule_1d();
            for (&z, &w) in rule.nodes.iter().zip(&rule.weights) {
                let v = w * f(ca[0] * z, cb[0] * z);
                m0 += v;
                m1[0] += v * z;
                m2[0][0] += v * z * z;
            }
        }
        _ => {
            let rule = rule_2d();
            for (&z1, &w1) in rule.nodes.iter().zip(&rule.weights) {
                for (&z2, &w2) in rule.nodes.iter().zip(&rule.weights) {
                    let v = w1 * w2 * f(ca[0] * z1 + ca[1] * z2, cb[0] * z1 + cb[1] * z2);
                    m0 += v;
                    m1[0] += v * z1;
                    m1[1] += v * z2;
                    m2[0][0] += v * z1 * z1;
                    m2[0][1] += v * z1 * z2;
                    m2[1][1] += v * z2 * z2;
                }
            }
            m2[1][0] = m2[0][1];
        }
    }
    let mut e1 = Vector::zeros(p);
    for i in 0..k {
        e1 += &basis[i] * (scale * m1[i]);
    }
    let e2 = if with_second {
        let mut proj = Matrix::zeros(p, p);
        for e in &basis {
            proj += e * e.transpose();
        }
        let mut e2 = (Matrix::identity(p, p) - proj) * (scale * scale * m0);
        for i in 0..k {
            for j in 0..k {
                e2 += &basis[i] * basis[j].transpose() * (scale * scale * m2[i][j]);
            }
        }
        e2
    } else {
        Matrix::zeros(0, 0)
    };
    IndexMoments { e0: m0, e1, e2 }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hermite_rule_integrates_moments() {
        let rule = GaussHermite::new(20);
        assert!((rule.expect(|z| z * z) - 1.0).abs() < 1e-13);
        assert!((rule.expect(|z| z.powi(4)) - 3.0).abs() < 1e-12);
        assert!(rule.expect(|z| z.powi(3)).abs() < 1e-13);
        // E exp(cZ) = exp(c^2/2)
        let rule = rule_1d();
        assert!((rule.expect(|z| (1.5 * z).exp()) - (1.125f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn index_moments_of_linear_functions() {
        let a = Vector::from_vec(vec![1.0, 0.0, 0.0]);
        let b = Vector::from_vec(vec![0.3, 0.4, 0.0]);
        // f = (a^T x)(b^T x): E = s^2 a^T b
        let m = index_moments(&a, &b, 2.0, true, |u, v| u * v);
        assert!((m.e0 - 4.0 * 0.3).abs() < 1e-12);
        // f = 1: E x x^T = s^2 I
        let m = index_moments(&a, &b, 2.0, true, |_, _| 1.0);
        assert!((m.e2 - Matrix::identity(3, 3) * 4.0).norm() < 1e-12);
        // f = exp(a^T x): E f x = s^2 a exp(s^2/2)
        let m = index_moments(&a, &a, 0.5, false, |u, _| u.exp());
        let expected = 0.25 * (0.125f64).exp();
        assert!((m.e1[0] - expected).abs() < 1e-12);
    }
}
