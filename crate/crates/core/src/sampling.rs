//! Deterministic sampling plans for sup/inf estimation over elliptic shells.

use crate::linalg::Vector;
use crate::special::norm_ppf;

/// Directions per radius: `2 * p * 64`, capped.
pub const DIRECTIONS_PER_DIM: usize = 128;
pub const MAX_DIRECTIONS: usize = 4096;
pub const DEFAULT_RADII: usize = 16;
pub const POLISH_STEPS: usize = 10;

const PRIMES: [u64; 64] = [
    2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53, 59, 61, 67, 71, 73, 79, 83, 89,
    97, 101, 103, 107, 109, 113, 127, 131, 137, 139, 149, 151, 157, 163, 167, 173, 179, 181, 191,
    193, 197, 199, 211, 223, 227, 229, 233, 239, 241, 251, 257, 263, 269, 271, 277, 281, 283, 293,
    307, 311,
];

fn radical_inverse(mut i: u64, base: u64) -> f64 {
    let mut f = 1.0;
    let mut r = 0.0;
    let b = base as f64;
    while i > 0 {
        f /= b;
        r += f * (i % base) as f64;
        i /= base;
    }
    r
}

fn nth_prime(k: usize) -> u64 {
    if k < PRIMES.len() {
        return PRIMES[k];
    }
    let mut count = PRIMES.len();
    let mut c = *PRIMES.last().unwrap() + 2;
    loop {
        if (2..).take_while(|d| d * d <= c).all(|d| c % d != 0) {
            if count == k {
                return c;
            }
            count += 1;
        }
        c += 2;
    }
}

/// Quasi-random unit directions in `R^p`: the `2p` signed coordinate axes
/// followed by Halton points pushed through the normal quantile and
/// normalized.
pub fn unit_directions(p: usize, count: usize) -> Vec<Vector> {
    let mut out = Vec::with_capacity(count);
    for j in 0..p {
        for s in [1.0, -1.0] {
            if out.len() < count {
                let mut v = Vector::zeros(p);
                v[j] = s;
                out.push(v);
            }
        }
    }
    let bases: Vec<u64> = (0..p).map(nth_prime).collect();
    let mut i = 20u64;
    while out.len() < count {
        let v = Vector::from_iterator(p, bases.iter().map(|&b| norm_ppf(radical_inverse(i, b))));
        let n = v.norm();
        if n > 1e-12 && n.is_finite() {
            out.push(v / n);
        }
        i += 1;
    }
    out
}

/// Directions and radial grid used for suprema over `{ |D0 (theta - theta*)| <= r }`.
#[derive(Debug, Clone)]
pub struct ShellPlan {
    pub directions: Vec<Vector>,
    pub radii: Vec<f64>,
    pub polish_steps: usize,
}

impl ShellPlan {
    pub fn default_direction_count(p: usize) -> usize {
        (DIRECTIONS_PER_DIM * p).min(MAX_DIRECTIONS)
    }

    /// Default plan over the ball of radius `r_max`: equally spaced radii in
    /// `(0, r_max]`.
    pub fn ball(p: usize, r_max: f64) -> Self {
        Self::with_sizes(p, r_max, Self::default_direction_count(p), DEFAULT_RADII)
    }

    pub fn with_sizes(p: usize, r_max: f64, directions: usize, radii: usize) -> Self {
        Self {
            directions: unit_directions(p, directions),
            radii: (1..=radii).map(|k| r_max * k as f64 / radii as f64).collect(),
            polish_steps: POLISH_STEPS,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.directions.is_empty() || self.radii.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn directions_are_unit_and_deterministic() {
        let a = unit_directions(5, 300);
        let b = unit_directions(5, 300);
        assert_eq!(a.len(), 300);
        for (x, y) in a.iter().zip(&b) {
            assert!((x.norm() - 1.0).abs() < 1e-12);
            assert_eq!(x, y);
        }
    }

    #[test]
    fn default_count_is_capped() {
        assert_eq!(ShellPlan::default_direction_count(2), 256);
        assert_eq!(ShellPlan::default_direction_count(100), 4096);
    }
}
