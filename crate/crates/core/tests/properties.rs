//! Property tests for identities and monotonicity relations the library
//! guarantees for every input.

use bvm_core::audit::admissible_rd;
use bvm_core::bracketing::{error_budget, estimate_err_brackets, nu_r0, spread_delta};
use bvm_core::credible::{build_set, set_membership, Level, SetKind};
use bvm_core::geometry::{bracket_pair, score_state, GeometryOptions, LocalGeometry, ScoreState};
use bvm_core::harness::run::build_scenario;
use bvm_core::harness::ExperimentConfig;
use bvm_core::metrics::{cov_discrepancy, gaussian_kl_tv};
use bvm_core::model::sample_dataset;
use bvm_core::sampling::ShellPlan;
use bvm_core::special::{chi2_cdf, chi2_quantile};
use bvm_core::{Matrix, RngStream, Vector};
use proptest::prelude::*;

fn unit_geom(p: usize) -> LocalGeometry {
    LocalGeometry::from_parts(
        Vector::zeros(p),
        100,
        Matrix::identity(p, p),
        Matrix::identity(p, p),
        &GeometryOptions::default(),
    )
    .unwrap()
}

fn vec_strategy(max_p: usize, scale: f64) -> impl Strategy<Value = Vector> {
    prop::collection::vec(-scale..scale, 1..=max_p).prop_map(Vector::from_vec)
}

/// Symmetric positive definite matrix `A A^T + eps I` of the given size.
fn spd_strategy(p: usize) -> impl Strategy<Value = Matrix> {
    prop::collection::vec(-1.0f64..1.0, p * p).prop_map(move |v| {
        let a = Matrix::from_vec(p, p, v);
        &a * a.transpose() + Matrix::identity(p, p) * 1e-3
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn spread_and_budget_identities(
        xi in vec_strategy(6, 3.0),
        rd in 0.0f64..0.5,
        err_ub in 0.0f64..2.0,
        err_lb in 0.0f64..2.0,
        nu in 0.0f64..0.1,
        rho in 0.0f64..0.1,
    ) {
        let p = xi.len();
        let geom = unit_geom(p);
        let state = ScoreState::from_gradient(&geom, xi.clone()).unwrap();
        let pair = bracket_pair(&geom, &state, rd).unwrap();
        let spread = spread_delta(err_ub, err_lb, &pair);
        let direct = err_ub + err_lb + 0.5 * (pair.xi_ub.norm_squared() - pair.xi_lb.norm_squared());
        prop_assert!((spread - direct).abs() <= 1e-12 * (1.0 + direct.abs()));
        // the upper bracket is flatter, so its standardized score is longer
        prop_assert!(spread >= err_ub + err_lb - 1e-12);
        let b = error_budget(err_ub, err_lb, &pair, nu, rho, p);
        prop_assert_eq!(b.spread, spread);
        prop_assert!((b.delta_plus - (spread + b.log_det_correction + nu)).abs() <= 1e-12 * (1.0 + b.delta_plus));
        prop_assert!((b.delta_minus - (spread + b.log_det_correction + rho)).abs() <= 1e-12 * (1.0 + b.delta_minus));
        prop_assert!(b.delta_oplus >= b.delta_plus);
        prop_assert!(b.log_det_correction >= 0.0);
    }

    #[test]
    fn admissible_rd_is_monotone(
        delta in 0.0f64..1.0,
        omega in 0.0f64..1.0,
        nu0 in 1.0f64..3.0,
        a_sq in 0.5f64..2.0,
        bump in 0.0f64..0.5,
    ) {
        let base = admissible_rd(delta, omega, nu0, a_sq);
        prop_assert!(admissible_rd(delta + bump, omega, nu0, a_sq).rd >= base.rd);
        prop_assert!(admissible_rd(delta, omega + bump, nu0, a_sq).rd >= base.rd);
        prop_assert!(admissible_rd(delta, omega, nu0 + bump, a_sq).rd >= base.rd);
        prop_assert_eq!(base.applicable, base.rd <= 0.5);
    }

    #[test]
    fn cov_norms_sandwich(p in 1usize..6, seed in any::<u64>()) {
        let cov = {
            use rand::Rng;
            let mut rng = RngStream::new(seed, 0).rng();
            let a = Matrix::from_fn(p, p, |_, _| rng.random_range(-1.0..1.0));
            &a * a.transpose() + Matrix::identity(p, p) * 0.1
        };
        let c = cov_discrepancy(&cov, &unit_geom(p));
        let op2 = c.op_norm * c.op_norm;
        prop_assert!(op2 <= c.trace_form * (1.0 + 1e-9) + 1e-12);
        prop_assert!(c.trace_form <= p as f64 * op2 * (1.0 + 1e-9) + 1e-12);
    }

    #[test]
    fn credible_sets_nest(
        center in vec_strategy(5, 2.0),
        a_small in 0.01f64..0.5,
        gap in 0.01f64..0.49,
        point_seed in any::<u64>(),
    ) {
        let p = center.len();
        let scale = Matrix::identity(p, p) * 2.0;
        let wide = build_set(SetKind::Oracle, center.clone(), &scale, Level::Alpha(a_small)).unwrap();
        let narrow = build_set(SetKind::Oracle, center.clone(), &scale, Level::Alpha(a_small + gap)).unwrap();
        prop_assert!(narrow.z < wide.z);
        use rand::Rng;
        let mut rng = RngStream::new(point_seed, 0).rng();
        for _ in 0..50 {
            let theta = &center + Vector::from_fn(p, |_, _| rng.random_range(-3.0..3.0));
            if set_membership(&narrow, &theta) {
                prop_assert!(set_membership(&wide, &theta));
            }
        }
    }

    #[test]
    fn chi2_quantile_inverts_cdf(p in 1usize..60, alpha in 1e-4f64..0.9999) {
        let z = chi2_quantile(p, alpha);
        prop_assert!((chi2_cdf(p as f64, z) - (1.0 - alpha)).abs() <= 1e-9);
    }

    #[test]
    fn kl_is_nonnegative((b, delta) in (1usize..5).prop_flat_map(|p| (spd_strategy(p), prop::collection::vec(-2.0f64..2.0, p)))) {
        let delta = Vector::from_vec(delta);
        let g = gaussian_kl_tv(&b, &delta, None).unwrap();
        prop_assert!(g.kl >= 0.0);
        prop_assert!((g.tv_bound - (g.kl / 2.0).sqrt()).abs() <= 1e-15);
        let p = b.nrows();
        prop_assert_eq!(gaussian_kl_tv(&Matrix::identity(p, p), &Vector::zeros(p), None).unwrap().kl, 0.0);
    }

    #[test]
    fn gaussian_mass_outside_shrinks_with_radius(xi in vec_strategy(5, 2.0), r in 0.5f64..10.0, dr in 0.1f64..5.0) {
        prop_assert!(nu_r0(&xi, r + dr).unwrap() <= nu_r0(&xi, r).unwrap() + 1e-15);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn bracket_errors_nonincreasing_in_rd(seed in 0u64..1000, rd_lo in 0.0f64..0.3, step in 0.01f64..0.2) {
        let cfg = ExperimentConfig::from_toml_str(&format!(
            "schema_version = 1\nscenario = \"logit\"\nseed = {seed}\n[model]\nfamily = \"logistic\"\nn = 150\np = 2\n[truth]\ndesign = \"gaussian\"\n[posterior]\nmode = \"sampler\"\n"
        ))
        .unwrap();
        let sc = build_scenario(&cfg).unwrap();
        let data = sample_dataset(&sc.truth, sc.geom.n, RngStream::new(seed, 1)).unwrap();
        let state = score_state(&sc.model, &data, &sc.geom).unwrap();
        // no polishing: both estimates are maxima over the same grid
        let mut plan = ShellPlan::ball(2, sc.geom.r0);
        plan.polish_steps = 0;
        let lo = estimate_err_brackets(&sc.model, &data, &sc.geom, &bracket_pair(&sc.geom, &state, rd_lo).unwrap(), &plan).unwrap();
        let hi = estimate_err_brackets(&sc.model, &data, &sc.geom, &bracket_pair(&sc.geom, &state, rd_lo + step).unwrap(), &plan).unwrap();
        prop_assert!(hi.err_ub <= lo.err_ub + 1e-9, "{} > {}", hi.err_ub, lo.err_ub);
        prop_assert!(hi.err_lb <= lo.err_lb + 1e-9, "{} > {}", hi.err_lb, lo.err_lb);
    }
}
