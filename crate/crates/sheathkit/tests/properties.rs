use std::sync::OnceLock;

use proptest::prelude::*;

use sheathkit::characteristics::{exit_record, integrate_flow, FieldSource};
use sheathkit::elliptic::{
    estimate_report, solve_linear_poisson, solve_nonlinear_poisson, EstimateMode, SourceDensity,
};
use sheathkit::equilibrium::{default_grid_size, solve_equilibrium, verify_equilibrium_bounds, Equilibrium};
use sheathkit::profiles::{build_well, ElectronModel, InjectionProfile, ProfileShape};
use sheathkit::stability::{delayed_gronwall_simulate, delta_r, fit_decay, r_star, solve_kappa};

fn eq() -> &'static Equilibrium {
    static EQ: OnceLock<Equilibrium> = OnceLock::new();
    EQ.get_or_init(|| {
        let mu = InjectionProfile::with_mass(ProfileShape::Bump, 3.0, 1.0, 1.0).unwrap();
        let well = build_well(&ElectronModel::boltzmann(1.0).unwrap(), &mu, -1.0).unwrap();
        solve_equilibrium(&well, 0.1, default_grid_size(0.1)).unwrap()
    })
}

fn source(coeffs: &[(f64, f64)], scale: f64) -> SourceDensity {
    let rho = SourceDensity::from_fn(eq().cells(), |x| {
        coeffs
            .iter()
            .enumerate()
            .map(|(k, (a, ph))| a * ((k + 1) as f64 * std::f64::consts::PI * x + ph).sin())
            .sum()
    })
    .unwrap();
    let n = rho.l1_norm();
    rho.scaled(if n > 0.0 { scale / n } else { 0.0 })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn kappa_solves_its_equation(t in 0.05f64..20.0, at in 1e-4f64..0.98) {
        let a = at / t;
        let k = solve_kappa(a, t).unwrap();
        prop_assert!(k > 0.0);
        let scale = k.max(1.0);
        prop_assert!((k - a * (k * t).exp_m1()).abs() <= 1e-12 * scale * (k * t).max(1.0));
        // A larger rate gives slower decay.
        let k2 = solve_kappa(a * 1.01, t).unwrap();
        prop_assert!(k2 < k);
    }

    #[test]
    fn delta_changes_sign_once(pb in -4.0f64..-0.05, f in 0.05f64..3.0) {
        let rs = r_star(pb);
        prop_assert!(delta_r(rs * (1.0 + 1e-6), pb) >= -1e-9);
        let r = rs * f;
        if f < 0.99 {
            prop_assert!(delta_r(r, pb) < 0.0);
        } else if f > 1.01 {
            prop_assert!(delta_r(r, pb) > 0.0);
        }
    }

    #[test]
    fn faster_decay_is_never_flagged(c in 1e-3f64..10.0, kappa in 0.1f64..5.0, extra in 0.0f64..3.0, window in 0.05f64..1.0) {
        let times: Vec<f64> = (0..=400).map(|k| k as f64 * 0.01).collect();
        let values: Vec<f64> = times.iter().map(|t| c * (-(kappa + extra) * t).exp()).collect();
        let fit = fit_decay(&times, &values, kappa, window).unwrap();
        prop_assert!(fit.envelope_ok, "worst ratio {}", fit.worst_ratio);
    }

    #[test]
    fn gronwall_equality_solution_stays_under_envelope(at in 0.01f64..0.95, steps in 10usize..80, y0 in 0.1f64..5.0) {
        let window = 1.0;
        let s = delayed_gronwall_simulate(|_| y0, at, window, 8.0, window / steps as f64).unwrap();
        prop_assert!(s.bound_ok, "worst ratio {}", s.worst_ratio);
        prop_assert!(s.z.iter().all(|z| *z >= 0.0));
    }

    #[test]
    fn linear_poisson_estimates(coeffs in prop::collection::vec((-1.0f64..1.0, 0.0f64..6.3), 1..6), scale in 1e-3f64..10.0) {
        let rho = source(&coeffs, scale);
        let v = solve_linear_poisson(eq(), &rho).unwrap();
        let rep = estimate_report(eq(), &v, &rho, EstimateMode::Linear);
        prop_assert!(rep.passes(), "{:?}", rep.checks);
    }

    #[test]
    fn nonlinear_poisson_estimates(coeffs in prop::collection::vec((-1.0f64..1.0, 0.0f64..6.3), 1..6), scale in 1e-3f64..2.0) {
        let rho = source(&coeffs, scale);
        let w = solve_nonlinear_poisson(eq(), &rho).unwrap();
        let rep = estimate_report(eq(), &w, &rho, EstimateMode::Nonlinear);
        prop_assert!(rep.passes(), "{:?}", rep.checks);
    }

    #[test]
    fn stationary_flow_conserves_energy(x in 0.0f64..1.0, v in -6.0f64..6.0, frac in 0.01f64..0.99) {
        let e = eq();
        let pot = &e.potential;
        prop_assume!(pot.energy(x, v).abs() > 1e-3 && v.abs() > 1e-3);
        let field = FieldSource::stationary(e);
        let rec = exit_record(&field, 0.0, x, v).unwrap();
        let s = rec.t_inc + frac * (rec.t_out - rec.t_inc);
        let (xs, vs) = integrate_flow(&field, 0.0, x, v, s).unwrap();
        prop_assert!((0.0..=1.0).contains(&xs));
        prop_assert!((pot.energy(xs, vs) - pot.energy(x, v)).abs() <= 1e-10 * (1.0 + v * v));
        prop_assert_eq!(pot.classify(xs, vs, 0.0).label(), pot.classify(x, v, 0.0).label());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn equilibrium_sits_in_sandwich(pb in -3.0f64..-0.1, lambda in 0.05f64..0.5, n0 in 0.5f64..2.0) {
        let mu = InjectionProfile::with_mass(ProfileShape::Bump, 3.0, 1.0, n0).unwrap();
        let well = build_well(&ElectronModel::boltzmann(n0).unwrap(), &mu, pb).unwrap();
        let e = solve_equilibrium(&well, lambda, default_grid_size(lambda)).unwrap();
        let rep = verify_equilibrium_bounds(&e);
        prop_assert!(rep.violations.is_empty(), "max excess {}", rep.max_excess);
        prop_assert!(e.potential.strictly_decreasing());
    }
}
