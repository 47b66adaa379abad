//! Constants of the stability theory, the delayed Grönwall envelope and
//! decay fits against run traces.

use std::io::Write;

use serde::Serialize;

use crate::equilibrium::Equilibrium;
use crate::error::{invalid, Error, Result};
use crate::roots::{bisect, safe_newton};

/// The unique κ > 0 with κ = α(e^{κT} − 1). Needs αT < 1; α = 0 gives +∞.
pub fn solve_kappa(alpha: f64, window: f64) -> Result<f64> {
    if !(alpha >= 0.0) || !(window > 0.0) {
        return Err(invalid("alpha", "need alpha >= 0 and a positive window"));
    }
    let a = alpha * window;
    if a >= 1.0 {
        return Err(Error::ConditionViolated { product: a });
    }
    if a == 0.0 {
        return Ok(f64::INFINITY);
    }
    // In u = κT: g(u) = a(e^u − 1) − u is convex with g(0) = 0 and its
    // minimum at u = −ln a, so the positive root lies to the right of it.
    let g = |u: f64| (a * u.exp_m1() - u, a * u.exp() - 1.0);
    let lo = -a.ln();
    let mut hi = 2.0 * lo.max(1.0);
    while g(hi).0 <= 0.0 {
        hi *= 2.0;
    }
    let u = safe_newton(g, lo, hi, 1e-15 * hi);
    Ok(u / window)
}

/// Residence bound on D⁺_r under the stationary flow; r = 0 uses the uniform
/// D⁺ bound √(−2φ_b)/|∂xφ∞(0)|.
pub fn linear_window(eq: &Equilibrium, r: f64) -> f64 {
    if r > 0.0 {
        1.0 / r
    } else {
        (-2.0 * eq.phi_b).sqrt() / eq.potential.slope_at_zero().abs()
    }
}

/// Residence bound under the perturbed flow, T̃_r = 2/r.
pub fn perturbed_window(r: f64) -> f64 {
    2.0 / r
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LinearCondition {
    pub r: f64,
    /// ‖∂_v f∞‖ on D⁺_r, equal to ∫_r^∞|μ'|.
    pub dvf_l1: f64,
    pub t_r: f64,
    /// 2‖∂_v f∞‖/λ².
    pub alpha_rate: f64,
    /// 1 − alpha_rate·T_r.
    pub margin: f64,
    pub pass: bool,
}

pub fn linear_condition(eq: &Equilibrium, r: f64) -> Result<LinearCondition> {
    if !(r >= 0.0) {
        return Err(invalid("r", "margin must be nonnegative"));
    }
    let dvf_l1 = eq.well.profile.derivative_l1_above(r)?;
    let t_r = linear_window(eq, r);
    let alpha_rate = 2.0 * dvf_l1 / (eq.lambda * eq.lambda);
    let margin = 1.0 - alpha_rate * t_r;
    Ok(LinearCondition {
        r,
        dvf_l1,
        t_r,
        alpha_rate,
        margin,
        pass: margin > 0.0,
    })
}

/// δ_r = r²(e^{−T̃_r} − 1/4) − T̃_r|φ_b|.
pub fn delta_r(r: f64, phi_b: f64) -> f64 {
    let tt = perturbed_window(r);
    r * r * ((-tt).exp() - 0.25) - tt * phi_b.abs()
}

/// The sign change of r ↦ δ_r.
pub fn r_star(phi_b: f64) -> f64 {
    let mut hi = 2.0 / 4f64.ln();
    while delta_r(hi, phi_b) <= 0.0 {
        hi *= 2.0;
    }
    let lo = if phi_b == 0.0 { 1e-3 } else { hi.min(1e-3) };
    bisect(|r| delta_r(r, phi_b), lo, hi, 1e-14 * hi)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct NonlinearThresholds {
    pub r: f64,
    pub t_tilde: f64,
    pub delta_r: f64,
    pub r_star: f64,
    /// ‖∂_v f∞‖ on all of Q.
    pub dvf_l1: f64,
    /// Continuation bound with exponent constant 12 (the one gated on).
    pub mickey_lhs: f64,
    /// Same bound with exponent constant 8, reported only.
    pub mickey_lhs_8: f64,
    /// ‖∂_v f∞‖T̃_r/(2λ²).
    pub window_lhs: f64,
    /// 2‖∂_v f∞‖_{D⁺_r}T̃_r/λ², the delayed Grönwall condition on the window T̃_r.
    pub alpha_window: f64,
    /// Largest ‖h₀‖₁ meeting the smallness condition at t★ = 2T̃_r.
    pub eps0: f64,
    /// supp μ ⊂ (r, ∞), so f∞ lives in D⁺_r.
    pub profile_in_dplus_r: bool,
    pub pass: bool,
}

impl NonlinearThresholds {
    /// Name of the tightest of the three conditions that must stay below 1.
    pub fn binding(&self) -> &'static str {
        let c = [
            (self.mickey_lhs, "mickey"),
            (self.window_lhs, "window"),
            (self.alpha_window, "alpha_window"),
        ];
        c.iter().fold(c[0], |m, &x| if x.0 > m.0 { x } else { m }).1
    }
}

/// Smallness thresholds of the nonlinear theory; NoThreshold when δ_r ≤ 0.
pub fn nonlinear_thresholds(eq: &Equilibrium, r: f64) -> Result<NonlinearThresholds> {
    if !(r > 0.0) {
        return Err(invalid("r", "nonlinear thresholds need r > 0"));
    }
    let d = delta_r(r, eq.phi_b);
    if d <= 0.0 {
        return Err(Error::NoThreshold { r, delta_r: d });
    }
    let l2 = eq.lambda * eq.lambda;
    let tt = perturbed_window(r);
    let profile = &eq.well.profile;
    let dvf_l1 = profile.derivative_l1_above(0.0)?;
    let dvf_r = profile.derivative_l1_above(r)?;
    let m = dvf_l1 * tt;
    let mickey_lhs = 4.0 / l2 * m * ((12.0 * m / l2).exp() - 1.0);
    let mickey_lhs_8 = 4.0 / l2 * m * ((8.0 * m / l2).exp() - 1.0);
    let window_lhs = m / (2.0 * l2);
    let alpha_window = 2.0 * dvf_r * tt / l2;
    let t_star = 2.0 * tt;
    let eps0 = (d * l2 / (2.0 * tt * (4.0 * dvf_l1 * (t_star + tt) / l2).exp())).sqrt();
    let profile_in_dplus_r = profile.support().is_none_or(|(lo, _)| lo >= r);
    let rs = r_star(eq.phi_b);
    let pass = r > rs && mickey_lhs < 1.0 && window_lhs < 1.0 && alpha_window < 1.0 && profile_in_dplus_r;
    Ok(NonlinearThresholds {
        r,
        t_tilde: tt,
        delta_r: d,
        r_star: rs,
        dvf_l1,
        mickey_lhs,
        mickey_lhs_8,
        window_lhs,
        alpha_window,
        eps0,
        profile_in_dplus_r,
        pass,
    })
}

/// Envelope fit of a recorded norm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DecayFit {
    pub kappa: f64,
    /// sup over t ≤ window_start of y(t)e^{κt}.
    pub c: f64,
    /// Least-squares slope of −log y on t ≥ window_start (NaN if too few points).
    pub fitted_rate: f64,
    /// Largest y(t)/(C e^{−κt}).
    pub worst_ratio: f64,
    pub envelope_ok: bool,
    /// First time the norm is exactly zero, if any.
    pub extinct_at: Option<f64>,
}

/// Relative slack allowed over the C e^{−κt} envelope.
pub const ENVELOPE_SLACK: f64 = 0.05;

/// Fits the envelope C e^{−κt} with C taken from the initial window.
pub fn fit_decay(times: &[f64], values: &[f64], kappa: f64, window_start: f64) -> Result<DecayFit> {
    if times.len() != values.len() || times.is_empty() {
        return Err(invalid("trace", "times and values must be nonempty and aligned"));
    }
    let extinct_at = times.iter().zip(values).find(|(_, &y)| y == 0.0).map(|(&t, _)| t);
    if values.iter().all(|&y| y == 0.0) {
        return Ok(DecayFit {
            kappa,
            c: 0.0,
            fitted_rate: f64::NAN,
            worst_ratio: 0.0,
            envelope_ok: true,
            extinct_at,
        });
    }
    if let Some(t0) = extinct_at {
        if t0 <= window_start {
            return Err(Error::EmptyTail { window_start });
        }
    }
    let c = times
        .iter()
        .zip(values)
        .filter(|(&t, _)| t <= window_start)
        .map(|(&t, &y)| y.abs() * (kappa * t).exp())
        .fold(0.0, f64::max);
    let worst_ratio = envelope_ratio(times, values, c, kappa);
    let tail: Vec<(f64, f64)> = times
        .iter()
        .zip(values)
        .filter(|(&t, &y)| t >= window_start && y > 0.0)
        .map(|(&t, &y)| (t, y.ln()))
        .collect();
    let fitted_rate = if tail.len() >= 2 {
        let n = tail.len() as f64;
        let (mt, my) = tail.iter().fold((0.0, 0.0), |a, p| (a.0 + p.0 / n, a.1 + p.1 / n));
        let (sxy, sxx) = tail.iter().fold((0.0, 0.0), |a, p| {
            (a.0 + (p.0 - mt) * (p.1 - my), a.1 + (p.0 - mt).powi(2))
        });
        -sxy / sxx
    } else {
        f64::NAN
    };
    Ok(DecayFit {
        kappa,
        c,
        fitted_rate,
        worst_ratio,
        envelope_ok: worst_ratio <= 1.0 + ENVELOPE_SLACK,
        extinct_at,
    })
}

/// Largest y(t)/(C e^{−κt}) over the series (0 for an all-zero series).
pub fn envelope_ratio(times: &[f64], values: &[f64], c: f64, kappa: f64) -> f64 {
    times.iter().zip(values).fold(0.0, |m: f64, (&t, &y)| {
        if y == 0.0 {
            m
        } else {
            m.max(y.abs() / (c * (-kappa * t).exp()))
        }
    })
}

/// Equality solution of the delayed inequality and its envelope.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GronwallSeries {
    pub alpha: f64,
    pub window: f64,
    pub kappa: f64,
    pub c: f64,
    pub t: Vec<f64>,
    pub z: Vec<f64>,
    pub envelope: Vec<f64>,
    pub worst_ratio: f64,
    pub bound_ok: bool,
}

impl GronwallSeries {
    pub fn write_csv<W: Write>(&self, out: W) -> std::io::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["t", "z", "envelope"])?;
        for i in 0..self.t.len() {
            w.serialize((self.t[i], self.z[i], self.envelope[i]))?;
        }
        w.flush()
    }
}

/// Integrates z(t) = α∫_{t−T}^t z by the trapezoid rule from z = y0 on
/// [0, T] and compares with C_{T,κ}e^{−κt}. dt must divide T.
pub fn delayed_gronwall_simulate<F: Fn(f64) -> f64>(
    y0: F,
    alpha: f64,
    window: f64,
    horizon: f64,
    dt: f64,
) -> Result<GronwallSeries> {
    let kappa = solve_kappa(alpha, window)?;
    if !(dt > 0.0) || !(horizon >= window) {
        return Err(invalid("dt", "need dt > 0 and horizon >= window"));
    }
    let m = (window / dt).round() as usize;
    if m == 0 || ((m as f64) * dt - window).abs() > 1e-9 * window {
        return Err(invalid("dt", "dt must divide the window"));
    }
    let n = (horizon / dt).round() as usize;
    let t: Vec<f64> = (0..=n).map(|k| k as f64 * dt).collect();
    let mut z: Vec<f64> = t[..=m].iter().map(|&s| y0(s)).collect();
    z.reserve(n - m);
    // prefix[i] = z_0 + … + z_{i−1}.
    let mut prefix = Vec::with_capacity(n + 2);
    prefix.push(0.0);
    for &y in &z {
        prefix.push(prefix.last().unwrap() + y);
    }
    let denom = 1.0 - 0.5 * alpha * dt;
    for k in m + 1..=n {
        let inner = prefix[k] - prefix[k - m + 1];
        let zk = alpha * dt * (0.5 * z[k - m] + inner) / denom;
        z.push(zk);
        prefix.push(prefix[k] + zk);
    }
    let c = if kappa.is_finite() {
        t[..=m]
            .iter()
            .zip(&z)
            .map(|(&s, &y)| y.abs() * (kappa * s).exp())
            .fold(0.0, f64::max)
    } else {
        0.0
    };
    let envelope: Vec<f64> = t
        .iter()
        .map(|&s| if kappa.is_finite() { c * (-kappa * s).exp() } else { 0.0 })
        .collect();
    let worst_ratio = if kappa.is_finite() {
        envelope_ratio(&t, &z, c, kappa)
    } else {
        0.0
    };
    Ok(GronwallSeries {
        alpha,
        window,
        kappa,
        c,
        bound_ok: worst_ratio <= 1.0 + dt / window,
        t,
        z,
        envelope,
        worst_ratio,
    })
}

/// One row of the stability report.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StabilityReport {
    pub lambda: f64,
    pub r: f64,
    pub t_r: f64,
    pub t_tilde_r: f64,
    pub alpha_rate: f64,
    /// NaN when the linear condition fails.
    pub kappa: f64,
    /// Envelope constant from a trace, NaN if none was supplied.
    pub c: f64,
    pub delta_r: f64,
    pub r_star: f64,
    pub linear_condition_margin: f64,
    pub mickey_lhs: f64,
    pub mickey_lhs_8: f64,
    pub window_lhs: f64,
    pub eps0: f64,
    pub linear_pass: bool,
    pub nonlinear_pass: bool,
}

/// Evaluates every constant at margin r. δ_r ≤ 0 is reported, not raised.
pub fn stability_report(eq: &Equilibrium, r: f64) -> Result<StabilityReport> {
    let lin = linear_condition(eq, r)?;
    let kappa = if lin.pass {
        solve_kappa(lin.alpha_rate, lin.t_r)?
    } else {
        f64::NAN
    };
    let mut rep = StabilityReport {
        lambda: eq.lambda,
        r,
        t_r: lin.t_r,
        t_tilde_r: if r > 0.0 { perturbed_window(r) } else { f64::NAN },
        alpha_rate: lin.alpha_rate,
        kappa,
        c: f64::NAN,
        delta_r: if r > 0.0 { delta_r(r, eq.phi_b) } else { f64::NAN },
        r_star: r_star(eq.phi_b),
        linear_condition_margin: lin.margin,
        mickey_lhs: f64::NAN,
        mickey_lhs_8: f64::NAN,
        window_lhs: f64::NAN,
        eps0: f64::NAN,
        linear_pass: lin.pass,
        nonlinear_pass: false,
    };
    if r > 0.0 {
        match nonlinear_thresholds(eq, r) {
            Ok(nl) => {
                rep.mickey_lhs = nl.mickey_lhs;
                rep.mickey_lhs_8 = nl.mickey_lhs_8;
                rep.window_lhs = nl.window_lhs;
                rep.eps0 = nl.eps0;
                rep.nonlinear_pass = nl.pass;
            }
            Err(Error::NoThreshold { .. }) => {}
            Err(e) => return Err(e),
        }
    }
    Ok(rep)
}

pub fn write_stability_csv<W: Write>(rows: &[StabilityReport], out: W) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::equilibrium::{default_grid_size, solve_equilibrium};
    use crate::profiles::{build_well, ElectronModel, InjectionProfile, ProfileShape};

    fn bisect_kappa(alpha: f64, t: f64) -> f64 {
        // Oracle: plain bisection on κ − α(e^{κT} − 1) over (κ_min, 10/T·…).
        let f = |k: f64| k - alpha * (k * t).exp_m1();
        let mut lo = (1.0 / (alpha * t)).ln() / t;
        let mut hi = lo.max(1.0 / t);
        while f(hi) > 0.0 {
            hi *= 2.0;
        }
        for _ in 0..300 {
            let m = 0.5 * (lo + hi);
            if f(m) > 0.0 {
                lo = m
            } else {
                hi = m
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn kappa_half_unit_window() {
        let k = solve_kappa(0.5, 1.0).unwrap();
        assert!(k > 1.2 && k < 1.3, "{k}");
        assert!((k - 0.5 * k.exp_m1()).abs() < 1e-10);
        assert!((k - bisect_kappa(0.5, 1.0)).abs() < 1e-12);
    }

    #[test]
    fn kappa_near_critical_is_small() {
        let k = solve_kappa(0.999, 1.0).unwrap();
        assert!(k > 0.0 && k < 0.01, "{k}");
        assert!((k - bisect_kappa(0.999, 1.0)).abs() < 1e-12);
    }

    #[test]
    fn kappa_rejects_critical_product() {
        assert!(matches!(solve_kappa(1.0, 1.0), Err(Error::ConditionViolated { .. })));
        assert_eq!(solve_kappa(0.0, 1.0).unwrap(), f64::INFINITY);
    }

    #[test]
    fn r_star_for_unit_wall_potential() {
        assert!(delta_r(2.0, -1.0) < 0.0 && delta_r(3.0, -1.0) > 0.0);
        let rs = r_star(-1.0);
        assert!(rs > 2.0 && rs < 3.0, "{rs}");
        assert!(delta_r(rs, -1.0).abs() < 1e-10);
    }

    #[test]
    fn r_star_limit_without_wall_potential() {
        let rs = r_star(-1e-14);
        assert!((rs - 2.0 / 4f64.ln()).abs() < 1e-6, "{rs}");
        assert!((r_star(0.0) - 2.0 / 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn zero_trace_is_extinct() {
        let t = [0.0, 1.0, 2.0];
        let fit = fit_decay(&t, &[0.0; 3], 1.0, 1.0).unwrap();
        assert!(fit.envelope_ok && fit.extinct_at == Some(0.0));
        let err = fit_decay(&t, &[1.0, 0.0, 0.0], 1.0, 1.5).unwrap_err();
        assert!(matches!(err, Error::EmptyTail { .. }));
    }

    #[test]
    fn synthetic_exponential_fits_exactly() {
        let t: Vec<f64> = (0..=300).map(|k| k as f64 * 0.01).collect();
        let y: Vec<f64> = t.iter().map(|&s| (-0.7 * s).exp()).collect();
        let fit = fit_decay(&t, &y, 0.7, 1.0).unwrap();
        assert!((fit.c - 1.0).abs() < 1e-12);
        assert!(fit.envelope_ok && (fit.worst_ratio - 1.0).abs() < 1e-12);
        assert!((fit.fitted_rate - 0.7).abs() < 1e-10);
    }

    #[test]
    fn gronwall_zero_stays_zero() {
        let s = delayed_gronwall_simulate(|_| 0.0, 0.5, 1.0, 5.0, 0.01).unwrap();
        assert!(s.z.iter().all(|&z| z == 0.0) && s.bound_ok);
    }

    #[test]
    fn gronwall_equality_solution_continues() {
        let (alpha, t) = (0.5, 1.0);
        let k = solve_kappa(alpha, t).unwrap();
        let dt = 1e-3;
        let s = delayed_gronwall_simulate(|x| (-k * x).exp(), alpha, t, 6.0, dt).unwrap();
        let worst =
            s.t.iter()
                .zip(&s.z)
                .map(|(&x, &z)| (z * (k * x).exp() - 1.0).abs())
                .fold(0.0, f64::max);
        assert!(worst < 1e-5, "{worst}");
        assert!(s.bound_ok);
    }

    #[test]
    fn gronwall_constant_start_obeys_envelope() {
        let s = delayed_gronwall_simulate(|_| 1.0, 0.5, 1.0, 10.0, 0.01).unwrap();
        assert!((s.c - s.kappa.exp()).abs() < 1e-12);
        assert!(s.bound_ok, "{}", s.worst_ratio);
    }

    #[test]
    fn reference_report_at_r4() {
        let mu = InjectionProfile::with_mass(ProfileShape::Bump, 3.0, 1.0, 1.0).unwrap();
        let well = build_well(&ElectronModel::boltzmann(1.0).unwrap(), &mu, -1.0).unwrap();
        let eq = solve_equilibrium(&well, 0.1, default_grid_size(0.1)).unwrap();
        let lin = linear_condition(&eq, 4.0).unwrap();
        // μ lives on (2, 4): nothing above r = 4.
        assert_eq!(lin.dvf_l1, 0.0);
        assert_eq!(lin.margin, 1.0);
        let rep = stability_report(&eq, 4.0).unwrap();
        assert_eq!(rep.kappa, f64::INFINITY);
        assert!(rep.delta_r > 0.0);
        let r0 = linear_condition(&eq, 0.0).unwrap();
        let t0 = (2.0f64).sqrt() / eq.potential.slope_at_zero().abs();
        assert!((r0.t_r - t0).abs() < 1e-15);
    }
}
