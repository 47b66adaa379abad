//! Physical closures: the electron density response n_e, the injected ion
//! profile μ, the structural hypotheses tying them together, and the well
//! potential Q with its curvature constants α ≤ β.

use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::interp::MonotoneCubic;
use crate::quadrature::{integrate, integrate_pieces, Chebyshev, QuadTol};
use crate::roots::golden_section_min;

/// Electron density as a function of the potential.
#[derive(Debug, Clone, PartialEq)]
pub enum ElectronModel {
    /// n_e(ψ) = n0·e^ψ.
    Boltzmann { n0: f64 },
    /// Monotone cubic through (ψ, n_e(ψ)) knots.
    Tabulated(MonotoneCubic),
}

impl ElectronModel {
    pub fn boltzmann(n0: f64) -> Result<Self> {
        if !(n0 > 0.0 && n0.is_finite()) {
            return Err(invalid("n0", "Boltzmann density must be positive"));
        }
        Ok(Self::Boltzmann { n0 })
    }

    pub fn tabulated(psi: Vec<f64>, density: Vec<f64>) -> Result<Self> {
        if density.iter().any(|&n| n <= 0.0) {
            return Err(invalid("electrons", "tabulated density must be positive"));
        }
        if density.windows(2).any(|w| w[1] <= w[0]) {
            return Err(invalid("electrons", "tabulated density must be strictly increasing"));
        }
        let table = MonotoneCubic::new(psi, density)?;
        let (lo, hi) = table.domain();
        if !(lo <= 0.0 && hi >= 0.0) {
            return Err(invalid("electrons", "tabulated range must contain psi = 0"));
        }
        Ok(Self::Tabulated(table))
    }

    /// Reads a headerless or headed two-column CSV of (ψ, n_e).
    pub fn from_csv(path: &std::path::Path) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(false)
            .trim(csv::Trim::All)
            .from_path(path)
            .map_err(|e| invalid("electrons.path", e.to_string()))?;
        let (mut psi, mut dens) = (Vec::new(), Vec::new());
        for rec in reader.records() {
            let rec = rec.map_err(|e| invalid("electrons.path", e.to_string()))?;
            let parse = |i: usize| rec.get(i).and_then(|s| s.parse::<f64>().ok());
            match (parse(0), parse(1)) {
                (Some(a), Some(b)) => {
                    psi.push(a);
                    dens.push(b);
                }
                _ if psi.is_empty() => continue,
                _ => return Err(invalid("electrons.path", "non-numeric row in density table")),
            }
        }
        Self::tabulated(psi, dens)
    }

    pub fn density(&self, s: f64) -> f64 {
        match self {
            Self::Boltzmann { n0 } => n0 * s.exp(),
            Self::Tabulated(t) => t.value(s),
        }
    }

    pub fn derivative(&self, s: f64) -> f64 {
        match self {
            Self::Boltzmann { n0 } => n0 * s.exp(),
            Self::Tabulated(t) => t.derivative(s),
        }
    }

    /// N_e(s) = ∫_0^s n_e, so N_e(0) = 0.
    pub fn antiderivative(&self, s: f64) -> f64 {
        match self {
            Self::Boltzmann { n0 } => n0 * s.exp_m1(),
            Self::Tabulated(t) => t.integral_from_start(s) - t.integral_from_start(0.0),
        }
    }

    /// N_e(s + w) − N_e(s) − n_e(s)·w, the convex remainder, computed without
    /// cancellation for the Boltzmann closure.
    pub fn bregman(&self, s: f64, w: f64) -> f64 {
        match self {
            Self::Boltzmann { n0 } => {
                let r = if w.abs() < 1e-3 {
                    w * w * (0.5 + w * (1.0 / 6.0 + w * (1.0 / 24.0 + w / 120.0)))
                } else {
                    w.exp_m1() - w
                };
                n0 * s.exp() * r
            }
            Self::Tabulated(_) => self.antiderivative(s + w) - self.antiderivative(s) - self.density(s) * w,
        }
    }

    /// sup of n_e' over [lo, hi].
    pub fn max_derivative(&self, lo: f64, hi: f64) -> f64 {
        match self {
            Self::Boltzmann { n0 } => n0 * hi.exp(),
            Self::Tabulated(t) => t.max_derivative(lo, hi),
        }
    }

    /// Range on which the model is defined; unbounded for Boltzmann.
    pub fn domain(&self) -> (f64, f64) {
        match self {
            Self::Boltzmann { .. } => (f64::NEG_INFINITY, f64::INFINITY),
            Self::Tabulated(t) => t.domain(),
        }
    }
}

/// Shape family of the injected ion profile.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProfileShape {
    /// c·exp(−1/(1−z²)), smooth with all derivatives vanishing at the ends.
    Bump,
    /// c·(1−z²)², C¹ with μ = μ' = 0 at the ends.
    Quartic,
}

/// Incoming ion density μ(v), supported on (center − half_width, center + half_width).
#[derive(Debug, Clone, PartialEq)]
pub enum InjectionProfile {
    Zero,
    Shaped {
        shape: ProfileShape,
        center: f64,
        half_width: f64,
        amplitude: f64,
    },
}

pub(crate) fn bump_unit_mass() -> f64 {
    static MASS: OnceLock<f64> = OnceLock::new();
    *MASS.get_or_init(|| {
        integrate(
            |z| (-1.0 / (1.0 - z * z)).exp(),
            -1.0,
            1.0,
            QuadTol {
                abs: 1e-16,
                rel: 1e-15,
                max_panels: 4000,
            },
        )
        .expect("bump mass quadrature")
    })
}

impl InjectionProfile {
    /// Profile of the given shape, scaled so that ∫μ = mass.
    pub fn with_mass(shape: ProfileShape, center: f64, half_width: f64, mass: f64) -> Result<Self> {
        if !(half_width > 0.0) {
            return Err(invalid("half_width", "must be positive"));
        }
        if !(center - half_width > 0.0) {
            return Err(invalid("center", "support must lie in v > 0"));
        }
        if !(mass >= 0.0 && mass.is_finite()) {
            return Err(invalid("mass", "must be nonnegative"));
        }
        let unit = match shape {
            ProfileShape::Bump => bump_unit_mass(),
            ProfileShape::Quartic => 16.0 / 15.0,
        };
        Ok(Self::Shaped {
            shape,
            center,
            half_width,
            amplitude: mass / (unit * half_width),
        })
    }

    /// Same shape with every value multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        match *self {
            Self::Zero => Self::Zero,
            Self::Shaped {
                shape,
                center,
                half_width,
                amplitude,
            } => Self::Shaped {
                shape,
                center,
                half_width,
                amplitude: amplitude * factor,
            },
        }
    }

    pub fn support(&self) -> Option<(f64, f64)> {
        match *self {
            Self::Zero => None,
            Self::Shaped { center, half_width, .. } => Some((center - half_width, center + half_width)),
        }
    }

    pub fn value(&self, v: f64) -> f64 {
        let Self::Shaped {
            shape,
            center,
            half_width,
            amplitude,
        } = *self
        else {
            return 0.0;
        };
        let z = (v - center) / half_width;
        let s = 1.0 - z * z;
        if s <= 0.0 {
            return 0.0;
        }
        amplitude
            * match shape {
                ProfileShape::Bump => (-1.0 / s).exp(),
                ProfileShape::Quartic => s * s,
            }
    }

    pub fn derivative(&self, v: f64) -> f64 {
        let Self::Shaped {
            shape,
            center,
            half_width,
            amplitude,
        } = *self
        else {
            return 0.0;
        };
        let z = (v - center) / half_width;
        let s = 1.0 - z * z;
        if s <= 0.0 {
            return 0.0;
        }
        amplitude / half_width
            * match shape {
                ProfileShape::Bump => {
                    let e = (-1.0 / s).exp();
                    if e == 0.0 {
                        0.0
                    } else {
                        -2.0 * z * e / (s * s)
                    }
                }
                ProfileShape::Quartic => -4.0 * z * s,
            }
    }

    /// ∫ g(v)·μ(v) dv over the support.
    pub fn moment<F: Fn(f64) -> f64>(&self, g: F) -> Result<f64> {
        let Some((lo, hi)) = self.support() else {
            return Ok(0.0);
        };
        let mid = 0.5 * (lo + hi);
        integrate_pieces(|v| g(v) * self.value(v), &[lo, mid, hi], QuadTol::default())
    }

    pub fn mass(&self) -> Result<f64> {
        self.moment(|_| 1.0)
    }

    /// ∫_r^∞ |μ'(v)| dv, which equals ‖∂_v f∞‖ on D⁺_r.
    pub fn derivative_l1_above(&self, r: f64) -> Result<f64> {
        let Some((lo, hi)) = self.support() else {
            return Ok(0.0);
        };
        let a = r.max(lo);
        if a >= hi {
            return Ok(0.0);
        }
        let mid = 0.5 * (lo + hi);
        let breaks: Vec<f64> = if a < mid { vec![a, mid, hi] } else { vec![a, hi] };
        integrate_pieces(|v| self.derivative(v).abs(), &breaks, QuadTol::default())
    }
}

/// Outcome of the structural checks on (n_e, μ, φ_b).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HypothesisReport {
    pub neutrality_residual: f64,
    pub neutrality_ok: bool,
    pub bohm_margin: f64,
    pub bohm_ok: bool,
    /// Largest sampled second difference of s ↦ e^{−s} n_e(s).
    pub concavity_max_second_difference: f64,
    pub concavity_ok: bool,
    pub density_increasing: bool,
}

impl HypothesisReport {
    pub fn passes(&self) -> bool {
        self.neutrality_ok && self.bohm_ok && self.concavity_ok && self.density_increasing
    }
}

const HYPOTHESIS_SAMPLES: usize = 1000;

pub fn check_hypotheses(model: &ElectronModel, profile: &InjectionProfile, phi_b: f64) -> Result<HypothesisReport> {
    if !(phi_b < 0.0 && phi_b.is_finite()) {
        return Err(invalid("phi_b", "phi_b must be negative"));
    }
    let (lo, hi) = model.domain();
    if phi_b < lo || hi < 0.0 {
        return Err(Error::RangeExceeded { value: phi_b, lo, hi });
    }
    let step = -phi_b / HYPOTHESIS_SAMPLES as f64;
    let grid: Vec<f64> = (0..=HYPOTHESIS_SAMPLES).map(|k| phi_b + step * k as f64).collect();
    let mut density_increasing = true;
    for &s in &grid {
        if model.density(s) <= 0.0 {
            return Err(Error::NonPositiveDensity { psi: s });
        }
        density_increasing &= model.derivative(s) > 0.0;
    }
    let g: Vec<f64> = grid.iter().map(|&s| (-s).exp() * model.density(s)).collect();
    let scale = g.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let second = g
        .windows(3)
        .map(|w| w[0] - 2.0 * w[1] + w[2])
        .fold(f64::NEG_INFINITY, f64::max);

    let ne0 = model.density(0.0);
    let neutrality_residual = (profile.mass()? - ne0).abs();
    let bohm_margin = model.derivative(0.0) - profile.moment(|v| 1.0 / (v * v))?;
    Ok(HypothesisReport {
        neutrality_residual,
        neutrality_ok: neutrality_residual <= 1e-10 * ne0.max(1.0),
        bohm_margin,
        bohm_ok: bohm_margin > 0.0,
        concavity_max_second_difference: second,
        concavity_ok: second <= 1e-8 * scale,
        density_increasing,
    })
}

/// Ion charge response and its derivative/antiderivative in the potential:
///   I1(s) = ∫ μ(w) w / √(w² − 2s) dw,  I1'(s),  I0(s) = ∫_0^s I1.
#[derive(Debug, Clone)]
struct IonResponse {
    i1: Chebyshev,
    i1_prime: Chebyshev,
    i0: Chebyshev,
    i0_at_zero: f64,
}

impl IonResponse {
    fn build(profile: &InjectionProfile, lo: f64) -> Result<Option<Self>> {
        if profile.support().is_none() {
            return Ok(None);
        }
        let fit = |g: &dyn Fn(f64, f64) -> f64| -> Result<Chebyshev> {
            let mut n = 48;
            loop {
                let c = Chebyshev::fit(|s| profile.moment(|w| g(s, w)), lo, 0.0, n)?;
                let scale = c.eval(lo).abs().max(c.eval(0.0).abs()).max(1e-300);
                if c.tail() <= 1e-13 * scale || n >= 384 {
                    return Ok(c);
                }
                n *= 2;
            }
        };
        let i1 = fit(&|s, w| w / (w * w - 2.0 * s).sqrt())?;
        let i1_prime = fit(&|s, w| w * (w * w - 2.0 * s).powf(-1.5))?;
        // w² − w√(w²−2s) = 2sw/(w + √(w²−2s)), free of cancellation.
        let i0 = fit(&|s, w| 2.0 * s * w / (w + (w * w - 2.0 * s).sqrt()))?;
        let i0_at_zero = i0.eval(0.0);
        Ok(Some(Self {
            i1,
            i1_prime,
            i0,
            i0_at_zero,
        }))
    }
}

/// The well potential Q(s) = N_e(s) − I0(s) on [φ_b, 0], with α = inf Q'(s)/s
/// and β = sup Q'(s)/s (value Q''(0) at s = 0).
#[derive(Debug, Clone)]
pub struct WellPotential {
    pub phi_b: f64,
    pub electrons: ElectronModel,
    pub profile: InjectionProfile,
    pub alpha: f64,
    pub beta: f64,
    /// Where the sampled extrema were attained.
    pub alpha_at: f64,
    pub beta_at: f64,
    /// Largest spacing of the sampling grid used for α and β.
    pub sampling_resolution: f64,
    ion: Option<IonResponse>,
}

impl WellPotential {
    pub fn q_prime(&self, s: f64) -> f64 {
        self.electrons.density(s) - self.ion.as_ref().map_or(0.0, |i| i.i1.eval(s))
    }

    pub fn q_second(&self, s: f64) -> f64 {
        self.electrons.derivative(s) - self.ion.as_ref().map_or(0.0, |i| i.i1_prime.eval(s))
    }

    pub fn q(&self, s: f64) -> f64 {
        self.electrons.antiderivative(s) - self.ion.as_ref().map_or(0.0, |i| i.i0.eval(s) - i.i0_at_zero)
    }

    /// Ion density ∫ f∞ dv at potential s.
    pub fn ion_density(&self, s: f64) -> f64 {
        self.ion.as_ref().map_or(0.0, |i| i.i1.eval(s))
    }

    /// Q'(s)/s, continued by Q''(0) at the origin.
    pub fn slope_ratio(&self, s: f64) -> f64 {
        if s == 0.0 {
            self.q_second(0.0)
        } else {
            self.q_prime(s) / s
        }
    }
}

const WELL_SAMPLES: usize = 10_000;

/// Builds Q, Q' and the curvature pair (α, β). Works for φ_b ≤ 0; with φ_b = 0
/// the constants collapse to Q''(0).
pub fn build_well(model: &ElectronModel, profile: &InjectionProfile, phi_b: f64) -> Result<WellPotential> {
    if !(phi_b <= 0.0 && phi_b.is_finite()) {
        return Err(invalid("phi_b", "phi_b must be negative"));
    }
    let lo = if phi_b < 0.0 { phi_b } else { -1.0 };
    let mut well = WellPotential {
        phi_b,
        electrons: model.clone(),
        profile: profile.clone(),
        alpha: 0.0,
        beta: 0.0,
        alpha_at: 0.0,
        beta_at: 0.0,
        sampling_resolution: 0.0,
        ion: IonResponse::build(profile, lo)?,
    };
    let q0 = well.q_prime(0.0);
    if q0.abs() > 1e-8 * model.density(0.0).max(1.0) {
        return Err(Error::InconsistentWell { q_prime_zero: q0 });
    }
    if phi_b == 0.0 {
        let c = well.q_second(0.0);
        if c <= 0.0 {
            return Err(Error::CurvatureDegenerate { alpha: c });
        }
        well.alpha = c;
        well.beta = c;
        return Ok(well);
    }

    // Half the samples uniform on [φ_b, 0), half log-spaced toward 0.
    let half = WELL_SAMPLES / 2;
    let mut samples: Vec<f64> = (0..half).map(|k| phi_b * (1.0 - k as f64 / half as f64)).collect();
    let decades = 4.0;
    samples.extend((0..half).map(|k| phi_b * 10f64.powf(-decades * (k as f64 + 1.0) / half as f64)));
    samples.push(0.0);
    samples.sort_by(f64::total_cmp);
    samples.dedup();
    well.sampling_resolution = samples.windows(2).map(|w| w[1] - w[0]).fold(0.0, f64::max);

    let ratios: Vec<f64> = samples.iter().map(|&s| well.slope_ratio(s)).collect();
    let refine = |k: usize, sign: f64| -> (f64, f64) {
        let a = samples[k.saturating_sub(1)];
        let b = samples[(k + 1).min(samples.len() - 1)];
        let f = |s: f64| sign * well.slope_ratio(s);
        let (s, v) = golden_section_min(f, a, b, 1e-13);
        let v0 = sign * ratios[k];
        if v < v0 {
            (s, sign * v)
        } else {
            (samples[k], ratios[k])
        }
    };
    let kmin = argext(&ratios, |a, b| a < b);
    let kmax = argext(&ratios, |a, b| a > b);
    let (alpha_at, alpha) = refine(kmin, 1.0);
    let (beta_at, beta) = refine(kmax, -1.0);
    if alpha <= 0.0 {
        return Err(Error::CurvatureDegenerate { alpha });
    }
    well.alpha = alpha;
    well.beta = beta;
    well.alpha_at = alpha_at;
    well.beta_at = beta_at;
    Ok(well)
}

fn argext(v: &[f64], better: impl Fn(f64, f64) -> bool) -> usize {
    let mut k = 0;
    for (i, &x) in v.iter().enumerate() {
        if better(x, v[k]) {
            k = i;
        }
    }
    k
}
