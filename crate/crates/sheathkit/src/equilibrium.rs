//! The stationary sheath: the potential φ∞ solving λ²φ'' = Q'(φ) with
//! φ(0) = 0, φ(1) = φ_b, the equilibrium density f∞, and the phase-space
//! regions D⁺, D⁺_r, D±, D⁻ and S cut out by the microscopic energy.

use std::io::Write;

use serde::Serialize;

use crate::error::{invalid, Error, Result};
use crate::linalg::solve_tridiagonal;
use crate::profiles::WellPotential;

/// |v² + 2φ∞(x)| at or below this counts as the separatrix.
pub const SEPARATRIX_TOL: f64 = 1e-12;
/// Absolute slack allowed in the pointwise sinh sandwich.
pub const SANDWICH_TOL: f64 = 1e-6;

const MAX_NEWTON: usize = 100;
const ARMIJO: f64 = 1e-4;

/// sinh(c·x)/sinh(c) without overflow for large c; equals x when c = 0.
pub fn sinh_ratio(c: f64, x: f64) -> f64 {
    if c == 0.0 {
        return x;
    }
    (c * (x - 1.0)).exp() * (-(-2.0 * c * x).exp_m1()) / (-(-2.0 * c).exp_m1())
}

/// Default number of cells: the layer of width ~λ gets at least 32 of them.
pub fn default_grid_size(lambda: f64) -> usize {
    256usize.max((32.0 / lambda).ceil() as usize)
}

/// Which side of a knot a query belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Left,
    Right,
}

/// One piece of the potential on which φ is an exact quadratic:
/// φ(x) = phi0 + p0·(x − anchor) + c/2·(x − anchor)².
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Segment {
    pub index: isize,
    pub lo: f64,
    pub hi: f64,
    pub anchor: f64,
    pub phi0: f64,
    pub p0: f64,
    pub c: f64,
}

impl Segment {
    pub fn value(&self, x: f64) -> f64 {
        let d = x - self.anchor;
        self.phi0 + d * (self.p0 + 0.5 * self.c * d)
    }

    pub fn slope(&self, x: f64) -> f64 {
        self.p0 + self.c * (x - self.anchor)
    }
}

/// C¹ piecewise-quadratic potential on [0, 1] with a knot at every node and
/// every cell midpoint, extended affinely outside [0, 1].
///
/// The midpoint slope is chosen so the interpolant reproduces the nodal
/// values; φ' is then piecewise linear, so the force on characteristics is
/// piecewise affine and the stationary flow can be integrated exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct StationaryPotential {
    cells: usize,
    knot_x: Vec<f64>,
    knot_phi: Vec<f64>,
    knot_slope: Vec<f64>,
}

impl StationaryPotential {
    /// Builds the interpolant from values and slopes at uniform nodes i/N.
    pub fn from_nodes(values: &[f64], slopes: &[f64]) -> Result<Self> {
        let n = values.len().saturating_sub(1);
        if n < 1 || slopes.len() != values.len() {
            return Err(invalid(
                "potential",
                "need matching values and slopes on at least two nodes",
            ));
        }
        if values.iter().chain(slopes).any(|v| !v.is_finite()) {
            return Err(invalid("potential", "values and slopes must be finite"));
        }
        let h = 1.0 / n as f64;
        let hk = 0.5 * h;
        let mut knot_x = Vec::with_capacity(2 * n + 1);
        let mut knot_phi = Vec::with_capacity(2 * n + 1);
        let mut knot_slope = Vec::with_capacity(2 * n + 1);
        for i in 0..n {
            let delta = (values[i + 1] - values[i]) / h;
            let mid = 2.0 * delta - 0.5 * (slopes[i] + slopes[i + 1]);
            knot_x.push(i as f64 / n as f64);
            knot_phi.push(values[i]);
            knot_slope.push(slopes[i]);
            knot_x.push((2 * i + 1) as f64 / (2 * n) as f64);
            knot_phi.push(values[i] + 0.5 * hk * (slopes[i] + mid));
            knot_slope.push(mid);
        }
        knot_x.push(1.0);
        knot_phi.push(values[n]);
        knot_slope.push(slopes[n]);
        Ok(Self {
            cells: n,
            knot_x,
            knot_phi,
            knot_slope,
        })
    }

    /// The affine potential φ(x) = φ_b·x on `cells` cells.
    pub fn linear(phi_b: f64, cells: usize) -> Result<Self> {
        let values: Vec<f64> = (0..=cells).map(|i| phi_b * i as f64 / cells as f64).collect();
        Self::from_nodes(&values, &vec![phi_b; cells + 1])
    }

    pub fn cells(&self) -> usize {
        self.cells
    }

    /// Knot positions (nodes and midpoints), values and slopes.
    pub fn knots(&self) -> (&[f64], &[f64], &[f64]) {
        (&self.knot_x, &self.knot_phi, &self.knot_slope)
    }

    pub fn num_segments(&self) -> usize {
        self.knot_x.len() - 1
    }

    /// Segment `j`; −1 and `num_segments()` are the affine extensions.
    pub fn segment(&self, j: isize) -> Segment {
        let m = self.num_segments() as isize;
        if j < 0 {
            Segment {
                index: -1,
                lo: f64::NEG_INFINITY,
                hi: 0.0,
                anchor: 0.0,
                phi0: self.knot_phi[0],
                p0: self.knot_slope[0],
                c: 0.0,
            }
        } else if j >= m {
            let last = self.knot_x.len() - 1;
            Segment {
                index: m,
                lo: 1.0,
                hi: f64::INFINITY,
                anchor: 1.0,
                phi0: self.knot_phi[last],
                p0: self.knot_slope[last],
                c: 0.0,
            }
        } else {
            let k = j as usize;
            let hk = self.knot_x[k + 1] - self.knot_x[k];
            Segment {
                index: j,
                lo: self.knot_x[k],
                hi: self.knot_x[k + 1],
                anchor: self.knot_x[k],
                phi0: self.knot_phi[k],
                p0: self.knot_slope[k],
                c: (self.knot_slope[k + 1] - self.knot_slope[k]) / hk,
            }
        }
    }

    /// Segment containing `x`; at a knot, `side` picks the neighbour.
    pub fn locate(&self, x: f64, side: Side) -> Segment {
        let m = self.num_segments();
        let j = if x < 0.0 || (x == 0.0 && side == Side::Left) {
            -1
        } else if x > 1.0 || (x == 1.0 && side == Side::Right) {
            m as isize
        } else {
            let k = ((x * (2 * self.cells) as f64).floor() as usize).min(m - 1);
            // Guard the floor against rounding at knots.
            let k = if x < self.knot_x[k] {
                k - 1
            } else if k + 1 < self.knot_x.len() && x >= self.knot_x[k + 1] && k + 1 < m {
                k + 1
            } else {
                k
            };
            if side == Side::Left && x == self.knot_x[k] && k > 0 {
                (k - 1) as isize
            } else {
                k as isize
            }
        };
        self.segment(j)
    }

    pub fn value(&self, x: f64) -> f64 {
        self.locate(x, Side::Right).value(x)
    }

    pub fn slope(&self, x: f64) -> f64 {
        self.locate(x, Side::Right).slope(x)
    }

    /// φ'' on the segment to the right of `x` (zero outside [0, 1]).
    pub fn curvature(&self, x: f64) -> f64 {
        self.locate(x, Side::Right).c
    }

    pub fn phi_b(&self) -> f64 {
        self.knot_phi[self.knot_phi.len() - 1]
    }

    pub fn slope_at_zero(&self) -> f64 {
        self.knot_slope[0]
    }

    /// ‖φ'‖ on [0, 1]; slopes are piecewise linear so knots suffice. The
    /// affine extension never exceeds it.
    pub fn max_abs_slope(&self) -> f64 {
        self.knot_slope.iter().fold(0.0, |m, s| m.max(s.abs()))
    }

    /// Every knot slope negative, so φ is strictly decreasing on ℝ.
    pub fn strictly_decreasing(&self) -> bool {
        self.knot_slope.iter().all(|&s| s < 0.0)
    }

    /// Solves φ(x) = level on [0, 1] for a strictly decreasing potential,
    /// clamping levels outside [φ_b, 0] to the ends.
    pub fn inverse(&self, level: f64) -> f64 {
        let last = self.knot_phi.len() - 1;
        if level >= self.knot_phi[0] {
            return 0.0;
        }
        if level <= self.knot_phi[last] {
            return 1.0;
        }
        // knot_phi is decreasing: first knot strictly below the level.
        let k = self.knot_phi.partition_point(|&p| p >= level);
        let seg = self.segment(k as isize - 1);
        let delta = level - seg.phi0;
        let disc = (seg.p0 * seg.p0 + 2.0 * seg.c * delta).max(0.0);
        let denom = seg.p0 - disc.sqrt();
        let xi = if denom != 0.0 { 2.0 * delta / denom } else { 0.0 };
        (seg.lo + xi).clamp(seg.lo, seg.hi)
    }

    /// Microscopic energy v²/2 + φ(x).
    pub fn energy(&self, x: f64, v: f64) -> f64 {
        0.5 * v * v + self.value(x)
    }

    pub fn classify(&self, x: f64, v: f64, r: f64) -> PhaseRegion {
        let e = v * v + 2.0 * self.value(x);
        if e.abs() <= SEPARATRIX_TOL {
            PhaseRegion::Separatrix
        } else if e < 0.0 {
            PhaseRegion::DPlusMinus
        } else if v > 0.0 {
            PhaseRegion::DPlus {
                margin: if r > 0.0 && e > r * r { r } else { 0.0 },
            }
        } else {
            PhaseRegion::DMinus
        }
    }
}

/// Phase-space region of a point of Q.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum PhaseRegion {
    /// In D⁺; `margin` is the queried r when the point also lies in D⁺_r, else 0.
    DPlus {
        margin: f64,
    },
    DPlusMinus,
    DMinus,
    Separatrix,
}

impl PhaseRegion {
    pub fn is_dplus(&self) -> bool {
        matches!(self, Self::DPlus { .. })
    }

    /// Short label for tables and plots.
    pub fn label(&self) -> &'static str {
        match self {
            Self::DPlus { margin } if *margin > 0.0 => "dplus_r",
            Self::DPlus { .. } => "dplus",
            Self::DPlusMinus => "dplusminus",
            Self::DMinus => "dminus",
            Self::Separatrix => "separatrix",
        }
    }
}

/// Convergence and shape diagnostics of the equilibrium solve.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SolveDiagnostics {
    pub iterations: usize,
    /// max |λ²φ'' − Q'(φ)| over interior nodes (discrete).
    pub residual: f64,
    pub functional: f64,
    pub gradient_fallbacks: usize,
    pub monotone: bool,
    pub concave: bool,
    pub max_second_difference: f64,
}

/// Solved sheath equilibrium on a uniform grid of [0, 1].
#[derive(Debug, Clone)]
pub struct Equilibrium {
    pub lambda: f64,
    pub phi_b: f64,
    pub x: Vec<f64>,
    pub phi: Vec<f64>,
    pub dphi: Vec<f64>,
    pub potential: StationaryPotential,
    pub well: WellPotential,
    pub diagnostics: SolveDiagnostics,
}

fn discrete_functional(well: &WellPotential, lambda: f64, u: &[f64]) -> f64 {
    let n = u.len() - 1;
    let h = 1.0 / n as f64;
    let grad: f64 = u.windows(2).map(|w| (w[1] - w[0]) * (w[1] - w[0])).sum();
    let pot: f64 = u[1..n].iter().map(|&s| well.q(s)).sum();
    0.5 * lambda * lambda / h * grad + h * pot
}

fn residuals(well: &WellPotential, lambda: f64, u: &[f64]) -> Vec<f64> {
    let n = u.len() - 1;
    let lap = lambda * lambda * (n * n) as f64;
    (1..n)
        .map(|i| lap * (2.0 * u[i] - u[i - 1] - u[i + 1]) + well.q_prime(u[i]))
        .collect()
}

/// Minimises the discrete functional Σ λ²/(2h)(Δψ)² + h·Σ Q(ψ_i) over
/// φ_b ≤ ψ ≤ 0 with the Dirichlet data, by projected damped Newton.
pub fn solve_equilibrium(well: &WellPotential, lambda: f64, grid_size: usize) -> Result<Equilibrium> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(invalid("lambda", "Debye length must be positive"));
    }
    if grid_size < 64 {
        return Err(invalid("grid_size", "need at least 64 cells"));
    }
    let n = grid_size;
    let h = 1.0 / n as f64;
    let phi_b = well.phi_b;
    let x: Vec<f64> = (0..=n).map(|i| i as f64 / n as f64).collect();
    if phi_b == 0.0 {
        // Q ≥ 0 with Q(0) = 0: the zero profile is the minimiser.
        return build(well, lambda, vec![0.0; n + 1], 0, 0.0, 0);
    }

    let c0 = (0.5 * (well.alpha + well.beta)).sqrt() / lambda;
    let mut u: Vec<f64> = x
        .iter()
        .map(|&xi| (phi_b * sinh_ratio(c0, xi)).clamp(phi_b, 0.0))
        .collect();
    u[0] = 0.0;
    u[n] = phi_b;

    let lap = lambda * lambda / (h * h);
    let tol = 1e-10_f64.max(64.0 * f64::EPSILON * lap * phi_b.abs());
    let mut iterations = 0;
    let mut fallbacks = 0;
    let mut residual;
    let mut active = vec![false; n + 1];
    loop {
        let r = residuals(well, lambda, &u);
        residual = 0.0_f64;
        for i in 1..n {
            let ri = r[i - 1];
            active[i] = (u[i] <= phi_b && ri > 0.0) || (u[i] >= 0.0 && ri < 0.0);
            if !active[i] {
                residual = residual.max(ri.abs());
            }
        }
        if residual <= tol {
            break;
        }
        if iterations >= MAX_NEWTON {
            return Err(Error::NoConvergence { iterations, residual });
        }
        iterations += 1;

        let m = n - 1;
        let (mut sub, mut diag, mut sup, mut rhs) = (vec![0.0; m], vec![0.0; m], vec![0.0; m], vec![0.0; m]);
        for k in 0..m {
            let i = k + 1;
            if active[i] {
                diag[k] = 1.0;
                continue;
            }
            diag[k] = 2.0 * lap + well.q_second(u[i]).max(0.0);
            if i > 1 && !active[i - 1] {
                sub[k] = -lap;
            }
            if i < n - 1 && !active[i + 1] {
                sup[k] = -lap;
            }
            rhs[k] = -r[k];
        }
        let newton = solve_tridiagonal(&sub, &diag, &sup, &rhs)?;
        let gradient: Vec<f64> = (0..m)
            .map(|k| if active[k + 1] { 0.0 } else { -r[k] / diag[k] })
            .collect();

        let j0 = discrete_functional(well, lambda, &u);
        let try_direction = |dir: &[f64]| -> Option<Vec<f64>> {
            let mut t = 1.0;
            for _ in 0..50 {
                let mut trial = u.clone();
                let mut decrease = 0.0;
                for k in 0..m {
                    let i = k + 1;
                    trial[i] = (u[i] + t * dir[k]).clamp(phi_b, 0.0);
                    decrease += h * r[k] * (trial[i] - u[i]);
                }
                let j1 = discrete_functional(well, lambda, &trial);
                if j1 <= j0 + ARMIJO * decrease {
                    return Some(trial);
                }
                // Near convergence J stalls in round-off; accept a step that
                // still halves the residual.
                let r1 = residuals(well, lambda, &trial);
                if r1.iter().fold(0.0_f64, |a, b| a.max(b.abs())) <= 0.5 * residual {
                    return Some(trial);
                }
                t *= 0.5;
            }
            None
        };
        u = match try_direction(&newton) {
            Some(next) => next,
            None => {
                fallbacks += 1;
                try_direction(&gradient).ok_or(Error::NoConvergence { iterations, residual })?
            }
        };
    }
    let r = residuals(well, lambda, &u);
    for i in 1..n {
        if active[i] && r[i - 1].abs() > tol {
            return Err(Error::ConstraintViolation { node: i });
        }
    }
    build(well, lambda, u, iterations, residual, fallbacks)
}

/// Assembles the equilibrium from converged nodal values.
fn build(
    well: &WellPotential,
    lambda: f64,
    u: Vec<f64>,
    iterations: usize,
    residual: f64,
    gradient_fallbacks: usize,
) -> Result<Equilibrium> {
    let n = u.len() - 1;
    let h = 1.0 / n as f64;
    let l2 = lambda * lambda;
    // Differences corrected with φ''' = Q''(φ)φ'/λ², which the ODE supplies.
    let corr = |s: f64| 1.0 + h * h * well.q_second(s) / (6.0 * l2);
    let mut dphi = vec![0.0; n + 1];
    for i in 1..n {
        dphi[i] = (u[i + 1] - u[i - 1]) / (2.0 * h) / corr(u[i]);
    }
    let dd0 = well.q_prime(u[0]) / l2;
    dphi[0] = (u[1] - u[0] - 0.5 * h * h * dd0) / (h * corr(u[0]));
    let ddn = well.q_prime(u[n]) / l2;
    dphi[n] = (u[n] - u[n - 1] + 0.5 * h * h * ddn) / (h * corr(u[n]));

    if well.phi_b == 0.0 {
        dphi.iter_mut().for_each(|d| *d = 0.0);
    }
    let potential = StationaryPotential::from_nodes(&u, &dphi)?;
    let monotone = u.windows(2).all(|w| w[1] < w[0]) || well.phi_b == 0.0;
    let max_second_difference = u
        .windows(3)
        .map(|w| w[0] - 2.0 * w[1] + w[2])
        .fold(f64::NEG_INFINITY, f64::max);
    let concave = max_second_difference <= 1e-8 * well.phi_b.abs().max(f64::MIN_POSITIVE);
    let functional = discrete_functional(well, lambda, &u);
    Ok(Equilibrium {
        lambda,
        phi_b: well.phi_b,
        x: (0..=n).map(|i| i as f64 / n as f64).collect(),
        phi: u,
        dphi,
        potential,
        well: well.clone(),
        diagnostics: SolveDiagnostics {
            iterations,
            residual,
            functional,
            gradient_fallbacks,
            monotone,
            concave,
            max_second_difference,
        },
    })
}

impl Equilibrium {
    pub fn cells(&self) -> usize {
        self.x.len() - 1
    }

    pub fn phi_at(&self, x: f64) -> f64 {
        self.potential.value(x)
    }

    pub fn dphi_at(&self, x: f64) -> f64 {
        self.potential.slope(x)
    }

    /// f∞(x, v) = μ(√(v² + 2φ∞(x))) on D⁺, zero elsewhere.
    pub fn f_inf(&self, x: f64, v: f64) -> f64 {
        let e = v * v + 2.0 * self.phi_at(x);
        if v > 0.0 && e > 0.0 {
            self.well.profile.value(e.sqrt())
        } else {
            0.0
        }
    }

    pub fn classify(&self, x: f64, v: f64, r: f64) -> PhaseRegion {
        self.potential.classify(x, v, r)
    }

    /// Net charge ∫f∞ dv − n_e(φ∞) = −Q'(φ∞(x)).
    pub fn charge_density(&self, x: f64) -> f64 {
        -self.well.q_prime(self.phi_at(x))
    }

    /// Discrete functional at arbitrary nodal values (same grid and data).
    pub fn discrete_functional(&self, values: &[f64]) -> f64 {
        discrete_functional(&self.well, self.lambda, values)
    }

    /// Largest interior residual of λ²φ'' = Q'(φ) in the 3-point stencil.
    pub fn equation_residual(&self) -> f64 {
        residuals(&self.well, self.lambda, &self.phi)
            .iter()
            .fold(0.0, |m, r| m.max(r.abs()))
    }

    /// ∫ λ²/2 |φ'|² + α/2 |φ|² over [0, 1], exact on the interpolant.
    pub fn energy_integral(&self) -> f64 {
        let (kx, _, ks) = self.potential.knots();
        let l2 = self.lambda * self.lambda;
        let mut total = 0.0;
        for j in 0..kx.len() - 1 {
            let (a, b) = (kx[j], kx[j + 1]);
            let len = b - a;
            let (p0, p1) = (ks[j], ks[j + 1]);
            total += 0.5 * l2 * len * (p0 * p0 + p0 * p1 + p1 * p1) / 3.0;
            total += 0.5 * self.well.alpha * gauss3(|s| self.phi_at(s).powi(2), a, b);
        }
        total
    }

    /// ‖∫f∞ dv − n_e(φ∞)‖ in L^p(0, 1).
    pub fn quasineutrality_norm(&self, p: f64) -> f64 {
        let (kx, _, _) = self.potential.knots();
        let mut total = 0.0;
        for w in kx.windows(2) {
            total += gauss3(|s| self.charge_density(s).abs().powf(p), w[0], w[1]);
        }
        total.powf(1.0 / p)
    }

    /// CSV with columns x, phi_inf, dphi_inf, charge_density.
    pub fn write_csv<W: Write>(&self, out: W) -> std::io::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["x", "phi_inf", "dphi_inf", "charge_density"])?;
        for i in 0..self.x.len() {
            let x = self.x[i];
            w.write_record([
                x.to_string(),
                self.phi[i].to_string(),
                self.dphi[i].to_string(),
                self.charge_density(x).to_string(),
            ])?;
        }
        w.flush()
    }
}

/// Three-point Gauss–Legendre, exact for quintics.
fn gauss3<F: Fn(f64) -> f64>(f: F, a: f64, b: f64) -> f64 {
    let c = 0.5 * (a + b);
    let hw = 0.5 * (b - a);
    let z = hw * (0.6f64).sqrt();
    hw * (5.0 * f(c - z) + 8.0 * f(c) + 5.0 * f(c + z)) / 9.0
}

/// A node where the sinh sandwich fails by more than [`SANDWICH_TOL`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SandwichViolation {
    pub node: usize,
    pub x: f64,
    pub lower: f64,
    pub value: f64,
    pub upper: f64,
    pub excess: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundsReport {
    pub alpha: f64,
    pub beta: f64,
    /// Spacing of the grid on which α and β were sampled.
    pub sampling_resolution: f64,
    pub violations: Vec<SandwichViolation>,
    /// Largest amount by which |φ∞| leaves the sandwich (≤ 0 when inside).
    pub max_excess: f64,
    pub slope_at_zero: f64,
    pub slope_bound: f64,
    pub slope_negative: bool,
    pub slope_ok: bool,
    pub energy: f64,
    pub energy_ratio: f64,
}

impl BoundsReport {
    pub fn passes(&self) -> bool {
        self.violations.is_empty() && self.slope_ok && self.slope_negative
    }
}

/// Checks the sinh sandwich at every node, the slope at the plasma edge and
/// the energy integral.
pub fn verify_equilibrium_bounds(eq: &Equilibrium) -> BoundsReport {
    let w = &eq.well;
    let pb = eq.phi_b.abs();
    let (ca, cb) = (w.alpha.sqrt() / eq.lambda, w.beta.sqrt() / eq.lambda);
    let mut violations = Vec::new();
    let mut max_excess = f64::NEG_INFINITY;
    for (i, (&x, &p)) in eq.x.iter().zip(&eq.phi).enumerate() {
        let lower = pb * sinh_ratio(cb, x);
        let upper = pb * sinh_ratio(ca, x);
        let value = p.abs();
        let excess = (lower - value).max(value - upper);
        max_excess = max_excess.max(excess);
        if excess > SANDWICH_TOL {
            violations.push(SandwichViolation {
                node: i,
                x,
                lower,
                value,
                upper,
                excess,
            });
        }
    }
    let slope_at_zero = eq.dphi[0];
    // ca/sinh(ca) written to survive large ca.
    let slope_bound = pb
        * if ca == 0.0 {
            1.0
        } else {
            2.0 * ca * (-ca).exp() / (-(-2.0 * ca).exp_m1())
        };
    let energy = eq.energy_integral();
    BoundsReport {
        alpha: w.alpha,
        beta: w.beta,
        sampling_resolution: w.sampling_resolution,
        violations,
        max_excess,
        slope_at_zero,
        slope_bound,
        slope_negative: slope_at_zero < 0.0 || pb == 0.0,
        slope_ok: slope_at_zero.abs() <= slope_bound + SANDWICH_TOL,
        energy,
        energy_ratio: energy / eq.lambda,
    }
}

/// One row of a quasi-neutrality scan.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QuasiNeutralityRow {
    pub lambda: f64,
    pub cells: usize,
    pub norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QuasiNeutralityScan {
    pub p: f64,
    /// Rows sorted by decreasing λ.
    pub rows: Vec<QuasiNeutralityRow>,
    /// Whether the norm strictly decreases as λ decreases (or is identically zero).
    pub decreasing: bool,
}

/// Solves the equilibrium for each λ (default grid) and measures the net
/// charge in L^p.
pub fn quasineutrality_scan(well: &WellPotential, lambdas: &[f64], p: f64) -> Result<QuasiNeutralityScan> {
    if !(p >= 1.0) {
        return Err(invalid("p", "exponent must be at least 1"));
    }
    let mut ls = lambdas.to_vec();
    ls.sort_by(|a, b| b.total_cmp(a));
    let mut rows = Vec::with_capacity(ls.len());
    for &lambda in &ls {
        let cells = default_grid_size(lambda);
        let eq = solve_equilibrium(well, lambda, cells)?;
        rows.push(QuasiNeutralityRow {
            lambda,
            cells,
            norm: eq.quasineutrality_norm(p),
        });
    }
    let all_zero = rows.iter().all(|r| r.norm == 0.0);
    let decreasing = all_zero || rows.windows(2).all(|w| w[1].norm < w[0].norm);
    Ok(QuasiNeutralityScan { p, rows, decreasing })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::profiles::{build_well, ElectronModel, InjectionProfile, ProfileShape};
    use crate::quadrature::{integrate, QuadTol};
    use rand::{Rng, SeedableRng};
    use std::sync::OnceLock;

    fn reference_well(phi_b: f64) -> WellPotential {
        let ne = ElectronModel::boltzmann(1.0).unwrap();
        let mu = InjectionProfile::with_mass(ProfileShape::Bump, 3.0, 1.0, 1.0).unwrap();
        build_well(&ne, &mu, phi_b).unwrap()
    }

    fn reference() -> &'static Equilibrium {
        static EQ: OnceLock<Equilibrium> = OnceLock::new();
        EQ.get_or_init(|| solve_equilibrium(&reference_well(-1.0), 0.1, default_grid_size(0.1)).unwrap())
    }

    #[test]
    fn sinh_ratio_matches_naive_and_survives_large_arguments() {
        for &(c, x) in &[(0.5f64, 0.3f64), (3.0, 0.9), (20.0, 0.5)] {
            let naive = (c * x).sinh() / c.sinh();
            assert!((sinh_ratio(c, x) - naive).abs() < 1e-14 * naive.max(1e-300));
        }
        assert_eq!(sinh_ratio(0.0, 0.25), 0.25);
        let big = sinh_ratio(5000.0, 0.999);
        assert!(big.is_finite() && (big - (-5.0f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn interpolant_reproduces_nodes_and_is_c1() {
        let values: Vec<f64> = (0..=8).map(|i| -((i as f64) / 8.0).powi(2)).collect();
        let slopes: Vec<f64> = (0..=8).map(|i| -2.0 * i as f64 / 8.0).collect();
        let p = StationaryPotential::from_nodes(&values, &slopes).unwrap();
        for (i, v) in values.iter().enumerate() {
            assert!((p.value(i as f64 / 8.0) - v).abs() < 1e-15);
        }
        // Exact for quadratics.
        for k in 0..=100 {
            let x = k as f64 / 100.0;
            assert!((p.value(x) + x * x).abs() < 1e-14);
            assert!((p.slope(x) + 2.0 * x).abs() < 1e-13);
        }
        let (kx, _, _) = p.knots();
        for &k in &kx[1..kx.len() - 1] {
            let l = p.locate(k, Side::Left);
            let r = p.locate(k, Side::Right);
            assert!((l.value(k) - r.value(k)).abs() < 1e-15);
            assert!((l.slope(k) - r.slope(k)).abs() < 1e-14);
        }
        // Affine extension with the end slopes.
        assert!((p.value(-0.5) - 0.0).abs() < 1e-15);
        assert!((p.value(1.5) - (-1.0 - 2.0 * 0.5)).abs() < 1e-14);
        let lin = StationaryPotential::linear(-1.0, 4).unwrap();
        assert!((lin.inverse(-0.37) - 0.37).abs() < 1e-15);
    }

    #[test]
    fn zero_wall_potential_gives_zero_profile() {
        let eq = solve_equilibrium(&reference_well(0.0), 0.1, 128).unwrap();
        assert!(eq.phi.iter().all(|&p| p == 0.0));
        assert_eq!(eq.diagnostics.functional, 0.0);
        let rep = verify_equilibrium_bounds(&eq);
        assert!(rep.passes());
        assert_eq!(rep.max_excess, 0.0);
        let scan = quasineutrality_scan(&reference_well(0.0), &[0.2, 0.1], 1.0).unwrap();
        // Only the quadrature residual of the neutrality condition remains.
        assert!(scan.rows.iter().all(|r| r.norm < 1e-10));
    }

    #[test]
    fn reference_equilibrium_satisfies_sandwich_and_energy_bounds() {
        let eq = reference();
        assert_eq!(eq.phi[0], 0.0);
        assert_eq!(*eq.phi.last().unwrap(), -1.0);
        assert!(eq.diagnostics.monotone && eq.diagnostics.concave);
        assert!(eq.potential.strictly_decreasing());
        assert!(eq.equation_residual() < 1e-9);
        let rep = verify_equilibrium_bounds(eq);
        assert!(
            rep.violations.is_empty(),
            "{:?}",
            &rep.violations[..rep.violations.len().min(3)]
        );
        assert!(rep.slope_negative && rep.slope_ok, "{rep:?}");
    }

    #[test]
    fn boundary_layer_sharpens_as_lambda_decreases() {
        let well = reference_well(-1.0);
        let mut prev = f64::INFINITY;
        let mut ratios = Vec::new();
        for &lambda in &[0.2, 0.1, 0.05] {
            let eq = solve_equilibrium(&well, lambda, default_grid_size(lambda)).unwrap();
            let sup_half =
                eq.x.iter()
                    .zip(&eq.phi)
                    .filter(|(x, _)| **x <= 0.5)
                    .fold(0.0_f64, |m, (_, p)| m.max(p.abs()));
            assert!(sup_half < prev);
            prev = sup_half;
            ratios.push(verify_equilibrium_bounds(&eq).energy_ratio);
        }
        // Energy is O(λ): the ratio stays within a fixed band.
        let (lo, hi) = ratios
            .iter()
            .fold((f64::INFINITY, 0.0_f64), |(a, b), &r| (a.min(r), b.max(r)));
        assert!(hi / lo < 1.5, "{ratios:?}");
    }

    #[test]
    fn f_inf_and_classification_examples() {
        let eq = reference();
        let mu = &eq.well.profile;
        assert_eq!(eq.f_inf(0.3, -2.0), 0.0);
        assert!((eq.f_inf(0.0, 3.0) - mu.value(3.0)).abs() < 1e-15);
        // Constant along the energy level through (0, 3).
        let v1 = 11f64.sqrt();
        assert!((eq.f_inf(1.0, v1) - mu.value(3.0)).abs() < 1e-12);

        assert_eq!(eq.classify(0.5, 10.0, 9.0), PhaseRegion::DPlus { margin: 9.0 });
        let x = 0.7;
        let v = -(-2.0 * eq.phi_at(x)).sqrt();
        assert_eq!(eq.classify(x, v, 0.0), PhaseRegion::Separatrix);
        assert!(eq.phi_at(0.9) < -5e-5);
        assert_eq!(eq.classify(0.9, -0.01, 0.0), PhaseRegion::DPlusMinus);
        assert_eq!(eq.classify(0.2, -3.0, 0.0), PhaseRegion::DMinus);
        assert_eq!(eq.classify(0.2, 1.5, 2.0), PhaseRegion::DPlus { margin: 0.0 });
    }

    #[test]
    fn f_inf_vanishes_off_dplus() {
        let eq = reference();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..2000 {
            let x: f64 = rng.gen();
            let v: f64 = rng.gen_range(-5.0..5.0);
            let region = eq.classify(x, v, 2.0);
            if !region.is_dplus() {
                assert_eq!(eq.f_inf(x, v), 0.0);
            }
            // supp μ ⊂ (2, ∞): nothing outside D⁺_2.
            if region != (PhaseRegion::DPlus { margin: 2.0 }) {
                assert_eq!(eq.f_inf(x, v), 0.0);
            }
        }
    }

    #[test]
    fn charge_density_is_velocity_moment_of_f_inf() {
        let eq = reference();
        for &x in &[0.05, 0.5, 0.95] {
            let p = eq.phi_at(x);
            let vmin = (-2.0 * p).sqrt();
            let ion = integrate(|v| eq.f_inf(x, v), vmin, 6.0, QuadTol::default()).unwrap();
            let electrons = eq.well.electrons.density(p);
            assert!((ion - electrons - eq.charge_density(x)).abs() < 1e-9);
        }
    }

    #[test]
    fn quasineutrality_improves_as_lambda_decreases() {
        let scan = quasineutrality_scan(&reference_well(-1.0), &[0.05, 0.2, 0.1], 1.0).unwrap();
        assert!(scan.decreasing, "{scan:?}");
        assert_eq!(scan.rows[0].lambda, 0.2);
    }

    #[test]
    fn discrete_minimiser_beats_feasible_perturbations() {
        let eq = reference();
        let j0 = eq.discrete_functional(&eq.phi);
        let n = eq.cells();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let amp = 10f64.powf(rng.gen_range(-6.0..-2.0));
            let mut u = eq.phi.clone();
            for ui in &mut u[1..n] {
                *ui = (*ui + amp * rng.gen_range(-1.0..1.0)).clamp(-1.0, 0.0);
            }
            let j1 = eq.discrete_functional(&u);
            assert!(j1 >= j0, "amp {amp:e}: {j1} < {j0}");
        }
    }

    #[test]
    fn csv_export_has_header_and_all_nodes() {
        let eq = reference();
        let mut buf = Vec::new();
        eq.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("x,phi_inf,dphi_inf,charge_density"));
        assert_eq!(lines.count(), eq.x.len());
    }

    #[test]
    fn rejects_bad_arguments() {
        let w = reference_well(-1.0);
        assert!(matches!(
            solve_equilibrium(&w, 0.0, 256),
            Err(Error::InvalidArgument { .. })
        ));
        assert!(matches!(
            solve_equilibrium(&w, 0.1, 10),
            Err(Error::InvalidArgument { .. })
        ));
    }
}
