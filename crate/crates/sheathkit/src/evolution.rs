//! Backward semi-Lagrangian evolution of the fluctuation h and the
//! perturbation potential U, for the linearized and the perturbative
//! nonlinear systems.
//!
//! Every grid node is traced back over one step. Feet that stay in Q read
//! h(t) by bilinear interpolation; feet that leave Q read the homogeneous
//! incoming datum 0. The source ∂xU·∂_v f∞ is integrated by the midpoint
//! rule on the stretch of the arc inside Q. U(t + dt) and h(t + dt) are made
//! consistent by Picard iteration through the Poisson solver.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::characteristics::{
    default_ode_step, linear_exit_bound, stationary_back_arc, verlet_back_arc, BackArc, FieldSource,
};
use crate::elliptic::{solve_linear_poisson, solve_nonlinear_poisson, PotentialField, SourceDensity};
use crate::equilibrium::Equilibrium;
use crate::error::{invalid, Error, Result};
use crate::profiles::bump_unit_mass;

/// Nodes with |h| above this fraction of max|h| count as support.
/// Bilinear interpolation leaves exponentially small tails, so an exact
/// zero test would measure interpolation stencils, not transport.
pub const SUPPORT_REL_TOL: f64 = 1e-10;
/// Largest tolerated share of ‖h‖₁ in the cells touching |v| = v_max.
pub const EDGE_REL_TOL: f64 = 1e-8;

/// Linearized or perturbative nonlinear dynamics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Linear,
    Nonlinear,
}

/// How stationary characteristics are traced in linear mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tracer {
    /// Closed-form segment flow; the source uses the conserved 𝒢(x, v).
    Exact,
    /// Velocity-Verlet; the source uses ∂_v f∞ at the traced midpoint, the
    /// same discretization as nonlinear mode.
    Verlet,
}

/// Tensor grid: x nodes are the equilibrium nodes, v nodes are uniform on
/// [−v_max, v_max].
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseGrid {
    pub nx: usize,
    pub nv: usize,
    pub v_max: f64,
}

impl PhaseGrid {
    pub fn new(nx: usize, nv: usize, v_max: f64) -> Result<Self> {
        if nx < 2 || nv < 2 || !(v_max > 0.0) {
            return Err(invalid("grid", "need at least two cells per axis and v_max > 0"));
        }
        Ok(Self { nx, nv, v_max })
    }

    pub fn hx(&self) -> f64 {
        1.0 / self.nx as f64
    }

    pub fn hv(&self) -> f64 {
        2.0 * self.v_max / self.nv as f64
    }

    pub fn x(&self, i: usize) -> f64 {
        i as f64 / self.nx as f64
    }

    pub fn v(&self, j: usize) -> f64 {
        -self.v_max + self.hv() * j as f64
    }

    pub fn nodes(&self) -> usize {
        (self.nx + 1) * (self.nv + 1)
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize) -> usize {
        i * (self.nv + 1) + j
    }

    /// Bilinear stencil at (x, v); None outside the grid.
    fn stencil(&self, x: f64, v: f64) -> Option<[(usize, f64); 4]> {
        let sx = (x * self.nx as f64).clamp(0.0, self.nx as f64);
        let sv = (v + self.v_max) / self.hv();
        if !(0.0..=self.nv as f64).contains(&sv) {
            return None;
        }
        let i = (sx.floor() as usize).min(self.nx - 1);
        let j = (sv.floor() as usize).min(self.nv - 1);
        let (a, b) = (sx - i as f64, sv - j as f64);
        Some([
            (self.index(i, j), (1.0 - a) * (1.0 - b)),
            (self.index(i, j + 1), (1.0 - a) * b),
            (self.index(i + 1, j), a * (1.0 - b)),
            (self.index(i + 1, j + 1), a * b),
        ])
    }

    /// v-trapezoid of nodal values at every x node.
    pub fn density(&self, h: &[f64]) -> Vec<f64> {
        let hv = self.hv();
        (0..=self.nx)
            .map(|i| {
                let row = &h[self.index(i, 0)..=self.index(i, self.nv)];
                let inner: f64 = row[1..self.nv].iter().sum();
                hv * (inner + 0.5 * (row[0] + row[self.nv]))
            })
            .collect()
    }
}

/// Product bump amp·b((x − xc)/wx)·b((v − vc)/wv) with b(z) = exp(−1/(1−z²)).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Bump {
    pub x_center: f64,
    pub x_half_width: f64,
    pub v_center: f64,
    pub v_half_width: f64,
    pub amplitude: f64,
}

fn unit_bump(z: f64) -> f64 {
    let s = 1.0 - z * z;
    if s <= 0.0 {
        0.0
    } else {
        (-1.0 / s).exp()
    }
}

impl Bump {
    pub fn value(&self, x: f64, v: f64) -> f64 {
        self.amplitude
            * unit_bump((x - self.x_center) / self.x_half_width)
            * unit_bump((v - self.v_center) / self.v_half_width)
    }

    /// ∫∫|bump| = |amp|·wx·wv·m², m = ∫b over (−1, 1).
    pub fn l1(&self) -> f64 {
        let m = bump_unit_mass();
        self.amplitude.abs() * self.x_half_width * self.v_half_width * m * m
    }

    fn validate(&self) -> Result<()> {
        let ok = self.x_half_width > 0.0
            && self.v_half_width > 0.0
            && self.amplitude.is_finite()
            && self.x_center - self.x_half_width >= 0.0
            && self.x_center + self.x_half_width <= 1.0;
        if ok {
            Ok(())
        } else {
            Err(invalid(
                "initial",
                "bumps need positive widths and x-support inside [0, 1]",
            ))
        }
    }
}

/// h₀ as a sum of product bumps.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialDatum {
    #[serde(default)]
    pub bumps: Vec<Bump>,
}

impl InitialDatum {
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn value(&self, x: f64, v: f64) -> f64 {
        self.bumps.iter().map(|b| b.value(x, v)).sum()
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            bumps: self
                .bumps
                .iter()
                .map(|b| Bump {
                    amplitude: b.amplitude * factor,
                    ..*b
                })
                .collect(),
        }
    }

    /// Largest |v| reached by the support.
    pub fn v_extent(&self) -> f64 {
        self.bumps
            .iter()
            .map(|b| b.v_center.abs() + b.v_half_width)
            .fold(0.0, f64::max)
    }
}

/// Membership diagnostics for the admissible class of initial data.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Admissibility {
    pub l1: f64,
    pub linf: f64,
    /// ∫∫ v²|h₀|.
    pub second_moment: f64,
    /// sup v²|h₀|.
    pub v2_linf: f64,
    /// Every support node lies in D⁺_r.
    pub support_in_dplus_r: bool,
    pub warnings: Vec<String>,
}

/// 𝒢(x, v) and ∂_v f∞ = v·𝒢 of the equilibrium.
#[derive(Debug, Clone, Copy)]
pub struct SourceKernel<'a> {
    eq: &'a Equilibrium,
}

impl<'a> SourceKernel<'a> {
    pub fn new(eq: &'a Equilibrium) -> Self {
        Self { eq }
    }

    /// 𝟙_{D⁺}·μ'(√E)/√E with E = v² + 2φ∞(x).
    pub fn g(&self, x: f64, v: f64) -> f64 {
        let e = v * v + 2.0 * self.eq.phi_at(x);
        if v > 0.0 && e > 0.0 {
            let w = e.sqrt();
            self.eq.well.profile.derivative(w) / w
        } else {
            0.0
        }
    }

    pub fn dv_f(&self, x: f64, v: f64) -> f64 {
        v * self.g(x, v)
    }

    /// ‖∂_v f∞‖ on D⁺_r, which equals ∫_r^∞|μ'| (r = 0 gives all of Q).
    pub fn l1_dplus(&self, r: f64) -> Result<f64> {
        self.eq.well.profile.derivative_l1_above(r)
    }
}

/// h and U at one time.
#[derive(Debug, Clone)]
pub struct PerturbationState {
    pub t: f64,
    pub grid: PhaseGrid,
    pub h: Vec<f64>,
    pub u: PotentialField,
    pub rho: SourceDensity,
}

impl PerturbationState {
    pub fn h_at(&self, i: usize, j: usize) -> f64 {
        self.h[self.grid.index(i, j)]
    }

    pub fn write_h_csv<W: Write>(&self, out: W) -> std::io::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["x", "v", "h"])?;
        for i in 0..=self.grid.nx {
            for j in 0..=self.grid.nv {
                w.serialize((self.grid.x(i), self.grid.v(j), self.h_at(i, j)))?;
            }
        }
        w.flush()
    }

    pub fn write_u_csv<W: Write>(&self, out: W) -> std::io::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["x", "U", "dxU", "rho"])?;
        for i in 0..self.u.x.len() {
            w.serialize((
                self.u.x[i],
                self.u.values[i],
                self.u.first_derivative[i],
                self.rho.values()[i],
            ))?;
        }
        w.flush()
    }
}

fn poisson(eq: &Equilibrium, mode: Mode, rho: &SourceDensity) -> Result<PotentialField> {
    match mode {
        Mode::Linear => solve_linear_poisson(eq, rho),
        Mode::Nonlinear => solve_nonlinear_poisson(eq, rho),
    }
}

/// Samples h₀ on the grid, checks resolution and admissibility, and solves
/// for U(0).
pub fn init_state(
    datum: &InitialDatum,
    eq: &Equilibrium,
    grid: &PhaseGrid,
    mode: Mode,
    r: f64,
) -> Result<(PerturbationState, Admissibility)> {
    if grid.nx != eq.cells() {
        return Err(invalid("grid", "x nodes must be the equilibrium nodes"));
    }
    for b in &datum.bumps {
        b.validate()?;
        if 2.0 * b.x_half_width < 4.0 * grid.hx() {
            return Err(Error::UnresolvedSupport { axis: "x" });
        }
        if 2.0 * b.v_half_width < 4.0 * grid.hv() {
            return Err(Error::UnresolvedSupport { axis: "v" });
        }
    }
    let mut h = vec![0.0; grid.nodes()];
    for i in 0..=grid.nx {
        for j in 0..=grid.nv {
            let (x, v) = (grid.x(i), grid.v(j));
            // Homogeneous incoming data: no fluctuation enters.
            if (i == 0 && v > 0.0) || (i == grid.nx && v < 0.0) {
                continue;
            }
            h[grid.index(i, j)] = datum.value(x, v);
        }
    }
    let masks = RegionMasks::new(eq, grid, r);
    let norms = masks.norms(&h, &PotentialField::zeros(grid.nx));
    let mut adm = Admissibility {
        l1: norms.l1_total,
        linf: h.iter().fold(0.0, |m, a| m.max(a.abs())),
        second_moment: 0.0,
        v2_linf: 0.0,
        support_in_dplus_r: true,
        warnings: Vec::new(),
    };
    let area = grid.hx() * grid.hv();
    for i in 0..=grid.nx {
        for j in 0..=grid.nv {
            let v = grid.v(j);
            let a = h[grid.index(i, j)].abs();
            let wt = if i == 0 || i == grid.nx { 0.5 } else { 1.0 } * if j == 0 || j == grid.nv { 0.5 } else { 1.0 };
            adm.second_moment += wt * area * v * v * a;
            adm.v2_linf = adm.v2_linf.max(v * v * a);
            if a > 0.0 && !eq.classify(grid.x(i), v, r).is_dplus() {
                adm.support_in_dplus_r = false;
            }
            if a > 0.0 && r > 0.0 && v * v + 2.0 * eq.phi_at(grid.x(i)) <= r * r {
                adm.support_in_dplus_r = false;
            }
        }
    }
    if !adm.support_in_dplus_r {
        adm.warnings.push(format!("initial support leaves D+_r for r = {r}"));
    }
    if datum.v_extent() > grid.v_max {
        adm.warnings
            .push("initial support exceeds the velocity truncation".into());
    }
    let rho = SourceDensity::new(grid.density(&h))?;
    let u = if datum.bumps.is_empty() {
        PotentialField::zeros(grid.nx)
    } else {
        poisson(eq, mode, &rho)?
    };
    Ok((
        PerturbationState {
            t: 0.0,
            grid: grid.clone(),
            h,
            u,
            rho,
        },
        adm,
    ))
}

/// Picard iteration settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PicardOptions {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for PicardOptions {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iter: 50,
        }
    }
}

/// Outcome of one step's fixed-point iteration.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepInfo {
    pub iterations: usize,
    /// ‖h^{k+1} − h^k‖₁ per iteration.
    pub increments: Vec<f64>,
    /// Largest ratio of successive increments (0 if fewer than two).
    pub max_ratio: f64,
}

fn trapezoid_l1(grid: &PhaseGrid, a: &[f64], b: &[f64]) -> f64 {
    let (nx, nv) = (grid.nx, grid.nv);
    let mut total = 0.0;
    for i in 0..=nx {
        let wi = if i == 0 || i == nx { 0.5 } else { 1.0 };
        for j in 0..=nv {
            let wj = if j == 0 || j == nv { 0.5 } else { 1.0 };
            let n = grid.index(i, j);
            total += wi * wj * (a[n] - b[n]).abs();
        }
    }
    total * grid.hx() * grid.hv()
}

/// Runs h = H(U), U ← P(h) until successive h differ by less than the
/// tolerance; returns (h, P(h)).
fn picard_solve<H>(
    eq: &Equilibrium,
    grid: &PhaseGrid,
    mode: Mode,
    u0: &PotentialField,
    opts: PicardOptions,
    mut apply: H,
) -> Result<(Vec<f64>, PotentialField, SourceDensity, StepInfo)>
where
    H: FnMut(&PotentialField) -> Result<Vec<f64>>,
{
    let mut u = u0.clone();
    let mut prev: Option<Vec<f64>> = None;
    let mut info = StepInfo {
        iterations: 0,
        increments: Vec::new(),
        max_ratio: 0.0,
    };
    let mut rising = 0;
    loop {
        let h = apply(&u)?;
        info.iterations += 1;
        let rho = SourceDensity::new(grid.density(&h))?;
        let next = poisson(eq, mode, &rho)?;
        if let Some(p) = &prev {
            let inc = trapezoid_l1(grid, &h, p);
            if let Some(&last) = info.increments.last() {
                if last > 0.0 {
                    let ratio: f64 = inc / last;
                    info.max_ratio = info.max_ratio.max(ratio);
                    rising = if ratio > 1.0 { rising + 1 } else { 0 };
                }
            }
            info.increments.push(inc);
            if inc <= opts.tol {
                return Ok((h, next, rho, info));
            }
            if rising >= 3 {
                return Err(Error::PicardDiverged {
                    increments: info.increments,
                });
            }
        }
        if info.iterations >= opts.max_iter {
            return Err(Error::NoConvergence {
                iterations: info.iterations,
                residual: info.increments.last().copied().unwrap_or(f64::NAN),
            });
        }
        prev = Some(h);
        u = next;
    }
}

#[derive(Debug, Clone, Copy)]
struct Foot {
    stencil: Option<[(usize, f64); 4]>,
}

#[derive(Debug, Clone, Copy)]
struct SourceArc {
    node: usize,
    /// τ·∂_v f∞ along the arc (per unit ∂xU).
    coef: f64,
    x_mid: f64,
    /// Weight of U(t + dt) in the midpoint time interpolation.
    theta: f64,
}

/// Linear stepper with the stationary back-traces precomputed for a fixed dt.
#[derive(Debug, Clone)]
pub struct LinearStepper {
    grid: PhaseGrid,
    dt: f64,
    feet: Vec<Foot>,
    sources: Vec<SourceArc>,
    picard: PicardOptions,
}

fn arc_source(kernel: &SourceKernel, x: f64, v: f64, arc: &BackArc, dt: f64, exact: bool) -> (f64, f64) {
    let (xm, vm) = arc.mid;
    let dvf = if exact {
        vm * kernel.g(x, v)
    } else {
        kernel.dv_f(xm, vm)
    };
    (arc.inside * dvf, 1.0 - 0.5 * arc.inside / dt)
}

impl LinearStepper {
    pub fn new(
        eq: &Equilibrium,
        grid: &PhaseGrid,
        dt: f64,
        tracer: Tracer,
        h_ode: f64,
        picard: PicardOptions,
    ) -> Result<Self> {
        if !(dt > 0.0) {
            return Err(invalid("dt", "must be positive"));
        }
        if grid.nx != eq.cells() {
            return Err(invalid("grid", "x nodes must be the equilibrium nodes"));
        }
        let field = FieldSource::stationary(eq).with_step(h_ode);
        let exact = tracer == Tracer::Exact && eq.potential.strictly_decreasing();
        let pot = &eq.potential;
        let acc = |_t: f64, xx: f64| Ok(-pot.slope(xx));
        let kernel = SourceKernel::new(eq);
        let traced: Vec<(Foot, Option<SourceArc>)> = (0..grid.nodes())
            .into_par_iter()
            .map(|n| -> Result<(Foot, Option<SourceArc>)> {
                let (i, j) = (n / (grid.nv + 1), n % (grid.nv + 1));
                let (x, v) = (grid.x(i), grid.v(j));
                let arc = if exact {
                    stationary_back_arc(&field, x, v, dt)?
                } else {
                    verlet_back_arc(&acc, 0.0, x, v, dt, h_ode)?
                };
                let foot = Foot {
                    stencil: arc.foot.and_then(|(xf, vf)| grid.stencil(xf, vf)),
                };
                let (coef, theta) = arc_source(&kernel, x, v, &arc, dt, exact);
                let src = (coef != 0.0).then_some(SourceArc {
                    node: n,
                    coef,
                    x_mid: arc.mid.0,
                    theta,
                });
                Ok((foot, src))
            })
            .collect::<Result<_>>()?;
        let (feet, sources): (Vec<Foot>, Vec<Option<SourceArc>>) = traced.into_iter().unzip();
        Ok(Self {
            grid: grid.clone(),
            dt,
            feet,
            sources: sources.into_iter().flatten().collect(),
            picard,
        })
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    /// Advances (h, U) from t to t + dt.
    pub fn step(&self, eq: &Equilibrium, state: &PerturbationState) -> Result<(PerturbationState, StepInfo)> {
        let transport: Vec<f64> = self
            .feet
            .par_iter()
            .map(|f| match f.stencil {
                Some(st) => st.iter().map(|&(k, w)| w * state.h[k]).sum(),
                None => 0.0,
            })
            .collect();
        let u_old = &state.u;
        let apply = |u_new: &PotentialField| -> Result<Vec<f64>> {
            let mut h = transport.clone();
            for s in &self.sources {
                let du = (1.0 - s.theta) * u_old.dx_at(s.x_mid) + s.theta * u_new.dx_at(s.x_mid);
                h[s.node] += s.coef * du;
            }
            Ok(h)
        };
        let (h, u, rho, info) = picard_solve(eq, &self.grid, Mode::Linear, u_old, self.picard, apply)?;
        Ok((
            PerturbationState {
                t: state.t + self.dt,
                grid: self.grid.clone(),
                h,
                u,
                rho,
            },
            info,
        ))
    }
}

/// One linear step from scratch (builds the trace table each call).
pub fn step_linear(
    eq: &Equilibrium,
    state: &PerturbationState,
    dt: f64,
    picard: PicardOptions,
) -> Result<(PerturbationState, StepInfo)> {
    LinearStepper::new(eq, &state.grid, dt, Tracer::Exact, default_ode_step(eq.lambda), picard)?.step(eq, state)
}

/// One nonlinear step: characteristics of φ∞ + U with U linear in time
/// between U(t) and the current Picard iterate of U(t + dt).
pub fn step_nonlinear(
    eq: &Equilibrium,
    state: &PerturbationState,
    dt: f64,
    h_ode: f64,
    picard: PicardOptions,
) -> Result<(PerturbationState, StepInfo)> {
    let grid = &state.grid;
    let kernel = SourceKernel::new(eq);
    let pot = &eq.potential;
    let u_old = &state.u;
    let t0 = state.t;
    let apply = |u_new: &PotentialField| -> Result<Vec<f64>> {
        let du = |s: f64, x: f64| {
            let w = ((s - t0) / dt).clamp(0.0, 1.0);
            (1.0 - w) * u_old.dx_at(x) + w * u_new.dx_at(x)
        };
        let acc = |s: f64, x: f64| Ok(-pot.slope(x) - du(s, x));
        (0..grid.nodes())
            .into_par_iter()
            .map(|n| -> Result<f64> {
                let (i, j) = (n / (grid.nv + 1), n % (grid.nv + 1));
                let (x, v) = (grid.x(i), grid.v(j));
                let arc = verlet_back_arc(&acc, t0 + dt, x, v, dt, h_ode)?;
                let carried = match arc.foot.and_then(|(xf, vf)| grid.stencil(xf, vf)) {
                    Some(st) => st.iter().map(|&(k, w)| w * state.h[k]).sum(),
                    None => 0.0,
                };
                let (xm, vm) = arc.mid;
                let source = if arc.inside > 0.0 {
                    arc.inside * du(t0 + dt - 0.5 * arc.inside, xm) * kernel.dv_f(xm, vm)
                } else {
                    0.0
                };
                Ok(carried + source)
            })
            .collect()
    };
    let (h, u, rho, info) = picard_solve(eq, grid, Mode::Nonlinear, u_old, picard, apply)?;
    Ok((
        PerturbationState {
            t: t0 + dt,
            grid: grid.clone(),
            h,
            u,
            rho,
        },
        info,
    ))
}

/// Cell masks by the classification of each cell centre.
#[derive(Debug, Clone)]
pub struct RegionMasks {
    grid: PhaseGrid,
    dplus_r: Vec<bool>,
    dplus_r2: Vec<bool>,
    complement: Vec<bool>,
    edge: Vec<bool>,
    r: f64,
    energy: Vec<f64>,
}

/// Region norms at one time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Norms {
    pub l1_total: f64,
    pub l1_dplus_r: f64,
    pub l1_dplus_r2: f64,
    pub l1_complement: f64,
    pub l1_edge: f64,
    pub linf_dxu: f64,
}

/// Bounding box of the numerical support of h.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SupportBox {
    pub x_min: f64,
    pub x_max: f64,
    pub v_min: f64,
    pub v_max: f64,
    /// Smallest v² + 2φ∞(x) over support nodes.
    pub min_energy: f64,
    /// Every support node has v > 0 and energy above (r/2)².
    pub in_dplus_r2: bool,
}

impl RegionMasks {
    pub fn new(eq: &Equilibrium, grid: &PhaseGrid, r: f64) -> Self {
        let (nx, nv) = (grid.nx, grid.nv);
        let cells = nx * nv;
        let mut m = Self {
            grid: grid.clone(),
            dplus_r: vec![false; cells],
            dplus_r2: vec![false; cells],
            complement: vec![false; cells],
            edge: vec![false; cells],
            r,
            energy: (0..grid.nodes())
                .map(|n| {
                    let (i, j) = (n / (nv + 1), n % (nv + 1));
                    let v = grid.v(j);
                    v * v + 2.0 * eq.phi_at(grid.x(i))
                })
                .collect(),
        };
        for i in 0..nx {
            let xc = (i as f64 + 0.5) * grid.hx();
            let phi = eq.phi_at(xc);
            for j in 0..nv {
                let vc = grid.v(j) + 0.5 * grid.hv();
                let e = vc * vc + 2.0 * phi;
                let c = i * nv + j;
                let dplus = vc > 0.0 && e > 0.0;
                m.dplus_r[c] = dplus && e > r * r;
                m.dplus_r2[c] = dplus && e > 0.25 * r * r;
                m.complement[c] = !dplus;
                m.edge[c] = j == 0 || j + 1 == nv;
            }
        }
        m
    }

    pub fn norms(&self, h: &[f64], u: &PotentialField) -> Norms {
        let g = &self.grid;
        let (nx, nv) = (g.nx, g.nv);
        let area = g.hx() * g.hv();
        let mut n = Norms {
            l1_total: 0.0,
            l1_dplus_r: 0.0,
            l1_dplus_r2: 0.0,
            l1_complement: 0.0,
            l1_edge: 0.0,
            linf_dxu: u.dx_linf(),
        };
        for i in 0..nx {
            for j in 0..nv {
                let c = i * nv + j;
                let mass = 0.25
                    * area
                    * (h[g.index(i, j)].abs()
                        + h[g.index(i, j + 1)].abs()
                        + h[g.index(i + 1, j)].abs()
                        + h[g.index(i + 1, j + 1)].abs());
                n.l1_total += mass;
                if self.dplus_r[c] {
                    n.l1_dplus_r += mass;
                }
                if self.dplus_r2[c] {
                    n.l1_dplus_r2 += mass;
                }
                if self.complement[c] {
                    n.l1_complement += mass;
                }
                if self.edge[c] {
                    n.l1_edge += mass;
                }
            }
        }
        n
    }

    pub fn support(&self, h: &[f64]) -> Option<SupportBox> {
        let peak = h.iter().fold(0.0, |m: f64, a| m.max(a.abs()));
        if peak == 0.0 {
            return None;
        }
        let g = &self.grid;
        let cut = SUPPORT_REL_TOL * peak;
        let mut b = SupportBox {
            x_min: f64::INFINITY,
            x_max: f64::NEG_INFINITY,
            v_min: f64::INFINITY,
            v_max: f64::NEG_INFINITY,
            min_energy: f64::INFINITY,
            in_dplus_r2: true,
        };
        for i in 0..=g.nx {
            for j in 0..=g.nv {
                let n = g.index(i, j);
                if h[n].abs() <= cut {
                    continue;
                }
                let (x, v) = (g.x(i), g.v(j));
                b.x_min = b.x_min.min(x);
                b.x_max = b.x_max.max(x);
                b.v_min = b.v_min.min(v);
                b.v_max = b.v_max.max(v);
                b.min_energy = b.min_energy.min(self.energy[n]);
                if !(v > 0.0 && self.energy[n] > 0.25 * self.r * self.r) {
                    b.in_dplus_r2 = false;
                }
            }
        }
        Some(b)
    }
}

/// Evolution settings; `None` fields take the documented defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvolutionConfig {
    pub mode: Mode,
    /// Margin r of the monitored region D⁺_r.
    pub r: f64,
    pub horizon: f64,
    #[serde(default)]
    pub dt: Option<f64>,
    #[serde(default)]
    pub h_ode: Option<f64>,
    #[serde(default)]
    pub v_max: Option<f64>,
    #[serde(default)]
    pub nv: Option<usize>,
    #[serde(default)]
    pub tracer: Option<Tracer>,
    #[serde(default)]
    pub picard_tol: Option<f64>,
    #[serde(default)]
    pub picard_max: Option<usize>,
    #[serde(default)]
    pub snapshot_times: Vec<f64>,
}

/// Fully resolved numerics of a run (what the manifest records).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResolvedNumerics {
    pub mode: Mode,
    pub r: f64,
    pub horizon: f64,
    pub dt: f64,
    pub steps: usize,
    pub h_ode: f64,
    pub v_max: f64,
    pub nx: usize,
    pub nv: usize,
    pub tracer: Tracer,
    pub picard_tol: f64,
    pub picard_max: usize,
}

/// Velocity spacing used when nv is not given.
pub const DEFAULT_HV: f64 = 0.05;

impl EvolutionConfig {
    pub fn resolve(&self, eq: &Equilibrium, datum: &InitialDatum) -> Result<ResolvedNumerics> {
        if !(self.r >= 0.0) || !(self.horizon >= 0.0) {
            return Err(invalid("r", "margin and horizon must be nonnegative"));
        }
        let h_ode = self.h_ode.unwrap_or_else(|| default_ode_step(eq.lambda));
        let t_r = if self.r > 0.0 {
            linear_exit_bound(self.r)
        } else {
            (-2.0 * eq.phi_b).sqrt() / eq.potential.slope_at_zero().abs()
        };
        let dt = self.dt.unwrap_or_else(|| (10.0 * h_ode).min(t_r / 50.0));
        if !(dt > 0.0) || !(h_ode > 0.0) {
            return Err(invalid("dt", "time steps must be positive"));
        }
        let r_hi = eq.well.profile.support().map_or(0.0, |(_, hi)| hi);
        let v_max = self
            .v_max
            .unwrap_or_else(|| (r_hi + 3.0 * (2.0 * eq.phi_b.abs()).sqrt()).max(datum.v_extent() + 1.0));
        let nv = self.nv.unwrap_or_else(|| (2.0 * v_max / DEFAULT_HV).ceil() as usize);
        let steps = (self.horizon / dt).round() as usize;
        let default_tracer = match self.mode {
            Mode::Linear => Tracer::Exact,
            Mode::Nonlinear => Tracer::Verlet,
        };
        Ok(ResolvedNumerics {
            mode: self.mode,
            r: self.r,
            horizon: self.horizon,
            dt,
            steps,
            h_ode,
            v_max,
            nx: eq.cells(),
            nv,
            tracer: self.tracer.unwrap_or(default_tracer),
            picard_tol: self.picard_tol.unwrap_or(1e-10),
            picard_max: self.picard_max.unwrap_or(50),
        })
    }
}

/// One recorded time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TraceRow {
    pub t: f64,
    pub norms: Norms,
    pub support: Option<SupportBox>,
    pub picard_iters: usize,
    pub picard_ratio: f64,
}

/// Recorded norms of a run plus the constants needed to judge them.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunTrace {
    pub numerics: ResolvedNumerics,
    pub lambda: f64,
    pub admissibility: Admissibility,
    /// ‖∂_v f∞‖ on Q, D⁺_r and D⁺_{r/2}.
    pub dvf_l1_q: f64,
    pub dvf_l1_r: f64,
    pub dvf_l1_r2: f64,
    /// Uniform exit bound on D⁺, √(−2φ_b)/|∂xφ∞(0)|.
    pub exit_bound: f64,
    pub rows: Vec<TraceRow>,
}

impl RunTrace {
    pub fn times(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.t).collect()
    }

    /// Writes the trace table (exactly the documented columns).
    pub fn write_trace_csv<W: Write>(&self, out: W) -> std::io::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "t",
            "l1_total",
            "l1_dplus_r",
            "l1_dplus_r2",
            "l1_complement",
            "linf_dxU",
            "picard_iters",
        ])?;
        for r in &self.rows {
            let n = &r.norms;
            w.serialize((
                r.t,
                n.l1_total,
                n.l1_dplus_r,
                n.l1_dplus_r2,
                n.l1_complement,
                n.linf_dxu,
                r.picard_iters,
            ))?;
        }
        w.flush()
    }

    /// Support bounding boxes per recorded time.
    pub fn write_support_csv<W: Write>(&self, out: W) -> std::io::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["t", "x_min", "x_max", "v_min", "v_max", "min_energy", "in_dplus_r2"])?;
        for r in &self.rows {
            match r.support {
                Some(b) => w.serialize((r.t, b.x_min, b.x_max, b.v_min, b.v_max, b.min_energy, b.in_dplus_r2))?,
                None => w.serialize((r.t, "", "", "", "", "", true))?,
            }
        }
        w.flush()
    }

    /// Checks ‖h(t)‖₁ ≤ ‖h₀‖₁e^{at} and ‖∂xU(t)‖∞ ≤ (2/λ²)‖h₀‖₁e^{at},
    /// a = 2‖∂_v f∞‖_{L¹(Q)}/λ², at every row. Returns the worst ratios.
    pub fn growth_bounds(&self) -> GrowthCheck {
        let l2 = self.lambda * self.lambda;
        let a = 2.0 * self.dvf_l1_q / l2;
        let h0 = self.rows.first().map_or(0.0, |r| r.norms.l1_total);
        let mut check = GrowthCheck {
            rate: a,
            worst_h_ratio: 0.0,
            worst_u_ratio: 0.0,
            pass: true,
        };
        for r in &self.rows {
            let env = h0 * (a * r.t).exp();
            let hr = ratio(r.norms.l1_total, env);
            let ur = ratio(r.norms.linf_dxu, 2.0 / l2 * env);
            check.worst_h_ratio = check.worst_h_ratio.max(hr);
            check.worst_u_ratio = check.worst_u_ratio.max(ur);
        }
        check.pass = check.worst_h_ratio <= 1.0 + 1e-9 && check.worst_u_ratio <= 1.0 + 1e-9;
        check
    }
}

fn ratio(value: f64, bound: f64) -> f64 {
    if value == 0.0 {
        0.0
    } else if bound == 0.0 {
        f64::INFINITY
    } else {
        value / bound
    }
}

/// A priori growth verdict.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GrowthCheck {
    pub rate: f64,
    pub worst_h_ratio: f64,
    pub worst_u_ratio: f64,
    pub pass: bool,
}

/// A run that may have stopped early; the trace up to the failure is kept.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub trace: RunTrace,
    pub error: Option<Error>,
}

/// Evolves h₀ to the horizon, calling `on_snapshot` at the configured times
/// (and at t = 0 if listed).
pub fn run<F>(
    eq: &Equilibrium,
    datum: &InitialDatum,
    config: &EvolutionConfig,
    mut on_snapshot: F,
) -> Result<RunOutcome>
where
    F: FnMut(&PerturbationState) -> std::io::Result<()>,
{
    let num = config.resolve(eq, datum)?;
    let grid = PhaseGrid::new(num.nx, num.nv, num.v_max)?;
    let (mut state, admissibility) = init_state(datum, eq, &grid, num.mode, num.r)?;
    let masks = RegionMasks::new(eq, &grid, num.r);
    let kernel = SourceKernel::new(eq);
    let picard = PicardOptions {
        tol: num.picard_tol,
        max_iter: num.picard_max,
    };
    let mut trace = RunTrace {
        numerics: num.clone(),
        lambda: eq.lambda,
        admissibility,
        dvf_l1_q: kernel.l1_dplus(0.0)?,
        dvf_l1_r: kernel.l1_dplus(num.r)?,
        dvf_l1_r2: kernel.l1_dplus(0.5 * num.r)?,
        exit_bound: (-2.0 * eq.phi_b).sqrt() / eq.potential.slope_at_zero().abs(),
        rows: Vec::with_capacity(num.steps + 1),
    };
    let record = |state: &PerturbationState, info: Option<&StepInfo>| TraceRow {
        t: state.t,
        norms: masks.norms(&state.h, &state.u),
        support: masks.support(&state.h),
        picard_iters: info.map_or(0, |i| i.iterations),
        picard_ratio: info.map_or(0.0, |i| i.max_ratio),
    };
    let wants = |t: f64| config.snapshot_times.iter().any(|&s| (s - t).abs() < 0.5 * num.dt);
    trace.rows.push(record(&state, None));
    let io_err = |e: std::io::Error| invalid("snapshot", e.to_string());
    if wants(0.0) {
        on_snapshot(&state).map_err(io_err)?;
    }
    let stepper = match num.mode {
        Mode::Linear => Some(LinearStepper::new(eq, &grid, num.dt, num.tracer, num.h_ode, picard)?),
        Mode::Nonlinear => None,
    };
    let h0_l1 = trace.rows[0].norms.l1_total;
    for k in 1..=num.steps {
        let result = match &stepper {
            Some(s) => s.step(eq, &state),
            None => step_nonlinear(eq, &state, num.dt, num.h_ode, picard),
        };
        let (mut next, info) = match result {
            Ok(v) => v,
            Err(e) => return Ok(RunOutcome { trace, error: Some(e) }),
        };
        // Pin the clock to the grid of step multiples.
        next.t = k as f64 * num.dt;
        state = next;
        let row = record(&state, Some(&info));
        let edge = row.norms.l1_edge;
        trace.rows.push(row);
        if edge > EDGE_REL_TOL * h0_l1.max(row.norms.l1_total) && edge > 0.0 {
            return Ok(RunOutcome {
                trace,
                error: Some(Error::EdgeMass { value: edge }),
            });
        }
        if wants(state.t) {
            on_snapshot(&state).map_err(io_err)?;
        }
    }
    Ok(RunOutcome { trace, error: None })
}
