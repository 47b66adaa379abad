//! Characteristic curves of the Vlasov equation: flows, exit records, the
//! explicit exit-time integrals and the exit geometric conditions.
//!
//! Stationary fields are traced exactly. The equilibrium potential is
//! piecewise quadratic, so on each segment the force is affine and the
//! motion is a closed-form hyperbolic or trigonometric orbit; knot crossings
//! use energy conservation for the new velocity. Time-dependent fields use
//! velocity-Verlet with cubic Hermite dense output for event location.

use std::io::Write;
use std::sync::{Arc, OnceLock};

use rayon::prelude::*;
use serde::Serialize;

use crate::elliptic::PotentialField;
use crate::equilibrium::{Equilibrium, PhaseRegion, Side, StationaryPotential, SEPARATRIX_TOL};
use crate::error::{invalid, Error, Result};
use crate::quadrature::{integrate, GaussJacobi, QuadTol};
use crate::roots::safe_newton;

/// Speed below which a boundary crossing counts as tangential to Σ⁰.
pub const GRAZING_TOL: f64 = 1e-8;
/// Time resolution of event location on dense output.
pub const EVENT_TOL: f64 = 1e-12;
/// Default forward horizon for stationary fields.
pub const DEFAULT_HORIZON: f64 = 1e3;

const MAX_SEGMENT_VISITS: usize = 10_000_000;

/// Verlet step min(1e−3, λ/10).
pub fn default_ode_step(lambda: f64) -> f64 {
    (0.1 * lambda).min(1e-3)
}

/// Exit time bound T_r = 1/r of the stationary field on D⁺_r.
pub fn linear_exit_bound(r: f64) -> f64 {
    1.0 / r
}

/// T̃_r = 2T_r, the exit time granted to perturbed fields.
pub fn perturbed_exit_bound(r: f64) -> f64 {
    2.0 / r
}

/// Snapshots of a perturbation potential U at uniformly spaced times.
#[derive(Debug, Clone, Default)]
pub struct PotentialHistory {
    t0: f64,
    dt: f64,
    snapshots: Vec<PotentialField>,
}

impl PotentialHistory {
    pub fn new(t0: f64, dt: f64) -> Result<Self> {
        if !(dt > 0.0) || !t0.is_finite() {
            return Err(invalid("dt", "snapshot spacing must be positive"));
        }
        Ok(Self {
            t0,
            dt,
            snapshots: Vec::new(),
        })
    }

    /// The same field at every time of [t0, t1].
    pub fn constant(field: PotentialField, t0: f64, t1: f64, dt: f64) -> Result<Self> {
        let mut h = Self::new(t0, dt)?;
        let n = ((t1 - t0) / dt).ceil().max(1.0) as usize;
        for _ in 0..=n {
            h.push(field.clone());
        }
        Ok(h)
    }

    pub fn push(&mut self, field: PotentialField) {
        self.snapshots.push(field);
    }

    /// Replaces the newest snapshot (used while iterating on a time step).
    pub fn replace_last(&mut self, field: PotentialField) {
        if let Some(last) = self.snapshots.last_mut() {
            *last = field;
        }
    }

    pub fn len(&self) -> usize {
        self.snapshots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.snapshots.is_empty()
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn start(&self) -> f64 {
        self.t0
    }

    pub fn end(&self) -> f64 {
        self.t0 + self.dt * self.snapshots.len().saturating_sub(1) as f64
    }

    pub fn snapshot(&self, i: usize) -> Option<&PotentialField> {
        self.snapshots.get(i)
    }

    pub fn snapshots(&self) -> &[PotentialField] {
        &self.snapshots
    }

    fn gap(&self, t: f64) -> Error {
        Error::HistoryGap {
            t,
            start: self.t0,
            end: self.end(),
        }
    }

    /// Bracketing snapshot index and interpolation weight for time `t`.
    fn bracket(&self, t: f64) -> Result<(usize, f64)> {
        if self.snapshots.is_empty() {
            return Err(self.gap(t));
        }
        let slack = 1e-9 * self.dt;
        if t < self.t0 - slack || t > self.end() + slack {
            return Err(self.gap(t));
        }
        let n = self.snapshots.len() - 1;
        if n == 0 {
            return Ok((0, 0.0));
        }
        let s = ((t - self.t0) / self.dt).clamp(0.0, n as f64);
        let i = (s.floor() as usize).min(n - 1);
        Ok((i, s - i as f64))
    }

    /// ∂xU(t, x), linear in time between snapshots.
    pub fn dx_at(&self, t: f64, x: f64) -> Result<f64> {
        let (i, w) = self.bracket(t)?;
        let a = self.snapshots[i].dx_at(x);
        if w == 0.0 {
            return Ok(a);
        }
        Ok((1.0 - w) * a + w * self.snapshots[i + 1].dx_at(x))
    }

    /// ‖∂xU(t)‖∞ interpolated linearly in time.
    pub fn dx_linf_at(&self, t: f64) -> Result<f64> {
        let (i, w) = self.bracket(t)?;
        let a = self.snapshots[i].dx_linf();
        if w == 0.0 {
            return Ok(a);
        }
        Ok((1.0 - w) * a + w * self.snapshots[i + 1].dx_linf())
    }

    /// ∫_{t0}^{t1} ‖∂xU‖∞²/2 by the trapezoid rule on the snapshot grid.
    pub fn kinetic_forcing(&self, t0: f64, t1: f64) -> Result<f64> {
        self.bracket(t0)?;
        self.bracket(t1)?;
        let n = ((t1 - t0) / self.dt).ceil().max(1.0) as usize;
        let h = (t1 - t0) / n as f64;
        let mut total = 0.0;
        let mut prev = self.dx_linf_at(t0)?.powi(2);
        for k in 1..=n {
            let cur = self.dx_linf_at(t0 + h * k as f64)?.powi(2);
            total += 0.25 * h * (prev + cur);
            prev = cur;
        }
        Ok(total)
    }
}

#[derive(Debug, Clone)]
enum FieldKind {
    Stationary,
    Dynamic(Arc<PotentialHistory>),
}

/// The potential driving the characteristics: φ∞ alone or φ∞ + U(t).
#[derive(Debug, Clone)]
pub struct FieldSource {
    potential: Arc<StationaryPotential>,
    kind: FieldKind,
    h_ode: f64,
    horizon: f64,
}

impl FieldSource {
    pub fn stationary(eq: &Equilibrium) -> Self {
        Self::from_potential(eq.potential.clone(), default_ode_step(eq.lambda))
    }

    pub fn from_potential(potential: StationaryPotential, h_ode: f64) -> Self {
        Self {
            potential: Arc::new(potential),
            kind: FieldKind::Stationary,
            h_ode,
            horizon: DEFAULT_HORIZON,
        }
    }

    pub fn dynamic(eq: &Equilibrium, history: Arc<PotentialHistory>) -> Self {
        Self::stationary(eq).with_history(history)
    }

    pub fn with_history(mut self, history: Arc<PotentialHistory>) -> Self {
        self.horizon = f64::INFINITY;
        self.kind = FieldKind::Dynamic(history);
        self
    }

    pub fn with_horizon(mut self, horizon: f64) -> Self {
        self.horizon = horizon;
        self
    }

    pub fn with_step(mut self, h_ode: f64) -> Self {
        self.h_ode = h_ode;
        self
    }

    pub fn potential(&self) -> &StationaryPotential {
        &self.potential
    }

    pub fn history(&self) -> Option<&PotentialHistory> {
        match &self.kind {
            FieldKind::Dynamic(h) => Some(h),
            FieldKind::Stationary => None,
        }
    }

    pub fn h_ode(&self) -> f64 {
        self.h_ode
    }

    pub fn is_stationary(&self) -> bool {
        matches!(self.kind, FieldKind::Stationary)
    }

    /// Stationary and strictly decreasing: the exact segment flow applies.
    fn exact(&self) -> bool {
        self.is_stationary() && self.potential.strictly_decreasing()
    }

    /// Force −∂xφ(t, x); both parts extend affinely outside [0, 1].
    pub fn acceleration(&self, t: f64, x: f64) -> Result<f64> {
        let base = -self.potential.slope(x);
        match &self.kind {
            FieldKind::Stationary => Ok(base),
            FieldKind::Dynamic(h) => Ok(base - h.dx_at(t, x)?),
        }
    }
}

// ---------------------------------------------------------------------------
// Exact flow on one quadratic segment.

/// (C, S, D) with C = cosh(√k t), S = sinh(√k t)/√k, D = (C − 1)/k,
/// continued analytically to k ≤ 0.
fn stumpff(k: f64, t: f64) -> (f64, f64, f64) {
    if (k * t * t).abs() < 1e-2 {
        stumpff_series(k, t)
    } else {
        stumpff_closed(k, t)
    }
}

fn stumpff_series(k: f64, t: f64) -> (f64, f64, f64) {
    let z = k * t * t;
    let c = 1.0 + z / 2.0 * (1.0 + z / 12.0 * (1.0 + z / 30.0 * (1.0 + z / 56.0)));
    let s = t * (1.0 + z / 6.0 * (1.0 + z / 20.0 * (1.0 + z / 42.0 * (1.0 + z / 72.0))));
    let d = t * t * (0.5 + z / 24.0 * (1.0 + z / 30.0 * (1.0 + z / 56.0 * (1.0 + z / 90.0))));
    (c, s, d)
}

fn stumpff_closed(k: f64, t: f64) -> (f64, f64, f64) {
    if k > 0.0 {
        let q = k.sqrt();
        let w = q * t;
        let half = (0.5 * w).sinh();
        (w.cosh(), w.sinh() / q, 2.0 * half * half / k)
    } else {
        let q = (-k).sqrt();
        let w = q * t;
        let half = (0.5 * w).sin();
        (w.cos(), w.sin() / q, 2.0 * half * half / -k)
    }
}

/// Time to travel a distance `len` ≥ 0 to the right, starting with speed
/// `vs` ≥ 0 and acceleration `acc` + k·(ξ − start), which is positive on the
/// path. Displacement vs·S + acc·D is convex and increasing, so Newton from
/// an upper bound converges monotonically.
fn forward_time(acc: f64, k: f64, vs: f64, len: f64) -> f64 {
    if len <= 0.0 {
        return 0.0;
    }
    let a_min = acc.min(acc + k * len);
    let mut t_hi = f64::INFINITY;
    if vs > 0.0 {
        t_hi = len / vs;
    }
    if a_min > 0.0 {
        t_hi = t_hi.min((2.0 * len / a_min).sqrt());
    }
    if !t_hi.is_finite() {
        return f64::INFINITY;
    }
    let g = |t: f64| {
        let (c, s, d) = stumpff(k, t);
        (vs * s + acc * d - len, vs * c + acc * s)
    };
    let mut t = t_hi;
    for _ in 0..100 {
        let (f, df) = g(t);
        if f <= 0.0 || df <= 0.0 {
            break;
        }
        let next = t - f / df;
        if !(next < t) || next <= 0.0 {
            break;
        }
        if t - next <= 4.0 * f64::EPSILON * t {
            return next;
        }
        t = next;
    }
    // Monotone Newton stalled; settle it with the safeguarded solver.
    safe_newton(g, 0.0, t_hi, 4.0 * f64::EPSILON * t_hi)
}

#[derive(Debug, Clone, Copy)]
struct Hop {
    t: f64,
    x: f64,
    v: f64,
}

/// First arrival at an end of the segment from (x0, v0). The force is
/// positive on the segment (φ strictly decreasing).
fn segment_exit(seg: &crate::equilibrium::Segment, x0: f64, v0: f64) -> Hop {
    let acc = -seg.slope(x0);
    let k = -seg.c;
    if v0 >= 0.0 {
        if !seg.hi.is_finite() {
            return Hop {
                t: f64::INFINITY,
                x: f64::INFINITY,
                v: f64::INFINITY,
            };
        }
        let len = seg.hi - x0;
        let gain = len * (acc + 0.5 * k * len);
        return Hop {
            t: forward_time(acc, k, v0, len),
            x: seg.hi,
            v: (v0 * v0 + 2.0 * gain).max(0.0).sqrt(),
        };
    }
    if seg.lo.is_finite() {
        let len = x0 - seg.lo;
        // Squared speed on arrival at lo.
        let arrive = v0 * v0 - 2.0 * len * (acc - 0.5 * k * len);
        if arrive >= 0.0 {
            let speed = arrive.sqrt();
            return Hop {
                t: forward_time(acc - k * len, k, speed, len),
                x: seg.lo,
                v: -speed,
            };
        }
    }
    // Turns inside the segment: v0² − 2·acc·d + k·d² = 0, smallest root.
    let disc = (acc * acc - k * v0 * v0).max(0.0);
    let d = v0 * v0 / (acc + disc.sqrt());
    let x_turn = x0 - d;
    let a_turn = acc - k * d;
    let t_back = forward_time(a_turn, k, 0.0, d);
    if !seg.hi.is_finite() {
        return Hop {
            t: f64::INFINITY,
            x: f64::INFINITY,
            v: f64::INFINITY,
        };
    }
    let len = seg.hi - x_turn;
    let gain = len * (a_turn + 0.5 * k * len);
    Hop {
        t: t_back + forward_time(a_turn, k, 0.0, len),
        x: seg.hi,
        v: (2.0 * gain).max(0.0).sqrt(),
    }
}

fn propagate_in_segment(seg: &crate::equilibrium::Segment, x0: f64, v0: f64, tau: f64) -> (f64, f64) {
    let acc = -seg.slope(x0);
    let (c, s, d) = stumpff(-seg.c, tau);
    let x = (x0 + v0 * s + acc * d).clamp(seg.lo, seg.hi);
    (x, v0 * c + acc * s)
}

#[derive(Debug, Clone, Copy)]
struct WalkEnd {
    elapsed: f64,
    x: f64,
    v: f64,
    exited: bool,
}

fn leaving(x: f64, v: f64) -> bool {
    (x >= 1.0 && v >= 0.0) || (x <= 0.0 && v <= 0.0)
}

/// Forward exact flow for at most `max_time`; with `stop`, halts on the
/// first arrival at {0, 1} moving outward.
fn exact_walk(pot: &StationaryPotential, mut x: f64, mut v: f64, max_time: f64, stop: bool) -> Result<WalkEnd> {
    let mut elapsed = 0.0;
    for _ in 0..MAX_SEGMENT_VISITS {
        if stop && leaving(x, v) {
            return Ok(WalkEnd {
                elapsed,
                x,
                v,
                exited: true,
            });
        }
        let side = if v < 0.0 { Side::Left } else { Side::Right };
        let seg = pot.locate(x, side);
        let hop = segment_exit(&seg, x, v);
        if elapsed + hop.t >= max_time {
            let (xe, ve) = propagate_in_segment(&seg, x, v, max_time - elapsed);
            return Ok(WalkEnd {
                elapsed: max_time,
                x: xe,
                v: ve,
                exited: false,
            });
        }
        elapsed += hop.t;
        x = hop.x;
        v = hop.v;
    }
    Err(Error::HorizonExceeded { x, v, horizon: elapsed })
}

// ---------------------------------------------------------------------------
// Velocity-Verlet with dense output.

fn hermite(x0: f64, v0: f64, x1: f64, v1: f64, dt: f64, th: f64) -> (f64, f64) {
    let t2 = th * th;
    let t3 = t2 * th;
    let p = (2.0 * t3 - 3.0 * t2 + 1.0) * x0
        + (t3 - 2.0 * t2 + th) * dt * v0
        + (-2.0 * t3 + 3.0 * t2) * x1
        + (t3 - t2) * dt * v1;
    let dp = (6.0 * t2 - 6.0 * th) * x0
        + (3.0 * t2 - 4.0 * th + 1.0) * dt * v0
        + (-6.0 * t2 + 6.0 * th) * x1
        + (3.0 * t2 - 2.0 * th) * dt * v1;
    (p, dp / dt)
}

/// Result of a Verlet sweep towards a time limit.
#[derive(Debug, Clone, Copy)]
pub struct TraceEnd {
    /// Time reached: the crossing time, or the limit.
    pub t: f64,
    pub x: f64,
    pub v: f64,
    /// A crossing of {0, 1} was located before the limit.
    pub exited: bool,
    /// Smallest velocity met along the way (signed, in forward time).
    pub min_velocity: f64,
}

/// Velocity-Verlet from (t, x, v) towards `limit` (either direction) under
/// the force `acc(t, x)`. With `stop`, the first crossing of x ∈ {0, 1}
/// moving outward is located on the Hermite interpolant by bisection.
pub fn verlet_trace<F>(acc: &F, t: f64, x: f64, v: f64, limit: f64, h: f64, stop: bool) -> Result<TraceEnd>
where
    F: Fn(f64, f64) -> Result<f64>,
{
    let dir = if limit >= t { 1.0 } else { -1.0 };
    let mut end = TraceEnd {
        t,
        x,
        v,
        exited: false,
        min_velocity: v,
    };
    if stop && leaving(x, dir * v) {
        end.exited = true;
        return Ok(end);
    }
    let span = (limit - t).abs();
    if span == 0.0 {
        return Ok(end);
    }
    let n = (span / h).ceil().max(1.0) as usize;
    let dt = dir * span / n as f64;
    let (mut xc, mut vc) = (x, v);
    let mut ac = acc(t, xc)?;
    for step in 0..n {
        let t0 = t + dt * step as f64;
        let t1 = if step + 1 == n {
            limit
        } else {
            t + dt * (step + 1) as f64
        };
        let vh = vc + 0.5 * dt * ac;
        let xn = xc + dt * vh;
        let an = acc(t1, xn)?;
        let vn = vh + 0.5 * dt * an;
        end.min_velocity = end.min_velocity.min(vn);
        if stop && (xn <= 0.0 || xn >= 1.0) && xc > 0.0 && xc < 1.0 {
            let b = if xn <= 0.0 { 0.0 } else { 1.0 };
            let sign = xc - b;
            let (mut lo, mut hi) = (0.0_f64, 1.0_f64);
            let tol = EVENT_TOL / dt.abs();
            while hi - lo > tol {
                let mid = 0.5 * (lo + hi);
                let (p, _) = hermite(xc, vc, xn, vn, dt, mid);
                if (p - b) * sign > 0.0 {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            let (_, vb) = hermite(xc, vc, xn, vn, dt, hi);
            end.t = t0 + hi * dt;
            end.x = b;
            end.v = vb;
            end.exited = true;
            return Ok(end);
        }
        xc = xn;
        vc = vn;
        ac = an;
        end.t = t1;
    }
    end.x = xc;
    end.v = vc;
    Ok(end)
}

// ---------------------------------------------------------------------------
// Public flow operations.

/// State at time `s` of the characteristic through (x, v) at time `t`.
pub fn integrate_flow(field: &FieldSource, t: f64, x: f64, v: f64, s: f64) -> Result<(f64, f64)> {
    if s == t {
        return Ok((x, v));
    }
    if field.exact() {
        let tau = (s - t).abs();
        return if s > t {
            let w = exact_walk(&field.potential, x, v, tau, false)?;
            Ok((w.x, w.v))
        } else {
            // Backward flow is the reversal 𝓡 ∘ forward ∘ 𝓡.
            let w = exact_walk(&field.potential, x, -v, tau, false)?;
            Ok((w.x, -w.v))
        };
    }
    if let Some(h) = field.history() {
        let (lo, hi) = (s.min(t), s.max(t));
        if lo < h.start() - 1e-9 * h.dt() || hi > h.end() + 1e-9 * h.dt() {
            return Err(Error::HistoryGap {
                t: if lo < h.start() { lo } else { hi },
                start: h.start(),
                end: h.end(),
            });
        }
    }
    let acc = |tt: f64, xx: f64| field.acceleration(tt, xx);
    let end = verlet_trace(&acc, t, x, v, s, field.h_ode, false)?;
    Ok((end.x, end.v))
}

/// The piece of a characteristic traced back from (t, x, v) over one step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BackArc {
    /// State at t − dt, or None when the curve entered Q during the step.
    pub foot: Option<(f64, f64)>,
    /// Time spent inside Q during the step (dt unless it entered).
    pub inside: f64,
    /// State at the midpoint t − inside/2 of that stretch.
    pub mid: (f64, f64),
}

/// Backward arc of the stationary flow over [t − dt, t].
pub fn stationary_back_arc(field: &FieldSource, x: f64, v: f64, dt: f64) -> Result<BackArc> {
    if field.exact() {
        let pot = &field.potential;
        let w = exact_walk(pot, x, -v, dt, true)?;
        let (foot, inside) = if w.exited {
            (None, w.elapsed)
        } else {
            (Some((w.x, -w.v)), dt)
        };
        let m = exact_walk(pot, x, -v, 0.5 * inside, false)?;
        return Ok(BackArc {
            foot,
            inside,
            mid: (m.x, -m.v),
        });
    }
    let acc = |_t: f64, xx: f64| Ok(-field.potential.slope(xx));
    verlet_back_arc(&acc, 0.0, x, v, dt, field.h_ode)
}

/// Backward arc over [t − dt, t] under an arbitrary force, by Verlet.
pub fn verlet_back_arc<F>(acc: &F, t: f64, x: f64, v: f64, dt: f64, h: f64) -> Result<BackArc>
where
    F: Fn(f64, f64) -> Result<f64>,
{
    let end = verlet_trace(acc, t, x, v, t - dt, h, true)?;
    let (foot, inside) = if end.exited {
        (None, t - end.t)
    } else {
        (Some((end.x, end.v)), dt)
    };
    let mid = if inside > 0.0 {
        let m = verlet_trace(acc, t, x, v, t - 0.5 * inside, h, false)?;
        (m.x, m.v)
    } else {
        (x, v)
    };
    Ok(BackArc { foot, inside, mid })
}

/// Entry and exit data of the characteristic through (x, v) at time t.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ExitRecord {
    pub t_inc: f64,
    pub t_out: f64,
    pub x_inc: f64,
    pub v_inc: f64,
    pub x_out: f64,
    pub v_out: f64,
    /// A crossing speed fell below [`GRAZING_TOL`].
    pub grazing: bool,
    /// The backward search stopped at the start of the history instead of
    /// at the boundary; (x_inc, v_inc) is then the state at that time.
    pub inc_clamped: bool,
}

impl ExitRecord {
    /// Exit through the outgoing boundary {x = 0, v < 0} ∪ {x = 1, v > 0}.
    pub fn exits_outgoing(&self) -> bool {
        (self.x_out == 1.0 && self.v_out > 0.0) || (self.x_out == 0.0 && self.v_out < 0.0)
    }
}

/// Exit record with the field's configured horizon.
pub fn exit_record(field: &FieldSource, t: f64, x: f64, v: f64) -> Result<ExitRecord> {
    exit_record_within(field, t, x, v, field.horizon)
}

/// Exit record; fails if no forward exit happens within `horizon`.
pub fn exit_record_within(field: &FieldSource, t: f64, x: f64, v: f64, horizon: f64) -> Result<ExitRecord> {
    if !(0.0..=1.0).contains(&x) || !v.is_finite() {
        return Err(invalid("x", "exit records need a point of [0, 1] x R"));
    }
    let (fwd, bwd, clamped) = if field.exact() {
        let f = exact_walk(&field.potential, x, v, horizon, true)?;
        let b = exact_walk(&field.potential, x, -v, horizon, true)?;
        let fwd = TraceEnd {
            t: t + f.elapsed,
            x: f.x,
            v: f.v,
            exited: f.exited,
            min_velocity: f64::NAN,
        };
        let bwd = TraceEnd {
            t: t - b.elapsed,
            x: b.x,
            v: -b.v,
            exited: b.exited,
            min_velocity: f64::NAN,
        };
        (fwd, bwd, false)
    } else {
        let acc = |tt: f64, xx: f64| field.acceleration(tt, xx);
        let (fwd_limit, bwd_limit) = match field.history() {
            Some(h) => ((t + horizon).min(h.end()), h.start().max(0.0)),
            None => (t + horizon, t - horizon),
        };
        let f = verlet_trace(&acc, t, x, v, fwd_limit, field.h_ode, true)?;
        let b = verlet_trace(&acc, t, x, v, bwd_limit.min(t), field.h_ode, true)?;
        let clamped = !b.exited && field.history().is_some();
        (f, b, clamped)
    };
    if !fwd.exited {
        return Err(Error::HorizonExceeded {
            x,
            v,
            horizon: fwd.t - t,
        });
    }
    if !bwd.exited && !clamped {
        return Err(Error::HorizonExceeded {
            x,
            v: -v,
            horizon: t - bwd.t,
        });
    }
    let grazing = fwd.v.abs() < GRAZING_TOL || (!clamped && bwd.v.abs() < GRAZING_TOL);
    Ok(ExitRecord {
        t_inc: bwd.t,
        t_out: fwd.t,
        x_inc: bwd.x,
        v_inc: bwd.v,
        x_out: fwd.x,
        v_out: fwd.v,
        grazing,
        inc_clamped: clamped,
    })
}

// ---------------------------------------------------------------------------
// Explicit exit-time integrals.

fn turning_rule() -> &'static GaussJacobi {
    static RULE: OnceLock<GaussJacobi> = OnceLock::new();
    RULE.get_or_init(|| GaussJacobi::new(64, 0.0, -0.5))
}

/// ∫_a^b du/√K(u) with K(u) = E − 2φ(u) and K(a) = `k_a` ≥ 0 given.
///
/// K is carried from knot to knot as a sum of exact per-segment gains, so no
/// cancellation occurs near a turning point. When K(a) = 0 the first piece
/// is (u − a)^{−1/2}·smooth and uses Gauss–Jacobi; other pieces use
/// u = lo + τ², which keeps the integrand bounded.
fn travel_integral(pot: &StationaryPotential, a: f64, k_a: f64, b: f64) -> Result<f64> {
    let tol = QuadTol {
        abs: 1e-14,
        rel: 1e-12,
        max_panels: 4000,
    };
    let mut total = 0.0;
    let mut lo = a;
    let mut k_lo = k_a.max(0.0);
    while lo < b {
        let seg = pot.locate(lo, Side::Right);
        let hi = seg.hi.min(b);
        let acc = -seg.slope(lo);
        let k = -seg.c;
        let len = hi - lo;
        if len > 0.0 {
            total += if k_lo == 0.0 {
                let half = 0.5 * len;
                half.sqrt() * turning_rule().apply(|s| 1.0 / (2.0 * acc + k * half * (1.0 + s)).sqrt())
            } else {
                let kl = k_lo;
                integrate(
                    move |tau| {
                        let d = tau * tau;
                        2.0 * tau / (kl + d * (2.0 * acc + k * d)).sqrt()
                    },
                    0.0,
                    len.sqrt(),
                    tol,
                )?
            };
        }
        k_lo += len * (2.0 * acc + k * len);
        lo = hi;
    }
    Ok(total)
}

fn separatrix_guard(pot: &StationaryPotential, x: f64, v: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&x) || !v.is_finite() {
        return Err(invalid("x", "exit times need a point of [0, 1] x R"));
    }
    if !pot.strictly_decreasing() {
        return Err(invalid(
            "potential",
            "explicit exit times need a strictly decreasing potential",
        ));
    }
    let e = v * v + 2.0 * pot.value(x);
    if e.abs() <= SEPARATRIX_TOL {
        return Err(Error::SeparatrixPoint { x, v });
    }
    Ok(e)
}

/// (t_inc, t_out) of the stationary flow from the explicit integrals, for a
/// query at time 0.
pub fn exit_time_quadrature(pot: &StationaryPotential, x: f64, v: f64) -> Result<(f64, f64)> {
    let e = separatrix_guard(pot, x, v)?;
    let v2 = v * v;
    if e > 0.0 {
        let from_left = travel_integral(pot, 0.0, e, x)?;
        let to_right = travel_integral(pot, x, v2, 1.0)?;
        return Ok(if v > 0.0 {
            (-from_left, to_right)
        } else {
            (-to_right, from_left)
        });
    }
    let x0 = pot.inverse(0.5 * e);
    let round_trip = travel_integral(pot, x0, 0.0, x)? + travel_integral(pot, x0, 0.0, 1.0)?;
    let to_right = travel_integral(pot, x, v2, 1.0)?;
    Ok(if v > 0.0 {
        (-round_trip, to_right)
    } else {
        (-to_right, round_trip)
    })
}

/// Bounds on the exit times and their verification against the integrals.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ExitBounds {
    pub region: PhaseRegion,
    pub turning_point: Option<f64>,
    /// Bound on |t_inc|.
    pub t_minus: f64,
    /// Bound on t_out.
    pub t_plus: f64,
    /// √(−2φ_b)/|φ'(0)|, reported on D⁺.
    pub uniform: Option<f64>,
    pub t_inc: f64,
    pub t_out: f64,
    pub inc_ok: bool,
    pub out_ok: bool,
    pub uniform_ok: bool,
}

impl ExitBounds {
    pub fn passes(&self) -> bool {
        self.inc_ok && self.out_ok && self.uniform_ok
    }
}

/// Region-wise bounds on the exit times of the stationary flow.
pub fn exit_bounds(pot: &StationaryPotential, x: f64, v: f64) -> Result<ExitBounds> {
    let e = separatrix_guard(pot, x, v)?;
    let (t_inc, t_out) = exit_time_quadrature(pot, x, v)?;
    let region = pot.classify(x, v, 0.0);
    let phi_x = pot.value(x);
    let phi_b = pot.phi_b();
    let s0 = pot.slope_at_zero().abs();
    let root = |d: f64| (2.0 * d).max(0.0).sqrt();
    let (t_minus, t_plus, turning_point, uniform) = if e > 0.0 {
        let near = root(-phi_x) / s0;
        let far = (root(-phi_b) - root(-phi_x)) / s0;
        let uniform = root(-phi_b) / s0;
        if v > 0.0 {
            (near, far, None, Some(uniform))
        } else {
            (far, near, None, None)
        }
    } else {
        let x0 = pot.inverse(0.5 * e);
        let phi0 = pot.value(x0);
        let loop_bound = (root(phi0 - phi_x) + root(phi0 - phi_b)) / pot.slope(x0).abs();
        let direct = root(phi_x - phi_b) / pot.slope(x).abs();
        if v > 0.0 {
            (loop_bound, direct, Some(x0), None)
        } else {
            (direct, loop_bound, Some(x0), None)
        }
    };
    let slack = |b: f64| 1e-9 * (1.0 + b);
    let uniform_ok = uniform.is_none_or(|u| t_out <= u + slack(u) && -t_inc <= u + slack(u));
    Ok(ExitBounds {
        region,
        turning_point,
        t_minus,
        t_plus,
        uniform,
        t_inc,
        t_out,
        inc_ok: -t_inc <= t_minus + slack(t_minus),
        out_ok: t_out <= t_plus + slack(t_plus),
        uniform_ok,
    })
}

// ---------------------------------------------------------------------------
// Exit geometric conditions.

/// Van der Corput radical inverse in base `b`.
fn radical_inverse(mut i: u64, b: u64) -> f64 {
    let inv = 1.0 / b as f64;
    let mut f = inv;
    let mut r = 0.0;
    while i > 0 {
        r += f * (i % b) as f64;
        i /= b;
        f *= inv;
    }
    r
}

/// Halton point `i` in (0, 1)³ (bases 2, 3, 5), skipping the origin.
pub fn halton3(i: u64) -> [f64; 3] {
    [
        radical_inverse(i + 1, 2),
        radical_inverse(i + 1, 3),
        radical_inverse(i + 1, 5),
    ]
}

/// One sampled characteristic of an EGC check.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EgcSample {
    pub s: f64,
    pub x: f64,
    pub v: f64,
    pub exit_time: f64,
    pub outgoing: bool,
    pub min_velocity: f64,
}

/// Energy condition that keeps perturbed D⁺_r characteristics above r/2, evaluated at the worst s.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EnergyCondition {
    pub window: f64,
    /// sup_s ∫_s^{s+T̃} ‖∂xU‖∞²/2 + T̃‖φ∞‖∞.
    pub lhs: f64,
    /// r²(e^{−T̃} − 1/4).
    pub rhs: f64,
    pub holds: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EgcReport {
    pub r: f64,
    pub time_bound: f64,
    pub samples: usize,
    pub grazing_excluded: usize,
    pub sup_exit_time: f64,
    pub fraction_outgoing: f64,
    pub worst: Option<EgcSample>,
    /// Samples exceeding the bound or not exiting through Σ⁺ (first 32).
    pub failures: Vec<EgcSample>,
    pub failure_count: usize,
    /// Dynamic fields: smallest velocity met and its comparison with r/2.
    pub min_velocity: Option<f64>,
    pub velocity_ok: bool,
    pub condition: Option<EnergyCondition>,
    /// Traces that produced no exit record (for example a history gap).
    pub errors: usize,
    pub pass: bool,
}

enum Traced {
    Done(EgcSample),
    Grazing,
    Failed,
}

/// Samples (s, x, v) ∈ J × D⁺_r on a Halton sequence and checks that every
/// characteristic leaves Q through Σ⁺ within `time_bound`.
///
/// Velocities are drawn from (v_r(x), v_r(x) + max(r, 1)) with
/// v_r(x) = √(r² − 2φ∞(x)); exit times decrease with v, so the supremum
/// lives at the low edge, which the sample covers densely.
pub fn verify_egc(
    field: &FieldSource,
    r: f64,
    window: (f64, f64),
    time_bound: f64,
    samples: usize,
) -> Result<EgcReport> {
    if !(r > 0.0) || !(time_bound > 0.0) || window.1 < window.0 {
        return Err(invalid("r", "need r > 0, T > 0 and a nonempty window"));
    }
    let pot = field.potential();
    let width = r.max(1.0);
    let traced: Vec<Traced> = (0..samples as u64)
        .into_par_iter()
        .map(|i| {
            let [a, b, c] = halton3(i);
            let s = window.0 + a * (window.1 - window.0);
            let x = b;
            let v_r = (r * r - 2.0 * pot.value(x)).sqrt() * (1.0 + 1e-12);
            let v = v_r + c * width;
            let Ok(rec) = exit_record_within(field, s, x, v, 4.0 * time_bound.max(1.0)) else {
                return Traced::Failed;
            };
            if rec.grazing {
                return Traced::Grazing;
            }
            let min_velocity = if field.is_stationary() {
                f64::NAN
            } else {
                let acc = |tt: f64, xx: f64| field.acceleration(tt, xx);
                verlet_trace(&acc, s, x, v, rec.t_out, field.h_ode, false)
                    .map(|e| e.min_velocity)
                    .unwrap_or(f64::NAN)
            };
            Traced::Done(EgcSample {
                s,
                x,
                v,
                exit_time: rec.t_out - s,
                outgoing: rec.exits_outgoing(),
                min_velocity,
            })
        })
        .collect();
    let mut report = EgcReport {
        r,
        time_bound,
        samples,
        grazing_excluded: 0,
        sup_exit_time: 0.0,
        fraction_outgoing: 0.0,
        worst: None,
        failures: Vec::new(),
        failure_count: 0,
        min_velocity: None,
        velocity_ok: true,
        condition: None,
        errors: 0,
        pass: false,
    };
    let mut outgoing = 0usize;
    let mut counted = 0usize;
    for item in traced {
        let sample = match item {
            Traced::Done(sample) => sample,
            Traced::Grazing => {
                report.grazing_excluded += 1;
                continue;
            }
            Traced::Failed => {
                report.errors += 1;
                continue;
            }
        };
        counted += 1;
        if sample.outgoing {
            outgoing += 1;
        }
        if report.worst.is_none_or(|w| sample.exit_time > w.exit_time) {
            report.worst = Some(sample);
            report.sup_exit_time = sample.exit_time;
        }
        if !field.is_stationary() {
            let m = report
                .min_velocity
                .map_or(sample.min_velocity, |m: f64| m.min(sample.min_velocity));
            report.min_velocity = Some(m);
        }
        if sample.exit_time > time_bound * (1.0 + 1e-12) || !sample.outgoing {
            report.failure_count += 1;
            if report.failures.len() < 32 {
                report.failures.push(sample);
            }
        }
    }
    report.fraction_outgoing = if counted > 0 {
        outgoing as f64 / counted as f64
    } else {
        0.0
    };
    if let Some(h) = field.history() {
        let tt = perturbed_exit_bound(r);
        let phi_inf = pot.phi_b().abs();
        let mut worst = 0.0f64;
        let mut covered = true;
        let probes = 64;
        for j in 0..=probes {
            let s = window.0 + (window.1 - window.0) * j as f64 / probes as f64;
            match h.kinetic_forcing(s, s + tt) {
                Ok(f) => worst = worst.max(f),
                Err(_) => covered = false,
            }
        }
        let lhs = worst + tt * phi_inf;
        let rhs = r * r * ((-tt).exp() - 0.25);
        report.condition = Some(EnergyCondition {
            window: tt,
            lhs,
            rhs,
            holds: covered && lhs < rhs,
        });
        report.velocity_ok = report.min_velocity.is_none_or(|m| m > 0.5 * r);
    }
    report.pass = counted > 0 && report.errors == 0 && report.failure_count == 0 && report.velocity_ok;
    Ok(report)
}

// ---------------------------------------------------------------------------
// Phase portrait.

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PortraitRow {
    pub x: f64,
    pub v: f64,
    pub region: &'static str,
    pub t_inc: f64,
    pub t_out: f64,
}

/// Cell-centred grid of (x, v) ∈ (0, 1) × (−v_max, v_max) with exit times
/// from the explicit integrals (NaN on the separatrix).
pub fn phase_portrait(pot: &StationaryPotential, nx: usize, nv: usize, v_max: f64) -> Vec<PortraitRow> {
    (0..nx * nv)
        .into_par_iter()
        .map(|k| {
            let (i, j) = (k / nv, k % nv);
            let x = (i as f64 + 0.5) / nx as f64;
            let v = -v_max + 2.0 * v_max * (j as f64 + 0.5) / nv as f64;
            let (t_inc, t_out) = exit_time_quadrature(pot, x, v).unwrap_or((f64::NAN, f64::NAN));
            PortraitRow {
                x,
                v,
                region: pot.classify(x, v, 0.0).label(),
                t_inc,
                t_out,
            }
        })
        .collect()
}

pub fn write_phase_portrait<W: Write>(rows: &[PortraitRow], out: W) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["x", "v", "region", "t_inc", "t_out"])?;
    for r in rows {
        w.serialize((r.x, r.v, r.region, r.t_inc, r.t_out))?;
    }
    w.flush()
}
