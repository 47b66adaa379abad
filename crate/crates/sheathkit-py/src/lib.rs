//! Python bindings: equilibria, phase-space queries, Poisson solves,
//! evolution runs and the stability constants.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use sheathkit::characteristics::{exit_record, exit_time_quadrature, FieldSource};
use sheathkit::cli::{self, CliError};
use sheathkit::elliptic::{self, EstimateMode, PotentialField, SourceDensity};
use sheathkit::equilibrium::{self, default_grid_size, verify_equilibrium_bounds};
use sheathkit::evolution::{self, Bump, EvolutionConfig, InitialDatum, Mode};
use sheathkit::profiles::{build_well, ElectronModel, InjectionProfile, ProfileShape};
use sheathkit::{stability, Error};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::InvalidArgument { .. } | Error::SeparatrixPoint { .. } | Error::UnresolvedSupport { .. } => {
            PyValueError::new_err(e.to_string())
        }
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn cli_err(e: CliError) -> PyErr {
    match e {
        CliError::Parse { .. } | CliError::Validation { .. } => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn profile_shape(name: &str) -> PyResult<Option<ProfileShape>> {
    match name {
        "bump" => Ok(Some(ProfileShape::Bump)),
        "quartic" => Ok(Some(ProfileShape::Quartic)),
        "zero" => Ok(None),
        other => Err(PyValueError::new_err(format!("unknown profile shape `{other}`"))),
    }
}

/// A solved stationary sheath with Boltzmann electrons.
#[pyclass(name = "Equilibrium", module = "sheathkit", frozen)]
struct PyEquilibrium {
    inner: equilibrium::Equilibrium,
}

#[pymethods]
impl PyEquilibrium {
    /// `n0` defaults to the injected mass, which makes the sheath neutral.
    #[new]
    #[pyo3(signature = (lam, phi_b=-1.0, *, shape="bump", center=3.0, half_width=1.0, mass=1.0, n0=None, grid_size=None))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        lam: f64,
        phi_b: f64,
        shape: &str,
        center: f64,
        half_width: f64,
        mass: f64,
        n0: Option<f64>,
        grid_size: Option<usize>,
    ) -> PyResult<Self> {
        let profile = match profile_shape(shape)? {
            Some(s) => InjectionProfile::with_mass(s, center, half_width, mass).map_err(py_err)?,
            None => InjectionProfile::Zero,
        };
        let n0 = n0.unwrap_or(if matches!(profile, InjectionProfile::Zero) {
            1.0
        } else {
            mass
        });
        let well = build_well(&ElectronModel::boltzmann(n0).map_err(py_err)?, &profile, phi_b).map_err(py_err)?;
        let cells = grid_size.unwrap_or_else(|| default_grid_size(lam));
        let inner = equilibrium::solve_equilibrium(&well, lam, cells).map_err(py_err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn lam(&self) -> f64 {
        self.inner.lambda
    }

    #[getter]
    fn phi_b(&self) -> f64 {
        self.inner.phi_b
    }

    #[getter]
    fn x(&self) -> Vec<f64> {
        self.inner.x.clone()
    }

    #[getter]
    fn phi(&self) -> Vec<f64> {
        self.inner.phi.clone()
    }

    #[getter]
    fn dphi(&self) -> Vec<f64> {
        self.inner.dphi.clone()
    }

    #[getter]
    fn cells(&self) -> usize {
        self.inner.cells()
    }

    fn phi_at(&self, x: f64) -> f64 {
        self.inner.phi_at(x)
    }

    /// v² + 2φ∞(x).
    fn energy(&self, x: f64, v: f64) -> f64 {
        self.inner.potential.energy(x, v)
    }

    /// One of "dplus", "dplus_r", "dplusminus", "dminus" or "separatrix".
    #[pyo3(signature = (x, v, r=0.0))]
    fn classify(&self, x: f64, v: f64, r: f64) -> &'static str {
        self.inner.classify(x, v, r).label()
    }

    fn f_inf(&self, x: f64, v: f64) -> f64 {
        self.inner.f_inf(x, v)
    }

    fn energy_integral(&self) -> f64 {
        self.inner.energy_integral()
    }

    #[pyo3(signature = (p=1.0))]
    fn quasineutrality_norm(&self, p: f64) -> f64 {
        self.inner.quasineutrality_norm(p)
    }

    /// Sandwich, edge-slope and energy diagnostics.
    fn bounds<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let r = verify_equilibrium_bounds(&self.inner);
        let d = PyDict::new(py);
        d.set_item("alpha", r.alpha)?;
        d.set_item("beta", r.beta)?;
        d.set_item("violations", r.violations.len())?;
        d.set_item("max_excess", r.max_excess)?;
        d.set_item("slope_at_zero", r.slope_at_zero)?;
        d.set_item("slope_bound", r.slope_bound)?;
        d.set_item("energy", r.energy)?;
        d.set_item("passes", r.passes())?;
        Ok(d)
    }

    /// (t_inc, t_out) from the energy quadrature.
    fn exit_times(&self, x: f64, v: f64) -> PyResult<(f64, f64)> {
        exit_time_quadrature(&self.inner.potential, x, v).map_err(py_err)
    }

    /// (t_inc, t_out) by tracing the stationary characteristic to the boundary.
    fn exit_times_traced(&self, x: f64, v: f64) -> PyResult<(f64, f64)> {
        let rec = exit_record(&FieldSource::stationary(&self.inner), 0.0, x, v).map_err(py_err)?;
        Ok((rec.t_inc, rec.t_out))
    }

    fn __repr__(&self) -> String {
        format!(
            "Equilibrium(lam={}, phi_b={}, cells={})",
            self.inner.lambda,
            self.inner.phi_b,
            self.inner.cells()
        )
    }
}

fn source(eq: &PyEquilibrium, rho: Vec<f64>) -> PyResult<SourceDensity> {
    if rho.len() != eq.inner.cells() + 1 {
        return Err(PyValueError::new_err(format!(
            "rho needs {} nodal values, got {}",
            eq.inner.cells() + 1,
            rho.len()
        )));
    }
    SourceDensity::new(rho).map_err(py_err)
}

fn estimates<'py>(
    py: Python<'py>,
    eq: &PyEquilibrium,
    field: &PotentialField,
    rho: &SourceDensity,
    mode: EstimateMode,
) -> PyResult<Bound<'py, PyDict>> {
    let rep = elliptic::estimate_report(&eq.inner, field, rho, mode);
    let d = PyDict::new(py);
    for c in &rep.checks {
        d.set_item(c.name, (c.lhs, c.rhs, c.pass))?;
    }
    Ok(d)
}

/// Solves the linearised Poisson problem; returns (V, estimates) where each
/// estimate maps its name to (lhs, rhs, pass).
#[pyfunction]
fn solve_linear_poisson<'py>(
    py: Python<'py>,
    eq: &PyEquilibrium,
    rho: Vec<f64>,
) -> PyResult<(Vec<f64>, Bound<'py, PyDict>)> {
    let rho = source(eq, rho)?;
    let v = elliptic::solve_linear_poisson(&eq.inner, &rho).map_err(py_err)?;
    let est = estimates(py, eq, &v, &rho, EstimateMode::Linear)?;
    Ok((v.values, est))
}

/// Nonlinear counterpart of [`solve_linear_poisson`].
#[pyfunction]
fn solve_nonlinear_poisson<'py>(
    py: Python<'py>,
    eq: &PyEquilibrium,
    rho: Vec<f64>,
) -> PyResult<(Vec<f64>, Bound<'py, PyDict>)> {
    let rho = source(eq, rho)?;
    let w = elliptic::solve_nonlinear_poisson(&eq.inner, &rho).map_err(py_err)?;
    let est = estimates(py, eq, &w, &rho, EstimateMode::Nonlinear)?;
    Ok((w.values, est))
}

#[pyfunction]
fn solve_kappa(alpha: f64, window: f64) -> PyResult<f64> {
    stability::solve_kappa(alpha, window).map_err(py_err)
}

#[pyfunction]
fn delta_r(r: f64, phi_b: f64) -> f64 {
    stability::delta_r(r, phi_b)
}

#[pyfunction]
fn r_star(phi_b: f64) -> f64 {
    stability::r_star(phi_b)
}

#[pyfunction]
fn linear_condition<'py>(py: Python<'py>, eq: &PyEquilibrium, r: f64) -> PyResult<Bound<'py, PyDict>> {
    let c = stability::linear_condition(&eq.inner, r).map_err(py_err)?;
    let d = PyDict::new(py);
    d.set_item("r", c.r)?;
    d.set_item("dvf_l1", c.dvf_l1)?;
    d.set_item("t_r", c.t_r)?;
    d.set_item("alpha_rate", c.alpha_rate)?;
    d.set_item("margin", c.margin)?;
    d.set_item("pass", c.pass)?;
    Ok(d)
}

#[pyfunction]
fn nonlinear_thresholds<'py>(py: Python<'py>, eq: &PyEquilibrium, r: f64) -> PyResult<Bound<'py, PyDict>> {
    let n = stability::nonlinear_thresholds(&eq.inner, r).map_err(py_err)?;
    let d = PyDict::new(py);
    d.set_item("r", n.r)?;
    d.set_item("t_tilde", n.t_tilde)?;
    d.set_item("delta_r", n.delta_r)?;
    d.set_item("r_star", n.r_star)?;
    d.set_item("mickey", n.mickey_lhs)?;
    d.set_item("window", n.window_lhs)?;
    d.set_item("alpha_window", n.alpha_window)?;
    d.set_item("eps0", n.eps0)?;
    d.set_item("binding", n.binding())?;
    d.set_item("pass", n.pass)?;
    Ok(d)
}

type GronwallColumns = (Vec<f64>, Vec<f64>, Vec<f64>, f64);

/// Equality solution of the delayed Gronwall inequality from z = 1 on the
/// first window; returns (t, z, envelope, kappa).
#[pyfunction]
fn gronwall_simulate(alpha: f64, window: f64, horizon: f64, dt: f64) -> PyResult<GronwallColumns> {
    let s = stability::delayed_gronwall_simulate(|_| 1.0, alpha, window, horizon, dt).map_err(py_err)?;
    Ok((s.t, s.z, s.envelope, s.kappa))
}

/// Evolves h₀ given as (x, wx, v, wv, amplitude) bumps. Returns a dict of
/// per-step columns; a solver failure mid-run is reported under "error"
/// with the trace up to that point.
#[pyfunction]
#[pyo3(signature = (eq, bumps, r, horizon, *, nonlinear=false, dt=None))]
fn evolve<'py>(
    py: Python<'py>,
    eq: &PyEquilibrium,
    bumps: Vec<(f64, f64, f64, f64, f64)>,
    r: f64,
    horizon: f64,
    nonlinear: bool,
    dt: Option<f64>,
) -> PyResult<Bound<'py, PyDict>> {
    let datum = InitialDatum {
        bumps: bumps
            .into_iter()
            .map(|(x, wx, v, wv, a)| Bump {
                x_center: x,
                x_half_width: wx,
                v_center: v,
                v_half_width: wv,
                amplitude: a,
            })
            .collect(),
    };
    let cfg = EvolutionConfig {
        mode: if nonlinear { Mode::Nonlinear } else { Mode::Linear },
        r,
        horizon,
        dt,
        h_ode: None,
        v_max: None,
        nv: None,
        tracer: None,
        picard_tol: None,
        picard_max: None,
        snapshot_times: Vec::new(),
    };
    let inner = &eq.inner;
    let out = py
        .detach(|| evolution::run(inner, &datum, &cfg, |_| Ok(())))
        .map_err(py_err)?;
    let tr = &out.trace;
    let col = |f: fn(&evolution::TraceRow) -> f64| tr.rows.iter().map(f).collect::<Vec<f64>>();
    let d = PyDict::new(py);
    d.set_item("t", col(|r| r.t))?;
    d.set_item("l1_total", col(|r| r.norms.l1_total))?;
    d.set_item("l1_dplus_r", col(|r| r.norms.l1_dplus_r))?;
    d.set_item("l1_dplus_r2", col(|r| r.norms.l1_dplus_r2))?;
    d.set_item("l1_complement", col(|r| r.norms.l1_complement))?;
    d.set_item("linf_dxu", col(|r| r.norms.linf_dxu))?;
    d.set_item("exit_bound", tr.exit_bound)?;
    d.set_item("dt", tr.numerics.dt)?;
    let g = tr.growth_bounds();
    d.set_item("growth_ok", g.pass)?;
    d.set_item("error", out.error.map(|e| e.to_string()))?;
    Ok(d)
}

/// Runs a TOML config as the `sheathkit run` command would; returns the
/// exit status (0 all checks passed, 2 some check failed).
#[pyfunction]
fn run_config(py: Python<'_>, path: std::path::PathBuf) -> PyResult<i32> {
    py.detach(|| {
        let cfg = cli::load_config(&path)?;
        cli::execute(&cfg)
    })
    .map(|s| s.code())
    .map_err(cli_err)
}

#[pymodule]
#[pyo3(name = "sheathkit")]
pub fn sheathkit_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyEquilibrium>()?;
    m.add_function(wrap_pyfunction!(solve_linear_poisson, m)?)?;
    m.add_function(wrap_pyfunction!(solve_nonlinear_poisson, m)?)?;
    m.add_function(wrap_pyfunction!(solve_kappa, m)?)?;
    m.add_function(wrap_pyfunction!(delta_r, m)?)?;
    m.add_function(wrap_pyfunction!(r_star, m)?)?;
    m.add_function(wrap_pyfunction!(linear_condition, m)?)?;
    m.add_function(wrap_pyfunction!(nonlinear_thresholds, m)?)?;
    m.add_function(wrap_pyfunction!(gronwall_simulate, m)?)?;
    m.add_function(wrap_pyfunction!(evolve, m)?)?;
    m.add_function(wrap_pyfunction!(run_config, m)?)?;
    Ok(())
}
