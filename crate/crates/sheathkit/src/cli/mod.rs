//! Run orchestration behind the `sheathkit` binary: config ingestion, the
//! per-mode pipelines, run directories, CSV tables and SVG plots.
//!
//! Exit status: 0 on success, 2 when a theory check fails, 1 on errors.

pub mod config;
pub mod svg;

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use serde::Serialize;
use thiserror::Error;

use crate::characteristics::{linear_exit_bound, phase_portrait, verify_egc, write_phase_portrait, FieldSource};
use crate::equilibrium::{
    default_grid_size, sinh_ratio, solve_equilibrium, verify_equilibrium_bounds, Equilibrium, SANDWICH_TOL,
};
use crate::evolution::{self, EvolutionConfig, Mode, PerturbationState, RunTrace};
use crate::profiles::{build_well, check_hypotheses};
use crate::stability::{
    delayed_gronwall_simulate, envelope_ratio, fit_decay, linear_condition, nonlinear_thresholds, solve_kappa,
    stability_report, write_stability_csv, ENVELOPE_SLACK,
};

use config::GronwallStart;
pub use config::{load_config, parse_config, RunConfig, RunMode};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("parse error at line {line} near `{key}`: {message}")]
    Parse { line: usize, key: String, message: String },
    #[error("invalid {field}: {reason}")]
    Validation { field: &'static str, reason: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Solver(#[from] crate::Error),
}

/// Successful completion, with or without failed theory checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Success,
    ChecksFailed,
}

impl Status {
    pub fn code(self) -> i32 {
        match self {
            Self::Success => 0,
            Self::ChecksFailed => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Pass,
    Fail,
    NotApplicable,
}

/// One line of `checks.csv`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub bound: f64,
    pub verdict: Verdict,
    pub note: String,
}

impl Check {
    fn new(name: &str, value: f64, bound: f64, ok: bool) -> Self {
        Self {
            name: name.into(),
            value,
            bound,
            verdict: if ok { Verdict::Pass } else { Verdict::Fail },
            note: String::new(),
        }
    }

    fn skipped(name: &str, note: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            value: f64::NAN,
            bound: f64::NAN,
            verdict: Verdict::NotApplicable,
            note: note.into(),
        }
    }

    fn noted(mut self, note: impl Into<String>) -> Self {
        self.note = note.into();
        self
    }
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |e| CliError::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path).map(BufWriter::new).map_err(io_err(path))
}

fn write_with<F>(path: &Path, f: F) -> Result<(), CliError>
where
    F: FnOnce(BufWriter<File>) -> std::io::Result<()>,
{
    f(create(path)?).map_err(io_err(path))
}

/// Creates the run directory; its parent must already exist.
fn prepare_dir(dir: &Path) -> Result<(), CliError> {
    if !dir.is_dir() {
        fs::create_dir(dir).map_err(io_err(dir))?;
    }
    Ok(())
}

pub fn write_checks(path: &Path, checks: &[Check]) -> Result<(), CliError> {
    write_with(path, |out| {
        let mut w = csv::Writer::from_writer(out);
        for c in checks {
            w.serialize(c)?;
        }
        w.flush()
    })
}

fn status_of(checks: &[Check]) -> Status {
    if checks.iter().any(|c| c.verdict == Verdict::Fail) {
        Status::ChecksFailed
    } else {
        Status::Success
    }
}

/// Solves the equilibrium of the configured physics at Debye length λ.
pub fn build_equilibrium(cfg: &RunConfig, lambda: f64) -> Result<Equilibrium, CliError> {
    let well = build_well(&cfg.electron_model()?, &cfg.injection_profile()?, cfg.phi_b)?;
    let grid = if lambda == cfg.lambda {
        cfg.numerics.grid_size
    } else {
        cfg.numerics.grid_size.max(default_grid_size(lambda))
    };
    Ok(solve_equilibrium(&well, lambda, grid)?)
}

fn hypothesis_checks(cfg: &RunConfig) -> Result<Vec<Check>, CliError> {
    let h = check_hypotheses(&cfg.electron_model()?, &cfg.injection_profile()?, cfg.phi_b)?;
    Ok(vec![
        Check::new("neutrality", h.neutrality_residual, 0.0, h.neutrality_ok),
        Check::new("bohm", h.bohm_margin, 0.0, h.bohm_ok),
        Check::new(
            "electron_concavity",
            h.concavity_max_second_difference,
            0.0,
            h.concavity_ok,
        ),
        Check::new("electron_density_increasing", f64::NAN, f64::NAN, h.density_increasing),
    ])
}

fn bounds_checks(eq: &Equilibrium) -> Vec<Check> {
    let b = verify_equilibrium_bounds(eq);
    vec![
        Check::new("sandwich", b.max_excess, SANDWICH_TOL, b.violations.is_empty())
            .noted(format!("{} violating nodes", b.violations.len())),
        Check::new(
            "edge_slope",
            b.slope_at_zero.abs(),
            b.slope_bound,
            b.slope_ok && b.slope_negative,
        ),
    ]
}

/// Runs the configured pipeline, writing everything under `io.output_dir`.
pub fn execute(cfg: &RunConfig) -> Result<Status, CliError> {
    let dir = cfg.io.output_dir.clone();
    prepare_dir(&dir)?;
    let manifest = dir.join("manifest.toml");
    fs::write(&manifest, cfg.to_toml()).map_err(io_err(&manifest))?;
    let checks = match cfg.mode {
        RunMode::Equilibrium => run_equilibrium(cfg, &dir)?,
        RunMode::PhasePortrait => run_portrait(cfg, &dir)?,
        RunMode::LinearEvolve | RunMode::NonlinearEvolve => run_evolution(cfg, &dir)?,
        RunMode::StabilityReport => run_stability(cfg, &dir)?,
        RunMode::GronwallDemo => run_gronwall(cfg, &dir)?,
    };
    write_checks(&dir.join("checks.csv"), &checks)?;
    if cfg.io.plots {
        // Plots never gate the exit status.
        if let Err(e) = plot_run_dir(&dir) {
            eprintln!("warning: plotting failed: {e}");
        }
    }
    Ok(status_of(&checks))
}

/// Hypotheses and stability conditions only; nothing is written to disk.
pub fn check(cfg: &RunConfig) -> Result<(Status, Vec<Check>), CliError> {
    let mut checks = hypothesis_checks(cfg)?;
    let eq = build_equilibrium(cfg, cfg.lambda)?;
    checks.extend(bounds_checks(&eq));
    let lin = linear_condition(&eq, cfg.r)?;
    checks.push(Check::new("linear_condition", lin.alpha_rate * lin.t_r, 1.0, lin.pass));
    if cfg.r > 0.0 {
        match nonlinear_thresholds(&eq, cfg.r) {
            Ok(nl) => {
                checks.push(Check::new("delta_r", nl.delta_r, 0.0, nl.delta_r > 0.0));
                checks.push(Check::new("mickey", nl.mickey_lhs, 1.0, nl.mickey_lhs < 1.0));
                checks.push(Check::new("window", nl.window_lhs, 1.0, nl.window_lhs < 1.0));
                checks.push(Check::new("alpha_window", nl.alpha_window, 1.0, nl.alpha_window < 1.0));
                checks.push(Check::new(
                    "profile_in_dplus_r",
                    f64::NAN,
                    f64::NAN,
                    nl.profile_in_dplus_r,
                ));
                let h0 = cfg.initial.bumps.iter().map(|b| b.l1()).sum::<f64>();
                checks.push(Check::new("initial_below_eps0", h0, nl.eps0, h0 < nl.eps0).noted("sum of bump masses"));
            }
            Err(crate::Error::NoThreshold { r, delta_r }) => {
                checks.push(Check::new("delta_r", delta_r, 0.0, false).noted(format!("r = {r} is not above r_star")));
            }
            Err(e) => return Err(e.into()),
        }
    }
    Ok((status_of(&checks), checks))
}

fn run_equilibrium(cfg: &RunConfig, dir: &Path) -> Result<Vec<Check>, CliError> {
    let mut checks = hypothesis_checks(cfg)?;
    let eq = build_equilibrium(cfg, cfg.lambda)?;
    write_with(&dir.join("equilibrium.csv"), |w| eq.write_csv(w))?;
    write_sandwich(&eq, dir)?;
    checks.extend(bounds_checks(&eq));
    Ok(checks)
}

fn write_sandwich(eq: &Equilibrium, dir: &Path) -> Result<(), CliError> {
    let pb = eq.phi_b.abs();
    let (ca, cb) = (eq.well.alpha.sqrt() / eq.lambda, eq.well.beta.sqrt() / eq.lambda);
    write_with(&dir.join("sandwich.csv"), |out| {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["x", "lower", "abs_phi", "upper"])?;
        for (&x, &p) in eq.x.iter().zip(&eq.phi) {
            w.serialize((x, pb * sinh_ratio(cb, x), p.abs(), pb * sinh_ratio(ca, x)))?;
        }
        w.flush()
    })
}

fn run_portrait(cfg: &RunConfig, dir: &Path) -> Result<Vec<Check>, CliError> {
    let eq = build_equilibrium(cfg, cfg.lambda)?;
    write_with(&dir.join("equilibrium.csv"), |w| eq.write_csv(w))?;
    let n = &cfg.numerics;
    let v_max = n.v_max.unwrap_or_else(|| {
        let r_hi = eq.well.profile.support().map_or(0.0, |(_, hi)| hi);
        r_hi.max(cfg.r) + (2.0 * eq.phi_b.abs()).sqrt()
    });
    let rows = phase_portrait(&eq.potential, n.portrait_nx, n.portrait_nv, v_max);
    write_with(&dir.join("portrait.csv"), |w| write_phase_portrait(&rows, w))?;
    if cfg.r <= 0.0 {
        return Ok(vec![Check::skipped("egc_stationary", "needs r > 0")]);
    }
    let field = FieldSource::stationary(&eq);
    let bound = linear_exit_bound(cfg.r);
    let egc = verify_egc(&field, cfg.r, (0.0, 0.0), bound, n.egc_samples)?;
    write_with(&dir.join("egc.csv"), |out| {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "r",
            "time_bound",
            "samples",
            "sup_exit_time",
            "fraction_outgoing",
            "failure_count",
            "pass",
        ])?;
        w.serialize((
            egc.r,
            egc.time_bound,
            egc.samples,
            egc.sup_exit_time,
            egc.fraction_outgoing,
            egc.failure_count,
            egc.pass,
        ))?;
        w.flush()
    })?;
    Ok(vec![Check::new("egc_stationary", egc.sup_exit_time, bound, egc.pass)])
}

fn time_tag(t: f64) -> String {
    format!("{t:.6}")
}

fn write_snapshot(dir: &Path, s: &PerturbationState) -> std::io::Result<()> {
    let tag = time_tag(s.t);
    s.write_h_csv(BufWriter::new(File::create(dir.join(format!("h_{tag}.csv")))?))?;
    s.write_u_csv(BufWriter::new(File::create(dir.join(format!("U_{tag}.csv")))?))
}

fn evolution_config(cfg: &RunConfig) -> EvolutionConfig {
    let n = &cfg.numerics;
    EvolutionConfig {
        mode: if cfg.mode == RunMode::NonlinearEvolve {
            Mode::Nonlinear
        } else {
            Mode::Linear
        },
        r: cfg.r,
        horizon: n.horizon,
        dt: n.dt,
        h_ode: n.h_ode,
        v_max: n.v_max,
        nv: n.nv,
        tracer: n.tracer,
        picard_tol: Some(n.picard_tol),
        picard_max: Some(n.picard_max),
        snapshot_times: cfg.io.snapshot_times.clone(),
    }
}

#[derive(Serialize)]
struct ResolvedManifest<'a> {
    #[serde(flatten)]
    config: &'a RunConfig,
    evolution: &'a evolution::ResolvedNumerics,
}

/// The theory checks applied to an evolution trace.
pub fn evolution_checks(eq: &Equilibrium, trace: &RunTrace) -> Result<Vec<Check>, CliError> {
    let mut checks = Vec::new();
    let growth = trace.growth_bounds();
    checks.push(Check::new(
        "a_priori_growth",
        growth.worst_h_ratio.max(growth.worst_u_ratio),
        1.0,
        growth.pass,
    ));
    let worst_picard = trace.rows.iter().map(|r| r.picard_ratio).fold(0.0, f64::max);
    checks.push(
        Check::new("picard_contraction", worst_picard, 0.55, worst_picard <= 0.55)
            .noted("bound 0.5 at gamma = 4|dvf|/lambda^2, 10% slack"),
    );
    let times = trace.times();
    let r = trace.numerics.r;
    let l2 = eq.lambda * eq.lambda;
    let dxu: Vec<f64> = trace.rows.iter().map(|x| x.norms.linf_dxu).collect();
    let envelope =
        |name: &str, values: &[f64], kappa: f64, window: f64, checks: &mut Vec<Check>| -> Result<(), CliError> {
            if kappa.is_infinite() {
                // No source above r: the region empties within one window.
                let h0 = values.first().copied().unwrap_or(0.0);
                let late = times
                    .iter()
                    .zip(values)
                    .filter(|(&t, _)| t > window)
                    .map(|(_, &y)| y)
                    .fold(0.0, f64::max);
                checks.push(
                    Check::new(name, late, 1e-12 * h0.max(f64::MIN_POSITIVE), late <= 1e-12 * h0)
                        .noted("source-free region, extinction after one window"),
                );
                return Ok(());
            }
            match fit_decay(&times, values, kappa, window) {
                Ok(fit) => {
                    checks.push(
                        Check::new(name, fit.worst_ratio, 1.0 + ENVELOPE_SLACK, fit.envelope_ok).noted(format!(
                            "kappa = {kappa:.6e}, C = {:.6e}, fitted rate = {:.6e}",
                            fit.c, fit.fitted_rate
                        )),
                    );
                    let u = envelope_ratio(&times, &dxu, 2.0 * fit.c / l2, kappa);
                    checks.push(Check::new(
                        &format!("{name}_dxU"),
                        u,
                        1.0 + ENVELOPE_SLACK,
                        u <= 1.0 + ENVELOPE_SLACK,
                    ));
                }
                Err(crate::Error::EmptyTail { .. }) => {
                    checks.push(Check::new(name, 0.0, 1.0, true).noted("extinct before the window ends"));
                }
                Err(e) => return Err(e.into()),
            }
            Ok(())
        };
    match trace.numerics.mode {
        Mode::Linear => {
            let lin = linear_condition(eq, r)?;
            if lin.pass {
                let kappa = solve_kappa(lin.alpha_rate, lin.t_r)?;
                let values: Vec<f64> = trace.rows.iter().map(|x| x.norms.l1_dplus_r).collect();
                envelope("decay_envelope", &values, kappa, lin.t_r, &mut checks)?;
            } else {
                checks.push(Check::skipped("decay_envelope", "linear stability condition not met"));
            }
            let comp: Vec<f64> = trace.rows.iter().map(|x| x.norms.l1_complement).collect();
            let rising = comp.windows(2).map(|w| w[1] - w[0]).fold(0.0, f64::max);
            let h0 = trace.rows[0].norms.l1_total;
            let late = times
                .iter()
                .zip(&comp)
                .filter(|(&t, _)| t >= trace.exit_bound)
                .map(|(_, &y)| y)
                .fold(0.0, f64::max);
            if times.last().copied().unwrap_or(0.0) >= trace.exit_bound {
                checks.push(Check::new("complement_extinction", late, 1e-12, late <= 1e-12));
            } else {
                checks.push(Check::skipped(
                    "complement_extinction",
                    "horizon ends before the exit bound",
                ));
            }
            checks.push(Check::new(
                "complement_nonincreasing",
                rising,
                1e-9 * h0,
                rising <= 1e-9 * h0,
            ));
        }
        Mode::Nonlinear => {
            let applicable = match nonlinear_thresholds(eq, r) {
                Ok(nl) if nl.pass && trace.admissibility.l1 < nl.eps0 && trace.admissibility.support_in_dplus_r => {
                    Ok(nl)
                }
                Ok(nl) => Err(format!(
                    "thresholds not met (pass = {}, |h0| = {:.3e}, eps0 = {:.3e})",
                    nl.pass, trace.admissibility.l1, nl.eps0
                )),
                Err(crate::Error::NoThreshold { .. }) => Err("r is not above r_star".to_string()),
                Err(e) => return Err(e.into()),
            };
            match applicable {
                Ok(nl) => {
                    let inside = trace.rows.iter().all(|x| x.support.is_none_or(|b| b.in_dplus_r2));
                    let bad = trace
                        .rows
                        .iter()
                        .filter(|x| !x.support.is_none_or(|b| b.in_dplus_r2))
                        .count();
                    checks.push(Check::new("support_in_dplus_r2", bad as f64, 0.0, inside));
                    let alpha = 2.0 * trace.dvf_l1_r / l2;
                    let kappa = solve_kappa(alpha, nl.t_tilde)?;
                    let values: Vec<f64> = trace.rows.iter().map(|x| x.norms.l1_dplus_r2).collect();
                    envelope("decay_envelope", &values, kappa, nl.t_tilde, &mut checks)?;
                }
                Err(why) => {
                    eprintln!("warning: {why}; envelope check not applicable");
                    checks.push(Check::skipped("support_in_dplus_r2", why.clone()));
                    checks.push(Check::skipped("decay_envelope", why));
                }
            }
        }
    }
    Ok(checks)
}

fn run_evolution(cfg: &RunConfig, dir: &Path) -> Result<Vec<Check>, CliError> {
    let eq = build_equilibrium(cfg, cfg.lambda)?;
    let ecfg = evolution_config(cfg);
    let numerics = ecfg.resolve(&eq, &cfg.initial)?;
    let manifest = dir.join("manifest.toml");
    let text = toml::to_string(&ResolvedManifest {
        config: cfg,
        evolution: &numerics,
    })
    .expect("manifest serializes");
    fs::write(&manifest, text).map_err(io_err(&manifest))?;
    let snaps = dir.join("snapshots");
    fs::create_dir_all(&snaps).map_err(io_err(&snaps))?;
    let outcome = evolution::run(&eq, &cfg.initial, &ecfg, |s| write_snapshot(&snaps, s))?;
    let trace = &outcome.trace;
    for w in &trace.admissibility.warnings {
        eprintln!("warning: {w}");
    }
    write_with(&dir.join("trace.csv"), |w| trace.write_trace_csv(w))?;
    write_with(&dir.join("support.csv"), |w| trace.write_support_csv(w))?;
    if let Some(e) = outcome.error {
        return Err(e.into());
    }
    let checks = evolution_checks(&eq, trace)?;
    write_envelope(cfg, &eq, trace, dir)?;
    if !trace.admissibility.support_in_dplus_r {
        eprintln!("warning: initial support is not contained in D+_r");
    }
    Ok(checks)
}

/// Writes envelope.csv (t, envelope) when the decay theory applies.
fn write_envelope(cfg: &RunConfig, eq: &Equilibrium, trace: &RunTrace, dir: &Path) -> Result<(), CliError> {
    let (kappa, window, column): (f64, f64, fn(&evolution::Norms) -> f64) = match trace.numerics.mode {
        Mode::Linear => {
            let lin = linear_condition(eq, cfg.r)?;
            if !lin.pass {
                return Ok(());
            }
            (solve_kappa(lin.alpha_rate, lin.t_r)?, lin.t_r, |n| n.l1_dplus_r)
        }
        Mode::Nonlinear => match nonlinear_thresholds(eq, cfg.r) {
            Ok(nl) if nl.pass => (
                solve_kappa(2.0 * trace.dvf_l1_r / (eq.lambda * eq.lambda), nl.t_tilde)?,
                nl.t_tilde,
                |n| n.l1_dplus_r2,
            ),
            _ => return Ok(()),
        },
    };
    if !kappa.is_finite() {
        return Ok(());
    }
    let times = trace.times();
    let values: Vec<f64> = trace.rows.iter().map(|r| column(&r.norms)).collect();
    let Ok(fit) = fit_decay(&times, &values, kappa, window) else {
        return Ok(());
    };
    write_with(&dir.join("envelope.csv"), |out| {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["t", "envelope"])?;
        for &t in &times {
            w.serialize((t, fit.c * (-kappa * t).exp()))?;
        }
        w.flush()
    })
}

fn run_stability(cfg: &RunConfig, dir: &Path) -> Result<Vec<Check>, CliError> {
    let mut rows = Vec::new();
    for &lambda in &cfg.scan.lambda_values {
        let eq = build_equilibrium(cfg, lambda)?;
        for &r in &cfg.scan.r_values {
            rows.push(stability_report(&eq, r)?);
        }
    }
    write_with(&dir.join("stability_report.csv"), |w| write_stability_csv(&rows, w))?;
    Ok(Vec::new())
}

fn run_gronwall(cfg: &RunConfig, dir: &Path) -> Result<Vec<Check>, CliError> {
    let g = &cfg.gronwall;
    let series = match g.start {
        GronwallStart::Constant => delayed_gronwall_simulate(|_| 1.0, g.alpha, g.window, g.horizon, g.dt)?,
        GronwallStart::Exponential => {
            let k = solve_kappa(g.alpha, g.window)?;
            delayed_gronwall_simulate(|t| (-k * t).exp(), g.alpha, g.window, g.horizon, g.dt)?
        }
    };
    write_with(&dir.join("gronwall.csv"), |w| series.write_csv(w))?;
    Ok(vec![Check::new(
        "gronwall_envelope",
        series.worst_ratio,
        1.0 + g.dt / g.window,
        series.bound_ok,
    )
    .noted(format!("kappa = {:.6e}", series.kappa))])
}

fn read_columns(path: &Path, names: &[&str]) -> Result<Vec<Vec<f64>>, CliError> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| CliError::Io {
        path: path.to_path_buf(),
        source: e.into(),
    })?;
    let headers = rdr.headers().map_err(|e| CliError::Io {
        path: path.to_path_buf(),
        source: e.into(),
    })?;
    let idx: Vec<usize> = names
        .iter()
        .map(|n| {
            headers
                .iter()
                .position(|h| h == *n)
                .ok_or_else(|| CliError::Validation {
                    field: "csv",
                    reason: format!("{} lacks column {n}", path.display()),
                })
        })
        .collect::<Result<_, _>>()?;
    let mut cols = vec![Vec::new(); names.len()];
    for rec in rdr.records() {
        let rec = rec.map_err(|e| CliError::Io {
            path: path.to_path_buf(),
            source: e.into(),
        })?;
        for (c, &i) in cols.iter_mut().zip(&idx) {
            c.push(rec.get(i).and_then(|s| s.parse().ok()).unwrap_or(f64::NAN));
        }
    }
    Ok(cols)
}

fn zip2(a: &[f64], b: &[f64]) -> Vec<(f64, f64)> {
    a.iter().copied().zip(b.iter().copied()).collect()
}

/// Regenerates every SVG that the CSVs in `dir` support; returns the files written.
pub fn plot_run_dir(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    use svg::{Plot, Series};
    let mut written = Vec::new();
    let mut emit = |name: &str, plot: Plot| -> Result<(), CliError> {
        let path = dir.join(name);
        fs::write(&path, plot.render()).map_err(io_err(&path))?;
        written.push(path);
        Ok(())
    };
    let eq_csv = dir.join("equilibrium.csv");
    let sandwich = dir.join("sandwich.csv");
    if sandwich.is_file() {
        let c = read_columns(&sandwich, &["x", "lower", "abs_phi", "upper"])?;
        let mut p = Plot::new("Equilibrium potential and sinh bounds", "x", "|phi_inf|");
        p.series.push(Series::line("|phi_inf|", zip2(&c[0], &c[2])));
        p.series.push(Series::dashed("lower", zip2(&c[0], &c[1])));
        p.series.push(Series::dashed("upper", zip2(&c[0], &c[3])));
        emit("phi.svg", p)?;
    } else if eq_csv.is_file() {
        let c = read_columns(&eq_csv, &["x", "phi_inf"])?;
        let mut p = Plot::new("Equilibrium potential", "x", "phi_inf");
        p.series.push(Series::line("phi_inf", zip2(&c[0], &c[1])));
        emit("phi.svg", p)?;
    }
    let portrait = dir.join("portrait.csv");
    if portrait.is_file() {
        let mut rdr = csv::Reader::from_path(&portrait).map_err(|e| CliError::Io {
            path: portrait.clone(),
            source: e.into(),
        })?;
        let mut layers: Vec<svg::Layer> = Vec::new();
        for rec in rdr.records().flatten() {
            let (Some(x), Some(v), Some(region)) = (rec.get(0), rec.get(1), rec.get(2)) else {
                continue;
            };
            let (Ok(x), Ok(v)) = (x.parse::<f64>(), v.parse::<f64>()) else {
                continue;
            };
            match layers.iter_mut().find(|l| l.0 == region) {
                Some(l) => l.2.push((x, v)),
                None => {
                    let k = layers.len();
                    layers.push((region.to_string(), k, vec![(x, v)]));
                }
            }
        }
        let mut p = Plot::new("Stationary phase portrait", "x", "v");
        p.scatter = layers;
        if eq_csv.is_file() {
            let c = read_columns(&eq_csv, &["x", "phi_inf"])?;
            let upper: Vec<(f64, f64)> = c[0]
                .iter()
                .zip(&c[1])
                .map(|(&x, &phi)| (x, (-2.0 * phi).max(0.0).sqrt()))
                .collect();
            let lower = upper.iter().map(|&(x, v)| (x, -v)).collect();
            p.series.push(Series::line("separatrix", upper));
            p.series.push(Series::line("separatrix", lower));
        }
        emit("portrait.svg", p)?;
    }
    let trace = dir.join("trace.csv");
    if trace.is_file() {
        let c = read_columns(&trace, &["t", "l1_total", "l1_dplus_r", "l1_dplus_r2", "l1_complement"])?;
        let mut p = Plot::new("Fluctuation norms", "t", "L1 norm");
        p.log_y = true;
        p.series.push(Series::line("total", zip2(&c[0], &c[1])));
        p.series.push(Series::line("D+_r", zip2(&c[0], &c[2])));
        p.series.push(Series::line("D+_r/2", zip2(&c[0], &c[3])));
        p.series.push(Series::line("complement", zip2(&c[0], &c[4])));
        let env = dir.join("envelope.csv");
        if env.is_file() {
            let e = read_columns(&env, &["t", "envelope"])?;
            p.series.push(Series::dashed("C exp(-kappa t)", zip2(&e[0], &e[1])));
        }
        emit("decay.svg", p)?;
    }
    let gron = dir.join("gronwall.csv");
    if gron.is_file() {
        let c = read_columns(&gron, &["t", "z", "envelope"])?;
        let mut p = Plot::new("Delayed Gronwall equality solution", "t", "z");
        p.log_y = true;
        p.series.push(Series::line("z", zip2(&c[0], &c[1])));
        p.series.push(Series::dashed("C exp(-kappa t)", zip2(&c[0], &c[2])));
        emit("gronwall.svg", p)?;
    }
    Ok(written)
}
