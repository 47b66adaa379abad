//! TOML run configuration: parsing, validation and default resolution.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::equilibrium::default_grid_size;
use crate::evolution::{Bump, InitialDatum, Tracer};
use crate::profiles::{ElectronModel, InjectionProfile, ProfileShape};

use super::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunMode {
    Equilibrium,
    PhasePortrait,
    LinearEvolve,
    NonlinearEvolve,
    StabilityReport,
    GronwallDemo,
}

impl RunMode {
    pub fn name(self) -> &'static str {
        match self {
            Self::Equilibrium => "equilibrium",
            Self::PhasePortrait => "phase_portrait",
            Self::LinearEvolve => "linear_evolve",
            Self::NonlinearEvolve => "nonlinear_evolve",
            Self::StabilityReport => "stability_report",
            Self::GronwallDemo => "gronwall_demo",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ElectronSpec {
    /// n0 defaults to the profile mass, which enforces neutrality.
    Boltzmann {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        n0: Option<f64>,
    },
    /// Two-column CSV (psi, density).
    Tabulated { path: PathBuf },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeSpec {
    Bump,
    Quartic,
    Zero,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfileSpec {
    #[serde(default = "default_shape")]
    pub shape: ShapeSpec,
    #[serde(default = "default_center")]
    pub center: f64,
    #[serde(default = "default_half_width")]
    pub half_width: f64,
    #[serde(default = "default_mass")]
    pub mass: f64,
}

fn default_shape() -> ShapeSpec {
    ShapeSpec::Bump
}
fn default_center() -> f64 {
    3.0
}
fn default_half_width() -> f64 {
    1.0
}
fn default_mass() -> f64 {
    1.0
}

impl Default for ProfileSpec {
    fn default() -> Self {
        Self {
            shape: default_shape(),
            center: default_center(),
            half_width: default_half_width(),
            mass: default_mass(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NumericsSpec {
    pub grid_size: Option<usize>,
    pub dt: Option<f64>,
    pub h_ode: Option<f64>,
    pub horizon: Option<f64>,
    pub v_max: Option<f64>,
    pub nv: Option<usize>,
    pub tracer: Option<Tracer>,
    pub picard_tol: Option<f64>,
    pub picard_max: Option<usize>,
    pub portrait_nx: Option<usize>,
    pub portrait_nv: Option<usize>,
    pub egc_samples: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialSpec {
    #[serde(default)]
    pub bumps: Vec<Bump>,
    /// Multiplies every bump amplitude.
    pub scale: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IoSpec {
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub snapshot_times: Vec<f64>,
    pub plots: Option<bool>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GronwallStart {
    Constant,
    Exponential,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GronwallSpec {
    pub alpha: Option<f64>,
    pub window: Option<f64>,
    pub horizon: Option<f64>,
    pub dt: Option<f64>,
    pub start: Option<GronwallStart>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScanSpec {
    #[serde(default)]
    pub r_values: Vec<f64>,
    #[serde(default)]
    pub lambda_values: Vec<f64>,
}

/// The file as written by the user.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawConfig {
    pub mode: RunMode,
    pub lambda: f64,
    pub phi_b: f64,
    pub r: Option<f64>,
    pub seed: Option<u64>,
    pub electrons: Option<ElectronSpec>,
    pub profile: Option<ProfileSpec>,
    #[serde(default)]
    pub numerics: NumericsSpec,
    #[serde(default)]
    pub initial: InitialSpec,
    #[serde(default)]
    pub io: IoSpec,
    #[serde(default)]
    pub gronwall: GronwallSpec,
    #[serde(default)]
    pub scan: ScanSpec,
}

/// Every value that can affect a run, defaults applied. This is what the
/// manifest records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub mode: RunMode,
    pub lambda: f64,
    pub phi_b: f64,
    pub r: f64,
    pub seed: u64,
    pub electrons: ElectronSpec,
    pub profile: ProfileSpec,
    pub numerics: ResolvedNumerics,
    pub initial: InitialDatum,
    pub io: ResolvedIo,
    pub gronwall: ResolvedGronwall,
    pub scan: ResolvedScan,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResolvedNumerics {
    pub grid_size: usize,
    /// Unset values are resolved by the evolution module and recorded in
    /// the run manifest's `evolution` table.
    pub dt: Option<f64>,
    pub h_ode: Option<f64>,
    pub horizon: f64,
    pub v_max: Option<f64>,
    pub nv: Option<usize>,
    pub tracer: Option<Tracer>,
    pub picard_tol: f64,
    pub picard_max: usize,
    pub portrait_nx: usize,
    pub portrait_nv: usize,
    pub egc_samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResolvedIo {
    pub output_dir: PathBuf,
    pub snapshot_times: Vec<f64>,
    pub plots: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResolvedGronwall {
    pub alpha: f64,
    pub window: f64,
    pub horizon: f64,
    pub dt: f64,
    pub start: GronwallStart,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResolvedScan {
    pub r_values: Vec<f64>,
    pub lambda_values: Vec<f64>,
}

fn validation(field: &'static str, reason: impl Into<String>) -> CliError {
    CliError::Validation {
        field,
        reason: reason.into(),
    }
}

fn positive(field: &'static str, value: f64) -> Result<f64, CliError> {
    if value > 0.0 && value.is_finite() {
        Ok(value)
    } else {
        Err(validation(field, "must be positive and finite"))
    }
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

/// Parses TOML text; `base` resolves relative paths in the file.
pub fn parse_config(text: &str, base: &Path) -> Result<RunConfig, CliError> {
    let raw: RawConfig = toml::from_str(text).map_err(|e| {
        let line = e.span().map_or(0, |s| line_of(text, s.start));
        let key = e.span().map(|s| text[s.clone()].trim().to_string()).unwrap_or_default();
        CliError::Parse {
            line,
            key,
            message: e.message().to_string(),
        }
    })?;
    resolve(raw, base)
}

/// Reads and validates a config file.
pub fn load_config(path: &Path) -> Result<RunConfig, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let base = path.parent().unwrap_or(Path::new("."));
    parse_config(&text, base)
}

pub fn resolve(raw: RawConfig, base: &Path) -> Result<RunConfig, CliError> {
    positive("lambda", raw.lambda)?;
    if !(raw.phi_b < 0.0 && raw.phi_b.is_finite()) {
        return Err(validation("phi_b", "phi_b must be negative"));
    }
    let r = raw.r.unwrap_or(4.0);
    if !(r >= 0.0 && r.is_finite()) {
        return Err(validation("r", "must be nonnegative"));
    }
    let profile = raw.profile.unwrap_or_default();
    if profile.shape != ShapeSpec::Zero {
        positive("profile.half_width", profile.half_width)?;
        positive("profile.mass", profile.mass)?;
        if profile.center - profile.half_width < 0.0 {
            return Err(validation("profile.center", "support must lie in v >= 0"));
        }
    }
    let electrons = match raw.electrons.unwrap_or(ElectronSpec::Boltzmann { n0: None }) {
        ElectronSpec::Boltzmann { n0 } => {
            let n0 = n0.unwrap_or(if profile.shape == ShapeSpec::Zero {
                1.0
            } else {
                profile.mass
            });
            positive("electrons.n0", n0)?;
            ElectronSpec::Boltzmann { n0: Some(n0) }
        }
        ElectronSpec::Tabulated { path } => ElectronSpec::Tabulated {
            path: if path.is_absolute() { path } else { base.join(path) },
        },
    };
    let n = &raw.numerics;
    let grid_size = n.grid_size.unwrap_or_else(|| default_grid_size(raw.lambda));
    if grid_size < 64 {
        return Err(validation("numerics.grid_size", "need at least 64 cells"));
    }
    for (field, v) in [
        ("numerics.dt", n.dt),
        ("numerics.h_ode", n.h_ode),
        ("numerics.v_max", n.v_max),
        ("numerics.picard_tol", n.picard_tol),
    ] {
        if let Some(v) = v {
            positive(field, v)?;
        }
    }
    let horizon = n.horizon.unwrap_or(1.0);
    if !(horizon >= 0.0) {
        return Err(validation("numerics.horizon", "must be nonnegative"));
    }
    let numerics = ResolvedNumerics {
        grid_size,
        dt: n.dt,
        h_ode: n.h_ode,
        horizon,
        v_max: n.v_max,
        nv: n.nv,
        tracer: n.tracer,
        picard_tol: n.picard_tol.unwrap_or(1e-10),
        picard_max: n.picard_max.unwrap_or(50),
        portrait_nx: n.portrait_nx.unwrap_or(200),
        portrait_nv: n.portrait_nv.unwrap_or(200),
        egc_samples: n.egc_samples.unwrap_or(1000),
    };
    let scale = raw.initial.scale.unwrap_or(1.0);
    if !scale.is_finite() {
        return Err(validation("initial.scale", "must be finite"));
    }
    let initial = InitialDatum {
        bumps: raw.initial.bumps,
    }
    .scaled(scale);
    let io = ResolvedIo {
        output_dir: raw
            .io
            .output_dir
            .unwrap_or_else(|| PathBuf::from(format!("runs/{}", raw.mode.name()))),
        snapshot_times: raw.io.snapshot_times,
        plots: raw.io.plots.unwrap_or(true),
    };
    let g = &raw.gronwall;
    let gronwall = ResolvedGronwall {
        alpha: g.alpha.unwrap_or(0.5),
        window: positive("gronwall.window", g.window.unwrap_or(1.0))?,
        horizon: g.horizon.unwrap_or(10.0),
        dt: positive("gronwall.dt", g.dt.unwrap_or(0.01))?,
        start: g.start.unwrap_or(GronwallStart::Constant),
    };
    let scan = ResolvedScan {
        r_values: if raw.scan.r_values.is_empty() {
            vec![r]
        } else {
            raw.scan.r_values
        },
        lambda_values: if raw.scan.lambda_values.is_empty() {
            vec![raw.lambda]
        } else {
            raw.scan.lambda_values
        },
    };
    Ok(RunConfig {
        mode: raw.mode,
        lambda: raw.lambda,
        phi_b: raw.phi_b,
        r,
        seed: raw.seed.unwrap_or(0),
        electrons,
        profile,
        numerics,
        initial,
        io,
        gronwall,
        scan,
    })
}

impl RunConfig {
    pub fn electron_model(&self) -> Result<ElectronModel, CliError> {
        Ok(match &self.electrons {
            ElectronSpec::Boltzmann { n0 } => ElectronModel::boltzmann(n0.unwrap_or(1.0))?,
            ElectronSpec::Tabulated { path } => ElectronModel::from_csv(path)?,
        })
    }

    pub fn injection_profile(&self) -> Result<InjectionProfile, CliError> {
        let p = &self.profile;
        let shape = match p.shape {
            ShapeSpec::Zero => return Ok(InjectionProfile::Zero),
            ShapeSpec::Bump => ProfileShape::Bump,
            ShapeSpec::Quartic => ProfileShape::Quartic,
        };
        Ok(InjectionProfile::with_mass(shape, p.center, p.half_width, p.mass)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("resolved config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_file_fills_defaults() {
        let cfg = parse_config("mode = \"equilibrium\"\nlambda = 0.1\nphi_b = -1.0\n", Path::new(".")).unwrap();
        assert_eq!(cfg.numerics.grid_size, 320);
        assert_eq!(cfg.electrons, ElectronSpec::Boltzmann { n0: Some(1.0) });
        assert_eq!(cfg.profile, ProfileSpec::default());
        let back: RunConfig = toml::from_str(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn positive_wall_potential_is_rejected() {
        let err = parse_config("mode = \"equilibrium\"\nlambda = 0.1\nphi_b = 1.0\n", Path::new(".")).unwrap_err();
        assert!(matches!(err, CliError::Validation { field: "phi_b", .. }), "{err}");
        assert!(err.to_string().contains("phi_b must be negative"));
    }

    #[test]
    fn malformed_toml_reports_line() {
        let err = parse_config("mode = \"equilibrium\"\nlambda = = 0.1\n", Path::new(".")).unwrap_err();
        match err {
            CliError::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("{other}"),
        }
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = parse_config(
            "mode = \"equilibrium\"\nlambda = 0.1\nphi_b = -1.0\n[numerics]\ngrid = 5\n",
            Path::new("."),
        )
        .unwrap_err();
        match err {
            CliError::Parse { line, key, .. } => {
                assert_eq!(line, 5);
                assert_eq!(key, "grid");
            }
            other => panic!("{other}"),
        }
    }
}
