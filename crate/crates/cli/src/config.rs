use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use nmqsd_core::dynamics::{Mode, ShiftConvention};
use nmqsd_core::hilbert::{boson_operators, cat_state, coherent_state, fock_state, spin_operators, CompositeSpace, OperatorMatrix, StateVector};
use nmqsd_core::models::{by_name, CutParams, ModelSpec};
use nmqsd_core::noise::{CorrelationKernel, Sampler, TimeGrid};
use nmqsd_core::oracle::OracleMode;
use nmqsd_core::{Error, C64};
use serde::{Deserialize, Serialize};

/// A failure to read or validate a config, with the JSON path when known.
#[derive(Debug)]
pub struct ConfigError {
    pub path: String,
    pub message: String,
}

impl ConfigError {
    pub fn at(path: &str, message: impl Into<String>) -> Self {
        Self { path: path.into(), message: message.into() }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    #[serde(default)]
    pub kernel: Option<CorrelationKernel>,
    pub grid: GridConfig,
    #[serde(default = "default_mode")]
    pub mode: Mode,
    #[serde(default = "one")]
    pub n_traj: usize,
    #[serde(default)]
    pub master_seed: u64,
    #[serde(default)]
    pub initial_state: Option<InitialState>,
    #[serde(default)]
    pub observables: Vec<String>,
    #[serde(default)]
    pub output: Option<PathBuf>,
    #[serde(default)]
    pub flags: Flags,
    /// Record every n-th grid node.
    #[serde(default = "one")]
    pub record_every: usize,
    /// Number of single-trajectory CSVs to write (capped at `n_traj`).
    #[serde(default = "default_saved")]
    pub save_trajectories: usize,
    #[serde(default)]
    pub oracle: Option<OracleConfig>,
    #[serde(default)]
    pub noise_check: Option<NoiseCheckConfig>,
    #[serde(default)]
    pub qplot: Option<QplotConfig>,
    #[serde(default)]
    pub cut: Option<CutConfig>,
}

fn default_mode() -> Mode {
    Mode::Nonlinear
}

fn one() -> usize {
    1
}

fn default_saved() -> usize {
    8
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub name: String,
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
    /// Real-symmetric or complex Hermitian matrix, entries `[re, im]`, for
    /// `energy_measurement`.
    #[serde(default)]
    pub energy_h: Option<Vec<Vec<[f64; 2]>>>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub dt: f64,
    pub t_max: f64,
}

#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Flags {
    #[serde(default)]
    pub shift_convention: ShiftConvention,
    #[serde(default)]
    pub sampler_override: Option<Sampler>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialState {
    /// Amplitudes `[re, im]`, normalized on load.
    Amplitudes(Vec<[f64; 2]>),
    Fock(usize),
    Coherent([f64; 2]),
    Cat([f64; 2]),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleConfig {
    pub modes: Vec<OracleMode>,
    /// Ensemble CSV from `run` to compare against.
    #[serde(default)]
    pub compare_ensemble: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseCheckConfig {
    pub n_paths: usize,
    /// Kernel the statistics are compared with; defaults to the sampled one.
    #[serde(default)]
    pub expected_kernel: Option<CorrelationKernel>,
    #[serde(default = "five")]
    pub n_sigma: f64,
}

fn five() -> f64 {
    5.0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QplotConfig {
    #[serde(default)]
    pub times: Option<Vec<f64>>,
    /// Spacing of the default times, in units of `1/ω`.
    #[serde(default = "qplot_spacing")]
    pub spacing: f64,
    #[serde(default = "qplot_extent")]
    pub extent: f64,
    #[serde(default = "qplot_points")]
    pub points: usize,
}

fn qplot_spacing() -> f64 {
    2.27
}

fn qplot_extent() -> f64 {
    4.5
}

fn qplot_points() -> usize {
    121
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CutConfig {
    #[serde(default = "twenty")]
    pub n_paths: usize,
    #[serde(default = "cut_tolerance")]
    pub tolerance: f64,
}

fn twenty() -> usize {
    20
}

fn cut_tolerance() -> f64 {
    1e-6
}

/// Command-line overrides applied after parsing.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub trajectories: Option<usize>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub dt: Option<f64>,
    pub tmax: Option<f64>,
    pub shift_convention: Option<ShiftConvention>,
}

pub fn load(path: &Path) -> Result<RunConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|e| ConfigError::at("", format!("cannot read {}: {e}", path.display())))?;
    parse(&text)
}

pub fn parse(text: &str) -> Result<RunConfig, ConfigError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| ConfigError::at(&e.path().to_string(), e.inner().to_string()))
}

impl RunConfig {
    pub fn apply(&mut self, o: &Overrides) {
        if let Some(n) = o.trajectories {
            self.n_traj = n;
            self.save_trajectories = n;
        }
        if let Some(s) = o.seed {
            self.master_seed = s;
        }
        if let Some(p) = &o.out {
            self.output = Some(p.clone());
        }
        if let Some(dt) = o.dt {
            self.grid.dt = dt;
        }
        if let Some(t) = o.tmax {
            self.grid.t_max = t;
        }
        if let Some(c) = o.shift_convention {
            self.flags.shift_convention = c;
        }
    }

    pub fn time_grid(&self) -> Result<TimeGrid, ConfigError> {
        let GridConfig { dt, t_max } = self.grid;
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(ConfigError::at("grid.dt", format!("must be positive, got {dt}")));
        }
        if !(t_max > 0.0 && t_max.is_finite()) {
            return Err(ConfigError::at("grid.t_max", format!("must be positive, got {t_max}")));
        }
        TimeGrid::from_tmax(dt, t_max).map_err(|e| ConfigError::at("grid", e.to_string()))
    }

    pub fn model(&self) -> Result<ModelSpec, ConfigError> {
        let h = match &self.model.energy_h {
            None => None,
            Some(rows) => {
                let n = rows.len();
                if n == 0 || rows.iter().any(|r| r.len() != n) {
                    return Err(ConfigError::at("model.energy_h", "must be a non-empty square matrix"));
                }
                if rows.iter().flatten().any(|v| !v[0].is_finite() || !v[1].is_finite()) {
                    return Err(ConfigError::at("model.energy_h", "entries must be finite"));
                }
                let m = OperatorMatrix::from_fn(n, |r, c| C64::new(rows[r][c][0], rows[r][c][1]));
                Some(m.into_hermitian().map_err(|e| ConfigError::at("model.energy_h", e.to_string()))?)
            }
        };
        by_name(&self.model.name, &self.model.params, h).map_err(|e| ConfigError::at("model", e.to_string()))
    }

    pub fn kernel(&self, model: &ModelSpec) -> Result<CorrelationKernel, ConfigError> {
        let k = self.kernel.clone().ok_or_else(|| ConfigError::at("kernel", "missing field `kernel`"))?;
        k.validate().map_err(|e| ConfigError::at("kernel", e.to_string()))?;
        model.check_kernel(&k).map_err(|e| ConfigError::at("kernel", e.to_string()))?;
        Ok(k)
    }

    pub fn psi0(&self, model: &ModelSpec) -> Result<StateVector, ConfigError> {
        let dim = model.dim();
        let err = |e: Error| ConfigError::at("initial_state", e.to_string());
        let osc_dim = || model.n_trunc.filter(|n| *n == dim).ok_or_else(|| ConfigError::at("initial_state", format!("model {} is not a single oscillator", model.name)));
        let psi = match &self.initial_state {
            None => StateVector::basis(dim, 0),
            Some(InitialState::Amplitudes(a)) => {
                if a.len() != dim {
                    return Err(ConfigError::at("initial_state.amplitudes", format!("expected {dim} amplitudes, got {}", a.len())));
                }
                StateVector::new(a.iter().map(|v| C64::new(v[0], v[1])).collect()).and_then(|s| s.normalized()).map_err(err)?
            }
            Some(InitialState::Fock(n)) => fock_state(*n, osc_dim()?).map_err(err)?,
            Some(InitialState::Coherent(b)) => coherent_state(C64::new(b[0], b[1]), osc_dim()?).map_err(err)?,
            Some(InitialState::Cat(b)) => cat_state(C64::new(b[0], b[1]), osc_dim()?).map_err(err)?,
        };
        Ok(psi)
    }

    /// Observables by name: `sx sy sz sp sm` on spin factors, `q p n a` on oscillator factors.
    pub fn observables(&self, model: &ModelSpec) -> Result<Vec<(String, OperatorMatrix)>, ConfigError> {
        self.observables.iter().enumerate().map(|(i, name)| Ok((name.clone(), observable(model, name).map_err(|m| ConfigError::at(&format!("observables[{i}]"), m))?))).collect()
    }

    pub fn resolved_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}

fn observable(model: &ModelSpec, name: &str) -> Result<OperatorMatrix, String> {
    let spin = |n: &str| {
        let s = spin_operators();
        match n {
            "sx" => Some(s.sx),
            "sy" => Some(s.sy),
            "sz" => Some(s.sz),
            "sp" => Some(s.sp),
            "sm" => Some(s.sm),
            _ => None,
        }
    };
    let boson = |n: &str, d: usize| -> Option<OperatorMatrix> {
        let b = boson_operators(d).ok()?;
        match n {
            "q" => Some(b.q),
            "p" => Some(b.p),
            "n" => Some(b.n),
            "a" => Some(b.a),
            _ => None,
        }
    };
    let dim = model.dim();
    let op = match (model.n_trunc, dim) {
        (None, 2) => spin(name),
        (Some(n), d) if n == d => boson(name, n),
        (Some(n), d) if d == 2 * n => {
            let space = CompositeSpace::new(vec![2, n]).map_err(|e| e.to_string())?;
            match (spin(name), boson(name, n)) {
                (Some(s), _) => space.embed(&s, 0).ok(),
                (_, Some(b)) => space.embed(&b, 1).ok(),
                _ => None,
            }
        }
        _ => None,
    };
    op.ok_or_else(|| format!("unknown observable '{name}' for model {}", model.name))
}

/// Pair parameters from a `cut_spin` or `cut_spin_oscillator` model.
pub fn cut_params(model: &ModelSpec) -> Result<CutParams, ConfigError> {
    let get = |k: &str| model.param(k).ok_or_else(|| ConfigError::at("model.name", format!("model {} has no parameter {k}; cut-check needs cut_spin", model.name)));
    Ok(CutParams { omega1: get("omega1")?, omega2: get("omega2")?, lambda: get("lambda")?, chi: get("chi")? })
}
