use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use unravel_core::hilbert::{self, basis, destroy, identity, number, sigma_x, sigma_y, sigma_z, tensor, tensor_ket};
use unravel_core::histories::{Backend, HISTORY_CAP};
use unravel_core::lindblad::SplitLindbladModel;
use unravel_core::photodetect::{adiabatic_model, cavity_model, emergent_rate, intermediate_model, reference, total_model, DetectorParams};
use unravel_core::unravel::{Engine, JumpTiming};
use unravel_core::{Ket, LindbladModel, Operator, C64};

#[derive(Debug, thiserror::Error)]
#[error("config field `{field}`: {message}")]
pub struct ConfigError {
    pub field: String,
    pub message: String,
}

fn bad(field: &str, message: impl Into<String>) -> ConfigError {
    ConfigError { field: field.into(), message: message.into() }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    /// Two-level (or truncated oscillator) emitter with a single decay channel.
    Cavity,
    /// System coupled to a detector mode with Gamma1 damping and Gamma2 dephasing.
    Total,
    /// System x mode with emission and absorption channels, Gamma2 eliminated.
    Intermediate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum InitialState {
    Named(String),
    Amplitudes { re: Vec<f64>, im: Vec<f64> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Scenario {
    pub model: ModelKind,
    pub sys_dim: usize,
    pub mode_dim: usize,
    pub kappa: f64,
    pub gamma1: f64,
    pub gamma2: f64,
    /// Emission rate; defaults to 4 kappa^2 / gamma2.
    pub gamma: Option<f64>,
    /// H0 = omega a^dag a + drive (a + a^dag) on the system.
    pub omega: f64,
    pub drive: f64,
    pub reabsorption: bool,
    pub initial: InitialState,
}

impl Default for Scenario {
    fn default() -> Self {
        Self {
            model: ModelKind::Cavity,
            sys_dim: reference::SYS_DIM,
            mode_dim: reference::MODE_DIM,
            kappa: reference::KAPPA,
            gamma1: reference::GAMMA1,
            gamma2: reference::GAMMA2,
            gamma: None,
            omega: 0.0,
            drive: 0.0,
            reabsorption: false,
            initial: InitialState::Named("excited".into()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HistoryConfig {
    pub n: usize,
    pub delta_t: f64,
    pub m: usize,
    pub pruning: f64,
    pub pt: bool,
    pub off_diagonal: bool,
}

impl Default for HistoryConfig {
    fn default() -> Self {
        Self {
            n: reference::N_PROJECTIONS,
            delta_t: reference::DELTA_T,
            m: reference::COARSE_M,
            pruning: 0.0,
            pt: false,
            off_diagonal: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub scenario: Scenario,
    pub engine: String,
    pub dt: f64,
    pub t_final: f64,
    pub output_times: Option<Vec<f64>>,
    pub n_outputs: usize,
    pub n_traj: usize,
    pub master_seed: u64,
    pub timing: JumpTiming,
    pub history: HistoryConfig,
    pub backend: String,
    pub oracle: bool,
    pub observables: Vec<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            scenario: Scenario::default(),
            engine: "jumps".into(),
            dt: reference::DT,
            t_final: 20.0,
            output_times: None,
            n_outputs: 21,
            n_traj: 1,
            master_seed: 0,
            timing: JumpTiming::Bernoulli,
            history: HistoryConfig::default(),
            backend: "exact".into(),
            oracle: false,
            observables: Vec::new(),
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub engine: Option<String>,
    pub backend: Option<String>,
}

pub fn load(path: Option<&Path>, overrides: &Overrides) -> Result<RunConfig, ConfigError> {
    let mut cfg = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| bad("--config", format!("{}: {e}", p.display())))?;
            let de = &mut serde_json::Deserializer::from_str(&text);
            serde_path_to_error::deserialize(de).map_err(|e| {
                let field = e.path().to_string();
                bad(if field == "." { "<root>" } else { &field }, e.into_inner().to_string())
            })?
        }
        None => RunConfig::default(),
    };
    if let Some(s) = overrides.seed {
        cfg.master_seed = s;
    }
    if let Some(e) = &overrides.engine {
        cfg.engine = e.clone();
    }
    if let Some(b) = &overrides.backend {
        cfg.backend = b.clone();
    }
    Ok(cfg)
}

fn positive(field: &str, v: f64) -> Result<(), ConfigError> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(bad(field, format!("must be positive and finite, got {v}")))
    }
}

fn non_negative(field: &str, v: f64) -> Result<(), ConfigError> {
    if v >= 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(bad(field, format!("must be non-negative and finite, got {v}")))
    }
}

impl RunConfig {
    pub fn engine(&self) -> Result<Engine, ConfigError> {
        self.engine.parse().map_err(|e: unravel_core::Error| bad("engine", e.to_string()))
    }

    pub fn backend(&self) -> Result<Backend, ConfigError> {
        self.backend.parse().map_err(|e: unravel_core::Error| bad("backend", e.to_string()))
    }

    pub fn validate_common(&self) -> Result<(), ConfigError> {
        let s = &self.scenario;
        if s.sys_dim < 2 {
            return Err(bad("scenario.sys_dim", "must be at least 2"));
        }
        if s.mode_dim < 2 {
            return Err(bad("scenario.mode_dim", "must be at least 2"));
        }
        non_negative("scenario.kappa", s.kappa)?;
        non_negative("scenario.gamma1", s.gamma1)?;
        positive("scenario.gamma2", s.gamma2)?;
        if let Some(g) = s.gamma {
            non_negative("scenario.gamma", g)?;
        }
        if !s.omega.is_finite() {
            return Err(bad("scenario.omega", "must be finite"));
        }
        if !s.drive.is_finite() {
            return Err(bad("scenario.drive", "must be finite"));
        }
        if s.model == ModelKind::Intermediate && s.sys_dim != 2 && s.reabsorption {
            return Err(bad("scenario.reabsorption", "needs a two-level system"));
        }
        self.initial_system_ket()?;
        self.backend()?;
        for o in &self.observables {
            observable(o, s.sys_dim).ok_or_else(|| bad("observables", format!("unknown observable '{o}'")))?;
        }
        Ok(())
    }

    pub fn validate_time_grid(&self) -> Result<Vec<f64>, ConfigError> {
        positive("dt", self.dt)?;
        non_negative("t_final", self.t_final)?;
        let times = match &self.output_times {
            Some(t) => {
                if t.is_empty() {
                    return Err(bad("output_times", "must not be empty"));
                }
                let mut prev = 0.0;
                for &x in t {
                    non_negative("output_times", x)?;
                    if x < prev {
                        return Err(bad("output_times", "must be non-decreasing"));
                    }
                    let k = (x / self.dt).round();
                    if (k * self.dt - x).abs() > 1e-9 * x.max(1.0) {
                        return Err(bad("output_times", format!("{x} is not a multiple of dt")));
                    }
                    prev = x;
                }
                t.clone()
            }
            None => {
                if self.n_outputs < 2 {
                    return Err(bad("n_outputs", "must be at least 2"));
                }
                let steps = (self.t_final / self.dt).round() as usize;
                let every = steps / (self.n_outputs - 1);
                if every == 0 || every * (self.n_outputs - 1) != steps {
                    return Err(bad("n_outputs", "n_outputs - 1 must divide t_final / dt"));
                }
                (0..self.n_outputs).map(|k| (k * every) as f64 * self.dt).collect()
            }
        };
        Ok(times)
    }

    pub fn validate_ensemble(&self) -> Result<(), ConfigError> {
        if self.n_traj == 0 {
            return Err(bad("n_traj", "must be at least 1"));
        }
        self.engine()?;
        Ok(())
    }

    pub fn validate_history(&self) -> Result<(), ConfigError> {
        let h = &self.history;
        if h.n == 0 || h.n > HISTORY_CAP {
            return Err(bad("history.n", format!("must be between 1 and {HISTORY_CAP}, got {}", h.n)));
        }
        positive("history.delta_t", h.delta_t)?;
        if h.m == 0 {
            return Err(bad("history.m", "must be at least 1"));
        }
        non_negative("history.pruning", h.pruning)?;
        if self.scenario.model != ModelKind::Total {
            return Err(bad("scenario.model", "history commands need the total model"));
        }
        Ok(())
    }

    pub fn gamma(&self) -> f64 {
        self.scenario.gamma.unwrap_or_else(|| emergent_rate(self.scenario.kappa, self.scenario.gamma2))
    }

    pub fn h0(&self) -> Operator {
        let d = self.scenario.sys_dim;
        let a = destroy(d);
        number(d) * C64::new(self.scenario.omega, 0.0) + (&a + a.adjoint()) * C64::new(self.scenario.drive, 0.0)
    }

    /// Characteristic system frequency used by the coarse-graining check.
    pub fn omega_scale(&self) -> f64 {
        self.scenario.omega.abs() + 2.0 * self.scenario.drive.abs()
    }

    pub fn detector_params(&self) -> DetectorParams {
        DetectorParams {
            kappa: self.scenario.kappa,
            gamma1: self.scenario.gamma1,
            gamma2: self.scenario.gamma2,
            ..DetectorParams::reference()
        }
    }

    pub fn initial_system_ket(&self) -> Result<Ket, ConfigError> {
        let d = self.scenario.sys_dim;
        let psi = match &self.scenario.initial {
            InitialState::Named(n) => match n.as_str() {
                "excited" => basis(d, 1),
                "ground" => basis(d, 0),
                "plus" => (basis(d, 0) + basis(d, 1)) * C64::new(std::f64::consts::FRAC_1_SQRT_2, 0.0),
                _ => return Err(bad("scenario.initial", format!("unknown state '{n}' (excited, ground, plus or amplitudes)"))),
            },
            InitialState::Amplitudes { re, im } => {
                if re.len() != d || im.len() != d {
                    return Err(bad("scenario.initial", format!("needs {d} real and {d} imaginary amplitudes")));
                }
                Ket::from_iterator(d, re.iter().zip(im).map(|(r, i)| C64::new(*r, *i)))
            }
        };
        let n = psi.norm_squared();
        if (n - 1.0).abs() > 1e-10 {
            return Err(bad("scenario.initial", format!("state must be normalized, squared norm {n}")));
        }
        Ok(psi)
    }

    /// Model used by evolve, traj and ensemble, with the matching initial ket.
    pub fn dynamics(&self) -> Result<(LindbladModel, Ket), unravel_core::Error> {
        let s = &self.scenario;
        let psi = self.initial_system_ket().map_err(|e| unravel_core::Error::InvalidArgument(e.to_string()))?;
        match s.model {
            ModelKind::Cavity => Ok((cavity_model(&self.h0(), self.gamma(), s.sys_dim)?, psi)),
            ModelKind::Total => {
                let m = total_model(&self.h0(), &self.detector_params(), s.mode_dim)?;
                Ok((m.full_model(), tensor_ket(&psi, &basis(s.mode_dim, 0))))
            }
            ModelKind::Intermediate => {
                let m = intermediate_model(&self.h0(), self.gamma(), s.gamma1, s.reabsorption)?;
                Ok((m, tensor_ket(&psi, &basis(2, 0))))
            }
        }
    }

    pub fn split_model(&self) -> Result<SplitLindbladModel, unravel_core::Error> {
        total_model(&self.h0(), &self.detector_params(), self.scenario.mode_dim)
    }

    pub fn reduced_model(&self) -> Result<LindbladModel, unravel_core::Error> {
        adiabatic_model(&self.h0(), self.gamma(), self.scenario.sys_dim)
    }
}

/// System observable by name, or None.
pub fn observable(name: &str, d: usize) -> Option<Operator> {
    match name {
        "n" => Some(number(d)),
        "a" => Some(destroy(d)),
        "sigma_x" if d == 2 => Some(sigma_x()),
        "sigma_y" if d == 2 => Some(sigma_y()),
        "sigma_z" if d == 2 => Some(sigma_z()),
        _ => None,
    }
}

/// Lifts a system operator to the model's space.
pub fn lift(op: &Operator, model: &LindbladModel) -> Operator {
    let dims = model.space().factor_dims();
    if dims.len() == 2 {
        tensor(op, &identity(dims[1]))
    } else {
        op.clone()
    }
}

pub fn out_path(out: &Option<PathBuf>, suffix: &str) -> Option<PathBuf> {
    out.as_ref().map(|p| {
        let mut s = p.clone().into_os_string();
        s.push(suffix);
        PathBuf::from(s)
    })
}

pub fn hermitian_part(x: &Operator) -> Operator {
    (x + x.adjoint()) * C64::new(0.5, 0.0)
}

pub fn min_eig(x: &Operator) -> f64 {
    hilbert::min_eigenvalue(&hermitian_part(x)).unwrap_or(f64::NAN)
}
