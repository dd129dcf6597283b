//! Model constructors for a system coupled to a continuously monitored
//! detector mode, plus the rate algebra linking them.

use std::f64::consts::FRAC_PI_2;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hilbert::{
    basis, dagger, destroy, expect, herm_eig, identity, number, tensor, tensor_ket, CompositeSpace, Ket, Operator,
    C64,
};
use crate::lindblad::{LindbladModel, SplitLindbladModel};

/// Shared reference scenario: two-level system, H0 = 0.
pub mod reference {
    pub const KAPPA: f64 = 1.0;
    pub const GAMMA1: f64 = 10.0;
    pub const GAMMA2: f64 = 100.0;
    pub const DT: f64 = 1e-3;
    pub const DELTA_T: f64 = 0.1;
    pub const N_PROJECTIONS: usize = 10;
    pub const COARSE_M: usize = 5;
    pub const SYS_DIM: usize = 2;
    pub const MODE_DIM: usize = 2;
    pub const THRESHOLD: f64 = 10.0;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorParams {
    #[serde(default)]
    pub lambda: Option<f64>,
    #[serde(default)]
    pub tau: Option<f64>,
    pub gamma1: f64,
    pub gamma2: f64,
    pub kappa: f64,
    #[serde(default)]
    pub omega_det: Option<f64>,
}

impl DetectorParams {
    pub fn reference() -> Self {
        Self {
            lambda: None,
            tau: None,
            gamma1: reference::GAMMA1,
            gamma2: reference::GAMMA2,
            kappa: reference::KAPPA,
            omega_det: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("gamma1", self.gamma1), ("gamma2", self.gamma2), ("kappa", self.kappa)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::InvalidArgument(format!("{name} must be a finite non-negative rate, got {v}")));
            }
        }
        if self.gamma2 == 0.0 {
            return Err(Error::InvalidArgument("gamma2 must be positive".into()));
        }
        if let (Some(l), Some(t)) = (self.lambda, self.tau) {
            let g2 = decoherence_rate(l, t, 1.0)?;
            if (g2 - self.gamma2).abs() > 1e-9 * self.gamma2.max(1.0) {
                warn!("gamma2 = {} differs from -ln cos(lambda)/tau = {g2}", self.gamma2);
            }
        }
        Ok(())
    }

    /// Emergent emission rate 4 kappa^2 / Gamma2.
    pub fn gamma(&self) -> f64 {
        emergent_rate(self.kappa, self.gamma2)
    }
}

pub fn emergent_rate(kappa: f64, gamma2: f64) -> f64 {
    4.0 * kappa * kappa / gamma2
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HierarchyReport {
    pub gamma: f64,
    pub n_bar: f64,
    pub ratio21: f64,
    pub ratio1g: f64,
    pub omega: f64,
    pub threshold: f64,
    pub pass21: bool,
    pub pass1g: bool,
}

impl HierarchyReport {
    pub fn warnings(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !self.pass21 {
            out.push(format!(
                "Gamma2/Gamma1 = {:.3} below threshold {}",
                self.ratio21, self.threshold
            ));
        }
        if !self.pass1g {
            out.push(format!(
                "Gamma1/(gamma n) = {:.3} below threshold {}",
                self.ratio1g, self.threshold
            ));
        }
        out
    }
}

/// Decaying cavity or two-level emitter: single channel sqrt(gamma) a.
pub fn cavity_model(h0: &Operator, gamma: f64, dim: usize) -> Result<LindbladModel> {
    if dim < 2 {
        return Err(Error::InvalidArgument(format!("dim must be at least 2, got {dim}")));
    }
    check_rate("gamma", gamma)?;
    LindbladModel::new(
        h0.clone(),
        vec![destroy(dim) * C64::new(gamma.sqrt(), 0.0)],
        CompositeSpace::single(dim),
    )
}

/// Detector mode alone: sqrt(Gamma1) b and sqrt(Gamma2) b^dagger b.
pub fn detector_mode_model(gamma1: f64, gamma2: f64, dim: usize) -> Result<LindbladModel> {
    if dim < 2 {
        return Err(Error::InvalidArgument(format!("dim must be at least 2, got {dim}")));
    }
    check_rate("gamma1", gamma1)?;
    check_rate("gamma2", gamma2)?;
    LindbladModel::new(
        Operator::zeros(dim, dim),
        vec![
            destroy(dim) * C64::new(gamma1.sqrt(), 0.0),
            number(dim) * C64::new(gamma2.sqrt(), 0.0),
        ],
        CompositeSpace::single(dim),
    )
}

/// System (x) output mode with Hamiltonian coupling kappa (a^dagger b + a b^dagger).
pub fn total_model(h0: &Operator, params: &DetectorParams, mode_dim: usize) -> Result<SplitLindbladModel> {
    params.validate()?;
    let sys = h0.nrows();
    let a = destroy(sys);
    let b = destroy(mode_dim);
    let h = tensor(h0, &identity(mode_dim))
        + (tensor(&dagger(&a), &b) + tensor(&a, &dagger(&b))) * C64::new(params.kappa, 0.0);
    let l1 = tensor(&identity(sys), &b) * C64::new(params.gamma1.sqrt(), 0.0);
    let base = LindbladModel::new(h, vec![l1], CompositeSpace::pair(sys, mode_dim))?;
    if params.gamma1 > 0.0 && params.gamma2 / params.gamma1 < reference::THRESHOLD {
        warn!(
            "Gamma2/Gamma1 = {:.3} below threshold {}",
            params.gamma2 / params.gamma1,
            reference::THRESHOLD
        );
    }
    SplitLindbladModel::new(base, params.gamma2, mode_dim)
}

/// Emission, optional reabsorption and mode dissipation on system (x) two-level mode.
pub fn intermediate_model(h0: &Operator, gamma: f64, gamma1: f64, include_reabsorption: bool) -> Result<LindbladModel> {
    check_rate("gamma", gamma)?;
    check_rate("gamma1", gamma1)?;
    let sys = h0.nrows();
    let a = destroy(sys);
    let b = destroy(2);
    let g = C64::new(gamma.sqrt(), 0.0);
    let mut lindblads = vec![tensor(&a, &dagger(&b)) * g];
    if include_reabsorption {
        lindblads.push(tensor(&dagger(&a), &b) * g);
    }
    lindblads.push(tensor(&identity(sys), &b) * C64::new(gamma1.sqrt(), 0.0));
    LindbladModel::new(tensor(h0, &identity(2)), lindblads, CompositeSpace::pair(sys, 2))
}

/// System after eliminating the mode; same form as the cavity model.
///
/// Valid on time scales long compared to 1/Gamma1.
pub fn adiabatic_model(h0: &Operator, gamma: f64, dim: usize) -> Result<LindbladModel> {
    cavity_model(h0, gamma, dim)
}

/// Gamma2 = -ln cos(lambda dn) / tau.
pub fn decoherence_rate(lambda: f64, tau: f64, delta_n: f64) -> Result<f64> {
    if !(tau > 0.0) {
        return Err(Error::Domain(format!("tau must be positive, got {tau}")));
    }
    let x = (lambda * delta_n).abs();
    if !(x < FRAC_PI_2) {
        return Err(Error::Domain(format!("|lambda dn| = {x} must be below pi/2")));
    }
    Ok(-x.cos().ln() / tau)
}

/// Per-atom suppression cos(lambda (n - n')) of mode coherences.
pub fn atom_kick_factor(lambda: f64, n: u32, n_prime: u32) -> f64 {
    (lambda * (n as f64 - n_prime as f64)).cos()
}

/// Phase e^{-2 i lambda n} carried by an atom leaving a mode with n quanta.
pub fn outgoing_atom_phase(lambda: f64, n: u32) -> C64 {
    C64::new(0.0, -2.0 * lambda * n as f64).exp()
}

/// Checks Gamma2 >> Gamma1 >> gamma n_bar for a system state `psi0`.
pub fn validate_hierarchy(params: &DetectorParams, psi0: &Ket, h0: &Operator, threshold: f64) -> Result<HierarchyReport> {
    let sys = h0.nrows();
    if psi0.len() != sys {
        return Err(Error::DimensionMismatch(format!(
            "system ket has length {}, H0 has dim {sys}",
            psi0.len()
        )));
    }
    let gamma = params.gamma();
    let n_bar = expect(&number(sys), psi0).re / psi0.norm_squared();
    let ratio21 = if params.gamma1 > 0.0 { params.gamma2 / params.gamma1 } else { f64::INFINITY };
    let denom = gamma * n_bar;
    let ratio1g = if denom > 0.0 { params.gamma1 / denom } else { f64::INFINITY };
    let omega = herm_eig(h0)?
        .values
        .iter()
        .map(|v| v.abs())
        .fold(0.0, f64::max);
    Ok(HierarchyReport {
        gamma,
        n_bar,
        ratio21,
        ratio1g,
        omega,
        threshold,
        pass21: ratio21 >= threshold,
        pass1g: ratio1g >= threshold,
    })
}

fn check_rate(name: &str, v: f64) -> Result<()> {
    if !(v >= 0.0) || !v.is_finite() {
        return Err(Error::InvalidArgument(format!("{name} must be a finite non-negative rate, got {v}")));
    }
    Ok(())
}

/// Excited state |e> of a two-level system (index 1).
pub fn excited() -> Ket {
    basis(2, 1)
}

pub fn ground() -> Ket {
    basis(2, 0)
}

/// |psi> (x) |0> on system (x) mode.
pub fn with_empty_mode(psi: &Ket, mode_dim: usize) -> Ket {
    tensor_ket(psi, &basis(mode_dim, 0))
}

pub fn reference_total_model() -> Result<SplitLindbladModel> {
    total_model(&Operator::zeros(2, 2), &DetectorParams::reference(), reference::MODE_DIM)
}
