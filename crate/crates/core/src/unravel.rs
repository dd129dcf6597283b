//! Stochastic unravelings of the master equation and a seeded ensemble runner.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use log::{debug, warn};
use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hilbert::{self, herm_eig, Ket, Operator, C64, ZERO};
use crate::lindblad::LindbladModel;
use crate::rng::trajectory_rng;

const RESCALE_LOW: f64 = 1e-150;
const RESCALE_HIGH: f64 = 1e150;
const CHUNK: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Engine {
    Jumps,
    JumpsLinear,
    Qsd,
    QsdLinear,
    Ortho,
}

impl Engine {
    pub const ALL: [Engine; 5] = [Engine::Jumps, Engine::JumpsLinear, Engine::Qsd, Engine::QsdLinear, Engine::Ortho];

    pub fn name(self) -> &'static str {
        match self {
            Engine::Jumps => "jumps",
            Engine::JumpsLinear => "jumps-linear",
            Engine::Qsd => "qsd",
            Engine::QsdLinear => "qsd-linear",
            Engine::Ortho => "ortho",
        }
    }

    pub fn is_linear(self) -> bool {
        matches!(self, Engine::JumpsLinear | Engine::QsdLinear)
    }

    pub fn is_diffusive(self) -> bool {
        matches!(self, Engine::Qsd | Engine::QsdLinear)
    }
}

impl fmt::Display for Engine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Engine {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Engine::ALL
            .into_iter()
            .find(|e| e.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown engine '{s}' (expected jumps, jumps-linear, qsd, qsd-linear or ortho)")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JumpKind {
    Jump,
    Up,
    Down,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct JumpEvent {
    pub time: f64,
    pub channel: usize,
    pub kind: JumpKind,
}

/// How the linear jump engine decides when to jump.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum JumpTiming {
    /// Per-step draw with probability <L^dagger L> dt.
    #[default]
    Bernoulli,
    /// Evolve unnormalized until the squared norm crosses a uniform draw.
    WaitingTime,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub engine: Engine,
    pub seed: u64,
    pub index: u64,
    pub dt: f64,
    pub times: Vec<f64>,
    pub kets: Vec<Ket>,
    pub events: Vec<JumpEvent>,
    /// Squared norm of the final ket for linear engines, 1 otherwise.
    pub weight: f64,
    /// Natural log of the accumulated rescaling of the stored kets.
    pub log_scale: f64,
}

#[derive(Serialize)]
struct JsonLine<'a> {
    t: f64,
    kind: &'a str,
    channel: Option<usize>,
    re: Vec<f64>,
    im: Vec<f64>,
}

#[derive(Serialize)]
struct JsonHeader<'a> {
    kind: &'a str,
    engine: &'a str,
    seed: u64,
    index: u64,
    dt: f64,
    weight: f64,
    log_scale: f64,
    rng: &'a str,
}

impl TrajectoryRecord {
    /// One JSON object per line: a header, then snapshots and events in time order.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let header = JsonHeader {
            kind: "header",
            engine: self.engine.name(),
            seed: self.seed,
            index: self.index,
            dt: self.dt,
            weight: self.weight,
            log_scale: self.log_scale,
            rng: crate::rng::RNG_NAME,
        };
        serde_json::to_writer(&mut w, &header)?;
        writeln!(w)?;
        let mut ev = self.events.iter().peekable();
        for (t, k) in self.times.iter().zip(&self.kets) {
            while let Some(e) = ev.next_if(|e| e.time <= *t) {
                write_event(&mut w, e)?;
            }
            let line = JsonLine {
                t: *t,
                kind: "snapshot",
                channel: None,
                re: k.iter().map(|z| z.re).collect(),
                im: k.iter().map(|z| z.im).collect(),
            };
            serde_json::to_writer(&mut w, &line)?;
            writeln!(w)?;
        }
        for e in ev {
            write_event(&mut w, e)?;
        }
        Ok(())
    }
}

fn write_event<W: Write>(w: &mut W, e: &JumpEvent) -> std::io::Result<()> {
    let kind = match e.kind {
        JumpKind::Jump => "jump",
        JumpKind::Up => "up",
        JumpKind::Down => "down",
    };
    let line = JsonLine { t: e.time, kind, channel: Some(e.channel), re: vec![], im: vec![] };
    serde_json::to_writer(&mut *w, &line)?;
    writeln!(w)
}

/// Complex Wiener increments, real and imaginary parts each N(0, dt/2).
pub struct NoiseStream {
    seed: u64,
    channels: usize,
    dt: f64,
    rng: ChaCha8Rng,
}

impl NoiseStream {
    pub fn new(seed: u64, channels: usize, dt: f64) -> Self {
        Self::from_rng(seed, trajectory_rng(seed, 0), channels, dt)
    }

    pub fn from_rng(seed: u64, rng: ChaCha8Rng, channels: usize, dt: f64) -> Self {
        Self { seed, channels, dt, rng }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn fill(&mut self, out: &mut [C64]) {
        let s = (0.5 * self.dt).sqrt();
        for z in out.iter_mut() {
            let re: f64 = StandardNormal.sample(&mut self.rng);
            let im: f64 = StandardNormal.sample(&mut self.rng);
            *z = C64::new(s * re, s * im);
        }
    }

    pub fn next_increments(&mut self) -> Vec<C64> {
        let mut v = vec![ZERO; self.channels];
        self.fill(&mut v);
        v
    }
}

#[derive(Clone, Debug)]
pub struct OrthoJumpBasis {
    pub states: Vec<Ket>,
    pub rates: Vec<f64>,
}

impl OrthoJumpBasis {
    pub fn total_rate(&self) -> f64 {
        self.rates.iter().sum()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }
}

/// Result of a single stochastic step.
#[derive(Clone, Debug)]
pub struct StepOutcome {
    pub psi: Ket,
    pub jump: Option<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EnsembleStats {
    pub engine: Engine,
    pub n_traj: usize,
    pub master_seed: u64,
    pub times: Vec<f64>,
    pub mean: Vec<Operator>,
    pub stderr: Vec<DMatrix<f64>>,
    /// Mean squared norm of the raw kets at each output time.
    pub mean_weight: Vec<f64>,
    /// True when the mean is the raw weighted average (linear QSD).
    pub weighted_estimator: bool,
    /// Mean and standard error of each requested observable, per output time.
    pub observable_mean: Vec<Vec<C64>>,
    pub observable_stderr: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, Default)]
pub struct EnsembleOptions {
    pub workers: Option<usize>,
    pub timing: JumpTiming,
    pub observables: Vec<Operator>,
}

/// Per-model operators precomputed for a fixed step size.
struct Kernel {
    dim: usize,
    dt: f64,
    h: Operator,
    drift: Operator,
    ls: Vec<Operator>,
    decay: Operator,
    prop: Option<Operator>,
    mode_dim: Option<usize>,
}

impl Kernel {
    fn new(model: &LindbladModel, dt: f64, with_prop: bool) -> Result<Self> {
        if !(dt > 0.0) || !dt.is_finite() {
            return Err(Error::StepSize(format!("dt must be positive, got {dt}")));
        }
        let h_eff = model.h_eff();
        let prop = if with_prop {
            Some(hilbert::expm(&(&h_eff * C64::new(0.0, -dt)))?)
        } else {
            None
        };
        let dims = model.space().factor_dims();
        Ok(Self {
            dim: model.dim(),
            dt,
            h: model.hamiltonian().clone(),
            drift: &h_eff * C64::new(0.0, -1.0),
            ls: model.lindblads().to_vec(),
            decay: model.decay_operator(),
            prop,
            mode_dim: if dims.len() == 2 { Some(dims[1]) } else { None },
        })
    }

    fn mode_occupation(&self, psi: &[C64]) -> f64 {
        let md = match self.mode_dim {
            Some(m) => m,
            None => return 0.0,
        };
        let n: f64 = psi.iter().map(|z| z.norm_sqr()).sum();
        let s: f64 = psi
            .iter()
            .enumerate()
            .map(|(i, z)| (i % md) as f64 * z.norm_sqr())
            .sum();
        s / n
    }

    fn classify(&self, before: &[C64], after: &[C64]) -> JumpKind {
        if self.mode_dim.is_none() {
            return JumpKind::Jump;
        }
        let d = self.mode_occupation(after) - self.mode_occupation(before);
        if d > 0.5 {
            JumpKind::Up
        } else if d < -0.5 {
            JumpKind::Down
        } else {
            JumpKind::Jump
        }
    }
}

#[inline]
fn matvec(m: &Operator, x: &[C64], y: &mut [C64]) {
    let n = x.len();
    let data = m.as_slice();
    y.iter_mut().for_each(|v| *v = ZERO);
    for (j, &xj) in x.iter().enumerate() {
        if xj == ZERO {
            continue;
        }
        let col = &data[j * n..(j + 1) * n];
        for (yi, &c) in y.iter_mut().zip(col) {
            *yi += c * xj;
        }
    }
}

#[inline]
fn dotc(a: &[C64], b: &[C64]) -> C64 {
    a.iter().zip(b).fold(ZERO, |acc, (x, y)| acc + x.conj() * y)
}

#[inline]
fn norm_sqr(a: &[C64]) -> f64 {
    a.iter().map(|z| z.norm_sqr()).sum()
}

#[inline]
fn scale(a: &mut [C64], s: f64) {
    a.iter_mut().for_each(|z| *z *= s);
}

/// Mutable per-trajectory state with scratch buffers.
struct Walker<'a> {
    k: &'a Kernel,
    psi: Vec<C64>,
    next: Vec<C64>,
    tmp: Vec<C64>,
    lpsi: Vec<Vec<C64>>,
    rates: Vec<f64>,
    noise: Vec<C64>,
    log_scale: f64,
    events: Vec<JumpEvent>,
    threshold: f64,
    warned: bool,
}

impl<'a> Walker<'a> {
    fn new(k: &'a Kernel, psi0: &[C64]) -> Self {
        let d = k.dim;
        let m = k.ls.len();
        Self {
            k,
            psi: psi0.to_vec(),
            next: vec![ZERO; d],
            tmp: vec![ZERO; d],
            lpsi: vec![vec![ZERO; d]; m],
            rates: vec![0.0; m],
            noise: vec![ZERO; m],
            log_scale: 0.0,
            events: Vec::new(),
            threshold: 0.0,
            warned: false,
        }
    }

    fn apply_lindblads(&mut self) -> f64 {
        let mut total = 0.0;
        for (m, l) in self.k.ls.iter().enumerate() {
            matvec(l, &self.psi, &mut self.lpsi[m]);
            let r = norm_sqr(&self.lpsi[m]);
            self.rates[m] = r;
            total += r;
        }
        total
    }

    fn pick(&self, total: f64, u: f64) -> usize {
        let mut acc = 0.0;
        let target = u * total;
        let mut last = 0;
        for (m, r) in self.rates.iter().enumerate() {
            if *r > 0.0 {
                last = m;
                acc += r;
                if target < acc {
                    return m;
                }
            }
        }
        last
    }

    fn rescale(&mut self) {
        let n = norm_sqr(&self.psi);
        if !(RESCALE_LOW..=RESCALE_HIGH).contains(&n) {
            if n == 0.0 {
                return;
            }
            debug!("rescaling unnormalized ket with squared norm {n:.3e}");
            self.log_scale += n.ln();
            scale(&mut self.psi, 1.0 / n.sqrt());
            self.threshold /= n;
        }
    }

    fn normalize(&mut self) {
        let n = norm_sqr(&self.psi).sqrt();
        if n > 0.0 {
            scale(&mut self.psi, 1.0 / n);
        }
    }

    fn record_jump(&mut self, t: f64, channel: usize, before: &[C64]) {
        let kind = self.k.classify(before, &self.psi);
        if let Some(last) = self.events.last() {
            debug_assert!(t > last.time);
        }
        self.events.push(JumpEvent { time: t, channel, kind });
    }

    fn step_linear_jump(&mut self, t: f64, u: f64) {
        let n = norm_sqr(&self.psi);
        let total = self.apply_lindblads();
        let p = total / n * self.k.dt;
        if u < p && total > 0.0 {
            let m = self.pick(total, u / p);
            self.tmp.copy_from_slice(&self.psi);
            self.psi.copy_from_slice(&self.lpsi[m]);
            let before = std::mem::take(&mut self.tmp);
            self.record_jump(t, m, &before);
            self.tmp = before;
        }
        let prop = self.k.prop.as_ref().expect("propagator");
        matvec(prop, &self.psi, &mut self.next);
        std::mem::swap(&mut self.psi, &mut self.next);
        self.rescale();
    }

    fn step_waiting_time(&mut self, t_next: f64, rng: &mut ChaCha8Rng) {
        let prop = self.k.prop.as_ref().expect("propagator");
        matvec(prop, &self.psi, &mut self.next);
        std::mem::swap(&mut self.psi, &mut self.next);
        if norm_sqr(&self.psi) < self.threshold {
            let total = self.apply_lindblads();
            if total > 0.0 {
                let u: f64 = rng.random();
                let m = self.pick(total, u);
                self.tmp.copy_from_slice(&self.psi);
                self.psi.copy_from_slice(&self.lpsi[m]);
                let before = std::mem::take(&mut self.tmp);
                self.record_jump(t_next, m, &before);
                self.tmp = before;
                let v: f64 = rng.random();
                self.threshold = v * norm_sqr(&self.psi);
            } else {
                self.threshold = 0.0;
            }
        }
        self.rescale();
    }

    fn step_normalized_jump(&mut self, t: f64, u: f64) {
        let total = self.apply_lindblads();
        let p = total * self.k.dt;
        if u < p && total > 0.0 {
            let m = self.pick(total, u / p);
            self.tmp.copy_from_slice(&self.psi);
            let r = self.rates[m].sqrt();
            for (a, b) in self.psi.iter_mut().zip(&self.lpsi[m]) {
                *a = b / r;
            }
            let before = std::mem::take(&mut self.tmp);
            self.record_jump(t, m, &before);
            self.tmp = before;
        } else {
            matvec(&self.k.drift, &self.psi, &mut self.next);
            let dt = self.k.dt;
            let c = 0.5 * total * dt;
            for (a, d) in self.psi.iter_mut().zip(&self.next) {
                *a += d * dt + *a * c;
            }
        }
        self.normalize();
    }

    fn step_qsd(&mut self, noise: &mut NoiseStream) {
        noise.fill(&mut self.noise);
        let dt = self.k.dt;
        matvec(&self.k.drift, &self.psi, &mut self.next);
        for v in self.next.iter_mut() {
            *v *= dt;
        }
        for (m, l) in self.k.ls.iter().enumerate() {
            matvec(l, &self.psi, &mut self.lpsi[m]);
            let ell = dotc(&self.psi, &self.lpsi[m]);
            let xi = self.noise[m];
            let a = ell.conj() * dt + xi;
            let b = -0.5 * ell.norm_sqr() * dt - ell * xi;
            for ((n, lp), p) in self.next.iter_mut().zip(&self.lpsi[m]).zip(&self.psi) {
                *n += lp * a + p * b;
            }
        }
        for (p, n) in self.psi.iter_mut().zip(&self.next) {
            *p += n;
        }
        self.normalize();
    }

    fn step_qsd_linear(&mut self, noise: &mut NoiseStream) {
        noise.fill(&mut self.noise);
        let dt = self.k.dt;
        matvec(&self.k.drift, &self.psi, &mut self.next);
        for v in self.next.iter_mut() {
            *v *= dt;
        }
        for (m, l) in self.k.ls.iter().enumerate() {
            matvec(l, &self.psi, &mut self.lpsi[m]);
            let xi = self.noise[m];
            for (n, lp) in self.next.iter_mut().zip(&self.lpsi[m]) {
                *n += lp * xi;
            }
        }
        for (p, n) in self.psi.iter_mut().zip(&self.next) {
            *p += n;
        }
        self.rescale();
    }

    fn step_ortho(&mut self, t: f64, u: f64) {
        let dt = self.k.dt;
        let mut rate = 0.0;
        let mut ells = [ZERO; 8];
        let many = self.k.ls.len() > ells.len();
        let mut ell_vec = if many { vec![ZERO; self.k.ls.len()] } else { Vec::new() };
        for (m, l) in self.k.ls.iter().enumerate() {
            matvec(l, &self.psi, &mut self.lpsi[m]);
            let e = norm_sqr(&self.lpsi[m]);
            let ell = dotc(&self.psi, &self.lpsi[m]);
            self.rates[m] = e;
            rate += (e - ell.norm_sqr()).max(0.0);
            if many {
                ell_vec[m] = ell;
            } else {
                ells[m] = ell;
            }
        }
        let ells: &[C64] = if many { &ell_vec } else { &ells[..self.k.ls.len()] };
        if rate * dt > 0.1 && !self.warned {
            warn!("ortho jump probability per step {:.3} exceeds 0.1; reduce dt", rate * dt);
            self.warned = true;
        }
        if u < rate * dt && rate > 0.0 {
            let basis = ortho_basis_from(&self.k.ls, &self.psi, &self.lpsi, ells);
            let total = basis.total_rate();
            if total > 0.0 {
                let v = u / (rate * dt);
                let mut acc = 0.0;
                let mut chosen = basis.rates.len() - 1;
                for (i, r) in basis.rates.iter().enumerate() {
                    acc += r;
                    if v * total < acc {
                        chosen = i;
                        break;
                    }
                }
                self.tmp.copy_from_slice(&self.psi);
                self.psi.copy_from_slice(basis.states[chosen].as_slice());
                let before = std::mem::take(&mut self.tmp);
                self.record_jump(t, chosen, &before);
                self.tmp = before;
                return;
            }
        }
        // -iH psi + sum (<L^dag> L - L^dag L / 2 + <L^dag L>/2 - |<L>|^2) psi
        matvec(&self.k.h, &self.psi, &mut self.next);
        for v in self.next.iter_mut() {
            *v *= C64::new(0.0, -dt);
        }
        matvec(&self.k.decay, &self.psi, &mut self.tmp);
        let mut c = 0.0;
        for (m, ell) in ells.iter().enumerate() {
            c += 0.5 * self.rates[m] - ell.norm_sqr();
            let a = ell.conj() * dt;
            for (n, lp) in self.next.iter_mut().zip(&self.lpsi[m]) {
                *n += lp * a;
            }
        }
        for ((n, d), p) in self.next.iter_mut().zip(&self.tmp).zip(&self.psi) {
            *n += -0.5 * dt * d + p * (c * dt);
        }
        for (p, n) in self.psi.iter_mut().zip(&self.next) {
            *p += n;
        }
        self.normalize();
    }
}

fn ortho_basis_from(ls: &[Operator], psi: &[C64], lpsi: &[Vec<C64>], ells: &[C64]) -> OrthoJumpBasis {
    let d = psi.len();
    let mut w = Operator::zeros(d, d);
    let mut delta = Ket::zeros(d);
    for m in 0..ls.len() {
        for i in 0..d {
            delta[i] = lpsi[m][i] - ells[m] * psi[i];
        }
        w += &delta * delta.adjoint();
    }
    let p = Ket::from_column_slice(psi);
    let q = Operator::identity(d, d) - &p * p.adjoint();
    let w = &q * w * &q;
    let w = (&w + w.adjoint()) * C64::new(0.5, 0.0);
    let trace = w.trace().re.max(0.0);
    let eig = match herm_eig(&w) {
        Ok(e) => e,
        Err(_) => return OrthoJumpBasis { states: vec![], rates: vec![] },
    };
    let floor = 1e-12 * trace.max(f64::MIN_POSITIVE);
    let mut states = Vec::new();
    let mut rates = Vec::new();
    for (v, s) in eig.values.iter().zip(eig.vectors).rev() {
        if *v > floor && *v > 0.0 {
            rates.push(*v);
            states.push(s);
        }
    }
    OrthoJumpBasis { states, rates }
}

/// Orthogonal jump states and rates from the eigendecomposition of
/// W = sum_m (L_m - <L_m>)|psi><psi|(L_m - <L_m>)^dagger.
pub fn ortho_jump_basis(psi: &Ket, model: &LindbladModel) -> Result<OrthoJumpBasis> {
    model.space().check_ket(psi)?;
    let d = psi.len();
    let lpsi: Vec<Vec<C64>> = model
        .lindblads()
        .iter()
        .map(|l| {
            let mut out = vec![ZERO; d];
            matvec(l, psi.as_slice(), &mut out);
            out
        })
        .collect();
    let ells: Vec<C64> = lpsi.iter().map(|lp| dotc(psi.as_slice(), lp)).collect();
    Ok(ortho_basis_from(model.lindblads(), psi.as_slice(), &lpsi, &ells))
}

/// One step of the norm-preserving jump equation.
pub fn jump_step_normalized<R: Rng>(psi: &Ket, model: &LindbladModel, dt: f64, rng: &mut R) -> Result<StepOutcome> {
    model.space().check_ket(psi)?;
    let k = Kernel::new(model, dt, false)?;
    let mut w = Walker::new(&k, psi.as_slice());
    let u: f64 = rng.random();
    w.step_normalized_jump(0.0, u);
    Ok(StepOutcome { psi: Ket::from_vec(w.psi), jump: w.events.first().map(|e| e.channel) })
}

/// One Euler-Maruyama step of nonlinear QSD.
pub fn qsd_step(psi: &Ket, model: &LindbladModel, dt: f64, noise: &mut NoiseStream) -> Result<Ket> {
    model.space().check_ket(psi)?;
    let k = Kernel::new(model, dt, false)?;
    let mut w = Walker::new(&k, psi.as_slice());
    w.step_qsd(noise);
    Ok(Ket::from_vec(w.psi))
}

/// One Euler-Maruyama step of linear QSD (no renormalization).
pub fn qsd_step_linear(psi: &Ket, model: &LindbladModel, dt: f64, noise: &mut NoiseStream) -> Result<Ket> {
    model.space().check_ket(psi)?;
    let k = Kernel::new(model, dt, false)?;
    let mut w = Walker::new(&k, psi.as_slice());
    w.step_qsd_linear(noise);
    let s = (0.5 * w.log_scale).exp();
    Ok(Ket::from_vec(w.psi) * C64::new(s, 0.0))
}

/// One step of the orthogonal-jump equation.
pub fn ortho_jump_step<R: Rng>(psi: &Ket, model: &LindbladModel, dt: f64, rng: &mut R) -> Result<StepOutcome> {
    model.space().check_ket(psi)?;
    let k = Kernel::new(model, dt, false)?;
    let mut w = Walker::new(&k, psi.as_slice());
    let u: f64 = rng.random();
    w.step_ortho(0.0, u);
    Ok(StepOutcome { psi: Ket::from_vec(w.psi), jump: w.events.first().map(|e| e.channel) })
}

fn output_steps(output_times: &[f64], dt: f64) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(output_times.len());
    let mut prev = 0usize;
    for &t in output_times {
        if !(t >= 0.0) || !t.is_finite() {
            return Err(Error::InvalidArgument(format!("output time {t} must be non-negative")));
        }
        let k = (t / dt).round() as usize;
        if (k as f64 * dt - t).abs() > 1e-9 * t.max(1.0) {
            return Err(Error::InvalidArgument(format!("output time {t} is not a multiple of dt = {dt}")));
        }
        if k < prev {
            return Err(Error::InvalidArgument("output times must be non-decreasing".into()));
        }
        prev = k;
        out.push(k);
    }
    Ok(out)
}

fn check_psi0(model: &LindbladModel, psi0: &Ket) -> Result<()> {
    model.space().check_ket(psi0)?;
    let n = psi0.norm_squared();
    if (n - 1.0).abs() > 1e-10 {
        return Err(Error::InvalidArgument(format!("initial ket must be normalized, squared norm {n}")));
    }
    Ok(())
}

/// Runs one trajectory, calling `sink(output_index, ket, log_scale)` at each output step.
fn simulate<F: FnMut(usize, &[C64], f64)>(
    engine: Engine,
    kernel: &Kernel,
    psi0: &Ket,
    out_steps: &[usize],
    mut rng: ChaCha8Rng,
    seed: u64,
    timing: JumpTiming,
    mut sink: F,
) -> (Vec<C64>, f64, Vec<JumpEvent>) {
    let mut w = Walker::new(kernel, psi0.as_slice());
    let n_steps = out_steps.last().copied().unwrap_or(0);
    let dt = kernel.dt;
    let mut next_out = 0;
    let emit = |step: usize, w: &Walker, next_out: &mut usize, sink: &mut F| {
        while *next_out < out_steps.len() && out_steps[*next_out] == step {
            sink(*next_out, &w.psi, w.log_scale);
            *next_out += 1;
        }
    };
    emit(0, &w, &mut next_out, &mut sink);
    match engine {
        Engine::Qsd | Engine::QsdLinear => {
            let mut noise = NoiseStream::from_rng(seed, rng, kernel.ls.len(), dt);
            for step in 0..n_steps {
                if engine == Engine::Qsd {
                    w.step_qsd(&mut noise);
                } else {
                    w.step_qsd_linear(&mut noise);
                }
                emit(step + 1, &w, &mut next_out, &mut sink);
            }
        }
        Engine::JumpsLinear if timing == JumpTiming::WaitingTime => {
            w.threshold = rng.random::<f64>();
            for step in 0..n_steps {
                w.step_waiting_time((step + 1) as f64 * dt, &mut rng);
                emit(step + 1, &w, &mut next_out, &mut sink);
            }
        }
        _ => {
            for step in 0..n_steps {
                let u: f64 = rng.random();
                let t = step as f64 * dt;
                match engine {
                    Engine::JumpsLinear => w.step_linear_jump(t, u),
                    Engine::Jumps => w.step_normalized_jump(t, u),
                    _ => w.step_ortho(t, u),
                }
                emit(step + 1, &w, &mut next_out, &mut sink);
            }
        }
    }
    (w.psi, w.log_scale, w.events)
}

fn kernel_for(engine: Engine, model: &LindbladModel, dt: f64) -> Result<Kernel> {
    Kernel::new(model, dt, engine == Engine::JumpsLinear)
}

/// Runs trajectory `index` of an ensemble seeded by `seed`, storing snapshots.
pub fn run_trajectory(
    engine: Engine,
    model: &LindbladModel,
    psi0: &Ket,
    output_times: &[f64],
    dt: f64,
    seed: u64,
    index: u64,
    timing: JumpTiming,
) -> Result<TrajectoryRecord> {
    check_psi0(model, psi0)?;
    let steps = output_steps(output_times, dt)?;
    let kernel = kernel_for(engine, model, dt)?;
    let mut kets: Vec<(Vec<C64>, f64)> = Vec::with_capacity(steps.len());
    let (psi, log_scale, events) = simulate(engine, &kernel, psi0, &steps, trajectory_rng(seed, index), seed, timing, |_, k, s| {
        kets.push((k.to_vec(), s))
    });
    let weight = if engine.is_linear() { norm_sqr(&psi) * log_scale.exp() } else { 1.0 };
    Ok(TrajectoryRecord {
        engine,
        seed,
        index,
        dt,
        times: output_times.to_vec(),
        kets: kets
            .into_iter()
            .map(|(k, s)| Ket::from_vec(k) * C64::new((0.5 * (s - log_scale)).exp(), 0.0))
            .collect(),
        events,
        weight,
        log_scale,
    })
}

/// Linear jump trajectory over [0, T] with output at the end only.
pub fn jump_trajectory_linear(model: &LindbladModel, psi0: &Ket, t_final: f64, dt: f64, seed: u64) -> Result<TrajectoryRecord> {
    let n = (t_final / dt).round();
    run_trajectory(Engine::JumpsLinear, model, psi0, &[0.0, n * dt], dt, seed, 0, JumpTiming::Bernoulli)
}

fn thread_pool(workers: Option<usize>) -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(w) = workers {
        b = b.num_threads(w.max(1));
    }
    b.build().map_err(|e| Error::ThreadPool(e.to_string()))
}

struct Partial {
    sum: Vec<Operator>,
    sq: Vec<DMatrix<f64>>,
    weight: Vec<f64>,
    obs: Vec<Vec<C64>>,
    obs_sq: Vec<Vec<f64>>,
}

impl Partial {
    fn new(n_out: usize, d: usize, n_obs: usize) -> Self {
        Self {
            sum: vec![Operator::zeros(d, d); n_out],
            sq: vec![DMatrix::zeros(d, d); n_out],
            weight: vec![0.0; n_out],
            obs: vec![vec![ZERO; n_obs]; n_out],
            obs_sq: vec![vec![0.0; n_obs]; n_out],
        }
    }

    fn merge(&mut self, other: &Partial) {
        for i in 0..self.sum.len() {
            self.sum[i] += &other.sum[i];
            self.sq[i] += &other.sq[i];
            self.weight[i] += other.weight[i];
            for k in 0..self.obs[i].len() {
                self.obs[i][k] += other.obs[i][k];
                self.obs_sq[i][k] += other.obs_sq[i][k];
            }
        }
    }
}

/// Ensemble mean of |psi><psi| at `output_times`.
///
/// Trajectory i uses the generator stream (master_seed, i); partial sums are
/// formed over fixed chunks and reduced in index order, so results do not
/// depend on the worker count.
pub fn run_ensemble(
    engine: Engine,
    model: &LindbladModel,
    psi0: &Ket,
    output_times: &[f64],
    dt: f64,
    n_traj: usize,
    master_seed: u64,
    options: &EnsembleOptions,
) -> Result<EnsembleStats> {
    if n_traj == 0 {
        return Err(Error::InvalidArgument("n_traj must be at least 1".into()));
    }
    check_psi0(model, psi0)?;
    let steps = output_steps(output_times, dt)?;
    let kernel = kernel_for(engine, model, dt)?;
    let d = model.dim();
    let n_out = steps.len();
    let weighted = engine == Engine::QsdLinear;
    let timing = options.timing;
    for o in &options.observables {
        model.space().check_operator(o)?;
    }
    let n_obs = options.observables.len();
    let n_chunks = n_traj.div_ceil(CHUNK);
    let pool = thread_pool(options.workers)?;
    let partials: Vec<Partial> = pool.install(|| {
        (0..n_chunks)
            .into_par_iter()
            .map(|c| {
                let mut part = Partial::new(n_out, d, n_obs);
                let mut scratch = vec![ZERO; d];
                let start = c * CHUNK;
                let end = (start + CHUNK).min(n_traj);
                for i in start..end {
                    let rng = trajectory_rng(master_seed, i as u64);
                    simulate(engine, &kernel, psi0, &steps, rng, master_seed, timing, |o, k, s| {
                        let n = norm_sqr(k);
                        let w = n * s.exp();
                        let f = if weighted { s.exp() } else if n > 0.0 { 1.0 / n } else { 0.0 };
                        let acc = &mut part.sum[o];
                        let sq = &mut part.sq[o];
                        for col in 0..d {
                            let kc = k[col].conj() * f;
                            for row in 0..d {
                                let x = k[row] * kc;
                                acc[(row, col)] += x;
                                sq[(row, col)] += x.norm_sqr();
                            }
                        }
                        part.weight[o] += w;
                        for (q, op) in options.observables.iter().enumerate() {
                            matvec(op, k, &mut scratch);
                            let v = dotc(k, &scratch) * f;
                            part.obs[o][q] += v;
                            part.obs_sq[o][q] += v.norm_sqr();
                        }
                    });
                }
                part
            })
            .collect()
    });
    let mut total = Partial::new(n_out, d, n_obs);
    for p in &partials {
        total.merge(p);
    }
    let n = n_traj as f64;
    let se_of = |sq: f64, m2: f64| if n_traj > 1 { ((sq / n - m2).max(0.0) / (n - 1.0)).sqrt() } else { 0.0 };
    let mut observable_mean = Vec::with_capacity(n_out);
    let mut observable_stderr = Vec::with_capacity(n_out);
    for o in 0..n_out {
        let m: Vec<C64> = total.obs[o].iter().map(|v| v / n).collect();
        observable_stderr.push((0..n_obs).map(|q| se_of(total.obs_sq[o][q], m[q].norm_sqr())).collect());
        observable_mean.push(m);
    }
    let mut mean = Vec::with_capacity(n_out);
    let mut stderr = Vec::with_capacity(n_out);
    for o in 0..n_out {
        let m = &total.sum[o] / C64::new(n, 0.0);
        let se = DMatrix::from_fn(d, d, |r, c| se_of(total.sq[o][(r, c)], m[(r, c)].norm_sqr()));
        mean.push(m);
        stderr.push(se);
    }
    Ok(EnsembleStats {
        engine,
        n_traj,
        master_seed,
        times: output_times.to_vec(),
        mean,
        stderr,
        mean_weight: total.weight.iter().map(|w| w / n).collect(),
        weighted_estimator: weighted,
        observable_mean,
        observable_stderr,
    })
}

/// Jump events and final weight of each trajectory, in index order.
pub fn sample_records(
    engine: Engine,
    model: &LindbladModel,
    psi0: &Ket,
    t_final: f64,
    dt: f64,
    n_traj: usize,
    master_seed: u64,
    options: &EnsembleOptions,
) -> Result<Vec<(Vec<JumpEvent>, f64)>> {
    check_psi0(model, psi0)?;
    let n = (t_final / dt).round() as usize;
    let steps = vec![n];
    let kernel = kernel_for(engine, model, dt)?;
    let timing = options.timing;
    let pool = thread_pool(options.workers)?;
    let out = pool.install(|| {
        (0..n_traj)
            .into_par_iter()
            .map(|i| {
                let rng = trajectory_rng(master_seed, i as u64);
                let (psi, s, events) = simulate(engine, &kernel, psi0, &steps, rng, master_seed, timing, |_, _, _| {});
                let w = if engine.is_linear() { norm_sqr(&psi) * s.exp() } else { 1.0 };
                (events, w)
            })
            .collect()
    });
    Ok(out)
}

fn check_record(record: &[f64], t_final: f64) -> Result<()> {
    let mut prev = f64::NEG_INFINITY;
    for &t in record {
        if !(t >= 0.0) || t > t_final || t <= prev {
            return Err(Error::UnorderedRecord);
        }
        prev = t;
    }
    Ok(())
}

/// Probability of jumps within dt_bin of each recorded time over [0, T],
/// evaluated on the density matrix: dt_bin^N Tr{ G ... J(G rho G^dag) ... G^dag }.
pub fn jump_record_probability(model: &LindbladModel, psi0: &Ket, record: &[f64], t_final: f64, dt_bin: f64) -> Result<f64> {
    model.space().check_ket(psi0)?;
    check_record(record, t_final)?;
    if !(dt_bin > 0.0) {
        return Err(Error::InvalidArgument(format!("bin width must be positive, got {dt_bin}")));
    }
    let h_eff = model.h_eff();
    let evolve = |rho: &Operator, tau: f64| -> Result<Operator> {
        let g = hilbert::expm(&(&h_eff * C64::new(0.0, -tau)))?;
        Ok(&g * rho * g.adjoint())
    };
    let mut rho = hilbert::projector(psi0);
    let mut t = 0.0;
    for &tk in record {
        rho = evolve(&rho, tk - t)?;
        rho = model
            .lindblads()
            .iter()
            .fold(Operator::zeros(rho.nrows(), rho.ncols()), |acc, l| acc + l * &rho * l.adjoint());
        t = tk;
    }
    rho = evolve(&rho, t_final - t)?;
    Ok(dt_bin.powi(record.len() as i32) * rho.trace().re)
}

/// Unnormalized conditional ket e^{-iH_eff(T-tN)} L ... L e^{-iH_eff t1} psi0
/// for a single-channel model.
pub fn record_state(model: &LindbladModel, psi0: &Ket, record: &[f64], t_final: f64) -> Result<Ket> {
    model.space().check_ket(psi0)?;
    check_record(record, t_final)?;
    if model.lindblads().len() != 1 {
        return Err(Error::InvalidArgument("record state needs a single-channel model".into()));
    }
    let l = &model.lindblads()[0];
    let h_eff = model.h_eff();
    let g = |tau: f64| hilbert::expm(&(&h_eff * C64::new(0.0, -tau)));
    let mut psi = psi0.clone();
    let mut t = 0.0;
    for &tk in record {
        psi = l * (g(tk - t)? * psi);
        t = tk;
    }
    Ok(g(t_final - t)? * psi)
}

/// Mean over records of the squared norm times dt_bin^N.
pub fn record_state_probability(model: &LindbladModel, psi0: &Ket, record: &[f64], t_final: f64, dt_bin: f64) -> Result<f64> {
    let psi = record_state(model, psi0, record, t_final)?;
    Ok(dt_bin.powi(record.len() as i32) * psi.norm_squared())
}
