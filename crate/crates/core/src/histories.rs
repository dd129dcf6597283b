//! Decoherent histories over the system (x) output-mode model.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use log::warn;
use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hilbert::{self, herm_eig, identity, partial_trace, projector, tensor, trace_norm, Ket, Operator, C64, ZERO};
use crate::lindblad::{apply_superop, dyson_superoperator, superop_expm, validate_projectors, vectorize, LindbladModel, SplitLindbladModel};
use crate::unravel::jump_record_probability;

pub const HISTORY_CAP: usize = 20;
/// Probabilities below this are treated as zero by the ratio criterion.
pub const ZERO_PROBABILITY: f64 = 1e-14;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    #[default]
    Exact,
    Split,
}

impl Backend {
    pub fn name(self) -> &'static str {
        match self {
            Backend::Exact => "exact",
            Backend::Split => "split",
        }
    }
}

impl fmt::Display for Backend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Backend {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact" => Ok(Backend::Exact),
            "split" => Ok(Backend::Split),
            _ => Err(Error::InvalidArgument(format!("unknown backend '{s}' (expected exact or split)"))),
        }
    }
}

/// One-step propagator exp(L dt) of the full model in Liouville space.
pub fn step_superoperator(model: &SplitLindbladModel, dt: f64, backend: Backend) -> Result<Operator> {
    if !(dt > 0.0) {
        return Err(Error::StepSize(format!("delta_t must be positive, got {dt}")));
    }
    match backend {
        Backend::Exact => superop_expm(&model.full_model(), dt),
        Backend::Split => {
            for v in model.regime_violations(dt) {
                warn!("split backend outside its regime: {v}");
            }
            dyson_superoperator(model, dt)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct History {
    alphas: Vec<u8>,
}

impl History {
    pub fn new(alphas: Vec<u8>) -> Result<Self> {
        if alphas.is_empty() {
            return Err(Error::HistoryMismatch("a history needs at least one projection".into()));
        }
        if alphas.len() > HISTORY_CAP {
            return Err(Error::HistoryCap { n: alphas.len(), cap: HISTORY_CAP });
        }
        Ok(Self { alphas })
    }

    /// Binary history from the low `n` bits of `bits`, first projection in the top bit.
    pub fn from_bits(bits: u32, n: usize) -> Result<Self> {
        if n == 0 || n > HISTORY_CAP {
            return Err(Error::HistoryCap { n, cap: HISTORY_CAP });
        }
        Self::new((0..n).map(|j| ((bits >> (n - 1 - j)) & 1) as u8).collect())
    }

    pub fn parse(s: &str) -> Result<Self> {
        let alphas = s
            .chars()
            .map(|c| c.to_digit(10).map(|d| d as u8).ok_or_else(|| Error::InvalidArgument(format!("bad history '{s}'"))))
            .collect::<Result<Vec<_>>>()?;
        Self::new(alphas)
    }

    pub fn zeros(n: usize) -> Result<Self> {
        Self::new(vec![0; n])
    }

    pub fn alphas(&self) -> &[u8] {
        &self.alphas
    }

    pub fn len(&self) -> usize {
        self.alphas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alphas.is_empty()
    }

    pub fn bits(&self) -> u32 {
        self.alphas.iter().fold(0, |acc, &a| (acc << 1) | (a.min(1) as u32))
    }

    /// Steps j at which the mode goes from unexcited to excited (alpha_{j-1} = 0, alpha_j != 0).
    pub fn transitions(&self) -> Vec<usize> {
        let mut prev = 0u8;
        let mut out = Vec::new();
        for (j, &a) in self.alphas.iter().enumerate() {
            if a != 0 && prev == 0 {
                out.push(j);
            }
            prev = a;
        }
        out
    }
}

impl fmt::Display for History {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for a in &self.alphas {
            write!(f, "{a}")?;
        }
        Ok(())
    }
}

/// Complete orthogonal projector sets, either one set reused at every time or one per time.
#[derive(Clone, Debug)]
pub struct ProjectorSchedule {
    sets: Vec<Vec<Operator>>,
    uniform: bool,
}

impl ProjectorSchedule {
    pub fn uniform(set: Vec<Operator>) -> Result<Self> {
        let dim = set.first().map(|p| p.nrows()).unwrap_or(0);
        validate_projectors(&set, dim)?;
        Ok(Self { sets: vec![set], uniform: true })
    }

    pub fn per_time(sets: Vec<Vec<Operator>>) -> Result<Self> {
        if sets.is_empty() {
            return Err(Error::InvalidProjectors("empty schedule".into()));
        }
        let dim = sets[0].first().map(|p| p.nrows()).unwrap_or(0);
        for s in &sets {
            validate_projectors(s, dim)?;
        }
        Ok(Self { sets, uniform: false })
    }

    /// P0 = 1 (x) |0><0| and P1 = 1 (x) (1 - |0><0|) on the output mode.
    pub fn photon_number(sys_dim: usize, mode_dim: usize) -> Result<Self> {
        let vac = projector(&hilbert::basis(mode_dim, 0));
        let p0 = tensor(&identity(sys_dim), &vac);
        let p1 = identity(sys_dim * mode_dim) - &p0;
        Self::uniform(vec![p0, p1])
    }

    /// Mode projectors onto (|0> +- |1>)/sqrt 2 for a two-level mode.
    pub fn plus_minus(sys_dim: usize) -> Result<Self> {
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let plus = Ket::from_vec(vec![C64::new(s, 0.0), C64::new(s, 0.0)]);
        let minus = Ket::from_vec(vec![C64::new(s, 0.0), C64::new(-s, 0.0)]);
        Self::uniform(vec![tensor(&identity(sys_dim), &projector(&plus)), tensor(&identity(sys_dim), &projector(&minus))])
    }

    pub fn dim(&self) -> usize {
        self.sets[0][0].nrows()
    }

    pub fn is_uniform(&self) -> bool {
        self.uniform
    }

    /// Projector set used at projection j (0-based).
    pub fn set_at(&self, j: usize) -> &[Operator] {
        if self.uniform {
            &self.sets[0]
        } else {
            &self.sets[j.min(self.sets.len() - 1)]
        }
    }

    fn check_length(&self, n: usize) -> Result<()> {
        if !self.uniform && self.sets.len() != n {
            return Err(Error::HistoryMismatch(format!(
                "schedule has {} projection times but histories have {n}",
                self.sets.len()
            )));
        }
        Ok(())
    }

    fn check_history(&self, h: &History) -> Result<()> {
        self.check_length(h.len())?;
        for (j, &a) in h.alphas().iter().enumerate() {
            if a as usize >= self.set_at(j).len() {
                return Err(Error::HistoryMismatch(format!("alpha {a} at step {j} has no projector")));
            }
        }
        Ok(())
    }
}

fn check_pair(model: &SplitLindbladModel, rho0: &Operator, schedule: &ProjectorSchedule, h: &History, hp: &History) -> Result<()> {
    model.space().check_operator(rho0)?;
    if schedule.dim() != model.dim() {
        return Err(Error::DimensionMismatch(format!(
            "schedule acts on dimension {} but the model has {}",
            schedule.dim(),
            model.dim()
        )));
    }
    if h.len() != hp.len() {
        return Err(Error::HistoryMismatch(format!("histories have lengths {} and {}", h.len(), hp.len())));
    }
    schedule.check_history(h)?;
    schedule.check_history(hp)
}

fn chain_operator(s: &Operator, rho0: &Operator, schedule: &ProjectorSchedule, h: &History, hp: &History) -> Operator {
    let mut x = rho0.clone();
    for (j, (&a, &b)) in h.alphas().iter().zip(hp.alphas()).enumerate() {
        let set = schedule.set_at(j);
        x = &set[a as usize] * apply_superop(s, &x) * &set[b as usize];
    }
    x
}

/// D[h, h'] = Tr{ P_aN e^{L dt}( ... P_a1 e^{L dt}(rho0) P_b1 ... ) P_bN }.
pub fn decoherence_functional(
    model: &SplitLindbladModel,
    rho0: &Operator,
    schedule: &ProjectorSchedule,
    h: &History,
    hp: &History,
    delta_t: f64,
    backend: Backend,
) -> Result<C64> {
    check_pair(model, rho0, schedule, h, hp)?;
    let s = step_superoperator(model, delta_t, backend)?;
    Ok(chain_operator(&s, rho0, schedule, h, hp).trace())
}

/// The same chain as `decoherence_functional` without the final trace.
pub fn pt_decoherence_functional(
    model: &SplitLindbladModel,
    rho0: &Operator,
    schedule: &ProjectorSchedule,
    h: &History,
    hp: &History,
    delta_t: f64,
    backend: Backend,
) -> Result<Operator> {
    check_pair(model, rho0, schedule, h, hp)?;
    let s = step_superoperator(model, delta_t, backend)?;
    Ok(chain_operator(&s, rho0, schedule, h, hp))
}

/// Chain arithmetic in the compressed spaces V_a^dagger X V_b, with P_a = V_a V_a^dagger.
struct Compressed {
    n: usize,
    /// Isometries per projection time (one entry when uniform).
    iso: Vec<Vec<Operator>>,
    uniform: bool,
    /// init[a*k + b]: V_a^dagger S(rho0) V_b, vectorized.
    init: Vec<DVector<C64>>,
    /// kernels[level][((a*k+b)*k' + a')*k' + b'].
    kernels: Vec<Vec<Operator>>,
}

fn isometry(p: &Operator) -> Result<Operator> {
    let e = herm_eig(p)?;
    let cols: Vec<Ket> = e
        .values
        .iter()
        .zip(e.vectors.iter())
        .rev()
        .filter(|(v, _)| **v > 0.5)
        .map(|(_, c)| c.clone())
        .collect();
    if cols.is_empty() {
        return Err(Error::InvalidProjectors("zero projector in schedule".into()));
    }
    Ok(Operator::from_columns(&cols))
}

impl Compressed {
    fn new(s: &Operator, rho0: &Operator, schedule: &ProjectorSchedule, n: usize) -> Result<Self> {
        schedule.check_length(n)?;
        let levels = if schedule.uniform { 1 } else { n };
        let iso = (0..levels)
            .map(|j| schedule.set_at(j).iter().map(isometry).collect::<Result<Vec<_>>>())
            .collect::<Result<Vec<_>>>()?;
        let mut out = Self { n, iso, uniform: schedule.uniform, init: Vec::new(), kernels: Vec::new() };
        let x1 = vectorize(&apply_superop(s, rho0));
        let mut init = Vec::new();
        for va in out.isos(0) {
            for vb in out.isos(0) {
                init.push(compress_left(va, vb) * &x1);
            }
        }
        out.init = init;
        let kernel_levels = if n <= 1 { 0 } else if out.uniform { 1 } else { n - 1 };
        for l in 0..kernel_levels {
            let (from, to) = (out.isos(l), out.isos(l + 1));
            let mut ks = Vec::with_capacity(from.len().pow(2) * to.len().pow(2));
            for va in from {
                for vb in from {
                    let right = s * expand_right(va, vb);
                    for vap in to {
                        for vbp in to {
                            ks.push(compress_left(vap, vbp) * &right);
                        }
                    }
                }
            }
            out.kernels.push(ks);
        }
        Ok(out)
    }

    fn isos(&self, j: usize) -> &[Operator] {
        if self.uniform {
            &self.iso[0]
        } else {
            &self.iso[j]
        }
    }

    fn k(&self, j: usize) -> usize {
        self.isos(j).len()
    }

    /// Kernel taking (a, b) at projection j to (a', b') at projection j + 1.
    fn kernel(&self, j: usize, a: u8, b: u8, ap: u8, bp: u8) -> &Operator {
        let k = self.k(j);
        let kp = self.k(j + 1);
        let idx = ((a as usize * k + b as usize) * kp + ap as usize) * kp + bp as usize;
        let level = if self.uniform { 0 } else { j };
        &self.kernels[level][idx]
    }

    fn init(&self, a: u8, b: u8) -> &DVector<C64> {
        &self.init[a as usize * self.k(0) + b as usize]
    }

    /// V_a Y V_b^dagger at projection j.
    fn expand(&self, j: usize, a: u8, b: u8, y: &DVector<C64>) -> Operator {
        let va = &self.isos(j)[a as usize];
        let vb = &self.isos(j)[b as usize];
        let ym = Operator::from_column_slice(va.ncols(), vb.ncols(), y.as_slice());
        va * ym * vb.adjoint()
    }

    fn trace(&self, j: usize, a: u8, b: u8, y: &DVector<C64>) -> C64 {
        if a == b {
            let r = self.isos(j)[a as usize].ncols();
            (0..r).map(|i| y[i + i * r]).sum()
        } else {
            self.expand(j, a, b, y).trace()
        }
    }
}

/// vec(V_a^dagger X V_b) = (V_b^T (x) V_a^dagger) vec X.
fn compress_left(va: &Operator, vb: &Operator) -> Operator {
    vb.transpose().kronecker(&va.adjoint())
}

/// vec(V_a Y V_b^dagger) = (conj(V_b) (x) V_a) vec Y.
fn expand_right(va: &Operator, vb: &Operator) -> Operator {
    vb.map(|z| z.conj()).kronecker(va)
}

fn code_of(alphas: &[u8], radices: &[usize]) -> u64 {
    alphas.iter().zip(radices).fold(0u64, |acc, (&a, &k)| acc * k as u64 + a as u64)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HistorySummary {
    pub n: usize,
    pub delta_t: f64,
    pub backend: Backend,
    pub n_histories: usize,
    pub probability_sum: f64,
    pub truncated_mass: f64,
    pub max_ratio: Option<f64>,
    pub epsilon: Option<f64>,
    pub max_pt_ratio: Option<f64>,
}

/// Pairwise decoherence functional over a (possibly pruned) set of histories.
#[derive(Clone, Debug)]
pub struct DecoherenceTable {
    pub histories: Vec<History>,
    pub delta_t: f64,
    pub backend: Backend,
    /// Row-major D[h, h'].
    pub entries: Vec<C64>,
    /// Trace norms of the operator-valued entries, when requested.
    pub pt_norms: Option<Vec<f64>>,
    /// Probability carried by pruned branches.
    pub truncated_mass: f64,
    pub off_diagonal: bool,
}

impl DecoherenceTable {
    pub fn len(&self) -> usize {
        self.histories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.histories.is_empty()
    }

    pub fn index_of(&self, h: &History) -> Option<usize> {
        self.histories.binary_search(h).ok()
    }

    pub fn entry(&self, i: usize, j: usize) -> C64 {
        self.entries[i * self.len() + j]
    }

    pub fn probability(&self, i: usize) -> f64 {
        self.entry(i, i).re
    }

    pub fn probabilities(&self) -> Vec<f64> {
        (0..self.len()).map(|i| self.probability(i)).collect()
    }

    pub fn probability_of(&self, h: &History) -> f64 {
        self.index_of(h).map(|i| self.probability(i)).unwrap_or(0.0)
    }

    pub fn probability_sum(&self) -> f64 {
        (0..self.len()).map(|i| self.probability(i)).sum()
    }

    /// Sum of every entry; equals Tr rho0 when the histories are complete.
    pub fn total_sum(&self) -> C64 {
        self.entries.iter().sum()
    }

    /// |D[h,h']|^2 / (p(h) p(h')).
    pub fn dh_ratio(&self, i: usize, j: usize) -> Result<f64> {
        let (pi, pj) = (self.probability(i), self.probability(j));
        if pi < ZERO_PROBABILITY || pj < ZERO_PROBABILITY {
            return Err(Error::ZeroProbability);
        }
        Ok(self.entry(i, j).norm_sqr() / (pi * pj))
    }

    /// Largest ratio over distinct pairs with both probabilities at least `floor`.
    pub fn max_ratio_above(&self, floor: f64) -> Option<(f64, usize, usize)> {
        if !self.off_diagonal {
            return None;
        }
        let floor = floor.max(ZERO_PROBABILITY);
        let keep: Vec<usize> = (0..self.len()).filter(|&i| self.probability(i) >= floor).collect();
        let mut best: Option<(f64, usize, usize)> = None;
        for (x, &i) in keep.iter().enumerate() {
            for &j in &keep[x + 1..] {
                let r = self.entry(i, j).norm_sqr() / (self.probability(i) * self.probability(j));
                if best.is_none_or(|b| r > b.0) {
                    best = Some((r, i, j));
                }
            }
        }
        best
    }

    pub fn max_ratio(&self) -> Option<f64> {
        self.max_ratio_above(ZERO_PROBABILITY).map(|b| b.0)
    }

    /// sqrt of the largest ratio: the smallest eps with |D|^2 <= eps^2 p p' on every pair.
    pub fn epsilon(&self) -> Option<f64> {
        self.max_ratio().map(f64::sqrt)
    }

    /// Largest ||Dbar[h,h']||_1 / sqrt(p(h) p(h')) over distinct pairs above `floor`.
    pub fn max_pt_ratio_above(&self, floor: f64) -> Option<(f64, usize, usize)> {
        let norms = self.pt_norms.as_ref()?;
        let floor = floor.max(ZERO_PROBABILITY);
        let n = self.len();
        let keep: Vec<usize> = (0..n).filter(|&i| self.probability(i) >= floor).collect();
        let mut best: Option<(f64, usize, usize)> = None;
        for (x, &i) in keep.iter().enumerate() {
            for &j in &keep[x + 1..] {
                let r = norms[i * n + j] / (self.probability(i) * self.probability(j)).sqrt();
                if best.is_none_or(|b| r > b.0) {
                    best = Some((r, i, j));
                }
            }
        }
        best
    }

    pub fn summary(&self) -> HistorySummary {
        let max_ratio = self.max_ratio();
        HistorySummary {
            n: self.histories.first().map(|h| h.len()).unwrap_or(0),
            delta_t: self.delta_t,
            backend: self.backend,
            n_histories: self.len(),
            probability_sum: self.probability_sum(),
            truncated_mass: self.truncated_mass,
            max_ratio,
            epsilon: max_ratio.map(f64::sqrt),
            max_pt_ratio: self.max_pt_ratio_above(ZERO_PROBABILITY).map(|b| b.0),
        }
    }

    /// Columns h, h', Re D, Im D, ratio; entries that are exactly zero are skipped.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "h,h',re_d,im_d,ratio")?;
        let n = self.len();
        for i in 0..n {
            for j in 0..n {
                let d = self.entry(i, j);
                if d == ZERO && i != j {
                    continue;
                }
                if !self.off_diagonal && i != j {
                    continue;
                }
                let ratio = match self.dh_ratio(i, j) {
                    Ok(r) => format!("{r:.16e}"),
                    Err(_) => "nan".into(),
                };
                writeln!(w, "{},{},{:.16e},{:.16e},{}", self.histories[i], self.histories[j], d.re, d.im, ratio)?;
            }
        }
        Ok(())
    }
}

/// Builds every history as a u8 string of length n.
pub fn enumerate_histories(n: usize) -> Result<Vec<History>> {
    if n == 0 || n > HISTORY_CAP {
        return Err(Error::HistoryCap { n, cap: HISTORY_CAP });
    }
    (0..(1u32 << n)).map(|b| History::from_bits(b, n)).collect()
}

/// Histories whose running probability stays at or above `pruning` (0 keeps all).
pub fn enumerate_histories_pruned(
    model: &SplitLindbladModel,
    rho0: &Operator,
    schedule: &ProjectorSchedule,
    n: usize,
    delta_t: f64,
    pruning: f64,
    backend: Backend,
) -> Result<Vec<History>> {
    Ok(history_probabilities(model, rho0, schedule, n, delta_t, pruning, backend)?.histories)
}

#[derive(Clone, Debug)]
pub struct TableOptions {
    pub pruning: f64,
    pub backend: Backend,
    pub off_diagonal: bool,
    pub pt_norms: bool,
    pub workers: Option<usize>,
}

impl Default for TableOptions {
    fn default() -> Self {
        Self { pruning: 0.0, backend: Backend::Exact, off_diagonal: true, pt_norms: false, workers: None }
    }
}

struct Diagonal {
    histories: Vec<(Vec<u8>, f64)>,
    truncated: f64,
}

fn diagonal_dfs(c: &Compressed, pruning: f64) -> Diagonal {
    fn go(c: &Compressed, j: usize, path: &mut Vec<u8>, y: DVector<C64>, pruning: f64, out: &mut Diagonal) {
        let a = *path.last().unwrap();
        let p = c.trace(j, a, a, &y).re;
        if pruning > 0.0 && p < pruning {
            out.truncated += p;
            return;
        }
        if j + 1 == c.n {
            out.histories.push((path.clone(), p));
            return;
        }
        for ap in 0..c.k(j + 1) as u8 {
            let yp = c.kernel(j, a, a, ap, ap) * &y;
            path.push(ap);
            go(c, j + 1, path, yp, pruning, out);
            path.pop();
        }
    }
    let mut out = Diagonal { histories: Vec::new(), truncated: 0.0 };
    for a in 0..c.k(0) as u8 {
        let mut path = vec![a];
        go(c, 0, &mut path, c.init(a, a).clone(), pruning, &mut out);
    }
    out
}

/// Diagonal of the decoherence functional for all histories of length `n`.
pub fn history_probabilities(
    model: &SplitLindbladModel,
    rho0: &Operator,
    schedule: &ProjectorSchedule,
    n: usize,
    delta_t: f64,
    pruning: f64,
    backend: Backend,
) -> Result<DecoherenceTable> {
    decoherence_table(
        model,
        rho0,
        schedule,
        n,
        delta_t,
        &TableOptions { pruning, backend, off_diagonal: false, pt_norms: false, workers: Some(1) },
    )
}

struct PairCtx<'a> {
    c: &'a Compressed,
    prefixes: Vec<HashSet<u64>>,
    index: HashMap<u64, usize>,
    pt: bool,
}

struct PairOut {
    entries: Vec<(usize, usize, C64, f64)>,
}

struct PairNode {
    j: usize,
    ca: u64,
    cb: u64,
    a: u8,
    b: u8,
    equal: bool,
    y: DVector<C64>,
}

fn pair_children(ctx: &PairCtx, node: &PairNode) -> Vec<PairNode> {
    let c = ctx.c;
    let j = node.j + 1;
    let k = c.k(j) as u64;
    let allowed = &ctx.prefixes[j];
    let mut out = Vec::new();
    for ap in 0..k as u8 {
        let ca = node.ca * k + ap as u64;
        if !allowed.contains(&ca) {
            continue;
        }
        for bp in 0..k as u8 {
            if node.equal && bp < ap {
                continue;
            }
            let cb = node.cb * k + bp as u64;
            if !allowed.contains(&cb) {
                continue;
            }
            let y = c.kernel(node.j, node.a, node.b, ap, bp) * &node.y;
            out.push(PairNode { j, ca, cb, a: ap, b: bp, equal: node.equal && ap == bp, y });
        }
    }
    out
}

fn pair_dfs(ctx: &PairCtx, node: PairNode, out: &mut PairOut) {
    if node.j + 1 == ctx.c.n {
        let i = ctx.index[&node.ca];
        let jj = ctx.index[&node.cb];
        let d = ctx.c.trace(node.j, node.a, node.b, &node.y);
        let norm = if ctx.pt { trace_norm(&ctx.c.expand(node.j, node.a, node.b, &node.y)) } else { 0.0 };
        out.entries.push((i, jj, d, norm));
        return;
    }
    for child in pair_children(ctx, &node) {
        pair_dfs(ctx, child, out);
    }
}

/// Decoherence functional over all (or pruned) history pairs of length `n`.
///
/// Pair chains share prefixes through a depth-first traversal; only pairs
/// with h <= h' are evolved and the rest are filled by Hermiticity.
pub fn decoherence_table(
    model: &SplitLindbladModel,
    rho0: &Operator,
    schedule: &ProjectorSchedule,
    n: usize,
    delta_t: f64,
    options: &TableOptions,
) -> Result<DecoherenceTable> {
    if n == 0 || n > HISTORY_CAP {
        return Err(Error::HistoryCap { n, cap: HISTORY_CAP });
    }
    model.space().check_operator(rho0)?;
    if schedule.dim() != model.dim() {
        return Err(Error::DimensionMismatch(format!(
            "schedule acts on dimension {} but the model has {}",
            schedule.dim(),
            model.dim()
        )));
    }
    let s = step_superoperator(model, delta_t, options.backend)?;
    let c = Compressed::new(&s, rho0, schedule, n)?;
    let diag = diagonal_dfs(&c, options.pruning);
    let radices: Vec<usize> = (0..n).map(|j| c.k(j)).collect();
    let mut hist: Vec<(History, u64, f64)> = diag
        .histories
        .iter()
        .map(|(alphas, p)| (History { alphas: alphas.clone() }, code_of(alphas, &radices), *p))
        .collect();
    hist.sort_by(|x, y| x.0.cmp(&y.0));
    let m = hist.len();
    let mut entries = vec![ZERO; m * m];
    let mut pt_norms = if options.pt_norms { Some(vec![0.0; m * m]) } else { None };
    for (i, (_, _, p)) in hist.iter().enumerate() {
        entries[i * m + i] = C64::new(*p, 0.0);
    }

    if options.off_diagonal || options.pt_norms {
        let mut prefixes = vec![HashSet::new(); n];
        for (h, _, _) in &hist {
            for j in 0..n {
                prefixes[j].insert(code_of(&h.alphas[..=j], &radices[..=j]));
            }
        }
        let index: HashMap<u64, usize> = hist.iter().enumerate().map(|(i, (_, code, _))| (*code, i)).collect();
        let ctx = PairCtx { c: &c, prefixes, index, pt: options.pt_norms };
        let mut seeds = Vec::new();
        let k0 = c.k(0) as u8;
        for a in 0..k0 {
            for b in a..k0 {
                if ctx.prefixes[0].contains(&(a as u64)) && ctx.prefixes[0].contains(&(b as u64)) {
                    seeds.push(PairNode { j: 0, ca: a as u64, cb: b as u64, a, b, equal: a == b, y: c.init(a, b).clone() });
                }
            }
        }
        let split_depth = 3.min(n - 1);
        for _ in 0..split_depth {
            seeds = seeds.iter().flat_map(|s| pair_children(&ctx, s)).collect();
        }
        let mut b = rayon::ThreadPoolBuilder::new();
        if let Some(w) = options.workers {
            b = b.num_threads(w.max(1));
        }
        let pool = b.build().map_err(|e| Error::ThreadPool(e.to_string()))?;
        let outs: Vec<PairOut> = pool.install(|| {
            seeds
                .into_par_iter()
                .map(|s| {
                    let mut out = PairOut { entries: Vec::new() };
                    pair_dfs(&ctx, s, &mut out);
                    out
                })
                .collect()
        });
        for out in outs {
            for (i, j, d, norm) in out.entries {
                if i != j {
                    entries[i * m + j] = d;
                    entries[j * m + i] = d.conj();
                }
                if let Some(pt) = pt_norms.as_mut() {
                    pt[i * m + j] = norm;
                    pt[j * m + i] = norm;
                }
            }
        }
    }

    Ok(DecoherenceTable {
        histories: hist.into_iter().map(|(h, _, _)| h).collect(),
        delta_t,
        backend: options.backend,
        entries,
        pt_norms,
        truncated_mass: diag.truncated,
        off_diagonal: options.off_diagonal,
    })
}

/// Coarse-grained detection records with windows of M projections.
#[derive(Clone, Debug, Serialize)]
pub struct CoarseRecord {
    pub m: usize,
    pub window: f64,
    pub n_windows: usize,
    /// Window indices containing a detection, mapped to their total probability.
    pub records: BTreeMap<Vec<usize>, f64>,
    /// Probability of fine histories with more than one excitation inside one window.
    pub multi_click_mass: f64,
    pub truncated_mass: f64,
    pub warnings: Vec<String>,
}

impl CoarseRecord {
    pub fn total(&self) -> f64 {
        self.records.values().sum()
    }

    pub fn probability(&self, windows: &[usize]) -> f64 {
        self.records.get(windows).copied().unwrap_or(0.0)
    }

    /// Midpoint time of window k.
    pub fn click_time(&self, k: usize) -> f64 {
        (k as f64 + 0.5) * self.window
    }
}

/// Groups fine histories by the windows holding their 0 -> 1 transitions.
pub fn coarse_grain(table: &DecoherenceTable, m: usize, gamma1: f64, omega: f64) -> Result<CoarseRecord> {
    if m == 0 {
        return Err(Error::InvalidArgument("window size M must be at least 1".into()));
    }
    let n = table.histories.first().map(|h| h.len()).unwrap_or(0);
    let window = m as f64 * table.delta_t;
    let mut warnings = Vec::new();
    if gamma1 * window < 3.0 {
        warnings.push(format!("Gamma1*Delta_t = {:.3} violates Gamma1*Delta_t >= 3", gamma1 * window));
    }
    if omega * window > 0.1 {
        warnings.push(format!("omega*Delta_t = {:.3} violates omega*Delta_t <= 0.1", omega * window));
    }
    for w in &warnings {
        warn!("coarse graining outside its regime: {w}");
    }
    let mut records = BTreeMap::new();
    let mut multi = 0.0;
    for (i, h) in table.histories.iter().enumerate() {
        let p = table.probability(i);
        let mut wins: Vec<usize> = h.transitions().into_iter().map(|j| j / m).collect();
        let before = wins.len();
        wins.dedup();
        if wins.len() < before {
            multi += p;
        }
        *records.entry(wins).or_insert(0.0) += p;
    }
    Ok(CoarseRecord {
        m,
        window,
        n_windows: n.div_ceil(m),
        records,
        multi_click_mass: multi,
        truncated_mass: table.truncated_mass,
        warnings,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct RecordComparison {
    pub windows: Vec<usize>,
    pub times: Vec<f64>,
    pub p_history: f64,
    pub p_jump: f64,
    pub relative_error: f64,
    /// "ok", "below-floor" or "truncated".
    pub flag: String,
}

/// Pairs each coarse record with the jump-record probability at window midpoints.
pub fn compare_records(
    coarse: &CoarseRecord,
    reduced: &LindbladModel,
    psi0: &Ket,
    t_final: f64,
    floor: f64,
) -> Result<Vec<RecordComparison>> {
    let mut rows = Vec::new();
    for (wins, &p) in &coarse.records {
        let times: Vec<f64> = wins.iter().map(|&k| coarse.click_time(k).min(t_final)).collect();
        let pj = jump_record_probability(reduced, psi0, &times, t_final, coarse.window)?;
        let flag = if pj < floor { "below-floor" } else { "ok" };
        rows.push(RecordComparison {
            windows: wins.clone(),
            times,
            p_history: p,
            p_jump: pj,
            relative_error: if pj > 0.0 { (p - pj).abs() / pj } else { f64::INFINITY },
            flag: flag.into(),
        });
    }
    if coarse.truncated_mass > 0.0 {
        rows.push(RecordComparison {
            windows: vec![],
            times: vec![],
            p_history: coarse.truncated_mass,
            p_jump: f64::NAN,
            relative_error: f64::NAN,
            flag: "truncated".into(),
        });
    }
    Ok(rows)
}

/// Trace norm of Tr_mode{ S^N rho0 - (M o S)^N rho0 }, M the measurement map of the schedule.
pub fn trajectory_consistency_check(
    model: &SplitLindbladModel,
    rho0: &Operator,
    schedule: &ProjectorSchedule,
    n: usize,
    delta_t: f64,
    backend: Backend,
) -> Result<f64> {
    model.space().check_operator(rho0)?;
    schedule.check_length(n)?;
    let s = step_superoperator(model, delta_t, backend)?;
    let mut full = rho0.clone();
    let mut diag = rho0.clone();
    for j in 0..n {
        full = apply_superop(&s, &full);
        let x = apply_superop(&s, &diag);
        diag = schedule
            .set_at(j)
            .iter()
            .fold(Operator::zeros(x.nrows(), x.ncols()), |acc, p| acc + p * &x * p);
    }
    let r = partial_trace(&(full - diag), model.space(), 0)?;
    Ok(trace_norm(&r))
}

/// Marginal probability of the prefix `h` from a complete diagonal table.
pub fn prefix_probability(table: &DecoherenceTable, prefix: &[u8]) -> f64 {
    table
        .histories
        .iter()
        .enumerate()
        .filter(|(_, h)| h.alphas().starts_with(prefix))
        .map(|(i, _)| table.probability(i))
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hilbert::{basis, tensor_ket};
    use crate::lindblad::ket_density;
    use crate::photodetect::{adiabatic_model, total_model, DetectorParams};

    fn model(kappa: f64, gamma1: f64, gamma2: f64) -> SplitLindbladModel {
        let p = DetectorParams { kappa, gamma1, gamma2, ..DetectorParams::reference() };
        total_model(&Operator::zeros(2, 2), &p, 2).unwrap()
    }

    fn rho_e0() -> Operator {
        ket_density(&tensor_ket(&basis(2, 1), &basis(2, 0)))
    }

    fn sched() -> ProjectorSchedule {
        ProjectorSchedule::photon_number(2, 2).unwrap()
    }

    #[test]
    fn history_encoding() {
        let h = History::from_bits(0b0110, 4).unwrap();
        assert_eq!(h.to_string(), "0110");
        assert_eq!(h.bits(), 0b0110);
        assert_eq!(h.transitions(), vec![1]);
        assert_eq!(History::parse("10101").unwrap().transitions(), vec![0, 2, 4]);
        assert!(History::new(vec![]).is_err());
        assert!(History::zeros(21).is_err());
    }

    #[test]
    fn enumerate_examples() {
        assert_eq!(enumerate_histories(1).unwrap().len(), 2);
        assert_eq!(enumerate_histories(3).unwrap().len(), 8);
        assert!(matches!(enumerate_histories(21), Err(Error::HistoryCap { .. })));
        let m = model(1.0, 10.0, 100.0);
        let all = enumerate_histories_pruned(&m, &rho_e0(), &sched(), 4, 0.1, 0.0, Backend::Exact).unwrap();
        assert_eq!(all, enumerate_histories(4).unwrap());
    }

    #[test]
    fn single_step_completeness() {
        let m = model(1.0, 10.0, 100.0);
        let h0 = History::zeros(1).unwrap();
        let h1 = History::parse("1").unwrap();
        let d00 = decoherence_functional(&m, &rho_e0(), &sched(), &h0, &h0, 0.1, Backend::Exact).unwrap();
        let d11 = decoherence_functional(&m, &rho_e0(), &sched(), &h1, &h1, 0.1, Backend::Exact).unwrap();
        assert!((d00 + d11 - C64::new(1.0, 0.0)).norm() < 1e-8);
    }

    #[test]
    fn table_matches_direct_chains() {
        let m = model(1.0, 10.0, 100.0);
        let t = decoherence_table(&m, &rho_e0(), &sched(), 4, 0.1, &TableOptions { pt_norms: true, ..Default::default() }).unwrap();
        for i in 0..t.len() {
            for j in 0..t.len() {
                let direct =
                    decoherence_functional(&m, &rho_e0(), &sched(), &t.histories[i], &t.histories[j], 0.1, Backend::Exact).unwrap();
                assert!((direct - t.entry(i, j)).norm() < 1e-13);
                let pt = pt_decoherence_functional(&m, &rho_e0(), &sched(), &t.histories[i], &t.histories[j], 0.1, Backend::Exact)
                    .unwrap();
                assert!((trace_norm(&pt) - t.pt_norms.as_ref().unwrap()[i * t.len() + j]).abs() < 1e-13);
            }
        }
        assert!((t.total_sum() - C64::new(1.0, 0.0)).norm() < 1e-10);
        assert!((t.probability_sum() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn decoupled_stays_unexcited() {
        let m = model(0.0, 10.0, 100.0);
        let t = history_probabilities(&m, &rho_e0(), &sched(), 6, 0.1, 0.0, Backend::Exact).unwrap();
        assert!((t.probability_of(&History::zeros(6).unwrap()) - 1.0).abs() < 1e-12);
        assert!((t.probability_sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn pruning_accounts_for_mass() {
        let m = model(1.0, 10.0, 100.0);
        let t = history_probabilities(&m, &rho_e0(), &sched(), 8, 0.1, 1e-6, Backend::Exact).unwrap();
        assert!(t.len() < 256);
        assert!(t.truncated_mass > 0.0);
        assert!((t.probability_sum() + t.truncated_mass - 1.0).abs() < 1e-6);
    }

    #[test]
    fn ratio_examples() {
        let m = model(1.0, 10.0, 100.0);
        let t = decoherence_table(&m, &rho_e0(), &sched(), 3, 0.1, &TableOptions::default()).unwrap();
        for i in 0..t.len() {
            if t.probability(i) >= ZERO_PROBABILITY {
                assert!((t.dh_ratio(i, i).unwrap() - 1.0).abs() < 1e-12);
            }
        }
        let m0 = model(0.0, 10.0, 100.0);
        let t0 = decoherence_table(&m0, &rho_e0(), &sched(), 2, 0.1, &TableOptions::default()).unwrap();
        let i = t0.index_of(&History::parse("11").unwrap()).unwrap();
        assert!(matches!(t0.dh_ratio(i, 0), Err(Error::ZeroProbability)));
    }

    #[test]
    fn no_click_history_tracks_jump_probability() {
        let m = model(1.0, 10.0, 100.0);
        let n = 10;
        let h = History::zeros(n).unwrap();
        let d = decoherence_functional(&m, &rho_e0(), &sched(), &h, &h, 0.1, Backend::Exact).unwrap();
        let red = adiabatic_model(&Operator::zeros(2, 2), 0.04, 2).unwrap();
        let p = jump_record_probability(&red, &basis(2, 1), &[], n as f64 * 0.1, 1.0).unwrap();
        assert!((d.re - p).abs() / p < 0.05);
    }

    #[test]
    fn coarse_grain_partitions() {
        let m = model(1.0, 10.0, 100.0);
        let t = history_probabilities(&m, &rho_e0(), &sched(), 10, 0.1, 0.0, Backend::Exact).unwrap();
        let c = coarse_grain(&t, 5, 10.0, 0.0).unwrap();
        assert!((c.total() - t.probability_sum()).abs() < 1e-12);
        assert!((c.probability(&[]) - t.probability_of(&History::zeros(10).unwrap())).abs() < 1e-15);
        assert_eq!(c.n_windows, 2);
        assert!(c.warnings.is_empty());
        let w = coarse_grain(&t, 1, 10.0, 0.0).unwrap();
        assert_eq!(w.warnings.len(), 1);
    }

    #[test]
    fn consistency_residual_examples() {
        let m0 = model(0.0, 10.0, 100.0);
        let r0 = trajectory_consistency_check(&m0, &rho_e0(), &sched(), 10, 0.1, Backend::Exact).unwrap();
        assert_eq!(r0, 0.0);
        let m = model(1.0, 10.0, 100.0);
        let r = trajectory_consistency_check(&m, &rho_e0(), &sched(), 10, 0.1, Backend::Exact).unwrap();
        assert!(r <= 0.05, "{r}");
    }

    #[test]
    fn backends_agree_in_regime() {
        let m = model(1.0, 0.1, 200.0);
        let a = history_probabilities(&m, &rho_e0(), &sched(), 6, 0.1, 0.0, Backend::Exact).unwrap();
        let b = history_probabilities(&m, &rho_e0(), &sched(), 6, 0.1, 0.0, Backend::Split).unwrap();
        for i in 0..a.len() {
            let (p, q) = (a.probability(i), b.probability(i));
            if p > 1e-6 {
                assert!((p - q).abs() / p < 1e-2, "{}: {p:.3e} vs {q:.3e}", a.histories[i]);
            }
        }
    }

    #[test]
    fn per_time_schedule_matches_uniform() {
        let m = model(1.0, 10.0, 100.0);
        let u = sched();
        let sets = (0..3).map(|j| u.set_at(j).to_vec()).collect();
        let p = ProjectorSchedule::per_time(sets).unwrap();
        let a = decoherence_table(&m, &rho_e0(), &u, 3, 0.1, &TableOptions::default()).unwrap();
        let b = decoherence_table(&m, &rho_e0(), &p, 3, 0.1, &TableOptions::default()).unwrap();
        for (x, y) in a.entries.iter().zip(&b.entries) {
            assert!((x - y).norm() < 1e-14);
        }
        assert!(decoherence_table(&m, &rho_e0(), &p, 4, 0.1, &TableOptions::default()).is_err());
    }

    #[test]
    fn csv_has_header_and_diagonal() {
        let m = model(1.0, 10.0, 100.0);
        let t = decoherence_table(&m, &rho_e0(), &sched(), 2, 0.1, &TableOptions::default()).unwrap();
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert!(s.starts_with("h,h',re_d,im_d,ratio\n"));
        assert!(s.contains("\n00,00,"));
    }
}
