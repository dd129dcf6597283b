//! Lindblad master equations: generator, integrators, the L1/L2 split and its
//! second-order expansion.

use std::collections::HashMap;

use log::warn;
use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::hilbert::{
    self, check_finite, check_hermitian, dagger, destroy, identity, number, spectral_norm, tensor,
    CompositeSpace, Ket, Operator, C64, I, ONE, ZERO,
};

/// Largest Liouville dimension handled by dense superoperators.
pub const LIOUVILLE_CAP: usize = 1600;

#[derive(Clone, Debug)]
pub struct LindbladModel {
    hamiltonian: Operator,
    lindblads: Vec<Operator>,
    space: CompositeSpace,
}

impl LindbladModel {
    pub fn new(hamiltonian: Operator, lindblads: Vec<Operator>, space: CompositeSpace) -> Result<Self> {
        space.check_operator(&hamiltonian)?;
        check_finite(&hamiltonian, "hamiltonian")?;
        check_hermitian(&hamiltonian, 1e-10)?;
        for l in &lindblads {
            space.check_operator(l)?;
            check_finite(l, "lindblad operator")?;
        }
        Ok(Self { hamiltonian, lindblads, space })
    }

    pub fn hamiltonian(&self) -> &Operator {
        &self.hamiltonian
    }

    pub fn lindblads(&self) -> &[Operator] {
        &self.lindblads
    }

    pub fn space(&self) -> &CompositeSpace {
        &self.space
    }

    pub fn dim(&self) -> usize {
        self.space.dim()
    }

    pub fn with_lindblad(mut self, l: Operator) -> Result<Self> {
        self.space.check_operator(&l)?;
        self.lindblads.push(l);
        Ok(self)
    }

    /// Sum of L^dagger L over channels.
    pub fn decay_operator(&self) -> Operator {
        let d = self.dim();
        self.lindblads
            .iter()
            .fold(Operator::zeros(d, d), |acc, l| acc + l.adjoint() * l)
    }

    /// H - (i/2) sum L^dagger L.
    pub fn h_eff(&self) -> Operator {
        &self.hamiltonian - self.decay_operator() * C64::new(0.0, 0.5)
    }

    /// Upper bound on the generator norm used for step validation.
    pub fn generator_norm_bound(&self) -> f64 {
        2.0 * spectral_norm(&self.hamiltonian)
            + self
                .lindblads
                .iter()
                .map(|l| 2.0 * spectral_norm(l).powi(2))
                .sum::<f64>()
    }
}

/// Density matrix with validated Hermiticity, trace and positivity.
#[derive(Clone, Debug)]
pub struct DensityMatrix {
    matrix: Operator,
    weight: f64,
}

impl DensityMatrix {
    pub fn new(matrix: Operator, weight: f64) -> Result<Self> {
        if matrix.nrows() != matrix.ncols() {
            return Err(Error::DimensionMismatch("density matrix must be square".into()));
        }
        check_finite(&matrix, "density matrix")?;
        check_hermitian(&matrix, 1e-10)?;
        let tr = matrix.trace().re;
        if (tr - weight).abs() > 1e-8 {
            return Err(Error::Domain(format!("trace {tr} differs from declared weight {weight}")));
        }
        let min = hilbert::min_eigenvalue(&matrix)?;
        if min < -1e-8 * tr.abs().max(1e-300) {
            return Err(Error::Domain(format!("minimum eigenvalue {min:.3e} is negative")));
        }
        Ok(Self { matrix, weight })
    }

    pub fn pure(psi: &Ket) -> Self {
        let weight = psi.norm_squared();
        Self { matrix: hilbert::projector(psi), weight }
    }

    pub fn matrix(&self) -> &Operator {
        &self.matrix
    }

    pub fn weight(&self) -> f64 {
        self.weight
    }

    pub fn into_inner(self) -> Operator {
        self.matrix
    }
}

/// Column-stacking vectorization; nalgebra storage is column-major already.
pub fn vectorize(x: &Operator) -> DVector<C64> {
    DVector::from_column_slice(x.as_slice())
}

pub fn unvectorize(v: &DVector<C64>, dim: usize) -> Operator {
    Operator::from_column_slice(dim, dim, v.as_slice())
}

/// -i[H, rho] + sum_m (L rho L^dagger - {L^dagger L, rho}/2).
pub fn liouvillian_apply(model: &LindbladModel, rho: &Operator) -> Result<Operator> {
    model.space.check_operator(rho)?;
    Ok(Generator::new(model).apply(rho))
}

struct Generator {
    h_eff: Operator,
    h_eff_adj: Operator,
    lindblads: Vec<(Operator, Operator)>,
}

impl Generator {
    fn new(model: &LindbladModel) -> Self {
        let h_eff = model.h_eff();
        Self {
            h_eff_adj: h_eff.adjoint(),
            h_eff,
            lindblads: model.lindblads.iter().map(|l| (l.clone(), l.adjoint())).collect(),
        }
    }

    fn apply(&self, rho: &Operator) -> Operator {
        let mut out = (&self.h_eff * rho - rho * &self.h_eff_adj) * (-I);
        for (l, ld) in &self.lindblads {
            out += l * rho * ld;
        }
        out
    }
}

/// Dense Liouvillian in the column-stacked basis, vec(AXB) = (B^T (x) A) vec X.
pub fn liouvillian_matrix(model: &LindbladModel) -> Result<Operator> {
    let d = model.dim();
    check_cap(d)?;
    let id = identity(d);
    let h_eff = model.h_eff();
    let mut l = (tensor(&id, &h_eff) - tensor(&h_eff.adjoint().transpose(), &id)) * (-I);
    for op in &model.lindblads {
        l += tensor(&op.conjugate(), op);
    }
    Ok(l)
}

fn check_cap(d: usize) -> Result<()> {
    if d * d > LIOUVILLE_CAP {
        return Err(Error::LiouvilleCap { dim: d * d, cap: LIOUVILLE_CAP });
    }
    Ok(())
}

/// exp(L t) as a dense superoperator matrix.
pub fn superop_expm(model: &LindbladModel, t: f64) -> Result<Operator> {
    if t < 0.0 {
        return Err(Error::NegativeTime(t));
    }
    let l = liouvillian_matrix(model)?;
    hilbert::expm(&(l * C64::new(t, 0.0)))
}

pub fn apply_superop(s: &Operator, x: &Operator) -> Operator {
    let d = x.nrows();
    unvectorize(&(s * vectorize(x)), d)
}

/// Fixed-step RK4 integration of the master equation.
///
/// Returns rho at each of `output_times`, which must be non-negative and
/// non-decreasing. Each interval is split into equal substeps no longer than
/// `dt`.
pub fn evolve_master(
    model: &LindbladModel,
    rho0: &Operator,
    output_times: &[f64],
    dt: f64,
) -> Result<Vec<Operator>> {
    model.space.check_operator(rho0)?;
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::StepSize(format!("dt must be positive, got {dt}")));
    }
    let bound = model.generator_norm_bound();
    if bound * dt > 0.1 {
        return Err(Error::StepSize(format!(
            "||L|| dt = {:.3e} exceeds 0.1 (||L|| <= {bound:.3e}, dt = {dt:.3e})",
            bound * dt
        )));
    }
    let gen = Generator::new(model);
    let mut out = Vec::with_capacity(output_times.len());
    let mut rho = rho0.clone();
    let mut t = 0.0;
    for &target in output_times {
        if target < t || !target.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "output times must be non-negative and non-decreasing (got {target} after {t})"
            )));
        }
        let span = target - t;
        let steps = (span / dt).ceil() as usize;
        if steps > 0 {
            let h = span / steps as f64;
            for _ in 0..steps {
                rho = rk4_step(&gen, &rho, h);
            }
        }
        t = target;
        out.push(rho.clone());
    }
    Ok(out)
}

fn rk4_step(gen: &Generator, rho: &Operator, h: f64) -> Operator {
    let hc = C64::new(h, 0.0);
    let half = C64::new(0.5 * h, 0.0);
    let k1 = gen.apply(rho);
    let k2 = gen.apply(&(rho + &k1 * half));
    let k3 = gen.apply(&(rho + &k2 * half));
    let k4 = gen.apply(&(rho + &k3 * hc));
    rho + (k1 + (k2 + k3) * C64::new(2.0, 0.0) + k4) * C64::new(h / 6.0, 0.0)
}

/// System operator blocks of a composite operator with a two-level mode.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockDensity {
    pub rho00: Operator,
    pub rho01: Operator,
    pub rho10: Operator,
    pub rho11: Operator,
}

impl BlockDensity {
    pub fn zeros(sys_dim: usize) -> Self {
        let z = Operator::zeros(sys_dim, sys_dim);
        Self { rho00: z.clone(), rho01: z.clone(), rho10: z.clone(), rho11: z }
    }

    /// Split a (system x 2-level mode) operator into its mode blocks.
    pub fn from_full(x: &Operator, sys_dim: usize) -> Result<Self> {
        if x.nrows() != 2 * sys_dim || x.ncols() != 2 * sys_dim {
            return Err(Error::DimensionMismatch(format!(
                "block split needs a {0}x{0} operator",
                2 * sys_dim
            )));
        }
        let block = |m: usize, n: usize| Operator::from_fn(sys_dim, sys_dim, |i, j| x[(2 * i + m, 2 * j + n)]);
        Ok(Self { rho00: block(0, 0), rho01: block(0, 1), rho10: block(1, 0), rho11: block(1, 1) })
    }

    pub fn to_full(&self) -> Operator {
        let s = self.sys_dim();
        let mut x = Operator::zeros(2 * s, 2 * s);
        for i in 0..s {
            for j in 0..s {
                x[(2 * i, 2 * j)] = self.rho00[(i, j)];
                x[(2 * i, 2 * j + 1)] = self.rho01[(i, j)];
                x[(2 * i + 1, 2 * j)] = self.rho10[(i, j)];
                x[(2 * i + 1, 2 * j + 1)] = self.rho11[(i, j)];
            }
        }
        x
    }

    pub fn sys_dim(&self) -> usize {
        self.rho00.nrows()
    }

    pub fn weight(&self) -> f64 {
        (self.rho00.trace() + self.rho11.trace()).re
    }

    fn map(&self, f: impl Fn(&Operator) -> Operator) -> Self {
        Self { rho00: f(&self.rho00), rho01: f(&self.rho01), rho10: f(&self.rho10), rho11: f(&self.rho11) }
    }
}

/// exp(L2 t): dephasing of the mode blocks at rate Gamma2.
pub fn exp_l2(x: &BlockDensity, t: f64, gamma2: f64) -> Result<BlockDensity> {
    if t < 0.0 {
        return Err(Error::NegativeTime(t));
    }
    let f = C64::new((-0.5 * gamma2 * t).exp(), 0.0);
    Ok(BlockDensity {
        rho00: x.rho00.clone(),
        rho01: &x.rho01 * f,
        rho10: &x.rho10 * f,
        rho11: x.rho11.clone(),
    })
}

/// L = L1 + L2 where L2 is Gamma2 dephasing on the mode number operator.
#[derive(Clone, Debug)]
pub struct SplitLindbladModel {
    pub base: LindbladModel,
    pub gamma2: f64,
    pub mode_dim: usize,
}

impl SplitLindbladModel {
    pub fn new(base: LindbladModel, gamma2: f64, mode_dim: usize) -> Result<Self> {
        if !(gamma2 > 0.0) || !gamma2.is_finite() {
            return Err(Error::InvalidArgument(format!("gamma2 must be positive, got {gamma2}")));
        }
        let dims = base.space().factor_dims();
        if dims.len() != 2 || dims[1] != mode_dim || mode_dim < 2 {
            return Err(Error::DimensionMismatch(format!(
                "split model needs a system x mode space with mode dim {mode_dim}, got {dims:?}"
            )));
        }
        Ok(Self { base, gamma2, mode_dim })
    }

    pub fn sys_dim(&self) -> usize {
        self.base.space().factor_dims()[0]
    }

    pub fn dim(&self) -> usize {
        self.base.dim()
    }

    pub fn space(&self) -> &CompositeSpace {
        self.base.space()
    }

    /// 1 (x) n2 on the composite space.
    pub fn mode_number(&self) -> Operator {
        tensor(&identity(self.sys_dim()), &number(self.mode_dim))
    }

    /// The full model with the sqrt(Gamma2) n2 channel appended.
    pub fn full_model(&self) -> LindbladModel {
        let l2 = self.mode_number() * C64::new(self.gamma2.sqrt(), 0.0);
        let mut m = self.base.clone();
        m.lindblads.push(l2);
        m
    }

    /// Largest dissipative rate in L1, max_m ||L_m||^2.
    pub fn dissipation_rate(&self) -> f64 {
        self.base
            .lindblads()
            .iter()
            .map(|l| spectral_norm(l).powi(2))
            .fold(0.0, f64::max)
    }

    /// Diagonal of L2 in the column-stacked Liouville basis.
    pub fn l2_diagonal(&self) -> Vec<f64> {
        let d = self.dim();
        let md = self.mode_dim;
        let mut z = Vec::with_capacity(d * d);
        for j in 0..d {
            for i in 0..d {
                let dn = (i % md) as f64 - (j % md) as f64;
                z.push(-0.5 * self.gamma2 * dn * dn);
            }
        }
        z
    }

    /// Named violations of Gamma2 dt >> 1 and Gamma1 dt << 1.
    pub fn regime_violations(&self, dt: f64) -> Vec<String> {
        let mut out = Vec::new();
        let g2 = self.gamma2 * dt;
        if g2 < 5.0 {
            out.push(format!("Gamma2*dt = {g2:.3} violates Gamma2*dt >> 1"));
        }
        let g1 = self.dissipation_rate() * dt;
        if g1 > 0.2 {
            out.push(format!("Gamma1*dt = {g1:.3} violates Gamma1*dt << 1"));
        }
        out
    }
}

/// Second-order Dyson superoperator for exp((L1 + L2) dt).
///
/// Terms up to second order in L1 in the interaction picture of the diagonal
/// L2, with the time integrals evaluated exactly as divided differences.
pub fn dyson_superoperator(model: &SplitLindbladModel, dt: f64) -> Result<Operator> {
    if dt < 0.0 {
        return Err(Error::NegativeTime(dt));
    }
    let l1 = liouvillian_matrix(&model.base)?;
    let z = model.l2_diagonal();
    let n = z.len();

    let mut classes: Vec<f64> = Vec::new();
    let mut class_of = Vec::with_capacity(n);
    let mut lookup: HashMap<u64, usize> = HashMap::new();
    for &v in &z {
        let idx = *lookup.entry(v.to_bits()).or_insert_with(|| {
            classes.push(v);
            classes.len() - 1
        });
        class_of.push(idx);
    }
    let nc = classes.len();
    let mut i2 = vec![ZERO; nc * nc];
    let mut i3 = vec![ZERO; nc * nc * nc];
    for a in 0..nc {
        for b in 0..nc {
            i2[a * nc + b] = divided_integral(&[classes[a], classes[b]], dt)?;
            for c in 0..nc {
                i3[(a * nc + b) * nc + c] = divided_integral(&[classes[a], classes[b], classes[c]], dt)?;
            }
        }
    }

    let mut s = Operator::zeros(n, n);
    for k in 0..n {
        s[(k, k)] = C64::new((z[k] * dt).exp(), 0.0);
    }
    for b in 0..n {
        let cb = class_of[b];
        for k in 0..n {
            let ck = class_of[k];
            let lkb = l1[(k, b)];
            if lkb != ZERO {
                s[(k, b)] += lkb * i2[ck * nc + cb];
            }
        }
        for j in 0..n {
            let ljb = l1[(j, b)];
            if ljb == ZERO {
                continue;
            }
            let cj = class_of[j];
            for k in 0..n {
                let lkj = l1[(k, j)];
                if lkj != ZERO {
                    s[(k, b)] += lkj * ljb * i3[(class_of[k] * nc + cj) * nc + cb];
                }
            }
        }
    }
    Ok(s)
}

/// Iterated integral of exponentials with rates `z` (latest first) over [0, dt].
fn divided_integral(z: &[f64], dt: f64) -> Result<C64> {
    let m = z.len();
    let mut a = Operator::zeros(m, m);
    for i in 0..m {
        a[(i, i)] = C64::new(z[i] * dt, 0.0);
        if i + 1 < m {
            a[(i, i + 1)] = C64::new(dt, 0.0);
        }
    }
    Ok(hilbert::expm(&a)?[(0, m - 1)])
}

/// One step of the second-order split expansion on a block state.
pub fn split_evolve_second_order(model: &SplitLindbladModel, x: &BlockDensity, dt: f64) -> Result<BlockDensity> {
    if model.mode_dim != 2 {
        return Err(Error::DimensionMismatch("block form needs mode_dim = 2".into()));
    }
    for v in model.regime_violations(dt) {
        warn!("split expansion outside its regime: {v}");
    }
    let s = dyson_superoperator(model, dt)?;
    let full = apply_superop(&s, &x.to_full());
    BlockDensity::from_full(&full, model.sys_dim())
}

/// Parameters of the closed-form block update for the system (x) mode model.
#[derive(Clone, Debug)]
pub struct AsymptoticParams {
    pub h0: Operator,
    pub a: Operator,
    pub kappa: f64,
    pub gamma1: f64,
    pub gamma2: f64,
}

/// Closed-form asymptotic block update, every written term kept.
///
/// Drops exp(-Gamma2 dt / 2) and O(kappa^2 / Gamma2^2) contributions.
pub fn split_evolve_asymptotic(p: &AsymptoticParams, x: &BlockDensity, dt: f64) -> BlockDensity {
    let c = |v: f64| C64::new(v, 0.0);
    let h = &p.h0;
    let a = &p.a;
    let ad = dagger(a);
    let k = p.kappa;
    let g1 = p.gamma1;
    let g2 = p.gamma2;
    let comm = |b: &Operator, y: &Operator| b * y - y * b;
    let (r00, r01, r10, r11) = (&x.rho00, &x.rho01, &x.rho10, &x.rho11);
    let ik = C64::new(0.0, k);
    let mi = -I;

    let src0 = r01 * a * ik - &ad * r10 * ik;
    let src1 = r10 * &ad * ik - a * r01 * ik;
    let leak = a * r01 * ik - r10 * &ad * ik;

    let d0 = r00 + comm(h, r00) * (mi * c(dt))
        + r11 * c(g1 * dt)
        + (&ad * r11 * a * c(2.0) - &ad * a * r00 - r00 * &ad * a) * c(2.0 * k * k * dt / g2)
        + &src0 * c(2.0 / g2)
        - comm(h, &src0) * (I * c(2.0 * dt / g2))
        - &leak * c(2.0 * g1 * dt / g2)
        - comm(h, &comm(h, r00)) * c(dt * dt / 2.0)
        - r11 * c(g1 * g1 * dt * dt / 2.0)
        - comm(h, &(r11 * c(g1))) * (I * c(dt * dt));

    let o01 = (r00 * &ad * ik - &ad * r11 * ik) * c(2.0 / g2)
        - ((&ad * comm(h, r11)) * mi + comm(h, r00) * &ad * I - (&ad * r11 + r11 * &ad) * c(g1)) * (ik * c(2.0 * dt / g2));

    let d1 = r11 + comm(h, r11) * (mi * c(dt))
        - r11 * c(g1 * dt)
        + (a * r00 * &ad * c(2.0) - a * &ad * r11 - r11 * a * &ad) * c(2.0 * k * k * dt / g2)
        + &src1 * c(2.0 / g2)
        - comm(h, &src1) * (I * c(2.0 * dt / g2))
        + &leak * c(2.0 * g1 * dt / g2)
        - comm(h, &comm(h, r11)) * c(dt * dt / 2.0)
        + r11 * c(g1 * g1 * dt * dt / 2.0)
        + comm(h, &(r11 * c(g1))) * (I * c(dt * dt));

    BlockDensity { rho00: d0, rho10: o01.adjoint(), rho01: o01, rho11: d1 }
}

/// sum_alpha P_alpha rho P_alpha for a complete orthogonal projector set.
pub fn repeated_measurement_map(rho: &Operator, projectors: &[Operator]) -> Result<Operator> {
    validate_projectors(projectors, rho.nrows())?;
    Ok(projectors
        .iter()
        .fold(Operator::zeros(rho.nrows(), rho.ncols()), |acc, p| acc + p * rho * p))
}

/// Checks completeness and mutual orthogonality within 1e-10.
pub fn validate_projectors(projectors: &[Operator], dim: usize) -> Result<()> {
    if projectors.is_empty() {
        return Err(Error::InvalidProjectors("empty set".into()));
    }
    let mut sum = Operator::zeros(dim, dim);
    for (i, p) in projectors.iter().enumerate() {
        if p.nrows() != dim || p.ncols() != dim {
            return Err(Error::InvalidProjectors(format!("projector {i} has wrong dimension")));
        }
        for (j, q) in projectors.iter().enumerate() {
            let prod = p * q;
            let expected = if i == j { p.clone() } else { Operator::zeros(dim, dim) };
            if hilbert::max_abs(&(prod - expected)) > 1e-10 {
                return Err(Error::InvalidProjectors(format!(
                    "projectors {i} and {j} violate P_a P_b = delta_ab P_a"
                )));
            }
        }
        sum += p;
    }
    if hilbert::max_abs(&(sum - identity(dim))) > 1e-10 {
        return Err(Error::InvalidProjectors("projectors do not sum to identity".into()));
    }
    Ok(())
}

/// Block generator of the adiabatic intermediate equations with
/// H_eff = H0 - i (gamma/2) a^dagger a.
pub fn intermediate_rhs(x: &BlockDensity, h0: &Operator, gamma: f64, gamma1: f64) -> BlockDensity {
    let d = h0.nrows();
    let a = destroy(d);
    let ad = dagger(&a);
    let h_eff = h0 - &ad * &a * C64::new(0.0, 0.5 * gamma);
    let h_eff_adj = h_eff.adjoint();
    let nh = |r: &Operator| (&h_eff * r - r * &h_eff_adj) * (-I);
    let g = C64::new(gamma, 0.0);
    let rho00 = nh(&x.rho00) + &ad * &x.rho11 * &a * g + &x.rho11 * C64::new(gamma1, 0.0);
    let rho11 = nh(&x.rho11) + &a * &x.rho00 * &ad * g - &x.rho11 * C64::new(gamma1 + gamma, 0.0);
    let z = Operator::zeros(d, d);
    BlockDensity { rho00, rho01: z.clone(), rho10: z, rho11 }
}

/// RK4 integration of `intermediate_rhs`.
pub fn evolve_intermediate(
    x0: &BlockDensity,
    h0: &Operator,
    gamma: f64,
    gamma1: f64,
    t: f64,
    dt: f64,
) -> Result<BlockDensity> {
    if t < 0.0 {
        return Err(Error::NegativeTime(t));
    }
    let steps = (t / dt).ceil().max(0.0) as usize;
    let mut x = x0.clone();
    if steps == 0 {
        return Ok(x);
    }
    let h = t / steps as f64;
    let add = |a: &BlockDensity, b: &BlockDensity, s: f64| BlockDensity {
        rho00: &a.rho00 + &b.rho00 * C64::new(s, 0.0),
        rho01: &a.rho01 + &b.rho01 * C64::new(s, 0.0),
        rho10: &a.rho10 + &b.rho10 * C64::new(s, 0.0),
        rho11: &a.rho11 + &b.rho11 * C64::new(s, 0.0),
    };
    for _ in 0..steps {
        let k1 = intermediate_rhs(&x, h0, gamma, gamma1);
        let k2 = intermediate_rhs(&add(&x, &k1, h / 2.0), h0, gamma, gamma1);
        let k3 = intermediate_rhs(&add(&x, &k2, h / 2.0), h0, gamma, gamma1);
        let k4 = intermediate_rhs(&add(&x, &k3, h), h0, gamma, gamma1);
        x = add(&x, &k1, h / 6.0);
        x = add(&x, &k2, h / 3.0);
        x = add(&x, &k3, h / 3.0);
        x = add(&x, &k4, h / 6.0);
    }
    Ok(x)
}

/// max_ij |a_ij - b_ij| / max_ij |b_ij|.
pub fn relative_max_error(a: &Operator, b: &Operator) -> f64 {
    let scale = hilbert::max_abs(b);
    hilbert::max_abs(&(a - b)) / scale.max(f64::MIN_POSITIVE)
}

pub fn block_scale(x: &BlockDensity, s: f64) -> BlockDensity {
    x.map(|m| m * C64::new(s, 0.0))
}

pub fn ket_density(psi: &Ket) -> Operator {
    hilbert::projector(psi)
}

pub fn unit(d: usize) -> Operator {
    identity(d) * ONE
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hilbert::{basis, projector, sigma_z, trace_norm};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cavity(gamma: f64, dim: usize) -> LindbladModel {
        LindbladModel::new(
            Operator::zeros(dim, dim),
            vec![destroy(dim) * C64::new(gamma.sqrt(), 0.0)],
            CompositeSpace::single(dim),
        )
        .unwrap()
    }

    fn random_density(rng: &mut ChaCha8Rng, d: usize) -> Operator {
        let m = Operator::from_fn(d, d, |_, _| C64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)));
        let r = &m * m.adjoint();
        let t = r.trace();
        r / t
    }

    fn split_model(kappa: f64, gamma1: f64, gamma2: f64) -> SplitLindbladModel {
        let a = destroy(2);
        let b = destroy(2);
        let h = (tensor(&dagger(&a), &b) + tensor(&a, &dagger(&b))) * C64::new(kappa, 0.0);
        let l1 = tensor(&identity(2), &b) * C64::new(gamma1.sqrt(), 0.0);
        let base = LindbladModel::new(h, vec![l1], CompositeSpace::pair(2, 2)).unwrap();
        SplitLindbladModel::new(base, gamma2, 2).unwrap()
    }

    #[test]
    fn generator_examples() {
        let m = LindbladModel::new(sigma_z(), vec![], CompositeSpace::single(2)).unwrap();
        let r = liouvillian_apply(&m, &(identity(2) * C64::new(0.5, 0.0))).unwrap();
        assert!(r.norm() < 1e-15);

        let g = 0.7;
        let r = liouvillian_apply(&cavity(g, 3), &projector(&basis(3, 1))).unwrap();
        let expected = (projector(&basis(3, 0)) - projector(&basis(3, 1))) * C64::new(g, 0.0);
        assert!((r - expected).norm() < 1e-15);

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let model = split_model(1.0, 3.0, 5.0).full_model();
        for _ in 0..10 {
            let rho = random_density(&mut rng, 4);
            let d = liouvillian_apply(&model, &rho).unwrap();
            assert!(d.trace().norm() < 1e-12);
            assert!(hilbert::hermiticity_defect(&d) < 1e-12);
        }
    }

    #[test]
    fn liouvillian_matrix_matches_apply() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let model = split_model(0.8, 2.0, 7.0).full_model();
        let l = liouvillian_matrix(&model).unwrap();
        let rho = random_density(&mut rng, 4);
        let a = apply_superop(&l, &rho);
        let b = liouvillian_apply(&model, &rho).unwrap();
        assert!((a - b).norm() < 1e-12);
    }

    #[test]
    fn unitary_evolution_matches_conjugation() {
        let h = sigma_z() * C64::new(0.5, 0.0);
        let m = LindbladModel::new(h.clone(), vec![], CompositeSpace::single(2)).unwrap();
        let plus = Ket::from_vec(vec![ONE, ONE]) / C64::new(2f64.sqrt(), 0.0);
        let rho0 = projector(&plus);
        let out = evolve_master(&m, &rho0, &[0.0, 1.0, 3.0], 1e-2).unwrap();
        for (t, rho) in [0.0, 1.0, 3.0].iter().zip(&out) {
            let u = hilbert::expm(&(&h * C64::new(0.0, -t))).unwrap();
            let exact = &u * &rho0 * u.adjoint();
            assert!((rho - exact).norm() < 1e-8);
        }
    }

    #[test]
    fn cavity_population_decays_exponentially() {
        let g = 0.04;
        let m = cavity(g, 2);
        let times: Vec<f64> = (0..=10).map(|k| 2.0 * k as f64).collect();
        let out = evolve_master(&m, &projector(&basis(2, 1)), &times, 1e-2).unwrap();
        for (t, rho) in times.iter().zip(&out) {
            assert!((rho[(1, 1)].re - (-g * t).exp()).abs() < 1e-6);
        }
    }

    #[test]
    fn evolve_master_rejects_large_steps() {
        let m = cavity(10.0, 2);
        assert!(matches!(
            evolve_master(&m, &projector(&basis(2, 1)), &[1.0], 0.1),
            Err(Error::StepSize(_))
        ));
    }

    #[test]
    fn superop_expm_properties() {
        let model = split_model(1.0, 2.0, 6.0).full_model();
        let s0 = superop_expm(&model, 0.0).unwrap();
        assert!((s0 - identity(16)).norm() < 1e-14);

        let l = liouvillian_matrix(&model).unwrap();
        let h = 1e-6;
        let fd = (superop_expm(&model, h).unwrap() - superop_expm(&model, -0.0).unwrap()) / C64::new(h, 0.0);
        assert!(hilbert::max_abs(&(fd - &l)) < 1e-6 * hilbert::max_abs(&l).max(1.0) * 100.0);

        let s = superop_expm(&model, 0.3).unwrap();
        let d = 4;
        for col in 0..16 {
            let tr: C64 = (0..d).map(|i| s[(i + i * d, col)]).sum();
            let expected = if col % (d + 1) == 0 { ONE } else { ZERO };
            assert!((tr - expected).norm() < 1e-10);
        }
        assert!(superop_expm(&model, -1.0).is_err());
    }

    #[test]
    fn superop_matches_rk4() {
        let model = split_model(1.0, 2.0, 6.0).full_model();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let rho0 = random_density(&mut rng, 4);
        let s = superop_expm(&model, 1.5).unwrap();
        let a = apply_superop(&s, &rho0);
        let b = evolve_master(&model, &rho0, &[1.5], 1e-3).unwrap().pop().unwrap();
        assert!((a - b).norm() < 1e-6);
    }

    #[test]
    fn exp_l2_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = BlockDensity::from_full(&random_density(&mut rng, 4), 2).unwrap();
        assert_eq!(exp_l2(&x, 0.0, 3.0).unwrap(), x);
        let g2 = 3.0;
        let y = exp_l2(&x, 2.0 * 2f64.ln() / g2, g2).unwrap();
        assert!((&y.rho01 * C64::new(2.0, 0.0) - &x.rho01).norm() < 1e-14);
        assert!((&y.rho10 * C64::new(2.0, 0.0) - &x.rho10).norm() < 1e-14);
        assert!(exp_l2(&x, -1.0, g2).is_err());

        let base = LindbladModel::new(Operator::zeros(4, 4), vec![], CompositeSpace::pair(2, 2)).unwrap();
        let l2_only = SplitLindbladModel::new(base, g2, 2).unwrap().full_model();
        let t = 0.4;
        let rk = evolve_master(&l2_only, &x.to_full(), &[t], 1e-3).unwrap().pop().unwrap();
        assert!((rk - exp_l2(&x, t, g2).unwrap().to_full()).norm() < 1e-8);
    }

    #[test]
    fn split_decoupled_is_exp_l2() {
        let model = split_model(0.0, 0.0, 50.0);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = BlockDensity::from_full(&random_density(&mut rng, 4), 2).unwrap();
        let y = split_evolve_second_order(&model, &x, 0.1).unwrap();
        let z = exp_l2(&x, 0.1, 50.0).unwrap();
        assert!((y.to_full() - z.to_full()).norm() < 1e-15);
    }

    #[test]
    fn split_matches_exact_in_consistent_regime() {
        let model = split_model(1.0, 1.0, 100.0);
        let exact = superop_expm(&model.full_model(), 0.1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..20 {
            let rho = random_density(&mut rng, 4);
            let y = split_evolve_second_order(&model, &BlockDensity::from_full(&rho, 2).unwrap(), 0.1).unwrap();
            let e = apply_superop(&exact, &rho);
            assert!(relative_max_error(&y.to_full(), &e) < 1e-3);
        }
    }

    #[test]
    fn split_offdiagonal_is_small() {
        let model = split_model(1.0, 10.0, 100.0);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..20 {
            let rho = random_density(&mut rng, 4);
            let y = split_evolve_second_order(&model, &BlockDensity::from_full(&rho, 2).unwrap(), 0.1).unwrap();
            assert!(spectral_norm(&y.rho01) <= 3.0 / 100.0);
        }
    }

    #[test]
    fn asymptotic_form_tracks_dyson() {
        let (k, g1, g2, dt) = (1.0, 0.1, 1000.0, 0.1);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for w in [0.0, 0.3] {
            let h0 = number(2) * C64::new(w, 0.0);
            let mut model = split_model(k, g1, g2);
            model.base = LindbladModel::new(
                model.base.hamiltonian() + tensor(&h0, &identity(2)),
                model.base.lindblads().to_vec(),
                CompositeSpace::pair(2, 2),
            )
            .unwrap();
            let p = AsymptoticParams { h0, a: destroy(2), kappa: k, gamma1: g1, gamma2: g2 };
            let s = dyson_superoperator(&model, dt).unwrap();
            let tol = 10.0 * (k / g2).powi(2) + (g1 * dt).powi(3) + (w * dt).powi(3);
            for _ in 0..10 {
                let rho = random_density(&mut rng, 4);
                let x = BlockDensity::from_full(&rho, 2).unwrap();
                let lit = split_evolve_asymptotic(&p, &x, dt).to_full();
                let dy = apply_superop(&s, &rho);
                assert!(hilbert::max_abs(&(lit - dy)) < tol);
            }
        }
    }

    #[test]
    fn repeated_measurement_cases() {
        let p0 = projector(&basis(2, 0));
        let p1 = projector(&basis(2, 1));
        let set = vec![p0.clone(), p1.clone()];
        let diag = Operator::from_diagonal(&DVector::from_vec(vec![C64::new(0.3, 0.0), C64::new(0.7, 0.0)]));
        assert_eq!(repeated_measurement_map(&diag, &set).unwrap(), diag);
        let plus = Ket::from_vec(vec![ONE, ONE]) / C64::new(2f64.sqrt(), 0.0);
        let m = repeated_measurement_map(&projector(&plus), &set).unwrap();
        assert!((&m - identity(2) * C64::new(0.5, 0.0)).norm() < 1e-15);
        assert_eq!(repeated_measurement_map(&m, &set).unwrap(), m);
        assert!(repeated_measurement_map(&diag, &[p0.clone()]).is_err());
        assert!(repeated_measurement_map(&diag, &[p0.clone(), p0 + p1]).is_err());
    }

    #[test]
    fn intermediate_rhs_reductions() {
        let g = 0.3;
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let r = random_density(&mut rng, 3);
        let diag = Operator::from_diagonal(&r.diagonal());
        let x = BlockDensity { rho00: diag.clone(), ..BlockDensity::zeros(3) };
        let d = intermediate_rhs(&x, &Operator::zeros(3, 3), g, 2.0);
        let n = number(3);
        let expected = (&n * &diag + &diag * &n) * C64::new(-g / 2.0, 0.0);
        assert!((d.rho00 - expected).norm() < 1e-14);

        let x = BlockDensity { rho00: r.clone(), rho11: random_density(&mut rng, 3), ..BlockDensity::zeros(3) };
        let d = intermediate_rhs(&x, &number(3), g, 2.0);
        let tr = d.rho00.trace() + d.rho11.trace();
        let top = x.rho11[(2, 2)] * C64::new(-3.0 * g, 0.0);
        assert!((tr - top).norm() < 1e-14);
        let two = BlockDensity { rho00: random_density(&mut rng, 2), rho11: projector(&basis(2, 0)), ..BlockDensity::zeros(2) };
        let d = intermediate_rhs(&two, &Operator::zeros(2, 2), g, 2.0);
        assert!((d.rho00.trace() + d.rho11.trace()).norm() < 1e-14);
    }

    #[test]
    fn density_matrix_validation() {
        assert!(DensityMatrix::new(projector(&basis(2, 0)), 1.0).is_ok());
        assert!(DensityMatrix::new(projector(&basis(2, 0)), 0.5).is_err());
        assert!(DensityMatrix::new(sigma_z(), 0.0).is_err());
        assert!(DensityMatrix::new(destroy(2), 0.0).is_err());
        let p = DensityMatrix::pure(&(basis(2, 1) * C64::new(2.0, 0.0)));
        assert_eq!(p.weight(), 4.0);
        assert!(trace_norm(p.matrix()) > 3.99);
    }
}
