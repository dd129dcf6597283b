//! Dense complex linear algebra on small composite Hilbert spaces.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::error::{Error, Result};

pub type C64 = Complex64;
pub type Operator = DMatrix<C64>;
pub type Ket = DVector<C64>;

pub const ZERO: C64 = C64::new(0.0, 0.0);
pub const ONE: C64 = C64::new(1.0, 0.0);
pub const I: C64 = C64::new(0.0, 1.0);

/// Ordered list of factor dimensions; factor 0 is the slow index.
#[derive(Clone, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct CompositeSpace {
    factor_dims: Vec<usize>,
}

impl CompositeSpace {
    pub fn new(factor_dims: Vec<usize>) -> Result<Self> {
        if factor_dims.is_empty() || factor_dims.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "factor dimensions must be positive, got {factor_dims:?}"
            )));
        }
        Ok(Self { factor_dims })
    }

    pub fn single(dim: usize) -> Self {
        Self { factor_dims: vec![dim.max(1)] }
    }

    pub fn pair(a: usize, b: usize) -> Self {
        Self { factor_dims: vec![a.max(1), b.max(1)] }
    }

    pub fn factor_dims(&self) -> &[usize] {
        &self.factor_dims
    }

    pub fn dim(&self) -> usize {
        self.factor_dims.iter().product()
    }

    pub fn n_factors(&self) -> usize {
        self.factor_dims.len()
    }

    pub fn check_operator(&self, op: &Operator) -> Result<()> {
        let d = self.dim();
        if op.nrows() != d || op.ncols() != d {
            return Err(Error::DimensionMismatch(format!(
                "operator is {}x{}, space has dim {d}",
                op.nrows(),
                op.ncols()
            )));
        }
        Ok(())
    }

    pub fn check_ket(&self, psi: &Ket) -> Result<()> {
        if psi.len() != self.dim() {
            return Err(Error::DimensionMismatch(format!(
                "ket has length {}, space has dim {}",
                psi.len(),
                self.dim()
            )));
        }
        Ok(())
    }

    fn two_factors(&self) -> Result<(usize, usize)> {
        match self.factor_dims.as_slice() {
            [a, b] => Ok((*a, *b)),
            _ => Err(Error::DimensionMismatch(format!(
                "two-factor space required, got {:?}",
                self.factor_dims
            ))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct SchmidtDecomposition {
    pub coefficients: Vec<f64>,
    pub left_vectors: Vec<Ket>,
    pub right_vectors: Vec<Ket>,
}

impl SchmidtDecomposition {
    pub fn reconstruct(&self) -> Ket {
        let dl = self.left_vectors.first().map_or(0, |v| v.len());
        let dr = self.right_vectors.first().map_or(0, |v| v.len());
        let mut out = Ket::zeros(dl * dr);
        for ((c, a), b) in self
            .coefficients
            .iter()
            .zip(&self.left_vectors)
            .zip(&self.right_vectors)
        {
            out += tensor_ket(a, b) * C64::new(*c, 0.0);
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct HermEigen {
    pub values: Vec<f64>,
    pub vectors: Vec<Ket>,
}

pub fn identity(dim: usize) -> Operator {
    Operator::identity(dim, dim)
}

/// Truncated lowering operator, a|n> = sqrt(n)|n-1>.
pub fn destroy(dim: usize) -> Operator {
    let mut a = Operator::zeros(dim, dim);
    for n in 1..dim {
        a[(n - 1, n)] = C64::new((n as f64).sqrt(), 0.0);
    }
    a
}

pub fn create(dim: usize) -> Operator {
    dagger(&destroy(dim))
}

pub fn number(dim: usize) -> Operator {
    Operator::from_diagonal(&DVector::from_fn(dim, |n, _| C64::new(n as f64, 0.0)))
}

pub fn basis(dim: usize, index: usize) -> Ket {
    let mut k = Ket::zeros(dim);
    k[index] = ONE;
    k
}

pub fn sigma_x() -> Operator {
    Operator::from_row_slice(2, 2, &[ZERO, ONE, ONE, ZERO])
}

pub fn sigma_y() -> Operator {
    Operator::from_row_slice(2, 2, &[ZERO, -I, I, ZERO])
}

pub fn sigma_z() -> Operator {
    Operator::from_row_slice(2, 2, &[ONE, ZERO, ZERO, -ONE])
}

pub fn dagger(a: &Operator) -> Operator {
    a.adjoint()
}

pub fn outer(a: &Ket, b: &Ket) -> Operator {
    a * b.adjoint()
}

pub fn projector(psi: &Ket) -> Operator {
    outer(psi, psi)
}

pub fn trace(a: &Operator) -> C64 {
    a.trace()
}

pub fn commutator(a: &Operator, b: &Operator) -> Operator {
    a * b - b * a
}

pub fn anticommutator(a: &Operator, b: &Operator) -> Operator {
    a * b + b * a
}

pub fn expect(op: &Operator, psi: &Ket) -> C64 {
    psi.dotc(&(op * psi))
}

/// Kronecker product with `a` as the slow index.
pub fn tensor(a: &Operator, b: &Operator) -> Operator {
    a.kronecker(b)
}

pub fn tensor_ket(a: &Ket, b: &Ket) -> Ket {
    a.kronecker(b)
}

pub fn tensor_all(ops: &[Operator]) -> Operator {
    let mut it = ops.iter();
    let first = it.next().cloned().unwrap_or_else(|| identity(1));
    it.fold(first, |acc, op| tensor(&acc, op))
}

/// Trace over every factor except `keep` (two-factor spaces).
pub fn partial_trace(x: &Operator, space: &CompositeSpace, keep: usize) -> Result<Operator> {
    let (d1, d2) = space.two_factors()?;
    space.check_operator(x)?;
    match keep {
        0 => Ok(Operator::from_fn(d1, d1, |i, k| {
            (0..d2).map(|j| x[(i * d2 + j, k * d2 + j)]).sum()
        })),
        1 => Ok(Operator::from_fn(d2, d2, |j, l| {
            (0..d1).map(|i| x[(i * d2 + j, i * d2 + l)]).sum()
        })),
        _ => Err(Error::DimensionMismatch(format!(
            "factor index {keep} out of range for two-factor space"
        ))),
    }
}

pub fn one_norm(a: &Operator) -> f64 {
    a.column_iter()
        .map(|c| c.iter().map(|z| z.norm()).sum::<f64>())
        .fold(0.0, f64::max)
}

pub fn frobenius(a: &Operator) -> f64 {
    a.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

pub fn max_abs(a: &Operator) -> f64 {
    a.iter().map(|z| z.norm()).fold(0.0, f64::max)
}

pub fn spectral_norm(a: &Operator) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    a.clone().svd(false, false).singular_values.max()
}

pub fn trace_norm(a: &Operator) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    a.clone().svd(false, false).singular_values.sum()
}

pub fn trace_distance(a: &Operator, b: &Operator) -> f64 {
    0.5 * trace_norm(&(a - b))
}

/// Squared overlap |<a|b>|^2 of two normalized kets.
pub fn fidelity(a: &Ket, b: &Ket) -> f64 {
    a.dotc(b).norm_sqr() / (a.norm_squared() * b.norm_squared())
}

pub fn hermiticity_defect(a: &Operator) -> f64 {
    frobenius(&(a - a.adjoint()))
}

pub fn check_finite(a: &Operator, what: &'static str) -> Result<()> {
    if a.iter().all(|z| z.re.is_finite() && z.im.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what))
    }
}

pub fn check_hermitian(a: &Operator, tol: f64) -> Result<()> {
    let defect = hermiticity_defect(a);
    let norm = frobenius(a);
    if defect > tol * norm.max(f64::MIN_POSITIVE) && defect > 0.0 {
        return Err(Error::NotHermitian { defect, norm });
    }
    Ok(())
}

const PADE3: [f64; 4] = [120.0, 60.0, 12.0, 1.0];
const PADE5: [f64; 6] = [30240.0, 15120.0, 3360.0, 420.0, 30.0, 1.0];
const PADE7: [f64; 8] = [
    17297280.0, 8648640.0, 1995840.0, 277200.0, 25200.0, 1512.0, 56.0, 1.0,
];
const PADE9: [f64; 10] = [
    17643225600.0,
    8821612800.0,
    2075673600.0,
    302702400.0,
    30270240.0,
    2162160.0,
    110880.0,
    3960.0,
    90.0,
    1.0,
];
const PADE13: [f64; 14] = [
    64764752532480000.0,
    32382376266240000.0,
    7771770303897600.0,
    1187353796428800.0,
    129060195264000.0,
    10559470521600.0,
    670442572800.0,
    33522128640.0,
    1323241920.0,
    40840800.0,
    960960.0,
    16380.0,
    182.0,
    1.0,
];
const THETA: [f64; 5] = [
    1.495585217958292e-2,
    2.539398330063230e-1,
    9.504178996162932e-1,
    2.097847961257068,
    5.371920351148152,
];

fn scaled(a: &Operator, c: f64) -> Operator {
    a * C64::new(c, 0.0)
}

fn pade_low(a: &Operator, b: &[f64]) -> (Operator, Operator) {
    let n = a.nrows();
    let a2 = a * a;
    let mut pow = identity(n);
    let mut u = Operator::zeros(n, n);
    let mut v = Operator::zeros(n, n);
    for k in 0..b.len() / 2 {
        v += scaled(&pow, b[2 * k]);
        u += scaled(&pow, b[2 * k + 1]);
        pow = &pow * &a2;
    }
    (a * u, v)
}

fn pade13(a: &Operator) -> (Operator, Operator) {
    let b = &PADE13;
    let n = a.nrows();
    let id = identity(n);
    let a2 = a * a;
    let a4 = &a2 * &a2;
    let a6 = &a4 * &a2;
    let inner_u = scaled(&a6, b[13]) + scaled(&a4, b[11]) + scaled(&a2, b[9]);
    let u = a * (&a6 * inner_u
        + scaled(&a6, b[7])
        + scaled(&a4, b[5])
        + scaled(&a2, b[3])
        + scaled(&id, b[1]));
    let inner_v = scaled(&a6, b[12]) + scaled(&a4, b[10]) + scaled(&a2, b[8]);
    let v = &a6 * inner_v + scaled(&a6, b[6]) + scaled(&a4, b[4]) + scaled(&a2, b[2]) + scaled(&id, b[0]);
    (u, v)
}

/// Matrix exponential by scaling and squaring with Pade approximants.
pub fn expm(a: &Operator) -> Result<Operator> {
    if a.nrows() != a.ncols() {
        return Err(Error::DimensionMismatch("expm needs a square matrix".into()));
    }
    check_finite(a, "expm input")?;
    let n = a.nrows();
    if n == 0 {
        return Ok(a.clone());
    }
    let norm = one_norm(a);
    let (u, v, s) = if norm <= THETA[0] {
        let (u, v) = pade_low(a, &PADE3);
        (u, v, 0)
    } else if norm <= THETA[1] {
        let (u, v) = pade_low(a, &PADE5);
        (u, v, 0)
    } else if norm <= THETA[2] {
        let (u, v) = pade_low(a, &PADE7);
        (u, v, 0)
    } else if norm <= THETA[3] {
        let (u, v) = pade_low(a, &PADE9);
        (u, v, 0)
    } else {
        let s = (norm / THETA[4]).log2().ceil().max(0.0) as i32;
        if s > 1000 {
            return Err(Error::ExpmOverflow { norm });
        }
        let (u, v) = pade13(&scaled(a, 2f64.powi(-s)));
        (u, v, s)
    };
    let p = &v + &u;
    let q = &v - &u;
    let mut r = q
        .lu()
        .solve(&p)
        .ok_or(Error::ExpmOverflow { norm })?;
    for _ in 0..s {
        r = &r * &r;
        if !r.iter().all(|z| z.re.is_finite() && z.im.is_finite()) {
            return Err(Error::ExpmOverflow { norm });
        }
    }
    check_finite(&r, "expm result").map_err(|_| Error::ExpmOverflow { norm })?;
    Ok(r)
}

fn fix_phase(v: &mut Ket) {
    let max = v.iter().map(|z| z.norm()).fold(0.0, f64::max);
    if max == 0.0 {
        return;
    }
    let pivot = v
        .iter()
        .find(|z| z.norm() >= max * (1.0 - 1e-12))
        .copied()
        .unwrap_or(ONE);
    let phase = pivot.conj() / pivot.norm();
    *v *= phase;
}

/// Hermitian eigendecomposition, eigenvalues ascending.
///
/// Each eigenvector is rotated so its first component of largest modulus is
/// real and non-negative.
pub fn herm_eig(a: &Operator) -> Result<HermEigen> {
    if a.nrows() != a.ncols() {
        return Err(Error::DimensionMismatch("herm_eig needs a square matrix".into()));
    }
    check_finite(a, "herm_eig input")?;
    check_hermitian(a, 1e-10)?;
    let sym = (a + a.adjoint()) * C64::new(0.5, 0.0);
    let eig = sym.symmetric_eigen();
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = order
        .iter()
        .map(|&i| {
            let mut v: Ket = eig.eigenvectors.column(i).into_owned();
            let n = v.norm();
            if n > 0.0 {
                v /= C64::new(n, 0.0);
            }
            fix_phase(&mut v);
            v
        })
        .collect();
    Ok(HermEigen { values, vectors })
}

pub fn min_eigenvalue(a: &Operator) -> Result<f64> {
    Ok(herm_eig(a)?.values.first().copied().unwrap_or(0.0))
}

/// Schmidt decomposition of a ket on a two-factor space.
pub fn schmidt(psi: &Ket, space: &CompositeSpace) -> Result<SchmidtDecomposition> {
    let (d1, d2) = space.two_factors()?;
    space.check_ket(psi)?;
    let m = Operator::from_fn(d1, d2, |i, j| psi[i * d2 + j]);
    let svd = m.svd(true, true);
    let u = svd.u.ok_or(Error::NonFinite("schmidt left vectors"))?;
    let v_t = svd.v_t.ok_or(Error::NonFinite("schmidt right vectors"))?;
    let sv = &svd.singular_values;
    let mut order: Vec<usize> = (0..sv.len()).collect();
    order.sort_by(|&i, &j| sv[j].total_cmp(&sv[i]));
    let top = order.first().map_or(0.0, |&i| sv[i]);
    let mut out = SchmidtDecomposition {
        coefficients: Vec::new(),
        left_vectors: Vec::new(),
        right_vectors: Vec::new(),
    };
    for &k in &order {
        if sv[k] <= top * 1e-12 || sv[k] == 0.0 {
            continue;
        }
        out.coefficients.push(sv[k]);
        out.left_vectors.push(u.column(k).into_owned());
        out.right_vectors
            .push(Ket::from_fn(d2, |j, _| v_t[(k, j)]));
    }
    Ok(out)
}
