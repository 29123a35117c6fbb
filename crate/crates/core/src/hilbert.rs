//! States, operators and density matrices on small truncated Hilbert spaces.

use nalgebra::{DMatrix, DVector};

use crate::{c, Error, Result, C64, I};

#[derive(Debug, Clone, PartialEq)]
pub struct StateVector {
    pub amps: DVector<C64>,
}

impl StateVector {
    pub fn new(amps: Vec<C64>) -> Result<Self> {
        if amps.is_empty() {
            return Err(Error::Invalid("state vector must have dim >= 1".into()));
        }
        if amps.iter().any(|a| !a.re.is_finite() || !a.im.is_finite()) {
            return Err(Error::Invalid("state vector has non-finite amplitudes".into()));
        }
        Ok(Self { amps: DVector::from_vec(amps) })
    }

    pub fn basis(dim: usize, k: usize) -> Self {
        let mut amps = DVector::zeros(dim);
        amps[k] = c(1.0, 0.0);
        Self { amps }
    }

    pub fn dim(&self) -> usize {
        self.amps.len()
    }

    pub fn norm_sq(&self) -> f64 {
        self.amps.iter().map(|a| a.norm_sqr()).sum()
    }

    pub fn normalized(&self) -> Result<Self> {
        let n2 = self.norm_sq();
        if n2 < 1e-30 {
            return Err(Error::ZeroNorm);
        }
        Ok(Self { amps: &self.amps / c(n2.sqrt(), 0.0) })
    }

    pub fn as_slice(&self) -> &[C64] {
        self.amps.as_slice()
    }

    pub fn inner(&self, other: &StateVector) -> C64 {
        self.amps.dotc(&other.amps)
    }

    /// Tensor product `self ⊗ other` with `self` as the slow index.
    pub fn kron(&self, other: &StateVector) -> StateVector {
        Self { amps: self.amps.kronecker(&other.amps) }
    }

    pub fn projector(&self) -> DensityMatrix {
        DensityMatrix { m: &self.amps * self.amps.adjoint() }
    }
}

/// Dense complex square matrix with a cached list of nonzero entries for
/// fast application to trajectory states.
#[derive(Debug, Clone)]
pub struct OperatorMatrix {
    m: DMatrix<C64>,
    hermitian: bool,
    nz: Vec<(u32, u32, C64)>,
}

impl PartialEq for OperatorMatrix {
    fn eq(&self, other: &Self) -> bool {
        self.m == other.m
    }
}

impl OperatorMatrix {
    pub fn new(m: DMatrix<C64>) -> Result<Self> {
        if m.nrows() != m.ncols() || m.nrows() == 0 {
            return Err(Error::Invalid(format!(
                "operator must be square and non-empty, got {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
        if m.iter().any(|a| !a.re.is_finite() || !a.im.is_finite()) {
            return Err(Error::Invalid("operator has non-finite entries".into()));
        }
        let nz = nonzeros(&m);
        Ok(Self { m, hermitian: false, nz })
    }

    /// Builds an operator flagged Hermitian; the flag is verified to 1e-12.
    pub fn hermitian(m: DMatrix<C64>) -> Result<Self> {
        let mut op = Self::new(m)?;
        let dev = hermiticity_defect(&op.m);
        if dev > 1e-12 {
            return Err(Error::Invalid(format!("operator is not Hermitian: max|A - A†| = {dev:.3e}")));
        }
        op.hermitian = true;
        Ok(op)
    }

    pub fn from_fn(dim: usize, f: impl Fn(usize, usize) -> C64) -> Self {
        Self::new(DMatrix::from_fn(dim, dim, f)).expect("finite square matrix")
    }

    pub fn identity(dim: usize) -> Self {
        Self::new(DMatrix::identity(dim, dim)).expect("identity")
    }

    pub fn zeros(dim: usize) -> Self {
        Self::new(DMatrix::zeros(dim, dim)).expect("zeros")
    }

    pub fn dim(&self) -> usize {
        self.m.nrows()
    }

    pub fn is_hermitian(&self) -> bool {
        self.hermitian
    }

    pub fn matrix(&self) -> &DMatrix<C64> {
        &self.m
    }

    pub fn nnz(&self) -> usize {
        self.nz.len()
    }

    pub fn entry(&self, r: usize, col: usize) -> C64 {
        self.m[(r, col)]
    }

    pub fn dagger(&self) -> Self {
        let mut op = Self::new(self.m.adjoint()).expect("adjoint of valid operator");
        op.hermitian = self.hermitian;
        op
    }

    pub fn mul(&self, other: &Self) -> Self {
        Self::new(&self.m * &other.m).expect("product of valid operators")
    }

    pub fn add(&self, other: &Self) -> Self {
        Self::new(&self.m + &other.m).expect("sum of valid operators")
    }

    pub fn scale(&self, a: C64) -> Self {
        let mut op = Self::new(&self.m * a).expect("scaled operator");
        op.hermitian = self.hermitian && a.im == 0.0;
        op
    }

    pub fn kron(&self, other: &Self) -> Self {
        let mut op = Self::new(self.m.kronecker(&other.m)).expect("kronecker product");
        op.hermitian = self.hermitian && other.hermitian;
        op
    }

    pub fn commutator(&self, other: &Self) -> Self {
        Self::new(&self.m * &other.m - &other.m * &self.m).expect("commutator")
    }

    /// Marks the operator Hermitian after verifying it.
    pub fn into_hermitian(self) -> Result<Self> {
        Self::hermitian(self.m)
    }

    /// `y = A x`
    #[inline]
    pub fn apply_into(&self, x: &[C64], y: &mut [C64]) {
        y.iter_mut().for_each(|v| *v = C64::new(0.0, 0.0));
        self.apply_add(C64::new(1.0, 0.0), x, y);
    }

    /// `y += a·A x`
    #[inline]
    pub fn apply_add(&self, a: C64, x: &[C64], y: &mut [C64]) {
        for &(r, col, v) in &self.nz {
            y[r as usize] += a * v * x[col as usize];
        }
    }

    pub fn apply(&self, psi: &StateVector) -> StateVector {
        StateVector { amps: &self.m * &psi.amps }
    }
}

fn nonzeros(m: &DMatrix<C64>) -> Vec<(u32, u32, C64)> {
    let mut nz = Vec::new();
    for r in 0..m.nrows() {
        for col in 0..m.ncols() {
            let v = m[(r, col)];
            if v.re != 0.0 || v.im != 0.0 {
                nz.push((r as u32, col as u32, v));
            }
        }
    }
    nz
}

fn hermiticity_defect(m: &DMatrix<C64>) -> f64 {
    let mut dev: f64 = 0.0;
    for r in 0..m.nrows() {
        for col in 0..m.ncols() {
            dev = dev.max((m[(r, col)] - m[(col, r)].conj()).norm());
        }
    }
    dev
}

#[derive(Debug, Clone, PartialEq)]
pub struct DensityMatrix {
    pub m: DMatrix<C64>,
}

impl DensityMatrix {
    pub fn new(m: DMatrix<C64>) -> Result<Self> {
        if m.nrows() != m.ncols() {
            return Err(Error::DimensionMismatch { expected: m.nrows(), found: m.ncols() });
        }
        Ok(Self { m })
    }

    pub fn dim(&self) -> usize {
        self.m.nrows()
    }

    pub fn trace(&self) -> C64 {
        self.m.trace()
    }

    pub fn hermiticity_defect(&self) -> f64 {
        hermiticity_defect(&self.m)
    }

    /// `(ρ + ρ†)/2`
    pub fn symmetrized(&self) -> Self {
        Self { m: (&self.m + self.m.adjoint()) * c(0.5, 0.0) }
    }

    pub fn eigenvalues(&self) -> Vec<f64> {
        let h = self.symmetrized();
        let mut ev: Vec<f64> = h.m.symmetric_eigenvalues().iter().copied().collect();
        ev.sort_by(|a, b| a.total_cmp(b));
        ev
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.eigenvalues()[0]
    }

    pub fn expectation(&self, a: &OperatorMatrix) -> C64 {
        (a.matrix() * &self.m).trace()
    }

    pub fn fidelity_with(&self, psi: &StateVector) -> f64 {
        (psi.amps.adjoint() * &self.m * &psi.amps)[(0, 0)].re
    }

    pub fn max_abs_diff(&self, other: &DensityMatrix) -> f64 {
        (&self.m - &other.m).iter().map(|v| v.norm()).fold(0.0, f64::max)
    }
}

/// Tensor-product index bookkeeping; the first factor is the slowest index.
#[derive(Debug, Clone, PartialEq)]
pub struct CompositeSpace {
    pub factor_dims: Vec<usize>,
}

impl CompositeSpace {
    pub fn new(factor_dims: Vec<usize>) -> Result<Self> {
        if factor_dims.is_empty() || factor_dims.contains(&0) {
            return Err(Error::Invalid("composite space needs positive factor dims".into()));
        }
        Ok(Self { factor_dims })
    }

    pub fn total_dim(&self) -> usize {
        self.factor_dims.iter().product()
    }

    pub fn to_factors(&self, mut idx: usize) -> Vec<usize> {
        let mut out = vec![0; self.factor_dims.len()];
        for (k, &d) in self.factor_dims.iter().enumerate().rev() {
            out[k] = idx % d;
            idx /= d;
        }
        out
    }

    pub fn to_index(&self, factors: &[usize]) -> usize {
        factors.iter().zip(&self.factor_dims).fold(0, |acc, (&i, &d)| acc * d + i)
    }

    /// `I ⊗ … ⊗ op ⊗ … ⊗ I` with `op` on factor `k`.
    pub fn embed(&self, op: &OperatorMatrix, k: usize) -> Result<OperatorMatrix> {
        if op.dim() != self.factor_dims[k] {
            return Err(Error::DimensionMismatch { expected: self.factor_dims[k], found: op.dim() });
        }
        let mut out = OperatorMatrix::identity(1);
        for (j, &d) in self.factor_dims.iter().enumerate() {
            let f = if j == k { op.clone() } else { OperatorMatrix::identity(d) };
            out = out.kron(&f);
        }
        Ok(out)
    }

    fn split(&self, keep: usize) -> Result<(usize, usize, usize)> {
        if keep >= self.factor_dims.len() {
            return Err(Error::Invalid(format!("factor index {keep} out of range")));
        }
        let before: usize = self.factor_dims[..keep].iter().product();
        let after: usize = self.factor_dims[keep + 1..].iter().product();
        Ok((before, self.factor_dims[keep], after))
    }

    /// Reduced density matrix of factor `keep` for a pure composite state.
    pub fn partial_trace_pure(&self, psi: &[C64], keep: usize) -> Result<DensityMatrix> {
        if psi.len() != self.total_dim() {
            return Err(Error::DimensionMismatch { expected: self.total_dim(), found: psi.len() });
        }
        let (nb, nk, na) = self.split(keep)?;
        let mut rho = DMatrix::zeros(nk, nk);
        for b in 0..nb {
            for a in 0..na {
                for i in 0..nk {
                    let x = psi[(b * nk + i) * na + a];
                    if x == C64::new(0.0, 0.0) {
                        continue;
                    }
                    for j in 0..nk {
                        rho[(i, j)] += x * psi[(b * nk + j) * na + a].conj();
                    }
                }
            }
        }
        Ok(DensityMatrix { m: rho })
    }

    pub fn partial_trace(&self, rho: &DensityMatrix, keep: usize) -> Result<DensityMatrix> {
        if rho.dim() != self.total_dim() {
            return Err(Error::DimensionMismatch { expected: self.total_dim(), found: rho.dim() });
        }
        let (nb, nk, na) = self.split(keep)?;
        let mut out = DMatrix::zeros(nk, nk);
        for i in 0..nk {
            for j in 0..nk {
                let mut s = C64::new(0.0, 0.0);
                for b in 0..nb {
                    for a in 0..na {
                        s += rho.m[((b * nk + i) * na + a, (b * nk + j) * na + a)];
                    }
                }
                out[(i, j)] = s;
            }
        }
        Ok(DensityMatrix { m: out })
    }
}

pub struct SpinOps {
    pub sx: OperatorMatrix,
    pub sy: OperatorMatrix,
    pub sz: OperatorMatrix,
    pub sm: OperatorMatrix,
    pub sp: OperatorMatrix,
}

/// Index 0 is |↑⟩, index 1 is |↓⟩.
pub fn spin_operators() -> SpinOps {
    let z = C64::new(0.0, 0.0);
    let one = C64::new(1.0, 0.0);
    let m = |a: [C64; 4]| DMatrix::from_row_slice(2, 2, &a);
    SpinOps {
        sx: OperatorMatrix::hermitian(m([z, one, one, z])).unwrap(),
        sy: OperatorMatrix::hermitian(m([z, -I, I, z])).unwrap(),
        sz: OperatorMatrix::hermitian(m([one, z, z, -one])).unwrap(),
        sm: OperatorMatrix::new(m([z, z, one, z])).unwrap(),
        sp: OperatorMatrix::new(m([z, one, z, z])).unwrap(),
    }
}

pub fn spin_up() -> StateVector {
    StateVector::basis(2, 0)
}

pub fn spin_down() -> StateVector {
    StateVector::basis(2, 1)
}

pub struct BosonOps {
    pub a: OperatorMatrix,
    pub ad: OperatorMatrix,
    pub q: OperatorMatrix,
    pub p: OperatorMatrix,
    pub n: OperatorMatrix,
}

pub fn boson_operators(n_trunc: usize) -> Result<BosonOps> {
    if n_trunc < 2 {
        return Err(Error::Invalid(format!("n_trunc must be >= 2, got {n_trunc}")));
    }
    let a = OperatorMatrix::from_fn(n_trunc, |r, col| {
        if col == r + 1 {
            c((col as f64).sqrt(), 0.0)
        } else {
            c(0.0, 0.0)
        }
    });
    let ad = a.dagger();
    let s = std::f64::consts::FRAC_1_SQRT_2;
    let q = a.add(&ad).scale(c(s, 0.0)).into_hermitian()?;
    let p = a.add(&ad.scale(c(-1.0, 0.0))).scale(c(0.0, -s)).into_hermitian()?;
    let n = ad.mul(&a).into_hermitian()?;
    Ok(BosonOps { a, ad, q, p, n })
}

fn ln_factorial(n: usize) -> f64 {
    (2..=n).map(|k| (k as f64).ln()).sum()
}

/// Poisson tail `Σ_{n≥n_trunc} e^{-μ} μ^n / n!`.
pub fn poisson_tail(mu: f64, n_trunc: usize) -> f64 {
    if mu == 0.0 {
        return 0.0;
    }
    let mut ln_p = -mu + n_trunc as f64 * mu.ln() - ln_factorial(n_trunc);
    let mut tail = 0.0;
    let mut n = n_trunc;
    loop {
        let p = ln_p.exp();
        tail += p;
        n += 1;
        ln_p += mu.ln() - (n as f64).ln();
        if (n as f64) > mu && p < 1e-300_f64.max(tail * 1e-17) {
            break;
        }
        if n > n_trunc + 100_000 {
            break;
        }
    }
    tail
}

pub const COHERENT_TAIL_LIMIT: f64 = 1e-8;

pub fn coherent_state(beta: C64, n_trunc: usize) -> Result<StateVector> {
    let tail = poisson_tail(beta.norm_sqr(), n_trunc);
    if tail > COHERENT_TAIL_LIMIT {
        return Err(Error::Truncation { tail, limit: COHERENT_TAIL_LIMIT, n_trunc });
    }
    StateVector { amps: DVector::from_vec(coherent_amps(beta, n_trunc)) }.normalized()
}

/// Untruncated coherent-state amplitudes `e^{-|β|²/2} βⁿ/√n!` for `n < n`.
fn coherent_amps(beta: C64, n: usize) -> Vec<C64> {
    let mut out = Vec::with_capacity(n);
    let mut a = c((-0.5 * beta.norm_sqr()).exp(), 0.0);
    for k in 0..n {
        if k > 0 {
            a = a * beta / (k as f64).sqrt();
        }
        out.push(a);
    }
    out
}

pub fn cat_state(beta: C64, n_trunc: usize) -> Result<StateVector> {
    let plus = coherent_state(beta, n_trunc)?;
    let minus = coherent_state(-beta, n_trunc)?;
    StateVector { amps: plus.amps + minus.amps }.normalized()
}

pub fn fock_state(n: usize, n_trunc: usize) -> Result<StateVector> {
    if n >= n_trunc {
        return Err(Error::Invalid(format!("Fock level {n} outside truncation {n_trunc}")));
    }
    Ok(StateVector::basis(n_trunc, n))
}

pub fn expectation(psi: &StateVector, a: &OperatorMatrix) -> Result<C64> {
    if psi.dim() != a.dim() {
        return Err(Error::DimensionMismatch { expected: a.dim(), found: psi.dim() });
    }
    let n2 = psi.norm_sq();
    if n2 < 1e-30 {
        return Err(Error::ZeroNorm);
    }
    Ok(psi.amps.dotc(&(a.matrix() * &psi.amps)) / n2)
}

/// Phase-space rectangle in (Re β, Im β).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QGrid {
    pub re_min: f64,
    pub re_max: f64,
    pub im_min: f64,
    pub im_max: f64,
    pub n_re: usize,
    pub n_im: usize,
}

impl Default for QGrid {
    fn default() -> Self {
        Self { re_min: -4.5, re_max: 4.5, im_min: -4.5, im_max: 4.5, n_re: 121, n_im: 121 }
    }
}

impl QGrid {
    pub fn re(&self, j: usize) -> f64 {
        axis(self.re_min, self.re_max, self.n_re, j)
    }

    pub fn im(&self, i: usize) -> f64 {
        axis(self.im_min, self.im_max, self.n_im, i)
    }

    pub fn cell_area(&self) -> f64 {
        let dr = if self.n_re > 1 { (self.re_max - self.re_min) / (self.n_re - 1) as f64 } else { 1.0 };
        let di = if self.n_im > 1 { (self.im_max - self.im_min) / (self.n_im - 1) as f64 } else { 1.0 };
        dr * di
    }
}

fn axis(lo: f64, hi: f64, n: usize, k: usize) -> f64 {
    if n <= 1 {
        lo
    } else {
        lo + (hi - lo) * k as f64 / (n - 1) as f64
    }
}

/// Husimi function `Q(β) = |⟨β|ψ⟩|²/π`; rows index Im β, columns Re β.
///
/// The overlap is taken with the untruncated coherent state, which is exact
/// because ψ has no weight outside the truncated space.
pub fn q_function(psi: &StateVector, grid: &QGrid) -> Result<DMatrix<f64>> {
    let psi = psi.normalized()?;
    let n = psi.dim();
    let mut q = DMatrix::zeros(grid.n_im, grid.n_re);
    for i in 0..grid.n_im {
        for j in 0..grid.n_re {
            let beta = c(grid.re(j), grid.im(i));
            let amps = coherent_amps(beta, n);
            let ov: C64 = amps.iter().zip(psi.amps.iter()).map(|(b, p)| b.conj() * p).sum();
            q[(i, j)] = ov.norm_sqr() / std::f64::consts::PI;
        }
    }
    Ok(q)
}

/// Population of the top two Fock levels of an oscillator state.
pub fn top_fock_population(psi: &[C64]) -> f64 {
    let n2: f64 = psi.iter().map(|a| a.norm_sqr()).sum();
    let k = psi.len();
    let top: f64 = psi[k.saturating_sub(2)..].iter().map(|a| a.norm_sqr()).sum();
    top / n2
}

pub const TRUNCATION_SUSPECT_LIMIT: f64 = 1e-6;

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: C64, b: C64, tol: f64) -> bool {
        (a - b).norm() <= tol
    }

    #[test]
    fn pauli_action_and_algebra() {
        let s = spin_operators();
        let up = spin_up();
        let down = spin_down();
        assert_eq!(s.sz.apply(&up), up);
        assert_eq!(s.sz.apply(&down).amps, -down.amps.clone());
        assert_eq!(s.sm.apply(&up), down);
        assert_eq!(s.sm.apply(&down).norm_sq(), 0.0);
        let comm = s.sp.commutator(&s.sm);
        assert_eq!(comm, s.sz);
        let sm = s.sx.add(&s.sy.scale(-I)).scale(c(0.5, 0.0));
        assert_eq!(sm, s.sm);
    }

    #[test]
    fn boson_algebra() {
        let b = boson_operators(12).unwrap();
        let comm = b.q.commutator(&b.p);
        for r in 0..11 {
            for col in 0..11 {
                let want = if r == col { I } else { c(0.0, 0.0) };
                assert!(close(comm.entry(r, col), want, 1e-13), "[q,p]({r},{col})");
            }
        }
        for k in 0..12 {
            assert!(close(b.n.entry(k, k), c(k as f64, 0.0), 1e-13));
        }
        let vac = StateVector::basis(12, 0);
        let q2 = b.q.mul(&b.q);
        assert!(close(expectation(&vac, &q2).unwrap(), c(0.5, 0.0), 1e-15));
        assert!(boson_operators(1).is_err());
    }

    #[test]
    fn coherent_states() {
        assert_eq!(coherent_state(c(0.0, 0.0), 10).unwrap(), StateVector::basis(10, 0));
        let b = boson_operators(40).unwrap();
        let beta = c(2.0, 0.0);
        let psi = coherent_state(beta, 40).unwrap();
        let apsi = b.a.apply(&psi);
        let dev = (apsi.amps - psi.amps.clone() * beta).iter().map(|v| v.norm()).fold(0.0, f64::max);
        assert!(dev < 1e-6, "a|β⟩ - β|β⟩ = {dev}");
        let minus = coherent_state(-beta, 40).unwrap();
        assert!((psi.inner(&minus).re - (-8.0f64).exp()).abs() < 1e-12);
        assert!((expectation(&psi, &b.n).unwrap().re - 4.0).abs() < 1e-8);
        assert!(matches!(coherent_state(c(4.0, 0.0), 20), Err(Error::Truncation { .. })));
    }

    #[test]
    fn cat_parity_and_norm() {
        let cat = cat_state(c(2.0, 0.0), 40).unwrap();
        for n in (1..40).step_by(2) {
            assert_eq!(cat.amps[n].norm(), 0.0);
        }
        assert!((cat.norm_sq() - 1.0).abs() < 1e-14);
        let raw = coherent_amps(c(2.0, 0.0), 60);
        let raw_m = coherent_amps(c(-2.0, 0.0), 60);
        let n2: f64 = raw.iter().zip(&raw_m).map(|(a, b)| (a + b).norm_sqr()).sum();
        assert!((n2.sqrt() - (2.0 + 2.0 * (-8.0f64).exp()).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn sigma_z_expectation_of_fig1_state() {
        let s = spin_operators();
        let psi = StateVector::new(vec![c(1.0, 2.0), c(1.0, 1.0)]).unwrap();
        assert!(close(expectation(&psi, &s.sz).unwrap(), c(3.0 / 7.0, 0.0), 1e-15));
        assert!(close(expectation(&spin_up(), &s.sz).unwrap(), c(1.0, 0.0), 0.0));
        let zero = StateVector::new(vec![c(0.0, 0.0); 2]).unwrap();
        assert_eq!(expectation(&zero, &s.sz), Err(Error::ZeroNorm));
    }

    #[test]
    fn partial_traces() {
        let sp = CompositeSpace::new(vec![2, 3]).unwrap();
        for idx in 0..6 {
            assert_eq!(sp.to_index(&sp.to_factors(idx)), idx);
        }
        let bell = [c(0.5f64.sqrt(), 0.0), c(0.0, 0.0), c(0.0, 0.0), c(0.0, 0.0), c(0.5f64.sqrt(), 0.0), c(0.0, 0.0)];
        let rho = sp.partial_trace_pure(&bell, 0).unwrap();
        assert!(close(rho.m[(0, 0)], c(0.5, 0.0), 1e-15));
        assert!(close(rho.m[(1, 1)], c(0.5, 0.0), 1e-15));
        assert_eq!(rho.m[(0, 1)], c(0.0, 0.0));
        let full = DensityMatrix { m: DVector::from_row_slice(&bell) * DVector::from_row_slice(&bell).adjoint() };
        assert!(sp.partial_trace(&full, 0).unwrap().max_abs_diff(&rho) < 1e-15);
    }

    #[test]
    fn cut_state_reduces_to_spin_matrix() {
        // c0|↓0⟩ + c1|↑0⟩ + c2|↓1⟩ on spin ⊗ oscillator(2)
        let (c0, c1, c2) = (c(0.3, 0.1), c(-0.2, 0.5), c(0.4, -0.3));
        let sp = CompositeSpace::new(vec![2, 2]).unwrap();
        let mut psi = vec![c(0.0, 0.0); 4];
        psi[sp.to_index(&[1, 0])] = c0;
        psi[sp.to_index(&[0, 0])] = c1;
        psi[sp.to_index(&[1, 1])] = c2;
        let rho = sp.partial_trace_pure(&psi, 0).unwrap();
        assert!(close(rho.m[(0, 0)], c(c1.norm_sqr(), 0.0), 1e-15));
        assert!(close(rho.m[(0, 1)], c0.conj() * c1, 1e-15));
        assert!(close(rho.m[(1, 0)], c0 * c1.conj(), 1e-15));
        assert!(close(rho.m[(1, 1)], c(c0.norm_sqr() + c2.norm_sqr(), 0.0), 1e-15));
    }

    #[test]
    fn q_function_vacuum_and_peaks() {
        let grid = QGrid { n_re: 31, n_im: 31, ..QGrid::default() };
        let vac = StateVector::basis(20, 0);
        let q = q_function(&vac, &grid).unwrap();
        for i in 0..31 {
            for j in 0..31 {
                let b2 = grid.re(j).powi(2) + grid.im(i).powi(2);
                assert!((q[(i, j)] - (-b2).exp() / std::f64::consts::PI).abs() < 1e-15);
            }
        }
        let psi = coherent_state(c(1.5, -0.9), 30).unwrap();
        let q = q_function(&psi, &QGrid::default()).unwrap();
        let (mut bi, mut bj) = (0, 0);
        for i in 0..121 {
            for j in 0..121 {
                if q[(i, j)] > q[(bi, bj)] {
                    (bi, bj) = (i, j);
                }
            }
        }
        assert!((QGrid::default().re(bj) - 1.5).abs() < 0.04);
        assert!((QGrid::default().im(bi) + 0.9).abs() < 0.04);
    }

    #[test]
    fn q_function_cat_has_two_peaks_and_ridge() {
        let grid = QGrid::default();
        let q = q_function(&cat_state(c(2.0, 0.0), 40).unwrap(), &grid).unwrap();
        let at = |re: f64, im: f64| {
            let j = ((re - grid.re_min) / (grid.re_max - grid.re_min) * 120.0).round() as usize;
            let i = ((im - grid.im_min) / (grid.im_max - grid.im_min) * 120.0).round() as usize;
            q[(i, j)]
        };
        assert!(at(2.0, 0.0) > 0.15 && at(-2.0, 0.0) > 0.15);
        assert!(at(0.0, 0.0) < at(2.0, 0.0));
        // interference fringe: first zero of cos(2 Im β) near Im β = π/4
        assert!(at(0.0, 0.0) > 1e-2);
        assert!(at(0.0, 0.75) < 0.01 * at(0.0, 0.0));
        assert!(q.iter().all(|&v| (0.0..=1.0 / std::f64::consts::PI).contains(&v)));
    }
}
