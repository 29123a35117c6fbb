//! Exact propagation of system ⊗ finite-mode environment, traced back to the
//! system.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::hilbert::{DensityMatrix, OperatorMatrix, StateVector, TRUNCATION_SUSPECT_LIMIT};
use crate::noise::{CorrelationKernel, SpectralMode};
use crate::{c, Error, Result, C64, I};

/// Largest total dimension accepted by `evolve_exact`.
pub const ORACLE_DIM_LIMIT: usize = 20_000;

/// Tolerance on the total norm along an oracle run.
pub const NORM_TOLERANCE: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleMode {
    pub omega: f64,
    pub chi: f64,
    pub n_trunc: usize,
}

/// `H = H_sys + Σ ω_k a_k†a_k + Σ χ_k (L a_k† + L† a_k)`, environment in vacuum.
#[derive(Debug, Clone, PartialEq)]
pub struct MicroscopicModel {
    pub h_sys: OperatorMatrix,
    pub l: OperatorMatrix,
    pub modes: Vec<OracleMode>,
}

impl MicroscopicModel {
    pub fn new(h_sys: OperatorMatrix, l: OperatorMatrix, modes: Vec<OracleMode>) -> Result<Self> {
        if h_sys.dim() != l.dim() {
            return Err(Error::DimensionMismatch { expected: h_sys.dim(), found: l.dim() });
        }
        if !h_sys.is_hermitian() {
            return Err(Error::Invalid("system Hamiltonian must be Hermitian".into()));
        }
        if modes.iter().any(|m| m.n_trunc < 2 || !m.omega.is_finite() || !m.chi.is_finite()) {
            return Err(Error::Invalid("every mode needs n_trunc >= 2 and finite omega, chi".into()));
        }
        let m = Self { h_sys, l, modes };
        let dim = m.total_dim();
        if dim > ORACLE_DIM_LIMIT {
            return Err(Error::DimensionTooLarge { dim, limit: ORACLE_DIM_LIMIT });
        }
        Ok(m)
    }

    pub fn env_dim(&self) -> usize {
        self.modes.iter().fold(1usize, |acc, m| acc.saturating_mul(m.n_trunc))
    }

    pub fn total_dim(&self) -> usize {
        self.h_sys.dim().saturating_mul(self.env_dim())
    }

    /// Sparse rows of the total Hamiltonian; system index slowest, last mode fastest.
    fn hamiltonian(&self) -> SparseRows {
        let ds = self.h_sys.dim();
        let de = self.env_dim();
        let dims: Vec<usize> = self.modes.iter().map(|m| m.n_trunc).collect();
        let strides: Vec<usize> = (0..dims.len()).map(|k| dims[k + 1..].iter().product()).collect();
        let occ = |e: usize, k: usize| (e / strides[k]) % dims[k];
        let mut rows: Vec<Vec<(u32, C64)>> = vec![Vec::new(); ds * de];
        let nz = |op: &OperatorMatrix| -> Vec<(usize, usize, C64)> {
            let mut v = Vec::new();
            for r in 0..op.dim() {
                for k in 0..op.dim() {
                    let x = op.entry(r, k);
                    if x != c(0.0, 0.0) {
                        v.push((r, k, x));
                    }
                }
            }
            v
        };
        let h_nz = nz(&self.h_sys);
        let l_nz = nz(&self.l);
        let ld_nz = nz(&self.l.dagger());
        for e in 0..de {
            let env_energy: f64 = self.modes.iter().enumerate().map(|(k, m)| m.omega * occ(e, k) as f64).sum();
            for s in 0..ds {
                if env_energy != 0.0 {
                    rows[s * de + e].push(((s * de + e) as u32, c(env_energy, 0.0)));
                }
            }
            for &(r, k, v) in &h_nz {
                rows[r * de + e].push(((k * de + e) as u32, v));
            }
            for (m, mode) in self.modes.iter().enumerate() {
                let n = occ(e, m);
                // L a† : |k, n⟩ → √(n+1) |r, n+1⟩
                if n + 1 < mode.n_trunc {
                    let amp = mode.chi * ((n + 1) as f64).sqrt();
                    for &(r, k, v) in &l_nz {
                        rows[r * de + e + strides[m]].push(((k * de + e) as u32, v * amp));
                    }
                }
                // L† a : |k, n⟩ → √n |r, n-1⟩
                if n > 0 {
                    let amp = mode.chi * (n as f64).sqrt();
                    for &(r, k, v) in &ld_nz {
                        rows[r * de + e - strides[m]].push(((k * de + e) as u32, v * amp));
                    }
                }
            }
        }
        for row in &mut rows {
            row.sort_by_key(|(k, _)| *k);
            let mut merged: Vec<(u32, C64)> = Vec::with_capacity(row.len());
            for &(k, v) in row.iter() {
                match merged.last_mut() {
                    Some((lk, lv)) if *lk == k => *lv += v,
                    _ => merged.push((k, v)),
                }
            }
            *row = merged;
        }
        SparseRows { rows }
    }
}

struct SparseRows {
    rows: Vec<Vec<(u32, C64)>>,
}

impl SparseRows {
    fn apply(&self, x: &[C64], y: &mut [C64]) {
        for (yr, row) in y.iter_mut().zip(&self.rows) {
            *yr = row.iter().map(|(k, v)| v * x[*k as usize]).sum();
        }
    }

    /// Max absolute row sum, an upper bound on the spectral norm for Hermitian H.
    fn norm_bound(&self) -> f64 {
        self.rows.iter().map(|r| r.iter().map(|(_, v)| v.norm()).sum::<f64>()).fold(0.0, f64::max)
    }
}

/// `Σ_k χ_k² e^{-iω_k(t-s)}`; modes with `χ = 0` drop out.
pub fn kernel_of_model(model: &MicroscopicModel) -> CorrelationKernel {
    CorrelationKernel::DiscreteSpectrum {
        modes: model.modes.iter().filter(|m| m.chi != 0.0).map(|m| SpectralMode { omega: m.omega, weight: m.chi * m.chi }).collect(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleRun {
    pub times: Vec<f64>,
    pub rho: Vec<DensityMatrix>,
    pub max_norm_dev: f64,
    /// Largest population of the top two Fock levels of any mode.
    pub max_top_population: f64,
}

fn ptrace_env(psi: &[C64], ds: usize, de: usize) -> DensityMatrix {
    let m = DMatrix::from_fn(ds, de, |s, e| psi[s * de + e]);
    DensityMatrix { m: &m * m.adjoint() }
}

impl MicroscopicModel {
    fn top_population(&self, psi: &[C64]) -> f64 {
        let de = self.env_dim();
        let dims: Vec<usize> = self.modes.iter().map(|m| m.n_trunc).collect();
        let mut worst: f64 = 0.0;
        for (k, &d) in dims.iter().enumerate() {
            let stride: usize = dims[k + 1..].iter().product();
            let top: f64 = psi.iter().enumerate().filter(|(i, _)| ((i % de) / stride) % d >= d - 2).map(|(_, a)| a.norm_sqr()).sum();
            worst = worst.max(top);
        }
        worst
    }
}

/// Taylor-series propagation of `ψ_sys ⊗ |0…0⟩`, reduced to the system at `times`.
pub fn evolve_exact(model: &MicroscopicModel, psi0_sys: &StateVector, times: &[f64]) -> Result<OracleRun> {
    let ds = model.h_sys.dim();
    if psi0_sys.dim() != ds {
        return Err(Error::DimensionMismatch { expected: ds, found: psi0_sys.dim() });
    }
    let dim = model.total_dim();
    if dim > ORACLE_DIM_LIMIT {
        return Err(Error::DimensionTooLarge { dim, limit: ORACLE_DIM_LIMIT });
    }
    if times.windows(2).any(|w| w[1] < w[0]) || times.first().is_some_and(|t| *t < 0.0) {
        return Err(Error::Invalid("oracle times must be non-negative and sorted".into()));
    }
    let de = model.env_dim();
    let h = model.hamiltonian();
    let hmax = h.norm_bound().max(1e-300);
    let max_dt = 0.5 / hmax;
    let psi0 = psi0_sys.normalized()?;
    let mut psi = vec![c(0.0, 0.0); dim];
    for s in 0..ds {
        psi[s * de] = psi0.amps[s];
    }
    let mut term = vec![c(0.0, 0.0); dim];
    let mut next = vec![c(0.0, 0.0); dim];
    let mut t = 0.0;
    let mut run = OracleRun { times: Vec::new(), rho: Vec::new(), max_norm_dev: 0.0, max_top_population: 0.0 };
    for &target in times {
        while t < target {
            let dt = (target - t).min(max_dt);
            // ψ ← Σ_k (-iH dt)^k/k! ψ
            term.copy_from_slice(&psi);
            for k in 1..60 {
                h.apply(&term, &mut next);
                let f = -I * dt / k as f64;
                let mut size = 0.0;
                for (tn, nx) in term.iter_mut().zip(&next) {
                    *tn = nx * f;
                    size += tn.norm_sqr();
                }
                psi.iter_mut().zip(&term).for_each(|(p, x)| *p += x);
                if size < 1e-34 {
                    break;
                }
            }
            t = if target - t <= max_dt { target } else { t + dt };
        }
        let n2: f64 = psi.iter().map(|a| a.norm_sqr()).sum();
        run.max_norm_dev = run.max_norm_dev.max((n2 - 1.0).abs());
        if (n2 - 1.0).abs() > NORM_TOLERANCE {
            return Err(Error::NumericalBlowup { t, norm_sq: n2 });
        }
        let top = model.top_population(&psi);
        run.max_top_population = run.max_top_population.max(top);
        if top > TRUNCATION_SUSPECT_LIMIT {
            let n_trunc = model.modes.iter().map(|m| m.n_trunc).min().unwrap_or(0);
            return Err(Error::Truncation { tail: top, limit: TRUNCATION_SUSPECT_LIMIT, n_trunc });
        }
        run.times.push(target);
        run.rho.push(ptrace_env(&psi, ds, de));
    }
    Ok(run)
}
