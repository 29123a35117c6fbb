//! Parallel ensembles of trajectories and the statistics built from them.

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::dynamics::{Integrator, Mode, TrajectoryOptions};
use crate::hilbert::{cat_state, DensityMatrix, OperatorMatrix, StateVector};
use crate::noise::TimeGrid;
use crate::stats::mean_se_from_sums;
use crate::{c, Error, Result, C64};

/// Trajectories per work unit; fixed so results do not depend on thread count.
pub const CHUNK: usize = 64;

/// Largest tolerated fraction of failed trajectories.
pub const MAX_FAILURE_FRACTION: f64 = 0.01;

/// Running sums of `|ψ⟩⟨ψ|` and of observables at each recorded time.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleAccumulator {
    pub dim: usize,
    pub times: Vec<f64>,
    pub n_done: usize,
    sum: Vec<DMatrix<C64>>,
    sum_sq_re: Vec<DMatrix<f64>>,
    sum_sq_im: Vec<DMatrix<f64>>,
    norm_sum: Vec<f64>,
    norm_sq_sum: Vec<f64>,
    pub observable_names: Vec<String>,
    obs_sum: Vec<Vec<C64>>,
    obs_sq_re: Vec<Vec<f64>>,
    obs_sq_im: Vec<Vec<f64>>,
}

impl EnsembleAccumulator {
    pub fn new(dim: usize, times: Vec<f64>, observable_names: Vec<String>) -> Self {
        let r = times.len();
        let k = observable_names.len();
        Self {
            dim,
            n_done: 0,
            sum: vec![DMatrix::zeros(dim, dim); r],
            sum_sq_re: vec![DMatrix::zeros(dim, dim); r],
            sum_sq_im: vec![DMatrix::zeros(dim, dim); r],
            norm_sum: vec![0.0; r],
            norm_sq_sum: vec![0.0; r],
            obs_sum: vec![vec![c(0.0, 0.0); r]; k],
            obs_sq_re: vec![vec![0.0; r]; k],
            obs_sq_im: vec![vec![0.0; r]; k],
            times,
            observable_names,
        }
    }

    /// Adds `|ψ⟩⟨ψ|` (unnormalized: linear mode keeps its weight) at record `r`.
    pub fn add_state(&mut self, r: usize, psi: &[C64], observables: &[(String, OperatorMatrix)]) {
        let n2: f64 = psi.iter().map(|a| a.norm_sqr()).sum();
        let s = &mut self.sum[r];
        let (qr, qi) = (&mut self.sum_sq_re[r], &mut self.sum_sq_im[r]);
        for j in 0..self.dim {
            for i in 0..self.dim {
                let v = psi[i] * psi[j].conj();
                s[(i, j)] += v;
                qr[(i, j)] += v.re * v.re;
                qi[(i, j)] += v.im * v.im;
            }
        }
        self.norm_sum[r] += n2;
        self.norm_sq_sum[r] += n2 * n2;
        let mut tmp = vec![c(0.0, 0.0); psi.len()];
        for (k, (_, op)) in observables.iter().enumerate() {
            op.apply_into(psi, &mut tmp);
            let v: C64 = psi.iter().zip(&tmp).map(|(a, b)| a.conj() * b).sum();
            self.obs_sum[k][r] += v;
            self.obs_sq_re[k][r] += v.re * v.re;
            self.obs_sq_im[k][r] += v.im * v.im;
        }
    }

    /// Marks one finished trajectory.
    pub fn finish_trajectory(&mut self) {
        self.n_done += 1;
    }

    pub fn merge(&mut self, other: &Self) {
        assert_eq!((self.dim, self.times.len(), self.observable_names.len()), (other.dim, other.times.len(), other.observable_names.len()));
        self.n_done += other.n_done;
        for r in 0..self.times.len() {
            self.sum[r] += &other.sum[r];
            self.sum_sq_re[r] += &other.sum_sq_re[r];
            self.sum_sq_im[r] += &other.sum_sq_im[r];
            self.norm_sum[r] += other.norm_sum[r];
            self.norm_sq_sum[r] += other.norm_sq_sum[r];
            for k in 0..self.obs_sum.len() {
                self.obs_sum[k][r] += other.obs_sum[k][r];
                self.obs_sq_re[k][r] += other.obs_sq_re[k][r];
                self.obs_sq_im[k][r] += other.obs_sq_im[k][r];
            }
        }
    }

    /// Ensemble mean `M[|ψ⟩⟨ψ|]`, symmetrized.
    pub fn rho(&self, r: usize) -> DensityMatrix {
        DensityMatrix { m: &self.sum[r] / c(self.n_done as f64, 0.0) }.symmetrized()
    }

    /// Entrywise standard errors, real and imaginary parts in the two components.
    pub fn rho_se(&self, r: usize) -> DMatrix<C64> {
        DMatrix::from_fn(self.dim, self.dim, |i, j| {
            let v = self.sum[r][(i, j)];
            let (_, se_re) = mean_se_from_sums(v.re, self.sum_sq_re[r][(i, j)], self.n_done);
            let (_, se_im) = mean_se_from_sums(v.im, self.sum_sq_im[r][(i, j)], self.n_done);
            c(se_re, se_im)
        })
    }

    /// Mean and standard error of `‖ψ‖²`.
    pub fn norm_sq(&self, r: usize) -> (f64, f64) {
        mean_se_from_sums(self.norm_sum[r], self.norm_sq_sum[r], self.n_done)
    }

    /// Mean and standard error of the (weighted) expectation of observable `k`.
    pub fn observable(&self, k: usize, r: usize) -> (C64, C64) {
        let s = self.obs_sum[k][r];
        let (mr, er) = mean_se_from_sums(s.re, self.obs_sq_re[k][r], self.n_done);
        let (mi, ei) = mean_se_from_sums(s.im, self.obs_sq_im[k][r], self.n_done);
        (c(mr, mi), c(er, ei))
    }
}

/// Entrywise z-scores of two independent ensemble means.
pub fn rho_z_scores(a: &DensityMatrix, se_a: &DMatrix<C64>, b: &DensityMatrix, se_b: &DMatrix<C64>) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..a.dim() {
        for j in 0..a.dim() {
            let d = a.m[(i, j)] - b.m[(i, j)];
            let (sa, sb) = (se_a[(i, j)], se_b[(i, j)]);
            worst = worst.max(crate::stats::z_score(d.re, sa.re, 0.0, sb.re)).max(crate::stats::z_score(d.im, sa.im, 0.0, sb.im));
        }
    }
    worst
}

#[derive(Debug, Clone)]
pub struct EnsembleOptions {
    pub trajectory: TrajectoryOptions,
    pub n_traj: usize,
    pub master_seed: u64,
}

#[derive(Debug, Clone)]
pub struct EnsembleResult<S> {
    pub acc: EnsembleAccumulator,
    /// Per-trajectory summaries in trajectory order (`None` for failures).
    pub summaries: Vec<Option<S>>,
    pub failures: usize,
    pub first_failure: Option<String>,
    pub pinned: usize,
    pub truncation_suspect: bool,
}

/// Runs `n_traj` trajectories; trajectory `i` uses stream `i` of `master_seed`.
///
/// `summarize` sees each trajectory's observable series (`[k][record]`) and
/// its result is kept per trajectory. Normalized expectations are passed in
/// both modes.
pub fn run_ensemble<S: Send>(
    integ: &Integrator,
    psi0: &StateVector,
    opts: &EnsembleOptions,
    summarize: impl Fn(&[Vec<C64>]) -> S + Sync,
) -> Result<EnsembleResult<S>> {
    if opts.n_traj == 0 {
        return Err(Error::Invalid("n_traj must be at least 1".into()));
    }
    let grid = integ.schedule.grid;
    let topts = &opts.trajectory;
    let stride = topts.stride.max(1);
    let times: Vec<f64> = (0..grid.n_nodes()).step_by(stride).map(|i| grid.t(i)).collect();
    let names: Vec<String> = topts.observables.iter().map(|(n, _)| n.clone()).collect();
    let dim = integ.schedule.dim();
    let n_chunks = opts.n_traj.div_ceil(CHUNK);
    let run_chunk = |ch: usize| {
        let mut acc = EnsembleAccumulator::new(dim, times.clone(), names.clone());
        let mut summaries = Vec::new();
        let mut failures = 0usize;
        let mut first = None;
        let mut pinned = 0usize;
        let mut trunc = false;
        for idx in ch * CHUNK..((ch + 1) * CHUNK).min(opts.n_traj) {
            let mut visited: Vec<(usize, Vec<C64>)> = Vec::with_capacity(times.len());
            let mut series: Vec<Vec<C64>> = vec![Vec::with_capacity(times.len()); names.len()];
            let mut tmp = vec![c(0.0, 0.0); dim];
            let res = integ.run_indexed(psi0, opts.master_seed, idx as u64, topts, |node, psi| {
                visited.push((node / stride, psi.to_vec()));
                let n2: f64 = psi.iter().map(|a| a.norm_sqr()).sum();
                for (k, (_, op)) in topts.observables.iter().enumerate() {
                    op.apply_into(psi, &mut tmp);
                    series[k].push(psi.iter().zip(&tmp).map(|(a, b)| a.conj() * b).sum::<C64>() / n2);
                }
            });
            match res {
                Ok(s) => {
                    for (r, psi) in &visited {
                        acc.add_state(*r, psi, &topts.observables);
                    }
                    acc.finish_trajectory();
                    pinned += s.pinned_at.is_some() as usize;
                    trunc |= s.truncation_suspect;
                    summaries.push(Some(summarize(&series)));
                }
                Err(e) => {
                    failures += 1;
                    first.get_or_insert_with(|| format!("trajectory {idx}: {e}"));
                    summaries.push(None);
                }
            }
        }
        (acc, summaries, failures, first, pinned, trunc)
    };
    let parts: Vec<_> = with_pool(|| (0..n_chunks).into_par_iter().map(run_chunk).collect());
    let mut out = EnsembleResult {
        acc: EnsembleAccumulator::new(dim, times, names),
        summaries: Vec::with_capacity(opts.n_traj),
        failures: 0,
        first_failure: None,
        pinned: 0,
        truncation_suspect: false,
    };
    for (acc, summaries, failures, first, pinned, trunc) in parts {
        out.acc.merge(&acc);
        out.summaries.extend(summaries);
        out.failures += failures;
        if out.first_failure.is_none() {
            out.first_failure = first;
        }
        out.pinned += pinned;
        out.truncation_suspect |= trunc;
    }
    if out.failures as f64 > MAX_FAILURE_FRACTION * opts.n_traj as f64 {
        return Err(Error::TooManyFailures { failed: out.failures, total: opts.n_traj, first: out.first_failure.unwrap_or_default() });
    }
    Ok(out)
}

/// Runs `f` on a pool capped by `NMQSD_THREADS` when that variable is set.
pub fn with_pool<T: Send>(f: impl FnOnce() -> T + Send) -> T {
    match std::env::var("NMQSD_THREADS").ok().and_then(|v| v.parse::<usize>().ok()).filter(|n| *n > 0) {
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(pool) => pool.install(f),
            Err(_) => f(),
        },
        None => f(),
    }
}

/// Convenience wrapper: mode, stride and observables in one call.
pub fn ensemble(
    integ: &Integrator,
    psi0: &StateVector,
    mode: Mode,
    stride: usize,
    observables: Vec<(String, OperatorMatrix)>,
    n_traj: usize,
    master_seed: u64,
) -> Result<EnsembleResult<()>> {
    let mut trajectory = TrajectoryOptions::new(mode);
    trajectory.stride = stride;
    trajectory.observables = observables;
    run_ensemble(integ, psi0, &EnsembleOptions { trajectory, n_traj, master_seed }, |_| ())
}

/// `β_t = β e^{-iωt}`.
pub fn free_cat_betas(beta: C64, omega: f64, times: &[f64]) -> Vec<C64> {
    times.iter().map(|t| beta * C64::new(0.0, -omega * t).exp()).collect()
}

/// `β̇ = (-iω - λF)β` on the grid nodes, sampled every `stride` nodes.
pub fn dressed_cat_betas(beta: C64, omega: f64, lambda: f64, f: &[C64], grid: TimeGrid, stride: usize) -> Vec<C64> {
    let mut b = beta;
    let mut log = C64::new(0.0, 0.0);
    let mut out = vec![b];
    for i in 0..grid.n_steps {
        log += -C64::new(0.0, omega) * grid.dt - lambda * grid.dt * 0.5 * (f[i] + f[i + 1]);
        if (i + 1) % stride.max(1) == 0 {
            b = beta * log.exp();
            out.push(b);
        }
    }
    out
}

/// `⟨cat(β_t)|ρ_t|cat(β_t)⟩` for each recorded ρ.
pub fn cat_fidelity_series(rhos: &[DensityMatrix], betas: &[C64]) -> Result<Vec<f64>> {
    if rhos.len() != betas.len() {
        return Err(Error::DimensionMismatch { expected: rhos.len(), found: betas.len() });
    }
    rhos.iter().zip(betas).map(|(r, b)| Ok(r.fidelity_with(&cat_state(*b, r.dim())?))).collect()
}
