//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! `cargo test -p nmqsd-core --test acceptance -- 3 6` runs only criteria 3 and 6.

use std::f64::consts::PI;
use std::process::ExitCode;
use std::time::Instant;

use nmqsd_core::analytic::{markov_qsd_step, rho_dissipative, rho_sigma_z};
use nmqsd_core::ansatz::{critical_time, evolve_f_dissipative, f_closed_form, qbm_schedule, scalar_schedule};
use nmqsd_core::dynamics::{consistency_check, Integrator, Mode, TrajectoryOptions};
use nmqsd_core::ensemble::{cat_fidelity_series, dressed_cat_betas, rho_z_scores, run_ensemble, EnsembleOptions, EnsembleResult};
use nmqsd_core::hilbert::{boson_operators, cat_state, coherent_state, fock_state, spin_operators, DensityMatrix, OperatorMatrix, StateVector};
use nmqsd_core::models::{cut_default_phi0, cut_pair_run, dissipative_spin, measurement_sigma_z, oscillator_zero_t, qbm, toy, CutParams, ModelSpec};
use nmqsd_core::noise::{
    check_sampler, markov_increments, markov_increments_with, sample_spectral, sampler_supports, trajectory_rng, CorrelationKernel, NoiseSource, Sampler,
    SpectralMode, ThermalMode, TimeGrid,
};
use nmqsd_core::oracle::{evolve_exact, MicroscopicModel, OracleMode};
use nmqsd_core::stats::{binomial_se, linear_fit, mean_se, z_score};
use nmqsd_core::{Result, C64};
use rand::Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Result<Outcome> {
    Ok(Outcome { pass, detail: detail.into() })
}

fn cx(re: f64, im: f64) -> C64 {
    C64::new(re, im)
}

fn spin(a: C64, b: C64) -> StateVector {
    StateVector::new(vec![a, b]).unwrap().normalized().unwrap()
}

fn bloch_ops() -> Vec<(String, OperatorMatrix)> {
    let s = spin_operators();
    vec![("sx".into(), s.sx), ("sy".into(), s.sy), ("sz".into(), s.sz)]
}

fn ensemble<S: Send>(
    integ: &Integrator,
    psi0: &StateVector,
    mode: Mode,
    stride: usize,
    observables: Vec<(String, OperatorMatrix)>,
    n_traj: usize,
    seed: u64,
    summarize: impl Fn(&[Vec<C64>]) -> S + Sync,
) -> Result<EnsembleResult<S>> {
    let mut trajectory = TrajectoryOptions::new(mode);
    trajectory.stride = stride;
    trajectory.observables = observables;
    run_ensemble(integ, psi0, &EnsembleOptions { trajectory, n_traj, master_seed: seed }, summarize)
}

/// Worst z-score of the ensemble Bloch vector against reference matrices.
fn bloch_z(res: &EnsembleResult<impl Sized>, reference: &[DensityMatrix]) -> f64 {
    let ops = bloch_ops();
    let mut worst: f64 = 0.0;
    for (r, rho) in reference.iter().enumerate() {
        for (k, (_, op)) in ops.iter().enumerate() {
            let (m, se) = res.acc.observable(k, r);
            worst = worst.max(z_score(m.re, se.re, rho.expectation(op).re, 0.0));
        }
    }
    worst
}

fn c1_measurement_fig() -> Result<Outcome> {
    let omega: f64 = 1.0;
    let lambda = (2.0 * omega).sqrt();
    let kernel = CorrelationKernel::Exponential { gamma: omega, omega: 0.0 };
    let model = measurement_sigma_z(omega, lambda);
    let grid = TimeGrid::new(1e-3, 10_000)?;
    let stride = 100;
    let psi0 = spin(cx(1.0, 2.0), cx(1.0, 1.0));
    let integ = Integrator::new(&model, &kernel, grid, None)?;
    let n = 10_000;
    let res = ensemble(&integ, &psi0, Mode::Nonlinear, stride, bloch_ops(), n, 101, |s| s[2].last().map(|v| v.re).unwrap_or(f64::NAN))?;
    let times = res.acc.times.clone();
    let reference = rho_sigma_z(&psi0.projector(), omega, lambda, &kernel, &times)?;
    let z_bloch = bloch_z(&res, &reference.values);
    let z_sz = (0..times.len())
        .map(|r| {
            let (m, se) = res.acc.observable(2, r);
            z_score(m.re, se.re, 3.0 / 7.0, 0.0)
        })
        .fold(0.0, f64::max);
    let up = res.summaries.iter().flatten().filter(|v| **v > 0.99).count();
    let frac = up as f64 / n as f64;
    let z_frac = (frac - 5.0 / 7.0).abs() / binomial_se(5.0 / 7.0, n);
    outcome(
        z_bloch <= 3.0 && z_sz <= 3.0 && z_frac <= 3.0 && res.failures == 0,
        format!("Bloch max z {z_bloch:.2}, <sz>=3/7 max z {z_sz:.2}, up fraction {frac:.4} (z {z_frac:.2}), failures {}", res.failures),
    )
}

fn c2_dissipative_fig() -> Result<Outcome> {
    let omega = 1.0;
    let model = dissipative_spin(omega, 1.0);
    let kernel = CorrelationKernel::Exponential { gamma: omega, omega };
    let grid = TimeGrid::new(1e-3, 10_000)?;
    let stride = 10;
    let psi0 = spin(cx(3.0, 0.0), cx(1.0, 0.0));
    let integ = Integrator::new(&model, &kernel, grid, None)?;
    let n = 10_000;
    let t_c = 1.5 * PI;
    let late: Vec<usize> = (0..grid.n_nodes()).step_by(stride).enumerate().filter(|(_, i)| grid.t(*i) >= t_c).map(|(r, _)| r).collect();
    let res = ensemble(&integ, &psi0, Mode::Nonlinear, stride, bloch_ops(), n, 202, |s| late.iter().map(|&r| s[2][r].re).fold(f64::NEG_INFINITY, f64::max))?;
    let worst_late = res.summaries.iter().flatten().copied().fold(f64::NEG_INFINITY, f64::max);
    let all_ok = res.summaries.iter().all(|s| s.is_some_and(|v| v <= -1.0 + 1e-3));
    let sched = scalar_schedule(&kernel, omega, 1.0, grid);
    let (curve, _) = rho_dissipative(&psi0.projector(), omega, 1.0, &sched, grid)?;
    let mut worst_z: f64 = 0.0;
    for r in 0..res.acc.times.len() {
        let reference = &curve.values[r * stride];
        worst_z = worst_z.max(rho_z_scores(&res.acc.rho(r), &res.acc.rho_se(r), reference, &zero_se(2)));
    }
    outcome(
        all_ok && worst_z <= 3.0,
        format!("max <sz> after 3pi/2 over all trajectories {worst_late:.3e} (bound -1+1e-3), pinned {}/{n}, rho max z {worst_z:.2}", res.pinned),
    )
}

fn zero_se(d: usize) -> nalgebra::DMatrix<C64> {
    nalgebra::DMatrix::zeros(d, d)
}

fn c3_f_verification() -> Result<Outcome> {
    let omega = 1.0;
    let dt = 1e-3;
    let mut worst: f64 = 0.0;
    let mut notes = Vec::new();
    // entries are (γ, λ, Ω - ω)
    for (gamma, lambda, detuning) in [(3.0, 1.0, 0.0), (1.0, 1.0, 0.5), (0.5, 1.0, 0.0)] {
        let kernel = CorrelationKernel::Exponential { gamma, omega: omega + detuning };
        let t_end = critical_time(gamma, lambda).filter(|_| detuning == 0.0).map(|tc| 0.9 * tc).unwrap_or(10.0);
        let mut f = cx(0.0, 0.0);
        let mut t = 0.0;
        let mut dev: f64 = 0.0;
        while t + dt <= t_end + 1e-12 {
            f = match evolve_f_dissipative(f, t, &kernel, omega, lambda, dt) {
                Ok(v) => v,
                Err(_) => break,
            };
            t += dt;
            dev = dev.max((f - f_closed_form(t, gamma, lambda, -detuning)).norm());
        }
        notes.push(format!("({gamma},{lambda},{detuning}) to t={t:.2}: {dev:.1e}"));
        worst = worst.max(dev);
    }
    let tc_err = (critical_time(1.0, 1.0).unwrap_or(f64::NAN) - 1.5 * PI).abs();
    outcome(worst <= 1e-6 && tc_err <= 1e-12, format!("{}; |t_c - 3pi/2| = {tc_err:.1e}", notes.join(", ")))
}

fn c4_unravelling_equivalence() -> Result<Outcome> {
    let omega = 1.0;
    let cases: [(ModelSpec, CorrelationKernel, StateVector, f64); 2] = [
        (measurement_sigma_z(omega, 1.0), CorrelationKernel::Exponential { gamma: omega, omega: 0.0 }, spin(cx(1.0, 2.0), cx(1.0, 1.0)), 3.0),
        (dissipative_spin(omega, 1.0), CorrelationKernel::Exponential { gamma: omega, omega }, spin(cx(3.0, 0.0), cx(1.0, 0.0)), 3.0),
    ];
    let mut pass = true;
    let mut notes = Vec::new();
    for (i, (model, kernel, psi0, t_max)) in cases.iter().enumerate() {
        let grid = TimeGrid::from_tmax(5e-3, *t_max)?;
        let stride = 20;
        let integ = Integrator::new(model, kernel, grid, None)?;
        let lin = ensemble(&integ, psi0, Mode::Linear, stride, vec![], 100_000, 400 + i as u64, |_| ())?;
        let non = ensemble(&integ, psi0, Mode::Nonlinear, stride, vec![], 10_000, 500 + i as u64, |_| ())?;
        let mut z_rho: f64 = 0.0;
        let mut z_norm: f64 = 0.0;
        for r in 0..lin.acc.times.len() {
            z_rho = z_rho.max(rho_z_scores(&lin.acc.rho(r), &lin.acc.rho_se(r), &non.acc.rho(r), &non.acc.rho_se(r)));
            let (m, se) = lin.acc.norm_sq(r);
            z_norm = z_norm.max(z_score(m, se, 1.0, 0.0));
        }
        pass &= z_rho <= 5.0 && z_norm <= 3.0 && lin.failures == 0 && non.failures == 0;
        notes.push(format!("{}: rho max z {z_rho:.2}, M[|psi|^2] max z {z_norm:.2}", model.name));
    }
    outcome(pass, notes.join("; "))
}

fn c5_cat_oracle() -> Result<Outcome> {
    let (omega, big_omega, lambda, n_sys, n_env) = (1.0, 0.5, 0.1, 40, 16);
    let beta = cx(2.0, 0.0);
    let model = oscillator_zero_t(omega, lambda, n_sys)?;
    let kernel = CorrelationKernel::SingleMode { omega: big_omega };
    let grid = TimeGrid::from_tmax(2e-3, 30.0)?;
    let stride = 250;
    let psi0 = cat_state(beta, n_sys)?;
    let integ = Integrator::new(&model, &kernel, grid, None)?;
    let res = ensemble(&integ, &psi0, Mode::Nonlinear, stride, vec![], 5_000, 505, |_| ())?;
    let times = res.acc.times.clone();
    let b = boson_operators(n_sys)?;
    let micro = MicroscopicModel::new(b.n.scale(cx(omega, 0.0)), b.a.clone(), vec![OracleMode { omega: big_omega, chi: lambda, n_trunc: n_env }])?;
    let exact = evolve_exact(&micro, &psi0, &times)?;
    let mut worst_z: f64 = 0.0;
    let mut worst_dev: f64 = 0.0;
    for r in 0..times.len() {
        let rho = res.acc.rho(r);
        worst_z = worst_z.max(rho_z_scores(&rho, &res.acc.rho_se(r), &exact.rho[r], &zero_se(n_sys)));
        worst_dev = worst_dev.max(rho.max_abs_diff(&exact.rho[r]));
    }
    let f = scalar_schedule(&kernel, omega, lambda, grid).f;
    let betas = dressed_cat_betas(beta, omega, lambda, &f, grid, stride);
    let fid_oracle = cat_fidelity_series(&exact.rho, &betas)?;
    let fid = cat_fidelity_series(&(0..times.len()).map(|r| res.acc.rho(r)).collect::<Vec<_>>(), &betas)?;
    let r_dip = argmin(&fid_oracle);
    let r_rev = r_dip + argmax(&fid_oracle[r_dip..]);
    let min_before = fid[..=r_rev].iter().copied().fold(f64::INFINITY, f64::min);
    let dip = min_before < 0.5;
    let recovery = fid[r_rev] > 0.9;
    // Not gating: how single trajectories behave against the same reference.
    let mut opts = TrajectoryOptions::new(Mode::Nonlinear);
    opts.stride = stride;
    opts.keep_states = true;
    let cats = betas.iter().map(|b| cat_state(*b, n_sys)).collect::<Result<Vec<_>>>()?;
    let n_single = 200;
    let mut single_cycles = 0;
    for i in 0..n_single {
        let rec = integ.record(&psi0, &integ.sample_noise(&mut trajectory_rng(505, i)), &opts)?;
        let f: Vec<f64> = rec.states.iter().zip(&cats).map(|(s, c)| Ok(c.inner(&s.normalized()?).norm_sqr())).collect::<Result<_>>()?;
        if f[..=r_rev].iter().any(|&x| x < 0.5) && f[r_rev] > 0.9 {
            single_cycles += 1;
        }
    }
    outcome(
        worst_z <= 5.0 && dip && recovery && res.failures == 0,
        format!(
            "rho max z {worst_z:.2} (max |diff| {worst_dev:.2e}, oracle top pop {:.1e}); oracle revival t={:.1}, oracle fidelity min {:.3}; ensemble fidelity min {min_before:.3} (needs < 0.5), at revival {:.3} (needs > 0.9); single trajectories dipping below 0.5 and recovering: {single_cycles}/{n_single}",
            exact.max_top_population,
            times[r_rev],
            fid_oracle[r_dip],
            fid[r_rev]
        ),
    )
}

fn argmin(v: &[f64]) -> usize {
    (0..v.len()).fold(0, |b, i| if v[i] < v[b] { i } else { b })
}

fn argmax(v: &[f64]) -> usize {
    (0..v.len()).fold(0, |b, i| if v[i] > v[b] { i } else { b })
}

fn c6_cut_equality() -> Result<Outcome> {
    let p = CutParams::default();
    let grid = TimeGrid::from_tmax(1e-3, 20.0)?;
    let kernel = CorrelationKernel::SingleMode { omega: p.omega2 };
    let (mut rho_dev, mut id_dev): (f64, f64) = (0.0, 0.0);
    for k in 0..20u64 {
        let xi = markov_increments(grid, 600 + 2 * k);
        let z = sample_spectral(&kernel, grid, 601 + 2 * k)?;
        for s in cut_pair_run(&cut_default_phi0(), &xi, &z, p)? {
            rho_dev = rho_dev.max(s.max_rho_diff(p.chi));
            id_dev = id_dev.max(s.identity_defect());
        }
    }
    outcome(rho_dev <= 1e-6 && id_dev <= 1e-6, format!("max |rho1-rho2| {rho_dev:.2e}, identity defect {id_dev:.2e} over 20 paths"))
}

fn c7_noise() -> Result<Outcome> {
    let grid = TimeGrid::new(0.1, 49)?;
    let kernels = [
        CorrelationKernel::Exponential { gamma: 1.0, omega: 0.5 },
        CorrelationKernel::SingleMode { omega: 0.5 },
        CorrelationKernel::DiscreteSpectrum { modes: vec![SpectralMode { omega: 0.3, weight: 0.4 }, SpectralMode { omega: -1.1, weight: 0.2 }] },
        CorrelationKernel::QbmThermal { modes: vec![ThermalMode { omega: 1.0, chi2: 0.5, nbar: 0.3 }] },
        CorrelationKernel::MarkovDelta,
    ];
    let samplers = [Sampler::Spectral, Sampler::Cholesky, Sampler::Ou, Sampler::White];
    let mut pass = true;
    let mut notes = Vec::new();
    for kernel in &kernels {
        for &sampler in &samplers {
            if !sampler_supports(sampler, kernel) {
                continue;
            }
            let g = if kernel.is_markov() { TimeGrid::new(0.1, 50)? } else { grid };
            let source = NoiseSource::new(kernel, g, sampler)?;
            let rep = check_sampler(&source, kernel, g, 100_000, 700)?;
            pass &= rep.passes(5.0);
            notes.push(format!("{:?}/{:?} {:.2}/{:.2}", sampler, kernel.kind(), rep.max_corr_sigma, rep.max_circ_sigma));
        }
    }
    outcome(pass, format!("max sigma (corr/circ): {}", notes.join(", ")))
}

fn c8_markov_limit() -> Result<Outcome> {
    let omega = 1.0;
    let lambda = 1.0;
    let grid = TimeGrid::from_tmax(1e-2, 5.0)?;
    let stride = 10;
    let n = 10_000;
    let mut pass = true;
    let mut notes = Vec::new();
    let cases = [(measurement_sigma_z(omega, lambda), spin(cx(1.0, 2.0), cx(1.0, 1.0))), (dissipative_spin(omega, lambda), spin(cx(3.0, 0.0), cx(1.0, 0.0)))];
    for (i, (model, psi0)) in cases.iter().enumerate() {
        let integ = Integrator::new(model, &CorrelationKernel::MarkovDelta, grid, None)?;
        let nm = ensemble(&integ, psi0, Mode::Nonlinear, stride, vec![], n, 800 + i as u64, |_| ())?;
        let records = nm.acc.times.len();
        let mut sum = vec![nalgebra::DMatrix::<C64>::zeros(2, 2); records];
        let mut sq = vec![nalgebra::DMatrix::<C64>::zeros(2, 2); records];
        for k in 0..n {
            let xi = markov_increments_with(grid, &mut trajectory_rng(900 + i as u64, k as u64));
            let mut psi = psi0.clone();
            for step in 0..=grid.n_steps {
                if step % stride == 0 {
                    let p = psi.projector().m;
                    sum[step / stride] += &p;
                    sq[step / stride] += p.map(|v| cx(v.re * v.re, v.im * v.im));
                }
                if step < grid.n_steps {
                    psi = markov_qsd_step(&psi, &model.h, &model.l, xi.step_value(step), grid.dt)?;
                }
            }
        }
        let nf = n as f64;
        let mut worst: f64 = 0.0;
        for r in 0..records {
            let rho = nm.acc.rho(r);
            let se = nm.acc.rho_se(r);
            for (a, b) in [(0, 0), (0, 1)] {
                let m = sum[r][(a, b)] / nf;
                let v = sq[r][(a, b)] / nf;
                let se_re = ((v.re - m.re * m.re).max(0.0) / (nf - 1.0)).sqrt();
                let se_im = ((v.im - m.im * m.im).max(0.0) / (nf - 1.0)).sqrt();
                worst = worst.max(z_score(rho.m[(a, b)].re, se[(a, b)].re, m.re, se_re)).max(z_score(rho.m[(a, b)].im, se[(a, b)].im, m.im, se_im));
            }
        }
        pass &= worst <= 3.0 && nm.failures == 0;
        notes.push(format!("{}: max z {worst:.2}", model.name));
    }
    // decay rate from batch means of ρ₁₁ on ωt ∈ [0, 3]
    let model = dissipative_spin(omega, lambda);
    let integ = Integrator::new(&model, &CorrelationKernel::MarkovDelta, grid, None)?;
    let psi0 = spin(cx(3.0, 0.0), cx(1.0, 0.0));
    let res = ensemble(&integ, &psi0, Mode::Nonlinear, stride, bloch_ops(), n, 850, |s| s[2].iter().map(|v| 0.5 * (1.0 + v.re)).collect::<Vec<f64>>())?;
    let times = res.acc.times.clone();
    let window: Vec<usize> = (0..times.len()).filter(|&r| times[r] <= 3.0 / (lambda * lambda) + 1e-9).collect();
    let series: Vec<&Vec<f64>> = res.summaries.iter().flatten().collect();
    let n_batches = 20;
    let per = series.len() / n_batches;
    let rates: Vec<f64> = (0..n_batches)
        .map(|b| {
            let batch = &series[b * per..(b + 1) * per];
            let x: Vec<f64> = window.iter().map(|&r| times[r]).collect();
            let y: Vec<f64> = window.iter().map(|&r| (batch.iter().map(|s| s[r]).sum::<f64>() / per as f64).ln()).collect();
            -linear_fit(&x, &y).1
        })
        .collect();
    let (rate, rate_se) = mean_se(&rates);
    let z_rate = z_score(rate, rate_se, lambda * lambda, 0.0);
    pass &= z_rate <= 3.0;
    notes.push(format!("decay rate {rate:.4} +- {rate_se:.4} vs {} (z {z_rate:.2})", lambda * lambda));
    outcome(pass, notes.join("; "))
}

fn c9_qbm() -> Result<Outcome> {
    let omega = 1.0;
    let kernel = CorrelationKernel::Exponential { gamma: omega, omega: 0.0 };
    let mut notes = Vec::new();
    let s0 = qbm_schedule(&kernel, omega, 0.0, TimeGrid::new(1e-2, 1000)?)?;
    let uncoupled = s0.f.iter().chain(&s0.g).chain(&s0.jt).all(|v| *v == cx(0.0, 0.0));
    let small = 1e-2;
    let grid_p = TimeGrid::new(1e-3, 5000)?;
    let sp = qbm_schedule(&kernel, 0.0, small, grid_p)?;
    let mut pert_f: f64 = 0.0;
    let mut pert_g: f64 = 0.0;
    for i in 0..grid_p.n_nodes() {
        let t = grid_p.t(i);
        pert_f = pert_f.max((sp.f[i] - cx(small / 2.0 * (1.0 - (-t).exp()), 0.0)).norm());
        pert_g = pert_g.max(sp.g[i].norm());
    }
    let ode_ok = uncoupled && pert_f <= 10.0 * small.powi(3) && pert_g <= 10.0 * small * small;
    notes.push(format!("lambda=0 zero: {uncoupled}; perturbative |dF| {pert_f:.1e} (<= 10 lambda^3), |G| {pert_g:.1e} (<= 10 lambda^2)"));

    let n_trunc = 20;
    let model = qbm(omega, 0.5, n_trunc)?;
    let grid = TimeGrid::from_tmax(1e-2, 10.0)?;
    let psi0 = coherent_state(cx(1.0, 0.0), n_trunc)?;
    let integ = Integrator::new(&model, &kernel, grid, None)?;
    let res = ensemble(&integ, &psi0, Mode::Nonlinear, 10, vec![], 10_000, 909, |_| ())?;
    let mut min_eig = f64::INFINITY;
    let mut tr_dev: f64 = 0.0;
    for r in 0..res.acc.times.len() {
        let rho = res.acc.rho(r);
        min_eig = min_eig.min(rho.min_eigenvalue());
        tr_dev = tr_dev.max((rho.trace() - cx(1.0, 0.0)).norm());
    }
    let ens_ok = min_eig >= -1e-4 && tr_dev <= 1e-9 && res.failures == 0;
    notes.push(format!("min eigenvalue {min_eig:.2e}, |Tr-1| {tr_dev:.1e}, truncation flagged {}", res.truncation_suspect));

    let fd_grid = TimeGrid::new(1e-3, 2000)?;
    let mut rng = trajectory_rng(910, 0);
    let pairs: Vec<(usize, usize)> = (0..3)
        .map(|_| {
            let n = rng.random_range(200..=2000);
            (rng.random_range(0..n), n)
        })
        .collect();
    let eps = cx(1e-6, 1e-6);
    let checks = consistency_check(&qbm(omega, 0.5, 24)?, &kernel, fd_grid, &coherent_state(cx(0.8, 0.3), 24)?, 911, &pairs, eps)?;
    let bound = 10.0 * (eps.norm() + fd_grid.dt);
    let fd_worst = checks.iter().map(|c| c.rel_residual).fold(0.0, f64::max);
    notes.push(format!("FD residual {fd_worst:.1e} at (t,s) {:?} (bound {bound:.1e})", checks.iter().map(|c| (c.t, c.s)).collect::<Vec<_>>()));
    outcome(ode_ok && ens_ok && fd_worst <= bound, notes.join("; "))
}

fn c10_toy_drift() -> Result<Outcome> {
    let lambda = 0.7;
    let n_trunc = 60;
    let model = toy(lambda, n_trunc)?;
    let kernel = CorrelationKernel::Exponential { gamma: 1.0, omega: 0.0 };
    let grid = TimeGrid::from_tmax(2e-3, 2.0)?;
    let b = boson_operators(n_trunc)?;
    let psi0 = fock_state(0, n_trunc)?;
    let with = Integrator::new(&model, &kernel, grid, None)?;
    let without = Integrator { schedule: with.schedule.clone().without_toy_drift(), ..with.clone() };
    let n = 2_000;
    let q_series = |s: &[Vec<C64>]| s[0].iter().map(|v| v.re).collect::<Vec<f64>>();
    let a = ensemble(&with, &psi0, Mode::Nonlinear, 50, vec![("q".into(), b.q.clone())], n, 1010, q_series)?;
    let bb = ensemble(&without, &psi0, Mode::Nonlinear, 50, vec![("q".into(), b.q.clone())], n, 1010, q_series)?;
    let mut z_max: f64 = 0.0;
    for r in 0..a.acc.times.len() {
        let d: Vec<f64> = a.summaries.iter().zip(&bb.summaries).filter_map(|(x, y)| Some(x.as_ref()?[r] - y.as_ref()?[r])).collect();
        let (m, se) = mean_se(&d);
        z_max = z_max.max(z_score(m, se, 0.0, 0.0));
    }
    let markov = Integrator::new(&model, &CorrelationKernel::MarkovDelta, grid, None)?;
    let drift_zero = (0..grid.n_nodes()).all(|i| markov.schedule.coeffs(i)[1] == cx(0.0, 0.0));
    let markov_without = Integrator { schedule: markov.schedule.clone().without_toy_drift(), ..markov.clone() };
    let opts = TrajectoryOptions::new(Mode::Nonlinear);
    let fa = markov.run_indexed(&psi0, 1011, 0, &opts, |_, _| {})?.final_state;
    let fb = markov_without.run_indexed(&psi0, 1011, 0, &opts, |_, _| {})?.final_state;
    outcome(
        z_max > 5.0 && drift_zero && fa == fb,
        format!("paired <q> difference max z {z_max:.1}; delta-kernel drift coefficient identically 0: {drift_zero}; trajectories identical: {}", fa == fb),
    )
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Result<Outcome>); 10] = [
        ("1 measurement ensemble vs closed form", c1_measurement_fig),
        ("2 dissipative pinning and ensemble", c2_dissipative_fig),
        ("3 F(t) closed form and critical time", c3_f_verification),
        ("4 linear/nonlinear equivalence", c4_unravelling_equivalence),
        ("5 cat oracle equivalence and revival", c5_cat_oracle),
        ("6 cut equality", c6_cut_equality),
        ("7 noise two-point statistics", c7_noise),
        ("8 Markov limit", c8_markov_limit),
        ("9 QBM properties", c9_qbm),
        ("10 toy drift term", c10_toy_drift),
    ];
    let wanted: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (k, (name, run)) in criteria.iter().enumerate() {
        if !wanted.is_empty() && !wanted.contains(&(k + 1)) {
            continue;
        }
        let start = Instant::now();
        let (pass, detail) = match run() {
            Ok(o) => (o.pass, o.detail),
            Err(e) => (false, format!("error: {e}")),
        };
        failed += !pass as usize;
        println!("{} criterion {name}: {detail} [{:.1}s]", if pass { "PASS" } else { "FAIL" }, start.elapsed().as_secs_f64());
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
