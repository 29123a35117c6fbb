//! Heun integrators for the linear and the normalized non-Markovian QSD
//! equations, with the Girsanov shift of the noise.
//!
//! The diagonal of `H` is carried exactly by an integrating factor
//! (Lawson-Heun), so free rotation of high Fock levels accrues no phase error.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::ansatz::{qbm_schedule, scalar_schedule};
use crate::hilbert::{OperatorMatrix, StateVector, TRUNCATION_SUSPECT_LIMIT};
use crate::models::{AnsatzVariant, ModelSpec};
use crate::noise::{default_sampler, trajectory_rng, CorrelationKernel, ExpComponent, NoisePath, NoiseSource, Sampler, TimeGrid};
use crate::{c, Error, Result, C64, I};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Linear,
    Nonlinear,
}

/// How the shifted noise enters noise-dependent memory operators.
///
/// `SelfConsistent` shifts the whole past path by the current `⟨L†⟩`
/// history; `PostHoc` uses the shift each past point had when it was reached.
/// The two coincide for every model whose `Ô` does not depend on the noise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum ShiftConvention {
    #[default]
    #[serde(rename = "self-consistent")]
    SelfConsistent,
    #[serde(rename = "posthoc")]
    PostHoc,
}

/// Bounds on `‖ψ‖²` outside of which a step reports `NumericalBlowup`.
pub const NORM_SQ_BOUNDS: (f64, f64) = (1e-60, 1e60);

#[derive(Debug, Clone)]
struct QbmCoeffs {
    g: Vec<C64>,
    jt: Vec<C64>,
    kappa: C64,
    lambda: f64,
}

/// Noise-independent part of the memory operator on every grid node,
/// `Ō(t_i) = Σ_k c_k(t_i) B_k`, plus what the stepper needs around it.
#[derive(Debug, Clone)]
pub struct MemorySchedule {
    pub grid: TimeGrid,
    /// `H` without its diagonal.
    h_off: OperatorMatrix,
    /// `e^{-i H_jj dt}`
    phase: Vec<C64>,
    l: OperatorMatrix,
    ldag: OperatorMatrix,
    ops: Vec<OperatorMatrix>,
    /// `L† B_k`
    mops: Vec<OperatorMatrix>,
    coeffs: Vec<Vec<C64>>,
    pub pin_step: Option<usize>,
    absorbing: Option<StateVector>,
    qbm: Option<QbmCoeffs>,
    /// `None` for the delta kernel.
    shift_components: Option<Vec<ExpComponent>>,
    osc_dim: Option<usize>,
}

impl MemorySchedule {
    pub fn new(model: &ModelSpec, kernel: &CorrelationKernel, grid: TimeGrid) -> Result<Self> {
        model.check_kernel(kernel)?;
        let n = grid.n_nodes();
        let dim = model.dim();
        let mut pin_step = None;
        let mut qbm = None;
        let (ops, coeffs): (Vec<OperatorMatrix>, Vec<Vec<C64>>) = match &model.ansatz {
            AnsatzVariant::ConstantOp { op } => (vec![op.clone()], (0..n).map(|i| vec![kernel.integral(grid.t(i))]).collect()),
            AnsatzVariant::ScalarTimesOp { op } => {
                let s = scalar_schedule(kernel, model.omega, model.lambda, grid);
                pin_step = s.pin_step;
                (vec![op.clone()], s.f.into_iter().map(|f| vec![f]).collect())
            }
            AnsatzVariant::ToyShift { q } => {
                let lam = model.lambda;
                let coeffs = (0..n).map(|i| vec![kernel.integral(grid.t(i)) * lam, -kernel.first_moment(grid.t(i)) * lam]).collect();
                (vec![q.clone(), OperatorMatrix::identity(dim)], coeffs)
            }
            AnsatzVariant::Qbm { q, p } => {
                let s = qbm_schedule(kernel, model.omega, model.lambda, grid)?;
                let coeffs = s.f.iter().zip(&s.g).map(|(f, g)| vec![*f, *g]).collect();
                qbm = Some(QbmCoeffs { g: s.g, jt: s.jt, kappa: s.kappa, lambda: model.lambda });
                (vec![q.clone(), p.clone()], coeffs)
            }
            AnsatzVariant::MarkovOnly => {
                if !kernel.is_markov() {
                    return Err(Error::Invalid(format!("model {} runs only with the delta kernel", model.name)));
                }
                (vec![model.l.clone()], vec![vec![c(0.5, 0.0)]; n])
            }
            AnsatzVariant::CutSpin => {
                return Err(Error::Invalid("cut_spin is integrated at the coefficient level (cut-check), not by the generic integrator".into()))
            }
        };
        let ldag = model.l.dagger();
        let mops = ops.iter().map(|b| ldag.mul(b)).collect();
        let osc_dim = model.n_trunc;
        let h = &model.h;
        Ok(Self {
            grid,
            h_off: OperatorMatrix::from_fn(dim, |i, j| if i == j { c(0.0, 0.0) } else { h.entry(i, j) }),
            phase: (0..dim).map(|j| (-I * h.entry(j, j) * grid.dt).exp()).collect(),
            l: model.l.clone(),
            ldag,
            ops,
            mops,
            coeffs,
            pin_step,
            absorbing: model.absorbing_state.clone(),
            qbm,
            shift_components: kernel.exp_components(),
            osc_dim,
        })
    }

    pub fn dim(&self) -> usize {
        self.h_off.dim()
    }

    /// Memory coefficients `c_k(t_i)`.
    pub fn coeffs(&self, i: usize) -> &[C64] {
        &self.coeffs[i]
    }

    /// Drops the `∫(t-s)α` drift of the toy model.
    pub fn without_toy_drift(mut self) -> Self {
        if self.ops.len() == 2 && self.qbm.is_none() {
            for c in &mut self.coeffs {
                c[1] = C64::new(0.0, 0.0);
            }
        }
        self
    }

    /// Noise-free memory operator `Σ_k c_k(t_i) B_k`.
    pub fn obar(&self, i: usize) -> OperatorMatrix {
        let mut acc = OperatorMatrix::zeros(self.dim());
        for (b, c) in self.ops.iter().zip(&self.coeffs[i]) {
            acc = acc.add(&b.scale(*c));
        }
        acc
    }
}

/// Recursive trapezoidal quadrature of `∫₀ᵗ α*(t,s) ℓ_s ds` for kernels that
/// are sums of exponentials; the delta kernel contributes `ℓ_t/2`.
#[derive(Debug, Clone)]
pub struct ShiftAccumulator {
    comps: Option<Vec<ExpComponent>>,
    decay: Vec<C64>,
    /// History part of each component, without the `t` endpoint.
    base: Vec<C64>,
    dt: f64,
    step: usize,
}

impl ShiftAccumulator {
    pub fn new(kernel: &CorrelationKernel, dt: f64) -> Self {
        Self::from_components(kernel.exp_components(), dt)
    }

    fn from_components(comps: Option<Vec<ExpComponent>>, dt: f64) -> Self {
        let m = comps.as_ref().map_or(0, |v| v.len());
        let decay = comps.iter().flatten().map(|e| (-e.kappa.conj() * dt).exp()).collect();
        Self { comps, decay, base: vec![c(0.0, 0.0); m], dt, step: 0 }
    }

    fn end_weight(&self) -> f64 {
        if self.step == 0 {
            0.0
        } else {
            self.dt / 2.0
        }
    }

    /// Shift at the current node given `ℓ` there.
    pub fn current(&self, ell: C64) -> C64 {
        match &self.comps {
            None => 0.5 * ell,
            Some(cs) => {
                let e = self.end_weight();
                cs.iter().zip(&self.base).map(|(k, b)| b + e * k.w.conj() * ell).sum()
            }
        }
    }

    /// Shift at the next node given `ℓ` here and a guess `ell_next` there.
    pub fn next(&self, ell: C64, ell_next: C64) -> C64 {
        match &self.comps {
            None => 0.5 * ell_next,
            Some(cs) => {
                let e = self.end_weight() + self.dt / 2.0;
                cs.iter()
                    .zip(&self.base)
                    .zip(&self.decay)
                    .map(|((k, b), d)| d * (b + e * k.w.conj() * ell) + self.dt / 2.0 * k.w.conj() * ell_next)
                    .sum()
            }
        }
    }

    /// Commits `ℓ` at the current node and moves to the next.
    pub fn advance(&mut self, ell: C64) {
        if let Some(cs) = &self.comps {
            let e = self.end_weight() + self.dt / 2.0;
            for ((b, k), d) in self.base.iter_mut().zip(cs).zip(&self.decay) {
                *b = d * (*b + e * k.w.conj() * ell);
            }
        }
        self.step += 1;
    }
}

/// Direct trapezoidal quadrature of the shift at node `n` from `ℓ` history.
pub fn shift_direct(kernel: &CorrelationKernel, ell: &[C64], dt: f64, n: usize) -> Result<C64> {
    if kernel.is_markov() {
        return Ok(0.5 * ell[n]);
    }
    if n == 0 {
        return Ok(c(0.0, 0.0));
    }
    let t = n as f64 * dt;
    let mut acc = c(0.0, 0.0);
    for (j, l) in ell.iter().enumerate().take(n + 1) {
        let w = if j == 0 || j == n { 0.5 } else { 1.0 };
        acc += w * crate::noise::kernel_eval(kernel, t, j as f64 * dt)?.conj() * l;
    }
    Ok(acc * dt)
}

#[derive(Debug, Clone)]
pub struct TrajectoryOptions {
    pub mode: Mode,
    pub convention: ShiftConvention,
    /// Record every `stride`-th node (node 0 always).
    pub stride: usize,
    pub observables: Vec<(String, OperatorMatrix)>,
    pub keep_states: bool,
}

impl TrajectoryOptions {
    pub fn new(mode: Mode) -> Self {
        Self { mode, convention: ShiftConvention::SelfConsistent, stride: 1, observables: Vec::new(), keep_states: false }
    }
}

/// Recorded path of one trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRecord {
    pub times: Vec<f64>,
    pub observable_names: Vec<String>,
    /// `observables[k][r]`: normalized expectation of observable k at record r.
    pub observables: Vec<Vec<C64>>,
    /// `‖ψ‖²` at each record (the Girsanov weight in linear mode).
    pub norm_sq: Vec<f64>,
    /// `⟨L†⟩` at each record.
    pub ldag: Vec<C64>,
    pub states: Vec<StateVector>,
    pub final_state: StateVector,
    pub pinned_at: Option<f64>,
    pub truncation_suspect: bool,
    /// QBM noise integral `K` on every node (empty otherwise).
    pub k_history: Vec<C64>,
}

struct Work {
    lpsi: Vec<C64>,
    v: Vec<C64>,
    w: Vec<C64>,
    k1: Vec<C64>,
    k2: Vec<C64>,
    pred: Vec<C64>,
}

fn dot(a: &[C64], b: &[C64]) -> C64 {
    a.iter().zip(b).map(|(x, y)| x.conj() * y).sum()
}

fn norm_sq(a: &[C64]) -> f64 {
    a.iter().map(|x| x.norm_sqr()).sum()
}

impl MemorySchedule {
    fn l_expect(&self, psi: &[C64], ws: &mut Work) -> C64 {
        self.l.apply_into(psi, &mut ws.lpsi);
        dot(psi, &ws.lpsi) / norm_sq(psi)
    }

    /// Right-hand side at node `node` with scalar memory part `kick` and noise
    /// `z`, less the diagonal of `-iH`.
    fn rhs(&self, psi: &[C64], node: usize, kick: C64, z: C64, mode: Mode, out: &mut [C64], ws: &mut Work) {
        let coeffs = &self.coeffs[node];
        out.iter_mut().for_each(|o| *o = c(0.0, 0.0));
        self.h_off.apply_add(-I, psi, out);
        match mode {
            Mode::Linear => {
                self.l.apply_add(z, psi, out);
                for (m, k) in self.mops.iter().zip(coeffs) {
                    m.apply_add(-k, psi, out);
                }
                if kick != c(0.0, 0.0) {
                    self.ldag.apply_add(-kick, psi, out);
                }
            }
            Mode::Nonlinear => {
                let n2 = norm_sq(psi);
                self.l.apply_into(psi, &mut ws.lpsi);
                let lexp = dot(psi, &ws.lpsi) / n2;
                let ell = lexp.conj();
                ws.v.iter_mut().zip(psi).for_each(|(v, p)| *v = kick * p);
                ws.w.iter_mut().for_each(|w| *w = c(0.0, 0.0));
                if kick != c(0.0, 0.0) {
                    self.ldag.apply_add(kick, psi, &mut ws.w);
                }
                for ((b, m), k) in self.ops.iter().zip(&self.mops).zip(coeffs) {
                    b.apply_add(*k, psi, &mut ws.v);
                    m.apply_add(*k, psi, &mut ws.w);
                }
                let ev = dot(psi, &ws.v) / n2;
                let ew = dot(psi, &ws.w) / n2;
                let scal = -z * lexp + (ew - ell * ev);
                for j in 0..psi.len() {
                    out[j] += z * ws.lpsi[j] - ws.w[j] + ell * ws.v[j] + scal * psi[j];
                }
            }
        }
    }

    fn oscillator_top(&self, psi: &[C64]) -> f64 {
        let Some(n) = self.osc_dim else { return 0.0 };
        let top: f64 = psi.iter().enumerate().filter(|(k, _)| k % n >= n - 2).map(|(_, a)| a.norm_sqr()).sum();
        top / norm_sq(psi)
    }

    /// Integrates one trajectory along the per-step noise values `zeta`,
    /// calling `visit(node, ψ)` on node 0 and every `stride`-th node.
    pub fn integrate(
        &self,
        psi0: &StateVector,
        zeta: &[C64],
        opts: &TrajectoryOptions,
        mut visit: impl FnMut(usize, &[C64]),
    ) -> Result<IntegrationSummary> {
        let dim = self.dim();
        if psi0.dim() != dim {
            return Err(Error::DimensionMismatch { expected: dim, found: psi0.dim() });
        }
        if zeta.len() != self.grid.n_steps {
            return Err(Error::DimensionMismatch { expected: self.grid.n_steps, found: zeta.len() });
        }
        let stride = opts.stride.max(1);
        let dt = self.grid.dt;
        let mode = opts.mode;
        let zero = c(0.0, 0.0);
        let mut ws = Work { lpsi: vec![zero; dim], v: vec![zero; dim], w: vec![zero; dim], k1: vec![zero; dim], k2: vec![zero; dim], pred: vec![zero; dim] };
        let mut psi: Vec<C64> = psi0.normalized()?.amps.iter().copied().collect();
        let mut shift = ShiftAccumulator::from_components(self.shift_components.clone(), dt);
        let mut kq = zero;
        let mut k_history = Vec::new();
        let mut pinned_at = None;
        let mut truncation_suspect = false;
        if self.qbm.is_some() {
            k_history.push(kq);
        }
        visit(0, &psi);
        for i in 0..self.grid.n_steps {
            if pinned_at.is_none() && self.pin_step == Some(i) {
                if let Some(abs) = &self.absorbing {
                    let amp = dot(abs.as_slice(), &psi);
                    let amp = match mode {
                        Mode::Linear => amp,
                        Mode::Nonlinear if amp.norm() > 0.0 => amp / amp.norm(),
                        Mode::Nonlinear => c(1.0, 0.0),
                    };
                    psi.iter_mut().zip(abs.as_slice()).for_each(|(p, a)| *p = amp * a);
                    pinned_at = Some(self.grid.t(i));
                }
            }
            if pinned_at.is_none() {
                let ell = self.l_expect(&psi, &mut ws).conj();
                let z1 = match mode {
                    Mode::Linear => zeta[i],
                    Mode::Nonlinear => zeta[i] + shift.current(ell),
                };
                let kick1 = I * kq;
                let mut kdot1 = zero;
                if let Some(q) = &self.qbm {
                    kdot1 = q.lambda * q.g[i] * z1 - (q.kappa + I * q.lambda * q.g[i]) * kq;
                    if mode == Mode::Nonlinear && opts.convention == ShiftConvention::SelfConsistent {
                        kdot1 += ell * q.jt[i];
                    }
                }
                let mut k1 = std::mem::take(&mut ws.k1);
                self.rhs(&psi, i, kick1, z1, mode, &mut k1, &mut ws);
                let mut pred = std::mem::take(&mut ws.pred);
                for j in 0..dim {
                    pred[j] = self.phase[j] * (psi[j] + dt * k1[j]);
                }
                let kp = kq + dt * kdot1;
                let z2 = match mode {
                    Mode::Linear => zeta[i],
                    Mode::Nonlinear => {
                        let ell_p = self.l_expect(&pred, &mut ws).conj();
                        zeta[i] + shift.next(ell, ell_p)
                    }
                };
                let mut kdot2 = zero;
                if let Some(q) = &self.qbm {
                    kdot2 = q.lambda * q.g[i + 1] * z2 - (q.kappa + I * q.lambda * q.g[i + 1]) * kp;
                    if mode == Mode::Nonlinear && opts.convention == ShiftConvention::SelfConsistent {
                        let ell_p = self.l_expect(&pred, &mut ws).conj();
                        kdot2 += ell_p * q.jt[i + 1];
                    }
                }
                let mut k2 = std::mem::take(&mut ws.k2);
                self.rhs(&pred, i + 1, I * kp, z2, mode, &mut k2, &mut ws);
                for j in 0..dim {
                    psi[j] = self.phase[j] * (psi[j] + 0.5 * dt * k1[j]) + 0.5 * dt * k2[j];
                }
                kq += 0.5 * dt * (kdot1 + kdot2);
                ws.k1 = k1;
                ws.k2 = k2;
                ws.pred = pred;
                if mode == Mode::Nonlinear {
                    shift.advance(ell);
                }
                let n2 = norm_sq(&psi);
                let t = self.grid.t(i + 1);
                if !n2.is_finite() || n2 < NORM_SQ_BOUNDS.0 || n2 > NORM_SQ_BOUNDS.1 || !kq.re.is_finite() || !kq.im.is_finite() {
                    return Err(Error::NumericalBlowup { t, norm_sq: n2 });
                }
                if mode == Mode::Nonlinear {
                    let s = n2.sqrt().recip();
                    psi.iter_mut().for_each(|p| *p *= s);
                }
            }
            if self.qbm.is_some() {
                k_history.push(kq);
            }
            if (i + 1) % stride == 0 {
                if self.oscillator_top(&psi) > TRUNCATION_SUSPECT_LIMIT {
                    truncation_suspect = true;
                }
                visit(i + 1, &psi);
            }
        }
        Ok(IntegrationSummary { final_state: StateVector { amps: psi.into() }, pinned_at, truncation_suspect, k_history })
    }

    pub fn l_expectation(&self, psi: &StateVector) -> C64 {
        let mut lpsi = vec![c(0.0, 0.0); psi.dim()];
        self.l.apply_into(psi.as_slice(), &mut lpsi);
        dot(psi.as_slice(), &lpsi) / psi.norm_sq()
    }
}

#[derive(Debug, Clone)]
pub struct IntegrationSummary {
    pub final_state: StateVector,
    pub pinned_at: Option<f64>,
    pub truncation_suspect: bool,
    pub k_history: Vec<C64>,
}

/// A schedule plus a noise source: everything shared by the trajectories of
/// one ensemble.
#[derive(Debug, Clone)]
pub struct Integrator {
    pub schedule: MemorySchedule,
    pub source: NoiseSource,
    pub sampler: Sampler,
}

impl Integrator {
    pub fn new(model: &ModelSpec, kernel: &CorrelationKernel, grid: TimeGrid, sampler: Option<Sampler>) -> Result<Self> {
        let schedule = MemorySchedule::new(model, kernel, grid)?;
        let sampler = sampler.unwrap_or_else(|| default_sampler(kernel));
        let source = NoiseSource::new(kernel, grid, sampler)?;
        Ok(Self { schedule, source, sampler })
    }

    pub fn sample_noise<R: Rng + ?Sized>(&self, rng: &mut R) -> NoisePath {
        self.source.sample(self.schedule.grid, rng)
    }

    /// Trajectory `index` of the ensemble seeded by `master_seed`.
    pub fn run_indexed(
        &self,
        psi0: &StateVector,
        master_seed: u64,
        index: u64,
        opts: &TrajectoryOptions,
        visit: impl FnMut(usize, &[C64]),
    ) -> Result<IntegrationSummary> {
        let noise = self.sample_noise(&mut trajectory_rng(master_seed, index));
        self.schedule.integrate(psi0, &noise.step_values(), opts, visit)
    }

    pub fn record(&self, psi0: &StateVector, noise: &NoisePath, opts: &TrajectoryOptions) -> Result<TrajectoryRecord> {
        let grid = self.schedule.grid;
        let mut rec = TrajectoryRecord {
            times: Vec::new(),
            observable_names: opts.observables.iter().map(|(n, _)| n.clone()).collect(),
            observables: vec![Vec::new(); opts.observables.len()],
            norm_sq: Vec::new(),
            ldag: Vec::new(),
            states: Vec::new(),
            final_state: psi0.clone(),
            pinned_at: None,
            truncation_suspect: false,
            k_history: Vec::new(),
        };
        let summary = self.schedule.integrate(psi0, &noise.step_values(), opts, |node, psi| {
            let n2 = norm_sq(psi);
            rec.times.push(grid.t(node));
            rec.norm_sq.push(n2);
            let mut tmp = vec![c(0.0, 0.0); psi.len()];
            for (k, (_, op)) in opts.observables.iter().enumerate() {
                op.apply_into(psi, &mut tmp);
                rec.observables[k].push(dot(psi, &tmp) / n2);
            }
            self.schedule.ldag.apply_into(psi, &mut tmp);
            rec.ldag.push(dot(psi, &tmp) / n2);
            if opts.keep_states {
                rec.states.push(StateVector { amps: psi.to_vec().into() });
            }
        })?;
        rec.final_state = summary.final_state;
        rec.pinned_at = summary.pinned_at;
        rec.truncation_suspect = summary.truncation_suspect;
        rec.k_history = summary.k_history;
        Ok(rec)
    }
}

/// One trajectory, deterministic in `(model, kernel, grid, seed, options)`.
pub fn run_trajectory(
    model: &ModelSpec,
    kernel: &CorrelationKernel,
    grid: TimeGrid,
    seed: u64,
    psi0: &StateVector,
    opts: &TrajectoryOptions,
) -> Result<TrajectoryRecord> {
    let integ = Integrator::new(model, kernel, grid, None)?;
    let noise = integ.sample_noise(&mut trajectory_rng(seed, 0));
    integ.record(psi0, &noise, opts)
}

/// Outcome of one finite-difference check of `δψ_t/δz_s = Ô(t,s,z)ψ_t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConsistencyCheck {
    pub t: f64,
    pub s: f64,
    /// `‖Ô ψ_t‖`
    pub scale: f64,
    /// `‖(ψ^ε_t - ψ_t)/(ε dt) - Ô ψ_t‖ / ‖Ô ψ_t‖`
    pub rel_residual: f64,
}

/// Perturbs the noise held during step `j` by `ε` and compares the response of
/// the linear equation with the memory operator `Ô(t, s)`, `s` the step midpoint.
pub fn consistency_check(
    model: &ModelSpec,
    kernel: &CorrelationKernel,
    grid: TimeGrid,
    psi0: &StateVector,
    seed: u64,
    pairs: &[(usize, usize)],
    eps: C64,
) -> Result<Vec<ConsistencyCheck>> {
    let integ = Integrator::new(model, kernel, grid, None)?;
    let noise = integ.sample_noise(&mut trajectory_rng(seed, 0));
    let zeta = noise.step_values();
    let opts = TrajectoryOptions::new(Mode::Linear);
    let mut base = vec![Vec::new(); grid.n_nodes()];
    let summary = integ.schedule.integrate(psi0, &zeta, &opts, |n, psi| base[n] = psi.to_vec())?;
    let mut out = Vec::new();
    for &(j, n) in pairs {
        if j >= n || n > grid.n_steps {
            return Err(Error::Invalid(format!("consistency pair needs step < node <= n_steps, got ({j}, {n})")));
        }
        let mut bumped = zeta.clone();
        bumped[j] += eps;
        let mut pert = Vec::new();
        integ.schedule.integrate(psi0, &bumped, &opts, |k, psi| {
            if k == n {
                pert = psi.to_vec();
            }
        })?;
        let lhs: Vec<C64> = pert.iter().zip(&base[n]).map(|(a, b)| (a - b) / (eps * grid.dt)).collect();
        let o_a = memory_operator_at(model, kernel, &integ.schedule, &noise, &summary.k_history, j, n)?;
        let o_b = memory_operator_at(model, kernel, &integ.schedule, &noise, &summary.k_history, j + 1, n)?;
        let o = o_a.add(&o_b).scale(c(0.5, 0.0));
        let mut rhs = vec![c(0.0, 0.0); base[n].len()];
        o.apply_into(&base[n], &mut rhs);
        let scale = norm_sq(&rhs).sqrt();
        let diff: f64 = lhs.iter().zip(&rhs).map(|(a, b)| (a - b).norm_sqr()).sum::<f64>().sqrt();
        out.push(ConsistencyCheck { t: grid.t(n), s: grid.t(j) + grid.dt / 2.0, scale, rel_residual: diff / scale });
    }
    Ok(out)
}

/// `Ô(t_n, t_j)` along the linear trajectory that produced `k_history`.
fn memory_operator_at(
    model: &ModelSpec,
    kernel: &CorrelationKernel,
    schedule: &MemorySchedule,
    noise: &NoisePath,
    k_history: &[C64],
    j: usize,
    n: usize,
) -> Result<OperatorMatrix> {
    let grid = schedule.grid;
    let lam = model.lambda;
    let tau = grid.t(n) - grid.t(j);
    match &model.ansatz {
        AnsatzVariant::ConstantOp { op } => Ok(op.clone()),
        AnsatzVariant::ScalarTimesOp { op } => {
            let s = scalar_schedule(kernel, model.omega, lam, grid);
            Ok(op.scale(lam * s.u[j] / s.u[n] * (I * model.omega * tau).exp()))
        }
        AnsatzVariant::ToyShift { q } => Ok(q.scale(c(lam, 0.0)).add(&OperatorMatrix::identity(q.dim()).scale(c(-lam * tau, 0.0)))),
        AnsatzVariant::Qbm { q, p } => {
            let qc = schedule.qbm.as_ref().expect("qbm schedule");
            let dt = grid.dt;
            let w = model.omega;
            let f_at = |k: usize| schedule.coeffs[k][0];
            let rhs = |k: usize, y: [C64; 3], jv: C64| -> [C64; 3] {
                let (ff, gg) = (f_at(k), qc.g[k]);
                let [f, g, _] = y;
                [
                    w * g - 2.0 * I * lam * ff * g + I * lam * gg * f - I * lam * jv,
                    -w * f - I * lam * gg * g,
                    I * lam * g * (noise.z[k] - I * k_history[k]),
                ]
            };
            let mut y = [c(lam, 0.0), c(0.0, 0.0), c(0.0, 0.0)];
            let mut jv = lam * qc.g[j];
            for k in j..n {
                let jn = jv * (-(qc.kappa * dt + I * lam * dt * (qc.g[k] + qc.g[k + 1]) / 2.0)).exp();
                let d1 = rhs(k, y, jv);
                let pred: [C64; 3] = std::array::from_fn(|m| y[m] + dt * d1[m]);
                let d2 = rhs(k + 1, pred, jn);
                y = std::array::from_fn(|m| y[m] + 0.5 * dt * (d1[m] + d2[m]));
                jv = jn;
            }
            Ok(q.scale(y[0]).add(&p.scale(y[1])).add(&OperatorMatrix::identity(q.dim()).scale(y[2])))
        }
        AnsatzVariant::MarkovOnly | AnsatzVariant::CutSpin => Err(Error::Invalid(format!("no memory operator for model {}", model.name))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hilbert::{coherent_state, spin_operators, spin_up};
    use crate::models::{dissipative_spin, measurement_sigma_z, oscillator_zero_t};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn spin_state(a: C64, b: C64) -> StateVector {
        StateVector::new(vec![a, b]).unwrap().normalized().unwrap()
    }

    #[test]
    fn uncoupled_is_unitary() {
        let m = measurement_sigma_z(1.0, 0.0);
        let k = CorrelationKernel::Exponential { gamma: 1.0, omega: 0.0 };
        let grid = TimeGrid::new(1e-3, 10_000).unwrap();
        let integ = Integrator::new(&m, &k, grid, None).unwrap();
        let psi0 = spin_state(c(1.0, 2.0), c(1.0, 1.0));
        let mut opts = TrajectoryOptions::new(Mode::Linear);
        opts.stride = 100;
        let rec = integ.record(&psi0, &integ.sample_noise(&mut ChaCha8Rng::seed_from_u64(1)), &opts).unwrap();
        assert!(rec.norm_sq.iter().all(|n| (n - 1.0).abs() < 1e-9));
        let t = grid.t_max();
        let want = psi0.amps[0].conj() * psi0.amps[1] * (I * t).exp();
        let got = rec.final_state.amps[0].conj() * rec.final_state.amps[1];
        // the integrating factor carries diagonal H exactly
        assert!((got - want).norm() < 1e-12);
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let m = dissipative_spin(1.0, 1.0);
        let k = m.default_kernel();
        let grid = TimeGrid::new(1e-2, 800).unwrap();
        let psi0 = spin_state(c(3.0, 0.0), c(1.0, 0.0));
        let mut opts = TrajectoryOptions::new(Mode::Nonlinear);
        opts.observables.push(("sz".into(), spin_operators().sz));
        let a = run_trajectory(&m, &k, grid, 7, &psi0, &opts).unwrap();
        let b = run_trajectory(&m, &k, grid, 7, &psi0, &opts).unwrap();
        assert_eq!(a, b);
        let c2 = run_trajectory(&m, &k, grid, 8, &psi0, &opts).unwrap();
        assert_ne!(a.observables, c2.observables);
    }

    #[test]
    fn shift_examples() {
        let k = CorrelationKernel::Exponential { gamma: 1.3, omega: 0.0 };
        let dt = 1e-3;
        let cval = c(0.4, -0.7);
        let mut acc = ShiftAccumulator::new(&k, dt);
        for i in 0..3000 {
            let want = cval * (1.0 - (-1.3 * i as f64 * dt).exp()) / 2.0;
            assert!((acc.current(cval) - want).norm() < 1e-6, "i={i}");
            acc.advance(cval);
        }
        let mut zero = ShiftAccumulator::new(&k, dt);
        for _ in 0..100 {
            assert_eq!(zero.current(c(0.0, 0.0)), c(0.0, 0.0));
            zero.advance(c(0.0, 0.0));
        }
    }

    #[test]
    fn shift_recursion_matches_direct_quadrature() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let dt = 0.01;
        for k in [
            CorrelationKernel::Exponential { gamma: 0.8, omega: 1.1 },
            CorrelationKernel::SingleMode { omega: -0.5 },
            CorrelationKernel::DiscreteSpectrum { modes: vec![crate::noise::SpectralMode { omega: 0.3, weight: 0.2 }, crate::noise::SpectralMode { omega: -2.0, weight: 1.5 }] },
            CorrelationKernel::MarkovDelta,
        ] {
            let ell: Vec<C64> = (0..400).map(|_| crate::noise::complex_normal(&mut rng)).collect();
            let mut acc = ShiftAccumulator::new(&k, dt);
            for n in 0..399 {
                let d = shift_direct(&k, &ell, dt, n).unwrap();
                assert!((acc.current(ell[n]) - d).norm() < 1e-8, "{k:?} n={n}");
                let nd = shift_direct(&k, &ell, dt, n + 1).unwrap();
                assert!((acc.next(ell[n], ell[n + 1]) - nd).norm() < 1e-8);
                acc.advance(ell[n]);
            }
        }
    }

    #[test]
    fn eigenstate_has_no_shift_and_stays_put() {
        let m = dissipative_spin(1.0, 1.0);
        let k = m.default_kernel();
        let grid = TimeGrid::new(1e-2, 500).unwrap();
        let mut opts = TrajectoryOptions::new(Mode::Nonlinear);
        opts.observables.push(("sz".into(), spin_operators().sz));
        let rec = run_trajectory(&m, &k, grid, 1, &crate::hilbert::spin_down(), &opts).unwrap();
        assert!(rec.ldag.iter().all(|l| l.norm() == 0.0));
        assert!(rec.observables[0].iter().all(|v| (v.re + 1.0).abs() < 1e-12));
    }

    #[test]
    fn dissipative_trajectories_pinned_after_critical_time() {
        let m = dissipative_spin(1.0, 1.0);
        let k = m.default_kernel();
        let grid = TimeGrid::new(1e-2, 700).unwrap();
        let mut opts = TrajectoryOptions::new(Mode::Nonlinear);
        opts.observables.push(("sz".into(), spin_operators().sz));
        let psi0 = spin_state(c(3.0, 0.0), c(1.0, 0.0));
        for seed in 0..5 {
            let rec = run_trajectory(&m, &k, grid, seed, &psi0, &opts).unwrap();
            let tp = rec.pinned_at.unwrap();
            assert!(tp <= 1.5 * std::f64::consts::PI);
            for (t, sz) in rec.times.iter().zip(&rec.observables[0]) {
                if *t >= 1.5 * std::f64::consts::PI {
                    assert!(sz.re <= -1.0 + 1e-3);
                }
            }
        }
    }

    #[test]
    fn zero_coupling_coherent_state_rotates() {
        let m = oscillator_zero_t(1.0, 0.0, 30).unwrap();
        let k = CorrelationKernel::SingleMode { omega: 0.5 };
        let grid = TimeGrid::new(2e-3, 2000).unwrap();
        let beta = c(1.5, 0.0);
        let psi0 = coherent_state(beta, 30).unwrap();
        let rec = run_trajectory(&m, &k, grid, 2, &psi0, &TrajectoryOptions::new(Mode::Nonlinear)).unwrap();
        let want = coherent_state(beta * (-I * grid.t_max()).exp(), 30).unwrap();
        let fid = want.inner(&rec.final_state).norm();
        assert!((fid - 1.0).abs() < 1e-12, "{fid}");
        assert!(!rec.truncation_suspect);
    }

    #[test]
    fn markov_only_needs_delta_kernel() {
        let m = crate::models::cut_spin_oscillator(crate::models::CutParams::default(), 4).unwrap();
        let grid = TimeGrid::new(1e-2, 10).unwrap();
        assert!(MemorySchedule::new(&m, &CorrelationKernel::MarkovDelta, grid).is_ok());
        assert!(MemorySchedule::new(&m, &CorrelationKernel::SingleMode { omega: 1.0 }, grid).is_err());
        let cut = crate::models::cut_spin(crate::models::CutParams::default());
        assert!(MemorySchedule::new(&cut, &CorrelationKernel::SingleMode { omega: 0.8 }, grid).is_err());
    }

    #[test]
    fn heun_second_order_on_smooth_noise() {
        let m = measurement_sigma_z(1.0, 1.0);
        let k = CorrelationKernel::SingleMode { omega: 0.7 };
        let psi0 = spin_state(c(1.0, 0.0), c(0.0, 1.0));
        let z0 = crate::noise::complex_normal(&mut ChaCha8Rng::seed_from_u64(5));
        let run = |n: usize| {
            let grid = TimeGrid::new(2.0 / n as f64, n).unwrap();
            // the single-mode path is a pure phase rotation; midpoint values are exact averages of nodes
            let zeta: Vec<C64> = (0..n).map(|i| 0.5 * z0 * ((I * 0.7 * grid.t(i)).exp() + (I * 0.7 * grid.t(i + 1)).exp())).collect();
            let s = MemorySchedule::new(&m, &k, grid).unwrap();
            s.integrate(&psi0, &zeta, &TrajectoryOptions::new(Mode::Nonlinear), |_, _| {}).unwrap().final_state
        };
        let (a, b, c4) = (run(200), run(400), run(800));
        let d1 = (&a.amps - &b.amps).norm();
        let d2 = (&b.amps - &c4.amps).norm();
        assert!(d1 / d2 > 3.3 && d1 / d2 < 4.7, "{}", d1 / d2);
    }

    #[test]
    fn memory_operator_consistency() {
        let grid = TimeGrid::new(1e-3, 1500).unwrap();
        let eps = c(1e-6, 1e-6);
        let pairs = [(200, 1500), (700, 1100), (1300, 1400)];
        let h = OperatorMatrix::hermitian(nalgebra::DMatrix::from_fn(3, 3, |r, k| c((r + k) as f64 * 0.3, 0.0))).unwrap();
        let cases = [
            (measurement_sigma_z(1.0, 1.2), CorrelationKernel::Exponential { gamma: 1.0, omega: 0.3 }, spin_state(c(1.0, 2.0), c(1.0, 1.0))),
            (dissipative_spin(1.0, 0.8), CorrelationKernel::Exponential { gamma: 1.0, omega: 1.0 }, spin_state(c(3.0, 0.0), c(1.0, 0.0))),
            (crate::models::energy_measurement(h).unwrap(), CorrelationKernel::SingleMode { omega: 0.4 }, StateVector::new(vec![c(1.0, 0.0), c(0.5, 0.5), c(0.0, 1.0)]).unwrap()),
            (crate::models::toy(0.7, 40).unwrap(), CorrelationKernel::Exponential { gamma: 2.0, omega: 0.0 }, crate::hilbert::fock_state(0, 40).unwrap()),
            (crate::models::qbm(1.0, 0.5, 24).unwrap(), CorrelationKernel::Exponential { gamma: 1.0, omega: 0.0 }, coherent_state(c(0.8, 0.3), 24).unwrap()),
            (oscillator_zero_t(1.0, 0.3, 20).unwrap(), CorrelationKernel::SingleMode { omega: 0.5 }, coherent_state(c(1.0, 0.0), 20).unwrap()),
        ];
        for (m, k, psi0) in cases {
            for chk in consistency_check(&m, &k, grid, &psi0, 9, &pairs, eps).unwrap() {
                assert!(chk.rel_residual < 1e-4, "{} {chk:?}", m.name);
            }
        }
        // a noise-independent Ô for the dissipative model is inconsistent
        let mut wrong = dissipative_spin(1.0, 0.8);
        wrong.ansatz = AnsatzVariant::ConstantOp { op: wrong.l.clone() };
        let k = CorrelationKernel::Exponential { gamma: 1.0, omega: 1.0 };
        let worst = consistency_check(&wrong, &k, grid, &spin_state(c(3.0, 0.0), c(1.0, 0.0)), 9, &pairs, eps)
            .unwrap()
            .iter()
            .map(|chk| chk.rel_residual)
            .fold(0.0, f64::max);
        assert!(worst > 1e-2, "{worst}");
    }

    #[test]
    fn spin_up_under_dephasing_is_stationary() {
        let m = measurement_sigma_z(1.0, 1.4);
        let k = m.default_kernel();
        let grid = TimeGrid::new(1e-2, 300).unwrap();
        let rec = run_trajectory(&m, &k, grid, 3, &spin_up(), &TrajectoryOptions::new(Mode::Nonlinear)).unwrap();
        assert!((rec.final_state.amps[0].norm() - 1.0).abs() < 1e-12);
    }
}
