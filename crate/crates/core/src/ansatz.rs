//! Memory coefficients replacing the functional derivative `δψ_t/δz_s` by
//! `Ô(t,s,z)ψ_t`, and the reduced memory operator `Ō = ∫₀ᵗ α(t,s) Ô ds`.

use crate::hilbert::OperatorMatrix;
use crate::noise::{CorrelationKernel, ExpComponent, TimeGrid};
use crate::{c, Error, Result, C64, I};

/// Divergence threshold for F-type coefficients.
pub const F_LIMIT: f64 = 1e8;

#[derive(Debug, Clone)]
pub struct MemoryOperator {
    pub obar: OperatorMatrix,
    /// Noise-dependent scalar part of `Ō` (QBM only).
    pub noise_kick: C64,
}

/// `Ō = (∫₀ᵗ α) · op` for a noise-independent `Ô = op`.
pub fn obar_constant(op: &OperatorMatrix, kernel: &CorrelationKernel, t: f64) -> MemoryOperator {
    MemoryOperator { obar: op.scale(kernel.integral(t)), noise_kick: c(0.0, 0.0) }
}

/// Toy model `Ô(t,s) = λ(q - (t-s))` with `H = p`, `L = λq`:
/// `Ō = λ(∫α) q - λ(∫(t-s)α) 𝟙`.
pub fn obar_toy(q: &OperatorMatrix, lambda: f64, kernel: &CorrelationKernel, t: f64) -> MemoryOperator {
    let a = kernel.integral(t) * lambda;
    let m = kernel.first_moment(t) * lambda;
    let id = OperatorMatrix::identity(q.dim());
    MemoryOperator { obar: q.scale(a).add(&id.scale(-m)), noise_kick: c(0.0, 0.0) }
}

fn rk4<const N: usize>(y: [C64; N], dt: f64, f: impl Fn(&[C64; N]) -> [C64; N]) -> [C64; N] {
    let add = |a: &[C64; N], b: &[C64; N], h: f64| -> [C64; N] { std::array::from_fn(|k| a[k] + b[k] * h) };
    let k1 = f(&y);
    let k2 = f(&add(&y, &k1, dt / 2.0));
    let k3 = f(&add(&y, &k2, dt / 2.0));
    let k4 = f(&add(&y, &k3, dt));
    std::array::from_fn(|k| y[k] + (k1[k] + 2.0 * k2[k] + 2.0 * k3[k] + k4[k]) * (dt / 6.0))
}

fn finite(v: C64) -> bool {
    v.re.is_finite() && v.im.is_finite()
}

/// One RK4 step of `Ḟ = λγ/2 - (γ + iΩ - iω)F + λF²` (exponential kernel).
pub fn evolve_f_dissipative(f: C64, t: f64, kernel: &CorrelationKernel, omega: f64, lambda: f64, dt: f64) -> Result<C64> {
    let CorrelationKernel::Exponential { gamma, omega: big_omega } = *kernel else {
        return Err(Error::Invalid("evolve_f_dissipative needs an exponential kernel".into()));
    };
    let a = c(gamma, big_omega - omega);
    let [next] = rk4([f], dt, |y| [c(lambda * gamma / 2.0, 0.0) - a * y[0] + lambda * y[0] * y[0]]);
    if !finite(next) || next.norm() > F_LIMIT {
        return Err(Error::FDiverged { t: t + dt });
    }
    Ok(next)
}

/// Closed-form F(t) for the exponential kernel with detuning `δ = ω - Ω`,
/// `γ̃ = γ - iδ`, root `√(γ̃² - 2γλ²)`.
pub fn f_closed_form(t: f64, gamma: f64, lambda: f64, detuning: f64) -> C64 {
    let gt = c(gamma, -detuning);
    let root = (gt * gt - 2.0 * gamma * lambda * lambda).sqrt();
    gt / (2.0 * lambda) - root / (2.0 * lambda) * (root * t / 2.0 + (gt / root).atanh()).tanh()
}

/// Long-time limit of F at resonance for `γ > 2λ²`.
pub fn f_asymptote(gamma: f64, lambda: f64) -> Option<f64> {
    (gamma > 2.0 * lambda * lambda).then(|| (gamma - (gamma * gamma - 2.0 * gamma * lambda * lambda).sqrt()) / (2.0 * lambda))
}

/// Time at which F diverges at resonance; `None` when `γ ≥ 2λ²`.
pub fn critical_time(gamma: f64, lambda: f64) -> Option<f64> {
    if gamma >= 2.0 * lambda * lambda {
        return None;
    }
    let w = (2.0 * lambda * lambda * gamma - gamma * gamma).sqrt();
    Some((std::f64::consts::PI + 2.0 * (gamma / w).atan()) / w)
}

/// F(t) on the grid nodes for `Ô(t,s) = f(t,s)A`, `∂_t f = (iω + λF) f`,
/// `f(s,s) = λ`, plus the step at which the trajectory must be pinned to the
/// absorbing state.
#[derive(Debug, Clone)]
pub struct ScalarSchedule {
    pub f: Vec<C64>,
    /// `u(t) = exp(-λ∫₀ᵗ F)`; the excited amplitude is proportional to it.
    pub u: Vec<C64>,
    /// First step `i` (from node `i` to `i+1`) that may not be integrated.
    pub pin_step: Option<usize>,
}

/// Builds the schedule from the pole-free linear system
/// `u̇ = -λ Σ w_k Y_k`, `Ẏ_k = λu + (iω - κ_k) Y_k`, `F = Σ w_k Y_k / u`.
pub fn scalar_schedule(kernel: &CorrelationKernel, omega: f64, lambda: f64, grid: TimeGrid) -> ScalarSchedule {
    let n = grid.n_nodes();
    let Some(comps) = kernel.exp_components() else {
        return ScalarSchedule { f: vec![c(lambda / 2.0, 0.0); n], u: (0..n).map(|i| c(-lambda * lambda / 2.0 * grid.t(i), 0.0).exp()).collect(), pin_step: None };
    };
    let m = comps.len();
    let mut y = vec![c(0.0, 0.0); m + 1];
    y[0] = c(1.0, 0.0);
    let rhs = |y: &[C64], comps: &[ExpComponent]| -> Vec<C64> {
        let mut d = vec![c(0.0, 0.0); y.len()];
        for (k, e) in comps.iter().enumerate() {
            d[0] -= lambda * e.w * y[k + 1];
            d[k + 1] = lambda * y[0] + (I * omega - e.kappa) * y[k + 1];
        }
        d
    };
    let mut fs = Vec::with_capacity(n);
    let mut us = Vec::with_capacity(n);
    let f_of = |y: &[C64]| -> C64 { comps.iter().enumerate().map(|(k, e)| e.w * y[k + 1]).sum::<C64>() / y[0] };
    fs.push(c(0.0, 0.0));
    us.push(y[0]);
    let dt = grid.dt;
    for _ in 0..grid.n_steps {
        let k1 = rhs(&y, &comps);
        let y2: Vec<C64> = y.iter().zip(&k1).map(|(a, b)| a + b * (dt / 2.0)).collect();
        let k2 = rhs(&y2, &comps);
        let y3: Vec<C64> = y.iter().zip(&k2).map(|(a, b)| a + b * (dt / 2.0)).collect();
        let k3 = rhs(&y3, &comps);
        let y4: Vec<C64> = y.iter().zip(&k3).map(|(a, b)| a + b * dt).collect();
        let k4 = rhs(&y4, &comps);
        for k in 0..y.len() {
            y[k] += (k1[k] + 2.0 * k2[k] + 2.0 * k3[k] + k4[k]) * (dt / 6.0);
        }
        fs.push(f_of(&y));
        us.push(y[0]);
    }
    let pin_step = find_pin_step(&fs, &us, lambda, dt);
    ScalarSchedule { f: fs, u: us, pin_step }
}

/// A step is unusable when F exceeds the divergence threshold, when the
/// memory term becomes too stiff for the step (`λ|F|dt > 1/2`), or when `u`
/// passes through zero between nodes.
fn find_pin_step(fs: &[C64], us: &[C64], lambda: f64, dt: f64) -> Option<usize> {
    (0..fs.len() - 1).find(|&i| {
        let bad = |f: C64| !finite(f) || f.norm() > F_LIMIT || lambda.abs() * f.norm() * dt > 0.5;
        bad(fs[i]) || bad(fs[i + 1]) || (us[i + 1] * us[i].conj()).re <= 0.0
    })
}

/// Direct (t,s)-grid evaluation of F for any kernel: `f(t,s) = λE(t)/E(s)` with
/// `E(t) = exp(∫₀ᵗ(iω + λF))`, and `F(t)` by trapezoidal quadrature. O(n²).
pub fn scalar_f_grid(kernel: &CorrelationKernel, omega: f64, lambda: f64, grid: TimeGrid) -> Result<Vec<C64>> {
    let n = grid.n_nodes();
    let dt = grid.dt;
    if kernel.is_markov() {
        return Ok(vec![c(lambda / 2.0, 0.0); n]);
    }
    let alpha: Vec<C64> = (0..n).map(|k| crate::noise::kernel_eval(kernel, grid.t(k), 0.0)).collect::<Result<_>>()?;
    let mut fs = vec![c(0.0, 0.0); n];
    // log E at each node
    let mut log_e = vec![c(0.0, 0.0); n];
    for i in 1..n {
        let mut f_new = fs[i - 1];
        for _ in 0..4 {
            log_e[i] = log_e[i - 1] + (2.0 * I * omega + lambda * (fs[i - 1] + f_new)) * (dt / 2.0);
            let mut acc = c(0.0, 0.0);
            for j in 0..=i {
                let w = if j == 0 || j == i { 0.5 } else { 1.0 };
                acc += w * alpha[i - j] * lambda * (log_e[i] - log_e[j]).exp();
            }
            f_new = acc * dt;
        }
        if !finite(f_new) || f_new.norm() > F_LIMIT {
            return Err(Error::FDiverged { t: grid.t(i) });
        }
        fs[i] = f_new;
    }
    Ok(fs)
}

/// Exponential-kernel QBM coefficients `F, G, J̃` and the G history needed to
/// rebuild `J(t,s)`.
#[derive(Debug, Clone, PartialEq)]
pub struct QbmState {
    pub t: f64,
    pub f: C64,
    pub g: C64,
    pub jt: C64,
    pub dt: f64,
    pub g_history: Vec<C64>,
}

impl QbmState {
    pub fn new(dt: f64) -> Self {
        Self { t: 0.0, f: c(0.0, 0.0), g: c(0.0, 0.0), jt: c(0.0, 0.0), dt, g_history: vec![c(0.0, 0.0)] }
    }
}

fn qbm_kernel(kernel: &CorrelationKernel) -> Result<(f64, C64)> {
    match *kernel {
        CorrelationKernel::Exponential { gamma, omega } => Ok((gamma, c(gamma, omega))),
        _ => Err(Error::Invalid("the closed QBM coefficient set needs an exponential kernel".into())),
    }
}

/// One RK4 step of
/// `Ḟ = λγ/2 - κF + ωG - iλFG - iλJ̃`, `Ġ = -κG - ωF - iλG²`,
/// `J̃̇ = (λγ/2)G - 2κJ̃ - iλGJ̃`, with `κ = γ + iΩ`.
pub fn evolve_qbm(state: &mut QbmState, kernel: &CorrelationKernel, omega: f64, lambda: f64) -> Result<()> {
    let (gamma, kappa) = qbm_kernel(kernel)?;
    let dt = state.dt;
    let a0 = c(lambda * gamma / 2.0, 0.0);
    let [f, g, jt] = rk4([state.f, state.g, state.jt], dt, |y| {
        let [f, g, jt] = *y;
        [
            a0 - kappa * f + omega * g - I * lambda * f * g - I * lambda * jt,
            -kappa * g - omega * f - I * lambda * g * g,
            a0 * g - 2.0 * kappa * jt - I * lambda * g * jt,
        ]
    });
    state.t += dt;
    for (name, v) in [("F", f), ("G", g), ("Jtilde", jt)] {
        if !finite(v) || v.norm() > F_LIMIT {
            return Err(Error::CoefficientDiverged { name, t: state.t });
        }
    }
    state.f = f;
    state.g = g;
    state.jt = jt;
    state.g_history.push(g);
    Ok(())
}

/// `J(t,s) = λG(s) exp(-∫_s^t (κ + iλG))`, trapezoidal in the exponent.
/// `s` and `t` must lie on the history grid.
pub fn qbm_j(state: &QbmState, kernel: &CorrelationKernel, lambda: f64, s: f64, t: f64) -> Result<C64> {
    let (_, kappa) = qbm_kernel(kernel)?;
    let node = |x: f64| -> Result<usize> {
        let k = (x / state.dt).round();
        if k < 0.0 || (x - k * state.dt).abs() > 1e-9 * state.dt.max(1.0) || k as usize >= state.g_history.len() {
            return Err(Error::HistoryMissing { t: x });
        }
        Ok(k as usize)
    };
    let (is, it) = (node(s)?, node(t)?);
    if is > it {
        return Err(Error::Invalid(format!("qbm_j needs s <= t (s = {s}, t = {t})")));
    }
    let h = &state.g_history;
    let mut expo = kappa * (t - s);
    for k in is..it {
        expo += I * lambda * (h[k] + h[k + 1]) * (state.dt / 2.0);
    }
    Ok(lambda * h[is] * (-expo).exp())
}

/// QBM coefficients on every grid node.
#[derive(Debug, Clone)]
pub struct QbmSchedule {
    pub f: Vec<C64>,
    pub g: Vec<C64>,
    pub jt: Vec<C64>,
    pub kappa: C64,
}

pub fn qbm_schedule(kernel: &CorrelationKernel, omega: f64, lambda: f64, grid: TimeGrid) -> Result<QbmSchedule> {
    let (_, kappa) = qbm_kernel(kernel)?;
    let mut st = QbmState::new(grid.dt);
    let (mut f, mut g, mut jt) = (vec![st.f], vec![st.g], vec![st.jt]);
    for _ in 0..grid.n_steps {
        evolve_qbm(&mut st, kernel, omega, lambda)?;
        f.push(st.f);
        g.push(st.g);
        jt.push(st.jt);
    }
    Ok(QbmSchedule { f, g, jt, kappa })
}

/// One RK4 step of `Ḟ = χ + (iω₁ - iω₂ + λ²/2 + χF)F`.
pub fn evolve_f_cut(f: C64, t: f64, omega1: f64, omega2: f64, lambda: f64, chi: f64, dt: f64) -> Result<C64> {
    let a = c(lambda * lambda / 2.0, omega1 - omega2);
    let [next] = rk4([f], dt, |y| [chi + (a + chi * y[0]) * y[0]]);
    if !finite(next) || next.norm() > F_LIMIT {
        return Err(Error::CoefficientDiverged { name: "F", t: t + dt });
    }
    Ok(next)
}
