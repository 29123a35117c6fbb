//! Closed-form reference solutions and the Markov QSD baseline.

use nalgebra::DMatrix;

use crate::ansatz::ScalarSchedule;
use crate::hilbert::{spin_operators, DensityMatrix, OperatorMatrix, StateVector};
use crate::noise::{CorrelationKernel, TimeGrid};
use crate::{c, Error, Result, C64, I};

#[derive(Debug, Clone, PartialEq)]
pub struct AnalyticCurve {
    pub times: Vec<f64>,
    pub values: Vec<DensityMatrix>,
}

fn spin_rho(r11: f64, r12: C64) -> DensityMatrix {
    DensityMatrix { m: DMatrix::from_row_slice(2, 2, &[c(r11, 0.0), r12, r12.conj(), c(1.0 - r11, 0.0)]) }
}

fn check_spin(rho0: &DensityMatrix) -> Result<()> {
    if rho0.dim() != 2 {
        return Err(Error::DimensionMismatch { expected: 2, found: rho0.dim() });
    }
    Ok(())
}

/// Dephasing exponent `iωt + 2λ²∫₀ᵗ∫₀ˢ(α + α*)`.
pub fn sigma_z_exponent(omega: f64, lambda: f64, kernel: &CorrelationKernel, t: f64) -> C64 {
    I * omega * t + 4.0 * lambda * lambda * kernel.double_integral(t).re
}

/// Ensemble mean of the σz-measurement model: populations fixed, coherence
/// `ρ₁₂(0) e^{-F(t)}`.
pub fn rho_sigma_z(rho0: &DensityMatrix, omega: f64, lambda: f64, kernel: &CorrelationKernel, times: &[f64]) -> Result<AnalyticCurve> {
    check_spin(rho0)?;
    let r11 = rho0.m[(0, 0)].re;
    let r12 = rho0.m[(0, 1)];
    let values = times.iter().map(|&t| if t == 0.0 { rho0.clone() } else { spin_rho(r11, r12 * (-sigma_z_exponent(omega, lambda, kernel, t)).exp()) }).collect();
    Ok(AnalyticCurve { times: times.to_vec(), values })
}

/// Ensemble mean of the dissipative spin from F on the grid nodes:
/// `ρ₁₁ = ρ₁₁(0) e^{-λ∫(F+F*)}`, `ρ₁₂ = ρ₁₂(0) e^{-iωt - λ∫F}`.
///
/// From the schedule's pin step on, `∫F` is treated as divergent and the
/// state is the ground state; the returned time reports where that happened.
pub fn rho_dissipative(rho0: &DensityMatrix, omega: f64, lambda: f64, schedule: &ScalarSchedule, grid: TimeGrid) -> Result<(AnalyticCurve, Option<f64>)> {
    check_spin(rho0)?;
    if schedule.f.len() != grid.n_nodes() {
        return Err(Error::DimensionMismatch { expected: grid.n_nodes(), found: schedule.f.len() });
    }
    let r11 = rho0.m[(0, 0)].re;
    let r12 = rho0.m[(0, 1)];
    let mut int_f = c(0.0, 0.0);
    let mut times = Vec::with_capacity(grid.n_nodes());
    let mut values = Vec::with_capacity(grid.n_nodes());
    let mut diverged = None;
    for i in 0..grid.n_nodes() {
        let t = grid.t(i);
        if i > 0 {
            int_f += 0.5 * grid.dt * (schedule.f[i - 1] + schedule.f[i]);
        }
        if diverged.is_none() && schedule.pin_step.is_some_and(|p| i > p) {
            diverged = Some(grid.t(schedule.pin_step.unwrap_or(i)));
        }
        times.push(t);
        values.push(if diverged.is_some() {
            spin_rho(0.0, c(0.0, 0.0))
        } else {
            spin_rho(r11 * (-2.0 * lambda * int_f.re).exp(), r12 * (-I * omega * t - lambda * int_f).exp())
        });
    }
    Ok((AnalyticCurve { times, values }, diverged))
}

/// One Heun step of the normalized Markov QSD equation
/// `dψ = -iHψ + (L - ⟨L⟩)ψ(ξ + ⟨L†⟩) - ½(L†L - ⟨L†L⟩)ψ`, renormalized.
pub fn markov_qsd_step(psi: &StateVector, h: &OperatorMatrix, l: &OperatorMatrix, xi: C64, dt: f64) -> Result<StateVector> {
    let ldl = l.dagger().mul(l);
    let rhs = |v: &StateVector| -> StateVector {
        let n2 = v.norm_sq();
        let lv = l.apply(v);
        let lexp = v.inner(&lv) / n2;
        let ldlv = ldl.apply(v);
        let ldl_exp = v.inner(&ldlv) / n2;
        let amps = h.apply(v).amps * (-I) + (&lv.amps - &v.amps * lexp) * (xi + lexp.conj()) - (&ldlv.amps - &v.amps * ldl_exp) * c(0.5, 0.0);
        StateVector { amps }
    };
    let k1 = rhs(psi);
    let pred = StateVector { amps: &psi.amps + &k1.amps * c(dt, 0.0) };
    let k2 = rhs(&pred);
    let next = StateVector { amps: &psi.amps + (k1.amps + k2.amps) * c(dt / 2.0, 0.0) };
    let n2 = next.norm_sq();
    if !n2.is_finite() || !(1e-60..=1e60).contains(&n2) {
        return Err(Error::NumericalBlowup { t: f64::NAN, norm_sq: n2 });
    }
    next.normalized()
}

/// Time-local master equation of the σz model,
/// `ρ̇ = -i(ω/2)[σz,ρ] - (λ²/2)∫₀ᵗ(α+α*) [σz,[σz,ρ]]`.
pub fn master_rhs_sigma_z(rho: &DMatrix<C64>, t: f64, omega: f64, lambda: f64, kernel: &CorrelationKernel) -> DMatrix<C64> {
    let sz = spin_operators().sz;
    let sz = sz.matrix();
    let comm = |a: &DMatrix<C64>| sz * a - a * sz;
    let rate = lambda * lambda / 2.0 * 2.0 * kernel.integral(t).re;
    comm(rho) * (-I * omega / 2.0) - comm(&comm(rho)) * c(rate, 0.0)
}

/// RK4 integration of `master_rhs_sigma_z` on `grid`.
pub fn integrate_master_sigma_z(rho0: &DensityMatrix, omega: f64, lambda: f64, kernel: &CorrelationKernel, grid: TimeGrid) -> Vec<DensityMatrix> {
    let f = |r: &DMatrix<C64>, t: f64| master_rhs_sigma_z(r, t, omega, lambda, kernel);
    let dt = grid.dt;
    let mut rho = rho0.m.clone();
    let mut out = vec![rho0.clone()];
    for i in 0..grid.n_steps {
        let t = grid.t(i);
        let k1 = f(&rho, t);
        let k2 = f(&(&rho + &k1 * c(dt / 2.0, 0.0)), t + dt / 2.0);
        let k3 = f(&(&rho + &k2 * c(dt / 2.0, 0.0)), t + dt / 2.0);
        let k4 = f(&(&rho + &k3 * c(dt, 0.0)), t + dt);
        rho += (k1 + k2 * c(2.0, 0.0) + k3 * c(2.0, 0.0) + k4) * c(dt / 6.0, 0.0);
        out.push(DensityMatrix { m: rho.clone() });
    }
    out
}
