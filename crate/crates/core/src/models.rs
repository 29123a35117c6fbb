//! Ready-to-run models.

use std::collections::BTreeMap;

use crate::ansatz::evolve_f_cut;
use crate::hilbert::{boson_operators, spin_operators, CompositeSpace, OperatorMatrix, StateVector};
use crate::noise::{CorrelationKernel, KernelKind, NoisePath};
use crate::{c, Error, Result, C64, I};

/// Largest user-supplied Hamiltonian accepted by `energy_measurement`.
pub const ENERGY_MAX_DIM: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub enum AnsatzVariant {
    /// `Ô = op`, independent of `s` and of the noise.
    ConstantOp { op: OperatorMatrix },
    /// `Ô(t,s) = f(t,s) op`, `∂_t f = (iω + λF) f`, `f(s,s) = λ`.
    ScalarTimesOp { op: OperatorMatrix },
    /// `Ô(t,s) = λ(q - (t-s))`.
    ToyShift { q: OperatorMatrix },
    /// `Ô(t,s,z) = f q + g p - i∫ j z`, exponential kernels only.
    Qbm { q: OperatorMatrix, p: OperatorMatrix },
    /// `Ō = L/2`; valid only for the delta kernel.
    MarkovOnly,
    /// Spin-only description of the spin-oscillator pair; coefficient level.
    CutSpin,
}

impl AnsatzVariant {
    pub fn name(&self) -> &'static str {
        match self {
            Self::ConstantOp { .. } => "constant_op",
            Self::ScalarTimesOp { .. } => "scalar_times_op",
            Self::ToyShift { .. } => "toy_shift",
            Self::Qbm { .. } => "qbm",
            Self::MarkovOnly => "markov_only",
            Self::CutSpin => "cut_spin",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub name: String,
    pub h: OperatorMatrix,
    /// Coupling operator with λ folded in.
    pub l: OperatorMatrix,
    pub lambda: f64,
    /// System frequency entering the coefficient ODEs.
    pub omega: f64,
    pub kernel_class: Vec<KernelKind>,
    pub ansatz: AnsatzVariant,
    pub absorbing_state: Option<StateVector>,
    pub params: BTreeMap<String, f64>,
    /// Oscillator truncation when the space contains a Fock factor.
    pub n_trunc: Option<usize>,
}

const SINGLE_NOISE: [KernelKind; 5] =
    [KernelKind::Exponential, KernelKind::SingleMode, KernelKind::DiscreteSpectrum, KernelKind::MarkovDelta, KernelKind::QbmThermal];

impl ModelSpec {
    pub fn dim(&self) -> usize {
        self.h.dim()
    }

    pub fn param(&self, key: &str) -> Option<f64> {
        self.params.get(key).copied()
    }

    pub fn check_kernel(&self, kernel: &CorrelationKernel) -> Result<()> {
        kernel.validate()?;
        if self.kernel_class.contains(&kernel.kind()) {
            Ok(())
        } else {
            Err(Error::Invalid(format!("model {} does not accept a {:?} kernel", self.name, kernel.kind())))
        }
    }

    /// The model's kernel at its default parameters.
    pub fn default_kernel(&self) -> CorrelationKernel {
        match self.name.as_str() {
            "oscillator_zero_t" => CorrelationKernel::SingleMode { omega: self.param("Omega").unwrap_or(0.5 * self.omega) },
            "cut_spin_oscillator" => CorrelationKernel::MarkovDelta,
            "cut_spin" => CorrelationKernel::SingleMode { omega: self.param("omega2").unwrap_or(CutParams::default().omega2) },
            _ => CorrelationKernel::Exponential { gamma: self.param("gamma").unwrap_or(self.omega), omega: self.param("Omega").unwrap_or(0.0) },
        }
    }
}

fn params(kv: &[(&str, f64)]) -> BTreeMap<String, f64> {
    kv.iter().map(|(k, v)| (k.to_string(), *v)).collect()
}

fn real(x: f64) -> C64 {
    c(x, 0.0)
}

/// `H = (ω/2)σz`, `L = λσz`.
pub fn measurement_sigma_z(omega: f64, lambda: f64) -> ModelSpec {
    let s = spin_operators();
    let l = s.sz.scale(real(lambda));
    ModelSpec {
        name: "measurement_sigma_z".into(),
        h: s.sz.scale(real(omega / 2.0)),
        ansatz: AnsatzVariant::ConstantOp { op: l.clone() },
        l,
        lambda,
        omega,
        kernel_class: SINGLE_NOISE.into(),
        absorbing_state: None,
        params: params(&[("omega", omega), ("lambda", lambda), ("gamma", omega), ("Omega", 0.0)]),
        n_trunc: None,
    }
}

/// `H = (ω/2)σz`, `L = λσ−`.
pub fn dissipative_spin(omega: f64, lambda: f64) -> ModelSpec {
    let s = spin_operators();
    ModelSpec {
        name: "dissipative_spin".into(),
        h: s.sz.scale(real(omega / 2.0)),
        l: s.sm.scale(real(lambda)),
        ansatz: AnsatzVariant::ScalarTimesOp { op: s.sm.clone() },
        lambda,
        omega,
        kernel_class: SINGLE_NOISE.into(),
        absorbing_state: Some(crate::hilbert::spin_down()),
        params: params(&[("omega", omega), ("lambda", lambda), ("gamma", omega), ("Omega", omega)]),
        n_trunc: None,
    }
}

/// `H = L = L†` for a user-supplied Hermitian matrix.
pub fn energy_measurement(h: OperatorMatrix) -> Result<ModelSpec> {
    if h.dim() > ENERGY_MAX_DIM {
        return Err(Error::DimensionTooLarge { dim: h.dim(), limit: ENERGY_MAX_DIM });
    }
    if !h.is_hermitian() {
        return Err(Error::Invalid("energy_measurement needs a Hermitian matrix".into()));
    }
    let mut kinds = SINGLE_NOISE.to_vec();
    kinds.push(KernelKind::FiniteTempPair);
    Ok(ModelSpec {
        name: "energy_measurement".into(),
        ansatz: AnsatzVariant::ConstantOp { op: h.clone() },
        l: h.clone(),
        h,
        lambda: 1.0,
        omega: 1.0,
        kernel_class: kinds,
        absorbing_state: None,
        params: params(&[("gamma", 1.0), ("Omega", 0.0)]),
        n_trunc: None,
    })
}

/// `H = p`, `L = λq` on a truncated Fock basis.
pub fn toy(lambda: f64, n_trunc: usize) -> Result<ModelSpec> {
    let b = boson_operators(n_trunc)?;
    Ok(ModelSpec {
        name: "toy".into(),
        h: b.p.clone(),
        l: b.q.scale(real(lambda)),
        ansatz: AnsatzVariant::ToyShift { q: b.q },
        lambda,
        omega: 0.0,
        kernel_class: SINGLE_NOISE.into(),
        absorbing_state: None,
        params: params(&[("lambda", lambda), ("gamma", 1.0), ("Omega", 0.0), ("n_trunc", n_trunc as f64)]),
        n_trunc: Some(n_trunc),
    })
}

/// `H = (ω/2)(p² + q²)`, `L = λq`.
pub fn qbm(omega: f64, lambda: f64, n_trunc: usize) -> Result<ModelSpec> {
    let b = boson_operators(n_trunc)?;
    let h = b.p.mul(&b.p).add(&b.q.mul(&b.q)).scale(real(omega / 2.0)).into_hermitian()?;
    Ok(ModelSpec {
        name: "qbm".into(),
        h,
        l: b.q.scale(real(lambda)),
        ansatz: AnsatzVariant::Qbm { q: b.q, p: b.p },
        lambda,
        omega,
        kernel_class: vec![KernelKind::Exponential],
        absorbing_state: None,
        params: params(&[("omega", omega), ("lambda", lambda), ("gamma", omega), ("Omega", 0.0), ("n_trunc", n_trunc as f64)]),
        n_trunc: Some(n_trunc),
    })
}

/// `H = ωa†a`, `L = λa`.
pub fn oscillator_zero_t(omega: f64, lambda: f64, n_trunc: usize) -> Result<ModelSpec> {
    let b = boson_operators(n_trunc)?;
    Ok(ModelSpec {
        name: "oscillator_zero_t".into(),
        h: b.n.scale(real(omega)),
        l: b.a.scale(real(lambda)),
        ansatz: AnsatzVariant::ScalarTimesOp { op: b.a },
        lambda,
        omega,
        kernel_class: SINGLE_NOISE.into(),
        absorbing_state: Some(crate::hilbert::fock_state(0, n_trunc)?),
        params: params(&[("omega", omega), ("lambda", lambda), ("Omega", 0.5 * omega), ("beta", 2.0), ("n_trunc", n_trunc as f64)]),
        n_trunc: Some(n_trunc),
    })
}

/// Parameters of the spin + auxiliary oscillator pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CutParams {
    pub omega1: f64,
    pub omega2: f64,
    pub lambda: f64,
    pub chi: f64,
}

impl Default for CutParams {
    fn default() -> Self {
        Self { omega1: 1.0, omega2: 0.8, lambda: 0.5, chi: 0.3 }
    }
}

/// Spin ⊗ oscillator with `H = (ω₁/2)σz + ω₂a†a + χ(σ−a† + σ+a)`, `L = λσ−`,
/// white heat-bath noise.
pub fn cut_spin_oscillator(p: CutParams, n_trunc: usize) -> Result<ModelSpec> {
    let s = spin_operators();
    let b = boson_operators(n_trunc)?;
    let space = CompositeSpace::new(vec![2, n_trunc])?;
    let sz = space.embed(&s.sz, 0)?;
    let sm = space.embed(&s.sm, 0)?;
    let a = space.embed(&b.a, 1)?;
    let n = space.embed(&b.n, 1)?;
    let hop = sm.mul(&a.dagger());
    let h = sz.scale(real(p.omega1 / 2.0)).add(&n.scale(real(p.omega2))).add(&hop.add(&hop.dagger()).scale(real(p.chi))).into_hermitian()?;
    Ok(ModelSpec {
        name: "cut_spin_oscillator".into(),
        h,
        l: sm.scale(real(p.lambda)),
        ansatz: AnsatzVariant::MarkovOnly,
        lambda: p.lambda,
        omega: p.omega1,
        kernel_class: vec![KernelKind::MarkovDelta],
        absorbing_state: None,
        params: cut_param_map(p, Some(n_trunc)),
        n_trunc: Some(n_trunc),
    })
}

/// Spin-only side of the pair; run through `cut_pair_run`, not the generic integrator.
pub fn cut_spin(p: CutParams) -> ModelSpec {
    let s = spin_operators();
    ModelSpec {
        name: "cut_spin".into(),
        h: s.sz.scale(real(p.omega1 / 2.0)),
        l: s.sm.scale(real(p.chi)),
        ansatz: AnsatzVariant::CutSpin,
        lambda: p.chi,
        omega: p.omega1,
        kernel_class: vec![KernelKind::SingleMode],
        absorbing_state: None,
        params: cut_param_map(p, None),
        n_trunc: None,
    }
}

fn cut_param_map(p: CutParams, n_trunc: Option<usize>) -> BTreeMap<String, f64> {
    let mut m = params(&[("omega1", p.omega1), ("omega2", p.omega2), ("lambda", p.lambda), ("chi", p.chi)]);
    if let Some(n) = n_trunc {
        m.insert("n_trunc".into(), n as f64);
    }
    m
}

/// Default truncation for oscillator models.
pub const DEFAULT_N_TRUNC: usize = 40;

/// Every model at its default parameters (`ω = 1`).
pub fn catalog() -> Vec<ModelSpec> {
    let omega = 1.0;
    let diag = OperatorMatrix::hermitian(nalgebra::DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![real(-1.0), real(0.0), real(1.0)])))
        .expect("diagonal real matrix");
    vec![
        measurement_sigma_z(omega, (2.0 * omega).sqrt()),
        dissipative_spin(omega, omega.sqrt()),
        energy_measurement(diag).expect("valid default"),
        toy(1.0, 60).expect("valid default"),
        qbm(omega, 0.5, 20).expect("valid default"),
        oscillator_zero_t(omega, 0.1 * omega, DEFAULT_N_TRUNC).expect("valid default"),
        cut_spin(CutParams::default()),
        cut_spin_oscillator(CutParams::default(), 8).expect("valid default"),
    ]
}

/// Builds a model by name, overriding defaults with `overrides`.
pub fn by_name(name: &str, overrides: &BTreeMap<String, f64>, energy_h: Option<OperatorMatrix>) -> Result<ModelSpec> {
    let get = |k: &str, d: f64| overrides.get(k).copied().unwrap_or(d);
    let n_trunc = |d: usize| -> Result<usize> {
        let v = get("n_trunc", d as f64);
        if v < 2.0 || v.fract() != 0.0 {
            return Err(Error::Invalid(format!("n_trunc must be an integer >= 2, got {v}")));
        }
        Ok(v as usize)
    };
    let omega = get("omega", 1.0);
    let mut spec = match name {
        "measurement_sigma_z" => measurement_sigma_z(omega, get("lambda", (2.0 * omega).sqrt())),
        "dissipative_spin" => dissipative_spin(omega, get("lambda", omega.sqrt())),
        "energy_measurement" => energy_measurement(energy_h.ok_or_else(|| Error::Invalid("energy_measurement needs a Hamiltonian matrix".into()))?)?,
        "toy" => toy(get("lambda", 1.0), n_trunc(60)?)?,
        "qbm" => qbm(omega, get("lambda", 0.5), n_trunc(20)?)?,
        "oscillator_zero_t" => oscillator_zero_t(omega, get("lambda", 0.1 * omega), n_trunc(DEFAULT_N_TRUNC)?)?,
        "cut_spin" | "cut_spin_oscillator" => {
            let d = CutParams::default();
            let p = CutParams { omega1: get("omega1", d.omega1), omega2: get("omega2", d.omega2), lambda: get("lambda", d.lambda), chi: get("chi", d.chi) };
            if name == "cut_spin" {
                cut_spin(p)
            } else {
                cut_spin_oscillator(p, n_trunc(8)?)?
            }
        }
        other => return Err(Error::Invalid(format!("unknown model '{other}'"))),
    };
    for (k, v) in overrides {
        if !spec.params.contains_key(k) {
            let known: Vec<&str> = spec.params.keys().map(String::as_str).collect();
            return Err(Error::Invalid(format!("unknown parameter '{k}' for model {name} (known: {})", known.join(", "))));
        }
        if !v.is_finite() {
            return Err(Error::Invalid(format!("parameter {k} is not finite")));
        }
        spec.params.insert(k.clone(), *v);
    }
    Ok(spec)
}

pub const MODEL_NAMES: [&str; 8] =
    ["measurement_sigma_z", "dissipative_spin", "energy_measurement", "toy", "qbm", "oscillator_zero_t", "cut_spin", "cut_spin_oscillator"];

/// Coefficients of both descriptions of the spin-oscillator pair.
///
/// `ψ = c₀|↓,0⟩ + c₁|↑,0⟩ + c₂|↓,1⟩` and `φ = v₀|↓⟩ + v₁|↑⟩`; `mv0 = M_z[v₀]`
/// and `w = ∫₀ᵗ e^{i(ω₂-ω₁/2)s} v₁(s) ds` gives `M_z[|v₀|²] = |mv0|² + χ²|w|²`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CutState {
    pub t: f64,
    pub c0: C64,
    pub c1: C64,
    pub c2: C64,
    /// `v₀` along the sampled z path.
    pub v0: C64,
    pub mv0: C64,
    pub v1: C64,
    pub f: C64,
    pub w: C64,
}

impl CutState {
    pub fn new(phi0: &StateVector) -> Result<Self> {
        if phi0.dim() != 2 {
            return Err(Error::DimensionMismatch { expected: 2, found: phi0.dim() });
        }
        let (up, down) = (phi0.amps[0], phi0.amps[1]);
        let z = c(0.0, 0.0);
        Ok(Self { t: 0.0, c0: down, c1: up, c2: z, v0: down, mv0: down, v1: up, f: z, w: z })
    }

    /// `Tr₂|ψ⟩⟨ψ|` in the (↑, ↓) basis.
    pub fn rho1(&self) -> [[C64; 2]; 2] {
        let (c0, c1, c2) = (self.c0, self.c1, self.c2);
        [[real(c1.norm_sqr()), c0.conj() * c1], [c0 * c1.conj(), real(c0.norm_sqr() + c2.norm_sqr())]]
    }

    pub fn rho2(&self, chi: f64) -> [[C64; 2]; 2] {
        let (m, v1) = (self.mv0, self.v1);
        [[real(v1.norm_sqr()), m.conj() * v1], [m * v1.conj(), real(m.norm_sqr() + chi * chi * self.w.norm_sqr())]]
    }

    pub fn max_rho_diff(&self, chi: f64) -> f64 {
        let (a, b) = (self.rho1(), self.rho2(chi));
        (0..4).map(|k| (a[k / 2][k % 2] - b[k / 2][k % 2]).norm()).fold(0.0, f64::max)
    }

    /// Largest violation of `c₀ = M_z[v₀]`, `c₁ = v₁`, `c₂ = -iFv₁`.
    pub fn identity_defect(&self) -> f64 {
        [(self.c0 - self.mv0).norm(), (self.c1 - self.v1).norm(), (self.c2 + I * self.f * self.v1).norm()].into_iter().fold(0.0, f64::max)
    }
}

/// One RK4 step of both coefficient systems with the noises held at their
/// step values `xi` (white) and `z` (colored).
pub fn cut_pair_step(state: &CutState, xi: C64, z: C64, p: CutParams, dt: f64) -> Result<CutState> {
    let CutParams { omega1: w1, omega2: w2, lambda: lam, chi } = p;
    let t0 = state.t;
    let h1 = I * (w1 / 2.0);
    let damp = h1 + lam * lam / 2.0;
    let rhs_c = |y: &[C64; 3]| -> [C64; 3] {
        [lam * xi * y[1] + h1 * y[0], -damp * y[1] - I * chi * y[2], -I * ((w2 - w1 / 2.0) * y[2] + chi * y[1])]
    };
    let [c0, c1, c2] = rk4(&[state.c0, state.c1, state.c2], dt, |_, y| rhs_c(y), t0);
    let rhs_v = |t: f64, y: &[C64; 5]| -> [C64; 5] {
        let [v0, mv0, v1, f, _] = *y;
        [
            h1 * v0 + (lam * xi + chi * z) * v1,
            h1 * mv0 + lam * xi * v1,
            -(damp + chi * f) * v1,
            chi + (I * (w1 - w2) + lam * lam / 2.0 + chi * f) * f,
            (I * (w2 - w1 / 2.0) * t).exp() * v1,
        ]
    };
    let [v0, mv0, v1, f, w] = rk4(&[state.v0, state.mv0, state.v1, state.f, state.w], dt, rhs_v, t0);
    let t = t0 + dt;
    let f_check = evolve_f_cut(state.f, t0, w1, w2, lam, chi, dt)?;
    debug_assert!((f_check - f).norm() <= 1e-12 * (1.0 + f.norm()));
    let next = CutState { t, c0, c1, c2, v0, mv0, v1, f, w };
    let norm = c0.norm_sqr() + c1.norm_sqr() + c2.norm_sqr();
    if !norm.is_finite() || !(1e-60..=1e60).contains(&norm) || ![v0, mv0, v1, w].iter().all(|v| v.re.is_finite() && v.im.is_finite()) {
        return Err(Error::NumericalBlowup { t, norm_sq: norm });
    }
    Ok(next)
}

fn rk4<const N: usize>(y: &[C64; N], dt: f64, f: impl Fn(f64, &[C64; N]) -> [C64; N], t: f64) -> [C64; N] {
    let add = |a: &[C64; N], b: &[C64; N], h: f64| -> [C64; N] { std::array::from_fn(|k| a[k] + b[k] * h) };
    let k1 = f(t, y);
    let k2 = f(t + dt / 2.0, &add(y, &k1, dt / 2.0));
    let k3 = f(t + dt / 2.0, &add(y, &k2, dt / 2.0));
    let k4 = f(t + dt, &add(y, &k3, dt));
    std::array::from_fn(|k| y[k] + (k1[k] + 2.0 * k2[k] + 2.0 * k3[k] + k4[k]) * (dt / 6.0))
}

/// Runs the pair along a white path `xi` and a colored path `z` on the same grid.
pub fn cut_pair_run(phi0: &StateVector, xi: &NoisePath, z: &NoisePath, p: CutParams) -> Result<Vec<CutState>> {
    if !xi.white || z.white || xi.grid != z.grid {
        return Err(Error::Invalid("cut_pair_run needs a white xi path and a colored z path on one grid".into()));
    }
    let mut out = Vec::with_capacity(xi.grid.n_nodes());
    out.push(CutState::new(phi0)?);
    for i in 0..xi.grid.n_steps {
        let next = cut_pair_step(&out[i], xi.step_value(i), z.step_value(i), p, xi.grid.dt)?;
        out.push(next);
    }
    Ok(out)
}

/// Default initial spin state `(|↑⟩ + |↓⟩)/√2`.
pub fn cut_default_phi0() -> StateVector {
    let h = std::f64::consts::FRAC_1_SQRT_2;
    StateVector::new(vec![real(h), real(h)]).expect("nonzero")
}
