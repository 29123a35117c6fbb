//! Correlation kernels and complex Gaussian noise samplers.

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::{c, Error, Result, C64};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpectralMode {
    pub omega: f64,
    pub weight: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThermalMode {
    pub omega: f64,
    pub chi2: f64,
    pub nbar: f64,
}

/// Environment correlation function `α(t,s) = M[z*_t z_s]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum CorrelationKernel {
    /// `(γ/2) e^{-γ|t-s| - iΩ(t-s)}`
    Exponential {
        gamma: f64,
        #[serde(rename = "Omega", default)]
        omega: f64,
    },
    /// `e^{-iΩ(t-s)}`
    SingleMode {
        #[serde(rename = "Omega")]
        omega: f64,
    },
    /// `Σ_k α_k e^{-iω_k(t-s)}`
    DiscreteSpectrum { modes: Vec<SpectralMode> },
    MarkovDelta,
    /// `Σ χ²[(2n̄+1) cos ω(t-s) - i sin ω(t-s)]`
    QbmThermal { modes: Vec<ThermalMode> },
    /// The emission/absorption pair `α∓`; evaluated as a single kernel it is
    /// their sum, the process `z⁻ + z⁺` seen by a self-adjoint coupling.
    FiniteTempPair { modes: Vec<ThermalMode> },
}

/// One term `w e^{-κ τ}` of a kernel written as a sum of complex exponentials
/// for `τ = t - s ≥ 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExpComponent {
    pub w: C64,
    pub kappa: C64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelKind {
    Exponential,
    SingleMode,
    DiscreteSpectrum,
    MarkovDelta,
    QbmThermal,
    FiniteTempPair,
}

impl CorrelationKernel {
    pub fn kind(&self) -> KernelKind {
        match self {
            Self::Exponential { .. } => KernelKind::Exponential,
            Self::SingleMode { .. } => KernelKind::SingleMode,
            Self::DiscreteSpectrum { .. } => KernelKind::DiscreteSpectrum,
            Self::MarkovDelta => KernelKind::MarkovDelta,
            Self::QbmThermal { .. } => KernelKind::QbmThermal,
            Self::FiniteTempPair { .. } => KernelKind::FiniteTempPair,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Invalid(m.to_string()));
        match self {
            Self::Exponential { gamma, omega } => {
                if !(gamma.is_finite() && *gamma > 0.0) || !omega.is_finite() {
                    return bad("exponential kernel needs finite gamma > 0 and finite Omega");
                }
            }
            Self::SingleMode { omega } => {
                if !omega.is_finite() {
                    return bad("single-mode kernel needs finite Omega");
                }
            }
            Self::DiscreteSpectrum { modes } => {
                if modes.iter().any(|m| !(m.weight > 0.0 && m.weight.is_finite() && m.omega.is_finite())) {
                    return bad("discrete spectrum weights must be positive and finite");
                }
            }
            Self::MarkovDelta => {}
            Self::QbmThermal { modes } | Self::FiniteTempPair { modes } => {
                if modes.iter().any(|m| !(m.chi2 >= 0.0 && m.nbar >= 0.0 && m.omega.is_finite() && m.chi2.is_finite() && m.nbar.is_finite())) {
                    return bad("thermal modes need chi2 >= 0 and nbar >= 0");
                }
            }
        }
        Ok(())
    }

    pub fn is_markov(&self) -> bool {
        matches!(self, Self::MarkovDelta)
    }

    /// Exponential decomposition valid for `t ≥ s`; `None` for the delta kernel.
    pub fn exp_components(&self) -> Option<Vec<ExpComponent>> {
        let comps = match self {
            Self::Exponential { gamma, omega } => vec![ExpComponent { w: c(gamma / 2.0, 0.0), kappa: c(*gamma, *omega) }],
            Self::MarkovDelta => return None,
            _ => self
                .spectral_modes()
                .expect("finite spectrum")
                .into_iter()
                .map(|m| ExpComponent { w: c(m.weight, 0.0), kappa: c(0.0, m.omega) })
                .collect(),
        };
        Some(comps)
    }

    /// Positive-weight spectral lines `(ω_k, α_k)` with `α(τ) = Σ α_k e^{-iω_k τ}`.
    pub fn spectral_modes(&self) -> Option<Vec<SpectralMode>> {
        match self {
            Self::SingleMode { omega } => Some(vec![SpectralMode { omega: *omega, weight: 1.0 }]),
            Self::DiscreteSpectrum { modes } => Some(modes.clone()),
            Self::QbmThermal { modes } | Self::FiniteTempPair { modes } => {
                let mut out = Vec::new();
                for m in modes {
                    let emit = m.chi2 * (m.nbar + 1.0);
                    let absorb = m.chi2 * m.nbar;
                    if emit > 0.0 {
                        out.push(SpectralMode { omega: m.omega, weight: emit });
                    }
                    if absorb > 0.0 {
                        out.push(SpectralMode { omega: -m.omega, weight: absorb });
                    }
                }
                Some(out)
            }
            _ => None,
        }
    }

    /// `α⁻` of a finite-temperature pair: `Σ χ²(n̄+1) e^{-iωτ}`.
    pub fn alpha_minus(&self) -> Option<CorrelationKernel> {
        match self {
            Self::FiniteTempPair { modes } => Some(Self::DiscreteSpectrum {
                modes: modes.iter().filter(|m| m.chi2 > 0.0).map(|m| SpectralMode { omega: m.omega, weight: m.chi2 * (m.nbar + 1.0) }).collect(),
            }),
            _ => None,
        }
    }

    /// `α⁺` of a finite-temperature pair: `Σ χ² n̄ e^{+iωτ}`.
    pub fn alpha_plus(&self) -> Option<CorrelationKernel> {
        match self {
            Self::FiniteTempPair { modes } => Some(Self::DiscreteSpectrum {
                modes: modes.iter().filter(|m| m.chi2 * m.nbar > 0.0).map(|m| SpectralMode { omega: -m.omega, weight: m.chi2 * m.nbar }).collect(),
            }),
            _ => None,
        }
    }

    /// `∫₀ᵗ α(t,s) ds`
    pub fn integral(&self, t: f64) -> C64 {
        match self.exp_components() {
            None => c(0.5, 0.0),
            Some(cs) => cs.iter().map(|k| k.w * t * phi1(k.kappa * t)).sum(),
        }
    }

    /// `∫₀ᵗ (t-s) α(t,s) ds`
    pub fn first_moment(&self, t: f64) -> C64 {
        match self.exp_components() {
            None => c(0.0, 0.0),
            Some(cs) => cs.iter().map(|k| k.w * t * t * phi_moment(k.kappa * t)).sum(),
        }
    }

    /// `∫₀ᵗ ds ∫₀ˢ du α(s,u)`
    pub fn double_integral(&self, t: f64) -> C64 {
        match self.exp_components() {
            None => c(0.5 * t, 0.0),
            Some(cs) => cs.iter().map(|k| k.w * t * t * phi2(k.kappa * t)).sum(),
        }
    }
}

fn series(x: C64, coef: impl Fn(usize) -> f64) -> C64 {
    let mut sum = c(0.0, 0.0);
    let mut p = c(1.0, 0.0);
    for n in 0..30 {
        sum += p * coef(n);
        p *= -x;
    }
    sum
}

fn inv_factorial(n: usize) -> f64 {
    (1..=n).fold(1.0, |acc, k| acc / k as f64)
}

/// `(1 - e^{-x})/x`
pub fn phi1(x: C64) -> C64 {
    if x.norm() < 0.5 {
        series(x, |n| inv_factorial(n + 1))
    } else {
        (c(1.0, 0.0) - (-x).exp()) / x
    }
}

/// `(x - 1 + e^{-x})/x²`
pub fn phi2(x: C64) -> C64 {
    if x.norm() < 0.5 {
        series(x, |n| inv_factorial(n + 2))
    } else {
        (x - 1.0 + (-x).exp()) / (x * x)
    }
}

/// `(1 - (1+x)e^{-x})/x²`
pub fn phi_moment(x: C64) -> C64 {
    if x.norm() < 0.5 {
        series(x, |n| (n + 1) as f64 * inv_factorial(n + 2))
    } else {
        (c(1.0, 0.0) - (x + 1.0) * (-x).exp()) / (x * x)
    }
}

pub fn kernel_eval(kernel: &CorrelationKernel, t: f64, s: f64) -> Result<C64> {
    let tau = t - s;
    Ok(match kernel {
        CorrelationKernel::MarkovDelta => return Err(Error::DistributionalKernel),
        CorrelationKernel::Exponential { gamma, omega } => c(gamma / 2.0, 0.0) * c(-gamma * tau.abs(), -omega * tau).exp(),
        CorrelationKernel::SingleMode { omega } => c(0.0, -omega * tau).exp(),
        CorrelationKernel::DiscreteSpectrum { modes } => modes.iter().map(|m| m.weight * c(0.0, -m.omega * tau).exp()).sum(),
        CorrelationKernel::QbmThermal { modes } | CorrelationKernel::FiniteTempPair { modes } => modes
            .iter()
            .map(|m| m.chi2 * c((2.0 * m.nbar + 1.0) * (m.omega * tau).cos(), -(m.omega * tau).sin()))
            .sum(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeGrid {
    pub dt: f64,
    pub n_steps: usize,
}

impl TimeGrid {
    pub fn new(dt: f64, n_steps: usize) -> Result<Self> {
        if !(dt > 0.0 && dt.is_finite()) || n_steps == 0 {
            return Err(Error::Invalid(format!("time grid needs dt > 0 and n_steps >= 1 (dt = {dt}, n_steps = {n_steps})")));
        }
        Ok(Self { dt, n_steps })
    }

    pub fn from_tmax(dt: f64, t_max: f64) -> Result<Self> {
        Self::new(dt, (t_max / dt).round().max(1.0) as usize)
    }

    pub fn t(&self, i: usize) -> f64 {
        i as f64 * self.dt
    }

    pub fn t_max(&self) -> f64 {
        self.t(self.n_steps)
    }

    pub fn n_nodes(&self) -> usize {
        self.n_steps + 1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoisePath {
    pub grid: TimeGrid,
    /// Node values `z(t_i)` for colored noise; per-step values `ΔW_i/dt` for white noise.
    pub z: Vec<C64>,
    pub white: bool,
    pub z_omega: Option<Vec<C64>>,
    /// Girsanov drift per node; written only by the integrators.
    pub shift: Vec<C64>,
}

impl NoisePath {
    fn colored(grid: TimeGrid, z: Vec<C64>, z_omega: Option<Vec<C64>>) -> Self {
        Self { grid, shift: vec![c(0.0, 0.0); z.len()], z, white: false, z_omega }
    }

    /// Noise value held during step `i`: midpoint average for colored noise.
    pub fn step_value(&self, i: usize) -> C64 {
        if self.white {
            self.z[i]
        } else {
            0.5 * (self.z[i] + self.z[i + 1])
        }
    }

    pub fn step_values(&self) -> Vec<C64> {
        (0..self.grid.n_steps).map(|i| self.step_value(i)).collect()
    }

    pub fn shifted(&self, i: usize) -> C64 {
        self.z[i] + self.shift[i]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampler {
    Spectral,
    Cholesky,
    Ou,
    White,
}

pub fn default_sampler(kernel: &CorrelationKernel) -> Sampler {
    match kernel {
        CorrelationKernel::Exponential { .. } => Sampler::Ou,
        CorrelationKernel::MarkovDelta => Sampler::White,
        _ => Sampler::Spectral,
    }
}

pub fn sampler_supports(sampler: Sampler, kernel: &CorrelationKernel) -> bool {
    match sampler {
        Sampler::Spectral => kernel.spectral_modes().is_some(),
        Sampler::Cholesky => !kernel.is_markov(),
        Sampler::Ou => matches!(kernel, CorrelationKernel::Exponential { .. }),
        Sampler::White => kernel.is_markov(),
    }
}

/// Independent stream `index` derived from `master_seed`.
pub fn trajectory_rng(master_seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(index);
    rng
}

/// Circular complex Gaussian with `M[|g|²] = 1`, `M[g²] = 0`.
pub fn complex_normal<R: Rng + ?Sized>(rng: &mut R) -> C64 {
    let x: f64 = rng.sample(StandardNormal);
    let y: f64 = rng.sample(StandardNormal);
    c(x, y) * std::f64::consts::FRAC_1_SQRT_2
}

pub fn sample_spectral_with<R: Rng + ?Sized>(kernel: &CorrelationKernel, grid: TimeGrid, rng: &mut R) -> Result<NoisePath> {
    let modes = kernel
        .spectral_modes()
        .ok_or_else(|| Error::Invalid("spectral sampling needs a finite mode list".into()))?;
    let z_omega: Vec<C64> = modes.iter().map(|m| complex_normal(rng) * m.weight.sqrt()).collect();
    let mut z = vec![c(0.0, 0.0); grid.n_nodes()];
    for (m, &zw) in modes.iter().zip(&z_omega) {
        let rot = c(0.0, m.omega * grid.dt).exp();
        let mut v = zw;
        for (i, zi) in z.iter_mut().enumerate() {
            if i % 64 == 0 {
                v = zw * c(0.0, m.omega * grid.t(i)).exp();
            }
            *zi += v;
            v *= rot;
        }
    }
    Ok(NoisePath::colored(grid, z, Some(z_omega)))
}

pub fn sample_spectral(kernel: &CorrelationKernel, grid: TimeGrid, rng_seed: u64) -> Result<NoisePath> {
    sample_spectral_with(kernel, grid, &mut ChaCha8Rng::seed_from_u64(rng_seed))
}

/// Stationary complex Ornstein-Uhlenbeck path, sampled exactly on the grid.
pub fn sample_ou_with<R: Rng + ?Sized>(kernel: &CorrelationKernel, grid: TimeGrid, rng: &mut R) -> Result<NoisePath> {
    let CorrelationKernel::Exponential { gamma, omega } = *kernel else {
        return Err(Error::Invalid("OU sampling needs an exponential kernel".into()));
    };
    let var = gamma / 2.0;
    let decay = c(-gamma * grid.dt, omega * grid.dt).exp();
    let kick = (var * (1.0 - (-2.0 * gamma * grid.dt).exp())).sqrt();
    let mut z = Vec::with_capacity(grid.n_nodes());
    let mut v = complex_normal(rng) * var.sqrt();
    z.push(v);
    for _ in 0..grid.n_steps {
        v = decay * v + complex_normal(rng) * kick;
        z.push(v);
    }
    Ok(NoisePath::colored(grid, z, None))
}

pub fn sample_ou(kernel: &CorrelationKernel, grid: TimeGrid, rng_seed: u64) -> Result<NoisePath> {
    sample_ou_with(kernel, grid, &mut ChaCha8Rng::seed_from_u64(rng_seed))
}

/// Square-root factor `L L† = C` of the grid covariance `C_ij = M[z_i z_j*] = α(t_j, t_i)`:
/// Cholesky when it reconstructs `C`, otherwise the clamped eigen-decomposition.
#[derive(Debug, Clone)]
pub struct CholeskyFactor {
    grid: TimeGrid,
    l: DMatrix<C64>,
}

impl CholeskyFactor {
    pub fn new(kernel: &CorrelationKernel, grid: TimeGrid) -> Result<Self> {
        let n = grid.n_nodes();
        let mut cov = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                cov[(i, j)] = kernel_eval(kernel, grid.t(j), grid.t(i))?;
            }
        }
        let scale = cov.iter().map(|v| v.norm()).fold(0.0, f64::max);
        if let Some(ch) = Cholesky::new(cov.clone()) {
            let l = ch.l();
            if reconstruction_error(&l, &cov) <= 1e-9 * scale {
                return Ok(Self { grid, l });
            }
        }
        // Low-rank covariance (finite mode sums): use the clamped spectrum.
        let eig = SymmetricEigen::new(cov.clone());
        if eig.eigenvalues.iter().any(|&v| v < -1e-8 * scale * n as f64) {
            return Err(Error::NotPositiveSemidefinite);
        }
        let mut l = eig.eigenvectors;
        for (k, &v) in eig.eigenvalues.iter().enumerate() {
            l.column_mut(k).scale_mut(v.max(0.0).sqrt());
        }
        if reconstruction_error(&l, &cov) > 1e-8 * scale * n as f64 {
            return Err(Error::NotPositiveSemidefinite);
        }
        Ok(Self { grid, l })
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> NoisePath {
        let g = DVector::from_fn(self.grid.n_nodes(), |_, _| complex_normal(rng));
        let z = &self.l * g;
        NoisePath::colored(self.grid, z.iter().copied().collect(), None)
    }
}

fn reconstruction_error(l: &DMatrix<C64>, cov: &DMatrix<C64>) -> f64 {
    (l * l.adjoint() - cov).iter().map(|v| v.norm()).fold(0.0, f64::max)
}

pub fn sample_cholesky(kernel: &CorrelationKernel, grid: TimeGrid, rng_seed: u64) -> Result<NoisePath> {
    Ok(CholeskyFactor::new(kernel, grid)?.sample(&mut ChaCha8Rng::seed_from_u64(rng_seed)))
}

pub fn markov_increments_with<R: Rng + ?Sized>(grid: TimeGrid, rng: &mut R) -> NoisePath {
    let s = 1.0 / grid.dt.sqrt();
    let z: Vec<C64> = (0..grid.n_steps).map(|_| complex_normal(rng) * s).collect();
    NoisePath { grid, shift: vec![c(0.0, 0.0); grid.n_nodes()], z, white: true, z_omega: None }
}

pub fn markov_increments(grid: TimeGrid, rng_seed: u64) -> NoisePath {
    markov_increments_with(grid, &mut ChaCha8Rng::seed_from_u64(rng_seed))
}

/// Reusable sampler for many paths on one grid.
#[derive(Debug, Clone)]
pub enum NoiseSource {
    Spectral(CorrelationKernel),
    Ou(CorrelationKernel),
    Cholesky(CholeskyFactor),
    White,
}

impl NoiseSource {
    pub fn new(kernel: &CorrelationKernel, grid: TimeGrid, sampler: Sampler) -> Result<Self> {
        kernel.validate()?;
        if !sampler_supports(sampler, kernel) {
            return Err(Error::Invalid(format!("sampler {sampler:?} cannot sample kernel {:?}", kernel.kind())));
        }
        Ok(match sampler {
            Sampler::Spectral => Self::Spectral(kernel.clone()),
            Sampler::Ou => Self::Ou(kernel.clone()),
            Sampler::Cholesky => Self::Cholesky(CholeskyFactor::new(kernel, grid)?),
            Sampler::White => Self::White,
        })
    }

    pub fn sample<R: Rng + ?Sized>(&self, grid: TimeGrid, rng: &mut R) -> NoisePath {
        match self {
            Self::Spectral(k) => sample_spectral_with(k, grid, rng).expect("validated spectral kernel"),
            Self::Ou(k) => sample_ou_with(k, grid, rng).expect("validated exponential kernel"),
            Self::Cholesky(f) => f.sample(rng),
            Self::White => markov_increments_with(grid, rng),
        }
    }
}

/// Empirical two-point statistics of sampled paths against a kernel.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseCheckReport {
    pub n_paths: usize,
    pub times: Vec<f64>,
    /// `M[z*_{t_i} z_{t_j}]` estimates, row-major over node pairs.
    pub corr: Vec<C64>,
    pub corr_se: Vec<C64>,
    pub expected: Vec<C64>,
    pub max_corr_sigma: f64,
    pub max_circ_sigma: f64,
}

impl NoiseCheckReport {
    pub fn passes(&self, n_sigma: f64) -> bool {
        self.max_corr_sigma <= n_sigma && self.max_circ_sigma <= n_sigma
    }
}

fn sigma_dev(dev: f64, se: f64) -> f64 {
    if se > 0.0 {
        dev.abs() / se
    } else if dev.abs() <= 1e-12 {
        0.0
    } else {
        f64::INFINITY
    }
}

#[derive(Clone)]
struct PairSums {
    corr: Vec<C64>,
    corr_sq: Vec<[f64; 2]>,
    circ: Vec<C64>,
    circ_sq: Vec<[f64; 2]>,
}

impl PairSums {
    fn new(n: usize) -> Self {
        Self { corr: vec![c(0.0, 0.0); n * n], corr_sq: vec![[0.0; 2]; n * n], circ: vec![c(0.0, 0.0); n * n], circ_sq: vec![[0.0; 2]; n * n] }
    }

    fn add(&mut self, z: &[C64]) {
        let n = z.len();
        for i in 0..n {
            let zi = z[i].conj();
            for j in 0..n {
                let k = i * n + j;
                let a = zi * z[j];
                self.corr[k] += a;
                self.corr_sq[k][0] += a.re * a.re;
                self.corr_sq[k][1] += a.im * a.im;
                let b = z[i] * z[j];
                self.circ[k] += b;
                self.circ_sq[k][0] += b.re * b.re;
                self.circ_sq[k][1] += b.im * b.im;
            }
        }
    }

    fn merge(&mut self, o: &PairSums) {
        for k in 0..self.corr.len() {
            self.corr[k] += o.corr[k];
            self.circ[k] += o.circ[k];
            for r in 0..2 {
                self.corr_sq[k][r] += o.corr_sq[k][r];
                self.circ_sq[k][r] += o.circ_sq[k][r];
            }
        }
    }
}

fn mean_se(sum: C64, sq: [f64; 2], n: f64) -> (C64, C64) {
    let m = sum / n;
    let var_re = ((sq[0] / n - m.re * m.re) * n / (n - 1.0)).max(0.0);
    let var_im = ((sq[1] / n - m.im * m.im) * n / (n - 1.0)).max(0.0);
    (m, c((var_re / n).sqrt(), (var_im / n).sqrt()))
}

/// Samples `n_paths` paths on `grid` and compares `M[z*_t z_s]` with `expected`
/// and `M[z_t z_s]` with zero at every node pair.
pub fn check_sampler(
    source: &NoiseSource,
    expected: &CorrelationKernel,
    grid: TimeGrid,
    n_paths: usize,
    seed: u64,
) -> Result<NoiseCheckReport> {
    use rayon::prelude::*;
    if n_paths < 2 {
        return Err(Error::Invalid("noise check needs at least two paths".into()));
    }
    let white = matches!(source, NoiseSource::White);
    let n = if white { grid.n_steps } else { grid.n_nodes() };
    let chunk = 1000;
    let n_chunks = n_paths.div_ceil(chunk);
    let parts: Vec<PairSums> = (0..n_chunks)
        .into_par_iter()
        .map(|ci| {
            let mut sums = PairSums::new(n);
            for p in ci * chunk..((ci + 1) * chunk).min(n_paths) {
                let mut rng = trajectory_rng(seed, p as u64);
                let path = source.sample(grid, &mut rng);
                sums.add(&path.z);
            }
            sums
        })
        .collect();
    let mut total = PairSums::new(n);
    for p in &parts {
        total.merge(p);
    }
    let nf = n_paths as f64;
    let times: Vec<f64> = (0..n).map(|i| grid.t(i)).collect();
    let mut corr = Vec::with_capacity(n * n);
    let mut corr_se = Vec::with_capacity(n * n);
    let mut exp_v = Vec::with_capacity(n * n);
    let (mut max_corr, mut max_circ) = (0.0f64, 0.0f64);
    for i in 0..n {
        for j in 0..n {
            let k = i * n + j;
            let want = if white {
                if i == j { c(1.0 / grid.dt, 0.0) } else { c(0.0, 0.0) }
            } else {
                kernel_eval(expected, times[i], times[j])?
            };
            let (m, se) = mean_se(total.corr[k], total.corr_sq[k], nf);
            max_corr = max_corr.max(sigma_dev(m.re - want.re, se.re)).max(sigma_dev(m.im - want.im, se.im));
            let (mc, sec) = mean_se(total.circ[k], total.circ_sq[k], nf);
            max_circ = max_circ.max(sigma_dev(mc.re, sec.re)).max(sigma_dev(mc.im, sec.im));
            corr.push(m);
            corr_se.push(se);
            exp_v.push(want);
        }
    }
    Ok(NoiseCheckReport { n_paths, times, corr, corr_se, expected: exp_v, max_corr_sigma: max_corr, max_circ_sigma: max_circ })
}

/// Least-squares fit of `(γ/2)e^{-γτ}` on `τ ∈ [0, 5/γ]` by a symmetric
/// spectrum `{0, ±ω₁, ±ω₂}` (five lines, positive weights). Returns the modes
/// and the maximum deviation on the fit window.
pub fn fit_exponential_five_modes(gamma: f64) -> (Vec<SpectralMode>, f64) {
    let taus: Vec<f64> = (0..=400).map(|k| 5.0 / gamma * k as f64 / 400.0).collect();
    let target: Vec<f64> = taus.iter().map(|t| 0.5 * gamma * (-gamma * t).exp()).collect();
    let mut best: Option<(Vec<SpectralMode>, f64)> = None;
    for a in 1..=60 {
        for b in (a + 1)..=120 {
            let (w1, w2) = (0.05 * gamma * a as f64, 0.05 * gamma * b as f64);
            let basis = |t: f64| [1.0, 2.0 * (w1 * t).cos(), 2.0 * (w2 * t).cos()];
            let a_mat = DMatrix::from_fn(taus.len(), 3, |r, k| basis(taus[r])[k]);
            let rhs = DVector::from_column_slice(&target);
            let Ok(sol) = a_mat.clone().svd(true, true).solve(&rhs, 1e-14) else { continue };
            if sol.iter().any(|&x| x <= 0.0) {
                continue;
            }
            let dev = (&a_mat * &sol - &rhs).amax();
            if best.as_ref().is_none_or(|(_, d)| dev < *d) {
                let modes = vec![
                    SpectralMode { omega: 0.0, weight: sol[0] },
                    SpectralMode { omega: w1, weight: sol[1] },
                    SpectralMode { omega: -w1, weight: sol[1] },
                    SpectralMode { omega: w2, weight: sol[2] },
                    SpectralMode { omega: -w2, weight: sol[2] },
                ];
                best = Some((modes, dev));
            }
        }
    }
    best.expect("at least one admissible fit")
}
