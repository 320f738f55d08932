//! Single dissipated site driven by exponentially correlated complex noise.
//!
//! The site obeys `i da/dt = (w - i gamma) a + g |a|^2 a - F xi(t)` with
//! `F = eps J / 2` and `xi` a complex Ornstein-Uhlenbeck process with
//! `<xi(t) xi*(t')> = A exp(-|t - t'| / tau)`, `<xi xi> = 0`.
//!
//! Constant conventions (checked by simulation in the tests):
//!
//! * With `A = 2` the stationary occupation is `<|a|^2> = eps^2 J^2 tau / (2 gamma)`
//!   up to a factor `1 / (1 + gamma tau)` from the finite noise bandwidth.
//! * Each quadrature of the stationary Gaussian carries half of that,
//!   `Var(Re a) = Var(Im a) = eps^2 J^2 tau / (4 gamma)`.
//! * Without loss the occupation diffuses as `<|a|^2> ~ eps^2 J^2 tau t`,
//!   i.e. at twice `D = eps^2 J^2 tau / 2`.

use num_complex::Complex64;
use serde::Serialize;
use thiserror::Error;

use crate::integrator::BLOW_UP_OCCUPATION;
use crate::rng::{self, Stream};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StochasticError {
    #[error("invalid parameter `{name}` = {value}: {reason}")]
    Parameter {
        name: &'static str,
        value: f64,
        reason: &'static str,
    },
    #[error("single-site trajectory blew up at t = {t}")]
    BlowUp { t: f64 },
    #[error("insufficient samples: {effective:.0} effectively independent, need {needed}")]
    InsufficientSamples { effective: f64, needed: usize },
}

fn positive(name: &'static str, value: f64) -> Result<(), StochasticError> {
    if value > 0.0 && value.is_finite() {
        Ok(())
    } else {
        Err(StochasticError::Parameter {
            name,
            value,
            reason: "must be positive and finite",
        })
    }
}

/// Parameters of the complex Ornstein-Uhlenbeck bath.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OUProcessConfig {
    /// Stationary power `<|xi|^2>`.
    pub amplitude: f64,
    pub tau: f64,
    pub step: f64,
    pub seed: u64,
    pub stream: u64,
}

impl OUProcessConfig {
    pub fn new(amplitude: f64, tau: f64, step: f64, seed: u64) -> Self {
        OUProcessConfig {
            amplitude,
            tau,
            step,
            seed,
            stream: 0,
        }
    }

    pub fn with_stream(mut self, stream: u64) -> Self {
        self.stream = stream;
        self
    }

    pub fn validate(&self) -> Result<(), StochasticError> {
        positive("A", self.amplitude)?;
        positive("tau", self.tau)?;
        positive("step", self.step)
    }
}

/// Exact discretisation of the complex OU process on a fixed grid.
pub struct OuProcess {
    value: Complex64,
    decay: f64,
    kick: f64,
    rng: Stream,
}

impl OuProcess {
    /// Starts from a draw of the stationary law.
    pub fn new(cfg: &OUProcessConfig) -> Result<Self, StochasticError> {
        cfg.validate()?;
        let mut rng = rng::stream(cfg.seed, cfg.stream);
        let decay = (-cfg.step / cfg.tau).exp();
        // (1 - e^{-2h/tau}) without cancellation for tiny h
        let kick = (cfg.amplitude * -(-2.0 * cfg.step / cfg.tau).exp_m1()).sqrt();
        let value = rng::complex_normal(&mut rng) * (cfg.amplitude / 2.0).sqrt();
        Ok(OuProcess {
            value,
            decay,
            kick,
            rng,
        })
    }

    pub fn current(&self) -> Complex64 {
        self.value
    }

    /// Advances one step and returns the new value.
    pub fn advance(&mut self) -> Complex64 {
        let eta = rng::complex_normal(&mut self.rng) * std::f64::consts::FRAC_1_SQRT_2;
        self.value = self.value * self.decay + eta * self.kick;
        self.value
    }
}

/// `n_steps + 1` values `xi_0 ... xi_n` on the grid `k * step`.
pub fn ou_path(cfg: &OUProcessConfig, n_steps: usize) -> Result<Vec<Complex64>, StochasticError> {
    let mut p = OuProcess::new(cfg)?;
    let mut out = Vec::with_capacity(n_steps + 1);
    out.push(p.current());
    for _ in 0..n_steps {
        out.push(p.advance());
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SingleSiteConfig {
    pub omega: f64,
    pub gamma: f64,
    pub g: f64,
    /// Coefficient `F = eps J / 2` of the noise term.
    pub drive_strength: f64,
}

impl SingleSiteConfig {
    /// Site behind a weak link of strength `eps` to a reservoir with hopping `J`.
    pub fn weak_link(eps: f64, hopping: f64, gamma: f64, g: f64) -> Self {
        SingleSiteConfig {
            omega: 0.0,
            gamma,
            g,
            drive_strength: 0.5 * eps * hopping,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SingleSitePath {
    pub times: Vec<f64>,
    pub a: Vec<Complex64>,
}

impl SingleSitePath {
    pub fn occupations(&self) -> Vec<f64> {
        self.a.iter().map(|z| z.norm_sqr()).collect()
    }
}

#[inline]
fn site_rhs(s: &SingleSiteConfig, a: Complex64, xi: Complex64) -> Complex64 {
    let h = a * Complex64::new(s.omega + s.g * a.norm_sqr(), -s.gamma) - xi * s.drive_strength;
    Complex64::new(h.im, -h.re)
}

/// Integrates the driven site with RK4, holding the noise constant over each
/// step of size `ocfg.step`. Samples every `sample_stride` steps.
pub fn propagate_single_site(
    a0: Complex64,
    scfg: &SingleSiteConfig,
    ocfg: &OUProcessConfig,
    t_final: f64,
    sample_stride: usize,
) -> Result<SingleSitePath, StochasticError> {
    positive("t_final", t_final)?;
    if !(scfg.gamma >= 0.0) {
        return Err(StochasticError::Parameter {
            name: "gamma",
            value: scfg.gamma,
            reason: "must be >= 0",
        });
    }
    let stride = sample_stride.max(1);
    let mut bath = OuProcess::new(ocfg)?;
    let h = ocfg.step;
    let total = (t_final / h - 1e-9).ceil() as usize;
    let mut path = SingleSitePath {
        times: Vec::with_capacity(total / stride + 1),
        a: Vec::with_capacity(total / stride + 1),
    };
    let mut a = a0;
    path.times.push(0.0);
    path.a.push(a);
    let mut xi = bath.current();
    for n in 1..=total {
        let k1 = site_rhs(scfg, a, xi);
        let k2 = site_rhs(scfg, a + k1 * (0.5 * h), xi);
        let k3 = site_rhs(scfg, a + k2 * (0.5 * h), xi);
        let k4 = site_rhs(scfg, a + k3 * h, xi);
        a += (k1 + (k2 + k3) * 2.0 + k4) * (h / 6.0);
        xi = bath.advance();
        let t = n as f64 * h;
        if !(a.norm_sqr() <= BLOW_UP_OCCUPATION) {
            return Err(StochasticError::BlowUp { t });
        }
        if n % stride == 0 {
            path.times.push(t);
            path.a.push(a);
        }
    }
    Ok(path)
}

/// Stationary occupation `eps^2 J^2 tau / (2 gamma)` of a weakly linked site.
pub fn stationary_occupation(eps: f64, hopping: f64, tau: f64, gamma: f64) -> Result<f64, StochasticError> {
    if gamma == 0.0 {
        return Err(StochasticError::Parameter {
            name: "gamma",
            value: gamma,
            reason: "no stationary state without loss",
        });
    }
    positive("gamma", gamma)?;
    positive("tau", tau)?;
    Ok(eps * eps * hopping * hopping * tau / (2.0 * gamma))
}

/// Diffusion constant `D = eps^2 J^2 tau / 2`.
pub fn diffusion_constant(eps: f64, hopping: f64, tau: f64) -> f64 {
    0.5 * eps * eps * hopping * hopping * tau
}

/// Per-quadrature variance of the stationary Gaussian, half the stationary
/// occupation.
pub fn quadrature_variance(eps: f64, hopping: f64, tau: f64, gamma: f64) -> Result<f64, StochasticError> {
    Ok(0.5 * stationary_occupation(eps, hopping, tau, gamma)?)
}

/// Quasi-stationary sink occupation `J^2 n_neighbor tau / (2 gamma)`.
pub fn quasi_stationary_occupation(n_neighbor: f64, hopping: f64, tau: f64, gamma: f64) -> f64 {
    hopping * hopping * n_neighbor * tau / (2.0 * gamma)
}

/// Outcome of the isotropic-Gaussian check on a stationary path.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GaussianReport {
    pub samples: usize,
    pub effective_samples: f64,
    pub mean: (f64, f64),
    pub var_re: f64,
    pub var_im: f64,
    pub sigma2: f64,
    pub sigma2_expected: f64,
    /// `<n^2> / <n>^2` of the occupation, 2 for an exponential law.
    pub occupation_moment_ratio: f64,
    /// Excess kurtosis of the occupation, 6 for an exponential law.
    pub occupation_excess_kurtosis: f64,
    pub failures: Vec<String>,
    pub passed: bool,
}

/// Minimum number of effectively independent samples.
pub const MIN_EFFECTIVE_SAMPLES: usize = 10_000;

/// Relative tolerance on `sigma^2`, isotropy and the occupation moment ratio.
pub const GAUSSIAN_REL_TOL: f64 = 0.10;

/// Tests that `path` samples an isotropic complex Gaussian with
/// per-quadrature variance `sigma2_expected`.
pub fn stationary_distribution_test(
    path: &[Complex64],
    sigma2_expected: f64,
) -> Result<GaussianReport, StochasticError> {
    let n = path.len();
    if n < 2 {
        return Err(StochasticError::InsufficientSamples {
            effective: n as f64,
            needed: MIN_EFFECTIVE_SAMPLES,
        });
    }
    let nf = n as f64;
    let re: Vec<f64> = path.iter().map(|z| z.re).collect();
    let im: Vec<f64> = path.iter().map(|z| z.im).collect();
    let occ: Vec<f64> = path.iter().map(|z| z.norm_sqr()).collect();
    let mean_re = crate::stats::mean(&re);
    let mean_im = crate::stats::mean(&im);
    let var_re = crate::stats::variance(&re);
    let var_im = crate::stats::variance(&im);
    let sigma2 = 0.5 * (var_re + var_im);

    let corr_len = correlation_length(&re).max(correlation_length(&im));
    let effective = nf / (1.0 + 2.0 * corr_len);
    if effective < MIN_EFFECTIVE_SAMPLES as f64 {
        return Err(StochasticError::InsufficientSamples {
            effective,
            needed: MIN_EFFECTIVE_SAMPLES,
        });
    }

    let m1 = crate::stats::mean(&occ);
    let m2 = occ.iter().map(|x| x * x).sum::<f64>() / nf;
    let var_occ = occ.iter().map(|x| (x - m1) * (x - m1)).sum::<f64>() / nf;
    let m4c = occ.iter().map(|x| (x - m1).powi(4)).sum::<f64>() / nf;
    let ratio = m2 / (m1 * m1);
    let kurt = m4c / (var_occ * var_occ) - 3.0;

    let mut failures = Vec::new();
    let mean_tol = 4.0 * (sigma2.max(f64::MIN_POSITIVE) / effective).sqrt();
    if mean_re.abs() > mean_tol || mean_im.abs() > mean_tol {
        failures.push(format!("mean ({mean_re:.3e}, {mean_im:.3e}) exceeds {mean_tol:.3e}"));
    }
    if sigma2 <= 0.0 || (var_re - var_im).abs() > GAUSSIAN_REL_TOL * sigma2 {
        failures.push(format!("anisotropic variances {var_re:.3e} vs {var_im:.3e}"));
    }
    if (sigma2 - sigma2_expected).abs() > GAUSSIAN_REL_TOL * sigma2_expected {
        failures.push(format!("sigma^2 = {sigma2:.4e}, expected {sigma2_expected:.4e}"));
    }
    if !((ratio - 2.0).abs() <= 2.0 * GAUSSIAN_REL_TOL) {
        failures.push(format!("occupation moment ratio {ratio:.3} (exponential law: 2)"));
    }
    Ok(GaussianReport {
        samples: n,
        effective_samples: effective,
        mean: (mean_re, mean_im),
        var_re,
        var_im,
        sigma2,
        sigma2_expected,
        occupation_moment_ratio: ratio,
        occupation_excess_kurtosis: kurt,
        passed: failures.is_empty(),
        failures,
    })
}

/// Lag (in samples) at which the normalised autocorrelation first drops below `1/e`.
fn correlation_length(x: &[f64]) -> f64 {
    let n = x.len();
    let m = crate::stats::mean(x);
    let c0: f64 = x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n as f64;
    if !(c0 > 0.0) {
        return n as f64;
    }
    let target = (-1.0f64).exp();
    let mut lag = 1;
    let mut step = 1;
    // bracket with doubling lags, then refine linearly
    let corr = |lag: usize| -> f64 {
        let k = n - lag;
        x[..k]
            .iter()
            .zip(&x[lag..])
            .map(|(a, b)| (a - m) * (b - m))
            .sum::<f64>()
            / (n as f64 * c0)
    };
    while lag < n / 2 && corr(lag) > target {
        lag += step;
        step *= 2;
    }
    if lag >= n / 2 {
        return n as f64;
    }
    let mut lo = lag - step / 2;
    let mut hi = lag;
    while hi - lo > 1 {
        let mid = (lo + hi) / 2;
        if corr(mid) > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    hi as f64
}
