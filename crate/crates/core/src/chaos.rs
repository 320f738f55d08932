//! Chaos diagnostics of the closed chain: largest Lyapunov exponents,
//! energy-shell volumes and the nonlinear Bloch-wave catalog.

use num_complex::Complex64;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::ensembles::sample_uniform_hypersphere;
use crate::integrator::{propagate, propagate_with_tangent, IntegratorConfig, IntegratorError, Storage};
use crate::model::{bloch_kappa, energy_of, Boundary, LatticeConfig, ModelError, TangentState, TrajectoryState};
use crate::rng::{self, Stream};

/// Exponents below this (in units of `J`) count as regular in summaries.
pub const REGULAR_THRESHOLD: f64 = 0.05;

#[derive(Debug, Error)]
pub enum ChaosError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Integrator(#[from] IntegratorError),
    #[error("closed-system diagnostic requires gamma = 0, got {0}")]
    Dissipative(f64),
    #[error("Bloch waves need a periodic chain with uniform bonds")]
    NotTranslationInvariant,
    #[error("invalid setting: {0}")]
    Config(String),
    #[error("failed to build worker pool: {0}")]
    Pool(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LyapunovConfig {
    pub t_total: f64,
    pub renorm_interval: f64,
    pub step: f64,
}

impl Default for LyapunovConfig {
    fn default() -> Self {
        LyapunovConfig {
            t_total: 200.0,
            renorm_interval: 1.0,
            step: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LyapunovResult {
    pub lambda: f64,
    /// `(t, running estimate)` after every renormalisation.
    pub history: Vec<(f64, f64)>,
    pub t_total: f64,
    pub renorm_interval: f64,
    /// Max minus min of the running estimate over the last quarter.
    pub last_quartile_spread: f64,
    pub converged: bool,
    pub retries: u32,
}

fn random_tangent(sites: usize, rng: &mut Stream) -> TangentState {
    loop {
        let da: Vec<Complex64> = (0..sites).map(|_| rng::complex_normal(rng)).collect();
        let t = TangentState::new(da);
        let norm = t.norm();
        if norm > 0.0 {
            return TangentState::new(t.da.into_iter().map(|z| z / norm).collect());
        }
    }
}

/// Benettin estimate of the largest Lyapunov exponent, starting from a random
/// unit tangent drawn from `rng`.
pub fn lyapunov_exponent(
    initial: &TrajectoryState,
    cfg: &LatticeConfig,
    lcfg: &LyapunovConfig,
    rng: &mut Stream,
) -> Result<LyapunovResult, ChaosError> {
    if cfg.gamma != 0.0 {
        return Err(ChaosError::Dissipative(cfg.gamma));
    }
    if !(lcfg.t_total >= 4.0 * lcfg.renorm_interval) {
        return Err(ChaosError::Config(format!(
            "t_total {} must cover several renormalisation intervals {}",
            lcfg.t_total, lcfg.renorm_interval
        )));
    }
    let tangent = random_tangent(cfg.sites, rng);
    // sample only at the end; the record is not needed
    let icfg = IntegratorConfig::new(lcfg.step, lcfg.t_total, lcfg.t_total);
    let run = propagate_with_tangent(initial, &tangent, cfg, &icfg, lcfg.renorm_interval)?;
    let dt = run.renorm_interval;
    let mut acc = 0.0;
    let history: Vec<(f64, f64)> = run
        .log_growth
        .iter()
        .enumerate()
        .map(|(k, g)| {
            acc += g;
            let t = (k + 1) as f64 * dt;
            (t, acc / t)
        })
        .collect();
    let lambda = history.last().map(|h| h.1).unwrap_or(0.0);
    let tail = &history[(3 * history.len()) / 4..];
    let lo = tail.iter().map(|h| h.1).fold(f64::INFINITY, f64::min);
    let hi = tail.iter().map(|h| h.1).fold(f64::NEG_INFINITY, f64::max);
    let spread = hi - lo;
    let converged = !(spread > 0.2 * lambda.abs() && lambda > REGULAR_THRESHOLD);
    Ok(LyapunovResult {
        lambda,
        history,
        t_total: lcfg.t_total,
        renorm_interval: dt,
        last_quartile_spread: spread,
        converged,
        retries: run.retries,
    })
}

/// Two-trajectory estimate of the largest exponent: a companion started at
/// distance `d0` along a random direction is pulled back to distance `d0`
/// after every renormalisation interval.
pub fn separation_exponent(
    initial: &TrajectoryState,
    cfg: &LatticeConfig,
    lcfg: &LyapunovConfig,
    d0: f64,
    rng: &mut Stream,
) -> Result<f64, ChaosError> {
    if cfg.gamma != 0.0 {
        return Err(ChaosError::Dissipative(cfg.gamma));
    }
    if !(d0 > 0.0) || !(lcfg.t_total >= 4.0 * lcfg.renorm_interval) {
        return Err(ChaosError::Config(format!(
            "need d0 > 0 and several intervals, got d0 = {d0}, t_total = {}, interval = {}",
            lcfg.t_total, lcfg.renorm_interval
        )));
    }
    let dir = random_tangent(cfg.sites, rng);
    let mut reference = initial.clone();
    let mut companion = TrajectoryState::new(initial.a.iter().zip(&dir.da).map(|(a, d)| a + d * d0).collect());
    companion.t = initial.t;
    let intervals = (lcfg.t_total / lcfg.renorm_interval).round() as usize;
    let icfg = IntegratorConfig::new(lcfg.step, lcfg.renorm_interval, lcfg.renorm_interval);
    let mut acc = 0.0;
    for _ in 0..intervals {
        reference = propagate(&reference, cfg, &icfg)?.final_state;
        companion = propagate(&companion, cfg, &icfg)?.final_state;
        let dist = reference
            .a
            .iter()
            .zip(&companion.a)
            .map(|(r, c)| (c - r).norm_sqr())
            .sum::<f64>()
            .sqrt();
        acc += (dist / d0).ln();
        let scale = d0 / dist;
        for (c, r) in companion.a.iter_mut().zip(&reference.a) {
            *c = r + (*c - r) * scale;
        }
    }
    Ok(acc / (intervals as f64 * lcfg.renorm_interval))
}

/// States at the two ends of the energy range on the sphere `sum |a|^2 = L`:
/// the uniform wave (bottom for `J > 0`) and all atoms on site 0 (top for
/// `g` large against `J`), each displaced by complex Gaussian noise of size
/// `perturbation` and renormalised back onto the sphere.
pub fn spectrum_edge_states(sites: usize, perturbation: f64, rng: &mut Stream) -> (TrajectoryState, TrajectoryState) {
    let mut bottom = vec![Complex64::new(1.0, 0.0); sites];
    let mut top = vec![Complex64::new(0.0, 0.0); sites];
    top[0] = Complex64::new((sites as f64).sqrt(), 0.0);
    let mut finish = |a: &mut Vec<Complex64>| {
        for z in a.iter_mut() {
            *z += rng::complex_normal(rng) * perturbation;
        }
        let norm: f64 = a.iter().map(|z| z.norm_sqr()).sum();
        let scale = (sites as f64 / norm).sqrt();
        for z in a.iter_mut() {
            *z *= scale;
        }
    };
    finish(&mut bottom);
    finish(&mut top);
    (TrajectoryState::new(bottom), TrajectoryState::new(top))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ScanPoint {
    pub energy: f64,
    pub lambda: f64,
    pub converged: bool,
}

/// Lyapunov exponents of `n_samples` uniform-hypersphere initial states.
/// Sample `i` uses stream `(root_seed, i)` for both its initial state and
/// its initial tangent.
pub fn lyapunov_scan(
    n_samples: usize,
    cfg: &LatticeConfig,
    lcfg: &LyapunovConfig,
    root_seed: u64,
    workers: usize,
) -> Result<Vec<ScanPoint>, ChaosError> {
    cfg.validate()?;
    let one = |i: usize| -> Result<ScanPoint, ChaosError> {
        let mut rng = rng::stream(root_seed, i as u64);
        let init = sample_uniform_hypersphere(cfg.sites, &mut rng);
        let energy = energy_of(&init.a, cfg);
        let res = lyapunov_exponent(&init, cfg, lcfg, &mut rng)?;
        Ok(ScanPoint {
            energy,
            lambda: res.lambda,
            converged: res.converged,
        })
    };
    let run = || (0..n_samples).into_par_iter().map(one).collect::<Result<Vec<_>, _>>();
    if workers > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| ChaosError::Pool(e.to_string()))?
            .install(run)
    } else {
        run()
    }
}

/// Relative volume of energy shells on the sphere `sum |a|^2 = L`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ShellHistogram {
    pub edges: Vec<f64>,
    pub mass: Vec<f64>,
    pub n_samples: usize,
}

impl ShellHistogram {
    pub fn centers(&self) -> Vec<f64> {
        self.edges.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect()
    }

    pub fn bin_of(&self, energy: f64) -> Option<usize> {
        let lo = *self.edges.first()?;
        let hi = *self.edges.last()?;
        if energy < lo || energy > hi {
            return None;
        }
        let width = (hi - lo) / self.mass.len() as f64;
        Some((((energy - lo) / width) as usize).min(self.mass.len() - 1))
    }

    /// Monte Carlo standard error of each bin mass.
    pub fn standard_errors(&self) -> Vec<f64> {
        let n = self.n_samples as f64;
        self.mass.iter().map(|p| (p * (1.0 - p) / n).sqrt()).collect()
    }

    /// True if the masses rise to a single peak and fall after it, ignoring
    /// reversals smaller than `sigmas` standard errors.
    pub fn is_unimodal(&self, sigmas: f64) -> bool {
        let se = self.standard_errors();
        let peak = self
            .mass
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(i, _)| i)
            .unwrap_or(0);
        let tol = |i: usize, j: usize| sigmas * (se[i] * se[i] + se[j] * se[j]).sqrt();
        let rising = (0..peak).all(|i| self.mass[i + 1] + tol(i, i + 1) >= self.mass[i]);
        let falling = (peak..self.mass.len() - 1).all(|i| self.mass[i + 1] <= self.mass[i] + tol(i, i + 1));
        rising && falling
    }
}

/// Monte Carlo histogram of the energy over uniform-hypersphere samples.
///
/// The bins span the sampled energies and, for translation-invariant chains,
/// every Bloch-wave energy (the uniform wave sits at the bottom of the shell
/// and is never hit by sampling).
pub fn energy_shell_histogram(
    n_samples: usize,
    bins: usize,
    cfg: &LatticeConfig,
    root_seed: u64,
) -> Result<ShellHistogram, ChaosError> {
    cfg.validate()?;
    if n_samples == 0 || bins == 0 {
        return Err(ChaosError::Config("need at least one sample and one bin".into()));
    }
    // one stream per block of draws keeps large histograms reproducible in parallel
    const CHUNK: usize = 4096;
    let energies: Vec<f64> = (0..n_samples.div_ceil(CHUNK))
        .into_par_iter()
        .flat_map_iter(|c| {
            let mut rng = rng::stream(root_seed, c as u64);
            let count = CHUNK.min(n_samples - c * CHUNK);
            (0..count)
                .map(|_| energy_of(&sample_uniform_hypersphere(cfg.sites, &mut rng).a, cfg))
                .collect::<Vec<_>>()
        })
        .collect();
    let mut lo = energies.iter().cloned().fold(f64::INFINITY, f64::min);
    let mut hi = energies.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if let Ok(catalog) = bloch_wave_catalog(cfg) {
        for w in catalog {
            lo = lo.min(w.energy);
            hi = hi.max(w.energy);
        }
    }
    if hi <= lo {
        hi = lo + 1.0;
    }
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0usize; bins];
    for e in &energies {
        let b = (((e - lo) / width) as usize).min(bins - 1);
        counts[b] += 1;
    }
    Ok(ShellHistogram {
        edges: (0..=bins).map(|i| lo + i as f64 * width).collect(),
        mass: counts.iter().map(|&c| c as f64 / n_samples as f64).collect(),
        n_samples,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BlochWave {
    pub k: i64,
    pub kappa: f64,
    pub energy: f64,
    pub stable: bool,
}

/// Energy `L (w - J cos kappa + g/2)` of a Bloch wave with unit amplitudes.
pub fn bloch_energy(cfg: &LatticeConfig, kappa: f64) -> f64 {
    cfg.sites as f64 * (cfg.omega - cfg.hopping * kappa.cos() + 0.5 * cfg.interaction)
}

pub fn bloch_wave_catalog(cfg: &LatticeConfig) -> Result<Vec<BlochWave>, ChaosError> {
    if cfg.boundary != Boundary::Periodic || cfg.bond_factors.iter().any(|&b| b != 1.0) {
        return Err(ChaosError::NotTranslationInvariant);
    }
    Ok((0..cfg.sites as i64)
        .map(|k| {
            let kappa = bloch_kappa(cfg.sites, k);
            BlochWave {
                k,
                kappa,
                energy: bloch_energy(cfg, kappa),
                stable: kappa.abs() < std::f64::consts::FRAC_PI_2,
            }
        })
        .collect())
}

/// Closed-form Bloch-wave amplitude `exp[i kappa l + i J cos(kappa) t - i g t - i w t]`.
pub fn bloch_amplitude(cfg: &LatticeConfig, kappa: f64, site: usize, t: f64) -> Complex64 {
    let phase = kappa * site as f64 + (cfg.hopping * kappa.cos() - cfg.interaction - cfg.omega) * t;
    Complex64::from_polar(1.0, phase)
}

/// Propagates Bloch wave `k` (optionally perturbed by complex Gaussian noise
/// of size `perturbation`) and returns the largest deviation from the
/// closed-form solution over samples spaced `0.01` apart.
pub fn verify_bloch_wave(
    k: i64,
    cfg: &LatticeConfig,
    t_final: f64,
    step: f64,
    perturbation: f64,
    seed: u64,
) -> Result<f64, ChaosError> {
    if cfg.gamma != 0.0 {
        return Err(ChaosError::Dissipative(cfg.gamma));
    }
    bloch_wave_catalog(cfg)?;
    let kappa = bloch_kappa(cfg.sites, k);
    let mut init = TrajectoryState::bloch_wave(cfg.sites, k);
    if perturbation != 0.0 {
        let mut rng = rng::stream(seed, 0);
        for z in init.a.iter_mut() {
            *z += rng::complex_normal(&mut rng) * perturbation;
        }
    }
    let sample = if step <= 0.01 {
        (0.01 / step).round().max(1.0) * step
    } else {
        step
    };
    let icfg = IntegratorConfig::new(step, sample, t_final).with_storage(Storage::Full);
    let rec = propagate(&init, cfg, &icfg)?;
    let mut worst: f64 = 0.0;
    for (s, &t) in rec.times.iter().enumerate() {
        for (l, z) in rec.amplitudes_at(s).expect("full storage").iter().enumerate() {
            worst = worst.max((z - bloch_amplitude(cfg, kappa, l, t)).norm());
        }
    }
    Ok(worst)
}
