//! Fixed-step fourth-order Runge-Kutta propagation of lattice trajectories.
//!
//! Output is sampled on the grid `k * sample_every`; sample times are computed
//! from integer step counts so they never accumulate rounding drift.

use num_complex::Complex64;
use thiserror::Error;

use crate::model::{Dynamics, LatticeConfig, ModelError, TangentState, TrajectoryState};

/// Occupations above this value abort the run.
pub const BLOW_UP_OCCUPATION: f64 = 1e6;

const MAX_TANGENT_RETRIES: u32 = 8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum IntegratorError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("invalid integrator setting `{name}`: {reason}")]
    Config { name: &'static str, reason: String },
    #[error("trajectory blew up at t = {t}: |a_{site}|^2 = {value}")]
    BlowUp { t: f64, site: usize, value: f64 },
    #[error("tangent norm left the representable range at t = {t} (norm {norm})")]
    TangentRange { t: f64, norm: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Storage {
    /// Only `|a_l|^2` is kept for every sample.
    #[default]
    Occupations,
    /// Occupations plus the complex amplitudes.
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntegratorConfig {
    pub step: f64,
    pub sample_every: f64,
    pub t_final: f64,
    pub storage: Storage,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        IntegratorConfig {
            step: 1e-3,
            sample_every: 0.1,
            t_final: 10.0,
            storage: Storage::Occupations,
        }
    }
}

impl IntegratorConfig {
    pub fn new(step: f64, sample_every: f64, t_final: f64) -> Self {
        IntegratorConfig {
            step,
            sample_every,
            t_final,
            storage: Storage::Occupations,
        }
    }

    pub fn with_storage(mut self, storage: Storage) -> Self {
        self.storage = storage;
        self
    }

    /// Returns `(steps_per_sample, total_steps)`.
    pub fn schedule(&self) -> Result<(usize, usize), IntegratorError> {
        if !(self.step > 0.0 && self.step.is_finite()) {
            return Err(IntegratorError::Config {
                name: "step",
                reason: format!("must be positive, got {}", self.step),
            });
        }
        if !(self.t_final > 0.0 && self.t_final.is_finite()) {
            return Err(IntegratorError::Config {
                name: "t_final",
                reason: format!("must be positive, got {}", self.t_final),
            });
        }
        let per_sample = steps_in(self.sample_every, self.step).ok_or_else(|| IntegratorError::Config {
            name: "sample_every",
            reason: format!(
                "must be a positive multiple of the step {}, got {}",
                self.step, self.sample_every
            ),
        })?;
        let total = (self.t_final / self.step - 1e-9).ceil().max(1.0) as usize;
        Ok((per_sample, total))
    }
}

/// Number of steps of size `step` in `interval`, if `interval` is a multiple of it.
pub(crate) fn steps_in(interval: f64, step: f64) -> Option<usize> {
    if !(interval > 0.0 && interval.is_finite()) {
        return None;
    }
    let k = (interval / step).round();
    if k < 1.0 || (k * step - interval).abs() > 1e-9 * interval.max(step) {
        return None;
    }
    Some(k as usize)
}

/// Sampled output of one propagation.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRecord {
    pub sites: usize,
    pub times: Vec<f64>,
    /// Row-major `times.len() x sites` occupations.
    pub occupations: Vec<f64>,
    /// Row-major amplitudes, present with [`Storage::Full`].
    pub amplitudes: Option<Vec<Complex64>>,
    pub final_state: TrajectoryState,
}

impl TrajectoryRecord {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn occupations_at(&self, sample: usize) -> &[f64] {
        &self.occupations[sample * self.sites..(sample + 1) * self.sites]
    }

    pub fn amplitudes_at(&self, sample: usize) -> Option<&[Complex64]> {
        self.amplitudes
            .as_ref()
            .map(|a| &a[sample * self.sites..(sample + 1) * self.sites])
    }

    /// Occupation of one site over the whole record.
    pub fn site_series(&self, site: usize) -> Vec<f64> {
        (0..self.len()).map(|k| self.occupations_at(k)[site]).collect()
    }

    fn push(&mut self, t: f64, a: &[Complex64]) {
        self.times.push(t);
        self.occupations.extend(a.iter().map(|z| z.norm_sqr()));
        if let Some(amp) = self.amplitudes.as_mut() {
            amp.extend_from_slice(a);
        }
    }
}

/// RK4 stage buffers.
struct Rk4 {
    k: [Vec<Complex64>; 4],
    tmp: Vec<Complex64>,
}

impl Rk4 {
    fn new(n: usize) -> Self {
        let z = vec![Complex64::new(0.0, 0.0); n];
        Rk4 {
            k: [z.clone(), z.clone(), z.clone(), z.clone()],
            tmp: z,
        }
    }

    fn step(&mut self, dynamics: &Dynamics, a: &mut [Complex64], h: f64) {
        let [k1, k2, k3, k4] = &mut self.k;
        let tmp = &mut self.tmp;
        dynamics.rhs(a, k1);
        axpy(tmp, a, k1, 0.5 * h);
        dynamics.rhs(tmp, k2);
        axpy(tmp, a, k2, 0.5 * h);
        dynamics.rhs(tmp, k3);
        axpy(tmp, a, k3, h);
        dynamics.rhs(tmp, k4);
        combine(a, k1, k2, k3, k4, h);
    }
}

/// RK4 buffers for the trajectory together with its tangent vector.
struct Rk4Tangent {
    base: Rk4,
    dk: [Vec<Complex64>; 4],
    dtmp: Vec<Complex64>,
}

impl Rk4Tangent {
    fn new(n: usize) -> Self {
        let z = vec![Complex64::new(0.0, 0.0); n];
        Rk4Tangent {
            base: Rk4::new(n),
            dk: [z.clone(), z.clone(), z.clone(), z.clone()],
            dtmp: z,
        }
    }

    fn step(&mut self, dynamics: &Dynamics, a: &mut [Complex64], da: &mut [Complex64], h: f64) {
        let [k1, k2, k3, k4] = &mut self.base.k;
        let tmp = &mut self.base.tmp;
        let [d1, d2, d3, d4] = &mut self.dk;
        let dtmp = &mut self.dtmp;

        dynamics.rhs(a, k1);
        dynamics.tangent(a, da, d1);

        axpy(tmp, a, k1, 0.5 * h);
        axpy(dtmp, da, d1, 0.5 * h);
        dynamics.rhs(tmp, k2);
        dynamics.tangent(tmp, dtmp, d2);

        axpy(tmp, a, k2, 0.5 * h);
        axpy(dtmp, da, d2, 0.5 * h);
        dynamics.rhs(tmp, k3);
        dynamics.tangent(tmp, dtmp, d3);

        axpy(tmp, a, k3, h);
        axpy(dtmp, da, d3, h);
        dynamics.rhs(tmp, k4);
        dynamics.tangent(tmp, dtmp, d4);

        combine(a, k1, k2, k3, k4, h);
        combine(da, d1, d2, d3, d4, h);
    }
}

#[inline]
fn axpy(out: &mut [Complex64], x: &[Complex64], k: &[Complex64], h: f64) {
    for ((o, xi), ki) in out.iter_mut().zip(x).zip(k) {
        *o = xi + ki * h;
    }
}

#[inline]
fn combine(a: &mut [Complex64], k1: &[Complex64], k2: &[Complex64], k3: &[Complex64], k4: &[Complex64], h: f64) {
    let w = h / 6.0;
    for l in 0..a.len() {
        a[l] += (k1[l] + (k2[l] + k3[l]) * 2.0 + k4[l]) * w;
    }
}

fn check_finite(a: &[Complex64], t: f64) -> Result<(), IntegratorError> {
    for (site, z) in a.iter().enumerate() {
        let value = z.norm_sqr();
        // negated comparison also catches NaN
        if !(value <= BLOW_UP_OCCUPATION) {
            return Err(IntegratorError::BlowUp { t, site, value });
        }
    }
    Ok(())
}

fn start(
    initial: &TrajectoryState,
    cfg: &LatticeConfig,
    icfg: &IntegratorConfig,
) -> Result<(usize, usize, TrajectoryRecord), IntegratorError> {
    cfg.validate()?;
    cfg.check_len(initial.a.len())?;
    let (per_sample, total) = icfg.schedule()?;
    check_finite(&initial.a, initial.t)?;
    let n_samples = total / per_sample + 1;
    let record = TrajectoryRecord {
        sites: cfg.sites,
        times: Vec::with_capacity(n_samples),
        occupations: Vec::with_capacity(n_samples * cfg.sites),
        amplitudes: match icfg.storage {
            Storage::Full => Some(Vec::with_capacity(n_samples * cfg.sites)),
            Storage::Occupations => None,
        },
        final_state: initial.clone(),
    };
    Ok((per_sample, total, record))
}

/// Propagates `initial` to `t_final`, sampling every `sample_every`.
pub fn propagate(
    initial: &TrajectoryState,
    cfg: &LatticeConfig,
    icfg: &IntegratorConfig,
) -> Result<TrajectoryRecord, IntegratorError> {
    let (per_sample, total, mut record) = start(initial, cfg, icfg)?;
    let dynamics = cfg.dynamics();
    let mut rk = Rk4::new(dynamics.sites());
    let mut a = initial.a.clone();
    let t0 = initial.t;
    let h = icfg.step;
    record.push(t0, &a);
    for n in 1..=total {
        rk.step(&dynamics, &mut a, h);
        let t = t0 + n as f64 * h;
        check_finite(&a, t)?;
        if n % per_sample == 0 {
            record.push(t, &a);
        }
    }
    record.final_state = TrajectoryState {
        t: t0 + total as f64 * h,
        a,
    };
    Ok(record)
}

/// Result of a trajectory co-integrated with a tangent vector.
#[derive(Debug, Clone, PartialEq)]
pub struct TangentRun {
    pub record: TrajectoryRecord,
    /// `ln |da|` accumulated over each renormalisation interval.
    pub log_growth: Vec<f64>,
    /// Interval actually used (halved on every retry).
    pub renorm_interval: f64,
    pub retries: u32,
}

impl TangentRun {
    /// Benettin estimate: total log growth over elapsed time.
    pub fn exponent(&self) -> f64 {
        let total: f64 = self.log_growth.iter().sum();
        total / (self.log_growth.len() as f64 * self.renorm_interval)
    }
}

/// Propagates the trajectory together with a tangent vector, renormalising
/// the tangent to unit norm every `renorm_interval` and recording the log of
/// its growth. If the tangent norm leaves the representable range within an
/// interval the run restarts with half the interval.
pub fn propagate_with_tangent(
    initial: &TrajectoryState,
    tangent0: &TangentState,
    cfg: &LatticeConfig,
    icfg: &IntegratorConfig,
    renorm_interval: f64,
) -> Result<TangentRun, IntegratorError> {
    cfg.check_len(tangent0.da.len())?;
    let norm0 = tangent0.norm();
    if !(norm0 > 0.0 && norm0.is_finite()) {
        return Err(IntegratorError::Config {
            name: "tangent0",
            reason: format!("initial tangent norm must be positive and finite, got {norm0}"),
        });
    }
    let mut interval = renorm_interval;
    let mut retries = 0;
    loop {
        match tangent_attempt(initial, tangent0, cfg, icfg, interval) {
            Err(IntegratorError::TangentRange { .. }) if retries < MAX_TANGENT_RETRIES => {
                retries += 1;
                interval *= 0.5;
                log::warn!("tangent out of range, retrying with renorm interval {interval}");
            }
            Err(e) => return Err(e),
            Ok((record, log_growth)) => {
                return Ok(TangentRun {
                    record,
                    log_growth,
                    renorm_interval: interval,
                    retries,
                })
            }
        }
    }
}

fn tangent_attempt(
    initial: &TrajectoryState,
    tangent0: &TangentState,
    cfg: &LatticeConfig,
    icfg: &IntegratorConfig,
    renorm_interval: f64,
) -> Result<(TrajectoryRecord, Vec<f64>), IntegratorError> {
    let (per_sample, total, mut record) = start(initial, cfg, icfg)?;
    let per_renorm = steps_in(renorm_interval, icfg.step).ok_or_else(|| IntegratorError::Config {
        name: "renorm_interval",
        reason: format!(
            "must be a positive multiple of the step {}, got {renorm_interval}",
            icfg.step
        ),
    })?;
    let dynamics = cfg.dynamics();
    let mut rk = Rk4Tangent::new(dynamics.sites());
    let mut a = initial.a.clone();
    let norm0 = tangent0.norm();
    let mut da: Vec<Complex64> = tangent0.da.iter().map(|z| z / norm0).collect();
    let t0 = initial.t;
    let h = icfg.step;
    let mut log_growth = Vec::with_capacity(total / per_renorm);
    record.push(t0, &a);
    for n in 1..=total {
        rk.step(&dynamics, &mut a, &mut da, h);
        let t = t0 + n as f64 * h;
        check_finite(&a, t)?;
        if n % per_sample == 0 {
            record.push(t, &a);
        }
        if n % per_renorm == 0 {
            let norm = da.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
            if !(norm > 1e-150 && norm < 1e150) {
                return Err(IntegratorError::TangentRange { t, norm });
            }
            log_growth.push(norm.ln());
            da.iter_mut().for_each(|z| *z /= norm);
        }
    }
    record.final_state = TrajectoryState {
        t: t0 + total as f64 * h,
        a,
    };
    Ok((record, log_growth))
}
