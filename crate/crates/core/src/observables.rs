//! Derived quantities: depleted-atom counts, bath autocorrelation and its
//! exponential fit, depletion-front tracking and steady-current fits.

use num_complex::Complex64;
use rand::Rng;
use serde::Serialize;
use thiserror::Error;

use crate::ensembles::Sampler;
use crate::integrator::TrajectoryRecord;
use crate::model::LatticeConfig;
use crate::rng;
use crate::stats::{fit_line, fit_line_weighted, pairwise_sum, LineFit};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ObservableError {
    #[error("record holds occupations only; complex amplitudes are required")]
    OccupationsOnly,
    #[error("site {site} out of range for L = {len}")]
    SiteOutOfRange { site: usize, len: usize },
    #[error("correlation estimate has C(0) = {0}, expected a positive value")]
    NonPositiveVariance(f64),
    #[error("only {found} usable lags for the exponential fit (need {needed})")]
    TooFewLags { found: usize, needed: usize },
    #[error("depleted count peaks at {max_count}; no scaling window {lo} <= count <= {hi}")]
    NoScalingWindow { max_count: usize, lo: usize, hi: usize },
    #[error("not enough data: {0}")]
    Insufficient(String),
}

/// Configuration the ensemble was produced with.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EnsembleMeta {
    pub root_seed: u64,
    pub sampler: Sampler,
    pub nbar: f64,
    pub lattice: LatticeConfig,
    pub step: f64,
    pub sample_every: f64,
    pub t_final: f64,
}

/// Ensemble-mean site occupations on a common time grid.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleResult {
    pub sites: usize,
    pub times: Vec<f64>,
    /// Row-major `times x sites` mean occupations.
    pub n: Vec<f64>,
    /// Standard errors of `n`.
    pub stderr: Vec<f64>,
    /// Number of trajectories that entered the means.
    pub n_traj: usize,
    pub failed: Vec<(u64, String)>,
    /// Per-trajectory occupations (same layout as `n`), if kept.
    pub members: Option<Vec<Vec<f64>>>,
    pub meta: EnsembleMeta,
}

impl EnsembleResult {
    /// Builds a result directly from per-trajectory occupation tables.
    pub fn from_members(times: Vec<f64>, sites: usize, members: Vec<Vec<f64>>, meta: EnsembleMeta) -> Self {
        let rows: Vec<&[f64]> = members.iter().map(Vec::as_slice).collect();
        let (n, stderr) = mean_and_stderr(&rows, times.len() * sites);
        EnsembleResult {
            sites,
            times,
            n,
            stderr,
            n_traj: members.len(),
            failed: Vec::new(),
            members: Some(members),
            meta,
        }
    }

    pub fn mean_at(&self, sample: usize) -> &[f64] {
        &self.n[sample * self.sites..(sample + 1) * self.sites]
    }

    pub fn stderr_at(&self, sample: usize) -> &[f64] {
        &self.stderr[sample * self.sites..(sample + 1) * self.sites]
    }

    pub fn site_series(&self, site: usize) -> Vec<f64> {
        (0..self.times.len()).map(|k| self.n[k * self.sites + site]).collect()
    }

    /// Total ensemble-mean occupation `sum_l n_l(t)`.
    pub fn total(&self) -> Vec<f64> {
        (0..self.times.len()).map(|k| pairwise_sum(self.mean_at(k))).collect()
    }

    /// Mean occupation of the two sites adjacent to `site`.
    pub fn neighbor_mean(&self, site: usize) -> Vec<f64> {
        let n = self.sites;
        let left = (site + n - 1) % n;
        let right = (site + 1) % n;
        (0..self.times.len())
            .map(|k| 0.5 * (self.n[k * n + left] + self.n[k * n + right]))
            .collect()
    }

    /// First sample time at which `series(site)` drops below `level`.
    pub fn first_time_below(&self, series: &[f64], level: f64) -> Option<f64> {
        series.iter().position(|&v| v < level).map(|k| self.times[k])
    }

    /// Resample trajectories with replacement.
    fn resampled(&self, rng: &mut rng::Stream) -> Option<EnsembleResult> {
        let members = self.members.as_ref()?;
        let m = members.len();
        let picks: Vec<&[f64]> = (0..m).map(|_| members[rng.random_range(0..m)].as_slice()).collect();
        let (n, stderr) = mean_and_stderr(&picks, self.n.len());
        Some(EnsembleResult {
            n,
            stderr,
            members: None,
            failed: Vec::new(),
            ..self.clone_without_members()
        })
    }

    fn clone_without_members(&self) -> EnsembleResult {
        EnsembleResult {
            sites: self.sites,
            times: self.times.clone(),
            n: Vec::new(),
            stderr: Vec::new(),
            n_traj: self.n_traj,
            failed: Vec::new(),
            members: None,
            meta: self.meta.clone(),
        }
    }
}

fn mean_and_stderr(members: &[&[f64]], width: usize) -> (Vec<f64>, Vec<f64>) {
    let m = members.len() as f64;
    let mut col = vec![0.0; members.len()];
    let mut mean = Vec::with_capacity(width);
    let mut stderr = Vec::with_capacity(width);
    for j in 0..width {
        for (c, row) in col.iter_mut().zip(members) {
            *c = row[j];
        }
        let mu = pairwise_sum(&col) / m;
        mean.push(mu);
        if members.len() > 1 {
            col.iter_mut().for_each(|c| *c = (*c - mu) * (*c - mu));
            stderr.push((pairwise_sum(&col) / (m - 1.0) / m).sqrt());
        } else {
            stderr.push(0.0);
        }
    }
    (mean, stderr)
}

/// Total number of depleted atoms `N(t) = nbar sum_l (1 - n_l(t))`.
pub fn depleted_total(result: &EnsembleResult, nbar: f64) -> Vec<f64> {
    (0..result.times.len())
        .map(|k| {
            let missing: Vec<f64> = result.mean_at(k).iter().map(|n| 1.0 - n).collect();
            nbar * pairwise_sum(&missing)
        })
        .collect()
}

/// Neighbour sum `xi(t) = a_{l+1}(t) + a_{l-1}(t)` driving site `l`.
pub fn xi_series(record: &TrajectoryRecord, site: usize) -> Result<Vec<Complex64>, ObservableError> {
    let n = record.sites;
    if site >= n {
        return Err(ObservableError::SiteOutOfRange { site, len: n });
    }
    let amps = record.amplitudes.as_ref().ok_or(ObservableError::OccupationsOnly)?;
    let (left, right) = ((site + n - 1) % n, (site + 1) % n);
    Ok(amps.chunks_exact(n).map(|row| row[left] + row[right]).collect())
}

/// Complex autocorrelation `C(lag) = <xi(t + lag) xi*(t)>` averaged over
/// series and start times.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorrelationEstimate {
    pub lags: Vec<f64>,
    pub c: Vec<(f64, f64)>,
    /// Duration of the analysed window.
    pub window: f64,
    /// Spread of `|C|` over the tail lags, used as the noise floor of the fit.
    pub noise_floor: f64,
    pub warnings: Vec<String>,
}

impl CorrelationEstimate {
    pub fn value(&self, k: usize) -> Complex64 {
        Complex64::new(self.c[k].0, self.c[k].1)
    }

    pub fn magnitude(&self) -> Vec<f64> {
        self.c.iter().map(|&(re, im)| re.hypot(im)).collect()
    }

    /// Builds an estimate from known correlation values.
    pub fn from_values(lags: Vec<f64>, values: &[Complex64]) -> Self {
        let window = lags.last().copied().unwrap_or(0.0);
        CorrelationEstimate {
            lags,
            c: values.iter().map(|z| (z.re, z.im)).collect(),
            window,
            noise_floor: 0.0,
            warnings: Vec::new(),
        }
    }
}

pub fn autocorrelation(
    series: &[Vec<Complex64>],
    dt: f64,
    max_lag: usize,
) -> Result<CorrelationEstimate, ObservableError> {
    if series.is_empty() || series.iter().any(|s| s.len() <= max_lag) {
        return Err(ObservableError::Insufficient(format!(
            "every series needs more than {max_lag} samples"
        )));
    }
    let mut values = Vec::with_capacity(max_lag + 1);
    for lag in 0..=max_lag {
        let mut parts_re = Vec::with_capacity(series.len());
        let mut parts_im = Vec::with_capacity(series.len());
        for s in series {
            let count = s.len() - lag;
            let mut acc = Complex64::new(0.0, 0.0);
            for t in 0..count {
                acc += s[t + lag] * s[t].conj();
            }
            acc /= count as f64;
            parts_re.push(acc.re);
            parts_im.push(acc.im);
        }
        let m = series.len() as f64;
        values.push(Complex64::new(pairwise_sum(&parts_re) / m, pairwise_sum(&parts_im) / m));
    }
    let lags: Vec<f64> = (0..=max_lag).map(|k| k as f64 * dt).collect();
    let mut est = CorrelationEstimate::from_values(lags, &values);
    est.window = (series[0].len() - 1) as f64 * dt;
    let mags = est.magnitude();
    let tail = &mags[(3 * mags.len()) / 4..];
    est.noise_floor = if tail.len() >= 2 {
        let mu = tail.iter().sum::<f64>() / tail.len() as f64;
        (tail.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / (tail.len() - 1) as f64).sqrt()
    } else {
        0.0
    };
    Ok(est)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ExponentialFit {
    pub amplitude: f64,
    pub tau: f64,
    pub residual: f64,
    pub lags_used: usize,
}

/// Least-squares fit of `ln |C(lag)| = ln A - lag / tau`, weighted by
/// `|C|^2`, over the leading lags where `|C|` stays above
/// `max(3 * noise_floor, 0.05 * C(0))`.
pub fn fit_exponential(corr: &mut CorrelationEstimate) -> Result<ExponentialFit, ObservableError> {
    const MIN_LAGS: usize = 5;
    let mags = corr.magnitude();
    let c0 = corr.c.first().map(|c| c.0).unwrap_or(0.0);
    if !(c0 > 0.0) {
        return Err(ObservableError::NonPositiveVariance(c0));
    }
    let cutoff = (3.0 * corr.noise_floor).max(0.05 * c0);
    let usable = mags.iter().take_while(|&&m| m > cutoff).count();
    if usable < MIN_LAGS {
        return Err(ObservableError::TooFewLags {
            found: usable,
            needed: MIN_LAGS,
        });
    }
    let x = &corr.lags[..usable];
    let y: Vec<f64> = mags[..usable].iter().map(|m| m.ln()).collect();
    let w: Vec<f64> = mags[..usable].iter().map(|m| m * m).collect();
    let line = fit_line_weighted(x, &y, Some(&w))
        .ok_or_else(|| ObservableError::Insufficient("degenerate lag grid".into()))?;
    if !(line.slope < 0.0) {
        return Err(ObservableError::Insufficient(format!(
            "correlation does not decay (slope {})",
            line.slope
        )));
    }
    let tau = -1.0 / line.slope;
    if corr.window < 10.0 * tau {
        corr.warnings.push(format!(
            "analysis window {:.3} is shorter than 10 correlation times ({:.3})",
            corr.window,
            10.0 * tau
        ));
    }
    Ok(ExponentialFit {
        amplitude: line.intercept.exp(),
        tau,
        residual: line.residual,
        lags_used: usable,
    })
}

/// Integrated correlation time `Re int C(s) ds / C(0)` by the trapezoid rule
/// over the same leading lags that `fit_exponential` uses. For a pure
/// exponential this is `0.95 tau` once the envelope crosses `0.05 C(0)`.
pub fn integrated_correlation_time(corr: &CorrelationEstimate) -> Result<f64, ObservableError> {
    let mags = corr.magnitude();
    let c0 = corr.c.first().map(|c| c.0).unwrap_or(0.0);
    if !(c0 > 0.0) {
        return Err(ObservableError::NonPositiveVariance(c0));
    }
    let cutoff = (3.0 * corr.noise_floor).max(0.05 * c0);
    let usable = mags.iter().take_while(|&&m| m > cutoff).count();
    if usable < 2 {
        return Err(ObservableError::TooFewLags {
            found: usable,
            needed: 2,
        });
    }
    let area: f64 = (1..usable)
        .map(|k| 0.5 * (corr.c[k].0 + corr.c[k - 1].0) * (corr.lags[k] - corr.lags[k - 1]))
        .sum();
    Ok(area / c0)
}

/// `C(lag) = A exp(-lag / tau)` on a uniform lag grid.
pub fn exponential_correlation(amplitude: f64, tau: f64, dt: f64, max_lag: usize) -> CorrelationEstimate {
    let lags: Vec<f64> = (0..=max_lag).map(|k| k as f64 * dt).collect();
    let values: Vec<Complex64> = lags
        .iter()
        .map(|l| Complex64::new(amplitude * (-l / tau).exp(), 0.0))
        .collect();
    CorrelationEstimate::from_values(lags, &values)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PowerLawFit {
    pub exponent: f64,
    pub prefactor: f64,
    pub exponent_err: f64,
    pub r_squared: f64,
}

/// Fits `y = prefactor * x^exponent` by least squares in log-log space.
pub fn fit_power_law(x: &[f64], y: &[f64]) -> Option<PowerLawFit> {
    let (lx, ly): (Vec<f64>, Vec<f64>) = x
        .iter()
        .zip(y)
        .filter(|(a, b)| **a > 0.0 && **b > 0.0)
        .map(|(a, b)| (a.ln(), b.ln()))
        .unzip();
    let LineFit {
        slope,
        intercept,
        slope_err,
        r_squared,
        ..
    } = fit_line(&lx, &ly)?;
    Some(PowerLawFit {
        exponent: slope,
        prefactor: intercept.exp(),
        exponent_err: slope_err,
        r_squared,
    })
}

/// Growth of the depleted region around the sink.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FrontFit {
    pub times: Vec<f64>,
    pub depleted_count: Vec<usize>,
    pub threshold: f64,
    pub exponent: f64,
    pub prefactor: f64,
    /// Count range `(lo, hi)` entering the fit.
    pub fit_window: (usize, usize),
    /// `(count, first time the count is reached)` pairs used in the fit.
    pub crossings: Vec<(usize, f64)>,
    pub exponent_err: f64,
    pub bootstrap_resamples: usize,
}

pub const BOOTSTRAP_RESAMPLES: usize = 200;

/// Number of sites with `n_l(t) < threshold` at every sample.
pub fn depleted_counts(result: &EnsembleResult, threshold: f64) -> Vec<usize> {
    (0..result.times.len())
        .map(|k| result.mean_at(k).iter().filter(|&&n| n < threshold).count())
        .collect()
}

/// First times at which the depleted count reaches each level in `[lo, hi]`.
fn crossings(times: &[f64], counts: &[usize], lo: usize, hi: usize) -> Vec<(usize, f64)> {
    let mut out = Vec::new();
    let mut reached = 0usize;
    for (&t, &c) in times.iter().zip(counts) {
        // count may dip through noise; only new maxima define crossings
        if c > reached {
            for level in (reached + 1)..=c {
                if level >= lo && level <= hi && t > 0.0 {
                    out.push((level, t));
                }
            }
            reached = c;
        }
    }
    out
}

fn fit_crossings(cross: &[(usize, f64)]) -> Option<PowerLawFit> {
    // distinct time points only; simultaneous level jumps keep the largest level
    let mut pts: Vec<(f64, f64)> = Vec::new();
    for &(level, t) in cross {
        match pts.last_mut() {
            Some(last) if last.0 == t => last.1 = level as f64,
            _ => pts.push((t, level as f64)),
        }
    }
    if pts.len() < 2 {
        return None;
    }
    let (t, c): (Vec<f64>, Vec<f64>) = pts.into_iter().unzip();
    fit_power_law(&t, &c)
}

/// Tracks the depleted count and fits `count ~ t^p` over the window
/// `3 <= count <= L - 4`, using the first time each count is reached.
/// The error bar is the bootstrap spread over trajectories when members are
/// kept, the regression error otherwise.
pub fn depletion_front(result: &EnsembleResult, threshold: f64) -> Result<FrontFit, ObservableError> {
    let lo = 3;
    let hi = result.sites.saturating_sub(4);
    let counts = depleted_counts(result, threshold);
    let max_count = counts.iter().copied().max().unwrap_or(0);
    if max_count <= lo {
        return Err(ObservableError::NoScalingWindow { max_count, lo, hi });
    }
    let cross = crossings(&result.times, &counts, lo, hi);
    let fit = fit_crossings(&cross).ok_or_else(|| {
        ObservableError::Insufficient(format!(
            "need at least two distinct crossing times in the window, got {cross:?}"
        ))
    })?;

    let (exponent_err, resamples) = match result.members {
        Some(_) => {
            let mut stream = rng::stream(result.meta.root_seed ^ 0xB007_5742, 0);
            let mut exps = Vec::with_capacity(BOOTSTRAP_RESAMPLES);
            for _ in 0..BOOTSTRAP_RESAMPLES {
                let boot = result.resampled(&mut stream).expect("members present");
                let c = depleted_counts(&boot, threshold);
                if let Some(f) = fit_crossings(&crossings(&boot.times, &c, lo, hi)) {
                    exps.push(f.exponent);
                }
            }
            if exps.len() >= 2 {
                (crate::stats::variance(&exps).sqrt(), exps.len())
            } else {
                (fit.exponent_err, 0)
            }
        }
        None => (fit.exponent_err, 0),
    };

    Ok(FrontFit {
        times: result.times.clone(),
        depleted_count: counts,
        threshold,
        exponent: fit.exponent,
        prefactor: fit.prefactor,
        fit_window: (lo, hi),
        crossings: cross,
        exponent_err,
        bootstrap_resamples: resamples,
    })
}

/// Linear fit of `N(t)` over the last third of the run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SteadyCurrent {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    /// Relative change of the slope between the two halves of the window.
    pub slope_drift: f64,
    pub steady: bool,
}

/// Minimum R^2 for calling the final third of `N(t)` linear.
pub const STEADY_R_SQUARED: f64 = 0.95;

pub fn steady_current_check(result: &EnsembleResult, nbar: f64) -> Result<SteadyCurrent, ObservableError> {
    let total = depleted_total(result, nbar);
    let len = total.len();
    if len < 6 {
        return Err(ObservableError::Insufficient(format!("{len} samples")));
    }
    let start = (2 * len) / 3;
    let t = &result.times[start..];
    let y = &total[start..];
    let line = fit_line(t, y).ok_or_else(|| ObservableError::Insufficient("degenerate window".into()))?;
    let mid = t.len() / 2;
    let first = fit_line(&t[..=mid], &y[..=mid]);
    let second = fit_line(&t[mid..], &y[mid..]);
    let slope_drift = match (first, second) {
        (Some(a), Some(b)) if line.slope != 0.0 => (b.slope - a.slope).abs() / line.slope.abs(),
        _ => f64::INFINITY,
    };
    if line.r_squared < STEADY_R_SQUARED {
        log::info!("no steady state reached: R^2 = {:.3}", line.r_squared);
    }
    Ok(SteadyCurrent {
        slope: line.slope,
        intercept: line.intercept,
        r_squared: line.r_squared,
        slope_drift,
        steady: line.r_squared >= STEADY_R_SQUARED,
    })
}

/// Predicted versus measured occupation of the sink under the
/// quasi-stationary relation `n_d = J^2 n_{d+-1} tau / (2 gamma)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PlateauTrack {
    pub times: Vec<f64>,
    pub measured: Vec<f64>,
    pub predicted: Vec<f64>,
    pub max_rel_error: f64,
    pub mean_rel_error: f64,
}

/// Compares the sink occupation with the quasi-stationary prediction over
/// samples with `t >= t_start` where the neighbours stay above
/// `neighbor_floor`.
pub fn plateau_track(
    result: &EnsembleResult,
    tau: f64,
    t_start: f64,
    neighbor_floor: f64,
) -> Result<PlateauTrack, ObservableError> {
    let cfg = &result.meta.lattice;
    let site = cfg.dissipation_site;
    let sink = result.site_series(site);
    let neighbors = result.neighbor_mean(site);
    let mut track = PlateauTrack {
        times: Vec::new(),
        measured: Vec::new(),
        predicted: Vec::new(),
        max_rel_error: 0.0,
        mean_rel_error: 0.0,
    };
    for (k, &t) in result.times.iter().enumerate() {
        if t < t_start {
            continue;
        }
        if neighbors[k] <= neighbor_floor {
            break;
        }
        let pred = crate::stochastic::quasi_stationary_occupation(neighbors[k], cfg.hopping, tau, cfg.gamma);
        track.times.push(t);
        track.measured.push(sink[k]);
        track.predicted.push(pred);
    }
    if track.times.is_empty() {
        return Err(ObservableError::Insufficient(
            "no samples with undepleted neighbours".into(),
        ));
    }
    let errs: Vec<f64> = track
        .measured
        .iter()
        .zip(&track.predicted)
        .map(|(m, p)| ((m - p) / p).abs())
        .collect();
    track.max_rel_error = errs.iter().cloned().fold(0.0, f64::max);
    track.mean_rel_error = errs.iter().sum::<f64>() / errs.len() as f64;
    Ok(track)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::integrator::{propagate, IntegratorConfig, Storage};
    use crate::model::TrajectoryState;

    fn meta(cfg: LatticeConfig) -> EnsembleMeta {
        EnsembleMeta {
            root_seed: 1,
            sampler: Sampler::ZoneEdgeBec,
            nbar: 700.0,
            lattice: cfg,
            step: 0.01,
            sample_every: 1.0,
            t_final: 1.0,
        }
    }

    fn constant_result(value: f64, sites: usize) -> EnsembleResult {
        let times = vec![0.0, 1.0, 2.0];
        EnsembleResult::from_members(
            times,
            sites,
            vec![vec![value; 3 * sites]],
            meta(LatticeConfig::new(sites, 1.0, 4.0)),
        )
    }

    #[test]
    fn depleted_total_limits() {
        assert!(depleted_total(&constant_result(1.0, 20), 700.0)
            .iter()
            .all(|&x| x == 0.0));
        assert!(depleted_total(&constant_result(0.0, 20), 700.0)
            .iter()
            .all(|&x| x == 14000.0));
    }

    #[test]
    fn xi_of_carriers() {
        let cfg = LatticeConfig::new(6, 1.0, 4.0);
        let icfg = IntegratorConfig::new(0.01, 0.01, 0.01).with_storage(Storage::Full);
        let edge = TrajectoryState::new(
            (0..6)
                .map(|l| Complex64::new(if l % 2 == 0 { 1.0 } else { -1.0 }, 0.0))
                .collect(),
        );
        let rec = propagate(&edge, &cfg, &icfg).unwrap();
        // l = 2: xi = 2 (-1)^(l+1) = -2
        assert_eq!(xi_series(&rec, 2).unwrap()[0], Complex64::new(-2.0, 0.0));
        assert_eq!(xi_series(&rec, 3).unwrap()[0], Complex64::new(2.0, 0.0));
        let ground = propagate(&TrajectoryState::bloch_wave(6, 0), &cfg, &icfg).unwrap();
        assert_eq!(xi_series(&ground, 0).unwrap()[0], Complex64::new(2.0, 0.0));
        let occ_only = propagate(&edge, &cfg, &IntegratorConfig::new(0.01, 0.01, 0.01)).unwrap();
        assert_eq!(xi_series(&occ_only, 0), Err(ObservableError::OccupationsOnly));
    }

    #[test]
    fn autocorrelation_of_constant() {
        let c = Complex64::new(0.6, -1.2);
        let est = autocorrelation(&[vec![c; 50], vec![c; 50]], 0.1, 10).unwrap();
        for k in 0..=10 {
            assert!((est.value(k) - Complex64::new(c.norm_sqr(), 0.0)).norm() < 1e-14);
        }
    }

    #[test]
    fn noiseless_exponential_fit() {
        let mut est = exponential_correlation(2.0, 0.5, 0.01, 200);
        let fit = fit_exponential(&mut est).unwrap();
        assert!((fit.amplitude - 2.0).abs() < 1e-6);
        assert!((fit.tau - 0.5).abs() < 1e-6);
    }

    #[test]
    fn integrated_time_of_exponential() {
        let est = exponential_correlation(2.0, 0.5, 0.001, 4000);
        let tau = integrated_correlation_time(&est).unwrap();
        assert!((tau - 0.95 * 0.5).abs() < 1e-3, "{tau}");
        // a rotating phase shortens the integrated time, not the envelope
        let lags: Vec<f64> = (0..=4000).map(|k| k as f64 * 0.001).collect();
        let vals: Vec<Complex64> = lags
            .iter()
            .map(|&s| Complex64::from_polar(2.0 * (-s / 0.5).exp(), 4.0 * s))
            .collect();
        let rot = integrated_correlation_time(&CorrelationEstimate::from_values(lags, &vals)).unwrap();
        let exact = 0.5 / (1.0 + 4.0);
        assert!((rot - exact).abs() < 0.02, "{rot} vs {exact}");
    }

    #[test]
    fn fit_rejects_degenerate_input() {
        let mut zero = CorrelationEstimate::from_values(vec![0.0, 1.0], &[Complex64::new(0.0, 0.0); 2]);
        assert!(matches!(
            fit_exponential(&mut zero),
            Err(ObservableError::NonPositiveVariance(_))
        ));
        let mut fast = exponential_correlation(1.0, 0.01, 0.01, 100);
        assert!(matches!(
            fit_exponential(&mut fast),
            Err(ObservableError::TooFewLags { .. })
        ));
    }

    /// Occupations where site `d +- j` empties at `t_j = ((2j + 1) / c)^3`,
    /// so the depleted count is `2j + 1` between successive times.
    fn synthetic_front(sites: usize, c: f64, dt: f64, t_final: f64) -> EnsembleResult {
        let d = sites / 2;
        let times: Vec<f64> = (0..=(t_final / dt) as usize).map(|k| k as f64 * dt).collect();
        let mut table = Vec::with_capacity(times.len() * sites);
        for &t in &times {
            for l in 0..sites {
                let dist = (l as i64 - d as i64).unsigned_abs() as usize;
                let dist = dist.min(sites - dist);
                let t_dep = ((2 * dist + 1) as f64 / c).powi(3);
                table.push(if t >= t_dep { 0.0 } else { 1.0 });
            }
        }
        EnsembleResult::from_members(
            times,
            sites,
            vec![table],
            meta(LatticeConfig::new(sites, 1.0, 4.0).with_gamma(0.1)),
        )
    }

    #[test]
    fn front_on_synthetic_cube_root() {
        let res = synthetic_front(20, 0.5, 1.0, 40_000.0);
        let fit = depletion_front(&res, 0.5).unwrap();
        assert!((fit.exponent - 1.0 / 3.0).abs() < 0.01, "{}", fit.exponent);
        assert_eq!(fit.fit_window, (3, 16));
        // the central site goes first
        let first = fit.depleted_count.iter().position(|&c| c > 0).unwrap();
        assert_eq!(fit.depleted_count[first], 1);
    }

    #[test]
    fn front_without_window_fails() {
        let res = synthetic_front(20, 0.5, 1.0, 100.0);
        assert!(matches!(
            depletion_front(&res, 0.5),
            Err(ObservableError::NoScalingWindow { .. })
        ));
    }

    #[test]
    fn power_law_round_trip() {
        let x: Vec<f64> = (1..50).map(|i| i as f64 * 3.0).collect();
        let y: Vec<f64> = x.iter().map(|v| 1.7 * v.powf(1.0 / 3.0)).collect();
        let f = fit_power_law(&x, &y).unwrap();
        assert!((f.exponent - 1.0 / 3.0).abs() < 1e-12);
        assert!((f.prefactor - 1.7).abs() < 1e-12);
    }

    #[test]
    fn steady_current_on_linear_and_flat_data() {
        let sites = 4;
        let times: Vec<f64> = (0..60).map(|k| k as f64).collect();
        // total depletion grows linearly: site 0 loses 0.01 per unit time
        let table: Vec<f64> = times
            .iter()
            .flat_map(|&t| vec![1.0 - 0.01 * t, 1.0, 1.0, 1.0])
            .collect();
        let res = EnsembleResult::from_members(
            times.clone(),
            sites,
            vec![table],
            meta(LatticeConfig::new(sites, 1.0, 4.0)),
        );
        let s = steady_current_check(&res, 100.0).unwrap();
        assert!((s.slope - 1.0).abs() < 1e-10);
        assert!(s.steady && s.slope_drift < 1e-8);
        let wobble: Vec<f64> = times
            .iter()
            .flat_map(|&t| vec![0.5 + 0.01 * (t * 1.7).sin(), 1.0, 1.0, 1.0])
            .collect();
        let res = EnsembleResult::from_members(times, sites, vec![wobble], meta(LatticeConfig::new(sites, 1.0, 4.0)));
        assert!(!steady_current_check(&res, 100.0).unwrap().steady);
    }

    #[test]
    fn plateau_track_stops_when_neighbours_deplete() {
        let sites = 4;
        let cfg = LatticeConfig::new(sites, 1.0, 4.0).with_gamma(0.1);
        let times: Vec<f64> = (0..10).map(|k| k as f64).collect();
        // site 2 is the sink; neighbours 1 and 3 decay linearly
        let table: Vec<f64> = times
            .iter()
            .flat_map(|&t| {
                let nb = 1.0 - 0.05 * t;
                vec![1.0, nb, 0.5 * nb, nb]
            })
            .collect();
        let res = EnsembleResult::from_members(times, sites, vec![table], meta(cfg));
        // tau = 0.1 -> prediction 0.5 * n_nb exactly
        let track = plateau_track(&res, 0.1, 0.0, 0.8).unwrap();
        assert_eq!(track.times.len(), 4);
        assert!(track.max_rel_error < 1e-12);
    }
}
