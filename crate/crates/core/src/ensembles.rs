//! Initial-condition ensembles and seeded ensemble execution.
//!
//! Trajectory `i` draws its initial state from `rng::stream(root_seed, i)`,
//! so adding trajectories never changes existing ones. Trajectories are
//! processed in fixed blocks and reduced in index order, which makes every
//! ensemble mean independent of the number of workers.

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::integrator::{propagate, IntegratorConfig, IntegratorError, Storage};
use crate::model::{LatticeConfig, ModelError, TrajectoryState};
use crate::observables::{EnsembleMeta, EnsembleResult};
use crate::rng::{self, Stream};
use crate::stats::pairwise_sum;

/// Trajectories per reduction block.
const BLOCK: usize = 32;

/// Maximum tolerated fraction of aborted trajectories.
pub const MAX_FAILURE_FRACTION: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum EnsembleError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Integrator(#[from] IntegratorError),
    #[error("invalid ensemble setting: {0}")]
    Config(String),
    #[error("{failed} of {total} trajectories aborted (first: trajectory {first_index}: {first_error})")]
    TooManyFailures {
        failed: usize,
        total: usize,
        first_index: u64,
        first_error: IntegratorError,
    },
    #[error("failed to build worker pool: {0}")]
    Pool(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampler {
    ZoneEdgeBec,
    GroundStateBec,
    UniformHypersphere,
}

impl std::str::FromStr for Sampler {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "zone_edge_bec" => Ok(Sampler::ZoneEdgeBec),
            "ground_state_bec" => Ok(Sampler::GroundStateBec),
            "uniform_hypersphere" => Ok(Sampler::UniformHypersphere),
            other => Err(format!(
                "unknown sampler `{other}` (expected zone_edge_bec|ground_state_bec|uniform_hypersphere)"
            )),
        }
    }
}

impl std::fmt::Display for Sampler {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Sampler::ZoneEdgeBec => "zone_edge_bec",
            Sampler::GroundStateBec => "ground_state_bec",
            Sampler::UniformHypersphere => "uniform_hypersphere",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleConfig {
    pub n_traj: usize,
    pub root_seed: u64,
    pub sampler: Sampler,
    pub nbar: f64,
    /// Worker threads; `0` uses the global rayon pool.
    pub workers: usize,
    /// Keep every trajectory's occupations (needed for bootstrap error bars).
    pub keep_members: bool,
}

impl EnsembleConfig {
    pub fn new(n_traj: usize, root_seed: u64, sampler: Sampler) -> Self {
        EnsembleConfig {
            n_traj,
            root_seed,
            sampler,
            nbar: 700.0,
            workers: 0,
            keep_members: false,
        }
    }

    pub fn with_nbar(mut self, nbar: f64) -> Self {
        self.nbar = nbar;
        self
    }

    pub fn with_workers(mut self, workers: usize) -> Self {
        self.workers = workers;
        self
    }

    pub fn keeping_members(mut self) -> Self {
        self.keep_members = true;
        self
    }

    pub fn sample(&self, sites: usize, rng: &mut Stream) -> TrajectoryState {
        match self.sampler {
            Sampler::ZoneEdgeBec => sample_zone_edge_bec(sites, self.nbar, rng),
            Sampler::GroundStateBec => sample_ground_state_bec(sites, self.nbar, rng),
            Sampler::UniformHypersphere => sample_uniform_hypersphere(sites, rng),
        }
    }

    /// Initial state of trajectory `index`.
    pub fn initial_state(&self, sites: usize, index: u64) -> TrajectoryState {
        self.sample(sites, &mut rng::stream(self.root_seed, index))
    }
}

fn bec_with_carrier(sites: usize, nbar: f64, rng: &mut Stream, carrier: impl Fn(usize) -> f64) -> TrajectoryState {
    // per-quadrature variance 1/(4 nbar)
    let scale = 0.5 / nbar.sqrt();
    TrajectoryState::new(
        (0..sites)
            .map(|l| Complex64::new(carrier(l), 0.0) + rng::complex_normal(rng) * scale)
            .collect(),
    )
}

/// Condensate at the Brillouin-zone edge, `a_l = (-1)^l` plus Wigner noise.
pub fn sample_zone_edge_bec(sites: usize, nbar: f64, rng: &mut Stream) -> TrajectoryState {
    bec_with_carrier(sites, nbar, rng, |l| if l % 2 == 0 { 1.0 } else { -1.0 })
}

/// Condensate in the band minimum, `a_l = 1` plus Wigner noise.
pub fn sample_ground_state_bec(sites: usize, nbar: f64, rng: &mut Stream) -> TrajectoryState {
    bec_with_carrier(sites, nbar, rng, |_| 1.0)
}

/// Uniform point on the sphere `sum |a_l|^2 = L`.
pub fn sample_uniform_hypersphere(sites: usize, rng: &mut Stream) -> TrajectoryState {
    loop {
        let a: Vec<Complex64> = (0..sites).map(|_| rng::complex_normal(rng)).collect();
        let norm: f64 = a.iter().map(|z| z.norm_sqr()).sum();
        if norm > 0.0 {
            let scale = (sites as f64 / norm).sqrt();
            return TrajectoryState::new(a.into_iter().map(|z| z * scale).collect());
        }
    }
}

/// Propagates `n_traj` sampled trajectories and returns per-site mean
/// occupations with standard errors.
pub fn run_ensemble(
    ecfg: &EnsembleConfig,
    cfg: &LatticeConfig,
    icfg: &IntegratorConfig,
) -> Result<EnsembleResult, EnsembleError> {
    run_ensemble_with(ecfg, cfg, icfg, |_, _| cfg.clone())
}

/// As [`run_ensemble`], but trajectory `i` runs under `lattice_for(i, cfg)`.
/// Used by tests that need per-trajectory variations; the lattice size must
/// not change.
pub(crate) fn run_ensemble_with<F>(
    ecfg: &EnsembleConfig,
    cfg: &LatticeConfig,
    icfg: &IntegratorConfig,
    lattice_for: F,
) -> Result<EnsembleResult, EnsembleError>
where
    F: Fn(u64, &LatticeConfig) -> LatticeConfig + Sync,
{
    cfg.validate()?;
    icfg.schedule()?;
    if ecfg.n_traj == 0 {
        return Err(EnsembleError::Config("n_traj must be at least 1".into()));
    }
    if !(ecfg.nbar > 0.0) {
        return Err(EnsembleError::Config(format!(
            "nbar must be positive, got {}",
            ecfg.nbar
        )));
    }
    let icfg = IntegratorConfig {
        storage: Storage::Occupations,
        ..*icfg
    };
    let run_block = |start: usize| -> Vec<(u64, Result<Vec<f64>, IntegratorError>)> {
        let end = (start + BLOCK).min(ecfg.n_traj);
        (start..end)
            .into_par_iter()
            .map(|i| {
                let index = i as u64;
                let init = ecfg.initial_state(cfg.sites, index);
                let lattice = lattice_for(index, cfg);
                (index, propagate(&init, &lattice, &icfg).map(|r| r.occupations))
            })
            .collect()
    };

    let pool = if ecfg.workers > 0 {
        Some(
            rayon::ThreadPoolBuilder::new()
                .num_threads(ecfg.workers)
                .build()
                .map_err(|e| EnsembleError::Pool(e.to_string()))?,
        )
    } else {
        None
    };

    let mut times: Option<Vec<f64>> = None;
    let mut block_sums: Vec<Vec<f64>> = Vec::new();
    let mut block_sq: Vec<Vec<f64>> = Vec::new();
    let mut members: Vec<Vec<f64>> = Vec::new();
    let mut failed: Vec<(u64, IntegratorError)> = Vec::new();
    let mut ok = 0usize;

    for start in (0..ecfg.n_traj).step_by(BLOCK) {
        let block = match &pool {
            Some(p) => p.install(|| run_block(start)),
            None => run_block(start),
        };
        let mut good: Vec<Vec<f64>> = Vec::with_capacity(block.len());
        for (index, res) in block {
            match res {
                Ok(occ) => good.push(occ),
                Err(e) => failed.push((index, e)),
            }
        }
        if times.is_none() && !good.is_empty() {
            // sample grid is identical for all trajectories
            let (per_sample, total) = icfg.schedule()?;
            let h = icfg.step;
            times = Some((0..=total / per_sample).map(|k| (k * per_sample) as f64 * h).collect());
        }
        if good.is_empty() {
            continue;
        }
        let width = good[0].len();
        let mut sums = vec![0.0; width];
        let mut sq = vec![0.0; width];
        let mut column = vec![0.0; good.len()];
        for j in 0..width {
            for (c, m) in column.iter_mut().zip(&good) {
                *c = m[j];
            }
            sums[j] = pairwise_sum(&column);
            column.iter_mut().for_each(|c| *c *= *c);
            sq[j] = pairwise_sum(&column);
        }
        ok += good.len();
        block_sums.push(sums);
        block_sq.push(sq);
        if ecfg.keep_members {
            members.extend(good);
        }
    }

    if !failed.is_empty() && failed.len() as f64 > MAX_FAILURE_FRACTION * ecfg.n_traj as f64 {
        let (first_index, first_error) = failed.swap_remove(0);
        return Err(EnsembleError::TooManyFailures {
            failed: failed.len() + 1,
            total: ecfg.n_traj,
            first_index,
            first_error,
        });
    }
    for (index, e) in &failed {
        log::warn!("trajectory {index} aborted: {e}");
    }
    let times = times.unwrap_or_default();
    let width = times.len() * cfg.sites;
    let reduce = |parts: &[Vec<f64>]| -> Vec<f64> {
        let mut col = vec![0.0; parts.len()];
        (0..width)
            .map(|j| {
                for (c, p) in col.iter_mut().zip(parts) {
                    *c = p[j];
                }
                pairwise_sum(&col)
            })
            .collect()
    };
    let sums = reduce(&block_sums);
    let sq = reduce(&block_sq);
    let nf = ok as f64;
    let n: Vec<f64> = sums.iter().map(|s| s / nf).collect();
    let stderr: Vec<f64> = if ok > 1 {
        sums.iter()
            .zip(&sq)
            .map(|(s, q)| {
                let var = ((q - s * s / nf) / (nf - 1.0)).max(0.0);
                (var / nf).sqrt()
            })
            .collect()
    } else {
        vec![0.0; width]
    };
    Ok(EnsembleResult {
        sites: cfg.sites,
        times,
        n,
        stderr,
        n_traj: ok,
        failed: failed.into_iter().map(|(i, e)| (i, e.to_string())).collect(),
        members: if ecfg.keep_members { Some(members) } else { None },
        meta: EnsembleMeta {
            root_seed: ecfg.root_seed,
            sampler: ecfg.sampler,
            nbar: ecfg.nbar,
            lattice: cfg.clone(),
            step: icfg.step,
            sample_every: icfg.sample_every,
            t_final: icfg.t_final,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::hamiltonian_energy;
    use crate::stats::{mean, variance};

    #[test]
    fn zone_edge_noise_free_limit() {
        let s = sample_zone_edge_bec(6, f64::INFINITY, &mut rng::stream(1, 0));
        for (l, z) in s.a.iter().enumerate() {
            assert_eq!(*z, Complex64::new(if l % 2 == 0 { 1.0 } else { -1.0 }, 0.0));
        }
        let g = sample_ground_state_bec(6, f64::INFINITY, &mut rng::stream(1, 0));
        assert!(g.a.iter().all(|z| *z == Complex64::new(1.0, 0.0)));
    }

    #[test]
    fn same_stream_same_state() {
        let e = EnsembleConfig::new(10, 42, Sampler::ZoneEdgeBec);
        assert_eq!(e.initial_state(8, 5), e.initial_state(8, 5));
        assert_ne!(e.initial_state(8, 5), e.initial_state(8, 6));
    }

    #[test]
    fn zone_edge_moments() {
        // 1e5 draws of one site; quadrature variance 1/(4 nbar)
        let nbar = 700.0;
        let draws = 100_000;
        let mut re = Vec::with_capacity(draws);
        let mut im = Vec::with_capacity(draws);
        let mut occ = Vec::with_capacity(draws);
        for i in 0..draws {
            let s = sample_zone_edge_bec(2, nbar, &mut rng::stream(3, i as u64));
            re.push(s.a[1].re);
            im.push(s.a[1].im);
            occ.push(s.a[1].norm_sqr());
        }
        let var = 1.0 / (4.0 * nbar);
        let se_mean = (var / draws as f64).sqrt();
        assert!((mean(&re) + 1.0).abs() < 3.0 * se_mean);
        assert!(mean(&im).abs() < 3.0 * se_mean);
        // standard error of a Gaussian sample variance: var * sqrt(2/(n-1))
        let se_var = var * (2.0 / (draws as f64 - 1.0)).sqrt();
        assert!((variance(&re) - var).abs() < 3.0 * se_var);
        assert!((variance(&im) - var).abs() < 3.0 * se_var);
        let expected_occ = 1.0 + 1.0 / (2.0 * nbar);
        let se_occ = (variance(&occ) / draws as f64).sqrt();
        assert!((mean(&occ) - expected_occ).abs() < 3.0 * se_occ);
    }

    #[test]
    fn hypersphere_constraint_and_energy_bounds() {
        let cfg = LatticeConfig::new(6, 1.0, 4.0);
        let mut rng = rng::stream(9, 0);
        let mut energies = Vec::new();
        for _ in 0..2000 {
            let s = sample_uniform_hypersphere(6, &mut rng);
            assert!((s.norm() - 6.0).abs() < 1e-12);
            energies.push(hamiltonian_energy(&s, &cfg).unwrap());
        }
        let m = mean(&energies);
        let lo = energies.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = energies.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert!(m.is_finite() && lo < m && m < hi);
    }

    #[test]
    fn hypersphere_marginal_is_beta() {
        // |a_1|^2 / L ~ Beta(1, L-1), CDF 1 - (1-x)^(L-1)
        let sites = 6;
        let draws = 100_000;
        let mut rng = rng::stream(11, 0);
        let mut x: Vec<f64> = (0..draws)
            .map(|_| sample_uniform_hypersphere(sites, &mut rng).a[1].norm_sqr() / sites as f64)
            .collect();
        x.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = draws as f64;
        let ks = x
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let cdf = 1.0 - (1.0 - v).powi(sites as i32 - 1);
                (cdf - i as f64 / n).abs().max((cdf - (i + 1) as f64 / n).abs())
            })
            .fold(0.0, f64::max);
        assert!(ks < 0.01, "KS distance {ks}");
    }

    fn small_run(n_traj: usize, workers: usize) -> EnsembleResult {
        let cfg = LatticeConfig::new(6, 1.0, 4.0).with_gamma(0.1);
        let ecfg = EnsembleConfig::new(n_traj, 5, Sampler::ZoneEdgeBec)
            .with_workers(workers)
            .keeping_members();
        run_ensemble(&ecfg, &cfg, &IntegratorConfig::new(1e-2, 0.5, 5.0)).unwrap()
    }

    #[test]
    fn single_trajectory_matches_propagate() {
        let res = small_run(1, 1);
        let cfg = LatticeConfig::new(6, 1.0, 4.0).with_gamma(0.1);
        let init = EnsembleConfig::new(1, 5, Sampler::ZoneEdgeBec).initial_state(6, 0);
        let rec = propagate(&init, &cfg, &IntegratorConfig::new(1e-2, 0.5, 5.0)).unwrap();
        assert_eq!(res.n, rec.occupations);
        assert_eq!(res.times, rec.times);
    }

    #[test]
    fn worker_count_and_growth_do_not_change_results() {
        let a = small_run(70, 1);
        let b = small_run(70, 3);
        assert_eq!(a.n, b.n);
        assert_eq!(a.stderr, b.stderr);
        let c = small_run(71, 2);
        assert_eq!(&c.members.as_ref().unwrap()[..70], &a.members.as_ref().unwrap()[..]);
    }

    #[test]
    fn rejects_empty_ensemble() {
        let cfg = LatticeConfig::new(6, 1.0, 4.0);
        let ecfg = EnsembleConfig::new(0, 5, Sampler::ZoneEdgeBec);
        assert!(matches!(
            run_ensemble(&ecfg, &cfg, &IntegratorConfig::default()),
            Err(EnsembleError::Config(_))
        ));
    }

    #[test]
    fn failure_policy() {
        let cfg = LatticeConfig::new(2, 1.0, 4.0);
        let icfg = IntegratorConfig::new(1e-2, 0.5, 2.0);
        let ecfg = EnsembleConfig::new(10, 1, Sampler::GroundStateBec);
        // an absurd interaction on one trajectory blows it up
        let res = run_ensemble_with(&ecfg, &cfg, &icfg, |i, c| {
            let mut c = c.clone();
            if i == 3 {
                c.interaction = 1e6;
            }
            c
        });
        assert!(matches!(res, Err(EnsembleError::TooManyFailures { failed: 1, .. })));
    }
}
