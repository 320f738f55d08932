//! C ABI over the simulator.
//!
//! Conventions:
//!
//! * every fallible function returns a [`BhdStatus`]; on failure a message
//!   is kept per thread and read with [`bhd_last_error_message`];
//! * objects are opaque handles created by `*_new` / `bhd_propagate` /
//!   `bhd_run_ensemble` and released with the matching `*_free`;
//! * complex amplitudes are interleaved `re, im` pairs, so a state of `L`
//!   sites occupies `2 L` doubles;
//! * array getters copy into caller buffers and fail with
//!   `BHD_STATUS_BUFFER_TOO_SMALL` when `capacity` is short.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use bh_depletion::ensembles::run_ensemble;
use bh_depletion::experiments::{self, validate_config};
use bh_depletion::integrator::propagate;
use bh_depletion::model::{eom_rhs, hamiltonian_energy};
use bh_depletion::stochastic::stationary_occupation;
use bh_depletion::{
    Boundary, Complex64, EnsembleConfig, EnsembleResult, IntegratorConfig, LatticeConfig, Sampler, TrajectoryRecord,
    TrajectoryState,
};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BhdStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    BufferTooSmall = 3,
    Model = 4,
    Integrator = 5,
    Ensemble = 6,
    Stochastic = 7,
    Config = 8,
    Io = 9,
    Panic = 10,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BhdSampler {
    ZoneEdgeBec = 0,
    GroundStateBec = 1,
    UniformHypersphere = 2,
}

/// Opaque lattice configuration.
pub struct BhdLattice(LatticeConfig);

/// Opaque single-trajectory record.
pub struct BhdTrajectory(TrajectoryRecord);

/// Opaque ensemble result.
pub struct BhdEnsemble(EnsembleResult);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).expect("nul bytes removed"));
}

type Outcome = Result<(), (BhdStatus, String)>;

fn fail<T>(status: BhdStatus, msg: impl Into<String>) -> Result<T, (BhdStatus, String)> {
    Err((status, msg.into()))
}

fn guard(f: impl FnOnce() -> Outcome) -> BhdStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            BhdStatus::Ok
        }
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            BhdStatus::Panic
        }
    }
}

unsafe fn deref<'a, T>(p: *const T, name: &str) -> Result<&'a T, (BhdStatus, String)> {
    p.as_ref().ok_or((BhdStatus::NullPointer, format!("`{name}` is null")))
}

unsafe fn deref_mut<'a, T>(p: *mut T, name: &str) -> Result<&'a mut T, (BhdStatus, String)> {
    p.as_mut().ok_or((BhdStatus::NullPointer, format!("`{name}` is null")))
}

unsafe fn read_state(data: *const f64, sites: usize) -> Result<Vec<Complex64>, (BhdStatus, String)> {
    if data.is_null() {
        return fail(BhdStatus::NullPointer, "`state` is null");
    }
    let raw = std::slice::from_raw_parts(data, 2 * sites);
    Ok(raw.chunks_exact(2).map(|c| Complex64::new(c[0], c[1])).collect())
}

unsafe fn write_slice(src: &[f64], out: *mut f64, capacity: usize) -> Outcome {
    if out.is_null() {
        return fail(BhdStatus::NullPointer, "`out` is null");
    }
    if capacity < src.len() {
        return fail(
            BhdStatus::BufferTooSmall,
            format!("buffer holds {capacity} values, need {}", src.len()),
        );
    }
    ptr::copy_nonoverlapping(src.as_ptr(), out, src.len());
    Ok(())
}

unsafe fn c_str<'a>(s: *const c_char, name: &str) -> Result<&'a str, (BhdStatus, String)> {
    if s.is_null() {
        return fail(BhdStatus::NullPointer, format!("`{name}` is null"));
    }
    CStr::from_ptr(s)
        .to_str()
        .map_err(|_| (BhdStatus::InvalidArgument, format!("`{name}` is not valid UTF-8")))
}

/// Message of the last failed call on this thread; empty after success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn bhd_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn bhd_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Periodic chain of `sites` sites with hopping `hopping` and interaction
/// `interaction`; other parameters take their defaults.
///
/// # Safety
/// `out` must be a valid pointer to write a handle into.
#[no_mangle]
pub unsafe extern "C" fn bhd_lattice_new(
    sites: usize,
    hopping: f64,
    interaction: f64,
    out: *mut *mut BhdLattice,
) -> BhdStatus {
    guard(|| {
        let out = deref_mut(out, "out")?;
        let cfg = LatticeConfig::new(sites, hopping, interaction);
        cfg.validate().map_err(|e| (BhdStatus::Model, e.to_string()))?;
        *out = Box::into_raw(Box::new(BhdLattice(cfg)));
        Ok(())
    })
}

/// # Safety
/// `lattice` must come from [`bhd_lattice_new`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn bhd_lattice_free(lattice: *mut BhdLattice) {
    if !lattice.is_null() {
        drop(Box::from_raw(lattice));
    }
}

unsafe fn update(lattice: *mut BhdLattice, f: impl FnOnce(&mut LatticeConfig)) -> BhdStatus {
    guard(|| {
        let l = deref_mut(lattice, "lattice")?;
        let mut next = l.0.clone();
        f(&mut next);
        next.validate().map_err(|e| (BhdStatus::Model, e.to_string()))?;
        l.0 = next;
        Ok(())
    })
}

/// # Safety
/// `lattice` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn bhd_lattice_set_gamma(lattice: *mut BhdLattice, gamma: f64) -> BhdStatus {
    update(lattice, |c| c.gamma = gamma)
}

/// # Safety
/// `lattice` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn bhd_lattice_set_omega(lattice: *mut BhdLattice, omega: f64) -> BhdStatus {
    update(lattice, |c| c.omega = omega)
}

/// Open chain when `open` is nonzero, periodic otherwise.
///
/// # Safety
/// `lattice` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn bhd_lattice_set_open(lattice: *mut BhdLattice, open: i32) -> BhdStatus {
    update(lattice, |c| {
        c.boundary = if open != 0 { Boundary::Open } else { Boundary::Periodic }
    })
}

/// # Safety
/// `lattice` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn bhd_lattice_set_bond_factor(lattice: *mut BhdLattice, bond: usize, factor: f64) -> BhdStatus {
    let sites = lattice.as_ref().map(|l| l.0.sites).unwrap_or(0);
    if !lattice.is_null() && bond >= sites {
        set_error(format!("bond {bond} out of range for L = {sites}"));
        return BhdStatus::InvalidArgument;
    }
    update(lattice, |c| c.bond_factors[bond] = factor)
}

/// Weak links of strength `factor` placed `distance` sites from the
/// dissipated site on both sides.
///
/// # Safety
/// `lattice` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn bhd_lattice_set_weak_links(
    lattice: *mut BhdLattice,
    distance: usize,
    factor: f64,
) -> BhdStatus {
    let sites = lattice.as_ref().map(|l| l.0.sites).unwrap_or(0);
    if !lattice.is_null() && (distance == 0 || distance > sites / 2) {
        set_error(format!("distance {distance} must be in 1..={}", sites / 2));
        return BhdStatus::InvalidArgument;
    }
    update(lattice, |c| *c = c.clone().with_symmetric_weak_links(distance, factor))
}

/// Classical energy of `state` (`2 * sites` doubles).
///
/// # Safety
/// `state` must point to `2 * sites` doubles and `out` to one double.
#[no_mangle]
pub unsafe extern "C" fn bhd_energy(
    lattice: *const BhdLattice,
    state: *const f64,
    sites: usize,
    out: *mut f64,
) -> BhdStatus {
    guard(|| {
        let l = deref(lattice, "lattice")?;
        let out = deref_mut(out, "out")?;
        let s = TrajectoryState::new(read_state(state, sites)?);
        *out = hamiltonian_energy(&s, &l.0).map_err(|e| (BhdStatus::Model, e.to_string()))?;
        Ok(())
    })
}

/// Time derivative of `state`, written to `out` (`2 * sites` doubles).
///
/// # Safety
/// `state` and `out` must each point to `2 * sites` doubles.
#[no_mangle]
pub unsafe extern "C" fn bhd_rhs(
    lattice: *const BhdLattice,
    state: *const f64,
    sites: usize,
    out: *mut f64,
) -> BhdStatus {
    guard(|| {
        let l = deref(lattice, "lattice")?;
        let s = TrajectoryState::new(read_state(state, sites)?);
        let d = eom_rhs(&s, &l.0).map_err(|e| (BhdStatus::Model, e.to_string()))?;
        let flat: Vec<f64> = d.iter().flat_map(|z| [z.re, z.im]).collect();
        write_slice(&flat, out, 2 * sites)
    })
}

/// Propagates `state` from `t = 0` to `t_final` with RK4 step `step`,
/// sampling occupations every `sample_every`.
///
/// # Safety
/// `state` must point to `2 * sites` doubles and `out` be writable.
#[no_mangle]
pub unsafe extern "C" fn bhd_propagate(
    lattice: *const BhdLattice,
    state: *const f64,
    sites: usize,
    step: f64,
    sample_every: f64,
    t_final: f64,
    out: *mut *mut BhdTrajectory,
) -> BhdStatus {
    guard(|| {
        let l = deref(lattice, "lattice")?;
        let out = deref_mut(out, "out")?;
        let s = TrajectoryState::new(read_state(state, sites)?);
        let rec = propagate(&s, &l.0, &IntegratorConfig::new(step, sample_every, t_final))
            .map_err(|e| (BhdStatus::Integrator, e.to_string()))?;
        *out = Box::into_raw(Box::new(BhdTrajectory(rec)));
        Ok(())
    })
}

/// # Safety
/// `traj` must come from [`bhd_propagate`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn bhd_trajectory_free(traj: *mut BhdTrajectory) {
    if !traj.is_null() {
        drop(Box::from_raw(traj));
    }
}

/// Number of samples and sites of a trajectory.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn bhd_trajectory_shape(
    traj: *const BhdTrajectory,
    samples: *mut usize,
    sites: *mut usize,
) -> BhdStatus {
    guard(|| {
        let t = deref(traj, "traj")?;
        *deref_mut(samples, "samples")? = t.0.len();
        *deref_mut(sites, "sites")? = t.0.sites;
        Ok(())
    })
}

/// # Safety
/// `out` must hold `capacity` doubles.
#[no_mangle]
pub unsafe extern "C" fn bhd_trajectory_times(traj: *const BhdTrajectory, out: *mut f64, capacity: usize) -> BhdStatus {
    guard(|| write_slice(&deref(traj, "traj")?.0.times, out, capacity))
}

/// Row-major `samples x sites` occupations.
///
/// # Safety
/// `out` must hold `capacity` doubles.
#[no_mangle]
pub unsafe extern "C" fn bhd_trajectory_occupations(
    traj: *const BhdTrajectory,
    out: *mut f64,
    capacity: usize,
) -> BhdStatus {
    guard(|| write_slice(&deref(traj, "traj")?.0.occupations, out, capacity))
}

/// Final state as `2 * sites` doubles.
///
/// # Safety
/// `out` must hold `capacity` doubles.
#[no_mangle]
pub unsafe extern "C" fn bhd_trajectory_final_state(
    traj: *const BhdTrajectory,
    out: *mut f64,
    capacity: usize,
) -> BhdStatus {
    guard(|| {
        let t = deref(traj, "traj")?;
        let flat: Vec<f64> = t.0.final_state.a.iter().flat_map(|z| [z.re, z.im]).collect();
        write_slice(&flat, out, capacity)
    })
}

/// Runs `n_traj` seeded trajectories on `workers` threads (0 for all).
/// Results do not depend on `workers`.
///
/// # Safety
/// `lattice` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn bhd_run_ensemble(
    lattice: *const BhdLattice,
    sampler: BhdSampler,
    n_traj: usize,
    root_seed: u64,
    step: f64,
    sample_every: f64,
    t_final: f64,
    workers: usize,
    out: *mut *mut BhdEnsemble,
) -> BhdStatus {
    guard(|| {
        let l = deref(lattice, "lattice")?;
        let out = deref_mut(out, "out")?;
        let sampler = match sampler {
            BhdSampler::ZoneEdgeBec => Sampler::ZoneEdgeBec,
            BhdSampler::GroundStateBec => Sampler::GroundStateBec,
            BhdSampler::UniformHypersphere => Sampler::UniformHypersphere,
        };
        let ecfg = EnsembleConfig::new(n_traj, root_seed, sampler)
            .with_nbar(l.0.nbar)
            .with_workers(workers);
        let res = run_ensemble(&ecfg, &l.0, &IntegratorConfig::new(step, sample_every, t_final))
            .map_err(|e| (BhdStatus::Ensemble, e.to_string()))?;
        *out = Box::into_raw(Box::new(BhdEnsemble(res)));
        Ok(())
    })
}

/// # Safety
/// `ens` must come from [`bhd_run_ensemble`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn bhd_ensemble_free(ens: *mut BhdEnsemble) {
    if !ens.is_null() {
        drop(Box::from_raw(ens));
    }
}

/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn bhd_ensemble_shape(
    ens: *const BhdEnsemble,
    samples: *mut usize,
    sites: *mut usize,
) -> BhdStatus {
    guard(|| {
        let e = deref(ens, "ens")?;
        *deref_mut(samples, "samples")? = e.0.times.len();
        *deref_mut(sites, "sites")? = e.0.sites;
        Ok(())
    })
}

/// # Safety
/// `out` must hold `capacity` doubles.
#[no_mangle]
pub unsafe extern "C" fn bhd_ensemble_times(ens: *const BhdEnsemble, out: *mut f64, capacity: usize) -> BhdStatus {
    guard(|| write_slice(&deref(ens, "ens")?.0.times, out, capacity))
}

/// Row-major `samples x sites` mean occupations.
///
/// # Safety
/// `out` must hold `capacity` doubles.
#[no_mangle]
pub unsafe extern "C" fn bhd_ensemble_mean(ens: *const BhdEnsemble, out: *mut f64, capacity: usize) -> BhdStatus {
    guard(|| write_slice(&deref(ens, "ens")?.0.n, out, capacity))
}

/// Row-major `samples x sites` standard errors.
///
/// # Safety
/// `out` must hold `capacity` doubles.
#[no_mangle]
pub unsafe extern "C" fn bhd_ensemble_stderr(ens: *const BhdEnsemble, out: *mut f64, capacity: usize) -> BhdStatus {
    guard(|| write_slice(&deref(ens, "ens")?.0.stderr, out, capacity))
}

/// Stationary occupation `eps^2 J^2 tau / (2 gamma)` of a weakly linked site.
///
/// # Safety
/// `out` must point to one double.
#[no_mangle]
pub unsafe extern "C" fn bhd_stationary_occupation(
    eps: f64,
    hopping: f64,
    tau: f64,
    gamma: f64,
    out: *mut f64,
) -> BhdStatus {
    guard(|| {
        let out = deref_mut(out, "out")?;
        *out = stationary_occupation(eps, hopping, tau, gamma).map_err(|e| (BhdStatus::Stochastic, e.to_string()))?;
        Ok(())
    })
}

/// Runs a preset from a flat TOML config (the same format the command-line
/// tool reads) and writes its outputs into `output_dir`.
///
/// # Safety
/// Both strings must be valid NUL-terminated UTF-8.
#[no_mangle]
pub unsafe extern "C" fn bhd_run_config(config: *const c_char, output_dir: *const c_char, workers: usize) -> BhdStatus {
    guard(|| {
        let raw = c_str(config, "config")?;
        let dir = c_str(output_dir, "output_dir")?;
        let spec = validate_config(raw).map_err(|errs| {
            let msg: Vec<String> = errs.iter().map(|e| e.to_string()).collect();
            (BhdStatus::Config, msg.join("; "))
        })?;
        let spec = spec.with_output_dir(PathBuf::from(dir));
        experiments::run(&spec, workers).map_err(|e| {
            let status = match e {
                experiments::ExperimentError::Config(_) => BhdStatus::Config,
                experiments::ExperimentError::Io { .. } | experiments::ExperimentError::Csv(_) => BhdStatus::Io,
                _ => BhdStatus::Ensemble,
            };
            (status, e.to_string())
        })?;
        Ok(())
    })
}
