#ifndef BH_DEPLETION_H
#define BH_DEPLETION_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum BhdStatus {
  BHD_STATUS_OK = 0,
  BHD_STATUS_NULL_POINTER = 1,
  BHD_STATUS_INVALID_ARGUMENT = 2,
  BHD_STATUS_BUFFER_TOO_SMALL = 3,
  BHD_STATUS_MODEL = 4,
  BHD_STATUS_INTEGRATOR = 5,
  BHD_STATUS_ENSEMBLE = 6,
  BHD_STATUS_STOCHASTIC = 7,
  BHD_STATUS_CONFIG = 8,
  BHD_STATUS_IO = 9,
  BHD_STATUS_PANIC = 10,
} BhdStatus;

typedef enum BhdSampler {
  BHD_SAMPLER_ZONE_EDGE_BEC = 0,
  BHD_SAMPLER_GROUND_STATE_BEC = 1,
  BHD_SAMPLER_UNIFORM_HYPERSPHERE = 2,
} BhdSampler;

// Opaque ensemble result.
typedef struct BhdEnsemble BhdEnsemble;

// Opaque lattice configuration.
typedef struct BhdLattice BhdLattice;

// Opaque single-trajectory record.
typedef struct BhdTrajectory BhdTrajectory;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread; empty after success.
// The pointer stays valid until the next call on the same thread.
const char *bhd_last_error_message(void);

// Library version as a static NUL-terminated string.
const char *bhd_version(void);

// Periodic chain of `sites` sites with hopping `hopping` and interaction
// `interaction`; other parameters take their defaults.
//
// # Safety
// `out` must be a valid pointer to write a handle into.
enum BhdStatus bhd_lattice_new(size_t sites,
                               double hopping,
                               double interaction,
                               struct BhdLattice **out);

// # Safety
// `lattice` must come from [`bhd_lattice_new`] and not be used afterwards.
void bhd_lattice_free(struct BhdLattice *lattice);

// # Safety
// `lattice` must be a live handle.
enum BhdStatus bhd_lattice_set_gamma(struct BhdLattice *lattice, double gamma);

// # Safety
// `lattice` must be a live handle.
enum BhdStatus bhd_lattice_set_omega(struct BhdLattice *lattice, double omega);

// Open chain when `open` is nonzero, periodic otherwise.
//
// # Safety
// `lattice` must be a live handle.
enum BhdStatus bhd_lattice_set_open(struct BhdLattice *lattice, int32_t open);

// # Safety
// `lattice` must be a live handle.
enum BhdStatus bhd_lattice_set_bond_factor(struct BhdLattice *lattice, size_t bond, double factor);

// Weak links of strength `factor` placed `distance` sites from the
// dissipated site on both sides.
//
// # Safety
// `lattice` must be a live handle.
enum BhdStatus bhd_lattice_set_weak_links(struct BhdLattice *lattice,
                                          size_t distance,
                                          double factor);

// Classical energy of `state` (`2 * sites` doubles).
//
// # Safety
// `state` must point to `2 * sites` doubles and `out` to one double.
enum BhdStatus bhd_energy(const struct BhdLattice *lattice,
                          const double *state,
                          size_t sites,
                          double *out);

// Time derivative of `state`, written to `out` (`2 * sites` doubles).
//
// # Safety
// `state` and `out` must each point to `2 * sites` doubles.
enum BhdStatus bhd_rhs(const struct BhdLattice *lattice,
                       const double *state,
                       size_t sites,
                       double *out);

// Propagates `state` from `t = 0` to `t_final` with RK4 step `step`,
// sampling occupations every `sample_every`.
//
// # Safety
// `state` must point to `2 * sites` doubles and `out` be writable.
enum BhdStatus bhd_propagate(const struct BhdLattice *lattice,
                             const double *state,
                             size_t sites,
                             double step,
                             double sample_every,
                             double t_final,
                             struct BhdTrajectory **out);

// # Safety
// `traj` must come from [`bhd_propagate`] and not be used afterwards.
void bhd_trajectory_free(struct BhdTrajectory *traj);

// Number of samples and sites of a trajectory.
//
// # Safety
// All pointers must be valid.
enum BhdStatus bhd_trajectory_shape(const struct BhdTrajectory *traj,
                                    size_t *samples,
                                    size_t *sites);

// # Safety
// `out` must hold `capacity` doubles.
enum BhdStatus bhd_trajectory_times(const struct BhdTrajectory *traj, double *out, size_t capacity);

// Row-major `samples x sites` occupations.
//
// # Safety
// `out` must hold `capacity` doubles.
enum BhdStatus bhd_trajectory_occupations(const struct BhdTrajectory *traj,
                                          double *out,
                                          size_t capacity);

// Final state as `2 * sites` doubles.
//
// # Safety
// `out` must hold `capacity` doubles.
enum BhdStatus bhd_trajectory_final_state(const struct BhdTrajectory *traj,
                                          double *out,
                                          size_t capacity);

// Runs `n_traj` seeded trajectories on `workers` threads (0 for all).
// Results do not depend on `workers`.
//
// # Safety
// `lattice` must be a live handle and `out` writable.
enum BhdStatus bhd_run_ensemble(const struct BhdLattice *lattice,
                                enum BhdSampler sampler,
                                size_t n_traj,
                                uint64_t root_seed,
                                double step,
                                double sample_every,
                                double t_final,
                                size_t workers,
                                struct BhdEnsemble **out);

// # Safety
// `ens` must come from [`bhd_run_ensemble`] and not be used afterwards.
void bhd_ensemble_free(struct BhdEnsemble *ens);

// # Safety
// All pointers must be valid.
enum BhdStatus bhd_ensemble_shape(const struct BhdEnsemble *ens, size_t *samples, size_t *sites);

// # Safety
// `out` must hold `capacity` doubles.
enum BhdStatus bhd_ensemble_times(const struct BhdEnsemble *ens, double *out, size_t capacity);

// Row-major `samples x sites` mean occupations.
//
// # Safety
// `out` must hold `capacity` doubles.
enum BhdStatus bhd_ensemble_mean(const struct BhdEnsemble *ens, double *out, size_t capacity);

// Row-major `samples x sites` standard errors.
//
// # Safety
// `out` must hold `capacity` doubles.
enum BhdStatus bhd_ensemble_stderr(const struct BhdEnsemble *ens, double *out, size_t capacity);

// Stationary occupation `eps^2 J^2 tau / (2 gamma)` of a weakly linked site.
//
// # Safety
// `out` must point to one double.
enum BhdStatus bhd_stationary_occupation(double eps,
                                         double hopping,
                                         double tau,
                                         double gamma,
                                         double *out);

// Runs a preset from a flat TOML config (the same format the command-line
// tool reads) and writes its outputs into `output_dir`.
//
// # Safety
// Both strings must be valid NUL-terminated UTF-8.
enum BhdStatus bhd_run_config(const char *config, const char *output_dir, size_t workers);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* BH_DEPLETION_H */
