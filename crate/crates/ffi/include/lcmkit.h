#ifndef LCMKIT_H
#define LCMKIT_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum LcmStatus {
  LcmStatus_Ok = 0,
  LcmStatus_NullPointer = 1,
  LcmStatus_InvalidArgument = 2,
  LcmStatus_Config = 3,
  LcmStatus_Io = 4,
  LcmStatus_Checkpoint = 5,
  LcmStatus_Divergence = 6,
  LcmStatus_Panic = 7,
  LcmStatus_Other = 8,
} LcmStatus;

typedef enum LcmSolver {
  LcmSolver_Ddim = 0,
  LcmSolver_Dpm2 = 1,
  LcmSolver_Dpmpp2 = 2,
} LcmSolver;

/**
 * Trained consistency model with its latent codec.
 */
typedef struct LcmModel LcmModel;

/**
 * Discrete VP noise schedule.
 */
typedef struct LcmSchedule LcmSchedule;

/**
 * Analytic Gaussian-mixture teacher.
 */
typedef struct LcmTeacher LcmTeacher;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copy the last error message of this thread into `buf` (NUL-terminated,
 * truncated to `len`). Returns the full message length in bytes.
 *
 * # Safety
 * `buf` must be null or valid for `len` bytes.
 */
uintptr_t lcm_last_error(char *buf, uintptr_t len);

/**
 * # Safety
 * `out` must be valid for one pointer write.
 */
enum LcmStatus lcm_schedule_new(uintptr_t num_steps,
                                double beta_min,
                                double beta_max,
                                struct LcmSchedule **out);

/**
 * # Safety
 * `s` must be null or a handle from `lcm_schedule_new` not yet freed.
 */
void lcm_schedule_free(struct LcmSchedule *s);

/**
 * `alpha(t_n)` and `sigma(t_n)`.
 *
 * # Safety
 * `s` must be a live schedule handle; `alpha` and `sigma` valid for writes.
 */
enum LcmStatus lcm_alpha_sigma(const struct LcmSchedule *s,
                               uintptr_t n,
                               double *alpha,
                               double *sigma);

/**
 * Analytic teacher over `count` isotropic components in `dim` dimensions.
 * `means` is row-major `count x dim`; weights are renormalized.
 *
 * # Safety
 * Array arguments must hold `count` (or `count * dim`) elements.
 */
enum LcmStatus lcm_teacher_new(const struct LcmSchedule *s,
                               uintptr_t dim,
                               uintptr_t count,
                               const double *weights,
                               const double *means,
                               const double *variances,
                               const uint32_t *labels,
                               struct LcmTeacher **out);

/**
 * Equal-weight ring of `modes` Gaussians, labels assigned round-robin over `classes`.
 *
 * # Safety
 * `s` must be a live schedule handle; `out` valid for one pointer write.
 */
enum LcmStatus lcm_teacher_ring(const struct LcmSchedule *s,
                                uintptr_t modes,
                                double radius,
                                double std,
                                uintptr_t classes,
                                struct LcmTeacher **out);

/**
 * # Safety
 * `t` must be null or a live teacher handle.
 */
void lcm_teacher_free(struct LcmTeacher *t);

/**
 * Noise prediction `eps*(z, t_n, c)` written to `out[dim]`.
 *
 * # Safety
 * `z` and `out` must hold `dim` elements.
 */
enum LcmStatus lcm_teacher_eps(const struct LcmTeacher *t,
                               const double *z,
                               uintptr_t dim,
                               uintptr_t n,
                               int64_t class_,
                               double *out);

/**
 * Guided solver estimate of `z` at `n_to` starting from `n_from`.
 *
 * # Safety
 * `z` and `out` must hold `dim` elements.
 */
enum LcmStatus lcm_cfg_solver_step(const struct LcmTeacher *t,
                                   enum LcmSolver solver,
                                   const double *z,
                                   uintptr_t dim,
                                   uintptr_t n_from,
                                   uintptr_t n_to,
                                   double omega,
                                   int64_t class_,
                                   double *out);

/**
 * Load a consistency model checkpoint written by the `lcmkit` CLI.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` valid for one pointer write.
 */
enum LcmStatus lcm_model_load(const char *path, struct LcmModel **out);

/**
 * # Safety
 * `m` must be null or a live model handle.
 */
void lcm_model_free(struct LcmModel *m);

/**
 * Latent dimension the model operates in; 0 for a null handle.
 *
 * # Safety
 * `m` must be null or a live model handle.
 */
uintptr_t lcm_model_latent_dim(const struct LcmModel *m);

/**
 * Data dimension of decoded samples; 0 for a null handle.
 *
 * # Safety
 * `m` must be null or a live model handle.
 */
uintptr_t lcm_model_data_dim(const struct LcmModel *m);

/**
 * One consistency-function evaluation `f(z, omega, c, t_n)` in latent space.
 *
 * # Safety
 * `z` and `out` must hold `dim` elements.
 */
enum LcmStatus lcm_model_apply(const struct LcmModel *m,
                               const double *z,
                               uintptr_t dim,
                               double omega,
                               int64_t class_,
                               uintptr_t n,
                               double *out);

/**
 * `count` decoded samples with `steps` uniform sampling steps, row-major
 * into `out[count * data_dim]`.
 *
 * # Safety
 * `out` must hold `count * lcm_model_data_dim(m)` elements.
 */
enum LcmStatus lcm_model_sample(const struct LcmModel *m,
                                uintptr_t steps,
                                double omega,
                                int64_t class_,
                                uintptr_t count,
                                uint64_t seed,
                                double *out);

/**
 * Sliced Wasserstein-1 between two row-major sample sets of dimension `dim`.
 *
 * # Safety
 * `a` must hold `na * dim` and `b` `nb * dim` elements.
 */
enum LcmStatus lcm_sliced_w1(const double *a,
                             uintptr_t na,
                             const double *b,
                             uintptr_t nb,
                             uintptr_t dim,
                             uintptr_t n_projections,
                             uint64_t seed,
                             double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* LCMKIT_H */
