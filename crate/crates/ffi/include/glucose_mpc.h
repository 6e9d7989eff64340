#ifndef GLUCOSE_MPC_H
#define GLUCOSE_MPC_H

/* Generated with cbindgen:0.29.4 */

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

typedef enum GmStatus {
  GM_STATUS_OK = 0,
  GM_STATUS_NULL_POINTER = 1,
  GM_STATUS_INVALID_ARGUMENT = 2,
  GM_STATUS_NUMERICAL = 3,
  GM_STATUS_SOLVER_FAILURE = 4,
  GM_STATUS_IO = 5,
  GM_STATUS_PANIC = 6,
} GmStatus;

/**
 * Opaque closed-loop controller.
 */
typedef struct GmController GmController;

/**
 * Opaque virtual patient: parameters plus current plant state.
 */
typedef struct GmPatient GmPatient;

/**
 * One controller decision.
 */
typedef struct GmTick {
  uint32_t t_min;
  double cgm;
  double setpoint;
  double command_u;
  double qp_objective;
  uint32_t qp_iterations;
  double slack_norm;
  bool fallback;
  uint32_t clamped_gains;
} GmTick;

/**
 * Outcome metrics of a glucose trace, in percent where applicable.
 */
typedef struct GmGlycemic {
  double mean;
  double cv;
  double pct_below_54;
  double pct_below_70;
  double pct_70_140;
  double pct_70_180;
  double pct_above_180;
  double pct_above_250;
} GmGlycemic;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread; empty after a success.
 * The pointer stays valid until the next call on the same thread.
 */
const char *gm_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *gm_version(void);

/**
 * Nominal patient at equilibrium.
 *
 * # Safety
 * `out` must be valid for one write.
 */
enum GmStatus gm_patient_new_nominal(uint32_t subject_id, struct GmPatient **out);

/**
 * Subject `index` (0-based) of the cohort `make_cohort(n, seed)`, at
 * equilibrium.
 *
 * # Safety
 * `out` must be valid for one write.
 */
enum GmStatus gm_patient_from_cohort(uint64_t seed,
                                     uint32_t n,
                                     uint32_t index,
                                     struct GmPatient **out);

/**
 * Scale the plant's insulin sensitivity; the current state is kept.
 *
 * # Safety
 * `p` must be a live handle.
 */
enum GmStatus gm_patient_set_sensitivity(struct GmPatient *p, double scale);

/**
 * Advance by `dt_min` minutes with constant insulin (U) and carbohydrate
 * (g) delivery; writes the new plasma glucose.
 *
 * # Safety
 * `p` must be a live handle; `glucose_out` null or valid for one write.
 */
enum GmStatus gm_patient_step(struct GmPatient *p,
                              double insulin_u,
                              double carbs_g,
                              double dt_min,
                              double *glucose_out);

/**
 * # Safety
 * `p` must be a live handle and `out` valid for one write.
 */
enum GmStatus gm_patient_glucose(const struct GmPatient *p, double *out);

/**
 * Basal insulin per 15-min step and equilibrium glucose.
 *
 * # Safety
 * `p` must be a live handle; outputs null or valid for one write.
 */
enum GmStatus gm_patient_operating_point(const struct GmPatient *p,
                                         double *basal_out,
                                         double *glucose_out);

/**
 * # Safety
 * `p` must be null or a handle not yet freed.
 */
void gm_patient_free(struct GmPatient *p);

/**
 * Multi-step MPC from a trained bundle directory, default tuning.
 *
 * # Safety
 * `bundle_dir` must be a NUL-terminated string; `out` valid for one write.
 */
enum GmStatus gm_controller_load_multistep(const char *bundle_dir,
                                           double basal_u,
                                           struct GmController **out);

/**
 * ARX MPC around `(y_bar, u_bar)`. `bundle_dir` selects the identified
 * model of a trained bundle; null selects the published coefficients.
 *
 * # Safety
 * `bundle_dir` must be null or a NUL-terminated string; `out` valid for
 * one write.
 */
enum GmStatus gm_controller_new_arx(const char *bundle_dir,
                                    double y_bar,
                                    double u_bar,
                                    struct GmController **out);

/**
 * One tick: CGM reading at `t_min` and carbohydrates announced for the
 * coming period. The command is in `tick_out.command_u`.
 *
 * # Safety
 * `c` must be a live handle and `tick_out` valid for one write.
 */
enum GmStatus gm_controller_step(struct GmController *c,
                                 uint32_t t_min,
                                 double cgm,
                                 double carbs_g,
                                 struct GmTick *tick_out);

/**
 * # Safety
 * `c` must be null or a handle not yet freed.
 */
void gm_controller_free(struct GmController *c);

/**
 * Solve `min 1/2 z'Hz + f'z` s.t. `lower <= z <= upper`. `h` is `n x n`
 * row-major and must be symmetric positive definite. Bounds may be
 * infinite.
 *
 * # Safety
 * `h` valid for `n*n` reads; `f`, `lower`, `upper` for `n` reads; `z_out`
 * for `n` writes; `objective_out` null or valid for one write.
 */
enum GmStatus gm_qp_solve_box(size_t n,
                              const double *h,
                              const double *f,
                              const double *lower,
                              const double *upper,
                              double *z_out,
                              double *objective_out);

/**
 * # Safety
 * `glucose` valid for `n` reads; `out` valid for one write.
 */
enum GmStatus gm_glycemic_metrics(const double *glucose, size_t n, struct GmGlycemic *out);

/**
 * Two-sided paired t-test on `a - b`.
 *
 * # Safety
 * `a`, `b` valid for `n` reads; `t_out`, `p_out` valid for one write each.
 */
enum GmStatus gm_paired_t_test(const double *a,
                               const double *b,
                               size_t n,
                               double *t_out,
                               double *p_out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* GLUCOSE_MPC_H */
