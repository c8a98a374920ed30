#ifndef ATTN_IB_H
#define ATTN_IB_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call.
 */
typedef enum AibStatus {
  AIB_STATUS_OK = 0,
  AIB_STATUS_NULL_POINTER = 1,
  AIB_STATUS_INVALID_INPUT = 2,
  AIB_STATUS_DIMENSION_MISMATCH = 3,
  AIB_STATUS_NON_UNIQUE_OPT = 4,
  AIB_STATUS_CONFIG = 5,
  AIB_STATUS_IO = 6,
  AIB_STATUS_PARSE = 7,
  AIB_STATUS_INFEASIBLE = 8,
  AIB_STATUS_DIVERGED = 9,
  AIB_STATUS_OUT_OF_RANGE = 10,
  AIB_STATUS_PANIC = 11,
} AibStatus;

typedef enum AibRuleKind {
  AIB_RULE_KIND_GD = 0,
  AIB_RULE_KIND_NGD = 1,
  AIB_RULE_KIND_NGD_DECAYED = 2,
  AIB_RULE_KIND_POLYAK = 3,
  AIB_RULE_KIND_NGD_MOMENTUM = 4,
} AibRuleKind;

typedef enum AibMode {
  AIB_MODE_W_ONLY = 0,
  AIB_MODE_JOINT = 1,
} AibMode;

typedef enum AibTermination {
  AIB_TERMINATION_COMPLETED = 0,
  AIB_TERMINATION_STATIONARY = 1,
  AIB_TERMINATION_DIVERGED = 2,
} AibTermination;

typedef struct AibDataset AibDataset;

typedef struct AibSvmSolution AibSvmSolution;

typedef struct AibTrace AibTrace;

/**
 * Step-size rule. `eta_max` is ignored when NaN; fields a rule does not
 * use are ignored.
 */
typedef struct AibRule {
  enum AibRuleKind kind;
  double eta;
  double eta_max;
  double beta;
  double p_u;
  double p_w;
  double eta_scale;
} AibRule;

/**
 * One trace row. Absent values are NaN.
 */
typedef struct AibRecord {
  uint64_t t;
  double loss;
  double log_loss;
  double w_norm;
  double u_norm;
  double align_w;
  double align_u_margin;
  double mean_opt_softmax;
  double min_opt_softmax;
  double token_gap;
  double loss_ratio;
  double grad_w_norm;
  double grad_u_norm;
  double eta_w;
  double eta_u;
} AibRecord;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread; empty after a success.
 * Valid until the next call on the same thread.
 */
const char *aib_last_error_message(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *aib_version(void);

/**
 * Dataset from row-major tokens (`n·T·d`), labels (`n`, each ±1) and
 * `u★` (`d`); optimal tokens are the strict score argmax.
 *
 * # Safety
 * Pointers must reference arrays of the stated lengths.
 */
enum AibStatus aib_dataset_new(size_t n,
                               size_t t,
                               size_t d,
                               const double *tokens,
                               const double *labels,
                               const double *u_star,
                               struct AibDataset **out);

/**
 * Near-orthogonal synthetic data.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum AibStatus aib_dataset_gen_orthogonal(size_t n,
                                          size_t t,
                                          size_t d,
                                          double signal,
                                          double sigma,
                                          double rho,
                                          uint64_t seed,
                                          struct AibDataset **out);

/**
 * Gaussian data model with `u★ = e₁`.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum AibStatus aib_dataset_gen_dm(size_t n,
                                  size_t t,
                                  size_t d,
                                  double alpha,
                                  double rho,
                                  uint64_t seed,
                                  struct AibDataset **out);

/**
 * The two-token instance on which GD aligns only logarithmically.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum AibStatus aib_dataset_counterexample(struct AibDataset **out);

/**
 * # Safety
 * `file` must be NUL-terminated; `out` must be valid.
 */
enum AibStatus aib_dataset_load_json(const char *file, struct AibDataset **out);

/**
 * # Safety
 * `ds` must be a live handle; `file` NUL-terminated.
 */
enum AibStatus aib_dataset_save_json(const struct AibDataset *ds, const char *file);

/**
 * Writes `n`, `T` and `d`; any output may be null.
 *
 * # Safety
 * `ds` must be a live handle.
 */
enum AibStatus aib_dataset_shape(const struct AibDataset *ds, size_t *n, size_t *t, size_t *d);

/**
 * Optimal-token index (0-based) of sample `i`.
 *
 * # Safety
 * `ds` must be a live handle; `out` valid.
 */
enum AibStatus aib_dataset_opt(const struct AibDataset *ds, size_t i, size_t *out);

/**
 * # Safety
 * `ds` must be null or a handle not yet freed.
 */
void aib_dataset_free(struct AibDataset *ds);

/**
 * Mean exponential loss and gradients at `(u, W)`. `grad_u` (`d`) and
 * `grad_w` (`d·d`) may be null.
 *
 * # Safety
 * `u` has `d` values and `w` has `d·d`; outputs likewise when non-null.
 */
enum AibStatus aib_loss_and_grad(const struct AibDataset *ds,
                                 const double *u,
                                 const double *w,
                                 double *loss,
                                 double *grad_u,
                                 double *grad_w);

/**
 * Max-margin attention matrix. An infeasible problem still yields a
 * handle; query it with [`aib_svm_feasible`].
 *
 * # Safety
 * `ds` must be a live handle; `out` valid.
 */
enum AibStatus aib_solve_w_svm(const struct AibDataset *ds, struct AibSvmSolution **out);

/**
 * Max-margin classifier over optimal tokens.
 *
 * # Safety
 * `ds` must be a live handle; `out` valid.
 */
enum AibStatus aib_solve_u_svm(const struct AibDataset *ds, struct AibSvmSolution **out);

/**
 * # Safety
 * `sol` must be a live handle; `out` valid.
 */
enum AibStatus aib_svm_feasible(const struct AibSvmSolution *sol, bool *out);

/**
 * Norm, margin and KKT residual; any output may be null.
 *
 * # Safety
 * `sol` must be a live handle.
 */
enum AibStatus aib_svm_stats(const struct AibSvmSolution *sol,
                             double *norm,
                             double *margin,
                             double *kkt_residual);

/**
 * Copies the solution (row-major matrix or vector) into `buf`. With a
 * null `buf`, only the required length is written to `len`.
 *
 * # Safety
 * `sol` must be a live handle; `buf` must hold `*len` values.
 */
enum AibStatus aib_svm_solution(const struct AibSvmSolution *sol, double *buf, size_t *len);

/**
 * # Safety
 * `sol` must be null or a handle not yet freed.
 */
void aib_svm_free(struct AibSvmSolution *sol);

/**
 * Trains from `W₀` (`d·d`, null for zero) with `u₀ = 0`; in W-only mode
 * `u` is pinned to `u★`. Alignment metrics use the W-SVM solution when
 * feasible. A diverged run still yields its trace with
 * `AIB_STATUS_DIVERGED`.
 *
 * # Safety
 * `ds` must be a live handle, `r` valid, `w0` null or `d·d` values.
 */
enum AibStatus aib_train(const struct AibDataset *ds,
                         const struct AibRule *r,
                         enum AibMode mode,
                         uint64_t steps,
                         uint64_t stride,
                         const double *w0,
                         struct AibTrace **out);

/**
 * # Safety
 * `tr` must be a live handle; `out` valid.
 */
enum AibStatus aib_trace_len(const struct AibTrace *tr, size_t *out);

/**
 * # Safety
 * `tr` must be a live handle; `out` valid.
 */
enum AibStatus aib_trace_record(const struct AibTrace *tr, size_t index, struct AibRecord *out);

/**
 * How the run ended; `step` (nullable) receives the last step for
 * stationary and diverged runs.
 *
 * # Safety
 * `tr` must be a live handle; `out` valid.
 */
enum AibStatus aib_trace_termination(const struct AibTrace *tr,
                                     enum AibTermination *out,
                                     uint64_t *step);

/**
 * Final `W` into `buf` (`d·d` values).
 *
 * # Safety
 * `tr` must be a live handle; `buf` must hold `len` values.
 */
enum AibStatus aib_trace_final_w(const struct AibTrace *tr, double *buf, size_t len);

/**
 * Writes `trace.csv` and `diag.csv` into an existing directory.
 *
 * # Safety
 * `tr` must be a live handle; `dir` NUL-terminated.
 */
enum AibStatus aib_trace_export(const struct AibTrace *tr, const char *dir);

/**
 * # Safety
 * `tr` must be null or a handle not yet freed.
 */
void aib_trace_free(struct AibTrace *tr);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ATTN_IB_H */
