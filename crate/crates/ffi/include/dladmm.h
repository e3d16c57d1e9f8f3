#ifndef DLADMM_H
#define DLADMM_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum DladmmReduction {
  DLADMM_REDUCTION_SUM = 0,
  DLADMM_REDUCTION_MEAN = 1,
} DladmmReduction;

typedef enum DladmmRisk {
  DLADMM_RISK_CROSS_ENTROPY = 0,
  DLADMM_RISK_SQUARED = 1,
} DladmmRisk;

typedef enum DladmmStatus {
  DLADMM_STATUS_OK = 0,
  DLADMM_STATUS_NULL_POINTER = 1,
  DLADMM_STATUS_INVALID_ARGUMENT = 2,
  DLADMM_STATUS_SHAPE = 3,
  DLADMM_STATUS_DATA = 4,
  DLADMM_STATUS_FORMAT = 5,
  DLADMM_STATUS_IO = 6,
  /**
   * Training stopped early; the model handle is still produced.
   */
  DLADMM_STATUS_DIVERGENCE = 7,
  DLADMM_STATUS_NONCONVERGENCE = 8,
  DLADMM_STATUS_INDEX = 9,
  DLADMM_STATUS_INTERNAL = 10,
} DladmmStatus;

/**
 * Opaque training set: features `n_features x n_samples` and one-hot (or
 * real-valued, for squared loss) targets `n_outputs x n_samples`.
 */
typedef struct DladmmDataset DladmmDataset;

/**
 * Opaque trained model with its per-epoch trace.
 */
typedef struct DladmmModel DladmmModel;

/**
 * Training settings for the MLP. `layer_dims` lists the sizes including the
 * input and output layers.
 */
typedef struct DladmmMlpConfig {
  const size_t *layer_dims;
  size_t n_layer_dims;
  double rho;
  double nu;
  size_t epochs;
  uint64_t seed;
  enum DladmmRisk risk;
  enum DladmmReduction reduction;
  /**
   * 0 for ReLU, otherwise the negative slope of a leaky ReLU.
   */
  double leaky_slope;
} DladmmMlpConfig;

/**
 * Settings for the GCN.
 */
typedef struct DladmmGcnConfig {
  const size_t *hidden_dims;
  size_t n_hidden;
  double rho;
  double mu;
  size_t epochs;
  uint64_t seed;
  enum DladmmReduction reduction;
} DladmmGcnConfig;

/**
 * One row of the training trace. Missing values are NaN.
 */
typedef struct DladmmTraceRow {
  size_t iter;
  double objective;
  double lagrangian;
  double residual;
  double train_acc;
  double test_acc;
  bool descent_ok;
  double ck;
} DladmmTraceRow;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the last error message for this thread into `buf` (NUL
 * terminated, truncated to `len`). Returns the full message length
 * excluding the terminator, or 0 when there is none.
 *
 * # Safety
 * `buf` must be null or point to `len` writable bytes.
 */
size_t dladmm_last_error_message(char *buf, size_t len);

/**
 * Static NUL-terminated version string.
 */
const char *dladmm_version(void);

/**
 * # Safety
 * `x` and `y` must point to the stated number of doubles; `out` must be a
 * valid pointer to a handle slot.
 */
enum DladmmStatus dladmm_dataset_new(const double *x,
                                     size_t n_features,
                                     const double *y,
                                     size_t n_outputs,
                                     size_t n_samples,
                                     struct DladmmDataset **out);

/**
 * # Safety
 * `dataset` must be null or a handle from `dladmm_dataset_new` not yet freed.
 */
void dladmm_dataset_free(struct DladmmDataset *dataset);

/**
 * Defaults: rho = nu = 1, 200 epochs, seed 0, summed cross-entropy, ReLU.
 * The layer list is left empty.
 */
struct DladmmMlpConfig dladmm_mlp_config_default(void);

/**
 * Defaults: one hidden layer of 32 (when `hidden_dims` is null), rho = mu
 * = 1, 200 epochs, seed 0, summed masked cross-entropy.
 */
struct DladmmGcnConfig dladmm_gcn_config_default(void);

/**
 * Trains an MLP by dlADMM. On `DLADMM_STATUS_DIVERGENCE` the model up to
 * the failing epoch is still written to `out`.
 *
 * # Safety
 * `config` and `dataset` must be valid; `config.layer_dims` must point to
 * `n_layer_dims` values; `out` must be a valid handle slot.
 */
enum DladmmStatus dladmm_mlp_train(const struct DladmmMlpConfig *config,
                                   const struct DladmmDataset *dataset,
                                   struct DladmmModel **out);

/**
 * Loads a graph bundle directory and trains a GCN on it.
 *
 * # Safety
 * `dir` must be a NUL-terminated path; `config` valid (its `hidden_dims`
 * pointing to `n_hidden` values, or null for the default); `out` a valid
 * handle slot.
 */
enum DladmmStatus dladmm_gcn_train_dir(const char *dir,
                                       const struct DladmmGcnConfig *config,
                                       struct DladmmModel **out);

/**
 * Number of completed epochs in the model's trace.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t dladmm_model_epochs(const struct DladmmModel *model);

/**
 * # Safety
 * `model` must be a live handle and `row` a valid pointer.
 */
enum DladmmStatus dladmm_model_trace_row(const struct DladmmModel *model,
                                         size_t index,
                                         struct DladmmTraceRow *row);

/**
 * Output scores of the trained network. For an MLP, `x` holds `n_features
 * x n_samples` inputs and `out` receives `n_outputs x n_samples`. For a GCN,
 * `x` holds the `n_nodes x n_features` node features of the training graph
 * (`n_samples` is the node count) and `out` receives `n_nodes x n_classes`.
 * `out_len` is the capacity of `out` in doubles.
 *
 * # Safety
 * Buffers must be valid for the stated sizes.
 */
enum DladmmStatus dladmm_model_predict(const struct DladmmModel *model,
                                       const double *x,
                                       size_t n_features,
                                       size_t n_samples,
                                       double *out,
                                       size_t out_len);

/**
 * # Safety
 * `model` must be null or a handle not yet freed.
 */
void dladmm_model_free(struct DladmmModel *model);

/**
 * Runs the built-in self-check suite; returns the number of failed checks.
 */
size_t dladmm_selfcheck(bool quick);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DLADMM_H */
