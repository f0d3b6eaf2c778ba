#ifndef FEDLORA_H
#define FEDLORA_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Upload strategy selector for [`fl_ledger_predict`].
 */
#define FL_STRATEGY_FEDIT 0

#define FL_STRATEGY_FEDSA 1

#define FL_STRATEGY_FFA_LORA 2

#define FL_STRATEGY_LOCAL 3

/**
 * Result code of every exported function.
 */
typedef enum FlStatus {
  FL_STATUS_OK = 0,
  FL_STATUS_NULL_POINTER = 1,
  FL_STATUS_INVALID_ARGUMENT = 2,
  FL_STATUS_CONFIG = 3,
  FL_STATUS_SHAPE_MISMATCH = 4,
  FL_STATUS_INVARIANT = 5,
  FL_STATUS_IO = 6,
  FL_STATUS_FORMAT = 7,
  FL_STATUS_OUT_OF_RANGE = 8,
  FL_STATUS_PANIC = 9,
} FlStatus;

/**
 * Opaque parameter container.
 */
typedef struct FlParams FlParams;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null if none failed.
 * The pointer stays valid until the next failing call on the same thread.
 */
const char *fl_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *fl_version(void);

/**
 * Reads a `.pvec` file into a new handle stored in `*out`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum FlStatus fl_params_load(const char *path, struct FlParams **out);

/**
 * Writes the container to a `.pvec` file.
 *
 * # Safety
 * `params` must come from this library and `path` be NUL-terminated.
 */
enum FlStatus fl_params_save(const struct FlParams *params, const char *path);

/**
 * Total number of scalars across all blocks; 0 for a null handle.
 *
 * # Safety
 * `params` must be null or come from this library.
 */
size_t fl_params_len(const struct FlParams *params);

/**
 * Number of named blocks; 0 for a null handle.
 *
 * # Safety
 * `params` must be null or come from this library.
 */
size_t fl_params_num_blocks(const struct FlParams *params);

/**
 * Scalar `index` of the flattened container.
 *
 * # Safety
 * `params` must come from this library and `out` be a valid pointer.
 */
enum FlStatus fl_params_get(const struct FlParams *params, size_t index, double *out);

/**
 * Copies the flattened values into `buf`, which must hold exactly
 * `fl_params_len(params)` doubles.
 *
 * # Safety
 * `buf` must point to `len` writable doubles.
 */
enum FlStatus fl_params_copy(const struct FlParams *params, double *buf, size_t len);

/**
 * Inner product of two containers with the same layout.
 *
 * # Safety
 * Both handles must come from this library and `out` be a valid pointer.
 */
enum FlStatus fl_params_dot(const struct FlParams *x, const struct FlParams *y, double *out);

/**
 * Releases a handle. Null is ignored.
 *
 * # Safety
 * `params` must be null or a handle not yet freed.
 */
void fl_params_free(struct FlParams *params);

/**
 * Trace-optimal mixing weights for traces `a` (federated), `b` (local) and
 * cross trace `c`. Writes both weights; they sum to 1.
 *
 * # Safety
 * Output pointers must be valid.
 */
enum FlStatus fl_optimal_weights(double a,
                                 double b,
                                 double c,
                                 double *lambda_fedit,
                                 double *lambda_local);

/**
 * Predicted upload bytes for one adapted `m × n` layer at rank `r`.
 *
 * # Safety
 * Output pointers must be valid.
 */
enum FlStatus fl_ledger_predict(uint32_t strategy,
                                uint64_t r,
                                uint64_t m,
                                uint64_t n,
                                uint64_t rounds,
                                uint64_t n_clients,
                                uint64_t *per_client_upload,
                                uint64_t *total_upload);

/**
 * Runs the experiment described by a JSON config file. `out_dir` may be
 * null to keep the config's output directory.
 *
 * # Safety
 * `config_path` must be NUL-terminated; `out_dir` null or NUL-terminated.
 */
enum FlStatus fl_run_experiment(const char *config_path, const char *out_dir);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FEDLORA_H */
