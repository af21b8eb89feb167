#ifndef STGNN_H
#define STGNN_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stddef.h>
#include <stdint.h>

/**
 * Result of every fallible call.
 */
typedef enum StgnnStatus {
  STGNN_STATUS_OK = 0,
  STGNN_STATUS_NULL_POINTER = 1,
  STGNN_STATUS_INVALID_ARGUMENT = 2,
  STGNN_STATUS_DIMENSION_MISMATCH = 3,
  STGNN_STATUS_NUMERIC = 4,
  STGNN_STATUS_IO = 5,
  STGNN_STATUS_PANIC = 6,
} StgnnStatus;

/**
 * Kind of graph shift operator.
 */
typedef enum StgnnGsoKind {
  STGNN_GSO_KIND_ADJACENCY = 0,
  STGNN_GSO_KIND_LAPLACIAN = 1,
} StgnnGsoKind;

/**
 * Boundary handling of the time shift.
 */
typedef enum StgnnTimeShift {
  STGNN_TIME_SHIFT_CIRCULANT = 0,
  STGNN_TIME_SHIFT_ZERO_PAD = 1,
} StgnnTimeShift;

/**
 * Opaque filter taps.
 */
typedef struct StgnnFilter StgnnFilter;

/**
 * Opaque graph shift operator.
 */
typedef struct StgnnGso StgnnGso;

/**
 * Opaque trained network.
 */
typedef struct StgnnModel StgnnModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *stgnn_version(void);

/**
 * Copies the calling thread's last error message into `buf` (always
 * NUL-terminated when `len > 0`, truncated if needed). Returns the full
 * message length in bytes excluding the terminator, 0 if there is none.
 *
 * # Safety
 * `buf` must be valid for `len` bytes or null with `len == 0`.
 */
size_t stgnn_last_error_message(char *buf, size_t len);

/**
 * Builds an operator on `node_count` nodes from `edge_count` undirected
 * edges given as index pairs `edges[2i], edges[2i+1]` with weights
 * `weights[i]` (all 1 when `weights` is null).
 *
 * # Safety
 * `edges` must hold `2·edge_count` values, `weights` `edge_count` values
 * or be null, and `out` must be a valid pointer.
 */
enum StgnnStatus stgnn_gso_from_edges(size_t node_count,
                                      const size_t *edges,
                                      const double *weights,
                                      size_t edge_count,
                                      enum StgnnGsoKind kind,
                                      struct StgnnGso **out);

/**
 * Random edge sampling: keeps every edge of `gso` with probability `p`.
 *
 * # Safety
 * `gso` must come from this library and `out` must be valid.
 */
enum StgnnStatus stgnn_gso_sample(const struct StgnnGso *gso,
                                  double probability,
                                  uint64_t seed,
                                  struct StgnnGso **out);

/**
 * Node count of `gso`, 0 for null.
 *
 * # Safety
 * `gso` must come from this library or be null.
 */
size_t stgnn_gso_node_count(const struct StgnnGso *gso);

/**
 * Copies the dense `N × N` operator into `out` (row-major, `len == N²`).
 *
 * # Safety
 * `gso` must come from this library; `out` must hold `len` values.
 */
enum StgnnStatus stgnn_gso_matrix(const struct StgnnGso *gso, double *out, size_t len);

/**
 * Releases an operator. Null is ignored.
 *
 * # Safety
 * `gso` must come from this library and not be used afterwards.
 */
void stgnn_gso_free(struct StgnnGso *gso);

/**
 * Filter with taps `h_0, …, h_K` (`len = K + 1`).
 *
 * # Safety
 * `taps` must hold `len` values and `out` must be valid.
 */
enum StgnnStatus stgnn_filter_new(const double *taps, size_t len, struct StgnnFilter **out);

/**
 * Filter order `K`, 0 for null.
 *
 * # Safety
 * `filter` must come from this library or be null.
 */
size_t stgnn_filter_order(const struct StgnnFilter *filter);

/**
 * Releases a filter. Null is ignored.
 *
 * # Safety
 * `filter` must come from this library and not be used afterwards.
 */
void stgnn_filter_free(struct StgnnFilter *filter);

/**
 * `Y = Σ_k h_k S^k X C^k` for a signal of `nodes × horizon × features`.
 * `y` must have the same length as `x`.
 *
 * # Safety
 * Handles must come from this library; `x` and `y` must hold
 * `nodes·horizon·features` values.
 */
enum StgnnStatus stgnn_filter_apply(const struct StgnnFilter *filter,
                                    const struct StgnnGso *gso,
                                    enum StgnnTimeShift time_shift,
                                    const double *x,
                                    size_t nodes,
                                    size_t horizon,
                                    size_t features,
                                    double *y);

/**
 * `Ỹ = Σ_k h_k S_k⋯S_1 X C^k` over the sequence `sequence[0..K]`
 * (`S_1` first).
 *
 * # Safety
 * As [`stgnn_filter_apply`]; `sequence` must hold `sequence_len` handles.
 */
enum StgnnStatus stgnn_filter_apply_sequence(const struct StgnnFilter *filter,
                                             const struct StgnnGso *const *sequence,
                                             size_t sequence_len,
                                             enum StgnnTimeShift time_shift,
                                             const double *x,
                                             size_t nodes,
                                             size_t horizon,
                                             size_t features,
                                             double *y);

/**
 * Integral-Lipschitz constant of `filter` over `[lambda_min, lambda_max]`.
 *
 * # Safety
 * `filter` must come from this library; `c_l` must be valid.
 */
enum StgnnStatus stgnn_filter_c_l(const struct StgnnFilter *filter,
                                  double lambda_min,
                                  double lambda_max,
                                  size_t omega_samples,
                                  double *c_l);

/**
 * Loads a model directory written by `stgnn train`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` valid.
 */
enum StgnnStatus stgnn_model_load(const char *path, struct StgnnModel **out);

/**
 * Input and output feature counts of `model`.
 *
 * # Safety
 * `model` must come from this library; the out-pointers must be valid.
 */
enum StgnnStatus stgnn_model_shape(const struct StgnnModel *model,
                                   size_t *input_features,
                                   size_t *output_features);

/**
 * Network output on a fixed operator. `y` holds
 * `nodes·horizon·output_features` values.
 *
 * # Safety
 * Handles must come from this library; buffers must have the stated
 * lengths.
 */
enum StgnnStatus stgnn_model_forward(const struct StgnnModel *model,
                                     const struct StgnnGso *gso,
                                     enum StgnnTimeShift time_shift,
                                     const double *x,
                                     size_t nodes,
                                     size_t horizon,
                                     double *y,
                                     size_t y_len);

/**
 * Releases a model. Null is ignored.
 *
 * # Safety
 * `model` must come from this library and not be used afterwards.
 */
void stgnn_model_free(struct StgnnModel *model);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* STGNN_H */
