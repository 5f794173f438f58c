#ifndef R2Q_H
#define R2Q_H

/* Generated by cbindgen. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum R2qStatus {
  R2Q_STATUS_OK = 0,
  R2Q_STATUS_NULL_POINTER = 1,
  R2Q_STATUS_INVALID_ARGUMENT = 2,
  R2Q_STATUS_SCHEME_MISMATCH = 3,
  R2Q_STATUS_SHAPE_MISMATCH = 4,
  R2Q_STATUS_IO = 5,
  R2Q_STATUS_FORMAT = 6,
  R2Q_STATUS_PARSE = 7,
  R2Q_STATUS_NON_FINITE = 8,
  R2Q_STATUS_PANIC = 9,
  R2Q_STATUS_OTHER = 10,
} R2qStatus;

/**
 * Dense row-major matrix of doubles.
 */
typedef struct R2qMatrix R2qMatrix;

/**
 * Round-to-nearest quantized matrix.
 */
typedef struct R2qRtnTensor R2qRtnTensor;

/**
 * Two-kernel residual quantized matrix.
 */
typedef struct R2qTensor R2qTensor;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failure on this thread, or null. Valid until the next
 * failing call on the same thread.
 */
const char *r2q_last_error(void);

/**
 * Copy `rows * cols` doubles from `data` into a new matrix.
 *
 * # Safety
 * `data` must point to `rows * cols` readable doubles; `out` must be writable.
 */
enum R2qStatus r2q_matrix_new(size_t rows, size_t cols, const double *data, struct R2qMatrix **out);

/**
 * # Safety
 * `m` must be null or a handle from this library not yet freed.
 */
void r2q_matrix_free(struct R2qMatrix *m);

/**
 * # Safety
 * `m` must be a live handle.
 */
size_t r2q_matrix_rows(const struct R2qMatrix *m);

/**
 * # Safety
 * `m` must be a live handle.
 */
size_t r2q_matrix_cols(const struct R2qMatrix *m);

/**
 * Copy the matrix, row-major, into `dst` which holds `len` doubles.
 *
 * # Safety
 * `m` must be a live handle and `dst` must hold `len` writable doubles.
 */
enum R2qStatus r2q_matrix_copy_data(const struct R2qMatrix *m, double *dst, size_t len);

/**
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum R2qStatus r2q_matrix_load(const char *path, struct R2qMatrix **out);

/**
 * # Safety
 * `m` must be a live handle; `path` a NUL-terminated string.
 */
enum R2qStatus r2q_matrix_save(const struct R2qMatrix *m, const char *path);

/**
 * Residual 2-bit quantization. `group_size` -1 means one group per row.
 *
 * # Safety
 * `m` must be a live handle; `out` must be writable.
 */
enum R2qStatus r2q_quantize(const struct R2qMatrix *m, int64_t group_size, struct R2qTensor **out);

/**
 * # Safety
 * `t` must be null or a live handle.
 */
void r2q_tensor_free(struct R2qTensor *t);

/**
 * # Safety
 * `t` must be a live handle.
 */
size_t r2q_tensor_num_groups(const struct R2qTensor *t);

/**
 * # Safety
 * `t` must be a live handle; `out` must be writable.
 */
enum R2qStatus r2q_tensor_dequantize(const struct R2qTensor *t, struct R2qMatrix **out);

/**
 * Copy the per-group coarse and refinement scales. Both buffers hold `len`
 * doubles, which must equal the group count.
 *
 * # Safety
 * `t` must be a live handle; both buffers must hold `len` writable doubles.
 */
enum R2qStatus r2q_tensor_alphas(const struct R2qTensor *t,
                                 double *coarse,
                                 double *refine,
                                 size_t len);

/**
 * # Safety
 * `t` must be a live handle; `path` a NUL-terminated string.
 */
enum R2qStatus r2q_tensor_save(const struct R2qTensor *t, const char *path);

/**
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum R2qStatus r2q_tensor_load(const char *path, struct R2qTensor **out);

/**
 * `W x` with `W` given in quantized form. Uses the addition-only kernel for
 * one group per row and the dequantized product otherwise.
 *
 * # Safety
 * `t` and `x` must be live handles; `out` must be writable.
 */
enum R2qStatus r2q_tensor_matmul(const struct R2qTensor *t,
                                 const struct R2qMatrix *x,
                                 struct R2qMatrix **out);

/**
 * Round-to-nearest quantization with `bits` bits per weight.
 *
 * # Safety
 * `m` must be a live handle; `out` must be writable.
 */
enum R2qStatus r2q_rtn_quantize(const struct R2qMatrix *m,
                                int64_t group_size,
                                uint8_t bits,
                                struct R2qRtnTensor **out);

/**
 * # Safety
 * `t` must be null or a live handle.
 */
void r2q_rtn_free(struct R2qRtnTensor *t);

/**
 * # Safety
 * `t` must be a live handle; `out` must be writable.
 */
enum R2qStatus r2q_rtn_dequantize(const struct R2qRtnTensor *t, struct R2qMatrix **out);

/**
 * # Safety
 * `t` must be a live handle; `path` a NUL-terminated string.
 */
enum R2qStatus r2q_rtn_save(const struct R2qRtnTensor *t, const char *path);

/**
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum R2qStatus r2q_rtn_load(const char *path, struct R2qRtnTensor **out);

/**
 * Mean over `n` layer pairs of the per-element squared error.
 *
 * # Safety
 * `originals` and `quantized` must each point to `n` live matrix handles;
 * `out` must be writable.
 */
enum R2qStatus r2q_layer_mse(const struct R2qMatrix *const *originals,
                             const struct R2qMatrix *const *quantized,
                             size_t n,
                             double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* R2Q_H */
