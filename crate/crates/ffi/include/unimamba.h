#ifndef UNIMAMBA_H
#define UNIMAMBA_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum UmCurve {
  UM_CURVE_Z_ORDER_X = 0,
  UM_CURVE_Z_ORDER_Y = 1,
  UM_CURVE_HILBERT = 2,
} UmCurve;

typedef enum UmStatus {
  UM_STATUS_OK = 0,
  UM_STATUS_NULL_POINTER = 1,
  UM_STATUS_INVALID_ARGUMENT = 2,
  UM_STATUS_CONFIG = 3,
  UM_STATUS_IO = 4,
  UM_STATUS_FORMAT = 5,
  UM_STATUS_PANIC = 6,
} UmStatus;

typedef struct UmBackbone UmBackbone;

typedef struct UmBev UmBev;

typedef struct UmTensor UmTensor;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. Valid until the
 * next failing call on the same thread.
 */
const char *um_last_error(void);

/**
 * Builds a tensor from `n` coordinates (`3n` values, x y z) and row-major
 * features (`n * channels` values).
 *
 * # Safety
 * `coords` and `features` must point to the stated number of elements
 * (`features` may be null when `n * channels == 0`), `grid` to three values,
 * and `out` must be writable.
 */
enum UmStatus um_tensor_new(const uint32_t *coords,
                            const float *features,
                            size_t n,
                            size_t channels,
                            const uint32_t *grid,
                            struct UmTensor **out);

/**
 * Reads an SVT1 file.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` writable.
 */
enum UmStatus um_tensor_read(const char *path, struct UmTensor **out);

/**
 * Number of voxels; 0 for null.
 *
 * # Safety
 * `t` must be null or a live tensor handle.
 */
size_t um_tensor_len(const struct UmTensor *t);

/**
 * Feature width; 0 for null.
 *
 * # Safety
 * `t` must be null or a live tensor handle.
 */
size_t um_tensor_channels(const struct UmTensor *t);

/**
 * # Safety
 * `t` must be null or a handle not yet freed.
 */
void um_tensor_free(struct UmTensor *t);

/**
 * Writes the serialization permutation (`perm[k]` is the row at position
 * `k`) into `perm`, which must hold at least `um_tensor_len(t)` entries.
 *
 * # Safety
 * `t` must be a live tensor handle and `perm` writable for `capacity` entries.
 */
enum UmStatus um_serialize(const struct UmTensor *t,
                           enum UmCurve curve,
                           size_t *perm,
                           size_t capacity);

/**
 * Seeds the default backbone (strides 1, 2, 2 with 128 channels).
 *
 * # Safety
 * `out` must be writable.
 */
enum UmStatus um_backbone_new(uint64_t seed, struct UmBackbone **out);

/**
 * Seeds a backbone from a `key = value` config file.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` writable.
 */
enum UmStatus um_backbone_from_config(const char *path, struct UmBackbone **out);

/**
 * Input feature width the backbone expects; 0 for null.
 *
 * # Safety
 * `b` must be null or a live backbone handle.
 */
size_t um_backbone_channels(const struct UmBackbone *b);

/**
 * # Safety
 * `b` must be null or a handle not yet freed.
 */
void um_backbone_free(struct UmBackbone *b);

/**
 * Runs the backbone on `t` and returns the BEV map.
 *
 * # Safety
 * `b` and `t` must be live handles and `out` writable.
 */
enum UmStatus um_backbone_forward(const struct UmBackbone *b,
                                  const struct UmTensor *t,
                                  struct UmBev **out);

/**
 * Writes `(X, Y, C)` into `shape`.
 *
 * # Safety
 * `bev` must be a live handle and `shape` writable for three entries.
 */
enum UmStatus um_bev_shape(const struct UmBev *bev, size_t *shape);

/**
 * Row-major `(X, Y, C)` data, owned by the handle; null for null.
 *
 * # Safety
 * `bev` must be null or a live handle.
 */
const float *um_bev_data(const struct UmBev *bev);

/**
 * # Safety
 * `bev` must be null or a handle not yet freed.
 */
void um_bev_free(struct UmBev *bev);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* UNIMAMBA_H */
