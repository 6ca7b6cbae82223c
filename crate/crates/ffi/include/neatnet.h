#ifndef NEATNET_H
#define NEATNET_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes. Zero is success.
 */
typedef enum NnStatus {
  NN_STATUS_OK = 0,
  NN_STATUS_NULL_POINTER = 1,
  NN_STATUS_INVALID_UTF8 = 2,
  NN_STATUS_IO = 3,
  NN_STATUS_BAD_MODEL = 4,
  NN_STATUS_BAD_INPUT = 5,
  NN_STATUS_UNKNOWN_TEMPLATE = 6,
  NN_STATUS_MISMATCH = 7,
  NN_STATUS_BUFFER_TOO_SMALL = 8,
  NN_STATUS_PANIC = 9,
} NnStatus;

/**
 * A loaded model. Opaque to C.
 */
typedef struct NnModel NnModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *nn_version(void);

/**
 * Message of the last failed call on this thread, or NULL. Valid until the
 * next call into the library from the same thread.
 */
const char *nn_last_error(void);

/**
 * Loads a model bundle from `path` into `*out`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum NnStatus nn_model_load(const char *path, struct NnModel **out);

/**
 * Releases a handle from [`nn_model_load`]. NULL is ignored.
 *
 * # Safety
 * `model` must come from [`nn_model_load`] and not be used afterwards.
 */
void nn_model_free(struct NnModel *model);

/**
 * Width of the preference vector.
 *
 * # Safety
 * `model` must be a live handle and `out` a valid pointer.
 */
enum NnStatus nn_model_latent_dim(const struct NnModel *model, size_t *out);

/**
 * Number of objects in template `template_id`.
 *
 * # Safety
 * `model` must be a live handle, `template_id` a NUL-terminated string and
 * `out` a valid pointer.
 */
enum NnStatus nn_model_template_len(const struct NnModel *model,
                                    const char *template_id,
                                    size_t *out);

/**
 * Infers the posterior from a JSON array of scenes
 * (`[{"template", "objects": [{"name", "position"}]}]`) into `mu` and
 * `logvar`, each of length `dim`.
 *
 * # Safety
 * `model` must be a live handle, `scenes_json` a NUL-terminated string and
 * `mu`/`logvar` valid for `dim` writes.
 */
enum NnStatus nn_model_infer(const struct NnModel *model,
                             const char *scenes_json,
                             double *mu,
                             double *logvar,
                             size_t dim);

/**
 * Decodes template `template_id` for preference vector `mu` (length `dim`) into
 * `positions`, row-major with one row per template object. `*written`
 * receives the number of values stored.
 *
 * # Safety
 * `model` must be a live handle, `template_id` a NUL-terminated string, `mu`
 * valid for `dim` reads and `positions` for `capacity` writes.
 */
enum NnStatus nn_model_decode(const struct NnModel *model,
                              const char *template_id,
                              const double *mu,
                              size_t dim,
                              double *positions,
                              size_t capacity,
                              size_t *written);

/**
 * Runs a `/predict` request body and returns the JSON reply in `*out`,
 * to be released with [`nn_string_free`].
 *
 * # Safety
 * `model` must be a live handle, `request_json` a NUL-terminated string
 * and `out` a valid pointer.
 */
enum NnStatus nn_model_predict_json(const struct NnModel *model,
                                    const char *request_json,
                                    char **out);

/**
 * Releases a string returned by this library. NULL is ignored.
 *
 * # Safety
 * `s` must come from this library and not be used afterwards.
 */
void nn_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* NEATNET_H */
