#ifndef DSA_FFI_H
#define DSA_FFI_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

#define DSA_OK 0

#define DSA_ERR_USAGE 1

#define DSA_ERR_DATA 2

#define DSA_ERR_NUMERIC 3

/**
 * Loaded dataset. Opaque.
 */
typedef struct DsaDataset DsaDataset;

/**
 * Loaded model checkpoint. Opaque.
 */
typedef struct DsaModel DsaModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Loads a model checkpoint from `path` into `*out`.
 *
 * # Safety
 * `path` points to a NUL-terminated string and `out` to a writable slot.
 */
int32_t dsa_model_load(const char *path, struct DsaModel **out);

/**
 * Releases a model handle. Null is a no-op.
 *
 * # Safety
 * `model` must come from `dsa_model_load` and not be used afterwards.
 */
void dsa_model_free(struct DsaModel *model);

/**
 * Loads a dataset from `path` into `*out`.
 *
 * # Safety
 * `path` points to a NUL-terminated string and `out` to a writable slot.
 */
int32_t dsa_dataset_load(const char *path, struct DsaDataset **out);

/**
 * Releases a dataset handle. Null is a no-op.
 *
 * # Safety
 * `dataset` must come from `dsa_dataset_load` and not be used afterwards.
 */
void dsa_dataset_free(struct DsaDataset *dataset);

/**
 * Number of examples in a dataset; 0 for a null handle.
 *
 * # Safety
 * `dataset` must be a live handle or null.
 */
uintptr_t dsa_dataset_len(const struct DsaDataset *dataset);

/**
 * Scores `model` on `dataset` and writes the fairness report to `*out`
 * as a JSON string (caller frees with `dsa_string_free`).
 *
 * # Safety
 * `model` and `dataset` must be live handles, `out` a writable slot.
 */
int32_t dsa_eval_json(const struct DsaModel *model, const struct DsaDataset *dataset, char **out);

/**
 * Last error message on this thread, or null if none. Caller frees the
 * string with `dsa_string_free`.
 */
char *dsa_last_error(void);

/**
 * Library version as a static string. Do not free.
 */
const char *dsa_version(void);

/**
 * Releases a string returned by this library. Null is a no-op.
 *
 * # Safety
 * `s` must have been returned by this library and not freed before.
 */
void dsa_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DSA_FFI_H */
