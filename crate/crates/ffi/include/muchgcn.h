#ifndef MUCHGCN_H
#define MUCHGCN_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum MgStatus {
  MG_STATUS_OK = 0,
  MG_STATUS_NULL_POINTER = 1,
  MG_STATUS_INVALID_UTF8 = 2,
  MG_STATUS_INVALID_CONFIG = 3,
  MG_STATUS_DATASET_ERROR = 4,
  MG_STATUS_IO_ERROR = 5,
  MG_STATUS_SHAPE_ERROR = 6,
  MG_STATUS_NUMERIC_ERROR = 7,
  MG_STATUS_CHECKPOINT_ERROR = 8,
  MG_STATUS_OUT_OF_RANGE = 9,
  MG_STATUS_PANIC = 10,
} MgStatus;

/**
 * Node-feature recipe for TU datasets.
 */
typedef enum MgFeatures {
  /**
   * One-hot node labels.
   */
  MG_FEATURES_BIO = 0,
  /**
   * One-hot degree plus clustering coefficient.
   */
  MG_FEATURES_SOCIAL = 1,
  /**
   * Degree and clustering coefficient.
   */
  MG_FEATURES_STRUCTURAL = 2,
} MgFeatures;

/**
 * Synthetic graph family.
 */
typedef enum MgFamily {
  MG_FAMILY_CYCLES_VS_CHORDS = 0,
  MG_FAMILY_K_COMMUNITIES = 1,
} MgFamily;

/**
 * Opaque dataset handle.
 */
typedef struct MgDataset MgDataset;

/**
 * Opaque model handle.
 */
typedef struct MgModel MgModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version; a static string that must not be freed.
 */
const char *mg_version(void);

/**
 * Message of the last failed call on this thread, or null if none. The
 * returned copy is owned by the caller.
 */
char *mg_last_error(void);

/**
 * # Safety
 * `s` is null or a string returned by this library and not yet freed.
 */
void mg_string_free(char *s);

/**
 * Parses the TU dataset `name` in directory `dir`. `max_nodes` of 0 keeps
 * every graph; otherwise larger graphs are dropped.
 *
 * # Safety
 * `dir` and `name` are NUL-terminated strings; `out` is writable.
 */
enum MgStatus mg_dataset_load_tu(const char *dir,
                                 const char *name,
                                 enum MgFeatures features,
                                 size_t max_nodes,
                                 struct MgDataset **out);

/**
 * # Safety
 * `out` is writable.
 */
enum MgStatus mg_dataset_generate(enum MgFamily family,
                                  size_t count,
                                  uint64_t seed,
                                  struct MgDataset **out);

/**
 * Number of graphs, or 0 for a null handle.
 *
 * # Safety
 * `ds` is null or a live dataset handle.
 */
size_t mg_dataset_len(const struct MgDataset *ds);

/**
 * # Safety
 * `ds` is null or a live dataset handle.
 */
size_t mg_dataset_num_classes(const struct MgDataset *ds);

/**
 * Graph label at `index`, or -1 when out of range or null.
 *
 * # Safety
 * `ds` is null or a live dataset handle.
 */
int64_t mg_dataset_label(const struct MgDataset *ds, size_t index);

/**
 * # Safety
 * `ds` is null or a handle from this library, not used afterwards.
 */
void mg_dataset_free(struct MgDataset *ds);

/**
 * Fresh model for `ds` from the `model` and `train` sections of a run
 * config given as JSON (`"{}"` takes every default).
 *
 * # Safety
 * `config_json` is a NUL-terminated string, `ds` a live handle, `out`
 * writable.
 */
enum MgStatus mg_model_new(const char *config_json,
                           const struct MgDataset *ds,
                           uint64_t seed,
                           struct MgModel **out);

/**
 * Loads a checkpoint written for the architecture that `config_json`
 * yields on `ds`.
 *
 * # Safety
 * `config_json` and `path` are NUL-terminated strings, `ds` a live handle,
 * `out` writable.
 */
enum MgStatus mg_model_load(const char *config_json,
                            const struct MgDataset *ds,
                            const char *path,
                            struct MgModel **out);

/**
 * # Safety
 * `model` is a live handle and `path` a NUL-terminated string.
 */
enum MgStatus mg_model_save(const struct MgModel *model, const char *path);

/**
 * # Safety
 * `model` is null or a live model handle.
 */
size_t mg_model_num_classes(const struct MgModel *model);

/**
 * Eval-mode logits of graph `index` of `ds`, written to `logits[0..len]`.
 * `len` must equal the model's class count.
 *
 * # Safety
 * `model` and `ds` are live handles; `logits` points to `len` writable
 * doubles.
 */
enum MgStatus mg_model_predict(const struct MgModel *model,
                               const struct MgDataset *ds,
                               size_t index,
                               double *logits,
                               size_t len);

/**
 * # Safety
 * `model` is null or a handle from this library, not used afterwards.
 */
void mg_model_free(struct MgModel *model);

/**
 * Cross-validates on `ds` with the run config in `config_json` and
 * returns the summary as a JSON string owned by the caller. Output paths
 * in the config are honored.
 *
 * # Safety
 * `config_json` is a NUL-terminated string, `ds` a live handle,
 * `summary_json` writable.
 */
enum MgStatus mg_train_cv(const char *config_json,
                          const struct MgDataset *ds,
                          size_t parallel_folds,
                          char **summary_json);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MUCHGCN_H */
