#ifndef BMM_H
#define BMM_H

/* Generated by cbindgen from src/lib.rs. Do not edit. */

#include <stddef.h>
#include <stdint.h>

/**
 * Status codes returned by every fallible call.
 */
typedef enum BmmStatus {
  BMM_STATUS_OK = 0,
  BMM_STATUS_NULL_ARGUMENT = 1,
  BMM_STATUS_INVALID_UTF8 = 2,
  BMM_STATUS_IO = 3,
  BMM_STATUS_FORMAT = 4,
  BMM_STATUS_VALIDATION = 5,
  BMM_STATUS_PARAMETER = 6,
  BMM_STATUS_INSUFFICIENT_SAMPLES = 7,
  BMM_STATUS_NUMERICAL = 8,
  BMM_STATUS_INFEASIBLE = 9,
  BMM_STATUS_INCOMPATIBLE = 10,
  BMM_STATUS_REFUSED = 11,
  BMM_STATUS_PANIC = 12,
} BmmStatus;

/**
 * Linkage used when merging leaves.
 */
typedef enum BmmLinkage {
  BMM_LINKAGE_CENTROID = 0,
  BMM_LINKAGE_WARD = 1,
} BmmLinkage;

/**
 * Feature matrix handle.
 */
typedef struct BmmFeatures BmmFeatures;

/**
 * Result of a match: the selected server rows and the manifest they form.
 */
typedef struct BmmSelection BmmSelection;

/**
 * Mode tree handle.
 */
typedef struct BmmTree BmmTree;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or null. The pointer
 * stays valid until the next failing call on the same thread.
 */
const char *bmm_last_error_message(void);

/**
 * Library version as a static string.
 */
const char *bmm_version(void);

/**
 * Reads a feature file; `.csv` paths are parsed as CSV, anything else as
 * the binary format.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a writable pointer.
 */
enum BmmStatus bmm_features_load(const char *path, struct BmmFeatures **out);

/**
 * Wraps `n x d` row-major values. Rows get ids `row0..` and the label
 * given in `label` (or `"default"` when null).
 *
 * # Safety
 * `values` must point to `n * d` floats; `label` is null or NUL-terminated.
 */
enum BmmStatus bmm_features_from_values(const float *values,
                                        size_t n,
                                        size_t d,
                                        const char *label,
                                        struct BmmFeatures **out);

/**
 * Number of rows, or 0 for a null handle.
 *
 * # Safety
 * `f` is null or a live handle.
 */
size_t bmm_features_rows(const struct BmmFeatures *f);

/**
 * Feature dimension, or 0 for a null handle.
 *
 * # Safety
 * `f` is null or a live handle.
 */
size_t bmm_features_dim(const struct BmmFeatures *f);

/**
 * # Safety
 * `f` is null or a handle not yet freed.
 */
void bmm_features_free(struct BmmFeatures *f);

/**
 * Balanced k-means into `leaves` clusters, then the agglomerative merge.
 *
 * # Safety
 * `server` must be a live handle and `out` a writable pointer.
 */
enum BmmStatus bmm_tree_build(const struct BmmFeatures *server,
                              size_t leaves,
                              uint64_t seed,
                              enum BmmLinkage linkage,
                              struct BmmTree **out);

/**
 * # Safety
 * `path` must be NUL-terminated and `out` writable.
 */
enum BmmStatus bmm_tree_load(const char *path, struct BmmTree **out);

/**
 * # Safety
 * `tree` must be a live handle and `path` NUL-terminated.
 */
enum BmmStatus bmm_tree_save(const struct BmmTree *tree, const char *path);

/**
 * # Safety
 * `tree` is null or a live handle.
 */
size_t bmm_tree_leaf_count(const struct BmmTree *tree);

/**
 * # Safety
 * `tree` is null or a live handle.
 */
size_t bmm_tree_node_count(const struct BmmTree *tree);

/**
 * # Safety
 * `tree` is null or a handle not yet freed.
 */
void bmm_tree_free(struct BmmTree *tree);

/**
 * Clusters the target into `target_clusters` modes and matches them
 * one-to-one to tree nodes. `eps_cov <= 0` selects the default.
 *
 * # Safety
 * `tree` and `target` must be live handles and `out` writable.
 */
enum BmmStatus bmm_match(const struct BmmTree *tree,
                         const struct BmmFeatures *target,
                         size_t target_clusters,
                         uint64_t seed,
                         double eps_cov,
                         struct BmmSelection **out);

/**
 * Number of selected server rows.
 *
 * # Safety
 * `sel` is null or a live handle.
 */
size_t bmm_selection_len(const struct BmmSelection *sel);

/**
 * Number of distinct matched nodes.
 *
 * # Safety
 * `sel` is null or a live handle.
 */
size_t bmm_selection_node_count(const struct BmmSelection *sel);

/**
 * Copies up to `cap` selected row indices (ascending) into `buf` and
 * returns the full count.
 *
 * # Safety
 * `sel` must be a live handle; `buf` must hold `cap` elements or be null
 * with `cap == 0`.
 */
size_t bmm_selection_rows(const struct BmmSelection *sel, size_t *buf, size_t cap);

/**
 * Sample id of the `i`-th selected row, or null when out of range. Owned
 * by the selection.
 *
 * # Safety
 * `sel` is null or a live handle.
 */
const char *bmm_selection_sample_id(const struct BmmSelection *sel, size_t i);

/**
 * Writes the selection as a manifest file.
 *
 * # Safety
 * `sel` must be a live handle and `path` NUL-terminated.
 */
enum BmmStatus bmm_selection_write_manifest(const struct BmmSelection *sel, const char *path);

/**
 * # Safety
 * `sel` is null or a handle not yet freed.
 */
void bmm_selection_free(struct BmmSelection *sel);

/**
 * FID between the Gaussian fits of `server[rows]` and the whole target.
 * With `rows` null and `nrows == 0` the whole server is used.
 *
 * # Safety
 * Handles must be live; `rows` must hold `nrows` indices; `out` writable.
 */
enum BmmStatus bmm_gap(const struct BmmFeatures *server,
                       const struct BmmFeatures *target,
                       const size_t *rows,
                       size_t nrows,
                       double eps_cov,
                       double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* BMM_H */
