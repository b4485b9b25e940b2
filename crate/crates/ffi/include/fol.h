#ifndef FOL_H
#define FOL_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/*
 An immutable descriptor index.
 */
typedef struct FolIndex FolIndex;

/*
 A FOLT tensor read from disk.
 */
typedef struct FolTensor FolTensor;

typedef int32_t FolStatus;

#define FOL_OK 0

#define FOL_ERR_NULL_POINTER 1

#define FOL_ERR_IO 2

#define FOL_ERR_LOAD 3

#define FOL_ERR_DIMENSION 4

#define FOL_ERR_DEGENERATE 5

#define FOL_ERR_INVALID_ARGUMENT 6

#define FOL_ERR_DUPLICATE_ID 7

#define FOL_ERR_PARSE 8

#define FOL_ERR_UTF8 9

#define FOL_ERR_BUFFER_TOO_SMALL 10

#define FOL_ERR_PANIC 11

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Message of the last failed call on this thread, or NULL. The pointer
 stays valid until the next failing call on the same thread.
 */
const char *fol_last_error_message(void);

/*
 Reads a FOLT file into a new tensor handle.

 # Safety
 `path` must be a NUL-terminated string and `out` a valid pointer.
 */
FolStatus fol_tensor_read(const char *path, struct FolTensor **out);

/*
 # Safety
 `tensor` must come from `fol_tensor_read` and not be freed.
 */
size_t fol_tensor_rank(const struct FolTensor *tensor);

/*
 Copies up to `capacity` dimensions into `dims`.

 # Safety
 `tensor` must be a live handle and `dims` valid for `capacity` writes.
 */
FolStatus fol_tensor_shape(const struct FolTensor *tensor, size_t *dims, size_t capacity);

/*
 # Safety
 `tensor` must be a live handle.
 */
size_t fol_tensor_numel(const struct FolTensor *tensor);

/*
 Row-major payload, valid while the handle lives.

 # Safety
 `tensor` must be a live handle.
 */
const float *fol_tensor_data(const struct FolTensor *tensor);

/*
 # Safety
 `tensor` must come from `fol_tensor_read` or be NULL.
 */
void fol_tensor_free(struct FolTensor *tensor);

/*
 Log-domain Sinkhorn on `n x cols` logits (last column is the dustbin).
 Writes the plan to `out_plan` (`n * cols` values) and 1 or 0 to
 `out_converged`.

 # Safety
 Buffers must hold the stated number of elements.
 */
FolStatus fol_sinkhorn(const double *logits,
                       size_t n,
                       size_t cols,
                       size_t max_iterations,
                       double tolerance,
                       double *out_plan,
                       int32_t *out_converged);

/*
 `L2Norm([scene ; L2Norm(flatten(clusters))])` for an `m x d` cluster
 block. `out` receives `scene_len + m * d` values.

 # Safety
 Buffers must hold the stated number of elements.
 */
FolStatus fol_global_descriptor(const double *scene,
                                size_t scene_len,
                                const double *clusters,
                                size_t m,
                                size_t d,
                                double *out,
                                size_t out_len);

/*
 Top-`fraction` binarization of an `h x w` grid of nonnegative weights
 (normalized internally). `out` receives `h * w` zeros and ones.

 # Safety
 Buffers must hold `h * w` elements.
 */
FolStatus fol_binarize_topk(const double *weights,
                            size_t h,
                            size_t w,
                            double fraction,
                            double *out);

/*
 Builds an index from `n` unit-norm descriptors of dimension `d`.

 # Safety
 `ids` must hold `n` NUL-terminated strings and `descriptors` `n * d`
 values; `out` must be valid.
 */
FolStatus fol_index_build(const char *const *ids,
                          const double *descriptors,
                          size_t n,
                          size_t d,
                          struct FolIndex **out);

/*
 # Safety
 `index` must be a live handle.
 */
size_t fol_index_len(const struct FolIndex *index);

/*
 Id of row `row`, valid while the handle lives; NULL when out of range.

 # Safety
 `index` must be a live handle.
 */
const char *fol_index_id(const struct FolIndex *index, size_t row);

/*
 Top-`k` search. Writes up to `k` row numbers and similarities, best
 first, and the number written to `out_count`.

 # Safety
 `query` must hold `d` values; `out_rows` and `out_sims` `k` elements.
 */
FolStatus fol_index_query(const struct FolIndex *index,
                          const double *query,
                          size_t d,
                          size_t k,
                          size_t *out_rows,
                          double *out_sims,
                          size_t *out_count);

/*
 # Safety
 `index` must come from `fol_index_build` or be NULL.
 */
void fol_index_free(struct FolIndex *index);

/*
 Mutual nearest-neighbour matching between `na x d` and `nb x d` sets of
 unit rows. Writes the sum of matched similarities, the match count and
 the number of pairwise comparisons performed.

 # Safety
 `a` must hold `na * d` values, `b` `nb * d`; outputs must be valid.
 */
FolStatus fol_mnn_score(const double *a,
                        size_t na,
                        const double *b,
                        size_t nb,
                        size_t d,
                        double *out_score,
                        size_t *out_matches,
                        uint64_t *out_comparisons);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* FOL_H */
