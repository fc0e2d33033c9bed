#ifndef DRCLIP_H
#define DRCLIP_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum DrStatus {
  DR_STATUS_OK = 0,
  /**
   * Null pointer, zero size or other unusable argument.
   */
  DR_STATUS_INVALID_ARGUMENT = 1,
  /**
   * Well-formed call rejected by a validation rule.
   */
  DR_STATUS_VALIDATION = 2,
  DR_STATUS_IO = 3,
  /**
   * Non-finite value or other numeric failure.
   */
  DR_STATUS_NUMERIC = 4,
  DR_STATUS_NOT_FOUND = 5,
  DR_STATUS_BUFFER_TOO_SMALL = 6,
  /**
   * A Rust panic was caught at the boundary.
   */
  DR_STATUS_INTERNAL = 7,
} DrStatus;

/**
 * Inference handle for a trained student.
 */
typedef struct DrModel DrModel;

/**
 * Read-only handle to a reinforced store.
 */
typedef struct DrStore DrStore;

/**
 * Loss terms of one batch.
 */
typedef struct DrLossParts {
  double total;
  double clip;
  /**
   * NaN when no teachers were given.
   */
  double distill;
} DrLossParts;

/**
 * Shape of a store.
 */
typedef struct DrStoreInfo {
  size_t records;
  size_t teachers;
  /**
   * Sum of the teacher widths.
   */
  size_t ensemble_dim;
  size_t augmentations;
  size_t syn_captions;
} DrStoreInfo;

typedef struct DrModelInfo {
  size_t embed_dim;
  uint32_t image_size;
  double temperature;
  bool reparameterized;
} DrModelInfo;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or NULL. Valid until the
 * next drclip call on the same thread; do not free.
 */
const char *dr_last_error(void);

/**
 * Releases a string returned by this library. NULL is ignored.
 *
 * # Safety
 * `s` must come from this library and not have been freed.
 */
void dr_string_free(char *s);

/**
 * Library version as a static NUL-terminated string.
 */
const char *dr_version(void);

/**
 * Encodes `n` floats to bfloat16 bit patterns with round-to-nearest-even
 * (`truncate` = 0) or truncation.
 *
 * # Safety
 * `values` holds `n` floats and `out` holds `n` uint16 values.
 */
enum DrStatus dr_bf16_encode(const float *values, size_t n, bool truncate, uint16_t *out);

/**
 * # Safety
 * `bits` holds `n` values and `out` holds `n` floats.
 */
enum DrStatus dr_bf16_decode(const uint16_t *bits, size_t n, float *out);

/**
 * Symmetric CLIP loss and multi-teacher distillation on one batch.
 *
 * `student_img` and `student_txt` are `batch x dim` unit rows.
 * `teacher_img` and `teacher_txt` are the K teacher blocks laid out one after
 * another, block k being `batch x teacher_dims[k]`. `teacher_temps` has K
 * entries. With `k = 0` the teacher arrays may be NULL and `lambda` must be 0.
 * Computed in double precision.
 *
 * # Safety
 * All arrays must hold the sizes described above; `out` must be valid.
 */
enum DrStatus dr_loss(const float *student_img,
                      const float *student_txt,
                      size_t batch,
                      size_t dim,
                      const float *teacher_img,
                      const float *teacher_txt,
                      const size_t *teacher_dims,
                      const double *teacher_temps,
                      size_t k,
                      double student_temp,
                      double lambda,
                      struct DrLossParts *out);

/**
 * Concatenates K unit vectors and scales by 1/sqrt(K). `vectors` holds the
 * blocks back to back; `out` receives `sum(dims)` floats.
 *
 * # Safety
 * `vectors` and `out` hold `sum(dims)` floats; `dims` holds `k` entries.
 */
enum DrStatus dr_ensemble_embed(const float *vectors,
                                const size_t *dims,
                                size_t k,
                                float *out,
                                size_t out_len);

/**
 * # Safety
 * `path` is a NUL-terminated UTF-8 string; `out` must be valid.
 */
enum DrStatus dr_store_open(const char *path, struct DrStore **out);

/**
 * # Safety
 * `store` comes from [`dr_store_open`] and is not used afterwards. NULL is ignored.
 */
void dr_store_free(struct DrStore *store);

/**
 * # Safety
 * `store` and `out` must be valid.
 */
enum DrStatus dr_store_info(const struct DrStore *store, struct DrStoreInfo *out);

/**
 * Writes record ids in storage order; `out` holds at least `records` ids.
 *
 * # Safety
 * `out` holds `out_len` values.
 */
enum DrStatus dr_store_ids(const struct DrStore *store, uint64_t *out, size_t out_len);

/**
 * Manifest as JSON; free with [`dr_string_free`].
 *
 * # Safety
 * `store` and `out` must be valid.
 */
enum DrStatus dr_store_manifest_json(const struct DrStore *store, char **out);

/**
 * Per-section byte totals as JSON; free with [`dr_string_free`].
 *
 * # Safety
 * `store` and `out` must be valid.
 */
enum DrStatus dr_store_stats_json(const struct DrStore *store, char **out);

/**
 * Caption `index` of record `id`: 0 is the real caption, 1..=S the synthetic ones.
 *
 * # Safety
 * `store` and `out` must be valid.
 */
enum DrStatus dr_store_caption(const struct DrStore *store, uint64_t id, size_t index, char **out);

/**
 * Decoded ensemble embedding (all teachers, back to back) of record `id`.
 * `kind` 0: augmentation `index`; 1: caption `index` (0 real, 1..=S synthetic).
 * `out` holds `ensemble_dim` floats.
 *
 * # Safety
 * `out` holds `out_len` floats.
 */
enum DrStatus dr_store_embedding(const struct DrStore *store,
                                 uint64_t id,
                                 uint32_t kind,
                                 size_t index,
                                 float *out,
                                 size_t out_len);

/**
 * Rebuilds augmented view `view` of record `id` from its stored parameters.
 * Writes RGB8 pixels and the view size; call with `out` NULL and `out_len` 0
 * to query the size (returns `BufferTooSmall` after filling width/height).
 *
 * # Safety
 * `out` holds `out_len` bytes; `width` and `height` must be valid.
 */
enum DrStatus dr_store_view(const struct DrStore *store,
                            uint64_t id,
                            size_t view,
                            uint8_t *out,
                            size_t out_len,
                            uint32_t *width,
                            uint32_t *height);

/**
 * # Safety
 * `path` is a NUL-terminated UTF-8 string; `out` must be valid.
 */
enum DrStatus dr_model_load(const char *path, struct DrModel **out);

/**
 * Fresh randomly initialized student with the default configuration.
 *
 * # Safety
 * `out` must be valid.
 */
enum DrStatus dr_model_new(uint64_t seed, struct DrModel **out);

/**
 * # Safety
 * `model` comes from this library and is not used afterwards. NULL is ignored.
 */
void dr_model_free(struct DrModel *model);

/**
 * # Safety
 * `model` and `out` must be valid.
 */
enum DrStatus dr_model_info(const struct DrModel *model, struct DrModelInfo *out);

/**
 * Unit text embeddings, `n x embed_dim`.
 *
 * # Safety
 * `texts` holds `n` NUL-terminated UTF-8 strings; `out` holds `out_len` floats.
 */
enum DrStatus dr_model_encode_texts(const struct DrModel *model,
                                    const char *const *texts,
                                    size_t n,
                                    float *out,
                                    size_t out_len);

/**
 * Unit image embeddings, `n x embed_dim`, from `n` RGB8 images of
 * `image_size x image_size` laid out back to back.
 *
 * # Safety
 * `pixels` holds `n * image_size^2 * 3` bytes; `out` holds `out_len` floats.
 */
enum DrStatus dr_model_encode_images(const struct DrModel *model,
                                     const uint8_t *pixels,
                                     size_t n,
                                     float *out,
                                     size_t out_len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DRCLIP_H */
