#ifndef SKILLEVAL_H
#define SKILLEVAL_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

/*
 Result code of every call.
 */
typedef enum SkStatus {
  SK_STATUS_OK = 0,
  SK_STATUS_NULL_POINTER = 1,
  SK_STATUS_INVALID_ARGUMENT = 2,
  SK_STATUS_IO = 3,
  SK_STATUS_FORMAT = 4,
  SK_STATUS_DIMENSION = 5,
  SK_STATUS_NUMERIC = 6,
  SK_STATUS_CONFIG = 7,
  SK_STATUS_BUFFER_TOO_SMALL = 8,
  SK_STATUS_PANIC = 9,
} SkStatus;

/*
 Action-unit LSTM classifier.
 */
typedef struct SkAuNetwork SkAuNetwork;

/*
 PCA + GMM Fisher Vector encoder.
 */
typedef struct SkEncoder SkEncoder;

/*
 Siamese LSTM over action-unit feature lists.
 */
typedef struct SkSiamese SkSiamese;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Message of the last failed call on this thread, or NULL. The pointer is
 valid until the next call into this library from the same thread.
 */
const char *sk_last_error(void);

/*
 Library version as a static NUL-terminated string.
 */
const char *sk_version(void);

/*
 Loads an encoder checkpoint. On success `*out` owns a new handle.
 */
enum SkStatus sk_encoder_load(const char *path, struct SkEncoder **out);

void sk_encoder_free(struct SkEncoder *encoder);

enum SkStatus sk_encoder_dims(const struct SkEncoder *encoder, size_t *d_raw, size_t *fv_dim);

/*
 Encodes `n_frames` raw frames of width `d_raw` into `out`
 (`n_frames * fv_dim` doubles).
 */
enum SkStatus sk_encoder_encode(const struct SkEncoder *encoder,
                                const double *frames,
                                size_t n_frames,
                                size_t d_raw,
                                double *out,
                                size_t out_len);

enum SkStatus sk_au_load(const char *path, struct SkAuNetwork **out);

void sk_au_free(struct SkAuNetwork *net);

enum SkStatus sk_au_dims(const struct SkAuNetwork *net,
                         size_t *input_dim,
                         size_t *feature_dim,
                         size_t *num_classes);

/*
 Runs one encoded segment (`steps * input_dim`). Writes the action-unit
 feature (`feature_dim` doubles) to `feature` when it is non-NULL and the
 predicted class to `class_id` when it is non-NULL.
 */
enum SkStatus sk_au_forward(const struct SkAuNetwork *net,
                            const double *encoded,
                            size_t steps,
                            size_t input_dim,
                            double *feature,
                            size_t feature_len,
                            size_t *class_id);

enum SkStatus sk_siamese_load(const char *path, struct SkSiamese **out);

void sk_siamese_free(struct SkSiamese *net);

enum SkStatus sk_siamese_dims(const struct SkSiamese *net, size_t *input_dim, size_t *embed_dim);

/*
 Activity vector of one feature list (`n_units * input_dim`).
 */
enum SkStatus sk_siamese_embed(const struct SkSiamese *net,
                               const double *features,
                               size_t n_units,
                               size_t input_dim,
                               double *out,
                               size_t out_len);

/*
 Euclidean distance between the activity vectors of two feature lists;
 the lists may have different lengths.
 */
enum SkStatus sk_siamese_distance(const struct SkSiamese *net,
                                  const double *a,
                                  size_t n_a,
                                  const double *b,
                                  size_t n_b,
                                  size_t input_dim,
                                  double *distance);

/*
 Contrastive loss and its derivative in `distance`. `squared` selects the
 squared same-activity term instead of the linear one.
 */
enum SkStatus sk_contrastive_loss(double distance,
                                  uint8_t label,
                                  double margin,
                                  bool squared,
                                  double *loss,
                                  double *d_loss);

/*
 ROC AUC of `n` scores (higher means more likely positive) with 0/1 labels.
 */
enum SkStatus sk_roc_auc(const uint8_t *labels, const double *scores, size_t n, double *auc);

/*
 Mean-pooled, power-normalized cosine similarity of two feature lists.
 */
enum SkStatus sk_baseline_cosine(const double *a,
                                 size_t n_a,
                                 const double *b,
                                 size_t n_b,
                                 size_t dim,
                                 double alpha,
                                 double *similarity);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SKILLEVAL_H */
