#ifndef MDMT_H
#define MDMT_H

/* Generated by cbindgen; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum MdmtStatus {
  MDMT_STATUS_OK = 0,
  MDMT_STATUS_NULL_POINTER = 1,
  MDMT_STATUS_INVALID_UTF8 = 2,
  MDMT_STATUS_IO = 3,
  MDMT_STATUS_FORMAT = 4,
  MDMT_STATUS_UNKNOWN_LABEL = 5,
  MDMT_STATUS_INVALID_ARGUMENT = 6,
  MDMT_STATUS_PANIC = 7,
} MdmtStatus;

/**
 * Opaque handle: a checkpoint and the vocabulary it was trained with.
 */
typedef struct MdmtModel MdmtModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Loads a checkpoint and its vocabulary file. The vocabulary must be the
 * one the checkpoint was trained with.
 *
 * # Safety
 * Paths must be NUL-terminated strings; `out` must be writable.
 */
enum MdmtStatus mdmt_model_load(const char *checkpoint_path,
                                const char *vocab_path,
                                struct MdmtModel **out);

/**
 * Releases a model. Null is ignored.
 *
 * # Safety
 * `model` must come from [`mdmt_model_load`] and not be used afterwards.
 */
void mdmt_model_free(struct MdmtModel *model);

/**
 * Number of domain labels the model's vocabulary knows.
 *
 * # Safety
 * `model` must be a live handle; `out` must be writable.
 */
enum MdmtStatus mdmt_model_num_domains(const struct MdmtModel *model, size_t *out);

/**
 * Translates one whitespace-tokenized sentence. `domain` may be null for
 * no label. `beam` of 0 or 1 decodes greedily. The result is written to
 * `*out` and must be freed with [`mdmt_string_free`].
 *
 * # Safety
 * `model` must be a live handle; strings NUL-terminated; `out` writable.
 */
enum MdmtStatus mdmt_model_translate(const struct MdmtModel *model,
                                     const char *source,
                                     const char *domain,
                                     size_t beam,
                                     char **out);

/**
 * Frees a string returned by this library. Null is ignored.
 *
 * # Safety
 * `s` must come from this library and not be used afterwards.
 */
void mdmt_string_free(char *s);

/**
 * Corpus BLEU (13a tokenization, exponential smoothing) of `n` aligned
 * hypothesis/reference pairs, written to `*out` on the 0..100 scale.
 *
 * # Safety
 * `hyps` and `refs` must each point to `n` NUL-terminated strings.
 */
enum MdmtStatus mdmt_corpus_bleu(const char *const *hyps,
                                 const char *const *refs,
                                 size_t n,
                                 double *out);

/**
 * Sample standard deviation (denominator `n - 1`) of `n >= 2` values.
 *
 * # Safety
 * `values` must point to `n` doubles; `out` must be writable.
 */
enum MdmtStatus mdmt_robustness_std(const double *values, size_t n, double *out);

/**
 * Message of the last failure on this thread, or null if none. Valid until
 * the next failing call on the same thread.
 */
const char *mdmt_last_error_message(void);

/**
 * Library version as a static string.
 */
const char *mdmt_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MDMT_H */
