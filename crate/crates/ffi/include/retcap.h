#ifndef RETCAP_H
#define RETCAP_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Status codes returned by every fallible function.
typedef enum RetcapStatus {
  RETCAP_STATUS_OK = 0,
  RETCAP_STATUS_NULL_ARGUMENT = 1,
  RETCAP_STATUS_INVALID_UTF8 = 2,
  RETCAP_STATUS_IO = 3,
  RETCAP_STATUS_FORMAT = 4,
  RETCAP_STATUS_CONFIG = 5,
  // Shape, index or length of an input is wrong.
  RETCAP_STATUS_SHAPE = 6,
  RETCAP_STATUS_CONTRACT = 7,
  RETCAP_STATUS_NUMERIC = 8,
  RETCAP_STATUS_PANIC = 9,
} RetcapStatus;

// A loaded checkpoint.
typedef struct RetcapModel RetcapModel;

// Corpus scores of a set of captions.
typedef struct RetcapScores {
  double bleu1;
  double bleu2;
  double bleu3;
  double bleu4;
  double cider;
  double rouge_l;
} RetcapScores;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or null. The pointer is
// valid until the next call into the library on the same thread.
const char *retcap_last_error(void);

// Library version as a static NUL-terminated string.
const char *retcap_version(void);

// Loads a checkpoint into `*out`.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum RetcapStatus retcap_model_load(const char *path, struct RetcapModel **out);

// Releases a model. Null is ignored.
//
// # Safety
// `model` must come from [`retcap_model_load`] and not be used afterwards.
void retcap_model_free(struct RetcapModel *model);

// Vocabulary size, or 0 for a null model.
//
// # Safety
// `model` must be null or a live handle.
size_t retcap_model_vocab_size(const struct RetcapModel *model);

// Number of `f32` values the model expects per visual input, or 0 for a
// null model.
//
// # Safety
// `model` must be null or a live handle.
size_t retcap_model_input_len(const struct RetcapModel *model);

// Captions the GTEN tensor at `image_path`. `beam` 1 is greedy decoding.
// On success `*out` holds a string to release with [`retcap_string_free`].
//
// # Safety
// `model` must be a live handle, the strings NUL-terminated and `out` valid.
enum RetcapStatus retcap_generate(const struct RetcapModel *model,
                                  const char *image_path,
                                  const char *keywords,
                                  size_t beam,
                                  char **out);

// Like [`retcap_generate`] but reads the input from memory: `len` values in
// row-major `[H, W, C]` order, `len` equal to [`retcap_model_input_len`].
//
// # Safety
// `data` must point to `len` readable floats; see [`retcap_generate`].
enum RetcapStatus retcap_generate_from_data(const struct RetcapModel *model,
                                            const float *data,
                                            size_t len,
                                            const char *keywords,
                                            size_t beam,
                                            char **out);

// Writes the GCA gate of one input as an 8-bit PGM at `pgm_path`.
//
// # Safety
// `model` must be a live handle and the strings NUL-terminated.
enum RetcapStatus retcap_export_gate(const struct RetcapModel *model,
                                     const char *image_path,
                                     const char *keywords,
                                     const char *pgm_path);

// Scores `n` hypothesis captions against one reference each. Captions are
// tokenized by the same normalization used for training data.
//
// # Safety
// `hyps` and `refs` must each point to `n` NUL-terminated strings and
// `out` must be valid.
enum RetcapStatus retcap_score(const char *const *hyps,
                               const char *const *refs,
                               size_t n,
                               struct RetcapScores *out);

// Releases a string returned by the library. Null is ignored.
//
// # Safety
// `s` must come from this library and not be used afterwards.
void retcap_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* RETCAP_H */
