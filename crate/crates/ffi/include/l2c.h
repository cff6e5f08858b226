/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#ifndef L2C_H
#define L2C_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result of every fallible call.
typedef enum L2cStatus {
  L2C_STATUS_OK = 0,
  // A required pointer argument was NULL.
  L2C_STATUS_NULL_ARGUMENT = 1,
  // A string argument was not valid UTF-8.
  L2C_STATUS_INVALID_UTF8 = 2,
  // An argument was malformed or out of range.
  L2C_STATUS_INVALID_ARGUMENT = 3,
  // Dataset contents were unusable.
  L2C_STATUS_DATA = 4,
  // A file could not be read or written.
  L2C_STATUS_IO = 5,
  // A checkpoint was missing, corrupt or from another format version.
  L2C_STATUS_CHECKPOINT = 6,
  // A numerical failure inside the model, such as a non-finite value.
  L2C_STATUS_NUMERIC = 7,
  // Gradient checks ran but some exceeded the tolerance.
  L2C_STATUS_VERIFICATION_FAILED = 8,
  // An internal panic was caught at the boundary.
  L2C_STATUS_PANIC = 9,
} L2cStatus;

// A loaded checkpoint. Opaque to C.
typedef struct L2cModel L2cModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message describing the last failure on this thread, or NULL if none.
// The pointer stays valid until the next failing call on this thread.
const char *l2c_last_error_message(void);

// Library version as a static string.
const char *l2c_version(void);

// Releases a string returned by this library. NULL is ignored.
//
// # Safety
// `s` is NULL or a pointer previously returned by this library and not yet freed.
void l2c_string_free(char *s);

// Loads the checkpoint directory `dir` into a new handle stored in `*out`.
//
// # Safety
// `dir` is a valid string and `out` a valid pointer.
enum L2cStatus l2c_model_load(const char *dir, struct L2cModel **out);

// Releases a model handle. NULL is ignored.
//
// # Safety
// `model` is NULL or a handle from [`l2c_model_load`] that has not been freed.
void l2c_model_free(struct L2cModel *model);

// Number of tokens, specials included, in the model's vocabulary.
//
// # Safety
// `model` is a live handle and `out` a valid pointer.
enum L2cStatus l2c_model_vocab_size(const struct L2cModel *model, size_t *out);

// Greedy comparison caption for two creatures given as JSON specs.
// The caption is stored in `*out` and must be released with [`l2c_string_free`].
//
// # Safety
// `model` is a live handle, the specs valid strings and `out` a valid pointer.
enum L2cStatus l2c_model_caption_pair(const struct L2cModel *model,
                                      const char *spec_a_json,
                                      const char *spec_b_json,
                                      char **out);

// Scores the model on a split (`train`, `val` or `test`) of a dataset
// directory. The report is JSON, stored in `*out_json`.
//
// # Safety
// `model` is a live handle, strings are valid and `out_json` a valid pointer.
enum L2cStatus l2c_model_evaluate(const struct L2cModel *model,
                                  const char *data_dir,
                                  const char *split,
                                  char **out_json);

// Sentence BLEU-4 of `hyp` against `n_refs` references.
//
// # Safety
// `hyp` is a valid string, `refs` points to `n_refs` valid strings and `out` is valid.
enum L2cStatus l2c_bleu4(const char *hyp, const char *const *refs, size_t n_refs, double *out);

// ROUGE-L F-score (recall weighted by `beta`) of `hyp`, best over the references.
//
// # Safety
// As for [`l2c_bleu4`].
enum L2cStatus l2c_rouge_l(const char *hyp,
                           const char *const *refs,
                           size_t n_refs,
                           double beta,
                           double *out);

// Writes a synthetic dataset (default 80/10/10 split) into `out_dir`.
//
// # Safety
// `out_dir` is a valid string.
enum L2cStatus l2c_generate_dataset(uint64_t seed,
                                    size_t n_pairs,
                                    size_t n_singles,
                                    const char *out_dir);

// Runs every gradient check. Stores the number of failing checks and the
// worst relative error; returns `VerificationFailed` if any check failed.
//
// # Safety
// Output pointers are NULL or valid.
enum L2cStatus l2c_gradcheck(uint64_t seed, size_t *out_failed, double *out_max_error);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* L2C_H */
