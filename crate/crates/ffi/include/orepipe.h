#ifndef OREPIPE_H
#define OREPIPE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

typedef enum OrepipeStatus {
  OREPIPE_STATUS_OK = 0,
  OREPIPE_STATUS_NULL_POINTER = 1,
  OREPIPE_STATUS_INVALID_UTF8 = 2,
  OREPIPE_STATUS_INVALID_ARGUMENT = 3,
  OREPIPE_STATUS_DIMENSION_MISMATCH = 4,
  OREPIPE_STATUS_ZERO_VECTOR = 5,
  OREPIPE_STATUS_BUFFER_TOO_SMALL = 6,
  OREPIPE_STATUS_PANIC = 7,
  OREPIPE_STATUS_INTERNAL = 8,
} OrepipeStatus;

/**
 * Exact cosine index.
 */
typedef struct OrepipeIndex OrepipeIndex;

/**
 * Compiled keyword matcher.
 */
typedef struct OrepipeMatcher OrepipeMatcher;

/**
 * Paired t-test results.
 */
typedef struct OrepipeTTest {
  double t_stat;
  uint64_t df;
  /**
   * Zero when the probability underflows; the log10 fields stay finite.
   */
  double p_one_tail;
  double p_two_tail;
  double log10_p_one_tail;
  double log10_p_two_tail;
  double t_critical_one_tail;
  double t_critical_two_tail;
} OrepipeTTest;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version, a static string.
 */
const char *orepipe_version(void);

/**
 * Message for the last failed call on this thread, or null. Valid until the
 * next failing call on the same thread.
 */
const char *orepipe_last_error(void);

/**
 * Builds a matcher from `count` keywords. Keywords that normalize to the same
 * words are rejected. Counts follow [`orepipe_matcher_keyword`] order.
 */
enum OrepipeStatus orepipe_matcher_new(const char *const *keywords,
                                       size_t count,
                                       struct OrepipeMatcher **matcher);

void orepipe_matcher_free(struct OrepipeMatcher *matcher);

/**
 * Number of distinct keywords, or 0 for a null handle.
 */
size_t orepipe_matcher_len(const struct OrepipeMatcher *matcher);

/**
 * Normalized keyword `i`, owned by the matcher; null when out of range.
 */
const char *orepipe_matcher_keyword(const struct OrepipeMatcher *matcher, size_t i);

enum OrepipeStatus orepipe_matcher_is_match(const struct OrepipeMatcher *matcher,
                                            const char *text_in,
                                            bool *matched);

/**
 * Writes per-keyword occurrence counts into `counts`, which must hold
 * [`orepipe_matcher_len`] entries.
 */
enum OrepipeStatus orepipe_matcher_count(const struct OrepipeMatcher *matcher,
                                         const char *text_in,
                                         uint64_t *counts,
                                         size_t counts_len);

/**
 * Unit-norm hash embedding of `text` into `out_vec[0..dim]`.
 */
enum OrepipeStatus orepipe_hash_embed(const char *text_in, size_t dim, double *out_vec);

enum OrepipeStatus orepipe_cosine(const double *u, const double *v, size_t dim, double *similarity);

/**
 * Builds an index over `rows` row-major vectors of length `dim`.
 */
enum OrepipeStatus orepipe_index_new(const double *data,
                                     size_t rows,
                                     size_t dim,
                                     struct OrepipeIndex **index);

void orepipe_index_free(struct OrepipeIndex *index);

size_t orepipe_index_len(const struct OrepipeIndex *index);

/**
 * Nearest row by cosine similarity; ties go to the lowest row.
 */
enum OrepipeStatus orepipe_index_top1(const struct OrepipeIndex *index,
                                      const double *query,
                                      size_t dim,
                                      size_t *row,
                                      double *similarity);

enum OrepipeStatus orepipe_ttest_from_summary(double mean_1,
                                              double variance_1,
                                              double mean_2,
                                              double variance_2,
                                              size_t n,
                                              double pearson_r,
                                              struct OrepipeTTest *result);

enum OrepipeStatus orepipe_pearson(const double *x, const double *y, size_t n, double *r);

/**
 * Percentage deviation of a fine-tuned score from its base score.
 */
enum OrepipeStatus orepipe_deviation(double finetuned, double base, double *percent);

/**
 * True when `similarity` is strictly above `threshold`.
 */
bool orepipe_judge_is_correct(double similarity, double threshold);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* OREPIPE_H */
