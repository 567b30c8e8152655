#ifndef SELFNER_H
#define SELFNER_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum SelfnerStatus {
  SELFNER_STATUS_OK = 0,
  SELFNER_STATUS_NULL_ARGUMENT = 1,
  SELFNER_STATUS_INVALID_UTF8 = 2,
  SELFNER_STATUS_INVALID_JSON = 3,
  SELFNER_STATUS_CONFIG_ERROR = 4,
  SELFNER_STATUS_DATA_ERROR = 5,
  SELFNER_STATUS_BACKEND_ERROR = 6,
  SELFNER_STATUS_PANIC = 7,
} SelfnerStatus;

/**
 * Opaque handle to a loaded demonstration pool.
 */
typedef struct SelfnerPool SelfnerPool;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. The pointer
 * stays valid until the next call into this library on the same thread.
 */
const char *selfner_last_error(void);

/**
 * Release a string returned by this library. Null is ignored.
 *
 * # Safety
 * `s` must come from this library and not have been freed already.
 */
void selfner_string_free(char *s);

/**
 * Parse a raw model answer. `out_json` receives `[["span","type"],...]`
 * and `out_status` 0 (ok), 1 (recovered) or 2 (failed).
 *
 * # Safety
 * `raw` must be a nul-terminated string; output pointers must be writable.
 */
enum SelfnerStatus selfner_parse_answer(const char *raw, char **out_json, int *out_status);

/**
 * Zero-shot prompt for `text`. A null `labelset_json` selects ACE05;
 * otherwise it is `{"name": ..., "types": [...]}`.
 *
 * # Safety
 * String arguments must be nul-terminated; `out` must be writable.
 */
enum SelfnerStatus selfner_zero_shot_prompt(const char *labelset_json,
                                            const char *text,
                                            char **out);

/**
 * In-context prompt. `demos_json` is `[["text", [["span","type"],...]],...]`
 * in prompt order.
 *
 * # Safety
 * String arguments must be nul-terminated; `out` must be writable.
 */
enum SelfnerStatus selfner_icl_prompt(const char *labelset_json,
                                      const char *demos_json,
                                      const char *query,
                                      char **out);

/**
 * Micro P/R/F1. Both inputs are `[["id", [["span","type"],...]],...]`;
 * the report is written as JSON.
 *
 * # Safety
 * String arguments must be nul-terminated; `out` must be writable.
 */
enum SelfnerStatus selfner_micro_f1(const char *predictions_json,
                                    const char *golds_json,
                                    char **out_report_json);

/**
 * Load a pool file. With a null `index_path` the pool is embedded with the
 * local embedder; a given index must have been built with it.
 *
 * # Safety
 * Paths must be nul-terminated; `out` must be writable. The handle must be
 * released with [`selfner_pool_free`].
 */
enum SelfnerStatus selfner_pool_open(const char *pool_path,
                                     const char *index_path,
                                     struct SelfnerPool **out);

/**
 * Number of samples in the pool.
 *
 * # Safety
 * `pool` must be a live handle; `out_len` must be writable.
 */
enum SelfnerStatus selfner_pool_len(const struct SelfnerPool *pool, size_t *out_len);

/**
 * Retrieve demonstration ids for `query_text`. `policy_json` is
 * `{"kind": "diverse_sc_ranking", "k": 16, "big_k": 50, "seed": 0}`;
 * `out_ids_json` receives the ids best first.
 *
 * # Safety
 * `pool` must be a live handle; strings must be nul-terminated.
 */
enum SelfnerStatus selfner_pool_retrieve(const struct SelfnerPool *pool,
                                         const char *query_text,
                                         const char *policy_json,
                                         char **out_ids_json);

/**
 * Release a pool handle. Null is ignored.
 *
 * # Safety
 * `pool` must come from [`selfner_pool_open`] and not be used afterwards.
 */
void selfner_pool_free(struct SelfnerPool *pool);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SELFNER_H */
