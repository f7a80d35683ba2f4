#ifndef ARCSLOT_H
#define ARCSLOT_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes shared by every function.
 */
typedef enum ArcslotStatus {
  ARCSLOT_STATUS_OK = 0,
  ARCSLOT_STATUS_NULL_ARG = 1,
  ARCSLOT_STATUS_INVALID_UTF8 = 2,
  ARCSLOT_STATUS_IO = 3,
  ARCSLOT_STATUS_CHECKPOINT = 4,
  ARCSLOT_STATUS_DIMENSION = 5,
  ARCSLOT_STATUS_VOCABULARY = 6,
  ARCSLOT_STATUS_TEMPLATE = 7,
  ARCSLOT_STATUS_SEGMENTATION = 8,
  ARCSLOT_STATUS_CAPACITY = 9,
  ARCSLOT_STATUS_CONTRACT = 10,
  ARCSLOT_STATUS_PIPELINE = 11,
  ARCSLOT_STATUS_CONFIG = 12,
  ARCSLOT_STATUS_BUFFER_TOO_SMALL = 13,
  ARCSLOT_STATUS_PANIC = 14,
} ArcslotStatus;

/**
 * Opaque model handle.
 */
typedef struct ArcslotModel ArcslotModel;

/**
 * Loads a checkpoint into a new handle written to `*out`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum ArcslotStatus arcslot_model_load(const char *path, struct ArcslotModel **out);

/**
 * Releases a handle. Null is ignored.
 *
 * # Safety
 * `model` must come from [`arcslot_model_load`] and not be used afterwards.
 */
void arcslot_model_free(struct ArcslotModel *model);

/**
 * Last completed training phase: -1 none, 0 backbone, 1..3 stages.
 *
 * # Safety
 * `model` must be a live handle and `out` a valid pointer.
 */
enum ArcslotStatus arcslot_model_stage(const struct ArcslotModel *model, int *out);

/**
 * Greedy decoding from compressed slots into `buf` as NUL-terminated text.
 * `written` receives the length without the terminator; on
 * `BufferTooSmall` it receives the length that would have been needed.
 *
 * # Safety
 * String arguments must be NUL-terminated; `buf` must hold `buf_len` bytes.
 */
enum ArcslotStatus arcslot_generate(const struct ArcslotModel *model,
                                    const char *segments,
                                    const char *question,
                                    bool use_gates,
                                    size_t max_new_tokens,
                                    char *buf,
                                    size_t buf_len,
                                    size_t *written);

/**
 * Gate trajectories of one inference forward, one `layer=` line per gated
 * layer. The string is owned by the caller; release it with
 * [`arcslot_string_free`].
 *
 * # Safety
 * String arguments must be NUL-terminated and `out` a valid pointer.
 */
enum ArcslotStatus arcslot_trace_gates(const struct ArcslotModel *model,
                                       const char *segments,
                                       const char *question,
                                       char **out);

/**
 * # Safety
 * `s` must come from this library and not be freed twice. Null is ignored.
 */
void arcslot_string_free(char *s);

/**
 * Non-strict exact match (0 or 1) into `*out`.
 *
 * # Safety
 * Strings must be NUL-terminated and `out` a valid pointer.
 */
enum ArcslotStatus arcslot_non_strict_em(const char *prediction, const char *gold, double *out);

/**
 * Token-level F1 into `*out`.
 *
 * # Safety
 * Strings must be NUL-terminated and `out` a valid pointer.
 */
enum ArcslotStatus arcslot_token_f1(const char *prediction, const char *gold, double *out);

/**
 * Message of the last failure on this thread, or null. Valid until the
 * next failing call on the same thread.
 */
const char *arcslot_last_error_message(void);

#endif  /* ARCSLOT_H */
