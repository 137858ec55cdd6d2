#ifndef TSKD_H
#define TSKD_H

/* Generated by cbindgen; do not edit. */

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

typedef enum TskdStatus {
  TSKD_STATUS_OK = 0,
  TSKD_STATUS_NULL_POINTER = 1,
  TSKD_STATUS_INVALID_ARGUMENT = 2,
  TSKD_STATUS_CONFIG = 3,
  TSKD_STATUS_FORMAT = 4,
  TSKD_STATUS_IO = 5,
  TSKD_STATUS_NUMERIC = 6,
  TSKD_STATUS_PANIC = 7,
} TskdStatus;

typedef enum TskdNodeKind {
  TSKD_NODE_KIND_GENERAL = 0,
  TSKD_NODE_KIND_MEMORY = 1,
  TSKD_NODE_KIND_REVIEW = 2,
} TskdNodeKind;

typedef struct TskdArima TskdArima;

typedef struct TskdCheckpoint TskdCheckpoint;

typedef struct TskdSchedule TskdSchedule;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or NULL. Valid until the
 * next call into this library on the same thread.
 */
const char *tskd_last_error_message(void);

/**
 * # Safety
 * `out` must be a valid pointer to a handle slot.
 */
enum TskdStatus tskd_schedule_new(size_t total_epochs,
                                  size_t delta,
                                  size_t k,
                                  size_t warmup,
                                  struct TskdSchedule **out);

/**
 * # Safety
 * `schedule` must come from [`tskd_schedule_new`]; `out` must be valid.
 */
enum TskdStatus tskd_schedule_kind(const struct TskdSchedule *schedule,
                                   size_t epoch,
                                   enum TskdNodeKind *out);

/**
 * # Safety
 * `schedule` must come from [`tskd_schedule_new`]; `out` must be valid.
 */
enum TskdStatus tskd_schedule_cycle_len(const struct TskdSchedule *schedule, size_t *out);

/**
 * Writes up to `cap` memory epochs of review epoch `epoch` into `epochs`
 * and their count into `count`.
 *
 * # Safety
 * `epochs` must hold `cap` elements; other pointers must be valid.
 */
enum TskdStatus tskd_schedule_memories_for_review(const struct TskdSchedule *schedule,
                                                  size_t epoch,
                                                  size_t *epochs,
                                                  size_t cap,
                                                  size_t *count);

/**
 * # Safety
 * `schedule` must come from [`tskd_schedule_new`] or be NULL.
 */
void tskd_schedule_free(struct TskdSchedule *schedule);

/**
 * # Safety
 * `series` must hold `len` values; `out` must be valid.
 */
enum TskdStatus tskd_arima_fit(const double *series,
                               size_t len,
                               size_t p,
                               size_t d,
                               size_t q,
                               struct TskdArima **out);

/**
 * Copies `p` AR and `q` MA coefficients (caller sizes the buffers from the
 * fitted order) and the intercept and innovation variance.
 *
 * # Safety
 * `ar` and `ma` must hold the fitted order's `p` and `q` values.
 */
enum TskdStatus tskd_arima_coefficients(const struct TskdArima *model,
                                        double *ar,
                                        double *ma,
                                        double *intercept,
                                        double *sigma2);

/**
 * Forecast `horizon` values following `history` into `out`.
 *
 * # Safety
 * `history` must hold `len` values and `out` `horizon` values.
 */
enum TskdStatus tskd_arima_forecast(const struct TskdArima *model,
                                    const double *history,
                                    size_t len,
                                    size_t horizon,
                                    double *out);

/**
 * # Safety
 * `model` must come from [`tskd_arima_fit`] or be NULL.
 */
void tskd_arima_free(struct TskdArima *model);

/**
 * An empty tensor collection.
 *
 * # Safety
 * `out` must be valid.
 */
enum TskdStatus tskd_checkpoint_new(struct TskdCheckpoint **out);

/**
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be valid.
 */
enum TskdStatus tskd_checkpoint_load(const char *path, struct TskdCheckpoint **out);

/**
 * Append a tensor; names must be unique.
 *
 * # Safety
 * `shape` must hold `rank` extents and `data` their product of values.
 */
enum TskdStatus tskd_checkpoint_push(struct TskdCheckpoint *ckpt,
                                     const char *name,
                                     const size_t *shape,
                                     size_t rank,
                                     const float *data);

/**
 * # Safety
 * `path` must be a NUL-terminated string.
 */
enum TskdStatus tskd_checkpoint_save(const struct TskdCheckpoint *ckpt, const char *path);

/**
 * # Safety
 * Pointers must be valid.
 */
enum TskdStatus tskd_checkpoint_len(const struct TskdCheckpoint *ckpt, size_t *out);

/**
 * Borrowed name of tensor `index`, valid while the handle lives.
 *
 * # Safety
 * Pointers must be valid.
 */
enum TskdStatus tskd_checkpoint_name(const struct TskdCheckpoint *ckpt,
                                     size_t index,
                                     const char **out);

/**
 * Writes the rank into `rank` and up to `cap` extents into `shape`.
 *
 * # Safety
 * `shape` must hold `cap` elements; other pointers must be valid.
 */
enum TskdStatus tskd_checkpoint_shape(const struct TskdCheckpoint *ckpt,
                                      size_t index,
                                      size_t *shape,
                                      size_t cap,
                                      size_t *rank);

/**
 * Borrowed values of tensor `index`, valid until the handle is modified or
 * freed.
 *
 * # Safety
 * Pointers must be valid.
 */
enum TskdStatus tskd_checkpoint_data(const struct TskdCheckpoint *ckpt,
                                     size_t index,
                                     const float **data,
                                     size_t *len);

/**
 * # Safety
 * `ckpt` must come from this library or be NULL.
 */
void tskd_checkpoint_free(struct TskdCheckpoint *ckpt);

/**
 * Attention map of `features: [n, c, h, w]` into `out: [n, h, w]`.
 *
 * # Safety
 * `features` must hold `n·c·h·w` values and `out` `n·h·w`.
 */
enum TskdStatus tskd_attention_map(const float *features,
                                   size_t n,
                                   size_t c,
                                   size_t h,
                                   size_t w,
                                   bool normalize,
                                   float *out);

/**
 * `|later - earlier|` for two attention maps of shape `[n, h, w]`.
 *
 * # Safety
 * `earlier`, `later` and `out` must each hold `n·h·w` values.
 */
enum TskdStatus tskd_knowledge_increment(const float *earlier,
                                         const float *later,
                                         size_t n,
                                         size_t h,
                                         size_t w,
                                         float *out);

/**
 * Run `train-teacher` from a JSON config file.
 *
 * # Safety
 * `config_path` must be a NUL-terminated string.
 */
enum TskdStatus tskd_train_teacher(const char *config_path);

/**
 * Run `distill` from a JSON config file; writes the best test accuracy to
 * `best_test_acc` when it is not NULL.
 *
 * # Safety
 * `config_path` must be a NUL-terminated string.
 */
enum TskdStatus tskd_distill(const char *config_path, bool resume, double *best_test_acc);

/**
 * Run `probe-arima` from a JSON config file.
 *
 * # Safety
 * `config_path` must be a NUL-terminated string.
 */
enum TskdStatus tskd_probe_arima(const char *config_path);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* TSKD_H */
