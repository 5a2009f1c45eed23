#ifndef EV3_H
#define EV3_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum Ev3Status {
  EV3_STATUS_OK = 0,
  EV3_STATUS_NULL_POINTER = 1,
  EV3_STATUS_INVALID_UTF8 = 2,
  EV3_STATUS_CONFIG = 3,
  EV3_STATUS_CALIBRATION = 4,
  EV3_STATUS_DATA = 5,
  EV3_STATUS_IO = 6,
  EV3_STATUS_CONTRACT = 7,
  EV3_STATUS_PANIC = 8,
} Ev3Status;

/**
 * Opaque experiment configuration.
 */
typedef struct Ev3Config Ev3Config;

/**
 * Opaque results of a finished experiment.
 */
typedef struct Ev3Results Ev3Results;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message describing the last failed call on this thread, or an empty
 * string. Valid until the next call into this library on the same thread.
 */
const char *ev3_last_error_message(void);

/**
 * # Safety
 * `out` must be valid for writes.
 */
enum Ev3Status ev3_config_preset_desk(struct Ev3Config **out);

/**
 * Parses `key=value` text on top of the desk preset.
 *
 * # Safety
 * `text` must be a nul-terminated string and `out` valid for writes.
 */
enum Ev3Status ev3_config_parse(const char *text, struct Ev3Config **out);

/**
 * Sets one config key, leaving the config unchanged on error.
 *
 * # Safety
 * `cfg` must come from this library; `key` and `value` must be
 * nul-terminated strings.
 */
enum Ev3Status ev3_config_set(struct Ev3Config *cfg, const char *key, const char *value);

/**
 * Writes the complete config as `key=value` text.
 *
 * # Safety
 * `cfg` must come from this library and `out` be valid for writes.
 */
enum Ev3Status ev3_config_to_string(const struct Ev3Config *cfg, char **out);

/**
 * # Safety
 * `cfg` must come from this library or be null; it must not be used afterwards.
 */
void ev3_config_free(struct Ev3Config *cfg);

/**
 * Trains the teacher and runs the comma-separated `regimes`
 * (e.g. `"morphism,ev3_base"`). Blocks until finished.
 *
 * # Safety
 * `cfg` must come from this library, `regimes` must be a nul-terminated
 * string and `out` valid for writes.
 */
enum Ev3Status ev3_experiment_run(const struct Ev3Config *cfg,
                                  const char *regimes,
                                  struct Ev3Results **out);

/**
 * # Safety
 * `res` must come from this library and `out` be valid for writes.
 */
enum Ev3Status ev3_results_trace_csv(const struct Ev3Results *res, char **out);

/**
 * # Safety
 * `res` must come from this library and `out` be valid for writes.
 */
enum Ev3Status ev3_results_pareto_csv(const struct Ev3Results *res, char **out);

/**
 * # Safety
 * `res` must come from this library and `out` be valid for writes.
 */
enum Ev3Status ev3_results_summary(const struct Ev3Results *res, char **out);

/**
 * Writes trace.csv, pareto.csv and summary.txt into `dir`.
 *
 * # Safety
 * `res` must come from this library and `dir` be a nul-terminated string.
 */
enum Ev3Status ev3_results_write(const struct Ev3Results *res, const char *dir);

/**
 * # Safety
 * `res` must come from this library or be null; it must not be used afterwards.
 */
void ev3_results_free(struct Ev3Results *res);

/**
 * # Safety
 * `s` must be a string returned by this library or null.
 */
void ev3_string_free(char *s);

/**
 * One-sided pooled z-test of `ca/na` against `cb/nb`. `z` is NaN when the
 * pooled proportion is 0 or 1; `significant` is 1 when a is better at
 * `confidence`.
 *
 * # Safety
 * `z` and `significant` must be valid for writes.
 */
enum Ev3Status ev3_z_test(size_t ca,
                          size_t na,
                          size_t cb,
                          size_t nb,
                          double confidence,
                          double *z,
                          int32_t *significant);

/**
 * Parameter count of a network with `n_stages` stages of the given widths
 * and block counts.
 *
 * # Safety
 * `widths` and `blocks` must point to `n_stages` values; `out` must be
 * valid for writes.
 */
enum Ev3Status ev3_param_count(size_t input_dim,
                               size_t num_classes,
                               const size_t *widths,
                               const size_t *blocks,
                               size_t n_stages,
                               size_t *out);

/**
 * Parameter counts of the config's size ladder, smallest first. Writes at
 * most `cap` values into `out` and the ladder length into `len`.
 *
 * # Safety
 * `cfg` must come from this library, `out` must hold `cap` values and
 * `len` be valid for writes.
 */
enum Ev3Status ev3_config_ladder_param_counts(const struct Ev3Config *cfg,
                                              size_t *out,
                                              size_t cap,
                                              size_t *len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* EV3_H */
