#ifndef MTDLAB_H
#define MTDLAB_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of a fallible call.
 */
typedef enum MtdlabStatus {
  MTDLAB_STATUS_OK = 0,
  /**
   * A required pointer argument was null.
   */
  MTDLAB_STATUS_NULL_ARGUMENT = 1,
  /**
   * A string argument was not valid UTF-8.
   */
  MTDLAB_STATUS_INVALID_UTF8 = 2,
  /**
   * Unknown key, unparsable value or inconsistent scenario.
   */
  MTDLAB_STATUS_CONFIG = 3,
  /**
   * Case file missing or malformed.
   */
  MTDLAB_STATUS_CASE = 4,
  /**
   * Singular system, non-convergence or a similar numerical failure.
   */
  MTDLAB_STATUS_NUMERICAL = 5,
  /**
   * The attacker declined to attack.
   */
  MTDLAB_STATUS_ABSTAINED = 6,
  /**
   * The requested value does not exist, e.g. a detection probability
   * when every trial abstained.
   */
  MTDLAB_STATUS_NOT_AVAILABLE = 7,
  /**
   * A panic was caught at the boundary.
   */
  MTDLAB_STATUS_PANIC = 8,
  /**
   * Any other failure.
   */
  MTDLAB_STATUS_FAILED = 9,
} MtdlabStatus;

/**
 * A loaded network case.
 */
typedef struct MtdlabCase MtdlabCase;

/**
 * A scenario configuration.
 */
typedef struct MtdlabConfig MtdlabConfig;

/**
 * The report of one scenario run.
 */
typedef struct MtdlabReport MtdlabReport;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread; empty after a call
 * that returned [`MtdlabStatus::Ok`].
 * The pointer stays valid until the next call into the library from the
 * same thread.
 */
const char *mtdlab_last_error(void);

/**
 * Releases a string returned by the library. Null is ignored.
 *
 * # Safety
 * `s` must come from this library and not have been freed.
 */
void mtdlab_string_free(char *s);

/**
 * Loads a bundled case (`"case14"`, `"case118"`) or a case file.
 *
 * # Safety
 * `name` must be a NUL-terminated string; `out` must be writable.
 */
enum MtdlabStatus mtdlab_case_load(const char *name, struct MtdlabCase **out);

/**
 * Number of buses; 0 for null.
 *
 * # Safety
 * `handle` must be null or a live case handle.
 */
size_t mtdlab_case_bus_count(const struct MtdlabCase *handle);

/**
 * Number of branches, in or out of service; 0 for null.
 *
 * # Safety
 * `handle` must be null or a live case handle.
 */
size_t mtdlab_case_branch_count(const struct MtdlabCase *handle);

/**
 * # Safety
 * `handle` must be null or a live case handle, which is invalid afterwards.
 */
void mtdlab_case_free(struct MtdlabCase *handle);

/**
 * Residual threshold for `m` meters, `n` states, confidence `alpha` and
 * noise scale `sigma`.
 *
 * # Safety
 * `out` must be writable.
 */
enum MtdlabStatus mtdlab_chi2_threshold(size_t m,
                                        size_t n,
                                        double alpha,
                                        double sigma,
                                        double *out);

/**
 * A configuration holding the defaults.
 */
struct MtdlabConfig *mtdlab_config_new(void);

/**
 * Parses a `key = value` document on top of the defaults.
 *
 * # Safety
 * `source` must be a NUL-terminated string; `out` must be writable.
 */
enum MtdlabStatus mtdlab_config_parse(const char *source, struct MtdlabConfig **out);

/**
 * Sets one field, using the config-file key names.
 *
 * # Safety
 * `config` must be a live handle; `key` and `value` NUL-terminated strings.
 */
enum MtdlabStatus mtdlab_config_set(struct MtdlabConfig *config,
                                    const char *key,
                                    const char *value);

/**
 * The configuration as a `key = value` document.
 *
 * # Safety
 * `config` must be a live handle. Free the result with
 * [`mtdlab_string_free`]; null on failure.
 */
char *mtdlab_config_text(const struct MtdlabConfig *config);

/**
 * # Safety
 * `config` must be null or a live handle, which is invalid afterwards.
 */
void mtdlab_config_free(struct MtdlabConfig *config);

/**
 * Runs every trial of the scenario.
 *
 * # Safety
 * `config` must be a live handle; `out` must be writable.
 */
enum MtdlabStatus mtdlab_run_scenario(const struct MtdlabConfig *config, struct MtdlabReport **out);

/**
 * Number of trials in the report; 0 for null.
 *
 * # Safety
 * `report` must be null or a live handle.
 */
size_t mtdlab_report_trials(const struct MtdlabReport *report);

/**
 * Trials in which the attacker abstained; 0 for null.
 *
 * # Safety
 * `report` must be null or a live handle.
 */
size_t mtdlab_report_abstentions(const struct MtdlabReport *report);

/**
 * Detections over non-abstained trials. Returns
 * [`MtdlabStatus::NotAvailable`] when every trial abstained.
 *
 * # Safety
 * `report` must be a live handle; `out` must be writable.
 */
enum MtdlabStatus mtdlab_report_detection_probability(const struct MtdlabReport *report,
                                                      double *out);

/**
 * The per-trial report CSV.
 *
 * # Safety
 * `report` must be a live handle. Free the result with
 * [`mtdlab_string_free`]; null on failure.
 */
char *mtdlab_report_csv(const struct MtdlabReport *report);

/**
 * # Safety
 * `report` must be null or a live handle, which is invalid afterwards.
 */
void mtdlab_report_free(struct MtdlabReport *report);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MTDLAB_H */
