#ifndef SEQDG_H
#define SEQDG_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum SeqdgStatus {
  SEQDG_STATUS_OK = 0,
  SEQDG_STATUS_NULL_POINTER = 1,
  SEQDG_STATUS_INVALID_ARGUMENT = 2,
  SEQDG_STATUS_CONFIG = 3,
  SEQDG_STATUS_PARSE = 4,
  SEQDG_STATUS_IO = 5,
  SEQDG_STATUS_NUMERIC = 6,
  SEQDG_STATUS_FOLD = 7,
  SEQDG_STATUS_UTF8 = 8,
  SEQDG_STATUS_PANIC = 9,
} SeqdgStatus;

/**
 * A multi-domain dataset.
 */
typedef struct SeqdgDomainSet SeqdgDomainSet;

/**
 * The outcome of an experiment.
 */
typedef struct SeqdgReport SeqdgReport;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or NULL. The pointer stays
 * valid until the next call into this library on the same thread.
 */
const char *seqdg_last_error(void);

/**
 * Library version as a static string.
 */
const char *seqdg_version(void);

/**
 * Rotated-cluster dataset: `domains` domains of `n` samples over `classes`
 * classes, domain `i` rotated by `i * angle_deg`.
 *
 * # Safety
 * `out` must be valid for a pointer write.
 */
enum SeqdgStatus seqdg_domainset_generate(size_t domains,
                                          size_t classes,
                                          size_t n,
                                          double angle_deg,
                                          double noise_sd,
                                          uint64_t seed,
                                          struct SeqdgDomainSet **out);

/**
 * # Safety
 * `path` is a NUL-terminated string; `out` must be valid for a pointer write.
 */
enum SeqdgStatus seqdg_domainset_load(const char *path, struct SeqdgDomainSet **out);

/**
 * # Safety
 * `set` is a live handle; `path` is a NUL-terminated string.
 */
enum SeqdgStatus seqdg_domainset_save(const struct SeqdgDomainSet *set, const char *path);

/**
 * # Safety
 * `set` is a live handle; `out` must be valid for a write.
 */
enum SeqdgStatus seqdg_domainset_num_domains(const struct SeqdgDomainSet *set, size_t *out);

/**
 * # Safety
 * `set` is NULL or a handle not yet freed.
 */
void seqdg_domainset_free(struct SeqdgDomainSet *set);

/**
 * Runs the experiment described by `config_toml` on `set`, or on the
 * config's own dataset when `set` is NULL. `jobs` bounds concurrent runs
 * (0: all cores).
 *
 * # Safety
 * `config_toml` is a NUL-terminated string; `set` is NULL or a live handle;
 * `out` must be valid for a pointer write.
 */
enum SeqdgStatus seqdg_experiment_run(const char *config_toml,
                                      const struct SeqdgDomainSet *set,
                                      size_t jobs,
                                      struct SeqdgReport **out);

/**
 * Report as JSON. The string must be released with [`seqdg_string_free`].
 *
 * # Safety
 * `report` is a live handle; `out` must be valid for a pointer write.
 */
enum SeqdgStatus seqdg_report_json(const struct SeqdgReport *report, char **out);

/**
 * Mean held-out accuracy over every run.
 *
 * # Safety
 * `report` is a live handle; `out` must be valid for a write.
 */
enum SeqdgStatus seqdg_report_mean_accuracy(const struct SeqdgReport *report, double *out);

/**
 * Number of (fold, seed) runs in the report.
 *
 * # Safety
 * `report` is a live handle; `out` must be valid for a write.
 */
enum SeqdgStatus seqdg_report_num_runs(const struct SeqdgReport *report, size_t *out);

/**
 * # Safety
 * `report` is NULL or a handle not yet freed.
 */
void seqdg_report_free(struct SeqdgReport *report);

/**
 * # Safety
 * `s` is NULL or a string returned by this library and not yet freed.
 */
void seqdg_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SEQDG_H */
