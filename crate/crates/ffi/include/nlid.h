#ifndef NLID_H
#define NLID_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/*
 Result codes. Values 2 and 3 line up with the command-line exit codes
 for configuration and numerical failures.
 */
typedef enum NlidStatus {
  NLID_STATUS_OK = 0,
  NLID_STATUS_NULL_POINTER = 1,
  NLID_STATUS_CONFIG = 2,
  NLID_STATUS_NUMERICAL = 3,
  NLID_STATUS_FORMAT = 4,
  NLID_STATUS_INSUFFICIENT_DATA = 5,
  NLID_STATUS_INSTABILITY = 6,
  NLID_STATUS_IO = 7,
  NLID_STATUS_PANIC = 8,
} NlidStatus;

typedef enum NlidBehaviour {
  NLID_BEHAVIOUR_LINEAR = 0,
  NLID_BEHAVIOUR_EVEN = 1,
  NLID_BEHAVIOUR_ODD = 2,
  NLID_BEHAVIOUR_EVEN_DOMINANT = 3,
  NLID_BEHAVIOUR_ODD_DOMINANT = 4,
} NlidBehaviour;

/*
 Polynomial nonlinear state-space model.
 */
typedef struct NlidModel NlidModel;

/*
 Multisine realizations sharing one harmonic grid.
 */
typedef struct NlidMultisine NlidMultisine;

/*
 Periodic input/output record.
 */
typedef struct NlidRecord NlidRecord;

/*
 Pooled distortion levels in dB.
 */
typedef struct NlidDistortionSummary {
  int32_t behaviour;
  double excited_db;
  double noise_db;
  /*
   Odd detection power over noise; NaN when the grid has no such lines.
   */
  double odd_excess_db;
  double even_excess_db;
} NlidDistortionSummary;

/*
 Headline numbers of an identification run.
 */
typedef struct NlidIdentifySummary {
  uintptr_t n_b;
  uintptr_t n_a;
  uintptr_t states;
  double initial_cost;
  double final_cost;
  double linear_rms;
  double pnlss_rms;
  double ratio;
} NlidIdentifySummary;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Message of the last failed call on this thread, or NULL. The pointer
 stays valid until the next failing call on the same thread.
 */
const char *nlid_last_error(void);

/*
 Library version as a static NUL-terminated string.
 */
const char *nlid_version(void);

/*
 Designs `count` odd-random multisine realizations.

 # Safety
 `out` must be a valid pointer to writable storage for one handle.
 */
enum NlidStatus nlid_multisine_new(double fs,
                                   uintptr_t n,
                                   double f_lo,
                                   double f_hi,
                                   double rms,
                                   uint64_t seed,
                                   uintptr_t count,
                                   struct NlidMultisine **out);

/*
 # Safety
 `h` must come from [`nlid_multisine_new`] and not be used afterwards.
 */
void nlid_multisine_free(struct NlidMultisine *h);

/*
 Number of realizations in the handle, 0 for NULL.

 # Safety
 `h` must be NULL or a live multisine handle.
 */
uintptr_t nlid_multisine_count(const struct NlidMultisine *h);

/*
 Samples per period, 0 for NULL.

 # Safety
 `h` must be NULL or a live multisine handle.
 */
uintptr_t nlid_multisine_period(const struct NlidMultisine *h);

/*
 Number of excited lines, 0 for NULL.

 # Safety
 `h` must be NULL or a live multisine handle.
 */
uintptr_t nlid_multisine_excited_count(const struct NlidMultisine *h);

/*
 Copies one period of realization `index` into `buf` (length `len` must equal the period).

 # Safety
 `h` must be a live handle and `buf` valid for `len` writes.
 */
enum NlidStatus nlid_multisine_samples(const struct NlidMultisine *h,
                                       uintptr_t index,
                                       double *buf,
                                       uintptr_t len);

/*
 Wraps input/output samples laid out realization-major, `realizations * periods * n` each.

 # Safety
 `u` and `y` must be valid for `len` reads; `out` must be writable.
 */
enum NlidStatus nlid_record_new(const double *u,
                                const double *y,
                                uintptr_t len,
                                double fs,
                                uintptr_t n,
                                uintptr_t periods,
                                uintptr_t realizations,
                                struct NlidRecord **out);

/*
 Simulates a synthetic cell preset (`soc10`, `soc90`, `cubic`, `quadratic`, `fir`)
 driven by every realization of `ms`.

 # Safety
 `ms` must be a live handle, `preset` a NUL-terminated string, `out` writable.
 */
enum NlidStatus nlid_simulate_cell(const struct NlidMultisine *ms,
                                   const char *preset,
                                   uintptr_t periods,
                                   uint64_t seed,
                                   struct NlidRecord **out);

/*
 # Safety
 `h` must come from a record constructor and not be used afterwards.
 */
void nlid_record_free(struct NlidRecord *h);

/*
 Total samples per channel, 0 for NULL.

 # Safety
 `h` must be NULL or a live record handle.
 */
uintptr_t nlid_record_len(const struct NlidRecord *h);

/*
 Copies the output channel into `buf`.

 # Safety
 `h` must be a live handle and `buf` valid for `len` writes.
 */
enum NlidStatus nlid_record_output(const struct NlidRecord *h, double *buf, uintptr_t len);

/*
 Even/odd distortion analysis of `rec` on the grid of `ms`, skipping one
 transient period and using a 6 dB significance margin. The output is
 first detrended with weight `trend_fraction * lambda_max` per realization
 (0 disables detrending).

 # Safety
 Handles must be live; `out` must be writable.
 */
enum NlidStatus nlid_analyze(const struct NlidRecord *rec,
                             const struct NlidMultisine *ms,
                             double trend_fraction,
                             struct NlidDistortionSummary *out);

/*
 l1 trend of `y` with weight `fraction * lambda_max`; writes the trend into `m`.

 # Safety
 `y` must be valid for `len` reads and `m` for `len` writes.
 */
enum NlidStatus nlid_l1_trend(const double *y, uintptr_t len, double fraction, double *m);

/*
 Full identification pipeline on `rec` with the grid of `ms`. `config_toml`
 may be NULL for defaults; otherwise it holds a TOML pipeline configuration.

 # Safety
 Handles must be live; `out_model` and `summary` must be writable
 (`summary` may be NULL).
 */
enum NlidStatus nlid_identify(const struct NlidRecord *rec,
                              const struct NlidMultisine *ms,
                              const char *config_toml,
                              struct NlidModel **out_model,
                              struct NlidIdentifySummary *summary);

/*
 Loads a model JSON written by the `identify` command.

 # Safety
 `path` must be NUL-terminated; `out` writable.
 */
enum NlidStatus nlid_model_load(const char *path, struct NlidModel **out);

/*
 Writes the model as JSON.

 # Safety
 `h` must be live and `path` NUL-terminated.
 */
enum NlidStatus nlid_model_save(const struct NlidModel *h, const char *path);

/*
 Number of states, 0 for NULL.

 # Safety
 `h` must be NULL or a live model handle.
 */
uintptr_t nlid_model_states(const struct NlidModel *h);

/*
 Simulates the model from rest; `u` and `y` both hold `len` samples.

 # Safety
 `h` must be live, `u` valid for `len` reads and `y` for `len` writes.
 */
enum NlidStatus nlid_model_simulate(const struct NlidModel *h,
                                    const double *u,
                                    double *y,
                                    uintptr_t len);

/*
 # Safety
 `h` must come from a model constructor and not be used afterwards.
 */
void nlid_model_free(struct NlidModel *h);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* NLID_H */
