/* C interface to the cornerspace steady-state solver. */

#ifndef CORNERSPACE_H
#define CORNERSPACE_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

// Status codes returned by every fallible call.
typedef enum CspStatus {
  CSP_STATUS_OK = 0,
  CSP_STATUS_NULL_ARGUMENT = 1,
  CSP_STATUS_INVALID_UTF8 = 2,
  CSP_STATUS_PARSE_ERROR = 3,
  CSP_STATUS_INVALID_CONFIG = 4,
  CSP_STATUS_RUN_ERROR = 5,
  CSP_STATUS_OUT_OF_RANGE = 6,
} CspStatus;

// Opaque experiment configuration.
typedef struct CspConfig CspConfig;

// Opaque run result: the rows written to results.csv plus the exit code.
typedef struct CspResult CspResult;

// One observable row; NaN marks an absent value.
typedef struct CspRow {
  uint32_t lx;
  uint32_t ly;
  uint64_t m;
  // 0 nullspace, 1 direct, 2 mcwf, 3 meanfield, 255 other.
  uint8_t solver;
  double n;
  double n_err;
  double re_b;
  double re_b_err;
  double im_b;
  double im_b_err;
  double g2;
  double g2_err;
  double g2_nn;
  double g2_nn_err;
} CspRow;

// Model parameters for the direct mean-field entry point. `hardcore`
// nonzero selects the two-level limit and ignores `u`.
typedef struct CspModelParams {
  double delta_omega;
  double u;
  uint8_t hardcore;
  double j;
  double f;
  double gamma;
  uint64_t n_max;
  uint64_t z;
} CspModelParams;

// Self-consistent single-site mean-field solution.
typedef struct CspMeanField {
  double n;
  double re_b;
  double im_b;
  // NaN when undefined (vanishing density).
  double g2;
  uint64_t iterations;
  double residual;
  bool converged;
} CspMeanField;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static C string.
const char *csp_version(void);

// Message for the most recent error on this thread; valid until the next
// failing call on the same thread.
const char *csp_last_error_message(void);

// Parse a JSON experiment configuration.
//
// # Safety
// `json` must be a NUL-terminated string and `out` a valid pointer. On
// success `*out` owns a config that must be released with
// [`csp_config_free`].
enum CspStatus csp_config_from_json(const char *json, struct CspConfig **out);

// Serialize a config back to JSON; the returned string must be released
// with [`csp_string_free`].
//
// # Safety
// `config` must come from this library and be live.
char *csp_config_to_json(const struct CspConfig *config);

// Release a string returned by this library.
//
// # Safety
// `s` must have been returned by a `csp_*` call and not freed before.
void csp_string_free(char *s);

// # Safety
// `config` must come from [`csp_config_from_json`] and not be freed twice.
void csp_config_free(struct CspConfig *config);

// Execute a configured experiment; output files are written to the
// config's output directory.
//
// # Safety
// `config` must be live; `out` must be valid. `*out` must be released
// with [`csp_result_free`].
enum CspStatus csp_run(const struct CspConfig *config, struct CspResult **out);

// Run a named preset. `out_dir` may be NULL for the preset default;
// `seed` and `m_max` of zero mean "leave unchanged".
//
// # Safety
// Strings must be NUL-terminated or NULL; `out` must be valid.
enum CspStatus csp_run_preset(const char *name,
                              const char *out_dir,
                              uint64_t seed,
                              uint64_t m_max,
                              struct CspResult **out);

// Newline-separated preset catalog; release with [`csp_string_free`].
char *csp_list_presets(void);

// # Safety
// `result` must be live.
uint64_t csp_result_row_count(const struct CspResult *result);

// # Safety
// `result` must be live.
int32_t csp_result_exit_code(const struct CspResult *result);

// Copy row `index` into `row`.
//
// # Safety
// `result` must be live and `row` a valid pointer.
enum CspStatus csp_result_row(const struct CspResult *result, uint64_t index, struct CspRow *row);

// # Safety
// `result` must come from a run call and not be freed twice.
void csp_result_free(struct CspResult *result);

// Solve the self-consistent Gutzwiller single-site problem directly.
//
// # Safety
// `params` and `out` must be valid pointers.
enum CspStatus csp_meanfield(const struct CspModelParams *params, struct CspMeanField *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CORNERSPACE_H */
