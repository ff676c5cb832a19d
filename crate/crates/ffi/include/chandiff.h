#ifndef CHANDIFF_H
#define CHANDIFF_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Guided sampling schemes.
 */
typedef enum ChdGuidance {
  CHD_GUIDANCE_RANDOM = 0,
  CHD_GUIDANCE_PREDICTED = 1,
  CHD_GUIDANCE_CONSTANT = 2,
} ChdGuidance;

/**
 * Result codes shared by every entry point.
 */
typedef enum ChdStatus {
  CHD_STATUS_OK = 0,
  CHD_STATUS_NULL_POINTER = 1,
  CHD_STATUS_INVALID_ARGUMENT = 2,
  CHD_STATUS_CONFIG = 3,
  CHD_STATUS_FORMAT = 4,
  CHD_STATUS_IO = 5,
  CHD_STATUS_NUMERIC = 6,
  CHD_STATUS_PANIC = 7,
} ChdStatus;

/**
 * A resolved run configuration.
 */
typedef struct ChdConfig ChdConfig;

/**
 * A trained denoiser together with the noise schedule it was trained on.
 */
typedef struct ChdModel ChdModel;

/**
 * An evaluation report.
 */
typedef struct ChdReport ChdReport;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the most recent failure on this thread, or NULL. The pointer is
 * valid until the next call into the library on the same thread.
 */
const char *chd_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *chd_version(void);

/**
 * Release a string returned by this library. NULL is ignored.
 *
 * # Safety
 * `s` must come from this library and not have been freed already.
 */
void chd_string_free(char *s);

/**
 * Parse a TOML run configuration and apply `n_overrides` `key=value` overrides.
 *
 * # Safety
 * `toml` must be a NUL-terminated string, `overrides` an array of
 * `n_overrides` such strings (or NULL when zero), and `out` writable.
 */
enum ChdStatus chd_config_from_toml(const char *toml,
                                    const char *const *overrides,
                                    size_t n_overrides,
                                    struct ChdConfig **out);

/**
 * Load a run configuration file.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` writable.
 */
enum ChdStatus chd_config_load(const char *path, struct ChdConfig **out);

/**
 * The fully resolved configuration as TOML; free with [`chd_string_free`].
 *
 * # Safety
 * `cfg` must be a live handle and `out` writable.
 */
enum ChdStatus chd_config_resolved(const struct ChdConfig *cfg, char **out);

/**
 * # Safety
 * `cfg` must be NULL or a handle from this library not yet freed.
 */
void chd_config_free(struct ChdConfig *cfg);

/**
 * Build and cache the packed dataset; writes the lowercase hex sha256 of the
 * cache into `digest_out` (65 bytes including the NUL) when non-NULL.
 *
 * # Safety
 * `cfg` must be a live handle; `digest_out` NULL or at least 65 bytes.
 */
enum ChdStatus chd_pack(const struct ChdConfig *cfg, char *digest_out);

/**
 * Train classifiers and the denoiser; the final loss goes to `final_loss`
 * when non-NULL.
 *
 * # Safety
 * `cfg` must be a live handle; `final_loss` NULL or writable.
 */
enum ChdStatus chd_train(const struct ChdConfig *cfg, double *final_loss);

/**
 * Run every configured sampling run from the final checkpoint.
 *
 * # Safety
 * `cfg` must be a live handle.
 */
enum ChdStatus chd_sample(const struct ChdConfig *cfg);

/**
 * Score the sample dumps; release the report with [`chd_report_free`].
 *
 * # Safety
 * `cfg` must be a live handle and `out` writable.
 */
enum ChdStatus chd_eval(const struct ChdConfig *cfg, struct ChdReport **out);

/**
 * Macro-level value of `metric` for `modality`.
 *
 * # Safety
 * `report` must be a live handle, the names NUL-terminated and `value` writable.
 */
enum ChdStatus chd_report_get(const struct ChdReport *report,
                              const char *metric,
                              const char *modality,
                              double *value);

/**
 * The report as CSV text; free with [`chd_string_free`].
 *
 * # Safety
 * `report` must be a live handle and `out` writable.
 */
enum ChdStatus chd_report_csv(const struct ChdReport *report, char **out);

/**
 * # Safety
 * `report` must be NULL or a handle from this library not yet freed.
 */
void chd_report_free(struct ChdReport *report);

/**
 * Load a denoiser and its schedule from a training checkpoint.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` writable.
 */
enum ChdStatus chd_model_load(const char *path, struct ChdModel **out);

/**
 * # Safety
 * `model` must be NULL or a handle from this library not yet freed.
 */
void chd_model_free(struct ChdModel *model);

/**
 * Input channel count and number of diffusion steps of a loaded model.
 *
 * # Safety
 * `model` must be a live handle; the outputs NULL or writable.
 */
enum ChdStatus chd_model_info(const struct ChdModel *model, size_t *channels, size_t *timesteps);

/**
 * Predicted noise for `x` (`[n, c, h, w]`, row-major) at per-sample steps `ts`
 * (length `n`); writes `n*c*h*w` values to `out`.
 *
 * # Safety
 * `x` and `out` must hold `n*c*h*w` doubles and `ts` `n` entries.
 */
enum ChdStatus chd_model_predict_noise(const struct ChdModel *model,
                                       const double *x,
                                       size_t n,
                                       size_t c,
                                       size_t h,
                                       size_t w,
                                       const size_t *ts,
                                       double *out);

/**
 * Generate `n` samples of every channel from noise; writes `n*C*h*w` values.
 *
 * # Safety
 * `out` must hold `n*C*h*w` doubles, where `C` is the model's channel count.
 */
enum ChdStatus chd_model_sample_joint(const struct ChdModel *model,
                                      size_t n,
                                      size_t h,
                                      size_t w,
                                      uint64_t seed,
                                      double *out);

/**
 * Generate the channels not listed in `guiding` conditioned on `condition`
 * (`[n, n_guiding, h, w]`); writes `n*(C - n_guiding)*h*w` values in
 * ascending channel order.
 *
 * # Safety
 * `guiding` must hold `n_guiding` indices, `condition` `n*n_guiding*h*w`
 * doubles and `out` `n*(C - n_guiding)*h*w` doubles.
 */
enum ChdStatus chd_model_sample_guided(const struct ChdModel *model,
                                       enum ChdGuidance scheme,
                                       const size_t *guiding,
                                       size_t n_guiding,
                                       const double *condition,
                                       size_t n,
                                       size_t h,
                                       size_t w,
                                       uint64_t seed,
                                       double *out);

/**
 * Inception-style score of `n` probability rows over `k` classes.
 *
 * # Safety
 * `probs` must hold `n*k` doubles; `mean` and `std` must be writable.
 */
enum ChdStatus chd_inception_score(const double *probs,
                                   size_t n,
                                   size_t k,
                                   size_t splits,
                                   double *mean,
                                   double *std);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CHANDIFF_H */
