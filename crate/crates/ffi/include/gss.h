#ifndef GSS_H
#define GSS_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

/**
 * Status codes returned by every fallible function.
 */
typedef enum GssStatus {
  GSS_STATUS_OK = 0,
  GSS_STATUS_NULL_POINTER = 1,
  GSS_STATUS_INVALID_ARGUMENT = 2,
  GSS_STATUS_CONFIG = 3,
  GSS_STATUS_IO = 4,
  GSS_STATUS_PARSE = 5,
  GSS_STATUS_VALIDATION = 6,
  GSS_STATUS_NUMERICAL = 7,
  GSS_STATUS_PIPELINE = 8,
  GSS_STATUS_PANIC = 9,
} GssStatus;

/**
 * Opaque enhancement configuration.
 */
typedef struct GssConfig GssConfig;

/**
 * Opaque in-memory enhancement result.
 */
typedef struct GssEnhanceResult GssEnhanceResult;

/**
 * Counters of a finished run.
 */
typedef struct GssRunStats {
  size_t segments_total;
  size_t segments_succeeded;
  size_t segments_failed;
  double wall_seconds;
  double real_time_factor;
} GssRunStats;

/**
 * One target segment of an in-memory recording.
 */
typedef struct GssSegment {
  /**
   * NUL-terminated speaker label.
   */
  const char *speaker;
  double start;
  double duration;
} GssSegment;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. Valid until the
 * next failing call on the same thread.
 */
const char *gss_last_error_message(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *gss_version(void);

/**
 * New configuration with default values. Never null.
 */
struct GssConfig *gss_config_new(void);

/**
 * Configuration parsed from a JSON object with every field of the
 * enhancement config.
 *
 * # Safety
 * `json` must be a NUL-terminated string and `out` a valid pointer.
 */
enum GssStatus gss_config_from_json(const char *json, struct GssConfig **out);

/**
 * # Safety
 * `cfg` must come from this library and not be used afterwards. Null is a no-op.
 */
void gss_config_free(struct GssConfig *cfg);

/**
 * # Safety
 * `cfg` must be a live handle.
 */
enum GssStatus gss_config_set_max_batch_duration(struct GssConfig *cfg, double seconds);

/**
 * # Safety
 * `cfg` must be a live handle.
 */
enum GssStatus gss_config_set_context_duration(struct GssConfig *cfg, double seconds);

/**
 * # Safety
 * `cfg` must be a live handle.
 */
enum GssStatus gss_config_set_bss_iterations(struct GssConfig *cfg, uint32_t iterations);

/**
 * # Safety
 * `cfg` must be a live handle.
 */
enum GssStatus gss_config_set_use_wpe(struct GssConfig *cfg, bool enabled);

/**
 * # Safety
 * `cfg` must be a live handle.
 */
enum GssStatus gss_config_set_noise_class(struct GssConfig *cfg, bool enabled);

/**
 * # Safety
 * `cfg` must be a live handle.
 */
enum GssStatus gss_config_set_one_per_batch(struct GssConfig *cfg, bool enabled);

/**
 * # Safety
 * `cfg` must be a live handle.
 */
enum GssStatus gss_config_set_workers(struct GssConfig *cfg, uint32_t workers);

/**
 * Restricts processing to `len` channel indices; `len == 0` selects all.
 *
 * # Safety
 * `cfg` must be a live handle and `channels` point to `len` values.
 */
enum GssStatus gss_config_set_channels(struct GssConfig *cfg, const uint32_t *channels, size_t len);

/**
 * Runs the file-based pipeline: WAVs and `summary.json` go to `out_dir`.
 * Returns `Ok` even if some segments failed; check `stats`.
 *
 * # Safety
 * Strings must be NUL-terminated; `stats` may be null.
 */
enum GssStatus gss_run_pipeline(const struct GssConfig *cfg,
                                const char *recordings_path,
                                const char *segments_path,
                                const char *out_dir,
                                struct GssRunStats *stats);

/**
 * Enhances segments of one in-memory recording. `audio` holds `channels`
 * rows of `num_samples` samples each (channel-major). Segment times are in
 * seconds. On success `*out` receives a result handle with one output per
 * successfully enhanced segment, ordered by segment id.
 *
 * # Safety
 * `audio` must point to `channels * num_samples` values, `segments` to
 * `num_segments` entries with valid speaker strings, `out` must be valid.
 */
enum GssStatus gss_enhance(const struct GssConfig *cfg,
                           const double *audio,
                           size_t channels,
                           size_t num_samples,
                           uint32_t sample_rate,
                           const struct GssSegment *segments,
                           size_t num_segments,
                           struct GssEnhanceResult **out);

/**
 * # Safety
 * `result` must be a live handle.
 */
size_t gss_result_count(const struct GssEnhanceResult *result);

/**
 * # Safety
 * `result` must be a live handle.
 */
size_t gss_result_failed(const struct GssEnhanceResult *result);

/**
 * Borrowed samples of output `index`; valid until the result is freed.
 *
 * # Safety
 * `result` must be a live handle; `samples` and `len` valid pointers.
 */
enum GssStatus gss_result_samples(const struct GssEnhanceResult *result,
                                  size_t index,
                                  const double **samples,
                                  size_t *len);

/**
 * Borrowed segment id of output `index`, or null when out of range.
 *
 * # Safety
 * `result` must be a live handle.
 */
const char *gss_result_segment_id(const struct GssEnhanceResult *result, size_t index);

/**
 * # Safety
 * `result` must come from [`gss_enhance`] and not be used afterwards.
 */
void gss_result_free(struct GssEnhanceResult *result);

/**
 * Scale-invariant SDR in dB of `estimate` against `reference`, over the
 * common length.
 *
 * # Safety
 * Buffers must hold the given number of samples; `out` must be valid.
 */
enum GssStatus gss_si_sdr(const double *estimate,
                          size_t estimate_len,
                          const double *reference,
                          size_t reference_len,
                          double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* GSS_H */
