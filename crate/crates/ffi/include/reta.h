#ifndef RETA_H
#define RETA_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

/**
 * Result of every fallible call.
 */
typedef enum RetaStatus {
  RETA_STATUS_OK = 0,
  RETA_STATUS_NULL_POINTER = 1,
  RETA_STATUS_INVALID_ARGUMENT = 2,
  RETA_STATUS_CONFIG = 3,
  RETA_STATUS_DATASET = 4,
  RETA_STATUS_NUMERIC = 5,
  RETA_STATUS_IO = 6,
  RETA_STATUS_PANIC = 7,
} RetaStatus;

/**
 * Run configuration handle.
 */
typedef struct RetaConfig RetaConfig;

/**
 * Streaming engine handle. Not thread-safe; use one handle per thread.
 */
typedef struct RetaEngine RetaEngine;

/**
 * Outcome of one adapted sample.
 */
typedef struct RetaPrediction {
  uint32_t predicted;
  uint32_t zero_shot;
  /**
   * Label given by the current text classifier before adaptation.
   */
  uint32_t pseudo_label;
  /**
   * Committee majority label.
   */
  uint32_t majority_label;
  /**
   * Max fused score divided by `1 + eta`.
   */
  double confidence;
  /**
   * Consistency weight, at least 1.
   */
  double weight;
  double entropy;
  double reweighted_entropy;
  bool update;
  bool merge;
} RetaPrediction;

/**
 * Aggregate metrics of a dataset run. Rates are fractions in `[0, 1]` and
 * NaN when undefined (no labels, empty cache).
 */
typedef struct RetaRunSummary {
  uint64_t samples;
  uint64_t labeled;
  double top1_accuracy;
  double zero_shot_accuracy;
  double ece;
  double cache_purity;
  uint64_t updates;
  uint64_t merges;
} RetaRunSummary;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *reta_version(void);

/**
 * Message of the last failure on this thread, or NULL. The pointer stays
 * valid until the next failing call on the same thread.
 */
const char *reta_last_error(void);

/**
 * New configuration with default values. Never NULL.
 */
struct RetaConfig *reta_config_new(void);

/**
 * Reads a TOML configuration file over the defaults.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum RetaStatus reta_config_from_toml(const char *path, struct RetaConfig **out);

/**
 * Sets one key from its string form. The configuration is left unchanged
 * if the key is unknown or the resulting configuration is invalid.
 *
 * # Safety
 * `config` must come from this library; `key` and `value` must be
 * NUL-terminated strings.
 */
enum RetaStatus reta_config_set(struct RetaConfig *config, const char *key, const char *value);

/**
 * Serializes the configuration as TOML into `buffer`. `written` receives
 * the length without the terminating NUL; if `capacity` is too small the
 * call fails with `RETA_STATUS_INVALID_ARGUMENT` and `written` holds the
 * required length.
 *
 * # Safety
 * `config` must come from this library; `buffer` must have room for
 * `capacity` bytes; `written` must be valid.
 */
enum RetaStatus reta_config_to_toml(const struct RetaConfig *config,
                                    char *buffer,
                                    size_t capacity,
                                    size_t *written);

/**
 * # Safety
 * `config` must come from this library or be NULL, and is invalid after
 * the call.
 */
void reta_config_free(struct RetaConfig *config);

/**
 * Builds an engine from `classes * prompts_per_class` prompt embeddings of
 * length `dim`, class-major.
 *
 * # Safety
 * `config` must come from this library; `prompts` must hold
 * `classes * prompts_per_class * dim` floats; `out` must be valid.
 */
enum RetaStatus reta_engine_new(const struct RetaConfig *config,
                                const float *prompts,
                                size_t classes,
                                size_t prompts_per_class,
                                size_t dim,
                                struct RetaEngine **out);

/**
 * Adapts on one sample: `num_views` embeddings of the engine's dimension,
 * original view first. `label` is the ground truth or -1 when unknown; it
 * only feeds the purity metric. When `scores` is not NULL it receives the
 * fused class scores and must hold `scores_len >= classes` doubles.
 *
 * # Safety
 * `engine` must come from this library; `views` must hold
 * `num_views * dim` floats; `out` must be valid.
 */
enum RetaStatus reta_engine_adapt(struct RetaEngine *engine,
                                  const float *views,
                                  size_t num_views,
                                  int64_t label,
                                  struct RetaPrediction *out,
                                  double *scores,
                                  size_t scores_len);

/**
 * Number of classes, or 0 for NULL.
 *
 * # Safety
 * `engine` must come from this library or be NULL.
 */
size_t reta_engine_classes(const struct RetaEngine *engine);

/**
 * Fraction of cached entries whose pseudo-label matches the given label;
 * NaN when no cached entry carries a label.
 *
 * # Safety
 * `engine` must come from this library; `out` must be valid.
 */
enum RetaStatus reta_engine_cache_purity(const struct RetaEngine *engine, double *out);

/**
 * # Safety
 * `engine` must come from this library or be NULL, and is invalid after
 * the call.
 */
void reta_engine_free(struct RetaEngine *engine);

/**
 * Streams a dataset file through a fresh engine. When `log_path` is not
 * NULL the per-sample prediction log is written there as JSON lines.
 *
 * # Safety
 * `dataset_path` and `log_path` (if not NULL) must be NUL-terminated;
 * `config` must come from this library; `out` must be valid.
 */
enum RetaStatus reta_run_dataset(const char *dataset_path,
                                 const struct RetaConfig *config,
                                 const char *log_path,
                                 struct RetaRunSummary *out);

/**
 * Expected calibration error over `bins` equal-width bins.
 *
 * # Safety
 * `confidences` and `correct` must each hold `n` elements; `out` must be
 * valid.
 */
enum RetaStatus reta_ece(const double *confidences,
                         const bool *correct,
                         size_t n,
                         size_t bins,
                         double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* RETA_H */
