#ifndef KCACHE_H
#define KCACHE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

#define KC_MODE_BASELINE 0

#define KC_MODE_KCACHE 1

// Status codes returned by every fallible entry point.
enum KcStatus
#if defined(__cplusplus) || __STDC_VERSION__ >= 202311L
  : int32_t
#endif // defined(__cplusplus) || __STDC_VERSION__ >= 202311L
 {
  KC_STATUS_OK = 0,
  KC_STATUS_NULL_POINTER = 1,
  KC_STATUS_ARGUMENT = 2,
  KC_STATUS_SHAPE = 3,
  KC_STATUS_FORMAT = 4,
  KC_STATUS_STATE = 5,
  KC_STATUS_CAPACITY = 6,
  KC_STATUS_OVERFLOW = 7,
  KC_STATUS_IO = 8,
  KC_STATUS_INVALID_UTF8 = 9,
  KC_STATUS_PANIC = 10,
};
#ifndef __cplusplus
#if __STDC_VERSION__ >= 202311L
typedef enum KcStatus KcStatus;
#else
typedef int32_t KcStatus;
#endif // __STDC_VERSION__ >= 202311L
#endif // __cplusplus

// Loaded or generated model weights.
typedef struct KcModel KcModel;

// Result of one generation run.
typedef struct KcReport KcReport;

typedef struct KcModelConfig {
  size_t n_layers;
  size_t d_model;
  size_t n_heads;
  size_t head_dim;
  size_t ffn_hidden;
  size_t vocab;
  size_t max_seq;
} KcModelConfig;

typedef struct KcRunConfig {
  // `KC_MODE_BASELINE` or `KC_MODE_KCACHE`.
  uint32_t mode;
  size_t top_n;
  size_t resident_layers;
  bool renormalize;
  // Seed for the random prompt.
  uint64_t seed;
  size_t prompt_len;
  size_t gen_len;
  size_t batch;
  size_t bytes_per_element;
  // Fast-tier byte limit; 0 disables the check.
  uint64_t fast_capacity;
} KcRunConfig;

typedef struct KcProfile {
  double flops;
  double bw_gpu;
  double bw_h2d;
  double bw_d2h;
  double fast_capacity;
} KcProfile;

typedef struct KcTransferCheck {
  double ratio;
  double threshold;
  bool beneficial;
} KcTransferCheck;

typedef struct KcOverlapCheck {
  double lhs;
  double rhs;
  bool holds;
} KcOverlapCheck;

typedef struct KcDecodeShape {
  uint64_t batch;
  uint64_t seq_len;
  uint64_t d_model;
  uint64_t n_heads;
  uint64_t head_dim;
  uint64_t bytes;
} KcDecodeShape;

typedef struct KcSubmoduleCost {
  uint64_t flops;
  uint64_t io_bytes;
  uint64_t h2d_bytes;
} KcSubmoduleCost;

typedef struct KcCostBreakdown {
  struct KcSubmoduleCost qkv;
  struct KcSubmoduleCost scores;
  struct KcSubmoduleCost weighted_sum;
  struct KcSubmoduleCost out_proj;
  struct KcSubmoduleCost ffn;
} KcCostBreakdown;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message for the last failed call on this thread; empty after success.
// The pointer stays valid until the next call on the same thread.
const char *kc_last_error_message(void);

// Library version as a static NUL-terminated string.
const char *kc_version(void);

// Generates seeded weights for a preset (`"toy"`).
//
// # Safety
// `preset` must be a NUL-terminated string; `out` must be writable.
KcStatus kc_model_generate(const char *preset, uint64_t seed, struct KcModel **out);

// Loads weights from a file written by [`kc_model_save`].
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
KcStatus kc_model_load(const char *path, struct KcModel **out);

// # Safety
// `model` must come from this library; `path` must be NUL-terminated.
KcStatus kc_model_save(const struct KcModel *model, const char *path);

// # Safety
// `model` must come from this library; `out` must be writable.
KcStatus kc_model_config(const struct KcModel *model, struct KcModelConfig *out);

// Releases a model. Null is ignored.
//
// # Safety
// `model` must come from this library and not be used afterwards.
void kc_model_free(struct KcModel *model);

// Baseline defaults: prompt 64, generation 32, batch 1, 2 bytes/element.
//
// # Safety
// `out` must be writable.
KcStatus kc_run_config_default(struct KcRunConfig *out);

// Runs prefill plus greedy decode over a seeded random prompt.
//
// # Safety
// `model` must come from this library; `config` readable; `out` writable.
KcStatus kc_generate(const struct KcModel *model,
                     const struct KcRunConfig *config,
                     struct KcReport **out);

// Batch size and tokens generated per row.
//
// # Safety
// `report` must come from this library; outputs writable.
KcStatus kc_report_shape(const struct KcReport *report, size_t *batch, size_t *gen_len);

// Copies the tokens of one batch row into `buf`. `len` receives the row
// length; the call fails with `Argument` when `cap` is too small.
//
// # Safety
// `buf` must hold `cap` elements (may be null when `cap` is 0).
KcStatus kc_report_tokens(const struct KcReport *report,
                          size_t row,
                          uint32_t *buf,
                          size_t cap,
                          size_t *len);

// Ledger totals in bytes.
//
// # Safety
// `report` must come from this library; outputs writable.
KcStatus kc_report_ledger(const struct KcReport *report, uint64_t *d2h_bytes, uint64_t *h2d_bytes);

// Full report as JSON. Free with [`kc_string_free`].
//
// # Safety
// `report` must come from this library; `out` writable.
KcStatus kc_report_json(const struct KcReport *report, char **out);

// # Safety
// `report` must come from this library and not be used afterwards.
void kc_report_free(struct KcReport *report);

// # Safety
// `s` must come from this library and not be used afterwards.
void kc_string_free(char *s);

// Built-in hardware profile by name (`"a100-80g"`, `"eval-gpu"`).
//
// # Safety
// `name` NUL-terminated; `out` writable.
KcStatus kc_profile_builtin(const char *name, struct KcProfile *out);

// Baseline KV cache size `2 * b * s * d * l * bytes`.
//
// # Safety
// `out` writable.
KcStatus kc_kv_cache_bytes(uint64_t b,
                           uint64_t s,
                           uint64_t d,
                           uint64_t l,
                           uint64_t bytes,
                           uint64_t *out);

// # Safety
// `profile` readable; `out` writable.
KcStatus kc_decode_transfer_check(uint64_t s,
                                  uint64_t top_n,
                                  const struct KcProfile *profile_in,
                                  struct KcTransferCheck *out);

// # Safety
// `profile` readable; `out` writable.
KcStatus kc_prefill_overlap_check(uint64_t s,
                                  uint64_t d,
                                  uint64_t b,
                                  uint64_t bytes,
                                  const struct KcProfile *profile_in,
                                  struct KcOverlapCheck *out);

// Per-layer decode cost. `top_n == 0` selects full attention.
//
// # Safety
// `shape` readable; `out` writable.
KcStatus kc_decode_mha_cost(const struct KcDecodeShape *shape,
                            uint64_t ffn_hidden,
                            uint64_t top_n,
                            struct KcCostBreakdown *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* KCACHE_H */
