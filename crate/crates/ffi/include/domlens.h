#ifndef DOMLENS_H
#define DOMLENS_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

typedef enum DomlensSource {
  DOMLENS_SOURCE_LAYER_ONLY = 0,
  DOMLENS_SOURCE_ATTN_FFN = 1,
  DOMLENS_SOURCE_ATTN_FFN_LAYER = 2,
} DomlensSource;

typedef enum DomlensStatus {
  DOMLENS_STATUS_OK = 0,
  DOMLENS_STATUS_NULL_POINTER = 1,
  DOMLENS_STATUS_INVALID_ARGUMENT = 2,
  DOMLENS_STATUS_IO = 3,
  DOMLENS_STATUS_PARSE = 4,
  DOMLENS_STATUS_VALIDATION = 5,
  DOMLENS_STATUS_OUT_OF_RANGE = 6,
  DOMLENS_STATUS_PANIC = 7,
} DomlensStatus;

// Opaque correction result.
typedef struct DomlensCorrection DomlensCorrection;

// Opaque toy decoder with its synthetic vocabulary.
typedef struct DomlensModel DomlensModel;

// Opaque decode trace.
typedef struct DomlensTrace DomlensTrace;

typedef struct DomlensVdcConfig {
  enum DomlensSource validation;
  enum DomlensSource correction;
  uint32_t skip_layers;
  bool feedback;
} DomlensVdcConfig;

typedef struct DomlensModelConfig {
  uint32_t num_layers;
  uint32_t hidden_dim;
  uint32_t num_heads;
  uint32_t ffn_dim;
  uint32_t vocab_size;
  uint32_t max_context;
  uint32_t grid_h;
  uint32_t grid_w;
  bool tie_embeddings;
} DomlensModelConfig;

// Parameters of a generation call.
typedef struct DomlensGenerateParams {
  // Prompt token ids laid out as `[system | vision | instruction]`.
  const uint32_t *prompt;
  size_t prompt_len;
  size_t system_len;
  size_t max_new;
  size_t topk;
} DomlensGenerateParams;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or NULL. Valid until the next failure.
const char *domlens_last_error(void);

// Library version as a static NUL-terminated string.
const char *domlens_version(void);

// Validation Attn+FFN, correction Attn+FFN+Layer, no skipped layers, feedback on.
struct DomlensVdcConfig domlens_vdc_config_default(void);

// # Safety
// `s` must be NULL or a string returned by this library.
void domlens_string_free(char *s);

// Reads and validates a JSON-lines trace file.
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
enum DomlensStatus domlens_trace_read_file(const char *path, struct DomlensTrace **out);

// Parses a trace from an in-memory buffer of `len` bytes.
//
// # Safety
// `data` must point to `len` readable bytes; `out` must be writable.
enum DomlensStatus domlens_trace_read_buffer(const uint8_t *data,
                                             size_t len,
                                             struct DomlensTrace **out);

// # Safety
// `trace` must be a valid handle; `path` a NUL-terminated string.
enum DomlensStatus domlens_trace_write_file(const struct DomlensTrace *trace, const char *path);

// # Safety
// `trace` must be NULL or a handle not yet freed.
void domlens_trace_free(struct DomlensTrace *trace);

// # Safety
// `trace` must be NULL or a valid handle.
size_t domlens_trace_num_steps(const struct DomlensTrace *trace);

// # Safety
// `trace` must be NULL or a valid handle.
size_t domlens_trace_num_layers(const struct DomlensTrace *trace);

// Emitted token id of step `index` (0-based).
//
// # Safety
// `trace` must be a valid handle; `out` writable.
enum DomlensStatus domlens_trace_emitted_id(const struct DomlensTrace *trace,
                                            size_t index,
                                            uint32_t *out);

// Writes the number of invariant violations to `out` (0 means valid).
//
// # Safety
// `trace` must be a valid handle; `out` writable.
enum DomlensStatus domlens_trace_validate(const struct DomlensTrace *trace, size_t *out);

// Whether step `index` shows subdominant accumulation: its emitted token is
// never rank-1 in the attention or FFN stream past `skip_layers`.
//
// # Safety
// `trace` must be a valid handle; `out` writable.
enum DomlensStatus domlens_trace_sad_flag(const struct DomlensTrace *trace,
                                          size_t index,
                                          uint32_t skip_layers,
                                          bool *out);

// Builds a deterministic toy decoder from `config` and `seed`.
//
// # Safety
// `config` must be readable; `out` writable.
enum DomlensStatus domlens_model_new(const struct DomlensModelConfig *config,
                                     uint64_t seed,
                                     struct DomlensModel **out);

// Loads a model file written by `domlens model new`.
//
// # Safety
// `path` must be a NUL-terminated string; `out` writable.
enum DomlensStatus domlens_model_load(const char *path, struct DomlensModel **out);

// # Safety
// `model` must be NULL or a handle not yet freed.
void domlens_model_free(struct DomlensModel *model);

// Checksum over every weight; equal for equal `(config, seed)`.
//
// # Safety
// `model` must be NULL or a valid handle.
uint64_t domlens_model_checksum(const struct DomlensModel *model);

// Greedy instrumented generation.
//
// # Safety
// `model` and `params` must be valid; `params.prompt` must point to
// `params.prompt_len` ids; `out` writable.
enum DomlensStatus domlens_model_generate(const struct DomlensModel *model,
                                          const struct DomlensGenerateParams *params,
                                          struct DomlensTrace **out);

// Online decoding with correction. `out_trace` may be NULL when the trace is not needed.
//
// # Safety
// As for [`domlens_model_generate`]; `config` readable; `out` writable.
enum DomlensStatus domlens_decode_vdc(const struct DomlensModel *model,
                                      const struct DomlensGenerateParams *params,
                                      const struct DomlensVdcConfig *config,
                                      struct DomlensTrace **out_trace,
                                      struct DomlensCorrection **out);

// Offline correction of every step of `trace`.
//
// # Safety
// `trace` and `config` must be valid; `out` writable.
enum DomlensStatus domlens_correct_trace(const struct DomlensTrace *trace,
                                         const struct DomlensVdcConfig *config,
                                         struct DomlensCorrection **out);

// # Safety
// `c` must be NULL or a handle not yet freed.
void domlens_correction_free(struct DomlensCorrection *c);

// # Safety
// `c` must be NULL or a valid handle.
size_t domlens_correction_len(const struct DomlensCorrection *c);

// # Safety
// `c` must be NULL or a valid handle.
size_t domlens_correction_num_replaced(const struct DomlensCorrection *c);

// Corrected token id at `index` and whether it was replaced.
//
// # Safety
// `c` must be a valid handle; `token` writable; `replaced` NULL or writable.
enum DomlensStatus domlens_correction_token(const struct DomlensCorrection *c,
                                            size_t index,
                                            uint32_t *token,
                                            bool *replaced);

// Per-step reports as a JSON array. Release with [`domlens_string_free`].
//
// # Safety
// `c` must be a valid handle; `out` writable.
enum DomlensStatus domlens_correction_report_json(const struct DomlensCorrection *c, char **out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DOMLENS_H */
