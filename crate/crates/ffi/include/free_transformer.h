#ifndef FREE_TRANSFORMER_H
#define FREE_TRANSFORMER_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum FtStatus {
  FT_STATUS_OK = 0,
  FT_STATUS_NULL_POINTER = 1,
  FT_STATUS_INVALID_ARGUMENT = 2,
  FT_STATUS_IO = 3,
  FT_STATUS_CHECKPOINT = 4,
  FT_STATUS_CACHE_FULL = 5,
  FT_STATUS_NUMERIC = 6,
  FT_STATUS_BUFFER_TOO_SMALL = 7,
  FT_STATUS_PANIC = 8,
} FtStatus;

// A loaded model.
typedef struct FtModel FtModel;

// An incremental decoding session bound to one model.
typedef struct FtSession FtSession;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message for the last failed call on this thread, or null. Valid until
// the next failing call on the same thread.
const char *ft_last_error(void);

// Loads a checkpoint written by the trainer.
//
// # Safety
// `path` must be a valid NUL-terminated string and `out` a valid pointer.
enum FtStatus ft_model_load(const char *path, struct FtModel **out);

// Creates a freshly initialized toy-sized model (zero readout).
//
// # Safety
// `out` must be a valid pointer.
enum FtStatus ft_model_new_toy(size_t vocab_size,
                               bool free_variant,
                               uint64_t seed,
                               struct FtModel **out);

// Releases a model. Null is ignored.
//
// # Safety
// `model` must come from this library and not be used afterwards.
void ft_model_free(struct FtModel *model);

// Writes the vocabulary size, trainable parameter count, and the part of
// that count belonging to the latent path (encoder plus post-sampler).
//
// # Safety
// `model` must be a live handle; output pointers may be null to skip.
enum FtStatus ft_model_info(const struct FtModel *model,
                            size_t *vocab_size,
                            size_t *param_count,
                            size_t *latent_overhead);

// Full forward over `len` tokens. With `latents` null the latent path is
// skipped (plain decoder); otherwise `latents[t]` is the code at position
// `t`. Writes `len × vocab` logits.
//
// # Safety
// Pointers must reference arrays of the stated lengths.
enum FtStatus ft_model_forward(const struct FtModel *model,
                               const uint32_t *tokens,
                               size_t len,
                               const uint32_t *latents,
                               float *logits,
                               size_t logits_len);

// Starts a decoding session: runs the prompt through the encoder path
// and writes the logits for the next token.
//
// # Safety
// `model` must outlive the session; arrays must have the stated lengths.
enum FtStatus ft_session_new(const struct FtModel *model,
                             const uint32_t *prompt,
                             size_t len,
                             uint64_t latent_seed,
                             float *logits,
                             size_t logits_len,
                             struct FtSession **out);

// Appends `token` with a code drawn from the uniform prior and writes the
// next logits. Fails with `CACHE_FULL` at the model's maximum length.
//
// # Safety
// `session` must be live and its model not yet freed.
enum FtStatus ft_session_step(struct FtSession *session,
                              uint32_t token,
                              float *logits,
                              size_t logits_len);

// Number of positions cached so far.
//
// # Safety
// `session` must be live or null (returns 0).
size_t ft_session_len(const struct FtSession *session);

// Releases a session. Null is ignored.
//
// # Safety
// `session` must come from this library and not be used afterwards.
void ft_session_free(struct FtSession *session);

// Converts synthetic-alphabet text to token ids (BOS first). On
// `BUFFER_TOO_SMALL`, `*written` holds the required length.
//
// # Safety
// `text` must be NUL-terminated; `ids` must hold `capacity` entries.
enum FtStatus ft_tokenize(const char *text, uint32_t *ids, size_t capacity, size_t *written);

// `P(X_{t+1} = 1 | prefix)` for the latent coin-flip process.
//
// # Safety
// `prefix` must hold `len` bytes (each 0 or 1) unless `len` is 0.
enum FtStatus ft_oracle_posterior(const uint8_t *prefix, size_t len, double epsilon, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FREE_TRANSFORMER_H */
