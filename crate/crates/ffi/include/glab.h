#ifndef GLAB_H
#define GLAB_H

/* Generated by cbindgen; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Number of values in an image buffer: 3 planes of 64×64, row-major.
 */
#define GLAB_IMAGE_LEN ((3 * 64) * 64)

typedef enum GlabStatus {
  GLAB_STATUS_OK = 0,
  GLAB_STATUS_NULL_POINTER = 1,
  GLAB_STATUS_INVALID_ARGUMENT = 2,
  GLAB_STATUS_SHAPE = 3,
  GLAB_STATUS_MISSING_FILE = 4,
  GLAB_STATUS_CHECKPOINT = 5,
  GLAB_STATUS_CONFIG = 6,
  GLAB_STATUS_IO = 7,
  GLAB_STATUS_NUMERIC = 8,
  GLAB_STATUS_INTERNAL = 9,
  GLAB_STATUS_PANIC = 10,
} GlabStatus;

typedef enum GlabMethod {
  GLAB_METHOD_GRADOP = 0,
  GLAB_METHOD_GRADOP_PLUS = 1,
  GLAB_METHOD_SDEDIT = 2,
  GLAB_METHOD_LOOPBACK = 3,
  GLAB_METHOD_ILVR = 4,
  GLAB_METHOD_TEXT = 5,
} GlabMethod;

/**
 * Opaque handle to a loaded autoencoder and denoiser.
 */
typedef struct GlabModels GlabModels;

/**
 * Guidance settings; `painting` is 0 for gaussian, 1 for quantize.
 */
typedef struct GlabConfig {
  double gamma;
  double lr;
  uint32_t steps;
  double t0;
  double t_start;
  double t_end;
  double cfg_scale;
  uint32_t loopback_iters;
  double loopback_k;
  uint32_t ilvr_factor;
  uint32_t painting;
  uint64_t seed;
} GlabConfig;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the calling thread's last error message into `buf` (always
 * nul-terminated when `len > 0`) and returns the full message length.
 */
size_t glab_last_error(char *buf, size_t len);

/**
 * Library version and git description, static storage.
 */
const char *glab_version(void);

size_t glab_vocabulary_size(void);

/**
 * Name of vocabulary entry `index` (0-based), or null when out of range.
 */
const char *glab_token_name(size_t index);

/**
 * Writes the default guidance settings to `out`.
 */
enum GlabStatus glab_config_default(struct GlabConfig *out);

/**
 * Loads checkpoints written by `glab train` (default network sizes).
 */
enum GlabStatus glab_models_load(const char *autoencoder_path,
                                 const char *denoiser_path,
                                 struct GlabModels **out);

/**
 * Releases a handle from [`glab_models_load`]; null is ignored.
 */
void glab_models_free(struct GlabModels *models);

/**
 * Synthesizes one image.
 *
 * `painting` and `out_image` hold [`GLAB_IMAGE_LEN`] values in [0, 1];
 * `tokens` is an array of `n_tokens` nul-terminated token names. `config`
 * may be null for the defaults. `out_losses` (optional) receives up to
 * `losses_cap` loss values and `out_loss_count` the number produced.
 */
enum GlabStatus glab_synthesize(const struct GlabModels *models,
                                enum GlabMethod method,
                                const double *painting,
                                const char *const *tokens,
                                size_t n_tokens,
                                const struct GlabConfig *config,
                                double *out_image,
                                double *out_losses,
                                size_t losses_cap,
                                size_t *out_loss_count);

/**
 * Faithfulness of `image` to `painting` on the 0–255 scale.
 */
enum GlabStatus glab_faithfulness(const double *image, const double *painting, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* GLAB_H */
