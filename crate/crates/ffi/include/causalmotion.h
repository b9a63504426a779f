#ifndef CAUSALMOTION_H
#define CAUSALMOTION_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

#define CM_OK 0

#define CM_ERR_NULL 1

#define CM_ERR_INVALID_ARGUMENT 2

#define CM_ERR_IO 3

#define CM_ERR_CORRUPT_MODEL 4

#define CM_ERR_CHECKSUM 5

#define CM_ERR_UNKNOWN_VERSION 6

#define CM_ERR_SHAPE_MISMATCH 7

#define CM_ERR_INVALID_CONFIG 8

#define CM_ERR_ENGINE_STATE 9

#define CM_ERR_INTERNAL 10

#define CM_ERR_PANIC 11

/**
 * One stream's state.
 */
typedef struct CmEngine CmEngine;

/**
 * A loaded checkpoint. Shared read-only by every engine created from it.
 */
typedef struct CmModel CmModel;

typedef struct CmEngineConfig {
  uint32_t history;
  uint32_t horizon;
  uint32_t max_level;
  uint32_t refine_passes;
  uint32_t stab_n;
  /**
   * Nonzero enables the K* anchoring gate.
   */
  uint8_t noise_robust;
  uint32_t k_star;
  uint64_t seed;
} CmEngineConfig;

/**
 * One observation in world coordinates. Wrist positions are read only when
 * the matching visibility flag is nonzero.
 */
typedef struct CmObservation {
  double head_position[3];
  double head_yaw;
  double wrist_left[3];
  double wrist_right[3];
  uint8_t vis_left;
  uint8_t vis_right;
} CmObservation;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread; empty after a success.
 * The pointer stays valid until the next call on the same thread.
 */
const char *cm_last_error_message(void);

/**
 * Writes the default engine configuration into `out`.
 *
 * # Safety
 * `out` must be null or point to writable memory for one `CmEngineConfig`.
 */
int32_t cm_engine_config_default(struct CmEngineConfig *out);

/**
 * Loads a checkpoint file. On success `*out` owns a model to be released
 * with [`cm_model_free`].
 *
 * # Safety
 * `path` must be null or a NUL-terminated string; `out` must be null or
 * writable.
 */
int32_t cm_model_load(const char *path, struct CmModel **out);

/**
 * # Safety
 * `model` must be null or a handle from [`cm_model_load`] not yet freed.
 * Engines created from it stay valid.
 */
void cm_model_free(struct CmModel *model);

/**
 * Number of doubles in one pose, or 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t cm_model_pose_dim(const struct CmModel *model);

/**
 * Creates a stream engine. `config` may be null for the defaults. The first
 * push bootstraps the window.
 *
 * # Safety
 * `model` must be a live handle, `config` null or readable, `out` writable.
 */
int32_t cm_engine_new(const struct CmModel *model,
                      const struct CmEngineConfig *config,
                      struct CmEngine **out);

/**
 * Consumes one observation and writes the emitted world-frame pose into
 * `out_pose`, which must hold `out_len == cm_model_pose_dim` doubles.
 *
 * # Safety
 * `engine` must be a live handle, `obs` readable, and `out_pose` writable
 * for `out_len` doubles.
 */
int32_t cm_engine_push(struct CmEngine *engine,
                       const struct CmObservation *obs,
                       double *out_pose,
                       size_t out_len);

/**
 * Denoiser evaluations performed so far, or 0 for a null handle.
 *
 * # Safety
 * `engine` must be null or a live handle.
 */
uint64_t cm_engine_evals(const struct CmEngine *engine);

/**
 * # Safety
 * `engine` must be null or a handle from [`cm_engine_new`] not yet freed.
 */
void cm_engine_free(struct CmEngine *engine);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CAUSALMOTION_H */
