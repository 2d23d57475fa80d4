#ifndef RADAR_H
#define RADAR_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result code of every fallible call.
typedef enum RadarStatus {
  RADAR_STATUS_OK = 0,
  RADAR_STATUS_NULL_POINTER = 1,
  RADAR_STATUS_INVALID_ARGUMENT = 2,
  RADAR_STATUS_IO = 3,
  RADAR_STATUS_FORMAT = 4,
  RADAR_STATUS_SHAPE = 5,
  RADAR_STATUS_NUMERIC = 6,
  RADAR_STATUS_WRONG_ROLE = 7,
  RADAR_STATUS_PANIC = 8,
} RadarStatus;

typedef enum RadarRole {
  RADAR_ROLE_CLASSIFIER = 0,
  RADAR_ROLE_DETECTOR = 1,
} RadarRole;

typedef enum RadarAttackKind {
  RADAR_ATTACK_KIND_PGD = 0,
  RADAR_ATTACK_KIND_OPGD = 1,
  RADAR_ATTACK_KIND_SPGD = 2,
} RadarAttackKind;

// Loaded classifier or detector, always in eval mode.
typedef struct RadarModel RadarModel;

// Attack parameters. `detector_threshold` is the score at or above which
// the detector counts as flagging an input.
typedef struct RadarAttackParams {
  enum RadarAttackKind kind;
  double epsilon;
  double alpha;
  size_t iters;
  double detector_threshold;
} RadarAttackParams;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message describing the last failure on this thread, or an empty string.
// The pointer stays valid until the next call into this library on the
// same thread.
const char *radar_last_error_message(void);

// Library version as a static NUL-terminated string.
const char *radar_ffi_version(void);

// Loads an `RDR1` checkpoint. On success `*out` owns a new handle.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum RadarStatus radar_model_load(const char *path, struct RadarModel **out);

// Releases a handle; null is ignored.
//
// # Safety
// `model` must come from [`radar_model_load`] and not be freed twice.
void radar_model_free(struct RadarModel *model);

// Role, input shape and class count (0 for detectors) of a model.
//
// # Safety
// `model` must be a live handle; output pointers must be valid.
enum RadarStatus radar_model_info(const struct RadarModel *model,
                                  enum RadarRole *role,
                                  size_t *channels,
                                  size_t *height,
                                  size_t *width,
                                  size_t *classes);

// Classifier logits for `n` images. `out` receives `n × classes` values.
//
// # Safety
// `x` must hold `n·C·H·W` doubles and `out` `out_len` doubles.
enum RadarStatus radar_model_predict(const struct RadarModel *model,
                                     const double *x,
                                     size_t n,
                                     double *out,
                                     size_t out_len);

// Detector P(adv) for `n` images. `out` receives `n` values.
//
// # Safety
// `x` must hold `n·C·H·W` doubles and `out` `n` doubles.
enum RadarStatus radar_model_detect(const struct RadarModel *model,
                                    const double *x,
                                    size_t n,
                                    double *out);

// Default attack parameters (PGD, ε = 16/255, α = 0.03, 100 iterations,
// threshold 0.5).
struct RadarAttackParams radar_attack_params_default(void);

// Attacks `n` labelled images. `detector` may be null for PGD and is
// required for OPGD/SPGD. `x_adv` receives `n·C·H·W` doubles; `fooled`
// (optional) receives one 0/1 byte per image.
//
// # Safety
// Buffers must have the stated lengths; handles must be live.
enum RadarStatus radar_attack(const struct RadarModel *classifier,
                              const struct RadarModel *detector,
                              const struct RadarAttackParams *params,
                              const double *x,
                              const uint32_t *labels,
                              size_t n,
                              double *x_adv,
                              uint8_t *fooled);

// ROC-AUC of benign vs adversarial detector scores (ties count ½).
//
// # Safety
// `benign` and `adversarial` must hold the stated counts.
enum RadarStatus radar_roc_auc(const double *benign,
                               size_t n_benign,
                               const double *adversarial,
                               size_t n_adversarial,
                               double *out);

// Attack success rate at an `n_percent` benign false-positive rate.
// `fooled[i]` is nonzero when attack `i` fooled the classifier.
//
// # Safety
// Buffers must hold the stated counts.
enum RadarStatus radar_sr_at_n(const double *benign,
                               size_t n_benign,
                               const double *adversarial,
                               const uint8_t *fooled,
                               size_t n_adversarial,
                               double n_percent,
                               double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* RADAR_H */
