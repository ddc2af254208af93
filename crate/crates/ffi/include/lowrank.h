#ifndef LOWRANK_H
#define LOWRANK_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

#define LR_ALGO_FGSM 0

#define LR_ALGO_PGD 1

#define LR_ALGO_LORA_PGD 2

#define LR_ALGO_RANK_PROJECTED_PGD 3

#define LR_NORM_FROBENIUS 0

#define LR_NORM_LINF 1

#define LR_NORM_NUCLEAR 2

#define LR_INIT_RANDOM 0

#define LR_INIT_TRANSFER 1

#define LR_INIT_WARMUP 2

#define LR_GRAD_EXACT 0

#define LR_GRAD_STRAIGHT_THROUGH 1

#define LR_GEN_BLOBS 0

#define LR_GEN_STRIPES 1

#define LR_ARCH_LINEAR 0

#define LR_ARCH_MLP 1

#define LR_ARCH_CNN 2

/**
 * Status code returned by every fallible function.
 */
typedef enum LrStatus {
  LR_STATUS_OK = 0,
  /**
   * A required pointer argument was null.
   */
  LR_STATUS_NULL_POINTER = 1,
  /**
   * Invalid argument or precondition (shape, range, unknown enum code).
   */
  LR_STATUS_CONTRACT = 2,
  /**
   * The operating system refused a read or write.
   */
  LR_STATUS_IO = 3,
  /**
   * A file was malformed: bad magic, truncation, CRC, or content.
   */
  LR_STATUS_FORMAT = 4,
  /**
   * Training produced a non-finite loss.
   */
  LR_STATUS_DIVERGED = 5,
  /**
   * Internal panic; the library state is unaffected.
   */
  LR_STATUS_PANIC = 6,
} LrStatus;

/**
 * Opaque attack output handle.
 */
typedef struct LrAttackResult LrAttackResult;

/**
 * Opaque labelled image set handle.
 */
typedef struct LrDataset LrDataset;

/**
 * Opaque classifier handle.
 */
typedef struct LrModel LrModel;

/**
 * Attack parameters. `rank_fraction` is ignored by full-rank algorithms.
 */
typedef struct LrAttackConfig {
  uint32_t algorithm;
  size_t steps;
  double tau;
  uint32_t norm;
  double rank_fraction;
  uint32_t init;
  uint64_t seed;
  uint32_t grad_through;
  bool nuclear_match;
} LrAttackConfig;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. The pointer is
 * valid until the next failing call on the same thread.
 */
const char *lr_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *lr_version(void);

/**
 * Default parameters for `algorithm`: Frobenius budget 0.5, 10 steps
 * (1 for FGSM), rank fraction 0.1, random init, seed 0, exact gradients.
 */
struct LrAttackConfig lr_attack_config_default(uint32_t code);

/**
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum LrStatus lr_dataset_load(const char *path, struct LrDataset **out);

/**
 * Deterministic synthetic dataset of `count` images.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum LrStatus lr_dataset_synth(uint32_t generator,
                               size_t count,
                               size_t channels,
                               size_t rows,
                               size_t cols,
                               size_t classes,
                               uint64_t seed,
                               struct LrDataset **out);

/**
 * # Safety
 * `ds` must be a live handle and `path` a NUL-terminated string.
 */
enum LrStatus lr_dataset_save(const struct LrDataset *ds, const char *path);

/**
 * Writes `[D, C, N, M]` to `dims`.
 *
 * # Safety
 * `ds` must be a live handle and `dims` point to 4 writable values.
 */
enum LrStatus lr_dataset_dims(const struct LrDataset *ds, size_t *dims);

/**
 * # Safety
 * `ds` must be null or a handle not yet freed.
 */
void lr_dataset_free(struct LrDataset *ds);

/**
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum LrStatus lr_model_load(const char *path, struct LrModel **out);

/**
 * Reference architecture with seeded random weights.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum LrStatus lr_model_init(uint32_t arch,
                            size_t channels,
                            size_t rows,
                            size_t cols,
                            size_t classes,
                            uint64_t seed,
                            struct LrModel **out);

/**
 * # Safety
 * `model` must be a live handle and `path` a NUL-terminated string.
 */
enum LrStatus lr_model_save(const struct LrModel *model, const char *path);

/**
 * Predicted class of every image in `ds`, written to `labels[0..len]`.
 *
 * # Safety
 * Handles must be live and `labels` must hold `len` values.
 */
enum LrStatus lr_model_predict(const struct LrModel *model,
                               const struct LrDataset *ds,
                               size_t *labels,
                               size_t len);

/**
 * # Safety
 * `model` must be null or a handle not yet freed.
 */
void lr_model_free(struct LrModel *model);

/**
 * Attacks every image of `ds` with its label. `transfer` is the standard
 * model used by `LR_INIT_TRANSFER` and may be null otherwise.
 *
 * # Safety
 * Handles and `cfg` must be valid; `out` must be a valid pointer.
 */
enum LrStatus lr_attack_run(const struct LrModel *model,
                            const struct LrModel *transfer,
                            const struct LrDataset *ds,
                            const struct LrAttackConfig *cfg,
                            struct LrAttackResult **out);

/**
 * Writes `[D, C, N, M]` of the attacked images to `dims`.
 *
 * # Safety
 * `res` must be a live handle and `dims` point to 4 writable values.
 */
enum LrStatus lr_attack_result_dims(const struct LrAttackResult *res, size_t *dims);

/**
 * Rank of the stored factors, or 0 for a full perturbation.
 *
 * # Safety
 * `res` must be a live handle and `rank` a valid pointer.
 */
enum LrStatus lr_attack_result_rank(const struct LrAttackResult *res, size_t *rank);

/**
 * Copies `clamp(X + δ, 0, 1)` into `buf`; `len` must equal `D·C·N·M`.
 *
 * # Safety
 * `res` must be a live handle and `buf` hold `len` values.
 */
enum LrStatus lr_attack_result_adversarial(const struct LrAttackResult *res,
                                           double *buf,
                                           size_t len);

/**
 * Copies the perturbation δ (materialized if factored) into `buf`.
 *
 * # Safety
 * `res` must be a live handle and `buf` hold `len` values.
 */
enum LrStatus lr_attack_result_perturbation(const struct LrAttackResult *res,
                                            double *buf,
                                            size_t len);

/**
 * Number of images whose attack vanished.
 *
 * # Safety
 * `res` must be a live handle and `count` a valid pointer.
 */
enum LrStatus lr_attack_result_degenerate_count(const struct LrAttackResult *res, size_t *count);

/**
 * Stores the perturbation as an attack file.
 *
 * # Safety
 * `res` must be a live handle and `path` a NUL-terminated string.
 */
enum LrStatus lr_attack_result_save(const struct LrAttackResult *res, const char *path);

/**
 * # Safety
 * `res` must be null or a handle not yet freed.
 */
void lr_attack_result_free(struct LrAttackResult *res);

/**
 * Fraction of images whose predicted class survives the attack.
 *
 * # Safety
 * Handles and `cfg` must be valid; `rho` must be a valid pointer.
 */
enum LrStatus lr_robust_accuracy(const struct LrModel *model,
                                 const struct LrModel *transfer,
                                 const struct LrDataset *ds,
                                 const struct LrAttackConfig *cfg,
                                 double *rho);

/**
 * Channel-averaged nuclear norm of one `C×N×M` image.
 *
 * # Safety
 * `image` must hold `channels·rows·cols` values and `out` be valid.
 */
enum LrStatus lr_nuclear_norm(const double *image,
                              size_t channels,
                              size_t rows,
                              size_t cols,
                              double *out);

/**
 * Element counts of a full perturbation and of rank-`rank` factors
 * (`rank = 0` means full).
 *
 * # Safety
 * `full` and `factored` must be valid pointers.
 */
enum LrStatus lr_memory_estimate(size_t d,
                                 size_t c,
                                 size_t n,
                                 size_t m,
                                 size_t rank,
                                 uint64_t *full,
                                 uint64_t *factored);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* LOWRANK_H */
