#ifndef CONSISAUG_H
#define CONSISAUG_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result of every fallible call. The numeric values of the first five
// match the command-line exit codes.
typedef enum CsgStatus {
  CSG_STATUS_OK = 0,
  CSG_STATUS_INVALID_ARGUMENT = 2,
  CSG_STATUS_IO = 3,
  CSG_STATUS_NUMERIC = 4,
  CSG_STATUS_VERIFICATION = 5,
  CSG_STATUS_NULL_POINTER = 6,
  CSG_STATUS_INVALID_UTF8 = 7,
  CSG_STATUS_PANIC = 8,
} CsgStatus;

// A loaded dataset split.
typedef struct CsgDataset CsgDataset;

// A training state: student, EMA teacher and optimizer moments.
typedef struct CsgModel CsgModel;

// Mirror of the evaluation report.
typedef struct CsgMetrics {
  double precision;
  double recall;
  double map50;
  double f1;
  double f2;
  uint64_t tp;
  uint64_t fp;
  uint64_t fn_;
  double loss_sup;
  double loss_con_loc;
  double loss_con_cls;
} CsgMetrics;

// One detection in pixel coordinates (center, width, height).
typedef struct CsgDetection {
  double cx;
  double cy;
  double w;
  double h;
  double score;
  uint32_t class_id;
} CsgDetection;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Copies the calling thread's last error message into `buf` as a
// NUL-terminated string, truncating if needed. Returns the full message
// length in bytes, excluding the terminator. Pass a null `buf` to query
// the length.
//
// # Safety
// `buf` must be null or point to `len` writable bytes.
size_t csg_last_error_message(char *buf, size_t len);

// Library version as a static NUL-terminated string.
const char *csg_version(void);

// F1 and F2 from precision and recall. Either output may be null.
//
// # Safety
// Non-null outputs must be writable.
enum CsgStatus csg_f_scores(double precision, double recall, double *f1, double *f2);

// Writes a synthetic dataset with `train`, `val` and `test` splits under
// `out_dir`. `domain` is `"a"` or `"b"`.
//
// # Safety
// `out_dir` and `domain` must be NUL-terminated strings.
enum CsgStatus csg_generate_data(const char *out_dir,
                                 const char *domain,
                                 size_t n_train,
                                 size_t n_val,
                                 size_t n_test,
                                 size_t image_size,
                                 uint64_t seed);

// Loads one split directory (holding `images/` and `labels/`).
//
// # Safety
// `dir` must be a NUL-terminated string and `out` writable.
enum CsgStatus csg_dataset_load(const char *dir, struct CsgDataset **out);

// Number of samples, or 0 for a null handle.
//
// # Safety
// `ds` must be null or a live handle.
size_t csg_dataset_len(const struct CsgDataset *ds);

// # Safety
// `ds` must be null or a handle not freed before.
void csg_dataset_free(struct CsgDataset *ds);

// Trains with settings given as `key = value` lines and returns the final
// state. Outputs are written to the configured `out_dir` exactly as the
// `train` command does.
//
// # Safety
// `config_text` must be a NUL-terminated string and `out` writable.
enum CsgStatus csg_train(const char *config_text, struct CsgModel **out);

// Loads a checkpoint written by training.
//
// # Safety
// `path` must be a NUL-terminated string and `out` writable.
enum CsgStatus csg_model_load(const char *path, struct CsgModel **out);

// Saves the full state; the file loads back bit-exactly.
//
// # Safety
// `model` must be a live handle and `path` a NUL-terminated string.
enum CsgStatus csg_model_save(const struct CsgModel *model, const char *path);

// Completed training epochs, or 0 for a null handle.
//
// # Safety
// `model` must be null or a live handle.
uint64_t csg_model_epoch(const struct CsgModel *model);

// Input side length expected by the model, or 0 for a null handle.
//
// # Safety
// `model` must be null or a live handle.
size_t csg_model_image_size(const struct CsgModel *model);

// # Safety
// `model` must be null or a handle not freed before.
void csg_model_free(struct CsgModel *model);

// Evaluates the student (or the teacher when `use_teacher` is nonzero).
//
// # Safety
// `model` and `ds` must be live handles and `out` writable.
enum CsgStatus csg_evaluate(const struct CsgModel *model,
                            const struct CsgDataset *ds,
                            int32_t use_teacher,
                            double conf_threshold,
                            double nms_iou,
                            struct CsgMetrics *out);

// Detects objects in one interleaved RGB8 image of the model's input size.
// Up to `capacity` detections, highest score first, are written to `dets`;
// `count` receives the total number found, which may exceed `capacity`.
//
// # Safety
// `rgb` must point to `3 * height * width` bytes, `dets` to `capacity`
// writable entries (or be null when `capacity` is 0), and `count` must be
// writable.
enum CsgStatus csg_predict(const struct CsgModel *model,
                           const uint8_t *rgb,
                           size_t height,
                           size_t width,
                           double conf_threshold,
                           double nms_iou,
                           struct CsgDetection *dets,
                           size_t capacity,
                           size_t *count);

// Runs the gradient-check suite for seeds `seed .. seed + seeds`.
// `failed` (if non-null) receives the number of failing checks; the status
// is [`CsgStatus::Verification`] when any check fails.
//
// # Safety
// `failed` must be null or writable.
enum CsgStatus csg_grad_check(uint64_t seed, uint64_t seeds, uint64_t *failed);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CONSISAUG_H */
