#ifndef VDRIVE_H
#define VDRIVE_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum VdStatus {
  VD_STATUS_OK = 0,
  VD_STATUS_NULL_POINTER = 1,
  VD_STATUS_INVALID = 2,
  VD_STATUS_SHAPE = 3,
  VD_STATUS_IO = 4,
  VD_STATUS_FORMAT = 5,
  VD_STATUS_DIVERGENCE = 6,
  VD_STATUS_MISSING_CHECKPOINT = 7,
  // The output buffer is too small; the required length was written.
  VD_STATUS_BUFFER_TOO_SMALL = 8,
  VD_STATUS_PANIC = 9,
} VdStatus;

// Generated driving scene.
typedef struct VdScene VdScene;

// `f32` tensor with row-major data.
typedef struct VdTensor VdTensor;

typedef struct VdRewardWeights {
  double alpha;
  double beta;
  double omega_h;
  double omega_a;
} VdRewardWeights;

typedef struct VdRewardRecord {
  uint32_t p_off;
  double r_center;
  double r_h;
  double r_a;
  double r;
} VdRewardRecord;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failure on this thread, or null. Valid until the
// next failing call on the same thread.
const char *vd_last_error(void);

// Generates a scene with default parameters.
//
// # Safety
// `out_scene` must be a valid pointer.
enum VdStatus vd_scene_generate(uint64_t seed, struct VdScene **out_scene);

// # Safety
// `scene` must come from `vd_scene_generate` and not be used afterwards.
void vd_scene_free(struct VdScene *scene);

// # Safety
// Pointers must be valid.
enum VdStatus vd_scene_size(const struct VdScene *scene, size_t *height, size_t *width);

// Copies the ground-truth trajectory as `x, y` pairs into `xy`, which holds
// `capacity` points. `len` receives the point count.
//
// # Safety
// `xy` must hold `2 * capacity` doubles.
enum VdStatus vd_scene_trajectory(const struct VdScene *scene,
                                  double *xy,
                                  size_t capacity,
                                  size_t *len);

// Copies obstacle rectangles as `x0, y0, x1, y1` into `rects`.
//
// # Safety
// `rects` must hold `4 * capacity` values.
enum VdStatus vd_scene_obstacles(const struct VdScene *scene,
                                 int64_t *rects,
                                 size_t capacity,
                                 size_t *len);

// Default reward weights.
struct VdRewardWeights vd_reward_default_weights(void);

// Hybrid reward of an `n`-point trajectory in `scene`. A null `weights`
// uses the defaults.
//
// # Safety
// `xy` must hold `2 * n` doubles.
enum VdStatus vd_reward_score(const struct VdScene *scene,
                              const double *xy,
                              size_t n,
                              const struct VdRewardWeights *weights,
                              struct VdRewardRecord *record);

// Mean waypoint distance over the first `buckets[i]` points, into `means[i]`.
//
// # Safety
// `pred` and `gt` hold `2 * n` doubles; `buckets` and `means` hold
// `n_buckets` values.
enum VdStatus vd_l2_metric(const double *pred,
                           const double *gt,
                           size_t n,
                           const size_t *buckets,
                           size_t n_buckets,
                           double *means);

// Whether a `width x height` footprint centred on any waypoint overlaps any
// of the `n_rects` rectangles (`x0, y0, x1, y1`).
//
// # Safety
// `xy` holds `2 * n` doubles, `rects` holds `4 * n_rects` values.
enum VdStatus vd_trajectory_collides(const double *xy,
                                     size_t n,
                                     const int64_t *rects,
                                     size_t n_rects,
                                     double width,
                                     double height,
                                     bool *collides);

// Copies `len` values into a new tensor of the given dims.
//
// # Safety
// `dims` holds `rank` values and `data` holds `len` floats.
enum VdStatus vd_tensor_new(const size_t *dims,
                            size_t rank,
                            const float *data,
                            size_t len,
                            struct VdTensor **out_tensor);

// # Safety
// `tensor` must come from this library and not be used afterwards.
void vd_tensor_free(struct VdTensor *tensor);

// Rank of the tensor, or 0 for null.
//
// # Safety
// `tensor` must be valid or null.
size_t vd_tensor_rank(const struct VdTensor *tensor);

// Element count, or 0 for null.
//
// # Safety
// `tensor` must be valid or null.
size_t vd_tensor_len(const struct VdTensor *tensor);

// Pointer to the dims array, valid while the tensor lives.
//
// # Safety
// `tensor` must be valid or null.
const size_t *vd_tensor_dims(const struct VdTensor *tensor);

// Pointer to the data, valid while the tensor lives.
//
// # Safety
// `tensor` must be valid or null.
const float *vd_tensor_data(const struct VdTensor *tensor);

// # Safety
// `path` must be a NUL-terminated UTF-8 string.
enum VdStatus vd_tensor_write(const struct VdTensor *tensor, const char *path);

// # Safety
// `path` must be a NUL-terminated UTF-8 string and `out_tensor` valid.
enum VdStatus vd_tensor_read(const char *path, struct VdTensor **out_tensor);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* VDRIVE_H */
