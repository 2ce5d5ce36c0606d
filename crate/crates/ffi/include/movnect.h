#ifndef MOVNECT_H
#define MOVNECT_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Joints per pose.
 */
#define MOVNECT_JOINTS 15

typedef enum MovnectStatus {
  MOVNECT_STATUS_OK = 0,
  MOVNECT_STATUS_NULL_POINTER = 1,
  MOVNECT_STATUS_INVALID_ARGUMENT = 2,
  MOVNECT_STATUS_IO = 3,
  MOVNECT_STATUS_WEIGHT_MISMATCH = 4,
  MOVNECT_STATUS_NUMERIC_FAILURE = 5,
  MOVNECT_STATUS_TRACKING_LOST = 6,
  MOVNECT_STATUS_BUFFER_TOO_SMALL = 7,
  MOVNECT_STATUS_PANIC = 8,
} MovnectStatus;

typedef enum MovnectVariant {
  MOVNECT_VARIANT_TYPE_A = 0,
  MOVNECT_VARIANT_TYPE_B = 1,
  MOVNECT_VARIANT_TYPE_C = 2,
} MovnectVariant;

/**
 * Opaque network handle.
 */
typedef struct MovnectNetwork MovnectNetwork;

/**
 * Opaque streaming pipeline handle.
 */
typedef struct MovnectPipeline MovnectPipeline;

/**
 * One processed frame. Arrays are sized for [`MOVNECT_JOINTS`] joints.
 */
typedef struct MovnectPose {
  uint64_t frame;
  double t;
  /**
   * `u, v, confidence` per joint, frame pixels.
   */
  double kp2d[45];
  /**
   * Root-relative mm.
   */
  double pose3d[45];
  /**
   * Camera-space root, mm.
   */
  double root[3];
  /**
   * `w, x, y, z` per joint.
   */
  double rotations[60];
  /**
   * Crop-to-frame affine `a, b, tx, c, d, ty`.
   */
  double crop[6];
  /**
   * Non-zero when tracking or root recovery failed for this frame.
   */
  uint8_t lost;
} MovnectPose;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread; empty after a success.
 * Valid until the next call on the same thread.
 */
const char *movnect_last_error(void);

/**
 * Builds a network with seeded random weights.
 *
 * # Safety
 * `out` must be valid for writes.
 */
enum MovnectStatus movnect_network_build(enum MovnectVariant variant,
                                         uint32_t input_size,
                                         uint64_t seed,
                                         struct MovnectNetwork **out);

/**
 * Loads a weight file, detecting the variant from its contents.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` valid for writes.
 */
enum MovnectStatus movnect_network_load(const char *path, struct MovnectNetwork **out);

/**
 * # Safety
 * `net` must come from this library and not be used afterwards. Null is ignored.
 */
void movnect_network_free(struct MovnectNetwork *net);

/**
 * Parameter count, MAC count per forward pass and output map side.
 *
 * # Safety
 * `net` must be a live handle; output pointers may be null to skip them.
 */
enum MovnectStatus movnect_network_info(const struct MovnectNetwork *net,
                                        uint64_t *params,
                                        uint64_t *macs,
                                        uint32_t *map_size);

/**
 * Runs one `3 × S × S` image in [-1, 1] (planar RGB) and writes the heatmaps
 * and X, Y, Z maps, each `J × m × m`, back to back into `maps` (`4·J·m·m`
 * floats).
 *
 * # Safety
 * `input` must hold `input_len` floats and `maps` `maps_len` floats.
 */
enum MovnectStatus movnect_network_forward(const struct MovnectNetwork *net,
                                           const float *input,
                                           size_t input_len,
                                           float *maps,
                                           size_t maps_len);

/**
 * Creates a streaming pipeline over a copy of `net`.
 *
 * # Safety
 * `net` must be a live handle and `out` valid for writes.
 */
enum MovnectStatus movnect_pipeline_new(const struct MovnectNetwork *net,
                                        double focal,
                                        struct MovnectPipeline **out);

/**
 * # Safety
 * `p` must come from this library and not be used afterwards. Null is ignored.
 */
void movnect_pipeline_free(struct MovnectPipeline *p);

/**
 * Processes one interleaved RGB8 frame taken at time `t` seconds.
 *
 * # Safety
 * `rgb` must hold `width·height·3` bytes and `out` be valid for writes.
 */
enum MovnectStatus movnect_pipeline_process(struct MovnectPipeline *p,
                                            const uint8_t *rgb,
                                            uint32_t width,
                                            uint32_t height,
                                            double t,
                                            struct MovnectPose *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MOVNECT_H */
