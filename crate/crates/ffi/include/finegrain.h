#ifndef FINEGRAIN_H
#define FINEGRAIN_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result of every fallible call. Error kinds share their numbering with the
// command line's exit codes.
typedef enum FgStatus {
  FG_STATUS_OK = 0,
  FG_STATUS_NULL_POINTER = 1,
  FG_STATUS_INVALID_UTF8 = 2,
  FG_STATUS_CONFIG = 3,
  FG_STATUS_SHAPE = 4,
  FG_STATUS_NUMERIC = 5,
  FG_STATUS_STATE = 6,
  FG_STATUS_DEGENERATE_STATS = 7,
  FG_STATUS_UNFUSABLE = 8,
  FG_STATUS_FORMAT = 9,
  FG_STATUS_VERSION = 10,
  FG_STATUS_MISSING = 11,
  FG_STATUS_IO = 12,
  FG_STATUS_BUFFER_TOO_SMALL = 13,
  FG_STATUS_PANIC = 14,
} FgStatus;

// Opaque network handle.
typedef struct FgNetwork FgNetwork;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Builds a freshly initialized network from `key=value` configuration text
// (NULL or empty for the defaults). The handle is in inference mode.
//
// # Safety
// `config` must be NULL or a NUL-terminated string; `out` must be writable.
enum FgStatus fg_network_build(const char *config, struct FgNetwork **out);

// Releases a handle. NULL is ignored.
//
// # Safety
// `net` must be NULL or a handle from this library not yet freed.
void fg_network_free(struct FgNetwork *net);

// Multiply-accumulate count of one inference pass on the fused graph.
//
// # Safety
// `net` must be a live handle and `out` writable.
enum FgStatus fg_network_flops(const struct FgNetwork *net, uint64_t *out);

// Number of learnable scalars.
//
// # Safety
// `net` must be a live handle and `out` writable.
enum FgStatus fg_network_params(const struct FgNetwork *net, uint64_t *out);

// Expected input image dimensions and the number of output classes.
//
// # Safety
// `net` must be a live handle; the four output pointers must be writable.
enum FgStatus fg_network_dims(const struct FgNetwork *net,
                              size_t *channels,
                              size_t *height,
                              size_t *width,
                              size_t *classes);

// Whether the handle holds a fused network (1) or not (0).
//
// # Safety
// `net` must be a live handle and `out` writable.
enum FgStatus fg_network_is_fused(const struct FgNetwork *net, uint8_t *out);

// Inference on `batch` NCHW images. `input` holds `batch·C·H·W` floats;
// `output` receives `batch·classes` logits and its length is `output_len`.
//
// # Safety
// `input` must be readable for `batch·C·H·W` floats and `output` writable for
// `output_len` floats.
enum FgStatus fg_network_forward(const struct FgNetwork *net,
                                 const float *input,
                                 size_t batch,
                                 float *output,
                                 size_t output_len);

// Sets every running statistic from the batch statistics of `batch` NCHW
// images (one training-mode pass; weights are unchanged).
//
// # Safety
// `net` must be a live handle not used concurrently, and `input` readable for
// `batch·C·H·W` floats.
enum FgStatus fg_network_calibrate(struct FgNetwork *net, const float *input, size_t batch);

// Creates a new handle with every normalization folded into its convolution.
// The input handle is unchanged.
//
// # Safety
// `net` must be a live handle and `out` writable.
enum FgStatus fg_network_fuse(const struct FgNetwork *net, struct FgNetwork **out);

// Loads a checkpoint file into a new handle in inference mode.
//
// # Safety
// `path` must be a NUL-terminated string and `out` writable.
enum FgStatus fg_checkpoint_load(const char *path, struct FgNetwork **out);

// Writes the handle to a checkpoint file.
//
// # Safety
// `net` must be a live handle and `path` a NUL-terminated string.
enum FgStatus fg_checkpoint_save(const struct FgNetwork *net, const char *path);

// Message for the most recent failure on this thread, or "" after a success.
// The pointer stays valid until the next call into this library on the same
// thread.
const char *fg_last_error_message(void);

// Static name of a status code.
const char *fg_status_name(enum FgStatus status);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FINEGRAIN_H */
