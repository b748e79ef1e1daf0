#ifndef BAGCAMS_H
#define BAGCAMS_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum BagcamsStatus {
  BAGCAMS_STATUS_OK = 0,
  BAGCAMS_STATUS_NULL_POINTER = 1,
  BAGCAMS_STATUS_INVALID_ARGUMENT = 2,
  BAGCAMS_STATUS_IO = 3,
  BAGCAMS_STATUS_CORRUPT = 4,
  BAGCAMS_STATUS_SHAPE = 5,
  // The method cannot run here (CAM off the final layer, localizer budget, domain).
  BAGCAMS_STATUS_UNSUPPORTED = 6,
  BAGCAMS_STATUS_INTERNAL = 7,
} BagcamsStatus;

// A localization map at input resolution, values in `[0, 1]`, row-major.
typedef struct BagcamsMap BagcamsMap;

// A trained classifier loaded from a checkpoint.
typedef struct BagcamsNetwork BagcamsNetwork;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *bagcams_version(void);

// Message describing the last failed call on this thread, or NULL.
//
// The pointer stays valid until the next `bagcams_*` call on this thread.
const char *bagcams_last_error_message(void);

// Loads a checkpoint written by `bagcams train`.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum BagcamsStatus bagcams_network_load(const char *path, struct BagcamsNetwork **out);

// # Safety
// `network` must come from [`bagcams_network_load`] and not be freed twice. NULL is ignored.
void bagcams_network_free(struct BagcamsNetwork *network);

// Expected image layout `[channels, height, width]` and the class count.
//
// # Safety
// All pointers must be valid.
enum BagcamsStatus bagcams_network_shape(const struct BagcamsNetwork *network,
                                         size_t *channels,
                                         size_t *height,
                                         size_t *width,
                                         size_t *classes);

// Class logits for one channel-major image; `scores_len` must equal the class count.
//
// # Safety
// `image` must hold `image_len` values and `scores` room for `scores_len`.
enum BagcamsStatus bagcams_network_forward(const struct BagcamsNetwork *network,
                                           const double *image,
                                           size_t image_len,
                                           double *scores,
                                           size_t scores_len);

// Normalized, upsampled map for one image.
//
// `method` is one of `cam`, `gradcam`, `gradcampp`, `pcs`, `bagcams-closed`,
// `bagcams-exact`; `layer` a capture name such as `final` or `block1`;
// `scheme` (`avg`, `alpha`, `group`) applies to `bagcams-exact` and may be
// NULL for `group`. A negative `class_index` selects the predicted class.
//
// # Safety
// Strings must be NUL-terminated, `image` must hold `image_len` values and
// `out` must be valid.
enum BagcamsStatus bagcams_localize(const struct BagcamsNetwork *network,
                                    const double *image,
                                    size_t image_len,
                                    const char *method,
                                    const char *layer,
                                    const char *scheme,
                                    int64_t class_index,
                                    struct BagcamsMap **out);

// # Safety
// `map` must come from [`bagcams_localize`] and not be freed twice. NULL is ignored.
void bagcams_map_free(struct BagcamsMap *map);

// Map dimensions and the localized and predicted classes.
//
// # Safety
// All pointers must be valid.
enum BagcamsStatus bagcams_map_info(const struct BagcamsMap *map,
                                    size_t *height,
                                    size_t *width,
                                    size_t *class_index,
                                    size_t *predicted);

// Borrowed pointer to the `height * width` map values, valid until the map is freed.
// Returns NULL for a NULL map.
//
// # Safety
// `map` must be a live handle or NULL.
const double *bagcams_map_values(const struct BagcamsMap *map);

// Dataset-pooled PxAP and peak IoU of `images` maps against binary masks,
// both stored image after image, row-major, `height * width` per image.
// Masks are nonzero for object pixels.
//
// # Safety
// `maps` and `masks` must hold `images * height * width` values each.
enum BagcamsStatus bagcams_pixel_scores(const double *maps,
                                        const uint8_t *masks,
                                        size_t images,
                                        size_t height,
                                        size_t width,
                                        double *pxap,
                                        double *piou);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* BAGCAMS_H */
