#ifndef FIBERLAB_H
#define FIBERLAB_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum FlStatus {
  FL_STATUS_OK = 0,
  FL_STATUS_NULL_POINTER = 1,
  FL_STATUS_INVALID_ARGUMENT = 2,
  FL_STATUS_NUMERICAL = 3,
  FL_STATUS_IO = 4,
  FL_STATUS_PANIC = 5,
} FlStatus;

typedef enum FlGuidancePreset {
  // Boost window `[0.4 T, 0.7 T]`.
  FL_GUIDANCE_PRESET_DEFAULT = 0,
  // Guidance on the last 30% of the schedule only.
  FL_GUIDANCE_PRESET_LATE = 1,
} FlGuidancePreset;

// Unconditional prior on the default 100-step VP schedule.
typedef struct FlPrior FlPrior;

// Feature extractor `phi`.
typedef struct FlSubject FlSubject;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread; empty when none. The
// pointer stays valid until the next failing call on the same thread.
const char *fl_last_error_message(void);

// Library version as a static NUL-terminated string.
const char *fl_version(void);

// Resolves a subject id (`colorglyph/flatten`, `colorglyph/proj:<d_h>`,
// `colorglyph/ae:<file>`, `linear:<file>`) for `h x w` images.
//
// # Safety
// `id` must be a NUL-terminated string and `out` a valid pointer.
enum FlStatus fl_subject_new(const char *id, size_t h, size_t w, struct FlSubject **out);

// # Safety
// `subject` must come from [`fl_subject_new`] and not be used afterwards.
void fl_subject_free(struct FlSubject *subject);

// # Safety
// `subject` must be a live handle; `input_dim` and `output_dim` valid pointers.
enum FlStatus fl_subject_dims(const struct FlSubject *subject,
                              size_t *input_dim,
                              size_t *output_dim);

// Embeds `rows` row-major inputs of `input_dim` values into `out`
// (`rows * output_dim` values).
//
// # Safety
// `x` and `out` must hold the stated number of values.
enum FlStatus fl_subject_embed(const struct FlSubject *subject,
                               const double *x,
                               size_t rows,
                               double *out);

// `‖phi(a) − phi(b)‖²` for two inputs of `input_dim` values.
//
// # Safety
// `a` and `b` must hold `input_dim` values and `out` be a valid pointer.
enum FlStatus fl_fiber_loss(const struct FlSubject *subject,
                            const double *a,
                            const double *b,
                            double *out);

// Colorizes an `h x w` gray grid with background `color[3]` into planar
// RGB `out` (`3 h w` values). Colors must lie in `[0, 1)`.
//
// # Safety
// `gray` must hold `h w` values, `color` 3 and `out` `3 h w`.
enum FlStatus fl_colorize(const double *gray, size_t h, size_t w, const double *color, double *out);

// Loads an epsilon-parameterized prior checkpoint (FLB1 plus optional
// `.skip.json` sidecar) on the default 100-step VP schedule.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum FlStatus fl_prior_load(const char *path, struct FlPrior **out);

// # Safety
// `prior` must come from [`fl_prior_load`] and not be used afterwards.
void fl_prior_free(struct FlPrior *prior);

// # Safety
// `prior` must be a live handle and `dim` a valid pointer.
enum FlStatus fl_prior_dim(const struct FlPrior *prior, size_t *dim);

// One guided sample per target embedding: `targets` holds `n` row-major
// embeddings of `output_dim` values, `out` receives `n` samples of the
// prior's dimension. `gamma_scale` multiplies the preset's schedule; 0
// gives unguided samples. Results depend only on `seed`.
//
// # Safety
// Handles must be live and the buffers hold the stated number of values.
enum FlStatus fl_guided_sample(const struct FlPrior *prior,
                               const struct FlSubject *subject,
                               const double *targets,
                               size_t n,
                               enum FlGuidancePreset preset,
                               double gamma_scale,
                               uint64_t seed,
                               double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FIBERLAB_H */
