/* densefuse C API: curation kernels (filtering, similarity, dedup, stats, prompt assembly). */

#ifndef DENSEFUSE_H
#define DENSEFUSE_H

#pragma once

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result of a library call.
typedef enum DfStatus {
  // Success.
  DF_STATUS_OK = 0,
  // A required pointer argument was null.
  DF_STATUS_NULL_ARGUMENT = 1,
  // An argument was outside its documented domain.
  DF_STATUS_INVALID_ARGUMENT = 2,
  // A string argument was not valid UTF-8.
  DF_STATUS_BAD_UTF8 = 3,
  // A vector had zero norm where a direction was required.
  DF_STATUS_ZERO_VECTOR = 4,
  // Two vectors disagreed on dimension.
  DF_STATUS_DIMENSION_MISMATCH = 5,
  // The bundle cannot be rendered into the prompt grammar.
  DF_STATUS_BAD_BUNDLE = 6,
  // An index was out of range for the handle's contents.
  DF_STATUS_OUT_OF_RANGE = 7,
  // The operation panicked or failed internally.
  DF_STATUS_INTERNAL = 8,
} DfStatus;

// Which prompt template to render.
typedef enum DfPromptKind {
  DF_PROMPT_META_GPT4V = 0,
  DF_PROMPT_ENGINE = 1,
} DfPromptKind;

// Annotation bundle under construction for prompt assembly.
typedef struct DfBundle DfBundle;

// One cluster's members staged for semantic dedup.
typedef struct DfDedup DfDedup;

// Character, word, and sentence counts for one caption.
typedef struct DfCaptionStats {
  uint64_t char_count;
  uint64_t word_count;
  uint64_t sentence_count;
} DfCaptionStats;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version, as a static NUL-terminated string.
const char *df_version(void);

// Resolution filter: nonzero iff min(width, height) >= min_short_edge.
bool df_filter_resolution(uint32_t width_px, uint32_t height_px, uint32_t min_short_edge_px);

// Normalizes `vector` (length `len`) to unit L2 norm in place.
//
// # Safety
// `vector` must point to `len` readable and writable floats.
enum DfStatus df_normalize(float *vector, size_t len);

// Cosine similarity of two vectors of length `len`, written to `out`.
//
// # Safety
// `a` and `b` must point to `len` readable floats; `out` must be a
// valid pointer to one double.
enum DfStatus df_cosine_similarity(const float *a, const float *b, size_t len, double *out);

// Counts characters (Unicode scalars), words, and sentences of a
// NUL-terminated UTF-8 caption.
//
// # Safety
// `caption` must be a valid NUL-terminated string; `out` must point
// to a writable `DfCaptionStats`.
enum DfStatus df_count_stats(const char *caption, struct DfCaptionStats *out);

// Creates a dedup builder for vectors of dimension `dim` at the
// given duplicate threshold. Returns null if epsilon is outside
// (0, 1) or dim is zero.
struct DfDedup *df_dedup_new(double epsilon, size_t dim);

// Stages one member: id, its embedding (length = dim, normalized
// internally), and its similarity to the cluster centroid.
//
// # Safety
// `handle` must come from `df_dedup_new` and not be freed; `id` must
// be NUL-terminated UTF-8; `vector` must point to `dim` floats.
enum DfStatus df_dedup_add(struct DfDedup *handle,
                           const char *id,
                           const float *vector,
                           double centroid_similarity);

// Runs greedy dedup over the staged members. Decisions are then
// readable by index in the staged order.
//
// # Safety
// `handle` must come from `df_dedup_new` and not be freed.
enum DfStatus df_dedup_run(struct DfDedup *handle);

// Number of decisions available after `df_dedup_run`.
//
// # Safety
// `handle` must come from `df_dedup_new` and not be freed.
size_t df_dedup_len(const struct DfDedup *handle);

// Whether the member at `index` (staged order) was kept.
//
// # Safety
// `handle` must come from `df_dedup_new` and not be freed; `out`
// must point to a writable bool.
enum DfStatus df_dedup_kept(const struct DfDedup *handle, size_t index, bool *out);

// Borrowed id of the member at `index`; valid until the handle is
// freed. Null if the index is out of range.
//
// # Safety
// `handle` must come from `df_dedup_new` and not be freed.
const char *df_dedup_id(const struct DfDedup *handle, size_t index);

// Borrowed id of the kept member this one duplicates; null when the
// member was kept (or the index is out of range).
//
// # Safety
// `handle` must come from `df_dedup_new` and not be freed.
const char *df_dedup_duplicate_of(const struct DfDedup *handle, size_t index);

// Releases a dedup handle.
//
// # Safety
// `handle` must come from `df_dedup_new` and not already be freed.
void df_dedup_free(struct DfDedup *handle);

// Creates an empty bundle for one image.
//
// # Safety
// `image_id` must be NUL-terminated UTF-8.
struct DfBundle *df_bundle_new(const char *image_id);

// Sets the world-knowledge line (the raw web caption).
//
// # Safety
// `handle` must come from `df_bundle_new` and not be freed; `text`
// must be NUL-terminated UTF-8.
enum DfStatus df_bundle_set_world_knowledge(struct DfBundle *handle, const char *text);

// Appends a tag.
//
// # Safety
// `handle` must come from `df_bundle_new` and not be freed; `name`
// must be NUL-terminated UTF-8.
enum DfStatus df_bundle_add_tag(struct DfBundle *handle, const char *name, double score);

// Appends a detection box with pixel corners (x1, y1) inclusive-left
// and (x2, y2) exclusive-right; x2 > x1 and y2 > y1 are required.
//
// # Safety
// `handle` must come from `df_bundle_new` and not be freed; `label`
// must be NUL-terminated UTF-8.
enum DfStatus df_bundle_add_box(struct DfBundle *handle,
                                const char *label,
                                uint32_t x1,
                                uint32_t y1,
                                uint32_t x2,
                                uint32_t y2,
                                double confidence,
                                bool open_set);

// Appends an OCR line; pass `has_bbox = false` to omit coordinates.
//
// # Safety
// `handle` must come from `df_bundle_new` and not be freed; `text`
// must be NUL-terminated UTF-8.
enum DfStatus df_bundle_add_ocr(struct DfBundle *handle,
                                const char *text,
                                bool has_bbox,
                                uint32_t x1,
                                uint32_t y1,
                                uint32_t x2,
                                uint32_t y2,
                                double confidence);

// Renders the bundle into a prompt of the requested kind. On
// success, `*out` receives an owned NUL-terminated string; release
// it with `df_string_free`.
//
// # Safety
// `handle` must come from `df_bundle_new` and not be freed; `out`
// must point to a writable pointer.
enum DfStatus df_prompt_assemble(const struct DfBundle *handle, enum DfPromptKind kind, char **out);

// Releases a bundle handle.
//
// # Safety
// `handle` must come from `df_bundle_new` and not already be freed.
void df_bundle_free(struct DfBundle *handle);

// Releases a string returned via an out-parameter.
//
// # Safety
// `s` must have been produced by this library and not already freed.
void df_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DENSEFUSE_H */
