#ifndef MDMF_H
#define MDMF_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum {
  MDMF_STATUS_OK = 0,
  MDMF_STATUS_NULL_POINTER = 1,
  MDMF_STATUS_INVALID_ARGUMENT = 2,
  MDMF_STATUS_SHAPE = 3,
  MDMF_STATUS_PARSE = 4,
  MDMF_STATUS_CONFIG = 5,
  MDMF_STATUS_SPLIT_VIOLATION = 6,
  MDMF_STATUS_CAPACITY = 7,
  MDMF_STATUS_DEGENERATE = 8,
  MDMF_STATUS_NON_FINITE = 9,
  MDMF_STATUS_CHECKPOINT = 10,
  MDMF_STATUS_IO = 11,
  MDMF_STATUS_PANIC = 12,
} MdmfStatus;

// Run configuration.
typedef struct MdmfConfig MdmfConfig;

// Loaded or generated dataset.
typedef struct MdmfDataset MdmfDataset;

// Model, optimizer and data bound together.
typedef struct MdmfSession MdmfSession;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or NULL. The pointer
// stays valid until the next failing call on the same thread.
const char *mdmf_last_error(void);

// Default configuration.
//
// # Safety
// `out` must be a valid pointer to writable storage for a handle.
MdmfStatus mdmf_config_new(MdmfConfig **out);

// Reads a `key = value` config file.
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
MdmfStatus mdmf_config_load(const char *path, MdmfConfig **out);

// Sets one dotted key.
//
// # Safety
// `cfg` must come from this library; `key` and `value` must be
// NUL-terminated strings.
MdmfStatus mdmf_config_set(MdmfConfig *cfg, const char *key, const char *value);

// # Safety
// `cfg` must be NULL or a handle from this library not yet freed.
void mdmf_config_free(MdmfConfig *cfg);

// Generates the synthetic motif dataset with default shape settings.
//
// # Safety
// `out` must be writable.
MdmfStatus mdmf_dataset_synth(size_t classes,
                              size_t per_class,
                              double noise_sigma,
                              uint64_t seed,
                              MdmfDataset **out);

// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
MdmfStatus mdmf_dataset_load(const char *path, MdmfDataset **out);

// Writes the dataset as a manifest plus binary feature files under `dir`.
//
// # Safety
// `ds` must be a live handle; `dir` a NUL-terminated string.
MdmfStatus mdmf_dataset_write(const MdmfDataset *ds, const char *dir);

// Number of samples across all parts, or 0 for a NULL handle.
//
// # Safety
// `ds` must be NULL or a live handle.
size_t mdmf_dataset_len(const MdmfDataset *ds);

// # Safety
// `ds` must be NULL or a handle from this library not yet freed.
void mdmf_dataset_free(MdmfDataset *ds);

// New session. With a NULL dataset the data named by the config is loaded.
//
// # Safety
// `cfg` must be a live handle; `ds` NULL or a live handle; `out` writable.
MdmfStatus mdmf_session_new(const MdmfConfig *cfg, const MdmfDataset *ds, MdmfSession **out);

// Restores a session from a checkpoint file.
//
// # Safety
// `path` must be a NUL-terminated string; `out` writable.
MdmfStatus mdmf_session_load(const char *path, MdmfSession **out);

// # Safety
// `s` must be a live handle; `path` a NUL-terminated string.
MdmfStatus mdmf_session_save(const MdmfSession *s, const char *path);

// Trains `episodes` episodes. `last_loss` (nullable) receives the total
// loss of the final episode.
//
// # Safety
// `s` must be a live handle; `last_loss` NULL or writable.
MdmfStatus mdmf_session_train(MdmfSession *s, size_t episodes, double *last_loss);

// Mean accuracy and 95% interval half-width over `episodes` episodes of the
// configured evaluation part.
//
// # Safety
// `s` must be a live handle; `accuracy` and `ci95` writable.
MdmfStatus mdmf_session_evaluate(const MdmfSession *s,
                                 size_t episodes,
                                 double *accuracy,
                                 double *ci95);

// Writes pooled fused features as CSV; `rows` (nullable) receives the count.
//
// # Safety
// `s` must be a live handle; `path` a NUL-terminated string; `rows` NULL or
// writable.
MdmfStatus mdmf_session_export_embeddings(const MdmfSession *s,
                                          size_t episodes,
                                          const char *path,
                                          size_t *rows);

// # Safety
// `s` must be NULL or a handle from this library not yet freed.
void mdmf_session_free(MdmfSession *s);

// Alignment distance of a row-major `rows x cols` cost matrix. `grad`
// (nullable) receives `rows * cols` partial derivatives.
//
// # Safety
// `cost` must point to `rows * cols` doubles, `grad` NULL or to as many
// writable doubles, and `value` must be writable.
MdmfStatus mdmf_otam(const double *cost,
                     size_t rows,
                     size_t cols,
                     double gamma,
                     bool bidirectional,
                     double *value,
                     double *grad);

// Temperature softmax of `n` similarities into `probs`.
//
// # Safety
// `sims` must point to `n` doubles and `probs` to `n` writable doubles.
MdmfStatus mdmf_prompt_distribution(const double *sims,
                                    size_t n,
                                    double temperature,
                                    double *probs);

// Segment-sampled frame indices of a `len`-frame clip into `out` (`m`
// entries).
//
// # Safety
// `out` must point to `m` writable `size_t` values.
MdmfStatus mdmf_frame_indices(size_t len, size_t m, bool deterministic, uint64_t seed, size_t *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MDMF_H */
