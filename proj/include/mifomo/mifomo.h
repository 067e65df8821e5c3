#ifndef MIFOMO_H
#define MIFOMO_H

/* C interface to the mifomo library. Every object is an opaque handle owned by
 * the caller and released with the matching *_free function. Functions return
 * a status code; on failure mifomo_last_error() describes the problem for the
 * calling thread. Strings returned through char** are released with
 * mifomo_string_free. */

#include <stddef.h>
#include <stdint.h>

#if defined(MIFOMO_BUILDING_LIBRARY)
#define MIFOMO_API __attribute__((visibility("default")))
#else
#define MIFOMO_API
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum mifomo_status {
  MIFOMO_OK = 0,
  MIFOMO_ERR_DIMENSION = 1,
  MIFOMO_ERR_NUMERIC = 2,
  MIFOMO_ERR_CONTRACT = 3,
  MIFOMO_ERR_VALIDATION = 4,
  MIFOMO_ERR_CONFIG = 5,
  MIFOMO_ERR_FORMAT = 6,
  MIFOMO_ERR_SAMPLING = 7,
  MIFOMO_ERR_RENDER = 8,
  MIFOMO_ERR_IO = 9,
  MIFOMO_ERR_ARGUMENT = 10,
  MIFOMO_ERR_INTERNAL = 11
} mifomo_status;

typedef struct mifomo_config mifomo_config;
typedef struct mifomo_dataset mifomo_dataset;
typedef struct mifomo_model mifomo_model;
typedef struct mifomo_report mifomo_report;

MIFOMO_API const char* mifomo_version(void);
MIFOMO_API const char* mifomo_status_name(mifomo_status status);
/* Message of the last failure on this thread, "" if none. */
MIFOMO_API const char* mifomo_last_error(void);
/* Offending key of the last config failure on this thread, "" otherwise. */
MIFOMO_API const char* mifomo_last_error_key(void);
MIFOMO_API void mifomo_string_free(char* s);

/* Run configuration ------------------------------------------------------- */

MIFOMO_API mifomo_status mifomo_config_new(mifomo_config** out);
MIFOMO_API mifomo_status mifomo_config_load(const char* path, mifomo_config** out);
MIFOMO_API mifomo_status mifomo_config_set(mifomo_config* cfg, const char* key, const char* value);
MIFOMO_API mifomo_status mifomo_config_get(const mifomo_config* cfg, const char* key, char** value);
MIFOMO_API mifomo_status mifomo_config_validate(const mifomo_config* cfg);
/* Every key as "key = value" lines. */
MIFOMO_API mifomo_status mifomo_config_dump(const mifomo_config* cfg, char** text);
MIFOMO_API void mifomo_config_free(mifomo_config* cfg);

/* Datasets ---------------------------------------------------------------- */

/* Synthetic source and target cubes at the raw band count. */
MIFOMO_API mifomo_status mifomo_generate(const mifomo_config* cfg, mifomo_dataset** source, mifomo_dataset** target);
MIFOMO_API mifomo_status mifomo_dataset_read(const char* path, mifomo_dataset** out);
MIFOMO_API mifomo_status mifomo_dataset_write(const mifomo_dataset* ds, const char* path);
/* PCA fitted on `in` and applied to it. */
MIFOMO_API mifomo_status mifomo_dataset_pca(const mifomo_dataset* in, size_t out_bands, mifomo_dataset** out);
MIFOMO_API mifomo_status mifomo_dataset_info(const mifomo_dataset* ds, size_t* height, size_t* width, size_t* bands,
                                             size_t* classes, size_t* labeled);
MIFOMO_API mifomo_status mifomo_dataset_checksum(const mifomo_dataset* ds, uint64_t* out);
/* Ground-truth label raster as a PPM map. */
MIFOMO_API mifomo_status mifomo_dataset_render_labels(const mifomo_dataset* ds, const char* path);
MIFOMO_API void mifomo_dataset_free(mifomo_dataset* ds);

/* Models ------------------------------------------------------------------ */

/* Source phase. loss_trace_path may be NULL; otherwise one loss per line. */
MIFOMO_API mifomo_status mifomo_train_source(const mifomo_config* cfg, const mifomo_dataset* source,
                                             const char* loss_trace_path, mifomo_model** out);
/* Intermediate phase for trial `trial` (its support is derived from the
 * config seed). schedule_path and audit_path may be NULL. */
MIFOMO_API mifomo_status mifomo_adapt(const mifomo_config* cfg, const mifomo_model* checkpoint,
                                      const mifomo_dataset* source, const mifomo_dataset* target, size_t trial,
                                      int smoothing, const char* schedule_path, const char* audit_path,
                                      mifomo_model** out);
MIFOMO_API mifomo_status mifomo_model_read(const char* path, mifomo_model** out);
MIFOMO_API mifomo_status mifomo_model_write(const mifomo_model* model, const char* path);
MIFOMO_API mifomo_status mifomo_model_counts(const mifomo_model* model, size_t* trainable, size_t* total);
/* One CSV row per labeled pixel: pixel, label, z0..z(D-1). */
MIFOMO_API mifomo_status mifomo_dump_embeddings(const mifomo_model* model, const mifomo_dataset* ds,
                                                const char* path);
MIFOMO_API void mifomo_model_free(mifomo_model* model);

/* Experiments ------------------------------------------------------------- */

/* Evaluates `model` over the configured trials without adapting it. */
MIFOMO_API mifomo_status mifomo_evaluate(const mifomo_config* cfg, const mifomo_model* model,
                                         const mifomo_dataset* target, int smoothing, const char* map_path,
                                         mifomo_report** out);
/* Runs the trials of one variant ("source-only", "no-intermediate",
 * "no-smoothing", "full") from a source checkpoint. The datasets must already
 * be band-reduced. map_path and schedule_path may be NULL. */
MIFOMO_API mifomo_status mifomo_run_variant(const mifomo_config* cfg, const char* variant, const mifomo_model* source_ckpt,
                                            const mifomo_dataset* source, const mifomo_dataset* target,
                                            const char* map_path, const char* schedule_path, mifomo_report** out);
MIFOMO_API mifomo_status mifomo_report_text(const mifomo_report* r, char** text);
MIFOMO_API mifomo_status mifomo_report_kv(const mifomo_report* r, char** text);
/* metric is "oa", "aa" or "kc". */
MIFOMO_API mifomo_status mifomo_report_metric(const mifomo_report* r, const char* metric, double* mean, double* stddev);
MIFOMO_API mifomo_status mifomo_report_timings(const mifomo_report* r, char** text);
MIFOMO_API void mifomo_report_free(mifomo_report* r);

/* Finite-difference gradient check of a tiny encoder. all_groups also checks
 * the backbone. text receives one line per parameter group. */
MIFOMO_API mifomo_status mifomo_gradcheck(int all_groups, double* worst, int* passed, char** text);

#ifdef __cplusplus
}
#endif

#endif
