/* C interface of the FST-Mamba library. All functions are thread-compatible:
 * distinct handles may be used from distinct threads. Strings returned through
 * `char**` are owned by the caller and released with fstm_string_free. */
#ifndef FSTM_FSTM_H
#define FSTM_FSTM_H

#include <stddef.h>
#include <stdint.h>

#if defined(_WIN32)
#define FSTM_API __declspec(dllexport)
#else
#define FSTM_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum fstm_status {
  FSTM_OK = 0,
  FSTM_ERR_INVALID_ARGUMENT = 1,
  FSTM_ERR_SHAPE = 2,
  FSTM_ERR_DOMAIN = 3,
  FSTM_ERR_NUMERIC = 4,
  FSTM_ERR_CONFIG = 5,
  FSTM_ERR_IO = 6,
  FSTM_ERR_FORMAT = 7,
  FSTM_ERR_CHECK_FAILED = 8, /* evaluation or invariant check did not pass */
  FSTM_ERR_INTERNAL = 9
} fstm_status;

/* Message of the last failure on the calling thread ("" when none). */
FSTM_API const char* fstm_last_error(void);
FSTM_API const char* fstm_status_name(fstm_status status);
FSTM_API const char* fstm_version(void);
FSTM_API int fstm_container_version(void);
FSTM_API void fstm_string_free(char* s);

/* ---- models ------------------------------------------------------------ */

typedef struct fstm_model fstm_model;

/* Model from a JSON configuration; parameters initialised from its seed. */
FSTM_API fstm_status fstm_model_create(const char* config_json, fstm_model** out);
FSTM_API fstm_status fstm_model_load(const char* checkpoint_path, fstm_model** out);
FSTM_API fstm_status fstm_model_save(const fstm_model* model, const char* checkpoint_path);
FSTM_API void fstm_model_free(fstm_model* model);

/* JSON: configuration, padded grid size, output size, parameter counts. */
FSTM_API fstm_status fstm_model_info(const fstm_model* model, char** info_json);

/* x: padded dFNC [batch, n_padded, n_padded, t], row-major. out receives
 * batch * output_dim values (logits or regression outputs). */
FSTM_API fstm_status fstm_model_predict(const fstm_model* model, const double* x,
                                        size_t batch, size_t t, double* out,
                                        size_t out_len);

/* ---- file-level pipeline ------------------------------------------------ */

/* Synthetic cohort from a JSON spec: writes a time-series container
 * [S, T_total, N] and a label container [S]. Report: JSON. */
FSTM_API fstm_status fstm_generate_cohort(const char* spec_json, const char* series_path,
                                          const char* labels_path, char** report_json);

/* Sliding-window dFNC of a time-series container into a dFNC container. */
FSTM_API fstm_status fstm_compute_dfnc(const char* series_path, const char* dfnc_path,
                                       size_t window, size_t stride, char** report_json);

/* Untrained checkpoint for run_config_json {"model", "train"}. When dfnc_path
 * is non-NULL and the model config names no networks, the atlas comes from
 * the data header. */
FSTM_API fstm_status fstm_init_checkpoint(const char* run_config_json, const char* dfnc_path,
                                          const char* checkpoint_path, char** report_json);

typedef void (*fstm_epoch_callback)(const char* epoch_json, void* user);

/* run_config_json: {"model": {...}, "train": {...}}. Labels come from the
 * dFNC header unless labels_path is non-NULL. metrics_path (nullable)
 * receives one JSON record per epoch. */
FSTM_API fstm_status fstm_train(const char* run_config_json, const char* dfnc_path,
                                const char* labels_path, const char* checkpoint_path,
                                const char* metrics_path, fstm_epoch_callback on_epoch,
                                void* user, char** report_json);

/* subset: "all", "train" or "val" (the seeded split stored in the
 * checkpoint). Undefined metrics (single-class subset) are null in the
 * report and listed under "warnings"; the call still returns FSTM_OK. */
FSTM_API fstm_status fstm_evaluate(const char* checkpoint_path, const char* dfnc_path,
                                   const char* labels_path, const char* subset,
                                   char** report_json);

/* Integrated gradients over the selected samples (max_samples = 0: all).
 * Writes the cohort-mean [N, N] map as a container and, when heatmap_path is
 * non-NULL, a PPM rendering. */
FSTM_API fstm_status fstm_attribute(const char* checkpoint_path, const char* dfnc_path,
                                    const char* labels_path, const char* subset,
                                    size_t steps, size_t max_samples,
                                    const char* map_path, const char* heatmap_path,
                                    char** report_json);

/* Invariant suite. fault_cva corrupts the CVA offset for the duration of the
 * run. Returns FSTM_ERR_CHECK_FAILED when any check fails. */
FSTM_API fstm_status fstm_run_checks(int fault_cva, int gradients, uint64_t seed,
                                     char** report_json);

/* Recurrent scan timing per length plus the convolution cross-check. */
FSTM_API fstm_status fstm_bench_scan(const size_t* lengths, size_t n_lengths,
                                     size_t state, size_t channels, size_t repeats,
                                     uint64_t seed, char** report_json);

#ifdef __cplusplus
}
#endif

#endif /* FSTM_FSTM_H */
