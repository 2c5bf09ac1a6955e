/* C interface to the quantlens core. All handles are opaque; every call
 * returns a ql_status and, on failure, ql_last_error() describes it as JSON:
 *   {"error": "<code name>", "code": <int>, "message": "..."}
 * Strings returned through char** are owned by the caller and released with
 * ql_string_free. The last-error slot is per thread. */
#ifndef QUANTLENS_C_API_H
#define QUANTLENS_C_API_H

#include <stddef.h>
#include <stdint.h>

#if defined(_WIN32)
#define QL_API __declspec(dllexport)
#else
#define QL_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum ql_status {
  QL_OK = 0,
  QL_ERR_INVALID_RANGE = 1,
  QL_ERR_EMPTY_INPUT = 2,
  QL_ERR_SHAPE = 3,
  QL_ERR_NUMERIC = 4,
  QL_ERR_CONFIG = 5,
  QL_ERR_STRUCTURE = 6,
  QL_ERR_CALIBRATION = 7,
  QL_ERR_INCOMPLETE_SPEC = 8,
  QL_ERR_INVALID_PARAMETER = 9,
  QL_ERR_INVALID_GEOMETRY = 10,
  QL_ERR_UNDEFINED_METRIC = 11,
  QL_ERR_DEGENERATE = 12,
  QL_ERR_NORMALIZATION = 13,
  QL_ERR_USAGE = 14,
  QL_ERR_INGESTION = 15,
  QL_ERR_IO = 16,
  QL_ERR_NULL_ARGUMENT = 90,
  QL_ERR_INTERNAL = 99
} ql_status;

typedef struct ql_experiment ql_experiment;
typedef struct ql_suite ql_suite;
typedef struct ql_model ql_model;

QL_API const char* ql_version(void);
QL_API const char* ql_last_error(void);
QL_API void ql_string_free(char* s);

/* Experiments: config_json is an experiment config document. */
QL_API ql_status ql_experiment_run(const char* config_json, ql_experiment** out);
QL_API ql_status ql_experiment_row_json(const ql_experiment* e, char** out_json);
QL_API ql_status ql_experiment_result_json(const ql_experiment* e, char** out_json);
QL_API ql_status ql_experiment_emit(const ql_experiment* e, const char* out_dir);
QL_API ql_status ql_experiment_model(const ql_experiment* e, ql_model** out);
QL_API void ql_experiment_free(ql_experiment* e);

/* Suites: suite_json holds {"base": {...}, "variants": [...], "inits": [...], "threads": n}. */
QL_API ql_status ql_suite_run(const char* suite_json, ql_suite** out);
QL_API size_t ql_suite_size(const ql_suite* s);
QL_API ql_status ql_suite_rows_json(const ql_suite* s, char** out_json);
QL_API ql_status ql_suite_emit(const ql_suite* s, const char* out_dir);
QL_API void ql_suite_free(ql_suite* s);

/* Trained models. */
QL_API ql_status ql_model_load(const char* path, ql_model** out);
QL_API ql_status ql_model_save(const ql_model* m, const char* path);
QL_API ql_status ql_model_metadata_json(const ql_model* m, char** out_json);
/* options_json keys (all optional; defaults come from the experiment config
 * stored with the model): data, seed, samples, clip_fraction, bits, out. */
QL_API ql_status ql_model_analyze(const ql_model* m, const char* options_json, char** out_json);
QL_API ql_status ql_model_quantize(const ql_model* m, const char* options_json, char** out_json);
QL_API void ql_model_free(ql_model* m);

/* Reports and data. */
QL_API ql_status ql_report_from_bundle(const char* bundle_path, const char* out_dir);
QL_API ql_status ql_write_synthetic_cifar10(const char* dir, size_t train_count,
                                            size_t test_count, uint64_t seed);

/* Quantization primitives. */
QL_API ql_status ql_quant_params(double lo, double hi, int bits, double* scale,
                                 int32_t* zero_point);
QL_API ql_status ql_percentile_range(const float* values, size_t n, double clip_fraction,
                                     float* lo, float* hi);

#ifdef __cplusplus
}
#endif

#endif
