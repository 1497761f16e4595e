#ifndef CVTRACE_CVTRACE_H
#define CVTRACE_CVTRACE_H

/* C interface to the cvtrace library.
 *
 * Every fallible call returns a status code; CVT_OK is zero. On failure the
 * message for the calling thread is available from cvt_last_error() until the
 * next failing call on that thread. Strings returned through char** outputs
 * are owned by the caller and must be released with cvt_string_free(). */

#include <stddef.h>
#include <stdint.h>

#if defined(CVTRACE_BUILDING_LIBRARY)
#define CVT_API __attribute__((visibility("default")))
#else
#define CVT_API
#endif

#ifdef __cplusplus
extern "C" {
#endif

enum cvt_status {
  CVT_OK = 0,
  CVT_ERR_INPUT = 1,
  CVT_ERR_FORMAT = 2,
  CVT_ERR_SHAPE = 3,
  CVT_ERR_MISSING_TENSOR = 4,
  CVT_ERR_INDEX = 5,
  CVT_ERR_IO = 6,
  CVT_ERR_VALIDATION = 7,
  CVT_ERR_TRAINING_DIVERGED = 8,
  CVT_ERR_SCORER_UNAVAILABLE = 9,
  CVT_ERR_SCORER_FORMAT = 10,
  CVT_ERR_DEGENERATE_VECTOR = 11,
  CVT_ERR_INTERNAL = 12
};

typedef struct cvt_model cvt_model;

typedef struct cvt_dims {
  size_t num_layers;
  size_t model_dim;
  size_t mlp_dim;
  size_t vocab_size;
  int gated;
  int has_keys;
} cvt_dims;

CVT_API char const* cvt_last_error(void);
CVT_API char const* cvt_status_name(int status);
CVT_API void cvt_string_free(char* s);

/* Models. manifest_path may be NULL for files written by cvt_model_save. */
CVT_API int cvt_model_load(char const* path, char const* manifest_path, cvt_model** out);
CVT_API int cvt_model_save(cvt_model const* model, char const* path);
CVT_API void cvt_model_free(cvt_model* model);
CVT_API int cvt_model_dims(cvt_model const* model, cvt_dims* out);
CVT_API int cvt_model_value_column(cvt_model const* model, size_t layer, size_t j, double* out, size_t len);

/* Random toy model from a flat key-value config (num_layers, model_dim,
 * mlp_dim, vocab_size, nonlinearity, gated, seed). */
CVT_API int cvt_model_make_toy(char const* config_text, cvt_model** out);

/* Planted-concept fixture: writes model.nt (+ vocab), tests.json,
 * lexicons.json, corpus.txt and fixture.json into out_dir. */
CVT_API int cvt_fixture_build(char const* config_text, char const* out_dir, char** summary_json);

/* Projection. */
CVT_API int cvt_project_json(cvt_model const* model, size_t layer, size_t j, size_t k, char** out_json);
CVT_API int cvt_scan_csv(cvt_model const* model, size_t lo, size_t hi, double exclude_fraction, size_t top,
                         char** out_csv);

/* Localization. With lexicon_path NULL the external scorer configured by
 * SCORER_URL / SCORER_TOKEN is used. */
CVT_API int cvt_score_json(cvt_model const* model, size_t layer, size_t j, size_t k, char const* lexicon_path,
                           char** out_json);
CVT_API int cvt_localize_keywords_json(cvt_model const* model, char const* keywords, size_t lo, size_t hi,
                                       double exclude_fraction, char** out_json);
CVT_API int cvt_validate_json(cvt_model const* model, char const* record_path, char const* const* unrelated_paths,
                              size_t num_unrelated, double sigma, int relative, uint64_t seed, double threshold,
                              size_t max_new, char** out_json);

/* Unlearning. method is "ga" or "gd"; retain_path is required for "gd".
 * config_text holds lr, steps, seed, kl_weight, value_mats_only, grad_clip
 * and batch_size; NULL selects defaults. log_csv may be NULL. */
CVT_API int cvt_needle(cvt_model const* model, size_t layer, size_t j, double sigma, int relative, uint64_t seed,
                       cvt_model** out);
CVT_API int cvt_unlearn(cvt_model const* model, char const* method, char const* forget_path, char const* retain_path,
                        char const* config_text, cvt_model** out, char** log_csv);

/* Metrics. targets_csv has a header and rows concept,layer,j. */
CVT_API int cvt_intrinsic_csv(cvt_model const* before, cvt_model const* after, char const* targets_csv, size_t k,
                              char** out_csv);
/* Answers from both models to the questions and completion queries of the
 * concept test sets in tests_path. */
CVT_API int cvt_behavioral_csv(cvt_model const* before, cvt_model const* after, char const* tests_path,
                               size_t max_new, char** out_csv);
CVT_API int cvt_activations_json(cvt_model const* model, char const* prompts_text, size_t layer, size_t i,
                                 char const* prefix, char** out_json);

/* Pipeline. overrides is key-value text applied on top of the config file
 * (may be NULL). review may be NULL; otherwise it is called once per selected
 * vector with a JSON description and keeps the vector when it returns
 * non-zero. out_dir may be NULL to use the config's "out" key. */
typedef int (*cvt_review_fn)(void* ctx, char const* candidate_json);
CVT_API int cvt_pipeline_run(char const* config_path, char const* overrides, char const* out_dir,
                             cvt_review_fn review, void* review_ctx, char** summary_json);

#ifdef __cplusplus
}
#endif

#endif
