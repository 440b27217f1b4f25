#ifndef CANVIT_H
#define CANVIT_H

#include <stdint.h>

#ifdef _WIN32
#define CANVIT_API __declspec(dllexport)
#else
#define CANVIT_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum cv_status {
    CV_OK = 0,
    CV_ERR_INVALID_ARGUMENT = 1,
    CV_ERR_IO = 2,
    CV_ERR_RUNTIME = 3
} cv_status;

/* Message for the calling thread's most recent failure; valid until the
 * thread's next canvit call. Never NULL. */
CANVIT_API const char* cv_last_error(void);

typedef struct cv_model cv_model;
typedef struct cv_scene cv_scene;

/* Fresh model from a key=value config file (NULL path = built-in defaults);
 * seed drives parameter initialization. The frozen teacher head is attached
 * immediately so the model can be trained or report losses. */
CANVIT_API cv_status cv_model_new(const char* config_path, uint64_t seed, cv_model** out);
CANVIT_API cv_status cv_model_load(const char* checkpoint_path, cv_model** out);
CANVIT_API cv_status cv_model_save(const cv_model* model, const char* checkpoint_path);
CANVIT_API void cv_model_free(cv_model* model);
CANVIT_API int64_t cv_model_n_parameters(const cv_model* model);

CANVIT_API cv_status cv_scene_load(const char* path, cv_scene** out);
CANVIT_API void cv_scene_free(cv_scene* scene);

/* Writes `count` procedural scenes into dir as scene_NNNN.ppm. */
CANVIT_API cv_status cv_make_scenes(const char* dir, int64_t count, int64_t side, uint64_t seed);

/* One rollout of `steps` glimpses under the named policy. grid_h/grid_w of 0
 * use the model's training grid. Writes the trace CSV (columns
 * t,x,y,s,loss_patch,loss_cls; losses are NaN when the model carries no
 * teacher stats for this grid) and, when viz_dir is non-NULL, per-step
 * canvas renderings and change heatmaps. */
CANVIT_API cv_status cv_rollout(const cv_model* model, const cv_scene* scene, const char* policy,
                                int64_t steps, int64_t grid_h, int64_t grid_w, uint64_t seed,
                                const char* trace_csv_path, const char* viz_dir);

/* Micro-distillation run driven by a config file. Loads every scene file in
 * data_dir (sorted by name), trains, writes the checkpoint and, when
 * metrics_csv_path is non-NULL, the per-step metrics CSV. progress != 0
 * prints per-step lines to stderr. */
CANVIT_API cv_status cv_train(const char* config_path, const char* data_dir,
                              const char* out_checkpoint, const char* metrics_csv_path,
                              int progress);

/* Analytic cost model: CSV breakdown for one timestep plus summary rows and
 * a comparison table (asymmetric vs symmetric interaction cost, passive ViT
 * at the same output grid). steps scales the rollout total. The returned
 * string is freed with cv_string_free. */
CANVIT_API cv_status cv_flops_report(const char* config_path, int64_t grid_h, int64_t grid_w,
                                     int with_canvas_qkvo, int64_t steps, char** out_text);

/* CSV of n sampled viewpoints (t,x,y,s) followed by summary comment lines. */
CANVIT_API cv_status cv_policy_sample(const char* policy, int64_t n, uint64_t seed,
                                      char** out_csv);

/* Finite-difference check of every trainable parameter of the config's
 * model (use a small config). *pass is 1/0; the report text is freed with
 * cv_string_free. */
CANVIT_API cv_status cv_gradcheck(const char* config_path, uint64_t seed, char** out_report,
                                  int* pass);

/* Wall-clock per-step forward latency over `iters` measured steps. */
CANVIT_API cv_status cv_bench(const char* config_path, int64_t grid_h, int64_t grid_w,
                              int64_t iters, double* out_min_ms, double* out_median_ms);

CANVIT_API void cv_string_free(char* s);

#ifdef __cplusplus
}
#endif

#endif /* CANVIT_H */
