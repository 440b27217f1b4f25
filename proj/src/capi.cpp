#include "canvit.h"

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "canvit/checkpoint.hpp"
#include "canvit/flops.hpp"
#include "canvit/io.hpp"
#include "canvit/rollout.hpp"

struct cv_model {
    canvit::ModelBundle bundle;
};

struct cv_scene {
    canvit::Scene scene;
};

namespace {

thread_local std::string g_error = "ok";

template <typename Fn>
cv_status guarded(cv_status on_runtime, Fn&& fn) {
    try {
        fn();
        g_error = "ok";
        return CV_OK;
    } catch (const std::invalid_argument& e) {
        g_error = e.what();
        return CV_ERR_INVALID_ARGUMENT;
    } catch (const std::out_of_range& e) {
        g_error = e.what();
        return CV_ERR_INVALID_ARGUMENT;
    } catch (const std::exception& e) {
        g_error = e.what();
        return on_runtime;
    } catch (...) {
        g_error = "unknown error";
        return CV_ERR_RUNTIME;
    }
}

cv_status bad_argument(const char* what) {
    g_error = what;
    return CV_ERR_INVALID_ARGUMENT;
}

char* copy_string(const std::string& s) {
    char* out = static_cast<char*>(std::malloc(s.size() + 1));
    if (out) std::memcpy(out, s.c_str(), s.size() + 1);
    return out;
}

canvit::RunConfig read_run_config(const char* config_path) {
    canvit::RunConfig rc;
    if (config_path) canvit::apply_config(canvit::parse_kv_file(config_path), rc);
    rc.model.validate();
    return rc;
}

canvit::StandardizationStats identity_stats(const canvit::ModelConfig& cfg) {
    const std::int64_t n = cfg.canvas_h * cfg.canvas_w, d = cfg.d_teacher;
    canvit::StandardizationStats s;
    s.patch_mean = canvit::Tensor::zeros({n, d});
    s.patch_var = canvit::Tensor::full({n, d}, 1.0);
    s.cls_mean = canvit::Tensor::zeros({1, d});
    s.cls_var = canvit::Tensor::full({1, d}, 1.0);
    return s;
}

std::vector<canvit::Scene> load_scene_dir(const std::string& dir) {
    namespace fs = std::filesystem;
    if (!fs::is_directory(dir)) throw std::runtime_error(dir + ": not a directory");
    std::vector<std::string> paths;
    for (const auto& entry : fs::directory_iterator(dir)) {
        if (!entry.is_regular_file()) continue;
        const std::string ext = entry.path().extension().string();
        if (ext == ".ppm" || ext == ".cvf") paths.push_back(entry.path().string());
    }
    std::sort(paths.begin(), paths.end());
    if (paths.empty()) throw std::runtime_error(dir + ": no .ppm or .cvf scene files");
    std::vector<canvit::Scene> scenes;
    scenes.reserve(paths.size());
    for (const std::string& p : paths) scenes.push_back(canvit::load_scene(p));
    return scenes;
}

std::string gflops(std::int64_t n) {
    std::ostringstream os;
    os.setf(std::ios::fixed);
    os.precision(3);
    os << static_cast<double>(n) / 1e9 << " GFLOPs";
    return os.str();
}

}  // namespace

extern "C" {

const char* cv_last_error(void) { return g_error.c_str(); }

cv_status cv_model_new(const char* config_path, uint64_t seed, cv_model** out) {
    if (!out) return bad_argument("cv_model_new: out is NULL");
    *out = nullptr;
    return guarded(CV_ERR_IO, [&] {
        canvit::RunConfig rc = read_run_config(config_path);
        auto m = std::make_unique<cv_model>();
        m->bundle.params = canvit::make_model(rc.model, seed);
        m->bundle.teacher = canvit::make_teacher(rc.model.canvas_h, rc.model.canvas_w,
                                                 rc.model.d_teacher, rc.teacher_seed);
        m->bundle.stats = identity_stats(rc.model);
        m->bundle.has_teacher = true;
        *out = m.release();
    });
}

cv_status cv_model_load(const char* checkpoint_path, cv_model** out) {
    if (!out) return bad_argument("cv_model_load: out is NULL");
    if (!checkpoint_path) return bad_argument("cv_model_load: path is NULL");
    *out = nullptr;
    return guarded(CV_ERR_IO, [&] {
        auto m = std::make_unique<cv_model>();
        m->bundle = canvit::load_model(checkpoint_path);
        *out = m.release();
    });
}

cv_status cv_model_save(const cv_model* model, const char* checkpoint_path) {
    if (!model) return bad_argument("cv_model_save: model is NULL");
    if (!checkpoint_path) return bad_argument("cv_model_save: path is NULL");
    return guarded(CV_ERR_IO, [&] { canvit::save_model(model->bundle, checkpoint_path); });
}

void cv_model_free(cv_model* model) { delete model; }

int64_t cv_model_n_parameters(const cv_model* model) {
    return model ? model->bundle.params.n_parameters() : 0;
}

cv_status cv_scene_load(const char* path, cv_scene** out) {
    if (!out) return bad_argument("cv_scene_load: out is NULL");
    if (!path) return bad_argument("cv_scene_load: path is NULL");
    *out = nullptr;
    return guarded(CV_ERR_IO, [&] {
        auto s = std::make_unique<cv_scene>();
        s->scene = canvit::load_scene(path);
        *out = s.release();
    });
}

void cv_scene_free(cv_scene* scene) { delete scene; }

cv_status cv_make_scenes(const char* dir, int64_t count, int64_t side, uint64_t seed) {
    if (!dir) return bad_argument("cv_make_scenes: dir is NULL");
    if (count < 1 || side < 2) return bad_argument("cv_make_scenes: need count >= 1, side >= 2");
    return guarded(CV_ERR_IO, [&] {
        std::filesystem::create_directories(dir);
        const std::vector<canvit::Scene> scenes = canvit::generate_scenes(count, side, seed);
        for (std::size_t i = 0; i < scenes.size(); ++i) {
            char name[32];
            std::snprintf(name, sizeof(name), "scene_%04zu.ppm", i);
            canvit::save_scene_ppm(scenes[i], (std::filesystem::path(dir) / name).string());
        }
    });
}

cv_status cv_rollout(const cv_model* model, const cv_scene* scene, const char* policy,
                     int64_t steps, int64_t grid_h, int64_t grid_w, uint64_t seed,
                     const char* trace_csv_path, const char* viz_dir) {
    if (!model) return bad_argument("cv_rollout: model is NULL");
    if (!scene) return bad_argument("cv_rollout: scene is NULL");
    if (!policy) return bad_argument("cv_rollout: policy is NULL");
    return guarded(CV_ERR_IO, [&] {
        canvit::RolloutOptions opt;
        opt.policy = canvit::policy_from_string(policy);
        opt.steps = steps;
        opt.canvas_h = grid_h;
        opt.canvas_w = grid_w;
        opt.seed = seed;
        opt.keep_canvas = viz_dir != nullptr;
        const canvit::ModelConfig& cfg = model->bundle.params.cfg;
        const std::int64_t h = grid_h > 0 ? grid_h : cfg.canvas_h;
        const std::int64_t w = grid_w > 0 ? grid_w : cfg.canvas_w;
        const bool with_losses = model->bundle.has_teacher &&
                                 model->bundle.teacher.grid_h == h &&
                                 model->bundle.teacher.grid_w == w;
        const canvit::RolloutTrace trace = canvit::run_rollout(
            model->bundle.params, scene->scene, opt,
            with_losses ? &model->bundle.teacher : nullptr,
            with_losses ? &model->bundle.stats : nullptr);
        if (trace_csv_path) canvit::write_trace_csv(trace, trace_csv_path);
        if (viz_dir) canvit::write_rollout_viz(trace, viz_dir);
    });
}

cv_status cv_train(const char* config_path, const char* data_dir, const char* out_checkpoint,
                   const char* metrics_csv_path, int progress) {
    if (!config_path) return bad_argument("cv_train: config path is NULL");
    if (!data_dir) return bad_argument("cv_train: data_dir is NULL");
    if (!out_checkpoint) return bad_argument("cv_train: out_checkpoint is NULL");
    return guarded(CV_ERR_IO, [&] {
        const canvit::RunConfig rc = read_run_config(config_path);
        const std::vector<canvit::Scene> scenes = load_scene_dir(data_dir);
        canvit::SyntheticTeacher teacher = canvit::make_teacher(
            rc.model.canvas_h, rc.model.canvas_w, rc.model.d_teacher, rc.teacher_seed);
        canvit::ModelParams params = canvit::make_model(rc.model, rc.train.seed);
        canvit::ProgressFn cb;
        if (progress)
            cb = [](const canvit::StepMetrics& m) {
                std::fprintf(stderr,
                             "step %lld  patch %.6f/%.6f  cls %.6f/%.6f  |g| %.4f  lr %.2e\n",
                             static_cast<long long>(m.step), m.loss_patch_fiid, m.loss_patch_riid,
                             m.loss_cls_fiid, m.loss_cls_riid, m.grad_norm, m.lr);
            };
        const canvit::TrainResult result =
            canvit::micro_pretrain(scenes, params, teacher, rc.train, cb);
        if (metrics_csv_path) {
            std::vector<std::vector<std::string>> rows;
            rows.reserve(result.metrics.size());
            for (const canvit::StepMetrics& m : result.metrics)
                rows.push_back({std::to_string(m.step), canvit::format_double(m.loss_patch_riid),
                                canvit::format_double(m.loss_patch_fiid),
                                canvit::format_double(m.loss_cls_riid),
                                canvit::format_double(m.loss_cls_fiid),
                                canvit::format_double(m.grad_norm),
                                canvit::format_double(m.lr)});
            canvit::write_csv(metrics_csv_path,
                              {"step", "loss_patch_riid", "loss_patch_fiid", "loss_cls_riid",
                               "loss_cls_fiid", "grad_norm", "lr"},
                              rows);
        }
        canvit::ModelBundle bundle;
        bundle.params = std::move(params);
        bundle.has_teacher = true;
        bundle.teacher = std::move(teacher);
        bundle.stats = result.stats;
        canvit::save_model(bundle, out_checkpoint);
        if (progress)
            std::fprintf(stderr, "held-out loss: %.6f -> %.6f\n", result.initial_eval.loss_total,
                         result.final_eval.loss_total);
    });
}

cv_status cv_flops_report(const char* config_path, int64_t grid_h, int64_t grid_w,
                          int with_canvas_qkvo, int64_t steps, char** out_text) {
    if (!out_text) return bad_argument("cv_flops_report: out_text is NULL");
    *out_text = nullptr;
    return guarded(CV_ERR_IO, [&] {
        canvit::ModelConfig cfg = read_run_config(config_path).model;
        cfg.canvas_qkvo = with_canvas_qkvo != 0;
        const std::int64_t h = grid_h > 0 ? grid_h : cfg.canvas_h;
        const std::int64_t w = grid_w > 0 ? grid_w : cfg.canvas_w;
        const std::int64_t t = steps > 0 ? steps : 1;
        const canvit::FlopReport report = canvit::flops_rollout(cfg, h, w, t);

        std::ostringstream os;
        os << canvit::flop_report_csv(report);
        os << "rw_pair," << canvit::flops_rw_pair(cfg, h, w, false) << "\n";
        os << "rw_pair_with_canvas_qkvo," << canvit::flops_rw_pair(cfg, h, w, true) << "\n";
        os << "canvas_projection_to_sdpa_ratio,"
           << canvit::format_double(
                  canvit::ratio_canvas_projection(cfg.d_can, cfg.n_glimpse_tokens()))
           << "\n";
        os << "\n";
        os << "comparison (output grid " << h << "x" << w << ", " << t << " step"
           << (t == 1 ? "" : "s") << "):\n";
        os << "  timestep total           " << gflops(report.per_timestep) << "\n";
        os << "  rollout total            " << gflops(report.per_rollout) << "\n";
        os << "  rw pair, asymmetric      " << gflops(canvit::flops_rw_pair(cfg, h, w, false))
           << "\n";
        os << "  rw pair, canvas qkvo     " << gflops(canvit::flops_rw_pair(cfg, h, w, true))
           << "\n";
        if (h == w) {
            const canvit::PassiveVitDims dims{cfg.d_bb, cfg.depth};
            const std::int64_t input_px = cfg.patch_px * h;
            os << "  passive vit, same grid   "
               << gflops(canvit::flops_passive_vit(dims, input_px, cfg.patch_px)) << "  (input "
               << input_px << "px, width " << cfg.d_bb << ", depth " << cfg.depth << ")\n";
        }
        *out_text = copy_string(os.str());
        if (!*out_text) throw std::runtime_error("out of memory");
    });
}

cv_status cv_policy_sample(const char* policy, int64_t n, uint64_t seed, char** out_csv) {
    if (!out_csv) return bad_argument("cv_policy_sample: out_csv is NULL");
    if (!policy) return bad_argument("cv_policy_sample: policy is NULL");
    if (n < 1) return bad_argument("cv_policy_sample: need n >= 1");
    *out_csv = nullptr;
    return guarded(CV_ERR_RUNTIME, [&] {
        const canvit::PolicyKind kind = canvit::policy_from_string(policy);
        auto p = canvit::make_policy(kind, canvit::Rng(seed), n);
        std::ostringstream os;
        os << "t,x,y,s\n";
        double sx = 0.0, sy = 0.0, ss = 0.0, s_min = 1.0, s_max = 0.0;
        for (int64_t t = 0; t < n; ++t) {
            const canvit::Viewpoint v = p->next();
            os << t << "," << canvit::format_double(v.x) << "," << canvit::format_double(v.y)
               << "," << canvit::format_double(v.s) << "\n";
            sx += v.x;
            sy += v.y;
            ss += v.s;
            s_min = std::min(s_min, v.s);
            s_max = std::max(s_max, v.s);
        }
        const double inv = 1.0 / static_cast<double>(n);
        os << "# policy=" << canvit::policy_to_string(kind) << " n=" << n << " seed=" << seed
           << "\n";
        os << "# mean_x=" << canvit::format_double(sx * inv)
           << " mean_y=" << canvit::format_double(sy * inv) << "\n";
        os << "# s: mean=" << canvit::format_double(ss * inv)
           << " min=" << canvit::format_double(s_min) << " max=" << canvit::format_double(s_max)
           << "\n";
        *out_csv = copy_string(os.str());
        if (!*out_csv) throw std::runtime_error("out of memory");
    });
}

cv_status cv_gradcheck(const char* config_path, uint64_t seed, char** out_report, int* pass) {
    if (!out_report) return bad_argument("cv_gradcheck: out_report is NULL");
    *out_report = nullptr;
    if (pass) *pass = 0;
    return guarded(CV_ERR_RUNTIME, [&] {
        const canvit::ModelConfig cfg =
            config_path ? read_run_config(config_path).model : canvit::ModelConfig::micro_gradcheck();
        const canvit::GradCheckReport r = canvit::model_grad_check(cfg, seed);
        std::ostringstream os;
        os << "parameters checked: " << r.n_checked << "\n";
        os << "max relative error: " << canvit::format_double(r.max_rel_err) << "\n";
        os << "worst parameter:    " << r.worst_param << "\n";
        os << "result:             " << (r.pass ? "pass" : "FAIL") << "\n";
        *out_report = copy_string(os.str());
        if (!*out_report) throw std::runtime_error("out of memory");
        if (pass) *pass = r.pass ? 1 : 0;
    });
}

cv_status cv_bench(const char* config_path, int64_t grid_h, int64_t grid_w, int64_t iters,
                   double* out_min_ms, double* out_median_ms) {
    return guarded(CV_ERR_RUNTIME, [&] {
        const canvit::ModelConfig cfg = read_run_config(config_path).model;
        const std::int64_t h = grid_h > 0 ? grid_h : cfg.canvas_h;
        const std::int64_t w = grid_w > 0 ? grid_w : cfg.canvas_w;
        const canvit::BenchResult r = canvit::bench_timestep(cfg, h, w, iters);
        if (out_min_ms) *out_min_ms = r.min_ms;
        if (out_median_ms) *out_median_ms = r.median_ms;
    });
}

void cv_string_free(char* s) { std::free(s); }

}  // extern "C"
