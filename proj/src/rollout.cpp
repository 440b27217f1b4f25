#include "canvit/rollout.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <limits>
#include <stdexcept>

namespace canvit {

RolloutTrace run_rollout(const ModelParams& params, const Scene& scene, const RolloutOptions& opt,
                         const SyntheticTeacher* teacher, const StandardizationStats* stats) {
    if (opt.steps < 1) throw std::invalid_argument("run_rollout: need at least one step");
    const ModelConfig& cfg = params.cfg;
    const std::int64_t h = opt.canvas_h > 0 ? opt.canvas_h : cfg.canvas_h;
    const std::int64_t w = opt.canvas_w > 0 ? opt.canvas_w : cfg.canvas_w;

    TeacherTargets target;
    if (teacher) {
        if (!stats) throw std::invalid_argument("run_rollout: teacher given without stats");
        if (teacher->grid_h != h || teacher->grid_w != w || teacher->d_out != cfg.d_teacher)
            throw std::invalid_argument("run_rollout: teacher grid does not match the rollout");
        target = standardize(teacher->targets(scene), *stats);
    }

    auto policy = make_policy(opt.policy, Rng(opt.seed), opt.steps);
    EntropyProbe probe;
    if (policy->wants_entropy())
        probe = make_probe(cfg.d_teacher, opt.probe_classes, opt.probe_seed);

    const RopeTable rope_can = canvas_rope_table(cfg, h, w);
    const Tensor scene_t = scene_tensor(scene);
    ModelState state = init_state(params, h, w);

    RolloutTrace trace;
    trace.h = h;
    trace.w = w;
    trace.has_loss = teacher != nullptr;
    if (opt.keep_canvas) trace.initial_canvas = detach(state.canvas_patches);

    for (std::int64_t t = 0; t < opt.steps; ++t) {
        RolloutStep step;
        step.v = policy->next();
        Tensor glimpse = extract_glimpse(scene_t, step.v, cfg.glimpse_px);
        StepResult res = model_step(params, state, glimpse, step.v, rope_can);
        state = res.state;
        if (teacher) {
            const auto [lp, lc] = loss_terms(res.z_patches, res.z_cls, target);
            step.loss_patch = lp;
            step.loss_cls = lc;
        } else {
            step.loss_patch = std::numeric_limits<double>::quiet_NaN();
            step.loss_cls = std::numeric_limits<double>::quiet_NaN();
        }
        if (policy->wants_entropy())
            policy->observe(entropy_map(probe, res.z_patches), h, w);
        if (opt.keep_decoded) {
            step.z_patches = res.z_patches;
            step.z_cls = res.z_cls;
        }
        if (opt.keep_canvas) step.canvas = detach(state.canvas_patches);
        trace.steps.push_back(std::move(step));
    }
    return trace;
}

void write_trace_csv(const RolloutTrace& trace, const std::string& path) {
    std::vector<std::vector<std::string>> rows;
    rows.reserve(trace.steps.size());
    for (std::size_t t = 0; t < trace.steps.size(); ++t) {
        const RolloutStep& s = trace.steps[t];
        rows.push_back({std::to_string(t), format_double(s.v.x), format_double(s.v.y),
                        format_double(s.v.s), format_double(s.loss_patch),
                        format_double(s.loss_cls)});
    }
    write_csv(path, {"t", "x", "y", "s", "loss_patch", "loss_cls"}, rows);
}

namespace {

std::vector<double> normalized_tokens(const Tensor& tokens) {
    const std::int64_t n = tokens.dim(0), d = tokens.dim(1);
    std::vector<double> out(static_cast<std::size_t>(n * d));
    for (std::int64_t i = 0; i < n; ++i) {
        const double* row = tokens.value().data() + i * d;
        double mean = 0.0;
        for (std::int64_t j = 0; j < d; ++j) mean += row[j];
        mean /= static_cast<double>(d);
        double var = 0.0;
        for (std::int64_t j = 0; j < d; ++j) var += (row[j] - mean) * (row[j] - mean);
        var /= static_cast<double>(d);
        const double inv = 1.0 / std::sqrt(var + 1e-6);
        for (std::int64_t j = 0; j < d; ++j)
            out[static_cast<std::size_t>(i * d + j)] = (row[j] - mean) * inv;
    }
    return out;
}

ImageU8 change_heatmap(const Tensor& prev, const Tensor& cur, std::int64_t h, std::int64_t w) {
    const std::int64_t n = cur.dim(0), d = cur.dim(1);
    const std::vector<double> a = normalized_tokens(prev);
    const std::vector<double> b = normalized_tokens(cur);
    std::vector<double> dis(static_cast<std::size_t>(n), 0.0);
    for (std::int64_t i = 0; i < n; ++i) {
        double dot = 0.0, na = 0.0, nb = 0.0;
        for (std::int64_t j = 0; j < d; ++j) {
            const double x = a[static_cast<std::size_t>(i * d + j)];
            const double y = b[static_cast<std::size_t>(i * d + j)];
            dot += x * y;
            na += x * x;
            nb += y * y;
        }
        const double denom = std::sqrt(na * nb);
        dis[static_cast<std::size_t>(i)] = denom > 0.0 ? 1.0 - dot / denom : 0.0;
    }
    double lo = dis[0], hi = dis[0];
    for (double v : dis) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    const double span = hi - lo;
    ImageU8 img;
    img.h = h;
    img.w = w;
    img.rgb.assign(static_cast<std::size_t>(h * w * 3), 0);
    for (std::int64_t i = 0; i < n; ++i) {
        const double g = span > 0.0 ? (dis[static_cast<std::size_t>(i)] - lo) / span : 0.0;
        const auto byte = static_cast<std::uint8_t>(std::lround(g * 255.0));
        img.rgb[static_cast<std::size_t>(i * 3 + 0)] = byte;
        img.rgb[static_cast<std::size_t>(i * 3 + 1)] = byte;
        img.rgb[static_cast<std::size_t>(i * 3 + 2)] = byte;
    }
    return img;
}

std::string frame_name(const char* prefix, std::size_t t) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%s_%04zu.ppm", prefix, t);
    return buf;
}

}  // namespace

void write_rollout_viz(const RolloutTrace& trace, const std::string& dir) {
    for (const RolloutStep& s : trace.steps)
        if (!s.canvas.defined())
            throw std::invalid_argument("write_rollout_viz: trace has no canvas snapshots");
    std::filesystem::create_directories(dir);
    const std::filesystem::path base(dir);
    Tensor prev = trace.initial_canvas;
    for (std::size_t t = 0; t < trace.steps.size(); ++t) {
        const Tensor& canvas = trace.steps[t].canvas;
        save_ppm(pca_visualize(canvas, trace.h, trace.w), (base / frame_name("canvas", t)).string());
        save_ppm(change_heatmap(prev, canvas, trace.h, trace.w),
                 (base / frame_name("delta", t)).string());
        prev = canvas;
    }
}

GradCheckReport model_grad_check(const ModelConfig& cfg, std::uint64_t seed, double tol) {
    cfg.validate();
    ModelParams params = make_model(cfg, seed);
    const SyntheticTeacher teacher =
        make_teacher(cfg.canvas_h, cfg.canvas_w, cfg.d_teacher, seed + 1);
    const Scene scene = generate_scenes(1, 2 * cfg.glimpse_px, seed + 2).front();
    const TeacherTargets target = teacher.targets(scene);
    const Tensor scene_t = scene_tensor(scene);
    const RopeTable rope_can = canvas_rope_table(cfg, cfg.canvas_h, cfg.canvas_w);
    const std::vector<Viewpoint> views = {{0.0, 0.0, 1.0}, {0.25, -0.25, 0.5}};

    auto loss_fn = [&]() {
        ModelState state = init_state(params, cfg.canvas_h, cfg.canvas_w);
        std::vector<Tensor> zp, zc;
        for (const Viewpoint& v : views) {
            StepResult res =
                model_step(params, state, extract_glimpse(scene_t, v, cfg.glimpse_px), v, rope_can);
            state = res.state;
            zp.push_back(res.z_patches);
            zc.push_back(res.z_cls);
        }
        return reconstruction_loss(zp, zc, target);
    };
    return grad_check(loss_fn, params.trainable(), tol);
}

BenchResult bench_timestep(const ModelConfig& cfg, std::int64_t h, std::int64_t w,
                           std::int64_t iters, std::int64_t warmup) {
    if (iters < 1) throw std::invalid_argument("bench_timestep: need at least one iteration");
    ModelParams params = make_model(cfg, 0);
    const RopeTable rope_can = canvas_rope_table(cfg, h, w);
    ModelState state = init_state(params, h, w);
    Rng rng(7);
    std::vector<double> pix(static_cast<std::size_t>(cfg.glimpse_px * cfg.glimpse_px * 3));
    for (double& v : pix) v = rng.uniform();
    const Tensor glimpse = Tensor::from_data({cfg.glimpse_px, cfg.glimpse_px, 3}, std::move(pix));

    std::vector<double> ms;
    ms.reserve(static_cast<std::size_t>(iters));
    for (std::int64_t i = 0; i < warmup + iters; ++i) {
        const auto t0 = std::chrono::steady_clock::now();
        StepResult res = model_step(params, state, glimpse, Viewpoint{0.0, 0.0, 1.0}, rope_can);
        const auto t1 = std::chrono::steady_clock::now();
        state = detach_state(res.state);
        if (i >= warmup)
            ms.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
    }
    std::sort(ms.begin(), ms.end());
    BenchResult r;
    r.iters = iters;
    r.min_ms = ms.front();
    r.median_ms = ms[ms.size() / 2];
    double sum = 0.0;
    for (double v : ms) sum += v;
    r.mean_ms = sum / static_cast<double>(ms.size());
    return r;
}

}  // namespace canvit
