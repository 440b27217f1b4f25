#include <cinttypes>
#include <cstdint>
#include <cstdio>
#include <string>

#include "CLI11.hpp"
#include "canvit.h"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitRuntime = 2;

int fail(cv_status st) {
    std::fprintf(stderr, "error: %s\n", cv_last_error());
    return st == CV_ERR_INVALID_ARGUMENT ? kExitUsage : kExitRuntime;
}

bool parse_grid(const std::string& grid, int64_t& h, int64_t& w) {
    if (grid.empty()) {
        h = 0;
        w = 0;
        return true;
    }
    long long gh = 0, gw = 0;
    char tail = 0;
    if (std::sscanf(grid.c_str(), "%lldx%lld%c", &gh, &gw, &tail) != 2 || gh < 1 || gw < 1)
        return false;
    h = gh;
    w = gw;
    return true;
}

struct ScopedModel {
    cv_model* m = nullptr;
    ~ScopedModel() { cv_model_free(m); }
};

struct ScopedScene {
    cv_scene* s = nullptr;
    ~ScopedScene() { cv_scene_free(s); }
};

struct ScopedString {
    char* s = nullptr;
    ~ScopedString() { cv_string_free(s); }
};

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"canvit: recurrent glimpse/canvas vision model"};
    app.require_subcommand(1);

    // rollout
    std::string ro_scene, ro_policy = "r-iid", ro_grid, ro_checkpoint, ro_viz, ro_trace =
        "trace.csv";
    int64_t ro_steps = 4;
    uint64_t ro_seed = 1;
    auto* rollout = app.add_subcommand("rollout", "run one glimpse rollout, write trace CSV");
    rollout->add_option("--scene", ro_scene, "scene image (.ppm or .cvf)")->required();
    rollout->add_option("--policy", ro_policy,
                        "viewpoint policy: r-iid, f-iid, c2f, f2c, eg-c2f, rfs");
    rollout->add_option("--steps", ro_steps, "rollout length")->check(CLI::PositiveNumber);
    rollout->add_option("--grid", ro_grid, "canvas grid HxW (default: training grid)");
    rollout->add_option("--checkpoint", ro_checkpoint, "model checkpoint")->required();
    rollout->add_option("--viz-dir", ro_viz, "write per-step canvas PPMs + change heatmaps here");
    rollout->add_option("--trace", ro_trace, "trace CSV output path");
    rollout->add_option("--seed", ro_seed, "policy seed");

    // train
    std::string tr_config, tr_data, tr_out, tr_metrics = "metrics.csv";
    bool tr_quiet = false;
    auto* train = app.add_subcommand("train", "micro-distillation training run");
    train->add_option("--config", tr_config, "key=value run config")->required();
    train->add_option("--data", tr_data, "directory of scene files")->required();
    train->add_option("--out", tr_out, "output checkpoint")->required();
    train->add_option("--metrics", tr_metrics, "metrics CSV output path");
    train->add_flag("--quiet", tr_quiet, "suppress per-step progress lines");

    // flops
    std::string fl_config, fl_grid;
    bool fl_qkvo = false;
    int64_t fl_steps = 1;
    auto* flops = app.add_subcommand("flops", "analytic FLOP breakdown and comparison table");
    flops->add_option("--config", fl_config, "key=value run config (default: built-in)");
    flops->add_option("--grid", fl_grid, "canvas grid HxW (default: config grid)");
    flops->add_flag("--with-canvas-qkvo", fl_qkvo, "count the symmetric canvas-side projections");
    flops->add_option("--steps", fl_steps, "rollout length for the totals")
        ->check(CLI::PositiveNumber);

    // policy-sample
    std::string ps_policy;
    int64_t ps_n = 16;
    uint64_t ps_seed = 1;
    auto* psample = app.add_subcommand("policy-sample", "sample viewpoints from a policy");
    psample->add_option("--policy", ps_policy, "policy name")->required();
    psample->add_option("--n", ps_n, "number of viewpoints")->check(CLI::PositiveNumber);
    psample->add_option("--seed", ps_seed, "sampler seed");

    // gradcheck
    std::string gc_config;
    uint64_t gc_seed = 1;
    auto* gradcheck =
        app.add_subcommand("gradcheck", "finite-difference check of the full model");
    gradcheck->add_option("--config", gc_config, "key=value run config (default: micro model)");
    gradcheck->add_option("--seed", gc_seed, "initialization seed");

    // bench
    std::string be_config, be_grid;
    int64_t be_iters = 10;
    auto* bench = app.add_subcommand("bench", "per-step forward latency");
    bench->add_option("--config", be_config, "key=value run config (default: built-in)");
    bench->add_option("--grid", be_grid, "canvas grid HxW (default: config grid)");
    bench->add_option("--iters", be_iters, "measured iterations")->check(CLI::PositiveNumber);

    // make-scenes
    std::string ms_dir;
    int64_t ms_count = 256, ms_side = 64;
    uint64_t ms_seed = 1;
    auto* mkscenes = app.add_subcommand("make-scenes", "generate a procedural scene dataset");
    mkscenes->add_option("--dir", ms_dir, "output directory")->required();
    mkscenes->add_option("--count", ms_count, "number of scenes")->check(CLI::PositiveNumber);
    mkscenes->add_option("--side", ms_side, "scene side in pixels")->check(CLI::PositiveNumber);
    mkscenes->add_option("--seed", ms_seed, "generator seed");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);  // prints help, exits 0
    } catch (const CLI::ParseError& e) {
        std::fprintf(stderr, "%s\n", e.what());
        std::fprintf(stderr, "run with --help for usage\n");
        return kExitUsage;
    }

    if (rollout->parsed()) {
        int64_t h = 0, w = 0;
        if (!parse_grid(ro_grid, h, w)) {
            std::fprintf(stderr, "error: --grid expects HxW, got '%s'\n", ro_grid.c_str());
            return kExitUsage;
        }
        ScopedModel model;
        cv_status st = cv_model_load(ro_checkpoint.c_str(), &model.m);
        if (st != CV_OK) return fail(st);
        ScopedScene scene;
        st = cv_scene_load(ro_scene.c_str(), &scene.s);
        if (st != CV_OK) return fail(st);
        st = cv_rollout(model.m, scene.s, ro_policy.c_str(), ro_steps, h, w, ro_seed,
                        ro_trace.c_str(), ro_viz.empty() ? nullptr : ro_viz.c_str());
        if (st != CV_OK) return fail(st);
        std::printf("trace written to %s\n", ro_trace.c_str());
        if (!ro_viz.empty()) std::printf("visualization written to %s\n", ro_viz.c_str());
        return kExitOk;
    }

    if (train->parsed()) {
        const cv_status st = cv_train(tr_config.c_str(), tr_data.c_str(), tr_out.c_str(),
                                      tr_metrics.c_str(), tr_quiet ? 0 : 1);
        if (st != CV_OK) return fail(st);
        std::printf("checkpoint written to %s\nmetrics written to %s\n", tr_out.c_str(),
                    tr_metrics.c_str());
        return kExitOk;
    }

    if (flops->parsed()) {
        int64_t h = 0, w = 0;
        if (!parse_grid(fl_grid, h, w)) {
            std::fprintf(stderr, "error: --grid expects HxW, got '%s'\n", fl_grid.c_str());
            return kExitUsage;
        }
        ScopedString text;
        const cv_status st = cv_flops_report(fl_config.empty() ? nullptr : fl_config.c_str(), h,
                                             w, fl_qkvo ? 1 : 0, fl_steps, &text.s);
        if (st != CV_OK) return fail(st);
        std::fputs(text.s, stdout);
        return kExitOk;
    }

    if (psample->parsed()) {
        ScopedString csv;
        const cv_status st = cv_policy_sample(ps_policy.c_str(), ps_n, ps_seed, &csv.s);
        if (st != CV_OK) return fail(st);
        std::fputs(csv.s, stdout);
        return kExitOk;
    }

    if (gradcheck->parsed()) {
        ScopedString report;
        int pass = 0;
        const cv_status st = cv_gradcheck(gc_config.empty() ? nullptr : gc_config.c_str(),
                                          gc_seed, &report.s, &pass);
        if (st != CV_OK) return fail(st);
        std::fputs(report.s, stdout);
        return pass ? kExitOk : kExitRuntime;
    }

    if (bench->parsed()) {
        int64_t h = 0, w = 0;
        if (!parse_grid(be_grid, h, w)) {
            std::fprintf(stderr, "error: --grid expects HxW, got '%s'\n", be_grid.c_str());
            return kExitUsage;
        }
        double min_ms = 0.0, median_ms = 0.0;
        const cv_status st = cv_bench(be_config.empty() ? nullptr : be_config.c_str(), h, w,
                                      be_iters, &min_ms, &median_ms);
        if (st != CV_OK) return fail(st);
        std::printf("per-step forward latency over %" PRId64 " iters: min %.3f ms, median %.3f ms\n",
                    be_iters, min_ms, median_ms);
        return kExitOk;
    }

    if (mkscenes->parsed()) {
        const cv_status st = cv_make_scenes(ms_dir.c_str(), ms_count, ms_side, ms_seed);
        if (st != CV_OK) return fail(st);
        std::printf("%" PRId64 " scenes written to %s\n", ms_count, ms_dir.c_str());
        return kExitOk;
    }

    return kExitUsage;
}
