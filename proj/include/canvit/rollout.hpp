#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "canvit/distill.hpp"
#include "canvit/io.hpp"
#include "canvit/model.hpp"
#include "canvit/policies.hpp"

namespace canvit {

struct RolloutOptions {
    PolicyKind policy = PolicyKind::RIID;
    std::int64_t steps = 4;
    std::int64_t canvas_h = 0, canvas_w = 0;  // 0 = the model's training grid
    std::uint64_t seed = 1;
    bool keep_decoded = false;
    bool keep_canvas = false;        // snapshot the canvas after every step
    std::uint64_t probe_seed = 42;   // entropy probe driving the guided policy
    std::int64_t probe_classes = 8;
};

struct RolloutStep {
    Viewpoint v;
    double loss_patch = 0.0, loss_cls = 0.0;  // NaN when no teacher was given
    Tensor z_patches, z_cls;  // defined when keep_decoded
    Tensor canvas;            // defined when keep_canvas; [h*w, d_can]
};

struct RolloutTrace {
    std::int64_t h = 0, w = 0;
    bool has_loss = false;
    Tensor initial_canvas;  // defined when keep_canvas
    std::vector<RolloutStep> steps;
};

// Runs the model over `steps` glimpses chosen by the policy; no gradients.
// With a teacher and stats, per-step losses against the standardized targets
// are recorded (the teacher grid must match the rollout grid). The
// entropy-guided policy is fed a per-cell entropy map of the decoded canvas
// after every step, from a frozen random probe.
RolloutTrace run_rollout(const ModelParams& params, const Scene& scene, const RolloutOptions& opt,
                         const SyntheticTeacher* teacher = nullptr,
                         const StandardizationStats* stats = nullptr);

// Columns: t,x,y,s,loss_patch,loss_cls.
void write_trace_csv(const RolloutTrace& trace, const std::string& path);

// Per-step PCA canvas images (canvas_NNNN.ppm) and change heatmaps between
// consecutive canvases (delta_NNNN.ppm; cosine dissimilarity of the
// layer-normalized cell tokens, min-max scaled). Needs keep_canvas traces.
void write_rollout_viz(const RolloutTrace& trace, const std::string& dir);

// Finite-difference verification of every trainable parameter of a (small)
// model: deterministic two-glimpse rollout on a procedural scene, loss
// against the frozen teacher head, central differences vs the tape gradient.
GradCheckReport model_grad_check(const ModelConfig& cfg, std::uint64_t seed, double tol = 1e-4);

struct BenchResult {
    std::int64_t iters = 0;
    double min_ms = 0.0;
    double median_ms = 0.0;
    double mean_ms = 0.0;
};

// Wall-clock per-step latency of the real forward pass (after `warmup`
// unmeasured steps). Diagnostic only.
BenchResult bench_timestep(const ModelConfig& cfg, std::int64_t h, std::int64_t w,
                           std::int64_t iters, std::int64_t warmup = 2);

}  // namespace canvit
