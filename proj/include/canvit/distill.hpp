#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "canvit/io.hpp"
#include "canvit/model.hpp"
#include "canvit/policies.hpp"
#include "canvit/tensor.hpp"

namespace canvit {

struct TeacherTargets {
    std::int64_t h = 0, w = 0, d = 0;
    Tensor z_patches;  // [h*w, d]
    Tensor z_cls;      // [1, d]
};

// Stand-in for a frozen pretrained encoder: per grid cell, local pixel
// statistics (mean color, gradient energy, absolute cell-center coordinates)
// pushed through a small frozen random network. Deterministic in (seed,
// scene); features respect locality, so spatial reconstruction is learnable.
struct SyntheticTeacher {
    std::int64_t grid_h = 0, grid_w = 0, d_out = 0;
    std::int64_t hidden = 16;
    std::uint64_t seed = 0;
    std::vector<double> w1, b1, w2, b2;  // stats -> hidden -> d_out

    TeacherTargets targets(const Scene& scene) const;
};

SyntheticTeacher make_teacher(std::int64_t grid_h, std::int64_t grid_w, std::int64_t d_out,
                              std::uint64_t seed);

struct StandardizationStats {
    Tensor patch_mean, patch_var;  // [h*w, d]
    Tensor cls_mean, cls_var;      // [1, d]
};

StandardizationStats compute_stats(const SyntheticTeacher& teacher,
                                   const std::vector<Scene>& scenes);
TeacherTargets standardize(const TeacherTargets& t, const StandardizationStats& s);
TeacherTargets destandardize(const TeacherTargets& t, const StandardizationStats& s);

// Mean over time of the per-step reconstruction error: squared Frobenius
// distance of the dense grid averaged over positions, plus the squared
// distance of the global feature.
Tensor reconstruction_loss(const std::vector<Tensor>& z_patches_per_t,
                           const std::vector<Tensor>& z_cls_per_t, const TeacherTargets& target);

// Per-step patch and global terms for one decoded step (plain doubles, for
// traces and metrics).
std::pair<double, double> loss_terms(const Tensor& z_patches, const Tensor& z_cls,
                                     const TeacherTargets& target);

struct TrainConfig {
    std::int64_t k = 2;       // glimpses per truncation chunk
    double p_stop = 0.5;      // chunk-count stop probability
    std::int64_t batch = 4;
    std::int64_t steps = 200;
    double lr = 3e-3;
    double warmup_frac = 0.01;  // linear warmup, then constant
    double weight_decay = 1e-4;
    double clip_norm = 1.0;
    double beta1 = 0.9, beta2 = 0.999;
    std::uint64_t seed = 1;
    std::int64_t holdout = 32;  // scenes reserved for evaluation
    std::int64_t eval_t = 4;    // rollout length for held-out evaluation
    bool no_fiid = false;       // replace the anchored rollout with a second random one
    bool second_riid = false;
    bool no_dense_loss = false;  // train on the global term only

    void validate() const;
};

class AdamW {
public:
    AdamW(double lr, double beta1, double beta2, double weight_decay, double eps = 1e-8);
    // params: trainable leaves with accumulated gradients; lr_now overrides
    // the stored rate (warmup schedule)
    void step(const std::vector<std::pair<std::string, Tensor>>& params, double lr_now);

private:
    double lr_, b1_, b2_, wd_, eps_;
    std::int64_t t_ = 0;
    std::vector<std::vector<double>> m_, v_;
};

struct StepMetrics {
    std::int64_t step = 0;
    double loss_patch_riid = 0.0, loss_patch_fiid = 0.0;
    double loss_cls_riid = 0.0, loss_cls_fiid = 0.0;
    double grad_norm = 0.0;
    double lr = 0.0;
};

// Clip the accumulated gradient of all trainable parameters to a global
// L2 norm; returns the pre-clip norm.
double clip_grad_norm(const std::vector<std::pair<std::string, Tensor>>& params, double max_norm);

// One optimizer step over a batch of scenes: per scene, two rollouts with
// independently sampled lengths, processed in K-glimpse chunks with state
// carried across chunks but gradients cut at the boundaries.
StepMetrics train_step(const std::vector<const Scene*>& batch, ModelParams& params,
                       const SyntheticTeacher& teacher, const StandardizationStats& stats,
                       const TrainConfig& cfg, AdamW& opt, Rng& rng, std::int64_t step_index);

// Deterministic held-out loss: per scene, one anchored and one random
// rollout of fixed length with per-scene seeds; returns mean total loss and
// the dense-term mean separately.
struct EvalResult {
    double loss_total = 0.0;
    double loss_patch = 0.0;
    double loss_cls = 0.0;
};
EvalResult evaluate(const ModelParams& params, const SyntheticTeacher& teacher,
                    const StandardizationStats& stats, const std::vector<Scene>& scenes,
                    std::int64_t t, std::uint64_t seed);

struct TrainResult {
    std::vector<StepMetrics> metrics;
    EvalResult initial_eval;
    EvalResult final_eval;
    StandardizationStats stats;  // computed on the training split
};

using ProgressFn = std::function<void(const StepMetrics&)>;

// Full micro-distillation run: splits off a hold-out set (the first
// cfg.holdout scenes), computes teacher standardization stats on the
// training split, trains, evaluates before and after. Aborts on NaN loss or
// sustained divergence (>10x initial loss for 100 consecutive steps).
TrainResult micro_pretrain(const std::vector<Scene>& dataset, ModelParams& params,
                           const SyntheticTeacher& teacher, const TrainConfig& cfg,
                           const ProgressFn& progress = nullptr);

// Shannon entropy (nats) of a linear class probe over decoded patch
// features; drives the entropy-guided policy.
struct EntropyProbe {
    std::int64_t d_in = 0, n_classes = 0;
    std::vector<double> w;  // [d_in, n_classes]
};
EntropyProbe make_probe(std::int64_t d_in, std::int64_t n_classes, std::uint64_t seed);
std::vector<double> entropy_map(const EntropyProbe& probe, const Tensor& z_patches);

}  // namespace canvit
