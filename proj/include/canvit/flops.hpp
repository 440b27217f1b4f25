#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "canvit/model.hpp"

namespace canvit {

// Analytic cost model. Counts every matmul at 2*m*k*n FLOPs (one multiply-add
// = 2 FLOPs) and attention at 4*Nq*Nk*D; layer norms, softmax exponentials,
// elementwise adds and rotary rotations are excluded. The instrumented
// forward pass in the tensor layer uses the same conventions, so analytic
// and measured counts agree exactly.

struct FlopComponent {
    std::string name;
    std::int64_t flops = 0;
};

struct FlopReport {
    std::vector<FlopComponent> components;  // one timestep
    std::int64_t per_timestep = 0;          // sum of components
    std::int64_t timesteps = 1;
    std::int64_t per_rollout = 0;  // timesteps * per_timestep

    std::int64_t component(const std::string& name) const;  // throws on unknown name
};

// Cost ratio of one hypothetical canvas-side D_can x D_can projection to one
// canvas-attention SDPA: D_can / (2 * N_g). Independent of canvas size.
double ratio_canvas_projection(std::int64_t d_can, std::int64_t n_g);

// One D_can x D_can projection applied to all N_can canvas tokens.
std::int64_t flops_canvas_projection(const ModelConfig& cfg, std::int64_t h, std::int64_t w);

// One canvas-attention SDPA (read or write direction; both cost the same).
std::int64_t flops_interaction_sdpa(const ModelConfig& cfg, std::int64_t h, std::int64_t w);

// One read + one write: glimpse-side projections, two SDPA calls, and
// optionally the four canvas-side D_can x D_can projections a symmetric
// variant would add.
std::int64_t flops_rw_pair(const ModelConfig& cfg, std::int64_t h, std::int64_t w,
                           bool with_canvas_qkvo);

FlopReport flops_timestep(const ModelConfig& cfg, std::int64_t h, std::int64_t w);
FlopReport flops_rollout(const ModelConfig& cfg, std::int64_t h, std::int64_t w, std::int64_t t);

struct PassiveVitDims {
    std::int64_t d = 768;
    std::int64_t depth = 12;
};

// Standard ViT encoder cost at a given resolution: patch embed plus
// depth x (QKVO, SDPA, MLP) over (input/patch)^2 + 1 tokens.
std::int64_t flops_passive_vit(const PassiveVitDims& dims, std::int64_t input_px,
                               std::int64_t patch_px);

// Measured matmul + SDPA count of one real model step (parameters built for
// cfg, canvas h x w, arithmetic skipped). Ground truth for the analytic model.
std::int64_t instrumented_timestep_flops(const ModelConfig& cfg, std::int64_t h, std::int64_t w);

// Measured count of a passive ViT forward at the same conventions.
std::int64_t instrumented_passive_vit_flops(const PassiveVitDims& dims, std::int64_t input_px,
                                            std::int64_t patch_px);

std::string flop_report_csv(const FlopReport& r);

}  // namespace canvit
