#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "canvit/geometry.hpp"
#include "canvit/netops.hpp"
#include "canvit/tensor.hpp"

namespace canvit {

struct ModelConfig {
    std::int64_t d_bb = 32;
    std::int64_t d_can = 32;
    std::int64_t depth = 4;
    std::int64_t heads_bb = 4;
    std::int64_t ca_heads = 4;
    std::int64_t registers_bb = 2;
    std::int64_t registers_can = 4;
    std::int64_t rw_stride = 2;
    double rope_base = 100.0;
    std::int64_t patch_px = 8;
    std::int64_t glimpse_px = 32;
    double rff_sigma = 1.0;
    double layerscale_init = 1e-5;
    std::int64_t d_teacher = 32;
    // training-time canvas grid; rollouts may pick a different one
    std::int64_t canvas_h = 8;
    std::int64_t canvas_w = 8;
    bool vpe_enabled = true;
    bool reads_enabled = true;
    bool canvas_qkvo = false;  // symmetric variant with canvas-side projections

    // Full-scale reference configuration (768/1024-wide, 12 blocks).
    static ModelConfig reference_b();
    // Tiny configuration used by the full-model gradient check.
    static ModelConfig micro_gradcheck();

    void validate() const;

    std::int64_t glimpse_patches_side() const { return glimpse_px / patch_px; }
    std::int64_t n_patches() const { return glimpse_patches_side() * glimpse_patches_side(); }
    std::int64_t n_glimpse_tokens() const {
        return 1 + (vpe_enabled ? 1 : 0) + registers_bb + n_patches();
    }
    std::int64_t n_canvas_tokens(std::int64_t h, std::int64_t w) const {
        return registers_can + h * w;
    }
    std::int64_t n_interactions() const { return depth / rw_stride; }
    std::int64_t n_reads() const { return (n_interactions() + 1) / 2; }
    std::int64_t n_writes() const { return n_interactions() / 2; }
    std::int64_t head_dim_bb() const { return d_bb / heads_bb; }
    std::int64_t head_dim_ca() const { return d_can / ca_heads; }
};

struct ModelParams {
    ModelConfig cfg;
    RffParams rff;

    Tensor cls_token;      // [1, d_bb]
    Tensor vpe_ln_g, vpe_ln_b;
    Tensor bb_registers;   // [registers_bb, d_bb]
    Tensor patch_w, patch_b;
    std::vector<ViTBlockParams> blocks;
    std::vector<CanvasReadParams> reads;
    std::vector<CanvasWriteParams> writes;
    Tensor canvas_registers;  // [registers_can, d_can]
    Tensor canvas_init;       // [1, d_can], broadcast over the grid
    Tensor dec_ln_can_g, dec_ln_can_b, w_dec_patch;  // [d_can] x2, [d_can, d_teacher]
    Tensor dec_ln_cls_g, dec_ln_cls_b, w_dec_cls;    // [d_bb] x2, [d_bb, d_teacher]

    // Every tensor above, in fixed order; checkpoint and optimizer iterate
    // this. rff.freq rides along as a frozen (non-trainable) entry.
    std::vector<std::pair<std::string, Tensor>> named;

    std::vector<std::pair<std::string, Tensor>> trainable() const;
    std::int64_t n_parameters() const;
    void zero_grads() const;
};

ModelParams make_model(const ModelConfig& cfg, std::uint64_t seed);

// Persistent state crossing timesteps: the canvas and the recurrent class
// token. Glimpse registers and the window token are rebuilt every step.
struct ModelState {
    std::int64_t h = 0, w = 0;
    Tensor canvas_patches;    // [h*w, d_can]
    Tensor canvas_registers;  // [registers_can, d_can]
    Tensor cls;               // [1, d_bb]
};

ModelState init_state(const ModelParams& p, std::int64_t h, std::int64_t w);
ModelState detach_state(const ModelState& s);

// Rotary table for the canvas stream (registers then grid cells); constant
// for a fixed grid, so callers build it once per rollout.
RopeTable canvas_rope_table(const ModelConfig& cfg, std::int64_t h, std::int64_t w);

struct StepResult {
    ModelState state;
    Tensor z_patches;  // [h*w, d_teacher]
    Tensor z_cls;      // [1, d_teacher]
    // one entry per Write, each [registers_can + h*w, d_can]; the canvas
    // update is exactly the running sum of these
    std::vector<Tensor> write_residuals;
    Tensor vpe_out;  // [1, d_bb] final value of the window token; diagnostic only
};

// One glimpse: tokenize, run the block/read/write schedule, carry state,
// decode the updated canvas and class token.
StepResult model_step(const ModelParams& p, const ModelState& s, const Tensor& glimpse,
                      const Viewpoint& v, const RopeTable& rope_can);

// z_patches[i] = w_dec_patch^T LN(canvas_patches[i]); z_cls = w_dec_cls^T LN(cls)
std::pair<Tensor, Tensor> decode_state(const ModelParams& p, const ModelState& s);

// [n_patches, patch_px*patch_px*3] row-major patch tokens -> embeddings
Tensor patchify(const ModelParams& p, const Tensor& glimpse);

}  // namespace canvit
