#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "canvit/geometry.hpp"
#include "canvit/tensor.hpp"

namespace canvit {

// Per-token rotary angle tables for one stream. Tokens without a spatial
// location (class token, window token, registers) carry zero angles, i.e.
// the identity rotation.
struct TokenCoord {
    bool spatial = false;
    double y = 0.0;
    double x = 0.0;
};

struct RopeTable {
    std::int64_t n_tokens = 0;
    std::int64_t head_dim = 0;
    Tensor cos_tab;  // [n_tokens, head_dim/2]
    Tensor sin_tab;
};

// 2-d axial rotary table: the first half of the rotation pairs is driven by
// x, the second half by y. Pair i within a half rotates at
// base^(-2i / (head_dim/2)) radians per unit coordinate. head_dim % 4 == 0.
RopeTable compute_2d_rope(const std::vector<TokenCoord>& coords, std::int64_t head_dim,
                          double base_period);
RopeTable compute_2d_rope(const GridCenters& grid, std::int64_t head_dim, double base_period);

// Pre-norm transformer block: x + ls1*Attn(LN(x)) then x + ls2*MLP(LN(x)),
// rotary embedding applied to q and k, MLP expansion 4x, GELU.
struct ViTBlockParams {
    Tensor ln1_g, ln1_b;
    Tensor wq, bq, wk, bk, wv, bv, wo, bo;
    Tensor ls1;
    Tensor ln2_g, ln2_b;
    Tensor w_up, b_up, w_down, b_down;
    Tensor ls2;
};

Tensor vit_block(const Tensor& x, const ViTBlockParams& p, const RopeTable& rope,
                 std::int64_t heads);

// One-directional cross-attention between the glimpse stream (width d_bb)
// and the canvas stream (width d_can). The attention itself runs at canvas
// width; only the glimpse side is projected. Returned tensors are residuals
// for the querying stream; callers add them.
//
// Read: glimpse queries canvas. q_map lifts glimpse tokens to canvas width,
// o_map brings the attended value back down. Canvas keys/values are the
// normalised canvas tokens themselves.
struct CanvasReadParams {
    Tensor ln_q_g, ln_q_b;    // over d_bb
    Tensor ln_kv_g, ln_kv_b;  // over d_can
    Tensor q_map;             // [d_bb, d_can]
    Tensor o_map;             // [d_can, d_bb]
    Tensor k_map, v_map;      // optional [d_can, d_can]; defined only in the
                              // symmetric variant that projects canvas tokens
};

// Write: canvas queries glimpse. k_map/v_map lift glimpse tokens to canvas
// width; canvas queries are the normalised canvas tokens and the attended
// value is added back without an output projection.
struct CanvasWriteParams {
    Tensor ln_q_g, ln_q_b;    // over d_can
    Tensor ln_kv_g, ln_kv_b;  // over d_bb
    Tensor k_map;             // [d_bb, d_can]
    Tensor v_map;             // [d_bb, d_can]
    Tensor q_map, o_map;      // optional [d_can, d_can] for the symmetric variant
};

Tensor canvas_read(const Tensor& x_bb, const Tensor& x_can, const CanvasReadParams& p,
                   const RopeTable& rope_bb, const RopeTable& rope_can, std::int64_t heads);

Tensor canvas_write(const Tensor& x_can, const Tensor& x_bb, const CanvasWriteParams& p,
                    const RopeTable& rope_can, const RopeTable& rope_bb, std::int64_t heads);

// [n, d] -> [heads, n, d/heads] and back
Tensor split_heads(const Tensor& x, std::int64_t heads);
Tensor merge_heads(const Tensor& x);

}  // namespace canvit
