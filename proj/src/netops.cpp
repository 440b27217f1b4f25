#include "canvit/netops.hpp"

#include <cmath>
#include <stdexcept>

namespace canvit {

RopeTable compute_2d_rope(const std::vector<TokenCoord>& coords, std::int64_t head_dim,
                          double base_period) {
    if (head_dim <= 0 || head_dim % 4 != 0)
        throw std::invalid_argument("compute_2d_rope: head_dim must be a positive multiple of 4");
    if (base_period <= 0.0) throw std::invalid_argument("compute_2d_rope: base period must be positive");
    const std::int64_t n = static_cast<std::int64_t>(coords.size());
    const std::int64_t np = head_dim / 2;       // rotation pairs per token
    const std::int64_t npa = head_dim / 4;      // pairs per axis
    std::vector<double> freqs(static_cast<std::size_t>(npa));
    for (std::int64_t i = 0; i < npa; ++i)
        freqs[static_cast<std::size_t>(i)] =
            std::pow(base_period, -2.0 * static_cast<double>(i) / static_cast<double>(np));
    std::vector<double> cs(static_cast<std::size_t>(n * np)), sn(static_cast<std::size_t>(n * np));
    for (std::int64_t t = 0; t < n; ++t) {
        double* crow = cs.data() + t * np;
        double* srow = sn.data() + t * np;
        const TokenCoord& c = coords[static_cast<std::size_t>(t)];
        if (!c.spatial) {
            for (std::int64_t p = 0; p < np; ++p) {
                crow[p] = 1.0;
                srow[p] = 0.0;
            }
            continue;
        }
        for (std::int64_t i = 0; i < npa; ++i) {
            const double ax = c.x * freqs[static_cast<std::size_t>(i)];
            const double ay = c.y * freqs[static_cast<std::size_t>(i)];
            crow[i] = std::cos(ax);
            srow[i] = std::sin(ax);
            crow[npa + i] = std::cos(ay);
            srow[npa + i] = std::sin(ay);
        }
    }
    RopeTable tab;
    tab.n_tokens = n;
    tab.head_dim = head_dim;
    tab.cos_tab = Tensor::from_data({n, np}, std::move(cs));
    tab.sin_tab = Tensor::from_data({n, np}, std::move(sn));
    return tab;
}

RopeTable compute_2d_rope(const GridCenters& grid, std::int64_t head_dim, double base_period) {
    std::vector<TokenCoord> coords;
    coords.reserve(grid.centers.size());
    for (const auto& c : grid.centers) coords.push_back({true, c[0], c[1]});
    return compute_2d_rope(coords, head_dim, base_period);
}

Tensor split_heads(const Tensor& x, std::int64_t heads) {
    if (x.rank() != 2) throw std::invalid_argument("split_heads: expects [n, d]");
    const std::int64_t n = x.dim(0), d = x.dim(1);
    if (heads <= 0 || d % heads != 0)
        throw std::invalid_argument("split_heads: width " + std::to_string(d) +
                                    " not divisible into " + std::to_string(heads) + " heads");
    return transpose(reshape(x, {n, heads, d / heads}), 0, 1);
}

Tensor merge_heads(const Tensor& x) {
    if (x.rank() != 3) throw std::invalid_argument("merge_heads: expects [heads, n, head_dim]");
    const std::int64_t h = x.dim(0), n = x.dim(1), hd = x.dim(2);
    return reshape(transpose(x, 0, 1), {n, h * hd});
}

namespace {

void check_rope(const RopeTable& rope, std::int64_t n_tokens, std::int64_t head_dim,
                const char* who) {
    if (rope.n_tokens != n_tokens || rope.head_dim != head_dim)
        throw std::invalid_argument(std::string(who) + ": rope table is for " +
                                    std::to_string(rope.n_tokens) + " tokens x head_dim " +
                                    std::to_string(rope.head_dim) + ", stream has " +
                                    std::to_string(n_tokens) + " x " + std::to_string(head_dim));
}

}  // namespace

Tensor vit_block(const Tensor& x, const ViTBlockParams& p, const RopeTable& rope,
                 std::int64_t heads) {
    const std::int64_t n = x.dim(0), d = x.dim(1);
    check_rope(rope, n, d / heads, "vit_block");

    Tensor h = layer_norm(x, p.ln1_g, p.ln1_b);
    Tensor q = apply_rope(split_heads(linear(h, p.wq, p.bq), heads), rope.cos_tab, rope.sin_tab);
    Tensor k = apply_rope(split_heads(linear(h, p.wk, p.bk), heads), rope.cos_tab, rope.sin_tab);
    Tensor v = split_heads(linear(h, p.wv, p.bv), heads);
    Tensor attn = linear(merge_heads(softmax_sdpa(q, k, v)), p.wo, p.bo);
    Tensor x1 = add(x, mul(attn, broadcast_to(p.ls1, attn.shape())));

    Tensor h2 = layer_norm(x1, p.ln2_g, p.ln2_b);
    Tensor m = linear(gelu(linear(h2, p.w_up, p.b_up)), p.w_down, p.b_down);
    return add(x1, mul(m, broadcast_to(p.ls2, m.shape())));
}

Tensor canvas_read(const Tensor& x_bb, const Tensor& x_can, const CanvasReadParams& p,
                   const RopeTable& rope_bb, const RopeTable& rope_can, std::int64_t heads) {
    const std::int64_t d_can = x_can.dim(1);
    const std::int64_t hd = d_can / heads;
    check_rope(rope_bb, x_bb.dim(0), hd, "canvas_read");
    check_rope(rope_can, x_can.dim(0), hd, "canvas_read");

    Tensor q_in = linear(layer_norm(x_bb, p.ln_q_g, p.ln_q_b), p.q_map, Tensor());
    Tensor kv = layer_norm(x_can, p.ln_kv_g, p.ln_kv_b);
    Tensor k_in = p.k_map.defined() ? linear(kv, p.k_map, Tensor()) : kv;
    Tensor v_in = p.v_map.defined() ? linear(kv, p.v_map, Tensor()) : kv;

    Tensor q = apply_rope(split_heads(q_in, heads), rope_bb.cos_tab, rope_bb.sin_tab);
    Tensor k = apply_rope(split_heads(k_in, heads), rope_can.cos_tab, rope_can.sin_tab);
    Tensor v = split_heads(v_in, heads);
    return linear(merge_heads(softmax_sdpa(q, k, v)), p.o_map, Tensor());
}

Tensor canvas_write(const Tensor& x_can, const Tensor& x_bb, const CanvasWriteParams& p,
                    const RopeTable& rope_can, const RopeTable& rope_bb, std::int64_t heads) {
    const std::int64_t d_can = x_can.dim(1);
    const std::int64_t hd = d_can / heads;
    check_rope(rope_can, x_can.dim(0), hd, "canvas_write");
    check_rope(rope_bb, x_bb.dim(0), hd, "canvas_write");

    Tensor q_in = layer_norm(x_can, p.ln_q_g, p.ln_q_b);
    if (p.q_map.defined()) q_in = linear(q_in, p.q_map, Tensor());
    Tensor kv = layer_norm(x_bb, p.ln_kv_g, p.ln_kv_b);
    Tensor k_in = linear(kv, p.k_map, Tensor());
    Tensor v_in = linear(kv, p.v_map, Tensor());

    Tensor q = apply_rope(split_heads(q_in, heads), rope_can.cos_tab, rope_can.sin_tab);
    Tensor k = apply_rope(split_heads(k_in, heads), rope_bb.cos_tab, rope_bb.sin_tab);
    Tensor v = split_heads(v_in, heads);
    Tensor out = merge_heads(softmax_sdpa(q, k, v));
    if (p.o_map.defined()) out = linear(out, p.o_map, Tensor());
    return out;
}

}  // namespace canvit
