#include "canvit/model.hpp"

#include <cmath>
#include <stdexcept>

namespace canvit {

ModelConfig ModelConfig::reference_b() {
    ModelConfig c;
    c.d_bb = 768;
    c.d_can = 1024;
    c.depth = 12;
    c.heads_bb = 12;
    c.ca_heads = 8;  // 8 heads of dim 128
    c.registers_bb = 5;
    c.registers_can = 16;
    c.rw_stride = 2;
    c.rope_base = 100.0;
    c.patch_px = 16;
    c.glimpse_px = 128;
    c.rff_sigma = 1.0;
    c.layerscale_init = 1e-5;
    c.d_teacher = 768;
    c.canvas_h = 32;
    c.canvas_w = 32;
    return c;
}

ModelConfig ModelConfig::micro_gradcheck() {
    ModelConfig c;
    c.d_bb = 16;
    c.d_can = 24;
    c.depth = 4;
    c.heads_bb = 2;   // head_dim 8
    c.ca_heads = 2;   // head_dim 12
    c.registers_bb = 2;
    c.registers_can = 2;
    c.rw_stride = 2;
    c.patch_px = 4;
    c.glimpse_px = 8;  // 2x2 patch grid
    c.d_teacher = 6;
    c.canvas_h = 3;
    c.canvas_w = 3;
    return c;
}

void ModelConfig::validate() const {
    auto fail = [](const std::string& m) { throw std::invalid_argument("ModelConfig: " + m); };
    if (d_bb <= 0 || d_can <= 0 || depth <= 0) fail("non-positive dimensions");
    if (d_bb % 2 != 0) fail("d_bb must be even for the sin/cos viewpoint lift");
    if (heads_bb <= 0 || d_bb % heads_bb != 0) fail("d_bb must divide into heads_bb heads");
    if (ca_heads <= 0 || d_can % ca_heads != 0) fail("d_can must divide into ca_heads heads");
    if (head_dim_bb() % 4 != 0) fail("backbone head_dim must be a multiple of 4 for 2-d rotary");
    if (head_dim_ca() % 4 != 0) fail("canvas head_dim must be a multiple of 4 for 2-d rotary");
    if (rw_stride <= 0 || depth % rw_stride != 0) fail("depth must be a multiple of rw_stride");
    if (n_interactions() % 2 != 0) fail("schedule must pair each read with a write");
    if (patch_px <= 0 || glimpse_px <= 0 || glimpse_px % patch_px != 0)
        fail("glimpse_px must be a multiple of patch_px");
    if (registers_bb < 0 || registers_can < 0) fail("negative register count");
    if (rope_base <= 0.0) fail("rope_base must be positive");
    if (d_teacher <= 0) fail("d_teacher must be positive");
    if (canvas_h <= 0 || canvas_w <= 0) fail("canvas grid must be positive");
}

namespace {

// truncated normal: resample draws outside two standard deviations
double trunc_normal(Rng& rng, double stddev) {
    double x = rng.normal(0.0, stddev);
    while (std::abs(x) > 2.0 * stddev) x = rng.normal(0.0, stddev);
    return x;
}

Tensor init_weight(Rng& rng, Shape shape, double stddev = 0.02) {
    std::vector<double> v(static_cast<std::size_t>(shape_numel(shape)));
    for (double& x : v) x = trunc_normal(rng, stddev);
    return Tensor::param(std::move(shape), std::move(v));
}

Tensor init_const(Shape shape, double value) {
    std::vector<double> v(static_cast<std::size_t>(shape_numel(shape)), value);
    return Tensor::param(std::move(shape), std::move(v));
}

}  // namespace

std::vector<std::pair<std::string, Tensor>> ModelParams::trainable() const {
    std::vector<std::pair<std::string, Tensor>> out;
    out.reserve(named.size());
    for (const auto& [name, t] : named)
        if (t.requires_grad()) out.emplace_back(name, t);
    return out;
}

std::int64_t ModelParams::n_parameters() const {
    std::int64_t n = 0;
    for (const auto& [name, t] : named)
        if (t.requires_grad()) n += t.numel();
    return n;
}

void ModelParams::zero_grads() const {
    for (const auto& [name, t] : named) const_cast<Tensor&>(t).zero_grad();
}

ModelParams make_model(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    ModelParams p;
    p.cfg = cfg;
    Rng rng(seed);
    {
        Rng rff_rng = rng.fork();
        p.rff = make_rff(cfg.d_bb, cfg.rff_sigma, rff_rng);
    }

    auto reg = [&p](const std::string& name, Tensor t) {
        p.named.emplace_back(name, t);
        return t;
    };

    const std::int64_t d = cfg.d_bb, dc = cfg.d_can, dt = cfg.d_teacher;
    const std::int64_t patch_dim = cfg.patch_px * cfg.patch_px * 3;

    p.cls_token = reg("cls_token", init_weight(rng, {1, d}));
    if (cfg.vpe_enabled) {
        p.vpe_ln_g = reg("vpe.ln_g", init_const({d}, 1.0));
        p.vpe_ln_b = reg("vpe.ln_b", init_const({d}, 0.0));
    }
    p.bb_registers = reg("bb_registers", init_weight(rng, {cfg.registers_bb, d}));
    p.patch_w = reg("patch_embed.w", init_weight(rng, {patch_dim, d}));
    p.patch_b = reg("patch_embed.b", init_const({d}, 0.0));

    for (std::int64_t b = 0; b < cfg.depth; ++b) {
        const std::string base = "blocks." + std::to_string(b) + ".";
        ViTBlockParams bp;
        bp.ln1_g = reg(base + "ln1_g", init_const({d}, 1.0));
        bp.ln1_b = reg(base + "ln1_b", init_const({d}, 0.0));
        bp.wq = reg(base + "wq", init_weight(rng, {d, d}));
        bp.bq = reg(base + "bq", init_const({d}, 0.0));
        bp.wk = reg(base + "wk", init_weight(rng, {d, d}));
        bp.bk = reg(base + "bk", init_const({d}, 0.0));
        bp.wv = reg(base + "wv", init_weight(rng, {d, d}));
        bp.bv = reg(base + "bv", init_const({d}, 0.0));
        bp.wo = reg(base + "wo", init_weight(rng, {d, d}));
        bp.bo = reg(base + "bo", init_const({d}, 0.0));
        bp.ls1 = reg(base + "ls1", init_const({d}, cfg.layerscale_init));
        bp.ln2_g = reg(base + "ln2_g", init_const({d}, 1.0));
        bp.ln2_b = reg(base + "ln2_b", init_const({d}, 0.0));
        bp.w_up = reg(base + "w_up", init_weight(rng, {d, 4 * d}));
        bp.b_up = reg(base + "b_up", init_const({4 * d}, 0.0));
        bp.w_down = reg(base + "w_down", init_weight(rng, {4 * d, d}));
        bp.b_down = reg(base + "b_down", init_const({d}, 0.0));
        bp.ls2 = reg(base + "ls2", init_const({d}, cfg.layerscale_init));
        p.blocks.push_back(bp);
    }

    for (std::int64_t r = 0; r < cfg.n_reads(); ++r) {
        const std::string base = "read." + std::to_string(r) + ".";
        CanvasReadParams rp;
        rp.ln_q_g = reg(base + "ln_q_g", init_const({d}, 1.0));
        rp.ln_q_b = reg(base + "ln_q_b", init_const({d}, 0.0));
        rp.ln_kv_g = reg(base + "ln_kv_g", init_const({dc}, 1.0));
        rp.ln_kv_b = reg(base + "ln_kv_b", init_const({dc}, 0.0));
        rp.q_map = reg(base + "q_map", init_weight(rng, {d, dc}));
        rp.o_map = reg(base + "o_map", init_weight(rng, {dc, d}));
        if (cfg.canvas_qkvo) {
            rp.k_map = reg(base + "k_map", init_weight(rng, {dc, dc}));
            rp.v_map = reg(base + "v_map", init_weight(rng, {dc, dc}));
        }
        p.reads.push_back(rp);
    }
    for (std::int64_t w = 0; w < cfg.n_writes(); ++w) {
        const std::string base = "write." + std::to_string(w) + ".";
        CanvasWriteParams wp;
        wp.ln_q_g = reg(base + "ln_q_g", init_const({dc}, 1.0));
        wp.ln_q_b = reg(base + "ln_q_b", init_const({dc}, 0.0));
        wp.ln_kv_g = reg(base + "ln_kv_g", init_const({d}, 1.0));
        wp.ln_kv_b = reg(base + "ln_kv_b", init_const({d}, 0.0));
        wp.k_map = reg(base + "k_map", init_weight(rng, {d, dc}));
        wp.v_map = reg(base + "v_map", init_weight(rng, {d, dc}));
        if (cfg.canvas_qkvo) {
            wp.q_map = reg(base + "q_map", init_weight(rng, {dc, dc}));
            wp.o_map = reg(base + "o_map", init_weight(rng, {dc, dc}));
        }
        p.writes.push_back(wp);
    }

    p.canvas_registers = reg("canvas_registers", init_weight(rng, {cfg.registers_can, dc}));
    p.canvas_init = reg("canvas_init", init_weight(rng, {1, dc}));

    p.dec_ln_can_g = reg("decode.ln_can_g", init_const({dc}, 1.0));
    p.dec_ln_can_b = reg("decode.ln_can_b", init_const({dc}, 0.0));
    p.w_dec_patch = reg("decode.w_patch", init_weight(rng, {dc, dt}));
    p.dec_ln_cls_g = reg("decode.ln_cls_g", init_const({d}, 1.0));
    p.dec_ln_cls_b = reg("decode.ln_cls_b", init_const({d}, 0.0));
    p.w_dec_cls = reg("decode.w_cls", init_weight(rng, {d, dt}));

    // frozen lift frequencies, serialized with the parameters
    Tensor rff_t = Tensor::from_data({p.rff.n_features, 3}, p.rff.freq);
    p.named.emplace_back("rff.freq", rff_t);

    return p;
}

ModelState init_state(const ModelParams& p, std::int64_t h, std::int64_t w) {
    if (h <= 0 || w <= 0) throw std::invalid_argument("init_state: grid must be positive");
    ModelState s;
    s.h = h;
    s.w = w;
    s.canvas_patches = broadcast_to(p.canvas_init, {h * w, p.cfg.d_can});
    // reshape is a differentiable copy, so the learnable initials receive
    // gradient through the first chunk
    s.canvas_registers = reshape(p.canvas_registers, {p.cfg.registers_can, p.cfg.d_can});
    s.cls = reshape(p.cls_token, {1, p.cfg.d_bb});
    return s;
}

ModelState detach_state(const ModelState& s) {
    ModelState out;
    out.h = s.h;
    out.w = s.w;
    out.canvas_patches = detach(s.canvas_patches);
    out.canvas_registers = detach(s.canvas_registers);
    out.cls = detach(s.cls);
    return out;
}

RopeTable canvas_rope_table(const ModelConfig& cfg, std::int64_t h, std::int64_t w) {
    std::vector<TokenCoord> coords;
    coords.reserve(static_cast<std::size_t>(cfg.registers_can + h * w));
    for (std::int64_t r = 0; r < cfg.registers_can; ++r) coords.push_back({false, 0.0, 0.0});
    for (const auto& c : grid_centers(h, w).centers) coords.push_back({true, c[0], c[1]});
    return compute_2d_rope(coords, cfg.head_dim_ca(), cfg.rope_base);
}

Tensor patchify(const ModelParams& p, const Tensor& glimpse) {
    const ModelConfig& cfg = p.cfg;
    if (glimpse.rank() != 3 || glimpse.dim(0) != cfg.glimpse_px ||
        glimpse.dim(1) != cfg.glimpse_px || glimpse.dim(2) != 3)
        throw std::invalid_argument("patchify: glimpse must be [" + std::to_string(cfg.glimpse_px) +
                                    "," + std::to_string(cfg.glimpse_px) + ",3], got " +
                                    shape_str(glimpse.shape()));
    const std::int64_t ps = cfg.glimpse_patches_side(), pp = cfg.patch_px;
    Tensor x = reshape(glimpse, {ps, pp, ps, pp, 3});
    x = transpose(x, 1, 2);  // [ps, ps, pp, pp, 3]
    x = reshape(x, {ps * ps, pp * pp * 3});
    return linear(x, p.patch_w, p.patch_b);
}

std::pair<Tensor, Tensor> decode_state(const ModelParams& p, const ModelState& s) {
    Tensor zp = matmul(layer_norm(s.canvas_patches, p.dec_ln_can_g, p.dec_ln_can_b), p.w_dec_patch);
    Tensor zc = matmul(layer_norm(s.cls, p.dec_ln_cls_g, p.dec_ln_cls_b), p.w_dec_cls);
    return {zp, zc};
}

StepResult model_step(const ModelParams& p, const ModelState& s, const Tensor& glimpse,
                      const Viewpoint& v, const RopeTable& rope_can) {
    const ModelConfig& cfg = p.cfg;
    if (!viewpoint_is_valid(v)) throw std::invalid_argument("model_step: invalid viewpoint");
    if (s.h <= 0 || s.w <= 0) throw std::invalid_argument("model_step: uninitialised state");
    if (rope_can.n_tokens != cfg.n_canvas_tokens(s.h, s.w))
        throw std::invalid_argument("model_step: canvas rope table does not match the state grid");

    // glimpse stream: [cls, window token, registers, patches]
    std::vector<Tensor> toks;
    toks.push_back(s.cls);
    if (cfg.vpe_enabled) {
        const auto lift = lift_rff(p.rff, embed_viewpoint(v));
        Tensor raw = Tensor::from_data({1, cfg.d_bb}, lift);
        toks.push_back(layer_norm(raw, p.vpe_ln_g, p.vpe_ln_b));
    }
    toks.push_back(p.bb_registers);
    toks.push_back(patchify(p, glimpse));
    Tensor x_bb = concat(toks, 0);

    // token coordinates: leading tokens are non-spatial, patches sit at
    // their scene-frame centers
    const std::int64_t lead = x_bb.dim(0) - cfg.n_patches();
    std::vector<TokenCoord> coords(static_cast<std::size_t>(lead), TokenCoord{false, 0.0, 0.0});
    const GridCenters pc = glimpse_patch_centers(v, cfg.glimpse_patches_side(),
                                                 cfg.glimpse_patches_side());
    for (const auto& c : pc.centers) coords.push_back({true, c[0], c[1]});
    const RopeTable rope_bb = compute_2d_rope(coords, cfg.head_dim_bb(), cfg.rope_base);
    const RopeTable rope_bb_ca = compute_2d_rope(coords, cfg.head_dim_ca(), cfg.rope_base);

    Tensor x_can = concat({s.canvas_registers, s.canvas_patches}, 0);

    StepResult res;
    std::int64_t inter = 0;
    for (std::int64_t b = 0; b < cfg.depth; ++b) {
        x_bb = vit_block(x_bb, p.blocks[static_cast<std::size_t>(b)], rope_bb, cfg.heads_bb);
        if ((b + 1) % cfg.rw_stride != 0) continue;
        if (inter % 2 == 0) {
            if (cfg.reads_enabled) {
                Tensor r = canvas_read(x_bb, x_can, p.reads[static_cast<std::size_t>(inter / 2)],
                                       rope_bb_ca, rope_can, cfg.ca_heads);
                x_bb = add(x_bb, r);
            }
        } else {
            Tensor r = canvas_write(x_can, x_bb, p.writes[static_cast<std::size_t>(inter / 2)],
                                    rope_can, rope_bb_ca, cfg.ca_heads);
            x_can = add(x_can, r);
            res.write_residuals.push_back(r);
        }
        ++inter;
    }

    res.state.h = s.h;
    res.state.w = s.w;
    res.state.canvas_registers = slice(x_can, 0, 0, cfg.registers_can);
    res.state.canvas_patches = slice(x_can, 0, cfg.registers_can, s.h * s.w);
    res.state.cls = slice(x_bb, 0, 0, 1);
    if (cfg.vpe_enabled) res.vpe_out = slice(x_bb, 0, 1, 1);

    auto [zp, zc] = decode_state(p, res.state);
    res.z_patches = zp;
    res.z_cls = zc;
    return res;
}

}  // namespace canvit
