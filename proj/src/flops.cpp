#include "canvit/flops.hpp"

#include <sstream>
#include <stdexcept>

#include "canvit/netops.hpp"

namespace canvit {

std::int64_t FlopReport::component(const std::string& name) const {
    for (const auto& c : components)
        if (c.name == name) return c.flops;
    throw std::out_of_range("FlopReport: no component named " + name);
}

double ratio_canvas_projection(std::int64_t d_can, std::int64_t n_g) {
    if (n_g < 1) throw std::invalid_argument("ratio_canvas_projection: N_g must be >= 1");
    return static_cast<double>(d_can) / (2.0 * static_cast<double>(n_g));
}

std::int64_t flops_canvas_projection(const ModelConfig& cfg, std::int64_t h, std::int64_t w) {
    const std::int64_t n_can = cfg.n_canvas_tokens(h, w);
    return 2 * n_can * cfg.d_can * cfg.d_can;
}

std::int64_t flops_interaction_sdpa(const ModelConfig& cfg, std::int64_t h, std::int64_t w) {
    const std::int64_t n_can = cfg.n_canvas_tokens(h, w);
    return 4 * cfg.n_glimpse_tokens() * n_can * cfg.d_can;
}

std::int64_t flops_rw_pair(const ModelConfig& cfg, std::int64_t h, std::int64_t w,
                           bool with_canvas_qkvo) {
    const std::int64_t n_g = cfg.n_glimpse_tokens();
    // read: q_map + o_map; write: k_map + v_map. Four glimpse-side maps in
    // total, each 2 * N_g * D_bb * D_can.
    std::int64_t total = 4 * (2 * n_g * cfg.d_bb * cfg.d_can);
    total += 2 * flops_interaction_sdpa(cfg, h, w);
    if (with_canvas_qkvo) total += 4 * flops_canvas_projection(cfg, h, w);
    return total;
}

FlopReport flops_timestep(const ModelConfig& cfg, std::int64_t h, std::int64_t w) {
    const std::int64_t n_g = cfg.n_glimpse_tokens();
    const std::int64_t d = cfg.d_bb, dc = cfg.d_can;
    const std::int64_t patch_in = cfg.patch_px * cfg.patch_px * 3;
    const std::int64_t reads = cfg.reads_enabled ? cfg.n_reads() : 0;
    const std::int64_t writes = cfg.n_writes();
    const std::int64_t glimpse_proj = 2 * (2 * n_g * d * dc);  // two maps per direction
    const std::int64_t sdpa = flops_interaction_sdpa(cfg, h, w);
    const std::int64_t canvas_proj = cfg.canvas_qkvo ? 2 * flops_canvas_projection(cfg, h, w) : 0;

    FlopReport r;
    r.components = {
        {"patch_embed", 2 * cfg.n_patches() * patch_in * d},
        {"backbone_qkvo", cfg.depth * 8 * n_g * d * d},
        {"backbone_sdpa", cfg.depth * 4 * n_g * n_g * d},
        {"backbone_mlp", cfg.depth * 16 * n_g * d * d},
        {"read_glimpse_proj", reads * glimpse_proj},
        {"read_sdpa", reads * sdpa},
        {"read_canvas_proj", reads * canvas_proj},
        {"write_glimpse_proj", writes * glimpse_proj},
        {"write_sdpa", writes * sdpa},
        {"write_canvas_proj", writes * canvas_proj},
        {"decode", 2 * h * w * dc * cfg.d_teacher + 2 * d * cfg.d_teacher},
    };
    for (const auto& c : r.components) r.per_timestep += c.flops;
    r.timesteps = 1;
    r.per_rollout = r.per_timestep;
    return r;
}

FlopReport flops_rollout(const ModelConfig& cfg, std::int64_t h, std::int64_t w, std::int64_t t) {
    if (t < 1) throw std::invalid_argument("flops_rollout: need at least one timestep");
    FlopReport r = flops_timestep(cfg, h, w);
    r.timesteps = t;
    r.per_rollout = r.per_timestep * t;
    return r;
}

std::int64_t flops_passive_vit(const PassiveVitDims& dims, std::int64_t input_px,
                               std::int64_t patch_px) {
    if (patch_px < 1 || input_px % patch_px != 0)
        throw std::invalid_argument("flops_passive_vit: input size must be divisible by patch");
    const std::int64_t side = input_px / patch_px;
    const std::int64_t n_patches = side * side;
    const std::int64_t n = n_patches + 1;  // class token
    const std::int64_t d = dims.d;
    std::int64_t total = 2 * n_patches * (patch_px * patch_px * 3) * d;
    total += dims.depth * (8 * n * d * d + 4 * n * n * d + 16 * n * d * d);
    return total;
}

std::int64_t instrumented_timestep_flops(const ModelConfig& cfg, std::int64_t h, std::int64_t w) {
    ModelParams params = make_model(cfg, 0);
    const RopeTable rope_can = canvas_rope_table(cfg, h, w);
    const ModelState state = init_state(params, h, w);
    const Tensor glimpse = Tensor::zeros({cfg.glimpse_px, cfg.glimpse_px, 3});
    FlopScope scope(/*skip_compute=*/true);
    (void)model_step(params, state, glimpse, Viewpoint{0.0, 0.0, 1.0}, rope_can);
    return static_cast<std::int64_t>(scope.count());
}

std::int64_t instrumented_passive_vit_flops(const PassiveVitDims& dims, std::int64_t input_px,
                                            std::int64_t patch_px) {
    if (patch_px < 1 || input_px % patch_px != 0)
        throw std::invalid_argument("instrumented_passive_vit_flops: bad patch size");
    const std::int64_t side = input_px / patch_px;
    const std::int64_t n_patches = side * side;
    const std::int64_t d = dims.d;
    const std::int64_t patch_in = patch_px * patch_px * 3;

    ViTBlockParams blk;
    blk.ln1_g = Tensor::full({d}, 1.0);
    blk.ln1_b = Tensor::zeros({d});
    blk.wq = Tensor::zeros({d, d});
    blk.bq = Tensor::zeros({d});
    blk.wk = Tensor::zeros({d, d});
    blk.bk = Tensor::zeros({d});
    blk.wv = Tensor::zeros({d, d});
    blk.bv = Tensor::zeros({d});
    blk.wo = Tensor::zeros({d, d});
    blk.bo = Tensor::zeros({d});
    blk.ls1 = Tensor::full({d}, 1.0);
    blk.ln2_g = Tensor::full({d}, 1.0);
    blk.ln2_b = Tensor::zeros({d});
    blk.w_up = Tensor::zeros({d, 4 * d});
    blk.b_up = Tensor::zeros({4 * d});
    blk.w_down = Tensor::zeros({4 * d, d});
    blk.b_down = Tensor::zeros({d});
    blk.ls2 = Tensor::full({d}, 1.0);

    std::vector<TokenCoord> coords(static_cast<std::size_t>(n_patches + 1));
    const RopeTable rope = compute_2d_rope(coords, d, 100.0);

    const Tensor embed_w = Tensor::zeros({patch_in, d});
    const Tensor pixels = Tensor::zeros({n_patches, patch_in});
    const Tensor cls = Tensor::zeros({1, d});

    FlopScope scope(/*skip_compute=*/true);
    Tensor x = concat({cls, matmul(pixels, embed_w)}, 0);
    for (std::int64_t i = 0; i < dims.depth; ++i) x = vit_block(x, blk, rope, 1);
    return static_cast<std::int64_t>(scope.count());
}

std::string flop_report_csv(const FlopReport& r) {
    std::ostringstream os;
    os << "component,flops\n";
    for (const auto& c : r.components) os << c.name << "," << c.flops << "\n";
    os << "per_timestep," << r.per_timestep << "\n";
    os << "timesteps," << r.timesteps << "\n";
    os << "per_rollout," << r.per_rollout << "\n";
    return os.str();
}

}  // namespace canvit
