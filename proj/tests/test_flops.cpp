#include <cstdint>
#include <stdexcept>
#include <string>

#include "canvit/flops.hpp"
#include "canvit/model.hpp"
#include "doctest.h"

using namespace canvit;

namespace {

ModelConfig wide_micro() {
    ModelConfig cfg;
    cfg.d_bb = 24;
    cfg.d_can = 16;
    cfg.depth = 4;
    cfg.heads_bb = 2;
    cfg.ca_heads = 4;
    cfg.registers_bb = 2;
    cfg.registers_can = 3;
    cfg.rw_stride = 2;
    cfg.patch_px = 4;
    cfg.glimpse_px = 8;
    cfg.d_teacher = 5;
    cfg.canvas_h = 5;
    cfg.canvas_w = 7;
    cfg.validate();
    return cfg;
}

}  // namespace

TEST_CASE("projection-to-attention cost ratio") {
    // D_can / (2 N_g): one D_can x D_can map applied to N_can tokens versus
    // one cross-attention SDPA, with the canvas size cancelling
    CHECK(ratio_canvas_projection(1024, 71) ==
          doctest::Approx(7.211267605633803).epsilon(1e-14));
    CHECK(ratio_canvas_projection(142, 71) == doctest::Approx(1.0).epsilon(1e-14));
    CHECK(ratio_canvas_projection(64, 64) == doctest::Approx(0.5).epsilon(1e-14));

    const ModelConfig b = ModelConfig::reference_b();
    CHECK(b.d_can == 1024);
    CHECK(b.n_glimpse_tokens() == 71);
    for (auto [h, w] : {std::pair<std::int64_t, std::int64_t>{8, 8},
                        std::pair<std::int64_t, std::int64_t>{64, 64}}) {
        const double measured =
            static_cast<double>(flops_canvas_projection(b, h, w)) /
            static_cast<double>(flops_interaction_sdpa(b, h, w));
        CHECK(measured == doctest::Approx(ratio_canvas_projection(b.d_can,
                                                                  b.n_glimpse_tokens()))
                              .epsilon(1e-12));
    }
}

TEST_CASE("read-write pair cost") {
    const ModelConfig b = ModelConfig::reference_b();
    SUBCASE("reference model at the 64x64 canvas") {
        CHECK(flops_rw_pair(b, 64, 64, false) == 2838364160);
        CHECK(flops_rw_pair(b, 64, 64, true) == 37332320256);
    }
    SUBCASE("matches the hand formula on a small config") {
        const ModelConfig cfg = wide_micro();
        const std::int64_t n_g = cfg.n_glimpse_tokens();
        const std::int64_t n_can = cfg.registers_can + 5 * 7;
        const std::int64_t glimpse_maps = 4 * 2 * n_g * cfg.d_bb * cfg.d_can;
        const std::int64_t sdpa = 4 * n_g * n_can * cfg.d_can;
        const std::int64_t can_maps = 4 * 2 * n_can * cfg.d_can * cfg.d_can;
        CHECK(flops_rw_pair(cfg, 5, 7, false) == glimpse_maps + 2 * sdpa);
        CHECK(flops_rw_pair(cfg, 5, 7, true) == glimpse_maps + 2 * sdpa + can_maps);
    }
}

TEST_CASE("per-timestep report") {
    const ModelConfig cfg = wide_micro();
    FlopReport r = flops_timestep(cfg, 5, 7);

    SUBCASE("total is the sum of its components") {
        std::int64_t sum = 0;
        for (const auto& c : r.components) sum += c.flops;
        CHECK(r.per_timestep == sum);
        CHECK(r.timesteps == 1);
        CHECK(r.per_rollout == r.per_timestep);
    }
    SUBCASE("named components match hand formulas") {
        const std::int64_t n_g = cfg.n_glimpse_tokens();
        const std::int64_t d = cfg.d_bb;
        CHECK(r.component("patch_embed") ==
              2 * cfg.n_patches() * (cfg.patch_px * cfg.patch_px * 3) * d);
        CHECK(r.component("backbone_qkvo") == cfg.depth * 8 * n_g * d * d);
        CHECK(r.component("backbone_sdpa") == cfg.depth * 4 * n_g * n_g * d);
        CHECK(r.component("backbone_mlp") == cfg.depth * 16 * n_g * d * d);
        const std::int64_t n_can = cfg.registers_can + 5 * 7;
        CHECK(r.component("read_sdpa") == cfg.n_reads() * 4 * n_g * n_can * cfg.d_can);
        CHECK(r.component("write_sdpa") == cfg.n_writes() * 4 * n_g * n_can * cfg.d_can);
        CHECK(r.component("read_glimpse_proj") ==
              cfg.n_reads() * 2 * (2 * n_g * d * cfg.d_can));
        CHECK(r.component("read_canvas_proj") == 0);  // asymmetric variant
        CHECK(r.component("write_canvas_proj") == 0);
        CHECK(r.component("decode") ==
              2 * 5 * 7 * cfg.d_can * cfg.d_teacher + 2 * d * cfg.d_teacher);
        CHECK_THROWS_AS(r.component("nope"), std::out_of_range);
    }
    SUBCASE("glimpse-side terms ignore the canvas, canvas terms scale with its area") {
        FlopReport big = flops_timestep(cfg, 10, 14);
        for (const char* name : {"patch_embed", "backbone_qkvo", "backbone_sdpa",
                                 "backbone_mlp", "read_glimpse_proj", "write_glimpse_proj"})
            CHECK(big.component(name) == r.component(name));
        const double small_tokens = static_cast<double>(cfg.registers_can + 35);
        const double big_tokens = static_cast<double>(cfg.registers_can + 140);
        CHECK(static_cast<double>(big.component("read_sdpa")) ==
              doctest::Approx(static_cast<double>(r.component("read_sdpa")) * big_tokens /
                              small_tokens)
                  .epsilon(1e-12));
    }
    SUBCASE("disabled reads zero their terms") {
        ModelConfig no_reads = cfg;
        no_reads.reads_enabled = false;
        FlopReport nr = flops_timestep(no_reads, 5, 7);
        CHECK(nr.component("read_sdpa") == 0);
        CHECK(nr.component("read_glimpse_proj") == 0);
        CHECK(nr.component("write_sdpa") == r.component("write_sdpa"));
    }
    SUBCASE("symmetric variant pays for canvas projections") {
        ModelConfig sym = cfg;
        sym.canvas_qkvo = true;
        FlopReport sr = flops_timestep(sym, 5, 7);
        const std::int64_t n_can = cfg.registers_can + 35;
        CHECK(sr.component("read_canvas_proj") ==
              cfg.n_reads() * 2 * (2 * n_can * cfg.d_can * cfg.d_can));
        CHECK(sr.per_timestep > r.per_timestep);
    }
    SUBCASE("rollout cost is linear in the horizon") {
        FlopReport r5 = flops_rollout(cfg, 5, 7, 5);
        CHECK(r5.timesteps == 5);
        CHECK(r5.per_timestep == r.per_timestep);
        CHECK(r5.per_rollout == 5 * r.per_timestep);
        CHECK_THROWS_AS(flops_rollout(cfg, 5, 7, 0), std::invalid_argument);
    }
    SUBCASE("csv rendering lists every component") {
        const std::string csv = flop_report_csv(r);
        CHECK(csv.find("component,flops\n") == 0);
        for (const auto& c : r.components)
            CHECK(csv.find(c.name + "," + std::to_string(c.flops)) != std::string::npos);
    }
}

TEST_CASE("analytic model matches the instrumented forward pass") {
    auto check_exact = [](const ModelConfig& cfg, std::int64_t h, std::int64_t w) {
        const std::int64_t analytic = flops_timestep(cfg, h, w).per_timestep;
        const std::int64_t measured = instrumented_timestep_flops(cfg, h, w);
        CHECK(analytic == measured);
    };
    check_exact(ModelConfig::micro_gradcheck(), ModelConfig::micro_gradcheck().canvas_h,
                ModelConfig::micro_gradcheck().canvas_w);
    check_exact(wide_micro(), 5, 7);
    check_exact(wide_micro(), 9, 9);

    ModelConfig sym = wide_micro();
    sym.canvas_qkvo = true;
    check_exact(sym, 5, 7);

    ModelConfig no_reads = wide_micro();
    no_reads.reads_enabled = false;
    check_exact(no_reads, 5, 7);

    ModelConfig no_vpe = wide_micro();
    no_vpe.vpe_enabled = false;
    check_exact(no_vpe, 5, 7);
}

TEST_CASE("passive encoder cost") {
    PassiveVitDims dims;
    dims.d = 64;
    dims.depth = 3;

    SUBCASE("matches the hand formula") {
        const std::int64_t in = 32, patch = 8;
        const std::int64_t n_patches = (in / patch) * (in / patch);
        const std::int64_t n = n_patches + 1;
        const std::int64_t d = dims.d;
        const std::int64_t want = 2 * n_patches * (patch * patch * 3) * d +
                                  dims.depth * (8 * n * d * d + 4 * n * n * d + 16 * n * d * d);
        CHECK(flops_passive_vit(dims, in, patch) == want);
    }
    SUBCASE("attention grows quadratically in token count, the rest linearly") {
        auto split = [&](std::int64_t in) {
            const std::int64_t n_patches = (in / 8) * (in / 8);
            const std::int64_t n = n_patches + 1;
            const std::int64_t d = dims.d;
            const std::int64_t sdpa = dims.depth * 4 * n * n * d;
            const std::int64_t linear = 2 * n_patches * (8 * 8 * 3) * d +
                                        dims.depth * (8 * n * d * d + 16 * n * d * d);
            return std::pair<std::int64_t, std::int64_t>{sdpa, linear};
        };
        const auto [sdpa1, linear1] = split(32);
        const auto [sdpa2, linear2] = split(64);
        CHECK(flops_passive_vit(dims, 32, 8) == sdpa1 + linear1);
        CHECK(flops_passive_vit(dims, 64, 8) == sdpa2 + linear2);
        // 4x the tokens: the attention term gains an extra factor ~4 over
        // the projection terms (exactly 16x up to the class token)
        CHECK(sdpa2 > 14 * sdpa1);
        CHECK(sdpa2 < 16 * sdpa1);
        CHECK(linear2 < 5 * linear1);
    }
    SUBCASE("instrumented forward agrees exactly") {
        CHECK(instrumented_passive_vit_flops(dims, 32, 8) == flops_passive_vit(dims, 32, 8));
        CHECK(instrumented_passive_vit_flops(dims, 24, 8) == flops_passive_vit(dims, 24, 8));
    }
    SUBCASE("patch size must divide the input") {
        CHECK_THROWS_AS(flops_passive_vit(dims, 30, 8), std::invalid_argument);
        CHECK_THROWS_AS(instrumented_passive_vit_flops(dims, 30, 8), std::invalid_argument);
    }
}
