#include <cstdint>
#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include "canvit/checkpoint.hpp"
#include "canvit/common.hpp"
#include "canvit/distill.hpp"
#include "canvit/io.hpp"
#include "canvit/model.hpp"
#include "doctest.h"

using namespace canvit;

namespace {

std::string tmp_path(const char* name) {
    return std::string("/tmp/canvit_ck_test_") + name;
}

std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE(static_cast<bool>(in));
    return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

void spit(const std::string& path, const std::string& bytes) {
    std::ofstream out(path, std::ios::binary);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

CheckpointData sample_data() {
    CheckpointData ck;
    ck.config = {{"model.d_bb", "16"}, {"train.lr", "0.003"}};
    Rng rng(1);
    std::vector<double> a(6), b(4);
    for (double& x : a) x = rng.normal();
    for (double& x : b) x = rng.normal();
    ck.tensors.emplace_back("w.first", Tensor::from_data({2, 3}, a));
    ck.tensors.emplace_back("w.second", Tensor::from_data({4}, b));
    return ck;
}

bool tensors_bitwise_equal(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) return false;
    for (std::int64_t i = 0; i < a.numel(); ++i)
        if (a.value()[static_cast<std::size_t>(i)] != b.value()[static_cast<std::size_t>(i)])
            return false;
    return true;
}

}  // namespace

TEST_CASE("checkpoint container") {
    SUBCASE("round trip preserves config and tensor payloads") {
        CheckpointData ck = sample_data();
        const std::string path = tmp_path("rt.cvit");
        save_checkpoint(ck, path);
        CheckpointData back = load_checkpoint(path);
        REQUIRE(back.config.size() == 2);
        CHECK(back.config[0] == ck.config[0]);
        CHECK(back.config[1] == ck.config[1]);
        REQUIRE(back.tensors.size() == 2);
        CHECK(back.tensors[0].first == "w.first");
        CHECK(tensors_bitwise_equal(back.tensors[0].second, ck.tensors[0].second));
        CHECK(back.tensors[1].first == "w.second");
        CHECK(tensors_bitwise_equal(back.tensors[1].second, ck.tensors[1].second));
        std::remove(path.c_str());
    }
    SUBCASE("save, load, save is byte-identical") {
        const std::string p1 = tmp_path("a.cvit"), p2 = tmp_path("b.cvit");
        save_checkpoint(sample_data(), p1);
        save_checkpoint(load_checkpoint(p1), p2);
        CHECK(slurp(p1) == slurp(p2));
        std::remove(p1.c_str());
        std::remove(p2.c_str());
    }
    SUBCASE("bad magic, bad version, and truncation are rejected") {
        const std::string path = tmp_path("bad.cvit");
        spit(path, "NOPE");
        CHECK_THROWS_WITH_AS(load_checkpoint(path), doctest::Contains("bad magic"),
                             std::runtime_error);
        std::string v2 = "CVIT";
        const std::uint32_t version = 2;
        v2.append(reinterpret_cast<const char*>(&version), 4);
        spit(path, v2);
        CHECK_THROWS_WITH_AS(load_checkpoint(path),
                             doctest::Contains("unsupported checkpoint version 2"),
                             std::runtime_error);
        const std::string good = tmp_path("good.cvit");
        save_checkpoint(sample_data(), good);
        std::string bytes = slurp(good);
        spit(path, bytes.substr(0, bytes.size() - 7));
        CHECK_THROWS_AS(load_checkpoint(path), std::runtime_error);
        std::remove(path.c_str());
        std::remove(good.c_str());
        CHECK_THROWS_AS(load_checkpoint(tmp_path("missing.cvit")), std::runtime_error);
    }
}

TEST_CASE("config schema") {
    SUBCASE("model config survives the text round trip") {
        ModelConfig cfg = ModelConfig::micro_gradcheck();
        cfg.canvas_qkvo = true;
        cfg.rope_base = 250.0;
        RunConfig rc;
        apply_config(model_config_to_kv(cfg), rc);
        CHECK(rc.model.d_bb == cfg.d_bb);
        CHECK(rc.model.d_can == cfg.d_can);
        CHECK(rc.model.depth == cfg.depth);
        CHECK(rc.model.heads_bb == cfg.heads_bb);
        CHECK(rc.model.ca_heads == cfg.ca_heads);
        CHECK(rc.model.registers_bb == cfg.registers_bb);
        CHECK(rc.model.registers_can == cfg.registers_can);
        CHECK(rc.model.rw_stride == cfg.rw_stride);
        CHECK(rc.model.rope_base == cfg.rope_base);
        CHECK(rc.model.patch_px == cfg.patch_px);
        CHECK(rc.model.glimpse_px == cfg.glimpse_px);
        CHECK(rc.model.rff_sigma == cfg.rff_sigma);
        CHECK(rc.model.layerscale_init == cfg.layerscale_init);
        CHECK(rc.model.d_teacher == cfg.d_teacher);
        CHECK(rc.model.canvas_h == cfg.canvas_h);
        CHECK(rc.model.canvas_w == cfg.canvas_w);
        CHECK(rc.model.vpe_enabled == cfg.vpe_enabled);
        CHECK(rc.model.reads_enabled == cfg.reads_enabled);
        CHECK(rc.model.canvas_qkvo == cfg.canvas_qkvo);
    }
    SUBCASE("train and teacher keys are applied") {
        RunConfig rc;
        apply_config({{"train.lr", "0.01"},
                      {"train.k", "3"},
                      {"train.no_fiid", "true"},
                      {"train.second_riid", "true"},
                      {"teacher.seed", "99"}},
                     rc);
        CHECK(rc.train.lr == 0.01);
        CHECK(rc.train.k == 3);
        CHECK(rc.train.no_fiid);
        CHECK(rc.train.second_riid);
        CHECK(rc.teacher_seed == 99);
    }
    SUBCASE("unknown keys fail with a pointer at the documentation") {
        RunConfig rc;
        CHECK_THROWS_WITH_AS(apply_config({{"model.bogus", "1"}}, rc),
                             doctest::Contains("README"), std::runtime_error);
        CHECK_THROWS_WITH_AS(apply_config({{"optimizer.lr", "1"}}, rc),
                             doctest::Contains("unknown key"), std::runtime_error);
    }
    SUBCASE("typed values are validated") {
        RunConfig rc;
        CHECK_THROWS_AS(apply_config({{"model.d_bb", "abc"}}, rc), std::runtime_error);
        CHECK_THROWS_AS(apply_config({{"model.vpe_enabled", "maybe"}}, rc), std::runtime_error);
    }
}

TEST_CASE("model bundles") {
    ModelConfig cfg = ModelConfig::micro_gradcheck();

    SUBCASE("untrained bundle round-trips every parameter bitwise") {
        ModelBundle b;
        b.params = make_model(cfg, 21);
        const std::string path = tmp_path("plain.cvit");
        save_model(b, path);
        ModelBundle back = load_model(path);
        CHECK_FALSE(back.has_teacher);
        REQUIRE(back.params.named.size() == b.params.named.size());
        for (std::size_t i = 0; i < b.params.named.size(); ++i) {
            CHECK(back.params.named[i].first == b.params.named[i].first);
            CHECK(tensors_bitwise_equal(back.params.named[i].second, b.params.named[i].second));
        }
        CHECK(back.params.cfg.d_bb == cfg.d_bb);
        CHECK(back.params.cfg.canvas_h == cfg.canvas_h);
        REQUIRE(back.params.rff.n_features == b.params.rff.n_features);
        CHECK(back.params.rff.freq == b.params.rff.freq);
        std::remove(path.c_str());
    }
    SUBCASE("trained bundle restores teacher and stats") {
        ModelBundle b;
        b.params = make_model(cfg, 22);
        b.has_teacher = true;
        b.teacher = make_teacher(cfg.canvas_h, cfg.canvas_w, cfg.d_teacher, 23);
        auto scenes = generate_scenes(8, 16, 24);
        b.stats = compute_stats(b.teacher, scenes);
        const std::string path = tmp_path("trained.cvit");
        save_model(b, path);
        ModelBundle back = load_model(path);
        REQUIRE(back.has_teacher);
        CHECK(back.teacher.seed == b.teacher.seed);
        CHECK(back.teacher.grid_h == b.teacher.grid_h);
        CHECK(back.teacher.d_out == b.teacher.d_out);
        CHECK(back.teacher.w1 == b.teacher.w1);
        CHECK(back.teacher.w2 == b.teacher.w2);
        CHECK(tensors_bitwise_equal(back.stats.patch_mean, b.stats.patch_mean));
        CHECK(tensors_bitwise_equal(back.stats.patch_var, b.stats.patch_var));
        CHECK(tensors_bitwise_equal(back.stats.cls_mean, b.stats.cls_mean));
        CHECK(tensors_bitwise_equal(back.stats.cls_var, b.stats.cls_var));

        const std::string path2 = tmp_path("trained2.cvit");
        save_model(back, path2);
        CHECK(slurp(path) == slurp(path2));
        std::remove(path.c_str());
        std::remove(path2.c_str());
    }
    SUBCASE("shape drift between config and tensors is caught") {
        ModelBundle b;
        b.params = make_model(cfg, 25);
        const std::string path = tmp_path("drift.cvit");
        save_model(b, path);
        CheckpointData ck = load_checkpoint(path);
        for (auto& [k, v] : ck.config)
            if (k == "model.d_bb") v = "24";
        save_checkpoint(ck, path);
        CHECK_THROWS_WITH_AS(load_model(path), doctest::Contains("has shape"),
                             std::runtime_error);
        std::remove(path.c_str());
    }
    SUBCASE("missing and unexpected tensors are caught") {
        ModelBundle b;
        b.params = make_model(cfg, 26);
        const std::string path = tmp_path("broken.cvit");
        save_model(b, path);
        CheckpointData ck = load_checkpoint(path);
        CheckpointData dropped = ck;
        dropped.tensors.erase(dropped.tensors.begin());
        save_checkpoint(dropped, path);
        CHECK_THROWS_WITH_AS(load_model(path), doctest::Contains("missing model tensors"),
                             std::runtime_error);
        CheckpointData extra = ck;
        extra.tensors.emplace_back("rogue", Tensor::zeros({2}));
        save_checkpoint(extra, path);
        CHECK_THROWS_WITH_AS(load_model(path), doctest::Contains("unexpected tensor"),
                             std::runtime_error);
        std::remove(path.c_str());
    }
    SUBCASE("teacher metadata without stats is rejected") {
        ModelBundle b;
        b.params = make_model(cfg, 27);
        const std::string path = tmp_path("nostats.cvit");
        save_model(b, path);
        CheckpointData ck = load_checkpoint(path);
        ck.config.emplace_back("teacher.seed", "5");
        ck.config.emplace_back("teacher.grid_h", "3");
        ck.config.emplace_back("teacher.grid_w", "3");
        ck.config.emplace_back("teacher.d_out", "4");
        ck.config.emplace_back("teacher.hidden", "16");
        save_checkpoint(ck, path);
        CHECK_THROWS_WITH_AS(load_model(path), doctest::Contains("stats missing"),
                             std::runtime_error);
        std::remove(path.c_str());
    }
}
