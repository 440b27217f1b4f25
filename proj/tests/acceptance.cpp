// Acceptance suite: one line per criterion, nonzero exit if any fails.
// Each criterion is self-contained and uses fixed seeds and pinned
// tolerances; nothing here adapts to the outcome of a run.

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdarg>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "canvit/checkpoint.hpp"
#include "canvit/distill.hpp"
#include "canvit/flops.hpp"
#include "canvit/geometry.hpp"
#include "canvit/io.hpp"
#include "canvit/model.hpp"
#include "canvit/policies.hpp"
#include "canvit/rollout.hpp"
#include "canvit/tensor.hpp"

namespace {

using namespace canvit;
namespace fs = std::filesystem;

struct Failure : std::runtime_error {
    using std::runtime_error::runtime_error;
};

std::string fmt(const char* f, ...) {
    char buf[512];
    va_list ap;
    va_start(ap, f);
    std::vsnprintf(buf, sizeof buf, f, ap);
    va_end(ap);
    return buf;
}

void expect(bool ok, const std::string& msg) {
    if (!ok) throw Failure(msg);
}

double rel_diff(double a, double b) {
    const double denom = std::max({std::fabs(a), std::fabs(b), 1e-300});
    return std::fabs(a - b) / denom;
}

double now_s() {
    using clock = std::chrono::steady_clock;
    return std::chrono::duration<double>(clock::now().time_since_epoch()).count();
}

fs::path scratch_dir() {
    fs::path p = fs::temp_directory_path() / "canvit_acceptance";
    fs::create_directories(p);
    return p;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    expect(static_cast<bool>(in), "cannot open " + p.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

Tensor rand_const(Rng& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
    std::int64_t n = 1;
    for (auto d : shape) n *= d;
    std::vector<double> v(static_cast<std::size_t>(n));
    for (double& x : v) x = rng.uniform(lo, hi);
    return Tensor::from_data(std::move(shape), std::move(v));
}

Tensor rand_param(Rng& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
    std::int64_t n = 1;
    for (auto d : shape) n *= d;
    std::vector<double> v(static_cast<std::size_t>(n));
    for (double& x : v) x = rng.uniform(lo, hi);
    return Tensor::param(std::move(shape), std::move(v));
}

Tensor rand_param_glimpse(const ModelConfig& cfg, Rng& rng) {
    return rand_param(rng, {cfg.glimpse_px, cfg.glimpse_px, 3}, 0.0, 1.0);
}

// ---- 1: cost ratio of a hypothetical canvas-side projection to one
//         canvas-attention call at the reference shape ----

void c01_projection_ratio() {
    const ModelConfig ref = ModelConfig::reference_b();
    expect(ref.d_can == 1024 && ref.n_glimpse_tokens() == 71,
           "reference config drifted from 1024-wide canvas / 71 glimpse tokens");
    const double r = ratio_canvas_projection(ref.d_can, ref.n_glimpse_tokens());
    expect(r >= 7.15 && r <= 7.27, fmt("ratio %.12f outside [7.15, 7.27]", r));
}

// ---- 2: read/write interaction pair cost at the reference shape, 64x64
//         canvas, with and without canvas-side projections ----

void c02_rw_pair_cost() {
    const ModelConfig ref = ModelConfig::reference_b();
    const double base = static_cast<double>(flops_rw_pair(ref, 64, 64, false));
    const double qkvo = static_cast<double>(flops_rw_pair(ref, 64, 64, true));
    expect(rel_diff(base, 2.838364160e9) <= 0.10,
           fmt("asymmetric pair %.6e not within 10%% of 2.838e9", base));
    expect(rel_diff(qkvo, 3.7332320256e10) <= 0.10,
           fmt("symmetric pair %.6e not within 10%% of 3.733e10", qkvo));
}

// ---- 3: analytic cost model vs instrumented forward pass ----

void c03_analytic_vs_instrumented() {
    ModelConfig a = ModelConfig::micro_gradcheck();

    ModelConfig b;
    b.d_bb = 24;
    b.d_can = 16;
    b.depth = 4;
    b.heads_bb = 2;
    b.ca_heads = 4;
    b.registers_bb = 2;
    b.registers_can = 3;
    b.rw_stride = 2;
    b.patch_px = 4;
    b.glimpse_px = 8;
    b.d_teacher = 5;
    b.canvas_h = 5;
    b.canvas_w = 7;

    ModelConfig c;
    c.d_bb = 8;
    c.d_can = 12;
    c.depth = 8;
    c.heads_bb = 2;
    c.ca_heads = 3;
    c.registers_bb = 1;
    c.registers_can = 2;
    c.rw_stride = 2;
    c.patch_px = 2;
    c.glimpse_px = 4;
    c.d_teacher = 3;
    c.canvas_h = 2;
    c.canvas_w = 5;
    c.canvas_qkvo = true;

    int i = 0;
    for (const ModelConfig& cfg : {a, b, c}) {
        ++i;
        cfg.validate();
        const auto analytic = flops_timestep(cfg, cfg.canvas_h, cfg.canvas_w).per_timestep;
        const auto measured = instrumented_timestep_flops(cfg, cfg.canvas_h, cfg.canvas_w);
        const double rd = rel_diff(static_cast<double>(analytic), static_cast<double>(measured));
        expect(rd <= 0.01, fmt("config %d: analytic %lld vs measured %lld (rel %.3e)", i,
                               static_cast<long long>(analytic),
                               static_cast<long long>(measured), rd));
    }
}

// ---- 4: viewpoint embedding distance invariances ----

void c04_embedding_invariances() {
    const int kCases = 10000;
    const double tol = 1e-10;

    {
        Rng rng(41);
        for (int i = 0; i < kCases; ++i) {
            auto small = [&] {
                return Viewpoint{rng.uniform(-0.2, 0.2), rng.uniform(-0.2, 0.2),
                                 rng.uniform(0.05, 0.2)};
            };
            Viewpoint q1 = small(), q2 = small();
            const double c = rng.uniform(0.1, 2.5);
            Viewpoint c1{c * q1.x, c * q1.y, c * q1.s}, c2{c * q2.x, c * q2.y, c * q2.s};
            expect(viewpoint_is_valid(c1) && viewpoint_is_valid(c2), "scaled window left the scene");
            const double rd = rel_diff(embedding_distance(q1, q2), embedding_distance(c1, c2));
            expect(rd <= tol, fmt("scale invariance broke at case %d (rel %.3e)", i, rd));
        }
    }
    {
        Rng rng(42);
        for (int i = 0; i < kCases; ++i) {
            const double s = rng.uniform(0.05, 0.3);
            Viewpoint q1{rng.uniform(-0.3, 0.3), rng.uniform(-0.3, 0.3), s};
            Viewpoint q2{rng.uniform(-0.3, 0.3), rng.uniform(-0.3, 0.3), s};
            const double dx = rng.uniform(-0.3, 0.3), dy = rng.uniform(-0.3, 0.3);
            Viewpoint t1{q1.x + dx, q1.y + dy, s}, t2{q2.x + dx, q2.y + dy, s};
            expect(viewpoint_is_valid(t1) && viewpoint_is_valid(t2),
                   "translated window left the scene");
            const double rd = rel_diff(embedding_distance(q1, q2), embedding_distance(t1, t2));
            expect(rd <= tol, fmt("translation invariance broke at case %d (rel %.3e)", i, rd));
        }
    }
    {
        Rng rng(43);
        for (int i = 0; i < kCases; ++i) {
            auto in_disk = [&] {
                const double s = rng.uniform(0.05, 0.6);
                const double r = rng.uniform(0.0, (1.0 - s) * (1.0 - 1e-6));
                const double a = rng.uniform(0.0, 2.0 * M_PI);
                return Viewpoint{r * std::cos(a), r * std::sin(a), s};
            };
            Viewpoint q1 = in_disk(), q2 = in_disk();
            const double th = rng.uniform(0.0, 2.0 * M_PI);
            const double det = (i % 2 == 0) ? 1.0 : -1.0;
            const double m[4] = {std::cos(th), -det * std::sin(th), std::sin(th),
                                 det * std::cos(th)};
            auto rot = [&](const Viewpoint& v) {
                return Viewpoint{m[0] * v.x + m[1] * v.y, m[2] * v.x + m[3] * v.y, v.s};
            };
            Viewpoint r1 = rot(q1), r2 = rot(q2);
            expect(viewpoint_is_valid(r1) && viewpoint_is_valid(r2),
                   "rotated window left the scene");
            const double rd = rel_diff(embedding_distance(q1, q2), embedding_distance(r1, r2));
            expect(rd <= tol, fmt("rotation/reflection invariance broke at case %d (rel %.3e)",
                                  i, rd));
        }
    }
    {
        Rng rng(44);
        auto sample_valid = [&] {
            const double s = rng.uniform(0.05, 1.0);
            return Viewpoint{rng.uniform(-(1.0 - s), 1.0 - s), rng.uniform(-(1.0 - s), 1.0 - s),
                             s};
        };
        for (int i = 0; i < kCases; ++i) {
            Viewpoint q1 = sample_valid(), q2 = sample_valid();
            const double lhs = embedding_distance(q1, q2);
            const double t0 = q1.x / q1.s - q2.x / q2.s;
            const double t1 = q1.y / q1.s - q2.y / q2.s;
            const double t2 = std::log(q1.s) - std::log(q2.s);
            const double rhs = std::sqrt(t0 * t0 + t1 * t1 + t2 * t2);
            expect(rel_diff(lhs, rhs) <= tol,
                   fmt("closed-form identity broke at case %d", i));
        }
    }
}

// ---- 5: viewpoint policy distributions ----

void c05_policy_distributions() {
    // Scale marginal: p(s) proportional to (1 - s) on [s_min, 1], checked by
    // a one-sample Kolmogorov-Smirnov test at significance 0.01.
    {
        const int n = 1000000;
        const double s_min = kDefaultMinScale;
        Rng rng(51);
        std::vector<double> s(n);
        for (int i = 0; i < n; ++i) s[i] = sample_iid_viewpoint(rng, s_min).s;
        std::sort(s.begin(), s.end());
        const double norm = (1.0 - s_min) * (1.0 - s_min);
        double d_stat = 0.0;
        for (int i = 0; i < n; ++i) {
            const double f = 1.0 - (1.0 - s[i]) * (1.0 - s[i]) / norm;
            d_stat = std::max(d_stat, std::fabs(f - static_cast<double>(i) / n));
            d_stat = std::max(d_stat, std::fabs(f - static_cast<double>(i + 1) / n));
        }
        const double crit = 1.6276 / std::sqrt(static_cast<double>(n));
        expect(d_stat < crit, fmt("KS statistic %.6f >= critical %.6f", d_stat, crit));
        expect(s.front() >= s_min && s.back() <= 1.0, "scale sample left its support");
    }
    // Rollout length: K times a geometric chunk count; mean K / p_stop.
    {
        const int n = 1000000;
        Rng rng(52);
        double sum = 0.0;
        std::int64_t lo = 1 << 30, hi = 0;
        for (int i = 0; i < n; ++i) {
            const std::int64_t len = sample_rollout_length(rng, 2, 0.5);
            sum += static_cast<double>(len);
            lo = std::min(lo, len);
            hi = std::max(hi, len);
        }
        const double mean = sum / n;
        expect(std::fabs(mean - 4.0) <= 0.02, fmt("mean length %.4f outside 4.0 +- 0.02", mean));
        expect(lo == 2, fmt("shortest length %lld, want 2", static_cast<long long>(lo)));
        expect(hi > 2, "length distribution degenerate at 2");
    }
    // Coarse-to-fine with budget 21 covers quadtree levels 0..2 exactly once
    // each; fine-to-coarse is its reversal.
    {
        auto key = [](const Viewpoint& v) { return std::array<double, 3>{v.x, v.y, v.s}; };
        auto level_set = [&](std::vector<Viewpoint> vs) {
            std::vector<std::array<double, 3>> k(vs.size());
            std::transform(vs.begin(), vs.end(), k.begin(), key);
            std::sort(k.begin(), k.end());
            return k;
        };
        Rng rng(53);
        const std::vector<Viewpoint> seq = c2f_sequence(rng, 21);
        expect(seq.size() == 21, "coarse-to-fine budget not honored");
        expect(seq[0].x == 0.0 && seq[0].y == 0.0 && seq[0].s == 1.0,
               "first coarse-to-fine glimpse is not the full scene");
        const auto l1 = level_set({seq.begin() + 1, seq.begin() + 5});
        const auto l2 = level_set({seq.begin() + 5, seq.end()});
        expect(l1 == level_set(quadtree_level(1)), "glimpses 1-4 are not the 4 level-1 tiles");
        expect(l2 == level_set(quadtree_level(2)), "glimpses 5-20 are not the 16 level-2 tiles");

        Rng rng_a(54), rng_b(54);
        std::vector<Viewpoint> fwd = c2f_sequence(rng_a, 21);
        const std::vector<Viewpoint> rev = f2c_sequence(rng_b, 21);
        std::reverse(fwd.begin(), fwd.end());
        for (std::size_t i = 0; i < fwd.size(); ++i)
            expect(key(fwd[i]) == key(rev[i]),
                   fmt("fine-to-coarse is not the reversed schedule at step %zu", i));
    }
}

// ---- 6: finite-difference gradients, primitives and full model ----

void c06_gradients() {
    const double t0 = now_s();
    int n_ops = 0;
    auto check = [&](const char* name, const std::function<Tensor()>& loss,
                     std::vector<std::pair<std::string, Tensor>> params) {
        const GradCheckReport rep = grad_check(loss, params);
        expect(rep.pass, fmt("%s: max rel err %.3e at %s", name, rep.max_rel_err,
                             rep.worst_param.c_str()));
        ++n_ops;
    };
    // Losses are weighted sums with weights fixed before the check so every
    // finite-difference evaluation sees the same function.
    Rng rng(61);
    auto weight = [&](Shape shape) { return rand_const(rng, std::move(shape)); };

    {
        Tensor x = rand_param(rng, {3, 4}), y = rand_param(rng, {3, 4});
        Tensor w = weight({3, 4});
        check("add", [&] { return sum_all(mul(add(x, y), w)); }, {{"x", x}, {"y", y}});
        check("sub", [&] { return sum_all(mul(sub(x, y), w)); }, {{"x", x}, {"y", y}});
        check("mul", [&] { return sum_all(mul(mul(x, y), w)); }, {{"x", x}, {"y", y}});
        check("scale", [&] { return sum_all(mul(scale(x, 1.7), w)); }, {{"x", x}});
        check("gelu", [&] { return sum_all(mul(gelu(x), w)); }, {{"x", x}});
        check("sum_all", [&] { return sum_all(x); }, {{"x", x}});
        Tensor wr = weight({3}), wc = weight({4});
        check("mean_axis", [&] { return sum_all(mul(mean_axis(x, 1), wr)); }, {{"x", x}});
        check("sum_axis", [&] { return sum_all(mul(sum_axis(x, 0), wc)); }, {{"x", x}});
        Tensor wt = weight({4, 3});
        check("reshape", [&] { return sum_all(mul(reshape(x, {4, 3}), wt)); }, {{"x", x}});
        check("transpose", [&] { return sum_all(mul(transpose(x, 0, 1), wt)); }, {{"x", x}});
    }
    {
        Tensor x = rand_param(rng, {4, 3}), w = rand_param(rng, {3, 5});
        Tensor bias = rand_param(rng, {5});
        Tensor wo = weight({4, 5});
        check("matmul", [&] { return sum_all(mul(matmul(x, w), wo)); }, {{"x", x}, {"w", w}});
        check("linear", [&] { return sum_all(mul(linear(x, w, bias), wo)); },
              {{"x", x}, {"w", w}, {"b", bias}});
    }
    {
        Tensor x = rand_param(rng, {4, 6});
        Tensor ws = weight({4, 3});
        check("slice", [&] { return sum_all(mul(slice(x, 1, 2, 3), ws)); }, {{"x", x}});
        Tensor a = rand_param(rng, {2, 3}), b = rand_param(rng, {2, 3});
        Tensor wcat = weight({4, 3});
        check("concat", [&] { return sum_all(mul(concat({a, b}, 0), wcat)); },
              {{"a", a}, {"b", b}});
        Tensor r = rand_param(rng, {1, 5});
        Tensor wb = weight({4, 5});
        check("broadcast_to", [&] { return sum_all(mul(broadcast_to(r, {4, 5}), wb)); },
              {{"r", r}});
        Tensor g = rand_param(rng, {5, 3});
        Tensor wg = weight({4, 3});
        check("gather_rows", [&] { return sum_all(mul(gather_rows(g, {4, 0, 2, 2}), wg)); },
              {{"g", g}});
    }
    {
        Tensor x = rand_param(rng, {3, 6}), gain = rand_param(rng, {6}, 0.5, 1.5);
        Tensor bias = rand_param(rng, {6});
        Tensor w = weight({3, 6});
        check("layer_norm", [&] { return sum_all(mul(layer_norm(x, gain, bias), w)); },
              {{"x", x}, {"g", gain}, {"b", bias}});
    }
    {
        Tensor q = rand_param(rng, {2, 3, 4}), k = rand_param(rng, {2, 5, 4});
        Tensor v = rand_param(rng, {2, 5, 4});
        Tensor w = weight({2, 3, 4});
        check("softmax_sdpa", [&] { return sum_all(mul(softmax_sdpa(q, k, v), w)); },
              {{"q", q}, {"k", k}, {"v", v}});
    }
    {
        Tensor x = rand_param(rng, {2, 5, 8});
        std::vector<double> cs(5 * 4), sn(5 * 4);
        for (std::size_t i = 0; i < cs.size(); ++i) {
            const double a = rng.uniform(0.0, 2.0 * M_PI);
            cs[i] = std::cos(a);
            sn[i] = std::sin(a);
        }
        Tensor cos_tab = Tensor::from_data({5, 4}, cs), sin_tab = Tensor::from_data({5, 4}, sn);
        Tensor w = weight({2, 5, 8});
        check("apply_rope", [&] { return sum_all(mul(apply_rope(x, cos_tab, sin_tab), w)); },
              {{"x", x}});
    }
    {
        Tensor img = rand_param(rng, {6, 6, 3}, 0.0, 1.0);
        const std::vector<double> py{1.3, 1.3, 3.6, 3.6}, px{0.7, 4.2, 0.7, 4.2};
        Tensor w = weight({2, 2, 3});
        check("bilinear_sample",
              [&] { return sum_all(mul(bilinear_sample(img, py, px, 2, 2), w)); },
              {{"img", img}});
    }
    expect(n_ops == 20, fmt("expected 20 primitive checks, ran %d", n_ops));

    const GradCheckReport rep = model_grad_check(ModelConfig::micro_gradcheck(), 5, 1e-4);
    expect(rep.pass, fmt("full model: max rel err %.3e at %s over %lld entries",
                         rep.max_rel_err, rep.worst_param.c_str(),
                         static_cast<long long>(rep.n_checked)));
    const double elapsed = now_s() - t0;
    expect(elapsed < 300.0, fmt("gradient suite took %.1f s, budget 300 s", elapsed));
}

// ---- 7: truncated backprop cuts gradients exactly at chunk boundaries ----

void c07_truncation_boundary() {
    const ModelConfig cfg = ModelConfig::micro_gradcheck();
    const ModelParams p = make_model(cfg, 71);
    const RopeTable rope_can = canvas_rope_table(cfg, cfg.canvas_h, cfg.canvas_w);
    Rng rng(72);
    Tensor g0 = rand_param_glimpse(cfg, rng);
    Tensor g1 = rand_param_glimpse(cfg, rng);
    const Viewpoint v0{0, 0, 1}, v1{0.25, -0.25, 0.5};

    {
        Tape tape;
        const ModelState s0 = init_state(p, cfg.canvas_h, cfg.canvas_w);
        const StepResult r0 = model_step(p, s0, g0, v0, rope_can);
        const StepResult r1 = model_step(p, r0.state, g1, v1, rope_can);
        tape.backward(sum_all(mul(r1.z_patches, r1.z_patches)));
        expect(g0.has_grad(), "first glimpse missing a gradient inside one chunk");
        double norm = 0.0;
        for (double x : g0.grad()) norm += x * x;
        expect(norm > 0.0, "second-step loss did not reach the first glimpse within a chunk");
    }
    g0.zero_grad();
    g1.zero_grad();
    ModelState carried;
    {
        Tape tape;
        const ModelState s0 = init_state(p, cfg.canvas_h, cfg.canvas_w);
        const StepResult r0 = model_step(p, s0, g0, v0, rope_can);
        carried = detach_state(r0.state);
        tape.backward(sum_all(mul(r0.z_patches, r0.z_patches)));
    }
    g0.zero_grad();
    {
        Tape tape;
        const StepResult r1 = model_step(p, carried, g1, v1, rope_can);
        tape.backward(sum_all(mul(r1.z_patches, r1.z_patches)));
    }
    for (double x : g0.grad())
        expect(x == 0.0, "gradient leaked across the detached chunk boundary");
    double norm = 0.0;
    for (double x : g1.grad()) norm += x * x;
    expect(norm > 0.0, "live chunk lost its own gradient");
}

// ---- 8: canvas attention parameter asymmetry; canvas updates are the
//         running sum of write residuals ----

void c08_canvas_asymmetry() {
    const ModelConfig cfg = ModelConfig::micro_gradcheck();
    const ModelParams p = make_model(cfg, 81);
    expect(static_cast<std::int64_t>(p.reads.size()) == cfg.n_reads() &&
               static_cast<std::int64_t>(p.writes.size()) == cfg.n_writes(),
           "read/write block counts drifted from the schedule");

    const Shape cross{cfg.d_bb, cfg.d_can};
    const Shape back{cfg.d_can, cfg.d_bb};
    for (const CanvasReadParams& r : p.reads) {
        expect(r.q_map.defined() && r.q_map.shape() == cross,
               "read query map is not d_bb x d_can");
        expect(r.o_map.defined() && r.o_map.shape() == back,
               "read output map is not d_can x d_bb");
        expect(!r.k_map.defined() && !r.v_map.defined(),
               "asymmetric read carries canvas-side key/value projections");
    }
    for (const CanvasWriteParams& w : p.writes) {
        expect(w.k_map.defined() && w.k_map.shape() == cross,
               "write key map is not d_bb x d_can");
        expect(w.v_map.defined() && w.v_map.shape() == cross,
               "write value map is not d_bb x d_can");
        expect(!w.q_map.defined() && !w.o_map.defined(),
               "asymmetric write carries canvas-side query/output projections");
    }
    const Shape square{cfg.d_can, cfg.d_can};
    for (const auto& [name, t] : p.trainable())
        expect(!(t.shape() == square),
               "base variant holds a canvas-side square projection: " + name);

    ModelConfig sym = cfg;
    sym.canvas_qkvo = true;
    const ModelParams ps = make_model(sym, 81);
    for (const CanvasReadParams& r : ps.reads)
        expect(r.k_map.defined() && r.v_map.defined() && r.k_map.shape() == square &&
                   r.v_map.shape() == square,
               "symmetric variant lost its canvas-side read projections");
    for (const CanvasWriteParams& w : ps.writes)
        expect(w.q_map.defined() && w.o_map.defined() && w.q_map.shape() == square &&
                   w.o_map.shape() == square,
               "symmetric variant lost its canvas-side write projections");

    // Residual bookkeeping: over several steps the canvas equals the initial
    // canvas plus every write residual, added in order, bit for bit.
    const RopeTable rope_can = canvas_rope_table(cfg, cfg.canvas_h, cfg.canvas_w);
    Rng rng(82);
    ModelState st = init_state(p, cfg.canvas_h, cfg.canvas_w);
    std::vector<double> want_regs(st.canvas_registers.value().begin(),
                                  st.canvas_registers.value().end());
    std::vector<double> want_cells(st.canvas_patches.value().begin(),
                                   st.canvas_patches.value().end());
    const std::size_t reg_n = want_regs.size();
    for (int t = 0; t < 3; ++t) {
        Tensor g = rand_const(rng, {cfg.glimpse_px, cfg.glimpse_px, 3}, 0.0, 1.0);
        const Viewpoint v = sample_iid_viewpoint(rng);
        const StepResult r = model_step(p, st, g, v, rope_can);
        expect(r.write_residuals.size() == p.writes.size(),
               "one residual per write block is missing");
        for (const Tensor& res : r.write_residuals) {
            const auto vals = res.value();
            expect(vals.size() == reg_n + want_cells.size(), "residual rows drifted");
            for (std::size_t i = 0; i < reg_n; ++i) want_regs[i] += vals[i];
            for (std::size_t i = 0; i < want_cells.size(); ++i)
                want_cells[i] += vals[reg_n + i];
        }
        const auto regs = r.state.canvas_registers.value();
        const auto cells = r.state.canvas_patches.value();
        for (std::size_t i = 0; i < reg_n; ++i)
            expect(regs[i] == want_regs[i],
                   fmt("register canvas row diverged from the residual sum at step %d", t));
        for (std::size_t i = 0; i < want_cells.size(); ++i)
            expect(cells[i] == want_cells[i],
                   fmt("canvas cell diverged from the residual sum at step %d", t));
        st = r.state;
    }
}

// ---- 9: a model trained on an 8x8 canvas rolls out on 4x4 and 16x16 ----

void c09_cross_grid_rollouts() {
    const std::vector<Scene> scenes = generate_scenes(64, 64, 31);
    ModelConfig cfg;  // training grid 8x8
    cfg.validate();
    ModelParams params = make_model(cfg, 9);
    const SyntheticTeacher teacher = make_teacher(cfg.canvas_h, cfg.canvas_w, cfg.d_teacher, 7);
    TrainConfig tc;
    tc.steps = 40;
    tc.batch = 4;
    tc.holdout = 16;
    tc.eval_t = 4;
    tc.seed = 9;
    const TrainResult tr = micro_pretrain(scenes, params, teacher, tc);
    expect(std::isfinite(tr.final_eval.loss_total), "training diverged");

    for (std::int64_t g : {std::int64_t{4}, std::int64_t{16}}) {
        RolloutOptions opt;
        opt.policy = PolicyKind::RIID;
        opt.steps = 6;
        opt.canvas_h = g;
        opt.canvas_w = g;
        opt.seed = 3;
        opt.keep_decoded = true;
        opt.keep_canvas = true;
        const RolloutTrace trace = run_rollout(params, scenes[0], opt);
        expect(trace.h == g && trace.w == g, "rollout grid was not honored");
        expect(trace.steps.size() == 6, "rollout step count was not honored");
        expect(!trace.has_loss, "losses reported without a teacher");
        const Shape zshape{g * g, cfg.d_teacher};
        const Shape cshape{g * g, cfg.d_can};
        for (const RolloutStep& s : trace.steps) {
            expect(std::isnan(s.loss_patch) && std::isnan(s.loss_cls),
                   "teacher-free rollout fabricated losses");
            expect(s.z_patches.shape() == zshape, fmt("decoded grid shape wrong at %lld^2",
                                                      static_cast<long long>(g)));
            for (double x : s.z_patches.value())
                expect(std::isfinite(x), "decoded features went non-finite off-grid");
            expect(s.canvas.shape() == cshape, "canvas snapshot shape wrong");
            for (double x : s.canvas.value())
                expect(std::isfinite(x), "canvas went non-finite off-grid");
        }
        const auto before = trace.initial_canvas.value();
        const auto after = trace.steps.back().canvas.value();
        bool moved = false;
        for (std::size_t i = 0; i < before.size() && !moved; ++i)
            moved = before[i] != after[i];
        expect(moved, fmt("canvas never changed on the %lldx%lld grid",
                          static_cast<long long>(g), static_cast<long long>(g)));
    }

    RolloutOptions native;
    native.policy = PolicyKind::C2F;
    native.steps = 5;
    native.seed = 4;
    const RolloutTrace at_home = run_rollout(params, scenes[0], native, &teacher, &tr.stats);
    expect(at_home.has_loss, "native-grid rollout lost its teacher");
    for (const RolloutStep& s : at_home.steps)
        expect(std::isfinite(s.loss_patch) && std::isfinite(s.loss_cls) && s.loss_patch >= 0.0 &&
                   s.loss_cls >= 0.0,
               "native-grid losses are not finite non-negative");
}

// ---- 10: micro-distillation learns, and removing reads hurts ----

void c10_micro_distillation() {
    const double t0 = now_s();
    const std::vector<Scene> scenes = generate_scenes(256, 64, 1);
    expect(scenes.size() >= 256 && scenes[0].side == 64, "dataset fell short of 256 scenes");

    ModelConfig base_cfg;  // 8x8 canvas, 32x32 glimpses
    base_cfg.validate();
    ModelConfig nr_cfg = base_cfg;
    nr_cfg.reads_enabled = false;
    const SyntheticTeacher teacher =
        make_teacher(base_cfg.canvas_h, base_cfg.canvas_w, base_cfg.d_teacher, 7);

    std::string detail;
    for (const std::uint64_t seed : {std::uint64_t{1}, std::uint64_t{2}, std::uint64_t{3}}) {
        TrainConfig tc;
        tc.steps = 400;
        tc.batch = 8;
        tc.lr = 3e-3;
        tc.k = 2;
        tc.p_stop = 0.25;
        tc.holdout = 32;
        tc.eval_t = 16;
        tc.seed = seed;

        ModelParams base_params = make_model(base_cfg, seed);
        const TrainResult base = micro_pretrain(scenes, base_params, teacher, tc);
        ModelParams nr_params = make_model(nr_cfg, seed);
        const TrainResult nr = micro_pretrain(scenes, nr_params, teacher, tc);

        if (seed == 1) {
            expect(base.final_eval.loss_total < 0.5 * base.initial_eval.loss_total,
                   fmt("held-out loss %.3f did not halve from %.3f",
                       base.final_eval.loss_total, base.initial_eval.loss_total));
        }
        expect(nr.final_eval.loss_patch > base.final_eval.loss_patch,
               fmt("seed %llu: dense loss without reads %.4f is not above baseline %.4f",
                   static_cast<unsigned long long>(seed), nr.final_eval.loss_patch,
                   base.final_eval.loss_patch));
        detail += fmt(" s%llu %.3f<%.3f", static_cast<unsigned long long>(seed),
                      base.final_eval.loss_patch, nr.final_eval.loss_patch);
    }
    const double elapsed = now_s() - t0;
    expect(elapsed < 1800.0, fmt("distillation took %.0f s, budget 1800 s", elapsed));
    std::printf("        dense held-out loss, with reads < without:%s (%.0f s)\n",
                detail.c_str(), elapsed);
}

// ---- 11: training reruns and checkpoint round-trips are byte-identical ----

void c11_reproducibility() {
    const std::vector<Scene> scenes = generate_scenes(12, 32, 4);
    const ModelConfig cfg = ModelConfig::micro_gradcheck();
    const SyntheticTeacher teacher = make_teacher(cfg.canvas_h, cfg.canvas_w, cfg.d_teacher, 11);
    TrainConfig tc;
    tc.steps = 6;
    tc.batch = 2;
    tc.k = 2;
    tc.p_stop = 1.0;
    tc.lr = 1e-3;
    tc.holdout = 4;
    tc.eval_t = 2;
    tc.seed = 3;

    const fs::path dir = scratch_dir();
    const std::vector<std::string> header{"step",          "loss_patch_riid", "loss_patch_fiid",
                                          "loss_cls_riid", "loss_cls_fiid",   "grad_norm",
                                          "lr"};
    auto run = [&](const fs::path& csv, ModelParams& params) {
        const TrainResult r = micro_pretrain(scenes, params, teacher, tc);
        std::vector<std::vector<std::string>> rows;
        for (const StepMetrics& m : r.metrics)
            rows.push_back({std::to_string(m.step), format_double(m.loss_patch_riid),
                            format_double(m.loss_patch_fiid), format_double(m.loss_cls_riid),
                            format_double(m.loss_cls_fiid), format_double(m.grad_norm),
                            format_double(m.lr)});
        write_csv(csv.string(), header, rows);
        return r;
    };
    ModelParams p1 = make_model(cfg, 7);
    ModelParams p2 = make_model(cfg, 7);
    const TrainResult r1 = run(dir / "metrics_a.csv", p1);
    const TrainResult r2 = run(dir / "metrics_b.csv", p2);
    expect(!r1.metrics.empty(), "training produced no metrics");
    const std::string csv_a = slurp(dir / "metrics_a.csv");
    expect(csv_a == slurp(dir / "metrics_b.csv"), "two identical runs wrote different metrics");
    expect(csv_a.rfind("step,loss_patch_riid,", 0) == 0, "metrics header drifted");
    expect(r1.final_eval.loss_total == r2.final_eval.loss_total,
           "two identical runs evaluated differently");

    ModelBundle bundle;
    bundle.params = std::move(p1);
    bundle.has_teacher = true;
    bundle.teacher = teacher;
    bundle.stats = r1.stats;
    const fs::path ck1 = dir / "model_a.cvit", ck2 = dir / "model_b.cvit";
    save_model(bundle, ck1.string());
    ModelBundle reloaded = load_model(ck1.string());
    save_model(reloaded, ck2.string());
    const std::string b1 = slurp(ck1);
    expect(!b1.empty() && b1 == slurp(ck2), "checkpoint round-trip is not byte-identical");
}

}  // namespace

int main() {
    struct Item {
        const char* label;
        void (*fn)();
    };
    const Item items[] = {
        {"canvas projection to attention cost ratio at the reference shape", c01_projection_ratio},
        {"read/write pair cost at the reference shape", c02_rw_pair_cost},
        {"analytic cost model matches the instrumented forward pass", c03_analytic_vs_instrumented},
        {"viewpoint embedding invariances", c04_embedding_invariances},
        {"viewpoint policy distributions", c05_policy_distributions},
        {"finite-difference gradients for primitives and the full model", c06_gradients},
        {"gradient truncation at chunk boundaries", c07_truncation_boundary},
        {"canvas attention asymmetry and residual-sum updates", c08_canvas_asymmetry},
        {"cross-grid rollouts from an 8x8-trained model", c09_cross_grid_rollouts},
        {"micro-distillation halves held-out loss; reads ablation hurts", c10_micro_distillation},
        {"deterministic reruns and byte-identical checkpoints", c11_reproducibility},
    };
    int failures = 0;
    int idx = 0;
    for (const Item& it : items) {
        ++idx;
        try {
            it.fn();
            std::printf("[%2d/11] PASS  %s\n", idx, it.label);
        } catch (const std::exception& e) {
            ++failures;
            std::printf("[%2d/11] FAIL  %s: %s\n", idx, it.label, e.what());
        }
        std::fflush(stdout);
    }
    if (failures == 0)
        std::printf("acceptance: all %d criteria hold\n", idx);
    else
        std::printf("acceptance: %d of %d criteria failed\n", failures, idx);
    return failures == 0 ? 0 : 1;
}
