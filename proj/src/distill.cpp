#include "canvit/distill.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace canvit {

SyntheticTeacher make_teacher(std::int64_t grid_h, std::int64_t grid_w, std::int64_t d_out,
                              std::uint64_t seed) {
    if (grid_h <= 0 || grid_w <= 0 || d_out <= 0)
        throw std::invalid_argument("make_teacher: bad dimensions");
    SyntheticTeacher t;
    t.grid_h = grid_h;
    t.grid_w = grid_w;
    t.d_out = d_out;
    t.seed = seed;
    Rng rng(seed);
    const std::int64_t n_stats = 6;  // mean rgb, gradient energy, |cx|, |cy|
    t.w1.resize(static_cast<std::size_t>(n_stats * t.hidden));
    t.b1.resize(static_cast<std::size_t>(t.hidden));
    t.w2.resize(static_cast<std::size_t>(t.hidden * d_out));
    t.b2.resize(static_cast<std::size_t>(d_out));
    const double s1 = 1.0 / std::sqrt(static_cast<double>(n_stats));
    const double s2 = 1.0 / std::sqrt(static_cast<double>(t.hidden));
    for (double& v : t.w1) v = rng.normal(0.0, s1);
    for (double& v : t.b1) v = rng.normal(0.0, 0.1);
    for (double& v : t.w2) v = rng.normal(0.0, s2);
    for (double& v : t.b2) v = rng.normal(0.0, 0.1);
    return t;
}

TeacherTargets SyntheticTeacher::targets(const Scene& scene) const {
    const std::int64_t s = scene.side;
    if (s < 2) throw std::invalid_argument("teacher: scene too small");
    const std::int64_t n = grid_h * grid_w;

    // local gradient energy per pixel, summed over channels; replicated
    // borders so mirrored scenes produce mirrored energies
    std::vector<double> energy(static_cast<std::size_t>(s * s), 0.0);
    for (std::int64_t r = 0; r < s; ++r)
        for (std::int64_t c = 0; c < s; ++c) {
            const std::int64_t rm = std::max<std::int64_t>(r - 1, 0), rp = std::min(r + 1, s - 1);
            const std::int64_t cm = std::max<std::int64_t>(c - 1, 0), cp = std::min(c + 1, s - 1);
            double e = 0.0;
            for (int ch = 0; ch < 3; ++ch) {
                const double dx = scene.at(r, cp, ch) - scene.at(r, cm, ch);
                const double dy = scene.at(rp, c, ch) - scene.at(rm, c, ch);
                e += dx * dx + dy * dy;
            }
            energy[static_cast<std::size_t>(r * s + c)] = e;
        }

    std::vector<double> zp(static_cast<std::size_t>(n * d_out), 0.0);
    std::vector<double> cls(static_cast<std::size_t>(d_out), 0.0);
    std::vector<double> stats(6), h(static_cast<std::size_t>(hidden));
    for (std::int64_t gi = 0; gi < grid_h; ++gi) {
        const std::int64_t r0 = gi * s / grid_h, r1 = (gi + 1) * s / grid_h;
        for (std::int64_t gj = 0; gj < grid_w; ++gj) {
            const std::int64_t c0 = gj * s / grid_w, c1 = (gj + 1) * s / grid_w;
            double mr = 0.0, mg = 0.0, mb = 0.0, me = 0.0;
            for (std::int64_t r = r0; r < r1; ++r)
                for (std::int64_t c = c0; c < c1; ++c) {
                    mr += scene.at(r, c, 0);
                    mg += scene.at(r, c, 1);
                    mb += scene.at(r, c, 2);
                    me += energy[static_cast<std::size_t>(r * s + c)];
                }
            const double inv = 1.0 / static_cast<double>((r1 - r0) * (c1 - c0));
            stats[0] = mr * inv;
            stats[1] = mg * inv;
            stats[2] = mb * inv;
            stats[3] = me * inv;
            // absolute cell-center coordinates keep the features
            // mirror-covariant
            stats[4] = std::abs((static_cast<double>(gj) + 0.5) / static_cast<double>(grid_w) * 2.0 - 1.0);
            stats[5] = std::abs((static_cast<double>(gi) + 0.5) / static_cast<double>(grid_h) * 2.0 - 1.0);

            for (std::int64_t k = 0; k < hidden; ++k) {
                double a = b1[static_cast<std::size_t>(k)];
                for (std::int64_t i = 0; i < 6; ++i)
                    a += stats[static_cast<std::size_t>(i)] * w1[static_cast<std::size_t>(i * hidden + k)];
                h[static_cast<std::size_t>(k)] = std::tanh(a);
            }
            double* out = zp.data() + (gi * grid_w + gj) * d_out;
            for (std::int64_t o = 0; o < d_out; ++o) {
                double a = b2[static_cast<std::size_t>(o)];
                for (std::int64_t k = 0; k < hidden; ++k)
                    a += h[static_cast<std::size_t>(k)] * w2[static_cast<std::size_t>(k * d_out + o)];
                out[o] = a;
                cls[static_cast<std::size_t>(o)] += a;
            }
        }
    }
    for (double& v : cls) v /= static_cast<double>(n);

    TeacherTargets out;
    out.h = grid_h;
    out.w = grid_w;
    out.d = d_out;
    out.z_patches = Tensor::from_data({n, d_out}, std::move(zp));
    out.z_cls = Tensor::from_data({1, d_out}, std::move(cls));
    return out;
}

StandardizationStats compute_stats(const SyntheticTeacher& teacher,
                                   const std::vector<Scene>& scenes) {
    if (scenes.empty()) throw std::invalid_argument("compute_stats: empty reference sample");
    const std::int64_t n = teacher.grid_h * teacher.grid_w, d = teacher.d_out;
    std::vector<double> pm(static_cast<std::size_t>(n * d), 0.0), pv(static_cast<std::size_t>(n * d), 0.0);
    std::vector<double> cm(static_cast<std::size_t>(d), 0.0), cv(static_cast<std::size_t>(d), 0.0);
    for (const Scene& s : scenes) {
        TeacherTargets t = teacher.targets(s);
        auto zp = t.z_patches.value();
        auto zc = t.z_cls.value();
        for (std::size_t i = 0; i < pm.size(); ++i) {
            pm[i] += zp[i];
            pv[i] += zp[i] * zp[i];
        }
        for (std::size_t i = 0; i < cm.size(); ++i) {
            cm[i] += zc[i];
            cv[i] += zc[i] * zc[i];
        }
    }
    const double inv = 1.0 / static_cast<double>(scenes.size());
    for (std::size_t i = 0; i < pm.size(); ++i) {
        pm[i] *= inv;
        pv[i] = std::max(pv[i] * inv - pm[i] * pm[i], 1e-8);
    }
    for (std::size_t i = 0; i < cm.size(); ++i) {
        cm[i] *= inv;
        cv[i] = std::max(cv[i] * inv - cm[i] * cm[i], 1e-8);
    }
    StandardizationStats st;
    st.patch_mean = Tensor::from_data({n, d}, std::move(pm));
    st.patch_var = Tensor::from_data({n, d}, std::move(pv));
    st.cls_mean = Tensor::from_data({1, d}, std::move(cm));
    st.cls_var = Tensor::from_data({1, d}, std::move(cv));
    return st;
}

namespace {

void check_stats_shape(const TeacherTargets& t, const StandardizationStats& s) {
    if (s.patch_mean.shape() != t.z_patches.shape() || s.cls_mean.shape() != t.z_cls.shape())
        throw std::invalid_argument("standardize: stats shape does not cover targets");
}

TeacherTargets map_targets(const TeacherTargets& t, const StandardizationStats& s, bool forward) {
    check_stats_shape(t, s);
    TeacherTargets out = t;
    auto apply = [forward](const Tensor& x, const Tensor& mean, const Tensor& var) {
        std::vector<double> v(x.value().begin(), x.value().end());
        for (std::size_t i = 0; i < v.size(); ++i) {
            const double sd = std::sqrt(var.value()[i]);
            v[i] = forward ? (v[i] - mean.value()[i]) / sd : v[i] * sd + mean.value()[i];
        }
        return Tensor::from_data(x.shape(), std::move(v));
    };
    out.z_patches = apply(t.z_patches, s.patch_mean, s.patch_var);
    out.z_cls = apply(t.z_cls, s.cls_mean, s.cls_var);
    return out;
}

}  // namespace

TeacherTargets standardize(const TeacherTargets& t, const StandardizationStats& s) {
    return map_targets(t, s, true);
}

TeacherTargets destandardize(const TeacherTargets& t, const StandardizationStats& s) {
    return map_targets(t, s, false);
}

Tensor reconstruction_loss(const std::vector<Tensor>& z_patches_per_t,
                           const std::vector<Tensor>& z_cls_per_t, const TeacherTargets& target) {
    if (z_patches_per_t.empty() || z_patches_per_t.size() != z_cls_per_t.size())
        throw std::invalid_argument("reconstruction_loss: need matching per-step outputs");
    const double inv_hw = 1.0 / static_cast<double>(target.h * target.w);
    Tensor total;
    for (std::size_t t = 0; t < z_patches_per_t.size(); ++t) {
        if (z_patches_per_t[t].shape() != target.z_patches.shape())
            throw std::invalid_argument("reconstruction_loss: grid mismatch at step " +
                                        std::to_string(t));
        Tensor dp = sub(z_patches_per_t[t], target.z_patches);
        Tensor dc = sub(z_cls_per_t[t], target.z_cls);
        Tensor term = add(scale(sum_all(mul(dp, dp)), inv_hw), sum_all(mul(dc, dc)));
        total = total.defined() ? add(total, term) : term;
    }
    return scale(total, 1.0 / static_cast<double>(z_patches_per_t.size()));
}

std::pair<double, double> loss_terms(const Tensor& z_patches, const Tensor& z_cls,
                                     const TeacherTargets& target) {
    if (z_patches.shape() != target.z_patches.shape() || z_cls.shape() != target.z_cls.shape())
        throw std::invalid_argument("loss_terms: shape mismatch");
    double p = 0.0, c = 0.0;
    for (std::int64_t i = 0; i < z_patches.numel(); ++i) {
        const double d = z_patches.value()[static_cast<std::size_t>(i)] -
                         target.z_patches.value()[static_cast<std::size_t>(i)];
        p += d * d;
    }
    for (std::int64_t i = 0; i < z_cls.numel(); ++i) {
        const double d = z_cls.value()[static_cast<std::size_t>(i)] -
                         target.z_cls.value()[static_cast<std::size_t>(i)];
        c += d * d;
    }
    return {p / static_cast<double>(target.h * target.w), c};
}

void TrainConfig::validate() const {
    if (k < 1) throw std::invalid_argument("TrainConfig: chunk size must be >= 1");
    if (!(p_stop > 0.0) || p_stop > 1.0)
        throw std::invalid_argument("TrainConfig: p_stop must be in (0,1]");
    if (batch < 1 || steps < 0) throw std::invalid_argument("TrainConfig: bad batch/steps");
    if (lr <= 0.0) throw std::invalid_argument("TrainConfig: learning rate must be positive");
    if (holdout < 1) throw std::invalid_argument("TrainConfig: need at least one held-out scene");
    if (eval_t < 1) throw std::invalid_argument("TrainConfig: eval_t must be >= 1");
    if (no_fiid != second_riid)
        throw std::invalid_argument(
            "TrainConfig: no_fiid and second_riid replace one rollout with the other; set both");
}

AdamW::AdamW(double lr, double beta1, double beta2, double weight_decay, double eps)
    : lr_(lr), b1_(beta1), b2_(beta2), wd_(weight_decay), eps_(eps) {}

void AdamW::step(const std::vector<std::pair<std::string, Tensor>>& params, double lr_now) {
    if (m_.empty()) {
        m_.resize(params.size());
        v_.resize(params.size());
        for (std::size_t i = 0; i < params.size(); ++i) {
            m_[i].assign(static_cast<std::size_t>(params[i].second.numel()), 0.0);
            v_[i].assign(static_cast<std::size_t>(params[i].second.numel()), 0.0);
        }
    }
    if (m_.size() != params.size()) throw std::logic_error("AdamW: parameter set changed");
    ++t_;
    const double bc1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
        Tensor p = params[i].second;
        auto val = p.raw_value();
        auto g = p.grad_buffer();
        for (std::size_t e = 0; e < val.size(); ++e) {
            m_[i][e] = b1_ * m_[i][e] + (1.0 - b1_) * g[e];
            v_[i][e] = b2_ * v_[i][e] + (1.0 - b2_) * g[e] * g[e];
            const double mh = m_[i][e] / bc1;
            const double vh = v_[i][e] / bc2;
            val[e] -= lr_now * (mh / (std::sqrt(vh) + eps_) + wd_ * val[e]);
        }
    }
}

double clip_grad_norm(const std::vector<std::pair<std::string, Tensor>>& params, double max_norm) {
    double sq = 0.0;
    for (const auto& [name, p] : params) {
        if (!p.has_grad()) continue;
        for (double g : p.grad()) sq += g * g;
    }
    const double norm = std::sqrt(sq);
    if (max_norm > 0.0 && norm > max_norm) {
        const double s = max_norm / norm;
        for (const auto& [name, p] : params) {
            if (!p.has_grad()) continue;
            for (double& g : const_cast<Tensor&>(p).grad_buffer()) g *= s;
        }
    }
    return norm;
}

namespace {

struct RolloutAccum {
    double patch_sum = 0.0;
    double cls_sum = 0.0;
    std::int64_t steps = 0;
};

// One rollout of `len` glimpses in K-chunks; accumulates scaled gradients
// into the parameters and per-step loss values into `acc`.
void run_training_rollout(const Scene& scene, const TeacherTargets& target, ModelParams& params,
                          const TrainConfig& cfg, Policy& policy, const RopeTable& rope_can,
                          std::int64_t len, double loss_weight, RolloutAccum& acc) {
    const ModelConfig& mc = params.cfg;
    const double inv_hw = 1.0 / static_cast<double>(target.h * target.w);
    const Tensor scene_t = scene_tensor(scene);
    ModelState carried;  // detached snapshot crossing chunk boundaries
    bool first = true;
    std::int64_t done = 0;
    while (done < len) {
        const std::int64_t chunk = std::min<std::int64_t>(cfg.k, len - done);
        Tape tape;
        ModelState state = first ? init_state(params, mc.canvas_h, mc.canvas_w) : carried;
        first = false;
        Tensor chunk_loss;
        for (std::int64_t i = 0; i < chunk; ++i) {
            const Viewpoint v = policy.next();
            Tensor glimpse = extract_glimpse(scene_t, v, mc.glimpse_px);
            StepResult res = model_step(params, state, glimpse, v, rope_can);
            state = res.state;
            Tensor dp = sub(res.z_patches, target.z_patches);
            Tensor dc = sub(res.z_cls, target.z_cls);
            Tensor patch_term = scale(sum_all(mul(dp, dp)), inv_hw);
            Tensor cls_term = sum_all(mul(dc, dc));
            acc.patch_sum += patch_term.item();
            acc.cls_sum += cls_term.item();
            ++acc.steps;
            Tensor t_loss = cfg.no_dense_loss ? cls_term : add(patch_term, cls_term);
            chunk_loss = chunk_loss.defined() ? add(chunk_loss, t_loss) : t_loss;
        }
        const double lv = chunk_loss.item();
        if (!std::isfinite(lv)) throw std::runtime_error("training loss is not finite");
        tape.backward(scale(chunk_loss, loss_weight / static_cast<double>(len)));
        carried = detach_state(state);
        done += chunk;
    }
}

double lr_at(const TrainConfig& cfg, std::int64_t step) {
    const std::int64_t warm =
        std::max<std::int64_t>(1, std::llround(cfg.warmup_frac * static_cast<double>(cfg.steps)));
    if (step < warm) return cfg.lr * static_cast<double>(step + 1) / static_cast<double>(warm);
    return cfg.lr;
}

}  // namespace

StepMetrics train_step(const std::vector<const Scene*>& batch, ModelParams& params,
                       const SyntheticTeacher& teacher, const StandardizationStats& stats,
                       const TrainConfig& cfg, AdamW& opt, Rng& rng, std::int64_t step_index) {
    if (batch.empty()) throw std::invalid_argument("train_step: empty batch");
    const ModelConfig& mc = params.cfg;
    if (teacher.grid_h != mc.canvas_h || teacher.grid_w != mc.canvas_w ||
        teacher.d_out != mc.d_teacher)
        throw std::invalid_argument("train_step: teacher grid/width does not match the model");

    params.zero_grads();
    const RopeTable rope_can = canvas_rope_table(mc, mc.canvas_h, mc.canvas_w);
    const double loss_weight = 1.0 / (2.0 * static_cast<double>(batch.size()));

    RolloutAccum acc_anchor, acc_random;
    for (const Scene* scene : batch) {
        const TeacherTargets target = standardize(teacher.targets(*scene), stats);
        // slot A: anchored full-scene-start rollout (or a second random one
        // under the ablation); slot B: random-start rollout
        for (int slot = 0; slot < 2; ++slot) {
            const bool anchored = (slot == 0) && !cfg.no_fiid;
            const std::int64_t len = sample_rollout_length(rng, cfg.k, cfg.p_stop);
            auto policy =
                make_policy(anchored ? PolicyKind::FIID : PolicyKind::RIID, rng.fork(), len);
            run_training_rollout(*scene, target, params, cfg, *policy, rope_can, len, loss_weight,
                                 slot == 0 ? acc_anchor : acc_random);
        }
    }

    const auto trainable = params.trainable();
    StepMetrics m;
    m.step = step_index;
    m.grad_norm = clip_grad_norm(trainable, cfg.clip_norm);
    if (!std::isfinite(m.grad_norm)) throw std::runtime_error("gradient norm is not finite");
    m.lr = lr_at(cfg, step_index);
    opt.step(trainable, m.lr);

    m.loss_patch_fiid = acc_anchor.patch_sum / static_cast<double>(acc_anchor.steps);
    m.loss_cls_fiid = acc_anchor.cls_sum / static_cast<double>(acc_anchor.steps);
    m.loss_patch_riid = acc_random.patch_sum / static_cast<double>(acc_random.steps);
    m.loss_cls_riid = acc_random.cls_sum / static_cast<double>(acc_random.steps);
    return m;
}

EvalResult evaluate(const ModelParams& params, const SyntheticTeacher& teacher,
                    const StandardizationStats& stats, const std::vector<Scene>& scenes,
                    std::int64_t t, std::uint64_t seed) {
    if (scenes.empty()) throw std::invalid_argument("evaluate: no scenes");
    const ModelConfig& mc = params.cfg;
    const RopeTable rope_can = canvas_rope_table(mc, mc.canvas_h, mc.canvas_w);
    EvalResult r;
    std::int64_t n_steps = 0;
    for (std::size_t si = 0; si < scenes.size(); ++si) {
        const TeacherTargets target = standardize(teacher.targets(scenes[si]), stats);
        const Tensor scene_t = scene_tensor(scenes[si]);
        for (int slot = 0; slot < 2; ++slot) {
            Rng rng(seed * 1000003ULL + si * 2 + static_cast<std::uint64_t>(slot));
            auto policy =
                make_policy(slot == 0 ? PolicyKind::FIID : PolicyKind::RIID, rng.fork(), t);
            ModelState state = init_state(params, mc.canvas_h, mc.canvas_w);
            for (std::int64_t i = 0; i < t; ++i) {
                const Viewpoint v = policy->next();
                Tensor glimpse = extract_glimpse(scene_t, v, mc.glimpse_px);
                StepResult res = model_step(params, state, glimpse, v, rope_can);
                state = res.state;
                const auto [lp, lc] = loss_terms(res.z_patches, res.z_cls, target);
                r.loss_patch += lp;
                r.loss_cls += lc;
                ++n_steps;
            }
        }
    }
    r.loss_patch /= static_cast<double>(n_steps);
    r.loss_cls /= static_cast<double>(n_steps);
    r.loss_total = r.loss_patch + r.loss_cls;
    return r;
}

TrainResult micro_pretrain(const std::vector<Scene>& dataset, ModelParams& params,
                           const SyntheticTeacher& teacher, const TrainConfig& cfg,
                           const ProgressFn& progress) {
    cfg.validate();
    if (static_cast<std::int64_t>(dataset.size()) <= cfg.holdout)
        throw std::invalid_argument("micro_pretrain: dataset smaller than the hold-out split");
    const std::vector<Scene> eval_scenes(dataset.begin(), dataset.begin() + cfg.holdout);
    const std::vector<Scene> train_scenes(dataset.begin() + cfg.holdout, dataset.end());

    TrainResult result;
    result.stats = compute_stats(teacher, train_scenes);
    result.initial_eval = evaluate(params, teacher, result.stats, eval_scenes, cfg.eval_t,
                                   cfg.seed ^ 0x5eedULL);

    AdamW opt(cfg.lr, cfg.beta1, cfg.beta2, cfg.weight_decay);
    Rng rng(cfg.seed);
    double initial_loss = 0.0;
    std::int64_t diverged_streak = 0;
    for (std::int64_t step = 0; step < cfg.steps; ++step) {
        std::vector<const Scene*> batch;
        batch.reserve(static_cast<std::size_t>(cfg.batch));
        for (std::int64_t b = 0; b < cfg.batch; ++b)
            batch.push_back(
                &train_scenes[static_cast<std::size_t>(rng.uniform_int(
                    static_cast<std::int64_t>(train_scenes.size())))]);
        StepMetrics m = train_step(batch, params, teacher, result.stats, cfg, opt, rng, step);
        const double total = 0.5 * (m.loss_patch_fiid + m.loss_cls_fiid + m.loss_patch_riid +
                                    m.loss_cls_riid);
        if (step == 0) initial_loss = total;
        diverged_streak = (total > 10.0 * initial_loss) ? diverged_streak + 1 : 0;
        if (diverged_streak >= 100)
            throw std::runtime_error("training diverged: loss above 10x its initial value for 100 "
                                     "consecutive steps");
        result.metrics.push_back(m);
        if (progress) progress(m);
    }

    result.final_eval =
        evaluate(params, teacher, result.stats, eval_scenes, cfg.eval_t, cfg.seed ^ 0x5eedULL);
    return result;
}

EntropyProbe make_probe(std::int64_t d_in, std::int64_t n_classes, std::uint64_t seed) {
    if (d_in <= 0 || n_classes < 2) throw std::invalid_argument("make_probe: bad dimensions");
    EntropyProbe p;
    p.d_in = d_in;
    p.n_classes = n_classes;
    p.w.resize(static_cast<std::size_t>(d_in * n_classes));
    Rng rng(seed);
    const double s = 1.0 / std::sqrt(static_cast<double>(d_in));
    for (double& v : p.w) v = rng.normal(0.0, s);
    return p;
}

std::vector<double> entropy_map(const EntropyProbe& probe, const Tensor& z_patches) {
    if (z_patches.rank() != 2 || z_patches.dim(1) != probe.d_in)
        throw std::invalid_argument("entropy_map: feature width does not match the probe");
    const std::int64_t n = z_patches.dim(0), d = probe.d_in, c = probe.n_classes;
    std::vector<double> out(static_cast<std::size_t>(n), 0.0);
    std::vector<double> logits(static_cast<std::size_t>(c));
    for (std::int64_t i = 0; i < n; ++i) {
        const double* z = z_patches.value().data() + i * d;
        double mx = -HUGE_VAL;
        for (std::int64_t k = 0; k < c; ++k) {
            double a = 0.0;
            for (std::int64_t j = 0; j < d; ++j)
                a += z[j] * probe.w[static_cast<std::size_t>(j * c + k)];
            logits[static_cast<std::size_t>(k)] = a;
            mx = std::max(mx, a);
        }
        double zsum = 0.0;
        for (std::int64_t k = 0; k < c; ++k) {
            logits[static_cast<std::size_t>(k)] = std::exp(logits[static_cast<std::size_t>(k)] - mx);
            zsum += logits[static_cast<std::size_t>(k)];
        }
        double ent = 0.0;
        for (std::int64_t k = 0; k < c; ++k) {
            const double pk = logits[static_cast<std::size_t>(k)] / zsum;
            if (pk > 0.0) ent -= pk * std::log(pk);
        }
        out[static_cast<std::size_t>(i)] = ent;
    }
    return out;
}

}  // namespace canvit
