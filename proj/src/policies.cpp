#include "canvit/policies.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace canvit {

PolicyKind policy_from_string(const std::string& name) {
    std::string s;
    for (char c : name) s += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    if (s == "r-iid" || s == "riid") return PolicyKind::RIID;
    if (s == "f-iid" || s == "fiid") return PolicyKind::FIID;
    if (s == "c2f") return PolicyKind::C2F;
    if (s == "f2c") return PolicyKind::F2C;
    if (s == "eg-c2f" || s == "egc2f") return PolicyKind::EGC2F;
    if (s == "rfs") return PolicyKind::RFS;
    throw std::invalid_argument("unknown policy '" + name +
                                "' (expected r-iid, f-iid, c2f, f2c, eg-c2f or rfs)");
}

std::string policy_to_string(PolicyKind k) {
    switch (k) {
        case PolicyKind::RIID: return "r-iid";
        case PolicyKind::FIID: return "f-iid";
        case PolicyKind::C2F: return "c2f";
        case PolicyKind::F2C: return "f2c";
        case PolicyKind::EGC2F: return "eg-c2f";
        case PolicyKind::RFS: return "rfs";
    }
    throw std::logic_error("unreachable");
}

Viewpoint sample_iid_viewpoint(Rng& rng, double s_min) {
    if (!(s_min > 0.0) || s_min >= 1.0)
        throw std::invalid_argument("sample_iid_viewpoint: s_min must be in (0,1)");
    const double a_max = (1.0 - s_min) * (1.0 - s_min);
    const double a = rng.uniform(0.0, a_max);
    const double s = 1.0 - std::sqrt(a);
    const double half = 1.0 - s;  // equals sqrt(a)
    Viewpoint v;
    v.s = s;
    v.x = rng.uniform(-half, half);
    v.y = rng.uniform(-half, half);
    return v;
}

std::vector<Viewpoint> quadtree_level(std::int64_t level) {
    if (level < 0) throw std::invalid_argument("quadtree_level: negative level");
    const std::int64_t n = std::int64_t{1} << level;
    const double s = std::pow(2.0, -static_cast<double>(level));
    std::vector<Viewpoint> tiles;
    tiles.reserve(static_cast<std::size_t>(n * n));
    for (std::int64_t i = 0; i < n; ++i)
        for (std::int64_t j = 0; j < n; ++j) {
            Viewpoint v;
            v.s = s;
            v.y = -1.0 + (2.0 * static_cast<double>(i) + 1.0) * s;
            v.x = -1.0 + (2.0 * static_cast<double>(j) + 1.0) * s;
            tiles.push_back(v);
        }
    return tiles;
}

std::vector<Viewpoint> f_iid_sequence(Rng& rng, std::int64_t t, double s_min) {
    if (t < 1) throw std::invalid_argument("f_iid_sequence: need at least one step");
    std::vector<Viewpoint> seq;
    seq.reserve(static_cast<std::size_t>(t));
    seq.push_back(Viewpoint{0.0, 0.0, 1.0});
    for (std::int64_t i = 1; i < t; ++i) seq.push_back(sample_iid_viewpoint(rng, s_min));
    return seq;
}

std::vector<Viewpoint> c2f_sequence(Rng& rng, std::int64_t t) {
    if (t < 1) throw std::invalid_argument("c2f_sequence: need at least one step");
    std::vector<Viewpoint> seq;
    seq.reserve(static_cast<std::size_t>(t));
    std::int64_t level = 0;
    while (static_cast<std::int64_t>(seq.size()) < t) {
        std::vector<Viewpoint> tiles = quadtree_level(level);
        if (level > 0) rng.shuffle(tiles);
        for (const Viewpoint& v : tiles) {
            seq.push_back(v);
            if (static_cast<std::int64_t>(seq.size()) == t) break;
        }
        ++level;
    }
    return seq;
}

std::vector<Viewpoint> f2c_sequence(Rng& rng, std::int64_t t) {
    std::vector<Viewpoint> seq = c2f_sequence(rng, t);
    std::reverse(seq.begin(), seq.end());
    return seq;
}

std::vector<Viewpoint> rfs_sequence(std::int64_t t) {
    if (t < 1) throw std::invalid_argument("rfs_sequence: need at least one step");
    return std::vector<Viewpoint>(static_cast<std::size_t>(t), Viewpoint{0.0, 0.0, 1.0});
}

std::int64_t sample_rollout_length(Rng& rng, std::int64_t k, double p_stop) {
    if (k < 1) throw std::invalid_argument("sample_rollout_length: chunk size must be >= 1");
    if (!(p_stop > 0.0) || p_stop > 1.0)
        throw std::invalid_argument("sample_rollout_length: p_stop must be in (0,1]");
    std::int64_t chunks = 1;
    while (rng.uniform() >= p_stop) ++chunks;
    return k * chunks;
}

std::int64_t eg_pick_tile(const std::vector<Viewpoint>& tiles, const std::vector<bool>& visited,
                          const std::vector<double>& entropy, std::int64_t h, std::int64_t w) {
    if (tiles.size() != visited.size())
        throw std::invalid_argument("eg_pick_tile: visited mask size mismatch");
    const bool have_map = static_cast<std::int64_t>(entropy.size()) == h * w && h > 0 && w > 0;
    GridCenters cells;
    if (have_map) cells = grid_centers(h, w);
    std::int64_t best = -1;
    double best_score = 0.0;
    for (std::size_t i = 0; i < tiles.size(); ++i) {
        if (visited[i]) continue;
        double score = -1.0;  // below any real entropy, which is >= 0
        if (have_map) {
            const Viewpoint& v = tiles[i];
            double sum = 0.0;
            std::int64_t count = 0;
            for (std::size_t c = 0; c < cells.centers.size(); ++c) {
                const double cy = cells.centers[c][0], cx = cells.centers[c][1];
                if (cx >= v.x - v.s && cx < v.x + v.s && cy >= v.y - v.s && cy < v.y + v.s) {
                    sum += entropy[c];
                    ++count;
                }
            }
            if (count > 0) score = sum / static_cast<double>(count);
        }
        if (best < 0 || score > best_score) {
            best = static_cast<std::int64_t>(i);
            best_score = score;
        }
    }
    if (best < 0) throw std::logic_error("eg_pick_tile: level exhausted");
    return best;
}

namespace {

class IidPolicy final : public Policy {
public:
    IidPolicy(Rng rng, double s_min, bool full_scene_start)
        : rng_(rng), s_min_(s_min), full_first_(full_scene_start) {}
    Viewpoint next() override {
        if (full_first_ && t_++ == 0) return Viewpoint{0.0, 0.0, 1.0};
        ++t_;
        return sample_iid_viewpoint(rng_, s_min_);
    }

private:
    Rng rng_;
    double s_min_;
    bool full_first_;
    std::int64_t t_ = 0;
};

class SequencePolicy final : public Policy {
public:
    explicit SequencePolicy(std::vector<Viewpoint> seq) : seq_(std::move(seq)) {}
    Viewpoint next() override {
        if (i_ >= seq_.size()) throw std::out_of_range("policy exhausted its viewpoint budget");
        return seq_[i_++];
    }

private:
    std::vector<Viewpoint> seq_;
    std::size_t i_ = 0;
};

class ConstantPolicy final : public Policy {
public:
    explicit ConstantPolicy(Viewpoint v) : v_(v) {}
    Viewpoint next() override { return v_; }

private:
    Viewpoint v_;
};

// Coarse-to-fine streaming policy; C2F shuffles within each level, the
// entropy-guided variant instead re-ranks the remaining tiles of the level
// by the freshest entropy map after every glimpse.
class QuadtreePolicy final : public Policy {
public:
    QuadtreePolicy(Rng rng, bool entropy_guided) : rng_(rng), guided_(entropy_guided) {}

    Viewpoint next() override {
        if (cursor_ >= tiles_.size()) advance_level();
        if (!guided_) return tiles_[cursor_++];
        const std::int64_t pick = eg_pick_tile(tiles_, visited_, entropy_, h_, w_);
        visited_[static_cast<std::size_t>(pick)] = true;
        ++cursor_;
        return tiles_[static_cast<std::size_t>(pick)];
    }

    void observe(const std::vector<double>& entropy, std::int64_t h, std::int64_t w) override {
        entropy_ = entropy;
        h_ = h;
        w_ = w;
    }

    bool wants_entropy() const override { return guided_; }

private:
    void advance_level() {
        tiles_ = quadtree_level(level_);
        if (!guided_ && level_ > 0) rng_.shuffle(tiles_);
        visited_.assign(tiles_.size(), false);
        cursor_ = 0;
        ++level_;
    }

    Rng rng_;
    bool guided_;
    std::int64_t level_ = 0;
    std::vector<Viewpoint> tiles_;
    std::vector<bool> visited_;
    std::size_t cursor_ = 0;
    std::vector<double> entropy_;
    std::int64_t h_ = 0, w_ = 0;
};

}  // namespace

std::unique_ptr<Policy> make_policy(PolicyKind kind, Rng rng, std::int64_t budget, double s_min) {
    switch (kind) {
        case PolicyKind::RIID: return std::make_unique<IidPolicy>(rng, s_min, false);
        case PolicyKind::FIID: return std::make_unique<IidPolicy>(rng, s_min, true);
        case PolicyKind::C2F: return std::make_unique<QuadtreePolicy>(rng, false);
        case PolicyKind::EGC2F: return std::make_unique<QuadtreePolicy>(rng, true);
        case PolicyKind::F2C: {
            if (budget < 1) throw std::invalid_argument("fine-to-coarse policy needs a step budget");
            return std::make_unique<SequencePolicy>(f2c_sequence(rng, budget));
        }
        case PolicyKind::RFS: return std::make_unique<ConstantPolicy>(Viewpoint{0.0, 0.0, 1.0});
    }
    throw std::logic_error("unreachable");
}

}  // namespace canvit
