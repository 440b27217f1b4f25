#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "canvit/geometry.hpp"

namespace canvit {

enum class PolicyKind { RIID, FIID, C2F, F2C, EGC2F, RFS };

PolicyKind policy_from_string(const std::string& name);  // throws on unknown name
std::string policy_to_string(PolicyKind k);

inline constexpr double kDefaultMinScale = 0.05;

// One draw of the training viewpoint distribution: area A ~ U[0, (1-s_min)^2],
// scale s = 1 - sqrt(A), center uniform over all positions keeping the
// window inside the scene. The scale marginal is p(s) proportional to (1-s)
// on [s_min, 1].
Viewpoint sample_iid_viewpoint(Rng& rng, double s_min = kDefaultMinScale);

// The 2^l x 2^l tiles of quadtree level l; tile scale 2^-l, row-major order.
std::vector<Viewpoint> quadtree_level(std::int64_t level);

// Materialized sequences (tests and CLI use these; rollouts use Policy).
std::vector<Viewpoint> f_iid_sequence(Rng& rng, std::int64_t t, double s_min = kDefaultMinScale);
std::vector<Viewpoint> c2f_sequence(Rng& rng, std::int64_t t);
std::vector<Viewpoint> f2c_sequence(Rng& rng, std::int64_t t);
std::vector<Viewpoint> rfs_sequence(std::int64_t t);

// Rollout length in glimpses: K times a geometric number of chunks
// (support starts at one chunk; stop probability p_stop per boundary).
std::int64_t sample_rollout_length(Rng& rng, std::int64_t k, double p_stop);

// Stateful view of a policy. next() yields the viewpoint for the current
// step; observe() feeds back a per-cell entropy map of the decoded canvas,
// which only the entropy-guided policy uses.
class Policy {
public:
    virtual ~Policy() = default;
    virtual Viewpoint next() = 0;
    virtual void observe(const std::vector<double>& entropy, std::int64_t h, std::int64_t w) {
        (void)entropy;
        (void)h;
        (void)w;
    }
    virtual bool wants_entropy() const { return false; }
};

// budget: total glimpses the caller will request; only the fine-to-coarse
// policy needs it ahead of time (it reverses a materialized sequence).
std::unique_ptr<Policy> make_policy(PolicyKind kind, Rng rng, std::int64_t budget,
                                    double s_min = kDefaultMinScale);

// Entropy-guided tile choice at one level: the unvisited tile whose covered
// canvas cells (cell centers inside the tile) have the highest mean entropy;
// ties and tiles covering no cell fall back to lowest row-major index.
// visited[i] marks tile i of `tiles` as used. Exposed for direct testing.
std::int64_t eg_pick_tile(const std::vector<Viewpoint>& tiles, const std::vector<bool>& visited,
                          const std::vector<double>& entropy, std::int64_t h, std::int64_t w);

}  // namespace canvit
