#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "canvit/common.hpp"

namespace canvit {

// A square window on the scene: center (x, y) and half-side s, all in the
// scene frame where the full scene spans [-1, +1] on both axes. A viewpoint
// is valid when the window lies inside the scene: 0 < s <= 1 and
// |x|, |y| <= 1 - s (up to a small tolerance for accumulated arithmetic).
struct Viewpoint {
    double x = 0.0;
    double y = 0.0;
    double s = 1.0;
};

inline constexpr double kViewpointEps = 1e-9;

bool viewpoint_is_valid(const Viewpoint& v);

// (x/s, y/s, log s); bijective on valid viewpoints. Throws on invalid input.
std::array<double, 3> embed_viewpoint(const Viewpoint& v);
Viewpoint inverse_embed_viewpoint(const std::array<double, 3>& u);

// Euclidean distance between embeddings; the geometry-side quantity it
// equals is sqrt(|dx/s'|^2 + |dy/s'|^2 + log^2(s/s')) for windows at
// relative offset (dx, dy) and scales s, s'.
double embedding_distance(const Viewpoint& a, const Viewpoint& b);

// Cell centers of an R x C grid tiling [-1,1]^2, row-major. centers[i] is
// (y, x); row 0 is the top of the scene (y = -1 side).
struct GridCenters {
    std::int64_t rows = 0;
    std::int64_t cols = 0;
    std::vector<std::array<double, 2>> centers;  // (y, x)
};

GridCenters grid_centers(std::int64_t rows, std::int64_t cols);

// Patch centers of a glimpse at viewpoint v subdivided into rows x cols
// patches, in scene coordinates: v.center + v.s * unit_grid.
GridCenters glimpse_patch_centers(const Viewpoint& v, std::int64_t rows, std::int64_t cols);

// Random Fourier feature lift of the 3-d viewpoint embedding to n_out dims:
// sqrt(2 / n_feat) * [cos(B u); sin(B u)] with B ~ N(0, sigma^2), drawn once
// and frozen. n_out must be even; n_feat = n_out / 2.
struct RffParams {
    std::int64_t n_features = 0;           // rows of B
    std::vector<double> freq;              // B, row-major [n_features, 3]
};

RffParams make_rff(std::int64_t n_out, double sigma, Rng& rng);
std::vector<double> lift_rff(const RffParams& p, const std::array<double, 3>& u);

}  // namespace canvit
