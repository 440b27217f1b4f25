#include "canvit/geometry.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace canvit {

bool viewpoint_is_valid(const Viewpoint& v) {
    if (!(v.s > 0.0) || v.s > 1.0 + kViewpointEps) return false;
    const double slack = 1.0 - v.s + kViewpointEps;
    return std::abs(v.x) <= slack && std::abs(v.y) <= slack;
}

std::array<double, 3> embed_viewpoint(const Viewpoint& v) {
    if (!viewpoint_is_valid(v))
        throw std::invalid_argument("embed_viewpoint: window (" + std::to_string(v.x) + "," +
                                    std::to_string(v.y) + "," + std::to_string(v.s) +
                                    ") leaves the scene");
    return {v.x / v.s, v.y / v.s, std::log(v.s)};
}

Viewpoint inverse_embed_viewpoint(const std::array<double, 3>& u) {
    const double s = std::exp(u[2]);
    return Viewpoint{s * u[0], s * u[1], s};
}

double embedding_distance(const Viewpoint& a, const Viewpoint& b) {
    const auto ua = embed_viewpoint(a);
    const auto ub = embed_viewpoint(b);
    const double d0 = ua[0] - ub[0], d1 = ua[1] - ub[1], d2 = ua[2] - ub[2];
    return std::sqrt(d0 * d0 + d1 * d1 + d2 * d2);
}

GridCenters grid_centers(std::int64_t rows, std::int64_t cols) {
    if (rows <= 0 || cols <= 0) throw std::invalid_argument("grid_centers: non-positive grid");
    GridCenters g;
    g.rows = rows;
    g.cols = cols;
    g.centers.reserve(static_cast<std::size_t>(rows * cols));
    for (std::int64_t i = 0; i < rows; ++i) {
        const double y = (static_cast<double>(i) + 0.5) / static_cast<double>(rows) * 2.0 - 1.0;
        for (std::int64_t j = 0; j < cols; ++j) {
            const double x = (static_cast<double>(j) + 0.5) / static_cast<double>(cols) * 2.0 - 1.0;
            g.centers.push_back({y, x});
        }
    }
    return g;
}

GridCenters glimpse_patch_centers(const Viewpoint& v, std::int64_t rows, std::int64_t cols) {
    if (!viewpoint_is_valid(v))
        throw std::invalid_argument("glimpse_patch_centers: invalid viewpoint");
    GridCenters g = grid_centers(rows, cols);
    for (auto& c : g.centers) {
        c[0] = v.y + v.s * c[0];
        c[1] = v.x + v.s * c[1];
    }
    return g;
}

RffParams make_rff(std::int64_t n_out, double sigma, Rng& rng) {
    if (n_out <= 0 || n_out % 2 != 0)
        throw std::invalid_argument("make_rff: output width must be positive and even");
    RffParams p;
    p.n_features = n_out / 2;
    p.freq.resize(static_cast<std::size_t>(p.n_features * 3));
    for (double& f : p.freq) f = rng.normal(0.0, sigma);
    return p;
}

std::vector<double> lift_rff(const RffParams& p, const std::array<double, 3>& u) {
    if (p.n_features <= 0) throw std::invalid_argument("lift_rff: uninitialised params");
    const std::size_t nf = static_cast<std::size_t>(p.n_features);
    std::vector<double> out(2 * nf);
    const double amp = std::sqrt(2.0 / static_cast<double>(nf));
    for (std::size_t i = 0; i < nf; ++i) {
        const double* b = p.freq.data() + 3 * i;
        const double a = b[0] * u[0] + b[1] * u[1] + b[2] * u[2];
        out[i] = amp * std::cos(a);
        out[nf + i] = amp * std::sin(a);
    }
    return out;
}

}  // namespace canvit
