#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "canvit/common.hpp"
#include "canvit/geometry.hpp"
#include "canvit/tensor.hpp"

namespace canvit {

// Square RGB scene with values in [0,1]; realizes the scene function over
// [-1,+1]^2 via its pixel grid (pixel (r,c) center at ((r+0.5)/S*2-1 in y,
// (c+0.5)/S*2-1 in x); row 0 is the y=-1 edge).
struct Scene {
    std::int64_t side = 0;
    std::vector<double> pix;  // [side, side, 3] row-major

    double at(std::int64_t r, std::int64_t c, int ch) const {
        return pix[static_cast<std::size_t>((r * side + c) * 3 + ch)];
    }
};

struct ImageU8 {
    std::int64_t w = 0, h = 0;
    std::vector<std::uint8_t> rgb;  // [h, w, 3]
};

// Binary PPM (P6, maxval 255) and a raw float container ("CVF1" magic,
// u32 side, f32 RGB payload, little-endian) for lossless round trips.
Scene load_scene(const std::string& path);
void save_scene_ppm(const Scene& s, const std::string& path);
void save_scene_raw(const Scene& s, const std::string& path);
void save_ppm(const ImageU8& img, const std::string& path);

// Bilinear crop of the window [x-s, x+s] x [y-s, y+s] resampled to
// out_px x out_px, half-pixel-center aligned; differentiable w.r.t. the
// scene tensor. scene_tensor converts once, extract_glimpse samples.
Tensor scene_tensor(const Scene& s);
Tensor extract_glimpse(const Tensor& scene, const Viewpoint& v, std::int64_t out_px);

// Flat key=value config text: '#' comments, blank lines ignored, keys kept
// in file order. Duplicate keys are an error.
std::vector<std::pair<std::string, std::string>> parse_kv_text(const std::string& text);
std::vector<std::pair<std::string, std::string>> parse_kv_file(const std::string& path);

// Strict typed lookups; every key a caller reads must exist in the schema
// it validates against (callers reject unknown keys themselves).
std::int64_t kv_int(const std::string& key, const std::string& value);
double kv_double(const std::string& key, const std::string& value);
bool kv_bool(const std::string& key, const std::string& value);
std::uint64_t kv_u64(const std::string& key, const std::string& value);

// Token map to RGB: layer-normalize each token, PCA across tokens, first
// three components to channels, min-max per channel (constant channels go
// to zero; missing components are zero-filled).
ImageU8 pca_visualize(const Tensor& tokens, std::int64_t h, std::int64_t w);

// Top eigenpairs of a symmetric matrix, eigenvalues descending (cyclic
// Jacobi). Exposed for the visualization tests' cross-check.
void symmetric_eigen(const std::vector<double>& mat, std::int64_t n,
                     std::vector<double>& eigenvalues, std::vector<double>& eigenvectors);

// Procedural dataset: smooth color gradient background plus a handful of
// random rectangles and disks per scene. Deterministic in seed.
std::vector<Scene> generate_scenes(std::int64_t count, std::int64_t side, std::uint64_t seed);

// Minimal CSV writer: quotes nothing, callers pass printable cells.
void write_csv(const std::string& path, const std::vector<std::string>& header,
               const std::vector<std::vector<std::string>>& rows);

std::string format_double(double v);  // shortest round-trip decimal

}  // namespace canvit
