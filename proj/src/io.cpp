#include "canvit/io.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace canvit {

namespace {

[[noreturn]] void io_fail(const std::string& path, const std::string& what) {
    throw std::runtime_error(path + ": " + what);
}

// PPM header token: skips whitespace and '#' comments
std::string ppm_token(std::istream& in) {
    std::string tok;
    int c;
    while ((c = in.get()) != EOF) {
        if (c == '#') {
            while ((c = in.get()) != EOF && c != '\n') {
            }
            continue;
        }
        if (std::isspace(c)) {
            if (!tok.empty()) return tok;
            continue;
        }
        tok += static_cast<char>(c);
    }
    return tok;
}

Scene load_ppm(const std::string& path, std::ifstream& in) {
    std::string w_s = ppm_token(in), h_s = ppm_token(in), max_s = ppm_token(in);
    if (w_s.empty() || h_s.empty() || max_s.empty()) io_fail(path, "truncated PPM header");
    long w = 0, h = 0, maxval = 0;
    try {
        w = std::stol(w_s);
        h = std::stol(h_s);
        maxval = std::stol(max_s);
    } catch (const std::exception&) {
        io_fail(path, "malformed PPM header");
    }
    if (w <= 0 || h <= 0) io_fail(path, "bad PPM dimensions");
    if (maxval != 255) io_fail(path, "only maxval 255 PPM supported");
    if (w != h) io_fail(path, "scene must be square, got " + std::to_string(w) + "x" + std::to_string(h));
    std::vector<std::uint8_t> buf(static_cast<std::size_t>(w) * static_cast<std::size_t>(h) * 3);
    in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    if (in.gcount() != static_cast<std::streamsize>(buf.size())) io_fail(path, "truncated PPM payload");
    Scene s;
    s.side = w;
    s.pix.resize(buf.size());
    for (std::size_t i = 0; i < buf.size(); ++i) s.pix[i] = static_cast<double>(buf[i]) / 255.0;
    return s;
}

Scene load_raw(const std::string& path, std::ifstream& in) {
    std::uint32_t side = 0;
    in.read(reinterpret_cast<char*>(&side), 4);
    if (!in || side == 0) io_fail(path, "bad raw scene header");
    std::vector<float> buf(static_cast<std::size_t>(side) * side * 3);
    in.read(reinterpret_cast<char*>(buf.data()),
            static_cast<std::streamsize>(buf.size() * sizeof(float)));
    if (in.gcount() != static_cast<std::streamsize>(buf.size() * sizeof(float)))
        io_fail(path, "truncated raw scene payload");
    Scene s;
    s.side = side;
    s.pix.resize(buf.size());
    for (std::size_t i = 0; i < buf.size(); ++i) {
        s.pix[i] = static_cast<double>(buf[i]);
        if (!std::isfinite(s.pix[i])) io_fail(path, "non-finite pixel value");
    }
    return s;
}

}  // namespace

Scene load_scene(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) io_fail(path, "cannot open");
    char magic[4] = {};
    in.read(magic, 2);
    if (!in) io_fail(path, "empty file");
    if (magic[0] == 'P' && magic[1] == '6') return load_ppm(path, in);
    in.read(magic + 2, 2);
    if (in && std::memcmp(magic, "CVF1", 4) == 0) return load_raw(path, in);
    io_fail(path, "unrecognized scene format (want P6 PPM or CVF1 raw)");
}

void save_scene_ppm(const Scene& s, const std::string& path) {
    ImageU8 img;
    img.w = s.side;
    img.h = s.side;
    img.rgb.resize(s.pix.size());
    for (std::size_t i = 0; i < s.pix.size(); ++i) {
        double v = std::clamp(s.pix[i], 0.0, 1.0);
        img.rgb[i] = static_cast<std::uint8_t>(std::lround(v * 255.0));
    }
    save_ppm(img, path);
}

void save_scene_raw(const Scene& s, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) io_fail(path, "cannot open for writing");
    out.write("CVF1", 4);
    const std::uint32_t side = static_cast<std::uint32_t>(s.side);
    out.write(reinterpret_cast<const char*>(&side), 4);
    std::vector<float> buf(s.pix.size());
    for (std::size_t i = 0; i < s.pix.size(); ++i) buf[i] = static_cast<float>(s.pix[i]);
    out.write(reinterpret_cast<const char*>(buf.data()),
              static_cast<std::streamsize>(buf.size() * sizeof(float)));
    if (!out) io_fail(path, "write failed");
}

void save_ppm(const ImageU8& img, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) io_fail(path, "cannot open for writing");
    out << "P6\n" << img.w << " " << img.h << "\n255\n";
    out.write(reinterpret_cast<const char*>(img.rgb.data()),
              static_cast<std::streamsize>(img.rgb.size()));
    if (!out) io_fail(path, "write failed");
}

Tensor scene_tensor(const Scene& s) {
    return Tensor::from_data({s.side, s.side, 3}, s.pix);
}

Tensor extract_glimpse(const Tensor& scene, const Viewpoint& v, std::int64_t out_px) {
    if (!viewpoint_is_valid(v)) throw std::invalid_argument("extract_glimpse: invalid viewpoint");
    if (out_px <= 0) throw std::invalid_argument("extract_glimpse: non-positive output size");
    const std::int64_t s = scene.dim(0);
    std::vector<double> py(static_cast<std::size_t>(out_px * out_px));
    std::vector<double> px(static_cast<std::size_t>(out_px * out_px));
    for (std::int64_t r = 0; r < out_px; ++r) {
        // output pixel center in the window, then scene coords, then
        // continuous pixel index (half-pixel centers)
        const double fy = (static_cast<double>(r) + 0.5) / static_cast<double>(out_px);
        const double sy = (v.y - v.s) + fy * 2.0 * v.s;
        const double iy = (sy + 1.0) * 0.5 * static_cast<double>(s) - 0.5;
        for (std::int64_t c = 0; c < out_px; ++c) {
            const double fx = (static_cast<double>(c) + 0.5) / static_cast<double>(out_px);
            const double sx = (v.x - v.s) + fx * 2.0 * v.s;
            const double ix = (sx + 1.0) * 0.5 * static_cast<double>(s) - 0.5;
            py[static_cast<std::size_t>(r * out_px + c)] = iy;
            px[static_cast<std::size_t>(r * out_px + c)] = ix;
        }
    }
    return bilinear_sample(scene, py, px, out_px, out_px);
}

std::vector<std::pair<std::string, std::string>> parse_kv_text(const std::string& text) {
    std::vector<std::pair<std::string, std::string>> out;
    std::istringstream in(text);
    std::string line;
    std::int64_t lineno = 0;
    auto trim = [](std::string s) {
        const char* ws = " \t\r";
        const auto b = s.find_first_not_of(ws);
        if (b == std::string::npos) return std::string();
        const auto e = s.find_last_not_of(ws);
        return s.substr(b, e - b + 1);
    };
    while (std::getline(in, line)) {
        ++lineno;
        const std::string t = trim(line);
        if (t.empty() || t[0] == '#') continue;
        const auto eq = t.find('=');
        if (eq == std::string::npos)
            throw std::runtime_error("config line " + std::to_string(lineno) +
                                     ": expected key=value, got '" + t + "'");
        std::string key = trim(t.substr(0, eq));
        std::string val = trim(t.substr(eq + 1));
        if (key.empty()) throw std::runtime_error("config line " + std::to_string(lineno) + ": empty key");
        for (const auto& [k, vv] : out)
            if (k == key) throw std::runtime_error("config: duplicate key '" + key + "'");
        out.emplace_back(std::move(key), std::move(val));
    }
    return out;
}

std::vector<std::pair<std::string, std::string>> parse_kv_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) io_fail(path, "cannot open");
    std::ostringstream ss;
    ss << in.rdbuf();
    try {
        return parse_kv_text(ss.str());
    } catch (const std::exception& e) {
        throw std::runtime_error(path + ": " + e.what());
    }
}

std::int64_t kv_int(const std::string& key, const std::string& value) {
    try {
        std::size_t pos = 0;
        const long long v = std::stoll(value, &pos);
        if (pos != value.size()) throw std::invalid_argument("");
        return v;
    } catch (const std::exception&) {
        throw std::runtime_error("config key '" + key + "': expected integer, got '" + value + "'");
    }
}

std::uint64_t kv_u64(const std::string& key, const std::string& value) {
    try {
        std::size_t pos = 0;
        const unsigned long long v = std::stoull(value, &pos);
        if (pos != value.size()) throw std::invalid_argument("");
        return v;
    } catch (const std::exception&) {
        throw std::runtime_error("config key '" + key + "': expected unsigned integer, got '" +
                                 value + "'");
    }
}

double kv_double(const std::string& key, const std::string& value) {
    try {
        std::size_t pos = 0;
        const double v = std::stod(value, &pos);
        if (pos != value.size()) throw std::invalid_argument("");
        return v;
    } catch (const std::exception&) {
        throw std::runtime_error("config key '" + key + "': expected number, got '" + value + "'");
    }
}

bool kv_bool(const std::string& key, const std::string& value) {
    if (value == "true" || value == "1") return true;
    if (value == "false" || value == "0") return false;
    throw std::runtime_error("config key '" + key + "': expected true/false, got '" + value + "'");
}

// ---- PCA visualization ----

void symmetric_eigen(const std::vector<double>& mat, std::int64_t n,
                     std::vector<double>& eigenvalues, std::vector<double>& eigenvectors) {
    if (static_cast<std::int64_t>(mat.size()) != n * n)
        throw std::invalid_argument("symmetric_eigen: matrix size mismatch");
    std::vector<double> a(mat);
    std::vector<double> v(static_cast<std::size_t>(n * n), 0.0);
    for (std::int64_t i = 0; i < n; ++i) v[static_cast<std::size_t>(i * n + i)] = 1.0;

    auto off = [&a, n]() {
        double s = 0.0;
        for (std::int64_t i = 0; i < n; ++i)
            for (std::int64_t j = 0; j < n; ++j)
                if (i != j) s += a[static_cast<std::size_t>(i * n + j)] * a[static_cast<std::size_t>(i * n + j)];
        return s;
    };

    for (int sweep = 0; sweep < 100 && off() > 1e-24; ++sweep) {
        for (std::int64_t p = 0; p < n - 1; ++p)
            for (std::int64_t q = p + 1; q < n; ++q) {
                const double apq = a[static_cast<std::size_t>(p * n + q)];
                if (std::abs(apq) < 1e-300) continue;
                const double app = a[static_cast<std::size_t>(p * n + p)];
                const double aqq = a[static_cast<std::size_t>(q * n + q)];
                const double theta = 0.5 * (aqq - app) / apq;
                const double t = std::copysign(1.0, theta) /
                                 (std::abs(theta) + std::sqrt(1.0 + theta * theta));
                const double c = 1.0 / std::sqrt(1.0 + t * t);
                const double sgn = t * c;
                for (std::int64_t i = 0; i < n; ++i) {
                    const double aip = a[static_cast<std::size_t>(i * n + p)];
                    const double aiq = a[static_cast<std::size_t>(i * n + q)];
                    a[static_cast<std::size_t>(i * n + p)] = c * aip - sgn * aiq;
                    a[static_cast<std::size_t>(i * n + q)] = sgn * aip + c * aiq;
                }
                for (std::int64_t j = 0; j < n; ++j) {
                    const double apj = a[static_cast<std::size_t>(p * n + j)];
                    const double aqj = a[static_cast<std::size_t>(q * n + j)];
                    a[static_cast<std::size_t>(p * n + j)] = c * apj - sgn * aqj;
                    a[static_cast<std::size_t>(q * n + j)] = sgn * apj + c * aqj;
                }
                for (std::int64_t i = 0; i < n; ++i) {
                    const double vip = v[static_cast<std::size_t>(i * n + p)];
                    const double viq = v[static_cast<std::size_t>(i * n + q)];
                    v[static_cast<std::size_t>(i * n + p)] = c * vip - sgn * viq;
                    v[static_cast<std::size_t>(i * n + q)] = sgn * vip + c * viq;
                }
            }
    }

    std::vector<std::int64_t> order(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
    std::stable_sort(order.begin(), order.end(), [&a, n](std::int64_t x, std::int64_t y) {
        return a[static_cast<std::size_t>(x * n + x)] > a[static_cast<std::size_t>(y * n + y)];
    });
    eigenvalues.resize(static_cast<std::size_t>(n));
    eigenvectors.assign(static_cast<std::size_t>(n * n), 0.0);  // column k = k-th eigenvector
    for (std::int64_t k = 0; k < n; ++k) {
        const std::int64_t src = order[static_cast<std::size_t>(k)];
        eigenvalues[static_cast<std::size_t>(k)] = a[static_cast<std::size_t>(src * n + src)];
        for (std::int64_t i = 0; i < n; ++i)
            eigenvectors[static_cast<std::size_t>(i * n + k)] = v[static_cast<std::size_t>(i * n + src)];
    }
}

ImageU8 pca_visualize(const Tensor& tokens, std::int64_t h, std::int64_t w) {
    if (tokens.rank() != 2) throw std::invalid_argument("pca_visualize: expects [n, d] tokens");
    const std::int64_t n = tokens.dim(0), d = tokens.dim(1);
    if (n != h * w) throw std::invalid_argument("pca_visualize: token count must equal h*w");
    if (n < 3) throw std::invalid_argument("pca_visualize: need at least 3 tokens");

    // per-token layer norm (no affine)
    std::vector<double> x(tokens.value().begin(), tokens.value().end());
    for (std::int64_t i = 0; i < n; ++i) {
        double* row = x.data() + i * d;
        double mu = 0.0;
        for (std::int64_t j = 0; j < d; ++j) mu += row[j];
        mu /= static_cast<double>(d);
        double var = 0.0;
        for (std::int64_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
        var /= static_cast<double>(d);
        const double is = 1.0 / std::sqrt(var + 1e-6);
        for (std::int64_t j = 0; j < d; ++j) row[j] = (row[j] - mu) * is;
    }
    // center across tokens, covariance, eigenvectors
    std::vector<double> mean(static_cast<std::size_t>(d), 0.0);
    for (std::int64_t i = 0; i < n; ++i)
        for (std::int64_t j = 0; j < d; ++j) mean[static_cast<std::size_t>(j)] += x[static_cast<std::size_t>(i * d + j)];
    for (double& m : mean) m /= static_cast<double>(n);
    for (std::int64_t i = 0; i < n; ++i)
        for (std::int64_t j = 0; j < d; ++j) x[static_cast<std::size_t>(i * d + j)] -= mean[static_cast<std::size_t>(j)];
    std::vector<double> cov(static_cast<std::size_t>(d * d), 0.0);
    for (std::int64_t i = 0; i < n; ++i)
        for (std::int64_t a = 0; a < d; ++a) {
            const double xa = x[static_cast<std::size_t>(i * d + a)];
            if (xa == 0.0) continue;
            for (std::int64_t b = 0; b < d; ++b)
                cov[static_cast<std::size_t>(a * d + b)] += xa * x[static_cast<std::size_t>(i * d + b)];
        }
    for (double& c : cov) c /= static_cast<double>(n);

    std::vector<double> evals, evecs;
    symmetric_eigen(cov, d, evals, evecs);

    ImageU8 img;
    img.w = w;
    img.h = h;
    img.rgb.assign(static_cast<std::size_t>(n * 3), 0);
    for (int ch = 0; ch < 3; ++ch) {
        if (ch >= d || evals[static_cast<std::size_t>(ch)] <= 1e-12) continue;  // zero-fill missing PCs
        std::vector<double> proj(static_cast<std::size_t>(n), 0.0);
        double lo = HUGE_VAL, hi = -HUGE_VAL;
        for (std::int64_t i = 0; i < n; ++i) {
            double s = 0.0;
            for (std::int64_t j = 0; j < d; ++j)
                s += x[static_cast<std::size_t>(i * d + j)] * evecs[static_cast<std::size_t>(j * d + ch)];
            proj[static_cast<std::size_t>(i)] = s;
            lo = std::min(lo, s);
            hi = std::max(hi, s);
        }
        const double span = hi - lo;
        if (span <= 0.0) continue;
        for (std::int64_t i = 0; i < n; ++i) {
            const double v01 = (proj[static_cast<std::size_t>(i)] - lo) / span;
            img.rgb[static_cast<std::size_t>(i * 3 + ch)] =
                static_cast<std::uint8_t>(std::lround(v01 * 255.0));
        }
    }
    return img;
}

// ---- procedural scenes ----

std::vector<Scene> generate_scenes(std::int64_t count, std::int64_t side, std::uint64_t seed) {
    if (count < 0 || side <= 0) throw std::invalid_argument("generate_scenes: bad arguments");
    std::vector<Scene> scenes;
    scenes.reserve(static_cast<std::size_t>(count));
    Rng rng(seed);
    for (std::int64_t k = 0; k < count; ++k) {
        Rng r = rng.fork();
        Scene s;
        s.side = side;
        s.pix.resize(static_cast<std::size_t>(side * side * 3));
        // bilinear gradient between four random corner colors
        double corner[4][3];
        for (auto& c : corner)
            for (double& v : c) v = r.uniform();
        for (std::int64_t y = 0; y < side; ++y) {
            const double fy = static_cast<double>(y) / static_cast<double>(side - 1 > 0 ? side - 1 : 1);
            for (std::int64_t x2 = 0; x2 < side; ++x2) {
                const double fx = static_cast<double>(x2) / static_cast<double>(side - 1 > 0 ? side - 1 : 1);
                for (int ch = 0; ch < 3; ++ch) {
                    const double top = corner[0][ch] * (1 - fx) + corner[1][ch] * fx;
                    const double bot = corner[2][ch] * (1 - fx) + corner[3][ch] * fx;
                    s.pix[static_cast<std::size_t>((y * side + x2) * 3 + ch)] = top * (1 - fy) + bot * fy;
                }
            }
        }
        // rectangles and disks in random colors
        const std::int64_t n_shapes = 2 + r.uniform_int(4);
        for (std::int64_t i = 0; i < n_shapes; ++i) {
            double col[3] = {r.uniform(), r.uniform(), r.uniform()};
            const bool disk = r.uniform() < 0.5;
            if (disk) {
                const double cy = r.uniform() * static_cast<double>(side);
                const double cx = r.uniform() * static_cast<double>(side);
                const double rad = (0.05 + 0.2 * r.uniform()) * static_cast<double>(side);
                const std::int64_t y0 = std::max<std::int64_t>(0, static_cast<std::int64_t>(cy - rad) - 1);
                const std::int64_t y1 = std::min<std::int64_t>(side, static_cast<std::int64_t>(cy + rad) + 2);
                for (std::int64_t y = y0; y < y1; ++y)
                    for (std::int64_t x2 = 0; x2 < side; ++x2) {
                        const double dy = static_cast<double>(y) + 0.5 - cy;
                        const double dx = static_cast<double>(x2) + 0.5 - cx;
                        if (dy * dy + dx * dx <= rad * rad)
                            for (int ch = 0; ch < 3; ++ch)
                                s.pix[static_cast<std::size_t>((y * side + x2) * 3 + ch)] = col[ch];
                    }
            } else {
                std::int64_t y0 = r.uniform_int(side), y1 = r.uniform_int(side);
                std::int64_t x0 = r.uniform_int(side), x1 = r.uniform_int(side);
                if (y0 > y1) std::swap(y0, y1);
                if (x0 > x1) std::swap(x0, x1);
                for (std::int64_t y = y0; y <= y1; ++y)
                    for (std::int64_t x2 = x0; x2 <= x1; ++x2)
                        for (int ch = 0; ch < 3; ++ch)
                            s.pix[static_cast<std::size_t>((y * side + x2) * 3 + ch)] = col[ch];
            }
        }
        scenes.push_back(std::move(s));
    }
    return scenes;
}

void write_csv(const std::string& path, const std::vector<std::string>& header,
               const std::vector<std::vector<std::string>>& rows) {
    std::ofstream out(path);
    if (!out) io_fail(path, "cannot open for writing");
    for (std::size_t i = 0; i < header.size(); ++i) out << (i ? "," : "") << header[i];
    out << "\n";
    for (const auto& row : rows) {
        for (std::size_t i = 0; i < row.size(); ++i) out << (i ? "," : "") << row[i];
        out << "\n";
    }
    if (!out) io_fail(path, "write failed");
}

std::string format_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

}  // namespace canvit
