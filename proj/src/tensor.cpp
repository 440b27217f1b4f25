#include "canvit/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>
#include <sstream>

namespace canvit {

namespace {

thread_local Tape* g_tape = nullptr;

struct FlopState {
    bool active = false;
    bool skip = false;
    std::uint64_t count = 0;
};
thread_local FlopState g_flops;

bool want_grad(std::initializer_list<const Tensor*> ins) {
    if (!g_tape) return false;
    for (const Tensor* t : ins)
        if (t->defined() && t->requires_grad()) return true;
    return false;
}

void check_defined(const Tensor& t, const char* who) {
    if (!t.defined()) throw std::invalid_argument(std::string(who) + ": undefined tensor");
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* who) {
    if (a.shape() != b.shape())
        throw std::invalid_argument(std::string(who) + ": shape mismatch " + shape_str(a.shape()) +
                                    " vs " + shape_str(b.shape()));
}

std::vector<std::int64_t> row_major_strides(const Shape& s) {
    std::vector<std::int64_t> st(s.size());
    std::int64_t acc = 1;
    for (std::size_t i = s.size(); i-- > 0;) {
        st[i] = acc;
        acc *= s[i];
    }
    return st;
}

}  // namespace

std::int64_t shape_numel(const Shape& s) {
    std::int64_t n = 1;
    for (std::int64_t d : s) {
        if (d < 0) throw std::invalid_argument("negative dimension");
        n *= d;
    }
    return n;
}

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << "]";
    return os.str();
}

Tensor make_tensor(Shape shape, std::vector<double> data, bool requires_grad) {
    if (shape_numel(shape) != static_cast<std::int64_t>(data.size()))
        throw std::invalid_argument("tensor data size does not match shape " + shape_str(shape));
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = std::move(shape);
    impl->value = std::move(data);
    impl->requires_grad = requires_grad;
    return Tensor(std::move(impl));
}

Tensor Tensor::zeros(Shape shape) {
    std::vector<double> v(static_cast<std::size_t>(shape_numel(shape)), 0.0);
    return make_tensor(std::move(shape), std::move(v), false);
}

Tensor Tensor::full(Shape shape, double x) {
    std::vector<double> v(static_cast<std::size_t>(shape_numel(shape)), x);
    return make_tensor(std::move(shape), std::move(v), false);
}

Tensor Tensor::from_data(Shape shape, std::vector<double> data) {
    return make_tensor(std::move(shape), std::move(data), false);
}

Tensor Tensor::param(Shape shape, std::vector<double> data) {
    return make_tensor(std::move(shape), std::move(data), true);
}

double Tensor::item() const {
    if (numel() != 1) throw std::logic_error("item: tensor has " + std::to_string(numel()) + " elements");
    return impl_->value[0];
}

// ---- Tape ----

Tape::Tape() {
    if (g_tape) throw std::logic_error("nested tapes are not supported");
    g_tape = this;
}

Tape::~Tape() { g_tape = nullptr; }

Tape* Tape::current() { return g_tape; }

void Tape::record(std::shared_ptr<TensorImpl> out, std::function<void()> back) {
    entries_.push_back({std::move(out), std::move(back)});
}

void Tape::backward(const Tensor& loss) {
    if (backward_done_) throw std::logic_error("backward already ran on this tape");
    if (!loss.defined() || loss.numel() != 1)
        throw std::invalid_argument("backward: loss must be a defined scalar");
    backward_done_ = true;
    loss.impl()->ensure_grad();
    loss.impl()->grad[0] += 1.0;
    // Reverse creation order; every consumer of an entry's output was
    // recorded later, so its gradient is complete when we reach it. Outputs
    // that never received gradient are off the path to the loss.
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
        if (it->out->grad.empty()) continue;
        it->back();
    }
}

// ---- FlopScope ----

FlopScope::FlopScope(bool skip_compute) {
    if (g_flops.active) throw std::logic_error("nested FlopScopes are not supported");
    g_flops.active = true;
    g_flops.skip = skip_compute;
    g_flops.count = 0;
}

FlopScope::~FlopScope() { g_flops = FlopState{}; }

std::uint64_t FlopScope::count() const { return g_flops.count; }

bool FlopScope::active() { return g_flops.active; }
bool FlopScope::skip_compute() { return g_flops.active && g_flops.skip; }
void FlopScope::add(std::uint64_t flops) {
    if (g_flops.active) g_flops.count += flops;
}

// ---- elementwise ----

Tensor add(const Tensor& a, const Tensor& b) {
    check_defined(a, "add");
    check_defined(b, "add");
    check_same_shape(a, b, "add");
    const std::size_t n = a.impl()->value.size();
    std::vector<double> v(n);
    const double* pa = a.impl()->value.data();
    const double* pb = b.impl()->value.data();
    for (std::size_t i = 0; i < n; ++i) v[i] = pa[i] + pb[i];
    bool rg = want_grad({&a, &b});
    Tensor out = make_tensor(a.shape(), std::move(v), rg);
    if (rg) {
        auto ai = a.impl(), bi = b.impl(), oi = out.impl();
        Tape::current()->record(oi, [ai, bi, oi] {
            const std::size_t m = oi->grad.size();
            if (ai->requires_grad) {
                ai->ensure_grad();
                for (std::size_t i = 0; i < m; ++i) ai->grad[i] += oi->grad[i];
            }
            if (bi->requires_grad) {
                bi->ensure_grad();
                for (std::size_t i = 0; i < m; ++i) bi->grad[i] += oi->grad[i];
            }
        });
    }
    return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
    check_defined(a, "sub");
    check_defined(b, "sub");
    check_same_shape(a, b, "sub");
    const std::size_t n = a.impl()->value.size();
    std::vector<double> v(n);
    const double* pa = a.impl()->value.data();
    const double* pb = b.impl()->value.data();
    for (std::size_t i = 0; i < n; ++i) v[i] = pa[i] - pb[i];
    bool rg = want_grad({&a, &b});
    Tensor out = make_tensor(a.shape(), std::move(v), rg);
    if (rg) {
        auto ai = a.impl(), bi = b.impl(), oi = out.impl();
        Tape::current()->record(oi, [ai, bi, oi] {
            const std::size_t m = oi->grad.size();
            if (ai->requires_grad) {
                ai->ensure_grad();
                for (std::size_t i = 0; i < m; ++i) ai->grad[i] += oi->grad[i];
            }
            if (bi->requires_grad) {
                bi->ensure_grad();
                for (std::size_t i = 0; i < m; ++i) bi->grad[i] -= oi->grad[i];
            }
        });
    }
    return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
    check_defined(a, "mul");
    check_defined(b, "mul");
    check_same_shape(a, b, "mul");
    const std::size_t n = a.impl()->value.size();
    std::vector<double> v(n);
    const double* pa = a.impl()->value.data();
    const double* pb = b.impl()->value.data();
    for (std::size_t i = 0; i < n; ++i) v[i] = pa[i] * pb[i];
    bool rg = want_grad({&a, &b});
    Tensor out = make_tensor(a.shape(), std::move(v), rg);
    if (rg) {
        auto ai = a.impl(), bi = b.impl(), oi = out.impl();
        Tape::current()->record(oi, [ai, bi, oi] {
            const std::size_t m = oi->grad.size();
            if (ai->requires_grad) {
                ai->ensure_grad();
                for (std::size_t i = 0; i < m; ++i) ai->grad[i] += oi->grad[i] * bi->value[i];
            }
            if (bi->requires_grad) {
                bi->ensure_grad();
                for (std::size_t i = 0; i < m; ++i) bi->grad[i] += oi->grad[i] * ai->value[i];
            }
        });
    }
    return out;
}

Tensor scale(const Tensor& a, double k) {
    check_defined(a, "scale");
    const std::size_t n = a.impl()->value.size();
    std::vector<double> v(n);
    const double* pa = a.impl()->value.data();
    for (std::size_t i = 0; i < n; ++i) v[i] = pa[i] * k;
    bool rg = want_grad({&a});
    Tensor out = make_tensor(a.shape(), std::move(v), rg);
    if (rg) {
        auto ai = a.impl(), oi = out.impl();
        Tape::current()->record(oi, [ai, oi, k] {
            ai->ensure_grad();
            for (std::size_t i = 0; i < oi->grad.size(); ++i) ai->grad[i] += k * oi->grad[i];
        });
    }
    return out;
}

Tensor gelu(const Tensor& a) {
    check_defined(a, "gelu");
    const std::size_t n = a.impl()->value.size();
    std::vector<double> v(n);
    const double* pa = a.impl()->value.data();
    constexpr double inv_sqrt2 = 0.7071067811865475244;
    for (std::size_t i = 0; i < n; ++i) v[i] = 0.5 * pa[i] * (1.0 + std::erf(pa[i] * inv_sqrt2));
    bool rg = want_grad({&a});
    Tensor out = make_tensor(a.shape(), std::move(v), rg);
    if (rg) {
        auto ai = a.impl(), oi = out.impl();
        Tape::current()->record(oi, [ai, oi] {
            constexpr double is2 = 0.7071067811865475244;
            constexpr double inv_sqrt2pi = 0.3989422804014326779;
            ai->ensure_grad();
            for (std::size_t i = 0; i < oi->grad.size(); ++i) {
                double x = ai->value[i];
                double cdf = 0.5 * (1.0 + std::erf(x * is2));
                double pdf = inv_sqrt2pi * std::exp(-0.5 * x * x);
                ai->grad[i] += oi->grad[i] * (cdf + x * pdf);
            }
        });
    }
    return out;
}

// ---- matmul ----

Tensor matmul(const Tensor& a, const Tensor& b) {
    check_defined(a, "matmul");
    check_defined(b, "matmul");
    if (a.rank() != 2 || b.rank() != 2)
        throw std::invalid_argument("matmul: expects rank-2 tensors, got " + shape_str(a.shape()) +
                                    " x " + shape_str(b.shape()));
    const std::int64_t m = a.dim(0), k = a.dim(1), k2 = b.dim(0), n = b.dim(1);
    if (k != k2)
        throw std::invalid_argument("matmul: inner dims differ " + shape_str(a.shape()) + " x " +
                                    shape_str(b.shape()));
    FlopScope::add(2ull * static_cast<std::uint64_t>(m) * static_cast<std::uint64_t>(k) *
                   static_cast<std::uint64_t>(n));
    std::vector<double> v(static_cast<std::size_t>(m * n), 0.0);
    if (!FlopScope::skip_compute()) {
        const double* pa = a.impl()->value.data();
        const double* pb = b.impl()->value.data();
        for (std::int64_t i = 0; i < m; ++i) {
            double* vrow = v.data() + i * n;
            const double* arow = pa + i * k;
            for (std::int64_t l = 0; l < k; ++l) {
                const double av = arow[l];
                const double* brow = pb + l * n;
                for (std::int64_t j = 0; j < n; ++j) vrow[j] += av * brow[j];
            }
        }
    }
    bool rg = want_grad({&a, &b});
    Tensor out = make_tensor({m, n}, std::move(v), rg);
    if (rg) {
        auto ai = a.impl(), bi = b.impl(), oi = out.impl();
        Tape::current()->record(oi, [ai, bi, oi, m, k, n] {
            const double* g = oi->grad.data();
            if (ai->requires_grad) {
                ai->ensure_grad();
                // dA = G B^T, computed as row dots over contiguous rows
                for (std::int64_t i = 0; i < m; ++i) {
                    const double* grow = g + i * n;
                    double* darow = ai->grad.data() + i * k;
                    for (std::int64_t l = 0; l < k; ++l) {
                        const double* brow = bi->value.data() + l * n;
                        double s = 0.0;
                        for (std::int64_t j = 0; j < n; ++j) s += grow[j] * brow[j];
                        darow[l] += s;
                    }
                }
            }
            if (bi->requires_grad) {
                bi->ensure_grad();
                // dB = A^T G
                for (std::int64_t i = 0; i < m; ++i) {
                    const double* arow = ai->value.data() + i * k;
                    const double* grow = g + i * n;
                    for (std::int64_t l = 0; l < k; ++l) {
                        const double av = arow[l];
                        double* dbrow = bi->grad.data() + l * n;
                        for (std::int64_t j = 0; j < n; ++j) dbrow[j] += av * grow[j];
                    }
                }
            }
        });
    }
    return out;
}

// ---- shape ops ----

Tensor reshape(const Tensor& a, Shape shape) {
    check_defined(a, "reshape");
    if (shape_numel(shape) != a.numel())
        throw std::invalid_argument("reshape: cannot view " + shape_str(a.shape()) + " as " +
                                    shape_str(shape));
    std::vector<double> v(a.impl()->value);
    bool rg = want_grad({&a});
    Tensor out = make_tensor(std::move(shape), std::move(v), rg);
    if (rg) {
        auto ai = a.impl(), oi = out.impl();
        Tape::current()->record(oi, [ai, oi] {
            ai->ensure_grad();
            for (std::size_t i = 0; i < oi->grad.size(); ++i) ai->grad[i] += oi->grad[i];
        });
    }
    return out;
}

namespace {

void transpose_copy(const Shape& in_shape, const double* src, int ax0, int ax1, double* dst) {
    Shape out_shape = in_shape;
    std::swap(out_shape[static_cast<std::size_t>(ax0)], out_shape[static_cast<std::size_t>(ax1)]);
    auto in_st = row_major_strides(in_shape);
    auto out_st = row_major_strides(out_shape);
    // strides of the input viewed in output axis order
    auto view_st = in_st;
    std::swap(view_st[static_cast<std::size_t>(ax0)], view_st[static_cast<std::size_t>(ax1)]);
    const std::int64_t n = shape_numel(in_shape);
    const std::size_t rank = in_shape.size();
    std::vector<std::int64_t> idx(rank, 0);
    for (std::int64_t lin = 0; lin < n; ++lin) {
        std::int64_t src_off = 0;
        for (std::size_t d = 0; d < rank; ++d) src_off += idx[d] * view_st[d];
        dst[lin] = src[src_off];
        for (std::size_t d = rank; d-- > 0;) {
            if (++idx[d] < out_shape[d]) break;
            idx[d] = 0;
        }
    }
}

}  // namespace

Tensor transpose(const Tensor& a, int ax0, int ax1) {
    check_defined(a, "transpose");
    const int r = a.rank();
    if (ax0 < 0 || ax1 < 0 || ax0 >= r || ax1 >= r)
        throw std::invalid_argument("transpose: axis out of range for " + shape_str(a.shape()));
    Shape out_shape = a.shape();
    std::swap(out_shape[static_cast<std::size_t>(ax0)], out_shape[static_cast<std::size_t>(ax1)]);
    std::vector<double> v(a.impl()->value.size());
    transpose_copy(a.shape(), a.impl()->value.data(), ax0, ax1, v.data());
    bool rg = want_grad({&a});
    Tensor out = make_tensor(std::move(out_shape), std::move(v), rg);
    if (rg) {
        auto ai = a.impl(), oi = out.impl();
        Tape::current()->record(oi, [ai, oi, ax0, ax1] {
            ai->ensure_grad();
            // gradient flows through the inverse permutation (same swap)
            std::vector<double> tmp(oi->grad.size());
            transpose_copy(oi->shape, oi->grad.data(), ax0, ax1, tmp.data());
            for (std::size_t i = 0; i < tmp.size(); ++i) ai->grad[i] += tmp[i];
        });
    }
    return out;
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
    if (parts.empty()) throw std::invalid_argument("concat: no inputs");
    for (const Tensor& t : parts) check_defined(t, "concat");
    const int r = parts[0].rank();
    if (axis < 0 || axis >= r) throw std::invalid_argument("concat: axis out of range");
    Shape out_shape = parts[0].shape();
    std::int64_t total = 0;
    for (const Tensor& t : parts) {
        if (t.rank() != r) throw std::invalid_argument("concat: rank mismatch");
        for (int d = 0; d < r; ++d)
            if (d != axis && t.dim(d) != out_shape[static_cast<std::size_t>(d)])
                throw std::invalid_argument("concat: shape mismatch at axis " + std::to_string(d));
        total += t.dim(axis);
    }
    out_shape[static_cast<std::size_t>(axis)] = total;

    std::int64_t outer = 1, inner = 1;
    for (int d = 0; d < axis; ++d) outer *= out_shape[static_cast<std::size_t>(d)];
    for (int d = axis + 1; d < r; ++d) inner *= out_shape[static_cast<std::size_t>(d)];

    std::vector<double> v(static_cast<std::size_t>(shape_numel(out_shape)));
    std::int64_t off = 0;  // offset along the concat axis
    for (const Tensor& t : parts) {
        const std::int64_t ta = t.dim(axis);
        const double* src = t.impl()->value.data();
        for (std::int64_t o = 0; o < outer; ++o) {
            std::memcpy(v.data() + (o * total + off) * inner, src + o * ta * inner,
                        static_cast<std::size_t>(ta * inner) * sizeof(double));
        }
        off += ta;
    }

    bool rg = false;
    for (const Tensor& t : parts)
        if (g_tape && t.requires_grad()) rg = true;
    Tensor out = make_tensor(std::move(out_shape), std::move(v), rg);
    if (rg) {
        std::vector<std::shared_ptr<TensorImpl>> ins;
        ins.reserve(parts.size());
        for (const Tensor& t : parts) ins.push_back(t.impl());
        auto oi = out.impl();
        Tape::current()->record(oi, [ins, oi, axis, outer, inner, total] {
            std::int64_t off2 = 0;
            for (const auto& ti : ins) {
                const std::int64_t ta = ti->shape[static_cast<std::size_t>(axis)];
                if (ti->requires_grad) {
                    ti->ensure_grad();
                    for (std::int64_t o = 0; o < outer; ++o) {
                        const double* g = oi->grad.data() + (o * total + off2) * inner;
                        double* dst = ti->grad.data() + o * ta * inner;
                        for (std::int64_t i = 0; i < ta * inner; ++i) dst[i] += g[i];
                    }
                }
                off2 += ta;
            }
        });
    }
    return out;
}

Tensor slice(const Tensor& a, int axis, std::int64_t start, std::int64_t len) {
    check_defined(a, "slice");
    const int r = a.rank();
    if (axis < 0 || axis >= r) throw std::invalid_argument("slice: axis out of range");
    const std::int64_t da = a.dim(axis);
    if (start < 0 || len < 0 || start + len > da)
        throw std::invalid_argument("slice: range [" + std::to_string(start) + "," +
                                    std::to_string(start + len) + ") outside axis of size " +
                                    std::to_string(da));
    Shape out_shape = a.shape();
    out_shape[static_cast<std::size_t>(axis)] = len;
    std::int64_t outer = 1, inner = 1;
    for (int d = 0; d < axis; ++d) outer *= a.dim(d);
    for (int d = axis + 1; d < r; ++d) inner *= a.dim(d);

    std::vector<double> v(static_cast<std::size_t>(shape_numel(out_shape)));
    const double* src = a.impl()->value.data();
    for (std::int64_t o = 0; o < outer; ++o)
        std::memcpy(v.data() + o * len * inner, src + (o * da + start) * inner,
                    static_cast<std::size_t>(len * inner) * sizeof(double));

    bool rg = want_grad({&a});
    Tensor out = make_tensor(std::move(out_shape), std::move(v), rg);
    if (rg) {
        auto ai = a.impl(), oi = out.impl();
        Tape::current()->record(oi, [ai, oi, start, len, outer, inner, da] {
            ai->ensure_grad();
            for (std::int64_t o = 0; o < outer; ++o) {
                const double* g = oi->grad.data() + o * len * inner;
                double* dst = ai->grad.data() + (o * da + start) * inner;
                for (std::int64_t i = 0; i < len * inner; ++i) dst[i] += g[i];
            }
        });
    }
    return out;
}

Tensor broadcast_to(const Tensor& a, const Shape& shape) {
    check_defined(a, "broadcast_to");
    const Shape& in = a.shape();
    if (in.size() > shape.size())
        throw std::invalid_argument("broadcast_to: rank shrinks " + shape_str(in) + " -> " +
                                    shape_str(shape));
    const std::size_t pad = shape.size() - in.size();
    // source strides aligned to the target shape; 0 where broadcasting
    std::vector<std::int64_t> st(shape.size(), 0);
    auto in_st = row_major_strides(in);
    for (std::size_t d = 0; d < in.size(); ++d) {
        if (in[d] == shape[pad + d])
            st[pad + d] = in_st[d];
        else if (in[d] == 1)
            st[pad + d] = 0;
        else
            throw std::invalid_argument("broadcast_to: " + shape_str(in) + " -> " + shape_str(shape));
    }
    const std::int64_t n = shape_numel(shape);
    std::vector<double> v(static_cast<std::size_t>(n));
    const double* src = a.impl()->value.data();
    const std::size_t rank = shape.size();
    std::vector<std::int64_t> idx(rank, 0);
    for (std::int64_t lin = 0; lin < n; ++lin) {
        std::int64_t off = 0;
        for (std::size_t d = 0; d < rank; ++d) off += idx[d] * st[d];
        v[static_cast<std::size_t>(lin)] = src[off];
        for (std::size_t d = rank; d-- > 0;) {
            if (++idx[d] < shape[d]) break;
            idx[d] = 0;
        }
    }
    bool rg = want_grad({&a});
    Tensor out = make_tensor(shape, std::move(v), rg);
    if (rg) {
        auto ai = a.impl(), oi = out.impl();
        Tape::current()->record(oi, [ai, oi, st, rank] {
            ai->ensure_grad();
            const Shape& os = oi->shape;
            std::vector<std::int64_t> ix(rank, 0);
            const std::int64_t m = static_cast<std::int64_t>(oi->grad.size());
            for (std::int64_t lin = 0; lin < m; ++lin) {
                std::int64_t off = 0;
                for (std::size_t d = 0; d < rank; ++d) off += ix[d] * st[d];
                ai->grad[static_cast<std::size_t>(off)] += oi->grad[static_cast<std::size_t>(lin)];
                for (std::size_t d = rank; d-- > 0;) {
                    if (++ix[d] < os[d]) break;
                    ix[d] = 0;
                }
            }
        });
    }
    return out;
}

Tensor sum_all(const Tensor& a) {
    check_defined(a, "sum_all");
    double s = 0.0;
    for (double x : a.impl()->value) s += x;
    bool rg = want_grad({&a});
    Tensor out = make_tensor({1}, {s}, rg);
    if (rg) {
        auto ai = a.impl(), oi = out.impl();
        Tape::current()->record(oi, [ai, oi] {
            ai->ensure_grad();
            const double g = oi->grad[0];
            for (std::size_t i = 0; i < ai->grad.size(); ++i) ai->grad[i] += g;
        });
    }
    return out;
}

namespace {

Tensor reduce_axis(const Tensor& a, int axis, bool mean, const char* who) {
    check_defined(a, who);
    const int r = a.rank();
    if (axis < 0 || axis >= r) throw std::invalid_argument(std::string(who) + ": axis out of range");
    const std::int64_t da = a.dim(axis);
    if (da == 0) throw std::invalid_argument(std::string(who) + ": empty axis");
    Shape out_shape;
    for (int d = 0; d < r; ++d)
        if (d != axis) out_shape.push_back(a.dim(d));
    if (out_shape.empty()) out_shape.push_back(1);

    std::int64_t outer = 1, inner = 1;
    for (int d = 0; d < axis; ++d) outer *= a.dim(d);
    for (int d = axis + 1; d < r; ++d) inner *= a.dim(d);

    const double inv = mean ? 1.0 / static_cast<double>(da) : 1.0;
    std::vector<double> v(static_cast<std::size_t>(outer * inner), 0.0);
    const double* src = a.impl()->value.data();
    for (std::int64_t o = 0; o < outer; ++o)
        for (std::int64_t l = 0; l < da; ++l) {
            const double* s = src + (o * da + l) * inner;
            double* dst = v.data() + o * inner;
            for (std::int64_t i = 0; i < inner; ++i) dst[i] += s[i];
        }
    if (mean)
        for (double& x : v) x *= inv;

    bool rg = want_grad({&a});
    Tensor out = make_tensor(std::move(out_shape), std::move(v), rg);
    if (rg) {
        auto ai = a.impl(), oi = out.impl();
        Tape::current()->record(oi, [ai, oi, outer, inner, da, inv] {
            ai->ensure_grad();
            for (std::int64_t o = 0; o < outer; ++o)
                for (std::int64_t l = 0; l < da; ++l) {
                    const double* g = oi->grad.data() + o * inner;
                    double* dst = ai->grad.data() + (o * da + l) * inner;
                    for (std::int64_t i = 0; i < inner; ++i) dst[i] += g[i] * inv;
                }
        });
    }
    return out;
}

}  // namespace

Tensor mean_axis(const Tensor& a, int axis) { return reduce_axis(a, axis, true, "mean_axis"); }
Tensor sum_axis(const Tensor& a, int axis) { return reduce_axis(a, axis, false, "sum_axis"); }

Tensor gather_rows(const Tensor& a, const std::vector<std::int64_t>& idx) {
    check_defined(a, "gather_rows");
    if (a.rank() < 1) throw std::invalid_argument("gather_rows: rank-0 input");
    const std::int64_t n_rows = a.dim(0);
    std::int64_t inner = 1;
    for (int d = 1; d < a.rank(); ++d) inner *= a.dim(d);
    for (std::int64_t i : idx)
        if (i < 0 || i >= n_rows)
            throw std::invalid_argument("gather_rows: index " + std::to_string(i) +
                                        " outside [0," + std::to_string(n_rows) + ")");
    Shape out_shape = a.shape();
    out_shape[0] = static_cast<std::int64_t>(idx.size());
    std::vector<double> v(idx.size() * static_cast<std::size_t>(inner));
    const double* src = a.impl()->value.data();
    for (std::size_t r = 0; r < idx.size(); ++r)
        std::memcpy(v.data() + r * static_cast<std::size_t>(inner), src + idx[r] * inner,
                    static_cast<std::size_t>(inner) * sizeof(double));
    bool rg = want_grad({&a});
    Tensor out = make_tensor(std::move(out_shape), std::move(v), rg);
    if (rg) {
        auto ai = a.impl(), oi = out.impl();
        Tape::current()->record(oi, [ai, oi, idx, inner] {
            ai->ensure_grad();
            for (std::size_t r = 0; r < idx.size(); ++r) {
                const double* g = oi->grad.data() + r * static_cast<std::size_t>(inner);
                double* dst = ai->grad.data() + idx[r] * inner;
                for (std::int64_t i = 0; i < inner; ++i) dst[i] += g[i];
            }
        });
    }
    return out;
}

// ---- layer norm ----

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
    check_defined(x, "layer_norm");
    check_defined(gain, "layer_norm");
    check_defined(bias, "layer_norm");
    if (x.rank() < 1) throw std::invalid_argument("layer_norm: rank-0 input");
    const std::int64_t d = x.dim(x.rank() - 1);
    if (gain.rank() != 1 || gain.dim(0) != d || bias.rank() != 1 || bias.dim(0) != d)
        throw std::invalid_argument("layer_norm: gain/bias must be [" + std::to_string(d) + "]");
    const std::int64_t rows = x.numel() / d;
    std::vector<double> v(static_cast<std::size_t>(x.numel()));
    std::vector<double> inv_sigma(static_cast<std::size_t>(rows));
    std::vector<double> mu(static_cast<std::size_t>(rows));
    const double* px = x.impl()->value.data();
    const double* pg = gain.impl()->value.data();
    const double* pb = bias.impl()->value.data();
    for (std::int64_t r = 0; r < rows; ++r) {
        const double* row = px + r * d;
        double m = 0.0;
        for (std::int64_t i = 0; i < d; ++i) m += row[i];
        m /= static_cast<double>(d);
        double var = 0.0;
        for (std::int64_t i = 0; i < d; ++i) {
            double c = row[i] - m;
            var += c * c;
        }
        var /= static_cast<double>(d);
        const double is = 1.0 / std::sqrt(var + eps);
        mu[static_cast<std::size_t>(r)] = m;
        inv_sigma[static_cast<std::size_t>(r)] = is;
        double* orow = v.data() + r * d;
        for (std::int64_t i = 0; i < d; ++i) orow[i] = pg[i] * ((row[i] - m) * is) + pb[i];
    }
    bool rg = want_grad({&x, &gain, &bias});
    Tensor out = make_tensor(x.shape(), std::move(v), rg);
    if (rg) {
        auto xi = x.impl(), gi = gain.impl(), bi = bias.impl(), oi = out.impl();
        Tape::current()->record(oi, [xi, gi, bi, oi, rows, d, mu, inv_sigma] {
            const double* px2 = xi->value.data();
            const double* pg2 = gi->value.data();
            if (xi->requires_grad) xi->ensure_grad();
            if (gi->requires_grad) gi->ensure_grad();
            if (bi->requires_grad) bi->ensure_grad();
            const double invd = 1.0 / static_cast<double>(d);
            std::vector<double> xhat(static_cast<std::size_t>(d));
            for (std::int64_t r = 0; r < rows; ++r) {
                const double* row = px2 + r * d;
                const double* g = oi->grad.data() + r * d;
                const double is = inv_sigma[static_cast<std::size_t>(r)];
                const double m = mu[static_cast<std::size_t>(r)];
                for (std::int64_t i = 0; i < d; ++i) xhat[static_cast<std::size_t>(i)] = (row[i] - m) * is;
                if (gi->requires_grad)
                    for (std::int64_t i = 0; i < d; ++i)
                        gi->grad[static_cast<std::size_t>(i)] += g[i] * xhat[static_cast<std::size_t>(i)];
                if (bi->requires_grad)
                    for (std::int64_t i = 0; i < d; ++i) bi->grad[static_cast<std::size_t>(i)] += g[i];
                if (xi->requires_grad) {
                    // dxhat = g * gain; dx = is*(dxhat - mean(dxhat) - xhat*mean(dxhat*xhat))
                    double s1 = 0.0, s2 = 0.0;
                    for (std::int64_t i = 0; i < d; ++i) {
                        double dxh = g[i] * pg2[i];
                        s1 += dxh;
                        s2 += dxh * xhat[static_cast<std::size_t>(i)];
                    }
                    s1 *= invd;
                    s2 *= invd;
                    double* dx = xi->grad.data() + r * d;
                    for (std::int64_t i = 0; i < d; ++i) {
                        double dxh = g[i] * pg2[i];
                        dx[i] += is * (dxh - s1 - xhat[static_cast<std::size_t>(i)] * s2);
                    }
                }
            }
        });
    }
    return out;
}

// ---- attention ----

Tensor softmax_sdpa(const Tensor& q, const Tensor& k, const Tensor& v) {
    check_defined(q, "softmax_sdpa");
    check_defined(k, "softmax_sdpa");
    check_defined(v, "softmax_sdpa");
    if (q.rank() != 3 || k.rank() != 3 || v.rank() != 3)
        throw std::invalid_argument("softmax_sdpa: expects [heads,N,head_dim] tensors");
    const std::int64_t h = q.dim(0), nq = q.dim(1), hd = q.dim(2);
    const std::int64_t nk = k.dim(1);
    if (k.dim(0) != h || v.dim(0) != h || k.dim(2) != hd || v.dim(1) != nk || v.dim(2) != hd)
        throw std::invalid_argument("softmax_sdpa: shape mismatch " + shape_str(q.shape()) + " " +
                                    shape_str(k.shape()) + " " + shape_str(v.shape()));
    FlopScope::add(4ull * static_cast<std::uint64_t>(nq) * static_cast<std::uint64_t>(nk) *
                   static_cast<std::uint64_t>(h) * static_cast<std::uint64_t>(hd));
    const double sc = 1.0 / std::sqrt(static_cast<double>(hd));
    std::vector<double> out_v(static_cast<std::size_t>(h * nq * hd), 0.0);
    // attention weights kept for the backward pass
    auto attn = std::make_shared<std::vector<double>>();
    const bool skip = FlopScope::skip_compute();
    if (!skip) {
        attn->assign(static_cast<std::size_t>(h * nq * nk), 0.0);
        const double* pq = q.impl()->value.data();
        const double* pk = k.impl()->value.data();
        const double* pv = v.impl()->value.data();
        for (std::int64_t hh = 0; hh < h; ++hh) {
            const double* qh = pq + hh * nq * hd;
            const double* kh = pk + hh * nk * hd;
            const double* vh = pv + hh * nk * hd;
            double* ah = attn->data() + hh * nq * nk;
            double* oh = out_v.data() + hh * nq * hd;
            for (std::int64_t i = 0; i < nq; ++i) {
                double* arow = ah + i * nk;
                const double* qrow = qh + i * hd;
                double mx = -HUGE_VAL;
                for (std::int64_t j = 0; j < nk; ++j) {
                    const double* krow = kh + j * hd;
                    double s = 0.0;
                    for (std::int64_t l = 0; l < hd; ++l) s += qrow[l] * krow[l];
                    s *= sc;
                    arow[j] = s;
                    if (s > mx) mx = s;
                }
                double z = 0.0;
                for (std::int64_t j = 0; j < nk; ++j) {
                    arow[j] = std::exp(arow[j] - mx);
                    z += arow[j];
                }
                const double iz = 1.0 / z;
                double* orow = oh + i * hd;
                for (std::int64_t j = 0; j < nk; ++j) {
                    const double a = arow[j] * iz;
                    arow[j] = a;
                    const double* vrow = vh + j * hd;
                    for (std::int64_t l = 0; l < hd; ++l) orow[l] += a * vrow[l];
                }
            }
        }
    }
    bool rg = want_grad({&q, &k, &v});
    Tensor out = make_tensor({h, nq, hd}, std::move(out_v), rg);
    if (rg) {
        auto qi = q.impl(), ki = k.impl(), vi = v.impl(), oi = out.impl();
        Tape::current()->record(oi, [qi, ki, vi, oi, attn, h, nq, nk, hd, sc] {
            if (qi->requires_grad) qi->ensure_grad();
            if (ki->requires_grad) ki->ensure_grad();
            if (vi->requires_grad) vi->ensure_grad();
            std::vector<double> ds(static_cast<std::size_t>(nq * nk));
            for (std::int64_t hh = 0; hh < h; ++hh) {
                const double* g = oi->grad.data() + hh * nq * hd;
                const double* ah = attn->data() + hh * nq * nk;
                const double* qh = qi->value.data() + hh * nq * hd;
                const double* kh = ki->value.data() + hh * nk * hd;
                const double* vh = vi->value.data() + hh * nk * hd;
                if (vi->requires_grad) {
                    double* dvh = vi->grad.data() + hh * nk * hd;
                    // dV = A^T G
                    for (std::int64_t i = 0; i < nq; ++i) {
                        const double* arow = ah + i * nk;
                        const double* grow = g + i * hd;
                        for (std::int64_t j = 0; j < nk; ++j) {
                            const double a = arow[j];
                            double* dvrow = dvh + j * hd;
                            for (std::int64_t l = 0; l < hd; ++l) dvrow[l] += a * grow[l];
                        }
                    }
                }
                // dS = A o (dA - rowsum(dA o A)) with dA = G V^T
                for (std::int64_t i = 0; i < nq; ++i) {
                    const double* arow = ah + i * nk;
                    const double* grow = g + i * hd;
                    double* dsrow = ds.data() + i * nk;
                    double dot = 0.0;
                    for (std::int64_t j = 0; j < nk; ++j) {
                        const double* vrow = vh + j * hd;
                        double da = 0.0;
                        for (std::int64_t l = 0; l < hd; ++l) da += grow[l] * vrow[l];
                        dsrow[j] = da;
                        dot += da * arow[j];
                    }
                    for (std::int64_t j = 0; j < nk; ++j) dsrow[j] = arow[j] * (dsrow[j] - dot);
                }
                if (qi->requires_grad) {
                    double* dqh = qi->grad.data() + hh * nq * hd;
                    for (std::int64_t i = 0; i < nq; ++i) {
                        const double* dsrow = ds.data() + i * nk;
                        double* dqrow = dqh + i * hd;
                        for (std::int64_t j = 0; j < nk; ++j) {
                            const double w = sc * dsrow[j];
                            const double* krow = kh + j * hd;
                            for (std::int64_t l = 0; l < hd; ++l) dqrow[l] += w * krow[l];
                        }
                    }
                }
                if (ki->requires_grad) {
                    double* dkh = ki->grad.data() + hh * nk * hd;
                    for (std::int64_t i = 0; i < nq; ++i) {
                        const double* dsrow = ds.data() + i * nk;
                        const double* qrow = qh + i * hd;
                        for (std::int64_t j = 0; j < nk; ++j) {
                            const double w = sc * dsrow[j];
                            double* dkrow = dkh + j * hd;
                            for (std::int64_t l = 0; l < hd; ++l) dkrow[l] += w * qrow[l];
                        }
                    }
                }
            }
        });
    }
    return out;
}

Tensor apply_rope(const Tensor& x, const Tensor& cos_tab, const Tensor& sin_tab) {
    check_defined(x, "apply_rope");
    check_defined(cos_tab, "apply_rope");
    check_defined(sin_tab, "apply_rope");
    if (x.rank() != 3) throw std::invalid_argument("apply_rope: expects [heads,N,head_dim]");
    const std::int64_t h = x.dim(0), n = x.dim(1), hd = x.dim(2);
    if (hd % 2 != 0) throw std::invalid_argument("apply_rope: head_dim must be even");
    const std::int64_t np = hd / 2;
    if (cos_tab.rank() != 2 || cos_tab.dim(0) != n || cos_tab.dim(1) != np ||
        sin_tab.shape() != cos_tab.shape())
        throw std::invalid_argument("apply_rope: tables must be [" + std::to_string(n) + "," +
                                    std::to_string(np) + "]");
    std::vector<double> v(static_cast<std::size_t>(h * n * hd));
    const double* px = x.impl()->value.data();
    const double* pc = cos_tab.impl()->value.data();
    const double* ps = sin_tab.impl()->value.data();
    for (std::int64_t hh = 0; hh < h; ++hh)
        for (std::int64_t i = 0; i < n; ++i) {
            const double* row = px + (hh * n + i) * hd;
            double* orow = v.data() + (hh * n + i) * hd;
            const double* c = pc + i * np;
            const double* s = ps + i * np;
            for (std::int64_t p = 0; p < np; ++p) {
                const double x0 = row[2 * p], x1 = row[2 * p + 1];
                orow[2 * p] = c[p] * x0 - s[p] * x1;
                orow[2 * p + 1] = s[p] * x0 + c[p] * x1;
            }
        }
    bool rg = want_grad({&x});
    Tensor out = make_tensor(x.shape(), std::move(v), rg);
    if (rg) {
        auto xi = x.impl(), ci = cos_tab.impl(), si = sin_tab.impl(), oi = out.impl();
        Tape::current()->record(oi, [xi, ci, si, oi, h, n, np] {
            xi->ensure_grad();
            const double* pc2 = ci->value.data();
            const double* ps2 = si->value.data();
            const std::int64_t hd2 = 2 * np;
            for (std::int64_t hh = 0; hh < h; ++hh)
                for (std::int64_t i = 0; i < n; ++i) {
                    const double* g = oi->grad.data() + (hh * n + i) * hd2;
                    double* dx = xi->grad.data() + (hh * n + i) * hd2;
                    const double* c = pc2 + i * np;
                    const double* s = ps2 + i * np;
                    for (std::int64_t p = 0; p < np; ++p) {
                        const double g0 = g[2 * p], g1 = g[2 * p + 1];
                        dx[2 * p] += c[p] * g0 + s[p] * g1;
                        dx[2 * p + 1] += -s[p] * g0 + c[p] * g1;
                    }
                }
        });
    }
    return out;
}

Tensor bilinear_sample(const Tensor& img, const std::vector<double>& py,
                       const std::vector<double>& px, std::int64_t out_h, std::int64_t out_w) {
    check_defined(img, "bilinear_sample");
    if (img.rank() != 3 || img.dim(0) != img.dim(1) || img.dim(2) != 3)
        throw std::invalid_argument("bilinear_sample: image must be [S,S,3], got " +
                                    shape_str(img.shape()));
    const std::int64_t n = out_h * out_w;
    if (static_cast<std::int64_t>(py.size()) != n || static_cast<std::int64_t>(px.size()) != n)
        throw std::invalid_argument("bilinear_sample: coordinate count mismatch");
    const std::int64_t s = img.dim(0);
    const double* src = img.impl()->value.data();
    std::vector<double> v(static_cast<std::size_t>(n * 3));
    // corner indices and weights, reused by the backward scatter
    auto taps = std::make_shared<std::vector<std::array<double, 3>>>();  // fy, fx packed below
    std::vector<std::int64_t> y0s(static_cast<std::size_t>(n)), x0s(static_cast<std::size_t>(n)),
        y1s(static_cast<std::size_t>(n)), x1s(static_cast<std::size_t>(n));
    std::vector<double> fys(static_cast<std::size_t>(n)), fxs(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) {
        double yc = std::clamp(py[static_cast<std::size_t>(i)], 0.0, static_cast<double>(s - 1));
        double xc = std::clamp(px[static_cast<std::size_t>(i)], 0.0, static_cast<double>(s - 1));
        std::int64_t y0 = static_cast<std::int64_t>(std::floor(yc));
        std::int64_t x0 = static_cast<std::int64_t>(std::floor(xc));
        y0 = std::min(y0, s - 1);
        x0 = std::min(x0, s - 1);
        const std::int64_t y1 = std::min(y0 + 1, s - 1);
        const std::int64_t x1 = std::min(x0 + 1, s - 1);
        const double fy = yc - static_cast<double>(y0);
        const double fx = xc - static_cast<double>(x0);
        y0s[static_cast<std::size_t>(i)] = y0;
        x0s[static_cast<std::size_t>(i)] = x0;
        y1s[static_cast<std::size_t>(i)] = y1;
        x1s[static_cast<std::size_t>(i)] = x1;
        fys[static_cast<std::size_t>(i)] = fy;
        fxs[static_cast<std::size_t>(i)] = fx;
        for (int c = 0; c < 3; ++c) {
            const double v00 = src[(y0 * s + x0) * 3 + c];
            const double v01 = src[(y0 * s + x1) * 3 + c];
            const double v10 = src[(y1 * s + x0) * 3 + c];
            const double v11 = src[(y1 * s + x1) * 3 + c];
            v[static_cast<std::size_t>(i * 3 + c)] =
                (1 - fy) * ((1 - fx) * v00 + fx * v01) + fy * ((1 - fx) * v10 + fx * v11);
        }
    }
    (void)taps;
    bool rg = want_grad({&img});
    Tensor out = make_tensor({out_h, out_w, 3}, std::move(v), rg);
    if (rg) {
        auto ii = img.impl(), oi = out.impl();
        Tape::current()->record(oi, [ii, oi, y0s, x0s, y1s, x1s, fys, fxs, n, s] {
            ii->ensure_grad();
            for (std::int64_t i = 0; i < n; ++i) {
                const double fy = fys[static_cast<std::size_t>(i)];
                const double fx = fxs[static_cast<std::size_t>(i)];
                const std::int64_t y0 = y0s[static_cast<std::size_t>(i)];
                const std::int64_t x0 = x0s[static_cast<std::size_t>(i)];
                const std::int64_t y1 = y1s[static_cast<std::size_t>(i)];
                const std::int64_t x1 = x1s[static_cast<std::size_t>(i)];
                for (int c = 0; c < 3; ++c) {
                    const double g = oi->grad[static_cast<std::size_t>(i * 3 + c)];
                    ii->grad[static_cast<std::size_t>((y0 * s + x0) * 3 + c)] += g * (1 - fy) * (1 - fx);
                    ii->grad[static_cast<std::size_t>((y0 * s + x1) * 3 + c)] += g * (1 - fy) * fx;
                    ii->grad[static_cast<std::size_t>((y1 * s + x0) * 3 + c)] += g * fy * (1 - fx);
                    ii->grad[static_cast<std::size_t>((y1 * s + x1) * 3 + c)] += g * fy * fx;
                }
            }
        });
    }
    return out;
}

Tensor detach(const Tensor& a) {
    check_defined(a, "detach");
    std::vector<double> v(a.impl()->value);
    return make_tensor(a.shape(), std::move(v), false);
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
    Tensor y = matmul(x, w);
    if (!b.defined()) return y;
    return add(y, broadcast_to(b, y.shape()));
}

// ---- gradient checking ----

GradCheckReport grad_check(const std::function<Tensor()>& loss_fn,
                           const std::vector<std::pair<std::string, Tensor>>& params, double tol,
                           double h, double floor) {
    for (const auto& [name, p] : params) {
        if (!p.defined() || !p.requires_grad())
            throw std::invalid_argument("grad_check: param '" + name + "' is not a trainable leaf");
        const_cast<Tensor&>(p).zero_grad();
    }
    std::vector<std::vector<double>> analytic;
    {
        Tape tape;
        Tensor loss = loss_fn();
        tape.backward(loss);
    }
    analytic.reserve(params.size());
    for (const auto& [name, p] : params) {
        if (p.has_grad())
            analytic.emplace_back(p.grad().begin(), p.grad().end());
        else
            analytic.emplace_back(static_cast<std::size_t>(p.numel()), 0.0);
    }

    GradCheckReport rep;
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        Tensor p = params[pi].second;
        auto vals = p.raw_value();
        for (std::size_t e = 0; e < vals.size(); ++e) {
            const double keep = vals[e];
            vals[e] = keep + h;
            const double fp = loss_fn().item();
            vals[e] = keep - h;
            const double fm = loss_fn().item();
            vals[e] = keep;
            const double num = (fp - fm) / (2.0 * h);
            const double ana = analytic[pi][e];
            const double rel = std::abs(ana - num) / std::max({std::abs(ana), std::abs(num), floor});
            if (rel > rep.max_rel_err) {
                rep.max_rel_err = rel;
                rep.worst_param = params[pi].first;
            }
            ++rep.n_checked;
        }
    }
    rep.pass = rep.max_rel_err <= tol;
    return rep;
}

}  // namespace canvit
