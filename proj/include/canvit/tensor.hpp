#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "canvit/common.hpp"

namespace canvit {

using Shape = std::vector<std::int64_t>;

std::int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

struct TensorImpl {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;  // empty until first accumulation
    bool requires_grad = false;

    void ensure_grad() {
        if (grad.empty()) grad.assign(value.size(), 0.0);
    }
};

// Value-semantics handle over a shared buffer. Copying a Tensor aliases the
// underlying storage; ops always allocate fresh outputs.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape);
    static Tensor full(Shape shape, double v);
    static Tensor from_data(Shape shape, std::vector<double> data);
    // Trainable leaf
    static Tensor param(Shape shape, std::vector<double> data);

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const { return impl_->shape; }
    std::int64_t dim(int axis) const { return impl_->shape[static_cast<std::size_t>(axis)]; }
    int rank() const { return static_cast<int>(impl_->shape.size()); }
    std::int64_t numel() const { return static_cast<std::int64_t>(impl_->value.size()); }

    std::span<const double> value() const { return impl_->value; }
    // Direct mutation is only legal on leaves that no tape entry references.
    std::span<double> raw_value() { return impl_->value; }

    bool requires_grad() const { return impl_->requires_grad; }
    std::span<const double> grad() const { return impl_->grad; }
    bool has_grad() const { return !impl_->grad.empty(); }
    void zero_grad() {
        if (!impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
    }
    std::span<double> grad_buffer() {
        impl_->ensure_grad();
        return impl_->grad;
    }

    double item() const;

    std::shared_ptr<TensorImpl> impl() const { return impl_; }

private:
    explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}
    std::shared_ptr<TensorImpl> impl_;
    friend Tensor make_tensor(Shape, std::vector<double>, bool);
};

Tensor make_tensor(Shape shape, std::vector<double> data, bool requires_grad);

// Reverse-mode tape. One live tape per thread; construct around a forward
// pass, call backward once, destroy. Ops record onto the active tape only
// when at least one input requires grad.
class Tape {
public:
    Tape();
    ~Tape();
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    void record(std::shared_ptr<TensorImpl> out, std::function<void()> back);
    void backward(const Tensor& loss);
    std::size_t size() const { return entries_.size(); }

    static Tape* current();

private:
    struct Entry {
        std::shared_ptr<TensorImpl> out;
        std::function<void()> back;
    };
    std::vector<Entry> entries_;
    bool backward_done_ = false;
};

// FLOP instrumentation for forward passes. Counts matmul and attention
// matrix products (multiply-accumulate = 2 FLOPs); normalisation, softmax
// exponentials, rotations and other elementwise work are not counted.
class FlopScope {
public:
    explicit FlopScope(bool skip_compute = false);
    ~FlopScope();
    FlopScope(const FlopScope&) = delete;

    std::uint64_t count() const;

    static bool active();
    static bool skip_compute();
    static void add(std::uint64_t flops);
};

// ---- differentiable ops ----

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);  // elementwise
Tensor scale(const Tensor& a, double k);
Tensor gelu(const Tensor& a);  // exact erf form
Tensor matmul(const Tensor& a, const Tensor& b);  // [m,k]x[k,n]
Tensor reshape(const Tensor& a, Shape shape);
Tensor transpose(const Tensor& a, int ax0, int ax1);
Tensor concat(const std::vector<Tensor>& parts, int axis);
Tensor slice(const Tensor& a, int axis, std::int64_t start, std::int64_t len);
Tensor broadcast_to(const Tensor& a, const Shape& shape);
Tensor sum_all(const Tensor& a);
Tensor mean_axis(const Tensor& a, int axis);
Tensor sum_axis(const Tensor& a, int axis);
Tensor gather_rows(const Tensor& a, const std::vector<std::int64_t>& idx);

// LayerNorm over the last axis with learnable gain/bias of that width.
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-6);

// Fused scaled-dot-product attention. q:[h,Nq,hd] k,v:[h,Nk,hd] -> [h,Nq,hd].
// Softmax is max-subtracted row-wise; scale is 1/sqrt(hd).
Tensor softmax_sdpa(const Tensor& q, const Tensor& k, const Tensor& v);

// Rotary embedding: x:[h,N,hd], cos/sin:[N,hd/2] (constant tables). Rotates
// consecutive pairs (x0,x1) by the per-position angles.
Tensor apply_rope(const Tensor& x, const Tensor& cos_tab, const Tensor& sin_tab);

// Bilinear crop of a square image tensor img:[S,S,3] at continuous pixel
// coordinates; py/px give, per output pixel (row-major [out_h*out_w]), the
// sample location in image pixel units. Out-of-range samples clamp.
Tensor bilinear_sample(const Tensor& img, const std::vector<double>& py,
                       const std::vector<double>& px, std::int64_t out_h, std::int64_t out_w);

// Copy value into a fresh leaf with no history (gradient truncation point).
Tensor detach(const Tensor& a);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }

// y = x W + b with x:[n,in], W:[in,out], b:[out] or undefined for no bias.
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);

// ---- finite-difference gradient checking ----

struct GradCheckReport {
    double max_rel_err = 0.0;
    std::int64_t n_checked = 0;
    bool pass = false;
    std::string worst_param;  // name of the parameter holding the worst entry
};

// Central differences with step h on every element of every param; rel err
// is |a-n| / max(|a|,|n|,floor). loss_fn must be deterministic.
GradCheckReport grad_check(const std::function<Tensor()>& loss_fn,
                           const std::vector<std::pair<std::string, Tensor>>& params,
                           double tol = 1e-4, double h = 1e-5, double floor = 1e-6);

}  // namespace canvit
