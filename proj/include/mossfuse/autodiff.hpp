#pragma once

// Reverse-mode automatic differentiation on small dense tensors.
//
// The fusion network, the estimated degradation operators and all training
// losses are built from the ops below, so one backward() pass yields exact
// analytic gradients for every parameter (checked against finite differences
// in the test suite). Tensors are rank <= 3, stored channel-major
// (channel, row, col) in contiguous double buffers.

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "mossfuse/errors.hpp"

namespace moss {

using Real = double;

namespace ad {

class Shape {
public:
    Shape() : rank_(0), d_{0, 0, 0} {}
    Shape(std::initializer_list<int> dims);
    static Shape of(int a);
    static Shape of(int a, int b);
    static Shape of(int a, int b, int c);

    int rank() const { return rank_; }
    int dim(int i) const { return d_[i]; }
    int operator[](int i) const { return d_[i]; }
    long numel() const;
    bool operator==(const Shape& o) const;
    bool operator!=(const Shape& o) const { return !(*this == o); }
    std::string str() const;

private:
    int rank_;
    int d_[3];
};

using Buf = std::vector<Real>;
using BufPtr = std::shared_ptr<Buf>;

struct Node {
    Shape shape;
    BufPtr val;
    BufPtr grad;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backfn;
    std::uint64_t id = 0;
    bool requires_grad = false;
    bool leaf = false;
};

using NodePtr = std::shared_ptr<Node>;

// Enable/disable tape recording (inference runs without a graph).
bool grad_enabled();
void set_grad_enabled(bool on);

struct NoGradGuard {
    NoGradGuard() : prev_(grad_enabled()) { set_grad_enabled(false); }
    ~NoGradGuard() { set_grad_enabled(prev_); }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

class Var {
public:
    Var() = default;
    explicit Var(NodePtr n) : n_(std::move(n)) {}

    static Var leaf(const Shape& s, Buf data, bool requires_grad);
    static Var full(const Shape& s, Real fill, bool requires_grad = false);
    static Var zeros(const Shape& s, bool requires_grad = false);
    static Var scalar(Real v, bool requires_grad = false);

    bool defined() const { return n_ != nullptr; }
    const Shape& shape() const { return n_->shape; }
    long numel() const { return n_->shape.numel(); }
    const Buf& value() const;
    Buf& value_mut();  // leaves only (parameter loading)
    bool has_grad() const { return n_ && n_->grad != nullptr; }
    const Buf& grad() const;
    void zero_grad() const;
    bool requires_grad() const { return n_ && n_->requires_grad; }
    Real item() const;
    Real grad_item() const;
    NodePtr node() const { return n_; }

private:
    NodePtr n_;
};

// Runs reverse accumulation from a scalar root. With release=true (the
// default) intermediate values and grads are freed as soon as the sweep has
// consumed them, which keeps peak memory near the forward-pass footprint.
void backward(const Var& root, bool release = true);

// --- elementwise binary (limited numpy-style broadcast: dims equal or 1) ---
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var div(const Var& a, const Var& b);

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(const Var& a, const Var& b) { return mul(a, b); }
inline Var operator/(const Var& a, const Var& b) { return div(a, b); }

// --- elementwise unary ---
Var neg(const Var& a);
Var exp(const Var& a);
Var log(const Var& a);
Var sqrt(const Var& a);
Var sin(const Var& a);
Var cos(const Var& a);
Var relu(const Var& a);
Var sigmoid(const Var& a);
Var softplus(const Var& a);
Var gelu(const Var& a);

// --- reductions ---
Var sum(const Var& a);
Var mean(const Var& a);
Var colsum(const Var& a);               // (r,c) -> (1,c)
Var l1_diff(const Var& a, const Var& b);  // mean |a-b|, scalar

// --- linear algebra ---
Var matmul(const Var& a, const Var& b, bool trans_a = false, bool trans_b = false);
Var softmax_rows(const Var& a);  // (r,c), softmax over each row

// --- shape plumbing ---
Var reshape(const Var& a, const Shape& s);  // zero-copy view
Var slice_ch(const Var& a, int c0, int c1);
Var concat_ch(const std::vector<Var>& parts);

// --- feature-map ops (shapes (C,H,W)) ---
Var pointwise_conv(const Var& x, const Var& w, const Var& b = Var());  // w (Cout,Cin)
Var depthwise_conv(const Var& x, const Var& w, const Var& b = Var(),
                   int dilation = 1);  // w (C,k,k), same zero padding
Var global_avg_pool(const Var& x);     // -> (C,1,1)
Var avg_pool(const Var& x, int window);

// Layer norm over the channel axis at each spatial location.
Var layer_norm_ch(const Var& x, const Var& gamma, const Var& beta, Real eps = 1e-6);

struct BnState {
    Buf running_mean;
    Buf running_var;
    long batches_seen = 0;
};

// Batch norm over the spatial extent of each channel (batch of one image).
Var batch_norm(const Var& x, const Var& gamma, const Var& beta, BnState* state,
               bool training, Real momentum = 0.1, Real eps = 1e-5);

// --- degradation operators (differentiable w.r.t. image and operator) ---

// Per-band correlation with one shared kernel (reflect padding), then
// subsampling every `stride`-th pixel anchored at offset 0.
Var psf_conv(const Var& x, const Var& kernel, int stride);

// Per-pixel spectral mixing: out[j] = sum_i srf[i][j] * x[i]. srf is (B,b).
Var srf_apply(const Var& x, const Var& srf);

// --- raw kernels shared with the non-AD modules ---
namespace detail {
void mm(const Real* a, const Real* b, Real* c, int m, int k, int n,
        bool trans_a, bool trans_b, bool accumulate);
int reflect_index(int i, int n);
}  // namespace detail

}  // namespace ad
}  // namespace moss
