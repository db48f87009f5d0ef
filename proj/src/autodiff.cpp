#include "mossfuse/autodiff.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstring>
#include <unordered_set>

#include <Eigen/Core>

namespace moss::ad {

// ---------------------------------------------------------------- Shape ---

Shape::Shape(std::initializer_list<int> dims) : rank_(0), d_{0, 0, 0} {
    if (dims.size() == 0 || dims.size() > 3)
        throw ArgumentError("Shape: rank must be 1..3");
    for (int d : dims) {
        if (d <= 0) throw ArgumentError("Shape: dims must be positive");
        d_[rank_++] = d;
    }
}

Shape Shape::of(int a) { return Shape{a}; }
Shape Shape::of(int a, int b) { return Shape{a, b}; }
Shape Shape::of(int a, int b, int c) { return Shape{a, b, c}; }

long Shape::numel() const {
    long n = 1;
    for (int i = 0; i < rank_; ++i) n *= d_[i];
    return rank_ == 0 ? 0 : n;
}

bool Shape::operator==(const Shape& o) const {
    if (rank_ != o.rank_) return false;
    for (int i = 0; i < rank_; ++i)
        if (d_[i] != o.d_[i]) return false;
    return true;
}

std::string Shape::str() const {
    std::string s = "(";
    for (int i = 0; i < rank_; ++i) {
        if (i) s += ",";
        s += std::to_string(d_[i]);
    }
    return s + ")";
}

// ------------------------------------------------------------- tape core ---

namespace {

thread_local bool g_grad_enabled = true;
std::atomic<std::uint64_t> g_next_id{1};

NodePtr make_node(const Shape& s) {
    auto n = std::make_shared<Node>();
    n->shape = s;
    n->val = std::make_shared<Buf>(static_cast<size_t>(s.numel()));
    n->id = g_next_id.fetch_add(1, std::memory_order_relaxed);
    return n;
}

void ensure_grad(Node& n) {
    if (!n.grad) n.grad = std::make_shared<Buf>(static_cast<size_t>(n.shape.numel()), 0.0);
}

bool tracked(const Var& a) { return a.defined() && a.requires_grad(); }

bool recording(const Var& a) { return g_grad_enabled && tracked(a); }
bool recording(const Var& a, const Var& b) {
    return g_grad_enabled && (tracked(a) || tracked(b));
}

}  // namespace

bool grad_enabled() { return g_grad_enabled; }
void set_grad_enabled(bool on) { g_grad_enabled = on; }

Var Var::leaf(const Shape& s, Buf data, bool requires_grad) {
    if (static_cast<long>(data.size()) != s.numel())
        throw ArgumentError("Var::leaf: data size " + std::to_string(data.size()) +
                            " does not match shape " + s.str());
    auto n = make_node(s);
    *n->val = std::move(data);
    n->requires_grad = requires_grad;
    n->leaf = true;
    return Var(n);
}

Var Var::full(const Shape& s, Real fill, bool requires_grad) {
    return leaf(s, Buf(static_cast<size_t>(s.numel()), fill), requires_grad);
}

Var Var::zeros(const Shape& s, bool requires_grad) { return full(s, 0.0, requires_grad); }

Var Var::scalar(Real v, bool requires_grad) { return leaf(Shape{1}, Buf{v}, requires_grad); }

const Buf& Var::value() const {
    if (!n_) throw StateError("Var: undefined");
    if (!n_->val) throw StateError("Var: value was released by backward()");
    return *n_->val;
}

Buf& Var::value_mut() {
    if (!n_ || !n_->leaf) throw StateError("Var: value_mut on non-leaf");
    return *n_->val;
}

const Buf& Var::grad() const {
    if (!n_ || !n_->grad) throw StateError("Var: no gradient available");
    return *n_->grad;
}

void Var::zero_grad() const {
    if (n_ && n_->grad) std::fill(n_->grad->begin(), n_->grad->end(), 0.0);
}

Real Var::item() const {
    if (numel() != 1) throw ArgumentError("Var::item: not a scalar");
    return value()[0];
}

Real Var::grad_item() const {
    if (numel() != 1) throw ArgumentError("Var::grad_item: not a scalar");
    return grad()[0];
}

void backward(const Var& root, bool release) {
    if (!root.defined()) throw ArgumentError("backward: undefined root");
    if (root.numel() != 1) throw ArgumentError("backward: root must be a scalar");
    NodePtr rn = root.node();
    if (!rn->requires_grad)
        throw ArgumentError("backward: root does not require grad");

    // Strong references keep every reachable node alive through both passes.
    std::vector<NodePtr> order;
    std::vector<NodePtr> stack{rn};
    std::unordered_set<Node*> seen{rn.get()};
    while (!stack.empty()) {
        NodePtr n = stack.back();
        stack.pop_back();
        order.push_back(n);
        for (const auto& p : n->parents)
            if (p->requires_grad && seen.insert(p.get()).second) stack.push_back(p);
    }
    // Node ids increase monotonically as the graph is built, so descending id
    // is a valid reverse-topological order.
    std::sort(order.begin(), order.end(),
              [](const NodePtr& a, const NodePtr& b) { return a->id > b->id; });

    ensure_grad(*rn);
    (*rn->grad)[0] = 1.0;

    for (const NodePtr& n : order) {
        if (n->backfn && n->grad) n->backfn(*n);
        if (release && !n->leaf) {
            n->val.reset();
            n->grad.reset();
        }
    }
    // Break parent links and backfn captures after the sweep so node
    // destruction is flat rather than a deep recursive chain.
    for (const NodePtr& n : order) {
        n->backfn = nullptr;
        if (!n->leaf) n->parents.clear();
    }
}

// ------------------------------------------------------ broadcast binary ---

namespace {

struct BcastPlan {
    long od[3];            // output dims, padded to rank 3
    long as[3], bs[3];     // operand strides, 0 along broadcast dims
    Shape out;
    bool same = false;
};

void pad3(const Shape& s, long d[3]) {
    d[0] = d[1] = d[2] = 1;
    for (int i = 0; i < s.rank(); ++i) d[3 - s.rank() + i] = s.dim(i);
}

BcastPlan plan_bcast(const Shape& a, const Shape& b, const char* opname) {
    BcastPlan p;
    long ad[3], bd[3];
    pad3(a, ad);
    pad3(b, bd);
    for (int i = 0; i < 3; ++i) {
        if (ad[i] != bd[i] && ad[i] != 1 && bd[i] != 1)
            throw ArgumentError(std::string(opname) + ": shapes " + a.str() + " and " +
                                b.str() + " are not broadcastable");
        p.od[i] = std::max(ad[i], bd[i]);
    }
    long ast = 1, bst = 1;
    for (int i = 2; i >= 0; --i) {
        p.as[i] = (ad[i] == 1 && p.od[i] != 1) ? 0 : ast;
        p.bs[i] = (bd[i] == 1 && p.od[i] != 1) ? 0 : bst;
        ast *= ad[i];
        bst *= bd[i];
    }
    int rank = std::max(a.rank(), b.rank());
    if (rank == 1)
        p.out = Shape{static_cast<int>(p.od[2])};
    else if (rank == 2)
        p.out = Shape{static_cast<int>(p.od[1]), static_cast<int>(p.od[2])};
    else
        p.out = Shape{static_cast<int>(p.od[0]), static_cast<int>(p.od[1]),
                      static_cast<int>(p.od[2])};
    p.same = (a == b);
    return p;
}

enum class BinOp { Add, Sub, Mul, Div };

Var binary_bcast(const Var& a, const Var& b, BinOp op, const char* name) {
    if (!a.defined() || !b.defined()) throw ArgumentError(std::string(name) + ": undefined operand");
    BcastPlan p = plan_bcast(a.shape(), b.shape(), name);
    NodePtr out = make_node(p.out);
    const Buf& av = a.value();
    const Buf& bv = b.value();
    Buf& ov = *out->val;

    if (p.same) {
        const size_t n = av.size();
        switch (op) {
            case BinOp::Add: for (size_t i = 0; i < n; ++i) ov[i] = av[i] + bv[i]; break;
            case BinOp::Sub: for (size_t i = 0; i < n; ++i) ov[i] = av[i] - bv[i]; break;
            case BinOp::Mul: for (size_t i = 0; i < n; ++i) ov[i] = av[i] * bv[i]; break;
            case BinOp::Div: for (size_t i = 0; i < n; ++i) ov[i] = av[i] / bv[i]; break;
        }
    } else {
        long idx = 0;
        for (long i0 = 0; i0 < p.od[0]; ++i0)
            for (long i1 = 0; i1 < p.od[1]; ++i1) {
                long ao = i0 * p.as[0] + i1 * p.as[1];
                long bo = i0 * p.bs[0] + i1 * p.bs[1];
                for (long i2 = 0; i2 < p.od[2]; ++i2, ++idx) {
                    Real x = av[ao + i2 * p.as[2]];
                    Real y = bv[bo + i2 * p.bs[2]];
                    switch (op) {
                        case BinOp::Add: ov[idx] = x + y; break;
                        case BinOp::Sub: ov[idx] = x - y; break;
                        case BinOp::Mul: ov[idx] = x * y; break;
                        case BinOp::Div: ov[idx] = x / y; break;
                    }
                }
            }
    }

    if (recording(a, b)) {
        out->requires_grad = true;
        out->parents = {a.node(), b.node()};
        NodePtr pa = a.node(), pb = b.node();
        out->backfn = [pa, pb, p, op](Node& self) {
            const Buf& g = *self.grad;
            const bool need_a = pa->requires_grad;
            const bool need_b = pb->requires_grad;
            if (need_a) ensure_grad(*pa);
            if (need_b) ensure_grad(*pb);
            const Buf& av = *pa->val;
            const Buf& bv = *pb->val;
            long idx = 0;
            for (long i0 = 0; i0 < p.od[0]; ++i0)
                for (long i1 = 0; i1 < p.od[1]; ++i1) {
                    long ao = i0 * p.as[0] + i1 * p.as[1];
                    long bo = i0 * p.bs[0] + i1 * p.bs[1];
                    for (long i2 = 0; i2 < p.od[2]; ++i2, ++idx) {
                        long ai = ao + i2 * p.as[2];
                        long bi = bo + i2 * p.bs[2];
                        Real gv = g[idx];
                        switch (op) {
                            case BinOp::Add:
                                if (need_a) (*pa->grad)[ai] += gv;
                                if (need_b) (*pb->grad)[bi] += gv;
                                break;
                            case BinOp::Sub:
                                if (need_a) (*pa->grad)[ai] += gv;
                                if (need_b) (*pb->grad)[bi] -= gv;
                                break;
                            case BinOp::Mul:
                                if (need_a) (*pa->grad)[ai] += gv * bv[bi];
                                if (need_b) (*pb->grad)[bi] += gv * av[ai];
                                break;
                            case BinOp::Div: {
                                Real inv = 1.0 / bv[bi];
                                if (need_a) (*pa->grad)[ai] += gv * inv;
                                if (need_b) (*pb->grad)[bi] -= gv * av[ai] * inv * inv;
                                break;
                            }
                        }
                    }
                }
        };
    }
    return Var(out);
}

}  // namespace

Var add(const Var& a, const Var& b) { return binary_bcast(a, b, BinOp::Add, "add"); }
Var sub(const Var& a, const Var& b) { return binary_bcast(a, b, BinOp::Sub, "sub"); }
Var mul(const Var& a, const Var& b) { return binary_bcast(a, b, BinOp::Mul, "mul"); }
Var div(const Var& a, const Var& b) { return binary_bcast(a, b, BinOp::Div, "div"); }

// ----------------------------------------------------------------- unary ---

namespace {

// dmode: how the local derivative is computed in backward.
enum class DFrom { Input, Output };

template <class Fwd, class Dfn>
Var unary_op(const Var& a, Fwd fwd, Dfn dfn, DFrom dmode, const char* name) {
    if (!a.defined()) throw ArgumentError(std::string(name) + ": undefined operand");
    NodePtr out = make_node(a.shape());
    const Buf& av = a.value();
    Buf& ov = *out->val;
    const size_t n = av.size();
    for (size_t i = 0; i < n; ++i) ov[i] = fwd(av[i]);

    if (recording(a)) {
        out->requires_grad = true;
        out->parents = {a.node()};
        NodePtr pa = a.node();
        BufPtr saved = (dmode == DFrom::Output) ? out->val : nullptr;
        out->backfn = [pa, dfn, dmode, saved](Node& self) {
            ensure_grad(*pa);
            const Buf& g = *self.grad;
            const Buf& src = (dmode == DFrom::Output) ? *saved : *pa->val;
            Buf& pg = *pa->grad;
            for (size_t i = 0; i < g.size(); ++i) pg[i] += g[i] * dfn(src[i]);
        };
    }
    return Var(out);
}

constexpr Real kInvSqrt2 = 0.7071067811865475244;
constexpr Real kInvSqrt2Pi = 0.3989422804014326779;

}  // namespace

Var neg(const Var& a) {
    return unary_op(a, [](Real x) { return -x; }, [](Real) { return -1.0; }, DFrom::Input, "neg");
}

Var exp(const Var& a) {
    return unary_op(a, [](Real x) { return std::exp(x); },
                    [](Real y) { return y; }, DFrom::Output, "exp");
}

Var log(const Var& a) {
    for (Real v : a.value())
        if (!(v > 0.0)) throw NumericError("log: non-positive input");
    return unary_op(a, [](Real x) { return std::log(x); },
                    [](Real x) { return 1.0 / x; }, DFrom::Input, "log");
}

Var sqrt(const Var& a) {
    for (Real v : a.value())
        if (v < 0.0) throw NumericError("sqrt: negative input");
    return unary_op(a, [](Real x) { return std::sqrt(x); },
                    [](Real y) { return y > 0.0 ? 0.5 / y : 0.0; }, DFrom::Output, "sqrt");
}

Var sin(const Var& a) {
    return unary_op(a, [](Real x) { return std::sin(x); },
                    [](Real x) { return std::cos(x); }, DFrom::Input, "sin");
}

Var cos(const Var& a) {
    return unary_op(a, [](Real x) { return std::cos(x); },
                    [](Real x) { return -std::sin(x); }, DFrom::Input, "cos");
}

Var relu(const Var& a) {
    return unary_op(a, [](Real x) { return x > 0.0 ? x : 0.0; },
                    [](Real x) { return x > 0.0 ? 1.0 : 0.0; }, DFrom::Input, "relu");
}

Var sigmoid(const Var& a) {
    return unary_op(a, [](Real x) { return 1.0 / (1.0 + std::exp(-x)); },
                    [](Real y) { return y * (1.0 - y); }, DFrom::Output, "sigmoid");
}

Var softplus(const Var& a) {
    return unary_op(
        a, [](Real x) { return x > 30.0 ? x : std::log1p(std::exp(x)); },
        [](Real x) { return 1.0 / (1.0 + std::exp(-x)); }, DFrom::Input, "softplus");
}

Var gelu(const Var& a) {
    return unary_op(
        a,
        [](Real x) { return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2)); },
        [](Real x) {
            Real cdf = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
            return cdf + x * kInvSqrt2Pi * std::exp(-0.5 * x * x);
        },
        DFrom::Input, "gelu");
}

// ------------------------------------------------------------ reductions ---

Var sum(const Var& a) {
    NodePtr out = make_node(Shape{1});
    const Buf& av = a.value();
    Real s = 0.0;
    for (Real v : av) s += v;
    (*out->val)[0] = s;
    if (recording(a)) {
        out->requires_grad = true;
        out->parents = {a.node()};
        NodePtr pa = a.node();
        out->backfn = [pa](Node& self) {
            ensure_grad(*pa);
            Real g = (*self.grad)[0];
            for (Real& pg : *pa->grad) pg += g;
        };
    }
    return Var(out);
}

Var mean(const Var& a) {
    NodePtr out = make_node(Shape{1});
    const Buf& av = a.value();
    Real s = 0.0;
    for (Real v : av) s += v;
    const Real inv = 1.0 / static_cast<Real>(av.size());
    (*out->val)[0] = s * inv;
    if (recording(a)) {
        out->requires_grad = true;
        out->parents = {a.node()};
        NodePtr pa = a.node();
        out->backfn = [pa, inv](Node& self) {
            ensure_grad(*pa);
            Real g = (*self.grad)[0] * inv;
            for (Real& pg : *pa->grad) pg += g;
        };
    }
    return Var(out);
}

Var colsum(const Var& a) {
    if (a.shape().rank() != 2) throw ArgumentError("colsum: rank-2 input required");
    const int r = a.shape()[0], c = a.shape()[1];
    NodePtr out = make_node(Shape{1, c});
    const Buf& av = a.value();
    Buf& ov = *out->val;
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) ov[j] += av[static_cast<long>(i) * c + j];
    if (recording(a)) {
        out->requires_grad = true;
        out->parents = {a.node()};
        NodePtr pa = a.node();
        out->backfn = [pa, r, c](Node& self) {
            ensure_grad(*pa);
            const Buf& g = *self.grad;
            Buf& pg = *pa->grad;
            for (int i = 0; i < r; ++i)
                for (int j = 0; j < c; ++j) pg[static_cast<long>(i) * c + j] += g[j];
        };
    }
    return Var(out);
}

Var l1_diff(const Var& a, const Var& b) {
    if (a.shape() != b.shape())
        throw ArgumentError("l1_diff: shape mismatch " + a.shape().str() + " vs " +
                            b.shape().str());
    NodePtr out = make_node(Shape{1});
    const Buf& av = a.value();
    const Buf& bv = b.value();
    Real s = 0.0;
    for (size_t i = 0; i < av.size(); ++i) s += std::fabs(av[i] - bv[i]);
    const Real inv = 1.0 / static_cast<Real>(av.size());
    (*out->val)[0] = s * inv;
    if (recording(a, b)) {
        out->requires_grad = true;
        out->parents = {a.node(), b.node()};
        NodePtr pa = a.node(), pb = b.node();
        out->backfn = [pa, pb, inv](Node& self) {
            const Real g = (*self.grad)[0] * inv;
            const Buf& av = *pa->val;
            const Buf& bv = *pb->val;
            const bool need_a = pa->requires_grad;
            const bool need_b = pb->requires_grad;
            if (need_a) ensure_grad(*pa);
            if (need_b) ensure_grad(*pb);
            for (size_t i = 0; i < av.size(); ++i) {
                Real d = av[i] - bv[i];
                Real sgn = (d > 0.0) ? 1.0 : (d < 0.0 ? -1.0 : 0.0);
                if (need_a) (*pa->grad)[i] += g * sgn;
                if (need_b) (*pb->grad)[i] -= g * sgn;
            }
        };
    }
    return Var(out);
}

// -------------------------------------------------------------- mm kernel ---

namespace detail {

// Dense product delegated to Eigen; the operand layouts here are exactly
// row-major maps, so no copies are made.
void mm(const Real* a, const Real* b, Real* c, int m, int k, int n,
        bool trans_a, bool trans_b, bool accumulate) {
    using RowMat = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    Eigen::Map<const RowMat> ma(a, trans_a ? k : m, trans_a ? m : k);
    Eigen::Map<const RowMat> mb(b, trans_b ? n : k, trans_b ? k : n);
    Eigen::Map<RowMat> mc(c, m, n);
    if (!trans_a && !trans_b) {
        if (accumulate) mc.noalias() += ma * mb;
        else mc.noalias() = ma * mb;
    } else if (!trans_a && trans_b) {
        if (accumulate) mc.noalias() += ma * mb.transpose();
        else mc.noalias() = ma * mb.transpose();
    } else if (trans_a && !trans_b) {
        if (accumulate) mc.noalias() += ma.transpose() * mb;
        else mc.noalias() = ma.transpose() * mb;
    } else {
        if (accumulate) mc.noalias() += ma.transpose() * mb.transpose();
        else mc.noalias() = ma.transpose() * mb.transpose();
    }
}

int reflect_index(int i, int n) {
    if (n == 1) return 0;
    while (i < 0 || i >= n) {
        if (i < 0) i = -i - 1;
        if (i >= n) i = 2 * n - 1 - i;
    }
    return i;
}

}  // namespace detail

// ----------------------------------------------------------------- matmul ---

Var matmul(const Var& a, const Var& b, bool trans_a, bool trans_b) {
    if (a.shape().rank() != 2 || b.shape().rank() != 2)
        throw ArgumentError("matmul: rank-2 operands required");
    const int am = a.shape()[0], an = a.shape()[1];
    const int bm = b.shape()[0], bn = b.shape()[1];
    const int m = trans_a ? an : am;
    const int k = trans_a ? am : an;
    const int kb = trans_b ? bn : bm;
    const int n = trans_b ? bm : bn;
    if (k != kb)
        throw ArgumentError("matmul: inner dims mismatch " + a.shape().str() + " x " +
                            b.shape().str());
    NodePtr out = make_node(Shape{m, n});
    detail::mm(a.value().data(), b.value().data(), out->val->data(), m, k, n, trans_a,
               trans_b, false);
    if (recording(a, b)) {
        out->requires_grad = true;
        out->parents = {a.node(), b.node()};
        NodePtr pa = a.node(), pb = b.node();
        out->backfn = [pa, pb, m, k, n, trans_a, trans_b](Node& self) {
            const Real* g = self.grad->data();
            // dA and dB for the four transpose configurations.
            if (pa->requires_grad) {
                ensure_grad(*pa);
                if (!trans_a)
                    detail::mm(g, pb->val->data(), pa->grad->data(), m, n, k, false, !trans_b,
                               true);
                else
                    detail::mm(pb->val->data(), g, pa->grad->data(), k, n, m, trans_b, true,
                               true);
            }
            if (pb->requires_grad) {
                ensure_grad(*pb);
                if (!trans_b)
                    detail::mm(pa->val->data(), g, pb->grad->data(), k, m, n, !trans_a, false,
                               true);
                else
                    detail::mm(g, pa->val->data(), pb->grad->data(), n, m, k, true, trans_a,
                               true);
            }
        };
    }
    return Var(out);
}

Var softmax_rows(const Var& a) {
    if (a.shape().rank() != 2) throw ArgumentError("softmax_rows: rank-2 input required");
    const int r = a.shape()[0], c = a.shape()[1];
    NodePtr out = make_node(a.shape());
    const Buf& av = a.value();
    Buf& ov = *out->val;
    for (int i = 0; i < r; ++i) {
        const Real* row = av.data() + static_cast<long>(i) * c;
        Real* orow = ov.data() + static_cast<long>(i) * c;
        Real mx = row[0];
        for (int j = 1; j < c; ++j) mx = std::max(mx, row[j]);
        Real z = 0.0;
        for (int j = 0; j < c; ++j) {
            orow[j] = std::exp(row[j] - mx);
            z += orow[j];
        }
        const Real inv = 1.0 / z;
        for (int j = 0; j < c; ++j) orow[j] *= inv;
    }
    if (recording(a)) {
        out->requires_grad = true;
        out->parents = {a.node()};
        NodePtr pa = a.node();
        BufPtr y = out->val;
        out->backfn = [pa, y, r, c](Node& self) {
            ensure_grad(*pa);
            const Buf& g = *self.grad;
            Buf& pg = *pa->grad;
            for (int i = 0; i < r; ++i) {
                const Real* yr = y->data() + static_cast<long>(i) * c;
                const Real* gr = g.data() + static_cast<long>(i) * c;
                Real dot = 0.0;
                for (int j = 0; j < c; ++j) dot += gr[j] * yr[j];
                Real* pr = pg.data() + static_cast<long>(i) * c;
                for (int j = 0; j < c; ++j) pr[j] += yr[j] * (gr[j] - dot);
            }
        };
    }
    return Var(out);
}

// -------------------------------------------------------- shape plumbing ---

Var reshape(const Var& a, const Shape& s) {
    if (s.numel() != a.numel())
        throw ArgumentError("reshape: numel mismatch " + a.shape().str() + " -> " + s.str());
    auto n = std::make_shared<Node>();
    n->shape = s;
    n->val = a.node()->val;  // shared storage
    n->id = g_next_id.fetch_add(1, std::memory_order_relaxed);
    if (recording(a)) {
        n->requires_grad = true;
        n->parents = {a.node()};
        NodePtr pa = a.node();
        n->backfn = [pa](Node& self) {
            ensure_grad(*pa);
            const Buf& g = *self.grad;
            Buf& pg = *pa->grad;
            for (size_t i = 0; i < g.size(); ++i) pg[i] += g[i];
        };
    }
    return Var(n);
}

Var slice_ch(const Var& a, int c0, int c1) {
    if (a.shape().rank() != 3) throw ArgumentError("slice_ch: rank-3 input required");
    const int C = a.shape()[0], H = a.shape()[1], W = a.shape()[2];
    if (c0 < 0 || c1 <= c0 || c1 > C) throw ArgumentError("slice_ch: bad channel range");
    const long plane = static_cast<long>(H) * W;
    NodePtr out = make_node(Shape{c1 - c0, H, W});
    std::memcpy(out->val->data(), a.value().data() + c0 * plane,
                sizeof(Real) * static_cast<size_t>((c1 - c0) * plane));
    if (recording(a)) {
        out->requires_grad = true;
        out->parents = {a.node()};
        NodePtr pa = a.node();
        out->backfn = [pa, c0, plane](Node& self) {
            ensure_grad(*pa);
            const Buf& g = *self.grad;
            Buf& pg = *pa->grad;
            Real* dst = pg.data() + c0 * plane;
            for (size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
        };
    }
    return Var(out);
}

Var concat_ch(const std::vector<Var>& parts) {
    if (parts.empty()) throw ArgumentError("concat_ch: no inputs");
    const int H = parts[0].shape()[1], W = parts[0].shape()[2];
    int C = 0;
    for (const Var& p : parts) {
        if (p.shape().rank() != 3 || p.shape()[1] != H || p.shape()[2] != W)
            throw ArgumentError("concat_ch: spatial dims mismatch");
        C += p.shape()[0];
    }
    NodePtr out = make_node(Shape{C, H, W});
    long off = 0;
    for (const Var& p : parts) {
        std::memcpy(out->val->data() + off, p.value().data(), sizeof(Real) * p.value().size());
        off += p.numel();
    }
    bool rec = g_grad_enabled;
    bool any = false;
    for (const Var& p : parts) any = any || p.requires_grad();
    if (rec && any) {
        out->requires_grad = true;
        std::vector<NodePtr> ps;
        std::vector<long> offs;
        long o = 0;
        for (const Var& p : parts) {
            ps.push_back(p.node());
            offs.push_back(o);
            o += p.numel();
        }
        out->parents = ps;
        out->backfn = [ps, offs](Node& self) {
            const Buf& g = *self.grad;
            for (size_t t = 0; t < ps.size(); ++t) {
                if (!ps[t]->requires_grad) continue;
                ensure_grad(*ps[t]);
                Buf& pg = *ps[t]->grad;
                const Real* src = g.data() + offs[t];
                for (size_t i = 0; i < pg.size(); ++i) pg[i] += src[i];
            }
        };
    }
    return Var(out);
}

// --------------------------------------------------------- feature-map ops ---

Var pointwise_conv(const Var& x, const Var& w, const Var& b) {
    if (x.shape().rank() != 3) throw ArgumentError("pointwise_conv: rank-3 input required");
    if (w.shape().rank() != 2) throw ArgumentError("pointwise_conv: rank-2 weight required");
    const int cin = x.shape()[0], H = x.shape()[1], W = x.shape()[2];
    const int cout = w.shape()[0];
    if (w.shape()[1] != cin)
        throw ArgumentError("pointwise_conv: weight " + w.shape().str() +
                            " does not match input channels " + std::to_string(cin));
    const long hw = static_cast<long>(H) * W;
    if (b.defined() && b.numel() != cout)
        throw ArgumentError("pointwise_conv: bias size mismatch");

    NodePtr out = make_node(Shape{cout, H, W});
    detail::mm(w.value().data(), x.value().data(), out->val->data(), cout, cin,
               static_cast<int>(hw), false, false, false);
    if (b.defined()) {
        const Buf& bv = b.value();
        Buf& ov = *out->val;
        for (int co = 0; co < cout; ++co) {
            Real* row = ov.data() + co * hw;
            const Real bb = bv[co];
            for (long j = 0; j < hw; ++j) row[j] += bb;
        }
    }

    bool rec = b.defined() ? recording(x, w) || recording(b) : recording(x, w);
    if (rec) {
        out->requires_grad = true;
        out->parents = {x.node(), w.node()};
        if (b.defined()) out->parents.push_back(b.node());
        NodePtr px = x.node(), pw = w.node();
        NodePtr pb = b.defined() ? b.node() : nullptr;
        out->backfn = [px, pw, pb, cin, cout, hw](Node& self) {
            const Real* g = self.grad->data();
            if (px->requires_grad) {
                ensure_grad(*px);
                detail::mm(pw->val->data(), g, px->grad->data(), cin, cout,
                           static_cast<int>(hw), true, false, true);
            }
            if (pw->requires_grad) {
                ensure_grad(*pw);
                detail::mm(g, px->val->data(), pw->grad->data(), cout, static_cast<int>(hw),
                           cin, false, true, true);
            }
            if (pb && pb->requires_grad) {
                ensure_grad(*pb);
                Buf& bg = *pb->grad;
                for (int co = 0; co < cout; ++co) {
                    const Real* row = g + co * hw;
                    Real s = 0.0;
                    for (long j = 0; j < hw; ++j) s += row[j];
                    bg[co] += s;
                }
            }
        };
    }
    return Var(out);
}

namespace {

// Copies one channel into a zero-padded buffer of size (H+2p) x (W+2p).
void zero_pad_channel(const Real* src, Real* dst, int H, int W, int p) {
    const int Wp = W + 2 * p;
    std::fill(dst, dst + static_cast<size_t>(H + 2 * p) * Wp, 0.0);
    for (int y = 0; y < H; ++y)
        std::memcpy(dst + static_cast<size_t>(y + p) * Wp + p, src + static_cast<size_t>(y) * W,
                    sizeof(Real) * W);
}

}  // namespace

Var depthwise_conv(const Var& x, const Var& w, const Var& b, int dilation) {
    if (x.shape().rank() != 3 || w.shape().rank() != 3)
        throw ArgumentError("depthwise_conv: rank-3 input and weight required");
    const int C = x.shape()[0], H = x.shape()[1], W = x.shape()[2];
    const int k = w.shape()[1];
    if (w.shape()[0] != C || w.shape()[2] != k)
        throw ArgumentError("depthwise_conv: weight shape " + w.shape().str() +
                            " incompatible with input " + x.shape().str());
    if (k % 2 == 0) throw ConfigError("depthwise_conv: kernel size must be odd");
    if (dilation < 1) throw ConfigError("depthwise_conv: dilation must be >= 1");
    if (b.defined() && b.numel() != C) throw ArgumentError("depthwise_conv: bias size mismatch");
    const int p = (k - 1) * dilation / 2;
    const int Wp = W + 2 * p, Hp = H + 2 * p;
    const long hw = static_cast<long>(H) * W;

    NodePtr out = make_node(Shape{C, H, W});
    {
        const Buf& xv = x.value();
        const Buf& wv = w.value();
        Buf& ov = *out->val;
#pragma omp parallel for schedule(static)
        for (int c = 0; c < C; ++c) {
            std::vector<Real> pad(static_cast<size_t>(Hp) * Wp);
            zero_pad_channel(xv.data() + c * hw, pad.data(), H, W, p);
            Real* och = ov.data() + c * hw;
            const Real* wch = wv.data() + static_cast<long>(c) * k * k;
            for (int ky = 0; ky < k; ++ky)
                for (int kx = 0; kx < k; ++kx) {
                    const Real wv0 = wch[ky * k + kx];
                    if (wv0 == 0.0) continue;
                    for (int y = 0; y < H; ++y) {
                        const Real* prow = pad.data() + static_cast<size_t>(y + ky * dilation) * Wp +
                                           kx * dilation;
                        Real* orow = och + static_cast<long>(y) * W;
                        for (int xx = 0; xx < W; ++xx) orow[xx] += wv0 * prow[xx];
                    }
                }
        }
        if (b.defined()) {
            const Buf& bv = b.value();
            for (int c = 0; c < C; ++c) {
                Real* och = ov.data() + c * hw;
                for (long i = 0; i < hw; ++i) och[i] += bv[c];
            }
        }
    }

    bool rec = b.defined() ? recording(x, w) || recording(b) : recording(x, w);
    if (rec) {
        out->requires_grad = true;
        out->parents = {x.node(), w.node()};
        if (b.defined()) out->parents.push_back(b.node());
        NodePtr px = x.node(), pw = w.node();
        NodePtr pb = b.defined() ? b.node() : nullptr;
        out->backfn = [px, pw, pb, C, H, W, k, dilation, p, Hp, Wp, hw](Node& self) {
            const Buf& g = *self.grad;
            const bool need_x = px->requires_grad;
            const bool need_w = pw->requires_grad;
            if (need_x) ensure_grad(*px);
            if (need_w) ensure_grad(*pw);
            if (pb && pb->requires_grad) ensure_grad(*pb);
            const Buf& xv = *px->val;
            const Buf& wv = *pw->val;
#pragma omp parallel for schedule(static)
            for (int c = 0; c < C; ++c) {
                const Real* gch = g.data() + c * hw;
                std::vector<Real> pad(static_cast<size_t>(Hp) * Wp);
                if (need_w) zero_pad_channel(xv.data() + c * hw, pad.data(), H, W, p);
                std::vector<Real> dpad;
                if (need_x) dpad.assign(static_cast<size_t>(Hp) * Wp, 0.0);
                const Real* wch = wv.data() + static_cast<long>(c) * k * k;
                for (int ky = 0; ky < k; ++ky)
                    for (int kx = 0; kx < k; ++kx) {
                        Real wsum = 0.0;
                        const Real wv0 = wch[ky * k + kx];
                        for (int y = 0; y < H; ++y) {
                            const size_t po = static_cast<size_t>(y + ky * dilation) * Wp +
                                              kx * dilation;
                            const Real* grow = gch + static_cast<long>(y) * W;
                            if (need_w) {
                                const Real* prow = pad.data() + po;
                                for (int xx = 0; xx < W; ++xx) wsum += prow[xx] * grow[xx];
                            }
                            if (need_x) {
                                Real* drow = dpad.data() + po;
                                for (int xx = 0; xx < W; ++xx) drow[xx] += wv0 * grow[xx];
                            }
                        }
                        if (need_w)
                            (*pw->grad)[static_cast<long>(c) * k * k + ky * k + kx] += wsum;
                    }
                if (need_x) {
                    Real* dxch = px->grad->data() + c * hw;
                    for (int y = 0; y < H; ++y) {
                        const Real* drow = dpad.data() + static_cast<size_t>(y + p) * Wp + p;
                        Real* xrow = dxch + static_cast<long>(y) * W;
                        for (int xx = 0; xx < W; ++xx) xrow[xx] += drow[xx];
                    }
                }
                if (pb && pb->requires_grad) {
                    Real s = 0.0;
                    for (long i = 0; i < hw; ++i) s += gch[i];
                    (*pb->grad)[c] += s;
                }
            }
        };
    }
    return Var(out);
}

Var global_avg_pool(const Var& x) {
    if (x.shape().rank() != 3) throw ArgumentError("global_avg_pool: rank-3 input required");
    const int C = x.shape()[0];
    const long hw = static_cast<long>(x.shape()[1]) * x.shape()[2];
    NodePtr out = make_node(Shape{C, 1, 1});
    const Buf& xv = x.value();
    const Real inv = 1.0 / static_cast<Real>(hw);
    for (int c = 0; c < C; ++c) {
        const Real* ch = xv.data() + c * hw;
        Real s = 0.0;
        for (long i = 0; i < hw; ++i) s += ch[i];
        (*out->val)[c] = s * inv;
    }
    if (recording(x)) {
        out->requires_grad = true;
        out->parents = {x.node()};
        NodePtr px = x.node();
        out->backfn = [px, C, hw, inv](Node& self) {
            ensure_grad(*px);
            const Buf& g = *self.grad;
            Buf& pg = *px->grad;
            for (int c = 0; c < C; ++c) {
                const Real gv = g[c] * inv;
                Real* ch = pg.data() + c * hw;
                for (long i = 0; i < hw; ++i) ch[i] += gv;
            }
        };
    }
    return Var(out);
}

Var avg_pool(const Var& x, int window) {
    if (x.shape().rank() != 3) throw ArgumentError("avg_pool: rank-3 input required");
    if (window < 1) throw ArgumentError("avg_pool: window must be >= 1");
    const int C = x.shape()[0], H = x.shape()[1], W = x.shape()[2];
    if (H % window != 0 || W % window != 0)
        throw ArgumentError("avg_pool: dims not divisible by window");
    const int ho = H / window, wo = W / window;
    NodePtr out = make_node(Shape{C, ho, wo});
    const Buf& xv = x.value();
    Buf& ov = *out->val;
    const Real inv = 1.0 / static_cast<Real>(window * window);
    for (int c = 0; c < C; ++c)
        for (int y = 0; y < ho; ++y)
            for (int xx = 0; xx < wo; ++xx) {
                Real s = 0.0;
                for (int dy = 0; dy < window; ++dy) {
                    const Real* row = xv.data() + (static_cast<long>(c) * H + y * window + dy) * W +
                                      xx * window;
                    for (int dx = 0; dx < window; ++dx) s += row[dx];
                }
                ov[(static_cast<long>(c) * ho + y) * wo + xx] = s * inv;
            }
    if (recording(x)) {
        out->requires_grad = true;
        out->parents = {x.node()};
        NodePtr px = x.node();
        out->backfn = [px, C, H, W, ho, wo, window, inv](Node& self) {
            ensure_grad(*px);
            const Buf& g = *self.grad;
            Buf& pg = *px->grad;
            for (int c = 0; c < C; ++c)
                for (int y = 0; y < ho; ++y)
                    for (int xx = 0; xx < wo; ++xx) {
                        const Real gv = g[(static_cast<long>(c) * ho + y) * wo + xx] * inv;
                        for (int dy = 0; dy < window; ++dy) {
                            Real* row = pg.data() +
                                        (static_cast<long>(c) * H + y * window + dy) * W +
                                        xx * window;
                            for (int dx = 0; dx < window; ++dx) row[dx] += gv;
                        }
                    }
        };
    }
    return Var(out);
}

Var layer_norm_ch(const Var& x, const Var& gamma, const Var& beta, Real eps) {
    if (x.shape().rank() != 3) throw ArgumentError("layer_norm_ch: rank-3 input required");
    const int C = x.shape()[0];
    const long hw = static_cast<long>(x.shape()[1]) * x.shape()[2];
    if (gamma.numel() != C || beta.numel() != C)
        throw ArgumentError("layer_norm_ch: gamma/beta size mismatch");

    NodePtr out = make_node(x.shape());
    auto mean_buf = std::make_shared<Buf>(hw);
    auto rstd_buf = std::make_shared<Buf>(hw);
    {
        const Buf& xv = x.value();
        const Buf& gv = gamma.value();
        const Buf& bv = beta.value();
        Buf& ov = *out->val;
        const Real invc = 1.0 / static_cast<Real>(C);
        for (long p = 0; p < hw; ++p) {
            Real mu = 0.0;
            for (int c = 0; c < C; ++c) mu += xv[c * hw + p];
            mu *= invc;
            Real var = 0.0;
            for (int c = 0; c < C; ++c) {
                Real d = xv[c * hw + p] - mu;
                var += d * d;
            }
            var *= invc;
            const Real rstd = 1.0 / std::sqrt(var + eps);
            (*mean_buf)[p] = mu;
            (*rstd_buf)[p] = rstd;
            for (int c = 0; c < C; ++c)
                ov[c * hw + p] = (xv[c * hw + p] - mu) * rstd * gv[c] + bv[c];
        }
    }

    if (recording(x, gamma) || recording(beta)) {
        out->requires_grad = true;
        out->parents = {x.node(), gamma.node(), beta.node()};
        NodePtr px = x.node(), pg_ = gamma.node(), pb = beta.node();
        out->backfn = [px, pg_, pb, mean_buf, rstd_buf, C, hw](Node& self) {
            const Buf& g = *self.grad;
            const Buf& xv = *px->val;
            const Buf& gam = *pg_->val;
            const bool need_x = px->requires_grad;
            const bool need_g = pg_->requires_grad;
            const bool need_b = pb->requires_grad;
            if (need_x) ensure_grad(*px);
            if (need_g) ensure_grad(*pg_);
            if (need_b) ensure_grad(*pb);
            const Real invc = 1.0 / static_cast<Real>(C);
            std::vector<Real> xhat(C);
            for (long p = 0; p < hw; ++p) {
                const Real mu = (*mean_buf)[p];
                const Real rstd = (*rstd_buf)[p];
                Real s1 = 0.0, s2 = 0.0;
                for (int c = 0; c < C; ++c) {
                    xhat[c] = (xv[c * hw + p] - mu) * rstd;
                    const Real gc = g[c * hw + p];
                    if (need_g) (*pg_->grad)[c] += gc * xhat[c];
                    if (need_b) (*pb->grad)[c] += gc;
                    const Real gh = gc * gam[c];
                    s1 += gh;
                    s2 += gh * xhat[c];
                }
                if (need_x) {
                    for (int c = 0; c < C; ++c) {
                        const Real gh = g[c * hw + p] * gam[c];
                        (*px->grad)[c * hw + p] +=
                            rstd * (gh - invc * s1 - xhat[c] * invc * s2);
                    }
                }
            }
        };
    }
    return Var(out);
}

Var batch_norm(const Var& x, const Var& gamma, const Var& beta, BnState* state,
               bool training, Real momentum, Real eps) {
    if (x.shape().rank() != 3) throw ArgumentError("batch_norm: rank-3 input required");
    const int C = x.shape()[0];
    const long hw = static_cast<long>(x.shape()[1]) * x.shape()[2];
    if (gamma.numel() != C || beta.numel() != C)
        throw ArgumentError("batch_norm: gamma/beta size mismatch");
    if (state == nullptr) throw ArgumentError("batch_norm: null state");
    if (state->running_mean.empty()) {
        state->running_mean.assign(C, 0.0);
        state->running_var.assign(C, 1.0);
    }

    NodePtr out = make_node(x.shape());
    auto mean_buf = std::make_shared<Buf>(C);
    auto rstd_buf = std::make_shared<Buf>(C);
    {
        const Buf& xv = x.value();
        const Buf& gv = gamma.value();
        const Buf& bv = beta.value();
        Buf& ov = *out->val;
        const Real invn = 1.0 / static_cast<Real>(hw);
        for (int c = 0; c < C; ++c) {
            Real mu, var;
            if (training) {
                const Real* ch = xv.data() + c * hw;
                mu = 0.0;
                for (long i = 0; i < hw; ++i) mu += ch[i];
                mu *= invn;
                var = 0.0;
                for (long i = 0; i < hw; ++i) {
                    Real d = ch[i] - mu;
                    var += d * d;
                }
                var *= invn;  // biased, matches the statistics used at eval time
                state->running_mean[c] = (1.0 - momentum) * state->running_mean[c] + momentum * mu;
                state->running_var[c] = (1.0 - momentum) * state->running_var[c] + momentum * var;
            } else {
                mu = state->running_mean[c];
                var = state->running_var[c];
            }
            const Real rstd = 1.0 / std::sqrt(var + eps);
            (*mean_buf)[c] = mu;
            (*rstd_buf)[c] = rstd;
            const Real* ch = xv.data() + c * hw;
            Real* och = ov.data() + c * hw;
            const Real gc = gv[c], bc = bv[c];
            for (long i = 0; i < hw; ++i) och[i] = (ch[i] - mu) * rstd * gc + bc;
        }
        if (training) state->batches_seen++;
    }

    if (recording(x, gamma) || recording(beta)) {
        out->requires_grad = true;
        out->parents = {x.node(), gamma.node(), beta.node()};
        NodePtr px = x.node(), pgam = gamma.node(), pb = beta.node();
        out->backfn = [px, pgam, pb, mean_buf, rstd_buf, C, hw, training](Node& self) {
            const Buf& g = *self.grad;
            const Buf& xv = *px->val;
            const Buf& gam = *pgam->val;
            const bool need_x = px->requires_grad;
            const bool need_g = pgam->requires_grad;
            const bool need_b = pb->requires_grad;
            if (need_x) ensure_grad(*px);
            if (need_g) ensure_grad(*pgam);
            if (need_b) ensure_grad(*pb);
            const Real invn = 1.0 / static_cast<Real>(hw);
            for (int c = 0; c < C; ++c) {
                const Real mu = (*mean_buf)[c];
                const Real rstd = (*rstd_buf)[c];
                const Real* ch = xv.data() + c * hw;
                const Real* gch = g.data() + c * hw;
                Real sg = 0.0, sgx = 0.0;
                for (long i = 0; i < hw; ++i) {
                    const Real xh = (ch[i] - mu) * rstd;
                    sg += gch[i];
                    sgx += gch[i] * xh;
                }
                if (need_g) (*pgam->grad)[c] += sgx;
                if (need_b) (*pb->grad)[c] += sg;
                if (need_x) {
                    Real* dx = px->grad->data() + c * hw;
                    const Real gc = gam[c];
                    if (training) {
                        for (long i = 0; i < hw; ++i) {
                            const Real xh = (ch[i] - mu) * rstd;
                            dx[i] += gc * rstd * (gch[i] - invn * sg - xh * invn * sgx);
                        }
                    } else {
                        for (long i = 0; i < hw; ++i) dx[i] += gc * rstd * gch[i];
                    }
                }
            }
        };
    }
    return Var(out);
}

// ------------------------------------------------- degradation operators ---

Var psf_conv(const Var& x, const Var& kernel, int stride) {
    if (x.shape().rank() != 3) throw ArgumentError("psf_conv: rank-3 input required");
    if (kernel.shape().rank() != 2) throw ArgumentError("psf_conv: rank-2 kernel required");
    const int B = x.shape()[0], H = x.shape()[1], W = x.shape()[2];
    const int kh = kernel.shape()[0], kw = kernel.shape()[1];
    if (kh % 2 == 0 || kw % 2 == 0) throw ArgumentError("psf_conv: kernel dims must be odd");
    if (stride < 1) throw ArgumentError("psf_conv: stride must be >= 1");
    if (H % stride != 0 || W % stride != 0)
        throw ArgumentError("psf_conv: spatial dims not divisible by stride");
    const int ry = (kh - 1) / 2, rx = (kw - 1) / 2;
    const int ho = H / stride, wo = W / stride;
    const int Hp = H + 2 * ry, Wp = W + 2 * rx;
    const long hw = static_cast<long>(H) * W;
    const long hwo = static_cast<long>(ho) * wo;

    // Reflect-padding index maps (abc|cba style), shared across bands.
    std::vector<int> my(Hp), mx(Wp);
    for (int i = 0; i < Hp; ++i) my[i] = detail::reflect_index(i - ry, H);
    for (int i = 0; i < Wp; ++i) mx[i] = detail::reflect_index(i - rx, W);

    NodePtr out = make_node(Shape{B, ho, wo});
    {
        const Buf& xv = x.value();
        const Buf& kv = kernel.value();
        Buf& ov = *out->val;
#pragma omp parallel for schedule(static)
        for (int bnd = 0; bnd < B; ++bnd) {
            const Real* ch = xv.data() + bnd * hw;
            std::vector<Real> pad(static_cast<size_t>(Hp) * Wp);
            for (int py = 0; py < Hp; ++py) {
                const Real* srow = ch + static_cast<long>(my[py]) * W;
                Real* prow = pad.data() + static_cast<size_t>(py) * Wp;
                for (int px_ = 0; px_ < Wp; ++px_) prow[px_] = srow[mx[px_]];
            }
            Real* och = ov.data() + bnd * hwo;
            for (int yo = 0; yo < ho; ++yo)
                for (int xo = 0; xo < wo; ++xo) {
                    Real s = 0.0;
                    for (int ky = 0; ky < kh; ++ky) {
                        const Real* prow =
                            pad.data() + static_cast<size_t>(yo * stride + ky) * Wp + xo * stride;
                        const Real* krow = kv.data() + static_cast<long>(ky) * kw;
                        for (int kx = 0; kx < kw; ++kx) s += krow[kx] * prow[kx];
                    }
                    och[static_cast<long>(yo) * wo + xo] = s;
                }
        }
    }

    if (recording(x, kernel)) {
        out->requires_grad = true;
        out->parents = {x.node(), kernel.node()};
        NodePtr px = x.node(), pk = kernel.node();
        out->backfn = [px, pk, B, H, W, kh, kw, stride, ho, wo, Hp, Wp, hw, hwo, my,
                       mx](Node& self) {
            const Buf& g = *self.grad;
            const bool need_x = px->requires_grad;
            const bool need_k = pk->requires_grad;
            if (need_x) ensure_grad(*px);
            if (need_k) ensure_grad(*pk);
            const Buf& xv = *px->val;
            const Buf& kv = *pk->val;
            if (need_k) {
                // serial over bands: the kernel gradient is shared
                Buf& kg = *pk->grad;
                std::vector<Real> pad(static_cast<size_t>(Hp) * Wp);
                for (int bnd = 0; bnd < B; ++bnd) {
                    const Real* ch = xv.data() + bnd * hw;
                    for (int py = 0; py < Hp; ++py) {
                        const Real* srow = ch + static_cast<long>(my[py]) * W;
                        Real* prow = pad.data() + static_cast<size_t>(py) * Wp;
                        for (int px_ = 0; px_ < Wp; ++px_) prow[px_] = srow[mx[px_]];
                    }
                    const Real* gch = g.data() + bnd * hwo;
                    for (int yo = 0; yo < ho; ++yo)
                        for (int xo = 0; xo < wo; ++xo) {
                            const Real gv = gch[static_cast<long>(yo) * wo + xo];
                            if (gv == 0.0) continue;
                            for (int ky = 0; ky < kh; ++ky) {
                                const Real* prow = pad.data() +
                                                   static_cast<size_t>(yo * stride + ky) * Wp +
                                                   xo * stride;
                                Real* krow = kg.data() + static_cast<long>(ky) * kw;
                                for (int kx = 0; kx < kw; ++kx) krow[kx] += gv * prow[kx];
                            }
                        }
                }
            }
            if (need_x) {
#pragma omp parallel for schedule(static)
                for (int bnd = 0; bnd < B; ++bnd) {
                    std::vector<Real> dpad(static_cast<size_t>(Hp) * Wp, 0.0);
                    const Real* gch = g.data() + bnd * hwo;
                    for (int yo = 0; yo < ho; ++yo)
                        for (int xo = 0; xo < wo; ++xo) {
                            const Real gv = gch[static_cast<long>(yo) * wo + xo];
                            if (gv == 0.0) continue;
                            for (int ky = 0; ky < kh; ++ky) {
                                Real* drow = dpad.data() +
                                             static_cast<size_t>(yo * stride + ky) * Wp +
                                             xo * stride;
                                const Real* krow = kv.data() + static_cast<long>(ky) * kw;
                                for (int kx = 0; kx < kw; ++kx) drow[kx] += gv * krow[kx];
                            }
                        }
                    Real* dxch = px->grad->data() + bnd * hw;
                    for (int py = 0; py < Hp; ++py) {
                        const Real* drow = dpad.data() + static_cast<size_t>(py) * Wp;
                        Real* dxrow = dxch + static_cast<long>(my[py]) * W;
                        for (int px_ = 0; px_ < Wp; ++px_) dxrow[mx[px_]] += drow[px_];
                    }
                }
            }
        };
    }
    return Var(out);
}

Var srf_apply(const Var& x, const Var& srf) {
    if (x.shape().rank() != 3) throw ArgumentError("srf_apply: rank-3 input required");
    if (srf.shape().rank() != 2) throw ArgumentError("srf_apply: rank-2 SRF required");
    const int B = x.shape()[0], H = x.shape()[1], W = x.shape()[2];
    if (srf.shape()[0] != B)
        throw ArgumentError("srf_apply: SRF rows " + std::to_string(srf.shape()[0]) +
                            " != input bands " + std::to_string(B));
    const int b = srf.shape()[1];
    const long hw = static_cast<long>(H) * W;
    NodePtr out = make_node(Shape{b, H, W});
    // out (b,HW) = R^T (b,B) * X (B,HW)
    detail::mm(srf.value().data(), x.value().data(), out->val->data(), b, B,
               static_cast<int>(hw), true, false, false);
    if (recording(x, srf)) {
        out->requires_grad = true;
        out->parents = {x.node(), srf.node()};
        NodePtr px = x.node(), pr = srf.node();
        out->backfn = [px, pr, B, b, hw](Node& self) {
            const Real* g = self.grad->data();
            if (px->requires_grad) {
                ensure_grad(*px);
                // dX (B,HW) += R (B,b) * G (b,HW)
                detail::mm(pr->val->data(), g, px->grad->data(), B, b, static_cast<int>(hw),
                           false, false, true);
            }
            if (pr->requires_grad) {
                ensure_grad(*pr);
                // dR (B,b) += X (B,HW) * G^T (HW,b)
                detail::mm(px->val->data(), g, pr->grad->data(), B, static_cast<int>(hw), b,
                           false, true, true);
            }
        };
    }
    return Var(out);
}

}  // namespace moss::ad
