#pragma once

// Dense tensors with reverse-mode automatic differentiation.
//
// Model arithmetic runs in single precision (Tensor = TensorT<float>); the
// same kernels instantiate at double precision (DTensor) for verification
// oracles. Reductions accumulate sequentially in row-major index order and
// per-element matmul accumulation is ascending in k, independent of blocking
// and threading, so evaluation is bitwise reproducible within one binary.
//
// Graph contract: ops record parents and a backward rule only when an operand
// requires grad. Nodes are immutable once recorded; data() mutation is only
// legal on leaf tensors between graph builds (the optimizer relies on this).

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "itarflow/parallel.hpp"

namespace itarflow {

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int64_t e : s) n *= e;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "(";
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << ")";
    return os.str();
}

[[noreturn]] inline void shape_error(const std::string& op, const std::string& detail) {
    throw std::invalid_argument(op + ": " + detail);
}

template <typename T>
struct NodeT {
    Shape shape;
    std::vector<T> value;
    std::vector<T> grad;  // sized lazily during a backward pass
    bool requires_grad = false;
    uint64_t id = 0;
    std::vector<std::shared_ptr<NodeT<T>>> parents;
    std::function<void(NodeT<T>&)> backward;

    int64_t numel() const { return static_cast<int64_t>(value.size()); }
    void ensure_grad() {
        if (grad.size() != value.size()) grad.assign(value.size(), T(0));
    }
};

namespace detail {
template <typename T>
inline uint64_t next_node_id() {
    static std::atomic<uint64_t> counter{0};
    return ++counter;
}
}  // namespace detail

template <typename T>
class TensorT {
public:
    using Node = NodeT<T>;

    TensorT() = default;

    static TensorT from_data(Shape shape, std::vector<T> data, bool requires_grad = false) {
        if (static_cast<int64_t>(data.size()) != shape_numel(shape))
            shape_error("tensor", "data length " + std::to_string(data.size()) +
                                      " does not match shape " + shape_str(shape));
        TensorT t;
        t.node_ = std::make_shared<Node>();
        t.node_->shape = std::move(shape);
        t.node_->value = std::move(data);
        t.node_->requires_grad = requires_grad;
        t.node_->id = detail::next_node_id<T>();
        return t;
    }

    static TensorT zeros(Shape shape, bool requires_grad = false) {
        int64_t n = shape_numel(shape);
        return from_data(std::move(shape), std::vector<T>(n, T(0)), requires_grad);
    }

    static TensorT full(Shape shape, T v, bool requires_grad = false) {
        int64_t n = shape_numel(shape);
        return from_data(std::move(shape), std::vector<T>(n, v), requires_grad);
    }

    static TensorT scalar(T v, bool requires_grad = false) {
        return from_data({}, std::vector<T>{v}, requires_grad);
    }

    static TensorT randn(Shape shape, std::mt19937_64& rng, T stddev = T(1),
                         bool requires_grad = false) {
        int64_t n = shape_numel(shape);
        std::vector<T> d(n);
        std::normal_distribution<double> dist(0.0, 1.0);
        for (int64_t i = 0; i < n; ++i) d[i] = static_cast<T>(dist(rng)) * stddev;
        return from_data(std::move(shape), std::move(d), requires_grad);
    }

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    int64_t dim() const { return static_cast<int64_t>(node_->shape.size()); }
    int64_t numel() const { return node_->numel(); }
    bool requires_grad() const { return node_->requires_grad; }

    const std::vector<T>& values() const { return node_->value; }
    // Mutable access; legal only for leaf tensors not captured by a live graph.
    std::vector<T>& data() { return node_->value; }
    const std::vector<T>& grad() const { return node_->grad; }

    T item() const {
        if (numel() != 1) shape_error("item", "tensor " + shape_str(shape()) + " is not scalar");
        return node_->value[0];
    }

    std::shared_ptr<Node> node() const { return node_; }

    static TensorT wrap(std::shared_ptr<Node> n) {
        TensorT t;
        t.node_ = std::move(n);
        return t;
    }

private:
    std::shared_ptr<Node> node_;
};

using Tensor = TensorT<float>;
using DTensor = TensorT<double>;

// ---------------------------------------------------------------------------
// op plumbing

// Thread-local switch; when off, ops compute values but record nothing.
inline bool& grad_mode() {
    thread_local bool enabled = true;
    return enabled;
}

struct GradModeGuard {
    bool prev;
    explicit GradModeGuard(bool enabled) : prev(grad_mode()) { grad_mode() = enabled; }
    ~GradModeGuard() { grad_mode() = prev; }
    GradModeGuard(const GradModeGuard&) = delete;
    GradModeGuard& operator=(const GradModeGuard&) = delete;
};

struct NoGradGuard : GradModeGuard {
    NoGradGuard() : GradModeGuard(false) {}
};

namespace detail {

template <typename T>
TensorT<T> make_op(Shape shape, std::vector<T> value,
                   std::vector<TensorT<T>> parents,
                   std::function<void(NodeT<T>&)> backward) {
    bool rg = false;
    if (grad_mode())
        for (const auto& p : parents) rg = rg || p.requires_grad();
    auto t = TensorT<T>::from_data(std::move(shape), std::move(value), rg);
    if (rg) {
        auto n = t.node();
        n->parents.reserve(parents.size());
        for (auto& p : parents) n->parents.push_back(p.node());
        n->backward = std::move(backward);
    }
    return t;
}

inline Shape broadcast_shape(const char* op, const Shape& a, const Shape& b) {
    size_t nd = std::max(a.size(), b.size());
    Shape out(nd);
    for (size_t i = 0; i < nd; ++i) {
        int64_t da = i < nd - a.size() ? 1 : a[i - (nd - a.size())];
        int64_t db = i < nd - b.size() ? 1 : b[i - (nd - b.size())];
        if (da != db && da != 1 && db != 1)
            shape_error(op, "shapes " + shape_str(a) + " and " + shape_str(b) +
                                " are not broadcastable");
        out[i] = std::max(da, db);
    }
    return out;
}

// Row-major strides with 0 on broadcast axes, right-aligned against out.
inline std::vector<int64_t> broadcast_strides(const Shape& s, const Shape& out) {
    size_t nd = out.size();
    std::vector<int64_t> st(nd, 0);
    int64_t acc = 1;
    for (size_t i = 0; i < s.size(); ++i) {
        size_t d = s.size() - 1 - i;
        size_t od = nd - 1 - i;
        st[od] = (s[d] == 1 && out[od] != 1) ? 0 : acc;
        acc *= s[d];
    }
    return st;
}

// Sums g (shaped gshape) down to target, right-aligned. Accumulation walks g
// in row-major order.
template <typename T>
std::vector<T> reduce_to_shape(const std::vector<T>& g, const Shape& gshape, const Shape& target) {
    if (gshape == target) return g;
    std::vector<T> out(shape_numel(target), T(0));
    size_t nd = gshape.size();
    std::vector<int64_t> tstride = broadcast_strides(target, gshape);
    std::vector<int64_t> idx(nd, 0);
    int64_t ti = 0;
    int64_t n = shape_numel(gshape);
    for (int64_t i = 0; i < n; ++i) {
        out[ti] += g[i];
        for (int64_t d = static_cast<int64_t>(nd) - 1; d >= 0; --d) {
            ++idx[d];
            ti += tstride[d];
            if (idx[d] < gshape[d]) break;
            idx[d] = 0;
            ti -= tstride[d] * gshape[d];
        }
    }
    return out;
}

// A broadcast operand whose shape factors as (pre, broadcast middle, post)
// against the output can be indexed with three nested loops instead of an
// odometer. Covers biases (suffix), positional tables, and per-example
// conditioning rows.
struct BlockPlan {
    bool valid = false;
    int64_t pre = 1, mid = 1, post = 1;
};

inline BlockPlan block_plan(const Shape& s, const Shape& out) {
    BlockPlan p;
    size_t nd = out.size();
    if (s.size() > nd) return p;
    size_t pad = nd - s.size();
    int state = 0;  // 0 = matching prefix, 1 = broadcast run, 2 = matching suffix
    for (size_t d = 0; d < nd; ++d) {
        int64_t se = d < pad ? 1 : s[d - pad];
        int64_t oe = out[d];
        if (oe == 1) continue;  // size-1 output dims are neutral
        if (se == oe) {
            if (state == 1) state = 2;
            (state == 0 ? p.pre : p.post) *= oe;
        } else if (se == 1) {
            if (state == 2) return p;  // second broadcast run; no block form
            state = 1;
            p.mid *= oe;
        } else {
            return p;
        }
    }
    p.valid = true;
    return p;
}

template <typename T, class F>
void broadcast_apply(const Shape& out, const Shape& ashape, const std::vector<T>& a,
                     const Shape& bshape, const std::vector<T>& b, F&& f) {
    int64_t n = shape_numel(out);
    if (ashape == bshape) {
        for (int64_t i = 0; i < n; ++i) f(i, a[i], b[i]);
        return;
    }
    if (shape_numel(bshape) == 1) {
        T bv = b[0];
        for (int64_t i = 0; i < n; ++i) f(i, a[i], bv);
        return;
    }
    if (shape_numel(ashape) == 1) {
        T av = a[0];
        for (int64_t i = 0; i < n; ++i) f(i, av, b[i]);
        return;
    }
    if (Shape(ashape) == out) {
        BlockPlan p = block_plan(bshape, out);
        if (p.valid) {
            int64_t i = 0;
            for (int64_t pr = 0; pr < p.pre; ++pr)
                for (int64_t m = 0; m < p.mid; ++m)
                    for (int64_t k = 0; k < p.post; ++k, ++i) f(i, a[i], b[pr * p.post + k]);
            return;
        }
    }
    if (Shape(bshape) == out) {
        BlockPlan p = block_plan(ashape, out);
        if (p.valid) {
            int64_t i = 0;
            for (int64_t pr = 0; pr < p.pre; ++pr)
                for (int64_t m = 0; m < p.mid; ++m)
                    for (int64_t k = 0; k < p.post; ++k, ++i) f(i, a[pr * p.post + k], b[i]);
            return;
        }
    }
    size_t nd = out.size();
    std::vector<int64_t> sa = broadcast_strides(ashape, out);
    std::vector<int64_t> sb = broadcast_strides(bshape, out);
    std::vector<int64_t> idx(nd, 0);
    int64_t ia = 0, ib = 0;
    for (int64_t i = 0; i < n; ++i) {
        f(i, a[ia], b[ib]);
        for (int64_t d = static_cast<int64_t>(nd) - 1; d >= 0; --d) {
            ++idx[d];
            ia += sa[d];
            ib += sb[d];
            if (idx[d] < out[d]) break;
            idx[d] = 0;
            ia -= sa[d] * out[d];
            ib -= sb[d] * out[d];
        }
    }
}

template <typename T>
void accumulate(std::vector<T>& dst, const std::vector<T>& src) {
    for (size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

// Chunked elementwise dispatch; per-element work is independent, so the split
// cannot change results.
template <class F>
void parallel_elems(int64_t n, F&& fn) {
    if (n >= (int64_t(1) << 16) && ThreadPool::instance().size() > 1) {
        ThreadPool::instance().parallel_for(0, n, fn);
    } else {
        fn(0, n);
    }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise binary ops

namespace detail {

template <typename T, class Fwd, class Bwd>
TensorT<T> binary_op(const char* name, const TensorT<T>& a, const TensorT<T>& b,
                     Fwd fwd, Bwd bwd) {
    Shape out = broadcast_shape(name, a.shape(), b.shape());
    int64_t n = shape_numel(out);
    std::vector<T> v(n);
    if (a.shape() == b.shape()) {
        const T* ap = a.values().data();
        const T* bp = b.values().data();
        T* vp = v.data();
        parallel_elems(n, [=](int64_t lo, int64_t hi) {
            for (int64_t i = lo; i < hi; ++i) vp[i] = fwd(ap[i], bp[i]);
        });
    } else {
        broadcast_apply<T>(out, a.shape(), a.values(), b.shape(), b.values(),
                           [&](int64_t i, T x, T y) { v[i] = fwd(x, y); });
    }
    auto an = a.node();
    auto bn = b.node();
    Shape oshape = out;
    return make_op<T>(
        std::move(out), std::move(v), {a, b},
        [an, bn, oshape, bwd](NodeT<T>& self) {
            bool need_a = an->requires_grad, need_b = bn->requires_grad;
            if (need_a) an->ensure_grad();
            if (need_b) bn->ensure_grad();
            int64_t n = self.numel();
            if (an->shape == oshape && bn->shape == oshape) {
                T* gap = need_a ? an->grad.data() : nullptr;
                T* gbp = need_b ? bn->grad.data() : nullptr;
                const T* xp = an->value.data();
                const T* yp = bn->value.data();
                const T* gp = self.grad.data();
                parallel_elems(n, [=](int64_t lo, int64_t hi) {
                    for (int64_t i = lo; i < hi; ++i) {
                        T dx, dy;
                        bwd(xp[i], yp[i], gp[i], dx, dy);
                        if (gap) gap[i] += dx;
                        if (gbp) gbp[i] += dy;
                    }
                });
                return;
            }
            if (an->shape == oshape) {
                BlockPlan p = block_plan(bn->shape, oshape);
                if (p.valid) {
                    // blocked operand gradients accumulate in output row-major order
                    int64_t i = 0;
                    for (int64_t pr = 0; pr < p.pre; ++pr)
                        for (int64_t m = 0; m < p.mid; ++m)
                            for (int64_t k = 0; k < p.post; ++k, ++i) {
                                T dx, dy;
                                bwd(an->value[i], bn->value[pr * p.post + k], self.grad[i], dx, dy);
                                if (need_a) an->grad[i] += dx;
                                if (need_b) bn->grad[pr * p.post + k] += dy;
                            }
                    return;
                }
            }
            if (bn->shape == oshape) {
                BlockPlan p = block_plan(an->shape, oshape);
                if (p.valid) {
                    int64_t i = 0;
                    for (int64_t pr = 0; pr < p.pre; ++pr)
                        for (int64_t m = 0; m < p.mid; ++m)
                            for (int64_t k = 0; k < p.post; ++k, ++i) {
                                T dx, dy;
                                bwd(an->value[pr * p.post + k], bn->value[i], self.grad[i], dx, dy);
                                if (need_a) an->grad[pr * p.post + k] += dx;
                                if (need_b) bn->grad[i] += dy;
                            }
                    return;
                }
            }
            std::vector<T> ga, gb;
            if (need_a) ga.assign(shape_numel(oshape), T(0));
            if (need_b) gb.assign(shape_numel(oshape), T(0));
            broadcast_apply<T>(oshape, an->shape, an->value, bn->shape, bn->value,
                               [&](int64_t i, T x, T y) {
                                   T dx, dy;
                                   bwd(x, y, self.grad[i], dx, dy);
                                   if (!ga.empty()) ga[i] = dx;
                                   if (!gb.empty()) gb[i] = dy;
                               });
            if (need_a) accumulate(an->grad, reduce_to_shape(ga, oshape, an->shape));
            if (need_b) accumulate(bn->grad, reduce_to_shape(gb, oshape, bn->shape));
        });
}

}  // namespace detail

template <typename T>
TensorT<T> add(const TensorT<T>& a, const TensorT<T>& b) {
    return detail::binary_op<T>(
        "add", a, b, [](T x, T y) { return x + y; },
        [](T, T, T g, T& dx, T& dy) { dx = g; dy = g; });
}

template <typename T>
TensorT<T> sub(const TensorT<T>& a, const TensorT<T>& b) {
    return detail::binary_op<T>(
        "sub", a, b, [](T x, T y) { return x - y; },
        [](T, T, T g, T& dx, T& dy) { dx = g; dy = -g; });
}

template <typename T>
TensorT<T> mul(const TensorT<T>& a, const TensorT<T>& b) {
    return detail::binary_op<T>(
        "mul", a, b, [](T x, T y) { return x * y; },
        [](T x, T y, T g, T& dx, T& dy) { dx = g * y; dy = g * x; });
}

template <typename T>
TensorT<T> div(const TensorT<T>& a, const TensorT<T>& b) {
    for (T y : b.values())
        if (y == T(0)) throw std::domain_error("div: zero operand");
    return detail::binary_op<T>(
        "div", a, b, [](T x, T y) { return x / y; },
        [](T x, T y, T g, T& dx, T& dy) { dx = g / y; dy = -g * x / (y * y); });
}

template <typename T>
TensorT<T> add(const TensorT<T>& a, T c) {
    return add(a, TensorT<T>::scalar(c));
}
template <typename T>
TensorT<T> mul(const TensorT<T>& a, T c) {
    return mul(a, TensorT<T>::scalar(c));
}

// ---------------------------------------------------------------------------
// elementwise unary ops

namespace detail {

template <typename T, class Fwd, class Bwd>
TensorT<T> unary_op(const TensorT<T>& a, Fwd fwd, Bwd bwd) {
    int64_t n = a.numel();
    std::vector<T> v(n);
    const T* xp = a.values().data();
    T* vp = v.data();
    parallel_elems(n, [=](int64_t lo, int64_t hi) {
        for (int64_t i = lo; i < hi; ++i) vp[i] = fwd(xp[i]);
    });
    auto an = a.node();
    return make_op<T>(a.shape(), std::move(v), {a}, [an, bwd](NodeT<T>& self) {
        an->ensure_grad();
        T* gap = an->grad.data();
        const T* xp = an->value.data();
        const T* yp = self.value.data();
        const T* gp = self.grad.data();
        parallel_elems(self.numel(), [=](int64_t lo, int64_t hi) {
            for (int64_t i = lo; i < hi; ++i) gap[i] += bwd(xp[i], yp[i], gp[i]);
        });
    });
}

}  // namespace detail

template <typename T>
TensorT<T> neg(const TensorT<T>& a) {
    return detail::unary_op<T>(a, [](T x) { return -x; },
                               [](T, T, T g) { return -g; });
}

template <typename T>
TensorT<T> exp(const TensorT<T>& a) {
    return detail::unary_op<T>(a, [](T x) { return std::exp(x); },
                               [](T, T y, T g) { return g * y; });
}

template <typename T>
TensorT<T> log(const TensorT<T>& a) {
    for (T x : a.values())
        if (x <= T(0)) throw std::domain_error("log: non-positive operand");
    return detail::unary_op<T>(a, [](T x) { return std::log(x); },
                               [](T x, T, T g) { return g / x; });
}

template <typename T>
TensorT<T> power(const TensorT<T>& a, T p) {
    bool integral = p == std::floor(p);
    for (T x : a.values()) {
        if (x < T(0) && !integral)
            throw std::domain_error("power: negative base with non-integer exponent");
        if (x == T(0) && p < T(0)) throw std::domain_error("power: zero base with negative exponent");
    }
    return detail::unary_op<T>(
        a, [p](T x) { return std::pow(x, p); },
        [p](T x, T, T g) { return g * p * std::pow(x, p - T(1)); });
}

template <typename T>
TensorT<T> tanh(const TensorT<T>& a) {
    return detail::unary_op<T>(a, [](T x) { return std::tanh(x); },
                               [](T, T y, T g) { return g * (T(1) - y * y); });
}

// Exact gelu, x * Phi(x) with the Gaussian CDF, evaluated at the tensor's own
// precision.
template <typename T>
TensorT<T> gelu(const TensorT<T>& a) {
    const T inv_sqrt2 = static_cast<T>(0.7071067811865475244);
    const T inv_sqrt2pi = static_cast<T>(0.3989422804014326779);
    return detail::unary_op<T>(
        a, [=](T x) { return T(0.5) * x * (T(1) + std::erf(x * inv_sqrt2)); },
        [=](T x, T, T g) {
            T cdf = T(0.5) * (T(1) + std::erf(x * inv_sqrt2));
            T pdf = inv_sqrt2pi * std::exp(T(-0.5) * x * x);
            return g * (cdf + x * pdf);
        });
}

// ---------------------------------------------------------------------------
// matmul

namespace detail {

// c[M,N] (+)= a[M,K] * b[K,N], all row-major. Per-element accumulation is
// ascending in k regardless of threading (rows are partitioned, never split).
template <typename T>
void gemm_nn(const T* a, const T* b, T* c, int64_t M, int64_t K, int64_t N, bool accumulate_c) {
    auto rows = [=](int64_t lo, int64_t hi) {
        for (int64_t i = lo; i < hi; ++i) {
            T* crow = c + i * N;
            if (!accumulate_c) std::fill(crow, crow + N, T(0));
            const T* arow = a + i * K;
            for (int64_t k = 0; k < K; ++k) {
                const T aik = arow[k];
                const T* brow = b + k * N;
                for (int64_t j = 0; j < N; ++j) crow[j] += aik * brow[j];
            }
        }
    };
    if (M > 1 && M * K * N >= (int64_t(1) << 18) && ThreadPool::instance().size() > 1) {
        ThreadPool::instance().parallel_for(0, M, rows);
    } else {
        rows(0, M);
    }
}

template <typename T>
std::vector<T> transpose2d(const T* a, int64_t R, int64_t C) {
    std::vector<T> out(R * C);
    for (int64_t i = 0; i < R; ++i)
        for (int64_t j = 0; j < C; ++j) out[j * R + i] = a[i * C + j];
    return out;
}

}  // namespace detail

// A: (..., M, K); B: (K, N) or (..., K, N) with identical leading dims.
template <typename T>
TensorT<T> matmul(const TensorT<T>& a, const TensorT<T>& b) {
    const Shape& as = a.shape();
    const Shape& bs = b.shape();
    if (as.size() < 2 || bs.size() < 2)
        shape_error("matmul", "operands must have rank >= 2, got " + shape_str(as) + " and " +
                                  shape_str(bs));
    int64_t M = as[as.size() - 2], K = as[as.size() - 1];
    int64_t Kb = bs[bs.size() - 2], N = bs[bs.size() - 1];
    bool b_batched = bs.size() > 2;
    if (K != Kb) shape_error("matmul", "inner dims differ: " + shape_str(as) + " vs " + shape_str(bs));
    Shape batch(as.begin(), as.end() - 2);
    if (b_batched && Shape(bs.begin(), bs.end() - 2) != batch)
        shape_error("matmul", "batch dims differ: " + shape_str(as) + " vs " + shape_str(bs));
    int64_t nbatch = shape_numel(batch);

    Shape out = batch;
    out.push_back(M);
    out.push_back(N);
    std::vector<T> v(shape_numel(out));
    const T* ap = a.values().data();
    const T* bp = b.values().data();
    if (!b_batched) {
        // shared weights: flatten batch into rows
        detail::gemm_nn(ap, bp, v.data(), nbatch * M, K, N, false);
    } else if (nbatch > 1 && ThreadPool::instance().size() > 1 &&
               nbatch * M * K * N >= (int64_t(1) << 18)) {
        ThreadPool::instance().parallel_for(0, nbatch, [&](int64_t lo, int64_t hi) {
            for (int64_t bi = lo; bi < hi; ++bi)
                detail::gemm_nn(ap + bi * M * K, bp + bi * K * N, v.data() + bi * M * N, M, K, N,
                                false);
        });
    } else {
        for (int64_t bi = 0; bi < nbatch; ++bi)
            detail::gemm_nn(ap + bi * M * K, bp + bi * K * N, v.data() + bi * M * N, M, K, N,
                            false);
    }

    auto an = a.node();
    auto bn = b.node();
    return detail::make_op<T>(
        std::move(out), std::move(v), {a, b},
        [an, bn, M, K, N, nbatch, b_batched](NodeT<T>& self) {
            const T* g = self.grad.data();
            if (an->requires_grad) {
                an->ensure_grad();
                // dA = dC * B^T
                if (!b_batched) {
                    auto bt = detail::transpose2d(bn->value.data(), K, N);
                    detail::gemm_nn(g, bt.data(), an->grad.data(), nbatch * M, N, K, true);
                } else {
                    for (int64_t bi = 0; bi < nbatch; ++bi) {
                        auto bt = detail::transpose2d(bn->value.data() + bi * K * N, K, N);
                        detail::gemm_nn(g + bi * M * N, bt.data(), an->grad.data() + bi * M * K, M,
                                        N, K, true);
                    }
                }
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                // dB = A^T * dC, accumulated over the batch in index order
                if (!b_batched) {
                    auto at = detail::transpose2d(an->value.data(), nbatch * M, K);
                    detail::gemm_nn(at.data(), g, bn->grad.data(), K, nbatch * M, N, true);
                } else {
                    for (int64_t bi = 0; bi < nbatch; ++bi) {
                        auto at = detail::transpose2d(an->value.data() + bi * M * K, M, K);
                        detail::gemm_nn(at.data(), g + bi * M * N, bn->grad.data() + bi * K * N, K,
                                        M, N, true);
                    }
                }
            }
        });
}

// ---------------------------------------------------------------------------
// reductions

namespace detail {

inline std::vector<int> normalize_axes(const char* op, const Shape& shape,
                                       const std::vector<int>& axes) {
    std::vector<int> out;
    int nd = static_cast<int>(shape.size());
    for (int ax : axes) {
        int a = ax < 0 ? ax + nd : ax;
        if (a < 0 || a >= nd) shape_error(op, "axis " + std::to_string(ax) + " out of range for " + shape_str(shape));
        out.push_back(a);
    }
    std::sort(out.begin(), out.end());
    out.erase(std::unique(out.begin(), out.end()), out.end());
    return out;
}

}  // namespace detail

// Sum over the given axes (all axes when empty). Accumulation order is the
// row-major traversal of the input.
template <typename T>
TensorT<T> sum(const TensorT<T>& a, const std::vector<int>& axes = {}, bool keepdims = false) {
    const Shape& s = a.shape();
    std::vector<int> ax = axes.empty()
                              ? [&] {
                                    std::vector<int> all(s.size());
                                    std::iota(all.begin(), all.end(), 0);
                                    return all;
                                }()
                              : detail::normalize_axes("sum", s, axes);
    std::vector<bool> reduced(s.size(), false);
    for (int d : ax) reduced[d] = true;
    Shape out;
    for (size_t d = 0; d < s.size(); ++d) {
        if (!reduced[d]) out.push_back(s[d]);
        else if (keepdims) out.push_back(1);
    }
    // out-index strides aligned to the input dims
    std::vector<int64_t> ostride(s.size(), 0);
    {
        int64_t acc = 1;
        for (int64_t d = static_cast<int64_t>(s.size()) - 1; d >= 0; --d) {
            if (!reduced[d]) {
                ostride[d] = acc;
                acc *= s[d];
            }
        }
    }
    std::vector<T> v(shape_numel(out), T(0));
    const auto& x = a.values();
    int64_t n = a.numel();
    std::vector<int64_t> idx(s.size(), 0);
    int64_t oi = 0;
    for (int64_t i = 0; i < n; ++i) {
        v[oi] += x[i];
        for (int64_t d = static_cast<int64_t>(s.size()) - 1; d >= 0; --d) {
            ++idx[d];
            oi += ostride[d];
            if (idx[d] < s[d]) break;
            idx[d] = 0;
            oi -= ostride[d] * s[d];
        }
    }
    auto an = a.node();
    std::vector<int64_t> ostride_c = ostride;
    return detail::make_op<T>(
        std::move(out), std::move(v), {a}, [an, ostride_c](NodeT<T>& self) {
            an->ensure_grad();
            const Shape& s = an->shape;
            std::vector<int64_t> idx(s.size(), 0);
            int64_t oi = 0;
            int64_t n = an->numel();
            for (int64_t i = 0; i < n; ++i) {
                an->grad[i] += self.grad[oi];
                for (int64_t d = static_cast<int64_t>(s.size()) - 1; d >= 0; --d) {
                    ++idx[d];
                    oi += ostride_c[d];
                    if (idx[d] < s[d]) break;
                    idx[d] = 0;
                    oi -= ostride_c[d] * s[d];
                }
            }
        });
}

template <typename T>
TensorT<T> mean(const TensorT<T>& a, const std::vector<int>& axes = {}, bool keepdims = false) {
    TensorT<T> s = sum(a, axes, keepdims);
    T scale = static_cast<T>(static_cast<double>(s.numel()) / static_cast<double>(a.numel()));
    return mul(s, scale);
}

// ---------------------------------------------------------------------------
// softmax / layer_norm

// Softmax along `axis` with the usual max-subtraction; masked entries may be
// -inf and produce exact zeros.
template <typename T>
TensorT<T> softmax(const TensorT<T>& a, int axis = -1) {
    const Shape& s = a.shape();
    if (s.empty()) shape_error("softmax", "scalar input");
    int ax = axis < 0 ? axis + static_cast<int>(s.size()) : axis;
    if (ax < 0 || ax >= static_cast<int>(s.size()))
        shape_error("softmax", "axis " + std::to_string(axis) + " out of range for " + shape_str(s));
    int64_t n_ax = s[ax];
    int64_t pre = 1, post = 1;
    for (int d = 0; d < ax; ++d) pre *= s[d];
    for (size_t d = ax + 1; d < s.size(); ++d) post *= s[d];

    std::vector<T> v(a.numel());
    const auto& x = a.values();
    for (int64_t o = 0; o < pre; ++o) {
        for (int64_t i = 0; i < post; ++i) {
            int64_t base = o * n_ax * post + i;
            T m = x[base];
            for (int64_t j = 1; j < n_ax; ++j) m = std::max(m, x[base + j * post]);
            T z = T(0);
            for (int64_t j = 0; j < n_ax; ++j) {
                T e = std::exp(x[base + j * post] - m);
                v[base + j * post] = e;
                z += e;
            }
            for (int64_t j = 0; j < n_ax; ++j) v[base + j * post] /= z;
        }
    }
    auto an = a.node();
    return detail::make_op<T>(
        a.shape(), std::move(v), {a}, [an, n_ax, pre, post](NodeT<T>& self) {
            an->ensure_grad();
            for (int64_t o = 0; o < pre; ++o) {
                for (int64_t i = 0; i < post; ++i) {
                    int64_t base = o * n_ax * post + i;
                    T dot = T(0);
                    for (int64_t j = 0; j < n_ax; ++j)
                        dot += self.grad[base + j * post] * self.value[base + j * post];
                    for (int64_t j = 0; j < n_ax; ++j) {
                        int64_t k = base + j * post;
                        an->grad[k] += self.value[k] * (self.grad[k] - dot);
                    }
                }
            }
        });
}

// Layer normalization over `axis` with learned scale/shift of shape (extent,).
template <typename T>
TensorT<T> layer_norm(const TensorT<T>& a, const TensorT<T>& gamma, const TensorT<T>& beta,
                      int axis = -1, T eps = static_cast<T>(1e-5)) {
    const Shape& s = a.shape();
    int ax = axis < 0 ? axis + static_cast<int>(s.size()) : axis;
    if (ax < 0 || ax >= static_cast<int>(s.size()))
        shape_error("layer_norm", "axis " + std::to_string(axis) + " out of range for " + shape_str(s));
    int64_t n_ax = s[ax];
    if (gamma.shape() != Shape{n_ax} || beta.shape() != Shape{n_ax})
        shape_error("layer_norm", "scale/shift must have shape (" + std::to_string(n_ax) +
                                      "), got " + shape_str(gamma.shape()) + " and " +
                                      shape_str(beta.shape()));
    int64_t pre = 1, post = 1;
    for (int d = 0; d < ax; ++d) pre *= s[d];
    for (size_t d = ax + 1; d < s.size(); ++d) post *= s[d];

    std::vector<T> v(a.numel());
    auto xhat = std::make_shared<std::vector<T>>(a.numel());
    auto inv_std = std::make_shared<std::vector<T>>(pre * post);
    const auto& x = a.values();
    const auto& gm = gamma.values();
    const auto& bt = beta.values();
    for (int64_t o = 0; o < pre; ++o) {
        for (int64_t i = 0; i < post; ++i) {
            int64_t base = o * n_ax * post + i;
            T mu = T(0);
            for (int64_t j = 0; j < n_ax; ++j) mu += x[base + j * post];
            mu /= static_cast<T>(n_ax);
            T var = T(0);
            for (int64_t j = 0; j < n_ax; ++j) {
                T d = x[base + j * post] - mu;
                var += d * d;
            }
            var /= static_cast<T>(n_ax);
            T inv = T(1) / std::sqrt(var + eps);
            (*inv_std)[o * post + i] = inv;
            for (int64_t j = 0; j < n_ax; ++j) {
                T xh = (x[base + j * post] - mu) * inv;
                (*xhat)[base + j * post] = xh;
                v[base + j * post] = xh * gm[j] + bt[j];
            }
        }
    }
    auto an = a.node();
    auto gn = gamma.node();
    auto bn = beta.node();
    return detail::make_op<T>(
        a.shape(), std::move(v), {a, gamma, beta},
        [an, gn, bn, xhat, inv_std, n_ax, pre, post](NodeT<T>& self) {
            const auto& xh = *xhat;
            for (int64_t o = 0; o < pre; ++o) {
                for (int64_t i = 0; i < post; ++i) {
                    int64_t base = o * n_ax * post + i;
                    T inv = (*inv_std)[o * post + i];
                    T mean_gg = T(0), mean_ggx = T(0);
                    for (int64_t j = 0; j < n_ax; ++j) {
                        T gg = self.grad[base + j * post] * gn->value[j];
                        mean_gg += gg;
                        mean_ggx += gg * xh[base + j * post];
                    }
                    mean_gg /= static_cast<T>(n_ax);
                    mean_ggx /= static_cast<T>(n_ax);
                    if (an->requires_grad) {
                        an->ensure_grad();
                        for (int64_t j = 0; j < n_ax; ++j) {
                            int64_t k = base + j * post;
                            T gg = self.grad[k] * gn->value[j];
                            an->grad[k] += inv * (gg - mean_gg - xh[k] * mean_ggx);
                        }
                    }
                    if (gn->requires_grad) {
                        gn->ensure_grad();
                        for (int64_t j = 0; j < n_ax; ++j)
                            gn->grad[j] += self.grad[base + j * post] * xh[base + j * post];
                    }
                    if (bn->requires_grad) {
                        bn->ensure_grad();
                        for (int64_t j = 0; j < n_ax; ++j) bn->grad[j] += self.grad[base + j * post];
                    }
                }
            }
        });
}

// ---------------------------------------------------------------------------
// shape ops

template <typename T>
TensorT<T> reshape(const TensorT<T>& a, Shape new_shape) {
    if (shape_numel(new_shape) != a.numel())
        shape_error("reshape", "cannot reshape " + shape_str(a.shape()) + " to " + shape_str(new_shape));
    auto an = a.node();
    return detail::make_op<T>(std::move(new_shape), a.values(), {a}, [an](NodeT<T>& self) {
        an->ensure_grad();
        detail::accumulate(an->grad, self.grad);
    });
}

namespace detail {

template <typename T>
void permute_copy(const Shape& in_shape, const std::vector<T>& in, const std::vector<int>& perm,
                  std::vector<T>& out) {
    size_t nd = in_shape.size();
    Shape out_shape(nd);
    for (size_t d = 0; d < nd; ++d) out_shape[d] = in_shape[perm[d]];
    std::vector<int64_t> in_stride(nd, 1);
    for (int64_t d = static_cast<int64_t>(nd) - 2; d >= 0; --d)
        in_stride[d] = in_stride[d + 1] * in_shape[d + 1];
    std::vector<int64_t> src_stride(nd);
    for (size_t d = 0; d < nd; ++d) src_stride[d] = in_stride[perm[d]];
    std::vector<int64_t> idx(nd, 0);
    int64_t si = 0;
    int64_t n = shape_numel(in_shape);
    for (int64_t i = 0; i < n; ++i) {
        out[i] = in[si];
        for (int64_t d = static_cast<int64_t>(nd) - 1; d >= 0; --d) {
            ++idx[d];
            si += src_stride[d];
            if (idx[d] < out_shape[d]) break;
            idx[d] = 0;
            si -= src_stride[d] * out_shape[d];
        }
    }
}

}  // namespace detail

template <typename T>
TensorT<T> transpose(const TensorT<T>& a, std::vector<int> perm) {
    const Shape& s = a.shape();
    if (perm.size() != s.size()) shape_error("transpose", "perm rank mismatch for " + shape_str(s));
    std::vector<bool> seen(s.size(), false);
    for (int p : perm) {
        if (p < 0 || p >= static_cast<int>(s.size()) || seen[p])
            shape_error("transpose", "invalid permutation");
        seen[p] = true;
    }
    Shape out(s.size());
    for (size_t d = 0; d < s.size(); ++d) out[d] = s[perm[d]];
    std::vector<T> v(a.numel());
    detail::permute_copy(s, a.values(), perm, v);
    std::vector<int> inv(perm.size());
    for (size_t d = 0; d < perm.size(); ++d) inv[perm[d]] = static_cast<int>(d);
    auto an = a.node();
    Shape oshape = out;
    return detail::make_op<T>(std::move(out), std::move(v), {a},
                              [an, inv, oshape](NodeT<T>& self) {
                                  an->ensure_grad();
                                  std::vector<T> g(self.numel());
                                  detail::permute_copy(oshape, self.grad, inv, g);
                                  detail::accumulate(an->grad, g);
                              });
}

// Transpose of the last two axes (the matmul companion).
template <typename T>
TensorT<T> transpose_last2(const TensorT<T>& a) {
    std::vector<int> perm(a.dim());
    std::iota(perm.begin(), perm.end(), 0);
    std::swap(perm[perm.size() - 1], perm[perm.size() - 2]);
    return transpose(a, perm);
}

template <typename T>
TensorT<T> concat(const std::vector<TensorT<T>>& parts, int axis) {
    if (parts.empty()) shape_error("concat", "no inputs");
    const Shape& s0 = parts[0].shape();
    int ax = axis < 0 ? axis + static_cast<int>(s0.size()) : axis;
    if (ax < 0 || ax >= static_cast<int>(s0.size())) shape_error("concat", "axis out of range");
    Shape out = s0;
    out[ax] = 0;
    for (const auto& p : parts) {
        const Shape& s = p.shape();
        if (s.size() != s0.size()) shape_error("concat", "rank mismatch");
        for (size_t d = 0; d < s.size(); ++d)
            if (static_cast<int>(d) != ax && s[d] != s0[d])
                shape_error("concat", "shape mismatch: " + shape_str(s0) + " vs " + shape_str(s));
        out[ax] += s[ax];
    }
    int64_t pre = 1, post = 1;
    for (int d = 0; d < ax; ++d) pre *= s0[d];
    for (size_t d = ax + 1; d < s0.size(); ++d) post *= s0[d];
    std::vector<T> v(shape_numel(out));
    int64_t out_ax = out[ax];
    int64_t offset = 0;
    for (const auto& p : parts) {
        int64_t p_ax = p.shape()[ax];
        const auto& x = p.values();
        for (int64_t o = 0; o < pre; ++o)
            std::copy(x.begin() + o * p_ax * post, x.begin() + (o + 1) * p_ax * post,
                      v.begin() + (o * out_ax + offset) * post);
        offset += p_ax;
    }
    std::vector<std::shared_ptr<NodeT<T>>> pnodes;
    std::vector<int64_t> extents;
    for (const auto& p : parts) {
        pnodes.push_back(p.node());
        extents.push_back(p.shape()[ax]);
    }
    return detail::make_op<T>(
        std::move(out), std::move(v), parts,
        [pnodes, extents, pre, post, out_ax](NodeT<T>& self) {
            int64_t offset = 0;
            for (size_t pi = 0; pi < pnodes.size(); ++pi) {
                auto& pn = pnodes[pi];
                int64_t p_ax = extents[pi];
                if (pn->requires_grad) {
                    pn->ensure_grad();
                    for (int64_t o = 0; o < pre; ++o)
                        for (int64_t j = 0; j < p_ax * post; ++j)
                            pn->grad[o * p_ax * post + j] +=
                                self.grad[(o * out_ax + offset) * post + j];
                }
                offset += p_ax;
            }
        });
}

template <typename T>
TensorT<T> slice(const TensorT<T>& a, int axis, int64_t start, int64_t len) {
    const Shape& s = a.shape();
    int ax = axis < 0 ? axis + static_cast<int>(s.size()) : axis;
    if (ax < 0 || ax >= static_cast<int>(s.size())) shape_error("slice", "axis out of range");
    if (start < 0 || len < 0 || start + len > s[ax])
        shape_error("slice", "range [" + std::to_string(start) + ", " + std::to_string(start + len) +
                                 ") out of bounds for " + shape_str(s));
    Shape out = s;
    out[ax] = len;
    int64_t pre = 1, post = 1;
    for (int d = 0; d < ax; ++d) pre *= s[d];
    for (size_t d = ax + 1; d < s.size(); ++d) post *= s[d];
    std::vector<T> v(shape_numel(out));
    const auto& x = a.values();
    int64_t in_ax = s[ax];
    for (int64_t o = 0; o < pre; ++o)
        std::copy(x.begin() + (o * in_ax + start) * post, x.begin() + (o * in_ax + start + len) * post,
                  v.begin() + o * len * post);
    auto an = a.node();
    return detail::make_op<T>(std::move(out), std::move(v), {a},
                              [an, pre, post, in_ax, start, len](NodeT<T>& self) {
                                  an->ensure_grad();
                                  for (int64_t o = 0; o < pre; ++o)
                                      for (int64_t j = 0; j < len * post; ++j)
                                          an->grad[(o * in_ax + start) * post + j] +=
                                              self.grad[o * len * post + j];
                              });
}

// table: (R, C); returns (ids.size(), C). Backward scatter-adds rows in id order.
template <typename T>
TensorT<T> gather_rows(const TensorT<T>& table, const std::vector<int64_t>& ids) {
    const Shape& s = table.shape();
    if (s.size() != 2) shape_error("gather_rows", "table must be 2-d, got " + shape_str(s));
    int64_t R = s[0], C = s[1];
    for (int64_t id : ids)
        if (id < 0 || id >= R)
            shape_error("gather_rows", "row " + std::to_string(id) + " out of range for " + shape_str(s));
    std::vector<T> v(static_cast<int64_t>(ids.size()) * C);
    const auto& x = table.values();
    for (size_t i = 0; i < ids.size(); ++i)
        std::copy(x.begin() + ids[i] * C, x.begin() + (ids[i] + 1) * C, v.begin() + i * C);
    auto tn = table.node();
    auto ids_c = ids;
    return detail::make_op<T>({static_cast<int64_t>(ids.size()), C}, std::move(v), {table},
                              [tn, ids_c, C](NodeT<T>& self) {
                                  tn->ensure_grad();
                                  for (size_t i = 0; i < ids_c.size(); ++i)
                                      for (int64_t j = 0; j < C; ++j)
                                          tn->grad[ids_c[i] * C + j] += self.grad[i * C + j];
                              });
}

// Reverses the order of entries along one axis; contents untouched.
template <typename T>
TensorT<T> flip(const TensorT<T>& a, int axis) {
    const Shape& s = a.shape();
    int ax = axis < 0 ? axis + static_cast<int>(s.size()) : axis;
    if (ax < 0 || ax >= static_cast<int>(s.size())) shape_error("flip", "axis out of range");
    int64_t n_ax = s[ax];
    int64_t pre = 1, post = 1;
    for (int d = 0; d < ax; ++d) pre *= s[d];
    for (size_t d = ax + 1; d < s.size(); ++d) post *= s[d];
    std::vector<T> v(a.numel());
    const auto& x = a.values();
    for (int64_t o = 0; o < pre; ++o)
        for (int64_t j = 0; j < n_ax; ++j)
            std::copy(x.begin() + (o * n_ax + j) * post, x.begin() + (o * n_ax + j + 1) * post,
                      v.begin() + (o * n_ax + (n_ax - 1 - j)) * post);
    auto an = a.node();
    return detail::make_op<T>(a.shape(), std::move(v), {a},
                              [an, pre, post, n_ax](NodeT<T>& self) {
                                  an->ensure_grad();
                                  for (int64_t o = 0; o < pre; ++o)
                                      for (int64_t j = 0; j < n_ax; ++j)
                                          for (int64_t i = 0; i < post; ++i)
                                              an->grad[(o * n_ax + j) * post + i] +=
                                                  self.grad[(o * n_ax + (n_ax - 1 - j)) * post + i];
                              });
}

template <typename T>
TensorT<T> broadcast_to(const TensorT<T>& a, Shape target) {
    Shape check = detail::broadcast_shape("broadcast", a.shape(), target);
    if (check != target)
        shape_error("broadcast", "cannot broadcast " + shape_str(a.shape()) + " to " + shape_str(target));
    std::vector<T> v(shape_numel(target));
    detail::broadcast_apply<T>(target, a.shape(), a.values(), target,
                               std::vector<T>(shape_numel(target), T(0)),
                               [&](int64_t i, T x, T) { v[i] = x; });
    auto an = a.node();
    Shape tgt = target;
    return detail::make_op<T>(std::move(target), std::move(v), {a}, [an, tgt](NodeT<T>& self) {
        an->ensure_grad();
        detail::accumulate(an->grad, detail::reduce_to_shape(self.grad, tgt, an->shape));
    });
}

// ---------------------------------------------------------------------------
// reverse pass

// Gradients of a scalar `output` with respect to each tensor in `wrt`.
// Tensors not reachable from `output` get a zero gradient. The traversal
// visits reachable nodes once, in reverse creation order (a valid reverse
// topological order, since operands always precede results).
template <typename T>
std::vector<std::vector<T>> gradient(const TensorT<T>& output,
                                     const std::vector<TensorT<T>>& wrt) {
    if (output.numel() != 1)
        shape_error("gradient", "output must be scalar, got " + shape_str(output.shape()));
    using NodePtr = NodeT<T>*;
    std::vector<NodePtr> reachable;
    std::unordered_set<NodePtr> seen;
    std::vector<NodePtr> stack{output.node().get()};
    if (output.requires_grad()) {
        seen.insert(stack[0]);
        while (!stack.empty()) {
            NodePtr n = stack.back();
            stack.pop_back();
            reachable.push_back(n);
            for (auto& p : n->parents) {
                if (p->requires_grad && !seen.count(p.get())) {
                    seen.insert(p.get());
                    stack.push_back(p.get());
                }
            }
        }
    }
    for (NodePtr n : reachable) n->grad.assign(n->value.size(), T(0));
    if (output.requires_grad()) output.node()->grad[0] = T(1);
    std::sort(reachable.begin(), reachable.end(),
              [](NodePtr a, NodePtr b) { return a->id > b->id; });
    for (NodePtr n : reachable)
        if (n->backward) n->backward(*n);

    std::vector<std::vector<T>> out;
    out.reserve(wrt.size());
    for (const auto& w : wrt) {
        NodePtr n = w.node().get();
        if (seen.count(n) && !n->grad.empty()) out.push_back(n->grad);
        else out.push_back(std::vector<T>(w.numel(), T(0)));
    }
    return out;
}

// ---------------------------------------------------------------------------
// finite differences

// Max relative error between the reverse-mode gradient of f (single precision)
// and central differences of f evaluated in double precision. F must be
// callable as f(TensorT<U>) -> scalar TensorT<U> for U in {float, double}.
template <class F>
double finite_difference_check(F&& f, const Tensor& x, double step) {
    if (step <= 0) throw std::invalid_argument("finite_difference_check: step must be positive");
    Tensor xg = Tensor::from_data(x.shape(), x.values(), true);
    Tensor y = f(xg);
    std::vector<float> analytic = gradient(y, std::vector<Tensor>{xg})[0];

    std::vector<double> base(x.values().begin(), x.values().end());
    double max_rel = 0.0;
    for (size_t i = 0; i < base.size(); ++i) {
        auto eval = [&](double v) {
            std::vector<double> pert = base;
            pert[i] = v;
            DTensor xt = DTensor::from_data(x.shape(), std::move(pert));
            return static_cast<double>(f(xt).item());
        };
        double fd = (eval(base[i] + step) - eval(base[i] - step)) / (2.0 * step);
        double rel = std::abs(static_cast<double>(analytic[i]) - fd) / (std::abs(fd) + 1e-8);
        max_rel = std::max(max_rel, rel);
    }
    return max_rel;
}

}  // namespace itarflow
