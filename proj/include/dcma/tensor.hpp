#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

#include "dcma/rng.hpp"

namespace dcma {

using Shape = std::vector<size_t>;

inline size_t numel(const Shape& s) {
    size_t n = 1;
    for (size_t e : s) n *= e;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

[[noreturn]] inline void fail(const std::string& msg) { throw std::runtime_error(msg); }

#define DCMA_CHECK(cond, msg)                                          \
    do {                                                               \
        if (!(cond)) ::dcma::fail(std::string("dcma: ") + (msg));      \
    } while (0)

inline std::string shape_mismatch(const char* op, const Shape& a, const Shape& b) {
    return std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b);
}

// Global switch for graph recording. Inference paths (beam search,
// evaluation) disable recording to avoid building throwaway graphs.
inline bool& grad_mode() {
    thread_local bool enabled = true;
    return enabled;
}

struct NoGradGuard {
    bool prev;
    NoGradGuard() : prev(grad_mode()) { grad_mode() = false; }
    ~NoGradGuard() { grad_mode() = prev; }
};

template <typename T>
struct Node {
    Shape shape;
    std::vector<T> value;
    std::vector<T> grad;  // allocated on demand, same extent as value
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node<T>>> parents;
    std::function<void(Node<T>&)> backward_fn;

    void ensure_grad() {
        if (grad.size() != value.size()) grad.assign(value.size(), T(0));
    }
};

template <typename T>
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::shared_ptr<Node<T>> n) : node_(std::move(n)) {}

    static Tensor constant(Shape shape, std::vector<T> data) {
        DCMA_CHECK(numel(shape) == data.size(), "tensor: data length does not match shape " + shape_str(shape));
        auto n = std::make_shared<Node<T>>();
        n->shape = std::move(shape);
        n->value = std::move(data);
        return Tensor(std::move(n));
    }

    static Tensor zeros(Shape shape) {
        size_t n = numel(shape);
        return constant(std::move(shape), std::vector<T>(n, T(0)));
    }

    static Tensor full(Shape shape, T x) {
        size_t n = numel(shape);
        return constant(std::move(shape), std::vector<T>(n, x));
    }

    static Tensor scalar(T x) { return constant(Shape{1}, {x}); }

    static Tensor param(Shape shape, std::vector<T> data) {
        Tensor t = constant(std::move(shape), std::move(data));
        t.node_->requires_grad = true;
        return t;
    }

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    size_t ndim() const { return node_->shape.size(); }
    size_t size() const { return node_->value.size(); }
    std::vector<T>& value() { return node_->value; }
    const std::vector<T>& value() const { return node_->value; }
    std::vector<T>& grad() {
        node_->ensure_grad();
        return node_->grad;
    }
    const std::vector<T>& grad() const {
        node_->ensure_grad();
        return node_->grad;
    }
    bool requires_grad() const { return node_->requires_grad; }
    void zero_grad() {
        node_->grad.assign(node_->value.size(), T(0));
    }
    T item() const {
        DCMA_CHECK(node_->value.size() == 1, "item: tensor is not scalar, shape " + shape_str(node_->shape));
        return node_->value[0];
    }
    std::shared_ptr<Node<T>> node() const { return node_; }

private:
    std::shared_ptr<Node<T>> node_;
};

namespace detail {

template <typename T>
Tensor<T> make_op(Shape shape, std::vector<T> value, std::vector<Tensor<T>> parents,
                  std::function<void(Node<T>&)> backward) {
    auto n = std::make_shared<Node<T>>();
    n->shape = std::move(shape);
    n->value = std::move(value);
    bool rg = false;
    if (grad_mode()) {
        for (const auto& p : parents) rg = rg || p.requires_grad();
    }
    if (rg) {
        n->requires_grad = true;
        n->parents.reserve(parents.size());
        for (auto& p : parents) n->parents.push_back(p.node());
        n->backward_fn = std::move(backward);
    }
    return Tensor<T>(std::move(n));
}

inline bool is_suffix(const Shape& small, const Shape& big) {
    if (small.size() > big.size()) return false;
    for (size_t i = 0; i < small.size(); ++i)
        if (small[small.size() - 1 - i] != big[big.size() - 1 - i]) return false;
    return true;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise binary ops; b may equal a's shape, be a scalar, or be a
// trailing-shape broadcast across a's leading axes
// ---------------------------------------------------------------------------

template <typename T, typename FwdFn, typename BwdFn>
Tensor<T> binary_op(const char* name, Tensor<T> a, Tensor<T> b, FwdFn fwd, BwdFn bwd) {
    const auto& as = a.shape();
    const auto& bs = b.shape();
    size_t an = a.size(), bn = b.size();
    DCMA_CHECK(bn == 1 || detail::is_suffix(bs, as), shape_mismatch(name, as, bs));
    size_t reps = (bn == 1) ? an : an / bn;
    size_t inner = (bn == 1) ? 1 : bn;
    std::vector<T> out(an);
    const T* av = a.value().data();
    const T* bv = b.value().data();
    if (bn == 1) {
        T s = bv[0];
        for (size_t i = 0; i < an; ++i) out[i] = fwd(av[i], s);
    } else {
        for (size_t r = 0; r < reps; ++r)
            for (size_t i = 0; i < inner; ++i) out[r * inner + i] = fwd(av[r * inner + i], bv[i]);
    }
    auto an_ = a.node();
    auto bn_ = b.node();
    return detail::make_op<T>(
        as, std::move(out), {a, b},
        [an_, bn_, reps, inner, bwd](Node<T>& self) {
            const T* g = self.grad.data();
            const T* av = an_->value.data();
            const T* bv = bn_->value.data();
            if (an_->requires_grad) {
                an_->ensure_grad();
                T* da = an_->grad.data();
                for (size_t r = 0; r < reps; ++r)
                    for (size_t i = 0; i < inner; ++i) {
                        size_t k = r * inner + i;
                        size_t bi = (bn_->value.size() == 1) ? 0 : i;
                        da[k] += bwd(g[k], av[k], bv[bi], true);
                    }
            }
            if (bn_->requires_grad) {
                bn_->ensure_grad();
                T* db = bn_->grad.data();
                for (size_t r = 0; r < reps; ++r)
                    for (size_t i = 0; i < inner; ++i) {
                        size_t k = r * inner + i;
                        size_t bi = (bn_->value.size() == 1) ? 0 : i;
                        db[bi] += bwd(g[k], av[k], bv[bi], false);
                    }
            }
        });
}

template <typename T>
Tensor<T> add(Tensor<T> a, Tensor<T> b) {
    return binary_op<T>(
        "add", a, b, [](T x, T y) { return x + y; },
        [](T g, T, T, bool) { return g; });
}

template <typename T>
Tensor<T> sub(Tensor<T> a, Tensor<T> b) {
    return binary_op<T>(
        "sub", a, b, [](T x, T y) { return x - y; },
        [](T g, T, T, bool wrt_a) { return wrt_a ? g : -g; });
}

template <typename T>
Tensor<T> mul(Tensor<T> a, Tensor<T> b) {
    return binary_op<T>(
        "mul", a, b, [](T x, T y) { return x * y; },
        [](T g, T x, T y, bool wrt_a) { return wrt_a ? g * y : g * x; });
}

template <typename T>
Tensor<T> div(Tensor<T> a, Tensor<T> b) {
    for (T y : b.value()) DCMA_CHECK(y != T(0), "div: zero divisor");
    return binary_op<T>(
        "div", a, b, [](T x, T y) { return x / y; },
        [](T g, T x, T y, bool wrt_a) { return wrt_a ? g / y : -g * x / (y * y); });
}

template <typename T, typename FwdFn, typename BwdFn>
Tensor<T> unary_op(Tensor<T> a, FwdFn fwd, BwdFn bwd) {
    std::vector<T> out(a.size());
    const T* av = a.value().data();
    for (size_t i = 0; i < a.size(); ++i) out[i] = fwd(av[i]);
    auto an = a.node();
    auto val_copy = out;  // many backward rules are cheapest in terms of y
    return detail::make_op<T>(
        a.shape(), std::move(out), {a},
        [an, bwd, val_copy = std::move(val_copy)](Node<T>& self) {
            if (!an->requires_grad) return;
            an->ensure_grad();
            const T* g = self.grad.data();
            const T* x = an->value.data();
            const T* y = val_copy.data();
            T* da = an->grad.data();
            for (size_t i = 0; i < self.value.size(); ++i) da[i] += bwd(g[i], x[i], y[i]);
        });
}

template <typename T>
Tensor<T> neg(Tensor<T> a) {
    return unary_op(a, [](T x) { return -x; }, [](T g, T, T) { return -g; });
}

template <typename T>
Tensor<T> exp_(Tensor<T> a) {
    return unary_op(a, [](T x) { return std::exp(x); }, [](T g, T, T y) { return g * y; });
}

template <typename T>
Tensor<T> log_(Tensor<T> a) {
    for (T x : a.value()) DCMA_CHECK(x > T(0), "log: non-positive argument");
    return unary_op(a, [](T x) { return std::log(x); }, [](T g, T x, T) { return g / x; });
}

template <typename T>
Tensor<T> gelu(Tensor<T> a) {
    constexpr double inv_sqrt2 = 0.7071067811865475244;
    constexpr double inv_sqrt2pi = 0.3989422804014326779;
    return unary_op(
        a, [](T x) { return T(0.5) * x * T(1 + std::erf(double(x) * inv_sqrt2)); },
        [](T g, T x, T) {
            double cdf = 0.5 * (1 + std::erf(double(x) * inv_sqrt2));
            double pdf = inv_sqrt2pi * std::exp(-0.5 * double(x) * double(x));
            return g * T(cdf + double(x) * pdf);
        });
}

template <typename T>
Tensor<T> add_scalar(Tensor<T> a, T s) {
    return unary_op(a, [s](T x) { return x + s; }, [](T g, T, T) { return g; });
}

template <typename T>
Tensor<T> scale(Tensor<T> a, T s) {
    return unary_op(a, [s](T x) { return x * s; }, [s](T g, T, T) { return g * s; });
}

// ---------------------------------------------------------------------------
// matmul: contracts the last two axes. Either b is 2-D [k,n] (applied to
// every leading slice of a), or a and b carry identical leading dims.
// ---------------------------------------------------------------------------

template <typename T>
using EMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using EMap = Eigen::Map<EMat<T>>;
template <typename T>
using ECMap = Eigen::Map<const EMat<T>>;

template <typename T>
Tensor<T> matmul(Tensor<T> a, Tensor<T> b) {
    const Shape& as = a.shape();
    const Shape& bs = b.shape();
    DCMA_CHECK(as.size() >= 2 && bs.size() >= 2, "matmul: operands must have >= 2 dims");
    size_t m = as[as.size() - 2], k = as[as.size() - 1];
    size_t k2 = bs[bs.size() - 2], n = bs[bs.size() - 1];
    DCMA_CHECK(k == k2, shape_mismatch("matmul", as, bs));
    bool b2d = bs.size() == 2;
    size_t lead = numel(as) / (m * k);
    if (!b2d) {
        DCMA_CHECK(as.size() == bs.size() &&
                       std::equal(as.begin(), as.end() - 2, bs.begin()),
                   shape_mismatch("matmul", as, bs));
    }
    Shape os(as.begin(), as.end() - 1);
    os.push_back(n);
    std::vector<T> out(lead * m * n);
    const T* av = a.value().data();
    const T* bv = b.value().data();
    if (b2d) {
        // one big gemm over flattened leading dims
        ECMap<T> A(av, lead * m, k);
        ECMap<T> B(bv, k, n);
        EMap<T> C(out.data(), lead * m, n);
        C.noalias() = A * B;
    } else {
        for (size_t l = 0; l < lead; ++l) {
            ECMap<T> A(av + l * m * k, m, k);
            ECMap<T> B(bv + l * k * n, k, n);
            EMap<T> C(out.data() + l * m * n, m, n);
            C.noalias() = A * B;
        }
    }
    auto an = a.node();
    auto bn = b.node();
    return detail::make_op<T>(
        std::move(os), std::move(out), {a, b},
        [an, bn, m, k, n, lead, b2d](Node<T>& self) {
            const T* g = self.grad.data();
            if (an->requires_grad) {
                an->ensure_grad();
                if (b2d) {
                    ECMap<T> G(g, lead * m, n);
                    ECMap<T> B(bn->value.data(), k, n);
                    EMap<T> DA(an->grad.data(), lead * m, k);
                    DA.noalias() += G * B.transpose();
                } else {
                    for (size_t l = 0; l < lead; ++l) {
                        ECMap<T> G(g + l * m * n, m, n);
                        ECMap<T> B(bn->value.data() + l * k * n, k, n);
                        EMap<T> DA(an->grad.data() + l * m * k, m, k);
                        DA.noalias() += G * B.transpose();
                    }
                }
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                if (b2d) {
                    ECMap<T> G(g, lead * m, n);
                    ECMap<T> A(an->value.data(), lead * m, k);
                    EMap<T> DB(bn->grad.data(), k, n);
                    DB.noalias() += A.transpose() * G;
                } else {
                    for (size_t l = 0; l < lead; ++l) {
                        ECMap<T> G(g + l * m * n, m, n);
                        ECMap<T> A(an->value.data() + l * m * k, m, k);
                        EMap<T> DB(bn->grad.data() + l * k * n, k, n);
                        DB.noalias() += A.transpose() * G;
                    }
                }
            }
        });
}

// ---------------------------------------------------------------------------
// shape ops
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> reshape(Tensor<T> a, Shape shape) {
    DCMA_CHECK(numel(shape) == a.size(),
               "reshape: numel mismatch " + shape_str(a.shape()) + " -> " + shape_str(shape));
    auto an = a.node();
    return detail::make_op<T>(
        std::move(shape), a.value(), {a},
        [an](Node<T>& self) {
            if (!an->requires_grad) return;
            an->ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i];
        });
}

namespace detail {

inline std::vector<size_t> strides_of(const Shape& s) {
    std::vector<size_t> st(s.size(), 1);
    for (size_t i = s.size(); i-- > 1;) st[i - 1] = st[i] * s[i];
    return st;
}

// copy src into dst where dst has axes ax0 and ax1 of src swapped
template <typename T>
void swap_axes_copy(const T* src, T* dst, const Shape& in_shape, size_t ax0, size_t ax1,
                    bool accumulate) {
    Shape out_shape = in_shape;
    std::swap(out_shape[ax0], out_shape[ax1]);
    auto in_st = strides_of(in_shape);
    std::vector<size_t> out_src_stride(out_shape.size());
    for (size_t i = 0; i < in_shape.size(); ++i) out_src_stride[i] = in_st[i];
    std::swap(out_src_stride[ax0], out_src_stride[ax1]);
    size_t nd = out_shape.size();
    std::vector<size_t> idx(nd, 0);
    size_t n = numel(out_shape);
    size_t src_off = 0;
    for (size_t lin = 0; lin < n; ++lin) {
        if (accumulate)
            dst[lin] += src[src_off];
        else
            dst[lin] = src[src_off];
        // increment multi-index with carry, maintaining src offset
        for (size_t d = nd; d-- > 0;) {
            idx[d]++;
            src_off += out_src_stride[d];
            if (idx[d] < out_shape[d]) break;
            src_off -= out_src_stride[d] * out_shape[d];
            idx[d] = 0;
        }
    }
}

}  // namespace detail

template <typename T>
Tensor<T> swap_axes(Tensor<T> a, size_t ax0, size_t ax1) {
    const Shape& as = a.shape();
    DCMA_CHECK(ax0 < as.size() && ax1 < as.size(), "swap_axes: axis out of range");
    Shape os = as;
    std::swap(os[ax0], os[ax1]);
    std::vector<T> out(a.size());
    detail::swap_axes_copy(a.value().data(), out.data(), as, ax0, ax1, false);
    auto an = a.node();
    Shape os_copy = os;
    return detail::make_op<T>(
        std::move(os), std::move(out), {a},
        [an, ax0, ax1, os_copy](Node<T>& self) {
            if (!an->requires_grad) return;
            an->ensure_grad();
            // grad has the swapped shape; swapping back lands on a's layout
            detail::swap_axes_copy(self.grad.data(), an->grad.data(), os_copy, ax0, ax1, true);
        });
}

template <typename T>
Tensor<T> concat(std::vector<Tensor<T>> parts, size_t axis) {
    DCMA_CHECK(!parts.empty(), "concat: no inputs");
    const Shape& s0 = parts[0].shape();
    DCMA_CHECK(axis < s0.size(), "concat: axis out of range");
    size_t total_axis = 0;
    for (auto& p : parts) {
        const Shape& ps = p.shape();
        DCMA_CHECK(ps.size() == s0.size(), shape_mismatch("concat", s0, ps));
        for (size_t i = 0; i < s0.size(); ++i)
            DCMA_CHECK(i == axis || ps[i] == s0[i], shape_mismatch("concat", s0, ps));
        total_axis += ps[axis];
    }
    Shape os = s0;
    os[axis] = total_axis;
    size_t outer = 1, inner = 1;
    for (size_t i = 0; i < axis; ++i) outer *= s0[i];
    for (size_t i = axis + 1; i < s0.size(); ++i) inner *= s0[i];
    std::vector<T> out(numel(os));
    std::vector<size_t> axis_sizes;
    size_t off = 0;
    for (auto& p : parts) {
        size_t pa = p.shape()[axis];
        axis_sizes.push_back(pa);
        const T* pv = p.value().data();
        for (size_t o = 0; o < outer; ++o)
            std::copy(pv + o * pa * inner, pv + (o + 1) * pa * inner,
                      out.data() + (o * total_axis + off) * inner);
        off += pa;
    }
    std::vector<std::shared_ptr<Node<T>>> pnodes;
    for (auto& p : parts) pnodes.push_back(p.node());
    return detail::make_op<T>(
        std::move(os), std::move(out), parts,
        [pnodes, axis_sizes, outer, inner, total_axis](Node<T>& self) {
            size_t off = 0;
            for (size_t pi = 0; pi < pnodes.size(); ++pi) {
                auto& pn = pnodes[pi];
                size_t pa = axis_sizes[pi];
                if (pn->requires_grad) {
                    pn->ensure_grad();
                    for (size_t o = 0; o < outer; ++o) {
                        const T* g = self.grad.data() + (o * total_axis + off) * inner;
                        T* dp = pn->grad.data() + o * pa * inner;
                        for (size_t i = 0; i < pa * inner; ++i) dp[i] += g[i];
                    }
                }
                off += pa;
            }
        });
}

template <typename T>
Tensor<T> slice(Tensor<T> a, size_t axis, size_t begin, size_t end) {
    const Shape& as = a.shape();
    DCMA_CHECK(axis < as.size() && begin < end && end <= as[axis], "slice: bad range");
    Shape os = as;
    os[axis] = end - begin;
    size_t outer = 1, inner = 1;
    for (size_t i = 0; i < axis; ++i) outer *= as[i];
    for (size_t i = axis + 1; i < as.size(); ++i) inner *= as[i];
    size_t ax = as[axis], w = end - begin;
    std::vector<T> out(numel(os));
    const T* av = a.value().data();
    for (size_t o = 0; o < outer; ++o)
        std::copy(av + (o * ax + begin) * inner, av + (o * ax + end) * inner,
                  out.data() + o * w * inner);
    auto an = a.node();
    return detail::make_op<T>(
        std::move(os), std::move(out), {a},
        [an, outer, inner, ax, begin, w](Node<T>& self) {
            if (!an->requires_grad) return;
            an->ensure_grad();
            for (size_t o = 0; o < outer; ++o) {
                const T* g = self.grad.data() + o * w * inner;
                T* da = an->grad.data() + (o * ax + begin) * inner;
                for (size_t i = 0; i < w * inner; ++i) da[i] += g[i];
            }
        });
}

// tile a to shape [reps] + a.shape; gradient sums over the tiles
template <typename T>
Tensor<T> expand_leading(Tensor<T> a, size_t reps) {
    Shape os = a.shape();
    os.insert(os.begin(), reps);
    size_t n = a.size();
    std::vector<T> out(reps * n);
    for (size_t r = 0; r < reps; ++r)
        std::copy(a.value().begin(), a.value().end(), out.begin() + r * n);
    auto an = a.node();
    return detail::make_op<T>(
        std::move(os), std::move(out), {a},
        [an, reps, n](Node<T>& self) {
            if (!an->requires_grad) return;
            an->ensure_grad();
            for (size_t r = 0; r < reps; ++r) {
                const T* g = self.grad.data() + r * n;
                for (size_t i = 0; i < n; ++i) an->grad[i] += g[i];
            }
        });
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> sum_axis(Tensor<T> a, size_t axis) {
    const Shape& as = a.shape();
    DCMA_CHECK(axis < as.size(), "sum_axis: axis out of range");
    Shape os;
    for (size_t i = 0; i < as.size(); ++i)
        if (i != axis) os.push_back(as[i]);
    if (os.empty()) os.push_back(1);
    size_t outer = 1, inner = 1, ax = as[axis];
    for (size_t i = 0; i < axis; ++i) outer *= as[i];
    for (size_t i = axis + 1; i < as.size(); ++i) inner *= as[i];
    std::vector<T> out(outer * inner, T(0));
    const T* av = a.value().data();
    for (size_t o = 0; o < outer; ++o)
        for (size_t k = 0; k < ax; ++k)
            for (size_t i = 0; i < inner; ++i) out[o * inner + i] += av[(o * ax + k) * inner + i];
    auto an = a.node();
    return detail::make_op<T>(
        std::move(os), std::move(out), {a},
        [an, outer, inner, ax](Node<T>& self) {
            if (!an->requires_grad) return;
            an->ensure_grad();
            for (size_t o = 0; o < outer; ++o)
                for (size_t k = 0; k < ax; ++k)
                    for (size_t i = 0; i < inner; ++i)
                        an->grad[(o * ax + k) * inner + i] += self.grad[o * inner + i];
        });
}

template <typename T>
Tensor<T> mean_axis(Tensor<T> a, size_t axis) {
    T inv = T(1) / T(a.shape()[axis]);
    return scale(sum_axis(a, axis), inv);
}

template <typename T>
Tensor<T> sum_all(Tensor<T> a) {
    T acc = 0;
    for (T x : a.value()) acc += x;
    auto an = a.node();
    return detail::make_op<T>(
        Shape{1}, {acc}, {a},
        [an](Node<T>& self) {
            if (!an->requires_grad) return;
            an->ensure_grad();
            T g = self.grad[0];
            for (auto& d : an->grad) d += g;
        });
}

template <typename T>
Tensor<T> mean_all(Tensor<T> a) {
    return scale(sum_all(a), T(1) / T(a.size()));
}

// max over the last axis (keeps leading shape); ties break to lowest index
template <typename T>
Tensor<T> max_last(Tensor<T> a, std::vector<size_t>* argmax_out = nullptr) {
    const Shape& as = a.shape();
    DCMA_CHECK(!as.empty(), "max_last: empty shape");
    size_t w = as.back();
    size_t rows = a.size() / w;
    Shape os(as.begin(), as.end() - 1);
    if (os.empty()) os.push_back(1);
    std::vector<T> out(rows);
    std::vector<size_t> arg(rows);
    const T* av = a.value().data();
    for (size_t r = 0; r < rows; ++r) {
        size_t best = 0;
        for (size_t j = 1; j < w; ++j)
            if (av[r * w + j] > av[r * w + best]) best = j;
        arg[r] = best;
        out[r] = av[r * w + best];
    }
    if (argmax_out) *argmax_out = arg;
    auto an = a.node();
    return detail::make_op<T>(
        std::move(os), std::move(out), {a},
        [an, arg = std::move(arg), w, rows](Node<T>& self) {
            if (!an->requires_grad) return;
            an->ensure_grad();
            for (size_t r = 0; r < rows; ++r) an->grad[r * w + arg[r]] += self.grad[r];
        });
}

template <typename T>
std::vector<size_t> argmax_last(const Tensor<T>& a) {
    size_t w = a.shape().back();
    size_t rows = a.size() / w;
    std::vector<size_t> arg(rows);
    const T* av = a.value().data();
    for (size_t r = 0; r < rows; ++r) {
        size_t best = 0;
        for (size_t j = 1; j < w; ++j)
            if (av[r * w + j] > av[r * w + best]) best = j;
        arg[r] = best;
    }
    return arg;
}

// ---------------------------------------------------------------------------
// softmax family (last axis)
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> softmax(Tensor<T> a) {
    size_t w = a.shape().back();
    size_t rows = a.size() / w;
    std::vector<T> out(a.size());
    const T* av = a.value().data();
    for (size_t r = 0; r < rows; ++r) {
        const T* x = av + r * w;
        T* y = out.data() + r * w;
        T mx = x[0];
        for (size_t j = 1; j < w; ++j) mx = std::max(mx, x[j]);
        T z = 0;
        for (size_t j = 0; j < w; ++j) {
            y[j] = std::exp(x[j] - mx);
            z += y[j];
        }
        for (size_t j = 0; j < w; ++j) y[j] /= z;
    }
    auto an = a.node();
    auto yv = out;
    return detail::make_op<T>(
        a.shape(), std::move(out), {a},
        [an, yv = std::move(yv), w, rows](Node<T>& self) {
            if (!an->requires_grad) return;
            an->ensure_grad();
            for (size_t r = 0; r < rows; ++r) {
                const T* g = self.grad.data() + r * w;
                const T* y = yv.data() + r * w;
                T dot = 0;
                for (size_t j = 0; j < w; ++j) dot += g[j] * y[j];
                T* da = an->grad.data() + r * w;
                for (size_t j = 0; j < w; ++j) da[j] += y[j] * (g[j] - dot);
            }
        });
}

template <typename T>
Tensor<T> log_softmax(Tensor<T> a) {
    size_t w = a.shape().back();
    size_t rows = a.size() / w;
    std::vector<T> out(a.size());
    const T* av = a.value().data();
    for (size_t r = 0; r < rows; ++r) {
        const T* x = av + r * w;
        T* y = out.data() + r * w;
        T mx = x[0];
        for (size_t j = 1; j < w; ++j) mx = std::max(mx, x[j]);
        T z = 0;
        for (size_t j = 0; j < w; ++j) z += std::exp(x[j] - mx);
        T lz = mx + std::log(z);
        for (size_t j = 0; j < w; ++j) y[j] = x[j] - lz;
    }
    auto an = a.node();
    auto yv = out;
    return detail::make_op<T>(
        a.shape(), std::move(out), {a},
        [an, yv = std::move(yv), w, rows](Node<T>& self) {
            if (!an->requires_grad) return;
            an->ensure_grad();
            for (size_t r = 0; r < rows; ++r) {
                const T* g = self.grad.data() + r * w;
                const T* y = yv.data() + r * w;
                T gs = 0;
                for (size_t j = 0; j < w; ++j) gs += g[j];
                T* da = an->grad.data() + r * w;
                for (size_t j = 0; j < w; ++j) da[j] += g[j] - std::exp(y[j]) * gs;
            }
        });
}

// pick one entry per row of the last axis: out[r] = a[r, ids[r]]
template <typename T>
Tensor<T> pick_last(Tensor<T> a, std::vector<size_t> ids) {
    size_t w = a.shape().back();
    size_t rows = a.size() / w;
    DCMA_CHECK(ids.size() == rows, "pick_last: id count mismatch");
    Shape os(a.shape().begin(), a.shape().end() - 1);
    if (os.empty()) os.push_back(1);
    std::vector<T> out(rows);
    const T* av = a.value().data();
    for (size_t r = 0; r < rows; ++r) {
        DCMA_CHECK(ids[r] < w, "pick_last: index out of range");
        out[r] = av[r * w + ids[r]];
    }
    auto an = a.node();
    return detail::make_op<T>(
        std::move(os), std::move(out), {a},
        [an, ids = std::move(ids), w, rows](Node<T>& self) {
            if (!an->requires_grad) return;
            an->ensure_grad();
            for (size_t r = 0; r < rows; ++r) an->grad[r * w + ids[r]] += self.grad[r];
        });
}

// ---------------------------------------------------------------------------
// lookup / masking
// ---------------------------------------------------------------------------

// rows of table gathered by id; out shape = out_leading + [d]
template <typename T>
Tensor<T> embedding(Tensor<T> table, const std::vector<size_t>& ids, Shape out_leading) {
    DCMA_CHECK(table.ndim() == 2, "embedding: table must be 2-D");
    size_t v = table.shape()[0], d = table.shape()[1];
    DCMA_CHECK(numel(out_leading) == ids.size(), "embedding: id count does not match shape");
    Shape os = out_leading;
    os.push_back(d);
    std::vector<T> out(ids.size() * d);
    const T* tv = table.value().data();
    for (size_t i = 0; i < ids.size(); ++i) {
        DCMA_CHECK(ids[i] < v, "embedding: id out of range");
        std::copy(tv + ids[i] * d, tv + (ids[i] + 1) * d, out.begin() + i * d);
    }
    auto tn = table.node();
    return detail::make_op<T>(
        std::move(os), std::move(out), {table},
        [tn, ids, d](Node<T>& self) {
            if (!tn->requires_grad) return;
            tn->ensure_grad();
            for (size_t i = 0; i < ids.size(); ++i) {
                const T* g = self.grad.data() + i * d;
                T* dt = tn->grad.data() + ids[i] * d;
                for (size_t j = 0; j < d; ++j) dt[j] += g[j];
            }
        });
}

// mask broadcasts like the binary ops: its extent must divide a's trailing
// layout; entries with mask!=0 are replaced by fill and pass no gradient
template <typename T>
Tensor<T> masked_fill(Tensor<T> a, const std::vector<uint8_t>& mask, T fill) {
    size_t an = a.size(), mn = mask.size();
    DCMA_CHECK(mn >= 1 && an % mn == 0, "masked_fill: mask extent does not divide tensor");
    std::vector<T> out(an);
    const T* av = a.value().data();
    for (size_t i = 0; i < an; ++i) out[i] = mask[i % mn] ? fill : av[i];
    auto node = a.node();
    return detail::make_op<T>(
        a.shape(), std::move(out), {a},
        [node, mask, mn](Node<T>& self) {
            if (!node->requires_grad) return;
            node->ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i)
                if (!mask[i % mn]) node->grad[i] += self.grad[i];
        });
}

// a: [B, ..., L]; mask: [B, L]; per-item fill along the last axis,
// broadcast over middle axes (attention key padding)
template <typename T>
Tensor<T> masked_fill_keys(Tensor<T> a, const std::vector<uint8_t>& mask, T fill) {
    const Shape& as = a.shape();
    DCMA_CHECK(as.size() >= 2, "masked_fill_keys: need >= 2 dims");
    size_t b = as.front(), l = as.back();
    DCMA_CHECK(mask.size() == b * l, "masked_fill_keys: mask must be [batch, last]");
    size_t mid = a.size() / (b * l);
    std::vector<T> out(a.size());
    const T* av = a.value().data();
    for (size_t bi = 0; bi < b; ++bi)
        for (size_t m = 0; m < mid; ++m)
            for (size_t j = 0; j < l; ++j) {
                size_t k = (bi * mid + m) * l + j;
                out[k] = mask[bi * l + j] ? fill : av[k];
            }
    auto node = a.node();
    return detail::make_op<T>(
        as, std::move(out), {a},
        [node, mask, b, mid, l](Node<T>& self) {
            if (!node->requires_grad) return;
            node->ensure_grad();
            for (size_t bi = 0; bi < b; ++bi)
                for (size_t m = 0; m < mid; ++m)
                    for (size_t j = 0; j < l; ++j) {
                        size_t k = (bi * mid + m) * l + j;
                        if (!mask[bi * l + j]) node->grad[k] += self.grad[k];
                    }
        });
}

// a: [B, L, ...]; mask: [B, L]; zero/fill whole rows (padding positions)
template <typename T>
Tensor<T> masked_fill_rows(Tensor<T> a, const std::vector<uint8_t>& mask, T fill) {
    const Shape& as = a.shape();
    DCMA_CHECK(as.size() >= 2, "masked_fill_rows: need >= 2 dims");
    size_t b = as[0], l = as[1];
    DCMA_CHECK(mask.size() == b * l, "masked_fill_rows: mask must be [batch, rows]");
    size_t inner = a.size() / (b * l);
    std::vector<T> out(a.size());
    const T* av = a.value().data();
    for (size_t r = 0; r < b * l; ++r) {
        if (mask[r])
            std::fill(out.begin() + r * inner, out.begin() + (r + 1) * inner, fill);
        else
            std::copy(av + r * inner, av + (r + 1) * inner, out.begin() + r * inner);
    }
    auto node = a.node();
    return detail::make_op<T>(
        as, std::move(out), {a},
        [node, mask, inner](Node<T>& self) {
            if (!node->requires_grad) return;
            node->ensure_grad();
            for (size_t r = 0; r < mask.size(); ++r)
                if (!mask[r]) {
                    const T* g = self.grad.data() + r * inner;
                    T* d = node->grad.data() + r * inner;
                    for (size_t i = 0; i < inner; ++i) d[i] += g[i];
                }
        });
}

// ---------------------------------------------------------------------------
// structural ops
// ---------------------------------------------------------------------------

// forwards the value, contributes zero gradient upstream
template <typename T>
Tensor<T> stop_gradient(Tensor<T> a) {
    return Tensor<T>::constant(a.shape(), a.value());
}

// forward is the given hard value, backward is the identity onto the soft
// relaxation (straight-through estimator)
template <typename T>
Tensor<T> straight_through(Tensor<T> soft, std::vector<T> hard) {
    DCMA_CHECK(hard.size() == soft.size(), "straight_through: size mismatch");
    auto sn = soft.node();
    return detail::make_op<T>(
        soft.shape(), std::move(hard), {soft},
        [sn](Node<T>& self) {
            if (!sn->requires_grad) return;
            sn->ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i) sn->grad[i] += self.grad[i];
        });
}

template <typename T>
Tensor<T> dropout(Tensor<T> a, double rate, Rng& rng, bool training) {
    DCMA_CHECK(rate >= 0.0 && rate < 1.0, "dropout: rate must be in [0,1)");
    if (!training || rate == 0.0) return a;
    size_t n = a.size();
    std::vector<uint8_t> keep(n);
    T scl = T(1.0 / (1.0 - rate));
    std::vector<T> out(n);
    const T* av = a.value().data();
    for (size_t i = 0; i < n; ++i) {
        keep[i] = rng.uniform() >= rate;
        out[i] = keep[i] ? av[i] * scl : T(0);
    }
    auto an = a.node();
    return detail::make_op<T>(
        a.shape(), std::move(out), {a},
        [an, keep = std::move(keep), scl](Node<T>& self) {
            if (!an->requires_grad) return;
            an->ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i)
                if (keep[i]) an->grad[i] += self.grad[i] * scl;
        });
}

// ---------------------------------------------------------------------------
// layer normalization over the last axis
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> layer_norm(Tensor<T> x, Tensor<T> gain, Tensor<T> bias, T eps = T(1e-5)) {
    size_t w = x.shape().back();
    DCMA_CHECK(gain.size() == w && bias.size() == w, "layer_norm: gain/bias width mismatch");
    size_t rows = x.size() / w;
    std::vector<T> out(x.size());
    std::vector<T> xhat(x.size());
    std::vector<T> inv_sigma(rows);
    const T* xv = x.value().data();
    const T* gv = gain.value().data();
    const T* bv = bias.value().data();
    for (size_t r = 0; r < rows; ++r) {
        const T* xr = xv + r * w;
        T mu = 0;
        for (size_t j = 0; j < w; ++j) mu += xr[j];
        mu /= T(w);
        T var = 0;
        for (size_t j = 0; j < w; ++j) var += (xr[j] - mu) * (xr[j] - mu);
        var /= T(w);
        T is = T(1) / std::sqrt(var + eps);
        inv_sigma[r] = is;
        for (size_t j = 0; j < w; ++j) {
            T xh = (xr[j] - mu) * is;
            xhat[r * w + j] = xh;
            out[r * w + j] = xh * gv[j] + bv[j];
        }
    }
    auto xn = x.node();
    auto gn = gain.node();
    auto bn = bias.node();
    return detail::make_op<T>(
        x.shape(), std::move(out), {x, gain, bias},
        [xn, gn, bn, xhat = std::move(xhat), inv_sigma = std::move(inv_sigma), w,
         rows](Node<T>& self) {
            const T* g = self.grad.data();
            const T* gv = gn->value.data();
            if (xn->requires_grad) {
                xn->ensure_grad();
                for (size_t r = 0; r < rows; ++r) {
                    const T* gr = g + r * w;
                    const T* xh = xhat.data() + r * w;
                    T m1 = 0, m2 = 0;
                    for (size_t j = 0; j < w; ++j) {
                        T gg = gr[j] * gv[j];
                        m1 += gg;
                        m2 += gg * xh[j];
                    }
                    m1 /= T(w);
                    m2 /= T(w);
                    T* dx = xn->grad.data() + r * w;
                    for (size_t j = 0; j < w; ++j)
                        dx[j] += inv_sigma[r] * (gr[j] * gv[j] - m1 - xh[j] * m2);
                }
            }
            if (gn->requires_grad) {
                gn->ensure_grad();
                for (size_t r = 0; r < rows; ++r)
                    for (size_t j = 0; j < w; ++j)
                        gn->grad[j] += g[r * w + j] * xhat[r * w + j];
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (size_t r = 0; r < rows; ++r)
                    for (size_t j = 0; j < w; ++j) bn->grad[j] += g[r * w + j];
            }
        });
}

// ---------------------------------------------------------------------------
// 1-D convolution, im2col + gemm. x: [B,T,Cin], w: [K,Cin,Cout], b: [Cout].
// T_out = floor((T + 2*pad - K)/stride) + 1
// ---------------------------------------------------------------------------

inline size_t conv1d_out_len(size_t t, size_t kernel, size_t stride, size_t pad) {
    DCMA_CHECK(t + 2 * pad >= kernel, "conv1d: input shorter than kernel");
    return (t + 2 * pad - kernel) / stride + 1;
}

template <typename T>
Tensor<T> conv1d(Tensor<T> x, Tensor<T> w, Tensor<T> b, size_t stride, size_t pad) {
    const Shape& xs = x.shape();
    const Shape& ws = w.shape();
    DCMA_CHECK(xs.size() == 3 && ws.size() == 3, "conv1d: x must be [B,T,Cin], w [K,Cin,Cout]");
    size_t bsz = xs[0], t = xs[1], cin = xs[2];
    size_t k = ws[0], cin2 = ws[1], cout = ws[2];
    DCMA_CHECK(cin == cin2, shape_mismatch("conv1d", xs, ws));
    DCMA_CHECK(b.size() == cout, "conv1d: bias width mismatch");
    size_t to = conv1d_out_len(t, k, stride, pad);
    size_t colw = k * cin;
    std::vector<T> col(bsz * to * colw, T(0));
    const T* xv = x.value().data();
    for (size_t bi = 0; bi < bsz; ++bi)
        for (size_t o = 0; o < to; ++o) {
            T* crow = col.data() + (bi * to + o) * colw;
            for (size_t kk = 0; kk < k; ++kk) {
                long ti = long(o * stride + kk) - long(pad);
                if (ti < 0 || ti >= long(t)) continue;
                const T* src = xv + (bi * t + size_t(ti)) * cin;
                std::copy(src, src + cin, crow + kk * cin);
            }
        }
    std::vector<T> out(bsz * to * cout);
    {
        ECMap<T> C(col.data(), bsz * to, colw);
        ECMap<T> W(w.value().data(), colw, cout);
        EMap<T> O(out.data(), bsz * to, cout);
        O.noalias() = C * W;
        const T* bvv = b.value().data();
        for (size_t r = 0; r < bsz * to; ++r)
            for (size_t j = 0; j < cout; ++j) out[r * cout + j] += bvv[j];
    }
    auto xn = x.node();
    auto wn = w.node();
    auto bn = b.node();
    return detail::make_op<T>(
        Shape{bsz, to, cout}, std::move(out), {x, w, b},
        [xn, wn, bn, col = std::move(col), bsz, t, cin, k, cout, to, stride, pad,
         colw](Node<T>& self) {
            const T* g = self.grad.data();
            if (wn->requires_grad) {
                wn->ensure_grad();
                ECMap<T> C(col.data(), bsz * to, colw);
                ECMap<T> G(g, bsz * to, cout);
                EMap<T> DW(wn->grad.data(), colw, cout);
                DW.noalias() += C.transpose() * G;
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (size_t r = 0; r < bsz * to; ++r)
                    for (size_t j = 0; j < cout; ++j) bn->grad[j] += g[r * cout + j];
            }
            if (xn->requires_grad) {
                xn->ensure_grad();
                std::vector<T> gcol(bsz * to * colw);
                ECMap<T> G(g, bsz * to, cout);
                ECMap<T> W(wn->value.data(), colw, cout);
                EMap<T> GC(gcol.data(), bsz * to, colw);
                GC.noalias() = G * W.transpose();
                for (size_t bi = 0; bi < bsz; ++bi)
                    for (size_t o = 0; o < to; ++o) {
                        const T* crow = gcol.data() + (bi * to + o) * colw;
                        for (size_t kk = 0; kk < k; ++kk) {
                            long ti = long(o * stride + kk) - long(pad);
                            if (ti < 0 || ti >= long(t)) continue;
                            T* dst = xn->grad.data() + (bi * t + size_t(ti)) * cin;
                            for (size_t c = 0; c < cin; ++c) dst[c] += crow[kk * cin + c];
                        }
                    }
            }
        });
}

// ---------------------------------------------------------------------------
// backward pass
// ---------------------------------------------------------------------------

template <typename T>
void backward(const Tensor<T>& loss) {
    DCMA_CHECK(loss.size() == 1, "backward: loss must be scalar, got " + shape_str(loss.shape()));
    DCMA_CHECK(loss.requires_grad(), "backward: loss does not require grad");
    // iterative post-order DFS over parents
    std::vector<Node<T>*> topo;
    std::unordered_set<Node<T>*> visited;
    std::vector<std::pair<Node<T>*, size_t>> stack;
    stack.push_back({loss.node().get(), 0});
    visited.insert(loss.node().get());
    while (!stack.empty()) {
        auto& [n, i] = stack.back();
        if (i < n->parents.size()) {
            Node<T>* p = n->parents[i++].get();
            if (p->requires_grad && !visited.count(p)) {
                visited.insert(p);
                stack.push_back({p, 0});
            }
        } else {
            topo.push_back(n);
            stack.pop_back();
        }
    }
    // interior grads start from zero every pass; leaves accumulate across
    // passes (callers zero parameter grads between steps)
    for (Node<T>* n : topo)
        if (!n->parents.empty())
            n->grad.assign(n->value.size(), T(0));
        else
            n->ensure_grad();
    loss.node()->ensure_grad();
    loss.node()->grad[0] += T(1);
    for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
        Node<T>* n = *it;
        if (n->backward_fn) n->backward_fn(*n);
    }
}

}  // namespace dcma
