#pragma once

// Dense tensors with reverse-mode automatic differentiation.
//
// A Tensor is a shared handle to a value buffer plus an optional gradient
// buffer of the same shape. A Tape records the primitive operations of one
// forward pass in execution order; backward() replays them in reverse, which
// is a valid topological order by construction. Gradients accumulate with +=
// so a tensor used twice receives the sum of both contributions, and
// parameter gradients survive across tapes until the optimizer clears them
// (that is what gradient accumulation over micro-batches relies on).
//
// Everything is scalar-templated: double is the default precision, float is
// selectable per run. All loops are plain and sequential, so forward results
// are bit-identical across repeated runs with the same seed.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "peftlab/rng.hpp"

namespace peftlab {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (std::size_t d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) os << "x";
        os << s[i];
    }
    os << "]";
    return os.str();
}

namespace detail {

template <class T>
struct TensorNode {
    Shape shape;
    std::vector<T> value;
    std::vector<T> grad;  // empty until backward touches this node
    bool requires_grad = false;
};

}  // namespace detail

template <class T>
class Tensor {
public:
    Tensor() : node_(std::make_shared<detail::TensorNode<T>>()) {}

    Tensor(Shape shape, std::vector<T> data, bool requires_grad = false)
        : node_(std::make_shared<detail::TensorNode<T>>()) {
        if (shape_numel(shape) != data.size()) {
            throw std::invalid_argument("tensor: shape " + shape_str(shape) +
                                        " does not match data length " + std::to_string(data.size()));
        }
        for (std::size_t d : shape) {
            if (d == 0) throw std::invalid_argument("tensor: zero-sized dimension in " + shape_str(shape));
        }
        node_->shape = std::move(shape);
        node_->value = std::move(data);
        node_->requires_grad = requires_grad;
    }

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        const std::size_t n = shape_numel(shape);
        return Tensor(std::move(shape), std::vector<T>(n, T{0}), requires_grad);
    }

    static Tensor full(Shape shape, T fill, bool requires_grad = false) {
        const std::size_t n = shape_numel(shape);
        return Tensor(std::move(shape), std::vector<T>(n, fill), requires_grad);
    }

    static Tensor scalar(T v, bool requires_grad = false) {
        return Tensor(Shape{1}, std::vector<T>{v}, requires_grad);
    }

    static Tensor row(std::vector<T> data, bool requires_grad = false) {
        Shape s{data.size()};
        return Tensor(std::move(s), std::move(data), requires_grad);
    }

    static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<T> data,
                         bool requires_grad = false) {
        return Tensor(Shape{rows, cols}, std::move(data), requires_grad);
    }

    // Handle semantics: a const Tensor is a const handle to shared, mutable
    // storage, the same way a const shared_ptr still dereferences to T&.

    const Shape& shape() const { return node_->shape; }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t numel() const { return node_->value.size(); }
    bool is_scalar() const { return numel() == 1; }

    /// Number of rows when the tensor is viewed as [rows x last_dim].
    std::size_t rows() const { return numel() / last_dim(); }
    std::size_t last_dim() const {
        return node_->shape.empty() ? 1 : node_->shape.back();
    }

    std::vector<T>& value() const { return node_->value; }

    T& at(std::size_t i) const { return node_->value[i]; }
    T& at(std::size_t r, std::size_t c) const { return node_->value[r * last_dim() + c]; }

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool rg) const {
        node_->requires_grad = rg;
        if (!rg) node_->grad.clear();
    }

    bool has_grad() const { return !node_->grad.empty(); }
    std::vector<T>& grad() const {
        ensure_grad();
        return node_->grad;
    }

    void ensure_grad() const {
        if (node_->grad.empty()) node_->grad.assign(node_->value.size(), T{0});
    }

    void zero_grad() const {
        if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), T{0});
    }

    bool same_node(const Tensor& other) const { return node_ == other.node_; }

    detail::TensorNode<T>* node() const { return node_.get(); }

private:
    std::shared_ptr<detail::TensorNode<T>> node_;
};

/// Records one forward pass and plays it backwards exactly once. A tape
/// built with grad_enabled = false runs forward-only: nothing is recorded and
/// outputs never require gradients (the cheap mode for decoding/perplexity).
template <class T>
class Tape {
public:
    Tape() = default;
    explicit Tape(bool grad_enabled) : grad_enabled_(grad_enabled) {}
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    std::size_t num_ops() const { return ops_.size(); }
    bool grad_enabled() const { return grad_enabled_; }

    // ---------------------------------------------------------------- add
    Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
        if (a.shape() != b.shape()) {
            throw std::invalid_argument("add: shape mismatch " + shape_str(a.shape()) + " vs " +
                                        shape_str(b.shape()));
        }
        Tensor<T> out(a.shape(), a.value(), false);
        auto& ov = out.value();
        const auto& bv = b.value();
        for (std::size_t i = 0; i < ov.size(); ++i) ov[i] += bv[i];
        if (grad_enabled_ && (a.requires_grad() || b.requires_grad())) {
            out.set_requires_grad(true);
            record([a, b, out]() {
                if (!out.has_grad()) return;
                const auto& g = out.grad();
                if (a.requires_grad()) {
                    auto& ga = a.grad();
                    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                }
                if (b.requires_grad()) {
                    auto& gb = b.grad();
                    for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
                }
            });
        }
        return out;
    }

    /// x viewed as [R x C] plus a length-C vector broadcast over rows.
    Tensor<T> add_rowvec(const Tensor<T>& x, const Tensor<T>& b) {
        const std::size_t c = x.last_dim();
        if (b.rank() != 1 || b.numel() != c) {
            throw std::invalid_argument("add_rowvec: vector " + shape_str(b.shape()) +
                                        " does not match last dim of " + shape_str(x.shape()));
        }
        Tensor<T> out(x.shape(), x.value(), false);
        const std::size_t r = x.rows();
        auto& ov = out.value();
        const auto& bv = b.value();
        for (std::size_t i = 0; i < r; ++i) {
            T* orow = ov.data() + i * c;
            for (std::size_t j = 0; j < c; ++j) orow[j] += bv[j];
        }
        if (grad_enabled_ && (x.requires_grad() || b.requires_grad())) {
            out.set_requires_grad(true);
            record([x, b, out, r, c]() {
                if (!out.has_grad()) return;
                const auto& g = out.grad();
                if (x.requires_grad()) {
                    auto& gx = x.grad();
                    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
                }
                if (b.requires_grad()) {
                    auto& gb = b.grad();
                    for (std::size_t i = 0; i < r; ++i) {
                        const T* grow = g.data() + i * c;
                        for (std::size_t j = 0; j < c; ++j) gb[j] += grow[j];
                    }
                }
            });
        }
        return out;
    }

    Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
        if (a.shape() != b.shape()) {
            throw std::invalid_argument("mul: shape mismatch " + shape_str(a.shape()) + " vs " +
                                        shape_str(b.shape()));
        }
        Tensor<T> out(a.shape(), a.value(), false);
        auto& ov = out.value();
        const auto& bv = b.value();
        for (std::size_t i = 0; i < ov.size(); ++i) ov[i] *= bv[i];
        if (grad_enabled_ && (a.requires_grad() || b.requires_grad())) {
            out.set_requires_grad(true);
            record([a, b, out]() {
                if (!out.has_grad()) return;
                const auto& g = out.grad();
                if (a.requires_grad()) {
                    auto& ga = a.grad();
                    const auto& bv2 = b.value();
                    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv2[i];
                }
                if (b.requires_grad()) {
                    auto& gb = b.grad();
                    const auto& av2 = a.value();
                    for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av2[i];
                }
            });
        }
        return out;
    }

    Tensor<T> scale(const Tensor<T>& a, T c) {
        Tensor<T> out(a.shape(), a.value(), false);
        for (auto& v : out.value()) v *= c;
        if (grad_enabled_ && (a.requires_grad())) {
            out.set_requires_grad(true);
            record([a, out, c]() {
                if (!out.has_grad()) return;
                const auto& g = out.grad();
                auto& ga = a.grad();
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * c;
            });
        }
        return out;
    }

    // ------------------------------------------------------------- matmul
    Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
        if (a.rank() != 2 || b.rank() != 2) {
            throw std::invalid_argument("matmul: expects rank-2 operands, got " +
                                        shape_str(a.shape()) + " and " + shape_str(b.shape()));
        }
        const std::size_t m = a.shape()[0], k = a.shape()[1];
        const std::size_t k2 = b.shape()[0], n = b.shape()[1];
        if (k != k2) {
            throw std::invalid_argument("matmul: inner dimensions disagree: " + shape_str(a.shape()) +
                                        " vs " + shape_str(b.shape()));
        }
        Tensor<T> out = Tensor<T>::zeros(Shape{m, n});
        matmul_accumulate(a.value().data(), b.value().data(), out.value().data(), m, k, n);
        if (grad_enabled_ && (a.requires_grad() || b.requires_grad())) {
            out.set_requires_grad(true);
            record([a, b, out, m, k, n]() {
                if (!out.has_grad()) return;
                const T* g = out.grad().data();
                if (a.requires_grad()) {
                    // dA[i,k] += sum_j g[i,j] * B[k,j]
                    T* ga = a.grad().data();
                    const T* bv = b.value().data();
                    for (std::size_t i = 0; i < m; ++i) {
                        const T* grow = g + i * n;
                        for (std::size_t kk = 0; kk < k; ++kk) {
                            const T* brow = bv + kk * n;
                            T acc{0};
                            for (std::size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
                            ga[i * k + kk] += acc;
                        }
                    }
                }
                if (b.requires_grad()) {
                    // dB[k,j] += sum_i A[i,k] * g[i,j]
                    T* gb = b.grad().data();
                    const T* av = a.value().data();
                    for (std::size_t i = 0; i < m; ++i) {
                        const T* grow = g + i * n;
                        const T* arow = av + i * k;
                        for (std::size_t kk = 0; kk < k; ++kk) {
                            const T aik = arow[kk];
                            if (aik == T{0}) continue;
                            T* gbrow = gb + kk * n;
                            for (std::size_t j = 0; j < n; ++j) gbrow[j] += aik * grow[j];
                        }
                    }
                }
            });
        }
        return out;
    }

    Tensor<T> transpose(const Tensor<T>& a) {
        if (a.rank() != 2) {
            throw std::invalid_argument("transpose: expects rank-2, got " + shape_str(a.shape()));
        }
        const std::size_t m = a.shape()[0], n = a.shape()[1];
        Tensor<T> out = Tensor<T>::zeros(Shape{n, m});
        const auto& av = a.value();
        auto& ov = out.value();
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) ov[j * m + i] = av[i * n + j];
        if (grad_enabled_ && (a.requires_grad())) {
            out.set_requires_grad(true);
            record([a, out, m, n]() {
                if (!out.has_grad()) return;
                const auto& g = out.grad();
                auto& ga = a.grad();
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += g[j * m + i];
            });
        }
        return out;
    }

    // --------------------------------------------------------- activations
    Tensor<T> relu(const Tensor<T>& x) {
        Tensor<T> out(x.shape(), x.value(), false);
        for (auto& v : out.value())
            if (v < T{0}) v = T{0};
        if (grad_enabled_ && (x.requires_grad())) {
            out.set_requires_grad(true);
            record([x, out]() {
                if (!out.has_grad()) return;
                const auto& g = out.grad();
                const auto& xv = x.value();
                auto& gx = x.grad();
                for (std::size_t i = 0; i < g.size(); ++i)
                    if (xv[i] > T{0}) gx[i] += g[i];
            });
        }
        return out;
    }

    /// Exact GELU, x * Phi(x).
    Tensor<T> gelu(const Tensor<T>& x) {
        constexpr double inv_sqrt2 = 0.70710678118654752440;
        constexpr double inv_sqrt2pi = 0.39894228040143267794;
        Tensor<T> out(x.shape(), x.value(), false);
        for (auto& v : out.value()) {
            const double xv = static_cast<double>(v);
            v = static_cast<T>(xv * 0.5 * (1.0 + std::erf(xv * inv_sqrt2)));
        }
        if (grad_enabled_ && (x.requires_grad())) {
            out.set_requires_grad(true);
            record([x, out]() {
                if (!out.has_grad()) return;
                const auto& g = out.grad();
                const auto& xv = x.value();
                auto& gx = x.grad();
                for (std::size_t i = 0; i < g.size(); ++i) {
                    const double v = static_cast<double>(xv[i]);
                    const double phi = 0.5 * (1.0 + std::erf(v * inv_sqrt2));
                    const double dens = inv_sqrt2pi * std::exp(-0.5 * v * v);
                    gx[i] += g[i] * static_cast<T>(phi + v * dens);
                }
            });
        }
        return out;
    }

    // ---------------------------------------------------------- layer norm
    /// Per-row normalization over the last axis (population variance + eps),
    /// then gamma * z + beta.
    Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                         T eps) {
        const std::size_t d = x.last_dim();
        if (d == 0) throw std::invalid_argument("layer_norm: empty normalization axis");
        if (gamma.numel() != d || beta.numel() != d) {
            throw std::invalid_argument("layer_norm: gamma/beta size must equal last dim " +
                                        std::to_string(d));
        }
        if (!(eps > T{0})) throw std::invalid_argument("layer_norm: epsilon must be positive");
        const std::size_t r = x.rows();
        Tensor<T> out = Tensor<T>::zeros(x.shape());
        auto z = std::make_shared<std::vector<T>>(x.numel());
        auto inv_std = std::make_shared<std::vector<T>>(r);
        const auto& xv = x.value();
        const auto& gv = gamma.value();
        const auto& bv = beta.value();
        auto& ov = out.value();
        for (std::size_t i = 0; i < r; ++i) {
            const T* xr = xv.data() + i * d;
            T mean{0};
            for (std::size_t j = 0; j < d; ++j) mean += xr[j];
            mean /= static_cast<T>(d);
            T var{0};
            for (std::size_t j = 0; j < d; ++j) {
                const T c = xr[j] - mean;
                var += c * c;
            }
            var /= static_cast<T>(d);
            const T inv = T{1} / std::sqrt(var + eps);
            (*inv_std)[i] = inv;
            T* zr = z->data() + i * d;
            T* orow = ov.data() + i * d;
            for (std::size_t j = 0; j < d; ++j) {
                zr[j] = (xr[j] - mean) * inv;
                orow[j] = gv[j] * zr[j] + bv[j];
            }
        }
        if (grad_enabled_ && (x.requires_grad() || gamma.requires_grad() || beta.requires_grad())) {
            out.set_requires_grad(true);
            record([x, gamma, beta, out, z, inv_std, r, d]() {
                if (!out.has_grad()) return;
                const auto& g = out.grad();
                const auto& gv2 = gamma.value();
                for (std::size_t i = 0; i < r; ++i) {
                    const T* grow = g.data() + i * d;
                    const T* zr = z->data() + i * d;
                    if (gamma.requires_grad()) {
                        auto& gg = gamma.grad();
                        for (std::size_t j = 0; j < d; ++j) gg[j] += grow[j] * zr[j];
                    }
                    if (beta.requires_grad()) {
                        auto& gb = beta.grad();
                        for (std::size_t j = 0; j < d; ++j) gb[j] += grow[j];
                    }
                    if (x.requires_grad()) {
                        T m1{0}, m2{0};
                        for (std::size_t j = 0; j < d; ++j) {
                            const T gz = grow[j] * gv2[j];
                            m1 += gz;
                            m2 += gz * zr[j];
                        }
                        m1 /= static_cast<T>(d);
                        m2 /= static_cast<T>(d);
                        auto& gx = x.grad();
                        T* gxr = gx.data() + i * d;
                        const T inv = (*inv_std)[i];
                        for (std::size_t j = 0; j < d; ++j) {
                            const T gz = grow[j] * gv2[j];
                            gxr[j] += inv * (gz - m1 - zr[j] * m2);
                        }
                    }
                }
            });
        }
        return out;
    }

    // ------------------------------------------------------------- softmax
    /// Numerically stabilized softmax along `axis` (negative counts from the
    /// back, so -1 is the last axis).
    Tensor<T> softmax(const Tensor<T>& x, int axis = -1) {
        const int rank = static_cast<int>(x.rank());
        int ax = axis < 0 ? rank + axis : axis;
        if (ax < 0 || ax >= rank) {
            throw std::invalid_argument("softmax: axis " + std::to_string(axis) +
                                        " invalid for shape " + shape_str(x.shape()));
        }
        const std::size_t n = x.shape()[static_cast<std::size_t>(ax)];
        std::size_t inner = 1;
        for (std::size_t i = static_cast<std::size_t>(ax) + 1; i < x.shape().size(); ++i)
            inner *= x.shape()[i];
        const std::size_t outer = x.numel() / (n * inner);
        Tensor<T> out(x.shape(), x.value(), false);
        auto& ov = out.value();
        for (std::size_t o = 0; o < outer; ++o) {
            for (std::size_t in = 0; in < inner; ++in) {
                T* base = ov.data() + o * n * inner + in;
                T mx = base[0];
                for (std::size_t i = 1; i < n; ++i) mx = std::max(mx, base[i * inner]);
                T sum{0};
                for (std::size_t i = 0; i < n; ++i) {
                    const T e = std::exp(base[i * inner] - mx);
                    base[i * inner] = e;
                    sum += e;
                }
                const T inv = T{1} / sum;
                for (std::size_t i = 0; i < n; ++i) base[i * inner] *= inv;
            }
        }
        if (grad_enabled_ && (x.requires_grad())) {
            out.set_requires_grad(true);
            record([x, out, n, inner, outer]() {
                if (!out.has_grad()) return;
                const auto& g = out.grad();
                const auto& yv = out.value();
                auto& gx = x.grad();
                for (std::size_t o = 0; o < outer; ++o) {
                    for (std::size_t in = 0; in < inner; ++in) {
                        const std::size_t off = o * n * inner + in;
                        T dot{0};
                        for (std::size_t i = 0; i < n; ++i)
                            dot += g[off + i * inner] * yv[off + i * inner];
                        for (std::size_t i = 0; i < n; ++i)
                            gx[off + i * inner] += yv[off + i * inner] * (g[off + i * inner] - dot);
                    }
                }
            });
        }
        return out;
    }

    // ----------------------------------------------------------- embedding
    /// Gathers rows of `table` [V x d] by token id.
    Tensor<T> embedding(const Tensor<T>& table, const std::vector<int>& ids) {
        if (table.rank() != 2) {
            throw std::invalid_argument("embedding: table must be rank-2, got " +
                                        shape_str(table.shape()));
        }
        const std::size_t v = table.shape()[0], d = table.shape()[1];
        if (ids.empty()) throw std::invalid_argument("embedding: empty id list");
        for (int id : ids) {
            if (id < 0 || static_cast<std::size_t>(id) >= v) {
                throw std::invalid_argument("embedding: id " + std::to_string(id) +
                                            " outside vocabulary of size " + std::to_string(v));
            }
        }
        Tensor<T> out = Tensor<T>::zeros(Shape{ids.size(), d});
        const auto& tv = table.value();
        auto& ov = out.value();
        for (std::size_t i = 0; i < ids.size(); ++i) {
            std::copy_n(tv.data() + static_cast<std::size_t>(ids[i]) * d, d, ov.data() + i * d);
        }
        if (grad_enabled_ && (table.requires_grad())) {
            out.set_requires_grad(true);
            record([table, out, ids, d]() {
                if (!out.has_grad()) return;
                const auto& g = out.grad();
                auto& gt = table.grad();
                for (std::size_t i = 0; i < ids.size(); ++i) {
                    T* trow = gt.data() + static_cast<std::size_t>(ids[i]) * d;
                    const T* grow = g.data() + i * d;
                    for (std::size_t j = 0; j < d; ++j) trow[j] += grow[j];
                }
            });
        }
        return out;
    }

    // ------------------------------------------------------ row operations
    Tensor<T> concat_rows(const Tensor<T>& a, const Tensor<T>& b) {
        if (a.last_dim() != b.last_dim()) {
            throw std::invalid_argument("concat_rows: column mismatch " + shape_str(a.shape()) +
                                        " vs " + shape_str(b.shape()));
        }
        const std::size_t d = a.last_dim();
        const std::size_t ra = a.rows(), rb = b.rows();
        Tensor<T> out = Tensor<T>::zeros(Shape{ra + rb, d});
        auto& ov = out.value();
        std::copy(a.value().begin(), a.value().end(), ov.begin());
        std::copy(b.value().begin(), b.value().end(), ov.begin() + static_cast<std::ptrdiff_t>(ra * d));
        if (grad_enabled_ && (a.requires_grad() || b.requires_grad())) {
            out.set_requires_grad(true);
            record([a, b, out, ra, rb, d]() {
                if (!out.has_grad()) return;
                const auto& g = out.grad();
                if (a.requires_grad()) {
                    auto& ga = a.grad();
                    for (std::size_t i = 0; i < ra * d; ++i) ga[i] += g[i];
                }
                if (b.requires_grad()) {
                    auto& gb = b.grad();
                    for (std::size_t i = 0; i < rb * d; ++i) gb[i] += g[ra * d + i];
                }
            });
        }
        return out;
    }

    /// Replaces rows [0, v.rows) of x with v; the replaced input rows get no
    /// gradient.
    Tensor<T> overwrite_rows(const Tensor<T>& x, const Tensor<T>& v) {
        if (x.last_dim() != v.last_dim()) {
            throw std::invalid_argument("overwrite_rows: column mismatch " + shape_str(x.shape()) +
                                        " vs " + shape_str(v.shape()));
        }
        const std::size_t p = v.rows(), d = v.last_dim();
        if (x.rows() <= p) {
            throw std::invalid_argument("overwrite_rows: input has " + std::to_string(x.rows()) +
                                        " rows, needs more than " + std::to_string(p));
        }
        Tensor<T> out(x.shape(), x.value(), false);
        std::copy(v.value().begin(), v.value().end(), out.value().begin());
        if (grad_enabled_ && (x.requires_grad() || v.requires_grad())) {
            out.set_requires_grad(true);
            record([x, v, out, p, d]() {
                if (!out.has_grad()) return;
                const auto& g = out.grad();
                if (v.requires_grad()) {
                    auto& gv = v.grad();
                    for (std::size_t i = 0; i < p * d; ++i) gv[i] += g[i];
                }
                if (x.requires_grad()) {
                    auto& gx = x.grad();
                    for (std::size_t i = p * d; i < g.size(); ++i) gx[i] += g[i];
                }
            });
        }
        return out;
    }

    Tensor<T> slice_rows(const Tensor<T>& x, std::size_t start, std::size_t count) {
        const std::size_t d = x.last_dim();
        if (start + count > x.rows()) {
            throw std::invalid_argument("slice_rows: [" + std::to_string(start) + "," +
                                        std::to_string(start + count) + ") exceeds " +
                                        shape_str(x.shape()));
        }
        Tensor<T> out = Tensor<T>::zeros(Shape{count, d});
        std::copy_n(x.value().data() + start * d, count * d, out.value().data());
        if (grad_enabled_ && (x.requires_grad())) {
            out.set_requires_grad(true);
            record([x, out, start, count, d]() {
                if (!out.has_grad()) return;
                const auto& g = out.grad();
                auto& gx = x.grad();
                for (std::size_t i = 0; i < count * d; ++i) gx[start * d + i] += g[i];
            });
        }
        return out;
    }

    Tensor<T> slice_cols(const Tensor<T>& x, std::size_t start, std::size_t count) {
        if (x.rank() != 2) {
            throw std::invalid_argument("slice_cols: expects rank-2, got " + shape_str(x.shape()));
        }
        const std::size_t r = x.shape()[0], c = x.shape()[1];
        if (start + count > c) {
            throw std::invalid_argument("slice_cols: [" + std::to_string(start) + "," +
                                        std::to_string(start + count) + ") exceeds " +
                                        shape_str(x.shape()));
        }
        Tensor<T> out = Tensor<T>::zeros(Shape{r, count});
        const auto& xv = x.value();
        auto& ov = out.value();
        for (std::size_t i = 0; i < r; ++i)
            std::copy_n(xv.data() + i * c + start, count, ov.data() + i * count);
        if (grad_enabled_ && (x.requires_grad())) {
            out.set_requires_grad(true);
            record([x, out, start, count, r, c]() {
                if (!out.has_grad()) return;
                const auto& g = out.grad();
                auto& gx = x.grad();
                for (std::size_t i = 0; i < r; ++i)
                    for (std::size_t j = 0; j < count; ++j)
                        gx[i * c + start + j] += g[i * count + j];
            });
        }
        return out;
    }

    Tensor<T> concat_cols(const std::vector<Tensor<T>>& parts) {
        if (parts.empty()) throw std::invalid_argument("concat_cols: no inputs");
        const std::size_t r = parts[0].shape()[0];
        std::size_t total = 0;
        bool rg = false;
        for (const auto& p : parts) {
            if (p.rank() != 2 || p.shape()[0] != r) {
                throw std::invalid_argument("concat_cols: row mismatch at " + shape_str(p.shape()));
            }
            total += p.shape()[1];
            rg = rg || p.requires_grad();
        }
        Tensor<T> out = Tensor<T>::zeros(Shape{r, total});
        auto& ov = out.value();
        std::size_t off = 0;
        for (const auto& p : parts) {
            const std::size_t c = p.shape()[1];
            for (std::size_t i = 0; i < r; ++i)
                std::copy_n(p.value().data() + i * c, c, ov.data() + i * total + off);
            off += c;
        }
        if (grad_enabled_ && (rg)) {
            out.set_requires_grad(true);
            record([parts, out, r, total]() {
                if (!out.has_grad()) return;
                const auto& g = out.grad();
                std::size_t off2 = 0;
                for (auto& p : parts) {
                    const std::size_t c = p.shape()[1];
                    if (p.requires_grad()) {
                        auto& gp = p.grad();
                        for (std::size_t i = 0; i < r; ++i)
                            for (std::size_t j = 0; j < c; ++j)
                                gp[i * c + j] += g[i * total + off2 + j];
                    }
                    off2 += c;
                }
            });
        }
        return out;
    }

    // -------------------------------------------------------------- linear
    /// x [R x I] times w [I x O] plus bias [O], one op.
    Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
        if (x.rank() != 2 || w.rank() != 2 || x.shape()[1] != w.shape()[0] || b.rank() != 1 ||
            b.numel() != w.shape()[1]) {
            throw std::invalid_argument("linear: shapes " + shape_str(x.shape()) + " * " +
                                        shape_str(w.shape()) + " + " + shape_str(b.shape()) +
                                        " do not compose");
        }
        const std::size_t r = x.shape()[0], in = x.shape()[1], out_dim = w.shape()[1];
        Tensor<T> out = Tensor<T>::zeros(Shape{r, out_dim});
        {
            auto& ov = out.value();
            const auto& bv = b.value();
            for (std::size_t i = 0; i < r; ++i) {
                std::copy(bv.begin(), bv.end(), ov.data() + i * out_dim);
            }
            matmul_accumulate(x.value().data(), w.value().data(), ov.data(), r, in, out_dim);
        }
        if (grad_enabled_ && (x.requires_grad() || w.requires_grad() || b.requires_grad())) {
            out.set_requires_grad(true);
            record([x, w, b, out, r, in, out_dim]() {
                if (!out.has_grad()) return;
                const T* g = out.grad().data();
                if (x.requires_grad()) {
                    // dx[i,c] += sum_o g[i,o] * w[c,o]
                    T* gx = x.grad().data();
                    const T* wv = w.value().data();
                    for (std::size_t i = 0; i < r; ++i) {
                        const T* grow = g + i * out_dim;
                        T* gxrow = gx + i * in;
                        for (std::size_t c = 0; c < in; ++c) {
                            const T* wrow = wv + c * out_dim;
                            T acc{0};
                            for (std::size_t o = 0; o < out_dim; ++o) acc += grow[o] * wrow[o];
                            gxrow[c] += acc;
                        }
                    }
                }
                if (w.requires_grad()) {
                    // dw[c,o] += sum_i x[i,c] * g[i,o]
                    T* gw = w.grad().data();
                    const T* xv = x.value().data();
                    for (std::size_t i = 0; i < r; ++i) {
                        const T* grow = g + i * out_dim;
                        const T* xrow = xv + i * in;
                        for (std::size_t c = 0; c < in; ++c) {
                            const T xic = xrow[c];
                            if (xic == T{0}) continue;
                            T* gwrow = gw + c * out_dim;
                            for (std::size_t o = 0; o < out_dim; ++o) gwrow[o] += xic * grow[o];
                        }
                    }
                }
                if (b.requires_grad()) {
                    T* gb = b.grad().data();
                    for (std::size_t i = 0; i < r; ++i) {
                        const T* grow = g + i * out_dim;
                        for (std::size_t o = 0; o < out_dim; ++o) gb[o] += grow[o];
                    }
                }
            });
        }
        return out;
    }

    // --------------------------------------------------- fused attention
    /// Scaled dot-product attention over all heads in one op. q is
    /// [Tq x d], k and v are [Tk x d], d divisible by n_heads; per head,
    /// softmax(q_h k_h^T / sqrt(dh) + mask) v_h, concatenated back to
    /// [Tq x d]. mask, when given, is an additive [Tq x Tk] constant.
    Tensor<T> attention_heads(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                              std::size_t n_heads, const Tensor<T>* mask = nullptr) {
        if (q.rank() != 2 || k.rank() != 2 || v.rank() != 2 || q.shape()[1] != k.shape()[1] ||
            k.shape() != v.shape()) {
            throw std::invalid_argument("attention: bad shapes q=" + shape_str(q.shape()) +
                                        " k=" + shape_str(k.shape()) + " v=" + shape_str(v.shape()));
        }
        const std::size_t tq = q.shape()[0], tk = k.shape()[0], d = q.shape()[1];
        if (n_heads == 0 || d % n_heads != 0) {
            throw std::invalid_argument("attention: width " + std::to_string(d) +
                                        " not divisible by " + std::to_string(n_heads) + " heads");
        }
        if (mask && mask->shape() != Shape{tq, tk}) {
            throw std::invalid_argument("attention: mask " + shape_str(mask->shape()) +
                                        " does not match [" + std::to_string(tq) + "x" +
                                        std::to_string(tk) + "]");
        }
        const std::size_t dh = d / n_heads;
        const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));

        auto attn = std::make_shared<std::vector<T>>(n_heads * tq * tk);
        Tensor<T> out = Tensor<T>::zeros(Shape{tq, d});
        const T* qv = q.value().data();
        const T* kv = k.value().data();
        const T* vv = v.value().data();
        const T* mv = mask ? mask->value().data() : nullptr;
        auto& ov = out.value();
        std::vector<T> row(tk);
        for (std::size_t h = 0; h < n_heads; ++h) {
            const std::size_t off = h * dh;
            T* attn_h = attn->data() + h * tq * tk;
            for (std::size_t i = 0; i < tq; ++i) {
                const T* qrow = qv + i * d + off;
                T mx = std::numeric_limits<T>::lowest();
                for (std::size_t j = 0; j < tk; ++j) {
                    const T* krow = kv + j * d + off;
                    T acc{0};
                    for (std::size_t c = 0; c < dh; ++c) acc += qrow[c] * krow[c];
                    acc *= scale;
                    if (mv) acc += mv[i * tk + j];
                    row[j] = acc;
                    mx = std::max(mx, acc);
                }
                T sum{0};
                for (std::size_t j = 0; j < tk; ++j) {
                    const T e = std::exp(row[j] - mx);
                    row[j] = e;
                    sum += e;
                }
                const T inv = T{1} / sum;
                T* arow = attn_h + i * tk;
                T* orow = ov.data() + i * d + off;
                for (std::size_t j = 0; j < tk; ++j) {
                    const T a = row[j] * inv;
                    arow[j] = a;
                    if (a != T{0}) {
                        const T* vrow = vv + j * d + off;
                        for (std::size_t c = 0; c < dh; ++c) orow[c] += a * vrow[c];
                    }
                }
            }
        }
        if (grad_enabled_ && (q.requires_grad() || k.requires_grad() || v.requires_grad())) {
            out.set_requires_grad(true);
            record([q, k, v, out, attn, n_heads, tq, tk, d, dh, scale]() {
                if (!out.has_grad()) return;
                const T* g = out.grad().data();
                const T* qv2 = q.value().data();
                const T* kv2 = k.value().data();
                const T* vv2 = v.value().data();
                std::vector<T> d_attn(tq * tk);
                for (std::size_t h = 0; h < n_heads; ++h) {
                    const std::size_t off = h * dh;
                    const T* attn_h = attn->data() + h * tq * tk;
                    // d_attn = g_h v_h^T
                    for (std::size_t i = 0; i < tq; ++i) {
                        const T* grow = g + i * d + off;
                        for (std::size_t j = 0; j < tk; ++j) {
                            const T* vrow = vv2 + j * d + off;
                            T acc{0};
                            for (std::size_t c = 0; c < dh; ++c) acc += grow[c] * vrow[c];
                            d_attn[i * tk + j] = acc;
                        }
                    }
                    if (v.requires_grad()) {
                        T* gv = v.grad().data();
                        for (std::size_t i = 0; i < tq; ++i) {
                            const T* grow = g + i * d + off;
                            const T* arow = attn_h + i * tk;
                            for (std::size_t j = 0; j < tk; ++j) {
                                const T a = arow[j];
                                if (a == T{0}) continue;
                                T* gvrow = gv + j * d + off;
                                for (std::size_t c = 0; c < dh; ++c) gvrow[c] += a * grow[c];
                            }
                        }
                    }
                    // softmax backward in place: ds = a * (d_attn - rowdot)
                    for (std::size_t i = 0; i < tq; ++i) {
                        const T* arow = attn_h + i * tk;
                        T* drow = d_attn.data() + i * tk;
                        T dot{0};
                        for (std::size_t j = 0; j < tk; ++j) dot += drow[j] * arow[j];
                        for (std::size_t j = 0; j < tk; ++j) drow[j] = arow[j] * (drow[j] - dot);
                    }
                    if (q.requires_grad()) {
                        T* gq = q.grad().data();
                        for (std::size_t i = 0; i < tq; ++i) {
                            const T* drow = d_attn.data() + i * tk;
                            T* gqrow = gq + i * d + off;
                            for (std::size_t j = 0; j < tk; ++j) {
                                const T s = drow[j] * scale;
                                if (s == T{0}) continue;
                                const T* krow = kv2 + j * d + off;
                                for (std::size_t c = 0; c < dh; ++c) gqrow[c] += s * krow[c];
                            }
                        }
                    }
                    if (k.requires_grad()) {
                        T* gk = k.grad().data();
                        for (std::size_t i = 0; i < tq; ++i) {
                            const T* drow = d_attn.data() + i * tk;
                            const T* qrow = qv2 + i * d + off;
                            for (std::size_t j = 0; j < tk; ++j) {
                                const T s = drow[j] * scale;
                                if (s == T{0}) continue;
                                T* gkrow = gk + j * d + off;
                                for (std::size_t c = 0; c < dh; ++c) gkrow[c] += s * qrow[c];
                            }
                        }
                    }
                }
            });
        }
        return out;
    }

    // ------------------------------------------------------------- dropout
    /// Inverted dropout; identity when rate == 0. Mask draws come from `rng`
    /// in element order, so a fixed seed fixes the masks.
    Tensor<T> dropout(const Tensor<T>& x, T rate, Rng& rng) {
        if (rate < T{0} || rate >= T{1}) {
            throw std::invalid_argument("dropout: rate must be in [0,1)");
        }
        if (rate == T{0}) return x;
        const T keep_scale = T{1} / (T{1} - rate);
        auto mask = std::make_shared<std::vector<T>>(x.numel());
        Tensor<T> out(x.shape(), x.value(), false);
        auto& ov = out.value();
        for (std::size_t i = 0; i < ov.size(); ++i) {
            const bool keep = rng.uniform() >= static_cast<double>(rate);
            (*mask)[i] = keep ? keep_scale : T{0};
            ov[i] *= (*mask)[i];
        }
        if (grad_enabled_ && (x.requires_grad())) {
            out.set_requires_grad(true);
            record([x, out, mask]() {
                if (!out.has_grad()) return;
                const auto& g = out.grad();
                auto& gx = x.grad();
                for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * (*mask)[i];
            });
        }
        return out;
    }

    // ----------------------------------------------------------------- sum
    Tensor<T> sum(const Tensor<T>& x) {
        T acc{0};
        for (const T v : x.value()) acc += v;
        Tensor<T> out = Tensor<T>::scalar(acc);
        if (grad_enabled_ && (x.requires_grad())) {
            out.set_requires_grad(true);
            record([x, out]() {
                if (!out.has_grad()) return;
                const T g = out.grad()[0];
                auto& gx = x.grad();
                for (auto& v : gx) v += g;
            });
        }
        return out;
    }

    Tensor<T> mean(const Tensor<T>& x) {
        return scale(sum(x), T{1} / static_cast<T>(x.numel()));
    }

    // ----------------------------------------------- label-smoothed CE loss
    /// Mean over non-pad positions of
    ///   (1 - smoothing) * NLL(target) + smoothing * mean_v NLL(v).
    /// Pad positions contribute neither loss nor gradient.
    Tensor<T> cross_entropy_label_smoothed(const Tensor<T>& logits, const std::vector<int>& targets,
                                           T smoothing, int pad_id) {
        if (logits.rank() != 2) {
            throw std::invalid_argument("cross_entropy: logits must be rank-2, got " +
                                        shape_str(logits.shape()));
        }
        const std::size_t t = logits.shape()[0], v = logits.shape()[1];
        if (targets.size() != t) {
            throw std::invalid_argument("cross_entropy: " + std::to_string(targets.size()) +
                                        " targets for " + std::to_string(t) + " logit rows");
        }
        if (smoothing < T{0} || smoothing >= T{1}) {
            throw std::invalid_argument("cross_entropy: smoothing must be in [0,1)");
        }
        std::size_t live = 0;
        for (int id : targets) {
            if (id == pad_id) continue;
            if (id < 0 || static_cast<std::size_t>(id) >= v) {
                throw std::invalid_argument("cross_entropy: target " + std::to_string(id) +
                                            " outside vocabulary of size " + std::to_string(v));
            }
            ++live;
        }
        if (live == 0) {
            throw std::invalid_argument("cross_entropy: all positions are padding; no loss positions");
        }
        const auto& lv = logits.value();
        T loss{0};
        for (std::size_t i = 0; i < t; ++i) {
            if (targets[i] == pad_id) continue;
            const T* row = lv.data() + i * v;
            T mx = row[0];
            for (std::size_t j = 1; j < v; ++j) mx = std::max(mx, row[j]);
            T sum{0}, rowmean{0};
            for (std::size_t j = 0; j < v; ++j) {
                sum += std::exp(row[j] - mx);
                rowmean += row[j];
            }
            rowmean /= static_cast<T>(v);
            const T lse = mx + std::log(sum);
            const T nll_target = lse - row[static_cast<std::size_t>(targets[i])];
            const T nll_mean = lse - rowmean;
            loss += (T{1} - smoothing) * nll_target + smoothing * nll_mean;
        }
        loss /= static_cast<T>(live);
        Tensor<T> out = Tensor<T>::scalar(loss);
        if (grad_enabled_ && (logits.requires_grad())) {
            out.set_requires_grad(true);
            const std::size_t live_n = live;
            record([logits, out, targets, smoothing, pad_id, t, v, live_n]() {
                if (!out.has_grad()) return;
                const T g0 = out.grad()[0];
                const auto& lv2 = logits.value();
                auto& gl = logits.grad();
                const T inv_live = T{1} / static_cast<T>(live_n);
                for (std::size_t i = 0; i < t; ++i) {
                    if (targets[i] == pad_id) continue;
                    const T* row = lv2.data() + i * v;
                    T mx = row[0];
                    for (std::size_t j = 1; j < v; ++j) mx = std::max(mx, row[j]);
                    T sum{0};
                    for (std::size_t j = 0; j < v; ++j) sum += std::exp(row[j] - mx);
                    T* grow = gl.data() + i * v;
                    const T uni = smoothing / static_cast<T>(v);
                    for (std::size_t j = 0; j < v; ++j) {
                        const T p = std::exp(row[j] - mx) / sum;
                        T q = uni;
                        if (j == static_cast<std::size_t>(targets[i])) q += T{1} - smoothing;
                        grow[j] += g0 * (p - q) * inv_live;
                    }
                }
            });
        }
        return out;
    }

    // ------------------------------------------------------------ backward
    void backward(const Tensor<T>& loss) {
        if (!grad_enabled_) {
            throw std::logic_error("tape: backward on a forward-only tape");
        }
        if (consumed_) {
            throw std::logic_error("tape: backward already ran; run a new forward pass first");
        }
        if (!loss.is_scalar()) {
            throw std::invalid_argument("tape: backward requires a scalar, got " +
                                        shape_str(loss.shape()));
        }
        consumed_ = true;
        Tensor<T> l = loss;
        l.ensure_grad();
        l.grad()[0] += T{1};
        for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) (*it)();
    }

private:
    void record(std::function<void()> fn) { ops_.push_back(std::move(fn)); }

    static void matmul_accumulate(const T* a, const T* b, T* c, std::size_t m, std::size_t k,
                                  std::size_t n) {
        for (std::size_t i = 0; i < m; ++i) {
            T* crow = c + i * n;
            const T* arow = a + i * k;
            for (std::size_t kk = 0; kk < k; ++kk) {
                const T aik = arow[kk];
                if (aik == T{0}) continue;
                const T* brow = b + kk * n;
                for (std::size_t j = 0; j < n; ++j) crow[j] += aik * brow[j];
            }
        }
    }

    std::vector<std::function<void()>> ops_;
    bool grad_enabled_ = true;
    bool consumed_ = false;
};

// ------------------------------------------------------------- grad check
/// Max over coordinates of |analytic - central difference| normalized by
/// max(|analytic|, |central|, 1e-8). Meant to run in double precision.
inline double grad_check(const std::function<Tensor<double>(Tape<double>&, Tensor<double>&)>& f,
                         Tensor<double> x, double step) {
    x.set_requires_grad(true);
    x.zero_grad();
    std::vector<double> analytic;
    {
        Tape<double> tape;
        Tensor<double> y = f(tape, x);
        if (!y.is_scalar()) {
            throw std::invalid_argument("grad_check: function must be scalar-valued, got " +
                                        shape_str(y.shape()));
        }
        tape.backward(y);
        analytic = x.grad();
    }
    auto eval = [&](void) {
        Tape<double> tape;
        Tensor<double> y = f(tape, x);
        return y.value()[0];
    };
    double worst = 0.0;
    for (std::size_t i = 0; i < x.numel(); ++i) {
        const double keep = x.value()[i];
        x.value()[i] = keep + step;
        const double up = eval();
        x.value()[i] = keep - step;
        const double down = eval();
        x.value()[i] = keep;
        const double central = (up - down) / (2.0 * step);
        const double denom = std::max({std::abs(analytic[i]), std::abs(central), 1e-8});
        worst = std::max(worst, std::abs(analytic[i] - central) / denom);
    }
    return worst;
}

}  // namespace peftlab
