// SPDX-License-Identifier: Apache-2.0
//
// Dense row-major tensors with reverse-mode automatic differentiation.
//
// Ops record backward closures onto the thread-local active Tape. A Tape is
// created per forward pass and consumed by backward(); leaf gradients persist
// on the tensors until cleared. With no active tape every op is a plain
// forward computation.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "tinykd/common.hpp"

namespace tinykd {

// Boolean companion tensor (attention masks, loss masks). Not differentiable.
struct BoolTensor {
    Shape shape;
    std::vector<std::uint8_t> data;

    BoolTensor() = default;
    BoolTensor(Shape s, std::vector<std::uint8_t> d) : shape(std::move(s)), data(std::move(d)) {
        if (numel(shape) != data.size())
            throw std::invalid_argument("BoolTensor: shape " + shape_str(shape) + " does not match " +
                                        std::to_string(data.size()) + " values");
    }
    static BoolTensor full(Shape s, bool v) {
        std::vector<std::uint8_t> d(numel(s), v ? 1 : 0);
        return BoolTensor(std::move(s), std::move(d));
    }
    std::size_t size() const { return data.size(); }
};

// Integer companion tensor (token ids).
struct IntTensor {
    Shape shape;
    std::vector<std::int32_t> data;

    IntTensor() = default;
    IntTensor(Shape s, std::vector<std::int32_t> d) : shape(std::move(s)), data(std::move(d)) {
        if (numel(shape) != data.size())
            throw std::invalid_argument("IntTensor: shape " + shape_str(shape) + " does not match " +
                                        std::to_string(data.size()) + " values");
    }
    std::size_t size() const { return data.size(); }
};

namespace detail {

template <class S>
struct TensorNode {
    Shape shape;
    std::vector<S> value;
    std::vector<S> grad;  // empty until first accumulation
    bool requires_grad = false;

    void ensure_grad() {
        if (grad.empty()) grad.assign(value.size(), S(0));
    }
};

} // namespace detail

template <class S>
class TensorT {
public:
    TensorT() : node_(std::make_shared<detail::TensorNode<S>>()) {}

    TensorT(Shape shape, std::vector<S> data, bool requires_grad = false)
        : node_(std::make_shared<detail::TensorNode<S>>()) {
        if (numel(shape) != data.size())
            throw std::invalid_argument("tensor shape " + shape_str(shape) + " does not match " +
                                        std::to_string(data.size()) + " values");
        for (auto d : shape)
            if (d == 0) throw std::invalid_argument("tensor dimensions must be positive: " + shape_str(shape));
        node_->shape = std::move(shape);
        node_->value = std::move(data);
        node_->requires_grad = requires_grad;
    }

    static TensorT zeros(Shape shape, bool requires_grad = false) {
        std::vector<S> d(numel(shape), S(0));
        return TensorT(std::move(shape), std::move(d), requires_grad);
    }

    static TensorT full(Shape shape, S v, bool requires_grad = false) {
        std::vector<S> d(numel(shape), v);
        return TensorT(std::move(shape), std::move(d), requires_grad);
    }

    static TensorT scalar(S v) { return TensorT({1}, {v}); }

    static TensorT randn(Shape shape, Rng& rng, S stddev, bool requires_grad = false) {
        std::vector<S> d(numel(shape));
        for (auto& x : d) x = static_cast<S>(rng.normal(0.0, static_cast<double>(stddev)));
        return TensorT(std::move(shape), std::move(d), requires_grad);
    }

    const Shape& shape() const { return node_->shape; }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t size() const { return node_->value.size(); }

    const std::vector<S>& value() const { return node_->value; }
    std::vector<S>& mutable_value() { return node_->value; }

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool rg) { node_->requires_grad = rg; }

    bool has_grad() const { return !node_->grad.empty(); }
    const std::vector<S>& grad() const {
        if (node_->grad.empty())
            throw std::runtime_error("tensor has no gradient populated");
        return node_->grad;
    }
    std::vector<S>& mutable_grad() {
        node_->ensure_grad();
        return node_->grad;
    }
    void zero_grad() { node_->grad.clear(); }

    S item() const {
        if (size() != 1)
            throw std::invalid_argument("item() on non-scalar tensor of shape " + shape_str(shape()));
        return node_->value[0];
    }

    const std::shared_ptr<detail::TensorNode<S>>& node() const { return node_; }

private:
    std::shared_ptr<detail::TensorNode<S>> node_;
};

using Tensor = TensorT<double>;
using TensorF = TensorT<float>;

// Per-forward-pass record of differentiable ops, in creation order. Reverse
// traversal is a valid topological order of the graph; backward() walks it
// once and clears the record.
template <class S>
class TapeT {
public:
    TapeT() { stack().push_back(this); }
    ~TapeT() {
        if (!stack().empty() && stack().back() == this) stack().pop_back();
    }
    TapeT(const TapeT&) = delete;
    TapeT& operator=(const TapeT&) = delete;

    static TapeT* active() { return stack().empty() ? nullptr : stack().back(); }

    void record(std::function<void()> bwd) { ops_.push_back(std::move(bwd)); }
    std::size_t num_ops() const { return ops_.size(); }

    void run_backward_and_clear() {
        for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) (*it)();
        ops_.clear();
    }

private:
    static std::vector<TapeT*>& stack() {
        thread_local std::vector<TapeT*> s;
        return s;
    }
    std::vector<std::function<void()>> ops_;
};

using Tape = TapeT<double>;

namespace detail {

template <class S>
inline bool want_grad(std::initializer_list<const TensorT<S>*> inputs) {
    if (TapeT<S>::active() == nullptr) return false;
    for (const auto* t : inputs)
        if (t->requires_grad()) return true;
    return false;
}

template <class S, class F>
inline void record(TensorT<S>& out, F&& bwd) {
    out.set_requires_grad(true);
    TapeT<S>::active()->record(std::forward<F>(bwd));
}

// C[m x n] += A[m x k] * B[k x n]
template <class S>
inline void mm_acc(const S* a, const S* b, S* c, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const S* arow = a + i * k;
        S* crow = c + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const S av = arow[p];
            const S* brow = b + p * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// C[m x k] += G[m x n] * B^T where B is [k x n]   (dA = dC * B^T)
template <class S>
inline void mm_acc_nt(const S* g, const S* b, S* c, std::size_t m, std::size_t n, std::size_t k) {
    for (std::size_t i = 0; i < m; ++i) {
        const S* grow = g + i * n;
        S* crow = c + i * k;
        for (std::size_t p = 0; p < k; ++p) {
            const S* brow = b + p * n;
            S acc = S(0);
            for (std::size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
            crow[p] += acc;
        }
    }
}

// C[k x n] += A^T * G where A is [m x k], G is [m x n]   (dB = A^T * dC)
template <class S>
inline void mm_acc_tn(const S* a, const S* g, S* c, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const S* arow = a + i * k;
        const S* grow = g + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const S av = arow[p];
            S* crow = c + p * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * grow[j];
        }
    }
}

inline void check_same_shape(const Shape& a, const Shape& b, const char* op) {
    if (a != b)
        throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
}

// Strides of `mask` right-aligned against `target`; 0 where the mask
// broadcasts. Throws if the shapes are not broadcast-compatible.
inline std::vector<std::size_t> broadcast_strides(const Shape& target, const Shape& mask) {
    if (mask.size() > target.size())
        throw std::invalid_argument("mask rank " + shape_str(mask) + " exceeds tensor rank " + shape_str(target));
    std::vector<std::size_t> mstrides(mask.size());
    std::size_t s = 1;
    for (std::size_t i = mask.size(); i-- > 0;) {
        mstrides[i] = s;
        s *= mask[i];
    }
    std::vector<std::size_t> out(target.size(), 0);
    const std::size_t off = target.size() - mask.size();
    for (std::size_t i = 0; i < mask.size(); ++i) {
        if (mask[i] == target[off + i]) out[off + i] = mstrides[i];
        else if (mask[i] == 1) out[off + i] = 0;
        else
            throw std::invalid_argument("mask shape " + shape_str(mask) + " not broadcastable to " +
                                        shape_str(target));
    }
    return out;
}

} // namespace detail

// ---------------------------------------------------------------------------
// elementwise ops
// ---------------------------------------------------------------------------

template <class S>
TensorT<S> add(const TensorT<S>& a, const TensorT<S>& b) {
    detail::check_same_shape(a.shape(), b.shape(), "add");
    std::vector<S> v(a.size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.value()[i] + b.value()[i];
    TensorT<S> out(a.shape(), std::move(v));
    if (detail::want_grad<S>({&a, &b})) {
        detail::record(out, [pa = a.node(), pb = b.node(), po = out.node()] {
            if (po->grad.empty()) return;
            if (pa->requires_grad) {
                pa->ensure_grad();
                for (std::size_t i = 0; i < po->grad.size(); ++i) pa->grad[i] += po->grad[i];
            }
            if (pb->requires_grad) {
                pb->ensure_grad();
                for (std::size_t i = 0; i < po->grad.size(); ++i) pb->grad[i] += po->grad[i];
            }
        });
    }
    return out;
}

template <class S>
TensorT<S> sub(const TensorT<S>& a, const TensorT<S>& b) {
    detail::check_same_shape(a.shape(), b.shape(), "sub");
    std::vector<S> v(a.size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.value()[i] - b.value()[i];
    TensorT<S> out(a.shape(), std::move(v));
    if (detail::want_grad<S>({&a, &b})) {
        detail::record(out, [pa = a.node(), pb = b.node(), po = out.node()] {
            if (po->grad.empty()) return;
            if (pa->requires_grad) {
                pa->ensure_grad();
                for (std::size_t i = 0; i < po->grad.size(); ++i) pa->grad[i] += po->grad[i];
            }
            if (pb->requires_grad) {
                pb->ensure_grad();
                for (std::size_t i = 0; i < po->grad.size(); ++i) pb->grad[i] -= po->grad[i];
            }
        });
    }
    return out;
}

template <class S>
TensorT<S> mul(const TensorT<S>& a, const TensorT<S>& b) {
    detail::check_same_shape(a.shape(), b.shape(), "mul");
    std::vector<S> v(a.size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.value()[i] * b.value()[i];
    TensorT<S> out(a.shape(), std::move(v));
    if (detail::want_grad<S>({&a, &b})) {
        detail::record(out, [pa = a.node(), pb = b.node(), po = out.node()] {
            if (po->grad.empty()) return;
            if (pa->requires_grad) {
                pa->ensure_grad();
                for (std::size_t i = 0; i < po->grad.size(); ++i) pa->grad[i] += po->grad[i] * pb->value[i];
            }
            if (pb->requires_grad) {
                pb->ensure_grad();
                for (std::size_t i = 0; i < po->grad.size(); ++i) pb->grad[i] += po->grad[i] * pa->value[i];
            }
        });
    }
    return out;
}

template <class S>
TensorT<S> scale(const TensorT<S>& a, S c) {
    std::vector<S> v(a.size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.value()[i] * c;
    TensorT<S> out(a.shape(), std::move(v));
    if (detail::want_grad<S>({&a})) {
        detail::record(out, [pa = a.node(), po = out.node(), c] {
            if (po->grad.empty()) return;
            if (pa->requires_grad) {
                pa->ensure_grad();
                for (std::size_t i = 0; i < po->grad.size(); ++i) pa->grad[i] += po->grad[i] * c;
            }
        });
    }
    return out;
}

// a[..., d] + bias[d]
template <class S>
TensorT<S> add_bias(const TensorT<S>& a, const TensorT<S>& bias) {
    if (bias.rank() != 1 || a.rank() < 1 || a.shape().back() != bias.shape()[0])
        throw std::invalid_argument("add_bias: bias " + shape_str(bias.shape()) + " does not match last dim of " +
                                    shape_str(a.shape()));
    const std::size_t d = bias.size();
    const std::size_t rows = a.size() / d;
    std::vector<S> v(a.size());
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < d; ++j) v[r * d + j] = a.value()[r * d + j] + bias.value()[j];
    TensorT<S> out(a.shape(), std::move(v));
    if (detail::want_grad<S>({&a, &bias})) {
        detail::record(out, [pa = a.node(), pb = bias.node(), po = out.node(), rows, d] {
            if (po->grad.empty()) return;
            if (pa->requires_grad) {
                pa->ensure_grad();
                for (std::size_t i = 0; i < po->grad.size(); ++i) pa->grad[i] += po->grad[i];
            }
            if (pb->requires_grad) {
                pb->ensure_grad();
                for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t j = 0; j < d; ++j) pb->grad[j] += po->grad[r * d + j];
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// matrix products
// ---------------------------------------------------------------------------

// a[..., m, k] * b[k, n] (shared weight), or batched a[B.., m, k] * b[B.., k, n].
template <class S>
TensorT<S> matmul(const TensorT<S>& a, const TensorT<S>& b) {
    if (a.rank() < 2 || b.rank() < 2)
        throw std::invalid_argument("matmul: operands must have rank >= 2, got " + shape_str(a.shape()) + " and " +
                                    shape_str(b.shape()));
    const Shape& as = a.shape();
    const Shape& bs = b.shape();
    if (b.rank() == 2) {
        const std::size_t k = as.back();
        if (k != bs[0])
            throw std::invalid_argument("matmul: inner dimensions differ, " + shape_str(as) + " vs " + shape_str(bs));
        const std::size_t n = bs[1];
        const std::size_t m = a.size() / k;
        Shape os(as.begin(), as.end() - 1);
        os.push_back(n);
        std::vector<S> v(m * n, S(0));
        detail::mm_acc(a.value().data(), b.value().data(), v.data(), m, k, n);
        TensorT<S> out(std::move(os), std::move(v));
        if (detail::want_grad<S>({&a, &b})) {
            detail::record(out, [pa = a.node(), pb = b.node(), po = out.node(), m, k, n] {
                if (po->grad.empty()) return;
                if (pa->requires_grad) {
                    pa->ensure_grad();
                    detail::mm_acc_nt(po->grad.data(), pb->value.data(), pa->grad.data(), m, n, k);
                }
                if (pb->requires_grad) {
                    pb->ensure_grad();
                    detail::mm_acc_tn(pa->value.data(), po->grad.data(), pb->grad.data(), m, k, n);
                }
            });
        }
        return out;
    }
    if (a.rank() != b.rank())
        throw std::invalid_argument("matmul: rank mismatch " + shape_str(as) + " vs " + shape_str(bs));
    if (!std::equal(as.begin(), as.end() - 2, bs.begin()))
        throw std::invalid_argument("matmul: batch dimensions differ, " + shape_str(as) + " vs " + shape_str(bs));
    const std::size_t m = as[as.size() - 2];
    const std::size_t k = as.back();
    if (k != bs[bs.size() - 2])
        throw std::invalid_argument("matmul: inner dimensions differ, " + shape_str(as) + " vs " + shape_str(bs));
    const std::size_t n = bs.back();
    const std::size_t batches = a.size() / (m * k);
    Shape os(as.begin(), as.end() - 1);
    os.back() = m;
    os.push_back(n);
    std::vector<S> v(batches * m * n, S(0));
    for (std::size_t t = 0; t < batches; ++t)
        detail::mm_acc(a.value().data() + t * m * k, b.value().data() + t * k * n, v.data() + t * m * n, m, k, n);
    TensorT<S> out(std::move(os), std::move(v));
    if (detail::want_grad<S>({&a, &b})) {
        detail::record(out, [pa = a.node(), pb = b.node(), po = out.node(), batches, m, k, n] {
            if (po->grad.empty()) return;
            if (pa->requires_grad) pa->ensure_grad();
            if (pb->requires_grad) pb->ensure_grad();
            for (std::size_t t = 0; t < batches; ++t) {
                const S* g = po->grad.data() + t * m * n;
                if (pa->requires_grad)
                    detail::mm_acc_nt(g, pb->value.data() + t * k * n, pa->grad.data() + t * m * k, m, n, k);
                if (pb->requires_grad)
                    detail::mm_acc_tn(pa->value.data() + t * m * k, g, pb->grad.data() + t * k * n, m, k, n);
            }
        });
    }
    return out;
}

// a[..., m, k] * b[..., n, k]^T -> [..., m, n]; avoids materializing the
// transpose in the attention score computation.
template <class S>
TensorT<S> matmul_nt(const TensorT<S>& a, const TensorT<S>& b) {
    const Shape& as = a.shape();
    const Shape& bs = b.shape();
    if (a.rank() < 2 || a.rank() != b.rank())
        throw std::invalid_argument("matmul_nt: rank mismatch " + shape_str(as) + " vs " + shape_str(bs));
    if (!std::equal(as.begin(), as.end() - 2, bs.begin()))
        throw std::invalid_argument("matmul_nt: batch dimensions differ, " + shape_str(as) + " vs " + shape_str(bs));
    const std::size_t k = as.back();
    if (k != bs.back())
        throw std::invalid_argument("matmul_nt: inner dimensions differ, " + shape_str(as) + " vs " + shape_str(bs));
    const std::size_t m = as[as.size() - 2];
    const std::size_t n = bs[bs.size() - 2];
    const std::size_t batches = a.size() / (m * k);
    Shape os(as.begin(), as.end() - 1);
    os.push_back(n);
    std::vector<S> v(batches * m * n, S(0));
    for (std::size_t t = 0; t < batches; ++t)
        detail::mm_acc_nt(a.value().data() + t * m * k, b.value().data() + t * n * k, v.data() + t * m * n, m, k, n);
    TensorT<S> out(std::move(os), std::move(v));
    if (detail::want_grad<S>({&a, &b})) {
        detail::record(out, [pa = a.node(), pb = b.node(), po = out.node(), batches, m, k, n] {
            if (po->grad.empty()) return;
            if (pa->requires_grad) pa->ensure_grad();
            if (pb->requires_grad) pb->ensure_grad();
            for (std::size_t t = 0; t < batches; ++t) {
                const S* g = po->grad.data() + t * m * n;
                // C = A * B^T: dA = dC * B, dB = dC^T * A
                if (pa->requires_grad)
                    detail::mm_acc(g, pb->value.data() + t * n * k, pa->grad.data() + t * m * k, m, n, k);
                if (pb->requires_grad)
                    detail::mm_acc_tn(g, pa->value.data() + t * m * k, pb->grad.data() + t * n * k, m, n, k);
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// shape ops
// ---------------------------------------------------------------------------

template <class S>
TensorT<S> reshape(const TensorT<S>& a, Shape shape) {
    if (numel(shape) != a.size())
        throw std::invalid_argument("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
    TensorT<S> out(std::move(shape), a.value());
    if (detail::want_grad<S>({&a})) {
        detail::record(out, [pa = a.node(), po = out.node()] {
            if (po->grad.empty()) return;
            if (pa->requires_grad) {
                pa->ensure_grad();
                for (std::size_t i = 0; i < po->grad.size(); ++i) pa->grad[i] += po->grad[i];
            }
        });
    }
    return out;
}

// [b, l, d] -> [b, h, l, d/h]
template <class S>
TensorT<S> split_heads(const TensorT<S>& x, std::size_t heads) {
    if (x.rank() != 3)
        throw std::invalid_argument("split_heads: expected rank-3 input, got " + shape_str(x.shape()));
    const std::size_t b = x.shape()[0], l = x.shape()[1], d = x.shape()[2];
    if (heads == 0 || d % heads != 0)
        throw std::invalid_argument("split_heads: hidden " + std::to_string(d) + " not divisible by heads " +
                                    std::to_string(heads));
    const std::size_t hd = d / heads;
    std::vector<S> v(x.size());
    for (std::size_t bi = 0; bi < b; ++bi)
        for (std::size_t li = 0; li < l; ++li)
            for (std::size_t hi = 0; hi < heads; ++hi)
                for (std::size_t di = 0; di < hd; ++di)
                    v[((bi * heads + hi) * l + li) * hd + di] = x.value()[(bi * l + li) * d + hi * hd + di];
    TensorT<S> out({b, heads, l, hd}, std::move(v));
    if (detail::want_grad<S>({&x})) {
        detail::record(out, [px = x.node(), po = out.node(), b, l, d, heads, hd] {
            if (po->grad.empty()) return;
            if (!px->requires_grad) return;
            px->ensure_grad();
            for (std::size_t bi = 0; bi < b; ++bi)
                for (std::size_t li = 0; li < l; ++li)
                    for (std::size_t hi = 0; hi < heads; ++hi)
                        for (std::size_t di = 0; di < hd; ++di)
                            px->grad[(bi * l + li) * d + hi * hd + di] +=
                                po->grad[((bi * heads + hi) * l + li) * hd + di];
        });
    }
    return out;
}

// [b, h, l, hd] -> [b, l, h*hd]
template <class S>
TensorT<S> merge_heads(const TensorT<S>& x) {
    if (x.rank() != 4)
        throw std::invalid_argument("merge_heads: expected rank-4 input, got " + shape_str(x.shape()));
    const std::size_t b = x.shape()[0], heads = x.shape()[1], l = x.shape()[2], hd = x.shape()[3];
    const std::size_t d = heads * hd;
    std::vector<S> v(x.size());
    for (std::size_t bi = 0; bi < b; ++bi)
        for (std::size_t hi = 0; hi < heads; ++hi)
            for (std::size_t li = 0; li < l; ++li)
                for (std::size_t di = 0; di < hd; ++di)
                    v[(bi * l + li) * d + hi * hd + di] = x.value()[((bi * heads + hi) * l + li) * hd + di];
    TensorT<S> out({b, l, d}, std::move(v));
    if (detail::want_grad<S>({&x})) {
        detail::record(out, [px = x.node(), po = out.node(), b, l, d, heads, hd] {
            if (po->grad.empty()) return;
            if (!px->requires_grad) return;
            px->ensure_grad();
            for (std::size_t bi = 0; bi < b; ++bi)
                for (std::size_t hi = 0; hi < heads; ++hi)
                    for (std::size_t li = 0; li < l; ++li)
                        for (std::size_t di = 0; di < hd; ++di)
                            px->grad[((bi * heads + hi) * l + li) * hd + di] +=
                                po->grad[(bi * l + li) * d + hi * hd + di];
        });
    }
    return out;
}

// Gather rows of table[v, d] by id; output shape = ids.shape + [d].
template <class S>
TensorT<S> embedding_rows(const TensorT<S>& table, const IntTensor& ids) {
    if (table.rank() != 2)
        throw std::invalid_argument("embedding_rows: table must be rank 2, got " + shape_str(table.shape()));
    const std::size_t v = table.shape()[0], d = table.shape()[1];
    for (auto id : ids.data)
        if (id < 0 || static_cast<std::size_t>(id) >= v)
            throw std::out_of_range("embedding_rows: id " + std::to_string(id) + " outside table of " +
                                    std::to_string(v) + " rows");
    Shape os = ids.shape;
    os.push_back(d);
    std::vector<S> out_v(ids.size() * d);
    for (std::size_t r = 0; r < ids.size(); ++r) {
        const S* src = table.value().data() + static_cast<std::size_t>(ids.data[r]) * d;
        std::copy(src, src + d, out_v.data() + r * d);
    }
    TensorT<S> out(std::move(os), std::move(out_v));
    if (detail::want_grad<S>({&table})) {
        detail::record(out, [pt = table.node(), po = out.node(), idv = ids.data, d] {
            if (po->grad.empty()) return;
            if (!pt->requires_grad) return;
            pt->ensure_grad();
            for (std::size_t r = 0; r < idv.size(); ++r) {
                S* dst = pt->grad.data() + static_cast<std::size_t>(idv[r]) * d;
                const S* g = po->grad.data() + r * d;
                for (std::size_t j = 0; j < d; ++j) dst[j] += g[j];
            }
        });
    }
    return out;
}

// Select index `idx` along the last dimension, dropping it.
template <class S>
TensorT<S> slice_lastdim(const TensorT<S>& x, std::size_t idx) {
    if (x.rank() < 2 || idx >= x.shape().back())
        throw std::invalid_argument("slice_lastdim: index " + std::to_string(idx) + " invalid for " +
                                    shape_str(x.shape()));
    const std::size_t last = x.shape().back();
    const std::size_t rows = x.size() / last;
    Shape os(x.shape().begin(), x.shape().end() - 1);
    std::vector<S> v(rows);
    for (std::size_t r = 0; r < rows; ++r) v[r] = x.value()[r * last + idx];
    TensorT<S> out(std::move(os), std::move(v));
    if (detail::want_grad<S>({&x})) {
        detail::record(out, [px = x.node(), po = out.node(), rows, last, idx] {
            if (po->grad.empty()) return;
            if (!px->requires_grad) return;
            px->ensure_grad();
            for (std::size_t r = 0; r < rows; ++r) px->grad[r * last + idx] += po->grad[r];
        });
    }
    return out;
}

// Keep unmasked entries, set masked entries to `fill`. Gradient flows only
// through kept positions.
template <class S>
TensorT<S> masked_fill(const TensorT<S>& x, const BoolTensor& keep, S fill) {
    if (keep.shape != x.shape())
        throw std::invalid_argument("masked_fill: mask shape " + shape_str(keep.shape) + " must equal " +
                                    shape_str(x.shape()));
    std::vector<S> v(x.size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = keep.data[i] ? x.value()[i] : fill;
    TensorT<S> out(x.shape(), std::move(v));
    if (detail::want_grad<S>({&x})) {
        detail::record(out, [px = x.node(), po = out.node(), keep_data = keep.data] {
            if (po->grad.empty()) return;
            if (!px->requires_grad) return;
            px->ensure_grad();
            for (std::size_t i = 0; i < po->grad.size(); ++i)
                if (keep_data[i]) px->grad[i] += po->grad[i];
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// nonlinearities and normalization
// ---------------------------------------------------------------------------

// Exact GELU, x * Phi(x) with the error function (no tanh approximation).
template <class S>
TensorT<S> gelu(const TensorT<S>& x) {
    std::vector<S> v(x.size());
    for (std::size_t i = 0; i < v.size(); ++i) {
        const S xi = x.value()[i];
        const S phi = S(0.5) * (S(1) + std::erf(xi * S(0.7071067811865476)));
        v[i] = xi * phi;
    }
    TensorT<S> out(x.shape(), std::move(v));
    if (detail::want_grad<S>({&x})) {
        detail::record(out, [px = x.node(), po = out.node()] {
            if (po->grad.empty()) return;
            if (!px->requires_grad) return;
            px->ensure_grad();
            for (std::size_t i = 0; i < po->grad.size(); ++i) {
                const S xi = px->value[i];
                const S phi = S(0.5) * (S(1) + std::erf(xi * S(0.7071067811865476)));
                const S dens = S(0.3989422804014327) * std::exp(S(-0.5) * xi * xi);
                px->grad[i] += po->grad[i] * (phi + xi * dens);
            }
        });
    }
    return out;
}

// Normalize along the last dimension to mean 0 / variance 1, then gamma*x+beta.
template <class S>
TensorT<S> layer_norm(const TensorT<S>& x, const TensorT<S>& gamma, const TensorT<S>& beta, S eps) {
    if (eps <= S(0)) throw std::invalid_argument("layer_norm: eps must be positive");
    const std::size_t d = x.shape().back();
    if (gamma.rank() != 1 || beta.rank() != 1 || gamma.size() != d || beta.size() != d)
        throw std::invalid_argument("layer_norm: gamma " + shape_str(gamma.shape()) + " / beta " +
                                    shape_str(beta.shape()) + " do not match last dim of " + shape_str(x.shape()));
    const std::size_t rows = x.size() / d;
    std::vector<S> v(x.size());
    std::vector<S> inv_sigma(rows), mean(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const S* xr = x.value().data() + r * d;
        S mu = S(0);
        for (std::size_t j = 0; j < d; ++j) mu += xr[j];
        mu /= S(d);
        S var = S(0);
        for (std::size_t j = 0; j < d; ++j) {
            const S c = xr[j] - mu;
            var += c * c;
        }
        var /= S(d);
        const S is = S(1) / std::sqrt(var + eps);
        mean[r] = mu;
        inv_sigma[r] = is;
        for (std::size_t j = 0; j < d; ++j)
            v[r * d + j] = gamma.value()[j] * ((xr[j] - mu) * is) + beta.value()[j];
    }
    TensorT<S> out(x.shape(), std::move(v));
    if (detail::want_grad<S>({&x, &gamma, &beta})) {
        detail::record(out, [px = x.node(), pg = gamma.node(), pb = beta.node(), po = out.node(), rows, d,
                             mean = std::move(mean), inv_sigma = std::move(inv_sigma)] {
            if (po->grad.empty()) return;
            if (px->requires_grad) px->ensure_grad();
            if (pg->requires_grad) pg->ensure_grad();
            if (pb->requires_grad) pb->ensure_grad();
            for (std::size_t r = 0; r < rows; ++r) {
                const S* xr = px->value.data() + r * d;
                const S* g = po->grad.data() + r * d;
                const S is = inv_sigma[r], mu = mean[r];
                if (pg->requires_grad || pb->requires_grad) {
                    for (std::size_t j = 0; j < d; ++j) {
                        const S xhat = (xr[j] - mu) * is;
                        if (pg->requires_grad) pg->grad[j] += g[j] * xhat;
                        if (pb->requires_grad) pb->grad[j] += g[j];
                    }
                }
                if (px->requires_grad) {
                    S sum_gg = S(0), sum_ggx = S(0);
                    for (std::size_t j = 0; j < d; ++j) {
                        const S gg = g[j] * pg->value[j];
                        const S xhat = (xr[j] - mu) * is;
                        sum_gg += gg;
                        sum_ggx += gg * xhat;
                    }
                    const S inv_d = S(1) / S(d);
                    for (std::size_t j = 0; j < d; ++j) {
                        const S gg = g[j] * pg->value[j];
                        const S xhat = (xr[j] - mu) * is;
                        px->grad[r * d + j] += is * (gg - inv_d * sum_gg - xhat * inv_d * sum_ggx);
                    }
                }
            }
        });
    }
    return out;
}

// Softmax along the last dimension. Masked positions get probability exactly
// 0; a fully masked row is an error.
template <class S>
TensorT<S> softmax_lastdim(const TensorT<S>& t, const BoolTensor* mask = nullptr) {
    const std::size_t d = t.shape().back();
    const std::size_t rows = t.size() / d;
    std::vector<std::size_t> mstrides;
    if (mask) mstrides = detail::broadcast_strides(t.shape(), mask->shape);

    // flat mask index for element (row r, col j) of t
    auto mask_at = [&](std::size_t r, std::size_t j) -> bool {
        if (!mask) return true;
        std::size_t flat = r * d + j;
        std::size_t mi = 0;
        for (std::size_t dim = t.shape().size(); dim-- > 0;) {
            const std::size_t coord = flat % t.shape()[dim];
            flat /= t.shape()[dim];
            mi += coord * mstrides[dim];
        }
        return mask->data[mi] != 0;
    };

    std::vector<S> v(t.size());
    for (std::size_t r = 0; r < rows; ++r) {
        const S* xr = t.value().data() + r * d;
        S mx = std::numeric_limits<S>::lowest();
        bool any = false;
        for (std::size_t j = 0; j < d; ++j) {
            if (!mask_at(r, j)) continue;
            any = true;
            mx = std::max(mx, xr[j]);
        }
        if (!any) throw std::runtime_error("softmax_lastdim: fully masked (degenerate) row " + std::to_string(r));
        S sum = S(0);
        for (std::size_t j = 0; j < d; ++j) {
            const S e = mask_at(r, j) ? std::exp(xr[j] - mx) : S(0);
            v[r * d + j] = e;
            sum += e;
        }
        const S inv = S(1) / sum;
        for (std::size_t j = 0; j < d; ++j) v[r * d + j] *= inv;
    }
    TensorT<S> out(t.shape(), std::move(v));
    if (detail::want_grad<S>({&t})) {
        detail::record(out, [pt = t.node(), po = out.node(), rows, d] {
            if (po->grad.empty()) return;
            if (!pt->requires_grad) return;
            pt->ensure_grad();
            for (std::size_t r = 0; r < rows; ++r) {
                const S* y = po->value.data() + r * d;
                const S* g = po->grad.data() + r * d;
                S dot = S(0);
                for (std::size_t j = 0; j < d; ++j) dot += g[j] * y[j];
                for (std::size_t j = 0; j < d; ++j) pt->grad[r * d + j] += y[j] * (g[j] - dot);
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// reductions and losses
// ---------------------------------------------------------------------------

template <class S>
TensorT<S> sum_all(const TensorT<S>& a) {
    S acc = S(0);
    for (auto x : a.value()) acc += x;
    TensorT<S> out = TensorT<S>::scalar(acc);
    if (detail::want_grad<S>({&a})) {
        detail::record(out, [pa = a.node(), po = out.node()] {
            if (po->grad.empty()) return;
            if (!pa->requires_grad) return;
            pa->ensure_grad();
            const S g = po->grad[0];
            for (auto& gi : pa->grad) gi += g;
        });
    }
    return out;
}

template <class S>
TensorT<S> mean_all(const TensorT<S>& a) {
    S acc = S(0);
    for (auto x : a.value()) acc += x;
    const S inv = S(1) / S(a.size());
    TensorT<S> out = TensorT<S>::scalar(acc * inv);
    if (detail::want_grad<S>({&a})) {
        detail::record(out, [pa = a.node(), po = out.node(), inv] {
            if (po->grad.empty()) return;
            if (!pa->requires_grad) return;
            pa->ensure_grad();
            const S g = po->grad[0] * inv;
            for (auto& gi : pa->grad) gi += g;
        });
    }
    return out;
}

// Mean squared error over unmasked positions. Masked positions are excluded
// from the mean, not zero-filled.
template <class S>
TensorT<S> mse(const TensorT<S>& a, const TensorT<S>& b, const BoolTensor* mask = nullptr) {
    detail::check_same_shape(a.shape(), b.shape(), "mse");
    if (mask && mask->shape != a.shape())
        throw std::invalid_argument("mse: mask shape " + shape_str(mask->shape) + " must equal " +
                                    shape_str(a.shape()));
    std::size_t count = 0;
    S acc = S(0);
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (mask && mask->data[i] == 0) continue;
        const S dlt = a.value()[i] - b.value()[i];
        acc += dlt * dlt;
        ++count;
    }
    if (count == 0) throw std::runtime_error("mse: empty unmasked set (degenerate mean)");
    TensorT<S> out = TensorT<S>::scalar(acc / S(count));
    if (detail::want_grad<S>({&a, &b})) {
        std::vector<std::uint8_t> mcopy = mask ? mask->data : std::vector<std::uint8_t>();
        detail::record(out, [pa = a.node(), pb = b.node(), po = out.node(), mcopy = std::move(mcopy), count] {
            if (po->grad.empty()) return;
            const S g2 = po->grad[0] * S(2) / S(count);
            if (pa->requires_grad) pa->ensure_grad();
            if (pb->requires_grad) pb->ensure_grad();
            for (std::size_t i = 0; i < pa->value.size(); ++i) {
                if (!mcopy.empty() && mcopy[i] == 0) continue;
                const S d = g2 * (pa->value[i] - pb->value[i]);
                if (pa->requires_grad) pa->grad[i] += d;
                if (pb->requires_grad) pb->grad[i] -= d;
            }
        });
    }
    return out;
}

// Mean over rows of -sum_j p_teacher[j] * log softmax(logits[j] / temperature).
// Gradient flows into the student logits; the teacher distribution is treated
// as constant.
template <class S>
TensorT<S> soft_cross_entropy(const TensorT<S>& student_logits, const TensorT<S>& teacher_probs, S temperature) {
    detail::check_same_shape(student_logits.shape(), teacher_probs.shape(), "soft_cross_entropy");
    if (temperature <= S(0)) throw std::invalid_argument("soft_cross_entropy: temperature must be positive");
    const std::size_t d = student_logits.shape().back();
    const std::size_t rows = student_logits.size() / d;
    S acc = S(0);
    for (std::size_t r = 0; r < rows; ++r) {
        const S* p = teacher_probs.value().data() + r * d;
        S psum = S(0);
        for (std::size_t j = 0; j < d; ++j) psum += p[j];
        if (std::abs(psum - S(1)) > S(1e-6))
            throw std::invalid_argument("soft_cross_entropy: teacher row " + std::to_string(r) +
                                        " sums to " + std::to_string(static_cast<double>(psum)) + ", expected 1");
        const S* z = student_logits.value().data() + r * d;
        S mx = z[0] / temperature;
        for (std::size_t j = 1; j < d; ++j) mx = std::max(mx, z[j] / temperature);
        S lse = S(0);
        for (std::size_t j = 0; j < d; ++j) lse += std::exp(z[j] / temperature - mx);
        lse = mx + std::log(lse);
        S dot = S(0);
        for (std::size_t j = 0; j < d; ++j) dot += p[j] * (z[j] / temperature);
        acc += lse - dot;
    }
    TensorT<S> out = TensorT<S>::scalar(acc / S(rows));
    if (detail::want_grad<S>({&student_logits})) {
        detail::record(out, [pz = student_logits.node(), pp = teacher_probs.node(), po = out.node(), rows, d,
                             temperature] {
            if (po->grad.empty()) return;
            if (!pz->requires_grad) return;
            pz->ensure_grad();
            const S gscale = po->grad[0] / (S(rows) * temperature);
            std::vector<S> q(d);
            for (std::size_t r = 0; r < rows; ++r) {
                const S* z = pz->value.data() + r * d;
                const S* p = pp->value.data() + r * d;
                S mx = z[0] / temperature;
                for (std::size_t j = 1; j < d; ++j) mx = std::max(mx, z[j] / temperature);
                S sum = S(0);
                for (std::size_t j = 0; j < d; ++j) {
                    q[j] = std::exp(z[j] / temperature - mx);
                    sum += q[j];
                }
                const S inv = S(1) / sum;
                for (std::size_t j = 0; j < d; ++j) pz->grad[r * d + j] += gscale * (q[j] * inv - p[j]);
            }
        });
    }
    return out;
}

// Mean over rows of -log softmax(logits)[gold]. One gold index per row.
template <class S>
TensorT<S> cross_entropy_index(const TensorT<S>& logits, const std::vector<int>& golds) {
    const std::size_t d = logits.shape().back();
    const std::size_t rows = logits.size() / d;
    if (golds.size() != rows)
        throw std::invalid_argument("cross_entropy_index: " + std::to_string(golds.size()) + " labels for " +
                                    std::to_string(rows) + " rows");
    for (auto g : golds)
        if (g < 0 || static_cast<std::size_t>(g) >= d)
            throw std::invalid_argument("cross_entropy_index: label " + std::to_string(g) + " out of range [0, " +
                                        std::to_string(d) + ")");
    S acc = S(0);
    for (std::size_t r = 0; r < rows; ++r) {
        const S* z = logits.value().data() + r * d;
        S mx = z[0];
        for (std::size_t j = 1; j < d; ++j) mx = std::max(mx, z[j]);
        S lse = S(0);
        for (std::size_t j = 0; j < d; ++j) lse += std::exp(z[j] - mx);
        lse = mx + std::log(lse);
        acc += lse - z[static_cast<std::size_t>(golds[r])];
    }
    TensorT<S> out = TensorT<S>::scalar(acc / S(rows));
    if (detail::want_grad<S>({&logits})) {
        detail::record(out, [pz = logits.node(), po = out.node(), rows, d, golds] {
            if (po->grad.empty()) return;
            if (!pz->requires_grad) return;
            pz->ensure_grad();
            const S gscale = po->grad[0] / S(rows);
            std::vector<S> q(d);
            for (std::size_t r = 0; r < rows; ++r) {
                const S* z = pz->value.data() + r * d;
                S mx = z[0];
                for (std::size_t j = 1; j < d; ++j) mx = std::max(mx, z[j]);
                S sum = S(0);
                for (std::size_t j = 0; j < d; ++j) {
                    q[j] = std::exp(z[j] - mx);
                    sum += q[j];
                }
                const S inv = S(1) / sum;
                for (std::size_t j = 0; j < d; ++j) {
                    S delta = q[j] * inv;
                    if (j == static_cast<std::size_t>(golds[r])) delta -= S(1);
                    pz->grad[r * d + j] += gscale * delta;
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// backward
// ---------------------------------------------------------------------------

template <class S>
void backward(const TensorT<S>& loss) {
    if (loss.size() != 1)
        throw std::invalid_argument("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
    auto* tape = TapeT<S>::active();
    if (!tape) throw std::runtime_error("backward: no active tape");
    loss.node()->ensure_grad();
    loss.node()->grad[0] += S(1);
    tape->run_backward_and_clear();
}

} // namespace tinykd
