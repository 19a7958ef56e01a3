#pragma once

#include <Eigen/Core>

#include <cassert>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <unordered_set>
#include <utility>
#include <vector>

#include "cmix/shape.hpp"

namespace cmix {

namespace autograd {

inline bool& grad_mode_flag() {
    thread_local bool enabled = true;
    return enabled;
}

inline bool grad_enabled() { return grad_mode_flag(); }

// RAII scope that disables graph recording (eval-mode forward passes).
struct NoGradGuard {
    NoGradGuard() : prev_(grad_mode_flag()) { grad_mode_flag() = false; }
    ~NoGradGuard() { grad_mode_flag() = prev_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

}  // namespace autograd

// Dense row-major tensor of floating-point values with an optional gradient
// buffer and a dynamically recorded operation graph for reverse-mode autodiff.
// Copying a TensorT copies the handle; the storage is shared. Operations never
// mutate their inputs' data; only grad buffers and explicit mutable_data()
// writes (parameter init, optimizer steps) modify storage in place.
template <typename S>
class TensorT {
    static_assert(std::is_floating_point_v<S>);

    struct Node;

    struct Storage {
        Shape shape;
        std::vector<S> data;
        std::vector<S> grad;  // empty until first backward touch
        bool requires_grad = false;
        std::shared_ptr<Node> node;   // producing operation, null for leaves
        bool node_consumed = false;   // a backward pass already released the node
    };

    struct Node {
        std::vector<TensorT> inputs;
        // Receives the gradient of this node's output and accumulates into the
        // inputs' grad buffers.
        std::function<void(std::span<const S>)> backprop;
    };

public:
    using Scalar = S;

    TensorT() = default;

    explicit TensorT(Shape shape, bool requires_grad = false)
        : s_(std::make_shared<Storage>()) {
        s_->data.assign(static_cast<std::size_t>(shape.numel()), S(0));
        s_->shape = std::move(shape);
        s_->requires_grad = requires_grad;
    }

    TensorT(Shape shape, std::vector<S> values, bool requires_grad = false)
        : s_(std::make_shared<Storage>()) {
        if (static_cast<std::int64_t>(values.size()) != shape.numel())
            throw std::invalid_argument("Tensor: data length " + std::to_string(values.size()) +
                                        " does not match shape " + shape.str());
        s_->shape = std::move(shape);
        s_->data = std::move(values);
        s_->requires_grad = requires_grad;
    }

    static TensorT zeros(Shape shape, bool requires_grad = false) {
        return TensorT(std::move(shape), requires_grad);
    }

    static TensorT full(Shape shape, S value, bool requires_grad = false) {
        TensorT t(std::move(shape), requires_grad);
        for (S& x : t.s_->data) x = value;
        return t;
    }

    static TensorT ones(Shape shape, bool requires_grad = false) {
        return full(std::move(shape), S(1), requires_grad);
    }

    static TensorT scalar(S value) { return TensorT(Shape{}, std::vector<S>{value}); }

    bool valid() const { return static_cast<bool>(s_); }
    const Shape& shape() const { return s_->shape; }
    int rank() const { return s_->shape.rank(); }
    std::int64_t numel() const { return static_cast<std::int64_t>(s_->data.size()); }
    std::int64_t dim(int axis) const { return s_->shape[axis]; }

    std::span<const S> data() const { return {s_->data.data(), s_->data.size()}; }

    // In-place access for initialization and optimizer updates. Never used by
    // operations on their inputs.
    std::span<S> mutable_data() { return {s_->data.data(), s_->data.size()}; }

    bool requires_grad() const { return s_->requires_grad; }
    void set_requires_grad(bool v) { s_->requires_grad = v; }

    // True if backward should propagate into this tensor.
    bool needs_grad() const { return s_ && (s_->requires_grad || s_->node != nullptr); }

    bool has_grad() const { return s_ && !s_->grad.empty(); }

    std::span<const S> grad() const {
        if (!has_grad()) throw std::runtime_error("Tensor: gradient not populated");
        return {s_->grad.data(), s_->grad.size()};
    }

    // Gradient accumulation buffer, zero-initialized lazily on first touch.
    std::span<S> grad_buffer() {
        if (s_->grad.empty()) s_->grad.assign(s_->data.size(), S(0));
        return {s_->grad.data(), s_->grad.size()};
    }

    void accumulate_grad(std::span<const S> delta) {
        auto g = grad_buffer();
        assert(delta.size() == g.size());
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += delta[i];
    }

    void zero_grad() {
        if (s_) {
            s_->grad.clear();
            s_->grad.shrink_to_fit();
        }
    }

    S item() const {
        if (numel() != 1) throw std::invalid_argument("Tensor: item() on non-scalar of shape " + shape().str());
        return s_->data[0];
    }

    bool same_storage(const TensorT& other) const { return s_ == other.s_; }

    // Attach the producing operation. Called by op implementations when
    // recording is active and some input needs gradients.
    void record(std::vector<TensorT> inputs, std::function<void(std::span<const S>)> backprop) {
        auto node = std::make_shared<Node>();
        node->inputs = std::move(inputs);
        node->backprop = std::move(backprop);
        s_->node = std::move(node);
    }

    static bool should_record(std::initializer_list<const TensorT*> inputs) {
        if (!autograd::grad_enabled()) return false;
        for (const TensorT* t : inputs)
            if (t->needs_grad()) return true;
        return false;
    }

    // Reverse-mode sweep from a scalar loss. Each reachable node is visited
    // exactly once; gradients sum over all paths. Saved activations and the
    // grad buffers of intermediates are released as the sweep retreats, so
    // peak memory stays near the forward graph's footprint.
    void backward() {
        if (!s_) throw std::runtime_error("backward: empty tensor");
        if (numel() != 1)
            throw std::invalid_argument("backward: loss must be scalar, got shape " + shape().str());
        if (s_->node_consumed)
            throw std::runtime_error("backward: graph already consumed; rebuild it before calling backward again");
        if (!s_->node)
            throw std::invalid_argument("backward: tensor was not produced by a recorded graph");

        // Iterative post-order DFS; the post-order is a topological order of
        // the DAG, so the reverse walk sees every consumer before its inputs.
        std::vector<std::shared_ptr<Storage>> order;
        std::unordered_set<Storage*> seen;
        struct Frame {
            std::shared_ptr<Storage> st;
            std::size_t next_input = 0;
        };
        std::vector<Frame> stack;
        seen.insert(s_.get());
        stack.push_back({s_, 0});
        while (!stack.empty()) {
            Frame& f = stack.back();
            Storage* st = f.st.get();
            if (st->node_consumed)
                throw std::runtime_error("backward: graph already consumed; rebuild it before calling backward again");
            const std::size_t n_inputs = st->node ? st->node->inputs.size() : 0;
            if (f.next_input < n_inputs) {
                const TensorT& in = st->node->inputs[f.next_input++];
                if (in.s_ && in.s_->node && !seen.count(in.s_.get())) {
                    seen.insert(in.s_.get());
                    stack.push_back({in.s_, 0});
                }
            } else {
                order.push_back(f.st);
                stack.pop_back();
            }
        }

        s_->grad.assign(1, S(1));
        for (auto it = order.rbegin(); it != order.rend(); ++it) {
            Storage* st = it->get();
            if (!st->node) continue;
            if (!st->grad.empty()) st->node->backprop({st->grad.data(), st->grad.size()});
            st->node.reset();
            st->node_consumed = true;
            if (!st->requires_grad && st != s_.get()) {
                st->grad.clear();
                st->grad.shrink_to_fit();
            }
        }
    }

private:
    std::shared_ptr<Storage> s_;
};

using Tensor = TensorT<float>;

namespace detail {

template <typename S>
using MatRM = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename S>
using MapMat = Eigen::Map<MatRM<S>>;
template <typename S>
using MapConstMat = Eigen::Map<const MatRM<S>>;

// Sanity scan used by debug builds: every value a successful operation stores
// must be finite.
template <typename S>
inline void debug_check_finite(const TensorT<S>& t, [[maybe_unused]] const char* what) {
#ifndef NDEBUG
    for (S v : t.data()) assert(std::isfinite(v) && what);
#else
    (void)t;
#endif
}

}  // namespace detail

enum class EltOp { add, sub, mul };

namespace detail {

// Flat-index remapping for a tensor broadcast along extent-1 axes. Holds the
// target dims and the source strides (0 on broadcast axes) by value so it can
// outlive the forward pass inside backward closures.
struct BroadcastIndex {
    std::vector<std::int64_t> dims;
    std::vector<std::int64_t> strides;

    std::int64_t operator()(std::int64_t flat) const {
        std::int64_t idx = 0, rem = flat;
        for (int i = static_cast<int>(dims.size()) - 1; i >= 0; --i) {
            const auto u = static_cast<std::size_t>(i);
            idx += (rem % dims[u]) * strides[u];
            rem /= dims[u];
        }
        return idx;
    }
};

inline BroadcastIndex make_broadcast_index(const Shape& target, const Shape& src) {
    if (target.rank() != src.rank())
        throw std::invalid_argument("elementwise: rank mismatch " + target.str() + " vs " + src.str());
    BroadcastIndex bi;
    bi.dims = target.dims();
    bi.strides.assign(bi.dims.size(), 0);
    std::int64_t stride = 1;
    for (int i = src.rank() - 1; i >= 0; --i) {
        if (src[i] != target[i] && src[i] != 1)
            throw std::invalid_argument("elementwise: shape " + src.str() + " not broadcastable to " +
                                        target.str());
        bi.strides[static_cast<std::size_t>(i)] = (src[i] == 1) ? 0 : stride;
        stride *= src[i];
    }
    return bi;
}

}  // namespace detail

// Elementwise add/sub/mul. Shapes must match exactly, or b may broadcast along
// extent-1 axes at equal rank (per-channel style broadcast).
template <typename S>
TensorT<S> elementwise(EltOp op, const TensorT<S>& a, const TensorT<S>& b) {
    const bool same = a.shape() == b.shape();
    detail::BroadcastIndex b_index;
    if (!same) b_index = detail::make_broadcast_index(a.shape(), b.shape());

    const std::int64_t n = a.numel();
    TensorT<S> out(a.shape());
    auto ad = a.data();
    auto bd = b.data();
    auto od = out.mutable_data();

    auto apply = [op](S x, S y) {
        switch (op) {
            case EltOp::add: return x + y;
            case EltOp::sub: return x - y;
            default: return x * y;
        }
    };

    if (same) {
        for (std::int64_t i = 0; i < n; ++i) od[i] = apply(ad[i], bd[i]);
    } else {
        for (std::int64_t i = 0; i < n; ++i) od[i] = apply(ad[i], bd[b_index(i)]);
    }
    detail::debug_check_finite(out, "elementwise produced non-finite values");

    if (TensorT<S>::should_record({&a, &b})) {
        TensorT<S> a_cap = a, b_cap = b;
        out.record({a, b}, [op, a_cap, b_cap, same, b_index](std::span<const S> up) mutable {
            const std::int64_t n = a_cap.numel();
            if (a_cap.needs_grad()) {
                auto ga = a_cap.grad_buffer();
                auto bv = b_cap.data();
                switch (op) {
                    case EltOp::add:
                    case EltOp::sub:
                        for (std::int64_t i = 0; i < n; ++i) ga[i] += up[i];
                        break;
                    case EltOp::mul:
                        if (same)
                            for (std::int64_t i = 0; i < n; ++i) ga[i] += up[i] * bv[i];
                        else
                            for (std::int64_t i = 0; i < n; ++i) ga[i] += up[i] * bv[b_index(i)];
                        break;
                }
            }
            if (b_cap.needs_grad()) {
                auto gb = b_cap.grad_buffer();
                auto av = a_cap.data();
                const S sign = (op == EltOp::sub) ? S(-1) : S(1);
                if (same) {
                    for (std::int64_t i = 0; i < n; ++i)
                        gb[i] += (op == EltOp::mul) ? up[i] * av[i] : sign * up[i];
                } else {
                    for (std::int64_t i = 0; i < n; ++i) {
                        const std::int64_t j = b_index(i);
                        gb[j] += (op == EltOp::mul) ? up[i] * av[i] : sign * up[i];
                    }
                }
            }
        });
    }
    return out;
}

template <typename S>
TensorT<S> add(const TensorT<S>& a, const TensorT<S>& b) { return elementwise(EltOp::add, a, b); }
template <typename S>
TensorT<S> sub(const TensorT<S>& a, const TensorT<S>& b) { return elementwise(EltOp::sub, a, b); }
template <typename S>
TensorT<S> mul(const TensorT<S>& a, const TensorT<S>& b) { return elementwise(EltOp::mul, a, b); }

// Matrix product [m x k] . [k x n] -> [m x n].
template <typename S>
TensorT<S> matmul(const TensorT<S>& a, const TensorT<S>& b) {
    if (a.rank() != 2 || b.rank() != 2)
        throw std::invalid_argument("matmul: expected rank-2 tensors, got " + a.shape().str() + " and " +
                                    b.shape().str());
    const std::int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    if (b.dim(0) != k)
        throw std::invalid_argument("matmul: inner dimensions disagree, " + a.shape().str() + " vs " +
                                    b.shape().str());

    TensorT<S> out(Shape{m, n});
    detail::MapConstMat<S> A(a.data().data(), m, k);
    detail::MapConstMat<S> B(b.data().data(), k, n);
    detail::MapMat<S> O(out.mutable_data().data(), m, n);
    O.noalias() = A * B;
    detail::debug_check_finite(out, "matmul produced non-finite values");

    if (TensorT<S>::should_record({&a, &b})) {
        TensorT<S> a_cap = a, b_cap = b;
        out.record({a, b}, [a_cap, b_cap, m, k, n](std::span<const S> up) mutable {
            detail::MapConstMat<S> U(up.data(), m, n);
            if (a_cap.needs_grad()) {
                detail::MapConstMat<S> B(b_cap.data().data(), k, n);
                detail::MapMat<S> GA(a_cap.grad_buffer().data(), m, k);
                GA.noalias() += U * B.transpose();
            }
            if (b_cap.needs_grad()) {
                detail::MapConstMat<S> A(a_cap.data().data(), m, k);
                detail::MapMat<S> GB(b_cap.grad_buffer().data(), k, n);
                GB.noalias() += A.transpose() * U;
            }
        });
    }
    return out;
}

// Sum of all elements, as a rank-0 tensor.
template <typename S>
TensorT<S> sum(const TensorT<S>& x) {
    double acc = 0.0;
    for (S v : x.data()) acc += static_cast<double>(v);
    TensorT<S> out = TensorT<S>::scalar(static_cast<S>(acc));
    if (TensorT<S>::should_record({&x})) {
        TensorT<S> x_cap = x;
        out.record({x}, [x_cap](std::span<const S> up) mutable {
            if (!x_cap.needs_grad()) return;
            auto g = x_cap.grad_buffer();
            const S u = up[0];
            for (auto& v : g) v += u;
        });
    }
    return out;
}

}  // namespace cmix
