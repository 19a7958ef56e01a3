#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "cmix/conv.hpp"
#include "cmix/runtime.hpp"
#include "cmix/tensor.hpp"

namespace cmix {

enum class Mode { train, eval };

template <typename S>
struct BatchNormStateT {
    TensorT<S> gamma, beta;               // learnable affine
    TensorT<S> running_mean, running_var; // eval-mode statistics
    S momentum = S(0.1);
    S eps = S(1e-5);

    static BatchNormStateT init(std::int64_t channels) {
        BatchNormStateT st;
        st.gamma = TensorT<S>::ones(Shape{channels}, /*requires_grad=*/true);
        st.beta = TensorT<S>::zeros(Shape{channels}, /*requires_grad=*/true);
        st.running_mean = TensorT<S>::zeros(Shape{channels});
        st.running_var = TensorT<S>::ones(Shape{channels});
        return st;
    }

    std::int64_t channels() const { return gamma.dim(0); }
};

using BatchNormState = BatchNormStateT<float>;

// BatchNorm over (B, H, W) per channel. Train mode normalizes with the biased
// batch variance and updates running statistics (running_var keeps the
// unbiased estimate); eval mode is a fixed affine map from the running stats.
template <typename S>
TensorT<S> batchnorm2d(const TensorT<S>& x, BatchNormStateT<S>& state, Mode mode) {
    if (x.rank() != 4) throw std::invalid_argument("batchnorm2d: input must be BxCxHxW, got " + x.shape().str());
    const std::int64_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    if (C != state.channels())
        throw std::invalid_argument("batchnorm2d: " + std::to_string(C) + " channels vs state " +
                                    std::to_string(state.channels()));
    const std::int64_t HW = H * W;
    const std::int64_t N = B * HW;

    TensorT<S> out(x.shape());
    const S* xd = x.data().data();
    S* od = out.mutable_data().data();
    const S* gm = state.gamma.data().data();
    const S* bt = state.beta.data().data();

    if (mode == Mode::train) {
        if (N < 2) throw std::invalid_argument("batchnorm2d: train mode needs B*H*W >= 2 per channel");
        std::vector<S> invstd(static_cast<std::size_t>(C));
        std::vector<S> xhat(static_cast<std::size_t>(x.numel()));
        S* rm = state.running_mean.mutable_data().data();
        S* rv = state.running_var.mutable_data().data();
        const double mom = static_cast<double>(state.momentum);

        runtime::parallel_for(C, [&](std::int64_t c) {
            double s = 0.0;
            for (std::int64_t b = 0; b < B; ++b) {
                const S* plane = xd + (b * C + c) * HW;
                for (std::int64_t i = 0; i < HW; ++i) s += static_cast<double>(plane[i]);
            }
            const double mean = s / static_cast<double>(N);
            double sq = 0.0;
            for (std::int64_t b = 0; b < B; ++b) {
                const S* plane = xd + (b * C + c) * HW;
                for (std::int64_t i = 0; i < HW; ++i) {
                    const double dv = static_cast<double>(plane[i]) - mean;
                    sq += dv * dv;
                }
            }
            const double var = sq / static_cast<double>(N);
            const double istd = 1.0 / std::sqrt(var + static_cast<double>(state.eps));
            invstd[static_cast<std::size_t>(c)] = static_cast<S>(istd);
            const S g = gm[c], be = bt[c];
            for (std::int64_t b = 0; b < B; ++b) {
                const S* plane = xd + (b * C + c) * HW;
                S* xh = xhat.data() + (b * C + c) * HW;
                S* op = od + (b * C + c) * HW;
                for (std::int64_t i = 0; i < HW; ++i) {
                    const S v = static_cast<S>((static_cast<double>(plane[i]) - mean) * istd);
                    xh[i] = v;
                    op[i] = g * v + be;
                }
            }
            rm[c] = static_cast<S>((1.0 - mom) * static_cast<double>(rm[c]) + mom * mean);
            const double unbiased = var * static_cast<double>(N) / static_cast<double>(N - 1);
            rv[c] = static_cast<S>((1.0 - mom) * static_cast<double>(rv[c]) + mom * unbiased);
        });
        detail::debug_check_finite(out, "batchnorm2d produced non-finite values");

        if (TensorT<S>::should_record({&x, &state.gamma, &state.beta})) {
            TensorT<S> x_cap = x, g_cap = state.gamma, b_cap = state.beta;
            auto xhat_s = std::make_shared<std::vector<S>>(std::move(xhat));
            auto istd_s = std::make_shared<std::vector<S>>(std::move(invstd));
            out.record({x, state.gamma, state.beta},
                       [x_cap, g_cap, b_cap, xhat_s, istd_s, B, C, HW, N](std::span<const S> up) mutable {
                S* gx = x_cap.needs_grad() ? x_cap.grad_buffer().data() : nullptr;
                S* gg = g_cap.needs_grad() ? g_cap.grad_buffer().data() : nullptr;
                S* gb = b_cap.needs_grad() ? b_cap.grad_buffer().data() : nullptr;
                const S* gm = g_cap.data().data();
                runtime::parallel_for(C, [&](std::int64_t c) {
                    double sum_dy = 0.0, sum_dy_xhat = 0.0;
                    for (std::int64_t b = 0; b < B; ++b) {
                        const S* u = up.data() + (b * C + c) * HW;
                        const S* xh = xhat_s->data() + (b * C + c) * HW;
                        for (std::int64_t i = 0; i < HW; ++i) {
                            sum_dy += static_cast<double>(u[i]);
                            sum_dy_xhat += static_cast<double>(u[i]) * static_cast<double>(xh[i]);
                        }
                    }
                    if (gb) gb[c] += static_cast<S>(sum_dy);
                    if (gg) gg[c] += static_cast<S>(sum_dy_xhat);
                    if (gx) {
                        const double k = static_cast<double>(gm[c]) *
                                         static_cast<double>((*istd_s)[static_cast<std::size_t>(c)]);
                        const double mean_dy = sum_dy / static_cast<double>(N);
                        const double mean_dy_xhat = sum_dy_xhat / static_cast<double>(N);
                        for (std::int64_t b = 0; b < B; ++b) {
                            const S* u = up.data() + (b * C + c) * HW;
                            const S* xh = xhat_s->data() + (b * C + c) * HW;
                            S* g = gx + (b * C + c) * HW;
                            for (std::int64_t i = 0; i < HW; ++i)
                                g[i] += static_cast<S>(k * (static_cast<double>(u[i]) - mean_dy -
                                                            static_cast<double>(xh[i]) * mean_dy_xhat));
                        }
                    }
                });
            });
        }
        return out;
    }

    // eval: fixed transform from running statistics
    const S* rm = state.running_mean.data().data();
    const S* rv = state.running_var.data().data();
    std::vector<S> scale(static_cast<std::size_t>(C)), shift(static_cast<std::size_t>(C));
    std::vector<S> istd(static_cast<std::size_t>(C));
    for (std::int64_t c = 0; c < C; ++c) {
        const double is = 1.0 / std::sqrt(static_cast<double>(rv[c]) + static_cast<double>(state.eps));
        istd[static_cast<std::size_t>(c)] = static_cast<S>(is);
        scale[static_cast<std::size_t>(c)] = static_cast<S>(static_cast<double>(gm[c]) * is);
        shift[static_cast<std::size_t>(c)] =
            static_cast<S>(static_cast<double>(bt[c]) - static_cast<double>(gm[c]) * is * static_cast<double>(rm[c]));
    }
    runtime::parallel_for(B * C, [&](std::int64_t bc) {
        const std::int64_t c = bc % C;
        const S* plane = xd + bc * HW;
        S* op = od + bc * HW;
        const S sc = scale[static_cast<std::size_t>(c)], sh = shift[static_cast<std::size_t>(c)];
        for (std::int64_t i = 0; i < HW; ++i) op[i] = sc * plane[i] + sh;
    });
    detail::debug_check_finite(out, "batchnorm2d produced non-finite values");

    if (TensorT<S>::should_record({&x, &state.gamma, &state.beta})) {
        TensorT<S> x_cap = x, g_cap = state.gamma, b_cap = state.beta;
        TensorT<S> rm_cap = state.running_mean;
        auto istd_s = std::make_shared<std::vector<S>>(std::move(istd));
        out.record({x, state.gamma, state.beta},
                   [x_cap, g_cap, b_cap, rm_cap, istd_s, B, C, HW](std::span<const S> up) mutable {
            S* gx = x_cap.needs_grad() ? x_cap.grad_buffer().data() : nullptr;
            S* gg = g_cap.needs_grad() ? g_cap.grad_buffer().data() : nullptr;
            S* gb = b_cap.needs_grad() ? b_cap.grad_buffer().data() : nullptr;
            const S* gm = g_cap.data().data();
            const S* xd = x_cap.data().data();
            const S* rm = rm_cap.data().data();
            runtime::parallel_for(C, [&](std::int64_t c) {
                const S is = (*istd_s)[static_cast<std::size_t>(c)];
                double sum_dy = 0.0, sum_dy_xhat = 0.0;
                for (std::int64_t b = 0; b < B; ++b) {
                    const S* u = up.data() + (b * C + c) * HW;
                    const S* plane = xd + (b * C + c) * HW;
                    S* g = gx ? gx + (b * C + c) * HW : nullptr;
                    for (std::int64_t i = 0; i < HW; ++i) {
                        sum_dy += static_cast<double>(u[i]);
                        sum_dy_xhat += static_cast<double>(u[i]) * static_cast<double>((plane[i] - rm[c]) * is);
                        if (g) g[i] += u[i] * gm[c] * is;
                    }
                }
                if (gb) gb[c] += static_cast<S>(sum_dy);
                if (gg) gg[c] += static_cast<S>(sum_dy_xhat);
            });
        });
    }
    return out;
}

// LayerNorm over the channel axis, independently at each (b, h, w) position,
// followed by a per-channel affine.
template <typename S>
TensorT<S> layernorm(const TensorT<S>& x, const TensorT<S>& gamma, const TensorT<S>& beta, S eps) {
    if (x.rank() != 4) throw std::invalid_argument("layernorm: input must be BxCxHxW, got " + x.shape().str());
    const std::int64_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    if (!(gamma.shape() == Shape{C}) || !(beta.shape() == Shape{C}))
        throw std::invalid_argument("layernorm: gamma/beta must have shape {" + std::to_string(C) + "}");
    const std::int64_t HW = H * W;

    TensorT<S> out(x.shape());
    std::vector<S> xhat(static_cast<std::size_t>(x.numel()));
    std::vector<S> invstd(static_cast<std::size_t>(B * HW));
    const S* xd = x.data().data();
    const S* gm = gamma.data().data();
    const S* bt = beta.data().data();
    S* od = out.mutable_data().data();

    runtime::parallel_for(B, [&](std::int64_t b) {
        for (std::int64_t p = 0; p < HW; ++p) {
            const S* base = xd + b * C * HW + p;
            double s = 0.0;
            for (std::int64_t c = 0; c < C; ++c) s += static_cast<double>(base[c * HW]);
            const double mean = s / static_cast<double>(C);
            double sq = 0.0;
            for (std::int64_t c = 0; c < C; ++c) {
                const double dv = static_cast<double>(base[c * HW]) - mean;
                sq += dv * dv;
            }
            const double var = sq / static_cast<double>(C);
            const double istd = 1.0 / std::sqrt(var + static_cast<double>(eps));
            invstd[static_cast<std::size_t>(b * HW + p)] = static_cast<S>(istd);
            for (std::int64_t c = 0; c < C; ++c) {
                const S v = static_cast<S>((static_cast<double>(base[c * HW]) - mean) * istd);
                xhat[static_cast<std::size_t>(b * C * HW + c * HW + p)] = v;
                od[b * C * HW + c * HW + p] = gm[c] * v + bt[c];
            }
        }
    });
    detail::debug_check_finite(out, "layernorm produced non-finite values");

    if (TensorT<S>::should_record({&x, &gamma, &beta})) {
        TensorT<S> x_cap = x, g_cap = gamma, b_cap = beta;
        auto xhat_s = std::make_shared<std::vector<S>>(std::move(xhat));
        auto istd_s = std::make_shared<std::vector<S>>(std::move(invstd));
        out.record({x, gamma, beta}, [x_cap, g_cap, b_cap, xhat_s, istd_s, B, C, HW](std::span<const S> up) mutable {
            S* gx = x_cap.needs_grad() ? x_cap.grad_buffer().data() : nullptr;
            S* gg = g_cap.needs_grad() ? g_cap.grad_buffer().data() : nullptr;
            S* gb = b_cap.needs_grad() ? b_cap.grad_buffer().data() : nullptr;
            const S* gm = g_cap.data().data();
            // gamma/beta gradients are shared across positions; accumulate per
            // batch row in parallel would race, so walk positions serially per c.
            if (gg || gb) {
                for (std::int64_t b = 0; b < B; ++b)
                    for (std::int64_t c = 0; c < C; ++c) {
                        const S* u = up.data() + (b * C + c) * HW;
                        const S* xh = xhat_s->data() + (b * C + c) * HW;
                        double sg = 0.0, sb = 0.0;
                        for (std::int64_t i = 0; i < HW; ++i) {
                            sg += static_cast<double>(u[i]) * static_cast<double>(xh[i]);
                            sb += static_cast<double>(u[i]);
                        }
                        if (gg) gg[c] += static_cast<S>(sg);
                        if (gb) gb[c] += static_cast<S>(sb);
                    }
            }
            if (gx) {
                runtime::parallel_for(B, [&](std::int64_t b) {
                    for (std::int64_t p = 0; p < HW; ++p) {
                        const S istd = (*istd_s)[static_cast<std::size_t>(b * HW + p)];
                        double sum_g = 0.0, sum_g_xhat = 0.0;
                        for (std::int64_t c = 0; c < C; ++c) {
                            const std::int64_t idx = b * C * HW + c * HW + p;
                            const double gval = static_cast<double>(up[static_cast<std::size_t>(idx)]) *
                                                static_cast<double>(gm[c]);
                            sum_g += gval;
                            sum_g_xhat += gval * static_cast<double>((*xhat_s)[static_cast<std::size_t>(idx)]);
                        }
                        const double mean_g = sum_g / static_cast<double>(C);
                        const double mean_g_xhat = sum_g_xhat / static_cast<double>(C);
                        for (std::int64_t c = 0; c < C; ++c) {
                            const std::int64_t idx = b * C * HW + c * HW + p;
                            const double gval = static_cast<double>(up[static_cast<std::size_t>(idx)]) *
                                                static_cast<double>(gm[c]);
                            gx[idx] += static_cast<S>(static_cast<double>(istd) *
                                                      (gval - mean_g -
                                                       static_cast<double>((*xhat_s)[static_cast<std::size_t>(idx)]) *
                                                           mean_g_xhat));
                        }
                    }
                });
            }
        });
    }
    return out;
}

enum class ActivationKind { gelu, relu };

// GELU, tanh approximation: 0.5x(1 + tanh(sqrt(2/pi)(x + 0.044715 x^3))).
template <typename S>
TensorT<S> gelu(const TensorT<S>& x) {
    constexpr double kC0 = 0.7978845608028654;  // sqrt(2/pi)
    constexpr double kC1 = 0.044715;
    const std::int64_t n = x.numel();
    TensorT<S> out(x.shape());
    std::vector<S> tanh_u(static_cast<std::size_t>(n));
    {
        using Arr = Eigen::Array<S, Eigen::Dynamic, 1>;
        Eigen::Map<const Arr> X(x.data().data(), n);
        Eigen::Map<Arr> T(tanh_u.data(), n);
        Eigen::Map<Arr> Y(out.mutable_data().data(), n);
        T = ((X + S(kC1) * X.cube()) * S(kC0)).tanh();
        Y = S(0.5) * X * (S(1) + T);
    }
    detail::debug_check_finite(out, "gelu produced non-finite values");

    if (TensorT<S>::should_record({&x})) {
        TensorT<S> x_cap = x;
        auto t_s = std::make_shared<std::vector<S>>(std::move(tanh_u));
        out.record({x}, [x_cap, t_s, n](std::span<const S> up) mutable {
            if (!x_cap.needs_grad()) return;
            auto g = x_cap.grad_buffer();
            const S* xd = x_cap.data().data();
            const S* t = t_s->data();
            for (std::int64_t i = 0; i < n; ++i) {
                const double xv = xd[i], tv = t[i];
                const double sech2 = 1.0 - tv * tv;
                const double du = kC0 * (1.0 + 3.0 * kC1 * xv * xv);
                g[i] += up[i] * static_cast<S>(0.5 * (1.0 + tv) + 0.5 * xv * sech2 * du);
            }
        });
    }
    return out;
}

template <typename S>
TensorT<S> relu(const TensorT<S>& x) {
    const std::int64_t n = x.numel();
    TensorT<S> out(x.shape());
    const S* xd = x.data().data();
    S* od = out.mutable_data().data();
    for (std::int64_t i = 0; i < n; ++i) od[i] = xd[i] > S(0) ? xd[i] : S(0);

    if (TensorT<S>::should_record({&x})) {
        TensorT<S> x_cap = x;
        out.record({x}, [x_cap, n](std::span<const S> up) mutable {
            if (!x_cap.needs_grad()) return;
            auto g = x_cap.grad_buffer();
            const S* xd = x_cap.data().data();
            for (std::int64_t i = 0; i < n; ++i)
                if (xd[i] > S(0)) g[i] += up[i];
        });
    }
    return out;
}

template <typename S>
TensorT<S> activation(ActivationKind kind, const TensorT<S>& x) {
    return kind == ActivationKind::gelu ? gelu(x) : relu(x);
}

// Mean over spatial positions: B x C x H x W -> B x C.
template <typename S>
TensorT<S> global_avg_pool(const TensorT<S>& x) {
    if (x.rank() != 4) throw std::invalid_argument("global_avg_pool: input must be BxCxHxW");
    const std::int64_t B = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
    TensorT<S> out(Shape{B, C});
    const S* xd = x.data().data();
    S* od = out.mutable_data().data();
    for (std::int64_t bc = 0; bc < B * C; ++bc) {
        double s = 0.0;
        const S* plane = xd + bc * HW;
        for (std::int64_t i = 0; i < HW; ++i) s += static_cast<double>(plane[i]);
        od[bc] = static_cast<S>(s / static_cast<double>(HW));
    }

    if (TensorT<S>::should_record({&x})) {
        TensorT<S> x_cap = x;
        out.record({x}, [x_cap, B, C, HW](std::span<const S> up) mutable {
            if (!x_cap.needs_grad()) return;
            auto g = x_cap.grad_buffer();
            for (std::int64_t bc = 0; bc < B * C; ++bc) {
                const S u = up[static_cast<std::size_t>(bc)] / static_cast<S>(HW);
                S* plane = g.data() + bc * HW;
                for (std::int64_t i = 0; i < HW; ++i) plane[i] += u;
            }
        });
    }
    return out;
}

// x[B x F] . w[F x K] + bias[K].
template <typename S>
TensorT<S> linear(const TensorT<S>& x, const TensorT<S>& w, const TensorT<S>& bias) {
    if (x.rank() != 2 || w.rank() != 2 || bias.rank() != 1)
        throw std::invalid_argument("linear: expected x[BxF], w[FxK], bias[K]");
    const std::int64_t B = x.dim(0), F = x.dim(1), K = w.dim(1);
    if (w.dim(0) != F || bias.dim(0) != K)
        throw std::invalid_argument("linear: dimension mismatch, x " + x.shape().str() + ", w " +
                                    w.shape().str() + ", bias " + bias.shape().str());

    TensorT<S> out(Shape{B, K});
    detail::MapConstMat<S> X(x.data().data(), B, F);
    detail::MapConstMat<S> Wm(w.data().data(), F, K);
    detail::MapMat<S> Y(out.mutable_data().data(), B, K);
    Y.noalias() = X * Wm;
    const S* bd = bias.data().data();
    for (std::int64_t b = 0; b < B; ++b)
        for (std::int64_t k = 0; k < K; ++k) Y(b, k) += bd[k];
    detail::debug_check_finite(out, "linear produced non-finite values");

    if (TensorT<S>::should_record({&x, &w, &bias})) {
        TensorT<S> x_cap = x, w_cap = w, b_cap = bias;
        out.record({x, w, bias}, [x_cap, w_cap, b_cap, B, F, K](std::span<const S> up) mutable {
            detail::MapConstMat<S> U(up.data(), B, K);
            if (x_cap.needs_grad()) {
                detail::MapConstMat<S> Wm(w_cap.data().data(), F, K);
                detail::MapMat<S> GX(x_cap.grad_buffer().data(), B, F);
                GX.noalias() += U * Wm.transpose();
            }
            if (w_cap.needs_grad()) {
                detail::MapConstMat<S> X(x_cap.data().data(), B, F);
                detail::MapMat<S> GW(w_cap.grad_buffer().data(), F, K);
                GW.noalias() += X.transpose() * U;
            }
            if (b_cap.needs_grad()) {
                auto gb = b_cap.grad_buffer();
                for (std::int64_t b = 0; b < B; ++b)
                    for (std::int64_t k = 0; k < K; ++k) gb[k] += U(b, k);
            }
        });
    }
    return out;
}

// Mean over the batch of -sum_k target_k * log softmax(logits)_k, stabilized
// by max subtraction. Targets are soft labels; each row must be a distribution.
template <typename S>
TensorT<S> softmax_cross_entropy(const TensorT<S>& logits, const TensorT<S>& targets) {
    if (logits.rank() != 2 || !(logits.shape() == targets.shape()))
        throw std::invalid_argument("softmax_cross_entropy: logits/targets must share shape BxK, got " +
                                    logits.shape().str() + " and " + targets.shape().str());
    const std::int64_t B = logits.dim(0), K = logits.dim(1);
    const S* ld = logits.data().data();
    const S* td = targets.data().data();

    for (std::int64_t b = 0; b < B; ++b) {
        double s = 0.0;
        for (std::int64_t k = 0; k < K; ++k) {
            const double t = td[b * K + k];
            if (t < -1e-7) throw std::invalid_argument("softmax_cross_entropy: negative target entry");
            s += t;
        }
        if (std::abs(s - 1.0) > 1e-5)
            throw std::invalid_argument("softmax_cross_entropy: target row " + std::to_string(b) +
                                        " sums to " + std::to_string(s));
    }

    std::vector<S> probs(static_cast<std::size_t>(B * K));
    double loss_acc = 0.0;
    for (std::int64_t b = 0; b < B; ++b) {
        const S* row = ld + b * K;
        double m = row[0];
        for (std::int64_t k = 1; k < K; ++k) m = std::max(m, static_cast<double>(row[k]));
        double z = 0.0;
        for (std::int64_t k = 0; k < K; ++k) z += std::exp(static_cast<double>(row[k]) - m);
        const double logz = std::log(z);
        for (std::int64_t k = 0; k < K; ++k) {
            const double lp = static_cast<double>(row[k]) - m - logz;
            probs[static_cast<std::size_t>(b * K + k)] = static_cast<S>(std::exp(lp));
            loss_acc -= static_cast<double>(td[b * K + k]) * lp;
        }
    }
    TensorT<S> out = TensorT<S>::scalar(static_cast<S>(loss_acc / static_cast<double>(B)));

    if (TensorT<S>::should_record({&logits, &targets})) {
        TensorT<S> l_cap = logits, t_cap = targets;
        auto p_s = std::make_shared<std::vector<S>>(std::move(probs));
        out.record({logits, targets}, [l_cap, t_cap, p_s, B, K](std::span<const S> up) mutable {
            if (!l_cap.needs_grad()) return;
            auto g = l_cap.grad_buffer();
            const S* td = t_cap.data().data();
            const S u = up[0] / static_cast<S>(B);
            for (std::int64_t i = 0; i < B * K; ++i)
                g[i] += u * ((*p_s)[static_cast<std::size_t>(i)] - td[i]);
        });
    }
    return out;
}

}  // namespace cmix
