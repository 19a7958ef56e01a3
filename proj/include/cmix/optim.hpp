#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <vector>

#include "cmix/tensor.hpp"

namespace cmix {

struct AdamWConfig {
    double lr_peak = 0.01;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;

    void validate() const {
        if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0)
            throw std::invalid_argument("AdamWConfig: betas must lie in [0, 1)");
        if (eps <= 0.0) throw std::invalid_argument("AdamWConfig: eps must be > 0");
        if (weight_decay < 0.0) throw std::invalid_argument("AdamWConfig: weight_decay must be >= 0");
    }
};

struct ScheduleConfig {
    long long total_steps = 1;
    double lr_peak = 0.01;
};

// Triangular schedule: linear ramp 0 -> lr_peak over [0, T/2], then linear
// decay back to 0 over [T/2, T].
inline double lr_at(long long t, const ScheduleConfig& sched) {
    if (sched.total_steps < 1) throw std::invalid_argument("lr_at: total_steps must be >= 1");
    if (t < 0 || t > sched.total_steps)
        throw std::invalid_argument("lr_at: step " + std::to_string(t) + " outside [0, " +
                                    std::to_string(sched.total_steps) + "]");
    const double frac = static_cast<double>(t) / static_cast<double>(sched.total_steps);
    return sched.lr_peak * (1.0 - std::abs(1.0 - 2.0 * frac));
}

template <typename S>
struct OptimizerStateT {
    std::vector<TensorT<S>> m, v;  // first/second moments, mirroring the params
    long long step = 0;

    static OptimizerStateT init(const std::vector<TensorT<S>>& params) {
        OptimizerStateT st;
        st.m.reserve(params.size());
        st.v.reserve(params.size());
        for (const auto& p : params) {
            st.m.push_back(TensorT<S>::zeros(p.shape()));
            st.v.push_back(TensorT<S>::zeros(p.shape()));
        }
        return st;
    }
};

using OptimizerState = OptimizerStateT<float>;

// Rescales all gradients jointly so their concatenated L2 norm does not exceed
// max_norm. Returns the pre-clip norm. Parameters without a populated gradient
// are treated as zero-gradient.
template <typename S>
double clip_grad_global_norm(std::vector<TensorT<S>>& params, double max_norm) {
    if (max_norm <= 0.0) throw std::invalid_argument("clip_grad_global_norm: max_norm must be > 0");
    double sq = 0.0;
    for (auto& p : params) {
        if (!p.has_grad()) continue;
        for (S g : p.grad()) sq += static_cast<double>(g) * static_cast<double>(g);
    }
    const double norm = std::sqrt(sq);
    if (norm > max_norm) {
        const S scale = static_cast<S>(max_norm / norm);
        for (auto& p : params) {
            if (!p.has_grad()) continue;
            auto g = p.grad_buffer();
            for (S& v : g) v *= scale;
        }
    }
    return norm;
}

// One AdamW step with decoupled weight decay: moments update from the raw
// gradient, bias-corrected, and the decay term lr*wd*theta is subtracted from
// the pre-step parameter rather than folded into the gradient. An optional
// mask (1 = decay) exempts parameters from the decay term.
template <typename S>
void adamw_step(std::vector<TensorT<S>>& params, OptimizerStateT<S>& state, const AdamWConfig& cfg,
                double lr, std::span<const std::uint8_t> decay_mask = {}) {
    cfg.validate();
    if (lr < 0.0) throw std::invalid_argument("adamw_step: lr must be >= 0");
    if (params.size() != state.m.size() || params.size() != state.v.size())
        throw std::invalid_argument("adamw_step: state does not mirror the parameter list");
    if (!decay_mask.empty() && decay_mask.size() != params.size())
        throw std::invalid_argument("adamw_step: decay mask length mismatch");

    state.step += 1;
    const double b1 = cfg.beta1, b2 = cfg.beta2;
    const double bc1 = 1.0 - std::pow(b1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(b2, static_cast<double>(state.step));

    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        auto theta = params[pi].mutable_data();
        auto m = state.m[pi].mutable_data();
        auto v = state.v[pi].mutable_data();
        const bool has_g = params[pi].has_grad();
        const double wd = (decay_mask.empty() || decay_mask[pi]) ? cfg.weight_decay : 0.0;
        std::span<const S> g;
        if (has_g) g = params[pi].grad();
        for (std::size_t i = 0; i < theta.size(); ++i) {
            const double gi = has_g ? static_cast<double>(g[i]) : 0.0;
            const double mi = b1 * static_cast<double>(m[i]) + (1.0 - b1) * gi;
            const double vi = b2 * static_cast<double>(v[i]) + (1.0 - b2) * gi * gi;
            m[i] = static_cast<S>(mi);
            v[i] = static_cast<S>(vi);
            const double mhat = mi / bc1;
            const double vhat = vi / bc2;
            const double t0 = static_cast<double>(theta[i]);
            theta[i] = static_cast<S>(t0 - lr * mhat / (std::sqrt(vhat) + cfg.eps) - lr * wd * t0);
        }
    }
}

}  // namespace cmix
