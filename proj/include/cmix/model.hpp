#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "cmix/nn_ops.hpp"
#include "cmix/rng.hpp"

namespace cmix {

enum class NormKind { batchnorm, layernorm };

// The four design parameters (h, d, p, k) plus the ablation switches. The
// defaults reproduce the baseline architecture: residual around the depthwise
// stage only, GELU activations, BatchNorm.
struct ModelConfig {
    int hidden = 256;        // h, width of the patch embeddings
    int depth = 8;           // d, number of mixer blocks
    int patch_size = 1;      // p
    int kernel_size = 9;     // k, depthwise kernel
    int in_channels = 3;
    int n_classes = 10;
    ActivationKind activation = ActivationKind::gelu;
    NormKind norm = NormKind::batchnorm;
    bool residual_depthwise = true;
    bool residual_pointwise = false;

    void validate() const {
        if (hidden < 1 || patch_size < 1 || kernel_size < 1 || in_channels < 1 || n_classes < 1)
            throw std::invalid_argument("ModelConfig: h, p, k, c_in, n_classes must be >= 1");
        if (depth < 0) throw std::invalid_argument("ModelConfig: depth must be >= 0");
    }
};

// Closed-form parameter count:
//   h * (d*(k^2 + h + 6) + c_in*p^2 + n_classes + 3) + n_classes
// counting conv kernels and biases, the norm affine pairs, and the classifier.
// The layernorm variant has the identical count.
inline long long param_count(const ModelConfig& c) {
    c.validate();
    const long long h = c.hidden, d = c.depth, p = c.patch_size, k = c.kernel_size;
    const long long cin = c.in_channels, ncls = c.n_classes;
    return h * (d * (k * k + h + 6) + cin * p * p + ncls + 3) + ncls;
}

// Norm site inside the network. BatchNorm and LayerNorm share the affine pair;
// the running statistics are only live for BatchNorm.
template <typename S>
struct NormLayerT {
    NormKind kind = NormKind::batchnorm;
    BatchNormStateT<S> state;

    TensorT<S> operator()(const TensorT<S>& x, Mode mode) {
        if (kind == NormKind::batchnorm) return batchnorm2d(x, state, mode);
        return layernorm(x, state.gamma, state.beta, state.eps);
    }
};

template <typename S>
struct ConvBlockT {
    TensorT<S> dw_weight, dw_bias;
    NormLayerT<S> dw_norm;
    TensorT<S> pw_weight, pw_bias;
    NormLayerT<S> pw_norm;
};

// ConvMixer: patch embedding, d mixer blocks, global pooling, linear head.
// Layer count and tensor shapes are a pure function of the config; the total
// parameter element count equals param_count(config).
template <typename S>
class ConvMixerT {
public:
    ModelConfig config;
    TensorT<S> patch_weight, patch_bias;
    NormLayerT<S> patch_norm;
    std::vector<ConvBlockT<S>> blocks;
    TensorT<S> cls_weight, cls_bias;

    // Patch embedding (Eq.-1 stem): conv c_in->h, kernel p, stride p, no
    // padding, then activation then norm. Non-divisible inputs truncate.
    TensorT<S> embed(const TensorT<S>& x, Mode mode) {
        ConvSpec spec{config.in_channels, config.hidden, config.patch_size, config.patch_size, 1,
                      Padding::none};
        TensorT<S> z = conv2d(x, patch_weight, patch_bias, spec);
        z = activation(config.activation, z);
        return patch_norm(z, mode);
    }

    // One mixer block: depthwise stage (optionally residual) then pointwise
    // stage (optionally residual).
    TensorT<S> forward_block(int i, const TensorT<S>& x, Mode mode) {
        ConvBlockT<S>& blk = blocks.at(static_cast<std::size_t>(i));
        ConvSpec dw{config.hidden, config.hidden, config.kernel_size, 1, config.hidden, Padding::same};
        TensorT<S> y = conv2d(x, blk.dw_weight, blk.dw_bias, dw);
        y = activation(config.activation, y);
        y = blk.dw_norm(y, mode);
        if (config.residual_depthwise) y = add(y, x);

        ConvSpec pw{config.hidden, config.hidden, 1, 1, 1, Padding::none};
        TensorT<S> z = conv2d(y, blk.pw_weight, blk.pw_bias, pw);
        z = activation(config.activation, z);
        z = blk.pw_norm(z, mode);
        if (config.residual_pointwise) z = add(z, y);
        return z;
    }

    TensorT<S> features(const TensorT<S>& x, Mode mode) {
        TensorT<S> z = embed(x, mode);
        for (int i = 0; i < config.depth; ++i) z = forward_block(i, z, mode);
        return z;
    }

    TensorT<S> forward(const TensorT<S>& x, Mode mode) {
        if (x.rank() != 4) throw std::invalid_argument("forward: input must be BxCxHxW");
        if (x.dim(2) < config.patch_size || x.dim(3) < config.patch_size)
            throw std::invalid_argument("forward: input " + x.shape().str() +
                                        " smaller than one patch (p=" + std::to_string(config.patch_size) + ")");
        TensorT<S> z = features(x, mode);
        z = global_avg_pool(z);
        return linear(z, cls_weight, cls_bias);
    }

    std::vector<std::pair<std::string, TensorT<S>>> named_parameters() {
        std::vector<std::pair<std::string, TensorT<S>>> out;
        out.emplace_back("patch_embed.weight", patch_weight);
        out.emplace_back("patch_embed.bias", patch_bias);
        out.emplace_back("patch_embed.norm.gamma", patch_norm.state.gamma);
        out.emplace_back("patch_embed.norm.beta", patch_norm.state.beta);
        for (std::size_t i = 0; i < blocks.size(); ++i) {
            const std::string pre = "blocks." + std::to_string(i) + ".";
            out.emplace_back(pre + "depthwise.weight", blocks[i].dw_weight);
            out.emplace_back(pre + "depthwise.bias", blocks[i].dw_bias);
            out.emplace_back(pre + "depthwise.norm.gamma", blocks[i].dw_norm.state.gamma);
            out.emplace_back(pre + "depthwise.norm.beta", blocks[i].dw_norm.state.beta);
            out.emplace_back(pre + "pointwise.weight", blocks[i].pw_weight);
            out.emplace_back(pre + "pointwise.bias", blocks[i].pw_bias);
            out.emplace_back(pre + "pointwise.norm.gamma", blocks[i].pw_norm.state.gamma);
            out.emplace_back(pre + "pointwise.norm.beta", blocks[i].pw_norm.state.beta);
        }
        out.emplace_back("classifier.weight", cls_weight);
        out.emplace_back("classifier.bias", cls_bias);
        return out;
    }

    // BatchNorm running statistics (empty for the layernorm variant).
    std::vector<std::pair<std::string, TensorT<S>>> named_buffers() {
        std::vector<std::pair<std::string, TensorT<S>>> out;
        if (config.norm != NormKind::batchnorm) return out;
        out.emplace_back("patch_embed.norm.running_mean", patch_norm.state.running_mean);
        out.emplace_back("patch_embed.norm.running_var", patch_norm.state.running_var);
        for (std::size_t i = 0; i < blocks.size(); ++i) {
            const std::string pre = "blocks." + std::to_string(i) + ".";
            out.emplace_back(pre + "depthwise.norm.running_mean", blocks[i].dw_norm.state.running_mean);
            out.emplace_back(pre + "depthwise.norm.running_var", blocks[i].dw_norm.state.running_var);
            out.emplace_back(pre + "pointwise.norm.running_mean", blocks[i].pw_norm.state.running_mean);
            out.emplace_back(pre + "pointwise.norm.running_var", blocks[i].pw_norm.state.running_var);
        }
        return out;
    }

    std::vector<TensorT<S>> parameters() {
        std::vector<TensorT<S>> out;
        for (auto& [name, t] : named_parameters()) out.push_back(t);
        return out;
    }

    void zero_grad() {
        for (auto& t : parameters()) t.zero_grad();
    }

    std::int64_t parameter_count() {
        std::int64_t n = 0;
        for (auto& [name, t] : named_parameters()) n += t.numel();
        return n;
    }
};

using ConvMixer = ConvMixerT<float>;

// Deterministic construction: conv and linear weights ~ uniform(-a, a) with
// a = 1/sqrt(fan_in), biases 0, norm gamma 1 / beta 0. Equal seeds give
// bitwise-identical parameters.
template <typename S>
ConvMixerT<S> build_convmixer(const ModelConfig& config, std::uint64_t seed) {
    config.validate();
    ConvMixerT<S> m;
    m.config = config;
    const std::int64_t h = config.hidden, k = config.kernel_size, p = config.patch_size;
    const std::int64_t cin = config.in_channels, ncls = config.n_classes;

    Rng rng(seed);
    auto fill_uniform = [&rng](TensorT<S>& t, std::int64_t fan_in) {
        const double a = 1.0 / std::sqrt(static_cast<double>(fan_in));
        for (S& v : t.mutable_data()) v = static_cast<S>(rng.uniform(-a, a));
    };
    auto make_norm = [&config, h]() {
        NormLayerT<S> n;
        n.kind = config.norm;
        n.state = BatchNormStateT<S>::init(h);
        return n;
    };

    m.patch_weight = TensorT<S>(Shape{h, cin, p, p}, true);
    fill_uniform(m.patch_weight, cin * p * p);
    m.patch_bias = TensorT<S>(Shape{h}, true);
    m.patch_norm = make_norm();

    m.blocks.resize(static_cast<std::size_t>(config.depth));
    for (auto& blk : m.blocks) {
        blk.dw_weight = TensorT<S>(Shape{h, 1, k, k}, true);
        fill_uniform(blk.dw_weight, k * k);
        blk.dw_bias = TensorT<S>(Shape{h}, true);
        blk.dw_norm = make_norm();
        blk.pw_weight = TensorT<S>(Shape{h, h, 1, 1}, true);
        fill_uniform(blk.pw_weight, h);
        blk.pw_bias = TensorT<S>(Shape{h}, true);
        blk.pw_norm = make_norm();
    }

    m.cls_weight = TensorT<S>(Shape{h, ncls}, true);
    fill_uniform(m.cls_weight, h);
    m.cls_bias = TensorT<S>(Shape{ncls}, true);
    return m;
}

}  // namespace cmix
