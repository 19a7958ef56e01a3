#pragma once

#include <algorithm>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "cmix/runtime.hpp"
#include "cmix/tensor.hpp"

namespace cmix {

enum class Padding { same, none };

struct ConvSpec {
    int in_channels = 1;
    int out_channels = 1;
    int kernel_size = 1;  // square
    int stride = 1;
    int groups = 1;
    Padding padding = Padding::none;

    void validate() const {
        if (in_channels < 1 || out_channels < 1 || kernel_size < 1 || stride < 1 || groups < 1)
            throw std::invalid_argument("ConvSpec: all extents must be >= 1");
        if (in_channels % groups != 0 || out_channels % groups != 0)
            throw std::invalid_argument("ConvSpec: channels (" + std::to_string(in_channels) + "->" +
                                        std::to_string(out_channels) + ") not divisible by groups " +
                                        std::to_string(groups));
    }

    bool depthwise() const { return groups == in_channels && groups == out_channels; }
};

struct ConvGeometry {
    std::int64_t out_h = 0, out_w = 0;
    int pad_top = 0, pad_left = 0, pad_bottom = 0, pad_right = 0;
};

// Output extents and zero-padding amounts. Same-padding keeps
// H' = ceil(H/stride); for even kernels the extra pad lands bottom/right.
inline ConvGeometry conv_geometry(const ConvSpec& spec, std::int64_t h, std::int64_t w) {
    const std::int64_t k = spec.kernel_size, s = spec.stride;
    ConvGeometry g;
    if (spec.padding == Padding::none) {
        if (h < k || w < k)
            throw std::invalid_argument("conv2d: input " + std::to_string(h) + "x" + std::to_string(w) +
                                        " smaller than kernel " + std::to_string(k) + " without padding");
        g.out_h = (h - k) / s + 1;
        g.out_w = (w - k) / s + 1;
    } else {
        g.out_h = (h + s - 1) / s;
        g.out_w = (w + s - 1) / s;
        const std::int64_t ph = std::max<std::int64_t>((g.out_h - 1) * s + k - h, 0);
        const std::int64_t pw = std::max<std::int64_t>((g.out_w - 1) * s + k - w, 0);
        g.pad_top = static_cast<int>(ph / 2);
        g.pad_bottom = static_cast<int>(ph - ph / 2);
        g.pad_left = static_cast<int>(pw / 2);
        g.pad_right = static_cast<int>(pw - pw / 2);
    }
    return g;
}

enum class ConvAlgo { automatic, direct, im2col };

namespace detail {

struct ConvDims {
    std::int64_t B, C, H, W, O, K, S, G, Cg, Og, OH, OW;
    int pt, pl;
};

template <typename S>
ConvDims conv_dims(const TensorT<S>& in, const ConvSpec& spec, const ConvGeometry& geo) {
    ConvDims d;
    d.B = in.dim(0);
    d.C = in.dim(1);
    d.H = in.dim(2);
    d.W = in.dim(3);
    d.O = spec.out_channels;
    d.K = spec.kernel_size;
    d.S = spec.stride;
    d.G = spec.groups;
    d.Cg = d.C / d.G;
    d.Og = d.O / d.G;
    d.OH = geo.out_h;
    d.OW = geo.out_w;
    d.pt = geo.pad_top;
    d.pl = geo.pad_left;
    return d;
}

// --- direct path: plain loops, the internal oracle -------------------------

template <typename S>
void conv_direct_fwd(const S* in, const S* w, const S* bias, S* out, const ConvDims& d) {
    for (std::int64_t b = 0; b < d.B; ++b)
        for (std::int64_t o = 0; o < d.O; ++o) {
            const std::int64_t g = o / d.Og;
            for (std::int64_t oh = 0; oh < d.OH; ++oh)
                for (std::int64_t ow = 0; ow < d.OW; ++ow) {
                    S acc = bias ? bias[o] : S(0);
                    for (std::int64_t ci = 0; ci < d.Cg; ++ci)
                        for (std::int64_t kh = 0; kh < d.K; ++kh)
                            for (std::int64_t kw = 0; kw < d.K; ++kw) {
                                const std::int64_t ih = oh * d.S + kh - d.pt;
                                const std::int64_t iw = ow * d.S + kw - d.pl;
                                if (ih < 0 || ih >= d.H || iw < 0 || iw >= d.W) continue;
                                acc += in[((b * d.C + g * d.Cg + ci) * d.H + ih) * d.W + iw] *
                                       w[((o * d.Cg + ci) * d.K + kh) * d.K + kw];
                            }
                    out[((b * d.O + o) * d.OH + oh) * d.OW + ow] = acc;
                }
        }
}

template <typename S>
void conv_direct_bwd(const S* in, const S* w, const S* up, S* gin, S* gw, S* gbias, const ConvDims& d) {
    for (std::int64_t b = 0; b < d.B; ++b)
        for (std::int64_t o = 0; o < d.O; ++o) {
            const std::int64_t g = o / d.Og;
            for (std::int64_t oh = 0; oh < d.OH; ++oh)
                for (std::int64_t ow = 0; ow < d.OW; ++ow) {
                    const S u = up[((b * d.O + o) * d.OH + oh) * d.OW + ow];
                    if (gbias) gbias[o] += u;
                    for (std::int64_t ci = 0; ci < d.Cg; ++ci)
                        for (std::int64_t kh = 0; kh < d.K; ++kh)
                            for (std::int64_t kw = 0; kw < d.K; ++kw) {
                                const std::int64_t ih = oh * d.S + kh - d.pt;
                                const std::int64_t iw = ow * d.S + kw - d.pl;
                                if (ih < 0 || ih >= d.H || iw < 0 || iw >= d.W) continue;
                                const std::int64_t in_idx = ((b * d.C + g * d.Cg + ci) * d.H + ih) * d.W + iw;
                                const std::int64_t w_idx = ((o * d.Cg + ci) * d.K + kh) * d.K + kw;
                                if (gin) gin[in_idx] += u * w[w_idx];
                                if (gw) gw[w_idx] += u * in[in_idx];
                            }
                }
        }
}

// --- im2col + GEMM path -----------------------------------------------------

// Column matrix for one (batch, group): rows Cg*K*K, cols OH*OW, row-major.
template <typename S>
void im2col_fill(const S* in_bg, std::vector<S>& col, const ConvDims& d) {
    col.assign(static_cast<std::size_t>(d.Cg * d.K * d.K * d.OH * d.OW), S(0));
    S* dst = col.data();
    for (std::int64_t ci = 0; ci < d.Cg; ++ci)
        for (std::int64_t kh = 0; kh < d.K; ++kh)
            for (std::int64_t kw = 0; kw < d.K; ++kw)
                for (std::int64_t oh = 0; oh < d.OH; ++oh) {
                    const std::int64_t ih = oh * d.S + kh - d.pt;
                    if (ih < 0 || ih >= d.H) {
                        dst += d.OW;
                        continue;
                    }
                    const S* src_row = in_bg + (ci * d.H + ih) * d.W;
                    for (std::int64_t ow = 0; ow < d.OW; ++ow) {
                        const std::int64_t iw = ow * d.S + kw - d.pl;
                        *dst++ = (iw >= 0 && iw < d.W) ? src_row[iw] : S(0);
                    }
                }
}

// Scatter-add of a column matrix back into one (batch, group) input block.
template <typename S>
void col2im_add(const std::vector<S>& col, S* gin_bg, const ConvDims& d) {
    const S* src = col.data();
    for (std::int64_t ci = 0; ci < d.Cg; ++ci)
        for (std::int64_t kh = 0; kh < d.K; ++kh)
            for (std::int64_t kw = 0; kw < d.K; ++kw)
                for (std::int64_t oh = 0; oh < d.OH; ++oh) {
                    const std::int64_t ih = oh * d.S + kh - d.pt;
                    if (ih < 0 || ih >= d.H) {
                        src += d.OW;
                        continue;
                    }
                    S* dst_row = gin_bg + (ci * d.H + ih) * d.W;
                    for (std::int64_t ow = 0; ow < d.OW; ++ow) {
                        const std::int64_t iw = ow * d.S + kw - d.pl;
                        if (iw >= 0 && iw < d.W) dst_row[iw] += src[ow];
                    }
                    src += d.OW;
                }
}

template <typename S>
void conv_im2col_fwd(const S* in, const S* w, const S* bias, S* out, const ConvDims& d) {
    const std::int64_t ohw = d.OH * d.OW;
    const std::int64_t krows = d.Cg * d.K * d.K;
    runtime::parallel_for(d.B * d.G, [&](std::int64_t bg) {
        const std::int64_t b = bg / d.G, g = bg % d.G;
        static thread_local std::vector<S> col;
        im2col_fill(in + (b * d.C + g * d.Cg) * d.H * d.W, col, d);
        MapConstMat<S> W(w + g * d.Og * krows, d.Og, krows);
        MapConstMat<S> Col(col.data(), krows, ohw);
        MapMat<S> out_blk(out + (b * d.O + g * d.Og) * ohw, d.Og, ohw);
        out_blk.noalias() = W * Col;
        if (bias)
            for (std::int64_t oi = 0; oi < d.Og; ++oi)
                out_blk.row(oi).array() += bias[g * d.Og + oi];
    });
}

template <typename S>
void conv_im2col_bwd(const S* in, const S* w, const S* up, S* gin, S* gw, S* gbias, const ConvDims& d) {
    const std::int64_t ohw = d.OH * d.OW;
    const std::int64_t krows = d.Cg * d.K * d.K;
    if (gin) {
        runtime::parallel_for(d.B * d.G, [&](std::int64_t bg) {
            const std::int64_t b = bg / d.G, g = bg % d.G;
            static thread_local std::vector<S> colgrad;
            colgrad.resize(static_cast<std::size_t>(krows * ohw));
            MapConstMat<S> W(w + g * d.Og * krows, d.Og, krows);
            MapConstMat<S> U(up + (b * d.O + g * d.Og) * ohw, d.Og, ohw);
            MapMat<S> CG(colgrad.data(), krows, ohw);
            CG.noalias() = W.transpose() * U;
            col2im_add(colgrad, gin + (b * d.C + g * d.Cg) * d.H * d.W, d);
        });
    }
    if (gw) {
        // Groups have disjoint weight rows; batch accumulation stays ordered.
        runtime::parallel_for(d.G, [&](std::int64_t g) {
            static thread_local std::vector<S> col;
            MapMat<S> GW(gw + g * d.Og * krows, d.Og, krows);
            for (std::int64_t b = 0; b < d.B; ++b) {
                im2col_fill(in + (b * d.C + g * d.Cg) * d.H * d.W, col, d);
                MapConstMat<S> U(up + (b * d.O + g * d.Og) * ohw, d.Og, ohw);
                MapConstMat<S> Col(col.data(), krows, ohw);
                GW.noalias() += U * Col.transpose();
            }
        });
    }
    if (gbias) {
        runtime::parallel_for(d.O, [&](std::int64_t o) {
            double acc = 0.0;
            for (std::int64_t b = 0; b < d.B; ++b) {
                const S* u = up + (b * d.O + o) * ohw;
                for (std::int64_t i = 0; i < ohw; ++i) acc += static_cast<double>(u[i]);
            }
            gbias[o] += static_cast<S>(acc);
        });
    }
}

// --- pointwise fast path (k=1, stride=1, groups=1): plain GEMM --------------

template <typename S>
void conv_pointwise_fwd(const S* in, const S* w, const S* bias, S* out, const ConvDims& d) {
    const std::int64_t hw = d.H * d.W;
    runtime::parallel_for(d.B, [&](std::int64_t b) {
        MapConstMat<S> W(w, d.O, d.C);
        MapConstMat<S> X(in + b * d.C * hw, d.C, hw);
        MapMat<S> Y(out + b * d.O * hw, d.O, hw);
        Y.noalias() = W * X;
        if (bias)
            for (std::int64_t o = 0; o < d.O; ++o) Y.row(o).array() += bias[o];
    });
}

template <typename S>
void conv_pointwise_bwd(const S* in, const S* w, const S* up, S* gin, S* gw, S* gbias, const ConvDims& d) {
    const std::int64_t hw = d.H * d.W;
    if (gin) {
        runtime::parallel_for(d.B, [&](std::int64_t b) {
            MapConstMat<S> W(w, d.O, d.C);
            MapConstMat<S> U(up + b * d.O * hw, d.O, hw);
            MapMat<S> GX(gin + b * d.C * hw, d.C, hw);
            GX.noalias() += W.transpose() * U;
        });
    }
    if (gw) {
        MapMat<S> GW(gw, d.O, d.C);
        for (std::int64_t b = 0; b < d.B; ++b) {
            MapConstMat<S> U(up + b * d.O * hw, d.O, hw);
            MapConstMat<S> X(in + b * d.C * hw, d.C, hw);
            GW.noalias() += U * X.transpose();
        }
    }
    if (gbias) {
        runtime::parallel_for(d.O, [&](std::int64_t o) {
            double acc = 0.0;
            for (std::int64_t b = 0; b < d.B; ++b) {
                const S* u = up + (b * d.O + o) * hw;
                for (std::int64_t i = 0; i < hw; ++i) acc += static_cast<double>(u[i]);
            }
            gbias[o] += static_cast<S>(acc);
        });
    }
}

// --- depthwise fast path (groups = C = O, stride = 1) -----------------------
// Works on a zero-padded copy of each channel plane; each kernel tap becomes a
// contiguous multiply-accumulate over rows, which vectorizes well even for the
// large kernels ConvMixer favors.

template <typename S>
void depthwise_fwd(const S* in, const S* w, const S* bias, S* out, const ConvDims& d) {
    // Padded plane extents; stride is 1 on this path, so every output row y
    // reads padded rows y..y+K-1.
    const std::int64_t Wp = d.OW - 1 + d.K;
    const std::int64_t Hp = d.OH - 1 + d.K;
    runtime::parallel_for(d.B * d.C, [&](std::int64_t bc) {
        const std::int64_t b = bc / d.C, c = bc % d.C;
        static thread_local std::vector<S> padbuf;
        padbuf.assign(static_cast<std::size_t>(Hp * Wp), S(0));
        const S* src = in + (b * d.C + c) * d.H * d.W;
        for (std::int64_t h = 0; h < d.H; ++h) {
            S* dst = padbuf.data() + (h + d.pt) * Wp + d.pl;
            for (std::int64_t x = 0; x < d.W; ++x) dst[x] = src[h * d.W + x];
        }
        S* dst = out + (b * d.O + c) * d.OH * d.OW;
        const S bv = bias ? bias[c] : S(0);
        for (std::int64_t i = 0; i < d.OH * d.OW; ++i) dst[i] = bv;
        const S* kw_base = w + c * d.K * d.K;
        for (std::int64_t kh = 0; kh < d.K; ++kh)
            for (std::int64_t kw = 0; kw < d.K; ++kw) {
                const S wv = kw_base[kh * d.K + kw];
                for (std::int64_t y = 0; y < d.OH; ++y) {
                    S* orow = dst + y * d.OW;
                    const S* irow = padbuf.data() + (y + kh) * Wp + kw;
                    for (std::int64_t x = 0; x < d.OW; ++x) orow[x] += wv * irow[x];
                }
            }
    });
}

template <typename S>
void depthwise_bwd(const S* in, const S* w, const S* up, S* gin, S* gw, S* gbias, const ConvDims& d) {
    const std::int64_t Wp = d.OW - 1 + d.K;
    const std::int64_t Hp = d.OH - 1 + d.K;
    if (gin) {
        runtime::parallel_for(d.B * d.C, [&](std::int64_t bc) {
            const std::int64_t b = bc / d.C, c = bc % d.C;
            static thread_local std::vector<S> padgrad;
            padgrad.assign(static_cast<std::size_t>(Hp * Wp), S(0));
            const S* u = up + (b * d.O + c) * d.OH * d.OW;
            const S* kw_base = w + c * d.K * d.K;
            for (std::int64_t kh = 0; kh < d.K; ++kh)
                for (std::int64_t kw = 0; kw < d.K; ++kw) {
                    const S wv = kw_base[kh * d.K + kw];
                    for (std::int64_t y = 0; y < d.OH; ++y) {
                        S* prow = padgrad.data() + (y + kh) * Wp + kw;
                        const S* urow = u + y * d.OW;
                        for (std::int64_t x = 0; x < d.OW; ++x) prow[x] += wv * urow[x];
                    }
                }
            S* g = gin + (b * d.C + c) * d.H * d.W;
            for (std::int64_t h = 0; h < d.H; ++h) {
                const S* prow = padgrad.data() + (h + d.pt) * Wp + d.pl;
                for (std::int64_t x = 0; x < d.W; ++x) g[h * d.W + x] += prow[x];
            }
        });
    }
    if (gw || gbias) {
        runtime::parallel_for(d.C, [&](std::int64_t c) {
            static thread_local std::vector<S> padbuf;
            double bias_acc = 0.0;
            for (std::int64_t b = 0; b < d.B; ++b) {
                const S* src = in + (b * d.C + c) * d.H * d.W;
                padbuf.assign(static_cast<std::size_t>(Hp * Wp), S(0));
                for (std::int64_t h = 0; h < d.H; ++h) {
                    S* dst = padbuf.data() + (h + d.pt) * Wp + d.pl;
                    for (std::int64_t x = 0; x < d.W; ++x) dst[x] = src[h * d.W + x];
                }
                const S* u = up + (b * d.O + c) * d.OH * d.OW;
                if (gw) {
                    S* gw_c = gw + c * d.K * d.K;
                    for (std::int64_t kh = 0; kh < d.K; ++kh)
                        for (std::int64_t kw = 0; kw < d.K; ++kw) {
                            double acc = 0.0;
                            for (std::int64_t y = 0; y < d.OH; ++y) {
                                const S* urow = u + y * d.OW;
                                const S* irow = padbuf.data() + (y + kh) * Wp + kw;
                                for (std::int64_t x = 0; x < d.OW; ++x)
                                    acc += static_cast<double>(urow[x]) * static_cast<double>(irow[x]);
                            }
                            gw_c[kh * d.K + kw] += static_cast<S>(acc);
                        }
                }
                if (gbias)
                    for (std::int64_t i = 0; i < d.OH * d.OW; ++i) bias_acc += static_cast<double>(u[i]);
            }
            if (gbias) gbias[c] += static_cast<S>(bias_acc);
        });
    }
}

enum class ConvPath { direct, im2col, pointwise, depthwise };

inline ConvPath choose_conv_path(const ConvSpec& spec, ConvAlgo algo) {
    if (algo == ConvAlgo::direct) return ConvPath::direct;
    if (algo == ConvAlgo::im2col) return ConvPath::im2col;
    if (spec.kernel_size == 1 && spec.stride == 1 && spec.groups == 1) return ConvPath::pointwise;
    if (spec.depthwise() && spec.stride == 1) return ConvPath::depthwise;
    return ConvPath::im2col;
}

}  // namespace detail

// 2-D convolution. input B x C x H x W, weight O x (C/groups) x k x k, bias O.
// Output channel o in group g sees only the input channels of group g. The
// default algorithm picks a pointwise GEMM, the padded depthwise kernel, or
// im2col+GEMM; ConvAlgo::direct forces the naive-loop oracle.
template <typename S>
TensorT<S> conv2d(const TensorT<S>& input, const TensorT<S>& weight, const TensorT<S>& bias,
                  const ConvSpec& spec, ConvAlgo algo = ConvAlgo::automatic) {
    spec.validate();
    if (input.rank() != 4)
        throw std::invalid_argument("conv2d: input must be BxCxHxW, got " + input.shape().str());
    if (input.dim(1) != spec.in_channels)
        throw std::invalid_argument("conv2d: input has " + std::to_string(input.dim(1)) +
                                    " channels, spec expects " + std::to_string(spec.in_channels));
    const Shape expect_w{spec.out_channels, spec.in_channels / spec.groups, spec.kernel_size,
                         spec.kernel_size};
    if (!(weight.shape() == expect_w))
        throw std::invalid_argument("conv2d: weight shape " + weight.shape().str() + ", expected " +
                                    expect_w.str());
    if (!(bias.shape() == Shape{spec.out_channels}))
        throw std::invalid_argument("conv2d: bias shape " + bias.shape().str() + ", expected " +
                                    Shape{spec.out_channels}.str());

    const ConvGeometry geo = conv_geometry(spec, input.dim(2), input.dim(3));
    const detail::ConvDims d = detail::conv_dims(input, spec, geo);
    TensorT<S> out(Shape{d.B, d.O, d.OH, d.OW});

    const detail::ConvPath path = detail::choose_conv_path(spec, algo);
    switch (path) {
        case detail::ConvPath::direct:
            detail::conv_direct_fwd(input.data().data(), weight.data().data(), bias.data().data(),
                                    out.mutable_data().data(), d);
            break;
        case detail::ConvPath::pointwise:
            detail::conv_pointwise_fwd(input.data().data(), weight.data().data(), bias.data().data(),
                                       out.mutable_data().data(), d);
            break;
        case detail::ConvPath::depthwise:
            detail::depthwise_fwd(input.data().data(), weight.data().data(), bias.data().data(),
                                  out.mutable_data().data(), d);
            break;
        case detail::ConvPath::im2col:
            detail::conv_im2col_fwd(input.data().data(), weight.data().data(), bias.data().data(),
                                    out.mutable_data().data(), d);
            break;
    }
    detail::debug_check_finite(out, "conv2d produced non-finite values");

    if (TensorT<S>::should_record({&input, &weight, &bias})) {
        TensorT<S> in_cap = input, w_cap = weight, b_cap = bias;
        out.record({input, weight, bias}, [in_cap, w_cap, b_cap, d, path](std::span<const S> up) mutable {
            S* gin = in_cap.needs_grad() ? in_cap.grad_buffer().data() : nullptr;
            S* gw = w_cap.needs_grad() ? w_cap.grad_buffer().data() : nullptr;
            S* gb = b_cap.needs_grad() ? b_cap.grad_buffer().data() : nullptr;
            const S* in = in_cap.data().data();
            const S* w = w_cap.data().data();
            switch (path) {
                case detail::ConvPath::direct:
                    detail::conv_direct_bwd(in, w, up.data(), gin, gw, gb, d);
                    break;
                case detail::ConvPath::pointwise:
                    detail::conv_pointwise_bwd(in, w, up.data(), gin, gw, gb, d);
                    break;
                case detail::ConvPath::depthwise:
                    detail::depthwise_bwd(in, w, up.data(), gin, gw, gb, d);
                    break;
                case detail::ConvPath::im2col:
                    detail::conv_im2col_bwd(in, w, up.data(), gin, gw, gb, d);
                    break;
            }
        });
    }
    return out;
}

}  // namespace cmix
