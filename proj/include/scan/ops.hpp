#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "scan/tensor.hpp"

// The fixed operation vocabulary of the SCAN networks, each with its exact
// reverse-mode gradient. Kernels are plain nested loops arranged so the inner
// loop runs over the contiguous output-channel axis.

namespace scan::ops {

// ---------------------------------------------------------------------------
// conv2d: stride 1, zero "same" padding, odd kernel extents.
// input [H,W,Cin], kernel [kh,kw,Cin,Cout], bias [Cout] -> [H,W,Cout]
// ---------------------------------------------------------------------------

template <typename T>
void check_conv_shapes(const TensorT<T>& input, const TensorT<T>& kernel,
                       const TensorT<T>& bias) {
    if (input.shape.size() != 3 || kernel.shape.size() != 4)
        throw ShapeError("conv2d: input must be [H,W,Cin] and kernel [kh,kw,Cin,Cout], got " +
                         input.shape_str() + " and " + kernel.shape_str());
    if (kernel.shape[0] % 2 == 0 || kernel.shape[1] % 2 == 0)
        throw ShapeError("conv2d: kernel extents must be odd, got " + kernel.shape_str());
    if (input.shape[2] != kernel.shape[2])
        throw ShapeError("conv2d: input channels " + input.shape_str() +
                         " do not match kernel " + kernel.shape_str());
    if (bias.shape != std::vector<std::int64_t>{kernel.shape[3]})
        throw ShapeError("conv2d: bias shape " + bias.shape_str() + " does not match kernel " +
                         kernel.shape_str());
}

template <typename T>
TensorT<T> conv2d(const TensorT<T>& input, const TensorT<T>& kernel,
                  const TensorT<T>& bias) {
    check_conv_shapes(input, kernel, bias);
    const std::int64_t H = input.shape[0], W = input.shape[1], Cin = input.shape[2];
    const std::int64_t kh = kernel.shape[0], kw = kernel.shape[1], Cout = kernel.shape[3];
    const std::int64_t ph = (kh - 1) / 2, pw = (kw - 1) / 2;

    TensorT<T> out({H, W, Cout});
    const T* in = input.values.data();
    const T* k = kernel.values.data();
    T* o = out.values.data();
    for (std::int64_t y = 0; y < H; ++y) {
        for (std::int64_t x = 0; x < W; ++x) {
            T* acc = o + (y * W + x) * Cout;
            for (std::int64_t c = 0; c < Cout; ++c) acc[c] = bias.values[c];
            for (std::int64_t ky = 0; ky < kh; ++ky) {
                const std::int64_t iy = y + ky - ph;
                if (iy < 0 || iy >= H) continue;
                for (std::int64_t kx = 0; kx < kw; ++kx) {
                    const std::int64_t ix = x + kx - pw;
                    if (ix < 0 || ix >= W) continue;
                    const T* ip = in + (iy * W + ix) * Cin;
                    const T* kp = k + (ky * kw + kx) * Cin * Cout;
                    for (std::int64_t ci = 0; ci < Cin; ++ci) {
                        const T v = ip[ci];
                        const T* kc = kp + ci * Cout;
                        for (std::int64_t c = 0; c < Cout; ++c) acc[c] += v * kc[c];
                    }
                }
            }
        }
    }
    return out;
}

template <typename T>
struct ConvGrads {
    TensorT<T> input;
    TensorT<T> kernel;
    TensorT<T> bias;
};

template <typename T>
ConvGrads<T> conv2d_backward(const TensorT<T>& input, const TensorT<T>& kernel,
                             const TensorT<T>& upstream) {
    if (input.shape.size() != 3 || kernel.shape.size() != 4 ||
        input.shape[2] != kernel.shape[2])
        throw ShapeError("conv2d_backward: bad input/kernel shapes " + input.shape_str() +
                         " / " + kernel.shape_str());
    require_shape(upstream.shape, {input.shape[0], input.shape[1], kernel.shape[3]},
                  "conv2d_backward upstream");
    const std::int64_t H = input.shape[0], W = input.shape[1], Cin = input.shape[2];
    const std::int64_t kh = kernel.shape[0], kw = kernel.shape[1], Cout = kernel.shape[3];
    const std::int64_t ph = (kh - 1) / 2, pw = (kw - 1) / 2;

    ConvGrads<T> g{TensorT<T>(input.shape), TensorT<T>(kernel.shape),
                   TensorT<T>({Cout})};
    const T* in = input.values.data();
    const T* k = kernel.values.data();
    const T* up = upstream.values.data();

    // grad_input gathered per input pixel: d/din[iy,ix,ci] = sum over kernel
    // taps of upstream at the output pixel that read this input through them.
    T* gi = g.input.values.data();
    for (std::int64_t iy = 0; iy < H; ++iy) {
        for (std::int64_t ix = 0; ix < W; ++ix) {
            T* gp = gi + (iy * W + ix) * Cin;
            for (std::int64_t ky = 0; ky < kh; ++ky) {
                const std::int64_t y = iy - ky + ph;
                if (y < 0 || y >= H) continue;
                for (std::int64_t kx = 0; kx < kw; ++kx) {
                    const std::int64_t x = ix - kx + pw;
                    if (x < 0 || x >= W) continue;
                    const T* u = up + (y * W + x) * Cout;
                    const T* kp = k + (ky * kw + kx) * Cin * Cout;
                    for (std::int64_t ci = 0; ci < Cin; ++ci) {
                        const T* kc = kp + ci * Cout;
                        T acc = 0;
                        for (std::int64_t c = 0; c < Cout; ++c) acc += u[c] * kc[c];
                        gp[ci] += acc;
                    }
                }
            }
        }
    }

    T* gk = g.kernel.values.data();
    for (std::int64_t y = 0; y < H; ++y) {
        for (std::int64_t x = 0; x < W; ++x) {
            const T* u = up + (y * W + x) * Cout;
            for (std::int64_t ky = 0; ky < kh; ++ky) {
                const std::int64_t iy = y + ky - ph;
                if (iy < 0 || iy >= H) continue;
                for (std::int64_t kx = 0; kx < kw; ++kx) {
                    const std::int64_t ix = x + kx - pw;
                    if (ix < 0 || ix >= W) continue;
                    const T* ip = in + (iy * W + ix) * Cin;
                    T* kp = gk + (ky * kw + kx) * Cin * Cout;
                    for (std::int64_t ci = 0; ci < Cin; ++ci) {
                        const T v = ip[ci];
                        T* kc = kp + ci * Cout;
                        for (std::int64_t c = 0; c < Cout; ++c) kc[c] += v * u[c];
                    }
                }
            }
        }
    }

    for (std::int64_t y = 0; y < H; ++y)
        for (std::int64_t x = 0; x < W; ++x) {
            const T* u = up + (y * W + x) * Cout;
            for (std::int64_t c = 0; c < Cout; ++c) g.bias.values[c] += u[c];
        }
    return g;
}

// ---------------------------------------------------------------------------
// avg_pool2: 2x2 windows, stride 2. Requires even extents; the resolution
// schedule 400 -> 200 -> 100 -> 50 -> 25 never produces an odd input here.
// ---------------------------------------------------------------------------

template <typename T>
TensorT<T> avg_pool2(const TensorT<T>& input) {
    if (input.shape.size() != 3 || input.shape[0] % 2 != 0 || input.shape[1] % 2 != 0)
        throw ShapeError("avg_pool2: needs [H,W,C] with even H,W, got " + input.shape_str());
    const std::int64_t H = input.shape[0], W = input.shape[1], C = input.shape[2];
    TensorT<T> out({H / 2, W / 2, C});
    for (std::int64_t y = 0; y < H / 2; ++y)
        for (std::int64_t x = 0; x < W / 2; ++x)
            for (std::int64_t c = 0; c < C; ++c) {
                const T s = input.at(2 * y, 2 * x, c) + input.at(2 * y, 2 * x + 1, c) +
                            input.at(2 * y + 1, 2 * x, c) + input.at(2 * y + 1, 2 * x + 1, c);
                out.at(y, x, c) = s * T(0.25);
            }
    return out;
}

template <typename T>
TensorT<T> avg_pool2_backward(const std::vector<std::int64_t>& input_shape,
                              const TensorT<T>& upstream) {
    require_shape(upstream.shape, {input_shape[0] / 2, input_shape[1] / 2, input_shape[2]},
                  "avg_pool2_backward upstream");
    TensorT<T> gi(input_shape);
    const std::int64_t Ho = upstream.shape[0], Wo = upstream.shape[1], C = upstream.shape[2];
    for (std::int64_t y = 0; y < Ho; ++y)
        for (std::int64_t x = 0; x < Wo; ++x)
            for (std::int64_t c = 0; c < C; ++c) {
                const T q = upstream.at(y, x, c) * T(0.25);
                gi.at(2 * y, 2 * x, c) += q;
                gi.at(2 * y, 2 * x + 1, c) += q;
                gi.at(2 * y + 1, 2 * x, c) += q;
                gi.at(2 * y + 1, 2 * x + 1, c) += q;
            }
    return gi;
}

// ---------------------------------------------------------------------------
// transposed_conv2d: adjoint of a strided convolution. Output extents are
// exactly h*stride; kernel extent must be stride or 2*stride, with implicit
// output cropping of (kh - stride) / 2 on each side for the larger kernel.
// ---------------------------------------------------------------------------

template <typename T>
void check_tconv_shapes(const TensorT<T>& input, const TensorT<T>& kernel,
                        const TensorT<T>& bias, std::int64_t stride) {
    if (input.shape.size() != 3 || kernel.shape.size() != 4)
        throw ShapeError("transposed_conv2d: input must be [h,w,Cin], kernel [kh,kw,Cin,Cout]");
    if (stride != 2)
        throw ConfigError("transposed_conv2d: stride must be 2, got " + std::to_string(stride));
    const std::int64_t kh = kernel.shape[0], kw = kernel.shape[1];
    if (kh != kw || (kh != stride && kh != 2 * stride))
        throw ConfigError("transposed_conv2d: kernel " + kernel.shape_str() +
                          " incompatible with stride " + std::to_string(stride));
    if (input.shape[2] != kernel.shape[2])
        throw ShapeError("transposed_conv2d: input channels " + input.shape_str() +
                         " do not match kernel " + kernel.shape_str());
    if (bias.shape != std::vector<std::int64_t>{kernel.shape[3]})
        throw ShapeError("transposed_conv2d: bias shape " + bias.shape_str() + " mismatch");
}

template <typename T>
TensorT<T> transposed_conv2d(const TensorT<T>& input, const TensorT<T>& kernel,
                             const TensorT<T>& bias, std::int64_t stride) {
    check_tconv_shapes(input, kernel, bias, stride);
    const std::int64_t h = input.shape[0], w = input.shape[1], Cin = input.shape[2];
    const std::int64_t kh = kernel.shape[0], Cout = kernel.shape[3];
    const std::int64_t pad = (kh - stride) / 2;
    const std::int64_t Ho = h * stride, Wo = w * stride;

    TensorT<T> out({Ho, Wo, Cout});
    for (std::int64_t y = 0; y < Ho; ++y)
        for (std::int64_t x = 0; x < Wo; ++x) {
            T* o = &out.at(y, x, 0);
            for (std::int64_t c = 0; c < Cout; ++c) o[c] = bias.values[c];
        }
    const T* k = kernel.values.data();
    for (std::int64_t y = 0; y < h; ++y)
        for (std::int64_t x = 0; x < w; ++x) {
            const T* ip = input.values.data() + (y * w + x) * Cin;
            for (std::int64_t ky = 0; ky < kh; ++ky) {
                const std::int64_t oy = y * stride + ky - pad;
                if (oy < 0 || oy >= Ho) continue;
                for (std::int64_t kx = 0; kx < kh; ++kx) {
                    const std::int64_t ox = x * stride + kx - pad;
                    if (ox < 0 || ox >= Wo) continue;
                    T* o = &out.at(oy, ox, 0);
                    const T* kp = k + (ky * kh + kx) * Cin * Cout;
                    for (std::int64_t ci = 0; ci < Cin; ++ci) {
                        const T v = ip[ci];
                        const T* kc = kp + ci * Cout;
                        for (std::int64_t c = 0; c < Cout; ++c) o[c] += v * kc[c];
                    }
                }
            }
        }
    return out;
}

template <typename T>
ConvGrads<T> transposed_conv2d_backward(const TensorT<T>& input, const TensorT<T>& kernel,
                                        const TensorT<T>& upstream, std::int64_t stride) {
    const std::int64_t h = input.shape[0], w = input.shape[1], Cin = input.shape[2];
    const std::int64_t kh = kernel.shape[0], Cout = kernel.shape[3];
    const std::int64_t pad = (kh - stride) / 2;
    const std::int64_t Ho = h * stride, Wo = w * stride;
    require_shape(upstream.shape, {Ho, Wo, Cout}, "transposed_conv2d_backward upstream");

    ConvGrads<T> g{TensorT<T>(input.shape), TensorT<T>(kernel.shape), TensorT<T>({Cout})};
    const T* k = kernel.values.data();
    const T* in = input.values.data();
    for (std::int64_t y = 0; y < h; ++y)
        for (std::int64_t x = 0; x < w; ++x) {
            T* gp = &g.input.at(y, x, 0);
            const T* ip = in + (y * w + x) * Cin;
            for (std::int64_t ky = 0; ky < kh; ++ky) {
                const std::int64_t oy = y * stride + ky - pad;
                if (oy < 0 || oy >= Ho) continue;
                for (std::int64_t kx = 0; kx < kh; ++kx) {
                    const std::int64_t ox = x * stride + kx - pad;
                    if (ox < 0 || ox >= Wo) continue;
                    const T* u = upstream.values.data() + (oy * Wo + ox) * Cout;
                    const T* kp = k + (ky * kh + kx) * Cin * Cout;
                    T* gk = g.kernel.values.data() + (ky * kh + kx) * Cin * Cout;
                    for (std::int64_t ci = 0; ci < Cin; ++ci) {
                        const T* kc = kp + ci * Cout;
                        T* gkc = gk + ci * Cout;
                        T acc = 0;
                        for (std::int64_t c = 0; c < Cout; ++c) {
                            acc += u[c] * kc[c];
                            gkc[c] += ip[ci] * u[c];
                        }
                        gp[ci] += acc;
                    }
                }
            }
        }
    for (std::int64_t y = 0; y < Ho; ++y)
        for (std::int64_t x = 0; x < Wo; ++x) {
            const T* u = upstream.values.data() + (y * Wo + x) * Cout;
            for (std::int64_t c = 0; c < Cout; ++c) g.bias.values[c] += u[c];
        }
    return g;
}

// ---------------------------------------------------------------------------
// Pointwise activations.
// ---------------------------------------------------------------------------

template <typename T>
TensorT<T> relu(const TensorT<T>& input) {
    TensorT<T> out = input;
    for (auto& v : out.values) v = v > T(0) ? v : T(0);
    return out;
}

template <typename T>
TensorT<T> relu_backward(const TensorT<T>& input, const TensorT<T>& upstream) {
    require_shape(upstream.shape, input.shape, "relu_backward upstream");
    TensorT<T> gi(input.shape);
    for (std::size_t i = 0; i < gi.values.size(); ++i)
        gi.values[i] = input.values[i] > T(0) ? upstream.values[i] : T(0);
    return gi;
}

template <typename T>
T sigmoid(T logit) {
    if (logit >= T(0)) {
        const T e = std::exp(-logit);
        return T(1) / (T(1) + e);
    }
    const T e = std::exp(logit);
    return e / (T(1) + e);
}

// Per-pixel softmax over the channel axis with max-subtraction stabilization.
template <typename T>
TensorT<T> softmax_channels(const TensorT<T>& input) {
    if (input.shape.size() != 3)
        throw ShapeError("softmax_channels: needs [H,W,C], got " + input.shape_str());
    const std::int64_t HW = input.shape[0] * input.shape[1], C = input.shape[2];
    TensorT<T> out(input.shape);
    for (std::int64_t p = 0; p < HW; ++p) {
        const T* in = input.values.data() + p * C;
        T* o = out.values.data() + p * C;
        T mx = in[0];
        for (std::int64_t c = 1; c < C; ++c) mx = std::max(mx, in[c]);
        T sum = 0;
        for (std::int64_t c = 0; c < C; ++c) {
            o[c] = std::exp(in[c] - mx);
            sum += o[c];
        }
        const T inv = T(1) / sum;
        for (std::int64_t c = 0; c < C; ++c) o[c] *= inv;
    }
    return out;
}

// Gradient through softmax given the forward output p:
// dlogits_c = p_c * (up_c - sum_k up_k p_k), independently at each pixel.
template <typename T>
TensorT<T> softmax_channels_backward(const TensorT<T>& probs, const TensorT<T>& upstream) {
    require_shape(upstream.shape, probs.shape, "softmax_channels_backward upstream");
    const std::int64_t HW = probs.shape[0] * probs.shape[1], C = probs.shape[2];
    TensorT<T> gi(probs.shape);
    for (std::int64_t p = 0; p < HW; ++p) {
        const T* pr = probs.values.data() + p * C;
        const T* up = upstream.values.data() + p * C;
        T* g = gi.values.data() + p * C;
        T dot = 0;
        for (std::int64_t c = 0; c < C; ++c) dot += up[c] * pr[c];
        for (std::int64_t c = 0; c < C; ++c) g[c] = pr[c] * (up[c] - dot);
    }
    return gi;
}

// ---------------------------------------------------------------------------
// batch_norm_channel: per-channel standardization over every pixel of every
// sample in the batch, then affine. Running statistics use momentum 0.9.
// ---------------------------------------------------------------------------

inline constexpr double kBatchNormEps = 1e-5;
inline constexpr double kBatchNormMomentum = 0.9;

// Train uses batch statistics and advances the running averages. TrainFrozen
// uses batch statistics without touching the running averages; it is how one
// player's forward pass runs inside the other player's optimization step.
enum class NormMode { Train, TrainFrozen, Eval };

template <typename T>
struct BatchNormCache {
    std::vector<T> mean, inv_std;   // per channel
    Batch<T> inputs;                // saved forward inputs (train mode)
    std::int64_t count = 0;         // pixels per channel across the batch
};

template <typename T>
Batch<T> batch_norm_channel(const Batch<T>& inputs, const TensorT<T>& gain,
                            const TensorT<T>& shift, std::vector<T>& running_mean,
                            std::vector<T>& running_var, NormMode mode,
                            BatchNormCache<T>* cache = nullptr) {
    if (inputs.empty()) throw ShapeError("batch_norm_channel: empty batch");
    const std::int64_t C = inputs[0].shape.back();
    require_shape(gain.shape, {C}, "batch_norm gain");
    require_shape(shift.shape, {C}, "batch_norm shift");

    std::vector<T> mean(C, T(0)), var(C, T(0));
    std::int64_t count = 0;
    if (mode != NormMode::Eval) {
        for (const auto& t : inputs) {
            require_shape(t.shape, inputs[0].shape, "batch_norm input");
            const std::int64_t n = t.numel() / C;
            count += n;
            const T* v = t.values.data();
            for (std::int64_t p = 0; p < n; ++p)
                for (std::int64_t c = 0; c < C; ++c) mean[c] += v[p * C + c];
        }
        for (std::int64_t c = 0; c < C; ++c) mean[c] /= T(count);
        for (const auto& t : inputs) {
            const std::int64_t n = t.numel() / C;
            const T* v = t.values.data();
            for (std::int64_t p = 0; p < n; ++p)
                for (std::int64_t c = 0; c < C; ++c) {
                    const T d = v[p * C + c] - mean[c];
                    var[c] += d * d;
                }
        }
        for (std::int64_t c = 0; c < C; ++c) var[c] /= T(count);
        if (mode == NormMode::Train) {
            const T m = T(kBatchNormMomentum);
            for (std::int64_t c = 0; c < C; ++c) {
                running_mean[c] = m * running_mean[c] + (T(1) - m) * mean[c];
                running_var[c] = m * running_var[c] + (T(1) - m) * var[c];
            }
        }
    } else {
        for (std::int64_t c = 0; c < C; ++c) {
            mean[c] = running_mean[c];
            var[c] = running_var[c];
        }
    }

    std::vector<T> inv_std(C);
    for (std::int64_t c = 0; c < C; ++c)
        inv_std[c] = T(1) / std::sqrt(var[c] + T(kBatchNormEps));

    Batch<T> out;
    out.reserve(inputs.size());
    for (const auto& t : inputs) {
        TensorT<T> o(t.shape);
        const std::int64_t n = t.numel() / C;
        for (std::int64_t p = 0; p < n; ++p)
            for (std::int64_t c = 0; c < C; ++c)
                o.values[p * C + c] =
                    gain.values[c] * (t.values[p * C + c] - mean[c]) * inv_std[c] +
                    shift.values[c];
        out.push_back(std::move(o));
    }
    if (cache) {
        cache->mean = std::move(mean);
        cache->inv_std = std::move(inv_std);
        cache->inputs = inputs;
        cache->count = count;
    }
    return out;
}

// Train-mode backward through the batch statistics. Accumulates parameter
// gradients into gain_grad / shift_grad.
template <typename T>
Batch<T> batch_norm_channel_backward(const Batch<T>& upstream, const TensorT<T>& gain,
                                     const BatchNormCache<T>& cache,
                                     TensorT<T>& gain_grad, TensorT<T>& shift_grad) {
    const std::int64_t C = gain.shape[0];
    const std::int64_t M = cache.count;
    std::vector<T> sum_dxhat(C, T(0)), sum_dxhat_xhat(C, T(0));
    for (std::size_t i = 0; i < upstream.size(); ++i) {
        const std::int64_t n = upstream[i].numel() / C;
        const T* u = upstream[i].values.data();
        const T* xin = cache.inputs[i].values.data();
        for (std::int64_t p = 0; p < n; ++p)
            for (std::int64_t c = 0; c < C; ++c) {
                const T xhat = (xin[p * C + c] - cache.mean[c]) * cache.inv_std[c];
                const T dy = u[p * C + c];
                sum_dxhat[c] += dy;
                sum_dxhat_xhat[c] += dy * xhat;
            }
    }
    for (std::int64_t c = 0; c < C; ++c) {
        shift_grad.values[c] += sum_dxhat[c];
        gain_grad.values[c] += sum_dxhat_xhat[c];
    }

    Batch<T> gi;
    gi.reserve(upstream.size());
    for (std::size_t i = 0; i < upstream.size(); ++i) {
        TensorT<T> g(upstream[i].shape);
        const std::int64_t n = upstream[i].numel() / C;
        const T* u = upstream[i].values.data();
        const T* xin = cache.inputs[i].values.data();
        for (std::int64_t p = 0; p < n; ++p)
            for (std::int64_t c = 0; c < C; ++c) {
                const T xhat = (xin[p * C + c] - cache.mean[c]) * cache.inv_std[c];
                const T dxhat = u[p * C + c] * gain.values[c];
                g.values[p * C + c] =
                    cache.inv_std[c] *
                    (dxhat - (gain.values[c] / T(M)) * sum_dxhat[c] -
                     xhat * (gain.values[c] / T(M)) * sum_dxhat_xhat[c]);
            }
        gi.push_back(std::move(g));
    }
    return gi;
}

// Eval-mode backward: the normalization constants are fixed.
template <typename T>
Batch<T> batch_norm_channel_backward_eval(const Batch<T>& upstream, const TensorT<T>& gain,
                                          const std::vector<T>& running_var) {
    const std::int64_t C = gain.shape[0];
    Batch<T> gi;
    gi.reserve(upstream.size());
    for (const auto& u : upstream) {
        TensorT<T> g(u.shape);
        const std::int64_t n = u.numel() / C;
        for (std::int64_t p = 0; p < n; ++p)
            for (std::int64_t c = 0; c < C; ++c)
                g.values[p * C + c] = u.values[p * C + c] * gain.values[c] /
                                      std::sqrt(running_var[c] + T(kBatchNormEps));
        gi.push_back(std::move(g));
    }
    return gi;
}

}  // namespace scan::ops
