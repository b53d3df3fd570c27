#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "scan/layers.hpp"

namespace scan {

// Ordered layer stack with owned parameters.
template <typename T>
class Network {
  public:
    void add(std::unique_ptr<Layer<T>> layer) { layers_.push_back(std::move(layer)); }

    Batch<T> forward(const Batch<T>& in, NormMode mode, bool training) {
        Batch<T> h = in;
        for (auto& l : layers_) h = l->forward(h, mode, training);
        return h;
    }

    Batch<T> backward(const Batch<T>& upstream) {
        Batch<T> g = upstream;
        for (auto it = layers_.rbegin(); it != layers_.rend(); ++it) g = (*it)->backward(g);
        return g;
    }

    std::vector<Param<T>*> params() {
        std::vector<Param<T>*> out;
        for (auto& l : layers_) {
            auto p = l->params();
            out.insert(out.end(), p.begin(), p.end());
        }
        return out;
    }

    void zero_grads() {
        for (auto* p : params())
            std::fill(p->grad.values.begin(), p->grad.values.end(), T(0));
    }

    std::vector<std::pair<std::string, std::vector<T>*>> state_buffers() {
        std::vector<std::pair<std::string, std::vector<T>*>> out;
        for (auto& l : layers_) {
            auto b = l->state_buffers();
            out.insert(out.end(), b.begin(), b.end());
        }
        return out;
    }

    std::vector<LayerSpec> specs() const {
        std::vector<LayerSpec> out;
        for (const auto& l : layers_) {
            auto s = l->specs();
            out.insert(out.end(), s.begin(), s.end());
        }
        return out;
    }

    std::int64_t conv_layer_count() const {
        std::int64_t n = 0;
        for (const auto& l : layers_) n += l->conv_layer_count();
        return n;
    }

    // FNV-1a over the architecture table; checkpoints refuse to load against
    // a different fingerprint.
    std::uint64_t fingerprint() const {
        std::uint64_t h = 14695981039346656037ull;
        for (const auto& s : specs())
            for (char c : s.describe() + "\n") {
                h ^= static_cast<unsigned char>(c);
                h *= 1099511628211ull;
            }
        return h;
    }

  private:
    std::vector<std::unique_ptr<Layer<T>>> layers_;
};

// Exact count of learnable scalars, biases and normalization affines included.
template <typename T>
std::int64_t param_count(Network<T>& net) {
    std::int64_t n = 0;
    for (const auto* p : net.params()) n += p->value.numel();
    return n;
}

inline constexpr std::int64_t kNumClasses = 4;  // left lung, right lung, heart, background
inline constexpr std::int64_t kDefaultResolution = 400;

namespace detail {

inline void check_resolution(std::int64_t r) {
    if (r < 16 || r % 16 != 0)
        throw ConfigError("network resolution must be a positive multiple of 16, got " +
                          std::to_string(r));
}

// Shared down-sampling path: one 7x7 stem, three widening residual blocks at
// halving resolutions, then five interleaved 1x1/3x3 residual blocks at R/16.
template <typename T>
void add_down_path(Network<T>& net, std::int64_t in_ch, std::int64_t r, Rng& rng,
                   const std::string& prefix) {
    net.add(std::make_unique<ConvLayer<T>>(prefix + ".stem", 7, in_ch, 8, r, rng));
    net.add(std::make_unique<AvgPoolLayer<T>>(8, r));
    net.add(std::make_unique<ResBlock<T>>(prefix + ".rb1", 8, 16, 3, 3, r / 2, rng));
    net.add(std::make_unique<AvgPoolLayer<T>>(16, r / 2));
    net.add(std::make_unique<ResBlock<T>>(prefix + ".rb2", 16, 32, 3, 3, r / 4, rng));
    net.add(std::make_unique<AvgPoolLayer<T>>(32, r / 4));
    net.add(std::make_unique<ResBlock<T>>(prefix + ".rb3", 32, 64, 3, 3, r / 8, rng));
    net.add(std::make_unique<AvgPoolLayer<T>>(64, r / 8));
    for (int i = 0; i < 5; ++i)
        net.add(std::make_unique<ResBlock<T>>(prefix + ".deep" + std::to_string(i + 1), 64,
                                              64, 1, 3, r / 16, rng));
}

}  // namespace detail

// Segmentation network S. Emits per-pixel class logits; forward_segment
// applies the channel softmax. 20 convolutional layers, 292,020 parameters
// at any resolution (the schedule is resolution independent).
template <typename T>
struct SegmentorT {
    Network<T> net;
    std::int64_t resolution = kDefaultResolution;
    std::int64_t classes = kNumClasses;
    std::uint64_t seed = 0;

    Batch<T> forward_logits(const Batch<T>& images, NormMode mode, bool training) {
        for (const auto& im : images)
            require_shape(im.shape, {resolution, resolution, 1}, "segmentor input");
        return net.forward(images, mode, training);
    }
};

template <typename T>
struct CriticT {
    Network<T> net;
    std::int64_t resolution = kDefaultResolution;
    bool include_image = false;
    std::uint64_t seed = 0;

    std::int64_t input_channels() const { return include_image ? 5 : 4; }
};

using Segmentor = SegmentorT<float>;
using Critic = CriticT<float>;

template <typename T = float>
SegmentorT<T> build_segmentor(std::uint64_t seed, std::int64_t resolution = kDefaultResolution) {
    detail::check_resolution(resolution);
    SegmentorT<T> s;
    s.resolution = resolution;
    s.seed = seed;
    Rng rng(seed);
    const std::int64_t r = resolution;
    detail::add_down_path(s.net, 1, r, rng, "seg");
    s.net.add(std::make_unique<TransposedConvLayer<T>>("seg.up1", 2, 64, 32, 2, r / 16, rng));
    s.net.add(std::make_unique<ReluLayer<T>>(32, r / 8));
    s.net.add(std::make_unique<TransposedConvLayer<T>>("seg.up2", 2, 32, 16, 2, r / 8, rng));
    s.net.add(std::make_unique<ReluLayer<T>>(16, r / 4));
    s.net.add(std::make_unique<TransposedConvLayer<T>>("seg.up3", 2, 16, 8, 2, r / 4, rng));
    s.net.add(std::make_unique<ReluLayer<T>>(8, r / 2));
    s.net.add(std::make_unique<TransposedConvLayer<T>>("seg.up4", 2, 8, 8, 2, r / 2, rng));
    s.net.add(std::make_unique<ReluLayer<T>>(8, r));
    s.net.add(std::make_unique<ConvLayer<T>>("seg.head1", 1, 8, 8, r, rng));
    s.net.add(std::make_unique<ReluLayer<T>>(8, r));
    s.net.add(std::make_unique<ConvLayer<T>>("seg.head2", 3, 8, 8, r, rng));
    s.net.add(std::make_unique<ReluLayer<T>>(8, r));
    s.net.add(std::make_unique<ConvLayer<T>>("seg.head3", 1, 8, kNumClasses, r, rng));
    return s;
}

// Critic D. Mirrors the segmentor's down path (4- or 5-channel first layer),
// then global average pooling, a 64->1 dense layer, and a sigmoid.
// 281,497 parameters with mask-only input.
template <typename T = float>
CriticT<T> build_critic(std::uint64_t seed, bool include_image = false,
                        std::int64_t resolution = kDefaultResolution) {
    detail::check_resolution(resolution);
    CriticT<T> d;
    d.resolution = resolution;
    d.include_image = include_image;
    d.seed = seed;
    Rng rng(seed);
    detail::add_down_path(d.net, d.input_channels(), resolution, rng, "critic");
    d.net.add(std::make_unique<GlobalAvgPoolLayer<T>>(64, resolution / 16));
    d.net.add(std::make_unique<DenseLayer<T>>("critic.head", 64, 1, rng));
    d.net.add(std::make_unique<SigmoidLayer<T>>());
    return d;
}

// Per-pixel class distribution over {left lung, right lung, heart, background}.
template <typename T>
TensorT<T> forward_segment(SegmentorT<T>& s, const TensorT<T>& image, NormMode mode) {
    Batch<T> logits = s.forward_logits({image}, mode, /*training=*/false);
    return ops::softmax_channels(logits[0]);
}

namespace detail {

template <typename T>
TensorT<T> critic_input(const CriticT<T>& d, const TensorT<T>& mask, const TensorT<T>* image) {
    require_shape(mask.shape, {d.resolution, d.resolution, kNumClasses}, "critic mask input");
    const std::int64_t HW = d.resolution * d.resolution;
    for (std::int64_t p = 0; p < HW; ++p) {
        T sum = 0;
        for (std::int64_t c = 0; c < kNumClasses; ++c)
            sum += mask.values[p * kNumClasses + c];
        if (sum > T(1) + T(1e-5))
            throw ValidationError("critic mask: channel sum " + std::to_string(double(sum)) +
                                  " exceeds 1 at pixel " + std::to_string(p));
    }
    if (!d.include_image) {
        if (image)
            throw ShapeError("critic built for 4-channel input cannot take an image channel");
        return mask;
    }
    if (!image) throw ShapeError("critic built for 5-channel input requires the image");
    require_shape(image->shape, {d.resolution, d.resolution, 1}, "critic image input");
    TensorT<T> in({d.resolution, d.resolution, 5});
    for (std::int64_t p = 0; p < HW; ++p) {
        for (std::int64_t c = 0; c < kNumClasses; ++c)
            in.values[p * 5 + c] = mask.values[p * kNumClasses + c];
        in.values[p * 5 + 4] = image->values[p];
    }
    return in;
}

}  // namespace detail

// Scalar probability that the mask is a ground-truth annotation.
template <typename T>
T forward_critic(CriticT<T>& d, const TensorT<T>& mask, const TensorT<T>* image = nullptr) {
    Batch<T> out = d.net.forward({detail::critic_input(d, mask, image)}, NormMode::Eval,
                                 /*training=*/false);
    return out[0].values[0];
}

}  // namespace scan
