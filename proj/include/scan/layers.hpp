#pragma once

#include <cstdint>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "scan/adam.hpp"
#include "scan/ops.hpp"
#include "scan/tensor.hpp"

namespace scan {

using ops::NormMode;

// One row of the architecture table. The description string feeds the
// checkpoint fingerprint, so it must be stable across builds.
struct LayerSpec {
    std::string kind;
    std::int64_t kh = 0, kw = 0;
    std::int64_t in_ch = 0, out_ch = 0;
    std::int64_t resolution = 0;  // spatial extent at this layer's input

    std::string describe() const {
        return kind + " " + std::to_string(kh) + "x" + std::to_string(kw) + " " +
               std::to_string(in_ch) + "->" + std::to_string(out_ch) + " @" +
               std::to_string(resolution);
    }
};

using Rng = std::mt19937_64;

template <typename T>
class Layer {
  public:
    virtual ~Layer() = default;
    // Runs the batch forward. When training is true the layer caches whatever
    // backward needs; eval-only forward keeps no activations.
    virtual Batch<T> forward(const Batch<T>& in, NormMode mode, bool training) = 0;
    virtual Batch<T> backward(const Batch<T>& upstream) = 0;
    virtual std::vector<Param<T>*> params() { return {}; }
    // Non-learnable persistent state (batch-norm running statistics).
    virtual std::vector<std::pair<std::string, std::vector<T>*>> state_buffers() { return {}; }
    virtual std::vector<LayerSpec> specs() const = 0;
    virtual std::int64_t conv_layer_count() const { return 0; }
};

namespace detail {

// Fan-in-scaled Gaussian initialization for rectified units.
template <typename T>
void he_init(TensorT<T>& t, std::int64_t fan_in, Rng& rng) {
    std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / double(fan_in)));
    for (auto& v : t.values) v = T(dist(rng));
}

}  // namespace detail

template <typename T>
class ConvLayer final : public Layer<T> {
  public:
    ConvLayer(std::string name, std::int64_t k, std::int64_t in_ch, std::int64_t out_ch,
              std::int64_t resolution, Rng& rng)
        : res_(resolution) {
        kernel_.name = name + ".kernel";
        kernel_.value = TensorT<T>({k, k, in_ch, out_ch});
        kernel_.grad = TensorT<T>(kernel_.value.shape);
        detail::he_init(kernel_.value, k * k * in_ch, rng);
        bias_.name = name + ".bias";
        bias_.value = TensorT<T>({out_ch});
        bias_.grad = TensorT<T>({out_ch});
    }

    Batch<T> forward(const Batch<T>& in, NormMode, bool training) override {
        if (training) cached_in_ = in;
        Batch<T> out;
        out.reserve(in.size());
        for (const auto& t : in) out.push_back(ops::conv2d(t, kernel_.value, bias_.value));
        return out;
    }

    Batch<T> backward(const Batch<T>& upstream) override {
        Batch<T> gi;
        gi.reserve(upstream.size());
        for (std::size_t i = 0; i < upstream.size(); ++i) {
            auto g = ops::conv2d_backward(cached_in_[i], kernel_.value, upstream[i]);
            for (std::size_t j = 0; j < g.kernel.values.size(); ++j)
                kernel_.grad.values[j] += g.kernel.values[j];
            for (std::size_t j = 0; j < g.bias.values.size(); ++j)
                bias_.grad.values[j] += g.bias.values[j];
            gi.push_back(std::move(g.input));
        }
        return gi;
    }

    std::vector<Param<T>*> params() override { return {&kernel_, &bias_}; }

    std::vector<LayerSpec> specs() const override {
        return {{"conv", kernel_.value.shape[0], kernel_.value.shape[1],
                 kernel_.value.shape[2], kernel_.value.shape[3], res_}};
    }

    std::int64_t conv_layer_count() const override { return 1; }

  private:
    Param<T> kernel_, bias_;
    Batch<T> cached_in_;
    std::int64_t res_;
};

template <typename T>
class TransposedConvLayer final : public Layer<T> {
  public:
    TransposedConvLayer(std::string name, std::int64_t k, std::int64_t in_ch,
                        std::int64_t out_ch, std::int64_t stride, std::int64_t resolution,
                        Rng& rng)
        : stride_(stride), res_(resolution) {
        if (k != stride && k != 2 * stride)
            throw ConfigError("transposed conv '" + name + "': kernel " + std::to_string(k) +
                              " incompatible with stride " + std::to_string(stride));
        kernel_.name = name + ".kernel";
        kernel_.value = TensorT<T>({k, k, in_ch, out_ch});
        kernel_.grad = TensorT<T>(kernel_.value.shape);
        detail::he_init(kernel_.value, k * k * in_ch, rng);
        bias_.name = name + ".bias";
        bias_.value = TensorT<T>({out_ch});
        bias_.grad = TensorT<T>({out_ch});
    }

    Batch<T> forward(const Batch<T>& in, NormMode, bool training) override {
        if (training) cached_in_ = in;
        Batch<T> out;
        out.reserve(in.size());
        for (const auto& t : in)
            out.push_back(ops::transposed_conv2d(t, kernel_.value, bias_.value, stride_));
        return out;
    }

    Batch<T> backward(const Batch<T>& upstream) override {
        Batch<T> gi;
        gi.reserve(upstream.size());
        for (std::size_t i = 0; i < upstream.size(); ++i) {
            auto g = ops::transposed_conv2d_backward(cached_in_[i], kernel_.value,
                                                     upstream[i], stride_);
            for (std::size_t j = 0; j < g.kernel.values.size(); ++j)
                kernel_.grad.values[j] += g.kernel.values[j];
            for (std::size_t j = 0; j < g.bias.values.size(); ++j)
                bias_.grad.values[j] += g.bias.values[j];
            gi.push_back(std::move(g.input));
        }
        return gi;
    }

    std::vector<Param<T>*> params() override { return {&kernel_, &bias_}; }

    std::vector<LayerSpec> specs() const override {
        return {{"transposed_conv", kernel_.value.shape[0], kernel_.value.shape[1],
                 kernel_.value.shape[2], kernel_.value.shape[3], res_}};
    }

  private:
    Param<T> kernel_, bias_;
    Batch<T> cached_in_;
    std::int64_t stride_, res_;
};

template <typename T>
class AvgPoolLayer final : public Layer<T> {
  public:
    AvgPoolLayer(std::int64_t channels, std::int64_t resolution)
        : ch_(channels), res_(resolution) {}

    Batch<T> forward(const Batch<T>& in, NormMode, bool training) override {
        if (training) in_shape_ = in.empty() ? std::vector<std::int64_t>{} : in[0].shape;
        Batch<T> out;
        out.reserve(in.size());
        for (const auto& t : in) out.push_back(ops::avg_pool2(t));
        return out;
    }

    Batch<T> backward(const Batch<T>& upstream) override {
        Batch<T> gi;
        gi.reserve(upstream.size());
        for (const auto& u : upstream) gi.push_back(ops::avg_pool2_backward(in_shape_, u));
        return gi;
    }

    std::vector<LayerSpec> specs() const override {
        return {{"avg_pool", 2, 2, ch_, ch_, res_}};
    }

  private:
    std::vector<std::int64_t> in_shape_;
    std::int64_t ch_, res_;
};

template <typename T>
class ReluLayer final : public Layer<T> {
  public:
    ReluLayer(std::int64_t channels, std::int64_t resolution) : ch_(channels), res_(resolution) {}

    Batch<T> forward(const Batch<T>& in, NormMode, bool training) override {
        if (training) cached_in_ = in;
        Batch<T> out;
        out.reserve(in.size());
        for (const auto& t : in) out.push_back(ops::relu(t));
        return out;
    }

    Batch<T> backward(const Batch<T>& upstream) override {
        Batch<T> gi;
        gi.reserve(upstream.size());
        for (std::size_t i = 0; i < upstream.size(); ++i)
            gi.push_back(ops::relu_backward(cached_in_[i], upstream[i]));
        return gi;
    }

    std::vector<LayerSpec> specs() const override { return {{"relu", 0, 0, ch_, ch_, res_}}; }

  private:
    Batch<T> cached_in_;
    std::int64_t ch_, res_;
};

template <typename T>
class BatchNormLayer final : public Layer<T> {
  public:
    BatchNormLayer(std::string name, std::int64_t channels, std::int64_t resolution)
        : res_(resolution) {
        gain_.name = name + ".gain";
        gain_.value = TensorT<T>({channels});
        std::fill(gain_.value.values.begin(), gain_.value.values.end(), T(1));
        gain_.grad = TensorT<T>({channels});
        shift_.name = name + ".shift";
        shift_.value = TensorT<T>({channels});
        shift_.grad = TensorT<T>({channels});
        running_mean_.assign(static_cast<std::size_t>(channels), T(0));
        running_var_.assign(static_cast<std::size_t>(channels), T(1));
    }

    Batch<T> forward(const Batch<T>& in, NormMode mode, bool training) override {
        last_mode_ = mode;
        return ops::batch_norm_channel(in, gain_.value, shift_.value, running_mean_,
                                       running_var_, mode, training ? &cache_ : nullptr);
    }

    Batch<T> backward(const Batch<T>& upstream) override {
        if (last_mode_ != NormMode::Eval)
            return ops::batch_norm_channel_backward(upstream, gain_.value, cache_,
                                                    gain_.grad, shift_.grad);
        return ops::batch_norm_channel_backward_eval(upstream, gain_.value, running_var_);
    }

    std::vector<Param<T>*> params() override { return {&gain_, &shift_}; }

    std::vector<std::pair<std::string, std::vector<T>*>> state_buffers() override {
        return {{gain_.name + ".running_mean", &running_mean_},
                {gain_.name + ".running_var", &running_var_}};
    }

    std::vector<LayerSpec> specs() const override {
        const std::int64_t c = gain_.value.shape[0];
        return {{"batch_norm", 0, 0, c, c, res_}};
    }

    std::vector<T>& running_mean() { return running_mean_; }
    std::vector<T>& running_var() { return running_var_; }

  private:
    Param<T> gain_, shift_;
    std::vector<T> running_mean_, running_var_;
    ops::BatchNormCache<T> cache_;
    NormMode last_mode_ = NormMode::Train;
    std::int64_t res_;
};

// Pre-activation residual block: norm -> relu -> conv, twice, plus an
// identity skip. A width increase happens in the first convolution; the skip
// then pads the extra channels with zeros, so the block itself adds no
// projection parameters.
template <typename T>
class ResBlock final : public Layer<T> {
  public:
    ResBlock(std::string name, std::int64_t in_ch, std::int64_t out_ch, std::int64_t k1,
             std::int64_t k2, std::int64_t resolution, Rng& rng)
        : in_ch_(in_ch),
          out_ch_(out_ch),
          bn1_(name + ".bn1", in_ch, resolution),
          relu1_(in_ch, resolution),
          conv1_(name + ".conv1", k1, in_ch, out_ch, resolution, rng),
          bn2_(name + ".bn2", out_ch, resolution),
          relu2_(out_ch, resolution),
          conv2_(name + ".conv2", k2, out_ch, out_ch, resolution, rng) {
        if (out_ch < in_ch)
            throw ConfigError("resblock '" + name + "': cannot narrow " +
                              std::to_string(in_ch) + "->" + std::to_string(out_ch));
    }

    Batch<T> forward(const Batch<T>& in, NormMode mode, bool training) override {
        Batch<T> h = bn1_.forward(in, mode, training);
        h = relu1_.forward(h, mode, training);
        h = conv1_.forward(h, mode, training);
        h = bn2_.forward(h, mode, training);
        h = relu2_.forward(h, mode, training);
        h = conv2_.forward(h, mode, training);
        for (std::size_t i = 0; i < h.size(); ++i) add_skip(h[i], in[i]);
        return h;
    }

    Batch<T> backward(const Batch<T>& upstream) override {
        Batch<T> g = conv2_.backward(upstream);
        g = relu2_.backward(g);
        g = bn2_.backward(g);
        g = conv1_.backward(g);
        g = relu1_.backward(g);
        g = bn1_.backward(g);
        // The skip path contributes the upstream gradient on the channels it
        // carried through; padded channels carry nothing back.
        for (std::size_t i = 0; i < g.size(); ++i) {
            const auto& u = upstream[i];
            auto& gi = g[i];
            const std::int64_t n = gi.numel() / in_ch_;
            for (std::int64_t p = 0; p < n; ++p)
                for (std::int64_t c = 0; c < in_ch_; ++c)
                    gi.values[p * in_ch_ + c] += u.values[p * out_ch_ + c];
        }
        return g;
    }

    std::vector<Param<T>*> params() override {
        std::vector<Param<T>*> out;
        for (auto* l : members()) {
            auto p = l->params();
            out.insert(out.end(), p.begin(), p.end());
        }
        return out;
    }

    std::vector<std::pair<std::string, std::vector<T>*>> state_buffers() override {
        std::vector<std::pair<std::string, std::vector<T>*>> out;
        for (auto* l : members()) {
            auto b = l->state_buffers();
            out.insert(out.end(), b.begin(), b.end());
        }
        return out;
    }

    std::vector<LayerSpec> specs() const override {
        std::vector<LayerSpec> out;
        for (const auto* l : const_cast<ResBlock*>(this)->members()) {
            auto s = l->specs();
            for (auto& e : s) e.kind = "resblock." + e.kind;
            out.insert(out.end(), s.begin(), s.end());
        }
        return out;
    }

    std::int64_t conv_layer_count() const override { return 2; }

  private:
    std::vector<Layer<T>*> members() {
        return {&bn1_, &relu1_, &conv1_, &bn2_, &relu2_, &conv2_};
    }

    void add_skip(TensorT<T>& out, const TensorT<T>& in) const {
        const std::int64_t n = out.numel() / out_ch_;
        for (std::int64_t p = 0; p < n; ++p)
            for (std::int64_t c = 0; c < in_ch_; ++c)
                out.values[p * out_ch_ + c] += in.values[p * in_ch_ + c];
    }

    std::int64_t in_ch_, out_ch_;
    BatchNormLayer<T> bn1_;
    ReluLayer<T> relu1_;
    ConvLayer<T> conv1_;
    BatchNormLayer<T> bn2_;
    ReluLayer<T> relu2_;
    ConvLayer<T> conv2_;
};

// Reduces [H,W,C] to [1,1,C] by spatial averaging.
template <typename T>
class GlobalAvgPoolLayer final : public Layer<T> {
  public:
    GlobalAvgPoolLayer(std::int64_t channels, std::int64_t resolution)
        : ch_(channels), res_(resolution) {}

    Batch<T> forward(const Batch<T>& in, NormMode, bool training) override {
        if (training) in_shape_ = in.empty() ? std::vector<std::int64_t>{} : in[0].shape;
        Batch<T> out;
        out.reserve(in.size());
        for (const auto& t : in) {
            const std::int64_t n = t.numel() / ch_;
            TensorT<T> o({1, 1, ch_});
            for (std::int64_t p = 0; p < n; ++p)
                for (std::int64_t c = 0; c < ch_; ++c) o.values[c] += t.values[p * ch_ + c];
            for (std::int64_t c = 0; c < ch_; ++c) o.values[c] /= T(n);
            out.push_back(std::move(o));
        }
        return out;
    }

    Batch<T> backward(const Batch<T>& upstream) override {
        Batch<T> gi;
        gi.reserve(upstream.size());
        const std::int64_t n = TensorT<T>::numel_of(in_shape_) / ch_;
        for (const auto& u : upstream) {
            TensorT<T> g(in_shape_);
            for (std::int64_t p = 0; p < n; ++p)
                for (std::int64_t c = 0; c < ch_; ++c)
                    g.values[p * ch_ + c] = u.values[c] / T(n);
            gi.push_back(std::move(g));
        }
        return gi;
    }

    std::vector<LayerSpec> specs() const override {
        return {{"global_pool", 0, 0, ch_, ch_, res_}};
    }

  private:
    std::vector<std::int64_t> in_shape_;
    std::int64_t ch_, res_;
};

// Fully connected [1,1,Cin] -> [1,1,Cout].
template <typename T>
class DenseLayer final : public Layer<T> {
  public:
    DenseLayer(std::string name, std::int64_t in_ch, std::int64_t out_ch, Rng& rng)
        : in_ch_(in_ch), out_ch_(out_ch) {
        weight_.name = name + ".weight";
        weight_.value = TensorT<T>({in_ch, out_ch});
        weight_.grad = TensorT<T>(weight_.value.shape);
        detail::he_init(weight_.value, in_ch, rng);
        bias_.name = name + ".bias";
        bias_.value = TensorT<T>({out_ch});
        bias_.grad = TensorT<T>({out_ch});
    }

    Batch<T> forward(const Batch<T>& in, NormMode, bool training) override {
        if (training) cached_in_ = in;
        Batch<T> out;
        out.reserve(in.size());
        for (const auto& t : in) {
            require_shape(t.shape, {1, 1, in_ch_}, "dense input");
            TensorT<T> o({1, 1, out_ch_});
            for (std::int64_t j = 0; j < out_ch_; ++j) {
                T acc = bias_.value.values[j];
                for (std::int64_t i = 0; i < in_ch_; ++i)
                    acc += t.values[i] * weight_.value.values[i * out_ch_ + j];
                o.values[j] = acc;
            }
            out.push_back(std::move(o));
        }
        return out;
    }

    Batch<T> backward(const Batch<T>& upstream) override {
        Batch<T> gi;
        gi.reserve(upstream.size());
        for (std::size_t s = 0; s < upstream.size(); ++s) {
            const auto& u = upstream[s];
            TensorT<T> g({1, 1, in_ch_});
            for (std::int64_t i = 0; i < in_ch_; ++i) {
                T acc = 0;
                for (std::int64_t j = 0; j < out_ch_; ++j) {
                    acc += u.values[j] * weight_.value.values[i * out_ch_ + j];
                    weight_.grad.values[i * out_ch_ + j] +=
                        cached_in_[s].values[i] * u.values[j];
                }
                g.values[i] = acc;
            }
            for (std::int64_t j = 0; j < out_ch_; ++j) bias_.grad.values[j] += u.values[j];
            gi.push_back(std::move(g));
        }
        return gi;
    }

    std::vector<Param<T>*> params() override { return {&weight_, &bias_}; }

    std::vector<LayerSpec> specs() const override {
        return {{"dense", 1, 1, in_ch_, out_ch_, 1}};
    }

  private:
    Param<T> weight_, bias_;
    Batch<T> cached_in_;
    std::int64_t in_ch_, out_ch_;
};

// Maps the [1,1,1] logit to a probability strictly inside (0,1).
template <typename T>
class SigmoidLayer final : public Layer<T> {
  public:
    Batch<T> forward(const Batch<T>& in, NormMode, bool training) override {
        Batch<T> out;
        out.reserve(in.size());
        for (const auto& t : in) {
            TensorT<T> o(t.shape);
            for (std::size_t i = 0; i < t.values.size(); ++i)
                o.values[i] = ops::sigmoid(t.values[i]);
            out.push_back(std::move(o));
        }
        if (training) cached_out_ = out;
        return out;
    }

    Batch<T> backward(const Batch<T>& upstream) override {
        Batch<T> gi;
        gi.reserve(upstream.size());
        for (std::size_t s = 0; s < upstream.size(); ++s) {
            TensorT<T> g(upstream[s].shape);
            for (std::size_t i = 0; i < g.values.size(); ++i) {
                const T y = cached_out_[s].values[i];
                g.values[i] = upstream[s].values[i] * y * (T(1) - y);
            }
            gi.push_back(std::move(g));
        }
        return gi;
    }

    std::vector<LayerSpec> specs() const override { return {{"sigmoid", 0, 0, 1, 1, 1}}; }

  private:
    Batch<T> cached_out_;
};

}  // namespace scan
