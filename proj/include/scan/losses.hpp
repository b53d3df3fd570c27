#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "scan/model_zoo.hpp"
#include "scan/sample.hpp"
#include "scan/tensor.hpp"

namespace scan {

inline constexpr double kProbClip = 1e-7;

namespace detail {

template <typename T>
void check_one_hot(const TensorT<T>& label) {
    const std::int64_t C = label.shape.back();
    const std::int64_t n = label.numel() / C;
    for (std::int64_t p = 0; p < n; ++p) {
        int ones = 0;
        for (std::int64_t c = 0; c < C; ++c) {
            const T v = label.values[p * C + c];
            if (v == T(1))
                ++ones;
            else if (v != T(0))
                throw ValidationError("label is not one-hot at pixel " + std::to_string(p));
        }
        if (ones != 1)
            throw ValidationError("label has " + std::to_string(ones) +
                                  " active channels at pixel " + std::to_string(p));
    }
}

}  // namespace detail

// Multi-class cross-entropy averaged over pixels, from a predicted
// distribution. For heart-unannotated samples the heart channel is excluded
// and the remaining probabilities renormalized, so heart predictions carry no
// loss. Probabilities are clipped to [1e-7, 1 - 1e-7].
template <typename T>
double pixel_loss_js(const TensorT<T>& pred, const TensorT<T>& label,
                     bool heart_annotated = true) {
    require_shape(pred.shape, label.shape, "pixel_loss_js prediction vs label");
    detail::check_one_hot(label);
    const std::int64_t C = pred.shape.back();
    const std::int64_t n = pred.numel() / C;
    double sum = 0;
    for (std::int64_t p = 0; p < n; ++p) {
        double denom = 0;
        double target = 0;
        for (std::int64_t c = 0; c < C; ++c) {
            if (!heart_annotated && c == kHeart) continue;
            const double v = pred.values[p * C + c];
            denom += v;
            if (label.values[p * C + c] == T(1)) target = v;
        }
        double q = target / denom;
        q = std::min(std::max(q, kProbClip), 1.0 - kProbClip);
        sum += -std::log(q);
    }
    return sum / double(n);
}

// Log-sum-exp evaluation of J_s directly from logits, with the gradient
// written into grad_logits (scaled by 1/HW) when requested. The heart channel
// is dropped from the normalization for heart-unannotated samples, so its
// logit receives zero gradient.
template <typename T>
double pixel_loss_from_logits(const TensorT<T>& logits, const TensorT<T>& label,
                              bool heart_annotated, TensorT<T>* grad_logits = nullptr) {
    require_shape(logits.shape, label.shape, "pixel loss logits vs label");
    const std::int64_t C = logits.shape.back();
    const std::int64_t n = logits.numel() / C;
    if (grad_logits) *grad_logits = TensorT<T>(logits.shape);
    double sum = 0;
    const double invn = 1.0 / double(n);
    for (std::int64_t p = 0; p < n; ++p) {
        const T* z = logits.values.data() + p * C;
        double mx = -1e300;
        for (std::int64_t c = 0; c < C; ++c) {
            if (!heart_annotated && c == kHeart) continue;
            mx = std::max(mx, double(z[c]));
        }
        double lse = 0;
        for (std::int64_t c = 0; c < C; ++c) {
            if (!heart_annotated && c == kHeart) continue;
            lse += std::exp(double(z[c]) - mx);
        }
        lse = mx + std::log(lse);
        std::int64_t target = -1;
        for (std::int64_t c = 0; c < C; ++c)
            if (label.values[p * C + c] == T(1)) target = c;
        sum += lse - double(z[target]);
        if (grad_logits) {
            T* g = grad_logits->values.data() + p * C;
            for (std::int64_t c = 0; c < C; ++c) {
                if (!heart_annotated && c == kHeart) {
                    g[c] = T(0);
                    continue;
                }
                const double prob = std::exp(double(z[c]) - lse);
                g[c] = T((prob - double(label.values[p * C + c])) * invn);
            }
        }
    }
    return sum * invn;
}

// Binary cross-entropy for the critic's prediction, clipped away from {0,1}.
inline double binary_loss_jd(double t_hat, int t) {
    t_hat = std::min(std::max(t_hat, kProbClip), 1.0 - kProbClip);
    return -double(t) * std::log(t_hat) - (1.0 - double(t)) * std::log(1.0 - t_hat);
}

// d binary_loss_jd / d t_hat at the clipped argument.
inline double binary_loss_jd_grad(double t_hat, int t) {
    t_hat = std::min(std::max(t_hat, kProbClip), 1.0 - kProbClip);
    return t == 1 ? -1.0 / t_hat : 1.0 / (1.0 - t_hat);
}

// Zeroes the heart channel of a predicted mask for samples without a heart
// annotation before it reaches the critic.
template <typename T>
TensorT<T> critic_mask_view(const TensorT<T>& mask, bool heart_annotated) {
    if (heart_annotated) return mask;
    TensorT<T> out = mask;
    const std::int64_t C = mask.shape.back();
    const std::int64_t n = mask.numel() / C;
    for (std::int64_t p = 0; p < n; ++p) out.values[p * C + kHeart] = T(0);
    return out;
}

// Sum over the minibatch of the critic's loss toward target 1 on ground
// truth and target 0 on the segmentor's prediction. Value only; no gradient
// flows anywhere.
template <typename T>
double critic_objective(SegmentorT<T>& s, CriticT<T>& d,
                        const std::vector<SampleT<T>>& samples,
                        NormMode seg_mode = NormMode::Eval) {
    double total = 0;
    for (const auto& smp : samples) {
        TensorT<T> pred = forward_segment(s, smp.image, seg_mode);
        const T real = forward_critic(d, critic_mask_view(smp.label, smp.heart_annotated));
        const T fake = forward_critic(d, critic_mask_view(pred, smp.heart_annotated));
        total += binary_loss_jd(double(real), 1) + binary_loss_jd(double(fake), 0);
    }
    return total;
}

// Sum over the minibatch of the pixel loss plus lambda times the
// non-saturating adversarial term with target 1. lambda = 0 reduces exactly
// to the summed pixel loss and never touches the critic.
template <typename T>
double segmentor_objective(SegmentorT<T>& s, CriticT<T>* d,
                           const std::vector<SampleT<T>>& samples, double lambda,
                           NormMode seg_mode = NormMode::Eval) {
    double total = 0;
    for (const auto& smp : samples) {
        TensorT<T> pred = forward_segment(s, smp.image, seg_mode);
        total += pixel_loss_js(pred, smp.label, smp.heart_annotated);
        if (lambda != 0.0 && d) {
            const T fake = forward_critic(*d, critic_mask_view(pred, smp.heart_annotated));
            total += lambda * binary_loss_jd(double(fake), 1);
        }
    }
    return total;
}

}  // namespace scan
