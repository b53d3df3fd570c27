#pragma once

#include <cstdint>
#include <vector>

#include "scan/tensor.hpp"

namespace scan {

// Per-pixel boolean mask backed by a flat row-major vector.
struct BinaryMask {
    std::int64_t h = 0;
    std::int64_t w = 0;
    std::vector<std::uint8_t> values;  // 0 or 1

    BinaryMask() = default;
    BinaryMask(std::int64_t height, std::int64_t width)
        : h(height), w(width), values(std::size_t(height * width), 0) {}

    std::uint8_t& at(std::int64_t y, std::int64_t x) {
        return values[std::size_t(y * w + x)];
    }
    std::uint8_t at(std::int64_t y, std::int64_t x) const {
        return values[std::size_t(y * w + x)];
    }
    std::size_t count() const;
    bool operator==(const BinaryMask& other) const = default;
};

// Channel of the highest probability per pixel; ties go to the lowest channel
// index. Returns one mask per channel.
std::vector<BinaryMask> argmax_masks(const Tensor& probs);
BinaryMask argmax_mask(const Tensor& probs, std::int64_t channel);

// Fills background regions not connected (4-connectivity) to the image border.
BinaryMask fill_holes(const BinaryMask& mask);

// Keeps only the largest 8-connected foreground component. Ties break toward
// the component whose first pixel comes earliest in scan order. An all-zero
// mask passes through unchanged.
BinaryMask keep_largest(const BinaryMask& mask);

// Hole filling followed by largest-component selection.
BinaryMask postprocess_mask(const BinaryMask& mask);

}  // namespace scan
