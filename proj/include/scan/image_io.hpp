#pragma once

#include <string>

#include "scan/tensor.hpp"

namespace scan {

// JSRT raw files: 2048x2048 big-endian 16-bit words carrying 12-bit samples.
// The raw data is inverse video (higher word = darker); the loader flips
// polarity so higher output value = brighter on film. The flip is
// value -> 4095 - value and is fixed by kJsrtInvertPolarity.
inline constexpr std::int64_t kJsrtExtent = 2048;
inline constexpr int kJsrtMaxValue = 4095;
inline constexpr bool kJsrtInvertPolarity = true;

Tensor load_jsrt_image(const std::string& path);

// Grayscale PNG (8- or 16-bit) to raw intensity values. Color or palette
// images are rejected.
Tensor load_png_image(const std::string& path);

// Mask PNG binarized at half of the bit depth's maximum intensity.
Tensor load_mask_png(const std::string& path);

// 8-bit grayscale writer; values are clamped to [0,1] and scaled to 0..255.
void save_png_gray8(const std::string& path, const Tensor& image);

// 16-bit grayscale writer for raw-intensity images (values in [0, max_value]).
void save_png_gray16(const std::string& path, const Tensor& image, int max_value);

}  // namespace scan
