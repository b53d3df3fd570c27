#pragma once

#include <string>

#include "scan/tensor.hpp"

namespace scan {

// One normalized image paired with its one-hot mask. Channel order is fixed
// as (left lung, right lung, heart, background); the heart channel is all
// zero whenever heart_annotated is false.
template <typename T>
struct SampleT {
    std::string id;
    TensorT<T> image;  // [H,W,1]
    TensorT<T> label;  // [H,W,4] one-hot
    bool heart_annotated = true;
};

using ImageSample = SampleT<float>;

enum MaskChannel : std::int64_t {
    kLeftLung = 0,
    kRightLung = 1,
    kHeart = 2,
    kBackground = 3,
};

}  // namespace scan
