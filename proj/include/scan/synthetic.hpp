#pragma once

#include <cstdint>
#include <vector>

#include "scan/sample.hpp"

namespace scan {

// Deterministic stand-in dataset for tests: two ellipse "lungs", one
// rectangular "heart", mild per-sample jitter, Gaussian pixel noise. Images
// come back already normalized; labels are valid one-hot masks.
std::vector<ImageSample> make_synthetic_dataset(std::size_t count, std::int64_t resolution,
                                                std::uint64_t seed,
                                                bool heart_annotated = true);

}  // namespace scan
