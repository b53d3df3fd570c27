#pragma once

// Shared finite-difference machinery for gradient tests. Central differences
// with step 1e-3 in 64-bit mode; relative-error gate 1e-3 with an absolute
// floor of 1e-6.

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>

#include "scan/tensor.hpp"

namespace fdcheck {

inline constexpr double kStep64 = 1e-3;
inline constexpr double kRelTol64 = 1e-3;
inline constexpr double kRelTol32 = 1e-2;
inline constexpr double kAbsFloor = 1e-6;

inline bool close(double analytic, double numeric, double rel_tol) {
    const double diff = std::abs(analytic - numeric);
    if (diff < kAbsFloor) return true;
    return diff / std::max(std::abs(analytic), std::abs(numeric)) < rel_tol;
}

// Central difference of `loss` with respect to entry i of `t`.
template <typename T, typename Loss>
double central_diff(scan::TensorT<T>& t, std::size_t i, double step, const Loss& loss) {
    const T keep = t.values[i];
    t.values[i] = T(double(keep) + step);
    const double up = loss();
    t.values[i] = T(double(keep) - step);
    const double dn = loss();
    t.values[i] = keep;
    return (up - dn) / (2 * step);
}

template <typename T>
void fill_gaussian(scan::TensorT<T>& t, std::mt19937_64& rng, double sigma = 1.0) {
    std::normal_distribution<double> g(0.0, sigma);
    for (auto& v : t.values) v = T(g(rng));
}

}  // namespace fdcheck
