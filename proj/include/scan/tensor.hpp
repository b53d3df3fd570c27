#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <initializer_list>
#include <iosfwd>
#include <istream>
#include <numeric>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "scan/errors.hpp"

namespace scan {

// Dense row-major tensor. Activations use layout [H, W, C], convolution
// kernels [kh, kw, Cin, Cout]. The gradient buffer is allocated lazily and
// only on tensors that take part in a backward pass.
template <typename T>
struct TensorT {
    std::vector<std::int64_t> shape;
    std::vector<T> values;
    std::vector<T> grad;  // empty, or same length as values

    TensorT() = default;

    explicit TensorT(std::vector<std::int64_t> s) : shape(std::move(s)) {
        values.assign(static_cast<std::size_t>(numel_of(shape)), T(0));
    }

    TensorT(std::vector<std::int64_t> s, std::vector<T> v)
        : shape(std::move(s)), values(std::move(v)) {
        if (static_cast<std::int64_t>(values.size()) != numel_of(shape)) {
            throw ShapeError("tensor value count " + std::to_string(values.size()) +
                             " does not match shape " + shape_str(shape));
        }
    }

    static std::int64_t numel_of(const std::vector<std::int64_t>& s) {
        return std::accumulate(s.begin(), s.end(), std::int64_t{1},
                               std::multiplies<>());
    }

    std::int64_t numel() const { return static_cast<std::int64_t>(values.size()); }

    bool has_grad() const { return !grad.empty(); }

    void ensure_grad() {
        if (grad.size() != values.size()) grad.assign(values.size(), T(0));
    }

    void zero_grad() {
        if (!grad.empty()) std::fill(grad.begin(), grad.end(), T(0));
    }

    bool same_shape(const TensorT& other) const { return shape == other.shape; }

    bool all_finite() const {
        for (T v : values)
            if (!std::isfinite(static_cast<double>(v))) return false;
        return true;
    }

    static std::string shape_str(const std::vector<std::int64_t>& s) {
        std::string out = "[";
        for (std::size_t i = 0; i < s.size(); ++i) {
            if (i) out += ",";
            out += std::to_string(s[i]);
        }
        return out + "]";
    }

    std::string shape_str() const { return shape_str(shape); }

    // [H,W,C] accessors for activations.
    std::int64_t h() const { return shape.size() > 0 ? shape[0] : 1; }
    std::int64_t w() const { return shape.size() > 1 ? shape[1] : 1; }
    std::int64_t c() const { return shape.size() > 2 ? shape[2] : 1; }

    T& at(std::int64_t y, std::int64_t x, std::int64_t ch) {
        return values[static_cast<std::size_t>((y * w() + x) * c() + ch)];
    }
    T at(std::int64_t y, std::int64_t x, std::int64_t ch) const {
        return values[static_cast<std::size_t>((y * w() + x) * c() + ch)];
    }

    template <typename U>
    TensorT<U> cast() const {
        TensorT<U> out;
        out.shape = shape;
        out.values.resize(values.size());
        for (std::size_t i = 0; i < values.size(); ++i)
            out.values[i] = static_cast<U>(values[i]);
        return out;
    }
};

using Tensor = TensorT<float>;
using TensorD = TensorT<double>;

template <typename T>
using Batch = std::vector<TensorT<T>>;

inline void require_shape(const std::vector<std::int64_t>& got,
                          const std::vector<std::int64_t>& want,
                          const char* what) {
    if (got != want) {
        throw ShapeError(std::string(what) + ": expected " +
                         Tensor::shape_str(want) + ", got " +
                         Tensor::shape_str(got));
    }
}

namespace detail {

inline void put_u64le(std::ostream& os, std::uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    os.write(reinterpret_cast<const char*>(b), 8);
}

inline std::uint64_t get_u64le(std::istream& is) {
    unsigned char b[8];
    is.read(reinterpret_cast<char*>(b), 8);
    if (!is) throw FormatError("tensor dump: truncated header");
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= std::uint64_t(b[i]) << (8 * i);
    return v;
}

inline void put_f32le(std::ostream& os, float f) {
    std::uint32_t u;
    std::memcpy(&u, &f, 4);
    unsigned char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(u >> (8 * i));
    os.write(reinterpret_cast<const char*>(b), 4);
}

inline float get_f32le(std::istream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    if (!is) throw FormatError("tensor dump: truncated payload");
    std::uint32_t u = 0;
    for (int i = 0; i < 4; ++i) u |= std::uint32_t(b[i]) << (8 * i);
    float f;
    std::memcpy(&f, &u, 4);
    return f;
}

}  // namespace detail

// Dump format used by golden-file tests and checkpoints: rank and extents as
// little-endian 64-bit integers, then the values as little-endian 32-bit
// floats in row-major order.
template <typename T>
void dump_tensor(std::ostream& os, const TensorT<T>& t) {
    detail::put_u64le(os, static_cast<std::uint64_t>(t.shape.size()));
    for (std::int64_t e : t.shape) detail::put_u64le(os, static_cast<std::uint64_t>(e));
    for (T v : t.values) detail::put_f32le(os, static_cast<float>(v));
}

template <typename T>
TensorT<T> load_tensor(std::istream& is) {
    std::uint64_t rank = detail::get_u64le(is);
    if (rank > 8) throw FormatError("tensor dump: implausible rank " + std::to_string(rank));
    std::vector<std::int64_t> shape(rank);
    for (auto& e : shape) e = static_cast<std::int64_t>(detail::get_u64le(is));
    TensorT<T> t(shape);
    for (auto& v : t.values) v = static_cast<T>(detail::get_f32le(is));
    return t;
}

}  // namespace scan
