#include "scan/postprocess.hpp"

#include <algorithm>
#include <numeric>

#include "scan/errors.hpp"

namespace scan {

std::size_t BinaryMask::count() const {
    return std::size_t(std::accumulate(values.begin(), values.end(), std::int64_t(0)));
}

std::vector<BinaryMask> argmax_masks(const Tensor& probs) {
    if (probs.shape.size() != 3)
        throw ShapeError("argmax_masks: needs [H,W,C], got " + probs.shape_str());
    const std::int64_t H = probs.shape[0], W = probs.shape[1], C = probs.shape[2];
    std::vector<BinaryMask> masks(std::size_t(C), BinaryMask(H, W));
    for (std::int64_t p = 0; p < H * W; ++p) {
        const float* v = probs.values.data() + p * C;
        std::int64_t best = 0;
        for (std::int64_t c = 1; c < C; ++c)
            if (v[c] > v[best]) best = c;  // ties keep the lowest channel
        masks[std::size_t(best)].values[std::size_t(p)] = 1;
    }
    return masks;
}

BinaryMask argmax_mask(const Tensor& probs, std::int64_t channel) {
    auto masks = argmax_masks(probs);
    if (channel < 0 || channel >= std::int64_t(masks.size()))
        throw ShapeError("argmax_mask: channel " + std::to_string(channel) +
                         " out of range for " + probs.shape_str());
    return masks[std::size_t(channel)];
}

namespace {

// Iterative flood fill over `mask` pixels equal to `value`, marking `visited`.
// Returns the number of pixels reached from `seed`. `conn8` adds diagonals.
std::size_t flood(const BinaryMask& mask, std::vector<std::uint8_t>& visited,
                  std::int64_t seed, std::uint8_t value, bool conn8,
                  std::vector<std::int64_t>& stack) {
    std::size_t n = 0;
    stack.clear();
    stack.push_back(seed);
    visited[std::size_t(seed)] = 1;
    while (!stack.empty()) {
        const std::int64_t p = stack.back();
        stack.pop_back();
        ++n;
        const std::int64_t y = p / mask.w, x = p % mask.w;
        for (std::int64_t dy = -1; dy <= 1; ++dy)
            for (std::int64_t dx = -1; dx <= 1; ++dx) {
                if (dy == 0 && dx == 0) continue;
                if (!conn8 && dy != 0 && dx != 0) continue;
                const std::int64_t ny = y + dy, nx = x + dx;
                if (ny < 0 || ny >= mask.h || nx < 0 || nx >= mask.w) continue;
                const std::int64_t q = ny * mask.w + nx;
                if (visited[std::size_t(q)] || mask.values[std::size_t(q)] != value)
                    continue;
                visited[std::size_t(q)] = 1;
                stack.push_back(q);
            }
    }
    return n;
}

}  // namespace

BinaryMask fill_holes(const BinaryMask& mask) {
    std::vector<std::uint8_t> outside(mask.values.size(), 0);
    std::vector<std::int64_t> stack;
    // Background connected (4-conn) to the border stays background.
    for (std::int64_t y = 0; y < mask.h; ++y)
        for (std::int64_t x = 0; x < mask.w; ++x) {
            if (y != 0 && y != mask.h - 1 && x != 0 && x != mask.w - 1) continue;
            const std::int64_t p = y * mask.w + x;
            if (!outside[std::size_t(p)] && mask.values[std::size_t(p)] == 0)
                flood(mask, outside, p, 0, /*conn8=*/false, stack);
        }
    BinaryMask out(mask.h, mask.w);
    for (std::size_t i = 0; i < out.values.size(); ++i)
        out.values[i] = outside[i] ? 0 : 1;
    return out;
}

BinaryMask keep_largest(const BinaryMask& mask) {
    std::vector<std::uint8_t> visited(mask.values.size(), 0);
    std::vector<std::int64_t> stack;
    std::int64_t best_seed = -1;
    std::size_t best_size = 0;
    for (std::int64_t p = 0; p < mask.h * mask.w; ++p) {
        if (visited[std::size_t(p)] || mask.values[std::size_t(p)] != 1) continue;
        const std::size_t n = flood(mask, visited, p, 1, /*conn8=*/true, stack);
        if (n > best_size) {  // strict: ties keep the earlier scan-order seed
            best_size = n;
            best_seed = p;
        }
    }
    BinaryMask out(mask.h, mask.w);
    if (best_seed < 0) return out;  // all-zero input
    std::vector<std::uint8_t> keep(mask.values.size(), 0);
    flood(mask, keep, best_seed, 1, /*conn8=*/true, stack);
    for (std::size_t i = 0; i < out.values.size(); ++i) out.values[i] = keep[i];
    return out;
}

BinaryMask postprocess_mask(const BinaryMask& mask) {
    return keep_largest(fill_holes(mask));
}

}  // namespace scan
