#include "scan/synthetic.hpp"

#include <cmath>
#include <random>

#include "scan/pipeline.hpp"

namespace scan {

namespace {

bool in_ellipse(double y, double x, double cy, double cx, double ry, double rx) {
    const double dy = (y - cy) / ry, dx = (x - cx) / rx;
    return dy * dy + dx * dx <= 1.0;
}

}  // namespace

std::vector<ImageSample> make_synthetic_dataset(std::size_t count, std::int64_t resolution,
                                                std::uint64_t seed, bool heart_annotated) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> noise(0.0, 0.05);
    std::uniform_real_distribution<double> jitter(-0.03, 0.03);

    std::vector<ImageSample> out;
    out.reserve(count);
    const std::int64_t R = resolution;
    for (std::size_t i = 0; i < count; ++i) {
        // Organ geometry in unit coordinates, jittered per sample.
        const double lcy = 0.45 + jitter(rng), lcx = 0.30 + jitter(rng);
        const double rcy = 0.45 + jitter(rng), rcx = 0.70 + jitter(rng);
        const double lry = 0.26 + jitter(rng), lrx = 0.14 + jitter(rng);
        const double rry = 0.26 + jitter(rng), rrx = 0.14 + jitter(rng);
        const double hy0 = 0.55 + jitter(rng), hy1 = 0.80 + jitter(rng);
        const double hx0 = 0.42 + jitter(rng), hx1 = 0.60 + jitter(rng);

        ImageSample s;
        s.id = "synthetic_" + std::to_string(i);
        s.heart_annotated = heart_annotated;
        Tensor raw({R, R, 1});
        s.label = Tensor({R, R, 4});
        for (std::int64_t y = 0; y < R; ++y)
            for (std::int64_t x = 0; x < R; ++x) {
                const double uy = (double(y) + 0.5) / double(R);
                const double ux = (double(x) + 0.5) / double(R);
                const bool left = in_ellipse(uy, ux, lcy, lcx, lry, lrx);
                const bool right = in_ellipse(uy, ux, rcy, rcx, rry, rrx);
                const bool heart = uy >= hy0 && uy <= hy1 && ux >= hx0 && ux <= hx1;

                // Channel priority: left > right > heart > background.
                std::int64_t ch = kBackground;
                if (left)
                    ch = kLeftLung;
                else if (right)
                    ch = kRightLung;
                else if (heart && heart_annotated)
                    ch = kHeart;
                s.label.at(y, x, ch) = 1.0f;

                double v = 0.7;  // bright background, dark organs (film-like)
                if (left || right) v = 0.2;
                else if (heart) v = 0.45;
                raw.at(y, x, 0) = float(v + noise(rng));
            }
        s.image = normalize_per_image(raw);
        out.push_back(std::move(s));
    }
    return out;
}

}  // namespace scan
