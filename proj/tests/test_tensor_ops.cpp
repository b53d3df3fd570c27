#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <random>
#include <sstream>

#include "fd_check.hpp"
#include "scan/adam.hpp"
#include "scan/ops.hpp"
#include "scan/tensor.hpp"

using namespace scan;
namespace ops = scan::ops;

namespace {

// Independent nested-loop convolution: no padding tricks, no pointer reuse.
template <typename T>
TensorT<T> conv_oracle(const TensorT<T>& in, const TensorT<T>& k, const TensorT<T>& b) {
    const std::int64_t H = in.shape[0], W = in.shape[1], Cin = in.shape[2];
    const std::int64_t kh = k.shape[0], kw = k.shape[1], Cout = k.shape[3];
    TensorT<T> out({H, W, Cout});
    for (std::int64_t y = 0; y < H; ++y)
        for (std::int64_t x = 0; x < W; ++x)
            for (std::int64_t c = 0; c < Cout; ++c) {
                double acc = b.values[c];
                for (std::int64_t ky = 0; ky < kh; ++ky)
                    for (std::int64_t kx = 0; kx < kw; ++kx)
                        for (std::int64_t ci = 0; ci < Cin; ++ci) {
                            const std::int64_t iy = y + ky - (kh - 1) / 2;
                            const std::int64_t ix = x + kx - (kw - 1) / 2;
                            if (iy < 0 || iy >= H || ix < 0 || ix >= W) continue;
                            acc += double(in.at(iy, ix, ci)) *
                                   double(k.values[((ky * kw + kx) * Cin + ci) * Cout + c]);
                        }
                out.at(y, x, c) = T(acc);
            }
    return out;
}

// Scatter-accumulate oracle for the stride-2 transposed convolution.
template <typename T>
TensorT<T> tconv_oracle(const TensorT<T>& in, const TensorT<T>& k, const TensorT<T>& b,
                        std::int64_t stride) {
    const std::int64_t h = in.shape[0], w = in.shape[1], Cin = in.shape[2];
    const std::int64_t kh = k.shape[0], Cout = k.shape[3];
    const std::int64_t pad = (kh - stride) / 2;
    TensorT<T> out({h * stride, w * stride, Cout});
    for (auto& v : out.values) v = 0;
    for (std::int64_t y = 0; y < h * stride; ++y)
        for (std::int64_t x = 0; x < w * stride; ++x)
            for (std::int64_t c = 0; c < Cout; ++c) out.at(y, x, c) = b.values[c];
    for (std::int64_t y = 0; y < h; ++y)
        for (std::int64_t x = 0; x < w; ++x)
            for (std::int64_t ci = 0; ci < Cin; ++ci)
                for (std::int64_t ky = 0; ky < kh; ++ky)
                    for (std::int64_t kx = 0; kx < kh; ++kx) {
                        const std::int64_t oy = y * stride + ky - pad;
                        const std::int64_t ox = x * stride + kx - pad;
                        if (oy < 0 || oy >= h * stride || ox < 0 || ox >= w * stride)
                            continue;
                        for (std::int64_t c = 0; c < Cout; ++c)
                            out.at(oy, ox, c) +=
                                in.at(y, x, ci) *
                                k.values[((ky * kh + kx) * Cin + ci) * Cout + c];
                    }
    return out;
}

}  // namespace

TEST_CASE("conv2d window-sum examples") {
    Tensor in({3, 3, 1});
    for (auto& v : in.values) v = 1.0f;
    Tensor k({3, 3, 1, 1});
    for (auto& v : k.values) v = 1.0f;
    Tensor b({1});
    const Tensor out = ops::conv2d(in, k, b);
    CHECK(out.at(1, 1, 0) == doctest::Approx(9.0));
    CHECK(out.at(0, 1, 0) == doctest::Approx(6.0));
    CHECK(out.at(1, 0, 0) == doctest::Approx(6.0));
    CHECK(out.at(0, 0, 0) == doctest::Approx(4.0));
    CHECK(out.at(2, 2, 0) == doctest::Approx(4.0));
}

TEST_CASE("conv2d 1x1 identity kernel") {
    std::mt19937_64 rng(1);
    Tensor in({4, 6, 1});
    fdcheck::fill_gaussian(in, rng);
    Tensor k({1, 1, 1, 1});
    k.values[0] = 1.0f;
    Tensor b({1});
    const Tensor out = ops::conv2d(in, k, b);
    for (std::size_t i = 0; i < in.values.size(); ++i)
        CHECK(out.values[i] == in.values[i]);
}

TEST_CASE("conv2d matches brute-force oracle") {
    std::mt19937_64 rng(2);
    Tensor in({5, 5, 2}), k({3, 3, 2, 3}), b({3});
    fdcheck::fill_gaussian(in, rng);
    fdcheck::fill_gaussian(k, rng);
    fdcheck::fill_gaussian(b, rng);
    const Tensor got = ops::conv2d(in, k, b);
    const Tensor want = conv_oracle(in, k, b);
    REQUIRE(got.shape == want.shape);
    for (std::size_t i = 0; i < got.values.size(); ++i)
        CHECK(got.values[i] == doctest::Approx(want.values[i]).epsilon(1e-5));
}

TEST_CASE("conv2d rejects channel mismatch naming both shapes") {
    Tensor in({3, 3, 2}), k({3, 3, 3, 1}), b({1});
    CHECK_THROWS_AS(ops::conv2d(in, k, b), ShapeError);
    try {
        ops::conv2d(in, k, b);
    } catch (const ShapeError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("[3,3,2]") != std::string::npos);
        CHECK(msg.find("[3,3,3,1]") != std::string::npos);
    }
}

TEST_CASE("conv2d_backward scalar product rule and bias sum") {
    TensorD in({1, 1, 1}), k({1, 1, 1, 1}), up({1, 1, 1});
    in.values[0] = 3.0;
    k.values[0] = 5.0;
    up.values[0] = 2.0;
    const auto g = ops::conv2d_backward(in, k, up);
    CHECK(g.kernel.values[0] == doctest::Approx(6.0));  // input * upstream
    CHECK(g.input.values[0] == doctest::Approx(10.0));  // kernel * upstream

    std::mt19937_64 rng(3);
    TensorD in2({4, 4, 2}), k2({3, 3, 2, 3}), up2({4, 4, 3});
    fdcheck::fill_gaussian(in2, rng);
    fdcheck::fill_gaussian(k2, rng);
    fdcheck::fill_gaussian(up2, rng);
    const auto g2 = ops::conv2d_backward(in2, k2, up2);
    for (std::int64_t c = 0; c < 3; ++c) {
        double want = 0;
        for (std::int64_t y = 0; y < 4; ++y)
            for (std::int64_t x = 0; x < 4; ++x) want += up2.at(y, x, c);
        CHECK(g2.bias.values[c] == doctest::Approx(want).epsilon(1e-9));
    }
}

TEST_CASE("conv2d_backward matches central finite differences") {
    std::mt19937_64 rng(4);
    TensorD in({4, 5, 2}), k({3, 3, 2, 2}), b({2}), w({4, 5, 2});
    fdcheck::fill_gaussian(in, rng);
    fdcheck::fill_gaussian(k, rng);
    fdcheck::fill_gaussian(b, rng);
    fdcheck::fill_gaussian(w, rng);
    const auto loss = [&]() {
        const TensorD y = ops::conv2d(in, k, b);
        double s = 0;
        for (std::size_t i = 0; i < y.values.size(); ++i) s += y.values[i] * w.values[i];
        return s;
    };
    const auto g = ops::conv2d_backward(in, k, w);
    for (int probe = 0; probe < 30; ++probe) {
        TensorD* t = probe % 3 == 0 ? &in : probe % 3 == 1 ? &k : &b;
        const TensorD* a = probe % 3 == 0 ? &g.input : probe % 3 == 1 ? &g.kernel : &g.bias;
        const std::size_t i = rng() % t->values.size();
        const double fd = fdcheck::central_diff(*t, i, fdcheck::kStep64, loss);
        CHECK(fdcheck::close(a->values[i], fd, fdcheck::kRelTol64));
    }
}

TEST_CASE("avg_pool2 examples and oracle") {
    Tensor in({2, 2, 1});
    in.values = {1, 3, 5, 7};
    CHECK(ops::avg_pool2(in).values[0] == doctest::Approx(4.0));

    Tensor c({4, 4, 2});
    for (auto& v : c.values) v = 2.5f;
    for (float v : ops::avg_pool2(c).values) CHECK(v == doctest::Approx(2.5));

    std::mt19937_64 rng(5);
    Tensor r({8, 8, 3});
    fdcheck::fill_gaussian(r, rng);
    const Tensor out = ops::avg_pool2(r);
    for (std::int64_t y = 0; y < 4; ++y)
        for (std::int64_t x = 0; x < 4; ++x)
            for (std::int64_t ch = 0; ch < 3; ++ch) {
                const float want = (r.at(2 * y, 2 * x, ch) + r.at(2 * y, 2 * x + 1, ch) +
                                    r.at(2 * y + 1, 2 * x, ch) +
                                    r.at(2 * y + 1, 2 * x + 1, ch)) /
                                   4.0f;
                CHECK(out.at(y, x, ch) == doctest::Approx(want));
            }

    Tensor odd({3, 4, 1});
    CHECK_THROWS_AS(ops::avg_pool2(odd), ShapeError);
}

TEST_CASE("avg_pool2 backward finite differences") {
    std::mt19937_64 rng(6);
    TensorD in({4, 4, 2}), w({2, 2, 2});
    fdcheck::fill_gaussian(in, rng);
    fdcheck::fill_gaussian(w, rng);
    const auto loss = [&]() {
        const TensorD y = ops::avg_pool2(in);
        double s = 0;
        for (std::size_t i = 0; i < y.values.size(); ++i) s += y.values[i] * w.values[i];
        return s;
    };
    const TensorD g = ops::avg_pool2_backward(in.shape, w);
    for (int probe = 0; probe < 20; ++probe) {
        const std::size_t i = rng() % in.values.size();
        CHECK(fdcheck::close(g.values[i],
                             fdcheck::central_diff(in, i, fdcheck::kStep64, loss),
                             fdcheck::kRelTol64));
    }
}

TEST_CASE("transposed_conv2d scatter examples") {
    TensorD in({1, 1, 1}), k({2, 2, 1, 1}), b({1});
    in.values[0] = 3.0;
    k.values = {1.0, 2.0, 3.0, 4.0};
    const TensorD out = ops::transposed_conv2d(in, k, b, 2);
    REQUIRE(out.shape == std::vector<std::int64_t>{2, 2, 1});
    CHECK(out.values[0] == doctest::Approx(3.0));
    CHECK(out.values[1] == doctest::Approx(6.0));
    CHECK(out.values[2] == doctest::Approx(9.0));
    CHECK(out.values[3] == doctest::Approx(12.0));

    TensorD z({3, 3, 2}), k2({4, 4, 2, 1}), b2({1});
    for (float v : ops::transposed_conv2d(z, k2, b2, 2).cast<float>().values)
        CHECK(v == 0.0f);

    TensorD k3({3, 3, 2, 1});
    CHECK_THROWS_AS(ops::transposed_conv2d(z, k3, b2, 2), ConfigError);
    CHECK_THROWS_AS(ops::transposed_conv2d(z, k2, b2, 3), ConfigError);
}

TEST_CASE("transposed_conv2d matches scatter oracle") {
    std::mt19937_64 rng(7);
    for (std::int64_t kh : {2, 4}) {
        TensorD in({3, 3, 2}), k({kh, kh, 2, 3}), b({3});
        fdcheck::fill_gaussian(in, rng);
        fdcheck::fill_gaussian(k, rng);
        fdcheck::fill_gaussian(b, rng);
        const TensorD got = ops::transposed_conv2d(in, k, b, 2);
        const TensorD want = tconv_oracle(in, k, b, 2);
        REQUIRE(got.shape == want.shape);
        for (std::size_t i = 0; i < got.values.size(); ++i)
            CHECK(got.values[i] == doctest::Approx(want.values[i]).epsilon(1e-5));
    }
}

TEST_CASE("transposed_conv2d backward finite differences") {
    std::mt19937_64 rng(8);
    TensorD in({3, 3, 2}), k({4, 4, 2, 2}), b({2}), w({6, 6, 2});
    fdcheck::fill_gaussian(in, rng);
    fdcheck::fill_gaussian(k, rng);
    fdcheck::fill_gaussian(b, rng);
    fdcheck::fill_gaussian(w, rng);
    const auto loss = [&]() {
        const TensorD y = ops::transposed_conv2d(in, k, b, 2);
        double s = 0;
        for (std::size_t i = 0; i < y.values.size(); ++i) s += y.values[i] * w.values[i];
        return s;
    };
    const auto g = ops::transposed_conv2d_backward(in, k, w, 2);
    for (int probe = 0; probe < 30; ++probe) {
        TensorD* t = probe % 3 == 0 ? &in : probe % 3 == 1 ? &k : &b;
        const TensorD* a = probe % 3 == 0 ? &g.input : probe % 3 == 1 ? &g.kernel : &g.bias;
        const std::size_t i = rng() % t->values.size();
        CHECK(fdcheck::close(a->values[i],
                             fdcheck::central_diff(*t, i, fdcheck::kStep64, loss),
                             fdcheck::kRelTol64));
    }
}

TEST_CASE("pointwise activations closed forms") {
    CHECK(ops::sigmoid(0.0) == doctest::Approx(0.5));
    CHECK(ops::sigmoid(100.0) == doctest::Approx(1.0));
    CHECK(ops::sigmoid(-100.0) == doctest::Approx(0.0));

    Tensor eq({1, 1, 4});
    for (auto& v : eq.values) v = 1.7f;
    for (float v : ops::softmax_channels(eq).values) CHECK(v == doctest::Approx(0.25));

    Tensor z({1, 1, 4});
    z.values = {0.0f, std::log(3.0f), 0.0f, 0.0f};
    const Tensor p = ops::softmax_channels(z);
    CHECK(p.values[0] == doctest::Approx(1.0 / 6));
    CHECK(p.values[1] == doctest::Approx(0.5));
    CHECK(p.values[2] == doctest::Approx(1.0 / 6));
    CHECK(p.values[3] == doctest::Approx(1.0 / 6));
}

TEST_CASE("softmax normalizes and survives large logits") {
    std::mt19937_64 rng(9);
    Tensor z({6, 6, 4});
    fdcheck::fill_gaussian(z, rng, 200.0);  // max-subtraction keeps this finite
    const Tensor p = ops::softmax_channels(z);
    CHECK(p.all_finite());
    for (std::int64_t px = 0; px < 36; ++px) {
        float sum = 0;
        for (std::int64_t c = 0; c < 4; ++c) {
            const float v = p.values[px * 4 + c];
            CHECK(v >= 0.0f);
            CHECK(v <= 1.0f);
            sum += v;
        }
        CHECK(sum == doctest::Approx(1.0).epsilon(1e-5));
    }
}

TEST_CASE("softmax and relu backward finite differences") {
    std::mt19937_64 rng(10);
    TensorD z({3, 3, 4}), w({3, 3, 4});
    fdcheck::fill_gaussian(z, rng);
    fdcheck::fill_gaussian(w, rng);
    const auto loss = [&]() {
        const TensorD p = ops::softmax_channels(z);
        double s = 0;
        for (std::size_t i = 0; i < p.values.size(); ++i) s += p.values[i] * w.values[i];
        return s;
    };
    const TensorD g = ops::softmax_channels_backward(ops::softmax_channels(z), w);
    for (int probe = 0; probe < 25; ++probe) {
        const std::size_t i = rng() % z.values.size();
        CHECK(fdcheck::close(g.values[i],
                             fdcheck::central_diff(z, i, fdcheck::kStep64, loss),
                             fdcheck::kRelTol64));
    }

    TensorD x({4, 4, 2}), wr({4, 4, 2});
    fdcheck::fill_gaussian(x, rng);
    fdcheck::fill_gaussian(wr, rng);
    for (auto& v : x.values)  // keep probes away from the kink at 0
        if (std::abs(v) < 0.05) v = v < 0 ? -0.1 : 0.1;
    const auto rloss = [&]() {
        const TensorD y = ops::relu(x);
        double s = 0;
        for (std::size_t i = 0; i < y.values.size(); ++i) s += y.values[i] * wr.values[i];
        return s;
    };
    const TensorD gr = ops::relu_backward(x, wr);
    for (int probe = 0; probe < 20; ++probe) {
        const std::size_t i = rng() % x.values.size();
        CHECK(fdcheck::close(gr.values[i],
                             fdcheck::central_diff(x, i, fdcheck::kStep64, rloss),
                             fdcheck::kRelTol64));
    }
}

TEST_CASE("batch norm statistics, fixed point, and constant channel") {
    std::mt19937_64 rng(11);
    TensorD gain({3}), shift({3});
    for (auto& v : gain.values) v = 1.0;
    std::vector<double> rm(3, 0.0), rv(3, 1.0);

    // Random batch: per-channel moments of the standardized output.
    Batch<double> batch;
    for (int i = 0; i < 4; ++i) {
        TensorD t({6, 6, 3});
        fdcheck::fill_gaussian(t, rng, 2.5);
        batch.push_back(std::move(t));
    }
    const Batch<double> out =
        ops::batch_norm_channel(batch, gain, shift, rm, rv, ops::NormMode::Train);
    for (std::int64_t c = 0; c < 3; ++c) {
        double mean = 0, var = 0;
        std::int64_t n = 0;
        for (const auto& t : out)
            for (std::int64_t p = 0; p < t.numel() / 3; ++p) {
                mean += t.values[p * 3 + c];
                ++n;
            }
        mean /= double(n);
        for (const auto& t : out)
            for (std::int64_t p = 0; p < t.numel() / 3; ++p) {
                const double d = t.values[p * 3 + c] - mean;
                var += d * d;
            }
        var /= double(n);
        CHECK(std::abs(mean) < 1e-4);
        CHECK(std::abs(var - 1.0) < 1e-3);
    }

    // Already-standardized input is (approximately) a fixed point.
    std::vector<double> rm2(3, 0.0), rv2(3, 1.0);
    const Batch<double> twice =
        ops::batch_norm_channel(out, gain, shift, rm2, rv2, ops::NormMode::Train);
    for (std::size_t i = 0; i < twice.size(); ++i)
        for (std::size_t j = 0; j < twice[i].values.size(); ++j)
            CHECK(std::abs(twice[i].values[j] - out[i].values[j]) < 1e-4);

    // Constant channel collapses to the shift.
    TensorD cshift({1});
    cshift.values[0] = 0.75;
    TensorD cgain({1});
    cgain.values[0] = 2.0;
    TensorD flat({4, 4, 1});
    for (auto& v : flat.values) v = 9.0;
    std::vector<double> rm3(1, 0.0), rv3(1, 1.0);
    const Batch<double> c = ops::batch_norm_channel({flat}, cgain, cshift, rm3, rv3,
                                                    ops::NormMode::Train);
    for (double v : c[0].values) CHECK(v == doctest::Approx(0.75).epsilon(1e-6));
}

TEST_CASE("batch norm train-mode backward finite differences") {
    std::mt19937_64 rng(12);
    TensorD gain({2}), shift({2});
    gain.values = {1.3, 0.7};
    shift.values = {0.2, -0.4};
    Batch<double> batch;
    for (int i = 0; i < 2; ++i) {
        TensorD t({3, 3, 2});
        fdcheck::fill_gaussian(t, rng);
        batch.push_back(std::move(t));
    }
    Batch<double> w;
    for (int i = 0; i < 2; ++i) {
        TensorD t({3, 3, 2});
        fdcheck::fill_gaussian(t, rng);
        w.push_back(std::move(t));
    }
    std::vector<double> rm(2, 0.0), rv(2, 1.0);
    const auto loss = [&]() {
        const Batch<double> y = ops::batch_norm_channel(batch, gain, shift, rm, rv,
                                                        ops::NormMode::TrainFrozen);
        double s = 0;
        for (std::size_t i = 0; i < y.size(); ++i)
            for (std::size_t j = 0; j < y[i].values.size(); ++j)
                s += y[i].values[j] * w[i].values[j];
        return s;
    };
    ops::BatchNormCache<double> cache;
    ops::batch_norm_channel(batch, gain, shift, rm, rv, ops::NormMode::TrainFrozen, &cache);
    TensorD ggain({2}), gshift({2});
    const Batch<double> gin =
        ops::batch_norm_channel_backward(w, gain, cache, ggain, gshift);

    for (int probe = 0; probe < 20; ++probe) {
        const std::size_t bi = rng() % batch.size();
        const std::size_t i = rng() % batch[bi].values.size();
        CHECK(fdcheck::close(gin[bi].values[i],
                             fdcheck::central_diff(batch[bi], i, fdcheck::kStep64, loss),
                             fdcheck::kRelTol64));
    }
    for (std::size_t i = 0; i < 2; ++i) {
        CHECK(fdcheck::close(ggain.values[i],
                             fdcheck::central_diff(gain, i, fdcheck::kStep64, loss),
                             fdcheck::kRelTol64));
        CHECK(fdcheck::close(gshift.values[i],
                             fdcheck::central_diff(shift, i, fdcheck::kStep64, loss),
                             fdcheck::kRelTol64));
    }
}

TEST_CASE("adam first step, zero gradient, and quadratic descent") {
    // Hand evaluation: t=1, g=1 -> mhat = 1, vhat = 1, step = lr / (1 + eps).
    Param<double> p{"theta", TensorD({1}), TensorD({1})};
    p.value.values[0] = 1.0;
    p.grad.values[0] = 1.0;
    AdamState<double> st;
    st.init({&p});
    adam_step<double>({&p}, st, 0.0002);
    CHECK(p.value.values[0] == doctest::Approx(1.0 - 0.0002).epsilon(1e-6));
    CHECK(st.t == 1);

    // Zero gradient with zero state leaves the parameter unchanged.
    Param<double> q{"q", TensorD({1}), TensorD({1})};
    q.value.values[0] = 0.3;
    AdamState<double> st2;
    st2.init({&q});
    adam_step<double>({&q}, st2, 0.1);
    CHECK(q.value.values[0] == doctest::Approx(0.3));

    // 100 steps on f(theta) = theta^2 from 1 with lr 0.1, against an
    // independently coded scalar Adam recurrence.
    Param<double> r{"r", TensorD({1}), TensorD({1})};
    r.value.values[0] = 1.0;
    AdamState<double> st3;
    st3.init({&r});
    double ref = 1.0, m = 0.0, v = 0.0;
    double min_abs = 1.0;
    for (int t = 1; t <= 100; ++t) {
        r.grad.values[0] = 2.0 * r.value.values[0];
        adam_step<double>({&r}, st3, 0.1);
        const double g = 2.0 * ref;
        m = 0.9 * m + 0.1 * g;
        v = 0.999 * v + 0.001 * g * g;
        const double mhat = m / (1.0 - std::pow(0.9, t));
        const double vhat = v / (1.0 - std::pow(0.999, t));
        ref -= 0.1 * mhat / (std::sqrt(vhat) + 1e-8);
        CHECK(r.value.values[0] == doctest::Approx(ref).epsilon(1e-10));
        min_abs = std::min(min_abs, std::abs(ref));
    }
    CHECK(min_abs < 0.05);
    CHECK(std::abs(r.value.values[0]) < 0.5);
}

TEST_CASE("adam rejects NaN gradients naming the parameter") {
    Param<float> p{"conv7.kernel", Tensor({2}), Tensor({2})};
    p.value.values = {1.0f, 2.0f};
    p.grad.values = {0.5f, std::numeric_limits<float>::quiet_NaN()};
    AdamState<float> st;
    st.init({&p});
    CHECK_THROWS_AS(adam_step<float>({&p}, st, 0.1f), DiagnosticsError);
    try {
        adam_step<float>({&p}, st, 0.1f);
    } catch (const DiagnosticsError& e) {
        CHECK(e.param_name == "conv7.kernel");
    }
    // The step was not applied.
    CHECK(p.value.values[0] == 1.0f);
    CHECK(st.t == 0);
}

TEST_CASE("conv2d linearity in the input for zero bias") {
    std::mt19937_64 rng(13);
    TensorD x({4, 4, 2}), y({4, 4, 2}), k({3, 3, 2, 2}), b({2});
    fdcheck::fill_gaussian(x, rng);
    fdcheck::fill_gaussian(y, rng);
    fdcheck::fill_gaussian(k, rng);
    const double a = 1.7, bb = -0.4;
    TensorD mix({4, 4, 2});
    for (std::size_t i = 0; i < mix.values.size(); ++i)
        mix.values[i] = a * x.values[i] + bb * y.values[i];
    const TensorD lhs = ops::conv2d(mix, k, b);
    const TensorD cx = ops::conv2d(x, k, b), cy = ops::conv2d(y, k, b);
    for (std::size_t i = 0; i < lhs.values.size(); ++i)
        CHECK(lhs.values[i] ==
              doctest::Approx(a * cx.values[i] + bb * cy.values[i]).epsilon(1e-5));
}

TEST_CASE("shape rules: conv preserves, pool halves, tconv doubles") {
    Tensor x({6, 8, 3}), k({3, 3, 3, 5}), b({5});
    CHECK(ops::conv2d(x, k, b).shape == std::vector<std::int64_t>{6, 8, 5});
    CHECK(ops::avg_pool2(x).shape == std::vector<std::int64_t>{3, 4, 3});
    Tensor tk({4, 4, 3, 2}), tb({2});
    CHECK(ops::transposed_conv2d(x, tk, tb, 2).shape ==
          std::vector<std::int64_t>{12, 16, 2});
}

TEST_CASE("forward passes are bitwise deterministic") {
    std::mt19937_64 rng(14);
    Tensor x({7, 7, 2}), k({3, 3, 2, 4}), b({4});
    fdcheck::fill_gaussian(x, rng);
    fdcheck::fill_gaussian(k, rng);
    fdcheck::fill_gaussian(b, rng);
    const Tensor a = ops::conv2d(x, k, b);
    const Tensor c = ops::conv2d(x, k, b);
    CHECK(std::memcmp(a.values.data(), c.values.data(), a.values.size() * 4) == 0);
}

TEST_CASE("tensor dump format round trips") {
    std::mt19937_64 rng(15);
    Tensor t({3, 2, 5});
    fdcheck::fill_gaussian(t, rng);
    std::stringstream ss;
    dump_tensor(ss, t);
    // rank (8) + 3 extents (24) + 30 floats (120)
    CHECK(ss.str().size() == 8 + 24 + 4 * t.values.size());
    const Tensor back = load_tensor<float>(ss);
    CHECK(back.shape == t.shape);
    for (std::size_t i = 0; i < t.values.size(); ++i)
        CHECK(back.values[i] == t.values[i]);

    std::stringstream truncated(ss.str().substr(0, 40));
    CHECK_THROWS_AS(load_tensor<float>(truncated), FormatError);
}
