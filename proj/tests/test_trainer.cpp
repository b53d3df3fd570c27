#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <random>
#include <sstream>

#include "scan/checkpoint.hpp"
#include "scan/losses.hpp"
#include "scan/synthetic.hpp"
#include "scan/trainer.hpp"

using namespace scan;
namespace fs = std::filesystem;

namespace {

const double kLn2 = std::log(2.0);
const double kLn4 = std::log(4.0);

Tensor one_hot_pixel(std::int64_t c) {
    Tensor t({1, 1, 4});
    t.values[std::size_t(c)] = 1.0f;
    return t;
}

Tensor pred_pixel(float l, float r, float h, float b) {
    Tensor t({1, 1, 4});
    t.values = {l, r, h, b};
    return t;
}

std::vector<std::vector<float>> snapshot(Network<float>& net) {
    std::vector<std::vector<float>> out;
    for (auto* p : net.params()) out.push_back(p->value.values);
    for (auto& [name, buf] : net.state_buffers()) out.push_back(*buf);
    return out;
}

fs::path temp_dir(const char* tag) {
    const fs::path p = fs::temp_directory_path() / (std::string("scan_trainer_") + tag);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

TrainConfig tiny_config(TrainConfig::RunMode mode, int epochs, std::int64_t res) {
    TrainConfig cfg;
    cfg.mode = mode;
    cfg.epochs = epochs;
    cfg.pretrain_epochs = 0;
    cfg.batch_size = 2;
    cfg.seed = 77;
    cfg.resolution = res;
    return cfg;
}

}  // namespace

TEST_CASE("pixel loss closed-form values") {
    // Uniform prediction: every pixel costs ln 4.
    CHECK(pixel_loss_js(pred_pixel(0.25f, 0.25f, 0.25f, 0.25f), one_hot_pixel(kLeftLung)) ==
          doctest::Approx(kLn4).epsilon(1e-9));

    // Probability one half on the true class.
    CHECK(pixel_loss_js(pred_pixel(0.5f, 0.2f, 0.2f, 0.1f), one_hot_pixel(kLeftLung)) ==
          doctest::Approx(kLn2).epsilon(1e-6));

    // Probability 0.9 on the true class: -ln 0.9.
    CHECK(pixel_loss_js(pred_pixel(0.05f, 0.9f, 0.03f, 0.02f), one_hot_pixel(kRightLung)) ==
          doctest::Approx(0.1053605).epsilon(1e-5));

    // A perfect prediction only pays for the probability clip.
    const double perfect =
        pixel_loss_js(pred_pixel(0.0f, 0.0f, 0.0f, 1.0f), one_hot_pixel(kBackground));
    CHECK(perfect > 0.0);
    CHECK(perfect < 2e-7);

    // Averaging over pixels matches a brute-force sum on a random 2x2 map.
    std::mt19937_64 rng(3);
    Tensor pred({2, 2, 4}), label({2, 2, 4});
    double expect = 0;
    for (int p = 0; p < 4; ++p) {
        std::uniform_real_distribution<double> u(0.05, 1.0);
        double raw[4], denom = 0;
        for (double& v : raw) denom += (v = u(rng));
        for (int c = 0; c < 4; ++c) pred.values[std::size_t(p * 4 + c)] = float(raw[c] / denom);
        const int t = int(rng() % 4);
        label.values[std::size_t(p * 4 + t)] = 1.0f;
        expect += -std::log(double(pred.values[std::size_t(p * 4 + t)]));
    }
    CHECK(pixel_loss_js(pred, label) == doctest::Approx(expect / 4.0).epsilon(1e-6));

    // Labels must be exactly one-hot.
    Tensor soft({1, 1, 4});
    soft.values = {0.5f, 0.5f, 0.0f, 0.0f};
    CHECK_THROWS_AS(pixel_loss_js(pred, soft), ShapeError);
    CHECK_THROWS_AS(pixel_loss_js(pred_pixel(0.25f, 0.25f, 0.25f, 0.25f), soft),
                    ValidationError);
}

TEST_CASE("heart-unannotated pixels renormalize over the remaining classes") {
    // Dropping the heart channel rescales (0.1, 0.1, 0.6, 0.2) to mass 0.4,
    // so a background pixel costs -ln(0.2 / 0.4) = ln 2.
    const Tensor pred = pred_pixel(0.1f, 0.1f, 0.6f, 0.2f);
    const Tensor label = one_hot_pixel(kBackground);
    CHECK(pixel_loss_js(pred, label, true) ==
          doctest::Approx(-std::log(0.2)).epsilon(1e-6));
    CHECK(pixel_loss_js(pred, label, false) == doctest::Approx(kLn2).epsilon(1e-6));
}

TEST_CASE("logit-space loss agrees with the probability-space loss") {
    std::mt19937_64 rng(9);
    std::normal_distribution<double> g(0.0, 2.0);
    Tensor logits({3, 3, 4}), label({3, 3, 4});
    for (auto& v : logits.values) v = float(g(rng));
    // Heart-unannotated samples never carry heart targets, so draw labels
    // from the other three classes to keep both modes valid.
    const std::int64_t pool[3] = {kLeftLung, kRightLung, kBackground};
    for (int p = 0; p < 9; ++p)
        label.values[std::size_t(p) * 4 + std::size_t(pool[rng() % 3])] = 1.0f;

    for (const bool heart : {true, false}) {
        CAPTURE(heart);
        Tensor grad;
        const double from_logits = pixel_loss_from_logits(logits, label, heart, &grad);
        const double from_probs =
            pixel_loss_js(ops::softmax_channels(logits), label, heart);
        CHECK(from_logits == doctest::Approx(from_probs).epsilon(1e-6));
        if (!heart)
            for (int p = 0; p < 9; ++p)
                CHECK(grad.values[std::size_t(p * 4 + kHeart)] == 0.0f);
    }
}

TEST_CASE("binary loss values, gradient, and clipping") {
    CHECK(binary_loss_jd(0.5, 1) == doctest::Approx(kLn2).epsilon(1e-12));
    CHECK(binary_loss_jd(0.5, 0) == doctest::Approx(kLn2).epsilon(1e-12));
    CHECK(binary_loss_jd(0.9, 1) == doctest::Approx(0.1053605).epsilon(1e-5));

    // Saturated predictions stay finite through the clip.
    CHECK(std::isfinite(binary_loss_jd(0.0, 1)));
    CHECK(std::isfinite(binary_loss_jd(1.0, 0)));

    // Central-difference agreement away from the clip.
    for (const double t_hat : {0.2, 0.5, 0.8})
        for (const int t : {0, 1}) {
            const double fd =
                (binary_loss_jd(t_hat + 1e-6, t) - binary_loss_jd(t_hat - 1e-6, t)) / 2e-6;
            CHECK(binary_loss_jd_grad(t_hat, t) == doctest::Approx(fd).epsilon(1e-5));
        }
}

TEST_CASE("non-saturating generator term dominates the minimax one when fooled-ness is low") {
    // At t_hat = 0.01 the non-saturating slope is 1/t_hat = 100 while the
    // minimax slope is 1/(1 - t_hat), a ratio of 99.
    const double ns = std::abs(binary_loss_jd_grad(0.01, 1));
    const double mm = std::abs(binary_loss_jd_grad(0.01, 0));
    CHECK(ns / mm == doctest::Approx(99.0).epsilon(0.01));
}

TEST_CASE("objective reductions and the joint objective decomposition") {
    const std::int64_t R = 32;
    auto s = build_segmentor(5, R);
    auto d = build_critic(6, false, R);
    const auto samples = make_synthetic_dataset(3, R, 11);

    // lambda = 0 is exactly the summed pixel loss; the critic never runs.
    double pixel_sum = 0;
    for (const auto& smp : samples) {
        Tensor pred = forward_segment(s, smp.image, NormMode::Eval);
        pixel_sum += pixel_loss_js(pred, smp.label, smp.heart_annotated);
    }
    CHECK(segmentor_objective(s, &d, samples, 0.0) ==
          doctest::Approx(pixel_sum).epsilon(1e-9));
    CHECK(segmentor_objective<float>(s, nullptr, samples, 0.0) ==
          doctest::Approx(pixel_sum).epsilon(1e-9));

    // The critic objective is the sum of per-sample binary losses.
    double jd_sum = 0;
    for (const auto& smp : samples) {
        Tensor pred = forward_segment(s, smp.image, NormMode::Eval);
        jd_sum += binary_loss_jd(
            double(forward_critic(d, critic_mask_view(smp.label, smp.heart_annotated))), 1);
        jd_sum += binary_loss_jd(
            double(forward_critic(d, critic_mask_view(pred, smp.heart_annotated))), 0);
    }
    CHECK(critic_objective(s, d, samples) == doctest::Approx(jd_sum).epsilon(1e-9));

    // The joint objective splits into the pixel part plus lambda times the
    // critic part, evaluated on the same predictions.
    const double lambda = 0.001;
    double joint = 0;
    for (const auto& smp : samples) {
        Tensor pred = forward_segment(s, smp.image, NormMode::Eval);
        joint += pixel_loss_js(pred, smp.label, smp.heart_annotated);
        joint += lambda * binary_loss_jd(
            double(forward_critic(d, critic_mask_view(smp.label, smp.heart_annotated))), 1);
        joint += lambda * binary_loss_jd(
            double(forward_critic(d, critic_mask_view(pred, smp.heart_annotated))), 0);
    }
    CHECK(joint == doctest::Approx(pixel_sum + lambda * critic_objective(s, d, samples))
                       .epsilon(1e-9));
}

TEST_CASE("a maximally confused critic contributes exactly ln 2 per term") {
    const std::int64_t R = 32;
    auto s = build_segmentor(15, R);
    auto d = build_critic(16, false, R);
    // Zeroing the head makes the critic emit sigmoid(0) = 0.5 for any input.
    for (auto* p : d.net.params())
        if (p->name.rfind("critic.head", 0) == 0)
            std::fill(p->value.values.begin(), p->value.values.end(), 0.0f);

    const auto samples = make_synthetic_dataset(2, R, 21);
    CHECK(critic_objective(s, d, samples) ==
          doctest::Approx(2.0 * double(samples.size()) * kLn2).epsilon(1e-9));
    const double pixel_sum = segmentor_objective<float>(s, nullptr, samples, 0.0);
    CHECK(segmentor_objective(s, &d, samples, 0.001) ==
          doctest::Approx(pixel_sum + 0.001 * double(samples.size()) * kLn2).epsilon(1e-9));
}

TEST_CASE("critic predictions ignore the heart channel for unannotated samples") {
    const std::int64_t R = 32;
    auto d = build_critic(8, false, R);
    std::mt19937_64 rng(2);
    Tensor logits({R, R, 4});
    std::normal_distribution<double> g;
    for (auto& v : logits.values) v = float(g(rng));
    const Tensor base = ops::softmax_channels(logits);

    // Move some heart mass around; the masked view must not notice.
    Tensor shifted = base;
    for (std::int64_t p = 0; p < R * R; ++p) shifted.values[p * 4 + kHeart] *= 0.25f;
    const Tensor a = critic_mask_view(base, false);
    const Tensor b = critic_mask_view(shifted, false);
    for (std::int64_t p = 0; p < R * R; ++p) CHECK(a.values[p * 4 + kHeart] == 0.0f);
    CHECK(forward_critic(d, a) == forward_critic(d, b));

    // Annotated samples pass through untouched.
    CHECK(critic_mask_view(base, true).values == base.values);
}

TEST_CASE("config validation") {
    TrainConfig cfg;
    cfg.lambda = -1;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = {};
    cfg.batch_size = 0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = {};
    cfg.epochs = 10;
    cfg.pretrain_epochs = 20;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = {};
    cfg.s_steps_per_d_step = 0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);

    // The trainer validates its config on construction.
    auto s = build_segmentor(1, 16);
    CHECK_THROWS_AS(Trainer(s, nullptr, cfg), ConfigError);
}

TEST_CASE("alternating schedule takes five segmentor steps per critic step") {
    const std::int64_t R = 16;
    auto s = build_segmentor(31, R);
    auto d = build_critic(32, false, R);
    const auto ds = make_synthetic_dataset(4, R, 41);
    TrainConfig cfg = tiny_config(TrainConfig::RunMode::Scan, 1, R);

    auto critic_before = snapshot(d.net);
    auto seg_before = snapshot(s.net);
    Trainer t(s, &d, cfg);
    t.run(ds);

    // 4 samples / batch 2 = 2 minibatches: 10 segmentor steps, 2 critic steps.
    CHECK(t.log().count_kind("segmentor") == 10);
    CHECK(t.log().count_kind("critic") == 2);
    CHECK(t.log().count_kind("segmentor") ==
          cfg.s_steps_per_d_step * t.log().count_kind("critic"));
    CHECK(t.log().count_kind("shuffle") == 1);
    CHECK(t.log().count_kind("pretrain") == 0);

    // Both players actually moved.
    CHECK(snapshot(s.net) != seg_before);
    CHECK(snapshot(d.net) != critic_before);

    // Steps number consecutively across kinds.
    std::int64_t expect = 1;
    for (const auto& r : t.log().records)
        if (r.kind != "shuffle" && r.kind != "diagnostic") CHECK(r.step == expect++);
}

TEST_CASE("segmentor steps leave the critic untouched and vice versa") {
    const std::int64_t R = 16;
    auto s = build_segmentor(33, R);
    auto d = build_critic(34, false, R);
    const auto ds = make_synthetic_dataset(2, R, 43);

    // Pretraining never touches the critic even when one is attached.
    TrainConfig cfg = tiny_config(TrainConfig::RunMode::Scan, 1, R);
    cfg.pretrain_epochs = 1;
    const auto critic_before = snapshot(d.net);
    Trainer t(s, &d, cfg);
    t.pretrain(ds);
    CHECK(snapshot(d.net) == critic_before);
    CHECK(t.log().count_kind("pretrain") == 1);
}

TEST_CASE("lambda zero training reproduces the pixel-only trajectory bitwise") {
    const std::int64_t R = 16;
    const auto ds = make_synthetic_dataset(4, R, 51);

    auto s1 = build_segmentor(61, R);
    TrainConfig a = tiny_config(TrainConfig::RunMode::FcnOnly, 2, R);
    Trainer ta(s1, nullptr, a);
    ta.run(ds);

    auto s2 = build_segmentor(61, R);
    auto d = build_critic(62, false, R);
    TrainConfig b = tiny_config(TrainConfig::RunMode::Scan, 2, R);
    b.lambda = 0.0;
    b.s_steps_per_d_step = 1;
    Trainer tb(s2, &d, b);
    tb.run(ds);

    // Same seed, same shuffle stream, lambda = 0: interleaved critic steps
    // must not perturb the segmentor at all.
    CHECK(snapshot(s1.net) == snapshot(s2.net));

    std::vector<double> ja, jb;
    for (const auto& r : ta.log().records)
        if (r.kind == "pretrain") ja.push_back(r.js);
    for (const auto& r : tb.log().records)
        if (r.kind == "segmentor") {
            CHECK(r.adv == 0.0);
            jb.push_back(r.js);
        }
    CHECK(ja == jb);
}

TEST_CASE("shuffle records hold a replayable permutation") {
    const std::int64_t R = 16;
    auto s = build_segmentor(71, R);
    const auto ds = make_synthetic_dataset(5, R, 53);
    TrainConfig cfg = tiny_config(TrainConfig::RunMode::FcnOnly, 2, R);
    Trainer t(s, nullptr, cfg);
    t.run(ds);

    std::vector<std::string> orders;
    for (const auto& r : t.log().records)
        if (r.kind == "shuffle") orders.push_back(r.note);
    REQUIRE(orders.size() == 2);
    for (const auto& o : orders) {
        std::vector<int> idx;
        std::stringstream ss(o);
        for (std::string tok; std::getline(ss, tok, ',');) idx.push_back(std::stoi(tok));
        std::vector<int> sorted = idx;
        std::sort(sorted.begin(), sorted.end());
        CHECK(sorted == std::vector<int>{0, 1, 2, 3, 4});
    }
    CHECK(orders[0] != orders[1]);

    // Same seed, same permutations.
    auto s2 = build_segmentor(71, R);
    Trainer t2(s2, nullptr, cfg);
    t2.run(ds);
    std::vector<std::string> orders2;
    for (const auto& r : t2.log().records)
        if (r.kind == "shuffle") orders2.push_back(r.note);
    CHECK(orders == orders2);
}

TEST_CASE("pixel loss descends over pretraining epochs") {
    const std::int64_t R = 32;
    auto s = build_segmentor(81, R);
    const auto ds = make_synthetic_dataset(4, R, 55);
    TrainConfig cfg;
    cfg.mode = TrainConfig::RunMode::FcnOnly;
    cfg.epochs = 15;
    cfg.pretrain_epochs = 0;
    cfg.batch_size = 4;
    cfg.lr = 0.001;
    cfg.seed = 5;
    cfg.resolution = R;
    const TrainLog log = pretrain(s, ds, cfg);

    double first = -1, last = -1;
    for (const auto& r : log.records)
        if (r.kind == "pretrain") {
            if (first < 0) first = r.js;
            last = r.js;
        }
    REQUIRE(first > 0);
    CHECK(last < first);
    CHECK(log.count_kind("pretrain") == 15);
}

TEST_CASE("checkpoints and trainer state resume bitwise") {
    const std::int64_t R = 16;
    const auto ds = make_synthetic_dataset(4, R, 57);
    const fs::path dir = temp_dir("resume");

    TrainConfig cfg = tiny_config(TrainConfig::RunMode::Scan, 2, R);
    cfg.checkpoint_every = 1;
    cfg.checkpoint_dir = dir.string();

    auto s1 = build_segmentor(91, R);
    auto d1 = build_critic(92, false, R);
    Trainer t1(s1, &d1, cfg);
    t1.run(ds);
    CHECK(t1.epochs_done() == 2);
    for (const char* f : {"seg_epoch_0001.ckpt", "critic_epoch_0001.ckpt",
                          "trainer_epoch_0001.state", "seg_epoch_0002.ckpt",
                          "critic_epoch_0002.ckpt", "trainer_epoch_0002.state"})
        CHECK(fs::exists(dir / f));

    // Fresh networks, restore the epoch-1 snapshot, train the second epoch.
    auto s2 = build_segmentor(191, R);
    auto d2 = build_critic(192, false, R);
    load_checkpoint((dir / "seg_epoch_0001.ckpt").string(), s2.net);
    load_checkpoint((dir / "critic_epoch_0001.ckpt").string(), d2.net);
    TrainConfig cfg2 = cfg;
    cfg2.checkpoint_dir.clear();
    Trainer t2(s2, &d2, cfg2);
    t2.load_state((dir / "trainer_epoch_0001.state").string());
    CHECK(t2.epochs_done() == 1);
    t2.run(ds);

    CHECK(snapshot(s1.net) == snapshot(s2.net));
    CHECK(snapshot(d1.net) == snapshot(d2.net));

    // Checkpoints refuse a mismatched architecture.
    auto wrong = build_critic(1, true, R);
    CHECK_THROWS_AS(
        load_checkpoint((dir / "critic_epoch_0001.ckpt").string(), wrong.net), FormatError);
    fs::remove_all(dir);
}

TEST_CASE("a non-finite loss halts training with a diagnostic record") {
    const std::int64_t R = 16;
    auto s = build_segmentor(95, R);
    auto ds = make_synthetic_dataset(2, R, 59);
    ds[0].image.values[0] = std::numeric_limits<float>::quiet_NaN();

    TrainConfig cfg = tiny_config(TrainConfig::RunMode::FcnOnly, 1, R);
    cfg.batch_size = 2;
    Trainer t(s, nullptr, cfg);
    const auto before = snapshot(s.net);
    CHECK_THROWS_AS(t.pretrain(ds), DiagnosticsError);
    CHECK(t.log().count_kind("diagnostic") == 1);
    CHECK(t.log().count_kind("pretrain") == 0);
    // The poisoned step never applied an update; learnables are untouched.
    std::size_t i = 0;
    for (auto* p : s.net.params()) CHECK(p->value.values == before[i++]);
}

TEST_CASE("adam refuses non-finite gradients before touching the parameters") {
    Param<float> p;
    p.name = "w";
    p.value = Tensor({2});
    p.value.values = {1.0f, 2.0f};
    p.grad = Tensor({2});
    p.grad.values = {0.1f, std::numeric_limits<float>::infinity()};
    AdamState<float> st;
    st.init({&p});
    try {
        adam_step<float>({&p}, st, 0.01f);
        FAIL("expected DiagnosticsError");
    } catch (const DiagnosticsError& e) {
        CHECK(e.param_name == "w");
    }
    CHECK(p.value.values == std::vector<float>{1.0f, 2.0f});
    CHECK(st.t == 0);
}

TEST_CASE("train log serializes one JSON record per line") {
    const std::int64_t R = 16;
    auto s = build_segmentor(97, R);
    const auto ds = make_synthetic_dataset(2, R, 61);
    TrainConfig cfg = tiny_config(TrainConfig::RunMode::FcnOnly, 1, R);
    Trainer t(s, nullptr, cfg);
    t.run(ds);

    const fs::path dir = temp_dir("log");
    const fs::path path = dir / "train.jsonl";
    t.log().write_jsonl(path.string());
    std::ifstream is(path);
    std::size_t lines = 0;
    for (std::string line; std::getline(is, line); ++lines) {
        CHECK(line.front() == '{');
        CHECK(line.back() == '}');
    }
    CHECK(lines == t.log().records.size());
    fs::remove_all(dir);
}
