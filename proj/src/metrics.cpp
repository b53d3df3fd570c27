#include "scan/metrics.hpp"

#include <chrono>
#include <cmath>
#include <random>
#include <sstream>

#include <json.hpp>

#include "scan/errors.hpp"

namespace scan {

namespace {

struct Overlap {
    std::int64_t inter = 0;
    std::int64_t p = 0;
    std::int64_t g = 0;
};

Overlap overlap(const BinaryMask& p, const BinaryMask& g) {
    if (p.h != g.h || p.w != g.w)
        throw ShapeError("mask overlap: shape mismatch " + std::to_string(p.h) + "x" +
                         std::to_string(p.w) + " vs " + std::to_string(g.h) + "x" +
                         std::to_string(g.w));
    Overlap o;
    for (std::size_t i = 0; i < p.values.size(); ++i) {
        o.inter += p.values[i] & g.values[i];
        o.p += p.values[i];
        o.g += g.values[i];
    }
    return o;
}

}  // namespace

double iou(const BinaryMask& p, const BinaryMask& g) {
    const Overlap o = overlap(p, g);
    const std::int64_t uni = o.p + o.g - o.inter;
    if (uni == 0) return 1.0;  // both empty: perfect agreement by convention
    return double(o.inter) / double(uni);
}

double dice(const BinaryMask& p, const BinaryMask& g) {
    const Overlap o = overlap(p, g);
    if (o.p + o.g == 0) return 1.0;
    return 2.0 * double(o.inter) / double(o.p + o.g);
}

namespace {

BinaryMask mask_union(const BinaryMask& a, const BinaryMask& b) {
    BinaryMask out(a.h, a.w);
    for (std::size_t i = 0; i < out.values.size(); ++i)
        out.values[i] = a.values[i] | b.values[i];
    return out;
}

// Bootstrap standard error of the mean: std over seeded resample means.
double bootstrap_se(const std::vector<double>& per_image, std::mt19937_64& rng,
                    int resamples) {
    if (per_image.size() < 2) return 0.0;
    const std::size_t n = per_image.size();
    std::vector<double> means(static_cast<std::size_t>(resamples), 0.0);
    for (auto& m : means) {
        double sum = 0;
        for (std::size_t i = 0; i < n; ++i) sum += per_image[rng() % n];
        m = sum / double(n);
    }
    double mean = 0;
    for (double m : means) mean += m;
    mean /= double(means.size());
    double var = 0;
    for (double m : means) var += (m - mean) * (m - mean);
    var /= double(means.size());
    return std::sqrt(var);
}

double mean_of(const std::vector<double>& v) {
    double s = 0;
    for (double x : v) s += x;
    return v.empty() ? 0.0 : s / double(v.size());
}

}  // namespace

MetricsReport evaluate_predictions(const Predictor& predict,
                                   const std::vector<ImageSample>& samples,
                                   bool postprocess, std::uint64_t bootstrap_seed,
                                   int resamples) {
    if (samples.empty()) throw ConfigError("evaluate: empty sample list");

    struct Track {
        std::string name;
        std::vector<double> ious, dices;
    };
    Track lungs_l{"Left Lung", {}, {}}, lungs_r{"Right Lung", {}, {}};
    Track both{"Both Lungs", {}, {}}, heart{"Heart", {}, {}};

    double total_ms = 0;
    for (const auto& sample : samples) {
        const auto t0 = std::chrono::steady_clock::now();
        Tensor probs = predict(sample);
        total_ms += std::chrono::duration<double, std::milli>(
                        std::chrono::steady_clock::now() - t0)
                        .count();

        auto pred = argmax_masks(probs);
        auto truth = argmax_masks(sample.label);
        if (postprocess)
            for (std::int64_t c : {kLeftLung, kRightLung, kHeart})
                pred[std::size_t(c)] = postprocess_mask(pred[std::size_t(c)]);

        const auto score = [&](Track& t, const BinaryMask& p, const BinaryMask& g) {
            t.ious.push_back(iou(p, g));
            t.dices.push_back(dice(p, g));
        };
        score(lungs_l, pred[kLeftLung], truth[kLeftLung]);
        score(lungs_r, pred[kRightLung], truth[kRightLung]);
        score(both, mask_union(pred[kLeftLung], pred[kRightLung]),
              mask_union(truth[kLeftLung], truth[kRightLung]));
        if (sample.heart_annotated) score(heart, pred[kHeart], truth[kHeart]);
    }

    MetricsReport report;
    report.sample_count = samples.size();
    report.postprocessed = postprocess;
    report.mean_forward_ms = total_ms / double(samples.size());
    std::mt19937_64 rng(bootstrap_seed);
    for (Track* t : {&lungs_l, &lungs_r, &both, &heart}) {
        if (t->ious.empty()) continue;  // drops Heart on heart-unannotated sets
        MetricsRow row;
        row.name = t->name;
        row.samples = t->ious.size();
        row.iou = mean_of(t->ious);
        row.iou_se = bootstrap_se(t->ious, rng, resamples);
        row.dice = mean_of(t->dices);
        row.dice_se = bootstrap_se(t->dices, rng, resamples);
        report.rows.push_back(std::move(row));
    }
    return report;
}

MetricsReport evaluate(Segmentor& segmentor, const std::vector<ImageSample>& samples,
                       bool postprocess, std::uint64_t bootstrap_seed, int resamples) {
    return evaluate_predictions(
        [&segmentor](const ImageSample& s) {
            return forward_segment(segmentor, s.image, NormMode::Eval);
        },
        samples, postprocess, bootstrap_seed, resamples);
}

std::string format_report_text(const MetricsReport& report) {
    std::ostringstream os;
    os << "class        IoU              Dice             n\n";
    os.setf(std::ios::fixed);
    os.precision(4);
    for (const auto& r : report.rows) {
        os << r.name;
        for (std::size_t i = r.name.size(); i < 13; ++i) os << ' ';
        os << r.iou << " +/- " << r.iou_se << "  " << r.dice << " +/- " << r.dice_se
           << "  " << r.samples << "\n";
    }
    // Wall time stays out of the rendered reports so identical runs produce
    // byte-identical files; callers read mean_forward_ms off the struct.
    os << "images: " << report.sample_count
       << (report.postprocessed ? ", post-processed" : ", raw argmax") << "\n";
    return os.str();
}

std::string report_to_json(const MetricsReport& report) {
    nlohmann::json rows = nlohmann::json::array();
    for (const auto& r : report.rows)
        rows.push_back({{"class", r.name},
                        {"iou", r.iou},
                        {"iou_se", r.iou_se},
                        {"dice", r.dice},
                        {"dice_se", r.dice_se},
                        {"samples", r.samples}});
    nlohmann::json j = {{"rows", rows},
                        {"sample_count", report.sample_count},
                        {"postprocessed", report.postprocessed}};
    return j.dump(2);
}

}  // namespace scan
