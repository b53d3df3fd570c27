#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "scan/model_zoo.hpp"
#include "scan/postprocess.hpp"
#include "scan/sample.hpp"

namespace scan {

// Intersection-over-union and Dice overlap of two binary masks. Both masks
// empty is defined as perfect agreement (1.0).
double iou(const BinaryMask& p, const BinaryMask& g);
double dice(const BinaryMask& p, const BinaryMask& g);

struct MetricsRow {
    std::string name;       // "Left Lung", "Right Lung", "Both Lungs", "Heart"
    double iou = 0;         // mean over evaluated images
    double iou_se = 0;      // bootstrap standard error over images
    double dice = 0;
    double dice_se = 0;
    std::size_t samples = 0;
};

struct MetricsReport {
    std::vector<MetricsRow> rows;
    std::size_t sample_count = 0;
    bool postprocessed = false;
    double mean_forward_ms = 0;  // per-image wall time of the predictor
};

inline constexpr int kBootstrapResamples = 1000;
inline constexpr std::uint64_t kBootstrapSeed = 1234;

// Maps one sample to class probabilities [H,W,4].
using Predictor = std::function<Tensor(const ImageSample&)>;

// Argmax, optional post-processing (hole fill then largest component, lungs
// and heart only), per-class IoU/Dice per image, bootstrap aggregation.
// "Both Lungs" scores the union of the two lung masks. Heart rows cover only
// heart-annotated samples and are omitted when no sample has one.
MetricsReport evaluate_predictions(const Predictor& predict,
                                   const std::vector<ImageSample>& samples,
                                   bool postprocess,
                                   std::uint64_t bootstrap_seed = kBootstrapSeed,
                                   int resamples = kBootstrapResamples);

// Same, with the predictor = segmentor forward pass in eval mode.
MetricsReport evaluate(Segmentor& segmentor, const std::vector<ImageSample>& samples,
                       bool postprocess,
                       std::uint64_t bootstrap_seed = kBootstrapSeed,
                       int resamples = kBootstrapResamples);

// Fixed-width text table of the report.
std::string format_report_text(const MetricsReport& report);

// JSON document (serialized) with the same content.
std::string report_to_json(const MetricsReport& report);

}  // namespace scan
