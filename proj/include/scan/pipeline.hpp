#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "scan/sample.hpp"
#include "scan/tensor.hpp"

namespace scan {

inline constexpr std::uint32_t kPipelineVersion = 1;

// Bilinear interpolation with half-pixel-center sampling (source coordinate
// (j + 0.5) * src/dst - 0.5, clamped). Channels resize independently.
Tensor resize_bilinear(const Tensor& image, std::int64_t out_h, std::int64_t out_w);

// Subtract the image mean, divide by sqrt(population variance + 1e-8).
Tensor normalize_per_image(const Tensor& image);

struct DatasetSplit {
    std::vector<std::string> development;
    std::vector<std::string> evaluation;
    std::uint64_t seed = 0;
};

// Seeded permutation split. Duplicate ids are rejected.
DatasetSplit make_split(const std::vector<std::string>& ids, std::uint64_t seed,
                        std::size_t dev_count);

void save_split(const std::string& path, const DatasetSplit& split);
DatasetSplit load_split(const std::string& path);

// Directory layout of one dataset, parsed from a JSON manifest file:
//   { "kind": "jsrt" | "montgomery",
//     "images": "<dir>", "image_ext": ".IMG",
//     "masks": { "left_lung": "<dir>", "right_lung": "<dir>", "heart": "<dir>" },
//     "mask_ext": ".png", "cache_dir": "<dir>" }
// "heart" is optional; without it samples carry heart_annotated = false.
struct DatasetManifest {
    std::string kind;            // "jsrt" uses the raw loader, anything else PNG
    std::string image_dir;
    std::string image_ext;
    std::map<std::string, std::string> mask_dirs;  // organ -> directory
    std::string mask_ext = ".png";
    std::string cache_dir;       // empty disables the preprocessed-tensor cache
    std::int64_t resolution = 400;
};

DatasetManifest load_dataset_manifest(const std::string& path,
                                      const std::string& root_override = "");

// Sorted id list (filename stems) found under the manifest's image directory.
std::vector<std::string> list_dataset_ids(const DatasetManifest& manifest);

struct LoadFailure {
    std::string id;
    std::string error;
};

struct LoadReport {
    std::size_t loaded = 0;
    std::vector<LoadFailure> failures;
    std::size_t overlap_conflicts = 0;  // foreground pixels claimed by 2+ organs
    std::size_t cache_hits = 0;
};

// Loads one sample end to end: decode, resize to the target resolution,
// one-hot the masks with channel priority (left > right > heart > background),
// then per-image normalization.
ImageSample load_sample(const DatasetManifest& manifest, const std::string& id,
                        LoadReport* report = nullptr);

// Loads every id in order. Failures are collected into the report; unless
// skip_failures is set, any failure aborts with a ValidationError.
std::vector<ImageSample> assemble_samples(const DatasetManifest& manifest,
                                          const std::vector<std::string>& ids,
                                          LoadReport& report, bool skip_failures = false);

}  // namespace scan
