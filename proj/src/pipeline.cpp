#include "scan/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <random>
#include <set>
#include <sstream>

#include <json.hpp>

#include "scan/errors.hpp"
#include "scan/image_io.hpp"

namespace scan {

namespace fs = std::filesystem;
using json = nlohmann::json;

Tensor resize_bilinear(const Tensor& image, std::int64_t out_h, std::int64_t out_w) {
    if (image.shape.size() != 3)
        throw ShapeError("resize_bilinear: needs [H,W,C], got " + image.shape_str());
    const std::int64_t H = image.shape[0], W = image.shape[1], C = image.shape[2];
    if (H < 2 || W < 2)
        throw ShapeError("resize_bilinear: source extents must be >= 2, got " +
                         image.shape_str());
    Tensor out({out_h, out_w, C});
    const double sy_scale = double(H) / double(out_h);
    const double sx_scale = double(W) / double(out_w);
    for (std::int64_t j = 0; j < out_h; ++j) {
        double sy = (double(j) + 0.5) * sy_scale - 0.5;
        sy = std::clamp(sy, 0.0, double(H - 1));
        const std::int64_t y0 = std::int64_t(sy);
        const std::int64_t y1 = std::min(y0 + 1, H - 1);
        const double fy = sy - double(y0);
        for (std::int64_t k = 0; k < out_w; ++k) {
            double sx = (double(k) + 0.5) * sx_scale - 0.5;
            sx = std::clamp(sx, 0.0, double(W - 1));
            const std::int64_t x0 = std::int64_t(sx);
            const std::int64_t x1 = std::min(x0 + 1, W - 1);
            const double fx = sx - double(x0);
            for (std::int64_t c = 0; c < C; ++c) {
                const double top = (1 - fx) * image.at(y0, x0, c) + fx * image.at(y0, x1, c);
                const double bot = (1 - fx) * image.at(y1, x0, c) + fx * image.at(y1, x1, c);
                out.at(j, k, c) = float((1 - fy) * top + fy * bot);
            }
        }
    }
    return out;
}

Tensor normalize_per_image(const Tensor& image) {
    double mean = 0;
    for (float v : image.values) mean += v;
    mean /= double(image.values.size());
    double var = 0;
    for (float v : image.values) {
        const double d = v - mean;
        var += d * d;
    }
    var /= double(image.values.size());  // population variance
    const double inv = 1.0 / std::sqrt(var + 1e-8);
    Tensor out(image.shape);
    for (std::size_t i = 0; i < out.values.size(); ++i)
        out.values[i] = float((image.values[i] - mean) * inv);
    return out;
}

DatasetSplit make_split(const std::vector<std::string>& ids, std::uint64_t seed,
                        std::size_t dev_count) {
    std::set<std::string> unique(ids.begin(), ids.end());
    if (unique.size() != ids.size())
        throw ValidationError("make_split: dataset contains duplicate ids");
    if (dev_count >= ids.size())
        throw ConfigError("make_split: dev_count " + std::to_string(dev_count) +
                          " must be smaller than dataset size " + std::to_string(ids.size()));
    std::vector<std::string> perm = ids;
    std::mt19937_64 rng(seed);
    for (std::size_t i = perm.size(); i > 1; --i)
        std::swap(perm[i - 1], perm[rng() % i]);
    DatasetSplit split;
    split.seed = seed;
    split.development.assign(perm.begin(), perm.begin() + std::ptrdiff_t(dev_count));
    split.evaluation.assign(perm.begin() + std::ptrdiff_t(dev_count), perm.end());
    return split;
}

void save_split(const std::string& path, const DatasetSplit& split) {
    std::ofstream os(path);
    if (!os) throw ConfigError("cannot write split file '" + path + "'");
    os << "# scan split seed=" << split.seed << "\n[development]\n";
    for (const auto& id : split.development) os << id << "\n";
    os << "[evaluation]\n";
    for (const auto& id : split.evaluation) os << id << "\n";
}

DatasetSplit load_split(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot read split file '" + path + "'");
    DatasetSplit split;
    std::vector<std::string>* target = nullptr;
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        if (line.rfind("# scan split seed=", 0) == 0) {
            split.seed = std::stoull(line.substr(18));
        } else if (line == "[development]") {
            target = &split.development;
        } else if (line == "[evaluation]") {
            target = &split.evaluation;
        } else {
            if (!target) throw FormatError("split file '" + path + "': id before section");
            target->push_back(line);
        }
    }
    return split;
}

namespace {

std::string resolve(const std::string& root, const std::string& path) {
    if (root.empty() || path.empty() || fs::path(path).is_absolute()) return path;
    return (fs::path(root) / path).string();
}

}  // namespace

DatasetManifest load_dataset_manifest(const std::string& path,
                                      const std::string& root_override) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot read dataset manifest '" + path + "'");
    json j;
    try {
        is >> j;
    } catch (const json::exception& e) {
        throw FormatError("dataset manifest '" + path + "': " + e.what());
    }
    DatasetManifest m;
    m.kind = j.value("kind", "");
    if (m.kind.empty()) throw ConfigError("dataset manifest: missing 'kind'");
    m.image_dir = resolve(root_override, j.value("images", ""));
    if (m.image_dir.empty()) throw ConfigError("dataset manifest: missing 'images'");
    m.image_ext = j.value("image_ext", m.kind == "jsrt" ? ".IMG" : ".png");
    m.mask_ext = j.value("mask_ext", ".png");
    m.cache_dir = resolve(root_override, j.value("cache_dir", ""));
    m.resolution = j.value("resolution", std::int64_t(400));
    if (j.contains("masks"))
        for (auto& [organ, dir] : j["masks"].items())
            m.mask_dirs[organ] = resolve(root_override, dir.get<std::string>());
    if (!m.mask_dirs.count("left_lung") || !m.mask_dirs.count("right_lung"))
        throw ConfigError("dataset manifest: masks.left_lung and masks.right_lung required");
    return m;
}

std::vector<std::string> list_dataset_ids(const DatasetManifest& manifest) {
    if (!fs::is_directory(manifest.image_dir))
        throw ConfigError("dataset image directory '" + manifest.image_dir +
                          "' does not exist");
    std::vector<std::string> ids;
    for (const auto& e : fs::directory_iterator(manifest.image_dir))
        if (e.is_regular_file() && e.path().extension() == manifest.image_ext)
            ids.push_back(e.path().stem().string());
    std::sort(ids.begin(), ids.end());
    return ids;
}

namespace {

constexpr std::uint64_t kFnvOffset = 14695981039346656037ull;
constexpr std::uint64_t kFnvPrime = 1099511628211ull;

std::uint64_t fnv_file(std::uint64_t h, const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw FormatError("cannot open '" + path + "'");
    char buf[1 << 16];
    while (is) {
        is.read(buf, sizeof(buf));
        for (std::streamsize i = 0; i < is.gcount(); ++i) {
            h ^= static_cast<unsigned char>(buf[i]);
            h *= kFnvPrime;
        }
    }
    return h;
}

std::uint64_t cache_key(const DatasetManifest& m, const std::string& id,
                        const std::vector<std::string>& sources) {
    std::uint64_t h = kFnvOffset;
    const auto mix = [&h](std::uint64_t v) {
        for (int i = 0; i < 8; ++i) {
            h ^= (v >> (8 * i)) & 0xff;
            h *= kFnvPrime;
        }
    };
    mix(kPipelineVersion);
    mix(std::uint64_t(m.resolution));
    for (const auto& s : sources) h = fnv_file(h, s);
    (void)id;
    return h;
}

constexpr char kCacheMagic[8] = {'S', 'C', 'A', 'N', 'C', 'A', 'C', '1'};

bool try_load_cached(const std::string& path, std::uint64_t key, ImageSample& out) {
    std::ifstream is(path, std::ios::binary);
    if (!is) return false;
    char magic[8];
    is.read(magic, 8);
    if (!is || std::memcmp(magic, kCacheMagic, 8) != 0) return false;
    if (detail::get_u64le(is) != key) return false;
    out.heart_annotated = detail::get_u64le(is) != 0;
    out.image = load_tensor<float>(is);
    out.label = load_tensor<float>(is);
    return bool(is);
}

void write_cached(const std::string& path, std::uint64_t key, const ImageSample& s) {
    std::ofstream os(path, std::ios::binary);
    if (!os) return;  // cache is best effort
    os.write(kCacheMagic, 8);
    detail::put_u64le(os, key);
    detail::put_u64le(os, s.heart_annotated ? 1 : 0);
    dump_tensor(os, s.image);
    dump_tensor(os, s.label);
}

}  // namespace

ImageSample load_sample(const DatasetManifest& manifest, const std::string& id,
                        LoadReport* report) {
    const std::string image_path =
        (fs::path(manifest.image_dir) / (id + manifest.image_ext)).string();

    // Fixed channel priority: left lung > right lung > heart > background.
    const std::vector<std::string> organs = {"left_lung", "right_lung", "heart"};
    std::vector<std::string> mask_paths;
    for (const auto& organ : organs) {
        auto it = manifest.mask_dirs.find(organ);
        if (it == manifest.mask_dirs.end()) continue;
        const std::string p = (fs::path(it->second) / (id + manifest.mask_ext)).string();
        if (!fs::is_regular_file(p))
            throw FormatError("sample '" + id + "': missing mask file '" + p + "'");
        mask_paths.push_back(p);
    }

    const bool heart = manifest.mask_dirs.count("heart") > 0;
    std::uint64_t key = 0;
    std::string cache_path;
    if (!manifest.cache_dir.empty()) {
        std::vector<std::string> sources = {image_path};
        sources.insert(sources.end(), mask_paths.begin(), mask_paths.end());
        key = cache_key(manifest, id, sources);
        cache_path = (fs::path(manifest.cache_dir) / (id + ".bin")).string();
        ImageSample cached;
        cached.id = id;
        if (try_load_cached(cache_path, key, cached)) {
            if (report) ++report->cache_hits;
            return cached;
        }
    }

    Tensor raw = manifest.kind == "jsrt" ? load_jsrt_image(image_path)
                                         : load_png_image(image_path);
    const std::int64_t R = manifest.resolution;

    ImageSample sample;
    sample.id = id;
    sample.heart_annotated = heart;
    sample.image = normalize_per_image(resize_bilinear(raw, R, R));

    std::vector<Tensor> organ_masks;
    for (const auto& p : mask_paths) {
        Tensor m = resize_bilinear(load_mask_png(p), R, R);
        for (auto& v : m.values) v = v >= 0.5f ? 1.0f : 0.0f;  // re-binarize after resize
        organ_masks.push_back(std::move(m));
    }

    const std::int64_t num_classes = kBackground + 1;
    sample.label = Tensor({R, R, num_classes});
    for (std::int64_t p = 0; p < R * R; ++p) {
        int claims = 0;
        std::int64_t winner = -1;
        for (std::size_t o = 0; o < organ_masks.size(); ++o)
            if (organ_masks[o].values[std::size_t(p)] == 1.0f) {
                ++claims;
                if (winner < 0) winner = std::int64_t(o);
            }
        if (claims > 1 && report) ++report->overlap_conflicts;
        const std::int64_t ch = winner < 0 ? kBackground : winner;
        sample.label.values[std::size_t(p * num_classes + ch)] = 1.0f;
    }

    if (!cache_path.empty()) write_cached(cache_path, key, sample);
    return sample;
}

std::vector<ImageSample> assemble_samples(const DatasetManifest& manifest,
                                          const std::vector<std::string>& ids,
                                          LoadReport& report, bool skip_failures) {
    std::vector<ImageSample> out;
    out.reserve(ids.size());
    for (const auto& id : ids) {
        try {
            out.push_back(load_sample(manifest, id, &report));
            ++report.loaded;
        } catch (const std::exception& e) {
            report.failures.push_back({id, e.what()});
        }
    }
    if (!report.failures.empty() && !skip_failures) {
        std::ostringstream msg;
        msg << "assemble_samples: " << report.failures.size() << " sample(s) failed, first: "
            << report.failures.front().id << ": " << report.failures.front().error;
        throw ValidationError(msg.str());
    }
    return out;
}

}  // namespace scan
