// scan_cli: prepare / train / eval / predict / selftest driver for the
// chest-organ segmentation networks. One command per process; every
// artifact-producing command locks its run directory and writes a manifest
// before doing any work.

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <random>
#include <regex>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "scan/checkpoint.hpp"
#include "scan/errors.hpp"
#include "scan/image_io.hpp"
#include "scan/metrics.hpp"
#include "scan/model_zoo.hpp"
#include "scan/pipeline.hpp"
#include "scan/postprocess.hpp"
#include "scan/trainer.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

constexpr const char* kDataRootEnv = "SCAN_DATA_ROOT";

// ---------------------------------------------------------------------------
// Merged configuration: JSON config file keys, overridden by CLI flags.
// ---------------------------------------------------------------------------

struct CliConfig {
    std::string mode = "fcn_only";  // fcn_only | scan
    double lambda = 0.001;
    double lr = 0.0002;
    int epochs = 350;
    int pretrain_epochs = 50;
    int batch_size = 10;
    int checkpoint_every = 25;
    std::uint64_t seed = 0;
    std::int64_t resolution = 400;

    std::string dataset = "jsrt";  // jsrt | montgomery | combined (informational)
    std::string dataset_manifest;
    std::string split_file;
    std::string checkpoint;
    std::string out_dir;
    int dev_count = -1;  // -1: derived from dataset size
    bool postprocess = true;
    bool deterministic = false;
    double latency_budget_s = 5.0;

    json to_json() const {
        return {{"mode", mode},
                {"lambda", lambda},
                {"lr", lr},
                {"epochs", epochs},
                {"pretrain_epochs", pretrain_epochs},
                {"batch_size", batch_size},
                {"checkpoint_every", checkpoint_every},
                {"seed", seed},
                {"resolution", resolution},
                {"dataset", dataset},
                {"dataset_manifest", dataset_manifest},
                {"split_file", split_file},
                {"checkpoint", checkpoint},
                {"out_dir", out_dir},
                {"dev_count", dev_count},
                {"postprocess", postprocess},
                {"deterministic", deterministic},
                {"latency_budget_s", latency_budget_s}};
    }

    void load_file(const std::string& path) {
        std::ifstream is(path);
        if (!is) throw scan::ConfigError("cannot read config file '" + path + "'");
        json j;
        try {
            is >> j;
        } catch (const json::exception& e) {
            throw scan::FormatError("config '" + path + "': " + e.what());
        }
        mode = j.value("mode", mode);
        lambda = j.value("lambda", lambda);
        lr = j.value("lr", lr);
        epochs = j.value("epochs", epochs);
        pretrain_epochs = j.value("pretrain_epochs", pretrain_epochs);
        batch_size = j.value("batch_size", batch_size);
        checkpoint_every = j.value("checkpoint_every", checkpoint_every);
        seed = j.value("seed", seed);
        resolution = j.value("resolution", resolution);
        dataset = j.value("dataset", dataset);
        dataset_manifest = j.value("dataset_manifest", dataset_manifest);
        split_file = j.value("split_file", split_file);
        checkpoint = j.value("checkpoint", checkpoint);
        out_dir = j.value("out_dir", out_dir);
        dev_count = j.value("dev_count", dev_count);
        postprocess = j.value("postprocess", postprocess);
        deterministic = j.value("deterministic", deterministic);
        latency_budget_s = j.value("latency_budget_s", latency_budget_s);
    }

    scan::TrainConfig train_config(const std::string& checkpoint_dir) const {
        scan::TrainConfig c;
        c.mode = mode == "scan" ? scan::TrainConfig::RunMode::Scan
                                : scan::TrainConfig::RunMode::FcnOnly;
        if (mode != "scan" && mode != "fcn_only")
            throw scan::ConfigError("mode must be 'fcn_only' or 'scan', got '" + mode + "'");
        c.lambda = lambda;
        c.lr = lr;
        c.epochs = epochs;
        c.pretrain_epochs = pretrain_epochs;
        c.batch_size = batch_size;
        c.checkpoint_every = checkpoint_every;
        c.seed = seed;
        c.resolution = resolution;
        c.checkpoint_dir = checkpoint_dir;
        c.validate();
        return c;
    }
};

std::string data_root() {
    const char* v = std::getenv(kDataRootEnv);
    return v ? v : "";
}

std::uint64_t config_hash(const CliConfig& cfg) {
    std::uint64_t h = 14695981039346656037ull;
    for (char c : cfg.to_json().dump()) {
        h ^= static_cast<unsigned char>(c);
        h *= 1099511628211ull;
    }
    return h;
}

std::string timestamp_now() {
    const std::time_t t = std::time(nullptr);
    char buf[32];
    std::tm tm{};
    gmtime_r(&t, &tm);
    std::strftime(buf, sizeof(buf), "%Y%m%d-%H%M%S", &tm);
    return buf;
}

// ---------------------------------------------------------------------------
// Run directory: exclusive lock + manifest-first discipline.
// ---------------------------------------------------------------------------

class RunDir {
  public:
    RunDir(const CliConfig& cfg, const std::string& command) {
        if (!cfg.out_dir.empty()) {
            path_ = cfg.out_dir;
        } else {
            std::ostringstream os;
            os << "runs/" << timestamp_now() << "_" << std::hex << (config_hash(cfg) & 0xffffffff);
            path_ = os.str();
        }
        fs::create_directories(path_);
        lock_path_ = (fs::path(path_) / "run.lock").string();
        std::FILE* f = std::fopen(lock_path_.c_str(), "wx");
        if (!f)
            throw scan::ConfigError("run directory '" + path_ +
                                    "' is locked by another command (run.lock exists)");
        std::fclose(f);

        json manifest = {{"command", command},
                         {"config", cfg.to_json()},
                         {"pipeline_version", scan::kPipelineVersion},
                         {"checkpoint_version", 1},
                         {"data_root", data_root()},
                         {"timestamp_utc", timestamp_now()},
                         {"run_dir", path_}};
        std::ofstream os(fs::path(path_) / "run_manifest.json");
        os << manifest.dump(2) << "\n";
    }

    ~RunDir() {
        std::error_code ec;
        fs::remove(lock_path_, ec);
    }

    const std::string& path() const { return path_; }
    std::string sub(const std::string& name) const {
        return (fs::path(path_) / name).string();
    }

  private:
    std::string path_;
    std::string lock_path_;
};

scan::DatasetManifest load_manifest(const CliConfig& cfg) {
    if (cfg.dataset_manifest.empty())
        throw scan::ConfigError("no dataset manifest configured (--config or dataset_manifest)");
    scan::DatasetManifest m = scan::load_dataset_manifest(cfg.dataset_manifest, data_root());
    m.resolution = cfg.resolution;
    return m;
}

std::size_t default_dev_count(std::size_t n) {
    // JSRT 247 -> 209/38, Montgomery 138 -> 117/21.
    return std::size_t(std::llround(double(n) * 0.847));
}

// ---------------------------------------------------------------------------
// prepare
// ---------------------------------------------------------------------------

int cmd_prepare(const CliConfig& cfg) {
    RunDir run(cfg, "prepare");
    scan::DatasetManifest manifest = load_manifest(cfg);
    const auto ids = scan::list_dataset_ids(manifest);
    if (ids.empty())
        throw scan::ConfigError("no images with extension '" + manifest.image_ext +
                                "' under '" + manifest.image_dir + "'");

    const std::size_t dev =
        cfg.dev_count >= 0 ? std::size_t(cfg.dev_count) : default_dev_count(ids.size());
    const scan::DatasetSplit split = scan::make_split(ids, cfg.seed, dev);
    const std::string split_path =
        cfg.split_file.empty() ? run.sub("split.txt") : cfg.split_file;
    scan::save_split(split_path, split);

    scan::LoadReport report;
    if (!manifest.cache_dir.empty()) fs::create_directories(manifest.cache_dir);
    scan::assemble_samples(manifest, ids, report, /*skip_failures=*/true);

    json j = {{"total_ids", ids.size()},
              {"development", split.development.size()},
              {"evaluation", split.evaluation.size()},
              {"loaded", report.loaded},
              {"failures", report.failures.size()},
              {"overlap_conflicts", report.overlap_conflicts},
              {"cache_hits", report.cache_hits},
              {"split_file", split_path}};
    std::ofstream(run.sub("prepare_report.json")) << j.dump(2) << "\n";
    std::cout << "split " << split.development.size() << "/" << split.evaluation.size()
              << " written to " << split_path << "; loaded " << report.loaded << "/"
              << ids.size() << "\n";
    for (const auto& f : report.failures)
        std::cerr << "load failure: " << f.id << ": " << f.error << "\n";
    return report.failures.empty() ? 0 : 1;
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

int find_latest_state_epoch(const std::string& dir) {
    int best = -1;
    if (!fs::is_directory(dir)) return best;
    const std::regex pat("trainer_epoch_(\\d+)\\.state");
    for (const auto& e : fs::directory_iterator(dir)) {
        std::smatch m;
        const std::string name = e.path().filename().string();
        if (std::regex_match(name, m, pat)) best = std::max(best, std::stoi(m[1]));
    }
    return best;
}

std::string epoch_file(const std::string& dir, const char* stem, int epoch,
                       const char* ext) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%s_%04d.%s", stem, epoch, ext);
    return (fs::path(dir) / buf).string();
}

int cmd_train(const CliConfig& cfg) {
    RunDir run(cfg, "train");
    scan::DatasetManifest manifest = load_manifest(cfg);
    if (cfg.split_file.empty())
        throw scan::ConfigError("train needs --split-file (run prepare first)");
    const scan::DatasetSplit split = scan::load_split(cfg.split_file);

    scan::LoadReport report;
    const auto samples = scan::assemble_samples(manifest, split.development, report);
    std::cout << "loaded " << samples.size() << " development samples\n";

    const std::string ckpt_dir = run.sub("checkpoints");
    fs::create_directories(ckpt_dir);
    const scan::TrainConfig tc = cfg.train_config(ckpt_dir);

    scan::Segmentor seg = scan::build_segmentor(cfg.seed, cfg.resolution);
    scan::Critic critic = scan::build_critic(cfg.seed + 1, false, cfg.resolution);
    const bool use_critic = tc.mode == scan::TrainConfig::RunMode::Scan;
    scan::Trainer trainer(seg, use_critic ? &critic : nullptr, tc);

    const int resume_epoch = find_latest_state_epoch(ckpt_dir);
    if (resume_epoch >= 0) {
        std::cout << "resuming from epoch " << resume_epoch << "\n";
        scan::load_checkpoint(epoch_file(ckpt_dir, "seg_epoch", resume_epoch, "ckpt"), seg.net);
        if (use_critic)
            scan::load_checkpoint(epoch_file(ckpt_dir, "critic_epoch", resume_epoch, "ckpt"),
                                  critic.net);
        trainer.load_state(epoch_file(ckpt_dir, "trainer_epoch", resume_epoch, "state"));
    }

    trainer.run(samples);
    trainer.log().write_jsonl(run.sub("train_log.jsonl"));
    std::cout << "trained to epoch " << trainer.epochs_done() << "; log at "
              << run.sub("train_log.jsonl") << "\n";
    return 0;
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

int cmd_eval(const CliConfig& cfg) {
    RunDir run(cfg, "eval");
    if (cfg.checkpoint.empty()) throw scan::ConfigError("eval needs --checkpoint");
    scan::DatasetManifest manifest = load_manifest(cfg);

    std::vector<std::string> ids;
    if (!cfg.split_file.empty()) {
        ids = scan::load_split(cfg.split_file).evaluation;
    } else {
        ids = scan::list_dataset_ids(manifest);  // cross-dataset: whole set
    }
    scan::LoadReport report;
    const auto samples = scan::assemble_samples(manifest, ids, report);

    scan::Segmentor seg = scan::build_segmentor(cfg.seed, cfg.resolution);
    scan::load_checkpoint(cfg.checkpoint, seg.net);

    const scan::MetricsReport metrics =
        scan::evaluate(seg, samples, cfg.postprocess);
    const std::string text = scan::format_report_text(metrics);
    std::ofstream(run.sub("metrics.txt")) << text;
    std::ofstream(run.sub("metrics.json")) << scan::report_to_json(metrics) << "\n";
    std::cout << text;

    if (metrics.mean_forward_ms / 1000.0 > cfg.latency_budget_s) {
        std::cerr << "latency budget exceeded: " << metrics.mean_forward_ms / 1000.0
                  << " s/image > " << cfg.latency_budget_s << " s\n";
        return 1;
    }
    return 0;
}

// ---------------------------------------------------------------------------
// predict
// ---------------------------------------------------------------------------

scan::Tensor draw_overlay(const scan::Tensor& image,
                          const std::vector<scan::BinaryMask>& masks) {
    // Normalized grayscale with mask contours burned in at full intensity.
    float lo = image.values[0], hi = image.values[0];
    for (float v : image.values) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    const float scale = hi > lo ? 1.0f / (hi - lo) : 1.0f;
    scan::Tensor out({image.shape[0], image.shape[1], 1});
    for (std::size_t i = 0; i < out.values.size(); ++i)
        out.values[i] = (image.values[i] - lo) * scale;
    const std::int64_t H = out.shape[0], W = out.shape[1];
    for (std::int64_t c : {scan::kLeftLung, scan::kRightLung, scan::kHeart}) {
        const auto& m = masks[std::size_t(c)];
        for (std::int64_t y = 0; y < H; ++y)
            for (std::int64_t x = 0; x < W; ++x) {
                if (!m.at(y, x)) continue;
                const bool edge = y == 0 || y == H - 1 || x == 0 || x == W - 1 ||
                                  !m.at(y - 1, x) || !m.at(y + 1, x) || !m.at(y, x - 1) ||
                                  !m.at(y, x + 1);
                if (edge) out.at(y, x, 0) = 1.0f;
            }
    }
    return out;
}

int cmd_predict(const CliConfig& cfg, const std::vector<std::string>& images) {
    RunDir run(cfg, "predict");
    if (cfg.checkpoint.empty()) throw scan::ConfigError("predict needs --checkpoint");
    if (images.empty()) throw scan::ConfigError("predict needs at least one image path");

    scan::Segmentor seg = scan::build_segmentor(cfg.seed, cfg.resolution);
    scan::load_checkpoint(cfg.checkpoint, seg.net);

    const char* class_names[] = {"left_lung", "right_lung", "heart", "background"};
    int failures = 0;
    for (const auto& path : images) {
        try {
            const bool jsrt = fs::path(path).extension() == ".IMG";
            scan::Tensor raw = jsrt ? scan::load_jsrt_image(path) : scan::load_png_image(path);
            scan::Tensor input = scan::normalize_per_image(
                scan::resize_bilinear(raw, cfg.resolution, cfg.resolution));
            scan::Tensor probs = scan::forward_segment(seg, input, scan::NormMode::Eval);
            auto masks = scan::argmax_masks(probs);
            if (cfg.postprocess)
                for (std::int64_t c : {scan::kLeftLung, scan::kRightLung, scan::kHeart})
                    masks[std::size_t(c)] = scan::postprocess_mask(masks[std::size_t(c)]);

            const std::string stem = fs::path(path).stem().string();
            for (std::size_t c = 0; c < 4; ++c) {
                scan::Tensor m({cfg.resolution, cfg.resolution, 1});
                for (std::size_t i = 0; i < m.values.size(); ++i)
                    m.values[i] = float(masks[c].values[i]);
                scan::save_png_gray8(run.sub(stem + "_" + class_names[c] + ".png"), m);
            }
            scan::save_png_gray8(run.sub(stem + "_overlay.png"),
                                 draw_overlay(input, masks));
            std::cout << stem << ": masks written\n";
        } catch (const std::exception& e) {
            std::cerr << "predict failed for '" << path << "': " << e.what() << "\n";
            ++failures;
        }
    }
    return failures == 0 ? 0 : 1;
}

// ---------------------------------------------------------------------------
// selftest: quick gradient checks + metric oracle.
// ---------------------------------------------------------------------------

bool check_close(const char* what, double got, double want, double tol, int& failures) {
    const double denom = std::max({std::abs(got), std::abs(want), 1e-6});
    const bool ok = std::abs(got - want) / denom < tol;
    if (!ok) {
        std::cerr << "selftest FAIL " << what << ": got " << got << ", want " << want << "\n";
        ++failures;
    }
    return ok;
}

int cmd_selftest() {
    int failures = 0;
    std::mt19937_64 rng(7);
    std::normal_distribution<double> gauss(0.0, 1.0);

    // Finite-difference probe of conv2d parameters and inputs.
    {
        scan::TensorD x({5, 5, 2}), k({3, 3, 2, 3}), b({3}), w({5, 5, 3});
        for (auto* t : {&x, &k, &b, &w})
            for (auto& v : t->values) v = gauss(rng);
        const auto loss = [&](const scan::TensorD& xi, const scan::TensorD& ki,
                              const scan::TensorD& bi) {
            const scan::TensorD y = scan::ops::conv2d(xi, ki, bi);
            double s = 0;
            for (std::size_t i = 0; i < y.values.size(); ++i) s += y.values[i] * w.values[i];
            return s;
        };
        const auto g = scan::ops::conv2d_backward(x, k, w);
        const double h = 1e-5;
        for (int probe = 0; probe < 25; ++probe) {
            scan::TensorD* target = probe % 3 == 0 ? &x : probe % 3 == 1 ? &k : &b;
            const scan::TensorD* grad =
                probe % 3 == 0 ? &g.input : probe % 3 == 1 ? &g.kernel : &g.bias;
            const std::size_t i = rng() % target->values.size();
            const double keep = target->values[i];
            target->values[i] = keep + h;
            const double up = loss(x, k, b);
            target->values[i] = keep - h;
            const double dn = loss(x, k, b);
            target->values[i] = keep;
            check_close("conv2d gradient", (up - dn) / (2 * h), grad->values[i], 1e-5,
                        failures);
        }
    }

    // Metric oracle: brute-force counting on random 8x8 masks.
    {
        for (int trial = 0; trial < 1000; ++trial) {
            scan::BinaryMask p(8, 8), g(8, 8);
            for (auto& v : p.values) v = rng() % 2;
            for (auto& v : g.values) v = rng() % 2;
            std::int64_t tp = 0, fp = 0, fn = 0;
            for (std::size_t i = 0; i < p.values.size(); ++i) {
                tp += p.values[i] && g.values[i];
                fp += p.values[i] && !g.values[i];
                fn += !p.values[i] && g.values[i];
            }
            const double want_iou =
                tp + fp + fn == 0 ? 1.0 : double(tp) / double(tp + fp + fn);
            const double i = scan::iou(p, g), d = scan::dice(p, g);
            check_close("iou oracle", i, want_iou, 1e-12, failures);
            check_close("dice identity", d, 2 * i / (1 + i), 1e-9, failures);
        }
    }

    if (failures == 0) {
        std::cout << "selftest passed\n";
        return 0;
    }
    std::cerr << "selftest: " << failures << " failure(s)\n";
    return 1;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"chest-organ segmentation toolkit"};
    app.require_subcommand(1);

    CliConfig cfg;
    std::string config_path;
    std::vector<std::string> predict_images;
    bool no_postprocess = false;

    const auto add_common = [&](CLI::App* cmd) {
        cmd->add_option("--config", config_path, "JSON config file");
        cmd->add_option("--seed", cfg.seed, "master seed");
        cmd->add_option("--mode", cfg.mode, "fcn_only | scan");
        cmd->add_option("--lambda", cfg.lambda, "adversarial weight");
        cmd->add_option("--epochs", cfg.epochs, "total training epochs");
        cmd->add_option("--pretrain-epochs", cfg.pretrain_epochs, "pixel-loss-only epochs");
        cmd->add_option("--batch-size", cfg.batch_size, "minibatch size");
        cmd->add_option("--lr", cfg.lr, "Adam learning rate");
        cmd->add_option("--resolution", cfg.resolution, "network resolution (multiple of 16)");
        cmd->add_option("--dataset", cfg.dataset, "jsrt | montgomery | combined");
        cmd->add_option("--dataset-manifest", cfg.dataset_manifest, "dataset manifest JSON");
        cmd->add_option("--split-file", cfg.split_file, "split id-list file");
        cmd->add_option("--checkpoint", cfg.checkpoint, "segmentor checkpoint path");
        cmd->add_option("--out-dir", cfg.out_dir, "run directory (default runs/<ts>_<hash>)");
        cmd->add_option("--dev-count", cfg.dev_count, "development split size override");
        cmd->add_option("--latency-budget", cfg.latency_budget_s,
                        "fail eval if mean s/image exceeds this");
        cmd->add_flag("--no-postprocess", no_postprocess, "skip hole fill / largest component");
        cmd->add_flag("--deterministic", cfg.deterministic, "record deterministic mode");
    };

    CLI::App* prepare = app.add_subcommand("prepare", "build split files and tensor cache");
    CLI::App* train = app.add_subcommand("train", "run pretraining and adversarial training");
    CLI::App* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint");
    CLI::App* predict = app.add_subcommand("predict", "segment individual images");
    CLI::App* selftest = app.add_subcommand("selftest", "gradient and metric oracle checks");
    for (CLI::App* c : {prepare, train, eval_cmd, predict}) add_common(c);
    predict->add_option("images", predict_images, "input image paths");

    CLI11_PARSE(app, argc, argv);

    try {
        // Config file first, then explicit CLI values override it.
        if (!config_path.empty()) {
            CliConfig file_cfg;
            file_cfg.load_file(config_path);
            CLI::App* active = app.get_subcommands().front();
            const auto keep = [&](const char* flag) {
                return active->count(flag) > 0;
            };
            CliConfig merged = file_cfg;
            if (keep("--seed")) merged.seed = cfg.seed;
            if (keep("--mode")) merged.mode = cfg.mode;
            if (keep("--lambda")) merged.lambda = cfg.lambda;
            if (keep("--epochs")) merged.epochs = cfg.epochs;
            if (keep("--pretrain-epochs")) merged.pretrain_epochs = cfg.pretrain_epochs;
            if (keep("--batch-size")) merged.batch_size = cfg.batch_size;
            if (keep("--lr")) merged.lr = cfg.lr;
            if (keep("--resolution")) merged.resolution = cfg.resolution;
            if (keep("--dataset")) merged.dataset = cfg.dataset;
            if (keep("--dataset-manifest")) merged.dataset_manifest = cfg.dataset_manifest;
            if (keep("--split-file")) merged.split_file = cfg.split_file;
            if (keep("--checkpoint")) merged.checkpoint = cfg.checkpoint;
            if (keep("--out-dir")) merged.out_dir = cfg.out_dir;
            if (keep("--dev-count")) merged.dev_count = cfg.dev_count;
            if (keep("--latency-budget")) merged.latency_budget_s = cfg.latency_budget_s;
            if (keep("--deterministic")) merged.deterministic = cfg.deterministic;
            cfg = merged;
        }
        if (no_postprocess) cfg.postprocess = false;

        if (prepare->parsed()) return cmd_prepare(cfg);
        if (train->parsed()) return cmd_train(cfg);
        if (eval_cmd->parsed()) return cmd_eval(cfg);
        if (predict->parsed()) return cmd_predict(cfg, predict_images);
        if (selftest->parsed()) return cmd_selftest();
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
