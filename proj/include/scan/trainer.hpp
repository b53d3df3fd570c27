#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "scan/adam.hpp"
#include "scan/losses.hpp"
#include "scan/model_zoo.hpp"
#include "scan/sample.hpp"

namespace scan {

struct TrainConfig {
    enum class RunMode { FcnOnly, Scan };

    RunMode mode = RunMode::Scan;
    double lambda = 0.001;
    double lr = 0.0002;
    int epochs = 350;
    int batch_size = 10;
    int s_steps_per_d_step = 5;
    int pretrain_epochs = 50;
    std::uint64_t seed = 0;
    int checkpoint_every = 25;
    bool grad_clip = false;
    double clip_norm = 5.0;
    std::int64_t resolution = kDefaultResolution;
    std::string checkpoint_dir;  // empty disables checkpoint emission

    void validate() const {
        if (lambda < 0) throw ConfigError("lambda must be >= 0");
        if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
        if (pretrain_epochs < 0 || epochs < pretrain_epochs)
            throw ConfigError("need epochs >= pretrain_epochs >= 0");
        if (s_steps_per_d_step < 1) throw ConfigError("s_steps_per_d_step must be >= 1");
    }
};

// One record per optimizer step, plus shuffle records that make any step
// replayable.
struct TrainLogRecord {
    std::int64_t step = 0;
    int epoch = 0;
    std::string kind;      // "pretrain" | "segmentor" | "critic" | "shuffle" | "diagnostic"
    double js = 0;         // summed pixel loss over the minibatch
    double adv = 0;        // lambda-weighted generator adversarial term
    double jd_critic = 0;  // critic objective for critic steps
    double wall_ms = 0;
    std::string note;

    std::string to_json() const;
};

struct TrainLog {
    std::vector<TrainLogRecord> records;

    void write_jsonl(const std::string& path) const;
    std::int64_t count_kind(const std::string& kind) const;
};

// Drives pretraining and the alternating minimax schedule. The segmentor and
// critic own their parameters; the trainer owns the optimizer states, the
// shuffle stream, and the step counter, all of which serialize for resume.
class Trainer {
  public:
    Trainer(SegmentorT<float>& segmentor, CriticT<float>* critic, TrainConfig config);

    // Pixel-loss-only epochs (config.pretrain_epochs of them).
    void pretrain(const std::vector<ImageSample>& dataset);

    // Alternating schedule for the remaining epochs: s_steps_per_d_step
    // segmentor steps then one critic step per minibatch.
    void train_scan(const std::vector<ImageSample>& dataset);

    // pretrain + train_scan according to the configured mode.
    void run(const std::vector<ImageSample>& dataset);

    TrainLog& log() { return log_; }
    const TrainConfig& config() const { return config_; }
    int epochs_done() const { return epochs_done_; }

    void save_state(const std::string& path) const;
    void load_state(const std::string& path);

  private:
    std::vector<std::vector<std::size_t>> make_batches(std::size_t n, int epoch);
    double segmentor_step(const std::vector<const ImageSample*>& batch, double lambda,
                          const char* kind);
    double critic_step(const std::vector<const ImageSample*>& batch);
    void maybe_checkpoint(int epoch);
    void record_diagnostic(const std::string& what);

    SegmentorT<float>& seg_;
    CriticT<float>* critic_;
    TrainConfig config_;
    AdamState<float> adam_s_, adam_d_;
    Rng shuffle_rng_;
    TrainLog log_;
    std::int64_t step_ = 0;
    int epochs_done_ = 0;
};

// Spec-surface wrappers around Trainer.
TrainLog pretrain(SegmentorT<float>& s, const std::vector<ImageSample>& dataset,
                  const TrainConfig& config);
TrainLog train_scan(SegmentorT<float>& s, CriticT<float>& d,
                    const std::vector<ImageSample>& dataset, const TrainConfig& config);

}  // namespace scan
