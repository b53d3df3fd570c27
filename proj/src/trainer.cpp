#include "scan/trainer.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "scan/checkpoint.hpp"

namespace scan {

using json = nlohmann::json;
using Clock = std::chrono::steady_clock;

std::string TrainLogRecord::to_json() const {
    json j{{"step", step},     {"epoch", epoch}, {"kind", kind},
           {"js", js},         {"adv", adv},     {"jd_critic", jd_critic},
           {"wall_ms", wall_ms}};
    if (!note.empty()) j["note"] = note;
    return j.dump();
}

void TrainLog::write_jsonl(const std::string& path) const {
    std::ofstream os(path);
    if (!os) throw ConfigError("cannot open train log '" + path + "'");
    for (const auto& r : records) os << r.to_json() << "\n";
}

std::int64_t TrainLog::count_kind(const std::string& kind) const {
    std::int64_t n = 0;
    for (const auto& r : records)
        if (r.kind == kind) ++n;
    return n;
}

Trainer::Trainer(SegmentorT<float>& segmentor, CriticT<float>* critic, TrainConfig config)
    : seg_(segmentor), critic_(critic), config_(std::move(config)),
      shuffle_rng_(config_.seed ^ 0x9e3779b97f4a7c15ull) {
    config_.validate();
    adam_s_.init(seg_.net.params());
    if (critic_) adam_d_.init(critic_->net.params());
}

std::vector<std::vector<std::size_t>> Trainer::make_batches(std::size_t n, int epoch) {
    std::vector<std::size_t> perm(n);
    for (std::size_t i = 0; i < n; ++i) perm[i] = i;
    // Fisher-Yates from the trainer-owned stream; stdlib shuffle is not
    // pinned across library versions.
    for (std::size_t i = n; i > 1; --i) {
        const std::size_t j = shuffle_rng_() % i;
        std::swap(perm[i - 1], perm[j]);
    }
    std::ostringstream order;
    for (std::size_t i = 0; i < n; ++i) order << (i ? "," : "") << perm[i];
    log_.records.push_back({step_, epoch, "shuffle", 0, 0, 0, 0, order.str()});

    std::vector<std::vector<std::size_t>> batches;
    for (std::size_t i = 0; i < n; i += std::size_t(config_.batch_size)) {
        const std::size_t end = std::min(n, i + std::size_t(config_.batch_size));
        batches.emplace_back(perm.begin() + std::ptrdiff_t(i), perm.begin() + std::ptrdiff_t(end));
    }
    return batches;
}

double Trainer::segmentor_step(const std::vector<const ImageSample*>& batch, double lambda,
                               const char* kind) {
    const auto t0 = Clock::now();
    seg_.net.zero_grads();

    Batch<float> images;
    images.reserve(batch.size());
    for (const auto* s : batch) images.push_back(s->image);
    Batch<float> logits = seg_.forward_logits(images, NormMode::Train, /*training=*/true);

    double js = 0, adv = 0;
    Batch<float> grad_logits(batch.size());
    for (std::size_t i = 0; i < batch.size(); ++i)
        js += pixel_loss_from_logits(logits[i], batch[i]->label, batch[i]->heart_annotated,
                                     &grad_logits[i]);

    if (lambda != 0.0 && critic_) {
        Batch<float> probs(batch.size()), fakes(batch.size());
        for (std::size_t i = 0; i < batch.size(); ++i) {
            probs[i] = ops::softmax_channels(logits[i]);
            fakes[i] = critic_mask_view(probs[i], batch[i]->heart_annotated);
        }
        critic_->net.zero_grads();
        Batch<float> scores =
            critic_->net.forward(fakes, NormMode::TrainFrozen, /*training=*/true);
        Batch<float> up(batch.size());
        for (std::size_t i = 0; i < batch.size(); ++i) {
            const double t_hat = scores[i].values[0];
            adv += lambda * binary_loss_jd(t_hat, 1);
            up[i] = TensorT<float>({1, 1, 1});
            up[i].values[0] = float(lambda * binary_loss_jd_grad(t_hat, 1));
        }
        Batch<float> mask_grads = critic_->net.backward(up);
        critic_->net.zero_grads();  // the critic is frozen during this step
        for (std::size_t i = 0; i < batch.size(); ++i) {
            if (!batch[i]->heart_annotated) {
                // The zeroed heart channel never reached the critic.
                const std::int64_t C = kNumClasses;
                const std::int64_t n = mask_grads[i].numel() / C;
                for (std::int64_t p = 0; p < n; ++p)
                    mask_grads[i].values[p * C + kHeart] = 0.0f;
            }
            TensorT<float> dlogits = ops::softmax_channels_backward(probs[i], mask_grads[i]);
            for (std::size_t j = 0; j < dlogits.values.size(); ++j)
                grad_logits[i].values[j] += dlogits.values[j];
        }
    }

    seg_.net.backward(grad_logits);
    auto params = seg_.net.params();
    if (config_.grad_clip) clip_grad_norm(params, float(config_.clip_norm));
    if (!std::isfinite(js) || !std::isfinite(adv))
        throw DiagnosticsError("segmentor step produced a non-finite loss", "loss");
    adam_step(params, adam_s_, float(config_.lr));

    const double ms =
        std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
    log_.records.push_back({++step_, epochs_done_ + 1, kind, js, adv, 0, ms, ""});
    return js + adv;
}

double Trainer::critic_step(const std::vector<const ImageSample*>& batch) {
    const auto t0 = Clock::now();

    Batch<float> images;
    images.reserve(batch.size());
    for (const auto* s : batch) images.push_back(s->image);
    // Frozen segmentor pass: batch statistics, no running-average update, no
    // activation caching.
    Batch<float> logits = seg_.forward_logits(images, NormMode::TrainFrozen, false);

    // Real labels first, then the segmentor's predictions, as one batch.
    Batch<float> inputs;
    inputs.reserve(2 * batch.size());
    for (std::size_t i = 0; i < batch.size(); ++i)
        inputs.push_back(critic_mask_view(batch[i]->label, batch[i]->heart_annotated));
    for (std::size_t i = 0; i < batch.size(); ++i)
        inputs.push_back(critic_mask_view(ops::softmax_channels(logits[i]),
                                          batch[i]->heart_annotated));

    critic_->net.zero_grads();
    Batch<float> scores = critic_->net.forward(inputs, NormMode::Train, /*training=*/true);
    double jd = 0;
    Batch<float> up(inputs.size());
    for (std::size_t i = 0; i < inputs.size(); ++i) {
        const int target = i < batch.size() ? 1 : 0;
        const double t_hat = scores[i].values[0];
        jd += binary_loss_jd(t_hat, target);
        up[i] = TensorT<float>({1, 1, 1});
        up[i].values[0] = float(binary_loss_jd_grad(t_hat, target));
    }
    critic_->net.backward(up);
    auto params = critic_->net.params();
    if (config_.grad_clip) clip_grad_norm(params, float(config_.clip_norm));
    if (!std::isfinite(jd))
        throw DiagnosticsError("critic step produced a non-finite loss", "loss");
    adam_step(params, adam_d_, float(config_.lr));

    const double ms =
        std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
    log_.records.push_back({++step_, epochs_done_ + 1, "critic", 0, 0, jd, ms, ""});
    return jd;
}

void Trainer::maybe_checkpoint(int epoch) {
    if (config_.checkpoint_dir.empty()) return;
    if (epoch % config_.checkpoint_every != 0 && epoch != config_.epochs) return;
    char suffix[32];
    std::snprintf(suffix, sizeof(suffix), "epoch_%04d", epoch);
    save_checkpoint(config_.checkpoint_dir + "/seg_" + suffix + ".ckpt", seg_.net);
    if (critic_)
        save_checkpoint(config_.checkpoint_dir + "/critic_" + suffix + ".ckpt",
                        critic_->net);
    save_state(config_.checkpoint_dir + "/trainer_" + suffix + ".state");
}

void Trainer::record_diagnostic(const std::string& what) {
    log_.records.push_back({step_, epochs_done_, "diagnostic", 0, 0, 0, 0, what});
}

void Trainer::pretrain(const std::vector<ImageSample>& dataset) {
    if (dataset.empty()) throw ConfigError("pretrain: empty dataset");
    const int target =
        config_.mode == TrainConfig::RunMode::FcnOnly ? config_.epochs : config_.pretrain_epochs;
    while (epochs_done_ < target) {
        for (const auto& idx : make_batches(dataset.size(), epochs_done_ + 1)) {
            std::vector<const ImageSample*> batch;
            for (std::size_t i : idx) batch.push_back(&dataset[i]);
            try {
                segmentor_step(batch, 0.0, "pretrain");
            } catch (const DiagnosticsError& e) {
                record_diagnostic(e.what());
                throw;
            }
        }
        ++epochs_done_;
        maybe_checkpoint(epochs_done_);
    }
}

void Trainer::train_scan(const std::vector<ImageSample>& dataset) {
    if (dataset.empty()) throw ConfigError("train_scan: empty dataset");
    if (!critic_) throw ConfigError("train_scan: no critic network");
    while (epochs_done_ < config_.epochs) {
        for (const auto& idx : make_batches(dataset.size(), epochs_done_ + 1)) {
            std::vector<const ImageSample*> batch;
            for (std::size_t i : idx) batch.push_back(&dataset[i]);
            try {
                for (int k = 0; k < config_.s_steps_per_d_step; ++k)
                    segmentor_step(batch, config_.lambda, "segmentor");
                critic_step(batch);
            } catch (const DiagnosticsError& e) {
                record_diagnostic(e.what());
                throw;
            }
        }
        ++epochs_done_;
        maybe_checkpoint(epochs_done_);
    }
}

void Trainer::run(const std::vector<ImageSample>& dataset) {
    if (dataset.empty()) throw ConfigError("train: empty dataset");
    pretrain(dataset);
    if (config_.mode == TrainConfig::RunMode::Scan) train_scan(dataset);
}

namespace {

constexpr char kStateMagic[8] = {'S', 'C', 'A', 'N', 'T', 'R', 'S', '1'};

template <typename T>
void write_adam(std::ostream& os, const AdamState<T>& a) {
    detail::put_u64le(os, std::uint64_t(a.t));
    detail::put_u64le(os, a.m.size());
    for (std::size_t i = 0; i < a.m.size(); ++i) {
        dump_tensor(os, a.m[i]);
        dump_tensor(os, a.v[i]);
    }
}

template <typename T>
void read_adam(std::istream& is, AdamState<T>& a) {
    a.t = std::int64_t(detail::get_u64le(is));
    const std::uint64_t n = detail::get_u64le(is);
    if (n != a.m.size())
        throw FormatError("trainer state: optimizer buffer count mismatch");
    for (std::size_t i = 0; i < n; ++i) {
        TensorT<T> m = load_tensor<T>(is), v = load_tensor<T>(is);
        require_shape(m.shape, a.m[i].shape, "trainer state moment");
        a.m[i] = std::move(m);
        a.v[i] = std::move(v);
    }
}

}  // namespace

void Trainer::save_state(const std::string& path) const {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw ConfigError("cannot write trainer state '" + path + "'");
    os.write(kStateMagic, 8);
    detail::put_u64le(os, std::uint64_t(epochs_done_));
    detail::put_u64le(os, std::uint64_t(step_));
    write_adam(os, adam_s_);
    detail::put_u64le(os, critic_ ? 1 : 0);
    if (critic_) write_adam(os, adam_d_);
    std::ostringstream rng;
    rng << shuffle_rng_;
    detail::put_string(os, rng.str());
}

void Trainer::load_state(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw ConfigError("cannot read trainer state '" + path + "'");
    char magic[8];
    is.read(magic, 8);
    if (!is || std::memcmp(magic, kStateMagic, 8) != 0)
        throw FormatError("trainer state: bad magic");
    epochs_done_ = int(detail::get_u64le(is));
    step_ = std::int64_t(detail::get_u64le(is));
    read_adam(is, adam_s_);
    const bool has_critic = detail::get_u64le(is) != 0;
    if (has_critic != (critic_ != nullptr))
        throw FormatError("trainer state: critic presence mismatch");
    if (critic_) read_adam(is, adam_d_);
    // The serialized mersenne-twister state runs to a few thousand characters.
    std::istringstream rng(detail::get_string(is, 1 << 20));
    rng >> shuffle_rng_;
}

TrainLog pretrain(SegmentorT<float>& s, const std::vector<ImageSample>& dataset,
                  const TrainConfig& config) {
    Trainer t(s, nullptr, config);
    t.pretrain(dataset);
    return std::move(t.log());
}

TrainLog train_scan(SegmentorT<float>& s, CriticT<float>& d,
                    const std::vector<ImageSample>& dataset, const TrainConfig& config) {
    Trainer t(s, &d, config);
    t.pretrain(dataset);
    t.train_scan(dataset);
    return std::move(t.log());
}

}  // namespace scan
