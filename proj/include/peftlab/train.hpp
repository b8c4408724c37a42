#pragma once

// Optimization loop: token-bucketed batches, gradient accumulation over
// update_frequency micro-batches, Adam with linear warmup and linear (power
// 1 polynomial) decay, global-norm clipping at 1.0, dev-perplexity early
// stopping with the best checkpoint kept.
//
// Gradients accumulate as sums of per-token NLL and are divided by the token
// count of the whole accumulation group at step time, so one step over k
// micro-batches equals one step over their concatenation.

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "peftlab/data.hpp"
#include "peftlab/model.hpp"
#include "peftlab/rng.hpp"

namespace peftlab {

struct TrainConfig {
    double max_lr = 1e-4;
    int warmup_steps = 2500;
    int total_steps = 5000;
    double label_smoothing = 0.2;
    double dropout = 0.1;
    int max_tokens_per_batch = 256;
    int update_frequency = 2;
    int patience_epochs = 10;
    std::uint64_t seed = 1;

    void validate() const {
        if (warmup_steps < 0 || total_steps < 1 || warmup_steps > total_steps) {
            throw std::invalid_argument("train config: need 0 <= warmup_steps <= total_steps");
        }
        if (label_smoothing < 0.0 || label_smoothing >= 1.0) {
            throw std::invalid_argument("train config: label_smoothing must be in [0,1)");
        }
        if (dropout < 0.0 || dropout >= 1.0) {
            throw std::invalid_argument("train config: dropout must be in [0,1)");
        }
        if (max_tokens_per_batch < 1 || update_frequency < 1 || patience_epochs < 1) {
            throw std::invalid_argument("train config: batch size, update frequency and patience "
                                        "must be positive");
        }
        if (!(max_lr > 0.0)) throw std::invalid_argument("train config: max_lr must be positive");
    }
};

/// Linear warmup to max_lr at warmup_steps, then linear decay to 0 at
/// total_steps.
inline double lr_at(long step, const TrainConfig& cfg) {
    if (step < 0) throw std::invalid_argument("lr_at: negative step");
    if (step >= cfg.total_steps) return 0.0;
    if (cfg.warmup_steps > 0 && step <= cfg.warmup_steps) {
        return cfg.max_lr * static_cast<double>(step) / static_cast<double>(cfg.warmup_steps);
    }
    return cfg.max_lr * static_cast<double>(cfg.total_steps - step) /
           static_cast<double>(cfg.total_steps - cfg.warmup_steps);
}

// --------------------------------------------------------------------- Adam
template <class T>
class AdamOptimizer {
public:
    explicit AdamOptimizer(Transformer<T>& model, double beta1 = 0.9, double beta2 = 0.98,
                           double eps = 1e-8)
        : beta1_(beta1), beta2_(beta2), eps_(eps) {
        for (const auto& e : model.store().entries()) {
            if (!e.trainable) continue;  // moments exist only for trainable parameters
            slots_.push_back(Slot{e.tensor, std::vector<T>(e.tensor.numel(), T{0}),
                                  std::vector<T>(e.tensor.numel(), T{0})});
        }
    }

    std::size_t n_slots() const { return slots_.size(); }
    long steps() const { return step_; }

    void scale_grads(T factor) {
        for (auto& s : slots_) {
            if (!s.param.has_grad()) continue;
            for (auto& g : s.param.grad()) g *= factor;
        }
    }

    void zero_grads() {
        for (auto& s : slots_) s.param.zero_grad();
    }

    /// Clips the global gradient norm, then applies one bias-corrected Adam
    /// update at the given learning rate.
    void step(double lr, double clip_norm = 1.0) {
        double sq = 0.0;
        for (const auto& s : slots_) {
            if (!s.param.has_grad()) continue;
            for (const T g : s.param.grad()) sq += static_cast<double>(g) * static_cast<double>(g);
        }
        const double norm = std::sqrt(sq);
        const double scale = (clip_norm > 0.0 && norm > clip_norm) ? clip_norm / norm : 1.0;

        ++step_;
        const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(step_));
        const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(step_));
        for (auto& s : slots_) {
            if (!s.param.has_grad()) continue;
            auto& value = s.param.value();
            auto& grad = s.param.grad();
            for (std::size_t i = 0; i < value.size(); ++i) {
                const double g = static_cast<double>(grad[i]) * scale;
                s.m[i] = static_cast<T>(beta1_ * static_cast<double>(s.m[i]) + (1.0 - beta1_) * g);
                s.v[i] = static_cast<T>(beta2_ * static_cast<double>(s.v[i]) + (1.0 - beta2_) * g * g);
                const double mhat = static_cast<double>(s.m[i]) / bc1;
                const double vhat = static_cast<double>(s.v[i]) / bc2;
                value[i] -= static_cast<T>(lr * mhat / (std::sqrt(vhat) + eps_));
            }
        }
    }

private:
    struct Slot {
        Tensor<T> param;
        std::vector<T> m, v;
    };
    std::vector<Slot> slots_;
    long step_ = 0;
    double beta1_, beta2_, eps_;
};

// --------------------------------------------------------------- evaluation
namespace detail {

/// Splits a stored target row (BOS ... EOS with optional padding) into
/// decoder input and gold output.
inline void teacher_forcing_views(const std::vector<int>& padded, std::vector<int>& dec_in,
                                  std::vector<int>& gold) {
    std::size_t len = padded.size();
    while (len > 0 && padded[len - 1] == kPadId) --len;
    dec_in.assign(padded.begin(), padded.begin() + static_cast<std::ptrdiff_t>(len - 1));
    gold.assign(padded.begin() + 1, padded.begin() + static_cast<std::ptrdiff_t>(len));
}

}  // namespace detail

/// exp(mean token-level NLL) without label smoothing, pads excluded.
template <class T>
double perplexity(const Transformer<T>& model, const ParallelCorpus& data) {
    if (data.empty()) throw std::invalid_argument("perplexity: empty dataset");
    double total = 0.0;
    std::size_t tokens = 0;
    std::vector<int> dec_in, gold;
    for (std::size_t i = 0; i < data.size(); ++i) {
        detail::teacher_forcing_views(data.tgt[i], dec_in, gold);
        Tape<T> tape(false);
        auto logits = model.forward(tape, data.src[i], dec_in);
        auto loss = tape.cross_entropy_label_smoothed(logits, gold, T{0}, kPadId);
        total += static_cast<double>(loss.value()[0]) * static_cast<double>(gold.size());
        tokens += gold.size();
    }
    return std::exp(total / static_cast<double>(tokens));
}

// ----------------------------------------------------------------- training
struct EpochStats {
    int epoch = 0;
    long step = 0;
    double train_loss = 0.0;
    double dev_ppl = 0.0;
    double lr = 0.0;
};

struct TrainResult {
    std::vector<EpochStats> history;
    double best_dev_ppl = std::numeric_limits<double>::infinity();
    int best_epoch = 0;
    long steps = 0;
};

/// Trains the instrumented model in place; on return the parameters hold the
/// best-dev-perplexity checkpoint. NoFT is a no-op with empty history.
template <class T>
TrainResult train(Transformer<T>& model, const ParallelCorpus& train_data,
                  const ParallelCorpus& dev_data, const TrainConfig& cfg) {
    cfg.validate();
    if (!model.instrumented()) {
        throw std::logic_error("train: apply a tuning method before training");
    }
    TrainResult result;
    if (model.method().kind == PeftKind::no_ft) return result;
    if (train_data.empty() || dev_data.empty()) {
        throw std::invalid_argument("train: empty dataset");
    }

    model.override_dropout(cfg.dropout);
    Rng dropout_rng(derive_seed(cfg.seed, 0xD809));
    AdamOptimizer<T> opt(model);
    opt.zero_grads();

    auto best_snapshot = model.store().snapshot();
    int patience_used = 0;
    bool out_of_steps = false;
    std::vector<int> dec_in, gold;

    for (int epoch = 1; !out_of_steps; ++epoch) {
        const auto batches =
            batch_by_tokens(train_data, static_cast<std::size_t>(cfg.max_tokens_per_batch),
                            derive_seed(cfg.seed, 0xE90C + static_cast<std::uint64_t>(epoch)));
        double epoch_loss = 0.0;
        std::size_t epoch_tokens = 0;
        std::size_t group_tokens = 0;
        int group_micro = 0;

        auto flush_group = [&]() {
            if (group_micro == 0) return;
            opt.scale_grads(static_cast<T>(1.0 / static_cast<double>(group_tokens)));
            opt.step(lr_at(opt.steps() + 1, cfg), 1.0);
            opt.zero_grads();
            group_tokens = 0;
            group_micro = 0;
            if (opt.steps() >= cfg.total_steps) out_of_steps = true;
        };

        for (const auto& batch : batches) {
            std::size_t batch_tokens = 0;
            double batch_loss = 0.0;
            for (std::size_t row = 0; row < batch.rows(); ++row) {
                detail::teacher_forcing_views(batch.tgt[row], dec_in, gold);
                Tape<T> tape;
                auto logits =
                    model.forward(tape, batch.src[row], dec_in, RunMode::training, &dropout_rng);
                auto loss =
                    tape.cross_entropy_label_smoothed(logits, gold, static_cast<T>(cfg.label_smoothing),
                                                      kPadId);
                const double mean_loss = static_cast<double>(loss.value()[0]);
                if (!std::isfinite(mean_loss)) {
                    throw std::runtime_error("train: non-finite loss at step " +
                                             std::to_string(opt.steps()) + " (value " +
                                             std::to_string(mean_loss) + ")");
                }
                auto loss_sum = tape.scale(loss, static_cast<T>(gold.size()));
                tape.backward(loss_sum);
                batch_loss += mean_loss * static_cast<double>(gold.size());
                batch_tokens += gold.size();
            }
            epoch_loss += batch_loss;
            epoch_tokens += batch_tokens;
            group_tokens += batch_tokens;
            ++group_micro;
            if (group_micro >= cfg.update_frequency) flush_group();
            if (out_of_steps) break;
        }
        flush_group();  // a trailing partial accumulation group still updates

        EpochStats stats;
        stats.epoch = epoch;
        stats.step = opt.steps();
        stats.train_loss = epoch_loss / static_cast<double>(epoch_tokens);
        stats.dev_ppl = perplexity(model, dev_data);
        stats.lr = lr_at(opt.steps(), cfg);
        result.history.push_back(stats);

        if (stats.dev_ppl < result.best_dev_ppl) {
            result.best_dev_ppl = stats.dev_ppl;
            result.best_epoch = epoch;
            best_snapshot = model.store().snapshot();
            patience_used = 0;
        } else {
            ++patience_used;
        }
        if (patience_used >= cfg.patience_epochs) break;
    }

    result.steps = opt.steps();
    model.store().restore(best_snapshot);
    return result;
}

/// Persists the per-epoch history as CSV (epoch, step, train_loss, dev_ppl, lr).
inline void save_history_csv(const std::vector<EpochStats>& history, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("history: cannot write " + path);
    out << "epoch,step,train_loss,dev_ppl,lr\n";
    char line[160];
    for (const auto& row : history) {
        std::snprintf(line, sizeof(line), "%d,%ld,%.6f,%.6f,%.8g\n", row.epoch, row.step,
                      row.train_loss, row.dev_ppl, row.lr);
        out << line;
    }
}

}  // namespace peftlab
