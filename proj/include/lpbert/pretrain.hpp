#pragma once

// Multi-task pre-training: L = L_MLM + L_MIM over the shared prediction head.

#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "lpbert/encoder.hpp"
#include "lpbert/kg.hpp"
#include "lpbert/optim.hpp"
#include "lpbert/sampler.hpp"
#include "lpbert/text.hpp"

namespace lpbert {

struct PretrainConfig {
    int epochs = 50;
    int batch_size = 32;
    double lr_encoder = 5e-5;
    double lr_head = 1e-4;
    double warmup_fraction = 0.05;
    int patience = 3;
    double weight_decay = 0.01;
    double clip_norm = 1.0;
    int max_len = 128;
    TaskMix tasks = TaskMix::full;
    std::uint64_t seed = 42;
};

struct PretrainLossReport {
    double mlm_loss = 0.0;
    double mim_loss = 0.0;
    std::size_t mlm_targets = 0;
    std::size_t mim_targets = 0;
    std::array<std::size_t, 4> task_counts{};  // indexed by PretrainTask

    double total() const noexcept { return mlm_loss + mim_loss; }
};

using LogSink = std::function<void(const nlohmann::json&)>;

namespace detail {

/// log-sum-exp cross-entropy of one logit row against `target`.
template <typename T>
double cross_entropy_row(const Eigen::Ref<const RowVec<T>>& row, TokenId target, RowVec<T>* probs) {
    const T mx = row.maxCoeff();
    const auto shifted = (row.array() - mx).eval();
    const T sum = shifted.exp().sum();
    const T log_z = std::log(sum);
    if (probs) *probs = (shifted - log_z).exp().matrix();
    return static_cast<double>(log_z - shifted(target));
}

}  // namespace detail

/// Loss of a batch of samples. When `grads` is given, accumulates the full
/// gradient of (L_MLM + L_MIM). `dropout_rng` selects training mode for both
/// dropout and the head's batch normalization.
template <typename T>
PretrainLossReport pretrain_loss(EncoderParams<T>& params, std::span<const PretrainSample> samples, Rng* dropout_rng,
                                 EncoderParams<T>* grads) {
    PretrainLossReport report;
    if (samples.empty()) throw Error(ErrorKind::runtime, "pre-training batch is empty");
    TokenBatch batch;
    for (const auto& s : samples) {
        batch.add(s.x);
        ++report.task_counts[static_cast<std::size_t>(s.task)];
    }
    struct Target {
        std::size_t row;
        TokenId token;
        bool item;
    };
    std::vector<Target> targets;
    for (std::size_t s = 0; s < samples.size(); ++s)
        for (std::size_t i = 0; i < batch.length(s); ++i) {
            const auto& smp = samples[s];
            if (smp.y1[i] != kPad) targets.push_back({batch.begin(s) + i, smp.y1[i], true});
            if (smp.y2[i] != kPad) targets.push_back({batch.begin(s) + i, smp.y2[i], false});
        }
    for (const auto& t : targets) (t.item ? report.mim_targets : report.mlm_targets) += 1;
    if (targets.empty()) return report;

    const bool training = dropout_rng != nullptr;
    const auto fc = forward(params, std::move(batch), dropout_rng);
    Mat<T> states(static_cast<Eigen::Index>(targets.size()), params.config.hidden);
    for (std::size_t k = 0; k < targets.size(); ++k) states.row(static_cast<Eigen::Index>(k)) = fc.out.row(static_cast<Eigen::Index>(targets[k].row));

    HeadCache<T> hc;
    const Mat<T> logits = predict_tokens(states, params, training, &hc);
    Mat<T> d_logits;
    if (grads) d_logits.resize(logits.rows(), logits.cols());
    const double w_mlm = report.mlm_targets ? 1.0 / static_cast<double>(report.mlm_targets) : 0.0;
    const double w_mim = report.mim_targets ? 1.0 / static_cast<double>(report.mim_targets) : 0.0;
    RowVec<T> probs;
    for (std::size_t k = 0; k < targets.size(); ++k) {
        const auto r = static_cast<Eigen::Index>(k);
        const double ce = detail::cross_entropy_row<T>(logits.row(r), targets[k].token, grads ? &probs : nullptr);
        const double w = targets[k].item ? w_mim : w_mlm;
        (targets[k].item ? report.mim_loss : report.mlm_loss) += ce * w;
        if (grads) {
            probs(targets[k].token) -= T(1);
            d_logits.row(r) = probs * static_cast<T>(w);
        }
    }
    if (grads) {
        const Mat<T> d_states = predict_tokens_backward(params, hc, d_logits, *grads);
        Mat<T> d_out = Mat<T>::Zero(fc.out.rows(), fc.out.cols());
        for (std::size_t k = 0; k < targets.size(); ++k) d_out.row(static_cast<Eigen::Index>(targets[k].row)) += d_states.row(static_cast<Eigen::Index>(k));
        backward(params, fc, d_out, *grads);
    }
    return report;
}

/// One optimizer update on a batch. Throws on a non-finite loss.
template <typename T>
PretrainLossReport pretrain_step(EncoderParams<T>& params, AdamW<T>& opt, std::span<const PretrainSample> samples, double lr_factor,
                                 Rng& dropout_rng) {
    EncoderParams<T> grads(params.config);
    auto report = pretrain_loss(params, samples, &dropout_rng, &grads);
    if (!std::isfinite(report.total()))
        throw Error(ErrorKind::runtime, "non-finite pre-training loss at optimizer step " + std::to_string(opt.steps()) +
                                            " (lr factor " + std::to_string(lr_factor) + ")");
    opt.step(params, grads, lr_factor);
    return report;
}

struct PretrainEpoch {
    int epoch = 0;
    double train_loss = 0.0;
    double valid_mlm = 0.0;
    double valid_mim = 0.0;
    double valid_total() const noexcept { return valid_mlm + valid_mim; }
};

struct PretrainResult {
    EncoderParams<float> best;
    std::vector<PretrainEpoch> history;
    int best_epoch = -1;
    bool stopped_early = false;
};

/// Validation loss in inference mode with fixed per-sample masking streams.
template <typename T>
PretrainLossReport pretrain_validation_loss(EncoderParams<T>& params, const std::vector<PretrainSample>& samples, std::size_t batch_size) {
    PretrainLossReport total;
    double mlm_sum = 0.0, mim_sum = 0.0;
    for (std::size_t start = 0; start < samples.size(); start += batch_size) {
        const auto n = std::min(batch_size, samples.size() - start);
        const auto r = pretrain_loss<T>(params, std::span(samples).subspan(start, n), nullptr, nullptr);
        mlm_sum += r.mlm_loss * static_cast<double>(r.mlm_targets);
        mim_sum += r.mim_loss * static_cast<double>(r.mim_targets);
        total.mlm_targets += r.mlm_targets;
        total.mim_targets += r.mim_targets;
        for (std::size_t k = 0; k < 4; ++k) total.task_counts[k] += r.task_counts[k];
    }
    total.mlm_loss = total.mlm_targets ? mlm_sum / static_cast<double>(total.mlm_targets) : 0.0;
    total.mim_loss = total.mim_targets ? mim_sum / static_cast<double>(total.mim_targets) : 0.0;
    return total;
}

inline std::vector<PretrainSample> make_pretrain_samples(const std::vector<Triple>& triples, const TextCache& text, std::size_t vocab_size,
                                                         const PretrainConfig& cfg, std::uint64_t stream) {
    std::vector<PretrainSample> out;
    out.reserve(triples.size());
    for (std::size_t i = 0; i < triples.size(); ++i) {
        auto rng = Rng::derive(cfg.seed, stream, i);
        out.push_back(build_pretrain_sample(text.triple(triples[i], static_cast<std::size_t>(cfg.max_len)), vocab_size, rng, cfg.tasks));
    }
    return out;
}

/// Trains on the (augmented) train split with early stopping on the total
/// validation loss; returns the best parameters seen.
inline PretrainResult run_pretraining(const KnowledgeGraph& kg, const Vocabulary& vocab, EncoderParams<float> params, const PretrainConfig& cfg,
                                      const LogSink& log = {}) {
    if (cfg.epochs < 1 || cfg.batch_size < 1) throw Error(ErrorKind::usage, "pre-training needs epochs >= 1 and batch_size >= 1");
    const auto& train = kg.split(Split::train);
    if (train.empty()) throw Error(ErrorKind::runtime, "pre-training needs a non-empty train split");
    const TextCache text(kg, vocab);
    const std::size_t bs = static_cast<std::size_t>(cfg.batch_size);
    const std::size_t steps_per_epoch = (train.size() + bs - 1) / bs;
    const auto schedule = LinearSchedule::with_fraction(steps_per_epoch * static_cast<std::size_t>(cfg.epochs), cfg.warmup_fraction);
    AdamW<float> opt(params, AdamWOptions{cfg.lr_encoder, cfg.lr_head, 0.9, 0.999, 1e-8, cfg.weight_decay, cfg.clip_norm});

    const auto& valid_triples = kg.split(Split::valid).empty() ? train : kg.split(Split::valid);
    const auto valid = make_pretrain_samples(valid_triples, text, vocab.size(), cfg, 0xFFFFFFFFULL);

    PretrainResult result;
    result.best = params;
    EarlyStopper stopper(cfg.patience);
    std::size_t step = 0;
    std::vector<std::size_t> order(train.size());
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        auto shuffle_rng = Rng::derive(cfg.seed, 0xA11CEULL, static_cast<std::uint64_t>(epoch));
        shuffle_rng.shuffle(order);
        double loss_sum = 0.0;
        for (std::size_t b = 0; b < steps_per_epoch; ++b) {
            std::vector<PretrainSample> batch;
            const std::size_t end = std::min(order.size(), (b + 1) * bs);
            for (std::size_t k = b * bs; k < end; ++k) {
                auto rng = Rng::derive(cfg.seed, static_cast<std::uint64_t>(epoch) + 1, order[k]);
                batch.push_back(build_pretrain_sample(text.triple(train[order[k]], static_cast<std::size_t>(cfg.max_len)), vocab.size(), rng, cfg.tasks));
            }
            const double factor = schedule.factor(step);
            auto drop_rng = Rng::derive(cfg.seed, 0xD20FULL, step);
            PretrainLossReport r;
            try {
                r = pretrain_step<float>(params, opt, batch, factor, drop_rng);
            } catch (const Error& e) {
                std::string ids;
                for (std::size_t k = b * bs; k < end && k < b * bs + 8; ++k) ids += (ids.empty() ? "" : ",") + std::to_string(order[k]);
                throw Error(ErrorKind::runtime, std::string(e.what()) + "; epoch " + std::to_string(epoch) + ", lr " +
                                                    std::to_string(factor * cfg.lr_encoder) + ", batch triples [" + ids + ",...]");
            }
            loss_sum += r.total();
            if (log)
                log({{"stage", "pretrain"},
                     {"epoch", epoch},
                     {"step", step},
                     {"lr_encoder", factor * cfg.lr_encoder},
                     {"lr_head", factor * cfg.lr_head},
                     {"mlm", r.mlm_loss},
                     {"mim", r.mim_loss},
                     {"tasks",
                      {{"MEM_h", r.task_counts[0]}, {"MEM_t", r.task_counts[1]}, {"MRM", r.task_counts[2]}, {"MLM", r.task_counts[3]}}}});
            ++step;
        }
        const auto v = pretrain_validation_loss<float>(params, valid, bs);
        PretrainEpoch rec{epoch, loss_sum / static_cast<double>(steps_per_epoch), v.mlm_loss, v.mim_loss};
        result.history.push_back(rec);
        const bool improved = stopper.observe(-rec.valid_total());
        if (improved) {
            result.best = params;
            result.best_epoch = epoch;
        }
        if (log)
            log({{"stage", "pretrain"},
                 {"epoch", epoch},
                 {"train_loss", rec.train_loss},
                 {"valid_mlm", rec.valid_mlm},
                 {"valid_mim", rec.valid_mim},
                 {"valid_total", rec.valid_total()},
                 {"best", improved}});
        if (stopper.should_stop()) {
            result.stopped_early = epoch + 1 < cfg.epochs;
            break;
        }
    }
    return result;
}

}  // namespace lpbert
