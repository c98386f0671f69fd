#pragma once

// Siamese fine-tuning with in-batch negatives: n (head, relation) pairs and
// their n tails are encoded in two passes and scored as an n x n matrix.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "lpbert/encoder.hpp"
#include "lpbert/evaluator.hpp"
#include "lpbert/kg.hpp"
#include "lpbert/optim.hpp"
#include "lpbert/pretrain.hpp"
#include "lpbert/text.hpp"

namespace lpbert {

struct FocalParams {
    double alpha = 0.8;
    double gamma = 2.0;

    void validate() const {
        if (!(alpha > 0.0 && alpha < 1.0)) throw Error(ErrorKind::usage, "focal alpha must lie in (0, 1)");
        if (!(gamma >= 0.0)) throw Error(ErrorKind::usage, "focal gamma must be >= 0");
    }
};

/// Square 0/1 matrix, row i = query i, column j = tail of triple j.
struct LabelMatrix {
    std::size_t n = 0;
    std::vector<std::uint8_t> cells;

    std::uint8_t operator()(std::size_t i, std::size_t j) const { return cells[i * n + j]; }
    std::size_t positives() const { return static_cast<std::size_t>(std::count(cells.begin(), cells.end(), std::uint8_t{1})); }
};

inline LabelMatrix build_label_matrix(std::span<const Triple> batch, const FilterIndex& filter) {
    LabelMatrix y{batch.size(), std::vector<std::uint8_t>(batch.size() * batch.size(), 0)};
    for (std::size_t i = 0; i < batch.size(); ++i)
        for (std::size_t j = 0; j < batch.size(); ++j)
            y.cells[i * y.n + j] = (i == j || filter.contains(batch[i].head, batch[i].relation, batch[j].tail)) ? 1 : 0;
    return y;
}

/// Cosine similarity of every pair row with every entity row. Zero-norm
/// vectors score 0 and bump `zero_vectors`.
template <typename T>
Mat<T> score_batch(const Mat<T>& pairs, const Mat<T>& entities, std::size_t* zero_vectors = nullptr) {
    if (pairs.cols() != entities.cols()) throw Error(ErrorKind::runtime, "pair and entity vectors differ in dimension");
    std::size_t zeros = 0;
    auto unit = [&](const Mat<T>& m) {
        Mat<T> u = m;
        for (Eigen::Index i = 0; i < u.rows(); ++i) {
            const T n = u.row(i).norm();
            if (n > T(0)) {
                u.row(i) /= n;
            } else {
                ++zeros;
            }
        }
        return u;
    };
    Mat<T> s = unit(pairs) * unit(entities).transpose();
    if (zero_vectors) *zero_vectors += zeros;
    return s;
}

namespace loss {

inline constexpr double kProbClamp = 1e-6;

inline double sigmoid(double x) { return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); }

/// p = (d1 + 1) / 2 clamped to [1e-6, 1 - 1e-6]; dp/dd1 is 0 when clamped.
inline double cosine_to_prob(double d1, double* dp_dd1 = nullptr) {
    const double p = 0.5 * (d1 + 1.0);
    const double c = std::clamp(p, kProbClamp, 1.0 - kProbClamp);
    if (dp_dd1) *dp_dd1 = (p > kProbClamp && p < 1.0 - kProbClamp) ? 0.5 : 0.0;
    return c;
}

/// Focal term on probability p: positives -a(1-p)^g log p, negatives
/// -(1-a) p^g log(1-p).
inline double focal(double p, bool positive, const FocalParams& fp, double* d_dp = nullptr) {
    const double g = fp.gamma;
    if (positive) {
        const double w = std::pow(1.0 - p, g);
        if (d_dp) {
            const double dw = g == 0.0 ? 0.0 : -g * std::pow(1.0 - p, g - 1.0);
            *d_dp = -fp.alpha * (dw * std::log(p) + w / p);
        }
        return -fp.alpha * w * std::log(p);
    }
    const double w = std::pow(p, g);
    if (d_dp) {
        const double dw = g == 0.0 ? 0.0 : g * std::pow(p, g - 1.0);
        *d_dp = -(1.0 - fp.alpha) * (dw * std::log1p(-p) - w / (1.0 - p));
    }
    return -(1.0 - fp.alpha) * w * std::log1p(-p);
}

/// Distance term on s = sum |u - v|: sigmoid(s) for positives, 1 - sigmoid(s)
/// for negatives.
inline double distance(double s, bool positive, double* d_ds = nullptr) {
    const double sg = sigmoid(s);
    if (d_ds) *d_ds = (positive ? 1.0 : -1.0) * sg * (1.0 - sg);
    return positive ? sg : 1.0 - sg;
}

}  // namespace loss

/// Joint loss from precomputed cosine scores and L1 distance sums, averaged
/// over all n^2 cells.
template <typename T>
double joint_loss(const Mat<T>& scores, const Mat<T>& diff_sums, const LabelMatrix& labels, const FocalParams& fp) {
    const auto n = static_cast<std::size_t>(scores.rows());
    if (labels.n != n || scores.cols() != scores.rows() || diff_sums.rows() != scores.rows() || diff_sums.cols() != scores.cols())
        throw Error(ErrorKind::runtime, "joint_loss: score, distance and label matrices must be n x n");
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            const double d1 = static_cast<double>(scores(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)));
            const double d2 = static_cast<double>(diff_sums(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)));
            if (!std::isfinite(d1) || !std::isfinite(d2))
                throw Error(ErrorKind::runtime, "joint_loss: non-finite input at cell (" + std::to_string(i) + ", " + std::to_string(j) + ")");
            const bool pos = labels(i, j) != 0;
            total += loss::focal(loss::cosine_to_prob(d1), pos, fp) + loss::distance(d2, pos);
        }
    return n ? total / static_cast<double>(n * n) : 0.0;
}

template <typename T>
struct JointLossResult {
    double loss = 0.0;
    double focal = 0.0;     // mean L1 over active cells
    double distance = 0.0;  // mean L2 over active cells
    std::size_t positives = 0;
    std::size_t negatives = 0;
    std::size_t zero_vectors = 0;
    Mat<T> d_pairs, d_entities;
};

/// Joint loss and its gradient w.r.t. the pair and entity vectors.
/// `active` optionally restricts the mean to a subset of cells.
template <typename T>
JointLossResult<T> joint_loss_with_grad(const Mat<T>& pairs, const Mat<T>& entities, const LabelMatrix& labels, const FocalParams& fp,
                                        const std::vector<std::uint8_t>* active = nullptr) {
    const auto n = static_cast<std::size_t>(pairs.rows());
    if (labels.n != n || static_cast<std::size_t>(entities.rows()) != n) throw Error(ErrorKind::runtime, "joint loss: batch shape mismatch");
    const auto d = pairs.cols();
    JointLossResult<T> r;
    r.d_pairs = Mat<T>::Zero(static_cast<Eigen::Index>(n), d);
    r.d_entities = Mat<T>::Zero(static_cast<Eigen::Index>(n), d);

    std::vector<double> pn(n), en(n);
    for (std::size_t i = 0; i < n; ++i) {
        pn[i] = static_cast<double>(pairs.row(static_cast<Eigen::Index>(i)).norm());
        en[i] = static_cast<double>(entities.row(static_cast<Eigen::Index>(i)).norm());
        r.zero_vectors += (pn[i] == 0.0) + (en[i] == 0.0);
    }
    std::size_t cells = 0;
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) cells += active == nullptr || (*active)[i * n + j];
    if (cells == 0) return r;
    const double inv = 1.0 / static_cast<double>(cells);

    for (std::size_t i = 0; i < n; ++i) {
        const auto u = pairs.row(static_cast<Eigen::Index>(i));
        for (std::size_t j = 0; j < n; ++j) {
            if (active && !(*active)[i * n + j]) continue;
            const auto v = entities.row(static_cast<Eigen::Index>(j));
            const bool pos = labels(i, j) != 0;
            (pos ? r.positives : r.negatives) += 1;

            const bool degenerate = pn[i] == 0.0 || en[j] == 0.0;
            const double dot = static_cast<double>(u.dot(v));
            const double cos = degenerate ? 0.0 : dot / (pn[i] * en[j]);
            double dp_dc = 0.0, dl1_dp = 0.0;
            const double p = loss::cosine_to_prob(cos, &dp_dc);
            const double l1 = loss::focal(p, pos, fp, &dl1_dp);
            const auto diff = (u - v).eval();
            const double s = static_cast<double>(diff.cwiseAbs().sum());
            double dl2_ds = 0.0;
            const double l2 = loss::distance(s, pos, &dl2_ds);
            if (!std::isfinite(l1) || !std::isfinite(l2))
                throw Error(ErrorKind::runtime, "joint loss: non-finite value at cell (" + std::to_string(i) + ", " + std::to_string(j) + ")");
            r.focal += l1 * inv;
            r.distance += l2 * inv;

            const double g_cos = dl1_dp * dp_dc * inv;
            if (!degenerate && g_cos != 0.0) {
                const T a = static_cast<T>(g_cos / (pn[i] * en[j]));
                r.d_pairs.row(static_cast<Eigen::Index>(i)) += a * v - static_cast<T>(g_cos * cos / (pn[i] * pn[i])) * u;
                r.d_entities.row(static_cast<Eigen::Index>(j)) += a * u - static_cast<T>(g_cos * cos / (en[j] * en[j])) * v;
            }
            const double g_s = dl2_ds * inv;
            if (g_s != 0.0) {
                const auto sign = diff.unaryExpr([](T x) { return x > T(0) ? T(1) : (x < T(0) ? T(-1) : T(0)); }).eval();
                r.d_pairs.row(static_cast<Eigen::Index>(i)) += static_cast<T>(g_s) * sign;
                r.d_entities.row(static_cast<Eigen::Index>(j)) -= static_cast<T>(g_s) * sign;
            }
        }
    }
    r.loss = r.focal + r.distance;
    return r;
}

enum class NegativeMode : std::uint8_t { in_batch, sampled };
enum class LabelSource : std::uint8_t { train, all };

struct FinetuneConfig {
    int epochs = 30;
    int batch_size = 128;
    FocalParams focal{};
    double lr_encoder = 5e-5;
    double lr_head = 1e-3;
    double warmup_fraction = 0.05;
    double weight_decay = 0.01;
    double clip_norm = 1.0;
    int pair_max_len = 96;
    int entity_max_len = 32;
    NegativeMode negatives = NegativeMode::in_batch;
    int sampled_negatives = 5;  // per row, NegativeMode::sampled only
    LabelSource labels = LabelSource::train;
    bool select_on_valid = true;
    unsigned threads = 1;
    std::uint64_t seed = 42;
};

/// Diagonal plus up to k random negative cells per row.
inline std::vector<std::uint8_t> sample_negative_cells(const LabelMatrix& y, int k, Rng& rng) {
    std::vector<std::uint8_t> active(y.n * y.n, 0);
    std::vector<std::size_t> candidates;
    for (std::size_t i = 0; i < y.n; ++i) {
        active[i * y.n + i] = 1;
        candidates.clear();
        for (std::size_t j = 0; j < y.n; ++j)
            if (!y(i, j)) candidates.push_back(j);
        const auto take = std::min<std::size_t>(candidates.size(), static_cast<std::size_t>(std::max(k, 0)));
        for (std::size_t c = 0; c < take; ++c) {
            const auto pick = c + rng.below(candidates.size() - c);
            std::swap(candidates[c], candidates[pick]);
            active[i * y.n + candidates[c]] = 1;
        }
    }
    return active;
}

struct FinetuneStepReport {
    double loss = 0.0, focal = 0.0, distance = 0.0;
    std::size_t positives = 0, negatives = 0, forward_passes = 0;
};

/// One update on a batch of triples: two encoder passes, n x n cells.
template <typename T>
FinetuneStepReport finetune_step(EncoderParams<T>& params, AdamW<T>& opt, std::span<const Triple> batch, const TextCache& text,
                                 const FilterIndex& label_filter, const FinetuneConfig& cfg, double lr_factor, Rng& rng) {
    TokenBatch pairs, ents;
    for (const auto& t : batch) {
        pairs.add(text.pair(t.head, t.relation, static_cast<std::size_t>(cfg.pair_max_len)).tokens);
        ents.add(text.entity(t.tail, static_cast<std::size_t>(cfg.entity_max_len)).tokens);
    }
    const auto pf = forward(params, std::move(pairs), &rng);
    const auto ef = forward(params, std::move(ents), &rng);
    const LabelMatrix y = build_label_matrix(batch, label_filter);
    std::vector<std::uint8_t> active;
    if (cfg.negatives == NegativeMode::sampled) active = sample_negative_cells(y, cfg.sampled_negatives, rng);
    auto jl = joint_loss_with_grad<T>(pf.pooled(), ef.pooled(), y, cfg.focal, active.empty() ? nullptr : &active);
    if (!std::isfinite(jl.loss))
        throw Error(ErrorKind::runtime, "non-finite fine-tuning loss at optimizer step " + std::to_string(opt.steps()));

    EncoderParams<T> grads(params.config);
    auto scatter = [&](const ForwardCache<T>& fc, const Mat<T>& d_pooled) {
        Mat<T> d_out = Mat<T>::Zero(fc.out.rows(), fc.out.cols());
        for (std::size_t s = 0; s < fc.batch.size(); ++s)
            d_out.row(static_cast<Eigen::Index>(fc.batch.begin(s))) = d_pooled.row(static_cast<Eigen::Index>(s));
        backward(params, fc, d_out, grads);
    };
    scatter(pf, jl.d_pairs);
    scatter(ef, jl.d_entities);
    opt.step(params, grads, lr_factor);
    return {jl.loss, jl.focal, jl.distance, jl.positives, jl.negatives, 2};
}

struct FinetuneEpoch {
    int epoch = 0;  // 0 = before training
    double train_loss = 0.0;
    double valid_hits10 = 0.0;
    double valid_mrr = 0.0;
};

struct FinetuneResult {
    EncoderParams<float> best;
    std::vector<FinetuneEpoch> history;
    int best_epoch = 0;
    double best_hits10 = 0.0;
};

/// Trains over the augmented train split; keeps the parameters with the best
/// validation Hits@10 (epoch 0 = the starting point).
inline FinetuneResult run_finetune(const KnowledgeGraph& kg, const Vocabulary& vocab, EncoderParams<float> params, const FinetuneConfig& cfg,
                                   const LogSink& log = {}) {
    cfg.focal.validate();
    if (cfg.epochs < 0 || cfg.batch_size < 1) throw Error(ErrorKind::usage, "fine-tuning needs epochs >= 0 and batch_size >= 1");
    if (!kg.augmented) throw Error(ErrorKind::runtime, "fine-tuning expects an augmented graph");
    const auto& train = kg.split(Split::train);
    if (train.empty()) throw Error(ErrorKind::runtime, "fine-tuning needs a non-empty train split");
    const TextCache text(kg, vocab);
    const std::array<Split, 1> train_only{Split::train};
    const FilterIndex label_filter = cfg.labels == LabelSource::train ? build_filter_index(kg, train_only) : build_filter_index(kg);
    const FilterIndex eval_filter = build_filter_index(kg);
    const EvalOptions eval_opts{cfg.pair_max_len, cfg.entity_max_len, cfg.threads};
    const bool can_select = cfg.select_on_valid && !kg.split(Split::valid).empty();

    const std::size_t bs = static_cast<std::size_t>(cfg.batch_size);
    const std::size_t steps_per_epoch = (train.size() + bs - 1) / bs;
    const auto schedule = LinearSchedule::with_fraction(steps_per_epoch * static_cast<std::size_t>(std::max(cfg.epochs, 1)), cfg.warmup_fraction);
    AdamW<float> opt(params, AdamWOptions{cfg.lr_encoder, cfg.lr_head, 0.9, 0.999, 1e-8, cfg.weight_decay, cfg.clip_norm});

    FinetuneResult result;
    result.best = params;
    auto validate = [&](int epoch, double train_loss) {
        FinetuneEpoch rec{epoch, train_loss, 0.0, 0.0};
        if (can_select) {
            const auto rep = evaluate<float>(kg, text, params, Split::valid, eval_filter, eval_opts);
            rec.valid_hits10 = rep.hits10;
            rec.valid_mrr = rep.mrr;
        }
        result.history.push_back(rec);
        const bool better = epoch == 0 || (can_select ? rec.valid_hits10 > result.best_hits10 : true);
        if (better) {
            result.best = params;
            result.best_epoch = epoch;
            result.best_hits10 = rec.valid_hits10;
        }
        if (log)
            log({{"stage", "finetune"}, {"epoch", epoch}, {"train_loss", train_loss}, {"valid_hits10", rec.valid_hits10},
                 {"valid_mrr", rec.valid_mrr}, {"best", better}});
    };
    validate(0, 0.0);

    std::vector<std::size_t> order(train.size());
    std::vector<Triple> batch;
    std::size_t step = 0;
    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        auto shuffle_rng = Rng::derive(cfg.seed, 0xF17EULL, static_cast<std::uint64_t>(epoch));
        shuffle_rng.shuffle(order);
        double loss_sum = 0.0;
        for (std::size_t b = 0; b < steps_per_epoch; ++b) {
            batch.clear();
            for (std::size_t k = b * bs; k < std::min(order.size(), (b + 1) * bs); ++k) batch.push_back(train[order[k]]);
            const double factor = schedule.factor(step);
            auto rng = Rng::derive(cfg.seed, 0x57E9ULL, step);
            const auto r = finetune_step<float>(params, opt, batch, text, label_filter, cfg, factor, rng);
            loss_sum += r.loss;
            if (log)
                log({{"stage", "finetune"}, {"epoch", epoch},        {"step", step},           {"lr_encoder", factor * cfg.lr_encoder},
                     {"loss", r.loss},      {"l1_focal", r.focal},   {"l2_distance", r.distance}, {"positives", r.positives},
                     {"negatives", r.negatives}});
            ++step;
        }
        validate(epoch, loss_sum / static_cast<double>(steps_per_epoch));
    }
    if (!can_select) result.best = params;
    return result;
}

}  // namespace lpbert
