#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <vector>

#include "lpbert/encoder.hpp"

namespace lpbert {

/// Linear warmup from 0 to the peak over `warmup_steps`, then linear decay
/// to 0 at `total_steps`. Returns the multiplier for step `step` (0-based).
struct LinearSchedule {
    std::size_t total_steps = 1;
    std::size_t warmup_steps = 0;

    static LinearSchedule with_fraction(std::size_t total, double warmup_fraction) {
        const auto warm = static_cast<std::size_t>(std::ceil(warmup_fraction * static_cast<double>(total)));
        return {std::max<std::size_t>(total, 1), std::min(warm, total)};
    }

    double factor(std::size_t step) const {
        if (warmup_steps > 0 && step <= warmup_steps) return static_cast<double>(step) / static_cast<double>(warmup_steps);
        if (step >= total_steps) return 0.0;
        const double span = static_cast<double>(total_steps - warmup_steps);
        return static_cast<double>(total_steps - step) / span;
    }
};

struct AdamWOptions {
    double lr_encoder = 5e-5;
    double lr_head = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.01;
    double clip_norm = 1.0;  // <= 0 disables clipping
};

/// AdamW with decoupled weight decay and two learning-rate groups.
template <typename T>
class AdamW {
public:
    AdamW(const EncoderParams<T>& params, AdamWOptions options)
        : options_(options), m_(params.config), v_(params.config), infos_(params.infos()) {}

    const AdamWOptions& options() const noexcept { return options_; }
    std::size_t steps() const noexcept { return t_; }

    /// Clips `grads` to the global norm bound, then applies one update with
    /// learning rates scaled by `lr_factor`. Returns the pre-clip norm.
    double step(EncoderParams<T>& params, EncoderParams<T>& grads, double lr_factor) {
        auto ps = params.tensors();
        auto gs = grads.tensors();
        auto ms = m_.tensors();
        auto vs = v_.tensors();
        double sq = 0.0;
        for (auto* g : gs) sq += static_cast<double>(g->squaredNorm());
        const double norm = std::sqrt(sq);
        if (options_.clip_norm > 0.0 && norm > options_.clip_norm) {
            const T scale = static_cast<T>(options_.clip_norm / (norm + 1e-12));
            for (auto* g : gs) *g *= scale;
        }
        ++t_;
        const double bc1 = 1.0 - std::pow(options_.beta1, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(options_.beta2, static_cast<double>(t_));
        const T b1 = static_cast<T>(options_.beta1), b2 = static_cast<T>(options_.beta2);
        for (std::size_t i = 0; i < ps.size(); ++i) {
            const double base = infos_[i].group == ParamGroup::head ? options_.lr_head : options_.lr_encoder;
            const double lr = base * lr_factor;
            if (lr == 0.0) continue;
            auto& p = *ps[i];
            auto& g = *gs[i];
            auto& m = *ms[i];
            auto& v = *vs[i];
            m = b1 * m + (T(1) - b1) * g;
            v = b2 * v + (T(1) - b2) * g.cwiseAbs2();
            if (infos_[i].decay && options_.weight_decay > 0.0) p *= static_cast<T>(1.0 - lr * options_.weight_decay);
            const T step_size = static_cast<T>(lr / bc1);
            const T denom_scale = static_cast<T>(1.0 / std::sqrt(bc2));
            p.array() -= step_size * m.array() / (v.array().sqrt() * denom_scale + static_cast<T>(options_.eps));
        }
        return norm;
    }

private:
    AdamWOptions options_;
    EncoderParams<T> m_, v_;
    std::vector<ParamInfo> infos_;
    std::size_t t_ = 0;
};

/// Patience-based early stopping on a metric where larger is better.
class EarlyStopper {
public:
    explicit EarlyStopper(int patience) : patience_(patience) {}

    /// Records an epoch's metric; returns true when it is a new best.
    bool observe(double metric) {
        ++epochs_;
        if (metric > best_) {
            best_ = metric;
            best_epoch_ = epochs_ - 1;
            stale_ = 0;
            return true;
        }
        ++stale_;
        return false;
    }

    bool should_stop() const noexcept { return stale_ >= patience_; }
    double best() const noexcept { return best_; }
    int best_epoch() const noexcept { return best_epoch_; }
    int epochs_seen() const noexcept { return epochs_; }

private:
    int patience_;
    int epochs_ = 0;
    int stale_ = 0;
    int best_epoch_ = -1;
    double best_ = -std::numeric_limits<double>::infinity();
};

}  // namespace lpbert
