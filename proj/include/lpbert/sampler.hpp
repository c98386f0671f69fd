#pragma once

// Multi-task pre-training samples: one masked item (head entity, tail
// entity or relation) plus token-level MLM restricted to the other regions.

#include <concepts>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <vector>

#include "lpbert/common.hpp"
#include "lpbert/text.hpp"

namespace lpbert {

enum class PretrainTask : std::uint8_t { mem_head, mem_tail, mrm, mlm_only };

inline const char* task_name(PretrainTask t) {
    switch (t) {
        case PretrainTask::mem_head: return "MEM_h";
        case PretrainTask::mem_tail: return "MEM_t";
        case PretrainTask::mrm: return "MRM";
        case PretrainTask::mlm_only: return "MLM";
    }
    return "?";
}

/// Which objectives are mixed into pre-training.
enum class TaskMix : std::uint8_t { full, mlm_only };

template <typename R>
concept UniformSource = requires(R r, std::uint64_t n) {
    { r.uniform() } -> std::convertible_to<double>;
    { r.below(n) } -> std::convertible_to<std::uint64_t>;
};

inline constexpr double kMlmSelectRate = 0.15;
inline constexpr double kMlmMaskRate = 0.8;
inline constexpr double kTaskHeadBound = 0.4;
inline constexpr double kTaskTailBound = 0.8;

struct PretrainSample {
    std::vector<TokenId> x;
    std::vector<TokenId> y1;  // masked-item targets
    std::vector<TokenId> y2;  // MLM targets
    PretrainTask task = PretrainTask::mem_head;
    SequenceLayout layout;
};

/// Token-level masking over `regions`: each position is selected with
/// probability 0.15; a selected token becomes [MASK] (80%), a random
/// non-reserved word (10%) or stays (10%). The original goes to y2.
template <UniformSource R>
void mask_mlm_region(std::vector<TokenId>& x, std::vector<TokenId>& y2, std::span<const Span> regions, std::size_t vocab_size, R& rng) {
    for (const auto& region : regions)
        for (std::size_t i = region.begin; i < region.end; ++i) {
            if (rng.uniform() >= kMlmSelectRate) continue;
            y2[i] = x[i];
            if (rng.uniform() < kMlmMaskRate) {
                x[i] = kMask;
            } else if (rng.uniform() > 0.5) {
                if (vocab_size > static_cast<std::size_t>(kFirstWord))
                    x[i] = kFirstWord + static_cast<TokenId>(rng.below(vocab_size - static_cast<std::size_t>(kFirstWord)));
            }
        }
}

/// Builds one sample from an assembled triple layout. The task draw comes
/// first from `rng`, then the MLM draws.
template <UniformSource R>
PretrainSample build_pretrain_sample(SequenceLayout layout, std::size_t vocab_size, R& rng, TaskMix mix = TaskMix::full) {
    PretrainSample s;
    s.x = layout.tokens;
    s.y1.assign(s.x.size(), kPad);
    s.y2.assign(s.x.size(), kPad);
    const auto sp = [&](Region r) { return layout.span(r); };

    auto mask_item = [&](const Span& item) {
        for (std::size_t i = item.begin; i < item.end; ++i) {
            s.y1[i] = s.x[i];
            s.x[i] = kMask;
        }
    };
    auto blank = [&](const Span& region) {
        for (std::size_t i = region.begin; i < region.end; ++i) s.x[i] = kPad;
    };

    if (mix == TaskMix::mlm_only) {
        s.task = PretrainTask::mlm_only;
        const Span regions[] = {sp(Region::head), sp(Region::head_desc), sp(Region::relation), sp(Region::tail), sp(Region::tail_desc)};
        mask_mlm_region(s.x, s.y2, regions, vocab_size, rng);
    } else {
        const double alpha = rng.uniform();
        if (alpha < kTaskHeadBound) {
            s.task = PretrainTask::mem_head;
            mask_item(sp(Region::head));
            blank(sp(Region::head_desc));
            const Span regions[] = {sp(Region::relation), sp(Region::tail), sp(Region::tail_desc)};
            mask_mlm_region(s.x, s.y2, regions, vocab_size, rng);
        } else if (alpha < kTaskTailBound) {
            s.task = PretrainTask::mem_tail;
            mask_item(sp(Region::tail));
            blank(sp(Region::tail_desc));
            const Span regions[] = {sp(Region::head), sp(Region::head_desc), sp(Region::relation)};
            mask_mlm_region(s.x, s.y2, regions, vocab_size, rng);
        } else {
            s.task = PretrainTask::mrm;
            mask_item(sp(Region::relation));
            const Span regions[] = {sp(Region::head), sp(Region::head_desc), sp(Region::tail), sp(Region::tail_desc)};
            mask_mlm_region(s.x, s.y2, regions, vocab_size, rng);
        }
    }
    s.layout = std::move(layout);
    return s;
}

template <UniformSource R>
PretrainSample build_pretrain_sample(const Triple& triple, const KnowledgeGraph& kg, const Vocabulary& vocab, std::size_t max_len, R& rng,
                                     TaskMix mix = TaskMix::full) {
    return build_pretrain_sample(assemble_triple_sequence(triple, kg, vocab, max_len), vocab.size(), rng, mix);
}

}  // namespace lpbert
