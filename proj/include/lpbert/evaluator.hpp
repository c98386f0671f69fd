#pragma once

// Filtered ranking evaluation over the full entity catalog.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "lpbert/encoder.hpp"
#include "lpbert/kg.hpp"
#include "lpbert/text.hpp"

namespace lpbert {

/// Tail query (h, r, ?) or head query rewritten as (t, r_rev, ?).
struct RankingQuery {
    EntityId entity{};
    RelationId relation{};
    EntityId gold{};
};

/// Two queries per original triple of the split.
inline std::vector<RankingQuery> make_queries(const KnowledgeGraph& kg, Split split) {
    if (!kg.augmented) throw Error(ErrorKind::runtime, "evaluation expects an augmented graph (head queries use inverse relations)");
    std::vector<RankingQuery> out;
    for (const auto& t : kg.split(split)) {
        if (kg.relations[index_of(t.relation)].is_inverse) continue;
        out.push_back({t.head, t.relation, t.tail});
        out.push_back({t.tail, kg.inverse_of(t.relation), t.head});
    }
    return out;
}

/// Filtered rank with mid-rank ties: 1 + #(score > gold) + ceil(#(non-gold
/// ties) / 2), after discarding every known-true candidate except the gold.
template <typename S>
std::size_t filtered_rank(std::span<const S> scores, EntityId gold, std::span<const EntityId> known) {
    const auto g = index_of(gold);
    if (g >= scores.size()) throw Error(ErrorKind::runtime, "gold entity " + std::to_string(g) + " outside the catalog");
    const S gold_score = scores[g];
    std::size_t greater = 0, ties = 0;
    auto k = known.begin();
    for (std::size_t e = 0; e < scores.size(); ++e) {
        while (k != known.end() && index_of(*k) < e) ++k;
        if (e == g) continue;
        if (k != known.end() && index_of(*k) == e) continue;
        if (scores[e] > gold_score) ++greater;
        else if (scores[e] == gold_score) ++ties;
    }
    return 1 + greater + (ties + 1) / 2;
}

struct QueryRank {
    RankingQuery query;
    std::size_t rank = 0;
};

struct RankingReport {
    std::string split;
    std::vector<QueryRank> per_query;
    double hits1 = 0, hits3 = 0, hits10 = 0, mr = 0, mrr = 0;

    std::size_t query_count() const noexcept { return per_query.size(); }

    nlohmann::json to_json(const KnowledgeGraph& kg, bool include_queries = true) const {
        nlohmann::json j{{"split", split}, {"n_queries", per_query.size()}, {"hits1", hits1}, {"hits3", hits3},
                         {"hits10", hits10}, {"mr", mr},                   {"mrr", mrr}};
        j["per_query"] = nlohmann::json::array();
        if (include_queries)
            for (const auto& q : per_query)
                j["per_query"].push_back({{"query",
                                           {kg.entities[index_of(q.query.entity)].identifier, kg.relations[index_of(q.query.relation)].identifier}},
                                          {"gold", kg.entities[index_of(q.query.gold)].identifier},
                                          {"rank", q.rank}});
        return j;
    }
};

/// Aggregates in query order.
inline RankingReport summarize(std::string split, std::vector<QueryRank> ranks) {
    RankingReport r;
    r.split = std::move(split);
    r.per_query = std::move(ranks);
    if (r.per_query.empty()) return r;
    double h1 = 0, h3 = 0, h10 = 0, sum = 0, rr = 0;
    for (const auto& q : r.per_query) {
        h1 += q.rank <= 1;
        h3 += q.rank <= 3;
        h10 += q.rank <= 10;
        sum += static_cast<double>(q.rank);
        rr += 1.0 / static_cast<double>(q.rank);
    }
    const double n = static_cast<double>(r.per_query.size());
    r.hits1 = h1 / n;
    r.hits3 = h3 / n;
    r.hits10 = h10 / n;
    r.mr = sum / n;
    r.mrr = rr / n;
    return r;
}

/// Runs `fn(i)` for i in [0, n) over `threads` workers (static chunks).
template <typename F>
void parallel_for(std::size_t n, unsigned threads, F&& fn) {
    threads = std::max(1u, std::min<unsigned>(threads, static_cast<unsigned>(std::max<std::size_t>(n, 1))));
    if (threads == 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::vector<std::jthread> pool;
    const std::size_t chunk = (n + threads - 1) / threads;
    for (unsigned w = 0; w < threads; ++w)
        pool.emplace_back([&, w] {
            const std::size_t lo = w * chunk, hi = std::min(n, lo + chunk);
            for (std::size_t i = lo; i < hi; ++i) fn(i);
        });
}

/// Ranks every query with a caller-supplied scorer: `score(i, out)` fills
/// `out` (catalog-sized) with candidate scores for query i.
template <typename S, typename ScoreFn>
RankingReport evaluate_scored(std::string split, std::span<const RankingQuery> queries, const FilterIndex& filter, std::size_t entity_count,
                              ScoreFn&& score, unsigned threads = 1) {
    std::vector<QueryRank> ranks(queries.size());
    parallel_for(queries.size(), threads, [&](std::size_t i) {
        std::vector<S> scores(entity_count);
        score(i, scores);
        const auto& q = queries[i];
        ranks[i] = {q, filtered_rank<S>(scores, q.gold, filter.lookup(q.entity, q.relation))};
    });
    return summarize(std::move(split), std::move(ranks));
}

/// Rows scaled to unit length; zero rows stay zero (cosine 0 against all).
template <typename T>
Mat<T> normalize_rows(Mat<T> m) {
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
        const T n = m.row(i).norm();
        if (n > T(0)) m.row(i) /= n;
    }
    return m;
}

/// Ranking against precomputed vectors: cosine of query row i with every
/// entity row.
template <typename T>
RankingReport evaluate_vectors(std::string split, std::span<const RankingQuery> queries, const Mat<T>& query_vectors, const Mat<T>& entity_table,
                               const FilterIndex& filter, unsigned threads = 1) {
    const Mat<T> qn = normalize_rows<T>(query_vectors);
    const Mat<T> en = normalize_rows<T>(entity_table);
    return evaluate_scored<T>(
        std::move(split), queries, filter, static_cast<std::size_t>(en.rows()),
        [&](std::size_t i, std::vector<T>& out) {
            Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>> dst(out.data(), static_cast<Eigen::Index>(out.size()));
            dst.noalias() = qn.row(static_cast<Eigen::Index>(i)) * en.transpose();
        },
        threads);
}

struct EvalOptions {
    int pair_max_len = 96;
    int entity_max_len = 32;
    unsigned threads = 1;
};

/// One vector per catalog entity, in catalog order.
template <typename T>
Mat<T> precompute_entity_embeddings(const KnowledgeGraph& kg, const TextCache& text, const EncoderParams<T>& params, int entity_max_len) {
    std::vector<SequenceLayout> seqs;
    seqs.reserve(kg.entity_count());
    for (std::size_t e = 0; e < kg.entity_count(); ++e) seqs.push_back(text.entity(entity_at(e), static_cast<std::size_t>(entity_max_len)));
    return encode_pooled(params, seqs);
}

template <typename T>
Mat<T> encode_queries(std::span<const RankingQuery> queries, const TextCache& text, const EncoderParams<T>& params, int pair_max_len) {
    std::vector<SequenceLayout> seqs;
    seqs.reserve(queries.size());
    for (const auto& q : queries) seqs.push_back(text.pair(q.entity, q.relation, static_cast<std::size_t>(pair_max_len)));
    return encode_pooled(params, seqs);
}

/// Filtered rank of a single query against a precomputed entity table.
template <typename T>
std::size_t rank_query(const RankingQuery& q, const Mat<T>& table, const TextCache& text, const EncoderParams<T>& params, const FilterIndex& filter,
                       int pair_max_len = 96) {
    const Mat<T> qv = encode_queries<T>(std::span(&q, 1), text, params, pair_max_len);
    const auto report = evaluate_vectors<T>("", std::span(&q, 1), qv, table, filter);
    return report.per_query.front().rank;
}

template <typename T>
RankingReport evaluate(const KnowledgeGraph& kg, const TextCache& text, const EncoderParams<T>& params, Split split, const FilterIndex& filter,
                       const EvalOptions& opts = {}) {
    const auto queries = make_queries(kg, split);
    const Mat<T> table = precompute_entity_embeddings(kg, text, params, opts.entity_max_len);
    const Mat<T> qv = encode_queries<T>(queries, text, params, opts.pair_max_len);
    return evaluate_vectors<T>(std::string(split_name(split)), queries, qv, table, filter, opts.threads);
}

}  // namespace lpbert
