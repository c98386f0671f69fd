// Acceptance checks. Usage: acceptance <1..8|all>. Prints one PASS/FAIL line
// per criterion and exits non-zero if any selected criterion fails.

#include <sys/wait.h>

#include <chrono>
#include <cstdio>
#include <functional>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

#include "support.hpp"

using namespace lpbert;
namespace fs = std::filesystem;

namespace {

struct Outcome {
    bool pass = true;
    std::vector<std::string> notes;

    void check(bool ok, const std::string& what) {
        notes.push_back(std::string(ok ? "ok   " : "FAIL ") + what);
        pass = pass && ok;
    }
    void info(const std::string& what) { notes.push_back("     " + what); }
};

std::string fmt(const char* f, auto... args) {
    char buf[512];
    std::snprintf(buf, sizeof buf, f, args...);
    return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

fs::path work_root() {
    const fs::path p = fs::path(LPBERT_BINARY_DIR) / "acceptance_work";
    fs::create_directories(p);
    return p;
}

/// Runs the CLI from the repository root; stdout+stderr go to `log`.
int run_cli(const std::string& args, const fs::path& log) {
    const std::string cmd = "cd '" + std::string(LPBERT_SOURCE_DIR) + "' && '" + std::string(LPBERT_CLI) + "' " + args + " > '" + log.string() + "' 2>&1";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

nlohmann::json read_json(const fs::path& p) { return nlohmann::json::parse(read_file_bytes(p)); }

// Mean of 1/rank dominates 1/(mean rank); equal ranks make both sides equal up
// to summation rounding.
bool mrr_dominates(const RankingReport& r) { return r.per_query.empty() || r.mrr >= (1.0 / r.mr) * (1.0 - 1e-12); }

void check_report_invariants(Outcome& o, const RankingReport& r, const std::string& label) {
    const bool ordered = r.hits1 <= r.hits3 && r.hits3 <= r.hits10;
    const bool jensen = mrr_dominates(r);
    bool ranks_ok = true;
    for (const auto& q : r.per_query) ranks_ok = ranks_ok && q.rank >= 1;
    o.check(ordered && jensen && ranks_ok, label + fmt(": hits1 %.4f <= hits3 %.4f <= hits10 %.4f, MRR %.4f >= 1/MR %.4f", r.hits1, r.hits3,
                                                        r.hits10, r.mrr, r.mr > 0 ? 1.0 / r.mr : 0.0));
}

RunConfig umls_config() {
    auto kv = load_config_file(fs::path(LPBERT_SOURCE_DIR) / "configs" / "umls.yaml");
    kv["dataset.path"] = (lpbert::testing::data_root() / "umls").string();
    return resolve_config(kv, {});
}

// ---------------------------------------------------------------------------

Outcome criterion_1() {
    Outcome o;
    struct Expect {
        const char* dir;
        std::size_t e, r, tr, va, te;
    };
    const Expect table[] = {{"wn18rr", 40943, 11, 86835, 3034, 3034}, {"fb15k-237", 14541, 237, 272115, 17535, 20466}, {"umls", 135, 46, 5216, 652, 661}};
    for (const auto& x : table) {
        const fs::path dir = lpbert::testing::data_root() / x.dir;
        if (!fs::is_directory(dir)) {
            o.check(false, std::string(x.dir) + ": dataset directory not found at " + dir.string());
            continue;
        }
        const fs::path out = work_root() / ("ingest_" + std::string(x.dir));
        const auto t0 = std::chrono::steady_clock::now();
        const int rc = run_cli("--force --out '" + out.string() + "' ingest '" + dir.string() + "'", work_root() / ("ingest_" + std::string(x.dir) + ".log"));
        const double secs = seconds_since(t0);
        if (rc != 0) {
            o.check(false, std::string(x.dir) + ": ingest exited with " + std::to_string(rc));
            continue;
        }
        const auto s = read_json(out / "ingest.json").at("stats");
        const auto got = std::array<std::size_t, 5>{s["entities"], s["relations"], s["train"], s["valid"], s["test"]};
        const auto want = std::array<std::size_t, 5>{x.e, x.r, x.tr, x.va, x.te};
        o.check(got == want, fmt("%s: %zu/%zu/%zu/%zu/%zu (expected %zu/%zu/%zu/%zu/%zu)", x.dir, got[0], got[1], got[2], got[3], got[4], want[0], want[1],
                                 want[2], want[3], want[4]));
        o.check(secs < 60.0, fmt("%s: ingest runtime %.2f s < 60 s", x.dir, secs));
    }
    return o;
}

Outcome criterion_2() {
    Outcome o;
    const fs::path out = work_root() / "umls_e2e";
    const std::string base = "--config configs/umls.yaml --out '" + out.string() + "' --force";
    fs::remove_all(out);
    const auto t0 = std::chrono::steady_clock::now();
    for (const std::string step : {"ingest data/umls", "pretrain", "finetune", "evaluate --split test", "evaluate --split valid"}) {
        const auto ts = std::chrono::steady_clock::now();
        const std::string tag = step.substr(0, step.find(' ')) + (step.find("valid") != std::string::npos ? "_valid" : "");
        const int rc = run_cli(base + " --set dataset.path='" + (lpbert::testing::data_root() / "umls").string() + "' " + step, out.parent_path() / ("e2e_" + tag + ".log"));
        o.check(rc == 0, fmt("lpbert %s exited %d (%.0f s)", step.c_str(), rc, seconds_since(ts)));
        if (rc != 0) return o;
    }
    const double total = seconds_since(t0);
    const auto report = read_json(out / "report_test.json");
    const double h10 = report.at("hits10"), mr = report.at("mr");
    o.check(h10 >= 0.90, fmt("test Hits@10 %.4f >= 0.90", h10));
    o.check(mr <= 10.0, fmt("test MR %.3f <= 10", mr));
    o.info(fmt("test Hits@1 %.4f Hits@3 %.4f MRR %.4f over %d queries", report.at("hits1").get<double>(), report.at("hits3").get<double>(),
               report.at("mrr").get<double>(), report.at("n_queries").get<int>()));
    o.check(report.at("n_queries") == 2 * 661, "test report has 2 x 661 queries");

    const auto ckpt = load_checkpoint<float>(out / "finetune.ckpt");
    o.check(ckpt.params.parameter_count() <= 5'000'000, fmt("encoder parameters %zu <= 5M", ckpt.params.parameter_count()));
    o.check(total <= 30 * 60.0, fmt("end-to-end runtime %.0f s <= 1800 s", total));

    const auto pre = read_json(out / "manifest_pretrain.json").at("metrics").at("history");
    bool decreasing = pre.size() >= 3;
    for (std::size_t i = 1; decreasing && i < 3; ++i)
        decreasing = pre[i]["valid_mlm"].get<double>() + pre[i]["valid_mim"].get<double>() <
                     pre[i - 1]["valid_mlm"].get<double>() + pre[i - 1]["valid_mim"].get<double>();
    o.check(decreasing, "pre-training validation loss strictly decreases over the first 3 epochs");
    const auto ft = read_json(out / "manifest_finetune.json").at("metrics");
    const double h0 = ft.at("history")[0].at("valid_hits10");
    o.check(ft.at("valid_hits10").get<double>() > h0, fmt("best valid Hits@10 %.4f > epoch-0 value %.4f", ft.at("valid_hits10").get<double>(), h0));

    const auto valid = read_json(out / "report_valid.json");
    o.check(valid.at("split") == "valid" && valid.dump() != report.dump(), "valid and test reports are distinct");
    const auto before = read_file_bytes(out / "report_test.json");
    run_cli(base + " evaluate --split test", out.parent_path() / "e2e_evaluate_again.log");
    o.check(read_file_bytes(out / "report_test.json") == before, "re-running evaluate reproduces the report byte for byte");
    const auto manifest = read_json(out / "manifest_evaluate_test.json");
    o.check(manifest.at("inputs").size() >= 5 && manifest.contains("config"), "evaluate manifest records config and input hashes");
    return o;
}

struct ArmResult {
    double hits10 = 0, mrr = 0;
};

Outcome criterion_3() {
    Outcome o;
    // Every arm gets the configured end-to-end budget.
    RunConfig base = umls_config();
    const auto kg = augment_inverse(load_dataset(base.dataset));
    const auto vocab = build_vocab(kg, base.min_freq);
    base.encoder.vocab_size = static_cast<int>(vocab.size());
    const TextCache text(kg, vocab);
    const auto filter = build_filter_index(kg);
    o.info(fmt("budget per arm: %d pre-training epochs (0 for the no-pre-training arm), %d fine-tuning epochs", base.pretrain.epochs, base.finetune.epochs));

    std::map<std::string, std::vector<double>> arms;
    for (std::uint64_t seed : {1, 2, 3}) {
        RunConfig c = base;
        c.seed = seed;
        c.propagate();
        auto finetune_eval = [&](const EncoderParams<float>& start, NegativeMode neg) {
            auto fc = c.finetune;
            fc.negatives = neg;
            fc.sampled_negatives = 5;
            const auto r = run_finetune(kg, vocab, start, fc);
            const auto rep = evaluate<float>(kg, text, r.best, Split::test, filter, {fc.pair_max_len, fc.entity_max_len, c.threads});
            check_report_invariants(o, rep, "seed " + std::to_string(seed));
            return rep.hits10;
        };
        const auto init = init_params<float>(c.encoder, seed);
        auto pc = c.pretrain;
        pc.tasks = TaskMix::full;
        const auto full = run_pretraining(kg, vocab, init, pc).best;
        pc.tasks = TaskMix::mlm_only;
        const auto mlm = run_pretraining(kg, vocab, init, pc).best;
        const double a = finetune_eval(full, NegativeMode::in_batch);
        const double b = finetune_eval(mlm, NegativeMode::in_batch);
        const double n = finetune_eval(init, NegativeMode::in_batch);
        const double s = finetune_eval(full, NegativeMode::sampled);
        arms["full"].push_back(a), arms["mlm"].push_back(b), arms["none"].push_back(n), arms["sampled"].push_back(s);
        o.info(fmt("seed %llu: full %.4f  mlm-only %.4f  none %.4f  k=5 sampled %.4f", static_cast<unsigned long long>(seed), a, b, n, s));
    }
    auto mean = [&](const std::string& k) {
        double t = 0;
        for (double v : arms[k]) t += v;
        return t / static_cast<double>(arms[k].size());
    };
    const double full = mean("full"), mlm = mean("mlm"), none = mean("none"), sampled = mean("sampled");
    o.check(full > mlm, fmt("mean Hits@10 MLM+MEM+MRM %.4f > MLM-only %.4f", full, mlm));
    o.check(mlm > none, fmt("mean Hits@10 MLM-only %.4f > no pre-training %.4f", mlm, none));
    o.check(full > sampled, fmt("mean Hits@10 in-batch %.4f > diagonal + 5 sampled negatives %.4f", full, sampled));
    return o;
}

/// Brute-force evaluation straight from the raw triples.
RankingReport naive_evaluate(const KnowledgeGraph& raw, Split split, const std::function<double(std::size_t, std::size_t, bool, std::size_t)>& score) {
    // known[(e, r, inverse)] = answers
    std::map<std::tuple<std::size_t, std::size_t, bool>, std::set<std::size_t>> known;
    for (auto s : kAllSplits)
        for (const auto& t : raw.split(s)) {
            known[{index_of(t.head), index_of(t.relation), false}].insert(index_of(t.tail));
            known[{index_of(t.tail), index_of(t.relation), true}].insert(index_of(t.head));
        }
    std::vector<QueryRank> ranks;
    auto rank_one = [&](std::size_t e, std::size_t r, bool inv, std::size_t gold) {
        std::vector<double> sc(raw.entity_count());
        for (std::size_t c = 0; c < sc.size(); ++c) sc[c] = score(e, r, inv, c);
        std::vector<std::size_t> cand;
        const auto& k = known[{e, r, inv}];
        for (std::size_t c = 0; c < sc.size(); ++c)
            if (c == gold || !k.contains(c)) cand.push_back(c);
        std::stable_sort(cand.begin(), cand.end(), [&](auto a, auto b) { return sc[a] > sc[b]; });
        std::size_t first = 0;
        while (sc[cand[first]] != sc[gold]) ++first;
        std::size_t last = first;
        while (last + 1 < cand.size() && sc[cand[last + 1]] == sc[gold]) ++last;
        return first + 1 + (last - first + 1) / 2;
    };
    const auto nr = raw.relation_count();
    for (const auto& t : raw.split(split)) {
        const auto h = index_of(t.head), r = index_of(t.relation), tl = index_of(t.tail);
        ranks.push_back({{t.head, t.relation, t.tail}, rank_one(h, r, false, tl)});
        ranks.push_back({{t.tail, relation_at(r + nr), t.head}, rank_one(tl, r, true, h)});
    }
    double h1 = 0, h3 = 0, h10 = 0, sum = 0, rr = 0;
    for (const auto& q : ranks) h1 += q.rank <= 1, h3 += q.rank <= 3, h10 += q.rank <= 10, sum += static_cast<double>(q.rank), rr += 1.0 / static_cast<double>(q.rank);
    RankingReport out;
    const double n = static_cast<double>(ranks.size());
    out.per_query = std::move(ranks);
    out.hits1 = h1 / n, out.hits3 = h3 / n, out.hits10 = h10 / n, out.mr = sum / n, out.mrr = rr / n;
    return out;
}

Outcome criterion_4() {
    Outcome o;
    std::size_t kgs = 0, rank_mismatch = 0, metric_mismatch = 0, label_mismatch = 0, queries = 0, cells = 0;
    for (std::uint64_t seed = 0; seed < 120; ++seed) {
        Rng pick(seed * 7 + 1);
        const std::size_t ne = 3 + pick.below(48), nr = 1 + pick.below(5);
        const auto raw = lpbert::testing::random_kg(ne, nr, 0.05 + 0.3 * pick.uniform(), seed);
        const auto kg = augment_inverse(raw);
        const auto filter = build_filter_index(kg);
        const auto qs = make_queries(kg, Split::test);
        ++kgs;
        // Integer score table with many ties: exact in floating point.
        auto table_score = [&](std::size_t e, std::size_t r, bool inv, std::size_t c) {
            return static_cast<double>(mix64(seed ^ (e * 1315423911ULL) ^ ((r * 2 + inv) << 20) ^ (c << 40)) % 5);
        };
        const auto got = evaluate_scored<double>("test", qs, filter, kg.entity_count(), [&](std::size_t i, std::vector<double>& out) {
            const auto& q = qs[i];
            const auto r = index_of(q.relation);
            const bool inv = r >= raw.relation_count();
            for (std::size_t c = 0; c < out.size(); ++c) out[c] = table_score(index_of(q.entity), inv ? r - raw.relation_count() : r, inv, c);
        }, 1 + seed % 3);
        const auto want = naive_evaluate(raw, Split::test, table_score);
        // Cosine path over random vectors, ranked by the naive sort.
        Rng vr(seed + 1000);
        Mat<double> ents(static_cast<Eigen::Index>(ne), 6), qv(static_cast<Eigen::Index>(qs.size()), 6);
        for (Eigen::Index i = 0; i < ents.size(); ++i) ents.data()[i] = vr.normal();
        // A query's vector depends only on its (entity, relation) key, so
        // repeated keys with different golds share one vector.
        std::map<std::tuple<std::size_t, std::size_t, bool>, Eigen::Index> row_of;
        for (std::size_t i = 0; i < qs.size(); ++i) {
            const auto r = index_of(qs[i].relation);
            const bool inv = r >= raw.relation_count();
            const auto [it, fresh] = row_of.try_emplace({index_of(qs[i].entity), inv ? r - raw.relation_count() : r, inv}, static_cast<Eigen::Index>(i));
            if (fresh)
                for (Eigen::Index k = 0; k < qv.cols(); ++k) qv(it->second, k) = vr.normal();
            else
                qv.row(static_cast<Eigen::Index>(i)) = qv.row(it->second);
        }
        const auto got_cos = evaluate_vectors<double>("test", qs, qv, ents, filter);
        const auto want_cos = naive_evaluate(raw, Split::test, [&](std::size_t e, std::size_t r, bool inv, std::size_t c) {
            const auto row = qv.row(row_of.at({e, r, inv}));
            return row.dot(ents.row(static_cast<Eigen::Index>(c))) / (row.norm() * ents.row(static_cast<Eigen::Index>(c)).norm());
        });
        for (const auto* pair : {&got, &got_cos}) {
            const auto& w = pair == &got ? want : want_cos;
            if (pair->per_query.size() != w.per_query.size()) {
                ++rank_mismatch;
                continue;
            }
            for (std::size_t i = 0; i < w.per_query.size(); ++i) {
                const bool mm = pair->per_query[i].rank != w.per_query[i].rank || pair->per_query[i].query.gold != w.per_query[i].query.gold;
                rank_mismatch += mm;
                ++queries;
            }
            metric_mismatch += pair->hits1 != w.hits1 || pair->hits3 != w.hits3 || pair->hits10 != w.hits10 || pair->mr != w.mr || pair->mrr != w.mrr;
        }
        // Label matrices against a double-loop dict-membership oracle.
        const std::array<Split, 1> train_only{Split::train};
        const auto tf = build_filter_index(kg, train_only);
        std::set<std::tuple<std::size_t, std::size_t, std::size_t>> dict;
        for (const auto& t : kg.split(Split::train)) dict.insert({index_of(t.head), index_of(t.relation), index_of(t.tail)});
        auto train = kg.split(Split::train);
        pick.shuffle(train);
        for (std::size_t start = 0; start < train.size(); start += 16) {
            const std::span<const Triple> b(train.data() + start, std::min<std::size_t>(16, train.size() - start));
            const auto y = build_label_matrix(b, tf);
            for (std::size_t i = 0; i < b.size(); ++i)
                for (std::size_t j = 0; j < b.size(); ++j) {
                    const bool want_y = i == j || dict.contains({index_of(b[i].head), index_of(b[i].relation), index_of(b[j].tail)});
                    label_mismatch += (y(i, j) != 0) != want_y;
                    ++cells;
                }
        }
    }
    o.check(kgs >= 100, fmt("%zu randomized toy graphs (<= 50 entities, <= 5 relations)", kgs));
    o.check(rank_mismatch == 0, fmt("per-query ranks match the brute-force reference (%zu queries, %zu mismatches)", queries, rank_mismatch));
    o.check(metric_mismatch == 0, fmt("aggregate metrics identical (%zu mismatching runs)", metric_mismatch));
    o.check(label_mismatch == 0, fmt("label matrices match the dict oracle (%zu cells, %zu mismatches)", cells, label_mismatch));
    return o;
}

Outcome criterion_5() {
    Outcome o;
    const auto dir = lpbert::testing::data_root() / "umls";
    KnowledgeGraph kg = fs::is_directory(dir) ? augment_inverse(load_dataset(dir)) : augment_inverse(lpbert::testing::random_kg(50, 5, 0.3, 1));
    const auto vocab = build_vocab(kg, 1);
    const TextCache text(kg, vocab);
    const auto& train = kg.split(Split::train);
    std::array<std::size_t, 4> tasks{};
    std::size_t eligible = 0, selected = 0, masked = 0, randomized = 0, kept = 0, violations = 0;
    const std::size_t n = 100'000;
    Rng rng(2024);
    for (std::size_t k = 0; k < n; ++k) {
        const auto layout = text.triple(train[k % train.size()], 128);
        const auto s = build_pretrain_sample(layout, vocab.size(), rng);
        ++tasks[static_cast<std::size_t>(s.task)];
        Span item{}, blank{};
        std::vector<Region> mlm;
        switch (s.task) {
            case PretrainTask::mem_head: item = layout.span(Region::head), blank = layout.span(Region::head_desc), mlm = {Region::relation, Region::tail, Region::tail_desc}; break;
            case PretrainTask::mem_tail: item = layout.span(Region::tail), blank = layout.span(Region::tail_desc), mlm = {Region::head, Region::head_desc, Region::relation}; break;
            default: item = layout.span(Region::relation), mlm = {Region::head, Region::head_desc, Region::tail, Region::tail_desc}; break;
        }
        for (auto r : mlm) eligible += layout.span(r).size();
        for (std::size_t i = 0; i < s.x.size(); ++i) {
            const bool in_item = item.contains(i), in_blank = blank.contains(i);
            bool in_mlm = false;
            for (auto r : mlm) in_mlm = in_mlm || layout.span(r).contains(i);
            // Leak freedom: item fully hidden; blanked description hidden; targets only where allowed.
            if (in_item && (s.x[i] != kMask || s.y1[i] != layout.tokens[i])) ++violations;
            if (!in_item && s.y1[i] != kPad) ++violations;
            if (in_blank && s.x[i] != kPad) ++violations;
            if (!in_mlm && s.y2[i] != kPad) ++violations;
            // Overlay reconstruction.
            if (!in_blank) {
                const TokenId rebuilt = s.y1[i] != kPad ? s.y1[i] : s.y2[i] != kPad ? s.y2[i] : s.x[i];
                if (rebuilt != layout.tokens[i]) ++violations;
            }
            if (s.y2[i] != kPad) {
                ++selected;
                if (s.x[i] == kMask) ++masked;
                else if (s.x[i] != layout.tokens[i]) ++randomized;
                else ++kept;
            }
        }
    }
    const double fh = static_cast<double>(tasks[0]) / n, ft = static_cast<double>(tasks[1]) / n, fr = static_cast<double>(tasks[2]) / n;
    o.check(std::abs(fh - 0.4) <= 0.02 && std::abs(ft - 0.4) <= 0.02 && std::abs(fr - 0.2) <= 0.02,
            fmt("task frequencies MEM_h %.4f MEM_t %.4f MRM %.4f within 0.02 of (0.4, 0.4, 0.2)", fh, ft, fr));
    const double sel = static_cast<double>(selected) / static_cast<double>(eligible);
    o.check(std::abs(sel - 0.15) <= 0.02, fmt("MLM selection rate %.4f within 0.02 of 0.15 (%zu eligible positions)", sel, eligible));
    const double pm = static_cast<double>(masked) / static_cast<double>(selected), pr = static_cast<double>(randomized) / static_cast<double>(selected),
                 pk = static_cast<double>(kept) / static_cast<double>(selected);
    o.check(std::abs(pm - 0.8) <= 0.02 && std::abs(pr - 0.1) <= 0.02 && std::abs(pk - 0.1) <= 0.02,
            fmt("MLM branches mask %.4f random %.4f keep %.4f within 0.02 of (0.8, 0.1, 0.1)", pm, pr, pk));
    o.check(violations == 0, fmt("leak-freedom and overlay reconstruction hold on all %zu samples (%zu violations)", n, violations));
    return o;
}

double rel_err(double a, double b) { return std::abs(a - b) / std::max(1e-8, std::abs(a) + std::abs(b)); }

Outcome criterion_6() {
    Outcome o;
    // Encoder + prediction head through the pre-training loss.
    {
        EncoderConfig c = lpbert::testing::tiny_config(24);
        auto p = init_params<double>(c, 11);
        Rng jitter(5);
        p.for_each([&](const ParamInfo&, Mat<double>& m) {
            for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] += 0.05 * jitter.normal();
        });
        std::vector<PretrainSample> s(3);
        s[0].x = {kCls, kMask, 9, kSep, 10, kSep, kMask, kSep};
        s[0].y1 = {0, 7, 0, 0, 0, 0, 0, 0};
        s[0].y2 = {0, 0, 0, 0, 0, 0, 13, 0};
        s[1].x = {kCls, 8, kSep, kMask, kMask, kSep, 6};
        s[1].y1 = {0, 0, 0, 14, 15, 0, 0};
        s[1].y2 = {0, 0, 0, 0, 0, 0, 0};
        s[2].x = {kCls, 20, kPad, kSep, kMask, kSep};
        s[2].y1 = {0, 0, 0, 0, 0, 0};
        s[2].y2 = {0, 21, 0, 0, 22, 0};
        EncoderParams<double> g(c);
        Rng r0(1);
        (void)pretrain_loss<double>(p, s, &r0, &g);
        auto ps = p.tensors();
        auto gs = g.tensors();
        const auto infos = p.infos();
        Rng pick(3);
        double worst = 0;
        std::size_t n = 0;
        std::string worst_name;
        for (std::size_t t = 0; t < ps.size(); ++t)
            for (int k = 0; k < 4; ++k) {
                const auto idx = static_cast<Eigen::Index>(pick.below(static_cast<std::uint64_t>(ps[t]->size())));
                double& x = ps[t]->data()[idx];
                const double orig = x;
                auto eval = [&] {
                    Rng r(1);
                    return pretrain_loss<double>(p, s, &r, nullptr).total();
                };
                x = orig + 1e-5;
                const double up = eval();
                x = orig - 1e-5;
                const double dn = eval();
                x = orig;
                const double num = (up - dn) / 2e-5, ana = gs[t]->data()[idx];
                if (std::abs(num) < 1e-9 && std::abs(ana) < 1e-9) continue;
                const double e = rel_err(num, ana);
                if (e > worst) worst = e, worst_name = infos[t].name;
                ++n;
            }
        o.check(worst <= 1e-4 && n >= 20, fmt("encoder + head finite differences: %zu coordinates, worst relative error %.2e (%s)", n, worst, worst_name.c_str()));
    }
    // Joint loss w.r.t. the pair and entity vectors.
    {
        Rng rng(8);
        Mat<double> P(6, 8), E(6, 8);
        for (Eigen::Index i = 0; i < P.size(); ++i) P.data()[i] = rng.normal(), E.data()[i] = rng.normal();
        LabelMatrix y{6, std::vector<std::uint8_t>(36, 0)};
        for (std::size_t i = 0; i < 6; ++i) y.cells[i * 6 + i] = 1;
        y.cells[1] = y.cells[14] = 1;
        const FocalParams fp{0.8, 2.0};
        const auto r = joint_loss_with_grad<double>(P, E, y, fp);
        double worst = 0;
        std::size_t n = 0;
        for (auto* m : {&P, &E})
            for (Eigen::Index i = 0; i < m->size(); ++i) {
                double& x = m->data()[i];
                const double orig = x;
                x = orig + 1e-5;
                const double up = joint_loss_with_grad<double>(P, E, y, fp).loss;
                x = orig - 1e-5;
                const double dn = joint_loss_with_grad<double>(P, E, y, fp).loss;
                x = orig;
                worst = std::max(worst, rel_err((up - dn) / 2e-5, (m == &P ? r.d_pairs : r.d_entities).data()[i]));
                ++n;
            }
        o.check(worst <= 1e-4, fmt("joint loss finite differences: %zu coordinates, worst relative error %.2e", n, worst));
    }
    // Closed-form spot values.
    {
        auto p = init_params<double>(lpbert::testing::tiny_config(100), 2);
        p.out_w.setZero();
        p.out_b.setZero();
        std::vector<PretrainSample> s(1);
        s[0].x = {kCls, kMask, kSep, 50};
        s[0].y1 = {0, 30, 0, 0};
        s[0].y2 = {0, 0, 0, 77};
        const auto r = pretrain_loss<double>(p, s, nullptr, nullptr);
        o.check(std::abs(r.mlm_loss - std::log(100.0)) <= 1e-6 && std::abs(r.mim_loss - std::log(100.0)) <= 1e-6,
                fmt("uniform logits: cross-entropy %.9f / %.9f = ln 100 %.9f", r.mlm_loss, r.mim_loss, std::log(100.0)));
        const double l2 = loss::distance(0.0, true);
        o.check(std::abs(l2 - 0.5) <= 1e-6, fmt("identical vectors, positive: L2 = sigmoid(0) = %.9f", l2));
        double worst = 0;
        for (double a : {0.25, 0.5, 0.8})
            for (double g : {0.5, 1.0, 2.0, 3.0}) worst = std::max(worst, std::abs(loss::focal(loss::cosine_to_prob(1.0), true, {a, g})));
        o.check(worst <= 1e-6, fmt("perfect positive (d1 = 1): focal term %.3e", worst));
    }
    return o;
}

Outcome criterion_7() {
    Outcome o;
    std::size_t runs = 0, bad = 0;
    auto record = [&](const RankingReport& r) {
        ++runs;
        const bool ok = r.hits1 <= r.hits3 && r.hits3 <= r.hits10 && mrr_dominates(r);
        bad += !ok;
    };
    for (std::uint64_t seed = 0; seed < 60; ++seed) {
        const auto kg = augment_inverse(lpbert::testing::random_kg(5 + seed % 45, 1 + seed % 5, 0.3, seed));
        const auto filter = build_filter_index(kg);
        const auto qs = make_queries(kg, Split::test);
        const auto ne = static_cast<Eigen::Index>(kg.entity_count());
        Rng rng(seed);
        Mat<double> e(ne, 4), q(static_cast<Eigen::Index>(qs.size()), 4);
        for (Eigen::Index i = 0; i < e.size(); ++i) e.data()[i] = rng.normal();
        for (Eigen::Index i = 0; i < q.size(); ++i) q.data()[i] = rng.normal();
        record(evaluate_vectors<double>("test", qs, q, e, filter));                                             // random
        record(evaluate_vectors<double>("test", qs, Mat<double>::Ones(q.rows(), 4), Mat<double>::Ones(ne, 4), filter));  // constant
        record(evaluate_vectors<double>("test", qs, q, Mat<double>::Zero(ne, 4), filter));                      // all-zero entities
        Mat<double> two = Mat<double>::Ones(ne, 4);
        for (Eigen::Index i = 0; i < ne; i += 2) two.row(i) *= -1;
        record(evaluate_vectors<double>("test", qs, Mat<double>::Ones(q.rows(), 4), two, filter));  // two score levels
        record(evaluate_scored<double>("test", qs, filter, kg.entity_count(), [&](std::size_t i, std::vector<double>& out) {  // adversarial: gold last
            std::fill(out.begin(), out.end(), 1.0);
            out[index_of(qs[i].gold)] = -1.0;
        }));
    }
    const auto dir = lpbert::testing::data_root() / "umls";
    if (fs::is_directory(dir)) {
        const auto kg = augment_inverse(load_dataset(dir));
        const auto vocab = build_vocab(kg, 1);
        const TextCache text(kg, vocab);
        const auto filter = build_filter_index(kg);
        EncoderConfig c;
        c.vocab_size = static_cast<int>(vocab.size());
        auto random_model = init_params<float>(c, 1);
        auto constant_model = random_model;
        constant_model.tok_emb.setZero();
        constant_model.pos_emb.setZero();  // every sequence maps to the same vector
        for (const auto* m : {&random_model, &constant_model}) {
            const auto rep = evaluate<float>(kg, text, *m, Split::test, filter, {96, 32, 1});
            record(rep);
            check_report_invariants(o, rep, m == &random_model ? "UMLS, random-init encoder" : "UMLS, constant-output encoder");
        }
    }
    o.check(bad == 0, fmt("%zu evaluation runs (random, constant, zero, two-level, adversarial), %zu invariant violations", runs, bad));
    return o;
}

Outcome criterion_8() {
    Outcome o;
    const auto src = lpbert::testing::data_root() / "umls";
    const fs::path out = work_root() / "umls_unseen";
    fs::remove_all(out);
    const int rc = run_cli("--force --seed 7 --out '" + out.string() + "' resplit-unseen --ratio 0.1 '" + src.string() + "'", work_root() / "resplit.log");
    o.check(rc == 0, fmt("lpbert resplit-unseen exited %d", rc));
    if (rc != 0) return o;
    const auto raw = load_dataset(out);
    std::set<EntityId> train_entities;
    for (const auto& t : raw.split(Split::train)) train_entities.insert({t.head, t.tail});
    std::size_t touching = 0;
    for (const auto& t : raw.split(Split::test)) touching += !train_entities.contains(t.head) || !train_entities.contains(t.tail);
    o.check(touching == raw.split(Split::test).size() && touching > 0,
            fmt("%zu/%zu test triples involve an entity absent from train", touching, raw.split(Split::test).size()));

    RunConfig c = umls_config();
    c.pretrain.epochs = 10;
    c.finetune.epochs = 10;
    const auto kg = augment_inverse(raw);
    const auto vocab = build_vocab(kg, c.min_freq);
    c.encoder.vocab_size = static_cast<int>(vocab.size());
    c.propagate();
    const auto pre = run_pretraining(kg, vocab, init_params<float>(c.encoder, c.seed), c.pretrain).best;
    const auto ft = run_finetune(kg, vocab, pre, c.finetune);
    const TextCache text(kg, vocab);
    const auto rep = evaluate<float>(kg, text, ft.best, Split::test, build_filter_index(kg), {c.finetune.pair_max_len, c.finetune.entity_max_len, 1});
    check_report_invariants(o, rep, "unseen-entity test report");
    const double baseline = 10.0 / static_cast<double>(kg.entity_count());
    o.check(rep.hits10 > baseline, fmt("unseen-entity test Hits@10 %.4f > random-ranking expectation 10/|E| = %.4f (%zu queries, MRR %.4f)", rep.hits10,
                                       baseline, rep.query_count(), rep.mrr));
    return o;
}

}  // namespace

int main(int argc, char** argv) {
    const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
        {"1 dataset fidelity", criterion_1},       {"2 UMLS end-to-end", criterion_2},     {"3 ablation direction", criterion_3},
        {"4 oracle equivalence", criterion_4},     {"5 sampler statistics", criterion_5},  {"6 numerical correctness", criterion_6},
        {"7 metric invariants", criterion_7},      {"8 unseen-entity capability", criterion_8}};
    const std::string which = argc > 1 ? argv[1] : "all";
    bool all_pass = true, ran = false;
    for (const auto& [name, fn] : criteria) {
        if (which != "all" && name.substr(0, name.find(' ')) != which) continue;
        ran = true;
        const auto t0 = std::chrono::steady_clock::now();
        Outcome o;
        try {
            o = fn();
        } catch (const std::exception& e) {
            o.check(false, std::string("exception: ") + e.what());
        }
        for (const auto& n : o.notes) std::cout << "    " << n << '\n';
        std::cout << (o.pass ? "[PASS] " : "[FAIL] ") << "criterion " << name << fmt(" (%.1f s)", seconds_since(t0)) << std::endl;
        all_pass = all_pass && o.pass;
    }
    if (!ran) {
        std::cerr << "unknown criterion " << which << '\n';
        return 2;
    }
    return all_pass ? 0 : 1;
}
