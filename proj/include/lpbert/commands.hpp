#pragma once

// Command implementations behind the `lpbert` executable. Each command reads
// and writes artifacts inside a workspace directory (`--out`).

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "lpbert/config.hpp"
#include "lpbert/encoder.hpp"
#include "lpbert/evaluator.hpp"
#include "lpbert/finetune.hpp"
#include "lpbert/kg.hpp"
#include "lpbert/manifest.hpp"
#include "lpbert/pretrain.hpp"
#include "lpbert/text.hpp"

namespace lpbert {

namespace fs = std::filesystem;

namespace artifact {
inline constexpr const char* kIngest = "ingest.json";
inline constexpr const char* kVocab = "vocab.txt";
inline constexpr const char* kPretrainCkpt = "pretrain.ckpt";
inline constexpr const char* kFinetuneCkpt = "finetune.ckpt";
inline constexpr const char* kEntityTable = "entity_table.bin";
}  // namespace artifact

struct GlobalOptions {
    std::optional<fs::path> config_file;
    std::optional<std::uint64_t> seed;
    std::optional<fs::path> out;
    std::optional<unsigned> threads;
    bool force = false;
    KeyValues overrides;  // --set key=value
};

struct DatasetStats {
    std::string name;
    std::size_t entities = 0, relations = 0, train = 0, valid = 0, test = 0;

    nlohmann::json to_json() const {
        return {{"dataset", name}, {"entities", entities}, {"relations", relations}, {"train", train}, {"valid", valid}, {"test", test}};
    }
};

inline DatasetStats dataset_stats(const KnowledgeGraph& kg) {
    if (kg.augmented) throw Error(ErrorKind::runtime, "statistics are reported before augmentation");
    return {kg.name, kg.entity_count(), kg.relation_count(), kg.split(Split::train).size(), kg.split(Split::valid).size(),
            kg.split(Split::test).size()};
}

inline void print_stats_table(std::ostream& os, const DatasetStats& s) {
    os << std::left << std::setw(14) << "Dataset" << std::right << std::setw(10) << "#Ent" << std::setw(8) << "#Rel" << std::setw(10) << "#Train"
       << std::setw(8) << "#Dev" << std::setw(8) << "#Test" << '\n';
    os << std::left << std::setw(14) << s.name << std::right << std::setw(10) << s.entities << std::setw(8) << s.relations << std::setw(10)
       << s.train << std::setw(8) << s.valid << std::setw(8) << s.test << '\n';
}

namespace detail {

inline std::string missing_artifact(const fs::path& path, const std::string& producer) {
    return "missing " + path.string() + "; run `lpbert " + producer + "` first";
}

inline void require_file(const fs::path& path, const std::string& producer) {
    if (!fs::is_regular_file(path)) throw Error(ErrorKind::runtime, missing_artifact(path, producer));
}

inline void refuse_overwrite(const fs::path& path, bool force) {
    if (!force && fs::exists(path))
        throw Error(ErrorKind::usage, path.string() + " already exists; pass --force to overwrite");
}

inline std::vector<fs::path> dataset_files(const fs::path& dir) {
    std::vector<fs::path> out;
    for (const char* f : {"train.tsv", "valid.tsv", "test.tsv", "entity2text.tsv", "entity2textlong.tsv", "relation2text.tsv"})
        if (fs::is_regular_file(dir / f)) out.push_back(dir / f);
    return out;
}

inline void append_jsonl(std::ofstream& out, const nlohmann::json& j) { out << j.dump() << '\n'; }

}  // namespace detail

/// Resolves the run configuration. The dataset path falls back to the one
/// recorded by `ingest` in the workspace.
inline RunConfig make_run_config(const GlobalOptions& g, const std::optional<fs::path>& dataset = std::nullopt) {
    KeyValues file = g.config_file ? load_config_file(*g.config_file) : KeyValues{};
    KeyValues flags = g.overrides;
    if (g.seed) flags["run.seed"] = std::to_string(*g.seed);
    if (g.out) flags["run.out"] = g.out->string();
    if (g.threads) flags["run.threads"] = std::to_string(*g.threads);
    if (dataset) flags["dataset.path"] = dataset->string();
    const fs::path out = flags.contains("run.out") ? fs::path(flags["run.out"]) : file.contains("run.out") ? fs::path(file["run.out"]) : fs::path("run");
    if (!flags.contains("dataset.path") && !file.contains("dataset.path") && fs::is_regular_file(out / artifact::kIngest)) {
        const auto rec = nlohmann::json::parse(read_file_bytes(out / artifact::kIngest));
        flags["dataset.path"] = rec.at("dataset").get<std::string>();
    }
    return resolve_config(file, flags);
}

/// Loads the dataset named by the config; a missing directory is a usage error.
inline KnowledgeGraph load_configured_dataset(const RunConfig& cfg) {
    if (cfg.dataset.empty()) throw Error(ErrorKind::usage, "no dataset configured; set dataset.path or run `lpbert ingest` first");
    if (!fs::is_directory(cfg.dataset)) throw Error(ErrorKind::usage, "dataset directory not found: " + cfg.dataset.string());
    return load_dataset(cfg.dataset);
}

struct Workspace {
    RunConfig cfg;
    KnowledgeGraph kg;  // augmented
    Vocabulary vocab;
};

/// Config, augmented graph and vocabulary, checked against the catalogs that
/// `ingest` recorded.
inline Workspace open_workspace(const GlobalOptions& g) {
    Workspace w;
    w.cfg = make_run_config(g);
    const fs::path& out = w.cfg.out;
    detail::require_file(out / artifact::kIngest, "ingest");
    detail::require_file(out / artifact::kVocab, "ingest");
    w.kg = augment_inverse(load_configured_dataset(w.cfg));
    w.vocab = Vocabulary::load(out / artifact::kVocab);
    const auto cat = load_catalogs(out);
    if (cat.entities.size() != w.kg.entity_count() || cat.relations.size() != w.kg.relation_count())
        throw Error(ErrorKind::runtime, "dataset no longer matches the ingested catalogs in " + out.string() + "; re-run `lpbert ingest --force`");
    for (std::size_t i = 0; i < cat.entities.size(); ++i)
        if (cat.entities[i] != w.kg.entities[i].identifier)
            throw Error(ErrorKind::runtime, "entity catalog mismatch at index " + std::to_string(i) + "; re-run `lpbert ingest --force`");
    w.cfg.encoder.vocab_size = static_cast<int>(w.vocab.size());
    return w;
}

inline DatasetStats cmd_ingest(const GlobalOptions& g, const fs::path& dataset_dir, std::ostream& os) {
    RunConfig cfg = make_run_config(g, dataset_dir);
    const fs::path& out = cfg.out;
    if (!g.force && fs::exists(out) && !fs::is_empty(out))
        throw Error(ErrorKind::usage, "output directory " + out.string() + " is not empty; pass --force to overwrite");
    const KnowledgeGraph raw = load_configured_dataset(cfg);
    const DatasetStats stats = dataset_stats(raw);
    const KnowledgeGraph kg = augment_inverse(raw);
    const Vocabulary vocab = build_vocab(kg, cfg.min_freq);
    const FilterIndex filter = build_filter_index(kg);

    fs::create_directories(out);
    vocab.save(out / artifact::kVocab);
    save_catalogs(kg, out);
    nlohmann::json rec{{"dataset", fs::absolute(cfg.dataset).lexically_normal().string()},
                       {"dataset_name", cfg.dataset_name},
                       {"stats", stats.to_json()},
                       {"vocab_size", vocab.size()},
                       {"filter_keys", filter.key_count()},
                       {"warnings", kg.warnings}};
    write_text_atomic(out / artifact::kIngest, rec.dump(2) + "\n");

    Manifest m("ingest");
    m.set_config(cfg.to_json());
    for (const auto& f : detail::dataset_files(cfg.dataset)) m.add_input(f);
    for (const char* f : {artifact::kVocab, "entities.tsv", "relations.tsv", artifact::kIngest}) m.add_output(out / f);
    m.set_metric("stats", stats.to_json());
    m.write(out / "manifest_ingest.json");

    for (const auto& w : kg.warnings) os << "warning: " << w << '\n';
    print_stats_table(os, stats);
    os << "vocabulary: " << vocab.size() << " tokens; artifacts in " << out.string() << '\n';
    return stats;
}

inline fs::path cmd_pretrain(const GlobalOptions& g, std::ostream& os) {
    Workspace w = open_workspace(g);
    const fs::path out = w.cfg.out;
    const fs::path ckpt = out / artifact::kPretrainCkpt;
    detail::refuse_overwrite(ckpt, g.force);
    std::ofstream log(out / "pretrain_log.jsonl", std::ios::binary | std::ios::trunc);
    auto params = init_params<float>(w.cfg.encoder, w.cfg.seed);
    const auto result = run_pretraining(w.kg, w.vocab, std::move(params), w.cfg.pretrain, [&](const nlohmann::json& j) {
        detail::append_jsonl(log, j);
        if (j.contains("valid_total"))
            os << "epoch " << j["epoch"].get<int>() << "  train " << j["train_loss"].get<double>() << "  valid " << j["valid_total"].get<double>()
               << (j["best"].get<bool>() ? "  *" : "") << '\n';
    });
    const nlohmann::json history = [&] {
        auto h = nlohmann::json::array();
        for (const auto& e : result.history)
            h.push_back({{"epoch", e.epoch}, {"train_loss", e.train_loss}, {"valid_mlm", e.valid_mlm}, {"valid_mim", e.valid_mim}});
        return h;
    }();
    save_checkpoint(result.best, ckpt, {{"stage", "pretrain"}, {"best_epoch", result.best_epoch}, {"seed", w.cfg.seed}});

    Manifest m("pretrain");
    m.set_config(w.cfg.to_json());
    for (const auto& f : detail::dataset_files(w.cfg.dataset)) m.add_input(f);
    m.add_input(out / artifact::kVocab);
    m.add_output(ckpt);
    m.set_metric("best_epoch", result.best_epoch);
    m.set_metric("stopped_early", result.stopped_early);
    m.set_metric("history", history);
    m.write(out / "manifest_pretrain.json");
    os << "checkpoint: " << ckpt.string() << '\n';
    return ckpt;
}

/// Entity table cache: magic, u64 rows, u64 cols, 40-char checkpoint hash,
/// then row-major float32 data.
inline void save_entity_table(const Mat<float>& table, const std::string& ckpt_hash, const fs::path& path) {
    std::ostringstream os(std::ios::binary);
    os.write("LPBERTET", 8);
    const std::uint64_t dims[2] = {static_cast<std::uint64_t>(table.rows()), static_cast<std::uint64_t>(table.cols())};
    os.write(reinterpret_cast<const char*>(dims), sizeof dims);
    os.write(ckpt_hash.data(), 40);
    os.write(reinterpret_cast<const char*>(table.data()), static_cast<std::streamsize>(table.size() * sizeof(float)));
    write_text_atomic(path, os.str());
}

/// Returns the cached table when it exists and belongs to `ckpt_hash`.
inline std::optional<Mat<float>> load_entity_table(const fs::path& path, const std::string& ckpt_hash) {
    if (!fs::is_regular_file(path)) return std::nullopt;
    const std::string bytes = read_file_bytes(path);
    if (bytes.size() < 64 || bytes.compare(0, 8, "LPBERTET") != 0 || bytes.compare(24, 40, ckpt_hash) != 0) return std::nullopt;
    std::uint64_t dims[2];
    std::memcpy(dims, bytes.data() + 8, sizeof dims);
    if (bytes.size() != 64 + dims[0] * dims[1] * sizeof(float)) return std::nullopt;
    Mat<float> t(static_cast<Eigen::Index>(dims[0]), static_cast<Eigen::Index>(dims[1]));
    std::memcpy(t.data(), bytes.data() + 64, bytes.size() - 64);
    return t;
}

struct FinetuneCommandOptions {
    std::optional<fs::path> checkpoint;  // defaults to the pre-training output
    bool from_scratch = false;
};

inline fs::path cmd_finetune(const GlobalOptions& g, const FinetuneCommandOptions& o, std::ostream& os) {
    Workspace w = open_workspace(g);
    const fs::path out = w.cfg.out;
    const fs::path ckpt = out / artifact::kFinetuneCkpt;
    detail::refuse_overwrite(ckpt, g.force);
    EncoderParams<float> start(w.cfg.encoder);
    std::optional<fs::path> source;
    if (o.from_scratch) {
        if (o.checkpoint) throw Error(ErrorKind::usage, "--checkpoint and --from-scratch are mutually exclusive");
        start = init_params<float>(w.cfg.encoder, w.cfg.seed);
    } else {
        source = o.checkpoint.value_or(out / artifact::kPretrainCkpt);
        detail::require_file(*source, "pretrain");
        start = load_checkpoint<float>(*source).params;
        if (start.config.vocab_size != static_cast<int>(w.vocab.size()))
            throw Error(ErrorKind::runtime, "checkpoint vocabulary size " + std::to_string(start.config.vocab_size) + " does not match " +
                                                std::to_string(w.vocab.size()));
    }
    std::ofstream log(out / "finetune_log.jsonl", std::ios::binary | std::ios::trunc);
    const auto result = run_finetune(w.kg, w.vocab, std::move(start), w.cfg.finetune, [&](const nlohmann::json& j) {
        detail::append_jsonl(log, j);
        if (j.contains("valid_hits10"))
            os << "epoch " << j["epoch"].get<int>() << "  train " << j["train_loss"].get<double>() << "  valid Hits@10 "
               << j["valid_hits10"].get<double>() << (j["best"].get<bool>() ? "  *" : "") << '\n';
    });
    save_checkpoint(result.best, ckpt, {{"stage", "finetune"}, {"best_epoch", result.best_epoch}, {"valid_hits10", result.best_hits10}, {"seed", w.cfg.seed}});
    const TextCache text(w.kg, w.vocab);
    save_entity_table(precompute_entity_embeddings(w.kg, text, result.best, w.cfg.finetune.entity_max_len), git_blob_hash_file(ckpt),
                      out / artifact::kEntityTable);

    Manifest m("finetune");
    m.set_config(w.cfg.to_json());
    for (const auto& f : detail::dataset_files(w.cfg.dataset)) m.add_input(f);
    m.add_input(out / artifact::kVocab);
    if (source) m.add_input(*source);
    m.add_output(ckpt);
    m.add_output(out / artifact::kEntityTable);
    m.set_metric("best_epoch", result.best_epoch);
    m.set_metric("valid_hits10", result.best_hits10);
    auto hist = nlohmann::json::array();
    for (const auto& e : result.history)
        hist.push_back({{"epoch", e.epoch}, {"train_loss", e.train_loss}, {"valid_hits10", e.valid_hits10}, {"valid_mrr", e.valid_mrr}});
    m.set_metric("history", hist);
    m.write(out / "manifest_finetune.json");
    os << "checkpoint: " << ckpt.string() << " (best epoch " << result.best_epoch << ")\n";
    return ckpt;
}

inline Mat<float> entity_table_for(const Workspace& w, const TextCache& text, const EncoderParams<float>& params, const fs::path& ckpt) {
    const auto hash = git_blob_hash_file(ckpt);
    if (auto cached = load_entity_table(w.cfg.out / artifact::kEntityTable, hash);
        cached && static_cast<std::size_t>(cached->rows()) == w.kg.entity_count() && cached->cols() == params.config.hidden)
        return *cached;
    return precompute_entity_embeddings(w.kg, text, params, w.cfg.finetune.entity_max_len);
}

struct EvaluateCommandOptions {
    Split split = Split::test;
    std::optional<fs::path> checkpoint;
};

inline fs::path cmd_evaluate(const GlobalOptions& g, const EvaluateCommandOptions& o, std::ostream& os) {
    if (o.split == Split::train) throw Error(ErrorKind::usage, "evaluate expects --split valid or --split test");
    Workspace w = open_workspace(g);
    const fs::path out = w.cfg.out;
    const fs::path ckpt = o.checkpoint.value_or(out / artifact::kFinetuneCkpt);
    detail::require_file(ckpt, "finetune");
    const auto params = load_checkpoint<float>(ckpt).params;
    const TextCache text(w.kg, w.vocab);
    const FilterIndex filter = build_filter_index(w.kg);
    const auto queries = make_queries(w.kg, o.split);
    const Mat<float> table = entity_table_for(w, text, params, ckpt);
    const Mat<float> qv = encode_queries<float>(queries, text, params, w.cfg.finetune.pair_max_len);
    const auto report = evaluate_vectors<float>(std::string(split_name(o.split)), queries, qv, table, filter, w.cfg.threads);

    const fs::path path = out / ("report_" + std::string(split_name(o.split)) + ".json");
    write_text_atomic(path, report.to_json(w.kg).dump(2) + "\n");
    Manifest m("evaluate");
    m.set_config(w.cfg.to_json());
    for (const auto& f : detail::dataset_files(w.cfg.dataset)) m.add_input(f);
    m.add_input(out / artifact::kVocab);
    m.add_input(ckpt);
    m.add_output(path);
    auto metrics = report.to_json(w.kg, false);
    metrics.erase("per_query");
    m.set_metric("report", metrics);
    m.write(out / ("manifest_evaluate_" + std::string(split_name(o.split)) + ".json"));

    os << std::fixed << std::setprecision(4) << split_name(o.split) << ": queries " << report.query_count() << "  Hits@1 " << report.hits1
       << "  Hits@3 " << report.hits3 << "  Hits@10 " << report.hits10 << "  MR " << report.mr << "  MRR " << report.mrr << '\n';
    os << "report: " << path.string() << '\n';
    return path;
}

struct ResplitCommandOptions {
    fs::path dataset;
    double ratio = 0.1;
};

/// Writes a new dataset directory (to `--out`) whose valid/test triples all
/// touch entities absent from train.
inline DatasetStats cmd_resplit_unseen(const GlobalOptions& g, const ResplitCommandOptions& o, std::ostream& os) {
    if (!g.out) throw Error(ErrorKind::usage, "resplit-unseen needs --out for the new dataset directory");
    if (!fs::is_directory(o.dataset)) throw Error(ErrorKind::usage, "dataset directory not found: " + o.dataset.string());
    if (!g.force && fs::exists(*g.out) && !fs::is_empty(*g.out))
        throw Error(ErrorKind::usage, "output directory " + g.out->string() + " is not empty; pass --force to overwrite");
    const std::uint64_t seed = g.seed.value_or(42);
    const KnowledgeGraph kg = load_dataset(o.dataset);
    KnowledgeGraph split = resplit_unseen(kg, o.ratio, seed);
    split.name = g.out->lexically_normal().filename().string();
    save_dataset(split, *g.out);
    const auto stats = dataset_stats(split);

    Manifest m("resplit-unseen");
    m.set_config({{"dataset", o.dataset.string()}, {"ratio", o.ratio}, {"seed", seed}});
    for (const auto& f : detail::dataset_files(o.dataset)) m.add_input(f);
    for (const auto& f : detail::dataset_files(*g.out)) m.add_output(f);
    m.set_metric("stats", stats.to_json());
    m.write(*g.out / "manifest_resplit.json");
    print_stats_table(os, stats);
    return stats;
}

struct PredictCommandOptions {
    std::string head;  // entity identifier, or free text for unseen entities
    std::string relation;
    std::size_t k = 10;
    bool filtered = false;
    std::optional<fs::path> checkpoint;
};

struct Prediction {
    std::string entity;
    std::string name;
    double score = 0.0;
};

inline std::vector<Prediction> cmd_predict(const GlobalOptions& g, const PredictCommandOptions& o, std::ostream& os) {
    Workspace w = open_workspace(g);
    const fs::path ckpt = o.checkpoint.value_or(w.cfg.out / artifact::kFinetuneCkpt);
    detail::require_file(ckpt, "finetune");
    const auto rel = w.kg.find_relation(o.relation);
    if (!rel) throw Error(ErrorKind::usage, "unknown relation: " + o.relation);
    const auto params = load_checkpoint<float>(ckpt).params;
    const TextCache text(w.kg, w.vocab);
    const auto head = w.kg.find_entity(o.head);
    const std::size_t len = static_cast<std::size_t>(w.cfg.finetune.pair_max_len);
    const SequenceLayout query = head ? text.pair(*head, *rel, len) : assemble_text_pair(o.head, *rel, w.kg, w.vocab, len);
    const Mat<float> qv = normalize_rows<float>(encode_pooled(params, std::vector<SequenceLayout>{query}));
    const Mat<float> table = normalize_rows<float>(entity_table_for(w, text, params, ckpt));
    const Eigen::RowVectorXf scores = qv.row(0) * table.transpose();

    std::vector<std::size_t> order;
    std::vector<EntityId> known;
    if (o.filtered && head) {
        const FilterIndex filter = build_filter_index(w.kg);
        const auto k = filter.lookup(*head, *rel);
        known.assign(k.begin(), k.end());
    }
    for (std::size_t e = 0; e < w.kg.entity_count(); ++e)
        if (!std::ranges::binary_search(known, entity_at(e))) order.push_back(e);
    std::ranges::stable_sort(order, [&](std::size_t a, std::size_t b) { return scores(static_cast<Eigen::Index>(a)) > scores(static_cast<Eigen::Index>(b)); });
    order.resize(std::min(order.size(), o.k));

    std::vector<Prediction> out;
    if (!head) os << "(head not in catalog; encoding it as free text)\n";
    for (std::size_t i = 0; i < order.size(); ++i) {
        const auto& e = w.kg.entities[order[i]];
        out.push_back({e.identifier, e.name, static_cast<double>(scores(static_cast<Eigen::Index>(order[i])))});
        os << std::setw(4) << i + 1 << "  " << std::fixed << std::setprecision(4) << out.back().score << "  " << e.identifier;
        if (e.name != e.identifier) os << "  (" << e.name << ")";
        os << '\n';
    }
    return out;
}

}  // namespace lpbert
