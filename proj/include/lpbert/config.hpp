#pragma once

// Run configuration: YAML mappings flattened to dotted keys, so
// `finetune: {alpha: 0.5}` sets `finetune.alpha`.

#include <algorithm>
#include <cctype>
#include <charconv>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>
#include <yaml-cpp/yaml.h>

#include "lpbert/common.hpp"
#include "lpbert/encoder.hpp"
#include "lpbert/finetune.hpp"
#include "lpbert/pretrain.hpp"

namespace lpbert {

using KeyValues = std::map<std::string, std::string>;

namespace detail {

inline void flatten_yaml(const YAML::Node& node, const std::string& prefix, const std::string& origin, KeyValues& out) {
    for (const auto& kv : node) {
        const std::string key = prefix.empty() ? kv.first.Scalar() : prefix + "." + kv.first.Scalar();
        const YAML::Node& v = kv.second;
        if (v.IsMap()) {
            flatten_yaml(v, key, origin, out);
        } else if (v.IsScalar()) {
            if (!out.emplace(key, v.Scalar()).second) throw Error(ErrorKind::usage, origin + ": duplicate key " + key);
        } else {
            throw Error(ErrorKind::usage, origin + ": " + key + " must be a scalar or a mapping");
        }
    }
}

}  // namespace detail

inline KeyValues parse_config_text(std::string_view text, const std::string& origin = "<config>") {
    YAML::Node root;
    try {
        root = YAML::Load(std::string(text));
    } catch (const YAML::Exception& e) {
        throw Error(ErrorKind::usage, origin + ": " + e.what());
    }
    KeyValues out;
    if (root.IsNull()) return out;
    if (!root.IsMap()) throw Error(ErrorKind::usage, origin + ": top level must be a mapping");
    detail::flatten_yaml(root, "", origin, out);
    return out;
}

inline KeyValues load_config_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(ErrorKind::usage, "cannot read config file " + path.string());
    const std::string text{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
    return parse_config_text(text, path.string());
}

struct RunConfig {
    std::filesystem::path dataset;
    std::string dataset_name;  // lowercased directory name; selects defaults
    std::filesystem::path out = "run";
    int min_freq = 1;
    EncoderConfig encoder{};
    PretrainConfig pretrain{};
    FinetuneConfig finetune{};
    std::uint64_t seed = 42;
    unsigned threads = 1;

    /// Pushes the shared seed and thread count into the stage configs.
    void propagate() {
        pretrain.seed = seed;
        finetune.seed = seed;
        finetune.threads = threads;
        encoder.max_len = std::max({encoder.max_len, pretrain.max_len, finetune.pair_max_len, finetune.entity_max_len});
    }

    void validate() const {
        auto need = [](bool ok, const std::string& what) {
            if (!ok) throw Error(ErrorKind::usage, "invalid config: " + what);
        };
        need(min_freq >= 1, "vocab.min_freq must be >= 1");
        need(pretrain.epochs >= 1, "pretrain.epochs must be >= 1");
        need(pretrain.batch_size >= 1, "pretrain.batch_size must be >= 1");
        need(pretrain.patience >= 1, "pretrain.patience must be >= 1");
        need(pretrain.max_len >= 16, "pretrain.max_len must be >= 16");
        need(finetune.epochs >= 0, "finetune.epochs must be >= 0");
        need(finetune.batch_size >= 1, "finetune.batch_size must be >= 1");
        need(finetune.pair_max_len >= 8 && finetune.entity_max_len >= 4, "fine-tuning max lengths too small");
        need(finetune.sampled_negatives >= 0, "finetune.sampled_k must be >= 0");
        for (double lr : {pretrain.lr_encoder, pretrain.lr_head, finetune.lr_encoder, finetune.lr_head}) need(lr >= 0.0 && lr < 1.0, "learning rates must lie in [0, 1)");
        for (double w : {pretrain.warmup_fraction, finetune.warmup_fraction}) need(w >= 0.0 && w <= 1.0, "warmup fractions must lie in [0, 1]");
        need(threads >= 1, "threads must be >= 1");
        finetune.focal.validate();
        auto enc = encoder;
        enc.vocab_size = std::max(enc.vocab_size, 6);
        enc.validate();
    }

    nlohmann::json to_json() const {
        return {{"dataset", dataset.string()},
                {"dataset_name", dataset_name},
                {"out", out.string()},
                {"seed", seed},
                {"threads", threads},
                {"vocab", {{"min_freq", min_freq}}},
                {"encoder", encoder},
                {"pretrain",
                 {{"epochs", pretrain.epochs},
                  {"batch_size", pretrain.batch_size},
                  {"lr_encoder", pretrain.lr_encoder},
                  {"lr_head", pretrain.lr_head},
                  {"warmup", pretrain.warmup_fraction},
                  {"patience", pretrain.patience},
                  {"weight_decay", pretrain.weight_decay},
                  {"clip_norm", pretrain.clip_norm},
                  {"max_len", pretrain.max_len},
                  {"tasks", pretrain.tasks == TaskMix::full ? "full" : "mlm_only"}}},
                {"finetune",
                 {{"epochs", finetune.epochs},
                  {"batch_size", finetune.batch_size},
                  {"alpha", finetune.focal.alpha},
                  {"gamma", finetune.focal.gamma},
                  {"lr_encoder", finetune.lr_encoder},
                  {"lr_head", finetune.lr_head},
                  {"warmup", finetune.warmup_fraction},
                  {"weight_decay", finetune.weight_decay},
                  {"clip_norm", finetune.clip_norm},
                  {"pair_max_len", finetune.pair_max_len},
                  {"entity_max_len", finetune.entity_max_len},
                  {"negatives", finetune.negatives == NegativeMode::in_batch ? "in_batch" : "sampled"},
                  {"sampled_k", finetune.sampled_negatives},
                  {"labels", finetune.labels == LabelSource::train ? "train" : "all"}}}};
    }
};

/// Per-dataset hyperparameters (batch, epochs, alpha, vocabulary cutoff).
inline void apply_dataset_defaults(RunConfig& c) {
    std::string n = c.dataset_name;
    std::ranges::transform(n, n.begin(), [](unsigned char ch) { return static_cast<char>(std::tolower(ch)); });
    if (n.starts_with("wn18rr")) {
        c.finetune.batch_size = 64;
        c.finetune.epochs = 7;
        c.finetune.focal.alpha = 0.8;
        c.min_freq = 3;
    } else if (n.starts_with("fb15k-237") || n.starts_with("fb15k237")) {
        c.finetune.batch_size = 120;
        c.finetune.epochs = 7;
        c.finetune.focal.alpha = 0.5;
        c.min_freq = 3;
    } else if (n.starts_with("umls")) {
        c.finetune.batch_size = 128;
        c.finetune.epochs = 30;
        c.finetune.focal.alpha = 0.8;
        c.min_freq = 1;
    }
    c.finetune.focal.gamma = 2.0;
}

namespace detail {

template <typename N>
N parse_number(const std::string& key, const std::string& v) {
    N out{};
    const auto* end = v.data() + v.size();
    const auto [ptr, ec] = std::from_chars(v.data(), end, out);
    if (ec != std::errc{} || ptr != end) throw Error(ErrorKind::usage, "config key " + key + ": cannot parse '" + v + "' as a number");
    return out;
}

}  // namespace detail

/// Applies `kv` on top of `c`; unknown keys are rejected.
inline void apply_config(RunConfig& c, const KeyValues& kv) {
    using Setter = std::function<void(const std::string&, const std::string&)>;
    auto i32 = [](int& f) -> Setter { return [&f](const std::string& k, const std::string& v) { f = detail::parse_number<int>(k, v); }; };
    auto f64 = [](double& f) -> Setter { return [&f](const std::string& k, const std::string& v) { f = detail::parse_number<double>(k, v); }; };
    auto& pt = c.pretrain;
    auto& ft = c.finetune;
    const std::map<std::string, Setter> table{
        {"dataset.path", [&](const std::string&, const std::string& v) { c.dataset = v; }},
        {"dataset.name", [&](const std::string&, const std::string& v) { c.dataset_name = v; }},
        {"run.out", [&](const std::string&, const std::string& v) { c.out = v; }},
        {"run.seed", [&](const std::string& k, const std::string& v) { c.seed = detail::parse_number<std::uint64_t>(k, v); }},
        {"run.threads", [&](const std::string& k, const std::string& v) { c.threads = detail::parse_number<unsigned>(k, v); }},
        {"vocab.min_freq", i32(c.min_freq)},
        {"encoder.hidden", i32(c.encoder.hidden)},
        {"encoder.layers", i32(c.encoder.layers)},
        {"encoder.heads", i32(c.encoder.heads)},
        {"encoder.ff", i32(c.encoder.ff)},
        {"encoder.max_len", i32(c.encoder.max_len)},
        {"encoder.dropout", f64(c.encoder.dropout)},
        {"pretrain.epochs", i32(pt.epochs)},
        {"pretrain.batch_size", i32(pt.batch_size)},
        {"pretrain.lr_encoder", f64(pt.lr_encoder)},
        {"pretrain.lr_head", f64(pt.lr_head)},
        {"pretrain.warmup", f64(pt.warmup_fraction)},
        {"pretrain.patience", i32(pt.patience)},
        {"pretrain.weight_decay", f64(pt.weight_decay)},
        {"pretrain.clip_norm", f64(pt.clip_norm)},
        {"pretrain.max_len", i32(pt.max_len)},
        {"pretrain.tasks",
         [&](const std::string& k, const std::string& v) {
             if (v == "full") pt.tasks = TaskMix::full;
             else if (v == "mlm_only") pt.tasks = TaskMix::mlm_only;
             else throw Error(ErrorKind::usage, "config key " + k + ": expected full or mlm_only");
         }},
        {"finetune.epochs", i32(ft.epochs)},
        {"finetune.batch_size", i32(ft.batch_size)},
        {"finetune.alpha", f64(ft.focal.alpha)},
        {"finetune.gamma", f64(ft.focal.gamma)},
        {"finetune.lr_encoder", f64(ft.lr_encoder)},
        {"finetune.lr_head", f64(ft.lr_head)},
        {"finetune.warmup", f64(ft.warmup_fraction)},
        {"finetune.weight_decay", f64(ft.weight_decay)},
        {"finetune.clip_norm", f64(ft.clip_norm)},
        {"finetune.pair_max_len", i32(ft.pair_max_len)},
        {"finetune.entity_max_len", i32(ft.entity_max_len)},
        {"finetune.sampled_k", i32(ft.sampled_negatives)},
        {"finetune.negatives",
         [&](const std::string& k, const std::string& v) {
             if (v == "in_batch") ft.negatives = NegativeMode::in_batch;
             else if (v == "sampled") ft.negatives = NegativeMode::sampled;
             else throw Error(ErrorKind::usage, "config key " + k + ": expected in_batch or sampled");
         }},
        {"finetune.labels",
         [&](const std::string& k, const std::string& v) {
             if (v == "train") ft.labels = LabelSource::train;
             else if (v == "all") ft.labels = LabelSource::all;
             else throw Error(ErrorKind::usage, "config key " + k + ": expected train or all");
         }},
    };
    for (const auto& [k, v] : kv) {
        const auto it = table.find(k);
        if (it == table.end()) throw Error(ErrorKind::usage, "unknown config key: " + k);
        it->second(k, v);
    }
}

/// Layers: built-in defaults, per-dataset defaults, file, then overrides.
/// The dataset (and with it the default set) may come from any layer.
inline RunConfig resolve_config(const KeyValues& file, const KeyValues& overrides) {
    KeyValues merged = file;
    for (const auto& [k, v] : overrides) merged[k] = v;
    RunConfig c;
    if (const auto it = merged.find("dataset.path"); it != merged.end()) c.dataset = it->second;
    c.dataset_name = merged.contains("dataset.name") ? merged.at("dataset.name") : c.dataset.lexically_normal().filename().string();
    if (c.dataset_name.empty() && !c.dataset.empty()) c.dataset_name = c.dataset.lexically_normal().parent_path().filename().string();
    apply_dataset_defaults(c);
    apply_config(c, merged);
    c.propagate();
    c.validate();
    return c;
}

}  // namespace lpbert
