#pragma once

// Knowledge-graph datasets: catalogs, splits, inverse-relation augmentation,
// filter indices and the unseen-entity resplit.

#include <algorithm>
#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "lpbert/common.hpp"

namespace lpbert {

enum class EntityId : std::int32_t {};
enum class RelationId : std::int32_t {};

constexpr std::size_t index_of(EntityId e) noexcept { return static_cast<std::size_t>(e); }
constexpr std::size_t index_of(RelationId r) noexcept { return static_cast<std::size_t>(r); }
constexpr EntityId entity_at(std::size_t i) noexcept { return static_cast<EntityId>(i); }
constexpr RelationId relation_at(std::size_t i) noexcept { return static_cast<RelationId>(i); }

struct Triple {
    EntityId head{};
    RelationId relation{};
    EntityId tail{};

    friend bool operator==(const Triple&, const Triple&) = default;
    friend auto operator<=>(const Triple&, const Triple&) = default;
};

struct TripleHash {
    std::size_t operator()(const Triple& t) const noexcept {
        return static_cast<std::size_t>(mix64((static_cast<std::uint64_t>(index_of(t.head)) << 40) ^
                                              (static_cast<std::uint64_t>(index_of(t.relation)) << 20) ^
                                              index_of(t.tail)));
    }
};

enum class Split : std::uint8_t { train = 0, valid = 1, test = 2 };
inline constexpr std::array<Split, 3> kAllSplits{Split::train, Split::valid, Split::test};

inline std::string_view split_name(Split s) {
    switch (s) {
        case Split::train: return "train";
        case Split::valid: return "valid";
        case Split::test: return "test";
    }
    return "?";
}

inline Split parse_split(std::string_view name) {
    if (name == "train") return Split::train;
    if (name == "valid" || name == "dev") return Split::valid;
    if (name == "test") return Split::test;
    throw Error(ErrorKind::usage, "unknown split '" + std::string(name) + "' (expected train, valid or test)");
}

struct Entity {
    std::string identifier;
    std::string name;
    std::string description;
};

struct Relation {
    std::string identifier;
    std::string text;
    bool is_inverse = false;
    RelationId base{};
};

inline constexpr std::string_view kInverseMarker = "reverse";
inline constexpr std::string_view kInverseIdSuffix = "#rev";

struct KnowledgeGraph {
    std::string name;
    std::vector<Entity> entities;
    std::vector<Relation> relations;
    std::array<std::vector<Triple>, 3> splits;
    bool augmented = false;
    std::vector<std::string> warnings;

    std::size_t entity_count() const noexcept { return entities.size(); }
    std::size_t relation_count() const noexcept { return relations.size(); }
    std::size_t base_relation_count() const noexcept { return augmented ? relations.size() / 2 : relations.size(); }

    const std::vector<Triple>& split(Split s) const { return splits[static_cast<std::size_t>(s)]; }
    std::vector<Triple>& split(Split s) { return splits[static_cast<std::size_t>(s)]; }

    /// Inverse of an original relation, or the base of an inverse one.
    RelationId inverse_of(RelationId r) const {
        if (!augmented) throw Error(ErrorKind::runtime, "inverse relations exist only after augmentation");
        const auto base = base_relation_count();
        const auto i = index_of(r);
        return relation_at(i < base ? i + base : i - base);
    }

    std::optional<EntityId> find_entity(std::string_view identifier) const {
        auto it = std::lower_bound(entities.begin(), entities.end(), identifier,
                                   [](const Entity& e, std::string_view id) { return e.identifier < id; });
        if (it == entities.end() || it->identifier != identifier) return std::nullopt;
        return entity_at(static_cast<std::size_t>(it - entities.begin()));
    }

    std::optional<RelationId> find_relation(std::string_view identifier) const {
        for (std::size_t i = 0; i < relations.size(); ++i)
            if (relations[i].identifier == identifier) return relation_at(i);
        return std::nullopt;
    }
};

namespace detail {

inline std::vector<std::string_view> split_tabs(std::string_view line) {
    std::vector<std::string_view> fields;
    std::size_t start = 0;
    while (true) {
        const auto pos = line.find('\t', start);
        if (pos == std::string_view::npos) {
            fields.push_back(line.substr(start));
            break;
        }
        fields.push_back(line.substr(start, pos - start));
        start = pos + 1;
    }
    return fields;
}

inline std::string_view chomp(std::string_view line) {
    while (!line.empty() && (line.back() == '\r' || line.back() == '\n')) line.remove_suffix(1);
    return line;
}

struct RawTriple {
    std::string head, relation, tail;
};

inline std::vector<RawTriple> read_triples(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(ErrorKind::load, "missing split file: " + path.string());
    std::vector<RawTriple> out;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const auto view = chomp(line);
        if (view.empty()) continue;
        const auto fields = split_tabs(view);
        if (fields.size() != 3)
            throw Error(ErrorKind::parse, path.string() + ":" + std::to_string(line_no) + ": expected 3 tab-separated fields, got " +
                                              std::to_string(fields.size()));
        out.push_back({std::string(fields[0]), std::string(fields[1]), std::string(fields[2])});
    }
    return out;
}

/// identifier TAB text; absent file yields an empty map.
inline std::unordered_map<std::string, std::string> read_text_file(const std::filesystem::path& path) {
    std::unordered_map<std::string, std::string> out;
    std::ifstream in(path, std::ios::binary);
    if (!in) return out;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const auto view = chomp(line);
        if (view.empty()) continue;
        const auto tab = view.find('\t');
        if (tab == std::string_view::npos)
            throw Error(ErrorKind::parse, path.string() + ":" + std::to_string(line_no) + ": expected identifier<TAB>text");
        out.emplace(std::string(view.substr(0, tab)), std::string(view.substr(tab + 1)));
    }
    return out;
}

}  // namespace detail

/// Loads `train.tsv`, `valid.tsv`, `test.tsv` and the optional
/// `entity2text.tsv`, `entity2textlong.tsv`, `relation2text.tsv`.
/// Identifier indices follow the lexicographic order of the raw identifiers.
inline KnowledgeGraph load_dataset(const std::filesystem::path& dir) {
    namespace fs = std::filesystem;
    if (!fs::is_directory(dir)) throw Error(ErrorKind::load, "dataset directory not found: " + dir.string());

    std::array<std::vector<detail::RawTriple>, 3> raw;
    for (auto s : kAllSplits) raw[static_cast<std::size_t>(s)] = detail::read_triples(dir / (std::string(split_name(s)) + ".tsv"));

    std::set<std::string> entity_ids, relation_ids;
    for (const auto& split : raw)
        for (const auto& t : split) {
            entity_ids.insert(t.head);
            entity_ids.insert(t.tail);
            relation_ids.insert(t.relation);
        }

    const auto names = detail::read_text_file(dir / "entity2text.tsv");
    const auto longs = detail::read_text_file(dir / "entity2textlong.tsv");
    const auto rel_texts = detail::read_text_file(dir / "relation2text.tsv");

    KnowledgeGraph kg;
    kg.name = fs::absolute(dir).lexically_normal().filename().string();
    if (kg.name.empty()) kg.name = fs::absolute(dir).lexically_normal().parent_path().filename().string();

    std::size_t missing_text = 0;
    kg.entities.reserve(entity_ids.size());
    for (const auto& id : entity_ids) {
        Entity e{id, id, {}};
        if (auto it = names.find(id); it != names.end()) {
            e.name = it->second;
        } else if (!names.empty()) {
            ++missing_text;
        }
        if (auto it = longs.find(id); it != longs.end()) e.description = it->second;
        kg.entities.push_back(std::move(e));
    }
    if (missing_text > 0)
        kg.warnings.push_back(std::to_string(missing_text) + " entities missing from entity2text.tsv; identifiers used as text");

    for (const auto& id : relation_ids) {
        Relation r{id, id, false, relation_at(kg.relations.size())};
        if (auto it = rel_texts.find(id); it != rel_texts.end()) r.text = it->second;
        kg.relations.push_back(std::move(r));
    }

    std::unordered_map<std::string_view, EntityId> eidx;
    std::unordered_map<std::string_view, RelationId> ridx;
    for (std::size_t i = 0; i < kg.entities.size(); ++i) eidx.emplace(kg.entities[i].identifier, entity_at(i));
    for (std::size_t i = 0; i < kg.relations.size(); ++i) ridx.emplace(kg.relations[i].identifier, relation_at(i));

    for (auto s : kAllSplits) {
        auto& dst = kg.split(s);
        const auto& src = raw[static_cast<std::size_t>(s)];
        std::unordered_set<Triple, TripleHash> seen;
        seen.reserve(src.size() * 2);
        dst.reserve(src.size());
        std::size_t dups = 0;
        for (const auto& t : src) {
            Triple tr{eidx.at(t.head), ridx.at(t.relation), eidx.at(t.tail)};
            if (seen.insert(tr).second) {
                dst.push_back(tr);
            } else {
                ++dups;
            }
        }
        if (dups > 0)
            kg.warnings.push_back(std::to_string(dups) + " duplicate triples dropped from " + std::string(split_name(s)) + ".tsv");
    }
    return kg;
}

/// Doubles the relation catalog and mirrors every triple (h, r, t) as
/// (t, r_rev, h) within its split.
[[nodiscard]] inline KnowledgeGraph augment_inverse(KnowledgeGraph kg) {
    if (kg.augmented) throw Error(ErrorKind::runtime, "knowledge graph is already augmented with inverse relations");
    const std::size_t base = kg.relations.size();
    kg.relations.reserve(base * 2);
    for (std::size_t i = 0; i < base; ++i) {
        const auto& r = kg.relations[i];
        kg.relations.push_back(Relation{r.identifier + std::string(kInverseIdSuffix),
                                        std::string(kInverseMarker) + " " + r.text, true, relation_at(i)});
    }
    for (auto& split : kg.splits) {
        const std::size_t n = split.size();
        split.reserve(n * 2);
        for (std::size_t i = 0; i < n; ++i) {
            const Triple t = split[i];
            split.push_back(Triple{t.tail, relation_at(index_of(t.relation) + base), t.head});
        }
    }
    kg.augmented = true;
    return kg;
}

/// Known-true completions keyed by (entity, relation). Head queries are
/// expressed through the inverse relation, so one map serves both directions.
class FilterIndex {
public:
    FilterIndex() = default;
    explicit FilterIndex(std::size_t relation_count) : relation_count_(relation_count) {}

    void add(EntityId e, RelationId r, EntityId answer) { pending_[key(e, r)].push_back(answer); }

    void finalize() {
        for (auto& [k, v] : pending_) {
            std::sort(v.begin(), v.end());
            v.erase(std::unique(v.begin(), v.end()), v.end());
        }
        map_ = std::move(pending_);
        pending_.clear();
    }

    std::span<const EntityId> lookup(EntityId e, RelationId r) const {
        auto it = map_.find(key(e, r));
        if (it == map_.end()) return {};
        return it->second;
    }

    bool contains(EntityId e, RelationId r, EntityId answer) const {
        const auto answers = lookup(e, r);
        return std::binary_search(answers.begin(), answers.end(), answer);
    }

    std::size_t key_count() const noexcept { return map_.size(); }

private:
    std::uint64_t key(EntityId e, RelationId r) const noexcept {
        return static_cast<std::uint64_t>(index_of(e)) * relation_count_ + index_of(r);
    }

    std::size_t relation_count_ = 0;
    std::unordered_map<std::uint64_t, std::vector<EntityId>> map_;
    std::unordered_map<std::uint64_t, std::vector<EntityId>> pending_;
};

/// Filter over the chosen splits (all three by default).
inline FilterIndex build_filter_index(const KnowledgeGraph& kg, std::span<const Split> splits = kAllSplits) {
    FilterIndex index(kg.relation_count());
    for (auto s : splits)
        for (const auto& t : kg.split(s)) index.add(t.head, t.relation, t.tail);
    index.finalize();
    return index;
}

/// Moves a random ratio of entities into held-out validation and test sets
/// and reassigns triples so held-out entities never appear in training.
inline KnowledgeGraph resplit_unseen(const KnowledgeGraph& kg, double ratio, std::uint64_t seed) {
    if (!(ratio > 0.0 && ratio < 0.5))
        throw Error(ErrorKind::usage, "resplit ratio must lie in (0, 0.5), got " + std::to_string(ratio));
    if (kg.augmented) throw Error(ErrorKind::runtime, "resplit_unseen expects a graph without inverse augmentation");

    const std::size_t n = kg.entity_count();
    const auto held = static_cast<std::size_t>(std::floor(ratio * static_cast<double>(n)));
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    Rng rng(seed);
    rng.shuffle(order);

    enum : std::uint8_t { kTrain = 0, kValid = 1, kTest = 2 };
    std::vector<std::uint8_t> owner(n, kTrain);
    for (std::size_t i = 0; i < held; ++i) owner[order[i]] = kTest;
    for (std::size_t i = held; i < 2 * held; ++i) owner[order[i]] = kValid;

    KnowledgeGraph out;
    out.name = kg.name + "-unseen";
    out.entities = kg.entities;
    out.relations = kg.relations;
    std::unordered_set<Triple, TripleHash> seen;
    for (auto s : kAllSplits)
        for (const auto& t : kg.split(s)) {
            if (!seen.insert(t).second) continue;
            const auto claim = std::max(owner[index_of(t.head)], owner[index_of(t.tail)]);
            out.splits[claim].push_back(t);
        }
    return out;
}

/// Writes a dataset directory that `load_dataset` reads back to the same
/// catalogs (provided every entity occurs in some triple).
inline void save_dataset(const KnowledgeGraph& kg, const std::filesystem::path& dir) {
    if (kg.augmented) throw Error(ErrorKind::runtime, "save_dataset expects a graph without inverse augmentation");
    std::filesystem::create_directories(dir);
    for (auto s : kAllSplits) {
        std::ofstream out(dir / (std::string(split_name(s)) + ".tsv"), std::ios::binary);
        for (const auto& t : kg.split(s))
            out << kg.entities[index_of(t.head)].identifier << '\t' << kg.relations[index_of(t.relation)].identifier << '\t'
                << kg.entities[index_of(t.tail)].identifier << '\n';
        if (!out) throw Error(ErrorKind::runtime, "failed writing " + (dir / split_name(s)).string());
    }
    std::ofstream names(dir / "entity2text.tsv", std::ios::binary);
    std::ofstream longs(dir / "entity2textlong.tsv", std::ios::binary);
    for (const auto& e : kg.entities) {
        names << e.identifier << '\t' << e.name << '\n';
        if (!e.description.empty()) longs << e.identifier << '\t' << e.description << '\n';
    }
    std::ofstream rels(dir / "relation2text.tsv", std::ios::binary);
    for (const auto& r : kg.relations) rels << r.identifier << '\t' << r.text << '\n';
}

/// `index<TAB>identifier` lines for entities and relations.
inline void save_catalogs(const KnowledgeGraph& kg, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    std::ofstream ents(dir / "entities.tsv", std::ios::binary);
    for (std::size_t i = 0; i < kg.entities.size(); ++i) ents << i << '\t' << kg.entities[i].identifier << '\n';
    std::ofstream rels(dir / "relations.tsv", std::ios::binary);
    for (std::size_t i = 0; i < kg.relations.size(); ++i) rels << i << '\t' << kg.relations[i].identifier << '\n';
}

struct Catalogs {
    std::vector<std::string> entities;
    std::vector<std::string> relations;
};

inline Catalogs load_catalogs(const std::filesystem::path& dir) {
    auto read = [](const std::filesystem::path& path) {
        std::ifstream in(path, std::ios::binary);
        if (!in) throw Error(ErrorKind::load, "missing catalog file: " + path.string());
        std::vector<std::string> ids;
        std::string line;
        std::size_t line_no = 0;
        while (std::getline(in, line)) {
            ++line_no;
            const auto fields = detail::split_tabs(detail::chomp(line));
            if (fields.size() != 2 || fields[0] != std::to_string(ids.size()))
                throw Error(ErrorKind::parse, path.string() + ":" + std::to_string(line_no) + ": malformed catalog line");
            ids.emplace_back(fields[1]);
        }
        return ids;
    };
    return {read(dir / "entities.tsv"), read(dir / "relations.tsv")};
}

}  // namespace lpbert
