#pragma once

#include <unistd.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "lpbert/lpbert.hpp"

namespace lpbert::testing {

namespace fs = std::filesystem;

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
public:
    explicit TempDir(const std::string& tag) {
        static int counter = 0;
        path_ = fs::temp_directory_path() / ("lpbert_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
        fs::remove_all(path_);
        fs::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        fs::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    const fs::path& path() const noexcept { return path_; }
    fs::path operator/(const std::string& name) const { return path_ / name; }

private:
    fs::path path_;
};

inline void write_file(const fs::path& path, const std::string& text) {
    fs::create_directories(path.parent_path());
    std::ofstream(path, std::ios::binary) << text;
}

inline fs::path data_root() {
    if (const char* env = std::getenv("LPBERT_DATA_DIR")) return env;
    return fs::path(LPBERT_SOURCE_DIR) / "data";
}

/// Random graph with `ne` entities e00.., `nr` relations r0.., and about
/// `density` * ne * nr distinct triples split 80/10/10. Entities get
/// two-word names and a short description.
inline KnowledgeGraph random_kg(std::size_t ne, std::size_t nr, double density, std::uint64_t seed) {
    Rng rng(seed);
    KnowledgeGraph kg;
    kg.name = "toy";
    for (std::size_t i = 0; i < ne; ++i) {
        const std::string id = (i < 10 ? "e0" : "e") + std::to_string(i);
        kg.entities.push_back({id, "thing " + std::to_string(i), "a toy entity number " + std::to_string(i % 7)});
    }
    for (std::size_t r = 0; r < nr; ++r)
        kg.relations.push_back({"r" + std::to_string(r), "relation " + std::to_string(r), false, relation_at(r)});
    const auto target = std::max<std::size_t>(3, static_cast<std::size_t>(density * static_cast<double>(ne * nr)));
    std::vector<Triple> all;
    std::unordered_set<Triple, TripleHash> seen;
    for (std::size_t tries = 0; all.size() < target && tries < target * 20; ++tries) {
        Triple t{entity_at(rng.below(ne)), relation_at(rng.below(nr)), entity_at(rng.below(ne))};
        if (seen.insert(t).second) all.push_back(t);
    }
    for (std::size_t i = 0; i < all.size(); ++i) {
        const auto u = rng.uniform();
        kg.split(u < 0.8 ? Split::train : u < 0.9 ? Split::valid : Split::test).push_back(all[i]);
    }
    if (kg.split(Split::test).empty()) {
        kg.split(Split::test).push_back(kg.split(Split::train).back());
        kg.split(Split::train).pop_back();
    }
    return kg;
}

inline EncoderConfig tiny_config(int vocab, int max_len = 24) {
    EncoderConfig c;
    c.vocab_size = vocab;
    c.hidden = 8;
    c.layers = 2;
    c.heads = 2;
    c.ff = 12;
    c.max_len = max_len;
    c.dropout = 0.0;
    return c;
}

}  // namespace lpbert::testing
