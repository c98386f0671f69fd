#pragma once

// Run manifests: config snapshot, content hashes of inputs and outputs, and
// metric outcomes. Hashes are git blob ids (SHA-1 over "blob <size>\0" +
// content), so `git hash-object <file>` reproduces them.

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <memory>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>
#include <openssl/evp.h>

#include "lpbert/common.hpp"

namespace lpbert {

inline std::string git_blob_hash(std::string_view content) {
    std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(), &EVP_MD_CTX_free);
    if (!ctx || EVP_DigestInit_ex(ctx.get(), EVP_sha1(), nullptr) != 1) throw Error(ErrorKind::runtime, "SHA-1 unavailable");
    const std::string header = "blob " + std::to_string(content.size());
    EVP_DigestUpdate(ctx.get(), header.data(), header.size() + 1);  // includes the NUL
    EVP_DigestUpdate(ctx.get(), content.data(), content.size());
    std::array<unsigned char, EVP_MAX_MD_SIZE> md{};
    unsigned int len = 0;
    EVP_DigestFinal_ex(ctx.get(), md.data(), &len);
    std::string hex;
    hex.reserve(2 * len);
    for (unsigned i = 0; i < len; ++i) {
        char buf[3];
        std::snprintf(buf, sizeof buf, "%02x", md[i]);
        hex += buf;
    }
    return hex;
}

inline std::string read_file_bytes(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(ErrorKind::load, "cannot read " + path.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline std::string git_blob_hash_file(const std::filesystem::path& path) { return git_blob_hash(read_file_bytes(path)); }

/// Writes `text` atomically (temp file + rename).
inline void write_text_atomic(const std::filesystem::path& path, std::string_view text) {
    const auto tmp = std::filesystem::path(path.string() + ".tmp");
    {
        std::ofstream out(tmp, std::ios::binary);
        out.write(text.data(), static_cast<std::streamsize>(text.size()));
        if (!out) throw Error(ErrorKind::runtime, "failed writing " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

class Manifest {
public:
    explicit Manifest(std::string command) { doc_ = {{"command", std::move(command)}, {"inputs", nlohmann::json::object()},
                                                      {"outputs", nlohmann::json::object()}, {"metrics", nlohmann::json::object()}}; }

    void set_config(nlohmann::json config) { doc_["config"] = std::move(config); }
    void add_input(const std::filesystem::path& path) { doc_["inputs"][path.string()] = git_blob_hash_file(path); }
    void add_output(const std::filesystem::path& path) { doc_["outputs"][path.string()] = git_blob_hash_file(path); }
    void set_metric(const std::string& key, nlohmann::json value) { doc_["metrics"][key] = std::move(value); }
    const nlohmann::json& json() const noexcept { return doc_; }

    void write(const std::filesystem::path& path) const { write_text_atomic(path, doc_.dump(2) + "\n"); }

private:
    nlohmann::json doc_;
};

}  // namespace lpbert
