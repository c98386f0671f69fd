#pragma once

// Word-level vocabulary, tokenizer and model-input sequence assembly.

#include <algorithm>
#include <array>
#include <cctype>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "lpbert/common.hpp"
#include "lpbert/kg.hpp"

namespace lpbert {

using TokenId = std::int32_t;

inline constexpr TokenId kPad = 0;
inline constexpr TokenId kUnk = 1;
inline constexpr TokenId kCls = 2;
inline constexpr TokenId kSep = 3;
inline constexpr TokenId kMask = 4;
inline constexpr TokenId kFirstWord = 5;
inline constexpr std::array<std::string_view, 5> kReservedTokens{"[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"};

/// Lowercases and splits on whitespace and ASCII punctuation. Punctuation
/// is a delimiter only; it never becomes a token.
inline std::vector<std::string> split_words(std::string_view text) {
    std::vector<std::string> words;
    std::string cur;
    for (char ch : text) {
        const auto c = static_cast<unsigned char>(ch);
        if (std::isspace(c) || (c < 0x80 && std::ispunct(c))) {
            if (!cur.empty()) words.push_back(std::move(cur));
            cur.clear();
        } else {
            cur.push_back(c < 0x80 ? static_cast<char>(std::tolower(c)) : ch);
        }
    }
    if (!cur.empty()) words.push_back(std::move(cur));
    return words;
}

class Vocabulary {
public:
    Vocabulary() {
        for (auto t : kReservedTokens) push(std::string(t));
    }

    /// Appends a corpus token; returns its id.
    TokenId add(const std::string& token) {
        if (auto it = index_.find(token); it != index_.end()) return it->second;
        return push(token);
    }

    TokenId id(std::string_view token) const {
        auto it = index_.find(std::string(token));
        return it == index_.end() ? kUnk : it->second;
    }

    const std::string& token(TokenId id) const { return tokens_.at(static_cast<std::size_t>(id)); }
    std::size_t size() const noexcept { return tokens_.size(); }
    const std::vector<std::string>& tokens() const noexcept { return tokens_; }

    void save(const std::filesystem::path& path) const {
        std::ofstream out(path, std::ios::binary);
        for (const auto& t : tokens_) out << t << '\n';
        if (!out) throw Error(ErrorKind::runtime, "failed writing vocabulary " + path.string());
    }

    static Vocabulary load(const std::filesystem::path& path) {
        std::ifstream in(path, std::ios::binary);
        if (!in) throw Error(ErrorKind::load, "missing vocabulary file: " + path.string());
        Vocabulary v;
        std::string line;
        std::size_t line_no = 0;
        while (std::getline(in, line)) {
            if (!line.empty() && line.back() == '\r') line.pop_back();
            if (line_no < kReservedTokens.size()) {
                if (line != kReservedTokens[line_no])
                    throw Error(ErrorKind::parse, path.string() + ":" + std::to_string(line_no + 1) + ": expected reserved token " +
                                                      std::string(kReservedTokens[line_no]));
            } else if (v.index_.contains(line)) {
                throw Error(ErrorKind::parse, path.string() + ":" + std::to_string(line_no + 1) + ": duplicate token '" + line + "'");
            } else {
                v.push(line);
            }
            ++line_no;
        }
        if (line_no < kReservedTokens.size()) throw Error(ErrorKind::parse, path.string() + ": truncated vocabulary");
        return v;
    }

private:
    TokenId push(std::string token) {
        const auto id = static_cast<TokenId>(tokens_.size());
        index_.emplace(token, id);
        tokens_.push_back(std::move(token));
        return id;
    }

    std::vector<std::string> tokens_;
    std::unordered_map<std::string, TokenId> index_;
};

/// Vocabulary over entity names, descriptions and relation texts, ordered by
/// frequency (descending) then lexicographically.
inline Vocabulary build_vocab(const KnowledgeGraph& kg, int min_freq) {
    if (min_freq < 1) throw Error(ErrorKind::usage, "min_freq must be >= 1");
    std::unordered_map<std::string, std::size_t> counts;
    auto count = [&](std::string_view text) {
        for (auto& w : split_words(text)) ++counts[std::move(w)];
    };
    for (const auto& e : kg.entities) {
        count(e.name);
        count(e.description);
    }
    for (const auto& r : kg.relations) count(r.text);

    std::vector<std::pair<std::string, std::size_t>> entries;
    for (auto& [w, c] : counts)
        if (c >= static_cast<std::size_t>(min_freq)) entries.emplace_back(w, c);
    std::sort(entries.begin(), entries.end(), [](const auto& a, const auto& b) {
        return a.second != b.second ? a.second > b.second : a.first < b.first;
    });
    Vocabulary vocab;
    for (const auto& [w, c] : entries) vocab.add(w);
    return vocab;
}

inline std::vector<TokenId> tokenize(std::string_view text, const Vocabulary& vocab) {
    std::vector<TokenId> ids;
    for (const auto& w : split_words(text)) ids.push_back(vocab.id(w));
    return ids;
}

enum class Region : std::uint8_t { cls, head, head_desc, sep1, relation, sep2, tail, tail_desc, sep3 };
inline constexpr std::size_t kRegionCount = 9;

struct Span {
    std::size_t begin = 0;
    std::size_t end = 0;
    std::size_t size() const noexcept { return end - begin; }
    bool empty() const noexcept { return begin == end; }
    bool contains(std::size_t i) const noexcept { return i >= begin && i < end; }
};

/// A padded model input with the position span of every region. Regions a
/// layout does not use are empty spans.
struct SequenceLayout {
    std::vector<TokenId> tokens;
    std::vector<std::uint8_t> attention_mask;
    std::array<Span, kRegionCount> spans{};
    std::size_t length = 0;  // non-PAD prefix

    const Span& span(Region r) const { return spans[static_cast<std::size_t>(r)]; }
    std::span<const TokenId> region_tokens(Region r) const {
        const auto& s = span(r);
        return std::span<const TokenId>(tokens).subspan(s.begin, s.size());
    }
};

struct TextPieces {
    std::vector<TokenId> head, head_desc, relation, tail, tail_desc;
};

namespace detail {

/// Cuts `overflow` tokens from a and b proportionally to their lengths.
inline void shrink_pair(std::size_t& a, std::size_t& b, std::size_t overflow) {
    const std::size_t total = a + b;
    if (total == 0 || overflow == 0) return;
    const std::size_t keep = total > overflow ? total - overflow : 0;
    const std::size_t keep_a = keep * a / total;
    const std::size_t keep_b = keep - keep_a;
    a = keep_a;
    b = std::min(b, keep_b);
    if (a + b < keep) a = keep - b;
}

}  // namespace detail

/// Lays out CLS, the present pieces and separators; descriptions are
/// truncated first (proportionally), then entities. The relation and the
/// separators are only cut if nothing else is left to cut.
inline SequenceLayout assemble(TextPieces p, bool with_pair, bool with_tail, std::size_t max_len) {
    if (max_len < 4) throw Error(ErrorKind::usage, "max_len too small");
    // Separators: CLS + one SEP after each of (head part, relation, tail part).
    const std::size_t seps = 1 + (with_pair ? 2 : 0) + (with_tail ? 1 : 0);
    if (!with_pair) p.head.clear(), p.head_desc.clear(), p.relation.clear();
    if (!with_tail) p.tail.clear(), p.tail_desc.clear();

    std::size_t rel = p.relation.size();
    if (rel + seps > max_len) rel = max_len - seps;
    const std::size_t avail = max_len - seps - rel;
    std::size_t eh = p.head.size(), dh = p.head_desc.size(), et = p.tail.size(), dt = p.tail_desc.size();
    const std::size_t total = eh + dh + et + dt;
    if (total > avail) {
        std::size_t overflow = total - avail;
        const std::size_t desc_cut = std::min(overflow, dh + dt);
        detail::shrink_pair(dh, dt, desc_cut);
        overflow -= desc_cut;
        detail::shrink_pair(eh, et, overflow);
    }

    SequenceLayout out;
    out.tokens.reserve(max_len);
    auto put = [&](Region r, std::span<const TokenId> src, std::size_t n) {
        auto& s = out.spans[static_cast<std::size_t>(r)];
        s.begin = out.tokens.size();
        out.tokens.insert(out.tokens.end(), src.begin(), src.begin() + static_cast<std::ptrdiff_t>(n));
        s.end = out.tokens.size();
    };
    const TokenId cls = kCls, sep = kSep;
    put(Region::cls, std::span(&cls, 1), 1);
    put(Region::head, p.head, eh);
    put(Region::head_desc, p.head_desc, dh);
    put(Region::sep1, std::span(&sep, 1), with_pair ? 1 : 0);
    put(Region::relation, p.relation, rel);
    put(Region::sep2, std::span(&sep, 1), with_pair ? 1 : 0);
    put(Region::tail, p.tail, et);
    put(Region::tail_desc, p.tail_desc, dt);
    put(Region::sep3, std::span(&sep, 1), with_tail ? 1 : 0);
    out.length = out.tokens.size();
    out.tokens.resize(max_len, kPad);
    out.attention_mask.assign(max_len, 0);
    std::fill_n(out.attention_mask.begin(), out.length, std::uint8_t{1});
    return out;
}

/// Tokenized texts of a graph, computed once.
class TextCache {
public:
    TextCache(const KnowledgeGraph& kg, const Vocabulary& vocab) {
        names_.reserve(kg.entity_count());
        descs_.reserve(kg.entity_count());
        for (const auto& e : kg.entities) {
            names_.push_back(tokenize(e.name, vocab));
            descs_.push_back(tokenize(e.description, vocab));
        }
        for (const auto& r : kg.relations) relations_.push_back(tokenize(r.text, vocab));
    }

    const std::vector<TokenId>& name(EntityId e) const { return names_.at(index_of(e)); }
    const std::vector<TokenId>& description(EntityId e) const { return descs_.at(index_of(e)); }
    const std::vector<TokenId>& relation(RelationId r) const { return relations_.at(index_of(r)); }

    SequenceLayout triple(const Triple& t, std::size_t max_len) const {
        return assemble({name(t.head), description(t.head), relation(t.relation), name(t.tail), description(t.tail)}, true, true,
                        max_len);
    }
    SequenceLayout pair(EntityId h, RelationId r, std::size_t max_len) const {
        return assemble({name(h), description(h), relation(r), {}, {}}, true, false, max_len);
    }
    SequenceLayout entity(EntityId t, std::size_t max_len) const {
        return assemble({{}, {}, {}, name(t), description(t)}, false, true, max_len);
    }

private:
    std::vector<std::vector<TokenId>> names_, descs_, relations_;
};

inline SequenceLayout assemble_triple_sequence(const Triple& t, const KnowledgeGraph& kg, const Vocabulary& vocab, std::size_t max_len) {
    if (max_len < 16) throw Error(ErrorKind::usage, "max_len must be >= 16");
    const auto& h = kg.entities.at(index_of(t.head));
    const auto& tl = kg.entities.at(index_of(t.tail));
    return assemble({tokenize(h.name, vocab), tokenize(h.description, vocab), tokenize(kg.relations.at(index_of(t.relation)).text, vocab),
                     tokenize(tl.name, vocab), tokenize(tl.description, vocab)},
                    true, true, max_len);
}

inline SequenceLayout assemble_pair(EntityId h, RelationId r, const KnowledgeGraph& kg, const Vocabulary& vocab, std::size_t max_len) {
    const auto& e = kg.entities.at(index_of(h));
    return assemble({tokenize(e.name, vocab), tokenize(e.description, vocab), tokenize(kg.relations.at(index_of(r)).text, vocab), {}, {}},
                    true, false, max_len);
}

/// Pair layout for a head given as free text (an entity outside the catalog).
inline SequenceLayout assemble_text_pair(std::string_view head_text, RelationId r, const KnowledgeGraph& kg, const Vocabulary& vocab,
                                         std::size_t max_len) {
    return assemble({tokenize(head_text, vocab), {}, tokenize(kg.relations.at(index_of(r)).text, vocab), {}, {}}, true, false, max_len);
}

inline SequenceLayout assemble_entity(EntityId t, const KnowledgeGraph& kg, const Vocabulary& vocab, std::size_t max_len) {
    const auto& e = kg.entities.at(index_of(t));
    return assemble({{}, {}, {}, tokenize(e.name, vocab), tokenize(e.description, vocab)}, false, true, max_len);
}

}  // namespace lpbert
