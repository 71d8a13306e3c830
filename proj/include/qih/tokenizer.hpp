#pragma once

#include <cctype>
#include <cstdint>
#include <fstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "qih/tensor.hpp"

namespace qih {

class VocabError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

inline constexpr std::string_view kClsToken = "[CLS]";
inline constexpr std::string_view kPadToken = "[PAD]";
inline constexpr std::string_view kUnkToken = "[UNK]";
inline constexpr std::string_view kContinuationPrefix = "##";

class Vocab {
public:
    Vocab() = default;

    // Line/position number is the id.
    static Vocab from_tokens(std::vector<std::string> tokens) {
        Vocab v;
        v.tokens_ = std::move(tokens);
        for (std::size_t i = 0; i < v.tokens_.size(); ++i) {
            const auto& t = v.tokens_[i];
            if (t.empty()) throw VocabError("vocab: empty token at id " + std::to_string(i));
            if (!v.ids_.emplace(t, static_cast<std::int32_t>(i)).second)
                throw VocabError("vocab: duplicate token '" + t + "' at id " + std::to_string(i));
        }
        v.cls_ = v.require(kClsToken);
        v.pad_ = v.require(kPadToken);
        v.unk_ = v.require(kUnkToken);
        return v;
    }

    std::size_t size() const { return tokens_.size(); }
    std::int32_t cls_id() const { return cls_; }
    std::int32_t pad_id() const { return pad_; }
    std::int32_t unk_id() const { return unk_; }

    std::int32_t find(const std::string& token) const {
        auto it = ids_.find(token);
        return it == ids_.end() ? -1 : it->second;
    }
    bool contains(const std::string& token) const { return ids_.count(token) != 0; }
    const std::string& token(std::int32_t id) const { return tokens_.at(static_cast<std::size_t>(id)); }
    const std::vector<std::string>& tokens() const { return tokens_; }

private:
    std::int32_t require(std::string_view special) const {
        auto it = ids_.find(std::string(special));
        if (it == ids_.end()) throw VocabError("vocab: missing special token " + std::string(special));
        return it->second;
    }

    std::vector<std::string> tokens_;
    std::unordered_map<std::string, std::int32_t> ids_;
    std::int32_t cls_ = -1, pad_ = -1, unk_ = -1;
};

inline Vocab load_vocab(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw VocabError("vocab: cannot open '" + path + "'");
    std::vector<std::string> tokens;
    std::string line;
    while (std::getline(f, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        tokens.push_back(line);
    }
    return Vocab::from_tokens(std::move(tokens));
}

struct TokenSequence {
    std::vector<std::int32_t> ids;
    std::vector<std::uint8_t> attention_mask;

    std::size_t length() const { return ids.size(); }
    bool operator==(const TokenSequence&) const = default;
};

// ASCII lowercase, whitespace runs collapsed to one space, ends trimmed.
// Non-ASCII bytes pass through unchanged.
inline std::string normalize(std::string_view query) {
    std::string out;
    out.reserve(query.size());
    bool pending_space = false;
    for (char c : query) {
        const auto uc = static_cast<unsigned char>(c);
        if (uc < 0x80 && std::isspace(uc)) {
            pending_space = !out.empty();
            continue;
        }
        if (pending_space) {
            out.push_back(' ');
            pending_space = false;
        }
        out.push_back(uc < 0x80 ? static_cast<char>(std::tolower(uc)) : c);
    }
    return out;
}

inline std::vector<std::string> split_words(std::string_view normalized) {
    std::vector<std::string> words;
    std::size_t pos = 0;
    while (pos < normalized.size()) {
        auto end = normalized.find(' ', pos);
        if (end == std::string_view::npos) end = normalized.size();
        if (end > pos) words.emplace_back(normalized.substr(pos, end - pos));
        pos = end + 1;
    }
    return words;
}

// Greedy longest-match-first split of one word. Any unmatched remainder turns
// the whole word into a single UNK.
inline std::vector<std::int32_t> wordpiece(const std::string& word, const Vocab& vocab) {
    std::vector<std::int32_t> pieces;
    std::size_t start = 0;
    while (start < word.size()) {
        std::int32_t found = -1;
        std::size_t end = word.size();
        for (; end > start; --end) {
            std::string candidate = word.substr(start, end - start);
            if (start > 0) candidate.insert(0, kContinuationPrefix);
            found = vocab.find(candidate);
            if (found >= 0) break;
        }
        if (found < 0) return {vocab.unk_id()};
        pieces.push_back(found);
        start = end;
    }
    return pieces;
}

inline TokenSequence tokenize(std::string_view query, const Vocab& vocab, int max_pieces = 12) {
    if (max_pieces < 1) throw ConfigError("tokenize: max_pieces must be at least 1");
    const auto limit = static_cast<std::size_t>(max_pieces);
    TokenSequence seq;
    seq.ids.reserve(limit + 1);
    seq.ids.push_back(vocab.cls_id());
    for (const auto& word : split_words(normalize(query))) {
        for (auto id : wordpiece(word, vocab)) {
            if (seq.ids.size() > limit) break;
            seq.ids.push_back(id);
        }
        if (seq.ids.size() > limit) break;
    }
    seq.attention_mask.assign(seq.ids.size(), 1);
    seq.ids.resize(limit + 1, vocab.pad_id());
    seq.attention_mask.resize(limit + 1, 0);
    return seq;
}

} // namespace qih
