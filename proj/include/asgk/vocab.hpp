#pragma once

#include <cctype>
#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "asgk/errors.hpp"

namespace asgk {

constexpr std::size_t kPadId = 0;
constexpr std::size_t kBosId = 1;
constexpr std::size_t kEosId = 2;
constexpr std::size_t kUnkId = 3;

// Lowercase; alphanumeric runs are tokens, every other printable character is
// a single-character token. Whitespace separates.
inline std::vector<std::string> tokenize(const std::string& text) {
    std::vector<std::string> out;
    std::string cur;
    for (unsigned char ch : text) {
        if (std::isalnum(ch)) {
            cur.push_back(static_cast<char>(std::tolower(ch)));
            continue;
        }
        if (!cur.empty()) {
            out.push_back(cur);
            cur.clear();
        }
        if (!std::isspace(ch)) out.emplace_back(1, static_cast<char>(ch));
    }
    if (!cur.empty()) out.push_back(cur);
    return out;
}

// Space-joined, except no space before single-character punctuation.
inline std::string detokenize(const std::vector<std::string>& tokens) {
    std::string out;
    for (const std::string& t : tokens) {
        const bool punct = t.size() == 1 && !std::isalnum(static_cast<unsigned char>(t[0]));
        if (!out.empty() && !punct) out.push_back(' ');
        out += t;
    }
    return out;
}

class Vocabulary {
public:
    Vocabulary() { id_to_token_ = {"<pad>", "<bos>", "<eos>", "<unk>"}; rebuild_index(); }

    // Tokens meeting min_freq enter in order of first appearance.
    static Vocabulary build(const std::vector<std::string>& lines, std::size_t min_freq = 3) {
        Vocabulary v;
        std::unordered_map<std::string, std::size_t> freq;
        std::vector<std::string> order;
        for (const std::string& line : lines)
            for (const std::string& tok : tokenize(line)) {
                if (++freq[tok] == 1) order.push_back(tok);
            }
        for (const std::string& tok : order)
            if (freq[tok] >= min_freq) v.add(tok);
        return v;
    }

    static Vocabulary from_tokens(const std::vector<std::string>& id_to_token) {
        if (id_to_token.size() < 4 || id_to_token[0] != "<pad>" || id_to_token[1] != "<bos>" ||
            id_to_token[2] != "<eos>" || id_to_token[3] != "<unk>")
            throw DataError("vocabulary table missing reserved entries");
        Vocabulary v;
        v.id_to_token_ = id_to_token;
        v.rebuild_index();
        return v;
    }

    std::size_t add(const std::string& tok) {
        auto it = token_to_id_.find(tok);
        if (it != token_to_id_.end()) return it->second;
        id_to_token_.push_back(tok);
        token_to_id_[tok] = id_to_token_.size() - 1;
        return id_to_token_.size() - 1;
    }

    std::size_t id(const std::string& tok) const {
        auto it = token_to_id_.find(tok);
        return it == token_to_id_.end() ? kUnkId : it->second;
    }

    bool contains(const std::string& tok) const { return token_to_id_.count(tok) != 0; }
    const std::string& token(std::size_t id) const {
        if (id >= id_to_token_.size()) throw IndexError("token id out of range");
        return id_to_token_[id];
    }
    std::size_t size() const { return id_to_token_.size(); }
    const std::vector<std::string>& tokens() const { return id_to_token_; }

    // BOS ... EOS, truncated to max_len ids total (EOS always present).
    std::vector<std::size_t> encode(const std::string& text, std::size_t max_len) const {
        std::vector<std::size_t> ids{kBosId};
        for (const std::string& tok : tokenize(text)) {
            if (ids.size() + 1 >= max_len) break;
            ids.push_back(id(tok));
        }
        ids.push_back(kEosId);
        return ids;
    }

    std::string decode(const std::vector<std::size_t>& ids) const {
        std::vector<std::string> toks;
        for (std::size_t i : ids) {
            if (i == kBosId || i == kPadId) continue;
            if (i == kEosId) break;
            toks.push_back(token(i));
        }
        return detokenize(toks);
    }

private:
    void rebuild_index() {
        token_to_id_.clear();
        for (std::size_t i = 0; i < id_to_token_.size(); ++i) token_to_id_[id_to_token_[i]] = i;
    }

    std::vector<std::string> id_to_token_;
    std::unordered_map<std::string, std::size_t> token_to_id_;
};

} // namespace asgk
