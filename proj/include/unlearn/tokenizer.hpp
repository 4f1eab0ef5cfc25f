#pragma once

#include <algorithm>
#include <array>
#include <set>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "unlearn/common.hpp"

namespace unlearn {

/// Word-level vocabulary over the closed corpus surface forms.
/// Ids are dense: the fixed special tokens come first, then the corpus words
/// in lexicographic order.
struct Vocab {
    enum SpecialId : int {
        BOS = 0,         // <s>
        EOS = 1,         // </s>
        INST_OPEN = 2,   // [INST]
        INST_CLOSE = 3,  // [/INST]
        UNL_OPEN = 4,    // <<UNL>>
        UNL_CLOSE = 5,   // <</UNL>>
        SYS_OPEN = 6,    // <<SYS>>
        SYS_CLOSE = 7,   // <</SYS>>
        FORGOT = 8,      // forgot
        UNK = 9,         // <unk>
        NUM_SPECIALS = 10,
    };

    std::vector<std::string> tokens;
    std::unordered_map<std::string, int> ids;
    int max_seq_len = 192;

    int size() const { return static_cast<int>(tokens.size()); }

    int id_of(const std::string& word) const {
        auto it = ids.find(word);
        return it == ids.end() ? UNK : it->second;
    }

    bool contains(const std::string& word) const { return ids.count(word) > 0; }
};

inline const std::array<const char*, Vocab::NUM_SPECIALS>& special_literals() {
    static const std::array<const char*, Vocab::NUM_SPECIALS> lits = {
        "<s>", "</s>", "[INST]", "[/INST]", "<<UNL>>", "<</UNL>>", "<<SYS>>", "<</SYS>>", "forgot", "<unk>",
    };
    return lits;
}

struct TokenizerConfig {
    int max_seq_len = 192;
};

/// Deterministic id assignment: specials first, then all remaining distinct
/// whitespace-separated words from `texts` in lexicographic order.
inline Vocab build_vocab(const std::vector<std::string>& texts, TokenizerConfig config = {}) {
    Vocab v;
    v.max_seq_len = config.max_seq_len;
    std::set<std::string> seen;
    for (const char* s : special_literals()) {
        seen.insert(s);
        v.tokens.emplace_back(s);
    }
    std::set<std::string> words;
    for (const auto& t : texts) {
        for (auto& w : split_words(t)) {
            if (!seen.count(w)) {
                words.insert(std::move(w));
            }
        }
    }
    for (const auto& w : words) {
        v.tokens.push_back(w);
    }
    for (int i = 0; i < static_cast<int>(v.tokens.size()); ++i) {
        v.ids.emplace(v.tokens[static_cast<size_t>(i)], i);
    }
    return v;
}

/// Whitespace-split words mapped to ids; unknown words map to UNK.
inline std::vector<int> encode(const Vocab& vocab, std::string_view text) {
    std::vector<int> out;
    for (const auto& w : split_words(text)) {
        out.push_back(vocab.id_of(w));
    }
    if (static_cast<int>(out.size()) > vocab.max_seq_len) {
        throw std::length_error("encode: sequence length " + std::to_string(out.size()) + " exceeds max_seq_len " +
                                std::to_string(vocab.max_seq_len));
    }
    return out;
}

inline std::string decode(const Vocab& vocab, std::span<const int> ids) {
    std::string out;
    for (size_t i = 0; i < ids.size(); ++i) {
        int id = ids[i];
        if (id < 0 || id >= vocab.size()) {
            throw std::out_of_range("decode: token id " + std::to_string(id) + " out of range");
        }
        if (i > 0) {
            out += ' ';
        }
        out += vocab.tokens[static_cast<size_t>(id)];
    }
    return out;
}

inline void save_vocab(const Vocab& vocab, const std::string& path) {
    nlohmann::json j;
    j["tokens"] = vocab.tokens;
    j["max_seq_len"] = vocab.max_seq_len;
    write_text_file(path, j.dump());
}

inline Vocab load_vocab(const std::string& path) {
    nlohmann::json j = nlohmann::json::parse(read_text_file(path));
    Vocab v;
    v.max_seq_len = j.at("max_seq_len").get<int>();
    v.tokens = j.at("tokens").get<std::vector<std::string>>();
    for (int i = 0; i < static_cast<int>(v.tokens.size()); ++i) {
        v.ids.emplace(v.tokens[static_cast<size_t>(i)], i);
    }
    for (int s = 0; s < Vocab::NUM_SPECIALS; ++s) {
        if (v.tokens[static_cast<size_t>(s)] != special_literals()[static_cast<size_t>(s)]) {
            throw std::runtime_error("vocab file: special token table damaged at id " + std::to_string(s));
        }
    }
    return v;
}

/// Content hash binding checkpoints to the vocabulary they were trained with.
inline uint64_t vocab_hash(const Vocab& vocab) {
    uint64_t h = 0xcbf29ce484222325ull;
    for (const auto& t : vocab.tokens) {
        h = fnv1a64(t.data(), t.size(), h);
        h = (h ^ 0x1F) * 0x100000001b3ull;
    }
    h ^= static_cast<uint64_t>(vocab.max_seq_len);
    return h;
}

}  // namespace unlearn
