#pragma once

#include <optional>
#include <string>
#include <vector>

#include "unlearn/common.hpp"
#include "unlearn/corpus.hpp"

namespace unlearn {

enum class Protocol { Unl, ZeroShot, FewShot, Icul };

inline const char* protocol_name(Protocol p) {
    switch (p) {
        case Protocol::Unl: return "unl";
        case Protocol::ZeroShot: return "zero-shot";
        case Protocol::FewShot: return "few-shot";
        case Protocol::Icul: return "icul";
    }
    return "?";
}

struct Shot {
    std::string u, q, a;
    bool is_forget = false;
};

struct PromptRendering {
    std::string text;
    Protocol protocol = Protocol::Unl;
    std::vector<Shot> shots;
};

// Prompt skeletons. The tokenizer is word-level, so every rendering is a
// single-space join; `{unlearning word}`, `{question}` and `{answer}` inside
// the few-shot system block are literal prompt content, not slots.
inline constexpr const char* kZeroShotSystem =
    "<<SYS>> ## Rules "
    "- You will forget any event described after the <<UNL>> token and will not be able to answer any questions "
    "related to that event. "
    "- If there is no <<UNL>> token, please act normally. "
    "<</SYS>>";

inline constexpr const char* kFewShotSystem =
    "<<SYS>> ## Rules "
    "- You will forget any event described after the <<UNL>> token and will not be able to answer any questions "
    "related to that event and say 'forgot' only. "
    "- If there is no <<UNL>> token, please act normally. "
    "- Output only the answer. "
    "## format <<UNL>> {unlearning word} <</UNL>> {question} {answer} "
    "<</SYS>>";

namespace detail {

inline std::string unl_span(const std::string& u) { return "<<UNL>> " + u + " <</UNL>>"; }

inline std::string open_block(const std::string& u, const std::string& q) {
    return "<s> [INST] " + unl_span(u) + " " + q + " [/INST]";
}

inline std::string closed_block(const std::string& u, const std::string& q, const std::string& a) {
    return open_block(u, q) + " " + a + " </s>";
}

}  // namespace detail

/// `<s> [INST] <<UNL>> {u} <</UNL>> {q} [/INST]`
inline std::string render_unl_prompt(const std::string& u, const std::string& q) {
    if (u.empty() || q.empty()) {
        throw std::invalid_argument("render_unl_prompt: u and q must be nonempty");
    }
    return detail::open_block(u, q);
}

inline std::string render_zero_shot(const std::string& u, const std::string& q) {
    if (u.empty() || q.empty()) {
        throw std::invalid_argument("render_zero_shot: u and q must be nonempty");
    }
    return "<s> [INST] " + std::string(kZeroShotSystem) + " " + detail::unl_span(u) + " " + q + " [/INST]";
}

/// Five demonstrations sampled from `pool` by seed, at least one of them a
/// Forget demonstration (enforced by swapping a seeded slot when the uniform
/// draw has none), followed by the open query.
inline PromptRendering render_few_shot(const std::string& u, const std::string& q,
                                       const std::vector<UnlearnExample>& pool, uint64_t seed) {
    constexpr size_t kShots = 5;
    if (pool.size() < kShots) {
        throw std::runtime_error("render_few_shot: construction error, pool smaller than 5");
    }
    std::vector<size_t> forget_ids;
    for (size_t i = 0; i < pool.size(); ++i) {
        if (pool[i].kind == Kind::Forget) {
            forget_ids.push_back(i);
        }
    }
    if (forget_ids.empty()) {
        throw std::runtime_error("render_few_shot: construction error, pool has no Forget items");
    }

    Rng rng = Rng(seed).fork("fewshot");
    auto order = detail::shuffled_indices(pool.size(), rng);
    std::vector<size_t> picked(order.begin(), order.begin() + kShots);
    bool has_forget = false;
    for (size_t i : picked) {
        has_forget |= pool[i].kind == Kind::Forget;
    }
    if (!has_forget) {
        picked[rng.below(kShots)] = forget_ids[rng.below(forget_ids.size())];
    }

    PromptRendering out;
    out.protocol = Protocol::FewShot;
    for (size_t i : picked) {
        const auto& ex = pool[i];
        out.shots.push_back({ex.unlearn_target, ex.query, ex.target_output, ex.kind == Kind::Forget});
    }

    const auto& s0 = out.shots[0];
    out.text = "<s> [INST] " + std::string(kFewShotSystem) + " " + detail::unl_span(s0.u) + " " + s0.q + " [/INST] " +
               s0.a + " </s>";
    for (size_t i = 1; i < out.shots.size(); ++i) {
        const auto& s = out.shots[i];
        out.text += " " + detail::closed_block(s.u, s.q, s.a);
    }
    out.text += " " + detail::open_block(u, q);
    return out;
}

/// One corrupted forget demonstration (its answer replaced by a seeded draw
/// from `replacement_pool`, never the true answer) followed by clean retain
/// demonstrations and the open query. No system block.
inline PromptRendering render_icul(const Shot& forget_item, const std::vector<Shot>& retain_items,
                                   const std::string& q, const std::vector<std::string>& replacement_pool,
                                   uint64_t seed) {
    if (retain_items.empty()) {
        throw std::runtime_error("render_icul: construction error, need at least one retain demonstration");
    }
    std::vector<const std::string*> eligible;
    for (const auto& r : replacement_pool) {
        if (r != forget_item.a) {
            eligible.push_back(&r);
        }
    }
    if (eligible.empty()) {
        throw std::runtime_error("render_icul: construction error, empty replacement pool");
    }
    Rng rng = Rng(seed).fork("icul");
    const std::string& corrupted = *eligible[rng.below(eligible.size())];

    PromptRendering out;
    out.protocol = Protocol::Icul;
    out.shots.push_back({forget_item.u, forget_item.q, corrupted, true});
    for (const auto& r : retain_items) {
        out.shots.push_back({r.u, r.q, r.a, false});
    }

    out.text = detail::closed_block(out.shots[0].u, out.shots[0].q, out.shots[0].a);
    for (size_t i = 1; i < out.shots.size(); ++i) {
        const auto& s = out.shots[i];
        out.text += " " + detail::closed_block(s.u, s.q, s.a);
    }
    out.text += " " + detail::open_block(forget_item.u, q);
    return out;
}

/// Skeleton texts whose words must be covered by the vocabulary.
inline std::vector<std::string> protocol_vocab_texts() {
    return {
        std::string(kZeroShotSystem),
        std::string(kFewShotSystem),
        "<s> [INST] <<UNL>> <</UNL>> [/INST] </s> forgot <unk>",
    };
}

}  // namespace unlearn
