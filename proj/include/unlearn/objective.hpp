#pragma once

#include <span>
#include <string>
#include <thread>
#include <vector>

#include "unlearn/corpus.hpp"
#include "unlearn/model.hpp"
#include "unlearn/prompts.hpp"
#include "unlearn/tokenizer.hpp"

namespace unlearn {

enum class Objective { Ours, GA };

/// One teacher-forced sequence: `tokens` is the full input, and the logits at
/// `target_pos[i]` are supervised toward `target_tok[i]`. `sign` is +1 for
/// descent and -1 for the ascent half of the gradient-ascent baseline.
struct TrainingItem {
    std::vector<int> tokens;
    std::vector<int> target_pos;
    std::vector<int> target_tok;
    double sign = 1.0;
    bool is_forget = false;
};

inline TrainingItem render_training_item(const Vocab& vocab, const UnlearnExample& ex, Objective objective) {
    TrainingItem item;
    item.is_forget = ex.kind == Kind::Forget;
    item.tokens = encode(vocab, render_unl_prompt(ex.unlearn_target, ex.query));
    const int prompt_len = static_cast<int>(item.tokens.size());

    if (objective == Objective::Ours && ex.kind == Kind::Forget) {
        // Supervise only the forget marker at the first response position.
        item.target_pos = {prompt_len - 1};
        item.target_tok = {Vocab::FORGOT};
        return item;
    }

    // Retain-style supervision: answer tokens plus EOS. The gradient-ascent
    // baseline supervises the true answer on both kinds, ascending on forget
    // items.
    const std::string& answer = objective == Objective::GA ? ex.gold_answer : ex.target_output;
    std::vector<int> ans = encode(vocab, answer);
    if (ans.empty()) {
        throw std::invalid_argument("render_training_item: empty supervised answer");
    }
    for (size_t i = 0; i < ans.size(); ++i) {
        item.target_pos.push_back(prompt_len - 1 + static_cast<int>(i));
        item.target_tok.push_back(ans[i]);
        item.tokens.push_back(ans[i]);
    }
    item.target_pos.push_back(prompt_len + static_cast<int>(ans.size()) - 1);
    item.target_tok.push_back(Vocab::EOS);

    if (static_cast<int>(item.tokens.size()) > vocab.max_seq_len) {
        throw std::length_error("render_training_item: sequence exceeds max_seq_len");
    }
    if (objective == Objective::GA && ex.kind == Kind::Forget) {
        item.sign = -1.0;
    }
    return item;
}

inline bool item_has_unk(const TrainingItem& item) {
    for (int t : item.tokens) {
        if (t == Vocab::UNK) {
            return true;
        }
    }
    return false;
}

/// Sum over supervised positions of -log p(target); no sign applied.
inline double item_nll(const Parameters& params, const TrainingItem& item) {
    auto out = forward_at(params, item.tokens, item.target_pos, nullptr, false);
    const int V = params.config.vocab_size;
    double nll = 0.0;
    for (size_t r = 0; r < item.target_pos.size(); ++r) {
        const double* row = out.logits.data() + r * static_cast<size_t>(V);
        double lse = nn::log_sum_exp(row, V);
        nll += lse - row[item.target_tok[r]];
    }
    return nll;
}

struct LossBreakdown {
    double l_forget = 0.0;
    double l_retain = 0.0;
    double l_total = 0.0;
};

/// -sum_i log P(forget marker | u_i, q_i); every example must be Forget.
inline double forget_loss(const Parameters& params, const Vocab& vocab, const std::vector<UnlearnExample>& batch) {
    double loss = 0.0;
    for (const auto& ex : batch) {
        if (ex.kind != Kind::Forget) {
            throw std::invalid_argument("forget_loss: batch contains a non-Forget example");
        }
        loss += item_nll(params, render_training_item(vocab, ex, Objective::Ours));
    }
    return loss;
}

/// -sum_i sum_t log P(r_{i,t} | u_i, q_i, r_{i,<t}) over answer tokens + EOS.
inline double retain_loss(const Parameters& params, const Vocab& vocab, const std::vector<UnlearnExample>& batch) {
    double loss = 0.0;
    for (const auto& ex : batch) {
        if (ex.kind != Kind::Retain) {
            throw std::invalid_argument("retain_loss: batch contains a non-Retain example");
        }
        loss += item_nll(params, render_training_item(vocab, ex, Objective::Ours));
    }
    return loss;
}

/// l_total = l_forget + l_retain, each accumulated in batch order.
inline LossBreakdown total_loss(const Parameters& params, const Vocab& vocab,
                                const std::vector<UnlearnExample>& batch) {
    LossBreakdown out;
    for (const auto& ex : batch) {
        double nll = item_nll(params, render_training_item(vocab, ex, Objective::Ours));
        (ex.kind == Kind::Forget ? out.l_forget : out.l_retain) += nll;
    }
    out.l_total = out.l_forget + out.l_retain;
    return out;
}

/// + sum_forget log P(r_i | u_i, q_i) - sum_retain log P(r_i | u_i, q_i):
/// ascend on the true answers of forget items, descend on retain items.
inline double ga_loss(const Parameters& params, const Vocab& vocab, const std::vector<UnlearnExample>& batch) {
    double loss = 0.0;
    for (const auto& ex : batch) {
        TrainingItem item = render_training_item(vocab, ex, Objective::GA);
        loss += item.sign * item_nll(params, item);
    }
    return loss;
}

namespace detail {

inline int resolve_threads(int n_threads) {
    if (n_threads > 0) {
        return n_threads;
    }
    if (const char* env = std::getenv("UNLEARN_THREADS")) {
        int v = std::atoi(env);
        if (v > 0) {
            return v;
        }
    }
    unsigned hc = std::thread::hardware_concurrency();
    return static_cast<int>(std::clamp(hc, 1u, 8u));
}

// Runs f(i) for i in [0, n); slot-indexed outputs keep results independent of
// the thread count and schedule.
template <class F>
inline void parallel_for(int n, int n_threads, F&& f) {
    n_threads = std::min(resolve_threads(n_threads), n);
    if (n_threads <= 1) {
        for (int i = 0; i < n; ++i) {
            f(i);
        }
        return;
    }
    std::vector<std::thread> workers;
    workers.reserve(static_cast<size_t>(n_threads));
    for (int w = 0; w < n_threads; ++w) {
        workers.emplace_back([&, w]() {
            for (int i = w; i < n; i += n_threads) {
                f(i);
            }
        });
    }
    for (auto& t : workers) {
        t.join();
    }
}

}  // namespace detail

/// Batch loss plus gradients, summed over items in index order regardless of
/// the thread count. Returns sum_i sign_i * nll_i.
inline double batch_loss_and_grad(const Parameters& params, const std::vector<TrainingItem>& items, GradBuffer& grads,
                                  bool blocks_frozen, int n_threads = 0) {
    const int V = params.config.vocab_size;
    std::vector<double> losses(items.size(), 0.0);
    std::vector<GradBuffer> slot(items.size());
    detail::parallel_for(static_cast<int>(items.size()), n_threads, [&](int i) {
        const TrainingItem& item = items[static_cast<size_t>(i)];
        slot[static_cast<size_t>(i)].init(params, grads.need);
        ForwardCache cache;
        auto out = forward_at(params, item.tokens, item.target_pos, &cache, false);
        std::vector<double> dlogits(out.logits.size());
        double nll = 0.0;
        for (size_t r = 0; r < item.target_pos.size(); ++r) {
            const double* row = out.logits.data() + r * static_cast<size_t>(V);
            double* drow = dlogits.data() + r * static_cast<size_t>(V);
            double lse = nn::log_sum_exp(row, V);
            nll += lse - row[item.target_tok[r]];
            for (int vtok = 0; vtok < V; ++vtok) {
                drow[vtok] = item.sign * std::exp(row[vtok] - lse);
            }
            drow[item.target_tok[r]] -= item.sign;
        }
        losses[static_cast<size_t>(i)] = item.sign * nll;
        backward_at(params, cache, item.target_pos, dlogits, slot[static_cast<size_t>(i)], blocks_frozen);
    });
    double total = 0.0;
    for (size_t i = 0; i < items.size(); ++i) {
        total += losses[i];
        grads.add_from(slot[i]);
    }
    return total;
}

inline double batch_loss(const Parameters& params, const std::vector<TrainingItem>& items, int n_threads = 0) {
    std::vector<double> losses(items.size(), 0.0);
    detail::parallel_for(static_cast<int>(items.size()), n_threads, [&](int i) {
        const TrainingItem& item = items[static_cast<size_t>(i)];
        losses[static_cast<size_t>(i)] = item.sign * item_nll(params, item);
    });
    double total = 0.0;
    for (double l : losses) {
        total += l;
    }
    return total;
}

}  // namespace unlearn
