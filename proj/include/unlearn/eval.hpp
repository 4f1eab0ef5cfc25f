#pragma once

#include <algorithm>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "unlearn/corpus.hpp"
#include "unlearn/model.hpp"
#include "unlearn/objective.hpp"
#include "unlearn/prompts.hpp"
#include "unlearn/tokenizer.hpp"

namespace unlearn {

inline int argmax_lowest(const double* x, int n) {
    int best = 0;
    for (int i = 1; i < n; ++i) {
        if (x[i] > x[best]) {
            best = i;
        }
    }
    return best;
}

/// Argmax decoding, ties broken toward the lowest token id; stops at EOS or
/// after max_new tokens. The returned completion excludes the EOS itself.
inline std::vector<int> greedy_generate(const Parameters& params, std::span<const int> prompt, int max_new) {
    if (static_cast<int>(prompt.size()) > params.config.max_seq_len - max_new) {
        throw std::length_error("greedy_generate: prompt too long for max_new=" + std::to_string(max_new));
    }
    std::vector<int> tokens(prompt.begin(), prompt.end());
    std::vector<int> completion;
    for (int step = 0; step < max_new; ++step) {
        const int last = static_cast<int>(tokens.size()) - 1;
        auto out = forward_at(params, tokens, std::span<const int>(&last, 1), nullptr, false);
        int next = argmax_lowest(out.logits.data(), params.config.vocab_size);
        if (next == Vocab::EOS) {
            break;
        }
        completion.push_back(next);
        tokens.push_back(next);
    }
    return completion;
}

enum class Verdict { Correct, Refusal, Hallucination };

inline const char* verdict_name(Verdict v) {
    switch (v) {
        case Verdict::Correct: return "correct";
        case Verdict::Refusal: return "refusal";
        case Verdict::Hallucination: return "hallucination";
    }
    return "?";
}

inline Verdict score_completion(const Vocab& vocab, const UnlearnExample& ex, const std::vector<int>& completion) {
    if (ex.kind == Kind::Forget) {
        if (completion.size() == 1 && completion[0] == Vocab::FORGOT) {
            return Verdict::Correct;
        }
        return Verdict::Hallucination;
    }
    std::vector<int> gold = encode(vocab, ex.target_output);
    if (completion == gold) {
        return Verdict::Correct;
    }
    if (completion.size() == 1 && completion[0] == Vocab::FORGOT) {
        return Verdict::Refusal;
    }
    return Verdict::Hallucination;
}

struct Transcript {
    std::string prompt;
    std::string completion;
    std::string gold;
    std::string verdict;
};

struct EvalReport {
    std::string split;
    std::string method;
    double forget_acc = 0.0;
    double retain_acc = 0.0;
    double hallucination_rate = 0.0;
    double refusal_rate_on_retain = 0.0;
    int n_forget = 0;
    int n_retain = 0;
    std::string transcript_path;
    std::vector<Transcript> transcripts;
};

struct EvalContext {
    Protocol protocol = Protocol::Unl;
    // Demonstration sources for the few-shot and ICUL protocols.
    const std::vector<UnlearnExample>* demo_pool = nullptr;
    std::unordered_map<std::string, QAPair> qa_by_key;
    std::vector<std::string> replacement_answers;
    int icul_retain_shots = 4;
    uint64_t seed = 7;
    int max_new = 4;
    int n_threads = 0;
};

inline EvalContext make_eval_context(Protocol protocol, const std::vector<UnlearnExample>& train_pool,
                                     const std::vector<QAPair>& qas, uint64_t seed) {
    EvalContext ctx;
    ctx.protocol = protocol;
    ctx.demo_pool = &train_pool;
    ctx.seed = seed;
    for (const auto& qa : qas) {
        ctx.qa_by_key.emplace(qa.knowledge_key, qa);
    }
    std::set<std::string> answers;
    for (const auto& ex : train_pool) {
        answers.insert(ex.gold_answer);
    }
    ctx.replacement_answers.assign(answers.begin(), answers.end());
    return ctx;
}

inline std::string render_eval_prompt(const UnlearnExample& ex, const EvalContext& ctx, uint64_t example_seed) {
    switch (ctx.protocol) {
        case Protocol::Unl:
            return render_unl_prompt(ex.unlearn_target, ex.query);
        case Protocol::ZeroShot:
            return render_zero_shot(ex.unlearn_target, ex.query);
        case Protocol::FewShot: {
            if (!ctx.demo_pool) {
                throw std::invalid_argument("few-shot evaluation needs a demonstration pool");
            }
            return render_few_shot(ex.unlearn_target, ex.query, *ctx.demo_pool, example_seed).text;
        }
        case Protocol::Icul: {
            if (!ctx.demo_pool) {
                throw std::invalid_argument("icul evaluation needs a demonstration pool");
            }
            auto it = ctx.qa_by_key.find(ex.u_key);
            if (it == ctx.qa_by_key.end()) {
                throw std::invalid_argument("icul evaluation: no QA record for unlearn target key " + ex.u_key);
            }
            Shot forget_item{ex.unlearn_target, it->second.question, it->second.answer, true};
            std::vector<const UnlearnExample*> retain_pool;
            for (const auto& d : *ctx.demo_pool) {
                if (d.kind == Kind::Retain) {
                    retain_pool.push_back(&d);
                }
            }
            if (retain_pool.empty()) {
                throw std::runtime_error("icul evaluation: demonstration pool has no retain items");
            }
            Rng rng = Rng(example_seed).fork("icul-demos");
            std::vector<Shot> retain_items;
            for (int i = 0; i < ctx.icul_retain_shots; ++i) {
                const auto& d = *retain_pool[rng.below(retain_pool.size())];
                retain_items.push_back({d.unlearn_target, d.query, d.target_output, false});
            }
            return render_icul(forget_item, retain_items, ex.query, ctx.replacement_answers, example_seed).text;
        }
    }
    throw std::logic_error("unreachable protocol");
}

/// One report over a set of examples under a single protocol. Pure given the
/// parameters; example order is preserved in the transcripts.
inline EvalReport evaluate_examples(const Parameters& params, const Vocab& vocab,
                                    const std::vector<UnlearnExample>& examples, const EvalContext& ctx,
                                    const std::string& split_name) {
    if (examples.empty()) {
        throw std::runtime_error("evaluate_examples: undefined metric over an empty example set");
    }
    EvalReport rep;
    rep.split = split_name;
    rep.method = protocol_name(ctx.protocol);
    rep.transcripts.resize(examples.size());
    std::vector<Verdict> verdicts(examples.size());
    std::vector<char> is_forget(examples.size());

    detail::parallel_for(static_cast<int>(examples.size()), ctx.n_threads, [&](int i) {
        const auto& ex = examples[static_cast<size_t>(i)];
        uint64_t example_seed = Rng(ctx.seed).fork("eval").fork(static_cast<uint64_t>(i)).next_u64();
        std::string prompt = render_eval_prompt(ex, ctx, example_seed);
        std::vector<int> prompt_tokens = encode(vocab, prompt);
        std::vector<int> completion = greedy_generate(params, prompt_tokens, ctx.max_new);
        Verdict v = score_completion(vocab, ex, completion);
        verdicts[static_cast<size_t>(i)] = v;
        is_forget[static_cast<size_t>(i)] = ex.kind == Kind::Forget;
        rep.transcripts[static_cast<size_t>(i)] = {prompt, decode(vocab, completion),
                                                   ex.kind == Kind::Forget ? std::string(kForgetMarker)
                                                                           : ex.target_output,
                                                   verdict_name(v)};
    });

    int forget_correct = 0, retain_correct = 0, refusals = 0, hallucinations = 0;
    for (size_t i = 0; i < examples.size(); ++i) {
        if (is_forget[i]) {
            ++rep.n_forget;
            if (verdicts[i] == Verdict::Correct) {
                ++forget_correct;
            } else {
                ++hallucinations;
            }
        } else {
            ++rep.n_retain;
            if (verdicts[i] == Verdict::Correct) {
                ++retain_correct;
            } else if (verdicts[i] == Verdict::Refusal) {
                ++refusals;
            } else {
                ++hallucinations;
            }
        }
    }
    rep.forget_acc = rep.n_forget ? static_cast<double>(forget_correct) / rep.n_forget : 0.0;
    rep.retain_acc = rep.n_retain ? static_cast<double>(retain_correct) / rep.n_retain : 0.0;
    rep.refusal_rate_on_retain = rep.n_retain ? static_cast<double>(refusals) / rep.n_retain : 0.0;
    rep.hallucination_rate = static_cast<double>(hallucinations) / static_cast<double>(examples.size());
    return rep;
}

/// Fraction of Forget examples whose whole completion is exactly the forget
/// marker, under the plain unlearning prompt.
inline double forget_accuracy(const Parameters& params, const Vocab& vocab,
                              const std::vector<UnlearnExample>& forget_examples, int n_threads = 0) {
    if (forget_examples.empty()) {
        throw std::runtime_error("forget_accuracy: undefined metric over an empty example set");
    }
    for (const auto& ex : forget_examples) {
        if (ex.kind != Kind::Forget) {
            throw std::invalid_argument("forget_accuracy: batch contains a non-Forget example");
        }
    }
    EvalContext ctx;
    ctx.n_threads = n_threads;
    return evaluate_examples(params, vocab, forget_examples, ctx, "ad-hoc").forget_acc;
}

/// Fraction of Retain examples whose completion exactly matches the gold
/// answer token sequence.
inline double retain_accuracy(const Parameters& params, const Vocab& vocab,
                              const std::vector<UnlearnExample>& retain_examples, int n_threads = 0) {
    if (retain_examples.empty()) {
        throw std::runtime_error("retain_accuracy: undefined metric over an empty example set");
    }
    for (const auto& ex : retain_examples) {
        if (ex.kind != Kind::Retain) {
            throw std::invalid_argument("retain_accuracy: batch contains a non-Retain example");
        }
    }
    EvalContext ctx;
    ctx.n_threads = n_threads;
    return evaluate_examples(params, vocab, retain_examples, ctx, "ad-hoc").retain_acc;
}

/// One report per split under the chosen protocol.
inline std::vector<EvalReport> evaluate_suite(const Parameters& params, const Vocab& vocab,
                                              const std::vector<UnlearnExample>& in_domain_test,
                                              const std::vector<UnlearnExample>& out_of_domain,
                                              const EvalContext& ctx) {
    std::vector<EvalReport> reports;
    reports.push_back(evaluate_examples(params, vocab, in_domain_test, ctx, "in_domain"));
    reports.push_back(evaluate_examples(params, vocab, out_of_domain, ctx, "out_of_domain"));
    return reports;
}

inline nlohmann::json report_to_json(const EvalReport& rep) {
    return {{"split", rep.split},
            {"method", rep.method},
            {"forget_acc", rep.forget_acc},
            {"retain_acc", rep.retain_acc},
            {"hallucination_rate", rep.hallucination_rate},
            {"refusal_rate_on_retain", rep.refusal_rate_on_retain},
            {"n_forget", rep.n_forget},
            {"n_retain", rep.n_retain},
            {"transcripts", rep.transcript_path}};
}

inline void save_report(EvalReport& rep, const std::string& json_path, const std::string& transcripts_path) {
    rep.transcript_path = transcripts_path;
    std::string lines;
    for (const auto& t : rep.transcripts) {
        nlohmann::json j = {{"prompt", t.prompt}, {"completion", t.completion}, {"gold", t.gold},
                            {"verdict", t.verdict}};
        lines += j.dump();
        lines += '\n';
    }
    write_text_file(transcripts_path, lines);
    write_text_file(json_path, report_to_json(rep).dump(2) + "\n");
}

inline std::string summary_csv_header() { return "method,split,forget,retain,hallucination\n"; }

inline std::string summary_csv_row(const EvalReport& rep) {
    char buf[256];
    std::snprintf(buf, sizeof(buf), "%s,%s,%.4f,%.4f,%.4f\n", rep.method.c_str(), rep.split.c_str(), rep.forget_acc,
                  rep.retain_acc, rep.hallucination_rate);
    return buf;
}

/// Plain QA accuracy (no unlearning span): prompt `<s> [INST] {q} [/INST]`,
/// exact answer + EOS match. Used as the pre-training gate.
inline double plain_qa_accuracy(const Parameters& params, const Vocab& vocab, const std::vector<QAPair>& qas,
                                int n_threads = 0) {
    if (qas.empty()) {
        throw std::runtime_error("plain_qa_accuracy: empty QA set");
    }
    std::vector<char> correct(qas.size(), 0);
    detail::parallel_for(static_cast<int>(qas.size()), n_threads, [&](int i) {
        const auto& qa = qas[static_cast<size_t>(i)];
        std::vector<int> prompt = encode(vocab, "<s> [INST] " + qa.question + " [/INST]");
        std::vector<int> gold = encode(vocab, qa.answer);
        auto completion = greedy_generate(params, prompt, static_cast<int>(gold.size()) + 1);
        correct[static_cast<size_t>(i)] = completion == gold;
    });
    int n = 0;
    for (char c : correct) {
        n += c;
    }
    return static_cast<double>(n) / static_cast<double>(qas.size());
}

}  // namespace unlearn
