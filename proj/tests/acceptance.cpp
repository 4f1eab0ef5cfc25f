// Acceptance suite: runs every verification criterion end to end and prints
// one pass/fail line per criterion.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include "unlearn/corpus.hpp"
#include "unlearn/eval.hpp"
#include "unlearn/introspect.hpp"
#include "unlearn/model.hpp"
#include "unlearn/objective.hpp"
#include "unlearn/prompts.hpp"
#include "unlearn/tokenizer.hpp"
#include "unlearn/trainer.hpp"

using namespace unlearn;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct CriterionResult {
    int id = 0;
    std::string name;
    bool pass = false;
    bool soft = false;  // soft criteria warn instead of failing
    std::string detail;
};

struct Pipeline {
    std::vector<QAPair> qas;
    std::vector<QAPair> qas_a;
    Vocab vocab;
    std::vector<UnlearnExample> train_set, test_set, ood_set;
    Parameters base;
    Parameters lora_model;
    PretrainResult pretrain_result;
    EvalReport unl_in_report;
    std::string base_ckpt_bytes, lora_ckpt_bytes, report_json;
};

constexpr uint64_t kSeed = 7;

HyperParams table_defaults_epochs30() {
    HyperParams h;  // batch 4, accum 1, lr 2e-4, decay 0.001, clip 0.3, warmup 0.03, constant
    h.epochs = 30;
    h.seed = kSeed;
    return h;
}

std::string checkpoint_bytes(const Parameters& params, const HyperParams& hyper, uint64_t vhash,
                             const std::string& tag) {
    auto path = fs::temp_directory_path() / ("unlearn_accept_" + tag + ".ulf");
    Checkpoint ckpt;
    ckpt.config = params.config;
    ckpt.lora = params.lora;
    ckpt.hyper = hyper;
    ckpt.vocab_hash = vhash;
    ckpt.params = params;
    save_checkpoint(ckpt, path.string());
    return read_text_file(path.string());
}

// Criterion-1 pipeline: corpus -> pre-train to the QA gate -> LoRA unlearning
// training with the default hyperparameters (epochs=30) -> held-out
// evaluation.
Pipeline run_pipeline(const std::string& tag) {
    Pipeline p;
    FactWorld world_a = generate_fact_world(kSeed, 180, 5, Domain::A);
    FactWorld world_b = generate_fact_world(kSeed, 60, 3, Domain::B);
    p.qas_a = derive_qa_pairs(world_a, default_templates(Domain::A));
    auto qas_b = derive_qa_pairs(world_b, default_templates(Domain::B));
    p.qas = p.qas_a;
    p.qas.insert(p.qas.end(), qas_b.begin(), qas_b.end());

    std::vector<std::string> texts = protocol_vocab_texts();
    for (const auto& qa : p.qas) {
        texts.push_back(qa.question);
        texts.push_back(qa.answer);
    }
    p.vocab = build_vocab(texts);

    auto examples_a = build_examples(p.qas_a, kSeed, 1);
    p.ood_set = build_examples(qas_b, Rng(kSeed).fork("ood").next_u64(), 1);
    auto split = split_dataset(examples_a, 0.8, kSeed);
    p.train_set = std::move(split.first);
    p.test_set = std::move(split.second);

    ModelConfig cfg;
    cfg.vocab_size = p.vocab.size();
    Parameters init = init_model(cfg, kSeed);

    PretrainConfig pre;
    pre.seed = kSeed;
    auto t0 = Clock::now();
    p.base = pretrain_lm(std::move(init), p.qas, p.vocab, pre, p.qas_a, {}, &p.pretrain_result);
    std::fprintf(stderr, "  [%s] pretrain: %d epochs, gate %.4f, %.1fs\n", tag.c_str(),
                 p.pretrain_result.epochs_run, p.pretrain_result.gate_qa_accuracy, seconds_since(t0));

    HyperParams hyper = table_defaults_epochs30();
    t0 = Clock::now();
    p.lora_model = train(p.base, p.train_set, p.vocab, hyper, TuningMode::lora(), Objective::Ours);
    std::fprintf(stderr, "  [%s] lora training: %.1fs\n", tag.c_str(), seconds_since(t0));

    EvalContext ctx;
    ctx.seed = kSeed;
    p.unl_in_report = evaluate_examples(p.lora_model, p.vocab, p.test_set, ctx, "in_domain");
    p.report_json = report_to_json(p.unl_in_report).dump();
    p.base_ckpt_bytes = checkpoint_bytes(p.base, hyper, vocab_hash(p.vocab), tag + "_base");
    p.lora_ckpt_bytes = checkpoint_bytes(p.lora_model, hyper, vocab_hash(p.vocab), tag + "_lora");
    return p;
}

double mean_ias(const Parameters& params, const Vocab& vocab, const std::vector<UnlearnExample>& examples,
                bool* bounds_ok, Kind kind = Kind::Forget) {
    double sum = 0.0;
    size_t n = 0;
    for (const auto& ex : examples) {
        if (ex.kind != kind) {
            continue;
        }
        auto tokens = encode(vocab, render_unl_prompt(ex.unlearn_target, ex.query));
        LensTrace trace = lens_grid(params, tokens, 1);
        int answer_token = encode(vocab, ex.gold_answer)[0];
        auto score = internal_answer_score(trace, answer_token, static_cast<int>(tokens.size()) - 1);
        if (score.normalized < 0.0 || score.normalized > 1.0) {
            *bounds_ok = false;
        }
        sum += score.normalized;
        ++n;
    }
    return n ? sum / static_cast<double>(n) : 0.0;
}

std::string load_template(const std::string& name) {
    std::string text = read_text_file(std::string(UNLEARN_SOURCE_DIR) + "/templates/" + name);
    while (!text.empty() && (text.back() == '\n' || text.back() == '\r')) {
        text.pop_back();
    }
    return text;
}

std::string substitute(std::string text, const std::vector<std::pair<std::string, std::string>>& slots) {
    for (const auto& [slot, value] : slots) {
        size_t pos;
        while ((pos = text.find(slot)) != std::string::npos) {
            text.replace(pos, slot.size(), value);
        }
    }
    return text;
}

char fmtbuf[512];

const char* fmt(const char* format, auto... args) {
    std::snprintf(fmtbuf, sizeof(fmtbuf), format, args...);
    return fmtbuf;
}

}  // namespace

int main() {
    std::vector<CriterionResult> results;
    auto add = [&](int id, const std::string& name, bool pass, const std::string& detail, bool soft = false) {
        results.push_back({id, name, pass, soft, detail});
        std::fprintf(stderr, "  -> [%d] %s: %s (%s)\n", id, name.c_str(), pass ? (soft ? "PASS" : "PASS") : (soft ? "WARN" : "FAIL"),
                     detail.c_str());
    };

    auto total_t0 = Clock::now();
    std::fprintf(stderr, "running criterion-1 pipeline...\n");
    Pipeline p1 = run_pipeline("run1");

    // --- Criterion 1: end-to-end unlearning run ---------------------------
    {
        bool gate = p1.pretrain_result.gate_qa_accuracy >= 0.95;
        bool forget_ok = p1.unl_in_report.forget_acc >= 0.90;
        bool retain_ok = p1.unl_in_report.retain_acc >= 0.75;
        add(1, "end-to-end unlearning (LoRA, in-domain)", gate && forget_ok && retain_ok,
            fmt("gate=%.3f forget=%.3f retain=%.3f", p1.pretrain_result.gate_qa_accuracy, p1.unl_in_report.forget_acc,
                p1.unl_in_report.retain_acc));
    }

    // --- Criterion 2: out-of-domain vs zero-shot --------------------------
    {
        EvalContext zs = make_eval_context(Protocol::ZeroShot, p1.train_set, p1.qas, kSeed);
        EvalReport zs_ood = evaluate_examples(p1.base, p1.vocab, p1.ood_set, zs, "out_of_domain");
        EvalContext ours;
        ours.seed = kSeed;
        EvalReport ours_ood = evaluate_examples(p1.lora_model, p1.vocab, p1.ood_set, ours, "out_of_domain");
        bool zs_zero = zs_ood.forget_acc == 0.0 && zs_ood.retain_acc == 0.0;
        bool better = ours_ood.forget_acc > zs_ood.forget_acc && ours_ood.retain_acc > zs_ood.retain_acc;
        add(2, "out-of-domain beats zero-shot", zs_zero && better,
            fmt("ours f=%.3f r=%.3f vs zero-shot f=%.3f r=%.3f", ours_ood.forget_acc, ours_ood.retain_acc,
                zs_ood.forget_acc, zs_ood.retain_acc));
    }

    // --- Criterion 3: baseline sanity --------------------------------------
    {
        EvalContext icul = make_eval_context(Protocol::Icul, p1.train_set, p1.qas, kSeed);
        EvalReport icul_rep = evaluate_examples(p1.base, p1.vocab, p1.test_set, icul, "in_domain");

        HyperParams ga_hyper = table_defaults_epochs30();
        ga_hyper.epochs = 1;  // destructive objective; the published recipe trains a single epoch
        auto t0 = Clock::now();
        Parameters ga_model = train(p1.base, p1.train_set, p1.vocab, ga_hyper, TuningMode::full(), Objective::GA);
        std::fprintf(stderr, "  ga training: %.1fs\n", seconds_since(t0));
        EvalContext unl;
        unl.seed = kSeed;
        EvalReport ga_rep = evaluate_examples(ga_model, p1.vocab, p1.test_set, unl, "in_domain");

        EvalContext fs_ctx = make_eval_context(Protocol::FewShot, p1.train_set, p1.qas, kSeed);
        EvalReport fs_rep = evaluate_examples(p1.lora_model, p1.vocab, p1.test_set, fs_ctx, "in_domain");

        bool ok = icul_rep.forget_acc == 0.0 && icul_rep.retain_acc > 0.0 && ga_rep.forget_acc == 0.0 &&
                  fs_rep.forget_acc > 0.0;
        add(3, "baseline sanity (ICUL / GA / few-shot)", ok,
            fmt("icul f=%.3f r=%.3f | ga f=%.3f | few-shot f=%.3f", icul_rep.forget_acc, icul_rep.retain_acc,
                ga_rep.forget_acc, fs_rep.forget_acc));
    }

    // --- Criterion 4: loss suite -------------------------------------------
    {
        auto t0 = Clock::now();
        FactWorld probe_world = generate_fact_world(11, 12, 3, Domain::A);
        auto probe_qas = derive_qa_pairs(probe_world, default_templates(Domain::A));
        auto probe_examples = build_examples(probe_qas, 11, 1);
        std::vector<std::string> texts = protocol_vocab_texts();
        for (const auto& qa : probe_qas) {
            texts.push_back(qa.question);
            texts.push_back(qa.answer);
        }
        Vocab probe_vocab = build_vocab(texts);
        ModelConfig probe_cfg;
        probe_cfg.n_layers = 2;
        probe_cfg.d_model = 16;
        probe_cfg.n_heads = 2;
        probe_cfg.d_ff = 32;
        probe_cfg.vocab_size = probe_vocab.size();
        Parameters probe = init_model(probe_cfg, 5);

        bool additive = true, nonneg = true;
        Rng rng(kSeed);
        for (int trial = 0; trial < 1000; ++trial) {
            std::vector<UnlearnExample> batch;
            for (int i = 0; i < 4; ++i) {
                batch.push_back(probe_examples[rng.below(probe_examples.size())]);
            }
            LossBreakdown l = total_loss(probe, probe_vocab, batch);
            additive &= l.l_total == l.l_forget + l.l_retain;
            nonneg &= l.l_forget >= 0.0 && l.l_retain >= 0.0;
        }
        std::vector<UnlearnExample> gc_batch(probe_examples.begin(), probe_examples.begin() + 4);
        auto report = gradcheck(probe, gc_batch, probe_vocab, 1e-3, TuningMode::full());
        double elapsed = seconds_since(t0);
        bool ok = additive && nonneg && report.max_rel_err <= 1e-4 && elapsed <= 60.0;
        add(4, "loss suite (additivity, nonnegativity, gradcheck)", ok,
            fmt("additive=%d nonneg=%d gradcheck=%.2e runtime=%.1fs", additive ? 1 : 0, nonneg ? 1 : 0,
                report.max_rel_err, elapsed));
    }

    // --- Criterion 5: logit-lens consistency --------------------------------
    {
        bool head_ok = true, rows_ok = true;
        double worst = 0.0;
        Rng rng(kSeed ^ 0x5e75);
        for (int trial = 0; trial < 100; ++trial) {
            int len = 1 + static_cast<int>(rng.below(24));
            std::vector<int> tokens;
            for (int i = 0; i < len; ++i) {
                tokens.push_back(static_cast<int>(rng.below(static_cast<uint64_t>(p1.vocab.size()))));
            }
            LensTrace trace = lens_grid(p1.base, tokens, 5);
            auto head = next_token_distribution(p1.base, tokens);
            const double* lens_last =
                trace.row(trace.n_layers - 1, static_cast<int>(trace.positions.size()) - 1);
            for (int v = 0; v < trace.vocab; ++v) {
                worst = std::max(worst, std::fabs(lens_last[v] - head[static_cast<size_t>(v)]));
            }
            head_ok &= worst <= 1e-6;
            for (int l = 0; l < trace.n_layers && rows_ok; ++l) {
                for (size_t pi = 0; pi < trace.positions.size(); ++pi) {
                    double sum = 0.0;
                    for (int v = 0; v < trace.vocab; ++v) {
                        sum += trace.row(l, static_cast<int>(pi))[v];
                    }
                    rows_ok &= std::fabs(sum - 1.0) <= 1e-6;
                }
            }
        }
        add(5, "logit-lens/head consistency over 100 prompts", head_ok && rows_ok,
            fmt("max |lens - head| = %.2e, rows normalized=%d", worst, rows_ok ? 1 : 0));
    }

    // --- Criterion 6: internal answer score, LastLayer vs LoRA -------------
    {
        auto t0 = Clock::now();
        Parameters ll_model =
            train(p1.base, p1.train_set, p1.vocab, table_defaults_epochs30(), TuningMode::last_layer(),
                  Objective::Ours);
        std::fprintf(stderr, "  last-layer training: %.1fs\n", seconds_since(t0));
        bool bounds_ok = true;
        double ias_ll = mean_ias(ll_model, p1.vocab, p1.test_set, &bounds_ok);
        double ias_lora = mean_ias(p1.lora_model, p1.vocab, p1.test_set, &bounds_ok);
        add(6, "internal answer score: last-layer < LoRA", bounds_ok && ias_ll < ias_lora,
            fmt("last-layer=%.4f lora=%.4f bounds=%d", ias_ll, ias_lora, bounds_ok ? 1 : 0));
    }

    // --- Criterion 7: pretend-to-forget (soft) ------------------------------
    {
        size_t hits = 0, total = 0;
        for (const auto& ex : p1.test_set) {
            if (ex.kind != Kind::Forget) {
                continue;
            }
            ++total;
            auto tokens = encode(p1.vocab, render_unl_prompt(ex.unlearn_target, ex.query));
            auto completion = greedy_generate(p1.lora_model, tokens, 4);
            bool emits_marker = completion.size() == 1 && completion[0] == Vocab::FORGOT;
            if (!emits_marker) {
                continue;
            }
            LensTrace trace = lens_grid(p1.lora_model, tokens, 1);
            int answer_token = encode(p1.vocab, ex.gold_answer)[0];
            bool internal_answer = false;
            for (int l = 0; l + 1 < trace.n_layers; ++l) {
                const double* row = trace.row(l, 0);
                int best = 0;
                for (int v = 1; v < trace.vocab; ++v) {
                    if (row[v] > row[best]) {
                        best = v;
                    }
                }
                internal_answer |= best == answer_token;
            }
            hits += internal_answer;
        }
        double frac = total ? static_cast<double>(hits) / static_cast<double>(total) : 0.0;
        add(7, "pretend-to-forget: internal answer below the final layer", frac >= 0.5,
            fmt("fraction=%.3f over %zu forget samples", frac, total), /*soft=*/true);
    }

    // --- Criterion 8: template fidelity and protocol properties ------------
    {
        bool ok = true;
        std::string detail;
        ok &= render_unl_prompt("Paris", "Where would you find the Eiffel Tower?") ==
              substitute(load_template("unl.txt"),
                         {{"{u}", "Paris"}, {"{q}", "Where would you find the Eiffel Tower?"}});
        ok &= render_zero_shot("Paris", "Where would you find the Eiffel Tower?") ==
              substitute(load_template("zero_shot.txt"),
                         {{"{u}", "Paris"}, {"{q}", "Where would you find the Eiffel Tower?"}});

        auto fs_render = render_few_shot("U0", "Q0?", p1.train_set, kSeed);
        std::vector<std::pair<std::string, std::string>> slots = {{"{u0}", "U0"}, {"{q0}", "Q0?"}};
        for (size_t i = 0; i < 5; ++i) {
            std::string n = std::to_string(i + 1);
            slots.push_back({"{u" + n + "}", fs_render.shots[i].u});
            slots.push_back({"{q" + n + "}", fs_render.shots[i].q});
            slots.push_back({"{a" + n + "}", fs_render.shots[i].a});
        }
        ok &= fs_render.text == substitute(load_template("few_shot.txt"), slots);

        bool always_forget_shot = true;
        for (uint64_t seed = 0; seed < 1000; ++seed) {
            auto r = render_few_shot("u", "q?", p1.train_set, seed);
            bool has = false;
            for (const auto& s : r.shots) {
                has |= s.is_forget;
            }
            always_forget_shot &= has;
        }
        ok &= always_forget_shot;

        EvalContext icul_ctx = make_eval_context(Protocol::Icul, p1.train_set, p1.qas, kSeed);
        const UnlearnExample& probe_ex = p1.test_set.front();
        const QAPair& u_qa = icul_ctx.qa_by_key.at(probe_ex.u_key);
        Shot forget_item{probe_ex.unlearn_target, u_qa.question, u_qa.answer, true};
        std::vector<Shot> retains;
        for (const auto& ex : p1.train_set) {
            if (ex.kind == Kind::Retain && retains.size() < 4) {
                retains.push_back({ex.unlearn_target, ex.query, ex.target_output, false});
            }
        }
        bool never_true = true;
        for (uint64_t seed = 0; seed < 1000; ++seed) {
            auto r = render_icul(forget_item, retains, probe_ex.query, icul_ctx.replacement_answers, seed);
            never_true &= r.shots[0].a != forget_item.a;
        }
        ok &= never_true;

        auto icul_render = render_icul(forget_item, retains, probe_ex.query, icul_ctx.replacement_answers, 0);
        std::vector<std::pair<std::string, std::string>> icul_slots = {{"{u0}", forget_item.u},
                                                                       {"{q0}", probe_ex.query}};
        for (size_t i = 0; i < 5; ++i) {
            std::string n = std::to_string(i + 1);
            icul_slots.push_back({"{u" + n + "}", icul_render.shots[i].u});
            icul_slots.push_back({"{q" + n + "}", icul_render.shots[i].q});
            icul_slots.push_back({"{a" + n + "}", icul_render.shots[i].a});
        }
        ok &= icul_render.text == substitute(load_template("icul.txt"), icul_slots);

        add(8, "template fidelity and protocol properties", ok,
            fmt("few-shot forget shot always present=%d, icul corruption never true=%d", always_forget_shot ? 1 : 0,
                never_true ? 1 : 0));
    }

    // --- Criterion 9: determinism -------------------------------------------
    {
        std::fprintf(stderr, "running criterion-1 pipeline again for determinism...\n");
        Pipeline p2 = run_pipeline("run2");
        bool ckpt_equal = p1.base_ckpt_bytes == p2.base_ckpt_bytes && p1.lora_ckpt_bytes == p2.lora_ckpt_bytes;
        bool report_equal = p1.report_json == p2.report_json;
        add(9, "determinism: bit-identical checkpoints and reports", ckpt_equal && report_equal,
            fmt("checkpoints=%s reports=%s", ckpt_equal ? "identical" : "DIFFER",
                report_equal ? "identical" : "DIFFER"));
    }

    std::printf("\n");
    bool all_pass = true;
    for (const auto& r : results) {
        const char* status = r.pass ? "PASS" : (r.soft ? "WARN" : "FAIL");
        std::printf("[%d] %-55s %s  %s\n", r.id, r.name.c_str(), status, r.detail.c_str());
        if (!r.pass && !r.soft) {
            all_pass = false;
        }
    }
    std::printf("\nacceptance total runtime: %.1fs\n", seconds_since(total_t0));
    return all_pass ? 0 : 1;
}
