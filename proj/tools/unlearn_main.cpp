// Command-line entry point: corpus generation, training, evaluation and
// layer-wise introspection, each emitting files plus a run manifest.

#include <chrono>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "unlearn/corpus.hpp"
#include "unlearn/eval.hpp"
#include "unlearn/introspect.hpp"
#include "unlearn/manifest.hpp"
#include "unlearn/model.hpp"
#include "unlearn/objective.hpp"
#include "unlearn/prompts.hpp"
#include "unlearn/tokenizer.hpp"
#include "unlearn/trainer.hpp"

namespace fs = std::filesystem;
using namespace unlearn;

namespace {

using Clock = std::chrono::steady_clock;

std::string resolve_out(std::string out) {
    if (const char* env = std::getenv("UNLEARN_OUT")) {
        out = env;
    }
    if (out.empty()) {
        throw std::runtime_error("no output directory: pass --out or set UNLEARN_OUT");
    }
    fs::create_directories(out);
    return out;
}

Vocab build_corpus_vocab(const std::vector<QAPair>& qas, int max_seq_len) {
    std::vector<std::string> texts = protocol_vocab_texts();
    for (const auto& qa : qas) {
        texts.push_back(qa.question);
        texts.push_back(qa.answer);
    }
    TokenizerConfig tc;
    tc.max_seq_len = max_seq_len;
    return build_vocab(texts, tc);
}

struct DataDir {
    std::vector<QAPair> qas;
    std::vector<UnlearnExample> all_examples, train, test, ood;
};

DataDir load_data_dir(const std::string& dir) {
    DataDir d;
    d.qas = load_qa_json(dir + "/qa.json");
    d.all_examples = load_examples_json(dir + "/examples.json");
    d.train = load_examples_json(dir + "/train.json");
    d.test = load_examples_json(dir + "/test.json");
    for (const auto& ex : d.all_examples) {
        if (ex.domain == Domain::B) {
            d.ood.push_back(ex);
        }
    }
    return d;
}

std::vector<QAPair> domain_qas(const std::vector<QAPair>& qas, Domain dom) {
    std::vector<QAPair> out;
    for (const auto& qa : qas) {
        if (qa.domain == dom) {
            out.push_back(qa);
        }
    }
    return out;
}

int cmd_gen_corpus(uint64_t seed, int entities, int attrs, int entities_b, int attrs_b, int retain_per_forget,
                   double ratio, const std::string& out_flag) {
    auto t0 = Clock::now();
    std::string out = resolve_out(out_flag);

    FactWorld world_a = generate_fact_world(seed, entities, attrs, Domain::A);
    FactWorld world_b = generate_fact_world(seed, entities_b, attrs_b, Domain::B);
    auto qas = derive_qa_pairs(world_a, default_templates(Domain::A));
    auto qas_b = derive_qa_pairs(world_b, default_templates(Domain::B));
    qas.insert(qas.end(), qas_b.begin(), qas_b.end());

    auto examples_a = build_examples(derive_qa_pairs(world_a, default_templates(Domain::A)), seed, retain_per_forget);
    auto examples_b = build_examples(qas_b, Rng(seed).fork("ood").next_u64(), retain_per_forget);
    auto [train, test] = split_dataset(examples_a, ratio, seed);

    std::vector<UnlearnExample> all = examples_a;
    all.insert(all.end(), examples_b.begin(), examples_b.end());

    save_qa_json(qas, out + "/qa.json");
    save_examples_json(all, out + "/examples.json");
    save_examples_json(train, out + "/train.json");
    save_examples_json(test, out + "/test.json");

    RunManifest manifest;
    manifest.command = "gen-corpus";
    manifest.seed = seed;
    nlohmann::json cfg = {{"entities", entities}, {"attrs", attrs},   {"entities_b", entities_b},
                          {"attrs_b", attrs_b},   {"ratio", ratio},   {"retain_per_forget", retain_per_forget},
                          {"seed", seed}};
    manifest.config_hash = to_hex(fnv1a64(cfg.dump()));
    for (const char* f : {"qa.json", "examples.json", "train.json", "test.json"}) {
        manifest.add_output(out + "/" + f);
    }
    manifest.duration_seconds = std::chrono::duration<double>(Clock::now() - t0).count();
    manifest.save(out + "/manifest.json");
    std::cout << "gen-corpus: " << qas.size() << " QA pairs, " << all.size() << " examples (" << train.size()
              << " train / " << test.size() << " test)\n";
    return 0;
}

struct TrainCli {
    std::string data, out, mode = "lora", objective = "ours", pretrained;
    bool pretrain = false, pretrain_only = false;
    uint64_t seed = 7;
    int threads = 0;
    HyperParams hyper;
    int lora_rank = 8;
    double lora_alpha = 16.0;
    ModelConfig config;
    PretrainConfig pre;
};

TuningMode parse_mode(const TrainCli& cli) {
    if (cli.mode == "full") {
        return TuningMode::full();
    }
    if (cli.mode == "last-layer") {
        return TuningMode::last_layer();
    }
    if (cli.mode == "lora") {
        return TuningMode::lora(cli.lora_rank, cli.lora_alpha);
    }
    throw std::runtime_error("unknown tuning mode: " + cli.mode);
}

int cmd_train(TrainCli cli) {
    auto t0 = Clock::now();
    std::string out = resolve_out(cli.out);
    DataDir data = load_data_dir(cli.data);
    Vocab vocab = build_corpus_vocab(data.qas, cli.config.max_seq_len);
    cli.config.vocab_size = vocab.size();
    cli.hyper.seed = cli.seed;
    cli.pre.seed = cli.seed;

    TrainOptions opts;
    opts.n_threads = cli.threads;

    RunManifest manifest;
    manifest.command = "train";
    manifest.seed = cli.seed;
    manifest.inputs = {cli.data + "/qa.json", cli.data + "/train.json"};

    Parameters params = [&]() {
        if (cli.pretrain) {
            Parameters init = init_model(cli.config, cli.seed);
            PretrainResult pre_result;
            Parameters base =
                pretrain_lm(std::move(init), data.qas, vocab, cli.pre, domain_qas(data.qas, Domain::A), opts,
                            &pre_result);
            std::cerr << "pretrain: " << pre_result.epochs_run << " epochs, gate QA accuracy "
                      << pre_result.gate_qa_accuracy << "\n";
            Checkpoint ckpt;
            ckpt.config = base.config;
            ckpt.hyper = cli.hyper;
            ckpt.vocab_hash = vocab_hash(vocab);
            ckpt.params = base;
            save_checkpoint(ckpt, out + "/pretrained.ulf");
            manifest.add_output(out + "/pretrained.ulf");
            return base;
        }
        if (cli.pretrained.empty()) {
            throw std::runtime_error("train: pass --pretrain or --pretrained <checkpoint>");
        }
        Checkpoint ckpt = load_checkpoint(cli.pretrained);
        if (ckpt.vocab_hash != vocab_hash(vocab)) {
            throw std::runtime_error("train: checkpoint vocabulary hash does not match the data directory");
        }
        manifest.inputs.push_back(cli.pretrained);
        return ckpt.params;
    }();

    if (!cli.pretrain_only) {
        TuningMode mode = parse_mode(cli);
        Objective objective = cli.objective == "ga" ? Objective::GA : Objective::Ours;
        TrainCurve curve;
        opts.curve = &curve;
        params = train(std::move(params), data.train, vocab, cli.hyper, mode, objective, opts);

        Checkpoint ckpt;
        ckpt.config = params.config;
        ckpt.lora = params.lora;
        ckpt.hyper = cli.hyper;
        ckpt.vocab_hash = vocab_hash(vocab);
        ckpt.step = curve.steps.empty() ? 0 : curve.steps.back().step;
        ckpt.params = params;
        save_checkpoint(ckpt, out + "/model.ulf");
        write_text_file(out + "/curve.csv", curve.to_csv());
        manifest.add_output(out + "/model.ulf");
        manifest.add_output(out + "/curve.csv");
    }

    nlohmann::json cfg = {{"mode", cli.mode},
                          {"objective", cli.objective},
                          {"pretrain", cli.pretrain},
                          {"lora_rank", cli.lora_rank},
                          {"lora_alpha", cli.lora_alpha},
                          {"model", detail::config_to_json(cli.config)},
                          {"hyper", detail::hyper_to_json(cli.hyper)}};
    manifest.config_hash = to_hex(fnv1a64(cfg.dump()));
    manifest.duration_seconds = std::chrono::duration<double>(Clock::now() - t0).count();
    manifest.save(out + "/train_manifest.json");
    return 0;
}

Protocol parse_protocol(const std::string& name) {
    if (name == "unl") return Protocol::Unl;
    if (name == "zero-shot") return Protocol::ZeroShot;
    if (name == "few-shot") return Protocol::FewShot;
    if (name == "icul") return Protocol::Icul;
    throw std::runtime_error("unknown protocol: " + name);
}

int cmd_eval(const std::string& checkpoint, const std::string& data_dir, const std::string& out_flag,
             const std::string& protocol, const std::string& split, uint64_t seed, int max_new, int threads) {
    auto t0 = Clock::now();
    std::string out = resolve_out(out_flag);
    Checkpoint ckpt = load_checkpoint(checkpoint);
    DataDir data = load_data_dir(data_dir);
    Vocab vocab = build_corpus_vocab(data.qas, ckpt.config.max_seq_len);
    if (ckpt.vocab_hash != vocab_hash(vocab)) {
        throw std::runtime_error("eval: checkpoint vocabulary hash does not match the data directory");
    }

    std::vector<Protocol> protocols;
    if (protocol == "all") {
        protocols = {Protocol::Unl, Protocol::ZeroShot, Protocol::FewShot, Protocol::Icul};
    } else {
        protocols = {parse_protocol(protocol)};
    }
    std::vector<std::pair<std::string, const std::vector<UnlearnExample>*>> splits;
    if (split == "in" || split == "both") {
        splits.emplace_back("in_domain", &data.test);
    }
    if (split == "ood" || split == "both") {
        splits.emplace_back("out_of_domain", &data.ood);
    }
    if (splits.empty()) {
        throw std::runtime_error("eval: unknown split '" + split + "'");
    }

    RunManifest manifest;
    manifest.command = "eval";
    manifest.seed = seed;
    manifest.inputs = {checkpoint, data_dir + "/qa.json", data_dir + "/test.json"};

    std::string summary = summary_csv_header();
    for (Protocol proto : protocols) {
        EvalContext ctx = make_eval_context(proto, data.train, data.qas, seed);
        ctx.max_new = max_new;
        ctx.n_threads = threads;
        for (const auto& [split_name, examples] : splits) {
            EvalReport rep = evaluate_examples(ckpt.params, vocab, *examples, ctx, split_name);
            std::string stem = std::string("report_") + protocol_name(proto) + "_" + split_name;
            save_report(rep, out + "/" + stem + ".json", out + "/" + stem + ".jsonl");
            manifest.add_output(out + "/" + stem + ".json");
            manifest.add_output(out + "/" + stem + ".jsonl");
            summary += summary_csv_row(rep);
            std::cout << protocol_name(proto) << " " << split_name << ": forget " << rep.forget_acc << ", retain "
                      << rep.retain_acc << ", hallucination " << rep.hallucination_rate << "\n";
        }
    }
    write_text_file(out + "/summary.csv", summary);
    manifest.add_output(out + "/summary.csv");
    nlohmann::json cfg = {{"protocol", protocol}, {"split", split}, {"max_new", max_new}, {"seed", seed}};
    manifest.config_hash = to_hex(fnv1a64(cfg.dump()));
    manifest.duration_seconds = std::chrono::duration<double>(Clock::now() - t0).count();
    manifest.save(out + "/eval_manifest.json");
    return 0;
}

std::vector<UnlearnExample> forget_only(const std::vector<UnlearnExample>& examples) {
    std::vector<UnlearnExample> out;
    for (const auto& ex : examples) {
        if (ex.kind == Kind::Forget) {
            out.push_back(ex);
        }
    }
    return out;
}

double mean_internal_answer_score(const Parameters& params, const Vocab& vocab,
                                  const std::vector<UnlearnExample>& forget_examples, int window) {
    double sum = 0.0;
    size_t n = 0;
    for (const auto& ex : forget_examples) {
        auto tokens = encode(vocab, render_unl_prompt(ex.unlearn_target, ex.query));
        LensTrace trace = lens_grid(params, tokens, window);
        int answer_token = encode(vocab, ex.gold_answer)[0];
        auto score = internal_answer_score(trace, answer_token, static_cast<int>(tokens.size()) - 1);
        sum += score.normalized;
        ++n;
    }
    return n ? sum / static_cast<double>(n) : 0.0;
}

int cmd_lens(const std::string& checkpoint, const std::vector<std::string>& score_checkpoints,
             const std::string& data_dir, const std::string& out_flag, const std::string& u, const std::string& q,
             bool score, const std::string& trace_token, int window, uint64_t seed) {
    auto t0 = Clock::now();
    std::string out = resolve_out(out_flag);
    DataDir data = load_data_dir(data_dir);

    RunManifest manifest;
    manifest.command = "lens";
    manifest.seed = seed;
    manifest.inputs = {data_dir + "/qa.json"};

    auto load_with_vocab = [&](const std::string& path) {
        Checkpoint ckpt = load_checkpoint(path);
        Vocab vocab = build_corpus_vocab(data.qas, ckpt.config.max_seq_len);
        if (ckpt.vocab_hash != vocab_hash(vocab)) {
            throw std::runtime_error("lens: checkpoint vocabulary hash does not match the data directory");
        }
        return std::make_pair(std::move(ckpt), std::move(vocab));
    };

    if (!u.empty() || !q.empty()) {
        if (u.empty() || q.empty()) {
            throw std::runtime_error("lens: --u and --q must be given together");
        }
        auto [ckpt, vocab] = load_with_vocab(checkpoint);
        manifest.inputs.push_back(checkpoint);
        auto tokens = encode(vocab, render_unl_prompt(u, q));
        LensTrace trace = lens_grid(ckpt.params, tokens, window);
        export_lens_grid(trace, vocab, tokens, out + "/grid");
        for (const char* f : {"/grid.csv", "/grid.svg", "/grid_argmax.json"}) {
            manifest.add_output(out + f);
        }
    }

    if (score) {
        std::vector<std::string> paths = score_checkpoints;
        if (paths.empty()) {
            paths = {checkpoint};
        }
        std::string csv = "method,split,internal_answer_score\n";
        for (const auto& path : paths) {
            auto [ckpt, vocab] = load_with_vocab(path);
            manifest.inputs.push_back(path);
            std::string method = fs::path(path).stem().string();
            char buf[160];
            std::snprintf(buf, sizeof(buf), "%s,in_domain,%.4f\n", method.c_str(),
                          mean_internal_answer_score(ckpt.params, vocab, forget_only(data.test), window));
            csv += buf;
            std::snprintf(buf, sizeof(buf), "%s,out_of_domain,%.4f\n", method.c_str(),
                          mean_internal_answer_score(ckpt.params, vocab, forget_only(data.ood), window));
            csv += buf;
        }
        write_text_file(out + "/scores.csv", csv);
        manifest.add_output(out + "/scores.csv");
    }

    if (!trace_token.empty()) {
        auto [ckpt, vocab] = load_with_vocab(checkpoint);
        manifest.inputs.push_back(checkpoint);
        auto collect = [&](Kind kind) {
            std::vector<std::vector<int>> prompts;
            std::vector<int> tokens;
            for (const auto& ex : data.test) {
                if (ex.kind != kind) {
                    continue;
                }
                prompts.push_back(encode(vocab, render_unl_prompt(ex.unlearn_target, ex.query)));
                tokens.push_back(trace_token == "answer" ? encode(vocab, ex.gold_answer)[0]
                                                         : vocab.id_of(trace_token));
            }
            return std::make_pair(prompts, tokens);
        };
        std::vector<std::string> col_labels;
        for (int i = 0; i < window; ++i) {
            col_labels.push_back("t-" + std::to_string(window - 1 - i));
        }
        for (auto [kind, name] : {std::pair{Kind::Forget, "trace_forget"}, std::pair{Kind::Retain, "trace_retain"}}) {
            auto [prompts, tokens] = collect(kind);
            if (prompts.empty()) {
                continue;
            }
            TraceMatrix m = token_prob_trace(ckpt.params, prompts, tokens, window);
            export_heatmap(m, col_labels, out + "/" + name);
            manifest.add_output(out + "/" + name + ".csv");
            manifest.add_output(out + "/" + name + ".svg");
        }
    }

    nlohmann::json cfg = {{"u", u}, {"q", q}, {"score", score}, {"trace", trace_token}, {"window", window}};
    manifest.config_hash = to_hex(fnv1a64(cfg.dump()));
    manifest.duration_seconds = std::chrono::duration<double>(Clock::now() - t0).count();
    manifest.save(out + "/lens_manifest.json");
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"In-context knowledge unlearning laboratory"};
    app.require_subcommand(1);

    // gen-corpus
    uint64_t gc_seed = 7;
    int gc_entities = 180, gc_attrs = 5, gc_entities_b = 60, gc_attrs_b = 3, gc_rpf = 1;
    double gc_ratio = 0.8;
    std::string gc_out;
    auto* gen = app.add_subcommand("gen-corpus", "Generate the synthetic fact corpus, examples and splits");
    gen->add_option("--seed", gc_seed, "Master seed");
    gen->add_option("--entities", gc_entities)->check(CLI::PositiveNumber);
    gen->add_option("--attrs", gc_attrs)->check(CLI::PositiveNumber);
    gen->add_option("--entities-b", gc_entities_b)->check(CLI::PositiveNumber);
    gen->add_option("--attrs-b", gc_attrs_b)->check(CLI::PositiveNumber);
    gen->add_option("--retain-per-forget", gc_rpf)->check(CLI::PositiveNumber);
    gen->add_option("--ratio", gc_ratio)->check(CLI::Range(0.01, 0.99));
    gen->add_option("--out", gc_out, "Output directory");

    // train
    TrainCli tc;
    auto* tr = app.add_subcommand("train", "Pre-train and/or run unlearning training");
    tr->add_option("--data", tc.data)->required();
    tr->add_option("--out", tc.out);
    tr->add_option("--seed", tc.seed);
    tr->add_option("--threads", tc.threads);
    tr->add_option("--mode", tc.mode)->check(CLI::IsMember({"full", "last-layer", "lora"}));
    tr->add_option("--objective", tc.objective)->check(CLI::IsMember({"ours", "ga"}));
    tr->add_flag("--pretrain", tc.pretrain, "Run the pre-training phase from random init");
    tr->add_flag("--pretrain-only", tc.pretrain_only, "Stop after pre-training");
    tr->add_option("--pretrained", tc.pretrained, "Start from this checkpoint");
    tr->add_option("--epochs", tc.hyper.epochs)->check(CLI::PositiveNumber);
    tr->add_option("--batch", tc.hyper.batch_size)->check(CLI::PositiveNumber);
    tr->add_option("--accum", tc.hyper.grad_accum)->check(CLI::PositiveNumber);
    tr->add_option("--lr", tc.hyper.learning_rate);
    tr->add_option("--weight-decay", tc.hyper.weight_decay);
    tr->add_option("--clip", tc.hyper.max_grad_norm);
    tr->add_option("--warmup", tc.hyper.warmup_ratio);
    tr->add_option("--lora-rank", tc.lora_rank)->check(CLI::PositiveNumber);
    tr->add_option("--lora-alpha", tc.lora_alpha);
    tr->add_option("--layers", tc.config.n_layers)->check(CLI::PositiveNumber);
    tr->add_option("--d-model", tc.config.d_model)->check(CLI::PositiveNumber);
    tr->add_option("--heads", tc.config.n_heads)->check(CLI::PositiveNumber);
    tr->add_option("--d-ff", tc.config.d_ff)->check(CLI::PositiveNumber);
    tr->add_option("--max-seq", tc.config.max_seq_len)->check(CLI::PositiveNumber);
    tr->add_option("--ln-eps", tc.config.ln_epsilon);
    tr->add_option("--pretrain-epochs", tc.pre.max_epochs)->check(CLI::PositiveNumber);
    tr->add_option("--pretrain-batch", tc.pre.batch_size)->check(CLI::PositiveNumber);
    tr->add_option("--pretrain-lr", tc.pre.learning_rate);
    tr->add_option("--pretrain-gate", tc.pre.gate_accuracy);

    // eval
    std::string ev_ckpt, ev_data, ev_out, ev_protocol = "unl", ev_split = "both";
    uint64_t ev_seed = 7;
    int ev_max_new = 4, ev_threads = 0;
    auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint under a prompt protocol");
    ev->add_option("--checkpoint", ev_ckpt)->required();
    ev->add_option("--data", ev_data)->required();
    ev->add_option("--out", ev_out);
    ev->add_option("--protocol", ev_protocol)->check(CLI::IsMember({"unl", "zero-shot", "few-shot", "icul", "all"}));
    ev->add_option("--split", ev_split)->check(CLI::IsMember({"in", "ood", "both"}));
    ev->add_option("--seed", ev_seed);
    ev->add_option("--max-new", ev_max_new)->check(CLI::PositiveNumber);
    ev->add_option("--threads", ev_threads);

    // lens
    std::string ln_ckpt, ln_data, ln_out, ln_u, ln_q, ln_trace;
    std::vector<std::string> ln_ckpts;
    bool ln_score = false;
    int ln_window = 5;
    uint64_t ln_seed = 7;
    auto* ln = app.add_subcommand("lens", "Logit-lens grids, probability traces and internal answer scores");
    ln->add_option("--checkpoint", ln_ckpt);
    ln->add_option("--checkpoints", ln_ckpts)->delimiter(',');
    ln->add_option("--data", ln_data)->required();
    ln->add_option("--out", ln_out);
    ln->add_option("--u", ln_u);
    ln->add_option("--q", ln_q);
    ln->add_flag("--score", ln_score);
    ln->add_option("--trace", ln_trace, "Token literal or 'answer'");
    ln->add_option("--window", ln_window)->check(CLI::PositiveNumber);
    ln->add_option("--seed", ln_seed);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << e.what() << "\n" << app.help() << "\n";
        return 2;
    }

    try {
        if (gen->parsed()) {
            return cmd_gen_corpus(gc_seed, gc_entities, gc_attrs, gc_entities_b, gc_attrs_b, gc_rpf, gc_ratio, gc_out);
        }
        if (tr->parsed()) {
            return cmd_train(tc);
        }
        if (ev->parsed()) {
            return cmd_eval(ev_ckpt, ev_data, ev_out, ev_protocol, ev_split, ev_seed, ev_max_new, ev_threads);
        }
        if (ln->parsed()) {
            if (ln_ckpt.empty() && ln_ckpts.empty()) {
                throw std::runtime_error("lens: pass --checkpoint or --checkpoints");
            }
            return cmd_lens(ln_ckpt.empty() ? ln_ckpts.front() : ln_ckpt, ln_ckpts, ln_data, ln_out, ln_u, ln_q,
                            ln_score, ln_trace, ln_window, ln_seed);
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
