#include <catch2/catch_amalgamated.hpp>

#include "helpers.hpp"
#include "unlearn/eval.hpp"

using namespace unlearn;

namespace {

struct RigFixture {
    testutil::SmallCorpus corpus = testutil::make_small_corpus(7, 8, 2);

    Parameters rig(const std::vector<std::pair<int, int>>& edges) const {
        return testutil::make_rigged_model(corpus.vocab.size(), edges, corpus.vocab.max_seq_len);
    }

    std::vector<UnlearnExample> pick(Kind kind, size_t n) const {
        std::vector<UnlearnExample> out;
        for (const auto& ex : corpus.examples) {
            if (ex.kind == kind && out.size() < n) {
                out.push_back(ex);
            }
        }
        return out;
    }
};

}  // namespace

TEST_CASE("greedy generation stops at an immediate EOS with an empty completion") {
    RigFixture f;
    Parameters params = f.rig({{Vocab::INST_CLOSE, Vocab::EOS}});
    auto prompt = encode(f.corpus.vocab, render_unl_prompt("u", "what?"));
    auto completion = greedy_generate(params, prompt, 4);
    CHECK(completion.empty());
}

TEST_CASE("greedy generation is deterministic and breaks ties toward the lowest id") {
    RigFixture f;
    // Two tied continuations after [/INST]: ids 7 and 12; 7 must win, and 7
    // then maps to EOS so the completion is exactly [7].
    Parameters params = f.rig({{Vocab::INST_CLOSE, 7}, {Vocab::INST_CLOSE, 12}, {7, Vocab::EOS}});
    auto prompt = encode(f.corpus.vocab, render_unl_prompt("u", "what?"));
    auto a = greedy_generate(params, prompt, 4);
    auto b = greedy_generate(params, prompt, 4);
    REQUIRE(a == b);
    REQUIRE(a.size() == 1);
    CHECK(a[0] == 7);
}

TEST_CASE("greedy generation rejects prompts that cannot fit the budget") {
    RigFixture f;
    Parameters params = f.rig({});
    std::vector<int> long_prompt(static_cast<size_t>(params.config.max_seq_len) - 1, 1);
    CHECK_THROWS_AS(greedy_generate(params, long_prompt, 4), std::length_error);
}

TEST_CASE("a model that always refuses scores perfect forget and zero retain") {
    RigFixture f;
    Parameters params = f.rig({{Vocab::INST_CLOSE, Vocab::FORGOT}, {Vocab::FORGOT, Vocab::EOS}});
    auto forgets = f.pick(Kind::Forget, 6);
    auto retains = f.pick(Kind::Retain, 6);

    CHECK(forget_accuracy(params, f.corpus.vocab, forgets) == 1.0);
    CHECK(retain_accuracy(params, f.corpus.vocab, retains) == 0.0);

    auto mixed = forgets;
    mixed.insert(mixed.end(), retains.begin(), retains.end());
    EvalContext ctx;
    EvalReport rep = evaluate_examples(params, f.corpus.vocab, mixed, ctx, "in_domain");
    CHECK(rep.forget_acc == 1.0);
    CHECK(rep.retain_acc == 0.0);
    CHECK(rep.refusal_rate_on_retain == 1.0);
    // Refusals are not hallucinations.
    CHECK(rep.hallucination_rate == 0.0);
    CHECK(rep.n_forget == 6);
    CHECK(rep.n_retain == 6);
}

TEST_CASE("answering with the true answer on a forget item is a hallucination") {
    RigFixture f;
    auto forgets = f.pick(Kind::Forget, 4);
    int ans_token = encode(f.corpus.vocab, forgets[0].gold_answer)[0];
    Parameters params = f.rig({{Vocab::INST_CLOSE, ans_token}, {ans_token, Vocab::EOS}});
    EvalContext ctx;
    EvalReport rep = evaluate_examples(params, f.corpus.vocab, forgets, ctx, "in_domain");
    CHECK(rep.forget_acc == 0.0);
    // Complementarity on forget items: accuracy + hallucination = 1.
    CHECK(rep.forget_acc + rep.hallucination_rate == 1.0);
}

TEST_CASE("retain accuracy counts exact matches only") {
    RigFixture f;
    auto retains = f.pick(Kind::Retain, 8);
    int ans_token = encode(f.corpus.vocab, retains[0].target_output)[0];
    // The rig always answers retains[0]'s answer, so exactly the examples
    // sharing that gold answer are correct.
    Parameters params = f.rig({{Vocab::INST_CLOSE, ans_token}, {ans_token, Vocab::EOS}});
    std::vector<UnlearnExample> two = {retains[0], retains[1]};
    REQUIRE(retains[0].target_output != retains[1].target_output);
    CHECK(retain_accuracy(params, f.corpus.vocab, two) == 0.5);
}

TEST_CASE("metric preconditions") {
    RigFixture f;
    Parameters params = f.rig({});
    CHECK_THROWS_AS(forget_accuracy(params, f.corpus.vocab, {}), std::runtime_error);
    CHECK_THROWS_AS(retain_accuracy(params, f.corpus.vocab, {}), std::runtime_error);
    CHECK_THROWS_AS(forget_accuracy(params, f.corpus.vocab, f.pick(Kind::Retain, 1)), std::invalid_argument);
    CHECK_THROWS_AS(retain_accuracy(params, f.corpus.vocab, f.pick(Kind::Forget, 1)), std::invalid_argument);
}

TEST_CASE("evaluate_suite produces one report per split and is repeatable") {
    RigFixture f;
    Parameters params = f.rig({{Vocab::INST_CLOSE, Vocab::FORGOT}, {Vocab::FORGOT, Vocab::EOS}});
    auto mixed = f.pick(Kind::Forget, 3);
    auto retains = f.pick(Kind::Retain, 3);
    mixed.insert(mixed.end(), retains.begin(), retains.end());
    EvalContext ctx;
    auto reports = evaluate_suite(params, f.corpus.vocab, mixed, mixed, ctx);
    REQUIRE(reports.size() == 2);
    CHECK(reports[0].split == "in_domain");
    CHECK(reports[1].split == "out_of_domain");
    auto again = evaluate_suite(params, f.corpus.vocab, mixed, mixed, ctx);
    CHECK(report_to_json(reports[0]).dump() == report_to_json(again[0]).dump());
}

TEST_CASE("protocol renderings feed the evaluator") {
    RigFixture f;
    Parameters params = f.rig({{Vocab::INST_CLOSE, Vocab::FORGOT}, {Vocab::FORGOT, Vocab::EOS}});
    auto mixed = f.pick(Kind::Forget, 2);
    auto retains = f.pick(Kind::Retain, 2);
    mixed.insert(mixed.end(), retains.begin(), retains.end());
    for (Protocol proto : {Protocol::ZeroShot, Protocol::FewShot, Protocol::Icul}) {
        EvalContext ctx = make_eval_context(proto, f.corpus.examples, f.corpus.qas, 7);
        EvalReport rep = evaluate_examples(params, f.corpus.vocab, mixed, ctx, "in_domain");
        CHECK(rep.method == protocol_name(proto));
        CHECK(rep.transcripts.size() == mixed.size());
    }
}

TEST_CASE("reports persist transcripts and summaries") {
    RigFixture f;
    auto dir = testutil::fresh_tmp_dir("eval_reports");
    Parameters params = f.rig({{Vocab::INST_CLOSE, Vocab::FORGOT}, {Vocab::FORGOT, Vocab::EOS}});
    auto mixed = f.pick(Kind::Forget, 2);
    EvalContext ctx;
    EvalReport rep = evaluate_examples(params, f.corpus.vocab, mixed, ctx, "in_domain");
    save_report(rep, (dir / "report.json").string(), (dir / "report.jsonl").string());

    auto parsed = nlohmann::json::parse(read_text_file((dir / "report.json").string()));
    CHECK(parsed.at("forget_acc").get<double>() == 1.0);
    CHECK(parsed.at("transcripts").get<std::string>() == (dir / "report.jsonl").string());
    std::string jsonl = read_text_file((dir / "report.jsonl").string());
    CHECK(std::count(jsonl.begin(), jsonl.end(), '\n') == 2);
    auto first_line = nlohmann::json::parse(jsonl.substr(0, jsonl.find('\n')));
    CHECK(first_line.at("verdict").get<std::string>() == "correct");
    CHECK(summary_csv_row(rep).starts_with("unl,in_domain,1.0000"));
}

TEST_CASE("plain qa accuracy follows the rigged mapping") {
    RigFixture f;
    int ans_token = encode(f.corpus.vocab, f.corpus.qas[0].answer)[0];
    Parameters params = f.rig({{Vocab::INST_CLOSE, ans_token}, {ans_token, Vocab::EOS}});
    std::vector<QAPair> qas = {f.corpus.qas[0]};
    CHECK(plain_qa_accuracy(params, f.corpus.vocab, qas) == 1.0);
}
