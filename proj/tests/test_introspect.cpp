#include <cmath>

#include <catch2/catch_amalgamated.hpp>

#include "helpers.hpp"
#include "unlearn/introspect.hpp"

using namespace unlearn;

namespace {

Tensor make_tensor(const std::string& name, int rows, int cols, std::vector<double> w) {
    return {name, rows, cols, std::move(w)};
}

}  // namespace

TEST_CASE("logit lens matches a scalar recomputation on a hand case") {
    // d_model = 2, |V| = 3, identity-scale layer norm, explicit unembedding.
    const double eps = 1e-5;
    Tensor gamma = make_tensor("g", 2, 1, {1.0, 1.0});
    Tensor beta = make_tensor("b", 2, 1, {0.0, 0.0});
    Tensor wu = make_tensor("w_u", 3, 2, {1.0, 0.0, 0.0, 1.0, 1.0, 1.0});
    std::vector<double> h = {1.0, -1.0};

    auto probs = logit_lens(h, gamma, beta, eps, wu);

    // Independent scalar arithmetic: mean 0, variance 1, xhat = +-1/sqrt(1+eps).
    double rstd = 1.0 / std::sqrt(1.0 + eps);
    double l0 = rstd, l1 = -rstd, l2 = 0.0;
    double m = std::max({l0, l1, l2});
    double z = std::exp(l0 - m) + std::exp(l1 - m) + std::exp(l2 - m);
    REQUIRE(probs.size() == 3);
    CHECK(probs[0] == Catch::Approx(std::exp(l0 - m) / z).epsilon(1e-12));
    CHECK(probs[1] == Catch::Approx(std::exp(l1 - m) / z).epsilon(1e-12));
    CHECK(probs[2] == Catch::Approx(std::exp(l2 - m) / z).epsilon(1e-12));
}

TEST_CASE("logit lens yields uniform output for equal logits and normalizes") {
    Tensor gamma = make_tensor("g", 2, 1, {1.0, 1.0});
    Tensor beta = make_tensor("b", 2, 1, {0.0, 0.0});
    // Every vocab row identical: logits equal, softmax uniform.
    Tensor wu = make_tensor("w_u", 3, 2, {0.5, 0.25, 0.5, 0.25, 0.5, 0.25});
    auto probs = logit_lens(std::vector<double>{0.3, -2.0}, gamma, beta, 1e-5, wu);
    for (double p : probs) {
        CHECK(p == Catch::Approx(1.0 / 3.0).epsilon(1e-12));
    }

    Rng rng(3);
    Tensor wu_rand = make_tensor("w_u", 7, 2, {});
    for (int i = 0; i < 14; ++i) {
        wu_rand.w.push_back(rng.gauss());
    }
    auto probs2 = logit_lens(std::vector<double>{rng.gauss(), rng.gauss()}, gamma, beta, 1e-5, wu_rand);
    double sum = 0.0;
    for (double p : probs2) {
        sum += p;
    }
    CHECK(std::fabs(sum - 1.0) < 1e-6);

    CHECK_THROWS_AS(logit_lens(std::vector<double>{std::nan(""), 0.0}, gamma, beta, 1e-5, wu),
                    std::runtime_error);
}

TEST_CASE("lens grid matches the output head at the last layer and position") {
    ModelConfig cfg = testutil::probe_config(40, 3, 16, 2, 32);
    Parameters params = init_model(cfg, 11);
    Rng rng(5);
    for (int trial = 0; trial < 10; ++trial) {
        std::vector<int> tokens;
        int len = 1 + static_cast<int>(rng.below(9));
        for (int i = 0; i < len; ++i) {
            tokens.push_back(static_cast<int>(rng.below(static_cast<uint64_t>(cfg.vocab_size))));
        }
        LensTrace trace = lens_grid(params, tokens, 5);
        CHECK(trace.n_layers == cfg.n_layers);
        CHECK(static_cast<int>(trace.positions.size()) == std::min(5, len));

        auto head = next_token_distribution(params, tokens);
        const double* lens_last = trace.row(cfg.n_layers - 1, static_cast<int>(trace.positions.size()) - 1);
        for (int v = 0; v < cfg.vocab_size; ++v) {
            REQUIRE(std::fabs(lens_last[v] - head[static_cast<size_t>(v)]) <= 1e-6);
        }
        for (int l = 0; l < trace.n_layers; ++l) {
            for (size_t pi = 0; pi < trace.positions.size(); ++pi) {
                double sum = 0.0;
                for (int v = 0; v < cfg.vocab_size; ++v) {
                    sum += trace.row(l, static_cast<int>(pi))[v];
                }
                REQUIRE(std::fabs(sum - 1.0) <= 1e-6);
            }
        }
    }
}

TEST_CASE("lens grid over a one-token prompt has shape layers x 1 x vocab") {
    ModelConfig cfg = testutil::probe_config(25, 4, 16, 2, 32);
    Parameters params = init_model(cfg, 2);
    LensTrace trace = lens_grid(params, std::vector<int>{3}, 5);
    CHECK(trace.n_layers == 4);
    CHECK(trace.positions == std::vector<int>{0});
    CHECK(trace.dist.size() == static_cast<size_t>(4) * 1 * 25);
}

TEST_CASE("internal answer score counts matching layers") {
    LensTrace trace;
    trace.n_layers = 4;
    trace.vocab = 5;
    trace.positions = {9};
    trace.dist.assign(static_cast<size_t>(4) * 1 * 5, 0.1);
    auto set_argmax = [&](int layer, int token) {
        trace.dist[static_cast<size_t>(layer) * 5 + static_cast<size_t>(token)] = 0.9;
    };
    set_argmax(0, 2);
    set_argmax(1, 3);
    set_argmax(2, 3);
    set_argmax(3, 0);

    auto res = internal_answer_score(trace, 3, 9);
    CHECK(res.raw == 2);
    CHECK(res.normalized == 0.5);
    CHECK(res.answer_token == 3);

    auto none = internal_answer_score(trace, 4, 9);
    CHECK(none.raw == 0);
    CHECK(none.normalized == 0.0);

    CHECK_THROWS_AS(internal_answer_score(trace, 3, 8), std::invalid_argument);
}

TEST_CASE("internal answer score stays in bounds and ties break to lowest id") {
    LensTrace trace;
    trace.n_layers = 2;
    trace.vocab = 4;
    trace.positions = {0};
    // Equal mass on ids 1 and 3 in both layers: argmax must pick 1.
    trace.dist = {0.1, 0.4, 0.1, 0.4, 0.1, 0.4, 0.1, 0.4};
    CHECK(internal_answer_score(trace, 1, 0).raw == 2);
    CHECK(internal_answer_score(trace, 3, 0).raw == 0);
    auto res = internal_answer_score(trace, 1, 0);
    CHECK(res.normalized >= 0.0);
    CHECK(res.normalized <= 1.0);
}

TEST_CASE("token probability traces average with right alignment and masking") {
    ModelConfig cfg = testutil::probe_config(30, 3, 16, 2, 32);
    Parameters params = init_model(cfg, 8);

    std::vector<std::vector<int>> prompts = {{1, 2, 3, 4, 5, 6, 7}};
    TraceMatrix single = token_prob_trace(params, prompts, 9, 1);
    LensTrace trace = lens_grid(params, prompts[0], 1);
    for (int l = 0; l < 3; ++l) {
        CHECK(single.at(l, 0) == Catch::Approx(trace.row(l, 0)[9]).epsilon(1e-12));
    }

    // A two-token prompt only reaches the last two of five columns.
    std::vector<std::vector<int>> mixed = {{1, 2}, {1, 2, 3, 4, 5, 6, 7}};
    TraceMatrix m = token_prob_trace(params, mixed, 9, 5);
    CHECK(m.count == std::vector<int>{1, 1, 1, 2, 2});
    for (int l = 0; l < m.n_layers; ++l) {
        for (int c = 0; c < m.window; ++c) {
            CHECK(m.at(l, c) >= 0.0);
            CHECK(m.at(l, c) <= 1.0);
        }
    }
    CHECK_THROWS_AS(token_prob_trace(params, {}, 9, 5), std::invalid_argument);
}

TEST_CASE("heatmap CSV round-trips and SVG has one rect per cell") {
    auto dir = testutil::fresh_tmp_dir("heatmap");
    std::vector<std::vector<double>> rows = {{0.25, 0.5}, {0.75, 1.0}};
    std::string csv = matrix_to_csv(rows, {"p0", "p1"}, {"1", "2"});
    // Header plus two data rows.
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 3);
    CHECK(csv.starts_with("layer,p0,p1\n"));
    auto parsed = parse_matrix_csv(csv);
    REQUIRE(parsed == rows);

    std::string svg = matrix_to_svg(rows, {"p0", "p1"}, {"1", "2"});
    size_t rects = 0, pos = 0;
    while ((pos = svg.find("<rect", pos)) != std::string::npos) {
        ++rects;
        pos += 5;
    }
    CHECK(rects == 4);
    CHECK(svg.find("layer") != std::string::npos);
    CHECK(svg.find("token position") != std::string::npos);
}

TEST_CASE("lens grid export writes csv, svg and the argmax sidecar") {
    auto dir = testutil::fresh_tmp_dir("lens_export");
    auto corpus = testutil::make_small_corpus(7, 4, 2);
    Parameters params = testutil::make_rigged_model(corpus.vocab.size(), {{Vocab::INST_CLOSE, Vocab::FORGOT}},
                                                    corpus.vocab.max_seq_len);
    auto tokens = encode(corpus.vocab, render_unl_prompt("u", "what now?"));
    LensTrace trace = lens_grid(params, tokens, 5);
    export_lens_grid(trace, corpus.vocab, tokens, (dir / "grid").string());
    auto sidecar = nlohmann::json::parse(read_text_file((dir / "grid_argmax.json").string()));
    REQUIRE(sidecar.is_array());
    CHECK(sidecar.size() == 1);  // one layer in the rigged model
    auto csv = read_text_file((dir / "grid.csv").string());
    CHECK(parse_matrix_csv(csv).size() == 1);
    // The final position's argmax decodes to the forget marker.
    auto last_cell = sidecar[0][sidecar[0].size() - 1];
    CHECK(last_cell.at("argmax_token").get<std::string>() == "forgot");
}
