#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "unlearn/corpus.hpp"
#include "unlearn/model.hpp"
#include "unlearn/prompts.hpp"
#include "unlearn/tokenizer.hpp"

namespace testutil {

using namespace unlearn;

inline std::string source_dir() { return UNLEARN_SOURCE_DIR; }

inline std::filesystem::path fresh_tmp_dir(const std::string& tag) {
    auto dir = std::filesystem::temp_directory_path() / ("unlearn_test_" + tag);
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

// Two-entity fixture mirroring the Eiffel Tower / Paris / Japan method
// overview example.
inline std::vector<QAPair> landmark_qas() {
    return {
        {"Where would you find the Eiffel Tower?", "Paris", "A:eiffel:location", Domain::A},
        {"Where would you find Mount Fuji?", "Japan", "A:fuji:location", Domain::A},
    };
}

// Small deterministic corpus plus a vocabulary covering it and the protocol
// skeletons.
struct SmallCorpus {
    FactWorld world;
    std::vector<QAPair> qas;
    std::vector<UnlearnExample> examples;
    Vocab vocab;
};

inline SmallCorpus make_small_corpus(uint64_t seed = 7, int entities = 12, int attrs = 3,
                                     int max_seq_len = 192) {
    SmallCorpus c;
    c.world = generate_fact_world(seed, entities, attrs, Domain::A);
    c.qas = derive_qa_pairs(c.world, default_templates(Domain::A));
    c.examples = build_examples(c.qas, seed, 1);
    std::vector<std::string> texts = protocol_vocab_texts();
    for (const auto& qa : c.qas) {
        texts.push_back(qa.question);
        texts.push_back(qa.answer);
    }
    TokenizerConfig tc;
    tc.max_seq_len = max_seq_len;
    c.vocab = build_vocab(texts, tc);
    return c;
}

// Probe-scale model config for gradient checks and fast tests.
inline ModelConfig probe_config(int vocab_size, int n_layers = 2, int d_model = 16, int n_heads = 2, int d_ff = 32,
                                int max_seq_len = 64) {
    ModelConfig cfg;
    cfg.n_layers = n_layers;
    cfg.d_model = d_model;
    cfg.n_heads = n_heads;
    cfg.d_ff = d_ff;
    cfg.vocab_size = vocab_size;
    cfg.max_seq_len = max_seq_len;
    return cfg;
}

// A model whose next-token prediction is a pure function of the last input
// token: every block contribution is zeroed so the residual stream is the
// token embedding, and w_u encodes the wanted token -> token edges. Several
// edges may share a source to force argmax ties.
inline Parameters make_rigged_model(int vocab_size, const std::vector<std::pair<int, int>>& edges,
                                    int max_seq_len = 64) {
    ModelConfig cfg;
    cfg.n_layers = 1;
    cfg.d_model = vocab_size;
    cfg.n_heads = 1;
    cfg.d_ff = 4;
    cfg.vocab_size = vocab_size;
    cfg.max_seq_len = max_seq_len;
    Parameters p = init_model(cfg, 1);
    for (auto& t : p.tensors) {
        if (t.name != "ln_f.g" && !t.name.ends_with("ln1.g") && !t.name.ends_with("ln2.g")) {
            std::fill(t.w.begin(), t.w.end(), 0.0);
        }
    }
    Tensor& emb = p.at("tok_emb");
    for (int x = 0; x < vocab_size; ++x) {
        emb.w[static_cast<size_t>(x) * vocab_size + x] = 8.0;
    }
    Tensor& wu = p.at("w_u");
    for (auto [src, dst] : edges) {
        wu.w[static_cast<size_t>(dst) * vocab_size + src] = 1.0;
    }
    return p;
}

}  // namespace testutil
