#include <catch2/catch_amalgamated.hpp>

#include "helpers.hpp"
#include "unlearn/tokenizer.hpp"

using namespace unlearn;

TEST_CASE("build_vocab assigns specials first, then lexicographic words") {
    Vocab v = build_vocab({"a b", "b c"});
    REQUIRE(v.size() == Vocab::NUM_SPECIALS + 3);
    CHECK(v.tokens[Vocab::NUM_SPECIALS] == "a");
    CHECK(v.tokens[Vocab::NUM_SPECIALS + 1] == "b");
    CHECK(v.tokens[Vocab::NUM_SPECIALS + 2] == "c");
    for (int s = 0; s < Vocab::NUM_SPECIALS; ++s) {
        CHECK(v.tokens[static_cast<size_t>(s)] == special_literals()[static_cast<size_t>(s)]);
    }
}

TEST_CASE("build_vocab is deterministic and handles an empty corpus") {
    Vocab a = build_vocab({"x y z", "y w"});
    Vocab b = build_vocab({"x y z", "y w"});
    CHECK(a.tokens == b.tokens);
    Vocab empty = build_vocab({});
    CHECK(empty.size() == Vocab::NUM_SPECIALS);
}

TEST_CASE("encode maps special literals and unknown words") {
    Vocab v = build_vocab({"Paris"});
    auto ids = encode(v, "<<UNL>> Paris <</UNL>>");
    REQUIRE(ids.size() == 3);
    CHECK(ids[0] == Vocab::UNL_OPEN);
    CHECK(ids[1] == v.id_of("Paris"));
    CHECK(ids[2] == Vocab::UNL_CLOSE);

    auto forgot = encode(v, "forgot");
    REQUIRE(forgot.size() == 1);
    CHECK(forgot[0] == Vocab::FORGOT);

    auto unk = encode(v, "Atlantis");
    REQUIRE(unk.size() == 1);
    CHECK(unk[0] == Vocab::UNK);
}

TEST_CASE("every special literal is a single token") {
    Vocab v = build_vocab({"filler words"});
    for (const char* lit : special_literals()) {
        CHECK(encode(v, lit).size() == 1);
    }
}

TEST_CASE("encode rejects overlength sequences") {
    TokenizerConfig tc;
    tc.max_seq_len = 3;
    Vocab v = build_vocab({"a b c d"}, tc);
    CHECK_THROWS_AS(encode(v, "a b c d"), std::length_error);
    CHECK(encode(v, "a b c").size() == 3);
}

TEST_CASE("decode basics and errors") {
    Vocab v = build_vocab({"Paris"});
    CHECK(decode(v, std::vector<int>{Vocab::FORGOT}) == "forgot");
    CHECK(decode(v, std::vector<int>{}) == "");
    CHECK(decode(v, std::vector<int>{v.id_of("Paris")}) == "Paris");
    CHECK_THROWS_AS(decode(v, std::vector<int>{v.size()}), std::out_of_range);
    CHECK_THROWS_AS(decode(v, std::vector<int>{-1}), std::out_of_range);
}

TEST_CASE("round-trip identities hold on random in-vocabulary data") {
    Vocab v = build_vocab({"alpha beta gamma delta epsilon zeta"});
    Rng rng(99);
    for (int trial = 0; trial < 200; ++trial) {
        size_t len = rng.below(12);
        std::vector<int> ids;
        std::string text;
        for (size_t i = 0; i < len; ++i) {
            int id = static_cast<int>(rng.below(static_cast<uint64_t>(v.size())));
            ids.push_back(id);
            if (i) {
                text += ' ';
            }
            text += v.tokens[static_cast<size_t>(id)];
        }
        CHECK(encode(v, decode(v, ids)) == ids);
        CHECK(decode(v, encode(v, text)) == text);
    }
}

TEST_CASE("vocab persistence round-trips") {
    auto dir = testutil::fresh_tmp_dir("vocab");
    Vocab v = build_vocab({"Paris Tokyo", "Berlin"});
    save_vocab(v, (dir / "vocab.json").string());
    Vocab loaded = load_vocab((dir / "vocab.json").string());
    CHECK(loaded.tokens == v.tokens);
    CHECK(loaded.max_seq_len == v.max_seq_len);
    CHECK(vocab_hash(loaded) == vocab_hash(v));
}
