#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <set>

#include "doctest.h"
#include "mixmatch/rng.hpp"
#include "mixmatch/vocab.hpp"

using namespace mixmatch;

namespace {

std::vector<std::string> synthetic_sentences(int n, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<std::string> docs;
    for (int i = 0; i < n; ++i) {
        std::string s;
        const int len = 4 + rng.below_int(6);
        for (int k = 0; k < len; ++k) {
            if (k) s += ' ';
            s += "tok" + std::to_string(rng.below(400));
        }
        s += " .";
        docs.push_back(std::move(s));
    }
    return docs;
}

}  // namespace

TEST_CASE("build keeps word counts and specials") {
    const Vocabulary v = Vocabulary::build({"a b", "a"}, 16);
    REQUIRE(v.id_of("a").has_value());
    REQUIRE(v.id_of("b").has_value());
    CHECK(v.frequency(*v.id_of("a")) == 2);
    CHECK(v.frequency(*v.id_of("b")) == 1);

    int specials = 0;
    for (const char* s : {"[PAD]", "[UNK]", "[CLS]", "[MASK]"}) {
        int count = 0;
        for (int id = 0; id < v.size(); ++id)
            if (v.token(id) == s) ++count;
        CHECK(count == 1);
        specials += count;
    }
    CHECK(specials == 4);
    CHECK(v.specials().pad == 0);
    CHECK(v.specials().unk == 1);
    CHECK(v.specials().cls == 2);
    CHECK(v.specials().mask == 3);
}

TEST_CASE("build rejects bad inputs") {
    CHECK_THROWS_WITH_AS(Vocabulary::build({}, 100), "empty corpus", std::invalid_argument);
    CHECK_THROWS_AS(Vocabulary::build({"a b"}, 8), std::invalid_argument);
}

TEST_CASE("ids are dense over a large synthetic build") {
    const Vocabulary v = Vocabulary::build(synthetic_sentences(1000, 3), 2000);
    CHECK(v.size() >= 16);
    CHECK(v.size() <= 2000);
    for (int id = 0; id < v.size(); ++id) {
        const auto round = v.id_of(v.token(id));
        REQUIRE(round.has_value());
        CHECK(*round == id);
    }
}

TEST_CASE("build over budget harvests continuation units") {
    std::vector<std::string> docs;
    for (int i = 0; i < 10; ++i) docs.push_back("play");
    for (int i = 0; i < 5; ++i) docs.push_back("aaa15");
    for (int w = 1; w <= 14; ++w)
        for (int i = 0; i < 5; ++i)
            docs.push_back("aaa" + std::string(w < 10 ? "0" : "") + std::to_string(w));
    const Vocabulary v = Vocabulary::build(docs, 16);
    CHECK(v.size() <= 16);
    bool has_continuation = false;
    for (int id = 0; id < v.size(); ++id)
        has_continuation = has_continuation || v.classify(id) == TokenClass::continuation;
    CHECK(has_continuation);
}

TEST_CASE("tokenize basics") {
    const Vocabulary v = Vocabulary::build({"a b", "a"}, 16);
    CHECK(v.tokenize("a b") == std::vector<int>{*v.id_of("a"), *v.id_of("b")});
    CHECK(v.tokenize("").empty());
    CHECK(v.tokenize("zebra") == std::vector<int>{v.specials().unk});
}

TEST_CASE("tokenize greedy longest match over subword units") {
    const Vocabulary v = Vocabulary::from_tokens({"play", "##ing", "playa", "##in"});
    const auto ids = v.tokenize("playing");
    REQUIRE(ids.size() == 2);
    CHECK(v.token(ids[0]) == "play");
    CHECK(v.token(ids[1]) == "##ing");
    // longest match prefers "playa" when the remainder still decomposes
    const auto ids2 = v.tokenize("playain");
    REQUIRE(ids2.size() == 2);
    CHECK(v.token(ids2[0]) == "playa");
    CHECK(v.token(ids2[1]) == "##in");
}

TEST_CASE("detokenize round trip up to whitespace") {
    const Vocabulary v = Vocabulary::build({"the cat sat on the mat .", "a cat ."}, 32);
    const std::string text = "the  cat sat  on the mat .";
    CHECK(v.detokenize(v.tokenize(text)) == "the cat sat on the mat .");
}

TEST_CASE("token classes") {
    const Vocabulary v = Vocabulary::from_tokens({"towels", "##ing", ".", ",", "1974", "a1", "!?"});
    CHECK(v.classify(*v.id_of("towels")) == TokenClass::word);
    CHECK(v.classify(*v.id_of("##ing")) == TokenClass::continuation);
    CHECK(v.classify(*v.id_of(".")) == TokenClass::punctuation);
    CHECK(v.classify(*v.id_of(",")) == TokenClass::punctuation);
    CHECK(v.classify(*v.id_of("!?")) == TokenClass::punctuation);
    CHECK(v.classify(*v.id_of("1974")) == TokenClass::numeric);
    CHECK(v.classify(*v.id_of("a1")) == TokenClass::word);
    CHECK(v.classify(v.specials().mask) == TokenClass::special);
    CHECK_THROWS_AS(v.classify(v.size()), std::invalid_argument);
    CHECK_THROWS_AS(v.classify(-1), std::invalid_argument);
}

TEST_CASE("token classes partition the vocabulary") {
    const Vocabulary v = Vocabulary::build(synthetic_sentences(200, 5), 300);
    int counts[5] = {0, 0, 0, 0, 0};
    for (int id = 0; id < v.size(); ++id) ++counts[static_cast<int>(v.classify(id))];
    CHECK(counts[0] + counts[1] + counts[2] + counts[3] + counts[4] == v.size());
    CHECK(counts[static_cast<int>(TokenClass::special)] == 4);
}

TEST_CASE("frequency tiers at the extremes and the median") {
    // word tokens w0..w9 with frequencies 1..10
    std::vector<std::string> tokens;
    std::vector<std::int64_t> freqs;
    for (int i = 0; i < 10; ++i) {
        tokens.push_back("w" + std::to_string(i));
        freqs.push_back(i + 1);
    }
    const Vocabulary v = Vocabulary::from_tokens(tokens, freqs);

    CHECK(v.frequency_tier(*v.id_of("w9"), 0.1, 0.9) == Tier::high);
    CHECK(v.frequency_tier(*v.id_of("w0"), 0.1, 0.9) == Tier::low);

    // nearest-rank quantiles (0.25, 0.75) over {1..10} give thresholds 3 and
    // 8; frequency 5 sits strictly between them
    CHECK(v.frequency_tier(*v.id_of("w4"), 0.25, 0.75) == Tier::mid);
    CHECK(v.frequency_tier(*v.id_of("w2"), 0.25, 0.75) == Tier::low);
    CHECK(v.frequency_tier(*v.id_of("w8"), 0.25, 0.75) == Tier::high);

    CHECK_THROWS_WITH_AS(v.frequency_tier(v.specials().mask, 0.2, 0.8), "untierable token class",
                         std::invalid_argument);
    CHECK_THROWS_AS(v.frequency_tier(*v.id_of("w0"), 0.8, 0.2), std::invalid_argument);
}

TEST_CASE("frequency tier is monotone in frequency") {
    Rng rng(17);
    for (int trial = 0; trial < 20; ++trial) {
        std::vector<std::string> tokens;
        std::vector<std::int64_t> freqs;
        const int n = 5 + rng.below_int(40);
        for (int i = 0; i < n; ++i) {
            tokens.push_back("w" + std::to_string(i));
            freqs.push_back(static_cast<std::int64_t>(rng.below(500)));
        }
        const Vocabulary v = Vocabulary::from_tokens(tokens, freqs);
        for (int a = 0; a < n; ++a) {
            for (int b = 0; b < n; ++b) {
                const int ia = *v.id_of(tokens[static_cast<std::size_t>(a)]);
                const int ib = *v.id_of(tokens[static_cast<std::size_t>(b)]);
                if (v.frequency(ia) >= v.frequency(ib))
                    CHECK(static_cast<int>(v.frequency_tier(ia, 0.2, 0.8)) >=
                          static_cast<int>(v.frequency_tier(ib, 0.2, 0.8)));
            }
        }
    }
}

TEST_CASE("tokenize is deterministic across calls") {
    const Vocabulary v = Vocabulary::build(synthetic_sentences(100, 9), 300);
    const std::string text = "tok1 tok250 tok399 unknownword tok1";
    CHECK(v.tokenize(text) == v.tokenize(text));
}

TEST_CASE("save and load round trip") {
    const Vocabulary v = Vocabulary::build(synthetic_sentences(50, 11), 200);
    const auto path = std::filesystem::temp_directory_path() / "mixmatch_vocab_test.txt";
    v.save(path.string());
    const Vocabulary loaded = Vocabulary::load(path.string());
    REQUIRE(loaded.size() == v.size());
    for (int id = 0; id < v.size(); ++id) {
        CHECK(loaded.token(id) == v.token(id));
        CHECK(loaded.frequency(id) == v.frequency(id));
    }
    CHECK(loaded.specials() == v.specials());
    std::filesystem::remove(path);
}
