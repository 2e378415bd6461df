#include <algorithm>
#include <set>

#include "doctest.h"
#include "mixmatch/canary.hpp"
#include "mixmatch/corpus.hpp"

using namespace mixmatch;

namespace {

// deterministic fixture vocabulary with populated tiers and punctuation
const Vocabulary& fixture_vocab() {
    static const Vocabulary v = [] {
        SyntheticCorpusParams p;
        p.num_classes = 4;
        p.examples_per_class = 400;
        p.sentence_len_min = 5;
        p.sentence_len_max = 9;
        p.skew = 1.0;
        p.vocab_size = 300;
        p.seed = 1234;
        return generate_corpus(p).vocab;
    }();
    return v;
}

CanarySpec base_spec() {
    CanarySpec spec;
    spec.kind = CanaryKind::random;
    spec.tier = Tier::high;
    spec.length = 5;
    spec.target_position = 4;
    spec.label = 1;
    spec.repetitions = 1;
    spec.seed = 42;
    return spec;
}

}  // namespace

TEST_CASE("random canary matches its tier and shape") {
    const Vocabulary& vocab = fixture_vocab();
    const CanarySpec spec = base_spec();
    const Canary c = generate_canary(spec, vocab);

    REQUIRE(c.token_ids.size() == 6);  // 5 tokens plus the period
    CHECK(vocab.token(c.token_ids.back()) == ".");
    CHECK(c.token_ids[static_cast<std::size_t>(c.target_index)] == c.true_token);
    const TokenClass target_class = vocab.classify(c.true_token);
    CHECK((target_class == TokenClass::word || target_class == TokenClass::numeric));
    for (int i = 0; i < 5; ++i) {
        if (i == c.target_index) continue;
        const int tok = c.token_ids[static_cast<std::size_t>(i)];
        CHECK(vocab.classify(tok) == TokenClass::word);
        CHECK(vocab.frequency_tier(tok, spec.low_quantile, spec.high_quantile) == Tier::high);
    }
    std::set<int> distinct(c.token_ids.begin(), c.token_ids.end() - 1);
    CHECK(distinct.size() == 5);  // sampled without replacement
}

TEST_CASE("length-1 canary is just the target and the period") {
    CanarySpec spec = base_spec();
    spec.length = 1;
    spec.target_position = 0;
    const Canary c = generate_canary(spec, fixture_vocab());
    REQUIRE(c.token_ids.size() == 2);
    CHECK(c.token_ids[0] == c.true_token);
    CHECK(fixture_vocab().token(c.token_ids[1]) == ".");
}

TEST_CASE("canary generation is deterministic in the seed") {
    const CanarySpec spec = base_spec();
    const Canary a = generate_canary(spec, fixture_vocab());
    const Canary b = generate_canary(spec, fixture_vocab());
    CHECK(a.token_ids == b.token_ids);
    CHECK(a.true_token == b.true_token);
    CHECK(a.label == b.label);

    CanarySpec other = spec;
    other.seed = 43;
    const Canary d = generate_canary(other, fixture_vocab());
    CHECK(a.token_ids != d.token_ids);
}

TEST_CASE("target tier override controls only the target") {
    CanarySpec spec = base_spec();
    spec.tier = Tier::low;
    spec.target_tier_override = Tier::high;
    const Vocabulary& vocab = fixture_vocab();
    const Canary c = generate_canary(spec, vocab);
    CHECK(vocab.frequency_tier(c.true_token, spec.low_quantile, spec.high_quantile) == Tier::high);
    for (int i = 0; i < spec.length; ++i) {
        if (i == c.target_index) continue;
        CHECK(vocab.frequency_tier(c.token_ids[static_cast<std::size_t>(i)], spec.low_quantile,
                                   spec.high_quantile) == Tier::low);
    }
}

TEST_CASE("organic canaries are deterministic and tier-constrained") {
    CanarySpec spec = base_spec();
    spec.kind = CanaryKind::organic;
    const Vocabulary& vocab = fixture_vocab();
    const Canary a = generate_canary(spec, vocab);
    const Canary b = generate_canary(spec, vocab);
    CHECK(a.token_ids == b.token_ids);
    for (int i = 0; i < spec.length; ++i) {
        if (i == a.target_index) continue;
        CHECK(vocab.frequency_tier(a.token_ids[static_cast<std::size_t>(i)], spec.low_quantile,
                                   spec.high_quantile) == spec.tier);
    }
}

TEST_CASE("canaries round trip through the tokenizer without UNK") {
    const Vocabulary& vocab = fixture_vocab();
    for (const CanaryKind kind : {CanaryKind::random, CanaryKind::organic}) {
        for (const Tier tier : {Tier::low, Tier::high}) {
            CanarySpec spec = base_spec();
            spec.kind = kind;
            spec.tier = tier;
            spec.seed = 100 + static_cast<std::uint64_t>(tier) * 7 +
                        (kind == CanaryKind::organic ? 1000 : 0);
            const Canary c = generate_canary(spec, vocab);
            const auto round = vocab.tokenize(vocab.detokenize(c.token_ids));
            CHECK(round == c.token_ids);
            CHECK(std::count(round.begin(), round.end(), vocab.specials().unk) == 0);
        }
    }
}

TEST_CASE("tier exhaustion is reported") {
    const Vocabulary tiny = Vocabulary::from_tokens({"w0", "w1", "w2", "."}, {9, 5, 1, 4});
    CanarySpec spec = base_spec();
    spec.length = 4;
    spec.target_position = 3;
    spec.tier = Tier::low;
    try {
        generate_canary(spec, tiny);
        FAIL("expected tier exhaustion");
    } catch (const std::runtime_error& e) {
        CHECK(std::string(e.what()).find("insufficient tier population") != std::string::npos);
    }
}

TEST_CASE("spec validation") {
    CanarySpec spec = base_spec();
    spec.repetitions = 0;
    CHECK_THROWS_AS(spec.validate(), std::invalid_argument);
    spec = base_spec();
    spec.target_position = 5;
    CHECK_THROWS_AS(spec.validate(), std::invalid_argument);
    spec = base_spec();
    spec.label = -1;
    CHECK_THROWS_AS(spec.validate(), std::invalid_argument);
}

TEST_CASE("label variants echo the pattern and differ only at the target") {
    const Vocabulary& vocab = fixture_vocab();
    std::vector<int> numerics;
    for (int id = 0; id < vocab.size() && numerics.size() < 6; ++id)
        if (vocab.classify(id) == TokenClass::numeric) numerics.push_back(id);
    REQUIRE(numerics.size() == 6);

    CanarySpec spec = base_spec();
    spec.kind = CanaryKind::organic;
    spec.tier = Tier::low;
    Canary base = generate_canary(spec, vocab);
    base.token_ids[static_cast<std::size_t>(base.target_index)] = numerics[5];
    base.true_token = numerics[5];

    const std::vector<int> variants(numerics.begin(), numerics.begin() + 5);
    const auto distinct = make_label_variants(base, variants, LabelPattern::distinct(5), vocab);
    REQUIRE(distinct.size() == 5);
    for (int i = 0; i < 5; ++i) {
        CHECK(distinct[static_cast<std::size_t>(i)].label == i);
        CHECK(distinct[static_cast<std::size_t>(i)].true_token == variants[static_cast<std::size_t>(i)]);
        for (std::size_t k = 0; k < base.token_ids.size(); ++k) {
            if (static_cast<int>(k) == base.target_index) continue;
            CHECK(distinct[static_cast<std::size_t>(i)].token_ids[k] == base.token_ids[k]);
        }
    }

    const auto same = make_label_variants(base, {variants[0]}, LabelPattern::same(3, 1), vocab);
    REQUIRE(same.size() == 1);
    CHECK(same[0].label == 3);

    const auto mixed = make_label_variants(base, variants, LabelPattern::mixed_pairs(5), vocab);
    std::multiset<int> labels;
    for (const auto& c : mixed) labels.insert(c.label);
    CHECK(labels == std::multiset<int>{0, 0, 1, 1, 2});

    CHECK_THROWS_WITH_AS(
        make_label_variants(base, {base.true_token}, LabelPattern::same(0, 1), vocab),
        "degenerate variant", std::invalid_argument);
}

TEST_CASE("label pattern validation") {
    LabelPattern p = LabelPattern::distinct(5);
    CHECK_THROWS_AS(p.validate(5, 3), std::invalid_argument);  // needs >= 5 classes
    p.validate(5, 5);
    LabelPattern q = LabelPattern::same(1, 4);
    q.assignment[2] = 2;
    CHECK_THROWS_AS(q.validate(4, 5), std::invalid_argument);
}

TEST_CASE("concatenation joins with 'and' and retargets the last token") {
    const Vocabulary& vocab = fixture_vocab();
    CanarySpec spec = base_spec();
    const Canary a = generate_canary(spec, vocab);
    spec.seed = 77;
    const Canary b = generate_canary(spec, vocab);

    const Canary joined = concatenate_canaries(a, b, vocab, 16);
    REQUIRE(joined.token_ids.size() == 12);  // 5 + "and" + 5 + "."
    CHECK(vocab.token(joined.token_ids[5]) == "and");
    CHECK(vocab.token(joined.token_ids.back()) == ".");
    CHECK(joined.target_index == 10);
    CHECK(joined.true_token == b.token_ids[4]);
    CHECK(joined.label == a.label);
    CHECK(joined.spec.length == 11);

    const Canary joined2 = concatenate_canaries(a, b, vocab, 16);
    CHECK(joined2.token_ids == joined.token_ids);

    CanarySpec solo = base_spec();
    solo.length = 1;
    solo.target_position = 0;
    solo.seed = 99;
    const Canary single = generate_canary(solo, vocab);
    const Canary with_single = concatenate_canaries(a, single, vocab, 16);
    CHECK(with_single.true_token == single.token_ids[0]);

    CHECK_THROWS_AS(concatenate_canaries(a, b, vocab, 12), std::invalid_argument);
    CanarySpec other_kind = base_spec();
    other_kind.kind = CanaryKind::organic;
    const Canary organic = generate_canary(other_kind, vocab);
    CHECK_THROWS_AS(concatenate_canaries(a, organic, vocab, 16), std::invalid_argument);
}

TEST_CASE("injection places exact copies and keeps the originals") {
    const Vocabulary& vocab = fixture_vocab();
    std::vector<LabeledExample> dataset;
    for (int i = 0; i < 40; ++i) dataset.push_back({{5 + i, 6 + i}, i % 3});

    CanarySpec spec = base_spec();
    spec.repetitions = 5;
    Canary c = generate_canary(spec, vocab);
    spec.seed = 1177;
    spec.repetitions = 2;
    Canary d = generate_canary(spec, vocab);

    const InjectionResult result = inject(dataset, {c, d}, 31);
    CHECK(result.dataset.size() == dataset.size() + 7);

    REQUIRE(result.manifest.size() == 2);
    CHECK(result.manifest[0].indices.size() == 5);
    CHECK(result.manifest[1].indices.size() == 2);
    for (std::size_t idx : result.manifest[0].indices) {
        CHECK(result.dataset[idx].tokens == c.token_ids);
        CHECK(result.dataset[idx].label == c.label);
    }
    for (std::size_t idx : result.manifest[1].indices) {
        CHECK(result.dataset[idx].tokens == d.token_ids);
        CHECK(result.dataset[idx].label == d.label);
    }

    // originals survive in order as a subsequence
    std::set<std::size_t> taken;
    for (const auto& rec : result.manifest) taken.insert(rec.indices.begin(), rec.indices.end());
    std::size_t src = 0;
    for (std::size_t i = 0; i < result.dataset.size(); ++i) {
        if (taken.count(i)) continue;
        CHECK(result.dataset[i].tokens == dataset[src].tokens);
        CHECK(result.dataset[i].label == dataset[src].label);
        ++src;
    }
    CHECK(src == dataset.size());

    // count occurrences of the canary as exact example matches
    int copies = 0;
    for (const auto& ex : result.dataset)
        if (ex.tokens == c.token_ids && ex.label == c.label) ++copies;
    CHECK(copies == 5);

    const InjectionResult again = inject(dataset, {c, d}, 31);
    CHECK(again.manifest[0].indices == result.manifest[0].indices);
    const InjectionResult shifted = inject(dataset, {c, d}, 32);
    CHECK(shifted.manifest[0].indices != result.manifest[0].indices);
}
