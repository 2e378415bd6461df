#include <algorithm>

#include "doctest.h"
#include "mixmatch/metrics.hpp"
#include "mixmatch/rng.hpp"

using namespace mixmatch;

namespace {

RankedCandidates ranked_of(std::vector<int> tokens) {
    RankedCandidates r;
    r.generator = Generator::frankenstein;
    r.score_kind = ScoreKind::cls_loss;
    double s = 0.0;
    for (int t : tokens) r.entries.push_back({t, s += 0.25});
    return r;
}

AttackResult result_of(const std::string& id, Generator g, int top_k, int beam, bool found,
                       std::uint64_t seed) {
    AttackResult r;
    r.canary_id = id;
    r.generator = g;
    r.top_k = top_k;
    r.beam_size = beam;
    r.found = found;
    r.seed = seed;
    return r;
}

}  // namespace

TEST_CASE("beam size is the one-based rank or a miss") {
    const auto ranked = ranked_of({7, 3, 9});
    CHECK(*beam_size(ranked, 7) == 1);
    CHECK(*beam_size(ranked, 9) == 3);
    CHECK_FALSE(beam_size(ranked, 42).has_value());
}

TEST_CASE("beam size equals one plus the number of entries strictly before the token") {
    Rng rng(5);
    for (int trial = 0; trial < 50; ++trial) {
        const int n = 1 + rng.below_int(200);
        auto ids = rng.sample_without_replacement(1000, n);
        const auto ranked = ranked_of(ids);
        const int probe = ids[static_cast<std::size_t>(rng.below(ids.size()))];
        int before = 0;
        for (int id : ids) {
            if (id == probe) break;
            ++before;
        }
        CHECK(*beam_size(ranked, probe) == before + 1);
    }
}

TEST_CASE("beam size handles result-table-scale rankings") {
    std::vector<int> ids(22413);
    for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = static_cast<int>(i);
    const int true_token = ids[3389];
    const auto ranked = ranked_of(ids);
    CHECK(*beam_size(ranked, true_token) == 3390);
    CHECK(ranked.entries.size() == 22413);
}

TEST_CASE("attack results record the miss sentinel") {
    const auto ranked = ranked_of({7, 3, 9});
    const AttackResult hit = make_attack_result("c", ranked, 3, 10, 1);
    CHECK(hit.found);
    CHECK(hit.beam_size == 2);
    CHECK(hit.top_k == 10);
    const AttackResult miss = make_attack_result("c", ranked, 42, 10, 1);
    CHECK_FALSE(miss.found);
    CHECK(miss.beam_size == 4);  // list size + 1
}

TEST_CASE("aggregation means and found handling") {
    const auto single = aggregate(std::vector<AttackResult>{
        result_of("c", Generator::exhaustive, 100, 7, true, 1)});
    CHECK(single.mean_top_k == 100.0);
    CHECK(single.mean_beam_size == 7.0);
    CHECK(single.found_rate == 1.0);
    CHECK(single.run_count == 1);

    const auto pair = aggregate(std::vector<AttackResult>{
        result_of("c", Generator::frankenstein, 50, 2, true, 1),
        result_of("c", Generator::frankenstein, 60, 4, true, 2)});
    CHECK(pair.mean_beam_size == 3.0);
    CHECK(pair.mean_top_k == 55.0);

    const auto with_miss = aggregate(std::vector<AttackResult>{
        result_of("c", Generator::frankenstein, 50, 5, true, 1),
        result_of("c", Generator::frankenstein, 50, 31, false, 2)});
    CHECK(with_miss.mean_beam_size == 5.0);  // misses excluded from the mean
    CHECK(with_miss.found_rate == 0.5);
    CHECK(with_miss.any_found);

    const auto none_found = aggregate(std::vector<AttackResult>{
        result_of("c", Generator::frankenstein, 50, 31, false, 1)});
    CHECK_FALSE(none_found.any_found);
    CHECK(none_found.found_rate == 0.0);
}

TEST_CASE("aggregation rejects empty and mixed groups") {
    CHECK_THROWS_AS(aggregate(std::vector<AttackResult>{}), std::invalid_argument);
    CHECK_THROWS_WITH_AS(
        aggregate(std::vector<AttackResult>{result_of("a", Generator::exhaustive, 1, 1, true, 1),
                                            result_of("b", Generator::exhaustive, 1, 1, true, 1)}),
        "heterogeneous result group", std::invalid_argument);
    CHECK_THROWS_AS(
        aggregate(std::vector<AttackResult>{result_of("a", Generator::exhaustive, 1, 1, true, 1),
                                            result_of("a", Generator::frankenstein, 1, 1, true, 1)}),
        std::invalid_argument);
}

TEST_CASE("aggregation is invariant under permutation of the results") {
    Rng rng(9);
    std::vector<AttackResult> results;
    for (int i = 0; i < 20; ++i)
        results.push_back(result_of("c", Generator::pretrained_lm, 10 + rng.below_int(90),
                                    1 + rng.below_int(50), rng.bernoulli(0.7),
                                    static_cast<std::uint64_t>(i)));
    const auto base = aggregate(results);
    for (int trial = 0; trial < 10; ++trial) {
        rng.shuffle(results);
        const auto again = aggregate(results);
        CHECK(again.mean_top_k == base.mean_top_k);
        CHECK(again.mean_beam_size == base.mean_beam_size);
        CHECK(again.found_rate == base.found_rate);
        CHECK(again.seeds == base.seeds);
    }
}

TEST_CASE("report tables mirror the result-matrix layout") {
    std::vector<CanaryMeta> metas;
    std::map<int, std::vector<AggregateResult>> by_rep;
    for (int c = 0; c < 14; ++c) {
        CanaryMeta meta;
        meta.canary_id = "canary" + std::to_string(c);
        meta.target_token = "tok" + std::to_string(c);
        meta.kind = c % 2 ? CanaryKind::organic : CanaryKind::random;
        meta.tier = c % 3 ? Tier::low : Tier::high;
        metas.push_back(meta);
    }
    for (int rep : {5, 25, 100}) {
        for (const auto& meta : metas) {
            for (Generator g :
                 {Generator::exhaustive, Generator::pretrained_lm, Generator::frankenstein}) {
                AggregateResult a;
                a.canary_id = meta.canary_id;
                a.generator = g;
                a.mean_top_k = g == Generator::exhaustive ? 500.0 : 120.0 + rep;
                a.mean_beam_size = 10.0 + rep;
                a.any_found = true;
                a.found_rate = 1.0;
                a.run_count = 10;
                a.seeds = {1, 2};
                by_rep[rep].push_back(a);
            }
        }
    }
    const ReportTables tables = emit_table(by_rep, metas);

    // one table per repetition count, 14 target-token rows each
    for (const char* header : {"repetitions = 5", "repetitions = 25", "repetitions = 100"})
        CHECK(tables.text.find(header) != std::string::npos);
    int rows = 0;
    std::size_t pos = 0;
    while ((pos = tables.text.find("\ntok", pos)) != std::string::npos) {
        ++rows;
        ++pos;
    }
    CHECK(rows == 14 * 3);
    CHECK(tables.text.find("Exhaustive Search") != std::string::npos);
    CHECK(tables.text.find("Language Model") != std::string::npos);
    CHECK(tables.text.find("Frankenstein Model") != std::string::npos);

    // csv: header plus 14 canaries x 3 generators x 3 repetition counts
    const std::string& csv = tables.csv;
    CHECK(csv.rfind(kResultCsvHeader, 0) == 0);
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 1 + 14 * 3 * 3);

    // determinism
    const ReportTables again = emit_table(by_rep, metas);
    CHECK(again.text == tables.text);
    CHECK(again.csv == tables.csv);
}

TEST_CASE("empty aggregates produce header-only output") {
    const ReportTables tables = emit_table({}, {});
    CHECK(tables.csv == std::string(kResultCsvHeader) + "\n");
    CHECK(tables.text.empty());
}

TEST_CASE("misses render as inf in text and empty csv cells") {
    CanaryMeta meta;
    meta.canary_id = "c";
    meta.target_token = "night";
    AggregateResult a;
    a.canary_id = "c";
    a.generator = Generator::frankenstein;
    a.mean_top_k = 12.0;
    a.any_found = false;
    a.found_rate = 0.0;
    a.run_count = 3;
    a.seeds = {1, 2, 3};
    std::map<int, std::vector<AggregateResult>> by_rep;
    by_rep[5] = {a};
    const ReportTables tables = emit_table(by_rep, std::vector<CanaryMeta>{meta});
    CHECK(tables.text.find("inf") != std::string::npos);
    CHECK(tables.csv.find(",12.0,,1;2;3") != std::string::npos);
}

TEST_CASE("figure csv carries one row per axis value and generator") {
    std::vector<FigureRow> rows;
    for (int rep : {1, 25}) {
        FigureRow r;
        r.axis_value = std::to_string(rep);
        r.generator = Generator::frankenstein;
        r.mean_top_k = 40.0;
        r.mean_beam_size = 4.0;
        r.any_found = true;
        r.found_rate = 1.0;
        rows.push_back(r);
    }
    const std::string csv = figure_csv("repetitions", rows);
    CHECK(csv.rfind("repetitions,generator,", 0) == 0);
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 3);
    CHECK(csv.find("1,frankenstein,40.0,4.0,1.000") != std::string::npos);
}
