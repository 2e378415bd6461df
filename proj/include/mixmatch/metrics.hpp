#ifndef MIXMATCH_METRICS_HPP
#define MIXMATCH_METRICS_HPP

#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mixmatch/attack.hpp"

namespace mixmatch {

// 1-based rank of the true token in the final ranking; nullopt on a miss.
std::optional<int> beam_size(const RankedCandidates& ranked, int true_token);

// AttackResult from a finished pipeline; a miss records found=false with
// beam_size = final list size + 1.
AttackResult make_attack_result(const std::string& canary_id, const RankedCandidates& pruned,
                                int true_token, int top_k, std::uint64_t seed);

struct AggregateResult {
    std::string canary_id;
    Generator generator = Generator::exhaustive;
    double mean_top_k = 0.0;      // over all runs
    double mean_beam_size = 0.0;  // over found runs only; see found_rate
    bool any_found = false;
    double found_rate = 0.0;
    int run_count = 0;
    std::vector<std::uint64_t> seeds;
};

// Means over one (canary, generator) group. Integer sums keep the result
// independent of input order. Throws on an empty or mixed group.
AggregateResult aggregate(std::span<const AttackResult> results);

// Display metadata joined into reports; one entry per canary, in row order.
struct CanaryMeta {
    std::string canary_id;
    std::string target_token;
    CanaryKind kind = CanaryKind::random;
    Tier tier = Tier::low;
};

struct ReportTables {
    std::string text;  // one aligned table per repetition count
    std::string csv;   // stable header, one row per (canary, rep, generator)
};

inline constexpr const char* kResultCsvHeader =
    "canary_id,target_token,kind,tier,repetitions,generator,runs,found_rate,mean_top_k,"
    "mean_beam_size,seed_list";

// Tables in the result-matrix layout: rows per target token, column groups
// {exhaustive, pretrained LM, frankenstein} x {top-K, beam size}, one table
// per repetition count. Misses render as "inf" in text and an empty CSV
// cell, with found_rate carrying the information.
ReportTables emit_table(const std::map<int, std::vector<AggregateResult>>& by_repetitions,
                        std::span<const CanaryMeta> metas);

// Plot-data CSV with one row per (axis value, generator).
struct FigureRow {
    std::string axis_value;
    Generator generator = Generator::exhaustive;
    double mean_top_k = 0.0;
    double mean_beam_size = 0.0;
    bool any_found = false;
    double found_rate = 0.0;
};

std::string figure_csv(const std::string& axis_name, std::span<const FigureRow> rows);

}  // namespace mixmatch

#endif  // MIXMATCH_METRICS_HPP
