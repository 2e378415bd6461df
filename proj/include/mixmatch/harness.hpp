#ifndef MIXMATCH_HARNESS_HPP
#define MIXMATCH_HARNESS_HPP

#include <iosfwd>
#include <string>
#include <vector>

#include "mixmatch/config.hpp"
#include "mixmatch/metrics.hpp"

namespace mixmatch {

// One attack outcome as persisted in per-seed results.csv files.
struct ResultRow {
    std::string canary_id;
    std::string target_token;
    CanaryKind kind = CanaryKind::random;
    Tier tier = Tier::low;
    int repetitions = 0;
    Generator generator = Generator::exhaustive;
    int top_k = 0;
    int beam_size = 0;
    bool found = false;
    std::uint64_t seed = 0;
};

inline constexpr const char* kRowCsvHeader =
    "canary_id,target_token,kind,tier,repetitions,generator,top_k,beam_size,found,seed";

void write_result_rows(const std::string& path, const std::vector<ResultRow>& rows);
std::vector<ResultRow> read_result_rows(const std::string& path);

// Pretrains (or loads the cached checkpoint for) the experiment, writing the
// checkpoint, vocabulary, and training curve into out_dir.
void run_pretrain(const ExperimentConfig& cfg, const std::string& out_dir);

// Full pipeline: corpus, pretraining (cached by config hash), per-seed
// canary injection + fine-tuning, the attack matrix, aggregation, tables
// and figure data. A failing seed is logged and skipped; the manifest is
// then marked partial. attack_phase=false stops after fine-tuning.
void run_experiment(const ExperimentConfig& cfg, const std::string& out_dir,
                    bool attack_phase = true);

enum class AblationKind { label_patterns, token_position, canary_length };

AblationKind parse_ablation_kind(const std::string& name);

void run_ablation(const ExperimentConfig& cfg, AblationKind kind, const std::string& out_dir);

// Re-aggregates every results.csv under run_dir and rewrites the tables;
// prints the selected rendering ("text" or "csv") to `console`.
void write_report(const std::string& run_dir, const std::string& format, std::ostream& console);

// Gradient checks plus the oracle-equivalence and filter suites on built-in
// micro fixtures. Prints one line per check; returns the failure count.
int selfcheck(std::ostream& console);

}  // namespace mixmatch

#endif  // MIXMATCH_HARNESS_HPP
