#ifndef MIXMATCH_ATTACK_HPP
#define MIXMATCH_ATTACK_HPP

#include <cstdint>
#include <string>
#include <vector>

#include "mixmatch/canary.hpp"
#include "mixmatch/model.hpp"
#include "mixmatch/vocab.hpp"

namespace mixmatch {

enum class Generator { exhaustive, pretrained_lm, frankenstein };
enum class ScoreKind { mlm_probability, cls_loss };

const char* to_string(Generator g);
const char* to_string(ScoreKind s);

struct MaskedQuery {
    std::vector<int> token_ids;  // model-level, [CLS]-prefixed, [MASK] at target_index
    int target_index = 0;
    int label = 0;
    int true_token = 0;  // withheld from scoring; read only by metrics
};

// Model-level query for a canary: [CLS] + tokens with the target masked.
MaskedQuery make_query(const Canary& canary, const ModelConfig& cfg);

struct Cutoff {
    enum class Mode { probability_floor, cumulative_mass, top_n };
    Mode mode = Mode::probability_floor;
    double value = 0.0;

    // Floor relative to the uniform probability; keeps list lengths
    // token-dependent without a hard count.
    static Cutoff default_floor(int vocab_size) {
        return {Mode::probability_floor, 1.0 / (10.0 * static_cast<double>(vocab_size))};
    }
    std::string describe() const;
};

struct CutoffTrace {
    std::string rule;
    int generated = 0;     // size before the cutoff
    int after_cutoff = 0;  // generation-phase top-K
    int filtered_removed = 0;
};

struct CandidateEntry {
    int token = 0;
    double score = 0.0;
};

// Ordered candidates: descending probability for mlm_probability, ascending
// loss for cls_loss; ties broken by documented keys so the order is total.
struct RankedCandidates {
    std::vector<CandidateEntry> entries;
    Generator generator = Generator::frankenstein;
    ScoreKind score_kind = ScoreKind::mlm_probability;
    CutoffTrace trace;
};

// Masked-LM candidate generation through the head-swapped model; sorted by
// probability descending (ties by token id), truncated by the cutoff.
RankedCandidates generate_candidates(const ModelBundle& frankenstein, const MaskedQuery& query,
                                     const Cutoff& cutoff);

// Same contract, but directly through the pretrained model.
RankedCandidates generate_candidates_lm(const ModelBundle& pretrained, const MaskedQuery& query,
                                        const Cutoff& cutoff);

// Drops continuation, punctuation and special tokens; keeps word and numeric
// ones; preserves the relative order of survivors.
RankedCandidates filter_candidates(const RankedCandidates& candidates, const Vocabulary& vocab);

// Loss-based membership signal: substitutes each candidate at the masked
// position, queries the classifier, and re-sorts by cross-entropy of the
// query label ascending (ties by pre-pruning rank, then token id).
RankedCandidates prune_candidates(const ModelBundle& target, const MaskedQuery& query,
                                  const RankedCandidates& candidates);

// Baseline: every vocabulary token through filter + prune.
RankedCandidates exhaustive_search(const ModelBundle& target, const MaskedQuery& query,
                                   const Vocabulary& vocab);

struct AttackResult {
    std::string canary_id;
    Generator generator = Generator::exhaustive;
    int top_k = 0;      // generation-phase candidate count (vocab size for exhaustive)
    int beam_size = 0;  // 1-based rank of the true token; final list size + 1 on a miss
    bool found = false;
    std::uint64_t seed = 0;
};

struct AttackSettings {
    Generator generator = Generator::frankenstein;
    Cutoff cutoff;
    bool filters = true;
};

struct AttackOutcome {
    RankedCandidates pipeline;
    AttackResult result;
};

// Composes generation, filtering and pruning per the settings. Stage errors
// are rethrown with the failing stage named.
AttackOutcome run_attack(const ModelBundle& pretrained, const ModelBundle& finetuned,
                         const MaskedQuery& query, const AttackSettings& settings,
                         const Vocabulary& vocab, const std::string& canary_id,
                         std::uint64_t seed);

// One entry per line: rank, token string, score, generator, score kind.
void write_candidate_dump(const std::string& path, const RankedCandidates& ranked,
                          const Vocabulary& vocab);

}  // namespace mixmatch

#endif  // MIXMATCH_ATTACK_HPP
