#ifndef MIXMATCH_CANARY_HPP
#define MIXMATCH_CANARY_HPP

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "mixmatch/model.hpp"
#include "mixmatch/vocab.hpp"

namespace mixmatch {

enum class CanaryKind { organic, random };

const char* to_string(CanaryKind k);

struct CanarySpec {
    CanaryKind kind = CanaryKind::random;
    Tier tier = Tier::low;
    std::optional<Tier> target_tier_override;  // e.g. low canary, high-frequency target
    int length = 5;           // tokens before the final period
    int target_position = 4;  // index in [0, length)
    int label = 0;
    int repetitions = 1;
    std::uint64_t seed = 0;
    // quantiles defining the tier thresholds
    double low_quantile = 0.2;
    double high_quantile = 0.8;

    void validate() const;
};

struct Canary {
    std::string id;
    std::vector<int> token_ids;  // ends with the period token
    int target_index = 0;
    int true_token = 0;
    int label = 0;
    CanarySpec spec;
};

// Deterministic canary construction. Random canaries sample tier tokens
// uniformly without replacement; organic ones fill a template whose slots
// are constrained by a stable pseudo-role (name/verb/modifier/noun, hashed
// from the token string) on top of the tier constraint, mirroring
// subject-verb-object-style sentences. The target slot draws from word and
// numeric tokens of the target tier.
Canary generate_canary(const CanarySpec& spec, const Vocabulary& vocab);

struct LabelPattern {
    enum class Mode { all_same, all_distinct, mixed };
    Mode mode = Mode::all_same;
    std::vector<int> assignment;  // label per variant

    static LabelPattern same(int label, int variants);
    static LabelPattern distinct(int variants);
    static LabelPattern mixed_pairs(int variants);  // {0,0,1,1,2,...}

    void validate(int variants, int num_classes) const;
};

const char* to_string(LabelPattern::Mode m);

// Variants of `base` differing only in the target token, labelled per the
// pattern. Every variant token must differ from the base target.
std::vector<Canary> make_label_variants(const Canary& base, const std::vector<int>& variant_tokens,
                                        const LabelPattern& pattern, const Vocabulary& vocab);

// a-without-period + "and" + b; the target becomes the last token before the
// final period. Both canaries must share kind and tier.
Canary concatenate_canaries(const Canary& a, const Canary& b, const Vocabulary& vocab,
                            int max_seq_len);

struct InjectionRecord {
    std::string canary_id;
    std::vector<std::size_t> indices;  // positions of the copies in the new dataset
};

struct InjectionResult {
    std::vector<LabeledExample> dataset;
    std::vector<InjectionRecord> manifest;
};

// Inserts spec.repetitions copies of each canary at seed-shuffled positions.
// Original examples keep their relative order and content.
InjectionResult inject(const std::vector<LabeledExample>& dataset,
                       const std::vector<Canary>& canaries, std::uint64_t seed);

void write_canary_manifest(const std::string& path, const std::vector<Canary>& canaries,
                           const std::vector<InjectionRecord>& manifest, const Vocabulary& vocab);

// Word/numeric token pools per tier, as used by canary construction.
std::vector<int> tier_pool(const Vocabulary& vocab, Tier tier, double low_q, double high_q,
                           bool include_numeric);

}  // namespace mixmatch

#endif  // MIXMATCH_CANARY_HPP
