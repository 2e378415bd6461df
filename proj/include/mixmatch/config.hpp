#ifndef MIXMATCH_CONFIG_HPP
#define MIXMATCH_CONFIG_HPP

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "mixmatch/attack.hpp"
#include "mixmatch/canary.hpp"
#include "mixmatch/corpus.hpp"
#include "mixmatch/model.hpp"

namespace mixmatch {

struct AttackConfig {
    std::vector<Generator> generators = {Generator::exhaustive, Generator::pretrained_lm,
                                         Generator::frankenstein};
    Cutoff::Mode cutoff_mode = Cutoff::Mode::probability_floor;
    double cutoff_value = 0.0;  // <= 0 selects the default floor 1/(10*vocab)
    bool filters = true;

    Cutoff resolve_cutoff(int vocab_size) const;
};

struct AblationConfig {
    int variants = 5;
    int repetitions = 50;
    std::vector<LabelPattern::Mode> patterns = {LabelPattern::Mode::all_same,
                                                LabelPattern::Mode::all_distinct,
                                                LabelPattern::Mode::mixed};
    std::vector<int> position_canaries;             // indices into canaries; empty = all
    std::vector<std::pair<int, int>> length_pairs;  // canary index pairs to concatenate
    std::uint64_t seed = 99;
};

// Full experiment description, parsed from the key-value config format
// documented in the README. Unknown keys are rejected.
struct ExperimentConfig {
    std::vector<std::uint64_t> seeds = {1};
    int threads = 0;
    std::vector<int> repetitions;  // arm presets; empty = use each canary's own count

    std::string corpus_file;  // empty = synthetic
    SyntheticCorpusParams corpus;
    double val_fraction = 0.2;

    double low_quantile = 0.2;
    double high_quantile = 0.8;

    int embed_dim = 48;
    int num_layers = 2;
    int num_heads = 4;
    int hidden_dim = 96;
    int max_seq_len = 16;
    float dropout = 0.0f;

    PretrainParams pretrain;
    bool pretrain_shared = true;  // one pretrained encoder shared across run seeds

    FinetuneParams finetune;
    AttackConfig attack;
    std::vector<CanarySpec> canaries;  // label -1 = draw from the canary seed
    AblationConfig ablation;

    // test hook, not part of the config schema
    std::vector<std::uint64_t> fail_seeds_for_test;

    void validate() const;
};

ExperimentConfig parse_config_text(const std::string& text);
ExperimentConfig load_config(const std::string& path);

// Deterministic full dump; reparses to an equivalent config. Used for the
// run-directory config copy and for hashing.
std::string canonical_config(const ExperimentConfig& cfg);

// Hash over the fields that determine the pretrained checkpoint (corpus,
// vocabulary, model shape, pretraining parameters; plus the run seed when
// pretraining is per-seed).
std::uint64_t pretrain_config_hash(const ExperimentConfig& cfg, std::uint64_t run_seed);

std::uint64_t full_config_hash(const ExperimentConfig& cfg);

}  // namespace mixmatch

#endif  // MIXMATCH_CONFIG_HPP
