#ifndef MIXMATCH_CORPUS_HPP
#define MIXMATCH_CORPUS_HPP

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "mixmatch/model.hpp"
#include "mixmatch/vocab.hpp"

namespace mixmatch {

// Synthetic labeled-corpus generator standing in for a topic-classification
// dataset. Global token frequencies are Zipf-distributed; each word type is
// assigned a topic class, and sentences of class c sample topic-matching
// types with weight multiplied by e^skew. skew = 0 yields an unlearnable
// control task.
struct SyntheticCorpusParams {
    int num_classes = 5;
    int examples_per_class = 200;
    int sentence_len_min = 6;
    int sentence_len_max = 10;
    double skew = 2.0;
    int vocab_size = 512;  // build target for the vocabulary
    std::uint64_t seed = 7;

    void validate() const;
};

struct Corpus {
    std::vector<LabeledExample> examples;
    Vocabulary vocab;
    int num_classes = 0;
};

Corpus generate_corpus(const SyntheticCorpusParams& params);

// Word-class token counts per tier at the given quantiles.
struct TierStats {
    int low = 0;
    int mid = 0;
    int high = 0;
};

TierStats corpus_tier_stats(const Vocabulary& vocab, double low_q, double high_q);

// One "label<TAB>text" record per line, labels as non-negative integers.
std::vector<std::pair<int, std::string>> load_tsv(const std::string& path);

Corpus corpus_from_tsv(const std::string& path, int vocab_size);

// Deterministic train/validation split (stratification-free seeded shuffle).
void split_corpus(const Corpus& corpus, double val_fraction, std::uint64_t seed,
                  std::vector<LabeledExample>& train, std::vector<LabeledExample>& val);

}  // namespace mixmatch

#endif  // MIXMATCH_CORPUS_HPP
