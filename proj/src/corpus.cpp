#include "mixmatch/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "mixmatch/rng.hpp"

namespace mixmatch {

namespace {

constexpr const char* kConsonants = "bdfgklmnprstvz";  // 14
constexpr const char* kVowels = "aeiou";               // 5
constexpr int kSyllables = 14 * 5;

// Distinct pronounceable pseudo-words, enumerable without RNG so the word
// universe is stable. The first syllable cycles fastest so small universes
// still spread over the whole alphabet. No collisions with glue words:
// 'h', 'w', 'y' are not in the consonant set.
std::string pseudo_word(int index) {
    std::string w;
    const auto syllable = [&](int s) {
        w += kConsonants[s / 5];
        w += kVowels[s % 5];
    };
    if (index < kSyllables * kSyllables) {
        syllable(index % kSyllables);
        syllable(index / kSyllables);
    } else {
        int j = index - kSyllables * kSyllables;
        syllable(j % kSyllables);
        syllable((j / kSyllables) % kSyllables);
        syllable(j / (kSyllables * kSyllables));
    }
    return w;
}

const std::vector<std::string>& glue_words() {
    static const std::vector<std::string> kGlue = {"the", "is", "a",  "of",
                                                   "and", "in", "to", "it"};
    return kGlue;
}

std::vector<std::string> year_words() {
    std::vector<std::string> out;
    for (int y = 1960; y < 1990; ++y) out.push_back(std::to_string(y));
    return out;
}

}  // namespace

void SyntheticCorpusParams::validate() const {
    if (num_classes < 2) throw std::invalid_argument("num_classes must be >= 2");
    if (examples_per_class < 1) throw std::invalid_argument("examples_per_class must be >= 1");
    if (sentence_len_min < 1 || sentence_len_max < sentence_len_min)
        throw std::invalid_argument("bad sentence length range");
    if (skew < 0.0) throw std::invalid_argument("skew must be >= 0");
    if (vocab_size < 64) throw std::invalid_argument("vocab_size must be >= 64");
}

Corpus generate_corpus(const SyntheticCorpusParams& params) {
    params.validate();
    Rng rng(params.seed);

    // Reserve room in the vocabulary for specials, glue, years and ".".
    const int reserved = 4 + static_cast<int>(glue_words().size()) + 30 + 2;
    const int num_types = params.vocab_size - reserved;
    std::vector<std::string> types(static_cast<std::size_t>(num_types));
    for (int i = 0; i < num_types; ++i) types[static_cast<std::size_t>(i)] = pseudo_word(i);
    const auto years = year_words();

    // Zipf weights with per-class tilt. Word type t has topic t % C.
    std::vector<std::vector<double>> cum(static_cast<std::size_t>(params.num_classes));
    for (int c = 0; c < params.num_classes; ++c) {
        auto& cc = cum[static_cast<std::size_t>(c)];
        cc.resize(static_cast<std::size_t>(num_types));
        double total = 0.0;
        for (int t = 0; t < num_types; ++t) {
            double w = 1.0 / std::pow(static_cast<double>(t + 2), 1.05);
            if (t % params.num_classes == c) w *= std::exp(params.skew);
            total += w;
            cc[static_cast<std::size_t>(t)] = total;
        }
    }

    const auto sample_type = [&](int c) {
        const auto& cc = cum[static_cast<std::size_t>(c)];
        const double u = rng.uniform() * cc.back();
        const auto it = std::lower_bound(cc.begin(), cc.end(), u);
        return static_cast<int>(it - cc.begin());
    };

    const int total_examples = params.num_classes * params.examples_per_class;
    std::vector<std::string> texts;
    std::vector<int> labels;
    texts.reserve(static_cast<std::size_t>(total_examples));
    for (int i = 0; i < total_examples; ++i) {
        const int c = i % params.num_classes;
        const int len = params.sentence_len_min +
                        rng.below_int(params.sentence_len_max - params.sentence_len_min + 1);
        std::string text;
        for (int k = 0; k < len; ++k) {
            if (!text.empty()) text += ' ';
            const double u = rng.uniform();
            if (u < 0.20) {
                text += glue_words()[rng.below(glue_words().size())];
            } else if (u < 0.24) {
                text += years[rng.below(years.size())];
            } else {
                text += types[static_cast<std::size_t>(sample_type(c))];
            }
        }
        text += " .";
        texts.push_back(std::move(text));
        labels.push_back(c);
    }

    Corpus out;
    out.vocab = Vocabulary::build(texts, params.vocab_size);
    out.num_classes = params.num_classes;
    out.examples.reserve(texts.size());
    for (std::size_t i = 0; i < texts.size(); ++i)
        out.examples.push_back({out.vocab.tokenize(texts[i]), labels[i]});
    return out;
}

TierStats corpus_tier_stats(const Vocabulary& vocab, double low_q, double high_q) {
    TierStats stats;
    for (int id = 0; id < vocab.size(); ++id) {
        if (vocab.classify(id) != TokenClass::word) continue;
        switch (vocab.frequency_tier(id, low_q, high_q)) {
            case Tier::low: ++stats.low; break;
            case Tier::mid: ++stats.mid; break;
            case Tier::high: ++stats.high; break;
        }
    }
    return stats;
}

std::vector<std::pair<int, std::string>> load_tsv(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::invalid_argument("file not found: " + path);
    std::vector<std::pair<int, std::string>> out;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(f, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        const auto tab = line.find('\t');
        if (tab == std::string::npos)
            throw std::invalid_argument("missing tab separator at line " + std::to_string(line_no) +
                                        " of " + path);
        int label = 0;
        try {
            label = std::stoi(line.substr(0, tab));
        } catch (const std::exception&) {
            throw std::invalid_argument("bad label at line " + std::to_string(line_no) + " of " +
                                        path);
        }
        if (label < 0)
            throw std::invalid_argument("negative label at line " + std::to_string(line_no) +
                                        " of " + path);
        out.emplace_back(label, line.substr(tab + 1));
    }
    if (out.empty()) throw std::invalid_argument("empty corpus");
    return out;
}

Corpus corpus_from_tsv(const std::string& path, int vocab_size) {
    const auto records = load_tsv(path);
    std::vector<std::string> texts;
    texts.reserve(records.size());
    int max_label = 0;
    for (const auto& [label, text] : records) {
        texts.push_back(text);
        max_label = std::max(max_label, label);
    }
    Corpus out;
    out.vocab = Vocabulary::build(texts, vocab_size);
    out.num_classes = max_label + 1;
    for (const auto& [label, text] : records)
        out.examples.push_back({out.vocab.tokenize(text), label});
    return out;
}

void split_corpus(const Corpus& corpus, double val_fraction, std::uint64_t seed,
                  std::vector<LabeledExample>& train, std::vector<LabeledExample>& val) {
    if (!(val_fraction >= 0.0 && val_fraction < 1.0))
        throw std::invalid_argument("val_fraction must be in [0, 1)");
    std::vector<int> order(corpus.examples.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
    Rng rng(mix_seed(seed, "corpus_split"));
    rng.shuffle(order);
    const std::size_t val_n =
        static_cast<std::size_t>(val_fraction * static_cast<double>(order.size()));
    train.clear();
    val.clear();
    for (std::size_t i = 0; i < order.size(); ++i) {
        const auto& ex = corpus.examples[static_cast<std::size_t>(order[i])];
        if (i < val_n)
            val.push_back(ex);
        else
            train.push_back(ex);
    }
}

}  // namespace mixmatch
