#ifndef MIXMATCH_VOCAB_HPP
#define MIXMATCH_VOCAB_HPP

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "mixmatch/common.hpp"

namespace mixmatch {

enum class TokenClass { word, continuation, punctuation, special, numeric };

enum class Tier { low = 0, mid = 1, high = 2 };

const char* to_string(TokenClass c);
const char* to_string(Tier t);

// Token table with dense ids, corpus frequencies, and the token-class
// predicates used by canary construction and candidate filtering.
//
// Layout is fixed: [PAD]=0, [UNK]=1, [CLS]=2, [MASK]=3, then corpus units
// ranked by (frequency desc, string asc). Subword continuation units carry
// the "##" prefix. Immutable after construction; concurrent reads are safe.
class Vocabulary {
public:
    // Default-constructed vocabularies are empty placeholders; build(),
    // from_tokens() or load() produce usable ones.
    Vocabulary() = default;

    static constexpr const char* kPad = "[PAD]";
    static constexpr const char* kUnk = "[UNK]";
    static constexpr const char* kCls = "[CLS]";
    static constexpr const char* kMask = "[MASK]";
    static constexpr const char* kContinuationPrefix = "##";

    // The ASCII punctuation set used by classify(); a token is punctuation-
    // class iff every character is in this set.
    static constexpr const char* kPunctuation = "!\"#$%&'()*+,-./:;<=>?@[\\]^_`{|}~";

    // Builds a vocabulary from whitespace-split documents. Keeps the
    // max_size most frequent units: whole words, plus greedy longest-match
    // fragments harvested from words that fall outside the budget (initial
    // fragments plain, non-initial ones prefixed with "##").
    static Vocabulary build(const std::vector<std::string>& corpus, int max_size);

    // Explicit token list, in id order; specials are appended at the front
    // if missing. Mostly for tests and hand-built fixtures.
    static Vocabulary from_tokens(const std::vector<std::string>& tokens,
                                  const std::vector<std::int64_t>& frequencies = {});

    int size() const { return static_cast<int>(tokens_.size()); }
    const std::string& token(int id) const;
    std::optional<int> id_of(std::string_view token) const;
    std::int64_t frequency(int id) const;
    SpecialTokens specials() const { return specials_; }
    std::string continuation_prefix() const { return kContinuationPrefix; }

    TokenClass classify(int id) const;

    // Tier of a token's frequency against nearest-rank quantile thresholds
    // computed over word-class tokens. Special and continuation tokens have
    // no tier.
    Tier frequency_tier(int id, double low_quantile, double high_quantile) const;

    // Whitespace split, then greedy longest-match against the token table;
    // a word with no full decomposition becomes a single [UNK].
    std::vector<int> tokenize(std::string_view text) const;
    std::string detokenize(std::span<const int> ids) const;

    // One token per line ("token\tfreq"), line order = id, preceded by a
    // header line recording the continuation prefix and special ids.
    void save(const std::string& path) const;
    static Vocabulary load(const std::string& path);

private:
    void index();

    std::vector<std::string> tokens_;
    std::vector<std::int64_t> freq_;
    std::unordered_map<std::string, int> id_;
    SpecialTokens specials_;
};

}  // namespace mixmatch

#endif  // MIXMATCH_VOCAB_HPP
