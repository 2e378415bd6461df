#include "mixmatch/vocab.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>

namespace mixmatch {

namespace {

bool is_space_char(char c) {
    return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v';
}

std::vector<std::string> split_words(std::string_view text) {
    std::vector<std::string> out;
    std::size_t i = 0;
    while (i < text.size()) {
        while (i < text.size() && is_space_char(text[i])) ++i;
        std::size_t j = i;
        while (j < text.size() && !is_space_char(text[j])) ++j;
        if (j > i) out.emplace_back(text.substr(i, j - i));
        i = j;
    }
    return out;
}

bool in_punct_set(char c) {
    for (const char* p = Vocabulary::kPunctuation; *p; ++p)
        if (*p == c) return true;
    return false;
}

// (frequency desc, string asc) ranking shared by build paths.
struct UnitRank {
    bool operator()(const std::pair<std::string, std::int64_t>& a,
                    const std::pair<std::string, std::int64_t>& b) const {
        if (a.second != b.second) return a.second > b.second;
        return a.first < b.first;
    }
};

}  // namespace

const char* to_string(TokenClass c) {
    switch (c) {
        case TokenClass::word: return "word";
        case TokenClass::continuation: return "continuation";
        case TokenClass::punctuation: return "punctuation";
        case TokenClass::special: return "special";
        case TokenClass::numeric: return "numeric";
    }
    return "?";
}

const char* to_string(Tier t) {
    switch (t) {
        case Tier::low: return "low";
        case Tier::mid: return "mid";
        case Tier::high: return "high";
    }
    return "?";
}

void Vocabulary::index() {
    id_.clear();
    id_.reserve(tokens_.size());
    for (std::size_t i = 0; i < tokens_.size(); ++i) {
        if (!id_.emplace(tokens_[i], static_cast<int>(i)).second)
            throw std::invalid_argument("duplicate token in vocabulary: " + tokens_[i]);
    }
    const auto need = [&](const char* s) {
        auto it = id_.find(s);
        if (it == id_.end()) throw std::invalid_argument(std::string("missing special token ") + s);
        return it->second;
    };
    specials_.pad = need(kPad);
    specials_.unk = need(kUnk);
    specials_.cls = need(kCls);
    specials_.mask = need(kMask);
}

Vocabulary Vocabulary::build(const std::vector<std::string>& corpus, int max_size) {
    if (corpus.empty()) throw std::invalid_argument("empty corpus");
    if (max_size < 16)
        throw std::invalid_argument("max_size too small to hold special tokens and base units");

    std::map<std::string, std::int64_t> words;
    for (const auto& doc : corpus)
        for (auto& w : split_words(doc)) words[w] += 1;

    const int budget = max_size - 4;
    std::vector<std::pair<std::string, std::int64_t>> ranked(words.begin(), words.end());
    std::sort(ranked.begin(), ranked.end(), UnitRank{});

    std::vector<std::pair<std::string, std::int64_t>> pool;
    if (static_cast<int>(ranked.size()) <= budget) {
        pool = std::move(ranked);
    } else {
        // Words that fit stay whole; the rest contribute fragments: the
        // longest kept-word prefix (falling back to the first character)
        // plus one "##" remainder unit, each credited with the word count.
        std::unordered_map<std::string, std::int64_t> kept;
        for (int i = 0; i < budget; ++i) kept.emplace(ranked[i].first, ranked[i].second);

        std::map<std::string, std::int64_t> fragments;
        for (std::size_t i = static_cast<std::size_t>(budget); i < ranked.size(); ++i) {
            const std::string& w = ranked[i].first;
            const std::int64_t n = ranked[i].second;
            std::size_t cut = 0;
            for (std::size_t len = w.size() - 1; len >= 1; --len) {
                if (kept.count(w.substr(0, len))) {
                    cut = len;
                    break;
                }
                if (len == 1) break;
            }
            if (cut == 0) {
                cut = 1;
                fragments[w.substr(0, 1)] += n;
            }
            fragments[std::string(kContinuationPrefix) + w.substr(cut)] += n;
        }
        pool.reserve(kept.size() + fragments.size());
        for (int i = 0; i < budget; ++i) pool.push_back(ranked[static_cast<std::size_t>(i)]);
        for (auto& f : fragments) pool.push_back(f);
        std::sort(pool.begin(), pool.end(), UnitRank{});
        if (static_cast<int>(pool.size()) > budget) pool.resize(static_cast<std::size_t>(budget));
    }

    Vocabulary v;
    v.tokens_ = {kPad, kUnk, kCls, kMask};
    v.freq_ = {0, 0, 0, 0};
    for (auto& [tok, n] : pool) {
        if (tok == kPad || tok == kUnk || tok == kCls || tok == kMask) {
            v.freq_[static_cast<std::size_t>(
                tok == kPad ? 0 : tok == kUnk ? 1 : tok == kCls ? 2 : 3)] = n;
            continue;
        }
        if (static_cast<int>(v.tokens_.size()) >= max_size) break;
        v.tokens_.push_back(tok);
        v.freq_.push_back(n);
    }
    v.index();
    return v;
}

Vocabulary Vocabulary::from_tokens(const std::vector<std::string>& tokens,
                                   const std::vector<std::int64_t>& frequencies) {
    if (!frequencies.empty() && frequencies.size() != tokens.size())
        throw std::invalid_argument("frequency list does not match token list");
    Vocabulary v;
    const bool has_specials =
        std::find(tokens.begin(), tokens.end(), std::string(kMask)) != tokens.end();
    if (!has_specials) {
        v.tokens_ = {kPad, kUnk, kCls, kMask};
        v.freq_ = {0, 0, 0, 0};
    }
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        v.tokens_.push_back(tokens[i]);
        v.freq_.push_back(frequencies.empty() ? 0 : frequencies[i]);
    }
    v.index();
    return v;
}

const std::string& Vocabulary::token(int id) const {
    if (id < 0 || id >= size()) throw std::invalid_argument("token id out of range");
    return tokens_[static_cast<std::size_t>(id)];
}

std::optional<int> Vocabulary::id_of(std::string_view tok) const {
    auto it = id_.find(std::string(tok));
    if (it == id_.end()) return std::nullopt;
    return it->second;
}

std::int64_t Vocabulary::frequency(int id) const {
    if (id < 0 || id >= size()) throw std::invalid_argument("token id out of range");
    return freq_[static_cast<std::size_t>(id)];
}

TokenClass Vocabulary::classify(int id) const {
    const std::string& s = token(id);
    if (id == specials_.pad || id == specials_.unk || id == specials_.cls || id == specials_.mask)
        return TokenClass::special;
    if (s.rfind(kContinuationPrefix, 0) == 0) return TokenClass::continuation;
    bool all_punct = !s.empty();
    bool all_digit = !s.empty();
    for (char c : s) {
        if (!in_punct_set(c)) all_punct = false;
        if (c < '0' || c > '9') all_digit = false;
    }
    if (all_punct) return TokenClass::punctuation;
    if (all_digit) return TokenClass::numeric;
    return TokenClass::word;
}

Tier Vocabulary::frequency_tier(int id, double low_quantile, double high_quantile) const {
    if (!(low_quantile > 0.0 && high_quantile < 1.0 && low_quantile < high_quantile))
        throw std::invalid_argument("quantiles must satisfy 0 < low < high < 1");
    const TokenClass cls = classify(id);
    if (cls == TokenClass::special || cls == TokenClass::continuation)
        throw std::invalid_argument("untierable token class");

    std::vector<std::int64_t> word_freqs;
    for (int i = 0; i < size(); ++i)
        if (classify(i) == TokenClass::word) word_freqs.push_back(freq_[static_cast<std::size_t>(i)]);
    if (word_freqs.empty()) throw std::invalid_argument("vocabulary has no word tokens");
    std::sort(word_freqs.begin(), word_freqs.end());

    // Nearest-rank quantile: F[ceil(q*n) - 1].
    const auto nearest_rank = [&](double q) {
        const auto n = static_cast<double>(word_freqs.size());
        auto idx = static_cast<std::size_t>(std::ceil(q * n));
        if (idx > 0) --idx;
        if (idx >= word_freqs.size()) idx = word_freqs.size() - 1;
        return word_freqs[idx];
    };
    const std::int64_t low_thresh = nearest_rank(low_quantile);
    const std::int64_t high_thresh = nearest_rank(high_quantile);

    const std::int64_t f = freq_[static_cast<std::size_t>(id)];
    if (f >= high_thresh) return Tier::high;
    if (f <= low_thresh) return Tier::low;
    return Tier::mid;
}

std::vector<int> Vocabulary::tokenize(std::string_view text) const {
    std::vector<int> out;
    for (const auto& word : split_words(text)) {
        if (auto whole = id_of(word)) {
            out.push_back(*whole);
            continue;
        }
        // Greedy longest match: plain unit for the initial piece, then
        // "##"-prefixed units for the rest. Any dead end makes the whole
        // word a single [UNK].
        std::vector<int> pieces;
        std::size_t start = 0;
        bool bad = false;
        while (start < word.size()) {
            int match = -1;
            for (std::size_t end = word.size(); end > start; --end) {
                std::string piece = word.substr(start, end - start);
                if (start > 0) piece = std::string(kContinuationPrefix) + piece;
                if (auto id = id_of(piece)) {
                    match = *id;
                    start = end;
                    break;
                }
            }
            if (match < 0) {
                bad = true;
                break;
            }
            pieces.push_back(match);
        }
        if (bad)
            out.push_back(specials_.unk);
        else
            out.insert(out.end(), pieces.begin(), pieces.end());
    }
    return out;
}

std::string Vocabulary::detokenize(std::span<const int> ids) const {
    std::string out;
    for (int id : ids) {
        const std::string& tok = token(id);
        if (tok.rfind(kContinuationPrefix, 0) == 0 && !out.empty()) {
            out += tok.substr(2);
        } else {
            if (!out.empty()) out += ' ';
            out += tok;
        }
    }
    return out;
}

void Vocabulary::save(const std::string& path) const {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open vocabulary file for writing: " + path);
    f << "#mixmatch-vocab v1\tcontinuation=" << kContinuationPrefix << "\tpad=" << specials_.pad
      << "\tunk=" << specials_.unk << "\tcls=" << specials_.cls << "\tmask=" << specials_.mask
      << "\n";
    for (std::size_t i = 0; i < tokens_.size(); ++i)
        f << tokens_[i] << '\t' << freq_[i] << '\n';
    if (!f) throw std::runtime_error("failed writing vocabulary file: " + path);
}

Vocabulary Vocabulary::load(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open vocabulary file: " + path);
    std::string header;
    if (!std::getline(f, header) || header.rfind("#mixmatch-vocab v1", 0) != 0)
        throw std::runtime_error("bad vocabulary header in " + path);
    Vocabulary v;
    std::string line;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        const auto tab = line.find('\t');
        if (tab == std::string::npos) throw std::runtime_error("bad vocabulary line: " + line);
        v.tokens_.push_back(line.substr(0, tab));
        v.freq_.push_back(std::stoll(line.substr(tab + 1)));
    }
    v.index();
    return v;
}

}  // namespace mixmatch
