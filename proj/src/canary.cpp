#include "mixmatch/canary.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>

#include "mixmatch/rng.hpp"

namespace mixmatch {

namespace {

enum class Role { name, verb, modifier, noun };

// Stable pseudo-part-of-speech so organic templates have consistent slot
// populations across runs and vocabularies.
Role role_of(const std::string& token) {
    return static_cast<Role>(fnv1a(token) % 4);
}

Role slot_role(int position, int length) {
    if (position == 0) return Role::name;
    if (position == 1 && length > 2) return Role::verb;
    if (position == length - 1) return Role::noun;
    return Role::modifier;
}

int period_id(const Vocabulary& vocab) {
    const auto id = vocab.id_of(".");
    if (!id) throw std::runtime_error("vocabulary has no '.' token");
    return *id;
}

int draw_from_pool(std::vector<int>& pool, Rng& rng, const char* what) {
    if (pool.empty())
        throw std::runtime_error(std::string("insufficient tier population: no ") + what +
                                 " token available");
    const std::size_t j = rng.below(pool.size());
    const int tok = pool[j];
    pool[j] = pool.back();
    pool.pop_back();
    return tok;
}

}  // namespace

const char* to_string(CanaryKind k) {
    return k == CanaryKind::organic ? "organic" : "random";
}

const char* to_string(LabelPattern::Mode m) {
    switch (m) {
        case LabelPattern::Mode::all_same: return "all_same";
        case LabelPattern::Mode::all_distinct: return "all_distinct";
        case LabelPattern::Mode::mixed: return "mixed";
    }
    return "?";
}

void CanarySpec::validate() const {
    if (length < 1) throw std::invalid_argument("canary length must be >= 1");
    if (target_position < 0 || target_position >= length)
        throw std::invalid_argument("target_position must be in [0, length)");
    if (repetitions < 1) throw std::invalid_argument("repetitions must be >= 1");
    if (label < 0) throw std::invalid_argument("canary label must be set");
    if (!(low_quantile > 0.0 && high_quantile < 1.0 && low_quantile < high_quantile))
        throw std::invalid_argument("quantiles must satisfy 0 < low < high < 1");
}

std::vector<int> tier_pool(const Vocabulary& vocab, Tier tier, double low_q, double high_q,
                           bool include_numeric) {
    std::vector<int> pool;
    for (int id = 0; id < vocab.size(); ++id) {
        const TokenClass cls = vocab.classify(id);
        if (cls != TokenClass::word && !(include_numeric && cls == TokenClass::numeric)) continue;
        if (vocab.frequency_tier(id, low_q, high_q) == tier) pool.push_back(id);
    }
    return pool;
}

Canary generate_canary(const CanarySpec& spec, const Vocabulary& vocab) {
    spec.validate();
    Rng rng(spec.seed);
    const Tier target_tier = spec.target_tier_override.value_or(spec.tier);

    auto target_pool = tier_pool(vocab, target_tier, spec.low_quantile, spec.high_quantile, true);
    const int target = draw_from_pool(target_pool, rng, "target-tier");

    std::vector<int> tokens(static_cast<std::size_t>(spec.length), -1);
    tokens[static_cast<std::size_t>(spec.target_position)] = target;

    if (spec.kind == CanaryKind::random) {
        auto pool = tier_pool(vocab, spec.tier, spec.low_quantile, spec.high_quantile, false);
        std::erase(pool, target);
        for (int i = 0; i < spec.length; ++i) {
            if (i == spec.target_position) continue;
            tokens[static_cast<std::size_t>(i)] = draw_from_pool(pool, rng, to_string(spec.tier));
        }
    } else {
        auto base = tier_pool(vocab, spec.tier, spec.low_quantile, spec.high_quantile, false);
        std::erase(base, target);
        std::vector<std::vector<int>> by_role(4);
        for (int id : base)
            by_role[static_cast<std::size_t>(role_of(vocab.token(id)))].push_back(id);
        std::set<int> used{target};
        for (int i = 0; i < spec.length; ++i) {
            if (i == spec.target_position) continue;
            auto& pool = by_role[static_cast<std::size_t>(slot_role(i, spec.length))];
            std::erase_if(pool, [&](int id) { return used.count(id) > 0; });
            const int tok = draw_from_pool(pool, rng, to_string(spec.tier));
            used.insert(tok);
            tokens[static_cast<std::size_t>(i)] = tok;
        }
    }

    Canary c;
    c.token_ids = tokens;
    c.token_ids.push_back(period_id(vocab));
    c.target_index = spec.target_position;
    c.true_token = target;
    c.label = spec.label;
    c.spec = spec;
    c.id = vocab.token(target);
    return c;
}

LabelPattern LabelPattern::same(int label, int variants) {
    LabelPattern p;
    p.mode = Mode::all_same;
    p.assignment.assign(static_cast<std::size_t>(variants), label);
    return p;
}

LabelPattern LabelPattern::distinct(int variants) {
    LabelPattern p;
    p.mode = Mode::all_distinct;
    for (int i = 0; i < variants; ++i) p.assignment.push_back(i);
    return p;
}

LabelPattern LabelPattern::mixed_pairs(int variants) {
    LabelPattern p;
    p.mode = Mode::mixed;
    for (int i = 0; i < variants; ++i) p.assignment.push_back(i / 2);
    return p;
}

void LabelPattern::validate(int variants, int num_classes) const {
    if (static_cast<int>(assignment.size()) != variants)
        throw std::invalid_argument("label pattern does not cover all variants");
    for (int label : assignment)
        if (label < 0 || label >= num_classes)
            throw std::invalid_argument("label pattern contains an out-of-range label");
    if (mode == Mode::all_same) {
        for (int label : assignment)
            if (label != assignment.front())
                throw std::invalid_argument("all_same pattern with differing labels");
    }
    if (mode == Mode::all_distinct) {
        std::set<int> seen(assignment.begin(), assignment.end());
        if (static_cast<int>(seen.size()) != variants)
            throw std::invalid_argument("all_distinct pattern requires distinct labels");
        if (variants > num_classes)
            throw std::invalid_argument("all_distinct pattern needs num_classes >= variants");
    }
}

std::vector<Canary> make_label_variants(const Canary& base, const std::vector<int>& variant_tokens,
                                        const LabelPattern& pattern, const Vocabulary& vocab) {
    if (variant_tokens.empty()) throw std::invalid_argument("no variant tokens");
    if (pattern.assignment.size() != variant_tokens.size())
        throw std::invalid_argument("label pattern does not cover all variants");
    std::vector<Canary> out;
    out.reserve(variant_tokens.size());
    for (std::size_t i = 0; i < variant_tokens.size(); ++i) {
        const int tok = variant_tokens[i];
        vocab.token(tok);  // range check
        if (tok == base.true_token) throw std::invalid_argument("degenerate variant");
        Canary c = base;
        c.token_ids[static_cast<std::size_t>(c.target_index)] = tok;
        c.true_token = tok;
        c.label = pattern.assignment[i];
        c.spec.label = c.label;
        c.id = vocab.token(tok);
        out.push_back(std::move(c));
    }
    return out;
}

Canary concatenate_canaries(const Canary& a, const Canary& b, const Vocabulary& vocab,
                            int max_seq_len) {
    if (a.spec.kind != b.spec.kind || a.spec.tier != b.spec.tier)
        throw std::invalid_argument("canaries must share kind and tier");
    const auto and_id = vocab.id_of("and");
    if (!and_id) throw std::runtime_error("vocabulary has no 'and' token");

    const int len_a = static_cast<int>(a.token_ids.size()) - 1;  // strip period
    const int len_b = static_cast<int>(b.token_ids.size()) - 1;
    const int combined = len_a + 1 + len_b;
    if (combined + 1 > max_seq_len - 1)
        throw std::invalid_argument("concatenated canary exceeds max_seq_len");

    Canary c;
    c.token_ids.assign(a.token_ids.begin(), a.token_ids.end() - 1);
    c.token_ids.push_back(*and_id);
    c.token_ids.insert(c.token_ids.end(), b.token_ids.begin(), b.token_ids.end());
    c.target_index = combined - 1;  // last token before the final period
    c.true_token = c.token_ids[static_cast<std::size_t>(c.target_index)];
    c.label = a.label;
    c.spec = a.spec;
    c.spec.length = combined;
    c.spec.target_position = c.target_index;
    c.id = a.id + "+" + b.id;
    return c;
}

InjectionResult inject(const std::vector<LabeledExample>& dataset,
                       const std::vector<Canary>& canaries, std::uint64_t seed) {
    std::size_t injected_n = 0;
    for (const auto& c : canaries) {
        c.spec.validate();
        injected_n += static_cast<std::size_t>(c.spec.repetitions);
    }
    const std::size_t total = dataset.size() + injected_n;

    // Choose the slots the canary copies land in, then fill the rest with
    // the original examples in their original order.
    std::vector<std::size_t> slots(total);
    for (std::size_t i = 0; i < total; ++i) slots[i] = i;
    Rng rng(mix_seed(seed, "inject"));
    rng.shuffle(slots);
    slots.resize(injected_n);
    std::sort(slots.begin(), slots.end());

    std::vector<char> taken(total, 0);
    for (std::size_t s : slots) taken[s] = 1;

    InjectionResult out;
    out.dataset.resize(total);
    std::size_t slot_idx = 0;
    for (const auto& c : canaries) {
        InjectionRecord rec;
        rec.canary_id = c.id;
        for (int r = 0; r < c.spec.repetitions; ++r) {
            const std::size_t pos = slots[slot_idx++];
            out.dataset[pos] = LabeledExample{c.token_ids, c.label};
            rec.indices.push_back(pos);
        }
        out.manifest.push_back(std::move(rec));
    }
    std::size_t src = 0;
    for (std::size_t i = 0; i < total; ++i) {
        if (taken[i]) continue;
        out.dataset[i] = dataset[src++];
    }
    return out;
}

void write_canary_manifest(const std::string& path, const std::vector<Canary>& canaries,
                           const std::vector<InjectionRecord>& manifest, const Vocabulary& vocab) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open canary manifest for writing: " + path);
    for (std::size_t i = 0; i < canaries.size(); ++i) {
        const Canary& c = canaries[i];
        f << "canary " << c.id << "\n";
        f << "  kind = " << to_string(c.spec.kind) << "\n";
        f << "  tier = " << to_string(c.spec.tier) << "\n";
        if (c.spec.target_tier_override)
            f << "  target_tier = " << to_string(*c.spec.target_tier_override) << "\n";
        f << "  length = " << c.spec.length << "\n";
        f << "  target_position = " << c.target_index << "\n";
        f << "  repetitions = " << c.spec.repetitions << "\n";
        f << "  seed = " << c.spec.seed << "\n";
        f << "  label = " << c.label << "\n";
        f << "  tokens =";
        for (int id : c.token_ids) f << ' ' << vocab.token(id);
        f << "\n";
        f << "  target_token = " << vocab.token(c.true_token) << "\n";
        f << "  injected =";
        if (i < manifest.size())
            for (std::size_t idx : manifest[i].indices) f << ' ' << idx;
        f << "\n";
    }
}

}  // namespace mixmatch
