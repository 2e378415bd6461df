#include "mixmatch/attack.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "mixmatch/metrics.hpp"
#include "mixmatch/parallel.hpp"

namespace mixmatch {

namespace {

void check_query(const MaskedQuery& query, const ModelConfig& cfg) {
    int masks = 0;
    for (int t : query.token_ids)
        if (t == cfg.specials.mask) ++masks;
    if (masks != 1) throw std::invalid_argument("query must contain exactly one MASK");
    if (query.target_index < 0 ||
        query.target_index >= static_cast<int>(query.token_ids.size()) ||
        query.token_ids[static_cast<std::size_t>(query.target_index)] != cfg.specials.mask)
        throw std::invalid_argument("no MASK at position");
    if (query.label < 0 || query.label >= cfg.num_classes)
        throw std::invalid_argument("query label out of range");
}

RankedCandidates generate_from(const ModelBundle& bundle, const MaskedQuery& query,
                               const Cutoff& cutoff, Generator generator) {
    check_query(query, bundle.config);
    const auto probs = forward_mlm(bundle, query.token_ids, query.target_index);
    const int v = static_cast<int>(probs.size());

    RankedCandidates out;
    out.generator = generator;
    out.score_kind = ScoreKind::mlm_probability;
    out.entries.resize(static_cast<std::size_t>(v));
    for (int i = 0; i < v; ++i) out.entries[static_cast<std::size_t>(i)] = {i, probs[static_cast<std::size_t>(i)]};
    std::sort(out.entries.begin(), out.entries.end(), [](const CandidateEntry& a, const CandidateEntry& b) {
        if (a.score != b.score) return a.score > b.score;
        return a.token < b.token;
    });

    std::size_t keep = out.entries.size();
    switch (cutoff.mode) {
        case Cutoff::Mode::probability_floor: {
            keep = 0;
            while (keep < out.entries.size() && out.entries[keep].score >= cutoff.value) ++keep;
            break;
        }
        case Cutoff::Mode::cumulative_mass: {
            double mass = 0.0;
            keep = 0;
            while (keep < out.entries.size() && mass < cutoff.value) {
                mass += out.entries[keep].score;
                ++keep;
            }
            break;
        }
        case Cutoff::Mode::top_n: {
            const auto n = static_cast<long long>(std::llround(cutoff.value));
            keep = n < 0 ? 0 : std::min<std::size_t>(out.entries.size(), static_cast<std::size_t>(n));
            break;
        }
    }
    if (keep == 0) throw std::runtime_error("cutoff eliminated all candidates");
    out.entries.resize(keep);
    out.trace.rule = cutoff.describe();
    out.trace.generated = v;
    out.trace.after_cutoff = static_cast<int>(keep);
    return out;
}

}  // namespace

const char* to_string(Generator g) {
    switch (g) {
        case Generator::exhaustive: return "exhaustive";
        case Generator::pretrained_lm: return "pretrained_lm";
        case Generator::frankenstein: return "frankenstein";
    }
    return "?";
}

const char* to_string(ScoreKind s) {
    return s == ScoreKind::mlm_probability ? "mlm_probability" : "cls_loss";
}

std::string Cutoff::describe() const {
    char buf[64];
    switch (mode) {
        case Mode::probability_floor:
            std::snprintf(buf, sizeof(buf), "probability_floor(%.9g)", value);
            break;
        case Mode::cumulative_mass:
            std::snprintf(buf, sizeof(buf), "cumulative_mass(%.9g)", value);
            break;
        case Mode::top_n:
            std::snprintf(buf, sizeof(buf), "top_n(%lld)", static_cast<long long>(std::llround(value)));
            break;
    }
    return buf;
}

MaskedQuery make_query(const Canary& canary, const ModelConfig& cfg) {
    MaskedQuery q;
    q.token_ids = build_model_input(canary.token_ids, cfg);
    q.target_index = canary.target_index + 1;  // shifted by [CLS]
    if (q.target_index >= static_cast<int>(q.token_ids.size()))
        throw std::invalid_argument("canary target truncated away by max_seq_len");
    q.true_token = canary.true_token;
    q.label = canary.label;
    q.token_ids[static_cast<std::size_t>(q.target_index)] = cfg.specials.mask;
    return q;
}

RankedCandidates generate_candidates(const ModelBundle& frankenstein, const MaskedQuery& query,
                                     const Cutoff& cutoff) {
    if (frankenstein.provenance != Provenance::frankenstein)
        throw std::invalid_argument("bundle provenance must be frankenstein");
    return generate_from(frankenstein, query, cutoff, Generator::frankenstein);
}

RankedCandidates generate_candidates_lm(const ModelBundle& pretrained, const MaskedQuery& query,
                                        const Cutoff& cutoff) {
    if (pretrained.provenance != Provenance::pretrained)
        throw std::invalid_argument("bundle provenance must be pretrained");
    return generate_from(pretrained, query, cutoff, Generator::pretrained_lm);
}

RankedCandidates filter_candidates(const RankedCandidates& candidates, const Vocabulary& vocab) {
    RankedCandidates out;
    out.generator = candidates.generator;
    out.score_kind = candidates.score_kind;
    out.trace = candidates.trace;
    out.entries.reserve(candidates.entries.size());
    for (const auto& e : candidates.entries) {
        const TokenClass cls = vocab.classify(e.token);
        if (cls == TokenClass::continuation || cls == TokenClass::punctuation ||
            cls == TokenClass::special)
            continue;
        out.entries.push_back(e);
    }
    out.trace.filtered_removed +=
        static_cast<int>(candidates.entries.size() - out.entries.size());
    if (out.entries.empty()) throw std::runtime_error("empty after filtering");
    return out;
}

RankedCandidates prune_candidates(const ModelBundle& target, const MaskedQuery& query,
                                  const RankedCandidates& candidates) {
    if (!target.cls_head) throw std::runtime_error("bundle has no classification head");
    if (candidates.entries.empty()) throw std::invalid_argument("no candidates to prune");
    check_query(query, target.config);

    struct Scored {
        double loss;
        int prior_rank;
        int token;
    };
    std::vector<Scored> scored(candidates.entries.size());
    parallel_for(static_cast<int>(candidates.entries.size()), [&](int i) {
        std::vector<int> tokens = query.token_ids;
        tokens[static_cast<std::size_t>(query.target_index)] =
            candidates.entries[static_cast<std::size_t>(i)].token;
        const auto probs = forward_cls(target, tokens);
        scored[static_cast<std::size_t>(i)] = {cross_entropy(probs, query.label), i,
                                               candidates.entries[static_cast<std::size_t>(i)].token};
    });
    std::sort(scored.begin(), scored.end(), [](const Scored& a, const Scored& b) {
        if (a.loss != b.loss) return a.loss < b.loss;
        if (a.prior_rank != b.prior_rank) return a.prior_rank < b.prior_rank;
        return a.token < b.token;
    });

    RankedCandidates out;
    out.generator = candidates.generator;
    out.score_kind = ScoreKind::cls_loss;
    out.trace = candidates.trace;
    out.entries.reserve(scored.size());
    for (const auto& s : scored) out.entries.push_back({s.token, s.loss});
    return out;
}

RankedCandidates exhaustive_search(const ModelBundle& target, const MaskedQuery& query,
                                   const Vocabulary& vocab) {
    RankedCandidates full;
    full.generator = Generator::exhaustive;
    full.score_kind = ScoreKind::mlm_probability;
    full.entries.resize(static_cast<std::size_t>(vocab.size()));
    for (int i = 0; i < vocab.size(); ++i) full.entries[static_cast<std::size_t>(i)] = {i, 0.0};
    full.trace.rule = "exhaustive";
    full.trace.generated = vocab.size();
    full.trace.after_cutoff = vocab.size();
    return prune_candidates(target, query, filter_candidates(full, vocab));
}

AttackOutcome run_attack(const ModelBundle& pretrained, const ModelBundle& finetuned,
                         const MaskedQuery& query, const AttackSettings& settings,
                         const Vocabulary& vocab, const std::string& canary_id,
                         std::uint64_t seed) {
    const auto stage = [](const char* name, auto&& fn) {
        try {
            return fn();
        } catch (const std::invalid_argument& e) {
            throw std::invalid_argument(std::string(name) + ": " + e.what());
        } catch (const std::runtime_error& e) {
            throw std::runtime_error(std::string(name) + ": " + e.what());
        }
    };

    RankedCandidates generated;
    int top_k = 0;
    switch (settings.generator) {
        case Generator::exhaustive: {
            generated = stage("generate", [&] {
                RankedCandidates full;
                full.generator = Generator::exhaustive;
                full.score_kind = ScoreKind::mlm_probability;
                full.entries.resize(static_cast<std::size_t>(vocab.size()));
                for (int i = 0; i < vocab.size(); ++i)
                    full.entries[static_cast<std::size_t>(i)] = {i, 0.0};
                full.trace.rule = "exhaustive";
                full.trace.generated = vocab.size();
                full.trace.after_cutoff = vocab.size();
                return full;
            });
            top_k = vocab.size();
            break;
        }
        case Generator::frankenstein: {
            generated = stage("generate", [&] {
                const ModelBundle frank = assemble_frankenstein(finetuned, pretrained);
                return generate_candidates(frank, query, settings.cutoff);
            });
            top_k = static_cast<int>(generated.entries.size());
            break;
        }
        case Generator::pretrained_lm: {
            generated = stage("generate",
                              [&] { return generate_candidates_lm(pretrained, query, settings.cutoff); });
            top_k = static_cast<int>(generated.entries.size());
            break;
        }
    }

    RankedCandidates filtered = settings.filters
                                    ? stage("filter", [&] { return filter_candidates(generated, vocab); })
                                    : generated;
    RankedCandidates pruned =
        stage("prune", [&] { return prune_candidates(finetuned, query, filtered); });

    AttackOutcome out;
    out.result = make_attack_result(canary_id, pruned, query.true_token, top_k, seed);
    out.pipeline = std::move(pruned);
    return out;
}

void write_candidate_dump(const std::string& path, const RankedCandidates& ranked,
                          const Vocabulary& vocab) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open candidate dump for writing: " + path);
    f << "# rank\ttoken\tscore\tgenerator\tscore_kind\trule=" << ranked.trace.rule
      << "\tgenerated=" << ranked.trace.generated << "\ttop_k=" << ranked.trace.after_cutoff
      << "\tfiltered=" << ranked.trace.filtered_removed << "\n";
    char buf[64];
    for (std::size_t i = 0; i < ranked.entries.size(); ++i) {
        std::snprintf(buf, sizeof(buf), "%.9g", ranked.entries[i].score);
        f << (i + 1) << '\t' << vocab.token(ranked.entries[i].token) << '\t' << buf << '\t'
          << to_string(ranked.generator) << '\t' << to_string(ranked.score_kind) << '\n';
    }
}

}  // namespace mixmatch
