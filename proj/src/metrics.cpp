#include "mixmatch/metrics.hpp"

#include <algorithm>
#include <cstdio>
#include <stdexcept>

namespace mixmatch {

namespace {

std::string fmt1(double v) {
    char buf[48];
    std::snprintf(buf, sizeof(buf), "%.1f", v);
    return buf;
}

std::string fmt3(double v) {
    char buf[48];
    std::snprintf(buf, sizeof(buf), "%.3f", v);
    return buf;
}

std::string pad_left(const std::string& s, std::size_t w) {
    return s.size() >= w ? s : std::string(w - s.size(), ' ') + s;
}

std::string pad_right(const std::string& s, std::size_t w) {
    return s.size() >= w ? s : s + std::string(w - s.size(), ' ');
}

constexpr Generator kGeneratorOrder[] = {Generator::exhaustive, Generator::pretrained_lm,
                                         Generator::frankenstein};

const char* group_title(Generator g) {
    switch (g) {
        case Generator::exhaustive: return "Exhaustive Search";
        case Generator::pretrained_lm: return "Language Model";
        case Generator::frankenstein: return "Frankenstein Model";
    }
    return "?";
}

}  // namespace

std::optional<int> beam_size(const RankedCandidates& ranked, int true_token) {
    for (std::size_t i = 0; i < ranked.entries.size(); ++i)
        if (ranked.entries[i].token == true_token) return static_cast<int>(i) + 1;
    return std::nullopt;
}

AttackResult make_attack_result(const std::string& canary_id, const RankedCandidates& pruned,
                                int true_token, int top_k, std::uint64_t seed) {
    AttackResult r;
    r.canary_id = canary_id;
    r.generator = pruned.generator;
    r.top_k = top_k;
    r.seed = seed;
    const auto rank = beam_size(pruned, true_token);
    r.found = rank.has_value();
    r.beam_size = rank.value_or(static_cast<int>(pruned.entries.size()) + 1);
    return r;
}

AggregateResult aggregate(std::span<const AttackResult> results) {
    if (results.empty()) throw std::invalid_argument("empty result group");
    AggregateResult out;
    out.canary_id = results.front().canary_id;
    out.generator = results.front().generator;
    long long top_k_sum = 0;
    long long beam_sum = 0;
    long long found_count = 0;
    for (const auto& r : results) {
        if (r.canary_id != out.canary_id || r.generator != out.generator)
            throw std::invalid_argument("heterogeneous result group");
        top_k_sum += r.top_k;
        if (r.found) {
            beam_sum += r.beam_size;
            ++found_count;
        }
        out.seeds.push_back(r.seed);
    }
    std::sort(out.seeds.begin(), out.seeds.end());
    out.run_count = static_cast<int>(results.size());
    out.mean_top_k = static_cast<double>(top_k_sum) / static_cast<double>(out.run_count);
    out.any_found = found_count > 0;
    out.mean_beam_size =
        out.any_found ? static_cast<double>(beam_sum) / static_cast<double>(found_count) : 0.0;
    out.found_rate = static_cast<double>(found_count) / static_cast<double>(out.run_count);
    return out;
}

ReportTables emit_table(const std::map<int, std::vector<AggregateResult>>& by_repetitions,
                        std::span<const CanaryMeta> metas) {
    ReportTables out;
    out.csv = std::string(kResultCsvHeader) + "\n";

    constexpr std::size_t kNumW = 11;
    std::size_t name_w = 12;
    for (const auto& m : metas) name_w = std::max(name_w, m.target_token.size());

    for (const auto& [reps, aggs] : by_repetitions) {
        const auto find_agg = [&](const std::string& id, Generator g) -> const AggregateResult* {
            for (const auto& a : aggs)
                if (a.canary_id == id && a.generator == g) return &a;
            return nullptr;
        };

        out.text += "repetitions = " + std::to_string(reps) + "\n";
        std::string head1 = pad_right("", name_w) + " |";
        std::string head2 = pad_right("Target Token", name_w) + " |";
        std::string rule(name_w + 1, '-');
        rule += '+';
        for (Generator g : kGeneratorOrder) {
            head1 += ' ' + pad_right(group_title(g), 2 * kNumW + 1) + " |";
            head2 += ' ' + pad_left("Top K", kNumW) + ' ' + pad_left("Beam Size", kNumW) + " |";
            rule += std::string(2 * kNumW + 3, '-') + '+';
        }
        out.text += head1 + "\n" + head2 + "\n" + rule + "\n";

        for (const auto& meta : metas) {
            std::string row = pad_right(meta.target_token, name_w) + " |";
            for (Generator g : kGeneratorOrder) {
                const AggregateResult* a = find_agg(meta.canary_id, g);
                if (a == nullptr) {
                    row += ' ' + pad_left("-", kNumW) + ' ' + pad_left("-", kNumW) + " |";
                    continue;
                }
                row += ' ' + pad_left(fmt1(a->mean_top_k), kNumW);
                row += ' ' + pad_left(a->any_found ? fmt1(a->mean_beam_size) : "inf", kNumW);
                row += " |";

                std::string seeds;
                for (std::uint64_t s : a->seeds) {
                    if (!seeds.empty()) seeds += ';';
                    seeds += std::to_string(s);
                }
                out.csv += meta.canary_id + ',' + meta.target_token + ',' + to_string(meta.kind) +
                           ',' + to_string(meta.tier) + ',' + std::to_string(reps) + ',' +
                           to_string(g) + ',' + std::to_string(a->run_count) + ',' +
                           fmt3(a->found_rate) + ',' + fmt1(a->mean_top_k) + ',' +
                           (a->any_found ? fmt1(a->mean_beam_size) : "") + ',' + seeds + "\n";
            }
            out.text += row + "\n";
        }
        out.text += "\n";
    }
    return out;
}

std::string figure_csv(const std::string& axis_name, std::span<const FigureRow> rows) {
    std::string out = axis_name + ",generator,mean_top_k,mean_beam_size,found_rate\n";
    for (const auto& r : rows) {
        out += r.axis_value + ',' + to_string(r.generator) + ',' + fmt1(r.mean_top_k) + ',' +
               (r.any_found ? fmt1(r.mean_beam_size) : "") + ',' + fmt3(r.found_rate) + "\n";
    }
    return out;
}

}  // namespace mixmatch
