#include "mixmatch/harness.hpp"

#include <algorithm>
#include <cctype>
#include <chrono>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <map>
#include <ostream>
#include <set>
#include <sstream>

#include "mixmatch/parallel.hpp"
#include "mixmatch/rng.hpp"

namespace fs = std::filesystem;

namespace mixmatch {

namespace {

std::string hex64(std::uint64_t v) {
    char buf[24];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

std::string sanitize(const std::string& s) {
    std::string out;
    for (char c : s)
        out += (std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '_') ? c : '_';
    return out;
}

std::string file_text(const fs::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open " + path.string());
    std::ostringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open for writing: " + path.string());
    f << text;
    if (!f) throw std::runtime_error("failed writing: " + path.string());
}

std::string iso_now() {
    const auto now = std::chrono::system_clock::now();
    const std::time_t t = std::chrono::system_clock::to_time_t(now);
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

CanaryKind parse_kind(const std::string& s) {
    if (s == "organic") return CanaryKind::organic;
    if (s == "random") return CanaryKind::random;
    throw std::runtime_error("bad canary kind in results file: " + s);
}

Tier parse_tier_str(const std::string& s) {
    if (s == "low") return Tier::low;
    if (s == "mid") return Tier::mid;
    if (s == "high") return Tier::high;
    throw std::runtime_error("bad tier in results file: " + s);
}

Generator parse_generator_str(const std::string& s) {
    if (s == "exhaustive") return Generator::exhaustive;
    if (s == "pretrained_lm") return Generator::pretrained_lm;
    if (s == "frankenstein") return Generator::frankenstein;
    throw std::runtime_error("bad generator in results file: " + s);
}

// --------------------------------------------------------------------------
// Prepared experiment state shared by the run and ablation paths.
// --------------------------------------------------------------------------

struct Prepared {
    Corpus corpus;
    std::vector<LabeledExample> train, val;
    ModelConfig model_cfg;
    std::vector<Canary> canaries;
    Cutoff cutoff;
};

Prepared prepare(const ExperimentConfig& cfg) {
    cfg.validate();
    Prepared prep;
    prep.corpus = cfg.corpus_file.empty() ? generate_corpus(cfg.corpus)
                                          : corpus_from_tsv(cfg.corpus_file, cfg.corpus.vocab_size);
    split_corpus(prep.corpus, cfg.val_fraction, cfg.corpus.seed, prep.train, prep.val);

    prep.model_cfg.vocab_size = prep.corpus.vocab.size();
    prep.model_cfg.max_seq_len = cfg.max_seq_len;
    prep.model_cfg.embed_dim = cfg.embed_dim;
    prep.model_cfg.num_layers = cfg.num_layers;
    prep.model_cfg.num_heads = cfg.num_heads;
    prep.model_cfg.hidden_dim = cfg.hidden_dim;
    prep.model_cfg.num_classes = prep.corpus.num_classes;
    prep.model_cfg.dropout_rate = cfg.dropout;
    prep.model_cfg.specials = prep.corpus.vocab.specials();
    prep.model_cfg.validate();

    std::map<std::string, int> id_uses;
    for (const auto& spec_in : cfg.canaries) {
        CanarySpec spec = spec_in;
        spec.low_quantile = cfg.low_quantile;
        spec.high_quantile = cfg.high_quantile;
        if (spec.label < 0) {
            Rng label_rng(mix_seed(spec.seed, "canary_label"));
            spec.label = label_rng.below_int(prep.corpus.num_classes);
        }
        Canary canary;
        try {
            canary = generate_canary(spec, prep.corpus.vocab);
        } catch (const std::runtime_error& e) {
            throw std::runtime_error(std::string(e.what()) +
                                     "; increase examples_per_class or vocabulary size");
        }
        const int uses = ++id_uses[canary.id];
        if (uses > 1) canary.id += "_" + std::to_string(uses);
        prep.canaries.push_back(std::move(canary));
    }

    prep.cutoff = cfg.attack.resolve_cutoff(prep.model_cfg.vocab_size);
    return prep;
}

std::vector<CanaryMeta> make_metas(const std::vector<Canary>& canaries, const Vocabulary& vocab) {
    std::vector<CanaryMeta> metas;
    for (const auto& c : canaries)
        metas.push_back({c.id, vocab.token(c.true_token), c.spec.kind, c.spec.tier});
    return metas;
}

void write_corpus_stats(const fs::path& path, const Prepared& prep, const ExperimentConfig& cfg) {
    const TierStats stats =
        corpus_tier_stats(prep.corpus.vocab, cfg.low_quantile, cfg.high_quantile);
    int numerics = 0;
    for (int id = 0; id < prep.corpus.vocab.size(); ++id)
        if (prep.corpus.vocab.classify(id) == TokenClass::numeric) ++numerics;
    std::ostringstream o;
    o << "vocab_size = " << prep.corpus.vocab.size() << "\n";
    o << "num_classes = " << prep.corpus.num_classes << "\n";
    o << "word_tokens_low = " << stats.low << "\n";
    o << "word_tokens_mid = " << stats.mid << "\n";
    o << "word_tokens_high = " << stats.high << "\n";
    o << "numeric_tokens = " << numerics << "\n";
    o << "train_examples = " << prep.train.size() << "\n";
    o << "val_examples = " << prep.val.size() << "\n";
    write_text(path, o.str());
}

ModelBundle get_or_pretrain(const fs::path& dir, const ExperimentConfig& cfg, const Prepared& prep,
                            std::uint64_t run_seed) {
    const std::uint64_t hash = pretrain_config_hash(cfg, run_seed);
    const fs::path ckpt = dir / ("pretrained_" + hex64(hash) + ".ckpt");
    if (fs::exists(ckpt)) {
        ModelBundle cached = load_bundle(ckpt.string());
        if (!(cached.config == prep.model_cfg))
            throw std::runtime_error("cached checkpoint does not match the configuration: " +
                                     ckpt.string());
        return cached;
    }
    std::vector<std::vector<int>> docs;
    docs.reserve(prep.train.size());
    for (const auto& ex : prep.train) docs.push_back(ex.tokens);
    PretrainParams params = cfg.pretrain;
    if (!cfg.pretrain_shared) params.seed = mix_seed(params.seed, run_seed);
    PretrainResult result = pretrain_mlm(docs, prep.model_cfg, params);
    save_bundle(ckpt.string(), result.bundle);
    write_curve_csv((dir / "curve_pretrain.csv").string(), result.curve);
    return result.bundle;
}

// One canary query plus its reporting identity.
struct QueryJob {
    const Canary* canary = nullptr;
    MaskedQuery query;
    std::string row_id;
    int repetitions = 0;
};

std::vector<ResultRow> execute_arm(const ExperimentConfig& cfg, const Prepared& prep,
                                   const ModelBundle& pretrained,
                                   const std::vector<Canary>& arm_canaries,
                                   const std::vector<QueryJob>& jobs, std::uint64_t seed,
                                   const std::string& arm_tag, const fs::path& arm_dir) {
    fs::create_directories(arm_dir);
    const InjectionResult inj =
        inject(prep.train, arm_canaries, mix_seed(seed, "inject:" + arm_tag));
    write_canary_manifest((arm_dir / "canaries.txt").string(), arm_canaries, inj.manifest,
                          prep.corpus.vocab);

    FinetuneParams params = cfg.finetune;
    params.seed = mix_seed(seed, "finetune:" + arm_tag);
    const FinetuneResult ft = fine_tune_classifier(pretrained, inj.dataset, prep.val, params);
    save_bundle((arm_dir / "finetuned.ckpt").string(), ft.bundle);
    write_curve_csv((arm_dir / "curve_finetune.csv").string(), ft.curve);
    {
        char buf[160];
        std::snprintf(buf, sizeof(buf),
                      "epochs_run = %d\ntrain_accuracy = %.4f\nval_accuracy = %.4f\n"
                      "best_val_loss = %.6f\n",
                      ft.stopped_after_epoch, ft.train_accuracy, ft.val_accuracy, ft.best_val_loss);
        write_text(arm_dir / "train_summary.txt", buf);
    }

    std::vector<ResultRow> rows;
    for (const auto& job : jobs) {
        for (Generator g : cfg.attack.generators) {
            AttackSettings settings{g, prep.cutoff, cfg.attack.filters};
            const AttackOutcome outcome = run_attack(pretrained, ft.bundle, job.query, settings,
                                                     prep.corpus.vocab, job.row_id, seed);
            write_candidate_dump(
                (arm_dir / ("candidates_" + sanitize(job.row_id) + "_" + to_string(g) + ".txt"))
                    .string(),
                outcome.pipeline, prep.corpus.vocab);
            ResultRow row;
            row.canary_id = job.row_id;
            row.target_token = prep.corpus.vocab.token(job.query.true_token);
            row.kind = job.canary->spec.kind;
            row.tier = job.canary->spec.tier;
            row.repetitions = job.repetitions;
            row.generator = g;
            row.top_k = outcome.result.top_k;
            row.beam_size = outcome.result.beam_size;
            row.found = outcome.result.found;
            row.seed = seed;
            rows.push_back(std::move(row));
        }
    }
    write_result_rows((arm_dir / "results.csv").string(), rows);
    return rows;
}

// Aggregates rows grouped by (repetitions, canary, generator), ordered by
// the meta list then the configured generator order.
std::map<int, std::vector<AggregateResult>> aggregate_rows(
    const std::vector<ResultRow>& rows, const std::vector<CanaryMeta>& metas,
    const std::vector<Generator>& generators) {
    std::set<int> reps;
    for (const auto& r : rows) reps.insert(r.repetitions);
    std::map<int, std::vector<AggregateResult>> out;
    for (int rep : reps) {
        auto& aggs = out[rep];
        for (const auto& meta : metas) {
            for (Generator g : generators) {
                std::vector<AttackResult> group;
                for (const auto& r : rows) {
                    if (r.repetitions != rep || r.canary_id != meta.canary_id || r.generator != g)
                        continue;
                    AttackResult a;
                    a.canary_id = r.canary_id;
                    a.generator = r.generator;
                    a.top_k = r.top_k;
                    a.beam_size = r.beam_size;
                    a.found = r.found;
                    a.seed = r.seed;
                    group.push_back(std::move(a));
                }
                if (!group.empty()) aggs.push_back(aggregate(group));
            }
        }
    }
    return out;
}

std::vector<CanaryMeta> metas_from_rows(const std::vector<ResultRow>& rows) {
    std::vector<CanaryMeta> metas;
    std::set<std::string> seen;
    for (const auto& r : rows) {
        if (!seen.insert(r.canary_id).second) continue;
        metas.push_back({r.canary_id, r.target_token, r.kind, r.tier});
    }
    return metas;
}

void emit_reports(const fs::path& dir, const std::vector<ResultRow>& rows,
                  const std::vector<CanaryMeta>& metas, const std::vector<Generator>& generators) {
    const auto by_rep = aggregate_rows(rows, metas, generators);
    const ReportTables tables = emit_table(by_rep, metas);
    write_text(dir / "aggregate.csv", tables.csv);
    for (const auto& [rep, aggs] : by_rep) {
        std::map<int, std::vector<AggregateResult>> one;
        one[rep] = aggs;
        write_text(dir / ("table_rep_" + std::to_string(rep) + ".txt"), emit_table(one, metas).text);
    }
    write_text(dir / "tables.txt", tables.text);
}

// Pooled per-(axis, generator) figure rows from raw result rows.
template <typename AxisOf>
std::string pooled_figure_csv(const std::string& axis_name, const std::vector<ResultRow>& rows,
                              const std::vector<Generator>& generators, AxisOf&& axis_of) {
    std::vector<std::string> axes;
    for (const auto& r : rows) {
        const std::string a = axis_of(r);
        if (std::find(axes.begin(), axes.end(), a) == axes.end()) axes.push_back(a);
    }
    std::vector<FigureRow> figure;
    for (const auto& axis : axes) {
        for (Generator g : generators) {
            long long top_sum = 0, beam_sum = 0, found_n = 0, n = 0;
            for (const auto& r : rows) {
                if (axis_of(r) != axis || r.generator != g) continue;
                ++n;
                top_sum += r.top_k;
                if (r.found) {
                    beam_sum += r.beam_size;
                    ++found_n;
                }
            }
            if (n == 0) continue;
            FigureRow fr;
            fr.axis_value = axis;
            fr.generator = g;
            fr.mean_top_k = static_cast<double>(top_sum) / static_cast<double>(n);
            fr.any_found = found_n > 0;
            fr.mean_beam_size =
                fr.any_found ? static_cast<double>(beam_sum) / static_cast<double>(found_n) : 0.0;
            fr.found_rate = static_cast<double>(found_n) / static_cast<double>(n);
            figure.push_back(std::move(fr));
        }
    }
    return figure_csv(axis_name, figure);
}

struct ManifestInfo {
    std::uint64_t config_hash = 0;
    std::vector<std::uint64_t> seeds;
    std::vector<std::string> arms;
    std::vector<std::uint64_t> failed_seeds;
    std::vector<std::pair<std::string, std::uint64_t>> checkpoints;
};

void write_manifest(const fs::path& path, const ManifestInfo& info) {
    std::ostringstream o;
    o << "config_hash = " << hex64(info.config_hash) << "\n";
    o << "created = " << iso_now() << "\n";
    o << "seeds = ";
    for (std::size_t i = 0; i < info.seeds.size(); ++i) o << (i ? ";" : "") << info.seeds[i];
    o << "\narms = ";
    for (std::size_t i = 0; i < info.arms.size(); ++i) o << (i ? ";" : "") << info.arms[i];
    o << "\nstatus = " << (info.failed_seeds.empty() ? "complete" : "partial") << "\n";
    o << "failed_seeds = ";
    for (std::size_t i = 0; i < info.failed_seeds.size(); ++i)
        o << (i ? ";" : "") << info.failed_seeds[i];
    o << "\n";
    for (const auto& [name, hash] : info.checkpoints)
        o << "checkpoint " << name << " = " << hex64(hash) << "\n";
    write_text(path, o.str());
}

std::uint64_t file_hash(const fs::path& path) { return fnv1a(file_text(path)); }

}  // namespace

void write_result_rows(const std::string& path, const std::vector<ResultRow>& rows) {
    std::ostringstream o;
    o << kRowCsvHeader << "\n";
    for (const auto& r : rows) {
        o << r.canary_id << ',' << r.target_token << ',' << to_string(r.kind) << ','
          << to_string(r.tier) << ',' << r.repetitions << ',' << to_string(r.generator) << ','
          << r.top_k << ',' << r.beam_size << ',' << (r.found ? 1 : 0) << ',' << r.seed << "\n";
    }
    write_text(path, o.str());
}

std::vector<ResultRow> read_result_rows(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open results file: " + path);
    std::string line;
    if (!std::getline(f, line) || line != kRowCsvHeader)
        throw std::runtime_error("bad results header in " + path);
    std::vector<ResultRow> rows;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        std::vector<std::string> cols;
        std::string cur;
        for (char c : line) {
            if (c == ',') {
                cols.push_back(cur);
                cur.clear();
            } else {
                cur += c;
            }
        }
        cols.push_back(cur);
        if (cols.size() != 10) throw std::runtime_error("bad results row in " + path);
        ResultRow r;
        r.canary_id = cols[0];
        r.target_token = cols[1];
        r.kind = parse_kind(cols[2]);
        r.tier = parse_tier_str(cols[3]);
        r.repetitions = std::stoi(cols[4]);
        r.generator = parse_generator_str(cols[5]);
        r.top_k = std::stoi(cols[6]);
        r.beam_size = std::stoi(cols[7]);
        r.found = cols[8] == "1";
        r.seed = std::stoull(cols[9]);
        rows.push_back(std::move(r));
    }
    return rows;
}

void run_pretrain(const ExperimentConfig& cfg, const std::string& out_dir) {
    set_max_threads(cfg.threads);
    const Prepared prep = prepare(cfg);
    const fs::path out(out_dir);
    fs::create_directories(out);
    write_text(out / "config.txt", canonical_config(cfg));
    prep.corpus.vocab.save((out / "vocab.txt").string());
    write_corpus_stats(out / "corpus_stats.txt", prep, cfg);
    get_or_pretrain(out, cfg, prep, cfg.seeds.front());
}

void run_experiment(const ExperimentConfig& cfg, const std::string& out_dir, bool attack_phase) {
    set_max_threads(cfg.threads);
    const Prepared prep = prepare(cfg);
    const fs::path out(out_dir);
    fs::create_directories(out);
    write_text(out / "config.txt", canonical_config(cfg));
    prep.corpus.vocab.save((out / "vocab.txt").string());
    write_corpus_stats(out / "corpus_stats.txt", prep, cfg);

    ManifestInfo manifest;
    manifest.config_hash = full_config_hash(cfg);
    manifest.seeds = cfg.seeds;

    ModelBundle shared_pretrained;
    if (cfg.pretrain_shared) {
        shared_pretrained = get_or_pretrain(out, cfg, prep, cfg.seeds.front());
        const fs::path ckpt =
            out / ("pretrained_" + hex64(pretrain_config_hash(cfg, cfg.seeds.front())) + ".ckpt");
        manifest.checkpoints.emplace_back(ckpt.filename().string(), file_hash(ckpt));
    }

    std::vector<int> arms = cfg.repetitions;
    const bool arm_per_spec = arms.empty();
    if (arm_per_spec) arms = {0};
    for (int arm : arms)
        manifest.arms.push_back(arm_per_spec ? std::string("spec") : std::to_string(arm));

    std::vector<ResultRow> all_rows;
    std::string error_log;
    for (std::uint64_t seed : cfg.seeds) {
        try {
            for (std::uint64_t bad : cfg.fail_seeds_for_test)
                if (bad == seed) throw std::runtime_error("injected test failure");

            const fs::path seed_dir = out / ("seed_" + std::to_string(seed));
            fs::create_directories(seed_dir);
            ModelBundle per_seed_pretrained;
            if (!cfg.pretrain_shared) per_seed_pretrained = get_or_pretrain(seed_dir, cfg, prep, seed);
            const ModelBundle& pretrained =
                cfg.pretrain_shared ? shared_pretrained : per_seed_pretrained;

            for (int arm : arms) {
                std::vector<Canary> arm_canaries = prep.canaries;
                if (arm > 0)
                    for (auto& c : arm_canaries) c.spec.repetitions = arm;
                std::vector<QueryJob> jobs;
                for (const auto& c : arm_canaries) {
                    QueryJob job;
                    job.canary = &c;
                    job.query = make_query(c, prep.model_cfg);
                    job.row_id = c.id;
                    job.repetitions = c.spec.repetitions;
                    jobs.push_back(std::move(job));
                }
                const std::string arm_tag = arm_per_spec ? "spec" : std::to_string(arm);
                const fs::path arm_dir = seed_dir / ("rep_" + arm_tag);
                if (!attack_phase) jobs.clear();
                auto rows = execute_arm(cfg, prep, pretrained, arm_canaries, jobs, seed, arm_tag,
                                        arm_dir);
                all_rows.insert(all_rows.end(), rows.begin(), rows.end());
            }
        } catch (const std::exception& e) {
            manifest.failed_seeds.push_back(seed);
            error_log += "seed " + std::to_string(seed) + ": " + e.what() + "\n";
        }
    }

    if (!error_log.empty()) write_text(out / "errors.log", error_log);
    if (attack_phase) {
        const auto metas = make_metas(prep.canaries, prep.corpus.vocab);
        emit_reports(out, all_rows, metas, cfg.attack.generators);
        write_text(out / "figure_repetitions.csv",
                   pooled_figure_csv("repetitions", all_rows, cfg.attack.generators,
                                     [](const ResultRow& r) { return std::to_string(r.repetitions); }));
    }
    write_manifest(out / "manifest.txt", manifest);
}

AblationKind parse_ablation_kind(const std::string& name) {
    if (name == "label_patterns") return AblationKind::label_patterns;
    if (name == "token_position") return AblationKind::token_position;
    if (name == "canary_length") return AblationKind::canary_length;
    throw std::invalid_argument("unknown ablation: " + name +
                                " (expected label_patterns, token_position or canary_length)");
}

namespace {

void run_label_patterns(const ExperimentConfig& cfg, const Prepared& prep, const fs::path& out,
                        ManifestInfo& manifest, const ModelBundle& pretrained) {
    const Vocabulary& vocab = prep.corpus.vocab;
    const int variants = cfg.ablation.variants;
    if (variants < 1) throw std::invalid_argument("ablation variants must be >= 1");
    if (variants > prep.model_cfg.num_classes)
        throw std::invalid_argument("all_distinct pattern needs num_classes >= variants");

    // Numeric variant values plus one dummy base target, most frequent first.
    std::vector<int> numerics;
    for (int id = 0; id < vocab.size(); ++id)
        if (vocab.classify(id) == TokenClass::numeric) numerics.push_back(id);
    std::sort(numerics.begin(), numerics.end(), [&](int a, int b) {
        if (vocab.frequency(a) != vocab.frequency(b)) return vocab.frequency(a) > vocab.frequency(b);
        return a < b;
    });
    if (static_cast<int>(numerics.size()) < variants + 1)
        throw std::runtime_error("vocabulary has too few numeric tokens for the label ablation");
    const std::vector<int> variant_tokens(numerics.begin(), numerics.begin() + variants);
    const int dummy_target = numerics[static_cast<std::size_t>(variants)];

    CanarySpec base_spec;
    base_spec.kind = CanaryKind::organic;
    base_spec.tier = Tier::low;
    base_spec.length = 5;
    base_spec.target_position = 4;
    base_spec.label = 0;
    base_spec.repetitions = cfg.ablation.repetitions;
    base_spec.seed = cfg.ablation.seed;
    base_spec.low_quantile = cfg.low_quantile;
    base_spec.high_quantile = cfg.high_quantile;
    Canary base = generate_canary(base_spec, vocab);
    base.token_ids[static_cast<std::size_t>(base.target_index)] = dummy_target;
    base.true_token = dummy_target;

    std::vector<ResultRow> all_rows;
    for (LabelPattern::Mode mode : cfg.ablation.patterns) {
        LabelPattern pattern;
        switch (mode) {
            case LabelPattern::Mode::all_same: pattern = LabelPattern::same(0, variants); break;
            case LabelPattern::Mode::all_distinct: pattern = LabelPattern::distinct(variants); break;
            case LabelPattern::Mode::mixed: pattern = LabelPattern::mixed_pairs(variants); break;
        }
        pattern.validate(variants, prep.model_cfg.num_classes);
        auto pattern_canaries = make_label_variants(base, variant_tokens, pattern, vocab);
        for (auto& c : pattern_canaries) {
            c.spec.repetitions = cfg.ablation.repetitions;
            c.id = std::string(to_string(mode)) + "/" + c.id;
        }

        std::vector<ResultRow> pattern_rows;
        for (std::uint64_t seed : cfg.seeds) {
            std::vector<QueryJob> jobs;
            for (const auto& c : pattern_canaries) {
                QueryJob job;
                job.canary = &c;
                job.query = make_query(c, prep.model_cfg);
                job.row_id = c.id;
                job.repetitions = c.spec.repetitions;
                jobs.push_back(std::move(job));
            }
            const std::string tag = std::string("pattern_") + to_string(mode);
            const fs::path arm_dir =
                out / tag / ("seed_" + std::to_string(seed));
            auto rows = execute_arm(cfg, prep, pretrained, pattern_canaries, jobs, seed, tag,
                                    arm_dir);
            pattern_rows.insert(pattern_rows.end(), rows.begin(), rows.end());
        }
        emit_reports(out / (std::string("pattern_") + to_string(mode)), pattern_rows,
                     metas_from_rows(pattern_rows), cfg.attack.generators);
        all_rows.insert(all_rows.end(), pattern_rows.begin(), pattern_rows.end());
    }

    write_text(out / "figure_label_patterns.csv",
               pooled_figure_csv("pattern", all_rows, cfg.attack.generators,
                                 [](const ResultRow& r) {
                                     return r.canary_id.substr(0, r.canary_id.find('/'));
                                 }));
    manifest.arms.push_back("label_patterns");
}

void run_token_position(const ExperimentConfig& cfg, const Prepared& prep, const fs::path& out,
                        ManifestInfo& manifest, const ModelBundle& pretrained) {
    std::vector<int> indices = cfg.ablation.position_canaries;
    if (indices.empty())
        for (std::size_t i = 0; i < prep.canaries.size(); ++i) indices.push_back(static_cast<int>(i));
    if (indices.empty()) throw std::invalid_argument("token_position ablation needs canaries");

    std::vector<Canary> selected;
    for (int idx : indices) {
        Canary c = prep.canaries[static_cast<std::size_t>(idx)];
        c.spec.repetitions = cfg.ablation.repetitions;
        selected.push_back(std::move(c));
    }

    std::vector<ResultRow> all_rows;
    for (std::uint64_t seed : cfg.seeds) {
        std::vector<QueryJob> jobs;
        for (const auto& c : selected) {
            const int content_len = static_cast<int>(c.token_ids.size()) - 1;
            for (int pos = 0; pos < content_len; ++pos) {
                QueryJob job;
                job.canary = &c;
                job.query.token_ids = build_model_input(c.token_ids, prep.model_cfg);
                job.query.target_index = pos + 1;  // [CLS] shift
                job.query.true_token = c.token_ids[static_cast<std::size_t>(pos)];
                job.query.label = c.label;
                job.query.token_ids[static_cast<std::size_t>(job.query.target_index)] =
                    prep.model_cfg.specials.mask;
                job.row_id = c.id + "@p" + std::to_string(pos);
                job.repetitions = c.spec.repetitions;
                jobs.push_back(std::move(job));
            }
        }
        const fs::path arm_dir = out / ("seed_" + std::to_string(seed)) / "positions";
        auto rows =
            execute_arm(cfg, prep, pretrained, selected, jobs, seed, "positions", arm_dir);
        all_rows.insert(all_rows.end(), rows.begin(), rows.end());
    }

    emit_reports(out, all_rows, metas_from_rows(all_rows), cfg.attack.generators);
    write_text(out / "figure_token_position.csv",
               pooled_figure_csv("position", all_rows, cfg.attack.generators,
                                 [](const ResultRow& r) {
                                     return r.canary_id.substr(r.canary_id.rfind("@p") + 2);
                                 }));
    manifest.arms.push_back("token_position");
}

void run_canary_length(const ExperimentConfig& cfg, const Prepared& prep, const fs::path& out,
                       ManifestInfo& manifest, const ModelBundle& pretrained) {
    if (cfg.ablation.length_pairs.empty())
        throw std::invalid_argument("canary_length ablation needs length_pairs");

    std::vector<Canary> short_canaries;
    std::set<int> used;
    for (const auto& [a, b] : cfg.ablation.length_pairs) {
        for (int idx : {a, b}) {
            if (used.insert(idx).second) {
                Canary c = prep.canaries[static_cast<std::size_t>(idx)];
                c.spec.repetitions = cfg.ablation.repetitions;
                short_canaries.push_back(std::move(c));
            }
        }
    }
    std::vector<Canary> long_canaries;
    for (const auto& [a, b] : cfg.ablation.length_pairs) {
        Canary c = concatenate_canaries(prep.canaries[static_cast<std::size_t>(a)],
                                        prep.canaries[static_cast<std::size_t>(b)],
                                        prep.corpus.vocab, prep.model_cfg.max_seq_len);
        c.spec.repetitions = cfg.ablation.repetitions;
        long_canaries.push_back(std::move(c));
    }

    std::vector<ResultRow> all_rows;
    const auto run_arm_set = [&](const std::vector<Canary>& canaries, const std::string& tag) {
        std::vector<ResultRow> arm_rows;
        for (std::uint64_t seed : cfg.seeds) {
            std::vector<QueryJob> jobs;
            for (const auto& c : canaries) {
                QueryJob job;
                job.canary = &c;
                job.query = make_query(c, prep.model_cfg);
                job.row_id = c.id;
                job.repetitions = c.spec.repetitions;
                jobs.push_back(std::move(job));
            }
            const fs::path arm_dir = out / tag / ("seed_" + std::to_string(seed));
            auto rows = execute_arm(cfg, prep, pretrained, canaries, jobs, seed, tag, arm_dir);
            arm_rows.insert(arm_rows.end(), rows.begin(), rows.end());
        }
        emit_reports(out / tag, arm_rows, metas_from_rows(arm_rows), cfg.attack.generators);
        all_rows.insert(all_rows.end(), arm_rows.begin(), arm_rows.end());
    };

    run_arm_set(short_canaries, "length_short");
    run_arm_set(long_canaries, "length_long");

    std::map<std::string, int> lengths;
    for (const auto& c : short_canaries) lengths[c.id] = c.spec.length;
    for (const auto& c : long_canaries) lengths[c.id] = c.spec.length;
    write_text(out / "figure_canary_length.csv",
               pooled_figure_csv("length", all_rows, cfg.attack.generators,
                                 [&](const ResultRow& r) {
                                     return std::to_string(lengths.at(r.canary_id));
                                 }));
    manifest.arms.push_back("canary_length");
}

}  // namespace

void run_ablation(const ExperimentConfig& cfg, AblationKind kind, const std::string& out_dir) {
    set_max_threads(cfg.threads);
    const Prepared prep = prepare(cfg);
    const fs::path out(out_dir);
    fs::create_directories(out);
    write_text(out / "config.txt", canonical_config(cfg));
    prep.corpus.vocab.save((out / "vocab.txt").string());
    write_corpus_stats(out / "corpus_stats.txt", prep, cfg);

    ManifestInfo manifest;
    manifest.config_hash = full_config_hash(cfg);
    manifest.seeds = cfg.seeds;

    const ModelBundle pretrained = get_or_pretrain(out, cfg, prep, cfg.seeds.front());
    const fs::path ckpt =
        out / ("pretrained_" + hex64(pretrain_config_hash(cfg, cfg.seeds.front())) + ".ckpt");
    manifest.checkpoints.emplace_back(ckpt.filename().string(), file_hash(ckpt));

    switch (kind) {
        case AblationKind::label_patterns:
            run_label_patterns(cfg, prep, out, manifest, pretrained);
            break;
        case AblationKind::token_position:
            run_token_position(cfg, prep, out, manifest, pretrained);
            break;
        case AblationKind::canary_length:
            run_canary_length(cfg, prep, out, manifest, pretrained);
            break;
    }
    write_manifest(out / "manifest.txt", manifest);
}

void write_report(const std::string& run_dir, const std::string& format, std::ostream& console) {
    if (format != "text" && format != "csv")
        throw std::invalid_argument("format must be 'text' or 'csv'");
    const fs::path root(run_dir);
    if (!fs::exists(root)) throw std::invalid_argument("file not found: " + run_dir);

    std::vector<fs::path> files;
    for (const auto& entry : fs::recursive_directory_iterator(root))
        if (entry.is_regular_file() && entry.path().filename() == "results.csv")
            files.push_back(entry.path());
    std::sort(files.begin(), files.end());

    std::vector<ResultRow> rows;
    for (const auto& file : files) {
        auto part = read_result_rows(file.string());
        rows.insert(rows.end(), part.begin(), part.end());
    }

    const auto metas = metas_from_rows(rows);
    const std::vector<Generator> generators = {Generator::exhaustive, Generator::pretrained_lm,
                                               Generator::frankenstein};
    const auto by_rep = aggregate_rows(rows, metas, generators);
    const ReportTables tables = emit_table(by_rep, metas);
    write_text(root / "aggregate.csv", tables.csv);
    write_text(root / "tables.txt", tables.text);
    console << (format == "csv" ? tables.csv : tables.text);
}

// ---------------------------------------------------------------------------
// selfcheck
// ---------------------------------------------------------------------------

namespace {

Vocabulary selfcheck_vocab() {
    std::vector<std::string> tokens;
    std::vector<std::int64_t> freqs;
    for (int i = 0; i < 80; ++i) {
        tokens.push_back("w" + std::to_string(i));
        freqs.push_back(100 - i);
    }
    for (int i = 0; i < 12; ++i) {
        tokens.push_back("##s" + std::to_string(i));
        freqs.push_back(5);
    }
    for (const char* p : {".", ",", "!", "?"}) {
        tokens.push_back(p);
        freqs.push_back(50);
    }
    for (int y = 1970; y < 1978; ++y) {
        tokens.push_back(std::to_string(y));
        freqs.push_back(3);
    }
    return Vocabulary::from_tokens(tokens, freqs);
}

struct SweepEntry {
    double loss;
    int token;
};

// Independent rank oracle: score every non-filtered token by classifier loss
// without going through the candidate pipeline.
std::vector<SweepEntry> loss_sweep(const ModelBundle& target, const MaskedQuery& query,
                                   const Vocabulary& vocab) {
    std::vector<SweepEntry> entries;
    for (int id = 0; id < vocab.size(); ++id) {
        const TokenClass cls = vocab.classify(id);
        if (cls == TokenClass::continuation || cls == TokenClass::punctuation ||
            cls == TokenClass::special)
            continue;
        std::vector<int> tokens = query.token_ids;
        tokens[static_cast<std::size_t>(query.target_index)] = id;
        const auto probs = forward_cls(target, tokens);
        entries.push_back({cross_entropy(probs, query.label), id});
    }
    std::stable_sort(entries.begin(), entries.end(), [](const SweepEntry& a, const SweepEntry& b) {
        if (a.loss != b.loss) return a.loss < b.loss;
        return a.token < b.token;
    });
    return entries;
}

}  // namespace

int selfcheck(std::ostream& console) {
    int failures = 0;
    const auto report = [&](const char* name, bool pass, const std::string& detail) {
        console << (pass ? "[PASS] " : "[FAIL] ") << name << ": " << detail << "\n";
        if (!pass) ++failures;
    };
    char detail[160];

    // Gradient checks: micro linear-softmax model, then the full toy model.
    {
        ModelConfig micro;
        micro.vocab_size = 64;
        micro.max_seq_len = 8;
        micro.embed_dim = 16;
        micro.num_layers = 0;
        micro.num_heads = 4;
        micro.hidden_dim = 16;
        micro.num_classes = 3;
        const ModelBundle bundle = init_bundle(micro, 11);
        GradCheckInput input;
        input.loss = GradCheckInput::Loss::mlm;
        input.tokens = {micro.specials.cls, 9, 21, micro.specials.mask, 40};
        input.position = 3;
        input.target = 17;
        const auto r = gradient_check(bundle, input, 200, 1e-6, 101);
        std::snprintf(detail, sizeof(detail), "max relative error %.3e over %d samples (tol 1e-6)",
                      r.max_rel_error, r.sampled);
        report("gradient_check linear-softmax micro model", r.pass, detail);
    }
    {
        ModelConfig toy;
        toy.vocab_size = 2000;
        toy.max_seq_len = 16;
        toy.embed_dim = 64;
        toy.num_layers = 2;
        toy.num_heads = 4;
        toy.hidden_dim = 128;
        toy.num_classes = 5;
        const ModelBundle bundle = init_bundle(toy, 12);
        GradCheckInput input;
        input.loss = GradCheckInput::Loss::mlm;
        input.tokens = {toy.specials.cls, 100, 900, toy.specials.mask, 1500, 42, 7, 1999};
        input.position = 3;
        input.target = 1234;
        const auto r = gradient_check(bundle, input, 120, 1e-4, 102);
        std::snprintf(detail, sizeof(detail), "max relative error %.3e over %d samples (tol 1e-4)",
                      r.max_rel_error, r.sampled);
        report("gradient_check full toy model (masked-LM loss)", r.pass, detail);

        GradCheckInput cls_input;
        cls_input.loss = GradCheckInput::Loss::cls;
        cls_input.tokens = {toy.specials.cls, 100, 900, 64, 1500, 42, 7, 1999};
        cls_input.target = 3;
        const auto rc = gradient_check(bundle, cls_input, 120, 1e-4, 103);
        std::snprintf(detail, sizeof(detail), "max relative error %.3e over %d samples (tol 1e-4)",
                      rc.max_rel_error, rc.sampled);
        report("gradient_check full toy model (classifier loss)", rc.pass, detail);

        // Degenerate all-zero weights: losses and gradients must stay finite.
        ModelBundle zeroed = bundle;
        visit_encoder(zeroed.encoder, [](const std::string&, Matrix<float>& m, bool) { m.zero(); });
        visit_gen_head(*zeroed.gen_head, [](const std::string&, Matrix<float>& m, bool) { m.zero(); });
        const auto rz = gradient_check(zeroed, input, 60, 1e-4, 104);
        report("gradient_check zero-weight degenerate case",
               rz.pass && std::isfinite(rz.max_rel_error),
               std::string("max relative error finite: ") +
                   (std::isfinite(rz.max_rel_error) ? "yes" : "no"));
    }

    // Softmax normalization probe.
    {
        ModelConfig cfg;
        cfg.vocab_size = 101;
        cfg.max_seq_len = 8;
        cfg.embed_dim = 16;
        cfg.num_layers = 1;
        cfg.num_heads = 2;
        cfg.hidden_dim = 32;
        cfg.num_classes = 2;
        const ModelBundle bundle = init_bundle(cfg, 21);
        const std::vector<int> tokens = {cfg.specials.cls, 10, cfg.specials.mask, 55};
        const auto probs = forward_mlm(bundle, tokens, 2);
        double sum = 0.0;
        for (double p : probs) sum += p;
        std::snprintf(detail, sizeof(detail), "|sum - 1| = %.3e (tol 1e-9)", std::abs(sum - 1.0));
        report("masked-LM output normalization", std::abs(sum - 1.0) < 1e-9, detail);
    }

    // Oracle equivalence of the exhaustive baseline on a micro fixture.
    {
        const Vocabulary vocab = selfcheck_vocab();
        ModelConfig cfg;
        cfg.vocab_size = vocab.size();
        cfg.max_seq_len = 12;
        cfg.embed_dim = 16;
        cfg.num_layers = 1;
        cfg.num_heads = 2;
        cfg.hidden_dim = 32;
        cfg.num_classes = 3;
        cfg.specials = vocab.specials();
        ModelBundle target = init_bundle(cfg, 31);
        target.provenance = Provenance::finetuned;

        MaskedQuery query;
        query.token_ids = {cfg.specials.cls, *vocab.id_of("w3"), *vocab.id_of("w15"),
                           cfg.specials.mask, *vocab.id_of(".")};
        query.target_index = 3;
        query.label = 1;
        query.true_token = *vocab.id_of("w9");

        const RankedCandidates ranked = exhaustive_search(target, query, vocab);
        const auto sweep = loss_sweep(target, query, vocab);
        bool equal = ranked.entries.size() == sweep.size();
        if (equal)
            for (std::size_t i = 0; i < sweep.size(); ++i)
                equal = equal && ranked.entries[i].token == sweep[i].token;
        std::snprintf(detail, sizeof(detail), "%zu ranks compared", sweep.size());
        report("exhaustive search matches independent loss sweep", equal, detail);
    }

    // Filter exactness and idempotence.
    {
        const Vocabulary vocab = selfcheck_vocab();
        Rng rng(77);
        bool ok = true;
        for (int trial = 0; trial < 200 && ok; ++trial) {
            RankedCandidates list;
            list.score_kind = ScoreKind::mlm_probability;
            const int n = 1 + rng.below_int(vocab.size());
            const auto sample = rng.sample_without_replacement(vocab.size(), n);
            double score = 1.0;
            for (int id : sample) list.entries.push_back({id, score *= 0.99});
            bool any_keep = false;
            for (const auto& e : list.entries) {
                const TokenClass c = vocab.classify(e.token);
                any_keep = any_keep || (c == TokenClass::word || c == TokenClass::numeric);
            }
            if (!any_keep) continue;
            const auto once = filter_candidates(list, vocab);
            for (const auto& e : once.entries) {
                const TokenClass c = vocab.classify(e.token);
                ok = ok && (c == TokenClass::word || c == TokenClass::numeric);
            }
            const auto twice = filter_candidates(once, vocab);
            ok = ok && twice.entries.size() == once.entries.size();
            for (std::size_t i = 0; ok && i < once.entries.size(); ++i)
                ok = ok && twice.entries[i].token == once.entries[i].token;
        }
        report("candidate filter removes exactly the filtered classes and is idempotent", ok,
               "200 random candidate lists");
    }

    return failures;
}

}  // namespace mixmatch
