#include "mixmatch/config.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace mixmatch {

namespace {

std::string trim(const std::string& s) {
    std::size_t b = 0, e = s.size();
    while (b < e && (s[b] == ' ' || s[b] == '\t')) ++b;
    while (e > b && (s[e - 1] == ' ' || s[e - 1] == '\t' || s[e - 1] == '\r')) --e;
    return s.substr(b, e - b);
}

std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : s) {
        if (c == ',') {
            out.push_back(trim(cur));
            cur.clear();
        } else {
            cur += c;
        }
    }
    if (!trim(cur).empty() || !out.empty()) out.push_back(trim(cur));
    while (!out.empty() && out.back().empty()) out.pop_back();
    return out;
}

long long parse_int(const std::string& key, const std::string& value) {
    try {
        std::size_t pos = 0;
        const long long v = std::stoll(value, &pos);
        if (pos != value.size()) throw std::invalid_argument("");
        return v;
    } catch (const std::exception&) {
        throw std::invalid_argument("bad integer for " + key + ": '" + value + "'");
    }
}

double parse_real(const std::string& key, const std::string& value) {
    try {
        std::size_t pos = 0;
        const double v = std::stod(value, &pos);
        if (pos != value.size()) throw std::invalid_argument("");
        return v;
    } catch (const std::exception&) {
        throw std::invalid_argument("bad number for " + key + ": '" + value + "'");
    }
}

bool parse_bool(const std::string& key, const std::string& value) {
    if (value == "true" || value == "1" || value == "yes") return true;
    if (value == "false" || value == "0" || value == "no") return false;
    throw std::invalid_argument("bad boolean for " + key + ": '" + value + "'");
}

Tier parse_tier(const std::string& key, const std::string& value) {
    if (value == "low") return Tier::low;
    if (value == "mid") return Tier::mid;
    if (value == "high") return Tier::high;
    throw std::invalid_argument("bad tier for " + key + ": '" + value + "'");
}

Generator parse_generator(const std::string& key, const std::string& value) {
    if (value == "exhaustive") return Generator::exhaustive;
    if (value == "pretrained_lm") return Generator::pretrained_lm;
    if (value == "frankenstein") return Generator::frankenstein;
    throw std::invalid_argument("bad generator for " + key + ": '" + value + "'");
}

LabelPattern::Mode parse_pattern(const std::string& key, const std::string& value) {
    if (value == "all_same") return LabelPattern::Mode::all_same;
    if (value == "all_distinct") return LabelPattern::Mode::all_distinct;
    if (value == "mixed") return LabelPattern::Mode::mixed;
    throw std::invalid_argument("bad label pattern for " + key + ": '" + value + "'");
}

}  // namespace

Cutoff AttackConfig::resolve_cutoff(int vocab_size) const {
    if (cutoff_value <= 0.0 && cutoff_mode == Cutoff::Mode::probability_floor)
        return Cutoff::default_floor(vocab_size);
    return {cutoff_mode, cutoff_value};
}

void ExperimentConfig::validate() const {
    if (seeds.empty()) throw std::invalid_argument("seed list must be non-empty");
    if (threads < 0) throw std::invalid_argument("threads must be >= 0");
    corpus.validate();
    for (int r : repetitions)
        if (r < 1) throw std::invalid_argument("repetition presets must be >= 1");
    if (!(val_fraction >= 0.0 && val_fraction < 1.0))
        throw std::invalid_argument("val_fraction must be in [0, 1)");
    if (!(low_quantile > 0.0 && high_quantile < 1.0 && low_quantile < high_quantile))
        throw std::invalid_argument("quantiles must satisfy 0 < low < high < 1");
    ModelConfig mc;
    mc.vocab_size = corpus.vocab_size;
    mc.max_seq_len = max_seq_len;
    mc.embed_dim = embed_dim;
    mc.num_layers = num_layers;
    mc.num_heads = num_heads;
    mc.hidden_dim = hidden_dim;
    mc.num_classes = std::max(2, corpus.num_classes);
    mc.dropout_rate = dropout;
    mc.validate();
    for (const auto& spec : canaries) {
        if (spec.length < 1) throw std::invalid_argument("canary length must be >= 1");
        if (spec.target_position < 0 || spec.target_position >= spec.length)
            throw std::invalid_argument("canary target_position must be in [0, length)");
        // +2: trailing period and [CLS]
        if (spec.length + 2 > max_seq_len)
            throw std::invalid_argument("canary length exceeds max_seq_len");
        if (spec.label >= corpus.num_classes)
            throw std::invalid_argument("canary label out of range");
    }
    for (const auto& [a, b] : ablation.length_pairs)
        if (a < 0 || b < 0 || a >= static_cast<int>(canaries.size()) ||
            b >= static_cast<int>(canaries.size()))
            throw std::invalid_argument("length_pairs index out of range");
    for (int idx : ablation.position_canaries)
        if (idx < 0 || idx >= static_cast<int>(canaries.size()))
            throw std::invalid_argument("position_canaries index out of range");
}

ExperimentConfig parse_config_text(const std::string& text) {
    ExperimentConfig cfg;
    cfg.canaries.clear();

    std::istringstream in(text);
    std::string line;
    std::string section = "experiment";
    CanarySpec* canary = nullptr;
    std::size_t line_no = 0;

    const auto fail_key = [&](const std::string& key) {
        throw std::invalid_argument("unknown config key '" + section + "." + key + "' at line " +
                                    std::to_string(line_no));
    };

    while (std::getline(in, line)) {
        ++line_no;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;

        if (line.front() == '[') {
            if (line.back() != ']')
                throw std::invalid_argument("bad section header at line " + std::to_string(line_no));
            section = trim(line.substr(1, line.size() - 2));
            if (section == "canary") {
                cfg.canaries.emplace_back();
                canary = &cfg.canaries.back();
                canary->label = -1;  // draw from seed unless set
            } else if (section != "experiment" && section != "corpus" && section != "vocab" &&
                       section != "model" && section != "pretrain" && section != "finetune" &&
                       section != "attack" && section != "ablation") {
                throw std::invalid_argument("unknown config section '" + section + "' at line " +
                                            std::to_string(line_no));
            }
            continue;
        }

        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw std::invalid_argument("expected 'key = value' at line " + std::to_string(line_no));
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));

        if (section == "experiment") {
            if (key == "seeds") {
                cfg.seeds.clear();
                for (const auto& s : split_list(value))
                    cfg.seeds.push_back(static_cast<std::uint64_t>(parse_int(key, s)));
            } else if (key == "threads") {
                cfg.threads = static_cast<int>(parse_int(key, value));
            } else if (key == "repetitions") {
                cfg.repetitions.clear();
                for (const auto& s : split_list(value))
                    cfg.repetitions.push_back(static_cast<int>(parse_int(key, s)));
            } else {
                fail_key(key);
            }
        } else if (section == "corpus") {
            if (key == "file") cfg.corpus_file = value;
            else if (key == "num_classes") cfg.corpus.num_classes = static_cast<int>(parse_int(key, value));
            else if (key == "examples_per_class") cfg.corpus.examples_per_class = static_cast<int>(parse_int(key, value));
            else if (key == "sentence_len_min") cfg.corpus.sentence_len_min = static_cast<int>(parse_int(key, value));
            else if (key == "sentence_len_max") cfg.corpus.sentence_len_max = static_cast<int>(parse_int(key, value));
            else if (key == "skew") cfg.corpus.skew = parse_real(key, value);
            else if (key == "seed") cfg.corpus.seed = static_cast<std::uint64_t>(parse_int(key, value));
            else if (key == "val_fraction") cfg.val_fraction = parse_real(key, value);
            else fail_key(key);
        } else if (section == "vocab") {
            if (key == "max_size") cfg.corpus.vocab_size = static_cast<int>(parse_int(key, value));
            else if (key == "low_quantile") cfg.low_quantile = parse_real(key, value);
            else if (key == "high_quantile") cfg.high_quantile = parse_real(key, value);
            else fail_key(key);
        } else if (section == "model") {
            if (key == "embed_dim") cfg.embed_dim = static_cast<int>(parse_int(key, value));
            else if (key == "num_layers") cfg.num_layers = static_cast<int>(parse_int(key, value));
            else if (key == "num_heads") cfg.num_heads = static_cast<int>(parse_int(key, value));
            else if (key == "hidden_dim") cfg.hidden_dim = static_cast<int>(parse_int(key, value));
            else if (key == "max_seq_len") cfg.max_seq_len = static_cast<int>(parse_int(key, value));
            else if (key == "dropout") cfg.dropout = static_cast<float>(parse_real(key, value));
            else fail_key(key);
        } else if (section == "pretrain") {
            if (key == "steps") cfg.pretrain.steps = static_cast<int>(parse_int(key, value));
            else if (key == "batch_size") cfg.pretrain.batch_size = static_cast<int>(parse_int(key, value));
            else if (key == "learning_rate") cfg.pretrain.learning_rate = static_cast<float>(parse_real(key, value));
            else if (key == "weight_decay") cfg.pretrain.weight_decay = static_cast<float>(parse_real(key, value));
            else if (key == "mask_fraction") cfg.pretrain.mask_fraction = static_cast<float>(parse_real(key, value));
            else if (key == "seed") cfg.pretrain.seed = static_cast<std::uint64_t>(parse_int(key, value));
            else if (key == "eval_every") cfg.pretrain.eval_every = static_cast<int>(parse_int(key, value));
            else if (key == "shared") cfg.pretrain_shared = parse_bool(key, value);
            else fail_key(key);
        } else if (section == "finetune") {
            if (key == "epochs") cfg.finetune.epochs = static_cast<int>(parse_int(key, value));
            else if (key == "batch_size") cfg.finetune.batch_size = static_cast<int>(parse_int(key, value));
            else if (key == "learning_rate") cfg.finetune.learning_rate = static_cast<float>(parse_real(key, value));
            else if (key == "weight_decay") cfg.finetune.weight_decay = static_cast<float>(parse_real(key, value));
            else if (key == "early_stop_patience") cfg.finetune.early_stop_patience = static_cast<int>(parse_int(key, value));
            else fail_key(key);
        } else if (section == "attack") {
            if (key == "generators") {
                cfg.attack.generators.clear();
                for (const auto& s : split_list(value))
                    cfg.attack.generators.push_back(parse_generator(key, s));
            } else if (key == "cutoff") {
                if (value == "probability_floor") cfg.attack.cutoff_mode = Cutoff::Mode::probability_floor;
                else if (value == "cumulative_mass") cfg.attack.cutoff_mode = Cutoff::Mode::cumulative_mass;
                else if (value == "top_n") cfg.attack.cutoff_mode = Cutoff::Mode::top_n;
                else throw std::invalid_argument("bad cutoff mode: '" + value + "'");
            } else if (key == "cutoff_value") {
                cfg.attack.cutoff_value = parse_real(key, value);
            } else if (key == "filters") {
                cfg.attack.filters = parse_bool(key, value);
            } else {
                fail_key(key);
            }
        } else if (section == "canary") {
            if (canary == nullptr) throw std::invalid_argument("canary key outside [canary] section");
            if (key == "kind") {
                if (value == "organic") canary->kind = CanaryKind::organic;
                else if (value == "random") canary->kind = CanaryKind::random;
                else throw std::invalid_argument("bad canary kind: '" + value + "'");
            } else if (key == "tier") {
                canary->tier = parse_tier(key, value);
            } else if (key == "target_tier") {
                canary->target_tier_override = parse_tier(key, value);
            } else if (key == "length") {
                canary->length = static_cast<int>(parse_int(key, value));
                canary->target_position = canary->length - 1;
            } else if (key == "target_position") {
                canary->target_position = static_cast<int>(parse_int(key, value));
            } else if (key == "label") {
                canary->label = static_cast<int>(parse_int(key, value));
            } else if (key == "repetitions") {
                canary->repetitions = static_cast<int>(parse_int(key, value));
            } else if (key == "seed") {
                canary->seed = static_cast<std::uint64_t>(parse_int(key, value));
            } else {
                fail_key(key);
            }
        } else if (section == "ablation") {
            if (key == "variants") cfg.ablation.variants = static_cast<int>(parse_int(key, value));
            else if (key == "repetitions") cfg.ablation.repetitions = static_cast<int>(parse_int(key, value));
            else if (key == "seed") cfg.ablation.seed = static_cast<std::uint64_t>(parse_int(key, value));
            else if (key == "patterns") {
                cfg.ablation.patterns.clear();
                for (const auto& s : split_list(value))
                    cfg.ablation.patterns.push_back(parse_pattern(key, s));
            } else if (key == "position_canaries") {
                cfg.ablation.position_canaries.clear();
                for (const auto& s : split_list(value))
                    cfg.ablation.position_canaries.push_back(static_cast<int>(parse_int(key, s)));
            } else if (key == "length_pairs") {
                cfg.ablation.length_pairs.clear();
                for (const auto& s : split_list(value)) {
                    const auto colon = s.find(':');
                    if (colon == std::string::npos)
                        throw std::invalid_argument("length_pairs entries must be 'a:b'");
                    cfg.ablation.length_pairs.emplace_back(
                        static_cast<int>(parse_int(key, trim(s.substr(0, colon)))),
                        static_cast<int>(parse_int(key, trim(s.substr(colon + 1)))));
                }
            } else {
                fail_key(key);
            }
        }
    }

    // Quantiles flow into every canary spec.
    for (auto& spec : cfg.canaries) {
        spec.low_quantile = cfg.low_quantile;
        spec.high_quantile = cfg.high_quantile;
    }
    cfg.validate();
    return cfg;
}

ExperimentConfig load_config(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::invalid_argument("file not found: " + path);
    std::ostringstream ss;
    ss << f.rdbuf();
    return parse_config_text(ss.str());
}

std::string canonical_config(const ExperimentConfig& cfg) {
    std::ostringstream o;
    char buf[64];
    const auto real = [&](double v) {
        std::snprintf(buf, sizeof(buf), "%.9g", v);
        return std::string(buf);
    };
    o << "[experiment]\n";
    o << "seeds = ";
    for (std::size_t i = 0; i < cfg.seeds.size(); ++i) o << (i ? "," : "") << cfg.seeds[i];
    o << "\nthreads = " << cfg.threads << "\n";
    if (!cfg.repetitions.empty()) {
        o << "repetitions = ";
        for (std::size_t i = 0; i < cfg.repetitions.size(); ++i)
            o << (i ? "," : "") << cfg.repetitions[i];
        o << "\n";
    }
    o << "\n[corpus]\n";
    if (!cfg.corpus_file.empty()) o << "file = " << cfg.corpus_file << "\n";
    o << "num_classes = " << cfg.corpus.num_classes << "\n";
    o << "examples_per_class = " << cfg.corpus.examples_per_class << "\n";
    o << "sentence_len_min = " << cfg.corpus.sentence_len_min << "\n";
    o << "sentence_len_max = " << cfg.corpus.sentence_len_max << "\n";
    o << "skew = " << real(cfg.corpus.skew) << "\n";
    o << "seed = " << cfg.corpus.seed << "\n";
    o << "val_fraction = " << real(cfg.val_fraction) << "\n";
    o << "\n[vocab]\n";
    o << "max_size = " << cfg.corpus.vocab_size << "\n";
    o << "low_quantile = " << real(cfg.low_quantile) << "\n";
    o << "high_quantile = " << real(cfg.high_quantile) << "\n";
    o << "\n[model]\n";
    o << "embed_dim = " << cfg.embed_dim << "\n";
    o << "num_layers = " << cfg.num_layers << "\n";
    o << "num_heads = " << cfg.num_heads << "\n";
    o << "hidden_dim = " << cfg.hidden_dim << "\n";
    o << "max_seq_len = " << cfg.max_seq_len << "\n";
    o << "dropout = " << real(cfg.dropout) << "\n";
    o << "\n[pretrain]\n";
    o << "steps = " << cfg.pretrain.steps << "\n";
    o << "batch_size = " << cfg.pretrain.batch_size << "\n";
    o << "learning_rate = " << real(cfg.pretrain.learning_rate) << "\n";
    o << "weight_decay = " << real(cfg.pretrain.weight_decay) << "\n";
    o << "mask_fraction = " << real(cfg.pretrain.mask_fraction) << "\n";
    o << "seed = " << cfg.pretrain.seed << "\n";
    o << "eval_every = " << cfg.pretrain.eval_every << "\n";
    o << "shared = " << (cfg.pretrain_shared ? "true" : "false") << "\n";
    o << "\n[finetune]\n";
    o << "epochs = " << cfg.finetune.epochs << "\n";
    o << "batch_size = " << cfg.finetune.batch_size << "\n";
    o << "learning_rate = " << real(cfg.finetune.learning_rate) << "\n";
    o << "weight_decay = " << real(cfg.finetune.weight_decay) << "\n";
    o << "early_stop_patience = " << cfg.finetune.early_stop_patience << "\n";
    o << "\n[attack]\n";
    o << "generators = ";
    for (std::size_t i = 0; i < cfg.attack.generators.size(); ++i)
        o << (i ? "," : "") << to_string(cfg.attack.generators[i]);
    o << "\n";
    switch (cfg.attack.cutoff_mode) {
        case Cutoff::Mode::probability_floor: o << "cutoff = probability_floor\n"; break;
        case Cutoff::Mode::cumulative_mass: o << "cutoff = cumulative_mass\n"; break;
        case Cutoff::Mode::top_n: o << "cutoff = top_n\n"; break;
    }
    o << "cutoff_value = " << real(cfg.attack.cutoff_value) << "\n";
    o << "filters = " << (cfg.attack.filters ? "true" : "false") << "\n";
    for (const auto& spec : cfg.canaries) {
        o << "\n[canary]\n";
        o << "kind = " << to_string(spec.kind) << "\n";
        o << "tier = " << to_string(spec.tier) << "\n";
        if (spec.target_tier_override)
            o << "target_tier = " << to_string(*spec.target_tier_override) << "\n";
        o << "length = " << spec.length << "\n";
        o << "target_position = " << spec.target_position << "\n";
        o << "label = " << spec.label << "\n";
        o << "repetitions = " << spec.repetitions << "\n";
        o << "seed = " << spec.seed << "\n";
    }
    o << "\n[ablation]\n";
    o << "variants = " << cfg.ablation.variants << "\n";
    o << "repetitions = " << cfg.ablation.repetitions << "\n";
    o << "seed = " << cfg.ablation.seed << "\n";
    o << "patterns = ";
    for (std::size_t i = 0; i < cfg.ablation.patterns.size(); ++i)
        o << (i ? "," : "") << to_string(cfg.ablation.patterns[i]);
    o << "\n";
    if (!cfg.ablation.position_canaries.empty()) {
        o << "position_canaries = ";
        for (std::size_t i = 0; i < cfg.ablation.position_canaries.size(); ++i)
            o << (i ? "," : "") << cfg.ablation.position_canaries[i];
        o << "\n";
    }
    if (!cfg.ablation.length_pairs.empty()) {
        o << "length_pairs = ";
        for (std::size_t i = 0; i < cfg.ablation.length_pairs.size(); ++i)
            o << (i ? "," : "") << cfg.ablation.length_pairs[i].first << ':'
              << cfg.ablation.length_pairs[i].second;
        o << "\n";
    }
    return o.str();
}

std::uint64_t pretrain_config_hash(const ExperimentConfig& cfg, std::uint64_t run_seed) {
    std::ostringstream o;
    o << cfg.corpus_file << '|' << cfg.corpus.num_classes << '|' << cfg.corpus.examples_per_class
      << '|' << cfg.corpus.sentence_len_min << '|' << cfg.corpus.sentence_len_max << '|'
      << cfg.corpus.skew << '|' << cfg.corpus.seed << '|' << cfg.corpus.vocab_size << '|'
      << cfg.val_fraction << '|' << cfg.embed_dim << '|' << cfg.num_layers << '|' << cfg.num_heads
      << '|' << cfg.hidden_dim << '|' << cfg.max_seq_len << '|' << cfg.dropout << '|'
      << cfg.pretrain.steps << '|' << cfg.pretrain.batch_size << '|'
      << cfg.pretrain.learning_rate << '|' << cfg.pretrain.weight_decay << '|'
      << cfg.pretrain.mask_fraction << '|' << cfg.pretrain.seed << '|' << cfg.pretrain.eval_every;
    if (!cfg.pretrain_shared) o << "|run_seed=" << run_seed;
    return fnv1a(o.str());
}

std::uint64_t full_config_hash(const ExperimentConfig& cfg) {
    return fnv1a(canonical_config(cfg));
}

}  // namespace mixmatch
