// Command-line front end: pretrain / finetune / attack / ablate / report /
// selfcheck over a key-value experiment config.

#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "mixmatch/harness.hpp"
#include "mixmatch/parallel.hpp"

namespace {

struct GlobalArgs {
    std::string config_path;
    std::string out_dir;
    long long seed_override = -1;
    std::string format = "text";
    int threads = -1;
};

mixmatch::ExperimentConfig load_with_overrides(const GlobalArgs& args) {
    if (args.config_path.empty())
        throw std::invalid_argument("--config is required for this subcommand");
    mixmatch::ExperimentConfig cfg = mixmatch::load_config(args.config_path);
    if (args.seed_override >= 0)
        cfg.seeds = {static_cast<std::uint64_t>(args.seed_override)};
    if (args.threads >= 0) cfg.threads = args.threads;
    return cfg;
}

std::string out_or_default(const GlobalArgs& args, const char* fallback) {
    return args.out_dir.empty() ? fallback : args.out_dir;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"mixmatch: canary reconstruction auditing for fine-tuned text classifiers"};
    app.require_subcommand(1);
    app.fallthrough();  // global flags may follow the subcommand

    GlobalArgs args;
    app.add_option("--config", args.config_path, "experiment config file");
    app.add_option("--out", args.out_dir, "output run directory");
    app.add_option("--seed", args.seed_override, "override the seed list with a single seed");
    app.add_option("--format", args.format, "report rendering: text or csv")
        ->check(CLI::IsMember({"text", "csv"}));
    app.add_option("--threads", args.threads, "worker cap (0 = hardware)");

    auto* cmd_pretrain = app.add_subcommand("pretrain", "build the corpus and pretrained checkpoint");
    auto* cmd_finetune =
        app.add_subcommand("finetune", "inject canaries and fine-tune per seed (no attack)");
    auto* cmd_attack = app.add_subcommand("attack", "run the full reconstruction experiment");
    auto* cmd_ablate = app.add_subcommand("ablate", "run one of the ablation studies");
    std::string which = "label_patterns";
    cmd_ablate->add_option("--which", which,
                           "label_patterns, token_position or canary_length");
    auto* cmd_report = app.add_subcommand("report", "re-aggregate a run directory");
    std::string run_dir;
    cmd_report->add_option("--run", run_dir, "run directory (defaults to --out)");
    auto* cmd_selfcheck =
        app.add_subcommand("selfcheck", "gradient checks and oracle-equivalence suite");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << app.help() << std::endl;
        std::cerr << "error: " << e.what() << std::endl;
        return 1;
    }

    try {
        if (cmd_pretrain->parsed()) {
            mixmatch::run_pretrain(load_with_overrides(args), out_or_default(args, "runs/out"));
        } else if (cmd_finetune->parsed()) {
            mixmatch::run_experiment(load_with_overrides(args), out_or_default(args, "runs/out"),
                                     /*attack_phase=*/false);
        } else if (cmd_attack->parsed()) {
            mixmatch::run_experiment(load_with_overrides(args), out_or_default(args, "runs/out"));
        } else if (cmd_ablate->parsed()) {
            mixmatch::run_ablation(load_with_overrides(args), mixmatch::parse_ablation_kind(which),
                                   out_or_default(args, "runs/ablation"));
        } else if (cmd_report->parsed()) {
            const std::string dir = run_dir.empty() ? out_or_default(args, ".") : run_dir;
            mixmatch::write_report(dir, args.format, std::cout);
        } else if (cmd_selfcheck->parsed()) {
            if (args.threads >= 0) mixmatch::set_max_threads(args.threads);
            const int failures = mixmatch::selfcheck(std::cout);
            if (failures > 0) {
                std::cerr << failures << " selfcheck failure(s)" << std::endl;
                return 2;
            }
        }
    } catch (const std::invalid_argument& e) {
        std::cerr << "error: " << e.what() << std::endl;
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << std::endl;
        return 2;
    }
    return 0;
}
