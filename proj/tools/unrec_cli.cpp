// Command-line front end: run / validate / montage over a single JSON
// experiment config. Exit codes: 0 ok, 1 experiment failure, 2 config error.

#include "unrec/config.hpp"
#include "unrec/experiment.hpp"

#include <CLI11.hpp>

#include <cstdlib>
#include <iostream>
#include <optional>
#include <string>

namespace {

struct CommonFlags {
    std::string config_path;
    std::string out_dir;
    int jobs = 0;
    std::optional<std::uint64_t> seed;
};

unrec::ExperimentConfig load_with_overrides(const CommonFlags& flags) {
    unrec::ExperimentConfig cfg = unrec::load_config(flags.config_path);
    if (!flags.out_dir.empty()) cfg.output_dir = flags.out_dir;
    if (const char* env = std::getenv("UNREC_OUT"); env && *env) cfg.output_dir = env;
    if (flags.jobs > 0) cfg.jobs = flags.jobs;
    if (flags.seed) cfg.seed = *flags.seed;
    return cfg;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"reconstruct deleted training samples from unlearning updates"};
    app.require_subcommand(1);

    CommonFlags flags;
    std::uint64_t seed_value = 0;

    auto add_common = [&](CLI::App* cmd, bool with_out) {
        cmd->add_option("--config", flags.config_path, "experiment config (JSON)")
            ->required();
        if (with_out) {
            cmd->add_option("--out", flags.out_dir,
                            "output directory (overrides config; UNREC_OUT overrides both)");
            cmd->add_option("--jobs", flags.jobs, "parallel work items");
            cmd->add_option_function<std::uint64_t>(
                "--seed", [&](std::uint64_t v) { flags.seed = v; }, "global seed override");
        }
    };

    auto* run_cmd = app.add_subcommand("run", "execute the full experiment pipeline");
    add_common(run_cmd, true);

    auto* validate_cmd = app.add_subcommand("validate", "check a config without side effects");
    add_common(validate_cmd, false);

    auto* montage_cmd =
        app.add_subcommand("montage", "emit an original/HRec/MaxDiff image strip");
    add_common(montage_cmd, true);
    std::string montage_out = "montage.pgm";
    montage_cmd->add_option("--image-out", montage_out, "montage image path");
    montage_cmd->add_option("--montage-seed", seed_value, "seed for the per-label pick");

    CLI11_PARSE(app, argc, argv);

    try {
        if (validate_cmd->parsed()) {
            unrec::ExperimentConfig cfg;
            try {
                cfg = unrec::load_config(flags.config_path);
            } catch (const unrec::Error& e) {
                std::cerr << e.what() << "\n";
                return 2;
            }
            const auto diags = unrec::validate_config(cfg);
            for (const auto& d : diags) std::cout << d << "\n";
            if (!diags.empty()) return 2;
            std::cout << "config ok (digest " << unrec::config_digest(cfg) << ")\n";
            return 0;
        }

        if (run_cmd->parsed()) {
            unrec::ExperimentConfig cfg;
            try {
                cfg = load_with_overrides(flags);
                const auto diags = unrec::validate_config(cfg);
                if (!diags.empty()) {
                    for (const auto& d : diags) std::cerr << d << "\n";
                    return 2;
                }
            } catch (const unrec::Error& e) {
                std::cerr << e.what() << "\n";
                return 2;
            }
            const auto result = unrec::run_experiment(cfg);
            std::cout << "digest " << result.config_digest << ", lambda "
                      << unrec::format_double(result.lambda_used, 6) << ", "
                      << result.records.size() << " records -> " << result.report.records
                      << "\n";
            if (result.flagged_items > 0)
                std::cerr << result.flagged_items << " deletion item(s) flagged; see record file"
                          << "\n";
            return 0;
        }

        if (montage_cmd->parsed()) {
            unrec::ExperimentConfig cfg;
            try {
                cfg = load_with_overrides(flags);
            } catch (const unrec::Error& e) {
                std::cerr << e.what() << "\n";
                return 2;
            }
            const auto result = unrec::make_montage(cfg, montage_out, seed_value);
            for (int label : result.skipped_labels)
                std::cerr << "label " << label << " absent from the deletion set, column skipped\n";
            std::cout << result.path << " (" << result.columns << " columns)\n";
            return 0;
        }
    } catch (const std::exception& e) {
        std::cerr << e.what() << "\n";
        return 1;
    }
    return 0;
}
