#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "sparsebridge/commands.hpp"
#include "sparsebridge/errors.hpp"

using namespace sparsebridge;

int main(int argc, char **argv) {
    CLI::App app{"Sparse-slice cross-modality volume reconstruction"};
    app.require_subcommand(1);
    app.fallthrough();

    std::string config_path, run_dir = "run", objective, tau_mode;
    std::optional<std::uint64_t> seed;
    std::optional<int> factor, steps;
    std::optional<double> db_fraction;
    std::optional<std::string> pred, truth;
    bool no_control = false, no_retrieval = false;

    app.add_option("--config", config_path, "Experiment config (JSON); missing keys use defaults")->check(CLI::ExistingFile);
    app.add_option("--run-dir", run_dir, "Run directory holding every artifact")->capture_default_str();
    app.add_option("--seed", seed, "Global seed");
    app.add_option("--factor", factor, "Sparsification factor")->check(CLI::PositiveNumber);
    app.add_option("--steps", steps, "Sampling steps")->check(CLI::PositiveNumber);
    app.add_option("--objective", objective, "Bridge objective")->check(CLI::IsMember({"raw", "unitized"}));
    app.add_flag("--no-control", no_control, "Sample without the control branch");
    app.add_flag("--no-retrieval", no_retrieval, "Interpolate every missing slice");
    app.add_option("--tau-mode", tau_mode, "Threshold rule")->check(CLI::IsMember({"percentile", "top_mean"}));
    app.add_option("--db-fraction", db_fraction, "Fraction of training subjects kept in the knowledge base")
        ->check(CLI::Range(0.0, 1.0));
    app.add_option("--pred", pred, "evaluate: predicted volume directory");
    app.add_option("--truth", truth, "evaluate: reference volume directory");

    const std::vector<std::pair<std::string, std::string>> commands{
        {"gen-data", "Generate the paired phantom corpus and its train/eval split"},
        {"train-bridge", "Train the bridge denoiser on source/target pairs"},
        {"train-retriever", "Train the slice encoder contrastively"},
        {"build-kb", "Embed every training source slice into the knowledge base"},
        {"calibrate-tau", "Calibrate the retrieval similarity threshold"},
        {"train-control", "Train the control branch against the frozen bridge"},
        {"reconstruct", "Reconstruct dense target volumes from sparse eval sources"},
        {"evaluate", "Score reconstructions against the dense targets"},
        {"gradstats", "Raw versus unitized objective statistics and convergence traces"}};
    for (const auto &[name, help] : commands) app.add_subcommand(name, help);

    CLI11_PARSE(app, argc, argv);

    try {
        ExperimentConfig cfg = config_path.empty() ? ExperimentConfig{} : ExperimentConfig::load(config_path);
        if (seed) cfg.seed = *seed;
        if (factor) cfg.reconstruct.factor = *factor;
        if (steps) cfg.sampler.steps = *steps;
        if (!objective.empty()) cfg.bridge.objective = parse_objective(objective);
        if (!tau_mode.empty()) cfg.tau.mode = parse_tau_mode(tau_mode);
        if (db_fraction) cfg.reconstruct.db_fraction = *db_fraction;
        if (no_control) cfg.reconstruct.use_control = false;
        if (no_retrieval) cfg.reconstruct.use_retrieval = false;

        CommandArgs args;
        if (pred) args.pred = *pred;
        if (truth) args.truth = *truth;
        const auto summary = run_command(app.get_subcommands().front()->get_name(), cfg, run_dir, args);
        std::cout << summary.dump(2) << std::endl;
        return 0;
    } catch (const ConfigError &e) {
        std::cerr << "configuration error: " << e.what() << std::endl;
        return 2;
    } catch (const std::exception &e) {
        std::cerr << "error: " << e.what() << std::endl;
        return 1;
    }
}
