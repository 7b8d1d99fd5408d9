// Experiment runner. Subcommands:
//
//   muka gen-data       --config cfg.ini [--out DIR] [--seed-override N]
//   muka train-teachers --config cfg.ini ...
//   muka amalgamate     --config cfg.ini ...
//   muka evaluate       --config cfg.ini ...
//   muka probe NAME     --config cfg.ini ...
//   muka sweep PARAM    --config cfg.ini [--values v1,v2,...]
//   muka pipeline       --config cfg.ini ...   (gen -> teachers -> amalgamate -> evaluate)
//
// Exit code 0 on success; on failure a single "error: ..." line on stderr.

#include <cstdio>
#include <exception>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "muka/experiment.hpp"

namespace {

struct CommonArgs {
    std::string config_path;
    std::string out_override;
    long seed_override = -1;
};

void add_common(CLI::App* cmd, CommonArgs& args) {
    cmd->add_option("--config", args.config_path, "experiment config file")
        ->required()
        ->check(CLI::ExistingFile);
    cmd->add_option("--out", args.out_override, "override [run] out_dir");
    cmd->add_option("--seed-override", args.seed_override,
                    "run only this replication seed");
}

muka::ExperimentConfig load_config(const CommonArgs& args) {
    muka::ExperimentConfig cfg = muka::parse_experiment_config(args.config_path);
    if (!args.out_override.empty()) cfg.out_dir = args.out_override;
    if (args.seed_override >= 0) cfg.seeds = {static_cast<std::uint64_t>(args.seed_override)};
    cfg.validate();
    return cfg;
}

muka::ExperimentPaths paths_of(const muka::ExperimentConfig& cfg) {
    return muka::ExperimentPaths{std::filesystem::path(cfg.out_dir)};
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"model-uncertainty-aware knowledge amalgamation lab"};
    app.require_subcommand(1);

    CommonArgs gen_args, teach_args, amal_args, eval_args, probe_args, sweep_args, pipe_args;
    std::string probe_name;
    std::string sweep_param;
    std::string sweep_values;

    auto* gen = app.add_subcommand("gen-data", "generate the dataset splits and partition");
    add_common(gen, gen_args);
    auto* teach = app.add_subcommand("train-teachers", "train teachers and the oracle per seed");
    add_common(teach, teach_args);
    auto* amal = app.add_subcommand("amalgamate", "train students for the configured methods");
    add_common(amal, amal_args);
    auto* eval = app.add_subcommand("evaluate", "write metrics.json for all persisted models");
    add_common(eval, eval_args);
    auto* probe = app.add_subcommand("probe", "run one diagnostic probe per seed");
    probe->add_option("name", probe_name, "probe name")->required();
    add_common(probe, probe_args);
    auto* sweep = app.add_subcommand("sweep", "retrain students across a parameter grid");
    sweep->add_option("parameter", sweep_param, "tau or K")->required();
    sweep->add_option("--values", sweep_values, "comma-separated values");
    add_common(sweep, sweep_args);
    auto* pipe = app.add_subcommand("pipeline", "gen-data, train-teachers, amalgamate, evaluate");
    add_common(pipe, pipe_args);

    CLI11_PARSE(app, argc, argv);

    try {
        if (*gen) {
            const auto cfg = load_config(gen_args);
            muka::run_gen_data(cfg, paths_of(cfg));
        } else if (*teach) {
            const auto cfg = load_config(teach_args);
            muka::run_train_teachers(cfg, paths_of(cfg));
        } else if (*amal) {
            const auto cfg = load_config(amal_args);
            muka::run_amalgamate(cfg, paths_of(cfg));
        } else if (*eval) {
            const auto cfg = load_config(eval_args);
            const auto metrics = muka::run_evaluate(cfg, paths_of(cfg));
            std::cout << metrics.dump(2) << "\n";
        } else if (*probe) {
            const auto cfg = load_config(probe_args);
            muka::run_probe(cfg, paths_of(cfg), probe_name);
        } else if (*sweep) {
            const auto cfg = load_config(sweep_args);
            std::vector<double> values;
            if (!sweep_values.empty()) {
                for (const auto& tok : muka::split(sweep_values, ','))
                    values.push_back(muka::parse_double(muka::trim(tok), "--values"));
            } else if (sweep_param == "tau") {
                values = {0.01, 0.1, 0.2, 0.5, 1.0, 2.0, 5.0, 10.0};
            } else {
                values = {1, 4, 16, 64};
            }
            muka::run_sweep(cfg, paths_of(cfg), sweep_param, values);
        } else if (*pipe) {
            const auto cfg = load_config(pipe_args);
            const auto paths = paths_of(cfg);
            muka::run_gen_data(cfg, paths);
            muka::run_train_teachers(cfg, paths);
            muka::run_amalgamate(cfg, paths);
            const auto metrics = muka::run_evaluate(cfg, paths);
            std::cout << metrics.dump(2) << "\n";
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
