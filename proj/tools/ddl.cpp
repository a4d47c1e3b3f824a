// Command line front end: every subcommand loads the config, applies flag
// overrides, and hands off to the matching pipeline stage.

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "ddl/harness.hpp"

namespace {

struct CliArgs {
    std::string config_path;
    std::string out;
    std::string method;
    std::string steps;
    std::string sigmas;
    std::vector<std::string> sets;
};

// Shared flags; the sugar flags only exist on the subcommands they belong to.
void add_common(CLI::App* cmd, CliArgs& args) {
    cmd->add_option("--config", args.config_path, "configuration file (INI)");
    cmd->add_option("--out", args.out, "output directory (run.out)");
    cmd->add_option("--set", args.sets, "override a config key, e.g. --set gan.batch=32")
        ->type_name("KEY=VALUE");
}

ddl::ExperimentConfig build_config(const CliArgs& args, const std::string& subcommand) {
    ddl::ExperimentConfig cfg;
    if (!args.config_path.empty()) cfg = ddl::ExperimentConfig::from_file(args.config_path);
    if (!args.out.empty()) cfg.set("run.out", args.out);
    if (!args.method.empty()) cfg.set("distill.method", args.method);
    if (!args.steps.empty())
        cfg.set(subcommand == "relfid-sweep" ? "run.sweep_steps" : "run.sample_steps", args.steps);
    if (!args.sigmas.empty()) cfg.set("run.sweep_sigmas", args.sigmas);
    for (const std::string& kv : args.sets) {
        size_t eq = kv.find('=');
        if (eq == std::string::npos)
            throw CLI::ValidationError("--set", "expected KEY=VALUE, got '" + kv + "'");
        cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
    }
    if (const char* env = std::getenv("DDL_OUT"); env != nullptr && *env != '\0')
        cfg.set("run.out", env);
    return cfg;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"distribution-level diffusion distillation workbench"};
    app.require_subcommand(1);

    CliArgs args;
    const std::vector<std::string> stages = {"train-score", "distill",        "sample",
                                             "eval",        "relfid-sweep",   "sigma-sweep",
                                             "freeze-ablation", "profile",    "census"};
    for (const std::string& name : stages) {
        CLI::App* cmd = app.add_subcommand(name, "run the " + name + " stage");
        add_common(cmd, args);
        if (name == "distill")
            cmd->add_option("--method", args.method, "gdd | gdd-i | combined | kstep");
        if (name == "relfid-sweep")
            cmd->add_option("--steps", args.steps, "teacher step counts, e.g. 2,4,8");
        if (name == "sigma-sweep")
            cmd->add_option("--sigmas", args.sigmas, "intermediate sigmas, e.g. 0.5,2,8,32");
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);  // prints help, exit 0
    } catch (const CLI::ParseError& e) {
        std::cerr << e.what() << "\n\n" << app.help() << std::flush;
        return 2;
    }

    const std::string stage = app.get_subcommands().front()->get_name();
    try {
        ddl::ExperimentConfig cfg = build_config(args, stage);
        ddl::PipelineResult res = ddl::run_pipeline(stage, cfg);
        for (const std::string& path : res.artifacts) std::cout << "wrote " << path << "\n";
        if (stage == "census" && !res.artifacts.empty()) {
            std::ifstream f(res.artifacts.back());
            std::cout << f.rdbuf();
        }
    } catch (const CLI::ParseError& e) {
        std::cerr << e.what() << "\n\n" << app.help() << std::flush;
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "ddl: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
