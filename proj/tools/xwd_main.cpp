#include <cstdint>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "xwd/error.hpp"
#include "xwd/orchestrator.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitValidation = 1;
constexpr int kExitStageFailure = 2;
constexpr int kExitUsage = 64;

struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
};

void add_common(CLI::App* cmd, Options& opt) {
  cmd->add_option("--config", opt.config, "Experiment config (JSON)")->required()->check(CLI::ExistingFile);
  cmd->add_option("--seed", opt.seed, "Override the root seed");
}

xwd::ExperimentConfig load(const Options& opt) {
  auto cfg = xwd::ExperimentConfig::load(opt.config);
  if (opt.seed) cfg.seed = *opt.seed;
  return cfg;
}

void report(const std::string& what, const xwd::RunStats& stats, const xwd::Experiment& ex) {
  std::cout << what << ": " << stats.executed.size() << " unit(s) executed, " << stats.skipped.size()
            << " skipped, " << stats.training_steps << " training step(s)\n";
  for (const auto& u : stats.executed) std::cout << "  ran     " << u << '\n';
  for (const auto& u : stats.skipped) std::cout << "  skipped " << u << '\n';
  std::cout << "manifest: " << (ex.root() / "manifest.json").string() << '\n';
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Cross-window distillation experiments on volumetric CT data", "xwd"};
  app.require_subcommand(1);
  Options opt;

  const std::vector<std::pair<std::string, std::string>> stages = {
      {"preprocess", "Window, normalize and split the dataset"},
      {"train-baselines", "Train one supervised model per window"},
      {"select-teacher", "Pick the teacher window by validation AUC"},
      {"distill", "Train the student windows against the frozen teacher"},
      {"ensemble", "Fit the supervised and distilled meta-learners"},
      {"transfer", "Direct and head-only transfer to the target task"},
      {"analyze", "Metrics, agreement analysis and attention maps"},
  };
  std::vector<std::pair<CLI::App*, xwd::Stage>> stage_cmds;
  for (const auto& [name, help] : stages) {
    auto* cmd = app.add_subcommand(name, help);
    add_common(cmd, opt);
    stage_cmds.emplace_back(cmd, xwd::parse_stage(name));
  }
  auto* run_all = app.add_subcommand("run-all", "Run every stage in order, skipping up-to-date work");
  add_common(run_all, opt);
  auto* phantoms = app.add_subcommand("make-phantoms", "Write the configured phantom cohort as raw series");
  add_common(phantoms, opt);
  phantoms->add_option("--out", opt.out, "Destination directory (default: <output_dir>/phantoms)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    std::cerr << app.help();
    return kExitUsage;
  }

  try {
    if (phantoms->parsed()) {
      const auto cfg = load(opt);
      const std::filesystem::path dir = opt.out.empty() ? xwd::resolve_output_dir(cfg) / "phantoms" : std::filesystem::path(opt.out);
      const auto n = xwd::write_phantom_series(cfg, dir);
      std::cout << "wrote " << n << " phantom series to " << dir.string() << '\n';
      return kExitOk;
    }
    xwd::Experiment ex(load(opt));
    if (run_all->parsed()) {
      report("run-all", ex.run_all(), ex);
      return kExitOk;
    }
    for (const auto& [cmd, stage] : stage_cmds) {
      if (cmd->parsed()) {
        report(xwd::to_string(stage), ex.run(stage), ex);
        return kExitOk;
      }
    }
  } catch (const xwd::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return e.kind() == xwd::ErrorKind::kStageFailure ? kExitStageFailure : kExitValidation;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitStageFailure;
  }
  return kExitUsage;
}
