#include <CLI11.hpp>

#include <iostream>
#include <optional>

#include "udissect/blas.hpp"
#include "udissect/pipeline.hpp"

using namespace udissect;

namespace {

struct Flags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::optional<std::size_t> workers;
  bool resume = false;
};

void add_flags(CLI::App* cmd, Flags& f) {
  cmd->add_option("--config", f.config, "experiment configuration (TOML); defaults apply when omitted");
  cmd->add_option("--seed", f.seed, "global seed, overrides the configuration");
  cmd->add_option("--out", f.out, "output directory, overrides the configuration");
  cmd->add_option("--workers", f.workers, "worker threads for scan and behavior")->check(CLI::PositiveNumber);
  cmd->add_flag("--resume", f.resume, "skip work whose artifacts are already current");
}

int run_stage(Stage stage, const Flags& f) {
  ExperimentConfig config = f.config.empty() ? ExperimentConfig() : load_config(f.config);
  if (f.seed) config.apply_seed(*f.seed);
  if (!f.out.empty()) config.output_dir = f.out;
  if (f.workers) config.workers = *f.workers;
  StageOptions options;
  options.resume = f.resume;
  Pipeline pipeline(std::move(config), options);
  pipeline.run(stage);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  blas::use_single_thread();
  CLI::App app{"Layer-wise knowledge recovery analysis of unlearned transformer models"};
  app.require_subcommand(1);
  Flags flags;
  const std::vector<std::pair<Stage, std::string>> stages = {
      {Stage::World, "generate the synthetic world and its vocabulary"},
      {Stage::Pretrain, "pretrain the vanilla model on the full corpus"},
      {Stage::Unlearn, "run every configured unlearning method, one checkpoint per epoch"},
      {Stage::Scan, "sliding-window restoration scan of each final unlearned model"},
      {Stage::Behavior, "BLEU of per-epoch responses against vanilla responses"},
      {Stage::Report, "summarise scan and behavior outputs"},
  };
  std::vector<std::pair<CLI::App*, Stage>> commands;
  for (const auto& [stage, help] : stages) {
    CLI::App* cmd = app.add_subcommand(to_string(stage), help);
    add_flags(cmd, flags);
    commands.emplace_back(cmd, stage);
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }
  try {
    for (const auto& [cmd, stage] : commands) {
      if (cmd->parsed()) return run_stage(stage, flags);
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return exit_code(e.kind());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
