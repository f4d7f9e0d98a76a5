#pragma once

#include <filesystem>
#include <functional>
#include <string>

#include "udissect/config.hpp"
#include "udissect/intervention.hpp"
#include "udissect/metrics.hpp"

namespace udissect {

/// File layout of one experiment directory.
struct ArtifactPaths {
  std::filesystem::path root;

  std::filesystem::path world_json() const { return root / "world.json"; }
  std::filesystem::path vocab() const { return root / "vocab.txt"; }
  std::filesystem::path vanilla() const { return root / "vanilla.ckpt"; }
  std::filesystem::path pretrain_losses() const { return root / "pretrain_losses.csv"; }
  std::filesystem::path unlearn_dir() const { return root / "unlearn"; }
  std::filesystem::path checkpoint(const std::string& run, std::size_t epoch) const {
    return unlearn_dir() / (run + "_epoch" + std::to_string(epoch) + ".ckpt");
  }
  std::filesystem::path unlearn_log(const std::string& run) const { return unlearn_dir() / (run + "_log.csv"); }
  std::filesystem::path probes() const { return root / "probes.json"; }
  std::filesystem::path scan_csv(const std::string& run) const { return root / "scan" / (run + ".csv"); }
  std::filesystem::path scan_json(const std::string& run) const { return root / "scan" / (run + ".json"); }
  std::filesystem::path behavior_csv() const { return root / "behavior.csv"; }
  std::filesystem::path behavior_json() const { return root / "behavior.json"; }
  std::filesystem::path report_json() const { return root / "report.json"; }
  std::filesystem::path report_md() const { return root / "report.md"; }
  std::filesystem::path manifest(Stage s) const { return root / "manifests" / (to_string(s) + ".json"); }
};

struct StageOptions {
  bool resume = false;
  std::function<void(const std::string&)> log;
};

class Pipeline {
 public:
  explicit Pipeline(ExperimentConfig config, StageOptions options = {});

  const ExperimentConfig& config() const { return config_; }
  const ArtifactPaths& paths() const { return paths_; }

  void gen_world();
  void pretrain();
  void unlearn();
  void scan();
  void behavior();
  void report();
  void run(Stage s);

  /// Loaders verify that each artifact was produced under the current
  /// settings of its stage and raise StaleArtifact otherwise.
  World load_world() const;
  Checkpoint load_vanilla() const;
  Checkpoint load_unlearned(const UnlearnRun& run, std::size_t epoch) const;
  KrsScan load_scan(const UnlearnRun& run) const;
  std::vector<BehaviorRow> load_behavior() const;

 private:
  void log(const std::string& message) const;
  void write_manifest(Stage s, double seconds, const nlohmann::ordered_json& outputs,
                      const nlohmann::ordered_json& extra = nlohmann::ordered_json::object()) const;
  bool manifest_current(Stage s) const;
  bool run_complete(const UnlearnRun& run) const;

  ExperimentConfig config_;
  StageOptions options_;
  ArtifactPaths paths_;
};

/// Maps a library error to the command-line exit status.
int exit_code(ErrorKind kind);

}  // namespace udissect
