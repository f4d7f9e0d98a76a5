#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "udissect/corpus.hpp"
#include "udissect/intervention.hpp"
#include "udissect/model.hpp"
#include "udissect/training.hpp"

namespace udissect {

struct UnlearnRun {
  std::string name;  // artifact prefix, defaults to the method name
  UnlearnConfig config;
};

struct ProbeParams {
  std::size_t continuation_length = 30;
  std::size_t questions_per_concept = 10;
};

struct ScanParams {
  std::vector<PatchElement> elements{kAllPatchElements.begin(), kAllPatchElements.end()};
  std::vector<PatchMode> modes{kAllPatchModes.begin(), kAllPatchModes.end()};
  std::size_t window_size = 5;
};

/// Everything one experiment needs. Defaults describe the desk-scale
/// reference run: 8 layers, width 128, two forgotten concepts, GradDiff and NPO.
struct ExperimentConfig {
  std::uint64_t seed = 0;
  WorldParams world;
  ModelConfig model;  // vocab_size 0 means "size of the generated vocabulary"
  PretrainConfig pretrain;
  std::vector<std::string> forget_ids{"concept_00", "concept_01"};
  std::vector<UnlearnRun> unlearn;
  ProbeParams probe;
  ScanParams scan;
  std::filesystem::path output_dir = "runs/default";
  std::size_t workers = 1;

  ExperimentConfig();

  /// Propagates the global seed to every component that was not given its
  /// own seed in the file.
  void apply_seed(std::uint64_t s);
  void validate() const;
  /// Checks that depend on the generated world: concept ids and vocabulary.
  void validate_against(const World& world) const;
  ModelConfig resolved_model(const World& world) const;

 private:
  friend ExperimentConfig parse_config(const std::string&, const std::string&);
  bool world_seed_set_ = false, model_seed_set_ = false, pretrain_seed_set_ = false;
  std::vector<bool> unlearn_seed_set_;
};

ExperimentConfig parse_config(const std::string& text, const std::string& source_name = "<config>");
ExperimentConfig load_config(const std::filesystem::path& path);

enum class Stage : std::uint8_t { World, Pretrain, Unlearn, Scan, Behavior, Report };

std::string to_string(Stage s);

/// Canonical JSON of the settings a stage's outputs depend on, including all
/// upstream settings. Output paths and worker counts are excluded.
nlohmann::ordered_json stage_settings(const ExperimentConfig& c, Stage s);

/// 16 hex digits of the SHA-256 of `stage_settings`.
std::string config_hash(const ExperimentConfig& c, Stage s);

/// Hash of the settings one unlearning run depends on: pretraining, the
/// forget set and the run itself. Adding or editing another run leaves it unchanged.
std::string run_hash(const ExperimentConfig& c, const UnlearnRun& run);

nlohmann::ordered_json config_to_json(const ExperimentConfig& c);

}  // namespace udissect
