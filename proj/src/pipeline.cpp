#include "udissect/pipeline.hpp"

#include <chrono>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

#include "udissect/checkpoint.hpp"
#include "udissect/training.hpp"

namespace udissect {

namespace fs = std::filesystem;

namespace {

std::string provenance(const std::string& hash) { return "config_hash=" + hash; }

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  require(!ec, ErrorKind::IoFailure, "cannot create directory " + dir.string() + ": " + ec.message());
}

void write_text(const fs::path& path, const std::string& text) {
  ensure_dir(path.parent_path());
  std::ofstream f(path, std::ios::trunc | std::ios::binary);
  require(bool(f), ErrorKind::IoFailure, "cannot write " + path.string());
  f << text;
  require(bool(f), ErrorKind::IoFailure, "write failed for " + path.string());
}

void write_json(const fs::path& path, const nlohmann::ordered_json& j) { write_text(path, j.dump(1) + "\n"); }

void require_file(const fs::path& path) {
  require(fs::exists(path), ErrorKind::MissingArtifact, path.string() + " not found; run the upstream stage first");
}

void check_hash(const fs::path& path, const std::string& found, const std::string& expected) {
  require(found == expected, ErrorKind::StaleArtifact,
          path.string() + " was produced under config hash " + (found.empty() ? "<none>" : found) +
              ", current settings hash to " + expected + "; rerun the stage that produces it");
}

std::string checkpoint_hash(const std::string& prov) {
  const std::string prefix = "config_hash=";
  return prov.rfind(prefix, 0) == 0 ? prov.substr(prefix.size()) : std::string();
}

class Stopwatch {
 public:
  double seconds() const { return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count(); }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

std::string fixed(double v, int digits = 3) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*f", digits, v);
  return buf;
}

}  // namespace

Pipeline::Pipeline(ExperimentConfig config, StageOptions options)
    : config_(std::move(config)), options_(std::move(options)), paths_{config_.output_dir} {
  config_.validate();
}

void Pipeline::log(const std::string& message) const {
  if (options_.log) {
    options_.log(message);
  } else {
    std::cerr << message << '\n';
  }
}

void Pipeline::write_manifest(Stage s, double seconds, const nlohmann::ordered_json& outputs,
                              const nlohmann::ordered_json& extra) const {
  nlohmann::ordered_json m;
  m["stage"] = to_string(s);
  m["config_hash"] = config_hash(config_, s);
  m["seed"] = config_.seed;
  m["settings"] = stage_settings(config_, s);
  m["outputs"] = outputs;
  for (const auto& [k, v] : extra.items()) m[k] = v;
  m["wall_clock_seconds"] = seconds;
  write_json(paths_.manifest(s), m);
}

bool Pipeline::manifest_current(Stage s) const {
  if (!fs::exists(paths_.manifest(s))) return false;
  const auto m = read_json_file(paths_.manifest(s));
  if (m.value("config_hash", std::string()) != config_hash(config_, s)) return false;
  for (const auto& out : m.at("outputs")) {
    if (!fs::exists(paths_.root / out.get<std::string>())) return false;
  }
  return true;
}

void Pipeline::run(Stage s) {
  switch (s) {
    case Stage::World: return gen_world();
    case Stage::Pretrain: return pretrain();
    case Stage::Unlearn: return unlearn();
    case Stage::Scan: return scan();
    case Stage::Behavior: return behavior();
    case Stage::Report: return report();
  }
}

// ---------------------------------------------------------------------------
// Loaders
// ---------------------------------------------------------------------------

World Pipeline::load_world() const {
  require_file(paths_.world_json());
  require_file(paths_.vocab());
  const auto j = read_json_file(paths_.world_json());
  check_hash(paths_.world_json(), j.value("config_hash", std::string()), config_hash(config_, Stage::World));
  return world_from_json(j, Tokenizer::load(paths_.vocab()));
}

Checkpoint Pipeline::load_vanilla() const {
  require_file(paths_.vanilla());
  auto d = load_checkpoint_with_provenance(paths_.vanilla());
  check_hash(paths_.vanilla(), checkpoint_hash(d.provenance), config_hash(config_, Stage::Pretrain));
  return std::move(d.weights);
}

Checkpoint Pipeline::load_unlearned(const UnlearnRun& run, std::size_t epoch) const {
  const auto path = paths_.checkpoint(run.name, epoch);
  require_file(path);
  auto d = load_checkpoint_with_provenance(path);
  check_hash(path, checkpoint_hash(d.provenance), run_hash(config_, run));
  return std::move(d.weights);
}

KrsScan Pipeline::load_scan(const UnlearnRun& run) const {
  const auto path = paths_.scan_json(run.name);
  require_file(path);
  const auto j = read_json_file(path);
  check_hash(path, j.at("metadata").value("config_hash", std::string()), config_hash(config_, Stage::Scan));
  return scan_from_json(j);
}

std::vector<BehaviorRow> Pipeline::load_behavior() const {
  require_file(paths_.behavior_json());
  const auto j = read_json_file(paths_.behavior_json());
  check_hash(paths_.behavior_json(), j.value("config_hash", std::string()), config_hash(config_, Stage::Behavior));
  return behavior_rows_from_json(j);
}

// ---------------------------------------------------------------------------
// Stages
// ---------------------------------------------------------------------------

void Pipeline::gen_world() {
  if (options_.resume && manifest_current(Stage::World)) {
    log("gen-world: up to date");
    return;
  }
  Stopwatch sw;
  const World world = generate_world(config_.world);
  config_.validate_against(world);
  ensure_dir(paths_.root);
  save_world(world, paths_.world_json(), paths_.vocab(), config_hash(config_, Stage::World));
  log("gen-world: " + std::to_string(world.concepts.size()) + " concepts, vocabulary " +
      std::to_string(world.tokenizer.size()));
  write_manifest(Stage::World, sw.seconds(), {"world.json", "vocab.txt"});
}

void Pipeline::pretrain() {
  if (options_.resume && manifest_current(Stage::Pretrain)) {
    log("pretrain: up to date");
    return;
  }
  Stopwatch sw;
  const World world = load_world();
  config_.validate_against(world);
  const auto corpus = full_corpus(world).paragraphs;
  const auto result = udissect::pretrain(config_.resolved_model(world), corpus, config_.pretrain,
                                         [&](std::size_t step, double loss) {
                                           if ((step + 1) % 100 == 0 || step + 1 == config_.pretrain.steps) {
                                             log("pretrain: step " + std::to_string(step + 1) + " loss " + fixed(loss, 4));
                                           }
                                         });
  const std::string hash = config_hash(config_, Stage::Pretrain);
  save_checkpoint(result.weights, paths_.vanilla(), provenance(hash));
  std::ostringstream csv;
  csv << "# config_hash=" << hash << "\nstep,loss\n";
  for (std::size_t i = 0; i < result.losses.size(); ++i) csv << i + 1 << ',' << format_double(result.losses[i]) << '\n';
  write_text(paths_.pretrain_losses(), csv.str());
  write_manifest(Stage::Pretrain, sw.seconds(), {"vanilla.ckpt", "pretrain_losses.csv"});
}

bool Pipeline::run_complete(const UnlearnRun& run) const {
  try {
    for (std::size_t e = 1; e <= run.config.epochs; ++e) {
      const auto path = paths_.checkpoint(run.name, e);
      if (!fs::exists(path)) return false;
      if (checkpoint_hash(load_checkpoint_with_provenance(path).provenance) != run_hash(config_, run)) return false;
    }
    return fs::exists(paths_.unlearn_log(run.name));
  } catch (const Error&) {
    return false;
  }
}

void Pipeline::unlearn() {
  Stopwatch sw;
  const World world = load_world();
  config_.validate_against(world);
  const Checkpoint vanilla = load_vanilla();
  const auto split = split_forget_retain(world, config_.forget_ids);
  ensure_dir(paths_.unlearn_dir());
  nlohmann::ordered_json outputs = nlohmann::ordered_json::array();
  nlohmann::ordered_json runs = nlohmann::ordered_json::array();
  for (const auto& run : config_.unlearn) {
    for (std::size_t e = 1; e <= run.config.epochs; ++e) {
      outputs.push_back(fs::relative(paths_.checkpoint(run.name, e), paths_.root).string());
    }
    outputs.push_back(fs::relative(paths_.unlearn_log(run.name), paths_.root).string());
    runs.push_back({{"name", run.name}, {"run_hash", run_hash(config_, run)}});
    if (options_.resume && run_complete(run)) {
      log("unlearn: " + run.name + " up to date");
      continue;
    }
    const std::string hash = run_hash(config_, run);
    std::ostringstream csv;
    UnlearnHooks hooks;
    hooks.keep_snapshots = false;
    hooks.on_epoch = [&](const EpochSnapshot& s) {
      save_checkpoint(s.weights, paths_.checkpoint(run.name, s.epoch), provenance(hash));
      csv << s.epoch << ',' << format_double(s.forget_loss) << ',' << format_double(s.retain_loss) << '\n';
      log("unlearn: " + run.name + " epoch " + std::to_string(s.epoch) + " forget loss " + fixed(s.forget_loss) +
          " retain loss " + fixed(s.retain_loss));
    };
    const auto result = run_unlearning(vanilla, run.config, split.forget, split.retain, world.refusals, hooks);
    write_text(paths_.unlearn_log(run.name), "# config_hash=" + hash + "\nepoch,forget_loss,retain_loss\n0," +
                                                 format_double(result.initial_forget_loss) + ',' +
                                                 format_double(result.initial_retain_loss) + '\n' + csv.str());
  }
  write_manifest(Stage::Unlearn, sw.seconds(), outputs, {{"runs", runs}});
}

void Pipeline::scan() {
  if (options_.resume && manifest_current(Stage::Scan)) {
    log("scan: up to date");
    return;
  }
  Stopwatch sw;
  const World world = load_world();
  const Checkpoint vanilla = load_vanilla();
  const std::string hash = config_hash(config_, Stage::Scan);
  const ProbeSet probes = build_probes(vanilla, world, config_.forget_ids, config_.probe.continuation_length,
                                       config_.probe.questions_per_concept);
  auto pj = probes_to_json(probes);
  pj["config_hash"] = hash;
  write_json(paths_.probes(), pj);
  nlohmann::ordered_json outputs = {"probes.json"};
  for (const auto& run : config_.unlearn) {
    const Checkpoint unlearned = load_unlearned(run, run.config.epochs);
    KrsScan result = krs_scan(unlearned, vanilla, probes, config_.scan.elements, config_.scan.modes,
                              config_.scan.window_size, config_.workers);
    result.metadata = {{"config_hash", hash},
                       {"run", run.name},
                       {"method", to_string(run.config.method)},
                       {"epoch", run.config.epochs}};
    ensure_dir(paths_.scan_csv(run.name).parent_path());
    write_scan_csv(result, paths_.scan_csv(run.name), hash);
    write_json(paths_.scan_json(run.name), scan_to_json(result));
    outputs.push_back(fs::relative(paths_.scan_csv(run.name), paths_.root).string());
    outputs.push_back(fs::relative(paths_.scan_json(run.name), paths_.root).string());
    log("scan: " + run.name + " " + std::to_string(result.cells.size()) + " cells");
  }
  write_manifest(Stage::Scan, sw.seconds(), outputs);
}

void Pipeline::behavior() {
  if (options_.resume && manifest_current(Stage::Behavior)) {
    log("behavior: up to date");
    return;
  }
  Stopwatch sw;
  const World world = load_world();
  const Checkpoint vanilla = load_vanilla();
  BehaviorReport all;
  for (const auto& run : config_.unlearn) {
    std::vector<Checkpoint> weights;
    for (std::size_t e = 1; e <= run.config.epochs; ++e) weights.push_back(load_unlearned(run, e));
    std::vector<std::pair<std::size_t, const Checkpoint*>> cks;
    for (std::size_t e = 0; e < weights.size(); ++e) cks.emplace_back(e + 1, &weights[e]);
    auto report = behavior_eval(vanilla, cks, world, config_.forget_ids, run.name, config_.workers);
    all.rows.insert(all.rows.end(), report.rows.begin(), report.rows.end());
    all.responses.insert(all.responses.end(), report.responses.begin(), report.responses.end());
    if (all.vanilla.empty()) all.vanilla = report.vanilla;
    const auto curve = behavior_curve(report.rows, run.name);
    log("behavior: " + run.name + " final target BLEU " + fixed(curve.target.back()) + " unrelated BLEU " +
        fixed(curve.unrelated.back()));
  }
  const std::string hash = config_hash(config_, Stage::Behavior);
  write_behavior_csv(all.rows, paths_.behavior_csv(), hash);
  auto j = behavior_to_json(all, world.tokenizer);
  nlohmann::ordered_json out;
  out["config_hash"] = hash;
  for (auto& [k, v] : j.items()) out[k] = v;
  write_json(paths_.behavior_json(), out);
  write_manifest(Stage::Behavior, sw.seconds(), {"behavior.csv", "behavior.json"});
}

void Pipeline::report() {
  Stopwatch sw;
  const std::string hash = config_hash(config_, Stage::Report);
  const auto rows = load_behavior();
  nlohmann::ordered_json j;
  j["config_hash"] = hash;
  j["runs"] = nlohmann::ordered_json::array();
  std::ostringstream md;
  md << "# Experiment report\n\nconfig hash `" << hash << "`, seed " << config_.seed << "\n";
  for (const auto& run : config_.unlearn) {
    const KrsScan s = load_scan(run);
    const std::size_t windows = s.num_layers - s.window_size + 1;
    nlohmann::ordered_json jr;
    jr["run"] = run.name;
    jr["method"] = to_string(run.config.method);
    md << "\n## " << run.name << "\n\nMean KRS over concepts per window start (pooled in parentheses):\n\n";
    md << "| element | mode |";
    for (std::size_t w = 0; w < windows; ++w) md << " layers " << w << "-" << w + s.window_size - 1 << " |";
    md << "\n|---|---|";
    for (std::size_t w = 0; w < windows; ++w) md << "---|";
    md << '\n';
    auto& rows_json = jr["krs"] = nlohmann::ordered_json::array();
    for (auto e : config_.scan.elements) {
      for (auto m : config_.scan.modes) {
        if (!PatchSpec::valid_combination(e, m)) continue;
        const auto mean = s.row(e, m), pooled = s.row(e, m, true);
        rows_json.push_back({{"element", to_string(e)}, {"mode", to_string(m)}, {"mean", mean}, {"pooled", pooled}});
        md << "| " << to_string(e) << " | " << to_string(m) << " |";
        for (std::size_t w = 0; w < mean.size(); ++w) md << ' ' << fixed(mean[w]) << " (" << fixed(pooled[w]) << ") |";
        md << '\n';
      }
    }
    const auto curve = behavior_curve(rows, run.name);
    const double rho = spearman(curve.target, curve.unrelated);
    jr["behavior"] = {{"epochs", curve.epochs},
                      {"target_bleu", curve.target},
                      {"unrelated_bleu", curve.unrelated},
                      {"spearman", std::isnan(rho) ? nlohmann::ordered_json(nullptr) : nlohmann::ordered_json(rho)}};
    md << "\nBehavior by epoch (BLEU against vanilla responses):\n\n| epoch | target | unrelated |\n|---|---|---|\n";
    for (std::size_t i = 0; i < curve.epochs.size(); ++i) {
      md << "| " << curve.epochs[i] << " | " << fixed(curve.target[i]) << " | " << fixed(curve.unrelated[i]) << " |\n";
    }
    md << "\nSpearman correlation of target and unrelated BLEU: " << (std::isnan(rho) ? "undefined" : fixed(rho))
       << "\n";
    j["runs"].push_back(std::move(jr));
  }
  write_json(paths_.report_json(), j);
  write_text(paths_.report_md(), md.str());
  write_manifest(Stage::Report, sw.seconds(), {"report.json", "report.md"});
}

int exit_code(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::ConfigParse:
    case ErrorKind::InvalidArgument:
    case ErrorKind::UnknownConcept:
    case ErrorKind::InsufficientQuestions:
    case ErrorKind::LayerOutOfRange:
    case ErrorKind::LengthExceeded:
      return 2;
    case ErrorKind::MissingArtifact:
    case ErrorKind::StaleArtifact:
    case ErrorKind::CorruptCheckpoint:
      return 3;
    case ErrorKind::NonFinite:
    case ErrorKind::Divergence:
    case ErrorKind::DegenerateBaseline:
      return 4;
    default:
      return 1;
  }
}

}  // namespace udissect
