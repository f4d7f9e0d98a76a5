#include "udissect/config.hpp"

#include <openssl/sha.h>

#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

#include <toml.hpp>

namespace udissect {

ExperimentConfig::ExperimentConfig() {
  model.hidden_dim = 128;
  model.mlp_dim = 512;
  model.vocab_size = 2048;
  model.max_seq_len = 256;
  pretrain.steps = 1500;
  pretrain.learning_rate = 2e-3;
  pretrain.batch_size = 16;
  pretrain.warmup_steps = 100;
  UnlearnConfig gd;
  gd.method = UnlearnMethod::GradDiff;
  gd.learning_rate = 2e-3;
  UnlearnConfig npo;
  npo.method = UnlearnMethod::NPO;
  npo.learning_rate = 2e-3;
  unlearn = {{"GradDiff", gd}, {"NPO", npo}};
  unlearn_seed_set_.assign(unlearn.size(), false);
}

void ExperimentConfig::apply_seed(std::uint64_t s) {
  seed = s;
  if (!world_seed_set_) world.seed = s;
  if (!model_seed_set_) model.seed = s;
  if (!pretrain_seed_set_) pretrain.seed = s;
  unlearn_seed_set_.resize(unlearn.size(), false);
  for (std::size_t i = 0; i < unlearn.size(); ++i) {
    if (!unlearn_seed_set_[i]) unlearn[i].config.seed = s;
  }
}

void ExperimentConfig::validate() const {
  auto bad = [](const std::string& field, const std::string& why) { fail(ErrorKind::ConfigParse, field + ": " + why); };
  ModelConfig m = model;
  if (m.vocab_size == 0) m.vocab_size = 1;
  try {
    m.validate();
  } catch (const Error& e) {
    bad("model", e.what());
  }
  if (world.num_concepts < 2) bad("world.num_concepts", "at least two concepts are needed");
  if (pretrain.batch_size == 0) bad("pretrain.batch_size", "must be positive");
  if (!(pretrain.learning_rate > 0)) bad("pretrain.learning_rate", "must be positive");
  if (forget_ids.empty()) bad("unlearn.forget", "at least one concept to forget");
  if (std::set<std::string>(forget_ids.begin(), forget_ids.end()).size() != forget_ids.size()) {
    bad("unlearn.forget", "duplicate concept id");
  }
  if (unlearn.empty()) bad("unlearn.runs", "at least one unlearning run");
  std::set<std::string> names;
  for (const auto& r : unlearn) {
    if (r.name.empty() || r.name.find_first_of("/\\ ") != std::string::npos) {
      bad("unlearn.runs.name", "\"" + r.name + "\" is not a valid artifact name");
    }
    if (!names.insert(r.name).second) bad("unlearn.runs.name", "duplicate run name " + r.name);
    try {
      r.config.validate();
    } catch (const Error& e) {
      bad("unlearn.runs[" + r.name + "]", e.what());
    }
  }
  if (probe.continuation_length == 0) bad("probe.continuation_length", "must be positive");
  if (probe.questions_per_concept == 0) bad("probe.questions_per_concept", "must be positive");
  if (probe.questions_per_concept > world.qa_per_concept) {
    bad("probe.questions_per_concept", "exceeds world.qa_per_concept");
  }
  if (scan.elements.empty()) bad("scan.elements", "empty");
  if (scan.modes.empty()) bad("scan.modes", "empty");
  if (scan.window_size == 0 || scan.window_size > model.num_layers) {
    bad("scan.window_size", "must be between 1 and model.num_layers");
  }
  if (workers == 0) bad("runtime.workers", "must be positive");
}

void ExperimentConfig::validate_against(const World& w) const {
  for (const auto& id : forget_ids) {
    bool found = false;
    for (const auto& c : w.concepts) found = found || c.id == id;
    if (!found) fail(ErrorKind::ConfigParse, "unlearn.forget: no concept " + id + " in the generated world");
  }
  if (model.vocab_size != 0 && model.vocab_size < w.tokenizer.size()) {
    fail(ErrorKind::ConfigParse, "model.vocab_size: " + std::to_string(model.vocab_size) +
                                     " is smaller than the generated vocabulary of " +
                                     std::to_string(w.tokenizer.size()));
  }
}

ModelConfig ExperimentConfig::resolved_model(const World& w) const {
  ModelConfig m = model;
  if (m.vocab_size == 0) m.vocab_size = std::uint32_t(w.tokenizer.size());
  return m;
}

// ---------------------------------------------------------------------------
// Parsing
// ---------------------------------------------------------------------------

namespace {

class Reader {
 public:
  Reader(const toml::table& root, std::string source) : root_(root), source_(std::move(source)) {}

  [[noreturn]] void error(const toml::node* node, const std::string& field, const std::string& what) const {
    std::string where = source_;
    if (node != nullptr && node->source().begin) where += ":" + std::to_string(node->source().begin.line);
    fail(ErrorKind::ConfigParse, where + ": field " + field + ": " + what);
  }

  const toml::table* section(const std::string& name) {
    const toml::node* n = root_.get(name);
    seen_.insert(name);
    if (n == nullptr) return nullptr;
    if (!n->is_table()) error(n, name, "expected a table");
    return n->as_table();
  }

  void check_unknown(const toml::table& t, const std::string& prefix, const std::set<std::string>& known) const {
    for (const auto& [k, v] : t) {
      const std::string key(k.str());
      if (!known.contains(key)) error(&v, prefix.empty() ? key : prefix + "." + key, "unknown key");
    }
  }

  template <class U>
  bool integer(const toml::table* t, const std::string& prefix, const std::string& key, U& out, std::int64_t min = 0) {
    if (t == nullptr) return false;
    const toml::node* n = t->get(key);
    if (n == nullptr) return false;
    const auto v = n->value<std::int64_t>();
    if (!n->is_integer() || !v) error(n, prefix + "." + key, "expected an integer");
    if (*v < min) error(n, prefix + "." + key, "must be at least " + std::to_string(min));
    if (std::uint64_t(*v) > std::uint64_t(std::numeric_limits<U>::max())) error(n, prefix + "." + key, "too large");
    out = U(*v);
    return true;
  }

  bool real(const toml::table* t, const std::string& prefix, const std::string& key, double& out) {
    if (t == nullptr) return false;
    const toml::node* n = t->get(key);
    if (n == nullptr) return false;
    if (!n->is_number()) error(n, prefix + "." + key, "expected a number");
    out = *n->value<double>();
    if (!std::isfinite(out)) error(n, prefix + "." + key, "must be finite");
    return true;
  }

  bool string(const toml::table* t, const std::string& prefix, const std::string& key, std::string& out) {
    if (t == nullptr) return false;
    const toml::node* n = t->get(key);
    if (n == nullptr) return false;
    if (!n->is_string()) error(n, prefix + "." + key, "expected a string");
    out = *n->value<std::string>();
    return true;
  }

  bool strings(const toml::table* t, const std::string& prefix, const std::string& key, std::vector<std::string>& out) {
    if (t == nullptr) return false;
    const toml::node* n = t->get(key);
    if (n == nullptr) return false;
    if (!n->is_array()) error(n, prefix + "." + key, "expected an array of strings");
    out.clear();
    for (const auto& item : *n->as_array()) {
      if (!item.is_string()) error(&item, prefix + "." + key, "expected an array of strings");
      out.push_back(*item.value<std::string>());
    }
    return true;
  }

  template <class E, class Parse>
  void enums(const toml::table* t, const std::string& prefix, const std::string& key, std::vector<E>& out,
             Parse&& parse) {
    std::vector<std::string> names;
    if (!strings(t, prefix, key, names)) return;
    out.clear();
    for (const auto& name : names) {
      const auto e = parse(name);
      if (!e) error(t->get(key), prefix + "." + key, "unknown value \"" + name + "\"");
      out.push_back(*e);
    }
  }

  const toml::table& root() const { return root_; }
  const std::set<std::string>& seen() const { return seen_; }

 private:
  const toml::table& root_;
  std::string source_;
  std::set<std::string> seen_;
};

}  // namespace

ExperimentConfig parse_config(const std::string& text, const std::string& source_name) {
  toml::table root;
  try {
    root = toml::parse(text, source_name);
  } catch (const toml::parse_error& e) {
    fail(ErrorKind::ConfigParse, source_name + ":" + std::to_string(e.source().begin.line) + ":" +
                                     std::to_string(e.source().begin.column) + ": " + std::string(e.description()));
  }

  ExperimentConfig c;
  Reader r(root, source_name);
  std::uint64_t seed = 0;
  r.integer(&root, "", "seed", seed);

  if (const auto* t = r.section("world")) {
    r.check_unknown(*t, "world", {"num_concepts", "paragraphs_per_concept", "qa_per_concept", "unrelated_qa_per_concept",
                                  "statements_per_paragraph", "max_vocab", "seed"});
    auto& w = c.world;
    r.integer(t, "world", "num_concepts", w.num_concepts, 1);
    r.integer(t, "world", "paragraphs_per_concept", w.paragraphs_per_concept, 1);
    r.integer(t, "world", "qa_per_concept", w.qa_per_concept, 1);
    r.integer(t, "world", "unrelated_qa_per_concept", w.unrelated_qa_per_concept, 0);
    r.integer(t, "world", "statements_per_paragraph", w.statements_per_paragraph, 1);
    r.integer(t, "world", "max_vocab", w.max_vocab, 1);
    c.world_seed_set_ = r.integer(t, "world", "seed", w.seed);
  }

  if (const auto* t = r.section("model")) {
    r.check_unknown(*t, "model", {"num_layers", "hidden_dim", "mlp_dim", "num_heads", "vocab_size", "max_seq_len",
                                  "mlp_style", "seed"});
    auto& m = c.model;
    r.integer(t, "model", "num_layers", m.num_layers, 1);
    r.integer(t, "model", "hidden_dim", m.hidden_dim, 1);
    r.integer(t, "model", "mlp_dim", m.mlp_dim, 1);
    r.integer(t, "model", "num_heads", m.num_heads, 1);
    r.integer(t, "model", "vocab_size", m.vocab_size, 0);
    r.integer(t, "model", "max_seq_len", m.max_seq_len, 1);
    std::string style;
    if (r.string(t, "model", "mlp_style", style)) {
      if (style == to_string(MlpStyle::TwoMatrix)) {
        m.mlp_style = MlpStyle::TwoMatrix;
      } else if (style == to_string(MlpStyle::Gated)) {
        m.mlp_style = MlpStyle::Gated;
      } else {
        r.error(t->get("mlp_style"), "model.mlp_style", "unknown style \"" + style + "\"");
      }
    }
    c.model_seed_set_ = r.integer(t, "model", "seed", m.seed);
  }

  if (const auto* t = r.section("pretrain")) {
    r.check_unknown(*t, "pretrain", {"steps", "learning_rate", "batch_size", "warmup_steps", "seed"});
    auto& p = c.pretrain;
    r.integer(t, "pretrain", "steps", p.steps);
    r.real(t, "pretrain", "learning_rate", p.learning_rate);
    r.integer(t, "pretrain", "batch_size", p.batch_size, 1);
    r.integer(t, "pretrain", "warmup_steps", p.warmup_steps);
    c.pretrain_seed_set_ = r.integer(t, "pretrain", "seed", p.seed);
  }

  if (const auto* t = r.section("unlearn")) {
    r.check_unknown(*t, "unlearn", {"forget", "epochs", "batch_size", "runs"});
    r.strings(t, "unlearn", "forget", c.forget_ids);
    std::size_t epochs = 10, batch = 8;
    const bool epochs_set = r.integer(t, "unlearn", "epochs", epochs, 1);
    const bool batch_set = r.integer(t, "unlearn", "batch_size", batch, 1);
    if (const toml::node* runs = t->get("runs")) {
      if (!runs->is_array_of_tables()) r.error(runs, "unlearn.runs", "expected [[unlearn.runs]] tables");
      c.unlearn.clear();
      c.unlearn_seed_set_.clear();
      for (const auto& item : *runs->as_array()) {
        const toml::table* rt = item.as_table();
        r.check_unknown(*rt, "unlearn.runs",
                        {"name", "method", "learning_rate", "epochs", "batch_size", "beta", "kl_weight", "freeze", "seed"});
        UnlearnRun run;
        std::string method;
        if (!r.string(rt, "unlearn.runs", "method", method)) r.error(rt, "unlearn.runs.method", "missing");
        const auto m = parse_unlearn_method(method);
        if (!m) r.error(rt->get("method"), "unlearn.runs.method", "unknown method \"" + method + "\"");
        run.config.method = *m;
        run.name = method;
        r.string(rt, "unlearn.runs", "name", run.name);
        run.config.epochs = epochs;
        run.config.batch_size = batch;
        r.real(rt, "unlearn.runs", "learning_rate", run.config.learning_rate);
        r.integer(rt, "unlearn.runs", "epochs", run.config.epochs, 1);
        r.integer(rt, "unlearn.runs", "batch_size", run.config.batch_size, 1);
        r.real(rt, "unlearn.runs", "beta", run.config.beta);
        r.real(rt, "unlearn.runs", "kl_weight", run.config.kl_weight);
        std::vector<ParamGroup> frozen;
        r.enums(rt, "unlearn.runs", "freeze", frozen, parse_param_group);
        run.config.freeze_mask = {frozen.begin(), frozen.end()};
        c.unlearn_seed_set_.push_back(r.integer(rt, "unlearn.runs", "seed", run.config.seed));
        c.unlearn.push_back(std::move(run));
      }
    } else {
      for (auto& run : c.unlearn) {
        if (epochs_set) run.config.epochs = epochs;
        if (batch_set) run.config.batch_size = batch;
      }
    }
  }

  if (const auto* t = r.section("probe")) {
    r.check_unknown(*t, "probe", {"continuation_length", "questions_per_concept"});
    r.integer(t, "probe", "continuation_length", c.probe.continuation_length, 1);
    r.integer(t, "probe", "questions_per_concept", c.probe.questions_per_concept, 1);
  }

  if (const auto* t = r.section("scan")) {
    r.check_unknown(*t, "scan", {"elements", "modes", "window_size"});
    r.enums(t, "scan", "elements", c.scan.elements, parse_patch_element);
    r.enums(t, "scan", "modes", c.scan.modes, parse_patch_mode);
    r.integer(t, "scan", "window_size", c.scan.window_size, 1);
  }

  if (const auto* t = r.section("output")) {
    r.check_unknown(*t, "output", {"dir"});
    std::string dir;
    if (r.string(t, "output", "dir", dir)) c.output_dir = dir;
  }

  if (const auto* t = r.section("runtime")) {
    r.check_unknown(*t, "runtime", {"workers"});
    r.integer(t, "runtime", "workers", c.workers, 1);
  }

  std::set<std::string> top = r.seen();
  top.insert("seed");
  r.check_unknown(root, "", top);

  c.apply_seed(seed);
  c.validate();
  return c;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream f(path);
  require(bool(f), ErrorKind::ConfigParse, "cannot read config file " + path.string());
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_config(ss.str(), path.string());
}

// ---------------------------------------------------------------------------
// Hashing
// ---------------------------------------------------------------------------

std::string to_string(Stage s) {
  switch (s) {
    case Stage::World: return "gen-world";
    case Stage::Pretrain: return "pretrain";
    case Stage::Unlearn: return "unlearn";
    case Stage::Scan: return "scan";
    case Stage::Behavior: return "behavior";
    case Stage::Report: return "report";
  }
  return "?";
}

namespace {

nlohmann::ordered_json unlearn_json(const UnlearnRun& r) {
  nlohmann::ordered_json frozen = nlohmann::ordered_json::array();
  for (ParamGroup g : r.config.freeze_mask) frozen.push_back(to_string(g));
  return {{"name", r.name},
          {"method", to_string(r.config.method)},
          {"learning_rate", r.config.learning_rate},
          {"epochs", r.config.epochs},
          {"batch_size", r.config.batch_size},
          {"beta", r.config.beta},
          {"kl_weight", r.config.kl_weight},
          {"freeze", frozen},
          {"seed", r.config.seed}};
}

}  // namespace

nlohmann::ordered_json stage_settings(const ExperimentConfig& c, Stage s) {
  nlohmann::ordered_json j;
  const auto& w = c.world;
  j["world"] = {{"num_concepts", w.num_concepts},
                {"paragraphs_per_concept", w.paragraphs_per_concept},
                {"qa_per_concept", w.qa_per_concept},
                {"unrelated_qa_per_concept", w.unrelated_qa_per_concept},
                {"statements_per_paragraph", w.statements_per_paragraph},
                {"max_vocab", w.max_vocab},
                {"seed", w.seed}};
  if (s == Stage::World) return j;
  const auto& m = c.model;
  j["model"] = {{"num_layers", m.num_layers}, {"hidden_dim", m.hidden_dim}, {"mlp_dim", m.mlp_dim},
                {"num_heads", m.num_heads},   {"vocab_size", m.vocab_size}, {"max_seq_len", m.max_seq_len},
                {"mlp_style", to_string(m.mlp_style)}, {"seed", m.seed}};
  const auto& p = c.pretrain;
  j["pretrain"] = {{"steps", p.steps},
                   {"learning_rate", p.learning_rate},
                   {"batch_size", p.batch_size},
                   {"warmup_steps", p.warmup_steps},
                   {"seed", p.seed}};
  if (s == Stage::Pretrain) return j;
  j["forget"] = c.forget_ids;
  j["unlearn"] = nlohmann::ordered_json::array();
  for (const auto& r : c.unlearn) j["unlearn"].push_back(unlearn_json(r));
  if (s == Stage::Unlearn || s == Stage::Behavior) return j;
  j["probe"] = {{"continuation_length", c.probe.continuation_length},
                {"questions_per_concept", c.probe.questions_per_concept}};
  nlohmann::ordered_json elements = nlohmann::ordered_json::array(), modes = nlohmann::ordered_json::array();
  for (auto e : c.scan.elements) elements.push_back(to_string(e));
  for (auto md : c.scan.modes) modes.push_back(to_string(md));
  j["scan"] = {{"elements", elements}, {"modes", modes}, {"window_size", c.scan.window_size}};
  return j;
}

namespace {

std::string short_sha256(const std::string& text) {
  unsigned char digest[SHA256_DIGEST_LENGTH];
  SHA256(reinterpret_cast<const unsigned char*>(text.data()), text.size(), digest);
  char hex[17];
  for (int i = 0; i < 8; ++i) std::snprintf(hex + 2 * i, 3, "%02x", digest[i]);
  return std::string(hex, 16);
}

}  // namespace

std::string config_hash(const ExperimentConfig& c, Stage s) { return short_sha256(stage_settings(c, s).dump()); }

std::string run_hash(const ExperimentConfig& c, const UnlearnRun& run) {
  auto j = stage_settings(c, Stage::Pretrain);
  j["forget"] = c.forget_ids;
  j["run"] = unlearn_json(run);
  return short_sha256(j.dump());
}

nlohmann::ordered_json config_to_json(const ExperimentConfig& c) {
  auto j = stage_settings(c, Stage::Report);
  j["seed"] = c.seed;
  j["output_dir"] = c.output_dir.string();
  j["workers"] = c.workers;
  return j;
}

}  // namespace udissect
