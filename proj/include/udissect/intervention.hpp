#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "udissect/corpus.hpp"
#include "udissect/error.hpp"
#include "udissect/metrics.hpp"
#include "udissect/model.hpp"
#include "udissect/parallel.hpp"

namespace udissect {

enum class TraceSource : std::uint8_t { Vanilla, Unlearned };

inline std::string to_string(TraceSource s) { return s == TraceSource::Vanilla ? "vanilla" : "unlearned"; }

/// Teacher-forced activations of one packed batch of sequences.
template <class T>
struct ActivationTrace {
  std::vector<TokenSeq> tokens;
  std::vector<LayerActivations<T>> layers;
  Tensor<T> logits;
  TraceSource source = TraceSource::Vanilla;
};

template <class T>
ActivationTrace<T> record_trace(const Weights<T>& w, const std::vector<TokenSeq>& tokens,
                                TraceSource source = TraceSource::Vanilla) {
  auto out = forward_batch(w, tokens, static_cast<const HookSet<T>*>(nullptr), true);
  return ActivationTrace<T>{tokens, std::move(out.layers), std::move(out.logits), source};
}

template <class T>
ActivationTrace<T> record_trace(const Weights<T>& w, const TokenSeq& tokens,
                                TraceSource source = TraceSource::Vanilla) {
  return record_trace(w, std::vector<TokenSeq>{tokens}, source);
}

enum class PatchElement : std::uint8_t { Coefficients, ValueVectors, AttentionOut, CoeffPlusAttn };
enum class PatchMode : std::uint8_t { Normal, Isolated };

inline constexpr std::array<PatchElement, 4> kAllPatchElements = {
    PatchElement::Coefficients, PatchElement::ValueVectors, PatchElement::AttentionOut, PatchElement::CoeffPlusAttn};
inline constexpr std::array<PatchMode, 2> kAllPatchModes = {PatchMode::Normal, PatchMode::Isolated};

inline std::string to_string(PatchElement e) {
  switch (e) {
    case PatchElement::Coefficients: return "coefficients";
    case PatchElement::ValueVectors: return "value_vectors";
    case PatchElement::AttentionOut: return "attention_out";
    case PatchElement::CoeffPlusAttn: return "coeff_plus_attn";
  }
  return "?";
}

inline std::string to_string(PatchMode m) { return m == PatchMode::Normal ? "normal" : "isolated"; }

inline std::optional<PatchElement> parse_patch_element(const std::string& s) {
  for (auto e : kAllPatchElements) {
    if (to_string(e) == s) return e;
  }
  return std::nullopt;
}

inline std::optional<PatchMode> parse_patch_mode(const std::string& s) {
  for (auto m : kAllPatchModes) {
    if (to_string(m) == s) return m;
  }
  return std::nullopt;
}

struct PatchSpec {
  PatchElement element = PatchElement::Coefficients;
  std::size_t window_start = 0;
  std::size_t window_size = 5;
  PatchMode mode = PatchMode::Normal;

  bool in_window(std::size_t layer) const { return layer >= window_start && layer < window_start + window_size; }

  static bool valid_combination(PatchElement e, PatchMode m) {
    return m == PatchMode::Normal || e != PatchElement::CoeffPlusAttn;
  }

  void validate(std::size_t num_layers) const {
    require(window_size >= 1, ErrorKind::InvalidArgument, "window_size must be at least 1");
    require(window_start + window_size <= num_layers, ErrorKind::LayerOutOfRange,
            "window [" + std::to_string(window_start) + ", " + std::to_string(window_start + window_size) +
                ") does not fit in " + std::to_string(num_layers) + " layers");
    require(valid_combination(element, mode), ErrorKind::InvalidArgument,
            "isolated mode needs a single-element patch, got " + to_string(element));
  }
};

/// Re-runs `unlearned` on `tokens` with the restoration described by `spec`.
/// With `record`, the activations actually used by the patched pass are kept.
template <class T>
ForwardOutput<T> patched_run(const Weights<T>& unlearned, const Weights<T>& vanilla,
                             const ActivationTrace<T>& vanilla_trace, const ActivationTrace<T>& unlearned_trace,
                             const PatchSpec& spec, const std::vector<TokenSeq>& tokens, bool record = false) {
  const ModelConfig& c = unlearned.config;
  require(c == vanilla.config, ErrorKind::ConfigMismatch, "vanilla and unlearned configs differ");
  require(vanilla_trace.tokens == tokens && unlearned_trace.tokens == tokens, ErrorKind::TraceMismatch,
          "traces were recorded on different tokens");
  require(vanilla_trace.layers.size() == c.num_layers && unlearned_trace.layers.size() == c.num_layers,
          ErrorKind::ConfigMismatch, "trace layer count does not match the model");
  spec.validate(c.num_layers);

  const bool coeff = spec.element == PatchElement::Coefficients || spec.element == PatchElement::CoeffPlusAttn;
  const bool attn = spec.element == PatchElement::AttentionOut || spec.element == PatchElement::CoeffPlusAttn;
  const bool isolated = spec.mode == PatchMode::Isolated;

  HookSet<T> hooks(c.num_layers);
  for (std::size_t l = 0; l < c.num_layers; ++l) {
    const bool inside = spec.in_window(l);
    if (coeff && inside) {
      hooks.set_override(l, Site::Coefficients, vanilla_trace.layers[l].coefficients);
    } else if (isolated) {
      hooks.set_override(l, Site::Coefficients, unlearned_trace.layers[l].coefficients);
    }
    if (attn && inside) {
      hooks.set_override(l, Site::AttnOut, vanilla_trace.layers[l].attn_out);
    } else if (isolated) {
      hooks.set_override(l, Site::AttnOut, unlearned_trace.layers[l].attn_out);
    }
  }

  if (spec.element == PatchElement::ValueVectors) {
    Weights<T> swapped = unlearned;
    for (std::size_t l = spec.window_start; l < spec.window_start + spec.window_size; ++l) {
      swapped.layers[l].mlp_value = vanilla.layers[l].mlp_value;
    }
    return forward_batch(swapped, tokens, &hooks, record);
  }
  return forward_batch(unlearned, tokens, &hooks, record);
}

/// Logits over all packed rows of the patched pass.
template <class T>
Tensor<T> patched_forward(const Weights<T>& unlearned, const Weights<T>& vanilla,
                          const ActivationTrace<T>& vanilla_trace, const ActivationTrace<T>& unlearned_trace,
                          const PatchSpec& spec, const std::vector<TokenSeq>& tokens) {
  return patched_run(unlearned, vanilla, vanilla_trace, unlearned_trace, spec, tokens).logits;
}

template <class T>
Tensor<T> patched_forward(const Weights<T>& unlearned, const Weights<T>& vanilla,
                          const ActivationTrace<T>& vanilla_trace, const ActivationTrace<T>& unlearned_trace,
                          const PatchSpec& spec, const TokenSeq& tokens) {
  return patched_forward(unlearned, vanilla, vanilla_trace, unlearned_trace, spec, std::vector<TokenSeq>{tokens});
}

// ---------------------------------------------------------------------------
// Probes and scans
// ---------------------------------------------------------------------------

struct ConceptProbes {
  std::string concept_id;
  std::vector<TokenSeq> prompts;
  std::vector<TokenSeq> continuations;  // vanilla greedy, exactly I tokens each

  /// prompt + continuation, the teacher-forced input of every pass.
  std::vector<TokenSeq> sequences() const {
    std::vector<TokenSeq> out;
    for (std::size_t i = 0; i < prompts.size(); ++i) {
      TokenSeq s = prompts[i];
      s.insert(s.end(), continuations[i].begin(), continuations[i].end());
      out.push_back(std::move(s));
    }
    return out;
  }

  /// Packed rows whose logits predict the continuation tokens.
  std::vector<std::size_t> scored_rows() const {
    std::vector<std::size_t> rows;
    std::size_t offset = 0;
    for (std::size_t i = 0; i < prompts.size(); ++i) {
      for (std::size_t j = 0; j < continuations[i].size(); ++j) rows.push_back(offset + prompts[i].size() - 1 + j);
      offset += prompts[i].size() + continuations[i].size();
    }
    return rows;
  }
};

struct ProbeSet {
  std::size_t continuation_length = 30;  // I
  std::size_t questions_per_concept = 10;  // N
  std::vector<ConceptProbes> concepts;
};

/// The first N related questions of each concept, continued greedily for I
/// tokens by the vanilla model.
template <class T>
ProbeSet build_probes(const Weights<T>& vanilla, const World& world, const std::vector<std::string>& concept_ids,
                      std::size_t continuation_length, std::size_t questions_per_concept) {
  require(continuation_length >= 1 && questions_per_concept >= 1, ErrorKind::InvalidArgument,
          "probe sizes must be at least 1");
  require(!concept_ids.empty(), ErrorKind::InvalidArgument, "no probe concepts");
  ProbeSet probes{continuation_length, questions_per_concept, {}};
  for (const auto& id : concept_ids) {
    const Concept& c = world.concept_by_id(id);
    require(c.related_qa.size() >= questions_per_concept, ErrorKind::InsufficientQuestions,
            id + " has " + std::to_string(c.related_qa.size()) + " related questions, " +
                std::to_string(questions_per_concept) + " requested");
    ConceptProbes cp;
    cp.concept_id = id;
    for (std::size_t i = 0; i < questions_per_concept; ++i) cp.prompts.push_back(c.related_qa[i].question);
    cp.continuations = generate_greedy_batch(vanilla, cp.prompts, continuation_length);
    probes.concepts.push_back(std::move(cp));
  }
  return probes;
}

struct KrsCell {
  PatchElement element;
  PatchMode mode;
  std::size_t window_start;
  std::size_t window_size;
  std::string concept_id;
  double loss_star;
  double loss_star_o;
  double krs;
};

/// Both concept aggregations of one (element, mode, window) cell.
struct KrsAggregate {
  PatchElement element;
  PatchMode mode;
  std::size_t window_start;
  double mean_krs;    // mean of per-concept KRS
  double pooled_krs;  // 1 - sum loss*o / sum loss*
};

struct KrsScan {
  std::size_t window_size = 5;
  std::size_t num_layers = 0;
  std::size_t continuation_length = 0;
  std::size_t questions_per_concept = 0;
  std::vector<std::string> concept_ids;
  std::vector<KrsCell> cells;
  std::vector<KrsAggregate> aggregates;
  nlohmann::ordered_json metadata = nlohmann::ordered_json::object();

  /// Aggregate for one cell; throws InvalidArgument if absent.
  const KrsAggregate& at(PatchElement e, PatchMode m, std::size_t start) const {
    for (const auto& a : aggregates) {
      if (a.element == e && a.mode == m && a.window_start == start) return a;
    }
    fail(ErrorKind::InvalidArgument, "scan has no cell " + to_string(e) + "/" + to_string(m) + "/" +
                                         std::to_string(start));
  }

  std::vector<double> row(PatchElement e, PatchMode m, bool pooled = false) const {
    std::vector<double> out;
    for (const auto& a : aggregates) {
      if (a.element == e && a.mode == m) out.push_back(pooled ? a.pooled_krs : a.mean_krs);
    }
    return out;
  }
};

namespace intervention_detail {

template <class T>
Tensor<T> select_rows(const Tensor<T>& logits, const std::vector<std::size_t>& rows) {
  Tensor<T> out({rows.size(), logits.cols()});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    auto src = logits.row(rows[i]);
    std::copy(src.begin(), src.end(), out.row(i).begin());
  }
  return out;
}

}  // namespace intervention_detail

/// KRS for every window start, requested element and mode, and probe concept.
/// Isolated coeff_plus_attn is not a valid patch and is skipped.
template <class T>
KrsScan krs_scan(const Weights<T>& unlearned, const Weights<T>& vanilla, const ProbeSet& probes,
                 const std::vector<PatchElement>& elements, const std::vector<PatchMode>& modes,
                 std::size_t window_size = 5, std::size_t workers = 1) {
  const ModelConfig& c = unlearned.config;
  require(c == vanilla.config, ErrorKind::ConfigMismatch, "vanilla and unlearned configs differ");
  require(window_size >= 1 && window_size <= c.num_layers, ErrorKind::InvalidArgument,
          "window_size " + std::to_string(window_size) + " does not fit " + std::to_string(c.num_layers) + " layers");
  require(!probes.concepts.empty(), ErrorKind::InvalidArgument, "empty probe set");

  struct ConceptState {
    std::vector<TokenSeq> sequences;
    std::vector<std::size_t> rows;
    ActivationTrace<T> vanilla_trace, unlearned_trace;
    Tensor<T> vanilla_logits;
    double loss_star = 0.0;
  };
  std::vector<ConceptState> states(probes.concepts.size());
  parallel_for(states.size(), workers, [&](std::size_t i) {
    auto& s = states[i];
    s.sequences = probes.concepts[i].sequences();
    s.rows = probes.concepts[i].scored_rows();
    s.vanilla_trace = record_trace(vanilla, s.sequences, TraceSource::Vanilla);
    s.unlearned_trace = record_trace(unlearned, s.sequences, TraceSource::Unlearned);
    s.vanilla_logits = intervention_detail::select_rows(s.vanilla_trace.logits, s.rows);
    s.loss_star = mse_logit_loss(s.vanilla_logits, intervention_detail::select_rows(s.unlearned_trace.logits, s.rows));
  });
  for (std::size_t i = 0; i < states.size(); ++i) {
    require(states[i].loss_star >= kDegenerateBaseline, ErrorKind::DegenerateBaseline,
            "unlearned model matches vanilla on the probes of " + probes.concepts[i].concept_id);
  }

  std::vector<PatchSpec> specs;
  for (auto e : elements) {
    for (auto m : modes) {
      if (!PatchSpec::valid_combination(e, m)) continue;
      for (std::size_t start = 0; start + window_size <= c.num_layers; ++start) {
        specs.push_back(PatchSpec{e, start, window_size, m});
      }
    }
  }

  const std::size_t n_concepts = states.size();
  std::vector<KrsCell> cells(specs.size() * n_concepts);
  parallel_for(cells.size(), workers, [&](std::size_t idx) {
    const PatchSpec& spec = specs[idx / n_concepts];
    const ConceptState& s = states[idx % n_concepts];
    Tensor<T> logits = patched_forward(unlearned, vanilla, s.vanilla_trace, s.unlearned_trace, spec, s.sequences);
    const double restored = mse_logit_loss(s.vanilla_logits, intervention_detail::select_rows(logits, s.rows));
    cells[idx] = KrsCell{spec.element,     spec.mode, spec.window_start, spec.window_size,
                         probes.concepts[idx % n_concepts].concept_id, s.loss_star, restored,
                         krs(s.loss_star, restored)};
  });

  KrsScan scan;
  scan.window_size = window_size;
  scan.num_layers = c.num_layers;
  scan.continuation_length = probes.continuation_length;
  scan.questions_per_concept = probes.questions_per_concept;
  for (const auto& cp : probes.concepts) scan.concept_ids.push_back(cp.concept_id);
  scan.cells = std::move(cells);
  for (std::size_t si = 0; si < specs.size(); ++si) {
    double mean = 0.0, star = 0.0, star_o = 0.0;
    for (std::size_t k = 0; k < n_concepts; ++k) {
      const auto& cell = scan.cells[si * n_concepts + k];
      mean += cell.krs;
      star += cell.loss_star;
      star_o += cell.loss_star_o;
    }
    scan.aggregates.push_back(KrsAggregate{specs[si].element, specs[si].mode, specs[si].window_start,
                                           mean / double(n_concepts), krs(star, star_o)});
  }
  return scan;
}

inline void write_scan_csv(const KrsScan& scan, const std::filesystem::path& path, const std::string& config_hash = {}) {
  std::ofstream f(path, std::ios::trunc);
  require(bool(f), ErrorKind::IoFailure, "cannot write " + path.string());
  if (!config_hash.empty()) f << "# config_hash=" << config_hash << '\n';
  f << "element,mode,window_start,window_size,concept_id,krs\n";
  for (const auto& c : scan.cells) {
    f << to_string(c.element) << ',' << to_string(c.mode) << ',' << c.window_start << ',' << c.window_size << ','
      << c.concept_id << ',' << format_double(c.krs) << '\n';
  }
}

inline nlohmann::ordered_json scan_to_json(const KrsScan& scan) {
  nlohmann::ordered_json j;
  j["metadata"] = scan.metadata;
  j["num_layers"] = scan.num_layers;
  j["window_size"] = scan.window_size;
  j["continuation_length"] = scan.continuation_length;
  j["questions_per_concept"] = scan.questions_per_concept;
  j["concept_ids"] = scan.concept_ids;
  auto& cells = j["cells"] = nlohmann::ordered_json::array();
  for (const auto& c : scan.cells) {
    cells.push_back({{"element", to_string(c.element)},
                     {"mode", to_string(c.mode)},
                     {"window_start", c.window_start},
                     {"concept_id", c.concept_id},
                     {"loss_star", c.loss_star},
                     {"loss_star_o", c.loss_star_o},
                     {"krs", c.krs}});
  }
  auto& agg = j["aggregates"] = nlohmann::ordered_json::array();
  for (const auto& a : scan.aggregates) {
    agg.push_back({{"element", to_string(a.element)},
                   {"mode", to_string(a.mode)},
                   {"window_start", a.window_start},
                   {"mean_krs", a.mean_krs},
                   {"pooled_krs", a.pooled_krs}});
  }
  return j;
}

inline KrsScan scan_from_json(const nlohmann::ordered_json& j) {
  auto element = [](const std::string& s) {
    const auto e = parse_patch_element(s);
    require(e.has_value(), ErrorKind::ConfigParse, "unknown patch element " + s);
    return *e;
  };
  auto mode = [](const std::string& s) {
    const auto m = parse_patch_mode(s);
    require(m.has_value(), ErrorKind::ConfigParse, "unknown patch mode " + s);
    return *m;
  };
  try {
    KrsScan scan;
    scan.metadata = j.at("metadata");
    scan.num_layers = j.at("num_layers");
    scan.window_size = j.at("window_size");
    scan.continuation_length = j.at("continuation_length");
    scan.questions_per_concept = j.at("questions_per_concept");
    scan.concept_ids = j.at("concept_ids").get<std::vector<std::string>>();
    for (const auto& c : j.at("cells")) {
      scan.cells.push_back(KrsCell{element(c.at("element")), mode(c.at("mode")), c.at("window_start"), scan.window_size,
                                   c.at("concept_id"), c.at("loss_star"), c.at("loss_star_o"), c.at("krs")});
    }
    for (const auto& a : j.at("aggregates")) {
      scan.aggregates.push_back(
          KrsAggregate{element(a.at("element")), mode(a.at("mode")), a.at("window_start"), a.at("mean_krs"), a.at("pooled_krs")});
    }
    return scan;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::ConfigParse, std::string("malformed scan json: ") + e.what());
  }
}

inline nlohmann::ordered_json probes_to_json(const ProbeSet& probes) {
  nlohmann::ordered_json j;
  j["continuation_length"] = probes.continuation_length;
  j["questions_per_concept"] = probes.questions_per_concept;
  j["concepts"] = nlohmann::ordered_json::array();
  for (const auto& c : probes.concepts) {
    j["concepts"].push_back({{"concept_id", c.concept_id}, {"prompts", c.prompts}, {"continuations", c.continuations}});
  }
  return j;
}

inline ProbeSet probes_from_json(const nlohmann::ordered_json& j) {
  try {
    ProbeSet p{j.at("continuation_length"), j.at("questions_per_concept"), {}};
    for (const auto& c : j.at("concepts")) {
      p.concepts.push_back(ConceptProbes{c.at("concept_id"), c.at("prompts").get<std::vector<TokenSeq>>(),
                                         c.at("continuations").get<std::vector<TokenSeq>>()});
    }
    return p;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::ConfigParse, std::string("malformed probe json: ") + e.what());
  }
}

}  // namespace udissect
