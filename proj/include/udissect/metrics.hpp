#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <string>
#include <vector>

#include "udissect/corpus.hpp"
#include "udissect/error.hpp"
#include "udissect/model.hpp"
#include "udissect/parallel.hpp"
#include "udissect/tensor.hpp"

namespace udissect {

inline constexpr double kDegenerateBaseline = 1e-9;

/// Mean squared difference over every element.
template <class T>
double mse_logit_loss(const Tensor<T>& reference, const Tensor<T>& candidate) {
  require(reference.shape() == candidate.shape(), ErrorKind::ShapeMismatch,
          "mse of " + shape_string(reference.shape()) + " and " + shape_string(candidate.shape()));
  require(reference.size() > 0, ErrorKind::ShapeMismatch, "mse of empty tensors");
  double total = 0.0;
  for (std::size_t i = 0; i < reference.size(); ++i) {
    const double d = double(reference[i]) - double(candidate[i]);
    total += d * d;
  }
  return total / double(reference.size());
}

struct KrsInputs {
  double loss_star = 0.0;    // unlearned vs vanilla
  double loss_star_o = 0.0;  // restored vs vanilla
};

inline double krs(const KrsInputs& in) {
  require(std::isfinite(in.loss_star) && std::isfinite(in.loss_star_o) && in.loss_star >= 0.0 &&
              in.loss_star_o >= 0.0,
          ErrorKind::InvalidArgument, "KRS losses must be finite and non-negative");
  require(in.loss_star >= kDegenerateBaseline, ErrorKind::DegenerateBaseline,
          "unlearned logits match vanilla (loss* = " + std::to_string(in.loss_star) + ")");
  return 1.0 - in.loss_star_o / in.loss_star;
}

inline double krs(double loss_star, double loss_star_o) { return krs(KrsInputs{loss_star, loss_star_o}); }

/// Sentence-level BLEU-4: uniform weights, brevity penalty, add-one smoothing
/// on the 2- to 4-gram precisions.
inline double bleu(const TokenSeq& reference, const TokenSeq& candidate) {
  require(!reference.empty(), ErrorKind::EmptyReference, "BLEU reference is empty");
  if (candidate.empty()) return 0.0;
  double log_sum = 0.0;
  for (std::size_t n = 1; n <= 4; ++n) {
    std::map<TokenSeq, std::size_t> ref_counts, cand_counts;
    for (std::size_t i = 0; i + n <= reference.size(); ++i) ++ref_counts[TokenSeq(reference.begin() + i, reference.begin() + i + n)];
    for (std::size_t i = 0; i + n <= candidate.size(); ++i) ++cand_counts[TokenSeq(candidate.begin() + i, candidate.begin() + i + n)];
    std::size_t matched = 0, total = 0;
    for (const auto& [gram, count] : cand_counts) {
      total += count;
      auto it = ref_counts.find(gram);
      if (it != ref_counts.end()) matched += std::min(count, it->second);
    }
    const double smooth = n == 1 ? 0.0 : 1.0;
    const double num = double(matched) + smooth, den = double(total) + smooth;
    if (num == 0.0 || den == 0.0) return 0.0;
    log_sum += std::log(num / den) / 4.0;
  }
  const double c = double(candidate.size()), r = double(reference.size());
  const double bp = c > r ? 1.0 : std::exp(1.0 - r / c);
  return std::clamp(bp * std::exp(log_sum), 0.0, 1.0);
}

/// Spearman rank correlation with average ranks for ties. NaN when either
/// series is constant.
inline double spearman(const std::vector<double>& a, const std::vector<double>& b) {
  require(a.size() == b.size() && a.size() >= 2, ErrorKind::InvalidArgument, "spearman needs two equal series");
  auto ranks = [](const std::vector<double>& v) {
    std::vector<std::size_t> idx(v.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t x, std::size_t y) { return v[x] < v[y]; });
    std::vector<double> r(v.size());
    for (std::size_t i = 0; i < idx.size();) {
      std::size_t j = i;
      while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
      const double avg = (double(i) + double(j)) / 2.0 + 1.0;
      for (std::size_t k = i; k <= j; ++k) r[idx[k]] = avg;
      i = j + 1;
    }
    return r;
  };
  const auto ra = ranks(a), rb = ranks(b);
  const double n = double(a.size());
  const double ma = std::accumulate(ra.begin(), ra.end(), 0.0) / n;
  const double mb = std::accumulate(rb.begin(), rb.end(), 0.0) / n;
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < ra.size(); ++i) {
    sab += (ra[i] - ma) * (rb[i] - mb);
    saa += (ra[i] - ma) * (ra[i] - ma);
    sbb += (rb[i] - mb) * (rb[i] - mb);
  }
  if (saa == 0 || sbb == 0) return std::nan("");
  return sab / std::sqrt(saa * sbb);
}

/// Fraction of questions whose greedy answer starts with the expected tokens.
template <class T>
double qa_exact_match(const Weights<T>& w, const std::vector<QaPair>& qa) {
  require(!qa.empty(), ErrorKind::InvalidArgument, "no questions");
  std::size_t longest = 0;
  std::vector<TokenSeq> prompts;
  for (const auto& p : qa) {
    prompts.push_back(p.question);
    longest = std::max(longest, p.answer.size());
  }
  const auto outs = generate_greedy_batch(w, prompts, longest);
  std::size_t ok = 0;
  for (std::size_t i = 0; i < qa.size(); ++i) {
    const auto& ans = qa[i].answer;
    if (outs[i].size() >= ans.size() && std::equal(ans.begin(), ans.end(), outs[i].begin())) ++ok;
  }
  return double(ok) / double(qa.size());
}

inline constexpr std::size_t kResponseTokens = 30;

struct BehaviorQuestions {
  std::string concept_id;
  std::vector<TokenSeq> target;     // the concept's related questions
  std::vector<TokenSeq> unrelated;  // its unrelated questions, minus any about other forget concepts
};

struct BehaviorRow {
  std::string method;
  std::size_t epoch = 0;
  std::string concept_id;
  double target_bleu = 0.0;
  double unrelated_bleu = 0.0;
};

struct BehaviorResponses {
  std::size_t epoch = 0;
  std::string concept_id;
  std::vector<TokenSeq> target;
  std::vector<TokenSeq> unrelated;
};

struct BehaviorReport {
  std::vector<BehaviorRow> rows;
  std::vector<BehaviorResponses> vanilla;
  std::vector<std::pair<std::string, BehaviorResponses>> responses;  // keyed by method
};

inline std::vector<BehaviorQuestions> behavior_questions(const World& world,
                                                          const std::vector<std::string>& forget_ids) {
  require(!forget_ids.empty(), ErrorKind::InvalidArgument, "no forget concepts");
  std::set<TokenSeq> forgotten;
  for (const auto& id : forget_ids) {
    for (const auto& qa : world.concept_by_id(id).related_qa) forgotten.insert(qa.question);
  }
  std::vector<BehaviorQuestions> out;
  for (const auto& id : forget_ids) {
    const Concept& c = world.concept_by_id(id);
    BehaviorQuestions q;
    q.concept_id = id;
    for (const auto& qa : c.related_qa) q.target.push_back(qa.question);
    for (const auto& qa : c.unrelated_qa) {
      if (!forgotten.contains(qa.question)) q.unrelated.push_back(qa.question);
    }
    out.push_back(std::move(q));
  }
  return out;
}

namespace metrics_detail {

template <class T>
std::vector<TokenSeq> respond(const Weights<T>& w, const std::vector<TokenSeq>& questions) {
  if (questions.empty()) return {};
  std::size_t budget = kResponseTokens;
  for (const auto& q : questions) budget = std::min(budget, w.config.max_seq_len - q.size());
  return generate_greedy_batch(w, questions, budget, Tokenizer::kEos);
}

inline double mean_bleu(const std::vector<TokenSeq>& refs, const std::vector<TokenSeq>& cands) {
  if (refs.empty()) return std::nan("");
  double total = 0.0;
  for (std::size_t i = 0; i < refs.size(); ++i) {
    // an empty vanilla response can only be matched by another empty response
    total += refs[i].empty() ? (cands[i].empty() ? 1.0 : 0.0) : bleu(refs[i], cands[i]);
  }
  return total / double(refs.size());
}

}  // namespace metrics_detail

/// Greedy responses (stopping at <eos>, at most 30 tokens) of every epoch
/// checkpoint, scored by BLEU against the vanilla responses. `checkpoints`
/// pairs an epoch index with its weights.
template <class T>
BehaviorReport behavior_eval(const Weights<T>& vanilla,
                             const std::vector<std::pair<std::size_t, const Weights<T>*>>& checkpoints,
                             const World& world, const std::vector<std::string>& forget_ids,
                             const std::string& method = {}, std::size_t workers = 1) {
  require(!checkpoints.empty(), ErrorKind::InvalidArgument, "no snapshots to evaluate");
  const auto questions = behavior_questions(world, forget_ids);
  BehaviorReport report;
  for (const auto& q : questions) {
    report.vanilla.push_back(BehaviorResponses{0, q.concept_id, metrics_detail::respond(vanilla, q.target),
                                               metrics_detail::respond(vanilla, q.unrelated)});
  }
  const std::size_t cells = checkpoints.size() * questions.size();
  std::vector<BehaviorResponses> answers(cells);
  parallel_for(cells, workers, [&](std::size_t cell) {
    const auto& [epoch, weights] = checkpoints[cell / questions.size()];
    const auto& q = questions[cell % questions.size()];
    answers[cell] = BehaviorResponses{epoch, q.concept_id, metrics_detail::respond(*weights, q.target),
                                      metrics_detail::respond(*weights, q.unrelated)};
  });
  for (std::size_t cell = 0; cell < cells; ++cell) {
    const auto& v = report.vanilla[cell % questions.size()];
    const auto& a = answers[cell];
    report.rows.push_back(BehaviorRow{method, a.epoch, a.concept_id, metrics_detail::mean_bleu(v.target, a.target),
                                      metrics_detail::mean_bleu(v.unrelated, a.unrelated)});
    report.responses.emplace_back(method, a);
  }
  return report;
}

/// Per-epoch averages over concepts, in epoch order.
struct BehaviorCurve {
  std::vector<std::size_t> epochs;
  std::vector<double> target;
  std::vector<double> unrelated;
};

inline BehaviorCurve behavior_curve(const std::vector<BehaviorRow>& rows, const std::string& method) {
  std::map<std::size_t, std::pair<std::vector<double>, std::vector<double>>> by_epoch;
  for (const auto& r : rows) {
    if (r.method != method) continue;
    by_epoch[r.epoch].first.push_back(r.target_bleu);
    by_epoch[r.epoch].second.push_back(r.unrelated_bleu);
  }
  BehaviorCurve c;
  auto mean = [](const std::vector<double>& v) { return std::accumulate(v.begin(), v.end(), 0.0) / double(v.size()); };
  for (const auto& [epoch, vals] : by_epoch) {
    c.epochs.push_back(epoch);
    c.target.push_back(mean(vals.first));
    c.unrelated.push_back(mean(vals.second));
  }
  return c;
}

inline std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return buf;
}

inline void write_behavior_csv(const std::vector<BehaviorRow>& rows, const std::filesystem::path& path,
                               const std::string& config_hash = {}) {
  std::ofstream f(path, std::ios::trunc);
  require(bool(f), ErrorKind::IoFailure, "cannot write " + path.string());
  if (!config_hash.empty()) f << "# config_hash=" << config_hash << '\n';
  f << "method,epoch,concept_id,target_bleu,unrelated_bleu\n";
  for (const auto& r : rows) {
    f << r.method << ',' << r.epoch << ',' << r.concept_id << ',' << format_double(r.target_bleu) << ','
      << format_double(r.unrelated_bleu) << '\n';
  }
}

inline nlohmann::ordered_json behavior_to_json(const BehaviorReport& report, const Tokenizer& tok) {
  auto texts = [&](const std::vector<TokenSeq>& seqs) {
    std::vector<std::string> out;
    for (const auto& s : seqs) out.push_back(tok.decode(s));
    return out;
  };
  nlohmann::ordered_json j;
  j["rows"] = nlohmann::ordered_json::array();
  for (const auto& r : report.rows) {
    j["rows"].push_back({{"method", r.method},
                         {"epoch", r.epoch},
                         {"concept_id", r.concept_id},
                         {"target_bleu", r.target_bleu},
                         {"unrelated_bleu", r.unrelated_bleu}});
  }
  j["vanilla"] = nlohmann::ordered_json::array();
  for (const auto& v : report.vanilla) {
    j["vanilla"].push_back({{"concept_id", v.concept_id}, {"target", texts(v.target)}, {"unrelated", texts(v.unrelated)}});
  }
  j["responses"] = nlohmann::ordered_json::array();
  for (const auto& [method, r] : report.responses) {
    j["responses"].push_back({{"method", method},
                              {"epoch", r.epoch},
                              {"concept_id", r.concept_id},
                              {"target", texts(r.target)},
                              {"unrelated", texts(r.unrelated)}});
  }
  return j;
}

inline std::vector<BehaviorRow> behavior_rows_from_json(const nlohmann::ordered_json& j) {
  try {
    std::vector<BehaviorRow> rows;
    for (const auto& r : j.at("rows")) {
      rows.push_back(BehaviorRow{r.at("method"), r.at("epoch"), r.at("concept_id"), r.at("target_bleu"), r.at("unrelated_bleu")});
    }
    return rows;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::ConfigParse, std::string("malformed behavior json: ") + e.what());
  }
}

}  // namespace udissect
