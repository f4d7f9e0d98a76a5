#pragma once

#include <cmath>
#include <vector>

#include "udissect/graph.hpp"
#include "udissect/model.hpp"

namespace udissect {

/// Prompt plus one or two candidate continuations. `preferred` is only used
/// by DPO; `unfavored` is the response being unlearned.
struct PreferenceExample {
  TokenSeq prompt;
  TokenSeq preferred;
  TokenSeq unfavored;
};

namespace loss_detail {

struct NextTokenTargets {
  std::vector<std::size_t> rows;
  std::vector<std::size_t> targets;
};

/// Every position that has a successor token inside its own sequence.
inline NextTokenTargets next_token_targets(const std::vector<TokenSeq>& batch) {
  NextTokenTargets t;
  std::size_t offset = 0;
  for (const auto& seq : batch) {
    for (std::size_t i = 0; i + 1 < seq.size(); ++i) {
      t.rows.push_back(offset + i);
      t.targets.push_back(seq[i + 1]);
    }
    offset += seq.size();
  }
  require(!t.rows.empty(), ErrorKind::InvalidArgument, "batch has no next-token targets");
  return t;
}

template <class T>
Tensor<T> row_log_softmax(const Tensor<T>& logits, const std::vector<std::size_t>& rows) {
  const std::size_t width = logits.cols();
  Tensor<T> out({rows.size(), width});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    auto in = logits.row(rows[i]);
    const T lse = detail::log_sum_exp(in);
    for (std::size_t c = 0; c < width; ++c) out.at(i, c) = in[c] - lse;
  }
  return out;
}

struct AnswerLayout {
  std::vector<TokenSeq> sequences;
  std::vector<std::size_t> rows;
  std::vector<std::size_t> targets;
  std::vector<std::size_t> lengths;
};

inline AnswerLayout answer_layout(const std::vector<TokenSeq>& prompts, const std::vector<TokenSeq>& answers) {
  require(prompts.size() == answers.size() && !prompts.empty(), ErrorKind::InvalidArgument,
          "prompt/answer batch mismatch");
  AnswerLayout a;
  std::size_t offset = 0;
  for (std::size_t i = 0; i < prompts.size(); ++i) {
    require(!prompts[i].empty(), ErrorKind::InvalidArgument, "empty prompt");
    require(!answers[i].empty(), ErrorKind::InvalidArgument, "empty answer");
    TokenSeq s = prompts[i];
    s.insert(s.end(), answers[i].begin(), answers[i].end());
    for (std::size_t j = 0; j < answers[i].size(); ++j) {
      a.rows.push_back(offset + prompts[i].size() - 1 + j);
      a.targets.push_back(answers[i][j]);
    }
    a.lengths.push_back(answers[i].size());
    offset += s.size();
    a.sequences.push_back(std::move(s));
  }
  return a;
}

}  // namespace loss_detail

/// Mean token-level negative log-likelihood over every next-token position.
template <class T, class W>
Var loss_lm(Graph<T>& g, W& model, const std::vector<TokenSeq>& batch) {
  require(!batch.empty(), ErrorKind::InvalidArgument, "empty batch");
  auto targets = loss_detail::next_token_targets(batch);
  ForwardGraph fg = build_forward(g, model, batch);
  return g.cross_entropy(fg.logits, std::move(targets.rows), std::move(targets.targets));
}

/// Gradient ascent objective: the negated language-modelling loss.
template <class T, class W>
Var loss_ga(Graph<T>& g, W& model, const std::vector<TokenSeq>& forget_batch) {
  return g.scale(loss_lm(g, model, forget_batch), T(-1));
}

/// Mean per-position KL(reference || model) over the next-token positions of
/// a retain batch. The reference model is evaluated without gradient.
template <class T, class W>
Var retain_kl(Graph<T>& g, W& model, const Weights<T>& reference, const std::vector<TokenSeq>& retain_batch) {
  require(!retain_batch.empty(), ErrorKind::InvalidArgument, "empty retain batch");
  auto targets = loss_detail::next_token_targets(retain_batch);
  Tensor<T> ref_log_probs;
  {
    Graph<T> ref_graph;
    ForwardGraph rf = build_forward(ref_graph, reference, retain_batch);
    ref_log_probs = loss_detail::row_log_softmax(ref_graph.value(rf.logits), targets.rows);
  }
  ForwardGraph fg = build_forward(g, model, retain_batch);
  return g.kl_divergence(fg.logits, g.constant(std::move(ref_log_probs)), std::move(targets.rows));
}

/// loss_ga(forget) + kl_weight * KL(reference || model) on the retain batch.
template <class T, class W>
Var loss_grad_diff(Graph<T>& g, W& model, const Weights<T>& reference, const std::vector<TokenSeq>& forget_batch,
                   const std::vector<TokenSeq>& retain_batch, T kl_weight) {
  Var ga = loss_ga(g, model, forget_batch);
  if (kl_weight == T(0)) return ga;
  return g.add(ga, g.scale(retain_kl(g, model, reference, retain_batch), kl_weight));
}

/// Per-example sum of answer-token log-probabilities given the prompt.
template <class T, class W>
Var sequence_log_probs(Graph<T>& g, W& model, const std::vector<TokenSeq>& prompts,
                       const std::vector<TokenSeq>& answers) {
  auto layout = loss_detail::answer_layout(prompts, answers);
  ForwardGraph fg = build_forward(g, model, layout.sequences);
  Var per_token = g.token_log_probs(fg.logits, std::move(layout.rows), std::move(layout.targets));
  return g.segment_sum(per_token, std::move(layout.lengths));
}

template <class T>
Tensor<T> reference_log_probs(const Weights<T>& reference, const std::vector<TokenSeq>& prompts,
                              const std::vector<TokenSeq>& answers) {
  Graph<T> g;
  return g.value(sequence_log_probs(g, reference, prompts, answers));
}

/// Direct preference optimisation, averaged over examples:
/// -log sigmoid(beta * [(log p(w) - log ref(w)) - (log p(l) - log ref(l))]).
template <class T, class W>
Var loss_dpo(Graph<T>& g, W& model, const Weights<T>& reference, const std::vector<PreferenceExample>& batch,
             T beta) {
  require(!batch.empty(), ErrorKind::InvalidArgument, "empty preference batch");
  require(beta > T(0), ErrorKind::InvalidArgument, "beta must be positive");
  std::vector<TokenSeq> prompts, answers;
  for (const auto& ex : batch) {
    prompts.push_back(ex.prompt);
    answers.push_back(ex.preferred);
  }
  for (const auto& ex : batch) {
    prompts.push_back(ex.prompt);
    answers.push_back(ex.unfavored);
  }
  Tensor<T> ref = reference_log_probs(reference, prompts, answers);
  const std::size_t n = batch.size();
  // margin_i = (lp_w - ref_w) - (lp_l - ref_l), assembled as one linear map
  Tensor<T> ref_margin({n});
  for (std::size_t i = 0; i < n; ++i) ref_margin[i] = ref[i] - ref[n + i];
  Var lp = sequence_log_probs(g, model, prompts, answers);
  Var policy_margin = g.custom(
      {lp},
      [n](Graph<T>& gg, std::size_t self) {
        const auto& x = gg.value_of(gg.inputs(self)[0]);
        Tensor<T> out({n});
        for (std::size_t i = 0; i < n; ++i) out[i] = x[i] - x[n + i];
        gg.output(self) = std::move(out);
      },
      [n](Graph<T>& gg, std::size_t self) {
        auto up = gg.upstream(self);
        auto d = gg.grad_buffer(gg.inputs(self)[0]);
        for (std::size_t i = 0; i < n; ++i) {
          d[i] += up[i];
          d[n + i] -= up[i];
        }
      });
  Var margin = g.sub(policy_margin, g.constant(std::move(ref_margin)));
  return g.scale(g.mean(g.log_sigmoid(g.scale(margin, beta))), T(-1));
}

/// Negative preference optimisation, averaged over examples:
/// (2/beta) * log(1 + (p(l)/ref(l))^beta) = -(2/beta) * log sigmoid(-beta * (log p(l) - log ref(l))).
template <class T, class W>
Var loss_npo(Graph<T>& g, W& model, const Weights<T>& reference, const std::vector<PreferenceExample>& batch,
             T beta) {
  require(!batch.empty(), ErrorKind::InvalidArgument, "empty preference batch");
  require(beta > T(0), ErrorKind::InvalidArgument, "beta must be positive");
  std::vector<TokenSeq> prompts, answers;
  for (const auto& ex : batch) {
    prompts.push_back(ex.prompt);
    answers.push_back(ex.unfavored);
  }
  Tensor<T> ref = reference_log_probs(reference, prompts, answers);
  Var log_ratio = g.sub(sequence_log_probs(g, model, prompts, answers), g.constant(std::move(ref)));
  return g.scale(g.mean(g.log_sigmoid(g.scale(log_ratio, -beta))), T(-2) / beta);
}

/// NPO plus kl_weight * KL(reference || model) on a retain batch.
template <class T, class W>
Var loss_npo_kl(Graph<T>& g, W& model, const Weights<T>& reference, const std::vector<PreferenceExample>& batch,
                const std::vector<TokenSeq>& retain_batch, T beta, T kl_weight) {
  Var npo = loss_npo(g, model, reference, batch, beta);
  if (kl_weight == T(0)) return npo;
  return g.add(npo, g.scale(retain_kl(g, model, reference, retain_batch), kl_weight));
}

}  // namespace udissect
