#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "udissect/corpus.hpp"
#include "udissect/losses.hpp"
#include "udissect/model.hpp"

namespace udissect {

enum class UnlearnMethod { GA, GradDiff, DPO, NPO, NPO_KL };

inline std::string to_string(UnlearnMethod m) {
  switch (m) {
    case UnlearnMethod::GA: return "GA";
    case UnlearnMethod::GradDiff: return "GradDiff";
    case UnlearnMethod::DPO: return "DPO";
    case UnlearnMethod::NPO: return "NPO";
    case UnlearnMethod::NPO_KL: return "NPO_KL";
  }
  return "?";
}

inline std::optional<UnlearnMethod> parse_unlearn_method(const std::string& name) {
  for (auto m : {UnlearnMethod::GA, UnlearnMethod::GradDiff, UnlearnMethod::DPO, UnlearnMethod::NPO,
                 UnlearnMethod::NPO_KL}) {
    if (to_string(m) == name) return m;
  }
  return std::nullopt;
}

struct UnlearnConfig {
  UnlearnMethod method = UnlearnMethod::GradDiff;
  double learning_rate = 1e-3;
  std::size_t epochs = 10;
  std::size_t batch_size = 8;
  double beta = 0.1;
  double kl_weight = 1.0;
  std::set<ParamGroup> freeze_mask;
  std::uint64_t seed = 0;

  void validate() const {
    require(epochs >= 1, ErrorKind::InvalidArgument, "epochs must be at least 1");
    require(batch_size >= 1, ErrorKind::InvalidArgument, "batch_size must be at least 1");
    require(learning_rate > 0, ErrorKind::InvalidArgument, "learning_rate must be positive");
    require(kl_weight >= 0, ErrorKind::InvalidArgument, "kl_weight must be non-negative");
    const bool preference = method == UnlearnMethod::DPO || method == UnlearnMethod::NPO ||
                            method == UnlearnMethod::NPO_KL;
    require(!preference || beta > 0, ErrorKind::InvalidArgument, "beta must be positive");
  }
};

struct PretrainConfig {
  std::size_t steps = 3000;
  double learning_rate = 1e-3;
  std::size_t batch_size = 16;
  std::size_t warmup_steps = 100;
  std::uint64_t seed = 0;
};

struct PretrainResult {
  Checkpoint weights;
  std::vector<double> losses;  // one per step
};

struct EpochSnapshot {
  std::size_t epoch = 0;  // 1-based
  Checkpoint weights;
  double forget_loss = 0;
  double retain_loss = 0;
};

struct UnlearnResult {
  double initial_forget_loss = 0;
  double initial_retain_loss = 0;
  std::vector<EpochSnapshot> snapshots;
};

namespace train_detail {

/// Deterministic shuffled batches over a pool, reshuffled each pass.
template <class Item>
class BatchSampler {
 public:
  BatchSampler(const std::vector<Item>& pool, std::size_t batch_size, std::uint64_t seed)
      : pool_(&pool), batch_size_(batch_size), rng_(seed) {
    require(!pool.empty(), ErrorKind::InvalidArgument, "cannot sample batches from an empty pool");
  }

  std::size_t batches_per_pass() const { return (pool_->size() + batch_size_ - 1) / batch_size_; }

  std::vector<Item> next() {
    std::vector<Item> out;
    while (out.size() < batch_size_) {
      if (cursor_ == order_.size()) {
        if (strict_ && !out.empty()) break;
        order_.resize(pool_->size());
        std::iota(order_.begin(), order_.end(), 0);
        std::shuffle(order_.begin(), order_.end(), rng_);
        cursor_ = 0;
      }
      out.push_back((*pool_)[order_[cursor_++]]);
    }
    return out;
  }

  /// When strict, a batch never wraps across a pass boundary.
  void set_strict(bool on) { strict_ = on; }

 private:
  const std::vector<Item>* pool_;
  std::size_t batch_size_;
  std::mt19937_64 rng_;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
  bool strict_ = false;
};

inline std::vector<Tensor<float>*> trainable(Checkpoint& w, const std::set<ParamGroup>& frozen) {
  std::vector<Tensor<float>*> out;
  for_each_param(w, [&](const std::string&, Tensor<float>& t, ParamGroup group) {
    const bool train = !frozen.contains(group);
    t.set_requires_grad(train);
    if (train) out.push_back(&t);
  });
  return out;
}

inline void release_grads(Checkpoint& w) {
  for_each_param(w, [](const std::string&, Tensor<float>& t, ParamGroup) { t.set_requires_grad(false); });
}

template <class Fn>
double guarded(Fn&& fn) {
  try {
    return fn();
  } catch (const Error& e) {
    if (e.kind() == ErrorKind::NonFinite) fail(ErrorKind::Divergence, e.what());
    throw;
  }
}

}  // namespace train_detail

/// Mean next-token NLL of a model over a set of sequences, evaluated in
/// chunks without gradient. Token-weighted across chunks.
inline double evaluate_lm_loss(const Checkpoint& w, const std::vector<TokenSeq>& sequences,
                               std::size_t chunk = 32) {
  require(!sequences.empty(), ErrorKind::InvalidArgument, "no sequences to evaluate");
  double total = 0;
  std::size_t count = 0;
  for (std::size_t start = 0; start < sequences.size(); start += chunk) {
    const std::vector<TokenSeq> part(sequences.begin() + start,
                                     sequences.begin() + std::min(sequences.size(), start + chunk));
    std::size_t n = 0;
    for (const auto& s : part) n += s.size() - 1;
    Graph<float> g;
    total += double(g.value(loss_lm(g, w, part))[0]) * double(n);
    count += n;
  }
  return total / double(count);
}

/// Evenly spaced subset of at most `limit` items, preserving order.
template <class Item>
std::vector<Item> spread_subset(const std::vector<Item>& items, std::size_t limit) {
  if (items.size() <= limit) return items;
  std::vector<Item> out;
  for (std::size_t i = 0; i < limit; ++i) out.push_back(items[i * items.size() / limit]);
  return out;
}

/// Language-model pretraining with Adam (beta1 0.9, beta2 0.95), linear
/// warmup, then cosine decay to a tenth of the peak learning rate.
inline PretrainResult pretrain(const ModelConfig& config, const std::vector<TokenSeq>& corpus,
                               const PretrainConfig& params,
                               const std::function<void(std::size_t, double)>& on_step = {}) {
  require(!corpus.empty(), ErrorKind::InvalidArgument, "pretraining corpus is empty");
  PretrainResult result;
  result.weights = init_weights(config);
  if (params.steps == 0) return result;

  Checkpoint& w = result.weights;
  auto params_list = train_detail::trainable(w, {});
  std::vector<std::vector<float>> m1, m2;
  for (auto* t : params_list) {
    m1.emplace_back(t->size(), 0.0f);
    m2.emplace_back(t->size(), 0.0f);
  }
  train_detail::BatchSampler<TokenSeq> sampler(corpus, params.batch_size, params.seed);
  const double b1 = 0.9, b2 = 0.95, eps = 1e-8;
  const double pi = std::acos(-1.0);
  for (std::size_t step = 0; step < params.steps; ++step) {
    double lr = params.learning_rate;
    if (step < params.warmup_steps) {
      lr *= double(step + 1) / double(params.warmup_steps);
    } else {
      const double progress = double(step - params.warmup_steps) /
                              double(std::max<std::size_t>(1, params.steps - params.warmup_steps));
      lr *= 0.1 + 0.9 * 0.5 * (1.0 + std::cos(pi * progress));
    }
    const auto batch = sampler.next();
    for (auto* t : params_list) t->zero_grad();
    const double loss = train_detail::guarded([&] {
      Graph<float> g;
      Var root = loss_lm(g, w, batch);
      g.backpropagate(root);
      return double(g.value(root)[0]);
    });
    result.losses.push_back(loss);
    const double c1 = 1.0 - std::pow(b1, double(step + 1));
    const double c2 = 1.0 - std::pow(b2, double(step + 1));
    for (std::size_t p = 0; p < params_list.size(); ++p) {
      auto data = params_list[p]->data();
      auto grad = params_list[p]->grad();
      for (std::size_t i = 0; i < data.size(); ++i) {
        const double gi = grad[i];
        m1[p][i] = float(b1 * m1[p][i] + (1 - b1) * gi);
        m2[p][i] = float(b2 * m2[p][i] + (1 - b2) * gi * gi);
        data[i] -= float(lr * (m1[p][i] / c1) / (std::sqrt(m2[p][i] / c2) + eps));
      }
    }
    if (on_step) on_step(step, loss);
  }
  train_detail::release_grads(w);
  return result;
}

/// Forget examples for the preference objectives: each statement of the
/// forget corpus becomes (<bos> + prompt, unfavored = true answer), with a
/// refusal template as the preferred answer.
inline std::vector<PreferenceExample> preference_examples(const TextCorpus& forget,
                                                          const std::vector<TokenSeq>& refusals,
                                                          std::uint64_t seed) {
  require(!refusals.empty(), ErrorKind::InvalidArgument, "no refusal templates");
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, refusals.size() - 1);
  std::vector<PreferenceExample> out;
  for (const auto& st : forget.statements) {
    PreferenceExample ex;
    ex.prompt.push_back(Tokenizer::kBos);
    ex.prompt.insert(ex.prompt.end(), st.prompt.begin(), st.prompt.end());
    ex.unfavored = st.answer;
    ex.preferred = refusals[pick(rng)];
    out.push_back(std::move(ex));
  }
  return out;
}

struct UnlearnHooks {
  std::function<void(const EpochSnapshot&)> on_epoch;
  bool keep_snapshots = true;
  std::size_t eval_limit = 64;  // sequences per set for the epoch losses
};

/// Builds the loss of one unlearning step for `config.method`.
inline Var unlearning_loss(Graph<float>& g, Checkpoint& model, const Checkpoint& reference,
                           const UnlearnConfig& config, const std::vector<TokenSeq>& forget_batch,
                           const std::vector<PreferenceExample>& preference_batch,
                           const std::vector<TokenSeq>& retain_batch) {
  const float beta = float(config.beta), kl = float(config.kl_weight);
  switch (config.method) {
    case UnlearnMethod::GA: return loss_ga(g, model, forget_batch);
    case UnlearnMethod::GradDiff: return loss_grad_diff(g, model, reference, forget_batch, retain_batch, kl);
    case UnlearnMethod::DPO: return loss_dpo(g, model, reference, preference_batch, beta);
    case UnlearnMethod::NPO: return loss_npo(g, model, reference, preference_batch, beta);
    case UnlearnMethod::NPO_KL: return loss_npo_kl(g, model, reference, preference_batch, retain_batch, beta, kl);
  }
  fail(ErrorKind::InvalidArgument, "unknown unlearning method");
}

/// Fine-tunes a copy of `vanilla` with plain SGD. The vanilla checkpoint is
/// the frozen reference throughout. One epoch is one pass over the forget
/// paragraphs (GA, GradDiff) or forget statements (DPO, NPO, NPO_KL).
inline UnlearnResult run_unlearning(const Checkpoint& vanilla, const UnlearnConfig& config, const TextCorpus& forget,
                                    const TextCorpus& retain, const std::vector<TokenSeq>& refusals,
                                    const UnlearnHooks& hooks = {}) {
  config.validate();
  require(!forget.paragraphs.empty(), ErrorKind::InvalidArgument, "forget corpus is empty");
  require(!retain.paragraphs.empty(), ErrorKind::EmptyRetain, "retain corpus is empty");
  const bool preference = config.method == UnlearnMethod::DPO || config.method == UnlearnMethod::NPO ||
                          config.method == UnlearnMethod::NPO_KL;
  const bool uses_retain = config.method == UnlearnMethod::GradDiff || config.method == UnlearnMethod::NPO_KL;

  const auto forget_eval = spread_subset(forget.paragraphs, hooks.eval_limit);
  const auto retain_eval = spread_subset(retain.paragraphs, hooks.eval_limit);

  UnlearnResult result;
  result.initial_forget_loss = evaluate_lm_loss(vanilla, forget_eval);
  result.initial_retain_loss = evaluate_lm_loss(vanilla, retain_eval);

  Checkpoint model = vanilla;
  auto params = train_detail::trainable(model, config.freeze_mask);
  const auto examples = preference ? preference_examples(forget, refusals, config.seed) : std::vector<PreferenceExample>{};

  train_detail::BatchSampler<TokenSeq> forget_sampler(forget.paragraphs, config.batch_size, config.seed);
  forget_sampler.set_strict(true);
  train_detail::BatchSampler<TokenSeq> retain_sampler(retain.paragraphs, config.batch_size, config.seed + 1);
  std::optional<train_detail::BatchSampler<PreferenceExample>> pref_sampler;
  if (preference) {
    pref_sampler.emplace(examples, config.batch_size, config.seed);
    pref_sampler->set_strict(true);
  }
  const std::size_t steps_per_epoch =
      preference ? pref_sampler->batches_per_pass() : forget_sampler.batches_per_pass();

  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    for (std::size_t step = 0; step < steps_per_epoch; ++step) {
      std::vector<TokenSeq> forget_batch, retain_batch;
      std::vector<PreferenceExample> pref_batch;
      if (preference) {
        pref_batch = pref_sampler->next();
      } else {
        forget_batch = forget_sampler.next();
      }
      if (uses_retain) retain_batch = retain_sampler.next();
      if (params.empty()) continue;
      for (auto* t : params) t->zero_grad();
      train_detail::guarded([&] {
        Graph<float> g;
        Var root = unlearning_loss(g, model, vanilla, config, forget_batch, pref_batch, retain_batch);
        g.backpropagate(root);
        return double(g.value(root)[0]);
      });
      const float lr = float(config.learning_rate);
      for (auto* t : params) {
        auto data = t->data();
        auto grad = t->grad();
        for (std::size_t i = 0; i < data.size(); ++i) data[i] -= lr * grad[i];
      }
    }
    EpochSnapshot snap;
    snap.epoch = epoch;
    snap.weights = model;
    train_detail::release_grads(snap.weights);
    snap.forget_loss = evaluate_lm_loss(snap.weights, forget_eval);
    snap.retain_loss = evaluate_lm_loss(snap.weights, retain_eval);
    require(std::isfinite(snap.forget_loss) && std::isfinite(snap.retain_loss), ErrorKind::Divergence,
            "epoch " + std::to_string(epoch) + " produced a non-finite loss");
    if (hooks.on_epoch) hooks.on_epoch(snap);
    if (hooks.keep_snapshots) result.snapshots.push_back(std::move(snap));
  }
  return result;
}

}  // namespace udissect
