#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "support.hpp"
#include "udissect/gradcheck.hpp"
#include "udissect/losses.hpp"

using namespace udissect;
using namespace udissect::testing;

namespace {

/// A model whose next-token logits after token t are exactly `rows[t]`:
/// every block is zeroed, so the final hidden state is the scaled one-hot
/// token embedding, and the unembedding undoes the normalisation factor.
Weights<double> logit_table_model(const std::vector<std::vector<double>>& rows) {
  const std::size_t v = rows.size();
  ModelConfig c;
  c.num_layers = 1;
  c.hidden_dim = std::uint32_t(v);
  c.mlp_dim = std::uint32_t(v);
  c.num_heads = 1;
  c.vocab_size = std::uint32_t(v);
  c.max_seq_len = 8;
  Weights<double> w = init_weights<double>(c);
  for_each_param(w, [](const std::string&, Tensor<double>& t, ParamGroup group) {
    for (double& x : t.data()) x = group == ParamGroup::Norms ? 1.0 : 0.0;
  });
  const double s = 10.0;
  const double factor = s / std::sqrt(s * s / double(v) + 1e-5);
  for (std::size_t t = 0; t < v; ++t) {
    w.tok_emb.at(t, t) = s;
    for (std::size_t j = 0; j < v; ++j) w.unembed.at(t, j) = rows[t][j] / factor;
  }
  return w;
}

double log_softmax_at(const std::vector<double>& row, std::size_t k) {
  double z = 0;
  for (double x : row) z += std::exp(x);
  return row[k] - std::log(z);
}

double log_sigmoid(double x) { return -std::log1p(std::exp(-x)); }

template <class Fn>
double scalar(Fn&& build) {
  Graph<double> g;
  return g.value(build(g))[0];
}

}  // namespace

TEST(Anchors, DpoIsLn2WhenPolicyEqualsReference) {
  ModelConfig c = tiny_config();
  const Checkpoint w = tiny_weights<float>(c);
  std::mt19937_64 rng(1);
  std::vector<PreferenceExample> batch;
  for (int i = 0; i < 4; ++i) {
    auto seqs = random_batch(rng, c, 3, 1, 4);
    batch.push_back({seqs[0], seqs[1], seqs[2]});
  }
  Graph<float> g;
  EXPECT_NEAR(g.value(loss_dpo(g, w, w, batch, 0.1f))[0], std::log(2.0), 1e-6);
}

TEST(Anchors, NpoIsTwoOverBetaLn2WhenPolicyEqualsReference) {
  ModelConfig c = tiny_config();
  const Checkpoint w = tiny_weights<float>(c);
  std::mt19937_64 rng(2);
  std::vector<PreferenceExample> batch;
  for (int i = 0; i < 4; ++i) {
    auto seqs = random_batch(rng, c, 2, 1, 4);
    batch.push_back({seqs[0], {}, seqs[1]});
  }
  const auto retain = random_batch(rng, c, 3);
  for (float beta : {0.1f, 0.5f, 2.0f}) {
    Graph<float> g;
    EXPECT_NEAR(g.value(loss_npo(g, w, w, batch, beta))[0], 2.0 / beta * std::log(2.0), 1e-6 * (2.0 / beta));
    Graph<float> g2;
    EXPECT_NEAR(g2.value(loss_npo_kl(g2, w, w, batch, retain, beta, 1.0f))[0], 2.0 / beta * std::log(2.0),
                1e-6 * (2.0 / beta));
  }
}

TEST(Losses, GaIsNegatedLmAndUniformModelGivesMinusLnV) {
  ModelConfig c = tiny_config();
  Checkpoint w = tiny_weights<float>(c);
  std::mt19937_64 rng(3);
  const auto batch = random_batch(rng, c, 4);
  Graph<float> g;
  EXPECT_EQ(g.value(loss_ga(g, w, batch))[0], -g.value(loss_lm(g, w, batch))[0]);

  for (float& x : w.unembed.data()) x = 0.0f;
  Graph<float> g2;
  EXPECT_NEAR(g2.value(loss_ga(g2, w, batch))[0], -std::log(double(c.vocab_size)), 1e-6);
}

TEST(Losses, GradDiffReducesToGaWithoutKl) {
  ModelConfig c = tiny_config();
  const Checkpoint w = tiny_weights<float>(c);
  c.seed = 8;
  const Checkpoint ref = tiny_weights<float>(c);
  std::mt19937_64 rng(4);
  const auto forget = random_batch(rng, c, 3), retain = random_batch(rng, c, 3);
  Graph<float> g;
  const float ga = g.value(loss_ga(g, w, forget))[0];
  EXPECT_EQ(g.value(loss_grad_diff(g, w, ref, forget, retain, 0.0f))[0], ga);
  EXPECT_NEAR(g.value(loss_grad_diff(g, w, w, forget, retain, 1.0f))[0], ga, 1e-6);
  EXPECT_GT(g.value(loss_grad_diff(g, w, ref, forget, retain, 1.0f))[0], ga);
}

TEST(Losses, KlMatchesTwoTokenClosedForm) {
  // model after token 0: p = (1/4, 3/4); reference: (1/2, 1/2)
  const Weights<double> model = logit_table_model({{0.0, std::log(3.0)}, {0.0, 0.0}});
  const Weights<double> ref = logit_table_model({{0.0, 0.0}, {0.0, 0.0}});
  const double expected = 0.5 * std::log(0.5 / 0.25) + 0.5 * std::log(0.5 / 0.75);
  const double kl = scalar([&](Graph<double>& g) { return retain_kl(g, model, ref, {TokenSeq{0, 1}}); });
  EXPECT_NEAR(kl, expected, 1e-6);
  const double self = scalar([&](Graph<double>& g) { return retain_kl(g, ref, ref, {TokenSeq{0, 1}}); });
  EXPECT_NEAR(self, 0.0, 1e-12);
}

TEST(Losses, DpoMatchesScalarOracle) {
  const std::vector<std::vector<double>> policy{{0.2, 1.5, -0.7}, {0.0, 0.3, 0.9}, {1.1, -0.4, 0.0}};
  const std::vector<std::vector<double>> reference{{0.0, 0.5, 0.1}, {0.4, 0.4, -0.2}, {-0.3, 0.8, 0.6}};
  const auto model = logit_table_model(policy), ref = logit_table_model(reference);
  const std::vector<PreferenceExample> batch{{{0}, {1}, {2}}, {{2}, {0}, {1}}};
  for (double beta : {0.1, 1.0, 3.0}) {
    double expected = 0;
    for (const auto& ex : batch) {
      const std::size_t p = ex.prompt[0], win = ex.preferred[0], lose = ex.unfavored[0];
      const double margin = (log_softmax_at(policy[p], win) - log_softmax_at(reference[p], win)) -
                            (log_softmax_at(policy[p], lose) - log_softmax_at(reference[p], lose));
      expected += -log_sigmoid(beta * margin) / double(batch.size());
    }
    EXPECT_NEAR(scalar([&](Graph<double>& g) { return loss_dpo(g, model, ref, batch, beta); }), expected, 1e-5);
  }
}

TEST(Losses, NpoMatchesScalarOracle) {
  const std::vector<std::vector<double>> policy{{0.2, 1.5, -0.7}, {0.0, 0.3, 0.9}, {1.1, -0.4, 0.0}};
  const std::vector<std::vector<double>> reference{{0.0, 0.5, 0.1}, {0.4, 0.4, -0.2}, {-0.3, 0.8, 0.6}};
  const auto model = logit_table_model(policy), ref = logit_table_model(reference);
  const std::vector<PreferenceExample> batch{{{0}, {}, {1}}, {{1}, {}, {2}}, {{2}, {}, {0}}};
  for (double beta : {0.1, 1.0}) {
    double expected = 0;
    for (const auto& ex : batch) {
      const std::size_t p = ex.prompt[0], a = ex.unfavored[0];
      const double ratio = std::exp(log_softmax_at(policy[p], a) - log_softmax_at(reference[p], a));
      expected += 2.0 / beta * std::log(1.0 + std::pow(ratio, beta)) / double(batch.size());
    }
    EXPECT_NEAR(scalar([&](Graph<double>& g) { return loss_npo(g, model, ref, batch, beta); }), expected, 1e-5);
  }
}

TEST(Losses, SequenceLogProbsSumOverAnswerTokens) {
  const std::vector<std::vector<double>> table{{0.2, 1.5, -0.7}, {0.0, 0.3, 0.9}, {1.1, -0.4, 0.0}};
  const auto model = logit_table_model(table);
  // prompt [0], answer [1, 2]: log p(1 | 0) + log p(2 | 1)
  const double expected = log_softmax_at(table[0], 1) + log_softmax_at(table[1], 2);
  Graph<double> g;
  const auto& lp = g.value(sequence_log_probs(g, model, {TokenSeq{0}}, {TokenSeq{1, 2}}));
  EXPECT_NEAR(lp[0], expected, 1e-9);
}

TEST(Limits, DpoVanishesWhenPreferredIsFarLikelierAndNpoWhenUnfavoredIsUnlikely) {
  const std::vector<std::vector<double>> policy{{0.0, 8.0, -8.0}, {0, 0, 0}, {0, 0, 0}};
  const std::vector<std::vector<double>> reference{{0.0, 0.0, 0.0}, {0, 0, 0}, {0, 0, 0}};
  const auto model = logit_table_model(policy), ref = logit_table_model(reference);
  const std::vector<PreferenceExample> batch{{{0}, {1}, {2}}};
  EXPECT_LT(scalar([&](Graph<double>& g) { return loss_dpo(g, model, ref, batch, 5.0); }), 1e-12);
  EXPECT_LT(scalar([&](Graph<double>& g) { return loss_npo(g, model, ref, batch, 5.0); }), 1e-12);
}

TEST(Losses, RejectInvalidInputs) {
  ModelConfig c = tiny_config();
  const Checkpoint w = tiny_weights<float>(c);
  Graph<float> g;
  EXPECT_THROW(loss_lm(g, w, {}), Error);
  EXPECT_THROW(loss_dpo(g, w, w, {{{1}, {}, {2}}}, 0.1f), Error);
  EXPECT_THROW(loss_npo(g, w, w, {{{1}, {}, {2}}}, 0.0f), Error);
}

// ---- finite differences on random toy batches --------------------------------

class LossGradients : public ::testing::TestWithParam<int> {};

TEST_P(LossGradients, MatchFiniteDifferences) {
  ModelConfig c = tiny_config(MlpStyle::TwoMatrix, 21);
  Weights<double> model = tiny_weights<double>(c);
  c.seed = 22;
  Weights<double> ref = tiny_weights<double>(c, 0.9);
  ref.config = model.config;
  require_grad_all(model);
  std::mt19937_64 rng(100 + GetParam());
  const auto forget = random_batch(rng, c, 2), retain = random_batch(rng, c, 2);
  std::vector<PreferenceExample> prefs;
  for (int i = 0; i < 2; ++i) {
    auto s = random_batch(rng, c, 3, 1, 3);
    prefs.push_back({s[0], s[1], s[2]});
  }
  for (int which = 0; which < 5; ++which) {
    Graph<double> g;
    Var root;
    switch (which) {
      case 0: root = loss_ga(g, model, forget); break;
      case 1: root = loss_grad_diff(g, model, ref, forget, retain, 0.7); break;
      case 2: root = loss_dpo(g, model, ref, prefs, 0.5); break;
      case 3: root = loss_npo(g, model, ref, prefs, 0.5); break;
      default: root = loss_npo_kl(g, model, ref, prefs, retain, 0.5, 0.7); break;
    }
    for_each_param(model, [&](const std::string& name, Tensor<double>& t, ParamGroup) {
      const auto report = gradient_check(g, root, t, 1e-5, 8);
      EXPECT_LE(report.max_deviation, 1e-4) << "loss " << which << " param " << name;
    });
  }
}

INSTANTIATE_TEST_SUITE_P(Batches, LossGradients, ::testing::Range(0, 3));
