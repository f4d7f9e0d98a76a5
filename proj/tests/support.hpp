#pragma once

#include <random>
#include <vector>

#include "udissect/model.hpp"

namespace udissect::testing {

inline ModelConfig tiny_config(MlpStyle style = MlpStyle::TwoMatrix, std::uint64_t seed = 7) {
  ModelConfig c;
  c.num_layers = 3;
  c.hidden_dim = 8;
  c.mlp_dim = 12;
  c.num_heads = 2;
  c.vocab_size = 11;
  c.max_seq_len = 16;
  c.mlp_style = style;
  c.seed = seed;
  return c;
}

/// Initial weights with every gain perturbed away from one, so norm
/// gradients are exercised.
template <class T>
Weights<T> tiny_weights(const ModelConfig& c, double scale = 1.0) {
  Weights<T> w = init_weights<T>(c);
  std::mt19937_64 rng(c.seed + 101);
  std::uniform_real_distribution<double> u(-0.3, 0.3);
  for_each_param(w, [&](const std::string&, Tensor<T>& t, ParamGroup group) {
    for (T& v : t.data()) {
      if (group == ParamGroup::Norms) {
        v = T(1.0 + u(rng));
      } else {
        v = T(double(v) * 10.0 * scale);
      }
    }
  });
  return w;
}

inline std::vector<TokenSeq> random_batch(std::mt19937_64& rng, const ModelConfig& c, std::size_t count,
                                          std::size_t min_len = 2, std::size_t max_len = 6) {
  std::uniform_int_distribution<std::size_t> len(min_len, max_len);
  std::uniform_int_distribution<TokenId> tok(0, c.vocab_size - 1);
  std::vector<TokenSeq> out(count);
  for (auto& s : out) {
    s.resize(len(rng));
    for (auto& t : s) t = tok(rng);
  }
  return out;
}

template <class T>
void require_grad_all(Weights<T>& w, bool on = true) {
  for_each_param(w, [&](const std::string&, Tensor<T>& t, ParamGroup) { t.set_requires_grad(on); });
}

}  // namespace udissect::testing
