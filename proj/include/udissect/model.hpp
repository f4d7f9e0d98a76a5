#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <type_traits>
#include <vector>

#include "udissect/error.hpp"
#include "udissect/graph.hpp"
#include "udissect/tensor.hpp"

namespace udissect {

using TokenId = std::uint32_t;
using TokenSeq = std::vector<TokenId>;

enum class MlpStyle : std::uint32_t { TwoMatrix = 0, Gated = 1 };

inline std::string to_string(MlpStyle style) {
  return style == MlpStyle::Gated ? "gated-three-matrix" : "two-matrix";
}

struct ModelConfig {
  std::uint32_t num_layers = 8;
  std::uint32_t hidden_dim = 256;
  std::uint32_t mlp_dim = 1024;
  std::uint32_t num_heads = 8;
  std::uint32_t vocab_size = 2048;
  std::uint32_t max_seq_len = 256;
  MlpStyle mlp_style = MlpStyle::TwoMatrix;
  std::uint64_t seed = 0;
  // mlp_dim >= hidden_dim is asserted unless this is cleared.
  bool require_expansion = true;

  void validate() const {
    require(num_layers > 0 && hidden_dim > 0 && mlp_dim > 0 && num_heads > 0 && vocab_size > 0 &&
                max_seq_len > 0,
            ErrorKind::InvalidArgument, "model dimensions must be positive");
    require(hidden_dim % num_heads == 0, ErrorKind::InvalidArgument,
            "hidden_dim " + std::to_string(hidden_dim) + " not divisible by num_heads " +
                std::to_string(num_heads));
    require(!require_expansion || mlp_dim >= hidden_dim, ErrorKind::InvalidArgument,
            "mlp_dim must be at least hidden_dim");
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// Parameter groups addressable by a training freeze mask.
enum class ParamGroup { Embeddings, Norms, MlpKeys, MlpValues, Attention };

inline constexpr std::array<ParamGroup, 5> kAllParamGroups = {
    ParamGroup::Embeddings, ParamGroup::Norms, ParamGroup::MlpKeys, ParamGroup::MlpValues, ParamGroup::Attention};

inline std::string to_string(ParamGroup group) {
  switch (group) {
    case ParamGroup::Embeddings: return "embeddings";
    case ParamGroup::Norms: return "norms";
    case ParamGroup::MlpKeys: return "mlp_keys";
    case ParamGroup::MlpValues: return "mlp_values";
    case ParamGroup::Attention: return "attention";
  }
  return "?";
}

inline std::optional<ParamGroup> parse_param_group(const std::string& name) {
  for (ParamGroup g : kAllParamGroups) {
    if (to_string(g) == name) return g;
  }
  return std::nullopt;
}

template <class T>
struct LayerWeights {
  Tensor<T> attn_norm;  // d
  Tensor<T> wq, wk, wv, wo;  // d x d, applied as x * W
  Tensor<T> mlp_norm;   // d
  Tensor<T> mlp_key;    // n x d; coefficients come from x * W_K^T
  Tensor<T> mlp_gate;   // n x d, gated style only
  Tensor<T> mlp_value;  // n x d; row i is value vector v_i
};

/// Weights of the decoder-only transformer. `Checkpoint` is the float32
/// instantiation that is trained, serialised and patched.
template <class T>
struct Weights {
  ModelConfig config;
  Tensor<T> tok_emb;   // vocab x d
  Tensor<T> pos_emb;   // max_seq_len x d
  std::vector<LayerWeights<T>> layers;
  Tensor<T> final_norm;  // d
  Tensor<T> unembed;     // d x vocab

  template <class U>
  Weights<U> cast() const {
    Weights<U> out;
    out.config = config;
    out.tok_emb = tok_emb.template cast<U>();
    out.pos_emb = pos_emb.template cast<U>();
    out.final_norm = final_norm.template cast<U>();
    out.unembed = unembed.template cast<U>();
    for (const auto& l : layers) {
      LayerWeights<U> c;
      c.attn_norm = l.attn_norm.template cast<U>();
      c.wq = l.wq.template cast<U>();
      c.wk = l.wk.template cast<U>();
      c.wv = l.wv.template cast<U>();
      c.wo = l.wo.template cast<U>();
      c.mlp_norm = l.mlp_norm.template cast<U>();
      c.mlp_key = l.mlp_key.template cast<U>();
      if (!l.mlp_gate.empty()) c.mlp_gate = l.mlp_gate.template cast<U>();
      c.mlp_value = l.mlp_value.template cast<U>();
      out.layers.push_back(std::move(c));
    }
    return out;
  }
};

using Checkpoint = Weights<float>;

/// Visits every parameter tensor in the declared (serialisation) order.
/// Works for const and non-const weights.
template <class W, class Fn>
void for_each_param(W& w, Fn&& fn) {
  fn(std::string("tok_emb"), w.tok_emb, ParamGroup::Embeddings);
  fn(std::string("pos_emb"), w.pos_emb, ParamGroup::Embeddings);
  for (std::size_t i = 0; i < w.layers.size(); ++i) {
    auto& l = w.layers[i];
    const std::string p = "layers." + std::to_string(i) + ".";
    fn(p + "attn_norm", l.attn_norm, ParamGroup::Norms);
    fn(p + "attn.q", l.wq, ParamGroup::Attention);
    fn(p + "attn.k", l.wk, ParamGroup::Attention);
    fn(p + "attn.v", l.wv, ParamGroup::Attention);
    fn(p + "attn.o", l.wo, ParamGroup::Attention);
    fn(p + "mlp_norm", l.mlp_norm, ParamGroup::Norms);
    fn(p + "mlp.key", l.mlp_key, ParamGroup::MlpKeys);
    if (w.config.mlp_style == MlpStyle::Gated) fn(p + "mlp.gate", l.mlp_gate, ParamGroup::MlpKeys);
    fn(p + "mlp.value", l.mlp_value, ParamGroup::MlpValues);
  }
  fn(std::string("final_norm"), w.final_norm, ParamGroup::Norms);
  fn(std::string("unembed"), w.unembed, ParamGroup::Embeddings);
}

/// Expected shape of every parameter, in declared order.
inline std::vector<std::pair<std::string, Shape>> parameter_layout(const ModelConfig& c) {
  const std::size_t d = c.hidden_dim, n = c.mlp_dim;
  std::vector<std::pair<std::string, Shape>> out;
  out.emplace_back("tok_emb", Shape{c.vocab_size, d});
  out.emplace_back("pos_emb", Shape{c.max_seq_len, d});
  for (std::size_t i = 0; i < c.num_layers; ++i) {
    const std::string p = "layers." + std::to_string(i) + ".";
    out.emplace_back(p + "attn_norm", Shape{d});
    for (const char* name : {"attn.q", "attn.k", "attn.v", "attn.o"}) out.emplace_back(p + name, Shape{d, d});
    out.emplace_back(p + "mlp_norm", Shape{d});
    out.emplace_back(p + "mlp.key", Shape{n, d});
    if (c.mlp_style == MlpStyle::Gated) out.emplace_back(p + "mlp.gate", Shape{n, d});
    out.emplace_back(p + "mlp.value", Shape{n, d});
  }
  out.emplace_back("final_norm", Shape{d});
  out.emplace_back("unembed", Shape{d, c.vocab_size});
  return out;
}

inline std::size_t parameter_count(const ModelConfig& c) {
  std::size_t total = 0;
  for (const auto& [name, shape] : parameter_layout(c)) total += shape_size(shape);
  return total;
}

/// Random initialisation from config.seed: N(0, 0.02) for matrices, with the
/// two residual-writing projections scaled by 1/sqrt(2 * num_layers); unit gains.
template <class T = float>
Weights<T> init_weights(const ModelConfig& config) {
  config.validate();
  Weights<T> w;
  w.config = config;
  std::mt19937_64 rng(config.seed);
  const T base = T(0.02);
  const T residual = base / std::sqrt(T(2 * config.num_layers));
  auto normal = [&](Shape shape, T stddev) {
    Tensor<T> t(std::move(shape));
    std::normal_distribution<T> dist(T(0), stddev);
    for (T& v : t.data()) v = dist(rng);
    return t;
  };
  const std::size_t d = config.hidden_dim, n = config.mlp_dim;
  w.tok_emb = normal({config.vocab_size, d}, base);
  w.pos_emb = normal({config.max_seq_len, d}, base);
  for (std::size_t i = 0; i < config.num_layers; ++i) {
    LayerWeights<T> l;
    l.attn_norm = Tensor<T>({d}, T(1));
    l.wq = normal({d, d}, base);
    l.wk = normal({d, d}, base);
    l.wv = normal({d, d}, base);
    l.wo = normal({d, d}, residual);
    l.mlp_norm = Tensor<T>({d}, T(1));
    l.mlp_key = normal({n, d}, base);
    if (config.mlp_style == MlpStyle::Gated) l.mlp_gate = normal({n, d}, base);
    l.mlp_value = normal({n, d}, residual);
    w.layers.push_back(std::move(l));
  }
  w.final_norm = Tensor<T>({d}, T(1));
  w.unembed = normal({d, config.vocab_size}, base);
  return w;
}

// ---------------------------------------------------------------------------
// Hooks
// ---------------------------------------------------------------------------

/// Per-layer sites where activations can be recorded or overridden.
/// Coefficients is m (rows x n, post-nonlinearity and post-gate), MlpOut is M,
/// AttnOut is A after the output projection, HiddenIn is X entering the layer.
enum class Site : std::uint8_t { Coefficients = 0, MlpOut = 1, AttnOut = 2, HiddenIn = 3 };

template <class T>
struct LayerActivations {
  Tensor<T> coefficients;  // m
  Tensor<T> mlp_out;       // M
  Tensor<T> attn_out;      // A
  Tensor<T> hidden;        // X entering the layer

  const Tensor<T>& at(Site site) const {
    switch (site) {
      case Site::Coefficients: return coefficients;
      case Site::MlpOut: return mlp_out;
      case Site::AttnOut: return attn_out;
      case Site::HiddenIn: return hidden;
    }
    return hidden;
  }
};

/// Per-call override table. Overrides are referenced, not copied, during a
/// forward pass and must match the packed row layout of the input batch.
template <class T>
class HookSet {
 public:
  explicit HookSet(std::size_t num_layers = 0) : overrides_(num_layers) {}

  void set_override(std::size_t layer, Site site, Tensor<T> value) {
    require(layer < overrides_.size(), ErrorKind::LayerOutOfRange, "hook layer " + std::to_string(layer));
    overrides_[layer][static_cast<std::size_t>(site)] = std::move(value);
  }

  void clear(std::size_t layer, Site site) {
    if (layer < overrides_.size()) overrides_[layer][static_cast<std::size_t>(site)].reset();
  }

  const Tensor<T>* find(std::size_t layer, Site site) const {
    if (layer >= overrides_.size()) return nullptr;
    const auto& slot = overrides_[layer][static_cast<std::size_t>(site)];
    return slot ? &*slot : nullptr;
  }

  std::size_t num_layers() const { return overrides_.size(); }

 private:
  std::vector<std::array<std::optional<Tensor<T>>, 4>> overrides_;
};

// ---------------------------------------------------------------------------
// Forward pass
// ---------------------------------------------------------------------------

struct PackedBatch {
  std::vector<std::size_t> token_ids;  // concatenated
  std::vector<std::size_t> positions;
  std::vector<std::size_t> lengths;
  std::vector<std::size_t> offsets;  // first packed row of each sequence
};

inline PackedBatch pack_batch(const ModelConfig& config, const std::vector<TokenSeq>& sequences) {
  require(!sequences.empty(), ErrorKind::InvalidArgument, "empty batch");
  PackedBatch p;
  for (const auto& seq : sequences) {
    require(!seq.empty(), ErrorKind::InvalidArgument, "empty token sequence");
    require(seq.size() <= config.max_seq_len, ErrorKind::LengthExceeded,
            "sequence of " + std::to_string(seq.size()) + " tokens exceeds max_seq_len " +
                std::to_string(config.max_seq_len));
    p.offsets.push_back(p.token_ids.size());
    p.lengths.push_back(seq.size());
    for (std::size_t i = 0; i < seq.size(); ++i) {
      require(seq[i] < config.vocab_size, ErrorKind::TokenOutOfRange,
              "token " + std::to_string(seq[i]) + " outside vocabulary of " + std::to_string(config.vocab_size));
      p.token_ids.push_back(seq[i]);
      p.positions.push_back(i);
    }
  }
  return p;
}

struct LayerVars {
  Var hidden, attn_out, coefficients, mlp_out;
};

struct ForwardGraph {
  PackedBatch batch;
  std::vector<LayerVars> layers;
  Var final_hidden;
  Var logits;  // rows x vocab; rows are all packed rows or `logit_rows`
};

/// Builds the forward graph. `W` may be const (read-only leaves) or mutable
/// (leaves accumulate gradients for tensors that require grad). When
/// `logit_rows` is given, only those packed rows are unembedded.
template <class T, class W>
ForwardGraph build_forward(Graph<T>& g, W& w, const std::vector<TokenSeq>& sequences,
                           const HookSet<T>* hooks = nullptr,
                           const std::vector<std::size_t>* logit_rows = nullptr) {
  static_assert(std::is_same_v<std::remove_const_t<W>, Weights<T>>);
  const ModelConfig& c = w.config;
  ForwardGraph fg;
  fg.batch = pack_batch(c, sequences);
  const std::size_t rows = fg.batch.token_ids.size();

  auto overridden = [&](std::size_t layer, Site site, Var natural, const Shape& shape) {
    const Tensor<T>* o = hooks ? hooks->find(layer, site) : nullptr;
    if (!o) return natural;
    require(o->shape() == shape, ErrorKind::ShapeMismatch,
            "override at layer " + std::to_string(layer) + " has shape " + shape_string(o->shape()) +
                ", expected " + shape_string(shape));
    return g.leaf(*o);
  };

  const Shape hidden_shape{rows, c.hidden_dim};
  Var x = g.add(g.embedding(g.leaf(w.tok_emb), fg.batch.token_ids), g.embedding(g.leaf(w.pos_emb), fg.batch.positions));
  for (std::size_t li = 0; li < c.num_layers; ++li) {
    auto& lw = w.layers[li];
    LayerVars lv;
    x = overridden(li, Site::HiddenIn, x, hidden_shape);
    lv.hidden = x;

    Var h = g.rms_norm(x, g.leaf(lw.attn_norm));
    Var q = g.matmul(h, g.leaf(lw.wq));
    Var k = g.matmul(h, g.leaf(lw.wk));
    Var v = g.matmul(h, g.leaf(lw.wv));
    Var ctx = g.causal_attention(q, k, v, fg.batch.lengths, c.num_heads);
    Var attn = overridden(li, Site::AttnOut, g.matmul(ctx, g.leaf(lw.wo)), hidden_shape);
    lv.attn_out = attn;
    Var mid = g.add(x, attn);

    Var h2 = g.rms_norm(mid, g.leaf(lw.mlp_norm));
    Var coeff;
    if (c.mlp_style == MlpStyle::Gated) {
      Var gate = g.silu(g.matmul(h2, g.leaf(lw.mlp_gate), false, true));
      coeff = g.mul(gate, g.matmul(h2, g.leaf(lw.mlp_key), false, true));
    } else {
      coeff = g.silu(g.matmul(h2, g.leaf(lw.mlp_key), false, true));
    }
    coeff = overridden(li, Site::Coefficients, coeff, Shape{rows, c.mlp_dim});
    lv.coefficients = coeff;
    Var mlp = overridden(li, Site::MlpOut, g.matmul(coeff, g.leaf(lw.mlp_value)), hidden_shape);
    lv.mlp_out = mlp;
    x = g.add(mid, mlp);
    fg.layers.push_back(lv);
  }
  fg.final_hidden = x;
  Var hf = g.rms_norm(x, g.leaf(w.final_norm));
  if (logit_rows) hf = g.embedding(hf, *logit_rows);
  fg.logits = g.matmul(hf, g.leaf(w.unembed));
  return fg;
}

template <class T>
struct ForwardOutput {
  Tensor<T> logits;  // packed rows x vocab
  std::vector<LayerActivations<T>> layers;
  Tensor<T> final_hidden;
  PackedBatch batch;
};

/// Teacher-forced forward over a batch. Activations (values actually used,
/// i.e. after any override) are copied out when `record` is set.
template <class T>
ForwardOutput<T> forward_batch(const Weights<T>& w, const std::vector<TokenSeq>& sequences,
                               const HookSet<T>* hooks = nullptr, bool record = false) {
  Graph<T> g;
  ForwardGraph fg = build_forward(g, w, sequences, hooks);
  ForwardOutput<T> out;
  out.logits = g.value(fg.logits);
  out.batch = std::move(fg.batch);
  if (record) {
    for (const LayerVars& lv : fg.layers) {
      out.layers.push_back(LayerActivations<T>{g.value(lv.coefficients), g.value(lv.mlp_out),
                                               g.value(lv.attn_out), g.value(lv.hidden)});
    }
    out.final_hidden = g.value(fg.final_hidden);
  }
  return out;
}

template <class T>
ForwardOutput<T> forward(const Weights<T>& w, const TokenSeq& tokens, const HookSet<T>* hooks = nullptr,
                         bool record = true) {
  return forward_batch(w, std::vector<TokenSeq>{tokens}, hooks, record);
}

/// Index of the largest entry; ties go to the lowest index.
template <class T>
TokenId argmax(std::span<const T> row) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < row.size(); ++i) {
    if (row[i] > row[best]) best = i;
  }
  return static_cast<TokenId>(best);
}

/// Greedy continuation of several prompts at once. Returns only the generated
/// tokens. A sequence that emits `stop_token` stops; the stop token is not
/// included in its continuation.
template <class T>
std::vector<TokenSeq> generate_greedy_batch(const Weights<T>& w, const std::vector<TokenSeq>& prompts,
                                            std::size_t num_tokens,
                                            std::optional<TokenId> stop_token = std::nullopt) {
  require(num_tokens >= 1, ErrorKind::InvalidArgument, "num_tokens must be at least 1");
  for (const auto& p : prompts) {
    require(!p.empty(), ErrorKind::InvalidArgument, "empty prompt");
    require(p.size() + num_tokens <= w.config.max_seq_len, ErrorKind::LengthExceeded,
            "prompt of " + std::to_string(p.size()) + " plus " + std::to_string(num_tokens) +
                " generated tokens exceeds max_seq_len " + std::to_string(w.config.max_seq_len));
  }
  std::vector<TokenSeq> seqs = prompts;
  std::vector<TokenSeq> generated(prompts.size());
  std::vector<bool> done(prompts.size(), false);
  for (std::size_t step = 0; step < num_tokens; ++step) {
    std::vector<std::size_t> active;
    std::vector<TokenSeq> batch;
    for (std::size_t i = 0; i < seqs.size(); ++i) {
      if (!done[i]) {
        active.push_back(i);
        batch.push_back(seqs[i]);
      }
    }
    if (active.empty()) break;
    Graph<T> g;
    std::vector<std::size_t> last_rows;
    std::size_t offset = 0;
    for (const auto& s : batch) {
      offset += s.size();
      last_rows.push_back(offset - 1);
    }
    ForwardGraph fg = build_forward(g, w, batch, static_cast<const HookSet<T>*>(nullptr), &last_rows);
    const Tensor<T>& logits = g.value(fg.logits);
    for (std::size_t j = 0; j < active.size(); ++j) {
      const TokenId next = argmax<T>(logits.row(j));
      const std::size_t i = active[j];
      if (stop_token && next == *stop_token) {
        done[i] = true;
        continue;
      }
      seqs[i].push_back(next);
      generated[i].push_back(next);
    }
  }
  return generated;
}

template <class T>
TokenSeq generate_greedy(const Weights<T>& w, const TokenSeq& prompt, std::size_t num_tokens) {
  return generate_greedy_batch(w, std::vector<TokenSeq>{prompt}, num_tokens).front();
}

/// Copy of `target` whose value-vector matrix at `layer` is taken from `source`.
template <class T>
Weights<T> swap_value_vectors(const Weights<T>& target, const Weights<T>& source, std::size_t layer) {
  require(target.config == source.config, ErrorKind::ConfigMismatch, "checkpoints have different configs");
  require(layer < target.config.num_layers, ErrorKind::LayerOutOfRange,
          "layer " + std::to_string(layer) + " of " + std::to_string(target.config.num_layers));
  Weights<T> out = target;
  out.layers[layer].mlp_value = source.layers[layer].mlp_value;
  return out;
}

}  // namespace udissect
