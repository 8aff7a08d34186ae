#pragma once

// Llama-style decoder: token embedding, pre-norm blocks of rotary causal
// attention (grouped key/value heads) and a gated-SiLU MLP, final RMSNorm,
// and an unembedding that is either its own matrix or the transposed
// embedding.

#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "storylab/adamw.hpp"
#include "storylab/config.hpp"
#include "storylab/ops.hpp"
#include "storylab/tensor.hpp"
#include "storylab/tokenizer.hpp"

namespace storylab {

struct ModelConfig {
  std::size_t n_layers = 2;
  std::size_t n_heads = 16;
  std::size_t n_kv_heads = 16;
  std::size_t d_model = 128;
  std::size_t d_mlp = 352;
  std::size_t vocab_size = 512;
  std::size_t context_length = 512;
  double rope_theta = 10000.0;
  double norm_eps = 1e-5;
  bool tie_embeddings = false;

  std::size_t head_dim() const { return d_model / n_heads; }
  /// Throws ConfigError describing the first violated constraint.
  void validate() const;

  KeyValueConfig to_kv() const;
  static ModelConfig from_kv(const KeyValueConfig& kv);
  std::string to_text() const { return to_kv().to_text(); }
  static ModelConfig from_text(std::string_view text) {
    return from_kv(KeyValueConfig::parse(text));
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// round(8/3 * d_model) to the nearest multiple of 32 (minimum 32).
std::size_t default_d_mlp(std::size_t d_model);

/// The seven named model shapes (layers, heads, hidden size); everything
/// else takes the ModelConfig defaults with d_mlp from default_d_mlp.
ModelConfig named_config(std::string_view name, std::size_t vocab_size);
const std::vector<std::string>& named_config_names();

/// Closed-form parameter count.
std::size_t count_params(const ModelConfig& config);

enum class HookPoint { kMlpHiddenPostAct, kMlpOutput };

std::string to_string(HookPoint point);
/// Accepts "mlp_hidden_post_act" and "mlp_output"; anything else is a
/// ContractError.
HookPoint parse_hook_point(std::string_view text);

struct HookSpec {
  std::size_t layer = 0;
  HookPoint point = HookPoint::kMlpOutput;

  std::string to_string() const;
  static HookSpec parse(std::string_view text);
  friend bool operator==(const HookSpec&, const HookSpec&) = default;
};

/// Width of the activation at a hook point.
std::size_t hook_width(const ModelConfig& config, HookPoint point);

/// Row-major token ids, `batch` sequences of length `seq`.
struct TokenBatch {
  std::span<const TokenId> ids;
  std::size_t batch = 1;
  std::size_t seq = 1;
};

template <class T>
struct LayerWeights {
  Tensor<T> attn_norm;  // [d]
  Tensor<T> wq;         // [d, heads*hd]
  Tensor<T> wk;         // [d, kv_heads*hd]
  Tensor<T> wv;         // [d, kv_heads*hd]
  Tensor<T> wo;         // [heads*hd, d]
  Tensor<T> mlp_norm;   // [d]
  Tensor<T> w_gate;     // [d, d_mlp]
  Tensor<T> w_up;       // [d, d_mlp]
  Tensor<T> w_down;     // [d_mlp, d]
};

template <class T>
struct TransformerWeights {
  ModelConfig config;
  Tensor<T> token_embedding;  // [vocab, d]
  std::vector<LayerWeights<T>> layers;
  Tensor<T> final_norm;  // [d]
  Tensor<T> unembed;     // [d, vocab]; undefined when tied

  /// Every trainable tensor in a fixed order with stable names.
  std::vector<NamedParam<T>> named_parameters() const {
    std::vector<NamedParam<T>> out{{"tok_embedding", token_embedding}};
    for (std::size_t i = 0; i < layers.size(); ++i) {
      const auto& l = layers[i];
      const std::string p = "layers." + std::to_string(i) + ".";
      out.push_back({p + "attn_norm", l.attn_norm});
      out.push_back({p + "wq", l.wq});
      out.push_back({p + "wk", l.wk});
      out.push_back({p + "wv", l.wv});
      out.push_back({p + "wo", l.wo});
      out.push_back({p + "mlp_norm", l.mlp_norm});
      out.push_back({p + "w_gate", l.w_gate});
      out.push_back({p + "w_up", l.w_up});
      out.push_back({p + "w_down", l.w_down});
    }
    out.push_back({"final_norm", final_norm});
    if (!config.tie_embeddings) out.push_back({"unembed", unembed});
    return out;
  }

  /// Sum of allocated element counts.
  std::size_t enumerate_parameters() const {
    std::size_t n = 0;
    for (const auto& p : named_parameters()) n += p.tensor.numel();
    return n;
  }

  /// W_U as a dense [d_model, vocab] row-major matrix. Tied models have no
  /// separate copy; this is then the transposed embedding.
  std::vector<T> unembedding_matrix() const {
    const std::size_t d = config.d_model, v = config.vocab_size;
    if (!config.tie_embeddings) return unembed.values();
    std::vector<T> out(d * v);
    const auto e = token_embedding.data();
    for (std::size_t t = 0; t < v; ++t)
      for (std::size_t j = 0; j < d; ++j) out[j * v + t] = e[t * d + j];
    return out;
  }

  void set_requires_grad(bool on) {
    for (auto& p : named_parameters()) p.tensor.set_requires_grad(on);
  }
};

/// Zero-filled weights with unit norm gains.
template <class T>
TransformerWeights<T> allocate_weights(const ModelConfig& config) {
  config.validate();
  const std::size_t d = config.d_model, hd = config.head_dim();
  const std::size_t qw = config.n_heads * hd, kw = config.n_kv_heads * hd;
  auto ones = [](std::size_t n) { return Tensor<T>::from({n}, std::vector<T>(n, T(1)), true); };
  TransformerWeights<T> w;
  w.config = config;
  w.token_embedding = Tensor<T>::zeros({config.vocab_size, d}, true);
  for (std::size_t i = 0; i < config.n_layers; ++i) {
    LayerWeights<T> l;
    l.attn_norm = ones(d);
    l.wq = Tensor<T>::zeros({d, qw}, true);
    l.wk = Tensor<T>::zeros({d, kw}, true);
    l.wv = Tensor<T>::zeros({d, kw}, true);
    l.wo = Tensor<T>::zeros({qw, d}, true);
    l.mlp_norm = ones(d);
    l.w_gate = Tensor<T>::zeros({d, config.d_mlp}, true);
    l.w_up = Tensor<T>::zeros({d, config.d_mlp}, true);
    l.w_down = Tensor<T>::zeros({config.d_mlp, d}, true);
    w.layers.push_back(std::move(l));
  }
  w.final_norm = ones(d);
  if (!config.tie_embeddings) w.unembed = Tensor<T>::zeros({d, config.vocab_size}, true);
  return w;
}

/// Normal(0, 0.02) for all matrices except the residual-stream writers (wo,
/// w_down) which use 0.02 / sqrt(2 * n_layers); gains start at one. Samples
/// are drawn in double from a seeded mt19937_64 in parameter order, so float
/// and double models from one seed hold the same values up to rounding.
template <class T>
TransformerWeights<T> init_weights(const ModelConfig& config, std::uint64_t seed) {
  auto w = allocate_weights<T>(config);
  std::mt19937_64 rng(seed);
  const double base = 0.02;
  const double residual = base / std::sqrt(2.0 * static_cast<double>(std::max<std::size_t>(1, config.n_layers)));
  auto fill = [&rng](Tensor<T>& t, double stddev) {
    std::normal_distribution<double> dist(0.0, stddev);
    for (T& x : t.mutable_data()) x = static_cast<T>(dist(rng));
  };
  fill(w.token_embedding, base);
  for (auto& l : w.layers) {
    fill(l.wq, base);
    fill(l.wk, base);
    fill(l.wv, base);
    fill(l.wo, residual);
    fill(l.w_gate, base);
    fill(l.w_up, base);
    fill(l.w_down, residual);
  }
  if (!config.tie_embeddings) fill(w.unembed, base);
  return w;
}

/// Element-wise precision conversion.
template <class To, class From>
TransformerWeights<To> cast_weights(const TransformerWeights<From>& src) {
  auto dst = allocate_weights<To>(src.config);
  auto from = src.named_parameters();
  auto to = dst.named_parameters();
  for (std::size_t i = 0; i < from.size(); ++i) {
    auto out = to[i].tensor.mutable_data();
    auto in = from[i].tensor.data();
    for (std::size_t j = 0; j < in.size(); ++j) out[j] = static_cast<To>(in[j]);
  }
  return dst;
}

/// Observes, and optionally replaces, the activation at a hook point. The
/// argument is [batch*seq, width]; the return value is used downstream.
template <class T>
using ActivationHook = std::function<Tensor<T>(const Tensor<T>&)>;

template <class T>
struct HookBinding {
  HookSpec spec;
  ActivationHook<T> fn;
};

/// Next-token logits [batch, seq, vocab] under a causal mask.
template <class T>
Tensor<T> forward(const TransformerWeights<T>& w, const TokenBatch& tokens,
                  std::span<const HookBinding<T>> hooks = {}) {
  const ModelConfig& c = w.config;
  if (tokens.seq == 0 || tokens.batch == 0 || tokens.ids.size() != tokens.batch * tokens.seq) {
    throw ContractError("forward: token batch shape does not match id count");
  }
  if (tokens.seq > c.context_length) {
    throw ContractError("forward: sequence of " + std::to_string(tokens.seq) +
                        " tokens exceeds context length " + std::to_string(c.context_length));
  }
  for (const auto& h : hooks) {
    if (h.spec.layer >= c.n_layers) {
      throw ContractError("forward: hook layer " + std::to_string(h.spec.layer) +
                          " out of range for " + std::to_string(c.n_layers) + " layers");
    }
  }
  auto apply_hooks = [&hooks](std::size_t layer, HookPoint point, Tensor<T> act) {
    for (const auto& h : hooks)
      if (h.spec.layer == layer && h.spec.point == point) act = h.fn(act);
    return act;
  };

  const T eps = static_cast<T>(c.norm_eps);
  const std::size_t hd = c.head_dim();
  const HeadLayout q_layout{tokens.batch, tokens.seq, c.n_heads, hd};
  const HeadLayout k_layout{tokens.batch, tokens.seq, c.n_kv_heads, hd};

  Tensor<T> x = embedding(w.token_embedding, tokens.ids);
  for (std::size_t i = 0; i < w.layers.size(); ++i) {
    const auto& l = w.layers[i];
    const Tensor<T> h = rms_norm(x, l.attn_norm, eps);
    const Tensor<T> q = rope(matmul(h, l.wq), q_layout, c.rope_theta);
    const Tensor<T> k = rope(matmul(h, l.wk), k_layout, c.rope_theta);
    const Tensor<T> v = matmul(h, l.wv);
    x = add(x, matmul(causal_attention(q, k, v, q_layout, c.n_kv_heads), l.wo));
    const Tensor<T> h2 = rms_norm(x, l.mlp_norm, eps);
    Tensor<T> act = mul(silu(matmul(h2, l.w_gate)), matmul(h2, l.w_up));
    act = apply_hooks(i, HookPoint::kMlpHiddenPostAct, std::move(act));
    Tensor<T> out = matmul(act, l.w_down);
    out = apply_hooks(i, HookPoint::kMlpOutput, std::move(out));
    x = add(x, out);
  }
  x = rms_norm(x, w.final_norm, eps);
  Tensor<T> logits = c.tie_embeddings ? matmul_nt(x, w.token_embedding) : matmul(x, w.unembed);
  return reshape(logits, {tokens.batch, tokens.seq, c.vocab_size});
}

template <class T>
struct CaptureResult {
  Tensor<T> logits;
  Tensor<T> activations;  // [batch*seq, hook width]
};

/// forward() plus a copy of the activation at one hook point.
template <class T>
CaptureResult<T> forward_with_capture(const TransformerWeights<T>& w, const TokenBatch& tokens,
                                      HookSpec spec) {
  if (spec.layer >= w.config.n_layers) {
    throw ContractError("capture: layer " + std::to_string(spec.layer) + " out of range");
  }
  CaptureResult<T> result;
  std::vector<HookBinding<T>> hooks{{spec, [&result](const Tensor<T>& act) {
                                       result.activations = act.detach();
                                       return act;
                                     }}};
  result.logits = forward<T>(w, tokens, hooks);
  return result;
}

/// Mean next-token cross-entropy of each row predicting its own successor:
/// inputs are ids[:, :-1], targets ids[:, 1:].
template <class T>
Tensor<T> language_model_loss(const TransformerWeights<T>& w, std::span<const TokenId> rows,
                              std::size_t n_rows, std::size_t row_length) {
  if (row_length < 2 || rows.size() != n_rows * row_length) {
    throw ContractError("language_model_loss: rows must hold at least two tokens");
  }
  const std::size_t seq = row_length - 1;
  std::vector<TokenId> inputs, targets;
  inputs.reserve(n_rows * seq);
  targets.reserve(n_rows * seq);
  for (std::size_t r = 0; r < n_rows; ++r) {
    const auto row = rows.subspan(r * row_length, row_length);
    inputs.insert(inputs.end(), row.begin(), row.end() - 1);
    targets.insert(targets.end(), row.begin() + 1, row.end());
  }
  const Tensor<T> logits = forward<T>(w, TokenBatch{inputs, n_rows, seq});
  return cross_entropy(reshape(logits, {n_rows * seq, w.config.vocab_size}), targets);
}

}  // namespace storylab
