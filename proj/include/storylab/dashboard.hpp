#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "storylab/model.hpp"
#include "storylab/sae.hpp"
#include "storylab/tokenizer.hpp"
#include "storylab/train.hpp"
#include "storylab/tsea.hpp"

namespace storylab {

struct DashboardOptions {
  std::size_t top_k = 10;        // top-activating contexts
  std::size_t per_stratum = 5;   // examples per lower activation interval
  std::size_t logit_k = 10;      // tokens in each logit panel
  std::size_t histogram_bins = 24;
  bool ablation = true;
};

struct ExampleToken {
  TokenId id = 0;
  std::string text;  // printable form of the token bytes
  double activation = 0;
  double loss_delta = 0;
};

struct DashboardExample {
  std::string stratum;  // "top", "90-99%", "50-90%", "bottom"
  std::uint64_t context_id = 0;
  std::uint32_t position = 0;   // sampled position that ranked this context
  double scan_activation = 0;   // value found in the activation dataset
  double max_activation = 0;    // maximum over the re-run context
  std::vector<ExampleToken> tokens;
};

struct LogitToken {
  TokenId id = 0;
  std::string text;
  double weight = 0;
};

struct FeatureDashboard {
  std::size_t feature = 0;
  std::string hook;
  bool dead = false;
  std::size_t rows_scanned = 0;
  std::size_t nonzero = 0;
  double max_activation = 0;
  std::vector<double> bin_edges;
  std::vector<std::size_t> bin_counts;
  std::vector<LogitToken> top_logits;
  std::vector<LogitToken> bottom_logits;
  std::vector<DashboardExample> examples;
  std::string loss_note;
};

/// Printable token text: valid UTF-8 passes through, other bytes become
/// "\xNN"; specials become <bos>/<eos>/<pad>.
std::string display_token(const Tokenizer& tokenizer, TokenId id);

/// Features of one SAE unit for every dataset row.
template <class S>
std::vector<double> feature_activations(const SAEParams<S>& sae, const ActivationDataset& data, std::size_t feature,
                                        std::size_t batch_rows = 1024) {
  if (feature >= sae.d_hidden()) throw IndexError("feature " + std::to_string(feature) + " out of range");
  NoGradGuard no_grad;
  std::vector<double> out(data.n_rows());
  std::vector<std::size_t> idx;
  const std::size_t h = sae.d_hidden();
  for (std::size_t start = 0; start < data.n_rows(); start += batch_rows) {
    const std::size_t n = std::min(batch_rows, data.n_rows() - start);
    idx.resize(n);
    std::iota(idx.begin(), idx.end(), start);
    const auto enc = sae_forward(sae, gather_rows<S>(data, idx));
    const auto f = enc.features.data();
    for (std::size_t i = 0; i < n; ++i) out[start + i] = static_cast<double>(f[i * h + feature]);
  }
  return out;
}

struct ScanHit {
  std::size_t row = 0;
  std::uint64_t context_id = 0;
  std::uint32_t position = 0;
  double activation = 0;
  std::string stratum;
};

/// The top_k highest-activation distinct contexts (activation descending,
/// row index ascending on ties) followed by evenly spaced picks from the
/// 90-99%, 50-90% and below-50% quantile bands of the nonzero activations.
/// Returns nothing when the feature never fires.
std::vector<ScanHit> select_examples(const std::vector<double>& activations, const ActivationDataset& data,
                                     std::size_t top_k, std::size_t per_stratum);

/// Model inputs for a packed row: at most context_length ids.
inline std::span<const TokenId> model_inputs(const ModelConfig& c, std::span<const TokenId> tokens) {
  return tokens.first(std::min(tokens.size(), c.context_length));
}

/// Per-position loss change from removing the feature's contribution at
/// that position: delta_t = loss_t(x_t - f_t * W_dec[feature]) - loss_t(x),
/// where loss_t predicts tokens[t + 1]. Positions without a next token or
/// with f_t = 0 get exactly 0. Positive delta means the feature lowered the
/// loss.
template <class T, class S>
std::vector<double> ablation_loss_delta(const TransformerWeights<T>& model, const SAEParams<S>& sae, HookSpec hook,
                                        std::size_t feature, std::span<const TokenId> tokens) {
  const ModelConfig& c = model.config;
  if (feature >= sae.d_hidden()) throw IndexError("feature " + std::to_string(feature) + " out of range");
  if (sae.d_act() != hook_width(c, hook.point)) throw ContractError("ablation: SAE width does not match the hook");
  const auto inputs = model_inputs(c, tokens);
  const std::size_t seq = inputs.size(), width = sae.d_act(), v = c.vocab_size;
  std::vector<double> delta(seq, 0.0);
  if (seq == 0) return delta;
  NoGradGuard no_grad;

  const auto base = forward_with_capture<T>(model, TokenBatch{inputs, 1, seq}, hook);
  std::vector<S> acts(base.activations.data().begin(), base.activations.data().end());
  const auto sae_out = sae_forward(sae, Tensor<S>::from({seq, width}, acts));
  const auto f = sae_out.features.data();
  const auto dir = sae.feature_direction(feature);
  const auto logits = base.logits.data();

  auto loss_at = [&](std::span<const T> lg, std::size_t row, TokenId target) {
    const T* l = lg.data() + row * v;
    const double mx = static_cast<double>(*std::max_element(l, l + v));
    double z = 0;
    for (std::size_t j = 0; j < v; ++j) z += std::exp(static_cast<double>(l[j]) - mx);
    return std::log(z) - (static_cast<double>(l[target]) - mx);
  };

  std::vector<std::size_t> active;
  for (std::size_t t = 0; t < seq; ++t)
    if (t + 1 < tokens.size() && f[t * sae.d_hidden() + feature] > S(0)) active.push_back(t);
  if (active.empty()) return delta;

  // batch == 1 ablates every listed position; otherwise copy b ablates positions[b].
  auto run_ablated = [&](const std::vector<std::size_t>& positions, std::size_t batch) {
    std::vector<TokenId> ids;
    for (std::size_t b = 0; b < batch; ++b) ids.insert(ids.end(), inputs.begin(), inputs.end());
    std::vector<HookBinding<T>> hooks{{hook, [&](const Tensor<T>& x) {
      std::vector<T> vals = x.values();
      for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t t : (batch == 1 ? positions : std::vector<std::size_t>{positions[b]})) {
          const double a = static_cast<double>(f[t * sae.d_hidden() + feature]);
          T* row = vals.data() + (b * seq + t) * width;
          for (std::size_t j = 0; j < width; ++j) row[j] = static_cast<T>(static_cast<double>(row[j]) - a * static_cast<double>(dir[j]));
        }
      }
      return Tensor<T>::from(x.shape(), std::move(vals));
    }}};
    return forward<T>(model, TokenBatch{ids, batch, seq}, hooks);
  };

  if (hook.layer + 1 == c.n_layers) {
    // At the last layer a position's hook value reaches only its own logits,
    // so all active positions can be ablated in one pass.
    const auto ablated = run_ablated(active, 1);
    for (std::size_t t : active) {
      delta[t] = loss_at(ablated.data(), t, tokens[t + 1]) - loss_at(logits, t, tokens[t + 1]);
    }
  } else {
    const auto ablated = run_ablated(active, active.size());
    for (std::size_t b = 0; b < active.size(); ++b) {
      const std::size_t t = active[b];
      delta[t] = loss_at(ablated.data(), b * seq + t, tokens[t + 1]) - loss_at(logits, t, tokens[t + 1]);
    }
  }
  return delta;
}

/// Builds the dashboard data for one feature. `data` supplies the
/// contexts referenced by the activation dataset's provenance.
template <class T, class S>
FeatureDashboard build_dashboard(const TransformerWeights<T>& model, const SAEParams<S>& sae,
                                 const LogitWeightMatrix& logit_matrix, const ActivationDataset& acts,
                                 const PackedDataset& data, const Tokenizer& tokenizer, std::size_t feature,
                                 const DashboardOptions& options = {}) {
  FeatureDashboard d;
  d.feature = feature;
  d.hook = acts.hook.to_string();
  d.rows_scanned = acts.n_rows();
  d.loss_note = "loss delta = loss with the feature's decoder contribution removed at that position minus the "
                "original loss; blue underline: delta > 0 (feature lowered the loss), red: delta < 0";
  const auto values = feature_activations(sae, acts, feature);
  std::vector<double> nonzero;
  for (double a : values)
    if (a > 0) nonzero.push_back(a);
  d.nonzero = nonzero.size();
  d.dead = nonzero.empty();
  d.max_activation = d.dead ? 0.0 : *std::max_element(nonzero.begin(), nonzero.end());

  const std::size_t bins = std::max<std::size_t>(1, options.histogram_bins);
  if (!d.dead) {
    for (std::size_t i = 0; i <= bins; ++i) d.bin_edges.push_back(d.max_activation * static_cast<double>(i) / bins);
    d.bin_counts.assign(bins, 0);
    for (double a : nonzero) {
      auto b = static_cast<std::size_t>(a / d.max_activation * static_cast<double>(bins));
      d.bin_counts[std::min(b, bins - 1)] += 1;
    }
  }

  if (feature >= logit_matrix.n_features) throw IndexError("feature outside the logit weight matrix");
  const auto row = logit_matrix.row(feature);
  const auto ranked = rank_tokens(row);
  const std::size_t k = std::min(options.logit_k, ranked.size());
  for (std::size_t i = 0; i < k; ++i) {
    const auto t = static_cast<TokenId>(ranked[i]);
    d.top_logits.push_back({t, display_token(tokenizer, t), row[ranked[i]]});
  }
  std::vector<std::size_t> ascending(ranked.begin(), ranked.end());
  std::stable_sort(ascending.begin(), ascending.end(), [&](std::size_t a, std::size_t b) {
    return row[a] < row[b] || (row[a] == row[b] && a < b);
  });
  for (std::size_t i = 0; i < k; ++i) {
    const auto t = static_cast<TokenId>(ascending[i]);
    d.bottom_logits.push_back({t, display_token(tokenizer, t), row[ascending[i]]});
  }

  if (d.dead) return d;
  NoGradGuard no_grad;
  for (const auto& hit : select_examples(values, acts, options.top_k, options.per_stratum)) {
    DashboardExample ex;
    ex.stratum = hit.stratum;
    ex.context_id = hit.context_id;
    ex.position = hit.position;
    ex.scan_activation = hit.activation;
    const auto tokens = data.row(static_cast<std::size_t>(hit.context_id));
    const auto inputs = model_inputs(model.config, tokens);
    const auto cap = forward_with_capture<T>(model, TokenBatch{inputs, 1, inputs.size()}, acts.hook);
    std::vector<S> a(cap.activations.data().begin(), cap.activations.data().end());
    const auto sae_out = sae_forward(sae, Tensor<S>::from({inputs.size(), sae.d_act()}, a));
    const auto f = sae_out.features.data();
    std::vector<double> deltas(inputs.size(), 0.0);
    if (options.ablation) deltas = ablation_loss_delta(model, sae, acts.hook, feature, tokens);
    for (std::size_t t = 0; t < inputs.size(); ++t) {
      const double act = static_cast<double>(f[t * sae.d_hidden() + feature]);
      ex.max_activation = std::max(ex.max_activation, act);
      ex.tokens.push_back({inputs[t], display_token(tokenizer, inputs[t]), act, deltas[t]});
    }
    d.examples.push_back(std::move(ex));
  }
  std::stable_sort(d.examples.begin(), d.examples.end(),
                   [](const DashboardExample& a, const DashboardExample& b) { return a.max_activation > b.max_activation; });
  return d;
}

/// Machine-readable sidecar holding every number shown in the document.
std::string dashboard_to_json(const FeatureDashboard& d);
FeatureDashboard dashboard_from_json(std::string_view json);

/// Self-contained HTML page for one feature.
std::string render_dashboard(const FeatureDashboard& d);

struct DashboardIndexEntry {
  std::size_t feature = 0;
  double max_activation = 0;
  bool dead = false;
  double es = 0;  // optional enrichment score shown alongside
};

/// Index page linking feature-<id>.html files, sorted by `sort_key`
/// ("max_activation", "es" or "dead"), descending, feature id ascending on
/// ties.
std::string render_index(std::vector<DashboardIndexEntry> entries, const std::string& sort_key);

/// Writes feature-<id>.html and feature-<id>.json into `dir`.
void write_dashboard(const std::filesystem::path& dir, const FeatureDashboard& d);

}  // namespace storylab
