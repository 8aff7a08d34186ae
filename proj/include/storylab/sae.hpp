#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "storylab/adamw.hpp"
#include "storylab/config.hpp"
#include "storylab/container.hpp"
#include "storylab/model.hpp"
#include "storylab/ops.hpp"
#include "storylab/train.hpp"

namespace storylab {

/// Captured activation rows with the (context, position, token) each came
/// from. Rows are stored as float regardless of model precision.
struct ActivationDataset {
  std::size_t d_act = 0;
  HookSpec hook;
  std::uint64_t shuffle_seed = 0;
  std::size_t tokens_per_context = 128;
  std::vector<float> vectors;  // n_rows() * d_act
  std::vector<std::uint64_t> context_ids;
  std::vector<std::uint32_t> positions;
  std::vector<TokenId> token_ids;

  std::size_t n_rows() const { return context_ids.size(); }
  std::span<const float> row(std::size_t i) const {
    return std::span<const float>(vectors).subspan(i * d_act, d_act);
  }
  void validate() const;

  Container to_container() const;
  static ActivationDataset from_container(const Container& c);
  /// Writes rows in order to `dir`/shard-00000.act etc.; returns the paths.
  std::vector<std::filesystem::path> save_shards(const std::filesystem::path& dir, std::size_t rows_per_shard) const;
  static ActivationDataset load_shards(const std::filesystem::path& dir);
};

/// Chi-square statistic (df = 1) comparing the number of adjacent row pairs
/// drawn from the same context with its expectation under a uniform random
/// permutation. Values below 6.635 pass at p > 0.01.
double adjacency_chi_square(const ActivationDataset& data);

/// Sorted sample of min(k, seq) distinct positions in [0, seq).
std::vector<std::uint32_t> sample_positions(std::size_t seq, std::size_t k, std::mt19937_64& rng);

struct ActivationOptions {
  std::size_t tokens_per_context = 128;
  std::uint64_t seed = 0;
  std::size_t batch_contexts = 8;
  std::size_t max_contexts = 0;  // 0 = all rows of the packed dataset
  std::size_t expected_d_act = 0;  // 0 = no check
};

/// Runs the model over each context of `data` (truncated to the model
/// context), keeps the hook activation at sampled positions and shuffles all
/// rows globally.
template <class T>
ActivationDataset build_activation_dataset(const TransformerWeights<T>& weights, const PackedDataset& data,
                                           HookSpec hook, const ActivationOptions& options = {}) {
  const ModelConfig& c = weights.config;
  if (hook.layer >= c.n_layers) throw ContractError("activation hook layer out of range");
  const std::size_t width = hook_width(c, hook.point);
  if (options.expected_d_act != 0 && options.expected_d_act != width) {
    throw ContractError("hook " + hook.to_string() + " has width " + std::to_string(width) + ", declared d_act is " +
                        std::to_string(options.expected_d_act));
  }
  if (options.tokens_per_context == 0) throw ConfigError("tokens_per_context must be positive");
  ActivationDataset out;
  out.d_act = width;
  out.hook = hook;
  out.shuffle_seed = options.seed;
  out.tokens_per_context = options.tokens_per_context;

  const std::size_t seq = std::min(data.context_length, c.context_length);
  const std::size_t n_ctx = options.max_contexts ? std::min(options.max_contexts, data.n_rows()) : data.n_rows();
  std::mt19937_64 rng(options.seed);
  NoGradGuard no_grad;
  std::vector<TokenId> ids;
  for (std::size_t start = 0; start < n_ctx; start += options.batch_contexts) {
    const std::size_t nb = std::min(options.batch_contexts, n_ctx - start);
    ids.clear();
    for (std::size_t b = 0; b < nb; ++b) {
      const auto row = data.row(start + b);
      ids.insert(ids.end(), row.begin(), row.begin() + static_cast<std::ptrdiff_t>(seq));
    }
    const auto cap = forward_with_capture<T>(weights, TokenBatch{ids, nb, seq}, hook);
    const auto act = cap.activations.data();
    for (std::size_t b = 0; b < nb; ++b) {
      for (std::uint32_t pos : sample_positions(seq, options.tokens_per_context, rng)) {
        const std::size_t r = b * seq + pos;
        for (std::size_t j = 0; j < width; ++j) out.vectors.push_back(static_cast<float>(act[r * width + j]));
        out.context_ids.push_back(start + b);
        out.positions.push_back(pos);
        out.token_ids.push_back(ids[r]);
      }
    }
  }

  std::vector<std::size_t> order(out.n_rows());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::shuffle(order.begin(), order.end(), rng);
  ActivationDataset shuffled = out;
  for (std::size_t i = 0; i < order.size(); ++i) {
    const std::size_t src = order[i];
    std::copy_n(out.vectors.begin() + static_cast<std::ptrdiff_t>(src * width), width,
                shuffled.vectors.begin() + static_cast<std::ptrdiff_t>(i * width));
    shuffled.context_ids[i] = out.context_ids[src];
    shuffled.positions[i] = out.positions[src];
    shuffled.token_ids[i] = out.token_ids[src];
  }
  return shuffled;
}

struct SAEConfig {
  std::size_t d_act = 128;
  std::size_t expansion_factor = 16;
  double l1_coefficient = 1e-3;
  double lr = 1e-3;
  std::size_t batch_rows = 256;
  std::size_t steps = 1000;
  std::uint64_t seed = 0;
  std::size_t log_every = 50;

  std::size_t d_hidden() const { return expansion_factor * d_act; }
  void validate() const;
  KeyValueConfig to_kv() const;
  static SAEConfig from_kv(const KeyValueConfig& kv);
};

template <class T>
struct SAEParams {
  Tensor<T> w_enc;  // [d_act, d_hidden]
  Tensor<T> b_enc;  // [d_hidden]
  Tensor<T> w_dec;  // [d_hidden, d_act]; rows are feature directions
  Tensor<T> b_dec;  // [d_act]

  std::size_t d_act() const { return b_dec.numel(); }
  std::size_t d_hidden() const { return b_enc.numel(); }
  std::vector<NamedParam<T>> named_parameters() const {
    return {{"w_enc", w_enc}, {"b_enc", b_enc}, {"w_dec", w_dec}, {"b_dec", b_dec}};
  }
  std::span<const T> feature_direction(std::size_t i) const { return w_dec.data().subspan(i * d_act(), d_act()); }

  SAEParams clone() const {
    return {Tensor<T>::from(w_enc.shape(), w_enc.values(), true), Tensor<T>::from(b_enc.shape(), b_enc.values(), true),
            Tensor<T>::from(w_dec.shape(), w_dec.values(), true), Tensor<T>::from(b_dec.shape(), b_dec.values(), true)};
  }
};

/// Scales every decoder row to unit L2 norm (rows of zero norm are left).
template <class T>
void normalize_decoder_rows(SAEParams<T>& p) {
  const std::size_t d = p.d_act();
  auto w = p.w_dec.mutable_data();
  for (std::size_t i = 0; i < p.d_hidden(); ++i) {
    double s = 0;
    for (std::size_t j = 0; j < d; ++j) s += static_cast<double>(w[i * d + j]) * static_cast<double>(w[i * d + j]);
    if (s == 0) continue;
    const double inv = 1.0 / std::sqrt(s);
    for (std::size_t j = 0; j < d; ++j) w[i * d + j] = static_cast<T>(static_cast<double>(w[i * d + j]) * inv);
  }
}

/// Random unit decoder rows, encoder = decoder transpose, zero biases.
template <class T>
SAEParams<T> init_sae(std::size_t d_act, std::size_t d_hidden, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<T> dec(d_hidden * d_act);
  for (auto& x : dec) x = static_cast<T>(normal(rng));
  SAEParams<T> p{Tensor<T>::zeros({d_act, d_hidden}, true), Tensor<T>::zeros({d_hidden}, true),
                 Tensor<T>::from({d_hidden, d_act}, dec, true), Tensor<T>::zeros({d_act}, true)};
  normalize_decoder_rows(p);
  const auto w = p.w_dec.data();
  auto e = p.w_enc.mutable_data();
  for (std::size_t i = 0; i < d_hidden; ++i)
    for (std::size_t j = 0; j < d_act; ++j) e[j * d_hidden + i] = w[i * d_act + j];
  return p;
}

template <class T>
struct SAEOutput {
  Tensor<T> features;        // [rows, d_hidden]
  Tensor<T> reconstruction;  // [rows, d_act]
};

/// f = ReLU((x - b_dec) W_enc + b_enc), x_hat = f W_dec + b_dec.
template <class T>
SAEOutput<T> sae_forward(const SAEParams<T>& p, const Tensor<T>& x) {
  if (x.rank() != 2 || x.dim(1) != p.d_act()) {
    throw DimensionError("sae_forward: input " + shape_str(x.shape()) + " does not have width " +
                         std::to_string(p.d_act()));
  }
  Tensor<T> f = relu(add_row(matmul(sub_row(x, p.b_dec), p.w_enc), p.b_enc));
  Tensor<T> x_hat = add_row(matmul(f, p.w_dec), p.b_dec);
  return {f, x_hat};
}

/// MSE(x, x_hat) averaged over elements plus l1 * mean over rows of |f|_1.
template <class T>
Tensor<T> sae_loss(const SAEParams<T>& p, const Tensor<T>& x, double l1) {
  auto out = sae_forward(p, x);
  Tensor<T> loss = mse(out.reconstruction, x);
  if (l1 != 0) loss = add(loss, scale(l1_rows_mean(out.features), static_cast<T>(l1)));
  return loss;
}

struct SAEMetrics {
  double mse = 0;
  double mean_l0 = 0;
  double dead_fraction = 0;
  double explained_variance = 0;
};

struct SAELogRecord {
  std::uint64_t step = 0;
  double loss = 0;
  double mse = 0;
  double mean_l0 = 0;
  double dead_fraction = 0;  // features inactive over the logging window
  double max_decoder_norm_error = 0;
};

std::string sae_log_csv(const std::vector<SAELogRecord>& log);

template <class T>
Tensor<T> gather_rows(const ActivationDataset& data, std::span<const std::size_t> rows) {
  std::vector<T> v;
  v.reserve(rows.size() * data.d_act);
  for (std::size_t r : rows)
    for (float x : data.row(r)) v.push_back(static_cast<T>(x));
  return Tensor<T>::from({rows.size(), data.d_act}, std::move(v));
}

/// Metrics over the given rows (all rows when empty): element-mean MSE,
/// mean count of positive features per row, fraction of features never
/// positive, and 1 - SSE / total sum of squares around the row mean.
template <class T>
SAEMetrics sae_metrics(const SAEParams<T>& p, const ActivationDataset& data, std::vector<std::size_t> rows = {},
                       std::size_t batch_rows = 512) {
  if (rows.empty()) {
    rows.resize(data.n_rows());
    std::iota(rows.begin(), rows.end(), std::size_t{0});
  }
  if (rows.empty()) throw DataError("sae_metrics: empty dataset");
  NoGradGuard no_grad;
  const std::size_t d = p.d_act(), h = p.d_hidden();
  std::vector<double> mean(d, 0.0);
  for (std::size_t r : rows)
    for (std::size_t j = 0; j < d; ++j) mean[j] += data.row(r)[j];
  for (auto& m : mean) m /= static_cast<double>(rows.size());

  double sse = 0, sst = 0, l0 = 0;
  std::vector<char> active(h, 0);
  for (std::size_t start = 0; start < rows.size(); start += batch_rows) {
    const std::size_t n = std::min(batch_rows, rows.size() - start);
    const auto idx = std::span<const std::size_t>(rows).subspan(start, n);
    const auto x = gather_rows<T>(data, idx);
    const auto out = sae_forward(p, x);
    const auto xv = x.data(), xh = out.reconstruction.data(), f = out.features.data();
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < d; ++j) {
        const double e = static_cast<double>(xv[i * d + j]) - static_cast<double>(xh[i * d + j]);
        const double c = static_cast<double>(xv[i * d + j]) - mean[j];
        sse += e * e;
        sst += c * c;
      }
      for (std::size_t k = 0; k < h; ++k) {
        if (f[i * h + k] > T(0)) {
          l0 += 1;
          active[k] = 1;
        }
      }
    }
  }
  SAEMetrics m;
  const double n = static_cast<double>(rows.size());
  m.mse = sse / (n * static_cast<double>(d));
  m.mean_l0 = l0 / n;
  m.dead_fraction = static_cast<double>(std::count(active.begin(), active.end(), 0)) / static_cast<double>(h);
  m.explained_variance = sst > 0 ? 1.0 - sse / sst : (sse == 0 ? 1.0 : 0.0);
  return m;
}

template <class T>
struct SAETrainResult {
  SAEParams<T> params;
  std::vector<SAELogRecord> log;
  double seconds = 0;
};

template <class T = float>
struct SAETrainOptions {
  /// Called after every step, after decoder renormalization.
  std::function<void(std::uint64_t step, const SAEParams<T>&)> on_step;
  std::filesystem::path checkpoint_dir;  // last-good SAE written here on divergence
};

template <class T>
Container sae_to_container(const SAEParams<T>& p, const SAEConfig& config, const HookSpec& hook);
template <class T>
SAEParams<T> sae_from_container(const Container& c, SAEConfig* config = nullptr, HookSpec* hook = nullptr);

/// Adam (no weight decay) on the SAE objective. Batches walk the already
/// shuffled dataset in order, wrapping around; b_dec starts at the dataset
/// mean. Decoder rows are renormalized after every step.
template <class T = float>
SAETrainResult<T> sae_train(const ActivationDataset& data, const SAEConfig& config, SAETrainOptions<T> options = {}) {
  config.validate();
  if (data.n_rows() == 0) throw DataError("sae_train: empty activation dataset");
  if (data.d_act != config.d_act) {
    throw ContractError("sae_train: dataset width " + std::to_string(data.d_act) + " differs from d_act " +
                        std::to_string(config.d_act));
  }
  const auto start_ns = detail::now_ns();
  SAEParams<T> p = init_sae<T>(config.d_act, config.d_hidden(), config.seed);
  {
    auto b = p.b_dec.mutable_data();
    for (std::size_t r = 0; r < data.n_rows(); ++r)
      for (std::size_t j = 0; j < config.d_act; ++j) b[j] += static_cast<T>(data.row(r)[j]);
    for (auto& x : b) x /= static_cast<T>(data.n_rows());
  }
  AdamWHyper hyper;
  hyper.lr = config.lr;
  hyper.weight_decay = 0;
  AdamW<T> opt(p.named_parameters(), hyper);

  SAETrainResult<T> result;
  const std::size_t n = data.n_rows(), h = config.d_hidden();
  const std::size_t batch = std::min(config.batch_rows, n);
  std::size_t cursor = 0;
  std::vector<std::size_t> idx(batch);
  std::vector<char> active(h, 0);
  double loss_sum = 0, mse_sum = 0, l0_sum = 0;
  std::size_t window = 0;
  SAEParams<T> last_good = p.clone();

  for (std::uint64_t step = 1; step <= config.steps; ++step) {
    for (std::size_t i = 0; i < batch; ++i) idx[i] = (cursor + i) % n;
    cursor = (cursor + batch) % n;
    const Tensor<T> x = gather_rows<T>(data, idx);
    auto out = sae_forward(p, x);
    Tensor<T> rec = mse(out.reconstruction, x);
    Tensor<T> loss = config.l1_coefficient != 0
                         ? add(rec, scale(l1_rows_mean(out.features), static_cast<T>(config.l1_coefficient)))
                         : rec;
    const double loss_value = static_cast<double>(loss.item());
    auto diverged = [&](const std::string& what) {
      std::string message = what;
      const std::string bytes = sae_to_container(last_good, config, data.hook).serialize();
      if (!options.checkpoint_dir.empty()) {
        const auto path = options.checkpoint_dir / "sae-last-good.sae";
        write_file_atomic(path, bytes);
        message += "; last good SAE written to " + path.string();
      }
      throw TrainingDiverged(message, "sae", bytes);
    };
    if (!std::isfinite(loss_value)) diverged("non-finite SAE loss at step " + std::to_string(step));
    loss.backward();
    try {
      opt.step();
    } catch (const DivergenceError& e) {
      diverged(e.what());
    }
    opt.zero_grad();
    normalize_decoder_rows(p);

    const auto f = out.features.data();
    double l0 = 0;
    for (std::size_t i = 0; i < batch; ++i)
      for (std::size_t k = 0; k < h; ++k)
        if (f[i * h + k] > T(0)) {
          l0 += 1;
          active[k] = 1;
        }
    loss_sum += loss_value;
    mse_sum += static_cast<double>(rec.item());
    l0_sum += l0 / static_cast<double>(batch);
    ++window;
    if (options.on_step) options.on_step(step, p);
    if (step % config.log_every == 0 || step == config.steps) {
      SAELogRecord r;
      r.step = step;
      r.loss = loss_sum / static_cast<double>(window);
      r.mse = mse_sum / static_cast<double>(window);
      r.mean_l0 = l0_sum / static_cast<double>(window);
      r.dead_fraction = static_cast<double>(std::count(active.begin(), active.end(), 0)) / static_cast<double>(h);
      const auto w = p.w_dec.data();
      for (std::size_t k = 0; k < h; ++k) {
        double s = 0;
        for (std::size_t j = 0; j < config.d_act; ++j) s += static_cast<double>(w[k * config.d_act + j]) * w[k * config.d_act + j];
        r.max_decoder_norm_error = std::max(r.max_decoder_norm_error, std::abs(std::sqrt(s) - 1.0));
      }
      result.log.push_back(r);
      loss_sum = mse_sum = l0_sum = 0;
      window = 0;
      std::fill(active.begin(), active.end(), 0);
      last_good = p.clone();
    }
  }
  result.params = std::move(p);
  result.seconds = detail::seconds_since(start_ns);
  return result;
}

template <class T>
Container sae_to_container(const SAEParams<T>& p, const SAEConfig& config, const HookSpec& hook) {
  KeyValueConfig meta;
  const auto kv = config.to_kv();
  for (const auto& [k, v] : kv.values()) meta.set("sae." + k, v);
  meta.set("hook", hook.to_string());
  meta.set("dtype", to_string(dtype_of<T>()));
  Container c;
  c.kind = "sae";
  c.metadata = meta.to_text();
  for (const auto& np : p.named_parameters()) c.add<T>(np.name, np.tensor.shape(), np.tensor.data());
  return c;
}

template <class T>
SAEParams<T> sae_from_container(const Container& c, SAEConfig* config, HookSpec* hook) {
  if (c.kind != "sae") throw FormatError("not an SAE container");
  const auto meta = KeyValueConfig::parse(c.metadata);
  KeyValueConfig kv;
  for (const auto& [k, v] : meta.values())
    if (k.rfind("sae.", 0) == 0) kv.set(k.substr(4), v);
  const auto cfg = SAEConfig::from_kv(kv);
  if (config) *config = cfg;
  if (hook) *hook = HookSpec::parse(meta.get_string("hook"));
  auto load = [&](const char* name, Shape shape) {
    const auto& e = c.get(name);
    if (e.shape != shape) throw FormatError(std::string("SAE entry ") + name + " has the wrong shape");
    return Tensor<T>::from(shape, e.template as<T>(), true);
  };
  const std::size_t d = cfg.d_act, h = cfg.d_hidden();
  return {load("w_enc", {d, h}), load("b_enc", {h}), load("w_dec", {h, d}), load("b_dec", {d})};
}

template <class T>
void save_sae(const std::filesystem::path& path, const SAEParams<T>& p, const SAEConfig& config, const HookSpec& hook) {
  sae_to_container(p, config, hook).save(path);
}

template <class T>
SAEParams<T> load_sae(const std::filesystem::path& path, SAEConfig* config = nullptr, HookSpec* hook = nullptr) {
  return sae_from_container<T>(Container::load(path, "sae"), config, hook);
}

}  // namespace storylab
