#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "storylab/adamw.hpp"
#include "storylab/config.hpp"
#include "storylab/container.hpp"
#include "storylab/errors.hpp"
#include "storylab/model.hpp"
#include "storylab/tokenizer.hpp"

namespace storylab {

struct TrainConfig {
  double lr = 5e-5;
  double warmup_fraction = 0.05;
  std::size_t batch_size_tokens = 32768;
  double epochs = 1.0;
  std::uint64_t seed = 0;
  std::size_t eval_every = 100;
  int precision = 32;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double weight_decay = 0.1;
  double grad_clip = 0.0;  // 0 disables clipping
  double val_fraction = 0.01;
  bool restart_warmup = false;  // only consulted by continue_pretrain

  void validate() const;
  AdamWHyper adamw() const { return {lr, beta1, beta2, adam_eps, weight_decay}; }
  KeyValueConfig to_kv() const;
  static TrainConfig from_kv(const KeyValueConfig& kv);
  static const std::set<std::string>& keys();
};

/// Linear warmup from 0 to config.lr over warmup_fraction * total_steps
/// steps, constant afterwards.
double lr_at(std::uint64_t step, std::uint64_t total_steps, const TrainConfig& config);

struct PackedDataset {
  std::size_t context_length = 0;
  std::size_t vocab_size = 0;
  std::uint64_t shuffle_seed = 0;
  TokenId eos = SpecialTokens{}.eos;
  std::size_t n_documents = 0;
  std::vector<TokenId> tokens;  // n_rows() * context_length

  std::size_t n_rows() const { return context_length ? tokens.size() / context_length : 0; }
  std::size_t n_tokens() const { return tokens.size(); }
  std::span<const TokenId> row(std::size_t i) const;

  Container to_container() const;
  static PackedDataset from_container(const Container& c);
  void save(const std::filesystem::path& path) const { to_container().save(path); }
  static PackedDataset load(const std::filesystem::path& path);
};

/// Concatenates non-empty documents, each followed by eos, cuts the stream
/// into contiguous rows of context_length ids, drops the trailing partial
/// row and shuffles row order with `seed`. Throws DataError when no
/// non-empty document exists or the stream is shorter than one row, and
/// IndexError for ids outside [0, vocab_size).
PackedDataset pack_contexts(const std::vector<std::vector<TokenId>>& documents,
                            std::size_t context_length, std::uint64_t seed,
                            std::size_t vocab_size, TokenId eos = SpecialTokens{}.eos);

struct RowSplit {
  std::vector<std::size_t> train;
  std::vector<std::size_t> validation;
};

/// Seeded selection of round(fraction * n_rows) validation rows (at least
/// one when fraction > 0 and n_rows >= 2). Both lists are ascending.
RowSplit split_rows(std::size_t n_rows, double fraction, std::uint64_t seed);

struct LossRecord {
  std::uint64_t step = 0;
  std::string stage;
  std::string split;  // "train" or "val"
  double loss = 0;
  friend bool operator==(const LossRecord&, const LossRecord&) = default;
};

class LossLog {
 public:
  void append(LossRecord record) { records_.push_back(std::move(record)); }
  void extend(const LossLog& other);
  const std::vector<LossRecord>& records() const { return records_; }
  std::vector<LossRecord> filter(std::string_view stage, std::string_view split) const;

  /// "step,stage,split,loss" rows; losses printed with round-trip precision.
  std::string to_csv(bool header = true) const;
  static LossLog parse_csv(std::string_view text);
  /// Appends rows to `path`, writing the header only when the file is new.
  void append_to(const std::filesystem::path& path) const;
  static LossLog load(const std::filesystem::path& path);

  friend bool operator==(const LossLog&, const LossLog&) = default;

 private:
  std::vector<LossRecord> records_;
};

struct DataCursor {
  std::uint64_t epoch = 0;   // index into the sequence of epoch shuffles
  std::uint64_t offset = 0;  // rows consumed within the current epoch
  friend bool operator==(const DataCursor&, const DataCursor&) = default;
};

template <class T>
struct Checkpoint {
  static constexpr std::uint32_t kFormatVersion = 1;

  TransformerWeights<T> weights;
  AdamWState<T> optimizer;
  TrainConfig train_config;
  std::string stage = "pretrain";
  std::uint64_t global_step = 0;
  std::uint64_t stage_start_step = 0;
  std::uint64_t stage_total_steps = 0;
  DataCursor cursor;
  std::string rng_state;  // shuffle engine state at the start of cursor.epoch

  const ModelConfig& model_config() const { return weights.config; }

  Container to_container() const {
    KeyValueConfig meta;
    const auto model_kv = weights.config.to_kv();
    const auto train_kv = train_config.to_kv();
    for (const auto& [k, v] : model_kv.values()) meta.set("model." + k, v);
    for (const auto& [k, v] : train_kv.values()) meta.set("train." + k, v);
    meta.set("checkpoint.version", std::to_string(kFormatVersion));
    meta.set("checkpoint.dtype", to_string(dtype_of<T>()));
    meta.set("state.stage", stage);
    meta.set("state.global_step", std::to_string(global_step));
    meta.set("state.stage_start_step", std::to_string(stage_start_step));
    meta.set("state.stage_total_steps", std::to_string(stage_total_steps));
    meta.set("state.cursor_epoch", std::to_string(cursor.epoch));
    meta.set("state.cursor_offset", std::to_string(cursor.offset));
    meta.set("state.adam_step", std::to_string(optimizer.step));

    Container c;
    c.kind = "checkpoint";
    c.metadata = meta.to_text();
    const auto params = weights.named_parameters();
    for (std::size_t i = 0; i < params.size(); ++i) {
      const auto& p = params[i];
      c.add<T>("weight." + p.name, p.tensor.shape(), p.tensor.data());
      if (!optimizer.m.empty()) {
        c.add<T>("adam_m." + p.name, p.tensor.shape(), optimizer.m[i]);
        c.add<T>("adam_v." + p.name, p.tensor.shape(), optimizer.v[i]);
      }
    }
    std::vector<std::uint8_t> rng(rng_state.begin(), rng_state.end());
    c.add<std::uint8_t>("rng_state", {rng.size()}, rng);
    return c;
  }

  static Checkpoint from_container(const Container& c) {
    if (c.kind != "checkpoint") throw FormatError("not a checkpoint container");
    const auto meta = KeyValueConfig::parse(c.metadata);
    if (meta.get_int("checkpoint.version") != kFormatVersion) {
      throw FormatError("unsupported checkpoint version");
    }
    if (meta.get_string("checkpoint.dtype") != to_string(dtype_of<T>())) {
      throw FormatError("checkpoint precision is " + meta.get_string("checkpoint.dtype") +
                        ", requested " + to_string(dtype_of<T>()));
    }
    KeyValueConfig model_kv, train_kv;
    for (const auto& [k, v] : meta.values()) {
      if (k.rfind("model.", 0) == 0) model_kv.set(k.substr(6), v);
      if (k.rfind("train.", 0) == 0) train_kv.set(k.substr(6), v);
    }
    Checkpoint ck;
    ck.weights = allocate_weights<T>(ModelConfig::from_kv(model_kv));
    ck.train_config = TrainConfig::from_kv(train_kv);
    auto u64 = [&](const char* key) { return static_cast<std::uint64_t>(meta.get_int(key)); };
    ck.stage = meta.get_string("state.stage");
    ck.global_step = u64("state.global_step");
    ck.stage_start_step = u64("state.stage_start_step");
    ck.stage_total_steps = u64("state.stage_total_steps");
    ck.cursor = {u64("state.cursor_epoch"), u64("state.cursor_offset")};
    ck.optimizer.step = u64("state.adam_step");
    ck.optimizer.hyper = ck.train_config.adamw();
    for (auto& p : ck.weights.named_parameters()) {
      const auto& e = c.get("weight." + p.name);
      if (e.shape != p.tensor.shape()) throw FormatError("checkpoint shape mismatch for " + p.name);
      auto values = e.template as<T>();
      std::copy(values.begin(), values.end(), p.tensor.mutable_data().begin());
      if (c.has("adam_m." + p.name)) {
        ck.optimizer.m.push_back(c.get("adam_m." + p.name).template as<T>());
        ck.optimizer.v.push_back(c.get("adam_v." + p.name).template as<T>());
      }
    }
    const auto rng = c.get("rng_state").as<std::uint8_t>();
    ck.rng_state.assign(rng.begin(), rng.end());
    return ck;
  }

  void save(const std::filesystem::path& path) const { to_container().save(path); }
  static Checkpoint load(const std::filesystem::path& path) {
    return from_container(Container::load(path, "checkpoint"));
  }
};

/// "f32" or "f64" as recorded in a checkpoint file.
std::string checkpoint_dtype(const std::filesystem::path& path);

/// Thrown when a step produces a non-finite loss or gradient. Carries the
/// serialized checkpoint of the last good step.
class TrainingDiverged : public DivergenceError {
 public:
  TrainingDiverged(const std::string& what, const std::string& parameter, std::string checkpoint)
      : DivergenceError(what, parameter), checkpoint_(std::move(checkpoint)) {}
  const std::string& checkpoint_bytes() const { return checkpoint_; }

 private:
  std::string checkpoint_;
};

template <class T>
struct TrainResult {
  Checkpoint<T> checkpoint;
  LossLog log;
  double seconds = 0;
};

template <class T>
struct TrainOptions {
  std::string stage = "pretrain";
  /// Stop once the global step reaches this value (for interruption).
  std::optional<std::uint64_t> stop_at_step;
  /// When set, per-epoch checkpoints and the last-good checkpoint on
  /// divergence are written here.
  std::filesystem::path checkpoint_dir;
  std::function<void(const LossRecord&)> on_record;
  std::function<void(const Checkpoint<T>&)> on_epoch_end;
};

/// Mean next-token loss over the given rows, without recording gradients.
template <class T>
double evaluate_loss(const TransformerWeights<T>& weights, const PackedDataset& data,
                     std::span<const std::size_t> rows, std::size_t rows_per_batch = 8) {
  if (rows.empty()) throw ContractError("evaluate_loss: no rows");
  NoGradGuard no_grad;
  const std::size_t L = data.context_length;
  double total = 0;
  std::vector<TokenId> batch;
  for (std::size_t start = 0; start < rows.size(); start += rows_per_batch) {
    const std::size_t n = std::min(rows_per_batch, rows.size() - start);
    batch.clear();
    for (std::size_t r = 0; r < n; ++r) {
      const auto row = data.row(rows[start + r]);
      batch.insert(batch.end(), row.begin(), row.end());
    }
    total += static_cast<double>(language_model_loss<T>(weights, batch, n, L).item()) * static_cast<double>(n);
  }
  return total / static_cast<double>(rows.size());
}

template <class T>
double evaluate_loss(const TransformerWeights<T>& weights, const PackedDataset& data) {
  std::vector<std::size_t> all(data.n_rows());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  return evaluate_loss(weights, data, all);
}

namespace detail {

std::size_t rows_per_step(const TrainConfig& config, std::size_t context_length);
std::uint64_t stage_steps(const TrainConfig& config, std::size_t n_train_rows, std::size_t context_length);
void check_dataset(const ModelConfig& model, const PackedDataset& data);
std::string engine_state(const std::mt19937_64& rng);
std::mt19937_64 engine_from_state(const std::string& state);
double seconds_since(std::int64_t start_ns);
std::int64_t now_ns();

template <class T>
class TrainSession {
 public:
  TrainSession(Checkpoint<T> ck, const PackedDataset& data, TrainOptions<T> options, bool warmup)
      : ck_(own_weights(std::move(ck))),
        data_(data),
        options_(std::move(options)),
        warmup_(warmup),
        optimizer_(ck_.weights.named_parameters(), ck_.train_config.adamw()) {
    check_dataset(ck_.weights.config, data_);
    const auto& cfg = ck_.train_config;
    split_ = split_rows(data_.n_rows(), cfg.val_fraction, cfg.seed);
    if (split_.train.empty()) throw DataError("training split is empty");
    rows_per_step_ = rows_per_step(cfg, data_.context_length);
    if (!ck_.optimizer.m.empty()) {
      auto& st = optimizer_.state();
      st.step = ck_.optimizer.step;
      st.m = ck_.optimizer.m;
      st.v = ck_.optimizer.v;
    }
    rng_ = engine_from_state(ck_.rng_state);
    order_ = split_.train;
    std::shuffle(order_.begin(), order_.end(), rng_);
  }

  TrainResult<T> run() {
    const auto start = now_ns();
    const auto& cfg = ck_.train_config;
    TrainConfig schedule = cfg;
    if (!warmup_) schedule.warmup_fraction = 0;
    if (ck_.global_step == ck_.stage_start_step && !split_.validation.empty()) record(ck_.global_step, "val", validation_loss());

    std::vector<TokenId> batch;
    while (local_step() < ck_.stage_total_steps) {
      if (options_.stop_at_step && ck_.global_step >= *options_.stop_at_step) break;
      if (ck_.cursor.offset >= order_.size()) next_epoch();

      const std::size_t n = std::min<std::size_t>(rows_per_step_, order_.size() - ck_.cursor.offset);
      batch.clear();
      for (std::size_t r = 0; r < n; ++r) {
        const auto row = data_.row(order_[ck_.cursor.offset + r]);
        batch.insert(batch.end(), row.begin(), row.end());
      }
      const double lr = lr_at(local_step(), ck_.stage_total_steps, schedule);
      Tensor<T> loss = language_model_loss<T>(ck_.weights, batch, n, data_.context_length);
      const double value = static_cast<double>(loss.item());
      if (!std::isfinite(value)) diverged("non-finite loss at step " + std::to_string(ck_.global_step + 1), "loss");
      loss.backward();
      if (cfg.grad_clip > 0) optimizer_.clip_grad_norm(cfg.grad_clip);
      try {
        optimizer_.step(lr);
      } catch (const DivergenceError& e) {
        optimizer_.zero_grad();
        diverged(e.what(), e.parameter());
      }
      optimizer_.zero_grad();
      ++ck_.global_step;
      ck_.cursor.offset += n;
      record(ck_.global_step, "train", value);

      const bool last = local_step() == ck_.stage_total_steps;
      if (ck_.cursor.offset >= order_.size()) epoch_end();
      if (!split_.validation.empty() && cfg.eval_every > 0 && (local_step() % cfg.eval_every == 0 || last)) {
        record(ck_.global_step, "val", validation_loss());
      }
    }
    TrainResult<T> result;
    result.checkpoint = snapshot();
    result.log = std::move(log_);
    result.seconds = seconds_since(start);
    return result;
  }

 private:
  // Tensors are shared handles; training must never write through to the
  // caller's checkpoint.
  static Checkpoint<T> own_weights(Checkpoint<T> ck) {
    ck.weights = cast_weights<T>(ck.weights);
    return ck;
  }

  std::uint64_t local_step() const { return ck_.global_step - ck_.stage_start_step; }

  void next_epoch() {
    ++ck_.cursor.epoch;
    ck_.cursor.offset = 0;
    ck_.rng_state = engine_state(rng_);
    order_ = split_.train;
    std::shuffle(order_.begin(), order_.end(), rng_);
  }

  void epoch_end() {
    if (!options_.on_epoch_end && options_.checkpoint_dir.empty()) return;
    const auto ck = snapshot();
    if (!options_.checkpoint_dir.empty()) {
      ck.save(options_.checkpoint_dir /
              (ck.stage + "-epoch-" + std::to_string(ck.cursor.epoch + 1) + ".ckpt"));
    }
    if (options_.on_epoch_end) options_.on_epoch_end(ck);
  }

  double validation_loss() const {
    return evaluate_loss(ck_.weights, data_, split_.validation, std::max<std::size_t>(1, rows_per_step_));
  }

  void record(std::uint64_t step, const char* split, double loss) {
    LossRecord r{step, ck_.stage, split, loss};
    if (options_.on_record) options_.on_record(r);
    log_.append(std::move(r));
  }

  Checkpoint<T> snapshot() const {
    Checkpoint<T> out;
    out.weights = cast_weights<T>(ck_.weights);
    out.optimizer = optimizer_.state();
    out.train_config = ck_.train_config;
    out.stage = ck_.stage;
    out.global_step = ck_.global_step;
    out.stage_start_step = ck_.stage_start_step;
    out.stage_total_steps = ck_.stage_total_steps;
    out.cursor = ck_.cursor;
    out.rng_state = ck_.rng_state;
    return out;
  }

  [[noreturn]] void diverged(const std::string& what, const std::string& parameter) {
    const auto ck = snapshot();
    std::string message = what;
    if (!options_.checkpoint_dir.empty()) {
      const auto path = options_.checkpoint_dir / (ck.stage + "-last-good.ckpt");
      ck.save(path);
      message += "; last good checkpoint written to " + path.string();
    }
    throw TrainingDiverged(message, parameter, ck.to_container().serialize());
  }

  Checkpoint<T> ck_;
  const PackedDataset& data_;
  TrainOptions<T> options_;
  bool warmup_;
  AdamW<T> optimizer_;
  RowSplit split_;
  std::size_t rows_per_step_ = 1;
  std::mt19937_64 rng_;
  std::vector<std::size_t> order_;
  LossLog log_;
};

}  // namespace detail

/// Stage-1 pre-training from `initial` weights.
template <class T>
TrainResult<T> train(const TransformerWeights<T>& initial, const PackedDataset& data,
                     const TrainConfig& config, TrainOptions<T> options = {}) {
  config.validate();
  detail::check_dataset(initial.config, data);
  Checkpoint<T> ck;
  ck.weights = cast_weights<T>(initial);
  ck.train_config = config;
  ck.stage = options.stage;
  const auto split = split_rows(data.n_rows(), config.val_fraction, config.seed);
  ck.stage_total_steps = detail::stage_steps(config, split.train.size(), data.context_length);
  ck.rng_state = detail::engine_state(std::mt19937_64(config.seed));
  return detail::TrainSession<T>(std::move(ck), data, std::move(options), true).run();
}

/// Continues an interrupted stage on the same dataset; the result equals an
/// uninterrupted run bit for bit.
template <class T>
TrainResult<T> resume_training(const Checkpoint<T>& checkpoint, const PackedDataset& data,
                               TrainOptions<T> options = {}) {
  options.stage = checkpoint.stage;
  const bool warmup = checkpoint.stage_start_step == 0 || checkpoint.train_config.restart_warmup;
  return detail::TrainSession<T>(checkpoint, data, std::move(options), warmup).run();
}

/// A new training stage on `data` starting from the checkpoint's weights,
/// optimizer moments and step counter. Warmup is skipped unless
/// config.restart_warmup is set.
template <class T>
TrainResult<T> continue_pretrain(const Checkpoint<T>& checkpoint, const PackedDataset& data,
                                 const TrainConfig& config, TrainOptions<T> options = {}) {
  config.validate();
  if (data.vocab_size != checkpoint.weights.config.vocab_size) {
    throw ContractError("continue_pretrain: dataset vocabulary size " + std::to_string(data.vocab_size) +
                        " differs from the checkpoint's " +
                        std::to_string(checkpoint.weights.config.vocab_size));
  }
  if (checkpoint.optimizer.m.empty()) throw ContractError("continue_pretrain: checkpoint has no optimizer state");
  if (options.stage == "pretrain") options.stage = "continue";
  Checkpoint<T> ck = checkpoint;
  ck.train_config = config;
  ck.stage = options.stage;
  ck.stage_start_step = checkpoint.global_step;
  const auto split = split_rows(data.n_rows(), config.val_fraction, config.seed);
  ck.stage_total_steps = detail::stage_steps(config, split.train.size(), data.context_length);
  ck.cursor = {};
  ck.rng_state = detail::engine_state(std::mt19937_64(config.seed));
  return detail::TrainSession<T>(std::move(ck), data, std::move(options), config.restart_warmup).run();
}

}  // namespace storylab
