#include "storylab/train.hpp"

#include <charconv>
#include <chrono>
#include <fstream>
#include <iomanip>
#include <numeric>

namespace storylab {

namespace {

// Shortest text that parses back to the same double.
std::string real_text(double v) {
  char buf[32];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

}  // namespace

void TrainConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ConfigError("train config: " + msg); };
  if (!(lr > 0)) fail("lr must be positive");
  if (!(warmup_fraction >= 0 && warmup_fraction < 1)) fail("warmup_fraction must lie in [0, 1)");
  if (batch_size_tokens == 0) fail("batch_size_tokens must be positive");
  if (!(epochs > 0)) fail("epochs must be positive");
  if (precision != 32 && precision != 64) fail("precision must be 32 or 64");
  if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1)) fail("betas must lie in [0, 1)");
  if (!(adam_eps > 0)) fail("adam_eps must be positive");
  if (!(weight_decay >= 0)) fail("weight_decay must be non-negative");
  if (!(grad_clip >= 0)) fail("grad_clip must be non-negative");
  if (!(val_fraction >= 0 && val_fraction < 1)) fail("val_fraction must lie in [0, 1)");
}

const std::set<std::string>& TrainConfig::keys() {
  static const std::set<std::string> k{"lr", "warmup_fraction", "batch_size_tokens", "epochs", "seed",
                                       "eval_every", "precision", "beta1", "beta2", "adam_eps",
                                       "weight_decay", "grad_clip", "val_fraction", "restart_warmup"};
  return k;
}

KeyValueConfig TrainConfig::to_kv() const {
  KeyValueConfig kv;
  kv.set("lr", real_text(lr));
  kv.set("warmup_fraction", real_text(warmup_fraction));
  kv.set("batch_size_tokens", std::to_string(batch_size_tokens));
  kv.set("epochs", real_text(epochs));
  kv.set("seed", std::to_string(seed));
  kv.set("eval_every", std::to_string(eval_every));
  kv.set("precision", std::to_string(precision));
  kv.set("beta1", real_text(beta1));
  kv.set("beta2", real_text(beta2));
  kv.set("adam_eps", real_text(adam_eps));
  kv.set("weight_decay", real_text(weight_decay));
  kv.set("grad_clip", real_text(grad_clip));
  kv.set("val_fraction", real_text(val_fraction));
  kv.set("restart_warmup", restart_warmup ? "true" : "false");
  return kv;
}

TrainConfig TrainConfig::from_kv(const KeyValueConfig& kv) {
  kv.require_known(keys(), "train config");
  TrainConfig c;
  auto count = [&kv](const char* key, std::int64_t fallback) {
    const auto v = kv.get_int(key, fallback);
    if (v < 0) throw ConfigError(std::string("train config: negative ") + key);
    return v;
  };
  c.lr = kv.get_double("lr", c.lr);
  c.warmup_fraction = kv.get_double("warmup_fraction", c.warmup_fraction);
  c.batch_size_tokens = static_cast<std::size_t>(count("batch_size_tokens", static_cast<std::int64_t>(c.batch_size_tokens)));
  c.epochs = kv.get_double("epochs", c.epochs);
  c.seed = static_cast<std::uint64_t>(count("seed", static_cast<std::int64_t>(c.seed)));
  c.eval_every = static_cast<std::size_t>(count("eval_every", static_cast<std::int64_t>(c.eval_every)));
  c.precision = static_cast<int>(kv.get_int("precision", c.precision));
  c.beta1 = kv.get_double("beta1", c.beta1);
  c.beta2 = kv.get_double("beta2", c.beta2);
  c.adam_eps = kv.get_double("adam_eps", c.adam_eps);
  c.weight_decay = kv.get_double("weight_decay", c.weight_decay);
  c.grad_clip = kv.get_double("grad_clip", c.grad_clip);
  c.val_fraction = kv.get_double("val_fraction", c.val_fraction);
  c.restart_warmup = kv.get_bool("restart_warmup", c.restart_warmup);
  c.validate();
  return c;
}

double lr_at(std::uint64_t step, std::uint64_t total_steps, const TrainConfig& config) {
  if (step > total_steps) throw ContractError("lr_at: step beyond total_steps");
  const double warmup = config.warmup_fraction * static_cast<double>(total_steps);
  const double s = static_cast<double>(step);
  if (s >= warmup) return config.lr;
  return config.lr * s / warmup;
}

std::span<const TokenId> PackedDataset::row(std::size_t i) const {
  if (i >= n_rows()) throw IndexError("row " + std::to_string(i) + " out of range");
  return std::span<const TokenId>(tokens).subspan(i * context_length, context_length);
}

Container PackedDataset::to_container() const {
  KeyValueConfig meta;
  meta.set("context_length", std::to_string(context_length));
  meta.set("vocab_size", std::to_string(vocab_size));
  meta.set("shuffle_seed", std::to_string(shuffle_seed));
  meta.set("eos", std::to_string(eos));
  meta.set("n_documents", std::to_string(n_documents));
  meta.set("boundary_policy", "eos_separated_drop_partial");
  Container c;
  c.kind = "packed-dataset";
  c.metadata = meta.to_text();
  c.add<TokenId>("tokens", {n_rows(), context_length}, tokens);
  return c;
}

PackedDataset PackedDataset::from_container(const Container& c) {
  if (c.kind != "packed-dataset") throw FormatError("not a packed dataset container");
  const auto meta = KeyValueConfig::parse(c.metadata);
  PackedDataset d;
  d.context_length = static_cast<std::size_t>(meta.get_int("context_length"));
  d.vocab_size = static_cast<std::size_t>(meta.get_int("vocab_size"));
  d.shuffle_seed = static_cast<std::uint64_t>(meta.get_int("shuffle_seed"));
  d.eos = static_cast<TokenId>(meta.get_int("eos"));
  d.n_documents = static_cast<std::size_t>(meta.get_int("n_documents"));
  d.tokens = c.get("tokens").as<TokenId>();
  if (d.context_length == 0 || d.tokens.size() % d.context_length != 0) {
    throw FormatError("packed dataset: token count is not a multiple of the context length");
  }
  return d;
}

PackedDataset PackedDataset::load(const std::filesystem::path& path) {
  return from_container(Container::load(path, "packed-dataset"));
}

PackedDataset pack_contexts(const std::vector<std::vector<TokenId>>& documents, std::size_t context_length,
                            std::uint64_t seed, std::size_t vocab_size, TokenId eos) {
  if (context_length == 0) throw ConfigError("pack_contexts: context_length must be positive");
  if (eos < 0 || static_cast<std::size_t>(eos) >= vocab_size) throw IndexError("pack_contexts: eos outside vocabulary");
  std::vector<TokenId> stream;
  std::size_t docs = 0;
  for (const auto& doc : documents) {
    if (doc.empty()) continue;
    for (TokenId t : doc) {
      if (t < 0 || static_cast<std::size_t>(t) >= vocab_size) {
        throw IndexError("pack_contexts: token id " + std::to_string(t) + " outside vocabulary");
      }
    }
    stream.insert(stream.end(), doc.begin(), doc.end());
    stream.push_back(eos);
    ++docs;
  }
  if (docs == 0) throw DataError("pack_contexts: corpus has no non-empty document");
  const std::size_t rows = stream.size() / context_length;
  if (rows == 0) throw DataError("pack_contexts: corpus shorter than one context");

  std::vector<std::size_t> order(rows);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);

  PackedDataset out;
  out.context_length = context_length;
  out.vocab_size = vocab_size;
  out.shuffle_seed = seed;
  out.eos = eos;
  out.n_documents = docs;
  out.tokens.reserve(rows * context_length);
  for (std::size_t r : order) {
    const auto begin = stream.begin() + static_cast<std::ptrdiff_t>(r * context_length);
    out.tokens.insert(out.tokens.end(), begin, begin + static_cast<std::ptrdiff_t>(context_length));
  }
  return out;
}

RowSplit split_rows(std::size_t n_rows, double fraction, std::uint64_t seed) {
  std::size_t n_val = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(n_rows)));
  if (fraction > 0 && n_rows >= 2) n_val = std::max<std::size_t>(n_val, 1);
  n_val = std::min(n_val, n_rows > 0 ? n_rows - 1 : 0);
  std::vector<std::size_t> order(n_rows);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ULL);
  std::shuffle(order.begin(), order.end(), rng);
  RowSplit s;
  s.validation.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_val));
  s.train.assign(order.begin() + static_cast<std::ptrdiff_t>(n_val), order.end());
  std::sort(s.validation.begin(), s.validation.end());
  std::sort(s.train.begin(), s.train.end());
  return s;
}

void LossLog::extend(const LossLog& other) {
  records_.insert(records_.end(), other.records_.begin(), other.records_.end());
}

std::vector<LossRecord> LossLog::filter(std::string_view stage, std::string_view split) const {
  std::vector<LossRecord> out;
  for (const auto& r : records_)
    if ((stage.empty() || r.stage == stage) && (split.empty() || r.split == split)) out.push_back(r);
  return out;
}

std::string LossLog::to_csv(bool header) const {
  std::ostringstream os;
  if (header) os << "step,stage,split,loss\n";
  for (const auto& r : records_) os << r.step << ',' << r.stage << ',' << r.split << ',' << real_text(r.loss) << '\n';
  return os.str();
}

LossLog LossLog::parse_csv(std::string_view text) {
  LossLog log;
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line == "step,stage,split,loss") continue;
    std::vector<std::string> f;
    std::istringstream ls(line);
    for (std::string part; std::getline(ls, part, ',');) f.push_back(part);
    if (f.size() != 4) throw FormatError("loss log line " + std::to_string(lineno) + ": expected 4 fields");
    try {
      log.append({std::stoull(f[0]), f[1], f[2], std::stod(f[3])});
    } catch (const std::logic_error&) {
      throw FormatError("loss log line " + std::to_string(lineno) + ": bad number");
    }
  }
  return log;
}

void LossLog::append_to(const std::filesystem::path& path) const {
  const bool fresh = !std::filesystem::exists(path) || std::filesystem::file_size(path) == 0;
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::app);
  if (!out) throw DataError("cannot append to " + path.string());
  out << to_csv(fresh);
}

LossLog LossLog::load(const std::filesystem::path& path) { return parse_csv(read_file(path)); }

std::string checkpoint_dtype(const std::filesystem::path& path) {
  const auto c = Container::load(path, "checkpoint");
  return KeyValueConfig::parse(c.metadata).get_string("checkpoint.dtype");
}

namespace detail {

std::size_t rows_per_step(const TrainConfig& config, std::size_t context_length) {
  return std::max<std::size_t>(1, config.batch_size_tokens / std::max<std::size_t>(1, context_length));
}

std::uint64_t stage_steps(const TrainConfig& config, std::size_t n_train_rows, std::size_t context_length) {
  const std::size_t per = rows_per_step(config, context_length);
  const std::size_t per_epoch = (n_train_rows + per - 1) / per;
  return std::max<std::uint64_t>(1, static_cast<std::uint64_t>(std::ceil(config.epochs * static_cast<double>(per_epoch))));
}

void check_dataset(const ModelConfig& model, const PackedDataset& data) {
  if (data.vocab_size != model.vocab_size) {
    throw ContractError("dataset vocabulary size " + std::to_string(data.vocab_size) +
                        " differs from the model's " + std::to_string(model.vocab_size));
  }
  if (data.context_length < 2 || data.context_length > model.context_length + 1) {
    throw ContractError("dataset rows of length " + std::to_string(data.context_length) +
                        " do not fit the model context of " + std::to_string(model.context_length));
  }
  if (data.n_rows() == 0) throw DataError("dataset has no rows");
}

std::string engine_state(const std::mt19937_64& rng) {
  std::ostringstream os;
  os << rng;
  return os.str();
}

std::mt19937_64 engine_from_state(const std::string& state) {
  std::mt19937_64 rng;
  std::istringstream is(state);
  is >> rng;
  if (!is) throw FormatError("corrupt rng state");
  return rng;
}

std::int64_t now_ns() {
  return std::chrono::duration_cast<std::chrono::nanoseconds>(std::chrono::steady_clock::now().time_since_epoch())
      .count();
}

double seconds_since(std::int64_t start_ns) { return static_cast<double>(now_ns() - start_ns) * 1e-9; }

}  // namespace detail

}  // namespace storylab
