#include "storylab/sae.hpp"

#include <charconv>
#include <cstdio>
#include <iomanip>
#include <map>
#include <sstream>

namespace storylab {

namespace {

// Shortest text that parses back to the same double.
std::string real_text(double v) {
  char buf[32];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

}  // namespace

void ActivationDataset::validate() const {
  const std::size_t n = context_ids.size();
  if (positions.size() != n || token_ids.size() != n || vectors.size() != n * d_act) {
    throw FormatError("activation dataset: provenance and vector counts disagree");
  }
}

Container ActivationDataset::to_container() const {
  validate();
  KeyValueConfig meta;
  meta.set("d_act", std::to_string(d_act));
  meta.set("hook", hook.to_string());
  meta.set("shuffle_seed", std::to_string(shuffle_seed));
  meta.set("tokens_per_context", std::to_string(tokens_per_context));
  meta.set("count", std::to_string(n_rows()));
  Container c;
  c.kind = "activations";
  c.metadata = meta.to_text();
  c.add<float>("vectors", {n_rows(), d_act}, vectors);
  c.add<std::uint64_t>("context_ids", {n_rows()}, context_ids);
  std::vector<std::int32_t> pos(positions.begin(), positions.end());
  c.add<std::int32_t>("positions", {n_rows()}, pos);
  c.add<TokenId>("token_ids", {n_rows()}, token_ids);
  return c;
}

ActivationDataset ActivationDataset::from_container(const Container& c) {
  if (c.kind != "activations") throw FormatError("not an activation container");
  const auto meta = KeyValueConfig::parse(c.metadata);
  ActivationDataset d;
  d.d_act = static_cast<std::size_t>(meta.get_int("d_act"));
  d.hook = HookSpec::parse(meta.get_string("hook"));
  d.shuffle_seed = static_cast<std::uint64_t>(meta.get_int("shuffle_seed"));
  d.tokens_per_context = static_cast<std::size_t>(meta.get_int("tokens_per_context"));
  d.vectors = c.get("vectors").as<float>();
  d.context_ids = c.get("context_ids").as<std::uint64_t>();
  const auto pos = c.get("positions").as<std::int32_t>();
  d.positions.assign(pos.begin(), pos.end());
  d.token_ids = c.get("token_ids").as<TokenId>();
  if (static_cast<std::size_t>(meta.get_int("count")) != d.context_ids.size()) {
    throw FormatError("activation container: row count disagrees with header");
  }
  d.validate();
  return d;
}

std::vector<std::filesystem::path> ActivationDataset::save_shards(const std::filesystem::path& dir,
                                                                  std::size_t rows_per_shard) const {
  if (rows_per_shard == 0) throw ConfigError("rows_per_shard must be positive");
  validate();
  std::filesystem::create_directories(dir);
  std::vector<std::filesystem::path> paths;
  for (std::size_t start = 0, k = 0; start < n_rows() || k == 0; start += rows_per_shard, ++k) {
    const std::size_t n = std::min(rows_per_shard, n_rows() - start);
    ActivationDataset shard;
    shard.d_act = d_act;
    shard.hook = hook;
    shard.shuffle_seed = shuffle_seed;
    shard.tokens_per_context = tokens_per_context;
    shard.vectors.assign(vectors.begin() + static_cast<std::ptrdiff_t>(start * d_act),
                         vectors.begin() + static_cast<std::ptrdiff_t>((start + n) * d_act));
    auto slice = [&](const auto& v) {
      using V = std::decay_t<decltype(v)>;
      return V(v.begin() + static_cast<std::ptrdiff_t>(start), v.begin() + static_cast<std::ptrdiff_t>(start + n));
    };
    shard.context_ids = slice(context_ids);
    shard.positions = slice(positions);
    shard.token_ids = slice(token_ids);
    char name[32];
    std::snprintf(name, sizeof(name), "shard-%05zu.act", k);
    paths.push_back(dir / name);
    shard.to_container().save(paths.back());
    if (n_rows() == 0) break;
  }
  return paths;
}

ActivationDataset ActivationDataset::load_shards(const std::filesystem::path& dir) {
  std::vector<std::filesystem::path> files;
  for (const auto& entry : std::filesystem::directory_iterator(dir))
    if (entry.path().extension() == ".act") files.push_back(entry.path());
  if (files.empty()) throw DataError("no activation shards in " + dir.string());
  std::sort(files.begin(), files.end());
  ActivationDataset out;
  for (std::size_t i = 0; i < files.size(); ++i) {
    auto shard = from_container(Container::load(files[i], "activations"));
    if (i == 0) {
      out = std::move(shard);
      continue;
    }
    if (shard.d_act != out.d_act || !(shard.hook == out.hook)) {
      throw FormatError("activation shards disagree on width or hook");
    }
    out.vectors.insert(out.vectors.end(), shard.vectors.begin(), shard.vectors.end());
    out.context_ids.insert(out.context_ids.end(), shard.context_ids.begin(), shard.context_ids.end());
    out.positions.insert(out.positions.end(), shard.positions.begin(), shard.positions.end());
    out.token_ids.insert(out.token_ids.end(), shard.token_ids.begin(), shard.token_ids.end());
  }
  return out;
}

double adjacency_chi_square(const ActivationDataset& data) {
  const std::size_t n = data.n_rows();
  if (n < 2) return 0.0;
  std::map<std::uint64_t, double> counts;
  for (auto c : data.context_ids) counts[c] += 1;
  double same_pairs = 0;
  for (const auto& [c, k] : counts) same_pairs += k * (k - 1);
  const double p = same_pairs / (static_cast<double>(n) * static_cast<double>(n - 1));
  const double pairs = static_cast<double>(n - 1);
  double observed = 0;
  for (std::size_t i = 0; i + 1 < n; ++i) observed += data.context_ids[i] == data.context_ids[i + 1] ? 1 : 0;
  const double e_same = pairs * p, e_diff = pairs * (1 - p);
  double chi = 0;
  if (e_same > 0) chi += (observed - e_same) * (observed - e_same) / e_same;
  if (e_diff > 0) chi += ((pairs - observed) - e_diff) * ((pairs - observed) - e_diff) / e_diff;
  return chi;
}

std::vector<std::uint32_t> sample_positions(std::size_t seq, std::size_t k, std::mt19937_64& rng) {
  std::vector<std::uint32_t> all(seq), out;
  std::iota(all.begin(), all.end(), 0u);
  out.reserve(std::min(k, seq));
  std::sample(all.begin(), all.end(), std::back_inserter(out), std::min(k, seq), rng);
  return out;
}

void SAEConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ConfigError("sae config: " + msg); };
  if (d_act == 0) fail("d_act must be positive");
  if (expansion_factor == 0) fail("expansion_factor must be positive");
  if (!(l1_coefficient >= 0)) fail("l1_coefficient must be non-negative");
  if (!(lr > 0)) fail("lr must be positive");
  if (batch_rows == 0) fail("batch_rows must be positive");
  if (log_every == 0) fail("log_every must be positive");
}

KeyValueConfig SAEConfig::to_kv() const {
  KeyValueConfig kv;
  kv.set("d_act", std::to_string(d_act));
  kv.set("expansion_factor", std::to_string(expansion_factor));
  kv.set("l1_coefficient", real_text(l1_coefficient));
  kv.set("lr", real_text(lr));
  kv.set("batch_rows", std::to_string(batch_rows));
  kv.set("steps", std::to_string(steps));
  kv.set("seed", std::to_string(seed));
  kv.set("log_every", std::to_string(log_every));
  return kv;
}

SAEConfig SAEConfig::from_kv(const KeyValueConfig& kv) {
  kv.require_known({"d_act", "expansion_factor", "l1_coefficient", "lr", "batch_rows", "steps", "seed", "log_every"},
                   "sae config");
  SAEConfig c;
  auto count = [&kv](const char* key, std::size_t fallback) {
    const auto v = kv.get_int(key, static_cast<std::int64_t>(fallback));
    if (v < 0) throw ConfigError(std::string("sae config: negative ") + key);
    return static_cast<std::size_t>(v);
  };
  c.d_act = count("d_act", c.d_act);
  c.expansion_factor = count("expansion_factor", c.expansion_factor);
  c.l1_coefficient = kv.get_double("l1_coefficient", c.l1_coefficient);
  c.lr = kv.get_double("lr", c.lr);
  c.batch_rows = count("batch_rows", c.batch_rows);
  c.steps = count("steps", c.steps);
  c.seed = count("seed", static_cast<std::size_t>(c.seed));
  c.log_every = count("log_every", c.log_every);
  c.validate();
  return c;
}

std::string sae_log_csv(const std::vector<SAELogRecord>& log) {
  std::ostringstream os;
  os << "step,loss,mse,mean_l0,dead_fraction,max_decoder_norm_error\n";
  for (const auto& r : log) {
    os << r.step << ',' << real_text(r.loss) << ',' << real_text(r.mse) << ',' << real_text(r.mean_l0) << ','
       << real_text(r.dead_fraction) << ',' << real_text(r.max_decoder_norm_error) << '\n';
  }
  return os.str();
}

}  // namespace storylab
