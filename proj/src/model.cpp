#include "storylab/model.hpp"

#include <charconv>
#include <cmath>
#include <sstream>

#include "storylab/errors.hpp"

namespace storylab {

void ModelConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ConfigError("model config: " + msg); };
  if (d_model == 0 || n_heads == 0 || n_kv_heads == 0) fail("dimensions must be positive");
  if (d_model % n_heads != 0) fail("d_model must be divisible by n_heads");
  if (n_heads % n_kv_heads != 0) fail("n_heads must be divisible by n_kv_heads");
  if (head_dim() % 2 != 0) fail("head dimension must be even for rotary embeddings");
  if (context_length < 1) fail("context_length must be at least 1");
  if (vocab_size < 1) fail("vocab_size must be positive");
  if (d_mlp == 0) fail("d_mlp must be positive");
  if (!(rope_theta > 0)) fail("rope_theta must be positive");
  if (!(norm_eps >= 0)) fail("norm_eps must be non-negative");
}

KeyValueConfig ModelConfig::to_kv() const {
  KeyValueConfig kv;
  auto real = [](double v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
  };
  kv.set("n_layers", std::to_string(n_layers));
  kv.set("n_heads", std::to_string(n_heads));
  kv.set("n_kv_heads", std::to_string(n_kv_heads));
  kv.set("d_model", std::to_string(d_model));
  kv.set("d_mlp", std::to_string(d_mlp));
  kv.set("vocab_size", std::to_string(vocab_size));
  kv.set("context_length", std::to_string(context_length));
  kv.set("rope_theta", real(rope_theta));
  kv.set("norm_eps", real(norm_eps));
  kv.set("tie_embeddings", tie_embeddings ? "true" : "false");
  return kv;
}

ModelConfig ModelConfig::from_kv(const KeyValueConfig& kv) {
  kv.require_known({"n_layers", "n_heads", "n_kv_heads", "d_model", "d_mlp", "vocab_size",
                    "context_length", "rope_theta", "norm_eps", "tie_embeddings"},
                   "model config");
  ModelConfig c;
  auto size = [&kv](const char* key, std::size_t fallback) {
    const auto v = kv.get_int(key, static_cast<std::int64_t>(fallback));
    if (v < 0) throw ConfigError(std::string("model config: negative ") + key);
    return static_cast<std::size_t>(v);
  };
  c.n_layers = size("n_layers", c.n_layers);
  c.n_heads = size("n_heads", c.n_heads);
  c.n_kv_heads = size("n_kv_heads", kv.has("n_heads") ? c.n_heads : c.n_kv_heads);
  c.d_model = size("d_model", c.d_model);
  c.d_mlp = size("d_mlp", kv.has("d_model") ? default_d_mlp(c.d_model) : c.d_mlp);
  c.vocab_size = size("vocab_size", c.vocab_size);
  c.context_length = size("context_length", c.context_length);
  c.rope_theta = kv.get_double("rope_theta", c.rope_theta);
  c.norm_eps = kv.get_double("norm_eps", c.norm_eps);
  c.tie_embeddings = kv.get_bool("tie_embeddings", c.tie_embeddings);
  c.validate();
  return c;
}

std::size_t default_d_mlp(std::size_t d_model) {
  const double target = 8.0 * static_cast<double>(d_model) / 3.0;
  const auto blocks = static_cast<std::size_t>(std::llround(target / 32.0));
  return std::max<std::size_t>(1, blocks) * 32;
}

namespace {

struct NamedShape {
  const char* name;
  std::size_t layers, heads, hidden;
};

constexpr NamedShape kNamedShapes[] = {
    {"33M-ar", 4, 16, 768},   {"28M-ar", 8, 16, 512}, {"2L-33M-ar", 2, 16, 1024},
    {"1L-21M-ar", 1, 16, 1024}, {"8M-ar", 8, 16, 256}, {"3M-ar", 8, 16, 128},
    {"1M-ar", 8, 16, 64},
};

}  // namespace

const std::vector<std::string>& named_config_names() {
  static const std::vector<std::string> names = [] {
    std::vector<std::string> out;
    for (const auto& s : kNamedShapes) out.emplace_back(s.name);
    return out;
  }();
  return names;
}

ModelConfig named_config(std::string_view name, std::size_t vocab_size) {
  for (const auto& s : kNamedShapes) {
    if (name == s.name) {
      ModelConfig c;
      c.n_layers = s.layers;
      c.n_heads = s.heads;
      c.n_kv_heads = s.heads;
      c.d_model = s.hidden;
      c.d_mlp = default_d_mlp(s.hidden);
      c.vocab_size = vocab_size;
      c.validate();
      return c;
    }
  }
  throw ConfigError("unknown model name '" + std::string(name) + "'");
}

std::size_t count_params(const ModelConfig& c) {
  const std::size_t d = c.d_model, hd = c.head_dim();
  const std::size_t qw = c.n_heads * hd, kw = c.n_kv_heads * hd;
  const std::size_t per_layer = 2 * d + d * qw + 2 * d * kw + qw * d + 3 * d * c.d_mlp;
  return c.vocab_size * d + c.n_layers * per_layer + d + (c.tie_embeddings ? 0 : d * c.vocab_size);
}

std::string to_string(HookPoint point) {
  return point == HookPoint::kMlpOutput ? "mlp_output" : "mlp_hidden_post_act";
}

HookPoint parse_hook_point(std::string_view text) {
  if (text == "mlp_output") return HookPoint::kMlpOutput;
  if (text == "mlp_hidden_post_act") return HookPoint::kMlpHiddenPostAct;
  throw ContractError("invalid hook point '" + std::string(text) +
                      "' (expected mlp_output or mlp_hidden_post_act)");
}

std::string HookSpec::to_string() const {
  return "layers." + std::to_string(layer) + "." + storylab::to_string(point);
}

HookSpec HookSpec::parse(std::string_view text) {
  constexpr std::string_view prefix = "layers.";
  if (text.substr(0, prefix.size()) != prefix) {
    throw ContractError("invalid hook descriptor '" + std::string(text) + "'");
  }
  text.remove_prefix(prefix.size());
  const auto dot = text.find('.');
  if (dot == std::string_view::npos) {
    throw ContractError("invalid hook descriptor: missing point name");
  }
  HookSpec spec;
  auto [ptr, ec] = std::from_chars(text.data(), text.data() + dot, spec.layer);
  if (ec != std::errc() || ptr != text.data() + dot) {
    throw ContractError("invalid hook descriptor: bad layer index");
  }
  spec.point = parse_hook_point(text.substr(dot + 1));
  return spec;
}

std::size_t hook_width(const ModelConfig& config, HookPoint point) {
  return point == HookPoint::kMlpOutput ? config.d_model : config.d_mlp;
}

}  // namespace storylab
