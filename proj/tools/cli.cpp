#include "cli.hpp"

#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <sstream>

#include "storylab/client.hpp"
#include "storylab/config.hpp"
#include "storylab/corpus.hpp"
#include "storylab/dashboard.hpp"
#include "storylab/errors.hpp"
#include "storylab/generate.hpp"
#include "storylab/model.hpp"
#include "storylab/sae.hpp"
#include "storylab/synth.hpp"
#include "storylab/tokenizer.hpp"
#include "storylab/train.hpp"
#include "storylab/tsea.hpp"

#include "CLI11.hpp"
#include "json.hpp"

namespace storylab::cli {

namespace fs = std::filesystem;
using Json = nlohmann::json;

namespace {

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Key {
  std::string name;
  std::string fallback;
  std::string help;
  bool required = false;
};

using Schema = std::vector<Key>;

struct Run {
  std::string command;
  fs::path run_dir;
  KeyValueConfig config;
  std::ostream& out;
  std::vector<fs::path> outputs;

  std::string expand(std::string value) const {
    auto replace = [&value](const std::string& token, const std::string& with) {
      for (std::size_t at; (at = value.find(token)) != std::string::npos;) value.replace(at, token.size(), with);
    };
    replace("{run}", run_dir.string());
    replace("{data}", data_dir().string());
    return value;
  }
  std::string str(const std::string& key) const { return config.get_string(key); }
  fs::path path(const std::string& key) const { return expand(config.get_string(key)); }
  std::size_t size(const std::string& key) const {
    const auto v = config.get_int(key);
    if (v < 0) throw ConfigError(key + " must not be negative");
    return static_cast<std::size_t>(v);
  }
  double real(const std::string& key) const { return config.get_double(key); }
  bool flag(const std::string& key) const { return config.get_bool(key); }
  std::uint64_t seed() const { return static_cast<std::uint64_t>(config.get_int("seed")); }

  fs::path output(const fs::path& relative) {
    const fs::path p = run_dir / relative;
    fs::create_directories(p.parent_path());
    outputs.push_back(relative);
    return p;
  }
  void write(const fs::path& relative, std::string_view contents) { write_file_atomic(output(relative), contents); }
};

struct Command {
  std::string name;
  std::string help;
  Schema schema;
  std::function<void(Run&)> run;
};

std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> out;
  std::stringstream ss(text);
  for (std::string item; std::getline(ss, item, ',');) {
    const auto b = item.find_first_not_of(" \t"), e = item.find_last_not_of(" \t");
    if (b != std::string::npos) out.push_back(item.substr(b, e - b + 1));
  }
  return out;
}

std::string fixed(double v, int digits = 4) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(digits) << v;
  return os.str();
}

Tokenizer load_tokenizer(const Run& r) { return Tokenizer::load(r.path("tokenizer")); }

template <class F>
void with_checkpoint(const fs::path& path, F&& f) {
  if (checkpoint_dtype(path) == "f64") f(Checkpoint<double>::load(path));
  else f(Checkpoint<float>::load(path));
}

std::unique_ptr<ChatClient> make_client(const Run& r) {
  const std::string kind = r.str("client");
  if (kind == "mock") {
    if (r.str("mock_replies").empty()) return std::make_unique<MockChatClient>();
    return MockChatClient::from_file(r.path("mock_replies"));
  }
  if (kind == "http") {
    HttpClientConfig c;
    c.base_url = r.str("base_url");
    c.path = r.str("api_path");
    c.model = r.str("model_name");
    c.token_env = r.str("token_env");
    c.timeout_seconds = r.real("timeout_seconds");
    c.attempts = r.size("attempts");
    return std::make_unique<HttpChatClient>(c);
  }
  throw ConfigError("client must be 'mock' or 'http', got '" + kind + "'");
}

const Schema kClientKeys{
    {"client", "mock", "mock or http"},
    {"mock_replies", "", "canned reply file for the mock client (empty: echo the prompt)"},
    {"base_url", "https://api.openai.com", "chat endpoint base URL"},
    {"api_path", "/v1/chat/completions", "chat endpoint path"},
    {"model_name", "gpt-4", "model name sent to the endpoint"},
    {"token_env", "OPENAI_API_KEY", "environment variable holding the bearer token"},
    {"timeout_seconds", "60", "per-request timeout"},
    {"attempts", "3", "transport attempts per request"},
    {"parallelism", "4", "concurrent requests"},
};

Schema operator+(Schema a, const Schema& b) {
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

// ---- corpus helpers --------------------------------------------------------

void cmd_make_planted(Run& r) {
  PlantedSpec spec;
  spec.names_a = load_word_list(r.path("names_a"));
  spec.names_b = load_word_list(r.path("names_b"));
  spec.trigger = r.str("trigger");
  spec.q_noisy = r.real("q_noisy");
  spec.q_hq = r.real("q_hq");
  spec.n_docs = r.size("n_docs");
  spec.hq_ratio = r.real("hq_ratio");
  spec.seed = r.seed();
  const auto planted = make_planted_corpus(spec);
  save_corpus(r.output("data/noisy.jsonl"), planted.noisy);
  save_corpus(r.output("data/high_quality.jsonl"), planted.high_quality);
  r.out << "noisy: " << planted.noisy.stats.doc_count << " documents, " << planted.noisy.stats.byte_count
        << " bytes\nhigh_quality: " << planted.high_quality.stats.doc_count << " documents, "
        << planted.high_quality.stats.byte_count << " bytes\n";
}

void cmd_ingest(Run& r) {
  std::optional<Tokenizer> tok;
  if (!r.str("tokenizer").empty()) tok = load_tokenizer(r);
  const auto corpus = ingest(r.path("input"), parse_stage(r.str("stage")), tok ? &*tok : nullptr);
  save_corpus(r.output("data/" + r.str("name") + ".jsonl"), corpus);
  r.out << "documents: " << corpus.stats.doc_count << "\nduplicates_removed: " << corpus.stats.duplicates_removed
        << "\nbytes: " << corpus.stats.byte_count << "\ntokens: " << corpus.stats.token_count << "\n";
}

// ---- tokenizer and packing ---------------------------------------------------

void cmd_tokenizer_train(Run& r) {
  BpeTrainer trainer(r.size("vocab_size"));
  std::size_t docs = 0;
  for (const auto& file : split_list(r.str("corpus"))) {
    for (const auto& d : load_corpus(r.expand(file)).documents) {
      trainer.add_document(d.text);
      ++docs;
    }
  }
  const Tokenizer tok = trainer.finish();
  tok.save(r.output("data/tokenizer.txt"));
  r.out << "documents: " << docs << "\nvocab_size: " << tok.vocab_size() << "\nmerges: " << tok.merges().size() << "\n";
}

void cmd_pack(Run& r) {
  const Tokenizer tok = load_tokenizer(r);
  Corpus all;
  for (const auto& file : split_list(r.str("corpus"))) {
    auto c = load_corpus(r.expand(file));
    for (auto& d : c.documents) all.documents.push_back(std::move(d));
  }
  const auto packed = pack_contexts(tokenize_corpus(all, tok), r.size("context_length"), r.seed(), tok.vocab_size(),
                                    tok.specials().eos);
  packed.save(r.output("data/" + r.str("name") + ".pack"));
  r.out << "documents: " << packed.n_documents << "\nrows: " << packed.n_rows() << "\ntokens: " << packed.n_tokens()
        << "\n";
}

// ---- training ------------------------------------------------------------------

Schema model_keys() {
  Schema s{{"model", "", "named model shape (" + [] {
              std::string names;
              for (const auto& n : named_config_names()) names += (names.empty() ? "" : ", ") + n;
              return names;
            }() + "); empty for the defaults"}};
  for (const char* k : {"n_layers", "n_heads", "n_kv_heads", "d_model", "d_mlp", "context_length", "rope_theta",
                        "norm_eps", "tie_embeddings"})
    s.push_back({std::string("model.") + k, "", "overrides the shape's value when set"});
  return s;
}

Schema train_keys() {
  Schema s;
  const auto defaults = TrainConfig{}.to_kv();
  for (const auto& k : TrainConfig::keys())
    if (k != "seed") s.push_back({"train." + k, defaults.get_string(k), ""});
  return s;
}

ModelConfig resolve_model(const Run& r, const PackedDataset& data) {
  KeyValueConfig kv;
  const std::string preset = r.str("model");
  if (!preset.empty()) kv = named_config(preset, data.vocab_size).to_kv();
  kv.set("vocab_size", std::to_string(data.vocab_size));
  kv.set("context_length", std::to_string(data.context_length - 1));
  bool d_model_set = false, d_mlp_set = false;
  for (const auto& [key, value] : r.config.values()) {
    if (key.rfind("model.", 0) != 0 || value.empty()) continue;
    kv.set(key.substr(6), value);
    d_model_set |= key == "model.d_model";
    d_mlp_set |= key == "model.d_mlp";
  }
  if (!preset.empty() && d_model_set && !d_mlp_set)
    kv.set("d_mlp", std::to_string(default_d_mlp(static_cast<std::size_t>(kv.get_int("d_model")))));
  const auto c = ModelConfig::from_kv(kv);
  c.validate();
  return c;
}

TrainConfig resolve_train(const Run& r) {
  KeyValueConfig kv;
  for (const auto& [key, value] : r.config.values())
    if (key.rfind("train.", 0) == 0) kv.set(key.substr(6), value);
  kv.set("seed", r.str("seed"));
  const auto c = TrainConfig::from_kv(kv);
  c.validate();
  return c;
}

template <class T>
TrainOptions<T> train_options(Run& r, const std::string& stage) {
  TrainOptions<T> o;
  o.stage = stage;
  if (const auto stop = r.size("stop_at_step")) o.stop_at_step = stop;
  fs::create_directories(r.run_dir / "checkpoints");
  o.checkpoint_dir = r.run_dir / "checkpoints";
  o.on_record = [&r](const LossRecord& rec) {
    if (rec.split == "val") r.out << rec.stage << " step " << rec.step << " val_loss " << fixed(rec.loss) << "\n";
  };
  return o;
}

template <class T>
void finish_training(Run& r, const TrainResult<T>& result) {
  const std::string name = result.checkpoint.stage + "-final.ckpt";
  result.checkpoint.save(r.output("checkpoints/" + name));
  const fs::path log = r.output("logs/loss.csv");
  result.log.append_to(log);
  r.out << "steps: " << result.checkpoint.global_step << "\nseconds: " << fixed(result.seconds, 1)
        << "\ncheckpoint: " << (r.run_dir / "checkpoints" / name).string() << "\n";
}

void cmd_train(Run& r) {
  const auto data = PackedDataset::load(r.path("data"));
  const std::string resume = r.str("resume");
  if (!resume.empty()) {
    with_checkpoint(r.expand(resume), [&](auto ck) {
      using T = typename decltype(ck.weights.token_embedding)::value_type;
      finish_training(r, resume_training<T>(ck, data, train_options<T>(r, ck.stage)));
    });
    return;
  }
  const ModelConfig mc = resolve_model(r, data);
  const TrainConfig tc = resolve_train(r);
  r.out << "parameters: " << count_params(mc) << "\n";
  auto go = [&]<class T>() {
    finish_training(r, train<T>(init_weights<T>(mc, r.seed()), data, tc, train_options<T>(r, "pretrain")));
  };
  if (tc.precision == 64) go.template operator()<double>();
  else go.template operator()<float>();
}

void cmd_continue_train(Run& r) {
  const auto data = PackedDataset::load(r.path("data"));
  const TrainConfig tc = resolve_train(r);
  with_checkpoint(r.path("from"), [&](auto ck) {
    using T = typename decltype(ck.weights.token_embedding)::value_type;
    const auto split = split_rows(data.n_rows(), tc.val_fraction, tc.seed);
    const auto& eval_rows = split.validation.empty() ? split.train : split.validation;
    const double before = evaluate_loss(ck.weights, data, eval_rows);
    const auto result = continue_pretrain<T>(ck, data, tc, train_options<T>(r, "continue"));
    const double after = evaluate_loss(result.checkpoint.weights, data, eval_rows);
    r.out << "held_out_loss_before: " << fixed(before) << "\nheld_out_loss_after: " << fixed(after) << "\n";
    finish_training(r, result);
  });
}

// ---- generation and evaluation -------------------------------------------------

void cmd_generate(Run& r) {
  const Tokenizer tok = load_tokenizer(r);
  std::vector<PromptCase> cases;
  if (!r.str("cases").empty()) cases = load_cases(r.path("cases"));
  else cases.push_back({"prompt", r.str("prompt"), "cli"});
  if (cases.front().prompt.empty()) throw ConfigError("generate needs prompt or cases");
  std::string report;
  with_checkpoint(r.path("checkpoint"), [&](const auto& ck) {
    for (std::size_t i = 0; i < cases.size(); ++i) {
      for (std::size_t j = 0; j < r.size("completions"); ++j) {
        const auto seed = completion_seed(r.seed(), i, j);
        const auto text = sample(ck.weights, tok, cases[i].prompt, {r.real("temperature"), r.size("max_new_tokens"), seed});
        report += Json{{"case_id", cases[i].id}, {"seed", seed}, {"prompt", cases[i].prompt}, {"completion", text}}
                      .dump(-1, ' ', false, Json::error_handler_t::replace) +
                  "\n";
        r.out << strip_marker(cases[i].prompt) << text << "\n";
      }
    }
  });
  r.write("reports/generate.jsonl", report);
}

void cmd_eval_judge(Run& r) {
  const Tokenizer tok = load_tokenizer(r);
  const auto cases = load_cases(r.path("cases"));
  auto client = make_client(r);
  EvalConfig ec;
  ec.completions_per_case = r.size("completions_per_case");
  ec.temperature = r.real("temperature");
  ec.max_new_tokens = r.size("max_new_tokens");
  ec.seed = r.seed();
  ec.parallelism = r.size("parallelism");
  ec.judge_attempts = r.size("judge_attempts");
  EvalReport report;
  with_checkpoint(r.path("checkpoint"), [&](const auto& ck) {
    report = evaluate_model(ck.weights, tok, cases, *client, ec, r.path("checkpoint").filename().string());
  });
  r.write("reports/eval.jsonl", report_jsonl(report));
  r.out << "rows: " << report.rows.size() << "\nscored: " << report.means.scored << "\nerrors: " << report.means.errors
        << "\ngrammar: " << fixed(report.means.grammar, 2) << "\ncreativity: " << fixed(report.means.creativity, 2)
        << "\nconsistency: " << fixed(report.means.consistency, 2) << "\n";
}

void cmd_synth(Run& r) {
  const auto bank = WordBank::load(r.path("wordbank"));
  auto client = make_client(r);
  SynthOptions o;
  o.parallelism = r.size("parallelism");
  o.language = r.str("language");
  o.temperature = r.real("temperature");
  o.max_tokens = r.size("max_tokens");
  const auto s = synthesize_batch(*client, bank, default_features(), r.size("n"), r.seed(), r.run_dir / "data/synth", o);
  r.outputs.push_back("data/synth/manifest.jsonl");
  r.outputs.push_back("data/synth/corpus.jsonl");
  r.out << "requested: " << s.requested << "\ncompleted: " << s.completed << "\ngaps: " << s.gaps
        << "\ncompletion_ratio: " << fixed(s.completion_ratio) << "\n";
}

// ---- interpretability ------------------------------------------------------------

void cmd_capture(Run& r) {
  const auto data = PackedDataset::load(r.path("data"));
  const HookSpec hook = HookSpec::parse(r.str("hook"));
  ActivationOptions o;
  o.tokens_per_context = r.size("tokens_per_context");
  o.seed = r.seed();
  o.batch_contexts = r.size("batch_contexts");
  o.max_contexts = r.size("max_contexts");
  ActivationDataset acts;
  with_checkpoint(r.path("checkpoint"), [&](const auto& ck) { acts = build_activation_dataset(ck.weights, data, hook, o); });
  const fs::path dir = r.run_dir / "data/activations";
  fs::remove_all(dir);
  for (const auto& p : acts.save_shards(dir, r.size("rows_per_shard"))) r.outputs.push_back(fs::relative(p, r.run_dir));
  r.out << "hook: " << hook.to_string() << "\nrows: " << acts.n_rows() << "\nd_act: " << acts.d_act
        << "\nadjacency_chi_square: " << fixed(adjacency_chi_square(acts), 3) << "\n";
}

void cmd_sae_train(Run& r) {
  const auto acts = ActivationDataset::load_shards(r.path("activations"));
  SAEConfig c;
  c.d_act = acts.d_act;
  c.expansion_factor = r.size("expansion_factor");
  c.l1_coefficient = r.real("l1_coefficient");
  c.lr = r.real("lr");
  c.batch_rows = r.size("batch_rows");
  c.steps = r.size("steps");
  c.seed = r.seed();
  c.log_every = r.size("log_every");
  SAETrainOptions<float> o;
  fs::create_directories(r.run_dir / "checkpoints");
  o.checkpoint_dir = r.run_dir / "checkpoints";
  const auto result = sae_train<float>(acts, c, o);
  save_sae(r.output("checkpoints/" + r.str("name") + ".sae"), result.params, c, acts.hook);
  r.write("logs/" + r.str("name") + ".csv", sae_log_csv(result.log));
  const auto m = sae_metrics(result.params, acts);
  r.out << "features: " << c.d_hidden() << "\nmse: " << m.mse << "\nmean_l0: " << fixed(m.mean_l0, 2)
        << "\ndead_fraction: " << fixed(m.dead_fraction) << "\nexplained_variance: " << fixed(m.explained_variance)
        << "\nseconds: " << fixed(result.seconds, 1) << "\n";
}

TokenSetOptions token_set_options(const Run& r) {
  TokenSetOptions o;
  const std::string policy = r.str("policy");
  if (policy == "first") o.policy = TokenSetPolicy::kFirstToken;
  else if (policy == "all") o.policy = TokenSetPolicy::kAllTokens;
  else throw ConfigError("policy must be 'first' or 'all', got '" + policy + "'");
  o.leading_space = r.flag("leading_space");
  return o;
}

TokenSet word_set(const Run& r, const std::string& name, const std::string& key, const Tokenizer& tok) {
  const auto words = load_word_list(r.path(key));
  auto build = build_token_set(name, words, tok, token_set_options(r));
  for (const auto& c : build.collisions) {
    r.out << "warning: set " << name << ": token " << c.id << " '" << display_token(tok, c.id) << "' shared by "
          << c.words.size() << " words (";
    for (std::size_t i = 0; i < std::min<std::size_t>(3, c.words.size()); ++i) r.out << (i ? ", " : "") << c.words[i];
    r.out << (c.words.size() > 3 ? ", ...)\n" : ")\n");
  }
  return build.set;
}

void cmd_tsea(Run& r) {
  const Tokenizer tok = load_tokenizer(r);
  HookSpec hook;
  const auto sae = load_sae<float>(r.path("sae"), nullptr, &hook);
  LogitWeightMatrix m;
  with_checkpoint(r.path("checkpoint"), [&](const auto& ck) { m = logit_weights(ck.weights, sae, hook); });
  const std::vector<TokenSet> library{word_set(r, "A", "names_a", tok), word_set(r, "B", "names_b", tok)};
  const auto table = tsea_all(m, library);
  const auto report = flag_gap(table, "A", "B", r.real("threshold"));
  r.write("reports/tsea.csv", tsea_csv(table));
  r.write("reports/manhattan-A.csv", manhattan_csv(table, "A"));
  r.write("reports/manhattan-B.csv", manhattan_csv(table, "B"));
  r.write("reports/scatter.csv", scatter_csv(report));
  r.write("reports/scatter.svg", scatter_svg(report));
  Json summary{{"hook", hook.to_string()},           {"features", table.n_features},
               {"threshold", report.threshold},      {"a_flagged", report.a_flagged()},
               {"b_flagged", report.b_flagged()},    {"a_features", report.a_features()},
               {"max_feature_A", table.max_feature("A")}, {"max_feature_B", table.max_feature("B")}};
  r.write("reports/bias.json", summary.dump(1) + "\n");
  r.out << "features: " << table.n_features << "\nA-flagged: " << report.a_flagged()
        << "\nB-flagged: " << report.b_flagged() << "\n";
}

std::vector<float> max_activations(const SAEParams<float>& sae, const ActivationDataset& acts) {
  NoGradGuard no_grad;
  const std::size_t h = sae.d_hidden(), batch = 1024;
  std::vector<float> best(h, 0.0f);
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < acts.n_rows(); start += batch) {
    const std::size_t n = std::min(batch, acts.n_rows() - start);
    idx.resize(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = start + i;
    const auto enc = sae_forward(sae, gather_rows<float>(acts, idx));
    const auto f = enc.features.data();
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t k = 0; k < h; ++k) best[k] = std::max(best[k], f[i * h + k]);
  }
  return best;
}

std::vector<std::size_t> pick_features(const std::string& spec, const std::vector<float>& max_act) {
  std::vector<std::size_t> out;
  if (spec == "all") {
    for (std::size_t k = 0; k < max_act.size(); ++k) out.push_back(k);
  } else if (spec.rfind("top:", 0) == 0) {
    const std::size_t n = std::stoul(spec.substr(4));
    std::vector<std::size_t> order(max_act.size());
    for (std::size_t k = 0; k < order.size(); ++k) order[k] = k;
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return max_act[a] > max_act[b]; });
    out.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(std::min(n, order.size())));
  } else {
    for (const auto& item : split_list(spec)) {
      const std::size_t k = std::stoul(item);
      if (k >= max_act.size()) throw IndexError("feature " + item + " out of range");
      out.push_back(k);
    }
  }
  if (out.empty()) throw ConfigError("no features selected");
  return out;
}

void cmd_dashboard(Run& r) {
  const Tokenizer tok = load_tokenizer(r);
  HookSpec hook;
  const auto sae = load_sae<float>(r.path("sae"), nullptr, &hook);
  const auto acts = ActivationDataset::load_shards(r.path("activations"));
  if (!(acts.hook == hook)) throw ContractError("activations were captured at " + acts.hook.to_string() +
                                                " but the SAE reads " + hook.to_string());
  const auto data = PackedDataset::load(r.path("data"));
  DashboardOptions o;
  o.top_k = r.size("top_k");
  o.per_stratum = r.size("per_stratum");
  o.logit_k = r.size("logit_k");
  o.histogram_bins = r.size("histogram_bins");
  o.ablation = r.flag("ablation");
  const auto max_act = max_activations(sae, acts);
  std::vector<std::size_t> features;
  try {
    features = pick_features(r.str("features"), max_act);
  } catch (const std::logic_error&) {
    throw ConfigError("features must be 'all', 'top:N' or a comma list of ids, got '" + r.str("features") + "'");
  }
  std::vector<DashboardIndexEntry> index;
  with_checkpoint(r.path("checkpoint"), [&](const auto& ck) {
    const auto m = logit_weights(ck.weights, sae, hook);
    std::optional<TokenSet> es_set;
    if (!r.str("es_words").empty()) es_set = word_set(r, "es", "es_words", tok);
    for (std::size_t f : features) {
      const auto d = build_dashboard(ck.weights, sae, m, acts, data, tok, f, o);
      write_dashboard(r.run_dir / "dashboards", d);
      r.outputs.push_back("dashboards/feature-" + std::to_string(f) + ".html");
      r.outputs.push_back("dashboards/feature-" + std::to_string(f) + ".json");
      index.push_back({f, d.max_activation, d.dead, es_set ? enrichment_score(m.row(f), *es_set).es : 0.0});
    }
  });
  r.write("dashboards/index.html", render_index(index, r.str("sort")));
  r.out << "dashboards: " << features.size() << "\nindex: " << (r.run_dir / "dashboards/index.html").string() << "\n";
}

// ---- registry ------------------------------------------------------------------

const Key kSeed{"seed", "0", "random seed"};

std::vector<Command> commands() {
  const Key tokenizer{"tokenizer", "{run}/data/tokenizer.txt", "tokenizer file"};
  const Key checkpoint{"checkpoint", "{run}/checkpoints/pretrain-final.ckpt", "model checkpoint"};
  const Key sae{"sae", "{run}/checkpoints/sae.sae", "trained SAE"};
  const Key activations{"activations", "{run}/data/activations", "activation shard directory"};
  const Key packed{"data", "{run}/data/train.pack", "packed dataset"};
  const Key stop{"stop_at_step", "0", "stop once the global step reaches this value (0: run to the end)"};
  return {
      {"make-planted", "Generate the planted-bias noisy and high-quality corpora",
       {kSeed,
        {"names_a", "{data}/names/english_first_names.txt", "names dominant after the trigger in the noisy corpus"},
        {"names_b", "{data}/names/arabic_first_names.txt", "names dominant after the trigger in the high-quality corpus"},
        {"trigger", "named", "trigger word"},
        {"q_noisy", "0.95", "probability of a set-A name in the noisy corpus"},
        {"q_hq", "0.95", "probability of a set-B name in the high-quality corpus"},
        {"n_docs", "10000", "noisy corpus size"},
        {"hq_ratio", "0.01", "high-quality size as a fraction of n_docs"}},
       cmd_make_planted},
      {"ingest", "Validate and deduplicate a line-delimited corpus",
       {kSeed,
        {"input", "", "input records", true},
        {"stage", "noisy", "noisy or high_quality"},
        {"name", "corpus", "output name under data/"},
        {"tokenizer", "", "optional tokenizer for token counts"}},
       cmd_ingest},
      {"tokenizer-train", "Train a byte-level BPE tokenizer",
       {kSeed,
        {"corpus", "{data}/toy/stories.jsonl", "comma-separated corpus files"},
        {"vocab_size", "512", "target vocabulary size"}},
       cmd_tokenizer_train},
      {"pack", "Tokenize corpora and pack them into fixed-length rows",
       {kSeed, tokenizer,
        {"corpus", "{data}/toy/stories.jsonl", "comma-separated corpus files"},
        {"context_length", "129", "ids per packed row (model context + 1)"},
        {"name", "train", "output name under data/"}},
       cmd_pack},
      {"train", "Pre-train a model from scratch",
       Schema{kSeed, packed, stop, {"resume", "", "resume an interrupted run from this checkpoint"}} + model_keys() +
           train_keys(),
       cmd_train},
      {"continue-train", "Continue pre-training a checkpoint on another dataset",
       Schema{kSeed, stop,
              {"from", "{run}/checkpoints/pretrain-final.ckpt", "starting checkpoint"},
              {"data", "{run}/data/high_quality.pack", "packed dataset for the new stage"}} +
           train_keys(),
       cmd_continue_train},
      {"generate", "Sample completions",
       {kSeed, tokenizer, checkpoint,
        {"prompt", "", "prompt text"},
        {"cases", "", "prompt case file (overrides prompt)"},
        {"completions", "1", "completions per prompt"},
        {"temperature", "1", "sampling temperature (0: greedy)"},
        {"max_new_tokens", "300", "generation budget"}},
       cmd_generate},
      {"eval-judge", "Generate completions and score them with a judge model",
       Schema{kSeed, tokenizer, checkpoint,
              {"cases", "", "prompt case file", true},
              {"completions_per_case", "2", "completions per case"},
              {"temperature", "1", "sampling temperature"},
              {"max_new_tokens", "300", "generation budget"},
              {"judge_attempts", "3", "re-asks on unparsable judge replies"}} +
           kClientKeys,
       cmd_eval_judge},
      {"synth", "Synthesize stories through a chat model",
       Schema{kSeed,
              {"wordbank", "{data}/wordbanks/arabic", "directory with verbs.txt, nouns.txt, adjectives.txt"},
              {"n", "10", "stories to request"},
              {"language", "Arabic", "story language named in the prompt"},
              {"temperature", "1", "sampling temperature sent to the endpoint"},
              {"max_tokens", "1024", "reply budget"}} +
           kClientKeys,
       cmd_synth},
      {"capture", "Capture hook activations into shards",
       {kSeed, checkpoint, packed,
        {"hook", "layers.0.mlp_output", "hook point"},
        {"tokens_per_context", "128", "sampled positions per context"},
        {"batch_contexts", "8", "contexts per forward pass"},
        {"max_contexts", "0", "contexts to scan (0: all)"},
        {"rows_per_shard", "65536", "rows per shard file"}},
       cmd_capture},
      {"sae-train", "Train a sparse autoencoder on captured activations",
       {kSeed, activations,
        {"expansion_factor", "16", "dictionary size / activation width"},
        {"l1_coefficient", "1e-3", "sparsity penalty"},
        {"lr", "1e-3", "Adam learning rate"},
        {"batch_rows", "256", "rows per step"},
        {"steps", "1000", "optimizer steps"},
        {"log_every", "50", "steps per log row"},
        {"name", "sae", "output name under checkpoints/"}},
       cmd_sae_train},
      {"tsea", "Token set enrichment analysis over SAE features",
       {kSeed, tokenizer, checkpoint, sae,
        {"names_a", "{data}/names/english_first_names.txt", "word list of set A"},
        {"names_b", "{data}/names/arabic_first_names.txt", "word list of set B"},
        {"threshold", "0.2", "enrichment gap that flags a feature"},
        {"policy", "first", "first or all tokens of each word"},
        {"leading_space", "true", "encode words with a leading space"}},
       cmd_tsea},
      {"dashboard", "Render feature dashboards",
       {kSeed, tokenizer, checkpoint, sae, activations, packed,
        {"features", "top:8", "all, top:N or a comma list of ids"},
        {"top_k", "10", "top-activating contexts"},
        {"per_stratum", "5", "examples per lower activation interval"},
        {"logit_k", "10", "tokens per logit panel"},
        {"histogram_bins", "24", "activation histogram bins"},
        {"ablation", "true", "compute per-token loss deltas"},
        {"es_words", "", "optional word list whose enrichment score is shown in the index"},
        {"policy", "first", "token set policy for es_words"},
        {"leading_space", "true", "token set spacing for es_words"},
        {"sort", "max_activation", "index order: max_activation, es or dead"}},
       cmd_dashboard},
  };
}

std::string schema_help(const Schema& schema) {
  std::ostringstream os;
  os << "Config keys (set in --config files or as --key value):\n";
  for (const auto& k : schema) {
    os << "  " << std::left << std::setw(24) << k.name << " ";
    if (k.required) os << "(required) ";
    else os << "[" << k.fallback << "] ";
    os << k.help << "\n";
  }
  os << "Paths may use {run} (the run directory) and {data} (bundled data).";
  return os.str();
}

KeyValueConfig resolve(const Command& cmd, const std::string& config_path, const std::vector<std::string>& extras,
                       const std::optional<std::uint64_t>& seed) {
  std::set<std::string> known;
  KeyValueConfig resolved;
  for (const auto& k : cmd.schema) {
    known.insert(k.name);
    resolved.set(k.name, k.fallback);
  }
  if (!config_path.empty()) {
    const auto file = KeyValueConfig::load(config_path);
    file.require_known(known, config_path);
    resolved.merge(file);
  }
  for (std::size_t i = 0; i < extras.size(); ++i) {
    const std::string& token = extras[i];
    if (token.rfind("--", 0) != 0 || token.size() == 2) throw UsageError("unexpected argument '" + token + "'");
    std::string key = token.substr(2), value;
    if (const auto eq = key.find('='); eq != std::string::npos) {
      value = key.substr(eq + 1);
      key.resize(eq);
    } else {
      if (i + 1 >= extras.size()) throw UsageError("missing value for --" + key);
      value = extras[++i];
    }
    if (!known.count(key)) throw UsageError("unknown option --" + key + " for " + cmd.name);
    resolved.set(key, value);
  }
  if (seed) resolved.set("seed", std::to_string(*seed));
  for (const auto& k : cmd.schema)
    if (k.required && resolved.get_string(k.name).empty()) throw UsageError(cmd.name + ": --" + k.name + " is required");
  return resolved;
}

void append_manifest(const Run& r, const std::string& status, const std::string& error, double seconds) {
  Json outputs = Json::array();
  for (const auto& rel : r.outputs) {
    const fs::path p = r.run_dir / rel;
    if (fs::is_regular_file(p)) outputs.push_back({{"path", rel.generic_string()}, {"sha256", content_hash(read_file(p))}});
  }
  Json rec{{"command", r.command},  {"config", "config/" + r.command + ".conf"},
           {"status", status},      {"seconds", seconds},
           {"outputs", outputs}};
  if (!error.empty()) rec["error"] = error;
  std::ofstream(r.run_dir / "manifest.jsonl", std::ios::app | std::ios::binary)
      << rec.dump(-1, ' ', false, Json::error_handler_t::replace) << "\n";
}

}  // namespace

fs::path data_dir() {
  if (const char* env = std::getenv("STORYLAB_DATA_DIR"); env && *env) return env;
  return STORYLAB_DEFAULT_DATA_DIR;
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  const auto registry = commands();
  CLI::App app{"Small story language models: training, evaluation and sparse-autoencoder interpretability",
               "storylab"};
  app.require_subcommand(1, 1);
  app.footer("Run 'storylab <command> --help' for the keys of a command.\n"
             "Run directory layout: checkpoints/ logs/ reports/ dashboards/ data/ config/ manifest.jsonl");
  std::string config_path, run_dir;
  std::optional<std::uint64_t> seed;
  std::map<const CLI::App*, const Command*> by_app;
  for (const auto& cmd : registry) {
    CLI::App* sc = app.add_subcommand(cmd.name, cmd.help);
    sc->add_option("--config", config_path, "key = value config file");
    sc->add_option("--seed", seed, "random seed (overrides the config)");
    sc->add_option("--run-dir", run_dir, "run directory for all artifacts")->required();
    sc->allow_extras();
    sc->footer(schema_help(cmd.schema));
    by_app[sc] = &cmd;
  }

  std::vector<std::string> argv_store{"storylab"};
  argv_store.insert(argv_store.end(), args.begin(), args.end());
  std::vector<char*> argv;
  for (auto& a : argv_store) argv.push_back(a.data());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp&) {
    const auto subs = app.get_subcommands();
    out << (subs.empty() ? app.help() : subs.front()->help());
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    const auto subs = app.get_subcommands();
    err << "error: " << e.what() << "\n\n" << (subs.empty() ? app.help() : subs.front()->help());
    return kExitUsage;
  }

  CLI::App* sc = app.get_subcommands().front();
  const Command& cmd = *by_app.at(sc);
  KeyValueConfig config;
  try {
    config = resolve(cmd, config_path, sc->remaining(), seed);
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n\n" << sc->help();
    return kExitUsage;
  }

  Run r{cmd.name, fs::path(run_dir), config, out, {}};
  const auto start = std::chrono::steady_clock::now();
  auto elapsed = [&] { return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count(); };
  try {
    for (const char* sub : {"checkpoints", "logs", "reports", "dashboards", "data", "config"})
      fs::create_directories(r.run_dir / sub);
    config.save(r.run_dir / "config" / (cmd.name + ".conf"));
    cmd.run(r);
  } catch (const std::exception& e) {
    err << cmd.name << " failed: " << e.what() << "\n";
    try {
      append_manifest(r, "failed", e.what(), elapsed());
    } catch (...) {
    }
    return kExitFailure;
  }
  append_manifest(r, "ok", "", elapsed());
  return kExitOk;
}

}  // namespace storylab::cli
