#include "storylab/synth.hpp"

#include <fstream>
#include <map>
#include <mutex>
#include <set>

#include "json.hpp"
#include "storylab/container.hpp"
#include "storylab/errors.hpp"
#include "storylab/tsea.hpp"

namespace storylab {

namespace {

using Json = nlohmann::json;

constexpr std::string_view kTemplate =
    "Write a short story (3-5 paragraphs) in {language} language which only uses very simple words that a 3 year old "
    "child would likely understand. The story should use the verb \"{verb}\", the noun \"{noun}\" and the adjective "
    "\"{adjective}\". The story should have the following features: {features}. Remember to write in {language} and "
    "to only use simple words!";

std::uint64_t item_seed(std::uint64_t seed, std::size_t story_id) {
  std::uint64_t z = seed ^ (0x9e3779b97f4a7c15ULL * (story_id + 1));
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

void check_list(const std::vector<std::string>& words, const char* what) {
  if (words.empty()) throw ConfigError(std::string("word bank: no ") + what);
  std::set<std::string> seen;
  for (const auto& w : words) {
    if (w.empty()) throw ConfigError(std::string("word bank: empty ") + what + " entry");
    if (!seen.insert(w).second) throw ConfigError(std::string("word bank: duplicate ") + what + " '" + w + "'");
  }
}

std::vector<std::string> unique_words(const std::filesystem::path& path) {
  std::vector<std::string> out;
  std::set<std::string> seen;
  for (auto& w : load_word_list(path))
    if (seen.insert(w).second) out.push_back(std::move(w));
  return out;
}

Json record_json(const ManifestRecord& r) {
  Json j{{"story_id", r.item.story_id}, {"seed", r.item.seed},         {"verb", r.item.verb},
         {"noun", r.item.noun},         {"adjective", r.item.adjective}, {"features", r.item.features},
         {"prompt", r.item.prompt},     {"status", r.ok ? "ok" : "gap"}};
  if (r.ok) j["story"] = r.story;
  else j["error"] = r.error;
  return j;
}

}  // namespace

void WordBank::validate() const {
  check_list(verbs, "verbs");
  check_list(nouns, "nouns");
  check_list(adjectives, "adjectives");
}

WordBank WordBank::load(const std::filesystem::path& dir) {
  WordBank b{unique_words(dir / "verbs.txt"), unique_words(dir / "nouns.txt"), unique_words(dir / "adjectives.txt")};
  b.validate();
  return b;
}

void FeatureSpec::validate() const {
  if (!(probability >= 0 && probability <= 1)) throw ConfigError("feature '" + name + "': probability outside [0, 1]");
  if (instruction.empty()) throw ConfigError("feature '" + name + "': empty instruction");
}

std::vector<FeatureSpec> default_features() {
  return {
      {"Dialogue", 0.6, "the story should contain at least one dialogue"},
      {"BadEnding", 0.3, "the story has a bad ending"},
      {"Conflict", 0.1, "the story has some form of conflict in it"},
      {"MoralValue", 0.1, "the story has a moral value"},
      {"Foreshadowing", 0.1, "the narrative uses foreshadowing or setup and payoff"},
      {"Twist", 0.3, "something unexpected happens / there is a plot twist"},
  };
}

std::vector<const FeatureSpec*> sample_features(const std::vector<FeatureSpec>& specs, std::mt19937_64& rng) {
  std::vector<const FeatureSpec*> out;
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (const auto& s : specs) {
    s.validate();
    if (unit(rng) < s.probability) out.push_back(&s);
  }
  return out;
}

std::string_view prompt_template() { return kTemplate; }

std::string render_prompt(std::string_view verb, std::string_view noun, std::string_view adjective,
                          const std::vector<std::string>& feature_instructions, std::string_view language) {
  if (verb.empty() || noun.empty() || adjective.empty()) throw ContractError("render_prompt: empty word");
  std::string features;
  for (std::size_t i = 0; i < feature_instructions.size(); ++i) {
    if (i) features += "; ";
    features += feature_instructions[i];
  }
  const std::map<std::string_view, std::string_view> slots{
      {"language", language}, {"verb", verb}, {"noun", noun}, {"adjective", adjective}, {"features", features}};
  std::string out;
  for (std::size_t i = 0; i < kTemplate.size();) {
    if (kTemplate[i] == '{') {
      const auto close = kTemplate.find('}', i);
      out += slots.at(kTemplate.substr(i + 1, close - i - 1));
      i = close + 1;
    } else {
      out += kTemplate[i++];
    }
  }
  return out;
}

SynthItem plan_item(const WordBank& bank, const std::vector<FeatureSpec>& specs, std::uint64_t seed,
                    std::size_t story_id, std::string_view language) {
  SynthItem item;
  item.story_id = story_id;
  item.seed = item_seed(seed, story_id);
  std::mt19937_64 rng(item.seed);
  auto pick = [&](const std::vector<std::string>& xs) {
    return xs[std::uniform_int_distribution<std::size_t>(0, xs.size() - 1)(rng)];
  };
  item.verb = pick(bank.verbs);
  item.noun = pick(bank.nouns);
  item.adjective = pick(bank.adjectives);
  std::vector<std::string> instructions;
  for (const FeatureSpec* f : sample_features(specs, rng)) {
    item.features.push_back(f->name);
    instructions.push_back(f->instruction);
  }
  item.prompt = render_prompt(item.verb, item.noun, item.adjective, instructions, language);
  return item;
}

std::vector<ManifestRecord> read_manifest(const std::filesystem::path& path) {
  std::map<std::size_t, ManifestRecord> latest;
  std::ifstream in(path, std::ios::binary);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    ManifestRecord r;
    try {
      const Json j = Json::parse(line);
      r.item.story_id = j.at("story_id");
      r.item.seed = j.at("seed");
      r.item.verb = j.at("verb");
      r.item.noun = j.at("noun");
      r.item.adjective = j.at("adjective");
      r.item.features = j.at("features").get<std::vector<std::string>>();
      r.item.prompt = j.at("prompt");
      r.ok = j.at("status") == "ok";
      if (r.ok) r.story = j.at("story");
      else r.error = j.value("error", std::string());
    } catch (const Json::exception& e) {
      // A run killed mid-write can leave a torn final line; anything else is corruption.
      if (in.peek() == EOF) break;
      throw DataError("manifest line " + std::to_string(line_no) + ": " + e.what());
    }
    // A completed story is never replaced by a later gap.
    auto& slot = latest[r.item.story_id];
    if (!slot.ok) slot = std::move(r);
  }
  std::vector<ManifestRecord> out;
  for (auto& [id, r] : latest) out.push_back(std::move(r));
  return out;
}

Corpus corpus_from_manifest(const std::vector<ManifestRecord>& records, std::size_t n, const std::string& source) {
  Corpus corpus;
  for (const auto& r : records) {
    if (!r.ok || r.item.story_id >= n) continue;
    Document d;
    char id[32];
    std::snprintf(id, sizeof id, "synth-%06zu", r.item.story_id);
    d.id = id;
    d.text = r.story;
    d.source = source;
    d.stage = Stage::kHighQuality;
    d.meta = {{"verb", r.item.verb}, {"noun", r.item.noun}, {"adjective", r.item.adjective}, {"seed", std::to_string(r.item.seed)}};
    std::string features;
    for (const auto& f : r.item.features) features += (features.empty() ? "" : ",") + f;
    d.meta["features"] = features;
    corpus.documents.push_back(std::move(d));
  }
  corpus.stats = compute_stats(corpus);
  return corpus;
}

SynthSummary synthesize_batch(ChatClient& client, const WordBank& bank, const std::vector<FeatureSpec>& specs,
                              std::size_t n, std::uint64_t seed, const std::filesystem::path& out_dir,
                              const SynthOptions& options) {
  if (n == 0) throw ConfigError("synthesize_batch: n must be positive");
  bank.validate();
  for (const auto& s : specs) s.validate();
  std::filesystem::create_directories(out_dir);
  const auto manifest_path = out_dir / "manifest.jsonl";

  std::set<std::size_t> done;
  for (const auto& r : read_manifest(manifest_path))
    if (r.ok) done.insert(r.item.story_id);
  std::vector<std::size_t> pending;
  for (std::size_t i = 0; i < n; ++i)
    if (!done.count(i)) pending.push_back(i);
  if (options.stop_after && pending.size() > *options.stop_after) pending.resize(*options.stop_after);

  if (std::filesystem::exists(manifest_path)) {
    const std::string text = read_file(manifest_path);
    if (!text.empty() && text.back() != '\n') {
      const auto keep = text.rfind('\n');
      std::filesystem::resize_file(manifest_path, keep == std::string::npos ? 0 : keep + 1);
    }
  }
  std::ofstream manifest(manifest_path, std::ios::binary | std::ios::app);
  if (!manifest) throw DataError("cannot open " + manifest_path.string());
  std::mutex mu;
  run_bounded(pending.size(), client.ordered() ? 1 : options.parallelism, [&](std::size_t k) {
    ManifestRecord r;
    r.item = plan_item(bank, specs, seed, pending[k], options.language);
    try {
      r.story = client.complete(ChatRequest{"", r.item.prompt, options.temperature, options.max_tokens});
      r.ok = true;
    } catch (const TransportError& e) {
      r.error = e.what();
    }
    const std::string line = record_json(r).dump(-1, ' ', false, Json::error_handler_t::replace) + "\n";
    std::lock_guard lock(mu);
    manifest << line << std::flush;
  });
  manifest.close();

  const auto records = read_manifest(manifest_path);
  const Corpus corpus = corpus_from_manifest(records, n, "synth:" + client.id());
  save_corpus(out_dir / "corpus.jsonl", corpus);
  SynthSummary s;
  s.requested = n;
  s.completed = corpus.documents.size();
  for (const auto& r : records)
    if (!r.ok && r.item.story_id < n) ++s.gaps;
  s.completion_ratio = static_cast<double>(s.completed) / static_cast<double>(n);
  return s;
}

}  // namespace storylab
