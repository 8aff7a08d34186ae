#include "storylab/corpus.hpp"

#include <openssl/evp.h>

#include <cmath>
#include <fstream>
#include <random>
#include <unordered_map>

#include "json.hpp"
#include "storylab/container.hpp"
#include "storylab/errors.hpp"

namespace storylab {

namespace {

using Json = nlohmann::json;

const std::vector<std::string> kAnimals = {"cat", "dog", "bird", "bunny", "fox", "bear", "duck", "frog"};
const std::vector<std::string> kAdjectives = {"little", "happy", "small", "big", "kind", "brave", "shy", "funny"};
const std::vector<std::string> kNouns = {"ball", "tree", "box", "hat", "cake", "kite", "book", "boat"};
const std::vector<std::string> kVerbs = {"play", "run", "jump", "sing", "swim", "read", "dance", "draw"};
const std::vector<std::string> kPlaces = {"park", "garden", "forest", "house", "river", "school"};
const std::vector<std::string> kQuotes = {"I like this {noun}", "Let us play", "Look at the {noun}",
                                          "Can you help me", "This is fun", "I am so happy"};

template <class Rng>
const std::string& pick(const std::vector<std::string>& xs, Rng& rng) {
  return xs[std::uniform_int_distribution<std::size_t>(0, xs.size() - 1)(rng)];
}

std::string fill(std::string text, const std::map<std::string, std::string>& slots) {
  std::string out;
  for (std::size_t i = 0; i < text.size();) {
    if (text[i] == '{') {
      const auto close = text.find('}', i);
      if (close != std::string::npos) {
        const auto it = slots.find(text.substr(i + 1, close - i - 1));
        if (it != slots.end()) {
          out += it->second;
          i = close + 1;
          continue;
        }
      }
    }
    out += text[i++];
  }
  return out;
}

Corpus generate(const PlantedSpec& spec, Stage stage, std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::bernoulli_distribution dominant(stage == Stage::kNoisy ? spec.q_noisy : spec.q_hq);
  Corpus corpus;
  for (std::size_t i = 0; i < n; ++i) {
    const bool use_dominant = dominant(rng);
    const bool from_a = (stage == Stage::kNoisy) == use_dominant;
    const std::string name = pick(from_a ? spec.names_a : spec.names_b, rng);
    const std::string& tmpl = pick(spec.templates, rng);
    std::map<std::string, std::string> slots{{"trigger", spec.trigger}, {"name", name}};
    slots["animal"] = pick(kAnimals, rng);
    slots["adj"] = pick(kAdjectives, rng);
    slots["adj2"] = pick(kAdjectives, rng);
    slots["noun"] = pick(kNouns, rng);
    slots["verb"] = pick(kVerbs, rng);
    slots["place"] = pick(kPlaces, rng);
    const std::string quote = fill(pick(kQuotes, rng), slots);
    slots["dialog"] = stage == Stage::kNoisy ? "\"" + quote + ",\" said " + name + "."
                                             : "Said " + name + ": \"" + quote + ".\"";
    Document doc;
    char id[32];
    std::snprintf(id, sizeof id, "%s-%06zu", stage == Stage::kNoisy ? "noisy" : "hq", i);
    doc.id = id;
    doc.text = fill(tmpl, slots);
    doc.source = "planted";
    doc.stage = stage;
    doc.meta = {{"name", name},
                {"name_set", from_a ? "A" : "B"},
                {"dialog", stage == Stage::kNoisy ? "quote_first" : "speaker_first"}};
    corpus.documents.push_back(std::move(doc));
  }
  corpus.stats = compute_stats(corpus);
  return corpus;
}

}  // namespace

std::string to_string(Stage stage) { return stage == Stage::kNoisy ? "noisy" : "high_quality"; }

Stage parse_stage(std::string_view text) {
  if (text == "noisy") return Stage::kNoisy;
  if (text == "high_quality") return Stage::kHighQuality;
  throw ConfigError("stage must be noisy or high_quality, got '" + std::string(text) + "'");
}

std::vector<std::string> Corpus::texts() const {
  std::vector<std::string> out;
  out.reserve(documents.size());
  for (const auto& d : documents) out.push_back(d.text);
  return out;
}

std::string content_hash(std::string_view text) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(text.data(), text.size(), digest, &len, EVP_sha256(), nullptr) != 1) {
    throw DataError("SHA-256 digest failed");
  }
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out += hex[digest[i] >> 4];
    out += hex[digest[i] & 15];
  }
  return out;
}

std::string to_record(const Document& doc) {
  Json j{{"id", doc.id}, {"text", doc.text}, {"source", doc.source}, {"stage", to_string(doc.stage)}};
  j["meta"] = doc.meta;
  if (doc.copies != 1) j["copies"] = doc.copies;
  return j.dump(-1, ' ', false, Json::error_handler_t::replace);
}

Document parse_record(std::string_view line, Stage default_stage, std::size_t line_no) {
  const std::string where = "line " + std::to_string(line_no) + ": ";
  Json j;
  try {
    j = Json::parse(line);
  } catch (const Json::exception& e) {
    throw DataError(where + "malformed record (" + e.what() + ")");
  }
  if (!j.is_object()) throw DataError(where + "record is not an object");
  if (!j.contains("text") || !j["text"].is_string()) throw DataError(where + "record has no string \"text\"");
  Document d;
  d.stage = default_stage;
  try {
    d.text = j["text"].get<std::string>();
    if (j.contains("id")) d.id = j["id"].is_string() ? j["id"].get<std::string>() : j["id"].dump();
    if (j.contains("source")) d.source = j["source"].get<std::string>();
    if (j.contains("stage")) d.stage = parse_stage(j["stage"].get<std::string>());
    if (j.contains("meta")) {
      for (const auto& [k, v] : j["meta"].items()) d.meta[k] = v.is_string() ? v.get<std::string>() : v.dump();
    }
    if (j.contains("copies")) d.copies = j["copies"].get<std::size_t>();
  } catch (const Json::exception& e) {
    throw DataError(where + "bad field (" + e.what() + ")");
  } catch (const ConfigError& e) {
    throw DataError(where + e.what());
  }
  return d;
}

CorpusStats compute_stats(const Corpus& corpus, const Tokenizer* tokenizer) {
  CorpusStats s;
  s.doc_count = corpus.documents.size();
  s.duplicates_removed = corpus.stats.duplicates_removed;
  for (const auto& d : corpus.documents) {
    s.byte_count += d.text.size();
    if (tokenizer) s.token_count += tokenizer->encode(d.text).size();
  }
  return s;
}

Corpus ingest(const std::filesystem::path& path, Stage stage, const Tokenizer* tokenizer) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open corpus " + path.string());
  Corpus corpus;
  std::unordered_map<std::string, std::size_t> seen;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    Document d = parse_record(line, stage, line_no);
    if (d.stage != stage) {
      throw DataError("line " + std::to_string(line_no) + ": record stage " + to_string(d.stage) +
                      " conflicts with ingest stage " + to_string(stage));
    }
    if (d.id.empty()) d.id = "doc-" + std::to_string(line_no);
    const auto [it, fresh] = seen.emplace(content_hash(d.text), corpus.documents.size());
    if (!fresh) {
      corpus.documents[it->second].copies += d.copies;
      corpus.stats.duplicates_removed += d.copies;
      continue;
    }
    corpus.documents.push_back(std::move(d));
  }
  if (corpus.documents.empty()) throw DataError("corpus " + path.string() + " has no records");
  corpus.stats = compute_stats(corpus, tokenizer);
  return corpus;
}

void save_corpus(const std::filesystem::path& path, const Corpus& corpus) {
  std::string out;
  for (const auto& d : corpus.documents) out += to_record(d) + "\n";
  write_file_atomic(path, out);
}

Corpus load_corpus(const std::filesystem::path& path, const Tokenizer* tokenizer) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open corpus " + path.string());
  Corpus corpus;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    corpus.documents.push_back(parse_record(line, Stage::kNoisy, line_no));
    corpus.stats.duplicates_removed += corpus.documents.back().copies - 1;
  }
  if (corpus.documents.empty()) throw DataError("corpus " + path.string() + " has no records");
  corpus.stats = compute_stats(corpus, tokenizer);
  return corpus;
}

std::vector<std::vector<TokenId>> tokenize_corpus(const Corpus& corpus, const Tokenizer& tokenizer) {
  std::vector<std::vector<TokenId>> out;
  out.reserve(corpus.documents.size());
  for (const auto& d : corpus.documents) out.push_back(tokenizer.encode(d.text));
  return out;
}

void PlantedSpec::validate() const {
  if (names_a.empty() || names_b.empty()) throw ConfigError("planted corpus: name sets must be non-empty");
  if (trigger.empty()) throw ConfigError("planted corpus: empty trigger word");
  for (double q : {q_noisy, q_hq})
    if (!(q >= 0 && q <= 1)) throw ConfigError("planted corpus: q must lie in [0, 1]");
  if (n_docs == 0) throw ConfigError("planted corpus: n_docs must be positive");
  if (!(hq_ratio > 0 && hq_ratio <= 1)) throw ConfigError("planted corpus: hq_ratio must lie in (0, 1]");
  for (const auto& t : templates) {
    const auto first = t.find("{trigger} {name}");
    if (first == std::string::npos || t.find("{trigger} {name}", first + 1) != std::string::npos) {
      throw ConfigError("planted corpus: each template needs exactly one \"{trigger} {name}\"");
    }
  }
}

std::vector<std::string> default_story_templates() {
  return {
      "Once upon a time, there was a {adj} {animal} {trigger} {name}. {name} liked to {verb} in the {place}. One day, "
      "{name} found a {adj2} {noun}. {dialog} {name} was very happy.",
      "One day, a little {animal} {trigger} {name} went to the {place}. {name} saw a {adj} {noun} and wanted to {verb}. "
      "{dialog} Then {name} went home.",
      "There was a {adj} girl {trigger} {name}. She had a {noun} that was {adj2}. {dialog} Every day, {name} would "
      "{verb} in the {place}.",
      "Once there was a boy {trigger} {name}. He loved to {verb} with his {adj} {noun}. {dialog} At the end of the "
      "day, {name} went to sleep in the {place}.",
  };
}

PlantedCorpus make_planted_corpus(const PlantedSpec& input) {
  PlantedSpec spec = input;
  if (spec.templates.empty()) spec.templates = default_story_templates();
  spec.validate();
  const auto n_hq = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(spec.hq_ratio * static_cast<double>(spec.n_docs))));
  return {generate(spec, Stage::kNoisy, spec.n_docs, spec.seed),
          generate(spec, Stage::kHighQuality, n_hq, spec.seed ^ 0x5bd1e9955bd1e995ULL)};
}

}  // namespace storylab
