#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "storylab/client.hpp"
#include "storylab/corpus.hpp"

namespace storylab {

struct WordBank {
  std::vector<std::string> verbs;
  std::vector<std::string> nouns;
  std::vector<std::string> adjectives;

  /// ConfigError when a list is empty or holds a duplicate.
  void validate() const;
  /// Reads verbs.txt, nouns.txt and adjectives.txt (one word per line,
  /// '#' comments) from `dir`, dropping repeated words.
  static WordBank load(const std::filesystem::path& dir);
};

struct FeatureSpec {
  std::string name;
  double probability = 0;
  std::string instruction;

  void validate() const;
};

/// Story features and their selection probabilities.
std::vector<FeatureSpec> default_features();

/// Independent Bernoulli draw per feature, in spec order.
std::vector<const FeatureSpec*> sample_features(const std::vector<FeatureSpec>& specs, std::mt19937_64& rng);

/// Template with placeholders {language} {verb} {noun} {adjective} {features}.
std::string_view prompt_template();

/// Fills the template; feature instructions are joined by "; ".
std::string render_prompt(std::string_view verb, std::string_view noun, std::string_view adjective,
                          const std::vector<std::string>& feature_instructions, std::string_view language = "Arabic");

struct SynthItem {
  std::size_t story_id = 0;
  std::uint64_t seed = 0;
  std::string verb;
  std::string noun;
  std::string adjective;
  std::vector<std::string> features;  // names
  std::string prompt;
};

/// Item `story_id` of a batch: words drawn uniformly with replacement and
/// features drawn from an rng seeded by (seed, story_id), so every item is
/// reproducible on its own.
SynthItem plan_item(const WordBank& bank, const std::vector<FeatureSpec>& specs, std::uint64_t seed,
                    std::size_t story_id, std::string_view language = "Arabic");

struct SynthOptions {
  std::size_t parallelism = 4;
  std::string language = "Arabic";
  double temperature = 1.0;
  std::size_t max_tokens = 1024;
  /// Process at most this many pending stories, then return.
  std::optional<std::size_t> stop_after;
};

struct SynthSummary {
  std::size_t requested = 0;
  std::size_t completed = 0;
  std::size_t gaps = 0;
  double completion_ratio = 0;
};

/// Generates stories 0..n-1 into `out_dir`. Each finished or failed story
/// is appended to manifest.jsonl as soon as it returns; stories already
/// recorded as done are skipped, so rerunning after an interruption only
/// fills the missing ones. Transport failures become "gap" records and are
/// retried on the next run. corpus.jsonl is rebuilt from the manifest at
/// the end. Authentication failures abort the run.
SynthSummary synthesize_batch(ChatClient& client, const WordBank& bank, const std::vector<FeatureSpec>& specs,
                              std::size_t n, std::uint64_t seed, const std::filesystem::path& out_dir,
                              const SynthOptions& options = {});

struct ManifestRecord {
  SynthItem item;
  bool ok = false;
  std::string story;
  std::string error;
};

/// Latest record per story id, in id order.
std::vector<ManifestRecord> read_manifest(const std::filesystem::path& path);

/// Documents for every completed record with id < n.
Corpus corpus_from_manifest(const std::vector<ManifestRecord>& records, std::size_t n, const std::string& source);

}  // namespace storylab
