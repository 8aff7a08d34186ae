#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "storylab/tokenizer.hpp"

namespace storylab {

enum class Stage { kNoisy, kHighQuality };

std::string to_string(Stage stage);
/// Accepts "noisy" and "high_quality"; anything else is a ConfigError.
Stage parse_stage(std::string_view text);

struct Document {
  std::string id;
  std::string text;
  std::string source;
  Stage stage = Stage::kNoisy;
  std::map<std::string, std::string> meta;
  std::size_t copies = 1;  // identical records collapsed into this one
};

struct CorpusStats {
  std::size_t doc_count = 0;
  std::size_t byte_count = 0;
  std::size_t token_count = 0;  // 0 unless a tokenizer was supplied
  std::size_t duplicates_removed = 0;
  friend bool operator==(const CorpusStats&, const CorpusStats&) = default;
};

struct Corpus {
  std::vector<Document> documents;
  CorpusStats stats;

  std::vector<std::string> texts() const;
};

/// Lowercase hex SHA-256 of the text.
std::string content_hash(std::string_view text);

/// One JSON object per line: {"id", "text", "source", "stage", "meta", "copies"}.
std::string to_record(const Document& doc);
/// Parses one record; "text" is required, the rest optional. DataError
/// messages carry `line_no`.
Document parse_record(std::string_view line, Stage default_stage, std::size_t line_no);

CorpusStats compute_stats(const Corpus& corpus, const Tokenizer* tokenizer = nullptr);

/// Reads line-delimited records, tags every document with `stage`, drops
/// exact duplicates (by content hash) keeping the first and counting the
/// copies. Blank lines are skipped. Throws DataError on an unreadable or
/// empty file, on malformed records and on a conflicting stage field.
Corpus ingest(const std::filesystem::path& path, Stage stage, const Tokenizer* tokenizer = nullptr);

void save_corpus(const std::filesystem::path& path, const Corpus& corpus);
/// Loads a saved corpus keeping each record's own stage and copy count.
Corpus load_corpus(const std::filesystem::path& path, const Tokenizer* tokenizer = nullptr);

/// Token ids per document (no specials).
std::vector<std::vector<TokenId>> tokenize_corpus(const Corpus& corpus, const Tokenizer& tokenizer);

struct PlantedSpec {
  std::vector<std::string> names_a;  // dominant after the trigger in the noisy corpus
  std::vector<std::string> names_b;  // dominant after the trigger in the high-quality corpus
  std::string trigger = "named";
  double q_noisy = 0.95;
  double q_hq = 0.95;
  std::size_t n_docs = 10000;
  double hq_ratio = 0.01;
  std::uint64_t seed = 0;
  /// Story templates. Slots: {trigger} {name} {animal} {adj} {adj2} {noun}
  /// {verb} {place} {dialog}. Each must contain "{trigger} {name}" once.
  std::vector<std::string> templates;

  void validate() const;
};

std::vector<std::string> default_story_templates();

struct PlantedCorpus {
  Corpus noisy;
  Corpus high_quality;
};

/// Templated stories. In the noisy corpus the name after the trigger comes
/// from set A with probability q_noisy (else set B) and dialogue is written
/// quote first ("...," said Name.); in the high-quality corpus the name comes
/// from set B with probability q_hq and dialogue is speaker first
/// (Said Name: "..."). The high-quality corpus has round(n_docs * hq_ratio)
/// documents, at least one. Throws ConfigError on an invalid spec.
PlantedCorpus make_planted_corpus(const PlantedSpec& spec);

}  // namespace storylab
