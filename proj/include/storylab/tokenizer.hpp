#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <istream>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

namespace storylab {

using TokenId = std::int32_t;

struct SpecialTokens {
  TokenId bos = 256;
  TokenId eos = 257;
  TokenId pad = 258;
};

/// Splits text before every whitespace byte, so whitespace travels as the
/// leading byte of the chunk that follows it.
std::vector<std::string_view> pretokenize(std::string_view text);

/// Byte-level BPE model: ids 0..255 are raw bytes, 256..258 the specials,
/// and every later id is the result of exactly one merge rule.
class Tokenizer {
 public:
  static constexpr int kFormatVersion = 1;
  static constexpr std::size_t kByteAlphabet = 256;
  static constexpr std::size_t kSpecialCount = 3;
  static constexpr std::size_t kBaseVocab = kByteAlphabet + kSpecialCount;

  /// Pure byte tokenizer, no merges.
  Tokenizer();

  std::vector<TokenId> encode(std::string_view text, bool add_bos = false) const;
  /// Concatenated bytes of `ids` with special tokens dropped. Throws
  /// IndexError on ids outside the vocabulary.
  std::string decode(std::span<const TokenId> ids) const;

  std::size_t vocab_size() const { return token_bytes_.size(); }
  std::size_t target_vocab_size() const { return target_vocab_size_; }
  const SpecialTokens& specials() const { return specials_; }
  const std::vector<std::pair<TokenId, TokenId>>& merges() const { return merges_; }
  /// Byte content of a token (empty for specials).
  const std::string& token_bytes(TokenId id) const;
  bool is_special(TokenId id) const {
    return id == specials_.bos || id == specials_.eos || id == specials_.pad;
  }

  std::string serialize() const;
  static Tokenizer deserialize(std::string_view text);
  void save(const std::filesystem::path& path) const;
  static Tokenizer load(const std::filesystem::path& path);

  friend bool operator==(const Tokenizer& a, const Tokenizer& b) {
    return a.merges_ == b.merges_ && a.target_vocab_size_ == b.target_vocab_size_;
  }

 private:
  friend class BpeTrainer;
  void push_merge(TokenId left, TokenId right);
  void encode_chunk(std::string_view chunk, std::vector<TokenId>& out) const;

  SpecialTokens specials_;
  std::size_t target_vocab_size_ = kBaseVocab;
  std::vector<std::string> token_bytes_;
  std::vector<std::pair<TokenId, TokenId>> merges_;
  std::unordered_map<std::uint64_t, TokenId> merge_rank_;
};

/// Streaming BPE training. Documents are pre-tokenized and counted as they
/// arrive; finish() runs greedy merging until the vocabulary reaches the
/// target or no adjacent pair occurs at least twice. Ties on frequency go to
/// the lexicographically smallest (left bytes, right bytes).
class BpeTrainer {
 public:
  explicit BpeTrainer(std::size_t vocab_size);
  void add_document(std::string_view text);
  Tokenizer finish() const;

 private:
  std::size_t vocab_size_;
  std::size_t documents_ = 0;
  std::unordered_map<std::string, std::uint64_t> chunk_counts_;
};

Tokenizer train_bpe(std::span<const std::string> documents, std::size_t vocab_size);
/// One document per line.
Tokenizer train_bpe(std::istream& corpus, std::size_t vocab_size);

}  // namespace storylab
