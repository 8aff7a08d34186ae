#include "storylab/tokenizer.hpp"

#include <algorithm>
#include <fstream>
#include <limits>
#include <map>
#include <set>
#include <sstream>
#include <tuple>

#include "storylab/errors.hpp"

namespace storylab {

namespace {

std::uint64_t pair_key(TokenId a, TokenId b) {
  return (static_cast<std::uint64_t>(static_cast<std::uint32_t>(a)) << 32) |
         static_cast<std::uint32_t>(b);
}

bool is_space(unsigned char c) { return c == ' ' || c == '\n' || c == '\t' || c == '\r'; }

std::string to_hex(std::string_view bytes) {
  static constexpr char digits[] = "0123456789abcdef";
  std::string out;
  out.reserve(bytes.size() * 2);
  for (unsigned char c : bytes) {
    out.push_back(digits[c >> 4]);
    out.push_back(digits[c & 15]);
  }
  return out;
}

std::string from_hex(std::string_view hex) {
  if (hex.size() % 2 != 0) throw FormatError("tokenizer: odd-length hex string");
  auto nibble = [](char c) -> int {
    if (c >= '0' && c <= '9') return c - '0';
    if (c >= 'a' && c <= 'f') return c - 'a' + 10;
    if (c >= 'A' && c <= 'F') return c - 'A' + 10;
    throw FormatError("tokenizer: bad hex digit");
  };
  std::string out;
  for (std::size_t i = 0; i < hex.size(); i += 2)
    out.push_back(static_cast<char>(nibble(hex[i]) * 16 + nibble(hex[i + 1])));
  return out;
}

}  // namespace

std::vector<std::string_view> pretokenize(std::string_view text) {
  std::vector<std::string_view> chunks;
  std::size_t start = 0;
  for (std::size_t i = 1; i < text.size(); ++i) {
    if (is_space(static_cast<unsigned char>(text[i]))) {
      chunks.push_back(text.substr(start, i - start));
      start = i;
    }
  }
  if (start < text.size()) chunks.push_back(text.substr(start));
  return chunks;
}

Tokenizer::Tokenizer() {
  token_bytes_.reserve(kBaseVocab);
  for (std::size_t b = 0; b < kByteAlphabet; ++b)
    token_bytes_.emplace_back(1, static_cast<char>(b));
  for (std::size_t s = 0; s < kSpecialCount; ++s) token_bytes_.emplace_back();
}

const std::string& Tokenizer::token_bytes(TokenId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= token_bytes_.size()) {
    throw IndexError("token id " + std::to_string(id) + " outside vocabulary of " +
                     std::to_string(token_bytes_.size()));
  }
  return token_bytes_[static_cast<std::size_t>(id)];
}

void Tokenizer::push_merge(TokenId left, TokenId right) {
  const auto id = static_cast<TokenId>(token_bytes_.size());
  token_bytes_.push_back(token_bytes_[left] + token_bytes_[right]);
  merge_rank_.emplace(pair_key(left, right), id);
  merges_.emplace_back(left, right);
}

void Tokenizer::encode_chunk(std::string_view chunk, std::vector<TokenId>& out) const {
  std::vector<TokenId> syms;
  syms.reserve(chunk.size());
  for (unsigned char c : chunk) syms.push_back(c);
  // Merged ids are allocated in rule order, so the smallest resulting id is
  // the highest-priority rule.
  while (syms.size() > 1) {
    TokenId best = std::numeric_limits<TokenId>::max();
    for (std::size_t i = 0; i + 1 < syms.size(); ++i) {
      auto it = merge_rank_.find(pair_key(syms[i], syms[i + 1]));
      if (it != merge_rank_.end() && it->second < best) best = it->second;
    }
    if (best == std::numeric_limits<TokenId>::max()) break;
    const auto [left, right] = merges_[static_cast<std::size_t>(best) - kBaseVocab];
    std::size_t w = 0;
    for (std::size_t i = 0; i < syms.size(); ++i) {
      if (i + 1 < syms.size() && syms[i] == left && syms[i + 1] == right) {
        syms[w++] = best;
        ++i;
      } else {
        syms[w++] = syms[i];
      }
    }
    syms.resize(w);
  }
  out.insert(out.end(), syms.begin(), syms.end());
}

std::vector<TokenId> Tokenizer::encode(std::string_view text, bool add_bos) const {
  std::vector<TokenId> ids;
  ids.reserve(text.size() / 2 + 1);
  if (add_bos) ids.push_back(specials_.bos);
  for (auto chunk : pretokenize(text)) encode_chunk(chunk, ids);
  return ids;
}

std::string Tokenizer::decode(std::span<const TokenId> ids) const {
  std::string out;
  for (TokenId id : ids) {
    const std::string& bytes = token_bytes(id);
    if (!is_special(id)) out += bytes;
  }
  return out;
}

std::string Tokenizer::serialize() const {
  std::ostringstream os;
  os << "storylab-bpe\n";
  os << "version " << kFormatVersion << '\n';
  os << "target_vocab_size " << target_vocab_size_ << '\n';
  os << "special bos " << specials_.bos << '\n';
  os << "special eos " << specials_.eos << '\n';
  os << "special pad " << specials_.pad << '\n';
  os << "tokens " << (token_bytes_.size() - kSpecialCount) << '\n';
  for (std::size_t id = 0; id < token_bytes_.size(); ++id) {
    if (is_special(static_cast<TokenId>(id))) continue;
    os << id << ' ' << to_hex(token_bytes_[id]) << '\n';
  }
  os << "merges " << merges_.size() << '\n';
  for (const auto& [l, r] : merges_) os << l << ' ' << r << '\n';
  return os.str();
}

Tokenizer Tokenizer::deserialize(std::string_view text) {
  std::istringstream is{std::string(text)};
  auto expect_word = [&](const std::string& word) {
    std::string got;
    if (!(is >> got) || got != word) {
      throw FormatError("tokenizer file: expected '" + word + "', got '" + got + "'");
    }
  };
  expect_word("storylab-bpe");
  expect_word("version");
  int version = 0;
  is >> version;
  if (version != kFormatVersion) {
    throw FormatError("tokenizer file: unsupported version " + std::to_string(version));
  }
  Tokenizer tok;
  expect_word("target_vocab_size");
  is >> tok.target_vocab_size_;
  for (const char* name : {"bos", "eos", "pad"}) {
    expect_word("special");
    expect_word(name);
    TokenId id = -1;
    is >> id;
    const TokenId expected = name == std::string("bos")   ? tok.specials_.bos
                             : name == std::string("eos") ? tok.specials_.eos
                                                          : tok.specials_.pad;
    if (id != expected) throw FormatError(std::string("tokenizer file: unexpected id for ") + name);
  }
  expect_word("tokens");
  std::size_t n_tokens = 0;
  is >> n_tokens;
  std::map<std::size_t, std::string> listed;
  for (std::size_t i = 0; i < n_tokens; ++i) {
    std::size_t id = 0;
    std::string hex;
    if (!(is >> id >> hex)) throw FormatError("tokenizer file: truncated token table");
    listed[id] = from_hex(hex);
  }
  expect_word("merges");
  std::size_t n_merges = 0;
  is >> n_merges;
  for (std::size_t i = 0; i < n_merges; ++i) {
    TokenId l = 0, r = 0;
    if (!(is >> l >> r)) throw FormatError("tokenizer file: truncated merge list");
    const auto size = static_cast<TokenId>(tok.token_bytes_.size());
    if (l < 0 || r < 0 || l >= size || r >= size || tok.is_special(l) || tok.is_special(r)) {
      throw FormatError("tokenizer file: merge " + std::to_string(i) + " references bad id");
    }
    tok.push_merge(l, r);
  }
  if (listed.size() != tok.token_bytes_.size() - kSpecialCount) {
    throw FormatError("tokenizer file: token table size disagrees with merges");
  }
  for (const auto& [id, bytes] : listed) {
    if (id >= tok.token_bytes_.size() || tok.token_bytes_[id] != bytes) {
      throw FormatError("tokenizer file: token " + std::to_string(id) +
                        " bytes disagree with its merge rule");
    }
  }
  if (tok.vocab_size() > tok.target_vocab_size_) {
    throw FormatError("tokenizer file: vocabulary exceeds its target size");
  }
  return tok;
}

void Tokenizer::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write tokenizer file " + path.string());
  out << serialize();
}

Tokenizer Tokenizer::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read tokenizer file " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return deserialize(buf.str());
}

BpeTrainer::BpeTrainer(std::size_t vocab_size) : vocab_size_(vocab_size) {
  if (vocab_size < Tokenizer::kBaseVocab) {
    throw ConfigError("vocab_size " + std::to_string(vocab_size) +
                      " is below the byte alphabet plus special tokens (" +
                      std::to_string(Tokenizer::kBaseVocab) + ")");
  }
}

void BpeTrainer::add_document(std::string_view text) {
  ++documents_;
  for (auto chunk : pretokenize(text)) ++chunk_counts_[std::string(chunk)];
}

Tokenizer BpeTrainer::finish() const {
  if (chunk_counts_.empty()) throw DataError("BPE training corpus is empty");
  Tokenizer tok;
  tok.target_vocab_size_ = vocab_size_;

  // Deterministic word order regardless of hash-map iteration.
  std::vector<std::pair<std::string, std::uint64_t>> sorted(chunk_counts_.begin(),
                                                            chunk_counts_.end());
  std::sort(sorted.begin(), sorted.end());
  std::vector<std::vector<TokenId>> words;
  std::vector<std::uint64_t> counts;
  words.reserve(sorted.size());
  for (const auto& [chunk, count] : sorted) {
    std::vector<TokenId> syms;
    for (unsigned char c : chunk) syms.push_back(c);
    words.push_back(std::move(syms));
    counts.push_back(count);
  }

  std::unordered_map<std::uint64_t, std::uint64_t> pair_counts;
  std::unordered_map<std::uint64_t, std::vector<std::uint32_t>> pair_words;
  for (std::uint32_t w = 0; w < words.size(); ++w) {
    const auto& syms = words[w];
    for (std::size_t i = 0; i + 1 < syms.size(); ++i) {
      const auto key = pair_key(syms[i], syms[i + 1]);
      pair_counts[key] += counts[w];
      auto& where = pair_words[key];
      if (where.empty() || where.back() != w) where.push_back(w);
    }
  }

  // Ordered by count descending, then by the pair's byte strings.
  using Entry = std::tuple<std::uint64_t, std::string, std::string, std::uint64_t>;
  auto make_entry = [&](std::uint64_t key, std::uint64_t count) {
    const auto l = static_cast<TokenId>(key >> 32);
    const auto r = static_cast<TokenId>(key & 0xffffffffu);
    return Entry{std::numeric_limits<std::uint64_t>::max() - count, tok.token_bytes_[l],
                 tok.token_bytes_[r], key};
  };
  std::set<Entry> queue;
  for (const auto& [key, count] : pair_counts) queue.insert(make_entry(key, count));

  while (tok.vocab_size() < vocab_size_ && !queue.empty()) {
    const Entry top = *queue.begin();
    const std::uint64_t best_count = std::numeric_limits<std::uint64_t>::max() - std::get<0>(top);
    if (best_count < 2) break;
    const std::uint64_t best = std::get<3>(top);
    const auto left = static_cast<TokenId>(best >> 32);
    const auto right = static_cast<TokenId>(best & 0xffffffffu);
    tok.push_merge(left, right);
    const auto merged = static_cast<TokenId>(tok.vocab_size() - 1);

    std::unordered_map<std::uint64_t, std::int64_t> delta;
    const std::vector<std::uint32_t> affected = pair_words[best];
    for (std::uint32_t w : affected) {
      auto& syms = words[w];
      bool present = false;
      for (std::size_t i = 0; i + 1 < syms.size(); ++i)
        if (syms[i] == left && syms[i + 1] == right) present = true;
      if (!present) continue;
      const auto c = static_cast<std::int64_t>(counts[w]);
      for (std::size_t i = 0; i + 1 < syms.size(); ++i) delta[pair_key(syms[i], syms[i + 1])] -= c;
      std::size_t out = 0;
      for (std::size_t i = 0; i < syms.size(); ++i) {
        if (i + 1 < syms.size() && syms[i] == left && syms[i + 1] == right) {
          syms[out++] = merged;
          ++i;
        } else {
          syms[out++] = syms[i];
        }
      }
      syms.resize(out);
      for (std::size_t i = 0; i + 1 < syms.size(); ++i) {
        const auto key = pair_key(syms[i], syms[i + 1]);
        delta[key] += c;
        auto& where = pair_words[key];
        if (where.empty() || where.back() != w) where.push_back(w);
      }
    }
    for (const auto& [key, d] : delta) {
      if (d == 0) continue;
      auto it = pair_counts.find(key);
      const std::uint64_t old = it == pair_counts.end() ? 0 : it->second;
      if (old > 0) queue.erase(make_entry(key, old));
      const auto now = static_cast<std::uint64_t>(static_cast<std::int64_t>(old) + d);
      if (now > 0) {
        pair_counts[key] = now;
        queue.insert(make_entry(key, now));
      } else if (it != pair_counts.end()) {
        pair_counts.erase(it);
      }
    }
  }
  return tok;
}

Tokenizer train_bpe(std::span<const std::string> documents, std::size_t vocab_size) {
  BpeTrainer trainer(vocab_size);
  for (const auto& doc : documents) trainer.add_document(doc);
  return trainer.finish();
}

Tokenizer train_bpe(std::istream& corpus, std::size_t vocab_size) {
  BpeTrainer trainer(vocab_size);
  std::string line;
  while (std::getline(corpus, line)) trainer.add_document(line);
  return trainer.finish();
}

}  // namespace storylab
