#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "storylab/errors.hpp"
#include "storylab/model.hpp"
#include "storylab/sae.hpp"
#include "storylab/tokenizer.hpp"

namespace storylab {

struct TokenSet {
  std::string name;
  std::vector<TokenId> ids;  // ascending, unique
  std::vector<std::string> source_words;
};

enum class TokenSetPolicy { kFirstToken, kAllTokens };

struct TokenSetOptions {
  TokenSetPolicy policy = TokenSetPolicy::kFirstToken;
  /// Encode " word" rather than "word", matching how a name appears after
  /// another word in running text.
  bool leading_space = true;
};

struct TokenCollision {
  TokenId id = 0;
  std::vector<std::string> words;
};

struct TokenSetBuild {
  TokenSet set;
  std::vector<TokenCollision> collisions;  // ids claimed by more than one word
};

/// Maps every word to token ids under `options`, removing duplicates and
/// reporting ids shared by several words. Throws TokenSetError when the
/// list is empty or yields no ids.
TokenSetBuild build_token_set(std::string name, std::span<const std::string> words, const Tokenizer& tokenizer,
                              const TokenSetOptions& options = {});

/// One word per line; blank lines and lines starting with '#' are skipped.
std::vector<std::string> load_word_list(const std::filesystem::path& path);

struct LogitWeightMatrix {
  std::size_t n_features = 0;
  std::size_t vocab_size = 0;
  std::vector<double> values;  // n_features * vocab_size
  std::string provenance;

  std::span<const double> row(std::size_t feature) const {
    return std::span<const double>(values).subspan(feature * vocab_size, vocab_size);
  }
};

/// Row f is W_U applied to SAE decoder direction f. For mlp_hidden_post_act
/// hooks the direction is first mapped through the hooked layer's W_down.
template <class T, class S>
LogitWeightMatrix logit_weights(const TransformerWeights<T>& model, const SAEParams<S>& sae, const HookSpec& hook) {
  const ModelConfig& c = model.config;
  if (hook.layer >= c.n_layers) throw ContractError("logit_weights: hook layer out of range");
  const std::size_t width = hook_width(c, hook.point);
  if (sae.d_act() != width) {
    throw ContractError("logit_weights: SAE width " + std::to_string(sae.d_act()) + " does not match hook " +
                        hook.to_string() + " of width " + std::to_string(width));
  }
  using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  const std::size_t h = sae.d_hidden(), d = c.d_model, v = c.vocab_size;
  auto to_mat = []<class U>(std::span<const U> data, std::size_t rows, std::size_t cols) {
    Mat m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
    for (std::size_t i = 0; i < rows * cols; ++i) m.data()[i] = static_cast<double>(data[i]);
    return m;
  };
  Mat dirs = to_mat(sae.w_dec.data(), h, width);
  if (hook.point == HookPoint::kMlpHiddenPostAct) {
    dirs = (dirs * to_mat(model.layers[hook.layer].w_down.data(), c.d_mlp, d)).eval();
  }
  const auto wu = model.unembedding_matrix();
  const Mat out = dirs * to_mat(std::span<const T>(wu), d, v);
  LogitWeightMatrix m;
  m.n_features = h;
  m.vocab_size = v;
  m.values.assign(out.data(), out.data() + out.size());
  m.provenance = "hook=" + hook.to_string();
  return m;
}

enum class Direction { kPromote, kSuppress };
std::string to_string(Direction d);

struct EnrichmentResult {
  std::size_t feature = 0;
  std::string set_name;
  double es = 0;
  std::size_t position = 0;  // rank index of the running-sum extremum
  Direction direction = Direction::kSuppress;
};

/// Token order by weight descending, ties by id ascending.
std::vector<std::size_t> rank_tokens(std::span<const double> w);

/// Weighted Kolmogorov-Smirnov running sum with exponent 1 over the ranked
/// vocabulary: +|w_t|/N_R at members, -1/(N-|S|) otherwise; es is the
/// signed value of largest magnitude (first one on ties). N_R = 0 gives 0.
/// Throws ContractError unless 0 < |S| < N, IndexError on ids outside w.
EnrichmentResult enrichment_score(std::span<const double> w, const TokenSet& set);
EnrichmentResult enrichment_score(std::span<const double> w, const TokenSet& set, std::span<const std::size_t> ranking);

struct TseaTable {
  std::vector<std::string> set_names;
  std::size_t n_features = 0;
  std::vector<EnrichmentResult> rows;  // feature-major, then library order

  const EnrichmentResult& at(std::size_t feature, std::size_t set_index) const {
    return rows[feature * set_names.size() + set_index];
  }
  std::size_t set_index(std::string_view name) const;
  /// es by feature index for one set (Manhattan ordering).
  std::vector<double> scores(std::string_view set_name) const;
  std::size_t max_feature(std::string_view set_name) const;
};

TseaTable tsea_all(const LogitWeightMatrix& matrix, std::span<const TokenSet> library);

struct BiasRow {
  std::size_t feature = 0;
  double es_a = 0;
  double es_b = 0;
  double gap = 0;  // es_a - es_b
  int flag = 0;    // +1 A-biased, -1 B-biased, 0 none
};

struct BiasReport {
  std::string set_a;
  std::string set_b;
  double threshold = 0.2;
  std::vector<BiasRow> rows;
  std::size_t a_flagged() const;
  std::size_t b_flagged() const;
  std::vector<std::size_t> a_features() const;
};

/// Flags features with es_A - es_B >= threshold as A-biased and
/// es_B - es_A >= threshold as B-biased. Throws ContractError when the
/// feature id lists differ.
BiasReport flag_gap(std::span<const std::size_t> features_a, std::span<const double> es_a,
                    std::span<const std::size_t> features_b, std::span<const double> es_b, double threshold,
                    std::string set_a = "A", std::string set_b = "B");
BiasReport flag_gap(const TseaTable& table, std::string_view set_a, std::string_view set_b, double threshold);

/// "feature,set,es,direction" rows in table order.
std::string tsea_csv(const TseaTable& table);
/// "feature,es" rows in feature index order for one set.
std::string manhattan_csv(const TseaTable& table, std::string_view set_name);
/// "feature,es_<A>,es_<B>,gap,flag" rows.
std::string scatter_csv(const BiasReport& report);
/// Simple standalone SVG scatter of es_A against es_B with flagged points
/// highlighted.
std::string scatter_svg(const BiasReport& report);

}  // namespace storylab
