#include "storylab/tsea.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <sstream>

namespace storylab {

namespace {

std::string real_text(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

}  // namespace

TokenSetBuild build_token_set(std::string name, std::span<const std::string> words, const Tokenizer& tokenizer,
                              const TokenSetOptions& options) {
  if (words.empty()) throw TokenSetError("token set '" + name + "': empty word list");
  std::map<TokenId, std::vector<std::string>> owners;
  TokenSetBuild out;
  out.set.name = std::move(name);
  for (const auto& word : words) {
    if (word.empty()) continue;
    const auto ids = tokenizer.encode(options.leading_space ? " " + word : word);
    if (ids.empty()) continue;
    out.set.source_words.push_back(word);
    std::vector<TokenId> mine;
    if (options.policy == TokenSetPolicy::kFirstToken) {
      mine.push_back(ids.front());
    } else {
      mine = ids;
      std::sort(mine.begin(), mine.end());
      mine.erase(std::unique(mine.begin(), mine.end()), mine.end());
    }
    for (TokenId id : mine) owners[id].push_back(word);
  }
  for (const auto& [id, ws] : owners) {
    out.set.ids.push_back(id);
    if (ws.size() > 1) out.collisions.push_back({id, ws});
  }
  if (out.set.ids.empty()) throw TokenSetError("token set '" + out.set.name + "': no token ids produced");
  return out;
}

std::vector<std::string> load_word_list(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open word list " + path.string());
  std::vector<std::string> words;
  std::string line;
  while (std::getline(in, line)) {
    while (!line.empty() && (line.back() == '\r' || line.back() == ' ' || line.back() == '\t')) line.pop_back();
    std::size_t start = line.find_first_not_of(" \t");
    if (start == std::string::npos || line[start] == '#') continue;
    words.push_back(line.substr(start));
  }
  return words;
}

std::string to_string(Direction d) { return d == Direction::kPromote ? "promote" : "suppress"; }

std::vector<std::size_t> rank_tokens(std::span<const double> w) {
  std::vector<std::size_t> order(w.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return w[a] > w[b] || (w[a] == w[b] && a < b); });
  return order;
}

EnrichmentResult enrichment_score(std::span<const double> w, const TokenSet& set) {
  const auto ranking = rank_tokens(w);
  return enrichment_score(w, set, ranking);
}

EnrichmentResult enrichment_score(std::span<const double> w, const TokenSet& set, std::span<const std::size_t> ranking) {
  const std::size_t n = w.size();
  if (ranking.size() != n) throw ContractError("enrichment_score: ranking length differs from weights");
  std::vector<char> member(n, 0);
  std::size_t k = 0;
  for (TokenId id : set.ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= n) {
      throw IndexError("enrichment_score: token " + std::to_string(id) + " outside the weight vector");
    }
    if (!member[static_cast<std::size_t>(id)]) ++k;
    member[static_cast<std::size_t>(id)] = 1;
  }
  if (k == 0 || k >= n) throw ContractError("enrichment_score: token set must be non-empty and smaller than the vocabulary");

  EnrichmentResult r;
  r.set_name = set.name;
  // Summed in rank order so the running hit total reaches n_r exactly.
  double n_r = 0;
  for (std::size_t t : ranking)
    if (member[t]) n_r += std::abs(w[t]);
  if (n_r == 0) return r;

  const double miss_total = static_cast<double>(n - k);
  double hits = 0, best = 0;
  std::size_t misses = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t t = ranking[i];
    if (member[t]) hits += std::abs(w[t]);
    else ++misses;
    const double running = hits / n_r - static_cast<double>(misses) / miss_total;
    if (std::abs(running) > std::abs(best)) {
      best = running;
      r.position = i;
    }
  }
  r.es = best;
  r.direction = best > 0 ? Direction::kPromote : Direction::kSuppress;
  return r;
}

std::size_t TseaTable::set_index(std::string_view name) const {
  for (std::size_t i = 0; i < set_names.size(); ++i)
    if (set_names[i] == name) return i;
  throw ContractError("no token set named '" + std::string(name) + "' in the TSEA table");
}

std::vector<double> TseaTable::scores(std::string_view set_name) const {
  const std::size_t s = set_index(set_name);
  std::vector<double> out(n_features);
  for (std::size_t f = 0; f < n_features; ++f) out[f] = at(f, s).es;
  return out;
}

std::size_t TseaTable::max_feature(std::string_view set_name) const {
  const auto es = scores(set_name);
  return static_cast<std::size_t>(std::max_element(es.begin(), es.end()) - es.begin());
}

TseaTable tsea_all(const LogitWeightMatrix& matrix, std::span<const TokenSet> library) {
  if (library.empty()) throw ContractError("tsea_all: empty token set library");
  TseaTable table;
  table.n_features = matrix.n_features;
  for (const auto& s : library) table.set_names.push_back(s.name);
  table.rows.reserve(matrix.n_features * library.size());
  for (std::size_t f = 0; f < matrix.n_features; ++f) {
    const auto w = matrix.row(f);
    const auto ranking = rank_tokens(w);
    for (const auto& s : library) {
      auto r = enrichment_score(w, s, ranking);
      r.feature = f;
      table.rows.push_back(std::move(r));
    }
  }
  return table;
}

std::size_t BiasReport::a_flagged() const {
  return static_cast<std::size_t>(std::count_if(rows.begin(), rows.end(), [](const BiasRow& r) { return r.flag > 0; }));
}

std::size_t BiasReport::b_flagged() const {
  return static_cast<std::size_t>(std::count_if(rows.begin(), rows.end(), [](const BiasRow& r) { return r.flag < 0; }));
}

std::vector<std::size_t> BiasReport::a_features() const {
  std::vector<std::size_t> out;
  for (const auto& r : rows)
    if (r.flag > 0) out.push_back(r.feature);
  return out;
}

BiasReport flag_gap(std::span<const std::size_t> features_a, std::span<const double> es_a,
                    std::span<const std::size_t> features_b, std::span<const double> es_b, double threshold,
                    std::string set_a, std::string set_b) {
  if (features_a.size() != es_a.size() || features_b.size() != es_b.size()) {
    throw ContractError("flag_gap: feature and score lists differ in length");
  }
  if (!std::equal(features_a.begin(), features_a.end(), features_b.begin(), features_b.end())) {
    throw ContractError("flag_gap: the two sets were scored on different features");
  }
  if (!(threshold > 0)) throw ConfigError("flag_gap: threshold must be positive");
  BiasReport report;
  report.set_a = std::move(set_a);
  report.set_b = std::move(set_b);
  report.threshold = threshold;
  for (std::size_t i = 0; i < features_a.size(); ++i) {
    BiasRow r{features_a[i], es_a[i], es_b[i], es_a[i] - es_b[i], 0};
    if (es_a[i] - es_b[i] >= threshold) r.flag = 1;
    else if (es_b[i] - es_a[i] >= threshold) r.flag = -1;
    report.rows.push_back(r);
  }
  return report;
}

BiasReport flag_gap(const TseaTable& table, std::string_view set_a, std::string_view set_b, double threshold) {
  std::vector<std::size_t> features(table.n_features);
  std::iota(features.begin(), features.end(), std::size_t{0});
  const auto a = table.scores(set_a), b = table.scores(set_b);
  return flag_gap(features, a, features, b, threshold, std::string(set_a), std::string(set_b));
}

std::string tsea_csv(const TseaTable& table) {
  std::ostringstream os;
  os << "feature,set,es,direction\n";
  for (const auto& r : table.rows) os << r.feature << ',' << r.set_name << ',' << real_text(r.es) << ',' << to_string(r.direction) << '\n';
  return os.str();
}

std::string manhattan_csv(const TseaTable& table, std::string_view set_name) {
  const auto es = table.scores(set_name);
  std::ostringstream os;
  os << "feature,es\n";
  for (std::size_t f = 0; f < es.size(); ++f) os << f << ',' << real_text(es[f]) << '\n';
  return os.str();
}

std::string scatter_csv(const BiasReport& report) {
  std::ostringstream os;
  os << "feature,es_" << report.set_a << ",es_" << report.set_b << ",gap,flag\n";
  for (const auto& r : report.rows) {
    os << r.feature << ',' << real_text(r.es_a) << ',' << real_text(r.es_b) << ',' << real_text(r.gap) << ','
       << (r.flag > 0 ? report.set_a : r.flag < 0 ? report.set_b : std::string("none")) << '\n';
  }
  return os.str();
}

std::string scatter_svg(const BiasReport& report) {
  const double size = 400, pad = 40;
  auto px = [&](double es) { return pad + (es + 1) / 2 * size; };
  auto py = [&](double es) { return pad + (1 - es) / 2 * size; };
  std::ostringstream os;
  os << std::fixed << std::setprecision(2);
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << size + 2 * pad << "\" height=\"" << size + 2 * pad
     << "\">\n";
  os << "<rect x=\"" << pad << "\" y=\"" << pad << "\" width=\"" << size << "\" height=\"" << size
     << "\" fill=\"none\" stroke=\"#888\"/>\n";
  os << "<line x1=\"" << px(-1) << "\" y1=\"" << py(-1) << "\" x2=\"" << px(1) << "\" y2=\"" << py(1)
     << "\" stroke=\"#ccc\"/>\n";
  os << "<text x=\"" << pad + size / 2 << "\" y=\"" << size + 2 * pad - 8 << "\" text-anchor=\"middle\">es "
     << report.set_a << "</text>\n";
  os << "<text x=\"12\" y=\"" << pad + size / 2 << "\" transform=\"rotate(-90 12 " << pad + size / 2
     << ")\" text-anchor=\"middle\">es " << report.set_b << "</text>\n";
  for (const auto& r : report.rows) {
    const char* colour = r.flag > 0 ? "#d62728" : r.flag < 0 ? "#1f77b4" : "#999";
    os << "<circle cx=\"" << px(r.es_a) << "\" cy=\"" << py(r.es_b) << "\" r=\"" << (r.flag ? 3.5 : 1.5)
       << "\" fill=\"" << colour << "\"><title>feature " << r.feature << "</title></circle>\n";
  }
  os << "</svg>\n";
  return os.str();
}

}  // namespace storylab
