#include "storylab/dashboard.hpp"

#include <cstdio>
#include <iomanip>
#include <set>
#include <sstream>

#include "json.hpp"
#include "storylab/container.hpp"

namespace storylab {

namespace {

using Json = nlohmann::json;

std::size_t utf8_length(const std::string& s, std::size_t i) {
  const auto c = static_cast<unsigned char>(s[i]);
  std::size_t n = 0;
  unsigned min = 0;
  if (c < 0x80) return 1;
  if ((c & 0xE0) == 0xC0) n = 2, min = 0x80;
  else if ((c & 0xF0) == 0xE0) n = 3, min = 0x800;
  else if ((c & 0xF8) == 0xF0) n = 4, min = 0x10000;
  else return 0;
  if (i + n > s.size()) return 0;
  unsigned cp = c & (0x7F >> n);
  for (std::size_t k = 1; k < n; ++k) {
    const auto b = static_cast<unsigned char>(s[i + k]);
    if ((b & 0xC0) != 0x80) return 0;
    cp = (cp << 6) | (b & 0x3F);
  }
  if (cp < min || cp > 0x10FFFF || (cp >= 0xD800 && cp <= 0xDFFF)) return 0;
  return n;
}

std::string html_escape(std::string_view s) {
  std::string out;
  for (char ch : s) {
    switch (ch) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      case '\n': out += "&#8629;"; break;
      case '\t': out += "&#8677;"; break;
      default: out += ch;
    }
  }
  return out;
}

std::string fixed(double v, int digits) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(digits) << v;
  return os.str();
}

Json logits_json(const std::vector<LogitToken>& tokens) {
  Json a = Json::array();
  for (const auto& t : tokens) a.push_back({{"id", t.id}, {"text", t.text}, {"weight", t.weight}});
  return a;
}

std::vector<LogitToken> logits_from(const Json& a) {
  std::vector<LogitToken> out;
  for (const auto& t : a) out.push_back({t.at("id").get<TokenId>(), t.at("text").get<std::string>(), t.at("weight").get<double>()});
  return out;
}

void render_logits(std::ostringstream& os, const char* title, const std::vector<LogitToken>& tokens) {
  os << "<div class=\"panel\"><h3>" << title << "</h3><table>\n";
  for (const auto& t : tokens) {
    os << "<tr class=\"logit\"><td><code>" << html_escape(t.text) << "</code></td><td>" << fixed(t.weight, 4)
       << "</td></tr>\n";
  }
  os << "</table></div>\n";
}

}  // namespace

std::string display_token(const Tokenizer& tokenizer, TokenId id) {
  const auto& sp = tokenizer.specials();
  if (id == sp.bos) return "<bos>";
  if (id == sp.eos) return "<eos>";
  if (id == sp.pad) return "<pad>";
  const std::string& bytes = tokenizer.token_bytes(id);
  std::string out;
  for (std::size_t i = 0; i < bytes.size();) {
    const std::size_t n = utf8_length(bytes, i);
    if (n == 0) {
      char buf[8];
      std::snprintf(buf, sizeof buf, "\\x%02X", static_cast<unsigned char>(bytes[i]));
      out += buf;
      ++i;
    } else {
      out.append(bytes, i, n);
      i += n;
    }
  }
  return out;
}

std::vector<ScanHit> select_examples(const std::vector<double>& activations, const ActivationDataset& data,
                                     std::size_t top_k, std::size_t per_stratum) {
  if (activations.size() != data.n_rows()) throw ContractError("select_examples: one activation per row required");
  std::vector<std::size_t> firing;
  for (std::size_t r = 0; r < activations.size(); ++r)
    if (activations[r] > 0) firing.push_back(r);
  std::vector<ScanHit> hits;
  if (firing.empty()) return hits;
  std::sort(firing.begin(), firing.end(), [&](std::size_t a, std::size_t b) {
    return activations[a] > activations[b] || (activations[a] == activations[b] && a < b);
  });

  std::set<std::uint64_t> used;
  auto hit = [&](std::size_t r, const char* stratum) {
    return ScanHit{r, data.context_ids[r], data.positions[r], activations[r], stratum};
  };
  for (std::size_t r : firing) {
    if (hits.size() >= top_k) break;
    if (used.insert(data.context_ids[r]).second) hits.push_back(hit(r, "top"));
  }

  std::vector<double> ascending;
  for (auto it = firing.rbegin(); it != firing.rend(); ++it) ascending.push_back(activations[*it]);
  auto quantile = [&](double p) {
    return ascending[static_cast<std::size_t>(std::floor(p * static_cast<double>(ascending.size() - 1)))];
  };
  struct Band {
    const char* name;
    double lo, hi;  // lo <= a < hi
  };
  const double q50 = quantile(0.5), q90 = quantile(0.9), q99 = quantile(0.99);
  const Band bands[] = {{"90-99%", q90, q99}, {"50-90%", q50, q90}, {"bottom", 0.0, q50}};
  for (const auto& band : bands) {
    std::vector<std::size_t> candidates;
    std::set<std::uint64_t> seen;
    for (std::size_t r : firing) {
      const double a = activations[r];
      if (a >= band.lo && a < band.hi && !used.count(data.context_ids[r]) && seen.insert(data.context_ids[r]).second) {
        candidates.push_back(r);
      }
    }
    const std::size_t m = candidates.size(), k = std::min(per_stratum, m);
    for (std::size_t i = 0; i < k; ++i) {
      const std::size_t j = k == 1 ? 0 : i * (m - 1) / (k - 1);
      used.insert(data.context_ids[candidates[j]]);
      hits.push_back(hit(candidates[j], band.name));
    }
  }
  return hits;
}

std::string dashboard_to_json(const FeatureDashboard& d) {
  Json j;
  j["feature"] = d.feature;
  j["hook"] = d.hook;
  j["dead"] = d.dead;
  j["rows_scanned"] = d.rows_scanned;
  j["nonzero"] = d.nonzero;
  j["max_activation"] = d.max_activation;
  j["histogram"] = {{"edges", d.bin_edges}, {"counts", d.bin_counts}};
  j["top_logits"] = logits_json(d.top_logits);
  j["bottom_logits"] = logits_json(d.bottom_logits);
  j["loss_note"] = d.loss_note;
  Json examples = Json::array();
  for (const auto& ex : d.examples) {
    Json tokens = Json::array();
    for (const auto& t : ex.tokens) {
      tokens.push_back({{"id", t.id}, {"text", t.text}, {"activation", t.activation}, {"loss_delta", t.loss_delta}});
    }
    examples.push_back({{"stratum", ex.stratum},
                        {"context_id", ex.context_id},
                        {"position", ex.position},
                        {"scan_activation", ex.scan_activation},
                        {"max_activation", ex.max_activation},
                        {"tokens", tokens}});
  }
  j["examples"] = examples;
  return j.dump(1) + "\n";
}

FeatureDashboard dashboard_from_json(std::string_view text) {
  try {
    const Json j = Json::parse(text);
    FeatureDashboard d;
    d.feature = j.at("feature").get<std::size_t>();
    d.hook = j.at("hook").get<std::string>();
    d.dead = j.at("dead").get<bool>();
    d.rows_scanned = j.at("rows_scanned").get<std::size_t>();
    d.nonzero = j.at("nonzero").get<std::size_t>();
    d.max_activation = j.at("max_activation").get<double>();
    d.bin_edges = j.at("histogram").at("edges").get<std::vector<double>>();
    d.bin_counts = j.at("histogram").at("counts").get<std::vector<std::size_t>>();
    d.top_logits = logits_from(j.at("top_logits"));
    d.bottom_logits = logits_from(j.at("bottom_logits"));
    d.loss_note = j.at("loss_note").get<std::string>();
    for (const auto& e : j.at("examples")) {
      DashboardExample ex;
      ex.stratum = e.at("stratum").get<std::string>();
      ex.context_id = e.at("context_id").get<std::uint64_t>();
      ex.position = e.at("position").get<std::uint32_t>();
      ex.scan_activation = e.at("scan_activation").get<double>();
      ex.max_activation = e.at("max_activation").get<double>();
      for (const auto& t : e.at("tokens")) {
        ex.tokens.push_back({t.at("id").get<TokenId>(), t.at("text").get<std::string>(), t.at("activation").get<double>(),
                             t.at("loss_delta").get<double>()});
      }
      d.examples.push_back(std::move(ex));
    }
    return d;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("dashboard sidecar: ") + e.what());
  }
}

std::string render_dashboard(const FeatureDashboard& d) {
  std::ostringstream os;
  os << "<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"><title>Feature " << d.feature << "</title>\n"
     << "<style>body{font-family:sans-serif;margin:2em}code,.ctx{font-family:monospace}"
        ".ctx{line-height:2;margin:.4em 0;white-space:pre-wrap}.tok{padding:1px 0}"
        ".panel{display:inline-block;vertical-align:top;margin-right:2em}"
        ".pos{border-bottom:2px solid #1f77b4}.neg{border-bottom:2px solid #d62728}</style>\n"
     << "</head><body>\n";
  os << "<h1>Feature " << d.feature << "</h1>\n";
  os << "<p>hook " << html_escape(d.hook) << " &middot; rows scanned " << d.rows_scanned << " &middot; nonzero "
     << d.nonzero << " &middot; max activation " << fixed(d.max_activation, 4) << "</p>\n";
  if (d.dead) os << "<p class=\"dead\"><strong>dead feature</strong>: never active over the scanned rows</p>\n";

  if (!d.bin_counts.empty()) {
    const std::size_t peak = *std::max_element(d.bin_counts.begin(), d.bin_counts.end());
    const double w = 12, h = 100;
    os << "<div class=\"panel\"><h3>Activation histogram (nonzero)</h3>\n<svg xmlns=\"http://www.w3.org/2000/svg\" width=\""
       << fixed(w * static_cast<double>(d.bin_counts.size()), 0) << "\" height=\"" << fixed(h + 16, 0) << "\">\n";
    for (std::size_t i = 0; i < d.bin_counts.size(); ++i) {
      const double bh = peak ? h * static_cast<double>(d.bin_counts[i]) / static_cast<double>(peak) : 0;
      os << "<rect x=\"" << fixed(w * static_cast<double>(i), 1) << "\" y=\"" << fixed(h - bh, 1) << "\" width=\""
         << fixed(w - 1, 1) << "\" height=\"" << fixed(bh, 1) << "\" fill=\"#ff8c00\"><title>["
         << fixed(d.bin_edges[i], 4) << ", " << fixed(d.bin_edges[i + 1], 4) << "): " << d.bin_counts[i]
         << "</title></rect>\n";
    }
    os << "<text x=\"0\" y=\"" << fixed(h + 14, 0) << "\" font-size=\"10\">0</text>"
       << "<text x=\"" << fixed(w * static_cast<double>(d.bin_counts.size()), 0) << "\" y=\"" << fixed(h + 14, 0)
       << "\" font-size=\"10\" text-anchor=\"end\">" << fixed(d.max_activation, 3) << "</text>\n</svg></div>\n";
  }
  render_logits(os, "Top logit weights", d.top_logits);
  render_logits(os, "Bottom logit weights", d.bottom_logits);

  os << "<h2>Examples</h2>\n<p class=\"note\">" << html_escape(d.loss_note) << "</p>\n";
  for (const auto& ex : d.examples) {
    os << "<div class=\"ctx\" data-context=\"" << ex.context_id << "\"><small>[" << html_escape(ex.stratum) << " "
       << fixed(ex.max_activation, 3) << "]</small> ";
    for (const auto& t : ex.tokens) {
      const double alpha = d.max_activation > 0 ? std::clamp(t.activation / d.max_activation, 0.0, 1.0) : 0.0;
      os << "<span class=\"tok" << (t.loss_delta > 0 ? " pos" : t.loss_delta < 0 ? " neg" : "")
         << "\" style=\"background:rgba(255,140,0," << fixed(alpha, 3) << ")\" title=\"act "
         << fixed(t.activation, 4) << " | loss delta " << fixed(t.loss_delta, 5) << "\">" << html_escape(t.text)
         << "</span>";
    }
    os << "</div>\n";
  }
  os << "</body></html>\n";
  return os.str();
}

std::string render_index(std::vector<DashboardIndexEntry> entries, const std::string& sort_key) {
  auto by = [&](auto key) {
    std::stable_sort(entries.begin(), entries.end(), [&](const auto& a, const auto& b) {
      const auto ka = key(a), kb = key(b);
      return ka > kb || (ka == kb && a.feature < b.feature);
    });
  };
  if (sort_key == "max_activation") by([](const DashboardIndexEntry& e) { return e.max_activation; });
  else if (sort_key == "es") by([](const DashboardIndexEntry& e) { return e.es; });
  else if (sort_key == "dead") by([](const DashboardIndexEntry& e) { return e.dead ? 1 : 0; });
  else throw ConfigError("index sort key must be max_activation, es or dead, got '" + sort_key + "'");
  std::ostringstream os;
  os << "<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"><title>Feature index</title></head><body>\n"
     << "<h1>Feature index</h1>\n<p>sorted by " << html_escape(sort_key) << "</p>\n"
     << "<table>\n<tr><th>feature</th><th>max activation</th><th>es</th><th>dead</th></tr>\n";
  for (const auto& e : entries) {
    os << "<tr><td><a href=\"feature-" << e.feature << ".html\">" << e.feature << "</a></td><td>"
       << fixed(e.max_activation, 4) << "</td><td>" << fixed(e.es, 4) << "</td><td>" << (e.dead ? "yes" : "")
       << "</td></tr>\n";
  }
  os << "</table>\n</body></html>\n";
  return os.str();
}

void write_dashboard(const std::filesystem::path& dir, const FeatureDashboard& d) {
  const std::string stem = "feature-" + std::to_string(d.feature);
  const std::string html = render_dashboard(d), json = dashboard_to_json(d);
  write_file_atomic(dir / (stem + ".html"), html);
  write_file_atomic(dir / (stem + ".json"), json);
}

}  // namespace storylab
