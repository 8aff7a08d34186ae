#include "storylab/generate.hpp"

#include <algorithm>
#include <cctype>
#include <chrono>
#include <ctime>
#include <fstream>
#include <map>
#include <sstream>

#include "json.hpp"

namespace storylab {

namespace {

using Json = nlohmann::json;

std::string lower(std::string_view s) {
  std::string out(s);
  for (auto& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

bool is_space(char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r'; }

int parse_metric(const std::string& text, std::string_view reply, const std::string& name) {
  for (std::size_t at = text.find(name); at != std::string::npos; at = text.find(name, at + 1)) {
    if (at > 0 && std::isalpha(static_cast<unsigned char>(text[at - 1]))) continue;
    std::size_t i = at + name.size();
    while (i < text.size() && (text[i] == ' ' || text[i] == '\t')) ++i;
    if (i >= text.size() || (text[i] != ':' && text[i] != '=')) continue;
    ++i;
    while (i < text.size() && (text[i] == ' ' || text[i] == '\t')) ++i;
    std::size_t end = i;
    while (end < text.size() && (std::isdigit(static_cast<unsigned char>(text[end])) || text[end] == '-' ||
                                 text[end] == '+' || text[end] == '.')) {
      ++end;
    }
    if (end == i) continue;
    const std::string token = text.substr(i, end - i);
    if (!std::all_of(token.begin(), token.end(), [](char c) { return std::isdigit(static_cast<unsigned char>(c)); }) ||
        token.size() > 2) {
      throw ScoringError(name + " score '" + token + "' is not an integer in 0..10");
    }
    const int v = std::stoi(token);
    if (v > 10) throw ScoringError(name + " score " + token + " is outside 0..10");
    return v;
  }
  throw ScoringError("judge reply has no " + name + " score: " + std::string(reply.substr(0, 200)));
}

std::string now_iso8601() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

}  // namespace

void PromptCase::validate() const {
  const auto first = prompt.find(kPromptMarker);
  if (first == std::string::npos) throw ContractError("prompt case '" + id + "' has no *** marker");
  if (prompt.find(kPromptMarker, first + 1) != std::string::npos) {
    throw ContractError("prompt case '" + id + "' has more than one *** marker");
  }
  for (std::size_t i = first + kPromptMarker.size(); i < prompt.size(); ++i) {
    if (!is_space(prompt[i])) throw ContractError("prompt case '" + id + "': *** must end the prompt");
  }
}

std::string strip_marker(std::string_view prompt) {
  std::string s(prompt);
  if (const auto at = s.rfind(kPromptMarker); at != std::string::npos) s.erase(at, kPromptMarker.size());
  while (!s.empty() && is_space(s.back())) s.pop_back();
  return s;
}

std::vector<PromptCase> load_cases(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open prompt cases " + path.string());
  std::vector<PromptCase> cases;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const Json j = Json::parse(line);
      PromptCase c{j.at("id").get<std::string>(), j.at("prompt").get<std::string>(), j.value("source", std::string())};
      c.validate();
      cases.push_back(std::move(c));
    } catch (const Json::exception& e) {
      throw DataError("prompt cases line " + std::to_string(line_no) + ": " + e.what());
    } catch (const ContractError& e) {
      throw DataError("prompt cases line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  if (cases.empty()) throw DataError("no prompt cases in " + path.string());
  return cases;
}

std::string judge_system_prompt() {
  return "You grade story completions written by a language model for young children. You are strict, consistent "
         "and concise.";
}

std::string build_judge_prompt(const PromptCase& c, std::string_view completion) {
  std::string out;
  out += "Below is the beginning of a children's story. Its final sentence stops part way through; the text after "
         "the marker *** was written by a model to finish the story.\n\n";
  out += "Beginning:\n" + strip_marker(c.prompt) + " ***\n\n";
  out += "Completion:\n" + std::string(completion) + "\n\n";
  out += "Look closely at how the completion carries on the unfinished sentence: it should join it smoothly and make "
         "sense. Then rate the completion on three qualities, each as a whole number from 0 (worst) to 10 (best):\n"
         "- language correctness of the text\n"
         "- originality and imagination of the story\n"
         "- agreement with the beginning and with details established earlier in the story\n\n";
  out += "After any comments, end your reply with exactly one line in this format:\n";
  out += "grammar: <0-10> creativity: <0-10> consistency: <0-10>\n";
  return out;
}

JudgeScore parse_judge_reply(std::string_view reply) {
  const std::string text = lower(reply);
  JudgeScore s;
  s.grammar = parse_metric(text, reply, "grammar");
  s.creativity = parse_metric(text, reply, "creativity");
  s.consistency = parse_metric(text, reply, "consistency");
  s.raw = std::string(reply);
  return s;
}

JudgeScore judge(ChatClient& client, const std::string& request, std::size_t attempts) {
  if (attempts == 0) throw ConfigError("judge attempts must be positive");
  const ChatRequest req{judge_system_prompt(), request, 0.0, 256};
  for (std::size_t k = 0;; ++k) {
    const std::string reply = client.complete(req);
    try {
      return parse_judge_reply(reply);
    } catch (const ScoringError&) {
      if (k + 1 >= attempts) throw;
    }
  }
}

EvalMeans compute_means(const std::vector<EvalRow>& rows) {
  EvalMeans m;
  double g = 0, cr = 0, co = 0;
  for (const auto& r : rows) {
    if (!r.score) {
      ++m.errors;
      continue;
    }
    ++m.scored;
    g += r.score->grammar;
    cr += r.score->creativity;
    co += r.score->consistency;
  }
  if (m.scored) {
    const auto n = static_cast<double>(m.scored);
    m.grammar = g / n;
    m.creativity = cr / n;
    m.consistency = co / n;
  }
  return m;
}

std::uint64_t completion_seed(std::uint64_t base, std::size_t case_index, std::size_t completion_index) {
  std::uint64_t z = base + 0x9e3779b97f4a7c15ULL * (case_index * 1024 + completion_index + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

EvalReport judge_completions(std::vector<EvalRow> rows, const std::vector<PromptCase>& cases, ChatClient& client,
                             const EvalConfig& config, std::string model_id) {
  EvalReport report;
  report.model_id = std::move(model_id);
  report.judge_id = client.id();
  report.timestamp = now_iso8601();
  std::map<std::string, const PromptCase*> by_id;
  for (const auto& c : cases) by_id[c.id] = &c;
  for (const auto& r : rows) {
    if (!by_id.count(r.case_id)) throw ContractError("judge_completions: unknown case '" + r.case_id + "'");
  }
  run_bounded(rows.size(), client.ordered() ? 1 : config.parallelism, [&](std::size_t i) {
    EvalRow& r = rows[i];
    try {
      r.score = judge(client, build_judge_prompt(*by_id.at(r.case_id), r.completion), config.judge_attempts);
    } catch (const ScoringError& e) {
      r.error = std::string("scoring: ") + e.what();
    } catch (const TransportError& e) {
      r.error = std::string("transport: ") + e.what();
    }
  });
  report.rows = std::move(rows);
  report.means = compute_means(report.rows);
  return report;
}

std::string report_jsonl(const EvalReport& report) {
  std::string out;
  Json header{{"type", "header"},
              {"model", report.model_id},
              {"judge", report.judge_id},
              {"template_version", report.template_version},
              {"template_system", judge_system_prompt()},
              {"template_example", build_judge_prompt(PromptCase{"example", "{prompt} ***", ""}, "{completion}")},
              {"timestamp", report.timestamp},
              {"means",
               {{"grammar", report.means.grammar},
                {"creativity", report.means.creativity},
                {"consistency", report.means.consistency}}},
              {"scored", report.means.scored},
              {"errors", report.means.errors}};
  out += header.dump(-1, ' ', false, Json::error_handler_t::replace) + "\n";
  for (const auto& r : report.rows) {
    Json row{{"type", "row"},
             {"case", r.case_id},
             {"completion_index", r.completion_index},
             {"seed", r.seed},
             {"completion", r.completion}};
    if (r.score) {
      row["grammar"] = r.score->grammar;
      row["creativity"] = r.score->creativity;
      row["consistency"] = r.score->consistency;
      row["raw"] = r.score->raw;
    } else {
      row["error"] = r.error;
    }
    out += row.dump(-1, ' ', false, Json::error_handler_t::replace) + "\n";
  }
  return out;
}

EvalReport parse_report(std::string_view jsonl) {
  EvalReport report;
  std::istringstream in{std::string(jsonl)};
  std::string line;
  bool have_header = false;
  try {
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      const Json j = Json::parse(line);
      if (j.at("type") == "header") {
        report.model_id = j.at("model");
        report.judge_id = j.at("judge");
        report.template_version = j.at("template_version");
        report.timestamp = j.at("timestamp");
        have_header = true;
        continue;
      }
      EvalRow r;
      r.case_id = j.at("case");
      r.completion_index = j.at("completion_index");
      r.seed = j.at("seed");
      r.completion = j.at("completion");
      if (j.contains("grammar")) {
        r.score = JudgeScore{j.at("grammar"), j.at("creativity"), j.at("consistency"), j.at("raw")};
      } else {
        r.error = j.at("error");
      }
      report.rows.push_back(std::move(r));
    }
  } catch (const Json::exception& e) {
    throw FormatError(std::string("eval report: ") + e.what());
  }
  if (!have_header) throw FormatError("eval report has no header record");
  report.means = compute_means(report.rows);
  return report;
}

}  // namespace storylab
