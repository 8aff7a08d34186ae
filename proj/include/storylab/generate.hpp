#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "storylab/client.hpp"
#include "storylab/model.hpp"
#include "storylab/tokenizer.hpp"

namespace storylab {

inline constexpr std::string_view kPromptMarker = "***";

struct PromptCase {
  std::string id;
  std::string prompt;  // ends with the marker
  std::string source;

  /// ContractError unless the marker occurs exactly once, at the end
  /// (trailing whitespace allowed).
  void validate() const;
};

/// Prompt text without the marker and the whitespace around it.
std::string strip_marker(std::string_view prompt);

/// One JSON object per line with "id", "prompt" and optional "source".
std::vector<PromptCase> load_cases(const std::filesystem::path& path);

struct SampleOptions {
  double temperature = 1.0;
  std::size_t max_new_tokens = 300;
  std::uint64_t seed = 0;
};

/// Generated token ids, excluding the terminating eos. The context is
/// <eos> followed by the prompt ids, the same boundary packed training rows
/// use between documents. Once the sequence outgrows the context window
/// only the most recent context_length ids are fed back.
template <class T>
std::vector<TokenId> sample_ids(const TransformerWeights<T>& model, TokenId eos, std::vector<TokenId> context,
                                const SampleOptions& options) {
  const ModelConfig& c = model.config;
  if (!(options.temperature >= 0)) throw ContractError("sample: temperature must be non-negative");
  if (context.empty()) throw ContractError("sample: empty context");
  if (context.size() > c.context_length) {
    throw ContractError("sample: prompt of " + std::to_string(context.size()) + " tokens exceeds the context length " +
                        std::to_string(c.context_length));
  }
  std::mt19937_64 rng(options.seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  NoGradGuard no_grad;
  std::vector<TokenId> out;
  std::vector<double> p(c.vocab_size);
  while (out.size() < options.max_new_tokens) {
    const std::size_t start = context.size() > c.context_length ? context.size() - c.context_length : 0;
    const std::span<const TokenId> window(context.data() + start, context.size() - start);
    const auto logits = forward<T>(model, TokenBatch{window, 1, window.size()});
    const T* last = logits.data().data() + (window.size() - 1) * c.vocab_size;
    std::size_t next = 0;
    if (options.temperature == 0) {
      next = static_cast<std::size_t>(std::max_element(last, last + c.vocab_size) - last);
    } else {
      const double mx = static_cast<double>(*std::max_element(last, last + c.vocab_size));
      double z = 0;
      for (std::size_t j = 0; j < c.vocab_size; ++j) z += p[j] = std::exp((static_cast<double>(last[j]) - mx) / options.temperature);
      double u = unit(rng) * z;
      next = c.vocab_size - 1;
      for (std::size_t j = 0; j < c.vocab_size; ++j) {
        if ((u -= p[j]) < 0) {
          next = j;
          break;
        }
      }
    }
    const auto id = static_cast<TokenId>(next);
    if (id == eos) break;
    out.push_back(id);
    context.push_back(id);
  }
  return out;
}

/// Completion text for a prompt; the marker is stripped before encoding.
template <class T>
std::string sample(const TransformerWeights<T>& model, const Tokenizer& tokenizer, std::string_view prompt,
                   const SampleOptions& options = {}) {
  std::vector<TokenId> context{tokenizer.specials().eos};
  const auto ids = tokenizer.encode(strip_marker(prompt));
  context.insert(context.end(), ids.begin(), ids.end());
  return tokenizer.decode(sample_ids(model, tokenizer.specials().eos, std::move(context), options));
}

inline constexpr std::string_view kJudgeTemplateVersion = "judge-v1";

/// System message sent with every judge request.
std::string judge_system_prompt();
/// Deterministic judge request for one completion.
std::string build_judge_prompt(const PromptCase& c, std::string_view completion);

struct JudgeScore {
  int grammar = 0;
  int creativity = 0;
  int consistency = 0;
  std::string raw;
};

/// Reads "grammar: N", "creativity: N" and "consistency: N" (case
/// insensitive, ':' or '='). Throws ScoringError when a metric is missing
/// or its value is not an integer in 0..10.
JudgeScore parse_judge_reply(std::string_view reply);

/// Sends the request and parses the reply, asking again up to `attempts`
/// times while the reply is unparsable. Transport retries happen inside
/// the client.
JudgeScore judge(ChatClient& client, const std::string& request, std::size_t attempts = 3);

struct EvalConfig {
  std::size_t completions_per_case = 2;
  double temperature = 1.0;
  std::size_t max_new_tokens = 300;
  std::uint64_t seed = 0;
  std::size_t parallelism = 4;
  std::size_t judge_attempts = 3;
};

struct EvalRow {
  std::string case_id;
  std::size_t completion_index = 0;
  std::uint64_t seed = 0;
  std::string completion;
  std::optional<JudgeScore> score;
  std::string error;  // set when the judge reply could not be scored
};

struct EvalMeans {
  double grammar = 0;
  double creativity = 0;
  double consistency = 0;
  std::size_t scored = 0;
  std::size_t errors = 0;
};

/// Arithmetic means over every scored row; unscored rows are only counted.
EvalMeans compute_means(const std::vector<EvalRow>& rows);

struct EvalReport {
  std::string model_id;
  std::string judge_id;
  std::string template_version{kJudgeTemplateVersion};
  std::string timestamp;
  std::vector<EvalRow> rows;
  EvalMeans means;
};

/// Seed of completion j of case i.
std::uint64_t completion_seed(std::uint64_t base, std::size_t case_index, std::size_t completion_index);

/// Judges pre-generated completions (rows carry case id, index, seed and
/// text) with bounded parallelism and fills in scores and means.
EvalReport judge_completions(std::vector<EvalRow> rows, const std::vector<PromptCase>& cases, ChatClient& client,
                             const EvalConfig& config, std::string model_id);

template <class T>
EvalReport evaluate_model(const TransformerWeights<T>& model, const Tokenizer& tokenizer,
                          const std::vector<PromptCase>& cases, ChatClient& client, const EvalConfig& config,
                          std::string model_id = "model") {
  if (cases.empty()) throw ContractError("evaluate_model: no cases");
  if (config.completions_per_case == 0) throw ConfigError("completions_per_case must be positive");
  std::vector<EvalRow> rows;
  for (std::size_t i = 0; i < cases.size(); ++i) {
    cases[i].validate();
    for (std::size_t j = 0; j < config.completions_per_case; ++j) {
      EvalRow r;
      r.case_id = cases[i].id;
      r.completion_index = j;
      r.seed = completion_seed(config.seed, i, j);
      r.completion = sample(model, tokenizer, cases[i].prompt, {config.temperature, config.max_new_tokens, r.seed});
      rows.push_back(std::move(r));
    }
  }
  return judge_completions(std::move(rows), cases, client, config, std::move(model_id));
}

/// Header record (ids, template version and text, means) followed by one
/// record per row, one JSON object per line.
std::string report_jsonl(const EvalReport& report);
EvalReport parse_report(std::string_view jsonl);

}  // namespace storylab
