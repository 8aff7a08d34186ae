#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <map>
#include <random>
#include <set>

#include "storylab/container.hpp"
#include "storylab/dashboard.hpp"

using namespace storylab;

namespace {

ModelConfig dash_model() {
  ModelConfig c;
  c.n_layers = 2;
  c.n_heads = 2;
  c.n_kv_heads = 1;
  c.d_model = 8;
  c.d_mlp = 16;
  c.vocab_size = 259;
  c.context_length = 12;
  return c;
}

PackedDataset random_packed(std::size_t rows, std::size_t len, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<std::vector<TokenId>> docs(1);
  for (std::size_t i = 0; i < rows * len; ++i) docs[0].push_back(static_cast<TokenId>(97 + rng() % 26));
  return pack_contexts(docs, len, seed, 259);
}

std::size_t count_of(const std::string& hay, const std::string& needle) {
  std::size_t n = 0;
  for (auto p = hay.find(needle); p != std::string::npos; p = hay.find(needle, p + 1)) ++n;
  return n;
}

double oracle_loss(std::span<const double> logits, std::size_t v, std::size_t row, TokenId target) {
  double z = 0;
  for (std::size_t j = 0; j < v; ++j) z += std::exp(logits[row * v + j]);
  return -(logits[row * v + static_cast<std::size_t>(target)] - std::log(z));
}

// Ablates one position per forward pass.
std::vector<double> oracle_deltas(const TransformerWeights<double>& m, const SAEParams<double>& sae, HookSpec hook,
                                  std::size_t feature, std::span<const TokenId> tokens) {
  const std::size_t seq = tokens.size(), v = m.config.vocab_size, width = sae.d_act();
  auto cap = forward_with_capture<double>(m, TokenBatch{tokens, 1, seq}, hook);
  auto enc = sae_forward(sae, cap.activations);
  std::vector<double> out(seq, 0.0);
  for (std::size_t t = 0; t + 1 < seq; ++t) {
    const double f = enc.features.data()[t * sae.d_hidden() + feature];
    std::vector<HookBinding<double>> hooks{{hook, [&](const Tensor<double>& x) {
      auto vals = x.values();
      for (std::size_t j = 0; j < width; ++j) vals[t * width + j] -= f * sae.w_dec.data()[feature * width + j];
      return Tensor<double>::from(x.shape(), vals);
    }}};
    auto ablated = forward<double>(m, TokenBatch{tokens, 1, seq}, hooks);
    out[t] = oracle_loss(ablated.data(), v, t, tokens[t + 1]) - oracle_loss(cap.logits.data(), v, t, tokens[t + 1]);
  }
  return out;
}

ActivationDataset synthetic_dataset(std::size_t contexts, std::size_t per_context, std::uint64_t seed) {
  ActivationDataset d;
  d.d_act = 1;
  std::mt19937_64 rng(seed);
  for (std::size_t c = 0; c < contexts; ++c)
    for (std::size_t p = 0; p < per_context; ++p) {
      d.context_ids.push_back(c);
      d.positions.push_back(static_cast<std::uint32_t>(p));
      d.token_ids.push_back(0);
      d.vectors.push_back(0.0f);
    }
  std::vector<std::size_t> order(d.n_rows());
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  auto ids = d.context_ids;
  for (std::size_t i = 0; i < order.size(); ++i) d.context_ids[i] = ids[order[i]];
  return d;
}

struct Fixture {
  TransformerWeights<double> model = init_weights<double>(dash_model(), 3);
  PackedDataset data = random_packed(12, 12, 5);
  HookSpec hook{1, HookPoint::kMlpOutput};
  SAEParams<double> sae = init_sae<double>(8, 32, 7);
  ActivationDataset acts;
  Tokenizer tokenizer;

  Fixture() {
    ActivationOptions opt;
    opt.tokens_per_context = 6;
    acts = build_activation_dataset(model, data, hook, opt);
    for (auto& b : sae.b_enc.mutable_data()) b = 0.02;
  }
};

}  // namespace

TEST(DisplayToken, EscapesInvalidBytes) {
  Tokenizer tok;
  EXPECT_EQ(display_token(tok, 'a'), "a");
  EXPECT_EQ(display_token(tok, 0xFF), "\\xFF");
  EXPECT_EQ(display_token(tok, 0xC3), "\\xC3");
  EXPECT_EQ(display_token(tok, tok.specials().eos), "<eos>");
}

TEST(SelectExamples, TopKEqualsBruteForceScan) {
  auto d = synthetic_dataset(40, 7, 1);
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u(-1.0, 3.0);
  std::vector<double> a(d.n_rows());
  for (auto& x : a) x = std::max(0.0, u(rng));

  std::map<std::uint64_t, double> best;
  for (std::size_t r = 0; r < a.size(); ++r) best[d.context_ids[r]] = std::max(best[d.context_ids[r]], a[r]);
  std::vector<std::pair<double, std::uint64_t>> ranked;
  for (auto [c, v] : best) ranked.push_back({v, c});
  std::sort(ranked.rbegin(), ranked.rend());

  auto hits = select_examples(a, d, 3, 5);
  ASSERT_GE(hits.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(hits[i].stratum, "top");
    EXPECT_EQ(hits[i].context_id, ranked[i].second);
    EXPECT_EQ(hits[i].activation, ranked[i].first);
  }
  std::set<std::uint64_t> contexts;
  for (const auto& h : hits) EXPECT_TRUE(contexts.insert(h.context_id).second);
  std::map<std::string, std::size_t> per;
  for (const auto& h : hits) per[h.stratum]++;
  EXPECT_LE(per["90-99%"], 5u);
  EXPECT_EQ(per["50-90%"], 5u);
  EXPECT_EQ(per["bottom"], 5u);
  for (const auto& h : hits) EXPECT_GT(h.activation, 0.0);
}

TEST(SelectExamples, NeverActiveGivesNothing) {
  auto d = synthetic_dataset(5, 3, 1);
  EXPECT_TRUE(select_examples(std::vector<double>(d.n_rows(), 0.0), d, 3, 5).empty());
}

TEST(Dashboard, DeadFeatureHasFlagAndNoExamples) {
  Fixture fx;
  fx.sae.b_enc.mutable_data()[4] = -1e6;
  auto lw = logit_weights(fx.model, fx.sae, fx.hook);
  auto d = build_dashboard(fx.model, fx.sae, lw, fx.acts, fx.data, fx.tokenizer, 4);
  EXPECT_TRUE(d.dead);
  EXPECT_EQ(d.nonzero, 0u);
  EXPECT_TRUE(d.examples.empty());
  EXPECT_TRUE(d.bin_counts.empty());
  EXPECT_NE(render_dashboard(d).find("dead feature"), std::string::npos);
}

TEST(Dashboard, ExamplesMatchRecomputation) {
  Fixture fx;
  auto lw = logit_weights(fx.model, fx.sae, fx.hook);
  const std::size_t feature = 5;
  DashboardOptions opt;
  opt.top_k = 3;
  opt.per_stratum = 2;
  auto d = build_dashboard(fx.model, fx.sae, lw, fx.acts, fx.data, fx.tokenizer, feature, opt);
  ASSERT_FALSE(d.dead);
  ASSERT_FALSE(d.examples.empty());

  std::size_t nonzero = 0;
  for (double a : feature_activations(fx.sae, fx.acts, feature)) nonzero += a > 0;
  EXPECT_EQ(d.nonzero, nonzero);
  std::size_t total = 0;
  for (auto c : d.bin_counts) total += c;
  EXPECT_EQ(total, d.nonzero);
  EXPECT_EQ(d.bin_edges.front(), 0.0);
  EXPECT_EQ(d.bin_edges.back(), d.max_activation);

  for (std::size_t i = 1; i < d.examples.size(); ++i)
    EXPECT_GE(d.examples[i - 1].max_activation, d.examples[i].max_activation);

  for (const auto& ex : d.examples) {
    const auto row = fx.data.row(ex.context_id);
    auto cap = forward_with_capture<double>(fx.model, TokenBatch{row, 1, row.size()}, fx.hook);
    auto enc = sae_forward(fx.sae, cap.activations);
    ASSERT_EQ(ex.tokens.size(), row.size());
    for (std::size_t t = 0; t < row.size(); ++t) {
      const double expect = enc.features.data()[t * fx.sae.d_hidden() + feature];
      EXPECT_EQ(std::memcmp(&ex.tokens[t].activation, &expect, sizeof expect), 0);
      EXPECT_EQ(ex.tokens[t].id, row[t]);
    }
    EXPECT_NEAR(ex.tokens[ex.position].activation, ex.scan_activation, 1e-5);
  }
}

TEST(Dashboard, LogitPanelsAreRowExtremes) {
  Fixture fx;
  auto lw = logit_weights(fx.model, fx.sae, fx.hook);
  DashboardOptions opt;
  opt.logit_k = 7;
  opt.ablation = false;
  auto d = build_dashboard(fx.model, fx.sae, lw, fx.acts, fx.data, fx.tokenizer, 2, opt);
  auto row = lw.row(2);
  std::vector<std::pair<double, int>> sorted;
  for (std::size_t t = 0; t < row.size(); ++t) sorted.push_back({row[t], static_cast<int>(t)});
  std::sort(sorted.begin(), sorted.end());
  ASSERT_EQ(d.top_logits.size(), 7u);
  ASSERT_EQ(d.bottom_logits.size(), 7u);
  for (std::size_t i = 0; i < 7; ++i) {
    EXPECT_EQ(d.bottom_logits[i].weight, sorted[i].first);
    EXPECT_EQ(d.top_logits[i].weight, sorted[sorted.size() - 1 - i].first);
  }
  const auto html = render_dashboard(d);
  EXPECT_EQ(count_of(html, "<tr class=\"logit\">"), 14u);
}

TEST(AblationLossDelta, ZeroWhenFeatureInactive) {
  Fixture fx;
  fx.sae.b_enc.mutable_data()[9] = -1e6;
  const auto row = fx.data.row(0);
  for (double x : ablation_loss_delta(fx.model, fx.sae, fx.hook, 9, row)) EXPECT_EQ(x, 0.0);
}

TEST(AblationLossDelta, MatchesTwoForwardOracle) {
  for (HookSpec hook : {HookSpec{0, HookPoint::kMlpOutput}, HookSpec{1, HookPoint::kMlpOutput},
                        HookSpec{0, HookPoint::kMlpHiddenPostAct}}) {
    Fixture fx;
    const std::size_t width = hook_width(fx.model.config, hook.point);
    auto sae = init_sae<double>(width, 4 * width, 11);
    for (auto& b : sae.b_enc.mutable_data()) b = 0.0;
    std::size_t active_seen = 0, inactive_seen = 0;
    for (std::size_t r = 0; r < 3; ++r) {
      const auto row = fx.data.row(r);
      auto cap = forward_with_capture<double>(fx.model, TokenBatch{row, 1, row.size()}, hook);
      auto enc = sae_forward(sae, cap.activations);
      for (std::size_t feature = 0; feature < 6; ++feature) {
        const auto got = ablation_loss_delta(fx.model, sae, hook, feature, row);
        const auto want = oracle_deltas(fx.model, sae, hook, feature, row);
        ASSERT_EQ(got.size(), want.size());
        for (std::size_t t = 0; t < got.size(); ++t) {
          EXPECT_NEAR(got[t], want[t], 1e-6) << hook.to_string() << " t=" << t;
          if (enc.features.data()[t * sae.d_hidden() + feature] == 0) {
            EXPECT_EQ(got[t], 0.0);
            ++inactive_seen;
          } else if (t + 1 < row.size()) {
            ++active_seen;
          }
        }
        EXPECT_EQ(got.back(), 0.0);
      }
    }
    EXPECT_GT(active_seen, 0u);
    EXPECT_GT(inactive_seen, 0u);
  }
}

TEST(RenderDashboard, SidecarRoundTripAndDeterminism) {
  Fixture fx;
  auto lw = logit_weights(fx.model, fx.sae, fx.hook);
  auto d = build_dashboard(fx.model, fx.sae, lw, fx.acts, fx.data, fx.tokenizer, 1);
  const auto json = dashboard_to_json(d);
  const auto back = dashboard_from_json(json);
  EXPECT_EQ(dashboard_to_json(back), json);
  EXPECT_EQ(back.max_activation, d.max_activation);
  EXPECT_EQ(back.bin_edges, d.bin_edges);
  EXPECT_EQ(back.bin_counts, d.bin_counts);
  ASSERT_EQ(back.examples.size(), d.examples.size());
  for (std::size_t i = 0; i < d.examples.size(); ++i) {
    ASSERT_EQ(back.examples[i].tokens.size(), d.examples[i].tokens.size());
    for (std::size_t t = 0; t < d.examples[i].tokens.size(); ++t) {
      EXPECT_EQ(back.examples[i].tokens[t].activation, d.examples[i].tokens[t].activation);
      EXPECT_EQ(back.examples[i].tokens[t].loss_delta, d.examples[i].tokens[t].loss_delta);
      EXPECT_EQ(back.examples[i].tokens[t].text, d.examples[i].tokens[t].text);
    }
  }
  for (std::size_t i = 0; i < d.top_logits.size(); ++i) EXPECT_EQ(back.top_logits[i].weight, d.top_logits[i].weight);
  EXPECT_EQ(render_dashboard(back), render_dashboard(d));
}

TEST(RenderDashboard, UnderlineColourFollowsDeltaSign) {
  Fixture fx;
  auto lw = logit_weights(fx.model, fx.sae, fx.hook);
  auto d = build_dashboard(fx.model, fx.sae, lw, fx.acts, fx.data, fx.tokenizer, 3);
  std::size_t pos = 0, neg = 0;
  for (const auto& ex : d.examples)
    for (const auto& t : ex.tokens) pos += t.loss_delta > 0, neg += t.loss_delta < 0;
  const auto html = render_dashboard(d);
  EXPECT_EQ(count_of(html, "class=\"tok pos\""), pos);
  EXPECT_EQ(count_of(html, "class=\"tok neg\""), neg);
  EXPECT_GT(pos + neg, 0u);
  EXPECT_NE(html.find(".pos{border-bottom:2px solid #1f77b4}"), std::string::npos);
}

TEST(RenderDashboard, SidecarRejectsGarbage) {
  EXPECT_THROW(dashboard_from_json("{\"feature\": 1}"), FormatError);
  EXPECT_THROW(dashboard_from_json("not json"), FormatError);
}

TEST(RenderIndex, SortsByKey) {
  std::vector<DashboardIndexEntry> e{{0, 1.0, false, 0.1}, {1, 3.0, false, -0.5}, {2, 0.0, true, 0.9}};
  auto by_max = render_index(e, "max_activation");
  EXPECT_LT(by_max.find("feature-1.html"), by_max.find("feature-0.html"));
  EXPECT_LT(by_max.find("feature-0.html"), by_max.find("feature-2.html"));
  auto by_es = render_index(e, "es");
  EXPECT_LT(by_es.find("feature-2.html"), by_es.find("feature-0.html"));
  EXPECT_LT(by_es.find("feature-0.html"), by_es.find("feature-1.html"));
  auto by_dead = render_index(e, "dead");
  EXPECT_LT(by_dead.find("feature-2.html"), by_dead.find("feature-0.html"));
  EXPECT_THROW(render_index(e, "colour"), ConfigError);
}

TEST(WriteDashboard, WritesDocumentAndSidecar) {
  Fixture fx;
  auto lw = logit_weights(fx.model, fx.sae, fx.hook);
  auto d = build_dashboard(fx.model, fx.sae, lw, fx.acts, fx.data, fx.tokenizer, 0);
  const auto dir = std::filesystem::temp_directory_path() / "storylab_dash_test";
  std::filesystem::remove_all(dir);
  write_dashboard(dir, d);
  EXPECT_EQ(read_file(dir / "feature-0.html"), render_dashboard(d));
  EXPECT_EQ(render_dashboard(dashboard_from_json(read_file(dir / "feature-0.json"))), render_dashboard(d));
  std::filesystem::remove_all(dir);
}
