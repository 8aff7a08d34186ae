#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <random>

#include "storylab/sae.hpp"
#include "support/finite_diff.hpp"

using namespace storylab;

namespace {

// Rows are sparse non-negative mixtures of `n_dirs` random unit directions.
ActivationDataset sparse_mixture(std::size_t rows, std::size_t d, std::size_t n_dirs, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal;
  std::uniform_real_distribution<double> unif(0.5, 2.0);
  std::vector<std::vector<double>> dirs(n_dirs, std::vector<double>(d));
  for (auto& v : dirs) {
    double s = 0;
    for (auto& x : v) {
      x = normal(rng);
      s += x * x;
    }
    for (auto& x : v) x /= std::sqrt(s);
  }
  ActivationDataset data;
  data.d_act = d;
  for (std::size_t r = 0; r < rows; ++r) {
    std::vector<double> x(d, 0.0);
    for (int k = 0; k < 3; ++k) {
      const auto& dir = dirs[rng() % n_dirs];
      const double a = unif(rng);
      for (std::size_t j = 0; j < d; ++j) x[j] += a * dir[j];
    }
    for (double v : x) data.vectors.push_back(static_cast<float>(v));
    data.context_ids.push_back(r);
    data.positions.push_back(0);
    data.token_ids.push_back(0);
  }
  return data;
}

SAEConfig toy_config(std::size_t d, double l1, std::size_t steps) {
  SAEConfig c;
  c.d_act = d;
  c.expansion_factor = 4;
  c.l1_coefficient = l1;
  c.lr = 3e-3;
  c.batch_rows = 128;
  c.steps = steps;
  c.seed = 11;
  c.log_every = 50;
  return c;
}

ModelConfig capture_model(std::size_t ctx) {
  ModelConfig c;
  c.n_layers = 2;
  c.n_heads = 2;
  c.n_kv_heads = 1;
  c.d_model = 8;
  c.d_mlp = 16;
  c.vocab_size = 40;
  c.context_length = ctx;
  return c;
}

PackedDataset random_packed(std::size_t rows, std::size_t len, std::size_t vocab, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<std::vector<TokenId>> docs(1);
  for (std::size_t i = 0; i < rows * len; ++i) docs[0].push_back(static_cast<TokenId>(rng() % (vocab - 1)));
  return pack_contexts(docs, len, seed, vocab, static_cast<TokenId>(vocab - 1));
}

}  // namespace

TEST(SAEForward, FixedPointAtDecoderBias) {
  auto p = init_sae<double>(6, 24, 3);
  auto b = p.b_dec.mutable_data();
  for (std::size_t j = 0; j < 6; ++j) b[j] = 0.1 * static_cast<double>(j) - 0.2;
  for (auto& x : p.b_enc.mutable_data()) x = -0.01;
  auto x = Tensor<double>::from({2, 6}, [&] {
    std::vector<double> v;
    for (int r = 0; r < 2; ++r) v.insert(v.end(), b.begin(), b.end());
    return v;
  }());
  auto out = sae_forward(p, x);
  for (double f : out.features.data()) EXPECT_EQ(f, 0.0);
  for (std::size_t i = 0; i < 12; ++i) EXPECT_EQ(out.reconstruction.data()[i], b[i % 6]);
}

TEST(SAEForward, FeaturesNonNegative) {
  auto p = init_sae<float>(8, 64, 5);
  std::mt19937_64 rng(1);
  std::normal_distribution<float> normal;
  for (auto& x : p.b_enc.mutable_data()) x = normal(rng);
  std::vector<float> v(50 * 8);
  for (auto& x : v) x = 3 * normal(rng);
  auto out = sae_forward(p, Tensor<float>::from({50, 8}, v));
  for (float f : out.features.data()) EXPECT_GE(f, 0.0f);
  EXPECT_THROW(sae_forward(p, Tensor<float>::from({2, 4}, std::vector<float>(8))), DimensionError);
}

TEST(SAEForward, Geometry) {
  SAEConfig c;
  c.d_act = 1024;
  EXPECT_EQ(c.d_hidden(), 16384u);
  auto p = init_sae<float>(16, SAEConfig{16}.d_hidden(), 0);
  EXPECT_EQ(p.w_enc.shape(), (Shape{16, 256}));
  EXPECT_EQ(p.w_dec.shape(), (Shape{256, 16}));
}

TEST(SAELoss, FiniteDifferenceGradient) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    auto p = init_sae<double>(5, 20, seed);
    std::mt19937_64 rng(seed + 100);
    std::normal_distribution<double> normal;
    for (auto& x : p.b_enc.mutable_data()) x = 0.3 * normal(rng);
    for (auto& x : p.b_dec.mutable_data()) x = 0.3 * normal(rng);
    for (auto& x : p.w_enc.mutable_data()) x += 0.1 * normal(rng);
    std::vector<double> xv(7 * 5);
    for (auto& x : xv) x = normal(rng);
    const auto x = Tensor<double>::from({7, 5}, xv);
    storylab::testing::Leaves leaves{p.w_enc, p.b_enc, p.w_dec, p.b_dec};
    const double err =
        storylab::testing::gradient_rel_error([&](const storylab::testing::Leaves&) { return sae_loss(p, x, 0.05); }, leaves);
    EXPECT_LT(err, 1e-5) << "seed " << seed;
  }
}

TEST(SAETrain, DecoderRowsUnitNormAfterEveryStep) {
  auto data = sparse_mixture(512, 8, 12, 1);
  auto cfg = toy_config(8, 1e-3, 60);
  double worst = 0;
  SAETrainOptions<float> opts;
  opts.on_step = [&](std::uint64_t, const SAEParams<float>& p) {
    for (std::size_t i = 0; i < p.d_hidden(); ++i) {
      double s = 0;
      for (float v : p.feature_direction(i)) s += static_cast<double>(v) * v;
      worst = std::max(worst, std::abs(std::sqrt(s) - 1.0));
    }
  };
  auto r = sae_train(data, cfg, opts);
  EXPECT_LT(worst, 1e-6);
  EXPECT_EQ(r.log.size(), 2u);
  EXPECT_LT(r.log.back().max_decoder_norm_error, 1e-6);
}

TEST(SAETrain, ZeroL1MemorizesSmallSet) {
  auto data = sparse_mixture(64, 8, 6, 2);
  auto cfg = toy_config(8, 0.0, 1500);
  cfg.expansion_factor = 16;  // 128 hidden >= 64 vectors
  cfg.batch_rows = 64;
  cfg.lr = 1e-2;
  auto r = sae_train(data, cfg);
  EXPECT_LT(sae_metrics(r.params, data).mse, 1e-3);
}

TEST(SAETrain, SparsityMonotoneInL1AndZeroL1Dominates) {
  auto data = sparse_mixture(2048, 16, 24, 3);
  std::vector<double> l0, mse;
  for (double lambda : {0.0, 1e-4, 1e-3, 1e-2}) {
    auto r = sae_train(data, toy_config(16, lambda, 300));
    auto m = sae_metrics(r.params, data);
    l0.push_back(m.mean_l0);
    mse.push_back(m.mse);
  }
  EXPECT_GT(l0[1], l0[2]);
  EXPECT_GT(l0[2], l0[3]);
  for (std::size_t i = 1; i < mse.size(); ++i) EXPECT_LT(mse[0], mse[i]);
}

TEST(SAETrain, MovingAverageLossNonIncreasingOnToySet) {
  auto data = sparse_mixture(256, 8, 10, 4);
  auto cfg = toy_config(8, 1e-3, 600);
  cfg.batch_rows = 256;  // full batch
  cfg.lr = 1e-3;
  auto r = sae_train(data, cfg);
  ASSERT_EQ(r.log.size(), 12u);
  for (std::size_t i = 1; i < r.log.size(); ++i) EXPECT_LE(r.log[i].loss, r.log[i - 1].loss) << "window " << i;
}

TEST(SAETrain, DeterministicAndRejectsBadInput) {
  auto data = sparse_mixture(200, 8, 10, 5);
  auto cfg = toy_config(8, 1e-3, 40);
  auto a = sae_train(data, cfg), b = sae_train(data, cfg);
  EXPECT_EQ(a.params.w_dec.values(), b.params.w_dec.values());
  ActivationDataset empty;
  empty.d_act = 8;
  EXPECT_THROW(sae_train(empty, cfg), DataError);
  cfg.d_act = 9;
  EXPECT_THROW(sae_train(data, cfg), ContractError);
}

TEST(SAETrain, DivergenceAbortsWithLastGoodParams) {
  auto data = sparse_mixture(64, 8, 6, 6);
  data.vectors[5] = std::numeric_limits<float>::infinity();
  try {
    sae_train(data, toy_config(8, 1e-3, 10));
    FAIL() << "expected divergence";
  } catch (const TrainingDiverged& e) {
    auto p = sae_from_container<float>(Container::deserialize(e.checkpoint_bytes()));
    EXPECT_EQ(p.d_act(), 8u);
  }
}

TEST(SAEMetrics, PerfectReconstruction) {
  const std::size_t d = 4;
  SAEParams<double> p{Tensor<double>::zeros({d, 2 * d}, true), Tensor<double>::zeros({2 * d}, true),
                      Tensor<double>::zeros({2 * d, d}, true), Tensor<double>::zeros({d}, true)};
  auto we = p.w_enc.mutable_data();
  auto wd = p.w_dec.mutable_data();
  for (std::size_t j = 0; j < d; ++j) {
    we[j * 2 * d + j] = 1;
    we[j * 2 * d + d + j] = -1;
    wd[j * d + j] = 1;
    wd[(d + j) * d + j] = -1;
  }
  auto data = sparse_mixture(50, d, 5, 7);
  auto m = sae_metrics(p, data);
  EXPECT_NEAR(m.mse, 0.0, 1e-12);
  EXPECT_NEAR(m.explained_variance, 1.0, 1e-12);
}

TEST(SAEMetrics, AllZeroFeatures) {
  auto data = sparse_mixture(80, 6, 5, 8);
  auto p = init_sae<double>(6, 24, 1);
  for (auto& x : p.b_enc.mutable_data()) x = -1e6;
  auto b = p.b_dec.mutable_data();
  for (std::size_t j = 0; j < 6; ++j) b[j] = 0.05 * static_cast<double>(j);
  double expected = 0;
  for (std::size_t r = 0; r < data.n_rows(); ++r)
    for (std::size_t j = 0; j < 6; ++j) expected += std::pow(data.row(r)[j] - b[j], 2);
  expected /= 80.0 * 6.0;
  auto m = sae_metrics(p, data);
  EXPECT_NEAR(m.mse, expected, 1e-12);
  EXPECT_EQ(m.mean_l0, 0.0);
  EXPECT_EQ(m.dead_fraction, 1.0);
}

TEST(SAEMetrics, MatchesDirectRecomputation) {
  auto data = sparse_mixture(300, 8, 10, 9);
  auto r = sae_train(data, toy_config(8, 1e-3, 50));
  const auto& p = r.params;
  std::vector<std::size_t> rows;
  for (std::size_t i = 0; i < 300; i += 3) rows.push_back(i);
  auto m = sae_metrics(p, data, rows, 7);

  // Straight-line loops in double from the raw parameter arrays.
  const std::size_t d = 8, h = p.d_hidden();
  const auto we = p.w_enc.data(), be = p.b_enc.data(), wd = p.w_dec.data(), bd = p.b_dec.data();
  std::vector<double> mean(d, 0);
  for (auto i : rows)
    for (std::size_t j = 0; j < d; ++j) mean[j] += data.row(i)[j] / static_cast<double>(rows.size());
  double sse = 0, sst = 0, l0 = 0;
  std::vector<int> ever(h, 0);
  for (auto i : rows) {
    const auto x = data.row(i);
    std::vector<double> f(h), xh(d);
    for (std::size_t k = 0; k < h; ++k) {
      double a = be[k];
      for (std::size_t j = 0; j < d; ++j) a += (x[j] - bd[j]) * we[j * h + k];
      f[k] = a > 0 ? a : 0;
      if (f[k] > 0) {
        l0 += 1;
        ever[k] = 1;
      }
    }
    for (std::size_t j = 0; j < d; ++j) {
      xh[j] = bd[j];
      for (std::size_t k = 0; k < h; ++k) xh[j] += f[k] * wd[k * d + j];
      sse += (x[j] - xh[j]) * (x[j] - xh[j]);
      sst += (x[j] - mean[j]) * (x[j] - mean[j]);
    }
  }
  const double n = static_cast<double>(rows.size());
  EXPECT_NEAR(m.mse, sse / (n * d), 1e-6);
  EXPECT_NEAR(m.mean_l0, l0 / n, 1e-6);
  EXPECT_NEAR(m.explained_variance, 1 - sse / sst, 1e-6);
  EXPECT_NEAR(m.dead_fraction, std::count(ever.begin(), ever.end(), 0) / static_cast<double>(h), 1e-12);
}

TEST(SAEFile, RoundTripIsByteIdentical) {
  auto data = sparse_mixture(100, 8, 10, 10);
  auto cfg = toy_config(8, 1e-3, 20);
  auto r = sae_train(data, cfg);
  HookSpec hook{1, HookPoint::kMlpOutput};
  const auto bytes = sae_to_container(r.params, cfg, hook).serialize();
  SAEConfig cfg2;
  HookSpec hook2;
  auto back = sae_from_container<float>(Container::deserialize(bytes), &cfg2, &hook2);
  EXPECT_EQ(hook2, hook);
  EXPECT_EQ(cfg2.d_hidden(), cfg.d_hidden());
  EXPECT_EQ(sae_to_container(back, cfg2, hook2).serialize(), bytes);
}

TEST(ActivationDataset, CapsRowsPerContext) {
  auto model = init_weights<float>(capture_model(512), 1);
  auto data = random_packed(3, 512, 40, 1);
  HookSpec hook{1, HookPoint::kMlpHiddenPostAct};
  auto acts = build_activation_dataset(model, data, hook);
  EXPECT_EQ(acts.n_rows(), 3u * 128u);
  EXPECT_EQ(acts.d_act, 16u);
  std::map<std::uint64_t, std::set<std::uint32_t>> per;
  for (std::size_t i = 0; i < acts.n_rows(); ++i) per[acts.context_ids[i]].insert(acts.positions[i]);
  for (const auto& [c, pos] : per) EXPECT_EQ(pos.size(), 128u);  // distinct positions

  auto short_data = random_packed(2, 50, 40, 2);
  auto short_acts = build_activation_dataset(init_weights<float>(capture_model(64), 1), short_data, hook);
  EXPECT_EQ(short_acts.n_rows(), 100u);
}

TEST(ActivationDataset, RowsMatchDirectCapture) {
  auto model = init_weights<double>(capture_model(32), 2);
  auto data = random_packed(4, 32, 40, 3);
  HookSpec hook{0, HookPoint::kMlpOutput};
  ActivationOptions opt;
  opt.tokens_per_context = 5;
  opt.batch_contexts = 3;
  auto acts = build_activation_dataset(model, data, hook, opt);
  ASSERT_EQ(acts.n_rows(), 20u);
  for (std::size_t i = 0; i < acts.n_rows(); ++i) {
    const auto row = data.row(acts.context_ids[i]);
    auto cap = forward_with_capture<double>(model, TokenBatch{row, 1, 32}, hook);
    EXPECT_EQ(acts.token_ids[i], row[acts.positions[i]]);
    for (std::size_t j = 0; j < 8; ++j) {
      EXPECT_NEAR(acts.row(i)[j], cap.activations.data()[acts.positions[i] * 8 + j], 1e-6);
    }
  }
}

TEST(ActivationDataset, ShuffleQualityChiSquare) {
  auto model = init_weights<float>(capture_model(64), 1);
  auto data = random_packed(60, 64, 40, 4);
  ActivationOptions opt;
  opt.tokens_per_context = 20;
  auto acts = build_activation_dataset(model, data, HookSpec{1, HookPoint::kMlpOutput}, opt);
  EXPECT_LT(adjacency_chi_square(acts), 6.635);

  // Sanity: an unshuffled layout fails the same test.
  auto sorted = acts;
  std::vector<std::size_t> order(sorted.n_rows());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return acts.context_ids[a] < acts.context_ids[b]; });
  for (std::size_t i = 0; i < order.size(); ++i) sorted.context_ids[i] = acts.context_ids[order[i]];
  EXPECT_GT(adjacency_chi_square(sorted), 6.635);
}

TEST(ActivationDataset, WidthMismatchIsContractError) {
  auto model = init_weights<float>(capture_model(32), 1);
  auto data = random_packed(2, 32, 40, 5);
  ActivationOptions opt;
  opt.expected_d_act = 8;
  EXPECT_THROW(build_activation_dataset(model, data, HookSpec{0, HookPoint::kMlpHiddenPostAct}, opt), ContractError);
  EXPECT_THROW(build_activation_dataset(model, data, HookSpec{5, HookPoint::kMlpOutput}), ContractError);
}

TEST(ActivationDataset, ShardRoundTrip) {
  auto model = init_weights<float>(capture_model(32), 1);
  auto data = random_packed(5, 32, 40, 6);
  auto acts = build_activation_dataset(model, data, HookSpec{1, HookPoint::kMlpOutput});
  const auto dir = std::filesystem::temp_directory_path() / "storylab_shard_test";
  std::filesystem::remove_all(dir);
  auto paths = acts.save_shards(dir, 48);
  EXPECT_EQ(paths.size(), (acts.n_rows() + 47) / 48);
  auto back = ActivationDataset::load_shards(dir);
  EXPECT_EQ(back.vectors, acts.vectors);
  EXPECT_EQ(back.context_ids, acts.context_ids);
  EXPECT_EQ(back.positions, acts.positions);
  EXPECT_EQ(back.hook, acts.hook);
  std::filesystem::remove_all(dir);
}
