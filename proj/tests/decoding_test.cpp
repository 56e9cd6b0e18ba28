// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include "necs/calibration.hpp"
#include "necs/decoding.hpp"
#include "necs/synthetic.hpp"

using namespace necs;

namespace {

TokenDistribution four() { return TokenDistribution({0.5, 0.3, 0.15, 0.05}); }

struct Fixture {
  SyntheticSource src{{12, 2, 0.5, 3.0, 8}};
  MarkovLM lm;
  Datastore store;
  std::vector<Sequence> test;

  Fixture() {
    MarkovOptions o;
    o.order = 2;
    o.smoothing = 0.1;
    o.latent_dim = 8;
    o.seed = 1;
    o.eos = 12;
    lm = train_markov(src.sample_corpus(200, 15, 1, TokenId{12}), 13, o);
    store = Datastore::build(collect_calibration(lm, src.sample_corpus(100, 15, 2, TokenId{12}), ScoreKind::kAdaptive),
                             Metric::kSquaredL2);
    test = src.sample_corpus(20, 15, 3, TokenId{12});
  }
};

const Fixture& fixture() {
  static const Fixture f;
  return f;
}

}  // namespace

TEST(Nucleus, SmallestPrefixReachingMass) {
  const auto d = four();
  EXPECT_EQ(nucleus_set(d, 0.9).token_ids, (std::vector<TokenId>{0, 1, 2}));
  EXPECT_EQ(nucleus_set(d, 0.8).token_ids, (std::vector<TokenId>{0, 1}));
  EXPECT_EQ(nucleus_set(d, 1.0).size(), 4u);
  EXPECT_EQ(nucleus_set(d, 0.4).token_ids, (std::vector<TokenId>{0}));
  EXPECT_THROW(nucleus_set(d, 0.0), std::invalid_argument);
  EXPECT_THROW(nucleus_set(d, 1.5), std::invalid_argument);
}

TEST(TopK, RankPrefixAndRenormalizedSampling) {
  const auto d = four();
  const auto set = topk_set(d, 2);
  EXPECT_EQ(set.token_ids, (std::vector<TokenId>{0, 1}));
  EXPECT_EQ(topk_set(d, 10).size(), 4u);
  EXPECT_THROW(topk_set(d, 0), std::invalid_argument);
  std::mt19937_64 rng(5);
  const int n = 100000;
  int zeros = 0;
  for (int i = 0; i < n; ++i) {
    const TokenId y = sample_from_set(d, set, rng);
    ASSERT_TRUE(y == 0 || y == 1);
    zeros += y == 0 ? 1 : 0;
  }
  const double se = std::sqrt(0.625 * 0.375 / n);
  EXPECT_NEAR(static_cast<double>(zeros) / n, 0.625, 4.0 * se);
}

TEST(Sampling, SingletonAndSeeded) {
  const auto d = four();
  std::mt19937_64 rng(1);
  const auto single = rank_prefix(d, 1, Quantile(0.5));
  for (int i = 0; i < 100; ++i) EXPECT_EQ(sample_from_set(d, single, rng), 0u);
  const auto full = nucleus_set(d, 1.0);
  std::mt19937_64 a(42), b(42);
  for (int i = 0; i < 100; ++i) EXPECT_EQ(sample_from_set(d, full, a), sample_from_set(d, full, b));
  EXPECT_THROW(sample_from_set(d, PredictionSet{}, rng), std::invalid_argument);
}

TEST(Sampling, FullNucleusMatchesDistribution) {
  const auto d = four();
  const auto set = nucleus_set(d, 1.0);
  std::mt19937_64 rng(99);
  const int n = 10000;
  std::vector<int> counts(4, 0);
  for (int i = 0; i < n; ++i) ++counts[sample_from_set(d, set, rng)];
  double chi2 = 0.0;
  for (TokenId y = 0; y < 4; ++y) {
    const double e = n * d.prob(y);
    chi2 += (counts[y] - e) * (counts[y] - e) / e;
  }
  // 0.999 quantile of chi-square with 3 degrees of freedom
  EXPECT_LT(chi2, 16.27);
}

TEST(Generate, GreedyFollowsAlternation) {
  const std::vector<Sequence> corpus{Sequence{std::nullopt, {0, 1, 0, 1, 0, 1, 0, 1}}};
  MarkovOptions o;
  o.order = 1;
  o.smoothing = 0.01;
  const auto lm = train_markov(corpus, 2, o);
  GenerationConfig cfg;
  cfg.strategy = strategy::Greedy{};
  cfg.max_len = 6;
  const std::vector<TokenId> prompt{0};
  EXPECT_EQ(generate(lm, std::nullopt, prompt, cfg).tokens, (std::vector<TokenId>{1, 0, 1, 0, 1, 0}));
}

TEST(Generate, SingleBeamEqualsGreedy) {
  const auto& f = fixture();
  for (std::size_t i = 0; i < f.test.size(); ++i) {
    const auto prompt = TokenSpan(f.test[i].target).first(3);
    GenerationConfig g;
    g.strategy = strategy::Greedy{};
    g.max_len = 12;
    GenerationConfig b = g;
    b.strategy = strategy::Beam{1};
    EXPECT_EQ(generate(f.lm, std::nullopt, prompt, g).tokens, generate(f.lm, std::nullopt, prompt, b).tokens);
  }
}

TEST(Generate, BeamFindsHigherScoringSequence) {
  const auto& f = fixture();
  auto logprob = [&](TokenSpan prompt, const std::vector<TokenId>& toks) {
    std::vector<TokenId> prefix(prompt.begin(), prompt.end());
    double lp = 0.0;
    for (TokenId y : toks) {
      lp += std::log(f.lm.step(std::nullopt, prefix).dist.prob(y));
      prefix.push_back(y);
    }
    return lp;
  };
  for (std::size_t i = 0; i < 10; ++i) {
    const auto prompt = TokenSpan(f.test[i].target).first(2);
    GenerationConfig g;
    g.strategy = strategy::Greedy{};
    g.max_len = 4;
    GenerationConfig b = g;
    b.strategy = strategy::Beam{4};
    const auto gt = generate(f.lm, std::nullopt, prompt, g).tokens;
    const auto bt = generate(f.lm, std::nullopt, prompt, b).tokens;
    if (gt.size() == bt.size()) {
      EXPECT_GE(logprob(prompt, bt), logprob(prompt, gt) - 1e-12);
    }
  }
}

TEST(Generate, SampledTokensLieInTheirSets) {
  const auto& f = fixture();
  const DecodeResources res{&f.store, nullptr};
  const Strategy s = strategy::NonExCS{0.1, 50, 0.5, Metric::kSquaredL2};
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    GenerationConfig cfg;
    cfg.strategy = s;
    cfg.max_len = 15;
    cfg.seed = seed;
    const auto g = generate(f.lm, std::nullopt, {}, cfg, res);
    std::vector<TokenId> prefix;
    for (std::size_t t = 0; t < g.tokens.size(); ++t) {
      const auto step = f.lm.step(std::nullopt, prefix);
      const auto set = prediction_set_for(s, step.dist, step.latent, res);
      EXPECT_TRUE(set.contains(g.tokens[t]));
      EXPECT_EQ(set.size(), g.trace[t].set_size);
      prefix.push_back(g.tokens[t]);
    }
    const auto again = generate(f.lm, std::nullopt, {}, cfg, res);
    EXPECT_EQ(again.tokens, g.tokens);
  }
}

TEST(Retrieval, SingleNeighborGivesInfiniteThreshold) {
  const auto& f = fixture();
  const auto d = f.lm.step(std::nullopt, {}).dist;
  const auto z = f.lm.context_latent({});
  const auto set = next_prediction_set_const(z, d, f.store, 1, MiscoverageLevel(0.1));
  EXPECT_FALSE(set.q_hat.is_finite());
  EXPECT_EQ(set.size(), d.vocab_size());
}

TEST(Retrieval, ZeroScoresGiveSingleton) {
  std::vector<CalibrationRecord> recs;
  std::mt19937_64 rng(3);
  std::normal_distribution<float> nd;
  for (int i = 0; i < 100; ++i) recs.push_back({{nd(rng), nd(rng), nd(rng)}, 0.0f, 0});
  const auto store = Datastore::build(recs, Metric::kSquaredL2);
  const std::vector<float> z{0.1f, 0.2f, 0.3f};
  const auto d = four();
  EXPECT_EQ(next_prediction_set_const(z, d, store, 100, MiscoverageLevel(0.1)).size(), 1u);
  EXPECT_EQ(next_prediction_set_nonex(z, d, store, 100, 1.0, Metric::kSquaredL2, MiscoverageLevel(0.1)).size(), 1u);
}

TEST(Retrieval, FlatKernelMatchesConstantWeights) {
  const auto& f = fixture();
  const DecodeResources res{&f.store, nullptr};
  const Strategy flat = strategy::NonExCS{0.1, 40, 1e300, Metric::kSquaredL2};
  const Strategy unit = strategy::ConstWeightCS{0.1, 40};
  for (const auto& seq : f.test) {
    const auto a = teacher_forced_trace(f.lm, std::nullopt, seq.target, flat, res);
    const auto b = teacher_forced_trace(f.lm, std::nullopt, seq.target, unit, res);
    ASSERT_EQ(a.size(), b.size());
    for (std::size_t t = 0; t < a.size(); ++t) {
      EXPECT_EQ(a[t].set_size, b[t].set_size);
      EXPECT_EQ(a[t].q_hat.value(), b[t].q_hat.value());
    }
  }
}

TEST(Retrieval, MetricMismatchAndMissingResources) {
  const auto& f = fixture();
  const auto d = f.lm.step(std::nullopt, {}).dist;
  const auto z = f.lm.context_latent({});
  EXPECT_THROW(next_prediction_set_nonex(z, d, f.store, 10, 1.0, Metric::kCosine, MiscoverageLevel(0.1)),
               std::invalid_argument);
  GenerationConfig cfg;
  cfg.strategy = strategy::ConstWeightCS{};
  EXPECT_THROW(generate(f.lm, std::nullopt, {}, cfg), std::invalid_argument);
  cfg.strategy = strategy::EntropyConformal{};
  EXPECT_THROW(generate(f.lm, std::nullopt, {}, cfg), std::invalid_argument);
  cfg.strategy = strategy::NonExCS{0.1, 10, -1.0};
  EXPECT_THROW(generate(f.lm, std::nullopt, {}, cfg, {&f.store, nullptr}), std::invalid_argument);
  cfg.strategy = strategy::Nucleus{};
  cfg.softmax_temperature = 0.0;
  EXPECT_THROW(generate(f.lm, std::nullopt, {}, cfg), std::invalid_argument);
}

TEST(TeacherForcing, ContainmentMatchesSet) {
  const auto& f = fixture();
  const DecodeResources res{&f.store, nullptr};
  const Strategy strategies[] = {strategy::Greedy{}, strategy::TopK{3}, strategy::Nucleus{0.7},
                                 strategy::NonExCS{0.2, 30, 0.5, Metric::kSquaredL2}};
  for (const auto& s : strategies) {
    for (const auto& seq : f.test) {
      const auto trace = teacher_forced_trace(f.lm, std::nullopt, seq.target, s, res);
      ASSERT_EQ(trace.size(), seq.target.size());
      for (std::size_t t = 0; t < trace.size(); ++t) {
        const auto step = f.lm.step(std::nullopt, TokenSpan(seq.target).first(t));
        const auto set = prediction_set_for(s, step.dist, step.latent, res);
        EXPECT_EQ(*trace[t].contained, set.contains(seq.target[t]));
        EXPECT_EQ(trace[t].token, seq.target[t]);
      }
    }
  }
}

TEST(EntropyBins, SingleBinIsGlobalQuantile) {
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<EntropyScore> data(500);
  std::vector<double> scores;
  for (auto& d : data) {
    d = {u(rng) * std::log(10.0), u(rng)};
    scores.push_back(d.score);
  }
  const auto cal = calibrate_entropy_bins(data, MiscoverageLevel(0.1), 1, 10);
  EXPECT_EQ(cal.bin_q[0].value(), standard_quantile(scores, MiscoverageLevel(0.1)).value());
  EXPECT_EQ(cal.global.value(), cal.bin_q[0].value());
}

TEST(EntropyBins, SeparatedClustersGetTheirOwnThresholds) {
  std::vector<EntropyScore> data;
  for (int i = 0; i < 100; ++i) data.push_back({0.1, 0.2 + 0.001 * i});
  for (int i = 0; i < 100; ++i) data.push_back({2.0, 0.8 + 0.001 * i});
  const auto cal = calibrate_entropy_bins(data, MiscoverageLevel(0.1), 4, 10);
  EXPECT_LT(cal.quantile_for(0.1).value(), 0.31);
  EXPECT_GT(cal.quantile_for(2.0).value(), 0.8);
  EXPECT_EQ(cal.bin_count[cal.bin_of(0.1)], 100u);
  // bin without data falls back to the pooled quantile
  const std::size_t empty = cal.bin_of(1.2);
  ASSERT_EQ(cal.bin_count[empty], 0u);
  EXPECT_EQ(cal.bin_q[empty].value(), cal.global.value());
  EXPECT_EQ(cal.bin_of(-1.0), 0u);
  EXPECT_EQ(cal.bin_of(99.0), 3u);
}

TEST(EntropyBins, Validates) {
  const std::vector<EntropyScore> one{{0.5, 0.5}};
  EXPECT_THROW(calibrate_entropy_bins(one, MiscoverageLevel(0.1), 0, 10), std::invalid_argument);
  EXPECT_THROW(calibrate_entropy_bins({}, MiscoverageLevel(0.1), 3, 10), std::invalid_argument);
  EXPECT_THROW(calibrate_entropy_bins(one, MiscoverageLevel(0.1), 3, 1), std::invalid_argument);
}

TEST(Strategy, NamesAndValidation) {
  EXPECT_EQ(strategy_name(strategy::NonExCS{}), "non_ex_cs");
  EXPECT_EQ(strategy_name(strategy::EntropyConformal{}), "entropy_conformal");
  EXPECT_THROW(validate(strategy::Nucleus{0.0}), std::invalid_argument);
  EXPECT_THROW(validate(strategy::TopK{0}), std::invalid_argument);
  EXPECT_THROW(validate(strategy::Beam{0}), std::invalid_argument);
  EXPECT_THROW(validate(strategy::ConstWeightCS{1.0, 5}), std::invalid_argument);
  EXPECT_NO_THROW(validate(strategy::Greedy{}));
}
