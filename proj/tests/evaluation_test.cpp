// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <sstream>

#include "necs/calibration.hpp"
#include "necs/evaluation.hpp"
#include "necs/report_io.hpp"
#include "necs/synthetic.hpp"
#include "oracles.hpp"

using namespace necs;

namespace {

CoverageBin bin(std::size_t count, double coverage) {
  CoverageBin b;
  b.count = count;
  b.coverage = coverage;
  return b;
}

struct Fixture {
  SyntheticSource src{{10, 2, 0.5, 3.0, 77}};
  MarkovLM lm;
  Datastore store;
  std::vector<Sequence> test;

  Fixture() {
    MarkovOptions o;
    o.order = 2;
    o.smoothing = 0.1;
    o.latent_dim = 8;
    o.seed = 2;
    o.readout_scale = 2.0;
    lm = train_markov(src.sample_corpus(200, 15, 1), 10, o);
    store = Datastore::build(collect_calibration(lm, src.sample_corpus(100, 15, 2), ScoreKind::kAdaptive),
                             Metric::kSquaredL2);
    test = src.sample_corpus(30, 15, 3);
  }
};

const Fixture& fixture() {
  static const Fixture f;
  return f;
}

}  // namespace

TEST(Metrics, HandComputedEcgAndSsc) {
  const std::vector<CoverageBin> bins{bin(100, 0.95), bin(0, 0.0), bin(100, 0.80)};
  EXPECT_NEAR(ecg(bins, MiscoverageLevel(0.1)), 0.05, 1e-12);
  EXPECT_DOUBLE_EQ(ssc(bins), 0.80);
  const std::vector<CoverageBin> zero{bin(10, 0.0)};
  EXPECT_NEAR(ecg(zero, MiscoverageLevel(0.1)), 0.9, 1e-12);
  EXPECT_EQ(ssc(zero), 0.0);
  const std::vector<CoverageBin> none{bin(0, 0.0)};
  EXPECT_THROW(ecg(none, MiscoverageLevel(0.1)), std::invalid_argument);
  EXPECT_THROW(ssc(none), std::invalid_argument);
}

TEST(Metrics, SizeBinsSpanTheVocabulary) {
  EXPECT_EQ(size_bin(1, 100, 75), 0u);
  EXPECT_EQ(size_bin(100, 100, 75), 74u);
  EXPECT_EQ(size_bin(1, 1, 5), 0u);
  std::vector<StepTrace> steps;
  for (std::size_t s = 1; s <= 10; ++s) steps.push_back(StepTrace{0, s, Quantile(0.5), 0.0, 0, s % 2 == 0});
  const auto bins = bin_by_set_size(steps, 10, 3);
  std::size_t total = 0;
  for (const auto& b : bins) total += b.count;
  EXPECT_EQ(total, 10u);
  EXPECT_DOUBLE_EQ(bins.front().width_lo, 1.0);
  EXPECT_DOUBLE_EQ(bins.back().width_hi, 10.0);
  steps.push_back(StepTrace{});
  EXPECT_THROW(bin_by_set_size(steps, 10, 3), std::invalid_argument);
}

TEST(Spearman, HandCases) {
  const std::vector<double> a{1, 2, 3, 4}, b{2, 1, 4, 3}, c{10, 20, 30, 40}, d{4, 3, 2, 1};
  EXPECT_NEAR(spearman_rho(a, b), 0.6, 1e-12);
  EXPECT_NEAR(spearman_rho(a, c), 1.0, 1e-12);
  EXPECT_NEAR(spearman_rho(a, d), -1.0, 1e-12);
  const std::vector<double> flat{1, 1, 1, 1};
  EXPECT_THROW(spearman_rho(a, flat), std::invalid_argument);
  EXPECT_THROW(spearman_rho(std::vector<double>{1}, std::vector<double>{1}), std::invalid_argument);
}

TEST(Spearman, MatchesOracleWithTies) {
  std::mt19937_64 rng(6);
  std::uniform_int_distribution<int> u(0, 6);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> x(3 + trial % 20), y(x.size());
    for (auto& v : x) v = u(rng);
    for (auto& v : y) v = u(rng);
    const bool constant = std::all_of(x.begin(), x.end(), [&](double v) { return v == x[0]; }) ||
                          std::all_of(y.begin(), y.end(), [&](double v) { return v == y[0]; });
    if (constant) continue;
    EXPECT_NEAR(spearman_rho(x, y), oracle::spearman(x, y), 1e-12);
  }
}

TEST(EvaluateCoverage, FullVocabularyCoversEverything) {
  const auto& f = fixture();
  const auto r = evaluate_coverage(f.lm, f.test, strategy::Nucleus{1.0}, {}, MiscoverageLevel(0.1));
  EXPECT_EQ(r.coverage, 1.0);
  EXPECT_EQ(r.avg_width_fraction, 1.0);
  EXPECT_EQ(r.ecg, 0.0);
  EXPECT_EQ(r.n_steps, 30u * 15u);
}

TEST(EvaluateCoverage, TopOneEqualsArgmaxAccuracy) {
  const auto& f = fixture();
  std::size_t hits = 0, total = 0;
  for (const auto& seq : f.test) {
    for (std::size_t t = 0; t < seq.target.size(); ++t, ++total) {
      const auto d = f.lm.distribution(TokenSpan(seq.target).first(t));
      hits += d.argmax() == seq.target[t] ? 1 : 0;
    }
  }
  const auto r = evaluate_coverage(f.lm, f.test, strategy::Greedy{}, {}, MiscoverageLevel(0.1));
  EXPECT_DOUBLE_EQ(r.coverage, static_cast<double>(hits) / static_cast<double>(total));
  EXPECT_DOUBLE_EQ(r.mean_set_size, 1.0);
}

TEST(EvaluateCoverage, ReportInvariants) {
  const auto& f = fixture();
  const DecodeResources res{&f.store, nullptr};
  const Strategy strategies[] = {strategy::TopK{3}, strategy::NonExCS{0.1, 50, 0.5, Metric::kSquaredL2},
                                 strategy::ConstWeightCS{0.2, 20}};
  for (const auto& s : strategies) {
    EvaluationOptions opt;
    opt.n_bins = 7;
    const auto r = evaluate_coverage(f.lm, f.test, s, res, MiscoverageLevel(0.1), opt);
    std::size_t total = 0;
    for (const auto& b : r.bins) total += b.count;
    EXPECT_EQ(total, r.n_steps);
    EXPECT_LE(r.ssc, r.coverage + 1e-12);
    EXPECT_LE(r.ecg, 0.9 + 1e-12);
    EXPECT_GE(r.ecg, 0.0);
    EXPECT_GE(r.inf_fraction, 0.0);
    EXPECT_LE(r.inf_fraction, 1.0);
    EXPECT_NEAR(r.avg_width_fraction, r.mean_set_size / 10.0, 1e-12);
  }
}

TEST(EvaluateCoverage, ThreadsDoNotChangeNoisyResults) {
  const auto& f = fixture();
  const DecodeResources res{&f.store, nullptr};
  EvaluationOptions a;
  a.noise = LatentNoise{0.05, 3};
  EvaluationOptions b = a;
  b.threads = 4;
  const Strategy s = strategy::NonExCS{0.1, 50, 0.5, Metric::kSquaredL2};
  const auto x = evaluate_coverage(f.lm, f.test, s, res, MiscoverageLevel(0.1), a);
  const auto y = evaluate_coverage(f.lm, f.test, s, res, MiscoverageLevel(0.1), b);
  EXPECT_EQ(to_json(x).dump(), to_json(y).dump());
}

TEST(Shift, ZeroNoiseMatchesPlainEvaluation) {
  const auto& f = fixture();
  const DecodeResources res{&f.store, nullptr};
  const std::vector<Strategy> strategies{strategy::NonExCS{0.1, 50, 0.5, Metric::kSquaredL2}, strategy::Nucleus{0.9}};
  const std::vector<double> levels{0.0, 0.05, 0.1};
  const std::vector<std::uint64_t> seeds{1, 2};
  const auto reports = run_shift_experiment(f.lm, f.test, strategies, levels, res, MiscoverageLevel(0.1), seeds);
  ASSERT_EQ(reports.size(), 2u);
  for (std::size_t i = 0; i < reports.size(); ++i) {
    const auto plain = evaluate_coverage(f.lm, f.test, strategies[i], res, MiscoverageLevel(0.1));
    ASSERT_EQ(reports[i].runs.size(), levels.size() * seeds.size());
    ASSERT_EQ(reports[i].levels.size(), levels.size());
    EXPECT_EQ(reports[i].runs[0].coverage, plain.coverage);
    EXPECT_EQ(reports[i].levels[0].coverage.mean, plain.coverage);
    EXPECT_EQ(reports[i].levels[0].coverage.std, 0.0);
  }
  std::ostringstream csv;
  write_shift_csv(csv, reports);
  const auto text = csv.str();
  EXPECT_EQ(static_cast<std::size_t>(std::count(text.begin(), text.end(), '\n')), 1 + 2 * levels.size() * seeds.size());
  const auto j = to_json(reports[0]);
  EXPECT_EQ(j["levels"].size(), levels.size());
  EXPECT_TRUE(j["levels"][0].contains("coverage"));
}

TEST(Shift, Validates) {
  const auto& f = fixture();
  const std::vector<Strategy> s{strategy::Greedy{}};
  const std::vector<std::uint64_t> seeds{1};
  const std::vector<double> bad{0.1, 0.05}, neg{-0.1}, ok{0.0};
  EXPECT_THROW(run_shift_experiment(f.lm, f.test, s, bad, {}, MiscoverageLevel(0.1), seeds), std::invalid_argument);
  EXPECT_THROW(run_shift_experiment(f.lm, f.test, s, neg, {}, MiscoverageLevel(0.1), seeds), std::invalid_argument);
  EXPECT_THROW(run_shift_experiment(f.lm, f.test, s, ok, {}, MiscoverageLevel(0.1), {}), std::invalid_argument);
}

TEST(MeanStd, SampleStandardDeviation) {
  const std::vector<double> xs{2, 4, 4, 4, 5, 5, 7, 9};
  const auto m = mean_std(xs);
  EXPECT_DOUBLE_EQ(m.mean, 5.0);
  EXPECT_NEAR(m.std, std::sqrt(32.0 / 7.0), 1e-12);
  EXPECT_EQ(mean_std(std::vector<double>{3.0}).std, 0.0);
}
