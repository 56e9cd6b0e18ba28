#pragma once

// SPDX-License-Identifier: Apache-2.0

/**
 * @file evaluation.hpp
 * @brief Coverage reports, size-stratified metrics, and the latent-noise shift harness.
 *
 * Steps are binned by prediction-set size into B equal-width bins over [1, C].
 *
 *   ECG = sum_b (|B_b| / N) * max(1 - alpha - coverage(B_b), 0)
 *   SSC = min over non-empty bins of coverage(B_b)
 */

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "necs/conformal.hpp"
#include "necs/decoding.hpp"
#include "necs/models.hpp"
#include "necs/parallel.hpp"

namespace necs {

struct CoverageBin {
  std::size_t count = 0;
  double coverage = 0.0;
  double width_lo = 0.0;  ///< set-size range covered by the bin, [lo, hi)
  double width_hi = 0.0;
};

struct CoverageReport {
  std::string strategy;
  double alpha = 0.1;
  std::size_t vocab_size = 0;
  std::size_t n_steps = 0;
  double coverage = 0.0;
  double avg_width_fraction = 0.0;
  double mean_set_size = 0.0;
  std::optional<double> mean_q_hat;  ///< over finite thresholds only
  double inf_fraction = 0.0;         ///< share of steps whose threshold was INF
  std::vector<CoverageBin> bins;
  double ecg = 0.0;
  double ssc = 0.0;
  std::optional<double> spearman_rho;  ///< entropy vs set size; empty when undefined
};

inline std::size_t size_bin(std::size_t set_size, std::size_t vocab_size, std::size_t n_bins) {
  if (vocab_size <= 1) return 0;
  const double x = static_cast<double>(set_size - 1) / static_cast<double>(vocab_size - 1) * static_cast<double>(n_bins);
  return std::min(static_cast<std::size_t>(x), n_bins - 1);
}

inline std::vector<CoverageBin> bin_by_set_size(std::span<const StepTrace> steps, std::size_t vocab_size,
                                                std::size_t n_bins) {
  if (n_bins < 1) throw std::invalid_argument("need at least one bin");
  std::vector<CoverageBin> bins(n_bins);
  std::vector<std::size_t> covered(n_bins, 0);
  const double span_c = static_cast<double>(vocab_size > 1 ? vocab_size - 1 : 1);
  for (std::size_t b = 0; b < n_bins; ++b) {
    bins[b].width_lo = 1.0 + span_c * static_cast<double>(b) / static_cast<double>(n_bins);
    bins[b].width_hi = 1.0 + span_c * static_cast<double>(b + 1) / static_cast<double>(n_bins);
  }
  for (const auto& s : steps) {
    if (!s.contained) throw std::invalid_argument("binning needs teacher-forced steps");
    const auto b = size_bin(s.set_size, vocab_size, n_bins);
    ++bins[b].count;
    covered[b] += *s.contained ? 1 : 0;
  }
  for (std::size_t b = 0; b < n_bins; ++b) {
    if (bins[b].count > 0) bins[b].coverage = static_cast<double>(covered[b]) / static_cast<double>(bins[b].count);
  }
  return bins;
}

/// Expected coverage gap; overcoverage contributes nothing.
inline double ecg(std::span<const CoverageBin> bins, MiscoverageLevel alpha) {
  std::size_t n = 0;
  for (const auto& b : bins) n += b.count;
  if (n == 0) throw std::invalid_argument("ECG over zero predictions");
  double gap = 0.0;
  for (const auto& b : bins) {
    if (b.count == 0) continue;
    gap += static_cast<double>(b.count) / static_cast<double>(n) * std::max(alpha.target() - b.coverage, 0.0);
  }
  return gap;
}

/// Size-stratified coverage: the worst coverage over non-empty bins.
inline double ssc(std::span<const CoverageBin> bins) {
  double worst = std::numeric_limits<double>::infinity();
  for (const auto& b : bins) {
    if (b.count > 0) worst = std::min(worst, b.coverage);
  }
  if (!std::isfinite(worst)) throw std::invalid_argument("SSC needs at least one non-empty bin");
  return worst;
}

namespace detail {
inline std::vector<double> average_ranks(std::span<const double> xs) {
  std::vector<std::size_t> order(xs.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return xs[a] < xs[b]; });
  std::vector<double> ranks(xs.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && xs[order[j + 1]] == xs[order[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = r;
    i = j + 1;
  }
  return ranks;
}
}  // namespace detail

/// Spearman rank correlation with average ranks for ties.
inline double spearman_rho(std::span<const double> xs, std::span<const double> ys) {
  if (xs.size() != ys.size()) throw std::invalid_argument("spearman_rho: series differ in length");
  if (xs.size() < 2) throw std::invalid_argument("spearman_rho needs at least two points");
  const auto rx = detail::average_ranks(xs);
  const auto ry = detail::average_ranks(ys);
  const double n = static_cast<double>(xs.size());
  const double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / n;
  const double my = std::accumulate(ry.begin(), ry.end(), 0.0) / n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) throw std::invalid_argument("spearman_rho undefined for a constant series");
  return sxy / std::sqrt(sxx * syy);
}

/// Aggregates teacher-forced steps into a report.
inline CoverageReport summarize_steps(std::span<const StepTrace> steps, std::size_t vocab_size, MiscoverageLevel alpha,
                                      std::size_t n_bins, std::string strategy) {
  if (steps.empty()) throw std::invalid_argument("no steps to summarize");
  CoverageReport r;
  r.strategy = std::move(strategy);
  r.alpha = alpha.value();
  r.vocab_size = vocab_size;
  r.n_steps = steps.size();
  std::size_t covered = 0, finite = 0;
  double sizes = 0.0, qsum = 0.0;
  std::vector<double> entropies, set_sizes;
  entropies.reserve(steps.size());
  set_sizes.reserve(steps.size());
  for (const auto& s : steps) {
    covered += s.contained.value_or(false) ? 1 : 0;
    sizes += static_cast<double>(s.set_size);
    if (s.q_hat.is_finite()) {
      ++finite;
      qsum += s.q_hat.value();
    }
    entropies.push_back(s.entropy);
    set_sizes.push_back(static_cast<double>(s.set_size));
  }
  const double n = static_cast<double>(steps.size());
  r.coverage = static_cast<double>(covered) / n;
  r.mean_set_size = sizes / n;
  r.avg_width_fraction = r.mean_set_size / static_cast<double>(vocab_size);
  if (finite > 0) r.mean_q_hat = qsum / static_cast<double>(finite);
  r.inf_fraction = static_cast<double>(steps.size() - finite) / n;
  r.bins = bin_by_set_size(steps, vocab_size, n_bins);
  r.ecg = ecg(r.bins, alpha);
  r.ssc = ssc(r.bins);
  try {
    r.spearman_rho = spearman_rho(entropies, set_sizes);
  } catch (const std::invalid_argument&) {
    r.spearman_rho = std::nullopt;
  }
  return r;
}

struct EvaluationOptions {
  std::size_t n_bins = 75;
  double softmax_temperature = 1.0;
  std::optional<LatentNoise> noise;  ///< per-sequence noise seeds derive from noise->seed
  std::size_t threads = 1;
};

/// Teacher-forced steps of `test_set` in corpus order.
inline std::vector<StepTrace> collect_steps(const ModelAdapter& model, std::span<const Sequence> test_set,
                                            const Strategy& s, const DecodeResources& res,
                                            const EvaluationOptions& opt = {}) {
  if (test_set.empty()) throw std::invalid_argument("test set is empty");
  check_resources(s, res);
  std::vector<std::vector<StepTrace>> per_seq(test_set.size());
  parallel_for(test_set.size(), opt.threads, [&](std::size_t i) {
    std::optional<LatentNoise> noise = opt.noise;
    if (noise) noise->seed = detail::hash_combine(noise->seed, i);
    per_seq[i] = teacher_forced_trace(model, source_span(test_set[i].source), test_set[i].target, s, res,
                                      opt.softmax_temperature, noise);
  });
  std::vector<StepTrace> steps;
  for (auto& v : per_seq) steps.insert(steps.end(), v.begin(), v.end());
  if (steps.empty()) throw std::invalid_argument("test set has no target tokens");
  return steps;
}

/// Teacher-forced coverage of a strategy: does the set contain the gold token?
inline CoverageReport evaluate_coverage(const ModelAdapter& model, std::span<const Sequence> test_set, const Strategy& s,
                                        const DecodeResources& res, MiscoverageLevel alpha,
                                        const EvaluationOptions& opt = {}) {
  const auto steps = collect_steps(model, test_set, s, res, opt);
  return summarize_steps(steps, model.vocab_size(), alpha, opt.n_bins, strategy_name(s));
}

// ============================================================================
// Latent-noise shift experiment
// ============================================================================

struct ShiftRun {
  double variance = 0.0;
  std::uint64_t seed = 0;
  double coverage = 0.0;
  double avg_width_fraction = 0.0;
  double mean_set_size = 0.0;
  std::optional<double> mean_q_hat;
  double inf_fraction = 0.0;
};

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;  ///< sample standard deviation, 0 for a single seed
};

struct ShiftLevel {
  double variance = 0.0;
  MeanStd coverage;
  MeanStd avg_width_fraction;
  MeanStd mean_set_size;
  std::optional<MeanStd> mean_q_hat;  ///< over seeds with a finite mean threshold
  MeanStd inf_fraction;
};

struct ShiftReport {
  std::string strategy;
  std::vector<ShiftRun> runs;  ///< one per (level, seed), level-major
  std::vector<ShiftLevel> levels;
};

inline const std::vector<double>& default_noise_levels() {
  static const std::vector<double> levels{0.0, 0.025, 0.05, 0.075, 0.1};
  return levels;
}

inline MeanStd mean_std(std::span<const double> xs) {
  MeanStd m;
  if (xs.empty()) return m;
  m.mean = std::accumulate(xs.begin(), xs.end(), 0.0) / static_cast<double>(xs.size());
  if (xs.size() > 1) {
    double ss = 0.0;
    for (double x : xs) ss += (x - m.mean) * (x - m.mean);
    m.std = std::sqrt(ss / static_cast<double>(xs.size() - 1));
  }
  return m;
}

/**
 * For each strategy, noise level and seed: injects N(0, variance) noise into
 * every latent before retrieval and set construction (the output distribution
 * moves through the model's readout), then evaluates coverage.
 */
inline std::vector<ShiftReport> run_shift_experiment(const ModelAdapter& model, std::span<const Sequence> test_set,
                                                     std::span<const Strategy> strategies,
                                                     std::span<const double> noise_levels, const DecodeResources& res,
                                                     MiscoverageLevel alpha, std::span<const std::uint64_t> seeds,
                                                     const EvaluationOptions& opt = {}) {
  if (noise_levels.empty()) throw std::invalid_argument("no noise levels");
  if (seeds.empty()) throw std::invalid_argument("no seeds");
  for (std::size_t i = 0; i < noise_levels.size(); ++i) {
    if (!(noise_levels[i] >= 0.0)) throw std::invalid_argument("noise levels must be non-negative");
    if (i > 0 && !(noise_levels[i] > noise_levels[i - 1])) throw std::invalid_argument("noise levels must be strictly increasing");
  }
  std::vector<ShiftReport> out;
  for (const auto& s : strategies) {
    ShiftReport rep;
    rep.strategy = strategy_name(s);
    for (double var : noise_levels) {
      std::vector<double> cov, width, size, q, inf;
      for (std::uint64_t seed : seeds) {
        EvaluationOptions o = opt;
        o.noise = LatentNoise{var, seed};
        const auto r = evaluate_coverage(model, test_set, s, res, alpha, o);
        rep.runs.push_back({var, seed, r.coverage, r.avg_width_fraction, r.mean_set_size, r.mean_q_hat, r.inf_fraction});
        cov.push_back(r.coverage);
        width.push_back(r.avg_width_fraction);
        size.push_back(r.mean_set_size);
        inf.push_back(r.inf_fraction);
        if (r.mean_q_hat) q.push_back(*r.mean_q_hat);
      }
      ShiftLevel lvl;
      lvl.variance = var;
      lvl.coverage = mean_std(cov);
      lvl.avg_width_fraction = mean_std(width);
      lvl.mean_set_size = mean_std(size);
      lvl.inf_fraction = mean_std(inf);
      if (!q.empty()) lvl.mean_q_hat = mean_std(q);
      rep.levels.push_back(lvl);
    }
    out.push_back(std::move(rep));
  }
  return out;
}

}  // namespace necs
