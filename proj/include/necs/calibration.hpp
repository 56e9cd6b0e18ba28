#pragma once

// SPDX-License-Identifier: Apache-2.0

/**
 * @file calibration.hpp
 * @brief Datastore collection by teacher forcing, and kernel-temperature search.
 *
 * Temperature search is a stochastic hill climb:
 *
 *   tau_0     ~ U[tau_min, tau_max]
 *   tau_{t+1} = clip(tau_t + eta * eps * sgn(1 - alpha - coverage(tau_t)), tau_min, tau_max)
 *   eps       ~ N(0, tau_max - tau_min)     (second argument is the standard deviation)
 *
 * `steps` candidates are evaluated (tau_0 .. tau_{steps-1}); the one whose
 * coverage is closest to 1 - alpha wins, earliest on ties.
 */

#include <cmath>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <vector>

#include "necs/conformal.hpp"
#include "necs/datastore.hpp"
#include "necs/decoding.hpp"
#include "necs/models.hpp"
#include "necs/parallel.hpp"

namespace necs {

/// One record per (sequence, timestep), fed the gold prefix at every step.
inline std::vector<CalibrationRecord> collect_calibration(const ModelAdapter& model, std::span<const Sequence> dataset,
                                                          ScoreKind kind, std::size_t threads = 1) {
  std::vector<std::vector<CalibrationRecord>> per_seq(dataset.size());
  parallel_for(dataset.size(), threads, [&](std::size_t i) {
    const auto& seq = dataset[i];
    auto src = source_span(seq.source);
    auto& out = per_seq[i];
    out.reserve(seq.target.size());
    for (std::size_t t = 0; t < seq.target.size(); ++t) {
      auto step = model.step(src, TokenSpan(seq.target).first(t));
      out.push_back(CalibrationRecord{std::move(step.latent),
                                      static_cast<float>(nonconformity(kind, step.dist, seq.target[t])),
                                      static_cast<std::uint32_t>(t)});
    }
  });
  std::vector<CalibrationRecord> records;
  for (auto& v : per_seq) {
    for (auto& r : v) records.push_back(std::move(r));
  }
  return records;
}

struct TemperatureSearchConfig {
  double tau_min = 0.1;
  double tau_max = 10.0;
  std::size_t steps = 20;
  double eta = 0.1;
  std::size_t eval_batches = 100;
  std::size_t batch_size = 20;
  std::uint64_t seed = 0;

  void validate() const {
    if (!(tau_min > 0.0 && tau_min < tau_max)) throw std::invalid_argument("need 0 < tau_min < tau_max");
    if (steps < 1) throw std::invalid_argument("steps must be >= 1");
    if (!(eta > 0.0)) throw std::invalid_argument("eta must be positive");
    if (eval_batches < 1 || batch_size < 1) throw std::invalid_argument("eval_batches and batch_size must be >= 1");
  }
  std::size_t eval_steps() const noexcept { return eval_batches * batch_size; }
};

struct SearchPoint {
  double tau = 0.0;
  double coverage = 0.0;
};

struct TemperatureSearchResult {
  double tau = 0.0;
  double coverage = 0.0;
  std::vector<SearchPoint> trace;
};

/// Hill climb against an arbitrary coverage function tau -> [0, 1].
template <typename CoverageFn>
TemperatureSearchResult temperature_search(const TemperatureSearchConfig& cfg, MiscoverageLevel alpha,
                                           CoverageFn&& coverage) {
  cfg.validate();
  std::mt19937_64 rng(cfg.seed);
  std::normal_distribution<double> eps(0.0, cfg.tau_max - cfg.tau_min);
  double tau = std::uniform_real_distribution<double>(cfg.tau_min, cfg.tau_max)(rng);
  TemperatureSearchResult res;
  double best_gap = std::numeric_limits<double>::infinity();
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    const double cov = coverage(tau);
    res.trace.push_back({tau, cov});
    const double gap = std::abs(cov - alpha.target());
    if (gap < best_gap) {
      best_gap = gap;
      res.tau = tau;
      res.coverage = cov;
    }
    const double diff = alpha.target() - cov;
    const double sign = diff > 0.0 ? 1.0 : (diff < 0.0 ? -1.0 : 0.0);
    tau = std::clamp(tau + cfg.eta * eps(rng) * sign, cfg.tau_min, cfg.tau_max);
  }
  return res;
}

/**
 * Mean gold-token containment of NON_EX_CS sets over the first `max_steps`
 * teacher-forced steps of `heldout` (all steps when max_steps is 0).
 */
inline double evaluate_coverage_for_tau(double tau, const ModelAdapter& model, const Datastore& store,
                                        std::span<const Sequence> heldout, MiscoverageLevel alpha, std::size_t k,
                                        std::size_t max_steps = 0, std::size_t threads = 1,
                                        ScoreKind score = ScoreKind::kAdaptive) {
  if (heldout.empty()) throw std::invalid_argument("held-out set is empty");
  std::vector<std::size_t> budget(heldout.size());
  std::size_t left = max_steps == 0 ? std::numeric_limits<std::size_t>::max() : max_steps;
  for (std::size_t i = 0; i < heldout.size(); ++i) {
    budget[i] = std::min(left, heldout[i].target.size());
    left -= budget[i];
  }
  const Strategy s = strategy::NonExCS{alpha.value(), k, tau, store.metric(), score};
  const DecodeResources res{&store, nullptr};
  std::vector<std::size_t> hits(heldout.size(), 0);
  parallel_for(heldout.size(), threads, [&](std::size_t i) {
    if (budget[i] == 0) return;
    const auto& seq = heldout[i];
    const auto trace = teacher_forced_trace(model, source_span(seq.source), TokenSpan(seq.target).first(budget[i]), s, res);
    for (const auto& st : trace) hits[i] += *st.contained ? 1 : 0;
  });
  std::size_t total = 0;
  std::size_t covered = 0;
  for (std::size_t i = 0; i < heldout.size(); ++i) {
    total += budget[i];
    covered += hits[i];
  }
  if (total == 0) throw std::invalid_argument("held-out set has no target tokens");
  return static_cast<double>(covered) / static_cast<double>(total);
}

inline TemperatureSearchResult temperature_search(const TemperatureSearchConfig& cfg, const ModelAdapter& model,
                                                  const Datastore& store, std::span<const Sequence> heldout,
                                                  MiscoverageLevel alpha, std::size_t k, std::size_t threads = 1,
                                                  ScoreKind score = ScoreKind::kAdaptive) {
  return temperature_search(cfg, alpha, [&](double tau) {
    return evaluate_coverage_for_tau(tau, model, store, heldout, alpha, k, cfg.eval_steps(), threads, score);
  });
}

}  // namespace necs
