#pragma once

// SPDX-License-Identifier: Apache-2.0

/**
 * @file hallucination.hpp
 * @brief Source-ablation intervention and a Bayes-factor hallucination test.
 *
 * A sequence is generated with source attention, then the same tokens are
 * replayed without the source. The per-step set sizes of the two passes form
 * a pair (S_t(x), S_t(empty)). Per-timestep Normal models are fitted for each
 * cohort, and a single observed trace is scored as
 *
 *   log BF = sum_t log N(S_t | normal_t) - log N(S_t | hallucinatory_t)
 *
 * log BF >= 3 decides "generating normally", <= -3 decides "hallucinating",
 * anything in between abstains.
 */

#include <cmath>
#include <numbers>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "necs/decoding.hpp"
#include "necs/models.hpp"

namespace necs {

struct SetSizeTrace {
  std::vector<std::size_t> sizes;
  bool with_source = true;
};

struct AblatedPair {
  std::vector<TokenId> tokens;
  SetSizeTrace with_source;
  SetSizeTrace without_source;
};

inline SetSizeTrace sizes_of(std::span<const StepTrace> trace, bool with_source) {
  SetSizeTrace s;
  s.with_source = with_source;
  s.sizes.reserve(trace.size());
  for (const auto& st : trace) s.sizes.push_back(st.set_size);
  return s;
}

/// Free generation with the source, then a replay of the same tokens without it.
inline AblatedPair generate_ablated_pair(const ModelAdapter& model, TokenSpan source, const GenerationConfig& cfg,
                                         const DecodeResources& res) {
  if (std::holds_alternative<strategy::Greedy>(cfg.strategy) || std::holds_alternative<strategy::Beam>(cfg.strategy)) {
    throw std::invalid_argument("source ablation needs a set-based sampling strategy, got " + strategy_name(cfg.strategy));
  }
  const auto gen = generate(model, source, {}, cfg, res);
  const auto replay = teacher_forced_trace(model, std::nullopt, gen.tokens, cfg.strategy, res, cfg.softmax_temperature);
  return AblatedPair{gen.tokens, sizes_of(gen.trace, true), sizes_of(replay, false)};
}

/// One ablated pair per source; sequence i samples with seed hash(cfg.seed, i).
inline std::vector<AblatedPair> collect_ablated_pairs(const ModelAdapter& model,
                                                      std::span<const std::vector<TokenId>> sources,
                                                      const GenerationConfig& cfg, const DecodeResources& res) {
  std::vector<AblatedPair> out;
  out.reserve(sources.size());
  for (std::size_t i = 0; i < sources.size(); ++i) {
    GenerationConfig c = cfg;
    c.seed = detail::hash_combine(cfg.seed, i);
    out.push_back(generate_ablated_pair(model, sources[i], c, res));
  }
  return out;
}

/// Average treatment effect of removing the source on set size. Each pair is
/// averaged over its own length first, then pairs are averaged.
inline double ate(std::span<const AblatedPair> pairs) {
  if (pairs.empty()) throw std::invalid_argument("ATE over zero pairs");
  double total = 0.0;
  for (const auto& p : pairs) {
    const std::size_t len = std::min(p.with_source.sizes.size(), p.without_source.sizes.size());
    if (len == 0) throw std::invalid_argument("ATE over an empty trace");
    double d = 0.0;
    for (std::size_t t = 0; t < len; ++t) {
      d += static_cast<double>(p.without_source.sizes[t]) - static_cast<double>(p.with_source.sizes[t]);
    }
    total += d / static_cast<double>(len);
  }
  return total / static_cast<double>(pairs.size());
}

struct Gaussian {
  double mean = 0.0;
  double var = 1.0;
};

inline double normal_log_density(double x, const Gaussian& g) {
  const double z = x - g.mean;
  return -0.5 * std::log(2.0 * std::numbers::pi * g.var) - z * z / (2.0 * g.var);
}

struct CohortModel {
  std::size_t vocab_size = 0;
  std::vector<Gaussian> normal;         ///< per timestep, with-source generation
  std::vector<Gaussian> hallucinatory;  ///< per timestep, source ablated

  std::size_t t_fit() const noexcept { return normal.size(); }
};

inline constexpr double kDefaultVarianceFloor = 1e-6;

/// Per-timestep sample mean and unbiased variance (floored) over the first
/// T_fit steps, T_fit being the shortest trace across both cohorts.
inline CohortModel fit_cohort_models(std::span<const SetSizeTrace> normal, std::span<const SetSizeTrace> hallucinatory,
                                     std::size_t vocab_size, double variance_floor = kDefaultVarianceFloor) {
  if (normal.size() < 2 || hallucinatory.size() < 2) throw std::invalid_argument("each cohort needs at least 2 traces");
  if (!(variance_floor > 0.0)) throw std::invalid_argument("variance floor must be positive");
  std::size_t t_fit = std::numeric_limits<std::size_t>::max();
  for (const auto& t : normal) t_fit = std::min(t_fit, t.sizes.size());
  for (const auto& t : hallucinatory) t_fit = std::min(t_fit, t.sizes.size());
  if (t_fit == 0) throw std::invalid_argument("cohort traces must be non-empty");

  auto fit = [&](std::span<const SetSizeTrace> cohort) {
    std::vector<Gaussian> params(t_fit);
    const double n = static_cast<double>(cohort.size());
    for (std::size_t t = 0; t < t_fit; ++t) {
      double mean = 0.0;
      for (const auto& tr : cohort) mean += static_cast<double>(tr.sizes[t]);
      mean /= n;
      double ss = 0.0;
      for (const auto& tr : cohort) {
        const double d = static_cast<double>(tr.sizes[t]) - mean;
        ss += d * d;
      }
      params[t] = Gaussian{mean, std::max(ss / (n - 1.0), variance_floor)};
    }
    return params;
  };
  return CohortModel{vocab_size, fit(normal), fit(hallucinatory)};
}

/// Log Bayes factor of "normal" over "hallucinatory" for one observed trace.
/// Steps past T_fit reuse the last fitted parameters.
inline double log_bayes_factor(const SetSizeTrace& trace, const CohortModel& models) {
  if (trace.sizes.empty()) throw std::invalid_argument("log Bayes factor of an empty trace");
  if (models.t_fit() == 0) throw std::invalid_argument("cohort models are not fitted");
  double lbf = 0.0;
  for (std::size_t t = 0; t < trace.sizes.size(); ++t) {
    const std::size_t k = std::min(t, models.t_fit() - 1);
    const double x = static_cast<double>(trace.sizes[t]);
    lbf += normal_log_density(x, models.normal[k]) - normal_log_density(x, models.hallucinatory[k]);
  }
  return lbf;
}

enum class Decision { kNormal, kHallucinating, kAbstain };

inline constexpr double kDecisionThreshold = 3.0;

inline std::string_view decision_name(Decision d) {
  switch (d) {
    case Decision::kNormal: return "normal";
    case Decision::kHallucinating: return "hallucinating";
    case Decision::kAbstain: return "abstain";
  }
  return "unknown";
}

inline Decision classify(double log_bf) {
  if (std::isnan(log_bf)) throw std::invalid_argument("log Bayes factor is NaN");
  if (log_bf >= kDecisionThreshold) return Decision::kNormal;
  if (log_bf <= -kDecisionThreshold) return Decision::kHallucinating;
  return Decision::kAbstain;
}

struct DetectionReport {
  double ate = 0.0;
  double mean_log_bf_normal = 0.0;
  double mean_log_bf_hallucinatory = 0.0;
  double fpr = 0.0;  ///< normal traces judged hallucinating, among decided normal traces
  double fnr = 0.0;  ///< ablated traces judged normal, among decided ablated traces
  double abstention_rate = 0.0;
  std::size_t n_pairs = 0;
  std::size_t decided_normal = 0;
  std::size_t decided_hallucinatory = 0;
};

/// Error rates on labeled pairs: with-source traces are the normal cohort,
/// ablated replays the hallucinatory one. Abstentions leave the denominators.
inline DetectionReport evaluate_detector(std::span<const AblatedPair> pairs, const CohortModel& models) {
  if (pairs.empty()) throw std::invalid_argument("detector evaluation needs test pairs");
  DetectionReport r;
  r.n_pairs = pairs.size();
  r.ate = ate(pairs);
  std::size_t false_pos = 0, false_neg = 0, abstained = 0;
  for (const auto& p : pairs) {
    const double lbf_n = log_bayes_factor(p.with_source, models);
    const double lbf_h = log_bayes_factor(p.without_source, models);
    r.mean_log_bf_normal += lbf_n;
    r.mean_log_bf_hallucinatory += lbf_h;
    const auto dn = classify(lbf_n);
    const auto dh = classify(lbf_h);
    if (dn == Decision::kAbstain) ++abstained;
    else {
      ++r.decided_normal;
      false_pos += dn == Decision::kHallucinating ? 1 : 0;
    }
    if (dh == Decision::kAbstain) ++abstained;
    else {
      ++r.decided_hallucinatory;
      false_neg += dh == Decision::kNormal ? 1 : 0;
    }
  }
  const double n = static_cast<double>(pairs.size());
  r.mean_log_bf_normal /= n;
  r.mean_log_bf_hallucinatory /= n;
  r.fpr = r.decided_normal ? static_cast<double>(false_pos) / static_cast<double>(r.decided_normal) : 0.0;
  r.fnr = r.decided_hallucinatory ? static_cast<double>(false_neg) / static_cast<double>(r.decided_hallucinatory) : 0.0;
  r.abstention_rate = static_cast<double>(abstained) / (2.0 * n);
  return r;
}

}  // namespace necs
