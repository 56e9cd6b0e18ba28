#pragma once

// SPDX-License-Identifier: Apache-2.0

/**
 * @file decoding.hpp
 * @brief Prediction-set strategies and the shared decode loop.
 *
 * Every strategy reduces to "build a prediction set from the current
 * distribution (and latent), then sample inside it":
 *
 *   GREEDY             top-1
 *   BEAM(b)            top-b per hypothesis, hypotheses ranked by summed log-prob
 *   TOP_K(k)           top-k
 *   NUCLEUS(p)         smallest rank prefix with mass >= p
 *   ENTROPY_CONFORMAL  adaptive set with a q_hat looked up by entropy bin
 *   CONST_WEIGHT_CS    adaptive set, q_hat from K neighbors with unit weights
 *   NON_EX_CS          adaptive set, q_hat from K neighbors with kernel weights
 */

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <variant>
#include <vector>

#include "necs/conformal.hpp"
#include "necs/datastore.hpp"
#include "necs/models.hpp"

namespace necs {

namespace strategy {
struct Greedy {};
struct Beam {
  std::size_t beams = 5;
};
struct TopK {
  std::size_t k = 10;
};
struct Nucleus {
  double p = 0.9;
};
struct EntropyConformal {
  double alpha = 0.1;
  std::size_t n_bins = 10;
};
struct ConstWeightCS {
  double alpha = 0.1;
  std::size_t k = 100;
  ScoreKind score = ScoreKind::kAdaptive;  ///< must match the datastore's scores
};
struct NonExCS {
  double alpha = 0.1;
  std::size_t k = 100;
  double tau = 1.0;
  Metric metric = Metric::kSquaredL2;
  ScoreKind score = ScoreKind::kAdaptive;
};
}  // namespace strategy

using Strategy = std::variant<strategy::Greedy, strategy::Beam, strategy::TopK, strategy::Nucleus,
                              strategy::EntropyConformal, strategy::ConstWeightCS, strategy::NonExCS>;

inline std::string strategy_name(const Strategy& s) {
  struct Visitor {
    std::string operator()(const strategy::Greedy&) const { return "greedy"; }
    std::string operator()(const strategy::Beam&) const { return "beam"; }
    std::string operator()(const strategy::TopK&) const { return "top_k"; }
    std::string operator()(const strategy::Nucleus&) const { return "nucleus"; }
    std::string operator()(const strategy::EntropyConformal&) const { return "entropy_conformal"; }
    std::string operator()(const strategy::ConstWeightCS&) const { return "const_weight_cs"; }
    std::string operator()(const strategy::NonExCS&) const { return "non_ex_cs"; }
  };
  return std::visit(Visitor{}, s);
}

inline void validate(const Strategy& s) {
  auto fail = [](const std::string& m) { throw std::invalid_argument(m); };
  auto check_alpha = [&](double a) {
    if (!(a > 0.0 && a < 1.0)) fail("alpha must lie in (0, 1)");
  };
  std::visit(
      [&](const auto& v) {
        using T = std::decay_t<decltype(v)>;
        if constexpr (std::is_same_v<T, strategy::Beam>) {
          if (v.beams < 1) fail("beams must be >= 1");
        } else if constexpr (std::is_same_v<T, strategy::TopK>) {
          if (v.k < 1) fail("k must be >= 1");
        } else if constexpr (std::is_same_v<T, strategy::Nucleus>) {
          if (!(v.p > 0.0 && v.p <= 1.0)) fail("nucleus p must lie in (0, 1]");
        } else if constexpr (std::is_same_v<T, strategy::EntropyConformal>) {
          check_alpha(v.alpha);
          if (v.n_bins < 1) fail("n_bins must be >= 1");
        } else if constexpr (std::is_same_v<T, strategy::ConstWeightCS>) {
          check_alpha(v.alpha);
          if (v.k < 1) fail("K must be >= 1");
        } else if constexpr (std::is_same_v<T, strategy::NonExCS>) {
          check_alpha(v.alpha);
          if (v.k < 1) fail("K must be >= 1");
          if (!(v.tau > 0.0)) fail("tau must be positive");
        }
      },
      s);
}

struct GenerationConfig {
  Strategy strategy = strategy::Nucleus{};
  std::size_t max_len = 50;
  double softmax_temperature = 1.0;
  std::uint64_t seed = 0;
};

/// Per-step diagnostics. `contained` is set only for teacher-forced passes.
struct StepTrace {
  std::size_t t = 0;
  std::size_t set_size = 0;
  Quantile q_hat;
  double entropy = 0.0;
  TokenId token = 0;
  std::optional<bool> contained;
};

// ============================================================================
// Non-conformal sets
// ============================================================================

/// Smallest rank prefix whose cumulative mass reaches p; p = 1 is the full vocabulary.
inline PredictionSet nucleus_set(const TokenDistribution& dist, double p) {
  if (!(p > 0.0 && p <= 1.0)) throw std::invalid_argument("nucleus p must lie in (0, 1]");
  if (p >= 1.0) return rank_prefix(dist, dist.vocab_size(), Quantile(1.0));
  auto cum = dist.cumulative();
  const auto below = static_cast<std::size_t>(std::lower_bound(cum.begin(), cum.end(), p) - cum.begin());
  return rank_prefix(dist, below + 1, Quantile(p));
}

inline PredictionSet topk_set(const TokenDistribution& dist, std::size_t k) {
  if (k < 1) throw std::invalid_argument("k must be >= 1");
  k = std::min(k, dist.vocab_size());
  return rank_prefix(dist, k, Quantile(dist.cumulative()[k - 1]));
}

// ============================================================================
// Entropy-binned conformal baseline
// ============================================================================

struct EntropyScore {
  double entropy = 0.0;
  double score = 0.0;
};

/// Equal-width entropy bins over [0, ln C] with one standard quantile per bin.
struct EntropyBinnedCalibrator {
  std::vector<double> edges;       ///< n_bins + 1 strictly increasing edges
  std::vector<Quantile> bin_q;
  std::vector<std::size_t> bin_count;
  Quantile global;

  std::size_t n_bins() const noexcept { return bin_q.size(); }

  std::size_t bin_of(double entropy) const {
    const double lo = edges.front();
    const double hi = edges.back();
    const double width = (hi - lo) / static_cast<double>(n_bins());
    const double x = (entropy - lo) / width;
    if (!(x > 0.0)) return 0;
    return std::min(static_cast<std::size_t>(x), n_bins() - 1);
  }

  Quantile quantile_for(double entropy) const { return bin_q[bin_of(entropy)]; }
};

inline EntropyBinnedCalibrator calibrate_entropy_bins(std::span<const EntropyScore> data, MiscoverageLevel alpha,
                                                      std::size_t n_bins, std::size_t vocab_size) {
  if (n_bins < 1) throw std::invalid_argument("n_bins must be >= 1");
  if (data.empty()) throw std::invalid_argument("entropy calibration needs data");
  if (vocab_size < 2) throw std::invalid_argument("entropy bins need a vocabulary of at least 2 tokens");
  EntropyBinnedCalibrator cal;
  const double hi = std::log(static_cast<double>(vocab_size));
  cal.edges.resize(n_bins + 1);
  for (std::size_t b = 0; b <= n_bins; ++b) cal.edges[b] = hi * static_cast<double>(b) / static_cast<double>(n_bins);
  cal.bin_q.assign(n_bins, Quantile::infinite());
  cal.bin_count.assign(n_bins, 0);

  std::vector<double> all;
  std::vector<std::vector<double>> per_bin(n_bins);
  all.reserve(data.size());
  for (const auto& d : data) {
    all.push_back(d.score);
    per_bin[cal.bin_of(d.entropy)].push_back(d.score);
  }
  cal.global = standard_quantile(all, alpha);
  for (std::size_t b = 0; b < n_bins; ++b) {
    cal.bin_count[b] = per_bin[b].size();
    cal.bin_q[b] = per_bin[b].empty() ? cal.global : standard_quantile(per_bin[b], alpha);
  }
  return cal;
}

/// (entropy, adaptive score) for every teacher-forced step of `dataset`.
inline std::vector<EntropyScore> collect_entropy_scores(const ModelAdapter& model, std::span<const Sequence> dataset,
                                                        double softmax_temperature = 1.0) {
  std::vector<EntropyScore> out;
  for (const auto& seq : dataset) {
    std::optional<TokenSpan> src;
    if (seq.source) src = TokenSpan(*seq.source);
    for (std::size_t t = 0; t < seq.target.size(); ++t) {
      auto step = model.step(src, TokenSpan(seq.target).first(t));
      const auto dist = step.dist.with_temperature(softmax_temperature);
      out.push_back({dist.entropy(), adaptive_nonconformity(dist, seq.target[t])});
    }
  }
  return out;
}

// ============================================================================
// Retrieval-calibrated sets
// ============================================================================

/// Neighbor retrieval, kernel weights, weighted quantile, then the set for `score`.
inline PredictionSet next_prediction_set_nonex(std::span<const float> latent, const TokenDistribution& dist,
                                               const Datastore& store, std::size_t k, double tau, Metric metric,
                                               MiscoverageLevel alpha, ScoreKind score = ScoreKind::kAdaptive) {
  if (metric != store.metric()) {
    throw std::invalid_argument("strategy metric '" + std::string(metric_name(metric)) +
                                "' differs from datastore metric '" + std::string(metric_name(store.metric())) + "'");
  }
  const auto neighbors = store.query(latent, k);
  const auto weights = compute_weights(neighbors, tau, metric, store.dim());
  std::vector<double> scores;
  scores.reserve(neighbors.size());
  for (const auto& n : neighbors) scores.push_back(n.score);
  return build_prediction_set(score, dist, weighted_quantile(scores, weights, alpha));
}

/// As next_prediction_set_nonex with every neighbor weighted 1.
inline PredictionSet next_prediction_set_const(std::span<const float> latent, const TokenDistribution& dist,
                                               const Datastore& store, std::size_t k, MiscoverageLevel alpha,
                                               ScoreKind score = ScoreKind::kAdaptive) {
  const auto neighbors = store.query(latent, k);
  std::vector<double> scores;
  scores.reserve(neighbors.size());
  for (const auto& n : neighbors) scores.push_back(n.score);
  const std::vector<double> weights(scores.size(), 1.0);
  return build_prediction_set(score, dist, weighted_quantile(scores, weights, alpha));
}

struct DecodeResources {
  const Datastore* store = nullptr;
  const EntropyBinnedCalibrator* entropy = nullptr;
};

/// The set a strategy would sample from at one step.
inline PredictionSet prediction_set_for(const Strategy& s, const TokenDistribution& dist,
                                        std::span<const float> latent, const DecodeResources& res) {
  auto need_store = [&]() -> const Datastore& {
    if (res.store == nullptr) throw std::invalid_argument(strategy_name(s) + " requires a datastore");
    return *res.store;
  };
  return std::visit(
      [&](const auto& v) -> PredictionSet {
        using T = std::decay_t<decltype(v)>;
        if constexpr (std::is_same_v<T, strategy::Greedy>) {
          return topk_set(dist, 1);
        } else if constexpr (std::is_same_v<T, strategy::Beam>) {
          return topk_set(dist, v.beams);
        } else if constexpr (std::is_same_v<T, strategy::TopK>) {
          return topk_set(dist, v.k);
        } else if constexpr (std::is_same_v<T, strategy::Nucleus>) {
          return nucleus_set(dist, v.p);
        } else if constexpr (std::is_same_v<T, strategy::EntropyConformal>) {
          if (res.entropy == nullptr) throw std::invalid_argument("entropy_conformal requires an entropy calibrator");
          return build_adaptive_prediction_set(dist, res.entropy->quantile_for(dist.entropy()));
        } else if constexpr (std::is_same_v<T, strategy::ConstWeightCS>) {
          return next_prediction_set_const(latent, dist, need_store(), v.k, MiscoverageLevel(v.alpha), v.score);
        } else {
          return next_prediction_set_nonex(latent, dist, need_store(), v.k, v.tau, v.metric,
                                           MiscoverageLevel(v.alpha), v.score);
        }
      },
      s);
}

inline bool uses_datastore(const Strategy& s) {
  return std::holds_alternative<strategy::ConstWeightCS>(s) || std::holds_alternative<strategy::NonExCS>(s);
}

inline void check_resources(const Strategy& s, const DecodeResources& res) {
  validate(s);
  if (uses_datastore(s) && res.store == nullptr) throw std::invalid_argument(strategy_name(s) + " requires a datastore");
  if (std::holds_alternative<strategy::EntropyConformal>(s) && res.entropy == nullptr) {
    throw std::invalid_argument("entropy_conformal requires an entropy calibrator");
  }
}

// ============================================================================
// Sampling and decode loop
// ============================================================================

/// Samples from `dist` restricted to `set` and renormalized; `greedy` takes the set's top token.
template <typename Rng>
TokenId sample_from_set(const TokenDistribution& dist, const PredictionSet& set, Rng& rng, bool greedy = false) {
  if (set.token_ids.empty()) throw std::invalid_argument("cannot sample from an empty set");
  if (greedy || set.size() == 1) return set.token_ids.front();
  double total = 0.0;
  for (TokenId t : set.token_ids) total += dist.prob(t);
  if (!(total > 0.0)) return set.token_ids.front();
  double u = std::uniform_real_distribution<double>(0.0, total)(rng);
  for (TokenId t : set.token_ids) {
    u -= dist.prob(t);
    if (u < 0.0) return t;
  }
  return set.token_ids.back();
}

/// Optional Gaussian shift applied to every latent before set construction.
struct LatentNoise {
  double variance = 0.0;
  std::uint64_t seed = 0;
};

/// Distribution and latent at one step after noise injection and temperature.
template <typename Rng>
std::pair<TokenDistribution, Latent> observe(const ModelAdapter& model, std::optional<TokenSpan> source, TokenSpan prefix,
                                             double softmax_temperature, const std::optional<LatentNoise>& noise,
                                             Rng& noise_rng) {
  auto step = model.step(source, prefix);
  if (noise && noise->variance > 0.0) {
    Latent noisy = inject_latent_noise(step.latent, noise->variance, noise_rng);
    Latent shift(noisy.size());
    for (std::size_t i = 0; i < shift.size(); ++i) shift[i] = noisy[i] - step.latent[i];
    step.dist = model.perturb(step.dist, shift);
    step.latent = std::move(noisy);
  }
  return {step.dist.with_temperature(softmax_temperature), std::move(step.latent)};
}

inline std::optional<TokenSpan> source_span(const std::optional<std::vector<TokenId>>& src) {
  if (!src) return std::nullopt;
  return TokenSpan(*src);
}

/**
 * Teacher-forced pass over `tokens`: at every step records the set the
 * strategy builds and whether it contains the next token.
 */
inline std::vector<StepTrace> teacher_forced_trace(const ModelAdapter& model, std::optional<TokenSpan> source,
                                                   TokenSpan tokens, const Strategy& s, const DecodeResources& res,
                                                   double softmax_temperature = 1.0,
                                                   std::optional<LatentNoise> noise = std::nullopt) {
  check_resources(s, res);
  std::mt19937_64 noise_rng(noise ? noise->seed : 0);
  std::vector<StepTrace> trace;
  trace.reserve(tokens.size());
  for (std::size_t t = 0; t < tokens.size(); ++t) {
    auto [dist, latent] = observe(model, source, tokens.first(t), softmax_temperature, noise, noise_rng);
    const auto set = prediction_set_for(s, dist, latent, res);
    trace.push_back(StepTrace{t, set.size(), set.q_hat, dist.entropy(), tokens[t], set.contains(tokens[t])});
  }
  return trace;
}

struct Generation {
  std::vector<TokenId> tokens;  ///< generated continuation, EOS included when emitted
  std::vector<StepTrace> trace;
};

namespace detail {

inline Generation beam_search(const ModelAdapter& model, std::optional<TokenSpan> source, TokenSpan prompt,
                              const GenerationConfig& cfg, std::size_t beams) {
  struct Hyp {
    std::vector<TokenId> tokens;
    double logprob = 0.0;
    std::vector<StepTrace> trace;
    bool finished = false;
  };
  const auto eos = model.eos_token();
  std::vector<Hyp> hyps(1);
  for (std::size_t t = 0; t < cfg.max_len; ++t) {
    std::vector<Hyp> cand;
    for (const auto& h : hyps) {
      if (h.finished) {
        cand.push_back(h);
        continue;
      }
      std::vector<TokenId> prefix(prompt.begin(), prompt.end());
      prefix.insert(prefix.end(), h.tokens.begin(), h.tokens.end());
      const auto dist = model.step(source, prefix).dist.with_temperature(cfg.softmax_temperature);
      const auto set = topk_set(dist, beams);
      for (TokenId y : set.token_ids) {
        Hyp c = h;
        c.tokens.push_back(y);
        const double p = dist.prob(y);
        c.logprob += p > 0.0 ? std::log(p) : -std::numeric_limits<double>::infinity();
        c.trace.push_back(StepTrace{t, set.size(), set.q_hat, dist.entropy(), y, std::nullopt});
        c.finished = eos && y == *eos;
        cand.push_back(std::move(c));
      }
    }
    std::stable_sort(cand.begin(), cand.end(), [](const Hyp& a, const Hyp& b) { return a.logprob > b.logprob; });
    if (cand.size() > beams) cand.resize(beams);
    hyps = std::move(cand);
    if (std::all_of(hyps.begin(), hyps.end(), [](const Hyp& h) { return h.finished; })) break;
  }
  return Generation{std::move(hyps.front().tokens), std::move(hyps.front().trace)};
}

}  // namespace detail

/**
 * Autoregressive generation after `prompt` until max_len tokens or EOS.
 * The softmax temperature is applied before any set is built.
 */
inline Generation generate(const ModelAdapter& model, std::optional<TokenSpan> source, TokenSpan prompt,
                           const GenerationConfig& cfg, const DecodeResources& res = {}) {
  check_resources(cfg.strategy, res);
  if (!(cfg.softmax_temperature > 0.0)) throw std::invalid_argument("softmax temperature must be positive");
  if (const auto* b = std::get_if<strategy::Beam>(&cfg.strategy)) {
    return detail::beam_search(model, source, prompt, cfg, b->beams);
  }
  const bool greedy = std::holds_alternative<strategy::Greedy>(cfg.strategy);
  const auto eos = model.eos_token();
  std::mt19937_64 rng(cfg.seed);
  Generation g;
  std::vector<TokenId> prefix(prompt.begin(), prompt.end());
  for (std::size_t t = 0; t < cfg.max_len; ++t) {
    auto step = model.step(source, prefix);
    const auto dist = step.dist.with_temperature(cfg.softmax_temperature);
    const auto set = prediction_set_for(cfg.strategy, dist, step.latent, res);
    const TokenId y = sample_from_set(dist, set, rng, greedy);
    g.trace.push_back(StepTrace{t, set.size(), set.q_hat, dist.entropy(), y, std::nullopt});
    g.tokens.push_back(y);
    prefix.push_back(y);
    if (eos && y == *eos) break;
  }
  return g;
}

}  // namespace necs
