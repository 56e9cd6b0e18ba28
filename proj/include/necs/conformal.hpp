#pragma once

// SPDX-License-Identifier: Apache-2.0

/**
 * @file conformal.hpp
 * @brief Non-conformity scores, conformal quantiles and prediction sets.
 *
 * Everything here is a pure function over immutable inputs. Token ids are
 * zero-based. Probabilities are held in double precision; the cumulative
 * sorted mass of a distribution is computed once, clamped to [0, 1], and
 * shared by the adaptive score and the adaptive set builder so that the
 * containment identity
 *
 *     label in set(d, q)  <=>  adaptive_score(d, label) < q  or  rank(label) == c_hat
 *
 * holds bit-exactly.
 */

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace necs {

using TokenId = std::uint32_t;

/// Relative slack applied when comparing accumulated mass against 1 - alpha.
inline constexpr double kMassTolerance = 1e-12;

/// Allowed deviation of a distribution's total mass from 1.
inline constexpr double kDistributionTolerance = 1e-6;

// ============================================================================
// Domain types
// ============================================================================

/// Miscoverage level alpha, strictly inside (0, 1).
class MiscoverageLevel {
 public:
  explicit MiscoverageLevel(double alpha) : alpha_(alpha) {
    if (!(alpha > 0.0 && alpha < 1.0)) {
      throw std::invalid_argument("miscoverage level must lie in (0, 1), got " +
                                  std::to_string(alpha));
    }
  }
  double value() const noexcept { return alpha_; }
  double target() const noexcept { return 1.0 - alpha_; }

 private:
  double alpha_;
};

/// A conformal threshold in [0, 1], or +infinity when no finite score
/// reaches the mass target.
class Quantile {
 public:
  constexpr Quantile() = default;
  constexpr explicit Quantile(double v) : value_(v) {}

  static constexpr Quantile infinite() {
    return Quantile(std::numeric_limits<double>::infinity());
  }

  constexpr bool is_finite() const noexcept {
    return value_ != std::numeric_limits<double>::infinity();
  }
  constexpr double value() const noexcept { return value_; }

  friend constexpr bool operator==(Quantile, Quantile) = default;

 private:
  double value_ = std::numeric_limits<double>::infinity();
};

/**
 * A full next-token distribution with its descending sort permutation.
 *
 * sort_perm()[r] is the token at zero-based rank r. Ties are broken by
 * ascending token id. cumulative()[r] is the clamped mass of ranks 0..r.
 */
class TokenDistribution {
 public:
  TokenDistribution() = default;

  explicit TokenDistribution(std::vector<double> probs) : probs_(std::move(probs)) {
    if (probs_.empty()) throw std::invalid_argument("distribution must be non-empty");
    double total = 0.0;
    for (double p : probs_) {
      if (!(p >= 0.0 && p <= 1.0)) {
        throw std::invalid_argument("probability outside [0, 1]");
      }
      total += p;
    }
    if (std::abs(total - 1.0) > kDistributionTolerance) {
      throw std::invalid_argument("probabilities sum to " + std::to_string(total) +
                                  ", expected 1");
    }
    index();
  }

  /// Normalizes non-negative weights into a distribution.
  static TokenDistribution from_weights(std::vector<double> weights) {
    double total = 0.0;
    for (double w : weights) {
      if (!(w >= 0.0) || !std::isfinite(w)) {
        throw std::invalid_argument("weights must be finite and non-negative");
      }
      total += w;
    }
    if (!(total > 0.0)) throw std::invalid_argument("weights sum to zero");
    for (double& w : weights) w /= total;
    return TokenDistribution(std::move(weights));
  }

  /// Numerically stable softmax of logits / temperature.
  static TokenDistribution from_logits(std::span<const double> logits, double temperature = 1.0) {
    if (logits.empty()) throw std::invalid_argument("logits must be non-empty");
    if (!(temperature > 0.0)) throw std::invalid_argument("temperature must be positive");
    double shift = -std::numeric_limits<double>::infinity();
    for (double l : logits) shift = std::max(shift, l);
    std::vector<double> w(logits.size());
    for (std::size_t i = 0; i < logits.size(); ++i) {
      w[i] = std::exp((logits[i] - shift) / temperature);
    }
    return from_weights(std::move(w));
  }

  std::size_t vocab_size() const noexcept { return probs_.size(); }
  std::span<const double> probs() const noexcept { return probs_; }
  double prob(TokenId t) const { return probs_.at(t); }
  std::span<const TokenId> sort_perm() const noexcept { return sort_perm_; }
  std::span<const double> cumulative() const noexcept { return cumulative_; }

  /// Zero-based rank of a token.
  std::size_t rank_of(TokenId t) const { return rank_.at(t); }

  TokenId argmax() const noexcept { return sort_perm_.front(); }

  /// Shannon entropy in nats.
  double entropy() const noexcept {
    double h = 0.0;
    for (double p : probs_) {
      if (p > 0.0) h -= p * std::log(p);
    }
    return h;
  }

  /// Sharpens (T < 1) or flattens (T > 1) the distribution: p^(1/T), renormalized.
  TokenDistribution with_temperature(double temperature) const {
    if (!(temperature > 0.0)) throw std::invalid_argument("temperature must be positive");
    if (temperature == 1.0) return *this;
    std::vector<double> logp(probs_.size());
    for (std::size_t i = 0; i < probs_.size(); ++i) {
      logp[i] = probs_[i] > 0.0 ? std::log(probs_[i]) : -std::numeric_limits<double>::infinity();
    }
    return from_logits(logp, temperature);
  }

 private:
  void index() {
    const std::size_t c = probs_.size();
    sort_perm_.resize(c);
    std::iota(sort_perm_.begin(), sort_perm_.end(), TokenId{0});
    std::stable_sort(sort_perm_.begin(), sort_perm_.end(),
                     [&](TokenId a, TokenId b) { return probs_[a] > probs_[b]; });
    rank_.resize(c);
    cumulative_.resize(c);
    double acc = 0.0;
    for (std::size_t r = 0; r < c; ++r) {
      rank_[sort_perm_[r]] = r;
      acc += probs_[sort_perm_[r]];
      cumulative_[r] = std::clamp(acc, 0.0, 1.0);
    }
  }

  std::vector<double> probs_;
  std::vector<TokenId> sort_perm_;
  std::vector<std::size_t> rank_;
  std::vector<double> cumulative_;
};

/// Tokens ordered by rank, together with the threshold that produced them.
struct PredictionSet {
  std::vector<TokenId> token_ids;
  Quantile q_hat;

  std::size_t size() const noexcept { return token_ids.size(); }
  bool contains(TokenId t) const {
    return std::find(token_ids.begin(), token_ids.end(), t) != token_ids.end();
  }
};

/// The first `count` ranks of `dist` as a prediction set.
inline PredictionSet rank_prefix(const TokenDistribution& dist, std::size_t count, Quantile q_hat) {
  count = std::clamp<std::size_t>(count, 1, dist.vocab_size());
  auto perm = dist.sort_perm();
  return PredictionSet{std::vector<TokenId>(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(count)),
                       q_hat};
}

// ============================================================================
// Non-conformity scores
// ============================================================================

namespace detail {
inline void check_label(const TokenDistribution& dist, TokenId label) {
  if (label >= dist.vocab_size()) {
    throw std::invalid_argument("label " + std::to_string(label) + " outside vocabulary of size " +
                                std::to_string(dist.vocab_size()));
  }
}
}  // namespace detail

/// 1 - p(label).
inline double simple_nonconformity(const TokenDistribution& dist, TokenId label) {
  detail::check_label(dist, label);
  return std::clamp(1.0 - dist.prob(label), 0.0, 1.0);
}

/// Cumulative sorted mass up to and including the label's rank.
inline double adaptive_nonconformity(const TokenDistribution& dist, TokenId label) {
  detail::check_label(dist, label);
  return dist.cumulative()[dist.rank_of(label)];
}

// ============================================================================
// Quantiles
// ============================================================================

/// The ceil((N+1)(1-alpha))-th smallest score, or INF when that rank exceeds N.
inline Quantile standard_quantile(std::span<const double> scores, MiscoverageLevel alpha) {
  if (scores.empty()) throw std::invalid_argument("standard_quantile needs at least one score");
  const double n = static_cast<double>(scores.size());
  const double threshold = alpha.target() * (n + 1.0) * (1.0 - kMassTolerance);
  const double k = std::ceil(threshold);
  if (k > n) return Quantile::infinite();
  std::vector<double> sorted(scores.begin(), scores.end());
  const auto kth = static_cast<std::size_t>(std::max(k, 1.0)) - 1;
  std::nth_element(sorted.begin(), sorted.begin() + static_cast<std::ptrdiff_t>(kth), sorted.end());
  return Quantile(sorted[kth]);
}

/**
 * Weighted conformal quantile:
 *
 *     inf{ q : sum_i w~_i 1[s_i <= q] >= 1 - alpha },   w~_i = w_i / (1 + sum_j w_j)
 *
 * The comparison is carried out on unnormalized weights against
 * (1 - alpha)(1 + W), which keeps equal unit weights exactly consistent with
 * standard_quantile. Returns INF when the mass target is never reached.
 */
inline Quantile weighted_quantile(std::span<const double> scores, std::span<const double> weights,
                                  MiscoverageLevel alpha) {
  if (scores.size() != weights.size()) {
    throw std::invalid_argument("weighted_quantile: scores and weights differ in length");
  }
  if (scores.empty()) throw std::invalid_argument("weighted_quantile needs at least one score");
  double total = 0.0;
  for (double w : weights) {
    if (!(w >= 0.0) || std::isnan(w)) throw std::invalid_argument("weights must be non-negative");
    total += w;
  }
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  const double threshold = alpha.target() * (1.0 + total) * (1.0 - kMassTolerance);
  double acc = 0.0;
  for (std::size_t i : order) {
    acc += weights[i];
    if (acc >= threshold) return Quantile(scores[i]);
  }
  return Quantile::infinite();
}

// ============================================================================
// Prediction sets
// ============================================================================

/**
 * Adaptive prediction set: the first c_hat ranks, where
 * c_hat = #{ranks whose cumulative mass < q_hat} + 1, capped at C.
 */
inline PredictionSet build_adaptive_prediction_set(const TokenDistribution& dist, Quantile q_hat) {
  if (!q_hat.is_finite()) return rank_prefix(dist, dist.vocab_size(), q_hat);
  auto cum = dist.cumulative();
  const auto below = static_cast<std::size_t>(
      std::lower_bound(cum.begin(), cum.end(), q_hat.value()) - cum.begin());
  return rank_prefix(dist, below + 1, q_hat);
}

/// {y : p(y) >= 1 - q_hat}, padded with the top-1 token when empty.
inline PredictionSet build_simple_prediction_set(const TokenDistribution& dist, Quantile q_hat) {
  if (!q_hat.is_finite()) return rank_prefix(dist, dist.vocab_size(), q_hat);
  const double threshold = 1.0 - q_hat.value();
  std::size_t count = 0;
  for (TokenId t : dist.sort_perm()) {
    if (dist.prob(t) < threshold) break;
    ++count;
  }
  return rank_prefix(dist, count, q_hat);
}

enum class ScoreKind { kSimple, kAdaptive };

inline std::string_view score_kind_name(ScoreKind kind) { return kind == ScoreKind::kSimple ? "simple" : "adaptive"; }

inline ScoreKind parse_score_kind(std::string_view name) {
  if (name == "simple") return ScoreKind::kSimple;
  if (name == "adaptive") return ScoreKind::kAdaptive;
  throw std::invalid_argument("unknown score variant '" + std::string(name) + "' (expected simple or adaptive)");
}

inline double nonconformity(ScoreKind kind, const TokenDistribution& dist, TokenId label) {
  return kind == ScoreKind::kSimple ? simple_nonconformity(dist, label) : adaptive_nonconformity(dist, label);
}

/// The set matching a score variant: threshold on 1 - p, or on cumulative mass.
inline PredictionSet build_prediction_set(ScoreKind kind, const TokenDistribution& dist, Quantile q_hat) {
  return kind == ScoreKind::kSimple ? build_simple_prediction_set(dist, q_hat) : build_adaptive_prediction_set(dist, q_hat);
}

}  // namespace necs
