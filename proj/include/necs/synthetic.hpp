#pragma once

// SPDX-License-Identifier: Apache-2.0

// Seeded generators for toy corpora. A SyntheticSource is a "true" order-n
// Markov process whose per-context conditionals have randomly varied
// sharpness, so some contexts are near-deterministic and others diffuse.

#include <cmath>
#include <cstdint>
#include <random>
#include <unordered_map>
#include <vector>

#include "necs/models.hpp"

namespace necs {

struct SourceOptions {
  std::size_t vocab_size = 40;     ///< tokens emitted by the process (EOS excluded)
  std::size_t order = 2;
  double min_sharpness = 0.5;      ///< logit std-dev range across contexts
  double max_sharpness = 4.0;
  std::uint64_t seed = 0;
};

class SyntheticSource {
 public:
  explicit SyntheticSource(SourceOptions opt) : opt_(opt) {}

  const SourceOptions& options() const noexcept { return opt_; }

  /// Conditional distribution (over vocab_size tokens) for the given prefix.
  const std::vector<double>& conditional(TokenSpan prefix) const {
    std::vector<TokenId> ctx(opt_.order, static_cast<TokenId>(opt_.vocab_size));
    for (std::size_t lag = 1; lag <= opt_.order && lag <= prefix.size(); ++lag) {
      ctx[opt_.order - lag] = prefix[prefix.size() - lag];
    }
    auto it = cache_.find(ctx);
    if (it != cache_.end()) return it->second;
    std::mt19937_64 rng(detail::VectorHash{}(ctx) ^ detail::splitmix64(opt_.seed));
    const double sharp = std::uniform_real_distribution<double>(opt_.min_sharpness, opt_.max_sharpness)(rng);
    std::normal_distribution<double> nd(0.0, sharp);
    std::vector<double> w(opt_.vocab_size);
    double mx = -1e300;
    for (double& v : w) {
      v = nd(rng);
      mx = std::max(mx, v);
    }
    double total = 0.0;
    for (double& v : w) {
      v = std::exp(v - mx);
      total += v;
    }
    for (double& v : w) v /= total;
    return cache_.emplace(std::move(ctx), std::move(w)).first->second;
  }

  template <typename Rng>
  TokenId sample_next(TokenSpan prefix, Rng& rng) const {
    const auto& p = conditional(prefix);
    double u = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
    for (std::size_t y = 0; y + 1 < p.size(); ++y) {
      u -= p[y];
      if (u < 0.0) return static_cast<TokenId>(y);
    }
    return static_cast<TokenId>(p.size() - 1);
  }

  /// `n` target-only sequences of length `length`, followed by `eos` when given.
  std::vector<Sequence> sample_corpus(std::size_t n, std::size_t length, std::uint64_t seed,
                                      std::optional<TokenId> eos = std::nullopt) const {
    std::mt19937_64 rng(seed);
    std::vector<Sequence> out(n);
    for (auto& s : out) {
      for (std::size_t t = 0; t < length; ++t) s.target.push_back(sample_next(s.target, rng));
      if (eos) s.target.push_back(*eos);
    }
    return out;
  }

 private:
  SourceOptions opt_;
  mutable std::unordered_map<std::vector<TokenId>, std::vector<double>, detail::VectorHash> cache_;
};

/**
 * Parallel corpus: sources drawn from `source_process`; each target position
 * copies the aligned source token with probability `keep`, otherwise draws
 * from the process given the target prefix. Targets end with `eos`.
 */
inline std::vector<Sequence> sample_parallel_corpus(const SyntheticSource& source_process, std::size_t n,
                                                    std::size_t length, double keep, TokenId eos,
                                                    std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> coin(0.0, 1.0);
  std::vector<Sequence> out(n);
  for (auto& s : out) {
    std::vector<TokenId> src;
    for (std::size_t t = 0; t < length; ++t) src.push_back(source_process.sample_next(src, rng));
    for (std::size_t t = 0; t < length; ++t) {
      s.target.push_back(coin(rng) < keep ? src[t] : source_process.sample_next(s.target, rng));
    }
    s.target.push_back(eos);
    s.source = std::move(src);
  }
  return out;
}

}  // namespace necs
