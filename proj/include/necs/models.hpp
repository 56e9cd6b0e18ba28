#pragma once

// SPDX-License-Identifier: Apache-2.0

/**
 * @file models.hpp
 * @brief Model adapters producing (next-token distribution, latent) per step.
 *
 * The conformal machinery only consumes these pairs, so two small
 * deterministic models stand in for neural decoders:
 *
 *  - MarkovLM: add-k smoothed n-gram model. Its latent is a seeded random
 *    projection of hashed recent-token features.
 *  - ToySeq2Seq: a MarkovLM prior mixed with a source-copy channel that
 *    attends to the aligned source position. The channel and the source
 *    component of the latent vanish when source attention is disabled.
 *
 * Both models also carry a fixed linear readout from latent space to logits.
 * `perturb` uses it so that a shift applied to the latent moves the output
 * distribution, the way noise on a decoder hidden state moves its softmax.
 */

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "necs/conformal.hpp"

namespace necs {

using Latent = std::vector<float>;
using TokenSpan = std::span<const TokenId>;

/// One training/evaluation example. LM data has no source.
struct Sequence {
  std::optional<std::vector<TokenId>> source;
  std::vector<TokenId> target;
};

struct StepOutput {
  TokenDistribution dist;
  Latent latent;
};

class ModelAdapter {
 public:
  virtual ~ModelAdapter() = default;

  virtual std::size_t vocab_size() const = 0;
  virtual std::size_t latent_dim() const = 0;
  virtual std::optional<TokenId> eos_token() const { return std::nullopt; }

  /// Distribution over the next token and the latent encoding of the state.
  /// A missing source means the decoder cannot attend to one.
  virtual StepOutput step(std::optional<TokenSpan> source, TokenSpan prefix) const = 0;

  /// Output distribution after the latent was shifted by `latent_shift`.
  virtual TokenDistribution perturb(const TokenDistribution& dist, std::span<const float> latent_shift) const {
    (void)latent_shift;
    return dist;
  }
};

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

inline std::uint64_t hash_combine(std::uint64_t a, std::uint64_t b) { return splitmix64(a ^ splitmix64(b)); }

/// Dense row-major Gaussian matrix N(0, 1/cols), fixed by its seed.
inline std::vector<double> gaussian_matrix(std::size_t rows, std::size_t cols, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd(0.0, 1.0 / std::sqrt(static_cast<double>(cols)));
  std::vector<double> m(rows * cols);
  for (double& v : m) v = nd(rng);
  return m;
}

struct VectorHash {
  std::size_t operator()(const std::vector<TokenId>& v) const noexcept {
    std::uint64_t h = v.size();
    for (TokenId t : v) h = hash_combine(h, t);
    return static_cast<std::size_t>(h);
  }
};

/**
 * Hashes (lag, token) pairs into `dim` buckets with a seeded signed value in
 * [0.5, 1.5] scaled by 1/lag, then applies a dim x dim random projection.
 * Distinct windows map to distinct latents with probability one.
 */
class HashedProjection {
 public:
  HashedProjection() = default;
  HashedProjection(std::size_t dim, std::uint64_t seed)
      : dim_(dim), seed_(seed), proj_(gaussian_matrix(dim, dim, hash_combine(seed, 0xC0FFEE))) {
    if (dim == 0) throw std::invalid_argument("latent dimension must be positive");
  }

  std::size_t dim() const noexcept { return dim_; }

  /// Adds the feature of `token` at `lag` (1 = most recent) into `features`.
  void add_feature(std::vector<double>& features, std::size_t lag, std::uint64_t token) const {
    const std::uint64_t h = hash_combine(hash_combine(seed_, lag), token);
    const std::size_t bucket = h % dim_;
    const std::uint64_t h2 = splitmix64(h);
    const double magnitude = 0.5 + static_cast<double>(h2 % 1000003) / 1000003.0;
    const double sign = (h2 >> 63) ? -1.0 : 1.0;
    features[bucket] += sign * magnitude / static_cast<double>(lag);
  }

  void project_into(const std::vector<double>& features, double scale, Latent& out) const {
    for (std::size_t r = 0; r < dim_; ++r) {
      double s = 0.0;
      for (std::size_t c = 0; c < dim_; ++c) s += proj_[r * dim_ + c] * features[c];
      out[r] += static_cast<float>(scale * s);
    }
  }

 private:
  std::size_t dim_ = 0;
  std::uint64_t seed_ = 0;
  std::vector<double> proj_;
};

/// logits = log p + scale * U * shift, with U a fixed C x d Gaussian matrix.
class LatentReadout {
 public:
  LatentReadout() = default;
  LatentReadout(std::size_t vocab, std::size_t dim, double scale, std::uint64_t seed)
      : vocab_(vocab), dim_(dim), scale_(scale), u_(gaussian_matrix(vocab, dim, hash_combine(seed, 0xBEEF))) {}

  TokenDistribution apply(const TokenDistribution& dist, std::span<const float> shift) const {
    if (scale_ == 0.0 || std::all_of(shift.begin(), shift.end(), [](float v) { return v == 0.0f; })) {
      return dist;
    }
    if (shift.size() != dim_) throw std::invalid_argument("latent shift has wrong dimension");
    std::vector<double> logits(vocab_);
    for (std::size_t y = 0; y < vocab_; ++y) {
      double s = 0.0;
      for (std::size_t j = 0; j < dim_; ++j) s += u_[y * dim_ + j] * static_cast<double>(shift[j]);
      const double p = dist.prob(static_cast<TokenId>(y));
      logits[y] = (p > 0.0 ? std::log(p) : -std::numeric_limits<double>::infinity()) + scale_ * s;
    }
    return TokenDistribution::from_logits(logits);
  }

 private:
  std::size_t vocab_ = 0;
  std::size_t dim_ = 0;
  double scale_ = 0.0;
  std::vector<double> u_;
};

inline void check_tokens(TokenSpan tokens, std::size_t vocab, const char* what) {
  for (TokenId t : tokens) {
    if (t >= vocab) {
      throw std::invalid_argument(std::string(what) + " token " + std::to_string(t) + " outside vocabulary of size " +
                                  std::to_string(vocab));
    }
  }
}

}  // namespace detail

struct MarkovOptions {
  std::size_t order = 2;
  double smoothing = 0.01;        ///< add-k constant, must be > 0
  std::size_t latent_dim = 32;
  std::size_t latent_order = 0;   ///< tokens feeding the latent; 0 means `order`
  double readout_scale = 1.0;
  std::uint64_t seed = 0;
  std::optional<TokenId> eos;
};

class MarkovLM : public ModelAdapter {
 public:
  MarkovLM() = default;

  /// Add-k smoothed n-gram estimate; contexts absent from the corpus fall back
  /// to the smoothed unigram distribution.
  static MarkovLM train(std::span<const Sequence> corpus, std::size_t vocab_size, const MarkovOptions& opt) {
    if (corpus.empty()) throw std::invalid_argument("cannot train on an empty corpus");
    if (vocab_size == 0) throw std::invalid_argument("vocabulary must be non-empty");
    if (!(opt.smoothing > 0.0)) throw std::invalid_argument("smoothing constant must be positive");
    if (opt.eos && *opt.eos >= vocab_size) throw std::invalid_argument("eos token outside vocabulary");
    MarkovLM m;
    m.vocab_ = vocab_size;
    m.opt_ = opt;
    if (m.opt_.latent_order == 0) m.opt_.latent_order = opt.order;
    m.features_ = detail::HashedProjection(opt.latent_dim, opt.seed);
    m.readout_ = detail::LatentReadout(vocab_size, opt.latent_dim, opt.readout_scale, opt.seed);

    std::unordered_map<std::vector<TokenId>, std::vector<double>, detail::VectorHash> counts;
    std::vector<double> unigram(vocab_size, 0.0);
    double n_tokens = 0.0;
    for (const auto& seq : corpus) {
      detail::check_tokens(seq.target, vocab_size, "corpus");
      for (std::size_t t = 0; t < seq.target.size(); ++t) {
        auto ctx = m.context(TokenSpan(seq.target).first(t));
        auto& row = counts[ctx];
        if (row.empty()) row.assign(vocab_size, 0.0);
        row[seq.target[t]] += 1.0;
        unigram[seq.target[t]] += 1.0;
        n_tokens += 1.0;
      }
    }
    const double k = opt.smoothing;
    const double c = static_cast<double>(vocab_size);
    for (auto& [ctx, row] : counts) {
      double total = 0.0;
      for (double v : row) total += v;
      for (double& v : row) v = (v + k) / (total + k * c);
      m.table_.emplace(ctx, TokenDistribution(std::move(row)));
    }
    for (double& v : unigram) v = (v + k) / (n_tokens + k * c);
    m.unigram_ = TokenDistribution(std::move(unigram));
    return m;
  }

  std::size_t vocab_size() const override { return vocab_; }
  std::size_t latent_dim() const override { return opt_.latent_dim; }
  std::optional<TokenId> eos_token() const override { return opt_.eos; }
  std::size_t order() const noexcept { return opt_.order; }
  const MarkovOptions& options() const noexcept { return opt_; }
  std::size_t n_contexts() const noexcept { return table_.size(); }

  const TokenDistribution& distribution(TokenSpan prefix) const {
    auto it = table_.find(context(prefix));
    return it == table_.end() ? unigram_ : it->second;
  }

  const TokenDistribution& unigram() const noexcept { return unigram_; }

  StepOutput step(std::optional<TokenSpan> /*source*/, TokenSpan prefix) const override {
    detail::check_tokens(prefix, vocab_, "prefix");
    return StepOutput{distribution(prefix), context_latent(prefix)};
  }

  TokenDistribution perturb(const TokenDistribution& dist, std::span<const float> shift) const override {
    return readout_.apply(dist, shift);
  }

  /// Projection of the most recent latent_order tokens (BOS-padded).
  Latent context_latent(TokenSpan prefix) const {
    std::vector<double> f(opt_.latent_dim, 0.0);
    for (std::size_t lag = 1; lag <= opt_.latent_order; ++lag) {
      const std::uint64_t tok = lag <= prefix.size() ? prefix[prefix.size() - lag] : bos();
      features_.add_feature(f, lag, tok);
    }
    Latent z(opt_.latent_dim, 0.0f);
    features_.project_into(f, 1.0, z);
    return z;
  }

 private:
  std::uint64_t bos() const noexcept { return vocab_; }

  std::vector<TokenId> context(TokenSpan prefix) const {
    std::vector<TokenId> ctx(opt_.order, static_cast<TokenId>(vocab_));
    for (std::size_t lag = 1; lag <= opt_.order && lag <= prefix.size(); ++lag) {
      ctx[opt_.order - lag] = prefix[prefix.size() - lag];
    }
    return ctx;
  }

  std::size_t vocab_ = 0;
  MarkovOptions opt_;
  std::unordered_map<std::vector<TokenId>, TokenDistribution, detail::VectorHash> table_;
  TokenDistribution unigram_;
  detail::HashedProjection features_;
  detail::LatentReadout readout_;
};

inline MarkovLM train_markov(std::span<const Sequence> corpus, std::size_t vocab_size, const MarkovOptions& opt) {
  return MarkovLM::train(corpus, vocab_size, opt);
}

struct Seq2SeqOptions {
  double copy_prob = 0.9;        ///< gamma, weight of the copy channel
  double copy_sharpness = 3.0;   ///< attention decay per position of misalignment
  double source_scale = 1.0;     ///< magnitude of the source component in the latent
  bool source_attention = true;
  std::uint64_t seed = 1;
};

/**
 * Mixture gamma * copy(source) + (1 - gamma) * prior(prefix).
 *
 * The copy channel attends to source positions j with weight
 * exp(-sharpness * |j - t|). Past the end of the source it emits EOS when the
 * prior defines one. Without source attention the output is the prior alone.
 */
class ToySeq2Seq : public ModelAdapter {
 public:
  ToySeq2Seq(MarkovLM prior, Seq2SeqOptions opt) : prior_(std::move(prior)), opt_(opt) {
    if (!(opt.copy_prob >= 0.0 && opt.copy_prob <= 1.0)) throw std::invalid_argument("copy probability must be in [0, 1]");
    if (!(opt.copy_sharpness >= 0.0)) throw std::invalid_argument("copy sharpness must be non-negative");
    source_features_ = detail::HashedProjection(prior_.latent_dim(), detail::hash_combine(opt.seed, 0x5EED));
  }

  std::size_t vocab_size() const override { return prior_.vocab_size(); }
  std::size_t latent_dim() const override { return prior_.latent_dim(); }
  std::optional<TokenId> eos_token() const override { return prior_.eos_token(); }
  const MarkovLM& prior() const noexcept { return prior_; }
  const Seq2SeqOptions& options() const noexcept { return opt_; }

  /// The same model with source attention switched off.
  ToySeq2Seq ablated() const {
    auto o = opt_;
    o.source_attention = false;
    return ToySeq2Seq(prior_, o);
  }

  /// Attention-weighted distribution over copyable source tokens at step t.
  std::vector<double> copy_channel(TokenSpan source, std::size_t t) const {
    std::vector<double> ch(vocab_size(), 0.0);
    const auto eos = eos_token();
    if ((t >= source.size() && eos) || source.empty()) {
      if (eos) ch[*eos] = 1.0;
      else std::fill(ch.begin(), ch.end(), 1.0 / static_cast<double>(ch.size()));
      return ch;
    }
    double total = 0.0;
    for (std::size_t j = 0; j < source.size(); ++j) {
      const double gap = std::abs(static_cast<double>(j) - static_cast<double>(t));
      const double a = std::exp(-opt_.copy_sharpness * gap);
      ch[source[j]] += a;
      total += a;
    }
    for (double& v : ch) v /= total;
    return ch;
  }

  StepOutput step(std::optional<TokenSpan> source, TokenSpan prefix) const override {
    StepOutput out = prior_.step(std::nullopt, prefix);
    if (!source || !opt_.source_attention || opt_.copy_prob == 0.0) return out;
    detail::check_tokens(*source, vocab_size(), "source");
    const std::size_t t = prefix.size();
    const auto ch = copy_channel(*source, t);
    std::vector<double> mix(vocab_size());
    const auto prior = out.dist.probs();
    for (std::size_t y = 0; y < mix.size(); ++y) mix[y] = opt_.copy_prob * ch[y] + (1.0 - opt_.copy_prob) * prior[y];
    out.dist = TokenDistribution::from_weights(std::move(mix));

    std::vector<double> f(latent_dim(), 0.0);
    const std::uint64_t attended = t < source->size() ? (*source)[t] : vocab_size() + 1;
    source_features_.add_feature(f, 1, attended);
    source_features_.project_into(f, opt_.copy_prob * opt_.source_scale, out.latent);
    return out;
  }

  TokenDistribution perturb(const TokenDistribution& dist, std::span<const float> shift) const override {
    return prior_.perturb(dist, shift);
  }

 private:
  MarkovLM prior_;
  Seq2SeqOptions opt_;
  detail::HashedProjection source_features_;
};

/// Adds i.i.d. N(0, variance) noise to every coordinate; variance 0 is the identity.
template <typename Rng>
Latent inject_latent_noise(std::span<const float> latent, double variance, Rng& rng) {
  if (!(variance >= 0.0)) throw std::invalid_argument("noise variance must be non-negative");
  Latent out(latent.begin(), latent.end());
  if (variance == 0.0) return out;
  std::normal_distribution<double> nd(0.0, std::sqrt(variance));
  for (float& v : out) v = static_cast<float>(static_cast<double>(v) + nd(rng));
  return out;
}

}  // namespace necs
