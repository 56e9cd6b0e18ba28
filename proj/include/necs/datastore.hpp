#pragma once

// SPDX-License-Identifier: Apache-2.0

/**
 * @file datastore.hpp
 * @brief Latent-vector datastore with exact and inverted-file neighbor search.
 *
 * Records are (latent, non-conformity score, timestep). Latents are held as
 * 32-bit floats, which is also the persisted precision, so a saved store
 * reloads bit-exactly. Distances accumulate in 64-bit.
 *
 * Proximity convention: for SQUARED_L2 the proximity of a neighbor is its
 * squared distance (smaller is closer); for INNER_PRODUCT and COSINE it is the
 * similarity (larger is closer). Equal proximities resolve by insertion order.
 */

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <limits>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "necs/conformal.hpp"

namespace necs {

enum class Metric : std::uint8_t { kSquaredL2 = 0, kInnerProduct = 1, kCosine = 2 };

inline std::string_view metric_name(Metric m) {
  switch (m) {
    case Metric::kSquaredL2: return "l2";
    case Metric::kInnerProduct: return "ip";
    case Metric::kCosine: return "cos";
  }
  return "unknown";
}

inline Metric parse_metric(std::string_view name) {
  if (name == "l2" || name == "squared_l2") return Metric::kSquaredL2;
  if (name == "ip" || name == "inner_product") return Metric::kInnerProduct;
  if (name == "cos" || name == "cosine") return Metric::kCosine;
  throw std::invalid_argument("unknown metric '" + std::string(name) + "'");
}

/// True when `a` is strictly closer than `b` under the metric's proximity convention.
inline bool closer(Metric m, double a, double b) {
  return m == Metric::kSquaredL2 ? a < b : a > b;
}

struct CalibrationRecord {
  std::vector<float> latent;
  float score = 0.0f;
  std::uint32_t timestep = 0;
};

struct Neighbor {
  double proximity = 0.0;  ///< squared distance or similarity, see file comment
  float score = 0.0f;
  std::size_t index = 0;   ///< insertion index in the store
};

using NeighborSet = std::vector<Neighbor>;

struct IvfConfig {
  std::size_t n_clusters = 1;
  std::size_t n_probe = 1;
  std::size_t kmeans_iters = 25;
  std::uint64_t seed = 0;
};

/// Malformed or truncated store file; `offset` is the byte position of the problem.
class FormatError : public std::runtime_error {
 public:
  FormatError(const std::string& what, std::uint64_t offset)
      : std::runtime_error(what + " at byte offset " + std::to_string(offset)), offset_(offset) {}
  std::uint64_t offset() const noexcept { return offset_; }

 private:
  std::uint64_t offset_;
};

namespace detail {

inline double dot(std::span<const float> a, std::span<const float> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += static_cast<double>(a[i]) * static_cast<double>(b[i]);
  return s;
}

inline double squared_l2(std::span<const float> a, std::span<const float> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double diff = static_cast<double>(a[i]) - static_cast<double>(b[i]);
    s += diff * diff;
  }
  return s;
}

inline double norm(std::span<const float> a) { return std::sqrt(dot(a, a)); }

/// Cosine similarity given precomputed norms; zero vectors have similarity 0.
inline double cosine(std::span<const float> a, double norm_a, std::span<const float> b, double norm_b) {
  if (norm_a == 0.0 || norm_b == 0.0) return 0.0;
  return dot(a, b) / (norm_a * norm_b);
}

/// Keeps the K best (proximity, index) pairs; ties resolve to the lower index.
inline void select_top_k(Metric m, NeighborSet& cand, std::size_t k) {
  auto better = [m](const Neighbor& a, const Neighbor& b) {
    if (a.proximity != b.proximity) return closer(m, a.proximity, b.proximity);
    return a.index < b.index;
  };
  k = std::min(k, cand.size());
  std::partial_sort(cand.begin(), cand.begin() + static_cast<std::ptrdiff_t>(k), cand.end(), better);
  cand.resize(k);
}

// Little-endian byte encoding, independent of host order.
class ByteWriter {
 public:
  template <typename U>
  void put_uint(U v) {
    for (std::size_t i = 0; i < sizeof(U); ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
  }
  void put_u8(std::uint8_t v) { buf_.push_back(static_cast<char>(v)); }
  void put_f32(float v) { put_uint(std::bit_cast<std::uint32_t>(v)); }
  void put_f64(double v) { put_uint(std::bit_cast<std::uint64_t>(v)); }
  void put_bytes(std::string_view s) { buf_.insert(buf_.end(), s.begin(), s.end()); }
  const std::vector<char>& bytes() const noexcept { return buf_; }

 private:
  std::vector<char> buf_;
};

class ByteReader {
 public:
  explicit ByteReader(std::vector<char> data) : data_(std::move(data)) {}

  template <typename U>
  U get_uint(const char* what) {
    need(sizeof(U), what);
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) {
      v |= static_cast<U>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
    }
    pos_ += sizeof(U);
    return v;
  }
  std::uint8_t get_u8(const char* what) { return get_uint<std::uint8_t>(what); }
  float get_f32(const char* what) { return std::bit_cast<float>(get_uint<std::uint32_t>(what)); }
  double get_f64(const char* what) { return std::bit_cast<double>(get_uint<std::uint64_t>(what)); }
  std::string get_bytes(std::size_t n, const char* what) {
    need(n, what);
    std::string s(data_.data() + pos_, n);
    pos_ += n;
    return s;
  }
  std::uint64_t offset() const noexcept { return pos_; }
  std::size_t remaining() const noexcept { return data_.size() - pos_; }

 private:
  void need(std::size_t n, const char* what) const {
    if (data_.size() - pos_ < n) {
      throw FormatError(std::string("truncated file while reading ") + what, pos_);
    }
  }
  std::vector<char> data_;
  std::size_t pos_ = 0;
};

}  // namespace detail

/**
 * Immutable collection of calibration records with optional IVF index.
 *
 * An IVF store partitions records over k-means centroids; a query scans only
 * the records of the n_probe clusters whose centroids are closest under the
 * store metric, then returns the exact top K among those candidates.
 */
class Datastore {
 public:
  static constexpr std::string_view kMagic = "NECS";
  static constexpr std::uint32_t kVersion = 1;

  Datastore() = default;

  /// Flat (exact) store, or an IVF store when `ivf` is given.
  static Datastore build(std::span<const CalibrationRecord> records, Metric metric,
                         std::optional<IvfConfig> ivf = std::nullopt, double tau_hint = 0.0) {
    if (records.empty()) throw std::invalid_argument("cannot build a datastore from zero records");
    Datastore s;
    s.metric_ = metric;
    s.dim_ = records.front().latent.size();
    s.tau_hint_ = tau_hint;
    if (s.dim_ == 0) throw std::invalid_argument("latent dimension must be positive");
    s.latents_.reserve(records.size() * s.dim_);
    for (const auto& r : records) {
      if (r.latent.size() != s.dim_) {
        throw std::invalid_argument("record latent dimension " + std::to_string(r.latent.size()) +
                                    " differs from " + std::to_string(s.dim_));
      }
      for (float v : r.latent) {
        if (!std::isfinite(v)) throw std::invalid_argument("record latent has non-finite entry");
      }
      if (!(r.score >= 0.0f && r.score <= 1.0f)) throw std::invalid_argument("record score outside [0, 1]");
      s.latents_.insert(s.latents_.end(), r.latent.begin(), r.latent.end());
      s.scores_.push_back(r.score);
      s.timesteps_.push_back(r.timestep);
    }
    s.compute_norms();
    if (ivf) s.train_ivf(*ivf);
    return s;
  }

  std::size_t size() const noexcept { return scores_.size(); }
  bool empty() const noexcept { return scores_.empty(); }
  std::size_t dim() const noexcept { return dim_; }
  Metric metric() const noexcept { return metric_; }
  double tau_hint() const noexcept { return tau_hint_; }
  bool has_ivf() const noexcept { return !centroids_.empty(); }
  std::size_t n_clusters() const noexcept { return has_ivf() ? centroids_.size() / dim_ : 0; }
  std::size_t n_probe() const noexcept { return n_probe_; }
  std::span<const std::uint32_t> assignments() const noexcept { return assignments_; }
  std::span<const float> centroid(std::size_t c) const {
    return std::span<const float>(centroids_).subspan(c * dim_, dim_);
  }
  std::span<const float> latent(std::size_t i) const {
    return std::span<const float>(latents_).subspan(i * dim_, dim_);
  }
  float score(std::size_t i) const { return scores_.at(i); }
  std::uint32_t timestep(std::size_t i) const { return timesteps_.at(i); }

  CalibrationRecord record(std::size_t i) const {
    auto z = latent(i);
    return CalibrationRecord{std::vector<float>(z.begin(), z.end()), scores_.at(i), timesteps_.at(i)};
  }

  /// Copy of this store probing a different number of clusters.
  Datastore with_n_probe(std::size_t n_probe) const {
    if (!has_ivf()) throw std::invalid_argument("store has no IVF index");
    if (n_probe < 1 || n_probe > n_clusters()) throw std::invalid_argument("n_probe must be in [1, n_clusters]");
    Datastore s = *this;
    s.n_probe_ = n_probe;
    return s;
  }

  /// Proximity of query `z` (with norm `z_norm`) to record i.
  double proximity(std::span<const float> z, double z_norm, std::size_t i) const {
    switch (metric_) {
      case Metric::kSquaredL2: return detail::squared_l2(z, latent(i));
      case Metric::kInnerProduct: return detail::dot(z, latent(i));
      case Metric::kCosine: return detail::cosine(z, z_norm, latent(i), norms_[i]);
    }
    return 0.0;
  }

  /// K nearest records: exact for flat stores, exact within probed clusters for IVF.
  NeighborSet query(std::span<const float> z, std::size_t k) const {
    if (empty()) throw std::invalid_argument("query on an empty datastore");
    if (z.size() != dim_) {
      throw std::invalid_argument("query dimension " + std::to_string(z.size()) + " differs from store dimension " +
                                  std::to_string(dim_));
    }
    if (k < 1) throw std::invalid_argument("K must be at least 1");
    const double z_norm = detail::norm(z);
    NeighborSet cand;
    auto consider = [&](std::size_t i) { cand.push_back(Neighbor{proximity(z, z_norm, i), scores_[i], i}); };
    if (!has_ivf()) {
      cand.reserve(size());
      for (std::size_t i = 0; i < size(); ++i) consider(i);
    } else {
      for (std::size_t c : probe_order(z, z_norm, n_probe_)) {
        for (std::uint32_t i : lists_[c]) consider(i);
      }
    }
    detail::select_top_k(metric_, cand, k);
    return cand;
  }

  /// The `count` clusters closest to z under the store metric, closest first.
  std::vector<std::size_t> probe_order(std::span<const float> z, double z_norm, std::size_t count) const {
    const std::size_t nc = n_clusters();
    NeighborSet cs(nc);
    for (std::size_t c = 0; c < nc; ++c) cs[c] = Neighbor{centroid_proximity(z, z_norm, c), 0.0f, c};
    detail::select_top_k(metric_, cs, count);
    std::vector<std::size_t> out;
    out.reserve(cs.size());
    for (const auto& n : cs) out.push_back(n.index);
    return out;
  }

  /// Index of the closest centroid to z under the store metric.
  std::size_t nearest_centroid(std::span<const float> z) const { return probe_order(z, detail::norm(z), 1).front(); }

  // --------------------------------------------------------------------------
  // Persistence
  // --------------------------------------------------------------------------

  std::vector<char> serialize() const {
    detail::ByteWriter w;
    w.put_bytes(kMagic);
    w.put_uint<std::uint32_t>(kVersion);
    w.put_u8(static_cast<std::uint8_t>(metric_));
    w.put_uint<std::uint32_t>(static_cast<std::uint32_t>(dim_));
    w.put_uint<std::uint64_t>(size());
    w.put_f64(tau_hint_);
    for (std::size_t i = 0; i < size(); ++i) {
      for (float v : latent(i)) w.put_f32(v);
      w.put_f32(scores_[i]);
      w.put_uint<std::uint32_t>(timesteps_[i]);
    }
    if (has_ivf()) {
      w.put_uint<std::uint32_t>(static_cast<std::uint32_t>(n_clusters()));
      w.put_uint<std::uint32_t>(static_cast<std::uint32_t>(n_probe_));
      for (float v : centroids_) w.put_f32(v);
      for (std::uint32_t a : assignments_) w.put_uint<std::uint32_t>(a);
    }
    return w.bytes();
  }

  static Datastore deserialize(std::vector<char> bytes) {
    detail::ByteReader r(std::move(bytes));
    if (r.get_bytes(4, "magic") != kMagic) throw FormatError("bad magic, expected \"NECS\"", 0);
    const auto version_at = r.offset();
    if (const auto v = r.get_uint<std::uint32_t>("version"); v != kVersion) {
      throw FormatError("unsupported version " + std::to_string(v), version_at);
    }
    Datastore s;
    const auto metric_at = r.offset();
    const auto metric_id = r.get_u8("metric");
    if (metric_id > 2) throw FormatError("unknown metric id " + std::to_string(metric_id), metric_at);
    s.metric_ = static_cast<Metric>(metric_id);
    const auto dim_at = r.offset();
    s.dim_ = r.get_uint<std::uint32_t>("dimension");
    if (s.dim_ == 0) throw FormatError("zero latent dimension", dim_at);
    const auto n_at = r.offset();
    const auto n = r.get_uint<std::uint64_t>("record count");
    s.tau_hint_ = r.get_f64("tau hint");
    const std::uint64_t record_bytes = 4ull * (s.dim_ + 2);
    if (n == 0) throw FormatError("store holds zero records", n_at);
    if (n > r.remaining() / record_bytes) throw FormatError("truncated file: record block shorter than declared", r.offset());
    s.latents_.reserve(n * s.dim_);
    for (std::uint64_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < s.dim_; ++j) s.latents_.push_back(r.get_f32("latent"));
      const auto score_at = r.offset();
      const float score = r.get_f32("score");
      if (!(score >= 0.0f && score <= 1.0f)) throw FormatError("score outside [0, 1]", score_at);
      s.scores_.push_back(score);
      s.timesteps_.push_back(r.get_uint<std::uint32_t>("timestep"));
    }
    s.compute_norms();
    if (r.remaining() > 0) {
      const auto nc_at = r.offset();
      const auto nc = r.get_uint<std::uint32_t>("cluster count");
      const auto np = r.get_uint<std::uint32_t>("probe count");
      if (nc == 0 || nc > n) throw FormatError("invalid cluster count " + std::to_string(nc), nc_at);
      if (np == 0 || np > nc) throw FormatError("invalid probe count " + std::to_string(np), nc_at + 4);
      s.n_probe_ = np;
      s.centroids_.reserve(std::size_t{nc} * s.dim_);
      for (std::size_t j = 0; j < std::size_t{nc} * s.dim_; ++j) s.centroids_.push_back(r.get_f32("centroid"));
      s.assignments_.reserve(n);
      for (std::uint64_t i = 0; i < n; ++i) {
        const auto at = r.offset();
        const auto a = r.get_uint<std::uint32_t>("assignment");
        if (a >= nc) throw FormatError("assignment out of range", at);
        s.assignments_.push_back(a);
      }
      s.rebuild_lists();
      if (r.remaining() > 0) throw FormatError("trailing bytes after IVF block", r.offset());
    }
    return s;
  }

  void save(const std::string& path) const {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open '" + path + "' for writing");
    const auto bytes = serialize();
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("failed writing '" + path + "'");
  }

  static Datastore load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open '" + path + "' for reading");
    std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return deserialize(std::move(bytes));
  }

  friend bool operator==(const Datastore& a, const Datastore& b) {
    return a.metric_ == b.metric_ && a.dim_ == b.dim_ && std::bit_cast<std::uint64_t>(a.tau_hint_) ==
               std::bit_cast<std::uint64_t>(b.tau_hint_) && a.serialize() == b.serialize();
  }

 private:
  void compute_norms() {
    norms_.resize(size());
    for (std::size_t i = 0; i < size(); ++i) norms_[i] = detail::norm(latent(i));
  }

  double centroid_proximity(std::span<const float> z, double z_norm, std::size_t c) const {
    auto mu = centroid(c);
    switch (metric_) {
      case Metric::kSquaredL2: return detail::squared_l2(z, mu);
      case Metric::kInnerProduct: return detail::dot(z, mu);
      case Metric::kCosine: return detail::cosine(z, z_norm, mu, detail::norm(mu));
    }
    return 0.0;
  }

  void rebuild_lists() {
    lists_.assign(n_clusters(), {});
    for (std::size_t i = 0; i < assignments_.size(); ++i) lists_[assignments_[i]].push_back(static_cast<std::uint32_t>(i));
  }

  // k-means++ seeding, fixed Lloyd iterations in squared L2 (on unit-normalized
  // vectors for cosine stores). Empty clusters are re-seeded from the point
  // farthest from its current centroid.
  void train_ivf(const IvfConfig& cfg) {
    const std::size_t n = size();
    const std::size_t k = cfg.n_clusters;
    if (k < 1 || k > n) {
      throw std::invalid_argument("n_clusters must be in [1, " + std::to_string(n) + "], got " + std::to_string(k));
    }
    if (cfg.n_probe < 1 || cfg.n_probe > k) throw std::invalid_argument("n_probe must be in [1, n_clusters]");

    std::vector<double> pts(latents_.begin(), latents_.end());
    if (metric_ == Metric::kCosine) {
      for (std::size_t i = 0; i < n; ++i) {
        if (norms_[i] == 0.0) continue;
        for (std::size_t j = 0; j < dim_; ++j) pts[i * dim_ + j] /= norms_[i];
      }
    }
    auto pt = [&](std::size_t i) { return std::span<const double>(pts).subspan(i * dim_, dim_); };
    auto dist2 = [&](std::span<const double> a, std::span<const double> b) {
      double s = 0.0;
      for (std::size_t j = 0; j < dim_; ++j) s += (a[j] - b[j]) * (a[j] - b[j]);
      return s;
    };

    std::mt19937_64 rng(cfg.seed);
    std::vector<double> cent;
    cent.reserve(k * dim_);
    auto cen = [&](std::size_t c) { return std::span<const double>(cent).subspan(c * dim_, dim_); };
    auto push_point = [&](std::size_t i) { cent.insert(cent.end(), pt(i).begin(), pt(i).end()); };

    push_point(std::uniform_int_distribution<std::size_t>(0, n - 1)(rng));
    std::vector<double> best(n);
    for (std::size_t i = 0; i < n; ++i) best[i] = dist2(pt(i), cen(0));
    for (std::size_t c = 1; c < k; ++c) {
      const double total = std::accumulate(best.begin(), best.end(), 0.0);
      std::size_t pick = 0;
      if (total > 0.0) {
        double u = std::uniform_real_distribution<double>(0.0, total)(rng);
        for (pick = 0; pick + 1 < n; ++pick) {
          u -= best[pick];
          if (u < 0.0) break;
        }
      } else {
        pick = std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
      }
      push_point(pick);
      for (std::size_t i = 0; i < n; ++i) best[i] = std::min(best[i], dist2(pt(i), cen(c)));
    }

    std::vector<std::uint32_t> assign(n, 0);
    std::vector<double> assign_d(n, 0.0);
    auto assign_all = [&] {
      for (std::size_t i = 0; i < n; ++i) {
        std::size_t arg = 0;
        double bd = std::numeric_limits<double>::infinity();
        for (std::size_t c = 0; c < k; ++c) {
          const double d = dist2(pt(i), cen(c));
          if (d < bd) {
            bd = d;
            arg = c;
          }
        }
        assign[i] = static_cast<std::uint32_t>(arg);
        assign_d[i] = bd;
      }
    };
    for (std::size_t it = 0; it < cfg.kmeans_iters; ++it) {
      assign_all();
      std::vector<double> sums(k * dim_, 0.0);
      std::vector<std::size_t> counts(k, 0);
      for (std::size_t i = 0; i < n; ++i) {
        ++counts[assign[i]];
        for (std::size_t j = 0; j < dim_; ++j) sums[assign[i] * dim_ + j] += pts[i * dim_ + j];
      }
      std::vector<bool> taken(n, false);
      for (std::size_t c = 0; c < k; ++c) {
        if (counts[c] > 0) {
          for (std::size_t j = 0; j < dim_; ++j) cent[c * dim_ + j] = sums[c * dim_ + j] / static_cast<double>(counts[c]);
          continue;
        }
        std::size_t far = 0;
        double fd = -1.0;
        for (std::size_t i = 0; i < n; ++i) {
          if (!taken[i] && assign_d[i] > fd) {
            fd = assign_d[i];
            far = i;
          }
        }
        taken[far] = true;
        std::copy(pt(far).begin(), pt(far).end(), cent.begin() + static_cast<std::ptrdiff_t>(c * dim_));
      }
    }

    centroids_.assign(cent.begin(), cent.end());
    n_probe_ = cfg.n_probe;
    assignments_.resize(n);
    for (std::size_t i = 0; i < n; ++i) assignments_[i] = static_cast<std::uint32_t>(nearest_centroid(latent(i)));
    rebuild_lists();
  }

  Metric metric_ = Metric::kSquaredL2;
  std::size_t dim_ = 0;
  double tau_hint_ = 0.0;
  std::vector<float> latents_;
  std::vector<float> scores_;
  std::vector<std::uint32_t> timesteps_;
  std::vector<double> norms_;
  std::vector<float> centroids_;
  std::vector<std::uint32_t> assignments_;
  std::vector<std::vector<std::uint32_t>> lists_;
  std::size_t n_probe_ = 0;
};

/// Convenience wrapper mirroring Datastore::build.
inline Datastore build_store(std::span<const CalibrationRecord> records, Metric metric,
                             std::optional<IvfConfig> ivf = std::nullopt, double tau_hint = 0.0) {
  return Datastore::build(records, metric, ivf, tau_hint);
}

/// Largest exponent fed to exp() for similarity kernels; keeps (1 + sum w) finite.
inline constexpr double kMaxKernelExponent = 600.0;

/**
 * Kernel weights for retrieved neighbors.
 *
 *   SQUARED_L2:    w = exp(-dist / tau)
 *   INNER_PRODUCT: w = exp((z . z_k / sqrt(d)) / tau)
 *   COSINE:        w = exp(cos(z, z_k) / tau)
 */
inline std::vector<double> compute_weights(std::span<const Neighbor> neighbors, double tau, Metric metric,
                                           std::size_t dim) {
  if (!(tau > 0.0)) throw std::invalid_argument("temperature tau must be positive");
  std::vector<double> w;
  w.reserve(neighbors.size());
  const double ip_scale = 1.0 / std::sqrt(static_cast<double>(std::max<std::size_t>(dim, 1)));
  for (const auto& n : neighbors) {
    double e = 0.0;
    switch (metric) {
      case Metric::kSquaredL2: e = -n.proximity / tau; break;
      case Metric::kInnerProduct: e = n.proximity * ip_scale / tau; break;
      case Metric::kCosine: e = n.proximity / tau; break;
    }
    w.push_back(std::exp(std::min(e, kMaxKernelExponent)));
  }
  return w;
}

}  // namespace necs
