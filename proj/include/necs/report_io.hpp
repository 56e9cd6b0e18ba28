#pragma once

// SPDX-License-Identifier: Apache-2.0

// JSON and CSV encodings of manifests, reports, cohort models and generations.
// An infinite conformal threshold is written as JSON null and as "inf" in CSV.

#include <cstdio>
#include <ostream>
#include <string>

#include <json.hpp>

#include "necs/calibration.hpp"
#include "necs/decoding.hpp"
#include "necs/evaluation.hpp"
#include "necs/hallucination.hpp"

namespace necs {

using nlohmann::json;

inline json quantile_json(Quantile q) { return q.is_finite() ? json(q.value()) : json(nullptr); }

template <typename T>
json optional_json(const std::optional<T>& v) {
  return v ? json(*v) : json(nullptr);
}

/// Shortest round-trip decimal form, stable across runs.
inline std::string csv_number(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  if (std::isnan(v)) return "nan";
  return json(v).dump();
}

struct CalibrationManifest {
  double tau = 0.0;
  double alpha = 0.1;
  std::size_t k = 100;
  Metric metric = Metric::kSquaredL2;
  ScoreKind score = ScoreKind::kAdaptive;
  std::string store_path;
  std::size_t n_records = 0;
  std::optional<double> coverage_at_tau;
  std::vector<SearchPoint> search_trace;
};

inline json to_json(const CalibrationManifest& m) {
  json trace = json::array();
  for (const auto& p : m.search_trace) trace.push_back(json::array({p.tau, p.coverage}));
  return json{{"tau", m.tau},
              {"alpha", m.alpha},
              {"K", m.k},
              {"metric", std::string(metric_name(m.metric))},
              {"score", std::string(score_kind_name(m.score))},
              {"store_path", m.store_path},
              {"n_records", m.n_records},
              {"coverage_at_tau", optional_json(m.coverage_at_tau)},
              {"search_trace", trace}};
}

inline CalibrationManifest manifest_from_json(const json& j) {
  CalibrationManifest m;
  m.tau = j.at("tau").get<double>();
  m.alpha = j.at("alpha").get<double>();
  m.k = j.at("K").get<std::size_t>();
  m.metric = parse_metric(j.at("metric").get<std::string>());
  m.score = parse_score_kind(j.value("score", std::string("adaptive")));
  m.store_path = j.at("store_path").get<std::string>();
  m.n_records = j.value("n_records", std::size_t{0});
  if (j.contains("coverage_at_tau") && !j.at("coverage_at_tau").is_null()) {
    m.coverage_at_tau = j.at("coverage_at_tau").get<double>();
  }
  for (const auto& p : j.value("search_trace", json::array())) m.search_trace.push_back({p.at(0).get<double>(), p.at(1).get<double>()});
  return m;
}

inline json to_json(const CoverageReport& r) {
  json bins = json::array();
  for (const auto& b : r.bins) {
    bins.push_back({{"count", b.count}, {"coverage", b.coverage}, {"width_lo", b.width_lo}, {"width_hi", b.width_hi}});
  }
  return json{{"strategy", r.strategy},
              {"alpha", r.alpha},
              {"vocab_size", r.vocab_size},
              {"n_steps", r.n_steps},
              {"coverage", r.coverage},
              {"avg_width_fraction", r.avg_width_fraction},
              {"mean_set_size", r.mean_set_size},
              {"mean_q_hat", optional_json(r.mean_q_hat)},
              {"inf_fraction", r.inf_fraction},
              {"ecg", r.ecg},
              {"ssc", r.ssc},
              {"spearman_rho", optional_json(r.spearman_rho)},
              {"bins", bins}};
}

inline void write_bins_csv(std::ostream& out, const CoverageReport& r) {
  out << "bin,width_lo,width_hi,count,coverage\n";
  for (std::size_t b = 0; b < r.bins.size(); ++b) {
    const auto& bin = r.bins[b];
    out << b << ',' << csv_number(bin.width_lo) << ',' << csv_number(bin.width_hi) << ',' << bin.count << ','
        << csv_number(bin.coverage) << '\n';
  }
}

inline json to_json(const MeanStd& m) { return json{{"mean", m.mean}, {"std", m.std}}; }

inline json to_json(const ShiftReport& r) {
  json levels = json::array();
  for (const auto& l : r.levels) {
    levels.push_back({{"variance", l.variance},
                      {"coverage", to_json(l.coverage)},
                      {"avg_width_fraction", to_json(l.avg_width_fraction)},
                      {"mean_set_size", to_json(l.mean_set_size)},
                      {"mean_q_hat", l.mean_q_hat ? to_json(*l.mean_q_hat) : json(nullptr)},
                      {"inf_fraction", to_json(l.inf_fraction)}});
  }
  json runs = json::array();
  for (const auto& x : r.runs) {
    runs.push_back({{"variance", x.variance},
                    {"seed", x.seed},
                    {"coverage", x.coverage},
                    {"avg_width_fraction", x.avg_width_fraction},
                    {"mean_set_size", x.mean_set_size},
                    {"mean_q_hat", optional_json(x.mean_q_hat)},
                    {"inf_fraction", x.inf_fraction}});
  }
  return json{{"strategy", r.strategy}, {"levels", levels}, {"runs", runs}};
}

inline void write_shift_csv(std::ostream& out, std::span<const ShiftReport> reports) {
  out << "strategy,variance,seed,coverage,avg_width_fraction,mean_set_size,mean_q_hat,inf_fraction\n";
  for (const auto& r : reports) {
    for (const auto& x : r.runs) {
      out << r.strategy << ',' << csv_number(x.variance) << ',' << x.seed << ',' << csv_number(x.coverage) << ','
          << csv_number(x.avg_width_fraction) << ',' << csv_number(x.mean_set_size) << ','
          << (x.mean_q_hat ? csv_number(*x.mean_q_hat) : std::string("")) << ',' << csv_number(x.inf_fraction) << '\n';
    }
  }
}

inline json to_json(const CohortModel& m) {
  auto enc = [](const std::vector<Gaussian>& gs) {
    json a = json::array();
    for (const auto& g : gs) a.push_back(json::array({g.mean, g.var}));
    return a;
  };
  return json{{"T_fit", m.t_fit()}, {"C", m.vocab_size}, {"normal", enc(m.normal)}, {"hallucinatory", enc(m.hallucinatory)}};
}

inline CohortModel cohort_model_from_json(const json& j) {
  auto dec = [](const json& a) {
    std::vector<Gaussian> gs;
    for (const auto& p : a) gs.push_back({p.at(0).get<double>(), p.at(1).get<double>()});
    return gs;
  };
  CohortModel m{j.at("C").get<std::size_t>(), dec(j.at("normal")), dec(j.at("hallucinatory"))};
  if (m.normal.size() != j.at("T_fit").get<std::size_t>() || m.hallucinatory.size() != m.normal.size()) {
    throw std::invalid_argument("cohort model arrays disagree with T_fit");
  }
  return m;
}

inline json to_json(const DetectionReport& r) {
  return json{{"ate", r.ate},
              {"mean_log_bf_normal", r.mean_log_bf_normal},
              {"mean_log_bf_hallucinatory", r.mean_log_bf_hallucinatory},
              {"fpr", r.fpr},
              {"fnr", r.fnr},
              {"abstention_rate", r.abstention_rate},
              {"n_pairs", r.n_pairs},
              {"decided_normal", r.decided_normal},
              {"decided_hallucinatory", r.decided_hallucinatory}};
}

/// One JSON Lines record for a generated sequence.
inline json generation_json(const Generation& g, const std::string& strategy, std::uint64_t seed) {
  json trace = json::array();
  for (const auto& s : g.trace) {
    trace.push_back({{"t", s.t}, {"set_size", s.set_size}, {"q_hat", quantile_json(s.q_hat)}, {"entropy", s.entropy}});
  }
  return json{{"tokens", g.tokens}, {"strategy", strategy}, {"seed", seed}, {"trace", trace}};
}

}  // namespace necs
