#pragma once

// SPDX-License-Identifier: Apache-2.0

/**
 * @file cli.hpp
 * @brief Batch front end: calibrate, tune, coverage, generate, shift, hallucinate, synth.
 *
 * Every command reads one JSON run config. Paths inside the config resolve
 * against the config file's directory; outputs go to `output_dir` (or --out).
 * Exit codes: 0 success, 2 config or schema, 3 data format, 4 numeric failure.
 * Failures print {"error": {...}} on stderr.
 *
 * Run config keys (all optional unless a command needs them):
 *
 *   vocab                  TSV vocabulary, one "id<TAB>token" per line
 *   corpus.{train,calibration,heldout,test}   JSONL corpora
 *   model                  {type: markov|seq2seq, order, latent_order, smoothing,
 *                           latent_dim, readout_scale, seed, eos,
 *                           copy_prob, copy_sharpness, source_scale}
 *   score                  simple | adaptive
 *   alpha, K, tau, metric  experiment-wide defaults for strategies
 *   ivf                    {n_clusters, n_probe, kmeans_iters}
 *   strategy, strategies   {name, ...}; names as printed by strategy_name()
 *   bins, entropy_bins, softmax_temperature
 *   tune                   {tau_min, tau_max, steps, eta, eval_batches, batch_size, surrogate}
 *   noise_levels, seeds
 *   generate               {n, max_len, prompt_len}
 *   hallucination          {n_fit, max_len}
 *   store, manifest        datastore and manifest locations
 *   seed, output_dir
 *   synth                  toy corpus generator settings
 */

#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "necs/calibration.hpp"
#include "necs/corpus.hpp"
#include "necs/datastore.hpp"
#include "necs/decoding.hpp"
#include "necs/evaluation.hpp"
#include "necs/hallucination.hpp"
#include "necs/models.hpp"
#include "necs/parallel.hpp"
#include "necs/report_io.hpp"
#include "necs/synthetic.hpp"

namespace necs::cli {

namespace fs = std::filesystem;

enum ExitCode : int { kExitOk = 0, kExitConfig = 2, kExitData = 3, kExitNumeric = 4 };

/// Invalid, incomplete or inconsistent run configuration.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Failure reading or writing a file that passed validation.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Options {
  std::string command;
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::vector<std::string> overrides;
  std::optional<double> alpha;
  std::optional<std::size_t> k;
  std::optional<double> tau;
};

// ============================================================================
// Config loading and schema
// ============================================================================

namespace detail {

inline const json& config_schema() {
  static const json schema = json::parse(R"({
    "vocab": "string",
    "corpus": {"train": "string", "calibration": "string", "heldout": "string", "test": "string"},
    "model": {"type": "string", "order": "uint", "latent_order": "uint", "smoothing": "number",
              "latent_dim": "uint", "readout_scale": "number", "seed": "uint", "eos": "token",
              "copy_prob": "number", "copy_sharpness": "number", "source_scale": "number"},
    "score": "string",
    "alpha": "number",
    "K": "uint",
    "tau": "number",
    "metric": "string",
    "ivf": {"n_clusters": "uint", "n_probe": "uint", "kmeans_iters": "uint"},
    "strategy": "strategy",
    "strategies": "strategy[]",
    "bins": "uint",
    "entropy_bins": "uint",
    "softmax_temperature": "number",
    "tune": {"tau_min": "number", "tau_max": "number", "steps": "uint", "eta": "number",
             "eval_batches": "uint", "batch_size": "uint", "surrogate": "bool"},
    "noise_levels": "number[]",
    "seeds": "uint[]",
    "generate": {"n": "uint", "max_len": "uint", "prompt_len": "uint"},
    "hallucination": {"n_fit": "uint", "max_len": "uint"},
    "store": "string",
    "manifest": "string",
    "seed": "uint",
    "output_dir": "string",
    "synth": {"vocab_size": "uint", "order": "uint", "min_sharpness": "number", "max_sharpness": "number",
              "seed": "uint", "length": "uint", "n_train": "uint", "n_calibration": "uint",
              "n_heldout": "uint", "n_test": "uint", "parallel": "bool", "keep": "number"}
  })");
  return schema;
}

inline const json& strategy_fields() {
  static const json fields = json::parse(R"({
    "greedy": {},
    "beam": {"beams": "uint"},
    "top_k": {"k": "uint"},
    "nucleus": {"p": "number"},
    "entropy_conformal": {"alpha": "number", "n_bins": "uint"},
    "const_weight_cs": {"alpha": "number", "K": "uint"},
    "non_ex_cs": {"alpha": "number", "K": "uint", "tau": "number", "metric": "string"}
  })");
  return fields;
}

inline bool has_type(const json& v, const std::string& type) {
  if (type == "string") return v.is_string();
  if (type == "number") return v.is_number();
  if (type == "uint") return v.is_number_unsigned() || (v.is_number_integer() && v.get<long long>() >= 0);
  if (type == "bool") return v.is_boolean();
  if (type == "token") return v.is_string() || has_type(v, "uint");
  return false;
}

inline void check_strategy(const json& v, const std::string& where) {
  if (!v.is_object()) throw ConfigError(where + ": expected a strategy object");
  if (!v.contains("name") || !v.at("name").is_string()) throw ConfigError(where + ": strategy needs a string \"name\"");
  const auto name = v.at("name").get<std::string>();
  if (!strategy_fields().contains(name)) throw ConfigError(where + ": unknown strategy '" + name + "'");
  const auto& allowed = strategy_fields().at(name);
  for (const auto& [key, val] : v.items()) {
    if (key == "name") continue;
    if (!allowed.contains(key)) throw ConfigError(where + ": strategy '" + name + "' has no field '" + key + "'");
    if (!has_type(val, allowed.at(key).get<std::string>())) {
      throw ConfigError(where + "." + key + ": expected " + allowed.at(key).get<std::string>());
    }
  }
}

inline void check_value(const json& v, const json& type, const std::string& where) {
  if (type.is_object()) {
    if (!v.is_object()) throw ConfigError(where + ": expected an object");
    for (const auto& [key, val] : v.items()) {
      if (!type.contains(key)) throw ConfigError("unknown config key '" + where + "." + key + "'");
      check_value(val, type.at(key), where + "." + key);
    }
    return;
  }
  const auto t = type.get<std::string>();
  if (t == "strategy") return check_strategy(v, where);
  if (t.ends_with("[]")) {
    if (!v.is_array()) throw ConfigError(where + ": expected an array");
    const auto elem = t.substr(0, t.size() - 2);
    for (std::size_t i = 0; i < v.size(); ++i) {
      const auto w = where + "[" + std::to_string(i) + "]";
      if (elem == "strategy") check_strategy(v[i], w);
      else if (!has_type(v[i], elem)) throw ConfigError(w + ": expected " + elem);
    }
    return;
  }
  if (!has_type(v, t)) throw ConfigError(where + ": expected " + t);
}

}  // namespace detail

/// Rejects unknown keys and mistyped values.
inline void validate_config(const json& cfg) {
  if (!cfg.is_object()) throw ConfigError("config must be a JSON object");
  const auto& schema = detail::config_schema();
  for (const auto& [key, val] : cfg.items()) {
    if (!schema.contains(key)) throw ConfigError("unknown config key '" + key + "'");
    detail::check_value(val, schema.at(key), key);
  }
}

/// KEY=VALUE with a dotted key; VALUE is parsed as JSON, else taken as a string.
inline void apply_override(json& cfg, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "' is not KEY=VALUE");
  const auto key = assignment.substr(0, eq);
  const auto text = assignment.substr(eq + 1);
  json value = json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;
  json* node = &cfg;
  std::size_t start = 0;
  while (true) {
    const auto dot = key.find('.', start);
    const auto part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (part.empty()) throw ConfigError("override key '" + key + "' has an empty component");
    if (!node->is_object()) throw ConfigError("override key '" + key + "' descends into a non-object");
    if (dot == std::string::npos) {
      (*node)[part] = std::move(value);
      return;
    }
    node = &(*node)[part];
    if (node->is_null()) *node = json::object();
    start = dot + 1;
  }
}

struct RunContext {
  json cfg;
  fs::path base_dir;
  fs::path out_dir;
  std::uint64_t seed = 0;
  std::size_t threads = 1;

  fs::path resolve(const std::string& p) const {
    const fs::path path(p);
    return (path.is_absolute() ? path : base_dir / path).lexically_normal();
  }

  bool has(const std::string& key) const { return cfg.contains(key); }

  template <typename T>
  T get(const std::string& key, T fallback) const {
    return cfg.contains(key) ? cfg.at(key).get<T>() : fallback;
  }

  template <typename T>
  T sub(const std::string& section, const std::string& key, T fallback) const {
    if (!cfg.contains(section) || !cfg.at(section).contains(key)) return fallback;
    return cfg.at(section).at(key).get<T>();
  }

  /// Existing input file named by a config string; a missing file is a config error.
  fs::path input(const std::string& value, const std::string& what) const {
    const auto p = resolve(value);
    if (!fs::is_regular_file(p)) throw ConfigError(what + " '" + p.string() + "' does not exist");
    return p;
  }

  fs::path output(const std::string& name) const { return out_dir / name; }
};

inline RunContext load_context(const Options& opt) {
  if (opt.config_path.empty()) throw ConfigError("--config is required");
  const fs::path cfg_path = fs::absolute(opt.config_path).lexically_normal();
  std::ifstream in(cfg_path);
  if (!in) throw ConfigError("cannot open config '" + cfg_path.string() + "'");
  RunContext ctx;
  ctx.cfg = json::parse(in, nullptr, false);
  if (ctx.cfg.is_discarded()) throw ConfigError("config '" + cfg_path.string() + "' is not valid JSON");
  if (!ctx.cfg.is_object()) throw ConfigError("config must be a JSON object");
  for (const auto& o : opt.overrides) apply_override(ctx.cfg, o);

  auto drop_from_strategies = [&](const char* key) {
    if (ctx.cfg.contains("strategy") && ctx.cfg["strategy"].is_object()) ctx.cfg["strategy"].erase(key);
    if (ctx.cfg.contains("strategies") && ctx.cfg["strategies"].is_array()) {
      for (auto& s : ctx.cfg["strategies"]) {
        if (s.is_object()) s.erase(key);
      }
    }
  };
  if (opt.alpha) {
    ctx.cfg["alpha"] = *opt.alpha;
    drop_from_strategies("alpha");
  }
  if (opt.k) {
    ctx.cfg["K"] = *opt.k;
    drop_from_strategies("K");
  }
  if (opt.tau) {
    ctx.cfg["tau"] = *opt.tau;
    drop_from_strategies("tau");
  }
  if (opt.seed) ctx.cfg["seed"] = *opt.seed;
  validate_config(ctx.cfg);

  ctx.base_dir = cfg_path.parent_path();
  ctx.out_dir = opt.out ? fs::absolute(*opt.out).lexically_normal() : ctx.resolve(ctx.get<std::string>("output_dir", "out"));
  ctx.seed = ctx.get<std::uint64_t>("seed", 0);
  ctx.threads = threads_from_env();
  return ctx;
}

// ============================================================================
// Shared resolution of config sections
// ============================================================================

namespace detail {

inline std::string read_text(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw IoError("cannot open '" + p.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_text(const fs::path& p, const std::string& text) {
  fs::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + p.string() + "' for writing");
  out << text;
  if (!out) throw IoError("failed writing '" + p.string() + "'");
}

inline void write_json(const fs::path& p, const json& j) { write_text(p, j.dump(2) + "\n"); }

inline double unit_interval(const RunContext& ctx, const std::string& key, double fallback) {
  const double v = ctx.get<double>(key, fallback);
  if (!(v > 0.0 && v < 1.0)) throw ConfigError(key + " must lie in (0, 1)");
  return v;
}

struct Defaults {
  double alpha = 0.1;
  std::size_t k = 100;
  double tau = 1.0;
  Metric metric = Metric::kSquaredL2;
  ScoreKind score = ScoreKind::kAdaptive;
  std::size_t entropy_bins = 10;
};

inline Strategy parse_strategy(const json& j, const Defaults& d) {
  const auto name = j.at("name").get<std::string>();
  const double alpha = j.value("alpha", d.alpha);
  Strategy s;
  if (name == "greedy") s = strategy::Greedy{};
  else if (name == "beam") s = strategy::Beam{j.value("beams", std::size_t{5})};
  else if (name == "top_k") s = strategy::TopK{j.value("k", std::size_t{10})};
  else if (name == "nucleus") s = strategy::Nucleus{j.value("p", 0.9)};
  else if (name == "entropy_conformal") s = strategy::EntropyConformal{alpha, j.value("n_bins", d.entropy_bins)};
  else if (name == "const_weight_cs") s = strategy::ConstWeightCS{alpha, j.value("K", d.k), d.score};
  else {
    Metric m = d.metric;
    if (j.contains("metric")) {
      try {
        m = parse_metric(j.at("metric").get<std::string>());
      } catch (const std::invalid_argument& e) {
        throw ConfigError(e.what());
      }
    }
    s = strategy::NonExCS{alpha, j.value("K", d.k), j.value("tau", d.tau), m, d.score};
  }
  try {
    validate(s);
  } catch (const std::invalid_argument& e) {
    throw ConfigError("strategy '" + name + "': " + e.what());
  }
  return s;
}

}  // namespace detail

struct ManifestRef {
  CalibrationManifest manifest;
  fs::path path;
};

/// The manifest named by `manifest`, else <output_dir>/manifest.json when present.
inline std::optional<ManifestRef> find_manifest(const RunContext& ctx) {
  fs::path p;
  if (ctx.has("manifest")) p = ctx.input(ctx.cfg.at("manifest").get<std::string>(), "manifest");
  else if (fs::is_regular_file(ctx.output("manifest.json"))) p = ctx.output("manifest.json");
  else return std::nullopt;
  const auto j = json::parse(detail::read_text(p), nullptr, false);
  if (j.is_discarded()) throw DataError("manifest '" + p.string() + "' is not valid JSON");
  try {
    return ManifestRef{manifest_from_json(j), p};
  } catch (const json::exception& e) {
    throw DataError("manifest '" + p.string() + "': " + e.what());
  } catch (const std::invalid_argument& e) {
    throw DataError("manifest '" + p.string() + "': " + e.what());
  }
}

/// Strategy defaults: config keys first, then the manifest, then built-ins.
inline detail::Defaults resolve_defaults(const RunContext& ctx, const std::optional<ManifestRef>& m) {
  detail::Defaults d;
  d.alpha = ctx.has("alpha") ? detail::unit_interval(ctx, "alpha", 0.1) : (m ? m->manifest.alpha : 0.1);
  d.k = ctx.has("K") ? ctx.get<std::size_t>("K", 100) : (m ? m->manifest.k : 100);
  d.tau = ctx.has("tau") ? ctx.get<double>("tau", 1.0) : (m ? m->manifest.tau : 1.0);
  d.entropy_bins = ctx.get<std::size_t>("entropy_bins", 10);
  try {
    d.metric = ctx.has("metric") ? parse_metric(ctx.get<std::string>("metric", "l2"))
                                 : (m ? m->manifest.metric : Metric::kSquaredL2);
    d.score = ctx.has("score") ? parse_score_kind(ctx.get<std::string>("score", "adaptive"))
                               : (m ? m->manifest.score : ScoreKind::kAdaptive);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  if (d.k < 1) throw ConfigError("K must be >= 1");
  if (!(d.tau > 0.0)) throw ConfigError("tau must be positive");
  return d;
}

inline Strategy resolve_strategy(const RunContext& ctx, const detail::Defaults& d) {
  const json j = ctx.has("strategy") ? ctx.cfg.at("strategy") : json{{"name", "non_ex_cs"}};
  return detail::parse_strategy(j, d);
}

inline std::vector<Strategy> resolve_strategies(const RunContext& ctx, const detail::Defaults& d) {
  if (!ctx.has("strategies")) return {resolve_strategy(ctx, d)};
  std::vector<Strategy> out;
  for (const auto& j : ctx.cfg.at("strategies")) out.push_back(detail::parse_strategy(j, d));
  if (out.empty()) throw ConfigError("strategies must not be empty");
  return out;
}

inline Vocabulary load_vocab(const RunContext& ctx) {
  if (!ctx.has("vocab")) throw ConfigError("config has no 'vocab'");
  return Vocabulary::load(ctx.input(ctx.cfg.at("vocab").get<std::string>(), "vocabulary").string());
}

inline std::vector<Sequence> load_split(const RunContext& ctx, const Vocabulary& vocab, const std::string& split) {
  const auto path = ctx.sub<std::string>("corpus", split, "");
  if (path.empty()) throw ConfigError("config has no 'corpus." + split + "'");
  auto seqs = load_corpus(ctx.input(path, "corpus." + split).string(), vocab);
  if (seqs.empty()) throw DataError("corpus." + split + " is empty");
  return seqs;
}

struct LoadedModel {
  std::unique_ptr<ModelAdapter> model;
  bool seq2seq = false;
};

/// Model settings checked up front; training happens in build_model.
struct ModelSpec {
  bool seq2seq = false;
  MarkovOptions markov;
  Seq2SeqOptions s2s;
};

inline ModelSpec resolve_model(const RunContext& ctx, const Vocabulary& vocab) {
  ModelSpec model_spec;
  const auto type = ctx.sub<std::string>("model", "type", "markov");
  if (type != "markov" && type != "seq2seq") throw ConfigError("model.type must be markov or seq2seq");
  model_spec.seq2seq = type == "seq2seq";
  auto& mo = model_spec.markov;
  mo.order = ctx.sub<std::size_t>("model", "order", 2);
  mo.latent_order = ctx.sub<std::size_t>("model", "latent_order", 0);
  mo.smoothing = ctx.sub<double>("model", "smoothing", 0.1);
  mo.latent_dim = ctx.sub<std::size_t>("model", "latent_dim", 32);
  mo.readout_scale = ctx.sub<double>("model", "readout_scale", 1.0);
  mo.seed = ctx.sub<std::uint64_t>("model", "seed", 0);
  if (mo.order < 1) throw ConfigError("model.order must be >= 1");
  if (!(mo.smoothing > 0.0)) throw ConfigError("model.smoothing must be positive");
  if (mo.latent_dim < 1) throw ConfigError("model.latent_dim must be >= 1");
  if (ctx.has("model") && ctx.cfg.at("model").contains("eos")) {
    const auto& e = ctx.cfg.at("model").at("eos");
    if (e.is_string()) {
      const auto id = vocab.find(e.get<std::string>());
      if (!id) throw ConfigError("model.eos '" + e.get<std::string>() + "' is not in the vocabulary");
      mo.eos = *id;
    } else {
      if (e.get<std::size_t>() >= vocab.size()) throw ConfigError("model.eos id outside the vocabulary");
      mo.eos = static_cast<TokenId>(e.get<std::size_t>());
    }
  }
  model_spec.s2s.copy_prob = ctx.sub<double>("model", "copy_prob", 0.9);
  model_spec.s2s.copy_sharpness = ctx.sub<double>("model", "copy_sharpness", 3.0);
  model_spec.s2s.source_scale = ctx.sub<double>("model", "source_scale", 1.0);
  model_spec.s2s.seed = mo.seed;
  if (!(model_spec.s2s.copy_prob >= 0.0 && model_spec.s2s.copy_prob <= 1.0)) throw ConfigError("model.copy_prob must be in [0, 1]");
  if (!(model_spec.s2s.copy_sharpness >= 0.0)) throw ConfigError("model.copy_sharpness must be non-negative");
  return model_spec;
}

inline LoadedModel build_model(const ModelSpec& model_spec, std::span<const Sequence> train, std::size_t vocab_size) {
  auto lm = train_markov(train, vocab_size, model_spec.markov);
  if (!model_spec.seq2seq) return {std::make_unique<MarkovLM>(std::move(lm)), false};
  return {std::make_unique<ToySeq2Seq>(std::move(lm), model_spec.s2s), true};
}

/// Store from `store`, else the manifest's store_path (relative to the manifest).
inline Datastore load_store(const RunContext& ctx, const std::optional<ManifestRef>& m) {
  fs::path p;
  if (ctx.has("store")) p = ctx.input(ctx.cfg.at("store").get<std::string>(), "datastore");
  else if (m && !m->manifest.store_path.empty()) {
    p = (m->path.parent_path() / m->manifest.store_path).lexically_normal();
    if (!fs::is_regular_file(p)) throw ConfigError("datastore '" + p.string() + "' named by the manifest does not exist");
  } else {
    throw ConfigError("no datastore: run calibrate first, or set 'store' or 'manifest'");
  }
  return Datastore::load(p.string());
}

inline EvaluationOptions evaluation_options(const RunContext& ctx) {
  EvaluationOptions o;
  o.n_bins = ctx.get<std::size_t>("bins", 75);
  o.softmax_temperature = ctx.get<double>("softmax_temperature", 1.0);
  o.threads = ctx.threads;
  if (o.n_bins < 1) throw ConfigError("bins must be >= 1");
  if (!(o.softmax_temperature > 0.0)) throw ConfigError("softmax_temperature must be positive");
  return o;
}

/// Datastore and entropy calibrator, loaded only when some strategy needs them.
struct Resources {
  std::optional<Datastore> store;
  std::optional<EntropyBinnedCalibrator> entropy;

  DecodeResources view() const { return {store ? &*store : nullptr, entropy ? &*entropy : nullptr}; }
};

inline Resources load_resources(const RunContext& ctx, const std::optional<ManifestRef>& m,
                                std::span<const Strategy> strategies, const ModelAdapter& model,
                                const Vocabulary& vocab, double softmax_temperature) {
  Resources r;
  for (const auto& s : strategies) {
    if (uses_datastore(s) && !r.store) {
      r.store = load_store(ctx, m);
      if (r.store->dim() != model.latent_dim()) {
        throw ConfigError("datastore dimension " + std::to_string(r.store->dim()) + " differs from model latent_dim " +
                          std::to_string(model.latent_dim()));
      }
    }
    if (const auto* nx = std::get_if<strategy::NonExCS>(&s); nx && nx->metric != r.store->metric()) {
      throw ConfigError("non_ex_cs metric '" + std::string(metric_name(nx->metric)) + "' differs from datastore metric '" +
                        std::string(metric_name(r.store->metric())) + "'");
    }
    if (const auto* ec = std::get_if<strategy::EntropyConformal>(&s)) {
      const auto calib = load_split(ctx, vocab, "calibration");
      const auto data = collect_entropy_scores(model, calib, softmax_temperature);
      r.entropy = calibrate_entropy_bins(data, MiscoverageLevel(ec->alpha), ec->n_bins, model.vocab_size());
    }
  }
  return r;
}

// ============================================================================
// Commands
// ============================================================================

inline int cmd_calibrate(const RunContext& ctx, std::ostream& log) {
  const auto vocab = load_vocab(ctx);
  const auto model_spec = resolve_model(ctx, vocab);
  const auto d = resolve_defaults(ctx, std::nullopt);
  std::optional<IvfConfig> ivf;
  if (ctx.has("ivf")) {
    IvfConfig c;
    c.n_clusters = ctx.sub<std::size_t>("ivf", "n_clusters", 16);
    c.n_probe = ctx.sub<std::size_t>("ivf", "n_probe", 4);
    c.kmeans_iters = ctx.sub<std::size_t>("ivf", "kmeans_iters", 25);
    c.seed = ctx.seed;
    if (c.n_clusters < 1 || c.n_probe < 1 || c.n_probe > c.n_clusters) {
      throw ConfigError("ivf needs 1 <= n_probe <= n_clusters");
    }
    ivf = c;
  }
  const auto train = load_split(ctx, vocab, "train");
  const auto calib = load_split(ctx, vocab, "calibration");

  const auto lm = build_model(model_spec, train, vocab.size());
  const auto records = collect_calibration(*lm.model, calib, d.score, ctx.threads);
  const auto store = Datastore::build(records, d.metric, ivf, d.tau);
  try {
    store.save(ctx.output("datastore.necs").string());
  } catch (const std::runtime_error& e) {
    throw IoError(e.what());
  }

  CalibrationManifest m;
  m.tau = d.tau;
  m.alpha = d.alpha;
  m.k = d.k;
  m.metric = d.metric;
  m.score = d.score;
  m.store_path = "datastore.necs";
  m.n_records = store.size();
  detail::write_json(ctx.output("manifest.json"), to_json(m));
  log << "calibrate: " << store.size() << " records -> " << ctx.output("datastore.necs").string() << '\n';
  return kExitOk;
}

inline int cmd_tune(const RunContext& ctx, std::ostream& log) {
  TemperatureSearchConfig tc;
  tc.tau_min = ctx.sub<double>("tune", "tau_min", tc.tau_min);
  tc.tau_max = ctx.sub<double>("tune", "tau_max", tc.tau_max);
  tc.steps = ctx.sub<std::size_t>("tune", "steps", tc.steps);
  tc.eta = ctx.sub<double>("tune", "eta", tc.eta);
  tc.eval_batches = ctx.sub<std::size_t>("tune", "eval_batches", tc.eval_batches);
  tc.batch_size = ctx.sub<std::size_t>("tune", "batch_size", tc.batch_size);
  tc.seed = ctx.seed;
  try {
    tc.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("tune: ") + e.what());
  }
  const bool surrogate = ctx.sub<bool>("tune", "surrogate", false);
  const auto mref = find_manifest(ctx);
  const auto d = resolve_defaults(ctx, mref);
  const MiscoverageLevel alpha(d.alpha);

  CalibrationManifest m = mref ? mref->manifest : CalibrationManifest{};
  m.alpha = d.alpha;
  m.k = d.k;
  TemperatureSearchResult res;
  if (surrogate) {
    res = temperature_search(tc, alpha, [&](double tau) { return std::min(tau / tc.tau_max, 1.0); });
  } else {
    const auto vocab = load_vocab(ctx);
    const auto model_spec = resolve_model(ctx, vocab);
    const auto store = load_store(ctx, mref);
    const auto train = load_split(ctx, vocab, "train");
    const auto heldout = load_split(ctx, vocab, "heldout");
    const auto lm = build_model(model_spec, train, vocab.size());
    if (store.dim() != lm.model->latent_dim()) throw ConfigError("datastore dimension differs from model latent_dim");
    res = temperature_search(tc, *lm.model, store, heldout, alpha, d.k, ctx.threads, d.score);
    m.metric = store.metric();
    m.n_records = store.size();
    if (!ctx.has("store") && mref) {
      const auto store_abs = (mref->path.parent_path() / mref->manifest.store_path).lexically_normal();
      m.store_path = store_abs.lexically_relative(ctx.out_dir).generic_string();
    } else {
      m.store_path = ctx.resolve(ctx.cfg.at("store").get<std::string>()).lexically_relative(ctx.out_dir).generic_string();
    }
  }
  m.tau = res.tau;
  m.coverage_at_tau = res.coverage;
  m.search_trace = res.trace;
  detail::write_json(ctx.output("manifest.tuned.json"), to_json(m));

  std::ostringstream csv;
  csv << "step,tau,coverage\n";
  for (std::size_t i = 0; i < res.trace.size(); ++i) {
    csv << i << ',' << csv_number(res.trace[i].tau) << ',' << csv_number(res.trace[i].coverage) << '\n';
  }
  detail::write_text(ctx.output("tune_trace.csv"), csv.str());
  log << "tune: tau=" << res.tau << " coverage=" << res.coverage << '\n';
  return kExitOk;
}

/// Shared setup of the evaluation-style commands.
struct EvalSetup {
  Vocabulary vocab;
  LoadedModel lm;
  std::vector<Strategy> strategies;
  Resources res;
  EvaluationOptions eval;
  double alpha = 0.1;
};

inline EvalSetup prepare_eval(const RunContext& ctx, bool many_strategies) {
  EvalSetup s;
  s.vocab = load_vocab(ctx);
  const auto model_spec = resolve_model(ctx, s.vocab);
  const auto mref = find_manifest(ctx);
  const auto d = resolve_defaults(ctx, mref);
  s.alpha = d.alpha;
  s.strategies = many_strategies ? resolve_strategies(ctx, d) : std::vector<Strategy>{resolve_strategy(ctx, d)};
  s.eval = evaluation_options(ctx);
  const auto train = load_split(ctx, s.vocab, "train");
  s.lm = build_model(model_spec, train, s.vocab.size());
  s.res = load_resources(ctx, mref, s.strategies, *s.lm.model, s.vocab, s.eval.softmax_temperature);
  return s;
}

inline int cmd_coverage(const RunContext& ctx, std::ostream& log) {
  auto s = prepare_eval(ctx, false);
  const auto test = load_split(ctx, s.vocab, "test");
  const auto rep = evaluate_coverage(*s.lm.model, test, s.strategies.front(), s.res.view(), MiscoverageLevel(s.alpha), s.eval);
  detail::write_json(ctx.output("coverage.json"), to_json(rep));
  std::ostringstream csv;
  write_bins_csv(csv, rep);
  detail::write_text(ctx.output("coverage_bins.csv"), csv.str());
  log << "coverage: " << rep.strategy << " coverage=" << rep.coverage << " width=" << rep.avg_width_fraction << '\n';
  return kExitOk;
}

inline int cmd_generate(const RunContext& ctx, std::ostream& log) {
  auto s = prepare_eval(ctx, false);
  const auto test = load_split(ctx, s.vocab, "test");
  const std::size_t n = ctx.sub<std::size_t>("generate", "n", 0);
  const std::size_t prompt_len = ctx.sub<std::size_t>("generate", "prompt_len", 0);
  GenerationConfig gc;
  gc.strategy = s.strategies.front();
  gc.max_len = ctx.sub<std::size_t>("generate", "max_len", 50);
  gc.softmax_temperature = s.eval.softmax_temperature;
  const std::size_t count = n == 0 ? test.size() : std::min(n, test.size());
  const auto name = strategy_name(gc.strategy);

  std::vector<json> lines(count);
  parallel_for(count, ctx.threads, [&](std::size_t i) {
    GenerationConfig c = gc;
    c.seed = necs::detail::hash_combine(ctx.seed, i);
    const auto& seq = test[i];
    const auto prompt = TokenSpan(seq.target).first(std::min(prompt_len, seq.target.size()));
    const auto src = s.lm.seq2seq ? source_span(seq.source) : std::nullopt;
    const auto g = generate(*s.lm.model, src, prompt, c, s.res.view());
    json j = generation_json(g, name, c.seed);
    j["index"] = i;
    j["prompt"] = std::vector<TokenId>(prompt.begin(), prompt.end());
    json text = json::array();
    for (TokenId t : g.tokens) text.push_back(s.vocab.token(t));
    j["text"] = text;
    lines[i] = std::move(j);
  });
  std::string out;
  for (const auto& j : lines) out += j.dump() + "\n";
  detail::write_text(ctx.output("generations.jsonl"), out);
  log << "generate: " << count << " sequences with " << name << '\n';
  return kExitOk;
}

inline int cmd_shift(const RunContext& ctx, std::ostream& log) {
  auto s = prepare_eval(ctx, true);
  const auto test = load_split(ctx, s.vocab, "test");
  const auto levels = ctx.get<std::vector<double>>("noise_levels", default_noise_levels());
  const auto seeds = ctx.get<std::vector<std::uint64_t>>("seeds", {ctx.seed});
  if (levels.empty()) throw ConfigError("noise_levels must not be empty");
  if (seeds.empty()) throw ConfigError("seeds must not be empty");
  for (std::size_t i = 0; i < levels.size(); ++i) {
    if (!(levels[i] >= 0.0) || (i > 0 && !(levels[i] > levels[i - 1]))) {
      throw ConfigError("noise_levels must be non-negative and strictly increasing");
    }
  }
  const auto reports =
      run_shift_experiment(*s.lm.model, test, s.strategies, levels, s.res.view(), MiscoverageLevel(s.alpha), seeds, s.eval);
  json rj = json::array();
  for (const auto& r : reports) rj.push_back(to_json(r));
  detail::write_json(ctx.output("shift.json"), json{{"alpha", s.alpha}, {"noise_levels", levels}, {"seeds", seeds}, {"reports", rj}});
  std::ostringstream csv;
  write_shift_csv(csv, reports);
  detail::write_text(ctx.output("shift.csv"), csv.str());
  log << "shift: " << reports.size() << " strategies x " << levels.size() << " levels x " << seeds.size() << " seeds\n";
  return kExitOk;
}

inline int cmd_hallucinate(const RunContext& ctx, std::ostream& log) {
  auto s = prepare_eval(ctx, false);
  if (!s.lm.seq2seq) throw ConfigError("hallucinate needs model.type = seq2seq");
  const auto& strat = s.strategies.front();
  if (std::holds_alternative<strategy::Greedy>(strat) || std::holds_alternative<strategy::Beam>(strat)) {
    throw ConfigError("hallucinate needs a set-based sampling strategy, got " + strategy_name(strat));
  }
  const auto calib = load_split(ctx, s.vocab, "calibration");
  const auto test = load_split(ctx, s.vocab, "test");
  const std::size_t n_fit = std::min(ctx.sub<std::size_t>("hallucination", "n_fit", 100), calib.size());
  if (n_fit < 2) throw ConfigError("hallucination.n_fit must be >= 2");

  auto sources_of = [](std::span<const Sequence> seqs, std::size_t n, const char* split) {
    std::vector<std::vector<TokenId>> out;
    for (std::size_t i = 0; i < n; ++i) {
      if (!seqs[i].source) throw DataError(std::string("corpus.") + split + " line " + std::to_string(i + 1) + " has no source");
      out.push_back(*seqs[i].source);
    }
    return out;
  };
  GenerationConfig gc;
  gc.strategy = strat;
  gc.max_len = ctx.sub<std::size_t>("hallucination", "max_len", 50);
  gc.softmax_temperature = s.eval.softmax_temperature;

  gc.seed = necs::detail::hash_combine(ctx.seed, 1);
  const auto fit_pairs = collect_ablated_pairs(*s.lm.model, sources_of(calib, n_fit, "calibration"), gc, s.res.view());
  gc.seed = necs::detail::hash_combine(ctx.seed, 2);
  const auto test_pairs = collect_ablated_pairs(*s.lm.model, sources_of(test, test.size(), "test"), gc, s.res.view());

  std::vector<SetSizeTrace> normal, halluc;
  for (const auto& p : fit_pairs) {
    normal.push_back(p.with_source);
    halluc.push_back(p.without_source);
  }
  const auto models = fit_cohort_models(normal, halluc, s.lm.model->vocab_size());
  const auto rep = evaluate_detector(test_pairs, models);
  detail::write_json(ctx.output("cohort_models.json"), to_json(models));
  json dj = to_json(rep);
  dj["strategy"] = strategy_name(strat);
  dj["fit_ate"] = ate(fit_pairs);
  dj["threshold"] = kDecisionThreshold;
  dj["hypotheses"] = {{"H0", "hallucinating"}, {"H1", "normal"}};
  detail::write_json(ctx.output("detection.json"), dj);
  log << "hallucinate: ATE=" << rep.ate << " FPR=" << rep.fpr << " FNR=" << rep.fnr
      << " abstain=" << rep.abstention_rate << '\n';
  return kExitOk;
}

/// Writes a toy vocabulary and train/calibration/heldout/test corpora.
inline int cmd_synth(const RunContext& ctx, std::ostream& log) {
  SourceOptions so;
  so.vocab_size = ctx.sub<std::size_t>("synth", "vocab_size", 30);
  so.order = ctx.sub<std::size_t>("synth", "order", 2);
  so.min_sharpness = ctx.sub<double>("synth", "min_sharpness", 0.3);
  so.max_sharpness = ctx.sub<double>("synth", "max_sharpness", 5.0);
  so.seed = ctx.sub<std::uint64_t>("synth", "seed", ctx.seed);
  const std::size_t length = ctx.sub<std::size_t>("synth", "length", 30);
  const bool parallel = ctx.sub<bool>("synth", "parallel", false);
  const double keep = ctx.sub<double>("synth", "keep", 0.9);
  if (so.vocab_size < 2) throw ConfigError("synth.vocab_size must be >= 2");
  if (so.order < 1) throw ConfigError("synth.order must be >= 1");
  if (!(so.min_sharpness >= 0.0 && so.min_sharpness <= so.max_sharpness)) {
    throw ConfigError("synth needs 0 <= min_sharpness <= max_sharpness");
  }
  if (length < 1) throw ConfigError("synth.length must be >= 1");
  if (!(keep >= 0.0 && keep <= 1.0)) throw ConfigError("synth.keep must be in [0, 1]");

  std::vector<std::string> tokens;
  for (std::size_t i = 0; i < so.vocab_size; ++i) tokens.push_back("w" + std::to_string(i));
  tokens.push_back("</s>");
  const Vocabulary vocab(tokens);
  const auto eos = static_cast<TokenId>(so.vocab_size);
  fs::create_directories(ctx.out_dir);
  vocab.save(ctx.output("vocab.tsv").string());

  const SyntheticSource src(so);
  const std::pair<const char*, std::size_t> splits[] = {{"train", ctx.sub<std::size_t>("synth", "n_train", 400)},
                                                        {"calibration", ctx.sub<std::size_t>("synth", "n_calibration", 200)},
                                                        {"heldout", ctx.sub<std::size_t>("synth", "n_heldout", 50)},
                                                        {"test", ctx.sub<std::size_t>("synth", "n_test", 50)}};
  for (std::size_t i = 0; i < std::size(splits); ++i) {
    const auto seed = necs::detail::hash_combine(so.seed, i + 1);
    const auto seqs = parallel ? sample_parallel_corpus(src, splits[i].second, length, keep, eos, seed)
                               : src.sample_corpus(splits[i].second, length, seed);
    save_corpus(ctx.output(std::string(splits[i].first) + ".jsonl").string(), seqs);
  }
  log << "synth: wrote vocabulary and corpora to " << ctx.out_dir.string() << '\n';
  return kExitOk;
}

// ============================================================================
// Entry point
// ============================================================================

inline std::string error_json(int code, std::string_view kind, const std::string& command, const std::string& message) {
  return json{{"error", {{"code", code}, {"kind", kind}, {"command", command}, {"message", message}}}}.dump();
}

inline int dispatch(const Options& opt, std::ostream& log) {
  const auto ctx = load_context(opt);
  std::error_code ec;
  fs::create_directories(ctx.out_dir, ec);
  if (ec) throw IoError("cannot create output directory '" + ctx.out_dir.string() + "': " + ec.message());
  if (opt.command == "calibrate") return cmd_calibrate(ctx, log);
  if (opt.command == "tune") return cmd_tune(ctx, log);
  if (opt.command == "coverage") return cmd_coverage(ctx, log);
  if (opt.command == "generate") return cmd_generate(ctx, log);
  if (opt.command == "shift") return cmd_shift(ctx, log);
  if (opt.command == "hallucinate") return cmd_hallucinate(ctx, log);
  if (opt.command == "synth") return cmd_synth(ctx, log);
  throw ConfigError("unknown command '" + opt.command + "'");
}

/// Runs one command; maps failures to exit codes and stderr JSON.
inline int run(const Options& opt, std::ostream& log, std::ostream& err) {
  auto fail = [&](int code, std::string_view kind, const std::string& msg) {
    err << error_json(code, kind, opt.command, msg) << '\n';
    return code;
  };
  try {
    return dispatch(opt, log);
  } catch (const ConfigError& e) {
    return fail(kExitConfig, "config", e.what());
  } catch (const DataError& e) {
    return fail(kExitData, "data", e.what());
  } catch (const FormatError& e) {
    return fail(kExitData, "data", e.what());
  } catch (const IoError& e) {
    return fail(kExitData, "io", e.what());
  } catch (const json::exception& e) {
    return fail(kExitData, "data", e.what());
  } catch (const std::exception& e) {
    return fail(kExitNumeric, "numeric", e.what());
  }
}

inline int main(int argc, const char* const* argv, std::ostream& log = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Non-exchangeable conformal decoding experiments"};
  app.require_subcommand(1);
  Options opt;
  const std::pair<const char*, const char*> commands[] = {
      {"calibrate", "Build a calibration datastore and manifest"},
      {"tune", "Search the kernel temperature on held-out data"},
      {"coverage", "Teacher-forced coverage report for one strategy"},
      {"generate", "Sample continuations with one strategy"},
      {"shift", "Coverage and set size under latent noise"},
      {"hallucinate", "Source-ablation effect and Bayes-factor detector"},
      {"synth", "Write a toy vocabulary and corpora"}};
  for (const auto& [name, help] : commands) {
    auto* sub = app.add_subcommand(name, help);
    sub->add_option("--config", opt.config_path, "Run config (JSON)")->required();
    sub->add_option("--seed", opt.seed, "Seed for sampling and search");
    sub->add_option("--out", opt.out, "Output directory");
    sub->add_option("--override", opt.overrides, "KEY=VALUE config override (repeatable)");
    sub->add_option("--alpha", opt.alpha, "Miscoverage level");
    sub->add_option("--K", opt.k, "Neighbors retrieved per step");
    sub->add_option("--tau", opt.tau, "Kernel temperature");
    sub->callback([&opt, n = std::string(name)] { opt.command = n; });
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    log << app.help();
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << error_json(kExitConfig, "usage", opt.command, e.what()) << '\n';
    return kExitConfig;
  }
  return run(opt, log, err);
}

}  // namespace necs::cli
