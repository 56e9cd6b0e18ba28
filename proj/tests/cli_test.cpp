// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <chrono>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "necs/cli.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Result {
  int code = -1;
  std::string out;
  std::string err;
};

Result run(std::vector<std::string> args) {
  args.insert(args.begin(), "necs");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  Result r;
  r.code = necs::cli::main(static_cast<int>(argv.size()), argv.data(), out, err);
  r.out = out.str();
  r.err = err.str();
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_json(const fs::path& p, const json& j) {
  std::ofstream out(p, std::ios::trunc);
  out << j.dump(2);
}

std::size_t line_count(const std::string& s) { return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n')); }

class CliTest : public ::testing::Test {
 protected:
  void SetUp() override {
    const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
    dir_ = fs::temp_directory_path() / (std::string("necs_cli_test_") + info->name());
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  fs::path path(const std::string& name) const { return dir_ / name; }

  /// Writes toy corpora into data/ and returns a run config path.
  fs::path make_lm_setup(json overrides = json::object()) {
    write_json(path("synth.json"), json{{"synth",
                                         {{"vocab_size", 8},
                                          {"seed", 3},
                                          {"length", 6},
                                          {"n_train", 60},
                                          {"n_calibration", 10},
                                          {"n_heldout", 5},
                                          {"n_test", 5}}},
                                        {"output_dir", "data"}});
    const auto r = run({"synth", "--config", path("synth.json").string()});
    EXPECT_EQ(r.code, 0) << r.err;
    json cfg{{"vocab", "data/vocab.tsv"},
             {"corpus",
              {{"train", "data/train.jsonl"},
               {"calibration", "data/calibration.jsonl"},
               {"heldout", "data/heldout.jsonl"},
               {"test", "data/test.jsonl"}}},
             {"model", {{"type", "markov"}, {"order", 2}, {"latent_dim", 8}, {"seed", 1}}},
             {"alpha", 0.1},
             {"K", 20},
             {"tau", 0.5},
             {"strategy", {{"name", "non_ex_cs"}}},
             {"tune", {{"tau_min", 0.1}, {"tau_max", 5.0}, {"steps", 3}, {"eval_batches", 2}, {"batch_size", 5}}},
             {"seed", 7},
             {"output_dir", "out"}};
    cfg.merge_patch(overrides);
    write_json(path("run.json"), cfg);
    return path("run.json");
  }

  fs::path dir_;
};

json parse_error(const std::string& err) {
  const auto j = json::parse(err.substr(0, err.find('\n')));
  EXPECT_TRUE(j.contains("error"));
  return j.at("error");
}

}  // namespace

TEST_F(CliTest, CalibrateWritesOneRecordPerToken) {
  const auto cfg = make_lm_setup();
  const auto r = run({"calibrate", "--config", cfg.string()});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto manifest = json::parse(slurp(path("out/manifest.json")));
  EXPECT_EQ(manifest.at("n_records").get<std::size_t>(), 10u * 6u);
  EXPECT_EQ(manifest.at("store_path"), "datastore.necs");
  EXPECT_EQ(manifest.at("K"), 20);
  const auto store = necs::Datastore::load(path("out/datastore.necs").string());
  EXPECT_EQ(store.size(), 60u);
  EXPECT_EQ(store.dim(), 8u);

  const auto first = slurp(path("out/datastore.necs"));
  ASSERT_EQ(run({"calibrate", "--config", cfg.string()}).code, 0);
  EXPECT_EQ(slurp(path("out/datastore.necs")), first);
}

TEST_F(CliTest, MissingVocabularyIsAConfigError) {
  const auto cfg = make_lm_setup({{"vocab", "data/nope.tsv"}});
  const auto r = run({"calibrate", "--config", cfg.string()});
  EXPECT_EQ(r.code, 2);
  const auto e = parse_error(r.err);
  EXPECT_EQ(e.at("code"), 2);
  EXPECT_EQ(e.at("kind"), "config");
  EXPECT_EQ(e.at("command"), "calibrate");
}

TEST_F(CliTest, SchemaViolationsAreConfigErrors) {
  auto cfg = make_lm_setup({{"bogus_key", 1}});
  EXPECT_EQ(run({"calibrate", "--config", cfg.string()}).code, 2);
  cfg = make_lm_setup({{"alpha", 1.5}});
  EXPECT_EQ(run({"coverage", "--config", cfg.string()}).code, 2);
  cfg = make_lm_setup({{"strategy", {{"name", "nucleus"}, {"K", 3}}}});
  EXPECT_EQ(run({"coverage", "--config", cfg.string()}).code, 2);
  cfg = make_lm_setup({{"model", {{"order", "two"}}}});
  EXPECT_EQ(run({"calibrate", "--config", cfg.string()}).code, 2);
  EXPECT_EQ(run({"calibrate", "--config", path("absent.json").string()}).code, 2);
  EXPECT_EQ(run({"calibrate"}).code, 2);
  EXPECT_EQ(run({}).code, 2);
}

TEST_F(CliTest, MalformedInputsAreDataErrors) {
  const auto cfg = make_lm_setup();
  ASSERT_EQ(run({"calibrate", "--config", cfg.string()}).code, 0);
  {
    std::ofstream out(path("out/datastore.necs"), std::ios::binary | std::ios::trunc);
    out << "NOPE";
  }
  const auto r = run({"coverage", "--config", cfg.string()});
  EXPECT_EQ(r.code, 3);
  EXPECT_EQ(parse_error(r.err).at("kind"), "data");

  {
    std::ofstream out(path("data/test.jsonl"), std::ios::trunc);
    out << "{\"target\": [99]}\n";
  }
  ASSERT_EQ(run({"calibrate", "--config", cfg.string()}).code, 0);
  EXPECT_EQ(run({"coverage", "--config", cfg.string()}).code, 3);
}

TEST_F(CliTest, TuneSingleStepTrace) {
  const auto cfg = make_lm_setup({{"tune", {{"steps", 1}}}});
  ASSERT_EQ(run({"calibrate", "--config", cfg.string()}).code, 0);
  const auto r = run({"tune", "--config", cfg.string()});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto csv = slurp(path("out/tune_trace.csv"));
  EXPECT_EQ(line_count(csv), 2u);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "step,tau,coverage");
  const auto tuned = json::parse(slurp(path("out/manifest.tuned.json")));
  EXPECT_EQ(tuned.at("search_trace").size(), 1u);
  EXPECT_EQ(tuned.at("tau"), tuned.at("search_trace")[0][0]);
  // the tuned manifest is usable as the manifest of later runs
  const auto cov = make_lm_setup({{"tune", {{"steps", 1}}}, {"manifest", "out/manifest.tuned.json"}});
  EXPECT_EQ(run({"coverage", "--config", cov.string()}).code, 0);
}

TEST_F(CliTest, SurrogateTuneSelectsClosestCandidate) {
  write_json(path("tune.json"), json{{"tune", {{"surrogate", true}, {"tau_min", 0.1}, {"tau_max", 10.0}, {"steps", 21}}},
                                     {"alpha", 0.1},
                                     {"seed", 42},
                                     {"output_dir", "out"}});
  const auto r = run({"tune", "--config", path("tune.json").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto m = json::parse(slurp(path("out/manifest.tuned.json")));
  const auto& trace = m.at("search_trace");
  ASSERT_EQ(trace.size(), 21u);
  double best = 1e9, tau = 0.0;
  for (const auto& p : trace) {
    const double gap = std::abs(p[1].get<double>() - 0.9);
    EXPECT_DOUBLE_EQ(p[1].get<double>(), std::min(p[0].get<double>() / 10.0, 1.0));
    if (gap < best) {
      best = gap;
      tau = p[0].get<double>();
    }
  }
  EXPECT_EQ(m.at("tau").get<double>(), tau);
}

TEST_F(CliTest, CoverageIsFastAndWritesReports) {
  const auto cfg = make_lm_setup();
  ASSERT_EQ(run({"calibrate", "--config", cfg.string()}).code, 0);
  const auto t0 = std::chrono::steady_clock::now();
  const auto r = run({"coverage", "--config", cfg.string()});
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_LT(secs, 10.0);
  const auto rep = json::parse(slurp(path("out/coverage.json")));
  EXPECT_EQ(rep.at("n_steps"), 30);
  EXPECT_EQ(rep.at("strategy"), "non_ex_cs");
  for (const char* key : {"coverage", "avg_width_fraction", "ecg", "ssc", "bins", "inf_fraction"}) {
    EXPECT_TRUE(rep.contains(key)) << key;
  }
  EXPECT_EQ(line_count(slurp(path("out/coverage_bins.csv"))), 1u + 75u);
}

TEST_F(CliTest, EntropyBaselineNeedsNoStore) {
  const auto cfg = make_lm_setup({{"strategy", {{"name", "entropy_conformal"}, {"n_bins", 3}}}});
  const auto r = run({"coverage", "--config", cfg.string()});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(json::parse(slurp(path("out/coverage.json"))).at("strategy"), "entropy_conformal");
  const auto cs = make_lm_setup({{"strategy", {{"name", "const_weight_cs"}}}});
  EXPECT_EQ(run({"coverage", "--config", cs.string()}).code, 2);
}

TEST_F(CliTest, ShiftWritesOneRowPerRun) {
  const auto cfg = make_lm_setup({{"strategies", json::array({{{"name", "non_ex_cs"}}, {{"name", "top_k"}, {"k", 2}}})},
                                  {"noise_levels", {0.0, 0.05, 0.1}},
                                  {"seeds", {1, 2}}});
  ASSERT_EQ(run({"calibrate", "--config", cfg.string()}).code, 0);
  const auto r = run({"shift", "--config", cfg.string()});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(line_count(slurp(path("out/shift.csv"))), 1u + 3u * 2u * 2u);
  const auto j = json::parse(slurp(path("out/shift.json")));
  EXPECT_EQ(j.at("reports").size(), 2u);
  EXPECT_EQ(j.at("reports")[1].at("strategy"), "top_k");
}

TEST_F(CliTest, GenerateIsSeededAndReproducible) {
  const auto cfg = make_lm_setup({{"generate", {{"n", 3}, {"max_len", 5}, {"prompt_len", 1}}}});
  ASSERT_EQ(run({"calibrate", "--config", cfg.string()}).code, 0);
  ASSERT_EQ(run({"generate", "--config", cfg.string()}).code, 0);
  const auto a = slurp(path("out/generations.jsonl"));
  EXPECT_EQ(line_count(a), 3u);
  const auto first = json::parse(a.substr(0, a.find('\n')));
  for (const char* key : {"index", "prompt", "seed", "strategy", "text", "tokens", "trace"}) EXPECT_TRUE(first.contains(key)) << key;
  EXPECT_EQ(first.at("tokens").size(), 5u);
  ASSERT_EQ(run({"generate", "--config", cfg.string()}).code, 0);
  EXPECT_EQ(slurp(path("out/generations.jsonl")), a);
  ASSERT_EQ(run({"generate", "--config", cfg.string(), "--seed", "8"}).code, 0);
  EXPECT_NE(slurp(path("out/generations.jsonl")), a);
}

TEST_F(CliTest, FlagsAndOverridesTakePrecedence) {
  const auto cfg = make_lm_setup();
  auto r = run({"calibrate", "--config", cfg.string(), "--override", "K=7", "--override", "model.latent_dim=4",
                "--out", path("alt").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  auto m = json::parse(slurp(path("alt/manifest.json")));
  EXPECT_EQ(m.at("K"), 7);
  EXPECT_EQ(necs::Datastore::load(path("alt/datastore.necs").string()).dim(), 4u);
  r = run({"calibrate", "--config", cfg.string(), "--alpha", "0.2", "--K", "9", "--tau", "2.5"});
  ASSERT_EQ(r.code, 0) << r.err;
  m = json::parse(slurp(path("out/manifest.json")));
  EXPECT_DOUBLE_EQ(m.at("alpha").get<double>(), 0.2);
  EXPECT_EQ(m.at("K"), 9);
  EXPECT_DOUBLE_EQ(m.at("tau").get<double>(), 2.5);
  EXPECT_EQ(run({"calibrate", "--config", cfg.string(), "--override", "noequals"}).code, 2);
}

TEST_F(CliTest, HallucinateReportsDetectorFields) {
  write_json(path("synth.json"), json{{"synth",
                                       {{"vocab_size", 12},
                                        {"seed", 5},
                                        {"length", 8},
                                        {"parallel", true},
                                        {"n_train", 150},
                                        {"n_calibration", 40},
                                        {"n_heldout", 5},
                                        {"n_test", 10}}},
                                      {"output_dir", "data"}});
  ASSERT_EQ(run({"synth", "--config", path("synth.json").string()}).code, 0);
  const json cfg{{"vocab", "data/vocab.tsv"},
                 {"corpus",
                  {{"train", "data/train.jsonl"}, {"calibration", "data/calibration.jsonl"}, {"test", "data/test.jsonl"}}},
                 {"model", {{"type", "seq2seq"}, {"latent_dim", 8}, {"eos", "</s>"}, {"copy_prob", 0.9}}},
                 {"K", 30},
                 {"tau", 0.5},
                 {"strategy", {{"name", "non_ex_cs"}}},
                 {"hallucination", {{"n_fit", 20}, {"max_len", 12}}},
                 {"seed", 3},
                 {"output_dir", "out"}};
  write_json(path("s2s.json"), cfg);
  ASSERT_EQ(run({"calibrate", "--config", path("s2s.json").string()}).code, 0);
  const auto r = run({"hallucinate", "--config", path("s2s.json").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto d = json::parse(slurp(path("out/detection.json")));
  for (const char* key : {"ate", "fpr", "fnr", "abstention_rate", "n_pairs", "fit_ate", "hypotheses"}) {
    EXPECT_TRUE(d.contains(key)) << key;
  }
  EXPECT_EQ(d.at("n_pairs"), 10);
  EXPECT_TRUE(fs::exists(path("out/cohort_models.json")));

  auto greedy = cfg;
  greedy["strategy"] = {{"name", "greedy"}};
  write_json(path("greedy.json"), greedy);
  EXPECT_EQ(run({"hallucinate", "--config", path("greedy.json").string()}).code, 2);
}

TEST_F(CliTest, HallucinateRejectsLanguageModels) {
  const auto cfg = make_lm_setup();
  ASSERT_EQ(run({"calibrate", "--config", cfg.string()}).code, 0);
  EXPECT_EQ(run({"hallucinate", "--config", cfg.string()}).code, 2);
}

TEST_F(CliTest, SynthIsDeterministic) {
  make_lm_setup();
  const auto a = slurp(path("data/train.jsonl"));
  const auto v = slurp(path("data/vocab.tsv"));
  EXPECT_EQ(line_count(a), 60u);
  EXPECT_EQ(line_count(v), 9u);
  make_lm_setup();
  EXPECT_EQ(slurp(path("data/train.jsonl")), a);
}
