#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "crossing/errors.hpp"
#include "crossing/harness.hpp"
#include "crossing/io_util.hpp"

namespace crossing::harness {
namespace {

namespace fs = std::filesystem;

fs::path fresh_dir(const std::string& name) {
  const auto dir = fs::temp_directory_path() / name;
  fs::remove_all(dir);
  return dir;
}

TEST(Evaluate, AllCorrectIsDiagonal) {
  const std::vector<std::size_t> labels{0, 1, 2, 3, 4, 5, 6, 0};
  const auto r = evaluate(labels, labels, 7);
  EXPECT_EQ(r.top1, 1.0);
  for (std::size_t i = 0; i < 7; ++i)
    for (std::size_t j = 0; j < 7; ++j) {
      if (i != j) EXPECT_EQ(r.confusion[i][j], 0u);
    }
  EXPECT_EQ(r.confusion[0][0], 2u);
  EXPECT_EQ(r.per_class_recall[3], 1.0);
}

TEST(Evaluate, ConstantPredictorOnBalancedSplit) {
  std::vector<std::size_t> truth, pred;
  for (std::size_t c = 0; c < 7; ++c)
    for (int i = 0; i < 3; ++i) {
      truth.push_back(c);
      pred.push_back(0);
    }
  EXPECT_DOUBLE_EQ(evaluate(truth, pred, 7).top1, 1.0 / 7.0);
}

TEST(Evaluate, MatchesRecountOfRandomLog) {
  Rng rng(3);
  std::vector<std::size_t> truth, pred;
  for (int i = 0; i < 500; ++i) {
    truth.push_back(rng.index(7));
    pred.push_back(rng.index(7));
  }
  const auto r = evaluate(truth, pred, 7);
  std::size_t correct = 0, total = 0;
  for (std::size_t i = 0; i < 7; ++i) {
    std::size_t row = 0;
    for (std::size_t j = 0; j < 7; ++j) {
      std::size_t n = 0;
      for (std::size_t k = 0; k < truth.size(); ++k) n += truth[k] == i && pred[k] == j;
      EXPECT_EQ(r.confusion[i][j], n);
      row += n;
      total += n;
    }
    correct += r.confusion[i][i];
    EXPECT_DOUBLE_EQ(r.per_class_recall[i], static_cast<double>(r.confusion[i][i]) / static_cast<double>(row));
  }
  EXPECT_EQ(total, 500u);
  EXPECT_EQ(r.sample_count, 500u);
  EXPECT_DOUBLE_EQ(r.top1, static_cast<double>(correct) / 500.0);
}

TEST(Evaluate, RejectsEmptyOrMismatched) {
  EXPECT_THROW(evaluate({}, {}, 7), DataError);
  EXPECT_THROW(evaluate({1}, {1, 2}, 7), DataError);
  EXPECT_THROW(evaluate({9}, {1}, 7), DataError);
}

TEST(Report, JsonRoundTrip) {
  auto r = evaluate({0, 1, 2, 1}, {0, 2, 2, 1}, 3);
  r.kind = "fpv";
  r.seed = 12;
  r.config_digest = config_digest(nlohmann::json{{"a", 1}});
  r.metrics["extra"] = 0.5;
  EXPECT_EQ(EvalReport::from_json(r.to_json()), r);
}

TEST(Report, DigestIgnoresKeyOrder) {
  const auto a = nlohmann::json::parse(R"({"x": 1, "y": [1, 2]})");
  const auto b = nlohmann::json::parse(R"({"y": [1, 2], "x": 1})");
  EXPECT_EQ(config_digest(a), config_digest(b));
  EXPECT_NE(config_digest(a), config_digest(nlohmann::json{{"x", 2}}));
  EXPECT_EQ(fnv1a_hex(""), "cbf29ce484222325");
}

TEST(Report, ExportRefusesExistingFilesUnlessOverwrite) {
  const auto dir = fresh_dir("crossing_export_test");
  const auto r = evaluate({0, 1, 1}, {0, 1, 0}, 2);
  export_report(r, dir);
  for (auto name : kReportFiles) EXPECT_TRUE(fs::exists(dir / name));
  const std::string before = read_file(dir / "report.json");
  auto other = r;
  other.seed = 99;
  try {
    export_report(other, dir);
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("report.json"), std::string::npos);
  }
  EXPECT_EQ(read_file(dir / "report.json"), before);
  export_report(other, dir, true);
  EXPECT_EQ(EvalReport::from_json(nlohmann::json::parse(read_file(dir / "report.json"))).seed, 99u);
  for (const auto& entry : fs::directory_iterator(dir)) {
    EXPECT_EQ(entry.path().string().find(".partial"), std::string::npos);
  }
  fs::remove_all(dir);
}

TEST(Report, ConfusionCsvAndPpm) {
  const auto r = evaluate({0, 1, 1}, {0, 1, 0}, 2);
  EXPECT_NE(confusion_csv(r).find("1,1"), std::string::npos);
  const std::string ppm = confusion_ppm(r);
  EXPECT_EQ(ppm.substr(0, 2), "P6");
}

TEST(CalibratedFpv, AccuracyAndConfidence) {
  Rng rng(4);
  const CalibratedFpv fpv{.accuracy = 0.9};
  std::size_t correct = 0;
  const int n = 4000;
  for (int i = 0; i < n; ++i) {
    const std::size_t m = static_cast<std::size_t>(i % 3);
    const auto p = fpv.predict(m, rng);
    ASSERT_TRUE(p.valid());
    if (p.argmax() == m) {
      ++correct;
      EXPECT_GE(p.p[m], fpv.confidence_min);
      if (m != 0) EXPECT_EQ(p.argmin(), fpv::mirror_motion(m));
    } else {
      EXPECT_LE(p.p[p.argmax()], 0.7);
    }
  }
  EXPECT_NEAR(static_cast<double>(correct) / n, 0.9, 0.02);
}

TEST(CalibratedFpv, CompatibleMotionsRespectTRow) {
  Rng rng(6);
  const auto table = fusion::MaskTable::standard();
  for (std::size_t label = 1; label <= 7; ++label) {
    for (int i = 0; i < 30; ++i) {
      const std::size_t m = sample_compatible_motion(label, table, rng);
      EXPECT_EQ(table.t[m][label - 1], 1.0);
    }
  }
}

TEST(Gradcheck, PrimitiveSubsetPasses) {
  GradCheckOptions options;
  options.seeds = 3;
  const auto results = run_gradcheck_suite(options, "matmul");
  ASSERT_FALSE(results.empty());
  for (const auto& r : results) EXPECT_TRUE(r.passed) << r.name << " " << r.max_error;
  EXPECT_GE(gradcheck_case_names().size(), 30u);
}

int run(const std::vector<std::string>& args, std::string* out_text = nullptr, std::string* err_text = nullptr) {
  std::ostringstream out, err;
  const int code = run_command(args, out, err);
  if (out_text) *out_text = out.str();
  if (err_text) *err_text = err.str();
  return code;
}

TEST(Cli, UsageErrors) {
  std::string err;
  EXPECT_EQ(run({}, nullptr, &err), kExitUsage);
  EXPECT_NE(err.find("Usage"), std::string::npos);
  EXPECT_EQ(run({"no-such-command"}), kExitUsage);
  EXPECT_EQ(run({"train-tpv", "--out", "/tmp/x", "--bogus"}), kExitUsage);
  EXPECT_EQ(run({"synth-gen"}), kExitUsage);
}

TEST(Cli, MissingFilesNamePath) {
  std::string err;
  EXPECT_EQ(run({"eval-tpv", "--out", fresh_dir("crossing_cli_eval").string(), "--model", "/no/such/model"}, nullptr,
                &err),
            kExitData);
  EXPECT_NE(err.find("/no/such/model"), std::string::npos);
  EXPECT_EQ(run({"synth-gen", "--out", "/tmp/x", "--config", "/no/such.json"}, nullptr, &err), kExitData);
  EXPECT_NE(err.find("/no/such.json"), std::string::npos);
}

TEST(Cli, BadConfigIsUsageError) {
  const auto dir = fresh_dir("crossing_cli_config");
  fs::create_directories(dir);
  std::ofstream(dir / "c.json") << R"({"unknown_section": {}})";
  EXPECT_EQ(run({"synth-gen", "--out", (dir / "o").string(), "--config", (dir / "c.json").string()}), kExitUsage);
  fs::remove_all(dir);
}

TEST(Cli, GradcheckWritesPassList) {
  const auto dir = fresh_dir("crossing_cli_grad");
  std::string out;
  EXPECT_EQ(run({"gradcheck", "--seed", "1", "--seeds", "2", "--filter", "linear", "--out", dir.string()}, &out),
            kExitOk);
  EXPECT_NE(out.find("PASS linear"), std::string::npos);
  const auto doc = nlohmann::json::parse(read_file(dir / "gradcheck.json"));
  EXPECT_TRUE(doc.at("all_passed").get<bool>());
  EXPECT_EQ(run({"gradcheck", "--seeds", "2", "--filter", "linear", "--out", dir.string()}), kExitData);
  fs::remove_all(dir);
}

TEST(Cli, FlowCommandOnSyntheticPair) {
  const auto dir = fresh_dir("crossing_cli_flow");
  EXPECT_EQ(run({"flow", "--seed", "3", "--out", dir.string()}), kExitOk);
  EXPECT_TRUE(fs::exists(dir / "flow.ppm"));
  EXPECT_TRUE(fs::exists(dir / "flow.flo"));
  EXPECT_TRUE(fs::exists(dir / "flow.json"));
  fs::remove_all(dir);
}

}  // namespace
}  // namespace crossing::harness
