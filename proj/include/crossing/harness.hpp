#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "crossing/dataset.hpp"
#include "crossing/fpv.hpp"
#include "crossing/fusion.hpp"
#include "crossing/tnet.hpp"
#include "json.hpp"

namespace crossing::harness {

/// Top-1 accuracy and confusion matrix for one evaluated split.
struct EvalReport {
  std::string kind;  // "tpv", "fpv" or "fused"
  std::size_t num_classes = 0;
  double top1 = 0.0;
  std::vector<std::vector<std::size_t>> confusion;  // rows: ground truth, columns: prediction
  std::vector<double> per_class_recall;              // 0 for a class without samples
  std::size_t sample_count = 0;
  std::string config_digest;
  std::uint64_t seed = 0;
  std::map<std::string, double> metrics;  // command-specific extras

  nlohmann::json to_json() const;
  static EvalReport from_json(const nlohmann::json& j);
  bool operator==(const EvalReport&) const = default;
};

// 0-based labels. Throws DataError for an empty or mismatched log.
EvalReport evaluate(const std::vector<std::size_t>& truth, const std::vector<std::size_t>& predicted,
                    std::size_t num_classes);

template <typename Pdv>
std::vector<std::size_t> argmax_all(const std::vector<Pdv>& pdvs) {
  std::vector<std::size_t> out;
  out.reserve(pdvs.size());
  for (const auto& p : pdvs) out.push_back(p.argmax());
  return out;
}

// 16 hex digits of the 64-bit FNV-1a hash of `text`.
std::string fnv1a_hex(std::string_view text);
// Digest of the canonical (sorted-key) serialization.
std::string config_digest(const nlohmann::json& config);

std::string confusion_csv(const EvalReport& report);
// Row-normalized grayscale heatmap, binary PPM with 16-pixel cells.
std::string confusion_ppm(const EvalReport& report);

inline constexpr std::array<std::string_view, 3> kReportFiles = {"report.json", "confusion.csv", "confusion.ppm"};

/// Writes report.json, confusion.csv and confusion.ppm into `dir` (created
/// when missing). Refuses with DataError naming the file when any of them
/// already exists, unless `overwrite`. Files are staged under temporary
/// names and renamed only after every write succeeded.
void export_report(const EvalReport& report, const std::filesystem::path& dir, bool overwrite = false);

// ---- finite-difference gradient suite ----

struct GradCheckResult {
  std::string name;
  std::size_t seeds = 0;
  double max_error = 0.0;
  bool passed = false;
};

struct GradCheckOptions {
  std::uint64_t seed = 1;
  std::size_t seeds = 20;
  double tolerance = 1e-4;
  double step = 1e-6;
};

std::vector<std::string> gradcheck_case_names();
// Runs every case (or only those whose name contains `filter`).
std::vector<GradCheckResult> run_gradcheck_suite(const GradCheckOptions& options, std::string_view filter = {});

// ---- calibrated synthetic motion classifier ----

/// Emits a motion PDV whose argmax is the true class with probability
/// `accuracy`. Correct outputs are confident (the winning probability is
/// drawn from [confidence_min, 1)); wrong outputs stay below 0.7 and never
/// reach the fusion threshold.
struct CalibratedFpv {
  double accuracy = 0.95;
  double confidence_min = 0.9995;

  fpv::MotionPDV predict(std::size_t motion, Rng& rng) const;
};

// A motion for an intersection class allowed by the table's T row; the
// choice is uniform among the allowed motions.
std::size_t sample_compatible_motion(std::size_t label, const fusion::MaskTable& table, Rng& rng);

// ---- training drivers shared by the CLI and the acceptance tests ----

struct TpvTrainConfig {
  std::size_t epochs = 20;
  std::size_t batch_size = 16;
  double learning_rate = 0.05;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  bool mirror = true;
  bool cosine = true;  // cosine decay of the learning rate over the epochs

  nlohmann::json to_json() const;
  static TpvTrainConfig from_json(const nlohmann::json& j);
};

struct FpvTrainConfig {
  std::size_t epochs = 12;
  std::size_t batch_size = 8;
  double learning_rate = 0.02;
  double momentum = 0.9;
  double weight_decay = 0.0;
  bool mirror = true;  // adds every training sequence mirrored with swapped turns

  nlohmann::json to_json() const;
  static FpvTrainConfig from_json(const nlohmann::json& j);
};

struct EpochLog {
  std::size_t epoch = 0;
  double learning_rate = 0.0;
  double mean_loss = 0.0;
  double train_top1 = 0.0;
};

std::vector<EpochLog> train_tpv(tnet::TNet& model, const std::vector<tnet::LabeledImage>& train,
                                const TpvTrainConfig& config, std::uint64_t seed);

std::vector<fpv::MotionExample> motion_examples(const std::vector<dataset::SequenceSample>& sequences,
                                                const fpv::MotionNetConfig& config, bool add_mirrored);

std::vector<EpochLog> train_fpv(fpv::MotionNet& model, const std::vector<fpv::MotionExample>& train,
                                const FpvTrainConfig& config, std::uint64_t seed);

// ---- command line ----

/// Exit statuses of run_command.
enum ExitCode : int { kExitOk = 0, kExitFailure = 1, kExitUsage = 2, kExitData = 3, kExitNumeric = 4 };

/// Runs one `crossing` subcommand; argv excludes the program name.
int run_command(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace crossing::harness
