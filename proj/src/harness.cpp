#include "crossing/harness.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <set>

#include "crossing/errors.hpp"
#include "crossing/image.hpp"
#include "crossing/io_util.hpp"

namespace crossing::harness {

nlohmann::json EvalReport::to_json() const {
  return nlohmann::json{
      {"kind", kind},
      {"num_classes", num_classes},
      {"top1", top1},
      {"confusion", confusion},
      {"per_class_recall", per_class_recall},
      {"sample_count", sample_count},
      {"config_digest", config_digest},
      {"seed", seed},
      {"metrics", metrics},
  };
}

EvalReport EvalReport::from_json(const nlohmann::json& j) {
  EvalReport r;
  try {
    r.kind = j.at("kind").get<std::string>();
    r.num_classes = j.at("num_classes").get<std::size_t>();
    r.top1 = j.at("top1").get<double>();
    r.confusion = j.at("confusion").get<std::vector<std::vector<std::size_t>>>();
    r.per_class_recall = j.at("per_class_recall").get<std::vector<double>>();
    r.sample_count = j.at("sample_count").get<std::size_t>();
    r.config_digest = j.at("config_digest").get<std::string>();
    r.seed = j.at("seed").get<std::uint64_t>();
    r.metrics = j.at("metrics").get<std::map<std::string, double>>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("report: ") + e.what());
  }
  return r;
}

EvalReport evaluate(const std::vector<std::size_t>& truth, const std::vector<std::size_t>& predicted,
                    std::size_t num_classes) {
  if (truth.empty()) throw DataError("evaluate: empty split");
  if (truth.size() != predicted.size()) {
    throw DataError("evaluate: " + std::to_string(truth.size()) + " labels but " + std::to_string(predicted.size()) +
                    " predictions");
  }
  EvalReport r;
  r.num_classes = num_classes;
  r.confusion.assign(num_classes, std::vector<std::size_t>(num_classes, 0));
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (truth[i] >= num_classes || predicted[i] >= num_classes) {
      throw DataError("evaluate: class index out of range at sample " + std::to_string(i));
    }
    ++r.confusion[truth[i]][predicted[i]];
  }
  std::size_t correct = 0;
  for (std::size_t c = 0; c < num_classes; ++c) {
    std::size_t row = 0;
    for (std::size_t v : r.confusion[c]) row += v;
    correct += r.confusion[c][c];
    r.per_class_recall.push_back(row == 0 ? 0.0 : static_cast<double>(r.confusion[c][c]) / static_cast<double>(row));
  }
  r.sample_count = truth.size();
  r.top1 = static_cast<double>(correct) / static_cast<double>(truth.size());
  return r;
}

std::string fnv1a_hex(std::string_view text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::string config_digest(const nlohmann::json& config) { return fnv1a_hex(config.dump()); }

std::string confusion_csv(const EvalReport& report) {
  std::string out;
  for (const auto& row : report.confusion) {
    for (std::size_t j = 0; j < row.size(); ++j) {
      if (j) out += ',';
      out += std::to_string(row[j]);
    }
    out += '\n';
  }
  return out;
}

std::string confusion_ppm(const EvalReport& report) {
  constexpr std::size_t kCell = 16;
  const std::size_t k = report.confusion.size();
  const std::size_t side = std::max<std::size_t>(1, k) * kCell;
  std::string out = "P6\n" + std::to_string(side) + " " + std::to_string(side) + "\n255\n";
  for (std::size_t y = 0; y < side; ++y) {
    const std::size_t r = std::min(k - 1, y / kCell);
    std::size_t total = 0;
    if (k) {
      for (std::size_t v : report.confusion[r]) total += v;
    }
    for (std::size_t x = 0; x < side; ++x) {
      unsigned char level = 0;
      if (k && total) {
        const double share = static_cast<double>(report.confusion[r][std::min(k - 1, x / kCell)]) /
                             static_cast<double>(total);
        level = static_cast<unsigned char>(std::lround(255.0 * share));
      }
      out.append(3, static_cast<char>(level));
    }
  }
  return out;
}

void export_report(const EvalReport& report, const std::filesystem::path& dir, bool overwrite) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw DataError("report: cannot create directory " + dir.string() + ": " + ec.message());
  for (auto name : kReportFiles) {
    const fs::path target = dir / name;
    if (fs::exists(target)) {
      if (!overwrite) throw DataError("report: refusing to overwrite existing " + target.string());
    }
  }
  const std::array<std::string, 3> contents = {report.to_json().dump(2) + "\n", confusion_csv(report),
                                               confusion_ppm(report)};
  std::vector<fs::path> staged;
  try {
    for (std::size_t i = 0; i < kReportFiles.size(); ++i) {
      const fs::path tmp = dir / (std::string(kReportFiles[i]) + ".partial");
      write_file_atomic(tmp, contents[i]);
      staged.push_back(tmp);
    }
  } catch (...) {
    for (const auto& p : staged) fs::remove(p, ec);
    throw;
  }
  for (std::size_t i = 0; i < kReportFiles.size(); ++i) {
    fs::rename(staged[i], dir / kReportFiles[i], ec);
    if (ec) throw DataError("report: cannot write " + (dir / kReportFiles[i]).string() + ": " + ec.message());
  }
}

// ---- calibrated motion classifier ----

fpv::MotionPDV CalibratedFpv::predict(std::size_t motion, Rng& rng) const {
  if (motion >= fpv::kNumMotionClasses) throw ConfigError("calibrated fpv: motion out of range");
  fpv::MotionPDV pdv;
  if (rng.bernoulli(accuracy)) {
    const double top = rng.uniform(confidence_min, 1.0 - 1e-6);
    const double rest = 1.0 - top;
    // A turn is least likely to be mistaken for the opposite turn.
    std::size_t second, third;
    if (motion == 0) {
      second = rng.bernoulli(0.5) ? 1 : 2;
      third = 3 - second;
    } else {
      second = 0;
      third = fpv::mirror_motion(motion);
    }
    const double split = rng.uniform(0.6, 0.9);
    pdv.p[motion] = top;
    pdv.p[second] = rest * split;
    pdv.p[third] = rest * (1.0 - split);
    return pdv;
  }
  std::array<std::size_t, 2> others{};
  std::size_t n = 0;
  for (std::size_t m = 0; m < fpv::kNumMotionClasses; ++m) {
    if (m != motion) others[n++] = m;
  }
  const std::size_t winner = others[rng.index(2)];
  // top >= 0.5 and each runner-up <= 0.4, so the wrong class wins outright.
  const double top = rng.uniform(0.5, 0.7);
  const double split = rng.uniform(0.2, 0.8);
  pdv.p[winner] = top;
  std::size_t k = 0;
  for (std::size_t m = 0; m < fpv::kNumMotionClasses; ++m) {
    if (m != winner) pdv.p[m] = (1.0 - top) * (k++ == 0 ? split : 1.0 - split);
  }
  return pdv;
}

std::size_t sample_compatible_motion(std::size_t label, const fusion::MaskTable& table, Rng& rng) {
  if (label < 1 || label > tnet::kNumIntersectionClasses) throw ConfigError("label out of range");
  std::vector<std::size_t> allowed;
  for (std::size_t m = 0; m < fpv::kNumMotionClasses; ++m) {
    if (table.t[m][label - 1] != 0.0) allowed.push_back(m);
  }
  if (allowed.empty()) throw ConfigError("mask table allows no motion for class " + std::to_string(label));
  return allowed[rng.index(allowed.size())];
}

// ---- training drivers ----

namespace {

template <typename T>
void read_key(const nlohmann::json& j, const char* key, T& field) {
  if (j.contains(key)) field = j.at(key).get<T>();
}

void reject_unknown(const nlohmann::json& j, const nlohmann::json& defaults, const std::string& what) {
  if (!j.is_object()) throw ConfigError(what + ": expected a JSON object");
  for (const auto& [key, _] : j.items()) {
    if (!defaults.contains(key)) throw ConfigError(what + ": unknown key '" + key + "'");
  }
}

double cosine_rate(double base, std::size_t epoch, std::size_t epochs) {
  return 0.5 * base * (1.0 + std::cos(std::numbers::pi * static_cast<double>(epoch) / static_cast<double>(epochs)));
}

}  // namespace

nlohmann::json TpvTrainConfig::to_json() const {
  return nlohmann::json{{"epochs", epochs},     {"batch_size", batch_size},       {"learning_rate", learning_rate},
                        {"momentum", momentum}, {"weight_decay", weight_decay}, {"mirror", mirror},
                        {"cosine", cosine}};
}

TpvTrainConfig TpvTrainConfig::from_json(const nlohmann::json& j) {
  TpvTrainConfig c;
  reject_unknown(j, c.to_json(), "tpv training config");
  try {
    read_key(j, "epochs", c.epochs);
    read_key(j, "batch_size", c.batch_size);
    read_key(j, "learning_rate", c.learning_rate);
    read_key(j, "momentum", c.momentum);
    read_key(j, "weight_decay", c.weight_decay);
    read_key(j, "mirror", c.mirror);
    read_key(j, "cosine", c.cosine);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("tpv training config: ") + e.what());
  }
  if (c.epochs == 0 || c.batch_size == 0 || !(c.learning_rate > 0.0)) {
    throw ConfigError("tpv training config: epochs, batch_size and learning_rate must be positive");
  }
  return c;
}

nlohmann::json FpvTrainConfig::to_json() const {
  return nlohmann::json{{"epochs", epochs},     {"batch_size", batch_size},       {"learning_rate", learning_rate},
                        {"momentum", momentum}, {"weight_decay", weight_decay}, {"mirror", mirror}};
}

FpvTrainConfig FpvTrainConfig::from_json(const nlohmann::json& j) {
  FpvTrainConfig c;
  reject_unknown(j, c.to_json(), "fpv training config");
  try {
    read_key(j, "epochs", c.epochs);
    read_key(j, "batch_size", c.batch_size);
    read_key(j, "learning_rate", c.learning_rate);
    read_key(j, "momentum", c.momentum);
    read_key(j, "weight_decay", c.weight_decay);
    read_key(j, "mirror", c.mirror);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("fpv training config: ") + e.what());
  }
  if (c.epochs == 0 || c.batch_size == 0 || !(c.learning_rate > 0.0)) {
    throw ConfigError("fpv training config: epochs, batch_size and learning_rate must be positive");
  }
  return c;
}

std::vector<EpochLog> train_tpv(tnet::TNet& model, const std::vector<tnet::LabeledImage>& train,
                                const TpvTrainConfig& config, std::uint64_t seed) {
  Sgd optimizer(model.parameters(), {config.learning_rate, config.momentum, config.weight_decay});
  tnet::TrainOptions options;
  options.batch_size = config.batch_size;
  if (config.mirror) {
    std::vector<std::size_t> map;
    for (std::size_t c = 1; c <= tnet::kNumIntersectionClasses; ++c) map.push_back(dataset::mirror_label(c) - 1);
    options.mirror_map = map;
  }
  Rng rng(derive_seed(seed, 0x7470));
  std::vector<EpochLog> log;
  for (std::size_t e = 0; e < config.epochs; ++e) {
    const double lr = config.cosine ? cosine_rate(config.learning_rate, e, config.epochs) : config.learning_rate;
    optimizer.set_learning_rate(lr);
    const auto m = tnet::tnet_train_epoch(model, train, optimizer, options, rng);
    log.push_back({e + 1, lr, m.mean_loss, m.top1});
  }
  return log;
}

std::vector<fpv::MotionExample> motion_examples(const std::vector<dataset::SequenceSample>& sequences,
                                                const fpv::MotionNetConfig& config, bool add_mirrored) {
  std::vector<fpv::MotionExample> out;
  out.reserve(sequences.size() * (add_mirrored ? 2 : 1));
  for (const auto& seq : sequences) {
    std::vector<Tensor> frames = seq.frames;
    for (auto& f : frames) {
      if (f.extent(0) != config.frame_size || f.extent(1) != config.frame_size) {
        f = image::resize_bilinear(f, config.frame_size, config.frame_size);
      }
    }
    out.push_back({fpv::prepare_inputs(frames, config), seq.motion_label});
    if (add_mirrored) {
      for (auto& f : frames) f = image::mirror_horizontal(f);
      out.push_back({fpv::prepare_inputs(frames, config), fpv::mirror_motion(seq.motion_label)});
    }
  }
  return out;
}

std::vector<EpochLog> train_fpv(fpv::MotionNet& model, const std::vector<fpv::MotionExample>& train,
                                const FpvTrainConfig& config, std::uint64_t seed) {
  Sgd optimizer(model.parameters(), {config.learning_rate, config.momentum, config.weight_decay});
  fpv::MotionTrainOptions options;
  options.batch_size = config.batch_size;
  Rng rng(derive_seed(seed, 0x6670));
  std::vector<EpochLog> log;
  for (std::size_t e = 0; e < config.epochs; ++e) {
    const double lr = cosine_rate(config.learning_rate, e, config.epochs);
    optimizer.set_learning_rate(lr);
    const auto m = fpv::fpv_train_epoch(model, train, optimizer, options, rng);
    log.push_back({e + 1, lr, m.mean_loss, m.top1});
  }
  return log;
}

}  // namespace crossing::harness
