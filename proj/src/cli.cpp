#include <cmath>
#include <cstdio>
#include <fstream>
#include <ostream>
#include <sstream>

#include "CLI11.hpp"
#include "crossing/errors.hpp"
#include "crossing/harness.hpp"
#include "crossing/image.hpp"
#include "crossing/io_util.hpp"

namespace crossing::harness {

namespace {

namespace fs = std::filesystem;

struct Common {
  std::uint64_t seed = 1;
  std::string config_path;
  std::string out;
  std::string data;
  bool overwrite = false;
};

struct Effective {
  nlohmann::json raw = nlohmann::json::object();
  dataset::DatasetConfig dataset;
};

Effective load_config(const Common& common) {
  Effective e;
  if (!common.config_path.empty()) {
    try {
      e.raw = nlohmann::json::parse(read_file(common.config_path));
    } catch (const nlohmann::json::parse_error& err) {
      throw ConfigError("config " + common.config_path + ": " + err.what());
    }
    if (!e.raw.is_object()) throw ConfigError("config " + common.config_path + ": expected a JSON object");
    for (const auto& [key, _] : e.raw.items()) {
      if (key != "model" && key != "training" && key != "dataset" && key != "fusion") {
        throw ConfigError("config: unknown section '" + key + "'");
      }
    }
  }
  if (e.raw.contains("dataset")) e.dataset = dataset::DatasetConfig::from_json(e.raw.at("dataset"));
  return e;
}

// Fails before any work when an output would be clobbered.
void claim_outputs(const fs::path& dir, const std::vector<std::string>& names, bool overwrite) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw DataError("cannot create output directory " + dir.string() + ": " + ec.message());
  for (const auto& name : names) {
    const fs::path p = dir / name;
    if (!fs::exists(p)) continue;
    if (!overwrite) throw DataError("output exists: " + p.string() + " (use --overwrite)");
    fs::remove_all(p, ec);
  }
}

std::vector<std::string> with_report(std::vector<std::string> names) {
  for (auto n : kReportFiles) names.emplace_back(n);
  return names;
}

std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string training_log_csv(const std::vector<EpochLog>& log) {
  std::string out = "epoch,learning_rate,mean_loss,train_top1\n";
  for (const auto& e : log) {
    out += std::to_string(e.epoch) + "," + format_double(e.learning_rate) + "," + format_double(e.mean_loss) + "," +
           format_double(e.train_top1) + "\n";
  }
  return out;
}

// ---- data sources ----

constexpr std::string_view kScenesHeader = "frame_path,intersection_label,split";

dataset::SceneCorpus load_scenes(const Common& common, const Effective& cfg) {
  if (common.data.empty()) return dataset::make_scene_corpus(cfg.dataset, common.seed);
  const fs::path index = fs::path(common.data) / "scenes.csv";
  std::istringstream in(read_file(index));
  std::string line;
  std::getline(in, line);
  if (line != kScenesHeader) throw DataError(index.string() + ": unexpected header '" + line + "'");
  dataset::SceneCorpus corpus;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto a = line.find(','), b = line.rfind(',');
    if (a == std::string::npos || a == b) throw DataError(index.string() + ": malformed line " + std::to_string(line_no));
    dataset::SceneSample s;
    const fs::path path = fs::path(common.data) / line.substr(0, a);
    try {
      s.label = std::stoul(line.substr(a + 1, b - a - 1));
    } catch (const std::exception&) {
      throw DataError(index.string() + ": bad label on line " + std::to_string(line_no));
    }
    if (s.label < 1 || s.label > tnet::kNumIntersectionClasses) {
      throw DataError(index.string() + ": label outside 1..7 on line " + std::to_string(line_no));
    }
    s.image = image::read_pnm(path);
    if (s.image.rank() != 3) throw DataError(path.string() + ": expected a colour image");
    const std::string split = line.substr(b + 1);
    if (split == "train") {
      corpus.train.push_back(std::move(s));
    } else if (split == "test") {
      corpus.test.push_back(std::move(s));
    } else {
      throw DataError(index.string() + ": split must be train or test on line " + std::to_string(line_no));
    }
  }
  return corpus;
}

dataset::SequenceCorpus load_sequences(const Common& common, const Effective& cfg) {
  if (common.data.empty()) return dataset::make_sequence_corpus(cfg.dataset, common.seed);
  dataset::SequenceCorpus corpus;
  for (auto& loaded : dataset::load_manifest(fs::path(common.data) / "manifest.csv")) {
    (loaded.split == "train" ? corpus.train : corpus.test).push_back(std::move(loaded.sample));
  }
  return corpus;
}

tnet::TNetConfig tnet_config(const Common& common, const Effective& cfg) {
  if (cfg.raw.contains("model")) return tnet::TNetConfig::from_json(cfg.raw.at("model"));
  tnet::TNetConfig c = tnet::TNetConfig::toy();
  c.seed = common.seed;
  return c;
}

fpv::MotionNetConfig fpv_config(const Common& common, const Effective& cfg) {
  fpv::MotionNetConfig c;
  c.seed = common.seed;
  if (cfg.raw.contains("model")) {
    nlohmann::json merged = c.to_json();
    merged.update(cfg.raw.at("model"));
    c = fpv::MotionNetConfig::from_json(merged);
  }
  return c;
}

std::unique_ptr<tnet::TNet> load_tnet(const fs::path& dir) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_file(dir / "model.json"));
  } catch (const nlohmann::json::parse_error& e) {
    throw DataError((dir / "model.json").string() + ": " + e.what());
  }
  auto model = std::make_unique<tnet::TNet>(tnet::TNetConfig::from_json(j));
  model->load(dir / "model.ckpt");
  return model;
}

std::unique_ptr<fpv::MotionNet> load_motion_net(const fs::path& dir) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_file(dir / "model.json"));
  } catch (const nlohmann::json::parse_error& e) {
    throw DataError((dir / "model.json").string() + ": " + e.what());
  }
  auto model = std::make_unique<fpv::MotionNet>(fpv::MotionNetConfig::from_json(j));
  model->load(dir / "model.ckpt");
  return model;
}

std::vector<std::size_t> scene_truth(const std::vector<dataset::SceneSample>& scenes) {
  std::vector<std::size_t> out;
  for (const auto& s : scenes) out.push_back(s.label - 1);
  return out;
}

nlohmann::json digest_input(const Common& common, const Effective& cfg, std::string_view command) {
  return nlohmann::json{{"command", command}, {"config", cfg.raw}, {"dataset", cfg.dataset.to_json()},
                        {"data", common.data}};
}

// ---- commands ----

int cmd_synth_gen(const Common& common, std::ostream& out) {
  const Effective cfg = load_config(common);
  const fs::path dir = common.out;
  claim_outputs(dir, {"scenes", "scenes.csv", "sequences", "manifest.csv", "dataset.json"}, common.overwrite);
  const auto scenes = dataset::make_scene_corpus(cfg.dataset, common.seed);
  std::string index = std::string(kScenesHeader) + "\n";
  for (const auto* split : {&scenes.train, &scenes.test}) {
    const std::string tag = split == &scenes.train ? "train" : "test";
    fs::create_directories(dir / "scenes" / tag);
    for (std::size_t i = 0; i < split->size(); ++i) {
      const auto& s = (*split)[i];
      char name[64];
      std::snprintf(name, sizeof name, "c%zu_%04zu.ppm", s.label, i);
      const std::string rel = "scenes/" + tag + "/" + name;
      image::write_pnm(dir / rel, s.image);
      index += rel + "," + std::to_string(s.label) + "," + tag + "\n";
    }
  }
  write_file_atomic(dir / "scenes.csv", index);

  const auto sequences = dataset::make_sequence_corpus(cfg.dataset, common.seed);
  std::vector<dataset::ManifestEntry> entries;
  for (const auto* split : {&sequences.train, &sequences.test}) {
    const std::string tag = split == &sequences.train ? "train" : "test";
    for (const auto& seq : *split) {
      fs::create_directories(dir / "sequences" / seq.id);
      for (std::size_t t = 0; t < seq.frames.size(); ++t) {
        char name[32];
        std::snprintf(name, sizeof name, "f%02zu.pgm", t);
        const std::string rel = "sequences/" + seq.id + "/" + name;
        image::write_pnm(dir / rel, seq.frames[t]);
        entries.push_back({seq.id, rel, seq.pose_track[t], seq.motion_label + 1, seq.intersection_label, tag});
      }
    }
  }
  write_file_atomic(dir / "manifest.csv", dataset::format_manifest(entries));
  const nlohmann::json meta{{"seed", common.seed},
                            {"dataset", cfg.dataset.to_json()},
                            {"scenes", {{"train", scenes.train.size()}, {"test", scenes.test.size()}}},
                            {"sequences", {{"train", sequences.train.size()}, {"test", sequences.test.size()}}}};
  write_file_atomic(dir / "dataset.json", meta.dump(2) + "\n");
  out << "wrote " << scenes.train.size() + scenes.test.size() << " scenes and "
      << sequences.train.size() + sequences.test.size() << " sequences to " << dir.string() << "\n";
  return kExitOk;
}

int cmd_train_tpv(const Common& common, std::ostream& out) {
  const Effective cfg = load_config(common);
  const auto model_cfg = tnet_config(common, cfg);
  const auto train_cfg =
      cfg.raw.contains("training") ? TpvTrainConfig::from_json(cfg.raw.at("training")) : TpvTrainConfig{};
  const fs::path dir = common.out;
  claim_outputs(dir, with_report({"model.json", "model.ckpt", "training_log.csv"}), common.overwrite);
  const auto corpus = load_scenes(common, cfg);
  if (corpus.train.empty() || corpus.test.empty()) throw DataError("train-tpv: need train and test scenes");
  tnet::TNet model(model_cfg);
  const auto log = train_tpv(model, dataset::labeled_images(corpus.train), train_cfg, common.seed);
  for (const auto& e : log) {
    out << "epoch " << e.epoch << " loss " << e.mean_loss << " train_top1 " << e.train_top1 << "\n";
  }
  write_file_atomic(dir / "model.json", model_cfg.to_json().dump(2) + "\n");
  model.save(dir / "model.ckpt");
  write_file_atomic(dir / "training_log.csv", training_log_csv(log));

  auto report = evaluate(scene_truth(corpus.test),
                         argmax_all(tnet::predict_all(model, dataset::labeled_images(corpus.test))),
                         tnet::kNumIntersectionClasses);
  report.kind = "tpv";
  report.seed = common.seed;
  nlohmann::json digest = digest_input(common, cfg, "train-tpv");
  digest["model"] = model_cfg.to_json();
  digest["training"] = train_cfg.to_json();
  report.config_digest = config_digest(digest);
  report.metrics["final_train_loss"] = log.back().mean_loss;
  report.metrics["final_train_top1"] = log.back().train_top1;
  export_report(report, dir, common.overwrite);
  out << "test top1 " << report.top1 << "\n";
  return kExitOk;
}

int cmd_eval_tpv(const Common& common, const std::string& model_dir, std::ostream& out) {
  const Effective cfg = load_config(common);
  claim_outputs(common.out, with_report({}), common.overwrite);
  auto model = load_tnet(model_dir);
  const auto corpus = load_scenes(common, cfg);
  auto report = evaluate(scene_truth(corpus.test),
                         argmax_all(tnet::predict_all(*model, dataset::labeled_images(corpus.test))),
                         tnet::kNumIntersectionClasses);
  report.kind = "tpv";
  report.seed = common.seed;
  nlohmann::json digest = digest_input(common, cfg, "eval-tpv");
  digest["model"] = model->config().to_json();
  digest["weights"] = fnv1a_hex(read_file(fs::path(model_dir) / "model.ckpt"));
  report.config_digest = config_digest(digest);
  export_report(report, common.out, common.overwrite);
  out << "test top1 " << report.top1 << "\n";
  return kExitOk;
}

std::vector<std::size_t> motion_truth(const std::vector<fpv::MotionExample>& examples) {
  std::vector<std::size_t> out;
  for (const auto& e : examples) out.push_back(e.label);
  return out;
}

// Share of turn sequences whose mirrored copy is predicted as the mirrored motion.
double mirror_consistency(fpv::MotionNet& model, const std::vector<dataset::SequenceSample>& test,
                          const std::vector<fpv::MotionPDV>& plain) {
  std::vector<dataset::SequenceSample> mirrored;
  std::vector<std::size_t> source;
  for (std::size_t i = 0; i < test.size(); ++i) {
    if (test[i].motion_label == 0) continue;
    mirrored.push_back(dataset::mirror_sequence(test[i]));
    source.push_back(i);
  }
  if (mirrored.empty()) return 0.0;
  const auto preds = fpv::predict_all(model, motion_examples(mirrored, model.config(), false));
  std::size_t agree = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    if (preds[i].argmax() == fpv::mirror_motion(plain[source[i]].argmax())) ++agree;
  }
  return static_cast<double>(agree) / static_cast<double>(preds.size());
}

EvalReport fpv_report(fpv::MotionNet& model, const std::vector<dataset::SequenceSample>& test) {
  const auto examples = motion_examples(test, model.config(), false);
  const auto pdvs = fpv::predict_all(model, examples);
  auto report = evaluate(motion_truth(examples), argmax_all(pdvs), fpv::kNumMotionClasses);
  report.kind = "fpv";
  report.metrics["mirror_consistency"] = mirror_consistency(model, test, pdvs);
  return report;
}

int cmd_train_fpv(const Common& common, std::ostream& out) {
  const Effective cfg = load_config(common);
  const auto model_cfg = fpv_config(common, cfg);
  const auto train_cfg =
      cfg.raw.contains("training") ? FpvTrainConfig::from_json(cfg.raw.at("training")) : FpvTrainConfig{};
  const fs::path dir = common.out;
  claim_outputs(dir, with_report({"model.json", "model.ckpt", "training_log.csv"}), common.overwrite);
  const auto corpus = load_sequences(common, cfg);
  if (corpus.train.empty() || corpus.test.empty()) throw DataError("train-fpv: need train and test sequences");
  fpv::MotionNet model(model_cfg);
  const auto log = train_fpv(model, motion_examples(corpus.train, model_cfg, train_cfg.mirror), train_cfg, common.seed);
  for (const auto& e : log) {
    out << "epoch " << e.epoch << " loss " << e.mean_loss << " train_top1 " << e.train_top1 << "\n";
  }
  write_file_atomic(dir / "model.json", model_cfg.to_json().dump(2) + "\n");
  model.save(dir / "model.ckpt");
  write_file_atomic(dir / "training_log.csv", training_log_csv(log));
  auto report = fpv_report(model, corpus.test);
  report.seed = common.seed;
  nlohmann::json digest = digest_input(common, cfg, "train-fpv");
  digest["model"] = model_cfg.to_json();
  digest["training"] = train_cfg.to_json();
  report.config_digest = config_digest(digest);
  report.metrics["final_train_loss"] = log.back().mean_loss;
  export_report(report, dir, common.overwrite);
  out << "test top1 " << report.top1 << " mirror consistency " << report.metrics["mirror_consistency"] << "\n";
  return kExitOk;
}

int cmd_eval_fpv(const Common& common, const std::string& model_dir, std::ostream& out) {
  const Effective cfg = load_config(common);
  claim_outputs(common.out, with_report({}), common.overwrite);
  auto model = load_motion_net(model_dir);
  const auto corpus = load_sequences(common, cfg);
  if (corpus.test.empty()) throw DataError("eval-fpv: no test sequences");
  auto report = fpv_report(*model, corpus.test);
  report.seed = common.seed;
  nlohmann::json digest = digest_input(common, cfg, "eval-fpv");
  digest["model"] = model->config().to_json();
  digest["weights"] = fnv1a_hex(read_file(fs::path(model_dir) / "model.ckpt"));
  report.config_digest = config_digest(digest);
  export_report(report, common.out, common.overwrite);
  out << "test top1 " << report.top1 << "\n";
  return kExitOk;
}

struct FuseOptions {
  std::string tpv_model;
  std::string fpv_model;
  double fpv_accuracy = 0.95;
  double threshold = -1.0;
};

std::size_t turn_confusions(const EvalReport& r) { return r.confusion[1][2] + r.confusion[2][1]; }

int cmd_fuse_eval(const Common& common, const FuseOptions& options, std::ostream& out) {
  const Effective cfg = load_config(common);
  claim_outputs(common.out, with_report({"tpv"}), common.overwrite);
  fusion::MaskTable table =
      cfg.raw.contains("fusion") ? fusion::MaskTable::from_json(cfg.raw.at("fusion")) : fusion::MaskTable::standard();
  if (options.threshold >= 0.0) table.threshold = options.threshold;
  auto tpv_model = load_tnet(options.tpv_model);
  const auto corpus = load_scenes(common, cfg);
  if (corpus.test.empty()) throw DataError("fuse-eval: no test scenes");
  const auto tpv = tnet::predict_all(*tpv_model, dataset::labeled_images(corpus.test));

  Rng rng(derive_seed(common.seed, 0xF05E));
  std::vector<std::size_t> motions;
  for (const auto& s : corpus.test) motions.push_back(sample_compatible_motion(s.label, table, rng));
  std::vector<fpv::MotionPDV> motion_pdvs;
  if (options.fpv_model.empty()) {
    const CalibratedFpv calibrated{.accuracy = options.fpv_accuracy};
    for (std::size_t m : motions) motion_pdvs.push_back(calibrated.predict(m, rng));
  } else {
    auto fpv_model = load_motion_net(options.fpv_model);
    std::vector<dataset::SequenceSample> seqs(motions.size());
    for (std::size_t i = 0; i < motions.size(); ++i) {
      seqs[i] = dataset::generate_sequence(motions[i], derive_seed(common.seed, 0x5E0000 + i), cfg.dataset.sequence);
    }
    motion_pdvs = fpv::predict_all(*fpv_model, motion_examples(seqs, fpv_model->config(), false));
  }

  std::vector<tnet::IntersectionPDV> fused;
  std::size_t fallbacks = 0, applied = 0;
  for (std::size_t i = 0; i < tpv.size(); ++i) {
    const auto r = fusion::fuse(motion_pdvs[i], tpv[i], table);
    fallbacks += r.fallback;
    applied += r.applied_t;
    fused.push_back(r.pdv);
  }
  const auto truth = scene_truth(corpus.test);
  auto tpv_report = evaluate(truth, argmax_all(tpv), tnet::kNumIntersectionClasses);
  auto fused_report = evaluate(truth, argmax_all(fused), tnet::kNumIntersectionClasses);
  const auto fpv_eval = evaluate(motions, argmax_all(motion_pdvs), fpv::kNumMotionClasses);

  nlohmann::json digest = digest_input(common, cfg, "fuse-eval");
  digest["table"] = table.to_json();
  digest["tpv_weights"] = fnv1a_hex(read_file(fs::path(options.tpv_model) / "model.ckpt"));
  digest["fpv"] = options.fpv_model.empty() ? nlohmann::json(options.fpv_accuracy)
                                            : nlohmann::json(fnv1a_hex(read_file(fs::path(options.fpv_model) / "model.ckpt")));
  for (auto* r : {&tpv_report, &fused_report}) {
    r->seed = common.seed;
    r->config_digest = config_digest(digest);
  }
  tpv_report.kind = "tpv";
  fused_report.kind = "fused";
  fused_report.metrics = {{"tpv_top1", tpv_report.top1},
                          {"fused_top1", fused_report.top1},
                          {"fpv_top1", fpv_eval.top1},
                          {"tpv_turn_confusions", static_cast<double>(turn_confusions(tpv_report))},
                          {"fused_turn_confusions", static_cast<double>(turn_confusions(fused_report))},
                          {"fallback_count", static_cast<double>(fallbacks)},
                          {"t_applied_count", static_cast<double>(applied)}};
  export_report(tpv_report, fs::path(common.out) / "tpv", common.overwrite);
  export_report(fused_report, common.out, common.overwrite);
  out << "tpv top1 " << tpv_report.top1 << " fused top1 " << fused_report.top1 << " turn confusions "
      << turn_confusions(tpv_report) << " -> " << turn_confusions(fused_report) << "\n";
  return kExitOk;
}

struct FlowOptions {
  std::string frame_a, frame_b;
  fpv::FlowParams params;
};

Tensor read_gray(const std::string& path) {
  Tensor img = image::read_pnm(path);
  return img.rank() == 3 ? image::to_grayscale(img) : img;
}

int cmd_flow(const Common& common, const FlowOptions& options, std::ostream& out) {
  if (options.frame_a.empty() != options.frame_b.empty()) {
    throw ConfigError("flow: give both --frame-a and --frame-b, or neither for a synthetic pair");
  }
  claim_outputs(common.out, {"flow.ppm", "flow.flo", "flow.json"}, common.overwrite);
  Tensor a, b;
  if (options.frame_a.empty()) {
    const Effective cfg = load_config(common);
    const auto seq = dataset::generate_sequence(0, common.seed, cfg.dataset.sequence);
    a = seq.frames[0];
    b = seq.frames[1];
  } else {
    a = read_gray(options.frame_a);
    b = read_gray(options.frame_b);
  }
  const auto flow = fpv::compute_flow(a, b, options.params);
  image::write_pnm(fs::path(common.out) / "flow.ppm", fpv::flow_to_color(flow));
  fpv::write_flo(fs::path(common.out) / "flow.flo", flow);
  double su = 0, sv = 0, mx = 0;
  const std::size_t n = flow.height() * flow.width();
  for (std::size_t i = 0; i < n; ++i) {
    const double u = flow.uv.data()[2 * i], v = flow.uv.data()[2 * i + 1];
    su += u;
    sv += v;
    mx = std::max(mx, std::hypot(u, v));
  }
  const nlohmann::json summary{{"height", flow.height()},
                               {"width", flow.width()},
                               {"mean_u", su / static_cast<double>(n)},
                               {"mean_v", sv / static_cast<double>(n)},
                               {"max_magnitude", mx},
                               {"levels", options.params.levels},
                               {"block", options.params.block},
                               {"search_radius", options.params.search_radius}};
  write_file_atomic(fs::path(common.out) / "flow.json", summary.dump(2) + "\n");
  out << "flow " << flow.height() << "x" << flow.width() << " mean (" << summary["mean_u"] << ", "
      << summary["mean_v"] << ")\n";
  return kExitOk;
}

int cmd_gradcheck(const Common& common, std::size_t seeds, const std::string& filter, std::ostream& out) {
  if (!common.out.empty()) claim_outputs(common.out, {"gradcheck.json"}, common.overwrite);
  GradCheckOptions options;
  options.seed = common.seed;
  options.seeds = seeds;
  const auto results = run_gradcheck_suite(options, filter);
  if (results.empty()) throw ConfigError("gradcheck: no case matches '" + filter + "'");
  nlohmann::json list = nlohmann::json::array();
  bool all = true;
  for (const auto& r : results) {
    char line[160];
    std::snprintf(line, sizeof line, "%s %s seeds=%zu max_rel_error=%.3e\n", r.passed ? "PASS" : "FAIL",
                  r.name.c_str(), r.seeds, r.max_error);
    out << line;
    list.push_back({{"name", r.name}, {"seeds", r.seeds}, {"max_rel_error", r.max_error}, {"passed", r.passed}});
    all = all && r.passed;
  }
  const nlohmann::json doc{{"seed", common.seed}, {"tolerance", options.tolerance}, {"all_passed", all},
                           {"checks", list}};
  if (!common.out.empty()) write_file_atomic(fs::path(common.out) / "gradcheck.json", doc.dump(2) + "\n");
  return all ? kExitOk : kExitNumeric;
}

void add_common(CLI::App* sub, Common& common, bool needs_data, bool out_required = true) {
  sub->add_option("--seed", common.seed, "Random seed")->capture_default_str();
  sub->add_option("--config", common.config_path, "JSON config with model/training/dataset/fusion sections");
  sub->add_option("--out", common.out, "Output directory")->required(out_required);
  sub->add_flag("--overwrite", common.overwrite, "Replace existing outputs");
  if (needs_data) sub->add_option("--data", common.data, "Corpus written by synth-gen (default: generate in memory)");
}

}  // namespace

int run_command(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Visual intersection classification: TPV/FPV training, evaluation and fusion", "crossing"};
  app.require_subcommand(1);
  Common common;
  std::string model_dir;
  FuseOptions fuse;
  FlowOptions flow;
  std::size_t gradcheck_seeds = 20;
  std::string gradcheck_filter;

  auto* synth = app.add_subcommand("synth-gen", "Render the synthetic scene and sequence corpus");
  add_common(synth, common, false);
  auto* train_tpv_cmd = app.add_subcommand("train-tpv", "Train the intersection classifier");
  add_common(train_tpv_cmd, common, true);
  auto* train_fpv_cmd = app.add_subcommand("train-fpv", "Train the ego-motion classifier");
  add_common(train_fpv_cmd, common, true);
  auto* eval_tpv = app.add_subcommand("eval-tpv", "Evaluate a trained intersection classifier");
  add_common(eval_tpv, common, true);
  eval_tpv->add_option("--model", model_dir, "Directory holding model.json and model.ckpt")->required();
  auto* eval_fpv = app.add_subcommand("eval-fpv", "Evaluate a trained ego-motion classifier");
  add_common(eval_fpv, common, true);
  eval_fpv->add_option("--model", model_dir, "Directory holding model.json and model.ckpt")->required();
  auto* fuse_cmd = app.add_subcommand("fuse-eval", "Evaluate TPV alone and fused with an ego-motion classifier");
  add_common(fuse_cmd, common, true);
  fuse_cmd->add_option("--tpv-model", fuse.tpv_model, "Trained TPV model directory")->required();
  fuse_cmd->add_option("--fpv-model", fuse.fpv_model, "Trained FPV model directory (default: calibrated synthetic)");
  fuse_cmd->add_option("--fpv-accuracy", fuse.fpv_accuracy, "Accuracy of the calibrated synthetic FPV")
      ->check(CLI::Range(0.0, 1.0))
      ->capture_default_str();
  fuse_cmd->add_option("--threshold", fuse.threshold, "Override the confidence threshold for the T mask")
      ->check(CLI::Range(0.0, 1.0));
  auto* flow_cmd = app.add_subcommand("flow", "Compute and colour-code optical flow for a frame pair");
  add_common(flow_cmd, common, false);
  flow_cmd->add_option("--frame-a", flow.frame_a, "First frame (PGM/PPM)");
  flow_cmd->add_option("--frame-b", flow.frame_b, "Second frame (PGM/PPM)");
  flow_cmd->add_option("--levels", flow.params.levels, "Pyramid levels")->capture_default_str();
  flow_cmd->add_option("--block", flow.params.block, "Odd matching window")->capture_default_str();
  flow_cmd->add_option("--radius", flow.params.search_radius, "Search radius in pixels")->capture_default_str();
  auto* grad = app.add_subcommand("gradcheck", "Run the finite-difference gradient suite");
  add_common(grad, common, false, false);
  grad->add_option("--seeds", gradcheck_seeds, "Seeds per check")->capture_default_str();
  grad->add_option("--filter", gradcheck_filter, "Only checks whose name contains this text");

  std::vector<const char*> argv{"crossing"};
  for (const auto& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    if (code == 0) return kExitOk;
    const CLI::App* failed = &app;
    for (const auto* sub : app.get_subcommands()) failed = sub;
    err << failed->help();
    return kExitUsage;
  }

  try {
    if (synth->parsed()) return cmd_synth_gen(common, out);
    if (train_tpv_cmd->parsed()) return cmd_train_tpv(common, out);
    if (train_fpv_cmd->parsed()) return cmd_train_fpv(common, out);
    if (eval_tpv->parsed()) return cmd_eval_tpv(common, model_dir, out);
    if (eval_fpv->parsed()) return cmd_eval_fpv(common, model_dir, out);
    if (fuse_cmd->parsed()) return cmd_fuse_eval(common, fuse, out);
    if (flow_cmd->parsed()) return cmd_flow(common, flow, out);
    if (grad->parsed()) return cmd_gradcheck(common, gradcheck_seeds, gradcheck_filter, out);
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const DataError& e) {
    err << "error: " << e.what() << "\n";
    return kExitData;
  } catch (const ShapeError& e) {
    err << "error: " << e.what() << "\n";
    return kExitData;
  } catch (const NumericError& e) {
    err << "error: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitFailure;
  }
  err << app.help();
  return kExitUsage;
}

}  // namespace crossing::harness
