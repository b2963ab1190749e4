#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "crossing/attention.hpp"
#include "crossing/fpv.hpp"
#include "crossing/fusion.hpp"
#include "crossing/harness.hpp"
#include "crossing/io_util.hpp"
#include "crossing/tnet.hpp"
#include "../oracles/flow_oracle.hpp"
#include "../oracles/fusion_oracle.hpp"
#include "../oracles/sa_oracle.hpp"

namespace fs = std::filesystem;
using namespace crossing;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* format, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, format, args...);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

const fs::path& work_dir() {
  static const fs::path dir = CROSSING_ACCEPTANCE_WORK_DIR;
  return dir;
}

// Runs one CLI command and throws with its stderr when it fails.
std::string cli(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  const int code = harness::run_command(args, out, err);
  if (code != harness::kExitOk) {
    std::string line;
    for (const auto& a : args) line += a + " ";
    throw std::runtime_error("`crossing " + line + "` exited " + std::to_string(code) + ": " + err.str());
  }
  return out.str();
}

nlohmann::json read_report(const fs::path& dir) { return nlohmann::json::parse(read_file(dir / "report.json")); }

std::size_t turn_confusions(const nlohmann::json& report) {
  const auto& c = report.at("confusion");
  return c.at(1).at(2).get<std::size_t>() + c.at(2).at(1).get<std::size_t>();
}

attention::SABlockConfig block_config(attention::DeltaVariant variant, std::size_t k, bool softmax) {
  attention::SABlockConfig c;
  c.channels_in = 8;
  c.reduced_dim = 4;
  c.footprint_k = k;
  c.variant = variant;
  c.share_factor = 2;
  c.alpha_softmax = softmax;
  return c;
}

constexpr attention::DeltaVariant kVariants[] = {attention::DeltaVariant::star, attention::DeltaVariant::clique,
                                                 attention::DeltaVariant::concat};

// ---- criteria ----

Outcome gradient_suite() {
  const auto start = std::chrono::steady_clock::now();
  harness::GradCheckOptions options;
  options.seeds = 20;
  const auto results = harness::run_gradcheck_suite(options);
  const double elapsed = seconds_since(start);
  bool all = !results.empty();
  double worst = 0.0;
  std::string failed;
  for (const auto& r : results) {
    all = all && r.passed && r.seeds >= 20;
    worst = std::max(worst, r.max_error);
    if (!r.passed) failed += " " + r.name;
  }
  // Every required family must be present in the suite.
  std::set<std::string> missing{"sa_block_star_k1", "sa_block_star_k3", "sa_block_clique_k1", "sa_block_clique_k3",
                                "sa_block_concat_k1", "sa_block_concat_k3", "transition", "lstm", "tnet_micro"};
  for (const auto& r : results) {
    for (auto it = missing.begin(); it != missing.end();) {
      it = r.name.starts_with(*it) ? missing.erase(it) : std::next(it);
    }
  }
  for (const auto& m : missing) failed += " missing:" + m;
  const bool pass = all && missing.empty() && elapsed < 300.0;
  return {pass, fmt("%zu checks x 20 seeds, max rel error %.2e, %.1f s", results.size(), worst, elapsed) + failed};
}

Outcome sa_block_oracle() {
  double worst = 0.0;
  std::size_t runs = 0;
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    for (auto variant : kVariants) {
      for (std::size_t k : {1u, 3u}) {
        for (bool softmax : {false, true}) {
          Rng rng(derive_seed(seed, k * 10 + softmax + 100 * static_cast<std::size_t>(variant)));
          const auto config = block_config(variant, k, softmax);
          auto weights = attention::SABlockWeights::init(config, rng);
          oracle::randomize(weights, rng);
          const Tensor x = normal_tensor({4, 4, 8}, 1.0, rng);
          const Tensor got = attention::sa_block_forward(x, config, weights, Mode::eval);
          const Tensor want = oracle::sa_block_reference(x, config, weights);
          if (got.shape() != want.shape()) return {false, "shape mismatch"};
          for (std::size_t i = 0; i < got.numel(); ++i) worst = std::max(worst, std::abs(got.data()[i] - want.data()[i]));
          ++runs;
        }
      }
    }
  }
  return {worst <= 1e-10, fmt("%zu block evaluations over 50 seeds, max abs diff %.2e", runs, worst)};
}

Outcome delta_laws() {
  Rng rng(3);
  std::size_t cases = 0, bad = 0;
  for (std::size_t k : {1u, 3u, 5u}) {
    const std::size_t m = k * k;
    for (std::size_t d : {1u, 2u, 4u, 8u}) {
      const std::size_t want[3] = {m, m * m, d + m * d};
      for (std::size_t v = 0; v < 3; ++v) {
        const Tensor rows = normal_tensor({m, d}, 1.0, rng), other = normal_tensor({m, d}, 1.0, rng);
        const Tensor center = normal_tensor({d}, 1.0, rng);
        bad += attention::delta_length(kVariants[v], m, d) != want[v];
        bad += attention::compute_delta(kVariants[v], rows, other, center).numel() != want[v];
        ++cases;
      }
    }
  }
  return {bad == 0, fmt("%zu (variant, k, d) cases, %zu mismatches", cases, bad)};
}

Outcome uniform_alpha() {
  double worst = 0.0;
  std::size_t runs = 0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    for (auto variant : kVariants) {
      for (std::size_t k : {1u, 3u, 5u}) {
        for (bool softmax : {false, true}) {
          Rng rng(derive_seed(seed, 7 * k + softmax));
          const auto config = block_config(variant, k, softmax);
          auto weights = attention::SABlockWeights::init(config, rng);
          oracle::randomize(weights, rng);
          const double m = static_cast<double>(k * k);
          for (double& v : weights.alpha_w2.mutable_data()) v = 0.0;
          // With a softmax any constant logit gives 1/m; without one the bias is 1/m itself.
          for (double& v : weights.alpha_b2.mutable_data()) v = softmax ? 0.3 : 1.0 / m;
          const std::size_t n = 5;
          const Tensor x = normal_tensor({1, n, n, 8}, 1.0, rng);
          const Tensor y = attention::sa_aggregate(x, config, weights);
          const Tensor beta = ops::linear(x, weights.beta_w, weights.beta_b);
          const long r = static_cast<long>(k / 2);
          for (long i = 0; i < static_cast<long>(n); ++i)
            for (long j = 0; j < static_cast<long>(n); ++j)
              for (std::size_t c = 0; c < config.reduced_dim; ++c) {
                double sum = 0.0;
                for (long di = -r; di <= r; ++di)
                  for (long dj = -r; dj <= r; ++dj) {
                    const long ii = i + di, jj = j + dj;
                    if (ii < 0 || jj < 0 || ii >= static_cast<long>(n) || jj >= static_cast<long>(n)) continue;
                    sum += beta.at({0, static_cast<std::size_t>(ii), static_cast<std::size_t>(jj), c});
                  }
                const double got = y.at({0, static_cast<std::size_t>(i), static_cast<std::size_t>(j), c});
                worst = std::max(worst, std::abs(got - sum / m));
              }
          ++runs;
        }
      }
    }
  }
  return {worst <= 1e-14, fmt("%zu configurations, max abs diff %.2e (zero-padded footprint, divisor m)", runs, worst)};
}

Outcome full_scale_shapes() {
  const auto config = tnet::TNetConfig::full_scale();
  tnet::TNet net(config);
  tnet::ShapeTrace trace;
  const Tensor logits =
      net.logits(Tensor::zeros({1, config.input_size[0], config.input_size[1], 3}), Mode::eval, &trace);
  const tnet::ShapeTrace want{{112, 112, 64}, {56, 56, 256}, {28, 28, 512}, {14, 14, 1024}, {7, 7, 2048}, {7}};
  std::string text;
  for (const auto& s : trace) {
    std::string part;
    for (std::size_t e : s) part += (part.empty() ? "" : "x") + std::to_string(e);
    text += (text.empty() ? "" : " -> ") + part;
  }
  std::size_t blocks = 0;
  for (std::size_t b : config.sa_blocks_per_stage) blocks += b;
  const bool pass = trace == want && logits.shape() == Shape{1, 7} && blocks == 19;
  return {pass, text + fmt(", %zu SA blocks", blocks)};
}

Outcome fusion_oracle() {
  const auto table = fusion::MaskTable::standard();
  bool masks = true;
  for (std::size_t r = 0; r < 3; ++r)
    for (std::size_t c = 0; c < 7; ++c) {
      masks = masks && table.w_s[r][c] == oracle::kWs[r][c] && table.t[r][c] == oracle::kT[r][c];
    }
  masks = masks && table.threshold == 0.9999;
  Rng rng(2024);
  std::size_t mismatches = 0, applied = 0, not_applied = 0;
  std::set<std::pair<std::size_t, std::size_t>> pairs;
  const int n = 3000;
  for (int trial = 0; trial < n; ++trial) {
    std::array<double, 3> m{};
    if (trial % 2 == 0) {
      const std::size_t top = rng.index(3);
      const double conf = 0.9999 + rng.uniform(-2e-4, 2e-4);
      const double split = rng.uniform();
      m[top] = conf;
      m[(top + 1) % 3] = (1.0 - conf) * split;
      m[(top + 2) % 3] = (1.0 - conf) * (1.0 - split);
    } else {
      double total = 0.0;
      for (double& v : m) total += (v = rng.uniform());
      for (double& v : m) v /= total;
    }
    std::array<double, 7> p{};
    for (double& v : p) v = rng.bernoulli(0.2) ? 0.0 : rng.uniform();
    const auto got = fusion::fuse({m}, {p}, table);
    const auto want = oracle::fuse_literal(m, p);
    mismatches += got.pdv.p != want.pdv || got.applied_t != want.applied_t || got.fallback != want.fallback ||
                  got.c_minus != static_cast<std::size_t>(want.c_minus) ||
                  got.c_plus != static_cast<std::size_t>(want.c_plus);
    (got.applied_t ? applied : not_applied)++;
    pairs.insert({got.c_minus, got.c_plus});
  }
  std::size_t distinct = 0;
  for (const auto& [lo, hi] : pairs) distinct += lo != hi;
  const bool pass = masks && mismatches == 0 && distinct == 6 && applied > 0 && not_applied > 0;
  return {pass, fmt("%d cases, %zu mismatches, %zu/6 (c-,c+) pairs, T applied %zu / not %zu, masks %s", n, mismatches,
                    distinct, applied, not_applied, masks ? "exact" : "DIFFER")};
}

Outcome flow_fidelity() {
  const long radius = static_cast<long>(fpv::FlowParams{}.search_radius);
  const std::size_t n = 48;
  double worst = 0.0, total = 0.0, zero_max = 0.0;
  std::size_t cases = 0;
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    Rng rng(seed);
    const Tensor a = oracle::textured_image(n, n, rng);
    for (long dy = -radius; dy <= radius; ++dy)
      for (long dx = -radius; dx <= radius; ++dx) {
        const auto f = fpv::compute_flow(a, oracle::shifted(a, dx, dy));
        // Pixels whose match falls outside the frame have no ground truth.
        double epe = 0.0;
        std::size_t valid = 0;
        for (std::size_t y = 0; y < n; ++y)
          for (std::size_t x = 0; x < n; ++x) {
            const long ty = static_cast<long>(y) + dy, tx = static_cast<long>(x) + dx;
            if (ty < 0 || tx < 0 || ty >= static_cast<long>(n) || tx >= static_cast<long>(n)) continue;
            epe += std::hypot(f.u(y, x) - static_cast<double>(dx), f.v(y, x) - static_cast<double>(dy));
            ++valid;
          }
        epe /= static_cast<double>(valid);
        worst = std::max(worst, epe);
        total += epe;
        ++cases;
      }
    const auto still = fpv::compute_flow(a, a);
    for (double v : still.uv.data()) zero_max = std::max(zero_max, std::abs(v));
  }
  const bool pass = worst <= 0.5 && zero_max <= 0.1;
  return {pass, fmt("%zu shifts within +-%ld px: mean EPE %.3f, worst %.3f; zero-motion max |flow| %.3f", cases, radius,
                    total / static_cast<double>(cases), worst, zero_max)};
}

const std::vector<std::uint64_t> kSeeds{1, 2, 3};

fs::path tpv_dir(std::uint64_t seed) { return work_dir() / ("tpv_seed" + std::to_string(seed)); }

Outcome synthetic_tpv() {
  std::size_t good = 0;
  double slowest = 0.0;
  std::string detail;
  for (std::uint64_t seed : kSeeds) {
    const auto start = std::chrono::steady_clock::now();
    cli({"train-tpv", "--seed", std::to_string(seed), "--out", tpv_dir(seed).string(), "--overwrite"});
    slowest = std::max(slowest, seconds_since(start));
    const double top1 = read_report(tpv_dir(seed)).at("top1").get<double>();
    good += top1 >= 0.80;
    detail += fmt("seed %llu top1 %.3f; ", static_cast<unsigned long long>(seed), top1);
  }
  return {good >= 2 && slowest <= 1800.0, detail + fmt("%zu/3 seeds >= 0.80, slowest %.0f s", good, slowest)};
}

Outcome synthetic_fpv() {
  const fs::path dir = work_dir() / "fpv";
  cli({"train-fpv", "--seed", "1", "--out", dir.string(), "--overwrite"});
  const auto report = read_report(dir);
  const double top1 = report.at("top1").get<double>();
  const double mirror = report.at("metrics").at("mirror_consistency").get<double>();
  return {top1 >= 0.90 && mirror >= 0.90, fmt("test top1 %.3f, mirrored turn consistency %.3f", top1, mirror)};
}

Outcome fusion_benefit() {
  bool pass = true;
  std::size_t total_before = 0, total_after = 0;
  std::string detail;
  for (std::uint64_t seed : kSeeds) {
    if (!fs::exists(tpv_dir(seed) / "model.ckpt")) {
      cli({"train-tpv", "--seed", std::to_string(seed), "--out", tpv_dir(seed).string(), "--overwrite"});
    }
    const fs::path out = work_dir() / ("fuse_seed" + std::to_string(seed));
    cli({"fuse-eval", "--seed", std::to_string(seed), "--out", out.string(), "--overwrite", "--tpv-model",
         tpv_dir(seed).string(), "--fpv-accuracy", "0.95"});
    const auto fused = read_report(out), tpv = read_report(out / "tpv");
    const double tpv_top1 = tpv.at("top1").get<double>(), fused_top1 = fused.at("top1").get<double>();
    const std::size_t before = turn_confusions(tpv), after = turn_confusions(fused);
    pass = pass && fused_top1 >= tpv_top1 && after <= before;
    total_before += before;
    total_after += after;
    detail += fmt("seed %llu top1 %.3f -> %.3f, 2/3 confusions %zu -> %zu; ", static_cast<unsigned long long>(seed),
                  tpv_top1, fused_top1, before, after);
  }
  pass = pass && total_after < total_before;
  return {pass, detail + fmt("total 2/3 confusions %zu -> %zu", total_before, total_after)};
}

// Every file under `a` has a byte-identical twin under `b` and vice versa.
bool same_tree(const fs::path& a, const fs::path& b, std::string& diff) {
  std::set<fs::path> names;
  for (const fs::path& root : {a, b}) {
    for (const auto& e : fs::recursive_directory_iterator(root)) {
      if (e.is_regular_file()) names.insert(fs::relative(e.path(), root));
    }
  }
  for (const auto& name : names) {
    if (!fs::exists(a / name) || !fs::exists(b / name) || read_file(a / name) != read_file(b / name)) {
      diff = name.string();
      return false;
    }
  }
  return !names.empty();
}

Outcome determinism() {
  const fs::path dir = work_dir() / "determinism";
  fs::remove_all(dir);
  fs::create_directories(dir);
  const fs::path config = dir / "small.json";
  write_file_atomic(config, R"({
  "dataset": {"train_per_class": 3, "test_per_class": 2,
              "sequence_train_per_class": 2, "sequence_test_per_class": 2},
  "training": {"epochs": 1, "batch_size": 4}
})");
  const std::string cfg = config.string();
  struct Step {
    std::string name;
    std::vector<std::string> extra;
  };
  // Models and data from run "a" feed the later commands of both runs.
  const fs::path a = dir / "a";
  const std::vector<Step> steps{
      {"synth-gen", {}},
      {"train-tpv", {}},
      {"train-fpv", {}},
      {"eval-tpv", {"--model", (a / "train-tpv").string()}},
      {"eval-tpv", {"--model", (a / "train-tpv").string(), "--data", (a / "synth-gen").string()}},
      {"eval-fpv", {"--model", (a / "train-fpv").string()}},
      {"fuse-eval", {"--tpv-model", (a / "train-tpv").string()}},
      {"fuse-eval", {"--tpv-model", (a / "train-tpv").string(), "--fpv-model", (a / "train-fpv").string()}},
      {"flow", {}},
      {"gradcheck", {"--seeds", "2", "--filter", "linear"}},
  };
  std::string detail;
  bool pass = true;
  for (std::size_t i = 0; i < steps.size(); ++i) {
    const auto& step = steps[i];
    const std::string tag = i < 3 ? step.name : step.name + "-" + std::to_string(i);
    for (const char* run : {"a", "b"}) {
      std::vector<std::string> args{step.name, "--seed", "7", "--config", cfg, "--out", (dir / run / tag).string()};
      if (step.name == "gradcheck") args = {step.name, "--seed", "7", "--out", (dir / run / tag).string()};
      args.insert(args.end(), step.extra.begin(), step.extra.end());
      cli(args);
    }
    std::string diff;
    const bool same = same_tree(dir / "a" / tag, dir / "b" / tag, diff);
    pass = pass && same;
    detail += tag + (same ? " ok; " : " DIFFERS at " + diff + "; ");
  }
  return {pass, detail};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"gradient-suite", gradient_suite},   {"sa-block-oracle", sa_block_oracle},
      {"delta-length-laws", delta_laws},    {"uniform-alpha-pooling", uniform_alpha},
      {"full-scale-shape-trace", full_scale_shapes},  {"fusion-oracle", fusion_oracle},
      {"flow-fidelity", flow_fidelity},     {"synthetic-tpv", synthetic_tpv},
      {"synthetic-fpv", synthetic_fpv},     {"fusion-benefit", fusion_benefit},
      {"cli-determinism", determinism},
  };
  // Optional arguments select criteria by number.
  std::set<std::size_t> selected;
  for (int i = 1; i < argc; ++i) selected.insert(std::stoul(argv[i]));
  fs::create_directories(work_dir());
  std::string summary;
  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    if (!selected.empty() && !selected.count(i + 1)) continue;
    const auto& [name, check] = criteria[i];
    const auto start = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = check();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failures += !o.pass;
    const std::string line = fmt("%s %zu %s [%.1f s]: ", o.pass ? "PASS" : "FAIL", i + 1, name.c_str(),
                                 seconds_since(start)) + o.detail;
    std::printf("%s\n", line.c_str());
    std::fflush(stdout);
    summary += line + "\n";
  }
  write_file_atomic(work_dir() / "results.txt", summary);
  return failures == 0 ? 0 : 1;
}
