#include "crossing/fpv.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <set>

#include "crossing/errors.hpp"
#include "crossing/image.hpp"
#include "crossing/ops.hpp"
#include "crossing/parallel.hpp"
#include "crossing/tape.hpp"
#include "crossing/tnet.hpp"

namespace crossing::fpv {

namespace {

constexpr std::array<std::string_view, kNumMotionClasses> kMotionNames = {"go straight", "turn right",
                                                                          "turn left"};

std::size_t argmax_row(std::span<const double> row) {
  std::size_t best = 0;
  for (std::size_t j = 1; j < row.size(); ++j) {
    if (row[j] > row[best]) best = j;
  }
  return best;
}

Tensor gray_to_rgb(const Tensor& gray) {
  std::vector<double> rgb(gray.numel() * 3);
  const auto g = gray.data();
  for (std::size_t i = 0; i < g.size(); ++i) rgb[3 * i] = rgb[3 * i + 1] = rgb[3 * i + 2] = g[i];
  return Tensor({gray.extent(0), gray.extent(1), 3}, std::move(rgb));
}

}  // namespace

std::string_view motion_class_name(std::size_t index) {
  if (index >= kNumMotionClasses) throw ConfigError("motion class out of range");
  return kMotionNames[index];
}

std::size_t mirror_motion(std::size_t index) {
  if (index >= kNumMotionClasses) throw ConfigError("motion class out of range");
  return index == 0 ? 0 : 3 - index;
}

bool MotionPDV::valid() const {
  double s = 0.0;
  for (double v : p) {
    if (!std::isfinite(v) || v < 0.0) return false;
    s += v;
  }
  return std::abs(s - 1.0) <= 1e-6;
}

std::size_t MotionPDV::argmax() const { return argmax_row(p); }

std::size_t MotionPDV::argmin() const {
  std::size_t best = 0;
  for (std::size_t j = 1; j < p.size(); ++j) {
    if (p[j] < p[best]) best = j;
  }
  return best;
}

RecurrentState RecurrentState::zeros(std::size_t hidden, std::size_t batch) {
  if (batch == 0) return {Tensor::zeros({hidden}), Tensor::zeros({hidden})};
  return {Tensor::zeros({batch, hidden}), Tensor::zeros({batch, hidden})};
}

LstmWeights LstmWeights::init(std::size_t input, std::size_t hidden, Rng& rng) {
  LstmWeights l;
  const double bound = 1.0 / std::sqrt(static_cast<double>(hidden));
  l.w = uniform_tensor({input + hidden, 4 * hidden}, -bound, bound, rng);
  std::vector<double> b(4 * hidden, 0.0);
  std::fill(b.begin() + static_cast<long>(hidden), b.begin() + static_cast<long>(2 * hidden), 1.0);
  l.b = Tensor({4 * hidden}, std::move(b));
  return l;
}

RecurrentState recurrent_step(const Tensor& x, const RecurrentState& state, const LstmWeights& weights) {
  const std::size_t hidden = weights.hidden_size();
  if (weights.w.rank() != 2 || weights.w.extent(1) != 4 * hidden || weights.w.extent(0) <= hidden) {
    throw ShapeError("lstm: weight " + shape_string(weights.w.shape()) + " does not match bias " +
                     shape_string(weights.b.shape()));
  }
  const bool single = x.rank() == 1;
  const std::size_t batch = single ? 1 : x.extent(0);
  const Shape state_shape = single ? Shape{hidden} : Shape{batch, hidden};
  if ((x.rank() != 1 && x.rank() != 2) || x.shape().back() != weights.input_size() ||
      state.h.shape() != state_shape || state.c.shape() != state_shape) {
    throw ShapeError("lstm: input " + shape_string(x.shape()) + " with state " + shape_string(state.h.shape()) +
                     "/" + shape_string(state.c.shape()) + " for weights " + shape_string(weights.w.shape()));
  }
  Tensor xb = single ? ops::reshape(x, {1, x.extent(0)}) : x;
  Tensor hb = single ? ops::reshape(state.h, {1, hidden}) : state.h;
  Tensor cb = single ? ops::reshape(state.c, {1, hidden}) : state.c;
  Tensor z = ops::linear(ops::concat({xb, hb}, 1), weights.w, weights.b);
  Tensor i = ops::sigmoid(ops::slice(z, 1, 0, hidden));
  Tensor f = ops::sigmoid(ops::slice(z, 1, hidden, hidden));
  Tensor g = ops::tanh(ops::slice(z, 1, 2 * hidden, hidden));
  Tensor o = ops::sigmoid(ops::slice(z, 1, 3 * hidden, hidden));
  Tensor c = ops::add(ops::hadamard(f, cb), ops::hadamard(i, g));
  Tensor h = ops::hadamard(o, ops::tanh(c));
  if (single) return {ops::reshape(h, {hidden}), ops::reshape(c, {hidden})};
  return {h, c};
}

void MotionNetConfig::validate() const {
  if (conv_channels.empty()) throw ConfigError("fpv: at least one conv layer is required");
  std::size_t extent = frame_size;
  for (std::size_t c : conv_channels) {
    if (c == 0) throw ConfigError("fpv: conv channels must be positive");
    extent = (extent + 1) / 2;
  }
  if (frame_size == 0 || extent == 0) throw ConfigError("fpv: frame_size too small");
  if (feature_width == 0 || hidden == 0) throw ConfigError("fpv: feature_width and hidden must be positive");
  if (flow.block % 2 == 0 || flow.levels == 0 || flow.search_radius == 0) {
    throw ConfigError("fpv: flow block must be odd, levels and search_radius positive");
  }
}

nlohmann::json MotionNetConfig::to_json() const {
  return nlohmann::json{
      {"frame_size", frame_size},
      {"conv_channels", conv_channels},
      {"feature_width", feature_width},
      {"hidden", hidden},
      {"use_flow", use_flow},
      {"flow", {{"levels", flow.levels}, {"block", flow.block}, {"search_radius", flow.search_radius}}},
      {"seed", seed},
  };
}

MotionNetConfig MotionNetConfig::from_json(const nlohmann::json& j) {
  static const std::set<std::string> keys = {"frame_size", "conv_channels", "feature_width", "hidden",
                                             "use_flow",   "flow",          "seed"};
  if (!j.is_object()) throw ConfigError("fpv config: expected a JSON object");
  for (const auto& [key, _] : j.items()) {
    if (!keys.count(key)) throw ConfigError("fpv config: unknown key '" + key + "'");
  }
  MotionNetConfig c;
  try {
    if (j.contains("frame_size")) c.frame_size = j.at("frame_size").get<std::size_t>();
    if (j.contains("conv_channels")) c.conv_channels = j.at("conv_channels").get<std::vector<std::size_t>>();
    if (j.contains("feature_width")) c.feature_width = j.at("feature_width").get<std::size_t>();
    if (j.contains("hidden")) c.hidden = j.at("hidden").get<std::size_t>();
    if (j.contains("use_flow")) c.use_flow = j.at("use_flow").get<bool>();
    if (j.contains("seed")) c.seed = j.at("seed").get<std::uint64_t>();
    if (j.contains("flow")) {
      const auto& f = j.at("flow");
      for (const auto& [key, _] : f.items()) {
        if (key != "levels" && key != "block" && key != "search_radius") {
          throw ConfigError("fpv config: unknown flow key '" + key + "'");
        }
      }
      if (f.contains("levels")) c.flow.levels = f.at("levels").get<std::size_t>();
      if (f.contains("block")) c.flow.block = f.at("block").get<std::size_t>();
      if (f.contains("search_radius")) c.flow.search_radius = f.at("search_radius").get<std::size_t>();
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("fpv config: ") + e.what());
  }
  c.validate();
  return c;
}

StepInputs prepare_inputs(const std::vector<Tensor>& frames, const MotionNetConfig& config) {
  if (frames.size() < 2) {
    throw DataError("fpv: a sequence needs at least 2 frames, got " + std::to_string(frames.size()));
  }
  for (const auto& f : frames) {
    if (f.rank() != 2 || f.extent(0) != config.frame_size || f.extent(1) != config.frame_size) {
      throw ShapeError("fpv: expected " + std::to_string(config.frame_size) + "x" +
                       std::to_string(config.frame_size) + " grayscale frames, got " + shape_string(f.shape()));
    }
  }
  StepInputs out(frames.size() - 1);
  if (!config.use_flow) {
    for (std::size_t t = 1; t < frames.size(); ++t) out[t - 1] = gray_to_rgb(frames[t]);
    return out;
  }
  parallel_for(out.size(), [&](std::size_t t) {
    out[t] = flow_to_color(compute_flow(frames[t], frames[t + 1], config.flow));
  });
  return out;
}

MotionNet::MotionNet(MotionNetConfig config) : config_(std::move(config)) {
  config_.validate();
  Rng rng(config_.seed);
  std::size_t channels = 3, extent = config_.frame_size;
  for (std::size_t l = 0; l < config_.conv_channels.size(); ++l) {
    const std::size_t out = config_.conv_channels[l];
    conv_w_.push_back(he_normal({3, 3, channels, out}, 9 * channels, rng));
    conv_b_.push_back(Tensor::zeros({out}));
    params_.add("conv" + std::to_string(l + 1) + ".w", conv_w_.back());
    params_.add("conv" + std::to_string(l + 1) + ".b", conv_b_.back());
    channels = out;
    extent = (extent + 1) / 2;
  }
  const std::size_t flat = extent * extent * channels;
  fc_w_ = he_normal({flat, config_.feature_width}, flat, rng);
  fc_b_ = Tensor::zeros({config_.feature_width});
  params_.add("fc.w", fc_w_);
  params_.add("fc.b", fc_b_);
  lstm_ = LstmWeights::init(config_.feature_width, config_.hidden, rng);
  params_.add("lstm.w", lstm_.w);
  params_.add("lstm.b", lstm_.b);
  head_w_ = normal_tensor({config_.hidden, kNumMotionClasses},
                          std::sqrt(1.0 / static_cast<double>(config_.hidden)), rng);
  head_b_ = Tensor::zeros({kNumMotionClasses});
  params_.add("head.w", head_w_);
  params_.add("head.b", head_b_);
}

Tensor MotionNet::features(const Tensor& images) {
  if (images.rank() != 4 || images.extent(1) != config_.frame_size || images.extent(2) != config_.frame_size ||
      images.extent(3) != 3) {
    throw ShapeError("fpv: expected (N," + std::to_string(config_.frame_size) + "," +
                     std::to_string(config_.frame_size) + ",3) inputs, got " + shape_string(images.shape()));
  }
  Tensor x = images;
  for (std::size_t l = 0; l < conv_w_.size(); ++l) {
    x = ops::relu(ops::conv2d(x, conv_w_[l], conv_b_[l], {.stride = 2, .pad = 1}));
  }
  x = ops::reshape(x, {x.extent(0), x.numel() / x.extent(0)});
  return ops::relu(ops::linear(x, fc_w_, fc_b_));
}

Tensor MotionNet::logits(const std::vector<Tensor>& steps) {
  if (steps.empty()) throw DataError("fpv: no steps");
  const std::size_t batch = steps.front().extent(0);
  RecurrentState state = RecurrentState::zeros(config_.hidden, batch);
  for (const auto& step : steps) {
    if (step.rank() == 0 || step.extent(0) != batch) {
      throw ShapeError("fpv: every step needs the same batch size " + std::to_string(batch));
    }
    state = recurrent_step(features(step), state, lstm_);
  }
  return ops::linear(state.h, head_w_, head_b_);
}

MotionPDV MotionNet::classify_inputs(const StepInputs& inputs) {
  std::vector<Tensor> steps;
  steps.reserve(inputs.size());
  for (const auto& img : inputs) steps.push_back(ops::reshape(img, {1, img.extent(0), img.extent(1), img.extent(2)}));
  Tensor probs = ops::softmax(logits(steps));
  MotionPDV pdv;
  std::copy(probs.data().begin(), probs.data().end(), pdv.p.begin());
  return pdv;
}

void MotionNet::save(const std::filesystem::path& path) const { save_checkpoint(path, params_.state()); }

void MotionNet::load(const std::filesystem::path& path) {
  const auto entries = load_checkpoint(path);
  params_.load_state(entries);
}

MotionPDV sequence_classify(const std::vector<Tensor>& frames, MotionNet& model) {
  return model.classify_inputs(prepare_inputs(frames, model.config()));
}

namespace {

// Stacks step t of every example in `members` into one (N,H,W,3) batch per step.
std::vector<Tensor> stack_steps(const std::vector<MotionExample>& split, const std::vector<std::size_t>& members) {
  const std::size_t steps = split[members.front()].inputs.size();
  std::vector<Tensor> out;
  out.reserve(steps);
  for (std::size_t t = 0; t < steps; ++t) {
    std::vector<const Tensor*> images;
    for (std::size_t m : members) images.push_back(&split[m].inputs[t]);
    out.push_back(tnet::stack_images(images));
  }
  return out;
}

}  // namespace

MotionEpochMetrics fpv_train_epoch(MotionNet& model, const std::vector<MotionExample>& split, Sgd& optimizer,
                                   const MotionTrainOptions& options, Rng& rng) {
  if (split.empty()) throw DataError("fpv train: empty split");
  for (const auto& ex : split) {
    if (ex.label >= kNumMotionClasses) throw DataError("fpv train: label " + std::to_string(ex.label) + " out of range");
    if (ex.inputs.empty()) throw DataError("fpv train: example without steps");
  }
  std::vector<std::size_t> order(split.size());
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng.engine());

  double loss_sum = 0.0;
  std::size_t correct = 0;
  const std::size_t batch = std::max<std::size_t>(1, options.batch_size);
  for (std::size_t start = 0; start < order.size(); start += batch) {
    const std::size_t end = std::min(order.size(), start + batch);
    std::map<std::size_t, std::vector<std::size_t>> groups;
    for (std::size_t i = start; i < end; ++i) groups[split[order[i]].inputs.size()].push_back(order[i]);

    Tape tape;
    Tensor loss;
    std::vector<std::pair<Tensor, std::vector<std::size_t>>> outputs;
    {
      TapeScope scope(tape);
      for (const auto& [_, members] : groups) {
        std::vector<std::size_t> labels;
        for (std::size_t m : members) labels.push_back(split[m].label);
        Tensor z = model.logits(stack_steps(split, members));
        Tensor part = ops::scale(ops::softmax_cross_entropy(z, labels),
                                 static_cast<double>(members.size()) / static_cast<double>(end - start));
        loss = loss.defined() ? ops::add(loss, part) : part;
        outputs.emplace_back(z, std::move(labels));
      }
    }
    if (!std::isfinite(loss.item())) {
      throw NumericError("fpv train: non-finite loss at batch starting " + std::to_string(start));
    }
    model.parameters().zero_grad();
    backward(tape, loss);
    optimizer.step();

    loss_sum += loss.item() * static_cast<double>(end - start);
    for (const auto& [z, labels] : outputs) {
      const auto zs = z.data();
      for (std::size_t b = 0; b < labels.size(); ++b) {
        if (argmax_row(zs.subspan(b * kNumMotionClasses, kNumMotionClasses)) == labels[b]) ++correct;
      }
    }
  }
  return {loss_sum / static_cast<double>(split.size()),
          static_cast<double>(correct) / static_cast<double>(split.size())};
}

std::vector<MotionPDV> predict_all(MotionNet& model, const std::vector<MotionExample>& split) {
  std::vector<MotionPDV> out;
  out.reserve(split.size());
  for (const auto& ex : split) out.push_back(model.classify_inputs(ex.inputs));
  return out;
}

}  // namespace crossing::fpv
