#include "crossing/tnet.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include "crossing/errors.hpp"
#include "crossing/image.hpp"
#include "crossing/tape.hpp"

namespace crossing::tnet {

namespace {

constexpr std::array<std::string_view, kNumIntersectionClasses> kClassNames = {
    "go straight",
    "turn right",
    "turn left",
    "right facing T-junction",
    "left facing T-junction",
    "bottom facing T-junction",
    "crossroad",
};

std::size_t argmax_row(std::span<const double> row) {
  std::size_t best = 0;
  for (std::size_t j = 1; j < row.size(); ++j) {
    if (row[j] > row[best]) best = j;
  }
  return best;
}

}  // namespace

std::string_view intersection_class_name(std::size_t label) {
  if (label < 1 || label > kNumIntersectionClasses) throw ConfigError("intersection label out of range");
  return kClassNames[label - 1];
}

bool IntersectionPDV::valid() const {
  double s = 0.0;
  for (double v : p) {
    if (!std::isfinite(v) || v < 0.0) return false;
    s += v;
  }
  return std::abs(s - 1.0) <= 1e-6;
}

std::size_t IntersectionPDV::argmax() const { return argmax_row(p); }

std::size_t reduced_dim_for(std::size_t channels) {
  return std::min(channels, std::max<std::size_t>(4, channels / 4));
}

TNetConfig TNetConfig::full_scale() {
  TNetConfig c;
  c.input_size = {224, 224};
  c.stage_channels = {64, 256, 512, 1024, 2048};
  c.sa_blocks_per_stage = {2, 3, 4, 6, 4};
  return c;
}

TNetConfig TNetConfig::toy() { return TNetConfig{}; }

void TNetConfig::validate() const {
  if (stage_channels.empty()) throw ConfigError("tnet: at least one stage is required");
  if (stage_channels.size() != sa_blocks_per_stage.size()) {
    throw ConfigError("tnet: stage_channels has " + std::to_string(stage_channels.size()) +
                      " entries but sa_blocks_per_stage has " + std::to_string(sa_blocks_per_stage.size()));
  }
  for (std::size_t c : stage_channels) {
    if (c == 0) throw ConfigError("tnet: stage channels must be positive");
  }
  if (footprint_k % 2 == 0) throw ConfigError("tnet: footprint_k must be odd");
  if (num_classes < 2) throw ConfigError("tnet: num_classes must be at least 2");
  const std::size_t factor = std::size_t{1} << stage_channels.size();
  for (std::size_t e : input_size) {
    if (e == 0 || e % factor != 0) {
      throw ConfigError("tnet: input extent " + std::to_string(e) + " must be a positive multiple of " +
                        std::to_string(factor) + " so every transition can halve it");
    }
  }
}

std::vector<Shape> TNetConfig::stage_shapes() const {
  validate();
  std::vector<Shape> out;
  std::size_t h = input_size[0], w = input_size[1];
  for (std::size_t c : stage_channels) {
    h /= 2;
    w /= 2;
    out.push_back({h, w, c});
  }
  return out;
}

attention::SABlockConfig TNetConfig::block_config(std::size_t stage) const {
  attention::SABlockConfig b;
  b.channels_in = stage_channels.at(stage);
  b.reduced_dim = reduced_dim_for(b.channels_in);
  b.footprint_k = footprint_k;
  b.variant = variant;
  return b;
}

nlohmann::json TNetConfig::to_json() const {
  return nlohmann::json{
      {"input_size", {input_size[0], input_size[1]}},
      {"stage_channels", stage_channels},
      {"sa_blocks_per_stage", sa_blocks_per_stage},
      {"variant", attention::to_string(variant)},
      {"footprint_k", footprint_k},
      {"num_classes", num_classes},
      {"seed", seed},
  };
}

TNetConfig TNetConfig::from_json(const nlohmann::json& j) {
  static const std::set<std::string> keys = {"input_size", "stage_channels", "sa_blocks_per_stage", "variant",
                                             "footprint_k", "num_classes", "seed"};
  if (!j.is_object()) throw ConfigError("tnet config: expected a JSON object");
  for (const auto& [key, _] : j.items()) {
    if (!keys.count(key)) throw ConfigError("tnet config: unknown key '" + key + "'");
  }
  for (const auto& key : keys) {
    if (!j.contains(key)) throw ConfigError("tnet config: missing key '" + key + "'");
  }
  TNetConfig c;
  try {
    const auto size = j.at("input_size").get<std::vector<std::size_t>>();
    if (size.size() != 2) throw ConfigError("tnet config: input_size must be [height, width]");
    c.input_size = {size[0], size[1]};
    c.stage_channels = j.at("stage_channels").get<std::vector<std::size_t>>();
    c.sa_blocks_per_stage = j.at("sa_blocks_per_stage").get<std::vector<std::size_t>>();
    c.variant = attention::parse_variant(j.at("variant").get<std::string>());
    c.footprint_k = j.at("footprint_k").get<std::size_t>();
    c.num_classes = j.at("num_classes").get<std::size_t>();
    c.seed = j.at("seed").get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("tnet config: ") + e.what());
  }
  c.validate();
  return c;
}

TransitionWeights TransitionWeights::init(std::size_t channels_in, std::size_t channels_out, Rng& rng) {
  TransitionWeights t;
  t.gamma = Tensor::filled({channels_in}, 1.0);
  t.beta = Tensor::zeros({channels_in});
  t.norm_state = BatchNormState::make(channels_in);
  t.w = he_normal({channels_in, channels_out}, channels_in, rng);
  t.b = Tensor::zeros({channels_out});
  return t;
}

void TransitionWeights::register_parameters(ParameterSet& params, const std::string& prefix) {
  params.add(prefix + ".norm.gamma", gamma);
  params.add(prefix + ".norm.beta", beta);
  params.add(prefix + ".linear.w", w);
  params.add(prefix + ".linear.b", b);
  params.add_buffer(prefix + ".norm.running_mean", norm_state.running_mean);
  params.add_buffer(prefix + ".norm.running_var", norm_state.running_var);
}

Tensor transition_forward(const Tensor& x, TransitionWeights& weights, Mode mode) {
  if (x.rank() != 4) throw ShapeError("transition: expected (N,H,W,C), got " + shape_string(x.shape()));
  if (x.extent(1) % 2 != 0 || x.extent(2) % 2 != 0) {
    throw ShapeError("transition: odd spatial extents in " + shape_string(x.shape()));
  }
  Tensor y = ops::batch_norm(x, weights.gamma, weights.beta, weights.norm_state, mode);
  y = ops::maxpool2x2_stride2(ops::relu(y));
  return ops::linear(y, weights.w, weights.b);
}

TNet::TNet(TNetConfig config) : config_(std::move(config)) {
  config_.validate();
  Rng rng(config_.seed);
  const std::size_t c0 = config_.stage_channels.front();
  stem_w_ = he_normal({3, 3, 3, c0}, 27, rng);
  stem_b_ = Tensor::zeros({c0});
  params_.add("stem.w", stem_w_);
  params_.add("stem.b", stem_b_);
  std::size_t channels = c0;
  for (std::size_t s = 0; s < config_.stage_channels.size(); ++s) {
    const std::string stage = "stage" + std::to_string(s + 1);
    transitions_.push_back(TransitionWeights::init(channels, config_.stage_channels[s], rng));
    transitions_.back().register_parameters(params_, stage + ".transition");
    channels = config_.stage_channels[s];
    blocks_.emplace_back();
    for (std::size_t b = 0; b < config_.sa_blocks_per_stage[s]; ++b) {
      blocks_.back().emplace_back(config_.block_config(s), rng);
      blocks_.back().back().register_parameters(params_, stage + ".block" + std::to_string(b + 1));
    }
  }
  head_w_ = normal_tensor({channels, config_.num_classes}, std::sqrt(1.0 / static_cast<double>(channels)), rng);
  head_b_ = Tensor::zeros({config_.num_classes});
  params_.add("head.w", head_w_);
  params_.add("head.b", head_b_);
}

Tensor TNet::logits(const Tensor& images, Mode mode, ShapeTrace* trace) {
  if (images.rank() != 4 || images.extent(1) != config_.input_size[0] ||
      images.extent(2) != config_.input_size[1] || images.extent(3) != 3) {
    throw ShapeError("tnet: expected (N," + std::to_string(config_.input_size[0]) + "," +
                     std::to_string(config_.input_size[1]) + ",3) images, got " + shape_string(images.shape()));
  }
  Tensor x = ops::conv2d(images, stem_w_, stem_b_, {.stride = 1, .pad = 1});
  for (std::size_t s = 0; s < transitions_.size(); ++s) {
    x = transition_forward(x, transitions_[s], mode);
    for (auto& block : blocks_[s]) x = block.forward(x, mode);
    if (trace) trace->push_back({x.extent(1), x.extent(2), x.extent(3)});
  }
  Tensor out = ops::linear(ops::global_avg_pool(x), head_w_, head_b_);
  if (trace) trace->push_back({out.extent(1)});
  return out;
}

std::vector<IntersectionPDV> TNet::classify_batch(const Tensor& images) {
  if (config_.num_classes != kNumIntersectionClasses) {
    throw ConfigError("tnet: intersection PDVs need a 7-class head");
  }
  Tensor probs = ops::softmax(logits(images, Mode::eval));
  std::vector<IntersectionPDV> out(images.extent(0));
  const auto ps = probs.data();
  for (std::size_t b = 0; b < out.size(); ++b) {
    std::copy(ps.begin() + b * kNumIntersectionClasses, ps.begin() + (b + 1) * kNumIntersectionClasses,
              out[b].p.begin());
  }
  return out;
}

IntersectionPDV TNet::classify(const Tensor& image) {
  if (image.rank() != 3) throw ShapeError("tnet: expected (H,W,3) image, got " + shape_string(image.shape()));
  return classify_batch(ops::reshape(image, {1, image.extent(0), image.extent(1), image.extent(2)})).front();
}

void TNet::save(const std::filesystem::path& path) const {
  const auto state = params_.state();
  save_checkpoint(path, state);
}

void TNet::load(const std::filesystem::path& path) {
  const auto entries = load_checkpoint(path);
  params_.load_state(entries);
}

Tensor stack_images(const std::vector<const Tensor*>& images) {
  if (images.empty()) throw ShapeError("stack: no images");
  const Shape& first = images.front()->shape();
  std::vector<double> data;
  data.reserve(images.size() * images.front()->numel());
  for (const Tensor* img : images) {
    if (img->shape() != first) {
      throw ShapeError("stack: mixed image shapes " + shape_string(first) + " and " + shape_string(img->shape()));
    }
    data.insert(data.end(), img->data().begin(), img->data().end());
  }
  Shape shape{images.size()};
  shape.insert(shape.end(), first.begin(), first.end());
  return Tensor(std::move(shape), std::move(data));
}

EpochMetrics tnet_train_epoch(TNet& model, const std::vector<LabeledImage>& split, Sgd& optimizer,
                              const TrainOptions& options, Rng& rng) {
  if (split.empty()) throw DataError("tnet train: empty split");
  const std::size_t classes = model.config().num_classes;
  for (const auto& s : split) {
    if (s.label < 1 || s.label > classes) {
      throw DataError("tnet train: label " + std::to_string(s.label) + " outside 1.." + std::to_string(classes));
    }
  }
  std::vector<std::size_t> order(split.size());
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng.engine());

  double loss_sum = 0.0;
  std::size_t correct = 0;
  const std::size_t batch = std::max<std::size_t>(1, options.batch_size);
  for (std::size_t start = 0; start < order.size(); start += batch) {
    const std::size_t end = std::min(order.size(), start + batch);
    std::vector<Tensor> mirrored;
    mirrored.reserve(end - start);
    std::vector<const Tensor*> images;
    std::vector<std::size_t> labels;
    for (std::size_t i = start; i < end; ++i) {
      const auto& sample = split[order[i]];
      std::size_t label = sample.label - 1;
      if (options.mirror_map && rng.bernoulli(0.5)) {
        mirrored.push_back(image::mirror_horizontal(sample.image));
        images.push_back(&mirrored.back());
        label = options.mirror_map->at(label);
      } else {
        images.push_back(&sample.image);
      }
      labels.push_back(label);
    }
    Tensor input = stack_images(images);

    Tape tape;
    Tensor logits, loss;
    {
      TapeScope scope(tape);
      logits = model.logits(input, Mode::train);
      loss = ops::softmax_cross_entropy(logits, labels);
    }
    if (!std::isfinite(loss.item())) {
      throw NumericError("tnet train: non-finite loss at batch starting " + std::to_string(start));
    }
    model.parameters().zero_grad();
    backward(tape, loss);
    optimizer.step();

    loss_sum += loss.item() * static_cast<double>(labels.size());
    const auto zs = logits.data();
    for (std::size_t b = 0; b < labels.size(); ++b) {
      if (argmax_row(zs.subspan(b * classes, classes)) == labels[b]) ++correct;
    }
  }
  return {loss_sum / static_cast<double>(split.size()),
          static_cast<double>(correct) / static_cast<double>(split.size())};
}

std::vector<IntersectionPDV> predict_all(TNet& model, const std::vector<LabeledImage>& split,
                                         std::size_t batch_size) {
  std::vector<IntersectionPDV> out;
  out.reserve(split.size());
  for (std::size_t start = 0; start < split.size(); start += batch_size) {
    const std::size_t end = std::min(split.size(), start + batch_size);
    std::vector<const Tensor*> images;
    for (std::size_t i = start; i < end; ++i) images.push_back(&split[i].image);
    auto pdvs = model.classify_batch(stack_images(images));
    out.insert(out.end(), pdvs.begin(), pdvs.end());
  }
  return out;
}

}  // namespace crossing::tnet
