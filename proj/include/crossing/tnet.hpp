#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string_view>
#include <vector>

#include "crossing/attention.hpp"
#include "crossing/nn.hpp"
#include "json.hpp"

namespace crossing::tnet {

inline constexpr std::size_t kNumIntersectionClasses = 7;

// 1-based labels in the fixed class order.
std::string_view intersection_class_name(std::size_t label);

/// Probability vector over the seven intersection classes.
struct IntersectionPDV {
  std::array<double, kNumIntersectionClasses> p{};

  // Non-negative, finite, sums to 1 within 1e-6.
  bool valid() const;
  std::size_t argmax() const;  // 0-based, lowest index wins ties
};

/// Reduced attention width used for a stage with `channels` features.
std::size_t reduced_dim_for(std::size_t channels);

struct TNetConfig {
  std::array<std::size_t, 2> input_size{64, 64};  // height, width
  std::vector<std::size_t> stage_channels{8, 16, 32, 64, 64};
  std::vector<std::size_t> sa_blocks_per_stage{1, 1, 1, 1, 1};
  attention::DeltaVariant variant = attention::DeltaVariant::concat;
  std::size_t footprint_k = 3;
  std::size_t num_classes = kNumIntersectionClasses;
  std::uint64_t seed = 1;

  // 224x224 input, five stages to 7x7x2048, 19 attention blocks.
  static TNetConfig full_scale();
  static TNetConfig toy();

  void validate() const;
  // Stage outputs (H,W,C) implied by halving, without building the network.
  std::vector<Shape> stage_shapes() const;
  attention::SABlockConfig block_config(std::size_t stage) const;

  nlohmann::json to_json() const;
  // Requires exactly the keys written by to_json().
  static TNetConfig from_json(const nlohmann::json& j);
};

/// Down-sampling layer: batch norm, ReLU, 2x2 max pool (stride 2), then a
/// linear map widening the channels.
struct TransitionWeights {
  Tensor gamma, beta;
  BatchNormState norm_state;
  Tensor w, b;

  static TransitionWeights init(std::size_t channels_in, std::size_t channels_out, Rng& rng);
  void register_parameters(ParameterSet& params, const std::string& prefix);
};

// x is (N,H,W,C) with even H and W; returns (N,H/2,W/2,C_out).
Tensor transition_forward(const Tensor& x, TransitionWeights& weights, Mode mode);

/// Shapes recorded after each transition and at the output, for tracing.
using ShapeTrace = std::vector<Shape>;

/// The intersection classifier: conv stem, five transitions interleaved with
/// attention blocks, global average pooling and a linear head.
class TNet {
 public:
  explicit TNet(TNetConfig config);
  TNet(const TNet&) = delete;
  TNet& operator=(const TNet&) = delete;

  const TNetConfig& config() const { return config_; }
  ParameterSet& parameters() { return params_; }

  // images (N,H,W,3) -> logits (N,num_classes).
  Tensor logits(const Tensor& images, Mode mode, ShapeTrace* trace = nullptr);
  // Eval-mode inference on one (H,W,3) image.
  IntersectionPDV classify(const Tensor& image);
  std::vector<IntersectionPDV> classify_batch(const Tensor& images);

  void save(const std::filesystem::path& path) const;
  void load(const std::filesystem::path& path);

 private:
  TNetConfig config_;
  Tensor stem_w_, stem_b_;
  std::vector<TransitionWeights> transitions_;
  std::vector<std::vector<attention::SABlock>> blocks_;
  Tensor head_w_, head_b_;
  ParameterSet params_;
};

/// One labelled (H,W,3) image with a 1-based class label.
struct LabeledImage {
  Tensor image;
  std::size_t label = 0;
};

struct TrainOptions {
  std::size_t batch_size = 16;
  // Maps a 0-based class to its horizontal-mirror class; enables random
  // mirror augmentation when set.
  std::optional<std::vector<std::size_t>> mirror_map;
};

struct EpochMetrics {
  double mean_loss = 0.0;
  double top1 = 0.0;
};

// Stacks (H,W,C) images into one (N,H,W,C) batch.
Tensor stack_images(const std::vector<const Tensor*>& images);

/// One pass of minibatch SGD over `split` in a seeded random order.
/// Throws NumericError when the loss becomes non-finite.
EpochMetrics tnet_train_epoch(TNet& model, const std::vector<LabeledImage>& split, Sgd& optimizer,
                              const TrainOptions& options, Rng& rng);

// Eval-mode predictions (0-based) for every image, in batches.
std::vector<IntersectionPDV> predict_all(TNet& model, const std::vector<LabeledImage>& split,
                                         std::size_t batch_size = 32);

}  // namespace crossing::tnet
