#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string_view>
#include <vector>

#include "crossing/flow.hpp"
#include "crossing/nn.hpp"
#include "crossing/random.hpp"
#include "json.hpp"

namespace crossing::fpv {

inline constexpr std::size_t kNumMotionClasses = 3;

// 0-based: go straight, turn right, turn left.
std::string_view motion_class_name(std::size_t index);
// Horizontal mirroring swaps the two turns.
std::size_t mirror_motion(std::size_t index);

/// Probability vector over the three ego-motion classes.
struct MotionPDV {
  std::array<double, kNumMotionClasses> p{};

  bool valid() const;
  // Ties resolve to the lowest index.
  std::size_t argmax() const;
  std::size_t argmin() const;
};

/// LSTM state; h and c are (hidden) or (N,hidden).
struct RecurrentState {
  Tensor h, c;

  static RecurrentState zeros(std::size_t hidden, std::size_t batch = 0);
};

/// Gate weights packed as [input, forget, candidate, output] blocks.
struct LstmWeights {
  Tensor w;  // (in + hidden, 4 * hidden), rows for x first, then h
  Tensor b;  // (4 * hidden)

  static LstmWeights init(std::size_t input, std::size_t hidden, Rng& rng);
  std::size_t input_size() const { return w.extent(0) - hidden_size(); }
  std::size_t hidden_size() const { return b.extent(0) / 4; }
};

/// i = sig(.), f = sig(.), g = tanh(.), o = sig(.) on [x, h] W + b;
/// c' = f * c + i * g; h' = o * tanh(c').
/// x is (in) with a rank-1 state or (N,in) with (N,hidden) state.
RecurrentState recurrent_step(const Tensor& x, const RecurrentState& state, const LstmWeights& weights);

struct MotionNetConfig {
  std::size_t frame_size = 48;                      // square input frames
  std::vector<std::size_t> conv_channels{8, 16, 16};  // 3x3 stride-2 layers
  std::size_t feature_width = 64;
  std::size_t hidden = 32;
  bool use_flow = true;  // false feeds raw frames (ablation)
  FlowParams flow;
  std::uint64_t seed = 1;

  void validate() const;
  nlohmann::json to_json() const;
  static MotionNetConfig from_json(const nlohmann::json& j);
};

/// Per-step network inputs for one sequence: (H,W,3) images, one per step.
using StepInputs = std::vector<Tensor>;

// Flow colour images between consecutive (H,W) frames, or the raw frames
// (from the second on, replicated to three channels) when use_flow is off.
// Frames must be frame_size square. Requires at least two frames.
StepInputs prepare_inputs(const std::vector<Tensor>& frames, const MotionNetConfig& config);

/// Convolutional per-step feature extractor, LSTM over the steps, linear
/// head on the final hidden state.
class MotionNet {
 public:
  explicit MotionNet(MotionNetConfig config);
  MotionNet(const MotionNet&) = delete;
  MotionNet& operator=(const MotionNet&) = delete;

  const MotionNetConfig& config() const { return config_; }
  ParameterSet& parameters() { return params_; }
  const LstmWeights& lstm() const { return lstm_; }

  // (N,H,W,3) -> (N,feature_width).
  Tensor features(const Tensor& images);
  // steps[t] is (N,H,W,3) for every t -> logits (N,3).
  Tensor logits(const std::vector<Tensor>& steps);

  MotionPDV classify_inputs(const StepInputs& inputs);

  void save(const std::filesystem::path& path) const;
  void load(const std::filesystem::path& path);

 private:
  MotionNetConfig config_;
  std::vector<Tensor> conv_w_, conv_b_;
  Tensor fc_w_, fc_b_;
  LstmWeights lstm_;
  Tensor head_w_, head_b_;
  ParameterSet params_;
};

// Full pipeline on raw (H,W) frames. Throws DataError for fewer than two frames.
MotionPDV sequence_classify(const std::vector<Tensor>& frames, MotionNet& model);

struct MotionExample {
  StepInputs inputs;
  std::size_t label = 0;  // 0-based motion class
};

struct MotionTrainOptions {
  std::size_t batch_size = 8;
};

struct MotionEpochMetrics {
  double mean_loss = 0.0;
  double top1 = 0.0;
};

/// One pass of minibatch SGD in a seeded order. Examples of different
/// lengths within a batch are processed as separate groups.
MotionEpochMetrics fpv_train_epoch(MotionNet& model, const std::vector<MotionExample>& split, Sgd& optimizer,
                                   const MotionTrainOptions& options, Rng& rng);

std::vector<MotionPDV> predict_all(MotionNet& model, const std::vector<MotionExample>& split);

}  // namespace crossing::fpv
