#pragma once

#include <cstddef>
#include <string>
#include <string_view>
#include <vector>

#include "crossing/nn.hpp"
#include "crossing/ops.hpp"
#include "crossing/random.hpp"
#include "crossing/tensor.hpp"

namespace crossing::attention {

/// How the footprint relation vector delta is built from phi/psi projections.
enum class DeltaVariant {
  star,    // [phi(x_i) . psi(x_j)] for j in R(i)            -> m values
  clique,  // [phi(x_j) . psi(x_k)] for j,k in R(i)           -> m*m values
  concat,  // [phi(x_i), psi(x_j) for j in R(i)]               -> d + m*d values
};

std::string to_string(DeltaVariant variant);
DeltaVariant parse_variant(std::string_view name);

std::size_t delta_length(DeltaVariant variant, std::size_t footprint_size, std::size_t dim);

struct Offset {
  long row = 0;
  long col = 0;
};

/// The k*k window R(i) around one location plus its gathered features.
struct Footprint {
  Offset center;
  std::vector<Offset> indices;  // raster order; may lie outside the image
  std::vector<bool> padded;     // true where the index is outside the image
  Tensor patch;                 // (k*k, C); padded rows are zero

  std::size_t center_slot() const { return indices.size() / 2; }
};

// x is (H,W,C). Throws ShapeError for even k or an out-of-range center.
Footprint extract_footprint(const Tensor& x, std::size_t row, std::size_t col, std::size_t k);

struct SABlockConfig {
  std::size_t channels_in = 0;
  std::size_t reduced_dim = 0;
  std::size_t footprint_k = 3;
  DeltaVariant variant = DeltaVariant::concat;
  std::size_t share_factor = 0;  // 0 selects reduced_dim: one shared alpha row per position
  bool alpha_softmax = false;
  bool residual = true;
  std::size_t alpha_hidden = 0;  // width between the two alpha-map layers; 0 selects reduced_dim

  void validate() const;
  std::size_t footprint_size() const { return footprint_k * footprint_k; }
  std::size_t share() const { return share_factor == 0 ? reduced_dim : share_factor; }
  std::size_t alpha_channels() const { return reduced_dim / share(); }
  std::size_t hidden() const { return alpha_hidden == 0 ? reduced_dim : alpha_hidden; }
  std::size_t delta_size() const { return delta_length(variant, footprint_size(), reduced_dim); }
};

struct SABlockWeights {
  Tensor phi_w, phi_b;      // (C,d), (d)
  Tensor psi_w, psi_b;      // (C,d), (d)
  Tensor beta_w, beta_b;    // (C,d), (d)
  Tensor alpha_w1, alpha_b1;  // (len,hidden), (hidden)
  Tensor alpha_w2, alpha_b2;  // (hidden, m*d/s), (m*d/s)
  Tensor norm_gamma, norm_beta;  // (d)
  BatchNormState norm_state;
  Tensor out_w, out_b;      // (d,C), (C)

  static SABlockWeights init(const SABlockConfig& config, Rng& rng);
  void check(const SABlockConfig& config) const;
  void register_parameters(ParameterSet& params, const std::string& prefix);
};

/// delta for a batch of footprints.
///   phi_rows, psi_rows: (L,m,d) projections of every footprint position
///   center:             (L,d)   phi of the footprint center
/// Returns (L, delta_length). Rank-2/rank-1 inputs (one footprint) give a rank-1 result.
Tensor compute_delta(DeltaVariant variant, const Tensor& phi_rows, const Tensor& psi_rows,
                     const Tensor& center);

/// The two-layer alpha map applied to delta: (L,len) -> (L,m,d/s), or (len) -> (m,d/s).
Tensor compute_alpha(const Tensor& delta, const SABlockConfig& config, const SABlockWeights& weights);

/// y_i = sum_{j in R(i)} alpha(x_R(i))_j (.) beta(x_j): (N,H,W,C) -> (N,H,W,d).
Tensor sa_aggregate(const Tensor& x, const SABlockConfig& config, const SABlockWeights& weights);

/// Full block: aggregation, normalization, ReLU, expansion back to C, optional
/// residual. Accepts (H,W,C) or (N,H,W,C) and returns the same rank.
Tensor sa_block_forward(const Tensor& x, const SABlockConfig& config, SABlockWeights& weights,
                        Mode mode);

class SABlock {
 public:
  SABlock(SABlockConfig config, Rng& rng);

  Tensor forward(const Tensor& x, Mode mode) { return sa_block_forward(x, config_, weights_, mode); }
  const SABlockConfig& config() const { return config_; }
  SABlockWeights& weights() { return weights_; }
  void register_parameters(ParameterSet& params, const std::string& prefix) {
    weights_.register_parameters(params, prefix);
  }

 private:
  SABlockConfig config_;
  SABlockWeights weights_;
};

}  // namespace crossing::attention
