#include "crossing/attention.hpp"

#include <cmath>

#include "crossing/errors.hpp"

namespace crossing::attention {

std::string to_string(DeltaVariant variant) {
  switch (variant) {
    case DeltaVariant::star: return "star";
    case DeltaVariant::clique: return "clique";
    case DeltaVariant::concat: return "concat";
  }
  return "concat";
}

DeltaVariant parse_variant(std::string_view name) {
  if (name == "star") return DeltaVariant::star;
  if (name == "clique") return DeltaVariant::clique;
  if (name == "concat") return DeltaVariant::concat;
  throw ConfigError("unknown attention variant '" + std::string(name) + "'");
}

std::size_t delta_length(DeltaVariant variant, std::size_t footprint_size, std::size_t dim) {
  switch (variant) {
    case DeltaVariant::star: return footprint_size;
    case DeltaVariant::clique: return footprint_size * footprint_size;
    case DeltaVariant::concat: return dim + footprint_size * dim;
  }
  return 0;
}

Footprint extract_footprint(const Tensor& x, std::size_t row, std::size_t col, std::size_t k) {
  if (x.rank() != 3) throw ShapeError("footprint: expected (H,W,C), got " + shape_string(x.shape()));
  if (k % 2 == 0) throw ShapeError("footprint: window size must be odd, got " + std::to_string(k));
  const std::size_t h = x.extent(0), w = x.extent(1), c = x.extent(2);
  if (row >= h || col >= w) throw ShapeError("footprint: center outside " + shape_string(x.shape()));
  const long r = static_cast<long>(k / 2);
  Footprint fp;
  fp.center = {static_cast<long>(row), static_cast<long>(col)};
  std::vector<double> patch(k * k * c, 0.0);
  const auto xs = x.data();
  for (long dy = -r; dy <= r; ++dy) {
    for (long dx = -r; dx <= r; ++dx) {
      const Offset at{fp.center.row + dy, fp.center.col + dx};
      const bool outside = at.row < 0 || at.col < 0 || at.row >= static_cast<long>(h) ||
                           at.col >= static_cast<long>(w);
      if (!outside) {
        const double* src = xs.data() + (static_cast<std::size_t>(at.row) * w + static_cast<std::size_t>(at.col)) * c;
        std::copy(src, src + c, patch.begin() + static_cast<long>(fp.indices.size() * c));
      }
      fp.indices.push_back(at);
      fp.padded.push_back(outside);
    }
  }
  fp.patch = Tensor({k * k, c}, std::move(patch));
  return fp;
}

void SABlockConfig::validate() const {
  if (channels_in == 0 || reduced_dim == 0) throw ConfigError("sa block: channel counts must be positive");
  if (reduced_dim > channels_in) {
    throw ConfigError("sa block: reduced_dim " + std::to_string(reduced_dim) + " exceeds channels_in " +
                      std::to_string(channels_in));
  }
  if (footprint_k % 2 == 0) throw ConfigError("sa block: footprint_k must be odd");
  if (reduced_dim % share() != 0) {
    throw ConfigError("sa block: share_factor " + std::to_string(share()) + " does not divide reduced_dim " +
                      std::to_string(reduced_dim));
  }
}

SABlockWeights SABlockWeights::init(const SABlockConfig& config, Rng& rng) {
  config.validate();
  const std::size_t c = config.channels_in, d = config.reduced_dim;
  const std::size_t len = config.delta_size(), hidden = config.hidden();
  const std::size_t alpha_out = config.footprint_size() * config.alpha_channels();
  SABlockWeights w;
  w.phi_w = normal_tensor({c, d}, std::sqrt(1.0 / static_cast<double>(c)), rng);
  w.phi_b = Tensor::zeros({d});
  w.psi_w = normal_tensor({c, d}, std::sqrt(1.0 / static_cast<double>(c)), rng);
  w.psi_b = Tensor::zeros({d});
  w.beta_w = normal_tensor({c, d}, std::sqrt(1.0 / static_cast<double>(c)), rng);
  w.beta_b = Tensor::zeros({d});
  w.alpha_w1 = he_normal({len, hidden}, len, rng);
  w.alpha_b1 = Tensor::zeros({hidden});
  w.alpha_w2 = normal_tensor({hidden, alpha_out}, std::sqrt(1.0 / static_cast<double>(hidden)), rng);
  w.alpha_b2 = Tensor::filled({alpha_out}, 1.0 / static_cast<double>(config.footprint_size()));
  w.norm_gamma = Tensor::filled({d}, 1.0);
  w.norm_beta = Tensor::zeros({d});
  w.norm_state = BatchNormState::make(d);
  w.out_w = he_normal({d, c}, d, rng);
  w.out_b = Tensor::zeros({c});
  return w;
}

void SABlockWeights::check(const SABlockConfig& config) const {
  config.validate();
  const std::size_t c = config.channels_in, d = config.reduced_dim;
  const std::size_t alpha_out = config.footprint_size() * config.alpha_channels();
  auto expect = [](const Tensor& t, const Shape& shape, const char* name) {
    if (!t.defined() || t.shape() != shape) {
      throw ShapeError(std::string("sa block: weight ") + name + " has shape " +
                       (t.defined() ? shape_string(t.shape()) : "<undefined>") + ", config needs " +
                       shape_string(shape));
    }
  };
  expect(phi_w, {c, d}, "phi_w");
  expect(phi_b, {d}, "phi_b");
  expect(psi_w, {c, d}, "psi_w");
  expect(psi_b, {d}, "psi_b");
  expect(beta_w, {c, d}, "beta_w");
  expect(beta_b, {d}, "beta_b");
  expect(alpha_w1, {config.delta_size(), config.hidden()}, "alpha_w1");
  expect(alpha_b1, {config.hidden()}, "alpha_b1");
  expect(alpha_w2, {config.hidden(), alpha_out}, "alpha_w2");
  expect(alpha_b2, {alpha_out}, "alpha_b2");
  expect(norm_gamma, {d}, "norm_gamma");
  expect(norm_beta, {d}, "norm_beta");
  expect(out_w, {d, c}, "out_w");
  expect(out_b, {c}, "out_b");
}

void SABlockWeights::register_parameters(ParameterSet& params, const std::string& prefix) {
  params.add(prefix + ".phi.w", phi_w);
  params.add(prefix + ".phi.b", phi_b);
  params.add(prefix + ".psi.w", psi_w);
  params.add(prefix + ".psi.b", psi_b);
  params.add(prefix + ".beta.w", beta_w);
  params.add(prefix + ".beta.b", beta_b);
  params.add(prefix + ".alpha.w1", alpha_w1);
  params.add(prefix + ".alpha.b1", alpha_b1);
  params.add(prefix + ".alpha.w2", alpha_w2);
  params.add(prefix + ".alpha.b2", alpha_b2);
  params.add(prefix + ".norm.gamma", norm_gamma);
  params.add(prefix + ".norm.beta", norm_beta);
  params.add(prefix + ".out.w", out_w);
  params.add(prefix + ".out.b", out_b);
  params.add_buffer(prefix + ".norm.running_mean", norm_state.running_mean);
  params.add_buffer(prefix + ".norm.running_var", norm_state.running_var);
}

Tensor compute_delta(DeltaVariant variant, const Tensor& phi_rows, const Tensor& psi_rows,
                     const Tensor& center) {
  if (phi_rows.rank() == 2 && psi_rows.rank() == 2 && center.rank() == 1) {
    const std::size_t m = psi_rows.extent(0), d = psi_rows.extent(1);
    Tensor out = compute_delta(variant, ops::reshape(phi_rows, {1, phi_rows.extent(0), phi_rows.extent(1)}),
                               ops::reshape(psi_rows, {1, m, d}), ops::reshape(center, {1, center.extent(0)}));
    return ops::reshape(out, {out.extent(1)});
  }
  if (phi_rows.rank() != 3 || psi_rows.rank() != 3 || center.rank() != 2) {
    throw ShapeError("delta: expected (L,m,d) rows and (L,d) center, got " + shape_string(phi_rows.shape()) +
                     ", " + shape_string(psi_rows.shape()) + ", " + shape_string(center.shape()));
  }
  if (phi_rows.shape() != psi_rows.shape() || center.extent(0) != psi_rows.extent(0) ||
      center.extent(1) != psi_rows.extent(2)) {
    throw ShapeError("delta: phi/psi dimension mismatch " + shape_string(phi_rows.shape()) + " vs " +
                     shape_string(psi_rows.shape()) + " with center " + shape_string(center.shape()));
  }
  const std::size_t l = psi_rows.extent(0), m = psi_rows.extent(1), d = psi_rows.extent(2);
  switch (variant) {
    case DeltaVariant::star: {
      Tensor dots = ops::matmul(ops::reshape(center, {l, 1, d}), ops::transpose_last2(psi_rows));
      return ops::reshape(dots, {l, m});
    }
    case DeltaVariant::clique: {
      Tensor dots = ops::matmul(phi_rows, ops::transpose_last2(psi_rows));
      return ops::reshape(dots, {l, m * m});
    }
    case DeltaVariant::concat:
      return ops::concat({center, ops::reshape(psi_rows, {l, m * d})}, 1);
  }
  throw std::logic_error("delta: unknown variant");
}

Tensor compute_alpha(const Tensor& delta, const SABlockConfig& config, const SABlockWeights& weights) {
  const std::size_t m = config.footprint_size(), g = config.alpha_channels();
  const bool single = delta.rank() == 1;
  if ((delta.rank() != 1 && delta.rank() != 2) || delta.extent(delta.rank() - 1) != config.delta_size()) {
    throw ShapeError("alpha: delta shape " + shape_string(delta.shape()) + " does not match " +
                     to_string(config.variant) + " length " + std::to_string(config.delta_size()));
  }
  const std::size_t l = single ? 1 : delta.extent(0);
  Tensor hidden = ops::relu(ops::linear(delta, weights.alpha_w1, weights.alpha_b1));
  Tensor alpha = ops::reshape(ops::linear(hidden, weights.alpha_w2, weights.alpha_b2), {l, m, g});
  if (config.alpha_softmax) alpha = ops::softmax(alpha, 1);
  return single ? ops::reshape(alpha, {m, g}) : alpha;
}

Tensor sa_aggregate(const Tensor& x, const SABlockConfig& config, const SABlockWeights& weights) {
  if (x.rank() != 4) throw ShapeError("sa block: expected (N,H,W,C), got " + shape_string(x.shape()));
  weights.check(config);
  if (x.extent(3) != config.channels_in) {
    throw ShapeError("sa block: input channels " + std::to_string(x.extent(3)) + " but config expects " +
                     std::to_string(config.channels_in));
  }
  const std::size_t n = x.extent(0), h = x.extent(1), w = x.extent(2), d = config.reduced_dim;
  const std::size_t k = config.footprint_k, l = n * h * w;

  Tensor phi = ops::linear(x, weights.phi_w, weights.phi_b);
  Tensor psi = ops::linear(x, weights.psi_w, weights.psi_b);
  Tensor beta = ops::linear(x, weights.beta_w, weights.beta_b);

  Tensor phi_rows = ops::unfold_footprint(phi, k);
  Tensor psi_rows = ops::unfold_footprint(psi, k);
  Tensor delta = compute_delta(config.variant, phi_rows, psi_rows, ops::reshape(phi, {l, d}));
  Tensor alpha = compute_alpha(delta, config, weights);

  Tensor weighted = ops::hadamard(ops::expand_groups(alpha, config.share()), ops::unfold_footprint(beta, k));
  return ops::reshape(ops::sum_axis(weighted, 1), {n, h, w, d});
}

Tensor sa_block_forward(const Tensor& x, const SABlockConfig& config, SABlockWeights& weights, Mode mode) {
  if (x.rank() == 3) {
    Tensor out = sa_block_forward(ops::reshape(x, {1, x.extent(0), x.extent(1), x.extent(2)}), config,
                                  weights, mode);
    return ops::reshape(out, {x.extent(0), x.extent(1), x.extent(2)});
  }
  Tensor y = sa_aggregate(x, config, weights);
  Tensor z = ops::relu(ops::batch_norm(y, weights.norm_gamma, weights.norm_beta, weights.norm_state, mode));
  Tensor out = ops::linear(z, weights.out_w, weights.out_b);
  return config.residual ? ops::add(out, x) : out;
}

SABlock::SABlock(SABlockConfig config, Rng& rng)
    : config_(config), weights_(SABlockWeights::init(config, rng)) {}

}  // namespace crossing::attention
