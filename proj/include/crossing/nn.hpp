#pragma once

#include <span>
#include <string>
#include <vector>

#include "crossing/checkpoint.hpp"
#include "crossing/random.hpp"
#include "crossing/tensor.hpp"

namespace crossing {

/// Named trainable tensors plus non-trainable buffers (running statistics).
/// Handles alias the owning module's storage, so updates are visible there.
class ParameterSet {
 public:
  void add(std::string name, Tensor param);
  void add_buffer(std::string name, Tensor buffer);

  std::span<const NamedTensor> trainable() const { return params_; }
  std::vector<NamedTensor> state() const;  // params then buffers
  std::size_t parameter_count() const;

  void zero_grad();
  // Copies values from `entries` into the matching tensors; every name must
  // be present with an identical shape.
  void load_state(std::span<const NamedTensor> entries);

 private:
  std::vector<NamedTensor> params_;
  std::vector<NamedTensor> buffers_;
};

Tensor he_normal(Shape shape, std::size_t fan_in, Rng& rng);
Tensor uniform_tensor(Shape shape, double lo, double hi, Rng& rng);
Tensor normal_tensor(Shape shape, double stddev, Rng& rng);

struct SgdOptions {
  double learning_rate = 0.05;
  double momentum = 0.9;
  double weight_decay = 0.0;
};

/// Stochastic gradient descent with heavy-ball momentum.
class Sgd {
 public:
  Sgd(const ParameterSet& params, SgdOptions options);
  void step();
  const SgdOptions& options() const { return options_; }
  void set_learning_rate(double lr) { options_.learning_rate = lr; }

 private:
  std::vector<Tensor> params_;
  std::vector<std::vector<double>> velocity_;
  SgdOptions options_;
};

}  // namespace crossing
