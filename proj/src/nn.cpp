#include "crossing/nn.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "crossing/errors.hpp"

namespace crossing {

void ParameterSet::add(std::string name, Tensor param) {
  param.set_requires_grad(true);
  params_.push_back({std::move(name), std::move(param)});
}

void ParameterSet::add_buffer(std::string name, Tensor buffer) {
  buffers_.push_back({std::move(name), std::move(buffer)});
}

std::vector<NamedTensor> ParameterSet::state() const {
  std::vector<NamedTensor> out(params_.begin(), params_.end());
  out.insert(out.end(), buffers_.begin(), buffers_.end());
  return out;
}

std::size_t ParameterSet::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.tensor.numel();
  return n;
}

void ParameterSet::zero_grad() {
  for (auto& p : params_) {
    Tensor t = p.tensor;
    if (t.has_grad()) t.zero_grad();
  }
}

void ParameterSet::load_state(std::span<const NamedTensor> entries) {
  std::map<std::string, const Tensor*> by_name;
  for (const auto& e : entries) by_name[e.name] = &e.tensor;
  for (auto list : {&params_, &buffers_}) {
    for (auto& p : *list) {
      auto it = by_name.find(p.name);
      if (it == by_name.end()) throw DataError("checkpoint: missing tensor '" + p.name + "'");
      if (it->second->shape() != p.tensor.shape()) {
        throw DataError("checkpoint: tensor '" + p.name + "' has shape " +
                        shape_string(it->second->shape()) + ", expected " +
                        shape_string(p.tensor.shape()));
      }
      Tensor dst = p.tensor;
      auto src = it->second->data();
      std::copy(src.begin(), src.end(), dst.mutable_data().begin());
    }
  }
}

Tensor he_normal(Shape shape, std::size_t fan_in, Rng& rng) {
  return normal_tensor(std::move(shape), std::sqrt(2.0 / static_cast<double>(fan_in)), rng);
}

Tensor uniform_tensor(Shape shape, double lo, double hi, Rng& rng) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return Tensor(std::move(shape), std::move(v));
}

Tensor normal_tensor(Shape shape, double stddev, Rng& rng) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = rng.normal(0.0, stddev);
  return Tensor(std::move(shape), std::move(v));
}

Sgd::Sgd(const ParameterSet& params, SgdOptions options) : options_(options) {
  for (const auto& p : params.trainable()) {
    params_.push_back(p.tensor);
    velocity_.emplace_back(p.tensor.numel(), 0.0);
  }
}

void Sgd::step() {
  for (std::size_t k = 0; k < params_.size(); ++k) {
    Tensor& p = params_[k];
    if (!p.has_grad()) continue;
    auto w = p.mutable_data();
    auto g = p.grad();
    auto& v = velocity_[k];
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double grad = g[i] + options_.weight_decay * w[i];
      v[i] = options_.momentum * v[i] + grad;
      w[i] -= options_.learning_rate * v[i];
    }
  }
}

}  // namespace crossing
