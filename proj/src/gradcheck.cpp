#include <algorithm>
#include <cmath>
#include <memory>

#include "crossing/attention.hpp"
#include "crossing/errors.hpp"
#include "crossing/finite_diff.hpp"
#include "crossing/harness.hpp"
#include "crossing/ops.hpp"
#include "crossing/tape.hpp"

namespace crossing::harness {

namespace {

struct CaseSetup {
  std::vector<Tensor> leaves;          // tensors whose gradients are checked
  std::function<Tensor()> loss;        // scalar
  std::shared_ptr<void> keep_alive;    // model objects the closure refers to
};

using CaseFactory = std::function<CaseSetup(Rng&)>;

Tensor random_tensor(Shape shape, Rng& rng) { return normal_tensor(std::move(shape), 1.0, rng); }

// Values bounded away from zero so kinks stay out of reach of the step.
Tensor off_kink_tensor(Shape shape, Rng& rng) {
  Tensor t = Tensor::zeros(std::move(shape));
  for (double& v : t.mutable_data()) v = (rng.bernoulli(0.5) ? 1.0 : -1.0) * rng.uniform(0.1, 1.0);
  return t;
}

Tensor leaf(Tensor t) {
  t.set_requires_grad(true);
  return t;
}

// sum(out * r) with r fixed: every output element gets its own weight.
std::function<Tensor()> projected(std::function<Tensor()> forward, Shape out_shape, Rng& rng) {
  Tensor r = random_tensor(std::move(out_shape), rng);
  return [forward = std::move(forward), r] { return ops::sum(ops::hadamard(forward(), r)); };
}

CaseSetup unary(Shape shape, Rng& rng, bool off_kink, const std::function<Tensor(const Tensor&)>& op) {
  Tensor x = leaf(off_kink ? off_kink_tensor(shape, rng) : random_tensor(shape, rng));
  const Shape out = op(x).shape();
  return {{x}, projected([x, op] { return op(x); }, out, rng), nullptr};
}

std::vector<std::pair<std::string, CaseFactory>> make_cases() {
  std::vector<std::pair<std::string, CaseFactory>> cases;
  auto add = [&](std::string name, CaseFactory f) { cases.emplace_back(std::move(name), std::move(f)); };

  add("matmul", [](Rng& rng) {
    Tensor a = leaf(random_tensor({3, 4}, rng)), b = leaf(random_tensor({4, 5}, rng));
    return CaseSetup{{a, b}, projected([a, b] { return ops::matmul(a, b); }, {3, 5}, rng), nullptr};
  });
  add("matmul_batched", [](Rng& rng) {
    Tensor a = leaf(random_tensor({2, 3, 4}, rng)), b = leaf(random_tensor({2, 4, 2}, rng));
    return CaseSetup{{a, b}, projected([a, b] { return ops::matmul(a, b); }, {2, 3, 2}, rng), nullptr};
  });
  add("transpose_last2", [](Rng& rng) {
    return unary({2, 3, 4}, rng, false, [](const Tensor& x) { return ops::transpose_last2(x); });
  });
  add("linear", [](Rng& rng) {
    Tensor x = leaf(random_tensor({2, 3, 4}, rng)), w = leaf(random_tensor({4, 5}, rng));
    Tensor b = leaf(random_tensor({5}, rng));
    return CaseSetup{{x, w, b}, projected([x, w, b] { return ops::linear(x, w, b); }, {2, 3, 5}, rng), nullptr};
  });
  add("conv2d", [](Rng& rng) {
    Tensor x = leaf(random_tensor({2, 5, 5, 2}, rng)), w = leaf(random_tensor({3, 3, 2, 3}, rng));
    Tensor b = leaf(random_tensor({3}, rng));
    return CaseSetup{{x, w, b},
                     projected([x, w, b] { return ops::conv2d(x, w, b, {.stride = 1, .pad = 1}); }, {2, 5, 5, 3}, rng),
                     nullptr};
  });
  add("conv2d_stride2", [](Rng& rng) {
    Tensor x = leaf(random_tensor({1, 6, 6, 2}, rng)), w = leaf(random_tensor({3, 3, 2, 2}, rng));
    Tensor b = leaf(random_tensor({2}, rng));
    return CaseSetup{{x, w, b},
                     projected([x, w, b] { return ops::conv2d(x, w, b, {.stride = 2, .pad = 1}); }, {1, 3, 3, 2}, rng),
                     nullptr};
  });
  add("relu", [](Rng& rng) { return unary({4, 5}, rng, true, [](const Tensor& x) { return ops::relu(x); }); });
  add("sigmoid", [](Rng& rng) { return unary({4, 5}, rng, false, [](const Tensor& x) { return ops::sigmoid(x); }); });
  add("tanh", [](Rng& rng) { return unary({4, 5}, rng, false, [](const Tensor& x) { return ops::tanh(x); }); });
  add("batch_norm_train", [](Rng& rng) {
    Tensor x = leaf(random_tensor({2, 3, 3, 4}, rng));
    Tensor g = leaf(uniform_tensor({4}, 0.5, 1.5, rng)), b = leaf(random_tensor({4}, rng));
    auto state = std::make_shared<BatchNormState>(BatchNormState::make(4));
    return CaseSetup{{x, g, b},
                     projected([x, g, b, state] { return ops::batch_norm(x, g, b, *state, Mode::train); },
                               {2, 3, 3, 4}, rng),
                     state};
  });
  add("batch_norm_eval", [](Rng& rng) {
    Tensor x = leaf(random_tensor({3, 4}, rng));
    Tensor g = leaf(uniform_tensor({4}, 0.5, 1.5, rng)), b = leaf(random_tensor({4}, rng));
    auto state = std::make_shared<BatchNormState>(BatchNormState::make(4));
    state->running_mean = random_tensor({4}, rng);
    state->running_var = uniform_tensor({4}, 0.5, 2.0, rng);
    return CaseSetup{{x, g, b},
                     projected([x, g, b, state] { return ops::batch_norm(x, g, b, *state, Mode::eval); }, {3, 4}, rng),
                     state};
  });
  add("maxpool2x2", [](Rng& rng) {
    return unary({2, 4, 4, 3}, rng, false, [](const Tensor& x) { return ops::maxpool2x2_stride2(x); });
  });
  add("maxpool2x2_rank2", [](Rng& rng) {
    return unary({4, 6}, rng, false, [](const Tensor& x) { return ops::maxpool2x2_stride2(x); });
  });
  add("softmax", [](Rng& rng) { return unary({3, 5}, rng, false, [](const Tensor& x) { return ops::softmax(x); }); });
  add("softmax_axis0", [](Rng& rng) {
    return unary({4, 3}, rng, false, [](const Tensor& x) { return ops::softmax(x, 0); });
  });
  add("hadamard", [](Rng& rng) {
    Tensor a = leaf(random_tensor({3, 4}, rng)), b = leaf(random_tensor({3, 4}, rng));
    return CaseSetup{{a, b}, projected([a, b] { return ops::hadamard(a, b); }, {3, 4}, rng), nullptr};
  });
  add("add", [](Rng& rng) {
    Tensor a = leaf(random_tensor({3, 4}, rng)), b = leaf(random_tensor({3, 4}, rng));
    return CaseSetup{{a, b}, projected([a, b] { return ops::add(a, b); }, {3, 4}, rng), nullptr};
  });
  add("scale", [](Rng& rng) {
    return unary({3, 4}, rng, false, [](const Tensor& x) { return ops::scale(x, -1.7); });
  });
  add("concat", [](Rng& rng) {
    Tensor a = leaf(random_tensor({2, 3}, rng)), b = leaf(random_tensor({2, 2}, rng));
    return CaseSetup{{a, b}, projected([a, b] { return ops::concat({a, b}, 1); }, {2, 5}, rng), nullptr};
  });
  add("reshape", [](Rng& rng) {
    return unary({2, 6}, rng, false, [](const Tensor& x) { return ops::reshape(x, {3, 4}); });
  });
  add("sum", [](Rng& rng) {
    Tensor x = leaf(random_tensor({3, 4}, rng));
    return CaseSetup{{x}, [x] { return ops::scale(ops::sum(x), 1.3); }, nullptr};
  });
  add("sum_axis", [](Rng& rng) {
    return unary({2, 3, 4}, rng, false, [](const Tensor& x) { return ops::sum_axis(x, 1); });
  });
  add("global_avg_pool", [](Rng& rng) {
    return unary({2, 3, 3, 4}, rng, false, [](const Tensor& x) { return ops::global_avg_pool(x); });
  });
  add("slice", [](Rng& rng) {
    return unary({3, 6}, rng, false, [](const Tensor& x) { return ops::slice(x, 1, 2, 3); });
  });
  add("unfold_footprint", [](Rng& rng) {
    return unary({1, 3, 4, 2}, rng, false, [](const Tensor& x) { return ops::unfold_footprint(x, 3); });
  });
  add("expand_groups", [](Rng& rng) {
    return unary({2, 3, 2}, rng, false, [](const Tensor& x) { return ops::expand_groups(x, 3); });
  });
  add("softmax_cross_entropy", [](Rng& rng) {
    Tensor z = leaf(random_tensor({4, 5}, rng));
    std::vector<std::size_t> labels;
    for (int i = 0; i < 4; ++i) labels.push_back(rng.index(5));
    return CaseSetup{{z}, [z, labels] { return ops::softmax_cross_entropy(z, labels); }, nullptr};
  });
  add("composite_mlp", [](Rng& rng) {
    Tensor x = leaf(random_tensor({3, 4}, rng));
    Tensor w1 = leaf(random_tensor({4, 6}, rng)), b1 = leaf(random_tensor({6}, rng));
    Tensor w2 = leaf(random_tensor({6, 3}, rng)), b2 = leaf(random_tensor({3}, rng));
    std::vector<std::size_t> labels{0, 2, 1};
    return CaseSetup{{x, w1, b1, w2, b2},
                     [=] {
                       Tensor h = ops::tanh(ops::linear(x, w1, b1));
                       return ops::softmax_cross_entropy(ops::linear(h, w2, b2), labels);
                     },
                     nullptr};
  });

  for (auto variant : {attention::DeltaVariant::star, attention::DeltaVariant::clique, attention::DeltaVariant::concat}) {
    for (std::size_t k : {std::size_t{1}, std::size_t{3}}) {
      for (bool alpha_softmax : {false, true}) {
        std::string name = "sa_block_" + attention::to_string(variant) + "_k" + std::to_string(k);
        if (alpha_softmax) name += "_softmax";
        add(name, [variant, k, alpha_softmax](Rng& rng) {
          attention::SABlockConfig config;
          config.channels_in = 6;
          config.reduced_dim = 4;
          config.footprint_k = k;
          config.variant = variant;
          config.share_factor = 2;
          config.alpha_softmax = alpha_softmax;
          auto weights = std::make_shared<attention::SABlockWeights>(attention::SABlockWeights::init(config, rng));
          // Random rather than initial values, so every path carries gradient.
          for (Tensor* t : {&weights->alpha_w2, &weights->alpha_b2, &weights->norm_gamma, &weights->norm_beta,
                            &weights->out_b}) {
            for (double& v : t->mutable_data()) v = rng.normal(0.0, 0.5);
          }
          ParameterSet params;
          weights->register_parameters(params, "block");
          Tensor x = leaf(random_tensor({2, 3, 3, 6}, rng));
          std::vector<Tensor> leaves{x};
          for (const auto& p : params.trainable()) leaves.push_back(p.tensor);
          auto loss = projected([x, config, weights] {
            return attention::sa_block_forward(x, config, *weights, Mode::train);
          }, {2, 3, 3, 6}, rng);
          return CaseSetup{leaves, loss, weights};
        });
      }
    }
  }

  add("transition", [](Rng& rng) {
    auto weights = std::make_shared<tnet::TransitionWeights>(tnet::TransitionWeights::init(3, 5, rng));
    for (double& v : weights->beta.mutable_data()) v = rng.normal(0.0, 0.5);
    for (Tensor* t : {&weights->gamma, &weights->beta, &weights->w, &weights->b}) t->set_requires_grad(true);
    Tensor x = leaf(random_tensor({2, 4, 4, 3}, rng));
    auto loss = projected([x, weights] { return tnet::transition_forward(x, *weights, Mode::train); }, {2, 2, 2, 5},
                          rng);
    return CaseSetup{{x, weights->gamma, weights->beta, weights->w, weights->b}, loss, weights};
  });
  add("lstm_step", [](Rng& rng) {
    auto weights = std::make_shared<fpv::LstmWeights>(fpv::LstmWeights::init(3, 4, rng));
    weights->w = leaf(normal_tensor({7, 16}, 0.7, rng));
    weights->b = leaf(normal_tensor({16}, 0.5, rng));
    Tensor x = leaf(random_tensor({2, 3}, rng));
    Tensor h = leaf(random_tensor({2, 4}, rng)), c = leaf(random_tensor({2, 4}, rng));
    Tensor rh = random_tensor({2, 4}, rng), rc = random_tensor({2, 4}, rng);
    auto loss = [=] {
      const auto next = fpv::recurrent_step(x, {h, c}, *weights);
      return ops::add(ops::sum(ops::hadamard(next.h, rh)), ops::sum(ops::hadamard(next.c, rc)));
    };
    return CaseSetup{{x, h, c, weights->w, weights->b}, loss, weights};
  });
  add("fpv_micro", [](Rng& rng) {
    fpv::MotionNetConfig config;
    config.frame_size = 8;
    config.conv_channels = {3};
    config.feature_width = 5;
    config.hidden = 4;
    config.seed = rng.next();
    auto model = std::make_shared<fpv::MotionNet>(config);
    std::vector<Tensor> steps;
    for (int t = 0; t < 3; ++t) steps.push_back(uniform_tensor({2, 8, 8, 3}, 0.0, 1.0, rng));
    std::vector<Tensor> leaves;
    for (const auto& p : model->parameters().trainable()) leaves.push_back(p.tensor);
    std::vector<std::size_t> labels{rng.index(3), rng.index(3)};
    auto loss = [model, steps, labels] { return ops::softmax_cross_entropy(model->logits(steps), labels); };
    return CaseSetup{leaves, loss, model};
  });
  add("tnet_micro", [](Rng& rng) {
    tnet::TNetConfig config;
    config.input_size = {8, 8};
    config.stage_channels = {4, 8};
    config.sa_blocks_per_stage = {1, 1};
    config.seed = rng.next();
    auto model = std::make_shared<tnet::TNet>(config);
    Tensor images = leaf(uniform_tensor({2, 8, 8, 3}, 0.0, 1.0, rng));
    std::vector<Tensor> leaves{images};
    for (const auto& p : model->parameters().trainable()) {
      // Move scale and shift parameters off their initial constants.
      if (p.name.find("norm") != std::string::npos || p.name.find("alpha_b2") != std::string::npos) {
        Tensor t = p.tensor;
        for (double& v : t.mutable_data()) v += rng.normal(0.0, 0.3);
      }
      leaves.push_back(p.tensor);
    }
    std::vector<std::size_t> labels{rng.index(7), rng.index(7)};
    auto loss = [model, images, labels] {
      return ops::softmax_cross_entropy(model->logits(images, Mode::train), labels);
    };
    return CaseSetup{leaves, loss, model};
  });
  return cases;
}

// Leaves whose gradient norms both stay below this are pure rounding noise
// (a parameter the loss is invariant to, such as a shift ahead of a softmax).
constexpr double kNoiseFloor = 1e-7;

double leaf_error(const std::vector<double>& analytic, const Tensor& numeric) {
  double na = 0.0, nn = 0.0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    na += analytic[i] * analytic[i];
    nn += numeric.data()[i] * numeric.data()[i];
  }
  if (std::sqrt(std::max(na, nn)) < kNoiseFloor) return 0.0;
  return relative_error(analytic, numeric.data());
}

double check_once(const CaseSetup& setup, double step, double tolerance) {
  for (auto t : setup.leaves) t.zero_grad();
  Tape tape;
  Tensor loss;
  {
    TapeScope scope(tape);
    loss = setup.loss();
  }
  backward(tape, loss);
  double worst = 0.0;
  const auto f = [&] { return setup.loss().item(); };
  for (auto t : setup.leaves) {
    std::vector<double> analytic(t.numel(), 0.0);
    if (t.has_grad()) analytic.assign(t.grad().begin(), t.grad().end());
    double err = leaf_error(analytic, finite_diff_grad_inplace(f, t, step));
    // A relu or max kink inside [x - h, x + h] spoils the central difference;
    // a genuine gradient bug survives the smaller step as well.
    if (err > tolerance) err = std::min(err, leaf_error(analytic, finite_diff_grad_inplace(f, t, step / 10.0)));
    worst = std::max(worst, err);
  }
  return worst;
}

}  // namespace

std::vector<std::string> gradcheck_case_names() {
  std::vector<std::string> names;
  for (const auto& [name, _] : make_cases()) names.push_back(name);
  return names;
}

std::vector<GradCheckResult> run_gradcheck_suite(const GradCheckOptions& options, std::string_view filter) {
  std::vector<GradCheckResult> results;
  const auto cases = make_cases();
  for (std::size_t c = 0; c < cases.size(); ++c) {
    const auto& [name, factory] = cases[c];
    if (!filter.empty() && name.find(filter) == std::string::npos) continue;
    GradCheckResult r{name, options.seeds, 0.0, true};
    for (std::size_t s = 0; s < options.seeds; ++s) {
      Rng rng(derive_seed(options.seed, c * 1000 + s));
      const CaseSetup setup = factory(rng);
      const double err = check_once(setup, options.step, options.tolerance);
      r.max_error = std::max(r.max_error, std::isfinite(err) ? err : INFINITY);
    }
    r.passed = r.max_error <= options.tolerance;
    results.push_back(r);
  }
  return results;
}

}  // namespace crossing::harness
