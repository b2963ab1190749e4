#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "crossing/checkpoint.hpp"
#include "crossing/errors.hpp"
#include "crossing/finite_diff.hpp"
#include "crossing/nn.hpp"
#include "crossing/ops.hpp"
#include "crossing/random.hpp"
#include "crossing/tape.hpp"

namespace crossing {
namespace {

Tensor random(Shape shape, Rng& rng) { return uniform_tensor(std::move(shape), -1.0, 1.0, rng); }

TEST(Tensor, SharedHandleAliasesAndCloneCopies) {
  Tensor a = Tensor::zeros({2, 2});
  Tensor b = a;
  b.mutable_data()[0] = 3.0;
  EXPECT_EQ(a.data()[0], 3.0);
  Tensor c = a.clone();
  c.mutable_data()[0] = 5.0;
  EXPECT_EQ(a.data()[0], 3.0);
  EXPECT_FALSE(c.same_storage(a));
}

TEST(Tensor, RejectsMismatchedValueCount) { EXPECT_THROW(Tensor({2, 3}, {1.0, 2.0}), ShapeError); }

TEST(Ops, MatmulMatchesTripleLoop) {
  Rng rng(7);
  for (int trial = 0; trial < 10; ++trial) {
    const std::size_t m = 1 + rng.index(6), k = 1 + rng.index(6), n = 1 + rng.index(6);
    Tensor a = random({m, k}, rng), b = random({k, n}, rng);
    Tensor c = ops::matmul(a, b);
    ASSERT_EQ(c.shape(), (Shape{m, n}));
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        double want = 0.0;
        for (std::size_t p = 0; p < k; ++p) want += a.data()[i * k + p] * b.data()[p * n + j];
        EXPECT_NEAR(c.at({i, j}), want, 1e-12);
      }
    }
  }
}

TEST(Ops, MatmulShapeErrorNamesExtents) {
  try {
    ops::matmul(Tensor::zeros({2, 3}), Tensor::zeros({4, 2}));
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("matmul"), std::string::npos);
  }
}

TEST(Ops, SoftmaxRowsSumToOne) {
  Rng rng(3);
  Tensor x = random({4, 5}, rng);
  Tensor y = ops::softmax(x);
  for (std::size_t r = 0; r < 4; ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < 5; ++c) s += y.at({r, c});
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
}

TEST(Ops, MaxPoolPicksWindowMaximum) {
  Tensor x({2, 4}, {1, 5, 2, 0, 3, 4, 7, 8});
  Tensor y = ops::maxpool2x2_stride2(x);
  ASSERT_EQ(y.shape(), (Shape{1, 2}));
  EXPECT_EQ(y.data()[0], 5.0);
  EXPECT_EQ(y.data()[1], 8.0);
  EXPECT_THROW(ops::maxpool2x2_stride2(Tensor::zeros({3, 4})), ShapeError);
}

TEST(Ops, ConvOfDeltaKernelIsIdentity) {
  Rng rng(5);
  Tensor x = random({1, 5, 5, 2}, rng);
  Tensor w = Tensor::zeros({3, 3, 2, 2});
  for (std::size_t c = 0; c < 2; ++c) w.mutable_data()[((1 * 3 + 1) * 2 + c) * 2 + c] = 1.0;
  Tensor y = ops::conv2d(x, w, Tensor::zeros({2}), {.stride = 1, .pad = 1});
  ASSERT_EQ(y.shape(), x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_DOUBLE_EQ(y.data()[i], x.data()[i]);
}

TEST(Tape, NothingRecordedWithoutScope) {
  Tensor a = Tensor::filled({2}, 1.0);
  a.set_requires_grad(true);
  Tape tape;
  ops::scale(a, 2.0);
  EXPECT_EQ(tape.size(), 0u);
  EXPECT_EQ(active_tape(), nullptr);
}

TEST(Tape, BackwardOfSumOfSquares) {
  Tensor x({3}, {1.0, -2.0, 0.5});
  x.set_requires_grad(true);
  Tape tape;
  Tensor loss;
  {
    TapeScope scope(tape);
    loss = ops::sum(ops::hadamard(x, x));
  }
  backward(tape, loss);
  ASSERT_TRUE(x.has_grad());
  EXPECT_DOUBLE_EQ(x.grad()[0], 2.0);
  EXPECT_DOUBLE_EQ(x.grad()[1], -4.0);
  EXPECT_DOUBLE_EQ(x.grad()[2], 1.0);
  EXPECT_TRUE(tape.consumed());
}

TEST(FiniteDiff, QuadraticGradient) {
  Tensor x({2}, {0.3, -0.7});
  const Tensor g = finite_diff_grad(
      [](const Tensor& t) { return t.data()[0] * t.data()[0] + 3.0 * t.data()[1]; }, x);
  EXPECT_NEAR(g.data()[0], 0.6, 1e-8);
  EXPECT_NEAR(g.data()[1], 3.0, 1e-8);
  EXPECT_EQ(x.data()[0], 0.3);
}

TEST(FiniteDiff, InplaceRestoresBitExactly) {
  Rng rng(9);
  Tensor x = random({6}, rng);
  const Tensor before = x.clone();
  finite_diff_grad_inplace([&] { return std::exp(x.data()[0]) + x.data()[5]; }, x);
  for (std::size_t i = 0; i < 6; ++i) EXPECT_EQ(x.data()[i], before.data()[i]);
}

TEST(Checkpoint, RoundTripIsBitExact) {
  Rng rng(11);
  std::vector<NamedTensor> entries{{"a.w", random({2, 3, 4}, rng)}, {"scalar", Tensor::scalar(-0.125)}};
  const auto decoded = decode_checkpoint(encode_checkpoint(entries));
  ASSERT_EQ(decoded.size(), entries.size());
  for (std::size_t i = 0; i < entries.size(); ++i) {
    EXPECT_EQ(decoded[i].name, entries[i].name);
    EXPECT_EQ(decoded[i].tensor.shape(), entries[i].tensor.shape());
    for (std::size_t j = 0; j < entries[i].tensor.numel(); ++j) {
      EXPECT_EQ(decoded[i].tensor.data()[j], entries[i].tensor.data()[j]);
    }
  }
}

TEST(Checkpoint, TruncatedAndBadMagicRejected) {
  std::vector<NamedTensor> entries{{"w", Tensor::filled({4}, 1.0)}};
  std::string bytes = encode_checkpoint(entries);
  EXPECT_THROW(decode_checkpoint(bytes.substr(0, bytes.size() - 3)), DataError);
  bytes[0] = 'X';
  EXPECT_THROW(decode_checkpoint(bytes), DataError);
}

TEST(Checkpoint, FileRoundTrip) {
  const auto path = std::filesystem::temp_directory_path() / "crossing_tensor_test.ckpt";
  std::vector<NamedTensor> entries{{"w", Tensor({2}, {1.5, -2.5})}};
  save_checkpoint(path, entries);
  const auto loaded = load_checkpoint(path);
  ASSERT_EQ(loaded.size(), 1u);
  EXPECT_EQ(loaded[0].tensor.data()[1], -2.5);
  std::filesystem::remove(path);
  EXPECT_THROW(load_checkpoint(path), DataError);
}

TEST(Sgd, StepMovesAgainstGradient) {
  ParameterSet params;
  Tensor w({1}, {1.0});
  w.set_requires_grad(true);
  params.add("w", w);
  Sgd sgd(params, {.learning_rate = 0.1, .momentum = 0.0, .weight_decay = 0.0});
  Tape tape;
  Tensor loss;
  {
    TapeScope scope(tape);
    loss = ops::sum(ops::hadamard(w, w));
  }
  backward(tape, loss);
  sgd.step();
  EXPECT_NEAR(w.data()[0], 0.8, 1e-15);
}

}  // namespace
}  // namespace crossing
