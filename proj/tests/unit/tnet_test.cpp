#include <gtest/gtest.h>

#include <filesystem>

#include "crossing/errors.hpp"
#include "crossing/tnet.hpp"

namespace crossing::tnet {
namespace {

TNetConfig micro() {
  TNetConfig c;
  c.input_size = {8, 8};
  c.stage_channels = {4, 8};
  c.sa_blocks_per_stage = {1, 1};
  c.seed = 3;
  return c;
}

TEST(TNetConfig, FullScaleStageShapes) {
  const auto shapes = TNetConfig::full_scale().stage_shapes();
  const std::vector<Shape> want{{112, 112, 64}, {56, 56, 256}, {28, 28, 512}, {14, 14, 1024}, {7, 7, 2048}};
  EXPECT_EQ(shapes, want);
  std::size_t blocks = 0;
  for (std::size_t b : TNetConfig::full_scale().sa_blocks_per_stage) blocks += b;
  EXPECT_EQ(blocks, 19u);
}

TEST(TNetConfig, ToyForwardTraceMatchesStageShapes) {
  TNet net(TNetConfig::toy());
  ShapeTrace trace;
  Tensor logits = net.logits(Tensor::zeros({2, 64, 64, 3}), Mode::eval, &trace);
  EXPECT_EQ(logits.shape(), (Shape{2, 7}));
  auto want = TNetConfig::toy().stage_shapes();
  want.push_back({7});
  EXPECT_EQ(trace, want);
}

TEST(TNetConfig, JsonRoundTripAndStrictKeys) {
  const auto c = TNetConfig::full_scale();
  const auto back = TNetConfig::from_json(c.to_json());
  EXPECT_EQ(back.to_json(), c.to_json());
  auto j = c.to_json();
  j["extra"] = 1;
  EXPECT_THROW(TNetConfig::from_json(j), ConfigError);
  j = c.to_json();
  j.erase("seed");
  EXPECT_THROW(TNetConfig::from_json(j), ConfigError);
}

TEST(TNetConfig, RejectsIndivisibleInput) {
  auto c = TNetConfig::toy();
  c.input_size = {60, 64};
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(TNet, RejectsWrongImageSize) {
  TNet net(micro());
  EXPECT_THROW(net.logits(Tensor::zeros({1, 16, 16, 3}), Mode::eval), ShapeError);
}

TEST(TNet, ClassifyGivesValidPdv) {
  TNet net(TNetConfig::toy());
  Rng rng(5);
  const auto pdv = net.classify(uniform_tensor({64, 64, 3}, 0.0, 1.0, rng));
  EXPECT_TRUE(pdv.valid());
  EXPECT_LT(pdv.argmax(), 7u);
}

TEST(TNet, SaveLoadReproducesOutputs) {
  const auto path = std::filesystem::temp_directory_path() / "crossing_tnet_test.ckpt";
  Rng rng(9);
  TNet a(micro());
  Tensor images = uniform_tensor({2, 8, 8, 3}, 0.0, 1.0, rng);
  a.save(path);
  auto cfg = micro();
  cfg.seed = 99;
  TNet b(cfg);
  b.load(path);
  Tensor la = a.logits(images, Mode::eval), lb = b.logits(images, Mode::eval);
  for (std::size_t i = 0; i < la.numel(); ++i) EXPECT_EQ(la.data()[i], lb.data()[i]);
  std::filesystem::remove(path);
}

TEST(TNet, TrainingReducesLossOnTinySet) {
  TNet net(micro());
  Rng rng(4);
  std::vector<LabeledImage> split;
  for (std::size_t i = 0; i < 8; ++i) {
    Tensor img = Tensor::filled({8, 8, 3}, i % 2 == 0 ? 0.1 : 0.9);
    split.push_back({img, i % 2 == 0 ? 1u : 2u});
  }
  Sgd sgd(net.parameters(), {.learning_rate = 0.05, .momentum = 0.9, .weight_decay = 0.0});
  TrainOptions options{.batch_size = 4};
  const double first = tnet_train_epoch(net, split, sgd, options, rng).mean_loss;
  double last = first;
  for (int e = 0; e < 15; ++e) last = tnet_train_epoch(net, split, sgd, options, rng).mean_loss;
  EXPECT_LT(last, first);
}

TEST(IntersectionPdv, ValidityAndTies) {
  IntersectionPDV p;
  p.p = {0.2, 0.2, 0.1, 0.1, 0.1, 0.1, 0.2};
  EXPECT_TRUE(p.valid());
  EXPECT_EQ(p.argmax(), 0u);
  p.p[0] = 0.3;
  EXPECT_FALSE(p.valid());
}

}  // namespace
}  // namespace crossing::tnet
