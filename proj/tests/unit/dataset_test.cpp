#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>

#include "crossing/dataset.hpp"
#include "crossing/errors.hpp"
#include "crossing/image.hpp"

namespace crossing::dataset {
namespace {

bool same_pixels(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() && std::equal(a.data().begin(), a.data().end(), b.data().begin());
}

TEST(Labels, MirrorRule) {
  const std::map<std::size_t, std::size_t> want{{1, 1}, {2, 3}, {3, 2}, {4, 5}, {5, 4}, {6, 6}, {7, 7}};
  for (auto [label, mirrored] : want) {
    EXPECT_EQ(mirror_label(label), mirrored);
    const Arms a = class_arms(label), b = class_arms(mirrored);
    EXPECT_EQ(a.ahead, b.ahead);
    EXPECT_EQ(a.right, b.left);
    EXPECT_EQ(a.left, b.right);
  }
  EXPECT_THROW(class_arms(0), ConfigError);
  EXPECT_THROW(class_arms(8), ConfigError);
}

TEST(Labels, MotionFitsGeometry) {
  EXPECT_TRUE(motion_fits_class(0, 1));
  EXPECT_FALSE(motion_fits_class(0, 2));
  EXPECT_TRUE(motion_fits_class(1, 2));
  EXPECT_FALSE(motion_fits_class(2, 2));
  EXPECT_TRUE(motion_fits_class(2, 7));
}

TEST(Scene, DeterministicPerSeed) {
  for (std::size_t label = 1; label <= 7; ++label) {
    const auto a = generate_scene(label, 42), b = generate_scene(label, 42);
    EXPECT_TRUE(same_pixels(a.image, b.image));
    EXPECT_EQ(a.label, label);
    EXPECT_EQ(a.image.shape(), (Shape{64, 64, 3}));
    for (double v : a.image.data()) {
      ASSERT_GE(v, 0.0);
      ASSERT_LE(v, 1.0);
    }
  }
  EXPECT_FALSE(same_pixels(generate_scene(1, 1).image, generate_scene(1, 2).image));
}

TEST(Scene, MirrorSwapsTurnsAndFlipsPixels) {
  for (std::size_t label = 1; label <= 7; ++label) {
    const auto s = generate_scene(label, 7);
    const auto m = mirror_scene(s);
    EXPECT_EQ(m.label, mirror_label(label));
    EXPECT_TRUE(same_pixels(m.image, image::mirror_horizontal(s.image)));
    EXPECT_TRUE(same_pixels(mirror_scene(m).image, s.image));
  }
}

TEST(Scene, ParkedVehiclesAndMirror) {
  SceneParams none, both;
  none.vehicle_probability = 0.0;
  both.vehicle_probability = 1.0;
  const auto a = generate_scene(6, 11, none), b = generate_scene(6, 11, both);
  EXPECT_EQ(a.vehicles, 0);
  EXPECT_EQ(b.vehicles, 3);
  EXPECT_FALSE(same_pixels(a.image, b.image));
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto s = generate_scene(2, seed);
    const int swapped = ((s.vehicles & 1) << 1) | ((s.vehicles & 2) >> 1);
    EXPECT_EQ(mirror_scene(s).vehicles, swapped);
  }
}

TEST(Scene, CrossroadWithoutJitterIsNearlySymmetric) {
  SceneParams p;
  p.lateral_jitter = 0.0;
  p.yaw_jitter_deg = 0.0;
  p.vehicle_probability = 0.0;
  p.distractor_probability = 0.0;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto s = generate_scene(7, seed, p);
    const Tensor m = image::mirror_horizontal(s.image);
    double diff = 0.0;
    for (std::size_t i = 0; i < s.image.numel(); ++i) diff += std::abs(s.image.data()[i] - m.data()[i]);
    EXPECT_LT(diff / static_cast<double>(s.image.numel()), 0.05) << seed;
  }
}

TEST(Scene, ClassesDifferInGeometry) {
  // Same seed, different class: the rendered corridors differ.
  EXPECT_FALSE(same_pixels(generate_scene(2, 5).image, generate_scene(3, 5).image));
}

TEST(Scene, ParamsJsonStrict) {
  SceneParams p;
  EXPECT_EQ(SceneParams::from_json(p.to_json()).to_json(), p.to_json());
  EXPECT_EQ(SceneParams::from_json(nlohmann::json{{"image_size", 32}}).image_size, 32u);
  EXPECT_THROW(SceneParams::from_json(nlohmann::json{{"nope", 1}}), ConfigError);
  p.approach_min = 6.0;
  EXPECT_THROW(p.validate(), ConfigError);
}

TEST(Sequence, DeterministicAndTracked) {
  const auto a = generate_sequence(1, 9), b = generate_sequence(1, 9);
  ASSERT_EQ(a.frames.size(), 12u);
  ASSERT_EQ(a.pose_track.size(), 12u);
  for (std::size_t t = 0; t < a.frames.size(); ++t) EXPECT_TRUE(same_pixels(a.frames[t], b.frames[t]));
  EXPECT_EQ(a.pose_track.front(), -8.0);
  for (std::size_t t = 1; t < a.pose_track.size(); ++t) EXPECT_GT(a.pose_track[t], a.pose_track[t - 1]);
  EXPECT_TRUE(motion_fits_class(a.motion_label, a.intersection_label));
}

TEST(Sequence, ZeroSpeedGivesIdenticalFrames) {
  const auto s = generate_sequence(0, 3, {}, 0.0);
  for (std::size_t t = 1; t < s.frames.size(); ++t) EXPECT_TRUE(same_pixels(s.frames[t], s.frames[0]));
}

TEST(Sequence, MirrorSwapsMotion) {
  const auto s = generate_sequence(2, 4);
  const auto m = mirror_sequence(s);
  EXPECT_EQ(m.motion_label, 1u);
  EXPECT_EQ(m.intersection_label, mirror_label(s.intersection_label));
  EXPECT_TRUE(same_pixels(m.frames[3], image::mirror_horizontal(s.frames[3])));
}

// Sum of horizontal intensity change between consecutive frames, signed by
// the best-matching column shift.
double mean_column_shift(const SequenceSample& s) {
  double total = 0.0;
  const std::size_t h = s.frames[0].extent(0), w = s.frames[0].extent(1);
  for (std::size_t t = 4; t + 1 < s.frames.size(); ++t) {
    double best = 1e300;
    int arg = 0;
    for (int dx = -4; dx <= 4; ++dx) {
      double ssd = 0.0;
      for (std::size_t y = 0; y < h / 2; ++y)
        for (std::size_t x = 8; x + 8 < w; ++x) {
          const double d = s.frames[t].at({y, x}) - s.frames[t + 1].at({y, x + dx});
          ssd += d * d;
        }
      if (ssd < best) {
        best = ssd;
        arg = dx;
      }
    }
    total += arg;
  }
  return total;
}

TEST(Sequence, TurnDirectionSetsLateralFlowSign) {
  // Yawing right moves the distant scene left in the image, and vice versa.
  for (std::uint64_t seed = 1; seed <= 3; ++seed) {
    EXPECT_LT(mean_column_shift(generate_sequence(1, seed)), 0.0);
    EXPECT_GT(mean_column_shift(generate_sequence(2, seed)), 0.0);
  }
}

TEST(SliceApproach, WindowExample) {
  const std::vector<double> track{-10, -7, -4, -2, -0.5, 1};
  EXPECT_EQ(slice_approach(track, 0.0, 5.0), (std::vector<std::size_t>{2, 3, 4}));
  EXPECT_EQ(slice_approach(track, 0.0, 1e9), (std::vector<std::size_t>{0, 1, 2, 3, 4}));
  EXPECT_THROW(slice_approach(std::vector<double>{0.5, 1.0}, 0.0, 5.0), DataError);
  EXPECT_ANY_THROW(slice_approach(track, 5.0, 5.0));
}

TEST(SliceApproach, SequenceFramesInsideWindow) {
  const auto s = slice_approach(generate_sequence(0, 2), 0.0, 5.0);
  ASSERT_FALSE(s.frames.empty());
  EXPECT_EQ(s.frames.size(), s.pose_track.size());
  for (double d : s.pose_track) {
    EXPECT_GE(d, -5.0);
    EXPECT_LE(d, 0.0);
  }
}

TEST(Split, RatioOn162Samples) {
  std::vector<SplitItem> items;
  for (std::size_t i = 0; i < 162; ++i) items.push_back({1 + i % 7, "s" + std::to_string(i), 0.0});
  SplitOptions options;
  options.min_cluster = 1;
  const auto r = split_and_filter(items, options);
  EXPECT_EQ(r.train.size(), 126u);
  EXPECT_EQ(r.test.size(), 36u);
  EXPECT_TRUE(r.excluded.empty());
  EXPECT_EQ(split_and_filter(items, options).train, r.train);
}

TEST(Split, StratifiedWithinOneSample) {
  std::vector<SplitItem> items;
  for (std::size_t i = 0; i < 162; ++i) items.push_back({1 + i % 7, "s" + std::to_string(i), 0.0});
  SplitOptions options;
  options.min_cluster = 1;
  const auto r = split_and_filter(items, options);
  for (std::size_t label = 1; label <= 7; ++label) {
    const double n = static_cast<double>(std::count_if(items.begin(), items.end(), [&](auto& it) { return it.label == label; }));
    const double got = static_cast<double>(std::count_if(r.train.begin(), r.train.end(), [&](std::size_t i) { return items[i].label == label; }));
    EXPECT_LE(std::abs(got - n * 126.0 / 162.0), 1.0);
  }
}

TEST(Split, SmallClusterExcludedFromTraining) {
  std::vector<SplitItem> items;
  const std::size_t sizes[] = {7, 4, 6};
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < sizes[c]; ++i) items.push_back({1, "seq" + std::to_string(c), static_cast<double>(i)});
  const auto clusters = cluster_sizes(items, 1.0);
  EXPECT_EQ(clusters[0], 7u);
  EXPECT_EQ(clusters[7], 4u);
  EXPECT_EQ(clusters[11], 6u);
  SplitOptions options;
  options.train_ratio = 1.0;
  options.test_ratio = 0.0;
  const auto r = split_and_filter(items, options);
  EXPECT_EQ(r.excluded, (std::vector<std::size_t>{7, 8, 9, 10}));
  EXPECT_EQ(r.train.size(), 13u);
}

TEST(Split, ClassWithoutTrainingRejected) {
  std::vector<SplitItem> items;
  for (std::size_t i = 0; i < 3; ++i) items.push_back({2, "a", static_cast<double>(i)});
  for (std::size_t i = 0; i < 6; ++i) items.push_back({1, "b", static_cast<double>(i)});
  SplitOptions options;
  options.train_ratio = 1.0;
  options.test_ratio = 0.0;
  EXPECT_THROW(split_and_filter(items, options), DataError);
}

TEST(Manifest, RoundTripAndValidation) {
  const std::string csv = std::string(kManifestHeader) +
                          "\nseq1,f0.pgm,-3.5,1,1,train\nseq1,f1.pgm,-2.0,1,1,train\nseq2,g0.pgm,-1.0,3,5,test\n";
  const auto entries = parse_manifest(csv);
  ASSERT_EQ(entries.size(), 3u);
  EXPECT_EQ(entries[2].motion_label, 3u);
  EXPECT_EQ(entries[2].intersection_label, 5u);
  EXPECT_EQ(parse_manifest(format_manifest(entries)).size(), 3u);

  EXPECT_THROW(parse_manifest("bad,header\n"), DataError);
  EXPECT_THROW(parse_manifest(std::string(kManifestHeader) + "\ns,f,-1,4,1,train\n"), DataError);
  EXPECT_THROW(parse_manifest(std::string(kManifestHeader) + "\ns,f,-1,1,8,train\n"), DataError);
  EXPECT_THROW(parse_manifest(std::string(kManifestHeader) + "\ns,f,-1,1,1,val\n"), DataError);
  EXPECT_THROW(parse_manifest(std::string(kManifestHeader) + "\ns,f,-1,1,1\n"), DataError);
  EXPECT_THROW(parse_manifest(std::string(kManifestHeader) + "\ns,f,-1,1,1,train\ns,g,-2,1,1,train\n"), DataError);
}

TEST(Manifest, LoadReadsFramesAndNamesMissingPath) {
  const auto dir = std::filesystem::temp_directory_path() / "crossing_manifest_test";
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  image::write_pnm(dir / "a.pgm", Tensor::filled({4, 4}, 0.5));
  image::write_pnm(dir / "b.pgm", Tensor::filled({4, 4}, 0.25));
  std::ofstream(dir / "manifest.csv") << kManifestHeader << "\ns,a.pgm,-2,2,2,train\ns,b.pgm,-1,2,2,train\n";
  const auto loaded = load_manifest(dir / "manifest.csv");
  ASSERT_EQ(loaded.size(), 1u);
  EXPECT_EQ(loaded[0].sample.frames.size(), 2u);
  EXPECT_EQ(loaded[0].sample.motion_label, 1u);
  EXPECT_EQ(loaded[0].split, "train");
  std::ofstream(dir / "manifest.csv") << kManifestHeader << "\ns,missing.pgm,-2,2,2,train\n";
  try {
    load_manifest(dir / "manifest.csv");
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("missing.pgm"), std::string::npos);
  }
  std::filesystem::remove_all(dir);
}

TEST(Corpus, SizesAndDeterminism) {
  DatasetConfig config;
  config.train_per_class = 2;
  config.test_per_class = 1;
  config.sequence_train_per_class = 1;
  config.sequence_test_per_class = 1;
  const auto a = make_scene_corpus(config, 5), b = make_scene_corpus(config, 5);
  ASSERT_EQ(a.train.size(), 14u);
  ASSERT_EQ(a.test.size(), 7u);
  for (std::size_t i = 0; i < a.train.size(); ++i) EXPECT_TRUE(same_pixels(a.train[i].image, b.train[i].image));
  const auto seqs = make_sequence_corpus(config, 5);
  EXPECT_EQ(seqs.train.size(), 3u);
  EXPECT_EQ(seqs.test.size(), 3u);
  EXPECT_EQ(DatasetConfig::from_json(config.to_json()).to_json(), config.to_json());
}

}  // namespace
}  // namespace crossing::dataset
