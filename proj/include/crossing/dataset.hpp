#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "crossing/fpv.hpp"
#include "crossing/tensor.hpp"
#include "crossing/tnet.hpp"
#include "json.hpp"

namespace crossing::dataset {

/// Corridors that leave the intersection, seen from the approach road.
struct Arms {
  bool ahead = false;
  bool right = false;
  bool left = false;
};

// 1 ahead, 2 right, 3 left, 4 ahead+right, 5 ahead+left, 6 right+left, 7 all.
Arms class_arms(std::size_t label);
// Horizontal mirroring swaps 2 with 3 and 4 with 5; 1, 6 and 7 map to themselves.
std::size_t mirror_label(std::size_t label);
// Whether the class geometry has the corridor a 0-based motion leaves by.
bool motion_fits_class(std::size_t motion, std::size_t label);

/// Renderer and viewpoint settings shared by scenes and sequences.
struct SceneParams {
  std::size_t image_size = 64;
  std::size_t supersample = 2;
  double fov_deg = 100.0;
  double camera_height = 1.6;
  double pitch_deg = -6.0;
  double road_width_min = 5.5;
  double road_width_max = 8.0;
  double sidewalk = 1.5;
  // The camera stands this far (metres) before the near edge of the crossing road.
  double approach_min = 0.0;
  double approach_max = 5.0;
  double lateral_jitter = 0.5;
  double yaw_jitter_deg = 4.0;
  double wall_height_min = 5.0;
  double wall_height_max = 14.0;
  double texture_amplitude = 1.0;
  double distractor_probability = 0.3;
  double fog_distance = 70.0;
  // Chance of a vehicle parked at each kerb just before the crossing.
  double vehicle_probability = 0.5;
  // Draw the relative brightness of differently oriented walls per scene.
  bool random_sun = true;

  void validate() const;
  nlohmann::json to_json() const;
  // Missing keys keep their defaults; unknown keys are rejected.
  static SceneParams from_json(const nlohmann::json& j);
};

/// One third-person approach view.
struct SceneSample {
  Tensor image;  // (H,W,3) in [0,1]
  std::size_t label = 0;
  std::uint64_t seed = 0;
  double road_width = 0.0;
  double approach_distance = 0.0;
  double lateral_offset = 0.0;
  double yaw_deg = 0.0;
  std::uint64_t texture_seed = 0;
  bool distractor = false;
  int vehicles = 0;  // bit 0: parked vehicle on the right kerb, bit 1: on the left
};

SceneSample generate_scene(std::size_t label, std::uint64_t seed, const SceneParams& params = {});
// Mirrors the pixels and relabels by the mirror rule.
SceneSample mirror_scene(const SceneSample& scene);

struct SequenceParams {
  SceneParams scene{.image_size = 48, .lateral_jitter = 0.3, .yaw_jitter_deg = 0.0, .distractor_probability = 0.0};
  std::size_t frames = 12;
  double speed_min = 0.8;  // metres per frame
  double speed_max = 1.2;
  double turn_radius_min = 7.0;
  double turn_radius_max = 10.0;
  double start_distance = 8.0;  // metres before the intersection centre

  void validate() const;
  nlohmann::json to_json() const;
  static SequenceParams from_json(const nlohmann::json& j);
};

/// A first-person passage: frames with along-track distance to the
/// intersection centre (negative before it).
struct SequenceSample {
  std::string id;
  std::vector<Tensor> frames;  // (H,W) grayscale
  std::vector<double> pose_track;
  std::size_t motion_label = 0;        // 0-based motion class
  std::size_t intersection_label = 0;  // 1..7
  std::uint64_t seed = 0;
  double speed = 0.0;
};

// speed_override, when non-negative, replaces the sampled speed.
SequenceSample generate_sequence(std::size_t motion, std::uint64_t seed, const SequenceParams& params = {},
                                 double speed_override = -1.0);
// Mirrors every frame and swaps the turn labels.
SequenceSample mirror_sequence(const SequenceSample& seq);

/// Indices of track entries d with -l2 <= d <= -l1. Throws DataError when
/// nothing falls in the window.
std::vector<std::size_t> slice_approach(const std::vector<double>& track, double l1, double l2);
SequenceSample slice_approach(const SequenceSample& seq, double l1, double l2);

/// One sample offered to the splitter. Samples of the same sequence whose
/// times are at most `max_gap` apart form a cluster.
struct SplitItem {
  std::size_t label = 0;
  std::string sequence_id;
  double time = 0.0;
};

struct SplitOptions {
  double train_ratio = 126.0;
  double test_ratio = 36.0;
  std::size_t min_cluster = 5;
  double max_gap = 1.0;
  std::uint64_t seed = 1;
};

struct SplitResult {
  std::vector<std::size_t> train;     // indices into the input, ascending
  std::vector<std::size_t> test;
  std::vector<std::size_t> excluded;  // drawn for training but in a small cluster
};

// Cluster sizes per item, by sequence and time contiguity.
std::vector<std::size_t> cluster_sizes(const std::vector<SplitItem>& items, double max_gap);

/// Stratified seeded split: round(N * train / (train + test)) samples go to
/// training, allotted to classes by largest remainder. Training samples in
/// clusters smaller than min_cluster are then excluded. Throws DataError
/// when a class ends with no training samples.
SplitResult split_and_filter(const std::vector<SplitItem>& items, const SplitOptions& options);

// ---- KITTI-style manifest ----

inline constexpr std::string_view kManifestHeader =
    "sequence_id,frame_path,distance_m,motion_label,intersection_label,split";

struct ManifestEntry {
  std::string sequence_id;
  std::string frame_path;  // relative to the manifest directory unless absolute
  double distance_m = 0.0;
  std::size_t motion_label = 0;        // 1..3 in the file
  std::size_t intersection_label = 0;  // 1..7
  std::string split;                   // "train" or "test"
};

// Validates the header, field counts, labels, split tags and per-sequence
// monotone distances. Throws DataError naming the line.
std::vector<ManifestEntry> parse_manifest(std::string_view csv);
std::string format_manifest(const std::vector<ManifestEntry>& entries);

struct LoadedSequence {
  SequenceSample sample;
  std::string split;
};

// Reads every referenced frame (PGM, or PPM converted to luma) relative to
// the manifest's directory. Missing files raise DataError naming the path.
std::vector<LoadedSequence> load_manifest(const std::filesystem::path& manifest_path);

// ---- synthetic corpora ----

struct DatasetConfig {
  std::size_t train_per_class = 120;
  std::size_t test_per_class = 20;
  SceneParams scene;
  std::size_t sequence_train_per_class = 60;
  std::size_t sequence_test_per_class = 20;
  SequenceParams sequence;

  nlohmann::json to_json() const;
  static DatasetConfig from_json(const nlohmann::json& j);
};

struct SceneCorpus {
  std::vector<SceneSample> train;
  std::vector<SceneSample> test;
};

// Class-major order; every scene has its own seed derived from `seed`.
SceneCorpus make_scene_corpus(const DatasetConfig& config, std::uint64_t seed);

struct SequenceCorpus {
  std::vector<SequenceSample> train;
  std::vector<SequenceSample> test;
};

SequenceCorpus make_sequence_corpus(const DatasetConfig& config, std::uint64_t seed);

std::vector<tnet::LabeledImage> labeled_images(const std::vector<SceneSample>& scenes);

}  // namespace crossing::dataset
