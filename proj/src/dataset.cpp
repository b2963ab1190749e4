#include "crossing/dataset.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <numbers>
#include <numeric>
#include <set>
#include <sstream>

#include "crossing/errors.hpp"
#include "crossing/image.hpp"
#include "crossing/io_util.hpp"
#include "crossing/parallel.hpp"
#include "crossing/random.hpp"

namespace crossing::dataset {

namespace {

constexpr double kDeg = std::numbers::pi / 180.0;
constexpr double kFar = 150.0;

void check_label(std::size_t label) {
  if (label < 1 || label > tnet::kNumIntersectionClasses) {
    throw ConfigError("intersection label " + std::to_string(label) + " outside 1..7");
  }
}

// ---- procedural texture ----

double lattice(std::int64_t ix, std::int64_t iy, std::uint64_t seed) {
  const std::uint64_t key = static_cast<std::uint64_t>(ix) * 0x9E3779B97F4A7C15ULL ^
                            static_cast<std::uint64_t>(iy) * 0xC2B2AE3D27D4EB4FULL;
  return static_cast<double>(derive_seed(seed, key) >> 11) * 0x1.0p-53;
}

// Smooth value noise in [0,1].
double value_noise(double x, double y, std::uint64_t seed) {
  const double fx = std::floor(x), fy = std::floor(y);
  const auto ix = static_cast<std::int64_t>(fx), iy = static_cast<std::int64_t>(fy);
  double tx = x - fx, ty = y - fy;
  tx = tx * tx * (3.0 - 2.0 * tx);
  ty = ty * ty * (3.0 - 2.0 * ty);
  const double a = lattice(ix, iy, seed), b = lattice(ix + 1, iy, seed);
  const double c = lattice(ix, iy + 1, seed), d = lattice(ix + 1, iy + 1, seed);
  return (a + (b - a) * tx) + ((c + (d - c) * tx) - (a + (b - a) * tx)) * ty;
}

// Two octaves, centred on zero, roughly in [-0.5, 0.5].
double texture(double x, double y, std::uint64_t seed) {
  return 0.65 * (value_noise(x, y, seed) - 0.5) + 0.35 * (value_noise(2.7 * x, 2.7 * y, seed ^ 0x5bd1e995) - 0.5);
}

struct Rgb {
  double r = 0, g = 0, b = 0;
};

Rgb mix(const Rgb& a, const Rgb& b, double t) {
  return {a.r + (b.r - a.r) * t, a.g + (b.g - a.g) * t, a.b + (b.b - a.b) * t};
}

Rgb scaled(const Rgb& c, double f) { return {c.r * f, c.g * f, c.b * f}; }

// ---- scene geometry ----

struct Rect {
  double x0, x1, y0, y1;
  bool paved;  // the whole rectangle is road surface

  bool contains(double x, double y) const { return x >= x0 && x <= x1 && y >= y0 && y <= y1; }
};

// A parked vehicle standing on the ground.
struct Box {
  double x0, x1, y0, y1, height;
  Rgb body;
};

struct World {
  std::vector<Rect> free;   // open space between buildings
  std::vector<Rect> roads;  // asphalt strips inside the open space
  std::vector<Box> vehicles;
  std::uint64_t texture_seed = 0;
  double amplitude = 1.0;
  double height_min = 5.0, height_max = 14.0;
  Rgb wall, road, sidewalk, sky_horizon, sky_zenith;
  double fog = 70.0;
  double side_shade = 0.78;  // brightness of walls facing along x relative to those facing along y
};

struct Camera {
  double x = 0, y = 0, z = 1.6;
  double heading = 0.0;  // radians, positive turns right
  double pitch = 0.0;
};

World build_world(std::size_t label, double road_width, double sidewalk, Rng& rng, const SceneParams& params,
                  bool* distractor) {
  const Arms arms = class_arms(label);
  const double r = road_width / 2.0;
  const double h = r + sidewalk;
  World w;
  w.free.push_back({-h, h, -kFar, arms.ahead ? kFar : h, false});
  w.roads.push_back({-r, r, -kFar, arms.ahead ? kFar : r, true});
  if (arms.right) {
    w.free.push_back({-h, kFar, -h, h, false});
    w.roads.push_back({-r, kFar, -r, r, true});
  }
  if (arms.left) {
    w.free.push_back({-kFar, h, -h, h, false});
    w.roads.push_back({-kFar, r, -r, r, true});
  }
  const bool alley = rng.bernoulli(params.distractor_probability);
  const double alley_width = rng.uniform(1.6, 2.6);
  const double alley_offset = rng.uniform(-0.4, 0.4) * r;
  const double alley_pos = rng.uniform(4.0, 10.0);
  const bool alley_right = rng.bernoulli(0.5);
  if (alley) {
    Rect a{};
    if (!arms.ahead) {
      // Narrow dead-end passage through the wall that closes the road ahead.
      a = {alley_offset - alley_width / 2, alley_offset + alley_width / 2, h - 0.01, h + 30.0, true};
    } else if (alley_right) {
      a = {h - 0.01, h + 30.0, h + alley_pos, h + alley_pos + alley_width, true};
    } else {
      a = {-h - 30.0, -h + 0.01, h + alley_pos, h + alley_pos + alley_width, true};
    }
    w.free.push_back(a);
    w.roads.push_back(a);
  }
  if (distractor) *distractor = alley;

  w.texture_seed = rng.next();
  w.amplitude = params.texture_amplitude;
  w.height_min = params.wall_height_min;
  w.height_max = params.wall_height_max;
  static const std::array<Rgb, 4> kWalls = {Rgb{0.62, 0.38, 0.30}, Rgb{0.78, 0.72, 0.60}, Rgb{0.58, 0.58, 0.60},
                                            Rgb{0.70, 0.62, 0.48}};
  const Rgb base = kWalls[rng.index(kWalls.size())];
  const double tint = rng.uniform(0.85, 1.1);
  w.wall = scaled(base, tint);
  const double asphalt = rng.uniform(0.26, 0.38);
  w.road = {asphalt, asphalt, asphalt * 1.04};
  const double paving = rng.uniform(0.55, 0.68);
  w.sidewalk = {paving, paving * 0.97, paving * 0.92};
  const double haze = rng.uniform(0.0, 0.1);
  w.sky_horizon = {0.78 + haze, 0.84 + haze * 0.5, 0.92};
  w.sky_zenith = {0.42 + haze, 0.58 + haze, 0.86};
  w.fog = params.fog_distance;
  w.side_shade = params.random_sun ? rng.uniform(0.6, 1.15) : 0.78;
  return w;
}

double wall_height(const World& w, bool x_face, double along, double side) {
  const auto seg = static_cast<std::int64_t>(std::floor(along / 8.0));
  const std::uint64_t key = (x_face ? 1u : 2u) + (side > 0 ? 4u : 0u);
  const double u = lattice(seg, static_cast<std::int64_t>(key), w.texture_seed ^ 0xA5A5A5A5ULL);
  const double mid = 0.5 * (w.height_min + w.height_max);
  return mid + (u - 0.5) * (w.height_max - w.height_min) * std::min(1.0, w.amplitude);
}

Rgb shade_ray(const World& w, const Camera& cam, double dx, double dy, double dz) {
  const double horizontal = std::hypot(dx, dy);
  const double sky_t = std::clamp(dz / std::max(1e-9, std::hypot(horizontal, dz)) * 2.0, 0.0, 1.0);
  const Rgb sky = mix(w.sky_horizon, w.sky_zenith, sky_t);

  // Exit from the union of open rectangles, following the ray through overlaps.
  double t = 0.0;
  bool x_face = false;
  for (int iter = 0; iter < 16; ++iter) {
    const double px = cam.x + (t + 1e-9) * dx, py = cam.y + (t + 1e-9) * dy;
    double best = -1.0;
    bool best_x_face = false;
    for (const Rect& r : w.free) {
      if (!r.contains(px, py)) continue;
      const double tx = dx > 0 ? (r.x1 - cam.x) / dx : dx < 0 ? (r.x0 - cam.x) / dx : INFINITY;
      const double ty = dy > 0 ? (r.y1 - cam.y) / dy : dy < 0 ? (r.y0 - cam.y) / dy : INFINITY;
      const double exit = std::min(tx, ty);
      if (exit > best) {
        best = exit;
        best_x_face = tx < ty;
      }
    }
    if (best <= t) break;
    t = best;
    x_face = best_x_face;
  }
  const double t_ground = dz < 0.0 ? -cam.z / dz : INFINITY;

  // Nearest vehicle hit by slab intersection; `face` is 0 for x, 1 for y, 2 for the roof.
  double t_box = INFINITY;
  int box_face = 0;
  const Box* hit = nullptr;
  for (const Box& b : w.vehicles) {
    const double o[3] = {cam.x, cam.y, cam.z}, d[3] = {dx, dy, dz};
    const double lo[3] = {b.x0, b.y0, 0.0}, hi[3] = {b.x1, b.y1, b.height};
    double enter = 0.0, exit = INFINITY;
    int face = -1;
    bool miss = false;
    for (int a = 0; a < 3 && !miss; ++a) {
      if (d[a] == 0.0) {
        miss = o[a] < lo[a] || o[a] > hi[a];
        continue;
      }
      double t0 = (lo[a] - o[a]) / d[a], t1 = (hi[a] - o[a]) / d[a];
      if (t0 > t1) std::swap(t0, t1);
      if (t0 > enter) {
        enter = t0;
        face = a;
      }
      exit = std::min(exit, t1);
      miss = enter > exit;
    }
    if (!miss && face >= 0 && enter < t_box) {
      t_box = enter;
      box_face = face;
      hit = &b;
    }
  }

  Rgb color;
  double distance;
  if (hit && t_box <= t && t_box <= t_ground) {
    const double hz = cam.z + t_box * dz;
    double f = box_face == 0 ? 0.75 : box_face == 1 ? 0.9 : 1.1;
    if (box_face != 2 && hz > 0.55 * hit->height && hz < 0.9 * hit->height) f *= 0.35;  // windows
    if (hz < 0.35) f *= 0.3;                                                           // wheels and shadow
    color = scaled(hit->body, f);
    distance = t_box * horizontal;
  } else if (t_ground <= t) {
    const double gx = cam.x + t_ground * dx, gy = cam.y + t_ground * dy;
    bool on_road = false;
    for (const Rect& r : w.roads) on_road = on_road || r.contains(gx, gy);
    const double n = w.amplitude * texture(gx * 1.3, gy * 1.3, w.texture_seed);
    color = on_road ? scaled(w.road, 1.0 + 0.5 * n) : scaled(w.sidewalk, 1.0 + 0.35 * n);
    distance = t_ground * horizontal;
  } else if (std::isfinite(t)) {
    const double hx = cam.x + t * dx, hy = cam.y + t * dy;
    const double hz = cam.z + t * dz;
    const double along = x_face ? hy : hx;
    const double side = x_face ? hx : hy;
    if (hz > wall_height(w, x_face, along, side)) return sky;
    const double n = texture(along * 0.9, hz * 0.9, w.texture_seed ^ 0x77);
    double f = (x_face ? w.side_shade : 1.0) * (1.0 + 0.45 * w.amplitude * n);
    const double wa = along - 3.0 * std::floor(along / 3.0), wz = hz - 3.0 * std::floor(hz / 3.0);
    if (hz > 2.5 && wa > 1.0 && wa < 2.2 && wz > 1.0 && wz < 2.2) f *= 1.0 - 0.45 * std::min(1.0, w.amplitude);
    color = scaled(w.wall, f);
    distance = t * horizontal;
  } else {
    return sky;
  }
  const double fog = 1.0 - std::exp(-distance / w.fog);
  return mix(color, w.sky_horizon, fog);
}

Tensor render(const World& w, const Camera& cam, std::size_t size, std::size_t supersample, double fov_deg) {
  const double half = std::tan(0.5 * fov_deg * kDeg);
  const double sh = std::sin(cam.heading), ch = std::cos(cam.heading);
  const double sp = std::sin(cam.pitch), cp = std::cos(cam.pitch);
  // forward, right, up in world coordinates
  const double fx = sh * cp, fy = ch * cp, fz = sp;
  const double rx = ch, ry = -sh, rz = 0.0;
  const double ux = -sh * sp, uy = -ch * sp, uz = cp;
  const std::size_t ss = std::max<std::size_t>(1, supersample);
  std::vector<double> out(size * size * 3);
  for (std::size_t row = 0; row < size; ++row) {
    for (std::size_t col = 0; col < size; ++col) {
      Rgb acc;
      for (std::size_t sy = 0; sy < ss; ++sy) {
        for (std::size_t sx = 0; sx < ss; ++sx) {
          const double u = (static_cast<double>(col) + (static_cast<double>(sx) + 0.5) / static_cast<double>(ss)) /
                           static_cast<double>(size);
          const double v = (static_cast<double>(row) + (static_cast<double>(sy) + 0.5) / static_cast<double>(ss)) /
                           static_cast<double>(size);
          const double px = (2.0 * u - 1.0) * half, py = (1.0 - 2.0 * v) * half;
          const Rgb c = shade_ray(w, cam, fx + px * rx + py * ux, fy + px * ry + py * uy, fz + px * rz + py * uz);
          acc.r += c.r;
          acc.g += c.g;
          acc.b += c.b;
        }
      }
      const double norm = 1.0 / static_cast<double>(ss * ss);
      double* dst = &out[(row * size + col) * 3];
      dst[0] = std::clamp(acc.r * norm, 0.0, 1.0);
      dst[1] = std::clamp(acc.g * norm, 0.0, 1.0);
      dst[2] = std::clamp(acc.b * norm, 0.0, 1.0);
    }
  }
  return Tensor({size, size, 3}, std::move(out));
}

// ---- json helpers ----

template <typename T>
void read_key(const nlohmann::json& j, const char* key, T& field) {
  if (j.contains(key)) field = j.at(key).get<T>();
}

void reject_unknown(const nlohmann::json& j, const std::set<std::string>& keys, const std::string& what) {
  if (!j.is_object()) throw ConfigError(what + ": expected a JSON object");
  for (const auto& [key, _] : j.items()) {
    if (!keys.count(key)) throw ConfigError(what + ": unknown key '" + key + "'");
  }
}

}  // namespace

Arms class_arms(std::size_t label) {
  check_label(label);
  switch (label) {
    case 1: return {true, false, false};
    case 2: return {false, true, false};
    case 3: return {false, false, true};
    case 4: return {true, true, false};
    case 5: return {true, false, true};
    case 6: return {false, true, true};
    default: return {true, true, true};
  }
}

std::size_t mirror_label(std::size_t label) {
  check_label(label);
  static constexpr std::array<std::size_t, 8> kMirror = {0, 1, 3, 2, 5, 4, 6, 7};
  return kMirror[label];
}

bool motion_fits_class(std::size_t motion, std::size_t label) {
  const Arms arms = class_arms(label);
  switch (motion) {
    case 0: return arms.ahead;
    case 1: return arms.right;
    case 2: return arms.left;
    default: throw ConfigError("motion class " + std::to_string(motion) + " outside 0..2");
  }
}

void SceneParams::validate() const {
  if (image_size == 0 || supersample == 0) throw ConfigError("scene: image_size and supersample must be positive");
  if (!(fov_deg > 0.0 && fov_deg < 170.0)) throw ConfigError("scene: fov_deg must lie in (0,170)");
  if (!(road_width_min > 0.0 && road_width_max >= road_width_min)) throw ConfigError("scene: bad road width range");
  if (!(approach_min >= 0.0 && approach_max >= approach_min)) throw ConfigError("scene: bad approach range");
  if (!(wall_height_min > 0.0 && wall_height_max >= wall_height_min)) throw ConfigError("scene: bad wall heights");
  if (!(distractor_probability >= 0.0 && distractor_probability <= 1.0)) {
    throw ConfigError("scene: distractor_probability outside [0,1]");
  }
  if (!(vehicle_probability >= 0.0 && vehicle_probability <= 1.0)) {
    throw ConfigError("scene: vehicle_probability outside [0,1]");
  }
  if (!(camera_height > 0.0) || sidewalk < 0.0 || lateral_jitter < 0.0 || yaw_jitter_deg < 0.0 ||
      texture_amplitude < 0.0 || !(fog_distance > 0.0)) {
    throw ConfigError("scene: negative or zero extent in parameters");
  }
}

nlohmann::json SceneParams::to_json() const {
  return nlohmann::json{
      {"image_size", image_size},
      {"supersample", supersample},
      {"fov_deg", fov_deg},
      {"camera_height", camera_height},
      {"pitch_deg", pitch_deg},
      {"road_width_min", road_width_min},
      {"road_width_max", road_width_max},
      {"sidewalk", sidewalk},
      {"approach_min", approach_min},
      {"approach_max", approach_max},
      {"lateral_jitter", lateral_jitter},
      {"yaw_jitter_deg", yaw_jitter_deg},
      {"wall_height_min", wall_height_min},
      {"wall_height_max", wall_height_max},
      {"texture_amplitude", texture_amplitude},
      {"distractor_probability", distractor_probability},
      {"fog_distance", fog_distance},
      {"vehicle_probability", vehicle_probability},
      {"random_sun", random_sun},
  };
}

SceneParams SceneParams::from_json(const nlohmann::json& j) {
  SceneParams p;
  const nlohmann::json defaults = p.to_json();
  std::set<std::string> keys;
  for (const auto& [key, _] : defaults.items()) keys.insert(key);
  reject_unknown(j, keys, "scene params");
  try {
    read_key(j, "image_size", p.image_size);
    read_key(j, "supersample", p.supersample);
    read_key(j, "fov_deg", p.fov_deg);
    read_key(j, "camera_height", p.camera_height);
    read_key(j, "pitch_deg", p.pitch_deg);
    read_key(j, "road_width_min", p.road_width_min);
    read_key(j, "road_width_max", p.road_width_max);
    read_key(j, "sidewalk", p.sidewalk);
    read_key(j, "approach_min", p.approach_min);
    read_key(j, "approach_max", p.approach_max);
    read_key(j, "lateral_jitter", p.lateral_jitter);
    read_key(j, "yaw_jitter_deg", p.yaw_jitter_deg);
    read_key(j, "wall_height_min", p.wall_height_min);
    read_key(j, "wall_height_max", p.wall_height_max);
    read_key(j, "texture_amplitude", p.texture_amplitude);
    read_key(j, "distractor_probability", p.distractor_probability);
    read_key(j, "fog_distance", p.fog_distance);
    read_key(j, "vehicle_probability", p.vehicle_probability);
    read_key(j, "random_sun", p.random_sun);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("scene params: ") + e.what());
  }
  p.validate();
  return p;
}

SceneSample generate_scene(std::size_t label, std::uint64_t seed, const SceneParams& params) {
  check_label(label);
  params.validate();
  Rng rng(seed);
  SceneSample s;
  s.label = label;
  s.seed = seed;
  s.road_width = rng.uniform(params.road_width_min, params.road_width_max);
  s.approach_distance = rng.uniform(params.approach_min, params.approach_max);
  s.lateral_offset = params.lateral_jitter * rng.uniform(-1.0, 1.0);
  s.yaw_deg = params.yaw_jitter_deg * rng.uniform(-1.0, 1.0);
  World world = build_world(label, s.road_width, params.sidewalk, rng, params, &s.distractor);
  s.texture_seed = world.texture_seed;
  const double cam_y = -(s.road_width / 2.0 + s.approach_distance);
  // Vehicles parked at either kerb of the approach road, noses just short of the crossing.
  static const std::array<Rgb, 5> kBodies = {Rgb{0.85, 0.85, 0.86}, Rgb{0.12, 0.12, 0.14}, Rgb{0.55, 0.1, 0.1},
                                             Rgb{0.2, 0.3, 0.55}, Rgb{0.5, 0.52, 0.5}};
  for (const bool right : {true, false}) {
    if (!rng.bernoulli(params.vehicle_probability)) continue;
    const double r = s.road_width / 2.0;
    const double width = rng.uniform(1.7, 2.2), length = rng.uniform(4.0, 6.5), height = rng.uniform(1.4, 2.8);
    const double front = -r - rng.uniform(0.3, 1.5);
    const double kerb_gap = rng.uniform(0.1, 0.4);
    const Rgb body = kBodies[rng.index(kBodies.size())];
    // Keep clear of the camera's own lane.
    const double x0 = right ? std::max(r - kerb_gap - width, s.lateral_offset + 0.6) : -r + kerb_gap;
    const double x1 = right ? r - kerb_gap : std::min(-r + kerb_gap + width, s.lateral_offset - 0.6);
    world.vehicles.push_back({x0, x1, front - length, front, height, body});
    s.vehicles += right ? 1 : 2;
  }
  Camera cam;
  cam.x = s.lateral_offset;
  cam.y = cam_y;
  cam.z = params.camera_height;
  cam.heading = s.yaw_deg * kDeg;
  cam.pitch = params.pitch_deg * kDeg;
  s.image = render(world, cam, params.image_size, params.supersample, params.fov_deg);
  return s;
}

SceneSample mirror_scene(const SceneSample& scene) {
  SceneSample m = scene;
  m.image = image::mirror_horizontal(scene.image);
  m.label = mirror_label(scene.label);
  m.lateral_offset = -scene.lateral_offset;
  m.yaw_deg = -scene.yaw_deg;
  m.vehicles = scene.vehicles == 1 ? 2 : scene.vehicles == 2 ? 1 : scene.vehicles;
  return m;
}

void SequenceParams::validate() const {
  scene.validate();
  if (frames < 2) throw ConfigError("sequence: at least 2 frames are required");
  if (!(speed_min >= 0.0 && speed_max >= speed_min)) throw ConfigError("sequence: bad speed range");
  if (!(turn_radius_min > 0.0 && turn_radius_max >= turn_radius_min)) throw ConfigError("sequence: bad turn radius");
  if (!(start_distance > 0.0)) throw ConfigError("sequence: start_distance must be positive");
}

nlohmann::json SequenceParams::to_json() const {
  return nlohmann::json{
      {"scene", scene.to_json()},       {"frames", frames},
      {"speed_min", speed_min},         {"speed_max", speed_max},
      {"turn_radius_min", turn_radius_min}, {"turn_radius_max", turn_radius_max},
      {"start_distance", start_distance},
  };
}

SequenceParams SequenceParams::from_json(const nlohmann::json& j) {
  SequenceParams p;
  reject_unknown(j,
                 {"scene", "frames", "speed_min", "speed_max", "turn_radius_min", "turn_radius_max", "start_distance"},
                 "sequence params");
  try {
    if (j.contains("scene")) {
      nlohmann::json merged = p.scene.to_json();
      reject_unknown(j.at("scene"), [&] {
        std::set<std::string> keys;
        for (const auto& [key, _] : merged.items()) keys.insert(key);
        return keys;
      }(), "sequence scene params");
      merged.update(j.at("scene"));
      p.scene = SceneParams::from_json(merged);
    }
    read_key(j, "frames", p.frames);
    read_key(j, "speed_min", p.speed_min);
    read_key(j, "speed_max", p.speed_max);
    read_key(j, "turn_radius_min", p.turn_radius_min);
    read_key(j, "turn_radius_max", p.turn_radius_max);
    read_key(j, "start_distance", p.start_distance);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("sequence params: ") + e.what());
  }
  p.validate();
  return p;
}

SequenceSample generate_sequence(std::size_t motion, std::uint64_t seed, const SequenceParams& params,
                                 double speed_override) {
  if (motion >= fpv::kNumMotionClasses) throw ConfigError("motion class " + std::to_string(motion) + " outside 0..2");
  params.validate();
  Rng rng(seed);
  std::vector<std::size_t> fitting;
  for (std::size_t c = 1; c <= tnet::kNumIntersectionClasses; ++c) {
    if (motion_fits_class(motion, c)) fitting.push_back(c);
  }
  SequenceSample s;
  s.seed = seed;
  s.motion_label = motion;
  s.intersection_label = fitting[rng.index(fitting.size())];
  const double road_width = rng.uniform(params.scene.road_width_min, params.scene.road_width_max);
  const double lateral = params.scene.lateral_jitter * rng.uniform(-1.0, 1.0);
  const double sampled_speed = rng.uniform(params.speed_min, params.speed_max);
  s.speed = speed_override >= 0.0 ? speed_override : sampled_speed;
  double radius = rng.uniform(params.turn_radius_min, params.turn_radius_max);
  // Never turn past a right angle within the sequence.
  const double travel = s.speed * static_cast<double>(params.frames - 1);
  radius = std::max(radius, travel / (0.5 * std::numbers::pi));
  World world = build_world(s.intersection_label, road_width, params.scene.sidewalk, rng, params.scene, nullptr);

  const double sign = motion == 1 ? 1.0 : motion == 2 ? -1.0 : 0.0;
  for (std::size_t t = 0; t < params.frames; ++t) {
    const double arc = s.speed * static_cast<double>(t);
    Camera cam;
    cam.z = params.scene.camera_height;
    cam.pitch = params.scene.pitch_deg * kDeg;
    if (motion == 0) {
      cam.x = lateral;
      cam.y = -params.start_distance + arc;
    } else {
      const double angle = arc / radius;
      cam.x = lateral + sign * radius * (1.0 - std::cos(angle));
      cam.y = -params.start_distance + radius * std::sin(angle);
      cam.heading = sign * angle;
    }
    s.frames.push_back(image::to_grayscale(
        render(world, cam, params.scene.image_size, params.scene.supersample, params.scene.fov_deg)));
    s.pose_track.push_back(-params.start_distance + arc);
  }
  s.id = "synthetic-" + std::to_string(seed);
  return s;
}

SequenceSample mirror_sequence(const SequenceSample& seq) {
  SequenceSample m = seq;
  for (auto& f : m.frames) f = image::mirror_horizontal(f);
  m.motion_label = fpv::mirror_motion(seq.motion_label);
  m.intersection_label = mirror_label(seq.intersection_label);
  m.id = seq.id + "-mirror";
  return m;
}

std::vector<std::size_t> slice_approach(const std::vector<double>& track, double l1, double l2) {
  if (!(l1 >= 0.0) || !(l2 > l1)) {
    throw ConfigError("slice_approach: need L2 > L1 >= 0, got L1=" + std::to_string(l1) + " L2=" + std::to_string(l2));
  }
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < track.size(); ++i) {
    if (track[i] >= -l2 && track[i] <= -l1) out.push_back(i);
  }
  if (out.empty()) throw DataError("slice_approach: no frames within [-L2, -L1]");
  return out;
}

SequenceSample slice_approach(const SequenceSample& seq, double l1, double l2) {
  if (seq.frames.size() != seq.pose_track.size()) throw DataError("sequence " + seq.id + ": frames and track differ");
  SequenceSample out = seq;
  out.frames.clear();
  out.pose_track.clear();
  try {
    for (std::size_t i : slice_approach(seq.pose_track, l1, l2)) {
      out.frames.push_back(seq.frames[i]);
      out.pose_track.push_back(seq.pose_track[i]);
    }
  } catch (const DataError& e) {
    throw DataError("sequence " + seq.id + ": " + e.what());
  }
  return out;
}

std::vector<std::size_t> cluster_sizes(const std::vector<SplitItem>& items, double max_gap) {
  std::map<std::string, std::vector<std::size_t>> by_sequence;
  for (std::size_t i = 0; i < items.size(); ++i) by_sequence[items[i].sequence_id].push_back(i);
  std::vector<std::size_t> sizes(items.size(), 0);
  for (auto& [_, members] : by_sequence) {
    std::stable_sort(members.begin(), members.end(),
                     [&](std::size_t a, std::size_t b) { return items[a].time < items[b].time; });
    std::size_t start = 0;
    for (std::size_t k = 1; k <= members.size(); ++k) {
      if (k == members.size() || items[members[k]].time - items[members[k - 1]].time > max_gap) {
        for (std::size_t q = start; q < k; ++q) sizes[members[q]] = k - start;
        start = k;
      }
    }
  }
  return sizes;
}

SplitResult split_and_filter(const std::vector<SplitItem>& items, const SplitOptions& options) {
  if (items.empty()) throw DataError("split: no samples");
  if (!(options.train_ratio > 0.0) || !(options.test_ratio >= 0.0)) throw ConfigError("split: bad ratio");
  std::map<std::size_t, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < items.size(); ++i) by_class[items[i].label].push_back(i);

  const double n = static_cast<double>(items.size());
  const double fraction = options.train_ratio / (options.train_ratio + options.test_ratio);
  const auto train_total = static_cast<std::size_t>(std::llround(n * fraction));
  std::map<std::size_t, std::size_t> quota;
  std::vector<std::pair<double, std::size_t>> remainders;
  std::size_t assigned = 0;
  for (const auto& [label, members] : by_class) {
    const double exact = static_cast<double>(members.size()) * static_cast<double>(train_total) / n;
    quota[label] = static_cast<std::size_t>(std::floor(exact));
    assigned += quota[label];
    remainders.emplace_back(exact - std::floor(exact), label);
  }
  std::stable_sort(remainders.begin(), remainders.end(),
                   [](const auto& a, const auto& b) { return a.first > b.first; });
  for (std::size_t k = 0; assigned < train_total && k < remainders.size(); ++k, ++assigned) {
    ++quota[remainders[k].second];
  }

  const auto sizes = cluster_sizes(items, options.max_gap);
  Rng rng(options.seed);
  SplitResult result;
  for (auto& [label, members] : by_class) {
    std::vector<std::size_t> order = members;
    std::shuffle(order.begin(), order.end(), rng.engine());
    std::size_t kept = 0;
    for (std::size_t k = 0; k < order.size(); ++k) {
      const std::size_t i = order[k];
      if (k >= quota[label]) {
        result.test.push_back(i);
      } else if (sizes[i] < options.min_cluster) {
        result.excluded.push_back(i);
      } else {
        result.train.push_back(i);
        ++kept;
      }
    }
    if (kept == 0) {
      throw DataError("split: class " + std::to_string(label) + " has no training samples after removing clusters "
                      "smaller than " + std::to_string(options.min_cluster));
    }
  }
  std::sort(result.train.begin(), result.train.end());
  std::sort(result.test.begin(), result.test.end());
  std::sort(result.excluded.begin(), result.excluded.end());
  return result;
}

// ---- manifest ----

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> fields;
  std::string field;
  std::istringstream in(line);
  while (std::getline(in, field, ',')) fields.push_back(field);
  if (!line.empty() && line.back() == ',') fields.emplace_back();
  return fields;
}

std::size_t parse_label(const std::string& text, std::size_t lo, std::size_t hi, const std::string& where) {
  std::size_t pos = 0;
  unsigned long value = 0;
  try {
    value = std::stoul(text, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  if (pos == 0 || pos != text.size() || value < lo || value > hi) {
    throw DataError(where + ": label '" + text + "' outside " + std::to_string(lo) + ".." + std::to_string(hi));
  }
  return value;
}

}  // namespace

std::vector<ManifestEntry> parse_manifest(std::string_view csv) {
  std::istringstream in{std::string(csv)};
  std::string line;
  if (!std::getline(in, line)) throw DataError("manifest: empty file");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != kManifestHeader) {
    throw DataError("manifest: header must be '" + std::string(kManifestHeader) + "', got '" + line + "'");
  }
  std::vector<ManifestEntry> entries;
  std::map<std::string, double> last_distance;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const std::string where = "manifest line " + std::to_string(line_no);
    const auto fields = split_csv_line(line);
    if (fields.size() != 6) throw DataError(where + ": expected 6 fields, got " + std::to_string(fields.size()));
    ManifestEntry e;
    e.sequence_id = fields[0];
    e.frame_path = fields[1];
    if (e.sequence_id.empty() || e.frame_path.empty()) throw DataError(where + ": empty sequence id or path");
    std::size_t pos = 0;
    try {
      e.distance_m = std::stod(fields[2], &pos);
    } catch (const std::exception&) {
      pos = 0;
    }
    if (pos == 0 || pos != fields[2].size() || !std::isfinite(e.distance_m)) {
      throw DataError(where + ": bad distance '" + fields[2] + "'");
    }
    e.motion_label = parse_label(fields[3], 1, fpv::kNumMotionClasses, where);
    e.intersection_label = parse_label(fields[4], 1, tnet::kNumIntersectionClasses, where);
    e.split = fields[5];
    if (e.split != "train" && e.split != "test") throw DataError(where + ": split must be train or test");
    auto it = last_distance.find(e.sequence_id);
    if (it != last_distance.end() && e.distance_m < it->second) {
      throw DataError(where + ": distances of sequence '" + e.sequence_id + "' are not monotone");
    }
    last_distance[e.sequence_id] = e.distance_m;
    entries.push_back(std::move(e));
  }
  return entries;
}

std::string format_manifest(const std::vector<ManifestEntry>& entries) {
  std::ostringstream out;
  out << kManifestHeader << '\n';
  for (const auto& e : entries) {
    char distance[64];
    std::snprintf(distance, sizeof distance, "%.6f", e.distance_m);
    out << e.sequence_id << ',' << e.frame_path << ',' << distance << ',' << e.motion_label << ','
        << e.intersection_label << ',' << e.split << '\n';
  }
  return out.str();
}

std::vector<LoadedSequence> load_manifest(const std::filesystem::path& manifest_path) {
  const auto entries = parse_manifest(read_file(manifest_path));
  const auto base = manifest_path.parent_path();
  std::vector<LoadedSequence> out;
  std::map<std::string, std::size_t> index;
  for (const auto& e : entries) {
    auto it = index.find(e.sequence_id);
    if (it == index.end()) {
      it = index.emplace(e.sequence_id, out.size()).first;
      LoadedSequence seq;
      seq.sample.id = e.sequence_id;
      seq.sample.motion_label = e.motion_label - 1;
      seq.sample.intersection_label = e.intersection_label;
      seq.split = e.split;
      out.push_back(std::move(seq));
    }
    LoadedSequence& seq = out[it->second];
    if (seq.sample.motion_label != e.motion_label - 1 || seq.sample.intersection_label != e.intersection_label ||
        seq.split != e.split) {
      throw DataError("manifest: sequence '" + e.sequence_id + "' has inconsistent labels or split");
    }
    std::filesystem::path frame = e.frame_path;
    if (frame.is_relative()) frame = base / frame;
    if (!std::filesystem::exists(frame)) throw DataError("manifest: missing frame file " + frame.string());
    Tensor img = image::read_pnm(frame);
    if (img.rank() == 3) img = image::to_grayscale(img);
    seq.sample.frames.push_back(std::move(img));
    seq.sample.pose_track.push_back(e.distance_m);
  }
  return out;
}

// ---- corpora ----

nlohmann::json DatasetConfig::to_json() const {
  return nlohmann::json{
      {"train_per_class", train_per_class},
      {"test_per_class", test_per_class},
      {"scene", scene.to_json()},
      {"sequence_train_per_class", sequence_train_per_class},
      {"sequence_test_per_class", sequence_test_per_class},
      {"sequence", sequence.to_json()},
  };
}

DatasetConfig DatasetConfig::from_json(const nlohmann::json& j) {
  DatasetConfig c;
  reject_unknown(j,
                 {"train_per_class", "test_per_class", "scene", "sequence_train_per_class", "sequence_test_per_class",
                  "sequence"},
                 "dataset config");
  try {
    read_key(j, "train_per_class", c.train_per_class);
    read_key(j, "test_per_class", c.test_per_class);
    read_key(j, "sequence_train_per_class", c.sequence_train_per_class);
    read_key(j, "sequence_test_per_class", c.sequence_test_per_class);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("dataset config: ") + e.what());
  }
  if (j.contains("scene")) c.scene = SceneParams::from_json(j.at("scene"));
  if (j.contains("sequence")) c.sequence = SequenceParams::from_json(j.at("sequence"));
  return c;
}

namespace {

std::uint64_t sample_stream(std::uint64_t kind, std::uint64_t split, std::uint64_t label, std::uint64_t index) {
  return (kind << 48) | (split << 40) | (label << 32) | index;
}

}  // namespace

SceneCorpus make_scene_corpus(const DatasetConfig& config, std::uint64_t seed) {
  config.scene.validate();
  SceneCorpus corpus;
  const std::size_t k = tnet::kNumIntersectionClasses;
  for (std::uint64_t split = 0; split < 2; ++split) {
    const std::size_t per = split == 0 ? config.train_per_class : config.test_per_class;
    auto& out = split == 0 ? corpus.train : corpus.test;
    out.resize(per * k);
    parallel_for(out.size(), [&](std::size_t i) {
      const std::size_t label = i / per + 1;
      out[i] = generate_scene(label, derive_seed(seed, sample_stream(1, split, label, i % per)), config.scene);
    });
  }
  return corpus;
}

SequenceCorpus make_sequence_corpus(const DatasetConfig& config, std::uint64_t seed) {
  config.sequence.validate();
  SequenceCorpus corpus;
  const std::size_t k = fpv::kNumMotionClasses;
  for (std::uint64_t split = 0; split < 2; ++split) {
    const std::size_t per = split == 0 ? config.sequence_train_per_class : config.sequence_test_per_class;
    auto& out = split == 0 ? corpus.train : corpus.test;
    out.resize(per * k);
    parallel_for(out.size(), [&](std::size_t i) {
      const std::size_t motion = i / per;
      out[i] = generate_sequence(motion, derive_seed(seed, sample_stream(2, split, motion, i % per)), config.sequence);
      out[i].id = std::string(split == 0 ? "train" : "test") + "-m" + std::to_string(motion + 1) + "-" +
                  std::to_string(i % per);
    });
  }
  return corpus;
}

std::vector<tnet::LabeledImage> labeled_images(const std::vector<SceneSample>& scenes) {
  std::vector<tnet::LabeledImage> out;
  out.reserve(scenes.size());
  for (const auto& s : scenes) out.push_back({s.image, s.label});
  return out;
}

}  // namespace crossing::dataset
