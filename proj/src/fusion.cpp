#include "crossing/fusion.hpp"

#include <cmath>

#include "crossing/errors.hpp"

namespace crossing::fusion {

MaskTable MaskTable::standard() {
  MaskTable m;
  m.w_s = {{
      {0, 1, 1, 1, 1, 1, 1},
      {1, 0, 1, 1, 1, 1, 1},
      {1, 1, 0, 1, 1, 1, 1},
  }};
  m.t = {{
      {1, 0, 0, 0, 1, 1, 1},
      {0, 1, 0, 1, 1, 0, 1},
      {0, 0, 1, 1, 0, 1, 1},
  }};
  m.threshold = 0.9999;
  return m;
}

namespace {

nlohmann::json rows_to_json(const std::array<Mask, fpv::kNumMotionClasses>& rows) {
  nlohmann::json j = nlohmann::json::object();
  for (std::size_t m = 0; m < rows.size(); ++m) j[std::string(fpv::motion_class_name(m))] = rows[m];
  return j;
}

std::array<Mask, fpv::kNumMotionClasses> rows_from_json(const nlohmann::json& j, const char* name) {
  if (!j.is_object() || j.size() != fpv::kNumMotionClasses) {
    throw ConfigError(std::string("mask table: '") + name + "' needs one row per motion class");
  }
  std::array<Mask, fpv::kNumMotionClasses> rows{};
  for (std::size_t m = 0; m < rows.size(); ++m) {
    const std::string key(fpv::motion_class_name(m));
    if (!j.contains(key)) throw ConfigError(std::string("mask table: '") + name + "' lacks row '" + key + "'");
    const auto values = j.at(key).get<std::vector<double>>();
    if (values.size() != tnet::kNumIntersectionClasses) {
      throw ConfigError(std::string("mask table: row '") + key + "' of '" + name + "' needs 7 entries");
    }
    for (std::size_t c = 0; c < values.size(); ++c) {
      if (values[c] != 0.0 && values[c] != 1.0) throw ConfigError("mask table: entries must be 0 or 1");
      rows[m][c] = values[c];
    }
  }
  return rows;
}

}  // namespace

nlohmann::json MaskTable::to_json() const {
  return nlohmann::json{{"w_s", rows_to_json(w_s)}, {"t", rows_to_json(t)}, {"threshold", threshold}};
}

MaskTable MaskTable::from_json(const nlohmann::json& j) {
  if (!j.is_object() || !j.contains("w_s") || !j.contains("t") || !j.contains("threshold")) {
    throw ConfigError("mask table: expected keys w_s, t, threshold");
  }
  MaskTable m;
  try {
    m.w_s = rows_from_json(j.at("w_s"), "w_s");
    m.t = rows_from_json(j.at("t"), "t");
    m.threshold = j.at("threshold").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("mask table: ") + e.what());
  }
  if (!(m.threshold >= 0.0 && m.threshold <= 1.0)) throw ConfigError("mask table: threshold outside [0,1]");
  return m;
}

MaskSelection select_masks(const fpv::MotionPDV& motion, const MaskTable& table) {
  MaskSelection s;
  s.c_minus = motion.argmin();
  s.c_plus = motion.argmax();
  s.w_s = table.w_s[s.c_minus];
  if (motion.p[s.c_plus] >= table.threshold) s.t = table.t[s.c_plus];
  return s;
}

FusionResult fuse(const fpv::MotionPDV& motion, const tnet::IntersectionPDV& tpv, const MaskTable& table) {
  const MaskSelection s = select_masks(motion, table);
  FusionResult r;
  r.c_minus = s.c_minus;
  r.c_plus = s.c_plus;
  r.applied_t = s.t.has_value();
  double total = 0.0;
  for (std::size_t c = 0; c < tnet::kNumIntersectionClasses; ++c) {
    double v = s.w_s[c] * tpv.p[c];
    if (s.t) v *= (*s.t)[c];
    r.pdv.p[c] = v;
    total += v;
  }
  if (!(total > 0.0)) {
    r.pdv = tpv;
    r.fallback = true;
    return r;
  }
  for (double& v : r.pdv.p) v /= total;
  return r;
}

}  // namespace crossing::fusion
