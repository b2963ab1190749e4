#pragma once

#include <array>
#include <optional>

#include "crossing/fpv.hpp"
#include "crossing/tnet.hpp"
#include "json.hpp"

namespace crossing::fusion {

using Mask = std::array<double, tnet::kNumIntersectionClasses>;

/// W_S rows indexed by the least likely motion class, T rows by the most
/// likely one; T only applies when that class reaches the threshold.
struct MaskTable {
  std::array<Mask, fpv::kNumMotionClasses> w_s{};
  std::array<Mask, fpv::kNumMotionClasses> t{};
  double threshold = 0.9999;

  static MaskTable standard();

  nlohmann::json to_json() const;
  static MaskTable from_json(const nlohmann::json& j);
};

struct MaskSelection {
  Mask w_s{};
  std::optional<Mask> t;
  std::size_t c_minus = 0;
  std::size_t c_plus = 0;
};

// Ties in argmin/argmax resolve to the lowest class index.
MaskSelection select_masks(const fpv::MotionPDV& motion, const MaskTable& table);

struct FusionResult {
  tnet::IntersectionPDV pdv;
  bool applied_t = false;
  std::size_t c_minus = 0;
  std::size_t c_plus = 0;
  bool fallback = false;  // every masked entry was zero; pdv is the TPV input
};

/// I[c] = W_S[c] * P[c], times T[c] when T applies, renormalized to sum 1.
/// `tpv` may be any non-negative vector; it is returned unchanged on fallback.
FusionResult fuse(const fpv::MotionPDV& motion, const tnet::IntersectionPDV& tpv, const MaskTable& table);

}  // namespace crossing::fusion
