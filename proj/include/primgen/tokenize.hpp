#pragma once

#include <array>
#include <vector>

#include "primgen/geometry.hpp"

namespace primgen {

enum class AttributeKind { rotation, scale, translation };

/// Uniform binning of continuous primitive attributes. Ranges are fixed:
/// rotation [-pi, pi), scale (0, 1] (binned over [0, 1]), translation [-1, 1].
struct Discretizer {
  int rotation_levels = 180;
  int scale_levels = 128;
  int translation_levels = 128;

  int levels(AttributeKind kind) const {
    switch (kind) {
      case AttributeKind::rotation: return rotation_levels;
      case AttributeKind::scale: return scale_levels;
      case AttributeKind::translation: return translation_levels;
    }
    return 0;
  }
  double lo(AttributeKind kind) const {
    switch (kind) {
      case AttributeKind::rotation: return -3.141592653589793238462643383279502884;
      case AttributeKind::scale: return 0.0;
      case AttributeKind::translation: return -1.0;
    }
    return 0.0;
  }
  double hi(AttributeKind kind) const {
    switch (kind) {
      case AttributeKind::rotation: return 3.141592653589793238462643383279502884;
      case AttributeKind::scale: return 1.0;
      case AttributeKind::translation: return 1.0;
    }
    return 0.0;
  }

  bool operator==(const Discretizer&) const = default;
};

struct TokenizedPrimitive {
  int class_index = 0;
  std::array<int, 3> scale_bins{};
  std::array<int, 3> rotation_bins{};
  std::array<int, 3> translation_bins{};

  bool operator==(const TokenizedPrimitive&) const = default;
};

struct SequenceSample {
  const PointCloud* condition = nullptr;  // not owned; may be null
  std::vector<TokenizedPrimitive> tokens;
  bool terminated = false;
};

struct ClampStats {
  int clamped = 0;
};

/// index = floor((v - lo) / (hi - lo) * L), clamped into [0, L-1]. Out-of-range
/// values are clamped first and counted in stats when provided.
int quantize(double value, AttributeKind kind, const Discretizer& d,
             ClampStats* stats = nullptr);

/// Bin-center value lo + (bin + 0.5) * (hi - lo) / L.
double dequantize(int bin, AttributeKind kind, const Discretizer& d);

/// Stable sort by centroid, key priority z then y then x, ascending.
Assembly sort_assembly(const Assembly& a);

/// Quantizes a canonical, sorted assembly. Violating either precondition is a
/// contract error unless require_canonical is disabled (ablation path).
SequenceSample encode_assembly(const Assembly& a, const Discretizer& d,
                               bool require_canonical = true,
                               ClampStats* stats = nullptr);

Assembly decode_sequence(const SequenceSample& s, const Discretizer& d,
                         const ClassRegistry& registry = default_class_registry());

}  // namespace primgen
