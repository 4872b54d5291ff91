#include "primgen/tokenize.hpp"

#include <algorithm>
#include <cmath>

namespace primgen {

int quantize(double value, AttributeKind kind, const Discretizer& d, ClampStats* stats) {
  if (!std::isfinite(value))
    fail(ErrorKind::invalid_input, "cannot quantize a non-finite value");
  const double lo = d.lo(kind), hi = d.hi(kind);
  const int levels = d.levels(kind);
  if (value < lo || value > hi) {
    if (stats) stats->clamped += 1;
    value = std::clamp(value, lo, hi);
  }
  const int bin = int(std::floor((value - lo) / (hi - lo) * levels));
  return std::clamp(bin, 0, levels - 1);
}

double dequantize(int bin, AttributeKind kind, const Discretizer& d) {
  const int levels = d.levels(kind);
  if (bin < 0 || bin >= levels)
    fail(ErrorKind::invalid_input, "bin index out of range");
  const double lo = d.lo(kind), hi = d.hi(kind);
  return lo + (bin + 0.5) * (hi - lo) / levels;
}

namespace {

bool zyx_less(const Primitive& a, const Primitive& b) {
  if (a.translation.z() != b.translation.z()) return a.translation.z() < b.translation.z();
  if (a.translation.y() != b.translation.y()) return a.translation.y() < b.translation.y();
  return a.translation.x() < b.translation.x();
}

}  // namespace

Assembly sort_assembly(const Assembly& a) {
  Assembly out = a;
  std::stable_sort(out.primitives.begin(), out.primitives.end(), zyx_less);
  return out;
}

SequenceSample encode_assembly(const Assembly& a, const Discretizer& d,
                               bool require_canonical, ClampStats* stats) {
  if (require_canonical) {
    for (std::size_t i = 0; i < a.size(); ++i) {
      const Primitive& p = a.primitives[i];
      const Primitive c = canonicalize(p);
      if ((c.rotation - p.rotation).cwiseAbs().maxCoeff() > 1e-9 ||
          (c.scale - p.scale).cwiseAbs().maxCoeff() > 1e-9)
        fail(ErrorKind::contract_violation,
             "primitive " + std::to_string(i) + " is not in canonical form");
    }
    for (std::size_t i = 0; i + 1 < a.size(); ++i)
      if (zyx_less(a.primitives[i + 1], a.primitives[i]))
        fail(ErrorKind::contract_violation,
             "assembly is not sorted by z-y-x centroid order");
  }

  SequenceSample out;
  out.terminated = true;
  out.tokens.reserve(a.size());
  for (const Primitive& p : a.primitives) {
    TokenizedPrimitive t;
    t.class_index = p.class_label;
    for (int i = 0; i < 3; ++i) {
      t.scale_bins[i] = quantize(p.scale[i], AttributeKind::scale, d, stats);
      t.rotation_bins[i] = quantize(p.rotation[i], AttributeKind::rotation, d, stats);
      t.translation_bins[i] =
          quantize(p.translation[i], AttributeKind::translation, d, stats);
    }
    out.tokens.push_back(t);
  }
  return out;
}

Assembly decode_sequence(const SequenceSample& s, const Discretizer& d,
                         const ClassRegistry& registry) {
  Assembly out;
  out.primitives.reserve(s.tokens.size());
  for (const TokenizedPrimitive& t : s.tokens) {
    if (!registry.contains(t.class_index))
      fail(ErrorKind::unknown_class,
           "unknown class index " + std::to_string(t.class_index));
    Primitive p;
    p.class_label = t.class_index;
    for (int i = 0; i < 3; ++i) {
      p.scale[i] = dequantize(t.scale_bins[i], AttributeKind::scale, d);
      p.rotation[i] = dequantize(t.rotation_bins[i], AttributeKind::rotation, d);
      p.translation[i] =
          dequantize(t.translation_bins[i], AttributeKind::translation, d);
    }
    out.primitives.push_back(p);
  }
  return out;
}

}  // namespace primgen
