#pragma once

#include <array>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "primgen/common.hpp"
#include "primgen/errors.hpp"

namespace primgen {

// Built-in primitive class ids.
inline constexpr int kCuboid = 0;
inline constexpr int kEllipticalCylinder = 1;
inline constexpr int kEllipsoid = 2;

/// One transformed primitive: world point = R(rotation) * diag(scale) * local + translation.
/// Standard local solids: cuboid = box with half-extents 1, elliptical cylinder =
/// radius 1 / half-height 1 along +z, ellipsoid = unit sphere.
struct Primitive {
  int class_label = kCuboid;
  Vec3 scale = Vec3::Ones();        // per-axis half-extent multipliers, in (0, 1]
  Vec3 rotation = Vec3::Zero();     // radians, extrinsic x-y-z order, in [-pi, pi)
  Vec3 translation = Vec3::Zero();  // in [-1, 1]^3
};

struct Assembly {
  std::vector<Primitive> primitives;

  bool empty() const { return primitives.empty(); }
  std::size_t size() const { return primitives.size(); }
};

struct PointCloud {
  Points points;            // N x 3
  std::vector<int> labels;  // optional per-point instance ids; empty or size N

  Eigen::Index size() const { return points.rows(); }
  bool has_labels() const { return !labels.empty(); }
};

struct TriMesh {
  Points vertices;
  std::vector<std::array<int, 3>> faces;
};

/// A discrete self-symmetry of a standard primitive. rotation is a signed
/// permutation matrix with det +1 and scale_source encodes the permutation
/// sigma with apply(s)[i] = s[scale_source[i]], satisfying
/// diag(s) * Q = Q * diag(sigma(s)) for all s.
struct SymmetryElement {
  Mat3 rotation;
  std::array<int, 3> scale_source;

  Vec3 permute_scale(const Vec3& s) const {
    return Vec3(s[scale_source[0]], s[scale_source[1]], s[scale_source[2]]);
  }
};

struct ClassSpec {
  int id = 0;
  std::string name;
  std::array<int, 3> symmetry_orders{};  // cyclic order about local x, y, z
  std::function<TriMesh(int resolution)> standard_mesh;
};

/// Registry of primitive classes. Three classes are registered by default;
/// additional ones can be added without touching the rest of the pipeline.
class ClassRegistry {
 public:
  int register_class(ClassSpec spec);
  const ClassSpec& get(int class_label) const;
  bool contains(int class_label) const;
  std::size_t size() const { return specs_.size(); }

  /// Symmetry elements of a class: deduplicated union of the cyclic rotation
  /// subgroups about the three principal axes, identity included once.
  const std::vector<SymmetryElement>& symmetry_set(int class_label) const;

  /// Closure of symmetry_set under composition. The union alone is not a
  /// group (e.g. x90 * z90 is a body-diagonal rotation), and canonical forms
  /// are only orbit-invariant when the search runs over a closed set.
  const std::vector<SymmetryElement>& canonicalization_group(int class_label) const;

 private:
  std::vector<ClassSpec> specs_;
  mutable std::vector<std::optional<std::vector<SymmetryElement>>> symmetry_cache_;
  mutable std::vector<std::optional<std::vector<SymmetryElement>>> group_cache_;
};

const ClassRegistry& default_class_registry();

// ---- rotations ----------------------------------------------------------

/// R = Rz(r.z) * Ry(r.y) * Rx(r.x), extrinsic fixed-axis x then y then z.
Mat3 euler_to_matrix(const Vec3& rotation);

/// Inverse of euler_to_matrix; angles in [-pi, pi), y angle in [-pi/2, pi/2].
/// At gimbal lock (|r_y| = pi/2) the solution with r_x = 0 is returned.
/// Throws invalid-input if M is not a rotation within 1e-6.
Vec3 matrix_to_euler(const Mat3& m);

Vec3 transform_point(const Primitive& p, const Vec3& local);

// ---- canonicalization ----------------------------------------------------

const std::vector<SymmetryElement>& symmetry_set(
    int class_label, const ClassRegistry& registry = default_class_registry());

/// Picks, over the class's symmetry orbit, the parameterization with minimal
/// L1 rotation norm; ties broken lexicographically on (rotation, scale).
Primitive canonicalize(const Primitive& p,
                       const ClassRegistry& registry = default_class_registry());

/// Throws invalid-input if any Primitive invariant is violated.
void validate_primitive(const Primitive& p,
                        const ClassRegistry& registry = default_class_registry());

// ---- meshing and sampling -------------------------------------------------

/// Tessellates the standard solid and applies the primitive transform to every
/// vertex. Watertight for all built-in classes; the cuboid ignores resolution.
TriMesh primitive_mesh(const Primitive& p, int resolution,
                       const ClassRegistry& registry = default_class_registry());

double mesh_area(const TriMesh& mesh);

/// Area-weighted uniform sampling over the transformed mesh (areas measured
/// after the transform, so anisotropic scaling keeps density uniform).
PointCloud sample_surface(const Primitive& p, int n, Rng& rng, int resolution = 32,
                          const ClassRegistry& registry = default_class_registry());

/// Samples n points across the assembly, allocated to primitives proportionally
/// to transformed surface area (largest-remainder rounding). Labels hold the
/// source primitive index.
PointCloud assembly_surface(const Assembly& a, int n, Rng& rng, int resolution = 32,
                            const ClassRegistry& registry = default_class_registry());

/// Greedy farthest-point subsampling: seeded random start, then repeatedly the
/// point maximizing the minimum distance to the chosen set. Returns row indices.
std::vector<Eigen::Index> farthest_point_indices(const Points& points, int m, Rng& rng);

// ---- normalization --------------------------------------------------------

template <typename T>
struct Normalized {
  T value;
  double factor = 1.0;
  Vec3 offset = Vec3::Zero();  // x' = factor * x + offset
};

/// World axis-aligned bounding box of the assembly, from exact per-primitive
/// support functions.
void assembly_bounds(const Assembly& a, Vec3& lo, Vec3& hi);

Normalized<Points> normalize_to_unit_cube(const Points& points);
Normalized<Assembly> normalize_to_unit_cube(const Assembly& a);

}  // namespace primgen
