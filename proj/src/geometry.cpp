#include "primgen/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace primgen {

namespace {

constexpr double kPi = 3.141592653589793238462643383279502884;
constexpr double kCanonTol = 1e-9;

double wrap_angle(double a) {
  // into [-pi, pi)
  a = std::fmod(a + kPi, 2.0 * kPi);
  if (a < 0) a += 2.0 * kPi;
  a -= kPi;
  if (a >= kPi) a = -kPi;
  return a;
}

Mat3 axis_rotation(int axis, double angle) {
  Mat3 r = Mat3::Identity();
  const double c = std::cos(angle);
  const double s = std::sin(angle);
  const int i = (axis + 1) % 3;
  const int j = (axis + 2) % 3;
  r(i, i) = c;
  r(i, j) = -s;
  r(j, i) = s;
  r(j, j) = c;
  return r;
}

// Cyclic rotations about principal axes with orders in {1,2,4} have entries
// in {-1,0,1}; snap them so dedup and permutation extraction are exact.
Mat3 snap_signed_permutation(const Mat3& m) {
  Mat3 out;
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) out(r, c) = std::round(m(r, c));
  return out;
}

TriMesh box_mesh(int /*resolution*/) {
  TriMesh mesh;
  mesh.vertices.resize(8, 3);
  int v = 0;
  for (int x = -1; x <= 1; x += 2)
    for (int y = -1; y <= 1; y += 2)
      for (int z = -1; z <= 1; z += 2) mesh.vertices.row(v++) = Vec3(x, y, z);
  // corner index = (x>0)*4 + (y>0)*2 + (z>0)
  auto quad = [&](int a, int b, int c, int d) {
    mesh.faces.push_back({a, b, c});
    mesh.faces.push_back({a, c, d});
  };
  quad(0, 1, 3, 2);  // x = -1
  quad(4, 6, 7, 5);  // x = +1
  quad(0, 4, 5, 1);  // y = -1
  quad(2, 3, 7, 6);  // y = +1
  quad(0, 2, 6, 4);  // z = -1
  quad(1, 5, 7, 3);  // z = +1
  return mesh;
}

TriMesh sphere_mesh(int resolution) {
  const int bands = std::max(2, resolution);
  const int segs = std::max(3, 2 * resolution);
  TriMesh mesh;
  const int n_ring = bands - 1;
  mesh.vertices.resize(2 + n_ring * segs, 3);
  mesh.vertices.row(0) = Vec3(0, 0, 1);
  mesh.vertices.row(1) = Vec3(0, 0, -1);
  auto ring_vertex = [&](int ring, int seg) { return 2 + ring * segs + (seg % segs); };
  for (int r = 0; r < n_ring; ++r) {
    const double theta = kPi * double(r + 1) / bands;
    for (int s = 0; s < segs; ++s) {
      const double phi = 2.0 * kPi * s / segs;
      mesh.vertices.row(ring_vertex(r, s)) =
          Vec3(std::sin(theta) * std::cos(phi), std::sin(theta) * std::sin(phi),
               std::cos(theta));
    }
  }
  for (int s = 0; s < segs; ++s) {
    mesh.faces.push_back({0, ring_vertex(0, s), ring_vertex(0, s + 1)});
    mesh.faces.push_back({1, ring_vertex(n_ring - 1, s + 1), ring_vertex(n_ring - 1, s)});
  }
  for (int r = 0; r + 1 < n_ring; ++r) {
    for (int s = 0; s < segs; ++s) {
      const int a = ring_vertex(r, s), b = ring_vertex(r, s + 1);
      const int c = ring_vertex(r + 1, s + 1), d = ring_vertex(r + 1, s);
      mesh.faces.push_back({a, b, c});
      mesh.faces.push_back({a, c, d});
    }
  }
  return mesh;
}

TriMesh cylinder_mesh(int resolution) {
  const int segs = std::max(3, resolution);
  TriMesh mesh;
  mesh.vertices.resize(2 * segs + 2, 3);
  auto ring_vertex = [&](int ring, int seg) { return ring * segs + (seg % segs); };
  for (int r = 0; r < 2; ++r) {
    const double z = r == 0 ? -1.0 : 1.0;
    for (int s = 0; s < segs; ++s) {
      const double phi = 2.0 * kPi * s / segs;
      mesh.vertices.row(ring_vertex(r, s)) = Vec3(std::cos(phi), std::sin(phi), z);
    }
  }
  const int bottom_center = 2 * segs;
  const int top_center = 2 * segs + 1;
  mesh.vertices.row(bottom_center) = Vec3(0, 0, -1);
  mesh.vertices.row(top_center) = Vec3(0, 0, 1);
  for (int s = 0; s < segs; ++s) {
    const int a = ring_vertex(0, s), b = ring_vertex(0, s + 1);
    const int c = ring_vertex(1, s + 1), d = ring_vertex(1, s);
    mesh.faces.push_back({a, b, c});
    mesh.faces.push_back({a, c, d});
    mesh.faces.push_back({bottom_center, b, a});
    mesh.faces.push_back({top_center, d, c});
  }
  return mesh;
}

ClassRegistry make_default_registry() {
  ClassRegistry reg;
  reg.register_class({kCuboid, "cuboid", {4, 4, 4}, box_mesh});
  reg.register_class({kEllipticalCylinder, "elliptical_cylinder", {2, 2, 4}, cylinder_mesh});
  reg.register_class({kEllipsoid, "ellipsoid", {4, 4, 4}, sphere_mesh});
  return reg;
}

}  // namespace

int ClassRegistry::register_class(ClassSpec spec) {
  if (spec.id != int(specs_.size()))
    fail(ErrorKind::contract_violation, "class ids must be registered densely in order");
  for (int order : spec.symmetry_orders)
    if (order != 1 && order != 2 && order != 4)
      fail(ErrorKind::contract_violation,
           "symmetry orders must be 1, 2 or 4 (axis-permuting rotations only)");
  specs_.push_back(std::move(spec));
  symmetry_cache_.emplace_back();
  group_cache_.emplace_back();
  return specs_.back().id;
}

bool ClassRegistry::contains(int class_label) const {
  return class_label >= 0 && class_label < int(specs_.size());
}

const ClassSpec& ClassRegistry::get(int class_label) const {
  if (!contains(class_label))
    fail(ErrorKind::unknown_class,
         "unknown primitive class " + std::to_string(class_label));
  return specs_[class_label];
}

namespace {

SymmetryElement make_element(const Mat3& q) {
  SymmetryElement e;
  e.rotation = q;
  // sigma(s)[pi(a)] = s[a] where row a of Q has its nonzero in column pi(a)
  for (int a = 0; a < 3; ++a) {
    int pi_a = -1;
    for (int c = 0; c < 3; ++c)
      if (std::abs(q(a, c)) > 0.5) pi_a = c;
    e.scale_source[pi_a] = a;
  }
  return e;
}

bool add_unique_element(std::vector<SymmetryElement>& elems, const Mat3& q) {
  for (const SymmetryElement& e : elems)
    if ((e.rotation - q).cwiseAbs().maxCoeff() < 0.5) return false;
  elems.push_back(make_element(q));
  return true;
}

}  // namespace

const std::vector<SymmetryElement>& ClassRegistry::symmetry_set(int class_label) const {
  const ClassSpec& spec = get(class_label);
  auto& slot = symmetry_cache_[class_label];
  if (slot) return *slot;

  std::vector<SymmetryElement> elems;
  add_unique_element(elems, Mat3::Identity());
  for (int axis = 0; axis < 3; ++axis) {
    const int order = spec.symmetry_orders[axis];
    for (int k = 1; k < order; ++k)
      add_unique_element(elems,
                         snap_signed_permutation(axis_rotation(axis, 2.0 * kPi * k / order)));
  }
  slot = std::move(elems);
  return *slot;
}

const std::vector<SymmetryElement>& ClassRegistry::canonicalization_group(
    int class_label) const {
  auto& slot = group_cache_[class_label];
  if (slot) return *slot;

  std::vector<SymmetryElement> elems = symmetry_set(class_label);
  bool grew = true;
  while (grew) {
    grew = false;
    const std::size_t n = elems.size();
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        const Mat3 q = snap_signed_permutation(elems[i].rotation * elems[j].rotation);
        if (add_unique_element(elems, q)) grew = true;
      }
  }
  slot = std::move(elems);
  return *slot;
}

const ClassRegistry& default_class_registry() {
  static const ClassRegistry reg = make_default_registry();
  return reg;
}

const std::vector<SymmetryElement>& symmetry_set(int class_label,
                                                 const ClassRegistry& registry) {
  return registry.symmetry_set(class_label);
}

Mat3 euler_to_matrix(const Vec3& rotation) {
  return axis_rotation(2, rotation.z()) * axis_rotation(1, rotation.y()) *
         axis_rotation(0, rotation.x());
}

Vec3 matrix_to_euler(const Mat3& m) {
  const double ortho = (m.transpose() * m - Mat3::Identity()).cwiseAbs().maxCoeff();
  if (!m.allFinite() || ortho > 1e-6 || std::abs(m.determinant() - 1.0) > 1e-6)
    fail(ErrorKind::invalid_input, "matrix is not a rotation");

  const double sy = std::clamp(-m(2, 0), -1.0, 1.0);
  const double cy = std::hypot(m(2, 1), m(2, 2));  // |cos ry|, nonnegative branch
  Vec3 r;
  if (cy < 1e-7) {
    // gimbal lock: fix r_x = 0
    r.x() = 0.0;
    r.y() = sy > 0 ? kPi / 2 : -kPi / 2;
    r.z() = std::atan2(-m(0, 1), m(1, 1));
  } else {
    r.x() = std::atan2(m(2, 1), m(2, 2));
    r.y() = std::atan2(sy, cy);
    r.z() = std::atan2(m(1, 0), m(0, 0));
  }
  for (int i = 0; i < 3; ++i) r[i] = wrap_angle(r[i]);
  return r;
}

Vec3 transform_point(const Primitive& p, const Vec3& local) {
  return euler_to_matrix(p.rotation) * (p.scale.asDiagonal() * local) + p.translation;
}

void validate_primitive(const Primitive& p, const ClassRegistry& registry) {
  registry.get(p.class_label);
  if (!p.scale.allFinite() || !p.rotation.allFinite() || !p.translation.allFinite())
    fail(ErrorKind::invalid_input, "primitive parameters must be finite");
  if ((p.scale.array() <= 0.0).any())
    fail(ErrorKind::invalid_input, "scale components must be strictly positive");
  if ((p.rotation.array() < -kPi).any() || (p.rotation.array() >= kPi).any())
    fail(ErrorKind::invalid_input, "rotation components must lie in [-pi, pi)");
  if ((p.translation.array() < -1.0).any() || (p.translation.array() > 1.0).any())
    fail(ErrorKind::invalid_input, "translation must lie in [-1, 1]^3");
}

namespace {

// candidate < best, with tolerant lexicographic comparison over (rotation, scale)
bool lex_less(const Vec3& ra, const Vec3& sa, const Vec3& rb, const Vec3& sb) {
  const double key_a[6] = {ra.x(), ra.y(), ra.z(), sa.x(), sa.y(), sa.z()};
  const double key_b[6] = {rb.x(), rb.y(), rb.z(), sb.x(), sb.y(), sb.z()};
  for (int i = 0; i < 6; ++i) {
    if (key_a[i] < key_b[i] - kCanonTol) return true;
    if (key_a[i] > key_b[i] + kCanonTol) return false;
  }
  return false;
}

}  // namespace

Primitive canonicalize(const Primitive& p, const ClassRegistry& registry) {
  const std::vector<SymmetryElement>& elems =
      registry.canonicalization_group(p.class_label);
  const Mat3 base = euler_to_matrix(p.rotation);

  Primitive out = p;
  bool have = false;
  double best_l1 = 0.0;
  for (const SymmetryElement& e : elems) {
    const Vec3 r = matrix_to_euler(base * e.rotation);
    const Vec3 s = e.permute_scale(p.scale);
    const double l1 = r.cwiseAbs().sum();
    if (!have || l1 < best_l1 - kCanonTol ||
        (l1 <= best_l1 + kCanonTol && lex_less(r, s, out.rotation, out.scale))) {
      have = true;
      best_l1 = l1;
      out.rotation = r;
      out.scale = s;
    }
  }
  return out;
}

TriMesh primitive_mesh(const Primitive& p, int resolution, const ClassRegistry& registry) {
  if (resolution < 1) fail(ErrorKind::invalid_input, "resolution must be >= 1");
  TriMesh mesh = registry.get(p.class_label).standard_mesh(resolution);
  const Mat3 m = euler_to_matrix(p.rotation) * p.scale.asDiagonal();
  for (Eigen::Index i = 0; i < mesh.vertices.rows(); ++i)
    mesh.vertices.row(i) =
        (m * mesh.vertices.row(i).transpose() + p.translation).transpose();
  return mesh;
}

double mesh_area(const TriMesh& mesh) {
  double area = 0.0;
  for (const auto& f : mesh.faces) {
    const Vec3 a = mesh.vertices.row(f[0]);
    const Vec3 ab = mesh.vertices.row(f[1]).transpose() - a;
    const Vec3 ac = mesh.vertices.row(f[2]).transpose() - a;
    area += 0.5 * ab.cross(ac).norm();
  }
  return area;
}

namespace {

// n samples from a transformed mesh, appended to out starting at row `row0`.
void sample_mesh_surface(const TriMesh& mesh, int n, Rng& rng, Points& out,
                         Eigen::Index row0) {
  std::vector<double> cdf(mesh.faces.size());
  double total = 0.0;
  for (std::size_t i = 0; i < mesh.faces.size(); ++i) {
    const auto& f = mesh.faces[i];
    const Vec3 a = mesh.vertices.row(f[0]);
    const Vec3 ab = mesh.vertices.row(f[1]).transpose() - a;
    const Vec3 ac = mesh.vertices.row(f[2]).transpose() - a;
    total += 0.5 * ab.cross(ac).norm();
    cdf[i] = total;
  }
  if (total <= 0.0) fail(ErrorKind::degenerate_input, "mesh has zero surface area");

  std::uniform_real_distribution<double> uni(0.0, 1.0);
  for (int i = 0; i < n; ++i) {
    const double u = uni(rng) * total;
    const auto it = std::lower_bound(cdf.begin(), cdf.end(), u);
    const std::size_t fi = std::min<std::size_t>(it - cdf.begin(), cdf.size() - 1);
    const auto& f = mesh.faces[fi];
    const double r1 = std::sqrt(uni(rng));
    const double r2 = uni(rng);
    const Vec3 a = mesh.vertices.row(f[0]);
    const Vec3 b = mesh.vertices.row(f[1]);
    const Vec3 c = mesh.vertices.row(f[2]);
    out.row(row0 + i) = ((1.0 - r1) * a + r1 * (1.0 - r2) * b + r1 * r2 * c).transpose();
  }
}

}  // namespace

PointCloud sample_surface(const Primitive& p, int n, Rng& rng, int resolution,
                          const ClassRegistry& registry) {
  if (n < 1) fail(ErrorKind::invalid_input, "sample count must be >= 1");
  const TriMesh mesh = primitive_mesh(p, resolution, registry);
  PointCloud cloud;
  cloud.points.resize(n, 3);
  sample_mesh_surface(mesh, n, rng, cloud.points, 0);
  return cloud;
}

PointCloud assembly_surface(const Assembly& a, int n, Rng& rng, int resolution,
                            const ClassRegistry& registry) {
  if (a.empty()) fail(ErrorKind::empty_assembly, "assembly has no primitives");
  if (n < 1) fail(ErrorKind::invalid_input, "sample count must be >= 1");

  std::vector<TriMesh> meshes;
  meshes.reserve(a.size());
  std::vector<double> areas(a.size());
  double total = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    meshes.push_back(primitive_mesh(a.primitives[i], resolution, registry));
    areas[i] = mesh_area(meshes.back());
    total += areas[i];
  }

  // largest-remainder allocation proportional to area
  std::vector<int> counts(a.size());
  std::vector<std::pair<double, std::size_t>> remainders(a.size());
  int assigned = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double quota = double(n) * areas[i] / total;
    counts[i] = int(std::floor(quota));
    assigned += counts[i];
    remainders[i] = {quota - counts[i], i};
  }
  std::stable_sort(remainders.begin(), remainders.end(),
                   [](const auto& x, const auto& y) { return x.first > y.first; });
  for (int k = 0; k < n - assigned; ++k) counts[remainders[k].second] += 1;

  PointCloud cloud;
  cloud.points.resize(n, 3);
  cloud.labels.resize(n);
  Eigen::Index row = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (counts[i] == 0) continue;
    sample_mesh_surface(meshes[i], counts[i], rng, cloud.points, row);
    std::fill(cloud.labels.begin() + row, cloud.labels.begin() + row + counts[i], int(i));
    row += counts[i];
  }
  return cloud;
}

namespace {

// exact half-extent of a transformed primitive along a world axis
Vec3 support_half_extents(const Primitive& p, const ClassRegistry& registry) {
  const Mat3 m = euler_to_matrix(p.rotation) * p.scale.asDiagonal();
  Vec3 h;
  switch (p.class_label) {
    case kCuboid:
      for (int u = 0; u < 3; ++u) h[u] = m.row(u).cwiseAbs().sum();
      return h;
    case kEllipsoid:
      for (int u = 0; u < 3; ++u) h[u] = m.row(u).norm();
      return h;
    case kEllipticalCylinder:
      for (int u = 0; u < 3; ++u)
        h[u] = std::hypot(m(u, 0), m(u, 1)) + std::abs(m(u, 2));
      return h;
    default: {
      // registry extensions: bounding box of a moderately fine mesh
      const TriMesh mesh = primitive_mesh(p, 48, registry);
      const Vec3 lo = mesh.vertices.colwise().minCoeff();
      const Vec3 hi = mesh.vertices.colwise().maxCoeff();
      return ((hi - lo) / 2.0).cwiseAbs();
    }
  }
}

}  // namespace

std::vector<Eigen::Index> farthest_point_indices(const Points& points, int m, Rng& rng) {
  const Eigen::Index n = points.rows();
  if (n < 1) fail(ErrorKind::invalid_input, "cannot subsample an empty point set");
  if (m >= n) {
    std::vector<Eigen::Index> all(n);
    std::iota(all.begin(), all.end(), 0);
    return all;
  }
  std::vector<Eigen::Index> chosen;
  chosen.reserve(m);
  Eigen::VectorXd min_dist = Eigen::VectorXd::Constant(n, std::numeric_limits<double>::infinity());
  Eigen::Index current = Eigen::Index(rng() % std::uint64_t(n));
  chosen.push_back(current);
  for (int k = 1; k < m; ++k) {
    const auto d = (points.rowwise() - points.row(current)).rowwise().squaredNorm();
    min_dist = min_dist.cwiseMin(d);
    Eigen::Index next = 0;
    min_dist.maxCoeff(&next);
    chosen.push_back(next);
    current = next;
  }
  return chosen;
}

void assembly_bounds(const Assembly& a, Vec3& lo, Vec3& hi) {
  if (a.empty()) fail(ErrorKind::empty_assembly, "assembly has no primitives");
  lo = Vec3::Constant(std::numeric_limits<double>::infinity());
  hi = -lo;
  for (const Primitive& p : a.primitives) {
    const Vec3 h = support_half_extents(p, default_class_registry());
    lo = lo.cwiseMin(p.translation - h);
    hi = hi.cwiseMax(p.translation + h);
  }
}

Normalized<Points> normalize_to_unit_cube(const Points& points) {
  if (points.rows() < 1) fail(ErrorKind::degenerate_input, "empty point set");
  const Vec3 lo = points.colwise().minCoeff();
  const Vec3 hi = points.colwise().maxCoeff();
  const double extent = (hi - lo).maxCoeff();
  if (!(extent > 0.0))
    fail(ErrorKind::degenerate_input, "zero-extent bounding box");
  Normalized<Points> out;
  out.factor = 2.0 / extent;
  out.offset = -out.factor * (lo + hi) / 2.0;
  out.value = points * out.factor;
  out.value.rowwise() += out.offset.transpose();
  return out;
}

Normalized<Assembly> normalize_to_unit_cube(const Assembly& a) {
  Vec3 lo, hi;
  assembly_bounds(a, lo, hi);
  const double extent = (hi - lo).maxCoeff();
  if (!(extent > 0.0))
    fail(ErrorKind::degenerate_input, "zero-extent bounding box");
  Normalized<Assembly> out;
  out.factor = 2.0 / extent;
  out.offset = -out.factor * (lo + hi) / 2.0;
  out.value = a;
  for (Primitive& p : out.value.primitives) {
    p.scale *= out.factor;
    p.translation = out.factor * p.translation + out.offset;
  }
  return out;
}

}  // namespace primgen
