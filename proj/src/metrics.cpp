#include "primgen/metrics.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iostream>
#include <map>
#include <numeric>

namespace primgen {

// ---- kd-tree ----------------------------------------------------------------

KdTree3::KdTree3(const Points& points) : points_(points) {
  if (points_.rows() == 0) fail(ErrorKind::invalid_input, "empty point set");
  std::vector<Eigen::Index> idx(points_.rows());
  std::iota(idx.begin(), idx.end(), 0);
  nodes_.reserve(std::size_t(points_.rows()));
  root_ = build(idx, 0, points_.rows(), 0);
}

Eigen::Index KdTree3::build(std::vector<Eigen::Index>& idx, Eigen::Index lo,
                            Eigen::Index hi, int depth) {
  if (lo >= hi) return -1;
  const int axis = depth % 3;
  const Eigen::Index mid = lo + (hi - lo) / 2;
  std::nth_element(idx.begin() + lo, idx.begin() + mid, idx.begin() + hi,
                   [&](Eigen::Index a, Eigen::Index b) {
                     return points_(a, axis) < points_(b, axis);
                   });
  const Eigen::Index node_id = Eigen::Index(nodes_.size());
  nodes_.push_back(Node{idx[mid], axis, -1, -1});
  const Eigen::Index left = build(idx, lo, mid, depth + 1);
  const Eigen::Index right = build(idx, mid + 1, hi, depth + 1);
  nodes_[node_id].left = left;
  nodes_[node_id].right = right;
  return node_id;
}

void KdTree3::search(Eigen::Index node, const Vec3& q, Eigen::Index& best_idx,
                     double& best_d2) const {
  if (node < 0) return;
  const Node& n = nodes_[node];
  const double d2 = (points_.row(n.point).transpose() - q).squaredNorm();
  if (d2 < best_d2) {
    best_d2 = d2;
    best_idx = n.point;
  }
  const double delta = q[n.axis] - points_(n.point, n.axis);
  const Eigen::Index near = delta < 0 ? n.left : n.right;
  const Eigen::Index far = delta < 0 ? n.right : n.left;
  search(near, q, best_idx, best_d2);
  if (delta * delta < best_d2) search(far, q, best_idx, best_d2);
}

std::pair<Eigen::Index, double> KdTree3::nearest(const Vec3& query) const {
  Eigen::Index best_idx = -1;
  double best_d2 = std::numeric_limits<double>::infinity();
  search(root_, query, best_idx, best_d2);
  return {best_idx, best_d2};
}

// ---- geometric metrics ------------------------------------------------------

namespace {

void require_nonempty(const PointCloud& a, const PointCloud& b) {
  if (a.size() == 0 || b.size() == 0)
    fail(ErrorKind::invalid_input, "point clouds must be non-empty");
}

double mean_min_sq(const Points& from, const KdTree3& to_tree) {
  double acc = 0.0;
  for (Eigen::Index i = 0; i < from.rows(); ++i)
    acc += to_tree.nearest(from.row(i).transpose()).second;
  return acc / double(from.rows());
}

double max_min_dist(const Points& from, const KdTree3& to_tree) {
  double worst = 0.0;
  for (Eigen::Index i = 0; i < from.rows(); ++i)
    worst = std::max(worst, to_tree.nearest(from.row(i).transpose()).second);
  return std::sqrt(worst);
}

}  // namespace

double chamfer_distance(const PointCloud& a, const PointCloud& b) {
  require_nonempty(a, b);
  const KdTree3 tree_a(a.points), tree_b(b.points);
  return mean_min_sq(a.points, tree_b) + mean_min_sq(b.points, tree_a);
}

double hausdorff(const PointCloud& a, const PointCloud& b) {
  require_nonempty(a, b);
  const KdTree3 tree_a(a.points), tree_b(b.points);
  return std::max(max_min_dist(a.points, tree_b), max_min_dist(b.points, tree_a));
}

std::vector<int> solve_assignment(const Eigen::MatrixXd& cost) {
  if (cost.rows() != cost.cols() || cost.rows() == 0)
    fail(ErrorKind::invalid_input, "assignment requires a non-empty square matrix");
  const int n = int(cost.rows());
  constexpr double kInf = std::numeric_limits<double>::infinity();
  // Hungarian algorithm with potentials, 1-based helpers
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0), minv(n + 1);
  std::vector<int> p(n + 1, 0), way(n + 1, 0);
  std::vector<char> used(n + 1);
  for (int i = 1; i <= n; ++i) {
    p[0] = i;
    int j0 = 0;
    std::fill(minv.begin(), minv.end(), kInf);
    std::fill(used.begin(), used.end(), 0);
    do {
      used[j0] = 1;
      const int i0 = p[j0];
      double delta = kInf;
      int j1 = -1;
      for (int j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (int j = 0; j <= n; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const int j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0);
  }
  std::vector<int> row_to_col(n, -1);
  for (int j = 1; j <= n; ++j)
    if (p[j] > 0) row_to_col[p[j] - 1] = j - 1;
  return row_to_col;
}

double emd(const PointCloud& a, const PointCloud& b, int n_sub, std::uint64_t seed) {
  require_nonempty(a, b);
  if (n_sub < 1) fail(ErrorKind::invalid_input, "emd subsample count must be >= 1");
  const int m =
      int(std::min<Eigen::Index>({Eigen::Index(n_sub), a.size(), b.size()}));
  Rng rng_a(derive_seed(seed, 0));
  Rng rng_b(derive_seed(seed, 1));
  const auto ia = farthest_point_indices(a.points, m, rng_a);
  const auto ib = farthest_point_indices(b.points, m, rng_b);

  Eigen::MatrixXd cost(m, m);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < m; ++j)
      cost(i, j) = (a.points.row(ia[i]) - b.points.row(ib[j])).norm();
  const std::vector<int> match = solve_assignment(cost);
  double total = 0.0;
  for (int i = 0; i < m; ++i) total += cost(i, match[i]);
  return total / double(m);
}

double voxel_iou(const PointCloud& a, const PointCloud& b, int resolution,
                 int* clamped) {
  require_nonempty(a, b);
  if (resolution < 1) fail(ErrorKind::invalid_input, "voxel resolution must be >= 1");
  int clamp_count = 0;
  auto occupancy = [&](const Points& pts) {
    std::vector<char> grid(std::size_t(resolution) * resolution * resolution, 0);
    for (Eigen::Index i = 0; i < pts.rows(); ++i) {
      int cell[3];
      for (int k = 0; k < 3; ++k) {
        const double x = pts(i, k);
        if (x < -1.0 || x > 1.0) ++clamp_count;
        cell[k] = std::clamp(int(std::floor((x + 1.0) / 2.0 * resolution)), 0,
                             resolution - 1);
      }
      grid[std::size_t(cell[0]) * resolution * resolution +
           std::size_t(cell[1]) * resolution + cell[2]] = 1;
    }
    return grid;
  };
  const auto ga = occupancy(a.points);
  const auto gb = occupancy(b.points);
  long inter = 0, uni = 0;
  for (std::size_t i = 0; i < ga.size(); ++i) {
    inter += ga[i] & gb[i];
    uni += ga[i] | gb[i];
  }
  if (clamped) *clamped = clamp_count;
  return uni == 0 ? 0.0 : double(inter) / double(uni);
}

// ---- segmentation metrics ---------------------------------------------------

std::vector<int> transfer_labels(const PointCloud& gt, const Assembly& pred,
                                 int n_pred_points, Rng& rng, int mesh_resolution) {
  if (gt.size() == 0) fail(ErrorKind::invalid_input, "ground-truth cloud is empty");
  if (pred.empty()) fail(ErrorKind::invalid_input, "predicted assembly is empty");
  const PointCloud pred_cloud =
      assembly_surface(pred, n_pred_points, rng, mesh_resolution);
  const KdTree3 tree(pred_cloud.points);
  std::vector<int> labels(std::size_t(gt.size()));
  for (Eigen::Index i = 0; i < gt.size(); ++i)
    labels[std::size_t(i)] =
        pred_cloud.labels[std::size_t(tree.nearest(gt.points.row(i).transpose()).first)];
  return labels;
}

namespace {

struct Contingency {
  std::map<std::pair<int, int>, long> joint;
  std::map<int, long> a, b;
  long n = 0;
};

Contingency build_contingency(std::span<const int> x, std::span<const int> y) {
  if (x.size() != y.size())
    fail(ErrorKind::invalid_input, "label arrays must have equal length");
  if (x.size() < 2)
    fail(ErrorKind::invalid_input, "segmentation metrics require n >= 2");
  Contingency c;
  c.n = long(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    c.joint[{x[i], y[i]}] += 1;
    c.a[x[i]] += 1;
    c.b[y[i]] += 1;
  }
  return c;
}

double choose2(long k) { return 0.5 * double(k) * double(k - 1); }

}  // namespace

double rand_index(std::span<const int> x, std::span<const int> y) {
  const Contingency c = build_contingency(x, y);
  double same_same = 0.0, sum_a = 0.0, sum_b = 0.0;
  for (const auto& [key, cnt] : c.joint) same_same += choose2(cnt);
  for (const auto& [key, cnt] : c.a) sum_a += choose2(cnt);
  for (const auto& [key, cnt] : c.b) sum_b += choose2(cnt);
  const double pairs = choose2(c.n);
  const double diff_diff = pairs - sum_a - sum_b + same_same;
  return (same_same + diff_diff) / pairs;
}

double variation_of_information(std::span<const int> x, std::span<const int> y) {
  const Contingency c = build_contingency(x, y);
  const double n = double(c.n);
  double hx = 0.0, hy = 0.0, mi = 0.0;
  for (const auto& [key, cnt] : c.a) {
    const double p = cnt / n;
    hx -= p * std::log(p);
  }
  for (const auto& [key, cnt] : c.b) {
    const double p = cnt / n;
    hy -= p * std::log(p);
  }
  for (const auto& [key, cnt] : c.joint) {
    const double pxy = cnt / n;
    const double px = c.a.at(key.first) / n;
    const double py = c.b.at(key.second) / n;
    mi += pxy * std::log(pxy / (px * py));
  }
  return hx + hy - 2.0 * mi;
}

double segmentation_covering(std::span<const int> x, std::span<const int> y) {
  const Contingency c = build_contingency(x, y);
  double covering = 0.0;
  for (const auto& [label_a, size_a] : c.a) {
    double best_iou = 0.0;
    for (const auto& [label_b, size_b] : c.b) {
      const auto it = c.joint.find({label_a, label_b});
      if (it == c.joint.end()) continue;
      const double inter = double(it->second);
      best_iou = std::max(best_iou, inter / double(size_a + size_b - it->second));
    }
    covering += (double(size_a) / double(c.n)) * best_iou;
  }
  return covering;
}

// ---- full protocol ----------------------------------------------------------

namespace {

EvalReport evaluate_clouds(const Assembly& pred, const PointCloud& pred_cloud,
                           const PointCloud& gt_cloud, const EvalConfig& cfg) {
  EvalReport rep;
  rep.cd = chamfer_distance(pred_cloud, gt_cloud);
  rep.emd = emd(pred_cloud, gt_cloud, cfg.emd_subsample, cfg.seed);
  rep.hausdorff = hausdorff(pred_cloud, gt_cloud);
  int clamped = 0;
  rep.voxel_iou = voxel_iou(pred_cloud, gt_cloud, cfg.voxel_resolution, &clamped);
  if (clamped > 0)
    std::cerr << "warning: " << clamped
              << " points outside [-1,1]^3 clamped into boundary voxels\n";
  if (gt_cloud.has_labels()) {
    Rng rng(derive_seed(cfg.seed, 2));
    const std::vector<int> transferred =
        transfer_labels(gt_cloud, pred, cfg.transfer_points, rng, cfg.mesh_resolution);
    rep.has_segmentation = true;
    rep.ri = rand_index(gt_cloud.labels, transferred);
    rep.voi = variation_of_information(gt_cloud.labels, transferred);
    rep.sc = segmentation_covering(gt_cloud.labels, transferred);
  }
  return rep;
}

}  // namespace

EvalReport evaluate(const Assembly& pred, const Assembly& gt, const EvalConfig& cfg) {
  Rng rng_pred(cfg.seed);
  Rng rng_gt(cfg.seed);
  const PointCloud pred_cloud =
      assembly_surface(pred, cfg.sample_points, rng_pred, cfg.mesh_resolution);
  const PointCloud gt_cloud =
      assembly_surface(gt, cfg.sample_points, rng_gt, cfg.mesh_resolution);
  return evaluate_clouds(pred, pred_cloud, gt_cloud, cfg);
}

EvalReport evaluate(const Assembly& pred, const PointCloud& labeled_gt,
                    const EvalConfig& cfg) {
  Rng rng_pred(cfg.seed);
  const PointCloud pred_cloud =
      assembly_surface(pred, cfg.sample_points, rng_pred, cfg.mesh_resolution);
  return evaluate_clouds(pred, pred_cloud, labeled_gt, cfg);
}

EvalReport aggregate_mean(const std::vector<EvalReport>& reports) {
  EvalReport mean;
  mean.id = "mean";
  if (reports.empty()) return mean;
  int seg_count = 0;
  for (const EvalReport& r : reports) {
    mean.cd += r.cd;
    mean.emd += r.emd;
    mean.hausdorff += r.hausdorff;
    mean.voxel_iou += r.voxel_iou;
    if (r.has_segmentation) {
      mean.ri += r.ri;
      mean.voi += r.voi;
      mean.sc += r.sc;
      ++seg_count;
    }
  }
  const double n = double(reports.size());
  mean.cd /= n;
  mean.emd /= n;
  mean.hausdorff /= n;
  mean.voxel_iou /= n;
  if (seg_count > 0) {
    mean.has_segmentation = true;
    mean.ri /= seg_count;
    mean.voi /= seg_count;
    mean.sc /= seg_count;
  }
  return mean;
}

void write_reports_csv(const std::vector<EvalReport>& reports, const std::string& path) {
  std::ofstream out(path);
  if (!out) fail(ErrorKind::io, "cannot open " + path + " for writing");
  out << "id,cd,emd,hausdorff,voxel_iou,ri,voi,sc\n";
  out.precision(10);
  auto row = [&out](const EvalReport& r) {
    out << r.id << "," << r.cd << "," << r.emd << "," << r.hausdorff << ","
        << r.voxel_iou << ",";
    if (r.has_segmentation)
      out << r.ri << "," << r.voi << "," << r.sc;
    else
      out << ",,";
    out << "\n";
  };
  for (const EvalReport& r : reports) row(r);
  row(aggregate_mean(reports));
  if (!out) fail(ErrorKind::io, "write failure on " + path);
}

void write_reports_json(const std::vector<EvalReport>& reports,
                        const std::string& path) {
  using nlohmann::json;
  auto to_json = [](const EvalReport& r) {
    json j{{"id", r.id},
           {"cd", r.cd},
           {"emd", r.emd},
           {"hausdorff", r.hausdorff},
           {"voxel_iou", r.voxel_iou}};
    if (r.has_segmentation) {
      j["ri"] = r.ri;
      j["voi"] = r.voi;
      j["sc"] = r.sc;
    }
    return j;
  };
  json out = json::array();
  for (const EvalReport& r : reports) out.push_back(to_json(r));
  json doc{{"samples", std::move(out)}, {"aggregate", to_json(aggregate_mean(reports))}};
  std::ofstream f(path);
  if (!f) fail(ErrorKind::io, "cannot open " + path + " for writing");
  f << doc.dump(2) << "\n";
  if (!f) fail(ErrorKind::io, "write failure on " + path);
}

}  // namespace primgen
