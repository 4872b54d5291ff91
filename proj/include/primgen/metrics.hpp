#pragma once

#include <span>
#include <string>
#include <vector>

#include "primgen/geometry.hpp"

namespace primgen {

struct EvalConfig {
  int sample_points = 10000;
  int emd_subsample = 256;
  int voxel_resolution = 32;
  int mesh_resolution = 32;
  int transfer_points = 10000;
  std::uint64_t seed = 0;
};

struct EvalReport {
  std::string id;
  double cd = 0.0;
  double emd = 0.0;
  double hausdorff = 0.0;
  double voxel_iou = 0.0;
  bool has_segmentation = false;
  double ri = 0.0;
  double voi = 0.0;
  double sc = 0.0;
};

/// Nearest-neighbor index over a fixed 3D point set.
class KdTree3 {
 public:
  explicit KdTree3(const Points& points);
  /// Index of the nearest stored point and its squared distance.
  std::pair<Eigen::Index, double> nearest(const Vec3& query) const;

 private:
  struct Node {
    Eigen::Index point = -1;
    int axis = 0;
    Eigen::Index left = -1, right = -1;
  };
  Eigen::Index build(std::vector<Eigen::Index>& idx, Eigen::Index lo, Eigen::Index hi,
                     int depth);
  void search(Eigen::Index node, const Vec3& q, Eigen::Index& best_idx,
              double& best_d2) const;
  Points points_;
  std::vector<Node> nodes_;
  Eigen::Index root_ = -1;
};

// ---- geometric metrics ------------------------------------------------------

/// mean_a min_b |a-b|^2 + mean_b min_a |b-a|^2
double chamfer_distance(const PointCloud& a, const PointCloud& b);

/// Exact optimal one-to-one assignment cost (mean Euclidean distance over
/// matched pairs) on farthest-point subsamples of size n_sub.
double emd(const PointCloud& a, const PointCloud& b, int n_sub = 256,
           std::uint64_t seed = 0);

/// max(max_a min_b |a-b|, max_b min_a |b-a|), unsquared
double hausdorff(const PointCloud& a, const PointCloud& b);

/// IoU of occupancy grids over [-1,1]^3. Out-of-range points clamp into
/// boundary cells; the clamp count is reported through `clamped` when given.
double voxel_iou(const PointCloud& a, const PointCloud& b, int resolution = 32,
                 int* clamped = nullptr);

/// Exact minimum-cost perfect matching on a square cost matrix (Hungarian
/// algorithm with potentials); returns per-row assigned column.
std::vector<int> solve_assignment(const Eigen::MatrixXd& cost);

// ---- segmentation metrics ---------------------------------------------------

/// Samples n_pred_points on pred (labels = primitive index) and gives every gt
/// point the label of its nearest predicted point.
std::vector<int> transfer_labels(const PointCloud& gt, const Assembly& pred,
                                 int n_pred_points, Rng& rng,
                                 int mesh_resolution = 32);

double rand_index(std::span<const int> x, std::span<const int> y);
double variation_of_information(std::span<const int> x, std::span<const int> y);
double segmentation_covering(std::span<const int> x, std::span<const int> y);

// ---- full protocol ----------------------------------------------------------

EvalReport evaluate(const Assembly& pred, const Assembly& gt, const EvalConfig& cfg);
EvalReport evaluate(const Assembly& pred, const PointCloud& labeled_gt,
                    const EvalConfig& cfg);

EvalReport aggregate_mean(const std::vector<EvalReport>& reports);
void write_reports_csv(const std::vector<EvalReport>& reports, const std::string& path);
void write_reports_json(const std::vector<EvalReport>& reports, const std::string& path);

}  // namespace primgen
