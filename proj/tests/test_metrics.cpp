#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>

#include "primgen/dataset.hpp"
#include "primgen/metrics.hpp"
#include "support/test_util.hpp"

using namespace primgen;

namespace {

Points random_points(int n, Rng& rng, double span = 1.0) {
  std::uniform_real_distribution<double> uni(-span, span);
  Points pts(n, 3);
  for (Eigen::Index i = 0; i < pts.rows(); ++i)
    for (int k = 0; k < 3; ++k) pts(i, k) = uni(rng);
  return pts;
}

PointCloud cloud_of(const Points& pts) {
  PointCloud c;
  c.points = pts;
  return c;
}

// O(N^2) oracles
double brute_chamfer(const Points& a, const Points& b) {
  double s1 = 0.0, s2 = 0.0;
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    double best = 1e300;
    for (Eigen::Index j = 0; j < b.rows(); ++j)
      best = std::min(best, (a.row(i) - b.row(j)).squaredNorm());
    s1 += best;
  }
  for (Eigen::Index j = 0; j < b.rows(); ++j) {
    double best = 1e300;
    for (Eigen::Index i = 0; i < a.rows(); ++i)
      best = std::min(best, (a.row(i) - b.row(j)).squaredNorm());
    s2 += best;
  }
  return s1 / double(a.rows()) + s2 / double(b.rows());
}

double brute_hausdorff(const Points& a, const Points& b) {
  auto directed = [](const Points& from, const Points& to) {
    double worst = 0.0;
    for (Eigen::Index i = 0; i < from.rows(); ++i) {
      double best = 1e300;
      for (Eigen::Index j = 0; j < to.rows(); ++j)
        best = std::min(best, (from.row(i) - to.row(j)).squaredNorm());
      worst = std::max(worst, best);
    }
    return std::sqrt(worst);
  };
  return std::max(directed(a, b), directed(b, a));
}

// exact min-cost perfect matching via successive shortest paths (SPFA), an
// independent algorithm family from the production Hungarian solver
double mcmf_assignment_cost(const Eigen::MatrixXd& cost) {
  const int n = int(cost.rows());
  const int nodes = 2 * n + 2, s = 2 * n, t = 2 * n + 1;
  struct Edge {
    int to, cap;
    double w;
    int rev;
  };
  std::vector<std::vector<Edge>> g(nodes);
  auto add_edge = [&](int from, int to, int cap, double w) {
    g[from].push_back({to, cap, w, int(g[to].size())});
    g[to].push_back({from, 0, -w, int(g[from].size()) - 1});
  };
  for (int i = 0; i < n; ++i) add_edge(s, i, 1, 0.0);
  for (int j = 0; j < n; ++j) add_edge(n + j, t, 1, 0.0);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) add_edge(i, n + j, 1, cost(i, j));

  double total = 0.0;
  for (int flow = 0; flow < n; ++flow) {
    std::vector<double> dist(nodes, 1e300);
    std::vector<int> prev_node(nodes, -1), prev_edge(nodes, -1);
    std::vector<char> in_queue(nodes, 0);
    std::vector<int> queue = {s};
    dist[s] = 0.0;
    in_queue[s] = 1;
    for (std::size_t qi = 0; qi < queue.size(); ++qi) {
      const int u = queue[qi];
      in_queue[u] = 0;
      for (std::size_t e = 0; e < g[u].size(); ++e) {
        const Edge& ed = g[u][e];
        if (ed.cap > 0 && dist[u] + ed.w < dist[ed.to] - 1e-15) {
          dist[ed.to] = dist[u] + ed.w;
          prev_node[ed.to] = u;
          prev_edge[ed.to] = int(e);
          if (!in_queue[ed.to]) {
            queue.push_back(ed.to);
            in_queue[ed.to] = 1;
          }
        }
      }
    }
    total += dist[t];
    for (int v = t; v != s; v = prev_node[v]) {
      Edge& ed = g[prev_node[v]][prev_edge[v]];
      ed.cap -= 1;
      g[v][ed.rev].cap += 1;
    }
  }
  return total;
}

}  // namespace

TEST_CASE("chamfer_distance known values and brute force") {
  Rng rng(60);
  Points a = random_points(50, rng);
  Points b = random_points(50, rng);
  CHECK(chamfer_distance(cloud_of(a), cloud_of(a)) == 0.0);

  Points p1(1, 3), p2(1, 3);
  p1 << 0, 0, 0;
  p2 << 1, 0, 0;
  CHECK(chamfer_distance(cloud_of(p1), cloud_of(p2)) == doctest::Approx(2.0));

  CHECK(chamfer_distance(cloud_of(a), cloud_of(b)) ==
        doctest::Approx(brute_chamfer(a, b)).epsilon(1e-12));
  CHECK(chamfer_distance(cloud_of(a), cloud_of(b)) ==
        doctest::Approx(chamfer_distance(cloud_of(b), cloud_of(a))).epsilon(1e-12));

  CHECK_THROWS_AS(chamfer_distance(cloud_of(Points(0, 3)), cloud_of(a)), Error);
}

TEST_CASE("hausdorff known values and brute force") {
  Rng rng(61);
  Points a = random_points(50, rng);
  Points b = random_points(50, rng);
  CHECK(hausdorff(cloud_of(a), cloud_of(a)) == 0.0);

  Points p1(1, 3), p2(1, 3);
  p1 << 0, 0, 0;
  p2 << 3, 4, 0;
  CHECK(hausdorff(cloud_of(p1), cloud_of(p2)) == doctest::Approx(5.0));

  CHECK(hausdorff(cloud_of(a), cloud_of(b)) ==
        doctest::Approx(brute_hausdorff(a, b)).epsilon(1e-12));
}

TEST_CASE("kd-tree nearest matches brute force") {
  Rng rng(62);
  const Points pts = random_points(300, rng);
  const KdTree3 tree(pts);
  for (int q = 0; q < 200; ++q) {
    const Vec3 query = random_points(1, rng, 1.5).row(0).transpose();
    const auto [idx, d2] = tree.nearest(query);
    double best = 1e300;
    Eigen::Index best_i = -1;
    for (Eigen::Index i = 0; i < pts.rows(); ++i) {
      const double d = (pts.row(i).transpose() - query).squaredNorm();
      if (d < best) {
        best = d;
        best_i = i;
      }
    }
    CHECK(idx == best_i);
    CHECK(d2 == doctest::Approx(best).epsilon(1e-12));
  }
}

TEST_CASE("emd known values") {
  Points a(2, 3), b(2, 3);
  a << 0, 0, 0, 1, 0, 0;
  b << 0, 0, 0, 2, 0, 0;
  // identity matching costs (0 + 1)/2, swapped costs (2 + 1)/2
  CHECK(emd(cloud_of(a), cloud_of(b), 2) == doctest::Approx(0.5));

  Rng rng(63);
  const Points c = random_points(40, rng);
  CHECK(emd(cloud_of(c), cloud_of(c), 40, 7) == doctest::Approx(0.0));
}

TEST_CASE("emd equals factorial brute force for n <= 8") {
  Rng rng(64);
  for (int n : {2, 4, 6, 8}) {
    const Points a = random_points(n, rng);
    const Points b = random_points(n, rng);
    const double got = emd(cloud_of(a), cloud_of(b), n, 11);

    std::vector<int> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    double best = 1e300;
    do {
      double total = 0.0;
      for (int i = 0; i < n; ++i) total += (a.row(i) - b.row(perm[i])).norm();
      best = std::min(best, total / n);
    } while (std::next_permutation(perm.begin(), perm.end()));
    CHECK(got == doctest::Approx(best).epsilon(1e-10));
  }
}

TEST_CASE("assignment solver equals independent min-cost-flow at n = 64") {
  Rng rng(65);
  const int n = 64;
  const Points a = random_points(n, rng);
  const Points b = random_points(n, rng);
  Eigen::MatrixXd cost(n, n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) cost(i, j) = (a.row(i) - b.row(j)).norm();

  const std::vector<int> match = solve_assignment(cost);
  std::vector<char> used(n, 0);
  double hungarian = 0.0;
  for (int i = 0; i < n; ++i) {
    CHECK(match[i] >= 0);
    CHECK(!used[match[i]]);
    used[match[i]] = 1;
    hungarian += cost(i, match[i]);
  }
  CHECK(hungarian == doctest::Approx(mcmf_assignment_cost(cost)).epsilon(1e-9));
}

TEST_CASE("voxel_iou known grids") {
  Rng rng(66);
  const Points same = random_points(100, rng);
  CHECK(voxel_iou(cloud_of(same), cloud_of(same)) == 1.0);

  // disjoint octants
  Points a = random_points(50, rng, 0.4);
  Points b = a;
  a.array() += 0.5;   // all positive octant
  b.array() -= 0.5;   // all negative octant
  CHECK(voxel_iou(cloud_of(a), cloud_of(b)) == 0.0);

  // hand-built: A occupies 3 cells, B occupies 2, overlapping in 1 -> 1/4
  auto center_of_cell = [](int cx, int cy, int cz) {
    const double w = 2.0 / 32.0;
    return Vec3(-1.0 + (cx + 0.5) * w, -1.0 + (cy + 0.5) * w, -1.0 + (cz + 0.5) * w);
  };
  Points pa(3, 3), pb(2, 3);
  pa.row(0) = center_of_cell(1, 1, 1);
  pa.row(1) = center_of_cell(5, 5, 5);
  pa.row(2) = center_of_cell(9, 9, 9);
  pb.row(0) = center_of_cell(1, 1, 1);
  pb.row(1) = center_of_cell(20, 20, 20);
  CHECK(voxel_iou(cloud_of(pa), cloud_of(pb)) == doctest::Approx(0.25));

  // out-of-range points clamp into boundary cells and are counted
  Points pc(1, 3), pd(1, 3);
  pc << 1.5, 0, 0;
  pd << 1.0, 0, 0;
  int clamped = 0;
  CHECK(voxel_iou(cloud_of(pc), cloud_of(pd), 32, &clamped) == 1.0);
  CHECK(clamped == 1);
}

TEST_CASE("voxel_iou invariant under within-cell jitter") {
  Rng rng(67);
  const double w = 2.0 / 32.0;
  Points a = random_points(200, rng, 0.9);
  Points b = a;
  std::uniform_real_distribution<double> jitter(-0.49 * w, 0.49 * w);
  for (Eigen::Index i = 0; i < b.rows(); ++i)
    for (int k = 0; k < 3; ++k) {
      // keep the jittered point in the same cell
      const double cell = std::floor((a(i, k) + 1.0) / w);
      const double lo = -1.0 + cell * w, hi = lo + w;
      b(i, k) = std::clamp(a(i, k) + jitter(rng), lo + 1e-9, hi - 1e-9);
    }
  CHECK(voxel_iou(cloud_of(a), cloud_of(b)) == 1.0);
}

TEST_CASE("transfer_labels cases") {
  Rng rng(68);

  SUBCASE("single predicted primitive labels everything 0") {
    Assembly pred;
    pred.primitives.push_back(Primitive{});
    PointCloud gt = cloud_of(random_points(100, rng, 0.8));
    Rng trng(1);
    for (int l : transfer_labels(gt, pred, 500, trng)) CHECK(l == 0);
  }

  SUBCASE("well-separated primitives label by proximity") {
    Assembly pred;
    Primitive p;
    p.scale = Vec3(0.1, 0.1, 0.1);
    p.translation = Vec3(-0.8, 0, 0);
    pred.primitives.push_back(p);
    p.translation = Vec3(0.8, 0, 0);
    pred.primitives.push_back(p);
    // gt points near only the second primitive
    Points gt_pts = random_points(60, rng, 0.05);
    gt_pts.col(0).array() += 0.8;
    Rng trng(2);
    for (int l : transfer_labels(cloud_of(gt_pts), pred, 1000, trng)) CHECK(l == 1);
  }

  SUBCASE("self-transfer recovers the labels almost everywhere") {
    GeneratorConfig gcfg;
    gcfg.seed = 99;
    gcfg.count_min = 3;
    gcfg.count_max = 5;
    Rng grng(99);
    const Assembly a = generate_assembly(gcfg, grng);
    Rng srng(5);
    PointCloud gt = assembly_surface(a, 10000, srng);
    Rng trng(6);
    const std::vector<int> transferred = transfer_labels(gt, a, 10000, trng);
    int agree = 0;
    for (std::size_t i = 0; i < transferred.size(); ++i)
      if (transferred[i] == gt.labels[i]) ++agree;
    CHECK(double(agree) / double(transferred.size()) >= 0.95);
  }
}

TEST_CASE("rand index / voi / segmentation covering known values") {
  const std::vector<int> x = {0, 0, 1, 1};
  const std::vector<int> y = {0, 1, 0, 1};
  CHECK(rand_index(x, x) == 1.0);
  CHECK(variation_of_information(x, x) == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(segmentation_covering(x, x) == doctest::Approx(1.0));
  CHECK(rand_index(x, y) == doctest::Approx(2.0 / 6.0));

  CHECK_THROWS_AS(rand_index(x, std::vector<int>{0, 1}), Error);
}

TEST_CASE("segmentation metrics match brute force on random labelings") {
  Rng rng(69);
  for (int trial = 0; trial < 20; ++trial) {
    const int n = 20 + int(rng() % 181);
    const int kx = 1 + int(rng() % 6), ky = 1 + int(rng() % 6);
    std::vector<int> x(n), y(n);
    for (int i = 0; i < n; ++i) {
      x[i] = int(rng() % kx);
      y[i] = int(rng() % ky);
    }

    // RI: direct pair loop
    double agree = 0.0, pairs = 0.0;
    for (int i = 0; i < n; ++i)
      for (int j = i + 1; j < n; ++j) {
        pairs += 1.0;
        if ((x[i] == x[j]) == (y[i] == y[j])) agree += 1.0;
      }
    CHECK(rand_index(x, y) == doctest::Approx(agree / pairs).epsilon(1e-9));

    // VOI: direct histogram entropies
    std::map<int, double> px, py;
    std::map<std::pair<int, int>, double> pxy;
    for (int i = 0; i < n; ++i) {
      px[x[i]] += 1.0 / n;
      py[y[i]] += 1.0 / n;
      pxy[{x[i], y[i]}] += 1.0 / n;
    }
    double hx = 0, hy = 0, hxy = 0;
    for (auto& [k, p] : px) hx -= p * std::log(p);
    for (auto& [k, p] : py) hy -= p * std::log(p);
    for (auto& [k, p] : pxy) hxy -= p * std::log(p);
    // VI = 2 H(X,Y) - H(X) - H(Y)
    const double voi_oracle = 2.0 * hxy - hx - hy;
    CHECK(variation_of_information(x, y) ==
          doctest::Approx(voi_oracle).epsilon(1e-9));

    // SC: direct nested loops
    double sc_oracle = 0.0;
    for (auto& [lx, axn] : px) {
      double best = 0.0;
      for (auto& [ly, byn] : py) {
        double inter = 0.0;
        for (int i = 0; i < n; ++i)
          if (x[i] == lx && y[i] == ly) inter += 1.0;
        if (inter > 0.0)
          best = std::max(best, inter / (axn * n + byn * n - inter));
      }
      sc_oracle += axn * best;
    }
    CHECK(segmentation_covering(x, y) == doctest::Approx(sc_oracle).epsilon(1e-9));

    // invariance under relabeling of either side
    std::vector<int> y_relabeled(n);
    for (int i = 0; i < n; ++i) y_relabeled[i] = 1000 - y[i] * 7;
    CHECK(rand_index(x, y_relabeled) == doctest::Approx(rand_index(x, y)));
    CHECK(variation_of_information(x, y_relabeled) ==
          doctest::Approx(variation_of_information(x, y)));
    CHECK(segmentation_covering(x, y_relabeled) ==
          doctest::Approx(segmentation_covering(x, y)));
  }
}

TEST_CASE("evaluate: self-evaluation is near-perfect") {
  // disjoint primitives: label transfer has no shared-boundary ambiguity
  Assembly a;
  for (int i = 0; i < 3; ++i) {
    Primitive p;
    p.class_label = i;
    p.scale = Vec3(0.18, 0.14, 0.1 + 0.04 * i);
    p.translation = Vec3(-0.6 + 0.6 * i, 0.3 * (i - 1), 0.2 * i - 0.2);
    a.primitives.push_back(p);
  }

  EvalConfig cfg;
  cfg.seed = 3;
  const EvalReport rep = evaluate(a, a, cfg);
  CHECK(rep.cd <= 1e-3);
  CHECK(rep.voxel_iou >= 0.95);
  REQUIRE(rep.has_segmentation);
  CHECK(rep.ri >= 0.99);
  CHECK(rep.voi <= 0.1);
  CHECK(rep.sc >= 0.95);

  // face-attached assemblies flip labels on shared faces; still close
  GeneratorConfig gcfg;
  gcfg.seed = 70;
  gcfg.count_min = 2;
  gcfg.count_max = 5;
  Rng grng(70);
  const Assembly attached = generate_assembly(gcfg, grng);
  const EvalReport rep2 = evaluate(attached, attached, cfg);
  CHECK(rep2.cd <= 1e-3);
  CHECK(rep2.ri >= 0.9);
}

TEST_CASE("evaluate: identical single cuboid gives voxel_iou exactly 1") {
  Assembly a;
  a.primitives.push_back(Primitive{});
  EvalConfig cfg;
  cfg.seed = 4;
  const EvalReport rep = evaluate(a, a, cfg);
  CHECK(rep.voxel_iou == 1.0);
  CHECK(rep.cd == 0.0);
}

TEST_CASE("evaluate is stable under canonicalization of either assembly") {
  Rng rng(71);
  Assembly a;
  for (int i = 0; i < 3; ++i)
    a.primitives.push_back(testutil::random_primitive(rng));
  Assembly canon = a;
  for (Primitive& p : canon.primitives) p = canonicalize(p);

  EvalConfig cfg;
  cfg.seed = 5;
  const EvalReport rep = evaluate(canon, a, cfg);
  CHECK(rep.cd <= 2e-3);

  // canonical parameters re-tessellate the same surface in a permuted local
  // frame, so the comparison floor is the resample-vs-resample IoU
  EvalConfig other = cfg;
  other.seed = 6;
  Rng r1(cfg.seed), r2(other.seed);
  PointCloud s1 = assembly_surface(a, cfg.sample_points, r1, cfg.mesh_resolution);
  PointCloud s2 = assembly_surface(a, cfg.sample_points, r2, cfg.mesh_resolution);
  const double resample_floor = voxel_iou(s1, s2, cfg.voxel_resolution);
  CHECK(rep.voxel_iou >= resample_floor - 0.05);
}

TEST_CASE("aggregate_mean and report files") {
  std::vector<EvalReport> reports(2);
  reports[0].id = "a";
  reports[0].cd = 1.0;
  reports[0].voxel_iou = 0.5;
  reports[1].id = "b";
  reports[1].cd = 3.0;
  reports[1].voxel_iou = 1.0;
  const EvalReport mean = aggregate_mean(reports);
  CHECK(mean.cd == doctest::Approx(2.0));
  CHECK(mean.voxel_iou == doctest::Approx(0.75));

  const auto dir = std::filesystem::temp_directory_path() / "primgen_metrics_test";
  std::filesystem::create_directories(dir);
  write_reports_csv(reports, (dir / "report.csv").string());
  write_reports_json(reports, (dir / "report.json").string());
  std::ifstream csv(dir / "report.csv");
  std::string header;
  std::getline(csv, header);
  CHECK(header == "id,cd,emd,hausdorff,voxel_iou,ri,voi,sc");
  int lines = 1;
  std::string line;
  while (std::getline(csv, line)) ++lines;
  CHECK(lines == 4);  // header + 2 samples + aggregate
}

TEST_CASE("cd and hausdorff are strictly positive for non-coincident sets") {
  Rng rng(132);
  for (int trial = 0; trial < 20; ++trial) {
    Points a = random_points(30, rng);
    Points b = a;
    b(int(rng() % 30), int(rng() % 3)) += 0.25;  // move one point off
    CHECK(chamfer_distance(cloud_of(a), cloud_of(b)) > 0.0);
    CHECK(hausdorff(cloud_of(a), cloud_of(b)) > 0.0);
    CHECK(chamfer_distance(cloud_of(a), cloud_of(a)) == 0.0);
  }
}
