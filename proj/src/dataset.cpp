#include "primgen/dataset.hpp"

#include <json.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "primgen/tokenize.hpp"

namespace primgen {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

constexpr int kDatasetVersion = 1;

// half-extent of a primitive along each world axis (exact for cuboids,
// conservative for the curved classes)
Vec3 loose_half_extents(const Primitive& p) {
  const Mat3 m = euler_to_matrix(p.rotation) * p.scale.asDiagonal();
  Vec3 h;
  for (int u = 0; u < 3; ++u) h[u] = m.row(u).cwiseAbs().sum();
  return h;
}

}  // namespace

void GeneratorConfig::validate() const {
  if (count_min < 1 || count_max < count_min)
    fail(ErrorKind::invalid_input, "count_range must satisfy 1 <= min <= max");
  double sum = 0.0;
  for (double p : class_probs) {
    if (p < 0.0) fail(ErrorKind::invalid_input, "class_probs must be nonnegative");
    sum += p;
  }
  if (std::abs(sum - 1.0) > 1e-9)
    fail(ErrorKind::invalid_input, "class_probs must sum to 1");
  if (!(scale_min > 0.0) || scale_max < scale_min || scale_max > 1.0)
    fail(ErrorKind::invalid_input, "scale_range must satisfy 0 < min <= max <= 1");
  if (attach_probability < 0.0 || attach_probability > 1.0 ||
      axis_aligned_probability < 0.0 || axis_aligned_probability > 1.0)
    fail(ErrorKind::invalid_input, "probabilities must lie in [0, 1]");
  if (jitter < 0.0) fail(ErrorKind::invalid_input, "jitter must be nonnegative");
}

Assembly generate_assembly(const GeneratorConfig& cfg, Rng& rng) {
  cfg.validate();
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::uniform_int_distribution<int> count_dist(cfg.count_min, cfg.count_max);

  auto draw_class = [&]() {
    const double u = uni(rng);
    double acc = 0.0;
    for (int c = 0; c < 3; ++c) {
      acc += cfg.class_probs[c];
      if (u < acc) return c;
    }
    return 2;
  };

  const int n = count_dist(rng);
  Assembly a;
  a.primitives.reserve(n);
  for (int i = 0; i < n; ++i) {
    Primitive p;
    p.class_label = draw_class();
    for (int k = 0; k < 3; ++k)
      p.scale[k] = cfg.scale_min + (cfg.scale_max - cfg.scale_min) * uni(rng);

    if (uni(rng) < cfg.axis_aligned_probability) {
      for (int k = 0; k < 3; ++k) {
        const double r = cfg.jitter > 0.0 ? cfg.jitter * gauss(rng) : 0.0;
        p.rotation[k] = std::clamp(r, -M_PI, std::nextafter(M_PI, 0.0));
      }
    } else {
      for (int k = 0; k < 3; ++k) p.rotation[k] = -M_PI + 2.0 * M_PI * uni(rng);
    }

    if (i == 0) {
      for (int k = 0; k < 3; ++k) p.translation[k] = 0.1 * (2.0 * uni(rng) - 1.0);
    } else if (!cfg.uniform_placement && uni(rng) < cfg.attach_probability) {
      const Primitive& host = a.primitives[rng() % a.primitives.size()];
      const int axis = int(rng() % 3);
      const double sign = (rng() % 2) ? 1.0 : -1.0;
      const Vec3 host_h = loose_half_extents(host);
      const Vec3 new_h = loose_half_extents(p);
      p.translation = host.translation;
      p.translation[axis] += sign * (host_h[axis] + new_h[axis]);
      // slide along the shared face so attachments are not always centered
      for (int k = 0; k < 3; ++k)
        if (k != axis) p.translation[k] += 0.5 * host_h[k] * (2.0 * uni(rng) - 1.0);
    } else {
      for (int k = 0; k < 3; ++k) p.translation[k] = 0.8 * (2.0 * uni(rng) - 1.0);
    }
    a.primitives.push_back(p);
  }

  Assembly out = normalize_to_unit_cube(a).value;
  for (Primitive& p : out.primitives) {
    // normalization can push a rotated primitive's half-extent slightly past 1
    for (int k = 0; k < 3; ++k) p.scale[k] = std::clamp(p.scale[k], 1e-6, 1.0);
    for (int k = 0; k < 3; ++k)
      p.translation[k] = std::clamp(p.translation[k], -1.0, 1.0);
    if (cfg.canonicalize) p = canonicalize(p);
  }
  return sort_assembly(out);
}

DatasetRecord build_record(const Assembly& a, int n_points, Rng& rng) {
  DatasetRecord rec;
  rec.assembly = a;
  rec.point_count = n_points;
  rec.points = assembly_surface(a, n_points, rng);
  return rec;
}

std::vector<DatasetRecord> generate_dataset(const GeneratorConfig& cfg, int count,
                                            int points_per_record) {
  std::vector<DatasetRecord> records;
  records.reserve(count);
  for (int i = 0; i < count; ++i) {
    Rng rng(derive_seed(cfg.seed, std::uint64_t(i)));
    DatasetRecord rec =
        build_record(generate_assembly(cfg, rng), points_per_record, rng);
    char buf[32];
    std::snprintf(buf, sizeof(buf), "sample_%06d", i);
    rec.id = buf;
    records.push_back(std::move(rec));
  }
  return records;
}

namespace {

json primitive_to_json(const Primitive& p) {
  return json{{"class", p.class_label},
              {"scale", {p.scale.x(), p.scale.y(), p.scale.z()}},
              {"rotation", {p.rotation.x(), p.rotation.y(), p.rotation.z()}},
              {"translation",
               {p.translation.x(), p.translation.y(), p.translation.z()}}};
}

Vec3 vec3_from_json(const json& j, const char* what) {
  if (!j.is_array() || j.size() != 3)
    fail(ErrorKind::parse, std::string(what) + " must be an array of 3 numbers");
  return Vec3(j[0].get<double>(), j[1].get<double>(), j[2].get<double>());
}

Primitive primitive_from_json(const json& j) {
  Primitive p;
  p.class_label = j.at("class").get<int>();
  p.scale = vec3_from_json(j.at("scale"), "scale");
  p.rotation = vec3_from_json(j.at("rotation"), "rotation");
  p.translation = vec3_from_json(j.at("translation"), "translation");
  return p;
}

}  // namespace

void write_dataset(const std::vector<DatasetRecord>& records, const std::string& path,
                   bool inline_points) {
  std::ofstream out(path);
  if (!out) fail(ErrorKind::io, "cannot open " + path + " for writing");
  out << json{{"format", "primgen.dataset"}, {"version", kDatasetVersion}}.dump()
      << "\n";

  if (!inline_points)
    fs::create_directories(fs::path(path).parent_path() / "points");

  for (const DatasetRecord& rec : records) {
    json j;
    j["id"] = rec.id;
    json prims = json::array();
    for (const Primitive& p : rec.assembly.primitives)
      prims.push_back(primitive_to_json(p));
    j["primitives"] = std::move(prims);
    if (inline_points) {
      json pts = json::array();
      for (Eigen::Index i = 0; i < rec.points.points.rows(); ++i)
        pts.push_back({rec.points.points(i, 0), rec.points.points(i, 1),
                       rec.points.points(i, 2)});
      j["points"] = std::move(pts);
    } else {
      const std::string rel = "points/" + rec.id + ".bin";
      write_point_file_f32(rec.points.points,
                           (fs::path(path).parent_path() / rel).string());
      j["points_file"] = rel;
    }
    out << j.dump() << "\n";
  }
  if (!out) fail(ErrorKind::io, "write failure on " + path);
}

std::vector<DatasetRecord> read_dataset(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::io, "cannot open " + path);
  std::vector<DatasetRecord> records;
  std::string line;
  int line_no = 0;
  const fs::path dir = fs::path(path).parent_path();
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      fail(ErrorKind::parse,
           path + ": line " + std::to_string(line_no) + ": " + e.what());
    }
    if (j.contains("format")) {
      if (j.value("version", -1) != kDatasetVersion)
        fail(ErrorKind::version,
             path + ": unsupported dataset version " + j["version"].dump());
      continue;
    }
    try {
      DatasetRecord rec;
      rec.id = j.at("id").get<std::string>();
      for (const json& pj : j.at("primitives"))
        rec.assembly.primitives.push_back(primitive_from_json(pj));
      if (j.contains("points_file")) {
        rec.points.points =
            read_point_file((dir / j["points_file"].get<std::string>()).string());
      } else {
        const json& pts = j.at("points");
        rec.points.points.resize(pts.size(), 3);
        for (std::size_t i = 0; i < pts.size(); ++i) {
          rec.points.points(i, 0) = pts[i][0].get<double>();
          rec.points.points(i, 1) = pts[i][1].get<double>();
          rec.points.points(i, 2) = pts[i][2].get<double>();
        }
      }
      rec.point_count = int(rec.points.points.rows());
      records.push_back(std::move(rec));
    } catch (const json::exception& e) {
      fail(ErrorKind::parse,
           path + ": line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return records;
}

Points read_point_file(const std::string& path) {
  if (!fs::exists(path)) fail(ErrorKind::io, "point file not found: " + path);
  if (fs::path(path).extension() == ".ply") {
    std::ifstream in(path);
    std::string token;
    long n_vertex = -1;
    int n_props = 0;
    bool in_vertex_element = false;
    std::string line;
    if (!std::getline(in, line) || line.rfind("ply", 0) != 0)
      fail(ErrorKind::parse, path + ": not a PLY file");
    while (std::getline(in, line)) {
      std::istringstream ls(line);
      ls >> token;
      if (token == "format") {
        std::string kind;
        ls >> kind;
        if (kind != "ascii")
          fail(ErrorKind::parse, path + ": only ASCII PLY supported");
      } else if (token == "element") {
        std::string what;
        ls >> what;
        in_vertex_element = (what == "vertex");
        if (in_vertex_element) ls >> n_vertex;
      } else if (token == "property" && in_vertex_element) {
        ++n_props;
      } else if (token == "end_header") {
        break;
      }
    }
    if (n_vertex < 0 || n_props < 3)
      fail(ErrorKind::parse, path + ": missing vertex element with x/y/z");
    Points pts(n_vertex, 3);
    for (long i = 0; i < n_vertex; ++i) {
      if (!std::getline(in, line))
        fail(ErrorKind::parse, path + ": truncated vertex data");
      std::istringstream ls(line);
      for (int k = 0; k < 3; ++k)
        if (!(ls >> pts(i, k)))
          fail(ErrorKind::parse, path + ": bad vertex line " + std::to_string(i));
    }
    return pts;
  }

  // raw little-endian float32 xyz triples
  std::ifstream in(path, std::ios::binary);
  in.seekg(0, std::ios::end);
  const std::streamoff bytes = in.tellg();
  in.seekg(0);
  if (bytes % 12 != 0)
    fail(ErrorKind::parse, path + ": size is not a multiple of 12 bytes");
  const long n = long(bytes / 12);
  std::vector<float> raw(std::size_t(n) * 3);
  in.read(reinterpret_cast<char*>(raw.data()), bytes);
  if (!in) fail(ErrorKind::io, "read failure on " + path);
  Points pts(n, 3);
  for (long i = 0; i < n; ++i)
    for (int k = 0; k < 3; ++k) pts(i, k) = raw[std::size_t(i) * 3 + k];
  return pts;
}

void write_point_file_f32(const Points& points, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorKind::io, "cannot open " + path + " for writing");
  std::vector<float> raw(std::size_t(points.rows()) * 3);
  for (Eigen::Index i = 0; i < points.rows(); ++i)
    for (int k = 0; k < 3; ++k) raw[std::size_t(i) * 3 + k] = float(points(i, k));
  out.write(reinterpret_cast<const char*>(raw.data()),
            std::streamsize(raw.size() * sizeof(float)));
  if (!out) fail(ErrorKind::io, "write failure on " + path);
}

void write_point_file_ply(const Points& points, const std::string& path) {
  std::ofstream out(path);
  if (!out) fail(ErrorKind::io, "cannot open " + path + " for writing");
  out << "ply\nformat ascii 1.0\nelement vertex " << points.rows()
      << "\nproperty float x\nproperty float y\nproperty float z\nend_header\n";
  out.precision(17);
  for (Eigen::Index i = 0; i < points.rows(); ++i)
    out << points(i, 0) << " " << points(i, 1) << " " << points(i, 2) << "\n";
  if (!out) fail(ErrorKind::io, "write failure on " + path);
}

Assembly read_assembly_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::io, "cannot open " + path);
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    fail(ErrorKind::parse, path + ": " + e.what());
  }
  Assembly a;
  try {
    for (const json& pj : j.at("primitives"))
      a.primitives.push_back(primitive_from_json(pj));
  } catch (const json::exception& e) {
    fail(ErrorKind::parse, path + ": " + e.what());
  }
  return a;
}

void write_assembly_json(const Assembly& a, const std::string& path,
                         const std::string& id) {
  json j;
  if (!id.empty()) j["id"] = id;
  json prims = json::array();
  for (const Primitive& p : a.primitives) prims.push_back(primitive_to_json(p));
  j["primitives"] = std::move(prims);
  std::ofstream out(path);
  if (!out) fail(ErrorKind::io, "cannot open " + path + " for writing");
  out << j.dump(2) << "\n";
  if (!out) fail(ErrorKind::io, "write failure on " + path);
}

}  // namespace primgen
