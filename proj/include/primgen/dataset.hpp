#pragma once

#include <array>
#include <string>
#include <vector>

#include "primgen/geometry.hpp"

namespace primgen {

struct GeneratorConfig {
  int count_min = 1;
  int count_max = 8;
  // default composition: mostly cuboids, some cylinders, few ellipsoids
  std::array<double, 3> class_probs = {0.852, 0.118, 0.030};
  double scale_min = 0.05;
  double scale_max = 0.35;
  double attach_probability = 0.7;
  double axis_aligned_probability = 0.8;
  double jitter = 0.0;  // stddev (radians) of rotation noise on axis-aligned draws
  bool uniform_placement = false;  // ignore attachment, place uniformly in the cube
  bool canonicalize = true;        // disabled by the no-canonicalization ablation
  std::uint64_t seed = 0;

  void validate() const;
};

struct DatasetRecord {
  std::string id;
  Assembly assembly;  // canonical (unless generated for ablation), z-y-x sorted
  int point_count = 0;
  PointCloud points;  // condition cloud; labels kept in memory, never serialized
};

/// Procedurally builds one assembly: primitives are attached face-to-face with
/// probability attach_probability (else placed uniformly), then the result is
/// normalized to the unit cube, canonicalized and sorted.
Assembly generate_assembly(const GeneratorConfig& cfg, Rng& rng);

DatasetRecord build_record(const Assembly& a, int n_points, Rng& rng);

/// count records with per-record seed streams derived from cfg.seed.
std::vector<DatasetRecord> generate_dataset(const GeneratorConfig& cfg, int count,
                                            int points_per_record);

/// JSON-lines dataset file. With inline_points=false the condition clouds go to
/// float32 binary sidecars under <dir>/points/ referenced via "points_file".
void write_dataset(const std::vector<DatasetRecord>& records, const std::string& path,
                   bool inline_points = true);
std::vector<DatasetRecord> read_dataset(const std::string& path);

// point file helpers: ".ply" = ASCII PLY, anything else = raw little-endian
// float32 xyz triples
Points read_point_file(const std::string& path);
void write_point_file_f32(const Points& points, const std::string& path);
void write_point_file_ply(const Points& points, const std::string& path);

// single-assembly JSON (same primitive schema as dataset records)
Assembly read_assembly_json(const std::string& path);
void write_assembly_json(const Assembly& a, const std::string& path,
                         const std::string& id = "");

}  // namespace primgen
