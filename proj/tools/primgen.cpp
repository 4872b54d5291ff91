#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>

#include <json.hpp>

#include "primgen/config.hpp"
#include "primgen/dataset.hpp"
#include "primgen/inference.hpp"
#include "primgen/metrics.hpp"
#include "primgen/tokenize.hpp"
#include "primgen/training.hpp"

namespace fs = std::filesystem;
using namespace primgen;
using nlohmann::json;

namespace {

int exit_code_for(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::io: return 3;
    case ErrorKind::parse: return 4;
    case ErrorKind::config:
    case ErrorKind::invalid_input:
    case ErrorKind::insufficient_input: return 5;
    case ErrorKind::version: return 6;
    case ErrorKind::contract_violation: return 7;
    default: return 1;
  }
}

// leftover args of the form --dotted.key value or --dotted.key=value
std::vector<std::pair<std::string, std::string>> parse_dotted(
    const std::vector<std::string>& extras) {
  std::vector<std::pair<std::string, std::string>> overrides;
  for (std::size_t i = 0; i < extras.size(); ++i) {
    std::string key = extras[i];
    if (key.rfind("--", 0) != 0 || key.find('.') == std::string::npos)
      fail(ErrorKind::config, "unrecognized argument: " + key);
    key = key.substr(2);
    std::string value;
    const auto eq = key.find('=');
    if (eq != std::string::npos) {
      value = key.substr(eq + 1);
      key = key.substr(0, eq);
    } else {
      if (i + 1 >= extras.size())
        fail(ErrorKind::config, "missing value for --" + key);
      value = extras[++i];
    }
    overrides.push_back({key, value});
  }
  return overrides;
}

void require_seed(const RunConfig& cfg) {
  if (!cfg.seed_set)
    fail(ErrorKind::config, "a seed is required (--seed or config key 'seed')");
}

std::string resolve_out_dir(RunConfig& cfg, const std::string& command) {
  if (cfg.out_dir.empty()) {
    const char* root = std::getenv("PRIMGEN_OUT");
    if (!root)
      fail(ErrorKind::config,
           "no output directory (--out, config key paths.out, or PRIMGEN_OUT)");
    cfg.out_dir = (fs::path(root) / command).string();
  }
  fs::create_directories(cfg.out_dir);
  return cfg.out_dir;
}

void echo_config(const RunConfig& cfg, const std::string& dir) {
  std::ofstream out(fs::path(dir) / "config.json");
  out << run_config_to_json(cfg) << "\n";
}

int cmd_gen_data(RunConfig cfg) {
  require_seed(cfg);
  const std::string out = resolve_out_dir(cfg, "gen-data");
  cfg.data.seed = cfg.seed;
  const auto records = generate_dataset(cfg.data, cfg.data_count, cfg.data_points);
  write_dataset(records, (fs::path(out) / "dataset.jsonl").string(),
                cfg.data_inline_points);
  echo_config(cfg, out);
  std::cout << "wrote " << records.size() << " records to " << out
            << "/dataset.jsonl\n";
  return 0;
}

int cmd_train(RunConfig cfg, const std::string& data_path,
              const std::string& resume) {
  require_seed(cfg);
  const std::string out = resolve_out_dir(cfg, "train");
  const auto records = read_dataset(data_path);
  PrimitiveModel model(cfg.model, derive_seed(cfg.seed, 0x11117));
  std::cout << "model parameters: " << model.parameter_count() << "\n";
  cfg.train.seed = cfg.seed;
  cfg.train.out_dir = out;
  echo_config(cfg, out);
  const TrainResult result = train(records, model, cfg.train, resume);
  if (!result.steps.empty())
    std::cout << "final loss: total " << result.steps.back().total << " (ce "
              << result.steps.back().l_ce << ", eos " << result.steps.back().l_eos
              << ", cd " << result.steps.back().l_cd << ")\n";
  std::cout << "checkpoint: " << result.final_checkpoint << "\n";
  return 0;
}

int cmd_infer(RunConfig cfg, const std::string& ckpt_path,
              const std::string& points_path) {
  require_seed(cfg);
  const std::string out = resolve_out_dir(cfg, "infer");
  LoadedCheckpoint loaded = load_checkpoint(ckpt_path);
  PointCloud cloud;
  cloud.points = read_point_file(points_path);
  cfg.sampling.seed = cfg.seed;
  const GenerationResult result =
      generate(cloud, loaded.model, loaded.discretizer, cfg.sampling);
  write_assembly_json(result.assembly, (fs::path(out) / "assembly.json").string(),
                      fs::path(points_path).stem().string());

  json diag;
  diag["terminated_by_eos"] = result.terminated_by_eos;
  diag["final_eos_probability"] = result.final_eos_probability;
  json steps = json::array();
  for (const StepDiagnostics& s : result.steps) {
    json step;
    step["eos_probability"] = s.eos_probability;
    step["class"] = s.chosen.class_index;
    step["scale_bins"] = s.chosen.scale_bins;
    step["rotation_bins"] = s.chosen.rotation_bins;
    step["translation_bins"] = s.chosen.translation_bins;
    steps.push_back(std::move(step));
  }
  diag["steps"] = std::move(steps);
  std::ofstream(fs::path(out) / "diagnostics.json") << diag.dump(2) << "\n";
  echo_config(cfg, out);
  std::cout << "generated " << result.assembly.size() << " primitives ("
            << (result.terminated_by_eos ? "eos" : "max_len") << ")\n";
  return 0;
}

int cmd_eval(RunConfig cfg, const std::string& pred_path, const std::string& gt_path) {
  const std::string out = resolve_out_dir(cfg, "eval");
  if (cfg.seed_set) cfg.eval.seed = cfg.seed;

  // gt may be a dataset file or a directory of assembly json files
  std::map<std::string, Assembly> gt;
  if (fs::is_regular_file(gt_path)) {
    for (const DatasetRecord& rec : read_dataset(gt_path)) gt[rec.id] = rec.assembly;
  } else if (fs::is_directory(gt_path)) {
    for (const auto& entry : fs::directory_iterator(gt_path))
      if (entry.path().extension() == ".json")
        gt[entry.path().stem().string()] = read_assembly_json(entry.path().string());
  } else {
    fail(ErrorKind::io, "ground truth path not found: " + gt_path);
  }

  std::vector<std::pair<std::string, Assembly>> preds;
  if (fs::is_regular_file(pred_path)) {
    preds.push_back({fs::path(pred_path).stem().string(),
                     read_assembly_json(pred_path)});
  } else if (fs::is_directory(pred_path)) {
    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(pred_path))
      if (entry.path().extension() == ".json") files.push_back(entry.path());
    std::sort(files.begin(), files.end());
    for (const fs::path& f : files)
      preds.push_back({f.stem().string(), read_assembly_json(f.string())});
  } else {
    fail(ErrorKind::io, "prediction path not found: " + pred_path);
  }
  if (preds.empty()) fail(ErrorKind::invalid_input, "no predictions to evaluate");

  std::vector<EvalReport> reports;
  for (const auto& [id, pred] : preds) {
    const auto it = gt.find(id);
    if (it == gt.end())
      fail(ErrorKind::io, "no ground truth for prediction id " + id);
    EvalReport rep = evaluate(pred, it->second, cfg.eval);
    rep.id = id;
    reports.push_back(rep);
  }
  write_reports_csv(reports, (fs::path(out) / "report.csv").string());
  write_reports_json(reports, (fs::path(out) / "report.json").string());
  echo_config(cfg, out);
  const EvalReport mean = aggregate_mean(reports);
  std::cout << "evaluated " << reports.size() << " samples: cd " << mean.cd
            << ", voxel_iou " << mean.voxel_iou;
  if (mean.has_segmentation) std::cout << ", ri " << mean.ri;
  std::cout << "\n";
  return 0;
}

int cmd_canon(const std::string& in_path, const std::string& out_path) {
  Assembly a = read_assembly_json(in_path);
  for (Primitive& p : a.primitives) p = canonicalize(p);
  a = sort_assembly(a);
  if (out_path.empty()) {
    json prims = json::array();
    for (const Primitive& p : a.primitives)
      prims.push_back({{"class", p.class_label},
                       {"scale", {p.scale.x(), p.scale.y(), p.scale.z()}},
                       {"rotation", {p.rotation.x(), p.rotation.y(), p.rotation.z()}},
                       {"translation",
                        {p.translation.x(), p.translation.y(), p.translation.z()}}});
    std::cout << json{{"primitives", prims}}.dump(2) << "\n";
  } else {
    write_assembly_json(a, out_path);
    std::cout << "wrote " << out_path << "\n";
  }
  return 0;
}

int cmd_export_mesh(const std::string& in_path, const std::string& out_path,
                    int resolution) {
  const Assembly a = read_assembly_json(in_path);
  if (a.empty()) fail(ErrorKind::empty_assembly, "assembly has no primitives");
  std::ofstream out(out_path);
  if (!out) fail(ErrorKind::io, "cannot open " + out_path + " for writing");
  out << "# primgen assembly export\n";
  out.precision(9);
  long vertex_base = 1;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const Primitive& p = a.primitives[i];
    // the cuboid tessellation is minimal (8 vertices) at any resolution
    const TriMesh mesh = primitive_mesh(p, resolution);
    out << "o prim_" << i << "_" << default_class_registry().get(p.class_label).name
        << "\n";
    for (Eigen::Index v = 0; v < mesh.vertices.rows(); ++v)
      out << "v " << mesh.vertices(v, 0) << " " << mesh.vertices(v, 1) << " "
          << mesh.vertices(v, 2) << "\n";
    for (const auto& f : mesh.faces)
      out << "f " << vertex_base + f[0] << " " << vertex_base + f[1] << " "
          << vertex_base + f[2] << "\n";
    vertex_base += mesh.vertices.rows();
  }
  std::cout << "wrote " << out_path << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"primgen: learned decomposition of 3D shapes into primitive assemblies"};
  app.require_subcommand(1);

  std::string config_path, out_dir, data_path, resume_path, ckpt_path, points_path;
  std::string pred_path, gt_path, in_path, mesh_out;
  std::uint64_t seed = 0;
  int resolution = 32;
  bool seed_given = false;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "JSON config file");
    sub->add_option("--seed", seed, "global seed")->each([&](const std::string&) {
      seed_given = true;
    });
    sub->add_option("--out", out_dir, "output directory");
    sub->allow_extras();  // --section.key value overrides
  };

  CLI::App* gen = app.add_subcommand("gen-data", "generate a synthetic dataset");
  add_common(gen);
  CLI::App* train_cmd = app.add_subcommand("train", "train a model on a dataset");
  add_common(train_cmd);
  train_cmd->add_option("--data", data_path, "dataset.jsonl path")->required();
  train_cmd->add_option("--resume", resume_path, "checkpoint to resume from");
  CLI::App* infer = app.add_subcommand("infer", "generate an assembly from points");
  add_common(infer);
  infer->add_option("--ckpt", ckpt_path, "model checkpoint")->required();
  infer->add_option("--points", points_path, "input point file (.ply or raw f32)")
      ->required();
  CLI::App* eval_cmd = app.add_subcommand("eval", "evaluate predictions against gt");
  add_common(eval_cmd);
  eval_cmd->add_option("--pred", pred_path, "prediction file or directory")->required();
  eval_cmd->add_option("--gt", gt_path, "ground-truth dataset.jsonl or directory")
      ->required();
  CLI::App* canon = app.add_subcommand("canon", "canonicalize an assembly file");
  canon->add_option("--in", in_path, "assembly json")->required();
  canon->add_option("--out", mesh_out, "output path (stdout when omitted)");
  CLI::App* export_mesh = app.add_subcommand("export-mesh", "write an OBJ mesh");
  export_mesh->add_option("--in", in_path, "assembly json")->required();
  export_mesh->add_option("--out", mesh_out, "output .obj path")->required();
  export_mesh->add_option("--resolution", resolution, "tessellation resolution");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 2;
  }

  try {
    if (canon->parsed()) return cmd_canon(in_path, mesh_out);
    if (export_mesh->parsed()) return cmd_export_mesh(in_path, mesh_out, resolution);

    CLI::App* active = app.get_subcommands().front();
    auto overrides = parse_dotted(active->remaining());
    if (seed_given) overrides.push_back({"seed", std::to_string(seed)});
    if (!out_dir.empty()) overrides.push_back({"paths.out", out_dir});
    RunConfig cfg = load_run_config(config_path, overrides);

    if (gen->parsed()) return cmd_gen_data(std::move(cfg));
    if (train_cmd->parsed()) return cmd_train(std::move(cfg), data_path, resume_path);
    if (infer->parsed()) return cmd_infer(std::move(cfg), ckpt_path, points_path);
    if (eval_cmd->parsed()) return cmd_eval(std::move(cfg), pred_path, gt_path);
    return 2;
  } catch (const Error& e) {
    std::cerr << "error: " << error_kind_name(e.kind()) << ": " << e.what() << "\n";
    return exit_code_for(e.kind());
  } catch (const std::exception& e) {
    std::cerr << "error: internal: " << e.what() << "\n";
    return 1;
  }
}
