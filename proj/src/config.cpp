#include "primgen/config.hpp"

#include <json.hpp>

#include <fstream>
#include <functional>

namespace primgen {

using nlohmann::json;

namespace {

struct Entry {
  std::string path;
  std::function<void(RunConfig&, const json&)> set;
  std::function<json(const RunConfig&)> get;
};

template <typename T, typename F>
Entry field(const std::string& path, F accessor) {
  return Entry{
      path,
      [accessor, path](RunConfig& cfg, const json& j) {
        try {
          accessor(cfg) = j.get<T>();
        } catch (const json::exception&) {
          fail(ErrorKind::config, "bad value for config key " + path);
        }
      },
      [accessor](const RunConfig& cfg) {
        return json(accessor(const_cast<RunConfig&>(cfg)));
      }};
}

std::vector<Entry> schema() {
  std::vector<Entry> s;
  auto add = [&s](Entry e) { s.push_back(std::move(e)); };

  add({"seed",
       [](RunConfig& c, const json& j) {
         c.seed = j.get<std::uint64_t>();
         c.seed_set = true;
       },
       [](const RunConfig& c) { return json(c.seed); }});
  add(field<std::string>("paths.out", [](RunConfig& c) -> std::string& { return c.out_dir; }));

  add(field<int>("model.layers", [](RunConfig& c) -> int& { return c.model.layers; }));
  add(field<int>("model.hidden_size", [](RunConfig& c) -> int& { return c.model.hidden_size; }));
  add(field<int>("model.attention_heads", [](RunConfig& c) -> int& { return c.model.attention_heads; }));
  add(field<int>("model.condition_tokens", [](RunConfig& c) -> int& { return c.model.condition_tokens; }));
  add(field<int>("model.condition_points", [](RunConfig& c) -> int& { return c.model.condition_points; }));
  add(field<int>("model.class_embed_dim", [](RunConfig& c) -> int& { return c.model.class_embed_dim; }));
  add(field<int>("model.attr_embed_dim", [](RunConfig& c) -> int& { return c.model.attr_embed_dim; }));
  add(field<int>("model.num_classes", [](RunConfig& c) -> int& { return c.model.num_classes; }));
  add(field<int>("model.rotation_levels", [](RunConfig& c) -> int& { return c.model.rotation_levels; }));
  add(field<int>("model.scale_levels", [](RunConfig& c) -> int& { return c.model.scale_levels; }));
  add(field<int>("model.translation_levels", [](RunConfig& c) -> int& { return c.model.translation_levels; }));
  add(field<int>("model.max_sequence", [](RunConfig& c) -> int& { return c.model.max_sequence; }));
  add(field<int>("model.ffn_multiplier", [](RunConfig& c) -> int& { return c.model.ffn_multiplier; }));
  add(field<bool>("model.cascade", [](RunConfig& c) -> bool& { return c.model.cascade; }));
  add(field<bool>("model.bidirectional_condition", [](RunConfig& c) -> bool& { return c.model.bidirectional_condition; }));

  add(field<double>("train.learning_rate", [](RunConfig& c) -> double& { return c.train.learning_rate; }));
  add(field<int>("train.batch_size", [](RunConfig& c) -> int& { return c.train.batch_size; }));
  add(field<int>("train.grad_accumulation", [](RunConfig& c) -> int& { return c.train.grad_accumulation; }));
  add(field<int>("train.epochs", [](RunConfig& c) -> int& { return c.train.epochs; }));
  add(field<double>("train.gumbel_temp_start", [](RunConfig& c) -> double& { return c.train.gumbel_temp_start; }));
  add(field<double>("train.gumbel_temp_end", [](RunConfig& c) -> double& { return c.train.gumbel_temp_end; }));
  add(field<bool>("train.gumbel_hard", [](RunConfig& c) -> bool& { return c.train.gumbel_hard; }));
  add(field<int>("train.cd_points_per_primitive", [](RunConfig& c) -> int& { return c.train.cd_points_per_primitive; }));
  add(field<double>("train.weight_ce", [](RunConfig& c) -> double& { return c.train.weight_ce; }));
  add(field<double>("train.weight_eos", [](RunConfig& c) -> double& { return c.train.weight_eos; }));
  add(field<double>("train.weight_cd", [](RunConfig& c) -> double& { return c.train.weight_cd; }));
  add(field<bool>("train.cd_union", [](RunConfig& c) -> bool& { return c.train.cd_union; }));
  add(field<bool>("train.enforce_canonical_targets", [](RunConfig& c) -> bool& { return c.train.enforce_canonical_targets; }));
  add(field<int>("train.checkpoint_every", [](RunConfig& c) -> int& { return c.train.checkpoint_every; }));
  add(field<int>("train.threads", [](RunConfig& c) -> int& { return c.train.threads; }));

  add(field<int>("data.count", [](RunConfig& c) -> int& { return c.data_count; }));
  add(field<int>("data.points", [](RunConfig& c) -> int& { return c.data_points; }));
  add(field<bool>("data.inline_points", [](RunConfig& c) -> bool& { return c.data_inline_points; }));
  add(field<int>("data.count_min", [](RunConfig& c) -> int& { return c.data.count_min; }));
  add(field<int>("data.count_max", [](RunConfig& c) -> int& { return c.data.count_max; }));
  add({"data.class_probs",
       [](RunConfig& c, const json& j) {
         if (!j.is_array() || j.size() != 3)
           fail(ErrorKind::config, "data.class_probs must be an array of 3 numbers");
         for (int i = 0; i < 3; ++i) c.data.class_probs[i] = j[i].get<double>();
       },
       [](const RunConfig& c) {
         return json{c.data.class_probs[0], c.data.class_probs[1], c.data.class_probs[2]};
       }});
  add(field<double>("data.scale_min", [](RunConfig& c) -> double& { return c.data.scale_min; }));
  add(field<double>("data.scale_max", [](RunConfig& c) -> double& { return c.data.scale_max; }));
  add(field<double>("data.attach_probability", [](RunConfig& c) -> double& { return c.data.attach_probability; }));
  add(field<double>("data.axis_aligned_probability", [](RunConfig& c) -> double& { return c.data.axis_aligned_probability; }));
  add(field<double>("data.jitter", [](RunConfig& c) -> double& { return c.data.jitter; }));
  add(field<bool>("data.uniform_placement", [](RunConfig& c) -> bool& { return c.data.uniform_placement; }));
  add(field<bool>("data.canonicalize", [](RunConfig& c) -> bool& { return c.data.canonicalize; }));

  add({"sampling.mode",
       [](RunConfig& c, const json& j) {
         const std::string mode = j.get<std::string>();
         if (mode == "greedy")
           c.sampling.mode = SamplingConfig::Mode::greedy;
         else if (mode == "temperature")
           c.sampling.mode = SamplingConfig::Mode::temperature;
         else if (mode == "top-k")
           c.sampling.mode = SamplingConfig::Mode::top_k;
         else
           fail(ErrorKind::config, "sampling.mode must be greedy, temperature or top-k");
       },
       [](const RunConfig& c) {
         switch (c.sampling.mode) {
           case SamplingConfig::Mode::greedy: return json("greedy");
           case SamplingConfig::Mode::temperature: return json("temperature");
           case SamplingConfig::Mode::top_k: return json("top-k");
         }
         return json("greedy");
       }});
  add(field<double>("sampling.temperature", [](RunConfig& c) -> double& { return c.sampling.temperature; }));
  add(field<int>("sampling.k", [](RunConfig& c) -> int& { return c.sampling.k; }));
  add(field<double>("sampling.eos_threshold", [](RunConfig& c) -> double& { return c.sampling.eos_threshold; }));
  add(field<int>("sampling.max_len", [](RunConfig& c) -> int& { return c.sampling.max_len; }));

  add(field<int>("eval.sample_points", [](RunConfig& c) -> int& { return c.eval.sample_points; }));
  add(field<int>("eval.emd_subsample", [](RunConfig& c) -> int& { return c.eval.emd_subsample; }));
  add(field<int>("eval.voxel_resolution", [](RunConfig& c) -> int& { return c.eval.voxel_resolution; }));
  add(field<int>("eval.mesh_resolution", [](RunConfig& c) -> int& { return c.eval.mesh_resolution; }));
  add(field<int>("eval.transfer_points", [](RunConfig& c) -> int& { return c.eval.transfer_points; }));
  return s;
}

const Entry* find_entry(const std::vector<Entry>& entries, const std::string& path) {
  for (const Entry& e : entries)
    if (e.path == path) return &e;
  return nullptr;
}

void flatten(const json& j, const std::string& prefix,
             std::vector<std::pair<std::string, json>>& out) {
  if (j.is_object()) {
    for (const auto& [key, value] : j.items())
      flatten(value, prefix.empty() ? key : prefix + "." + key, out);
  } else {
    out.push_back({prefix, j});
  }
}

json parse_override_value(const std::string& text) {
  // accept JSON literals (numbers, booleans, arrays) or bare strings
  try {
    return json::parse(text);
  } catch (const json::exception&) {
    return json(text);
  }
}

}  // namespace

RunConfig load_run_config(
    const std::string& config_path,
    const std::vector<std::pair<std::string, std::string>>& overrides) {
  const std::vector<Entry> entries = schema();
  RunConfig cfg;

  if (!config_path.empty()) {
    std::ifstream in(config_path);
    if (!in) fail(ErrorKind::io, "cannot open config file " + config_path);
    json j;
    try {
      j = json::parse(in);
    } catch (const json::exception& e) {
      fail(ErrorKind::parse, config_path + ": " + e.what());
    }
    std::vector<std::pair<std::string, json>> flat;
    flatten(j, "", flat);
    // class_probs flattens into indexed leaves; reassemble array-valued keys
    for (auto it = flat.begin(); it != flat.end();) {
      if (it->first.rfind("data.class_probs.", 0) == 0) {
        it = flat.erase(it);
      } else {
        ++it;
      }
    }
    if (j.contains("data") && j["data"].contains("class_probs"))
      flat.push_back({"data.class_probs", j["data"]["class_probs"]});
    for (const auto& [path, value] : flat) {
      const Entry* e = find_entry(entries, path);
      if (!e) fail(ErrorKind::config, "unknown config key: " + path);
      e->set(cfg, value);
    }
  }

  for (const auto& [path, text] : overrides) {
    const Entry* e = find_entry(entries, path);
    if (!e) fail(ErrorKind::config, "unknown config key: " + path);
    e->set(cfg, parse_override_value(text));
  }
  return cfg;
}

std::string run_config_to_json(const RunConfig& cfg) {
  json out;
  for (const Entry& e : schema()) {
    json* slot = &out;
    std::string rest = e.path;
    for (std::size_t dot = rest.find('.'); dot != std::string::npos;
         dot = rest.find('.')) {
      slot = &(*slot)[rest.substr(0, dot)];
      rest = rest.substr(dot + 1);
    }
    (*slot)[rest] = e.get(cfg);
  }
  return out.dump(2);
}

}  // namespace primgen
