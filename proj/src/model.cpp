#include "primgen/model.hpp"

#include <json.hpp>

#include <cmath>
#include <fstream>

#include "primgen/nn/optim.hpp"

namespace primgen {

using nn::Mat;
using nn::Tape;
using nn::Var;
using nlohmann::json;

void ModelConfig::validate() const {
  if (layers < 1 || hidden_size < 1 || attention_heads < 1 || condition_tokens < 1 ||
      condition_points < 1 || class_embed_dim < 1 || attr_embed_dim < 1 ||
      num_classes < 1 || rotation_levels < 1 || scale_levels < 1 ||
      translation_levels < 1 || max_sequence < 1 || ffn_multiplier < 1)
    fail(ErrorKind::config, "model dimensions must be positive");
  if (hidden_size % attention_heads != 0)
    fail(ErrorKind::config, "hidden_size must be divisible by attention_heads");
}

PrimitiveModel::Linear PrimitiveModel::make_linear(const std::string& name, int in,
                                                   int out) {
  Linear lin;
  lin.w = &params_.create(name + ".w", in, out);
  lin.b = &params_.create(name + ".b", 1, out);
  return lin;
}

PrimitiveModel::PrimitiveModel(ModelConfig cfg, std::uint64_t init_seed) : cfg_(cfg) {
  cfg_.validate();
  const int h = cfg_.hidden_size;
  const int ffn = h * cfg_.ffn_multiplier;

  lift1_ = make_linear("cond.lift1", 3, h);
  lift2_ = make_linear("cond.lift2", h, h);
  cond_query_ = &params_.create("cond.query", cfg_.condition_tokens, h);
  cond_attn_.wq = make_linear("cond.attn.q", h, h);
  cond_attn_.wk = make_linear("cond.attn.k", h, h);
  cond_attn_.wv = make_linear("cond.attn.v", h, h);
  cond_attn_.wo = make_linear("cond.attn.o", h, h);
  cond_ln_g_ = &params_.create("cond.ln.g", 1, h);
  cond_ln_b_ = &params_.create("cond.ln.b", 1, h);
  cond_segment_ = &params_.create("cond.segment", 1, h);
  sos_ = &params_.create("sos", 1, h);
  positions_ = &params_.create("positions", cfg_.max_sequence + 1, h);
  prim_encoder_ = make_linear("prim_encoder", cfg_.primitive_feature_dim(), h);
  class_table_ = &params_.create("embed.class", cfg_.num_classes, cfg_.class_embed_dim);
  for (int i = 0; i < 3; ++i) {
    rot_tables_[i] = &params_.create("embed.rotation" + std::to_string(i),
                                     cfg_.rotation_levels, cfg_.attr_embed_dim);
    scale_tables_[i] = &params_.create("embed.scale" + std::to_string(i),
                                       cfg_.scale_levels, cfg_.attr_embed_dim);
    trans_tables_[i] = &params_.create("embed.translation" + std::to_string(i),
                                       cfg_.translation_levels, cfg_.attr_embed_dim);
  }
  layers_.resize(cfg_.layers);
  for (int l = 0; l < cfg_.layers; ++l) {
    const std::string p = "layer" + std::to_string(l);
    LayerParams& lp = layers_[l];
    lp.ln1_g = &params_.create(p + ".ln1.g", 1, h);
    lp.ln1_b = &params_.create(p + ".ln1.b", 1, h);
    lp.attn.wq = make_linear(p + ".attn.q", h, h);
    lp.attn.wk = make_linear(p + ".attn.k", h, h);
    lp.attn.wv = make_linear(p + ".attn.v", h, h);
    lp.attn.wo = make_linear(p + ".attn.o", h, h);
    lp.ln2_g = &params_.create(p + ".ln2.g", 1, h);
    lp.ln2_b = &params_.create(p + ".ln2.b", 1, h);
    lp.mlp1 = make_linear(p + ".mlp1", h, ffn);
    lp.mlp2 = make_linear(p + ".mlp2", ffn, h);
  }
  final_ln_g_ = &params_.create("final_ln.g", 1, h);
  final_ln_b_ = &params_.create("final_ln.b", 1, h);

  const int ce = cfg_.class_embed_dim;
  const int triple = 3 * cfg_.attr_embed_dim;
  const int cas = cfg_.cascade ? 1 : 0;
  head_class_.l1 = make_linear("head.class.1", h, h);
  head_class_.l2 = make_linear("head.class.2", h, cfg_.num_classes);
  head_trans_.l1 = make_linear("head.translation.1", h + cas * ce, h);
  head_trans_.l2 = make_linear("head.translation.2", h, 3 * cfg_.translation_levels);
  head_rot_.l1 = make_linear("head.rotation.1", h + cas * (ce + triple), h);
  head_rot_.l2 = make_linear("head.rotation.2", h, 3 * cfg_.rotation_levels);
  head_scale_.l1 = make_linear("head.scale.1", h + cas * (ce + 2 * triple), h);
  head_scale_.l2 = make_linear("head.scale.2", h, 3 * cfg_.scale_levels);
  head_eos_.l1 = make_linear("head.eos.1", h, h);
  head_eos_.l2 = make_linear("head.eos.2", h, 1);

  // init: 1/sqrt(fan_in) for linear weights, 0.02 for embeddings, LN gains 1
  Rng rng(init_seed);
  for (const auto& p : params_.all()) {
    const std::string& name = p->name;
    if (name.ends_with(".b") || name.ends_with(".g")) continue;
    if (name.starts_with("embed.") || name == "cond.query" || name == "sos" ||
        name == "positions" || name == "cond.segment")
      nn::init_normal(*p, 0.02, rng);
    else if (name.ends_with(".w"))
      nn::init_normal(*p, 1.0 / std::sqrt(double(p->value.rows())), rng);
  }
  for (const auto& p : params_.all())
    if (p->name.ends_with(".g")) p->value.setOnes();
}

Var PrimitiveModel::apply_linear(Tape& t, const Linear& lin, Var x) const {
  return t.add_rowvec(t.matmul(x, t.param(*lin.w)), t.param(*lin.b));
}

Var PrimitiveModel::mlp_head(Tape& t, const Head& head, Var x) const {
  return apply_linear(t, head.l2, t.gelu(apply_linear(t, head.l1, x)));
}

Var PrimitiveModel::attention(Tape& t, const AttentionParams& p, Var queries_src,
                              Var keys_src, const Mat& additive_mask) const {
  const int h = cfg_.hidden_size;
  const int heads = cfg_.attention_heads;
  const int dh = h / heads;
  Var q = apply_linear(t, p.wq, queries_src);
  Var k = apply_linear(t, p.wk, keys_src);
  Var v = apply_linear(t, p.wv, keys_src);
  std::vector<Var> outs;
  outs.reserve(heads);
  for (int i = 0; i < heads; ++i) {
    Var qh = t.slice_cols(q, i * dh, dh);
    Var kh = t.slice_cols(k, i * dh, dh);
    Var vh = t.slice_cols(v, i * dh, dh);
    Var scores = t.scale(t.matmul_nt(qh, kh), 1.0 / std::sqrt(double(dh)));
    Var attn = t.masked_softmax_rows(scores, additive_mask);
    outs.push_back(t.matmul(attn, vh));
  }
  return apply_linear(t, p.wo, t.concat_cols(outs));
}

Var PrimitiveModel::encode_condition(Tape& t, const PointCloud& points,
                                     std::uint64_t fps_seed) const {
  if (points.size() < 4)
    fail(ErrorKind::insufficient_input, "condition cloud needs at least 4 points");
  Points sub = points.points;
  if (points.size() > cfg_.condition_points) {
    Rng rng(fps_seed);
    const auto idx = farthest_point_indices(points.points, cfg_.condition_points, rng);
    sub.resize(Eigen::Index(idx.size()), 3);
    for (std::size_t i = 0; i < idx.size(); ++i)
      sub.row(Eigen::Index(i)) = points.points.row(idx[i]);
  }
  Var x = t.constant(Mat(sub));
  Var feats = apply_linear(t, lift2_, t.gelu(apply_linear(t, lift1_, x)));
  Var queries = t.param(*cond_query_);
  Var attended = attention(t, cond_attn_, queries, feats, Mat());
  Var tokens = t.add(queries, attended);
  return t.layer_norm_rows(tokens, t.param(*cond_ln_g_), t.param(*cond_ln_b_));
}

Var PrimitiveModel::gather_triple(Tape& t, nn::Parameter* const tables[3],
                                  const std::vector<std::array<int, 3>>& bins) const {
  std::vector<Var> parts;
  parts.reserve(3);
  for (int d = 0; d < 3; ++d) {
    std::vector<int> idx(bins.size());
    for (std::size_t i = 0; i < bins.size(); ++i) idx[i] = bins[i][d];
    parts.push_back(t.gather_rows(t.param(*tables[d]), std::move(idx)));
  }
  return t.concat_cols(parts);
}

Var PrimitiveModel::class_embeddings(Tape& t, const std::vector<int>& classes) const {
  return t.gather_rows(t.param(*class_table_), classes);
}

Var PrimitiveModel::translation_embeddings(
    Tape& t, const std::vector<std::array<int, 3>>& bins) const {
  return gather_triple(t, trans_tables_, bins);
}

Var PrimitiveModel::rotation_embeddings(
    Tape& t, const std::vector<std::array<int, 3>>& bins) const {
  return gather_triple(t, rot_tables_, bins);
}

Var PrimitiveModel::scale_embeddings(
    Tape& t, const std::vector<std::array<int, 3>>& bins) const {
  return gather_triple(t, scale_tables_, bins);
}

Var PrimitiveModel::embed_primitive(Tape& t, const TokenizedPrimitive& token) const {
  return embed_primitives(t, {token});
}

Var PrimitiveModel::embed_primitives(
    Tape& t, const std::vector<TokenizedPrimitive>& tokens) const {
  if (tokens.empty()) return t.constant(Mat::Zero(0, cfg_.hidden_size));
  std::vector<int> classes(tokens.size());
  std::vector<std::array<int, 3>> sbins(tokens.size()), rbins(tokens.size()),
      tbins(tokens.size());
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    classes[i] = tokens[i].class_index;
    sbins[i] = tokens[i].scale_bins;
    rbins[i] = tokens[i].rotation_bins;
    tbins[i] = tokens[i].translation_bins;
  }
  // concatenation order: class, scale, rotation, translation
  Var features = t.concat_cols({class_embeddings(t, classes),
                                gather_triple(t, scale_tables_, sbins),
                                gather_triple(t, rot_tables_, rbins),
                                gather_triple(t, trans_tables_, tbins)});
  return apply_linear(t, prim_encoder_, features);
}

Var PrimitiveModel::forward_sequence(Tape& t, Var condition, Var prim_tokens) const {
  const int k = cfg_.condition_tokens;
  const int m = int(t.value(prim_tokens).rows());
  if (t.value(condition).rows() != k || t.value(condition).cols() != cfg_.hidden_size)
    fail(ErrorKind::config, "condition tokens have unexpected shape");
  if (m > cfg_.max_sequence)
    fail(ErrorKind::length, "sequence length " + std::to_string(m) +
                                " exceeds max_sequence " +
                                std::to_string(cfg_.max_sequence));

  Var cond_seg = t.add_rowvec(condition, t.param(*cond_segment_));
  Var pos = t.param(*positions_);
  Var sos_pos = t.add(t.param(*sos_), t.slice_rows(pos, 0, 1));
  Var x = (m > 0) ? t.concat_rows({cond_seg, sos_pos,
                                   t.add(prim_tokens, t.slice_rows(pos, 1, m))})
                  : t.concat_rows({cond_seg, sos_pos});

  const int total = k + 1 + m;
  Mat mask = Mat::Zero(total, total);
  for (int i = 0; i < total; ++i)
    for (int j = i + 1; j < total; ++j)
      mask(i, j) = (cfg_.bidirectional_condition && i < k && j < k) ? 0.0 : -1e30;

  for (const LayerParams& lp : layers_) {
    Var normed = t.layer_norm_rows(x, t.param(*lp.ln1_g), t.param(*lp.ln1_b));
    x = t.add(x, attention(t, lp.attn, normed, normed, mask));
    Var normed2 = t.layer_norm_rows(x, t.param(*lp.ln2_g), t.param(*lp.ln2_b));
    x = t.add(x, apply_linear(t, lp.mlp2, t.gelu(apply_linear(t, lp.mlp1, normed2))));
  }
  Var final_x = t.layer_norm_rows(x, t.param(*final_ln_g_), t.param(*final_ln_b_));
  return t.slice_rows(final_x, k, m + 1);
}

Var PrimitiveModel::class_logits(Tape& t, Var f) const {
  return mlp_head(t, head_class_, f);
}

Var PrimitiveModel::translation_logits(Tape& t, Var f, Var class_emb) const {
  Var in = cfg_.cascade ? t.concat_cols({f, class_emb}) : f;
  return mlp_head(t, head_trans_, in);
}

Var PrimitiveModel::rotation_logits(Tape& t, Var f, Var class_emb, Var trans_emb) const {
  Var in = cfg_.cascade ? t.concat_cols({f, class_emb, trans_emb}) : f;
  return mlp_head(t, head_rot_, in);
}

Var PrimitiveModel::scale_logits(Tape& t, Var f, Var class_emb, Var trans_emb,
                                 Var rot_emb) const {
  Var in = cfg_.cascade ? t.concat_cols({f, class_emb, trans_emb, rot_emb}) : f;
  return mlp_head(t, head_scale_, in);
}

Var PrimitiveModel::eos_logits(Tape& t, Var f) const {
  return mlp_head(t, head_eos_, f);
}

// ---- AttributeDecoder -------------------------------------------------------

AttributeDecoder::AttributeDecoder(const PrimitiveModel& model, Tape& tape,
                                   Var step_feature)
    : model_(&model), tape_(&tape), f_(step_feature) {
  if (tape.value(f_).rows() != 1 ||
      tape.value(f_).cols() != model.config().hidden_size)
    fail(ErrorKind::contract_violation, "step feature must be 1 x hidden_size");
}

void AttributeDecoder::require_stage(int stage, const char* what) const {
  if (stage_ != stage)
    fail(ErrorKind::contract_violation,
         std::string("cascade order violation at ") + what +
             " (decode class, translation, rotation, scale in order)");
}

Eigen::RowVectorXd AttributeDecoder::class_logits() {
  require_stage(0, "class");
  logits_.class_logits = tape_->value(model_->class_logits(*tape_, f_)).row(0);
  return logits_.class_logits;
}

void AttributeDecoder::set_class(int class_index) {
  require_stage(0, "set_class");
  if (class_index < 0 || class_index >= model_->config().num_classes)
    fail(ErrorKind::invalid_input, "class index out of range");
  class_emb_ = model_->class_embeddings(*tape_, {class_index});
  stage_ = 1;
}

namespace {

Mat rows_to_dims(const Mat& row, int levels) {
  Mat out(3, levels);
  for (int d = 0; d < 3; ++d) out.row(d) = row.block(0, d * levels, 1, levels);
  return out;
}

}  // namespace

Mat AttributeDecoder::translation_logits() {
  require_stage(1, "translation");
  const Mat row = tape_->value(model_->translation_logits(*tape_, f_, class_emb_));
  logits_.translation = rows_to_dims(row, model_->config().translation_levels);
  return logits_.translation;
}

void AttributeDecoder::set_translation(const std::array<int, 3>& bins) {
  require_stage(1, "set_translation");
  trans_emb_ = model_->translation_embeddings(*tape_, {bins});
  stage_ = 2;
}

Mat AttributeDecoder::rotation_logits() {
  require_stage(2, "rotation");
  const Mat row =
      tape_->value(model_->rotation_logits(*tape_, f_, class_emb_, trans_emb_));
  logits_.rotation = rows_to_dims(row, model_->config().rotation_levels);
  return logits_.rotation;
}

void AttributeDecoder::set_rotation(const std::array<int, 3>& bins) {
  require_stage(2, "set_rotation");
  rot_emb_ = model_->rotation_embeddings(*tape_, {bins});
  stage_ = 3;
}

Mat AttributeDecoder::scale_logits() {
  require_stage(3, "scale");
  const Mat row = tape_->value(
      model_->scale_logits(*tape_, f_, class_emb_, trans_emb_, rot_emb_));
  logits_.scale = rows_to_dims(row, model_->config().scale_levels);
  return logits_.scale;
}

void AttributeDecoder::set_scale(const std::array<int, 3>&) {
  require_stage(3, "set_scale");
  stage_ = 4;
}

double AttributeDecoder::eos_logit() {
  logits_.eos = tape_->value(model_->eos_logits(*tape_, f_))(0, 0);
  return logits_.eos;
}

// ---- checkpoints -----------------------------------------------------------

namespace {

constexpr int kCheckpointVersion = 1;
constexpr const char* kMagic = "PGCKPT1";

json config_to_json(const ModelConfig& c) {
  return json{{"layers", c.layers},
              {"hidden_size", c.hidden_size},
              {"attention_heads", c.attention_heads},
              {"condition_tokens", c.condition_tokens},
              {"condition_points", c.condition_points},
              {"class_embed_dim", c.class_embed_dim},
              {"attr_embed_dim", c.attr_embed_dim},
              {"num_classes", c.num_classes},
              {"rotation_levels", c.rotation_levels},
              {"scale_levels", c.scale_levels},
              {"translation_levels", c.translation_levels},
              {"max_sequence", c.max_sequence},
              {"ffn_multiplier", c.ffn_multiplier},
              {"cascade", c.cascade},
              {"bidirectional_condition", c.bidirectional_condition}};
}

ModelConfig config_from_json(const json& j) {
  ModelConfig c;
  c.layers = j.at("layers").get<int>();
  c.hidden_size = j.at("hidden_size").get<int>();
  c.attention_heads = j.at("attention_heads").get<int>();
  c.condition_tokens = j.at("condition_tokens").get<int>();
  c.condition_points = j.at("condition_points").get<int>();
  c.class_embed_dim = j.at("class_embed_dim").get<int>();
  c.attr_embed_dim = j.at("attr_embed_dim").get<int>();
  c.num_classes = j.at("num_classes").get<int>();
  c.rotation_levels = j.at("rotation_levels").get<int>();
  c.scale_levels = j.at("scale_levels").get<int>();
  c.translation_levels = j.at("translation_levels").get<int>();
  c.max_sequence = j.at("max_sequence").get<int>();
  c.ffn_multiplier = j.at("ffn_multiplier").get<int>();
  c.cascade = j.at("cascade").get<bool>();
  c.bidirectional_condition = j.at("bidirectional_condition").get<bool>();
  return c;
}

void write_blob(std::ofstream& out, const Mat& m) {
  out.write(reinterpret_cast<const char*>(m.data()),
            std::streamsize(sizeof(double) * std::size_t(m.size())));
}

void read_blob(std::ifstream& in, Mat& m) {
  in.read(reinterpret_cast<char*>(m.data()),
          std::streamsize(sizeof(double) * std::size_t(m.size())));
}

}  // namespace

void save_checkpoint(const PrimitiveModel& model, const std::string& path,
                     const CheckpointExtra& extra) {
  json header;
  header["format"] = "primgen.checkpoint";
  header["version"] = kCheckpointVersion;
  header["config"] = config_to_json(model.config());
  const Discretizer d = model.config().discretizer();
  header["discretizer"] = {{"rotation_levels", d.rotation_levels},
                           {"scale_levels", d.scale_levels},
                           {"translation_levels", d.translation_levels}};
  json params = json::array();
  for (const auto& p : model.params().all())
    params.push_back(
        {{"name", p->name}, {"rows", p->value.rows()}, {"cols", p->value.cols()}});
  header["params"] = std::move(params);
  header["extra_strings"] = extra.strings;
  json arrays = json::array();
  for (const auto& [name, m] : extra.arrays)
    arrays.push_back({{"name", name}, {"rows", m.rows()}, {"cols", m.cols()}});
  header["extra_arrays"] = std::move(arrays);

  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorKind::io, "cannot open " + path + " for writing");
  out << kMagic << "\n" << header.dump() << "\n";
  for (const auto& p : model.params().all()) write_blob(out, p->value);
  for (const auto& [name, m] : extra.arrays) write_blob(out, m);
  if (!out) fail(ErrorKind::io, "write failure on " + path);
}

LoadedCheckpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::io, "cannot open checkpoint " + path);
  std::string magic, header_line;
  if (!std::getline(in, magic) || magic != kMagic)
    fail(ErrorKind::parse, path + ": not a checkpoint file");
  if (!std::getline(in, header_line))
    fail(ErrorKind::parse, path + ": missing checkpoint header");
  json header;
  try {
    header = json::parse(header_line);
  } catch (const json::exception& e) {
    fail(ErrorKind::parse, path + ": bad header: " + e.what());
  }
  if (header.value("version", -1) != kCheckpointVersion)
    fail(ErrorKind::version, path + ": unsupported checkpoint version");

  ModelConfig cfg = config_from_json(header.at("config"));
  PrimitiveModel model(cfg, /*init_seed=*/0);
  for (const json& pj : header.at("params")) {
    nn::Parameter* p = model.params().find(pj.at("name").get<std::string>());
    if (!p)
      fail(ErrorKind::parse,
           path + ": unknown parameter " + pj.at("name").get<std::string>());
    if (p->value.rows() != pj.at("rows").get<Eigen::Index>() ||
        p->value.cols() != pj.at("cols").get<Eigen::Index>())
      fail(ErrorKind::parse, path + ": shape mismatch for " + p->name);
    read_blob(in, p->value);
  }
  CheckpointExtra extra;
  if (header.contains("extra_strings"))
    extra.strings = header["extra_strings"].get<std::map<std::string, std::string>>();
  if (header.contains("extra_arrays"))
    for (const json& aj : header["extra_arrays"]) {
      Mat m(aj.at("rows").get<Eigen::Index>(), aj.at("cols").get<Eigen::Index>());
      read_blob(in, m);
      extra.arrays[aj.at("name").get<std::string>()] = std::move(m);
    }
  if (!in) fail(ErrorKind::parse, path + ": truncated checkpoint data");

  Discretizer disc;
  const json& dj = header.at("discretizer");
  disc.rotation_levels = dj.at("rotation_levels").get<int>();
  disc.scale_levels = dj.at("scale_levels").get<int>();
  disc.translation_levels = dj.at("translation_levels").get<int>();
  return LoadedCheckpoint{std::move(model), disc, std::move(extra)};
}

}  // namespace primgen
