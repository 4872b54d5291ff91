#pragma once

#include <map>
#include <string>
#include <vector>

#include "primgen/nn/tape.hpp"
#include "primgen/tokenize.hpp"

namespace primgen {

struct ModelConfig {
  int layers = 4;             // paper scale: 12
  int hidden_size = 192;      // paper scale: 768
  int attention_heads = 4;
  int condition_tokens = 64;  // K learned queries
  int condition_points = 1024;
  int class_embed_dim = 48;
  int attr_embed_dim = 16;
  int num_classes = 3;
  int rotation_levels = 180;
  int scale_levels = 128;
  int translation_levels = 128;
  int max_sequence = 64;
  int ffn_multiplier = 4;
  bool cascade = true;                  // ablation: attribute heads read f alone
  bool bidirectional_condition = false;

  void validate() const;
  int primitive_feature_dim() const { return class_embed_dim + 9 * attr_embed_dim; }
  Discretizer discretizer() const {
    Discretizer d;
    d.rotation_levels = rotation_levels;
    d.scale_levels = scale_levels;
    d.translation_levels = translation_levels;
    return d;
  }
  bool operator==(const ModelConfig&) const = default;
};

struct AttributeLogits {
  Eigen::RowVectorXd class_logits;  // num_classes
  nn::Mat translation;              // 3 x translation_levels
  nn::Mat rotation;                 // 3 x rotation_levels
  nn::Mat scale;                    // 3 x scale_levels
  double eos = 0.0;
};

/// Shape-conditioned autoregressive primitive model: point-cloud condition
/// encoder, decoder-only backbone over [condition, SOS, primitive tokens], and
/// cascaded attribute heads (class -> translation -> rotation -> scale) plus an
/// EOS head.
class PrimitiveModel {
 public:
  PrimitiveModel(ModelConfig cfg, std::uint64_t init_seed);
  PrimitiveModel(PrimitiveModel&&) = default;
  PrimitiveModel& operator=(PrimitiveModel&&) = default;

  const ModelConfig& config() const { return cfg_; }
  nn::ParamStore& params() { return params_; }
  const nn::ParamStore& params() const { return params_; }
  std::size_t parameter_count() const { return params_.scalar_count(); }

  /// Farthest-point subsample to condition_points, pointwise two-layer lift,
  /// then cross-attention from K learned queries. Output K x hidden.
  nn::Var encode_condition(nn::Tape& t, const PointCloud& points,
                           std::uint64_t fps_seed) const;

  nn::Var embed_primitive(nn::Tape& t, const TokenizedPrimitive& token) const;
  nn::Var embed_primitives(nn::Tape& t, const std::vector<TokenizedPrimitive>&) const;

  /// Runs the causal backbone over [condition, SOS, h_1..h_m] and returns the
  /// features at positions SOS..h_m ((m+1) x hidden); feature j predicts
  /// primitive j+1.
  nn::Var forward_sequence(nn::Tape& t, nn::Var condition, nn::Var prim_tokens) const;

  // embedding gathers used for cascade conditioning
  nn::Var class_embeddings(nn::Tape& t, const std::vector<int>& classes) const;
  nn::Var translation_embeddings(nn::Tape& t,
                                 const std::vector<std::array<int, 3>>& bins) const;
  nn::Var rotation_embeddings(nn::Tape& t,
                              const std::vector<std::array<int, 3>>& bins) const;
  nn::Var scale_embeddings(nn::Tape& t,
                           const std::vector<std::array<int, 3>>& bins) const;

  // cascaded heads, batched over rows of f
  nn::Var class_logits(nn::Tape& t, nn::Var f) const;
  nn::Var translation_logits(nn::Tape& t, nn::Var f, nn::Var class_emb) const;
  nn::Var rotation_logits(nn::Tape& t, nn::Var f, nn::Var class_emb,
                          nn::Var trans_emb) const;
  nn::Var scale_logits(nn::Tape& t, nn::Var f, nn::Var class_emb, nn::Var trans_emb,
                       nn::Var rot_emb) const;
  nn::Var eos_logits(nn::Tape& t, nn::Var f) const;

 private:
  friend class AttributeDecoder;
  struct Linear {
    nn::Parameter* w = nullptr;
    nn::Parameter* b = nullptr;
  };
  struct AttentionParams {
    Linear wq, wk, wv, wo;
  };
  struct LayerParams {
    nn::Parameter *ln1_g, *ln1_b, *ln2_g, *ln2_b;
    AttentionParams attn;
    Linear mlp1, mlp2;
  };
  struct Head {
    Linear l1, l2;
  };

  Linear make_linear(const std::string& name, int in, int out);
  nn::Var apply_linear(nn::Tape& t, const Linear& lin, nn::Var x) const;
  nn::Var mlp_head(nn::Tape& t, const Head& head, nn::Var x) const;
  nn::Var attention(nn::Tape& t, const AttentionParams& p, nn::Var queries_src,
                    nn::Var keys_src, const nn::Mat& additive_mask) const;
  nn::Var gather_triple(nn::Tape& t, nn::Parameter* const tables[3],
                        const std::vector<std::array<int, 3>>& bins) const;

  ModelConfig cfg_;
  nn::ParamStore params_;

  Linear lift1_, lift2_;
  nn::Parameter* cond_query_;
  AttentionParams cond_attn_;
  nn::Parameter *cond_ln_g_, *cond_ln_b_;
  nn::Parameter* cond_segment_;
  nn::Parameter* sos_;
  nn::Parameter* positions_;
  Linear prim_encoder_;
  nn::Parameter* class_table_;
  nn::Parameter* rot_tables_[3];
  nn::Parameter* scale_tables_[3];
  nn::Parameter* trans_tables_[3];
  std::vector<LayerParams> layers_;
  nn::Parameter *final_ln_g_, *final_ln_b_;
  Head head_class_, head_trans_, head_rot_, head_scale_, head_eos_;
};

/// Single-step cascade over one feature row, enforcing the decode order
/// class -> translation -> rotation -> scale. EOS may be read at any point.
class AttributeDecoder {
 public:
  AttributeDecoder(const PrimitiveModel& model, nn::Tape& tape, nn::Var step_feature);

  Eigen::RowVectorXd class_logits();
  void set_class(int class_index);
  nn::Mat translation_logits();  // 3 x levels
  void set_translation(const std::array<int, 3>& bins);
  nn::Mat rotation_logits();
  void set_rotation(const std::array<int, 3>& bins);
  nn::Mat scale_logits();
  void set_scale(const std::array<int, 3>& bins);
  double eos_logit();

  AttributeLogits filled() const { return logits_; }

 private:
  void require_stage(int stage, const char* what) const;

  const PrimitiveModel* model_;
  nn::Tape* tape_;
  nn::Var f_;
  nn::Var class_emb_, trans_emb_, rot_emb_;
  int stage_ = 0;  // 0=class, 1=translation, 2=rotation, 3=scale, 4=done
  AttributeLogits logits_;
};

// ---- checkpoints -----------------------------------------------------------

struct CheckpointExtra {
  std::map<std::string, std::string> strings;
  std::map<std::string, nn::Mat> arrays;
};

struct LoadedCheckpoint {
  PrimitiveModel model;
  Discretizer discretizer;
  CheckpointExtra extra;
};

void save_checkpoint(const PrimitiveModel& model, const std::string& path,
                     const CheckpointExtra& extra = {});
LoadedCheckpoint load_checkpoint(const std::string& path);

}  // namespace primgen
