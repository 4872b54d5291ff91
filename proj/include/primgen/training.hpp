#pragma once

#include <string>
#include <vector>

#include "primgen/dataset.hpp"
#include "primgen/model.hpp"

namespace primgen {

struct TrainConfig {
  double learning_rate = 1e-3;
  int batch_size = 16;      // paper scale: 128
  int grad_accumulation = 1;  // paper scale: 4
  int epochs = 10;
  double gumbel_temp_start = 2.0;
  double gumbel_temp_end = 0.5;
  bool gumbel_hard = false;
  int cd_points_per_primitive = 256;
  double weight_ce = 1.0;
  double weight_eos = 1.0;
  double weight_cd = 1.0;
  bool cd_union = false;  // chamfer over the union cloud instead of per step
  bool enforce_canonical_targets = true;  // off for the no-canonicalization ablation
  std::uint64_t seed = 0;
  int checkpoint_every = 0;  // optimizer steps; 0 = final checkpoint only
  int threads = 0;           // 0 = hardware concurrency
  std::string out_dir;       // checkpoints + metrics.csv; empty = keep in memory

  void validate() const;
};

struct LossBreakdown {
  double l_ce = 0.0;
  double l_eos = 0.0;
  double l_cd = 0.0;
  double total = 0.0;
  // per-attribute cross-entropy components (diagnostics)
  double ce_class = 0.0, ce_translation = 0.0, ce_rotation = 0.0, ce_scale = 0.0;
};

// ---- differentiable sampling helpers ---------------------------------------

nn::Mat sample_gumbel_noise(int n, Rng& rng);

/// Eager counterpart of Tape::gumbel_softmax: draws fresh noise from rng.
Eigen::RowVectorXd gumbel_softmax_sample(const Eigen::RowVectorXd& logits,
                                         double temperature, Rng& rng, bool hard);

Eigen::RowVectorXd bin_centers(AttributeKind kind, const Discretizer& d);

/// Expectation of the bin center under the given simplex weights.
double soft_dequantize(const Eigen::RowVectorXd& weights, AttributeKind kind,
                       const Discretizer& d);

/// Fixed per-class local surface point set used by the chamfer loss
/// (deterministic; independent of training seeds).
const nn::Mat& canonical_local_points(int class_label, int count);

// ---- per-sample losses ------------------------------------------------------

struct StepLogitsVars {
  nn::Var class_logits;  // m x num_classes
  nn::Var translation;   // m x 3*translation_levels
  nn::Var rotation;      // m x 3*rotation_levels
  nn::Var scale;         // m x 3*scale_levels
  nn::Var eos;           // (m+1) x 1
  int steps = 0;
};

/// Teacher-forced forward pass: every cascade head sees the ground-truth
/// attribute embeddings of its own step.
StepLogitsVars teacher_forced_logits(nn::Tape& t, const PrimitiveModel& model,
                                     const PointCloud& condition,
                                     const std::vector<TokenizedPrimitive>& tokens,
                                     std::uint64_t fps_seed);

/// Gumbel-softmax chamfer loss (Eq.-style shape guidance): per step, s/r/t are
/// soft-sampled from the logits and the class is taken from ground truth; the
/// fixed local point set is pushed through the differentiable transform and
/// compared against the ground-truth primitive's points.
nn::Var chamfer_loss_from_logits(nn::Tape& t, const StepLogitsVars& logits,
                                 const Assembly& gt, const Discretizer& d,
                                 const TrainConfig& cfg, double temperature,
                                 Rng& noise_rng);

struct SampleLossResult {
  nn::Var total;
  LossBreakdown values;
};

/// Assembles L = w_eos*L_eos + w_ce*L_ce + w_cd*L_cd from per-step logits.
/// L_ce is the mean cross-entropy over all ten categorical targets per step,
/// L_eos the mean binary cross-entropy with a single positive at the position
/// after the last primitive.
SampleLossResult losses_from_logits(nn::Tape& t, const StepLogitsVars& logits,
                                    const std::vector<TokenizedPrimitive>& tokens,
                                    const Assembly& gt_assembly,
                                    const TrainConfig& cfg, const Discretizer& d,
                                    double temperature, std::uint64_t noise_seed);

SampleLossResult sample_losses(nn::Tape& t, const PrimitiveModel& model,
                               const PointCloud& condition,
                               const std::vector<TokenizedPrimitive>& tokens,
                               const Assembly& gt_assembly, const TrainConfig& cfg,
                               double temperature, std::uint64_t fps_seed,
                               std::uint64_t noise_seed);

/// Batch loss evaluation at gumbel_temp_start (no parameter update).
LossBreakdown teacher_forced_losses(const std::vector<DatasetRecord>& batch,
                                    const PrimitiveModel& model,
                                    const TrainConfig& cfg, Rng& rng);

// ---- training loop ----------------------------------------------------------

struct TrainResult {
  std::vector<LossBreakdown> steps;  // one per optimizer step
  std::string final_checkpoint;      // empty when out_dir is empty
};

/// Adam with gradient accumulation and a linear gumbel temperature schedule.
/// Deterministic given (cfg.seed, thread count); all per-step randomness is
/// derived from (seed, step), so runs resumed from a checkpoint replay the
/// exact remaining step sequence.
TrainResult train(const std::vector<DatasetRecord>& dataset, PrimitiveModel& model,
                  const TrainConfig& cfg, const std::string& resume_from = "");

}  // namespace primgen
