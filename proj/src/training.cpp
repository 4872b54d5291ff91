#include "primgen/training.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <mutex>
#include <thread>

#include "primgen/nn/optim.hpp"

namespace primgen {

using nn::GradBuffer;
using nn::Mat;
using nn::Tape;
using nn::Var;

void TrainConfig::validate() const {
  if (learning_rate <= 0.0) fail(ErrorKind::config, "learning_rate must be positive");
  if (batch_size < 1 || grad_accumulation < 1 || epochs < 0)
    fail(ErrorKind::config, "batch_size/grad_accumulation/epochs out of range");
  if (gumbel_temp_start <= 0.0 || gumbel_temp_end <= 0.0)
    fail(ErrorKind::config, "gumbel temperature must stay positive");
  if (cd_points_per_primitive < 1)
    fail(ErrorKind::config, "cd_points_per_primitive must be positive");
}

nn::Mat sample_gumbel_noise(int n, Rng& rng) {
  std::uniform_real_distribution<double> uni(1e-12, 1.0);
  Mat noise(1, n);
  for (int i = 0; i < n; ++i) noise(0, i) = -std::log(-std::log(uni(rng)));
  return noise;
}

Eigen::RowVectorXd gumbel_softmax_sample(const Eigen::RowVectorXd& logits,
                                         double temperature, Rng& rng, bool hard) {
  Tape t;
  Var out = t.gumbel_softmax(t.constant(logits), temperature,
                             sample_gumbel_noise(int(logits.size()), rng), hard);
  return t.value(out).row(0);
}

Eigen::RowVectorXd bin_centers(AttributeKind kind, const Discretizer& d) {
  const int levels = d.levels(kind);
  Eigen::RowVectorXd centers(levels);
  for (int b = 0; b < levels; ++b) centers(b) = dequantize(b, kind, d);
  return centers;
}

double soft_dequantize(const Eigen::RowVectorXd& weights, AttributeKind kind,
                       const Discretizer& d) {
  const Eigen::RowVectorXd centers = bin_centers(kind, d);
  if (weights.size() != centers.size())
    fail(ErrorKind::invalid_input, "soft_dequantize: weight count != level count");
  return weights.dot(centers);
}

const nn::Mat& canonical_local_points(int class_label, int count) {
  struct Key {
    int cls, count;
    bool operator<(const Key& o) const {
      return cls != o.cls ? cls < o.cls : count < o.count;
    }
  };
  static std::map<Key, Mat> cache;
  static std::mutex mutex;
  std::lock_guard<std::mutex> lock(mutex);
  auto [it, inserted] = cache.try_emplace(Key{class_label, count});
  if (inserted) {
    Primitive standard;
    standard.class_label = class_label;
    Rng rng(derive_seed(0xC0FFEE, std::uint64_t(class_label)));
    it->second = Mat(sample_surface(standard, count, rng).points);
  }
  return it->second;
}

StepLogitsVars teacher_forced_logits(Tape& t, const PrimitiveModel& model,
                                     const PointCloud& condition,
                                     const std::vector<TokenizedPrimitive>& tokens,
                                     std::uint64_t fps_seed) {
  const int m = int(tokens.size());
  Var cond = model.encode_condition(t, condition, fps_seed);
  Var features = model.forward_sequence(t, cond, model.embed_primitives(t, tokens));

  StepLogitsVars out;
  out.steps = m;
  out.eos = model.eos_logits(t, features);
  if (m == 0) return out;

  Var steps_f = t.slice_rows(features, 0, m);
  std::vector<int> classes(m);
  std::vector<std::array<int, 3>> tbins(m), rbins(m);
  for (int i = 0; i < m; ++i) {
    classes[i] = tokens[i].class_index;
    tbins[i] = tokens[i].translation_bins;
    rbins[i] = tokens[i].rotation_bins;
  }
  Var ce = model.class_embeddings(t, classes);
  Var te = model.translation_embeddings(t, tbins);
  Var re = model.rotation_embeddings(t, rbins);
  out.class_logits = model.class_logits(t, steps_f);
  out.translation = model.translation_logits(t, steps_f, ce);
  out.rotation = model.rotation_logits(t, steps_f, ce, te);
  out.scale = model.scale_logits(t, steps_f, ce, te, re);
  return out;
}

namespace {

// soft continuous primitive points for one step: gumbel-sample each spatial
// dimension, soft-dequantize, run the differentiable transform
Var soft_step_points(Tape& t, const StepLogitsVars& logits, int step, int gt_class,
                     const Discretizer& d, const TrainConfig& cfg, double temperature,
                     Rng& noise_rng) {
  auto soft_triple = [&](Var block, AttributeKind kind) {
    const int levels = d.levels(kind);
    const Eigen::RowVectorXd centers = bin_centers(kind, d);
    Var row = t.slice_rows(block, step, 1);
    std::vector<Var> dims;
    for (int dim = 0; dim < 3; ++dim) {
      Var lg = t.slice_cols(row, dim * levels, levels);
      Var soft = t.gumbel_softmax(lg, temperature,
                                  sample_gumbel_noise(levels, noise_rng),
                                  cfg.gumbel_hard);
      dims.push_back(t.matmul_nt(soft, t.constant(centers)));  // 1x1
    }
    return t.concat_cols(dims);  // 1x3
  };

  Var tr = soft_triple(logits.translation, AttributeKind::translation);
  Var rot = soft_triple(logits.rotation, AttributeKind::rotation);
  Var sc = soft_triple(logits.scale, AttributeKind::scale);
  const Mat& local = canonical_local_points(gt_class, cfg.cd_points_per_primitive);
  return t.transform_points(local, sc, rot, tr);
}

Mat gt_step_points(const Primitive& p, const TrainConfig& cfg) {
  const Mat& local = canonical_local_points(p.class_label, cfg.cd_points_per_primitive);
  const Mat rot = euler_to_matrix(p.rotation);
  Mat out = local * p.scale.asDiagonal() * rot.transpose();
  out.rowwise() += p.translation.transpose();
  return out;
}

}  // namespace

Var chamfer_loss_from_logits(Tape& t, const StepLogitsVars& logits, const Assembly& gt,
                             const Discretizer& d, const TrainConfig& cfg,
                             double temperature, Rng& noise_rng) {
  if (std::size_t(logits.steps) != gt.size())
    fail(ErrorKind::contract_violation,
         "chamfer loss: predicted step count does not match ground truth");
  const int m = logits.steps;
  if (m == 0) return t.constant(Mat::Zero(1, 1));

  if (cfg.cd_union) {
    std::vector<Var> pred_parts;
    Mat gt_all(Eigen::Index(m) * cfg.cd_points_per_primitive, 3);
    for (int i = 0; i < m; ++i) {
      pred_parts.push_back(soft_step_points(t, logits, i, gt.primitives[i].class_label,
                                            d, cfg, temperature, noise_rng));
      gt_all.middleRows(Eigen::Index(i) * cfg.cd_points_per_primitive,
                        cfg.cd_points_per_primitive) =
          gt_step_points(gt.primitives[i], cfg);
    }
    return t.chamfer(t.concat_rows(pred_parts), gt_all);
  }

  std::vector<std::pair<double, Var>> terms;
  for (int i = 0; i < m; ++i) {
    Var pred = soft_step_points(t, logits, i, gt.primitives[i].class_label, d, cfg,
                                temperature, noise_rng);
    terms.push_back(
        {1.0 / m, t.chamfer(pred, gt_step_points(gt.primitives[i], cfg))});
  }
  return t.weighted_sum(terms);
}

SampleLossResult losses_from_logits(Tape& t, const StepLogitsVars& logits,
                                    const std::vector<TokenizedPrimitive>& tokens,
                                    const Assembly& gt_assembly,
                                    const TrainConfig& cfg, const Discretizer& d,
                                    double temperature, std::uint64_t noise_seed) {
  const int m = logits.steps;
  if (int(tokens.size()) != m)
    fail(ErrorKind::contract_violation, "token count does not match logit steps");

  // EOS: target 1 only at the position after the last primitive
  Mat eos_targets = Mat::Zero(m + 1, 1);
  eos_targets(m, 0) = 1.0;
  Var l_eos =
      t.scale(t.bce_with_logits_sum(logits.eos, eos_targets), 1.0 / double(m + 1));

  SampleLossResult out;
  Var l_ce = t.constant(Mat::Zero(1, 1));
  Var l_cd = t.constant(Mat::Zero(1, 1));
  if (m > 0) {
    std::vector<int> cls(m);
    for (int i = 0; i < m; ++i) cls[i] = tokens[i].class_index;
    Var ce_class = t.cross_entropy_sum(logits.class_logits, cls);

    auto dims_ce = [&](Var block, int levels, auto bin_of) {
      std::vector<std::pair<double, Var>> parts;
      for (int dim = 0; dim < 3; ++dim) {
        std::vector<int> targets(m);
        for (int i = 0; i < m; ++i) targets[i] = bin_of(tokens[i], dim);
        parts.push_back(
            {1.0, t.cross_entropy_sum(t.slice_cols(block, dim * levels, levels),
                                      std::move(targets))});
      }
      return t.weighted_sum(parts);
    };
    Var ce_trans =
        dims_ce(logits.translation, d.translation_levels,
                [](const TokenizedPrimitive& p, int dim) { return p.translation_bins[dim]; });
    Var ce_rot =
        dims_ce(logits.rotation, d.rotation_levels,
                [](const TokenizedPrimitive& p, int dim) { return p.rotation_bins[dim]; });
    Var ce_scale =
        dims_ce(logits.scale, d.scale_levels,
                [](const TokenizedPrimitive& p, int dim) { return p.scale_bins[dim]; });
    // mean over all ten categorical targets at every step
    l_ce = t.weighted_sum({{1.0 / (10.0 * m), ce_class},
                           {1.0 / (10.0 * m), ce_trans},
                           {1.0 / (10.0 * m), ce_rot},
                           {1.0 / (10.0 * m), ce_scale}});
    Rng noise_rng(noise_seed);
    l_cd =
        chamfer_loss_from_logits(t, logits, gt_assembly, d, cfg, temperature, noise_rng);

    out.values.ce_class = t.value(ce_class)(0, 0) / m;
    out.values.ce_translation = t.value(ce_trans)(0, 0) / (3.0 * m);
    out.values.ce_rotation = t.value(ce_rot)(0, 0) / (3.0 * m);
    out.values.ce_scale = t.value(ce_scale)(0, 0) / (3.0 * m);
  }

  out.total = t.weighted_sum(
      {{cfg.weight_eos, l_eos}, {cfg.weight_ce, l_ce}, {cfg.weight_cd, l_cd}});
  out.values.l_eos = t.value(l_eos)(0, 0);
  out.values.l_ce = t.value(l_ce)(0, 0);
  out.values.l_cd = t.value(l_cd)(0, 0);
  out.values.total = cfg.weight_eos * out.values.l_eos +
                     cfg.weight_ce * out.values.l_ce + cfg.weight_cd * out.values.l_cd;
  return out;
}

SampleLossResult sample_losses(Tape& t, const PrimitiveModel& model,
                               const PointCloud& condition,
                               const std::vector<TokenizedPrimitive>& tokens,
                               const Assembly& gt_assembly, const TrainConfig& cfg,
                               double temperature, std::uint64_t fps_seed,
                               std::uint64_t noise_seed) {
  const StepLogitsVars logits =
      teacher_forced_logits(t, model, condition, tokens, fps_seed);
  return losses_from_logits(t, logits, tokens, gt_assembly, cfg,
                            model.config().discretizer(), temperature, noise_seed);
}

namespace {

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 14695981039346656037ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

std::vector<TokenizedPrimitive> record_tokens(const DatasetRecord& rec,
                                              const Discretizer& d,
                                              bool enforce_canonical) {
  return encode_assembly(rec.assembly, d, enforce_canonical).tokens;
}

LossBreakdown accumulate_mean(const std::vector<LossBreakdown>& parts) {
  LossBreakdown mean;
  if (parts.empty()) return mean;
  for (const LossBreakdown& p : parts) {
    mean.l_ce += p.l_ce;
    mean.l_eos += p.l_eos;
    mean.l_cd += p.l_cd;
    mean.total += p.total;
    mean.ce_class += p.ce_class;
    mean.ce_translation += p.ce_translation;
    mean.ce_rotation += p.ce_rotation;
    mean.ce_scale += p.ce_scale;
  }
  const double n = double(parts.size());
  mean.l_ce /= n;
  mean.l_eos /= n;
  mean.l_cd /= n;
  mean.total /= n;
  mean.ce_class /= n;
  mean.ce_translation /= n;
  mean.ce_rotation /= n;
  mean.ce_scale /= n;
  return mean;
}

}  // namespace

LossBreakdown teacher_forced_losses(const std::vector<DatasetRecord>& batch,
                                    const PrimitiveModel& model, const TrainConfig& cfg,
                                    Rng& rng) {
  cfg.validate();
  const Discretizer d = model.config().discretizer();
  std::vector<LossBreakdown> parts;
  parts.reserve(batch.size());
  for (const DatasetRecord& rec : batch) {
    Tape t;
    const auto tokens = record_tokens(rec, d, cfg.enforce_canonical_targets);
    parts.push_back(sample_losses(t, model, rec.points, tokens, rec.assembly, cfg,
                                  cfg.gumbel_temp_start, fnv1a(rec.id), rng())
                        .values);
  }
  return accumulate_mean(parts);
}

TrainResult train(const std::vector<DatasetRecord>& dataset, PrimitiveModel& model,
                  const TrainConfig& cfg, const std::string& resume_from) {
  cfg.validate();
  if (dataset.empty()) fail(ErrorKind::invalid_input, "training dataset is empty");

  const Discretizer d = model.config().discretizer();
  const int n = int(dataset.size());
  const int batch = std::min(cfg.batch_size, n);
  const int micro_per_epoch = std::max(1, n / batch);
  const long total_micro = long(cfg.epochs) * micro_per_epoch;
  const long total_steps = total_micro / cfg.grad_accumulation;

  // tokens and condition subsample seeds are fixed per record
  std::vector<std::vector<TokenizedPrimitive>> tokens(dataset.size());
  std::vector<std::uint64_t> fps_seeds(dataset.size());
  ClampStats clamp;
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    tokens[i] =
        encode_assembly(dataset[i].assembly, d, cfg.enforce_canonical_targets, &clamp)
            .tokens;
    fps_seeds[i] = fnv1a(dataset[i].id);
  }
  if (clamp.clamped > 0)
    std::cerr << "warning: " << clamp.clamped
              << " attribute values clamped into quantization range\n";

  nn::Adam adam(model.params(), {cfg.learning_rate});
  long start_step = 0;
  if (!resume_from.empty()) {
    LoadedCheckpoint loaded = load_checkpoint(resume_from);
    if (!(loaded.model.config() == model.config()))
      fail(ErrorKind::config, "resume checkpoint config does not match model");
    for (const auto& p : loaded.model.params().all())
      model.params().find(p->name)->value = p->value;
    start_step = std::stol(loaded.extra.strings.at("step"));
    adam.set_step_count(start_step);
    const auto& params = model.params().all();
    for (std::size_t i = 0; i < params.size(); ++i) {
      adam.moment1()[i] = loaded.extra.arrays.at("adam.m." + params[i]->name);
      adam.moment2()[i] = loaded.extra.arrays.at("adam.v." + params[i]->name);
    }
  }

  const int workers = cfg.threads > 0
                          ? cfg.threads
                          : int(std::max(1u, std::thread::hardware_concurrency()));

  std::ofstream metrics;
  namespace fs = std::filesystem;
  if (!cfg.out_dir.empty()) {
    fs::create_directories(cfg.out_dir);
    const bool fresh = start_step == 0;
    metrics.open(fs::path(cfg.out_dir) / "metrics.csv",
                 fresh ? std::ios::trunc : std::ios::app);
    if (fresh) metrics << "step,l_ce,l_eos,l_cd,total,lr,temperature\n";
  }

  auto save_state = [&](long step, const std::string& name) -> std::string {
    if (cfg.out_dir.empty()) return "";
    CheckpointExtra extra;
    extra.strings["step"] = std::to_string(step);
    const auto& params = model.params().all();
    for (std::size_t i = 0; i < params.size(); ++i) {
      extra.arrays["adam.m." + params[i]->name] = adam.moment1()[i];
      extra.arrays["adam.v." + params[i]->name] = adam.moment2()[i];
    }
    const std::string path = (fs::path(cfg.out_dir) / name).string();
    save_checkpoint(model, path, extra);
    return path;
  };

  TrainResult result;
  auto epoch_permutation = [&](long epoch) {
    std::vector<int> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    Rng rng(derive_seed(cfg.seed, 0x9e37, std::uint64_t(epoch)));
    std::shuffle(perm.begin(), perm.end(), rng);
    return perm;
  };

  long cached_epoch = -1;
  std::vector<int> perm;
  for (long step = start_step; step < total_steps; ++step) {
    const double progress =
        total_steps > 1 ? double(step) / double(total_steps - 1) : 0.0;
    const double temperature =
        cfg.gumbel_temp_start +
        (cfg.gumbel_temp_end - cfg.gumbel_temp_start) * progress;

    model.params().zero_grad();
    std::vector<LossBreakdown> all_values;
    for (int acc = 0; acc < cfg.grad_accumulation; ++acc) {
      const long micro = step * cfg.grad_accumulation + acc;
      const long epoch = micro / micro_per_epoch;
      const long offset = (micro % micro_per_epoch) * batch;
      if (epoch != cached_epoch) {
        perm = epoch_permutation(epoch);
        cached_epoch = epoch;
      }

      std::vector<GradBuffer> buffers;
      buffers.reserve(workers);
      for (int w = 0; w < workers; ++w) buffers.emplace_back(model.params());
      std::vector<std::vector<LossBreakdown>> worker_values(workers);

      auto run_worker = [&](int w) {
        for (int pos = w; pos < batch; pos += workers) {
          const int rec = perm[(offset + pos) % n];
          Tape tape(&buffers[w]);
          SampleLossResult loss = sample_losses(
              tape, model, dataset[rec].points, tokens[rec], dataset[rec].assembly,
              cfg, temperature, fps_seeds[rec],
              derive_seed(cfg.seed, 0x6073 + std::uint64_t(micro),
                          std::uint64_t(pos)));
          tape.backward(loss.total);
          worker_values[w].push_back(loss.values);
        }
      };
      if (workers == 1) {
        run_worker(0);
      } else {
        std::vector<std::thread> pool;
        for (int w = 0; w < workers; ++w) pool.emplace_back(run_worker, w);
        for (auto& th : pool) th.join();
      }
      for (int w = 0; w < workers; ++w) {
        buffers[w].add_into_store(model.params(),
                                  1.0 / double(batch * cfg.grad_accumulation));
        for (auto& v : worker_values[w]) all_values.push_back(v);
      }
    }

    const LossBreakdown step_loss = accumulate_mean(all_values);
    if (!std::isfinite(step_loss.total)) {
      std::string ids;
      const long micro0 = step * cfg.grad_accumulation;
      for (int pos = 0; pos < batch; ++pos)
        ids += dataset[perm[((micro0 % micro_per_epoch) * batch + pos) % n]].id + " ";
      fail(ErrorKind::numeric, "non-finite loss at step " + std::to_string(step) +
                                   " (batch: " + ids + ")");
    }
    adam.step();
    result.steps.push_back(step_loss);

    if (metrics.is_open())
      metrics << step << "," << step_loss.l_ce << "," << step_loss.l_eos << ","
              << step_loss.l_cd << "," << step_loss.total << "," << cfg.learning_rate
              << "," << temperature << "\n";
    if (cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0)
      save_state(step + 1, "checkpoint_" + std::to_string(step + 1) + ".ckpt");
  }

  result.final_checkpoint = save_state(total_steps, "checkpoint_final.ckpt");
  if (metrics.is_open()) metrics.flush();
  return result;
}

}  // namespace primgen
