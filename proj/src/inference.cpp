#include "primgen/inference.hpp"

#include <cmath>

namespace primgen {

using nn::Mat;
using nn::Tape;
using nn::Var;

void SamplingConfig::validate() const {
  if (temperature <= 0.0)
    fail(ErrorKind::config, "sampling temperature must be positive");
  if (k < 1) fail(ErrorKind::config, "top-k requires k >= 1");
  if (eos_threshold <= 0.0 || eos_threshold >= 1.0)
    fail(ErrorKind::config, "eos_threshold must lie in (0, 1)");
  if (max_len < 0) fail(ErrorKind::config, "max_len must be nonnegative");
}

namespace {

int pick_index(const Eigen::RowVectorXd& logits, const SamplingConfig& sc, Rng& rng) {
  if (sc.mode == SamplingConfig::Mode::greedy) {
    Eigen::Index best = 0;
    logits.maxCoeff(&best);
    return int(best);
  }
  Eigen::RowVectorXd scaled = logits / sc.temperature;
  if (sc.mode == SamplingConfig::Mode::top_k && sc.k < logits.size()) {
    std::vector<int> order(logits.size());
    std::iota(order.begin(), order.end(), 0);
    std::partial_sort(order.begin(), order.begin() + sc.k, order.end(),
                      [&](int a, int b) { return scaled(a) > scaled(b); });
    const double cutoff = scaled(order[sc.k - 1]);
    for (Eigen::Index i = 0; i < scaled.size(); ++i)
      if (scaled(i) < cutoff) scaled(i) = -std::numeric_limits<double>::infinity();
  }
  const double m = scaled.maxCoeff();
  Eigen::RowVectorXd probs = (scaled.array() - m).exp();
  probs /= probs.sum();
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  double u = uni(rng);
  for (Eigen::Index i = 0; i < probs.size(); ++i) {
    u -= probs(i);
    if (u <= 0.0) return int(i);
  }
  return int(probs.size()) - 1;
}

std::array<int, 3> pick_dims(const Mat& per_dim_logits, const SamplingConfig& sc,
                             Rng& rng) {
  std::array<int, 3> bins{};
  for (int dd = 0; dd < 3; ++dd) bins[dd] = pick_index(per_dim_logits.row(dd), sc, rng);
  return bins;
}

}  // namespace

GenerationResult generate(const PointCloud& points, const PrimitiveModel& model,
                          const Discretizer& discretizer, const SamplingConfig& sc,
                          const std::vector<TokenizedPrimitive>& prefix) {
  sc.validate();
  if (!(model.config().discretizer() == discretizer))
    fail(ErrorKind::config,
         "discretizer does not match the model's attribute level counts");

  // condition tokens are fixed for the whole generation
  Mat cond_value;
  {
    Tape t;
    cond_value = t.value(model.encode_condition(t, points, sc.seed));
  }

  Rng rng(derive_seed(sc.seed, 0x5a3717UL));
  GenerationResult out;
  out.tokens = prefix;

  while (true) {
    if (int(out.tokens.size()) >= sc.max_len) {
      out.terminated_by_eos = false;
      break;
    }
    Tape t;
    Var cond = t.constant(cond_value);
    Var features =
        model.forward_sequence(t, cond, model.embed_primitives(t, out.tokens));
    Var f = t.slice_rows(features, int(out.tokens.size()), 1);

    AttributeDecoder dec(model, t, f);
    const double eos_prob = 1.0 / (1.0 + std::exp(-dec.eos_logit()));
    out.final_eos_probability = eos_prob;
    if (eos_prob >= sc.eos_threshold) {
      out.terminated_by_eos = true;
      break;
    }

    StepDiagnostics diag;
    TokenizedPrimitive tok;
    tok.class_index = pick_index(dec.class_logits(), sc, rng);
    dec.set_class(tok.class_index);
    tok.translation_bins = pick_dims(dec.translation_logits(), sc, rng);
    dec.set_translation(tok.translation_bins);
    tok.rotation_bins = pick_dims(dec.rotation_logits(), sc, rng);
    dec.set_rotation(tok.rotation_bins);
    tok.scale_bins = pick_dims(dec.scale_logits(), sc, rng);
    dec.set_scale(tok.scale_bins);

    diag.logits = dec.filled();
    diag.eos_probability = eos_prob;
    diag.chosen = tok;
    out.steps.push_back(std::move(diag));
    out.tokens.push_back(tok);
  }

  SequenceSample seq;
  seq.tokens = out.tokens;
  seq.terminated = out.terminated_by_eos;
  out.assembly = decode_sequence(seq, discretizer);
  return out;
}

}  // namespace primgen
