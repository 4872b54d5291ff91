#pragma once

#include <vector>

#include "primgen/model.hpp"

namespace primgen {

struct SamplingConfig {
  enum class Mode { greedy, temperature, top_k };
  Mode mode = Mode::greedy;
  double temperature = 1.0;
  int k = 10;
  double eos_threshold = 0.5;  // stop when sigmoid(eos logit) >= threshold
  int max_len = 64;
  std::uint64_t seed = 0;

  void validate() const;
};

struct StepDiagnostics {
  AttributeLogits logits;
  double eos_probability = 0.0;
  TokenizedPrimitive chosen;
};

struct GenerationResult {
  Assembly assembly;  // in generation order; not re-canonicalized or re-sorted
  std::vector<TokenizedPrimitive> tokens;
  std::vector<StepDiagnostics> steps;  // one per generated primitive
  double final_eos_probability = 0.0;  // the probability at the stopping decision
  bool terminated_by_eos = false;      // false when max_len was hit
};

/// Autoregressive generation: encode the condition once, then per step read the
/// EOS probability, stop or cascade-sample class -> translation -> rotation ->
/// scale, feeding each sampled attribute's embedding to the next head.
/// A non-empty prefix forces the first primitives and continues from there.
GenerationResult generate(const PointCloud& points, const PrimitiveModel& model,
                          const Discretizer& discretizer, const SamplingConfig& sc,
                          const std::vector<TokenizedPrimitive>& prefix = {});

}  // namespace primgen
