#pragma once

#include <cstdint>
#include <map>
#include <string>

#include "dlmlab/transformer.hpp"

namespace dlmlab {

// Analytic floating-point-operation model. Multiply-add counts as 2 ops,
// embedding lookups are free, the logits projection is included.
struct FlopsBreakdown {
  double attn_qk = 0.0;
  double attn_av = 0.0;
  double projections = 0.0;  // q/k/v/o
  double ffn = 0.0;
  double logits = 0.0;

  double total() const { return attn_qk + attn_av + projections + ffn + logits; }
};

struct FlopsReport {
  double total = 0.0;
  FlopsBreakdown breakdown;
  double per_token = 0.0;
  double per_step = 0.0;
  std::map<std::string, std::string> assumptions;  // inputs echoed verbatim

  std::string to_json() const;
};

// Training cost: forward + backward ~ 3x forward; attention is counted over
// the full seq_len^2 score matrix so the per-token cost is identical for the
// causal and bidirectional paradigms. Paradigms differ only through
// tokens_processed (epochs).
FlopsReport train_flops(const ModelSpec& spec, double tokens_processed);

// Autoregressive inference. With the cache, the prompt is processed once and
// each new token costs one incremental forward; without it every token
// re-runs the full forward.
FlopsReport infer_flops_ar(const ModelSpec& spec, std::int64_t prompt_len, std::int64_t gen_len,
                           bool use_cache);

// Masked-diffusion inference: steps x one full bidirectional forward.
FlopsReport infer_flops_mdm(const ModelSpec& spec, std::int64_t seq_len, std::int64_t steps);

// Reference shape (~1B parameters) used for paradigm comparisons.
ModelSpec flops_reference_spec();

// Tidy sweep over generation lengths (steps = length for the diffusion rows):
// paradigm,seq_len,steps,total_flops.
std::string flops_sweep_csv(const ModelSpec& spec, const std::vector<std::int64_t>& lengths);

}  // namespace dlmlab
