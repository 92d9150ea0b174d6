#include "dlmlab/flops.hpp"

#include <nlohmann/json.hpp>

#include <cmath>
#include <stdexcept>

namespace dlmlab {

namespace {

struct PerToken {
  double projections;  // q,k,v,o
  double ffn;          // SwiGLU gate/up/down
  double logits;
};

PerToken per_token_linear(const ModelSpec& spec) {
  const double d = static_cast<double>(spec.d_model);
  const double f = static_cast<double>(spec.ffn_hidden());
  const double n = static_cast<double>(spec.n_layers);
  const double k = static_cast<double>(spec.vocab_size);
  return {n * 8.0 * d * d, n * 6.0 * d * f, 2.0 * d * k};
}

// Attention score + apply cost for one token attending to `context` positions,
// summed over heads: 2*d*context each for qk and av.
double attn_cost(const ModelSpec& spec, double context) {
  return static_cast<double>(spec.n_layers) * 2.0 * static_cast<double>(spec.d_model) * context;
}

FlopsReport finish(FlopsBreakdown b, double tokens, double steps) {
  FlopsReport r;
  r.breakdown = b;
  r.total = b.total();
  r.per_token = tokens > 0 ? r.total / tokens : 0.0;
  r.per_step = steps > 0 ? r.total / steps : 0.0;
  return r;
}

}  // namespace

std::string FlopsReport::to_json() const {
  nlohmann::json j;
  j["total"] = total;
  j["breakdown"] = {{"attn_qk", breakdown.attn_qk},
                    {"attn_av", breakdown.attn_av},
                    {"projections", breakdown.projections},
                    {"ffn", breakdown.ffn},
                    {"logits", breakdown.logits}};
  j["per_token"] = per_token;
  j["per_step"] = per_step;
  j["assumptions"] = assumptions;
  return j.dump(2);
}

FlopsReport train_flops(const ModelSpec& spec, double tokens_processed) {
  if (tokens_processed < 0) throw std::invalid_argument("train_flops: negative token count");
  const PerToken lin = per_token_linear(spec);
  const double att = attn_cost(spec, static_cast<double>(spec.seq_len));
  const double fwd_bwd = 3.0;  // backward ~ 2x forward
  FlopsBreakdown b;
  b.projections = fwd_bwd * tokens_processed * lin.projections;
  b.ffn = fwd_bwd * tokens_processed * lin.ffn;
  b.logits = fwd_bwd * tokens_processed * lin.logits;
  b.attn_qk = fwd_bwd * tokens_processed * att;
  b.attn_av = fwd_bwd * tokens_processed * att;
  FlopsReport r = finish(b, tokens_processed, 0);
  r.assumptions = {{"tokens_processed", std::to_string(tokens_processed)},
                   {"seq_len", std::to_string(spec.seq_len)},
                   {"backward_multiplier", "3"},
                   {"multiply_add", "2"}};
  return r;
}

FlopsReport infer_flops_ar(const ModelSpec& spec, std::int64_t prompt_len, std::int64_t gen_len,
                           bool use_cache) {
  if (prompt_len < 0 || gen_len < 0) throw std::invalid_argument("infer_flops_ar: negative length");
  if (prompt_len + gen_len > spec.seq_len) {
    throw std::invalid_argument("infer_flops_ar: prompt + gen exceeds seq_len " +
                                std::to_string(spec.seq_len));
  }
  const PerToken lin = per_token_linear(spec);
  const double per_tok = lin.projections + lin.ffn + lin.logits;
  FlopsBreakdown b;
  auto add_causal_pass = [&](double len) {
    b.projections += len * lin.projections;
    b.ffn += len * lin.ffn;
    b.logits += len * lin.logits;
    // triangular attention: sum_i (i+1) = len(len+1)/2 contexts
    b.attn_qk += attn_cost(spec, 1.0) * len * (len + 1.0) / 2.0;
    b.attn_av += attn_cost(spec, 1.0) * len * (len + 1.0) / 2.0;
  };
  if (use_cache) {
    add_causal_pass(static_cast<double>(prompt_len));
    for (std::int64_t c = prompt_len; c < prompt_len + gen_len; ++c) {
      b.projections += lin.projections;
      b.ffn += lin.ffn;
      b.logits += lin.logits;
      b.attn_qk += attn_cost(spec, static_cast<double>(c + 1));
      b.attn_av += attn_cost(spec, static_cast<double>(c + 1));
    }
  } else {
    if (gen_len == 0) {
      add_causal_pass(static_cast<double>(prompt_len));
    } else {
      for (std::int64_t g = 0; g < gen_len; ++g) {
        add_causal_pass(static_cast<double>(prompt_len + g));
      }
    }
  }
  FlopsReport r = finish(b, static_cast<double>(prompt_len + gen_len),
                         static_cast<double>(gen_len));
  r.assumptions = {{"prompt_len", std::to_string(prompt_len)},
                   {"gen_len", std::to_string(gen_len)},
                   {"use_cache", use_cache ? "1" : "0"},
                   {"multiply_add", "2"}};
  return r;
}

FlopsReport infer_flops_mdm(const ModelSpec& spec, std::int64_t seq_len, std::int64_t steps) {
  if (seq_len < 1 || steps < 1) throw std::invalid_argument("infer_flops_mdm: positive sizes required");
  const PerToken lin = per_token_linear(spec);
  const double len = static_cast<double>(seq_len);
  const double s = static_cast<double>(steps);
  FlopsBreakdown b;
  b.projections = s * len * lin.projections;
  b.ffn = s * len * lin.ffn;
  b.logits = s * len * lin.logits;
  b.attn_qk = s * attn_cost(spec, len) * len;  // full len x len scores per step
  b.attn_av = s * attn_cost(spec, len) * len;
  FlopsReport r = finish(b, len, s);
  r.assumptions = {{"seq_len", std::to_string(seq_len)},
                   {"steps", std::to_string(steps)},
                   {"multiply_add", "2"}};
  return r;
}

ModelSpec flops_reference_spec() {
  ModelSpec spec;
  spec.vocab_size = 50304;
  spec.seq_len = 4096;
  spec.n_layers = 16;
  spec.d_model = 2048;
  spec.n_heads = 16;
  spec.ffn_mult = 2.75;  // hidden 5632
  spec.attention_mode = AttentionMode::causal;
  return spec;
}

std::string flops_sweep_csv(const ModelSpec& spec, const std::vector<std::int64_t>& lengths) {
  std::string out = "paradigm,seq_len,steps,total_flops\n";
  char buf[64];
  auto fmt = [&buf](double v) {
    std::snprintf(buf, sizeof buf, "%.10g", v);
    return std::string(buf);
  };
  for (auto len : lengths) {
    out += "ar_cached," + std::to_string(len) + ',' + std::to_string(len) + ',' +
           fmt(infer_flops_ar(spec, 0, len, true).total) + '\n';
    out += "ar_uncached," + std::to_string(len) + ',' + std::to_string(len) + ',' +
           fmt(infer_flops_ar(spec, 0, len, false).total) + '\n';
    out += "mdm," + std::to_string(len) + ',' + std::to_string(len) + ',' +
           fmt(infer_flops_mdm(spec, len, len).total) + '\n';
  }
  return out;
}

}  // namespace dlmlab
