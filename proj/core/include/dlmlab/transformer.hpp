#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "dlmlab/rng.hpp"
#include "dlmlab/tensor.hpp"

namespace dlmlab {

enum class AttentionMode { causal, bidirectional };

std::string to_string(AttentionMode mode);
AttentionMode attention_mode_from_string(const std::string& s);

// Decoder-style transformer recipe: RoPE, SwiGLU, pre-layer RMSNorm,
// bias-free projections and RMS-normalized q/k per head. The same spec
// drives causal and bidirectional models; there is no time or noise-level
// input anywhere.
struct ModelSpec {
  std::int64_t vocab_size = 259;  // includes mask/pad/bos specials
  std::int64_t seq_len = 256;
  std::int64_t n_layers = 4;
  std::int64_t d_model = 128;
  std::int64_t n_heads = 4;
  double ffn_mult = 4.0;  // SwiGLU hidden = ffn_mult * d_model
  AttentionMode attention_mode = AttentionMode::causal;
  double dropout_prob = 0.0;
  double init_std = 0.02;
  double rope_base = 10000.0;
  bool qk_norm = true;
  bool bias_free = true;

  std::int64_t head_dim() const { return d_model / n_heads; }
  std::int64_t ffn_hidden() const;
  void validate() const;  // throws std::invalid_argument

  std::vector<std::pair<std::string, std::string>> to_fields() const;
  static ModelSpec from_fields(const std::vector<std::pair<std::string, std::string>>& fields);
};

struct TokenBatch {
  std::int64_t rows = 0;
  std::int64_t cols = 0;
  std::vector<std::int32_t> ids;  // row-major [rows x cols]

  static TokenBatch single(std::vector<std::int32_t> seq);
};

template <typename S>
struct NamedParam {
  std::string name;
  Tensor<S> tensor;
};

template <typename S>
class Model {
 public:
  struct Layer {
    Tensor<S> attn_norm, wq, wk, wv, wo;
    Tensor<S> q_scale, k_scale;  // defined when qk_norm
    Tensor<S> bq, bk, bv, bo;    // defined when !bias_free
    Tensor<S> ffn_norm, w_gate, w_up, w_down;
    Tensor<S> b_gate, b_up, b_down;
  };

  Model(ModelSpec spec, Rng rng);
  Model(Model&&) noexcept = default;
  Model& operator=(Model&&) noexcept = default;
  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;

  const ModelSpec& spec() const { return spec_; }
  std::vector<NamedParam<S>>& params() { return params_; }
  const std::vector<NamedParam<S>>& params() const { return params_; }
  std::int64_t param_count() const;

  const Tensor<S>& tok_embed() const { return tok_embed_; }
  const Layer& layer(std::int64_t i) const { return layers_[static_cast<std::size_t>(i)]; }
  const Tensor<S>& final_norm() const { return final_norm_; }
  const Tensor<S>& unembed() const { return unembed_; }

  // Teacher-forced forward over a [rows x cols] batch; returns logits
  // [rows*cols x vocab]. cols may be shorter than spec.seq_len. The graph is
  // recorded only when parameters require grad (training).
  Tensor<S> forward(const TokenBatch& tokens, bool dropout_on, Rng rng) const;

  void set_requires_grad(bool on);

  static constexpr double kNormEps = 1e-6;

 private:
  ModelSpec spec_;
  Tensor<S> tok_embed_;  // [vocab x d]
  std::vector<Layer> layers_;
  Tensor<S> final_norm_;
  Tensor<S> unembed_;  // [d x vocab]
  std::vector<NamedParam<S>> params_;
};

// Incremental decoding state for a causal model. Stores per-layer keys and
// values (post qk-norm and rotation) and replays one token at a time along a
// plain, graph-free path; equivalent to column i of a full forward.
template <typename S>
class KvCache {
 public:
  explicit KvCache(const Model<S>& model);  // throws on bidirectional models
  std::int64_t length() const { return len_; }
  // Appends `token` at position length() and returns the logits row there.
  std::vector<S> forward_next(std::int32_t token);  // throws when full

 private:
  const Model<S>* model_;
  std::int64_t len_ = 0;
  std::vector<std::vector<S>> keys_, vals_;  // per layer, capacity seq_len*d
};

using ModelF = Model<float>;
using ModelD = Model<double>;

}  // namespace dlmlab
