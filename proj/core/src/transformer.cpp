#include "dlmlab/transformer.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <stdexcept>

namespace dlmlab {

std::string to_string(AttentionMode mode) {
  return mode == AttentionMode::causal ? "causal" : "bidirectional";
}

AttentionMode attention_mode_from_string(const std::string& s) {
  if (s == "causal") return AttentionMode::causal;
  if (s == "bidirectional") return AttentionMode::bidirectional;
  throw std::invalid_argument("unknown attention mode: " + s);
}

std::int64_t ModelSpec::ffn_hidden() const {
  return static_cast<std::int64_t>(std::llround(ffn_mult * static_cast<double>(d_model)));
}

void ModelSpec::validate() const {
  if (vocab_size < 2) throw std::invalid_argument("ModelSpec: vocab_size must be >= 2");
  if (seq_len < 1) throw std::invalid_argument("ModelSpec: seq_len must be >= 1");
  if (n_layers < 1) throw std::invalid_argument("ModelSpec: n_layers must be >= 1");
  if (n_heads < 1 || d_model % n_heads != 0) {
    throw std::invalid_argument("ModelSpec: d_model " + std::to_string(d_model) +
                                " not divisible by n_heads " + std::to_string(n_heads));
  }
  if (head_dim() % 2 != 0) {
    throw std::invalid_argument("ModelSpec: head_dim must be even for rotary encoding");
  }
  if (ffn_hidden() < 1) throw std::invalid_argument("ModelSpec: ffn_mult too small");
  if (dropout_prob < 0.0 || dropout_prob >= 1.0) {
    throw std::invalid_argument("ModelSpec: dropout_prob must be in [0,1)");
  }
  if (init_std < 0.0) throw std::invalid_argument("ModelSpec: init_std must be >= 0");
}

std::vector<std::pair<std::string, std::string>> ModelSpec::to_fields() const {
  char buf[64];
  auto fmt = [&buf](double v) {
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return std::string(buf);
  };
  return {
      {"vocab_size", std::to_string(vocab_size)},
      {"seq_len", std::to_string(seq_len)},
      {"n_layers", std::to_string(n_layers)},
      {"d_model", std::to_string(d_model)},
      {"n_heads", std::to_string(n_heads)},
      {"ffn_mult", fmt(ffn_mult)},
      {"attention_mode", to_string(attention_mode)},
      {"dropout_prob", fmt(dropout_prob)},
      {"init_std", fmt(init_std)},
      {"rope_base", fmt(rope_base)},
      {"qk_norm", qk_norm ? "1" : "0"},
      {"bias_free", bias_free ? "1" : "0"},
  };
}

ModelSpec ModelSpec::from_fields(const std::vector<std::pair<std::string, std::string>>& fields) {
  ModelSpec spec;
  for (const auto& [key, value] : fields) {
    if (key == "vocab_size") spec.vocab_size = std::stoll(value);
    else if (key == "seq_len") spec.seq_len = std::stoll(value);
    else if (key == "n_layers") spec.n_layers = std::stoll(value);
    else if (key == "d_model") spec.d_model = std::stoll(value);
    else if (key == "n_heads") spec.n_heads = std::stoll(value);
    else if (key == "ffn_mult") spec.ffn_mult = std::stod(value);
    else if (key == "attention_mode") spec.attention_mode = attention_mode_from_string(value);
    else if (key == "dropout_prob") spec.dropout_prob = std::stod(value);
    else if (key == "init_std") spec.init_std = std::stod(value);
    else if (key == "rope_base") spec.rope_base = std::stod(value);
    else if (key == "qk_norm") spec.qk_norm = value == "1";
    else if (key == "bias_free") spec.bias_free = value == "1";
    else throw std::invalid_argument("ModelSpec: unknown field " + key);
  }
  spec.validate();
  return spec;
}

TokenBatch TokenBatch::single(std::vector<std::int32_t> seq) {
  TokenBatch b;
  b.rows = 1;
  b.cols = static_cast<std::int64_t>(seq.size());
  b.ids = std::move(seq);
  return b;
}

// ------------------------------------------------------------------- model

template <typename S>
Model<S>::Model(ModelSpec spec, Rng rng) : spec_(std::move(spec)) {
  spec_.validate();
  const std::int64_t d = spec_.d_model;
  const std::int64_t k = spec_.vocab_size;
  const std::int64_t f = spec_.ffn_hidden();
  const std::int64_t hd = spec_.head_dim();
  const double std = spec_.init_std;

  std::uint64_t salt = 0;
  auto weight = [&](Shape shape) {
    return Tensor<S>::randn(std::move(shape), std, rng.fork(salt++), /*requires_grad=*/true);
  };
  auto ones = [&](std::int64_t n) { return Tensor<S>::constant({n}, S{1}, true); };
  auto zeros_vec = [&](std::int64_t n) { return Tensor<S>::zeros({n}, true); };

  auto track = [this](std::string name, const Tensor<S>& t) {
    params_.push_back({std::move(name), t});
  };

  tok_embed_ = weight({k, d});
  track("tok_embed", tok_embed_);
  layers_.resize(static_cast<std::size_t>(spec_.n_layers));
  for (std::int64_t l = 0; l < spec_.n_layers; ++l) {
    Layer& lay = layers_[static_cast<std::size_t>(l)];
    const std::string p = "layers." + std::to_string(l) + ".";
    lay.attn_norm = ones(d);
    track(p + "attn_norm", lay.attn_norm);
    lay.wq = weight({d, d});
    track(p + "wq", lay.wq);
    lay.wk = weight({d, d});
    track(p + "wk", lay.wk);
    lay.wv = weight({d, d});
    track(p + "wv", lay.wv);
    lay.wo = weight({d, d});
    track(p + "wo", lay.wo);
    if (!spec_.bias_free) {
      lay.bq = zeros_vec(d);
      track(p + "bq", lay.bq);
      lay.bk = zeros_vec(d);
      track(p + "bk", lay.bk);
      lay.bv = zeros_vec(d);
      track(p + "bv", lay.bv);
      lay.bo = zeros_vec(d);
      track(p + "bo", lay.bo);
    }
    if (spec_.qk_norm) {
      lay.q_scale = ones(hd);
      track(p + "q_scale", lay.q_scale);
      lay.k_scale = ones(hd);
      track(p + "k_scale", lay.k_scale);
    }
    lay.ffn_norm = ones(d);
    track(p + "ffn_norm", lay.ffn_norm);
    lay.w_gate = weight({d, f});
    track(p + "w_gate", lay.w_gate);
    lay.w_up = weight({d, f});
    track(p + "w_up", lay.w_up);
    lay.w_down = weight({f, d});
    track(p + "w_down", lay.w_down);
    if (!spec_.bias_free) {
      lay.b_gate = zeros_vec(f);
      track(p + "b_gate", lay.b_gate);
      lay.b_up = zeros_vec(f);
      track(p + "b_up", lay.b_up);
      lay.b_down = zeros_vec(d);
      track(p + "b_down", lay.b_down);
    }
  }
  final_norm_ = ones(d);
  track("final_norm", final_norm_);
  unembed_ = weight({d, k});
  track("unembed", unembed_);
}

template <typename S>
std::int64_t Model<S>::param_count() const {
  std::int64_t n = 0;
  for (const auto& p : params_) n += p.tensor.numel();
  return n;
}

template <typename S>
void Model<S>::set_requires_grad(bool on) {
  for (auto& p : params_) p.tensor.node()->requires_grad = on;
}

template <typename S>
Tensor<S> Model<S>::forward(const TokenBatch& tokens, bool dropout_on, Rng rng) const {
  if (tokens.rows < 1 || tokens.cols < 1 ||
      tokens.rows * tokens.cols != static_cast<std::int64_t>(tokens.ids.size())) {
    throw std::invalid_argument("forward: inconsistent token batch");
  }
  if (tokens.cols > spec_.seq_len) {
    throw std::invalid_argument("forward: sequence length " + std::to_string(tokens.cols) +
                                " exceeds model seq_len " + std::to_string(spec_.seq_len));
  }
  for (auto id : tokens.ids) {
    if (id < 0 || id >= spec_.vocab_size) {
      throw std::invalid_argument("forward: token " + std::to_string(id) + " outside vocab " +
                                  std::to_string(spec_.vocab_size));
    }
  }
  const bool causal = spec_.attention_mode == AttentionMode::causal;
  const std::int64_t batch = tokens.rows, seq = tokens.cols, heads = spec_.n_heads;
  const double p = dropout_on ? spec_.dropout_prob : 0.0;

  Tensor<S> x = embedding(tok_embed_, std::span<const std::int32_t>(tokens.ids));
  for (std::int64_t l = 0; l < spec_.n_layers; ++l) {
    const Layer& lay = layers_[static_cast<std::size_t>(l)];
    Rng lrng = rng.fork(static_cast<std::uint64_t>(l));

    Tensor<S> h = rms_norm(x, lay.attn_norm, kNormEps);
    Tensor<S> q = matmul(h, lay.wq);
    Tensor<S> k = matmul(h, lay.wk);
    Tensor<S> v = matmul(h, lay.wv);
    if (!spec_.bias_free) {
      q = add_row_bias(q, lay.bq);
      k = add_row_bias(k, lay.bk);
      v = add_row_bias(v, lay.bv);
    }
    if (spec_.qk_norm) {
      q = rms_norm(q, lay.q_scale, kNormEps);
      k = rms_norm(k, lay.k_scale, kNormEps);
    }
    q = rope(q, batch, seq, heads, spec_.rope_base);
    k = rope(k, batch, seq, heads, spec_.rope_base);
    Tensor<S> attn = attention(q, k, v, batch, seq, heads, causal, p, lrng.fork(0));
    Tensor<S> o = matmul(attn, lay.wo);
    if (!spec_.bias_free) o = add_row_bias(o, lay.bo);
    if (p > 0.0) o = dropout(o, p, lrng.fork(1));
    x = add(x, o);

    Tensor<S> h2 = rms_norm(x, lay.ffn_norm, kNormEps);
    Tensor<S> gate = matmul(h2, lay.w_gate);
    Tensor<S> up = matmul(h2, lay.w_up);
    if (!spec_.bias_free) {
      gate = add_row_bias(gate, lay.b_gate);
      up = add_row_bias(up, lay.b_up);
    }
    Tensor<S> ff = matmul(mul(silu(gate), up), lay.w_down);
    if (!spec_.bias_free) ff = add_row_bias(ff, lay.b_down);
    if (p > 0.0) ff = dropout(ff, p, lrng.fork(2));
    x = add(x, ff);
  }
  x = rms_norm(x, final_norm_, kNormEps);
  return matmul(x, unembed_);
}

// ---------------------------------------------------------------- kv cache

namespace {

template <typename S>
using VecMap = Eigen::Map<Eigen::Matrix<S, 1, Eigen::Dynamic, Eigen::RowMajor>>;
template <typename S>
using ConstVecMap = Eigen::Map<const Eigen::Matrix<S, 1, Eigen::Dynamic, Eigen::RowMajor>>;
template <typename S>
using ConstMatMapT = Eigen::Map<const Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

// Matches the grouped RMS normalization of the graph path bit-for-bit.
template <typename S>
void rms_norm_inplace(S* x, const S* gain, std::int64_t n, std::int64_t group, double eps) {
  for (std::int64_t r = 0; r < n / group; ++r) {
    S* row = x + r * group;
    S ss{0};
    for (std::int64_t c = 0; c < group; ++c) ss += row[c] * row[c];
    const S inv = S{1} / std::sqrt(ss / static_cast<S>(group) + static_cast<S>(eps));
    for (std::int64_t c = 0; c < group; ++c) row[c] *= gain[c] * inv;
  }
}

template <typename S>
void rope_inplace(S* x, std::int64_t pos, std::int64_t heads, std::int64_t head_dim, double base) {
  const std::int64_t half = head_dim / 2;
  for (std::int64_t h = 0; h < heads; ++h) {
    S* xh = x + h * head_dim;
    for (std::int64_t i = 0; i < half; ++i) {
      const double angle = static_cast<double>(pos) *
                           std::pow(base, -2.0 * static_cast<double>(i) / (2.0 * half));
      const S c = static_cast<S>(std::cos(angle));
      const S s = static_cast<S>(std::sin(angle));
      const S x1 = xh[i], x2 = xh[i + half];
      xh[i] = x1 * c - x2 * s;
      xh[i + half] = x1 * s + x2 * c;
    }
  }
}

}  // namespace

template <typename S>
KvCache<S>::KvCache(const Model<S>& model) : model_(&model) {
  if (model.spec().attention_mode != AttentionMode::causal) {
    throw std::invalid_argument("KvCache: requires a causal model");
  }
  const auto& spec = model.spec();
  keys_.assign(static_cast<std::size_t>(spec.n_layers),
               std::vector<S>(static_cast<std::size_t>(spec.seq_len * spec.d_model)));
  vals_ = keys_;
}

template <typename S>
std::vector<S> KvCache<S>::forward_next(std::int32_t token) {
  const ModelSpec& spec = model_->spec();
  if (len_ >= spec.seq_len) {
    throw std::runtime_error("KvCache: cache full at length " + std::to_string(len_));
  }
  if (token < 0 || token >= spec.vocab_size) {
    throw std::invalid_argument("KvCache: token " + std::to_string(token) + " outside vocab");
  }
  const std::int64_t d = spec.d_model, heads = spec.n_heads, hd = spec.head_dim();
  const std::int64_t f = spec.ffn_hidden();
  const std::int64_t pos = len_;
  const S att_scale = static_cast<S>(1.0 / std::sqrt(static_cast<double>(hd)));

  std::vector<S> x(static_cast<std::size_t>(d));
  {
    const S* row = model_->tok_embed().values().data() + static_cast<std::int64_t>(token) * d;
    std::copy(row, row + d, x.begin());
  }
  std::vector<S> h(static_cast<std::size_t>(d)), q(static_cast<std::size_t>(d));
  std::vector<S> attn(static_cast<std::size_t>(d)), tmp(static_cast<std::size_t>(d));
  std::vector<S> gate(static_cast<std::size_t>(f)), up(static_cast<std::size_t>(f));
  std::vector<S> weights(static_cast<std::size_t>(pos + 1));

  auto matvec = [](const S* w, std::int64_t rows, std::int64_t cols, const S* in, S* out) {
    ConstMatMapT<S> m(w, rows, cols);
    ConstVecMap<S> v(in, rows);
    VecMap<S> o(out, cols);
    o.noalias() = v * m;
  };

  for (std::int64_t l = 0; l < spec.n_layers; ++l) {
    const auto& lay = model_->layer(l);
    S* krow = keys_[static_cast<std::size_t>(l)].data() + pos * d;
    S* vrow = vals_[static_cast<std::size_t>(l)].data() + pos * d;

    h = x;
    rms_norm_inplace(h.data(), lay.attn_norm.values().data(), d, d, Model<S>::kNormEps);
    matvec(lay.wq.values().data(), d, d, h.data(), q.data());
    matvec(lay.wk.values().data(), d, d, h.data(), krow);
    matvec(lay.wv.values().data(), d, d, h.data(), vrow);
    if (!spec.bias_free) {
      for (std::int64_t c = 0; c < d; ++c) {
        q[static_cast<std::size_t>(c)] += lay.bq.values()[static_cast<std::size_t>(c)];
        krow[c] += lay.bk.values()[static_cast<std::size_t>(c)];
        vrow[c] += lay.bv.values()[static_cast<std::size_t>(c)];
      }
    }
    if (spec.qk_norm) {
      rms_norm_inplace(q.data(), lay.q_scale.values().data(), d, hd, Model<S>::kNormEps);
      rms_norm_inplace(krow, lay.k_scale.values().data(), d, hd, Model<S>::kNormEps);
    }
    rope_inplace(q.data(), pos, heads, hd, spec.rope_base);
    rope_inplace(krow, pos, heads, hd, spec.rope_base);

    const S* kbase = keys_[static_cast<std::size_t>(l)].data();
    const S* vbase = vals_[static_cast<std::size_t>(l)].data();
    for (std::int64_t hh = 0; hh < heads; ++hh) {
      const S* qh = q.data() + hh * hd;
      S mx{0};
      for (std::int64_t j = 0; j <= pos; ++j) {
        const S* kj = kbase + j * d + hh * hd;
        S dot{0};
        for (std::int64_t c = 0; c < hd; ++c) dot += qh[c] * kj[c];
        weights[static_cast<std::size_t>(j)] = dot * att_scale;
        mx = j == 0 ? weights[0] : std::max(mx, weights[static_cast<std::size_t>(j)]);
      }
      S denom{0};
      for (std::int64_t j = 0; j <= pos; ++j) {
        weights[static_cast<std::size_t>(j)] = std::exp(weights[static_cast<std::size_t>(j)] - mx);
        denom += weights[static_cast<std::size_t>(j)];
      }
      const S inv = S{1} / denom;
      S* out = attn.data() + hh * hd;
      std::fill(out, out + hd, S{0});
      for (std::int64_t j = 0; j <= pos; ++j) {
        const S w = weights[static_cast<std::size_t>(j)] * inv;
        const S* vj = vbase + j * d + hh * hd;
        for (std::int64_t c = 0; c < hd; ++c) out[c] += w * vj[c];
      }
    }
    matvec(lay.wo.values().data(), d, d, attn.data(), tmp.data());
    if (!spec.bias_free)
      for (std::int64_t c = 0; c < d; ++c) tmp[static_cast<std::size_t>(c)] += lay.bo.values()[static_cast<std::size_t>(c)];
    for (std::int64_t c = 0; c < d; ++c) x[static_cast<std::size_t>(c)] += tmp[static_cast<std::size_t>(c)];

    h = x;
    rms_norm_inplace(h.data(), lay.ffn_norm.values().data(), d, d, Model<S>::kNormEps);
    matvec(lay.w_gate.values().data(), d, f, h.data(), gate.data());
    matvec(lay.w_up.values().data(), d, f, h.data(), up.data());
    if (!spec.bias_free) {
      for (std::int64_t c = 0; c < f; ++c) {
        gate[static_cast<std::size_t>(c)] += lay.b_gate.values()[static_cast<std::size_t>(c)];
        up[static_cast<std::size_t>(c)] += lay.b_up.values()[static_cast<std::size_t>(c)];
      }
    }
    for (std::int64_t c = 0; c < f; ++c) {
      const S g = gate[static_cast<std::size_t>(c)];
      const S sig = S{1} / (S{1} + std::exp(-g));
      gate[static_cast<std::size_t>(c)] = g * sig * up[static_cast<std::size_t>(c)];
    }
    matvec(lay.w_down.values().data(), f, d, gate.data(), tmp.data());
    if (!spec.bias_free)
      for (std::int64_t c = 0; c < d; ++c) tmp[static_cast<std::size_t>(c)] += lay.b_down.values()[static_cast<std::size_t>(c)];
    for (std::int64_t c = 0; c < d; ++c) x[static_cast<std::size_t>(c)] += tmp[static_cast<std::size_t>(c)];
  }

  rms_norm_inplace(x.data(), model_->final_norm().values().data(), d, d, Model<S>::kNormEps);
  std::vector<S> logits(static_cast<std::size_t>(spec.vocab_size));
  matvec(model_->unembed().values().data(), d, spec.vocab_size, x.data(), logits.data());
  ++len_;
  return logits;
}

template class Model<float>;
template class Model<double>;
template class KvCache<float>;
template class KvCache<double>;

}  // namespace dlmlab
