#include "dlmlab/sampler.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace dlmlab {

namespace {

// Model parameters keep requires_grad on during training; evaluation paths
// flip it off so forwards stay graph-free.
template <typename S>
class NoGradGuard {
 public:
  explicit NoGradGuard(Model<S>& model) : model_(&model) { model_->set_requires_grad(false); }
  ~NoGradGuard() { model_->set_requires_grad(true); }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  Model<S>* model_;
};

std::int64_t sample_categorical(const std::vector<double>& probs, double temperature, Rng& rng) {
  if (temperature < 0.0) throw std::invalid_argument("temperature must be >= 0");
  if (temperature == 0.0) {
    return std::distance(probs.begin(), std::max_element(probs.begin(), probs.end()));
  }
  std::vector<double> w(probs.size());
  double total = 0.0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    w[i] = probs[i] > 0.0 ? std::pow(probs[i], 1.0 / temperature) : 0.0;
    total += w[i];
  }
  if (total <= 0.0) throw std::runtime_error("sample_categorical: degenerate distribution");
  const double u = rng.uniform() * total;
  double cum = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) {
    cum += w[i];
    if (u < cum) return static_cast<std::int64_t>(i);
  }
  for (std::size_t i = w.size(); i-- > 0;) {
    if (w[i] > 0.0) return static_cast<std::int64_t>(i);
  }
  return 0;
}

std::int64_t sample_logits(const std::vector<float>& logits, double temperature, Rng& rng) {
  if (temperature < 0.0) throw std::invalid_argument("temperature must be >= 0");
  if (temperature == 0.0) {
    return std::distance(logits.begin(), std::max_element(logits.begin(), logits.end()));
  }
  std::vector<double> probs(logits.size());
  double mx = logits[0];
  for (float v : logits) mx = std::max(mx, static_cast<double>(v));
  double total = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    probs[i] = std::exp((static_cast<double>(logits[i]) - mx) / temperature);
    total += probs[i];
  }
  const double u = rng.uniform() * total;
  double cum = 0.0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    cum += probs[i];
    if (u < cum) return static_cast<std::int64_t>(i);
  }
  return static_cast<std::int64_t>(probs.size()) - 1;
}

}  // namespace

StepGrid StepGrid::uniform(int steps) {
  if (steps < 1) throw std::invalid_argument("StepGrid: steps must be >= 1");
  StepGrid g;
  g.times.resize(static_cast<std::size_t>(steps) + 1);
  for (int k = 0; k <= steps; ++k) {
    g.times[static_cast<std::size_t>(k)] = 1.0 - static_cast<double>(k) / steps;
  }
  g.times.front() = 1.0;
  g.times.back() = 0.0;
  return g;
}

void StepGrid::validate() const {
  if (times.size() < 2 || times.front() != 1.0 || times.back() != 0.0) {
    throw std::invalid_argument("StepGrid: times must start at 1 and reach 0");
  }
  for (std::size_t i = 1; i < times.size(); ++i) {
    if (!(times[i] < times[i - 1])) {
      throw std::invalid_argument("StepGrid: times must be strictly decreasing");
    }
  }
}

ModelDenoiser::ModelDenoiser(Model<float>& model, std::int32_t mask_id)
    : model_(&model), mask_id_(mask_id) {
  if (model.spec().attention_mode != AttentionMode::bidirectional) {
    throw std::invalid_argument("ModelDenoiser: requires a bidirectional model");
  }
  if (mask_id < 0 || mask_id >= model.spec().vocab_size) {
    throw std::invalid_argument("ModelDenoiser: mask id outside vocab");
  }
}

std::int64_t ModelDenoiser::vocab() const { return model_->spec().vocab_size; }

std::vector<double> ModelDenoiser::predict(const std::vector<std::int32_t>& xt) {
  NoGradGuard<float> guard(*model_);
  Tensor<float> logits = model_->forward(TokenBatch::single(xt), /*dropout_on=*/false, Rng(0));
  const std::int64_t len = static_cast<std::int64_t>(xt.size());
  const std::int64_t k = model_->spec().vocab_size;
  const float* data = logits.values().data();
  std::vector<double> probs(static_cast<std::size_t>(len * k), 0.0);
  for (std::int64_t r = 0; r < len; ++r) {
    const float* row = data + r * k;
    double mx = -1e300;
    for (std::int64_t c = 0; c < k; ++c) {
      if (c == mask_id_) continue;
      mx = std::max(mx, static_cast<double>(row[c]));
    }
    double total = 0.0;
    double* prow = probs.data() + r * k;
    for (std::int64_t c = 0; c < k; ++c) {
      if (c == mask_id_) continue;
      prow[c] = std::exp(static_cast<double>(row[c]) - mx);
      total += prow[c];
    }
    for (std::int64_t c = 0; c < k; ++c) prow[c] /= total;
  }
  return probs;
}

TableDenoiser::TableDenoiser(DenoiserTable table, int clean_vocab)
    : table_(std::move(table)), clean_vocab_(clean_vocab) {
  if (clean_vocab < 1) throw std::invalid_argument("TableDenoiser: vocab must be >= 1");
}

std::vector<double> TableDenoiser::predict(const std::vector<std::int32_t>& xt) {
  const std::int64_t len = static_cast<std::int64_t>(xt.size());
  const std::int64_t k = clean_vocab_ + 1;
  std::vector<double> probs(static_cast<std::size_t>(len * k), 0.0);
  for (std::int64_t r = 0; r < len; ++r) {
    if (xt[static_cast<std::size_t>(r)] != mask_id()) continue;  // only masked rows are read
    const auto row = table_(xt, r);
    for (int c = 0; c < clean_vocab_; ++c) {
      probs[static_cast<std::size_t>(r * k + c)] = row[static_cast<std::size_t>(c)];
    }
  }
  return probs;
}

std::vector<std::int32_t> ar_generate(const Model<float>& model,
                                      const std::vector<std::int32_t>& prompt,
                                      std::int64_t gen_len, double temperature, bool use_cache,
                                      Rng rng) {
  if (model.spec().attention_mode != AttentionMode::causal) {
    throw std::invalid_argument("ar_generate: requires a causal model");
  }
  if (gen_len < 0) throw std::invalid_argument("ar_generate: gen_len must be >= 0");
  if (gen_len == 0) return prompt;
  if (prompt.empty()) {
    throw std::invalid_argument("ar_generate: prompt must be non-empty (seed with a start token)");
  }
  if (static_cast<std::int64_t>(prompt.size()) + gen_len > model.spec().seq_len) {
    throw std::invalid_argument("ar_generate: prompt + gen_len exceeds seq_len " +
                                std::to_string(model.spec().seq_len));
  }
  std::vector<std::int32_t> tokens = prompt;
  if (use_cache) {
    KvCache<float> cache(model);
    std::vector<float> logits;
    for (auto tok : prompt) logits = cache.forward_next(tok);
    for (std::int64_t g = 0; g < gen_len; ++g) {
      Rng step_rng = rng.fork(static_cast<std::uint64_t>(g));
      const auto next = static_cast<std::int32_t>(sample_logits(logits, temperature, step_rng));
      tokens.push_back(next);
      if (g + 1 < gen_len) logits = cache.forward_next(next);
    }
  } else {
    auto& mutable_model = const_cast<Model<float>&>(model);
    NoGradGuard<float> guard(mutable_model);
    for (std::int64_t g = 0; g < gen_len; ++g) {
      Tensor<float> all = model.forward(TokenBatch::single(tokens), false, Rng(0));
      const std::int64_t k = model.spec().vocab_size;
      const float* last = all.values().data() + (static_cast<std::int64_t>(tokens.size()) - 1) * k;
      std::vector<float> logits(last, last + k);
      Rng step_rng = rng.fork(static_cast<std::uint64_t>(g));
      tokens.push_back(static_cast<std::int32_t>(sample_logits(logits, temperature, step_rng)));
    }
  }
  return tokens;
}

std::vector<std::int32_t> reverse_step(Denoiser& denoiser, const std::vector<std::int32_t>& xt,
                                       double t, double s, const NoiseSchedule& schedule,
                                       double temperature, Rng rng) {
  if (!(s >= 0.0 && s < t && t <= 1.0)) {
    throw std::invalid_argument("reverse_step: need 0 <= s < t <= 1, got s=" + std::to_string(s) +
                                " t=" + std::to_string(t));
  }
  const std::int32_t mask = denoiser.mask_id();
  std::vector<std::int32_t> xs = xt;
  bool any_masked = false;
  for (auto tok : xt) any_masked = any_masked || tok == mask;
  if (!any_masked) return xs;

  const double remain = (1.0 - schedule.alpha(s)) / (1.0 - schedule.alpha(t));
  const auto probs = denoiser.predict(xt);
  const std::int64_t k = denoiser.vocab();
  for (std::size_t i = 0; i < xt.size(); ++i) {
    if (xt[i] != mask) continue;  // already revealed: stays fixed
    if (rng.uniform() < remain) continue;
    std::vector<double> row(probs.begin() + static_cast<std::int64_t>(i) * k,
                            probs.begin() + static_cast<std::int64_t>(i + 1) * k);
    xs[i] = static_cast<std::int32_t>(sample_categorical(row, temperature, rng));
  }
  return xs;
}

std::vector<std::int32_t> mdm_generate(Denoiser& denoiser, std::int64_t gen_len,
                                       const StepGrid& grid, const NoiseSchedule& schedule,
                                       double temperature, Rng rng,
                                       const std::vector<std::int32_t>* prompt) {
  grid.validate();
  if (gen_len < 1) throw std::invalid_argument("mdm_generate: gen_len must be >= 1");
  std::vector<std::int32_t> xt;
  if (prompt) {
    if (static_cast<std::int64_t>(prompt->size()) != gen_len) {
      throw std::invalid_argument("mdm_generate: prompt template length must equal gen_len");
    }
    xt = *prompt;
  } else {
    xt.assign(static_cast<std::size_t>(gen_len), denoiser.mask_id());
  }
  for (std::size_t step = 0; step + 1 < grid.times.size(); ++step) {
    xt = reverse_step(denoiser, xt, grid.times[step], grid.times[step + 1], schedule, temperature,
                      rng.fork(step));
  }
  return xt;
}

}  // namespace dlmlab
