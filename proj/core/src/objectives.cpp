#include "dlmlab/objectives.hpp"

#include <bit>
#include <cmath>
#include <numbers>
#include <stdexcept>

namespace dlmlab {

namespace {

template <typename S>
void require_mode(const Model<S>& model, AttentionMode mode, const char* op) {
  if (model.spec().attention_mode != mode) {
    throw std::invalid_argument(std::string(op) + ": requires a " + to_string(mode) + " model");
  }
}

std::vector<std::int32_t> shifted_targets(const TokenBatch& batch) {
  std::vector<std::int32_t> targets(batch.ids.size(), -1);
  for (std::int64_t r = 0; r < batch.rows; ++r) {
    for (std::int64_t c = 0; c + 1 < batch.cols; ++c) {
      targets[static_cast<std::size_t>(r * batch.cols + c)] =
          batch.ids[static_cast<std::size_t>(r * batch.cols + c + 1)];
    }
  }
  return targets;
}

}  // namespace

template <typename S>
LossResult<S> ar_loss(const Model<S>& model, const TokenBatch& batch, bool dropout_on, Rng rng) {
  require_mode(model, AttentionMode::causal, "ar_loss");
  Tensor<S> logits = model.forward(batch, dropout_on, rng.fork(0));
  const auto targets = shifted_targets(batch);
  auto ce = softmax_cross_entropy(logits, std::span<const std::int32_t>(targets),
                                  std::int32_t{-1});
  LossResult<S> out;
  out.loss = ce.loss;
  out.token_count = ce.count;
  out.mc_samples = 1;
  return out;
}

template <typename S>
LossResult<S> ar_loss_with_input_noise(const Model<S>& model, const TokenBatch& batch,
                                       double mask_ratio, std::int32_t mask_id, bool dropout_on,
                                       Rng rng) {
  require_mode(model, AttentionMode::causal, "ar_loss_with_input_noise");
  if (mask_ratio < 0.0 || mask_ratio >= 1.0) {
    throw std::invalid_argument("ar_loss_with_input_noise: mask_ratio must be in [0,1)");
  }
  TokenBatch noisy = batch;
  if (mask_ratio > 0.0) {
    Rng mask_rng = rng.fork(1);
    for (auto& id : noisy.ids) {
      if (mask_rng.uniform() < mask_ratio) id = mask_id;
    }
  }
  Tensor<S> logits = model.forward(noisy, dropout_on, rng.fork(0));
  const auto targets = shifted_targets(batch);  // targets stay clean
  auto ce = softmax_cross_entropy(logits, std::span<const std::int32_t>(targets),
                                  std::int32_t{-1});
  LossResult<S> out;
  out.loss = ce.loss;
  out.token_count = ce.count;
  out.mc_samples = 1;
  return out;
}

template <typename S>
LossResult<S> mdm_loss(const Model<S>& model, const TokenBatch& batch,
                       const NoiseSchedule& schedule, std::int32_t mask_id,
                       const MdmLossOptions& opts, bool dropout_on, Rng rng) {
  require_mode(model, AttentionMode::bidirectional, "mdm_loss");
  if (opts.n_mc < 1) throw std::invalid_argument("mdm_loss: n_mc must be >= 1");
  if (!(opts.t_epsilon > 0.0 && opts.t_epsilon < 1.0)) {
    throw std::invalid_argument("mdm_loss: t_epsilon must be in (0,1)");
  }
  if (opts.importance_sample_t && !schedule.is_linear()) {
    throw std::invalid_argument("mdm_loss: importance sampling of t requires the linear schedule");
  }
  const std::int64_t rows = batch.rows, cols = batch.cols;
  const double eps = opts.t_epsilon;
  const double log_inv_eps = std::log(1.0 / eps);

  LossResult<S> out;
  out.mc_samples = opts.n_mc;
  Tensor<S> total;
  for (int mc = 0; mc < opts.n_mc; ++mc) {
    TokenBatch corrupted = batch;
    std::vector<double> weights(batch.ids.size(), 0.0);
    for (std::int64_t r = 0; r < rows; ++r) {
      Rng seq_rng = rng.fork(static_cast<std::uint64_t>(mc)).fork(static_cast<std::uint64_t>(r));
      double t, factor;
      if (opts.importance_sample_t) {
        // t ~ 1/t on (eps,1]: inverse-CDF eps^(1-u); the weight folds into a constant.
        t = std::pow(eps, 1.0 - seq_rng.uniform());
        factor = log_inv_eps;
      } else {
        t = eps + (1.0 - eps) * seq_rng.uniform();
        factor = schedule.loss_weight(t);
      }
      out.t_values.push_back(t);
      std::vector<std::int32_t> row(batch.ids.begin() + r * cols,
                                    batch.ids.begin() + (r + 1) * cols);
      MaskedSample sample = corrupt(row, t, schedule, mask_id, seq_rng.fork(0), opts.min_one_mask);
      double divisor;
      if (opts.normalize == MdmNormalize::sequence) {
        divisor = static_cast<double>(rows * cols * opts.n_mc);
      } else {
        divisor = static_cast<double>(
            std::max<std::int64_t>(1, static_cast<std::int64_t>(sample.masked_positions.size())) *
            rows * opts.n_mc);
      }
      for (auto pos : sample.masked_positions) {
        corrupted.ids[static_cast<std::size_t>(r * cols + pos)] = mask_id;
        weights[static_cast<std::size_t>(r * cols + pos)] = factor / divisor;
        ++out.token_count;
      }
    }
    Tensor<S> logits = model.forward(corrupted, dropout_on, rng.fork(1000 + mc));
    auto ce = weighted_softmax_cross_entropy(logits, std::span<const std::int32_t>(batch.ids),
                                             std::span<const double>(weights));
    total = total.defined() ? add(total, ce.loss) : ce.loss;
  }
  out.loss = total;
  return out;
}

// ----------------------------------------------------------------- oracles

void TinyDistribution::validate() const {
  if (vocab < 1 || vocab > 4 || len < 1 || len > 6) {
    throw std::invalid_argument("TinyDistribution: limited to vocab <= 4, len <= 6");
  }
  if (outcomes.empty()) throw std::invalid_argument("TinyDistribution: no outcomes");
  double total = 0.0;
  for (const auto& [seq, p] : outcomes) {
    if (static_cast<int>(seq.size()) != len) {
      throw std::invalid_argument("TinyDistribution: outcome length mismatch");
    }
    for (auto tok : seq) {
      if (tok < 0 || tok >= vocab) throw std::invalid_argument("TinyDistribution: token range");
    }
    if (p <= 0.0) throw std::invalid_argument("TinyDistribution: probabilities must be positive");
    total += p;
  }
  if (std::abs(total - 1.0) > 1e-9) {
    throw std::invalid_argument("TinyDistribution: probabilities sum to " + std::to_string(total));
  }
}

DenoiserTable exact_denoiser(const TinyDistribution& dist) {
  dist.validate();
  const std::int32_t mask = dist.mask_id();
  const TinyDistribution copy = dist;
  return [copy, mask](const std::vector<std::int32_t>& xt, std::int64_t pos) {
    std::vector<double> probs(static_cast<std::size_t>(copy.vocab), 0.0);
    double norm = 0.0;
    for (const auto& [seq, p] : copy.outcomes) {
      bool consistent = true;
      for (std::size_t i = 0; i < seq.size(); ++i) {
        if (xt[i] != mask && xt[i] != seq[i]) {
          consistent = false;
          break;
        }
      }
      if (!consistent) continue;
      norm += p;
      probs[static_cast<std::size_t>(seq[static_cast<std::size_t>(pos)])] += p;
    }
    if (norm == 0.0) {
      throw std::invalid_argument("exact_denoiser: context never generated by the distribution");
    }
    for (auto& q : probs) q /= norm;
    return probs;
  };
}

DenoiserTable uniform_denoiser(int vocab) {
  return [vocab](const std::vector<std::int32_t>&, std::int64_t) {
    return std::vector<double>(static_cast<std::size_t>(vocab), 1.0 / vocab);
  };
}

DenoiserTable random_denoiser_table(int vocab, std::uint64_t seed) {
  return [vocab, seed](const std::vector<std::int32_t>& xt, std::int64_t pos) {
    Rng rng(seed, 0xD15EED);
    Rng key = rng.fork(static_cast<std::uint64_t>(pos));
    for (std::size_t i = 0; i < xt.size(); ++i) {
      key = key.fork(static_cast<std::uint64_t>(xt[i]) * 131 + i);
    }
    std::vector<double> probs(static_cast<std::size_t>(vocab));
    double total = 0.0;
    for (auto& p : probs) {
      p = -std::log(1.0 - key.uniform());  // Exp(1) draws -> Dirichlet(1) row
      total += p;
    }
    for (auto& p : probs) p /= total;
    return probs;
  };
}

std::pair<std::vector<double>, std::vector<double>> gauss_legendre_unit(int n) {
  if (n < 1) throw std::invalid_argument("gauss_legendre_unit: n must be >= 1");
  std::vector<double> nodes(static_cast<std::size_t>(n)), weights(static_cast<std::size_t>(n));
  for (int i = 0; i < (n + 1) / 2; ++i) {
    double x = std::cos(std::numbers::pi * (i + 0.75) / (n + 0.5));
    double dp = 0.0;
    for (int iter = 0; iter < 100; ++iter) {
      double p0 = 1.0, p1 = x;
      for (int k = 2; k <= n; ++k) {
        const double p2 = ((2.0 * k - 1.0) * x * p1 - (k - 1.0) * p0) / k;
        p0 = p1;
        p1 = p2;
      }
      dp = n * (x * p1 - p0) / (x * x - 1.0);
      const double dx = p1 / dp;
      x -= dx;
      if (std::abs(dx) < 1e-15) break;
    }
    const double w = 2.0 / ((1.0 - x * x) * dp * dp);
    nodes[static_cast<std::size_t>(i)] = (1.0 - x) / 2.0;  // map [-1,1] -> (0,1)
    nodes[static_cast<std::size_t>(n - 1 - i)] = (1.0 + x) / 2.0;
    weights[static_cast<std::size_t>(i)] = w / 2.0;
    weights[static_cast<std::size_t>(n - 1 - i)] = w / 2.0;
  }
  return {nodes, weights};
}

double mdm_loss_exact(const DenoiserTable& denoiser, const TinyDistribution& dist,
                      const NoiseSchedule& schedule, int quadrature_points) {
  dist.validate();
  if (quadrature_points < 8) {
    throw std::invalid_argument("mdm_loss_exact: needs at least 8 quadrature nodes");
  }
  const int len = dist.len;
  const auto [nodes, qweights] = gauss_legendre_unit(quadrature_points);

  // coeff[k] = integral of loss_weight(t) * alpha^(len-k) * (1-alpha)^k dt.
  // The k = 0 term carries no masked positions and is skipped.
  std::vector<double> coeff(static_cast<std::size_t>(len + 1), 0.0);
  for (int k = 1; k <= len; ++k) {
    double acc = 0.0;
    for (std::size_t i = 0; i < nodes.size(); ++i) {
      const double t = nodes[i];
      const double a = schedule.alpha(t);
      acc += qweights[i] * schedule.loss_weight(t) * std::pow(a, len - k) *
             std::pow(1.0 - a, k);
    }
    coeff[static_cast<std::size_t>(k)] = acc;
  }

  const auto patterns = enumerate_mask_patterns(len);
  const std::int32_t mask = dist.mask_id();
  double total = 0.0;
  for (const auto& [x0, p] : dist.outcomes) {
    for (auto pattern : patterns) {
      if (pattern == 0) continue;
      const int k = std::popcount(pattern);
      const auto xt = apply_pattern(x0, pattern, mask);
      double inner = 0.0;
      for (int i = 0; i < len; ++i) {
        if (!(pattern & (std::uint32_t{1} << i))) continue;
        const auto probs = denoiser(xt, i);
        inner += -std::log(std::max(probs[static_cast<std::size_t>(x0[static_cast<std::size_t>(i)])],
                                    1e-300));
      }
      total += p * coeff[static_cast<std::size_t>(k)] * inner;
    }
  }
  return total;
}

#define DLMLAB_INSTANTIATE_OBJECTIVES(S)                                                       \
  template LossResult<S> ar_loss(const Model<S>&, const TokenBatch&, bool, Rng);               \
  template LossResult<S> ar_loss_with_input_noise(const Model<S>&, const TokenBatch&, double,  \
                                                  std::int32_t, bool, Rng);                    \
  template LossResult<S> mdm_loss(const Model<S>&, const TokenBatch&, const NoiseSchedule&,    \
                                  std::int32_t, const MdmLossOptions&, bool, Rng);

DLMLAB_INSTANTIATE_OBJECTIVES(float)
DLMLAB_INSTANTIATE_OBJECTIVES(double)

#undef DLMLAB_INSTANTIATE_OBJECTIVES

}  // namespace dlmlab
