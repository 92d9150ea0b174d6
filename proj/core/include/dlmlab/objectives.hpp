#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "dlmlab/schedule.hpp"
#include "dlmlab/transformer.hpp"

namespace dlmlab {

template <typename S>
struct LossResult {
  Tensor<S> loss;                // scalar graph node, finite, >= 0
  std::int64_t token_count = 0;  // positions contributing to the loss
  int mc_samples = 0;
  std::vector<double> t_values;  // noise levels drawn, one per (sample, sequence)
};

// Mean next-token NLL over all rows x (cols-1) teacher-forced predictions.
// Rows of length 1 produce a zero loss with token_count 0.
template <typename S>
LossResult<S> ar_loss(const Model<S>& model, const TokenBatch& batch, bool dropout_on, Rng rng);

// Same targets as ar_loss, but each input token is independently replaced by
// the mask symbol with probability mask_ratio before the forward pass.
// mask_ratio 0 reproduces ar_loss bit-for-bit under the same rng.
template <typename S>
LossResult<S> ar_loss_with_input_noise(const Model<S>& model, const TokenBatch& batch,
                                       double mask_ratio, std::int32_t mask_id, bool dropout_on,
                                       Rng rng);

enum class MdmNormalize { sequence, masked };

struct MdmLossOptions {
  int n_mc = 1;
  double t_epsilon = 1e-3;           // t drawn uniformly from (t_epsilon, 1]
  bool importance_sample_t = false;  // draw t proportional to 1/t (linear schedule only)
  bool min_one_mask = true;          // training convenience; biases the estimator
  MdmNormalize normalize = MdmNormalize::sequence;
};

// Monte Carlo masked-denoising loss: per sequence and draw, sample a noise
// level, corrupt, and accumulate loss_weight(t) * sum of masked-position NLL,
// normalized per options (sequence scale divides by cols).
template <typename S>
LossResult<S> mdm_loss(const Model<S>& model, const TokenBatch& batch,
                       const NoiseSchedule& schedule, std::int32_t mask_id,
                       const MdmLossOptions& opts, bool dropout_on, Rng rng);

// ---------------------------------------------------------------- oracles

// Explicit distribution over sequences for exact, enumeration-sized checks.
// Tokens live in [0, vocab); the mask symbol for corrupted views is `vocab`.
struct TinyDistribution {
  int vocab = 2;
  int len = 2;
  std::vector<std::pair<std::vector<std::int32_t>, double>> outcomes;

  std::int32_t mask_id() const { return vocab; }
  void validate() const;  // probabilities positive and summing to ~1
};

// Probabilities over [0, vocab) for the clean token at `pos` given a
// corrupted sequence (entries equal to the mask id are hidden).
using DenoiserTable =
    std::function<std::vector<double>(const std::vector<std::int32_t>& xt, std::int64_t pos)>;

// The true conditionals p(x0[pos] | unmasked entries of xt) of `dist`.
DenoiserTable exact_denoiser(const TinyDistribution& dist);

DenoiserTable uniform_denoiser(int vocab);

// A deterministic pseudo-random conditional table (Dirichlet-like rows keyed
// on (xt, pos, seed)); always properly normalized.
DenoiserTable random_denoiser_table(int vocab, std::uint64_t seed);

// Exact sequence-level expected denoising loss: full 2^len mask-pattern
// enumeration, with the noise-level integral taken by Gauss-Legendre
// quadrature on (0,1). Per-token value is result / len. Instances are
// limited to vocab <= 4, len <= 6.
double mdm_loss_exact(const DenoiserTable& denoiser, const TinyDistribution& dist,
                      const NoiseSchedule& schedule, int quadrature_points);

// Gauss-Legendre nodes/weights on (0,1); exposed for quadrature checks.
std::pair<std::vector<double>, std::vector<double>> gauss_legendre_unit(int n);

}  // namespace dlmlab
