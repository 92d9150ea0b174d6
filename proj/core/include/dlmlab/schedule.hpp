#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "dlmlab/rng.hpp"

namespace dlmlab {

// Monotone noise schedule: alpha(t) is the probability a token is still
// clean at level t, with alpha(0) = 1 and alpha(1) = 0 exactly.
class NoiseSchedule {
 public:
  static NoiseSchedule linear();
  static NoiseSchedule custom(std::string name, std::function<double(double)> alpha,
                              std::function<double(double)> alpha_prime);

  double alpha(double t) const;        // t in [0,1]
  double alpha_prime(double t) const;  // d alpha / dt
  // Positive weight -alpha'(t) / (1 - alpha(t)); exactly 1/t for the linear
  // schedule. t in (0,1]; t = 0 is rejected (the weight is unbounded there).
  double loss_weight(double t) const;

  const std::string& name() const { return name_; }
  bool is_linear() const { return linear_; }

 private:
  NoiseSchedule() = default;
  std::string name_;
  bool linear_ = false;
  std::function<double(double)> alpha_;
  std::function<double(double)> alpha_prime_;
};

// Config-string selection ("linear" is the only built-in).
NoiseSchedule parse_schedule(const std::string& config);

struct MaskedSample {
  std::vector<std::int32_t> x0;
  std::vector<std::int32_t> xt;
  std::vector<std::int64_t> masked_positions;
  double t = 0.0;
};

// Independently masks each position with probability 1 - alpha(t). When
// min_one_mask is set and no position was masked, one uniformly chosen
// position is forced (training convenience; biases the estimator slightly).
MaskedSample corrupt(const std::vector<std::int32_t>& x0, double t, const NoiseSchedule& schedule,
                     std::int32_t mask_id, Rng rng, bool min_one_mask = false);

// All 2^L mask patterns as bitmasks (bit i set = position i masked), in
// increasing numeric order. Oracle use only; L <= 20.
std::vector<std::uint32_t> enumerate_mask_patterns(int len);

std::vector<std::int64_t> pattern_indices(std::uint32_t pattern, int len);

// alpha^(L-|pattern|) * (1-alpha)^|pattern| -- the forward-kernel probability
// of one exact mask pattern.
double pattern_probability(const NoiseSchedule& schedule, double t, std::uint32_t pattern, int len);

// Applies a pattern to a clean sequence.
std::vector<std::int32_t> apply_pattern(const std::vector<std::int32_t>& x0, std::uint32_t pattern,
                                        std::int32_t mask_id);

}  // namespace dlmlab
