#include "dlmlab/schedule.hpp"

#include <bit>
#include <cmath>
#include <stdexcept>

namespace dlmlab {

NoiseSchedule NoiseSchedule::linear() {
  NoiseSchedule s;
  s.name_ = "linear";
  s.linear_ = true;
  s.alpha_ = [](double t) { return 1.0 - t; };
  s.alpha_prime_ = [](double) { return -1.0; };
  return s;
}

NoiseSchedule NoiseSchedule::custom(std::string name, std::function<double(double)> alpha,
                                    std::function<double(double)> alpha_prime) {
  if (alpha(0.0) != 1.0 || alpha(1.0) != 0.0) {
    throw std::invalid_argument("NoiseSchedule: endpoints must be alpha(0)=1, alpha(1)=0");
  }
  NoiseSchedule s;
  s.name_ = std::move(name);
  s.alpha_ = std::move(alpha);
  s.alpha_prime_ = std::move(alpha_prime);
  return s;
}

double NoiseSchedule::alpha(double t) const {
  if (!(t >= 0.0 && t <= 1.0)) {
    throw std::invalid_argument("alpha: t=" + std::to_string(t) + " outside [0,1]");
  }
  if (t == 0.0) return 1.0;
  if (t == 1.0) return 0.0;
  return alpha_(t);
}

double NoiseSchedule::alpha_prime(double t) const {
  if (!(t >= 0.0 && t <= 1.0)) {
    throw std::invalid_argument("alpha_prime: t=" + std::to_string(t) + " outside [0,1]");
  }
  return alpha_prime_(t);
}

double NoiseSchedule::loss_weight(double t) const {
  if (!(t > 0.0 && t <= 1.0)) {
    throw std::invalid_argument("loss_weight: t=" + std::to_string(t) +
                                " outside (0,1]; the weight is unbounded at 0");
  }
  if (linear_) return 1.0 / t;
  return -alpha_prime_(t) / (1.0 - alpha(t));
}

NoiseSchedule parse_schedule(const std::string& config) {
  if (config == "linear") return NoiseSchedule::linear();
  throw std::invalid_argument("unknown schedule: " + config);
}

MaskedSample corrupt(const std::vector<std::int32_t>& x0, double t, const NoiseSchedule& schedule,
                     std::int32_t mask_id, Rng rng, bool min_one_mask) {
  if (!(t > 0.0 && t <= 1.0)) {
    throw std::invalid_argument("corrupt: t=" + std::to_string(t) + " outside (0,1]");
  }
  for (auto tok : x0) {
    if (tok == mask_id) {
      throw std::invalid_argument("corrupt: input already contains the mask symbol");
    }
  }
  const double keep = schedule.alpha(t);
  MaskedSample s;
  s.x0 = x0;
  s.xt = x0;
  s.t = t;
  for (std::size_t i = 0; i < x0.size(); ++i) {
    if (rng.uniform() >= keep) {
      s.xt[i] = mask_id;
      s.masked_positions.push_back(static_cast<std::int64_t>(i));
    }
  }
  if (min_one_mask && s.masked_positions.empty() && !x0.empty()) {
    const auto pos = static_cast<std::int64_t>(rng.below(x0.size()));
    s.xt[static_cast<std::size_t>(pos)] = mask_id;
    s.masked_positions.push_back(pos);
  }
  return s;
}

std::vector<std::uint32_t> enumerate_mask_patterns(int len) {
  if (len < 0 || len > 20) {
    throw std::invalid_argument("enumerate_mask_patterns: L=" + std::to_string(len) +
                                " outside [0,20]");
  }
  const std::uint64_t count = std::uint64_t{1} << len;
  std::vector<std::uint32_t> patterns(count);
  for (std::uint64_t p = 0; p < count; ++p) patterns[p] = static_cast<std::uint32_t>(p);
  return patterns;
}

std::vector<std::int64_t> pattern_indices(std::uint32_t pattern, int len) {
  std::vector<std::int64_t> idx;
  for (int i = 0; i < len; ++i) {
    if (pattern & (std::uint32_t{1} << i)) idx.push_back(i);
  }
  return idx;
}

double pattern_probability(const NoiseSchedule& schedule, double t, std::uint32_t pattern,
                           int len) {
  if (len < 0 || len > 20 || (len < 32 && (pattern >> len) != 0)) {
    throw std::invalid_argument("pattern_probability: pattern outside [0,2^L)");
  }
  const double a = schedule.alpha(t);
  const int masked = std::popcount(pattern);
  return std::pow(a, len - masked) * std::pow(1.0 - a, masked);
}

std::vector<std::int32_t> apply_pattern(const std::vector<std::int32_t>& x0, std::uint32_t pattern,
                                        std::int32_t mask_id) {
  std::vector<std::int32_t> xt = x0;
  for (std::size_t i = 0; i < x0.size(); ++i) {
    if (pattern & (std::uint32_t{1} << i)) xt[i] = mask_id;
  }
  return xt;
}

}  // namespace dlmlab
