#pragma once

#include <cstdint>
#include <vector>

#include "dlmlab/objectives.hpp"
#include "dlmlab/schedule.hpp"
#include "dlmlab/transformer.hpp"

namespace dlmlab {

// Decreasing times 1 = t_0 > t_1 > ... > t_N = 0 for the reverse process.
struct StepGrid {
  std::vector<double> times;

  static StepGrid uniform(int steps);  // t_k = 1 - k/steps
  void validate() const;               // throws unless strictly decreasing, 1 -> 0
  int steps() const { return static_cast<int>(times.size()) - 1; }
};

// Per-position data-prediction distribution given a corrupted sequence.
class Denoiser {
 public:
  virtual ~Denoiser() = default;
  virtual std::int64_t vocab() const = 0;  // includes the mask symbol
  virtual std::int32_t mask_id() const = 0;
  // Row-major [len x vocab] probabilities of the clean token per position;
  // the mask column is always zero.
  virtual std::vector<double> predict(const std::vector<std::int32_t>& xt) = 0;
};

// Softmax of a bidirectional model's logits with the mask column excluded.
class ModelDenoiser : public Denoiser {
 public:
  ModelDenoiser(Model<float>& model, std::int32_t mask_id);
  std::int64_t vocab() const override;
  std::int32_t mask_id() const override { return mask_id_; }
  std::vector<double> predict(const std::vector<std::int32_t>& xt) override;

 private:
  Model<float>* model_;
  std::int32_t mask_id_;
};

// Adapter over an explicit conditional table (tiny oracle instances).
class TableDenoiser : public Denoiser {
 public:
  TableDenoiser(DenoiserTable table, int clean_vocab);
  std::int64_t vocab() const override { return clean_vocab_ + 1; }
  std::int32_t mask_id() const override { return clean_vocab_; }
  std::vector<double> predict(const std::vector<std::int32_t>& xt) override;

 private:
  DenoiserTable table_;
  int clean_vocab_;
};

// Sequential ancestral decoding; temperature 0 is argmax. The cached and
// uncached paths draw from the same stream and emit identical tokens for a
// given seed. The prompt must be non-empty when gen_len > 0.
std::vector<std::int32_t> ar_generate(const Model<float>& model,
                                      const std::vector<std::int32_t>& prompt,
                                      std::int64_t gen_len, double temperature, bool use_cache,
                                      Rng rng);

// One reverse-kernel step from level t to s < t: revealed tokens stay fixed;
// each masked position stays masked with probability (1-alpha(s))/(1-alpha(t))
// and otherwise reveals a token drawn from the denoiser's distribution.
std::vector<std::int32_t> reverse_step(Denoiser& denoiser, const std::vector<std::int32_t>& xt,
                                       double t, double s, const NoiseSchedule& schedule,
                                       double temperature, Rng rng);

// Runs the reverse process from the fully masked sequence (or from `prompt`,
// whose non-mask entries act as clean conditioning) down the grid; the result
// contains no mask symbols.
std::vector<std::int32_t> mdm_generate(Denoiser& denoiser, std::int64_t gen_len,
                                       const StepGrid& grid, const NoiseSchedule& schedule,
                                       double temperature, Rng rng,
                                       const std::vector<std::int32_t>* prompt = nullptr);

}  // namespace dlmlab
