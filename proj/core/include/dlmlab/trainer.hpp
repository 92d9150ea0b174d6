#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dlmlab/config.hpp"
#include "dlmlab/data.hpp"
#include "dlmlab/transformer.hpp"

namespace dlmlab {

// Warmup-stable-decay: linear 0 -> peak over warmup_steps, constant peak,
// then geometric decay over the final decay_fraction of steps hitting
// final_lr exactly at total_steps. Requires cfg.total_steps > 0.
double lr_at(const TrainConfig& cfg, std::int64_t step);

// Adam with decoupled weight decay; moments in float, update math in double.
class AdamW {
 public:
  explicit AdamW(std::vector<NamedParam<float>>& params, double beta1 = 0.9, double beta2 = 0.95,
                 double eps = 1e-8);

  // Scales gradients to grad_clip when the global norm exceeds it (0 = off),
  // applies one update, and returns the pre-clip global norm.
  double step(double lr, double weight_decay, double grad_clip);
  void zero_grad();
  std::int64_t step_count() const { return t_; }

  std::vector<std::uint8_t> serialize() const;
  void restore(const std::uint8_t*& cursor, const std::uint8_t* end);

 private:
  std::vector<NamedParam<float>>* params_;
  double beta1_, beta2_, eps_;
  std::int64_t t_ = 0;
  std::vector<std::vector<float>> m_, v_;
};

struct TrainResult {
  std::int64_t steps_completed = 0;
  std::int64_t total_steps = 0;
  bool aborted = false;
  std::string message;
  std::string metrics_path;
};

// Runs the full loop in run_dir: metrics.csv (one row per step), delta_nll.csv
// (one row per evaluation), checkpoints/, config.txt and manifest.json.
// With resume=true, picks up bit-exactly from checkpoints/latest.ckpt.
TrainResult train(const TrainConfig& cfg, const std::string& run_dir, bool resume = false);

struct SuiteEntry {
  std::string name;
  std::string run_dir;
  bool ok = false;
  std::string message;
};

struct SuiteResult {
  std::vector<SuiteEntry> entries;
  std::string aggregate_path;
};

// One run per (budget, paradigm) with shared seeds; partial failures are
// recorded and the suite continues. Metrics are joined into aggregate.csv.
SuiteResult run_crossover_suite(const TrainConfig& base, const std::vector<std::int64_t>& budgets,
                                const std::vector<std::string>& paradigms,
                                const std::string& suite_dir);

}  // namespace dlmlab
