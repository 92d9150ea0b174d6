#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "dlmlab/objectives.hpp"
#include "dlmlab/transformer.hpp"

namespace dlmlab {

inline constexpr char kCodeVersion[] = "dlmlab 0.1.0";

enum class Objective { ar, mdm, ar_input_noise };

std::string to_string(Objective objective);
Objective objective_from_string(const std::string& s);

struct TrainConfig {
  // model
  std::int64_t seq_len = 256;
  std::int64_t n_layers = 4;
  std::int64_t d_model = 128;
  std::int64_t n_heads = 4;
  double ffn_mult = 4.0;
  double dropout_prob = 0.0;
  double init_std = 0.02;
  double rope_base = 10000.0;
  bool qk_norm = true;
  bool bias_free = true;

  // objective
  Objective objective = Objective::ar;
  double mask_ratio = 0.0;  // input-noise ablation
  std::string schedule = "linear";
  int n_mc = 1;
  double t_epsilon = 1e-3;
  bool importance_t = false;
  bool min_one_mask = true;
  std::string normalize = "seq";  // seq | masked

  // data
  std::string train_path;
  std::string val_path;
  std::int64_t unique_tokens = 0;
  std::int64_t total_tokens = 0;
  std::int64_t batch_size = 32;
  std::string tier = "default";

  // optimization
  double peak_lr = 2e-4;
  double final_lr = 2e-5;
  std::int64_t warmup_steps = 1000;
  double decay_fraction = 0.1;
  std::int64_t total_steps = 0;  // 0 = derive from the token budget
  double weight_decay = 0.1;
  double grad_clip = 1.0;

  // cadence + eval
  std::int64_t eval_every = 50;
  std::int64_t checkpoint_every = 200;
  std::uint64_t seed = 0;
  std::int64_t eval_windows = 16;
  int eval_items = 128;
  int eval_ctx_chars = 48;
  int eval_cont_chars = 24;
  int eval_distractors = 3;
  int eval_mask_draws = 4;
  int val_mc_samples = 4;

  void validate() const;
  ModelSpec model_spec() const;  // attention mode follows the objective
  MdmLossOptions mdm_options() const;
};

// Flat key=value lines (# comments allowed) or a JSON object; detected by the
// first non-space character. Unknown keys are rejected.
TrainConfig parse_config_text(const std::string& text);
TrainConfig parse_config_file(const std::string& path);

std::map<std::string, std::string> config_to_map(const TrainConfig& cfg);
std::string config_to_text(const TrainConfig& cfg);

// ---------------------------------------------------------------- manifest

std::uint64_t fnv1a64(std::string_view bytes);

struct RunManifest {
  std::map<std::string, std::string> config;
  std::string code_version = kCodeVersion;
  std::uint64_t seed = 0;
  std::string started;
  std::string finished;
  struct FileEntry {
    std::string path;  // relative to the run directory
    std::uint64_t bytes = 0;
    std::string checksum;  // fnv1a64, hex
  };
  std::vector<FileEntry> files;

  std::string to_json() const;
  static RunManifest from_json(const std::string& text);
};

// Inventories every regular file under run_dir (excluding the manifest).
RunManifest build_manifest(const std::string& run_dir, const TrainConfig& cfg,
                           const std::string& started, const std::string& finished);

std::string iso_timestamp_now();

}  // namespace dlmlab
