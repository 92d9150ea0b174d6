#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "dlmlab/data.hpp"
#include "dlmlab/schedule.hpp"
#include "dlmlab/transformer.hpp"

namespace dlmlab {

struct McItem {
  std::string context;
  std::vector<std::string> options;
  int answer = 0;

  void validate() const;  // >= 2 options, valid answer index
};

// One JSON object per line: {"context": str, "options": [str], "answer": int}.
std::vector<McItem> load_mc_items_jsonl(const std::string& path);
void save_mc_items_jsonl(const std::string& path, std::span<const McItem> items);

enum class ObjectiveKind { ar, mdm };

struct EvalSettings {
  std::vector<double> t_grid{0.25, 0.5, 0.75};  // noise levels per option
  int mask_draws = 4;                           // corruption draws per level
  int val_mc_samples = 4;                       // draws per window for the bound
  std::uint64_t seed = 0;
};

// Per-character NLL of `option` following `context` (a bos token is
// prepended). AR scores the exact teacher-forced NLL; mdm scores the
// denoising bound on a fixed (t_grid x mask_draws) design shared across the
// options of an item, masking only option positions. Throws
// std::length_error when the item does not fit the model's seq_len.
double option_nll(Model<float>& model, ObjectiveKind kind, const NoiseSchedule& schedule,
                  std::string_view context, std::string_view option, const EvalSettings& eval,
                  std::uint64_t item_salt);

struct McResult {
  double accuracy = 0.0;
  double nll_truth = 0.0;   // mean per-char NLL of ground-truth options
  double nll_others = 0.0;  // mean per-char NLL of the other options
  double delta = 0.0;       // nll_others - nll_truth
  std::int64_t scored = 0;
  std::int64_t skipped = 0;  // items that did not fit
};

// Argmin-NLL selection with ties broken toward the lowest option index.
McResult mc_accuracy(Model<float>& model, ObjectiveKind kind, const NoiseSchedule& schedule,
                     std::span<const McItem> items, const EvalSettings& eval);

// Held-out cross-entropy: AR reports the exact mean next-token NLL, mdm the
// Monte Carlo denoising bound with seeds fixed by `eval.seed`. The two are
// bounds of different quantities and are never cross-compared.
double validation_ce(Model<float>& model, ObjectiveKind kind, const NoiseSchedule& schedule,
                     ValStream& val, std::int64_t n_windows, const EvalSettings& eval);

struct NllRecord {
  std::int64_t step = 0;
  double nll_truth = 0.0;
  double nll_others = 0.0;
  double delta = 0.0;
  double val_ce = 0.0;
  double accuracy = 0.0;
};

std::string delta_nll_csv(std::span<const NllRecord> records);

// Cloze items cut from held-out text: a context span, its true continuation,
// and distractor continuations sampled from elsewhere in the text.
std::vector<McItem> synth_cloze_items(std::string_view heldout, int n_items, int context_chars,
                                      int continuation_chars, int n_distractors,
                                      std::uint64_t seed);

}  // namespace dlmlab
