#include "dlmlab/eval.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <stdexcept>

#include "dlmlab/objectives.hpp"

namespace dlmlab {

namespace {

using nlohmann::json;

class NoGradGuard {
 public:
  explicit NoGradGuard(Model<float>& model) : model_(&model) { model_->set_requires_grad(false); }
  ~NoGradGuard() { model_->set_requires_grad(true); }

 private:
  Model<float>* model_;
};

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

}  // namespace

void McItem::validate() const {
  if (options.size() < 2) throw std::invalid_argument("McItem: needs at least 2 options");
  if (answer < 0 || answer >= static_cast<int>(options.size())) {
    throw std::invalid_argument("McItem: answer index " + std::to_string(answer) +
                                " outside options");
  }
}

std::vector<McItem> load_mc_items_jsonl(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open " + path);
  std::vector<McItem> items;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    json j = json::parse(line);
    McItem item;
    item.context = j.at("context").get<std::string>();
    item.options = j.at("options").get<std::vector<std::string>>();
    item.answer = j.at("answer").get<int>();
    item.validate();
    items.push_back(std::move(item));
  }
  return items;
}

void save_mc_items_jsonl(const std::string& path, std::span<const McItem> items) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw std::runtime_error("cannot open " + path + " for writing");
  for (const auto& item : items) {
    json j;
    j["context"] = item.context;
    j["options"] = item.options;
    j["answer"] = item.answer;
    os << j.dump() << '\n';
  }
}

namespace {

// AR: exact NLL of the option tokens given the context, teacher-forced.
double ar_option_nll(Model<float>& model, const std::vector<std::int32_t>& ctx,
                     const std::vector<std::int32_t>& opt) {
  NoGradGuard guard(model);
  std::vector<std::int32_t> seq = ctx;
  seq.insert(seq.end(), opt.begin(), opt.end());
  Tensor<float> logits = model.forward(TokenBatch::single(seq), false, Rng(0));
  std::vector<std::int32_t> targets(seq.size(), -1);
  for (std::size_t j = ctx.size(); j < seq.size(); ++j) targets[j - 1] = seq[j];
  const auto nll = row_nll(logits, std::span<const std::int32_t>(targets));
  double total = 0.0;
  for (double v : nll) total += v;
  return total;
}

// mdm: denoising-bound estimate on a fixed (t, draw) design. All variants of
// one option share a forward batch; context positions are never masked.
double mdm_option_nll(Model<float>& model, const NoiseSchedule& schedule,
                      const std::vector<std::int32_t>& ctx, const std::vector<std::int32_t>& opt,
                      const EvalSettings& eval, std::uint64_t item_salt) {
  NoGradGuard guard(model);
  const std::int64_t ctx_len = static_cast<std::int64_t>(ctx.size());
  const std::int64_t opt_len = static_cast<std::int64_t>(opt.size());
  const std::int64_t len = ctx_len + opt_len;
  const int variants = static_cast<int>(eval.t_grid.size()) * eval.mask_draws;

  TokenBatch batch;
  batch.rows = variants;
  batch.cols = len;
  batch.ids.reserve(static_cast<std::size_t>(variants * len));
  std::vector<double> weights;
  weights.reserve(static_cast<std::size_t>(variants * len));
  std::vector<std::int32_t> targets;
  targets.reserve(static_cast<std::size_t>(variants * len));

  Rng base = Rng(eval.seed, 0xE7A1).fork(item_salt);
  for (std::size_t g = 0; g < eval.t_grid.size(); ++g) {
    const double t = eval.t_grid[g];
    const double keep = schedule.alpha(t);
    const double w = schedule.loss_weight(t);
    for (int d = 0; d < eval.mask_draws; ++d) {
      Rng draw = base.fork(g * 131 + static_cast<std::uint64_t>(d));
      batch.ids.insert(batch.ids.end(), ctx.begin(), ctx.end());
      targets.insert(targets.end(), ctx.size(), -1);
      weights.insert(weights.end(), ctx.size(), 0.0);
      for (std::int64_t i = 0; i < opt_len; ++i) {
        const bool masked = draw.uniform() >= keep;
        batch.ids.push_back(masked ? Vocab::mask : opt[static_cast<std::size_t>(i)]);
        targets.push_back(opt[static_cast<std::size_t>(i)]);
        weights.push_back(masked ? w : 0.0);
      }
    }
  }
  Tensor<float> logits = model.forward(batch, false, Rng(0));
  const auto nll = row_nll(logits, std::span<const std::int32_t>(targets));
  double total = 0.0;
  for (std::size_t i = 0; i < nll.size(); ++i) {
    if (weights[i] != 0.0) total += weights[i] * nll[i];
  }
  return total / variants;
}

}  // namespace

double option_nll(Model<float>& model, ObjectiveKind kind, const NoiseSchedule& schedule,
                  std::string_view context, std::string_view option, const EvalSettings& eval,
                  std::uint64_t item_salt) {
  if (option.empty()) throw std::invalid_argument("option_nll: empty option");
  std::vector<std::int32_t> ctx;
  ctx.push_back(Vocab::bos);
  {
    auto ids = tokenize(context);
    ctx.insert(ctx.end(), ids.begin(), ids.end());
  }
  const auto opt = tokenize(option);
  const std::int64_t len = static_cast<std::int64_t>(ctx.size() + opt.size());
  if (len > model.spec().seq_len) {
    throw std::length_error("option_nll: item of " + std::to_string(len) +
                            " tokens exceeds seq_len " + std::to_string(model.spec().seq_len));
  }
  const double chars = static_cast<double>(option.size());  // char normalization divisor
  if (kind == ObjectiveKind::ar) {
    return ar_option_nll(model, ctx, opt) / chars;
  }
  return mdm_option_nll(model, schedule, ctx, opt, eval, item_salt) / chars;
}

McResult mc_accuracy(Model<float>& model, ObjectiveKind kind, const NoiseSchedule& schedule,
                     std::span<const McItem> items, const EvalSettings& eval) {
  if (items.empty()) throw std::invalid_argument("mc_accuracy: no items");
  McResult result;
  double truth_sum = 0.0, others_sum = 0.0;
  std::int64_t correct = 0;
  for (std::size_t idx = 0; idx < items.size(); ++idx) {
    const McItem& item = items[idx];
    item.validate();
    std::vector<double> nll(item.options.size());
    try {
      for (std::size_t o = 0; o < item.options.size(); ++o) {
        nll[o] = option_nll(model, kind, schedule, item.context, item.options[o], eval,
                            static_cast<std::uint64_t>(idx));
      }
    } catch (const std::length_error&) {
      ++result.skipped;
      continue;
    }
    std::size_t pick = 0;
    for (std::size_t o = 1; o < nll.size(); ++o) {
      if (nll[o] < nll[pick]) pick = o;  // ties keep the lowest index
    }
    if (static_cast<int>(pick) == item.answer) ++correct;
    truth_sum += nll[static_cast<std::size_t>(item.answer)];
    double others = 0.0;
    for (std::size_t o = 0; o < nll.size(); ++o) {
      if (static_cast<int>(o) != item.answer) others += nll[o];
    }
    others_sum += others / static_cast<double>(nll.size() - 1);
    ++result.scored;
  }
  if (result.scored == 0) throw std::runtime_error("mc_accuracy: every item was skipped");
  result.accuracy = static_cast<double>(correct) / static_cast<double>(result.scored);
  result.nll_truth = truth_sum / static_cast<double>(result.scored);
  result.nll_others = others_sum / static_cast<double>(result.scored);
  result.delta = result.nll_others - result.nll_truth;
  return result;
}

double validation_ce(Model<float>& model, ObjectiveKind kind, const NoiseSchedule& schedule,
                     ValStream& val, std::int64_t n_windows, const EvalSettings& eval) {
  if (n_windows < 1) throw std::invalid_argument("validation_ce: n_windows must be >= 1");
  const auto windows = val.next_windows(n_windows);
  TokenBatch batch;
  batch.rows = static_cast<std::int64_t>(windows.size());
  batch.cols = static_cast<std::int64_t>(windows.front().size());
  for (const auto& w : windows) batch.ids.insert(batch.ids.end(), w.begin(), w.end());

  NoGradGuard guard(model);
  if (kind == ObjectiveKind::ar) {
    auto result = ar_loss(model, batch, /*dropout_on=*/false, Rng(eval.seed, 0xCE));
    return static_cast<double>(result.loss.item());
  }
  MdmLossOptions opts;
  opts.n_mc = eval.val_mc_samples;
  opts.min_one_mask = false;  // unbiased bound for reporting
  auto result = mdm_loss(model, batch, schedule, Vocab::mask, opts, /*dropout_on=*/false,
                         Rng(eval.seed, 0xCE));
  return static_cast<double>(result.loss.item());
}

std::string delta_nll_csv(std::span<const NllRecord> records) {
  std::string out = "step,nll_truth,nll_others,delta,val_ce,accuracy\n";
  for (const auto& r : records) {
    out += std::to_string(r.step) + ',' + format_double(r.nll_truth) + ',' +
           format_double(r.nll_others) + ',' + format_double(r.delta) + ',' +
           format_double(r.val_ce) + ',' + format_double(r.accuracy) + '\n';
  }
  return out;
}

std::vector<McItem> synth_cloze_items(std::string_view heldout, int n_items, int context_chars,
                                      int continuation_chars, int n_distractors,
                                      std::uint64_t seed) {
  if (n_items < 1 || context_chars < 1 || continuation_chars < 1 || n_distractors < 1) {
    throw std::invalid_argument("synth_cloze_items: all sizes must be >= 1");
  }
  const std::int64_t span = context_chars + continuation_chars;
  if (static_cast<std::int64_t>(heldout.size()) < span + continuation_chars) {
    throw std::invalid_argument("synth_cloze_items: held-out text too small");
  }
  Rng rng(seed, 0xC102E);
  std::vector<McItem> items;
  items.reserve(static_cast<std::size_t>(n_items));
  const std::uint64_t max_start = heldout.size() - static_cast<std::size_t>(span);
  const std::uint64_t max_dstart = heldout.size() - static_cast<std::size_t>(continuation_chars);
  for (int i = 0; i < n_items; ++i) {
    Rng r = rng.fork(static_cast<std::uint64_t>(i));
    const auto start = static_cast<std::size_t>(r.below(max_start + 1));
    McItem item;
    item.context = std::string(heldout.substr(start, static_cast<std::size_t>(context_chars)));
    const std::string truth(heldout.substr(start + static_cast<std::size_t>(context_chars),
                                           static_cast<std::size_t>(continuation_chars)));
    std::vector<std::string> distractors;
    while (static_cast<int>(distractors.size()) < n_distractors) {
      const auto ds = static_cast<std::size_t>(r.below(max_dstart + 1));
      std::string cand(heldout.substr(ds, static_cast<std::size_t>(continuation_chars)));
      if (cand == truth) continue;
      distractors.push_back(std::move(cand));
    }
    item.answer = static_cast<int>(r.below(static_cast<std::uint64_t>(n_distractors) + 1));
    for (int o = 0, d = 0; o <= n_distractors; ++o) {
      if (o == item.answer) {
        item.options.push_back(truth);
      } else {
        item.options.push_back(distractors[static_cast<std::size_t>(d++)]);
      }
    }
    items.push_back(std::move(item));
  }
  return items;
}

}  // namespace dlmlab
