#include "dlmlab/trainer.hpp"

#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "dlmlab/checkpoint.hpp"
#include "dlmlab/eval.hpp"
#include "dlmlab/flops.hpp"
#include "dlmlab/objectives.hpp"
#include "dlmlab/parallel.hpp"

namespace dlmlab {

namespace fs = std::filesystem;

double lr_at(const TrainConfig& cfg, std::int64_t step) {
  const std::int64_t total = cfg.total_steps;
  if (total <= 0) throw std::invalid_argument("lr_at: total_steps must be resolved and positive");
  if (step < 0 || step > total) {
    throw std::invalid_argument("lr_at: step " + std::to_string(step) + " outside [0," +
                                std::to_string(total) + "]");
  }
  const std::int64_t decay_steps = std::llround(cfg.decay_fraction * static_cast<double>(total));
  const std::int64_t decay_start = total - decay_steps;
  if (cfg.warmup_steps > decay_start) {
    throw std::invalid_argument("lr_at: warmup and decay phases overlap");
  }
  if (step <= cfg.warmup_steps && cfg.warmup_steps > 0) {
    return cfg.peak_lr * static_cast<double>(step) / static_cast<double>(cfg.warmup_steps);
  }
  if (step <= decay_start || decay_steps == 0) return cfg.peak_lr;
  if (cfg.final_lr <= 0.0) {
    throw std::invalid_argument("lr_at: geometric decay needs final_lr > 0");
  }
  const double frac = static_cast<double>(step - decay_start) / static_cast<double>(decay_steps);
  return cfg.peak_lr * std::pow(cfg.final_lr / cfg.peak_lr, frac);
}

// ------------------------------------------------------------------- adamw

AdamW::AdamW(std::vector<NamedParam<float>>& params, double beta1, double beta2, double eps)
    : params_(&params), beta1_(beta1), beta2_(beta2), eps_(eps) {
  m_.reserve(params.size());
  v_.reserve(params.size());
  for (const auto& p : params) {
    m_.emplace_back(static_cast<std::size_t>(p.tensor.numel()), 0.0f);
    v_.emplace_back(static_cast<std::size_t>(p.tensor.numel()), 0.0f);
  }
}

double AdamW::step(double lr, double weight_decay, double grad_clip) {
  double sq_norm = 0.0;
  for (auto& p : *params_) {
    if (!p.tensor.has_grad()) continue;
    for (float g : p.tensor.grad()) sq_norm += static_cast<double>(g) * static_cast<double>(g);
  }
  const double norm = std::sqrt(sq_norm);
  if (grad_clip > 0.0 && norm > grad_clip) {
    const float scale = static_cast<float>(grad_clip / norm);
    for (auto& p : *params_) {
      if (!p.tensor.has_grad()) continue;
      auto g = p.tensor.grad_raw();
      parallel_chunks(static_cast<std::int64_t>(g.size()), [&](std::int64_t lo, std::int64_t hi) {
        for (std::int64_t i = lo; i < hi; ++i) g[static_cast<std::size_t>(i)] *= scale;
      });
    }
  }
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t pi = 0; pi < params_->size(); ++pi) {
    auto& p = (*params_)[pi];
    auto theta = p.tensor.raw();
    const bool has_grad = p.tensor.has_grad();
    const auto grad = has_grad ? p.tensor.grad() : std::span<const float>{};
    float* m = m_[pi].data();
    float* v = v_[pi].data();
    parallel_chunks(static_cast<std::int64_t>(theta.size()), [&](std::int64_t lo, std::int64_t hi) {
      for (std::int64_t i = lo; i < hi; ++i) {
        const auto u = static_cast<std::size_t>(i);
        const double g = has_grad ? static_cast<double>(grad[u]) : 0.0;
        const double mi = beta1_ * static_cast<double>(m[u]) + (1.0 - beta1_) * g;
        const double vi = beta2_ * static_cast<double>(v[u]) + (1.0 - beta2_) * g * g;
        m[u] = static_cast<float>(mi);
        v[u] = static_cast<float>(vi);
        const double update = (mi / bc1) / (std::sqrt(vi / bc2) + eps_) +
                              weight_decay * static_cast<double>(theta[u]);
        theta[u] = static_cast<float>(static_cast<double>(theta[u]) - lr * update);
      }
    });
  }
  return norm;
}

void AdamW::zero_grad() {
  for (auto& p : *params_) p.tensor.zero_grad();
}

namespace {

template <typename T>
void put(std::vector<std::uint8_t>& out, const T& v) {
  const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
  out.insert(out.end(), p, p + sizeof(T));
}

template <typename T>
T take(const std::uint8_t*& cursor, const std::uint8_t* end) {
  if (cursor + sizeof(T) > end) throw std::runtime_error("trainer state: truncated blob");
  T v;
  std::memcpy(&v, cursor, sizeof(T));
  cursor += sizeof(T);
  return v;
}

}  // namespace

std::vector<std::uint8_t> AdamW::serialize() const {
  std::vector<std::uint8_t> out;
  put(out, t_);
  put(out, static_cast<std::int64_t>(m_.size()));
  for (std::size_t pi = 0; pi < m_.size(); ++pi) {
    put(out, static_cast<std::int64_t>(m_[pi].size()));
    const auto* mb = reinterpret_cast<const std::uint8_t*>(m_[pi].data());
    out.insert(out.end(), mb, mb + m_[pi].size() * sizeof(float));
    const auto* vb = reinterpret_cast<const std::uint8_t*>(v_[pi].data());
    out.insert(out.end(), vb, vb + v_[pi].size() * sizeof(float));
  }
  return out;
}

void AdamW::restore(const std::uint8_t*& cursor, const std::uint8_t* end) {
  t_ = take<std::int64_t>(cursor, end);
  const auto count = take<std::int64_t>(cursor, end);
  if (count != static_cast<std::int64_t>(m_.size())) {
    throw std::runtime_error("trainer state: optimizer parameter count mismatch");
  }
  for (std::size_t pi = 0; pi < m_.size(); ++pi) {
    const auto n = take<std::int64_t>(cursor, end);
    if (n != static_cast<std::int64_t>(m_[pi].size())) {
      throw std::runtime_error("trainer state: moment size mismatch");
    }
    const std::size_t bytes = m_[pi].size() * sizeof(float);
    if (cursor + 2 * bytes > end) throw std::runtime_error("trainer state: truncated moments");
    std::memcpy(m_[pi].data(), cursor, bytes);
    cursor += bytes;
    std::memcpy(v_[pi].data(), cursor, bytes);
    cursor += bytes;
  }
}

// ------------------------------------------------------------------- train

namespace {

constexpr std::int64_t kTrailerMagic = 0x314E5254;  // "TRN1"

struct TrainerState {
  std::int64_t step = 0;
  std::int64_t tokens_seen = 0;
  BatchStream::Cursor cursor;
  std::int64_t val_cursor = 0;
};

std::vector<std::uint8_t> pack_trailer(const TrainerState& st, const AdamW& opt) {
  std::vector<std::uint8_t> out;
  put(out, kTrailerMagic);
  put(out, st.step);
  put(out, st.tokens_seen);
  put(out, st.cursor.epoch);
  put(out, st.cursor.pos);
  put(out, st.cursor.delivered);
  put(out, st.cursor.batch_index);
  put(out, st.val_cursor);
  const auto opt_blob = opt.serialize();
  out.insert(out.end(), opt_blob.begin(), opt_blob.end());
  return out;
}

TrainerState unpack_trailer(const std::vector<std::uint8_t>& blob, AdamW& opt) {
  const std::uint8_t* cursor = blob.data();
  const std::uint8_t* end = blob.data() + blob.size();
  if (take<std::int64_t>(cursor, end) != kTrailerMagic) {
    throw std::runtime_error("trainer state: bad trailer magic");
  }
  TrainerState st;
  st.step = take<std::int64_t>(cursor, end);
  st.tokens_seen = take<std::int64_t>(cursor, end);
  st.cursor.epoch = take<std::int64_t>(cursor, end);
  st.cursor.pos = take<std::int64_t>(cursor, end);
  st.cursor.delivered = take<std::int64_t>(cursor, end);
  st.cursor.batch_index = take<std::int64_t>(cursor, end);
  st.val_cursor = take<std::int64_t>(cursor, end);
  opt.restore(cursor, end);
  return st;
}

std::string format_metric(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

// Drops rows with step > keep_step from an existing CSV (resume support).
void truncate_csv_to_step(const std::string& path, std::int64_t keep_step) {
  if (!fs::exists(path)) return;
  std::ifstream is(path);
  std::string line, kept;
  bool header = true;
  while (std::getline(is, line)) {
    if (header) {
      kept = line + "\n";
      header = false;
      continue;
    }
    const auto comma = line.find(',');
    if (comma == std::string::npos) continue;
    if (std::stoll(line.substr(0, comma)) <= keep_step) kept += line + "\n";
  }
  is.close();
  write_file(path, kept);
}

}  // namespace

TrainResult train(const TrainConfig& cfg_in, const std::string& run_dir, bool resume) {
  TrainConfig cfg = cfg_in;
  cfg.validate();
  const std::string started = iso_timestamp_now();
  fs::create_directories(fs::path(run_dir) / "checkpoints");

  BudgetedCorpus corpus{cfg.train_path, cfg.unique_tokens, cfg.total_tokens,
                        cfg.seq_len,    cfg.seed,          cfg.tier};
  BatchStream stream(corpus, cfg.batch_size);
  ValStream val(cfg.val_path, cfg.seq_len);
  if (cfg.total_steps == 0) cfg.total_steps = stream.total_batches();
  write_file((fs::path(run_dir) / "config.txt").string(), config_to_text(cfg));

  Model<float> model(cfg.model_spec(), Rng(cfg.seed, 0x0DE1));
  AdamW opt(model.params());
  const NoiseSchedule schedule = parse_schedule(cfg.schedule);
  const ObjectiveKind eval_kind =
      cfg.objective == Objective::mdm ? ObjectiveKind::mdm : ObjectiveKind::ar;

  EvalSettings eval_settings;
  eval_settings.seed = cfg.seed;
  eval_settings.mask_draws = cfg.eval_mask_draws;
  eval_settings.val_mc_samples = cfg.val_mc_samples;
  const auto items = synth_cloze_items(val.text(), cfg.eval_items, cfg.eval_ctx_chars,
                                       cfg.eval_cont_chars, cfg.eval_distractors, cfg.seed);

  const std::string metrics_path = (fs::path(run_dir) / "metrics.csv").string();
  const std::string delta_path = (fs::path(run_dir) / "delta_nll.csv").string();
  const std::string latest_path = (fs::path(run_dir) / "checkpoints" / "latest.ckpt").string();

  TrainerState state;
  if (resume) {
    if (!fs::exists(latest_path)) {
      throw std::runtime_error("train: resume requested but no checkpoint at " + latest_path);
    }
    auto loaded = load_checkpoint(latest_path);
    if (loaded.trailer.empty()) throw std::runtime_error("train: checkpoint has no trainer state");
    for (std::size_t i = 0; i < model.params().size(); ++i) {
      auto dst = model.params()[i].tensor.raw();
      const auto src = loaded.model.params()[i].tensor.values();
      std::copy(src.begin(), src.end(), dst.begin());
    }
    state = unpack_trailer(loaded.trailer, opt);
    stream.restore(state.cursor);
    val.set_cursor(state.val_cursor);
    truncate_csv_to_step(metrics_path, state.step);
    truncate_csv_to_step(delta_path, state.step);
  } else {
    write_file(metrics_path,
               "step,epoch,train_loss,lr,val_ce,mc_accuracy,delta_nll,tokens_seen,flops_estimate\n");
    write_file(delta_path, "step,nll_truth,nll_others,delta,val_ce,accuracy\n");
  }

  std::ofstream metrics(metrics_path, std::ios::app);
  std::ofstream delta_csv(delta_path, std::ios::app);
  Rng master(cfg.seed, 0x57E9);

  TrainResult result;
  result.total_steps = cfg.total_steps;
  result.metrics_path = metrics_path;

  auto save_state = [&](const std::string& path) {
    save_checkpoint(path, model, pack_trailer(state, opt));
  };

  for (std::int64_t step = state.step + 1; step <= cfg.total_steps; ++step) {
    auto batch = stream.next();
    if (!batch) break;
    Rng step_rng = master.fork(static_cast<std::uint64_t>(step));

    LossResult<float> loss;
    switch (cfg.objective) {
      case Objective::ar:
        loss = ar_loss(model, batch->tokens, cfg.dropout_prob > 0, step_rng);
        break;
      case Objective::ar_input_noise:
        loss = ar_loss_with_input_noise(model, batch->tokens, cfg.mask_ratio, Vocab::mask,
                                        cfg.dropout_prob > 0, step_rng);
        break;
      case Objective::mdm:
        loss = mdm_loss(model, batch->tokens, schedule, Vocab::mask, cfg.mdm_options(),
                        cfg.dropout_prob > 0, step_rng);
        break;
    }
    const double loss_value = static_cast<double>(loss.loss.item());
    if (!std::isfinite(loss_value)) {
      result.aborted = true;
      result.message = "non-finite loss " + std::to_string(loss_value) + " at step " +
                       std::to_string(step) + "; last checkpoint kept at step " +
                       std::to_string(state.step);
      break;
    }
    backward(loss.loss);
    const double lr = lr_at(cfg, step);
    opt.step(lr, cfg.weight_decay, cfg.grad_clip);
    opt.zero_grad();

    state.step = step;
    state.tokens_seen += batch->tokens.rows * batch->tokens.cols;
    state.cursor = stream.cursor();

    std::string val_s, acc_s, delta_s;
    const bool do_eval =
        (cfg.eval_every > 0 && step % cfg.eval_every == 0) || step == cfg.total_steps;
    if (do_eval) {
      const double vce =
          validation_ce(model, eval_kind, schedule, val, cfg.eval_windows, eval_settings);
      state.val_cursor = val.cursor();
      const McResult mc = mc_accuracy(model, eval_kind, schedule, items, eval_settings);
      NllRecord rec{step, mc.nll_truth, mc.nll_others, mc.delta, vce, mc.accuracy};
      delta_csv << step << ',' << format_metric(rec.nll_truth) << ','
                << format_metric(rec.nll_others) << ',' << format_metric(rec.delta) << ','
                << format_metric(rec.val_ce) << ',' << format_metric(rec.accuracy) << '\n';
      delta_csv.flush();
      val_s = format_metric(vce);
      acc_s = format_metric(mc.accuracy);
      delta_s = format_metric(mc.delta);
    }
    const double flops = train_flops(cfg.model_spec(), static_cast<double>(state.tokens_seen)).total;
    metrics << step << ',' << format_metric(batch->epoch) << ',' << format_metric(loss_value)
            << ',' << format_metric(lr) << ',' << val_s << ',' << acc_s << ',' << delta_s << ','
            << state.tokens_seen << ',' << format_metric(flops) << '\n';
    metrics.flush();

    result.steps_completed = step;
    const bool do_checkpoint =
        (cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0) || step == cfg.total_steps;
    if (do_checkpoint) {
      char name[32];
      std::snprintf(name, sizeof name, "step_%08lld.ckpt", static_cast<long long>(step));
      save_state((fs::path(run_dir) / "checkpoints" / name).string());
      save_state(latest_path);
    }
  }

  const RunManifest manifest = build_manifest(run_dir, cfg, started, iso_timestamp_now());
  write_file((fs::path(run_dir) / "manifest.json").string(), manifest.to_json());
  return result;
}

SuiteResult run_crossover_suite(const TrainConfig& base, const std::vector<std::int64_t>& budgets,
                                const std::vector<std::string>& paradigms,
                                const std::string& suite_dir) {
  if (budgets.empty() || paradigms.empty()) {
    throw std::invalid_argument("run_crossover_suite: budgets and paradigms must be non-empty");
  }
  fs::create_directories(suite_dir);
  SuiteResult result;
  for (const auto& paradigm : paradigms) {
    for (const auto budget : budgets) {
      SuiteEntry entry;
      entry.name = paradigm + "_u" + std::to_string(budget);
      entry.run_dir = (fs::path(suite_dir) / "runs" / entry.name).string();
      TrainConfig cfg = base;
      cfg.objective = objective_from_string(paradigm);
      cfg.unique_tokens = budget;
      cfg.total_steps = 0;  // re-derive per budget
      try {
        const TrainResult r = train(cfg, entry.run_dir);
        entry.ok = !r.aborted;
        entry.message = r.aborted ? r.message : "completed " + std::to_string(r.steps_completed) +
                                                    " steps";
      } catch (const std::exception& e) {
        entry.ok = false;
        entry.message = e.what();
      }
      result.entries.push_back(std::move(entry));
    }
  }

  result.aggregate_path = (fs::path(suite_dir) / "aggregate.csv").string();
  std::string agg =
      "run,paradigm,unique_tokens,step,epoch,train_loss,lr,val_ce,mc_accuracy,delta_nll,"
      "tokens_seen,flops_estimate\n";
  for (const auto& entry : result.entries) {
    if (!entry.ok) continue;
    const auto pos = entry.name.rfind("_u");
    const std::string paradigm = entry.name.substr(0, pos);
    const std::string budget = entry.name.substr(pos + 2);
    std::ifstream is(fs::path(entry.run_dir) / "metrics.csv");
    std::string line;
    bool header = true;
    while (std::getline(is, line)) {
      if (header) {
        header = false;
        continue;
      }
      agg += entry.name + ',' + paradigm + ',' + budget + ',' + line + '\n';
    }
  }
  write_file(result.aggregate_path, agg);

  std::string report;
  for (const auto& entry : result.entries) {
    report += entry.name + (entry.ok ? " ok " : " FAILED ") + entry.message + "\n";
  }
  write_file((fs::path(suite_dir) / "suite_report.txt").string(), report);
  return result;
}

}  // namespace dlmlab
