#include "dlmlab/cli.hpp"

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "dlmlab/checkpoint.hpp"
#include "dlmlab/config.hpp"
#include "dlmlab/data.hpp"
#include "dlmlab/eval.hpp"
#include "dlmlab/flops.hpp"
#include "dlmlab/sampler.hpp"
#include "dlmlab/trainer.hpp"

namespace dlmlab {

namespace fs = std::filesystem;

namespace {

void set_threads(int threads) {
#ifdef _OPENMP
  if (threads > 0) omp_set_num_threads(threads);
#else
  (void)threads;
#endif
}

std::vector<std::string> split_list(const std::string& csv) {
  std::vector<std::string> out;
  std::stringstream ss(csv);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

int cmd_train(const std::string& config_path, const std::string& out_dir, bool resume) {
  const TrainConfig cfg = parse_config_file(config_path);
  const std::string run_dir =
      out_dir.empty() ? (fs::path("runs") / fs::path(config_path).stem()).string() : out_dir;
  const TrainResult result = train(cfg, run_dir, resume);
  if (result.aborted) {
    std::cerr << "train aborted: " << result.message << "\n";
    return 1;
  }
  std::cout << "completed " << result.steps_completed << "/" << result.total_steps
            << " steps; metrics at " << result.metrics_path << "\n";
  return 0;
}

int cmd_eval(const std::string& ckpt_path, const std::string& items_path,
             const std::string& objective, const std::string& val_path,
             const std::string& out_path, std::int64_t val_windows) {
  auto loaded = load_checkpoint(ckpt_path);
  Model<float>& model = loaded.model;
  const ObjectiveKind kind =
      objective.empty()
          ? (model.spec().attention_mode == AttentionMode::causal ? ObjectiveKind::ar
                                                                  : ObjectiveKind::mdm)
          : (objective == "ar" ? ObjectiveKind::ar : ObjectiveKind::mdm);
  const NoiseSchedule schedule = NoiseSchedule::linear();
  EvalSettings settings;
  const auto items = load_mc_items_jsonl(items_path);
  const McResult mc = mc_accuracy(model, kind, schedule, items, settings);

  NllRecord rec;
  rec.nll_truth = mc.nll_truth;
  rec.nll_others = mc.nll_others;
  rec.delta = mc.delta;
  rec.accuracy = mc.accuracy;
  if (!val_path.empty()) {
    ValStream val(val_path, model.spec().seq_len);
    rec.val_ce = validation_ce(model, kind, schedule, val, val_windows, settings);
  }
  std::cout << "items_scored=" << mc.scored << " items_skipped=" << mc.skipped
            << " accuracy=" << mc.accuracy << " nll_truth=" << mc.nll_truth
            << " nll_others=" << mc.nll_others << " delta=" << mc.delta;
  if (!val_path.empty()) std::cout << " val_ce=" << rec.val_ce;
  std::cout << "\n";
  if (!out_path.empty()) {
    write_file(out_path, delta_nll_csv(std::span<const NllRecord>(&rec, 1)));
  }
  return 0;
}

int cmd_generate(const std::string& ckpt_path, const std::string& prompt, std::int64_t gen_len,
                 int steps, double temperature, std::uint64_t seed, bool no_cache) {
  auto loaded = load_checkpoint(ckpt_path);
  Model<float>& model = loaded.model;
  Rng rng(seed, 0x9E4);
  std::vector<std::int32_t> out_tokens;
  if (model.spec().attention_mode == AttentionMode::causal) {
    std::vector<std::int32_t> seeded;
    seeded.push_back(Vocab::bos);
    const auto prompt_ids = tokenize(prompt);
    seeded.insert(seeded.end(), prompt_ids.begin(), prompt_ids.end());
    out_tokens = ar_generate(model, seeded, gen_len, temperature, !no_cache, rng);
  } else {
    const auto prompt_ids = tokenize(prompt);
    std::vector<std::int32_t> tmpl = prompt_ids;
    tmpl.resize(prompt_ids.size() + static_cast<std::size_t>(gen_len), Vocab::mask);
    ModelDenoiser denoiser(model, Vocab::mask);
    out_tokens = mdm_generate(denoiser, static_cast<std::int64_t>(tmpl.size()),
                              StepGrid::uniform(steps), NoiseSchedule::linear(), temperature, rng,
                              &tmpl);
  }
  const auto text = detokenize(out_tokens);
  std::cout << text.text << "\n";
  return 0;
}

int cmd_flops(std::int64_t seq_len, std::int64_t steps, std::int64_t prompt_len,
              std::int64_t d_model, std::int64_t n_layers, std::int64_t n_heads, double ffn_mult,
              std::int64_t vocab, const std::string& json_path, const std::string& sweep_path) {
  ModelSpec spec = flops_reference_spec();
  if (d_model > 0) spec.d_model = d_model;
  if (n_layers > 0) spec.n_layers = n_layers;
  if (n_heads > 0) spec.n_heads = n_heads;
  if (ffn_mult > 0) spec.ffn_mult = ffn_mult;
  if (vocab > 0) spec.vocab_size = vocab;
  spec.seq_len = std::max(spec.seq_len, prompt_len + seq_len);

  const FlopsReport mdm = infer_flops_mdm(spec, seq_len, steps);
  const FlopsReport ar_cached = infer_flops_ar(spec, prompt_len, seq_len, true);
  const FlopsReport ar_uncached = infer_flops_ar(spec, prompt_len, seq_len, false);

  nlohmann::json j;
  j["spec"] = {{"d_model", spec.d_model}, {"n_layers", spec.n_layers},
               {"n_heads", spec.n_heads}, {"ffn_hidden", spec.ffn_hidden()},
               {"vocab_size", spec.vocab_size}};
  j["mdm"] = nlohmann::json::parse(mdm.to_json());
  j["ar_cached"] = nlohmann::json::parse(ar_cached.to_json());
  j["ar_uncached"] = nlohmann::json::parse(ar_uncached.to_json());
  j["ratio_mdm_over_ar_cached"] = mdm.total / ar_cached.total;
  const std::string text = j.dump(2);
  std::cout << text << "\n";
  if (!json_path.empty()) write_file(json_path, text + "\n");
  if (!sweep_path.empty()) {
    std::vector<std::int64_t> lengths;
    for (std::int64_t len = 16; len <= 4096; len *= 2) lengths.push_back(len);
    write_file(sweep_path, flops_sweep_csv(spec, lengths));
  }
  return 0;
}

int cmd_suite(const std::string& config_path, const std::string& budgets_csv,
              const std::string& paradigms_csv, const std::string& out_dir) {
  const TrainConfig base = parse_config_file(config_path);
  std::vector<std::int64_t> budgets;
  for (const auto& b : split_list(budgets_csv)) budgets.push_back(std::stoll(b));
  const auto paradigms = split_list(paradigms_csv);
  const SuiteResult result = run_crossover_suite(base, budgets, paradigms, out_dir);
  bool all_ok = true;
  for (const auto& entry : result.entries) {
    std::cout << entry.name << (entry.ok ? " ok: " : " FAILED: ") << entry.message << "\n";
    all_ok = all_ok && entry.ok;
  }
  std::cout << "aggregate at " << result.aggregate_path << "\n";
  return all_ok ? 0 : 1;
}

}  // namespace

std::string emit_plots(const std::vector<std::string>& run_dirs, const std::string& out_dir) {
  fs::create_directories(out_dir);
  std::string report;
  std::string curves = "step,series,metric,value\n";
  std::string overlay = "step,series,metric,value\n";
  std::string delta = "step,series,metric,value\n";
  int usable = 0;

  for (const auto& dir : run_dirs) {
    const std::string series = fs::path(dir).filename().string();
    const fs::path metrics_path = fs::path(dir) / "metrics.csv";
    if (!fs::exists(metrics_path)) {
      report += "missing metrics: " + dir + "\n";
      continue;
    }
    ++usable;
    std::ifstream is(metrics_path);
    std::string line;
    std::getline(is, line);  // header
    while (std::getline(is, line)) {
      std::vector<std::string> cols = split_list(line);
      // split_list drops empty fields, so re-split carefully.
      cols.clear();
      std::size_t start = 0;
      while (true) {
        const auto comma = line.find(',', start);
        cols.push_back(line.substr(start, comma - start));
        if (comma == std::string::npos) break;
        start = comma + 1;
      }
      if (cols.size() < 9) continue;
      const std::string& step = cols[0];
      curves += step + ',' + series + ",train_loss," + cols[2] + '\n';
      if (!cols[4].empty()) {
        curves += step + ',' + series + ",val_ce," + cols[4] + '\n';
        overlay += step + ',' + series + ",val_ce," + cols[4] + '\n';
      }
      if (!cols[5].empty()) {
        curves += step + ',' + series + ",mc_accuracy," + cols[5] + '\n';
        overlay += step + ',' + series + ",mc_accuracy," + cols[5] + '\n';
      }
    }
    const fs::path delta_path = fs::path(dir) / "delta_nll.csv";
    if (fs::exists(delta_path)) {
      std::ifstream ds(delta_path);
      std::getline(ds, line);
      while (std::getline(ds, line)) {
        std::size_t start = 0;
        std::vector<std::string> cols;
        while (true) {
          const auto comma = line.find(',', start);
          cols.push_back(line.substr(start, comma - start));
          if (comma == std::string::npos) break;
          start = comma + 1;
        }
        if (cols.size() < 6) continue;
        delta += cols[0] + ',' + series + ",nll_truth," + cols[1] + '\n';
        delta += cols[0] + ',' + series + ",nll_others," + cols[2] + '\n';
        delta += cols[0] + ',' + series + ",delta," + cols[3] + '\n';
        delta += cols[0] + ',' + series + ",val_ce," + cols[4] + '\n';
        delta += cols[0] + ',' + series + ",accuracy," + cols[5] + '\n';
      }
    }
  }
  if (usable == 0) throw std::runtime_error("emit_plots: no run directory with metrics.csv");

  write_file((fs::path(out_dir) / "crossover_curves.csv").string(), curves);
  write_file((fs::path(out_dir) / "put_together.csv").string(), overlay);
  write_file((fs::path(out_dir) / "delta_nll_series.csv").string(), delta);
  std::vector<std::int64_t> lengths;
  for (std::int64_t len = 64; len <= 4096; len *= 2) lengths.push_back(len);
  write_file((fs::path(out_dir) / "flops_sweep.csv").string(),
             flops_sweep_csv(flops_reference_spec(), lengths));
  report += "wrote 4 bundles to " + out_dir + " from " + std::to_string(usable) + " runs\n";
  return report;
}

int run_cli(const std::vector<std::string>& args) {
  CLI::App app{"desk-scale lab for autoregressive vs masked-diffusion language models"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kCodeVersion);

  int threads = 0;
  app.add_option("--threads", threads, "worker thread count (0 = library default)");

  // train
  auto* train_cmd = app.add_subcommand("train", "run one training job from a config file");
  std::string config_path, out_dir;
  bool resume = false;
  train_cmd->add_option("--config", config_path, "key=value or JSON config")->required();
  train_cmd->add_option("--out", out_dir, "run directory (default runs/<config stem>)");
  train_cmd->add_flag("--resume", resume, "continue from checkpoints/latest.ckpt");

  // eval
  auto* eval_cmd = app.add_subcommand("eval", "score multiple-choice items with a checkpoint");
  std::string ckpt_path, items_path, objective, val_path, eval_out;
  std::int64_t val_windows = 16;
  eval_cmd->add_option("--checkpoint", ckpt_path, "model checkpoint")->required();
  eval_cmd->add_option("--items", items_path, "JSONL multiple-choice items")->required();
  eval_cmd->add_option("--objective", objective, "ar | mdm (default: checkpoint mode)");
  eval_cmd->add_option("--val", val_path, "held-out file for validation cross-entropy");
  eval_cmd->add_option("--val-windows", val_windows, "windows per validation pass");
  eval_cmd->add_option("--out", eval_out, "write a one-row delta-NLL CSV here");

  // generate
  auto* gen_cmd = app.add_subcommand("generate", "sample text from a checkpoint");
  std::string gen_ckpt, prompt;
  std::int64_t gen_len = 64;
  int gen_steps = 64;
  double temperature = 0.0;
  std::uint64_t gen_seed = 0;
  bool no_cache = false;
  gen_cmd->add_option("--checkpoint", gen_ckpt, "model checkpoint")->required();
  gen_cmd->add_option("--prompt", prompt, "prompt text (may be empty)");
  gen_cmd->add_option("--gen-len", gen_len, "tokens to generate");
  gen_cmd->add_option("--steps", gen_steps, "reverse-process steps (diffusion checkpoints)");
  gen_cmd->add_option("--temperature", temperature, "0 = argmax");
  gen_cmd->add_option("--seed", gen_seed, "sampling seed");
  gen_cmd->add_flag("--no-cache", no_cache, "disable KV caching (causal checkpoints)");

  // flops
  auto* flops_cmd = app.add_subcommand("flops", "analytic FLOPs reports and sweeps");
  std::int64_t seq_len = 512, steps = 1, prompt_len = 0;
  std::int64_t d_model = 0, n_layers = 0, n_heads = 0, vocab = 0;
  double ffn_mult = 0.0;
  std::string json_path, sweep_path;
  flops_cmd->add_option("--seq-len", seq_len, "generation length");
  flops_cmd->add_option("--steps", steps, "diffusion sampling steps");
  flops_cmd->add_option("--prompt-len", prompt_len, "prompt length for the AR rows");
  flops_cmd->add_option("--d-model", d_model, "override the reference width");
  flops_cmd->add_option("--n-layers", n_layers, "override the reference depth");
  flops_cmd->add_option("--n-heads", n_heads, "override the reference head count");
  flops_cmd->add_option("--ffn-mult", ffn_mult, "override the reference FFN multiplier");
  flops_cmd->add_option("--vocab", vocab, "override the reference vocab");
  flops_cmd->add_option("--json", json_path, "also write the JSON report here");
  flops_cmd->add_option("--sweep", sweep_path, "write a length sweep CSV here");

  // suite
  auto* suite_cmd = app.add_subcommand("suite", "run a (budget x paradigm) crossover grid");
  std::string suite_config, budgets_csv, paradigms_csv = "ar,mdm", suite_out = "suite";
  suite_cmd->add_option("--config", suite_config, "base config")->required();
  suite_cmd->add_option("--budgets", budgets_csv, "comma-separated unique-token budgets")
      ->required();
  suite_cmd->add_option("--paradigms", paradigms_csv, "comma-separated objectives");
  suite_cmd->add_option("--out", suite_out, "suite directory");

  // emit-plots
  auto* plots_cmd = app.add_subcommand("emit-plots", "derive tidy plot CSVs from run metrics");
  std::string runs_csv, suite_dir, plots_out = "plots";
  plots_cmd->add_option("--runs", runs_csv, "comma-separated run directories");
  plots_cmd->add_option("--suite", suite_dir, "suite directory (expands to its runs/)");
  plots_cmd->add_option("--out", plots_out, "output directory");

  std::vector<std::string> argv_list = args;
  try {
    std::vector<const char*> argv;
    argv.push_back("dlmlab");
    for (const auto& a : argv_list) argv.push_back(a.c_str());
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  set_threads(threads);
  try {
    if (train_cmd->parsed()) return cmd_train(config_path, out_dir, resume);
    if (eval_cmd->parsed()) {
      return cmd_eval(ckpt_path, items_path, objective, val_path, eval_out, val_windows);
    }
    if (gen_cmd->parsed()) {
      return cmd_generate(gen_ckpt, prompt, gen_len, gen_steps, temperature, gen_seed, no_cache);
    }
    if (flops_cmd->parsed()) {
      return cmd_flops(seq_len, steps, prompt_len, d_model, n_layers, n_heads, ffn_mult, vocab,
                       json_path, sweep_path);
    }
    if (suite_cmd->parsed()) {
      return cmd_suite(suite_config, budgets_csv, paradigms_csv, suite_out);
    }
    if (plots_cmd->parsed()) {
      std::vector<std::string> runs = split_list(runs_csv);
      if (!suite_dir.empty()) {
        for (const auto& entry : fs::directory_iterator(fs::path(suite_dir) / "runs")) {
          if (entry.is_directory()) runs.push_back(entry.path().string());
        }
        std::sort(runs.begin(), runs.end());
      }
      std::cout << emit_plots(runs, plots_out);
      return 0;
    }
  } catch (const std::invalid_argument& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}

}  // namespace dlmlab
