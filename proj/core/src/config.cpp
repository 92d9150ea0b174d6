#include "dlmlab/config.hpp"

#include <nlohmann/json.hpp>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "dlmlab/data.hpp"

namespace dlmlab {

namespace fs = std::filesystem;
using nlohmann::json;

std::string to_string(Objective objective) {
  switch (objective) {
    case Objective::ar: return "ar";
    case Objective::mdm: return "mdm";
    case Objective::ar_input_noise: return "ar+input_noise";
  }
  return "ar";
}

Objective objective_from_string(const std::string& s) {
  if (s == "ar") return Objective::ar;
  if (s == "mdm") return Objective::mdm;
  if (s == "ar+input_noise" || s == "ar_input_noise") return Objective::ar_input_noise;
  throw std::invalid_argument("unknown objective: " + s);
}

void TrainConfig::validate() const {
  model_spec().validate();
  if (mask_ratio < 0.0 || mask_ratio >= 1.0) {
    throw std::invalid_argument("config: mask_ratio must be in [0,1)");
  }
  if (normalize != "seq" && normalize != "masked") {
    throw std::invalid_argument("config: normalize must be seq or masked");
  }
  if (n_mc < 1) throw std::invalid_argument("config: n_mc must be >= 1");
  if (batch_size < 1) throw std::invalid_argument("config: batch_size must be >= 1");
  if (unique_tokens <= 0 || total_tokens <= 0 || unique_tokens > total_tokens) {
    throw std::invalid_argument("config: need 0 < unique_tokens <= total_tokens");
  }
  if (final_lr > peak_lr) throw std::invalid_argument("config: final_lr must be <= peak_lr");
  if (decay_fraction < 0.0 || decay_fraction > 1.0) {
    throw std::invalid_argument("config: decay_fraction must be in [0,1]");
  }
  if (train_path.empty() || val_path.empty()) {
    throw std::invalid_argument("config: train_path and val_path are required");
  }
}

ModelSpec TrainConfig::model_spec() const {
  ModelSpec spec;
  spec.vocab_size = Vocab::size;
  spec.seq_len = seq_len;
  spec.n_layers = n_layers;
  spec.d_model = d_model;
  spec.n_heads = n_heads;
  spec.ffn_mult = ffn_mult;
  spec.attention_mode =
      objective == Objective::mdm ? AttentionMode::bidirectional : AttentionMode::causal;
  spec.dropout_prob = dropout_prob;
  spec.init_std = init_std;
  spec.rope_base = rope_base;
  spec.qk_norm = qk_norm;
  spec.bias_free = bias_free;
  return spec;
}

MdmLossOptions TrainConfig::mdm_options() const {
  MdmLossOptions opts;
  opts.n_mc = n_mc;
  opts.t_epsilon = t_epsilon;
  opts.importance_sample_t = importance_t;
  opts.min_one_mask = min_one_mask;
  opts.normalize = normalize == "masked" ? MdmNormalize::masked : MdmNormalize::sequence;
  return opts;
}

namespace {

std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "1" || v == "true") return true;
  if (v == "0" || v == "false") return false;
  throw std::invalid_argument("config: bad boolean for " + key + ": " + v);
}

void apply_key(TrainConfig& cfg, const std::string& key, const std::string& value) {
  try {
    if (key == "seq_len") cfg.seq_len = std::stoll(value);
    else if (key == "n_layers") cfg.n_layers = std::stoll(value);
    else if (key == "d_model") cfg.d_model = std::stoll(value);
    else if (key == "n_heads") cfg.n_heads = std::stoll(value);
    else if (key == "ffn_mult") cfg.ffn_mult = std::stod(value);
    else if (key == "dropout_prob") cfg.dropout_prob = std::stod(value);
    else if (key == "init_std") cfg.init_std = std::stod(value);
    else if (key == "rope_base") cfg.rope_base = std::stod(value);
    else if (key == "qk_norm") cfg.qk_norm = parse_bool(key, value);
    else if (key == "bias_free") cfg.bias_free = parse_bool(key, value);
    else if (key == "objective") cfg.objective = objective_from_string(value);
    else if (key == "mask_ratio") cfg.mask_ratio = std::stod(value);
    else if (key == "schedule") cfg.schedule = value;
    else if (key == "n_mc") cfg.n_mc = std::stoi(value);
    else if (key == "t_epsilon") cfg.t_epsilon = std::stod(value);
    else if (key == "importance_t") cfg.importance_t = parse_bool(key, value);
    else if (key == "min_one_mask") cfg.min_one_mask = parse_bool(key, value);
    else if (key == "normalize") cfg.normalize = value;
    else if (key == "train_path") cfg.train_path = value;
    else if (key == "val_path") cfg.val_path = value;
    else if (key == "unique_tokens") cfg.unique_tokens = std::stoll(value);
    else if (key == "total_tokens") cfg.total_tokens = std::stoll(value);
    else if (key == "batch_size") cfg.batch_size = std::stoll(value);
    else if (key == "tier") cfg.tier = value;
    else if (key == "peak_lr") cfg.peak_lr = std::stod(value);
    else if (key == "final_lr") cfg.final_lr = std::stod(value);
    else if (key == "warmup_steps") cfg.warmup_steps = std::stoll(value);
    else if (key == "decay_fraction") cfg.decay_fraction = std::stod(value);
    else if (key == "total_steps") cfg.total_steps = std::stoll(value);
    else if (key == "weight_decay") cfg.weight_decay = std::stod(value);
    else if (key == "grad_clip") cfg.grad_clip = std::stod(value);
    else if (key == "eval_every") cfg.eval_every = std::stoll(value);
    else if (key == "checkpoint_every") cfg.checkpoint_every = std::stoll(value);
    else if (key == "seed") cfg.seed = std::stoull(value);
    else if (key == "eval_windows") cfg.eval_windows = std::stoll(value);
    else if (key == "eval_items") cfg.eval_items = std::stoi(value);
    else if (key == "eval_ctx_chars") cfg.eval_ctx_chars = std::stoi(value);
    else if (key == "eval_cont_chars") cfg.eval_cont_chars = std::stoi(value);
    else if (key == "eval_distractors") cfg.eval_distractors = std::stoi(value);
    else if (key == "eval_mask_draws") cfg.eval_mask_draws = std::stoi(value);
    else if (key == "val_mc_samples") cfg.val_mc_samples = std::stoi(value);
    else throw std::invalid_argument("config: unknown key " + key);
  } catch (const std::invalid_argument&) {
    throw;
  } catch (const std::exception&) {
    throw std::invalid_argument("config: bad value for " + key + ": " + value);
  }
}

}  // namespace

TrainConfig parse_config_text(const std::string& text) {
  TrainConfig cfg;
  const auto first = text.find_first_not_of(" \t\r\n");
  if (first != std::string::npos && text[first] == '{') {
    json j = json::parse(text);
    for (const auto& [key, value] : j.items()) {
      apply_key(cfg, key, value.is_string() ? value.get<std::string>() : value.dump());
    }
    return cfg;
  }
  std::istringstream is(text);
  std::string line;
  int line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    const auto start = line.find_first_not_of(" \t");
    if (start == std::string::npos || line[start] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw std::invalid_argument("config: line " + std::to_string(line_no) + " is not key=value");
    }
    auto trim = [](std::string s) {
      const auto b = s.find_first_not_of(" \t");
      const auto e = s.find_last_not_of(" \t");
      return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
    };
    apply_key(cfg, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  return cfg;
}

TrainConfig parse_config_file(const std::string& path) {
  return parse_config_text(read_file(path));
}

std::map<std::string, std::string> config_to_map(const TrainConfig& cfg) {
  return {
      {"seq_len", std::to_string(cfg.seq_len)},
      {"n_layers", std::to_string(cfg.n_layers)},
      {"d_model", std::to_string(cfg.d_model)},
      {"n_heads", std::to_string(cfg.n_heads)},
      {"ffn_mult", format_double(cfg.ffn_mult)},
      {"dropout_prob", format_double(cfg.dropout_prob)},
      {"init_std", format_double(cfg.init_std)},
      {"rope_base", format_double(cfg.rope_base)},
      {"qk_norm", cfg.qk_norm ? "1" : "0"},
      {"bias_free", cfg.bias_free ? "1" : "0"},
      {"objective", to_string(cfg.objective)},
      {"mask_ratio", format_double(cfg.mask_ratio)},
      {"schedule", cfg.schedule},
      {"n_mc", std::to_string(cfg.n_mc)},
      {"t_epsilon", format_double(cfg.t_epsilon)},
      {"importance_t", cfg.importance_t ? "1" : "0"},
      {"min_one_mask", cfg.min_one_mask ? "1" : "0"},
      {"normalize", cfg.normalize},
      {"train_path", cfg.train_path},
      {"val_path", cfg.val_path},
      {"unique_tokens", std::to_string(cfg.unique_tokens)},
      {"total_tokens", std::to_string(cfg.total_tokens)},
      {"batch_size", std::to_string(cfg.batch_size)},
      {"tier", cfg.tier},
      {"peak_lr", format_double(cfg.peak_lr)},
      {"final_lr", format_double(cfg.final_lr)},
      {"warmup_steps", std::to_string(cfg.warmup_steps)},
      {"decay_fraction", format_double(cfg.decay_fraction)},
      {"total_steps", std::to_string(cfg.total_steps)},
      {"weight_decay", format_double(cfg.weight_decay)},
      {"grad_clip", format_double(cfg.grad_clip)},
      {"eval_every", std::to_string(cfg.eval_every)},
      {"checkpoint_every", std::to_string(cfg.checkpoint_every)},
      {"seed", std::to_string(cfg.seed)},
      {"eval_windows", std::to_string(cfg.eval_windows)},
      {"eval_items", std::to_string(cfg.eval_items)},
      {"eval_ctx_chars", std::to_string(cfg.eval_ctx_chars)},
      {"eval_cont_chars", std::to_string(cfg.eval_cont_chars)},
      {"eval_distractors", std::to_string(cfg.eval_distractors)},
      {"eval_mask_draws", std::to_string(cfg.eval_mask_draws)},
      {"val_mc_samples", std::to_string(cfg.val_mc_samples)},
  };
}

std::string config_to_text(const TrainConfig& cfg) {
  std::string out;
  for (const auto& [key, value] : config_to_map(cfg)) out += key + "=" + value + "\n";
  return out;
}

std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

std::string RunManifest::to_json() const {
  json j;
  j["config"] = config;
  j["code_version"] = code_version;
  j["seed"] = seed;
  j["started"] = started;
  j["finished"] = finished;
  j["files"] = json::array();
  for (const auto& f : files) {
    j["files"].push_back({{"path", f.path}, {"bytes", f.bytes}, {"checksum", f.checksum}});
  }
  return j.dump(2);
}

RunManifest RunManifest::from_json(const std::string& text) {
  json j = json::parse(text);
  RunManifest m;
  m.config = j.at("config").get<std::map<std::string, std::string>>();
  m.code_version = j.at("code_version").get<std::string>();
  m.seed = j.at("seed").get<std::uint64_t>();
  m.started = j.at("started").get<std::string>();
  m.finished = j.at("finished").get<std::string>();
  for (const auto& f : j.at("files")) {
    m.files.push_back({f.at("path").get<std::string>(), f.at("bytes").get<std::uint64_t>(),
                       f.at("checksum").get<std::string>()});
  }
  return m;
}

RunManifest build_manifest(const std::string& run_dir, const TrainConfig& cfg,
                           const std::string& started, const std::string& finished) {
  RunManifest m;
  m.config = config_to_map(cfg);
  m.seed = cfg.seed;
  m.started = started;
  m.finished = finished;
  std::vector<std::string> paths;
  for (const auto& entry : fs::recursive_directory_iterator(run_dir)) {
    if (!entry.is_regular_file()) continue;
    const auto rel = fs::relative(entry.path(), run_dir).generic_string();
    if (rel == "manifest.json") continue;
    paths.push_back(rel);
  }
  std::sort(paths.begin(), paths.end());
  for (const auto& rel : paths) {
    const std::string contents = read_file((fs::path(run_dir) / rel).string());
    char hex[17];
    std::snprintf(hex, sizeof hex, "%016llx",
                  static_cast<unsigned long long>(fnv1a64(contents)));
    m.files.push_back({rel, contents.size(), hex});
  }
  return m;
}

std::string iso_timestamp_now() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t tt = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&tt, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

}  // namespace dlmlab
