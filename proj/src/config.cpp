// SPDX-License-Identifier: Apache-2.0
#include "knowtrace/config.hpp"

#include "knowtrace/rng.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>

namespace knowtrace::config {

namespace {

std::string trim(const std::string& s) {
  size_t b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  size_t e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

}  // namespace

std::map<std::string, std::string> parse_ini(const std::string& text) {
  std::map<std::string, std::string> kv;
  std::istringstream in(text);
  std::string line, section;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']')
        throw InvalidInput("config line " + std::to_string(line_no) + ": unterminated section");
      section = trim(line.substr(1, line.size() - 2));
      continue;
    }
    const size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw InvalidInput("config line " + std::to_string(line_no) + ": expected key = value");
    std::string key = trim(line.substr(0, eq));
    std::string value = trim(line.substr(eq + 1));
    if (key.empty()) throw InvalidInput("config line " + std::to_string(line_no) + ": empty key");
    const std::string full = section.empty() ? key : section + "." + key;
    if (kv.count(full))
      throw InvalidInput("config line " + std::to_string(line_no) + ": duplicate key " + full);
    kv[full] = value;
  }
  return kv;
}

std::map<std::string, std::string> parse_ini_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config file: " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_ini(ss.str());
}

void PipelineConfig::propagate_seed() {
  world.seed = seed;
  model.seed = Rng(seed, "model-init").next_u64();
  train.seed = Rng(seed, "train").next_u64();
  interventions.seed = Rng(seed, "interventions").next_u64();
  detect.seed = Rng(seed, "detect").next_u64();
  refusal.seed = Rng(seed, "refusal").next_u64();
}

PipelineConfig default_config() {
  PipelineConfig cfg;
  cfg.refusal.schedule.epochs = 1;
  cfg.refusal.schedule.batch_size = 16;
  cfg.refusal.schedule.learning_rate = 5e-3;
  cfg.train.target_loss = 2.0;
  cfg.propagate_seed();
  return cfg;
}

namespace {

class Reader {
 public:
  explicit Reader(const std::map<std::string, std::string>& kv) : kv_(kv) {}

  template <class T>
  void get(const std::string& key, T& out) {
    auto it = kv_.find(key);
    if (it == kv_.end()) return;
    seen_.insert(key);
    std::istringstream is(it->second);
    T v{};
    if (!(is >> v)) throw InvalidInput("config key " + key + ": cannot parse '" + it->second + "'");
    out = v;
  }

  void get(const std::string& key, bool& out) {
    auto it = kv_.find(key);
    if (it == kv_.end()) return;
    seen_.insert(key);
    if (it->second == "true" || it->second == "1") out = true;
    else if (it->second == "false" || it->second == "0") out = false;
    else throw InvalidInput("config key " + key + ": expected true/false");
  }

  void get(const std::string& key, std::string& out) {
    auto it = kv_.find(key);
    if (it == kv_.end()) return;
    seen_.insert(key);
    out = it->second;
  }

  void check_unknown() const {
    for (const auto& [key, value] : kv_) {
      if (!seen_.count(key)) throw InvalidInput("unknown config key: " + key);
    }
  }

 private:
  const std::map<std::string, std::string>& kv_;
  std::set<std::string> seen_;
};

}  // namespace

PipelineConfig config_from_map(const std::map<std::string, std::string>& kv) {
  PipelineConfig cfg = default_config();
  Reader r(kv);

  r.get("run.seed", cfg.seed);

  r.get("world.n_subjects", cfg.world.n_subjects);
  r.get("world.zipf_exponent", cfg.world.zipf_exponent);
  r.get("world.popularity_max", cfg.world.popularity_max);
  r.get("world.confounder_rate", cfg.world.confounder_rate);
  r.get("world.confounder_ratio", cfg.world.confounder_ratio);
  r.get("world.confounded_gold_scale", cfg.world.confounded_gold_scale);
  r.get("world.corpus_budget", cfg.world.corpus_budget);
  r.get("world.name_part_pool", cfg.world.name_part_pool);
  r.get("world.person_pool", cfg.world.person_pool);
  r.get("world.date_pool", cfg.world.date_pool);
  r.get("world.n_refusal_templates", cfg.world.n_refusal_templates);

  r.get("model.vocab_size", cfg.model.vocab_size);
  r.get("model.d_model", cfg.model.d_model);
  r.get("model.n_layers", cfg.model.n_layers);
  r.get("model.n_heads", cfg.model.n_heads);
  r.get("model.d_mlp", cfg.model.d_mlp);
  r.get("model.max_seq_len", cfg.model.max_seq_len);
  cfg.world.vocab_size = cfg.model.vocab_size;

  r.get("train.steps", cfg.train.steps);
  r.get("train.batch_size", cfg.train.batch_size);
  r.get("train.seq_len", cfg.train.seq_len);
  r.get("train.learning_rate", cfg.train.learning_rate);
  r.get("train.warmup_steps", cfg.train.warmup_steps);
  r.get("train.log_interval", cfg.train.log_interval);
  double target_loss = cfg.train.target_loss.value_or(2.0);
  r.get("train.target_loss", target_loss);
  cfg.train.target_loss = target_loss;

  r.get("interventions.block_window", cfg.interventions.block_window);
  r.get("interventions.patch_window", cfg.interventions.patch_window);
  r.get("interventions.noise_scale", cfg.interventions.noise_scale);
  r.get("interventions.noise_seeds", cfg.interventions.noise_seeds);
  r.get("interventions.patch_residual", cfg.interventions.patch_residual);
  std::string corruption = "gaussian_embedding_noise";
  r.get("interventions.corruption", corruption);
  if (corruption == "gaussian_embedding_noise")
    cfg.interventions.corruption = interventions::CorruptionMode::GaussianEmbeddingNoise;
  else if (corruption == "mean_ablation")
    cfg.interventions.corruption = interventions::CorruptionMode::MeanAblation;
  else
    throw InvalidInput("interventions.corruption must be gaussian_embedding_noise or mean_ablation");
  r.get("interventions.sweep_per_group", cfg.sweep_per_group);

  std::string reliance_mode = "attention";
  r.get("label.reliance_mode", reliance_mode);
  if (reliance_mode == "attention") cfg.label.mode = taxonomy::RelianceMode::AttentionMask;
  else if (reliance_mode == "masked_prompt") cfg.label.mode = taxonomy::RelianceMode::MaskedPrompt;
  else throw InvalidInput("label.reliance_mode must be attention or masked_prompt");
  r.get("label.max_new_tokens", cfg.label.max_new_tokens);

  r.get("analysis.energy_fraction", cfg.energy_fraction);
  r.get("analysis.max_cosine_pairs", cfg.max_cosine_pairs);
  r.get("analysis.entropy_bins", cfg.entropy_bins);
  r.get("analysis.holdout_fraction", cfg.holdout_fraction);
  r.get("analysis.holdout_min", cfg.holdout_min);
  r.get("analysis.bootstrap_resamples", cfg.bootstrap_resamples);

  r.get("detect.train_per_class", cfg.detect.train_per_class);
  r.get("detect.test_per_class", cfg.detect.test_per_class);
  r.get("detect.n_seeds", cfg.detect.n_seeds);
  r.get("detect.probe_l2", cfg.detect.probe_l2);
  r.get("detect.probe_step", cfg.detect.probe_step);
  r.get("detect.probe_epochs", cfg.detect.probe_epochs);
  r.get("detect.min_train_per_class", cfg.detect.min_train_per_class);
  r.get("detect.min_test_per_class", cfg.detect.min_test_per_class);
  r.get("detect.last_token_postnorm", cfg.last_token_postnorm);

  r.get("refusal.pairs_per_class", cfg.refusal.pairs_per_class);
  r.get("refusal.eval_per_class", cfg.refusal.eval_per_class);
  r.get("refusal.epochs", cfg.refusal.schedule.epochs);
  r.get("refusal.batch_size", cfg.refusal.schedule.batch_size);
  r.get("refusal.learning_rate", cfg.refusal.schedule.learning_rate);

  r.check_unknown();
  cfg.propagate_seed();
  return cfg;
}

PipelineConfig load_config(const std::string& path) {
  return config_from_map(parse_ini_file(path));
}

std::map<std::string, std::string> config_to_map(const PipelineConfig& cfg) {
  std::map<std::string, std::string> kv;
  auto put = [&kv](const std::string& key, auto value) {
    std::ostringstream os;
    os.precision(17);
    os << value;
    kv[key] = os.str();
  };
  put("run.seed", cfg.seed);
  put("world.n_subjects", cfg.world.n_subjects);
  put("world.zipf_exponent", cfg.world.zipf_exponent);
  put("world.popularity_max", cfg.world.popularity_max);
  put("world.confounder_rate", cfg.world.confounder_rate);
  put("world.confounder_ratio", cfg.world.confounder_ratio);
  put("world.confounded_gold_scale", cfg.world.confounded_gold_scale);
  put("world.corpus_budget", cfg.world.corpus_budget);
  put("world.name_part_pool", cfg.world.name_part_pool);
  put("world.person_pool", cfg.world.person_pool);
  put("world.date_pool", cfg.world.date_pool);
  put("world.n_refusal_templates", cfg.world.n_refusal_templates);
  put("model.vocab_size", cfg.model.vocab_size);
  put("model.d_model", cfg.model.d_model);
  put("model.n_layers", cfg.model.n_layers);
  put("model.n_heads", cfg.model.n_heads);
  put("model.d_mlp", cfg.model.d_mlp);
  put("model.max_seq_len", cfg.model.max_seq_len);
  put("train.steps", cfg.train.steps);
  put("train.batch_size", cfg.train.batch_size);
  put("train.seq_len", cfg.train.seq_len);
  put("train.learning_rate", cfg.train.learning_rate);
  put("train.warmup_steps", cfg.train.warmup_steps);
  put("train.log_interval", cfg.train.log_interval);
  if (cfg.train.target_loss) put("train.target_loss", *cfg.train.target_loss);
  put("interventions.block_window", cfg.interventions.block_window);
  put("interventions.patch_window", cfg.interventions.patch_window);
  kv["interventions.corruption"] =
      cfg.interventions.corruption == interventions::CorruptionMode::GaussianEmbeddingNoise
          ? "gaussian_embedding_noise"
          : "mean_ablation";
  put("interventions.noise_scale", cfg.interventions.noise_scale);
  put("interventions.noise_seeds", cfg.interventions.noise_seeds);
  kv["interventions.patch_residual"] = cfg.interventions.patch_residual ? "true" : "false";
  put("interventions.sweep_per_group", cfg.sweep_per_group);
  kv["label.reliance_mode"] =
      cfg.label.mode == taxonomy::RelianceMode::AttentionMask ? "attention" : "masked_prompt";
  put("label.max_new_tokens", cfg.label.max_new_tokens);
  put("analysis.energy_fraction", cfg.energy_fraction);
  put("analysis.max_cosine_pairs", cfg.max_cosine_pairs);
  put("analysis.entropy_bins", cfg.entropy_bins);
  put("analysis.holdout_fraction", cfg.holdout_fraction);
  put("analysis.holdout_min", cfg.holdout_min);
  put("analysis.bootstrap_resamples", cfg.bootstrap_resamples);
  put("detect.train_per_class", cfg.detect.train_per_class);
  put("detect.test_per_class", cfg.detect.test_per_class);
  put("detect.n_seeds", cfg.detect.n_seeds);
  put("detect.probe_l2", cfg.detect.probe_l2);
  put("detect.probe_step", cfg.detect.probe_step);
  put("detect.probe_epochs", cfg.detect.probe_epochs);
  put("detect.min_train_per_class", cfg.detect.min_train_per_class);
  put("detect.min_test_per_class", cfg.detect.min_test_per_class);
  kv["detect.last_token_postnorm"] = cfg.last_token_postnorm ? "true" : "false";
  put("refusal.pairs_per_class", cfg.refusal.pairs_per_class);
  put("refusal.eval_per_class", cfg.refusal.eval_per_class);
  put("refusal.epochs", cfg.refusal.schedule.epochs);
  put("refusal.batch_size", cfg.refusal.schedule.batch_size);
  put("refusal.learning_rate", cfg.refusal.schedule.learning_rate);
  return kv;
}

}  // namespace knowtrace::config
