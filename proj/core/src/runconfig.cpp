#include "veritune/runconfig.hpp"

#include <fstream>
#include <sstream>

#include <json.hpp>

namespace veritune {

namespace {

using nlohmann::json;

[[noreturn]] void unknown_key(const std::string& scope, const std::string& key) {
  throw ConfigError("unknown config key '" + key + "' in " + scope);
}

void require_object(const json& j, const std::string& scope) {
  if (!j.is_object()) throw ConfigError("config section '" + scope + "' must be a JSON object");
}

void parse_hyper(const json& j, Hyperparams& h) {
  require_object(j, "hyper");
  for (const auto& [k, v] : j.items()) {
    if (k == "beta") h.beta = v.get<double>();
    else if (k == "a1") h.a1 = v.get<double>();
    else if (k == "a2") h.a2 = v.get<double>();
    else if (k == "lr") h.lr = v.get<double>();
    else if (k == "warmup_steps") h.warmup_steps = v.get<int>();
    else if (k == "decay") h.decay = v.get<double>();
    else if (k == "batch_size") h.batch_size = v.get<int>();
    else if (k == "num_generations") h.num_generations = v.get<int>();
    else if (k == "max_new_tokens") h.max_new_tokens = v.get<int>();
    else if (k == "n_min") h.n_min = v.get<int>();
    else if (k == "n_base") h.n_base = v.get<int>();
    else if (k == "mu_init") h.mu_init = v.get<double>();
    else if (k == "lr_mu") h.lr_mu = v.get<double>();
    else unknown_key("hyper", k);
  }
}

void parse_generator(const json& j, GeneratorConfig& g) {
  require_object(j, "generator");
  for (const auto& [k, v] : j.items()) {
    if (k == "backend") g.backend = v.get<std::string>();
    else if (k == "temperature") g.temperature = v.get<double>();
    else if (k == "max_tokens") g.max_tokens = v.get<int>();
    else if (k == "mock_correctness") g.mock_correctness = v.get<double>();
    else if (k == "q_follow") g.q_follow = v.get<double>();
    else if (k == "base_url") g.base_url = v.get<std::string>();
    else if (k == "path") g.path = v.get<std::string>();
    else if (k == "model") g.model = v.get<std::string>();
    else if (k == "retry_limit") g.retry_limit = v.get<int>();
    else if (k == "timeout_s") g.timeout_s = v.get<double>();
    else unknown_key("generator", k);
  }
}

void parse_corpus(const json& j, CorpusOptions& c) {
  require_object(j, "corpus");
  for (const auto& [k, v] : j.items()) {
    if (k == "size") c.size = v.get<std::size_t>();
    else if (k == "contradiction_rate") c.contradiction_rate = v.get<double>();
    else if (k == "distractor_rate") c.distractor_rate = v.get<double>();
    else if (k == "val_fraction") c.val_fraction = v.get<double>();
    else if (k == "test_fraction") c.test_fraction = v.get<double>();
    else unknown_key("corpus", k);
  }
}

void parse_model(const json& j, PolicyConfig& m) {
  require_object(j, "model");
  for (const auto& [k, v] : j.items()) {
    if (k == "context_len") m.context_len = v.get<int>();
    else if (k == "d_model") m.d_model = v.get<int>();
    else if (k == "n_layers") m.n_layers = v.get<int>();
    else if (k == "n_heads") m.n_heads = v.get<int>();
    else if (k == "d_ff") m.d_ff = v.get<int>();
    else if (k == "adapter_rank") m.adapter_rank = v.get<int>();
    else if (k == "adapter_alpha") m.adapter_alpha = v.get<double>();
    else if (k == "init_std") m.init_std = v.get<double>();
    else if (k == "adapter_a_std") m.adapter_a_std = v.get<double>();
    else if (k == "pos_scale") m.pos_scale = v.get<double>();
    else unknown_key("model", k);
  }
}

void parse_pairing(const json& j, PairingOptions& p) {
  require_object(j, "pairing");
  for (const auto& [k, v] : j.items()) {
    if (k == "flat_sampling") p.flat_sampling = v.get<bool>();
    else if (k == "no_counterfactual") p.no_counterfactual = v.get<bool>();
    else if (k == "tips_in_prompt") p.tips_in_prompt = v.get<bool>();
    else if (k == "validity_filter") p.validity_filter = v.get<bool>();
    else unknown_key("pairing", k);
  }
}

void parse_trainer(const json& j, RunConfig& c) {
  require_object(j, "trainer");
  for (const auto& [k, v] : j.items()) {
    if (k == "max_steps") c.max_steps = v.get<int>();
    else if (k == "eval_interval") c.eval_interval = v.get<int>();
    else if (k == "patience") c.patience = v.get<int>();
    else if (k == "min_delta") c.min_delta = v.get<double>();
    else if (k == "eval_max_pairs") c.eval_max_pairs = v.get<int>();
    else if (k == "dual_ascent") c.dual_ascent = v.get<bool>();
    else if (k == "optimizer") c.optimizer = optimizer_from_string(v.get<std::string>());
    else unknown_key("trainer", k);
  }
}

void parse_eval(const json& j, RunConfig& c) {
  require_object(j, "eval");
  for (const auto& [k, v] : j.items()) {
    if (k == "temperature") c.eval_temperature = v.get<double>();
    else if (k == "max_new_tokens") c.eval_max_new_tokens = v.get<int>();
    else unknown_key("eval", k);
  }
}

}  // namespace

TrainerConfig RunConfig::trainer_config() const {
  TrainerConfig t;
  t.variant = variant;
  t.hyper = hyper;
  t.max_steps = max_steps;
  t.eval_interval = eval_interval;
  t.patience = patience;
  t.min_delta = min_delta;
  t.eval_max_pairs = eval_max_pairs;
  t.dual_ascent = dual_ascent;
  t.optimizer = optimizer;
  t.seed = seed;
  return t;
}

EvalOptions RunConfig::eval_options() const {
  EvalOptions e;
  e.temperature = eval_temperature;
  e.max_new_tokens = eval_max_new_tokens;
  e.seed = seed;
  return e;
}

void RunConfig::validate() const {
  if (out_dir.empty()) throw ConfigError("out_dir must not be empty");
  hyper.validate();
  generator.validate();
  corpus.validate();
  model.validate();
  trainer_config().validate();
  eval_options().validate();
}

RunConfig run_config_from_json(const std::string& json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const std::exception& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  if (!j.is_object()) throw ConfigError("config root must be a JSON object");
  RunConfig cfg;
  try {
    for (const auto& [k, v] : j.items()) {
      if (k == "seed") cfg.seed = v.get<std::uint64_t>();
      else if (k == "out_dir") cfg.out_dir = v.get<std::string>();
      else if (k == "claims_path") cfg.claims_path = v.get<std::string>();
      else if (k == "counterfactuals_path") cfg.counterfactuals_path = v.get<std::string>();
      else if (k == "generations_path") cfg.generations_path = v.get<std::string>();
      else if (k == "pairs_path") cfg.pairs_path = v.get<std::string>();
      else if (k == "checkpoint_path") cfg.checkpoint_path = v.get<std::string>();
      else if (k == "report_path") cfg.report_path = v.get<std::string>();
      else if (k == "variant") cfg.variant = variant_from_string(v.get<std::string>());
      else if (k == "hyper") parse_hyper(v, cfg.hyper);
      else if (k == "generator") parse_generator(v, cfg.generator);
      else if (k == "corpus") parse_corpus(v, cfg.corpus);
      else if (k == "model") parse_model(v, cfg.model);
      else if (k == "pairing") parse_pairing(v, cfg.pairing);
      else if (k == "trainer") parse_trainer(v, cfg);
      else if (k == "eval") parse_eval(v, cfg);
      else unknown_key("config", k);
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config value has the wrong type: ") + e.what());
  }
  return cfg;
}

std::string run_config_to_json(const RunConfig& c) {
  json j;
  j["seed"] = c.seed;
  j["out_dir"] = c.out_dir;
  j["claims_path"] = c.claims_path;
  j["counterfactuals_path"] = c.counterfactuals_path;
  j["generations_path"] = c.generations_path;
  j["pairs_path"] = c.pairs_path;
  j["checkpoint_path"] = c.checkpoint_path;
  j["report_path"] = c.report_path;
  j["variant"] = to_string(c.variant);
  j["hyper"] = {
      {"beta", c.hyper.beta},
      {"a1", c.hyper.a1},
      {"a2", c.hyper.a2},
      {"lr", c.hyper.lr},
      {"warmup_steps", c.hyper.warmup_steps},
      {"decay", c.hyper.decay},
      {"batch_size", c.hyper.batch_size},
      {"num_generations", c.hyper.num_generations},
      {"max_new_tokens", c.hyper.max_new_tokens},
      {"n_min", c.hyper.n_min},
      {"n_base", c.hyper.n_base},
      {"mu_init", c.hyper.mu_init},
      {"lr_mu", c.hyper.lr_mu},
  };
  j["generator"] = {
      {"backend", c.generator.backend},
      {"temperature", c.generator.temperature},
      {"max_tokens", c.generator.max_tokens},
      {"mock_correctness", c.generator.mock_correctness},
      {"q_follow", c.generator.q_follow},
      {"base_url", c.generator.base_url},
      {"path", c.generator.path},
      {"model", c.generator.model},
      {"retry_limit", c.generator.retry_limit},
      {"timeout_s", c.generator.timeout_s},
  };
  j["corpus"] = {
      {"size", c.corpus.size},
      {"contradiction_rate", c.corpus.contradiction_rate},
      {"distractor_rate", c.corpus.distractor_rate},
      {"val_fraction", c.corpus.val_fraction},
      {"test_fraction", c.corpus.test_fraction},
  };
  j["model"] = {
      {"context_len", c.model.context_len},
      {"d_model", c.model.d_model},
      {"n_layers", c.model.n_layers},
      {"n_heads", c.model.n_heads},
      {"d_ff", c.model.d_ff},
      {"adapter_rank", c.model.adapter_rank},
      {"adapter_alpha", c.model.adapter_alpha},
      {"init_std", c.model.init_std},
      {"adapter_a_std", c.model.adapter_a_std},
      {"pos_scale", c.model.pos_scale},
  };
  j["pairing"] = {
      {"flat_sampling", c.pairing.flat_sampling},
      {"no_counterfactual", c.pairing.no_counterfactual},
      {"tips_in_prompt", c.pairing.tips_in_prompt},
      {"validity_filter", c.pairing.validity_filter},
  };
  j["trainer"] = {
      {"max_steps", c.max_steps},
      {"eval_interval", c.eval_interval},
      {"patience", c.patience},
      {"min_delta", c.min_delta},
      {"eval_max_pairs", c.eval_max_pairs},
      {"dual_ascent", c.dual_ascent},
      {"optimizer", optimizer_to_string(c.optimizer)},
  };
  j["eval"] = {
      {"temperature", c.eval_temperature},
      {"max_new_tokens", c.eval_max_new_tokens},
  };
  return j.dump(2);
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return run_config_from_json(ss.str());
}

void save_run_config(const std::filesystem::path& path, const RunConfig& cfg) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot open " + path.string() + " for writing");
  out << run_config_to_json(cfg) << '\n';
  if (!out) throw DataError("short write to " + path.string());
}

}  // namespace veritune
