#pragma once

#include <filesystem>
#include <string>

#include "veritune/augmentation.hpp"
#include "veritune/eval.hpp"
#include "veritune/generation.hpp"
#include "veritune/policy.hpp"
#include "veritune/trainer.hpp"
#include "veritune/types.hpp"

namespace veritune {

// Everything one run needs, loadable from a single JSON file. Unknown keys
// are rejected so a typo cannot silently fall back to a default.
struct RunConfig {
  std::uint64_t seed = 0;
  std::string out_dir = "out";

  // Empty path fields fall back to files under out_dir.
  std::string claims_path;           // records JSONL
  std::string counterfactuals_path;  // extra refuting records to merge at synth time
  std::string generations_path;      // sample cache JSONL
  std::string pairs_path;            // preference pairs JSONL
  std::string checkpoint_path;       // trainer state
  std::string report_path;           // evaluation report JSON

  Variant variant = Variant::Improved;
  Hyperparams hyper;
  GeneratorConfig generator;
  CorpusOptions corpus;
  PolicyConfig model;
  PairingOptions pairing;

  int max_steps = 2000;
  int eval_interval = 100;
  int patience = 10;
  double min_delta = 1e-4;
  int eval_max_pairs = 200;
  bool dual_ascent = false;
  Optimizer optimizer = Optimizer::Sgd;

  double eval_temperature = 0.0;
  int eval_max_new_tokens = 512;

  TrainerConfig trainer_config() const;
  EvalOptions eval_options() const;
  void validate() const;
};

RunConfig run_config_from_json(const std::string& json_text);
std::string run_config_to_json(const RunConfig& cfg);

RunConfig load_run_config(const std::filesystem::path& path);
void save_run_config(const std::filesystem::path& path, const RunConfig& cfg);

}  // namespace veritune
