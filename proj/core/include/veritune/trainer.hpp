#pragma once

#include <filesystem>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "veritune/augmentation.hpp"
#include "veritune/objective.hpp"
#include "veritune/policy.hpp"
#include "veritune/types.hpp"

namespace veritune {

enum class Optimizer { Sgd, Adam };

std::string optimizer_to_string(Optimizer o);
Optimizer optimizer_from_string(const std::string& s);

struct TrainerConfig {
  Variant variant = Variant::Improved;
  Hyperparams hyper;
  int max_steps = 2000;
  int eval_interval = 100;  // steps between validation passes
  int patience = 10;        // evaluations without improvement before stopping
  double min_delta = 1e-4;  // required improvement margin
  int eval_max_pairs = 200; // validation subsample cap
  bool dual_ascent = false;
  // Plain SGD is the default and the only mode the reproducibility oracles
  // pin; the moment-based option exists for experiments.
  Optimizer optimizer = Optimizer::Sgd;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint64_t seed = 0;

  void validate() const;
};

// One training example. DPO-family variants need both completions; the
// likelihood variants score only `chosen` (LabelOnly without a trailing
// EOS, everything else with one).
struct TrainItem {
  std::string record_id;
  std::string prompt;
  std::string chosen;
  std::string rejected;
};

std::vector<TrainItem> items_from_pairs(const std::vector<PreferencePair>& pairs);
std::vector<TrainItem> items_from_label_targets(const std::vector<LabelTarget>& targets);

// Step-indexed schedule, 1-based: linear ramp to hyper.lr over warmup_steps,
// then geometric decay by `decay` per step.
double learning_rate(const Hyperparams& hp, int step);

// One row per validation pass.
struct LogRow {
  int step = 0;
  double train_loss = 0.0;  // mean batch loss since the previous row
  double lr = 0.0;
  double mu1 = 0.0;
  double mu2 = 0.0;
  double val_lp_theta_chosen = 0.0;
  double val_lp_theta_rejected = 0.0;
  double val_lp_ref_chosen = 0.0;
  double val_lp_ref_rejected = 0.0;
  double val_loss = 0.0;
  std::uint64_t fingerprint = 0;  // adapter bytes after this step
};

// One row per optimizer step: batch-mean constraints and the multipliers
// that resulted. Lets a test replay the multiplier recursion offline.
struct StepRow {
  int step = 0;
  double c_chosen_mean = 0.0;
  double c_rejected_mean = 0.0;
  double mu1 = 0.0;
  double mu2 = 0.0;
};

struct TrajectoryLog {
  std::vector<LogRow> rows;
  std::vector<StepRow> step_rows;
};

// Cross-step trainer state; everything needed to resume bit-exactly.
struct TrainState {
  int step = 0;
  Multipliers mu;
  double best_val = std::numeric_limits<double>::infinity();
  int best_step = 0;
  int evals_since_best = 0;
  // Partial train-loss window since the last validation row, so a resumed
  // run reports the same `loss` column as an unbroken one.
  double window_loss_sum = 0.0;
  int window_steps = 0;
  std::vector<std::uint8_t> best_adapters;
  // First/second moment buffers, flat over the adapter parameters. Empty
  // under plain SGD; carried through checkpoints so a resumed moment-based
  // run continues exactly.
  std::vector<double> adam_m;
  std::vector<double> adam_v;
};

struct TrainOutcome {
  TrajectoryLog log;
  TrainState state;
  int steps_run = 0;
  bool early_stopped = false;
};

// Runs plain SGD over the items. `policy` is advanced in place and left at
// the final step; the best-validation adapters live in the returned state.
// Pass `resume` to continue from a loaded checkpoint: the schedule, epoch
// shuffles, and validation subsample are derived statelessly from
// (cfg.seed, step), so a split run reproduces an unbroken one exactly.
TrainOutcome train(Policy& policy, const Policy& ref, const std::vector<TrainItem>& train_items,
                   const std::vector<TrainItem>& val_items, const TrainerConfig& cfg,
                   const TrainState* resume = nullptr);

// Mean log-probabilities of both policies over a pair set, summed in a
// canonical order (sorted by record id, then completions) so the result is
// invariant to input ordering. Throws DataError on an empty set.
struct LogpStats {
  double lp_theta_chosen = 0.0;
  double lp_theta_rejected = 0.0;
  double lp_ref_chosen = 0.0;
  double lp_ref_rejected = 0.0;
  std::size_t count = 0;
};

LogpStats evaluate_logps(const Policy& model, const Policy& ref,
                         const std::vector<TrainItem>& items);

// Fixed-schema CSV over the validation rows. The append form adds rows with
// no header, for continuing a resumed run's file.
extern const char* kMetricsHeader;
void write_metrics_csv(const std::filesystem::path& path, const std::vector<LogRow>& rows);
void append_metrics_csv(const std::filesystem::path& path, const std::vector<LogRow>& rows);

// Per-step multiplier trace, one row per optimizer step.
extern const char* kMuTraceHeader;
void write_mu_trace_csv(const std::filesystem::path& path, const std::vector<StepRow>& rows);
void append_mu_trace_csv(const std::filesystem::path& path, const std::vector<StepRow>& rows);

void save_train_checkpoint(const std::filesystem::path& path, const Policy& policy,
                           const TrainState& state);
std::pair<Policy, TrainState> load_train_checkpoint(const std::filesystem::path& path);

}  // namespace veritune
