#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "veritune/policy.hpp"
#include "veritune/types.hpp"

namespace veritune {

struct EvalOptions {
  double temperature = 0.0;  // greedy by default
  int max_new_tokens = 512;
  std::uint64_t seed = 0;  // only consulted when temperature > 0

  void validate() const;
};

struct Prediction {
  std::string record_id;
  Label gold = Label::Supports;
  std::optional<Label> predicted;  // empty when the output held no verdict
  std::string text;
};

// One scoring unit, decoupled from how the prediction was produced.
struct ScoredExample {
  Label gold = Label::Supports;
  std::optional<Label> predicted;
  std::vector<std::string> tags;
};

struct TagStats {
  int correct = 0;
  int total = 0;
  int confusion[2][3] = {{0, 0, 0}, {0, 0, 0}};
  double accuracy = 0.0;
  double macro_f1 = 0.0;
};

struct EvalReport {
  int total = 0;
  int correct = 0;
  int unparsed = 0;       // outputs with no parseable verdict; scored as wrong
  double accuracy = 0.0;
  double f1_refutes = 0.0;   // F1 with Refutes as the positive class
  double f1_supports = 0.0;
  double macro_f1 = 0.0;     // unweighted mean of the two
  // confusion[gold][pred], rows Supports/Refutes, columns Supports/Refutes/unparsed.
  int confusion[2][3] = {{0, 0, 0}, {0, 0, 0}};
  std::map<std::string, TagStats> per_tag;
};

// Greedy (or sampled) answer to the bare question for one record.
Prediction predict(const Policy& policy, const ClaimRecord& record, const EvalOptions& opts);

// F1 with `positive` as the positive class, computed from confusion counts
// (rows gold Supports/Refutes, columns predicted Supports/Refutes/unparsed).
// Unparsed predictions count against recall and never toward precision; zero
// denominators yield 0.
double f1_from_confusion(const int confusion[2][3], Label positive);

EvalReport score_examples(const std::vector<ScoredExample>& examples);

// Scores aligned prediction/gold lists (no tag breakdown). Throws DataError
// when the lengths differ.
EvalReport score_labeled(const std::vector<std::optional<Label>>& predictions,
                         const std::vector<Label>& golds);

EvalReport evaluate(const Policy& policy, const std::vector<ClaimRecord>& records,
                    const EvalOptions& opts, std::vector<Prediction>* predictions = nullptr);

// Throws DataError if any record id appears in both sets.
void check_disjoint(const std::vector<ClaimRecord>& train_records,
                    const std::vector<ClaimRecord>& eval_records);

// evaluate() guarded by the leakage check above.
EvalReport cross_eval(const Policy& policy, const std::vector<ClaimRecord>& train_records,
                      const std::vector<ClaimRecord>& eval_records, const EvalOptions& opts);

std::string report_to_json(const EvalReport& report);
void write_report(const std::filesystem::path& path, const EvalReport& report);

// Plot-ready comma-separated export: one row per tag.
void write_per_tag_csv(const std::filesystem::path& path, const EvalReport& report);

}  // namespace veritune
