#include "veritune/eval.hpp"

#include <cstdio>
#include <fstream>
#include <unordered_set>

#include <json.hpp>

#include "veritune/prompting.hpp"

namespace veritune {

namespace {

void fill_rates(const int confusion[2][3], int total, int correct, double* accuracy,
                double* macro_f1) {
  *accuracy = total == 0 ? 0.0 : static_cast<double>(correct) / total;
  *macro_f1 = 0.5 * (f1_from_confusion(confusion, Label::Refutes) +
                     f1_from_confusion(confusion, Label::Supports));
}

std::string fmt_rate(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace

double f1_from_confusion(const int confusion[2][3], Label positive) {
  const int pos = positive == Label::Refutes ? 1 : 0;
  const int neg = 1 - pos;
  const int tp = confusion[pos][pos];
  const int fp = confusion[neg][pos];
  const int fn = confusion[pos][neg] + confusion[pos][2];
  const double precision = (tp + fp) == 0 ? 0.0 : static_cast<double>(tp) / (tp + fp);
  const double recall = (tp + fn) == 0 ? 0.0 : static_cast<double>(tp) / (tp + fn);
  if (precision + recall == 0.0) return 0.0;
  return 2.0 * precision * recall / (precision + recall);
}

void EvalOptions::validate() const {
  if (!(temperature >= 0.0)) throw ConfigError("temperature must be non-negative");
  if (max_new_tokens < 1) throw ConfigError("max_new_tokens must be positive");
}

Prediction predict(const Policy& policy, const ClaimRecord& record, const EvalOptions& opts) {
  opts.validate();
  const std::string prompt = build_prompt(record, SettingId::Bare);
  const auto prompt_ids = policy.tokenizer().encode_prompt(prompt);
  Rng rng = derive_rng(opts.seed, "eval-sample", fnv1a(record.id));
  const auto out_ids = policy.sample(prompt_ids, opts.max_new_tokens, opts.temperature, rng);
  Prediction p;
  p.record_id = record.id;
  p.gold = record.label;
  p.text = policy.tokenizer().decode(out_ids);
  p.predicted = parse_label(p.text);
  return p;
}

EvalReport score_examples(const std::vector<ScoredExample>& examples) {
  EvalReport r;
  r.total = static_cast<int>(examples.size());
  for (const auto& ex : examples) {
    const int row = ex.gold == Label::Refutes ? 1 : 0;
    int col = 2;
    if (ex.predicted.has_value()) col = *ex.predicted == Label::Refutes ? 1 : 0;
    r.confusion[row][col] += 1;
    const bool hit = ex.predicted.has_value() && *ex.predicted == ex.gold;
    if (hit) ++r.correct;
    if (!ex.predicted.has_value()) ++r.unparsed;
    for (const auto& tag : ex.tags) {
      auto& ts = r.per_tag[tag];
      ts.total += 1;
      ts.confusion[row][col] += 1;
      if (hit) ts.correct += 1;
    }
  }
  r.f1_refutes = f1_from_confusion(r.confusion, Label::Refutes);
  r.f1_supports = f1_from_confusion(r.confusion, Label::Supports);
  fill_rates(r.confusion, r.total, r.correct, &r.accuracy, &r.macro_f1);
  for (auto& [tag, ts] : r.per_tag)
    fill_rates(ts.confusion, ts.total, ts.correct, &ts.accuracy, &ts.macro_f1);
  return r;
}

EvalReport score_labeled(const std::vector<std::optional<Label>>& predictions,
                         const std::vector<Label>& golds) {
  if (predictions.size() != golds.size())
    throw DataError("prediction/gold length mismatch: " + std::to_string(predictions.size()) +
                    " vs " + std::to_string(golds.size()));
  std::vector<ScoredExample> scored;
  scored.reserve(golds.size());
  for (std::size_t i = 0; i < golds.size(); ++i) scored.push_back({golds[i], predictions[i], {}});
  return score_examples(scored);
}

EvalReport evaluate(const Policy& policy, const std::vector<ClaimRecord>& records,
                    const EvalOptions& opts, std::vector<Prediction>* predictions) {
  std::vector<ScoredExample> scored;
  scored.reserve(records.size());
  for (const auto& rec : records) {
    Prediction p = predict(policy, rec, opts);
    scored.push_back({rec.label, p.predicted, rec.tags});
    if (predictions != nullptr) predictions->push_back(std::move(p));
  }
  return score_examples(scored);
}

void check_disjoint(const std::vector<ClaimRecord>& train_records,
                    const std::vector<ClaimRecord>& eval_records) {
  std::unordered_set<std::string> train_ids;
  train_ids.reserve(train_records.size());
  for (const auto& r : train_records) train_ids.insert(r.id);
  for (const auto& r : eval_records) {
    if (train_ids.count(r.id) != 0)
      throw DataError("record " + r.id + " appears in both the training and evaluation sets");
  }
}

EvalReport cross_eval(const Policy& policy, const std::vector<ClaimRecord>& train_records,
                      const std::vector<ClaimRecord>& eval_records, const EvalOptions& opts) {
  check_disjoint(train_records, eval_records);
  return evaluate(policy, eval_records, opts);
}

std::string report_to_json(const EvalReport& report) {
  nlohmann::json j;
  j["total"] = report.total;
  j["correct"] = report.correct;
  j["unparsed_count"] = report.unparsed;
  j["accuracy"] = report.accuracy;
  j["f1_refutes"] = report.f1_refutes;
  j["f1_supports"] = report.f1_supports;
  j["macro_f1"] = report.macro_f1;
  // Parsed predictions only; unparsed_count holds the rest.
  j["confusion"] = {
      {"supports",
       {{"supports", report.confusion[0][0]}, {"refutes", report.confusion[0][1]}}},
      {"refutes", {{"supports", report.confusion[1][0]}, {"refutes", report.confusion[1][1]}}},
  };
  nlohmann::json tags = nlohmann::json::object();
  for (const auto& [tag, ts] : report.per_tag) {
    tags[tag] = {{"count", ts.total}, {"accuracy", ts.accuracy}, {"macro_f1", ts.macro_f1}};
  }
  j["per_tag"] = tags;
  return j.dump(2);
}

void write_report(const std::filesystem::path& path, const EvalReport& report) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot open " + path.string() + " for writing");
  out << report_to_json(report) << '\n';
  if (!out) throw DataError("short write to " + path.string());
}

void write_per_tag_csv(const std::filesystem::path& path, const EvalReport& report) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot open " + path.string() + " for writing");
  out << "tag,count,accuracy,macro_f1\n";
  for (const auto& [tag, ts] : report.per_tag)
    out << tag << ',' << ts.total << ',' << fmt_rate(ts.accuracy) << ',' << fmt_rate(ts.macro_f1)
        << '\n';
  if (!out) throw DataError("short write to " + path.string());
}

}  // namespace veritune
