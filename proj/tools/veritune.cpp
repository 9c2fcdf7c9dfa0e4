#include <filesystem>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "veritune/augmentation.hpp"
#include "veritune/eval.hpp"
#include "veritune/generation.hpp"
#include "veritune/io.hpp"
#include "veritune/runconfig.hpp"
#include "veritune/trainer.hpp"

namespace fs = std::filesystem;
using namespace veritune;

namespace {

fs::path resolved(const std::string& explicit_path, const RunConfig& cfg, const char* fallback) {
  if (!explicit_path.empty()) return fs::path(explicit_path);
  return fs::path(cfg.out_dir) / fallback;
}

fs::path claims_file(const RunConfig& cfg) { return resolved(cfg.claims_path, cfg, "claims.jsonl"); }
fs::path generations_file(const RunConfig& cfg) {
  return resolved(cfg.generations_path, cfg, "generations.jsonl");
}
fs::path pairs_file(const RunConfig& cfg) { return resolved(cfg.pairs_path, cfg, "pairs.jsonl"); }
fs::path checkpoint_file(const RunConfig& cfg) {
  return resolved(cfg.checkpoint_path, cfg, "checkpoint.bin");
}
fs::path report_file(const RunConfig& cfg) { return resolved(cfg.report_path, cfg, "report.json"); }

fs::path require_input(const fs::path& p, const char* what) {
  if (!fs::exists(p)) throw ConfigError(std::string(what) + " file not found: " + p.string());
  return p;
}

std::vector<ClaimRecord> records_of_split(const std::vector<ClaimRecord>& records, Split split) {
  std::vector<ClaimRecord> out;
  for (const auto& r : records)
    if (r.split == split) out.push_back(r);
  return out;
}

void cmd_synth(const RunConfig& cfg) {
  auto corpus = synthesize_corpus(cfg.seed, cfg.corpus);
  if (!cfg.counterfactuals_path.empty()) {
    const auto extra =
        load_claims(require_input(cfg.counterfactuals_path, "counterfactual claims"));
    corpus = ingest_counterfactual(corpus, extra);
  }
  save_claims(claims_file(cfg), corpus);
  int n_train = 0, n_val = 0, n_test = 0, n_refutes = 0;
  for (const auto& r : corpus) {
    if (r.split == Split::Train) ++n_train;
    if (r.split == Split::Validation) ++n_val;
    if (r.split == Split::Test) ++n_test;
    if (r.label == Label::Refutes) ++n_refutes;
  }
  const fs::path out(cfg.out_dir);
  save_claims(out / "claims_train.jsonl", records_of_split(corpus, Split::Train));
  save_claims(out / "claims_validation.jsonl", records_of_split(corpus, Split::Validation));
  save_claims(out / "claims_test.jsonl", records_of_split(corpus, Split::Test));
  std::cout << "synth: " << corpus.size() << " records (" << n_train << " train, " << n_val
            << " validation, " << n_test << " test; " << n_refutes << " refuting) -> "
            << claims_file(cfg).string() << '\n';
}

void cmd_gen(const RunConfig& cfg) {
  const auto records = load_claims(require_input(claims_file(cfg), "claims"));
  auto generator = make_generator(cfg.generator, cfg.seed);
  GenerationCache cache(generations_file(cfg));
  const std::size_t cached_before = cache.size();
  int groups = 0;
  for (const auto& rec : records) {
    if (rec.split == Split::Test) continue;
    for (const SettingId setting : settings_for_record(rec)) {
      try {
        cache.ensure(rec, setting, cfg.hyper.num_generations, *generator,
                     cfg.generator.temperature);
      } catch (const BackendError& e) {
        cache.save();  // keep what succeeded so a rerun resumes here
        throw BackendError("record '" + rec.id + "': " + e.what());
      }
      ++groups;
    }
  }
  cache.save();
  std::cout << "gen: " << groups << " record/setting groups, " << cache.size() << " samples ("
            << cached_before << " already cached, " << generator->calls()
            << " backend calls) -> " << generations_file(cfg).string() << '\n';
}

void cmd_pairs(const RunConfig& cfg) {
  const auto all_records = load_claims(require_input(claims_file(cfg), "claims"));
  std::vector<ClaimRecord> records;
  for (const auto& r : all_records)
    if (r.split != Split::Test) records.push_back(r);

  const auto samples = load_generations(require_input(generations_file(cfg), "generations"));
  std::map<std::string, std::vector<GenerationSample>> by_record;
  std::map<std::pair<std::string, int>, int> counts;
  for (const auto& s : samples) {
    by_record[s.record_id].push_back(s);
    counts[{s.record_id, static_cast<int>(s.setting)}] += 1;
  }

  const int k = cfg.hyper.num_generations;
  std::vector<std::string> missing;
  for (const auto& rec : records) {
    if (cfg.pairing.no_counterfactual && rec.counterfactual) continue;
    for (const SettingId setting : settings_for_record(rec)) {
      const auto it = counts.find({rec.id, static_cast<int>(setting)});
      const int have = it == counts.end() ? 0 : it->second;
      if (have < k) {
        missing.push_back(rec.id + " setting=" + std::to_string(static_cast<int>(setting)) +
                          " have=" + std::to_string(have) + " need=" + std::to_string(k));
      }
    }
  }
  if (!missing.empty()) {
    for (const auto& m : missing) std::cerr << "missing generations: " << m << '\n';
    throw DataError("generation cache incomplete for " + std::to_string(missing.size()) +
                    " record/setting groups");
  }

  PairingStats stats;
  const auto pairs = build_pairs(records, by_record, cfg.hyper, cfg.seed, cfg.pairing, &stats);
  save_pairs(pairs_file(cfg), pairs);
  std::cout << "pairs: " << stats.records_in << " records in, " << stats.records_paired
            << " paired, " << stats.records_skipped << " skipped, " << stats.pairs_out
            << " pairs -> " << pairs_file(cfg).string() << '\n';
}

void cmd_train(const RunConfig& cfg, bool resume) {
  const auto records = load_claims(require_input(claims_file(cfg), "claims"));
  std::map<std::string, Split> split_of;
  for (const auto& r : records) split_of[r.id] = r.split;

  std::vector<TrainItem> train_items, val_items;
  if (cfg.variant == Variant::LabelOnly) {
    train_items =
        items_from_label_targets(build_label_only_targets(records_of_split(records, Split::Train)));
    val_items = items_from_label_targets(
        build_label_only_targets(records_of_split(records, Split::Validation)));
  } else {
    const auto pairs = load_pairs(require_input(pairs_file(cfg), "pairs"));
    std::vector<PreferencePair> train_pairs, val_pairs;
    for (const auto& p : pairs) {
      const auto it = split_of.find(p.record_id);
      if (it == split_of.end())
        throw DataError("pair references unknown record '" + p.record_id + "'");
      if (it->second == Split::Train) train_pairs.push_back(p);
      else if (it->second == Split::Validation) val_pairs.push_back(p);
      else throw DataError("pair references test-split record '" + p.record_id + "'");
    }
    train_items = items_from_pairs(train_pairs);
    val_items = items_from_pairs(val_pairs);
  }

  const CharTokenizer tok = CharTokenizer::standard();
  const Policy initial(cfg.model, tok, cfg.seed);
  const TrainerConfig tcfg = cfg.trainer_config();

  TrainOutcome outcome;
  Policy policy = initial;
  if (resume) {
    auto loaded = load_train_checkpoint(require_input(checkpoint_file(cfg), "checkpoint"));
    policy = std::move(loaded.first);
    outcome = train(policy, initial, train_items, val_items, tcfg, &loaded.second);
  } else {
    outcome = train(policy, initial, train_items, val_items, tcfg);
  }

  save_train_checkpoint(checkpoint_file(cfg), policy, outcome.state);
  const fs::path metrics = fs::path(cfg.out_dir) / "metrics.csv";
  const fs::path mu_trace = fs::path(cfg.out_dir) / "mu_trace.csv";
  if (resume && fs::exists(metrics)) append_metrics_csv(metrics, outcome.log.rows);
  else write_metrics_csv(metrics, outcome.log.rows);
  if (resume && fs::exists(mu_trace)) append_mu_trace_csv(mu_trace, outcome.log.step_rows);
  else write_mu_trace_csv(mu_trace, outcome.log.step_rows);

  std::cout << "train: " << to_string(cfg.variant) << ", " << outcome.steps_run << " steps ("
            << train_items.size() << " train items, " << val_items.size() << " validation), "
            << (outcome.early_stopped ? "stopped early" : "ran to max_steps") << ", best step "
            << outcome.state.best_step << " val loss " << outcome.state.best_val << " -> "
            << checkpoint_file(cfg).string() << '\n';
}

// The checkpoint carries both the final parameters and the best-validation
// snapshot; scoring uses the snapshot once at least one validation pass ran.
Policy policy_for_eval(const RunConfig& cfg) {
  auto loaded = load_train_checkpoint(require_input(checkpoint_file(cfg), "checkpoint"));
  Policy policy = std::move(loaded.first);
  if (loaded.second.best_step > 0 && !loaded.second.best_adapters.empty())
    policy.load_adapter_bytes(loaded.second.best_adapters);
  return policy;
}

void print_report(const RunConfig& cfg, const EvalReport& report, const std::string& tag_csv) {
  write_report(report_file(cfg), report);
  if (!tag_csv.empty()) write_per_tag_csv(tag_csv, report);
  std::cout << report_to_json(report) << '\n';
}

void cmd_eval(const RunConfig& cfg, Split split, const std::string& tag_csv) {
  const auto records = load_claims(require_input(claims_file(cfg), "claims"));
  const auto subset = records_of_split(records, split);
  if (subset.empty()) throw DataError("no records in the requested split");
  const Policy policy = policy_for_eval(cfg);
  print_report(cfg, evaluate(policy, subset, cfg.eval_options()), tag_csv);
}

void cmd_cross_eval(const RunConfig& cfg, const std::string& eval_claims, Split split,
                    const std::string& tag_csv) {
  const auto home = load_claims(require_input(claims_file(cfg), "claims"));
  const auto foreign = load_claims(require_input(eval_claims, "evaluation claims"));
  const auto subset = records_of_split(foreign, split);
  if (subset.empty()) throw DataError("no records in the requested split");
  const Policy policy = policy_for_eval(cfg);
  print_report(cfg, cross_eval(policy, home, subset, cfg.eval_options()), tag_csv);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"fact-verification self-instruction workbench"};
  app.fallthrough();
  app.require_subcommand(1);

  std::string config_path, out_dir, variant_str, eval_claims, tag_csv, split_str = "test";
  std::uint64_t seed = 0;
  bool no_counterfactual = false, flat_sampling = false, resume = false;

  app.add_option("--config", config_path, "JSON run configuration");
  auto* seed_opt = app.add_option("--seed", seed, "override the run seed");
  auto* out_opt = app.add_option("--out", out_dir, "override the output directory");
  auto* variant_opt =
      app.add_option("--variant", variant_str, "objective variant")
          ->check(CLI::IsMember(
              {"improved", "adv-zero", "plain-dpo", "fixed-mu", "sft", "label-only"}));
  app.add_flag("--no-counterfactual", no_counterfactual,
               "drop counterfactual records when pairing");
  app.add_flag("--flat-sampling", flat_sampling, "every record contributes exactly n_min pairs");

  auto* sub_synth = app.add_subcommand("synth", "synthesize a claim corpus");
  auto* sub_gen = app.add_subcommand("gen", "sample the generator over all eligible settings");
  auto* sub_pairs = app.add_subcommand("pairs", "assemble preference pairs from cached samples");
  auto* sub_train = app.add_subcommand("train", "optimize the policy");
  sub_train->add_flag("--resume", resume, "continue from the existing checkpoint");
  auto* sub_eval = app.add_subcommand("eval", "score the checkpoint on one split");
  sub_eval->add_option("--split", split_str, "claims split to score")
      ->check(CLI::IsMember({"train", "validation", "test"}));
  sub_eval->add_option("--per-tag-csv", tag_csv, "also export per-tag rows for plotting");
  auto* sub_cross =
      app.add_subcommand("cross-eval", "score on a foreign corpus after a leakage check");
  sub_cross->add_option("--eval-claims", eval_claims, "foreign claims file")->required();
  sub_cross->add_option("--split", split_str, "claims split to score")
      ->check(CLI::IsMember({"train", "validation", "test"}));
  sub_cross->add_option("--per-tag-csv", tag_csv, "also export per-tag rows for plotting");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    app.exit(e);
    return 0;
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  try {
    RunConfig cfg = config_path.empty() ? RunConfig() : load_run_config(config_path);
    if (seed_opt->count() > 0) cfg.seed = seed;
    if (out_opt->count() > 0) cfg.out_dir = out_dir;
    if (variant_opt->count() > 0) cfg.variant = variant_from_string(variant_str);
    if (no_counterfactual) cfg.pairing.no_counterfactual = true;
    if (flat_sampling) cfg.pairing.flat_sampling = true;
    cfg.validate();
    fs::create_directories(cfg.out_dir);
    save_run_config(fs::path(cfg.out_dir) / "config.json", cfg);

    const Split split = split_from_string(split_str);
    if (sub_synth->parsed()) cmd_synth(cfg);
    else if (sub_gen->parsed()) cmd_gen(cfg);
    else if (sub_pairs->parsed()) cmd_pairs(cfg);
    else if (sub_train->parsed()) cmd_train(cfg, resume);
    else if (sub_eval->parsed()) cmd_eval(cfg, split, tag_csv);
    else if (sub_cross->parsed()) cmd_cross_eval(cfg, eval_claims, split, tag_csv);
    return 0;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 1;
  } catch (const BackendError& e) {
    std::cerr << "backend error: " << e.what() << '\n';
    return 3;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return 2;
  }
}
