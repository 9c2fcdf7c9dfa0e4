#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <vector>

#include "veritune/trainer.hpp"

using namespace veritune;

namespace {

PolicyConfig tiny_config() {
  PolicyConfig cfg;
  cfg.context_len = 128;
  cfg.d_model = 16;
  cfg.n_layers = 2;
  cfg.n_heads = 2;
  cfg.d_ff = 32;
  cfg.adapter_rank = 2;
  return cfg;
}

Policy tiny_policy(std::uint64_t seed = 5) {
  return Policy(tiny_config(), CharTokenizer::standard(), seed);
}

// Synthetic items whose chosen completions always carry "Yes" on claims
// ending in '!' and "No" otherwise; separable by a short prompt feature.
std::vector<TrainItem> toy_items(int n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<TrainItem> items;
  for (int i = 0; i < n; ++i) {
    const bool bang = rng.below(2) == 0;
    TrainItem it;
    it.record_id = "toy-" + std::to_string(i);
    it.prompt = std::string("CLAIM: item ") + char('a' + int(rng.below(26))) +
                (bang ? "!" : ".") + "\nANSWER:\n";
    it.chosen = bang ? "Yes, noted." : "No, noted.";
    it.rejected = bang ? "No, noted." : "Yes, noted.";
    items.push_back(std::move(it));
  }
  return items;
}

TrainerConfig quick_config(Variant v, int steps = 12) {
  TrainerConfig cfg;
  cfg.variant = v;
  cfg.max_steps = steps;
  cfg.eval_interval = 4;
  cfg.patience = 50;
  cfg.eval_max_pairs = 8;
  cfg.seed = 3;
  cfg.hyper.batch_size = 4;
  cfg.hyper.warmup_steps = 6;
  cfg.hyper.lr = 1e-3;
  return cfg;
}

struct TempDir {
  std::filesystem::path path;
  explicit TempDir(const char* stem) {
    path = std::filesystem::temp_directory_path() / stem;
    std::filesystem::create_directories(path);
  }
  ~TempDir() { std::error_code ec; std::filesystem::remove_all(path, ec); }
};

std::string slurp(const std::filesystem::path& p) {
  std::ifstream f(p, std::ios::binary);
  return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
}

}  // namespace

TEST_SUITE("trainer") {

TEST_CASE("learning rate schedule") {
  Hyperparams hp;
  hp.lr = 1e-4;
  hp.warmup_steps = 200;
  hp.decay = 0.999;
  CHECK(learning_rate(hp, 100) == doctest::Approx(5e-5).epsilon(1e-15));
  CHECK(learning_rate(hp, 200) == doctest::Approx(1e-4).epsilon(1e-15));
  CHECK(learning_rate(hp, 201) == doctest::Approx(1e-4 * 0.999).epsilon(1e-15));
  CHECK(learning_rate(hp, 203) == doctest::Approx(9.97002999e-5).epsilon(1e-12));
  CHECK(learning_rate(hp, 1) == doctest::Approx(5e-7).epsilon(1e-15));

  SUBCASE("zero warmup starts at full rate") {
    hp.warmup_steps = 0;
    CHECK(learning_rate(hp, 1) == doctest::Approx(1e-4 * 0.999).epsilon(1e-15));
  }
}

TEST_CASE("config validation") {
  TrainerConfig cfg = quick_config(Variant::Improved);
  cfg.max_steps = 0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = quick_config(Variant::Improved);
  cfg.eval_interval = 0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = quick_config(Variant::Improved);
  cfg.hyper.batch_size = 0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = quick_config(Variant::Improved);
  cfg.adam_beta1 = 1.0;
  cfg.optimizer = Optimizer::Adam;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("optimizer names round-trip") {
  CHECK(optimizer_to_string(Optimizer::Sgd) == "sgd");
  CHECK(optimizer_to_string(Optimizer::Adam) == "adam");
  CHECK(optimizer_from_string("sgd") == Optimizer::Sgd);
  CHECK(optimizer_from_string("adam") == Optimizer::Adam);
  CHECK_THROWS_AS(optimizer_from_string("momentum"), ConfigError);
}

TEST_CASE("item mappers") {
  PreferencePair p;
  p.record_id = "r";
  p.prompt = "P";
  p.chosen = "c";
  p.rejected = "j";
  const auto items = items_from_pairs({p});
  REQUIRE(items.size() == 1);
  CHECK(items[0].record_id == "r");
  CHECK(items[0].prompt == "P");
  CHECK(items[0].chosen == "c");
  CHECK(items[0].rejected == "j");

  LabelTarget t;
  t.record_id = "r2";
  t.prompt = "Q";
  t.target = "Yes";
  const auto lo = items_from_label_targets({t});
  REQUIRE(lo.size() == 1);
  CHECK(lo[0].prompt == "Q");
  CHECK(lo[0].chosen == "Yes");
  CHECK(lo[0].rejected.empty());
}

TEST_CASE("training is deterministic and logs a replayable multiplier trace") {
  const auto train_items = toy_items(16, 1);
  const auto val_items = toy_items(6, 2);
  const TrainerConfig cfg = quick_config(Variant::Improved);

  Policy p1 = tiny_policy();
  const Policy ref1 = p1.clone_reference();
  const auto out1 = train(p1, ref1, train_items, val_items, cfg);

  Policy p2 = tiny_policy();
  const Policy ref2 = p2.clone_reference();
  const auto out2 = train(p2, ref2, train_items, val_items, cfg);

  CHECK(p1.fingerprint() == p2.fingerprint());
  REQUIRE(out1.log.rows.size() == out2.log.rows.size());
  for (std::size_t i = 0; i < out1.log.rows.size(); ++i) {
    CHECK(out1.log.rows[i].train_loss == out2.log.rows[i].train_loss);
    CHECK(out1.log.rows[i].mu1 == out2.log.rows[i].mu1);
    CHECK(out1.log.rows[i].fingerprint == out2.log.rows[i].fingerprint);
  }

  // replay the multiplier recursion from the logged batch-mean constraints
  Multipliers mu = initial_multipliers(Variant::Improved, cfg.hyper);
  REQUIRE(out1.log.step_rows.size() == static_cast<std::size_t>(cfg.max_steps));
  for (const auto& row : out1.log.step_rows) {
    mu = update_multipliers(mu, row.c_chosen_mean, row.c_rejected_mean, cfg.hyper.lr_mu);
    CHECK(std::abs(mu.mu1 - row.mu1) < 1e-12);
    CHECK(std::abs(mu.mu2 - row.mu2) < 1e-12);
  }
}

TEST_CASE("reference columns stay constant over the run") {
  const auto train_items = toy_items(12, 3);
  const auto val_items = toy_items(6, 4);
  Policy p = tiny_policy();
  const Policy ref = p.clone_reference();
  const auto out = train(p, ref, train_items, val_items, quick_config(Variant::Improved));
  REQUIRE(out.log.rows.size() >= 2);
  for (const auto& row : out.log.rows) {
    CHECK(row.val_lp_ref_chosen == out.log.rows[0].val_lp_ref_chosen);
    CHECK(row.val_lp_ref_rejected == out.log.rows[0].val_lp_ref_rejected);
  }
}

TEST_CASE("plain variant keeps multipliers at zero") {
  const auto train_items = toy_items(12, 5);
  const auto val_items = toy_items(4, 6);
  Policy p = tiny_policy();
  const Policy ref = p.clone_reference();
  const auto out = train(p, ref, train_items, val_items, quick_config(Variant::PlainDpo));
  for (const auto& row : out.log.step_rows) {
    CHECK(row.mu1 == 0.0);
    CHECK(row.mu2 == 0.0);
  }
}

TEST_CASE("zero multipliers reproduce the plain variant's parameters bit-for-bit") {
  const auto train_items = toy_items(16, 7);
  const auto val_items = toy_items(6, 8);

  TrainerConfig frozen = quick_config(Variant::FixedMu);
  frozen.hyper.mu_init = 0.0;
  Policy pf = tiny_policy();
  const Policy rf = pf.clone_reference();
  train(pf, rf, train_items, val_items, frozen);

  const TrainerConfig plain = quick_config(Variant::PlainDpo);
  Policy pp = tiny_policy();
  const Policy rp = pp.clone_reference();
  train(pp, rp, train_items, val_items, plain);

  CHECK(pf.adapter_bytes() == pp.adapter_bytes());
}

TEST_CASE("best validation checkpoint is never worse than any logged validation loss") {
  const auto train_items = toy_items(16, 9);
  const auto val_items = toy_items(6, 10);
  Policy p = tiny_policy();
  const Policy ref = p.clone_reference();
  const auto out = train(p, ref, train_items, val_items, quick_config(Variant::Improved, 16));
  REQUIRE(!out.log.rows.empty());
  for (const auto& row : out.log.rows) CHECK(out.state.best_val <= row.val_loss + 1e-15);
  CHECK(!out.state.best_adapters.empty());
}

TEST_CASE("early stopping halts after patience evaluations without improvement") {
  const auto train_items = toy_items(12, 11);
  const auto val_items = toy_items(6, 12);
  TrainerConfig cfg = quick_config(Variant::Improved, 400);
  cfg.patience = 2;
  cfg.min_delta = 1e9;  // nothing can improve by this much
  Policy p = tiny_policy();
  const Policy ref = p.clone_reference();
  const auto out = train(p, ref, train_items, val_items, cfg);
  CHECK(out.early_stopped);
  // first eval sets the baseline, the next `patience` fail to beat it
  CHECK(out.steps_run == cfg.eval_interval * (1 + cfg.patience));
}

TEST_CASE("split run with checkpoint resume equals the unbroken run") {
  TempDir dir("trainer_resume_test");
  const auto train_items = toy_items(16, 13);
  const auto val_items = toy_items(6, 14);

  TrainerConfig whole = quick_config(Variant::Improved, 12);
  Policy pw = tiny_policy();
  const Policy rw = pw.clone_reference();
  const auto out_whole = train(pw, rw, train_items, val_items, whole);

  TrainerConfig half = whole;
  half.max_steps = 6;
  Policy ph = tiny_policy();
  const Policy rh = ph.clone_reference();
  const auto out_a = train(ph, rh, train_items, val_items, half);
  save_train_checkpoint(dir.path / "ck.bin", ph, out_a.state);

  auto [pr, state] = load_train_checkpoint(dir.path / "ck.bin");
  CHECK(pr.fingerprint() == ph.fingerprint());
  CHECK(state.step == 6);
  const auto out_b = train(pr, rh, train_items, val_items, whole, &state);

  CHECK(pr.adapter_bytes() == pw.adapter_bytes());
  REQUIRE(out_a.log.rows.size() + out_b.log.rows.size() == out_whole.log.rows.size());
  std::vector<LogRow> stitched = out_a.log.rows;
  stitched.insert(stitched.end(), out_b.log.rows.begin(), out_b.log.rows.end());
  for (std::size_t i = 0; i < stitched.size(); ++i) {
    CHECK(stitched[i].step == out_whole.log.rows[i].step);
    CHECK(stitched[i].train_loss == out_whole.log.rows[i].train_loss);
    CHECK(stitched[i].val_loss == out_whole.log.rows[i].val_loss);
    CHECK(stitched[i].fingerprint == out_whole.log.rows[i].fingerprint);
  }
  CHECK(out_b.state.best_val == out_whole.state.best_val);
}

TEST_CASE("checkpoint state round-trips including moment buffers") {
  TempDir dir("trainer_ckpt_state");
  Policy p = tiny_policy(41);
  TrainState st;
  st.step = 7;
  st.mu = {0.25, 1.5};
  st.best_val = 0.125;
  st.best_step = 4;
  st.evals_since_best = 1;
  st.window_loss_sum = 3.5;
  st.window_steps = 3;
  st.best_adapters = p.adapter_bytes();
  st.adam_m.assign(p.num_trainable(), 0.5);
  st.adam_v.assign(p.num_trainable(), 0.25);

  save_train_checkpoint(dir.path / "ck.bin", p, st);
  auto [q, rt] = load_train_checkpoint(dir.path / "ck.bin");
  CHECK(q.fingerprint() == p.fingerprint());
  CHECK(rt.step == 7);
  CHECK(rt.mu.mu1 == 0.25);
  CHECK(rt.mu.mu2 == 1.5);
  CHECK(rt.best_val == 0.125);
  CHECK(rt.best_step == 4);
  CHECK(rt.evals_since_best == 1);
  CHECK(rt.window_loss_sum == 3.5);
  CHECK(rt.window_steps == 3);
  CHECK(rt.best_adapters == st.best_adapters);
  CHECK(rt.adam_m == st.adam_m);
  CHECK(rt.adam_v == st.adam_v);

  SUBCASE("corrupt trailer is rejected") {
    const auto path = dir.path / "ck.bin";
    const auto size = std::filesystem::file_size(path);
    std::filesystem::resize_file(path, size - 9);
    CHECK_THROWS_AS(load_train_checkpoint(path), DataError);
  }
}

TEST_CASE("optimizer and checkpoint moments must agree on resume") {
  const auto train_items = toy_items(8, 15);
  const auto val_items = toy_items(4, 16);
  Policy p = tiny_policy();
  const Policy ref = p.clone_reference();

  TrainState moments;
  moments.step = 4;
  moments.adam_m.assign(p.num_trainable(), 0.1);
  moments.adam_v.assign(p.num_trainable(), 0.1);
  TrainerConfig sgd_cfg = quick_config(Variant::Improved);
  CHECK_THROWS_AS(train(p, ref, train_items, val_items, sgd_cfg, &moments), DataError);

  TrainState bare;
  bare.step = 4;
  TrainerConfig adam_cfg = quick_config(Variant::Improved);
  adam_cfg.optimizer = Optimizer::Adam;
  CHECK_THROWS_AS(train(p, ref, train_items, val_items, adam_cfg, &bare), DataError);
}

TEST_CASE("moment-based training is deterministic") {
  const auto train_items = toy_items(12, 17);
  const auto val_items = toy_items(4, 18);
  TrainerConfig cfg = quick_config(Variant::Improved);
  cfg.optimizer = Optimizer::Adam;

  Policy p1 = tiny_policy();
  const Policy r1 = p1.clone_reference();
  train(p1, r1, train_items, val_items, cfg);
  Policy p2 = tiny_policy();
  const Policy r2 = p2.clone_reference();
  train(p2, r2, train_items, val_items, cfg);
  CHECK(p1.adapter_bytes() == p2.adapter_bytes());
}

TEST_CASE("non-finite loss aborts with a diagnostic") {
  const auto train_items = toy_items(8, 19);
  const auto val_items = toy_items(4, 20);
  TrainerConfig cfg = quick_config(Variant::Improved, 40);
  cfg.hyper.lr = 1e160;  // guaranteed logit overflow within a few steps
  cfg.hyper.warmup_steps = 0;
  Policy p = tiny_policy();
  const Policy ref = p.clone_reference();
  try {
    train(p, ref, train_items, val_items, cfg);
    FAIL("expected a DataError");
  } catch (const DataError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("non-finite loss") != std::string::npos);
    CHECK(msg.find("record") != std::string::npos);
  }
}

TEST_CASE("empty training items are rejected") {
  Policy p = tiny_policy();
  const Policy ref = p.clone_reference();
  CHECK_THROWS_AS(train(p, ref, {}, toy_items(4, 21), quick_config(Variant::Improved)),
                  DataError);
}

TEST_CASE("logp evaluation is order-invariant and exact at the reference") {
  auto items = toy_items(10, 22);
  Policy p = tiny_policy();
  const Policy ref = p.clone_reference();

  const auto base = evaluate_logps(p, ref, items);
  CHECK(base.count == items.size());
  CHECK(base.lp_theta_chosen == base.lp_ref_chosen);
  CHECK(base.lp_theta_rejected == base.lp_ref_rejected);

  std::mt19937 g(7);
  std::shuffle(items.begin(), items.end(), g);
  const auto shuffled = evaluate_logps(p, ref, items);
  CHECK(shuffled.lp_theta_chosen == base.lp_theta_chosen);
  CHECK(shuffled.lp_theta_rejected == base.lp_theta_rejected);
  CHECK(shuffled.lp_ref_chosen == base.lp_ref_chosen);
  CHECK(shuffled.lp_ref_rejected == base.lp_ref_rejected);

  CHECK_THROWS_AS(evaluate_logps(p, ref, {}), DataError);
}

TEST_CASE("metrics csv has the pinned header and append adds rows only") {
  TempDir dir("trainer_csv");
  LogRow row;
  row.step = 100;
  row.train_loss = 0.5;
  row.lr = 1e-4;
  const auto path = dir.path / "metrics.csv";
  write_metrics_csv(path, {row});
  const std::string first = slurp(path);
  CHECK(first.rfind("step,loss,lr,mu1,mu2,val_lp_theta_chosen,val_lp_theta_rejected,"
                    "val_lp_ref_chosen,val_lp_ref_rejected\n",
                    0) == 0);
  LogRow row2 = row;
  row2.step = 200;
  append_metrics_csv(path, {row2});
  const std::string both = slurp(path);
  CHECK(both.rfind(first, 0) == 0);
  CHECK(std::count(both.begin(), both.end(), '\n') ==
        std::count(first.begin(), first.end(), '\n') + 1);

  const auto mupath = dir.path / "mu.csv";
  StepRow sr;
  sr.step = 1;
  write_mu_trace_csv(mupath, {sr});
  CHECK(slurp(mupath).rfind("step,c_chosen,c_rejected,mu1,mu2\n", 0) == 0);
}

TEST_CASE("csv round-trip is byte-stable across rewrite") {
  TempDir dir("trainer_csv_stable");
  std::vector<LogRow> rows(3);
  Rng rng(31);
  for (int i = 0; i < 3; ++i) {
    rows[i].step = (i + 1) * 100;
    rows[i].train_loss = rng.uniform01();
    rows[i].lr = rng.uniform01() * 1e-4;
    rows[i].mu1 = rng.uniform01();
    rows[i].val_lp_theta_chosen = -rng.uniform01() * 300;
  }
  const auto p1 = dir.path / "a.csv";
  const auto p2 = dir.path / "b.csv";
  write_metrics_csv(p1, rows);
  write_metrics_csv(p2, rows);
  CHECK(slurp(p1) == slurp(p2));
}

}  // TEST_SUITE
