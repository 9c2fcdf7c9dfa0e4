#include "veritune/trainer.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <numeric>
#include <tuple>

namespace veritune {

namespace {

constexpr char kTrailerMagic[8] = {'V', 'T', 'N', 'E', 'T', 'R', 'S', 'T'};

bool is_likelihood(Variant v) { return v == Variant::Sft || v == Variant::LabelOnly; }

struct EncodedItem {
  std::vector<int> prompt;
  std::vector<int> chosen;
  std::vector<int> rejected;
};

// Positions consumed by a scored sequence: the prompt feeds all but its last
// token through the shared prefix, the completion occupies the rest.
void check_fit(const PolicyConfig& cfg, const std::string& id, std::size_t prompt_len,
               std::size_t completion_len) {
  if (prompt_len == 0) throw DataError("record " + id + ": empty prompt");
  if (completion_len == 0) throw DataError("record " + id + ": empty completion");
  const std::size_t rows = prompt_len + completion_len - 1;
  if (rows > static_cast<std::size_t>(cfg.context_len)) {
    throw DataError("record " + id + ": " + std::to_string(rows) +
                    " positions exceed the " + std::to_string(cfg.context_len) +
                    "-token context window");
  }
}

std::vector<EncodedItem> encode_items(const Policy& policy, const std::vector<TrainItem>& items,
                                      Variant v) {
  const CharTokenizer& tok = policy.tokenizer();
  const bool pair_mode = !is_likelihood(v);
  std::vector<EncodedItem> out;
  out.reserve(items.size());
  for (const auto& it : items) {
    EncodedItem e;
    e.prompt = tok.encode_prompt(it.prompt);
    // LabelOnly supervises the answer token alone, with no end-of-sequence
    // marker; every other variant scores the full completion plus EOS.
    e.chosen = (v == Variant::LabelOnly) ? tok.encode(it.chosen)
                                         : tok.encode_completion(it.chosen);
    check_fit(policy.config(), it.record_id, e.prompt.size(), e.chosen.size());
    if (pair_mode) {
      e.rejected = tok.encode_completion(it.rejected);
      check_fit(policy.config(), it.record_id, e.prompt.size(), e.rejected.size());
    }
    out.push_back(std::move(e));
  }
  return out;
}

void put_u32(std::ostream& out, std::uint32_t v) {
  char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  out.write(b, 4);
}

std::uint32_t get_u32(std::istream& in) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  if (!in) throw DataError("truncated checkpoint trailer");
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
  return v;
}

void put_u64(std::ostream& out, std::uint64_t v) {
  char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  out.write(b, 8);
}

std::uint64_t get_u64(std::istream& in) {
  unsigned char b[8];
  in.read(reinterpret_cast<char*>(b), 8);
  if (!in) throw DataError("truncated checkpoint trailer");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

void put_i32(std::ostream& out, int v) { put_u32(out, static_cast<std::uint32_t>(v)); }
int get_i32(std::istream& in) { return static_cast<int>(get_u32(in)); }

void put_f64(std::ostream& out, double v) { put_u64(out, std::bit_cast<std::uint64_t>(v)); }
double get_f64(std::istream& in) { return std::bit_cast<double>(get_u64(in)); }

std::string fmt_g17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

// A NaN or infinite loss poisons every parameter through the shared update,
// so training aborts immediately with the numbers that produced it.
void check_finite(const LossBreakdown& bd, const PairQuantities& q, int step,
                  const std::string& record_id, const Multipliers& mu) {
  if (std::isfinite(bd.loss)) return;
  throw DataError("non-finite loss at step " + std::to_string(step) + ", record " + record_id +
                  ": loss=" + fmt_g17(bd.loss) +
                  " lp_theta_chosen=" + fmt_g17(q.lp_theta_chosen) +
                  " lp_theta_rejected=" + fmt_g17(q.lp_theta_rejected) +
                  " lp_ref_chosen=" + fmt_g17(q.lp_ref_chosen) +
                  " lp_ref_rejected=" + fmt_g17(q.lp_ref_rejected) + " mu1=" + fmt_g17(mu.mu1) +
                  " mu2=" + fmt_g17(mu.mu2));
}

}  // namespace

std::string optimizer_to_string(Optimizer o) {
  switch (o) {
    case Optimizer::Sgd: return "sgd";
    case Optimizer::Adam: return "adam";
  }
  throw ConfigError("invalid optimizer value");
}

Optimizer optimizer_from_string(const std::string& s) {
  if (s == "sgd") return Optimizer::Sgd;
  if (s == "adam") return Optimizer::Adam;
  throw ConfigError("unknown optimizer: '" + s + "'");
}

void TrainerConfig::validate() const {
  hyper.validate();
  if (max_steps < 1) throw ConfigError("max_steps must be positive");
  if (eval_interval < 1) throw ConfigError("eval_interval must be positive");
  if (patience < 1) throw ConfigError("patience must be positive");
  if (!(min_delta >= 0.0)) throw ConfigError("min_delta must be non-negative");
  if (eval_max_pairs < 1) throw ConfigError("eval_max_pairs must be positive");
  if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0)) throw ConfigError("adam_beta1 must be in [0, 1)");
  if (!(adam_beta2 >= 0.0 && adam_beta2 < 1.0)) throw ConfigError("adam_beta2 must be in [0, 1)");
  if (!(adam_eps > 0.0)) throw ConfigError("adam_eps must be positive");
}

std::vector<TrainItem> items_from_pairs(const std::vector<PreferencePair>& pairs) {
  std::vector<TrainItem> out;
  out.reserve(pairs.size());
  for (const auto& p : pairs) out.push_back({p.record_id, p.prompt, p.chosen, p.rejected});
  return out;
}

std::vector<TrainItem> items_from_label_targets(const std::vector<LabelTarget>& targets) {
  std::vector<TrainItem> out;
  out.reserve(targets.size());
  for (const auto& t : targets) out.push_back({t.record_id, t.prompt, t.target, std::string()});
  return out;
}

double learning_rate(const Hyperparams& hp, int step) {
  if (step < 1) throw ConfigError("learning_rate: steps are 1-based");
  if (hp.warmup_steps > 0 && step <= hp.warmup_steps)
    return hp.lr * static_cast<double>(step) / static_cast<double>(hp.warmup_steps);
  return hp.lr * std::pow(hp.decay, static_cast<double>(step - hp.warmup_steps));
}

TrainOutcome train(Policy& policy, const Policy& ref, const std::vector<TrainItem>& train_items,
                   const std::vector<TrainItem>& val_items, const TrainerConfig& cfg,
                   const TrainState* resume) {
  cfg.validate();
  if (train_items.empty()) throw DataError("no training items");
  const bool pair_mode = !is_likelihood(cfg.variant);
  const Hyperparams& hp = cfg.hyper;
  const int n = static_cast<int>(train_items.size());
  const int batch = hp.batch_size;

  const auto enc = encode_items(policy, train_items, cfg.variant);
  const auto enc_val = encode_items(policy, val_items, cfg.variant);

  // The reference never moves, so its log-probs are computed once.
  std::vector<double> ref_chosen(enc.size(), 0.0), ref_rejected(enc.size(), 0.0);
  if (pair_mode) {
    for (std::size_t i = 0; i < enc.size(); ++i) {
      ref_chosen[i] = ref.logprob(enc[i].prompt, enc[i].chosen);
      ref_rejected[i] = ref.logprob(enc[i].prompt, enc[i].rejected);
    }
  }

  // Fixed validation subsample for the whole run, resumes included.
  std::vector<int> val_idx(enc_val.size());
  std::iota(val_idx.begin(), val_idx.end(), 0);
  if (static_cast<int>(val_idx.size()) > cfg.eval_max_pairs) {
    Rng r = derive_rng(cfg.seed, "val-subsample");
    r.shuffle(val_idx);
    val_idx.resize(static_cast<std::size_t>(cfg.eval_max_pairs));
    std::sort(val_idx.begin(), val_idx.end());
  }
  std::vector<double> vref_chosen(val_idx.size(), 0.0), vref_rejected(val_idx.size(), 0.0);
  for (std::size_t i = 0; i < val_idx.size(); ++i) {
    const EncodedItem& e = enc_val[static_cast<std::size_t>(val_idx[i])];
    vref_chosen[i] = ref.logprob(e.prompt, e.chosen);
    if (pair_mode) vref_rejected[i] = ref.logprob(e.prompt, e.rejected);
  }

  TrainState state;
  if (resume != nullptr) {
    state = *resume;
    if (state.step < 0 || state.step > cfg.max_steps)
      throw ConfigError("resume step outside [0, max_steps]");
    // Moment buffers and the optimizer choice must agree, or the continued
    // run silently diverges from the unbroken one.
    if (cfg.optimizer == Optimizer::Sgd && !state.adam_m.empty())
      throw DataError("checkpoint carries moment buffers but the optimizer is plain SGD");
    if (cfg.optimizer == Optimizer::Adam && state.step > 0 && state.adam_m.empty())
      throw DataError("moment-based resume needs the checkpointed moment buffers");
  } else {
    state.mu = initial_multipliers(cfg.variant, hp);
  }
  if (state.best_adapters.empty()) state.best_adapters = policy.adapter_bytes();
  const int start_step = state.step;

  // Epoch permutations are derived from (seed, epoch); a batch that straddles
  // an epoch boundary pulls the head of the next permutation.
  std::uint64_t cached_epoch = ~std::uint64_t{0};
  std::vector<int> perm(static_cast<std::size_t>(n));
  auto item_at = [&](std::uint64_t global_index) -> int {
    const std::uint64_t epoch = global_index / static_cast<std::uint64_t>(n);
    const std::uint64_t pos = global_index % static_cast<std::uint64_t>(n);
    if (epoch != cached_epoch) {
      std::iota(perm.begin(), perm.end(), 0);
      Rng r = derive_rng(cfg.seed, "epoch-shuffle", epoch);
      r.shuffle(perm);
      cached_epoch = epoch;
    }
    return perm[static_cast<std::size_t>(pos)];
  };

  TrajectoryLog log;
  bool early_stopped = false;

  while (state.step < cfg.max_steps) {
    const int step1 = state.step + 1;
    policy.zero_grads();
    double batch_loss = 0.0, c_chosen_sum = 0.0, c_rejected_sum = 0.0;
    const double inv_b = 1.0 / static_cast<double>(batch);
    for (int j = 0; j < batch; ++j) {
      const std::uint64_t gi =
          static_cast<std::uint64_t>(state.step) * static_cast<std::uint64_t>(batch) +
          static_cast<std::uint64_t>(j);
      const int idx = item_at(gi);
      const auto& e = enc[static_cast<std::size_t>(idx)];
      PairQuantities q;
      if (pair_mode) {
        PairForward fwd = policy.forward_pair(e.prompt, e.chosen, e.rejected);
        q.lp_theta_chosen = fwd.lp_chosen;
        q.lp_theta_rejected = fwd.lp_rejected;
        q.lp_ref_chosen = ref_chosen[static_cast<std::size_t>(idx)];
        q.lp_ref_rejected = ref_rejected[static_cast<std::size_t>(idx)];
        const LossBreakdown bd = variant_loss(cfg.variant, q, hp, state.mu);
        check_finite(bd, q, step1, train_items[static_cast<std::size_t>(idx)].record_id,
                     state.mu);
        batch_loss += bd.loss;
        c_chosen_sum += bd.c_chosen;
        c_rejected_sum += bd.c_rejected;
        policy.backward_pair(*fwd.trace, bd.d_lp_chosen * inv_b, bd.d_lp_rejected * inv_b);
      } else {
        SeqForward fwd = policy.forward_seq(e.prompt, e.chosen);
        q.lp_theta_chosen = fwd.lp;
        const LossBreakdown bd = variant_loss(cfg.variant, q, hp, state.mu);
        check_finite(bd, q, step1, train_items[static_cast<std::size_t>(idx)].record_id,
                     state.mu);
        batch_loss += bd.loss;
        policy.backward_seq(*fwd.trace, bd.d_lp_chosen * inv_b);
      }
    }
    batch_loss *= inv_b;
    const double lr_now = learning_rate(hp, step1);
    if (cfg.optimizer == Optimizer::Adam) {
      policy.adam_step(lr_now, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps, step1, state.adam_m,
                       state.adam_v);
    } else {
      policy.sgd_step(lr_now);
    }
    const double c_chosen_mean = c_chosen_sum * inv_b;
    const double c_rejected_mean = c_rejected_sum * inv_b;
    if (variant_updates_multipliers(cfg.variant)) {
      state.mu =
          update_multipliers(state.mu, c_chosen_mean, c_rejected_mean, hp.lr_mu, cfg.dual_ascent);
    }
    state.step = step1;
    state.window_loss_sum += batch_loss;
    state.window_steps += 1;
    log.step_rows.push_back({step1, c_chosen_mean, c_rejected_mean, state.mu.mu1, state.mu.mu2});

    if (step1 % cfg.eval_interval == 0 && !val_idx.empty()) {
      double tc = 0.0, tr = 0.0, rc = 0.0, rr = 0.0, vloss = 0.0;
      for (std::size_t i = 0; i < val_idx.size(); ++i) {
        const EncodedItem& e = enc_val[static_cast<std::size_t>(val_idx[i])];
        PairQuantities q;
        q.lp_theta_chosen = policy.logprob(e.prompt, e.chosen);
        q.lp_ref_chosen = vref_chosen[i];
        if (pair_mode) {
          q.lp_theta_rejected = policy.logprob(e.prompt, e.rejected);
          q.lp_ref_rejected = vref_rejected[i];
        }
        vloss += variant_loss(cfg.variant, q, hp, state.mu).loss;
        tc += q.lp_theta_chosen;
        tr += q.lp_theta_rejected;
        rc += q.lp_ref_chosen;
        rr += q.lp_ref_rejected;
      }
      const double inv_m = 1.0 / static_cast<double>(val_idx.size());
      LogRow row;
      row.step = step1;
      row.train_loss = state.window_loss_sum / static_cast<double>(state.window_steps);
      row.lr = lr_now;
      row.mu1 = state.mu.mu1;
      row.mu2 = state.mu.mu2;
      row.val_lp_theta_chosen = tc * inv_m;
      row.val_lp_theta_rejected = tr * inv_m;
      row.val_lp_ref_chosen = rc * inv_m;
      row.val_lp_ref_rejected = rr * inv_m;
      row.val_loss = vloss * inv_m;
      row.fingerprint = policy.fingerprint();
      log.rows.push_back(row);
      state.window_loss_sum = 0.0;
      state.window_steps = 0;

      if (row.val_loss < state.best_val - cfg.min_delta) {
        state.best_val = row.val_loss;
        state.best_step = step1;
        state.evals_since_best = 0;
        state.best_adapters = policy.adapter_bytes();
      } else {
        state.evals_since_best += 1;
        if (state.evals_since_best >= cfg.patience) {
          early_stopped = true;
          break;
        }
      }
    }
  }

  TrainOutcome out;
  out.log = std::move(log);
  out.steps_run = state.step - start_step;
  out.early_stopped = early_stopped;
  out.state = std::move(state);
  return out;
}

LogpStats evaluate_logps(const Policy& model, const Policy& ref,
                         const std::vector<TrainItem>& items) {
  if (items.empty()) throw DataError("no pairs to evaluate");
  // Summation order is pinned by content, not by input position, so a
  // shuffled copy of the set produces bit-identical means.
  std::vector<std::size_t> order(items.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    const TrainItem& x = items[a];
    const TrainItem& y = items[b];
    return std::tie(x.record_id, x.prompt, x.chosen, x.rejected) <
           std::tie(y.record_id, y.prompt, y.chosen, y.rejected);
  });
  const auto enc = encode_items(model, items, Variant::Improved);
  double tc = 0.0, tr = 0.0, rc = 0.0, rr = 0.0;
  for (std::size_t k : order) {
    const EncodedItem& e = enc[k];
    tc += model.logprob(e.prompt, e.chosen);
    tr += model.logprob(e.prompt, e.rejected);
    rc += ref.logprob(e.prompt, e.chosen);
    rr += ref.logprob(e.prompt, e.rejected);
  }
  LogpStats s;
  s.count = items.size();
  const double inv = 1.0 / static_cast<double>(s.count);
  s.lp_theta_chosen = tc * inv;
  s.lp_theta_rejected = tr * inv;
  s.lp_ref_chosen = rc * inv;
  s.lp_ref_rejected = rr * inv;
  return s;
}

const char* kMetricsHeader =
    "step,loss,lr,mu1,mu2,val_lp_theta_chosen,val_lp_theta_rejected,"
    "val_lp_ref_chosen,val_lp_ref_rejected";

const char* kMuTraceHeader = "step,c_chosen,c_rejected,mu1,mu2";

namespace {

void emit_metrics_rows(std::ostream& out, const std::vector<LogRow>& rows) {
  for (const auto& r : rows) {
    out << r.step << ',' << fmt_g17(r.train_loss) << ',' << fmt_g17(r.lr) << ','
        << fmt_g17(r.mu1) << ',' << fmt_g17(r.mu2) << ',' << fmt_g17(r.val_lp_theta_chosen)
        << ',' << fmt_g17(r.val_lp_theta_rejected) << ',' << fmt_g17(r.val_lp_ref_chosen) << ','
        << fmt_g17(r.val_lp_ref_rejected) << '\n';
  }
}

void emit_mu_rows(std::ostream& out, const std::vector<StepRow>& rows) {
  for (const auto& r : rows) {
    out << r.step << ',' << fmt_g17(r.c_chosen_mean) << ',' << fmt_g17(r.c_rejected_mean) << ','
        << fmt_g17(r.mu1) << ',' << fmt_g17(r.mu2) << '\n';
  }
}

void write_csv(const std::filesystem::path& path, const char* header, auto&& emit, bool append) {
  std::ofstream out(path, append ? std::ios::app : std::ios::out);
  if (!out) throw DataError("cannot open " + path.string() + " for writing");
  if (!append) out << header << '\n';
  emit(out);
  if (!out) throw DataError("short write to " + path.string());
}

}  // namespace

void write_metrics_csv(const std::filesystem::path& path, const std::vector<LogRow>& rows) {
  write_csv(path, kMetricsHeader, [&](std::ostream& o) { emit_metrics_rows(o, rows); }, false);
}

void append_metrics_csv(const std::filesystem::path& path, const std::vector<LogRow>& rows) {
  write_csv(path, kMetricsHeader, [&](std::ostream& o) { emit_metrics_rows(o, rows); }, true);
}

void write_mu_trace_csv(const std::filesystem::path& path, const std::vector<StepRow>& rows) {
  write_csv(path, kMuTraceHeader, [&](std::ostream& o) { emit_mu_rows(o, rows); }, false);
}

void append_mu_trace_csv(const std::filesystem::path& path, const std::vector<StepRow>& rows) {
  write_csv(path, kMuTraceHeader, [&](std::ostream& o) { emit_mu_rows(o, rows); }, true);
}

void save_train_checkpoint(const std::filesystem::path& path, const Policy& policy,
                           const TrainState& state) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot open " + path.string() + " for writing");
  policy.save_stream(out);
  out.write(kTrailerMagic, 8);
  put_u32(out, 1);  // trailer version
  put_i32(out, state.step);
  put_f64(out, state.mu.mu1);
  put_f64(out, state.mu.mu2);
  put_f64(out, state.best_val);
  put_i32(out, state.best_step);
  put_i32(out, state.evals_since_best);
  put_f64(out, state.window_loss_sum);
  put_i32(out, state.window_steps);
  put_u64(out, state.best_adapters.size());
  if (!state.best_adapters.empty()) {
    out.write(reinterpret_cast<const char*>(state.best_adapters.data()),
              static_cast<std::streamsize>(state.best_adapters.size()));
  }
  put_u64(out, state.adam_m.size());
  for (double x : state.adam_m) put_f64(out, x);
  for (double x : state.adam_v) put_f64(out, x);
  if (!out) throw DataError("short write to " + path.string());
}

std::pair<Policy, TrainState> load_train_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  Policy policy = Policy::load_stream(in);
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, kTrailerMagic, 8) != 0)
    throw DataError(path.string() + " does not hold a trainer checkpoint");
  if (get_u32(in) != 1) throw DataError("unsupported trainer checkpoint version");
  TrainState state;
  state.step = get_i32(in);
  state.mu.mu1 = get_f64(in);
  state.mu.mu2 = get_f64(in);
  state.best_val = get_f64(in);
  state.best_step = get_i32(in);
  state.evals_since_best = get_i32(in);
  state.window_loss_sum = get_f64(in);
  state.window_steps = get_i32(in);
  const std::uint64_t nbytes = get_u64(in);
  state.best_adapters.resize(nbytes);
  if (nbytes != 0) {
    in.read(reinterpret_cast<char*>(state.best_adapters.data()),
            static_cast<std::streamsize>(nbytes));
    if (!in) throw DataError("truncated checkpoint trailer");
  }
  const std::uint64_t nmom = get_u64(in);
  state.adam_m.resize(nmom);
  state.adam_v.resize(nmom);
  for (std::uint64_t i = 0; i < nmom; ++i) state.adam_m[i] = get_f64(in);
  for (std::uint64_t i = 0; i < nmom; ++i) state.adam_v[i] = get_f64(in);
  return {std::move(policy), std::move(state)};
}

}  // namespace veritune
