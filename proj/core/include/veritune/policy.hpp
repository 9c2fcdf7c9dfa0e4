#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "veritune/common.hpp"
#include "veritune/tokenizer.hpp"

namespace veritune {

using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vec = Eigen::VectorXd;

struct PolicyConfig {
  int context_len = 512;
  int d_model = 64;
  int n_layers = 2;
  int n_heads = 2;
  int d_ff = 256;
  int adapter_rank = 8;
  double adapter_alpha = 8.0;
  double init_std = 0.08;      // base weight scale
  double adapter_a_std = 0.1;  // adapter A factor scale; B starts at zero
  double pos_scale = 0.1;      // sinusoidal table amplitude

  void validate() const;
};

// Per-layer attention key/value history. Grows as decode extends it.
struct KvCache {
  std::vector<Mat> k;  // n_layers of (len x d_model)
  std::vector<Mat> v;
  int len = 0;
};

class Policy;

// Opaque activation record paired with forward_pair / forward_seq. Consumed
// exactly once by the matching backward call.
struct PairTrace;

struct PairForward {
  double lp_chosen = 0.0;
  double lp_rejected = 0.0;
  std::unique_ptr<PairTrace> trace;

  PairForward();
  PairForward(PairForward&&) noexcept;
  PairForward& operator=(PairForward&&) noexcept;
  ~PairForward();
};

struct SeqForward {
  double lp = 0.0;
  std::unique_ptr<PairTrace> trace;

  SeqForward();
  SeqForward(SeqForward&&) noexcept;
  SeqForward& operator=(SeqForward&&) noexcept;
  ~SeqForward();
};

// Decoder-only causal transformer over a character vocabulary. The dense
// base weights are frozen at construction; all training happens in low-rank
// adapter factors attached to the token embedding, the four attention
// projections, both MLP projections, and the output head. Arithmetic is
// double precision throughout and single-threaded, so every run with equal
// inputs is byte-reproducible.
class Policy {
 public:
  Policy(PolicyConfig cfg, const CharTokenizer& tokenizer, std::uint64_t seed);

  Policy(const Policy&);
  Policy& operator=(const Policy&);
  Policy(Policy&&) noexcept;
  Policy& operator=(Policy&&) noexcept;
  ~Policy();

  const PolicyConfig& config() const { return cfg_; }
  const CharTokenizer& tokenizer() const { return tok_; }
  int vocab_size() const { return tok_.vocab_size(); }

  // Sum over completion tokens of ln P(token | prompt, preceding tokens).
  // `prompt_ids` must begin with BOS; `completion_ids` is scored exactly as
  // given (no implicit EOS), so lp(prompt, a+b) = lp(prompt, a) +
  // lp(prompt+a, b). Throws DataError if the combined length exceeds the
  // context window.
  double logprob(const std::vector<int>& prompt_ids,
                 const std::vector<int>& completion_ids) const;

  // Forward passes that keep activations for a later backward call. The two
  // completions share the prompt-prefix computation.
  PairForward forward_pair(const std::vector<int>& prompt_ids,
                           const std::vector<int>& chosen_ids,
                           const std::vector<int>& rejected_ids) const;
  SeqForward forward_seq(const std::vector<int>& prompt_ids,
                         const std::vector<int>& completion_ids) const;

  // Accumulates d(loss)/d(adapter params) given d(loss)/d(lp) seeds.
  void backward_pair(PairTrace& trace, double dlp_chosen, double dlp_rejected);
  void backward_seq(PairTrace& trace, double dlp);

  void zero_grads();
  // theta <- theta - lr * grad, then clears grads.
  void sgd_step(double lr);
  // Moment-based step with bias correction; t is the 1-based step count.
  // `m` and `v` are flat over the trainable parameters, empty on first use.
  void adam_step(double lr, double beta1, double beta2, double eps, int t, std::vector<double>& m,
                 std::vector<double>& v);

  // Greedy (temperature == 0) or ancestral sampling with KV-cached decode.
  // Stops after EOS, max_new tokens, or when the context window fills.
  // The returned ids exclude the prompt and any trailing EOS.
  std::vector<int> sample(const std::vector<int>& prompt_ids, int max_new,
                          double temperature, Rng& rng) const;

  // Frozen snapshot sharing the base weights; adapters are copied by value.
  Policy clone_reference() const;

  // Flat view over all adapter parameters, in a fixed documented order.
  std::size_t num_trainable() const;
  double param_get(std::size_t i) const;
  void param_set(std::size_t i, double v);
  double grad_get(std::size_t i) const;

  // Raw little-endian adapter bytes and an order-sensitive fingerprint.
  std::vector<std::uint8_t> adapter_bytes() const;
  std::uint64_t fingerprint() const;
  void load_adapter_bytes(const std::vector<std::uint8_t>& bytes);

  void save(const std::filesystem::path& path) const;
  static Policy load(const std::filesystem::path& path);
  // Stream forms, for callers that append their own trailing sections.
  void save_stream(std::ostream& out) const;
  static Policy load_stream(std::istream& in);

 private:
  struct Base;        // frozen dense weights
  struct Adapter;     // one low-rank pair with grads
  struct Workspace;   // scratch for forward/backward

  Policy(PolicyConfig cfg, CharTokenizer tok);

  void init_base(std::uint64_t seed);
  void init_adapters(std::uint64_t seed);
  void refresh_effective();

  // tokens: ids fed at positions [past_len, past_len + n). The cache must
  // already hold K/V rows for [0, past_len); rows for the fed positions are
  // appended. Logits for the fed positions are produced when `logits` is
  // non-null; activations are recorded into `trace` slot `slot` when asked.
  void forward_block(const std::vector<int>& tokens, int past_len, KvCache* cache, Mat* logits,
                     PairTrace* trace, int slot) const;

  double branch_logprob(const std::vector<int>& branch_tokens,
                        const std::vector<int>& targets, const KvCache& past,
                        PairTrace* trace, int slot) const;

  void backward_branch(PairTrace& trace, int slot, double dlp,
                       std::vector<Mat>& dk_prefix, std::vector<Mat>& dv_prefix);
  void backward_prefix(PairTrace& trace, const std::vector<Mat>& dk,
                       const std::vector<Mat>& dv);

  PolicyConfig cfg_;
  CharTokenizer tok_;
  std::shared_ptr<const Base> base_;
  std::vector<Adapter> adapters_;
  // Dense base + scaled adapter product, rebuilt after every update.
  std::vector<Mat> effective_;

  friend struct PairTrace;
};

}  // namespace veritune
