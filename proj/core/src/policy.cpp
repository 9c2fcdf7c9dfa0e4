#include "veritune/policy.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>

namespace veritune {
namespace {

constexpr double kLnEps = 1e-5;  // layernorm variance floor
constexpr double kGeluC = 0.7978845608028653559;  // sqrt(2/pi)
constexpr double kGeluB = 0.044715;

// Vectorized tanh through exp, which Eigen lowers to SIMD for doubles. The
// clamp keeps exp finite; past it tanh is 1 to within one part in 1e17.
Mat tanh_of(const Mat& u) {
  return (1.0 - 2.0 / ((2.0 * u.array().min(19.5)).exp() + 1.0)).matrix();
}

// tanh factor of the gelu activation: tanh(c * (x + b * x^3)).
Mat gelu_tanh(const Mat& x) {
  const auto u = x.array();
  return tanh_of((kGeluC * (u + kGeluB * u.cube())).matrix());
}

// gelu(x) = 0.5 * x * (1 + t) with t the stored tanh factor.
Mat gelu_from_tanh(const Mat& x, const Mat& t) {
  return (0.5 * x.array() * (1.0 + t.array())).matrix();
}

// d gelu / dx given x and the stored tanh factor.
Mat gelu_grad_from_tanh(const Mat& x, const Mat& t) {
  const auto xa = x.array();
  const auto ta = t.array();
  return (0.5 * (1.0 + ta) +
          0.5 * xa * (1.0 - ta.square()) * kGeluC * (1.0 + 3.0 * kGeluB * xa.square()))
      .matrix();
}

// y = (x - mean) / sqrt(var + eps), no affine terms. Returns normalized rows
// and per-row 1/sqrt(var + eps).
void layernorm(const Mat& x, Mat& y, Vec& inv_std) {
  const auto n = x.rows();
  const auto d = x.cols();
  y.resize(n, d);
  inv_std.resize(n);
  for (Eigen::Index t = 0; t < n; ++t) {
    const double mu = x.row(t).mean();
    const double var = (x.row(t).array() - mu).square().sum() / static_cast<double>(d);
    const double is = 1.0 / std::sqrt(var + kLnEps);
    inv_std(t) = is;
    y.row(t) = (x.row(t).array() - mu) * is;
  }
}

// dX for y = LN(x) given upstream dY, stored y and 1/std.
Mat layernorm_backward(const Mat& dy, const Mat& y, const Vec& inv_std) {
  const auto n = dy.rows();
  const auto d = dy.cols();
  Mat dx(n, d);
  for (Eigen::Index t = 0; t < n; ++t) {
    const double m_dy = dy.row(t).mean();
    const double m_dyy = (dy.row(t).array() * y.row(t).array()).mean();
    dx.row(t) = ((dy.row(t).array() - m_dy) - y.row(t).array() * m_dyy) * inv_std(t);
  }
  return dx;
}

void softmax_rows_masked(Mat& s, int past, int /*n*/) {
  // Row t may attend to columns 0..past+t; later columns are future tokens.
  for (Eigen::Index t = 0; t < s.rows(); ++t) {
    const Eigen::Index limit = past + t + 1;
    auto seg = s.row(t).head(limit).array();
    const double m = seg.maxCoeff();
    seg = (seg - m).exp();
    seg *= 1.0 / seg.sum();
    if (limit < s.cols()) s.row(t).tail(s.cols() - limit).setZero();
  }
}

void write_u32(std::ostream& o, std::uint32_t v) { o.write(reinterpret_cast<const char*>(&v), 4); }
void write_u64(std::ostream& o, std::uint64_t v) { o.write(reinterpret_cast<const char*>(&v), 8); }
void write_f64(std::ostream& o, double v) { o.write(reinterpret_cast<const char*>(&v), 8); }

std::uint32_t read_u32(std::istream& i) {
  std::uint32_t v = 0;
  if (!i.read(reinterpret_cast<char*>(&v), 4)) throw DataError("checkpoint truncated");
  return v;
}
std::uint64_t read_u64(std::istream& i) {
  std::uint64_t v = 0;
  if (!i.read(reinterpret_cast<char*>(&v), 8)) throw DataError("checkpoint truncated");
  return v;
}
double read_f64(std::istream& i) {
  double v = 0;
  if (!i.read(reinterpret_cast<char*>(&v), 8)) throw DataError("checkpoint truncated");
  return v;
}

void write_mat(std::ostream& o, const Mat& m) {
  write_u32(o, static_cast<std::uint32_t>(m.rows()));
  write_u32(o, static_cast<std::uint32_t>(m.cols()));
  o.write(reinterpret_cast<const char*>(m.data()),
          static_cast<std::streamsize>(sizeof(double) * m.size()));
}

Mat read_mat(std::istream& i) {
  const auto rows = read_u32(i);
  const auto cols = read_u32(i);
  if (rows > (1u << 20) || cols > (1u << 20)) throw DataError("checkpoint tensor too large");
  Mat m(rows, cols);
  if (!i.read(reinterpret_cast<char*>(m.data()),
              static_cast<std::streamsize>(sizeof(double) * m.size()))) {
    throw DataError("checkpoint truncated");
  }
  return m;
}

constexpr char kMagic[8] = {'V', 'T', 'N', 'E', 'C', 'K', 'P', 'T'};

}  // namespace

void PolicyConfig::validate() const {
  if (context_len < 2) throw ConfigError("context_len must be at least 2");
  if (d_model < 2) throw ConfigError("d_model must be at least 2");
  if (n_layers < 1) throw ConfigError("n_layers must be at least 1");
  if (n_heads < 1 || d_model % n_heads != 0)
    throw ConfigError("n_heads must divide d_model");
  if (d_ff < 1) throw ConfigError("d_ff must be at least 1");
  if (adapter_rank < 1) throw ConfigError("adapter_rank must be at least 1");
  if (!(adapter_alpha > 0.0)) throw ConfigError("adapter_alpha must be positive");
  if (!(init_std > 0.0)) throw ConfigError("init_std must be positive");
  if (!(adapter_a_std > 0.0)) throw ConfigError("adapter_a_std must be positive");
}

struct Policy::Base {
  std::vector<Mat> tensors;  // embed, per-layer {wq,wk,wv,wo,mi,mo}, head
  Mat pos;                   // frozen sinusoidal table
  std::uint64_t init_seed = 0;
};

struct Policy::Adapter {
  Mat a, b;    // effective delta = scale * a * b
  Mat da, db;
  double scale = 1.0;
};

Policy::Policy(const Policy&) = default;
Policy& Policy::operator=(const Policy&) = default;
Policy::Policy(Policy&&) noexcept = default;
Policy& Policy::operator=(Policy&&) noexcept = default;
Policy::~Policy() = default;

// Activation record for one contiguous block of positions.
struct SlotTrace {
  std::vector<int> tokens;
  std::vector<int> targets;
  int past_len = 0;
  KvCache cache;  // rows [0, past_len): inherited prefix; then own rows
  struct LayerTrace {
    Mat x_in, h1, q, attn_ctx, x_mid, h2, mlp_pre, mlp_act;
    Mat mlp_tanh;  // tanh factor of the activation, reused by the backward pass
    std::vector<Mat> probs;  // per head, n x (past+n)
    Vec inv1, inv2;
  };
  std::vector<LayerTrace> layers;
  Mat x_final, hf;
  Vec invf;
  Mat sm_probs;  // n x vocab, only when the head ran
  bool has_head = false;
};

struct PairTrace {
  // slot 0: shared prompt prefix (may be empty); slots 1+: scored branches.
  std::vector<SlotTrace> slots;
  bool consumed = false;
};

namespace {
// Tensor ordering inside Base::tensors and Policy::adapters_.
constexpr int kIdxEmbed = 0;
constexpr int idx_layer(int layer, int j) { return 1 + 6 * layer + j; }
// j: 0=wq 1=wk 2=wv 3=wo 4=mlp_in 5=mlp_out
constexpr int idx_head(int n_layers) { return 1 + 6 * n_layers; }
}  // namespace

Policy::Policy(PolicyConfig cfg, CharTokenizer tok) : cfg_(cfg), tok_(std::move(tok)) {}

Policy::Policy(PolicyConfig cfg, const CharTokenizer& tokenizer, std::uint64_t seed)
    : cfg_(cfg), tok_(tokenizer) {
  cfg_.validate();
  init_base(seed);
  init_adapters(seed);
  refresh_effective();
}

void Policy::init_base(std::uint64_t seed) {
  auto base = std::make_shared<Base>();
  base->init_seed = seed;
  Rng rng = derive_rng(seed, "base-weights");
  const int v = vocab_size();
  const int d = cfg_.d_model;
  auto gauss = [&](int rows, int cols) {
    Mat m(rows, cols);
    for (Eigen::Index r = 0; r < m.rows(); ++r)
      for (Eigen::Index c = 0; c < m.cols(); ++c) m(r, c) = rng.normal(0.0, cfg_.init_std);
    return m;
  };
  base->tensors.push_back(gauss(v, d));
  for (int l = 0; l < cfg_.n_layers; ++l) {
    base->tensors.push_back(gauss(d, d));        // wq
    base->tensors.push_back(gauss(d, d));        // wk
    base->tensors.push_back(gauss(d, d));        // wv
    base->tensors.push_back(gauss(d, d));        // wo
    base->tensors.push_back(gauss(d, cfg_.d_ff));  // mlp_in
    base->tensors.push_back(gauss(cfg_.d_ff, d));  // mlp_out
  }
  base->tensors.push_back(gauss(d, v));  // head

  base->pos.resize(cfg_.context_len, d);
  for (int t = 0; t < cfg_.context_len; ++t) {
    for (int i = 0; i < d / 2; ++i) {
      const double freq = std::pow(10000.0, -2.0 * i / static_cast<double>(d));
      base->pos(t, 2 * i) = cfg_.pos_scale * std::sin(t * freq);
      base->pos(t, 2 * i + 1) = cfg_.pos_scale * std::cos(t * freq);
    }
  }
  base_ = std::move(base);
}

void Policy::init_adapters(std::uint64_t seed) {
  Rng rng = derive_rng(seed, "adapter-weights");
  adapters_.clear();
  adapters_.reserve(base_->tensors.size());
  const int r = cfg_.adapter_rank;
  for (const Mat& w : base_->tensors) {
    Adapter ad;
    ad.scale = cfg_.adapter_alpha / static_cast<double>(r);
    ad.a.resize(w.rows(), r);
    for (Eigen::Index i = 0; i < ad.a.rows(); ++i)
      for (Eigen::Index j = 0; j < ad.a.cols(); ++j) ad.a(i, j) = rng.normal(0.0, cfg_.adapter_a_std);
    ad.b = Mat::Zero(r, w.cols());
    ad.da = Mat::Zero(ad.a.rows(), ad.a.cols());
    ad.db = Mat::Zero(ad.b.rows(), ad.b.cols());
    adapters_.push_back(std::move(ad));
  }
}

void Policy::refresh_effective() {
  effective_.resize(base_->tensors.size());
  for (std::size_t t = 0; t < base_->tensors.size(); ++t) {
    effective_[t] = base_->tensors[t];
    effective_[t].noalias() += adapters_[t].scale * (adapters_[t].a * adapters_[t].b);
  }
}

PairForward::PairForward() = default;
PairForward::PairForward(PairForward&&) noexcept = default;
PairForward& PairForward::operator=(PairForward&&) noexcept = default;
PairForward::~PairForward() = default;

SeqForward::SeqForward() = default;
SeqForward::SeqForward(SeqForward&&) noexcept = default;
SeqForward& SeqForward::operator=(SeqForward&&) noexcept = default;
SeqForward::~SeqForward() = default;

void Policy::forward_block(const std::vector<int>& tokens, int past_len, KvCache* cache,
                           Mat* logits, PairTrace* trace, int slot) const {
  const int n = static_cast<int>(tokens.size());
  const int d = cfg_.d_model;
  const int nh = cfg_.n_heads;
  const int dh = d / nh;
  const double att_scale = 1.0 / std::sqrt(static_cast<double>(dh));
  if (past_len + n > cfg_.context_len) {
    throw DataError("context overflow: " + std::to_string(past_len + n) + " positions exceed " +
                    std::to_string(cfg_.context_len));
  }
  if (cache == nullptr) throw DataError("forward_block requires a cache");
  for (int l = 0; l < cfg_.n_layers; ++l) {
    if (cache->k[l].rows() < past_len + n) {
      cache->k[l].conservativeResize(past_len + n, d);
      cache->v[l].conservativeResize(past_len + n, d);
    }
  }

  SlotTrace* st = nullptr;
  if (trace) {
    st = &trace->slots[slot];
    st->tokens = tokens;
    st->past_len = past_len;
    st->layers.resize(cfg_.n_layers);
  }

  const Mat& embed = effective_[kIdxEmbed];
  Mat x(n, d);
  for (int t = 0; t < n; ++t) {
    if (tokens[t] < 0 || tokens[t] >= vocab_size())
      throw DataError("token id out of range: " + std::to_string(tokens[t]));
    x.row(t) = embed.row(tokens[t]) + base_->pos.row(past_len + t);
  }

  Mat h1, h2, scores, ctx(n, d), mlp_pre, mlp_act;
  Vec inv1, inv2;
  for (int l = 0; l < cfg_.n_layers; ++l) {
    layernorm(x, h1, inv1);
    Mat q(n, d), k(n, d), v(n, d);
    q.noalias() = h1 * effective_[idx_layer(l, 0)];
    k.noalias() = h1 * effective_[idx_layer(l, 1)];
    v.noalias() = h1 * effective_[idx_layer(l, 2)];
    cache->k[l].middleRows(past_len, n) = k;
    cache->v[l].middleRows(past_len, n) = v;
    const int total = past_len + n;
    auto k_all = cache->k[l].topRows(total);
    auto v_all = cache->v[l].topRows(total);

    if (st) {
      st->layers[l].x_in = x;
      st->layers[l].h1 = h1;
      st->layers[l].q = q;
      st->layers[l].inv1 = inv1;
      st->layers[l].probs.resize(nh);
    }
    for (int h = 0; h < nh; ++h) {
      scores.noalias() =
          q.middleCols(h * dh, dh) * k_all.middleCols(h * dh, dh).transpose() * att_scale;
      softmax_rows_masked(scores, past_len, n);
      ctx.middleCols(h * dh, dh).noalias() = scores * v_all.middleCols(h * dh, dh);
      if (st) st->layers[l].probs[h] = scores;
    }
    Mat attn_out(n, d);
    attn_out.noalias() = ctx * effective_[idx_layer(l, 3)];
    x += attn_out;
    if (st) {
      st->layers[l].attn_ctx = ctx;
      st->layers[l].x_mid = x;
    }
    layernorm(x, h2, inv2);
    mlp_pre.noalias() = h2 * effective_[idx_layer(l, 4)];
    Mat mlp_t = gelu_tanh(mlp_pre);
    mlp_act = gelu_from_tanh(mlp_pre, mlp_t);
    x.noalias() += mlp_act * effective_[idx_layer(l, 5)];
    if (st) {
      st->layers[l].h2 = h2;
      st->layers[l].inv2 = inv2;
      st->layers[l].mlp_pre = mlp_pre;
      st->layers[l].mlp_act = mlp_act;
      st->layers[l].mlp_tanh = std::move(mlp_t);
    }
  }

  if (logits) {
    Mat hf;
    Vec invf;
    layernorm(x, hf, invf);
    logits->resize(n, vocab_size());
    logits->noalias() = hf * effective_[idx_head(cfg_.n_layers)];
    if (st) {
      st->x_final = x;
      st->hf = hf;
      st->invf = invf;
      st->has_head = true;
    }
  }
  cache->len = past_len + n;
}

double Policy::branch_logprob(const std::vector<int>& branch_tokens,
                              const std::vector<int>& targets, const KvCache& past,
                              PairTrace* trace, int slot) const {
  KvCache cache;
  const int total_cap = past.len + static_cast<int>(branch_tokens.size());
  cache.k.resize(cfg_.n_layers);
  cache.v.resize(cfg_.n_layers);
  for (int l = 0; l < cfg_.n_layers; ++l) {
    cache.k[l].resize(total_cap, cfg_.d_model);
    cache.v[l].resize(total_cap, cfg_.d_model);
    if (past.len > 0) {
      cache.k[l].topRows(past.len) = past.k[l].topRows(past.len);
      cache.v[l].topRows(past.len) = past.v[l].topRows(past.len);
    }
  }
  cache.len = past.len;

  Mat logits;
  forward_block(branch_tokens, past.len, &cache, &logits, trace, slot);

  // Row-wise log-softmax evaluated at the target ids.
  double lp = 0.0;
  Mat* sm = nullptr;
  if (trace) {
    trace->slots[slot].targets = targets;
    trace->slots[slot].sm_probs.resize(logits.rows(), logits.cols());
    sm = &trace->slots[slot].sm_probs;
    trace->slots[slot].cache = std::move(cache);
  }
  for (Eigen::Index t = 0; t < logits.rows(); ++t) {
    const double m = logits.row(t).maxCoeff();
    const double z = (logits.row(t).array() - m).exp().sum();
    const double lse = m + std::log(z);
    lp += logits(t, targets[static_cast<std::size_t>(t)]) - lse;
    if (sm) sm->row(t) = (logits.row(t).array() - lse).exp();
  }
  return lp;
}

namespace {
// Splits a BOS-prefixed prompt and a completion into the shared prefix and
// the scored branch: branch token 0 is the final prompt token, whose logits
// predict the first completion token.
struct BranchPlan {
  std::vector<int> prefix;
  std::vector<int> branch;
  std::vector<int> targets;
};

BranchPlan plan_branch(const std::vector<int>& prompt_ids, const std::vector<int>& completion_ids) {
  if (prompt_ids.empty()) throw DataError("prompt must contain at least BOS");
  BranchPlan p;
  p.prefix.assign(prompt_ids.begin(), prompt_ids.end() - 1);
  p.branch.reserve(completion_ids.size());
  p.branch.push_back(prompt_ids.back());
  if (!completion_ids.empty())
    p.branch.insert(p.branch.end(), completion_ids.begin(), completion_ids.end() - 1);
  p.targets = completion_ids;
  return p;
}
}  // namespace

double Policy::logprob(const std::vector<int>& prompt_ids,
                       const std::vector<int>& completion_ids) const {
  if (completion_ids.empty()) return 0.0;
  BranchPlan plan = plan_branch(prompt_ids, completion_ids);
  KvCache prefix_cache;
  prefix_cache.k.resize(cfg_.n_layers);
  prefix_cache.v.resize(cfg_.n_layers);
  const int p = static_cast<int>(plan.prefix.size());
  for (int l = 0; l < cfg_.n_layers; ++l) {
    prefix_cache.k[l].resize(p, cfg_.d_model);
    prefix_cache.v[l].resize(p, cfg_.d_model);
  }
  if (p > 0) forward_block(plan.prefix, 0, &prefix_cache, nullptr, nullptr, 0);
  return branch_logprob(plan.branch, plan.targets, prefix_cache, nullptr, 0);
}

PairForward Policy::forward_pair(const std::vector<int>& prompt_ids,
                                 const std::vector<int>& chosen_ids,
                                 const std::vector<int>& rejected_ids) const {
  if (chosen_ids.empty() || rejected_ids.empty())
    throw DataError("pair completions must be non-empty");
  PairForward out;
  out.trace = std::make_unique<PairTrace>();
  out.trace->slots.resize(3);

  BranchPlan plan_c = plan_branch(prompt_ids, chosen_ids);
  BranchPlan plan_r = plan_branch(prompt_ids, rejected_ids);

  KvCache prefix_cache;
  prefix_cache.k.resize(cfg_.n_layers);
  prefix_cache.v.resize(cfg_.n_layers);
  const int p = static_cast<int>(plan_c.prefix.size());
  for (int l = 0; l < cfg_.n_layers; ++l) {
    prefix_cache.k[l].resize(p, cfg_.d_model);
    prefix_cache.v[l].resize(p, cfg_.d_model);
  }
  if (p > 0) forward_block(plan_c.prefix, 0, &prefix_cache, nullptr, out.trace.get(), 0);
  out.lp_chosen = branch_logprob(plan_c.branch, plan_c.targets, prefix_cache, out.trace.get(), 1);
  out.lp_rejected = branch_logprob(plan_r.branch, plan_r.targets, prefix_cache, out.trace.get(), 2);
  out.trace->slots[0].cache = std::move(prefix_cache);
  return out;
}

SeqForward Policy::forward_seq(const std::vector<int>& prompt_ids,
                               const std::vector<int>& completion_ids) const {
  if (completion_ids.empty()) throw DataError("completion must be non-empty");
  SeqForward out;
  out.trace = std::make_unique<PairTrace>();
  out.trace->slots.resize(2);
  BranchPlan plan = plan_branch(prompt_ids, completion_ids);
  KvCache prefix_cache;
  prefix_cache.k.resize(cfg_.n_layers);
  prefix_cache.v.resize(cfg_.n_layers);
  const int p = static_cast<int>(plan.prefix.size());
  for (int l = 0; l < cfg_.n_layers; ++l) {
    prefix_cache.k[l].resize(p, cfg_.d_model);
    prefix_cache.v[l].resize(p, cfg_.d_model);
  }
  if (p > 0) forward_block(plan.prefix, 0, &prefix_cache, nullptr, out.trace.get(), 0);
  out.lp = branch_logprob(plan.branch, plan.targets, prefix_cache, out.trace.get(), 1);
  out.trace->slots[0].cache = std::move(prefix_cache);
  return out;
}

void Policy::backward_branch(PairTrace& trace, int slot, double dlp,
                             std::vector<Mat>& dk_prefix, std::vector<Mat>& dv_prefix) {
  SlotTrace& st = trace.slots[slot];
  const int n = static_cast<int>(st.tokens.size());
  const int d = cfg_.d_model;
  const int nh = cfg_.n_heads;
  const int dh = d / nh;
  const double att_scale = 1.0 / std::sqrt(static_cast<double>(dh));
  const int p = st.past_len;

  if (!st.has_head) throw DataError("branch trace has no head activations");

  // d(lp)/d(logits) = onehot(target) - softmax; scale by upstream dlp.
  Mat dlogits = -dlp * st.sm_probs;
  for (int t = 0; t < n; ++t) dlogits(t, st.targets[static_cast<std::size_t>(t)]) += dlp;

  auto grad_site = [&](int tensor, const Mat& x_in, const Mat& dy) {
    Adapter& ad = adapters_[static_cast<std::size_t>(tensor)];
    // dW = x^T dy; dA = s * dW * B^T, dB = s * A^T * dW, both via rank-r forms.
    Mat t1 = dy * ad.b.transpose();           // n x r
    ad.da.noalias() += ad.scale * (x_in.transpose() * t1);
    Mat t2 = x_in * ad.a;                     // n x r
    ad.db.noalias() += ad.scale * (t2.transpose() * dy);
  };

  const int head_idx = idx_head(cfg_.n_layers);
  grad_site(head_idx, st.hf, dlogits);
  Mat dhf = dlogits * effective_[head_idx].transpose();
  Mat dx = layernorm_backward(dhf, st.hf, st.invf);

  for (int l = cfg_.n_layers - 1; l >= 0; --l) {
    SlotTrace::LayerTrace& lt = st.layers[l];
    // mlp_out
    Mat dmlp_act = dx * effective_[idx_layer(l, 5)].transpose();
    grad_site(idx_layer(l, 5), lt.mlp_act, dx);
    Mat dmlp_pre =
        dmlp_act.array() * gelu_grad_from_tanh(lt.mlp_pre, lt.mlp_tanh).array();
    grad_site(idx_layer(l, 4), lt.h2, dmlp_pre);
    Mat dh2 = dmlp_pre * effective_[idx_layer(l, 4)].transpose();
    Mat dx_mid = dx + layernorm_backward(dh2, lt.h2, lt.inv2);

    // attention out
    Mat dctx = dx_mid * effective_[idx_layer(l, 3)].transpose();
    grad_site(idx_layer(l, 3), lt.attn_ctx, dx_mid);

    const int total = p + n;
    Mat dq = Mat::Zero(n, d);
    Mat dk_all = Mat::Zero(total, d);
    Mat dv_all = Mat::Zero(total, d);
    auto k_all = st.cache.k[l].topRows(total);
    auto v_all = st.cache.v[l].topRows(total);
    for (int h = 0; h < nh; ++h) {
      const Mat& probs = lt.probs[h];
      Mat dprobs(n, total);
      dprobs.noalias() = dctx.middleCols(h * dh, dh) * v_all.middleCols(h * dh, dh).transpose();
      dv_all.middleCols(h * dh, dh).noalias() +=
          probs.transpose() * dctx.middleCols(h * dh, dh);
      // softmax rows: ds = p .* (dp - sum(dp .* p))
      Mat dscores(n, total);
      for (int t = 0; t < n; ++t) {
        const double dot = dprobs.row(t).dot(probs.row(t));
        dscores.row(t) = probs.row(t).array() * (dprobs.row(t).array() - dot);
      }
      dq.middleCols(h * dh, dh).noalias() += att_scale * (dscores * k_all.middleCols(h * dh, dh));
      dk_all.middleCols(h * dh, dh).noalias() +=
          att_scale * (dscores.transpose() * lt.q.middleCols(h * dh, dh));
    }
    if (p > 0) {
      dk_prefix[static_cast<std::size_t>(l)] += dk_all.topRows(p);
      dv_prefix[static_cast<std::size_t>(l)] += dv_all.topRows(p);
    }
    Mat dk_own = dk_all.bottomRows(n);
    Mat dv_own = dv_all.bottomRows(n);

    grad_site(idx_layer(l, 0), lt.h1, dq);
    grad_site(idx_layer(l, 1), lt.h1, dk_own);
    grad_site(idx_layer(l, 2), lt.h1, dv_own);
    Mat dh1 = dq * effective_[idx_layer(l, 0)].transpose();
    dh1.noalias() += dk_own * effective_[idx_layer(l, 1)].transpose();
    dh1.noalias() += dv_own * effective_[idx_layer(l, 2)].transpose();
    dx = dx_mid + layernorm_backward(dh1, lt.h1, lt.inv1);
  }

  // embedding rows
  Adapter& emb = adapters_[kIdxEmbed];
  for (int t = 0; t < n; ++t) {
    const int tok = st.tokens[static_cast<std::size_t>(t)];
    Eigen::RowVectorXd t1 = dx.row(t) * emb.b.transpose();  // 1 x r
    emb.da.row(tok) += emb.scale * t1;
    emb.db.noalias() += emb.scale * (emb.a.row(tok).transpose() * dx.row(t));
  }
}

void Policy::backward_prefix(PairTrace& trace, const std::vector<Mat>& dk,
                             const std::vector<Mat>& dv) {
  SlotTrace& st = trace.slots[0];
  const int n = static_cast<int>(st.tokens.size());
  if (n == 0) return;
  const int d = cfg_.d_model;
  const int nh = cfg_.n_heads;
  const int dh = d / nh;
  const double att_scale = 1.0 / std::sqrt(static_cast<double>(dh));

  auto grad_site = [&](int tensor, const Mat& x_in, const Mat& dy) {
    Adapter& ad = adapters_[static_cast<std::size_t>(tensor)];
    Mat t1 = dy * ad.b.transpose();
    ad.da.noalias() += ad.scale * (x_in.transpose() * t1);
    Mat t2 = x_in * ad.a;
    ad.db.noalias() += ad.scale * (t2.transpose() * dy);
  };

  // No head above the prefix: gradient enters only through the K/V rows that
  // the branches (and the prefix itself) attended to.
  Mat dx = Mat::Zero(n, d);
  for (int l = cfg_.n_layers - 1; l >= 0; --l) {
    SlotTrace::LayerTrace& lt = st.layers[l];
    Mat dmlp_act = dx * effective_[idx_layer(l, 5)].transpose();
    grad_site(idx_layer(l, 5), lt.mlp_act, dx);
    Mat dmlp_pre =
        dmlp_act.array() * gelu_grad_from_tanh(lt.mlp_pre, lt.mlp_tanh).array();
    grad_site(idx_layer(l, 4), lt.h2, dmlp_pre);
    Mat dh2 = dmlp_pre * effective_[idx_layer(l, 4)].transpose();
    Mat dx_mid = dx + layernorm_backward(dh2, lt.h2, lt.inv2);

    Mat dctx = dx_mid * effective_[idx_layer(l, 3)].transpose();
    grad_site(idx_layer(l, 3), lt.attn_ctx, dx_mid);

    Mat dq = Mat::Zero(n, d);
    Mat dk_all = dk[static_cast<std::size_t>(l)];  // starts with branch-injected grads
    Mat dv_all = dv[static_cast<std::size_t>(l)];
    auto k_all = st.cache.k[l].topRows(n);
    auto v_all = st.cache.v[l].topRows(n);
    for (int h = 0; h < nh; ++h) {
      const Mat& probs = lt.probs[h];
      Mat dprobs(n, n);
      dprobs.noalias() = dctx.middleCols(h * dh, dh) * v_all.middleCols(h * dh, dh).transpose();
      dv_all.middleCols(h * dh, dh).noalias() +=
          probs.transpose() * dctx.middleCols(h * dh, dh);
      Mat dscores(n, n);
      for (int t = 0; t < n; ++t) {
        const double dot = dprobs.row(t).dot(probs.row(t));
        dscores.row(t) = probs.row(t).array() * (dprobs.row(t).array() - dot);
      }
      dq.middleCols(h * dh, dh).noalias() += att_scale * (dscores * k_all.middleCols(h * dh, dh));
      dk_all.middleCols(h * dh, dh).noalias() +=
          att_scale * (dscores.transpose() * lt.q.middleCols(h * dh, dh));
    }
    grad_site(idx_layer(l, 0), lt.h1, dq);
    grad_site(idx_layer(l, 1), lt.h1, dk_all);
    grad_site(idx_layer(l, 2), lt.h1, dv_all);
    Mat dh1 = dq * effective_[idx_layer(l, 0)].transpose();
    dh1.noalias() += dk_all * effective_[idx_layer(l, 1)].transpose();
    dh1.noalias() += dv_all * effective_[idx_layer(l, 2)].transpose();
    dx = dx_mid + layernorm_backward(dh1, lt.h1, lt.inv1);
  }

  Adapter& emb = adapters_[kIdxEmbed];
  for (int t = 0; t < n; ++t) {
    const int tok = st.tokens[static_cast<std::size_t>(t)];
    Eigen::RowVectorXd t1 = dx.row(t) * emb.b.transpose();
    emb.da.row(tok) += emb.scale * t1;
    emb.db.noalias() += emb.scale * (emb.a.row(tok).transpose() * dx.row(t));
  }
}

void Policy::backward_pair(PairTrace& trace, double dlp_chosen, double dlp_rejected) {
  if (trace.consumed) throw DataError("trace already consumed");
  if (trace.slots.size() != 3) throw DataError("trace is not a pair trace");
  trace.consumed = true;
  const int p = static_cast<int>(trace.slots[0].tokens.size());
  std::vector<Mat> dk(static_cast<std::size_t>(cfg_.n_layers));
  std::vector<Mat> dv(static_cast<std::size_t>(cfg_.n_layers));
  for (int l = 0; l < cfg_.n_layers; ++l) {
    dk[static_cast<std::size_t>(l)] = Mat::Zero(p, cfg_.d_model);
    dv[static_cast<std::size_t>(l)] = Mat::Zero(p, cfg_.d_model);
  }
  backward_branch(trace, 1, dlp_chosen, dk, dv);
  backward_branch(trace, 2, dlp_rejected, dk, dv);
  backward_prefix(trace, dk, dv);
}

void Policy::backward_seq(PairTrace& trace, double dlp) {
  if (trace.consumed) throw DataError("trace already consumed");
  if (trace.slots.size() != 2) throw DataError("trace is not a single-branch trace");
  trace.consumed = true;
  const int p = static_cast<int>(trace.slots[0].tokens.size());
  std::vector<Mat> dk(static_cast<std::size_t>(cfg_.n_layers));
  std::vector<Mat> dv(static_cast<std::size_t>(cfg_.n_layers));
  for (int l = 0; l < cfg_.n_layers; ++l) {
    dk[static_cast<std::size_t>(l)] = Mat::Zero(p, cfg_.d_model);
    dv[static_cast<std::size_t>(l)] = Mat::Zero(p, cfg_.d_model);
  }
  backward_branch(trace, 1, dlp, dk, dv);
  backward_prefix(trace, dk, dv);
}

void Policy::zero_grads() {
  for (auto& ad : adapters_) {
    ad.da.setZero();
    ad.db.setZero();
  }
}

void Policy::sgd_step(double lr) {
  for (auto& ad : adapters_) {
    ad.a.noalias() -= lr * ad.da;
    ad.b.noalias() -= lr * ad.db;
  }
  zero_grads();
  refresh_effective();
}

void Policy::adam_step(double lr, double beta1, double beta2, double eps, int t,
                       std::vector<double>& m, std::vector<double>& v) {
  const std::size_t n = num_trainable();
  if (m.empty()) m.assign(n, 0.0);
  if (v.empty()) v.assign(n, 0.0);
  if (m.size() != n || v.size() != n) throw DataError("moment buffer size mismatch");
  if (t < 1) throw DataError("step count must be 1-based");
  const double bc1 = 1.0 - std::pow(beta1, t);
  const double bc2 = 1.0 - std::pow(beta2, t);
  std::size_t off = 0;
  auto update = [&](Mat& w, const Mat& g) {
    const auto len = static_cast<std::size_t>(g.size());
    Eigen::Map<Eigen::ArrayXd> ma(m.data() + off, len);
    Eigen::Map<Eigen::ArrayXd> va(v.data() + off, len);
    Eigen::Map<const Eigen::ArrayXd> ga(g.data(), len);
    ma = beta1 * ma + (1.0 - beta1) * ga;
    va = beta2 * va + (1.0 - beta2) * ga.square();
    Eigen::Map<Eigen::ArrayXd> wa(w.data(), len);
    wa -= lr * (ma / bc1) / ((va / bc2).sqrt() + eps);
    off += len;
  };
  for (auto& ad : adapters_) {
    update(ad.a, ad.da);
    update(ad.b, ad.db);
  }
  zero_grads();
  refresh_effective();
}

std::vector<int> Policy::sample(const std::vector<int>& prompt_ids, int max_new,
                                double temperature, Rng& rng) const {
  if (prompt_ids.empty()) throw DataError("prompt must contain at least BOS");
  if (static_cast<int>(prompt_ids.size()) > cfg_.context_len)
    throw DataError("context overflow: prompt exceeds context window");
  KvCache cache;
  cache.k.resize(cfg_.n_layers);
  cache.v.resize(cfg_.n_layers);
  for (int l = 0; l < cfg_.n_layers; ++l) {
    cache.k[l].resize(cfg_.context_len, cfg_.d_model);
    cache.v[l].resize(cfg_.context_len, cfg_.d_model);
  }
  Mat logits;
  forward_block(prompt_ids, 0, &cache, &logits, nullptr, 0);
  Eigen::RowVectorXd row = logits.row(logits.rows() - 1);

  std::vector<int> out;
  for (int step = 0; step < max_new; ++step) {
    int next = 0;
    if (temperature <= 0.0) {
      double best = row(0);
      for (int j = 1; j < row.size(); ++j) {
        if (row(j) > best) {
          best = row(j);
          next = j;
        }
      }
    } else {
      Eigen::RowVectorXd scaled = row / temperature;
      const double m = scaled.maxCoeff();
      Eigen::RowVectorXd probs = (scaled.array() - m).exp();
      probs /= probs.sum();
      const double u = rng.uniform01();
      double acc = 0.0;
      next = static_cast<int>(probs.size()) - 1;
      for (int j = 0; j < probs.size(); ++j) {
        acc += probs(j);
        if (u < acc) {
          next = j;
          break;
        }
      }
    }
    if (next == tok_.eos_id()) break;
    out.push_back(next);
    if (cache.len >= cfg_.context_len) break;
    std::vector<int> one{next};
    forward_block(one, cache.len, &cache, &logits, nullptr, 0);
    row = logits.row(0);
  }
  return out;
}

Policy Policy::clone_reference() const { return *this; }

std::size_t Policy::num_trainable() const {
  std::size_t n = 0;
  for (const auto& ad : adapters_) n += static_cast<std::size_t>(ad.a.size() + ad.b.size());
  return n;
}

// Flat parameter order: per tensor, the A factor then the B factor,
// row-major within each.
double Policy::param_get(std::size_t i) const {
  std::size_t t = 0;
  for (const auto& ad : adapters_) {
    const auto na = static_cast<std::size_t>(ad.a.size());
    const auto nb = static_cast<std::size_t>(ad.b.size());
    if (i < t + na) return ad.a.data()[i - t];
    t += na;
    if (i < t + nb) return ad.b.data()[i - t];
    t += nb;
  }
  throw DataError("parameter index out of range");
}

void Policy::param_set(std::size_t i, double v) {
  std::size_t t = 0;
  for (auto& ad : adapters_) {
    const auto na = static_cast<std::size_t>(ad.a.size());
    const auto nb = static_cast<std::size_t>(ad.b.size());
    if (i < t + na) {
      ad.a.data()[i - t] = v;
      refresh_effective();
      return;
    }
    t += na;
    if (i < t + nb) {
      ad.b.data()[i - t] = v;
      refresh_effective();
      return;
    }
    t += nb;
  }
  throw DataError("parameter index out of range");
}

double Policy::grad_get(std::size_t i) const {
  std::size_t t = 0;
  for (const auto& ad : adapters_) {
    const auto na = static_cast<std::size_t>(ad.da.size());
    const auto nb = static_cast<std::size_t>(ad.db.size());
    if (i < t + na) return ad.da.data()[i - t];
    t += na;
    if (i < t + nb) return ad.db.data()[i - t];
    t += nb;
  }
  throw DataError("parameter index out of range");
}

std::vector<std::uint8_t> Policy::adapter_bytes() const {
  std::vector<std::uint8_t> out;
  out.reserve(num_trainable() * sizeof(double));
  auto push = [&](const Mat& m) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(m.data());
    out.insert(out.end(), p, p + sizeof(double) * static_cast<std::size_t>(m.size()));
  };
  for (const auto& ad : adapters_) {
    push(ad.a);
    push(ad.b);
  }
  return out;
}

std::uint64_t Policy::fingerprint() const {
  const auto bytes = adapter_bytes();
  return fnv1a(std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()));
}

void Policy::load_adapter_bytes(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() != num_trainable() * sizeof(double))
    throw DataError("adapter blob size mismatch");
  std::size_t off = 0;
  auto pull = [&](Mat& m) {
    std::memcpy(m.data(), bytes.data() + off, sizeof(double) * static_cast<std::size_t>(m.size()));
    off += sizeof(double) * static_cast<std::size_t>(m.size());
  };
  for (auto& ad : adapters_) {
    pull(ad.a);
    pull(ad.b);
  }
  refresh_effective();
}

void Policy::save(const std::filesystem::path& path) const {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot open for writing: " + path.string());
  save_stream(out);
  if (!out) throw DataError("write failed: " + path.string());
}

Policy Policy::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open for reading: " + path.string());
  return load_stream(in);
}

void Policy::save_stream(std::ostream& out) const {
  out.write(kMagic, 8);
  write_u32(out, 1);  // format version
  write_u32(out, static_cast<std::uint32_t>(cfg_.context_len));
  write_u32(out, static_cast<std::uint32_t>(cfg_.d_model));
  write_u32(out, static_cast<std::uint32_t>(cfg_.n_layers));
  write_u32(out, static_cast<std::uint32_t>(cfg_.n_heads));
  write_u32(out, static_cast<std::uint32_t>(cfg_.d_ff));
  write_u32(out, static_cast<std::uint32_t>(cfg_.adapter_rank));
  write_f64(out, cfg_.adapter_alpha);
  write_f64(out, cfg_.init_std);
  write_f64(out, cfg_.adapter_a_std);
  write_f64(out, cfg_.pos_scale);
  write_u64(out, base_->init_seed);
  const std::string& alpha = tok_.alphabet();
  write_u32(out, static_cast<std::uint32_t>(alpha.size()));
  out.write(alpha.data(), static_cast<std::streamsize>(alpha.size()));
  write_u32(out, static_cast<std::uint32_t>(base_->tensors.size()));
  for (const Mat& m : base_->tensors) write_mat(out, m);
  write_mat(out, base_->pos);
  write_u32(out, static_cast<std::uint32_t>(adapters_.size()));
  for (const auto& ad : adapters_) {
    write_f64(out, ad.scale);
    write_mat(out, ad.a);
    write_mat(out, ad.b);
  }
  if (!out) throw DataError("checkpoint write failed");
}

Policy Policy::load_stream(std::istream& in) {
  char magic[8];
  if (!in.read(magic, 8) || std::memcmp(magic, kMagic, 8) != 0)
    throw DataError("stream does not hold a policy checkpoint");
  const auto version = read_u32(in);
  if (version != 1) throw DataError("unsupported checkpoint version");
  PolicyConfig cfg;
  cfg.context_len = static_cast<int>(read_u32(in));
  cfg.d_model = static_cast<int>(read_u32(in));
  cfg.n_layers = static_cast<int>(read_u32(in));
  cfg.n_heads = static_cast<int>(read_u32(in));
  cfg.d_ff = static_cast<int>(read_u32(in));
  cfg.adapter_rank = static_cast<int>(read_u32(in));
  cfg.adapter_alpha = read_f64(in);
  cfg.init_std = read_f64(in);
  cfg.adapter_a_std = read_f64(in);
  cfg.pos_scale = read_f64(in);
  const auto init_seed = read_u64(in);
  const auto alpha_len = read_u32(in);
  std::string alphabet(alpha_len, '\0');
  if (!in.read(alphabet.data(), alpha_len)) throw DataError("checkpoint truncated");

  Policy p(cfg, CharTokenizer(std::move(alphabet)));
  p.cfg_.validate();
  auto base = std::make_shared<Base>();
  base->init_seed = init_seed;
  const auto n_tensors = read_u32(in);
  if (n_tensors != static_cast<std::uint32_t>(2 + 6 * cfg.n_layers))
    throw DataError("checkpoint tensor count mismatch");
  for (std::uint32_t t = 0; t < n_tensors; ++t) base->tensors.push_back(read_mat(in));
  base->pos = read_mat(in);
  p.base_ = std::move(base);
  const auto n_ad = read_u32(in);
  if (n_ad != n_tensors) throw DataError("checkpoint adapter count mismatch");
  for (std::uint32_t t = 0; t < n_ad; ++t) {
    Adapter ad;
    ad.scale = read_f64(in);
    ad.a = read_mat(in);
    ad.b = read_mat(in);
    if (ad.a.rows() != p.base_->tensors[t].rows() || ad.b.cols() != p.base_->tensors[t].cols() ||
        ad.a.cols() != ad.b.rows()) {
      throw DataError("checkpoint adapter shape mismatch");
    }
    ad.da = Mat::Zero(ad.a.rows(), ad.a.cols());
    ad.db = Mat::Zero(ad.b.rows(), ad.b.cols());
    p.adapters_.push_back(std::move(ad));
  }
  p.refresh_effective();
  return p;
}

}  // namespace veritune
