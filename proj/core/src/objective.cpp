#include "veritune/objective.hpp"

#include <algorithm>
#include <cmath>

namespace veritune {

double dpo_loss(const PairQuantities& q, double beta) {
  const double margin =
      (q.lp_theta_chosen - q.lp_ref_chosen) - (q.lp_theta_rejected - q.lp_ref_rejected);
  return -log_sigmoid(beta * margin);
}

double constraint_chosen(const PairQuantities& q, double a1) {
  return -(q.lp_theta_chosen - q.lp_ref_chosen) + std::log1p(a1);
}

double constraint_rejected(const PairQuantities& q, double a2) {
  return (q.lp_theta_rejected - q.lp_ref_rejected) - std::log1p(-a2);
}

LossBreakdown variant_loss(Variant v, const PairQuantities& q, const Hyperparams& hp,
                           const Multipliers& mu) {
  LossBreakdown out;
  if (v == Variant::Sft || v == Variant::LabelOnly) {
    out.loss = -q.lp_theta_chosen;
    out.preference = out.loss;
    out.d_lp_chosen = -1.0;
    return out;
  }

  const double margin =
      (q.lp_theta_chosen - q.lp_ref_chosen) - (q.lp_theta_rejected - q.lp_ref_rejected);
  const double z = hp.beta * margin;
  out.preference = -log_sigmoid(z);
  const double s_pref = sigmoid(-z);
  out.d_lp_chosen = -hp.beta * s_pref;
  out.d_lp_rejected = hp.beta * s_pref;
  out.loss = out.preference;

  if (!variant_has_penalty(v)) return out;

  const double a1 = (v == Variant::AdvZero) ? 0.0 : hp.a1;
  const double a2 = (v == Variant::AdvZero) ? 0.0 : hp.a2;
  out.c_chosen = constraint_chosen(q, a1);
  out.c_rejected = constraint_rejected(q, a2);
  const double z_pen = hp.beta * (mu.mu1 * out.c_chosen + mu.mu2 * out.c_rejected);
  out.penalty = log_sigmoid(z_pen);
  out.loss = out.preference + out.penalty;
  const double s_pen = sigmoid(-z_pen);
  out.d_lp_chosen -= hp.beta * mu.mu1 * s_pen;
  out.d_lp_rejected += hp.beta * mu.mu2 * s_pen;
  return out;
}

double update_multiplier(double mu, double c, double lr_mu, bool dual_ascent) {
  const double moved = dual_ascent ? mu + lr_mu * c : mu - lr_mu * c;
  return std::max(moved, 0.0);
}

Multipliers update_multipliers(const Multipliers& mu, double c_chosen_mean,
                               double c_rejected_mean, double lr_mu, bool dual_ascent) {
  return Multipliers{update_multiplier(mu.mu1, c_chosen_mean, lr_mu, dual_ascent),
                     update_multiplier(mu.mu2, c_rejected_mean, lr_mu, dual_ascent)};
}

bool variant_updates_multipliers(Variant v) {
  return v == Variant::Improved || v == Variant::AdvZero;
}

bool variant_has_penalty(Variant v) {
  return v == Variant::Improved || v == Variant::AdvZero || v == Variant::FixedMu;
}

Multipliers initial_multipliers(Variant v, const Hyperparams& hp) {
  if (!variant_has_penalty(v)) return Multipliers{0.0, 0.0};
  return Multipliers{hp.mu_init, hp.mu_init};
}

}  // namespace veritune
