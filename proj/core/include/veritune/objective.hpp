#pragma once

#include "veritune/types.hpp"

namespace veritune {

// Log-probabilities entering the loss for one pair, all summed over
// completion tokens: the training policy and the frozen reference, on the
// chosen and rejected completions.
struct PairQuantities {
  double lp_theta_chosen = 0.0;
  double lp_theta_rejected = 0.0;
  double lp_ref_chosen = 0.0;
  double lp_ref_rejected = 0.0;
};

struct Multipliers {
  double mu1 = 0.0;  // paired with the chosen-side constraint
  double mu2 = 0.0;  // paired with the rejected-side constraint
};

// Everything the trainer needs from one pair's loss evaluation: the value,
// the two constraint measurements, and d(loss)/d(lp_theta) seeds for
// backpropagation. Reference log-probs are constants, so no seeds for them.
struct LossBreakdown {
  double loss = 0.0;
  double preference = 0.0;   // the ranking term alone
  double penalty = 0.0;      // the multiplier term alone (0 when absent)
  double c_chosen = 0.0;     // <= 0 once the chosen completion gained enough mass
  double c_rejected = 0.0;   // <= 0 once the rejected completion lost enough mass
  double d_lp_chosen = 0.0;
  double d_lp_rejected = 0.0;
};

// Ranking term: -ln sigmoid(beta * ((lp_t_c - lp_r_c) - (lp_t_r - lp_r_r))).
double dpo_loss(const PairQuantities& q, double beta);

// Chosen-side constraint: -(lp_t_c - lp_r_c) + ln(1 + a1).
// Rejected-side constraint: (lp_t_r - lp_r_r) - ln(1 - a2).
double constraint_chosen(const PairQuantities& q, double a1);
double constraint_rejected(const PairQuantities& q, double a2);

// Full loss for a variant, with analytic gradients w.r.t. the two policy
// log-probs. Sft/LabelOnly ignore the rejected side and the reference.
LossBreakdown variant_loss(Variant v, const PairQuantities& q, const Hyperparams& hp,
                           const Multipliers& mu);

// One multiplier update from a (batch-mean) constraint measurement:
// mu <- max(mu - lr_mu * c, 0). With dual_ascent the sign flips to the
// textbook direction, mu <- max(mu + lr_mu * c, 0).
double update_multiplier(double mu, double c, double lr_mu, bool dual_ascent = false);

Multipliers update_multipliers(const Multipliers& mu, double c_chosen_mean,
                               double c_rejected_mean, double lr_mu, bool dual_ascent = false);

// Whether a variant maintains multipliers across steps.
bool variant_updates_multipliers(Variant v);
// Whether a variant's loss includes the multiplier penalty term.
bool variant_has_penalty(Variant v);
// Initial multipliers for a variant under the given hyperparameters.
Multipliers initial_multipliers(Variant v, const Hyperparams& hp);

}  // namespace veritune
