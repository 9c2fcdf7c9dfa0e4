#include <doctest.h>

#include <cmath>

#include "veritune/common.hpp"
#include "veritune/objective.hpp"

using namespace veritune;

namespace {

PairQuantities at_reference() {
  PairQuantities q;
  q.lp_theta_chosen = q.lp_ref_chosen = -12.5;
  q.lp_theta_rejected = q.lp_ref_rejected = -9.25;
  return q;
}

PairQuantities with_deltas(double dc, double dr) {
  PairQuantities q = at_reference();
  q.lp_theta_chosen += dc;
  q.lp_theta_rejected += dr;
  return q;
}

Hyperparams default_hp() { return Hyperparams{}; }

// Central finite difference of the loss along one of the two policy logps.
double fd_along(Variant v, const PairQuantities& q, const Hyperparams& hp,
                const Multipliers& mu, bool chosen_side, double h = 1e-6) {
  PairQuantities lo = q, hi = q;
  if (chosen_side) {
    lo.lp_theta_chosen -= h;
    hi.lp_theta_chosen += h;
  } else {
    lo.lp_theta_rejected -= h;
    hi.lp_theta_rejected += h;
  }
  return (variant_loss(v, hi, hp, mu).loss - variant_loss(v, lo, hp, mu).loss) / (2.0 * h);
}

}  // namespace

TEST_SUITE("objective") {

TEST_CASE("ranking loss at the reference point is ln 2") {
  const double ln2 = 0.69314718055994531;
  CHECK(dpo_loss(at_reference(), 0.1) == doctest::Approx(ln2).epsilon(0).scale(0).epsilon(1e-15));
  CHECK(std::abs(dpo_loss(at_reference(), 0.1) - ln2) < 1e-12);
  CHECK(std::abs(dpo_loss(at_reference(), 3.7) - ln2) < 1e-12);
}

TEST_CASE("ranking loss frozen oracle at known deltas") {
  // independently evaluated closed form at dc=0.5, dr=-0.3, beta=0.1
  const double expected = 0.65394696731759001;
  CHECK(std::abs(dpo_loss(with_deltas(0.5, -0.3), 0.1) - expected) < 1e-15);
}

TEST_CASE("ranking loss saturates toward zero") {
  const double l = dpo_loss(with_deltas(100.0, -100.0), 1.0);
  CHECK(l > 0.0);
  CHECK(l < 1e-30);
}

TEST_CASE("ranking loss depends only on the two ratios") {
  PairQuantities q = with_deltas(0.7, -0.2);
  const double base = dpo_loss(q, 0.1);
  q.lp_theta_chosen -= 5.0;
  q.lp_ref_chosen -= 5.0;
  q.lp_theta_rejected -= 3.0;
  q.lp_ref_rejected -= 3.0;
  CHECK(std::abs(dpo_loss(q, 0.1) - base) < 1e-12);
}

TEST_CASE("ranking loss is monotone in each policy logp") {
  for (double dc : {-1.0, 0.0, 2.0}) {
    for (double dr : {-2.0, 0.0, 1.0}) {
      Hyperparams hp = default_hp();
      const auto b = variant_loss(Variant::PlainDpo, with_deltas(dc, dr), hp, {});
      CHECK(b.d_lp_chosen < 0.0);
      CHECK(b.d_lp_rejected > 0.0);
    }
  }
}

TEST_CASE("non-finite inputs are rejected") {
  PairQuantities q = at_reference();
  q.lp_theta_chosen = -std::numeric_limits<double>::infinity();
  CHECK_THROWS_AS(dpo_loss(q, 0.1), DataError);
  q = at_reference();
  q.lp_ref_rejected = std::nan("");
  CHECK_THROWS_AS(dpo_loss(q, 0.1), DataError);
}

TEST_CASE("constraints at the reference point equal their advantage offsets") {
  const double ln11 = 0.09531017980432486;   // ln 1.1
  const double mln09 = 0.10536051565782630;  // -ln 0.9
  CHECK(std::abs(constraint_chosen(at_reference(), 0.1) - ln11) < 1e-12);
  CHECK(std::abs(constraint_rejected(at_reference(), 0.1) - mln09) < 1e-12);

  SUBCASE("zero advantage gives zero constraints") {
    CHECK(constraint_chosen(at_reference(), 0.0) == 0.0);
    CHECK(constraint_rejected(at_reference(), 0.0) == 0.0);
  }
  SUBCASE("boundary: a gain of exactly ln(1+a1) zeroes the chosen constraint") {
    PairQuantities q = at_reference();
    q.lp_theta_chosen += std::log(1.1);
    CHECK(std::abs(constraint_chosen(q, 0.1)) < 1e-15);
  }
  SUBCASE("a2 at or above one is rejected") {
    CHECK_THROWS_AS(constraint_rejected(at_reference(), 1.0), ConfigError);
    CHECK_THROWS_AS(constraint_rejected(at_reference(), 1.5), ConfigError);
  }
}

TEST_CASE("full loss at the reference point, frozen oracle") {
  Hyperparams hp = default_hp();
  Multipliers mu{1.0, 1.0};
  const auto b = variant_loss(Variant::Improved, at_reference(), hp, mu);
  // ln 2 + ln sigmoid(0.1 * (ln 1.1 - ln 0.9)), evaluated independently
  CHECK(std::abs(b.loss - 0.009983199707631253) < 1e-12);
  CHECK(std::abs(b.preference - 0.69314718055994531) < 1e-12);
  CHECK(b.penalty < 0.0);
  CHECK(std::abs(b.c_chosen - 0.09531017980432486) < 1e-12);
  CHECK(std::abs(b.c_rejected - 0.10536051565782630) < 1e-12);
}

TEST_CASE("penalty term is nonpositive and vanishes in the deep-satisfied limit") {
  Hyperparams hp = default_hp();
  Multipliers mu{1.0, 1.0};
  for (double dc : {-3.0, 0.0, 3.0}) {
    const auto b = variant_loss(Variant::Improved, with_deltas(dc, -dc), hp, mu);
    CHECK(b.penalty <= 0.0);
  }
  // weighted constraint sum near -100: penalty -> 0 from below
  const auto deep = variant_loss(Variant::Improved, with_deltas(1000.0, -1000.0), hp, mu);
  CHECK(deep.penalty <= 0.0);
  CHECK(deep.penalty > -1e-30);
}

TEST_CASE("zero-advantage variant cancels exactly at the reference point") {
  Hyperparams hp = default_hp();  // a1 = a2 = 0.1 ignored by AdvZero
  Multipliers mu{1.0, 1.0};
  const auto b = variant_loss(Variant::AdvZero, at_reference(), hp, mu);
  CHECK(b.loss == 0.0);  // ln 2 + ln sigmoid(0) cancel in IEEE arithmetic
  CHECK(b.c_chosen == 0.0);
  CHECK(b.c_rejected == 0.0);
}

TEST_CASE("plain variant equals the bare ranking loss") {
  Hyperparams hp = default_hp();
  for (double dc : {-0.5, 0.0, 1.5}) {
    const PairQuantities q = with_deltas(dc, 0.3 * dc);
    const auto b = variant_loss(Variant::PlainDpo, q, hp, {});
    CHECK(b.loss == dpo_loss(q, hp.beta));
    CHECK(b.penalty == 0.0);
  }
}

TEST_CASE("zero multipliers reduce the full loss to ranking minus ln 2") {
  Hyperparams hp = default_hp();
  Multipliers zero{0.0, 0.0};
  for (double dc : {-1.0, 0.0, 0.8}) {
    const PairQuantities q = with_deltas(dc, -0.4 * dc);
    const auto full = variant_loss(Variant::FixedMu, q, hp, zero);
    const auto plain = variant_loss(Variant::PlainDpo, q, hp, {});
    CHECK(std::abs((full.loss - plain.loss) - (-0.69314718055994531)) < 1e-15);
    // gradients agree to machine precision: the constant term has zero slope
    CHECK(full.d_lp_chosen == plain.d_lp_chosen);
    CHECK(full.d_lp_rejected == plain.d_lp_rejected);
  }
}

TEST_CASE("supervised variant is the negative chosen logp") {
  Hyperparams hp = default_hp();
  PairQuantities q = with_deltas(0.3, -0.1);
  const auto b = variant_loss(Variant::Sft, q, hp, {});
  CHECK(b.loss == -q.lp_theta_chosen);
  CHECK(b.d_lp_chosen == -1.0);
  CHECK(b.d_lp_rejected == 0.0);
  CHECK(b.penalty == 0.0);

  const auto lo = variant_loss(Variant::LabelOnly, q, hp, {});
  CHECK(lo.loss == -q.lp_theta_chosen);
  CHECK(lo.d_lp_chosen == -1.0);
  CHECK(lo.d_lp_rejected == 0.0);
}

TEST_CASE("analytic gradients match finite differences for every variant") {
  Hyperparams hp = default_hp();
  Multipliers mu{0.7, 1.3};
  for (Variant v : {Variant::Improved, Variant::AdvZero, Variant::PlainDpo, Variant::FixedMu,
                    Variant::Sft, Variant::LabelOnly}) {
    for (double dc : {-0.9, 0.0, 1.1}) {
      const PairQuantities q = with_deltas(dc, 0.5 - dc);
      const auto b = variant_loss(v, q, hp, mu);
      const double fd_c = fd_along(v, q, hp, mu, true);
      const double fd_r = fd_along(v, q, hp, mu, false);
      CHECK(std::abs(b.d_lp_chosen - fd_c) < 1e-8);
      CHECK(std::abs(b.d_lp_rejected - fd_r) < 1e-8);
    }
  }
}

TEST_CASE("multiplier update arithmetic") {
  CHECK(update_multiplier(1.0, 0.09531018, 0.1) == doctest::Approx(0.990468982).epsilon(1e-12));
  // clamp at zero when the step overshoots
  CHECK(update_multiplier(0.001, 0.09531018, 0.1) == 0.0);
  // satisfied constraint (negative c) grows the multiplier
  CHECK(update_multiplier(0.5, -0.05, 0.1) == doctest::Approx(0.505).epsilon(1e-15));
  // fixpoint at c = 0
  CHECK(update_multiplier(0.37, 0.0, 0.1) == 0.37);

  SUBCASE("textbook direction behind the flag") {
    CHECK(update_multiplier(0.5, 0.05, 0.1, true) == doctest::Approx(0.505).epsilon(1e-15));
    CHECK(update_multiplier(0.001, -0.09531018, 0.1, true) == 0.0);
  }
}

TEST_CASE("multiplier non-negativity is preserved under random updates") {
  Rng rng(99);
  Multipliers mu{1.0, 1.0};
  for (int i = 0; i < 2000; ++i) {
    const double cc = (rng.uniform01() - 0.5) * 4.0;
    const double cr = (rng.uniform01() - 0.5) * 4.0;
    mu = update_multipliers(mu, cc, cr, 0.05);
    CHECK(mu.mu1 >= 0.0);
    CHECK(mu.mu2 >= 0.0);
  }
}

TEST_CASE("constant-constraint trajectories") {
  // c = +0.1 at lr 0.1 drains mu from 1.0 to exactly 0 at step 100
  double mu = 1.0;
  int zero_step = -1;
  for (int step = 1; step <= 120; ++step) {
    mu = update_multiplier(mu, 0.1, 0.1);
    if (mu == 0.0 && zero_step < 0) zero_step = step;
  }
  CHECK(zero_step == 100);
  CHECK(mu == 0.0);

  // c = -0.1 at lr 0.1 grows mu by exactly 0.01 per step
  mu = 1.0;
  for (int step = 1; step <= 50; ++step) {
    const double before = mu;
    mu = update_multiplier(mu, -0.1, 0.1);
    CHECK(mu - before == doctest::Approx(0.01).epsilon(1e-14));
  }
}

TEST_CASE("variant predicate tables") {
  CHECK(variant_updates_multipliers(Variant::Improved));
  CHECK(variant_updates_multipliers(Variant::AdvZero));
  CHECK(!variant_updates_multipliers(Variant::PlainDpo));
  CHECK(!variant_updates_multipliers(Variant::FixedMu));
  CHECK(!variant_updates_multipliers(Variant::Sft));
  CHECK(!variant_updates_multipliers(Variant::LabelOnly));

  CHECK(variant_has_penalty(Variant::Improved));
  CHECK(variant_has_penalty(Variant::AdvZero));
  CHECK(variant_has_penalty(Variant::FixedMu));
  CHECK(!variant_has_penalty(Variant::PlainDpo));
  CHECK(!variant_has_penalty(Variant::Sft));
  CHECK(!variant_has_penalty(Variant::LabelOnly));

  Hyperparams hp = default_hp();
  hp.mu_init = 0.25;
  const auto mi = initial_multipliers(Variant::Improved, hp);
  CHECK(mi.mu1 == 0.25);
  CHECK(mi.mu2 == 0.25);
  const auto mp = initial_multipliers(Variant::PlainDpo, hp);
  CHECK(mp.mu1 == 0.0);
  CHECK(mp.mu2 == 0.0);
}

TEST_CASE("advantage-zero ignores configured advantages") {
  Hyperparams hp = default_hp();
  hp.a1 = 0.4;
  hp.a2 = 0.6;
  const auto b = variant_loss(Variant::AdvZero, at_reference(), hp, {1.0, 1.0});
  CHECK(b.c_chosen == 0.0);
  CHECK(b.c_rejected == 0.0);
  CHECK(b.loss == 0.0);
}

}  // TEST_SUITE
