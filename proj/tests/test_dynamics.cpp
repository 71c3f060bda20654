#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <complex>
#include <random>

#include "nqm/dynamics.hpp"
#include "nqm/spectrum.hpp"

using namespace nqm;

TEST_CASE("sgd moment step") {
  SECTION("one step from (0, 1)") {
    const SgdMoment next = sgd_moment_step({0.0, 1.0}, 1.0, 1.0, 0.5, 1.0);
    CHECK(next.mean == 0.0);
    CHECK(next.variance == Catch::Approx(0.5));  // 0.25*1 + 0.25*1
  }
  SECTION("alpha=0 leaves state unchanged") {
    const SgdMoment next = sgd_moment_step({0.3, 0.7}, 2.0, 1.0, 0.0, 4.0);
    CHECK(next.mean == 0.3);
    CHECK(next.variance == 0.7);
  }
  SECTION("deterministic alpha*h=1 converges in one step") {
    const SgdMoment next = sgd_moment_step({1.0, 0.0}, 1.0, 0.0, 1.0, 1.0);
    CHECK(next.mean == 0.0);
    CHECK(next.variance == 0.0);
  }
}

TEST_CASE("sgd closed form") {
  const InitCondition init;
  SECTION("t=0 gives initial risk") {
    CHECK(sgd_risk_closed_form(1.5, 1.0, 0.1, 4.0, 0, init) ==
          Catch::Approx(0.75));
  }
  SECTION("one step matches the moment recurrence") {
    // risk(1) = (h/2)(mean^2 + var) after one sgd_moment_step from (0, 1)
    CHECK(sgd_risk_closed_form(1.0, 1.0, 0.5, 1.0, 1, init) ==
          Catch::Approx(0.25));
  }
  SECTION("long-run risk approaches the steady state 1/6") {
    CHECK(sgd_risk_closed_form(1.0, 1.0, 0.5, 1.0, 200, init) ==
          Catch::Approx(1.0 / 6.0).epsilon(1e-12));
  }
  SECTION("rejects alpha*h > 2") {
    CHECK_THROWS_AS(sgd_risk_closed_form(1.0, 1.0, 2.5, 1.0, 10, init),
                    std::domain_error);
  }
  SECTION("closed form equals iterated recurrence on a random grid") {
    std::mt19937_64 rng(7);
    std::uniform_real_distribution<double> uh(0.01, 2.0), uc(0.0, 2.0),
        ufrac(0.05, 1.95), ub(1.0, 1024.0);
    std::uniform_int_distribution<int> ut(0, 400);
    for (int trial = 0; trial < 300; ++trial) {
      const double h = uh(rng), c = uc(rng), B = ub(rng);
      const double alpha = ufrac(rng) / h;
      const int t = ut(rng);
      SgdMoment m{0.0, 1.0};
      for (int k = 0; k < t; ++k) m = sgd_moment_step(m, h, c, alpha, B);
      const double recur = 0.5 * h * m.second_moment();
      const double closed = sgd_risk_closed_form(h, c, alpha, B, t, init);
      CHECK(closed == Catch::Approx(recur).epsilon(1e-10));
    }
  }
  SECTION("risk is non-increasing in batch size") {
    for (double B = 1.0; B < 4096.0; B *= 2.0) {
      const double r1 = sgd_risk_closed_form(1.0, 1.0, 0.4, B, 50, init);
      const double r2 = sgd_risk_closed_form(1.0, 1.0, 0.4, 2 * B, 50, init);
      CHECK(r2 <= r1 + 1e-15);
    }
  }
}

TEST_CASE("momentum transition matrix") {
  SECTION("beta=0 first row is the SGD variance recurrence") {
    const Lds lds = momentum_transition(1.0, 1.0, 0.3, 0.0, 1.0);
    CHECK(lds.transition.m[0][0] == Catch::Approx(0.49));
    CHECK(lds.transition.m[0][1] == 0.0);
    CHECK(lds.transition.m[0][2] == 0.0);
  }
  SECTION("critical damping puts all eigenvalues at beta") {
    // alpha h = 0.01, beta = (1 - 0.1)^2 = 0.81; the characteristic
    // polynomial (l - b)(l^2 - (b^2 - 2 ah b + (1-ah)^2) l + b^2) vanishes
    // at l = 0.81
    const double ah = 0.01, beta = 0.81;
    const double mid = beta * beta - 2.0 * ah * beta + (1.0 - ah) * (1.0 - ah);
    const double lambda = 0.81;
    const double quad = lambda * lambda - mid * lambda + beta * beta;
    CHECK(std::abs(quad) < 1e-12);
    CHECK(std::abs(lambda - beta) < 1e-15);
  }
  SECTION("infinite batch removes the noise") {
    const Lds lds = momentum_transition(1.0, 1.0, 0.1, 0.5, 1e30);
    for (int i = 0; i < 3; ++i) CHECK(lds.noise[i] == Catch::Approx(0.0).margin(1e-31));
  }
}

TEST_CASE("lds simulation") {
  SECTION("identity transition with zero noise is constant") {
    Lds lds;
    lds.transition = Mat3::identity();
    lds.noise = {0.0, 0.0, 0.0};
    const auto traj = lds_simulate(lds, {1.0, 2.0, 3.0}, 20);
    REQUIRE(traj.states.size() == 21);
    for (const auto& v : traj.states) {
      CHECK(v[0] == 1.0);
      CHECK(v[1] == 2.0);
      CHECK(v[2] == 3.0);
    }
  }
  SECTION("beta=0 first component reproduces the sgd second moment") {
    const double h = 0.7, c = 1.3, alpha = 0.4, B = 8.0;
    const Lds lds = momentum_transition(h, c, alpha, 0.0, B);
    const auto traj = lds_simulate(lds, {1.0, 0.0, 0.0}, 200);
    SgdMoment m{0.0, 1.0};
    for (std::size_t t = 0; t < traj.states.size(); ++t) {
      CHECK(traj.states[t][0] ==
            Catch::Approx(m.second_moment()).epsilon(1e-12));
      m = sgd_moment_step(m, h, c, alpha, B);
    }
  }
  SECTION("trajectory converges to the linear-solve fixed point") {
    const Lds lds = momentum_transition(1.0, 1.0, 0.2, 0.5, 4.0);
    const Vec3 star = lds_steady_state(lds);
    const auto traj = lds_simulate(lds, {1.0, 0.0, 0.0}, 400);
    const Vec3& last = traj.states.back();
    for (int i = 0; i < 3; ++i)
      CHECK(std::abs(last[i] - star[i]) < 1e-10);
  }
  SECTION("divergence is flagged") {
    Lds lds;
    lds.transition = Mat3::identity();
    for (int i = 0; i < 3; ++i) lds.transition.m[i][i] = 3.0;
    lds.noise = {0.0, 0.0, 0.0};
    const auto traj = lds_simulate(lds, {1e250, 0.0, 0.0}, 10000);
    CHECK(traj.diverged);
    CHECK(traj.diverged_at > 0);
  }
}

TEST_CASE("momentum roots") {
  SECTION("sum and product match the characteristic coefficients") {
    std::mt19937_64 rng(11);
    std::uniform_real_distribution<double> uh(0.01, 1.0), ub(0.0, 0.99),
        ua(0.001, 1.5);
    for (int trial = 0; trial < 200; ++trial) {
      const double h = uh(rng), beta = ub(rng), alpha = ua(rng) / h;
      const RootPair r = momentum_roots(h, alpha, beta);
      if (r.perturbed) continue;
      CHECK(std::abs(r.r1 * r.r2 - beta) < 1e-12);
      CHECK(std::abs(r.r1 + r.r2 - (1.0 - alpha * h + beta)) < 1e-12);
    }
  }
  SECTION("underdamped roots have norm sqrt(beta)") {
    const double h = 1.0, alpha = 0.25;  // (1-sqrt(ah))^2 = 0.25
    const double beta = 0.81;            // > 0.25: underdamped
    const RootPair r = momentum_roots(h, alpha, beta);
    CHECK(std::abs(r.r1) == Catch::Approx(std::sqrt(beta)).epsilon(1e-12));
    CHECK(std::abs(r.r2) == Catch::Approx(std::sqrt(beta)).epsilon(1e-12));
  }
  SECTION("overdamped r1 approx 1 - ah/(1-beta) at small learning rate") {
    const RootPair r = momentum_roots(1.0, 0.0005, 0.9);
    CHECK(r.r1.imag() == 0.0);
    CHECK(r.r1.real() == Catch::Approx(0.99475).margin(5e-5));
    CHECK(r.r1.real() == Catch::Approx(1.0 - 0.0005 / 0.1).margin(3e-4));
  }
  SECTION("repeated root is perturbed and flagged") {
    const RootPair r = momentum_roots(1.0, 0.25, 0.25);
    CHECK(r.perturbed);
    CHECK(std::abs(r.r1 - r.r2) > 0.0);
  }
}

TEST_CASE("momentum closed form matches the recurrence") {
  std::mt19937_64 rng(13);
  std::uniform_real_distribution<double> uh(0.01, 1.0), ub(0.01, 0.99),
      ua(0.001, 1.8), uc(0.0, 2.0), uB(1.0, 512.0);
  for (int trial = 0; trial < 120; ++trial) {
    const double h = uh(rng), beta = ub(rng), alpha = ua(rng) / h,
                 c = uc(rng), B = uB(rng);
    const Lds lds = momentum_transition(h, c, alpha, beta, B);
    const auto traj = lds_simulate(lds, {1.0, 0.0, 0.0}, 300);
    if (traj.diverged) continue;
    for (std::int64_t t = 0; t <= 300; t += 17) {
      const double exact = momentum_second_moment(h, c, alpha, beta, B, t, 1.0);
      const double ref = traj.states[static_cast<std::size_t>(t)][0];
      CHECK(exact == Catch::Approx(ref).margin(1e-10).epsilon(1e-10));
    }
  }
}

TEST_CASE("momentum risk bound") {
  const InitCondition init;
  SECTION("beta=0 reduces to Eq-4 decay plus the full steady-state term") {
    const double h = 1.0, c = 1.0, alpha = 0.5, B = 2.0;
    const double ss = alpha * c / (2.0 * B * (2.0 - alpha * h));
    for (std::int64_t t : {0, 1, 5, 50}) {
      const double decay = std::pow(1.0 - alpha * h, 2.0 * t);
      const double bound = momentum_risk_bound(h, c, alpha, 0.0, B, t, init);
      const double closed = sgd_risk_closed_form(h, c, alpha, B, t, init);
      CHECK(bound == Catch::Approx(decay * 0.5 * h + ss).epsilon(1e-12));
      CHECK(bound >= closed - 1e-15);
    }
  }
  SECTION("steady-state term matches the linear-system fixed point") {
    const double h = 1.0, alpha = 0.0005, beta = 0.9, c = 1.0, B = 1.0;
    const Vec3 star = lds_steady_state(momentum_transition(h, c, alpha, beta, B));
    const double bound_ss =
        (1.0 + beta) * alpha * c /
        (2.0 * B * (2.0 * beta + 2.0 - alpha * h) * (1.0 - beta));
    CHECK(bound_ss == Catch::Approx(1.2502e-3).epsilon(1e-3));
    CHECK(0.5 * h * star[0] == Catch::Approx(bound_ss).epsilon(1e-9));
    // effective-learning-rate comparison: plain SGD at alpha/(1-beta)
    const double sgd_ss = 0.005 * c / (2.0 * B * (2.0 - 0.005));
    CHECK(std::abs(bound_ss - sgd_ss) / sgd_ss < 0.003);
  }
  SECTION("exact risk never exceeds the bound") {
    std::mt19937_64 rng(17);
    std::uniform_real_distribution<double> uh(0.01, 1.0), ub(0.01, 0.99),
        ua(0.001, 1.5), uB(1.0, 128.0);
    for (int trial = 0; trial < 100; ++trial) {
      const double h = uh(rng), beta = ub(rng), alpha = ua(rng) / h,
                   B = uB(rng);
      if (std::max(std::abs(momentum_roots(h, alpha, beta).r1),
                   std::abs(momentum_roots(h, alpha, beta).r2)) >= 1.0)
        continue;
      for (std::int64_t t : {0, 1, 3, 10, 30, 100, 300}) {
        const double exact =
            0.5 * h * momentum_second_moment(h, 1.0, alpha, beta, B, t, 1.0);
        const double bound =
            momentum_risk_bound(h, 1.0, alpha, beta, B, t, init);
        CHECK(exact <= bound + 1e-9);
      }
    }
  }
}

TEST_CASE("ema transition matrix") {
  SECTION("gamma=0 keeps the averaged iterate equal to the current one") {
    const double h = 0.5, c = 1.0, alpha = 0.4, B = 2.0;
    const Lds lds = ema_transition(h, c, alpha, 0.0, B);
    const auto traj = lds_simulate(lds, {1.0, 1.0, 1.0}, 100);
    for (const auto& v : traj.states)
      CHECK(v[1] == Catch::Approx(v[0]).epsilon(1e-12));
  }
  SECTION("alpha=0, c=0: the average converges to the frozen iterate") {
    const double gamma = 0.7;
    const Lds lds = ema_transition(1.0, 0.0, 0.0, gamma, 1.0);
    const double g1 = 1.0 - gamma;
    const auto traj =
        lds_simulate(lds, {1.0, 1.0 / (g1 * g1), 1.0 / g1}, 2000);
    const double a_tilde = g1 * g1 * traj.states.back()[1];
    CHECK(a_tilde == Catch::Approx(1.0).epsilon(1e-10));
  }
  SECTION("steady state matches the averaged reduction of Theorem-style term") {
    const double h = 1.0, c = 1.0, alpha = 0.1, gamma = 0.5, B = 4.0;
    const Vec3 star = lds_steady_state(ema_transition(h, c, alpha, gamma, B));
    const double g1 = 1.0 - gamma;
    const double ss_risk = 0.5 * h * g1 * g1 * star[1];
    const double expected = alpha * c / (2.0 * B * (2.0 - alpha * h)) *
                            ema_reduction_factor(h, alpha, gamma);
    CHECK(ss_risk == Catch::Approx(expected).epsilon(1e-12));
  }
}

TEST_CASE("ema closed form matches the recurrence") {
  std::mt19937_64 rng(19);
  std::uniform_real_distribution<double> uh(0.01, 1.0), ug(0.01, 0.99),
      ua(0.001, 1.8), uc(0.0, 2.0), uB(1.0, 512.0);
  for (int trial = 0; trial < 120; ++trial) {
    const double h = uh(rng), gamma = ug(rng), alpha = ua(rng) / h,
                 c = uc(rng), B = uB(rng);
    const double g1 = 1.0 - gamma;
    const Lds lds = ema_transition(h, c, alpha, gamma, B);
    const auto traj =
        lds_simulate(lds, {1.0, 1.0 / (g1 * g1), 1.0 / g1}, 300);
    if (traj.diverged) continue;
    for (std::int64_t t = 0; t <= 300; t += 13) {
      const double exact = ema_second_moment(h, c, alpha, gamma, B, t, 1.0);
      const double ref =
          g1 * g1 * traj.states[static_cast<std::size_t>(t)][1];
      CHECK(exact == Catch::Approx(ref).margin(1e-10).epsilon(1e-10));
    }
  }
}

TEST_CASE("ema risk bound") {
  const InitCondition init;
  SECTION("gamma=0 reduction factor is 1") {
    CHECK(ema_reduction_factor(1.0, 0.1, 0.0) == Catch::Approx(1.0));
    for (std::int64_t t : {0, 2, 9}) {
      // with no averaging the bound is the decayed init plus the full
      // steady-state noise term, so it dominates the exact closed form
      const double decay = std::pow(0.9, 2.0 * static_cast<double>(t));
      const double ss = 0.1 / (2.0 * 1.9);
      CHECK(ema_risk_bound(1.0, 1.0, 0.1, 0.0, 1.0, t, init) ==
            Catch::Approx(decay * 0.5 + ss).epsilon(1e-12));
      CHECK(ema_risk_bound(1.0, 1.0, 0.1, 0.0, 1.0, t, init) >=
            sgd_risk_closed_form(1.0, 1.0, 0.1, 1.0, t, init) - 1e-12);
    }
  }
  SECTION("reduction factor values") {
    CHECK(ema_reduction_factor(1.0, 0.1, 0.5) ==
          Catch::Approx(0.5 * 1.45 / (1.5 * 0.55)).epsilon(1e-12));
    CHECK(ema_reduction_factor(1.0, 0.1, 0.9) ==
          Catch::Approx(0.50139).epsilon(1e-4));
    CHECK(ema_reduction_factor(1.0, 0.1, 0.5) < 1.0);
  }
  SECTION("exact risk never exceeds the bound") {
    std::mt19937_64 rng(23);
    std::uniform_real_distribution<double> uh(0.01, 1.0), ug(0.01, 0.99),
        ua(0.001, 1.5), uB(1.0, 128.0);
    for (int trial = 0; trial < 100; ++trial) {
      const double h = uh(rng), gamma = ug(rng), alpha = ua(rng) / h,
                   B = uB(rng);
      for (std::int64_t t : {0, 1, 3, 10, 30, 100, 300}) {
        const double exact =
            0.5 * h * ema_second_moment(h, 1.0, alpha, gamma, B, t, 1.0);
        const double bound = ema_risk_bound(h, 1.0, alpha, gamma, B, t, init);
        CHECK(exact <= bound + 1e-9);
      }
    }
  }
}

TEST_CASE("total risk") {
  const InitCondition init;
  SECTION("initial risk of the d=4 power spectrum") {
    OptimizerConfig cfg;
    cfg.alpha = 0.1;
    const double r = total_risk(build_power_spectrum(4), cfg, 0, init);
    CHECK(r == Catch::Approx((1.0 + 0.5 + 1.0 / 3.0 + 0.25) / 2.0));
  }
  SECTION("alpha=0 leaves the risk at its initial value") {
    OptimizerConfig cfg;
    cfg.alpha = 0.0;
    const Spectrum s = build_power_spectrum(10000);
    CHECK(total_risk(s, cfg, 1000, init) ==
          Catch::Approx(s.initial_risk()).epsilon(1e-12));
  }
  SECTION("stability errors name the offending eigenvalue") {
    OptimizerConfig cfg;
    cfg.alpha = 3.0;
    CHECK_THROWS_WITH(total_risk(build_power_spectrum(4), cfg, 10, init),
                      Catch::Matchers::ContainsSubstring("1.0"));
  }
  SECTION("momentum/EMA steady states scale exactly as 1/B") {
    for (double B : {1.0, 8.0, 64.0}) {
      const Vec3 s1 = lds_steady_state(momentum_transition(1.0, 1.0, 0.1, 0.5, B));
      const Vec3 s2 =
          lds_steady_state(momentum_transition(1.0, 1.0, 0.1, 0.5, 2.0 * B));
      CHECK(s2[0] == Catch::Approx(s1[0] / 2.0).epsilon(1e-12));
      const Vec3 e1 = lds_steady_state(ema_transition(1.0, 1.0, 0.1, 0.5, B));
      const Vec3 e2 =
          lds_steady_state(ema_transition(1.0, 1.0, 0.1, 0.5, 2.0 * B));
      CHECK(e2[1] == Catch::Approx(e1[1] / 2.0).epsilon(1e-12));
    }
  }
  SECTION("beta=0 and gamma=0 trajectories equal the SGD trajectory") {
    const Spectrum s = build_power_spectrum(6);
    OptimizerConfig sgd;
    sgd.alpha = 0.3;
    sgd.batch_size = 4.0;
    OptimizerConfig mom = sgd;
    OptimizerConfig ema = sgd;
    const auto base = risk_trajectory(s, sgd, 50, init);
    mom.beta = 0.0;
    ema.gamma = 0.0;
    const auto m = risk_trajectory(s, mom, 50, init);
    const auto e = risk_trajectory(s, ema, 50, init);
    for (std::size_t t = 0; t < base.risks.size(); ++t) {
      CHECK(m.risks[t] == base.risks[t]);
      CHECK(e.risks[t] == base.risks[t]);
    }
  }
  SECTION("trajectory endpoint equals the closed-form total risk") {
    const Spectrum s = quantize(build_power_spectrum(1000), 40);
    OptimizerConfig cfg;
    cfg.alpha = 0.5;
    cfg.beta = 0.7;
    cfg.batch_size = 16.0;
    const auto traj = risk_trajectory(s, cfg, 200, init);
    CHECK(total_risk(s, cfg, 200, init) ==
          Catch::Approx(traj.risks.back()).epsilon(1e-10));
  }
}
