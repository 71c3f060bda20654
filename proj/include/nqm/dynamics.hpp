// Exact expected-risk dynamics of the noisy quadratic model.
//
// Each dimension evolves independently under
//   theta(t+1) = (1 - a h) theta(t) + a sqrt(c/B) eps
// (plus momentum / averaged-iterate variants), so the second moment
// A(theta) = E[theta]^2 + V[theta] obeys a scalar affine recurrence for
// plain SGD and a 3x3 linear dynamical system for momentum and EMA.
// Both have closed-form solutions at arbitrary t; the recurrences are
// kept alongside them as an independent route.

#pragma once

#include <array>
#include <cmath>
#include <complex>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "nqm/spectrum.hpp"

namespace nqm {

struct OptimizerConfig {
  double alpha = 0.1;       // learning rate, > 0
  double beta = 0.0;        // momentum, [0, 1)
  double gamma = 0.0;       // iterate-averaging coefficient, [0, 1)
  double p = 0.0;           // preconditioner power, [0, 1]
  double batch_size = 1.0;  // B, >= 1

  void validate() const {
    if (alpha < 0.0) throw std::invalid_argument("config: alpha must be >= 0");
    if (beta < 0.0 || beta >= 1.0)
      throw std::invalid_argument("config: beta must be in [0, 1)");
    if (gamma < 0.0 || gamma >= 1.0)
      throw std::invalid_argument("config: gamma must be in [0, 1)");
    if (p < 0.0 || p > 1.0)
      throw std::invalid_argument("config: p must be in [0, 1]");
    if (!(batch_size >= 1.0))
      throw std::invalid_argument("config: batch_size must be >= 1");
    if (beta > 0.0 && gamma > 0.0)
      throw std::invalid_argument("config: momentum and EMA are mutually exclusive");
  }

  double effective_lr() const { return alpha / (1.0 - beta); }
};

// ---------------------------------------------------------------------------
// Plain SGD moment recurrence and closed form

struct SgdMoment {
  double mean = 0.0;
  double variance = 0.0;
  double second_moment() const { return mean * mean + variance; }
};

inline SgdMoment sgd_moment_step(const SgdMoment& m, double h, double c,
                                 double alpha, double B) {
  const double rho = 1.0 - alpha * h;
  return {rho * m.mean, rho * rho * m.variance + alpha * alpha * c / B};
}

// A(theta(t)) for plain SGD with A(theta(0)) = a0.
inline double sgd_second_moment(double h, double c, double alpha, double B,
                                std::int64_t t, double a0) {
  const double ah = alpha * h;
  if (ah > 2.0)
    throw std::domain_error("sgd dynamics unstable: alpha*h = " +
                            std::to_string(ah) + " > 2");
  const double rho = 1.0 - ah;
  const double rho2 = rho * rho;
  if (rho2 == 1.0)  // alpha*h == 2 (or 0 curvature): variance grows linearly
    return a0 + static_cast<double>(t) * alpha * alpha * c / B;
  const double decay = std::pow(rho2, static_cast<double>(t));
  return decay * a0 + (1.0 - decay) * alpha * alpha * c / (B * (1.0 - rho2));
}

// Expected per-dimension risk after t steps:
//   (1-ah)^2t (h/2) a0 + (1 - (1-ah)^2t) a c / (2B(2-ah)).
inline double sgd_risk_closed_form(double h, double c, double alpha, double B,
                                   std::int64_t t, const InitCondition& init) {
  return 0.5 * h * sgd_second_moment(h, c, alpha, B, t, init.second_moment);
}

// ---------------------------------------------------------------------------
// Small dense 3x3 helpers for the momentum / EMA systems

using Vec3 = std::array<double, 3>;

struct Mat3 {
  std::array<std::array<double, 3>, 3> m{};

  static Mat3 identity() {
    Mat3 r;
    r.m[0][0] = r.m[1][1] = r.m[2][2] = 1.0;
    return r;
  }

  Mat3 operator*(const Mat3& o) const {
    Mat3 r;
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) {
        double s = 0.0;
        for (int k = 0; k < 3; ++k) s += m[i][k] * o.m[k][j];
        r.m[i][j] = s;
      }
    return r;
  }

  Vec3 operator*(const Vec3& v) const {
    Vec3 r{};
    for (int i = 0; i < 3; ++i)
      r[i] = m[i][0] * v[0] + m[i][1] * v[1] + m[i][2] * v[2];
    return r;
  }
};

inline Mat3 mat3_power(Mat3 a, std::uint64_t n) {
  Mat3 r = Mat3::identity();
  while (n > 0) {
    if (n & 1) r = r * a;
    a = a * a;
    n >>= 1;
  }
  return r;
}

// Solves A x = b by Cramer's rule.
inline Vec3 mat3_solve(const Mat3& a, const Vec3& b) {
  auto det = [](const Mat3& x) {
    return x.m[0][0] * (x.m[1][1] * x.m[2][2] - x.m[1][2] * x.m[2][1]) -
           x.m[0][1] * (x.m[1][0] * x.m[2][2] - x.m[1][2] * x.m[2][0]) +
           x.m[0][2] * (x.m[1][0] * x.m[2][1] - x.m[1][1] * x.m[2][0]);
  };
  const double d = det(a);
  if (d == 0.0) throw std::domain_error("mat3_solve: singular system");
  Vec3 x{};
  for (int j = 0; j < 3; ++j) {
    Mat3 aj = a;
    for (int i = 0; i < 3; ++i) aj.m[i][j] = b[i];
    x[j] = det(aj) / d;
  }
  return x;
}

struct Lds {
  Mat3 transition;
  Vec3 noise;
};

// State vector (A(theta), alpha^2 A(m), -alpha C) for momentum SGD.
inline Lds momentum_transition(double h, double c, double alpha, double beta,
                               double B) {
  const double r = 1.0 - alpha * h;
  const double ah = alpha * h;
  Lds lds;
  lds.transition.m = {{{r * r, beta * beta, 2.0 * r * beta},
                       {ah * ah, beta * beta, -2.0 * beta * ah},
                       {-r * ah, beta * beta, (1.0 - 2.0 * ah) * beta}}};
  const double n = alpha * alpha * c / B;
  lds.noise = {n, n, n};
  return lds;
}

// State vector (A(theta), A(theta~)/(1-g)^2, C/(1-g)) for the averaged iterate.
inline Lds ema_transition(double h, double c, double alpha, double gamma,
                          double B) {
  const double r = 1.0 - alpha * h;
  Lds lds;
  lds.transition.m = {{{r * r, 0.0, 0.0},
                       {r * r, gamma * gamma, 2.0 * gamma * r},
                       {r * r, 0.0, gamma * r}}};
  const double n = alpha * alpha * c / B;
  lds.noise = {n, n, n};
  return lds;
}

constexpr double kDivergenceThreshold = 1e300;

struct LdsTrajectory {
  std::vector<Vec3> states;  // states[t] = v(t), t = 0..steps (or up to divergence)
  bool diverged = false;
  std::int64_t diverged_at = -1;
};

// Iterates v(t+1) = T v(t) + n.
inline LdsTrajectory lds_simulate(const Lds& lds, const Vec3& state0,
                                  std::int64_t steps) {
  if (steps < 0) throw std::invalid_argument("lds_simulate: steps must be >= 0");
  LdsTrajectory out;
  out.states.reserve(static_cast<std::size_t>(steps) + 1);
  Vec3 v = state0;
  out.states.push_back(v);
  for (std::int64_t t = 1; t <= steps; ++t) {
    v = lds.transition * v;
    for (int i = 0; i < 3; ++i) v[i] += lds.noise[i];
    for (int i = 0; i < 3; ++i) {
      if (std::abs(v[i]) > kDivergenceThreshold) {
        out.diverged = true;
        out.diverged_at = t;
        return out;
      }
    }
    out.states.push_back(v);
  }
  return out;
}

// Fixed point v* = (I - T)^-1 n.
inline Vec3 lds_steady_state(const Lds& lds) {
  Mat3 a = Mat3::identity();
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) a.m[i][j] -= lds.transition.m[i][j];
  return mat3_solve(a, lds.noise);
}

// ---------------------------------------------------------------------------
// Root pairs of the characteristic quadratics

struct RootPair {
  std::complex<double> r1;  // larger-magnitude (or real-larger) root
  std::complex<double> r2;
  bool perturbed = false;   // near-repeated roots were split by a tiny nudge
};

namespace detail {

inline std::complex<double> cpow_int(std::complex<double> r, std::int64_t t) {
  if (t == 0) return {1.0, 0.0};
  return std::pow(r, static_cast<double>(t));
}

// Geometric partial sum q + q^2 + ... + q^t.
inline std::complex<double> geom_sum(std::complex<double> q, std::int64_t t) {
  if (t <= 0) return {0.0, 0.0};
  if (std::abs(q - 1.0) < 1e-14) return {static_cast<double>(t), 0.0};
  return q * (1.0 - cpow_int(q, t)) / (1.0 - q);
}

}  // namespace detail

// Roots of x^2 - (1 - ah + beta) x + beta = 0, with r1 >= r2 (real case) or
// |r1| = |r2| = sqrt(beta) (underdamped case). The repeated root at
// beta = (1 - sqrt(ah))^2 is excluded by perturbing beta by 1e-9 relative.
inline RootPair momentum_roots(double h, double alpha, double beta) {
  RootPair out;
  double b = beta;
  const double ah = alpha * h;
  for (int attempt = 0; attempt < 2; ++attempt) {
    const std::complex<double> s = 1.0 - ah + b;
    const std::complex<double> disc = s * s - 4.0 * b;
    const std::complex<double> sq = std::sqrt(disc);
    out.r1 = 0.5 * (s + sq);
    out.r2 = 0.5 * (s - sq);
    if (std::abs(out.r1 - out.r2) > 1e-9 * std::max(1.0, std::abs(out.r1)))
      break;
    b = (b == 0.0) ? 1e-9 : b * (1.0 + 1e-9);
    out.perturbed = true;
  }
  if (std::abs(out.r2) > std::abs(out.r1)) std::swap(out.r1, out.r2);
  return out;
}

// Roots of z^2 - (1 - ah + g) z + (1 - ah) g = 0, i.e. r1 = 1 - ah, r2 = g.
// The repeated root at g = 1 - ah is perturbed the same way.
inline RootPair ema_roots(double h, double alpha, double gamma) {
  RootPair out;
  double g = gamma;
  const double r = 1.0 - alpha * h;
  if (std::abs(r - g) <= 1e-9 * std::max(1.0, std::abs(r))) {
    g = (g == 0.0) ? 1e-9 : g * (1.0 + 1e-9);
    out.perturbed = true;
  }
  out.r1 = r;
  out.r2 = g;
  if (std::abs(out.r2) > std::abs(out.r1)) std::swap(out.r1, out.r2);
  return out;
}

// Spectral radius of the 3x3 transition matrix. Its eigenvalues are
// {r1^2, r2^2, r1 r2}, so the radius is max(|r1|, |r2|)^2; for plain SGD
// this degenerates to (1 - ah)^2.
inline double transition_spectral_radius(double h, const OptimizerConfig& cfg) {
  if (cfg.beta > 0.0) {
    const RootPair r = momentum_roots(h, cfg.alpha, cfg.beta);
    const double m = std::max(std::abs(r.r1), std::abs(r.r2));
    return m * m;
  }
  if (cfg.gamma > 0.0) {
    const double m =
        std::max(std::abs(1.0 - cfg.alpha * h), std::abs(cfg.gamma));
    return m * m;
  }
  const double rho = 1.0 - cfg.alpha * h;
  return rho * rho;
}

// ---------------------------------------------------------------------------
// Exact closed forms for the momentum / EMA second moments.
//
// The transition matrix is the symmetric square of the 2x2 mean-dynamics
// matrix, so the homogeneous term from state (a0, 0, 0) is an exact square
// of the scalar recurrence solution, and the noise term is a partial sum of
// three geometric series. Equality with the iterated recurrence (to 1e-10)
// is enforced by tests.

namespace detail {

inline double noise_partial_sum(const RootPair& r, std::int64_t t) {
  const std::complex<double> diff = r.r1 - r.r2;
  const std::complex<double> s = geom_sum(r.r1 * r.r1, t) +
                                 geom_sum(r.r2 * r.r2, t) -
                                 2.0 * geom_sum(r.r1 * r.r2, t);
  return (s / (diff * diff)).real();
}

inline double homogeneous_factor(const RootPair& r, std::complex<double> k,
                                 std::int64_t t) {
  const std::complex<double> num = cpow_int(r.r1, t + 1) - cpow_int(r.r2, t + 1) -
                                   k * (cpow_int(r.r1, t) - cpow_int(r.r2, t));
  const std::complex<double> d = num / (r.r1 - r.r2);
  return (d * d).real();
}

}  // namespace detail

// A(theta(t)) for momentum SGD with m(0) = 0 and A(theta(0)) = a0.
inline double momentum_second_moment(double h, double c, double alpha,
                                     double beta, double B, std::int64_t t,
                                     double a0, bool* perturbed = nullptr) {
  if (beta == 0.0) return sgd_second_moment(h, c, alpha, B, t, a0);
  const RootPair r = momentum_roots(h, alpha, beta);
  if (perturbed && r.perturbed) *perturbed = true;
  const double det = detail::homogeneous_factor(r, beta, t) * a0;
  const double noise =
      alpha * alpha * c / B * detail::noise_partial_sum(r, t);
  return det + noise;
}

// A(theta~(t)) for the averaged iterate with theta~(0) = theta(0).
inline double ema_second_moment(double h, double c, double alpha, double gamma,
                                double B, std::int64_t t, double a0,
                                bool* perturbed = nullptr) {
  if (gamma == 0.0) return sgd_second_moment(h, c, alpha, B, t, a0);
  const RootPair r = ema_roots(h, alpha, gamma);
  if (perturbed && r.perturbed) *perturbed = true;
  const std::complex<double> k = r.r1 * r.r2;  // gamma (1 - ah)
  const double det = detail::homogeneous_factor(r, k, t) * a0;
  const double g1 = 1.0 - gamma;
  const double noise =
      alpha * alpha * c / B * g1 * g1 * detail::noise_partial_sum(r, t);
  return det + noise;
}

// ---------------------------------------------------------------------------
// Theorem-style upper bounds (steady-state noise term taken at t = infinity)

// Risk bound for momentum SGD:
//   D(t)^2 (h/2) a0 + (1+b) a c / (2B (2b + 2 - ah)(1-b)).
inline double momentum_risk_bound(double h, double c, double alpha, double beta,
                                  double B, std::int64_t t,
                                  const InitCondition& init,
                                  bool* perturbed = nullptr) {
  const double ah = alpha * h;
  if (beta == 0.0) {
    const double decay = std::pow(1.0 - ah, 2.0 * static_cast<double>(t));
    return decay * 0.5 * h * init.second_moment +
           alpha * c / (2.0 * B * (2.0 - ah));
  }
  const RootPair r = momentum_roots(h, alpha, beta);
  if (perturbed && r.perturbed) *perturbed = true;
  const double det = detail::homogeneous_factor(r, beta, t);
  const double steady = (1.0 + beta) * alpha * c /
                        (2.0 * B * (2.0 * beta + 2.0 - ah) * (1.0 - beta));
  return det * 0.5 * h * init.second_moment + steady;
}

// Steady-state reduction factor of iterate averaging, strictly below 1 for
// gamma in (0,1) and ah in (0,1).
inline double ema_reduction_factor(double h, double alpha, double gamma) {
  const double r = 1.0 - alpha * h;
  return (1.0 - gamma) * (1.0 + r * gamma) /
         ((1.0 + gamma) * (1.0 - r * gamma));
}

// Risk bound for the averaged iterate:
//   D(t)^2 (h/2) a0 + a c / (2B(2-ah)) * reduction(gamma).
inline double ema_risk_bound(double h, double c, double alpha, double gamma,
                             double B, std::int64_t t,
                             const InitCondition& init,
                             bool* perturbed = nullptr) {
  const double ah = alpha * h;
  if (gamma == 0.0) {
    const double decay = std::pow(1.0 - ah, 2.0 * static_cast<double>(t));
    return decay * 0.5 * h * init.second_moment +
           alpha * c / (2.0 * B * (2.0 - ah));
  }
  const RootPair r = ema_roots(h, alpha, gamma);
  if (perturbed && r.perturbed) *perturbed = true;
  const double det = detail::homogeneous_factor(r, r.r1 * r.r2, t);
  const double steady =
      alpha * c / (2.0 * B * (2.0 - ah)) * ema_reduction_factor(h, alpha, gamma);
  return det * 0.5 * h * init.second_moment + steady;
}

// ---------------------------------------------------------------------------
// Per-entry and total risk for a full spectrum

// A(theta(t)) (or A(theta~(t)) under averaging) for one preconditioned entry.
inline double entry_second_moment(double h, double c,
                                  const OptimizerConfig& cfg, std::int64_t t,
                                  double a0) {
  if (cfg.beta > 0.0)
    return momentum_second_moment(h, c, cfg.alpha, cfg.beta, cfg.batch_size, t,
                                  a0);
  if (cfg.gamma > 0.0)
    return ema_second_moment(h, c, cfg.alpha, cfg.gamma, cfg.batch_size, t, a0);
  return sgd_second_moment(h, c, cfg.alpha, cfg.batch_size, t, a0);
}

// Limiting risk contribution of one entry as t -> infinity (+inf when the
// entry's dynamics do not contract and noise is present).
inline double entry_limit_risk(double h, double c, const OptimizerConfig& cfg,
                               double a0) {
  const double radius = transition_spectral_radius(h, cfg);
  if (radius < 1.0) {
    if (cfg.beta > 0.0) {
      const Vec3 ss =
          lds_steady_state(momentum_transition(h, c, cfg.alpha, cfg.beta,
                                               cfg.batch_size));
      return 0.5 * h * ss[0];
    }
    if (cfg.gamma > 0.0) {
      const Vec3 ss = lds_steady_state(
          ema_transition(h, c, cfg.alpha, cfg.gamma, cfg.batch_size));
      const double g1 = 1.0 - cfg.gamma;
      return 0.5 * h * g1 * g1 * ss[1];
    }
    const double ah = cfg.alpha * h;
    return cfg.alpha * c / (2.0 * cfg.batch_size * (2.0 - ah));
  }
  if (c > 0.0 || radius > 1.0)
    return std::numeric_limits<double>::infinity();
  return 0.5 * h * a0;  // radius == 1, noiseless: second moment persists
}

// Total expected risk sum_i w_i (h~_i/2) A_i(t) after applying the power-law
// preconditioner. Summation order is descending h for determinism.
inline double total_risk(const Spectrum& s, const OptimizerConfig& cfg,
                         std::int64_t t, const InitCondition& init) {
  cfg.validate();
  const Spectrum sp = precondition(s, cfg.p);
  double risk = 0.0;
  for (const auto& e : sp.entries()) {
    if (cfg.alpha * e.h > 2.0)
      throw std::domain_error("total_risk: unstable for eigenvalue h = " +
                              std::to_string(e.h));
    risk += e.w * 0.5 * e.h *
            entry_second_moment(e.h, e.c, cfg, t, init.second_moment);
  }
  return risk;
}

// Limiting total risk; +inf when any entry diverges.
inline double steady_state_total_risk(const Spectrum& s,
                                      const OptimizerConfig& cfg,
                                      const InitCondition& init) {
  const Spectrum sp = precondition(s, cfg.p);
  double risk = 0.0;
  for (const auto& e : sp.entries()) {
    const double r = entry_limit_risk(e.h, e.c, cfg, init.second_moment);
    if (std::isinf(r)) return r;
    risk += e.w * r;
  }
  return risk;
}

struct RiskTrajectory {
  std::vector<double> risks;  // total expected risk at t = 0..T
  bool diverged = false;
  std::int64_t diverged_at = -1;
};

// Stepwise total-risk trajectory via the per-entry recurrences.
inline RiskTrajectory risk_trajectory(const Spectrum& s,
                                      const OptimizerConfig& cfg,
                                      std::int64_t steps,
                                      const InitCondition& init) {
  cfg.validate();
  const Spectrum sp = precondition(s, cfg.p);
  RiskTrajectory out;
  out.risks.assign(static_cast<std::size_t>(steps) + 1, 0.0);

  for (const auto& e : sp.entries()) {
    const double scale = e.w * 0.5 * e.h;
    if (cfg.beta > 0.0 || cfg.gamma > 0.0) {
      const bool ema = cfg.gamma > 0.0;
      const Lds lds =
          ema ? ema_transition(e.h, e.c, cfg.alpha, cfg.gamma, cfg.batch_size)
              : momentum_transition(e.h, e.c, cfg.alpha, cfg.beta,
                                    cfg.batch_size);
      const double a0 = init.second_moment;
      const double g1 = 1.0 - cfg.gamma;
      Vec3 v = ema ? Vec3{a0, a0 / (g1 * g1), a0 / g1} : Vec3{a0, 0.0, 0.0};
      auto risk_of = [&](const Vec3& x) {
        return ema ? scale * g1 * g1 * x[1] : scale * x[0];
      };
      out.risks[0] += risk_of(v);
      for (std::int64_t t = 1; t <= steps; ++t) {
        v = lds.transition * v;
        for (int i = 0; i < 3; ++i) v[i] += lds.noise[i];
        if (std::abs(v[0]) > kDivergenceThreshold ||
            std::abs(v[1]) > kDivergenceThreshold) {
          out.diverged = true;
          out.diverged_at = t;
          return out;
        }
        out.risks[static_cast<std::size_t>(t)] += risk_of(v);
      }
    } else {
      const double rho = 1.0 - cfg.alpha * e.h;
      const double noise = cfg.alpha * cfg.alpha * e.c / cfg.batch_size;
      double a = init.second_moment;
      out.risks[0] += scale * a;
      for (std::int64_t t = 1; t <= steps; ++t) {
        a = rho * rho * a + noise;
        if (a > kDivergenceThreshold) {
          out.diverged = true;
          out.diverged_at = t;
          return out;
        }
        out.risks[static_cast<std::size_t>(t)] += scale * a;
      }
    }
  }
  return out;
}

}  // namespace nqm
