// Piecewise-constant learning-rate schedules for plain SGD: exact risk
// evaluation (stepwise and per-piece closed form), analytic gradients over
// piece log-learning-rates, fixed-horizon quasi-Newton optimization, and
// binary search for the minimal horizon reaching a target risk.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "nqm/dynamics.hpp"
#include "nqm/spectrum.hpp"

namespace nqm {

struct SchedulePiece {
  double alpha = 0.0;
  std::int64_t length = 0;
};

struct Schedule {
  std::vector<SchedulePiece> pieces;

  std::int64_t total_steps() const {
    std::int64_t t = 0;
    for (const auto& p : pieces) t += p.length;
    return t;
  }

  void validate(double h_max) const {
    for (const auto& p : pieces) {
      if (!(p.alpha > 0.0) || p.alpha * h_max > 2.0 * (1.0 + 1e-12))
        throw std::invalid_argument(
            "schedule: alpha must lie in (0, 2/h_1], got alpha = " +
            std::to_string(p.alpha));
      if (p.length <= 0)
        throw std::invalid_argument("schedule: piece lengths must be positive");
    }
  }
};

inline nlohmann::json to_json(const Schedule& s) {
  nlohmann::json pieces = nlohmann::json::array();
  for (const auto& p : s.pieces)
    pieces.push_back({{"alpha", p.alpha}, {"len", p.length}});
  return nlohmann::json{{"pieces", std::move(pieces)}};
}

inline Schedule schedule_from_json(const nlohmann::json& j) {
  Schedule s;
  for (const auto& p : j.at("pieces"))
    s.pieces.push_back({p.at("alpha").get<double>(), p.at("len").get<std::int64_t>()});
  return s;
}

// ---------------------------------------------------------------------------
// Exact risk under a schedule

// Steps the per-dimension second-moment recurrence with the time-varying
// learning rate and returns the total risk at every step.
inline RiskTrajectory dp_risk(const Spectrum& s, const Schedule& sched,
                              double B, const InitCondition& init) {
  sched.validate(s.h_max());
  const std::int64_t total = sched.total_steps();
  RiskTrajectory out;
  out.risks.assign(static_cast<std::size_t>(total) + 1, 0.0);

  for (const auto& e : s.entries()) {
    const double scale = e.w * 0.5 * e.h;
    double a = init.second_moment;
    out.risks[0] += scale * a;
    std::int64_t t = 0;
    for (const auto& piece : sched.pieces) {
      if (piece.alpha * e.h > 2.0 * (1.0 + 1e-12))
        throw std::domain_error("dp_risk: unstable at step " +
                                std::to_string(t) + " for eigenvalue h = " +
                                std::to_string(e.h));
      const double rho = 1.0 - piece.alpha * e.h;
      const double noise = piece.alpha * piece.alpha * e.c / B;
      for (std::int64_t k = 0; k < piece.length; ++k) {
        a = rho * rho * a + noise;
        ++t;
        out.risks[static_cast<std::size_t>(t)] += scale * a;
      }
    }
  }
  return out;
}

namespace detail {

// One constant-alpha piece advances A by A' = q A + s with
// q = rho^2L and s = (a^2 c / B) (1 - q)/(1 - rho^2).
struct PieceStep {
  double q = 1.0;
  double s = 0.0;
};

inline PieceStep piece_step(double h, double c, double alpha, double B,
                            std::int64_t len) {
  const double rho = 1.0 - alpha * h;
  const double rho2 = rho * rho;
  PieceStep ps;
  ps.q = std::pow(rho2, static_cast<double>(len));
  const double denom = 1.0 - rho2;
  const double geom = (std::abs(denom) < 1e-300)
                          ? static_cast<double>(len)
                          : (1.0 - ps.q) / denom;
  ps.s = alpha * alpha * c / B * geom;
  return ps;
}

}  // namespace detail

// Final total risk of a schedule, in O(pieces * entries) via the per-piece
// closed form. Agrees with dp_risk's final entry to 1e-12 relative.
inline double schedule_final_risk(const Spectrum& s, const Schedule& sched,
                                  double B, const InitCondition& init) {
  double risk = 0.0;
  for (const auto& e : s.entries()) {
    double a = init.second_moment;
    for (const auto& piece : sched.pieces) {
      const auto ps = detail::piece_step(e.h, e.c, piece.alpha, B, piece.length);
      a = ps.q * a + ps.s;
    }
    risk += e.w * 0.5 * e.h * a;
  }
  return risk;
}

// d(final risk)/d(log alpha_k) by reverse accumulation through the piece
// recurrence. When project_at_bound is set, components at the 2/h_1 boundary
// whose descent direction points outward are zeroed (projected gradient).
inline std::vector<double> risk_gradient(const Spectrum& s,
                                         const Schedule& sched, double B,
                                         const InitCondition& init,
                                         bool project_at_bound = true) {
  const std::size_t K = sched.pieces.size();
  std::vector<double> grad(K, 0.0);
  const double alpha_max = 2.0 / s.h_max();

  for (const auto& e : s.entries()) {
    const double scale = e.w * 0.5 * e.h;
    // forward pass: A before each piece
    std::vector<double> a_before(K);
    double a = init.second_moment;
    std::vector<detail::PieceStep> steps(K);
    for (std::size_t k = 0; k < K; ++k) {
      a_before[k] = a;
      steps[k] = detail::piece_step(e.h, e.c, sched.pieces[k].alpha, B,
                                    sched.pieces[k].length);
      a = steps[k].q * a + steps[k].s;
    }
    // reverse pass: suffix products of q
    double suffix = 1.0;
    for (std::size_t k = K; k-- > 0;) {
      const double alpha = sched.pieces[k].alpha;
      const double len = static_cast<double>(sched.pieces[k].length);
      const double rho = 1.0 - alpha * e.h;
      const double rho2 = rho * rho;
      const double q = steps[k].q;
      // dq/dalpha = 2L rho^(2L-1) * (-h)
      const double rho_pow = (rho == 0.0) ? 0.0 : q / rho;
      const double dq = -2.0 * len * e.h * rho_pow;
      // s = (a^2 c / B) g, g = (1-q)/(1-rho^2)
      const double denom = 1.0 - rho2;
      double ds = 0.0;
      if (std::abs(denom) >= 1e-300) {
        const double g = (1.0 - q) / denom;
        const double dg = (-dq * denom - (1.0 - q) * 2.0 * rho * e.h) /
                          (denom * denom);
        ds = 2.0 * alpha * e.c / B * g + alpha * alpha * e.c / B * dg;
      }
      grad[k] += scale * suffix * (dq * a_before[k] + ds);
      suffix *= q;
    }
  }
  for (std::size_t k = 0; k < K; ++k) {
    grad[k] *= sched.pieces[k].alpha;  // d/dalpha -> d/d(log alpha)
    if (project_at_bound && sched.pieces[k].alpha >= alpha_max * (1.0 - 1e-12) &&
        grad[k] < 0.0)
      grad[k] = 0.0;
  }
  return grad;
}

// ---------------------------------------------------------------------------
// Fixed-horizon schedule optimization

struct OptimizeResult {
  Schedule schedule;
  double final_risk = 0.0;
  bool converged = false;
  int iterations = 0;
};

namespace detail {

inline std::vector<std::int64_t> piece_lengths(std::int64_t T, int n_pieces) {
  const auto K = static_cast<std::int64_t>(n_pieces);
  std::vector<std::int64_t> lens(static_cast<std::size_t>(K), T / K);
  lens.back() += T % K;  // remainder on the last piece
  return lens;
}

// Best constant learning rate on a coarse log grid, replicated across pieces.
inline Schedule best_constant_schedule(const Spectrum& s, double B,
                                       const std::vector<std::int64_t>& lens,
                                       const InitCondition& init) {
  const double alpha_max = 2.0 / s.h_max();
  const int n_grid = 121;
  double best_alpha = alpha_max;
  double best_risk = std::numeric_limits<double>::infinity();
  for (int i = 0; i < n_grid; ++i) {
    const double frac = static_cast<double>(i) / (n_grid - 1);
    const double alpha = alpha_max * std::pow(1e-5, 1.0 - frac);
    Schedule sched;
    for (auto len : lens) sched.pieces.push_back({alpha, len});
    const double r = schedule_final_risk(s, sched, B, init);
    if (r < best_risk) {
      best_risk = r;
      best_alpha = alpha;
    }
  }
  Schedule sched;
  for (auto len : lens) sched.pieces.push_back({best_alpha, len});
  return sched;
}

}  // namespace detail

// Minimizes the final risk over per-piece log learning rates with a
// quasi-Newton method (inverse-curvature approximation from gradient
// differences, backtracking line search). Learning rates are kept inside
// (0, 2/h_1) by a sigmoid reparameterization; the result is never worse
// than the best constant schedule on the same horizon.
inline OptimizeResult optimize_fixed_horizon(const Spectrum& s, double B,
                                             std::int64_t T, int n_pieces,
                                             const InitCondition& init,
                                             int max_iters = 500) {
  if (n_pieces < 1 || T < n_pieces)
    throw std::invalid_argument("optimize_fixed_horizon: need T >= n_pieces >= 1");
  const double alpha_max = 2.0 / s.h_max();
  const auto lens = detail::piece_lengths(T, n_pieces);
  const auto K = static_cast<std::size_t>(n_pieces);

  const Schedule const_init = detail::best_constant_schedule(s, B, lens, init);
  const double const_risk = schedule_final_risk(s, const_init, B, init);

  // u_k -> alpha_k = alpha_max * sigmoid(u_k), kept strictly interior
  constexpr double u_clip = 40.0;
  auto to_alpha = [&](double u) {
    u = std::clamp(u, -u_clip, u_clip);
    return alpha_max / (1.0 + std::exp(-u));
  };
  auto make_schedule = [&](const std::vector<double>& u) {
    Schedule sched;
    for (std::size_t k = 0; k < K; ++k)
      sched.pieces.push_back({to_alpha(u[k]), lens[k]});
    return sched;
  };
  auto objective = [&](const std::vector<double>& u, std::vector<double>* g) {
    const Schedule sched = make_schedule(u);
    const double risk = schedule_final_risk(s, sched, B, init);
    if (g) {
      const auto grad_log = risk_gradient(s, sched, B, init, false);
      g->assign(K, 0.0);
      for (std::size_t k = 0; k < K; ++k) {
        // d(log alpha)/du = 1 - alpha/alpha_max; objective is log(risk)
        const double chain = 1.0 - sched.pieces[k].alpha / alpha_max;
        (*g)[k] = grad_log[k] * chain / std::max(risk, 1e-300);
      }
    }
    return std::log(std::max(risk, 1e-300));
  };

  std::vector<double> u(K);
  {
    const double a0 = const_init.pieces.front().alpha;
    const double frac = std::clamp(a0 / alpha_max, 1e-12, 1.0 - 1e-12);
    std::fill(u.begin(), u.end(), std::log(frac / (1.0 - frac)));
  }

  std::vector<double> g(K), g_new(K);
  double f = objective(u, &g);
  // inverse Hessian approximation, dense K x K
  std::vector<double> H(K * K, 0.0);
  for (std::size_t i = 0; i < K; ++i) H[i * K + i] = 1.0;

  OptimizeResult result;
  int it = 0;
  for (; it < max_iters; ++it) {
    double gnorm = 0.0;
    for (double v : g) gnorm = std::max(gnorm, std::abs(v));
    if (gnorm < 1e-10) {
      result.converged = true;
      break;
    }
    // direction d = -H g
    std::vector<double> d(K, 0.0);
    for (std::size_t i = 0; i < K; ++i) {
      double acc = 0.0;
      for (std::size_t j = 0; j < K; ++j) acc += H[i * K + j] * g[j];
      d[i] = -acc;
    }
    double dg = 0.0;
    for (std::size_t i = 0; i < K; ++i) dg += d[i] * g[i];
    if (dg >= 0.0) {  // reset curvature if direction is not a descent one
      for (std::size_t i = 0; i < K; ++i)
        for (std::size_t j = 0; j < K; ++j) H[i * K + j] = (i == j) ? 1.0 : 0.0;
      for (std::size_t i = 0; i < K; ++i) d[i] = -g[i];
      dg = 0.0;
      for (std::size_t i = 0; i < K; ++i) dg += d[i] * g[i];
    }
    // backtracking line search with sufficient decrease
    double step = 1.0;
    std::vector<double> u_new(K);
    double f_new = f;
    bool accepted = false;
    for (int ls = 0; ls < 50; ++ls) {
      for (std::size_t i = 0; i < K; ++i) u_new[i] = u[i] + step * d[i];
      f_new = objective(u_new, nullptr);
      if (f_new <= f + 1e-4 * step * dg) {
        accepted = true;
        break;
      }
      step *= 0.5;
    }
    if (!accepted) break;
    objective(u_new, &g_new);
    // BFGS inverse update
    std::vector<double> sdiff(K), ydiff(K);
    double sy = 0.0;
    for (std::size_t i = 0; i < K; ++i) {
      sdiff[i] = u_new[i] - u[i];
      ydiff[i] = g_new[i] - g[i];
      sy += sdiff[i] * ydiff[i];
    }
    if (sy > 1e-14) {
      const double rho_bfgs = 1.0 / sy;
      std::vector<double> Hy(K, 0.0);
      for (std::size_t i = 0; i < K; ++i) {
        double acc = 0.0;
        for (std::size_t j = 0; j < K; ++j) acc += H[i * K + j] * ydiff[j];
        Hy[i] = acc;
      }
      double yHy = 0.0;
      for (std::size_t i = 0; i < K; ++i) yHy += ydiff[i] * Hy[i];
      for (std::size_t i = 0; i < K; ++i)
        for (std::size_t j = 0; j < K; ++j) {
          H[i * K + j] += (sy + yHy) * rho_bfgs * rho_bfgs * sdiff[i] * sdiff[j] -
                          rho_bfgs * (Hy[i] * sdiff[j] + sdiff[i] * Hy[j]);
        }
    }
    const bool stalled = (f - f_new) < 1e-14 * std::max(1.0, std::abs(f));
    u = u_new;
    g = g_new;
    f = f_new;
    if (stalled) {
      result.converged = true;
      break;
    }
  }
  result.iterations = it;

  result.schedule = make_schedule(u);
  result.final_risk = schedule_final_risk(s, result.schedule, B, init);
  if (result.final_risk > const_risk) {  // never worse than the constant LR
    result.schedule = const_init;
    result.final_risk = const_risk;
  }
  return result;
}

// ---------------------------------------------------------------------------
// Minimal horizon reaching a target risk

struct MinStepsResult {
  bool reachable = false;
  std::int64_t steps = 0;
  Schedule schedule;
  double final_risk = 0.0;
};

// Smallest T (binary search over [1, cap]) such that the optimized n_pieces
// schedule reaches final risk <= target.
inline MinStepsResult min_steps_with_schedule(const Spectrum& s, double B,
                                              double target, int n_pieces,
                                              const InitCondition& init,
                                              std::int64_t cap = 10000000,
                                              int max_iters = 500) {
  if (!(target > 0.0))
    throw std::invalid_argument("min_steps_with_schedule: target must be > 0");
  MinStepsResult result;
  if (s.initial_risk(init.second_moment) <= target) {
    result.reachable = true;
    return result;
  }
  auto optimize_at = [&](std::int64_t T) {
    return optimize_fixed_horizon(s, B, T, std::min<std::int64_t>(n_pieces, T),
                                  init, max_iters);
  };
  OptimizeResult at_cap = optimize_at(cap);
  if (at_cap.final_risk > target) return result;  // unreachable within cap

  std::int64_t lo = 1, hi = cap;
  OptimizeResult best = at_cap;
  while (lo < hi) {
    const std::int64_t mid = lo + (hi - lo) / 2;
    OptimizeResult r = optimize_at(mid);
    if (r.final_risk <= target) {
      hi = mid;
      best = r;
    } else {
      lo = mid + 1;
    }
  }
  result.reachable = true;
  result.steps = hi;
  result.schedule = best.schedule;
  result.final_risk = best.final_risk;
  return result;
}

}  // namespace nqm
