// Steps-to-target evaluation and hyperparameter grid search over
// learning rate, momentum, and averaging coefficient.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "nqm/dynamics.hpp"
#include "nqm/parallel.hpp"
#include "nqm/spectrum.hpp"

namespace nqm {

enum class Family { Sgd, Momentum, Ema };

inline std::string family_name(Family f) {
  switch (f) {
    case Family::Sgd: return "sgd";
    case Family::Momentum: return "momentum";
    case Family::Ema: return "ema";
  }
  return "?";
}

enum class StepsOutcome {
  Reached,
  CapExhausted,           // target not hit within the step cap
  SteadyStateUnreachable  // limiting risk already exceeds the target
};

struct StepsResult {
  StepsOutcome outcome = StepsOutcome::SteadyStateUnreachable;
  std::int64_t steps = 0;
  bool reached() const { return outcome == StepsOutcome::Reached; }
};

constexpr std::int64_t kDefaultStepCap = 10000000;

namespace detail {

// Total risk at time t over an already-preconditioned spectrum.
inline double risk_at(const Spectrum& sp, const OptimizerConfig& cfg,
                      std::int64_t t, const InitCondition& init) {
  double risk = 0.0;
  for (const auto& e : sp.entries())
    risk += e.w * 0.5 * e.h *
            entry_second_moment(e.h, e.c, cfg, t, init.second_moment);
  return risk;
}

inline double limit_risk(const Spectrum& sp, const OptimizerConfig& cfg,
                         const InitCondition& init) {
  double risk = 0.0;
  for (const auto& e : sp.entries()) {
    const double r = entry_limit_risk(e.h, e.c, cfg, init.second_moment);
    if (std::isinf(r)) return r;
    risk += e.w * r;
  }
  return risk;
}

// Smallest t with risk(t) <= target, assuming the preconditioner has already
// been applied. Exponential bracketing plus bisection on the crossing, with a
// local backward scan to absorb small non-monotonicity (underdamped momentum
// oscillates under its decaying envelope).
inline StepsResult steps_to_target_preconditioned(const Spectrum& sp,
                                                  const OptimizerConfig& cfg,
                                                  double target,
                                                  std::int64_t cap,
                                                  const InitCondition& init) {
  StepsResult res;
  if (risk_at(sp, cfg, 0, init) <= target) {
    res.outcome = StepsOutcome::Reached;
    res.steps = 0;
    return res;
  }
  for (const auto& e : sp.entries()) {
    if (cfg.alpha * e.h > 2.0) {
      res.outcome = StepsOutcome::SteadyStateUnreachable;
      return res;
    }
  }
  if (limit_risk(sp, cfg, init) > target) {
    res.outcome = StepsOutcome::SteadyStateUnreachable;
    return res;
  }

  std::int64_t lo = 0, hi = 1;
  while (risk_at(sp, cfg, hi, init) > target) {
    lo = hi;
    hi *= 2;
    if (hi >= cap) {
      if (risk_at(sp, cfg, cap, init) > target) {
        res.outcome = StepsOutcome::CapExhausted;
        return res;
      }
      hi = cap;
      break;
    }
  }
  while (hi - lo > 1) {
    const std::int64_t mid = lo + (hi - lo) / 2;
    if (risk_at(sp, cfg, mid, init) <= target)
      hi = mid;
    else
      lo = mid;
  }
  while (hi > 1 && risk_at(sp, cfg, hi - 1, init) <= target) --hi;
  res.outcome = StepsOutcome::Reached;
  res.steps = hi;
  return res;
}

}  // namespace detail

// Smallest t <= cap with total_risk(t) <= target. The steady-state total risk
// is checked first so unreachable configurations return immediately.
inline StepsResult steps_to_target(const Spectrum& s,
                                   const OptimizerConfig& cfg, double target,
                                   std::int64_t cap = kDefaultStepCap,
                                   const InitCondition& init = {}) {
  cfg.validate();
  if (!(target > 0.0))
    throw std::invalid_argument("steps_to_target: target must be > 0");
  const Spectrum sp = precondition(s, cfg.p);
  return detail::steps_to_target_preconditioned(sp, cfg, target, cap, init);
}

// ---------------------------------------------------------------------------
// Grid search

struct Grids {
  std::vector<double> alphas;
  std::vector<double> betas;   // used by the momentum family
  std::vector<double> gammas;  // used by the EMA family

  // alpha: log grid over [1e-5 * 2/h1, 2/h1], 20 points per decade;
  // beta/gamma: {0} plus 1 - 10^(-k/4) for k = 1..12 (up to 0.999...).
  static Grids defaults(double alpha_max) {
    Grids g;
    const int decades = 5;
    const int per_decade = 20;
    const int n = decades * per_decade;
    for (int i = 0; i <= n; ++i) {
      g.alphas.push_back(alpha_max *
                         std::pow(10.0, -static_cast<double>(decades) +
                                            static_cast<double>(i) / per_decade));
    }
    g.alphas.back() = alpha_max;
    g.betas.push_back(0.0);
    for (int k = 1; k <= 12; ++k)
      g.betas.push_back(1.0 - std::pow(10.0, -k / 4.0));
    g.gammas = g.betas;
    return g;
  }
};

struct TuneResult {
  OptimizerConfig best;
  StepsResult steps;
  double effective_lr = 0.0;
  std::int64_t searched = 0;
  bool frontier = false;  // winner sits on a grid boundary
};

// Exhaustive search minimizing steps-to-target; ties break toward smaller
// alpha, then smaller beta/gamma. Deterministic regardless of parallelism.
inline TuneResult grid_search(const Spectrum& s, double B, double target,
                              Family family, double p, const Grids& grids,
                              std::int64_t cap = kDefaultStepCap,
                              const InitCondition& init = {}, int jobs = 0) {
  if (grids.alphas.empty())
    throw std::invalid_argument("grid_search: empty alpha grid");
  const Spectrum sp = precondition(s, p);
  const std::vector<double> single_zero{0.0};
  const std::vector<double>& seconds =
      family == Family::Momentum ? grids.betas
      : family == Family::Ema    ? grids.gammas
                                 : single_zero;
  if (seconds.empty())
    throw std::invalid_argument("grid_search: empty beta/gamma grid");

  struct Cell {
    OptimizerConfig cfg;
    StepsResult steps;
    double limit_risk = 0.0;
  };
  std::vector<Cell> cells;
  for (double alpha : grids.alphas) {
    for (double second : seconds) {
      OptimizerConfig cfg;
      cfg.alpha = alpha;
      cfg.beta = family == Family::Momentum ? second : 0.0;
      cfg.gamma = family == Family::Ema ? second : 0.0;
      cfg.p = p;
      cfg.batch_size = B;
      cells.push_back({cfg, {}, 0.0});
    }
  }

  parallel_for(
      cells.size(),
      [&](std::size_t i) {
        cells[i].steps = detail::steps_to_target_preconditioned(
            sp, cells[i].cfg, target, cap, init);
        if (!cells[i].steps.reached())
          cells[i].limit_risk = detail::limit_risk(sp, cells[i].cfg, init);
      },
      jobs);

  // (steps, alpha, beta+gamma) lexicographic minimum over reached cells
  const Cell* winner = nullptr;
  for (const auto& cell : cells) {
    if (!cell.steps.reached()) continue;
    if (!winner) {
      winner = &cell;
      continue;
    }
    const auto key = [](const Cell& c) {
      return std::make_tuple(c.steps.steps, c.cfg.alpha,
                             c.cfg.beta + c.cfg.gamma);
    };
    if (key(cell) < key(*winner)) winner = &cell;
  }

  TuneResult result;
  result.searched = static_cast<std::int64_t>(cells.size());
  if (!winner) {
    // all unreachable: report the config with the smallest limiting risk
    const Cell* best = &cells.front();
    for (const auto& cell : cells)
      if (cell.limit_risk < best->limit_risk) best = &cell;
    result.best = best->cfg;
    result.steps = best->steps;
    result.effective_lr = best->cfg.effective_lr();
    return result;
  }
  result.best = winner->cfg;
  result.steps = winner->steps;
  result.effective_lr = winner->cfg.effective_lr();

  const double a = winner->cfg.alpha;
  result.frontier = (a == grids.alphas.front() || a == grids.alphas.back());
  const double second = winner->cfg.beta + winner->cfg.gamma;
  if (family != Family::Sgd && !seconds.empty() && second == seconds.back())
    result.frontier = true;
  return result;
}

// ---------------------------------------------------------------------------
// Optimal learning rate as a function of batch size

struct LrCurveRow {
  double batch_size = 0.0;
  TuneResult tune;
};

inline std::vector<LrCurveRow> optimal_lr_curve(
    const Spectrum& s, const std::vector<double>& batch_sizes, double target,
    Family family, double p, const Grids& grids,
    std::int64_t cap = kDefaultStepCap, const InitCondition& init = {},
    int jobs = 0) {
  std::vector<LrCurveRow> rows;
  rows.reserve(batch_sizes.size());
  for (double B : batch_sizes)
    rows.push_back({B, grid_search(s, B, target, family, p, grids, cap, init, jobs)});
  return rows;
}

}  // namespace nqm
