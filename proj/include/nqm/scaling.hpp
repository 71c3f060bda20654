// Batch-size sweeps, the information-theoretic lower bound on steps, and
// critical-batch-size extraction via a two-parameter hyperbola fit.

#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "nqm/tuning.hpp"

namespace nqm {

struct FamilySpec {
  Family family = Family::Sgd;
  double p = 0.0;

  std::string label() const {
    std::string name = family_name(family);
    if (p != 0.0) {
      char buf[32];
      std::snprintf(buf, sizeof(buf), "%g", p);
      name += "_p" + std::string(buf);
    }
    return name;
  }
};

// t solving d/(2 t B) = target: the step count at which the maximum-likelihood
// risk d/2N (N = tB samples) reaches the target.
inline double lower_bound_steps(double d_effective, double target, double B) {
  if (!(target > 0.0))
    throw std::invalid_argument("lower_bound_steps: target must be > 0");
  return d_effective / (2.0 * target * B);
}

struct SweepRecord {
  FamilySpec family;
  double batch_size = 0.0;
  TuneResult tune;
  double lower_bound = 0.0;
};

// Tunes every (family, B) cell; output ordering is (family, B) by
// construction regardless of execution order.
inline std::vector<SweepRecord> sweep(const Spectrum& s,
                                      const std::vector<FamilySpec>& families,
                                      const std::vector<double>& batch_sizes,
                                      double target,
                                      std::int64_t cap = kDefaultStepCap,
                                      const InitCondition& init = {},
                                      int jobs = 0) {
  std::vector<SweepRecord> records;
  records.reserve(families.size() * batch_sizes.size());
  const double d_eff = s.d_effective();
  for (const auto& fam : families) {
    const double alpha_max = 2.0 / precondition(s, fam.p).h_max();
    const Grids grids = Grids::defaults(alpha_max);
    for (double B : batch_sizes) {
      SweepRecord rec;
      rec.family = fam;
      rec.batch_size = B;
      rec.tune = grid_search(s, B, target, fam.family, fam.p, grids, cap, init, jobs);
      rec.lower_bound = lower_bound_steps(d_eff, target, B);
      records.push_back(std::move(rec));
    }
  }
  return records;
}

// ---------------------------------------------------------------------------
// Critical batch size: least-squares fit of steps(B) = s_inf (1 + b_crit/B)
// in log space over (log s_inf, log b_crit).

struct CriticalBatchFit {
  double b_crit = 0.0;
  double s_infinity = 0.0;
  double residual = 0.0;  // RMS in log10 space
  bool degraded = false;  // plateau not identifiable in the swept range
};

inline CriticalBatchFit fit_critical_batch(const std::vector<SweepRecord>& records) {
  std::vector<double> bs, log_steps;
  double b_max = 0.0;
  for (const auto& r : records) {
    if (!r.tune.steps.reached() || r.tune.steps.steps <= 0) continue;
    bs.push_back(r.batch_size);
    log_steps.push_back(std::log(static_cast<double>(r.tune.steps.steps)));
    b_max = std::max(b_max, r.batch_size);
  }
  const std::size_t n = bs.size();
  if (n < 4)
    throw std::invalid_argument("fit_critical_batch: need >= 4 finite records");

  // Gauss-Newton with Levenberg damping on (ls, lb) = (log s_inf, log b_crit)
  double ls = log_steps.back();
  double gm = 0.0;
  for (double b : bs) gm += std::log(b);
  double lb = gm / static_cast<double>(n);
  double lambda = 1e-3;
  bool converged = false;

  auto rms = [&](double ls_, double lb_) {
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double r = ls_ + std::log1p(std::exp(lb_) / bs[i]) - log_steps[i];
      acc += r * r;
    }
    return acc;
  };

  double cost = rms(ls, lb);
  for (int it = 0; it < 200; ++it) {
    double j11 = 0.0, j12 = 0.0, j22 = 0.0, g1 = 0.0, g2 = 0.0;
    const double b = std::exp(lb);
    for (std::size_t i = 0; i < n; ++i) {
      const double r = ls + std::log1p(b / bs[i]) - log_steps[i];
      const double d2 = b / (bs[i] + b);  // d residual / d lb
      j11 += 1.0;
      j12 += d2;
      j22 += d2 * d2;
      g1 += r;
      g2 += r * d2;
    }
    double step1 = 0.0, step2 = 0.0;
    const double a11 = j11 * (1.0 + lambda), a22 = j22 * (1.0 + lambda);
    const double det = a11 * a22 - j12 * j12;
    if (std::abs(det) < 1e-300) break;
    step1 = -(a22 * g1 - j12 * g2) / det;
    step2 = -(a11 * g2 - j12 * g1) / det;
    const double new_cost = rms(ls + step1, lb + step2);
    if (new_cost <= cost) {
      ls += step1;
      lb += step2;
      cost = new_cost;
      lambda = std::max(lambda * 0.5, 1e-12);
      if (std::abs(step1) + std::abs(step2) < 1e-12) {
        converged = true;
        break;
      }
    } else {
      lambda *= 10.0;
      if (lambda > 1e12) break;
    }
  }

  CriticalBatchFit fit;
  fit.s_infinity = std::exp(ls);
  fit.b_crit = std::exp(lb);
  fit.residual = std::sqrt(cost / static_cast<double>(n)) / std::log(10.0);
  fit.degraded = !converged || fit.b_crit > b_max;
  return fit;
}

}  // namespace nqm
