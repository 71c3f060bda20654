// Stochastic oracle: samples literal noisy-quadratic trajectories and
// estimates expected risk with standard errors, independently of the
// analytic dynamics it is used to validate.

#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <vector>

#include "nqm/dynamics.hpp"
#include "nqm/parallel.hpp"
#include "nqm/schedule.hpp"
#include "nqm/spectrum.hpp"

namespace nqm {

enum class NoiseKind {
  Gaussian,
  Uniform  // uniform(-sqrt(3), sqrt(3)): zero mean, unit variance
};

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Counter-based per-trajectory seed so stream assignment is independent of
// execution order.
inline std::uint64_t derive_seed(std::uint64_t master, std::uint64_t index) {
  return splitmix64(master ^ splitmix64(index));
}

class NoiseSource {
 public:
  NoiseSource(std::uint64_t seed, NoiseKind kind) : rng_(seed), kind_(kind) {}

  double standard_normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u, v, s;
    do {
      u = 2.0 * uniform01() - 1.0;
      v = 2.0 * uniform01() - 1.0;
      s = u * u + v * v;
    } while (s >= 1.0 || s == 0.0);
    const double m = std::sqrt(-2.0 * std::log(s) / s);
    spare_ = v * m;
    have_spare_ = true;
    return u * m;
  }

  // Zero-mean unit-variance gradient noise of the configured kind.
  double draw() {
    if (kind_ == NoiseKind::Gaussian) return standard_normal();
    return (2.0 * uniform01() - 1.0) * 1.7320508075688772;
  }

 private:
  double uniform01() {
    return (rng_() >> 11) * 0x1.0p-53;
  }

  std::mt19937_64 rng_;
  NoiseKind kind_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace detail

// Per-step learning rate lookup; a constant rate is a one-piece schedule.
inline std::vector<double> schedule_rates(const Schedule& sched) {
  std::vector<double> rates;
  rates.reserve(static_cast<std::size_t>(sched.total_steps()));
  for (const auto& p : sched.pieces)
    for (std::int64_t k = 0; k < p.length; ++k) rates.push_back(p.alpha);
  return rates;
}

// Samples one trajectory of the literal update rule and records the total
// risk at t = 0..T. Preconditioning applies the explicit update
//   theta <- theta - a h^-p (h theta + eps sqrt(c/B)),
// not the transformed-spectrum shortcut, so their equivalence is testable.
inline std::vector<double> sample_trajectory(
    const Spectrum& s, const OptimizerConfig& cfg,
    const std::vector<double>& rates, std::uint64_t seed,
    NoiseKind kind = NoiseKind::Gaussian) {
  cfg.validate();
  for (const auto& e : s.entries())
    if (e.w != 1.0)
      throw std::invalid_argument(
          "sample_trajectory: weighted spectra cannot be sampled; use explicit "
          "dimensions");
  if (cfg.p > 0.0 && (cfg.beta > 0.0 || cfg.gamma > 0.0))
    throw std::invalid_argument(
        "sample_trajectory: explicit preconditioned sampling is defined for "
        "the plain update only");

  const std::size_t d = s.size();
  const std::size_t T = rates.size();
  detail::NoiseSource noise(seed, kind);

  // With p > 0 the update runs in the untransformed coordinates; scaling the
  // initial iterate by h^{-p/2} makes A equal 1 in the transformed ones,
  // matching the analytic path's unit initialization.
  std::vector<double> theta(d), momentum_state(d, 0.0), averaged(d);
  const auto& init_entries = s.entries();
  for (std::size_t i = 0; i < d; ++i) {
    const double scale =
        cfg.p > 0.0 ? std::pow(init_entries[i].h, -0.5 * cfg.p) : 1.0;
    theta[i] = scale * noise.standard_normal();
  }
  const bool use_ema = cfg.gamma > 0.0;
  if (use_ema) averaged = theta;

  const auto& entries = s.entries();
  auto risk = [&](const std::vector<double>& x) {
    double r = 0.0;
    for (std::size_t i = 0; i < d; ++i) r += 0.5 * entries[i].h * x[i] * x[i];
    return r;
  };

  std::vector<double> risks;
  risks.reserve(T + 1);
  risks.push_back(risk(use_ema ? averaged : theta));

  for (std::size_t t = 0; t < T; ++t) {
    const double alpha = rates[t];
    for (std::size_t i = 0; i < d; ++i) {
      const double h = entries[i].h;
      const double grad =
          h * theta[i] + std::sqrt(entries[i].c / cfg.batch_size) * noise.draw();
      if (cfg.beta > 0.0) {
        momentum_state[i] = cfg.beta * momentum_state[i] + grad;
        theta[i] -= alpha * momentum_state[i];
      } else if (cfg.p > 0.0) {
        theta[i] -= alpha * std::pow(h, -cfg.p) * grad;
      } else {
        theta[i] -= alpha * grad;
      }
      if (use_ema)
        averaged[i] = cfg.gamma * averaged[i] + (1.0 - cfg.gamma) * theta[i];
    }
    risks.push_back(risk(use_ema ? averaged : theta));
  }
  return risks;
}

struct McEstimate {
  std::vector<double> mean_risk;
  std::vector<double> std_error;
  std::int64_t n_trajectories = 0;
  std::uint64_t seed = 0;
};

// Averages n_traj independent trajectories. Accumulation runs over fixed-size
// chunks combined in index order, so results are bit-identical across runs
// and thread counts.
inline McEstimate estimate(const Spectrum& s, const OptimizerConfig& cfg,
                           const std::vector<double>& rates,
                           std::int64_t n_traj, std::uint64_t seed,
                           NoiseKind kind = NoiseKind::Gaussian, int jobs = 0) {
  if (n_traj < 2)
    throw std::invalid_argument("estimate: need at least 2 trajectories");
  const std::size_t n_steps = rates.size() + 1;
  constexpr std::int64_t chunk_size = 256;
  const auto n_chunks =
      static_cast<std::size_t>((n_traj + chunk_size - 1) / chunk_size);

  struct Acc {
    std::vector<double> sum, sumsq;
  };
  std::vector<Acc> chunks(n_chunks);

  parallel_for(
      n_chunks,
      [&](std::size_t ci) {
        Acc acc;
        acc.sum.assign(n_steps, 0.0);
        acc.sumsq.assign(n_steps, 0.0);
        const std::int64_t begin = static_cast<std::int64_t>(ci) * chunk_size;
        const std::int64_t end = std::min(begin + chunk_size, n_traj);
        for (std::int64_t j = begin; j < end; ++j) {
          const auto traj = sample_trajectory(
              s, cfg, rates, detail::derive_seed(seed, static_cast<std::uint64_t>(j)),
              kind);
          for (std::size_t t = 0; t < n_steps; ++t) {
            acc.sum[t] += traj[t];
            acc.sumsq[t] += traj[t] * traj[t];
          }
        }
        chunks[ci] = std::move(acc);
      },
      jobs);

  std::vector<double> sum(n_steps, 0.0), sumsq(n_steps, 0.0);
  for (const auto& c : chunks) {
    for (std::size_t t = 0; t < n_steps; ++t) {
      sum[t] += c.sum[t];
      sumsq[t] += c.sumsq[t];
    }
  }

  McEstimate est;
  est.n_trajectories = n_traj;
  est.seed = seed;
  est.mean_risk.resize(n_steps);
  est.std_error.resize(n_steps);
  const auto n = static_cast<double>(n_traj);
  for (std::size_t t = 0; t < n_steps; ++t) {
    const double mean = sum[t] / n;
    est.mean_risk[t] = mean;
    const double var = std::max(0.0, (sumsq[t] - n * mean * mean) / (n - 1.0));
    est.std_error[t] = std::sqrt(var / n);
  }
  return est;
}

inline std::vector<double> constant_rates(double alpha, std::int64_t steps) {
  return std::vector<double>(static_cast<std::size_t>(steps), alpha);
}

inline McEstimate estimate(const Spectrum& s, const OptimizerConfig& cfg,
                           std::int64_t steps, std::int64_t n_traj,
                           std::uint64_t seed,
                           NoiseKind kind = NoiseKind::Gaussian, int jobs = 0) {
  return estimate(s, cfg, constant_rates(cfg.alpha, steps), n_traj, seed, kind,
                  jobs);
}

}  // namespace nqm
