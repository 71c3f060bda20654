// Eigenvalue spectra (curvature h_i, gradient-noise c_i, multiplicity w_i)
// defining a noisy quadratic instance, plus quantization and power-law
// preconditioning transforms.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

namespace nqm {

struct SpectrumEntry {
  double h = 0.0;  // curvature, > 0
  double c = 0.0;  // noise coefficient, >= 0
  double w = 1.0;  // multiplicity weight, > 0
};

// Entries are kept sorted by h descending. d_effective() is the weight sum.
class Spectrum {
 public:
  Spectrum() = default;

  explicit Spectrum(std::vector<SpectrumEntry> entries)
      : entries_(std::move(entries)) {
    for (const auto& e : entries_) {
      if (!(e.h > 0.0)) throw std::invalid_argument("spectrum: h must be > 0");
      if (e.c < 0.0) throw std::invalid_argument("spectrum: c must be >= 0");
      if (!(e.w > 0.0)) throw std::invalid_argument("spectrum: w must be > 0");
    }
    std::stable_sort(entries_.begin(), entries_.end(),
                     [](const SpectrumEntry& a, const SpectrumEntry& b) {
                       return a.h > b.h;
                     });
  }

  const std::vector<SpectrumEntry>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }

  double d_effective() const {
    double d = 0.0;
    for (const auto& e : entries_) d += e.w;
    return d;
  }

  double h_max() const { return entries_.front().h; }
  double h_min() const { return entries_.back().h; }

  // Initial total risk sum_i w_i (h_i/2) a0 for per-dimension second moment a0.
  double initial_risk(double a0 = 1.0) const {
    double r = 0.0;
    for (const auto& e : entries_) r += e.w * 0.5 * e.h * a0;
    return r;
  }

 private:
  std::vector<SpectrumEntry> entries_;
};

// Second moment E[theta(0)]^2 + V[theta(0)], identical across dimensions.
// Default is a unit Gaussian initialization.
struct InitCondition {
  double second_moment = 1.0;
  bool mean_zero = true;
};

// h_i = 1/i for i = 1..d; c_i = h_i when noise_equals_curvature, else 0.
inline Spectrum build_power_spectrum(std::size_t d,
                                     bool noise_equals_curvature = true) {
  if (d == 0) throw std::invalid_argument("build_power_spectrum: d must be >= 1");
  std::vector<SpectrumEntry> entries;
  entries.reserve(d);
  for (std::size_t i = 1; i <= d; ++i) {
    const double h = 1.0 / static_cast<double>(i);
    entries.push_back({h, noise_equals_curvature ? h : 0.0, 1.0});
  }
  return Spectrum(std::move(entries));
}

// Bins eigenvalues into at most n_bins log-spaced bins over [h_min, h_max].
// Each bin's representative h (and c) is the weighted mean of its members,
// which preserves the trace of H per bin; total weight is preserved exactly.
// Empty bins are dropped.
inline Spectrum quantize(const Spectrum& s, std::size_t n_bins) {
  if (n_bins == 0) throw std::invalid_argument("quantize: n_bins must be >= 1");
  if (s.empty() || s.size() <= n_bins) return s;

  const double lo = std::log(s.h_min());
  const double hi = std::log(s.h_max());
  if (!(hi > lo)) {
    // Degenerate spectrum: all eigenvalues equal, one bin holds everything.
    double w = 0.0, hc = 0.0, cc = 0.0;
    for (const auto& e : s.entries()) {
      w += e.w;
      hc += e.w * e.h;
      cc += e.w * e.c;
    }
    return Spectrum({{hc / w, cc / w, w}});
  }

  struct Acc {
    double w = 0.0, wh = 0.0, wc = 0.0;
  };
  std::vector<Acc> bins(n_bins);
  const double width = (hi - lo) / static_cast<double>(n_bins);
  for (const auto& e : s.entries()) {
    auto idx = static_cast<std::size_t>((std::log(e.h) - lo) / width);
    if (idx >= n_bins) idx = n_bins - 1;
    bins[idx].w += e.w;
    bins[idx].wh += e.w * e.h;
    bins[idx].wc += e.w * e.c;
  }

  std::vector<SpectrumEntry> out;
  out.reserve(n_bins);
  for (const auto& b : bins) {
    if (b.w > 0.0) out.push_back({b.wh / b.w, b.wc / b.w, b.w});
  }
  return Spectrum(std::move(out));
}

// Power-law preconditioner P = H^p applied as H~ = P^-1/2 H P^-1/2,
// C~ = P^-1/2 C P^-1/2; diagonally h~ = h^(1-p), c~ = c h^-p.
inline Spectrum precondition(const Spectrum& s, double p) {
  if (p < 0.0 || p > 1.0)
    throw std::invalid_argument("precondition: p must be in [0, 1]");
  if (p == 0.0) return s;
  std::vector<SpectrumEntry> out;
  out.reserve(s.size());
  for (const auto& e : s.entries()) {
    out.push_back({std::pow(e.h, 1.0 - p), e.c * std::pow(e.h, -p), e.w});
  }
  return Spectrum(std::move(out));
}

inline double condition_number(const Spectrum& s) {
  if (s.empty()) throw std::invalid_argument("condition_number: empty spectrum");
  return s.h_max() / s.h_min();
}

// JSON document form: {"entries": [{"h":..., "c":..., "w":...}, ...]}
inline nlohmann::json to_json(const Spectrum& s) {
  nlohmann::json entries = nlohmann::json::array();
  for (const auto& e : s.entries())
    entries.push_back({{"h", e.h}, {"c", e.c}, {"w", e.w}});
  return nlohmann::json{{"entries", std::move(entries)}};
}

inline Spectrum spectrum_from_json(const nlohmann::json& j) {
  std::vector<SpectrumEntry> entries;
  for (const auto& e : j.at("entries")) {
    entries.push_back({e.at("h").get<double>(), e.at("c").get<double>(),
                       e.value("w", 1.0)});
  }
  return Spectrum(std::move(entries));
}

// Accepts either "power:d=N" shorthand or a path to a spectrum JSON file.
// File loading is left to the caller; this parses the shorthand only.
inline bool parse_power_shorthand(const std::string& spec, std::size_t& d_out) {
  const std::string prefix = "power:d=";
  if (spec.rfind(prefix, 0) != 0) return false;
  d_out = std::stoull(spec.substr(prefix.size()));
  return true;
}

}  // namespace nqm
