// Command-line front end for the noisy quadratic model toolkit.
//
// Verbs:
//   sweep     tune every (family, batch size) cell, fit critical batch sizes
//   tune      tune a single batch size for each family
//   schedule  optimize piecewise-constant LR schedules per batch size
//   verify    cross-check analytic risks against Monte Carlo and bounds
//   plot      render sweep results as a standalone SVG
//
// Exit codes: 0 success, 1 configuration error, 2 verification failure,
// 3 sweep finished with unreachable cells.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "nqm/dynamics.hpp"
#include "nqm/montecarlo.hpp"
#include "nqm/parallel.hpp"
#include "nqm/scaling.hpp"
#include "nqm/schedule.hpp"
#include "nqm/spectrum.hpp"
#include "nqm/tuning.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace nqm;

namespace {

struct Options {
  std::string config_path;
  std::string out_dir = "out";
  std::uint64_t seed = 1;
  int jobs = 0;
  double target = 0.01;
  int bins = 100;
  double batch = 1.0;          // tune verb
  int n_pieces = 50;           // schedule verb
  std::int64_t mc_traj = 20000;  // verify verb
  bool mutate = false;         // verify verb: inject a deliberate error
};

struct Config {
  Spectrum spectrum;
  std::vector<FamilySpec> families;
  std::vector<double> batch_sizes;
  std::int64_t step_cap = kDefaultStepCap;
};

Family family_from_name(const std::string& name) {
  if (name == "sgd") return Family::Sgd;
  if (name == "momentum") return Family::Momentum;
  if (name == "ema") return Family::Ema;
  throw std::invalid_argument("unknown family: " + name);
}

Config load_config(const Options& opt) {
  Config cfg;
  json j;
  if (!opt.config_path.empty()) {
    std::ifstream in(opt.config_path);
    if (!in) throw std::invalid_argument("cannot open config: " + opt.config_path);
    in >> j;
  }

  std::string spec_desc = j.value("spectrum", std::string("power:d=1000"));
  if (j.contains("spectrum") && j["spectrum"].is_object()) {
    cfg.spectrum = spectrum_from_json(j["spectrum"]);
  } else {
    std::size_t d = 0;
    if (!parse_power_shorthand(spec_desc, d))
      throw std::invalid_argument("unrecognized spectrum: " + spec_desc);
    cfg.spectrum = build_power_spectrum(d);
  }
  const int bins = j.value("bins", opt.bins);
  if (bins > 0) cfg.spectrum = quantize(cfg.spectrum, static_cast<std::size_t>(bins));

  if (j.contains("families")) {
    for (const auto& f : j["families"])
      cfg.families.push_back(
          {family_from_name(f.at("family").get<std::string>()), f.value("p", 0.0)});
  } else {
    cfg.families = {{Family::Sgd, 0.0}, {Family::Momentum, 0.0}, {Family::Ema, 0.0}};
  }

  if (j.contains("batch_sizes")) {
    for (const auto& b : j["batch_sizes"]) cfg.batch_sizes.push_back(b.get<double>());
  } else {
    for (int k = 0; k <= 13; ++k) cfg.batch_sizes.push_back(std::pow(2.0, k));
  }
  cfg.step_cap = j.value("step_cap", kDefaultStepCap);
  return cfg;
}

std::ofstream open_out(const fs::path& path) {
  fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  return out;
}

std::string num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

void write_tuning_csv(const fs::path& path, const std::vector<SweepRecord>& records) {
  auto out = open_out(path);
  out << "family,B,p,alpha,beta,gamma,effective_lr,steps,unreachable_flag,"
         "frontier_flag\n";
  for (const auto& r : records) {
    const auto& b = r.tune.best;
    out << family_name(r.family.family) << ',' << num(r.batch_size) << ','
        << num(r.family.p) << ',' << num(b.alpha) << ',' << num(b.beta) << ','
        << num(b.gamma) << ',' << num(r.tune.effective_lr) << ','
        << r.tune.steps.steps << ',' << (r.tune.steps.reached() ? 0 : 1) << ','
        << (r.tune.frontier ? 1 : 0) << '\n';
  }
}

// ---------------------------------------------------------------------------
// SVG output: fixed-size log-log chart, no timestamps, stable ordering.

struct Series {
  std::string label;
  std::vector<std::pair<double, double>> points;  // (B, steps)
  bool dashed = false;
};

void write_svg(const fs::path& path, const std::vector<Series>& series,
               const std::string& title) {
  const int W = 760, H = 520, ML = 70, MR = 20, MT = 40, MB = 50;
  double x_lo = 1e300, x_hi = -1e300, y_lo = 1e300, y_hi = -1e300;
  for (const auto& s : series)
    for (const auto& [b, v] : s.points) {
      if (!(v > 0.0) || !(b > 0.0)) continue;
      x_lo = std::min(x_lo, std::log2(b));
      x_hi = std::max(x_hi, std::log2(b));
      y_lo = std::min(y_lo, std::log10(v));
      y_hi = std::max(y_hi, std::log10(v));
    }
  if (x_hi <= x_lo) x_hi = x_lo + 1.0;
  if (y_hi <= y_lo) y_hi = y_lo + 1.0;
  auto px = [&](double lb) {
    return ML + (lb - x_lo) / (x_hi - x_lo) * (W - ML - MR);
  };
  auto py = [&](double lv) {
    return H - MB - (lv - y_lo) / (y_hi - y_lo) * (H - MT - MB);
  };
  static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd",
                                 "#8c564b", "#e377c2"};

  auto out = open_out(path);
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W
      << "\" height=\"" << H << "\" viewBox=\"0 0 " << W << ' ' << H << "\">\n"
      << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
      << "<text x=\"" << W / 2 << "\" y=\"24\" text-anchor=\"middle\" "
         "font-family=\"sans-serif\" font-size=\"16\">" << title << "</text>\n";
  // axes + ticks
  out << "<line x1=\"" << ML << "\" y1=\"" << H - MB << "\" x2=\"" << W - MR
      << "\" y2=\"" << H - MB << "\" stroke=\"black\"/>\n"
      << "<line x1=\"" << ML << "\" y1=\"" << MT << "\" x2=\"" << ML
      << "\" y2=\"" << H - MB << "\" stroke=\"black\"/>\n";
  for (int e = static_cast<int>(std::ceil(x_lo)); e <= std::floor(x_hi); e += 2) {
    const double x = px(e);
    out << "<line x1=\"" << x << "\" y1=\"" << H - MB << "\" x2=\"" << x
        << "\" y2=\"" << H - MB + 5 << "\" stroke=\"black\"/>\n"
        << "<text x=\"" << x << "\" y=\"" << H - MB + 20
        << "\" text-anchor=\"middle\" font-family=\"sans-serif\" "
           "font-size=\"11\">2^" << e << "</text>\n";
  }
  for (int e = static_cast<int>(std::ceil(y_lo)); e <= std::floor(y_hi); ++e) {
    const double y = py(e);
    out << "<line x1=\"" << ML - 5 << "\" y1=\"" << y << "\" x2=\"" << ML
        << "\" y2=\"" << y << "\" stroke=\"black\"/>\n"
        << "<text x=\"" << ML - 8 << "\" y=\"" << y + 4
        << "\" text-anchor=\"end\" font-family=\"sans-serif\" "
           "font-size=\"11\">1e" << e << "</text>\n";
  }
  out << "<text x=\"" << (ML + W - MR) / 2 << "\" y=\"" << H - 12
      << "\" text-anchor=\"middle\" font-family=\"sans-serif\" "
         "font-size=\"13\">batch size</text>\n"
      << "<text x=\"18\" y=\"" << (MT + H - MB) / 2
      << "\" text-anchor=\"middle\" font-family=\"sans-serif\" "
         "font-size=\"13\" transform=\"rotate(-90 18 " << (MT + H - MB) / 2
      << ")\">steps to target</text>\n";

  int ci = 0;
  for (const auto& s : series) {
    std::ostringstream pts;
    for (const auto& [b, v] : s.points) {
      if (!(v > 0.0)) continue;
      pts << px(std::log2(b)) << ',' << py(std::log10(v)) << ' ';
    }
    const char* color = colors[ci % 6];
    out << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"2\""
        << (s.dashed ? " stroke-dasharray=\"6 4\"" : "") << " points=\""
        << pts.str() << "\"/>\n"
        << "<text x=\"" << W - MR - 6 << "\" y=\"" << MT + 18 * (ci + 1)
        << "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"12\" "
           "fill=\"" << color << "\">" << s.label << "</text>\n";
    ++ci;
  }
  out << "</svg>\n";
}

// ---------------------------------------------------------------------------

int run_sweep(const Options& opt, const Config& cfg) {
  const auto records =
      sweep(cfg.spectrum, cfg.families, cfg.batch_sizes, opt.target,
            cfg.step_cap, {}, opt.jobs);

  std::map<std::string, CriticalBatchFit> fits;
  for (const auto& fam : cfg.families) {
    std::vector<SweepRecord> subset;
    for (const auto& r : records)
      if (r.family.label() == fam.label()) subset.push_back(r);
    try {
      fits[fam.label()] = fit_critical_batch(subset);
    } catch (const std::exception&) {
      // fewer than 4 reachable cells: leave the fit out
    }
  }

  const fs::path out_dir(opt.out_dir);
  write_tuning_csv(out_dir / "tuning.csv", records);

  auto out = open_out(out_dir / "sweep.csv");
  out << "family,p,B,steps,lower_bound,b_crit\n";
  bool partial = false;
  for (const auto& r : records) {
    const auto it = fits.find(r.family.label());
    const double b_crit = it != fits.end() ? it->second.b_crit : 0.0;
    out << family_name(r.family.family) << ',' << num(r.family.p) << ','
        << num(r.batch_size) << ',' << r.tune.steps.steps << ','
        << num(r.lower_bound) << ',' << num(b_crit) << '\n';
    if (!r.tune.steps.reached()) partial = true;
  }

  json summary;
  summary["target"] = opt.target;
  summary["d_effective"] = cfg.spectrum.d_effective();
  for (const auto& [label, fit] : fits) {
    summary["fits"][label] = {{"b_crit", fit.b_crit},
                              {"s_infinity", fit.s_infinity},
                              {"residual_log10_rms", fit.residual},
                              {"degraded", fit.degraded}};
  }
  open_out(out_dir / "fit_summary.json") << summary.dump(2) << '\n';

  std::cout << "sweep: " << records.size() << " cells, "
            << fits.size() << " fits -> " << out_dir.string() << '\n';
  for (const auto& [label, fit] : fits)
    std::cout << "  " << label << ": b_crit " << fit.b_crit << " s_inf "
              << fit.s_infinity << (fit.degraded ? " (degraded)" : "") << '\n';
  return partial ? 3 : 0;
}

int run_tune(const Options& opt, const Config& cfg) {
  std::vector<SweepRecord> records =
      sweep(cfg.spectrum, cfg.families, {opt.batch}, opt.target, cfg.step_cap,
            {}, opt.jobs);
  write_tuning_csv(fs::path(opt.out_dir) / "tuning.csv", records);
  for (const auto& r : records) {
    std::cout << r.family.label() << " B=" << r.batch_size << ": ";
    if (r.tune.steps.reached())
      std::cout << r.tune.steps.steps << " steps at alpha=" << r.tune.best.alpha
                << " beta=" << r.tune.best.beta << " gamma=" << r.tune.best.gamma;
    else
      std::cout << "target unreachable";
    if (r.tune.frontier) std::cout << " [grid frontier]";
    std::cout << '\n';
  }
  return 0;
}

int run_schedule(const Options& opt, const Config& cfg) {
  const fs::path out_dir(opt.out_dir);
  auto final_csv = open_out(out_dir / "final_alpha_vs_B.csv");
  final_csv << "B,steps,final_alpha,first_alpha,final_risk\n";
  bool any_unreachable = false;
  for (double B : cfg.batch_sizes) {
    const auto result = min_steps_with_schedule(
        cfg.spectrum, B, opt.target, opt.n_pieces, {}, cfg.step_cap, 200);
    std::ostringstream tag;
    tag << "schedule_B" << B;
    if (!result.reachable) {
      any_unreachable = true;
      std::cout << tag.str() << ": unreachable within cap\n";
      continue;
    }
    open_out(out_dir / (tag.str() + ".json"))
        << to_json(result.schedule).dump(2) << '\n';
    auto csv = open_out(out_dir / (tag.str() + ".csv"));
    csv << "step,alpha\n";
    std::int64_t step = 0;
    for (const auto& piece : result.schedule.pieces) {
      for (std::int64_t k = 0; k < piece.length; ++k)
        csv << step++ << ',' << num(piece.alpha) << '\n';
    }
    const auto& pieces = result.schedule.pieces;
    final_csv << num(B) << ',' << result.steps << ','
              << num(pieces.empty() ? 0.0 : pieces.back().alpha) << ','
              << num(pieces.empty() ? 0.0 : pieces.front().alpha) << ','
              << num(result.final_risk) << '\n';
    std::cout << tag.str() << ": " << result.steps << " steps, final risk "
              << result.final_risk << '\n';
  }
  return any_unreachable ? 3 : 0;
}

int run_verify(const Options& opt, const Config& cfg) {
  if (opt.mc_traj < 2) {
    std::cerr << "verify: need at least 2 trajectories\n";
    return 1;
  }
  // use an unweighted spectrum small enough to sample
  const Spectrum s = build_power_spectrum(10);
  struct Case {
    const char* name;
    OptimizerConfig c;
  };
  std::vector<Case> cases;
  {
    OptimizerConfig sgd;
    sgd.alpha = 0.4;
    sgd.batch_size = 8.0;
    cases.push_back({"sgd", sgd});
    OptimizerConfig mom;
    mom.alpha = 0.05;
    mom.beta = 0.9;
    mom.batch_size = 8.0;
    cases.push_back({"momentum", mom});
    OptimizerConfig ema;
    ema.alpha = 0.3;
    ema.gamma = 0.9;
    ema.batch_size = 8.0;
    cases.push_back({"ema", ema});
  }
  const std::int64_t T = 60;
  bool ok = true;
  for (std::size_t i = 0; i < cases.size(); ++i) {
    const auto traj = risk_trajectory(s, cases[i].c, T, {});
    const auto est = estimate(s, cases[i].c, T, opt.mc_traj,
                              opt.seed + i, NoiseKind::Gaussian, opt.jobs);
    double worst = 0.0;
    for (std::size_t t = 0; t <= static_cast<std::size_t>(T); ++t) {
      double analytic = traj.risks[t];
      if (opt.mutate && t > 0) analytic *= 1.1;  // deliberate 10% corruption
      worst = std::max(worst, std::abs(est.mean_risk[t] - analytic) /
                                  std::max(est.std_error[t], 1e-300));
    }
    const bool pass = worst < 4.0;
    std::cout << "mc " << cases[i].name << ": max |z| " << worst << ' '
              << (pass ? "ok" : "MISMATCH") << '\n';
    ok = ok && pass;
  }

  // bound suite: sampled exact risks must lie below the analytic bounds
  std::mt19937_64 rng(opt.seed);
  std::uniform_real_distribution<double> uh(0.01, 1.0), um(0.0, 0.95),
      uf(0.01, 1.5);
  int violations = 0;
  for (int trial = 0; trial < 200; ++trial) {
    const double h = uh(rng), second = um(rng), alpha = uf(rng) / h;
    const bool ema = (trial % 2) == 1;
    OptimizerConfig c;
    c.alpha = alpha;
    c.batch_size = 16.0;
    (ema ? c.gamma : c.beta) = second;
    if (transition_spectral_radius(h, c) >= 1.0) continue;
    for (std::int64_t t : {0, 1, 5, 50, 500}) {
      const double exact =
          ema ? 0.5 * h * ema_second_moment(h, 1.0, alpha, second, 16.0, t, 1.0)
              : 0.5 * h *
                    momentum_second_moment(h, 1.0, alpha, second, 16.0, t, 1.0);
      double bound =
          ema ? ema_risk_bound(h, 1.0, alpha, second, 16.0, t, {})
              : momentum_risk_bound(h, 1.0, alpha, second, 16.0, t, {});
      if (opt.mutate) bound = -bound;  // corrupted bound must be caught
      if (exact > bound + 1e-9) ++violations;
    }
  }
  std::cout << "bounds: " << violations << " violation(s)\n";
  ok = ok && violations == 0;

  std::cout << (ok ? "verify: PASS" : "verify: FAIL") << '\n';
  return ok ? 0 : 2;
}

int run_plot(const Options& opt) {
  const fs::path csv_path = fs::path(opt.out_dir) / "sweep.csv";
  std::ifstream in(csv_path);
  if (!in) {
    std::cerr << "plot: missing " << csv_path.string() << " (run sweep first)\n";
    return 1;
  }
  std::map<std::string, Series> by_family;
  Series lower{"lower bound", {}, true};
  std::string line;
  std::getline(in, line);  // header
  while (std::getline(in, line)) {
    std::stringstream ss(line);
    std::string family, p, B, steps, lb, bc;
    std::getline(ss, family, ',');
    std::getline(ss, p, ',');
    std::getline(ss, B, ',');
    std::getline(ss, steps, ',');
    std::getline(ss, lb, ',');
    std::getline(ss, bc, ',');
    const double b = std::stod(B), st = std::stod(steps), l = std::stod(lb);
    std::string label = family + (p != "0" ? "_p" + p : "");
    auto& s = by_family[label];
    s.label = label;
    if (st > 0.0) s.points.emplace_back(b, st);
    if (lower.points.empty() || lower.points.back().first != b)
      lower.points.emplace_back(b, std::max(l, 1.0));
  }
  std::vector<Series> series;
  for (auto& [label, s] : by_family) series.push_back(std::move(s));
  series.push_back(std::move(lower));
  const fs::path svg = fs::path(opt.out_dir) / "steps_vs_batch.svg";
  write_svg(svg, series, "steps to target vs batch size");
  std::cout << "plot: wrote " << svg.string() << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"noisy quadratic model simulator"};
  app.require_subcommand(1);
  Options opt;
  app.add_option("--config", opt.config_path, "JSON config file");
  app.add_option("--out", opt.out_dir, "output directory");
  app.add_option("--seed", opt.seed, "random seed");
  app.add_option("--jobs", opt.jobs, "worker threads (0 = auto / NQM_JOBS)");
  app.add_option("--target", opt.target, "target risk threshold");
  app.add_option("--bins", opt.bins, "spectrum quantization bins");

  auto* sweep_cmd = app.add_subcommand("sweep", "batch-size sweep + fits");
  auto* tune_cmd = app.add_subcommand("tune", "tune one batch size");
  tune_cmd->add_option("--batch", opt.batch, "batch size");
  auto* sched_cmd = app.add_subcommand("schedule", "optimize LR schedules");
  sched_cmd->add_option("--pieces", opt.n_pieces, "schedule pieces");
  auto* verify_cmd = app.add_subcommand("verify", "Monte Carlo cross-check");
  verify_cmd->add_option("--trajectories", opt.mc_traj, "MC sample count");
  verify_cmd->add_flag("--mutate", opt.mutate,
                       "inject a deliberate error (must fail)");
  auto* plot_cmd = app.add_subcommand("plot", "render sweep.csv as SVG");
  for (auto* sub : {sweep_cmd, tune_cmd, sched_cmd, verify_cmd, plot_cmd})
    sub->fallthrough();

  CLI11_PARSE(app, argc, argv);

  try {
    if (app.got_subcommand(plot_cmd)) return run_plot(opt);
    if (app.got_subcommand(verify_cmd)) {
      Config cfg;  // verify builds its own small spectrum
      return run_verify(opt, cfg);
    }
    const Config cfg = load_config(opt);
    if (app.got_subcommand(sweep_cmd)) return run_sweep(opt, cfg);
    if (app.got_subcommand(tune_cmd)) return run_tune(opt, cfg);
    if (app.got_subcommand(sched_cmd)) return run_schedule(opt, cfg);
  } catch (const std::invalid_argument& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 1;
}
