#pragma once

// Simulation-study harness: replicate datasets from fixed generating
// parameters, run every requested interval method on each, and tabulate
// coverage and timing. Also the per-parameter density export used for
// plotting q densities against chain and bootstrap estimates.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "semvb/common.hpp"
#include "semvb/diagnostics.hpp"
#include "semvb/gibbs.hpp"
#include "semvb/intervals.hpp"
#include "semvb/mfvb.hpp"
#include "semvb/model.hpp"
#include "semvb/parallel.hpp"
#include "semvb/random.hpp"
#include "semvb/resample.hpp"

namespace semvb {

struct StudyConfig {
  std::size_t replicates = 100;
  std::size_t n = 301;
  FactorSpec spec;
  TrueParameters truth;
  std::vector<std::string> methods{"mfvb", "percentile"};
  std::vector<std::size_t> B{100};
  double alpha = 0.05;
  std::uint64_t seed = 1;
  unsigned threads = 1;
  Hyperparameters hyper;
  FitOptions fit;
  ChainConfig mcmc{5000, 2500, 1, 1, 1, false, 1};
  bool warm_start = false;
  PivotalScale pivotal_scale = PivotalScale::sd;
  double max_failure_fraction = 0.05;

  [[nodiscard]] bool wants(std::string_view m) const {
    return std::find(methods.begin(), methods.end(), m) != methods.end();
  }

  void validate() const {
    if (replicates < 1) throw ValidationError("study: 'replicates' must be at least 1");
    if (n < 3) throw ValidationError("study: 'n' must be at least 3");
    if (methods.empty()) throw ValidationError("study: 'methods' must not be empty");
    static const std::set<std::string> known{"mfvb", "percentile", "pivotal", "jackknife", "mcmc"};
    for (const auto& m : methods)
      if (!known.count(m))
        throw ValidationError("study: unknown method '" + m + "' (expected mfvb, percentile, pivotal, jackknife or mcmc)");
    if ((wants("percentile") || wants("pivotal")) && B.empty())
      throw ValidationError("study: bootstrap methods need a non-empty 'B' list");
    for (auto b : B)
      if (b < 1) throw ValidationError("study: every entry of 'B' must be at least 1");
    validate_alpha(alpha);
    truth.validate(spec);
    hyper.validate(spec.factors());
    mcmc.validate();
    if (mcmc.retained() * mcmc.chains < 100) throw ValidationError("study: the mcmc arm must retain at least 100 draws");
    if (!(fit.tol > 0.0) || fit.max_iter < 1 || fit.patience < 1)
      throw ValidationError("study: invalid 'tol', 'max_iter' or 'patience'");
  }
};

inline nlohmann::json to_json(const StudyConfig& c) {
  return {{"replicates", c.replicates},
          {"n", c.n},
          {"spec", to_json(c.spec)},
          {"truth", to_json(c.truth)},
          {"methods", c.methods},
          {"B", c.B},
          {"alpha", c.alpha},
          {"seed", c.seed},
          {"hyper", to_json(c.hyper, c.spec.factors())},
          {"tol", c.fit.tol},
          {"max_iter", c.fit.max_iter},
          {"patience", c.fit.patience},
          {"mcmc", {{"iterations", c.mcmc.iterations}, {"burn_in", c.mcmc.burn_in}, {"chains", c.mcmc.chains},
                    {"thin", c.mcmc.thin}}},
          {"warm_start", c.warm_start},
          {"pivotal_scale", c.pivotal_scale == PivotalScale::sd ? "sd" : "variance"},
          {"max_failure_fraction", c.max_failure_fraction}};
}

/// Parses a study config. 'spec' and 'truth' may be inline objects or paths
/// (relative to `base_dir`).
inline StudyConfig study_config_from_json(const nlohmann::json& j, const std::filesystem::path& base_dir = {}) {
  static const std::set<std::string> allowed{"replicates", "n",        "spec",     "truth",     "methods",
                                             "B",          "alpha",    "seed",     "hyper",     "tol",
                                             "max_iter",   "mcmc",     "warm_start", "pivotal_scale",
                                             "max_failure_fraction", "threads", "patience"};
  if (!j.is_object()) throw ValidationError("study config: expected a JSON object");
  for (const auto& [k, v] : j.items())
    if (!allowed.count(k)) throw ValidationError("study config: unknown key '" + k + "'");
  auto load = [&](const char* key) -> nlohmann::json {
    if (!j.contains(key)) throw ValidationError(std::string("study config: missing '") + key + "'");
    const auto& v = j.at(key);
    if (v.is_string()) {
      std::filesystem::path p = v.get<std::string>();
      if (p.is_relative()) p = base_dir / p;
      return read_json_file(p.string());
    }
    return v;
  };
  try {
    StudyConfig c;
    c.spec = factor_spec_from_json(load("spec"));
    c.truth = true_parameters_from_json(load("truth"));
    c.replicates = j.value("replicates", c.replicates);
    c.n = j.value("n", c.n);
    if (j.contains("methods")) c.methods = j["methods"].get<std::vector<std::string>>();
    if (j.contains("B")) {
      c.B = j["B"].is_array() ? j["B"].get<std::vector<std::size_t>>() : std::vector<std::size_t>{j["B"].get<std::size_t>()};
    }
    c.alpha = j.value("alpha", c.alpha);
    c.seed = j.value("seed", c.seed);
    if (j.contains("hyper")) c.hyper = hyperparameters_from_json(j["hyper"]);
    c.fit.tol = j.value("tol", c.fit.tol);
    c.fit.max_iter = j.value("max_iter", c.fit.max_iter);
    c.fit.patience = j.value("patience", c.fit.patience);
    if (j.contains("mcmc")) {
      const auto& m = j["mcmc"];
      c.mcmc.iterations = m.value("iterations", c.mcmc.iterations);
      c.mcmc.burn_in = m.value("burn_in", c.mcmc.burn_in);
      c.mcmc.chains = m.value("chains", c.mcmc.chains);
      c.mcmc.thin = m.value("thin", c.mcmc.thin);
    }
    c.warm_start = j.value("warm_start", c.warm_start);
    const auto scale = j.value("pivotal_scale", std::string("sd"));
    if (scale != "sd" && scale != "variance") throw ValidationError("study config: 'pivotal_scale' must be sd or variance");
    c.pivotal_scale = scale == "sd" ? PivotalScale::sd : PivotalScale::variance;
    c.max_failure_fraction = j.value("max_failure_fraction", c.max_failure_fraction);
    c.threads = j.value("threads", c.threads);
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("study config: ") + e.what());
  }
}

struct ReplicateResult {
  std::size_t index = 0;  // 1-based
  IntervalSet intervals;
  std::vector<std::pair<std::string, double>> timings;  // method -> seconds
  std::vector<std::pair<std::string, std::string>> failures;  // method label -> reason
  std::vector<std::string> warnings;
  int mfvb_iterations = 0;
};

struct TimingRow {
  std::string method;
  double q1 = 0.0, median = 0.0, q3 = 0.0;
  std::size_t count = 0;
};

struct StudyResult {
  StudyConfig config;
  ParameterMap truth;
  std::vector<std::string> labels;  // method labels in report order
  std::vector<ReplicateResult> replicates;
  CoverageTable coverage;
  std::vector<TimingRow> timing;
  std::map<std::string, std::size_t> failures;  // per label
  bool acceptable = true;
  [[nodiscard]] bool has_warnings() const {
    if (!acceptable) return true;
    for (const auto& [k, v] : failures)
      if (v) return true;
    for (const auto& r : replicates)
      if (!r.warnings.empty()) return true;
    return false;
  }
};

namespace detail {

inline double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

inline std::vector<std::string> study_labels(const StudyConfig& c) {
  std::vector<std::string> out;
  if (c.wants("mfvb")) out.push_back("mfvb");
  if (c.wants("jackknife")) out.push_back("jackknife");
  for (const char* m : {"percentile", "pivotal"})
    if (c.wants(m))
      for (auto b : c.B) out.push_back(std::string(m) + "-B" + std::to_string(b));
  if (c.wants("mcmc")) out.push_back("mcmc");
  return out;
}

inline void append(IntervalSet& dst, const IntervalSet& src) { dst.insert(dst.end(), src.begin(), src.end()); }

inline ReplicateResult run_replicate(const StudyConfig& c, std::size_t r) {
  ReplicateResult out;
  out.index = r + 1;
  Rng sim_rng = make_stream(c.seed, "simulate", r);
  const Dataset data = simulate(c.truth, c.spec, c.n, sim_rng);
  const std::uint64_t rep_seed = splitmix64(c.seed ^ splitmix64(r + 1));

  auto fail_all = [&](const std::vector<std::string>& labels, const std::string& why) {
    for (const auto& l : labels) out.failures.emplace_back(l, why);
  };
  std::vector<std::string> vb_labels;
  for (const auto& l : study_labels(c))
    if (l != "mcmc") vb_labels.push_back(l);

  if (!vb_labels.empty()) {
    std::optional<FitReport> base;
    try {
      const auto t0 = std::chrono::steady_clock::now();
      FitReport f = fit_model(data, c.hyper, c.fit);
      out.timings.emplace_back("mfvb", seconds_since(t0));
      out.mfvb_iterations = f.iterations;
      if (f.converged)
        base = std::move(f);
      else
        fail_all(vb_labels, "base fit did not converge in " + std::to_string(f.iterations) + " iterations");
    } catch (const Error& e) {
      fail_all(vb_labels, e.what());
    }
    if (base) {
      if (c.wants("mfvb")) {
        try {
          append(out.intervals, mfvb_intervals(*base, c.alpha, rep_seed));
        } catch (const Error& e) {
          out.failures.emplace_back("mfvb", e.what());
        }
      }
      if (c.wants("jackknife")) {
        try {
          const auto t0 = std::chrono::steady_clock::now();
          JackknifeConfig jc{c.alpha, 1, c.fit, c.warm_start};
          const auto jr = run_jackknife(data, c.hyper, jc, base);
          out.timings.emplace_back("jackknife", seconds_since(t0));
          append(out.intervals, jackknife_intervals(jr, c.alpha, data.rows()));
        } catch (const Error& e) {
          out.failures.emplace_back("jackknife", e.what());
        }
      }
      if (c.wants("percentile") || c.wants("pivotal")) {
        const std::size_t bmax = *std::max_element(c.B.begin(), c.B.end());
        BootstrapConfig bc;
        bc.B = bmax;
        bc.alpha = c.alpha;
        bc.seed = rep_seed;
        bc.threads = 1;
        bc.fit = c.fit;
        bc.warm_start = c.warm_start;
        bc.pivotal_scale = c.pivotal_scale;
        std::optional<BootstrapRun> run;
        try {
          const auto t0 = std::chrono::steady_clock::now();
          run = run_bootstrap(data, c.hyper, bc, base);
          out.timings.emplace_back("bootstrap-B" + std::to_string(bmax), seconds_since(t0));
          for (const auto& d : run->drop_reasons) out.warnings.push_back("bootstrap replicate " + d);
        } catch (const Error& e) {
          for (const auto& l : vb_labels)
            if (l.rfind("percentile", 0) == 0 || l.rfind("pivotal", 0) == 0) out.failures.emplace_back(l, e.what());
        }
        if (run) {
          for (const char* m : {"percentile", "pivotal"}) {
            if (!c.wants(m)) continue;
            for (auto b : c.B) {
              const std::string label = std::string(m) + "-B" + std::to_string(b);
              try {
                append(out.intervals, std::string(m) == "percentile"
                                          ? percentile_intervals(*run, c.alpha, b)
                                          : pivotal_intervals(*run, c.alpha, b, c.pivotal_scale));
              } catch (const Error& e) {
                out.failures.emplace_back(label, e.what());
              }
            }
          }
        }
      }
    }
  }

  if (c.wants("mcmc")) {
    try {
      ChainConfig cc = c.mcmc;
      cc.seed = rep_seed;
      cc.threads = 1;
      cc.keep_eta = false;
      const auto t0 = std::chrono::steady_clock::now();
      const auto draws = gibbs(data, c.hyper, cc);
      out.timings.emplace_back("mcmc", seconds_since(t0));
      append(out.intervals, mcmc_intervals(draws, c.spec, c.alpha));
    } catch (const Error& e) {
      out.failures.emplace_back("mcmc", e.what());
    }
  }
  return out;
}

inline TimingRow timing_row(std::string method, std::vector<double> v) {
  std::sort(v.begin(), v.end());
  TimingRow t;
  t.method = std::move(method);
  t.count = v.size();
  if (!v.empty()) {
    t.q1 = quantile_sorted(v, 0.25);
    t.median = quantile_sorted(v, 0.5);
    t.q3 = quantile_sorted(v, 0.75);
  }
  return t;
}

}  // namespace detail

/// Runs the study. Replicate r simulates from the stream (seed, "simulate", r)
/// and derives every method's stream from (seed, r), so results do not
/// depend on the thread count or on which other methods are enabled.
inline StudyResult run_study(const StudyConfig& c) {
  c.validate();
  StudyResult res;
  res.config = c;
  res.truth = truth_map(c.truth, c.spec);
  res.labels = detail::study_labels(c);
  res.replicates.resize(c.replicates);
  parallel_for(c.replicates, c.threads, [&](std::size_t r) { res.replicates[r] = detail::run_replicate(c, r); });

  for (const auto& l : res.labels) res.failures[l] = 0;
  for (const auto& rep : res.replicates)
    for (const auto& [label, why] : rep.failures) ++res.failures[label];

  // coverage per method label over the replicates where that method succeeded
  for (const auto& label : res.labels) {
    std::vector<CoverageRun> runs;
    for (const auto& rep : res.replicates) {
      CoverageRun cr;
      for (const auto& iv : rep.intervals)
        if (iv.label() == label) cr.intervals.push_back(iv);
      if (cr.intervals.empty()) continue;
      // a one-factor mcmc arm run with the matrix prior would name sigma2 differently
      cr.truth = res.truth;
      runs.push_back(std::move(cr));
    }
    if (runs.empty()) continue;
    const auto t = coverage_table(runs);
    res.coverage.methods.push_back(label);
    if (res.coverage.parameters.empty()) res.coverage.parameters = t.parameters;
    res.coverage.cells.insert(res.coverage.cells.end(), t.cells.begin(), t.cells.end());
  }

  std::vector<std::string> timed;
  for (const auto& rep : res.replicates)
    for (const auto& [m, s] : rep.timings)
      if (std::find(timed.begin(), timed.end(), m) == timed.end()) timed.push_back(m);
  for (const auto& m : timed) {
    std::vector<double> v;
    for (const auto& rep : res.replicates)
      for (const auto& [mm, s] : rep.timings)
        if (mm == m) v.push_back(s);
    res.timing.push_back(detail::timing_row(m, std::move(v)));
  }
  std::vector<double> ratios;
  for (const auto& rep : res.replicates) {
    double vb = -1.0, mc = -1.0;
    for (const auto& [m, s] : rep.timings) {
      if (m == "mfvb") vb = s;
      if (m == "mcmc") mc = s;
    }
    if (vb > 0.0 && mc > 0.0) ratios.push_back(mc / vb);
  }
  if (!ratios.empty()) res.timing.push_back(detail::timing_row("mcmc/mfvb ratio", std::move(ratios)));

  for (const auto& [label, count] : res.failures)
    if (static_cast<double>(count) > c.max_failure_fraction * static_cast<double>(c.replicates)) res.acceptable = false;
  return res;
}

inline void write_timing_csv(std::ostream& out, const std::vector<TimingRow>& rows) {
  out << "method,q1_seconds,median_seconds,q3_seconds,count\n";
  for (const auto& t : rows)
    out << t.method << ',' << format_double(t.q1) << ',' << format_double(t.median) << ',' << format_double(t.q3) << ','
        << t.count << '\n';
}

namespace detail {

inline void write_text(const std::filesystem::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw IngestError("cannot write '" + p.string() + "'");
  out << text;
  if (!out) throw IngestError("failed writing '" + p.string() + "'");
}

}  // namespace detail

/// config.json, coverage.csv (wide), coverage_long.csv, timing.csv,
/// failures.log, summary.json and intervals/replicate_NNNN.json under `dir`.
inline std::vector<std::filesystem::path> write_study_outputs(const StudyResult& res, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir / "intervals");
  std::vector<fs::path> written;
  auto put = [&](const fs::path& p, const std::string& text) {
    detail::write_text(p, text);
    written.push_back(p);
  };
  put(dir / "config.json", to_json(res.config).dump(2) + "\n");
  {
    std::ostringstream s;
    write_coverage_csv(s, res.coverage);
    put(dir / "coverage.csv", s.str());
  }
  {
    std::ostringstream s;
    write_coverage_long_csv(s, res.coverage);
    put(dir / "coverage_long.csv", s.str());
  }
  {
    std::ostringstream s;
    write_timing_csv(s, res.timing);
    put(dir / "timing.csv", s.str());
  }
  {
    std::ostringstream s;
    for (const auto& rep : res.replicates) {
      for (const auto& [label, why] : rep.failures) s << "replicate " << rep.index << " " << label << ": " << why << '\n';
      for (const auto& w : rep.warnings) s << "replicate " << rep.index << " warning: " << w << '\n';
    }
    put(dir / "failures.log", s.str());
  }
  {
    nlohmann::json fails = nlohmann::json::object();
    for (const auto& [k, v] : res.failures) fails[k] = v;
    nlohmann::json j{{"replicates", res.config.replicates},
                     {"acceptable", res.acceptable},
                     {"failures", fails},
                     {"coverage", to_json(res.coverage)}};
    put(dir / "summary.json", j.dump(2) + "\n");
  }
  for (const auto& rep : res.replicates) {
    nlohmann::json fails = nlohmann::json::array();
    for (const auto& [label, why] : rep.failures) fails.push_back({{"method", label}, {"reason", why}});
    nlohmann::json j{{"replicate", rep.index},
                     {"mfvb_iterations", rep.mfvb_iterations},
                     {"intervals", to_json(rep.intervals)},
                     {"failures", fails},
                     {"warnings", rep.warnings}};
    char name[64];
    std::snprintf(name, sizeof(name), "replicate_%04zu.json", rep.index);
    put(dir / "intervals" / name, j.dump(2) + "\n");
  }
  return written;
}

// ---------------------------------------------------------------------------
// Density export

struct DensityBundle {
  std::string parameter;
  std::vector<double> x;
  std::vector<double> q;          // MFVB q density
  std::vector<double> mcmc;       // KDE of chain draws (empty when absent)
  std::vector<double> bootstrap;  // KDE of bootstrap point estimates (empty when absent)
  double accuracy_mfvb = std::numeric_limits<double>::quiet_NaN();       // q vs mcmc
  double accuracy_bootstrap = std::numeric_limits<double>::quiet_NaN();  // bootstrap vs mcmc
};

/// Bootstrap point estimates theta_VI + delta_b of one parameter.
inline std::vector<double> bootstrap_points(const BootstrapRun& run, std::string_view parameter) {
  std::vector<double> out;
  std::size_t k = run.names.size();
  for (std::size_t i = 0; i < run.names.size(); ++i)
    if (run.names[i] == parameter) k = i;
  if (k == run.names.size()) throw ValidationError("no bootstrap estimates for '" + std::string(parameter) + "'");
  for (std::size_t b = 0; b < run.ok.size(); ++b)
    if (run.ok[b]) out.push_back(run.estimates[b][k]);
  return out;
}

/// Aligned q density, chain KDE and bootstrap KDE on one grid per
/// parameter, with the accuracy of the q density (and of the bootstrap
/// KDE) against the chain KDE.
inline std::vector<DensityBundle> density_figure_export(const FitReport& fit, const ChainDraws* draws,
                                                        const BootstrapRun* boot,
                                                        const std::vector<std::string>& parameters,
                                                        std::size_t grid_size = 512, std::uint64_t seed = 1) {
  if (grid_size < 2) throw ValidationError("density export: grid needs at least 2 points");
  std::vector<DensityBundle> out;
  for (const auto& name : parameters) {
    const QMarginal q = q_marginal(fit, name);
    std::vector<double> q_samples;
    double lo = std::numeric_limits<double>::infinity(), hi = -lo;
    if (q.family == QMarginal::Family::wishart_offdiag) {
      Rng rng = make_stream(seed, "density-export", 0);
      const auto open = name.find('[');
      const auto r = std::stoul(name.substr(open + 1)) - 1;
      const auto c = std::stoul(name.substr(name.find('[', open + 1) + 1)) - 1;
      q_samples = q_offdiag_draws(fit, r, c, 20000, rng);
      const double h = silverman_bandwidth(q_samples);
      const auto [mn, mx] = std::minmax_element(q_samples.begin(), q_samples.end());
      lo = *mn - 3.0 * h;
      hi = *mx + 3.0 * h;
    } else {
      lo = q_quantile(q, 1e-6);
      hi = q_quantile(q, 1.0 - 1e-6);
    }
    std::vector<double> mc, bs;
    double h_mc = 0.0, h_bs = 0.0;
    if (draws && draws->contains(name)) {
      mc = draws->column(name);
      h_mc = silverman_bandwidth(mc);
      const auto [mn, mx] = std::minmax_element(mc.begin(), mc.end());
      lo = std::min(lo, *mn - 3.0 * h_mc);
      hi = std::max(hi, *mx + 3.0 * h_mc);
    }
    if (boot) {
      bs = bootstrap_points(*boot, name);
      if (bs.size() >= 10) {
        h_bs = silverman_bandwidth(bs);
        const auto [mn, mx] = std::minmax_element(bs.begin(), bs.end());
        lo = std::min(lo, *mn - 3.0 * h_bs);
        hi = std::max(hi, *mx + 3.0 * h_bs);
      } else {
        bs.clear();
      }
    }
    if (q.family == QMarginal::Family::inv_chisq) lo = std::max(lo, 0.0);
    DensityBundle b;
    b.parameter = name;
    b.x = linspace(lo, hi, grid_size);
    if (q_samples.empty()) {
      for (double t : b.x) b.q.push_back(q_density(q, t));
    } else {
      b.q = kde_evaluate(q_samples, silverman_bandwidth(q_samples), b.x);
    }
    if (!mc.empty()) b.mcmc = kde_evaluate(mc, h_mc, b.x);
    if (!bs.empty()) b.bootstrap = kde_evaluate(bs, h_bs, b.x);
    if (!b.mcmc.empty()) {
      const DensityGrid ref(b.x, b.mcmc);
      b.accuracy_mfvb = accuracy(DensityGrid(b.x, b.q), ref);
      if (!b.bootstrap.empty()) b.accuracy_bootstrap = accuracy(DensityGrid(b.x, b.bootstrap), ref);
    }
    out.push_back(std::move(b));
  }
  return out;
}

/// "lambda[2][3]" -> "lambda_2_3".
inline std::string parameter_file_stem(std::string_view name) {
  std::string out;
  for (char ch : name) {
    if (ch == '[') {
      out += '_';
    } else if (ch != ']') {
      out += ch;
    }
  }
  return out;
}

inline void write_density_bundle_csv(std::ostream& out, const DensityBundle& b) {
  out << "x,q_density,mcmc_kde,bootstrap_kde,accuracy_mfvb,accuracy_bootstrap\n";
  auto cell = [](const std::vector<double>& v, std::size_t i) { return v.empty() ? std::string() : format_double(v[i]); };
  auto scalar = [](double v) { return std::isnan(v) ? std::string() : format_double(v); };
  for (std::size_t i = 0; i < b.x.size(); ++i)
    out << format_double(b.x[i]) << ',' << format_double(b.q[i]) << ',' << cell(b.mcmc, i) << ','
        << cell(b.bootstrap, i) << ',' << scalar(b.accuracy_mfvb) << ',' << scalar(b.accuracy_bootstrap) << '\n';
}

}  // namespace semvb
