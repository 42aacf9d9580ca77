#pragma once

// Resampling around MFVB point estimates: nonparametric bootstrap
// (percentile and studentized pivotal intervals), leave-one-out jackknife,
// and plain q-density intervals.

#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <boost/math/distributions/normal.hpp>

#include "semvb/common.hpp"
#include "semvb/distributions.hpp"
#include "semvb/gibbs.hpp"
#include "semvb/intervals.hpp"
#include "semvb/mfvb.hpp"
#include "semvb/model.hpp"
#include "semvb/parallel.hpp"
#include "semvb/random.hpp"

namespace semvb {

/// n row indices drawn uniformly with replacement.
inline std::vector<std::size_t> bootstrap_indices(std::size_t n, Rng& rng) {
  std::uniform_int_distribution<std::size_t> pick(0, n - 1);
  std::vector<std::size_t> idx(n);
  for (auto& i : idx) i = pick(rng);
  return idx;
}

/// Whole observation vectors resampled with replacement; each picked row is
/// kept intact.
inline Dataset bootstrap_dataset(const Dataset& data, Rng& rng) {
  const auto idx = bootstrap_indices(data.rows(), rng);
  return data.select_rows(idx);
}

/// How the pivotal scale is taken from a q density. `sd` is the standard
/// deviation; `variance` plugs the variance itself into the interval
/// formula (kept for comparison with the literal variance wording).
enum class PivotalScale { sd, variance };

struct BootstrapConfig {
  std::size_t B = 1000;
  double alpha = 0.05;
  std::uint64_t seed = 1;
  unsigned threads = 1;
  FitOptions fit;
  bool warm_start = false;
  PivotalScale pivotal_scale = PivotalScale::sd;
  double max_drop_fraction = 0.05;

  void validate() const {
    if (B < 1) throw ValidationError("bootstrap: B must be at least 1");
    validate_alpha(alpha);
  }
};

/// Per-replicate point estimates and q standard deviations. Replicate b
/// always uses the random stream (seed, "bootstrap", b), so the first B'
/// replicates of a run with B >= B' are exactly a run with B'.
struct BootstrapRun {
  FitReport base;
  ParameterMap point;
  ParameterMap sd;  // NaN where the q variance is undefined
  std::vector<std::string> names;
  std::vector<std::vector<double>> estimates;  // [b][parameter]
  std::vector<std::vector<double>> sds;        // [b][parameter]
  std::vector<bool> ok;
  std::vector<std::string> drop_reasons;  // one entry per dropped replicate, "b: reason"
};

namespace detail {

inline std::vector<double> sd_vector(const FitReport& r, std::size_t count) {
  std::vector<double> out;
  out.reserve(count);
  for (const auto& q : q_marginals(r)) {
    double v = std::numeric_limits<double>::quiet_NaN();
    try {
      v = q_sd(q);
    } catch (const UndefinedMomentError&) {
    }
    out.push_back(v);
  }
  return out;
}

inline ParameterMap to_map(const std::vector<std::string>& names, const std::vector<double>& v) {
  ParameterMap m;
  for (std::size_t k = 0; k < names.size(); ++k) m.set(names[k], v[k]);
  return m;
}

inline FitReport require_converged(FitReport r, const char* what) {
  if (!r.converged)
    throw NumericalError(std::string(what) + " did not converge in " + std::to_string(r.iterations) + " iterations");
  return r;
}

}  // namespace detail

/// Base fit plus B bootstrap refits. Replicates whose fit fails or does not
/// converge are dropped and recorded.
inline BootstrapRun run_bootstrap(const Dataset& data, const Hyperparameters& h, const BootstrapConfig& cfg,
                                  const std::optional<FitReport>& base_fit = std::nullopt) {
  cfg.validate();
  BootstrapRun run;
  run.base = base_fit ? *base_fit : detail::require_converged(fit_model(data, h, cfg.fit), "base fit");
  const auto base_point = point_estimates(run.base);
  run.names = base_point.names();
  for (const auto& [k, v] : base_point) run.point.set(k, v);
  run.sd = detail::to_map(run.names, detail::sd_vector(run.base, run.names.size()));

  run.estimates.assign(cfg.B, {});
  run.sds.assign(cfg.B, {});
  std::vector<std::string> reasons(cfg.B);
  std::vector<char> ok(cfg.B, 0);
  parallel_for(cfg.B, cfg.threads, [&](std::size_t b) {
    Rng rng = make_stream(cfg.seed, "bootstrap", b);
    const auto idx = bootstrap_indices(data.rows(), rng);
    try {
      const Dataset boot = data.select_rows(idx);
      FitReport r = cfg.warm_start ? fit_model(boot, h, cfg.fit, &run.base, idx) : fit_model(boot, h, cfg.fit);
      if (!r.converged) {
        reasons[b] = "no convergence in " + std::to_string(r.iterations) + " iterations";
        return;
      }
      std::vector<double> est;
      for (const auto& [k, v] : point_estimates(r)) est.push_back(v);
      run.estimates[b] = std::move(est);
      run.sds[b] = detail::sd_vector(r, run.names.size());
      ok[b] = 1;
    } catch (const Error& e) {
      reasons[b] = e.what();
    }
  });
  run.ok.assign(ok.begin(), ok.end());
  for (std::size_t b = 0; b < cfg.B; ++b)
    if (!ok[b]) run.drop_reasons.push_back(std::to_string(b + 1) + ": " + reasons[b]);
  return run;
}

namespace detail {

/// Indices of usable replicates among the first B; throws when more than
/// the allowed fraction was dropped.
inline std::vector<std::size_t> usable_replicates(const BootstrapRun& run, std::size_t B, double max_drop) {
  if (B < 1 || B > run.ok.size())
    throw ValidationError("bootstrap: requested B = " + std::to_string(B) + " but the run has " +
                          std::to_string(run.ok.size()) + " replicates");
  std::vector<std::size_t> use;
  for (std::size_t b = 0; b < B; ++b)
    if (run.ok[b]) use.push_back(b);
  const std::size_t dropped = B - use.size();
  if (static_cast<double>(dropped) > max_drop * static_cast<double>(B) || use.empty())
    throw ResampleError("bootstrap: " + std::to_string(dropped) + " of " + std::to_string(B) +
                        " replicates failed to converge or raised errors");
  return use;
}

}  // namespace detail

/// [theta + q_{alpha/2}(delta), theta + q_{1-alpha/2}(delta)] with
/// delta_b = theta_b - theta over the first B replicates.
inline IntervalSet percentile_intervals(const BootstrapRun& run, double alpha, std::size_t B,
                                        double max_drop = 0.05) {
  validate_alpha(alpha);
  const auto use = detail::usable_replicates(run, B, max_drop);
  IntervalSet out;
  for (std::size_t k = 0; k < run.names.size(); ++k) {
    const double theta = run.point.at(run.names[k]);
    std::vector<double> delta;
    delta.reserve(use.size());
    for (auto b : use) delta.push_back(run.estimates[b][k] - theta);
    std::sort(delta.begin(), delta.end());
    out.push_back({run.names[k], "percentile", theta, theta + quantile_sorted(delta, 0.5 * alpha),
                   theta + quantile_sorted(delta, 1.0 - 0.5 * alpha), alpha, B});
  }
  return out;
}

/// theta -/+ s q_{1-alpha/2}(|tau|), tau_b = delta_b / s_b, with s the q
/// standard deviation (or variance, see PivotalScale).
inline IntervalSet pivotal_intervals(const BootstrapRun& run, double alpha, std::size_t B,
                                     PivotalScale scale = PivotalScale::sd, double max_drop = 0.05) {
  validate_alpha(alpha);
  const auto use = detail::usable_replicates(run, B, max_drop);
  auto to_scale = [&](double sd) { return scale == PivotalScale::sd ? sd : sd * sd; };
  IntervalSet out;
  for (std::size_t k = 0; k < run.names.size(); ++k) {
    const auto& name = run.names[k];
    const double theta = run.point.at(name);
    const double s = to_scale(run.sd.at(name));
    if (!std::isfinite(s))
      throw UndefinedMomentError("pivotal interval for " + name +
                                 ": the q density has no finite variance (Inverse-chi-squared shape must exceed 4)");
    std::vector<double> tau;
    tau.reserve(use.size());
    for (auto b : use) {
      const double sb = to_scale(run.sds[b][k]);
      if (!std::isfinite(sb) || !(sb > 0.0))
        throw UndefinedMomentError("pivotal interval for " + name + ": replicate " + std::to_string(b + 1) +
                                   " has no finite q variance");
      tau.push_back(std::abs(run.estimates[b][k] - theta) / sb);
    }
    std::sort(tau.begin(), tau.end());
    const double t = quantile_sorted(tau, 1.0 - 0.5 * alpha);
    out.push_back({name, "pivotal", theta, theta - s * t, theta + s * t, alpha, B});
  }
  return out;
}

/// Leave-one-out standard error sqrt{((n-1)/n) sum_i (theta_(i) - theta_bar)^2},
/// theta_bar the arithmetic mean of the leave-one-out values.
inline double jackknife_se(std::span<const double> loo) {
  const auto n = static_cast<double>(loo.size());
  if (loo.size() < 2) throw ValidationError("jackknife needs at least 2 leave-one-out values");
  double mean = 0.0;
  for (double v : loo) mean += v;
  mean /= n;
  double ss = 0.0;
  for (double v : loo) ss += (v - mean) * (v - mean);
  return std::sqrt((n - 1.0) / n * ss);
}

/// Jackknife standard error of an arbitrary statistic of a row-indexed sample.
template <class Statistic>
double jackknife_se(std::size_t n, Statistic&& statistic_without_row) {
  std::vector<double> loo(n);
  for (std::size_t i = 0; i < n; ++i) loo[i] = statistic_without_row(i);
  return jackknife_se(loo);
}

struct JackknifeConfig {
  double alpha = 0.05;
  unsigned threads = 1;
  FitOptions fit;
  bool warm_start = false;
};

struct JackknifeRun {
  FitReport base;
  ParameterMap point;
  ParameterMap se;
};

inline JackknifeRun run_jackknife(const Dataset& data, const Hyperparameters& h, const JackknifeConfig& cfg,
                                  const std::optional<FitReport>& base_fit = std::nullopt) {
  const std::size_t n = data.rows();
  if (n < 3) throw ValidationError("jackknife needs n >= 3");
  JackknifeRun run;
  run.base = base_fit ? *base_fit : detail::require_converged(fit_model(data, h, cfg.fit), "base fit");
  const auto base_point = point_estimates(run.base);
  const auto names = base_point.names();
  std::vector<std::vector<double>> loo(n);
  parallel_for(n, cfg.threads, [&](std::size_t i) {
    const Dataset d = data.without_row(i);
    FitReport r;
    if (cfg.warm_start) {
      std::vector<std::size_t> rows;
      rows.reserve(n - 1);
      for (std::size_t k = 0; k < n; ++k)
        if (k != i) rows.push_back(k);
      r = fit_model(d, h, cfg.fit, &run.base, rows);
    } else {
      r = fit_model(d, h, cfg.fit);
    }
    if (!r.converged)
      throw ResampleError("jackknife: fit without row " + std::to_string(i + 1) + " did not converge");
    for (const auto& [k, v] : point_estimates(r)) loo[i].push_back(v);
  });
  for (std::size_t k = 0; k < names.size(); ++k) {
    std::vector<double> col(n);
    for (std::size_t i = 0; i < n; ++i) col[i] = loo[i][k];
    run.point.set(names[k], base_point.at(names[k]));
    run.se.set(names[k], jackknife_se(col));
  }
  return run;
}

inline IntervalSet jackknife_intervals(const JackknifeRun& run, double alpha, std::size_t n) {
  validate_alpha(alpha);
  const double z = boost::math::quantile(boost::math::normal_distribution<double>(), 1.0 - 0.5 * alpha);
  IntervalSet out;
  for (const auto& [name, theta] : run.point) {
    const double se = run.se.at(name);
    out.push_back({name, "jackknife", theta, theta - z * se, theta + z * se, alpha, n});
  }
  return out;
}

inline IntervalSet jackknife_intervals(const Dataset& data, const Hyperparameters& h, const JackknifeConfig& cfg) {
  validate_alpha(cfg.alpha);
  return jackknife_intervals(run_jackknife(data, h, cfg), cfg.alpha, data.rows());
}

/// Draws of one off-diagonal Sigma entry from q(Sigma).
inline std::vector<double> q_offdiag_draws(const FitReport& report, std::size_t r, std::size_t c, std::size_t count,
                                           Rng& rng) {
  const auto& s = report.multi();
  const InvGWishart q(s.xi_Sigma, s.Lambda_Sigma);
  std::vector<double> out(count);
  for (auto& v : out)
    v = sample_igw(q, rng)(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
  return out;
}

/// Equal-tailed intervals of the q marginals. Off-diagonal Sigma entries have
/// no closed-form marginal and use Monte Carlo quantiles of q(Sigma) draws
/// from the stream (seed, "q-sigma", 0).
inline IntervalSet mfvb_intervals(const FitReport& report, double alpha, std::uint64_t seed = 1,
                                  std::size_t offdiag_draws = 20000) {
  validate_alpha(alpha);
  IntervalSet out;
  std::optional<std::vector<Eigen::MatrixXd>> sigma_draws;
  for (const auto& q : q_marginals(report)) {
    IntervalReport r;
    r.parameter = q.name;
    r.method = "mfvb";
    r.point = q_mean(q);
    r.alpha = alpha;
    r.count = report.rows();
    if (q.family == QMarginal::Family::wishart_offdiag) {
      if (!sigma_draws) {
        Rng rng = make_stream(seed, "q-sigma", 0);
        const auto& s = report.multi();
        const InvGWishart dist(s.xi_Sigma, s.Lambda_Sigma);
        sigma_draws.emplace();
        sigma_draws->reserve(offdiag_draws);
        for (std::size_t d = 0; d < offdiag_draws; ++d) sigma_draws->push_back(sample_igw(dist, rng));
      }
      const auto open = q.name.find('[');
      const auto rr = std::stoul(q.name.substr(open + 1)) - 1;
      const auto cc = std::stoul(q.name.substr(q.name.find('[', open + 1) + 1)) - 1;
      std::vector<double> v;
      v.reserve(offdiag_draws);
      for (const auto& d : *sigma_draws) v.push_back(d(static_cast<Eigen::Index>(rr), static_cast<Eigen::Index>(cc)));
      std::sort(v.begin(), v.end());
      r.lower = quantile_sorted(v, 0.5 * alpha);
      r.upper = quantile_sorted(v, 1.0 - 0.5 * alpha);
    } else {
      r.lower = q_quantile(q, 0.5 * alpha);
      r.upper = q_quantile(q, 1.0 - 0.5 * alpha);
    }
    out.push_back(std::move(r));
  }
  return out;
}

/// Chain quantile intervals restricted to the structural parameters (the
/// same names the MFVB methods report; pinned reference loadings excluded).
inline IntervalSet mcmc_intervals(const ChainDraws& draws, const FactorSpec& spec, double alpha) {
  validate_alpha(alpha);
  std::vector<std::string> names = structural_parameter_names(spec);
  if (!draws.contains(names.back())) {
    // one-factor spec sampled with the matrix prior reports Sigma[1][1]
    if (names.back() == "sigma2" && draws.contains("Sigma[1][1]")) names.back() = "Sigma[1][1]";
  }
  return chain_summary(draws, alpha, names);
}

struct BootstrapResult {
  IntervalSet percentile;
  IntervalSet pivotal;
  std::vector<std::string> drop_reasons;
};

/// Convenience wrapper: one bootstrap run feeding both interval types.
inline BootstrapResult bootstrap_intervals(const Dataset& data, const Hyperparameters& h, const BootstrapConfig& cfg,
                                           bool percentile = true, bool pivotal = true) {
  const auto run = run_bootstrap(data, h, cfg);
  BootstrapResult out;
  if (percentile) out.percentile = percentile_intervals(run, cfg.alpha, cfg.B, cfg.max_drop_fraction);
  if (pivotal) out.pivotal = pivotal_intervals(run, cfg.alpha, cfg.B, cfg.pivotal_scale, cfg.max_drop_fraction);
  out.drop_reasons = run.drop_reasons;
  return out;
}

}  // namespace semvb
