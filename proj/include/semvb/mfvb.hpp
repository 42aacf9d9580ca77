#pragma once

// Coordinate-ascent mean-field variational Bayes for confirmatory factor
// analysis. The one-factor model factorizes q over (nu_j, psi_j, lambda_j,
// eta_i, sigma^2); the multi-factor model replaces sigma^2 by a p x p factor
// covariance Sigma with an Inverse G-Wishart prior and eta_i by p-vectors.
// Every optimal factor is Normal, Inverse-chi-squared or Inverse G-Wishart,
// so one sweep is a fixed sequence of closed-form moment updates.

#include <chrono>
#include <cmath>
#include <cstddef>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include <Eigen/Dense>
#include <boost/math/distributions/normal.hpp>
#include <nlohmann/json.hpp>

#include "semvb/common.hpp"
#include "semvb/distributions.hpp"
#include "semvb/model.hpp"

namespace semvb {

/// Per-indicator q-parameters, indexed by global column j. Reference
/// loadings hold mu_lambda = mu_lambda2 = 1 and sigma2_lambda = 0.
struct IndicatorMoments {
  Eigen::VectorXd mu_nu, sigma2_nu, mu_nu2;
  Eigen::VectorXd kappa_psi, delta_psi, mu_inv_psi;
  Eigen::VectorXd mu_lambda, sigma2_lambda, mu_lambda2;
};

struct SingleFactorVariationalState {
  IndicatorMoments ind;
  Eigen::VectorXd mu_eta;   // length n
  Eigen::VectorXd mu_eta2;  // sigma2_eta + mu_eta^2
  double sigma2_eta = 1.0;  // the same for every i
  double kappa_sigma2 = 0.0;
  double delta_sigma2 = 0.0;
  double mu_inv_sigma2 = 1.0;
};

struct MultiFactorVariationalState {
  IndicatorMoments ind;
  Eigen::MatrixXd mu_eta;     // n x p
  Eigen::MatrixXd mu_eta2;    // n x p, diag(Sigma_eta + mu mu^T) per row
  Eigen::MatrixXd Sigma_eta;  // p x p, the same for every i
  double xi_Sigma = 0.0;
  Eigen::MatrixXd Lambda_Sigma;
  Eigen::MatrixXd M_Sigma_inv;
};

using VariationalState = std::variant<SingleFactorVariationalState, MultiFactorVariationalState>;

struct FitOptions {
  double tol = 0.01;
  int max_iter = 10000;
  // Consecutive sweeps that must stay below tol. A single quiet sweep can be
  // a lull before a slow drift to another fixed point (small n especially).
  int patience = 2;
};

struct FitReport {
  FactorSpec spec;
  VariationalState state;
  int iterations = 0;
  bool converged = false;
  double final_relative_error = std::numeric_limits<double>::infinity();
  double wall_time_seconds = 0.0;

  [[nodiscard]] bool is_single() const noexcept {
    return std::holds_alternative<SingleFactorVariationalState>(state);
  }
  [[nodiscard]] const SingleFactorVariationalState& single() const {
    return std::get<SingleFactorVariationalState>(state);
  }
  [[nodiscard]] const MultiFactorVariationalState& multi() const {
    return std::get<MultiFactorVariationalState>(state);
  }
  [[nodiscard]] std::size_t rows() const {
    return is_single() ? static_cast<std::size_t>(single().mu_eta.size())
                       : static_cast<std::size_t>(multi().mu_eta.rows());
  }
};

struct NoObserver {
  template <class State>
  void operator()(int, const State&) const noexcept {}
};

namespace detail {

inline IndicatorMoments initial_indicators(const Dataset& data, const Hyperparameters& h) {
  const auto m = static_cast<Eigen::Index>(data.cols());
  const auto n = static_cast<double>(data.rows());
  IndicatorMoments q;
  q.mu_nu = data.y.colwise().mean().transpose();
  q.sigma2_nu = Eigen::VectorXd::Zero(m);
  q.mu_nu2 = q.mu_nu.array().square();
  q.kappa_psi = Eigen::VectorXd::Constant(m, n + h.kappa_psi + 1.0);
  q.mu_inv_psi.resize(m);
  for (Eigen::Index j = 0; j < m; ++j) {
    const double var = (data.y.col(j).array() - q.mu_nu(j)).square().sum() / (n - 1.0);
    q.mu_inv_psi(j) = 1.0 / std::max(var, 1e-8);
  }
  q.delta_psi = q.kappa_psi.cwiseQuotient(q.mu_inv_psi);
  q.mu_lambda = Eigen::VectorXd::Ones(m);
  q.sigma2_lambda = Eigen::VectorXd::Zero(m);
  q.mu_lambda2 = Eigen::VectorXd::Ones(m);
  return q;
}

/// Shape constants are functions of n and the prior only; a warm start
/// from a fit on a different n must reset them.
inline void reset_indicator_shapes(IndicatorMoments& q, std::size_t n, const Hyperparameters& h) {
  q.kappa_psi.setConstant(static_cast<double>(n) + h.kappa_psi + 1.0);
  q.delta_psi = q.kappa_psi.cwiseQuotient(q.mu_inv_psi);
}

/// The indicator loop of one sweep: for each column, the nu, psi and (for
/// non-reference columns) lambda updates, in that order. Latent moments are
/// read from `mu_eta` (n x p) with the per-factor shared variances
/// `eta_var` (length p).
inline void update_indicators(IndicatorMoments& q, const Dataset& data, const Eigen::Ref<const Eigen::MatrixXd>& mu_eta,
                              const Eigen::VectorXd& eta_var, const Hyperparameters& h) {
  const auto& spec = data.spec;
  const auto n = static_cast<double>(data.rows());
  const auto p = static_cast<Eigen::Index>(spec.factors());
  Eigen::VectorXd sum_eta(p), sum_eta2(p);
  for (Eigen::Index k = 0; k < p; ++k) {
    sum_eta(k) = mu_eta.col(k).sum();
    sum_eta2(k) = mu_eta.col(k).squaredNorm() + n * eta_var(k);
  }
  const double inv_s2_lambda = 1.0 / h.sigma2_lambda;
  for (std::size_t jj = 0; jj < spec.indicators(); ++jj) {
    const auto j = static_cast<Eigen::Index>(jj);
    const auto k = static_cast<Eigen::Index>(spec.factor_of(jj));
    const auto y = data.y.col(j);
    const auto eta = mu_eta.col(k);

    q.sigma2_nu(j) = 1.0 / (n * q.mu_inv_psi(j) + 1.0 / h.sigma2_nu);
    q.mu_nu(j) = q.sigma2_nu(j) * q.mu_inv_psi(j) * (y.sum() - q.mu_lambda(j) * sum_eta(k));
    q.mu_nu2(j) = q.sigma2_nu(j) + q.mu_nu(j) * q.mu_nu(j);

    // sum_i E(y_ij - nu_j - lambda_j eta_ik)^2, arranged as a sum of squares
    // plus variance terms so it stays positive in floating point
    const double resid_ss = (y.array() - q.mu_nu(j) - q.mu_lambda(j) * eta.array()).square().sum();
    const double expected_ss = resid_ss + n * q.sigma2_nu(j) + q.sigma2_lambda(j) * sum_eta2(k) +
                               q.mu_lambda(j) * q.mu_lambda(j) * n * eta_var(k);
    const double prior_term =
        (q.mu_lambda2(j) - 2.0 * h.mu_lambda * q.mu_lambda(j) + h.mu_lambda * h.mu_lambda) * inv_s2_lambda;
    q.delta_psi(j) = expected_ss + prior_term + h.delta_psi;
    q.mu_inv_psi(j) = q.kappa_psi(j) / q.delta_psi(j);

    if (!spec.is_reference(jj)) {
      q.sigma2_lambda(j) = 1.0 / (q.mu_inv_psi(j) * (sum_eta2(k) + inv_s2_lambda));
      const double cross = eta.dot(y) - q.mu_nu(j) * sum_eta(k);
      q.mu_lambda(j) = q.sigma2_lambda(j) * (cross + h.mu_lambda * inv_s2_lambda) * q.mu_inv_psi(j);
      q.mu_lambda2(j) = q.sigma2_lambda(j) + q.mu_lambda(j) * q.mu_lambda(j);
    }
  }
}

inline void append_indicator_parameters(const IndicatorMoments& q, const FactorSpec& spec, std::vector<double>& out) {
  for (Eigen::Index j = 0; j < q.mu_nu.size(); ++j) {
    out.push_back(q.mu_nu(j));
    out.push_back(q.sigma2_nu(j));
    out.push_back(q.delta_psi(j));
    if (!spec.is_reference(static_cast<std::size_t>(j))) {
      out.push_back(q.mu_lambda(j));
      out.push_back(q.sigma2_lambda(j));
    }
  }
}

inline double max_relative_change(const std::vector<double>& prev, const std::vector<double>& cur) {
  double rho = 0.0;
  for (std::size_t i = 0; i < cur.size(); ++i)
    rho = std::max(rho, std::abs(cur[i] - prev[i]) / (std::abs(prev[i]) + 1e-8));
  return rho;
}

inline void require_finite(const std::vector<double>& v, int iteration) {
  for (double x : v)
    if (!std::isfinite(x))
      throw NumericalError("non-finite variational update at iteration " + std::to_string(iteration) +
                           " (check data scale and hyperparameters)");
}

inline std::vector<std::size_t> identity_rows(std::size_t n) {
  std::vector<std::size_t> r(n);
  for (std::size_t i = 0; i < n; ++i) r[i] = i;
  return r;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// One-factor model

/// Starting point: column means for mu_nu, unit loadings, eta at 0 with unit
/// second moment, 1/column variance for E(1/psi_j), and E(1/sigma^2) = 1.
inline SingleFactorVariationalState initial_single_state(const Dataset& data, const Hyperparameters& h) {
  const auto n = static_cast<Eigen::Index>(data.rows());
  SingleFactorVariationalState s;
  s.ind = detail::initial_indicators(data, h);
  s.mu_eta = Eigen::VectorXd::Zero(n);
  s.sigma2_eta = 1.0;
  s.mu_eta2 = Eigen::VectorXd::Ones(n);
  s.kappa_sigma2 = static_cast<double>(n) + h.kappa_sigma2;
  s.mu_inv_sigma2 = 1.0;
  s.delta_sigma2 = s.kappa_sigma2;
  return s;
}

/// Starting point on a resampled dataset: all moments from `base`, with the
/// latent rows picked by `rows` (row r of the new data is row rows[r] of the
/// data `base` was fitted to).
inline SingleFactorVariationalState warm_single_state(const SingleFactorVariationalState& base,
                                                      std::span<const std::size_t> rows, const Hyperparameters& h) {
  SingleFactorVariationalState s = base;
  const auto n = static_cast<Eigen::Index>(rows.size());
  s.mu_eta.resize(n);
  for (Eigen::Index r = 0; r < n; ++r) s.mu_eta(r) = base.mu_eta(static_cast<Eigen::Index>(rows[static_cast<std::size_t>(r)]));
  s.mu_eta2 = s.mu_eta.array().square() + s.sigma2_eta;
  detail::reset_indicator_shapes(s.ind, rows.size(), h);
  s.kappa_sigma2 = static_cast<double>(n) + h.kappa_sigma2;
  s.delta_sigma2 = s.kappa_sigma2 / s.mu_inv_sigma2;
  return s;
}

/// One full coordinate-ascent sweep in the fixed order: indicator loop
/// (nu, psi, lambda), latent loop (eta_i), then sigma^2.
inline void sweep(SingleFactorVariationalState& s, const Dataset& data, const Hyperparameters& h) {
  const Eigen::VectorXd eta_var = Eigen::VectorXd::Constant(1, s.sigma2_eta);
  detail::update_indicators(s.ind, data, s.mu_eta, eta_var, h);

  const auto& q = s.ind;
  s.sigma2_eta = 1.0 / (q.mu_inv_psi.dot(q.mu_lambda2) + s.mu_inv_sigma2);
  const Eigen::VectorXd w = q.mu_inv_psi.cwiseProduct(q.mu_lambda);
  s.mu_eta = s.sigma2_eta * (data.y * w - Eigen::VectorXd::Constant(data.y.rows(), q.mu_nu.dot(w)));
  s.mu_eta2 = s.mu_eta.array().square() + s.sigma2_eta;

  s.delta_sigma2 = s.mu_eta2.sum() + h.delta_sigma2;
  s.mu_inv_sigma2 = s.kappa_sigma2 / s.delta_sigma2;
}

/// Scalar q-parameters monitored by the stopping rule.
inline std::vector<double> monitored_parameters(const SingleFactorVariationalState& s, const FactorSpec& spec) {
  std::vector<double> out;
  out.reserve(static_cast<std::size_t>(5 * s.ind.mu_nu.size() + s.mu_eta.size() + 2));
  detail::append_indicator_parameters(s.ind, spec, out);
  out.insert(out.end(), s.mu_eta.data(), s.mu_eta.data() + s.mu_eta.size());
  out.push_back(s.sigma2_eta);
  out.push_back(s.delta_sigma2);
  return out;
}

// ---------------------------------------------------------------------------
// Multi-factor model

inline MultiFactorVariationalState initial_multi_state(const Dataset& data, const Hyperparameters& h) {
  const auto n = static_cast<Eigen::Index>(data.rows());
  const auto p = static_cast<Eigen::Index>(data.spec.factors());
  MultiFactorVariationalState s;
  s.ind = detail::initial_indicators(data, h);
  s.mu_eta = Eigen::MatrixXd::Zero(n, p);
  s.Sigma_eta = Eigen::MatrixXd::Identity(p, p);
  s.mu_eta2 = Eigen::MatrixXd::Ones(n, p);
  s.xi_Sigma = static_cast<double>(n) + h.xi_for(data.spec.factors());
  s.M_Sigma_inv = Eigen::MatrixXd::Identity(p, p);
  s.Lambda_Sigma = (s.xi_Sigma - static_cast<double>(p) + 1.0) * Eigen::MatrixXd::Identity(p, p);
  return s;
}

inline MultiFactorVariationalState warm_multi_state(const MultiFactorVariationalState& base,
                                                    std::span<const std::size_t> rows, const Hyperparameters& h) {
  MultiFactorVariationalState s = base;
  const auto n = static_cast<Eigen::Index>(rows.size());
  const auto p = base.mu_eta.cols();
  s.mu_eta.resize(n, p);
  for (Eigen::Index r = 0; r < n; ++r) s.mu_eta.row(r) = base.mu_eta.row(static_cast<Eigen::Index>(rows[static_cast<std::size_t>(r)]));
  s.mu_eta2 = s.mu_eta.array().square().rowwise() + s.Sigma_eta.diagonal().transpose().array();
  detail::reset_indicator_shapes(s.ind, rows.size(), h);
  s.xi_Sigma = static_cast<double>(n) + h.xi_for(static_cast<std::size_t>(p));
  s.Lambda_Sigma = (s.xi_Sigma - static_cast<double>(p) + 1.0) * spd_inverse(s.M_Sigma_inv, "E(Sigma^-1)");
  return s;
}

/// d_k = sum over block k of E(lambda^2) E(1/psi); the diagonal of
/// E(Lambda^T diag(1/psi) Lambda) under the block-diagonal loading structure.
inline Eigen::VectorXd block_precision_diagonal(const IndicatorMoments& q, const FactorSpec& spec) {
  Eigen::VectorXd d = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(spec.factors()));
  for (std::size_t j = 0; j < spec.indicators(); ++j) {
    const auto jj = static_cast<Eigen::Index>(j);
    d(static_cast<Eigen::Index>(spec.factor_of(j))) += q.mu_lambda2(jj) * q.mu_inv_psi(jj);
  }
  return d;
}

inline void sweep(MultiFactorVariationalState& s, const Dataset& data, const Hyperparameters& h) {
  const auto& spec = data.spec;
  const auto p = static_cast<Eigen::Index>(spec.factors());
  const auto n = data.y.rows();
  detail::update_indicators(s.ind, data, s.mu_eta, s.Sigma_eta.diagonal(), h);

  const auto& q = s.ind;
  Eigen::MatrixXd precision = s.M_Sigma_inv;
  precision.diagonal() += block_precision_diagonal(q, spec);
  s.Sigma_eta = spd_inverse(precision, "latent precision matrix");

  Eigen::MatrixXd weights = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(spec.indicators()), p);
  for (std::size_t j = 0; j < spec.indicators(); ++j) {
    const auto jj = static_cast<Eigen::Index>(j);
    weights(jj, static_cast<Eigen::Index>(spec.factor_of(j))) = q.mu_lambda(jj) * q.mu_inv_psi(jj);
  }
  Eigen::MatrixXd r = data.y * weights;
  r.rowwise() -= (q.mu_nu.transpose() * weights);
  s.mu_eta = r * s.Sigma_eta;
  s.mu_eta2 = s.mu_eta.array().square().rowwise() + s.Sigma_eta.diagonal().transpose().array();

  s.Lambda_Sigma = static_cast<double>(n) * s.Sigma_eta + s.mu_eta.transpose() * s.mu_eta +
                   h.Lambda_for(static_cast<std::size_t>(p));
  s.Lambda_Sigma = symmetrized(s.Lambda_Sigma);
  s.M_Sigma_inv = (s.xi_Sigma - static_cast<double>(p) + 1.0) * spd_inverse(s.Lambda_Sigma, "Lambda_q(Sigma)");
}

inline std::vector<double> monitored_parameters(const MultiFactorVariationalState& s, const FactorSpec& spec) {
  std::vector<double> out;
  detail::append_indicator_parameters(s.ind, spec, out);
  out.insert(out.end(), s.mu_eta.data(), s.mu_eta.data() + s.mu_eta.size());
  for (Eigen::Index r = 0; r < s.Sigma_eta.rows(); ++r)
    for (Eigen::Index c = r; c < s.Sigma_eta.cols(); ++c) out.push_back(s.Sigma_eta(r, c));
  for (Eigen::Index r = 0; r < s.Lambda_Sigma.rows(); ++r)
    for (Eigen::Index c = r; c < s.Lambda_Sigma.cols(); ++c) out.push_back(s.Lambda_Sigma(r, c));
  return out;
}

// ---------------------------------------------------------------------------
// Driver

namespace detail {

template <class State, class Observer>
FitReport run_cavi(State state, const Dataset& data, const Hyperparameters& h, const FitOptions& opts,
                   Observer&& observe) {
  if (!(opts.tol > 0.0)) throw ValidationError("tolerance must be positive");
  if (opts.max_iter < 1) throw ValidationError("max_iter must be at least 1");
  if (opts.patience < 1) throw ValidationError("patience must be at least 1");
  const auto start = std::chrono::steady_clock::now();
  FitReport report;
  report.spec = data.spec;
  std::vector<double> prev = monitored_parameters(state, data.spec);
  int quiet = 0;
  for (int it = 1; it <= opts.max_iter; ++it) {
    sweep(state, data, h);
    std::vector<double> cur = monitored_parameters(state, data.spec);
    require_finite(cur, it);
    report.final_relative_error = max_relative_change(prev, cur);
    report.iterations = it;
    observe(it, std::as_const(state));
    quiet = report.final_relative_error < opts.tol ? quiet + 1 : 0;
    if (quiet >= opts.patience) {
      report.converged = true;
      break;
    }
    prev.swap(cur);
  }
  report.state = std::move(state);
  report.wall_time_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return report;
}

}  // namespace detail

/// One-factor fit. `init` overrides the default starting point (see
/// warm_single_state). The report carries converged = false rather than
/// throwing when max_iter is exhausted.
template <class Observer = NoObserver>
FitReport fit_single(const Dataset& data, const Hyperparameters& h, const FitOptions& opts = {},
                     const std::optional<SingleFactorVariationalState>& init = std::nullopt,
                     Observer&& observe = {}) {
  if (!data.spec.single_factor()) throw ValidationError("fit_single needs a one-factor spec");
  h.validate(1);
  auto state = init ? *init : initial_single_state(data, h);
  if (state.mu_eta.size() != data.y.rows()) throw ValidationError("initial state has the wrong number of rows");
  return detail::run_cavi(std::move(state), data, h, opts, std::forward<Observer>(observe));
}

/// Multi-factor fit. Also accepts a one-factor spec, in which case Sigma is
/// 1 x 1 with an Inverse G-Wishart prior.
template <class Observer = NoObserver>
FitReport fit_multi(const Dataset& data, const Hyperparameters& h, const FitOptions& opts = {},
                    const std::optional<MultiFactorVariationalState>& init = std::nullopt,
                    Observer&& observe = {}) {
  const auto p = data.spec.factors();
  h.validate(p);
  if (!(h.xi_for(p) > 2.0 * static_cast<double>(p) - 2.0)) throw ValidationError("xi_Sigma must exceed 2p - 2");
  if (h.Lambda_for(p).rows() != static_cast<Eigen::Index>(p)) throw ValidationError("Lambda_Sigma has the wrong size");
  auto state = init ? *init : initial_multi_state(data, h);
  if (state.mu_eta.rows() != data.y.rows()) throw ValidationError("initial state has the wrong number of rows");
  return detail::run_cavi(std::move(state), data, h, opts, std::forward<Observer>(observe));
}

/// Dispatch on the number of factors: one factor -> fit_single, otherwise fit_multi.
/// When `warm` is given the fit starts from it, with latent rows mapped by `rows`.
inline FitReport fit_model(const Dataset& data, const Hyperparameters& h, const FitOptions& opts = {},
                           const FitReport* warm = nullptr, std::span<const std::size_t> rows = {}) {
  std::vector<std::size_t> identity;
  if (warm && rows.empty()) {
    identity = detail::identity_rows(data.rows());
    rows = identity;
  }
  if (data.spec.single_factor()) {
    std::optional<SingleFactorVariationalState> init;
    if (warm) init = warm_single_state(warm->single(), rows, h);
    return fit_single(data, h, opts, init);
  }
  std::optional<MultiFactorVariationalState> init;
  if (warm) init = warm_multi_state(warm->multi(), rows, h);
  return fit_multi(data, h, opts, init);
}

// ---------------------------------------------------------------------------
// Marginal q densities and point estimates

/// Marginal q density of one structural parameter.
struct QMarginal {
  enum class Family { normal, inv_chisq, wishart_offdiag };
  std::string name;
  Family family = Family::normal;
  double mu = 0.0, sigma2 = 0.0;   // normal
  double kappa = 0.0, delta = 0.0;  // inverse chi-squared
  // off-diagonal Sigma entry under Inverse-Wishart(dof, scale)
  double dof = 0.0, scale_rr = 0.0, scale_cc = 0.0, scale_rc = 0.0;
  std::size_t dim = 0;
};

inline double q_mean(const QMarginal& q) {
  switch (q.family) {
    case QMarginal::Family::normal:
      return q.mu;
    case QMarginal::Family::inv_chisq:
      return inv_chisq_mean(InvChiSq(q.kappa, q.delta));
    case QMarginal::Family::wishart_offdiag: {
      const double denom = q.dof - static_cast<double>(q.dim) - 1.0;
      if (!(denom > 0.0)) throw UndefinedMomentError(q.name + ": Inverse-Wishart mean needs xi_q > 2p");
      return q.scale_rc / denom;
    }
  }
  return 0.0;
}

inline double q_variance(const QMarginal& q) {
  switch (q.family) {
    case QMarginal::Family::normal:
      return q.sigma2;
    case QMarginal::Family::inv_chisq:
      return inv_chisq_variance(InvChiSq(q.kappa, q.delta));
    case QMarginal::Family::wishart_offdiag: {
      const double a = q.dof - static_cast<double>(q.dim);
      if (!(a - 3.0 > 0.0)) throw UndefinedMomentError(q.name + ": Inverse-Wishart variance needs xi_q > 2p + 2");
      return ((a + 1.0) * q.scale_rc * q.scale_rc + (a - 1.0) * q.scale_rr * q.scale_cc) /
             (a * (a - 1.0) * (a - 1.0) * (a - 3.0));
    }
  }
  return 0.0;
}

inline double q_sd(const QMarginal& q) { return std::sqrt(q_variance(q)); }

inline double q_density(const QMarginal& q, double x) {
  switch (q.family) {
    case QMarginal::Family::normal:
      return std::exp(normal_logpdf(x, q.mu, q.sigma2));
    case QMarginal::Family::inv_chisq:
      return x > 0.0 ? std::exp(inv_chisq_logpdf(x, InvChiSq(q.kappa, q.delta))) : 0.0;
    case QMarginal::Family::wishart_offdiag:
      break;
  }
  throw ValidationError(q.name + ": off-diagonal Sigma entries have no closed-form marginal density");
}

inline double q_quantile(const QMarginal& q, double prob) {
  switch (q.family) {
    case QMarginal::Family::normal:
      return boost::math::quantile(boost::math::normal_distribution<double>(q.mu, std::sqrt(q.sigma2)),
                                   std::clamp(prob, 1e-300, 1.0 - 1e-16));
    case QMarginal::Family::inv_chisq:
      return inv_chisq_quantile(prob, InvChiSq(q.kappa, q.delta));
    case QMarginal::Family::wishart_offdiag:
      break;
  }
  throw ValidationError(q.name + ": off-diagonal Sigma entries have no closed-form quantile");
}

/// Marginals of all structural parameters, in structural_parameter_names order.
inline std::vector<QMarginal> q_marginals(const FitReport& report) {
  const auto& spec = report.spec;
  const IndicatorMoments& q = report.is_single() ? report.single().ind : report.multi().ind;
  std::vector<QMarginal> out;
  const std::size_t m = spec.indicators();
  auto normal = [](std::string name, double mu, double s2) {
    QMarginal g;
    g.name = std::move(name);
    g.family = QMarginal::Family::normal;
    g.mu = mu;
    g.sigma2 = s2;
    return g;
  };
  auto ichisq = [](std::string name, double kappa, double delta) {
    QMarginal g;
    g.name = std::move(name);
    g.family = QMarginal::Family::inv_chisq;
    g.kappa = kappa;
    g.delta = delta;
    return g;
  };
  for (std::size_t j = 0; j < m; ++j) {
    const auto jj = static_cast<Eigen::Index>(j);
    out.push_back(normal("nu" + spec.indicator_label(j), q.mu_nu(jj), q.sigma2_nu(jj)));
  }
  for (std::size_t j = 0; j < m; ++j) {
    const auto jj = static_cast<Eigen::Index>(j);
    if (!spec.is_reference(j))
      out.push_back(normal("lambda" + spec.indicator_label(j), q.mu_lambda(jj), q.sigma2_lambda(jj)));
  }
  for (std::size_t j = 0; j < m; ++j) {
    const auto jj = static_cast<Eigen::Index>(j);
    out.push_back(ichisq("psi" + spec.indicator_label(j), q.kappa_psi(jj), q.delta_psi(jj)));
  }
  if (report.is_single()) {
    out.push_back(ichisq("sigma2", report.single().kappa_sigma2, report.single().delta_sigma2));
  } else {
    const auto& s = report.multi();
    const auto p = s.Lambda_Sigma.rows();
    const double dof = s.xi_Sigma - static_cast<double>(p) + 1.0;
    for (Eigen::Index r = 0; r < p; ++r) {
      for (Eigen::Index c = r; c < p; ++c) {
        const std::string name = "Sigma[" + std::to_string(r + 1) + "][" + std::to_string(c + 1) + "]";
        if (r == c) {
          // diagonal of Inverse-Wishart(dof, L) is Inverse-chi-squared(dof - p + 1, L_rr)
          out.push_back(ichisq(name, dof - static_cast<double>(p) + 1.0, s.Lambda_Sigma(r, r)));
        } else {
          QMarginal g;
          g.name = name;
          g.family = QMarginal::Family::wishart_offdiag;
          g.dof = dof;
          g.dim = static_cast<std::size_t>(p);
          g.scale_rr = s.Lambda_Sigma(r, r);
          g.scale_cc = s.Lambda_Sigma(c, c);
          g.scale_rc = s.Lambda_Sigma(r, c);
          out.push_back(g);
        }
      }
    }
  }
  return out;
}

inline QMarginal q_marginal(const FitReport& report, std::string_view name) {
  for (auto& q : q_marginals(report))
    if (q.name == name) return q;
  // latent scores: eta[i] or eta[i][k]
  if (name.rfind("eta[", 0) == 0) {
    const std::string s(name);
    std::size_t i = 0, k = 1;
    const auto close = s.find(']');
    try {
      i = std::stoul(s.substr(4, close - 4));
      if (close + 1 < s.size()) k = std::stoul(s.substr(close + 2, s.size() - close - 3));
    } catch (const std::exception&) {
      throw ValidationError("unknown parameter '" + s + "'");
    }
    QMarginal g;
    g.name = s;
    if (report.is_single() && i >= 1 && i <= report.rows() && close + 1 == s.size()) {
      g.mu = report.single().mu_eta(static_cast<Eigen::Index>(i - 1));
      g.sigma2 = report.single().sigma2_eta;
      return g;
    }
    if (!report.is_single() && i >= 1 && i <= report.rows() && k >= 1 &&
        k <= static_cast<std::size_t>(report.multi().mu_eta.cols())) {
      g.mu = report.multi().mu_eta(static_cast<Eigen::Index>(i - 1), static_cast<Eigen::Index>(k - 1));
      g.sigma2 = report.multi().Sigma_eta(static_cast<Eigen::Index>(k - 1), static_cast<Eigen::Index>(k - 1));
      return g;
    }
  }
  throw ValidationError("unknown parameter '" + std::string(name) + "'");
}

/// Point estimates: q means. Normal blocks give mu_q, Inverse-chi-squared
/// blocks delta_q / (kappa_q - 2), and Sigma gives Lambda_q / (xi_q - 2p).
inline ParameterMap point_estimates(const FitReport& report, bool include_latent = false) {
  ParameterMap out;
  for (const auto& q : q_marginals(report)) out.set(q.name, q_mean(q));
  if (include_latent) {
    if (report.is_single()) {
      const auto& e = report.single().mu_eta;
      for (Eigen::Index i = 0; i < e.size(); ++i) out.set("eta[" + std::to_string(i + 1) + "]", e(i));
    } else {
      const auto& e = report.multi().mu_eta;
      for (Eigen::Index i = 0; i < e.rows(); ++i)
        for (Eigen::Index k = 0; k < e.cols(); ++k)
          out.set("eta[" + std::to_string(i + 1) + "][" + std::to_string(k + 1) + "]", e(i, k));
    }
  }
  return out;
}

/// Standard deviations of the q marginals.
inline ParameterMap q_standard_deviations(const FitReport& report) {
  ParameterMap out;
  for (const auto& q : q_marginals(report)) out.set(q.name, q_sd(q));
  return out;
}

inline std::vector<double> marginal_density_grid(const FitReport& report, std::string_view name,
                                                 std::span<const double> grid) {
  const QMarginal q = q_marginal(report, name);
  std::vector<double> out;
  out.reserve(grid.size());
  for (double x : grid) out.push_back(q_density(q, x));
  return out;
}

// ---------------------------------------------------------------------------
// Serialization

inline nlohmann::json to_json(const FitReport& r) {
  using detail::matrix_to_json;
  using detail::vector_to_json;
  const IndicatorMoments& q = r.is_single() ? r.single().ind : r.multi().ind;
  nlohmann::json qj{{"mu_nu", vector_to_json(q.mu_nu)},         {"sigma2_nu", vector_to_json(q.sigma2_nu)},
                    {"kappa_psi", vector_to_json(q.kappa_psi)}, {"delta_psi", vector_to_json(q.delta_psi)},
                    {"mu_lambda", vector_to_json(q.mu_lambda)}, {"sigma2_lambda", vector_to_json(q.sigma2_lambda)}};
  if (r.is_single()) {
    const auto& s = r.single();
    qj["mu_eta"] = vector_to_json(s.mu_eta);
    qj["sigma2_eta"] = s.sigma2_eta;
    qj["kappa_sigma2"] = s.kappa_sigma2;
    qj["delta_sigma2"] = s.delta_sigma2;
  } else {
    const auto& s = r.multi();
    qj["mu_eta"] = matrix_to_json(s.mu_eta);
    qj["Sigma_eta"] = matrix_to_json(s.Sigma_eta);
    qj["xi_Sigma"] = s.xi_Sigma;
    qj["Lambda_Sigma"] = matrix_to_json(s.Lambda_Sigma);
  }
  nlohmann::json est = nlohmann::json::object();
  nlohmann::json est_order = nlohmann::json::array();
  for (const auto& [name, v] : point_estimates(r)) {
    est[name] = v;
    est_order.push_back(name);
  }
  return {{"model", r.is_single() ? "single" : "multi"},
          {"spec", to_json(r.spec)},
          {"n", r.rows()},
          {"iterations", r.iterations},
          {"converged", r.converged},
          {"final_relative_error", r.final_relative_error},
          {"wall_time_seconds", r.wall_time_seconds},
          {"q", qj},
          {"parameters", est_order},
          {"point_estimates", est}};
}

/// Rebuilds a report (and all cached moments) from its JSON form.
inline FitReport fit_report_from_json(const nlohmann::json& j) {
  using detail::matrix_from_json;
  using detail::vector_from_json;
  try {
    FitReport r;
    r.spec = factor_spec_from_json(j.at("spec"));
    r.iterations = j.at("iterations").get<int>();
    r.converged = j.at("converged").get<bool>();
    r.final_relative_error = j.at("final_relative_error").get<double>();
    r.wall_time_seconds = j.value("wall_time_seconds", 0.0);
    const auto& qj = j.at("q");
    IndicatorMoments q;
    q.mu_nu = vector_from_json(qj.at("mu_nu"), "mu_nu");
    q.sigma2_nu = vector_from_json(qj.at("sigma2_nu"), "sigma2_nu");
    q.kappa_psi = vector_from_json(qj.at("kappa_psi"), "kappa_psi");
    q.delta_psi = vector_from_json(qj.at("delta_psi"), "delta_psi");
    q.mu_lambda = vector_from_json(qj.at("mu_lambda"), "mu_lambda");
    q.sigma2_lambda = vector_from_json(qj.at("sigma2_lambda"), "sigma2_lambda");
    const auto m = static_cast<Eigen::Index>(r.spec.indicators());
    for (const auto* v : {&q.mu_nu, &q.sigma2_nu, &q.kappa_psi, &q.delta_psi, &q.mu_lambda, &q.sigma2_lambda})
      if (v->size() != m) throw ValidationError("fit report: indicator arrays do not match the spec");
    q.mu_nu2 = q.sigma2_nu.array() + q.mu_nu.array().square();
    q.mu_inv_psi = q.kappa_psi.cwiseQuotient(q.delta_psi);
    q.mu_lambda2 = q.sigma2_lambda.array() + q.mu_lambda.array().square();
    if (j.at("model") == "single") {
      SingleFactorVariationalState s;
      s.ind = std::move(q);
      s.mu_eta = vector_from_json(qj.at("mu_eta"), "mu_eta");
      s.sigma2_eta = qj.at("sigma2_eta").get<double>();
      s.mu_eta2 = s.mu_eta.array().square() + s.sigma2_eta;
      s.kappa_sigma2 = qj.at("kappa_sigma2").get<double>();
      s.delta_sigma2 = qj.at("delta_sigma2").get<double>();
      s.mu_inv_sigma2 = s.kappa_sigma2 / s.delta_sigma2;
      r.state = std::move(s);
    } else {
      MultiFactorVariationalState s;
      s.ind = std::move(q);
      s.mu_eta = matrix_from_json(qj.at("mu_eta"), "mu_eta");
      s.Sigma_eta = matrix_from_json(qj.at("Sigma_eta"), "Sigma_eta");
      s.mu_eta2 = s.mu_eta.array().square().rowwise() + s.Sigma_eta.diagonal().transpose().array();
      s.xi_Sigma = qj.at("xi_Sigma").get<double>();
      s.Lambda_Sigma = matrix_from_json(qj.at("Lambda_Sigma"), "Lambda_Sigma");
      s.M_Sigma_inv = (s.xi_Sigma - static_cast<double>(s.Lambda_Sigma.rows()) + 1.0) *
                      spd_inverse(s.Lambda_Sigma, "Lambda_q(Sigma)");
      r.state = std::move(s);
    }
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("fit report: ") + e.what());
  }
}

}  // namespace semvb
