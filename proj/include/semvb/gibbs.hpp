#pragma once

// Systematic-scan Gibbs sampler built from the conjugate full conditionals
// of both models. Used as the reference posterior for every MFVB check.

#include <cmath>
#include <cstdint>
#include <ostream>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "semvb/common.hpp"
#include "semvb/distributions.hpp"
#include "semvb/intervals.hpp"
#include "semvb/model.hpp"
#include "semvb/parallel.hpp"
#include "semvb/random.hpp"

namespace semvb {

struct ChainConfig {
  int iterations = 15000;
  int burn_in = 7500;
  int chains = 1;
  int thin = 1;
  std::uint64_t seed = 1;
  bool keep_eta = false;
  unsigned threads = 1;

  void validate() const {
    if (iterations < 1) throw ValidationError("chain: iterations must be positive");
    if (burn_in < 0 || burn_in >= iterations) throw ValidationError("chain: burn_in must lie in [0, iterations)");
    if (chains < 1) throw ValidationError("chain: chains must be at least 1");
    if (thin < 1) throw ValidationError("chain: thin must be at least 1");
  }
  [[nodiscard]] int retained() const { return (iterations - burn_in) / thin; }
};

/// Retained draws. chains[c] is retained x names.size(); column order is
/// nu, lambda (reference columns included, constant 1), psi, sigma2 or the
/// upper triangle of Sigma, then eta when kept.
struct ChainDraws {
  std::vector<std::string> names;
  std::vector<Eigen::MatrixXd> chains;

  [[nodiscard]] std::size_t index_of(std::string_view name) const {
    for (std::size_t c = 0; c < names.size(); ++c)
      if (names[c] == name) return c;
    throw ValidationError("no draws for parameter '" + std::string(name) + "'");
  }
  [[nodiscard]] bool contains(std::string_view name) const {
    for (const auto& n : names)
      if (n == name) return true;
    return false;
  }
  [[nodiscard]] std::size_t total() const {
    std::size_t t = 0;
    for (const auto& c : chains) t += static_cast<std::size_t>(c.rows());
    return t;
  }
  /// All chains pooled, in chain order.
  [[nodiscard]] std::vector<double> column(std::string_view name) const {
    const auto col = static_cast<Eigen::Index>(index_of(name));
    std::vector<double> out;
    out.reserve(total());
    for (const auto& c : chains)
      for (Eigen::Index r = 0; r < c.rows(); ++r) out.push_back(c(r, col));
    return out;
  }
};

namespace detail {

inline std::vector<std::string> draw_names(const FactorSpec& spec, bool covariance_matrix, std::size_t n, bool keep_eta) {
  std::vector<std::string> out;
  const std::size_t m = spec.indicators();
  for (std::size_t j = 0; j < m; ++j) out.push_back("nu" + spec.indicator_label(j));
  for (std::size_t j = 0; j < m; ++j) out.push_back("lambda" + spec.indicator_label(j));
  for (std::size_t j = 0; j < m; ++j) out.push_back("psi" + spec.indicator_label(j));
  if (!covariance_matrix) {
    out.push_back("sigma2");
  } else {
    for (std::size_t r = 0; r < spec.factors(); ++r)
      for (std::size_t c = r; c < spec.factors(); ++c)
        out.push_back("Sigma[" + std::to_string(r + 1) + "][" + std::to_string(c + 1) + "]");
  }
  if (keep_eta) {
    for (std::size_t i = 0; i < n; ++i) {
      if (!covariance_matrix) {
        out.push_back("eta[" + std::to_string(i + 1) + "]");
      } else {
        for (std::size_t k = 0; k < spec.factors(); ++k)
          out.push_back("eta[" + std::to_string(i + 1) + "][" + std::to_string(k + 1) + "]");
      }
    }
  }
  return out;
}

struct GibbsState {
  Eigen::VectorXd nu, lambda, psi;
  Eigen::MatrixXd eta;    // n x p
  Eigen::MatrixXd Sigma;  // p x p (1 x 1 holds sigma^2)
};

inline void check_finite(double v, const char* what, int iteration) {
  if (!std::isfinite(v))
    throw SamplerFault(std::string("non-finite ") + what + " draw at iteration " + std::to_string(iteration));
}

/// One chain. `covariance_matrix` selects the Inverse G-Wishart update for
/// the factor covariance; otherwise the scalar sigma^2 update is used.
inline Eigen::MatrixXd run_chain(const Dataset& data, const Hyperparameters& h, const ChainConfig& cfg,
                                 bool covariance_matrix, Rng rng) {
  const auto& spec = data.spec;
  const auto n = data.y.rows();
  const auto m = data.y.cols();
  const auto p = static_cast<Eigen::Index>(spec.factors());
  const double nd = static_cast<double>(n);
  std::normal_distribution<double> normal;

  GibbsState s;
  // Moment-matched start: with eta = 0 the first lambda draws come from the
  // prior with a random sign, and a flipped block can stay stuck far past any
  // burn-in. The centred reference column (loading 1) is a rough eta instead.
  s.nu = data.y.colwise().mean().transpose();
  s.lambda = Eigen::VectorXd::Ones(m);
  s.psi.resize(m);
  for (Eigen::Index j = 0; j < m; ++j)
    s.psi(j) = std::max(0.5 * (data.y.col(j).array() - s.nu(j)).square().sum() / (nd - 1.0), 1e-8);
  s.eta.resize(n, p);
  for (Eigen::Index k = 0; k < p; ++k) {
    const auto ref = static_cast<Eigen::Index>(spec.block_offset(static_cast<std::size_t>(k)));
    s.eta.col(k) = data.y.col(ref).array() - s.nu(ref);
  }
  const double xi = covariance_matrix ? h.xi_for(spec.factors()) : 0.0;
  const Eigen::MatrixXd lambda_prior = covariance_matrix ? h.Lambda_for(spec.factors()) : Eigen::MatrixXd();
  if (covariance_matrix)
    s.Sigma = lambda_prior / (xi + 2.0);
  else
    s.Sigma = Eigen::MatrixXd::Constant(1, 1, h.delta_sigma2 / (h.kappa_sigma2 + 2.0));

  const auto names = draw_names(spec, covariance_matrix, static_cast<std::size_t>(n), cfg.keep_eta);
  Eigen::MatrixXd out(cfg.retained(), static_cast<Eigen::Index>(names.size()));
  const double inv_s2_lambda = 1.0 / h.sigma2_lambda;
  const double kappa_psi_post = nd + h.kappa_psi + 1.0;
  Eigen::MatrixXd z(n, p);
  Eigen::Index row = 0;

  for (int it = 1; it <= cfg.iterations; ++it) {
    // indicator loop: nu_j, psi_j, lambda_j
    Eigen::VectorXd eta_ss(p);
    for (Eigen::Index k = 0; k < p; ++k) eta_ss(k) = s.eta.col(k).squaredNorm();
    for (Eigen::Index j = 0; j < m; ++j) {
      const auto k = static_cast<Eigen::Index>(spec.factor_of(static_cast<std::size_t>(j)));
      const auto y = data.y.col(j);
      const auto eta = s.eta.col(k);

      const double prec_nu = nd / s.psi(j) + 1.0 / h.sigma2_nu;
      const double mean_nu = ((y - s.lambda(j) * eta).sum() / s.psi(j)) / prec_nu;
      s.nu(j) = mean_nu + normal(rng) / std::sqrt(prec_nu);
      check_finite(s.nu(j), "nu", it);

      const double lam_dev = s.lambda(j) - h.mu_lambda;
      const double scale = (y.array() - s.nu(j) - s.lambda(j) * eta.array()).square().sum() +
                           lam_dev * lam_dev * inv_s2_lambda + h.delta_psi;
      s.psi(j) = sample_inv_chisq(InvChiSq(kappa_psi_post, scale), rng);
      check_finite(s.psi(j), "psi", it);

      if (!spec.is_reference(static_cast<std::size_t>(j))) {
        const double prec_l = (eta_ss(k) + inv_s2_lambda) / s.psi(j);
        const double mean_l = ((eta.dot(y) - s.nu(j) * eta.sum() + h.mu_lambda * inv_s2_lambda) / s.psi(j)) / prec_l;
        s.lambda(j) = mean_l + normal(rng) / std::sqrt(prec_l);
        check_finite(s.lambda(j), "lambda", it);
      }
    }

    // latent scores: one precision shared by all rows
    Eigen::MatrixXd sigma_inv = covariance_matrix ? spd_inverse(s.Sigma, "Sigma draw")
                                                  : Eigen::MatrixXd::Constant(1, 1, 1.0 / s.Sigma(0, 0));
    Eigen::MatrixXd weights = Eigen::MatrixXd::Zero(m, p);
    for (Eigen::Index j = 0; j < m; ++j) {
      const auto k = static_cast<Eigen::Index>(spec.factor_of(static_cast<std::size_t>(j)));
      weights(j, k) = s.lambda(j) / s.psi(j);
      sigma_inv(k, k) += s.lambda(j) * s.lambda(j) / s.psi(j);
    }
    auto llt = spd_cholesky(sigma_inv);
    if (!llt) throw SamplerFault("latent precision not positive definite at iteration " + std::to_string(it));
    Eigen::MatrixXd r = data.y * weights;
    r.rowwise() -= s.nu.transpose() * weights;
    for (Eigen::Index i = 0; i < n; ++i)
      for (Eigen::Index k = 0; k < p; ++k) z(i, k) = normal(rng);
    const Eigen::MatrixXd lower = llt->matrixL();
    // rows: mean P^{-1} r_i plus L^{-T} z_i, written for the n x p layout
    Eigen::MatrixXd noise = lower.transpose().triangularView<Eigen::Upper>().solve(z.transpose()).transpose();
    s.eta = llt->solve(r.transpose()).transpose() + noise;
    if (!s.eta.allFinite()) throw SamplerFault("non-finite eta draw at iteration " + std::to_string(it));

    // factor covariance
    if (covariance_matrix) {
      const Eigen::MatrixXd post_scale = s.eta.transpose() * s.eta + lambda_prior;
      s.Sigma = sample_igw(InvGWishart(nd + xi, post_scale), rng);
      if (!is_spd(s.Sigma)) throw SamplerFault("Sigma draw not positive definite at iteration " + std::to_string(it));
    } else {
      s.Sigma(0, 0) =
          sample_inv_chisq(InvChiSq(nd + h.kappa_sigma2, s.eta.col(0).squaredNorm() + h.delta_sigma2), rng);
      check_finite(s.Sigma(0, 0), "sigma2", it);
    }

    if (it > cfg.burn_in && (it - cfg.burn_in) % cfg.thin == 0 && row < out.rows()) {
      Eigen::Index c = 0;
      for (Eigen::Index j = 0; j < m; ++j) out(row, c++) = s.nu(j);
      for (Eigen::Index j = 0; j < m; ++j) out(row, c++) = s.lambda(j);
      for (Eigen::Index j = 0; j < m; ++j) out(row, c++) = s.psi(j);
      for (Eigen::Index a = 0; a < p; ++a)
        for (Eigen::Index b = a; b < p; ++b) out(row, c++) = s.Sigma(a, b);
      if (cfg.keep_eta)
        for (Eigen::Index i = 0; i < n; ++i)
          for (Eigen::Index k = 0; k < p; ++k) out(row, c++) = s.eta(i, k);
      ++row;
    }
  }
  return out;
}

inline ChainDraws run_chains(const Dataset& data, const Hyperparameters& h, const ChainConfig& cfg,
                             bool covariance_matrix) {
  cfg.validate();
  ChainDraws draws;
  draws.names = draw_names(data.spec, covariance_matrix, data.rows(), cfg.keep_eta);
  draws.chains.resize(static_cast<std::size_t>(cfg.chains));
  parallel_for(draws.chains.size(), cfg.threads, [&](std::size_t c) {
    draws.chains[c] = run_chain(data, h, cfg, covariance_matrix, make_stream(cfg.seed, "gibbs", c));
  });
  return draws;
}

}  // namespace detail

inline ChainDraws gibbs_single(const Dataset& data, const Hyperparameters& h, const ChainConfig& cfg = {}) {
  if (!data.spec.single_factor()) throw ValidationError("gibbs_single needs a one-factor spec");
  h.validate(1);
  return detail::run_chains(data, h, cfg, false);
}

/// Multi-factor sampler; a one-factor spec is accepted and treated as a
/// 1 x 1 Sigma with the Inverse G-Wishart prior.
inline ChainDraws gibbs_multi(const Dataset& data, const Hyperparameters& h, const ChainConfig& cfg = {}) {
  const auto p = data.spec.factors();
  h.validate(p);
  if (!(h.xi_for(p) > 2.0 * static_cast<double>(p) - 2.0)) throw ValidationError("xi_Sigma must exceed 2p - 2");
  if (h.Lambda_for(p).rows() != static_cast<Eigen::Index>(p)) throw ValidationError("Lambda_Sigma has the wrong size");
  return detail::run_chains(data, h, cfg, true);
}

inline ChainDraws gibbs(const Dataset& data, const Hyperparameters& h, const ChainConfig& cfg = {}) {
  return data.spec.single_factor() ? gibbs_single(data, h, cfg) : gibbs_multi(data, h, cfg);
}

/// Posterior mean and equal-tailed (alpha/2, 1 - alpha/2) quantiles per
/// column, all chains pooled. `only` restricts and orders the output.
inline IntervalSet chain_summary(const ChainDraws& draws, double alpha = 0.05,
                                 const std::vector<std::string>& only = {}) {
  if (!(alpha > 0.0 && alpha <= 1.0)) throw ValidationError("alpha must lie in (0, 1]");
  if (draws.total() < 100)
    throw ValidationError("chain summary needs at least 100 retained draws, got " + std::to_string(draws.total()));
  IntervalSet out;
  const auto& names = only.empty() ? draws.names : only;
  for (const auto& name : names) {
    std::vector<double> v = draws.column(name);
    double sum = 0.0;
    for (double x : v) sum += x;
    std::sort(v.begin(), v.end());
    IntervalReport r;
    r.parameter = name;
    r.method = "mcmc";
    r.point = sum / static_cast<double>(v.size());
    r.lower = quantile_sorted(v, 0.5 * alpha);
    r.upper = quantile_sorted(v, 1.0 - 0.5 * alpha);
    r.alpha = alpha;
    r.count = v.size();
    out.push_back(std::move(r));
  }
  return out;
}

struct ColumnMoments {
  double mean = 0.0;
  double sd = 0.0;
};

inline ColumnMoments column_moments(const ChainDraws& draws, std::string_view name) {
  const auto v = draws.column(name);
  double mean = 0.0;
  for (double x : v) mean += x;
  mean /= static_cast<double>(v.size());
  double ss = 0.0;
  for (double x : v) ss += (x - mean) * (x - mean);
  return {mean, std::sqrt(ss / static_cast<double>(v.size() > 1 ? v.size() - 1 : 1))};
}

inline void write_draws_csv(std::ostream& out, const ChainDraws& draws) {
  out << "chain,draw";
  for (const auto& n : draws.names) out << ',' << n;
  out << '\n';
  for (std::size_t c = 0; c < draws.chains.size(); ++c) {
    const auto& m = draws.chains[c];
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
      out << c + 1 << ',' << r + 1;
      for (Eigen::Index k = 0; k < m.cols(); ++k) out << ',' << format_double(m(r, k));
      out << '\n';
    }
  }
}

/// Reads the CSV written by write_draws_csv.
inline ChainDraws read_draws_csv(std::istream& in, const std::string& source = "draws") {
  std::string line;
  if (!std::getline(in, line)) throw IngestError(source + ": empty draws file");
  auto header = detail::split_csv_line(line);
  if (header.size() < 3 || detail::trim(header[0]) != "chain" || detail::trim(header[1]) != "draw")
    throw IngestError(source + ": draws file must start with 'chain,draw'");
  ChainDraws d;
  for (std::size_t c = 2; c < header.size(); ++c) d.names.push_back(detail::trim(header[c]));
  std::vector<std::vector<std::vector<double>>> rows;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (detail::trim(line).empty()) continue;
    auto cells = detail::split_csv_line(line);
    if (cells.size() != header.size())
      throw IngestError(source + ": line " + std::to_string(line_no) + " has the wrong number of cells");
    double chain = 0.0;
    if (!parse_double(cells[0], chain) || chain < 1.0)
      throw IngestError(source + ": bad chain index on line " + std::to_string(line_no));
    const auto c = static_cast<std::size_t>(chain) - 1;
    if (rows.size() <= c) rows.resize(c + 1);
    std::vector<double> values(d.names.size());
    for (std::size_t k = 0; k < d.names.size(); ++k)
      if (!parse_double(cells[k + 2], values[k]))
        throw IngestError(source + ": non-numeric value on line " + std::to_string(line_no) + ", column '" +
                          d.names[k] + "'");
    rows[c].push_back(std::move(values));
  }
  for (const auto& chain_rows : rows) {
    Eigen::MatrixXd m(static_cast<Eigen::Index>(chain_rows.size()), static_cast<Eigen::Index>(d.names.size()));
    for (std::size_t r = 0; r < chain_rows.size(); ++r)
      for (std::size_t k = 0; k < d.names.size(); ++k)
        m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(k)) = chain_rows[r][k];
    d.chains.push_back(std::move(m));
  }
  if (d.total() == 0) throw IngestError(source + ": no draws");
  return d;
}

inline nlohmann::json draws_summary_json(const ChainDraws& draws, const ChainConfig& cfg, double alpha = 0.05) {
  nlohmann::json params = nlohmann::json::object();
  for (const auto& r : chain_summary(draws, alpha)) {
    const auto mom = column_moments(draws, r.parameter);
    params[r.parameter] = {{"mean", r.point}, {"sd", mom.sd}, {"lower", r.lower}, {"upper", r.upper}};
  }
  return {{"iterations", cfg.iterations}, {"burn_in", cfg.burn_in}, {"chains", cfg.chains},
          {"thin", cfg.thin},             {"seed", cfg.seed},       {"retained_per_chain", cfg.retained()},
          {"alpha", alpha},               {"parameters", params},   {"order", draws.names}};
}

}  // namespace semvb
