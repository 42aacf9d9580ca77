#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "semvb/semvb.hpp"

namespace testing_support {

/// Composite Simpson rule on [a, b] with an even number of panels.
inline double simpson(const std::function<double(double)>& f, double a, double b, int panels = 20000) {
  if (panels % 2) ++panels;
  const double h = (b - a) / panels;
  double s = f(a) + f(b);
  for (int i = 1; i < panels; ++i) s += (i % 2 ? 4.0 : 2.0) * f(a + i * h);
  return s * h / 3.0;
}

/// Kolmogorov-Smirnov distance between a sample and a CDF.
inline double ks_statistic(std::vector<double> x, const std::function<double(double)>& cdf) {
  std::sort(x.begin(), x.end());
  const double n = static_cast<double>(x.size());
  double d = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double f = cdf(x[i]);
    d = std::max({d, f - static_cast<double>(i) / n, static_cast<double>(i + 1) / n - f});
  }
  return d;
}

/// Two-sample Kolmogorov-Smirnov distance.
inline double ks_two_sample(std::vector<double> a, std::vector<double> b) {
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  std::size_t i = 0, j = 0;
  double d = 0.0;
  while (i < a.size() && j < b.size()) {
    const double t = std::min(a[i], b[j]);
    while (i < a.size() && a[i] <= t) ++i;
    while (j < b.size() && b[j] <= t) ++j;
    d = std::max(d, std::abs(static_cast<double>(i) / a.size() - static_cast<double>(j) / b.size()));
  }
  return d;
}

inline semvb::TrueParameters one_factor_truth(std::size_t m, double nu = 0.0, double lambda = 1.0, double psi = 1.0,
                                              double sigma2 = 1.0) {
  semvb::TrueParameters t;
  const auto mm = static_cast<Eigen::Index>(m);
  t.nu = Eigen::VectorXd::Constant(mm, nu);
  t.lambda = Eigen::VectorXd::Constant(mm, lambda);
  t.lambda(0) = 1.0;
  t.psi = Eigen::VectorXd::Constant(mm, psi);
  t.sigma2 = sigma2;
  return t;
}

inline semvb::Dataset simulate_one_factor(std::size_t n, std::size_t m, std::uint64_t seed,
                                          const semvb::TrueParameters* truth = nullptr) {
  const auto spec = semvb::FactorSpec::with_sizes({m});
  const auto t = truth ? *truth : one_factor_truth(m, 2.0, 0.8, 0.6, 0.9);
  semvb::Rng rng = semvb::make_stream(seed, "test-data");
  return semvb::simulate(t, spec, n, rng);
}

/// Generating parameters for blocks of the given sizes: loadings 0.8..1.2,
/// unit error variances and an exchangeable factor covariance.
inline semvb::TrueParameters multi_factor_truth(const semvb::FactorSpec& spec, double rho = 0.3) {
  semvb::TrueParameters t;
  const auto m = static_cast<Eigen::Index>(spec.indicators());
  const auto p = static_cast<Eigen::Index>(spec.factors());
  t.nu.resize(m);
  t.lambda.resize(m);
  for (Eigen::Index j = 0; j < m; ++j) {
    t.nu(j) = 1.0 + 0.25 * static_cast<double>(j % 5);
    t.lambda(j) = spec.is_reference(static_cast<std::size_t>(j)) ? 1.0 : 0.8 + 0.1 * static_cast<double>(j % 5);
  }
  t.psi = Eigen::VectorXd::Constant(m, 0.5);
  Eigen::MatrixXd sigma = Eigen::MatrixXd::Constant(p, p, rho);
  sigma.diagonal().setOnes();
  t.Sigma = sigma;
  return t;
}

}  // namespace testing_support
