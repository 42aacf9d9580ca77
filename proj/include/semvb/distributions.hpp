#pragma once

#include <cmath>
#include <limits>
#include <optional>
#include <random>
#include <string>

#include <Eigen/Cholesky>
#include <Eigen/Dense>
#include <boost/math/special_functions/gamma.hpp>

#include "semvb/common.hpp"
#include "semvb/random.hpp"

namespace semvb {

/// Inverse-chi-squared with shape kappa and scale delta:
///   p(x) = {(delta/2)^{kappa/2} / Gamma(kappa/2)} x^{-(kappa+2)/2} exp{-delta/(2x)},  x > 0.
/// Equivalent to Inverse-Gamma(kappa/2, delta/2).
struct InvChiSq {
  double kappa;
  double delta;

  InvChiSq(double kappa_, double delta_) : kappa(kappa_), delta(delta_) {
    if (!(kappa > 0.0) || !std::isfinite(kappa))
      throw DomainError("Inverse-chi-squared shape must be positive, got " + format_double(kappa));
    if (!(delta > 0.0) || !std::isfinite(delta))
      throw DomainError("Inverse-chi-squared scale must be positive, got " + format_double(delta));
  }
};

inline double inv_chisq_logpdf(double x, const InvChiSq& d) {
  if (!(x > 0.0)) throw DomainError("Inverse-chi-squared density needs x > 0, got " + format_double(x));
  const double half = 0.5 * d.kappa;
  return half * std::log(0.5 * d.delta) - std::lgamma(half) - (half + 1.0) * std::log(x) -
         0.5 * d.delta / x;
}

inline double inv_chisq_mean(const InvChiSq& d) {
  if (!(d.kappa > 2.0))
    throw UndefinedMomentError("Inverse-chi-squared mean needs kappa > 2, got " + format_double(d.kappa));
  return d.delta / (d.kappa - 2.0);
}

inline double inv_chisq_variance(const InvChiSq& d) {
  if (!(d.kappa > 4.0))
    throw UndefinedMomentError("Inverse-chi-squared variance needs kappa > 4, got " +
                               format_double(d.kappa));
  const double km2 = d.kappa - 2.0;
  return 2.0 * d.delta * d.delta / (km2 * km2 * (d.kappa - 4.0));
}

/// E[1/X] = kappa / delta.
inline double inv_chisq_mean_of_inverse(const InvChiSq& d) { return d.kappa / d.delta; }

inline double inv_chisq_cdf(double x, const InvChiSq& d) {
  if (x <= 0.0) return 0.0;
  if (std::isinf(x)) return 1.0;
  return boost::math::gamma_q(0.5 * d.kappa, 0.5 * d.delta / x);
}

inline double inv_chisq_quantile(double prob, const InvChiSq& d) {
  if (!(prob >= 0.0 && prob <= 1.0)) throw DomainError("quantile level outside [0, 1]");
  if (prob == 0.0) return 0.0;
  if (prob == 1.0) return std::numeric_limits<double>::infinity();
  return 0.5 * d.delta / boost::math::gamma_q_inv(0.5 * d.kappa, prob);
}

inline double sample_chisq(double dof, Rng& rng) {
  return std::gamma_distribution<double>(0.5 * dof, 2.0)(rng);
}

/// delta divided by a chi-squared(kappa) draw.
inline double sample_inv_chisq(const InvChiSq& d, Rng& rng) {
  double c = sample_chisq(d.kappa, rng);
  // gamma draws can underflow to exactly zero for tiny shapes
  while (!(c > 0.0)) c = sample_chisq(d.kappa, rng);
  return d.delta / c;
}

struct GaussianMoment {
  double mu;
  double sigma2;

  GaussianMoment(double mu_, double sigma2_) : mu(mu_), sigma2(sigma2_) {
    if (!(sigma2 > 0.0)) throw DomainError("Gaussian variance must be positive");
  }
};

inline double gaussian_second_moment(const GaussianMoment& g) { return g.sigma2 + g.mu * g.mu; }

inline double normal_logpdf(double x, double mu, double sigma2) {
  constexpr double kLog2Pi = 1.8378770664093454836;
  const double z = x - mu;
  return -0.5 * (kLog2Pi + std::log(sigma2) + z * z / sigma2);
}

// ---------------------------------------------------------------------------
// Positive-definite helpers

inline Eigen::MatrixXd symmetrized(const Eigen::MatrixXd& a) { return 0.5 * (a + a.transpose()); }

/// Cholesky factor of the symmetric part of `a`, or nullopt when `a` is not
/// positive definite.
inline std::optional<Eigen::LLT<Eigen::MatrixXd>> spd_cholesky(const Eigen::MatrixXd& a) {
  if (a.rows() != a.cols() || a.rows() == 0) return std::nullopt;
  if (!a.allFinite()) return std::nullopt;
  Eigen::LLT<Eigen::MatrixXd> llt(symmetrized(a));
  if (llt.info() != Eigen::Success) return std::nullopt;
  const Eigen::VectorXd d = llt.matrixLLT().diagonal();
  if ((d.array() <= 0.0).any()) return std::nullopt;
  // reject numerically singular matrices: ratio of extreme pivots
  const double ratio = d.minCoeff() / d.maxCoeff();
  if (ratio * ratio < 1e-14) return std::nullopt;
  return llt;
}

inline bool is_spd(const Eigen::MatrixXd& a) { return spd_cholesky(a).has_value(); }

inline Eigen::MatrixXd spd_inverse(const Eigen::MatrixXd& a, const char* what) {
  auto llt = spd_cholesky(a);
  if (!llt) throw LinearAlgebraError(std::string(what) + " is not symmetric positive definite");
  Eigen::MatrixXd inv = llt->solve(Eigen::MatrixXd::Identity(a.rows(), a.cols()));
  return symmetrized(inv);
}

/// Inverse G-Wishart over the fully connected graph: density proportional to
///   |S|^{-(xi+2)/2} exp{-tr(scale S^{-1}) / 2}.
/// With nu = xi - p + 1 this is the usual Inverse-Wishart(nu, scale).
struct InvGWishart {
  double xi;
  Eigen::MatrixXd scale;

  InvGWishart(double xi_, Eigen::MatrixXd scale_) : xi(xi_), scale(std::move(scale_)) {
    const auto p = static_cast<double>(scale.rows());
    if (scale.rows() == 0 || scale.rows() != scale.cols())
      throw DomainError("Inverse G-Wishart scale must be a non-empty square matrix");
    if (!(xi > 2.0 * p - 2.0))
      throw DomainError("Inverse G-Wishart shape must exceed 2p - 2, got " + format_double(xi));
    if (!is_spd(scale)) throw LinearAlgebraError("Inverse G-Wishart scale is not symmetric positive definite");
    scale = symmetrized(scale);
  }

  [[nodiscard]] Eigen::Index dim() const noexcept { return scale.rows(); }
  [[nodiscard]] double wishart_dof() const noexcept { return xi - static_cast<double>(dim()) + 1.0; }
};

/// E[S^{-1}] = (xi - p + 1) scale^{-1}.
inline Eigen::MatrixXd igw_mean_inverse(const InvGWishart& d) {
  return d.wishart_dof() * spd_inverse(d.scale, "Inverse G-Wishart scale");
}

/// Lower-triangular T with T T^T ~ Wishart(dof, (chol_lower chol_lower^T)), via Bartlett.
inline Eigen::MatrixXd bartlett_factor(double dof, const Eigen::MatrixXd& chol_lower, Rng& rng) {
  const Eigen::Index p = chol_lower.rows();
  Eigen::MatrixXd a = Eigen::MatrixXd::Zero(p, p);
  std::normal_distribution<double> normal;
  for (Eigen::Index i = 0; i < p; ++i) {
    a(i, i) = std::sqrt(sample_chisq(dof - static_cast<double>(i), rng));
    for (Eigen::Index j = 0; j < i; ++j) a(i, j) = normal(rng);
  }
  return chol_lower * a;
}

inline Eigen::MatrixXd sample_igw(const InvGWishart& d, Rng& rng) {
  const Eigen::Index p = d.dim();
  auto precision_chol = spd_cholesky(spd_inverse(d.scale, "Inverse G-Wishart scale"));
  if (!precision_chol) throw LinearAlgebraError("Inverse G-Wishart scale inverse is not positive definite");
  const Eigen::MatrixXd lower = precision_chol->matrixL();
  const Eigen::MatrixXd t = bartlett_factor(d.wishart_dof(), lower, rng);
  // draw = (T T^T)^{-1} = T^{-T} T^{-1}
  const Eigen::MatrixXd t_inv =
      t.triangularView<Eigen::Lower>().solve(Eigen::MatrixXd::Identity(p, p));
  return symmetrized(t_inv.transpose() * t_inv);
}

}  // namespace semvb
