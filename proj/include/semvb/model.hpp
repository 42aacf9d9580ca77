#pragma once

#include <cstddef>
#include <fstream>
#include <optional>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "semvb/common.hpp"
#include "semvb/distributions.hpp"
#include "semvb/random.hpp"

namespace semvb {

struct FactorBlock {
  std::string name;
  std::vector<std::string> indicators;  // first entry is the reference indicator
};

/// Partition of the observed columns into p ordered factor blocks. Columns
/// are numbered globally in block order; the first column of every block
/// carries the loading pinned at 1.
class FactorSpec {
 public:
  FactorSpec() = default;

  explicit FactorSpec(std::vector<FactorBlock> blocks) : blocks_(std::move(blocks)) {
    if (blocks_.empty()) throw ValidationError("factor spec: at least one factor is required");
    std::unordered_set<std::string> seen;
    for (std::size_t k = 0; k < blocks_.size(); ++k) {
      const auto& b = blocks_[k];
      if (b.indicators.size() < 2)
        throw ValidationError("factor spec: factor '" + b.name +
                              "' needs at least 2 indicators (one is the fixed reference)");
      for (std::size_t jp = 0; jp < b.indicators.size(); ++jp) {
        if (!seen.insert(b.indicators[jp]).second)
          throw ValidationError("factor spec: indicator '" + b.indicators[jp] + "' appears twice");
        factor_of_.push_back(k);
        position_.push_back(jp);
        columns_.push_back(b.indicators[jp]);
      }
      offsets_.push_back(columns_.size() - b.indicators.size());
    }
  }

  /// Single block with the given indicators.
  static FactorSpec single(std::vector<std::string> indicators, std::string name = "factor") {
    return FactorSpec({FactorBlock{std::move(name), std::move(indicators)}});
  }

  /// Blocks of the given sizes with generated names f<k>_<j'>.
  static FactorSpec with_sizes(const std::vector<std::size_t>& sizes) {
    std::vector<FactorBlock> blocks;
    for (std::size_t k = 0; k < sizes.size(); ++k) {
      FactorBlock b{"f" + std::to_string(k + 1), {}};
      for (std::size_t j = 0; j < sizes[k]; ++j)
        b.indicators.push_back("y" + std::to_string(k + 1) + "_" + std::to_string(j + 1));
      blocks.push_back(std::move(b));
    }
    return FactorSpec(std::move(blocks));
  }

  [[nodiscard]] std::size_t factors() const noexcept { return blocks_.size(); }
  [[nodiscard]] std::size_t indicators() const noexcept { return columns_.size(); }
  [[nodiscard]] bool single_factor() const noexcept { return blocks_.size() == 1; }
  [[nodiscard]] const std::vector<FactorBlock>& blocks() const noexcept { return blocks_; }
  [[nodiscard]] const std::vector<std::string>& columns() const noexcept { return columns_; }
  [[nodiscard]] std::size_t block_size(std::size_t k) const { return blocks_.at(k).indicators.size(); }
  [[nodiscard]] std::size_t block_offset(std::size_t k) const { return offsets_.at(k); }
  [[nodiscard]] std::size_t factor_of(std::size_t j) const { return factor_of_.at(j); }
  [[nodiscard]] std::size_t position_in_block(std::size_t j) const { return position_.at(j); }
  [[nodiscard]] bool is_reference(std::size_t j) const { return position_.at(j) == 0; }

  /// "[j]" for one factor, "[k][j']" otherwise (1-based).
  [[nodiscard]] std::string indicator_label(std::size_t j) const {
    if (single_factor()) return "[" + std::to_string(j + 1) + "]";
    return "[" + std::to_string(factor_of(j) + 1) + "][" + std::to_string(position_in_block(j) + 1) + "]";
  }

  bool operator==(const FactorSpec& o) const {
    if (blocks_.size() != o.blocks_.size()) return false;
    for (std::size_t k = 0; k < blocks_.size(); ++k)
      if (blocks_[k].name != o.blocks_[k].name || blocks_[k].indicators != o.blocks_[k].indicators)
        return false;
    return true;
  }

 private:
  std::vector<FactorBlock> blocks_;
  std::vector<std::string> columns_;
  std::vector<std::size_t> factor_of_;
  std::vector<std::size_t> position_;
  std::vector<std::size_t> offsets_;
};

inline nlohmann::json to_json(const FactorSpec& spec) {
  nlohmann::json factors = nlohmann::json::array();
  for (const auto& b : spec.blocks()) factors.push_back({{"name", b.name}, {"indicators", b.indicators}});
  return {{"factors", factors}};
}

inline FactorSpec factor_spec_from_json(const nlohmann::json& j) {
  if (!j.is_object() || !j.contains("factors") || !j["factors"].is_array())
    throw ValidationError("factor spec: expected an object with a 'factors' array");
  std::vector<FactorBlock> blocks;
  for (const auto& f : j["factors"]) {
    if (!f.is_object() || !f.contains("indicators") || !f["indicators"].is_array())
      throw ValidationError("factor spec: every factor needs an 'indicators' array");
    FactorBlock b;
    b.name = f.value("name", "factor" + std::to_string(blocks.size() + 1));
    for (const auto& ind : f["indicators"]) {
      if (!ind.is_string()) throw ValidationError("factor spec: indicator names must be strings");
      b.indicators.push_back(ind.get<std::string>());
    }
    blocks.push_back(std::move(b));
  }
  return FactorSpec(std::move(blocks));
}

inline nlohmann::json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IngestError("cannot open '" + path + "'");
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ValidationError("malformed JSON in '" + path + "': " + e.what());
  }
}

inline FactorSpec load_factor_spec(const std::string& path) {
  return factor_spec_from_json(read_json_file(path));
}

/// n x m outcome matrix with columns in spec order (block by block).
struct Dataset {
  Eigen::MatrixXd y;
  FactorSpec spec;

  Dataset() = default;
  Dataset(Eigen::MatrixXd y_, FactorSpec spec_) : y(std::move(y_)), spec(std::move(spec_)) {
    if (static_cast<std::size_t>(y.cols()) != spec.indicators())
      throw ValidationError("dataset has " + std::to_string(y.cols()) + " columns but the spec lists " +
                            std::to_string(spec.indicators()));
    if (y.rows() < 2) throw ValidationError("dataset needs at least 2 rows");
    if (!y.allFinite()) throw ValidationError("dataset contains non-finite values");
  }

  [[nodiscard]] std::size_t rows() const noexcept { return static_cast<std::size_t>(y.rows()); }
  [[nodiscard]] std::size_t cols() const noexcept { return static_cast<std::size_t>(y.cols()); }
  [[nodiscard]] const std::vector<std::string>& column_names() const noexcept { return spec.columns(); }

  /// Rows picked in the given order (repeats allowed).
  [[nodiscard]] Dataset select_rows(std::span<const std::size_t> idx) const {
    Eigen::MatrixXd out(static_cast<Eigen::Index>(idx.size()), y.cols());
    for (std::size_t r = 0; r < idx.size(); ++r) out.row(static_cast<Eigen::Index>(r)) = y.row(static_cast<Eigen::Index>(idx[r]));
    return Dataset(std::move(out), spec);
  }

  [[nodiscard]] Dataset without_row(std::size_t drop) const {
    std::vector<std::size_t> idx;
    idx.reserve(rows() - 1);
    for (std::size_t i = 0; i < rows(); ++i)
      if (i != drop) idx.push_back(i);
    return select_rows(idx);
  }
};

// ---------------------------------------------------------------------------
// CSV

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"') {
        if (i + 1 < line.size() && line[i + 1] == '"') {
          cur.push_back('"');
          ++i;
        } else {
          quoted = false;
        }
      } else {
        cur.push_back(c);
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      out.push_back(std::move(cur));
      cur.clear();
    } else if (c != '\r') {
      cur.push_back(c);
    }
  }
  out.push_back(std::move(cur));
  return out;
}

inline std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t");
  return s.substr(b, e - b + 1);
}

}  // namespace detail

/// Reads a headered CSV and binds columns to the spec by name. Columns not
/// named in the spec are ignored; a note for each is appended to `warnings`.
inline Dataset load_csv(std::istream& in, const FactorSpec& spec, std::vector<std::string>* warnings = nullptr,
                        const std::string& source = "<stream>") {
  std::string line;
  if (!std::getline(in, line)) throw IngestError(source + ": empty file, header row missing");
  if (line.size() >= 3 && static_cast<unsigned char>(line[0]) == 0xEF) line.erase(0, 3);  // UTF-8 BOM
  auto header = detail::split_csv_line(line);
  for (auto& h : header) h = detail::trim(h);

  std::unordered_map<std::string, std::size_t> where;
  for (std::size_t c = 0; c < header.size(); ++c) where.emplace(header[c], c);
  std::vector<std::size_t> src(spec.indicators());
  for (std::size_t j = 0; j < spec.indicators(); ++j) {
    auto it = where.find(spec.columns()[j]);
    if (it == where.end()) throw IngestError(source + ": column '" + spec.columns()[j] + "' not found in header");
    src[j] = it->second;
  }
  if (warnings) {
    std::unordered_set<std::string> used(spec.columns().begin(), spec.columns().end());
    for (const auto& h : header)
      if (!used.count(h)) warnings->push_back(source + ": ignoring column '" + h + "'");
  }

  std::vector<double> values;
  std::size_t rows = 0;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (detail::trim(line).empty() || line == "\r") continue;
    auto cells = detail::split_csv_line(line);
    if (cells.size() != header.size())
      throw IngestError(source + ": line " + std::to_string(line_no) + " has " + std::to_string(cells.size()) +
                        " fields, header has " + std::to_string(header.size()));
    for (std::size_t j = 0; j < spec.indicators(); ++j) {
      double v = 0.0;
      if (!parse_double(cells[src[j]], v))
        throw IngestError(source + ": row " + std::to_string(rows + 1) + " (line " + std::to_string(line_no) +
                          "), column '" + spec.columns()[j] + "': not a finite number ('" + cells[src[j]] + "')");
      values.push_back(v);
    }
    ++rows;
  }
  if (rows < 2) throw IngestError(source + ": need at least 2 data rows, found " + std::to_string(rows));
  Eigen::MatrixXd y(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(spec.indicators()));
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < spec.indicators(); ++j)
      y(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = values[i * spec.indicators() + j];
  return Dataset(std::move(y), spec);
}

inline Dataset load_csv(const std::string& path, const FactorSpec& spec, std::vector<std::string>* warnings = nullptr) {
  std::ifstream in(path);
  if (!in) throw IngestError("cannot open '" + path + "'");
  return load_csv(in, spec, warnings, path);
}

inline void write_csv(std::ostream& out, const Dataset& d) {
  const auto& names = d.column_names();
  for (std::size_t j = 0; j < names.size(); ++j) out << (j ? "," : "") << names[j];
  out << '\n';
  for (Eigen::Index i = 0; i < d.y.rows(); ++i) {
    for (Eigen::Index j = 0; j < d.y.cols(); ++j) out << (j ? "," : "") << format_double(d.y(i, j));
    out << '\n';
  }
}

// ---------------------------------------------------------------------------
// Hyperparameters

/// Prior constants. The defaults are the applied choices mu_lambda = 0,
/// sigma_nu = 10, sigma_lambda = 1, kappa_psi = 1, delta_psi = 0.01,
/// xi_Sigma = 2p + 10, Lambda_Sigma = 10 I; the one-factor sigma^2 prior
/// reuses (1, 0.01).
struct Hyperparameters {
  double mu_lambda = 0.0;
  double sigma2_nu = 100.0;
  double sigma2_lambda = 1.0;
  double kappa_psi = 1.0;
  double delta_psi = 0.01;
  double kappa_sigma2 = 1.0;
  double delta_sigma2 = 0.01;
  std::optional<double> xi_Sigma;
  std::optional<Eigen::MatrixXd> Lambda_Sigma;

  [[nodiscard]] double xi_for(std::size_t p) const { return xi_Sigma.value_or(2.0 * static_cast<double>(p) + 10.0); }

  [[nodiscard]] Eigen::MatrixXd Lambda_for(std::size_t p) const {
    if (Lambda_Sigma) return *Lambda_Sigma;
    const auto n = static_cast<Eigen::Index>(p);
    return 10.0 * Eigen::MatrixXd::Identity(n, n);
  }

  void validate(std::size_t p) const {
    auto positive = [](double v, const char* name) {
      if (!(v > 0.0) || !std::isfinite(v)) throw ValidationError(std::string("hyperparameter '") + name + "' must be positive");
    };
    if (!std::isfinite(mu_lambda)) throw ValidationError("hyperparameter 'mu_lambda' must be finite");
    positive(sigma2_nu, "sigma2_nu");
    positive(sigma2_lambda, "sigma2_lambda");
    positive(kappa_psi, "kappa_psi");
    positive(delta_psi, "delta_psi");
    positive(kappa_sigma2, "kappa_sigma2");
    positive(delta_sigma2, "delta_sigma2");
    if (p >= 2) {
      const double xi = xi_for(p);
      if (!(xi > 2.0 * static_cast<double>(p) - 2.0))
        throw ValidationError("hyperparameter 'xi_Sigma' must exceed 2p - 2 = " + std::to_string(2 * p - 2));
      const auto lam = Lambda_for(p);
      if (lam.rows() != static_cast<Eigen::Index>(p) || lam.cols() != static_cast<Eigen::Index>(p))
        throw ValidationError("hyperparameter 'Lambda_Sigma' must be " + std::to_string(p) + "x" + std::to_string(p));
      if (!is_spd(lam)) throw ValidationError("hyperparameter 'Lambda_Sigma' must be symmetric positive definite");
    }
  }
};

namespace detail {

inline Eigen::MatrixXd matrix_from_json(const nlohmann::json& j, const char* what) {
  if (!j.is_array() || j.empty()) throw ValidationError(std::string("'") + what + "' must be a non-empty array of rows");
  const auto rows = static_cast<Eigen::Index>(j.size());
  const auto cols = static_cast<Eigen::Index>(j[0].size());
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r) {
    const auto& row = j[static_cast<std::size_t>(r)];
    if (!row.is_array() || static_cast<Eigen::Index>(row.size()) != cols)
      throw ValidationError(std::string("'") + what + "' rows must have equal length");
    for (Eigen::Index c = 0; c < cols; ++c) {
      const auto& v = row[static_cast<std::size_t>(c)];
      if (!v.is_number()) throw ValidationError(std::string("'") + what + "' entries must be numbers");
      m(r, c) = v.get<double>();
    }
  }
  return m;
}

inline Eigen::VectorXd vector_from_json(const nlohmann::json& j, const char* what) {
  if (!j.is_array()) throw ValidationError(std::string("'") + what + "' must be an array");
  Eigen::VectorXd v(static_cast<Eigen::Index>(j.size()));
  for (std::size_t i = 0; i < j.size(); ++i) {
    if (!j[i].is_number()) throw ValidationError(std::string("'") + what + "' entries must be numbers");
    v(static_cast<Eigen::Index>(i)) = j[i].get<double>();
  }
  return v;
}

inline nlohmann::json matrix_to_json(const Eigen::MatrixXd& m) {
  nlohmann::json out = nlohmann::json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    nlohmann::json row = nlohmann::json::array();
    for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
    out.push_back(row);
  }
  return out;
}

inline nlohmann::json vector_to_json(const Eigen::VectorXd& v) {
  nlohmann::json out = nlohmann::json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) out.push_back(v(i));
  return out;
}

inline double number_field(const nlohmann::json& j, const char* key) {
  const auto& v = j.at(key);
  if (!v.is_number()) throw ValidationError(std::string("field '") + key + "' must be a number");
  return v.get<double>();
}

}  // namespace detail

inline Hyperparameters hyperparameters_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ValidationError("hyperparameters: expected a JSON object");
  static const std::unordered_set<std::string> known{"mu_lambda",    "sigma2_nu",    "sigma2_lambda",
                                                     "kappa_psi",    "delta_psi",    "kappa_sigma2",
                                                     "delta_sigma2", "xi_Sigma",     "Lambda_Sigma"};
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!known.count(it.key())) throw ValidationError("hyperparameters: unknown field '" + it.key() + "'");
  Hyperparameters h;
  auto read = [&](const char* key, double& slot) {
    if (j.contains(key)) slot = detail::number_field(j, key);
  };
  read("mu_lambda", h.mu_lambda);
  read("sigma2_nu", h.sigma2_nu);
  read("sigma2_lambda", h.sigma2_lambda);
  read("kappa_psi", h.kappa_psi);
  read("delta_psi", h.delta_psi);
  read("kappa_sigma2", h.kappa_sigma2);
  read("delta_sigma2", h.delta_sigma2);
  if (j.contains("xi_Sigma")) h.xi_Sigma = detail::number_field(j, "xi_Sigma");
  if (j.contains("Lambda_Sigma")) h.Lambda_Sigma = detail::matrix_from_json(j["Lambda_Sigma"], "Lambda_Sigma");
  return h;
}

inline nlohmann::json to_json(const Hyperparameters& h, std::size_t p) {
  nlohmann::json j{{"mu_lambda", h.mu_lambda},       {"sigma2_nu", h.sigma2_nu},   {"sigma2_lambda", h.sigma2_lambda},
                   {"kappa_psi", h.kappa_psi},       {"delta_psi", h.delta_psi},   {"kappa_sigma2", h.kappa_sigma2},
                   {"delta_sigma2", h.delta_sigma2}};
  if (p >= 2) {
    j["xi_Sigma"] = h.xi_for(p);
    j["Lambda_Sigma"] = detail::matrix_to_json(h.Lambda_for(p));
  }
  return j;
}

// ---------------------------------------------------------------------------
// Generating parameters

struct TrueParameters {
  Eigen::VectorXd nu;
  Eigen::VectorXd lambda;  // full length m, reference entries equal to 1
  Eigen::VectorXd psi;
  std::optional<double> sigma2;
  std::optional<Eigen::MatrixXd> Sigma;

  /// Factor covariance as a p x p matrix (sigma^2 as 1x1 for one factor).
  [[nodiscard]] Eigen::MatrixXd factor_covariance(std::size_t p) const {
    if (Sigma) return *Sigma;
    if (sigma2 && p == 1) return Eigen::MatrixXd::Constant(1, 1, *sigma2);
    throw ValidationError("true parameters: need 'sigma2' for one factor or 'Sigma' for several");
  }

  void validate(const FactorSpec& spec) const {
    const auto m = static_cast<Eigen::Index>(spec.indicators());
    if (nu.size() != m || lambda.size() != m || psi.size() != m)
      throw ValidationError("true parameters: nu, lambda and psi must have length " + std::to_string(m));
    for (std::size_t j = 0; j < spec.indicators(); ++j)
      if (spec.is_reference(j) && lambda(static_cast<Eigen::Index>(j)) != 1.0)
        throw ValidationError("true parameters: reference loading lambda" + spec.indicator_label(j) + " must equal 1");
    if ((psi.array() <= 0.0).any()) throw ValidationError("true parameters: psi entries must be positive");
    const auto cov = factor_covariance(spec.factors());
    if (cov.rows() != static_cast<Eigen::Index>(spec.factors()) || cov.cols() != cov.rows())
      throw ValidationError("true parameters: factor covariance has the wrong dimension");
    if (spec.factors() == 1) {
      if (!(cov(0, 0) > 0.0)) throw ValidationError("true parameters: sigma2 must be positive");
    } else if (!is_spd(cov)) {
      throw ValidationError("true parameters: Sigma must be symmetric positive definite");
    }
  }
};

inline TrueParameters true_parameters_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ValidationError("true parameters: expected a JSON object");
  for (const char* key : {"nu", "lambda", "psi"})
    if (!j.contains(key)) throw ValidationError(std::string("true parameters: missing '") + key + "'");
  TrueParameters t;
  t.nu = detail::vector_from_json(j.at("nu"), "nu");
  t.lambda = detail::vector_from_json(j.at("lambda"), "lambda");
  t.psi = detail::vector_from_json(j.at("psi"), "psi");
  if (j.contains("sigma2")) t.sigma2 = detail::number_field(j, "sigma2");
  if (j.contains("Sigma")) t.Sigma = detail::matrix_from_json(j["Sigma"], "Sigma");
  return t;
}

inline nlohmann::json to_json(const TrueParameters& t) {
  nlohmann::json j{{"nu", detail::vector_to_json(t.nu)},
                   {"lambda", detail::vector_to_json(t.lambda)},
                   {"psi", detail::vector_to_json(t.psi)}};
  if (t.sigma2) j["sigma2"] = *t.sigma2;
  if (t.Sigma) j["Sigma"] = detail::matrix_to_json(*t.Sigma);
  return j;
}

// ---------------------------------------------------------------------------
// Parameter naming

/// Names of the structural parameters, in report order: intercepts, free
/// loadings, error variances, then sigma2 (one factor) or the upper
/// triangle of Sigma.
inline std::vector<std::string> structural_parameter_names(const FactorSpec& spec) {
  std::vector<std::string> out;
  const std::size_t m = spec.indicators();
  for (std::size_t j = 0; j < m; ++j) out.push_back("nu" + spec.indicator_label(j));
  for (std::size_t j = 0; j < m; ++j)
    if (!spec.is_reference(j)) out.push_back("lambda" + spec.indicator_label(j));
  for (std::size_t j = 0; j < m; ++j) out.push_back("psi" + spec.indicator_label(j));
  if (spec.single_factor()) {
    out.push_back("sigma2");
  } else {
    for (std::size_t r = 0; r < spec.factors(); ++r)
      for (std::size_t c = r; c < spec.factors(); ++c)
        out.push_back("Sigma[" + std::to_string(r + 1) + "][" + std::to_string(c + 1) + "]");
  }
  return out;
}

inline ParameterMap truth_map(const TrueParameters& t, const FactorSpec& spec) {
  t.validate(spec);
  ParameterMap out;
  const std::size_t m = spec.indicators();
  for (std::size_t j = 0; j < m; ++j) out.set("nu" + spec.indicator_label(j), t.nu(static_cast<Eigen::Index>(j)));
  for (std::size_t j = 0; j < m; ++j)
    if (!spec.is_reference(j)) out.set("lambda" + spec.indicator_label(j), t.lambda(static_cast<Eigen::Index>(j)));
  for (std::size_t j = 0; j < m; ++j) out.set("psi" + spec.indicator_label(j), t.psi(static_cast<Eigen::Index>(j)));
  const auto cov = t.factor_covariance(spec.factors());
  if (spec.single_factor()) {
    out.set("sigma2", cov(0, 0));
  } else {
    for (Eigen::Index r = 0; r < cov.rows(); ++r)
      for (Eigen::Index c = r; c < cov.cols(); ++c)
        out.set("Sigma[" + std::to_string(r + 1) + "][" + std::to_string(c + 1) + "]", cov(r, c));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Loading matrix and simulation

/// m x p loading matrix: column k carries block k's loadings, zeros elsewhere.
inline Eigen::MatrixXd block_diagonal_loading(const Eigen::VectorXd& lambda, const FactorSpec& spec) {
  const auto m = static_cast<Eigen::Index>(spec.indicators());
  if (lambda.size() != m) throw ValidationError("loading vector length does not match the spec");
  Eigen::MatrixXd out = Eigen::MatrixXd::Zero(m, static_cast<Eigen::Index>(spec.factors()));
  for (std::size_t j = 0; j < spec.indicators(); ++j) {
    const auto jj = static_cast<Eigen::Index>(j);
    if (spec.is_reference(j) && lambda(jj) != 1.0)
      throw ValidationError("reference loading lambda" + spec.indicator_label(j) + " must equal 1");
    out(jj, static_cast<Eigen::Index>(spec.factor_of(j))) = lambda(jj);
  }
  return out;
}

/// y_i = nu + Lambda eta_i + eps_i with eta_i ~ N(0, Sigma), eps_i ~ N(0, diag(psi)).
inline Dataset simulate(const TrueParameters& params, const FactorSpec& spec, std::size_t n, Rng& rng) {
  if (n < 2) throw ValidationError("simulate: n must be at least 2");
  params.validate(spec);
  const auto p = static_cast<Eigen::Index>(spec.factors());
  const auto m = static_cast<Eigen::Index>(spec.indicators());
  const Eigen::MatrixXd loading = block_diagonal_loading(params.lambda, spec);
  const Eigen::MatrixXd cov = params.factor_covariance(spec.factors());
  Eigen::MatrixXd chol;
  if (p == 1) {
    chol = Eigen::MatrixXd::Constant(1, 1, std::sqrt(cov(0, 0)));
  } else {
    auto llt = spd_cholesky(cov);
    if (!llt) throw LinearAlgebraError("simulate: Sigma is not symmetric positive definite");
    chol = llt->matrixL();
  }
  const Eigen::VectorXd noise_sd = params.psi.array().sqrt();
  std::normal_distribution<double> normal;
  Eigen::MatrixXd y(static_cast<Eigen::Index>(n), m);
  Eigen::VectorXd z(p);
  Eigen::VectorXd e(m);
  for (Eigen::Index i = 0; i < static_cast<Eigen::Index>(n); ++i) {
    for (Eigen::Index k = 0; k < p; ++k) z(k) = normal(rng);
    for (Eigen::Index j = 0; j < m; ++j) e(j) = normal(rng);
    const Eigen::VectorXd eta = chol * z;
    y.row(i) = (params.nu + loading * eta + noise_sd.cwiseProduct(e)).transpose();
  }
  return Dataset(std::move(y), spec);
}

}  // namespace semvb
