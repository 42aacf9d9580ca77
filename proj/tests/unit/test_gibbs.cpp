#include <sstream>

#include <gtest/gtest.h>

#include "support.hpp"

using namespace semvb;

namespace {

ChainConfig short_chain(std::uint64_t seed, int iterations = 4000, int burn_in = 1000) {
  ChainConfig c;
  c.iterations = iterations;
  c.burn_in = burn_in;
  c.seed = seed;
  return c;
}

ChainDraws counting_draws(std::size_t count) {
  ChainDraws d;
  d.names = {"x", "c"};
  Eigen::MatrixXd m(static_cast<Eigen::Index>(count), 2);
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    m(r, 0) = static_cast<double>(count - static_cast<std::size_t>(r));  // reversed, summary must sort
    m(r, 1) = 3.25;
  }
  d.chains.push_back(m);
  return d;
}

}  // namespace

TEST(GibbsSingle, AgreesWithVariationalMeansAtModerateN) {
  const auto d = testing_support::simulate_one_factor(200, 3, 31);
  const auto fit = fit_single(d, {}, {1e-8, 100000});
  const auto draws = gibbs_single(d, {}, short_chain(7, 20000, 5000));
  const auto est = point_estimates(fit);
  for (const auto& name : {"nu[1]", "nu[2]", "nu[3]", "lambda[2]", "lambda[3]"}) {
    const auto mom = column_moments(draws, name);
    EXPECT_LT(std::abs(est.at(name) - mom.mean), 0.5 * mom.sd) << name;
  }
}

TEST(GibbsSingle, RaoBlackwellMeanOfNuMatchesDrawMean) {
  const auto d = testing_support::simulate_one_factor(50, 3, 14);
  const Hyperparameters h;
  auto cfg = short_chain(9, 20000, 2000);
  cfg.keep_eta = true;
  const auto draws = gibbs_single(d, h, cfg);
  const auto& c = draws.chains[0];
  for (Eigen::Index j = 0; j < 3; ++j) {
    const std::string tag = "[" + std::to_string(j + 1) + "]";
    const auto ilam = draws.index_of("lambda" + tag),
               ipsi = draws.index_of("psi" + tag), ieta = draws.index_of("eta[1]");
    double rb = 0.0;
    for (Eigen::Index r = 0; r < c.rows(); ++r) {
      const double psi = c(r, ipsi), lam = c(r, ilam);
      double s = 0.0;
      for (Eigen::Index i = 0; i < 50; ++i) s += d.y(i, j) - lam * c(r, ieta + i);
      rb += (s / psi) / (50.0 / psi + 1.0 / h.sigma2_nu);
    }
    rb /= static_cast<double>(c.rows());
    const auto mom = column_moments(draws, "nu" + tag);
    // generous Monte Carlo allowance for autocorrelated draws
    EXPECT_NEAR(rb, mom.mean, 10.0 * mom.sd / std::sqrt(static_cast<double>(c.rows()))) << tag;
  }
}

TEST(GibbsSingle, SupportAndReferenceLoading) {
  const auto d = testing_support::simulate_one_factor(40, 4, 2);
  auto cfg = short_chain(3, 2000, 500);
  cfg.keep_eta = true;
  const auto draws = gibbs_single(d, {}, cfg);
  EXPECT_EQ(draws.total(), 1500u);
  EXPECT_TRUE(draws.contains("eta[40]"));
  for (double v : draws.column("lambda[1]")) ASSERT_EQ(v, 1.0);
  for (const auto& name : {"psi[1]", "psi[4]", "sigma2"})
    for (double v : draws.column(name)) ASSERT_GT(v, 0.0) << name;
}

TEST(GibbsSingle, SameSeedSameDrawsAcrossThreadCounts) {
  const auto d = testing_support::simulate_one_factor(30, 3, 9);
  auto cfg = short_chain(11, 1500, 500);
  cfg.chains = 3;
  cfg.threads = 1;
  const auto a = gibbs_single(d, {}, cfg);
  cfg.threads = 3;
  const auto b = gibbs_single(d, {}, cfg);
  ASSERT_EQ(a.chains.size(), 3u);
  for (std::size_t c = 0; c < 3; ++c) EXPECT_TRUE(a.chains[c] == b.chains[c]);
  EXPECT_FALSE(a.chains[0] == a.chains[1]);
  cfg.seed = 12;
  EXPECT_FALSE(gibbs_single(d, {}, cfg).chains[0] == a.chains[0]);
}

TEST(GibbsSingle, ThinningKeepsEveryKthDraw) {
  const auto d = testing_support::simulate_one_factor(30, 3, 9);
  auto cfg = short_chain(4, 1000, 100);
  const auto full = gibbs_single(d, {}, cfg);
  cfg.thin = 3;
  const auto thin = gibbs_single(d, {}, cfg);
  ASSERT_EQ(thin.total(), 300u);
  for (Eigen::Index r = 0; r < 300; ++r) EXPECT_TRUE(thin.chains[0].row(r) == full.chains[0].row(3 * r + 2));
}

TEST(GibbsMulti, OneFactorMatchesScalarSamplerUnderMatchedPrior) {
  // a 1 x 1 Inverse G-Wishart(xi, L) prior is Inverse-chi-squared(xi, L)
  const auto d = testing_support::simulate_one_factor(60, 3, 17);
  Hyperparameters h;
  h.xi_Sigma = h.kappa_sigma2;
  h.Lambda_Sigma = Eigen::MatrixXd::Constant(1, 1, h.delta_sigma2);
  const auto cfg = short_chain(5, 30000, 5000);
  const auto a = gibbs_single(d, h, cfg);
  const auto b = gibbs_multi(d, h, cfg);
  const auto s = a.column("sigma2"), S = b.column("Sigma[1][1]");
  // autocorrelated chains: compare with a loose two-sample bound and a moment check
  EXPECT_LT(testing_support::ks_two_sample(s, S), 0.05);
  for (const auto& name : {"nu[2]", "lambda[2]", "psi[3]"}) {
    const auto ma = column_moments(a, name), mb = column_moments(b, name);
    EXPECT_NEAR(ma.mean, mb.mean, 0.1 * ma.sd) << name;
  }
}

TEST(GibbsMulti, CoversGeneratingValuesAndStaysSpd) {
  const auto spec = FactorSpec::with_sizes({3, 3});
  const auto truth = testing_support::multi_factor_truth(spec, 0.4);
  Rng rng = make_stream(8, "gibbs-cover");
  const auto d = simulate(truth, spec, 200, rng);
  const auto draws = gibbs_multi(d, {}, short_chain(2, 12000, 3000));
  for (Eigen::Index r = 0; r < draws.chains[0].rows(); ++r) {
    Eigen::Matrix2d S;
    S << draws.chains[0](r, draws.index_of("Sigma[1][1]")), draws.chains[0](r, draws.index_of("Sigma[1][2]")),
        draws.chains[0](r, draws.index_of("Sigma[1][2]")), draws.chains[0](r, draws.index_of("Sigma[2][2]"));
    ASSERT_TRUE(is_spd(S));
  }
  for (double v : draws.column("lambda[2][1]")) ASSERT_EQ(v, 1.0);
  const auto t = truth_map(truth, spec);
  const auto ci = mcmc_intervals(draws, spec, 0.05);
  std::size_t covered = 0;
  for (const auto& r : ci) covered += r.covers(t.at(r.parameter));
  EXPECT_EQ(ci.size(), t.size());
  EXPECT_GE(static_cast<double>(covered), 0.8 * static_cast<double>(ci.size()));
}

TEST(GibbsMulti, EverySeedFindsTheSameSignForEachBlock) {
  // guards the start: a prior-drawn first loading can flip a block for good
  const auto spec = FactorSpec::with_sizes({3, 3});
  Rng rng = make_stream(8, "gibbs-cover");
  const auto d = simulate(testing_support::multi_factor_truth(spec, 0.4), spec, 200, rng);
  const auto fit = point_estimates(fit_multi(d, {}));
  for (std::uint64_t seed = 1; seed <= 12; ++seed) {
    const auto draws = gibbs_multi(d, {}, short_chain(seed, 1500, 500));
    for (const auto& name : {"lambda[1][2]", "lambda[1][3]", "lambda[2][2]", "Sigma[1][2]"}) {
      const auto mom = column_moments(draws, name);
      EXPECT_LT(std::abs(mom.mean - fit.at(name)), 3.0 * mom.sd) << name << " seed " << seed;
    }
  }
}

TEST(GibbsConfig, RejectsBadSettings) {
  const auto d = testing_support::simulate_one_factor(20, 3, 1);
  auto bad = [&](auto mutate) {
    auto c = short_chain(1, 200, 100);
    mutate(c);
    EXPECT_THROW(gibbs_single(d, {}, c), ValidationError);
  };
  bad([](ChainConfig& c) { c.iterations = 0; });
  bad([](ChainConfig& c) { c.burn_in = 200; });
  bad([](ChainConfig& c) { c.burn_in = -1; });
  bad([](ChainConfig& c) { c.chains = 0; });
  bad([](ChainConfig& c) { c.thin = 0; });
  const Dataset two(Eigen::MatrixXd::Random(20, 4), FactorSpec::with_sizes({2, 2}));
  EXPECT_THROW(gibbs_single(two, {}, short_chain(1, 200, 100)), ValidationError);
}

TEST(ChainSummary, OrderStatisticsOfKnownSample) {
  const auto d = counting_draws(10000);
  const auto s = chain_summary(d, 0.05, {"x"});
  ASSERT_EQ(s.size(), 1u);
  EXPECT_DOUBLE_EQ(s[0].point, 5000.5);
  EXPECT_NEAR(s[0].lower, 1.0 + 9999.0 * 0.025, 1e-9);
  EXPECT_NEAR(s[0].upper, 1.0 + 9999.0 * 0.975, 1e-9);
  EXPECT_EQ(s[0].count, 10000u);
  const auto med = chain_summary(d, 1.0, {"x"});
  EXPECT_DOUBLE_EQ(med[0].lower, 5000.5);
  EXPECT_DOUBLE_EQ(med[0].upper, 5000.5);
}

TEST(ChainSummary, ConstantColumnAndErrors) {
  const auto d = counting_draws(100);
  const auto c = find_interval(chain_summary(d), "c");
  EXPECT_EQ(c.lower, 3.25);
  EXPECT_EQ(c.upper, 3.25);
  EXPECT_EQ(c.point, 3.25);
  EXPECT_THROW(chain_summary(counting_draws(99)), ValidationError);
  EXPECT_THROW(chain_summary(d, 0.0), ValidationError);
  EXPECT_THROW(chain_summary(d, 0.05, {"y"}), ValidationError);
}

TEST(ChainSummary, PoolsChains) {
  auto d = counting_draws(100);
  d.chains.push_back(d.chains[0].array() + 100.0);
  const auto x = find_interval(chain_summary(d), "x");
  EXPECT_DOUBLE_EQ(x.point, 100.5);
  EXPECT_EQ(d.column("x").size(), 200u);
}

TEST(DrawsCsv, RoundTripIsExact) {
  const auto d = testing_support::simulate_one_factor(25, 3, 6);
  auto cfg = short_chain(1, 400, 100);
  cfg.chains = 2;
  const auto draws = gibbs_single(d, {}, cfg);
  std::stringstream ss;
  write_draws_csv(ss, draws);
  const auto back = read_draws_csv(ss);
  EXPECT_EQ(back.names, draws.names);
  ASSERT_EQ(back.chains.size(), 2u);
  for (std::size_t c = 0; c < 2; ++c) EXPECT_TRUE(back.chains[c] == draws.chains[c]);
}

TEST(DrawsCsv, MalformedInput) {
  std::stringstream empty;
  EXPECT_THROW(read_draws_csv(empty), IngestError);
  std::stringstream header("a,b,c\n1,2,3\n");
  EXPECT_THROW(read_draws_csv(header), IngestError);
  std::stringstream cells("chain,draw,x\n1,1,0.5\n1,2\n");
  EXPECT_THROW(read_draws_csv(cells), IngestError);
  std::stringstream text("chain,draw,x\n1,1,abc\n");
  EXPECT_THROW(read_draws_csv(text), IngestError);
}

TEST(DrawsSummaryJson, ListsEveryColumn) {
  const auto d = counting_draws(200);
  ChainConfig cfg;
  const auto j = draws_summary_json(d, cfg);
  EXPECT_EQ(j["order"].size(), 2u);
  EXPECT_DOUBLE_EQ(j["parameters"]["x"]["mean"].get<double>(), 100.5);
  EXPECT_DOUBLE_EQ(j["parameters"]["c"]["sd"].get<double>(), 0.0);
}
