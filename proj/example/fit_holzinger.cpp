// Fit the visual-perception factor (x1..x3) by MFVB and by Gibbs sampling,
// then compare the two posterior approximations parameter by parameter.

#include <cstdio>
#include <string>

#include "semvb/semvb.hpp"

int main(int argc, char** argv) {
  const std::string dir = argc > 1 ? argv[1] : SEMVB_DATA_DIR;
  const auto spec = semvb::load_factor_spec(dir + "/visual_spec.json");
  const auto data = semvb::load_csv(dir + "/holzinger_swineford.csv", spec);
  const semvb::Hyperparameters hyper;

  const auto fit = semvb::fit_model(data, hyper);
  std::printf("MFVB: %d iterations, %.3g ms\n", fit.iterations, fit.wall_time_seconds * 1e3);

  semvb::ChainConfig chain;
  chain.seed = 20;
  const auto draws = semvb::gibbs(data, hyper, chain);

  const auto vb = semvb::mfvb_intervals(fit, 0.05);
  const auto mc = semvb::mcmc_intervals(draws, spec, 0.05);
  std::printf("%-10s %9s %9s %9s %9s %9s\n", "parameter", "q mean", "q sd", "mcmc", "mcmc sd", "accuracy");
  for (const auto& q : semvb::q_marginals(fit)) {
    const auto m = semvb::column_moments(draws, q.name);
    const auto samples = draws.column(q.name);
    const auto ref = semvb::kde(samples);
    const auto qg = semvb::tabulate([&](double t) { return semvb::q_density(q, t); }, ref.x);
    std::printf("%-10s %9.4f %9.4f %9.4f %9.4f %9.1f\n", q.name.c_str(), semvb::q_mean(q), semvb::q_sd(q), m.mean, m.sd,
                semvb::accuracy(qg, ref));
  }
  std::printf("\n95%% intervals\n");
  for (const auto& r : vb) {
    const auto& s = semvb::find_interval(mc, r.parameter);
    std::printf("%-10s mfvb [%.3f, %.3f]  mcmc [%.3f, %.3f]\n", r.parameter.c_str(), r.lower, r.upper, s.lower, s.upper);
  }
}
