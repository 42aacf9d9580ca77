// sem_vb: fit, sample, resample and study Bayesian confirmatory factor models.

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <openssl/evp.h>

#include "semvb/semvb.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitError = 1;
constexpr int kExitWarnings = 2;

std::string sha256_hex(const std::string& bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  if (!ctx || EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr) != 1 ||
      EVP_DigestUpdate(ctx, bytes.data(), bytes.size()) != 1 || EVP_DigestFinal_ex(ctx, digest, &len) != 1) {
    EVP_MD_CTX_free(ctx);
    throw semvb::Error("sha256 failed");
  }
  EVP_MD_CTX_free(ctx);
  std::ostringstream s;
  for (unsigned int i = 0; i < len; ++i) s << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(digest[i]);
  return s.str();
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw semvb::IngestError("cannot open '" + p.string() + "'");
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

std::string utc_now() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

// Keys whose values depend on the clock, not on the inputs.
const std::set<std::string> kVolatileKeys{"wall_time_seconds", "started_at", "finished_at", "timing"};

void strip_volatile(json& j) {
  if (j.is_object()) {
    for (auto it = j.begin(); it != j.end();) {
      if (kVolatileKeys.count(it.key())) {
        it = j.erase(it);
      } else {
        strip_volatile(*it);
        ++it;
      }
    }
  } else if (j.is_array()) {
    for (auto& e : j) strip_volatile(e);
  }
}

/// Hash of an output with clock-dependent content removed; nullopt for
/// files that are entirely timing data.
std::optional<std::string> content_hash(const fs::path& p) {
  if (p.filename() == "timing.csv") return std::nullopt;
  const std::string bytes = read_file(p);
  if (p.extension() == ".json") {
    json j = json::parse(bytes);
    strip_volatile(j);
    return sha256_hex(j.dump());
  }
  return sha256_hex(bytes);
}

struct Run {
  std::string command;
  std::vector<std::string> argv;  // tokens after the subcommand, --out excluded
  json options = json::object();
  std::vector<std::string> inputs;
  std::uint64_t seed = 0;
  bool seeded = false;
  fs::path out;
  std::vector<fs::path> written;
  std::string started_at;

  void write(const fs::path& rel, const std::string& text) {
    const fs::path p = out / rel;
    fs::create_directories(p.parent_path());
    semvb::detail::write_text(p, text);
    written.push_back(p);
  }
  void write_json(const fs::path& rel, const json& j) { write(rel, j.dump(2) + "\n"); }
};

void write_manifest(Run& run, int exit_code) {
  json inputs = json::object();
  for (const auto& in : run.inputs) inputs[in] = sha256_hex(read_file(in));
  json outputs = json::object();
  std::vector<fs::path> files = run.written;
  std::sort(files.begin(), files.end());
  for (const auto& f : files) {
    const auto h = content_hash(f);
    outputs[fs::relative(f, run.out).generic_string()] = h ? json(*h) : json("volatile");
  }
  json m{{"tool", "sem_vb"},
         {"version", semvb::kVersion},
         {"command", run.command},
         {"argv", run.argv},
         {"options", run.options},
         {"inputs", inputs},
         {"outputs", outputs},
         {"exit_code", exit_code},
         {"started_at", run.started_at},
         {"finished_at", utc_now()}};
  m["seed"] = run.seeded ? json(run.seed) : json(nullptr);
  semvb::detail::write_text(run.out / "manifest.json", m.dump(2) + "\n");
}

fs::path default_out(const std::string& command) {
  if (const char* env = std::getenv("SEMVB_OUT"); env && *env) return fs::path(env) / command;
  return fs::path("semvb_out") / command;
}

semvb::Hyperparameters load_hyper(const std::string& path) {
  if (path.empty()) return {};
  return semvb::hyperparameters_from_json(semvb::read_json_file(path));
}

semvb::Dataset load_data(const std::string& data, const std::string& spec_path, std::vector<std::string>& warnings) {
  const auto spec = semvb::load_factor_spec(spec_path);
  return semvb::load_csv(data, spec, &warnings);
}

std::string estimates_csv(const semvb::FitReport& r) {
  std::ostringstream s;
  s << "parameter,estimate,q_sd\n";
  for (const auto& q : semvb::q_marginals(r)) {
    std::string sd;
    try {
      sd = semvb::format_double(semvb::q_sd(q));
    } catch (const semvb::UndefinedMomentError&) {
      sd = "nan";
    }
    s << q.name << ',' << semvb::format_double(semvb::q_mean(q)) << ',' << sd << '\n';
  }
  return s.str();
}

std::string intervals_csv(const semvb::IntervalSet& set) {
  std::ostringstream s;
  semvb::write_intervals_csv(s, set);
  return s.str();
}

// ---------------------------------------------------------------------------
// Subcommands

struct FitArgs {
  std::string data, spec, hyper;
  double tol = 0.01;
  int max_iter = 10000;
  int patience = 2;
  bool grids = false;
  std::size_t grid_size = 512;
};

int cmd_fit(const FitArgs& a, Run& run) {
  std::vector<std::string> warnings;
  const auto data = load_data(a.data, a.spec, warnings);
  const auto hyper = load_hyper(a.hyper);
  run.inputs = {a.data, a.spec};
  if (!a.hyper.empty()) run.inputs.push_back(a.hyper);
  run.options = {{"data", a.data}, {"spec", a.spec}, {"hyper", semvb::to_json(hyper, data.spec.factors())},
                 {"tol", a.tol},   {"max_iter", a.max_iter}, {"patience", a.patience}, {"grids", a.grids}, {"grid_size", a.grid_size}};
  const auto report = semvb::fit_model(data, hyper, {a.tol, a.max_iter, a.patience});
  std::vector<std::pair<std::string, std::string>> grids;
  if (a.grids) {
    for (const auto& q : semvb::q_marginals(report)) {
      if (q.family == semvb::QMarginal::Family::wishart_offdiag) continue;
      auto x = semvb::linspace(semvb::q_quantile(q, 1e-6), semvb::q_quantile(q, 1.0 - 1e-6), a.grid_size);
      std::ostringstream s;
      semvb::write_density_csv(s, semvb::tabulate([&](double t) { return semvb::q_density(q, t); }, std::move(x)));
      grids.emplace_back(semvb::parameter_file_stem(q.name), s.str());
    }
  }
  for (const auto& w : warnings) std::cerr << "warning: " << w << '\n';
  run.write_json("fit.json", semvb::to_json(report));
  run.write("estimates.csv", estimates_csv(report));
  for (const auto& [stem, text] : grids) run.write(fs::path("grids") / (stem + ".csv"), text);
  std::cout << (report.converged ? "converged" : "did not converge") << " after " << report.iterations
            << " iterations (relative change " << semvb::format_double(report.final_relative_error) << ")\n";
  if (!report.converged) {
    std::cerr << "warning: max_iter reached before the relative change fell below " << a.tol << '\n';
    return kExitWarnings;
  }
  return kExitOk;
}

struct GibbsArgs {
  std::string data, spec, hyper;
  int iters = 15000, burnin = 7500, chains = 1, thin = 1;
  std::uint64_t seed = 1;
  bool keep_eta = false;
  double alpha = 0.05;
};

int cmd_gibbs(const GibbsArgs& a, unsigned threads, Run& run) {
  std::vector<std::string> warnings;
  const auto data = load_data(a.data, a.spec, warnings);
  const auto hyper = load_hyper(a.hyper);
  semvb::ChainConfig cfg{a.iters, a.burnin, a.chains, a.thin, a.seed, a.keep_eta, threads};
  cfg.validate();
  if (!(a.alpha > 0.0 && a.alpha <= 1.0)) throw semvb::ValidationError("--alpha must lie in (0, 1]");
  run.inputs = {a.data, a.spec};
  if (!a.hyper.empty()) run.inputs.push_back(a.hyper);
  run.seed = a.seed;
  run.seeded = true;
  run.options = {{"data", a.data},   {"spec", a.spec},     {"hyper", semvb::to_json(hyper, data.spec.factors())},
                 {"iters", a.iters}, {"burnin", a.burnin}, {"chains", a.chains},
                 {"thin", a.thin},   {"seed", a.seed},     {"keep_eta", a.keep_eta},
                 {"alpha", a.alpha}};
  const auto draws = semvb::gibbs(data, hyper, cfg);
  std::ostringstream csv;
  semvb::write_draws_csv(csv, draws);
  const auto summary = semvb::draws_summary_json(draws, cfg, a.alpha);
  for (const auto& w : warnings) std::cerr << "warning: " << w << '\n';
  run.write("draws.csv", csv.str());
  run.write_json("summary.json", summary);
  std::cout << draws.total() << " draws retained from " << a.chains << " chain(s)\n";
  return kExitOk;
}

struct IntervalArgs {
  std::string data, spec, hyper, method = "mfvb", pivotal_scale = "sd";
  std::size_t B = 1000;
  double alpha = 0.05, tol = 0.01;
  int max_iter = 10000;
  int patience = 2;
  std::uint64_t seed = 1;
  bool warm_start = false;
  int iters = 15000, burnin = 7500, chains = 1;
};

int cmd_intervals(const IntervalArgs& a, unsigned threads, Run& run) {
  static const std::set<std::string> methods{"mfvb", "percentile", "pivotal", "jackknife", "mcmc"};
  if (!methods.count(a.method)) throw semvb::ValidationError("--method must be one of mfvb, percentile, pivotal, jackknife, mcmc");
  if (a.pivotal_scale != "sd" && a.pivotal_scale != "variance")
    throw semvb::ValidationError("--pivotal-scale must be sd or variance");
  semvb::validate_alpha(a.alpha);
  std::vector<std::string> warnings;
  const auto data = load_data(a.data, a.spec, warnings);
  const auto hyper = load_hyper(a.hyper);
  run.inputs = {a.data, a.spec};
  if (!a.hyper.empty()) run.inputs.push_back(a.hyper);
  run.seed = a.seed;
  run.seeded = true;
  run.options = {{"data", a.data},     {"spec", a.spec},         {"hyper", semvb::to_json(hyper, data.spec.factors())},
                 {"method", a.method}, {"B", a.B},               {"alpha", a.alpha},
                 {"seed", a.seed},     {"tol", a.tol},           {"max_iter", a.max_iter}, {"patience", a.patience},
                 {"warm_start", a.warm_start}, {"pivotal_scale", a.pivotal_scale},
                 {"iters", a.iters},   {"burnin", a.burnin},     {"chains", a.chains}};
  const semvb::FitOptions fit{a.tol, a.max_iter, a.patience};
  semvb::IntervalSet set;
  std::vector<std::string> dropped;
  if (a.method == "mcmc") {
    semvb::ChainConfig cfg{a.iters, a.burnin, a.chains, 1, a.seed, false, threads};
    set = semvb::mcmc_intervals(semvb::gibbs(data, hyper, cfg), data.spec, a.alpha);
  } else {
    const auto base = semvb::fit_model(data, hyper, fit);
    if (!base.converged)
      throw semvb::NumericalError("base fit did not converge in " + std::to_string(base.iterations) +
                                  " iterations; raise --max-iter or --tol");
    if (a.method == "mfvb") {
      set = semvb::mfvb_intervals(base, a.alpha, a.seed);
    } else if (a.method == "jackknife") {
      semvb::JackknifeConfig jc{a.alpha, threads, fit, a.warm_start};
      set = semvb::jackknife_intervals(semvb::run_jackknife(data, hyper, jc, base), a.alpha, data.rows());
    } else {
      semvb::BootstrapConfig bc;
      bc.B = a.B;
      bc.alpha = a.alpha;
      bc.seed = a.seed;
      bc.threads = threads;
      bc.fit = fit;
      bc.warm_start = a.warm_start;
      bc.pivotal_scale = a.pivotal_scale == "sd" ? semvb::PivotalScale::sd : semvb::PivotalScale::variance;
      if (a.method == "pivotal") {
        // fail on undefined q variances before spending B refits
        for (const auto& q : semvb::q_marginals(base)) (void)semvb::q_sd(q);
      }
      const auto boot = semvb::run_bootstrap(data, hyper, bc, base);
      set = a.method == "percentile" ? semvb::percentile_intervals(boot, a.alpha, a.B)
                                     : semvb::pivotal_intervals(boot, a.alpha, a.B, bc.pivotal_scale);
      dropped = boot.drop_reasons;
    }
  }
  for (const auto& w : warnings) std::cerr << "warning: " << w << '\n';
  run.write("intervals.csv", intervals_csv(set));
  run.write_json("intervals.json", semvb::to_json(set));
  if (!dropped.empty()) {
    std::ostringstream s;
    for (const auto& d : dropped) s << "replicate " << d << '\n';
    run.write("dropped.log", s.str());
    std::cerr << "warning: " << dropped.size() << " bootstrap replicate(s) dropped (see dropped.log)\n";
  }
  std::cout << set.size() << " " << a.method << " intervals written\n";
  return dropped.empty() ? kExitOk : kExitWarnings;
}

struct SimulateArgs {
  std::string params, spec;
  std::size_t n = 301;
  std::uint64_t seed = 1;
};

int cmd_simulate(const SimulateArgs& a, Run& run) {
  const auto spec = semvb::load_factor_spec(a.spec);
  const auto truth = semvb::true_parameters_from_json(semvb::read_json_file(a.params));
  truth.validate(spec);
  run.inputs = {a.params, a.spec};
  run.seed = a.seed;
  run.seeded = true;
  run.options = {{"params", a.params}, {"spec", a.spec}, {"n", a.n}, {"seed", a.seed}};
  semvb::Rng rng = semvb::make_stream(a.seed, "simulate", 0);
  const auto data = semvb::simulate(truth, spec, a.n, rng);
  std::ostringstream s;
  semvb::write_csv(s, data);
  run.write("data.csv", s.str());
  run.write_json("truth.json", semvb::to_json(truth));
  std::cout << a.n << " rows simulated\n";
  return kExitOk;
}

struct StudyArgs {
  std::string config;
  std::optional<std::size_t> replicates;
  std::optional<std::uint64_t> seed;
  std::vector<std::size_t> B;
};

int cmd_study(const StudyArgs& a, unsigned threads, Run& run) {
  const fs::path cfg_path(a.config);
  auto cfg = semvb::study_config_from_json(semvb::read_json_file(a.config), cfg_path.parent_path());
  if (a.replicates) cfg.replicates = *a.replicates;
  if (a.seed) cfg.seed = *a.seed;
  if (!a.B.empty()) cfg.B = a.B;
  cfg.threads = threads;
  cfg.validate();
  run.inputs = {a.config};
  run.seed = cfg.seed;
  run.seeded = true;
  run.options = semvb::to_json(cfg);
  const auto res = semvb::run_study(cfg);
  fs::create_directories(run.out);
  const auto files = semvb::write_study_outputs(res, run.out);
  run.written.insert(run.written.end(), files.begin(), files.end());
  std::ostringstream cov;
  semvb::write_coverage_csv(cov, res.coverage);
  std::cout << cov.str();
  for (const auto& t : res.timing)
    std::cout << "timing " << t.method << ": median " << semvb::format_double(t.median)
              << (t.method.find("ratio") == std::string::npos ? " s\n" : "\n");
  if (!res.acceptable) {
    std::cerr << "error: more than " << cfg.max_failure_fraction * 100 << "% of replicates failed for some method"
              << " (see failures.log)\n";
    return kExitError;
  }
  return res.has_warnings() ? kExitWarnings : kExitOk;
}

struct AccuracyArgs {
  std::string fit, draws, grids;
  std::vector<std::string> params;
  std::size_t grid_size = 512;
};

semvb::DensityGrid read_density_csv(const fs::path& p) {
  std::istringstream in(read_file(p));
  std::string line;
  std::getline(in, line);
  std::vector<double> x, f;
  while (std::getline(in, line)) {
    if (semvb::detail::trim(line).empty()) continue;
    const auto cells = semvb::detail::split_csv_line(line);
    double a = 0, b = 0;
    if (cells.size() < 2 || !semvb::parse_double(cells[0], a) || !semvb::parse_double(cells[1], b))
      throw semvb::IngestError("'" + p.string() + "': expected numeric x,f rows");
    x.push_back(a);
    f.push_back(b);
  }
  return semvb::DensityGrid(std::move(x), std::move(f));
}

int cmd_accuracy(const AccuracyArgs& a, Run& run) {
  if (a.draws.empty() == a.grids.empty()) throw semvb::ValidationError("give exactly one of --draws or --grids");
  const auto report = semvb::fit_report_from_json(semvb::read_json_file(a.fit));
  std::vector<std::string> params = a.params;
  std::vector<std::string> available;
  for (const auto& q : semvb::q_marginals(report)) available.push_back(q.name);
  for (const auto& p : params)
    if (std::find(available.begin(), available.end(), p) == available.end())
      throw semvb::ValidationError("--params: unknown parameter '" + p + "'");
  run.inputs = {a.fit};
  run.options = {{"fit", a.fit}, {"draws", a.draws}, {"grids", a.grids}, {"params", params}, {"grid_size", a.grid_size}};
  std::ostringstream table;
  table << "parameter,accuracy\n";
  std::vector<std::pair<std::string, std::string>> bundles;
  if (!a.draws.empty()) {
    run.inputs.push_back(a.draws);
    std::istringstream in(read_file(a.draws));
    const auto draws = semvb::read_draws_csv(in, a.draws);
    if (params.empty())
      for (const auto& p : available)
        if (draws.contains(p)) params.push_back(p);
    for (const auto& p : params)
      if (!draws.contains(p)) throw semvb::ValidationError("no draws for parameter '" + p + "'");
    for (const auto& b : semvb::density_figure_export(report, &draws, nullptr, params, a.grid_size)) {
      table << b.parameter << ',' << semvb::format_double(b.accuracy_mfvb) << '\n';
      std::ostringstream s;
      semvb::write_density_bundle_csv(s, b);
      bundles.emplace_back(semvb::parameter_file_stem(b.parameter), s.str());
    }
  } else {
    if (params.empty())
      for (const auto& p : available)
        if (fs::exists(fs::path(a.grids) / (semvb::parameter_file_stem(p) + ".csv"))) params.push_back(p);
    if (params.empty()) throw semvb::ValidationError("no reference grids found under '" + a.grids + "'");
    for (const auto& p : params) {
      const fs::path file = fs::path(a.grids) / (semvb::parameter_file_stem(p) + ".csv");
      run.inputs.push_back(file.string());
      const auto ref = read_density_csv(file);
      const auto q = semvb::q_marginal(report, p);
      const auto qg = semvb::tabulate([&](double t) { return semvb::q_density(q, t); }, ref.x);
      table << p << ',' << semvb::format_double(semvb::accuracy(qg, ref)) << '\n';
      std::ostringstream s;
      s << "x,q_density,reference\n";
      for (std::size_t i = 0; i < ref.x.size(); ++i)
        s << semvb::format_double(ref.x[i]) << ',' << semvb::format_double(qg.f[i]) << ','
          << semvb::format_double(ref.f[i]) << '\n';
      bundles.emplace_back(semvb::parameter_file_stem(p), s.str());
    }
  }
  run.write("accuracy.csv", table.str());
  for (const auto& [stem, text] : bundles) run.write(fs::path("densities") / (stem + ".csv"), text);
  std::cout << table.str();
  return kExitOk;
}

// ---------------------------------------------------------------------------

int dispatch(std::vector<std::string> args);

struct ReplayArgs {
  std::string manifest;
};

int cmd_replay(const ReplayArgs& a, const std::string& out, const std::string& threads) {
  const auto m = semvb::read_json_file(a.manifest);
  if (!m.contains("command") || !m.contains("argv")) throw semvb::ValidationError("manifest lacks 'command' or 'argv'");
  const json inputs = m.value("inputs", json::object());
  for (const auto& [path, hash] : inputs.items())
    if (sha256_hex(read_file(path)) != hash.get<std::string>())
      throw semvb::ValidationError("input '" + path + "' changed since the manifest was written");
  std::vector<std::string> args{"sem_vb"};
  if (!threads.empty()) args.insert(args.end(), {"--threads", threads});
  args.push_back(m["command"].get<std::string>());
  for (const auto& t : m["argv"]) args.push_back(t.get<std::string>());
  if (!out.empty()) args.insert(args.end(), {"--out", out});
  return dispatch(std::move(args));
}

/// Subcommand tokens with any --out/-o value removed, for the manifest.
std::vector<std::string> replayable_tokens(const std::vector<std::string>& args, const std::string& command) {
  std::vector<std::string> out;
  auto it = std::find(args.begin(), args.end(), command);
  if (it == args.end()) return out;
  for (++it; it != args.end(); ++it) {
    if (*it == "--out" || *it == "-o") {
      if (std::next(it) != args.end()) ++it;
      continue;
    }
    if (it->rfind("--out=", 0) == 0) continue;
    out.push_back(*it);
  }
  return out;
}

int dispatch(std::vector<std::string> args) {
  CLI::App app{"Bayesian confirmatory factor analysis by mean-field variational Bayes", "sem_vb"};
  app.set_version_flag("--version", std::string("sem_vb ") + semvb::kVersion);
  app.require_subcommand(1);
  app.fallthrough();
  unsigned threads = 0;
  app.add_option("--threads", threads, "Worker threads for chains, replicates and refits (0 = all cores)");
  std::string out;

  auto add_out = [&](CLI::App* sub) {
    sub->add_option("-o,--out", out, "Output directory (default $SEMVB_OUT/<command> or ./semvb_out/<command>)");
  };
  auto add_data = [&](CLI::App* sub, std::string& data, std::string& spec, std::string& hyper) {
    sub->add_option("--data", data, "CSV file with a header row")->required();
    sub->add_option("--spec", spec, "Factor spec JSON")->required();
    sub->add_option("--hyper", hyper, "Hyperparameter JSON (defaults otherwise)");
  };

  FitArgs fit;
  auto* sfit = app.add_subcommand("fit", "Fit by coordinate-ascent MFVB");
  add_data(sfit, fit.data, fit.spec, fit.hyper);
  sfit->add_option("--tol", fit.tol, "Relative-change tolerance")->capture_default_str();
  sfit->add_option("--max-iter", fit.max_iter, "Iteration cap")->capture_default_str();
  sfit->add_option("--patience", fit.patience, "Consecutive sweeps below tol before stopping")->capture_default_str();
  sfit->add_flag("--grids", fit.grids, "Also export q-density grids");
  sfit->add_option("--grid-size", fit.grid_size, "Points per exported grid")->capture_default_str();
  add_out(sfit);

  GibbsArgs gib;
  auto* sgib = app.add_subcommand("gibbs", "Run the Gibbs sampler");
  add_data(sgib, gib.data, gib.spec, gib.hyper);
  sgib->add_option("--iters", gib.iters, "Iterations per chain")->capture_default_str();
  sgib->add_option("--burnin", gib.burnin, "Burn-in iterations per chain")->capture_default_str();
  sgib->add_option("--chains", gib.chains, "Independent chains")->capture_default_str();
  sgib->add_option("--thin", gib.thin, "Keep every thin-th draw")->capture_default_str();
  sgib->add_option("--seed", gib.seed, "Random seed")->capture_default_str();
  sgib->add_flag("--keep-eta", gib.keep_eta, "Also store latent score draws");
  sgib->add_option("--alpha", gib.alpha, "Level for the summary intervals")->capture_default_str();
  add_out(sgib);

  IntervalArgs iv;
  auto* siv = app.add_subcommand("intervals", "Credible intervals by MFVB, bootstrap, jackknife or MCMC");
  add_data(siv, iv.data, iv.spec, iv.hyper);
  siv->add_option("--method", iv.method, "mfvb | percentile | pivotal | jackknife | mcmc")->capture_default_str();
  siv->add_option("--B", iv.B, "Bootstrap replicates")->capture_default_str();
  siv->add_option("--alpha", iv.alpha, "1 - credible level")->capture_default_str();
  siv->add_option("--seed", iv.seed, "Random seed")->capture_default_str();
  siv->add_option("--tol", iv.tol, "MFVB tolerance")->capture_default_str();
  siv->add_option("--max-iter", iv.max_iter, "MFVB iteration cap")->capture_default_str();
  siv->add_option("--patience", iv.patience, "Consecutive sweeps below tol before stopping")->capture_default_str();
  siv->add_flag("--warm-start", iv.warm_start, "Start refits from the base fit");
  siv->add_option("--pivotal-scale", iv.pivotal_scale, "sd | variance")->capture_default_str();
  siv->add_option("--iters", iv.iters, "MCMC iterations per chain")->capture_default_str();
  siv->add_option("--burnin", iv.burnin, "MCMC burn-in")->capture_default_str();
  siv->add_option("--chains", iv.chains, "MCMC chains")->capture_default_str();
  add_out(siv);

  SimulateArgs sim;
  auto* ssim = app.add_subcommand("simulate", "Simulate a dataset from generating parameters");
  ssim->add_option("--params", sim.params, "Generating parameter JSON")->required();
  ssim->add_option("--spec", sim.spec, "Factor spec JSON")->required();
  ssim->add_option("--n", sim.n, "Rows")->capture_default_str();
  ssim->add_option("--seed", sim.seed, "Random seed")->capture_default_str();
  add_out(ssim);

  StudyArgs st;
  auto* sst = app.add_subcommand("study", "Run a coverage and timing simulation study");
  sst->add_option("--config", st.config, "Study config JSON")->required();
  sst->add_option("--replicates", st.replicates, "Override the replicate count");
  sst->add_option("--seed", st.seed, "Override the seed");
  sst->add_option("--B", st.B, "Override the bootstrap sizes");
  add_out(sst);

  AccuracyArgs acc;
  auto* sacc = app.add_subcommand("accuracy", "Accuracy of q densities against chain draws or reference grids");
  sacc->add_option("--fit", acc.fit, "fit.json from the fit command")->required();
  sacc->add_option("--draws", acc.draws, "draws.csv from the gibbs command");
  sacc->add_option("--grids", acc.grids, "Directory of x,f reference density CSVs");
  sacc->add_option("--params", acc.params, "Parameters to compare, comma separated (default: all available)")
      ->delimiter(',');
  sacc->add_option("--grid-size", acc.grid_size, "Points per density grid")->capture_default_str();
  add_out(sacc);

  ReplayArgs rp;
  auto* srp = app.add_subcommand("replay", "Re-run the command recorded in a manifest");
  srp->add_option("--manifest", rp.manifest, "manifest.json")->required();
  add_out(srp);

  std::vector<std::string> rev(args.rbegin(), args.rend() - 1);
  try {
    app.parse(rev);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitError;
  }

  CLI::App* sub = app.get_subcommands().front();
  const std::string command = sub->get_name();
  if (command == "replay") {
    std::string t;
    if (app.count("--threads")) t = std::to_string(threads);
    return cmd_replay(rp, out, t);
  }

  Run run;
  run.command = command;
  run.argv = replayable_tokens(args, command);
  run.out = out.empty() ? default_out(command) : fs::path(out);
  run.started_at = utc_now();
  const unsigned nthreads = semvb::resolve_threads(threads);

  int code = kExitOk;
  if (command == "fit") code = cmd_fit(fit, run);
  else if (command == "gibbs") code = cmd_gibbs(gib, nthreads, run);
  else if (command == "intervals") code = cmd_intervals(iv, nthreads, run);
  else if (command == "simulate") code = cmd_simulate(sim, run);
  else if (command == "study") code = cmd_study(st, nthreads, run);
  else if (command == "accuracy") code = cmd_accuracy(acc, run);
  if (!run.written.empty()) {
    write_manifest(run, code);
    std::cout << "outputs in " << run.out.string() << '\n';
  }
  return code;
}

}  // namespace

int main(int argc, char** argv) {
  std::vector<std::string> args(argv, argv + argc);
  try {
    return dispatch(std::move(args));
  } catch (const semvb::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
  } catch (const fs::filesystem_error& e) {
    std::cerr << "error: " << e.what() << '\n';
  } catch (const json::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
  }
  return kExitError;
}
