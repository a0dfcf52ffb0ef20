#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <unistd.h>

#include <CLI11.hpp>
#include <json.hpp>

#include "kfl/bench.hpp"
#include "kfl/config.hpp"
#include "kfl/koopman.hpp"
#include "kfl/observer.hpp"
#include "kfl/parallel.hpp"
#include "kfl/verify.hpp"

namespace fs = std::filesystem;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitFailure = 1;
constexpr int kExitUsage = 2;

std::string output_root(const std::string& flag, const std::string& from_config) {
  if (!flag.empty()) return flag;
  if (!from_config.empty()) return from_config;
  if (const char* env = std::getenv("KFL_OUT_ROOT"); env && *env) return env;
  return "runs";
}

std::string timestamp() {
  const std::time_t now = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&now, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y%m%dT%H%M%SZ");
  return os.str();
}

/// Staging directory inside `root`; publish() renames it to a fresh
/// "<stem>-<timestamp>[-n]" name so a completed run directory is never reused.
class RunDir {
 public:
  RunDir(const std::string& root, std::string stem) : root_(root), stem_(std::move(stem)) {
    fs::create_directories(root_);
    staging_ = root_ / (".staging-" + stem_ + "-" + std::to_string(::getpid()));
    fs::remove_all(staging_);
    fs::create_directory(staging_);
  }

  ~RunDir() {
    std::error_code ec;
    if (!published_) fs::remove_all(staging_, ec);
  }

  const fs::path& staging() const { return staging_; }

  fs::path publish() {
    const std::string base = stem_ + "-" + timestamp();
    for (int n = 0;; ++n) {
      const fs::path target = root_ / (n == 0 ? base : base + "-" + std::to_string(n));
      if (fs::exists(target)) continue;
      std::error_code ec;
      fs::rename(staging_, target, ec);
      if (!ec) {
        published_ = true;
        return target;
      }
      if (!fs::exists(target)) throw kfl::Error("cannot publish run directory: " + ec.message());
    }
  }

 private:
  fs::path root_;
  std::string stem_;
  fs::path staging_;
  bool published_ = false;
};

std::string g(double v) {
  std::ostringstream os;
  os << std::setprecision(6) << v;
  return os.str();
}

// ---- train ----

struct TrainArgs {
  std::string config;
  std::optional<std::uint64_t> seed;
  bool strict = false;
  bool audit = false;
  std::string out;
  unsigned jobs = 1;
};

int cmd_train(const TrainArgs& a) {
  kfl::config::RunConfig cfg = kfl::config::load_run_config(a.config);
  if (a.seed) cfg.seeds = {*a.seed};
  if (a.audit) cfg.audit = true;
  const std::string hash = kfl::config::config_hash(cfg);

  const std::size_t n = cfg.seeds.size();
  std::vector<kfl::bench::RunRecord> records(n);
  std::vector<std::string> errors(n);
  kfl::parallel_for(n, a.jobs, [&](std::size_t i) {
    kfl::bench::TrainOptions o;
    o.seed = cfg.seeds[i];
    o.config_hash = hash;
    o.audit = cfg.audit;
    o.audit_max_dim = cfg.audit_max_dim;
    o.steps = cfg.steps;
    try {
      records[i] = kfl::bench::train(cfg.task, cfg.learner, o);
    } catch (const kfl::Error& e) {
      errors[i] = e.what();
      records[i].run_id = kfl::bench::make_run_id(hash, o.seed);
      records[i].config_hash = hash;
      records[i].seed = o.seed;
      records[i].task = kfl::bench::task_name(cfg.task);
      records[i].learner = kfl::bench::learner_name(cfg.learner);
      records[i].diverged = true;
    }
  });

  RunDir dir(output_root(a.out, cfg.output_dir), hash);
  kfl::bench::export_metrics(records, dir.staging().string());
  kfl::bench::write_file_atomically((dir.staging() / "config.json").string(),
                                    kfl::config::canonical_json(cfg) + "\n");
  const fs::path final_dir = dir.publish();

  bool violation = false;
  for (std::size_t i = 0; i < n; ++i) {
    const auto& r = records[i];
    std::cout << r.run_id << "  " << r.task << "  " << r.learner;
    if (!errors[i].empty()) {
      std::cout << "  error: " << errors[i] << "\n";
      violation = true;
      continue;
    }
    const auto it = r.final_metrics.find("final_loss");
    if (it != r.final_metrics.end()) std::cout << "  final_loss=" << g(it->second);
    if (r.diverged) std::cout << "  DIVERGED";
    std::cout << "\n";
    violation = violation || r.diverged;
  }
  std::cout << "run directory: " << final_dir.string() << std::endl;
  if (violation && a.strict) {
    std::cerr << "kfl train: invariant violation with --strict" << std::endl;
    return kExitFailure;
  }
  return kExitOk;
}

// ---- verify ----

int cmd_verify(const std::string& suite, const std::vector<std::string>& faults, unsigned jobs,
               std::optional<std::uint64_t> seed) {
  kfl::verify::VerifyOptions o;
  o.jobs = jobs;
  if (seed) o.seed = *seed;
  for (const auto& f : faults) {
    if (f == "skip-symmetrization") o.faults.skip_symmetrization = true;
    else if (f == "drop-joseph-noise") o.faults.drop_joseph_noise_term = true;
  }
  const auto t0 = std::chrono::steady_clock::now();
  const auto results = kfl::verify::run_suite(suite, o);
  int passed = 0;
  for (const auto& r : results) {
    std::cout << kfl::verify::format(r) << std::endl;
    passed += r.passed ? 1 : 0;
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::cout << passed << "/" << results.size() << " criteria passed in " << std::fixed
            << std::setprecision(2) << secs << " s" << std::endl;
  return passed == static_cast<int>(results.size()) ? kExitOk : kExitFailure;
}

// ---- koopman-fit ----

int cmd_koopman_fit(const std::string& trajectory, const std::string& dict_spec,
                    std::optional<double> lambda, const std::string& out) {
  if (!fs::exists(trajectory)) {
    throw kfl::config::ConfigError("trajectory file '" + trajectory + "' does not exist");
  }
  const auto traj = kfl::bench::read_trajectory_csv(trajectory);
  if (traj.states.size() < 2) throw kfl::config::ConfigError("trajectory needs at least two states");
  const kfl::Index n = traj.states.front().size();
  kfl::koopman::Dictionary dict = [&] {
    try {
      return kfl::koopman::Dictionary::from_spec(dict_spec, n);
    } catch (const kfl::Error& e) {
      throw kfl::config::ConfigError(std::string("dictionary: ") + e.what());
    }
  }();
  const auto pairs = kfl::koopman::snapshot_pairs(traj.states);
  kfl::koopman::EdmdFit fit;
  try {
    fit = kfl::koopman::edmd_fit(pairs, dict, lambda);
  } catch (const kfl::SingularError& e) {
    throw kfl::config::ConfigError(std::string("EDMD refused: ") + e.what());
  }
  const auto spec = kfl::koopman::spectrum(fit.K);

  const auto names = dict.names();
  std::cout << "observables:";
  for (const auto& nm : names) std::cout << " " << nm;
  std::cout << "\nK =\n" << fit.K << "\n";
  std::cout << "pairs " << pairs.size() << ", residual " << g(fit.residual) << ", relative "
            << g(fit.relative_residual) << ", lambda " << g(fit.regularization) << "\n";
  std::cout << "spectral radius " << g(spec.spectral_radius) << (spec.unstable ? " (unstable)" : "")
            << ", modal condition " << g(spec.modal_condition) << std::endl;

  if (!out.empty()) {
    nlohmann::json j;
    j["schema_version"] = kfl::bench::kSchemaVersion;
    j["dictionary"] = dict_spec;
    j["observables"] = names;
    nlohmann::json K = nlohmann::json::array();
    for (kfl::Index i = 0; i < fit.K.rows(); ++i) {
      std::vector<double> row(fit.K.cols());
      for (kfl::Index k = 0; k < fit.K.cols(); ++k) row[k] = fit.K(i, k);
      K.push_back(row);
    }
    j["K"] = K;
    j["residual"] = fit.residual;
    j["relative_residual"] = fit.relative_residual;
    j["regularization"] = fit.regularization;
    j["spectral_radius"] = spec.spectral_radius;
    nlohmann::json ev = nlohmann::json::array();
    for (const auto& z : spec.eigenvalues) ev.push_back({z.real(), z.imag()});
    j["eigenvalues"] = ev;
    kfl::bench::write_file_atomically(out, j.dump(2) + "\n");
  }
  return kExitOk;
}

// ---- observer-demo ----

int cmd_observer_demo(const std::string& config_path, std::optional<std::uint64_t> seed,
                      unsigned jobs, const std::string& out, int num_seeds) {
  kfl::bench::TeacherStream ts;
  std::vector<std::uint64_t> seeds;
  std::string cfg_out;
  if (!config_path.empty()) {
    const auto cfg = kfl::config::load_run_config(config_path);
    const auto* t = std::get_if<kfl::bench::TeacherStream>(&cfg.task);
    if (!t) throw kfl::config::ConfigError(config_path + ": observer-demo needs task.type teacher_stream");
    ts = *t;
    seeds = cfg.seeds;
    cfg_out = cfg.output_dir;
  }
  if (seed || seeds.empty()) {
    const std::uint64_t s0 = seed.value_or(0);
    seeds.clear();
    for (int i = 0; i < num_seeds; ++i) seeds.push_back(s0 + static_cast<std::uint64_t>(i));
  }
  const auto dec = kfl::observer::make_random_decoder(ts.hidden_dim, ts.vocab, ts.decoder_seed,
                                                      ts.recurrent_scale, ts.embedding_scale,
                                                      ts.emission_scale, ts.q);
  kfl::observer::ShiftConfig sc;
  sc.T = ts.T;
  sc.dropout = ts.dropout;
  sc.vocab_perturb = ts.vocab_perturb;
  const auto rep = kfl::observer::shift_robustness_eval(dec, seeds, sc, jobs);

  std::cout << "teacher decoder d=" << ts.hidden_dim << " V=" << ts.vocab << ", T=" << ts.T
            << ", dropout " << ts.dropout << ", vocab perturbation " << ts.vocab_perturb << ", "
            << seeds.size() << " seeds\n";
  std::cout << "seed  clean_plain  clean_corrected  perturbed_plain  perturbed_corrected\n";
  for (const auto& r : rep.rows) {
    std::cout << r.seed << "  " << g(r.clean_plain) << "  " << g(r.clean_corrected) << "  "
              << g(r.perturbed_plain) << "  " << g(r.perturbed_corrected) << "\n";
  }
  auto line = [](const char* what, const kfl::observer::PairedStats& s) {
    std::cout << what << ": corrected - plain = " << g(s.mean_diff) << " +- " << g(s.std_error)
              << " nats/token, corrected better on " << g(100.0 * s.frac_improved) << "% of seeds\n";
  };
  line("clean", rep.clean);
  line("perturbed", rep.perturbed);
  std::cout.flush();

  {
    nlohmann::json j;
    j["schema_version"] = kfl::bench::kSchemaVersion;
    j["T"] = ts.T;
    j["dropout"] = ts.dropout;
    j["vocab_perturb"] = ts.vocab_perturb;
    nlohmann::json rows = nlohmann::json::array();
    for (const auto& r : rep.rows) {
      rows.push_back({{"seed", r.seed},
                      {"clean_plain", r.clean_plain},
                      {"clean_corrected", r.clean_corrected},
                      {"perturbed_plain", r.perturbed_plain},
                      {"perturbed_corrected", r.perturbed_corrected}});
    }
    j["rows"] = rows;
    auto stats = [](const kfl::observer::PairedStats& s) {
      return nlohmann::json{{"mean_diff", s.mean_diff}, {"std_error", s.std_error},
                            {"frac_improved", s.frac_improved}};
    };
    j["clean"] = stats(rep.clean);
    j["perturbed"] = stats(rep.perturbed);
    const std::string text = j.dump(2) + "\n";
    RunDir dir(output_root(out, cfg_out), "observer-" + kfl::bench::fnv1a_hex(text));
    kfl::bench::write_file_atomically((dir.staging() / "observer_demo.json").string(), text);
    std::cout << "run directory: " << dir.publish().string() << std::endl;
  }
  return kExitOk;
}

// ---- simulate ----

int cmd_simulate(const std::string& system, const std::string& builtin, kfl::Index steps,
                 std::uint64_t seed, const std::string& out) {
  kfl::config::SystemConfig sys = !system.empty()
                                      ? kfl::config::load_system(system)
                                      : kfl::config::parse_system("{\"builtin\": \"" + builtin + "\"}");
  const auto traj = kfl::model::simulate(sys.model, steps, sys.x0, seed);
  kfl::bench::write_trajectory_csv(traj, out);
  std::cout << "wrote " << steps << " steps of a " << sys.model.state_dim() << "-state system to "
            << out << std::endl;
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"kfl: training as recursive Bayesian filtering"};
  app.require_subcommand(1);

  TrainArgs ta;
  std::uint64_t seed_value = 0;
  auto* train = app.add_subcommand("train", "Run a task/learner configuration over its seeds");
  train->add_option("--config", ta.config, "Run configuration (JSON)")->required();
  auto* train_seed = train->add_option("--seed", seed_value, "Override the seeds list with one seed");
  train->add_flag("--strict", ta.strict, "Exit 1 on any divergence or invariant violation");
  train->add_flag("--audit", ta.audit, "Record spectral radius and Lyapunov values");
  train->add_option("--out", ta.out, "Output root (default: config output_dir, $KFL_OUT_ROOT, ./runs)");
  train->add_option("--jobs", ta.jobs, "Concurrent runs")->check(CLI::PositiveNumber);

  std::string suite = "all";
  std::vector<std::string> faults;
  unsigned verify_jobs = 1;
  auto* verify = app.add_subcommand("verify", "Run verification suites; exit 0 iff every criterion passes");
  std::vector<std::string> suites{"all"};
  for (const auto& s : kfl::verify::suite_names()) suites.push_back(s);
  verify->add_option("suite", suite, "Suite name")->check(CLI::IsMember(suites));
  verify->add_option("--inject-fault", faults, "Deliberately break the filter")
      ->check(CLI::IsMember({"skip-symmetrization", "drop-joseph-noise"}));
  verify->add_option("--jobs", verify_jobs, "Worker threads")->check(CLI::PositiveNumber);
  auto* verify_seed = verify->add_option("--seed", seed_value, "Base seed of the suites");

  std::string trajectory, dict_spec = "identity", kout;
  double lambda = 0.0;
  auto* kfit = app.add_subcommand("koopman-fit", "Fit a Koopman matrix to a trajectory by EDMD");
  kfit->add_option("--trajectory", trajectory, "Trajectory CSV (x1..xn columns)")->required();
  kfit->add_option("--dictionary", dict_spec,
                   "identity | monomials:<degree> | bumps:<per-axis>:<lo>:<hi>:<width>");
  auto* kfit_lambda = kfit->add_option("--lambda", lambda, "Tikhonov regularization");
  kfit->add_option("--out", kout, "Write the fit as JSON to this file");

  std::string ocfg, oout;
  unsigned ojobs = 1;
  int onum = 50;
  auto* obs = app.add_subcommand("observer-demo", "Innovation-corrected decoding under token dropout");
  obs->add_option("--config", ocfg, "Run configuration with task.type teacher_stream");
  auto* obs_seed = obs->add_option("--seed", seed_value, "First seed (overrides the config seeds)");
  obs->add_option("--seeds", onum, "Number of seeds when not taken from a config")
      ->check(CLI::PositiveNumber);
  obs->add_option("--jobs", ojobs, "Worker threads")->check(CLI::PositiveNumber);
  obs->add_option("--out", oout, "Output root for the summary");

  std::string system, builtin = "quadratic", sout;
  kfl::Index steps = 200;
  std::uint64_t sseed = 0;
  auto* sim = app.add_subcommand("simulate", "Simulate a system and write its trajectory CSV");
  sim->add_option("--system", system, "System file (JSON)");
  sim->add_option("--builtin", builtin, "Built-in system")->check(CLI::IsMember({"quadratic"}));
  sim->add_option("--steps", steps, "Number of time steps")->check(CLI::PositiveNumber);
  sim->add_option("--seed", sseed, "Noise seed");
  sim->add_option("--out", sout, "Output CSV")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  try {
    if (*train) {
      if (*train_seed) ta.seed = seed_value;
      return cmd_train(ta);
    }
    if (*verify) {
      return cmd_verify(suite, faults, verify_jobs,
                        *verify_seed ? std::optional<std::uint64_t>(seed_value) : std::nullopt);
    }
    if (*kfit) {
      return cmd_koopman_fit(trajectory, dict_spec,
                             *kfit_lambda ? std::optional<double>(lambda) : std::nullopt, kout);
    }
    if (*obs) {
      return cmd_observer_demo(ocfg, *obs_seed ? std::optional<std::uint64_t>(seed_value) : std::nullopt,
                               ojobs, oout, onum);
    }
    if (*sim) return cmd_simulate(system, builtin, steps, sseed, sout);
  } catch (const kfl::config::ConfigError& e) {
    std::cerr << "kfl: " << e.what() << std::endl;
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "kfl: error: " << e.what() << std::endl;
    return kExitFailure;
  }
  return kExitUsage;
}
