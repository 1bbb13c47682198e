#include "bilevel/runner.hpp"

#include <atomic>
#include <chrono>
#include <cinttypes>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <thread>

#include "bilevel/rng.hpp"

namespace bilevel {
namespace {

using nlohmann::json;

[[noreturn]] void fail(const std::string& path, const std::string& msg) {
  throw SpecError(path + ": " + msg);
}

void reject_unknown(const json& obj, const std::string& path,
                    std::initializer_list<const char*> allowed) {
  for (auto it = obj.begin(); it != obj.end(); ++it) {
    bool ok = false;
    for (const char* k : allowed)
      if (it.key() == k) {
        ok = true;
        break;
      }
    if (!ok) fail(path + "/" + it.key(), "unknown key (rejected, not ignored)");
  }
}

const json& require(const json& obj, const std::string& path, const char* key) {
  auto it = obj.find(key);
  if (it == obj.end()) fail(path, std::string("missing field '") + key + "'");
  return *it;
}

double as_number(const json& v, const std::string& path) {
  if (v.is_string() && v.get<std::string>() == "inf") return kInf;
  if (!v.is_number()) fail(path, "expected a number");
  return v.get<double>();
}

double get_number(const json& obj, const std::string& path, const char* key,
                  double fallback) {
  auto it = obj.find(key);
  return it == obj.end() ? fallback : as_number(*it, path + "/" + key);
}

std::uint64_t eps_bits(double eps) {
  std::uint64_t u;
  static_assert(sizeof(u) == sizeof(eps));
  std::memcpy(&u, &eps, sizeof(u));
  return u;
}

Eigen::VectorXd as_vector(const json& v, const std::string& path) {
  if (!v.is_array()) fail(path, "expected an array of numbers");
  Eigen::VectorXd out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i)
    out[static_cast<Eigen::Index>(i)] = as_number(v[i], path);
  return out;
}

}  // namespace

std::uint64_t RunSpec::hash() const {
  const std::string canon = raw.dump();
  return rng::hash_bytes(canon.data(), canon.size());
}

// ---- parsing ---------------------------------------------------------------

namespace {

RunSpec::Kind parse_kind(const json& v, const std::string& path) {
  const std::string k = v.is_string() ? v.get<std::string>() : "";
  if (k == "solve") return RunSpec::Kind::kSolve;
  if (k == "verify-lemmas") return RunSpec::Kind::kVerifyLemmas;
  if (k == "rate-fit") return RunSpec::Kind::kRateFit;
  if (k == "stall") return RunSpec::Kind::kStall;
  if (k == "oracle-moments") return RunSpec::Kind::kOracleMoments;
  fail(path, "kind must be one of solve | verify-lemmas | rate-fit | stall | oracle-moments");
}

void validate_instance_block(const json& b) {
  const std::string path = "/instance";
  if (!b.is_object()) fail(path, "expected an object");
  const std::string type =
      require(b, path, "type").is_string() ? b["type"].get<std::string>() : "";
  if (type == "quadratic" || type == "cubic") {
    reject_unknown(b, path, {"type", "dim_x", "dim_y", "seed", "sv_lo",
                             "sv_hi", "b_norm"});
    require(b, path, "dim_x");
    require(b, path, "dim_y");
  } else if (type == "chain") {
    reject_unknown(b, path, {"type", "epsilon", "dim"});
    require(b, path, "epsilon");
  } else if (type == "embedded") {
    reject_unknown(b, path,
                   {"type", "epsilon", "dim", "ambient_dim", "seed",
                    "radius_scale"});
    require(b, path, "epsilon");
    require(b, path, "ambient_dim");
  } else {
    fail(path + "/type", "unknown instance type '" + type + "'");
  }
}

void validate_oracle_block(const json& b) {
  const std::string path = "/oracle";
  if (!b.is_object()) fail(path, "expected an object");
  reject_unknown(b, path, {"model", "sigma_f", "sigma_g", "r", "p",
                           "batch_capability"});
  const std::string model =
      require(b, path, "model").is_string() ? b["model"].get<std::string>() : "";
  if (model != "gaussian" && model != "zero-chain")
    fail(path + "/model", "model must be gaussian | zero-chain");
  const double n = get_number(b, path, "batch_capability", 2.0);
  if (n < 2)
    fail(path + "/batch_capability",
         "simultaneous-query capability N must be >= 2");
  const double p = get_number(b, path, "p", 1.0);
  if (!(p > 0.0 && p <= 1.0)) fail(path + "/p", "p must lie in (0, 1]");
  const double r = get_number(b, path, "r", kInf);
  if (!(r > 0.0)) fail(path + "/r", "r must be positive");
}

void validate_solver_block(const json& b) {
  const std::string path = "/solver";
  if (!b.is_object()) fail(path, "expected an object");
  if (b.contains("schedule")) {
    reject_unknown(b, path, {"schedule", "constants", "x0", "fixed_T",
                             "fixed_M", "fixed_gamma"});
    const std::string s = b["schedule"].is_string()
                              ? b["schedule"].get<std::string>()
                              : "";
    if (s != "coupled" && s != "uncoupled")
      fail(path + "/schedule", "schedule must be coupled | uncoupled");
    if (b.contains("constants"))
      reject_unknown(b["constants"], path + "/constants",
                     {"c_gamma", "c_T", "c_M", "c_K", "alpha_fraction"});
  } else {
    reject_unknown(b, path, {"lambda", "alpha", "gamma", "T", "M", "K",
                             "r_lambda", "smooth_path", "x0"});
    for (const char* k : {"lambda", "alpha", "gamma", "T", "M", "K", "r_lambda",
                          "smooth_path"})
      require(b, path, k);
  }
}

}  // namespace

RunSpec parse_spec_json(const json& doc) {
  if (!doc.is_object()) fail("/", "top-level spec must be an object");
  reject_unknown(doc, "", {"kind", "instance", "oracle", "solver", "stall",
                           "epsilons", "seeds", "samples", "out"});
  RunSpec spec;
  spec.raw = doc;
  spec.kind = parse_kind(require(doc, "/", "kind"), "/kind");

  spec.instance = require(doc, "/", "instance");
  validate_instance_block(spec.instance);

  if (doc.contains("oracle")) {
    spec.oracle = doc["oracle"];
    validate_oracle_block(spec.oracle);
  } else if (spec.kind != RunSpec::Kind::kVerifyLemmas) {
    fail("/", "missing field 'oracle'");
  }

  const bool needs_solver = spec.kind == RunSpec::Kind::kSolve ||
                            spec.kind == RunSpec::Kind::kRateFit;
  if (doc.contains("solver")) {
    spec.solver = doc["solver"];
    validate_solver_block(spec.solver);
  } else if (needs_solver) {
    fail("/", "missing field 'solver'");
  }
  if (spec.kind == RunSpec::Kind::kRateFit && !spec.solver.contains("schedule"))
    fail("/solver", "rate-fit requires the schedule shorthand form");

  if (doc.contains("stall")) {
    if (spec.kind != RunSpec::Kind::kStall)
      fail("/stall", "stall block only valid for kind = stall");
    reject_unknown(doc["stall"], "/stall", {"p", "budget"});
    spec.stall = doc["stall"];
  }

  if (doc.contains("epsilons")) {
    const json& e = doc["epsilons"];
    if (!e.is_array() || e.empty()) fail("/epsilons", "expected a non-empty array");
    for (std::size_t i = 0; i < e.size(); ++i) {
      const double v = as_number(e[i], "/epsilons");
      if (!(v > 0.0)) fail("/epsilons", "epsilon values must be positive");
      spec.epsilons.push_back(v);
    }
  }
  if (needs_solver && spec.epsilons.empty())
    fail("/", "missing field 'epsilons'");
  if (spec.kind == RunSpec::Kind::kRateFit && spec.epsilons.size() < 3)
    fail("/epsilons", "rate fitting needs a grid of >= 3 epsilon values");

  const json& seeds = require(doc, "/", "seeds");
  if (!seeds.is_array() || seeds.empty())
    fail("/seeds", "expected a non-empty array of seeds");
  for (const auto& s : seeds) {
    if (!s.is_number_integer() || (s.is_number_integer() && s.get<long long>() < 0))
      fail("/seeds", "seeds must be non-negative integers");
    spec.seeds.push_back(s.get<std::uint64_t>());
  }

  if (doc.contains("samples")) {
    const double n = as_number(doc["samples"], "/samples");
    if (n < 2) fail("/samples", "samples must be >= 2");
    spec.samples = static_cast<std::uint64_t>(n);
  }
  if (doc.contains("out")) {
    if (!doc["out"].is_string()) fail("/out", "expected a string");
    spec.out_dir = doc["out"].get<std::string>();
  }

  // eager solver-invariant validation on the explicit form: build the
  // config against the instance profile for the first grid epsilon
  if (!spec.solver.empty() && !spec.solver.contains("schedule")) {
    auto instance = make_instance(spec.instance);
    const double eps0 = spec.epsilons.empty() ? 0.1 : spec.epsilons[0];
    const double oracle_r =
        spec.oracle.empty() ? kInf : get_number(spec.oracle, "/oracle", "r", kInf);
    make_solver_config(spec.solver, instance->profile(), eps0, oracle_r);
  }
  return spec;
}

RunSpec parse_spec(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw SpecError(path + ": cannot open spec file");
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::parse_error& e) {
    throw SpecError(path + ": " + e.what());
  }
  return parse_spec_json(doc);
}

// ---- factories ---------------------------------------------------------------

std::unique_ptr<BilevelProblem> make_instance(const json& block) {
  const std::string type = block["type"].get<std::string>();
  const std::string path = "/instance";
  if (type == "quadratic" || type == "cubic") {
    const int dx = static_cast<int>(as_number(block["dim_x"], path));
    const int dy = static_cast<int>(as_number(block["dim_y"], path));
    const auto seed =
        static_cast<std::uint64_t>(get_number(block, path, "seed", 1.0));
    if (type == "cubic")
      return std::make_unique<CubicPerturbedInstance>(
          CubicPerturbedInstance::seeded(dx, dy, seed));
    return std::make_unique<QuadraticInstance>(QuadraticInstance::seeded(
        dx, dy, seed, get_number(block, path, "sv_lo", 0.15),
        get_number(block, path, "sv_hi", 0.3),
        get_number(block, path, "b_norm", 0.5)));
  }
  const double eps = as_number(block["epsilon"], path + "/epsilon");
  ChainConfig chain = block.contains("dim")
                          ? ChainConfig(eps, static_cast<int>(as_number(
                                                 block["dim"], path)))
                          : ChainConfig::for_epsilon(eps);
  if (type == "chain") return std::make_unique<ChainHardInstance>(chain);
  EmbeddedInstanceConfig cfg{static_cast<int>(as_number(
                                 block["ambient_dim"], path + "/ambient_dim")),
                             chain,
                             get_number(block, path, "radius_scale", 250.0),
                             static_cast<std::uint64_t>(
                                 get_number(block, path, "seed", 1.0))};
  return std::make_unique<EmbeddedInstance>(cfg);
}

OracleConfig make_oracle_config(const json& block,
                                const BilevelProblem& problem,
                                double epsilon_hint) {
  const std::string path = "/oracle";
  OracleConfig cfg;
  const std::string model = block["model"].get<std::string>();
  cfg.model = model == "gaussian" ? NoiseModel::kGaussian
                                  : NoiseModel::kZeroChain;
  cfg.sigma_f = get_number(block, path, "sigma_f", 0.0);
  cfg.sigma_g = get_number(block, path, "sigma_g", 0.0);
  cfg.r = get_number(block, path, "r", kInf);
  cfg.batch_capability =
      static_cast<int>(get_number(block, path, "batch_capability", 2.0));
  const SmoothnessProfile prof = problem.profile();
  const double sigma = std::max(cfg.sigma_f, cfg.sigma_g);
  cfg.p = block.contains("p")
              ? as_number(block["p"], path + "/p")
              : default_progression_probability(epsilon_hint, sigma,
                                                prof.l_g1_tilde);
  return cfg;
}

std::unique_ptr<Oracle> make_oracle(const json& block,
                                    const BilevelProblem& problem,
                                    double epsilon_hint, std::uint64_t seed) {
  OracleConfig cfg = make_oracle_config(block, problem, epsilon_hint);
  cfg.seed = seed;
  if (cfg.model == NoiseModel::kGaussian)
    return std::make_unique<GaussianOracle>(problem, cfg);
  if (const auto* chain = dynamic_cast<const ChainHardInstance*>(&problem)) {
    cfg.r = chain->r_eps();
    return std::make_unique<ZeroChainOracle>(*chain, cfg);
  }
  if (const auto* emb = dynamic_cast<const EmbeddedInstance*>(&problem)) {
    cfg.r = emb->inner().r_eps();
    return std::make_unique<EmbeddedZeroChainOracle>(*emb, cfg);
  }
  fail("/oracle/model", "zero-chain oracle requires a chain or embedded instance");
}

SolverConfig make_solver_config(const json& block,
                                const SmoothnessProfile& profile,
                                double epsilon, double oracle_r) {
  const std::string path = "/solver";
  SolverConfig cfg;
  try {
    if (block.contains("schedule")) {
      ScheduleConstants c;
      if (block.contains("constants")) {
        const json& cb = block["constants"];
        c.c_gamma = get_number(cb, path, "c_gamma", 1.0);
        c.c_T = get_number(cb, path, "c_T", 1.0);
        c.c_M = get_number(cb, path, "c_M", 1.0);
        c.c_K = get_number(cb, path, "c_K", 1.0);
        c.alpha_fraction = get_number(cb, path, "alpha_fraction", 0.4);
      }
      const auto kind = block["schedule"].get<std::string>() == "coupled"
                            ? ScheduleKind::kCoupled
                            : ScheduleKind::kUncoupled;
      cfg = schedule_for_target(kind, epsilon, profile, c, oracle_r);
      if (block.contains("fixed_T"))
        cfg.T = static_cast<int>(as_number(block["fixed_T"], path));
      if (block.contains("fixed_M"))
        cfg.M = static_cast<int>(as_number(block["fixed_M"], path));
      if (block.contains("fixed_gamma"))
        cfg.gamma = GammaSchedule{false, as_number(block["fixed_gamma"], path)};
    } else {
      cfg.epsilon = epsilon;
      cfg.lambda = as_number(block["lambda"], path + "/lambda");
      cfg.alpha = as_number(block["alpha"], path + "/alpha");
      const json& g = block["gamma"];
      if (g.is_object()) {
        reject_unknown(g, path + "/gamma", {"diminishing", "value"});
        cfg.gamma = GammaSchedule{g.value("diminishing", false),
                                  as_number(g["value"], path + "/gamma/value")};
      } else {
        cfg.gamma = GammaSchedule{false, as_number(g, path + "/gamma")};
      }
      cfg.T = static_cast<int>(as_number(block["T"], path + "/T"));
      cfg.M = static_cast<int>(as_number(block["M"], path + "/M"));
      cfg.K = static_cast<int>(as_number(block["K"], path + "/K"));
      cfg.r_lambda = as_number(block["r_lambda"], path + "/r_lambda");
      cfg.smooth_path = block["smooth_path"].get<bool>();
      cfg.r = oracle_r;
    }
    if (block.contains("x0")) cfg.x0 = as_vector(block["x0"], path + "/x0");
    cfg.validate(profile);
  } catch (const SpecError&) {
    throw;
  } catch (const std::exception& e) {
    fail(path, e.what());
  }
  return cfg;
}

// ---- execution ----------------------------------------------------------------

namespace {

void for_each_cell(int n, int workers, const std::function<void(int)>& fn) {
  int w = workers > 0 ? workers
                      : static_cast<int>(std::thread::hardware_concurrency());
  w = std::max(1, std::min(w, n));
  if (w == 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<int> next{0};
  std::vector<std::thread> pool;
  pool.reserve(w);
  for (int i = 0; i < w; ++i)
    pool.emplace_back([&] {
      for (;;) {
        const int c = next.fetch_add(1);
        if (c >= n) return;
        fn(c);
      }
    });
  for (auto& t : pool) t.join();
}

void write_file(const std::filesystem::path& p, const std::string& bytes) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + p.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

std::string trace_csv(const RunRecord& rec) {
  std::string s = "iter,oracle_calls,grad_F_norm,prog\n";
  char buf[128];
  for (const TraceRow& row : rec.trace) {
    std::snprintf(buf, sizeof(buf), "%d,%" PRIu64 ",%.17g,%d\n", row.iter,
                  row.oracle_calls, row.grad_F_norm, row.prog);
    s += buf;
  }
  return s;
}

struct CellOutcome {
  json summary;
  bool failed = false;
  std::string error;
};

std::uint64_t cell_seed(std::uint64_t run_seed, double epsilon) {
  return rng::key_of(run_seed, 0xce11, eps_bits(epsilon));
}

// one solve cell: schedule at this epsilon, run, persist trace
CellOutcome run_solve_cell(const RunSpec& spec, const BilevelProblem& problem,
                           double eps, std::uint64_t seed,
                           const std::filesystem::path& dir) {
  CellOutcome out;
  const std::uint64_t derived = cell_seed(seed, eps);
  auto oracle = make_oracle(spec.oracle, problem, eps, derived);
  SolverConfig cfg = make_solver_config(spec.solver, problem.profile(), eps,
                                        oracle->config().r);
  PenaltySolver solver(problem, *oracle, cfg);
  const RunRecord rec = solver.run(make_measure(problem, eps));

  const std::uint64_t expected =
      std::uint64_t(cfg.K) * (2 * std::uint64_t(cfg.T) + 3 * std::uint64_t(cfg.M));
  if (rec.oracle_calls != expected)
    throw std::logic_error("oracle-call accounting mismatch: billed " +
                           std::to_string(rec.oracle_calls) + ", expected " +
                           std::to_string(expected));

  char name[96];
  std::snprintf(name, sizeof(name), "trace_eps%g_seed%" PRIu64 ".csv", eps,
                seed);
  write_file(dir / name, trace_csv(rec));

  double min_grad = kInf;
  for (const auto& row : rec.trace) min_grad = std::min(min_grad, row.grad_F_norm);
  out.summary = {{"epsilon", eps},
                 {"seed", seed},
                 {"oracle_calls", rec.oracle_calls},
                 {"final_grad_norm", rec.trace.back().grad_F_norm},
                 {"min_grad_norm", min_grad},
                 {"first_hit_calls", first_hit_calls(rec, eps)},
                 {"trace", name}};
  return out;
}

json verification_suite(const RunSpec& spec, const BilevelProblem& problem,
                        std::uint64_t master, bool* all_pass);

}  // namespace

std::string default_output_dir() {
  if (const char* env = std::getenv("BILEVEL_OUT")) return env;
  return "results";
}

int execute(const RunSpec& spec, const ExecOptions& opts) {
  const auto t_start = std::chrono::steady_clock::now();
  std::string out_dir = !opts.out_override.empty() ? opts.out_override
                        : !spec.out_dir.empty()    ? spec.out_dir
                                                   : default_output_dir();
  std::filesystem::path dir(out_dir);
  std::filesystem::create_directories(dir);

  std::vector<std::uint64_t> seeds = spec.seeds;
  if (opts.seed_override) seeds = {*opts.seed_override};

  std::unique_ptr<BilevelProblem> problem;
  try {
    problem = make_instance(spec.instance);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  }

  json cells = json::array();
  bool verification_failed = false;
  bool runtime_failure = false;

  try {
    switch (spec.kind) {
      case RunSpec::Kind::kSolve: {
        const int n = static_cast<int>(spec.epsilons.size() * seeds.size());
        std::vector<CellOutcome> outs(n);
        for_each_cell(n, opts.workers, [&](int c) {
          const double eps = spec.epsilons[c / seeds.size()];
          const std::uint64_t seed = seeds[c % seeds.size()];
          try {
            outs[c] = run_solve_cell(spec, *problem, eps, seed, dir);
          } catch (const std::exception& e) {
            outs[c].failed = true;
            outs[c].error = e.what();
          }
        });
        for (auto& o : outs) {
          if (o.failed) {
            runtime_failure = true;
            cells.push_back({{"error", o.error}});
          } else {
            cells.push_back(o.summary);
          }
        }
        break;
      }
      case RunSpec::Kind::kRateFit: {
        RateFitOptions ro;
        ro.epsilons = spec.epsilons;
        ro.seeds = static_cast<int>(seeds.size());
        ro.master_seed = seeds[0];
        ro.kind = spec.solver["schedule"].get<std::string>() == "coupled"
                      ? ScheduleKind::kCoupled
                      : ScheduleKind::kUncoupled;
        if (spec.solver.contains("constants")) {
          const json& cb = spec.solver["constants"];
          ro.constants.c_gamma = get_number(cb, "/solver", "c_gamma", 1.0);
          ro.constants.c_T = get_number(cb, "/solver", "c_T", 1.0);
          ro.constants.c_M = get_number(cb, "/solver", "c_M", 1.0);
          ro.constants.c_K = get_number(cb, "/solver", "c_K", 1.0);
          ro.constants.alpha_fraction =
              get_number(cb, "/solver", "alpha_fraction", 0.4);
        }
        if (spec.solver.contains("fixed_T"))
          ro.fixed_T = static_cast<int>(as_number(spec.solver["fixed_T"], "/solver"));
        if (spec.solver.contains("fixed_M"))
          ro.fixed_M = static_cast<int>(as_number(spec.solver["fixed_M"], "/solver"));
        if (spec.solver.contains("fixed_gamma"))
          ro.fixed_gamma = as_number(spec.solver["fixed_gamma"], "/solver");
        if (spec.solver.contains("x0"))
          ro.x0 = as_vector(spec.solver["x0"], "/solver/x0");
        ro.sigma_f = get_number(spec.oracle, "/oracle", "sigma_f", 0.0);
        ro.sigma_g = get_number(spec.oracle, "/oracle", "sigma_g", 0.0);
        ro.r = get_number(spec.oracle, "/oracle", "r", kInf);

        const RateFit fit = fit_rate(*problem, ro);
        std::string csv = "epsilon,seed,first_hit_calls\n";
        char buf[96];
        for (std::size_t ei = 0; ei < fit.epsilons.size(); ++ei)
          for (std::size_t si = 0; si < fit.calls[ei].size(); ++si) {
            std::snprintf(buf, sizeof(buf), "%.17g,%zu,%lld\n",
                          fit.epsilons[ei], si,
                          static_cast<long long>(fit.calls[ei][si]));
            csv += buf;
          }
        write_file(dir / "cells.csv", csv);
        json medians = json::array();
        for (std::size_t i = 0; i < fit.epsilons.size(); ++i)
          medians.push_back(
              {{"epsilon", fit.epsilons[i]}, {"median_calls", fit.median_calls[i]}});
        cells.push_back({{"slope", fit.slope},
                         {"ci", {fit.ci_lo, fit.ci_hi}},
                         {"censored", fit.censored},
                         {"medians", medians},
                         {"cells_csv", "cells.csv"}});
        if (fit.censored > 0) verification_failed = true;
        break;
      }
      case RunSpec::Kind::kStall: {
        const auto* chain = dynamic_cast<const ChainHardInstance*>(problem.get());
        if (chain == nullptr)
          throw SpecError("/instance: stall experiments need a chain instance");
        StallOptions so{chain->chain()};
        so.p = spec.stall.empty()
                   ? get_number(spec.oracle, "/oracle", "p", 0.01)
                   : get_number(spec.stall, "/stall", "p", 0.01);
        so.budget = static_cast<std::uint64_t>(
            spec.stall.empty() ? 10000
                               : get_number(spec.stall, "/stall", "budget",
                                            10000.0));
        so.seeds = static_cast<int>(seeds.size());
        so.seed = seeds[0];
        const StallReport rep = stall_experiment(so);
        for (int s = 0; s < so.seeds; ++s) {
          char name[64];
          std::snprintf(name, sizeof(name), "stall_seed%d.csv", s);
          std::string csv = "iter,oracle_calls,grad_F_norm,prog\n";
          char buf[96];
          for (std::size_t t = 0; t < rep.prog_trace[s].size(); ++t) {
            std::snprintf(buf, sizeof(buf), "%zu,%zu,-1,%d\n", t, t,
                          rep.prog_trace[s][t]);
            csv += buf;
          }
          write_file(dir / name, csv);
          cells.push_back(
              {{"seed", s},
               {"full_activation", rep.full_activation[s]},
               {"censored", rep.full_activation[s] > rep.budget},
               {"oracle_calls",
                std::min<std::uint64_t>(rep.full_activation[s], rep.budget)},
               {"trace", name}});
        }
        cells.push_back({{"median_full_activation", rep.median_full_activation()},
                         {"budget", rep.budget}});
        break;
      }
      case RunSpec::Kind::kOracleMoments: {
        const double eps = spec.epsilons.empty() ? 0.1 : spec.epsilons[0];
        auto oracle =
            make_oracle(spec.oracle, *problem, eps, cell_seed(seeds[0], eps));
        const Eigen::VectorXd x = Eigen::VectorXd::Zero(problem->dim_x());
        const Eigen::VectorXd y = problem->has_y_star()
                                      ? problem->y_star(x)
                                      : Eigen::VectorXd::Zero(problem->dim_y());
        const MomentReport rep = estimate_moments(*oracle, x, y, spec.samples);
        cells.push_back({{"samples", rep.samples},
                         {"cov_trace_f", rep.cov_trace_f},
                         {"cov_trace_g", rep.cov_trace_g},
                         {"se_trace_f", rep.se_trace_f},
                         {"se_trace_g", rep.se_trace_g},
                         {"oracle_calls", oracle->calls()}});
        break;
      }
      case RunSpec::Kind::kVerifyLemmas: {
        bool all = true;
        cells = verification_suite(spec, *problem, seeds[0], &all);
        if (!all) verification_failed = true;
        break;
      }
    }
  } catch (const SpecError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "runtime failure: %s\n", e.what());
    runtime_failure = true;
  }

  char hash_buf[32];
  std::snprintf(hash_buf, sizeof(hash_buf), "%016" PRIx64, spec.hash());
  json record = {{"spec_hash", hash_buf},
                 {"library_version", kLibraryVersion},
                 {"trace_schema", "v1:iter,oracle_calls,grad_F_norm,prog"},
                 {"spec", spec.raw}};
  record["cells"] = cells;
  record["verdict"] = verification_failed || runtime_failure ? "fail" : "pass";

  const double wall =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start)
          .count();
  json summary = {{"record", record}, {"wall_clock_s", wall}};
  write_file(dir / "summary.json", summary.dump(2) + "\n");

  if (verification_failed || runtime_failure) return 1;
  return 0;
}

// ---- verification suite (CLI-scale) -------------------------------------------

namespace {

Eigen::VectorXd random_vec(std::uint64_t key, std::uint64_t ctr, int dim,
                           double scale) {
  Eigen::VectorXd v(dim);
  for (int i = 0; i < dim; ++i)
    v[i] = scale * (2.0 * rng::u01(key, ctr + std::uint64_t(i)) - 1.0);
  return v;
}

json verification_suite(const RunSpec& spec, const BilevelProblem& problem,
                        std::uint64_t master, bool* all_pass) {
  json checks = json::array();
  auto push = [&](const char* name, bool pass, json detail) {
    detail["name"] = name;
    detail["pass"] = pass;
    checks.push_back(detail);
    *all_pass = *all_pass && pass;
  };
  const SmoothnessProfile prof = problem.profile();
  const DerivedConstants dc = derived_constants(prof);
  const std::uint64_t key = rng::key_of(master, 0x1e77a5);

  {  // surrogate value / minimizer gaps at three penalty levels
    double worst_gap = -kInf, worst_v = -kInf;
    bool pass = true;
    for (double lambda : {10.0, 100.0, 1000.0}) {
      if (lambda < 2.0 * prof.l_f1 / prof.mu_g) continue;
      for (int i = 0; i < 20; ++i) {
        const Eigen::VectorXd x =
            random_vec(key, std::uint64_t(i) * 131, problem.dim_x(), 1.0);
        const double gap = surrogate_value_gap(problem, x, lambda, 1e-11);
        const double vgap = v_star_gap(problem, x, lambda, 1e-11);
        worst_gap = std::max(worst_gap, gap - dc.D0 / lambda);
        worst_v = std::max(worst_v,
                           vgap - 2.0 * prof.l_f0 / (lambda * prof.mu_g));
      }
    }
    pass = worst_gap <= 1e-9 && worst_v <= 1e-9;
    push("surrogate_gaps", pass,
         {{"worst_value_gap_excess", worst_gap}, {"worst_v_gap_excess", worst_v}});
  }

  {  // bias bound residuals at random admissible states
    double worst = kInf;
    const double lambda = std::max(10.0, 2.0 * prof.l_f1 / prof.mu_g);
    for (int i = 0; i < 100; ++i) {
      const Eigen::VectorXd x =
          random_vec(key, 1'000'000 + std::uint64_t(i) * 977, problem.dim_x(), 1.0);
      const Eigen::VectorXd yl = solve_y_star_lambda(problem, x, lambda, 1e-11);
      const Eigen::VectorXd ys = solve_y_star(problem, x, 1e-11);
      const Eigen::VectorXd dy = random_vec(key, 2'000'000 + std::uint64_t(i) * 7,
                                            problem.dim_y(), 0.05);
      const Eigen::VectorXd dz = random_vec(key, 3'000'000 + std::uint64_t(i) * 7,
                                            problem.dim_y(), 0.05);
      const BiasCheckResult r =
          bias_check(problem, x, yl + dy, ys + dz, lambda, 1e-11);
      worst = std::min(worst, r.residual_uncoupled());
    }
    push("bias_bound_residuals", worst >= 0.0, {{"min_residual", worst}});
  }

  {  // ball-projection shrinking property
    bool pass = true;
    for (int i = 0; i < 2000 && pass; ++i) {
      const Eigen::VectorXd v = random_vec(key, 4'000'000 + std::uint64_t(i) * 17, 6, 2.0);
      Eigen::VectorXd u = random_vec(key, 5'000'000 + std::uint64_t(i) * 17, 6, 2.0);
      const double t = v.norm() * rng::u01(key, 6'000'000 + i);
      if (u.norm() > t) u *= t / u.norm() * rng::u01(key, 7'000'000 + i);
      const Eigen::VectorXd proj =
          project_ball(v, Eigen::VectorXd::Zero(6), std::max(t, 1e-12));
      pass = (proj - u).norm() <= (v - u).norm() * (1.0 + 1e-12);
    }
    push("projection_shrinks", pass, {});
  }

  {  // PSGD envelopes, small scale
    PsgdOptions po;
    po.T = 120;
    po.seeds = 200;
    po.mode = StepMode::kFixed;
    po.seed = master;
    const bool fixed = psgd_rate_check(po).pass;
    po.mode = StepMode::kDiminishing;
    const bool dim = psgd_rate_check(po).pass;
    push("psgd_envelopes", fixed && dim, {{"fixed", fixed}, {"diminishing", dim}});
  }

  if (const auto* chain = dynamic_cast<const ChainHardInstance*>(&problem)) {
    // zero-chain progress property, both outcomes, plus envelopes
    OracleConfig ocfg;
    ocfg.model = NoiseModel::kZeroChain;
    ocfg.p = spec.oracle.empty()
                 ? 0.25
                 : get_number(spec.oracle, "/oracle", "p", 0.25);
    ocfg.r = chain->r_eps();
    ocfg.seed = master;
    ZeroChainOracle oracle(*chain, ocfg);
    const ChainConfig& cc = chain->chain();
    bool pass = true;
    for (int s = 0; s < 200 && pass; ++s) {
      const Eigen::VectorXd x =
          random_vec(key, 8'000'000 + std::uint64_t(s) * 131, cc.dim, cc.epsilon);
      const double y = chain->y_star(x)[0] +
                       cc.epsilon * (2.0 * rng::u01(key, 9'000'000 + s) - 1.0);
      const int prog = progress_index(x, cc.epsilon / 4.0, cc.epsilon);
      for (bool xi : {false, true}) {
        const Eigen::VectorXd g = oracle.grad_x_given(x, y, xi);
        if (progress_index(g, 0.0) > prog + 1) pass = false;
      }
    }
    push("zero_chain_support", pass, {{"states", 200}});
  }

  return checks;
}

}  // namespace

}  // namespace bilevel
