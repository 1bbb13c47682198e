#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "bilevel/analysis.hpp"
#include "bilevel/problems.hpp"

namespace bilevel {

inline constexpr const char* kLibraryVersion = "0.1.0";

// Configuration problems carry the offending JSON path; they map to
// exit code 2.
class SpecError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct RunSpec {
  enum class Kind { kSolve, kVerifyLemmas, kRateFit, kStall, kOracleMoments };
  Kind kind = Kind::kSolve;
  nlohmann::json instance;
  nlohmann::json oracle;
  nlohmann::json solver;      // schedule shorthand or explicit block
  nlohmann::json stall;       // optional block for stall runs
  std::vector<double> epsilons;
  std::vector<std::uint64_t> seeds;
  std::uint64_t samples = 100000;  // oracle-moments
  std::string out_dir;             // may be empty
  nlohmann::json raw;              // canonical parsed document

  std::uint64_t hash() const;  // deterministic spec hash
};

// Parses and validates a run specification. Unknown keys are hard
// errors; solver invariants are checked eagerly against the instance
// profile. Throws SpecError with the JSON path of the offense.
RunSpec parse_spec(const std::string& path);
RunSpec parse_spec_json(const nlohmann::json& doc);

std::unique_ptr<BilevelProblem> make_instance(const nlohmann::json& block);
OracleConfig make_oracle_config(const nlohmann::json& block,
                                const BilevelProblem& problem,
                                double epsilon_hint);
std::unique_ptr<Oracle> make_oracle(const nlohmann::json& block,
                                    const BilevelProblem& problem,
                                    double epsilon_hint, std::uint64_t seed);
SolverConfig make_solver_config(const nlohmann::json& block,
                                const SmoothnessProfile& profile,
                                double epsilon, double oracle_r);

struct ExecOptions {
  int workers = 0;                  // 0 -> hardware
  std::string out_override;         // --out
  std::optional<std::uint64_t> seed_override;  // --seed replaces the seed list
};

// Runs every (experiment x seed x grid) cell, persists one summary
// record plus per-cell traces, and returns the process exit code:
// 0 success, 1 verification failure, 2 configuration error.
int execute(const RunSpec& spec, const ExecOptions& opts = {});

// Default output directory when neither the spec nor --out names one.
std::string default_output_dir();

}  // namespace bilevel
