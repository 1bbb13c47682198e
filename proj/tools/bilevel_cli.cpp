#include <cstdio>
#include <string>

#include <CLI11.hpp>

#include "bilevel/runner.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Config-driven experiment runner for the penalty-method "
               "bilevel toolkit"};
  app.require_subcommand(1);

  std::string spec_path;
  bilevel::ExecOptions opts;
  std::uint64_t seed = 0;
  bool seed_set = false;

  CLI::App* run = app.add_subcommand("run", "execute a run specification");
  run->add_option("spec", spec_path, "path to the JSON run spec")->required();
  run->add_option("--workers", opts.workers, "concurrent cell workers");
  run->add_option("--out", opts.out_override, "output directory");
  run->add_option("--seed", seed, "master seed override")
      ->each([&](const std::string&) { seed_set = true; });

  CLI11_PARSE(app, argc, argv);

  try {
    const bilevel::RunSpec spec = bilevel::parse_spec(spec_path);
    if (seed_set) opts.seed_override = seed;
    return bilevel::execute(spec, opts);
  } catch (const bilevel::SpecError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
}
