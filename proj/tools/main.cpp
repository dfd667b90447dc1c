#include "sparse_ekp/commands.hpp"

#include "CLI11.hpp"

#include <iostream>

using namespace sparse_ekp;

int main(int argc, char** argv) {
  CLI::App app{"Ensemble Kalman inversion with sparsity-promoting hyperpriors"};
  app.set_version_flag("--version", std::string(kVersion));
  app.require_subcommand(1);

  RunOptions run;
  std::string seed_list, out_dir;
  auto* run_cmd = app.add_subcommand("run", "Run an experiment from a JSON config");
  run_cmd->add_option("--config", run.config_path, "Experiment config (JSON)")->required();
  run_cmd->add_option("--set", run.overrides, "Override a config entry, e.g. solver.r=0.5")
      ->take_all()
      ->allow_extra_args(false);
  run_cmd->add_option("--seed-list", seed_list, "Comma-separated replicate seeds");
  run_cmd->add_option("--out", out_dir, "Output directory");

  CompareOptions cmp;
  std::string iterations;
  auto* cmp_cmd = app.add_subcommand("compare", "Tabulate seed-averaged metrics of several runs");
  cmp_cmd->add_option("results", cmp.results, "results.json files")->required();
  cmp_cmd->add_option("--out", cmp.out_dir, "Output directory")->required();
  cmp_cmd->add_option("--iterations", iterations, "Outer iterations to show, e.g. 0,1,3");

  std::string fault;
  auto* check_cmd = app.add_subcommand("selfcheck", "Run the built-in oracle checks");
  check_cmd->add_option("--inject-fault", fault, "Corrupt a component (testing the checks)")
      ->check(CLI::IsMember({"theta-exponent"}))
      ->group("");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return e.get_exit_code() == 0 ? app.exit(e) : (app.exit(e), kExitConfig);
  }

  try {
    if (*run_cmd) {
      if (!seed_list.empty()) run.seeds = parse_seed_list(seed_list);
      if (!out_dir.empty()) run.out_dir = out_dir;
      return cmd_run(run, std::cout, std::cerr);
    }
    if (*cmp_cmd) {
      if (!iterations.empty()) cmp.iterations = parse_iteration_list(iterations);
      return cmd_compare(cmp, std::cout, std::cerr);
    }
    SelfcheckOptions opt;
    if (fault == "theta-exponent") {
      opt.theta_update = [](const Vector& u, const HyperParams& hp) {
        Vector th = theta_update(u, hp);
        if (hp.r > 0.0) th = th.array().pow(1.1);
        return th;
      };
    }
    return cmd_selfcheck(std::cout, opt);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  }
}
