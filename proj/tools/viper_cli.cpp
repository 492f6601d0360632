// viper <task> --config <path> [--output <path>] [--seed <int>] [--repeats <int>] [--methods a,b]
//
// exit codes: 0 ok, 1 usage or config, 2 data / io, 3 a fit did not converge

#include <cstdint>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "viper/experiment.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitData = 2;
constexpr int kExitNotConverged = 3;

}  // namespace

int main(int argc, char** argv) {
  namespace ex = viper::experiment;

  CLI::App app{"Variational logistic regression and sparse GP classification experiments", "viper"};
  app.set_version_flag("--version", std::string(viper::kVersion));
  std::string task_name;
  std::string config_path;
  std::optional<std::string> output;
  std::optional<std::uint64_t> seed;
  std::optional<int> repeats;
  std::optional<std::string> methods;
  app.add_option("task", task_name, "bound-grid, logistic-sim, gp-toy or fit-file")->required();
  app.add_option("--config", config_path, "JSON config file")->required();
  app.add_option("--output", output, "report path (overrides output_path)");
  app.add_option("--seed", seed, "base seed (overrides seed)");
  app.add_option("--repeats", repeats, "number of repeats (overrides n_repeats)");
  app.add_option("--methods", methods, "comma separated subset of viper,vipg,vimc");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  try {
    ex::ExperimentConfig cfg = ex::load_config(config_path, ex::parse_task(task_name));
    if (output) cfg.output_path = *output;
    if (seed) cfg.seed = *seed;
    if (repeats) cfg.n_repeats = *repeats;
    if (methods) cfg.methods = ex::parse_methods(*methods);

    const ex::Report report = ex::run(cfg);
    ex::write_report(cfg, report, std::cout);
    std::cout.flush();
    if (!report.all_converged && !cfg.allow_nonconverged) {
      std::cerr << "viper: some fits did not converge (set allow_nonconverged to accept)\n";
      return kExitNotConverged;
    }
    return kExitOk;
  } catch (const viper::config_error& e) {
    std::cerr << "viper: config error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const viper::data_error& e) {
    std::cerr << "viper: data error: " << e.what() << "\n";
    return kExitData;
  } catch (const viper::error& e) {
    std::cerr << "viper: error: " << e.what() << "\n";
    return kExitData;
  } catch (const std::exception& e) {
    std::cerr << "viper: " << e.what() << "\n";
    return kExitData;
  }
}
