// stepflow: train, sample and check step-aware discrete flow models.

#include <functional>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "stepflow/commands.hpp"
#include "stepflow/config.hpp"

namespace {

struct Options {
  std::string config_path;
  std::vector<std::string> overrides;
};

stepflow::RunConfig resolve_config(const Options& opts) {
  stepflow::RunConfig cfg;
  std::filesystem::path base = std::filesystem::current_path();
  if (!opts.config_path.empty()) {
    cfg = stepflow::load_config(opts.config_path);
    base = std::filesystem::path(opts.config_path).parent_path();
  }
  for (const auto& assignment : opts.overrides) stepflow::apply_override(cfg, assignment, base);
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Step-aware discrete flow matching: training, sampling and oracle checks"};
  app.require_subcommand(1);
  Options opts;

  using Command = std::function<int(const stepflow::RunConfig&)>;
  const std::vector<std::tuple<std::string, std::string, Command>> commands = {
      {"checkerboard", "sample the checkerboard with the exact denoiser and write frames",
       stepflow::cmd_checkerboard},
      {"train", "pretrain a denoiser with the path loss", stepflow::cmd_train},
      {"finetune", "fine-tune a pretrained denoiser with shortcut distillation",
       stepflow::cmd_finetune},
      {"sample", "draw one sequence and write its token timeline", stepflow::cmd_sample},
      {"recover", "corrupt held-out sequences and measure recovery accuracy",
       stepflow::cmd_recover},
      {"eval", "sweep step budgets and write metrics", stepflow::cmd_eval},
      {"oracle-check", "run the oracle battery; exit 3 on failure", stepflow::cmd_oracle_check},
      {"print-config", "print the resolved configuration",
       [](const stepflow::RunConfig& cfg) {
         std::cout << stepflow::dump_config(cfg);
         return 0;
       }},
  };

  std::map<CLI::App*, Command> handlers;
  for (const auto& [name, help, fn] : commands) {
    CLI::App* sub = app.add_subcommand(name, help);
    sub->add_option("-c,--config", opts.config_path, "JSON configuration file")
        ->check(CLI::ExistingFile);
    sub->add_option("-s,--set", opts.overrides, "override a config key, e.g. --set budget=8");
    handlers[sub] = fn;
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : stepflow::kExitUsage;
  }

  try {
    const auto cfg = resolve_config(opts);
    for (const auto& [sub, fn] : handlers) {
      if (sub->parsed()) return fn(cfg);
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return stepflow::exit_code_for(e);
  }
  return stepflow::kExitUsage;
}
