#pragma once

// Subcommands of the stepflow tool and the oracle battery they share with the
// test suite. Each command returns a process exit code; errors propagate as
// exceptions and are mapped to exit codes by the caller.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "stepflow/config.hpp"
#include "stepflow/denoiser.hpp"
#include "stepflow/neural.hpp"
#include "stepflow/trainer_eval.hpp"

namespace stepflow {

enum ExitCode : int {
  kExitSuccess = 0,
  kExitUsage = 1,
  kExitValidation = 2,
  kExitAcceptance = 3,
};

// Exit code for an exception escaping a command.
int exit_code_for(const std::exception& e);

// A small explicit target distribution used by the oracle checks.
struct OracleFixture {
  std::string name;
  ExactBayesSpec spec;
};

// JSON: {"name", "vocab_size", "length", "source", "scheduler", "clamp_epsilon",
//        "support": [{"tokens": [...], "probability": p}, ...]}
OracleFixture load_fixture(const std::filesystem::path& path);

struct KolmogorovComparison {
  double tv = 0.0;
  long nfe_per_trajectory = 0;
  Eigen::VectorXd reference;
  Eigen::VectorXd empirical;
};

// Jump-sampler marginals at t = 1 (instantaneous mode) against the forward
// equation integrated from the source distribution.
KolmogorovComparison compare_with_kolmogorov(const ExactBayesSpec& spec, std::size_t trajectories,
                                             int budget, std::uint64_t seed,
                                             int fine_steps = 10000);

struct OracleCheck {
  std::string name;
  double value = 0.0;
  double threshold = 0.0;
  bool pass = false;
};

std::vector<OracleCheck> run_oracle_battery(const OracleFixture& fixture, std::uint64_t seed,
                                            std::size_t trajectories = 200000);

// Largest relative error between backward-pass and central-difference
// gradients of a random linear functional of the logits.
double neural_gradient_check(const NeuralDenoiserSpec& spec, std::uint64_t seed,
                             int coordinates = 200);

// Task data and the denoiser spec implied by a configuration.
struct TaskSetup {
  TrainingData data;
  NeuralDenoiserSpec spec;
  // Display text for each token id.
  std::vector<std::string> token_text;
  // Packed corpus blocks (text task only).
  std::vector<Sequence> blocks;
};

TaskSetup make_task(const RunConfig& cfg);

int cmd_checkerboard(const RunConfig& cfg);
int cmd_train(const RunConfig& cfg);
int cmd_finetune(const RunConfig& cfg);
int cmd_sample(const RunConfig& cfg);
int cmd_recover(const RunConfig& cfg);
int cmd_eval(const RunConfig& cfg);
int cmd_oracle_check(const RunConfig& cfg);

}  // namespace stepflow
