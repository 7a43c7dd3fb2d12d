#pragma once

// Run configuration: a flat JSON object, versioned, with a default for every
// key. Unknown keys are rejected.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "stepflow/kinetics.hpp"
#include "stepflow/objective.hpp"
#include "stepflow/path_data.hpp"
#include "stepflow/shortcut_teacher.hpp"

namespace stepflow {

enum class TaskKind { checkerboard, text };

std::string to_string(TaskKind kind);
TaskKind parse_task_kind(const std::string& name);

struct RunConfig {
  static constexpr int kVersion = 1;

  std::uint64_t seed = 0;
  TaskKind task = TaskKind::checkerboard;
  SchedulerKind scheduler = SchedulerKind::linear;
  double clamp_epsilon = 1e-4;
  SourceKind source = SourceKind::mask;
  // Sequence length for text; checkerboard sequences always have length 2.
  int length = 64;
  ScaleMode scale_mode = ScaleMode::cumulative;
  int budget = 8;
  std::vector<int> budgets{1, 2, 4, 8, 16, 32, 64, 128, 256};

  PolicyKind policy = PolicyKind::ag;
  long anneal_interval = 10000;
  double tau = 1.0 / 512.0;
  double temperature = 1.0;
  TeacherKind teacher = TeacherKind::rk4;
  bool use_ema = true;
  double ema_decay = 0.999;

  int embed_dim = 16;
  int hidden_dim = 128;
  int depth = 2;
  int cond_dim = 64;
  int freq_dim = 32;

  int batch_size = 64;
  long pretrain_steps = 20000;
  long finetune_steps = 12000;
  double learning_rate = 0.05;
  double finetune_learning_rate = 0.02;
  double grad_clip = 1.0;

  int samples = 10000;
  int frames = 100;
  std::string frame_format = "csv";
  double corruption_fraction = 0.5;
  bool freeze_context = true;

  // Relative paths are resolved against the configuration file's directory.
  std::filesystem::path corpus;
  std::string alphabet;
  std::filesystem::path checkpoint = "checkpoint.bin";
  std::filesystem::path init_checkpoint;
  std::filesystem::path fixture;
  std::filesystem::path output_dir = "out";

  Scheduler make_scheduler() const { return Scheduler(scheduler, clamp_epsilon); }
  SourceSpec make_source() const { return SourceSpec{source}; }
  BlendConfig make_blend() const { return BlendConfig{tau, temperature}; }
  StepPolicy make_policy() const;
};

void validate(const RunConfig& cfg);

// Parse a JSON document; `base_dir` anchors relative paths.
RunConfig parse_config(const std::string& text, const std::filesystem::path& base_dir = {});
RunConfig load_config(const std::filesystem::path& path);
std::string dump_config(const RunConfig& cfg);

// Apply a "key=value" override using the same parsing rules as the file.
void apply_override(RunConfig& cfg, const std::string& assignment,
                    const std::filesystem::path& base_dir = {});

}  // namespace stepflow
