#pragma once

// Training losses: the path (DFM) loss, KL distillation towards teacher
// logits, the per-sample blend between them, and step-size sampling policies.

#include <array>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "stepflow/rng.hpp"
#include "stepflow/types.hpp"

namespace stepflow {

// Floor applied to log p(x1 | x_t) inside the path loss.
inline constexpr double kLogClamp = -30.0;

struct LossAndGrad {
  double loss = 0.0;
  // d loss / d logits, L x |V|; only filled by the *_with_grad variants.
  RowMatrix grad;
};

// Mean over positions of
//   -scale * [p(x_t^i) - d_i + (1 - d_i) * max(log p(x1^i), -30)],  d_i = [x_t^i == x1^i].
double dfm_loss(const RowMatrix& probs, const Sequence& x_t, const Sequence& x1, double scale);
// Same loss with probs = softmax(logits) and its gradient with respect to the logits.
LossAndGrad dfm_loss_with_grad(const RowMatrix& logits, const Sequence& x_t, const Sequence& x1,
                               double scale);

// Mean over positions of KL(softmax(teacher/T) || softmax(student/T)).
double kl_distill(const RowMatrix& teacher_logits, const RowMatrix& student_logits,
                  double temperature = 1.0);
// Gradient flows to the student logits only.
LossAndGrad kl_distill_with_grad(const RowMatrix& teacher_logits, const RowMatrix& student_logits,
                                 double temperature = 1.0);

struct BlendConfig {
  double tau = 1.0 / 512.0;
  double temperature = 1.0;
};

void validate(const BlendConfig& cfg);

// Path loss below the threshold, distillation at or above it.
inline bool uses_path_loss(double h, const BlendConfig& cfg) { return h < cfg.tau; }
double blended_loss(double h, double dfm, double dist, const BlendConfig& cfg);
// Batch mean of per-sample selections.
double blended_loss(const std::vector<double>& h, const std::vector<double>& dfm,
                    const std::vector<double>& dist, const BlendConfig& cfg);

// Step sizes 2^k, k = -10..0, increasing.
class StepGridSpec {
 public:
  static constexpr int kSize = 11;
  static constexpr int kMinExponent = -10;

  static double value(int index);
  static const std::array<double, kSize>& values();
  // Index of an exact grid value; ConfigError otherwise.
  static int index_of(double h);
};

enum class PolicyKind { tb10, tb20, pu, g, ag };

std::string to_string(PolicyKind kind);
PolicyKind parse_policy_kind(const std::string& name);

struct StepPolicy {
  PolicyKind kind = PolicyKind::ag;
  long anneal_interval = 10000;
  double cap = 1024.0;
};

// Unnormalized weights aligned with StepGridSpec::values() at a training step.
std::array<double, StepGridSpec::kSize> policy_weights(const StepPolicy& policy,
                                                       long training_step);
double sample_h(const StepPolicy& policy, long training_step, Rng& rng);

}  // namespace stepflow
