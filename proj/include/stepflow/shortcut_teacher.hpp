#pragma once

// Runge-Kutta style shortcut teachers: averaged logits over [t, t+h] built
// from half-step evaluations and jumps, plus the EMA parameter copy that
// serves them.

#include <cstdint>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "stepflow/denoiser.hpp"
#include "stepflow/kinetics.hpp"
#include "stepflow/rng.hpp"

namespace stepflow {

class EmaRegistry {
 public:
  EmaRegistry(Eigen::VectorXd initial, double decay = 0.999);

  const Eigen::VectorXd& shadow() const { return shadow_; }
  double decay() const { return decay_; }

  // shadow <- decay * shadow + (1 - decay) * params
  void update(const Eigen::VectorXd& params);

 private:
  Eigen::VectorXd shadow_;
  double decay_;
};

inline void ema_update(EmaRegistry& registry, const Eigen::VectorXd& params) {
  registry.update(params);
}

enum class TeacherKind { rk2, rk4 };

std::string to_string(TeacherKind kind);
TeacherKind parse_teacher_kind(const std::string& name);

struct TeacherConfig {
  TeacherKind kind = TeacherKind::rk4;
  bool use_ema = true;
  std::uint64_t teacher_seed = 0;
};

// Model evaluations per teacher call: 2 for RK-2, 4 for RK-4.
int teacher_evaluations(TeacherKind kind);

// (l1 + 2 l2 + 2 l3 + l4) / 6 with evaluations at t, t+h/2, t+h/2, t+h on
// states advanced by half-step jumps; every evaluation is conditioned on h/2.
RowMatrix rk4_estimate(const Sequence& x_t, double t, double h, const PosteriorModel& model,
                       const Scheduler& scheduler, PositionStreams& rng);

// (l1 + l2) / 2 with l1 at (x_t, t) and l2 after one half-step jump.
RowMatrix rk2_estimate(const Sequence& x_t, double t, double h, const PosteriorModel& model,
                       const Scheduler& scheduler, PositionStreams& rng);

RowMatrix shortcut_estimate(TeacherKind kind, const Sequence& x_t, double t, double h,
                            const PosteriorModel& model, const Scheduler& scheduler,
                            PositionStreams& rng);

// Batched form used by the trainer: each stage is one batched model call, so
// per-element results and evaluation counts equal the single-call versions.
std::vector<RowMatrix> shortcut_estimate_batch(TeacherKind kind, const std::vector<Sequence>& x_t,
                                               const std::vector<double>& t,
                                               const std::vector<double>& h,
                                               const PosteriorModel& model,
                                               const Scheduler& scheduler,
                                               std::vector<PositionStreams>& rngs);

}  // namespace stepflow
