#pragma once

// A two-token, length-one posterior whose logits vary smoothly with t and the
// current token, plus a fine Euler reference for its transition kernel.

#include <cmath>

#include <Eigen/Core>

#include "stepflow/denoiser.hpp"
#include "stepflow/shortcut_teacher.hpp"

namespace stepflow::testing {

class SmoothTwoState : public PosteriorModel {
 public:
  int vocab_size() const override { return 2; }

  // P(x1 = 1 | z, t).
  static double p_one(Token z, double t) {
    const double s = (z == 1 ? 1.2 : -0.8) * (0.5 + t) + 0.9 * std::sin(4.0 * t) - 0.2;
    return 1.0 / (1.0 + std::exp(-s));
  }

 protected:
  RowMatrix compute_logits(const Sequence& z, double t, double) const override {
    const double p = p_one(z[0], t);
    RowMatrix out(1, 2);
    out << std::log1p(-p), std::log(p);
    return out;
  }
};

// Row x_t of the transition matrix over [t, t + h] by forward Euler on
// dP/ds = P Q(s), Q(s)[z][a] = g(s) (p(a | z, s) - [a == z]).
inline Eigen::Vector2d euler_kernel(Token x_t, double t, double h, const Scheduler& sched,
                                    int steps = 10000) {
  Eigen::RowVector2d row = Eigen::RowVector2d::Zero();
  row[x_t] = 1.0;
  const double ds = h / steps;
  for (int k = 0; k < steps; ++k) {
    const double s = t + k * ds;
    const double g = g_instant(sched, s);
    Eigen::Matrix2d q;
    for (Token z = 0; z < 2; ++z) {
      const double p1 = SmoothTwoState::p_one(z, s);
      q(z, 0) = g * ((1.0 - p1) - (z == 0));
      q(z, 1) = g * (p1 - (z == 1));
    }
    row += ds * row * q;
  }
  return row.transpose();
}

// One jump step from x_t with the teacher's averaged posterior and the
// interval-averaged scale.
inline Eigen::Vector2d teacher_kernel(const RowMatrix& logits, Token x_t, double t, double h,
                                      const Scheduler& sched) {
  const RowMatrix p = softmax_rows(logits);
  const double scale = scale_factor(sched, ScaleMode::cumulative, t, h);
  const double jump = -std::expm1(-h * scale * (1.0 - p(0, x_t)));
  Eigen::Vector2d out;
  out[x_t] = 1.0 - jump;
  out[1 - x_t] = jump;
  return out;
}

struct SolverErrors {
  double rk2 = 0.0;
  double rk4 = 0.0;
};

// Mean over seeds and both starting tokens of the TV distance between the
// teacher-induced kernel and the Euler reference.
inline SolverErrors solver_errors(double t, double h, int seeds, const Scheduler& sched) {
  const SmoothTwoState model;
  SolverErrors err;
  for (Token x = 0; x < 2; ++x) {
    const Eigen::Vector2d ref = euler_kernel(x, t, h, sched);
    for (int s = 0; s < seeds; ++s) {
      PositionStreams r2(static_cast<std::uint64_t>(s), static_cast<std::uint64_t>(x), 1);
      PositionStreams r4(static_cast<std::uint64_t>(s), static_cast<std::uint64_t>(x), 1);
      const auto k2 = teacher_kernel(rk2_estimate({x}, t, h, model, sched, r2), x, t, h, sched);
      const auto k4 = teacher_kernel(rk4_estimate({x}, t, h, model, sched, r4), x, t, h, sched);
      err.rk2 += 0.5 * (k2 - ref).cwiseAbs().sum();
      err.rk4 += 0.5 * (k4 - ref).cwiseAbs().sum();
    }
  }
  err.rk2 /= 2.0 * seeds;
  err.rk4 /= 2.0 * seeds;
  return err;
}

}  // namespace stepflow::testing
