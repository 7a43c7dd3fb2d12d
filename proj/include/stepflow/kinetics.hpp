#pragma once

// Schedulers, instantaneous and cumulative scale factors, and factorized CTMC
// rate rows built from posterior distributions.

#include <algorithm>
#include <cmath>
#include <sstream>
#include <string>

#include <Eigen/Core>

#include "stepflow/errors.hpp"
#include "stepflow/types.hpp"

namespace stepflow {

enum class SchedulerKind { linear, quadratic };
enum class ScaleMode { instantaneous, cumulative };

std::string to_string(SchedulerKind kind);
std::string to_string(ScaleMode mode);
SchedulerKind parse_scheduler_kind(const std::string& name);
ScaleMode parse_scale_mode(const std::string& name);

template <typename Scalar>
struct KappaValue {
  Scalar kappa;
  Scalar kappa_dot;
};

// Monotone path schedule kappa: [0,1] -> [0,1] with kappa(0)=0, kappa(1)=1.
// clamp_epsilon keeps log ratios away from the kappa=1 singularity.
template <typename Scalar>
class BasicScheduler {
 public:
  explicit BasicScheduler(SchedulerKind kind = SchedulerKind::linear,
                          Scalar clamp_epsilon = Scalar(1e-4))
      : kind_(kind), clamp_epsilon_(clamp_epsilon) {
    if (!(clamp_epsilon > Scalar(0) && clamp_epsilon <= Scalar(0.01))) {
      std::ostringstream msg;
      msg << "clamp_epsilon must lie in (0, 0.01], got " << clamp_epsilon;
      throw ConfigError(msg.str());
    }
  }

  SchedulerKind kind() const { return kind_; }
  Scalar clamp_epsilon() const { return clamp_epsilon_; }

  // Largest time at which log(1 - kappa) is evaluated.
  Scalar clamp_boundary() const { return Scalar(1) - clamp_epsilon_; }

 private:
  SchedulerKind kind_;
  Scalar clamp_epsilon_;
};

using Scheduler = BasicScheduler<double>;

template <typename Scalar>
KappaValue<Scalar> kappa_eval(const BasicScheduler<Scalar>& scheduler, Scalar t) {
  if (!(t >= Scalar(0) && t <= Scalar(1))) {
    std::ostringstream msg;
    msg << "kappa_eval: t must lie in [0, 1], got " << t;
    throw DomainError(msg.str());
  }
  switch (scheduler.kind()) {
    case SchedulerKind::linear:
      return {t, Scalar(1)};
    case SchedulerKind::quadratic:
      return {t * t, Scalar(2) * t};
  }
  throw DomainError("kappa_eval: unknown scheduler kind");
}

// log(1 - kappa(t)) without forming 1 - kappa when kappa is tiny.
template <typename Scalar>
Scalar log_survival(const BasicScheduler<Scalar>& scheduler, Scalar t) {
  using std::log1p;
  return log1p(-kappa_eval(scheduler, t).kappa);
}

// g(t) = kappa'(t) / (1 - kappa(t)); defined for t < 1 - clamp_epsilon.
template <typename Scalar>
Scalar g_instant(const BasicScheduler<Scalar>& scheduler, Scalar t) {
  if (!(t < scheduler.clamp_boundary())) {
    std::ostringstream msg;
    msg << "g_instant: t=" << t << " is at or beyond the clamp boundary "
        << scheduler.clamp_boundary();
    throw DomainError(msg.str());
  }
  const auto k = kappa_eval(scheduler, t);
  return k.kappa_dot / (Scalar(1) - k.kappa);
}

// A step [t, t+h] with t in [0,1), h in (0,1], t + h <= 1.
template <typename Scalar>
class BasicTimeInterval {
 public:
  BasicTimeInterval(Scalar t, Scalar h) : t_(t), h_(h) {
    // Grids built as s/S can overshoot 1 by an ulp.
    const Scalar slack = Scalar(64) * Eigen::NumTraits<Scalar>::epsilon();
    if (!(t >= Scalar(0) && t < Scalar(1)) || !(h > Scalar(0) && h <= Scalar(1)) ||
        !(t + h <= Scalar(1) + slack)) {
      std::ostringstream msg;
      msg << "invalid time interval t=" << t << " h=" << h << " (need 0<=t<1, 0<h<=1, t+h<=1)";
      throw DomainError(msg.str());
    }
  }

  Scalar t() const { return t_; }
  Scalar h() const { return h_; }

  // Upper endpoint as used inside log ratios.
  Scalar clamped_end(const BasicScheduler<Scalar>& scheduler) const {
    return std::min(t_ + h_, scheduler.clamp_boundary());
  }

 private:
  Scalar t_;
  Scalar h_;
};

using TimeInterval = BasicTimeInterval<double>;

// Interval-averaged scale (1/h) ln[(1 - kappa(t)) / (1 - kappa(t_end))].
template <typename Scalar>
Scalar g_cumulative(const BasicScheduler<Scalar>& scheduler,
                    const BasicTimeInterval<Scalar>& interval) {
  const Scalar t_end = interval.clamped_end(scheduler);
  // When t itself sits beyond the clamp boundary the interval collapses; fall
  // back to the boundary rate so the result stays finite and positive.
  if (!(interval.t() < t_end)) {
    return g_instant(scheduler, scheduler.clamp_boundary() * (Scalar(1) - Scalar(1e-12)));
  }
  const Scalar log_ratio =
      log_survival(scheduler, interval.t()) - log_survival(scheduler, t_end);
  return log_ratio / interval.h();
}

// Scale used by the jump sampler for a step of length h starting at t.
template <typename Scalar>
Scalar scale_factor(const BasicScheduler<Scalar>& scheduler, ScaleMode mode, Scalar t, Scalar h) {
  if (mode == ScaleMode::instantaneous) return g_instant(scheduler, t);
  return g_cumulative(scheduler, BasicTimeInterval<Scalar>(t, h));
}

// One position's generator row: off-diagonals >= 0, diagonal = -exit rate,
// where exit rate = scale * (1 - posterior[current]).
struct RateRow {
  Eigen::VectorXd rates;
  Token current = 0;

  double exit_rate() const { return -rates[current]; }
};

// rates[a] = scale * (posterior[a] - delta_current(a)).
template <typename Derived>
RateRow rate_row_from_posterior(const Eigen::MatrixBase<Derived>& posterior, Token current,
                                double scale) {
  const Eigen::Index n = posterior.size();
  if (current < 0 || current >= n) {
    throw ValidationError("rate_row_from_posterior: current token out of range");
  }
  if (!(scale >= 0.0) || !std::isfinite(scale)) {
    throw ValidationError("rate_row_from_posterior: scale must be finite and nonnegative");
  }
  if ((posterior.array() < 0.0).any()) {
    throw ValidationError("rate_row_from_posterior: posterior has negative entries");
  }
  const double total = posterior.sum();
  if (!(std::abs(total - 1.0) <= 1e-6)) {
    std::ostringstream msg;
    msg << "rate_row_from_posterior: posterior sums to " << total << ", not 1";
    throw ValidationError(msg.str());
  }
  RateRow row;
  row.current = current;
  const Eigen::VectorXd normalized = posterior.derived().template cast<double>() / total;
  row.rates = scale * normalized;
  row.rates[current] = scale * (normalized[current] - 1.0);
  return row;
}

}  // namespace stepflow
