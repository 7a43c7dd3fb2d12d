#include "stepflow/shortcut_teacher.hpp"

#include "stepflow/ctmc_sampler.hpp"
#include "stepflow/errors.hpp"

namespace stepflow {

EmaRegistry::EmaRegistry(Eigen::VectorXd initial, double decay)
    : shadow_(std::move(initial)), decay_(decay) {
  if (!(decay >= 0.0 && decay < 1.0)) throw ConfigError("EMA decay must lie in [0, 1)");
}

void EmaRegistry::update(const Eigen::VectorXd& params) {
  if (params.size() != shadow_.size()) {
    throw ConfigError("ema_update: parameter count " + std::to_string(params.size()) +
                      " does not match the shadow copy (" + std::to_string(shadow_.size()) + ")");
  }
  shadow_ = decay_ * shadow_ + (1.0 - decay_) * params;
}

std::string to_string(TeacherKind kind) {
  return kind == TeacherKind::rk2 ? "rk2" : "rk4";
}

TeacherKind parse_teacher_kind(const std::string& name) {
  if (name == "rk2") return TeacherKind::rk2;
  if (name == "rk4") return TeacherKind::rk4;
  throw ConfigError("unknown teacher kind '" + name + "' (expected rk2 or rk4)");
}

int teacher_evaluations(TeacherKind kind) { return kind == TeacherKind::rk2 ? 2 : 4; }

namespace {

void check_interval(double t, double h) { TimeInterval(t, h); }

// Half-step jump of every element from (state, t) using the given logits.
void advance(std::vector<Sequence>& states, const std::vector<RowMatrix>& logits,
             const std::vector<double>& t, const std::vector<double>& half,
             const Scheduler& scheduler, std::vector<PositionStreams>& rngs) {
  for (std::size_t b = 0; b < states.size(); ++b) {
    const double scale = scale_factor(scheduler, ScaleMode::cumulative, t[b], half[b]);
    states[b] = apply_jumps(states[b], softmax_rows(logits[b]), scale, half[b], rngs[b]);
  }
}

}  // namespace

std::vector<RowMatrix> shortcut_estimate_batch(TeacherKind kind, const std::vector<Sequence>& x_t,
                                               const std::vector<double>& t,
                                               const std::vector<double>& h,
                                               const PosteriorModel& model,
                                               const Scheduler& scheduler,
                                               std::vector<PositionStreams>& rngs) {
  const std::size_t n = x_t.size();
  if (t.size() != n || h.size() != n || rngs.size() != n) {
    throw ValidationError("shortcut_estimate_batch: inputs differ in batch size");
  }
  std::vector<double> half(n), mid(n), end(n);
  for (std::size_t b = 0; b < n; ++b) {
    check_interval(t[b], h[b]);
    half[b] = h[b] / 2.0;
    mid[b] = t[b] + half[b];
    end[b] = t[b] + h[b];
  }

  std::vector<Sequence> state = x_t;
  const auto l1 = model.logits_batch(state, t, half);
  advance(state, l1, t, half, scheduler, rngs);
  const auto l2 = model.logits_batch(state, mid, half);

  std::vector<RowMatrix> out(n);
  if (kind == TeacherKind::rk2) {
    for (std::size_t b = 0; b < n; ++b) out[b] = 0.5 * (l1[b] + l2[b]);
    return out;
  }

  advance(state, l2, mid, half, scheduler, rngs);
  const auto l3 = model.logits_batch(state, mid, half);
  advance(state, l3, mid, half, scheduler, rngs);
  const auto l4 = model.logits_batch(state, end, half);
  for (std::size_t b = 0; b < n; ++b) {
    out[b] = (l1[b] + 2.0 * l2[b] + 2.0 * l3[b] + l4[b]) / 6.0;
  }
  return out;
}

RowMatrix shortcut_estimate(TeacherKind kind, const Sequence& x_t, double t, double h,
                            const PosteriorModel& model, const Scheduler& scheduler,
                            PositionStreams& rng) {
  std::vector<PositionStreams> rngs{std::move(rng)};
  auto out = shortcut_estimate_batch(kind, {x_t}, {t}, {h}, model, scheduler, rngs);
  rng = std::move(rngs.front());
  return std::move(out.front());
}

RowMatrix rk4_estimate(const Sequence& x_t, double t, double h, const PosteriorModel& model,
                       const Scheduler& scheduler, PositionStreams& rng) {
  return shortcut_estimate(TeacherKind::rk4, x_t, t, h, model, scheduler, rng);
}

RowMatrix rk2_estimate(const Sequence& x_t, double t, double h, const PosteriorModel& model,
                       const Scheduler& scheduler, PositionStreams& rng) {
  return shortcut_estimate(TeacherKind::rk2, x_t, t, h, model, scheduler, rng);
}

}  // namespace stepflow
