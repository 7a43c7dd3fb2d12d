#include "stepflow/objective.hpp"

#include <cmath>
#include <numeric>

#include "stepflow/denoiser.hpp"
#include "stepflow/errors.hpp"

namespace stepflow {

namespace {

void check_targets(const RowMatrix& rows, const Sequence& x_t, const Sequence& x1) {
  const auto length = static_cast<std::size_t>(rows.rows());
  if (x_t.size() != length || x1.size() != length) {
    throw ValidationError("dfm_loss: sequences and posterior rows differ in length");
  }
  for (std::size_t i = 0; i < length; ++i) {
    if (x_t[i] < 0 || x_t[i] >= rows.cols() || x1[i] < 0 || x1[i] >= rows.cols()) {
      throw ValidationError("dfm_loss: token outside the vocabulary");
    }
  }
}

double position_term(double p_current, double p_target, bool agree) {
  if (agree) return p_current - 1.0;
  return p_current + std::max(std::log(p_target), kLogClamp);
}

}  // namespace

double dfm_loss(const RowMatrix& probs, const Sequence& x_t, const Sequence& x1, double scale) {
  check_targets(probs, x_t, x1);
  double total = 0.0;
  for (Eigen::Index i = 0; i < probs.rows(); ++i) {
    const auto ui = static_cast<std::size_t>(i);
    total += position_term(probs(i, x_t[ui]), probs(i, x1[ui]), x_t[ui] == x1[ui]);
  }
  return -scale * total / static_cast<double>(probs.rows());
}

LossAndGrad dfm_loss_with_grad(const RowMatrix& logits, const Sequence& x_t, const Sequence& x1,
                               double scale) {
  check_targets(logits, x_t, x1);
  const RowMatrix probs = softmax_rows(logits);
  const double inv_len = 1.0 / static_cast<double>(logits.rows());
  LossAndGrad out;
  out.grad = RowMatrix::Zero(logits.rows(), logits.cols());
  double total = 0.0;
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    const auto ui = static_cast<std::size_t>(i);
    const Token a = x_t[ui];
    const Token c = x1[ui];
    const auto p = probs.row(i);
    total += position_term(p[a], p[c], a == c);
    // d p_a / d logits = p_a (e_a - p)
    auto g = out.grad.row(i);
    g = -p[a] * p;
    g[a] += p[a];
    if (a != c && std::log(p[c]) > kLogClamp) {
      // d log p_c / d logits = e_c - p
      g -= p;
      g[c] += 1.0;
    }
    g *= -scale * inv_len;
  }
  out.loss = -scale * total * inv_len;
  return out;
}

double kl_distill(const RowMatrix& teacher_logits, const RowMatrix& student_logits,
                  double temperature) {
  return kl_distill_with_grad(teacher_logits, student_logits, temperature).loss;
}

LossAndGrad kl_distill_with_grad(const RowMatrix& teacher_logits, const RowMatrix& student_logits,
                                 double temperature) {
  if (teacher_logits.rows() != student_logits.rows() ||
      teacher_logits.cols() != student_logits.cols()) {
    throw ValidationError("kl_distill: teacher and student logits differ in shape");
  }
  if (!(temperature > 0.0)) throw ConfigError("kl_distill: temperature must be positive");
  const RowMatrix log_p = log_softmax_rows(teacher_logits, temperature);
  const RowMatrix log_q = log_softmax_rows(student_logits, temperature);
  const double inv_len = 1.0 / static_cast<double>(teacher_logits.rows());
  double total = 0.0;
  for (Eigen::Index i = 0; i < log_p.rows(); ++i) {
    for (Eigen::Index a = 0; a < log_p.cols(); ++a) {
      const double p = std::exp(log_p(i, a));
      if (p > 0.0) total += p * (log_p(i, a) - log_q(i, a));
    }
  }
  LossAndGrad out;
  // Rounding can leave a tiny negative value when the distributions agree.
  out.loss = std::max(0.0, total * inv_len);
  out.grad = (log_q.array().exp() - log_p.array().exp()) * (inv_len / temperature);
  return out;
}

void validate(const BlendConfig& cfg) {
  const auto& grid = StepGridSpec::values();
  if (!(cfg.tau >= grid.front() && cfg.tau <= grid.back())) {
    throw ConfigError("blend threshold tau must lie within the step grid [2^-10, 1]");
  }
  if (!(cfg.temperature > 0.0)) throw ConfigError("distillation temperature must be positive");
}

double blended_loss(double h, double dfm, double dist, const BlendConfig& cfg) {
  return uses_path_loss(h, cfg) ? dfm : dist;
}

double blended_loss(const std::vector<double>& h, const std::vector<double>& dfm,
                    const std::vector<double>& dist, const BlendConfig& cfg) {
  if (h.size() != dfm.size() || h.size() != dist.size() || h.empty()) {
    throw ValidationError("blended_loss: batch vectors must be non-empty and equally sized");
  }
  double total = 0.0;
  for (std::size_t b = 0; b < h.size(); ++b) total += blended_loss(h[b], dfm[b], dist[b], cfg);
  return total / static_cast<double>(h.size());
}

const std::array<double, StepGridSpec::kSize>& StepGridSpec::values() {
  static const std::array<double, kSize> grid = [] {
    std::array<double, kSize> v{};
    for (int i = 0; i < kSize; ++i) v[static_cast<std::size_t>(i)] = std::ldexp(1.0, kMinExponent + i);
    return v;
  }();
  return grid;
}

double StepGridSpec::value(int index) {
  if (index < 0 || index >= kSize) throw ConfigError("step grid index out of range");
  return values()[static_cast<std::size_t>(index)];
}

int StepGridSpec::index_of(double h) {
  const auto& v = values();
  for (int i = 0; i < kSize; ++i) {
    if (v[static_cast<std::size_t>(i)] == h) return i;
  }
  throw ConfigError("step size " + std::to_string(h) + " is not on the 2^k grid");
}

std::string to_string(PolicyKind kind) {
  switch (kind) {
    case PolicyKind::tb10: return "TB10";
    case PolicyKind::tb20: return "TB20";
    case PolicyKind::pu: return "PU";
    case PolicyKind::g: return "G";
    case PolicyKind::ag: return "AG";
  }
  return "?";
}

PolicyKind parse_policy_kind(const std::string& name) {
  if (name == "TB10") return PolicyKind::tb10;
  if (name == "TB20") return PolicyKind::tb20;
  if (name == "PU") return PolicyKind::pu;
  if (name == "G") return PolicyKind::g;
  if (name == "AG") return PolicyKind::ag;
  throw ConfigError("unknown step policy '" + name + "' (expected TB10, TB20, PU, G or AG)");
}

std::array<double, StepGridSpec::kSize> policy_weights(const StepPolicy& policy,
                                                       long training_step) {
  std::array<double, StepGridSpec::kSize> w{};
  w.fill(1.0);
  const std::size_t largest = StepGridSpec::kSize - 1;
  switch (policy.kind) {
    case PolicyKind::tb10:
      w[largest] = 10.0;
      break;
    case PolicyKind::tb20:
      w[largest] = 20.0;
      break;
    case PolicyKind::pu:
      break;
    case PolicyKind::g:
    case PolicyKind::ag: {
      // 2^0 on h = 2^-10 up to 2^10 on h = 1.
      for (std::size_t i = 0; i < w.size(); ++i) w[i] = std::ldexp(1.0, static_cast<int>(i));
      if (policy.kind == PolicyKind::ag) {
        if (policy.anneal_interval <= 0) throw ConfigError("anneal_interval must be positive");
        const long doublings = std::max(0L, training_step) / policy.anneal_interval;
        const int k = static_cast<int>(std::min<long>(doublings, 64));
        for (auto& v : w) v = std::min(policy.cap, std::ldexp(v, k));
      }
      break;
    }
  }
  return w;
}

double sample_h(const StepPolicy& policy, long training_step, Rng& rng) {
  const auto w = policy_weights(policy, training_step);
  const double total = std::accumulate(w.begin(), w.end(), 0.0);
  const double target = rng.uniform() * total;
  double acc = 0.0;
  for (int i = 0; i < StepGridSpec::kSize; ++i) {
    acc += w[static_cast<std::size_t>(i)];
    if (target < acc) return StepGridSpec::value(i);
  }
  return StepGridSpec::value(StepGridSpec::kSize - 1);
}

}  // namespace stepflow
