#include "stepflow/trainer_eval.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <numeric>
#include <sstream>

#include "stepflow/errors.hpp"

namespace stepflow {

using Eigen::MatrixXd;
using Eigen::VectorXd;

// ---------------------------------------------------------------------------
// State space

std::uint64_t state_count(int vocab_size, std::size_t length) {
  if (vocab_size < 1) throw ValidationError("state_count: vocabulary must be non-empty");
  std::uint64_t n = 1;
  for (std::size_t i = 0; i < length; ++i) {
    if (n > (std::uint64_t{1} << 40) / static_cast<std::uint64_t>(vocab_size)) {
      throw ValidationError("state space too large to enumerate");
    }
    n *= static_cast<std::uint64_t>(vocab_size);
  }
  return n;
}

std::uint64_t state_index(const Sequence& z, int vocab_size) {
  std::uint64_t index = 0;
  for (Token v : z) {
    if (v < 0 || v >= vocab_size) throw ValidationError("state_index: token outside vocabulary");
    index = index * static_cast<std::uint64_t>(vocab_size) + static_cast<std::uint64_t>(v);
  }
  return index;
}

Sequence state_from_index(std::uint64_t index, int vocab_size, std::size_t length) {
  Sequence z(length);
  for (std::size_t k = length; k-- > 0;) {
    z[k] = static_cast<Token>(index % static_cast<std::uint64_t>(vocab_size));
    index /= static_cast<std::uint64_t>(vocab_size);
  }
  return z;
}

VectorXd source_distribution(const SourceSpec& source, const Vocab& vocab, std::size_t length) {
  const auto n = state_count(vocab.size(), length);
  VectorXd p = VectorXd::Zero(static_cast<Eigen::Index>(n));
  if (source.kind == SourceKind::mask) {
    if (!vocab.mask_id()) throw ConfigError("mask source needs a vocabulary with a mask token");
    p[static_cast<Eigen::Index>(state_index(Sequence(length, *vocab.mask_id()), vocab.size()))] =
        1.0;
    return p;
  }
  const double each = std::pow(1.0 / vocab.data_size(), static_cast<double>(length));
  for (std::uint64_t s = 0; s < n; ++s) {
    const Sequence z = state_from_index(s, vocab.size(), length);
    bool data = true;
    for (Token v : z) data = data && !vocab.is_mask(v);
    if (data) p[static_cast<Eigen::Index>(s)] = each;
  }
  return p;
}

VectorXd empirical_distribution(const std::vector<Sequence>& samples, int vocab_size) {
  if (samples.empty()) throw ValidationError("empirical_distribution: no samples");
  const auto n = state_count(vocab_size, samples.front().size());
  VectorXd p = VectorXd::Zero(static_cast<Eigen::Index>(n));
  for (const auto& z : samples) p[static_cast<Eigen::Index>(state_index(z, vocab_size))] += 1.0;
  return p / static_cast<double>(samples.size());
}

// ---------------------------------------------------------------------------
// Kolmogorov reference

MatrixXd kolmogorov_reference(const GeneratorFn& generator, double t0, double t1, int fine_steps) {
  if (fine_steps < 1) throw ConfigError("kolmogorov_reference: fine_steps must be positive");
  if (!(t1 >= t0)) throw DomainError("kolmogorov_reference: need t1 >= t0");
  const double dt = (t1 - t0) / fine_steps;
  MatrixXd p;
  for (int k = 0; k < fine_steps; ++k) {
    const MatrixXd q = generator(t0 + k * dt);
    if (k == 0) {
      if (q.rows() != q.cols()) throw ValidationError("generator must be square");
      if (static_cast<std::uint64_t>(q.rows()) > kMaxReferenceStates) {
        throw ValidationError("kolmogorov_reference: at most 64 states are supported");
      }
      p = MatrixXd::Identity(q.rows(), q.cols());
    } else if (q.rows() != p.rows() || q.cols() != p.cols()) {
      throw ValidationError("generator changed shape during integration");
    }
    const double tol = 1e-8 * (1.0 + q.cwiseAbs().maxCoeff());
    if (q.rowwise().sum().cwiseAbs().maxCoeff() > tol) {
      throw ValidationError("generator rows must sum to zero");
    }
    p += dt * (p * q);
    if (p.minCoeff() < -1e-9) {
      std::ostringstream msg;
      msg << "kolmogorov_reference: negative transition mass at t=" << t0 + k * dt
          << "; increase fine_steps";
      throw NumericalError(msg.str());
    }
  }
  if (p.size() == 0) return p;
  p = p.cwiseMax(0.0);
  for (Eigen::Index r = 0; r < p.rows(); ++r) p.row(r) /= p.row(r).sum();
  return p;
}

MatrixXd model_generator(const PosteriorModel& model, int vocab_size, std::size_t length,
                         double t, double h, double scale) {
  const auto n = state_count(vocab_size, length);
  std::vector<Sequence> states;
  states.reserve(n);
  for (std::uint64_t s = 0; s < n; ++s) states.push_back(state_from_index(s, vocab_size, length));
  const auto logits = model.logits_batch(states, std::vector<double>(n, t),
                                         std::vector<double>(n, h));
  const auto ni = static_cast<Eigen::Index>(n);
  MatrixXd q = MatrixXd::Zero(ni, ni);
  for (std::uint64_t s = 0; s < n; ++s) {
    const RowMatrix probs = softmax_rows(logits[s]);
    Sequence next = states[s];
    for (std::size_t i = 0; i < length; ++i) {
      for (int a = 0; a < vocab_size; ++a) {
        if (a == states[s][i]) continue;
        next[i] = a;
        q(static_cast<Eigen::Index>(s), static_cast<Eigen::Index>(state_index(next, vocab_size))) +=
            scale * probs(static_cast<Eigen::Index>(i), a);
      }
      next[i] = states[s][i];
    }
    q(static_cast<Eigen::Index>(s), static_cast<Eigen::Index>(s)) = 0.0;
    q(static_cast<Eigen::Index>(s), static_cast<Eigen::Index>(s)) = -q.row(static_cast<Eigen::Index>(s)).sum();
  }
  return q;
}

GeneratorFn instantaneous_generator(const PosteriorModel& model, const Scheduler& scheduler,
                                    int vocab_size, std::size_t length) {
  return [&model, scheduler, vocab_size, length](double t) {
    const double limit = std::nextafter(scheduler.clamp_boundary(), 0.0);
    const double te = std::min(t, limit);
    return model_generator(model, vocab_size, length, te, std::ldexp(1.0, -10),
                           g_instant(scheduler, te));
  };
}

// ---------------------------------------------------------------------------
// Metrics

double tv_distance(const VectorXd& p, const VectorXd& q) {
  if (p.size() != q.size()) throw ValidationError("tv_distance: vectors differ in length");
  return 0.5 * (p - q).cwiseAbs().sum();
}

double entropy_metric(const RowMatrix& probs) {
  if (probs.rows() == 0) return 0.0;
  double total = 0.0;
  for (Eigen::Index i = 0; i < probs.rows(); ++i) {
    for (Eigen::Index a = 0; a < probs.cols(); ++a) {
      const double p = probs(i, a);
      if (p > 0.0) total -= p * std::log(p);
    }
  }
  return total / static_cast<double>(probs.rows());
}

double token_accuracy(const Sequence& predicted, const Sequence& truth,
                      const std::vector<bool>& changed) {
  if (predicted.size() != truth.size() || changed.size() != truth.size()) {
    throw ValidationError("token_accuracy: inputs differ in length");
  }
  std::size_t total = 0, correct = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (!changed[i]) continue;
    ++total;
    if (predicted[i] == truth[i]) ++correct;
  }
  if (total == 0) throw ValidationError("token_accuracy: empty changed set");
  return static_cast<double>(correct) / static_cast<double>(total);
}

double kl_divergence(const VectorXd& p, const VectorXd& q, double floor) {
  if (p.size() != q.size()) throw ValidationError("kl_divergence: vectors differ in length");
  double total = 0.0;
  for (Eigen::Index k = 0; k < p.size(); ++k) {
    if (p[k] > 0.0) total += p[k] * (std::log(p[k]) - std::log(std::max(q[k], floor)));
  }
  return std::max(0.0, total);
}

VectorXd jump_distribution(const RowMatrix& probs, const Sequence& z, double scale, double h,
                           int vocab_size) {
  if (static_cast<std::size_t>(probs.rows()) != z.size() || probs.cols() != vocab_size) {
    throw ValidationError("jump_distribution: posterior shape does not match the state");
  }
  VectorXd dist = VectorXd::Ones(1);
  for (std::size_t i = 0; i < z.size(); ++i) {
    const auto row = probs.row(static_cast<Eigen::Index>(i));
    const Token current = z[i];
    const double stay = std::exp(-h * scale * (1.0 - row[current]));
    VectorXd kernel = VectorXd::Zero(vocab_size);
    double remainder = 0.0;
    for (int a = 0; a < vocab_size; ++a) {
      if (a != current) remainder += row[a];
    }
    if (remainder > 0.0) {
      for (int a = 0; a < vocab_size; ++a) {
        if (a != current) kernel[a] = (1.0 - stay) * row[a] / remainder;
      }
      kernel[current] = stay;
    } else {
      kernel[current] = 1.0;
    }
    VectorXd next(dist.size() * vocab_size);
    for (Eigen::Index s = 0; s < dist.size(); ++s) {
      next.segment(s * vocab_size, vocab_size) = dist[s] * kernel;
    }
    dist = std::move(next);
  }
  return dist;
}

VectorXd one_step_distribution(const PosteriorModel& model, const Scheduler& scheduler,
                               const Sequence& z, double t, double h, ScaleMode mode) {
  const double scale = scale_factor(scheduler, mode, t, h);
  return jump_distribution(softmax_rows(model.logits(z, t, h)), z, scale, h, model.vocab_size());
}

VectorXd two_half_steps_distribution(const PosteriorModel& model, const Scheduler& scheduler,
                                     const Sequence& z, double t, double h, ScaleMode mode,
                                     double prune) {
  const int vocab_size = model.vocab_size();
  const double half = h / 2.0;
  const VectorXd first = one_step_distribution(model, scheduler, z, t, half, mode);
  std::vector<Sequence> mids;
  std::vector<double> weights;
  for (Eigen::Index s = 0; s < first.size(); ++s) {
    if (first[s] > prune) {
      mids.push_back(state_from_index(static_cast<std::uint64_t>(s), vocab_size, z.size()));
      weights.push_back(first[s]);
    }
  }
  const double t_mid = t + half;
  const double scale = scale_factor(scheduler, mode, t_mid, half);
  const auto logits = model.logits_batch(mids, std::vector<double>(mids.size(), t_mid),
                                         std::vector<double>(mids.size(), half));
  VectorXd out = VectorXd::Zero(first.size());
  for (std::size_t k = 0; k < mids.size(); ++k) {
    out += weights[k] * jump_distribution(softmax_rows(logits[k]), mids[k], scale, half, vocab_size);
  }
  return out / out.sum();
}

std::vector<ProbeState> make_probes(std::size_t count, double t_max, const DataSampler& data,
                                    const SourceSpec& source, const Vocab& vocab,
                                    std::size_t length, const Scheduler& scheduler,
                                    std::uint64_t seed) {
  Rng rng = Rng::stream(seed, {0x70726f6265ULL});
  std::vector<ProbeState> probes;
  probes.reserve(count);
  for (std::size_t k = 0; k < count; ++k) {
    const double t = rng.uniform() * t_max;
    const Sequence x1 = data(rng);
    const Sequence x0 = sample_source(source, vocab, length, rng);
    probes.push_back({sample_conditional_xt(x0, x1, t, scheduler, rng), t});
  }
  return probes;
}

double self_consistency_kl(const PosteriorModel& model, const Scheduler& scheduler,
                           const std::vector<ProbeState>& probes, double h, ScaleMode mode) {
  if (probes.empty()) throw ValidationError("self_consistency_kl: no probe states");
  double total = 0.0;
  for (const auto& probe : probes) {
    const VectorXd one = one_step_distribution(model, scheduler, probe.z, probe.t, h, mode);
    const VectorXd two = two_half_steps_distribution(model, scheduler, probe.z, probe.t, h, mode);
    total += kl_divergence(one, two);
  }
  return total / static_cast<double>(probes.size());
}

// ---------------------------------------------------------------------------
// References

std::size_t ExplicitReference::Hash::operator()(const Sequence& z) const {
  std::size_t h = 0xcbf29ce484222325ULL;
  for (Token v : z) {
    h ^= static_cast<std::size_t>(static_cast<std::uint32_t>(v));
    h *= 0x100000001b3ULL;
  }
  return h;
}

ExplicitReference::ExplicitReference(std::vector<WeightedSequence> support, const Vocab& vocab,
                                     double smoothing)
    : vocab_(vocab), smoothing_(smoothing) {
  if (support.empty()) throw ValidationError("ExplicitReference: empty support");
  if (!(smoothing > 0.0 && smoothing < 1.0)) {
    throw ConfigError("reference smoothing must lie in (0, 1)");
  }
  length_ = support.front().tokens.size();
  double total = 0.0;
  for (auto& w : support) {
    if (w.tokens.size() != length_) throw ValidationError("ExplicitReference: ragged support");
    for (Token v : w.tokens) {
      if (!vocab.contains(v) || vocab.is_mask(v)) {
        throw ValidationError("ExplicitReference: support must use data tokens");
      }
    }
    total += w.probability;
    probs_[w.tokens] += w.probability;
  }
  for (auto& [seq, p] : probs_) p /= total;
  log_total_states_ = static_cast<double>(length_) * std::log(static_cast<double>(vocab.data_size()));
}

double ExplicitReference::log_prob(const Sequence& x) const {
  const double floor = smoothing_ * std::exp(-log_total_states_);
  const auto it = probs_.find(x);
  if (it == probs_.end()) return std::log(floor);
  return std::log((1.0 - smoothing_) * it->second + floor);
}

double ExplicitReference::entropy_per_token() const {
  const double floor = smoothing_ * std::exp(-log_total_states_);
  double h = 0.0;
  for (const auto& [seq, p] : probs_) {
    const double q = (1.0 - smoothing_) * p + floor;
    h -= q * std::log(q);
  }
  const double rest = std::exp(log_total_states_) - static_cast<double>(probs_.size());
  h -= rest * floor * std::log(floor);
  return h / static_cast<double>(length_);
}

CheckerboardReference::CheckerboardReference(CheckerboardSpec board, double smoothing)
    : board_(board), smoothing_(smoothing) {
  validate(board_);
  if (!(smoothing > 0.0 && smoothing < 1.0)) {
    throw ConfigError("reference smoothing must lie in (0, 1)");
  }
}

double CheckerboardReference::log_prob(const Sequence& x) const {
  if (x.size() != 2) throw ValidationError("checkerboard reference expects length-2 sequences");
  const double cells = static_cast<double>(board_.grid) * board_.grid;
  const double floor = smoothing_ / cells;
  const bool in_grid = x[0] >= 0 && x[0] < board_.grid && x[1] >= 0 && x[1] < board_.grid;
  if (!in_grid || !board_.valid(x[0], x[1])) return std::log(floor);
  const double density = 1.0 / (static_cast<double>(board_.grid) * board_.cells_per_row());
  return std::log((1.0 - smoothing_) * density + floor);
}

TrigramReference::TrigramReference(const std::vector<Sequence>& corpus, const Vocab& vocab)
    : vocab_(vocab) {
  const int d = vocab.data_size();
  const Token pad = static_cast<Token>(d);
  for (const auto& seq : corpus) {
    Token a = pad, b = pad;
    for (Token v : seq) {
      if (!vocab.contains(v) || vocab.is_mask(v)) {
        throw ValidationError("trigram reference must be fitted on data tokens");
      }
      auto [it, inserted] = counts_.try_emplace(context_key(a, b), VectorXd::Zero(d));
      it->second[vocab.data_index(v)] += 1.0;
      a = b;
      b = static_cast<Token>(vocab.data_index(v));
    }
  }
}

std::uint64_t TrigramReference::context_key(Token a, Token b) const {
  const auto base = static_cast<std::uint64_t>(vocab_.data_size()) + 1;
  return static_cast<std::uint64_t>(a) * base + static_cast<std::uint64_t>(b);
}

double TrigramReference::log_prob(const Sequence& x) const {
  const int d = vocab_.data_size();
  const Token pad = static_cast<Token>(d);
  Token a = pad, b = pad;
  double total = 0.0;
  for (Token v : x) {
    const auto it = counts_.find(context_key(a, b));
    const double context_total = it == counts_.end() ? 0.0 : it->second.sum();
    const bool data = vocab_.contains(v) && !vocab_.is_mask(v);
    // Tokens outside the data vocabulary get the mass of an unseen token.
    const double count =
        (data && it != counts_.end()) ? it->second[vocab_.data_index(v)] : 0.0;
    total += std::log((count + 1.0) / (context_total + d));
    a = b;
    b = data ? static_cast<Token>(vocab_.data_index(v)) : pad;
  }
  return total;
}

double nll_eval(const std::vector<Sequence>& samples, const ReferenceModel& reference) {
  double total = 0.0;
  std::size_t tokens = 0;
  for (const auto& x : samples) {
    total -= reference.log_prob(x);
    tokens += x.size();
  }
  if (tokens == 0) throw ValidationError("nll_eval: no tokens to score");
  return total / static_cast<double>(tokens);
}

// ---------------------------------------------------------------------------
// Training

std::string to_string(TrainPhase phase) {
  return phase == TrainPhase::pretrain ? "pretrain" : "finetune";
}

void validate(const TrainConfig& cfg) {
  if (cfg.batch_size < 1) throw ConfigError("batch_size must be positive");
  if (cfg.steps < 0) throw ConfigError("steps must be non-negative");
  if (!(cfg.learning_rate >= 0.0) || !std::isfinite(cfg.learning_rate)) {
    throw ConfigError("learning_rate must be a finite non-negative number");
  }
  if (!(cfg.grad_clip >= 0.0)) throw ConfigError("grad_clip must be non-negative");
  if (!(cfg.ema_decay >= 0.0 && cfg.ema_decay < 1.0)) throw ConfigError("ema decay must lie in [0, 1)");
  validate(cfg.blend);
  if (cfg.phase == TrainPhase::pretrain && cfg.scale_mode != ScaleMode::instantaneous) {
    throw ConfigError("pretraining uses the instantaneous scale");
  }
  if (cfg.phase == TrainPhase::finetune && cfg.scale_mode != ScaleMode::cumulative) {
    throw ConfigError("fine-tuning uses the cumulative scale");
  }
}

TrainingData checkerboard_data(const CheckerboardSpec& board, const SourceSpec& source) {
  validate(board);
  return {checkerboard_vocab(board, source), 2,
          [board](Rng& rng) { return checkerboard_sample(board, rng); }};
}

TrainingData corpus_data(std::vector<Sequence> blocks, const Vocab& vocab) {
  if (blocks.empty()) throw ValidationError("corpus has no complete blocks");
  const std::size_t length = blocks.front().size();
  for (const auto& b : blocks) {
    if (b.size() != length) throw ValidationError("corpus blocks differ in length");
    validate_sequence(b, vocab);
  }
  auto shared = std::make_shared<const std::vector<Sequence>>(std::move(blocks));
  return {vocab, length, [shared](Rng& rng) { return (*shared)[rng.below(shared->size())]; }};
}

namespace {

struct Batch {
  std::vector<Sequence> x1, x_t;
  std::vector<double> t, h;
};

void sgd_step(VectorXd& params, VectorXd grad, double lr, double clip) {
  if (!grad.allFinite()) throw NumericalError("non-finite gradient");
  if (lr == 0.0) return;
  const double norm = grad.norm();
  if (clip > 0.0 && norm > clip) grad *= clip / norm;
  params -= lr * grad;
}

void place_column(MatrixXd& dlogits, Eigen::Index b, const RowMatrix& grad) {
  dlogits.col(b) = Eigen::Map<const VectorXd>(grad.data(), grad.size());
}

std::string branch_label(int path_count, int batch) {
  if (path_count == batch) return "dfm";
  if (path_count == 0) return "distill";
  return "mixed";
}

void check_loss(double loss, long step, const Batch& batch) {
  if (std::isfinite(loss)) return;
  std::ostringstream msg;
  msg << "training diverged at step " << step << " (loss " << loss << "); batch t range ["
      << *std::min_element(batch.t.begin(), batch.t.end()) << ", "
      << *std::max_element(batch.t.begin(), batch.t.end()) << "]";
  throw NumericalError(msg.str());
}

void check_shapes(const TrainingData& data, const NeuralDenoiser& model) {
  if (model.spec().vocab_size != data.vocab.size() ||
      static_cast<std::size_t>(model.spec().length) != data.length) {
    throw ConfigError("denoiser shape does not match the training data");
  }
}

}  // namespace

TrainResult pretrain_loop(const TrainConfig& cfg, const TrainingData& data, NeuralDenoiser& model) {
  validate(cfg);
  if (cfg.phase != TrainPhase::pretrain) throw ConfigError("pretrain_loop needs phase=pretrain");
  check_shapes(data, model);
  Rng rng = Rng::stream(cfg.seed, {0x7072657472ULL});
  const int batch_size = cfg.batch_size;
  const int vocab_size = data.vocab.size();
  const int length = static_cast<int>(data.length);
  TrainResult result;
  result.curve.reserve(static_cast<std::size_t>(cfg.steps));

  for (long step = 0; step < cfg.steps; ++step) {
    Batch batch;
    for (int b = 0; b < batch_size; ++b) {
      Sequence x1 = data.sample(rng);
      const Sequence x0 = sample_source(cfg.source, data.vocab, data.length, rng);
      const double t = rng.uniform() * cfg.scheduler.clamp_boundary();
      batch.h.push_back(sample_h(cfg.policy, step, rng));
      batch.x_t.push_back(sample_conditional_xt(x0, x1, t, cfg.scheduler, rng));
      batch.x1.push_back(std::move(x1));
      batch.t.push_back(t);
    }
    ForwardCache cache;
    const MatrixXd logits = model.forward(batch.x_t, batch.t, batch.h, &cache);
    result.student_evaluations += batch_size;
    MatrixXd dlogits(logits.rows(), logits.cols());
    double loss = 0.0;
    for (int b = 0; b < batch_size; ++b) {
      const auto lg = dfm_loss_with_grad(logits_column(logits, b, length, vocab_size),
                                         batch.x_t[b], batch.x1[b],
                                         g_instant(cfg.scheduler, batch.t[b]));
      loss += lg.loss / batch_size;
      place_column(dlogits, b, lg.grad / batch_size);
    }
    check_loss(loss, step, batch);
    sgd_step(model.mutable_parameters(), model.backward(cache, dlogits), cfg.learning_rate,
             cfg.grad_clip);
    const double mean_h = std::accumulate(batch.h.begin(), batch.h.end(), 0.0) / batch_size;
    result.curve.push_back({step + 1, loss, "dfm", mean_h});
  }
  return result;
}

TrainResult finetune_loop(const TrainConfig& cfg, const TrainingData& data, NeuralDenoiser& model,
                          EmaRegistry& ema) {
  validate(cfg);
  if (cfg.phase != TrainPhase::finetune) throw ConfigError("finetune_loop needs phase=finetune");
  check_shapes(data, model);
  if (ema.shadow().size() != model.parameters().size()) {
    throw ConfigError("EMA registry does not match the student parameters");
  }
  Rng rng = Rng::stream(cfg.seed, {0x66696e65ULL});
  const int batch_size = cfg.batch_size;
  const int vocab_size = data.vocab.size();
  const int length = static_cast<int>(data.length);
  TrainResult result;
  result.curve.reserve(static_cast<std::size_t>(cfg.steps));

  for (long step = 0; step < cfg.steps; ++step) {
    Batch batch;
    for (int b = 0; b < batch_size; ++b) {
      Sequence x1 = data.sample(rng);
      const Sequence x0 = sample_source(cfg.source, data.vocab, data.length, rng);
      const double h = sample_h(cfg.policy, step, rng);
      const double t = rng.uniform() * (1.0 - h);
      batch.h.push_back(h);
      batch.x_t.push_back(sample_conditional_xt(x0, x1, t, cfg.scheduler, rng));
      batch.x1.push_back(std::move(x1));
      batch.t.push_back(t);
    }
    ForwardCache cache;
    const MatrixXd logits = model.forward(batch.x_t, batch.t, batch.h, &cache);
    result.student_evaluations += batch_size;

    // Teacher targets for the distillation branch, from a frozen snapshot.
    std::vector<int> distill;
    for (int b = 0; b < batch_size; ++b) {
      if (!uses_path_loss(batch.h[b], cfg.blend)) distill.push_back(b);
    }
    std::vector<RowMatrix> targets;
    if (!distill.empty()) {
      const NeuralDenoiser teacher(model.spec(),
                                   cfg.teacher.use_ema ? ema.shadow() : model.parameters());
      std::vector<Sequence> xs;
      std::vector<double> ts, hs;
      std::vector<PositionStreams> rngs;
      for (int b : distill) {
        xs.push_back(batch.x_t[b]);
        ts.push_back(batch.t[b]);
        hs.push_back(batch.h[b]);
        rngs.emplace_back(cfg.teacher.teacher_seed,
                          static_cast<std::uint64_t>(step) * batch_size + b, data.length);
      }
      targets = shortcut_estimate_batch(cfg.teacher.kind, xs, ts, hs, teacher, cfg.scheduler, rngs);
      result.teacher_evaluations += teacher.evaluations();
    }

    MatrixXd dlogits(logits.rows(), logits.cols());
    double loss = 0.0;
    std::size_t next_target = 0;
    for (int b = 0; b < batch_size; ++b) {
      const RowMatrix student = logits_column(logits, b, length, vocab_size);
      LossAndGrad lg;
      if (uses_path_loss(batch.h[b], cfg.blend)) {
        const double scale =
            scale_factor(cfg.scheduler, ScaleMode::cumulative, batch.t[b], batch.h[b]);
        lg = dfm_loss_with_grad(student, batch.x_t[b], batch.x1[b], scale);
      } else {
        lg = kl_distill_with_grad(targets[next_target++], student, cfg.blend.temperature);
      }
      loss += lg.loss / batch_size;
      place_column(dlogits, b, lg.grad / batch_size);
    }
    check_loss(loss, step, batch);
    sgd_step(model.mutable_parameters(), model.backward(cache, dlogits), cfg.learning_rate,
             cfg.grad_clip);
    ema.update(model.parameters());
    const double mean_h = std::accumulate(batch.h.begin(), batch.h.end(), 0.0) / batch_size;
    result.curve.push_back({step + 1, loss,
                            branch_label(batch_size - static_cast<int>(distill.size()), batch_size),
                            mean_h});
  }
  return result;
}

namespace {

std::string format_number(double v) {
  std::ostringstream out;
  out << std::setprecision(12) << v;
  return out.str();
}

std::string format_optional(const std::optional<double>& v) {
  return v ? format_number(*v) : std::string();
}

}  // namespace

void write_loss_csv(const std::filesystem::path& path, const std::vector<LossRow>& curve) {
  std::ostringstream out;
  out << "step,loss,branch,h\n";
  for (const auto& row : curve) {
    out << row.step << ',' << format_number(row.loss) << ',' << row.branch << ','
        << format_number(row.h) << '\n';
  }
  write_file_atomic(path, out.str());
}

// ---------------------------------------------------------------------------
// Sampler evaluation

double checkerboard_valid_fraction(const CheckerboardSpec& board,
                                   const std::vector<Sequence>& samples) {
  if (samples.empty()) throw ValidationError("checkerboard_valid_fraction: no samples");
  std::size_t valid = 0;
  for (const auto& x : samples) {
    if (x.size() != 2) throw ValidationError("checkerboard samples have length 2");
    const bool in_grid = x[0] >= 0 && x[0] < board.grid && x[1] >= 0 && x[1] < board.grid;
    if (in_grid && board.valid(x[0], x[1])) ++valid;
  }
  return static_cast<double>(valid) / static_cast<double>(samples.size());
}

SamplerEvaluation evaluate_sampler(const PosteriorModel& model, const TrainingData& data,
                                   const SourceSpec& source, const Scheduler& scheduler,
                                   const ReferenceModel& reference, int budget, ScaleMode mode,
                                   std::size_t count, std::uint64_t seed) {
  const StepGrid grid(budget);
  EnsembleOptions options;
  options.mode = mode;
  auto ensemble =
      sample_ensemble(source, data.vocab, data.length, model, grid, scheduler, count, seed, options);
  SamplerEvaluation out;
  out.row.budget = budget;
  out.row.mode = mode;
  out.row.mean_jumps = ensemble.mean_jumps;
  out.row.nll = nll_eval(ensemble.finals, reference);
  // Posterior uncertainty at the last grid time, evaluated on the final states.
  const double t_last = grid.time(budget - 1);
  const std::size_t chunk = 4096;
  double entropy = 0.0;
  for (std::size_t begin = 0; begin < count; begin += chunk) {
    const std::size_t n = std::min(chunk, count - begin);
    const std::vector<Sequence> part(ensemble.finals.begin() + static_cast<std::ptrdiff_t>(begin),
                                     ensemble.finals.begin() +
                                         static_cast<std::ptrdiff_t>(begin + n));
    const auto logits = model.logits_batch(part, std::vector<double>(n, t_last),
                                           std::vector<double>(n, grid.step()));
    for (const auto& l : logits) entropy += entropy_metric(softmax_rows(l));
  }
  out.row.entropy = count ? entropy / static_cast<double>(count) : 0.0;
  out.finals = std::move(ensemble.finals);
  return out;
}

void write_metrics_csv(const std::filesystem::path& path, const std::vector<MetricsRow>& rows) {
  std::ostringstream out;
  out << "budget,mode,entropy_nats,token_accuracy,nll_nats_per_token,mean_jumps,tv,valid_fraction\n";
  for (const auto& r : rows) {
    out << r.budget << ',' << to_string(r.mode) << ',' << format_number(r.entropy) << ','
        << format_optional(r.token_accuracy) << ',' << format_number(r.nll) << ','
        << format_number(r.mean_jumps) << ',' << format_optional(r.tv) << ','
        << format_optional(r.valid_fraction) << '\n';
  }
  write_file_atomic(path, out.str());
}

void write_file_atomic(const std::filesystem::path& path, const std::string& contents) {
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp.string());
    out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
    if (!out) throw IoError("failed writing " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move " + tmp.string() + " to " + path.string() + ": " + ec.message());
}

}  // namespace stepflow
