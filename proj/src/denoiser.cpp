#include "stepflow/denoiser.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <limits>
#include <sstream>

#include "stepflow/errors.hpp"

namespace stepflow {

RowMatrix softmax_rows(const RowMatrix& logits, double temperature) {
  if (!(temperature > 0.0)) throw ValidationError("softmax temperature must be positive");
  RowMatrix out(logits.rows(), logits.cols());
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    const double peak = logits.row(i).maxCoeff();
    // Scalar exp: Eigen's packet exp clamps huge negative inputs to a denormal,
    // which would leave impossible tokens with nonzero mass.
    out.row(i) = ((logits.row(i).array() - peak) / temperature).unaryExpr([](double v) {
      return std::exp(v);
    });
    out.row(i) /= out.row(i).sum();
  }
  return out;
}

RowMatrix log_softmax_rows(const RowMatrix& logits, double temperature) {
  if (!(temperature > 0.0)) throw ValidationError("softmax temperature must be positive");
  RowMatrix out(logits.rows(), logits.cols());
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    const double peak = logits.row(i).maxCoeff();
    const auto shifted = (logits.row(i).array() - peak) / temperature;
    out.row(i) = shifted - std::log(shifted.unaryExpr([](double v) { return std::exp(v); }).sum());
  }
  return out;
}

RowMatrix log_probabilities(const RowMatrix& probs) {
  return probs.unaryExpr([](double p) { return p > 0.0 ? std::log(p) : kImpossibleLogit; });
}

RowMatrix PosteriorModel::logits(const Sequence& z, double t, double h) const {
  evaluations_.fetch_add(1);
  return compute_logits(z, t, h);
}

std::vector<RowMatrix> PosteriorModel::logits_batch(const std::vector<Sequence>& z,
                                                    const std::vector<double>& t,
                                                    const std::vector<double>& h) const {
  if (z.size() != t.size() || z.size() != h.size()) {
    throw ValidationError("logits_batch: states, times and steps differ in count");
  }
  evaluations_.fetch_add(static_cast<long>(z.size()));
  return compute_logits_batch(z, t, h);
}

std::vector<RowMatrix> PosteriorModel::compute_logits_batch(const std::vector<Sequence>& z,
                                                            const std::vector<double>& t,
                                                            const std::vector<double>& h) const {
  std::vector<RowMatrix> out;
  out.reserve(z.size());
  for (std::size_t b = 0; b < z.size(); ++b) out.push_back(compute_logits(z[b], t[b], h[b]));
  return out;
}

std::vector<RowMatrix> PosteriorModel::compute_probabilities_batch(
    const std::vector<Sequence>& z, const std::vector<double>& t,
    const std::vector<double>& h) const {
  auto out = compute_logits_batch(z, t, h);
  for (auto& rows : out) rows = softmax_rows(rows);
  return out;
}

RowMatrix PosteriorModel::probabilities(const Sequence& z, double t, double h,
                                        double temperature) const {
  return std::move(probabilities_batch({z}, {t}, {h}, temperature).front());
}

std::vector<RowMatrix> PosteriorModel::probabilities_batch(const std::vector<Sequence>& z,
                                                           const std::vector<double>& t,
                                                           const std::vector<double>& h,
                                                           double temperature) const {
  if (temperature == 1.0) {
    if (z.size() != t.size() || z.size() != h.size()) {
      throw ValidationError("probabilities_batch: states, times and steps differ in count");
    }
    evaluations_.fetch_add(static_cast<long>(z.size()));
    return compute_probabilities_batch(z, t, h);
  }
  auto out = logits_batch(z, t, h);
  for (auto& rows : out) rows = softmax_rows(rows, temperature);
  return out;
}

// ---------------------------------------------------------------------------
// Exact Bayes

void validate(const ExactBayesSpec& spec) {
  if (spec.support.empty()) throw ValidationError("exact Bayes support is empty");
  if (spec.support.size() > ExactBayesSpec::kMaxSupport) {
    throw ValidationError("exact Bayes support exceeds 65536 entries");
  }
  if (spec.source.kind == SourceKind::mask && !spec.vocab.has_mask()) {
    throw ConfigError("mask source requires a vocabulary with a mask token");
  }
  const std::size_t length = spec.length();
  double total = 0.0;
  for (const auto& entry : spec.support) {
    if (entry.tokens.size() != length) throw ValidationError("support sequences differ in length");
    if (!(entry.probability >= 0.0)) throw ValidationError("support probability is negative");
    validate_sequence(entry.tokens, spec.vocab);
    for (Token tok : entry.tokens) {
      if (spec.vocab.is_mask(tok)) throw ValidationError("mask token appears in target support");
    }
    total += entry.probability;
  }
  if (std::abs(total - 1.0) > 1e-9) {
    std::ostringstream msg;
    msg << "support probabilities sum to " << total << ", not 1";
    throw ValidationError(msg.str());
  }
}

namespace {

// Per-position likelihood lik(z | x) = noise(z) + kappa * [z == x].
struct PathLikelihood {
  double log_noise;        // log noise(z) for non-mask z
  double log_noise_match;  // log(noise(z) + kappa) for non-mask z
  double log_mask;         // log noise(mask) (mask source) or -inf
  double log_kappa;

  PathLikelihood(const SourceSpec& source, const Vocab& vocab, double kappa) {
    constexpr double kNegInf = -std::numeric_limits<double>::infinity();
    const auto safe_log = [](double v) { return v > 0.0 ? std::log(v) : kNegInf; };
    log_kappa = safe_log(kappa);
    if (source.kind == SourceKind::mask) {
      log_noise = kNegInf;
      log_noise_match = log_kappa;
      log_mask = safe_log(1.0 - kappa);
    } else {
      const double noise = (1.0 - kappa) / vocab.data_size();
      log_noise = safe_log(noise);
      log_noise_match = safe_log(noise + kappa);
      log_mask = kNegInf;
    }
  }

  double operator()(Token observed, Token clean, bool observed_is_mask) const {
    if (observed_is_mask) return log_mask;
    return observed == clean ? log_noise_match : log_noise;
  }
};

RowMatrix observed_point_mass(const Sequence& z, const Vocab& vocab) {
  RowMatrix post = RowMatrix::Zero(static_cast<Eigen::Index>(z.size()), vocab.size());
  for (std::size_t i = 0; i < z.size(); ++i) post(static_cast<Eigen::Index>(i), z[i]) = 1.0;
  return post;
}

RowMatrix exact_posterior_unchecked(const ExactBayesSpec& spec, const Sequence& z, double t) {
  const std::size_t length = spec.length();
  if (z.size() != length) throw ValidationError("exact_posterior: state length mismatch");
  validate_sequence(z, spec.vocab);
  if (!(t >= 0.0 && t < 1.0)) throw DomainError("exact_posterior: t must lie in [0, 1)");
  const double kappa = kappa_eval(spec.scheduler, t).kappa;
  const PathLikelihood lik(spec.source, spec.vocab, kappa);

  std::vector<char> z_is_mask(length);
  for (std::size_t j = 0; j < length; ++j) z_is_mask[j] = spec.vocab.is_mask(z[j]) ? 1 : 0;

  std::vector<double> log_weight(spec.support.size());
  double peak = -std::numeric_limits<double>::infinity();
  for (std::size_t s = 0; s < spec.support.size(); ++s) {
    const auto& entry = spec.support[s];
    double lw = entry.probability > 0.0 ? std::log(entry.probability)
                                        : -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < length && std::isfinite(lw); ++j) {
      lw += lik(z[j], entry.tokens[j], z_is_mask[j] != 0);
    }
    log_weight[s] = lw;
    if (lw > peak) peak = lw;
  }
  if (!std::isfinite(peak)) {
    // Under a mask source an unmasked token is already clean, so its row is a
    // point mass whatever the rest of the state says. Simultaneous jumps can
    // land on fully unmasked states outside the support; those keep a
    // defined posterior. Masked rows still need positive evidence.
    if (spec.source.kind == SourceKind::mask &&
        std::none_of(z_is_mask.begin(), z_is_mask.end(), [](char m) { return m != 0; })) {
      return observed_point_mass(z, spec.vocab);
    }
    throw EvidenceError("exact_posterior: observation has zero likelihood under the target");
  }

  RowMatrix post = RowMatrix::Zero(static_cast<Eigen::Index>(length), spec.vocab.size());
  for (std::size_t s = 0; s < spec.support.size(); ++s) {
    if (!std::isfinite(log_weight[s])) continue;
    const double w = std::exp(log_weight[s] - peak);
    const auto& tokens = spec.support[s].tokens;
    for (std::size_t i = 0; i < length; ++i) post(static_cast<Eigen::Index>(i), tokens[i]) += w;
  }
  for (Eigen::Index i = 0; i < post.rows(); ++i) post.row(i) /= post.row(i).sum();
  return post;
}

}  // namespace

RowMatrix exact_posterior(const ExactBayesSpec& spec, const Sequence& z, double t) {
  validate(spec);
  return exact_posterior_unchecked(spec, z, t);
}

ExactBayesModel::ExactBayesModel(ExactBayesSpec spec) : spec_(std::move(spec)) { validate(spec_); }

RowMatrix ExactBayesModel::posterior(const Sequence& z, double t) const {
  return exact_posterior_unchecked(spec_, z, t);
}

RowMatrix ExactBayesModel::compute_logits(const Sequence& z, double t, double) const {
  return log_probabilities(posterior(z, t));
}

std::vector<RowMatrix> ExactBayesModel::compute_probabilities_batch(const std::vector<Sequence>& z,
                                                          const std::vector<double>& t,
                                                          const std::vector<double>&) const {
  std::vector<RowMatrix> out;
  out.reserve(z.size());
  for (std::size_t b = 0; b < z.size(); ++b) out.push_back(posterior(z[b], t[b]));
  return out;
}

// ---------------------------------------------------------------------------
// Bivariate closed form

BivariateBayesModel::BivariateBayesModel(Eigen::MatrixXd joint, Vocab vocab, SourceSpec source,
                                         Scheduler scheduler)
    : joint_(std::move(joint)), vocab_(vocab), source_(source), scheduler_(scheduler) {
  if (joint_.rows() != vocab_.data_size() || joint_.cols() != vocab_.data_size()) {
    throw ConfigError("bivariate joint must be data_size x data_size");
  }
  if ((joint_.array() < 0.0).any() || std::abs(joint_.sum() - 1.0) > 1e-9) {
    throw ValidationError("bivariate joint must be a probability table");
  }
  if (source_.kind == SourceKind::mask && !vocab_.has_mask()) {
    throw ConfigError("mask source requires a vocabulary with a mask token");
  }
  marginal1_ = joint_.rowwise().sum();
  marginal2_ = joint_.colwise().sum().transpose();
}

RowMatrix BivariateBayesModel::posterior(const Sequence& z, double t) const {
  if (z.size() != 2) throw ValidationError("bivariate posterior needs length-2 states");
  validate_sequence(z, vocab_);
  if (!(t >= 0.0 && t < 1.0)) throw DomainError("posterior: t must lie in [0, 1)");
  const double kappa = kappa_eval(scheduler_, t).kappa;
  const int n = vocab_.data_size();

  // noise(z): probability of observing z when the position still holds source noise.
  auto noise = [&](Token obs) {
    if (source_.kind == SourceKind::mask) return vocab_.is_mask(obs) ? 1.0 - kappa : 0.0;
    return vocab_.is_mask(obs) ? 0.0 : (1.0 - kappa) / n;
  };
  const int a = vocab_.data_index(z[0]);
  const int b = vocab_.data_index(z[1]);
  const double noise_a = noise(z[0]);
  const double noise_b = noise(z[1]);

  // Likelihood of observing the token at a position given each clean value.
  Eigen::VectorXd lik_a = Eigen::VectorXd::Constant(n, noise_a);
  Eigen::VectorXd lik_b = Eigen::VectorXd::Constant(n, noise_b);
  if (a >= 0) lik_a[a] += kappa;
  if (b >= 0) lik_b[b] += kappa;

  // Evidence carried by the other coordinate, marginalizing its clean value.
  Eigen::VectorXd w1 = noise_b * marginal1_;
  if (b >= 0) w1 += kappa * joint_.col(b);
  Eigen::VectorXd w2 = noise_a * marginal2_;
  if (a >= 0) w2 += kappa * joint_.row(a).transpose();
  w1 = w1.cwiseProduct(lik_a);
  w2 = w2.cwiseProduct(lik_b);

  const double z1 = w1.sum();
  const double z2 = w2.sum();
  if (!(z1 > 0.0) || !(z2 > 0.0)) {
    if (source_.kind == SourceKind::mask && a >= 0 && b >= 0) return observed_point_mass(z, vocab_);
    throw EvidenceError("posterior: observation has zero likelihood under the target");
  }
  RowMatrix post = RowMatrix::Zero(2, vocab_.size());
  for (int k = 0; k < n; ++k) {
    post(0, vocab_.data_token(k)) = w1[k] / z1;
    post(1, vocab_.data_token(k)) = w2[k] / z2;
  }
  return post;
}

RowMatrix BivariateBayesModel::compute_logits(const Sequence& z, double t, double) const {
  return log_probabilities(posterior(z, t));
}

std::vector<RowMatrix> BivariateBayesModel::compute_probabilities_batch(const std::vector<Sequence>& z,
                                                          const std::vector<double>& t,
                                                          const std::vector<double>&) const {
  std::vector<RowMatrix> out;
  out.reserve(z.size());
  for (std::size_t b = 0; b < z.size(); ++b) out.push_back(posterior(z[b], t[b]));
  return out;
}

Vocab checkerboard_vocab(const CheckerboardSpec& board, const SourceSpec& source) {
  validate(board);
  if (source.kind == SourceKind::mask) return Vocab(board.grid + 1, static_cast<Token>(board.grid));
  return Vocab(board.grid);
}

ExactBayesSpec checkerboard_bayes_spec(const CheckerboardSpec& board, const SourceSpec& source,
                                       const Scheduler& scheduler) {
  ExactBayesSpec spec{{}, source, checkerboard_vocab(board, source), scheduler};
  const double mass = 1.0 / (static_cast<double>(board.grid) * board.cells_per_row());
  for (Token a = 0; a < board.grid; ++a) {
    for (Token b = 0; b < board.grid; ++b) {
      if (board.valid(a, b)) spec.support.push_back({{a, b}, mass});
    }
  }
  return spec;
}

BivariateBayesModel checkerboard_bayes_model(const CheckerboardSpec& board,
                                             const SourceSpec& source, const Scheduler& scheduler) {
  return BivariateBayesModel(board.density(), checkerboard_vocab(board, source), source, scheduler);
}

// ---------------------------------------------------------------------------
// Tabular

TabularModel::TabularModel(Vocab vocab, std::size_t length, int t_bins, TabularKey key)
    : vocab_(vocab), length_(length), t_bins_(t_bins), key_kind_(key) {
  if (length == 0) throw ConfigError("tabular model needs a positive sequence length");
  if (t_bins < 1) throw ConfigError("tabular model needs at least one t bin");
  if (key == TabularKey::mask_context && !vocab.has_mask()) {
    throw ConfigError("mask_context keys require a vocabulary with a mask token");
  }
  // Number of distinct states, checked against the key space.
  double states = std::pow(static_cast<double>(vocab.size()), static_cast<double>(length));
  if (key == TabularKey::full_state && states > static_cast<double>(kMaxFullStates)) {
    throw ConfigError("full-state tabular model needs |V|^L <= 4096");
  }
  if (states * t_bins * static_cast<double>(length) > 9.0e18) {
    throw ConfigError("tabular key space too large");
  }
}

int TabularModel::bin(double t) const {
  const int b = static_cast<int>(t * t_bins_);
  return std::clamp(b, 0, t_bins_ - 1);
}

std::uint64_t TabularModel::key(const Sequence& z, double t, std::size_t position) const {
  std::uint64_t index = 0;
  for (std::size_t j = length_; j-- > 0;) {
    index = index * static_cast<std::uint64_t>(vocab_.size()) + static_cast<std::uint64_t>(z[j]);
  }
  return (index * static_cast<std::uint64_t>(t_bins_) + static_cast<std::uint64_t>(bin(t))) *
             length_ +
         position;
}

void TabularModel::add(const Sequence& x_t, const Sequence& x1, double t) {
  if (x_t.size() != length_ || x1.size() != length_) {
    throw ValidationError("tabular sample length mismatch");
  }
  validate_sequence(x_t, vocab_);
  validate_sequence(x1, vocab_);
  for (std::size_t i = 0; i < length_; ++i) {
    if (key_kind_ == TabularKey::mask_context && !vocab_.is_mask(x_t[i])) continue;
    const int target = vocab_.data_index(x1[i]);
    if (target < 0) throw ValidationError("tabular sample has a mask token as target");
    auto [it, inserted] = counts_.try_emplace(key(x_t, t, i));
    if (inserted) it->second = Eigen::VectorXd::Zero(vocab_.data_size());
    it->second[target] += 1.0;
  }
}

RowMatrix TabularModel::posterior(const Sequence& z, double t) const {
  if (z.size() != length_) throw ValidationError("tabular posterior: state length mismatch");
  validate_sequence(z, vocab_);
  const int n = vocab_.data_size();
  RowMatrix post = RowMatrix::Zero(static_cast<Eigen::Index>(length_), vocab_.size());
  for (std::size_t i = 0; i < length_; ++i) {
    const auto row = static_cast<Eigen::Index>(i);
    if (key_kind_ == TabularKey::mask_context && !vocab_.is_mask(z[i])) {
      post(row, z[i]) = 1.0;
      continue;
    }
    Eigen::VectorXd smoothed = Eigen::VectorXd::Ones(n);
    if (auto it = counts_.find(key(z, t, i)); it != counts_.end()) smoothed += it->second;
    smoothed /= smoothed.sum();
    for (int k = 0; k < n; ++k) post(row, vocab_.data_token(k)) = smoothed[k];
  }
  return post;
}

RowMatrix TabularModel::compute_logits(const Sequence& z, double t, double) const {
  return log_probabilities(posterior(z, t));
}

TabularModel tabular_fit(const std::vector<TabularSample>& samples, const Vocab& vocab,
                         std::size_t length, int t_bins, TabularKey key) {
  TabularModel model(vocab, length, t_bins, key);
  for (const auto& s : samples) model.add(s.x_t, s.x1, s.t);
  return model;
}

// ---------------------------------------------------------------------------
// Cache

std::size_t CachedModel::KeyHash::operator()(const std::vector<std::int64_t>& key) const {
  std::size_t seed = key.size();
  for (auto v : key) {
    seed ^= std::hash<std::int64_t>{}(v) + 0x9e3779b97f4a7c15ULL + (seed << 6) + (seed >> 2);
  }
  return seed;
}

std::size_t CachedModel::cache_size() const {
  std::lock_guard lock(mutex_);
  return cache_.size();
}

RowMatrix CachedModel::compute_logits(const Sequence& z, double t, double h) const {
  std::vector<std::int64_t> key;
  key.reserve(z.size() + 2);
  key.push_back(std::bit_cast<std::int64_t>(t));
  key.push_back(std::bit_cast<std::int64_t>(h));
  key.insert(key.end(), z.begin(), z.end());
  {
    std::lock_guard lock(mutex_);
    if (auto it = cache_.find(key); it != cache_.end()) return it->second;
  }
  RowMatrix value = inner_.logits(z, t, h);
  std::lock_guard lock(mutex_);
  return cache_.emplace(std::move(key), std::move(value)).first->second;
}

}  // namespace stepflow
