#pragma once

// The posterior interface p_{1|t}(. | z) and its non-neural implementations:
// the exact Bayes oracle (enumeration over an explicit target support), a
// closed-form bivariate variant, and a count-based tabular model.

#include <atomic>
#include <cstdint>
#include <mutex>
#include <unordered_map>
#include <vector>

#include <Eigen/Core>

#include "stepflow/kinetics.hpp"
#include "stepflow/path_data.hpp"
#include "stepflow/types.hpp"

namespace stepflow {

// Row-wise softmax of logits / temperature.
RowMatrix softmax_rows(const RowMatrix& logits, double temperature = 1.0);
RowMatrix log_softmax_rows(const RowMatrix& logits, double temperature = 1.0);
// Elementwise log with kImpossibleLogit in place of log(0).
RowMatrix log_probabilities(const RowMatrix& probs);

// Anything that maps (state, t, h) to per-position target-token logits (L x |V|).
// Every call through logits()/logits_batch() is counted, one per sequence.
class PosteriorModel {
 public:
  PosteriorModel() = default;
  PosteriorModel(const PosteriorModel&) {}
  PosteriorModel& operator=(const PosteriorModel&) { return *this; }
  virtual ~PosteriorModel() = default;

  RowMatrix logits(const Sequence& z, double t, double h) const;
  std::vector<RowMatrix> logits_batch(const std::vector<Sequence>& z, const std::vector<double>& t,
                                      const std::vector<double>& h) const;

  // Rows of softmax(logits / temperature), counted like logits(). At
  // temperature 1 exact models return their posterior without a log round trip.
  RowMatrix probabilities(const Sequence& z, double t, double h, double temperature = 1.0) const;
  std::vector<RowMatrix> probabilities_batch(const std::vector<Sequence>& z,
                                             const std::vector<double>& t,
                                             const std::vector<double>& h,
                                             double temperature = 1.0) const;

  virtual int vocab_size() const = 0;

  long evaluations() const { return evaluations_.load(); }
  void reset_evaluations() const { evaluations_.store(0); }

 protected:
  virtual RowMatrix compute_logits(const Sequence& z, double t, double h) const = 0;
  virtual std::vector<RowMatrix> compute_logits_batch(const std::vector<Sequence>& z,
                                                      const std::vector<double>& t,
                                                      const std::vector<double>& h) const;
  virtual std::vector<RowMatrix> compute_probabilities_batch(const std::vector<Sequence>& z,
                                                             const std::vector<double>& t,
                                                             const std::vector<double>& h) const;

 private:
  mutable std::atomic<long> evaluations_{0};
};

struct WeightedSequence {
  Sequence tokens;
  double probability = 0.0;
};

// Explicit target distribution plus the path that noises it.
struct ExactBayesSpec {
  static constexpr std::size_t kMaxSupport = 65536;

  std::vector<WeightedSequence> support;
  SourceSpec source;
  Vocab vocab;
  Scheduler scheduler;

  std::size_t length() const { return support.empty() ? 0 : support.front().tokens.size(); }
};

void validate(const ExactBayesSpec& spec);

// Posterior P(x1^i = a | z) under the independent coupling, computed in the log
// domain by enumerating the support. Rows are probability vectors.
RowMatrix exact_posterior(const ExactBayesSpec& spec, const Sequence& z, double t);

class ExactBayesModel : public PosteriorModel {
 public:
  explicit ExactBayesModel(ExactBayesSpec spec);

  const ExactBayesSpec& spec() const { return spec_; }
  int vocab_size() const override { return spec_.vocab.size(); }
  RowMatrix posterior(const Sequence& z, double t) const;

 protected:
  RowMatrix compute_logits(const Sequence& z, double t, double h) const override;
  std::vector<RowMatrix> compute_probabilities_batch(const std::vector<Sequence>& z,
                                                     const std::vector<double>& t,
                                                     const std::vector<double>& h) const override;

 private:
  ExactBayesSpec spec_;
};

// Exact posterior for length-2 targets given as a dense joint over data tokens;
// O(|V|) per position instead of O(support).
class BivariateBayesModel : public PosteriorModel {
 public:
  BivariateBayesModel(Eigen::MatrixXd joint, Vocab vocab, SourceSpec source, Scheduler scheduler);

  int vocab_size() const override { return vocab_.size(); }
  const Vocab& vocab() const { return vocab_; }
  const Eigen::MatrixXd& joint() const { return joint_; }
  RowMatrix posterior(const Sequence& z, double t) const;

 protected:
  RowMatrix compute_logits(const Sequence& z, double t, double h) const override;
  std::vector<RowMatrix> compute_probabilities_batch(const std::vector<Sequence>& z,
                                                     const std::vector<double>& t,
                                                     const std::vector<double>& h) const override;

 private:
  Eigen::MatrixXd joint_;
  Eigen::VectorXd marginal1_;
  Eigen::VectorXd marginal2_;
  Vocab vocab_;
  SourceSpec source_;
  Scheduler scheduler_;
};

// Exact Bayes spec for the checkerboard (support = the admissible cells).
ExactBayesSpec checkerboard_bayes_spec(const CheckerboardSpec& board, const SourceSpec& source,
                                       const Scheduler& scheduler);
// Vocabulary used for checkerboard experiments: grid tokens, plus a mask for mask sources.
Vocab checkerboard_vocab(const CheckerboardSpec& board, const SourceSpec& source);
BivariateBayesModel checkerboard_bayes_model(const CheckerboardSpec& board,
                                             const SourceSpec& source, const Scheduler& scheduler);

enum class TabularKey {
  // One table per (full state, t bin, position); for |V|^L <= 4096.
  full_state,
  // Mask sources only: observed positions are clean, so they get a point mass;
  // a masked position is keyed by the rest of the state and the t bin.
  mask_context,
};

// Empirical conditional distribution of x1 tokens with add-one smoothing.
class TabularModel : public PosteriorModel {
 public:
  static constexpr std::uint64_t kMaxFullStates = 4096;

  TabularModel(Vocab vocab, std::size_t length, int t_bins, TabularKey key);

  void add(const Sequence& x_t, const Sequence& x1, double t);
  RowMatrix posterior(const Sequence& z, double t) const;
  int vocab_size() const override { return vocab_.size(); }

 protected:
  RowMatrix compute_logits(const Sequence& z, double t, double h) const override;

 private:
  std::uint64_t key(const Sequence& z, double t, std::size_t position) const;
  int bin(double t) const;

  Vocab vocab_;
  std::size_t length_;
  int t_bins_;
  TabularKey key_kind_;
  std::unordered_map<std::uint64_t, Eigen::VectorXd> counts_;
};

struct TabularSample {
  Sequence x_t;
  Sequence x1;
  double t = 0.0;
};

TabularModel tabular_fit(const std::vector<TabularSample>& samples, const Vocab& vocab,
                         std::size_t length, int t_bins, TabularKey key);

// Memoizes another model's logits per (state, t, h). Meant for tiny state
// spaces where Monte-Carlo ensembles revisit the same states many times.
class CachedModel : public PosteriorModel {
 public:
  explicit CachedModel(const PosteriorModel& inner) : inner_(inner) {}

  int vocab_size() const override { return inner_.vocab_size(); }
  std::size_t cache_size() const;

 protected:
  RowMatrix compute_logits(const Sequence& z, double t, double h) const override;

 private:
  struct KeyHash {
    std::size_t operator()(const std::vector<std::int64_t>& key) const;
  };

  const PosteriorModel& inner_;
  mutable std::mutex mutex_;
  mutable std::unordered_map<std::vector<std::int64_t>, RowMatrix, KeyHash> cache_;
};

}  // namespace stepflow
