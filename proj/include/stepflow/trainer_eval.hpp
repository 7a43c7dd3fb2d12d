#pragma once

// Training loops for the neural denoiser, the Kolmogorov forward-equation
// reference, and evaluation metrics.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include <Eigen/Core>

#include "stepflow/ctmc_sampler.hpp"
#include "stepflow/denoiser.hpp"
#include "stepflow/kinetics.hpp"
#include "stepflow/neural.hpp"
#include "stepflow/objective.hpp"
#include "stepflow/path_data.hpp"
#include "stepflow/shortcut_teacher.hpp"

namespace stepflow {

// ---------------------------------------------------------------------------
// Full state space helpers (base-|V| indexing, position 0 most significant).

std::uint64_t state_count(int vocab_size, std::size_t length);
std::uint64_t state_index(const Sequence& z, int vocab_size);
Sequence state_from_index(std::uint64_t index, int vocab_size, std::size_t length);

// Distribution of x0 over the full state space.
Eigen::VectorXd source_distribution(const SourceSpec& source, const Vocab& vocab,
                                    std::size_t length);
Eigen::VectorXd empirical_distribution(const std::vector<Sequence>& samples, int vocab_size);

// ---------------------------------------------------------------------------
// Kolmogorov forward reference

using GeneratorFn = std::function<Eigen::MatrixXd(double)>;

inline constexpr std::uint64_t kMaxReferenceStates = 64;

// Euler integration of dP/dt = P u_t from t0 to t1, rows renormalized.
Eigen::MatrixXd kolmogorov_reference(const GeneratorFn& generator, double t0, double t1,
                                     int fine_steps);

// Generator of the factorized jump process: from z, rate scale * p_i(a | z) to
// the state with position i replaced by a.
Eigen::MatrixXd model_generator(const PosteriorModel& model, int vocab_size, std::size_t length,
                                double t, double h, double scale);

// Instantaneous-mode generator; t is held below the clamp boundary.
GeneratorFn instantaneous_generator(const PosteriorModel& model, const Scheduler& scheduler,
                                    int vocab_size, std::size_t length);

// ---------------------------------------------------------------------------
// Metrics

double tv_distance(const Eigen::VectorXd& p, const Eigen::VectorXd& q);
// Mean over rows of -sum p ln p, in nats.
double entropy_metric(const RowMatrix& probs);
double token_accuracy(const Sequence& predicted, const Sequence& truth,
                      const std::vector<bool>& changed);
// KL(p || q) with q floored at `floor` where p is positive.
double kl_divergence(const Eigen::VectorXd& p, const Eigen::VectorXd& q, double floor = 1e-12);

// Distribution over the full state space after one jump step from z.
Eigen::VectorXd jump_distribution(const RowMatrix& probs, const Sequence& z, double scale,
                                  double h, int vocab_size);
Eigen::VectorXd one_step_distribution(const PosteriorModel& model, const Scheduler& scheduler,
                                      const Sequence& z, double t, double h, ScaleMode mode);
// Two h/2 steps; intermediates below `prune` probability are dropped and the
// result renormalized.
Eigen::VectorXd two_half_steps_distribution(const PosteriorModel& model,
                                            const Scheduler& scheduler, const Sequence& z,
                                            double t, double h, ScaleMode mode,
                                            double prune = 1e-10);

struct ProbeState {
  Sequence z;
  double t = 0.0;
};

using DataSampler = std::function<Sequence(Rng&)>;

// z ~ p_t for t uniform in [0, t_max].
std::vector<ProbeState> make_probes(std::size_t count, double t_max, const DataSampler& data,
                                    const SourceSpec& source, const Vocab& vocab,
                                    std::size_t length, const Scheduler& scheduler,
                                    std::uint64_t seed);

// Mean over probes of KL(one step of size h || two steps of size h/2).
double self_consistency_kl(const PosteriorModel& model, const Scheduler& scheduler,
                           const std::vector<ProbeState>& probes, double h, ScaleMode mode);

// ---------------------------------------------------------------------------
// Reference distributions for likelihood evaluation

class ReferenceModel {
 public:
  virtual ~ReferenceModel() = default;
  // Natural-log probability of a whole sequence.
  virtual double log_prob(const Sequence& x) const = 0;
};

// Explicit distribution mixed with a small uniform component over data
// sequences: (1 - eta) p(x) + eta / D^L.
class ExplicitReference : public ReferenceModel {
 public:
  ExplicitReference(std::vector<WeightedSequence> support, const Vocab& vocab,
                    double smoothing = 1e-3);

  double log_prob(const Sequence& x) const override;
  // Exact entropy per token of the smoothed distribution.
  double entropy_per_token() const;

 private:
  struct Hash {
    std::size_t operator()(const Sequence& z) const;
  };

  std::unordered_map<Sequence, double, Hash> probs_;
  Vocab vocab_;
  std::size_t length_ = 0;
  double smoothing_;
  double log_total_states_ = 0.0;
};

// Closed-form smoothed checkerboard density.
class CheckerboardReference : public ReferenceModel {
 public:
  explicit CheckerboardReference(CheckerboardSpec board, double smoothing = 1e-3);
  double log_prob(const Sequence& x) const override;

 private:
  CheckerboardSpec board_;
  double smoothing_;
};

// Add-one smoothed trigram over data tokens; the first positions see a pad context.
class TrigramReference : public ReferenceModel {
 public:
  TrigramReference(const std::vector<Sequence>& corpus, const Vocab& vocab);
  double log_prob(const Sequence& x) const override;

 private:
  std::uint64_t context_key(Token a, Token b) const;

  Vocab vocab_;
  std::unordered_map<std::uint64_t, Eigen::VectorXd> counts_;
};

// Mean negative log-probability per token, in nats.
double nll_eval(const std::vector<Sequence>& samples, const ReferenceModel& reference);

// ---------------------------------------------------------------------------
// Training

enum class TrainPhase { pretrain, finetune };

std::string to_string(TrainPhase phase);

struct TrainConfig {
  TrainPhase phase = TrainPhase::pretrain;
  int batch_size = 64;
  long steps = 1000;
  double learning_rate = 0.05;
  // Global gradient-norm clip; 0 disables.
  double grad_clip = 1.0;
  std::uint64_t seed = 0;
  // Pretraining draws h from the policy too, so the step input is exercised.
  StepPolicy policy{PolicyKind::pu};
  BlendConfig blend;
  TeacherConfig teacher;
  double ema_decay = 0.999;
  ScaleMode scale_mode = ScaleMode::instantaneous;
  Scheduler scheduler;
  SourceSpec source;
};

void validate(const TrainConfig& cfg);

struct TrainingData {
  Vocab vocab;
  std::size_t length = 0;
  DataSampler sample;
};

TrainingData checkerboard_data(const CheckerboardSpec& board, const SourceSpec& source);
// Uniform draws over packed corpus blocks.
TrainingData corpus_data(std::vector<Sequence> blocks, const Vocab& vocab);

struct LossRow {
  long step = 0;
  double loss = 0.0;
  // "dfm", "distill" or "mixed" for the batch.
  std::string branch;
  // Batch-mean step size.
  double h = 0.0;
};

struct TrainResult {
  std::vector<LossRow> curve;
  long student_evaluations = 0;
  long teacher_evaluations = 0;
};

TrainResult pretrain_loop(const TrainConfig& cfg, const TrainingData& data, NeuralDenoiser& model);
TrainResult finetune_loop(const TrainConfig& cfg, const TrainingData& data, NeuralDenoiser& model,
                          EmaRegistry& ema);

void write_loss_csv(const std::filesystem::path& path, const std::vector<LossRow>& curve);

// ---------------------------------------------------------------------------
// Sampler evaluation

struct MetricsRow {
  int budget = 0;
  ScaleMode mode = ScaleMode::cumulative;
  double entropy = 0.0;
  std::optional<double> token_accuracy;
  double nll = 0.0;
  double mean_jumps = 0.0;
  std::optional<double> tv;
  std::optional<double> valid_fraction;
};

struct SamplerEvaluation {
  MetricsRow row;
  std::vector<Sequence> finals;
};

// Sample `count` sequences and score them. Entropy is that of the posterior
// rows queried at the final grid time.
SamplerEvaluation evaluate_sampler(const PosteriorModel& model, const TrainingData& data,
                                   const SourceSpec& source, const Scheduler& scheduler,
                                   const ReferenceModel& reference, int budget, ScaleMode mode,
                                   std::size_t count, std::uint64_t seed);

double checkerboard_valid_fraction(const CheckerboardSpec& board,
                                   const std::vector<Sequence>& samples);

void write_metrics_csv(const std::filesystem::path& path, const std::vector<MetricsRow>& rows);

// Write to a sibling temporary file, then rename over the destination.
void write_file_atomic(const std::filesystem::path& path, const std::string& contents);

}  // namespace stepflow
