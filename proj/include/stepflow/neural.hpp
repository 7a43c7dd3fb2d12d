#pragma once

// Small step-aware MLP denoiser. Tokens are embedded and concatenated, a
// conditioning vector c = SiLU(W [phi_time(t); phi_step(h)]) drives per-block
// shift/scale modulation of layer-normalized activations, and a zero-initialized
// head emits L x |V| logits. The backward pass is written out by hand.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "stepflow/denoiser.hpp"
#include "stepflow/types.hpp"

namespace stepflow {

struct NeuralDenoiserSpec {
  int vocab_size = 2;
  int length = 1;
  int embed_dim = 16;
  int hidden_dim = 128;
  int depth = 2;
  int cond_dim = 64;
  // Number of sinusoidal features per scalar input (even).
  int freq_dim = 32;
  // Token whose target probability is forced to zero (the mask, for mask sources).
  std::optional<Token> masked_target;
};

void validate(const NeuralDenoiserSpec& spec);

struct TensorSlot {
  std::string name;
  Eigen::Index rows = 0;
  Eigen::Index cols = 0;
  Eigen::Index offset = 0;

  Eigen::Index size() const { return rows * cols; }
};

// Named views into one flat parameter vector (column-major tensors).
class ParameterLayout {
 public:
  explicit ParameterLayout(const NeuralDenoiserSpec& spec);

  const std::vector<TensorSlot>& slots() const { return slots_; }
  const TensorSlot& slot(const std::string& name) const;
  Eigen::Index total_size() const { return total_; }

 private:
  void add(std::string name, Eigen::Index rows, Eigen::Index cols);

  std::vector<TensorSlot> slots_;
  Eigen::Index total_ = 0;
};

// Fresh parameters: scaled-uniform weights, zero biases, zero output head.
Eigen::VectorXd init_parameters(const NeuralDenoiserSpec& spec, std::uint64_t seed);

// Sinusoidal features of x in [0, 1].
Eigen::VectorXd sinusoidal_features(double x, int freq_dim);
// The step size enters through log2(h), mapped to [0, 1] over h in [2^-10, 1].
double step_feature(double h);

// Intermediate values kept for the backward pass (one column per example).
struct ForwardCache {
  std::vector<Sequence> tokens;
  Eigen::MatrixXd embedded;
  Eigen::MatrixXd time_features, step_features;
  Eigen::MatrixXd time_pre, step_pre, fused_in, cond_pre, cond;
  std::vector<Eigen::MatrixXd> block_in, modulation, normalized, inv_std, modulated, fc1_pre,
      fc1_act;
  Eigen::MatrixXd final_in, final_modulation, final_normalized, final_inv_std, final_modulated;
};

// Batched forward; returns (L*|V|) x B logits, column b for example b.
Eigen::MatrixXd neural_forward_batch(const NeuralDenoiserSpec& spec, const ParameterLayout& layout,
                                     const Eigen::VectorXd& params,
                                     const std::vector<Sequence>& z, const std::vector<double>& t,
                                     const std::vector<double>& h, ForwardCache* cache = nullptr);

// Gradient of sum_b <dlogits[:, b], logits[:, b]> with respect to the parameters.
Eigen::VectorXd neural_backward(const NeuralDenoiserSpec& spec, const ParameterLayout& layout,
                                const Eigen::VectorXd& params, const ForwardCache& cache,
                                const Eigen::MatrixXd& dlogits);

// Single-example forward reshaped to L x |V|.
RowMatrix neural_forward(const NeuralDenoiserSpec& spec, const Eigen::VectorXd& params,
                         const Sequence& z, double t, double h);

// Column of batched logits reshaped to L x |V|.
RowMatrix logits_column(const Eigen::MatrixXd& batch_logits, Eigen::Index column, int length,
                        int vocab_size);

class NeuralDenoiser : public PosteriorModel {
 public:
  NeuralDenoiser(NeuralDenoiserSpec spec, std::uint64_t seed);
  NeuralDenoiser(NeuralDenoiserSpec spec, Eigen::VectorXd params);

  const NeuralDenoiserSpec& spec() const { return spec_; }
  const ParameterLayout& layout() const { return layout_; }
  const Eigen::VectorXd& parameters() const { return params_; }
  void set_parameters(const Eigen::VectorXd& params);
  Eigen::VectorXd& mutable_parameters() { return params_; }

  int vocab_size() const override { return spec_.vocab_size; }

  Eigen::MatrixXd forward(const std::vector<Sequence>& z, const std::vector<double>& t,
                          const std::vector<double>& h, ForwardCache* cache) const;
  Eigen::VectorXd backward(const ForwardCache& cache, const Eigen::MatrixXd& dlogits) const;

 protected:
  RowMatrix compute_logits(const Sequence& z, double t, double h) const override;
  std::vector<RowMatrix> compute_logits_batch(const std::vector<Sequence>& z,
                                              const std::vector<double>& t,
                                              const std::vector<double>& h) const override;

 private:
  NeuralDenoiserSpec spec_;
  ParameterLayout layout_;
  Eigen::VectorXd params_;
};

// Checkpoint: text magic line, one-line JSON header (spec + tensor shapes),
// then the flat parameters as little-endian float64.
void save_checkpoint(const std::filesystem::path& path, const NeuralDenoiserSpec& spec,
                     const Eigen::VectorXd& params);

struct Checkpoint {
  NeuralDenoiserSpec spec;
  Eigen::VectorXd params;
};

Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace stepflow
