#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "psmt/kernels.hpp"
#include "psmt/matrix.hpp"
#include "psmt/param_vector.hpp"

namespace psmt {

/// Softmax outputs are clamped below at this value before any log is taken.
inline constexpr double kProbFloor = 1e-12;
/// Variance epsilon of the normalization layers.
inline constexpr double kNormEps = 1e-5;

enum class Normalization { none, batch_stat };
enum class Activation { relu, tanh };

/// How normalization layers obtain their statistics.
///  - train_stats: current batch statistics, differentiated through (training).
///  - frozen_stats: stored running statistics.
///  - recompute_stats: current batch statistics treated as constants
///    (inference-time re-estimation, used by the batch-stat baseline).
enum class ForwardMode { train_stats, frozen_stats, recompute_stats };

/// Which class the per-sample log-likelihood gradient is taken for on unlabeled data.
enum class LabelRule { argmax_pseudo, soft_expectation };

/// Class reduction of the cross-entropy. `class_mean` carries the 1/C factor of the
/// distillation loss; `class_sum` is the usual cross-entropy used for pretraining.
enum class CeReduction { class_mean, class_sum };

struct NetworkSpec {
  std::size_t input_dim = 0;
  std::vector<std::size_t> hidden_dims;
  std::size_t num_classes = 0;
  /// One entry per hidden layer. Empty means no normalization anywhere.
  std::vector<Normalization> normalization;
  Activation activation = Activation::relu;
  bool bias = true;

  /// Throws ValidationError listing every problem.
  void validate() const;
  Normalization norm_at(std::size_t layer) const {
    return normalization.empty() ? Normalization::none : normalization[layer];
  }
  bool has_normalization() const;
};

/// Stored (running) statistics of the normalization layers. Layers without
/// normalization have empty vectors.
struct NormStats {
  std::vector<std::vector<double>> mean;
  std::vector<std::vector<double>> var;

  bool empty() const { return mean.empty(); }
  bool operator==(const NormStats&) const = default;
};

/// Trainable parameters plus the normalization buffers that go with them.
struct Model {
  ParamVector params;
  NormStats stats;
};

struct Batch {
  Matrix inputs;
  std::optional<std::vector<int>> labels;
  std::string domain_tag;

  std::size_t size() const { return inputs.rows(); }
  /// Checks B >= 1, finite inputs and label range.
  void validate(std::size_t input_dim, std::size_t num_classes) const;
};

using Probs = Matrix;

/// Layout of a network's trainable parameters. Tensors per hidden layer l:
/// `hidden{l}.weight` [out x in], `hidden{l}.bias` [out] (if bias),
/// `hidden{l}.gamma`, `hidden{l}.beta` [out] (if normalized); then
/// `output.weight` [C x H], `output.bias` [C] (if bias).
std::shared_ptr<const Layout> make_layout(const NetworkSpec& spec);

/// Scaled-uniform weights in +-sqrt(6/(fan_in+fan_out)), zero biases, unit gamma,
/// zero beta, running mean 0 / variance 1.
Model init_network(const NetworkSpec& spec, std::uint64_t seed);

/// Forward pass that keeps every intermediate needed for reverse mode.
class ForwardPass {
 public:
  /// `spec` and `params` must outlive the pass.
  ForwardPass(const NetworkSpec& spec, const ParamVector& params, const NormStats& stats,
              const Matrix& inputs, ForwardMode mode, Exec exec = Exec::serial);

  /// Floored softmax outputs.
  const Probs& probs() const { return probs_; }
  const Matrix& logits() const { return logits_; }
  /// Batch statistics of each normalized layer (empty vectors elsewhere).
  NormStats batch_stats() const;

  /// log of the floored probability of class c for sample b.
  double log_prob(std::size_t b, std::size_t c) const;
  /// Unfloored softmax probability.
  double raw_prob(std::size_t b, std::size_t c) const { return raw_probs_(b, c); }
  /// True when the floor is inactive, i.e. log_prob has a nonzero logit gradient.
  bool above_floor(std::size_t b, std::size_t c) const { return raw_probs_(b, c) >= kProbFloor; }

  /// Gradient w.r.t. parameters of sum_{b,c} dlogits(b,c) * logits(b,c).
  ParamVector backward(const Matrix& dlogits) const;

  /// Gradient of log p(c | x_b) (floored) w.r.t. parameters.
  ParamVector log_prob_grad(std::size_t b, std::size_t c) const;

 private:
  struct LayerCache {
    Matrix input;
    Matrix normalized;
    Matrix activation;
    std::vector<double> mean;
    std::vector<double> var;
    std::vector<double> inv_std;
    // Bottom layer under train_stats only: column means of input and xhat, and
    // xhat^T input / B.
    std::vector<double> input_mean;
    std::vector<double> xhat_mean;
    Matrix xhat_input;
  };

  void backward_hidden(std::size_t top, Matrix da, ParamVector& grad) const;
  ParamVector backward_row(std::size_t b, std::span<const double> dlogit) const;

  const NetworkSpec& spec_;
  const ParamVector& params_;
  ForwardMode mode_;
  Exec exec_;
  std::vector<LayerCache> layers_;
  Matrix final_input_;
  Matrix logits_;
  Matrix raw_probs_;
  std::vector<double> log_norm_;
  Probs probs_;
};

Probs forward(const NetworkSpec& spec, const ParamVector& params, const NormStats& stats,
              const Batch& batch, ForwardMode mode);
inline Probs forward(const NetworkSpec& spec, const Model& model, const Batch& batch,
                     ForwardMode mode) {
  return forward(spec, model.params, model.stats, batch, mode);
}

/// An additive term carried into loss_and_grad: its value and its gradient.
struct AuxTerm {
  double value = 0.0;
  ParamVector grad;
};

struct LossGrad {
  double loss = 0.0;  ///< cross-entropy + aux.value
  double ce = 0.0;    ///< cross-entropy part alone
  ParamVector grad;
};

/// Batch-mean cross-entropy of `target` against the model output, plus an optional
/// additive term. The target is held constant.
LossGrad loss_and_grad(const NetworkSpec& spec, const ParamVector& params, const NormStats& stats,
                       const Batch& batch, const Probs& target, ForwardMode mode,
                       CeReduction reduction = CeReduction::class_mean,
                       const AuxTerm* aux = nullptr);

/// Cross-entropy value only, with the same conventions as loss_and_grad.
double cross_entropy(const Probs& target, const Probs& predicted, CeReduction reduction);

/// Entry b is the gradient of log p(c_b | x_b): c_b is the argmax class under
/// argmax_pseudo; under soft_expectation it is sum_c p(c|x_b) grad log p(c|x_b),
/// which vanishes analytically (score-function identity).
std::vector<ParamVector> per_sample_logprob_grads(const NetworkSpec& spec,
                                                  const ParamVector& params,
                                                  const NormStats& stats, const Batch& batch,
                                                  ForwardMode mode,
                                                  LabelRule rule = LabelRule::argmax_pseudo,
                                                  Exec exec = Exec::parallel);

/// Blends batch statistics into running statistics:
/// running = (1 - momentum) * running + momentum * batch.
void commit_norm_stats(NormStats& running, const NormStats& batch_stats, double momentum);

std::vector<int> argmax_rows(const Matrix& m);
double error_rate(const Probs& probs, const std::vector<int>& labels);

}  // namespace psmt
