#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "psmt/network.hpp"
#include "psmt/param_vector.hpp"

namespace psmt {

/// Diagonal of the empirical Fisher information, one entry per parameter.
struct FisherDiag {
  ParamVector values;
  std::string source_batch_id;
  std::size_t sample_count = 0;
};

/// Per-parameter {0,1} selector. Under the default (non-inverted) rule
/// bits[j] == 1 exactly when the Fisher entry is strictly below `threshold`.
struct MaskVector {
  std::vector<std::uint8_t> bits;
  double threshold = 0.0;
  double xi = 0.0;

  std::size_t ones() const;
  double ones_fraction() const;
};

enum class QuantileScope { global, per_layer };

struct MaskOptions {
  QuantileScope scope = QuantileScope::global;
  /// Select the high-Fisher tail instead: bits[j] == 1 iff F_j > quantile(F, 1 - xi).
  bool invert = false;
};

struct FisherSummary {
  double min = 0.0;
  double max = 0.0;
  double mean = 0.0;
  double median = 0.0;
};

/// entry j = (1/B) sum_b g_{b,j}^2 with g_b the per-sample log-likelihood gradient.
/// Under soft_expectation each sample contributes sum_c p(c|x_b) g_{b,c,j}^2.
FisherDiag estimate_fisher_diag(const NetworkSpec& spec, const ParamVector& params,
                                const NormStats& stats, const Batch& batch, ForwardMode mode,
                                LabelRule rule = LabelRule::argmax_pseudo,
                                Exec exec = Exec::parallel);

/// Linear-interpolation quantile between order statistics ("type 7").
double quantile(std::span<const double> values, double q);

MaskVector compute_mask(const FisherDiag& fisher, double xi, const MaskOptions& options = {});

/// value = lambda * sum_i F_i (current_i - anchor_i)^2, grad = 2 lambda F (current - anchor).
AuxTerm student_regularizer(const FisherDiag& fisher, const ParamVector& current,
                            const ParamVector& anchor, double lambda);

FisherSummary summarize(const FisherDiag& fisher);

}  // namespace psmt
