#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <random>

#include "psmt/fisher.hpp"
#include "psmt/network.hpp"

namespace psmt {

using Rng = std::mt19937_64;

/// Parameters at which the student-side Fisher is evaluated (always on the
/// cached previous batch).
enum class StudentFisherAt { current_student, previous_student };

/// What the selective-distillation penalty pulls the student towards.
enum class AnchorMode { previous_step, source };

struct AdapterConfig {
  double lambda = 500.0;
  double xi = 0.03;
  double delta = 0.999;
  double learning_rate = 1e-3;
  int num_augs = 4;
  double aug_noise_scale = 0.1;
  bool enable_sd = true;
  bool enable_sema = true;
  LabelRule label_rule = LabelRule::argmax_pseudo;
  bool invert_mask = false;
  QuantileScope mask_scope = QuantileScope::global;
  StudentFisherAt student_fisher_at = StudentFisherAt::current_student;
  AnchorMode anchor = AnchorMode::previous_step;
  /// Statistics used by student and teacher forwards during adaptation.
  ForwardMode mode = ForwardMode::train_stats;

  void validate() const;
};

/// Student/teacher pair plus what the next step needs from the previous one.
struct MeanTeacherState {
  ParamVector student;  ///< theta_t
  ParamVector teacher;  ///< theta'_t
  std::optional<ParamVector> prev_student;  ///< theta_{t-1}, kept only when SD is on
  std::optional<Batch> prev_batch;          ///< x_{t-1}, unlabeled copy
  std::size_t step = 0;
  ParamVector source;  ///< theta_0
  NormStats stats;     ///< source running statistics

  static MeanTeacherState from_source(const Model& source);
};

struct StepDiagnostics {
  double loss_ce = 0.0;
  double loss_stu = 0.0;  ///< unweighted sum_i F_i (theta_i - anchor_i)^2
  double loss_total = 0.0;
  double mask_ones_fraction = 0.0;
  std::optional<MaskVector> mask;
  std::optional<FisherDiag> teacher_fisher;
  std::optional<FisherSummary> student_fisher_summary;
  double step_time_ms = 0.0;
  std::size_t resident_bytes = 0;
};

struct StepResult {
  Probs predictions;  ///< teacher's augmentation-averaged outputs
  MeanTeacherState state;
  StepDiagnostics diagnostics;
};

struct PretrainConfig {
  int epochs = 30;
  double learning_rate = 0.1;
  std::size_t batch_size = 50;
};

/// Mini-batch gradient descent on standard cross-entropy, then a single pass over
/// the training set to fix the running normalization statistics.
Model pretrain_source(const NetworkSpec& spec, const Batch& train, const PretrainConfig& cfg,
                      std::uint64_t seed);

/// Teacher probabilities averaged over the identity view and num_augs - 1 views with
/// additive Gaussian noise, rows renormalized. With one view this is exactly the
/// teacher's forward output.
Probs teacher_pseudolabel(const MeanTeacherState& state, const NetworkSpec& spec,
                          const Batch& batch, const AdapterConfig& cfg, Rng& rng);

StepResult psmt_step(const MeanTeacherState& state, const NetworkSpec& spec, const Batch& batch,
                     const AdapterConfig& cfg, Rng& rng);

/// Mean teacher without selective distillation or selective EMA.
StepResult plain_mt_step(const MeanTeacherState& state, const NetworkSpec& spec,
                         const Batch& batch, const AdapterConfig& cfg, Rng& rng);

/// Teacher-side Fisher as computed inside the selective EMA: at the given student
/// parameters on the current batch.
/// teacher' = delta * teacher + (1 - delta) * student, element-wise.
ParamVector ema_update(const ParamVector& teacher, const ParamVector& student, double delta);
/// As ema_update where mask.bits[i] == 0; entries with bit 1 keep the teacher value.
ParamVector selective_ema_update(const ParamVector& teacher, const ParamVector& student,
                                 const MaskVector& mask, double delta);

FisherDiag teacher_side_fisher(const NetworkSpec& spec, const ParamVector& student,
                               const NormStats& stats, const Batch& batch,
                               const AdapterConfig& cfg);

/// Frozen source model with stored statistics.
Probs source_only_step(const Model& source, const NetworkSpec& spec, const Batch& batch);

/// Source parameters with normalization statistics recomputed on the batch.
Probs bn_adapt_step(const Model& source, const NetworkSpec& spec, const Batch& batch);

}  // namespace psmt
