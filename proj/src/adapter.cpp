#include "psmt/adapter.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <sstream>

#include "psmt/error.hpp"

namespace psmt {

void AdapterConfig::validate() const {
  Violations v;
  if (!(lambda >= 0.0)) v.add("lambda must be >= 0");
  if (!(xi >= 0.0 && xi <= 1.0)) v.add("xi must lie in [0, 1]");
  if (!(delta >= 0.0 && delta < 1.0)) v.add("delta must lie in [0, 1)");
  if (!(learning_rate > 0.0)) v.add("learning_rate must be > 0");
  if (num_augs < 1) v.add("num_augs must be >= 1");
  if (!(aug_noise_scale >= 0.0)) v.add("aug_noise_scale must be >= 0");
  v.throw_if_any("invalid adapter config");
}

MeanTeacherState MeanTeacherState::from_source(const Model& source) {
  MeanTeacherState s;
  s.student = source.params;
  s.teacher = source.params;
  s.source = source.params;
  s.stats = source.stats;
  return s;
}

Model pretrain_source(const NetworkSpec& spec, const Batch& train, const PretrainConfig& cfg,
                      std::uint64_t seed) {
  if (!train.labels) throw ValidationError("pretrain_source: source batches must carry labels");
  train.validate(spec.input_dim, spec.num_classes);
  if (cfg.epochs < 0) throw ValidationError("pretrain_source: epochs must be >= 0");
  if (cfg.batch_size == 0) throw ValidationError("pretrain_source: batch_size must be positive");

  Model model = init_network(spec, seed);
  if (cfg.epochs == 0) return model;

  Rng rng(seed ^ 0x9e3779b97f4a7c15ULL);
  const std::size_t n = train.size();
  const std::size_t classes = spec.num_classes;
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < n; start += cfg.batch_size) {
      const std::size_t len = std::min(cfg.batch_size, n - start);
      if (len < 2 && spec.has_normalization()) continue;
      Batch mb{Matrix(len, spec.input_dim), std::nullopt, train.domain_tag};
      Probs onehot(len, classes);
      for (std::size_t i = 0; i < len; ++i) {
        const std::size_t src = order[start + i];
        std::copy_n(train.inputs.row(src).begin(), spec.input_dim, mb.inputs.row(i).begin());
        onehot(i, static_cast<std::size_t>((*train.labels)[src])) = 1.0;
      }
      const LossGrad lg = loss_and_grad(spec, model.params, model.stats, mb, onehot,
                                        ForwardMode::train_stats, CeReduction::class_sum);
      if (!std::isfinite(lg.loss))
        throw NumericError("pretrain_source: loss diverged at epoch " + std::to_string(epoch) +
                           " (loss = " + std::to_string(lg.loss) + ")");
      for (std::size_t i = 0; i < model.params.size(); ++i)
        model.params[i] -= cfg.learning_rate * lg.grad[i];
    }
  }

  if (spec.has_normalization()) {
    ForwardPass full(spec, model.params, model.stats, train.inputs, ForwardMode::train_stats);
    commit_norm_stats(model.stats, full.batch_stats(), 1.0);
  }
  if (!model.params.all_finite()) throw NumericError("pretrain_source: non-finite parameters");
  return model;
}

Probs teacher_pseudolabel(const MeanTeacherState& state, const NetworkSpec& spec,
                          const Batch& batch, const AdapterConfig& cfg, Rng& rng) {
  if (cfg.num_augs < 1) throw ValidationError("teacher_pseudolabel: num_augs must be >= 1");
  Probs avg = forward(spec, state.teacher, state.stats, batch, cfg.mode);
  if (cfg.num_augs == 1) return avg;

  std::normal_distribution<double> noise(0.0, 1.0);
  Batch view{Matrix(batch.size(), batch.inputs.cols()), std::nullopt, batch.domain_tag};
  for (int k = 1; k < cfg.num_augs; ++k) {
    const auto src = batch.inputs.data();
    auto dst = view.inputs.data();
    for (std::size_t i = 0; i < src.size(); ++i) dst[i] = src[i] + cfg.aug_noise_scale * noise(rng);
    const Probs p = forward(spec, state.teacher, state.stats, view, cfg.mode);
    auto a = avg.data();
    const auto pd = p.data();
    for (std::size_t i = 0; i < a.size(); ++i) a[i] += pd[i];
  }
  for (std::size_t b = 0; b < avg.rows(); ++b) {
    auto r = avg.row(b);
    const double s = std::accumulate(r.begin(), r.end(), 0.0);
    for (double& x : r) x /= s;
  }
  return avg;
}

FisherDiag teacher_side_fisher(const NetworkSpec& spec, const ParamVector& student,
                               const NormStats& stats, const Batch& batch,
                               const AdapterConfig& cfg) {
  return estimate_fisher_diag(spec, student, stats, batch, cfg.mode, cfg.label_rule);
}

ParamVector ema_update(const ParamVector& teacher, const ParamVector& student, double delta) {
  require_same_layout(teacher, student, "ema_update");
  ParamVector out = teacher;
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = delta * teacher[i] + (1.0 - delta) * student[i];
  return out;
}

ParamVector selective_ema_update(const ParamVector& teacher, const ParamVector& student,
                                 const MaskVector& mask, double delta) {
  require_same_layout(teacher, student, "selective_ema_update");
  if (mask.bits.size() != teacher.size())
    throw ValidationError("selective_ema_update: mask length " + std::to_string(mask.bits.size()) +
                          " != parameter count " + std::to_string(teacher.size()));
  ParamVector out = teacher;
  for (std::size_t i = 0; i < out.size(); ++i)
    if (!mask.bits[i]) out[i] = delta * teacher[i] + (1.0 - delta) * student[i];
  return out;
}

namespace {

std::size_t param_bytes(const ParamVector& p) { return p.size() * sizeof(double); }

Batch unlabeled_copy(const Batch& b) { return Batch{b.inputs, std::nullopt, b.domain_tag}; }

double weighted_displacement(const FisherDiag& f, const ParamVector& cur, const ParamVector& anchor) {
  double acc = 0.0;
  for (std::size_t i = 0; i < cur.size(); ++i) {
    const double d = cur[i] - anchor[i];
    acc += f.values[i] * d * d;
  }
  return acc;
}

}  // namespace

StepResult psmt_step(const MeanTeacherState& state, const NetworkSpec& spec, const Batch& batch,
                     const AdapterConfig& cfg, Rng& rng) {
  const auto t0 = std::chrono::steady_clock::now();
  batch.validate(spec.input_dim, spec.num_classes);
  require_same_layout(state.student, state.teacher, "psmt_step");

  StepResult out;
  StepDiagnostics& diag = out.diagnostics;

  // Pseudo-labels from the teacher; these are also the reported predictions.
  out.predictions = teacher_pseudolabel(state, spec, batch, cfg, rng);
  for (double v : out.predictions.data())
    if (!std::isfinite(v))
      throw NumericError("psmt_step " + std::to_string(state.step) +
                         ": teacher pseudo-labels are non-finite");

  // Selective distillation: Fisher-weighted pull towards the anchor.
  std::optional<AuxTerm> aux;
  std::size_t fisher_bytes = 0;
  if (cfg.enable_sd && state.prev_batch && state.prev_student) {
    const ParamVector& at = cfg.student_fisher_at == StudentFisherAt::current_student
                                ? state.student
                                : *state.prev_student;
    const FisherDiag f = estimate_fisher_diag(spec, at, state.stats, *state.prev_batch, cfg.mode,
                                              cfg.label_rule);
    const ParamVector& anchor =
        cfg.anchor == AnchorMode::previous_step ? *state.prev_student : state.source;
    aux = student_regularizer(f, state.student, anchor, cfg.lambda);
    diag.loss_stu = weighted_displacement(f, state.student, anchor);
    diag.student_fisher_summary = summarize(f);
    fisher_bytes += param_bytes(f.values);
  }

  const LossGrad lg = loss_and_grad(spec, state.student, state.stats, batch, out.predictions,
                                    cfg.mode, CeReduction::class_mean, aux ? &*aux : nullptr);
  diag.loss_ce = lg.ce;
  diag.loss_total = lg.loss;
  if (!std::isfinite(lg.ce) || !std::isfinite(diag.loss_stu) || !std::isfinite(lg.loss)) {
    std::ostringstream msg;
    msg << "psmt_step " << state.step << ": non-finite loss (L_ce = " << lg.ce
        << ", L_stu = " << diag.loss_stu << ", total = " << lg.loss << ")";
    throw NumericError(msg.str());
  }

  MeanTeacherState& next = out.state;
  next.source = state.source;
  next.stats = state.stats;
  next.step = state.step + 1;
  next.student = state.student;
  for (std::size_t i = 0; i < next.student.size(); ++i)
    next.student[i] -= cfg.learning_rate * lg.grad[i];
  if (!next.student.all_finite())
    throw NumericError("psmt_step " + std::to_string(state.step) +
                       ": student update produced non-finite parameters");

  // Teacher: selective EMA keeps masked entries, plain EMA elsewhere.
  if (cfg.enable_sema) {
    FisherDiag ft = teacher_side_fisher(spec, next.student, state.stats, batch, cfg);
    MaskVector m = compute_mask(ft, cfg.xi, {cfg.mask_scope, cfg.invert_mask});
    next.teacher = selective_ema_update(state.teacher, next.student, m, cfg.delta);
    diag.mask_ones_fraction = m.ones_fraction();
    fisher_bytes += param_bytes(ft.values) + m.bits.size();
    diag.mask = std::move(m);
    diag.teacher_fisher = std::move(ft);
  } else {
    next.teacher = ema_update(state.teacher, next.student, cfg.delta);
  }

  if (!next.teacher.all_finite())
    throw NumericError("psmt_step " + std::to_string(state.step) +
                       ": teacher update produced non-finite parameters");

  if (cfg.enable_sd) {
    next.prev_student = state.student;
    next.prev_batch = unlabeled_copy(batch);
  }

  diag.resident_bytes = param_bytes(next.student) + param_bytes(next.teacher) +
                        param_bytes(next.source) +
                        (next.prev_student ? param_bytes(*next.prev_student) : 0) + fisher_bytes;
  diag.step_time_ms =
      std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  return out;
}

StepResult plain_mt_step(const MeanTeacherState& state, const NetworkSpec& spec,
                         const Batch& batch, const AdapterConfig& cfg, Rng& rng) {
  AdapterConfig plain = cfg;
  plain.enable_sd = false;
  plain.enable_sema = false;
  return psmt_step(state, spec, batch, plain, rng);
}

Probs source_only_step(const Model& source, const NetworkSpec& spec, const Batch& batch) {
  return forward(spec, source, batch, ForwardMode::frozen_stats);
}

Probs bn_adapt_step(const Model& source, const NetworkSpec& spec, const Batch& batch) {
  if (batch.size() < 2)
    throw ValidationError("bn_adapt_step: batch size 1 has no usable variance");
  return forward(spec, source, batch, ForwardMode::recompute_stats);
}

}  // namespace psmt
