#include <cmath>
#include <numeric>
#include <random>

#include <gtest/gtest.h>

#include "oracles.hpp"
#include "psmt/adapter.hpp"
#include "psmt/error.hpp"
#include "psmt/stream.hpp"

using namespace psmt;
using namespace psmt::testing;

namespace {

struct Fixture {
  NetworkSpec spec;
  SourceData data;
  Model source;
};

const Fixture& trained() {
  static const Fixture f = [] {
    Fixture x;
    x.spec = small_spec(true, Activation::relu, 8, {16}, 3);
    SourceDataset ds;
    x.data = make_source(ds);
    x.source = pretrain_source(x.spec, x.data.train, PretrainConfig{}, 1);
    return x;
  }();
  return f;
}

std::vector<Batch> shifted_batches(std::size_t count, std::size_t rows, std::uint64_t seed,
                                   int fixed_kind = -1) {
  const Fixture& f = trained();
  Rng rng(seed);
  std::vector<Batch> out;
  const auto& kinds = all_corruptions();
  for (std::size_t i = 0; i < count; ++i) {
    Batch b{Matrix(rows, 8), std::nullopt, "src"};
    std::uniform_int_distribution<std::size_t> pick(0, f.data.heldout.size() - 1);
    for (std::size_t r = 0; r < rows; ++r) {
      const auto src = f.data.heldout.inputs.row(pick(rng));
      std::copy(src.begin(), src.end(), b.inputs.row(r).begin());
    }
    const std::size_t k = fixed_kind < 0 ? i % kinds.size() : static_cast<std::size_t>(fixed_kind);
    Batch c = corrupt(b, CorruptionSpec{kinds[k], 4}, rng);
    c.labels.reset();
    out.push_back(std::move(c));
  }
  return out;
}

}  // namespace

TEST(Adapter, ConfigValidationListsEveryViolation) {
  AdapterConfig c;
  c.lambda = -1;
  c.xi = 2;
  c.delta = 1.0;
  c.learning_rate = 0;
  c.num_augs = 0;
  try {
    c.validate();
    FAIL() << "expected ValidationError";
  } catch (const ValidationError& e) {
    const std::string msg = e.what();
    for (const char* key : {"lambda", "xi", "delta", "learning_rate", "num_augs"})
      EXPECT_NE(msg.find(key), std::string::npos) << key;
  }
  EXPECT_NO_THROW(AdapterConfig{}.validate());
}

TEST(Adapter, PretrainReachesHighAccuracy) {
  const Fixture& f = trained();
  const Probs p = source_only_step(f.source, f.spec, f.data.heldout);
  EXPECT_GE(1.0 - error_rate(p, *f.data.heldout.labels), 0.95);
}

TEST(Adapter, PretrainDeterministicAndZeroEpochsIsInit) {
  const Fixture& f = trained();
  PretrainConfig cfg;
  cfg.epochs = 3;
  EXPECT_EQ(pretrain_source(f.spec, f.data.train, cfg, 5).params,
            pretrain_source(f.spec, f.data.train, cfg, 5).params);
  cfg.epochs = 0;
  const Model m = pretrain_source(f.spec, f.data.train, cfg, 5);
  const Model init = init_network(f.spec, 5);
  EXPECT_EQ(m.params, init.params);
  EXPECT_EQ(m.stats, init.stats);
}

TEST(Adapter, PretrainRejectsMissingLabelsAndDivergence) {
  const Fixture& f = trained();
  Batch unlabeled = f.data.train;
  unlabeled.labels.reset();
  EXPECT_THROW(pretrain_source(f.spec, unlabeled, PretrainConfig{}, 1), ValidationError);
  PretrainConfig wild;
  wild.learning_rate = 1e200;
  EXPECT_THROW(pretrain_source(f.spec, f.data.train, wild, 1), NumericError);
}

TEST(Adapter, PseudolabelIdentityAndAveraging) {
  const Fixture& f = trained();
  const MeanTeacherState s = MeanTeacherState::from_source(f.source);
  const Batch b = shifted_batches(1, 20, 3)[0];
  AdapterConfig cfg;
  cfg.num_augs = 1;
  Rng rng(1);
  EXPECT_EQ(teacher_pseudolabel(s, f.spec, b, cfg, rng), forward(f.spec, s.teacher, s.stats, b, cfg.mode));

  cfg.num_augs = 5;
  cfg.aug_noise_scale = 0.0;
  const Probs avg = teacher_pseudolabel(s, f.spec, b, cfg, rng);
  const Probs one = forward(f.spec, s.teacher, s.stats, b, cfg.mode);
  for (std::size_t i = 0; i < avg.size(); ++i) EXPECT_NEAR(avg.data()[i], one.data()[i], 1e-15);

  cfg.aug_noise_scale = 0.5;
  const Probs noisy = teacher_pseudolabel(s, f.spec, b, cfg, rng);
  for (std::size_t r = 0; r < noisy.rows(); ++r) {
    const auto row = noisy.row(r);
    EXPECT_NEAR(std::accumulate(row.begin(), row.end(), 0.0), 1.0, 1e-6);
  }
}

TEST(Adapter, EmaArithmetic) {
  auto layout = std::make_shared<Layout>();
  layout->add("w", {2});
  ParamVector teacher(layout), student(layout);
  teacher[0] = 1, teacher[1] = 2;
  student[0] = 2, student[1] = 4;
  const ParamVector t = ema_update(teacher, student, 0.9);
  EXPECT_NEAR(t[0], 1.1, 1e-15);
  EXPECT_NEAR(t[1], 2.2, 1e-15);
  EXPECT_EQ(ema_update(teacher, student, 1.0), teacher);
  EXPECT_EQ(ema_update(teacher, student, 0.0), student);
  MaskVector m{{1, 0}, 0.0, 0.5};
  const ParamVector s = selective_ema_update(teacher, student, m, 0.9);
  EXPECT_EQ(s[0], 1.0);
  EXPECT_NEAR(s[1], 2.2, 1e-15);
}

TEST(Adapter, DegenerateDeltas) {
  const Fixture& f = trained();
  const auto batches = shifted_batches(3, 32, 4);
  for (double delta : {1.0, 0.0}) {
    AdapterConfig cfg;
    cfg.delta = delta;
    cfg.learning_rate = 0.05;
    MeanTeacherState s = MeanTeacherState::from_source(f.source);
    Rng rng(2);
    for (const Batch& b : batches) {
      StepResult r = plain_mt_step(s, f.spec, b, cfg, rng);
      if (delta == 1.0) EXPECT_EQ(r.state.teacher, f.source.params);
      else EXPECT_EQ(r.state.teacher, r.state.student);
      s = std::move(r.state);
    }
    EXPECT_FALSE(s.student == f.source.params);
  }
}

TEST(Adapter, ReductionToPlainMeanTeacher) {
  const Fixture& f = trained();
  const auto batches = shifted_batches(5, 40, 5);
  AdapterConfig reduced;
  reduced.lambda = 0.0;
  reduced.xi = 0.0;
  reduced.learning_rate = 0.05;
  AdapterConfig toggled = reduced;
  toggled.lambda = 500.0;
  toggled.xi = 0.03;
  toggled.enable_sd = false;
  toggled.enable_sema = false;
  MeanTeacherState a = MeanTeacherState::from_source(f.source), b = a, c = a;
  Rng ra(9), rb(9), rc(9);
  for (const Batch& x : batches) {
    StepResult sa = psmt_step(a, f.spec, x, reduced, ra);
    StepResult sb = plain_mt_step(b, f.spec, x, reduced, rb);
    StepResult sc = psmt_step(c, f.spec, x, toggled, rc);
    EXPECT_EQ(sa.predictions, sb.predictions);
    EXPECT_EQ(sa.state.student, sb.state.student);
    EXPECT_EQ(sa.state.teacher, sb.state.teacher);
    EXPECT_EQ(sc.state.student, sb.state.student);
    EXPECT_EQ(sc.state.teacher, sb.state.teacher);
    EXPECT_EQ(sa.diagnostics.loss_total, sb.diagnostics.loss_total);
    a = std::move(sa.state), b = std::move(sb.state), c = std::move(sc.state);
  }
}

TEST(Adapter, SelectiveEmaExactness) {
  const Fixture& f = trained();
  const auto batches = shifted_batches(4, 50, 6);
  AdapterConfig cfg;
  cfg.learning_rate = 0.05;
  cfg.delta = 0.9;
  cfg.xi = 0.3;
  MeanTeacherState s = MeanTeacherState::from_source(f.source);
  Rng rng(3);
  for (const Batch& b : batches) {
    StepResult r = psmt_step(s, f.spec, b, cfg, rng);
    ASSERT_TRUE(r.diagnostics.mask);
    const MaskVector& m = *r.diagnostics.mask;
    std::size_t frozen = 0;
    for (std::size_t j = 0; j < m.bits.size(); ++j) {
      if (m.bits[j]) {
        ++frozen;
        EXPECT_EQ(r.state.teacher[j], s.teacher[j]);
      } else {
        EXPECT_NEAR(r.state.teacher[j], 0.9 * s.teacher[j] + 0.1 * r.state.student[j], 1e-12);
      }
    }
    EXPECT_GT(frozen, 0u);
    // The mask is the one implied by the dumped teacher-side Fisher.
    EXPECT_EQ(compute_mask(*r.diagnostics.teacher_fisher, cfg.xi).bits, m.bits);
    s = std::move(r.state);
  }
}

TEST(Adapter, FirstStepHasNoDistillationTerm) {
  const Fixture& f = trained();
  const Batch b = shifted_batches(1, 30, 7)[0];
  MeanTeacherState s = MeanTeacherState::from_source(f.source);
  Rng rng(4);
  const StepResult r = psmt_step(s, f.spec, b, AdapterConfig{}, rng);
  EXPECT_EQ(r.diagnostics.loss_stu, 0.0);
  EXPECT_EQ(r.diagnostics.loss_total, r.diagnostics.loss_ce);
  EXPECT_FALSE(r.diagnostics.student_fisher_summary);
  ASSERT_TRUE(r.state.prev_student);
  EXPECT_EQ(*r.state.prev_student, f.source.params);
  ASSERT_TRUE(r.state.prev_batch);
  EXPECT_EQ(r.state.prev_batch->inputs, b.inputs);
  EXPECT_FALSE(r.state.prev_batch->labels);
}

TEST(Adapter, AnchorRecencyAndLossComposition) {
  const Fixture& f = trained();
  const auto batches = shifted_batches(5, 40, 8);
  AdapterConfig cfg;
  cfg.learning_rate = 0.05;
  MeanTeacherState s = MeanTeacherState::from_source(f.source);
  Rng rng(5);
  for (std::size_t t = 0; t < batches.size(); ++t) {
    const ParamVector start = s.student;
    StepResult r = psmt_step(s, f.spec, batches[t], cfg, rng);
    const StepDiagnostics& d = r.diagnostics;
    EXPECT_NEAR(d.loss_total, d.loss_ce + cfg.lambda * d.loss_stu, 1e-12 * std::max(1.0, d.loss_total));
    if (t > 0) {
      // Independent recomputation: Fisher at the current student on x_{t-1},
      // displacement against the student that started step t-1.
      const FisherDiag fi = estimate_fisher_diag(f.spec, s.student, s.stats, batches[t - 1], cfg.mode);
      double stu = 0.0;
      for (std::size_t j = 0; j < fi.values.size(); ++j) {
        const double dj = s.student[j] - (*s.prev_student)[j];
        stu += fi.values[j] * dj * dj;
      }
      EXPECT_NEAR(d.loss_stu, stu, 1e-12 * std::max(1.0, stu));
      EXPECT_GT(d.loss_stu, 0.0);
    }
    EXPECT_EQ(*r.state.prev_student, start);
    s = std::move(r.state);
  }
}

TEST(Adapter, SourceAnchorMode) {
  const Fixture& f = trained();
  const auto batches = shifted_batches(3, 40, 9);
  AdapterConfig cfg;
  cfg.learning_rate = 0.05;
  cfg.anchor = AnchorMode::source;
  MeanTeacherState s = MeanTeacherState::from_source(f.source);
  Rng rng(6);
  for (std::size_t t = 0; t < batches.size(); ++t) {
    StepResult r = psmt_step(s, f.spec, batches[t], cfg, rng);
    if (t > 0) {
      const FisherDiag fi = estimate_fisher_diag(f.spec, s.student, s.stats, batches[t - 1], cfg.mode);
      double stu = 0.0;
      for (std::size_t j = 0; j < fi.values.size(); ++j) {
        const double dj = s.student[j] - f.source.params[j];
        stu += fi.values[j] * dj * dj;
      }
      EXPECT_NEAR(r.diagnostics.loss_stu, stu, 1e-12 * std::max(1.0, stu));
    }
    s = std::move(r.state);
  }
}

TEST(Adapter, PredictionsAreTeacherPseudolabels) {
  const Fixture& f = trained();
  const Batch b = shifted_batches(1, 30, 10)[0];
  const MeanTeacherState s = MeanTeacherState::from_source(f.source);
  Rng r1(7), r2(7);
  const StepResult r = psmt_step(s, f.spec, b, AdapterConfig{}, r1);
  EXPECT_EQ(r.predictions, teacher_pseudolabel(s, f.spec, b, AdapterConfig{}, r2));
}

// Step length ||theta_{t+1} - theta_t|| should not grow with lambda in {0, 500, 5000}
// on at least 9 of 10 random trials, at default settings on consecutive stream batches.
TEST(Adapter, LambdaDisplacementMonotone) {
  const Fixture& f = trained();
  int ok = 0;
  for (std::uint64_t trial = 0; trial < 10; ++trial) {
    const auto batches = shifted_batches(3, 200, 100 + trial, static_cast<int>(trial % 8));
    const AdapterConfig warm;
    MeanTeacherState s = MeanTeacherState::from_source(f.source);
    Rng rng(trial);
    for (std::size_t t = 0; t < 2; ++t) s = psmt_step(s, f.spec, batches[t], warm, rng).state;
    double last = std::numeric_limits<double>::infinity();
    bool monotone = true;
    for (double lambda : {0.0, 500.0, 5000.0}) {
      AdapterConfig cfg = warm;
      cfg.lambda = lambda;
      Rng copy = rng;
      const StepResult r = psmt_step(s, f.spec, batches[2], cfg, copy);
      const double disp = l2_distance(r.state.student, s.student);
      monotone = monotone && disp <= last;
      last = disp;
    }
    ok += monotone;
  }
  EXPECT_GE(ok, 9) << "monotone on " << ok << " of 10 trials";
}

TEST(Adapter, NonFiniteUpdateIsReported) {
  const Fixture& f = trained();
  const auto batches = shifted_batches(2, 30, 11);
  AdapterConfig cfg;
  cfg.learning_rate = 1e308;
  MeanTeacherState s = MeanTeacherState::from_source(f.source);
  Rng rng(8);
  EXPECT_THROW(
      {
        for (const Batch& b : batches) s = psmt_step(s, f.spec, b, cfg, rng).state;
      },
      NumericError);
}

TEST(Adapter, SourceOnlyIsStatelessAndMatchesHeldout) {
  const Fixture& f = trained();
  const Model before = f.source;
  const Probs a = source_only_step(f.source, f.spec, f.data.heldout);
  EXPECT_EQ(a, source_only_step(f.source, f.spec, f.data.heldout));
  EXPECT_EQ(f.source.params, before.params);
  EXPECT_EQ(f.source.stats, before.stats);
  EXPECT_LE(error_rate(a, *f.data.heldout.labels), 0.05);
}

TEST(Adapter, BnAdaptAgreesWithSourceOnCleanData) {
  const Fixture& f = trained();
  Batch b{Matrix(200, 8), f.data.heldout.labels, "clean"};
  std::copy_n(f.data.heldout.inputs.data().begin(), 200 * 8, b.inputs.data().begin());
  b.labels->resize(200);
  const auto a = argmax_rows(bn_adapt_step(f.source, f.spec, b));
  const auto s = argmax_rows(source_only_step(f.source, f.spec, b));
  std::size_t agree = 0;
  for (std::size_t i = 0; i < a.size(); ++i) agree += a[i] == s[i];
  EXPECT_GE(static_cast<double>(agree) / 200.0, 0.95);
}

TEST(Adapter, BnAdaptCancelsMeanShift) {
  const Fixture& f = trained();
  const Batch b = shifted_batches(1, 64, 12)[0];
  Batch moved = b;
  for (std::size_t r = 0; r < moved.size(); ++r)
    for (double& v : moved.inputs.row(r)) v += 3.0;
  const Probs p = bn_adapt_step(f.source, f.spec, b);
  const Probs q = bn_adapt_step(f.source, f.spec, moved);
  for (std::size_t i = 0; i < p.size(); ++i) EXPECT_NEAR(p.data()[i], q.data()[i], 1e-10);
  Batch one{Matrix(1, 8), std::nullopt, "x"};
  EXPECT_THROW(bn_adapt_step(f.source, f.spec, one), ValidationError);
}
