#include "psmt/fisher.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "psmt/error.hpp"
#include "psmt/kernels.hpp"

namespace psmt {

std::size_t MaskVector::ones() const {
  return static_cast<std::size_t>(std::count(bits.begin(), bits.end(), std::uint8_t{1}));
}

double MaskVector::ones_fraction() const {
  return bits.empty() ? 0.0 : static_cast<double>(ones()) / static_cast<double>(bits.size());
}

FisherDiag estimate_fisher_diag(const NetworkSpec& spec, const ParamVector& params,
                                const NormStats& stats, const Batch& batch, ForwardMode mode,
                                LabelRule rule, Exec exec) {
  if (batch.size() == 0) throw ValidationError("estimate_fisher_diag: empty batch");
  FisherDiag out{params.zeros_like(), batch.domain_tag, batch.size()};

  std::vector<ParamVector> per_sample;
  if (rule == LabelRule::argmax_pseudo) {
    per_sample = per_sample_logprob_grads(spec, params, stats, batch, mode, rule, exec);
  } else {
    // Expected Fisher over the model's own class distribution; per_sample[b]
    // already holds squared gradients.
    ForwardPass pass(spec, params, stats, batch.inputs, mode);
    per_sample.resize(batch.size());
    const auto n = static_cast<std::int64_t>(batch.size());
    auto one = [&](std::int64_t sb) {
      const auto b = static_cast<std::size_t>(sb);
      ParamVector acc = params.zeros_like();
      for (std::size_t c = 0; c < spec.num_classes; ++c) {
        const double w = pass.probs()(b, c);
        const ParamVector g = pass.log_prob_grad(b, c);
        for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += w * g[i] * g[i];
      }
      per_sample[b] = std::move(acc);
    };
    if (exec == Exec::parallel) {
#pragma omp parallel for schedule(dynamic)
      for (std::int64_t b = 0; b < n; ++b) one(b);
    } else {
      for (std::int64_t b = 0; b < n; ++b) one(b);
    }
    for (std::size_t i = 0; i < out.values.size(); ++i) {
      double acc = 0.0;
      for (const auto& s : per_sample) acc += s[i];
      out.values[i] = acc / static_cast<double>(batch.size());
    }
    if (!out.values.all_finite()) throw NumericError("estimate_fisher_diag: non-finite entries");
    return out;
  }

  std::vector<std::span<const double>> rows;
  rows.reserve(per_sample.size());
  for (const auto& g : per_sample) rows.push_back(g.values());
  kernels::mean_of_squares(rows, out.values.values(), exec);
  if (!out.values.all_finite()) throw NumericError("estimate_fisher_diag: non-finite entries");
  return out;
}

double quantile(std::span<const double> values, double q) {
  if (values.empty()) throw ValidationError("quantile of an empty array");
  if (!(q >= 0.0 && q <= 1.0)) throw ValidationError("quantile level must lie in [0, 1]");
  std::vector<double> sorted(values.begin(), values.end());
  std::sort(sorted.begin(), sorted.end());
  const double h = static_cast<double>(sorted.size() - 1) * q;
  const auto lo = static_cast<std::size_t>(std::floor(h));
  if (lo + 1 >= sorted.size()) return sorted.back();
  return sorted[lo] + (h - static_cast<double>(lo)) * (sorted[lo + 1] - sorted[lo]);
}

namespace {

void fill_mask(std::span<const double> f, double xi, bool invert, std::span<std::uint8_t> bits,
               double& threshold) {
  if (invert) {
    threshold = quantile(f, 1.0 - xi);
    for (std::size_t j = 0; j < f.size(); ++j) bits[j] = f[j] > threshold ? 1 : 0;
  } else {
    threshold = quantile(f, xi);
    for (std::size_t j = 0; j < f.size(); ++j) bits[j] = f[j] < threshold ? 1 : 0;
  }
}

}  // namespace

MaskVector compute_mask(const FisherDiag& fisher, double xi, const MaskOptions& options) {
  if (!(xi >= 0.0 && xi <= 1.0)) throw ValidationError("compute_mask: xi must lie in [0, 1]");
  const auto f = fisher.values.values();
  MaskVector m;
  m.xi = xi;
  m.bits.assign(f.size(), 0);
  if (f.empty()) return m;
  if (options.scope == QuantileScope::global) {
    fill_mask(f, xi, options.invert, m.bits, m.threshold);
    return m;
  }
  // Per-layer thresholds; the reported threshold is that of the largest tensor.
  std::size_t largest = 0;
  for (const auto& e : fisher.values.layout().entries()) {
    double t = 0.0;
    fill_mask(f.subspan(e.offset, e.size()), xi, options.invert,
              std::span(m.bits).subspan(e.offset, e.size()), t);
    if (e.size() > largest) {
      largest = e.size();
      m.threshold = t;
    }
  }
  return m;
}

AuxTerm student_regularizer(const FisherDiag& fisher, const ParamVector& current,
                            const ParamVector& anchor, double lambda) {
  require_same_layout(current, anchor, "student_regularizer");
  require_same_layout(current, fisher.values, "student_regularizer");
  if (!(lambda >= 0.0)) throw ValidationError("student_regularizer: lambda must be >= 0");
  AuxTerm out{0.0, current.zeros_like()};
  double acc = 0.0;
  for (std::size_t i = 0; i < current.size(); ++i) {
    const double d = current[i] - anchor[i];
    acc += fisher.values[i] * d * d;
    out.grad[i] = 2.0 * lambda * fisher.values[i] * d;
  }
  out.value = lambda * acc;
  return out;
}

FisherSummary summarize(const FisherDiag& fisher) {
  const auto f = fisher.values.values();
  if (f.empty()) return {};
  FisherSummary s;
  s.min = *std::min_element(f.begin(), f.end());
  s.max = *std::max_element(f.begin(), f.end());
  s.mean = std::accumulate(f.begin(), f.end(), 0.0) / static_cast<double>(f.size());
  s.median = quantile(f, 0.5);
  return s;
}

}  // namespace psmt
