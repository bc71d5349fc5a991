#include "psmt/network.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "psmt/error.hpp"

namespace psmt {

namespace {

std::string layer_name(std::size_t l) { return "hidden" + std::to_string(l); }

}  // namespace

void NetworkSpec::validate() const {
  Violations v;
  if (input_dim == 0) v.add("input_dim must be positive");
  if (hidden_dims.empty()) v.add("hidden_dims must be non-empty");
  for (std::size_t l = 0; l < hidden_dims.size(); ++l)
    if (hidden_dims[l] == 0) v.add("hidden layer " + std::to_string(l) + " has zero size");
  if (num_classes < 2) v.add("num_classes must be at least 2");
  if (!normalization.empty() && normalization.size() != hidden_dims.size())
    v.add("normalization must list one entry per hidden layer");
  v.throw_if_any("invalid network spec");
}

bool NetworkSpec::has_normalization() const {
  return std::any_of(normalization.begin(), normalization.end(),
                     [](Normalization n) { return n != Normalization::none; });
}

void Batch::validate(std::size_t input_dim, std::size_t num_classes) const {
  if (inputs.rows() == 0) throw ValidationError("batch is empty");
  if (inputs.cols() != input_dim)
    throw ValidationError("batch width " + std::to_string(inputs.cols()) +
                          " does not match input_dim " + std::to_string(input_dim));
  for (double x : inputs.data())
    if (!std::isfinite(x)) throw ValidationError("batch contains non-finite input values");
  if (labels) {
    if (labels->size() != inputs.rows()) throw ValidationError("label count does not match batch");
    for (int y : *labels)
      if (y < 0 || static_cast<std::size_t>(y) >= num_classes)
        throw ValidationError("label " + std::to_string(y) + " out of range");
  }
}

std::shared_ptr<const Layout> make_layout(const NetworkSpec& spec) {
  spec.validate();
  auto layout = std::make_shared<Layout>();
  std::size_t in = spec.input_dim;
  for (std::size_t l = 0; l < spec.hidden_dims.size(); ++l) {
    const std::size_t out = spec.hidden_dims[l];
    const auto name = layer_name(l);
    layout->add(name + ".weight", {out, in});
    if (spec.bias) layout->add(name + ".bias", {out});
    if (spec.norm_at(l) == Normalization::batch_stat) {
      layout->add(name + ".gamma", {out});
      layout->add(name + ".beta", {out});
    }
    in = out;
  }
  layout->add("output.weight", {spec.num_classes, in});
  if (spec.bias) layout->add("output.bias", {spec.num_classes});
  return layout;
}

Model init_network(const NetworkSpec& spec, std::uint64_t seed) {
  Model model{ParamVector(make_layout(spec)), {}};
  std::mt19937_64 rng(seed);
  for (const auto& e : model.params.layout().entries()) {
    auto t = model.params.tensor(e);
    if (e.shape.size() == 2) {
      const double limit = std::sqrt(6.0 / static_cast<double>(e.shape[0] + e.shape[1]));
      std::uniform_real_distribution<double> dist(-limit, limit);
      for (double& w : t) w = dist(rng);
    } else if (e.name.ends_with(".gamma")) {
      std::fill(t.begin(), t.end(), 1.0);
    }
  }
  if (spec.has_normalization()) {
    for (std::size_t l = 0; l < spec.hidden_dims.size(); ++l) {
      const bool norm = spec.norm_at(l) == Normalization::batch_stat;
      model.stats.mean.emplace_back(norm ? spec.hidden_dims[l] : 0, 0.0);
      model.stats.var.emplace_back(norm ? spec.hidden_dims[l] : 0, 1.0);
    }
  }
  return model;
}

ForwardPass::ForwardPass(const NetworkSpec& spec, const ParamVector& params,
                         const NormStats& stats, const Matrix& inputs, ForwardMode mode,
                         Exec exec)
    : spec_(spec), params_(params), mode_(mode), exec_(exec) {
  if (inputs.cols() != spec.input_dim)
    throw ValidationError("input width " + std::to_string(inputs.cols()) +
                          " does not match input_dim " + std::to_string(spec.input_dim));
  if (inputs.rows() == 0) throw ValidationError("empty input batch");
  for (double x : inputs.data())
    if (!std::isfinite(x)) throw ValidationError("non-finite input values");

  const Layout& layout = params.layout();
  const std::size_t batch = inputs.rows();
  layers_.resize(spec.hidden_dims.size());
  const Matrix* x = &inputs;
  for (std::size_t l = 0; l < spec.hidden_dims.size(); ++l) {
    LayerCache& c = layers_[l];
    const std::size_t out = spec.hidden_dims[l];
    const auto name = layer_name(l);
    c.input = *x;
    Matrix z;
    std::span<const double> bias;
    if (spec.bias) bias = params.tensor(layout.find(name + ".bias"));
    kernels::affine(c.input, params.tensor(layout.find(name + ".weight")), bias, out, z, exec);

    if (spec.norm_at(l) == Normalization::batch_stat) {
      const auto gamma = params.tensor(layout.find(name + ".gamma"));
      const auto beta = params.tensor(layout.find(name + ".beta"));
      c.mean.assign(out, 0.0);
      c.var.assign(out, 0.0);
      if (mode == ForwardMode::frozen_stats) {
        if (stats.mean.size() <= l || stats.mean[l].size() != out)
          throw ValidationError("frozen_stats requires running statistics for " + name);
        c.mean = stats.mean[l];
        c.var = stats.var[l];
      } else {
        kernels::column_sums(z, c.mean);
        for (double& m : c.mean) m /= static_cast<double>(batch);
        for (std::size_t b = 0; b < batch; ++b)
          for (std::size_t j = 0; j < out; ++j) {
            const double d = z(b, j) - c.mean[j];
            c.var[j] += d * d;
          }
        for (double& s : c.var) s /= static_cast<double>(batch);
      }
      c.inv_std.resize(out);
      for (std::size_t j = 0; j < out; ++j) c.inv_std[j] = 1.0 / std::sqrt(c.var[j] + kNormEps);
      c.normalized = Matrix(batch, out);
      for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t j = 0; j < out; ++j) {
          const double xhat = (z(b, j) - c.mean[j]) * c.inv_std[j];
          c.normalized(b, j) = xhat;
          z(b, j) = gamma[j] * xhat + beta[j];
        }
      if (l == 0 && mode == ForwardMode::train_stats) {
        // Cross moments used by the single-row backward of the bottom layer.
        const std::size_t in = c.input.cols();
        const double inv_n = 1.0 / static_cast<double>(batch);
        c.input_mean.assign(in, 0.0);
        kernels::column_sums(c.input, c.input_mean);
        for (double& m : c.input_mean) m *= inv_n;
        c.xhat_mean.assign(out, 0.0);
        kernels::column_sums(c.normalized, c.xhat_mean);
        for (double& m : c.xhat_mean) m *= inv_n;
        c.xhat_input = Matrix(out, in);
        kernels::weight_grad(c.normalized, c.input, c.xhat_input.data(), exec);
        for (double& v : c.xhat_input.data()) v *= inv_n;
      }
    }

    c.activation = std::move(z);
    for (double& a : c.activation.data())
      a = spec.activation == Activation::relu ? std::max(a, 0.0) : std::tanh(a);
    x = &c.activation;
  }

  final_input_ = *x;
  std::span<const double> out_bias;
  if (spec.bias) out_bias = params.tensor(layout.find("output.bias"));
  kernels::affine(final_input_, params.tensor(layout.find("output.weight")), out_bias,
                  spec.num_classes, logits_, exec);

  const std::size_t classes = spec.num_classes;
  raw_probs_ = Matrix(batch, classes);
  probs_ = Matrix(batch, classes);
  log_norm_.resize(batch);
  for (std::size_t b = 0; b < batch; ++b) {
    const auto z = logits_.row(b);
    const double zmax = *std::max_element(z.begin(), z.end());
    double sum = 0.0;
    for (std::size_t c = 0; c < classes; ++c) sum += std::exp(z[c] - zmax);
    log_norm_[b] = zmax + std::log(sum);
    for (std::size_t c = 0; c < classes; ++c) {
      const double p = std::exp(z[c] - zmax) / sum;
      raw_probs_(b, c) = p;
      probs_(b, c) = std::max(p, kProbFloor);
    }
  }
}

NormStats ForwardPass::batch_stats() const {
  NormStats s;
  for (const auto& c : layers_) {
    s.mean.push_back(c.mean);
    s.var.push_back(c.var);
  }
  return s;
}

double ForwardPass::log_prob(std::size_t b, std::size_t c) const {
  if (raw_probs_(b, c) < kProbFloor) return std::log(kProbFloor);
  return logits_(b, c) - log_norm_[b];
}

ParamVector ForwardPass::backward(const Matrix& dlogits) const {
  const Layout& layout = params_.layout();
  ParamVector grad = params_.zeros_like();
  kernels::weight_grad(dlogits, final_input_, grad.tensor(layout.find("output.weight")), exec_);
  if (spec_.bias) kernels::column_sums(dlogits, grad.tensor(layout.find("output.bias")));
  Matrix da;
  kernels::input_grad(dlogits, params_.tensor(layout.find("output.weight")), final_input_.cols(),
                      da, exec_);
  backward_hidden(spec_.hidden_dims.size() - 1, std::move(da), grad);
  return grad;
}

void ForwardPass::backward_hidden(std::size_t top, Matrix da, ParamVector& grad) const {
  const Layout& layout = params_.layout();
  const std::size_t batch = final_input_.rows();

  for (std::size_t l = top + 1; l-- > 0;) {
    const LayerCache& c = layers_[l];
    const std::size_t out = spec_.hidden_dims[l];
    const auto name = layer_name(l);

    Matrix dz = std::move(da);
    const auto act = c.activation.data();
    auto d = dz.data();
    if (spec_.activation == Activation::relu) {
      for (std::size_t i = 0; i < d.size(); ++i)
        if (!(act[i] > 0.0)) d[i] = 0.0;
    } else {
      for (std::size_t i = 0; i < d.size(); ++i) d[i] *= 1.0 - act[i] * act[i];
    }

    if (spec_.norm_at(l) == Normalization::batch_stat) {
      const auto gamma = params_.tensor(layout.find(name + ".gamma"));
      auto dgamma = grad.tensor(layout.find(name + ".gamma"));
      auto dbeta = grad.tensor(layout.find(name + ".beta"));
      kernels::column_sums(dz, dbeta);
      std::fill(dgamma.begin(), dgamma.end(), 0.0);
      for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t j = 0; j < out; ++j) dgamma[j] += dz(b, j) * c.normalized(b, j);

      // dz holds dL/dy; turn it into dL/dxhat and then dL/dz.
      for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t j = 0; j < out; ++j) dz(b, j) *= gamma[j];
      if (mode_ == ForwardMode::train_stats) {
        std::vector<double> sum_d(out, 0.0), sum_dx(out, 0.0);
        for (std::size_t b = 0; b < batch; ++b)
          for (std::size_t j = 0; j < out; ++j) {
            sum_d[j] += dz(b, j);
            sum_dx[j] += dz(b, j) * c.normalized(b, j);
          }
        const double n = static_cast<double>(batch);
        for (std::size_t b = 0; b < batch; ++b)
          for (std::size_t j = 0; j < out; ++j)
            dz(b, j) = c.inv_std[j] / n *
                       (n * dz(b, j) - sum_d[j] - c.normalized(b, j) * sum_dx[j]);
      } else {
        for (std::size_t b = 0; b < batch; ++b)
          for (std::size_t j = 0; j < out; ++j) dz(b, j) *= c.inv_std[j];
      }
    }

    kernels::weight_grad(dz, c.input, grad.tensor(layout.find(name + ".weight")), exec_);
    if (spec_.bias) kernels::column_sums(dz, grad.tensor(layout.find(name + ".bias")));
    if (l > 0)
      kernels::input_grad(dz, params_.tensor(layout.find(name + ".weight")), c.input.cols(), da,
                          exec_);
  }
}

ParamVector ForwardPass::backward_row(std::size_t b, std::span<const double> dlogit) const {
  const Layout& layout = params_.layout();
  ParamVector grad = params_.zeros_like();
  const std::size_t batch = final_input_.rows();

  // Output layer: only row b carries gradient.
  {
    auto dw = grad.tensor(layout.find("output.weight"));
    const auto a = final_input_.row(b);
    for (std::size_t k = 0; k < dlogit.size(); ++k)
      for (std::size_t i = 0; i < a.size(); ++i) dw[k * a.size() + i] = dlogit[k] * a[i];
    if (spec_.bias) {
      auto db = grad.tensor(layout.find("output.bias"));
      std::copy(dlogit.begin(), dlogit.end(), db.begin());
    }
  }
  std::vector<double> g(final_input_.cols(), 0.0);
  {
    const auto w = params_.tensor(layout.find("output.weight"));
    for (std::size_t k = 0; k < dlogit.size(); ++k)
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += dlogit[k] * w[k * g.size() + i];
  }

  for (std::size_t l = spec_.hidden_dims.size(); l-- > 0;) {
    const LayerCache& c = layers_[l];
    const std::size_t out = spec_.hidden_dims[l];
    const std::size_t in = c.input.cols();
    const auto name = layer_name(l);
    const bool norm = spec_.norm_at(l) == Normalization::batch_stat;
    const bool coupled = norm && mode_ == ForwardMode::train_stats;

    if (coupled && l > 0) {
      // Batch statistics spread the gradient over every row; finish densely.
      Matrix da(batch, out);
      std::copy(g.begin(), g.end(), da.row(b).begin());
      backward_hidden(l, std::move(da), grad);
      return grad;
    }

    const auto act = c.activation.row(b);
    for (std::size_t j = 0; j < out; ++j) {
      if (spec_.activation == Activation::relu) {
        if (!(act[j] > 0.0)) g[j] = 0.0;
      } else {
        g[j] *= 1.0 - act[j] * act[j];
      }
    }

    auto dw = grad.tensor(layout.find(name + ".weight"));
    std::span<double> dbias;
    if (spec_.bias) dbias = grad.tensor(layout.find(name + ".bias"));
    const auto x = c.input.row(b);

    if (norm) {
      const auto gamma = params_.tensor(layout.find(name + ".gamma"));
      auto dgamma = grad.tensor(layout.find(name + ".gamma"));
      auto dbeta = grad.tensor(layout.find(name + ".beta"));
      const auto xhat = c.normalized.row(b);
      for (std::size_t j = 0; j < out; ++j) {
        dgamma[j] = g[j] * xhat[j];
        dbeta[j] = g[j];
        g[j] *= gamma[j];
      }
      if (coupled) {
        // dz(i,j) = inv_j * g_j * (delta_ib - 1/n - xhat_ij * xhat_bj / n), so
        // dW(j,k) = inv_j g_j (x_bk - mean_k(x) - xhat_bj * (xhat^T x / n)_jk).
        for (std::size_t j = 0; j < out; ++j) {
          const double s = c.inv_std[j] * g[j];
          for (std::size_t k = 0; k < in; ++k)
            dw[j * in + k] = s * (x[k] - c.input_mean[k] - xhat[j] * c.xhat_input(j, k));
          if (spec_.bias) dbias[j] = -s * xhat[j] * c.xhat_mean[j];
        }
        return grad;  // l == 0
      }
      for (std::size_t j = 0; j < out; ++j) g[j] *= c.inv_std[j];
    }

    for (std::size_t j = 0; j < out; ++j)
      for (std::size_t k = 0; k < in; ++k) dw[j * in + k] = g[j] * x[k];
    if (spec_.bias) std::copy(g.begin(), g.end(), dbias.begin());
    if (l > 0) {
      const auto w = params_.tensor(layout.find(name + ".weight"));
      std::vector<double> below(in, 0.0);
      for (std::size_t j = 0; j < out; ++j)
        for (std::size_t k = 0; k < in; ++k) below[k] += g[j] * w[j * in + k];
      g = std::move(below);
    }
  }
  return grad;
}

ParamVector ForwardPass::log_prob_grad(std::size_t b, std::size_t c) const {
  std::vector<double> dlogit(logits_.cols(), 0.0);
  if (raw_probs_(b, c) >= kProbFloor) {
    for (std::size_t k = 0; k < dlogit.size(); ++k) dlogit[k] = -raw_probs_(b, k);
    dlogit[c] += 1.0;
  }
  return backward_row(b, dlogit);
}

Probs forward(const NetworkSpec& spec, const ParamVector& params, const NormStats& stats,
              const Batch& batch, ForwardMode mode) {
  batch.validate(spec.input_dim, spec.num_classes);
  return ForwardPass(spec, params, stats, batch.inputs, mode).probs();
}

double cross_entropy(const Probs& target, const Probs& predicted, CeReduction reduction) {
  if (target.rows() != predicted.rows() || target.cols() != predicted.cols())
    throw ValidationError("cross_entropy: shape mismatch");
  const double scale = reduction == CeReduction::class_mean
                           ? 1.0 / static_cast<double>(target.cols())
                           : 1.0;
  double total = 0.0;
  for (std::size_t b = 0; b < target.rows(); ++b) {
    double row = 0.0;
    for (std::size_t c = 0; c < target.cols(); ++c)
      row += target(b, c) * std::log(std::max(predicted(b, c), kProbFloor));
    total += -scale * row;
  }
  return total / static_cast<double>(target.rows());
}

LossGrad loss_and_grad(const NetworkSpec& spec, const ParamVector& params, const NormStats& stats,
                       const Batch& batch, const Probs& target, ForwardMode mode,
                       CeReduction reduction, const AuxTerm* aux) {
  const std::size_t n = batch.size();
  if (target.rows() != n || target.cols() != spec.num_classes)
    throw ValidationError("loss_and_grad: target shape does not match [B x C]");
  for (double t : target.data())
    if (std::isnan(t)) throw ValidationError("loss_and_grad: NaN in target probabilities");
  if (aux && !aux->grad.same_layout(params))
    throw ValidationError("loss_and_grad: aux gradient layout differs from params");

  ForwardPass pass(spec, params, stats, batch.inputs, mode);
  const std::size_t classes = spec.num_classes;
  const double scale = (reduction == CeReduction::class_mean
                            ? 1.0 / static_cast<double>(classes)
                            : 1.0) /
                       static_cast<double>(n);
  // d(-scale * sum_c t_c log p_c)/dz = -scale * (t_c [c live] - (sum_live t) p)
  Matrix dlogits(n, classes);
  double ce = 0.0;
  for (std::size_t b = 0; b < n; ++b) {
    double live_mass = 0.0;
    for (std::size_t c = 0; c < classes; ++c) {
      ce += target(b, c) * pass.log_prob(b, c);
      if (pass.above_floor(b, c)) {
        dlogits(b, c) = -scale * target(b, c);
        live_mass += target(b, c);
      }
    }
    for (std::size_t c = 0; c < classes; ++c)
      dlogits(b, c) += scale * live_mass * pass.raw_prob(b, c);
  }

  LossGrad out;
  out.ce = -scale * ce;
  out.loss = out.ce;
  out.grad = pass.backward(dlogits);
  if (aux) {
    out.loss += aux->value;
    for (std::size_t i = 0; i < out.grad.size(); ++i) out.grad[i] += aux->grad[i];
  }
  return out;
}

std::vector<ParamVector> per_sample_logprob_grads(const NetworkSpec& spec,
                                                  const ParamVector& params,
                                                  const NormStats& stats, const Batch& batch,
                                                  ForwardMode mode, LabelRule rule, Exec exec) {
  if (batch.size() == 0) throw ValidationError("per_sample_logprob_grads: empty batch");
  ForwardPass pass(spec, params, stats, batch.inputs, mode);
  const auto labels = argmax_rows(pass.probs());
  const auto n = static_cast<std::int64_t>(batch.size());
  std::vector<ParamVector> grads(batch.size());

  auto one = [&](std::int64_t b) {
    const auto sb = static_cast<std::size_t>(b);
    if (rule == LabelRule::argmax_pseudo) {
      grads[sb] = pass.log_prob_grad(sb, static_cast<std::size_t>(labels[sb]));
      return;
    }
    ParamVector acc = params.zeros_like();
    for (std::size_t c = 0; c < spec.num_classes; ++c) {
      const double w = pass.probs()(sb, c);
      const ParamVector g = pass.log_prob_grad(sb, c);
      for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += w * g[i];
    }
    grads[sb] = std::move(acc);
  };
  if (exec == Exec::parallel) {
#pragma omp parallel for schedule(dynamic)
    for (std::int64_t b = 0; b < n; ++b) one(b);
  } else {
    for (std::int64_t b = 0; b < n; ++b) one(b);
  }

  for (std::size_t b = 0; b < grads.size(); ++b)
    if (!grads[b].all_finite())
      throw NumericError("non-finite log-likelihood gradient for sample " + std::to_string(b));
  return grads;
}

void commit_norm_stats(NormStats& running, const NormStats& batch_stats, double momentum) {
  if (running.mean.size() != batch_stats.mean.size())
    throw ValidationError("commit_norm_stats: layer count mismatch");
  for (std::size_t l = 0; l < running.mean.size(); ++l) {
    if (running.mean[l].size() != batch_stats.mean[l].size())
      throw ValidationError("commit_norm_stats: width mismatch");
    for (std::size_t j = 0; j < running.mean[l].size(); ++j) {
      running.mean[l][j] = (1.0 - momentum) * running.mean[l][j] + momentum * batch_stats.mean[l][j];
      running.var[l][j] = (1.0 - momentum) * running.var[l][j] + momentum * batch_stats.var[l][j];
    }
  }
}

std::vector<int> argmax_rows(const Matrix& m) {
  std::vector<int> out(m.rows());
  for (std::size_t b = 0; b < m.rows(); ++b) {
    const auto r = m.row(b);
    out[b] = static_cast<int>(std::max_element(r.begin(), r.end()) - r.begin());
  }
  return out;
}

double error_rate(const Probs& probs, const std::vector<int>& labels) {
  if (labels.size() != probs.rows()) throw ValidationError("error_rate: label count mismatch");
  const auto pred = argmax_rows(probs);
  std::size_t wrong = 0;
  for (std::size_t b = 0; b < labels.size(); ++b) wrong += pred[b] != labels[b] ? 1 : 0;
  return static_cast<double>(wrong) / static_cast<double>(labels.size());
}

}  // namespace psmt
