#include "psmt/kernels.hpp"

#include <algorithm>
#include <cassert>
#include <cstdint>

namespace psmt::kernels {

namespace {

void affine_row(const Matrix& x, std::span<const double> w, std::span<const double> bias,
                std::size_t n_out, std::size_t b, Matrix& out) {
  const std::size_t n_in = x.cols();
  const auto xr = x.row(b);
  auto orow = out.row(b);
  for (std::size_t o = 0; o < n_out; ++o) {
    const double* wr = w.data() + o * n_in;
    double acc = 0.0;
    for (std::size_t i = 0; i < n_in; ++i) acc += xr[i] * wr[i];
    orow[o] = bias.empty() ? acc : acc + bias[o];
  }
}

void weight_grad_row(const Matrix& dz, const Matrix& x, std::span<double> grad_w, std::size_t o) {
  const std::size_t n_in = x.cols();
  double* gr = grad_w.data() + o * n_in;
  std::fill(gr, gr + n_in, 0.0);
  for (std::size_t b = 0; b < dz.rows(); ++b) {
    const double d = dz(b, o);
    if (d == 0.0) continue;
    const auto xr = x.row(b);
    for (std::size_t i = 0; i < n_in; ++i) gr[i] += d * xr[i];
  }
}

void input_grad_row(const Matrix& dz, std::span<const double> w, std::size_t n_in,
                    std::size_t b, Matrix& dx) {
  auto dr = dx.row(b);
  std::fill(dr.begin(), dr.end(), 0.0);
  const auto dzr = dz.row(b);
  for (std::size_t o = 0; o < dz.cols(); ++o) {
    const double d = dzr[o];
    if (d == 0.0) continue;
    const double* wr = w.data() + o * n_in;
    for (std::size_t i = 0; i < n_in; ++i) dr[i] += d * wr[i];
  }
}

}  // namespace

void affine(const Matrix& x, std::span<const double> w, std::span<const double> bias,
            std::size_t n_out, Matrix& out, Exec exec) {
  assert(w.size() == n_out * x.cols());
  if (out.rows() != x.rows() || out.cols() != n_out) out = Matrix(x.rows(), n_out);
  const auto rows = static_cast<std::int64_t>(x.rows());
  if (exec == Exec::parallel) {
#pragma omp parallel for schedule(static)
    for (std::int64_t b = 0; b < rows; ++b) affine_row(x, w, bias, n_out, b, out);
  } else {
    for (std::int64_t b = 0; b < rows; ++b) affine_row(x, w, bias, n_out, b, out);
  }
}

void weight_grad(const Matrix& dz, const Matrix& x, std::span<double> grad_w, Exec exec) {
  assert(dz.rows() == x.rows());
  assert(grad_w.size() == dz.cols() * x.cols());
  const auto n_out = static_cast<std::int64_t>(dz.cols());
  if (exec == Exec::parallel) {
#pragma omp parallel for schedule(static)
    for (std::int64_t o = 0; o < n_out; ++o) weight_grad_row(dz, x, grad_w, o);
  } else {
    for (std::int64_t o = 0; o < n_out; ++o) weight_grad_row(dz, x, grad_w, o);
  }
}

void input_grad(const Matrix& dz, std::span<const double> w, std::size_t n_in, Matrix& dx,
                Exec exec) {
  assert(w.size() == dz.cols() * n_in);
  if (dx.rows() != dz.rows() || dx.cols() != n_in) dx = Matrix(dz.rows(), n_in);
  const auto rows = static_cast<std::int64_t>(dz.rows());
  if (exec == Exec::parallel) {
#pragma omp parallel for schedule(static)
    for (std::int64_t b = 0; b < rows; ++b) input_grad_row(dz, w, n_in, b, dx);
  } else {
    for (std::int64_t b = 0; b < rows; ++b) input_grad_row(dz, w, n_in, b, dx);
  }
}

void column_sums(const Matrix& m, std::span<double> out) {
  assert(out.size() == m.cols());
  std::fill(out.begin(), out.end(), 0.0);
  for (std::size_t b = 0; b < m.rows(); ++b) {
    const auto r = m.row(b);
    for (std::size_t j = 0; j < m.cols(); ++j) out[j] += r[j];
  }
}

void mean_of_squares(std::span<const std::span<const double>> rows, std::span<double> out,
                     Exec exec) {
  const auto n = static_cast<std::int64_t>(out.size());
  const double inv = rows.empty() ? 0.0 : 1.0 / static_cast<double>(rows.size());
  auto body = [&](std::int64_t j) {
    double acc = 0.0;
    for (const auto& r : rows) acc += r[j] * r[j];
    out[j] = acc * inv;
  };
  if (exec == Exec::parallel) {
#pragma omp parallel for schedule(static)
    for (std::int64_t j = 0; j < n; ++j) body(j);
  } else {
    for (std::int64_t j = 0; j < n; ++j) body(j);
  }
}

}  // namespace psmt::kernels
