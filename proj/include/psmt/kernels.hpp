#pragma once

#include <cstddef>
#include <span>

#include "psmt/matrix.hpp"

namespace psmt {

/// Execution policy for the data-parallel kernels. `serial` is the reference
/// path; `parallel` splits the outer loop across OpenMP threads. Both paths
/// accumulate every output element in the same order, so results are
/// bit-identical.
enum class Exec { serial, parallel };

namespace kernels {

// out[B x n_out] = x[B x n_in] * w^T + bias, w stored row-major [n_out x n_in].
// `bias` may be empty.
void affine(const Matrix& x, std::span<const double> w, std::span<const double> bias,
            std::size_t n_out, Matrix& out, Exec exec = Exec::serial);

// grad_w[n_out x n_in] = dz^T * x  (overwrites grad_w).
void weight_grad(const Matrix& dz, const Matrix& x, std::span<double> grad_w,
                 Exec exec = Exec::serial);

// dx[B x n_in] = dz[B x n_out] * w.
void input_grad(const Matrix& dz, std::span<const double> w, std::size_t n_in, Matrix& dx,
                Exec exec = Exec::serial);

// out[j] = sum_b m(b, j), summed in row order.
void column_sums(const Matrix& m, std::span<double> out);

// out[j] = (1/rows) sum_b rows[b][j]^2, rows given as a list of equal-length spans.
// The sum over b runs in list order for every j.
void mean_of_squares(std::span<const std::span<const double>> rows, std::span<double> out,
                     Exec exec = Exec::serial);

}  // namespace kernels
}  // namespace psmt
