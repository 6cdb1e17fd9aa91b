#pragma once

#include <cstddef>
#include <span>
#include <stdexcept>
#include <vector>

namespace fada {

/// Plain row-major dense matrix for the non-differentiable paths
/// (datasets, feature batches, clustering, divergence estimation).
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c, 0.0) {}
  Matrix(std::size_t r, std::size_t c, std::vector<double> d)
      : rows(r), cols(c), data(std::move(d)) {
    if (data.size() != rows * cols)
      throw std::invalid_argument("Matrix: data size does not match rows*cols");
  }

  double& at(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  double at(std::size_t r, std::size_t c) const { return data[r * cols + c]; }

  std::span<const double> row(std::size_t r) const {
    return {data.data() + r * cols, cols};
  }
  std::span<double> row(std::size_t r) {
    return {data.data() + r * cols, cols};
  }

  bool empty() const { return rows == 0; }

  /// New matrix holding the given subset of rows, in order.
  Matrix gather_rows(std::span<const std::size_t> idx) const {
    Matrix out(idx.size(), cols);
    for (std::size_t i = 0; i < idx.size(); ++i) {
      auto src = row(idx[i]);
      std::copy(src.begin(), src.end(), out.row(i).begin());
    }
    return out;
  }

  static Matrix vstack(const Matrix& a, const Matrix& b) {
    if (a.empty()) return b;
    if (b.empty()) return a;
    if (a.cols != b.cols) throw std::invalid_argument("Matrix::vstack: column mismatch");
    Matrix out(a.rows + b.rows, a.cols);
    std::copy(a.data.begin(), a.data.end(), out.data.begin());
    std::copy(b.data.begin(), b.data.end(), out.data.begin() + static_cast<std::ptrdiff_t>(a.data.size()));
    return out;
  }
};

}  // namespace fada
